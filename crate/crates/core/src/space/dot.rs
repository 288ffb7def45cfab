use std::fmt::Write;

use super::{edge_endpoints, ArchMask, CellKind, EDGES_PER_CELL, NODES_PER_CELL};

fn node_id(state: usize) -> String {
    match state {
        0 => "\"c_{k-2}\"".to_string(),
        1 => "\"c_{k-1}\"".to_string(),
        s => format!("\"{}\"", s - 2),
    }
}

/// One Graphviz digraph per cell kind; every active operation is a labeled edge.
pub fn export_dot(mask: &ArchMask) -> String {
    let mut out = String::new();
    for kind in CellKind::ALL {
        writeln!(out, "digraph {kind} {{").unwrap();
        out.push_str("  rankdir=LR;\n");
        out.push_str("  node [shape=box, style=filled, fillcolor=lightblue];\n");
        out.push_str("  \"c_{k-2}\" [fillcolor=darkseagreen2];\n");
        out.push_str("  \"c_{k-1}\" [fillcolor=darkseagreen2];\n");
        for n in 0..NODES_PER_CELL {
            writeln!(out, "  \"{n}\";").unwrap();
        }
        out.push_str("  \"c_{k}\" [fillcolor=palegoldenrod];\n");
        for edge in 0..EDGES_PER_CELL {
            let (src, dst) = edge_endpoints(edge);
            for op in mask.active_ops(kind, edge) {
                writeln!(out, "  {} -> {} [label=\"{op}\"];", node_id(src), node_id(dst + 2)).unwrap();
            }
        }
        for n in 0..NODES_PER_CELL {
            writeln!(out, "  \"{n}\" -> \"c_{{k}}\";").unwrap();
        }
        out.push_str("}\n");
    }
    out
}
