//! Analytic parameter, FLOP and activation accounting for a masked supernet.
//!
//! Conventions: one multiply-accumulate counts as one FLOP; pooling, skip, `none`,
//! normalization and elementwise ops cost zero FLOPs. Activations are every tensor the
//! forward pass materializes for a batch of one, excluding the input and the weights.

use super::{edge_endpoints, ArchMask, CellLayout, OpKind, SupernetSpec};
use super::{EDGES_PER_CELL, NODES_PER_CELL};

/// Multiply-accumulates of one convolution producing `out_h x out_w` maps.
pub fn conv_macs(c_in: usize, c_out: usize, kernel: usize, out_hw: (usize, usize), groups: usize) -> usize {
    out_hw.0 * out_hw.1 * c_out * (c_in / groups) * kernel * kernel
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub params: usize,
    pub flops: usize,
    pub activations: usize,
}

impl std::ops::AddAssign for OpCost {
    fn add_assign(&mut self, o: OpCost) {
        self.params += o.params;
        self.flops += o.flops;
        self.activations += o.activations;
    }
}

/// Cost of one candidate operation on a `channels`-wide edge.
pub fn op_cost(op: OpKind, channels: usize, in_hw: (usize, usize), out_hw: (usize, usize), stride: usize) -> OpCost {
    let c = channels;
    let (inn, out) = (c * in_hw.0 * in_hw.1, c * out_hw.0 * out_hw.1);
    match op {
        OpKind::None => OpCost::default(),
        OpKind::SkipConnect => OpCost {
            activations: if stride == 1 { 0 } else { out },
            ..OpCost::default()
        },
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => OpCost {
            activations: 2 * out,
            ..OpCost::default()
        },
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = op.kernel_size();
            OpCost {
                params: 2 * (c * k * k + c * c),
                flops: 2 * (conv_macs(c, c, k, out_hw, c) + conv_macs(c, c, 1, out_hw, 1)),
                activations: inn + 7 * out,
            }
        }
        OpKind::DilConv3x3 => OpCost {
            params: c * 9 + c * c,
            flops: conv_macs(c, c, 3, out_hw, c) + conv_macs(c, c, 1, out_hw, 1),
            activations: inn + 3 * out,
        },
    }
}

fn edge_in_hw(cell: &CellLayout, edge: usize) -> (usize, usize) {
    let (src, _) = edge_endpoints(edge);
    if src < 2 {
        cell.in_hw
    } else {
        cell.out_hw
    }
}

fn stem_cost(spec: &SupernetSpec) -> OpCost {
    let [in_c, h, w] = spec.input_shape;
    let sc = spec.stem_channels();
    OpCost {
        params: sc * in_c * 9,
        flops: conv_macs(in_c, sc, 3, (h, w), 1),
        activations: 2 * sc * h * w,
    }
}

fn preprocess_cost(c_in: usize, c_out: usize, in_hw: (usize, usize), out_hw: (usize, usize)) -> OpCost {
    OpCost {
        params: c_in * c_out,
        flops: conv_macs(c_in, c_out, 1, out_hw, 1),
        activations: c_in * in_hw.0 * in_hw.1 + 2 * c_out * out_hw.0 * out_hw.1,
    }
}

fn classifier_cost(spec: &SupernetSpec) -> OpCost {
    let f = spec.final_channels();
    OpCost {
        params: f * spec.num_classes + spec.num_classes,
        flops: f * spec.num_classes,
        activations: f + spec.num_classes,
    }
}

fn cell_cost(cell: &CellLayout, mask: &ArchMask) -> OpCost {
    let mut cost = OpCost::default();
    cost += preprocess_cost(cell.c_pp, cell.channels, cell.in_hw_pp, cell.in_hw);
    cost += preprocess_cost(cell.c_p, cell.channels, cell.in_hw, cell.in_hw);
    let out = cell.channels * cell.out_hw.0 * cell.out_hw.1;
    let mut edge = 0;
    for node in 0..NODES_PER_CELL {
        let mut contributing = 0;
        for _ in 0..2 + node {
            let active = mask.active_ops(cell.kind, edge);
            let mut non_none = 0;
            for &op in &active {
                cost += op_cost(
                    op,
                    cell.channels,
                    edge_in_hw(cell, edge),
                    cell.out_hw,
                    cell.edge_stride(edge),
                );
                non_none += usize::from(op != OpKind::None);
            }
            // mixture: running sum, then one rescale when several ops share the edge
            if non_none >= 2 {
                cost.activations += (non_none - 1) * out;
            }
            if non_none >= 1 && active.len() > 1 {
                cost.activations += out;
            }
            contributing += usize::from(non_none >= 1);
            edge += 1;
        }
        cost.activations += match contributing {
            0 => out,
            m => (m - 1) * out,
        };
    }
    debug_assert_eq!(edge, EDGES_PER_CELL);
    cost.activations += NODES_PER_CELL * out;
    cost
}

fn total_cost(mask: &ArchMask, spec: &SupernetSpec) -> OpCost {
    let mut cost = stem_cost(spec);
    for cell in spec.layout() {
        cost += cell_cost(&cell, mask);
    }
    cost += classifier_cost(spec);
    cost
}

/// Learnable scalars of the masked network, stem and classifier included.
pub fn count_params(mask: &ArchMask, spec: &SupernetSpec) -> usize {
    total_cost(mask, spec).params
}

/// Multiply-accumulates of one forward pass at batch size one.
pub fn count_flops(mask: &ArchMask, spec: &SupernetSpec) -> usize {
    total_cost(mask, spec).flops
}

/// Activation elements materialized by one forward pass at batch size one.
pub fn activation_elements(mask: &ArchMask, spec: &SupernetSpec) -> usize {
    total_cost(mask, spec).activations
}

/// Bytes of 32-bit weights plus 32-bit activations for a single-sample forward pass.
pub fn estimated_model_size(mask: &ArchMask, spec: &SupernetSpec) -> usize {
    let cost = total_cost(mask, spec);
    4 * (cost.params + cost.activations)
}
