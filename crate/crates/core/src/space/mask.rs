use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CellKind, OpKind, EDGES_PER_CELL};
use crate::error::{Error, Result};

/// Active operations per edge for each cell kind; bit `i` of an entry is `OpKind::ALL[i]`.
///
/// Every normal cell uses the normal rows, every reduction cell the reduction rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchMask {
    bits: [[u8; EDGES_PER_CELL]; 2],
}

const FULL: u8 = (1 << OpKind::COUNT) - 1;

impl ArchMask {
    /// The supernet: every operation on every edge.
    pub fn full() -> Self {
        ArchMask {
            bits: [[FULL; EDGES_PER_CELL]; 2],
        }
    }

    /// Every edge of both cell kinds carries exactly `ops`.
    pub fn uniform(ops: &[OpKind]) -> Result<Self> {
        let bits = ops.iter().fold(0u8, |acc, op| acc | (1 << op.index()));
        if bits == 0 {
            return Err(Error::Usage("a mask edge needs at least one operation".into()));
        }
        Ok(ArchMask {
            bits: [[bits; EDGES_PER_CELL]; 2],
        })
    }

    pub fn is_active(&self, kind: CellKind, edge: usize, op: OpKind) -> bool {
        self.bits[kind.index()][edge] & (1 << op.index()) != 0
    }

    pub fn active_ops(&self, kind: CellKind, edge: usize) -> Vec<OpKind> {
        OpKind::ALL
            .into_iter()
            .filter(|&op| self.is_active(kind, edge, op))
            .collect()
    }

    pub fn num_active(&self, kind: CellKind, edge: usize) -> usize {
        self.bits[kind.index()][edge].count_ones() as usize
    }

    pub fn is_finalized(&self, kind: CellKind, edge: usize) -> bool {
        self.num_active(kind, edge) == 1
    }

    pub fn finalized_edges(&self, kind: CellKind) -> usize {
        (0..EDGES_PER_CELL).filter(|&e| self.is_finalized(kind, e)).count()
    }

    pub fn is_fully_finalized(&self) -> bool {
        CellKind::ALL
            .into_iter()
            .all(|k| self.finalized_edges(k) == EDGES_PER_CELL)
    }

    /// The same mask with `op` removed from one edge.
    pub fn without(&self, kind: CellKind, edge: usize, op: OpKind) -> Result<Self> {
        if !self.is_active(kind, edge, op) {
            return Err(Error::Usage(format!("{op} is not active on {kind} edge {edge}")));
        }
        if self.num_active(kind, edge) == 1 {
            return Err(Error::Usage(format!(
                "removing {op} would leave {kind} edge {edge} empty"
            )));
        }
        let mut out = self.clone();
        out.bits[kind.index()][edge] &= !(1 << op.index());
        Ok(out)
    }

    /// Finalizes an edge to the single operation `op`.
    pub fn keep_only(&mut self, kind: CellKind, edge: usize, op: OpKind) -> Result<()> {
        if !self.is_active(kind, edge, op) {
            return Err(Error::Usage(format!("{op} is not active on {kind} edge {edge}")));
        }
        self.bits[kind.index()][edge] = 1 << op.index();
        Ok(())
    }

    pub fn set_edge(&mut self, kind: CellKind, edge: usize, ops: &[OpKind]) -> Result<()> {
        let bits = ops.iter().fold(0u8, |acc, op| acc | (1 << op.index()));
        if bits == 0 {
            return Err(Error::Usage(format!("{kind} edge {edge} needs at least one operation")));
        }
        self.bits[kind.index()][edge] = bits;
        Ok(())
    }

    /// True when every operation active here is also active in `other`.
    pub fn is_subset_of(&self, other: &ArchMask) -> bool {
        self.bits
            .iter()
            .flatten()
            .zip(other.bits.iter().flatten())
            .all(|(&a, &b)| a & !b == 0)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in CellKind::ALL {
            for edge in 0..EDGES_PER_CELL {
                if self.num_active(kind, edge) == 0 {
                    return Err(Error::Usage(format!("{kind} edge {edge} has no active operation")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = MaskFile {
            normal: self.rows(CellKind::Normal),
            reduction: self.rows(CellKind::Reduction),
        };
        serde_json::to_string_pretty(&file).expect("mask serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MaskFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("mask file: {e}")))?;
        let mut mask = ArchMask {
            bits: [[0; EDGES_PER_CELL]; 2],
        };
        for (kind, rows) in [(CellKind::Normal, &file.normal), (CellKind::Reduction, &file.reduction)] {
            if rows.len() != EDGES_PER_CELL || rows.keys().any(|&e| e >= EDGES_PER_CELL) {
                return Err(Error::Format(format!(
                    "mask file: {kind} cell must list edges 0..{EDGES_PER_CELL}"
                )));
            }
            for (&edge, ops) in rows {
                mask.set_edge(kind, edge, ops)
                    .map_err(|e| Error::Format(format!("mask file: {e}")))?;
            }
        }
        Ok(mask)
    }

    fn rows(&self, kind: CellKind) -> BTreeMap<usize, Vec<OpKind>> {
        (0..EDGES_PER_CELL).map(|e| (e, self.active_ops(kind, e))).collect()
    }
}

/// On-disk mask schema: cell kind -> edge index -> active operation names.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    normal: BTreeMap<usize, Vec<OpKind>>,
    reduction: BTreeMap<usize, Vec<OpKind>>,
}
