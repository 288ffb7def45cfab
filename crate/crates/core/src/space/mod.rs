//! DARTS-style search space: cell layout, operation masks, masked parameter views,
//! the supernet forward pass and cost accounting.

mod accounting;
mod dot;
mod mask;
mod network;

pub use accounting::{
    activation_elements, conv_macs, count_flops, count_params, estimated_model_size, op_cost, OpCost,
};
pub use dot::export_dot;
pub use mask::ArchMask;
pub use network::{accuracy, build_supernet, forward, loss_and_grads, predict, Forward, BN_EPS};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Candidate operations, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::None,
        OpKind::SkipConnect,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
    ];
    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::None => "none",
            OpKind::SkipConnect => "skip_connect",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
        }
    }

    /// Learnable tensor names (relative to the op) and their shapes for `channels`.
    pub fn param_shapes(self, channels: usize) -> Vec<(&'static str, [usize; 4])> {
        let c = channels;
        match self {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = self.kernel_size();
                vec![
                    ("dw1", [c, 1, k, k]),
                    ("pw1", [c, c, 1, 1]),
                    ("dw2", [c, 1, k, k]),
                    ("pw2", [c, c, 1, 1]),
                ]
            }
            OpKind::DilConv3x3 => vec![("dw", [c, 1, 3, 3]), ("pw", [c, c, 1, 1])],
            _ => Vec::new(),
        }
    }

    pub(crate) fn kernel_size(self) -> usize {
        match self {
            OpKind::SepConv5x5 => 5,
            _ => 3,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown operation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub const ALL: [CellKind; 2] = [CellKind::Normal, CellKind::Reduction];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Intermediate nodes per cell.
pub const NODES_PER_CELL: usize = 4;
/// Edges per cell: node `j` receives one edge from each input and each earlier intermediate node.
pub const EDGES_PER_CELL: usize = 14;

/// `(source state, destination node)` of an edge. Sources 0 and 1 are the cell inputs,
/// source `2 + j` is intermediate node `j`.
pub fn edge_endpoints(edge: usize) -> (usize, usize) {
    let mut start = 0;
    for node in 0..NODES_PER_CELL {
        let fan_in = 2 + node;
        if edge < start + fan_in {
            return (edge - start, node);
        }
        start += fan_in;
    }
    panic!("edge index {edge} out of range");
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupernetSpec {
    pub num_cells: usize,
    pub init_channels: usize,
    pub stem_multiplier: usize,
    pub num_classes: usize,
    /// `[channels, height, width]` of one input image.
    pub input_shape: [usize; 3],
    /// Zero-based positions of reduction cells.
    pub reduction_cells: Vec<usize>,
}

impl SupernetSpec {
    pub fn new(num_cells: usize, init_channels: usize, num_classes: usize, input_shape: [usize; 3]) -> Self {
        SupernetSpec {
            num_cells,
            init_channels,
            stem_multiplier: 3,
            num_classes,
            input_shape,
            reduction_cells: Self::default_reductions(num_cells),
        }
    }

    /// Reduction cells at one and two thirds of the depth: positions 3 and 6 (1-based) of 8.
    /// Two cells give `[normal, reduction]`; a single cell is normal.
    pub fn default_reductions(num_cells: usize) -> Vec<usize> {
        match num_cells {
            0 | 1 => Vec::new(),
            2 => vec![1],
            n => vec![n / 3, 2 * n / 3],
        }
    }

    /// The reference search network: 8 cells, 16 initial channels, 32x32 RGB.
    pub fn darts(num_classes: usize) -> Self {
        Self::new(8, 16, num_classes, [3, 32, 32])
    }

    pub fn cell_kind(&self, cell: usize) -> CellKind {
        if self.reduction_cells.contains(&cell) {
            CellKind::Reduction
        } else {
            CellKind::Normal
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_cells == 0 {
            return bad("num_cells must be at least 1".into());
        }
        if self.init_channels == 0 || self.stem_multiplier == 0 {
            return bad("init_channels and stem_multiplier must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} has a zero dimension", self.input_shape));
        }
        if let Some(&r) = self.reduction_cells.iter().find(|&&r| r >= self.num_cells) {
            return bad(format!("reduction cell {r} beyond num_cells {}", self.num_cells));
        }
        Ok(())
    }

    /// Channel and spatial bookkeeping for every cell.
    pub fn layout(&self) -> Vec<CellLayout> {
        let [_, h, w] = self.input_shape;
        let stem_c = self.stem_multiplier * self.init_channels;
        let (mut c_pp, mut c_p, mut c) = (stem_c, stem_c, self.init_channels);
        let (mut hw_pp, mut hw_p) = ((h, w), (h, w));
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(self.num_cells);
        for i in 0..self.num_cells {
            let kind = self.cell_kind(i);
            if kind == CellKind::Reduction {
                c *= 2;
            }
            let out_hw = match kind {
                CellKind::Reduction => (hw_p.0.div_ceil(2), hw_p.1.div_ceil(2)),
                CellKind::Normal => hw_p,
            };
            cells.push(CellLayout {
                index: i,
                kind,
                c_pp,
                c_p,
                channels: c,
                reduction_prev,
                in_hw_pp: hw_pp,
                in_hw: hw_p,
                out_hw,
            });
            reduction_prev = kind == CellKind::Reduction;
            c_pp = c_p;
            c_p = NODES_PER_CELL * c;
            hw_pp = hw_p;
            hw_p = out_hw;
        }
        cells
    }

    pub fn stem_channels(&self) -> usize {
        self.stem_multiplier * self.init_channels
    }

    /// Channels entering the classifier.
    pub fn final_channels(&self) -> usize {
        self.layout()
            .last()
            .map(|c| NODES_PER_CELL * c.channels)
            .unwrap_or_else(|| self.stem_channels())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellLayout {
    pub index: usize,
    pub kind: CellKind,
    pub c_pp: usize,
    pub c_p: usize,
    /// Channels of every edge operation and intermediate node.
    pub channels: usize,
    pub reduction_prev: bool,
    pub in_hw_pp: (usize, usize),
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl CellLayout {
    pub fn edge_stride(&self, edge: usize) -> usize {
        let (src, _) = edge_endpoints(edge);
        if self.kind == CellKind::Reduction && src < 2 {
            2
        } else {
            1
        }
    }

    pub fn prefix(&self) -> String {
        format!("{}/cell{}", self.kind, self.index)
    }
}

pub(crate) fn edge_param_name(cell: &CellLayout, edge: usize, op: OpKind, layer: &str) -> String {
    format!("{}/edge{edge:02}/{}/{layer}", cell.prefix(), op.name())
}

/// Classifies a parameter name: `Some((kind, edge, op))` for an edge-operation tensor,
/// `None` for stem, preprocessing and classifier tensors.
pub fn parse_edge_param(name: &str) -> Result<Option<(CellKind, usize, OpKind)>> {
    let parts: Vec<&str> = name.split('/').collect();
    let Some(edge_part) = parts.get(2).filter(|p| p.starts_with("edge")) else {
        return Ok(None);
    };
    let bad = || Error::Usage(format!("parameter `{name}` does not belong to this search space"));
    let kind = match parts[0] {
        "normal" => CellKind::Normal,
        "reduction" => CellKind::Reduction,
        _ => return Err(bad()),
    };
    let edge: usize = edge_part[4..].parse().map_err(|_| bad())?;
    if edge >= EDGES_PER_CELL || parts.len() != 5 {
        return Err(bad());
    }
    let op: OpKind = parts[3].parse().map_err(|_| bad())?;
    Ok(Some((kind, edge, op)))
}

/// The weight-sharing projection: the entries of `w` whose operation is active in `mask`,
/// plus every mask-independent entry.
pub fn mask_weights(w: &ParamStore, mask: &ArchMask) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in w {
        let keep = match parse_edge_param(name)? {
            Some((kind, edge, op)) => mask.is_active(kind, edge, op),
            None => true,
        };
        if keep {
            out.insert(name.clone(), t.clone());
        }
    }
    Ok(out)
}
