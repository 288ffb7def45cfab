use std::collections::BTreeMap;

use rand::Rng;

use super::{edge_endpoints, edge_param_name, ArchMask, CellLayout, OpKind, SupernetSpec};
use super::{EDGES_PER_CELL, NODES_PER_CELL};
use crate::autograd::{Conv2dConfig, PoolConfig, PoolKind, Tape, Tensor, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;

pub const BN_EPS: f32 = 1e-5;

/// Every learnable tensor of the full supernet, in construction order.
pub(crate) fn param_manifest(spec: &SupernetSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let in_c = spec.input_shape[0];
    out.push(("stem/conv".to_string(), vec![spec.stem_channels(), in_c, 3, 3]));
    for cell in spec.layout() {
        let p = cell.prefix();
        out.push((format!("{p}/pre0/conv"), vec![cell.channels, cell.c_pp, 1, 1]));
        out.push((format!("{p}/pre1/conv"), vec![cell.channels, cell.c_p, 1, 1]));
        for edge in 0..EDGES_PER_CELL {
            for op in OpKind::ALL {
                for (layer, shape) in op.param_shapes(cell.channels) {
                    out.push((edge_param_name(&cell, edge, op, layer), shape.to_vec()));
                }
            }
        }
    }
    let feat = spec.final_channels();
    out.push(("classifier/weight".to_string(), vec![spec.num_classes, feat]));
    out.push(("classifier/bias".to_string(), vec![spec.num_classes]));
    out
}

/// Supernet weights with Kaiming-uniform fan-in initialization, seeded per parameter name.
pub fn build_supernet(spec: &SupernetSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let feat = spec.final_channels() as f64;
    let mut store = ParamStore::new();
    for (name, shape) in param_manifest(spec) {
        let mut r = rng::stream(seed, &[rng::TAG_INIT, rng::name_hash(&name)]);
        let bound = if name == "classifier/bias" {
            1.0 / feat.sqrt()
        } else {
            let fan_in: usize = shape[1..].iter().product();
            (6.0 / fan_in as f64).sqrt()
        };
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.random_range(-bound..bound) as f32).collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

struct Binder<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    requires_grad: bool,
}

impl Binder<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Usage(format!("missing parameter `{name}` for the requested mask")))?;
        let v = self.tape.leaf(t.clone(), self.requires_grad);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, name: &str, cfg: Conv2dConfig) -> Result<Var> {
        let k = self.param(name)?;
        Ok(self.tape.conv2d(x, k, cfg)?)
    }

    fn relu_conv_bn(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let r = self.tape.relu(x)?;
        let c = self.conv(r, name, Conv2dConfig::new(stride, 0, 1, 1))?;
        Ok(self.tape.batch_norm(c, BN_EPS)?)
    }

    fn op(&mut self, cell: &CellLayout, edge: usize, op: OpKind, x: Var) -> Result<Option<Var>> {
        let stride = cell.edge_stride(edge);
        let c = cell.channels;
        let name = |layer: &str| edge_param_name(cell, edge, op, layer);
        let out = match op {
            OpKind::None => return Ok(None),
            OpKind::SkipConnect if stride == 1 => x,
            OpKind::SkipConnect => self.tape.subsample(x, stride)?,
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => {
                let kind = if op == OpKind::MaxPool3x3 {
                    PoolKind::Max
                } else {
                    PoolKind::Avg
                };
                let p = self.tape.pool2d(x, PoolConfig::new(kind, 3, stride, 1))?;
                self.tape.batch_norm(p, BN_EPS)?
            }
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = op.kernel_size();
                let pad = k / 2;
                let mut y = self.tape.relu(x)?;
                y = self.conv(y, &name("dw1"), Conv2dConfig::new(stride, pad, 1, c))?;
                y = self.conv(y, &name("pw1"), Conv2dConfig::default())?;
                y = self.tape.batch_norm(y, BN_EPS)?;
                y = self.tape.relu(y)?;
                y = self.conv(y, &name("dw2"), Conv2dConfig::new(1, pad, 1, c))?;
                y = self.conv(y, &name("pw2"), Conv2dConfig::default())?;
                self.tape.batch_norm(y, BN_EPS)?
            }
            OpKind::DilConv3x3 => {
                let mut y = self.tape.relu(x)?;
                y = self.conv(y, &name("dw"), Conv2dConfig::new(stride, 2, 2, c))?;
                y = self.conv(y, &name("pw"), Conv2dConfig::default())?;
                self.tape.batch_norm(y, BN_EPS)?
            }
        };
        Ok(Some(out))
    }

    /// Uniform mixture over the active operations; `None` when only `none` is active.
    fn mixed_edge(&mut self, cell: &CellLayout, mask: &ArchMask, edge: usize, x: Var) -> Result<Option<Var>> {
        let active = mask.active_ops(cell.kind, edge);
        let mut sum: Option<Var> = None;
        for &op in &active {
            if let Some(y) = self.op(cell, edge, op, x)? {
                sum = Some(match sum {
                    None => y,
                    Some(acc) => self.tape.add(acc, y)?,
                });
            }
        }
        match sum {
            Some(s) if active.len() > 1 => Ok(Some(self.tape.scale(s, 1.0 / active.len() as f32)?)),
            other => Ok(other),
        }
    }

    fn cell(&mut self, cell: &CellLayout, mask: &ArchMask, s0: Var, s1: Var) -> Result<Var> {
        let p = cell.prefix();
        let stride0 = if cell.reduction_prev { 2 } else { 1 };
        let p0 = self.relu_conv_bn(s0, &format!("{p}/pre0/conv"), stride0)?;
        let p1 = self.relu_conv_bn(s1, &format!("{p}/pre1/conv"), 1)?;
        let mut states = vec![p0, p1];
        let mut edge = 0;
        for _node in 0..NODES_PER_CELL {
            let mut acc: Option<Var> = None;
            for _ in 0..states.len() {
                let (src, _) = edge_endpoints(edge);
                if let Some(y) = self.mixed_edge(cell, mask, edge, states[src])? {
                    acc = Some(match acc {
                        None => y,
                        Some(a) => self.tape.add(a, y)?,
                    });
                }
                edge += 1;
            }
            let node = match acc {
                Some(v) => v,
                None => {
                    let n = self.tape.shape(p1)[0];
                    let (h, w) = cell.out_hw;
                    self.tape.constant(Tensor::zeros(&[n, cell.channels, h, w]))
                }
            };
            states.push(node);
        }
        Ok(self.tape.concat_channels(&states[2..])?)
    }
}

/// Output of a recorded forward pass.
pub struct Forward {
    pub logits: Var,
    /// Parameter name -> tape leaf, for every parameter the mask touched.
    pub bound: BTreeMap<String, Var>,
}

/// Records the masked supernet on `tape`. Only parameters of active operations are read.
pub fn forward(
    tape: &mut Tape,
    params: &ParamStore,
    spec: &SupernetSpec,
    mask: &ArchMask,
    input: Var,
    requires_grad: bool,
) -> Result<Forward> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 4 || shape[1..] != spec.input_shape {
        return Err(Error::Usage(format!(
            "input shape {shape:?} does not match [N, {:?}]",
            spec.input_shape
        )));
    }
    let mut b = Binder {
        tape,
        params,
        bound: BTreeMap::new(),
        requires_grad,
    };
    let stem = b.conv(input, "stem/conv", Conv2dConfig::new(1, 1, 1, 1))?;
    let stem = b.tape.batch_norm(stem, BN_EPS)?;
    let (mut s0, mut s1) = (stem, stem);
    for cell in spec.layout() {
        let out = b.cell(&cell, mask, s0, s1)?;
        s0 = s1;
        s1 = out;
    }
    let pooled = b.tape.global_avg_pool(s1)?;
    let w = b.param("classifier/weight")?;
    let bias = b.param("classifier/bias")?;
    let logits = b.tape.linear(pooled, w, Some(bias))?;
    Ok(Forward { logits, bound: b.bound })
}

/// Mean cross-entropy on one batch and its gradient for every parameter the mask uses.
pub fn loss_and_grads(
    params: &ParamStore,
    spec: &SupernetSpec,
    mask: &ArchMask,
    images: Tensor,
    labels: &[usize],
) -> Result<(f32, ParamStore)> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let fwd = forward(&mut tape, params, spec, mask, x, true)?;
    let loss = tape.cross_entropy(fwd.logits, labels)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let store = fwd
        .bound
        .into_iter()
        .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
        .collect();
    Ok((value, store))
}

pub fn predict(params: &ParamStore, spec: &SupernetSpec, mask: &ArchMask, images: Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let fwd = forward(&mut tape, params, spec, mask, x, false)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Top-1 accuracy over `indices`, evaluated in near-equal chunks of at most `eval_batch`
/// samples (normalization uses each chunk's statistics).
pub fn accuracy(
    params: &ParamStore,
    spec: &SupernetSpec,
    mask: &ArchMask,
    data: &LabeledDataset,
    indices: &[usize],
    eval_batch: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Usage("cannot evaluate accuracy on an empty split".into()));
    }
    let chunks = indices.len().div_ceil(eval_batch.max(1));
    let base = indices.len() / chunks;
    let extra = indices.len() % chunks;
    let mut correct = 0usize;
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < extra);
        let chunk = &indices[start..start + len];
        start += len;
        let (images, labels) = data.gather(chunk)?;
        let logits = predict(params, spec, mask, images)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Index of the largest value, first on ties.
pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
