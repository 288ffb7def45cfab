use super::tensor::Float;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Divisor is always `k*k`, padded positions included.
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolConfig {
    pub kind: PoolKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolConfig {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize, padding: usize) -> Self {
        PoolConfig {
            kind,
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        // every window must overlap at least one real position
        if self.padding >= self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

pub(crate) struct PoolOutput<T> {
    pub data: Vec<T>,
    /// Flat input index chosen by each output (max pooling only).
    pub argmax: Vec<u32>,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn forward<T: Float>(
    cfg: &PoolConfig,
    dims: (usize, usize, usize, usize),
    input: &[T],
) -> Result<PoolOutput<T>, TensorError> {
    let (n, c, h, w) = dims;
    let (oh, ow) = match (cfg.out_extent(h), cfg.out_extent(w)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(TensorError::Shape(format!(
                "pool window {} does not fit input {h}x{w} with padding {}",
                cfg.kernel, cfg.padding
            )))
        }
    };
    let planes = n * c;
    let mut data = vec![T::zero(); planes * oh * ow];
    let mut argmax = match cfg.kind {
        PoolKind::Max => vec![0u32; planes * oh * ow],
        PoolKind::Avg => Vec::new(),
    };
    let inv = T::from_f64(1.0 / (cfg.kernel * cfg.kernel) as f64);
    for p in 0..planes {
        let plane = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            let y_start = (oy * cfg.stride) as isize - cfg.padding as isize;
            let y0 = y_start.max(0) as usize;
            let y1 = ((y_start + cfg.kernel as isize) as usize).min(h);
            for ox in 0..ow {
                let x_start = (ox * cfg.stride) as isize - cfg.padding as isize;
                let x0 = x_start.max(0) as usize;
                let x1 = ((x_start + cfg.kernel as isize) as usize).min(w);
                let o = p * oh * ow + oy * ow + ox;
                match cfg.kind {
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let v = plane[y * w + x];
                                // strict comparison keeps the first maximum in row-major order
                                if v > best {
                                    best = v;
                                    best_idx = y * w + x;
                                }
                            }
                        }
                        data[o] = best;
                        argmax[o] = (p * h * w + best_idx) as u32;
                    }
                    PoolKind::Avg => {
                        let mut sum = T::zero();
                        for y in y0..y1 {
                            for x in x0..x1 {
                                sum += plane[y * w + x];
                            }
                        }
                        data[o] = sum * inv;
                    }
                }
            }
        }
    }
    Ok(PoolOutput { data, argmax, oh, ow })
}

pub(crate) fn backward<T: Float>(
    cfg: &PoolConfig,
    dims: (usize, usize, usize, usize),
    out_hw: (usize, usize),
    argmax: &[u32],
    grad_out: &[T],
    grad_input: &mut [T],
) {
    let (n, c, h, w) = dims;
    let (oh, ow) = out_hw;
    match cfg.kind {
        PoolKind::Max => {
            for (&idx, &g) in argmax.iter().zip(grad_out) {
                grad_input[idx as usize] += g;
            }
        }
        PoolKind::Avg => {
            let inv = T::from_f64(1.0 / (cfg.kernel * cfg.kernel) as f64);
            for p in 0..n * c {
                let gplane = &mut grad_input[p * h * w..][..h * w];
                for oy in 0..oh {
                    let y_start = (oy * cfg.stride) as isize - cfg.padding as isize;
                    let y0 = y_start.max(0) as usize;
                    let y1 = ((y_start + cfg.kernel as isize) as usize).min(h);
                    for ox in 0..ow {
                        let x_start = (ox * cfg.stride) as isize - cfg.padding as isize;
                        let x0 = x_start.max(0) as usize;
                        let x1 = ((x_start + cfg.kernel as isize) as usize).min(w);
                        let g = grad_out[p * oh * ow + oy * ow + ox] * inv;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                gplane[y * w + x] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
