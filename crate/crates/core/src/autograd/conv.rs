//! Direct 2-D cross-correlation kernels over NCHW buffers.

use super::tensor::Float;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dConfig {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Conv2dConfig {
            stride,
            padding,
            dilation,
            groups,
        }
    }

    /// Output extent along one spatial axis, if at least one window fits.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub cg: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: Conv2dConfig,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize, usize),
        kernel: (usize, usize, usize, usize),
        cfg: Conv2dConfig,
    ) -> Result<Self, TensorError> {
        let (n, c, h, w) = input;
        let (f, cg, kh, kw) = kernel;
        if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 {
            return Err(TensorError::Shape(
                "conv2d stride, dilation and groups must be positive".into(),
            ));
        }
        if c % cfg.groups != 0 || f % cfg.groups != 0 {
            return Err(TensorError::Shape(format!(
                "conv2d channels {c} and filters {f} must be divisible by groups {}",
                cfg.groups
            )));
        }
        if cg != c / cfg.groups {
            return Err(TensorError::Shape(format!(
                "conv2d kernel expects {cg} input channels per group, input provides {}",
                c / cfg.groups
            )));
        }
        let (oh, ow) = match (cfg.out_extent(h, kh), cfg.out_extent(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::Shape(format!(
                    "conv2d kernel {kh}x{kw} does not fit input {h}x{w} with {cfg:?}"
                )))
            }
        };
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            cg,
            kh,
            kw,
            oh,
            ow,
            cfg,
        })
    }

    fn filters_per_group(&self) -> usize {
        self.f / self.cfg.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }
}

/// Range of output positions `o` with `0 <= o*stride + offset < extent`.
#[inline]
fn valid_range(out: usize, extent: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = extent as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1).min(out as isize) };
    let lo = lo.min(out as isize);
    (lo as usize, hi.max(lo) as usize)
}

/// Row/column ranges and input offsets for one kernel tap.
#[inline]
fn tap(g: &ConvGeometry, ki: usize, kj: usize) -> (usize, usize, isize, usize, usize, isize) {
    let pad = g.cfg.padding as isize;
    let oy_off = (ki * g.cfg.dilation) as isize - pad;
    let ox_off = (kj * g.cfg.dilation) as isize - pad;
    let (y0, y1) = valid_range(g.oh, g.h, g.cfg.stride, oy_off);
    let (x0, x1) = valid_range(g.ow, g.w, g.cfg.stride, ox_off);
    (y0, y1, oy_off, x0, x1, ox_off)
}

pub(crate) fn forward<T: Float>(g: &ConvGeometry, input: &[T], kernel: &[T], out: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let fpg = g.filters_per_group();
    let s = g.cfg.stride;
    for b in 0..g.n {
        for fo in 0..g.f {
            let group = fo / fpg;
            let out_plane = &mut out[(b * g.f + fo) * ohw..][..ohw];
            for ci in 0..g.cg {
                let cin = group * g.cg + ci;
                let in_plane = &input[(b * g.c + cin) * hw..][..hw];
                let kbase = (fo * g.cg + ci) * g.kh * g.kw;
                if g.is_pointwise() {
                    let kv = kernel[kbase];
                    for (o, &x) in out_plane.iter_mut().zip(in_plane) {
                        *o += kv * x;
                    }
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = kernel[kbase + ki * g.kw + kj];
                        let (y0, y1, yoff, x0, x1, xoff) = tap(g, ki, kj);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + yoff;
                            let in_row = &in_plane[iy as usize * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * g.ow..][..g.ow];
                            let ix0 = (x0 * s) as isize + xoff;
                            if s == 1 {
                                let src = &in_row[ix0 as usize..][..x1 - x0];
                                for (o, &x) in out_row[x0..x1].iter_mut().zip(src) {
                                    *o += kv * x;
                                }
                            } else {
                                let src = in_row[ix0 as usize..].iter().step_by(s);
                                for (o, &x) in out_row[x0..x1].iter_mut().zip(src) {
                                    *o += kv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(input) into `grad_input`.
pub(crate) fn backward_input<T: Float>(g: &ConvGeometry, grad_out: &[T], kernel: &[T], grad_input: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let fpg = g.filters_per_group();
    let s = g.cfg.stride;
    for b in 0..g.n {
        for fo in 0..g.f {
            let group = fo / fpg;
            let go_plane = &grad_out[(b * g.f + fo) * ohw..][..ohw];
            for ci in 0..g.cg {
                let cin = group * g.cg + ci;
                let gi_plane = &mut grad_input[(b * g.c + cin) * hw..][..hw];
                let kbase = (fo * g.cg + ci) * g.kh * g.kw;
                if g.is_pointwise() {
                    let kv = kernel[kbase];
                    for (gi, &go) in gi_plane.iter_mut().zip(go_plane) {
                        *gi += kv * go;
                    }
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = kernel[kbase + ki * g.kw + kj];
                        let (y0, y1, yoff, x0, x1, xoff) = tap(g, ki, kj);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + yoff;
                            let gi_row = &mut gi_plane[iy as usize * g.w..][..g.w];
                            let go_row = &go_plane[oy * g.ow..][..g.ow];
                            let ix0 = (x0 * s) as isize + xoff;
                            if s == 1 {
                                let dst = &mut gi_row[ix0 as usize..][..x1 - x0];
                                for (d, &go) in dst.iter_mut().zip(&go_row[x0..x1]) {
                                    *d += kv * go;
                                }
                            } else {
                                let dst = gi_row[ix0 as usize..].iter_mut().step_by(s);
                                for (d, &go) in dst.zip(&go_row[x0..x1]) {
                                    *d += kv * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates d(loss)/d(kernel) into `grad_kernel`.
pub(crate) fn backward_kernel<T: Float>(g: &ConvGeometry, grad_out: &[T], input: &[T], grad_kernel: &mut [T]) {
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let fpg = g.filters_per_group();
    let s = g.cfg.stride;
    for b in 0..g.n {
        for fo in 0..g.f {
            let group = fo / fpg;
            let go_plane = &grad_out[(b * g.f + fo) * ohw..][..ohw];
            for ci in 0..g.cg {
                let cin = group * g.cg + ci;
                let in_plane = &input[(b * g.c + cin) * hw..][..hw];
                let kbase = (fo * g.cg + ci) * g.kh * g.kw;
                if g.is_pointwise() {
                    let mut acc = T::zero();
                    for (&x, &go) in in_plane.iter().zip(go_plane) {
                        acc += x * go;
                    }
                    grad_kernel[kbase] += acc;
                    continue;
                }
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let (y0, y1, yoff, x0, x1, xoff) = tap(g, ki, kj);
                        if x0 >= x1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + yoff;
                            let in_row = &in_plane[iy as usize * g.w..][..g.w];
                            let go_row = &go_plane[oy * g.ow..][..g.ow];
                            let ix0 = (x0 * s) as isize + xoff;
                            if s == 1 {
                                let src = &in_row[ix0 as usize..][..x1 - x0];
                                for (&x, &go) in src.iter().zip(&go_row[x0..x1]) {
                                    acc += x * go;
                                }
                            } else {
                                let src = in_row[ix0 as usize..].iter().step_by(s);
                                for (&x, &go) in src.zip(&go_row[x0..x1]) {
                                    acc += x * go;
                                }
                            }
                        }
                        grad_kernel[kbase + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
}
