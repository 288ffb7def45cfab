use super::conv::{self, Conv2dConfig, ConvGeometry};
use super::pool::{self, PoolConfig};
use super::tensor::{Float, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    SumAll(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Pool {
        input: Var,
        cfg: PoolConfig,
        argmax: Vec<u32>,
    },
    /// The output itself is the standardized input, so only `1/sqrt(var+eps)` is kept.
    BatchNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    Subsample {
        input: Var,
        stride: usize,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive operations in execution order for reverse-mode differentiation.
///
/// Nodes are appended as they are computed, so the record is already topologically
/// sorted and the reverse pass simply walks it backwards.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves that were created with `requires_grad`.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }

    /// Number of gradient buffers that were materialized.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// True when `var` was produced by an operation rather than supplied as a leaf.
    pub fn is_intermediate(&self, var: Var) -> bool {
        !matches!(self.nodes[var.0].op, Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &str) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        let x = self.value(a);
        let data = x.data().iter().map(|&p| p * factor).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Scale(a, factor), &[a], "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&p| if p > T::zero() { p } else { T::zero() })
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::SumAll(a), &[a], "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, cfg: Conv2dConfig) -> Result<Var, TensorError> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geom = ConvGeometry::new(x.dims4()?, k.dims4()?, cfg)?;
        let mut data = vec![T::zero(); geom.n * geom.f * geom.oh * geom.ow];
        conv::forward(&geom, x.data(), k.data(), &mut data);
        let out = Tensor::from_parts(vec![geom.n, geom.f, geom.oh, geom.ow], data);
        self.push(out, Op::Conv2d { input, kernel, geom }, &[input, kernel], "conv2d")
    }

    pub fn pool2d(&mut self, input: Var, cfg: PoolConfig) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let res = pool::forward(&cfg, (n, c, h, w), x.data())?;
        let out = Tensor::from_parts(vec![n, c, res.oh, res.ow], res.data);
        self.push(
            out,
            Op::Pool {
                input,
                cfg,
                argmax: res.argmax,
            },
            &[input],
            "pool2d",
        )
    }

    /// Per-channel standardization with current-batch statistics and no affine terms.
    pub fn batch_norm(&mut self, input: Var, eps: T) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::Shape(format!(
                "batch_norm needs at least 2 values per channel, got N*H*W = {m}"
            )));
        }
        let inv_m = T::from_f64(1.0 / m as f64);
        let src = x.data();
        let mut data = vec![T::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let mut mean = T::zero();
            for b in 0..n {
                for &v in &src[(b * c + ch) * hw..][..hw] {
                    mean += v;
                }
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for b in 0..n {
                for &v in &src[(b * c + ch) * hw..][..hw] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var = var * inv_m;
            let denom = var + eps;
            if denom.is_nan() || denom <= T::zero() || !denom.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "batch_norm variance + eps is not positive in channel {ch}"
                )));
            }
            let is = T::one() / denom.sqrt();
            inv_std.push(is);
            for b in 0..n {
                let off = (b * c + ch) * hw;
                for (o, &v) in data[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                    *o = (v - mean) * is;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, h, w], data);
        self.push(out, Op::BatchNorm { input, inv_std }, &[input], "batch_norm")
    }

    /// Keeps every `stride`-th row and column starting at 0; output extent is `ceil(extent/stride)`.
    pub fn subsample(&mut self, input: Var, stride: usize) -> Result<Var, TensorError> {
        if stride == 0 {
            return Err(TensorError::Shape("subsample stride must be positive".into()));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let src = x.data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for oy in 0..oh {
                let row = &src[p * h * w + oy * stride * w..][..w];
                data.extend(row.iter().step_by(stride).copied());
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], data);
        self.push(out, Op::Subsample { input, stride }, &[input], "subsample")
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Usage("concat of zero tensors".into()));
        }
        let (n, _, h, w) = self.value(inputs[0]).dims4()?;
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(TensorError::Shape(format!(
                    "concat: shape {:?} incompatible with [{n}, _, {h}, {w}]",
                    self.shape(v)
                )));
            }
            total_c += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * hw..][..c * hw]);
            }
        }
        let out = Tensor::from_parts(vec![n, total_c, h, w], data);
        self.push(out, Op::Concat(inputs.to_vec()), inputs, "concat")
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        self.push(out, Op::GlobalAvgPool(input), &[input], "global_avg_pool")
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (n, fin) = match x.shape() {
            &[n, f] => (n, f),
            s => return Err(TensorError::Shape(format!("linear input must be rank 2, got {s:?}"))),
        };
        let fout = match wt.shape() {
            &[o, i] if i == fin => o,
            s => {
                return Err(TensorError::Shape(format!(
                    "linear weight {s:?} incompatible with input features {fin}"
                )))
            }
        };
        let mut data = vec![T::zero(); n * fout];
        for b in 0..n {
            let xr = &x.data()[b * fin..][..fin];
            for o in 0..fout {
                let wr = &wt.data()[o * fin..][..fin];
                data[b * fout + o] = xr.iter().zip(wr).map(|(&p, &q)| p * q).sum();
            }
        }
        let mut inputs = vec![input, weight];
        if let Some(bv) = bias {
            let bt = self.value(bv);
            if bt.shape() != [fout] {
                return Err(TensorError::Shape(format!(
                    "linear bias {:?} must be [{fout}]",
                    bt.shape()
                )));
            }
            for b in 0..n {
                for o in 0..fout {
                    data[b * fout + o] += bt.data()[o];
                }
            }
            inputs.push(bv);
        }
        let out = Tensor::from_parts(vec![n, fout], data);
        self.push(out, Op::Linear { input, weight, bias }, &inputs, "linear")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let (n, classes) = match x.shape() {
            &[n, k] => (n, k),
            s => {
                return Err(TensorError::Shape(format!(
                    "cross_entropy logits must be [N, classes], got {s:?}"
                )))
            }
        };
        if labels.len() != n {
            return Err(TensorError::Input(format!(
                "cross_entropy got {} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![T::zero(); n * classes];
        let mut total = T::zero();
        for (b, &label) in labels.iter().enumerate() {
            let row = &x.data()[b * classes..][..classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[b * classes..][..classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[b * classes..][..classes] {
                *p = *p / z;
            }
            total += z.ln() - (row[label] - max);
        }
        let loss = total / T::from_f64(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse-mode accumulation from a scalar root. A tape can be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::Usage(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(TensorError::Usage(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |buf| {
                        for (d, &x) in buf.iter_mut().zip(g) {
                            *d += x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |buf| {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |buf| {
                for (d, &x) in buf.iter_mut().zip(g) {
                    *d += x * *f;
                }
            }),
            Op::Relu(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |buf| {
                    for ((d, &x), &y) in buf.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += x;
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |buf| {
                for d in buf.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Reshape(a) => self.accumulate(grads, *a, |buf| {
                for (d, &x) in buf.iter_mut().zip(g) {
                    *d += x;
                }
            }),
            Op::Conv2d { input, kernel, geom } => {
                let (xv, kv) = (self.value(*input).data(), self.value(*kernel).data());
                self.accumulate(grads, *input, |buf| conv::backward_input(geom, g, kv, buf));
                self.accumulate(grads, *kernel, |buf| conv::backward_kernel(geom, g, xv, buf));
            }
            Op::Pool { input, cfg, argmax } => {
                let dims = self.value(*input).dims4().expect("rank checked in forward");
                let (_, _, oh, ow) = node.value.dims4().expect("rank checked in forward");
                self.accumulate(grads, *input, |buf| pool::backward(cfg, dims, (oh, ow), argmax, g, buf));
            }
            Op::BatchNorm { input, inv_std } => {
                let (n, c, h, w) = node.value.dims4().expect("rank checked in forward");
                let hw = h * w;
                let inv_m = T::from_f64(1.0 / (n * hw) as f64);
                let xhat = node.value.data();
                self.accumulate(grads, *input, |buf| {
                    for (ch, &is) in inv_std.iter().enumerate() {
                        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for (&gv, &xv) in g[off..off + hw].iter().zip(&xhat[off..off + hw]) {
                                sum_g += gv;
                                sum_gx += gv * xv;
                            }
                        }
                        let (mean_g, mean_gx) = (sum_g * inv_m, sum_gx * inv_m);
                        for b in 0..n {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                buf[i] += is * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                });
            }
            Op::Subsample { input, stride } => {
                let (n, c, h, w) = self.value(*input).dims4().expect("rank checked in forward");
                let (oh, ow) = (h.div_ceil(*stride), w.div_ceil(*stride));
                self.accumulate(grads, *input, |buf| {
                    for p in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                buf[p * h * w + oy * stride * w + ox * stride] += g[p * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                });
            }
            Op::Concat(inputs) => {
                let (n, total_c, h, w) = node.value.dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    self.accumulate(grads, v, |buf| {
                        for b in 0..n {
                            let src = &g[(b * total_c + c_off) * hw..][..c * hw];
                            for (d, &x) in buf[b * c * hw..][..c * hw].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    });
                    c_off += c;
                }
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4().expect("rank checked in forward");
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                self.accumulate(grads, *a, |buf| {
                    for (plane, &x) in buf.chunks_mut(hw).zip(g) {
                        for d in plane {
                            *d += x * inv;
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                self.accumulate(grads, *input, |buf| {
                    for b in 0..n {
                        for o in 0..fout {
                            let go = g[b * fout + o];
                            let wr = &wv.data()[o * fin..][..fin];
                            for (d, &wij) in buf[b * fin..][..fin].iter_mut().zip(wr) {
                                *d += go * wij;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |buf| {
                    for b in 0..n {
                        let xr = &xv.data()[b * fin..][..fin];
                        for o in 0..fout {
                            let go = g[b * fout + o];
                            for (d, &xi) in buf[o * fin..][..fin].iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                });
                if let Some(bv) = bias {
                    self.accumulate(grads, *bv, |buf| {
                        for b in 0..n {
                            for (d, &go) in buf.iter_mut().zip(&g[b * fout..][..fout]) {
                                *d += go;
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.shape(*logits)[1];
                let scale = g[0] / T::from_f64(labels.len() as f64);
                self.accumulate(grads, *logits, |buf| {
                    for (b, &label) in labels.iter().enumerate() {
                        for k in 0..classes {
                            let i = b * classes + k;
                            let onehot = if k == label { T::one() } else { T::zero() };
                            buf[i] += (probs[i] - onehot) * scale;
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let numel = self.nodes[var.0].value.numel();
        let buf = grads[var.0].get_or_insert_with(|| vec![T::zero(); numel]);
        f(buf);
    }
}
