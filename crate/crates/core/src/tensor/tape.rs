use super::kernels::{self, ConvGeom};
use super::{log_softmax_rows, softmax_rows, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool2d {
        x: Var,
        size: usize,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        target: Var,
        log_probs: Vec<f64>,
    },
    Mse(Var, Var),
    Sum(Var),
    SumSq(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients with respect to the leaves of a tape, indexed by [`Var`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A single forward pass recorded as a topologically ordered list of nodes.
///
/// The tape is rebuilt for every forward pass. Nodes whose inputs do not
/// require gradients are stored as plain values and skipped by backward.
///
/// [`Tape::backward`] accumulates into per-leaf gradient buffers: calling it
/// twice without [`Tape::zero_grad`] sums both contributions.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> TensorError {
    TensorError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; absent for leaves that do not require
    /// gradients or were not reached by any backward pass.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    // ---- forward primitives ------------------------------------------------

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", &[self.shape(a), self.shape(b)]));
        }
        let out = kernels::matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the dense-layer product with row-major `[out, in]` weights.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul_t", a)?;
        let (n, k2) = self.rank2("matmul_t", b)?;
        if k != k2 {
            return Err(shape_err("matmul_t", &[self.shape(a), self.shape(b)]));
        }
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMulT(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Adds a length-`c` vector to every row of an `[r, c]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.rank2("add_bias", a)?;
        if self.shape(bias) != [c] {
            return Err(shape_err("add_bias", &[self.shape(a), self.shape(bias)]));
        }
        let b = self.data(bias);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Op::AddBias(a, bias), value, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Scale(a, c), value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Relu(a), value, rg))
    }

    /// 2-D convolution of `x[N,C,H,W]` with `w[O,C,k,k]` and bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = || shape_err("conv2d", &[xs, ws, bs]);
        let ([n, c, h, wd], [o, c2, kh, kw]) = (xs, ws) else {
            return Err(bad());
        };
        if c != c2 || kh != kw || bs != [*o] || stride == 0 {
            return Err(bad());
        }
        if h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return Err(bad());
        }
        let geom = ConvGeom {
            batch: *n,
            in_ch: *c,
            height: *h,
            width: *wd,
            out_ch: *o,
            kernel: *kh,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(self.data(x), self.data(w), self.data(b), geom);
        let value = Tensor::new(vec![geom.batch, geom.out_ch, oh, ow], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, geom }, value, rg))
    }

    /// Non-overlapping `size x size` average pooling of `x[N,C,H,W]`.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.shape(x);
        let &[n, c, h, w] = xs else {
            return Err(shape_err("avg_pool2d", &[xs]));
        };
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(shape_err("avg_pool2d", &[xs]));
        }
        let (oh, ow) = (h / size, w / size);
        let src = self.data(x);
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        for dx in 0..size {
                            acc += s[(oy * size + dy) * w + ox * size + dx];
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::AvgPool2d { x, size }, value, rg))
    }

    /// `[N,C,H,W] -> [N,C]` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let &[n, c, h, w] = xs else {
            return Err(shape_err("global_avg_pool", &[xs]));
        };
        let hw = h * w;
        if hw == 0 {
            return Err(shape_err("global_avg_pool", &[xs]));
        }
        let out = self
            .data(x)
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::GlobalAvgPool(x), value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// `[N, ...] -> [N, prod(...)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let Some((&n, rest)) = xs.split_first() else {
            return Err(shape_err("flatten", &[xs]));
        };
        let shape = vec![n, rest.iter().product()];
        self.reshape(x, shape)
    }

    /// Row-wise softmax of an `[N, K]` matrix.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.rank2("softmax", a)?;
        let out = softmax_rows(self.data(a), k);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Softmax(a), value, rg))
    }

    /// Mean over rows of `-Σ_j target[n,j] · log softmax(logits)[n,j]`.
    pub fn cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        self.same_shape("cross_entropy", logits, target)?;
        let (n, k) = self.rank2("cross_entropy", logits)?;
        if n == 0 {
            return Err(shape_err("cross_entropy", &[self.shape(logits)]));
        }
        let log_probs = log_softmax_rows(self.data(logits), k);
        let total: f64 = log_probs.iter().zip(self.data(target)).map(|(l, t)| -t * l).sum();
        let rg = self.any_grad(&[logits, target]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                target,
                log_probs,
            },
            Tensor::scalar(total / n as f64),
            rg,
        ))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let len = self.nodes[a.0].value.numel();
        if len == 0 {
            return Err(shape_err("mse", &[self.shape(a)]));
        }
        let total: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(total / len as f64), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Sum(a), Tensor::scalar(total), rg))
    }

    /// Squared L2 norm, `Σ a²`.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let total = self.data(a).iter().map(|x| x * x).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SumSq(a), Tensor::scalar(total), rg))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates `seed` from `output` back to every node that requires a
    /// gradient. Returns per-node gradient buffers.
    fn propagate(&self, output: Var, seed: Vec<f64>) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                    let n = self.nodes[b.0].value.shape()[1];
                    if needs(a) {
                        accumulate(&mut grads[a.0], kernels::matmul_nt(&g, self.data(*b), m, n, k));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], kernels::matmul_tn(self.data(*a), &g, m, k, n));
                    }
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul_t").unwrap();
                    let n = self.nodes[b.0].value.shape()[0];
                    if needs(a) {
                        accumulate(&mut grads[a.0], kernels::matmul_nn(&g, self.data(*b), m, n, k));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], kernels::matmul_tn(&g, self.data(*a), m, n, k));
                    }
                }
                Op::Add(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(b) {
                        accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddBias(a, bias) => {
                    if needs(bias) {
                        let c = self.shape(*bias)[0];
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                        }
                        accumulate(&mut grads[bias.0], gb);
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], g.iter().map(|x| x * c).collect());
                    }
                }
                Op::Relu(a) => {
                    if needs(a) {
                        let d = self
                            .data(*a)
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.data(*x), self.data(*w), &g, *geom);
                    if needs(x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if needs(w) {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if needs(b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AvgPool2d { x, size } => {
                    if needs(x) {
                        let &[n, c, h, w] = self.shape(*x) else {
                            unreachable!()
                        };
                        let (oh, ow) = (h / size, w / size);
                        let norm = 1.0 / (size * size) as f64;
                        let mut d = vec![0.0; n * c * h * w];
                        for plane in 0..n * c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gy = g[(plane * oh + oy) * ow + ox] * norm;
                                    for dy in 0..*size {
                                        for dx in 0..*size {
                                            d[plane * h * w + (oy * size + dy) * w + ox * size + dx] =
                                                gy;
                                        }
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if needs(x) {
                        let s = self.shape(*x);
                        let hw = s[2] * s[3];
                        let d = g
                            .iter()
                            .flat_map(|&gy| std::iter::repeat_n(gy / hw as f64, hw))
                            .collect();
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::Reshape(x) => {
                    if needs(x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Softmax(a) => {
                    if needs(a) {
                        let k = self.shape(*a)[1];
                        let s = node.value.data();
                        let mut d = vec![0.0; g.len()];
                        for ((dr, sr), gr) in d.chunks_mut(k).zip(s.chunks(k)).zip(g.chunks(k)) {
                            let dot: f64 = sr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for ((dv, &sv), &gv) in dr.iter_mut().zip(sr).zip(gr) {
                                *dv = sv * (gv - dot);
                            }
                        }
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    log_probs,
                } => {
                    let (n, k) = self.nodes[logits.0].value.dims2("cross_entropy").unwrap();
                    let scale = g[0] / n as f64;
                    let t = self.data(*target);
                    if needs(logits) {
                        let mut d = vec![0.0; n * k];
                        for r in 0..n {
                            let tr = &t[r * k..(r + 1) * k];
                            let mass: f64 = tr.iter().sum();
                            for j in 0..k {
                                let p = log_probs[r * k + j].exp();
                                d[r * k + j] = scale * (mass * p - tr[j]);
                            }
                        }
                        accumulate(&mut grads[logits.0], d);
                    }
                    if needs(target) {
                        accumulate(&mut grads[target.0], log_probs.iter().map(|l| -scale * l).collect());
                    }
                }
                Op::Mse(a, b) => {
                    let len = self.nodes[a.0].value.numel() as f64;
                    let c = 2.0 * g[0] / len;
                    let diff: Vec<f64> =
                        self.data(*a).iter().zip(self.data(*b)).map(|(x, y)| c * (x - y)).collect();
                    if needs(b) {
                        accumulate(&mut grads[b.0], diff.iter().map(|x| -x).collect());
                    }
                    if needs(a) {
                        accumulate(&mut grads[a.0], diff);
                    }
                }
                Op::Sum(a) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], vec![g[0]; self.nodes[a.0].value.numel()]);
                    }
                }
                Op::SumSq(a) => {
                    if needs(a) {
                        accumulate(&mut grads[a.0], self.data(*a).iter().map(|x| 2.0 * g[0] * x).collect());
                    }
                }
            }
        }
        grads
    }

    /// Reverse-mode gradient of a scalar `loss`, accumulated into the leaf
    /// gradient buffers (see [`Tape::grad`]).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = &self.nodes[loss.0].value;
        if !value.is_scalar() {
            return Err(TensorError::NonScalar(value.shape().to_vec()));
        }
        let grads = self.propagate(loss, vec![1.0]);
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize(self.nodes.len(), None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            let (Op::Leaf, Some(g)) = (&node.op, g) else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            match &mut self.leaf_grads[i] {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, d)| *a += d),
                slot => *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product `Jᵀ u` of `output` with cotangent `u`, returned
    /// per leaf. Does not touch the accumulated leaf gradients.
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Gradients> {
        let value = &self.nodes[output.0].value;
        if value.shape() != cotangent.shape() {
            return Err(shape_err("vjp", &[value.shape(), cotangent.shape()]));
        }
        let mut out = Gradients {
            grads: vec![None; self.nodes.len()],
        };
        if !self.nodes[output.0].requires_grad {
            return Ok(out);
        }
        let grads = self.propagate(output, cotangent.data().to_vec());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            if let (Op::Leaf, Some(g), true) = (&node.op, g, node.requires_grad) {
                out.grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_forward_symmetric() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mse_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 1.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let l = tape.sum_sq(w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn mse_of_scaled_input_gradient() {
        // L(w) = mse(w·x, y), w=1, x=2, y=4 -> dL/dw = 2(2-4)·2 = -8
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1, 1], &[1.0]), true);
        let x = tape.constant(t(&[1, 1], &[2.0]));
        let y = tape.constant(t(&[1, 1], &[4.0]));
        let p = tape.matmul(x, w).unwrap();
        let l = tape.mse(p, y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().item().unwrap(), -8.0);
    }

    #[test]
    fn frozen_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let c = tape.leaf(Tensor::scalar(2.0), false);
        let s = tape.add(w, c).unwrap();
        let l = tape.sum_sq(s).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap().item().unwrap(), 10.0);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::scalar(3.0), true);
        let l = tape.sum_sq(w).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().item().unwrap(), 12.0);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.relu(w).unwrap();
        assert_eq!(tape.backward(y), Err(TensorError::NonScalar(vec![2])));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: incompatible shapes [[2, 3], [4, 5]]");
        assert!(tape.add(a, b).is_err());
        assert!(tape.mse(a, b).is_err());
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 10]));
        let mut target = vec![0.0; 20];
        target[3] = 1.0;
        target[17] = 1.0;
        let target = tape.constant(t(&[2, 10], &target));
        let l = tape.cross_entropy(logits, target).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!((v - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn vjp_leaves_accumulators_untouched() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(vec![1.0, -2.0]), true);
        let y = tape.scale(w, 3.0).unwrap();
        let g = tape.vjp(y, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 0.0]);
        assert!(tape.grad(w).is_none());
    }
}
