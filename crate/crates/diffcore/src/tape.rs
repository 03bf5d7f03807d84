//! Recorded computation graph and its reverse sweep.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse scan.

use crate::kernels::{col2im, gemm, im2col, BilinearTap, ConvGeom};
use crate::tensor::axis_split;
use crate::{DiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<f64>,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    ReduceSum(Var),
    ReduceMean(Var),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        src: Var,
        taps: Vec<BilinearTap>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Gather {
        src: Var,
        index: Vec<Option<usize>>,
    },
    Paste {
        base: Var,
        patch: Var,
        top: usize,
        left: usize,
    },
    Clamp(Var, f64, f64),
    BceWithLogits(Var, Vec<f64>),
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        beta: f64,
    },
    Threshold(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar-mul",
            Op::AddScalar(..) => "add-scalar",
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::ReduceSum(..) => "reduce-sum",
            Op::ReduceMean(..) => "reduce-mean",
            Op::MaxAxis { .. } => "max-over-axis",
            Op::Bilinear { .. } => "bilinear-sample",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Paste { .. } => "paste",
            Op::Clamp(..) => "clamp",
            Op::BceWithLogits(..) => "bce-with-logits",
            Op::SmoothL1 { .. } => "smooth-l1",
            Op::Threshold(..) => "threshold",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of tensor operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the root
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`], but moves the buffer out.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
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

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, DiffError> {
        if !value.all_finite() && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
            return Err(DiffError::NonFinite {
                op: op.name(),
                detail: "forward produced NaN or infinity".into(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        let v = self.map(a, |x| x * s);
        self.push(v, Op::ScalarMul(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        let v = self.map(a, |x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            0.0,
            &mut out,
        );
        let v = Tensor::new([m, n], out)?;
        self.push(v, Op::Matmul { a, b, m, k, n }, &[a, b])
    }

    /// Cross-correlation of a `[C, H, W]` input with `[O, C, k, k]` weights,
    /// plus an optional `[O]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, DiffError> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 4 || sw[1] != si[0] || sw[2] != sw[3] || stride == 0 {
            return Err(mismatch(
                "conv2d",
                format!("input {si:?}, weight {sw:?}, stride {stride}"),
            ));
        }
        if si[1] + 2 * pad < sw[2] || si[2] + 2 * pad < sw[3] {
            return Err(mismatch(
                "conv2d",
                format!("kernel {} larger than padded input {si:?}", sw[2]),
            ));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(mismatch("conv2d", format!("bias {sb:?} for {} outputs", sw[0])));
            }
        }
        let geom = ConvGeom {
            channels: si[0],
            height: si[1],
            width: si[2],
            kernel: sw[2],
            stride,
            pad,
        };
        let (o, ho, wo) = (sw[0], geom.out_height(), geom.out_width());
        let rows = geom.channels * geom.kernel * geom.kernel;
        let cols = im2col(self.value(input).data(), &geom);
        let mut out = vec![0.0; o * ho * wo];
        if let Some(b) = bias {
            for (ch, &bv) in self.value(b).data().iter().enumerate() {
                out[ch * ho * wo..(ch + 1) * ho * wo].fill(bv);
            }
        }
        gemm(
            o,
            rows,
            ho * wo,
            self.value(weight).data(),
            false,
            &cols,
            false,
            1.0,
            &mut out,
        );
        let v = Tensor::new([o, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels: o,
                cols,
            },
            &inputs,
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, DiffError> {
        let v = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let v = self.map(a, f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    /// Natural log; every input value must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some((i, &x)) = self.value(a).data().iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("value {x} at index {i} is not positive"),
            });
        }
        let v = self.map(a, f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(v, Op::Softmax(a, axis), &[a])
    }

    pub fn reduce_sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::ReduceSum(a), &[a])
    }

    pub fn reduce_mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::ReduceMean(a), &[a])
    }

    /// Maximum along `axis`; the axis is removed from the output shape.
    /// Ties resolve to the lowest index, which also receives the gradient.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("max-over-axis", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * n) * inner + i;
                for j in 1..n {
                    let idx = (o * n + j) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, out)?;
        self.push(v, Op::MaxAxis { x: a, argmax }, &[a])
    }

    /// Samples a `[H, W]` source at fractional `(row, col)` points, producing
    /// a tensor of `out_shape`. Points are constants (no coordinate gradient);
    /// samples outside the grid read zeros.
    pub fn bilinear_sample(&mut self, src: Var, points: &[(f64, f64)], out_shape: &[usize]) -> Result<Var, DiffError> {
        let ss = self.shape(src).to_vec();
        if ss.len() != 2 {
            return Err(mismatch("bilinear-sample", format!("source must be 2-D, got {ss:?}")));
        }
        if out_shape.iter().product::<usize>() != points.len() {
            return Err(mismatch(
                "bilinear-sample",
                format!("{} points for output {out_shape:?}", points.len()),
            ));
        }
        let taps: Vec<BilinearTap> = points
            .iter()
            .map(|&(y, x)| BilinearTap::new(y, x, ss[0], ss[1]))
            .collect();
        let data = self.value(src).data();
        let out = taps.iter().map(|t| t.sample(data)).collect();
        let v = Tensor::new(out_shape, out)?;
        self.push(v, Op::Bilinear { src, taps }, &[src])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, DiffError> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(mismatch("concat", "no inputs".into())),
        };
        if axis >= first.len() {
            return Err(mismatch("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let v = Tensor::new(out_shape, out)?;
        self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// `out[i] = src[index[i]]`, or zero where the index is `None`.
    /// Repeated indices accumulate their gradients.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, out_shape: &[usize]) -> Result<Var, DiffError> {
        let n = self.value(src).len();
        if out_shape.iter().product::<usize>() != index.len() {
            return Err(mismatch(
                "gather",
                format!("{} indices for output {out_shape:?}", index.len()),
            ));
        }
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= n) {
            return Err(mismatch("gather", format!("index {bad} out of range {n}")));
        }
        let data = self.value(src).data();
        let out = index.iter().map(|i| i.map_or(0.0, |i| data[i])).collect();
        let v = Tensor::new(out_shape, out)?;
        self.push(v, Op::Gather { src, index }, &[src])
    }

    /// Overwrites the `[h, w]` window of a `[H, W]` base at `(top, left)`.
    pub fn paste(&mut self, base: Var, patch: Var, top: usize, left: usize) -> Result<Var, DiffError> {
        let (sb, sp) = (self.shape(base).to_vec(), self.shape(patch).to_vec());
        if sb.len() != 2 || sp.len() != 2 || top + sp[0] > sb[0] || left + sp[1] > sb[1] {
            return Err(mismatch(
                "paste",
                format!("patch {sp:?} at ({top}, {left}) into {sb:?}"),
            ));
        }
        let mut out = self.value(base).clone();
        let p = self.value(patch).data();
        for r in 0..sp[0] {
            let dst = (top + r) * sb[1] + left;
            out.data_mut()[dst..dst + sp[1]].copy_from_slice(&p[r * sp[1]..(r + 1) * sp[1]]);
        }
        self.push(out, Op::Paste { base, patch, top, left }, &[base, patch])
    }

    /// Clamps into `[lo, hi]`. Values on the closed interval pass gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        if !(lo <= hi) {
            return Err(DiffError::Domain {
                op: "clamp",
                detail: format!("empty interval [{lo}, {hi}]"),
            });
        }
        let v = self.map(a, |x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Elementwise binary cross-entropy between `sigmoid(a)` and `target`.
    pub fn bce_with_logits(&mut self, a: Var, target: Vec<f64>) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.len() != target.len() {
            return Err(mismatch(
                "bce-with-logits",
                format!("{} logits, {} targets", t.len(), target.len()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let v = Tensor::new(t.shape(), data)?;
        self.push(v, Op::BceWithLogits(a, target), &[a])
    }

    /// Elementwise Huber-style smooth L1 against `target`.
    pub fn smooth_l1(&mut self, a: Var, target: Vec<f64>, beta: f64) -> Result<Var, DiffError> {
        let t = self.value(a);
        if t.len() != target.len() || !(beta > 0.0) {
            return Err(mismatch(
                "smooth-l1",
                format!("{} values, {} targets, beta {beta}", t.len(), target.len()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(&target)
            .map(|(&x, &y)| {
                let d = (x - y).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let v = Tensor::new(t.shape(), data)?;
        self.push(v, Op::SmoothL1 { x: a, target, beta }, &[a])
    }

    /// Hard step `x >= level -> 1 else 0`. Recorded so that a backward pass
    /// through it is reported instead of silently producing zero gradients.
    pub fn threshold(&mut self, a: Var, level: f64) -> Result<Var, DiffError> {
        let v = self.map(a, |x| if x >= level { 1.0 } else { 0.0 });
        self.push(v, Op::Threshold(a), &[a])
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(i, g, lower)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], lower: &mut [Option<Vec<f64>>]) -> Result<(), DiffError> {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates into the gradient buffer of `v` if it wants one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = lower[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(va) {
                        *x += d * y;
                    }
                });
            }
            Op::ScalarMul(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d * s)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |ga| gemm(*m, *n, *k, g, false, vb, true, 1.0, ga));
                acc(*b, &mut |gb| gemm(*k, *m, *n, va, true, g, false, 1.0, gb));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_channels,
                cols,
            } => {
                let o = *out_channels;
                let p = geom.out_height() * geom.out_width();
                let rows = geom.channels * geom.kernel * geom.kernel;
                acc(*weight, &mut |gw| gemm(o, p, rows, g, false, cols, true, 1.0, gw));
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for (ch, x) in gb.iter_mut().enumerate() {
                            *x += g[ch * p..(ch + 1) * p].iter().sum::<f64>();
                        }
                    });
                }
                if self.nodes[input.0].requires_grad {
                    let w = self.value(*weight).data();
                    let mut dcols = vec![0.0; rows * p];
                    gemm(rows, o, p, w, true, g, false, 0.0, &mut dcols);
                    acc(*input, &mut |gi| col2im(&dcols, geom, gi));
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += if v > 0.0 { d } else { d * slope };
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((x, &d), &s) in ga.iter_mut().zip(g).zip(out) {
                    *x += d * s * (1.0 - s);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((x, &d), &e) in ga.iter_mut().zip(g).zip(out) {
                    *x += d * e;
                }
            }),
            Op::Log(a) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += d / v;
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::ReduceSum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::ReduceMean(a) => acc(*a, &mut |ga| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s)
            }),
            Op::MaxAxis { x, argmax } => acc(*x, &mut |gx| {
                for (&idx, &d) in argmax.iter().zip(g) {
                    gx[idx] += d;
                }
            }),
            Op::Bilinear { src, taps } => acc(*src, &mut |gs| {
                for (t, &d) in taps.iter().zip(g) {
                    for s in 0..t.count as usize {
                        gs[t.index[s]] += t.weight[s] * d;
                    }
                }
            }),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let n = self.value(*v).shape()[*axis] * inner;
                    acc(*v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + n];
                            add_into(&mut gv[o * n..(o + 1) * n], src);
                        }
                    });
                    offset += n;
                }
            }
            Op::Gather { src, index } => acc(*src, &mut |gs| {
                for (i, &d) in index.iter().zip(g) {
                    if let Some(i) = i {
                        gs[*i] += d;
                    }
                }
            }),
            Op::Paste { base, patch, top, left } => {
                let width = node.value.shape()[1];
                let sp = self.value(*patch).shape();
                let (ph, pw) = (sp[0], sp[1]);
                acc(*base, &mut |gb| {
                    for (r, (dst, src)) in gb.chunks_mut(width).zip(g.chunks(width)).enumerate() {
                        if r >= *top && r < top + ph {
                            add_into(&mut dst[..*left], &src[..*left]);
                            add_into(&mut dst[left + pw..], &src[left + pw..]);
                        } else {
                            add_into(dst, src);
                        }
                    }
                });
                acc(*patch, &mut |gp| {
                    for r in 0..ph {
                        let row = (top + r) * width + left;
                        add_into(&mut gp[r * pw..(r + 1) * pw], &g[row..row + pw]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v >= *lo && v <= *hi {
                            *x += d;
                        }
                    }
                });
            }
            Op::BceWithLogits(a, target) => {
                let va = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for (((x, &d), &v), &y) in ga.iter_mut().zip(g).zip(va).zip(target) {
                        *x += d * (sigmoid(v) - y);
                    }
                });
            }
            Op::SmoothL1 { x, target, beta } => {
                let vx = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for (((o, &d), &v), &y) in gx.iter_mut().zip(g).zip(vx).zip(target) {
                        let diff = v - y;
                        *o += if diff.abs() < *beta {
                            d * diff / beta
                        } else {
                            d * diff.signum()
                        };
                    }
                });
            }
            Op::Threshold(a) => {
                if self.nodes[a.0].requires_grad {
                    return Err(DiffError::NonDifferentiable { op: "threshold" });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, &d)| *x += d);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
