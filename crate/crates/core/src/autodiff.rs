//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only record of primitive applications. Every
//! primitive computes its value eagerly, checks it for NaN/infinity, and
//! stores whatever it needs for the backward pass. Because inputs are
//! always appended before the nodes that consume them, walking the record
//! backwards from the loss visits each node once in a valid order.
//!
//! ```
//! use metasvdd::autodiff::Graph;
//! use metasvdd::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![2.0]));
//! let zero = g.constant(Tensor::vector(vec![0.0]));
//! let loss = g.squared_distance(x, zero).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[4.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    Relu,
    Tanh,
    Log,
    Clamp,
    Sum,
    Mean,
    SquaredDistance,
    Reshape,
    SelectRows,
    Conv2d,
    BatchNorm,
    MaxPool2,
    Custom,
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PrimitiveKind::Leaf => "leaf",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::AddConst => "add_const",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Log => "log",
            PrimitiveKind::Clamp => "clamp",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::SquaredDistance => "squared_distance",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::SelectRows => "select_rows",
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::BatchNorm => "batch_norm",
            PrimitiveKind::MaxPool2 => "max_pool2",
            PrimitiveKind::Custom => "custom",
        };
        f.write_str(name)
    }
}

/// A differentiable operation defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the op only has to supply vector-Jacobian products.
pub trait CustomOp<T>: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    height: usize,
    width: usize,
    in_channels: usize,
    out_channels: usize,
}

enum Op<T> {
    Leaf {
        param: bool,
    },
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SquaredDistance(Var, Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        cols: Vec<T>,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> PrimitiveKind {
        match self {
            Op::Leaf { .. } => PrimitiveKind::Leaf,
            Op::MatMul(..) => PrimitiveKind::MatMul,
            Op::Add(..) => PrimitiveKind::Add,
            Op::Sub(..) => PrimitiveKind::Sub,
            Op::Mul(..) => PrimitiveKind::Mul,
            Op::Scale(..) => PrimitiveKind::Scale,
            Op::AddConst(..) => PrimitiveKind::AddConst,
            Op::Relu(..) => PrimitiveKind::Relu,
            Op::Tanh(..) => PrimitiveKind::Tanh,
            Op::Log(..) => PrimitiveKind::Log,
            Op::Clamp(..) => PrimitiveKind::Clamp,
            Op::Sum(..) => PrimitiveKind::Sum,
            Op::Mean(..) => PrimitiveKind::Mean,
            Op::SquaredDistance(..) => PrimitiveKind::SquaredDistance,
            Op::Reshape(..) => PrimitiveKind::Reshape,
            Op::SelectRows(..) => PrimitiveKind::SelectRows,
            Op::Conv2d { .. } => PrimitiveKind::Conv2d,
            Op::BatchNorm { .. } => PrimitiveKind::BatchNorm,
            Op::MaxPool2 { .. } => PrimitiveKind::MaxPool2,
            Op::Custom { .. } => PrimitiveKind::Custom,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Per-channel batch statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance over the normalized positions.
    pub variance: Vec<T>,
    /// Number of positions each channel was normalized over.
    pub count: usize,
}

/// Batch-norm normalization source.
pub enum BatchNormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with externally supplied running statistics.
    Eval { mean: &'a [T], variance: &'a [T] },
}

/// The computation record.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_error(op: PrimitiveKind, a: &[usize], b: &[usize]) -> Error {
    Error::contract(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    /// A trainable leaf; [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf { param: true }, value)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf { param: false }, value)
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { param: true })
    }

    fn push_unchecked(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        value.check_finite(&op.kind().to_string())?;
        Ok(self.push_unchecked(op, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_error(PrimitiveKind::MatMul, sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(av.data(), bv.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    fn broadcast_kind(&self, kind: PrimitiveKind, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if self.value(b).numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let last = sa.last().copied().unwrap_or(0);
        let row_like = match sb {
            [n] => *n == last,
            [1, n] => *n == last,
            _ => false,
        };
        if sa.len() == 2 && row_like {
            return Ok(Broadcast::Row);
        }
        Err(shape_error(kind, sa, sb))
    }

    fn combine(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let bd = bv.data();
        let width = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bd[i],
                    Broadcast::Row => bd[i % width],
                    Broadcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape preserved")
    }

    /// Element-wise sum. `b` may also be a scalar or a row vector matching
    /// the last extent of a 2-D `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(PrimitiveKind::Add, a, b)?;
        let value = self.combine(a, b, bc, |x, y| x + y);
        self.push(Op::Add(a, b, bc), value)
    }

    /// Element-wise difference with the same broadcasting rules as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(PrimitiveKind::Sub, a, b)?;
        let value = self.combine(a, b, bc, |x, y| x - y);
        self.push(Op::Sub(a, b, bc), value)
    }

    /// Element-wise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_error(PrimitiveKind::Mul, sa, sb));
        }
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// Adds a constant to every element.
    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x + c);
        self.push(Op::AddConst(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(Op::Relu(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), value)
    }

    /// Bounds every element into `[lo, hi]`; gradient is zero outside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::contract(format!(
                "clamp bounds [{lo}, {hi}] are empty"
            )));
        }
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let total: T = t.data().iter().copied().sum();
        let value = Tensor::scalar(total / T::from_count(t.numel()));
        self.push(Op::Mean(a), value)
    }

    /// Squared Euclidean distance. With `a` of shape `(d)` the result is a
    /// scalar; with `a` of shape `(m, d)` it is the `(m)` vector of row
    /// distances to `b`, which must have shape `(d)`.
    pub fn squared_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let d = match sb {
            [d] => *d,
            _ => return Err(shape_error(PrimitiveKind::SquaredDistance, sa, sb)),
        };
        let (rows, out_shape) = match sa {
            [n] if *n == d => (1, Vec::new()),
            [m, n] if *n == d => (*m, vec![*m]),
            _ => return Err(shape_error(PrimitiveKind::SquaredDistance, sa, sb)),
        };
        let data: Vec<T> = (0..rows)
            .map(|r| crate::linalg::squared_distance(&av.data()[r * d..(r + 1) * d], bv.data()))
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(Op::SquaredDistance(a, b), value)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Gathers slices along the leading dimension.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        self.push(Op::SelectRows(a, indices.to_vec()), value)
    }

    /// Stride-1 "same" 3x3 convolution with bias.
    ///
    /// `input` is `(n, h, w, c_in)`, `kernel` is `(3, 3, c_in, c_out)` and
    /// `bias` is `(c_out)`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let (si, sk) = (iv.shape(), kv.shape());
        let ok = si.len() == 4
            && sk.len() == 4
            && sk[0] == 3
            && sk[1] == 3
            && sk[2] == si[3]
            && bv.shape() == [sk[3]];
        if !ok {
            return Err(shape_error(PrimitiveKind::Conv2d, si, sk));
        }
        let dims = ConvDims {
            batch: si[0],
            height: si[1],
            width: si[2],
            in_channels: si[3],
            out_channels: sk[3],
        };
        let cols = im2col(iv.data(), dims);
        let rows = dims.batch * dims.height * dims.width;
        let mut out = mm(
            &cols,
            kv.data(),
            rows,
            9 * dims.in_channels,
            dims.out_channels,
        );
        for r in 0..rows {
            for (o, &b) in bv.data().iter().enumerate() {
                out[r * dims.out_channels + o] = out[r * dims.out_channels + o] + b;
            }
        }
        let value = Tensor::new(
            vec![dims.batch, dims.height, dims.width, dims.out_channels],
            out,
        )?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
                dims,
            },
            value,
        )
    }

    /// Batch normalization over every axis but the last (channel) one.
    /// Returns the observed batch statistics in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        epsilon: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xv = self.value(x);
        let sx = xv.shape();
        let channels = sx.last().copied().unwrap_or(0);
        if sx.len() < 2
            || self.value(gamma).shape() != [channels]
            || self.value(beta).shape() != [channels]
        {
            return Err(shape_error(
                PrimitiveKind::BatchNorm,
                sx,
                self.value(gamma).shape(),
            ));
        }
        let count = xv.numel() / channels;
        let data = xv.data();
        let (mean, variance, train) = match mode {
            BatchNormMode::Train => {
                if sx[0] < 2 {
                    return Err(Error::contract(
                        "batch_norm in train mode needs at least two examples in the batch",
                    ));
                }
                let mut mean = vec![T::zero(); channels];
                for (i, &v) in data.iter().enumerate() {
                    mean[i % channels] = mean[i % channels] + v;
                }
                let m = T::from_count(count);
                mean.iter_mut().for_each(|v| *v = *v / m);
                let mut var = vec![T::zero(); channels];
                for (i, &v) in data.iter().enumerate() {
                    let d = v - mean[i % channels];
                    var[i % channels] = var[i % channels] + d * d;
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, variance } => {
                if mean.len() != channels || variance.len() != channels {
                    return Err(Error::contract(format!(
                        "batch_norm running statistics have {} / {} entries for {channels} channels",
                        mean.len(),
                        variance.len()
                    )));
                }
                (mean.to_vec(), variance.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = variance
            .iter()
            .map(|&v| T::one() / (v + epsilon).sqrt())
            .collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for (i, &v) in data.iter().enumerate() {
            let c = i % channels;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(gv[c] * h + bv[c]);
        }
        let value = Tensor::new(sx.to_vec(), out)?;
        let stats = train.then(|| BatchStats {
            mean,
            variance,
            count,
        });
        let var = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            value,
        )?;
        Ok((var, stats))
    }

    /// 2x2 max-pooling with stride 2 over `(n, h, w, c)`; odd trailing
    /// rows/columns are dropped.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        let s = iv.shape();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(Error::contract(format!(
                "max_pool2 needs (n, h>=2, w>=2, c), got {s:?}"
            )));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (h2, w2) = (h / 2, w / 2);
        let data = iv.data();
        let mut out = Vec::with_capacity(n * h2 * w2 * c);
        let mut argmax = Vec::with_capacity(n * h2 * w2 * c);
        for b in 0..n {
            for y in 0..h2 {
                for x in 0..w2 {
                    for ch in 0..c {
                        let mut best_idx = ((b * h + 2 * y) * w + 2 * x) * c + ch;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                            if data[idx] > data[best_idx] {
                                best_idx = idx;
                            }
                        }
                        out.push(data[best_idx]);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, h2, w2, c], out)?;
        self.push(Op::MaxPool2 { input, argmax }, value)
    }

    /// Records an externally computed value whose backward is supplied by `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        value.check_finite(op.name())?;
        Ok(self.push_unchecked(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (input, contrib) in contributions {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = mm_nt(gd, bv.data(), m, n, k);
                let gb = mm_tn(av.data(), gd, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], ga)?),
                    (*b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::Add(a, b, bc) => {
                let gb = reduce_broadcast(g, self.value(*b).shape(), *bc);
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Sub(a, b, bc) => {
                let gb = reduce_broadcast(g, self.value(*b).shape(), *bc).map(|x| -x);
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|x| x * *s))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::Relu(a) => {
                let ga = g.zip_map(
                    self.value(*a),
                    |x, v| if v > T::zero() { x } else { T::zero() },
                );
                vec![(*a, ga)]
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |x, y| x * (T::one() - y * y));
                vec![(*a, ga)]
            }
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), |x, v| x / v))],
            Op::Clamp(a, lo, hi) => {
                let ga = g.zip_map(self.value(*a), |x, v| {
                    if v >= *lo && v <= *hi {
                        x
                    } else {
                        T::zero()
                    }
                });
                vec![(*a, ga)]
            }
            Op::Sum(a) => {
                let s = self.value(*a).shape();
                vec![(*a, Tensor::full(s, gd[0]))]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                vec![(
                    *a,
                    Tensor::full(av.shape(), gd[0] / T::from_count(av.numel())),
                )]
            }
            Op::SquaredDistance(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = bv.numel();
                let rows = av.numel() / d;
                let two = T::lit(2.0);
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        let diff = two * (av.data()[r * d + j] - bv.data()[j]) * gd[r];
                        ga[r * d + j] = diff;
                        gb[j] = gb[j] - diff;
                    }
                }
                vec![
                    (*a, Tensor::new(av.shape().to_vec(), ga)?),
                    (*b, Tensor::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(self.value(*a).shape().to_vec())?)],
            Op::SelectRows(a, indices) => {
                let av = self.value(*a);
                let width = av.numel() / av.rows();
                let mut ga = Tensor::zeros(av.shape());
                let gdata = ga.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..width {
                        gdata[i * width + j] = gdata[i * width + j] + gd[k * width + j];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
                dims,
            } => {
                let rows = dims.batch * dims.height * dims.width;
                let patch = 9 * dims.in_channels;
                let kv = self.value(*kernel);
                let gk = mm_tn(cols, gd, rows, patch, dims.out_channels);
                let mut gbias = vec![T::zero(); dims.out_channels];
                for r in 0..rows {
                    for (o, gb) in gbias.iter_mut().enumerate() {
                        *gb = *gb + gd[r * dims.out_channels + o];
                    }
                }
                let gcols = mm_nt(gd, kv.data(), rows, dims.out_channels, patch);
                let gin = col2im(&gcols, *dims);
                vec![
                    (
                        *input,
                        Tensor::new(self.value(*input).shape().to_vec(), gin)?,
                    ),
                    (*kernel, Tensor::new(kv.shape().to_vec(), gk)?),
                    (*bias, Tensor::new(vec![dims.out_channels], gbias)?),
                ]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let gv = self.value(*gamma).data();
                let channels = gv.len();
                let mut ggamma = vec![T::zero(); channels];
                let mut gbeta = vec![T::zero(); channels];
                for (i, &gi) in gd.iter().enumerate() {
                    let c = i % channels;
                    ggamma[c] = ggamma[c] + gi * xhat[i];
                    gbeta[c] = gbeta[c] + gi;
                }
                let gx: Vec<T> = if *train {
                    // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
                    let m = T::from_count(gd.len() / channels);
                    let mut sum_dxhat = vec![T::zero(); channels];
                    let mut sum_dxhat_xhat = vec![T::zero(); channels];
                    for (i, &gi) in gd.iter().enumerate() {
                        let c = i % channels;
                        let dxhat = gi * gv[c];
                        sum_dxhat[c] = sum_dxhat[c] + dxhat;
                        sum_dxhat_xhat[c] = sum_dxhat_xhat[c] + dxhat * xhat[i];
                    }
                    gd.iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            let c = i % channels;
                            let dxhat = gi * gv[c];
                            inv_std[c] / m
                                * (m * dxhat - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c])
                        })
                        .collect()
                } else {
                    gd.iter()
                        .enumerate()
                        .map(|(i, &gi)| gi * gv[i % channels] * inv_std[i % channels])
                        .collect()
                };
                vec![
                    (*x, Tensor::new(self.value(*x).shape().to_vec(), gx)?),
                    (*gamma, Tensor::new(vec![channels], ggamma)?),
                    (*beta, Tensor::new(vec![channels], gbeta)?),
                ]
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                let gdata = gi.data_mut();
                for (k, &idx) in argmax.iter().enumerate() {
                    gdata[idx] = gdata[idx] + gd[k];
                }
                vec![(*input, gi)]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::contract(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, target: &[usize], bc: Broadcast) -> Tensor<T> {
    match bc {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => {
            let total: T = g.data().iter().copied().sum();
            Tensor::full(target, total)
        }
        Broadcast::Row => {
            let width: usize = target.iter().product();
            let mut acc = vec![T::zero(); width];
            for (i, &x) in g.data().iter().enumerate() {
                acc[i % width] = acc[i % width] + x;
            }
            Tensor::new(target.to_vec(), acc).expect("row shape")
        }
    }
}

/// `(m, k) x (k, n)`.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

/// `(m, n) x (k, n)^T` -> `(m, k)`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = crate::linalg::dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// `(m, k)^T x (m, n)` -> `(k, n)`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let x = a[r * k + p];
            if x == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o = *o + x * y;
            }
        }
    }
    out
}

/// Patch matrix `(n*h*w, 9*c_in)`; column `(ky*3 + kx)*c_in + c`.
fn im2col<T: Scalar>(input: &[T], d: ConvDims) -> Vec<T> {
    let patch = 9 * d.in_channels;
    let mut cols = vec![T::zero(); d.batch * d.height * d.width * patch];
    for b in 0..d.batch {
        for y in 0..d.height {
            for x in 0..d.width {
                let row = (b * d.height + y) * d.width + x;
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > d.height {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x + kx;
                        if ix < 1 || ix > d.width {
                            continue;
                        }
                        let src = ((b * d.height + iy - 1) * d.width + ix - 1) * d.in_channels;
                        let dst = row * patch + (ky * 3 + kx) * d.in_channels;
                        cols[dst..dst + d.in_channels]
                            .copy_from_slice(&input[src..src + d.in_channels]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], d: ConvDims) -> Vec<T> {
    let patch = 9 * d.in_channels;
    let mut out = vec![T::zero(); d.batch * d.height * d.width * d.in_channels];
    for b in 0..d.batch {
        for y in 0..d.height {
            for x in 0..d.width {
                let row = (b * d.height + y) * d.width + x;
                for ky in 0..3 {
                    let iy = y + ky;
                    if iy < 1 || iy > d.height {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = x + kx;
                        if ix < 1 || ix > d.width {
                            continue;
                        }
                        let dst = ((b * d.height + iy - 1) * d.width + ix - 1) * d.in_channels;
                        let src = row * patch + (ky * 3 + kx) * d.in_channels;
                        for c in 0..d.in_channels {
                            out[dst + c] = out[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Compares the reverse-mode gradient of `f` at `point` with central
/// differences of step `step`. Returns
/// `max_i |analytic_i - central_i| / max(1, |central_i|)`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(step > T::zero()) {
        return Err(Error::contract("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.get(x);

    let eval = |p: Tensor<T>, coord: usize| -> Result<T> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x).map_err(|e| match e {
            Error::Numeric { op, detail } => {
                Error::numeric(op, format!("{detail} (probing coordinate {coord})"))
            }
            other => other,
        })?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(Error::numeric(
                "grad_check",
                format!("non-finite value at coordinate {coord}"),
            ));
        }
        Ok(v)
    };

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let central = (eval(plus, i)? - eval(minus, i)?) / (two * step);
        let err = (analytic.data()[i] - central).abs() / central.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn fixed_points_and_distance() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(th).item(), 0.0);
        let m3 = g.constant(Tensor::vector(vec![-3.0]));
        let r = g.relu(m3).unwrap();
        assert_eq!(g.value(r).item(), 0.0);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![4.0, 6.0]));
        let d = g.squared_distance(a, b).unwrap();
        assert_eq!(g.value(d).item(), 25.0);
    }

    #[test]
    fn clamp_bounds_values() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-1.0, 0.5, 3.0]));
        let c = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let err = g.log(z).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op, .. } if op == "log"));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 5.0]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = g.param(Tensor::<f64>::zeros(&[3]));
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn grad_check_on_sum_of_squares() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn grad_check_constant_is_exact() {
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                let s = g.sum(z)?;
                g.add_const(s, 3.0)
            },
            &Tensor::vector(vec![0.3, -0.7]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_reports_probe_coordinate() {
        let err = grad_check(
            |g, x| {
                let l = g.log(x)?;
                g.sum(l)
            },
            &Tensor::vector(vec![1.0, 1e-7]),
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn max_pool_of_constant_plane() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 5, 2], 0.75));
        let p = g.max_pool2(x).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 2, 2, 2]);
        assert!(g.value(p).data().iter().all(|&v| v == 0.75));
    }
}
