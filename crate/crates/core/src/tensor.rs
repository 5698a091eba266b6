//! Dense row-major tensors and a reverse-mode computation tape.
//!
//! Every value produced by a [`Tape`] method is recorded as a node whose
//! inputs were recorded earlier, so the node list is already in topological
//! order and backward is a single reverse sweep.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied inside [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss of shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type ElementDeriv = Box<dyn Fn(f64) -> f64 + Send>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Conv3x3 {
        input: Var,
        kernel: Var,
        width: usize,
        height: usize,
    },
    Sigmoid(Var),
    SoftmaxRows(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Sinusoid {
        positions: Var,
        dim: usize,
    },
    Map(Var, ElementDeriv),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Conv3x3 { input, kernel, .. } => vec![*input, *kernel],
            Op::LayerNorm { input, gain, bias, .. } => vec![*input, *gain, *bias],
            Op::ConcatCols(vs) => vs.clone(),
            Op::Affine(a, _)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Log(a)
            | Op::Pow(a, _)
            | Op::Clamp(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SelectRows(a, _)
            | Op::Map(a, _) => vec![*a],
            Op::Sinusoid { positions, .. } => vec![*positions],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation. Distinct tapes share nothing and may live on
/// different threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sinusoidal code of `pos` at channel `j` of an `m`-channel encoding:
/// even channels take `sin(pos / 10000^(2i/m))`, odd channels the cosine.
pub fn sinusoid(pos: f64, j: usize, m: usize) -> f64 {
    let (arg, _) = sinusoid_arg(pos, j, m);
    if j % 2 == 0 {
        arg.sin()
    } else {
        arg.cos()
    }
}

fn sinusoid_arg(pos: f64, j: usize, m: usize) -> (f64, f64) {
    let i = (j / 2) as f64;
    let freq = 1.0 / 10000f64.powf(2.0 * i / m as f64);
    (pos * freq, freq)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn need2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| TensorError::Domain {
        op,
        msg: format!("expected a rank-2 tensor, got {:?}", t.shape),
    })
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::Domain {
            op,
            msg: "non-finite input".into(),
        })
    }
}

/// `a[r×k] · b[k×c]` into a fresh buffer.
fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Offsets of the 3×3 neighbourhood in tap order.
const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Registers a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    /// Leaf tensor after a backward pass, including its accumulated grad.
    pub fn leaf_tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad: needs_grad,
            grad: None,
        };
        self.push(value, op, needs_grad)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape.clone();
        Ok(self.record(data, shape, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale · a + shift`, element-wise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|x| scale * x + shift).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Affine(a, scale)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Adds a `[c]` (or `[1, c]`) row vector to every row of an `[r, c]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(row));
        let (r, c) = need2("add_row", ta)?;
        if tb.len() != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut data = ta.data.clone();
        for i in 0..r {
            data[i * c..(i + 1) * c]
                .iter_mut()
                .zip(&tb.data)
                .for_each(|(x, b)| *x += b);
        }
        Ok(self.record(data, vec![r, c], Op::AddRow(a, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = need2("matmul", ta)?;
        let (k2, c) = need2("matmul", tb)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let data = matmul_raw(&ta.data, &tb.data, r, k, c);
        Ok(self.record(data, vec![r, c], Op::MatMul(a, b)))
    }

    /// 1×1 convolution over a flattened `[pixels, c_in]` map: a matmul with a
    /// `[c_in, c_out]` kernel.
    pub fn conv1x1(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.matmul(x, kernel)
    }

    /// Zero-padded, stride-1 3×3 convolution. `input` is `[width·height, c_in]`
    /// with pixel index `y·width + x`; `kernel` is `[9·c_in, c_out]` with row
    /// `tap·c_in + ci`.
    pub fn conv3x3(&mut self, input: Var, kernel: Var, width: usize, height: usize) -> Result<Var> {
        let (ti, tk) = (self.value(input), self.value(kernel));
        let (n, cin) = need2("conv3x3", ti)?;
        let (kr, cout) = need2("conv3x3", tk)?;
        if n != width * height || kr != 9 * cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv3x3",
                lhs: ti.shape.clone(),
                rhs: tk.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * cout];
        for y in 0..height {
            for x in 0..width {
                let o = &mut out[(y * width + x) * cout..(y * width + x + 1) * cout];
                for (t, (dx, dy)) in TAPS.iter().enumerate() {
                    let (sx, sy) = (x as isize + dx, y as isize + dy);
                    if sx < 0 || sy < 0 || sx >= width as isize || sy >= height as isize {
                        continue;
                    }
                    let src = (sy as usize * width + sx as usize) * cin;
                    for ci in 0..cin {
                        let v = ti.data[src + ci];
                        let krow = &tk.data[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                        for (ov, kv) in o.iter_mut().zip(krow) {
                            *ov += v * kv;
                        }
                    }
                }
            }
        }
        Ok(self.record(
            out,
            vec![n, cout],
            Op::Conv3x3 {
                input,
                kernel,
                width,
                height,
            },
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_finite("sigmoid", t)?;
        let data = t.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Sigmoid(a)))
    }

    /// Softmax along the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        check_finite("softmax", t)?;
        let (r, c) = need2("softmax", t)?;
        let mut data = t.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(self.record(data, vec![r, c], Op::SoftmaxRows(a)))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`]. Negative or NaN
    /// inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                msg: "negative or NaN input".into(),
            });
        }
        let data = t.data.iter().map(|x| x.max(LOG_FLOOR).ln()).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Log(a)))
    }

    pub fn pow(&mut self, a: Var, exponent: f64) -> Result<Var> {
        let t = self.value(a);
        let integral = exponent.fract() == 0.0;
        if t
            .data
            .iter()
            .any(|&x| (x < 0.0 && !integral) || (x == 0.0 && exponent < 0.0) || !x.is_finite())
        {
            return Err(TensorError::Domain {
                op: "pow",
                msg: format!("input outside the domain of x^{exponent}"),
            });
        }
        let data = t.data.iter().map(|x| x.powf(exponent)).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Pow(a, exponent)))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Clamp(a, lo, hi)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        Ok(self.record(vec![s], vec![1], Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        Ok(self.record(vec![s], vec![1], Op::Mean(a)))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = need2("concat", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = need2("concat", t)?;
            if pr != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.record(data, vec![r, total], Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = need2("transpose", t)?;
        let data = transpose_raw(&t.data, r, c);
        Ok(self.record(data, vec![c, r], Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data.clone();
        Ok(self.record(data, shape.to_vec(), Op::Reshape(a)))
    }

    /// Gathers the listed rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = need2("select_rows", t)?;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(TensorError::Domain {
                op: "select_rows",
                msg: format!("row selection {rows:?} out of range for {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        Ok(self.record(data, vec![rows.len(), c], Op::SelectRows(a, rows.to_vec())))
    }

    /// Row-wise layer normalisation with per-column gain and bias.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(input);
        let (r, c) = need2("layer_norm", t)?;
        for p in [gain, bias] {
            if self.value(p).len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: t.shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data[i * c..(i + 1) * c];
            let (mu, rstd) = row_stats(row, eps);
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * rstd * g[j] + b[j];
            }
        }
        Ok(self.record(
            data,
            vec![r, c],
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            },
        ))
    }

    /// Encodes `[n, 2]` positions as `[n, dim]` sinusoids: the first `dim/2`
    /// channels carry column 0, the remaining channels column 1.
    pub fn sinusoid_encode(&mut self, positions: Var, dim: usize) -> Result<Var> {
        let t = self.value(positions);
        let (n, two) = need2("sinusoid_encode", t)?;
        if two != 2 || dim < 2 {
            return Err(TensorError::Domain {
                op: "sinusoid_encode",
                msg: format!("need [n, 2] positions and dim >= 2, got {:?} / {dim}", t.shape),
            });
        }
        let half = dim / 2;
        let mut data = vec![0.0; n * dim];
        for k in 0..n {
            for j in 0..dim {
                let (axis, jj, m) = if j < half { (0, j, half) } else { (1, j - half, dim - half) };
                data[k * dim + j] = sinusoid(t.data[k * 2 + axis], jj, m);
            }
        }
        Ok(self.record(data, vec![n, dim], Op::Sinusoid { positions, dim }))
    }

    /// Element-wise map with a caller-supplied local derivative.
    pub fn map(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64) -> f64 + Send + 'static,
    ) -> Result<Var> {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        Ok(self.record(data, shape, Op::Map(a, Box::new(deriv))))
    }

    /// Reverse sweep from a `[1]`-shaped loss. Leaf gradients accumulate into
    /// the leaves' `grad` fields as well as the returned map; the tape stays
    /// usable.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss).to_vec();
        if shape != [1] {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            for (input, local) in self.local_grads(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(local),
                }
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if node.value.requires_grad {
                    node.value.accumulate_grad(g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(&tb.data).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(&ta.data).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Affine(a, s) => vec![(*a, g.iter().map(|x| x * s).collect())],
            Op::AddRow(a, row) => {
                let c = val(*row).len();
                let mut gr = vec![0.0; c];
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*a, g.to_vec()), (*row, gr)]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (r, k) = ta.dims2().unwrap();
                let c = tb.shape[1];
                let mut res = Vec::new();
                if wants(*a) {
                    let bt = transpose_raw(&tb.data, k, c);
                    res.push((*a, matmul_raw(g, &bt, r, c, k)));
                }
                if wants(*b) {
                    let at = transpose_raw(&ta.data, r, k);
                    res.push((*b, matmul_raw(&at, g, k, r, c)));
                }
                res
            }
            Op::Conv3x3 {
                input,
                kernel,
                width,
                height,
            } => {
                let (ti, tk) = (val(*input), val(*kernel));
                let cin = ti.shape[1];
                let cout = tk.shape[1];
                let (w, h) = (*width, *height);
                let mut gi = vec![0.0; ti.len()];
                let mut gk = vec![0.0; tk.len()];
                let need_i = wants(*input);
                for y in 0..h {
                    for x in 0..w {
                        let go = &g[(y * w + x) * cout..(y * w + x + 1) * cout];
                        for (t, (dx, dy)) in TAPS.iter().enumerate() {
                            let (sx, sy) = (x as isize + dx, y as isize + dy);
                            if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * cin;
                            for ci in 0..cin {
                                let base = (t * cin + ci) * cout;
                                let xv = ti.data[src + ci];
                                let gkrow = &mut gk[base..base + cout];
                                let mut acc = 0.0;
                                for ((gkv, gov), kv) in
                                    gkrow.iter_mut().zip(go).zip(&tk.data[base..base + cout])
                                {
                                    *gkv += xv * gov;
                                    acc += gov * kv;
                                }
                                if need_i {
                                    gi[src + ci] += acc;
                                }
                            }
                        }
                    }
                }
                vec![(*input, gi), (*kernel, gk)]
            }
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter().zip(&out.data).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::SoftmaxRows(a) => {
                let c = out.shape[1];
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(c).zip(out.data.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Log(a) => vec![(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(g, &x)| if x > LOG_FLOOR { g / x } else { 0.0 })
                    .collect(),
            )],
            Op::Pow(a, e) => vec![(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(g, &x)| g * e * x.powf(e - 1.0))
                    .collect(),
            )],
            Op::Clamp(a, lo, hi) => vec![(
                *a,
                g.iter()
                    .zip(&val(*a).data)
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::ConcatCols(parts) => {
                let r = out.shape[0];
                let total = out.shape[1];
                let mut off = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).shape[1];
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    off += w;
                    res.push((p, gp));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().unwrap();
                vec![(*a, transpose_raw(g, c, r))]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::SelectRows(a, rows) => {
                let ta = val(*a);
                let c = ta.shape[1];
                let mut ga = vec![0.0; ta.len()];
                for (k, &i) in rows.iter().enumerate() {
                    ga[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                eps,
            } => {
                let ti = val(*input);
                let gn = &val(*gain).data;
                let (r, c) = ti.dims2().unwrap();
                let mut gx = vec![0.0; r * c];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let row = &ti.data[i * c..(i + 1) * c];
                    let (mu, rstd) = row_stats(row, *eps);
                    let gr = &g[i * c..(i + 1) * c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * rstd;
                        dxhat[j] = gr[j] * gn[j];
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*input, gx), (*gain, gg), (*bias, gb)]
            }
            Op::Sinusoid { positions, dim } => {
                let tp = val(*positions);
                let n = tp.shape[0];
                let half = dim / 2;
                let mut gp = vec![0.0; n * 2];
                for k in 0..n {
                    for j in 0..*dim {
                        let (axis, jj, m) =
                            if j < half { (0, j, half) } else { (1, j - half, dim - half) };
                        let (arg, freq) = sinusoid_arg(tp.data[k * 2 + axis], jj, m);
                        let d = if jj % 2 == 0 { freq * arg.cos() } else { -freq * arg.sin() };
                        gp[k * 2 + axis] += g[k * dim + j] * d;
                    }
                }
                vec![(*positions, gp)]
            }
            Op::Map(a, deriv) => vec![(
                *a,
                g.iter().zip(&val(*a).data).map(|(g, &x)| g * deriv(x)).collect(),
            )],
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c;
    (mu, 1.0 / (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_grad(true))
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[2, 3], 1.0));
        let b = tape.constant(Tensor::full(&[3, 2], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn sigmoid_and_softmax_basics() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        let x = tape.constant(Tensor::full(&[1, 3], 1.0));
        let p = tape.softmax_rows(x).unwrap();
        for v in tape.value(p).data() {
            assert_relative_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap());
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
        let bad = tape.constant(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        assert!(matches!(tape.sigmoid(bad), Err(TensorError::Domain { op: "sigmoid", .. })));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn log_rejects_negative_and_floors_zero() {
        let mut tape = Tape::new();
        let neg = tape.constant(Tensor::scalar(-1.0));
        assert!(tape.log(neg).is_err());
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = tape.log(zero).unwrap();
        assert_relative_eq!(tape.value(l).item(), LOG_FLOOR.ln());
    }

    #[test]
    fn grad_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4], vec![0.3, -1.0, 2.0, 5.0]);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
        assert_eq!(tape.leaf_tensor(x).grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.affine(x, 3.0, 1.0).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let c = tape.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let m = tape.mul(x, c).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn conv3x3_identity_kernel() {
        // centre tap = identity, everything else zero
        let (w, h, c) = (3, 2, 2);
        let mut k = vec![0.0; 9 * c * c];
        for ci in 0..c {
            k[(4 * c + ci) * c + ci] = 1.0;
        }
        let data: Vec<f64> = (0..w * h * c).map(|i| i as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![w * h, c], data.clone()).unwrap());
        let kv = tape.constant(Tensor::new(vec![9 * c, c], k).unwrap());
        let y = tape.conv3x3(x, kv, w, h).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        let d = tape.value(y).data();
        assert_relative_eq!(d.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(d.iter().map(|v| v * v).sum::<f64>() / 4.0, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sinusoid_channels() {
        assert_relative_eq!(sinusoid(1.0, 0, 4), 1f64.sin());
        assert_relative_eq!(sinusoid(1.0, 1, 4), 1f64.cos());
        assert_relative_eq!(sinusoid(1.0, 2, 4), 0.01f64.sin());
        assert_relative_eq!(sinusoid(1.0, 3, 4), 0.01f64.cos());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }
}
