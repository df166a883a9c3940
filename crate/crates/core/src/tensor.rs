//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Tape`] owns every tensor created through it; ops append a new tensor
//! plus a record of how it was produced. [`Tape::backward`] walks the
//! records in reverse, accumulating gradients into `grad` buffers.
//! Gradients accumulate across calls: running backward twice doubles them,
//! so callers extract gradients from a fresh tape per step.
//!
//! Shapes are row-major. Binary elementwise ops require equal shapes or a
//! single-element operand (scalar broadcast); everything else is explicit,
//! dedicated ops rather than general broadcasting.

use crate::error::{Error, Result};
use crate::fft;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// A dense tensor: row-major data plus shape, with an optional gradient
/// buffer of the same length filled in by backward.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How a tensor was produced; one record per tensor, in creation order.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    AddConst { a: TensorId },
    MulConst { a: TensorId, c: f64 },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Softplus { a: TensorId },
    Softmax { a: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    AddRowBias { x: TensorId, b: TensorId },
    ScaleColumns { x: TensorId, v: TensorId },
    SelectColumn { x: TensorId, col: usize },
    SliceCols { x: TensorId, start: usize },
    SelectRows { x: TensorId, rows: Vec<usize> },
    ConcatRows { a: TensorId, b: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    MeanRows { x: TensorId },
    GlobalAvgPool { x: TensorId },
    Conv2d { x: TensorId, k: TensorId, stride: usize, pad: usize },
    MulSpatialMask { x: TensorId, m: TensorId },
    ScalePerSample { x: TensorId, s: TensorId },
    ScalePerChannel { x: TensorId, s: TensorId },
    RowNormalize { x: TensorId },
    Fft2Real { x: TensorId },
    Fft2Imag { x: TensorId },
    Ifft2Real { re: TensorId, im: TensorId },
    BceWithLogits { logits: TensorId, labels: Vec<f64> },
    ContrastiveRows { sim: TensorId, pos: Vec<Option<usize>> },
}

/// Wengert list: tensors plus the op that produced each.
pub struct Tape {
    pub tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// Largest f64 strictly below 1; sigmoid output is clamped into
// [MIN_POSITIVE, ONE_BELOW] so it stays strictly inside (0, 1).
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, ONE_BELOW)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// c = a * b for row-major a [m,k] and b [k,n].
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let out = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                out[j] += av * row[j];
            }
        }
    }
    c
}

impl Tape {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.tensors.push(Tensor { data, shape, requires_grad, grad: None });
        self.ops.push(op);
        TensorId(self.tensors.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if data.len() != numel(&shape) {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_shape(&self, a: TensorId, b: TensorId, name: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else if numel(sb) == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::ShapeMismatch(format!("{name}: {sa:?} vs {sb:?}")))
        }
    }

    fn ew(&self, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.data(a), self.data(b));
        match (da.len(), db.len()) {
            (1, n) if n != 1 => db.iter().map(|&y| f(da[0], y)).collect(),
            (_, 1) => da.iter().map(|&x| f(x, db[0])).collect(),
            _ => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "add")?;
        let data = self.ew(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "sub")?;
        let data = self.ew(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "mul")?;
        let data = self.ew(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let shape = self.binary_shape(a, b, "div")?;
        let data = self.ew(a, b, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::Div { a, b }))
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::AddConst { a }))
    }

    pub fn mul_const(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::MulConst { a, c }))
    }

    // ── Activations ─────────────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::Sigmoid { a }))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::Tanh { a }))
    }

    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.data(a).iter().map(|&x| softplus(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        Ok(self.push(data, shape, rg, Op::Softplus { a }))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::ShapeMismatch("softmax of rank-0".into()))?;
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Softmax { a }))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::DimMismatch { lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, vec![m, n], rg, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose needs rank 2, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(data, vec![c, r], rg, Op::Transpose { a }))
    }

    // ── Structure ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.data(a).len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Reshape { a }))
    }

    /// y[r,c] = x[r,c] + b[c] for x [R,C], b [C].
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch(format!("add_row_bias: {sx:?} + {sb:?}")));
        }
        let c = sx[1];
        let bias = self.data(b).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let (shape, rg) = (sx.to_vec(), self.rg(x) || self.rg(b));
        Ok(self.push(data, shape, rg, Op::AddRowBias { x, b }))
    }

    /// y[r,c] = x[r,c] * v[c] for x [R,C], v [C].
    pub fn scale_columns(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 2 || sv != [sx[1]] {
            return Err(Error::ShapeMismatch(format!("scale_columns: {sx:?} * {sv:?}")));
        }
        let c = sx[1];
        let scale = self.data(v).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &val)| val * scale[i % c])
            .collect();
        let (shape, rg) = (sx.to_vec(), self.rg(x) || self.rg(v));
        Ok(self.push(data, shape, rg, Op::ScaleColumns { x, v }))
    }

    /// Column `col` of a [R,C] matrix as a length-R vector.
    pub fn select_column(&mut self, x: TensorId, col: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || col >= sx[1] {
            return Err(Error::ShapeMismatch(format!("select_column {col} of {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let src = self.data(x);
        let data = (0..r).map(|i| src[i * c + col]).collect();
        let rg = self.rg(x);
        Ok(self.push(data, vec![r], rg, Op::SelectColumn { x, col }))
    }

    /// Columns [start, start+len) of a [R,C] matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + len > sx[1] {
            return Err(Error::ShapeMismatch(format!("slice_cols {start}+{len} of {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![r, len], rg, Op::SliceCols { x, start }))
    }

    /// Gathers the given rows of a [R,C] matrix (duplicates allowed).
    pub fn select_rows(&mut self, x: TensorId, rows: Vec<usize>) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch(format!("select_rows of {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch(format!("row {bad} out of range {r}")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let (n, rg) = (rows.len(), self.rg(x));
        Ok(self.push(data, vec![n, c], rg, Op::SelectRows { x, rows }))
    }

    /// Stacks a [R1,C] on top of b [R2,C].
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch(format!("concat_rows: {sa:?} + {sb:?}")));
        }
        let shape = vec![sa[0] + sb[0], sa[1]];
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(data, shape, rg, Op::ConcatRows { a, b }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::EmptyInput("mean_all of empty tensor".into()));
        }
        let s: f64 = self.data(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![s], vec![1], rg, Op::MeanAll { a }))
    }

    /// Column means of a [R,C] matrix: output [C].
    pub fn mean_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] == 0 {
            return Err(Error::ShapeMismatch(format!("mean_rows of {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let src = self.data(x);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += src[i * c + j];
            }
        }
        for v in data.iter_mut() {
            *v /= r as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![c], rg, Op::MeanRows { x }))
    }

    /// [B,C,H,W] -> [B,C,1,1] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch(format!("global_avg_pool of {sx:?}")));
        }
        let (bn, cn, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let plane = h * w;
        let src = self.data(x);
        let mut data = vec![0.0; bn * cn];
        for p in 0..bn * cn {
            data[p] = src[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let rg = self.rg(x);
        Ok(self.push(data, vec![bn, cn, 1, 1], rg, Op::GlobalAvgPool { x }))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// 2-D cross-correlation: x [B,C,H,W] with kernels [O,C,kh,kw],
    /// zero padding `pad` on all sides, square stride.
    pub fn conv2d(&mut self, x: TensorId, k: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(Error::InvalidGeometry(format!("conv2d ranks: x {sx:?}, k {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(Error::InvalidGeometry(format!(
                "channel mismatch: input {} vs kernel {}",
                sx[1], sk[1]
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidGeometry("stride must be >= 1".into()));
        }
        let (bn, cn, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (on, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::InvalidGeometry(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let (xd, kd) = (self.data(x), self.data(k));
        let mut out = vec![0.0; bn * on * ho * wo];
        for b in 0..bn {
            for o in 0..on {
                let obase = (b * on + o) * ho * wo;
                for c in 0..cn {
                    let xbase = (b * cn + c) * h * w;
                    let kbase = (o * cn + c) * kh * kw;
                    for u in 0..kh {
                        for v in 0..kw {
                            let kv = kd[kbase + u * kw + v];
                            if kv == 0.0 {
                                continue;
                            }
                            for i in 0..ho {
                                let r = (i * stride + u) as isize - pad as isize;
                                if r < 0 || r >= h as isize {
                                    continue;
                                }
                                let xrow = xbase + r as usize * w;
                                let orow = obase + i * wo;
                                for j in 0..wo {
                                    let s = (j * stride + v) as isize - pad as isize;
                                    if s < 0 || s >= w as isize {
                                        continue;
                                    }
                                    out[orow + j] += kv * xd[xrow + s as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(out, vec![bn, on, ho, wo], rg, Op::Conv2d { x, k, stride, pad }))
    }

    // ── Broadcast scalers ───────────────────────────────────────────────

    /// y[b,c,h,w] = x[b,c,h,w] * m[h,w]: one spatial mask shared by every
    /// sample and channel.
    pub fn mul_spatial_mask(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        if sx.len() != 4 || sm != [sx[2], sx[3]] {
            return Err(Error::ShapeMismatch(format!("mul_spatial_mask: {sx:?} * {sm:?}")));
        }
        let plane = sx[2] * sx[3];
        let mask = self.data(m).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i % plane])
            .collect();
        let (shape, rg) = (sx.to_vec(), self.rg(x) || self.rg(m));
        Ok(self.push(data, shape, rg, Op::MulSpatialMask { x, m }))
    }

    /// y[b, ...] = x[b, ...] * s[b]: one scale per sample.
    pub fn scale_per_sample(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.is_empty() || ss != [sx[0]] {
            return Err(Error::ShapeMismatch(format!("scale_per_sample: {sx:?} * {ss:?}")));
        }
        let per = numel(sx) / sx[0];
        let scale = self.data(s).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / per])
            .collect();
        let (shape, rg) = (sx.to_vec(), self.rg(x) || self.rg(s));
        Ok(self.push(data, shape, rg, Op::ScalePerSample { x, s }))
    }

    /// y[b,c,h,w] = x[b,c,h,w] * s[b,c]: one scale per sample-channel.
    pub fn scale_per_channel(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 4 || ss != [sx[0], sx[1]] {
            return Err(Error::ShapeMismatch(format!("scale_per_channel: {sx:?} * {ss:?}")));
        }
        let plane = sx[2] * sx[3];
        let scale = self.data(s).to_vec();
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / plane])
            .collect();
        let (shape, rg) = (sx.to_vec(), self.rg(x) || self.rg(s));
        Ok(self.push(data, shape, rg, Op::ScalePerChannel { x, s }))
    }

    /// L2-normalizes each row of a [R,C] matrix. Errors on a zero row.
    pub fn row_normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::ShapeMismatch(format!("row_normalize of {sx:?}")));
        }
        let c = sx[1];
        let mut data = self.data(x).to_vec();
        for (r, row) in data.chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(r));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        let (shape, rg) = (sx.to_vec(), self.rg(x));
        Ok(self.push(data, shape, rg, Op::RowNormalize { x }))
    }

    // ── Spectral ────────────────────────────────────────────────────────

    /// 2-D FFT of a real tensor over its last two (power-of-two) dims.
    /// Returns (real, imaginary) parts, each the same shape as the input.
    pub fn fft2(&mut self, x: TensorId) -> Result<(TensorId, TensorId)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::ShapeMismatch(format!("fft2 of {sx:?}")));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        fft::check_pow2(h, w)?;
        let mut re = self.data(x).to_vec();
        let mut im = vec![0.0; re.len()];
        fft::fft2d_batch(&mut re, &mut im, h, w, false);
        let rg = self.rg(x);
        let rid = self.push(re, sx.clone(), rg, Op::Fft2Real { x });
        let iid = self.push(im, sx, rg, Op::Fft2Imag { x });
        Ok((rid, iid))
    }

    /// Real part of the inverse 2-D FFT of (re, im) over the last two dims.
    pub fn ifft2_real(&mut self, re: TensorId, im: TensorId) -> Result<TensorId> {
        let (sr, si) = (self.shape(re), self.shape(im));
        if sr != si || sr.len() < 2 {
            return Err(Error::ShapeMismatch(format!("ifft2_real: {sr:?} vs {si:?}")));
        }
        let shape = sr.to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        fft::check_pow2(h, w)?;
        let mut r = self.data(re).to_vec();
        let mut i = self.data(im).to_vec();
        fft::fft2d_batch(&mut r, &mut i, h, w, true);
        let rg = self.rg(re) || self.rg(im);
        Ok(self.push(r, shape, rg, Op::Ifft2Real { re, im }))
    }

    // ── Loss kernels ────────────────────────────────────────────────────

    /// Mean binary cross-entropy over logits [B] against labels in {0,1},
    /// in the stabilized max(z,0) - z*y + ln(1+exp(-|z|)) form.
    pub fn bce_with_logits(&mut self, logits: TensorId, labels: &[f64]) -> Result<TensorId> {
        let sl = self.shape(logits);
        if sl.len() != 1 || sl[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "bce: logits {sl:?} vs {} labels",
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("bce over empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("bce label {bad} is not 0 or 1")));
        }
        let zs = self.data(logits);
        let mut loss = 0.0;
        for (&z, &y) in zs.iter().zip(labels) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(vec![loss], vec![1], rg, Op::BceWithLogits { logits, labels: labels.to_vec() }))
    }

    /// InfoNCE-style reduction over a precomputed similarity matrix
    /// [B,B]: for each row with a designated positive column, the term is
    /// -(S[i,pos] - ln sum_{j != i} exp(S[i,j])); rows with no positive are
    /// skipped and the mean runs over the included rows. All rows skipped
    /// yields a constant 0.
    pub fn contrastive_rows(&mut self, sim: TensorId, pos: Vec<Option<usize>>) -> Result<TensorId> {
        let ss = self.shape(sim);
        if ss.len() != 2 || ss[0] != ss[1] || ss[0] != pos.len() {
            return Err(Error::ShapeMismatch(format!(
                "contrastive_rows: sim {ss:?} vs {} positives",
                pos.len()
            )));
        }
        let b = ss[0];
        for (i, p) in pos.iter().enumerate() {
            if let Some(p) = p {
                if *p >= b || *p == i {
                    return Err(Error::Data(format!("row {i}: invalid positive index {p}")));
                }
            }
        }
        let included = pos.iter().flatten().count();
        let s = self.data(sim);
        let mut loss = 0.0;
        if included > 0 {
            for (i, p) in pos.iter().enumerate() {
                let Some(p) = p else { continue };
                let row = &s[i * b..(i + 1) * b];
                let m = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, &v)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, &v)| (v - m).exp())
                    .sum();
                loss -= row[*p] - (m + denom.ln());
            }
            loss /= included as f64;
        }
        let rg = self.rg(sim);
        Ok(self.push(vec![loss], vec![1], rg, Op::ContrastiveRows { sim, pos }))
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contrib: Vec<f64>) {
        if !self.rg(id) {
            return;
        }
        let t = &mut self.tensors[id.0];
        match &mut t.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += ci;
                }
            }
            None => t.grad = Some(contrib),
        }
    }

    /// Reduces an elementwise contribution to the operand's size: identity
    /// for matching lengths, total sum for a broadcast scalar operand.
    fn reduce_to(contrib: Vec<f64>, n: usize) -> Vec<f64> {
        if contrib.len() == n {
            contrib
        } else {
            vec![contrib.iter().sum()]
        }
    }

    /// Reverse-mode sweep from a scalar loss. Seeds the loss gradient with
    /// 1.0 and accumulates into every leaf that requires grad, so running
    /// backward twice doubles leaf gradients. Derived tensors' grads are
    /// scratch space and reset at the start of each sweep.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for i in 0..self.tensors.len() {
            if !matches!(self.ops[i], Op::Leaf) {
                self.tensors[i].grad = None;
            }
        }
        self.accumulate(loss, vec![1.0]);

        for i in (0..self.ops.len()).rev() {
            if !self.tensors[i].requires_grad {
                continue;
            }
            let Some(g) = self.tensors[i].grad.clone() else { continue };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => {}

                Op::Add { a, b } => {
                    let na = self.data(a).len();
                    let nb = self.data(b).len();
                    self.accumulate(a, Self::reduce_to(g.clone(), na));
                    self.accumulate(b, Self::reduce_to(g, nb));
                }
                Op::Sub { a, b } => {
                    let na = self.data(a).len();
                    let nb = self.data(b).len();
                    self.accumulate(a, Self::reduce_to(g.clone(), na));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, Self::reduce_to(neg, nb));
                }
                Op::Mul { a, b } => {
                    let ga = self.ew_grad(&g, b);
                    let gb = self.ew_grad(&g, a);
                    let na = self.data(a).len();
                    let nb = self.data(b).len();
                    self.accumulate(a, Self::reduce_to(ga, na));
                    self.accumulate(b, Self::reduce_to(gb, nb));
                }
                Op::Div { a, b } => {
                    let (da, db) = (self.data(a).to_vec(), self.data(b).to_vec());
                    let n = g.len();
                    let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                    let ga: Vec<f64> = (0..n).map(|i| g[i] / at(&db, i)).collect();
                    let gb: Vec<f64> = (0..n)
                        .map(|i| {
                            let bv = at(&db, i);
                            -g[i] * at(&da, i) / (bv * bv)
                        })
                        .collect();
                    self.accumulate(a, Self::reduce_to(ga, da.len()));
                    self.accumulate(b, Self::reduce_to(gb, db.len()));
                }
                Op::AddConst { a } => self.accumulate(a, g),
                Op::MulConst { a, c } => {
                    self.accumulate(a, g.iter().map(|v| v * c).collect());
                }

                Op::Relu { a } => {
                    let contrib: Vec<f64> = self
                        .data(a)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    self.accumulate(a, contrib);
                }
                Op::Sigmoid { a } => {
                    let contrib: Vec<f64> = self.tensors[i]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(a, contrib);
                }
                Op::Tanh { a } => {
                    let contrib: Vec<f64> = self.tensors[i]
                        .data
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * (1.0 - y * y))
                        .collect();
                    self.accumulate(a, contrib);
                }
                Op::Softplus { a } => {
                    let contrib: Vec<f64> = self
                        .data(a)
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| gv * sigmoid(x))
                        .collect();
                    self.accumulate(a, contrib);
                }
                Op::Softmax { a } => {
                    let cols = *self.tensors[i].shape.last().unwrap();
                    let y = self.tensors[i].data.clone();
                    let mut contrib = vec![0.0; y.len()];
                    for r in 0..y.len() / cols {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = ys.iter().zip(gs).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..cols {
                            contrib[r * cols + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    self.accumulate(a, contrib);
                }

                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    // ga = g . b^T, gb = a^T . g
                    let (da, db) = (self.data(a).to_vec(), self.data(b).to_vec());
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * db[p * n + j];
                            }
                            ga[r * k + p] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let av = da[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[r * n + j];
                            }
                        }
                    }
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose { a } => {
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut contrib = vec![0.0; r * c];
                    for ii in 0..c {
                        for jj in 0..r {
                            contrib[jj * c + ii] = g[ii * r + jj];
                        }
                    }
                    self.accumulate(a, contrib);
                }
                Op::Reshape { a } => self.accumulate(a, g),

                Op::AddRowBias { x, b } => {
                    let c = self.shape(b)[0];
                    let mut gb = vec![0.0; c];
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % c] += gv;
                    }
                    self.accumulate(x, g);
                    self.accumulate(b, gb);
                }
                Op::ScaleColumns { x, v } => {
                    let c = self.shape(v)[0];
                    let scale = self.data(v).to_vec();
                    let xd = self.data(x).to_vec();
                    let gx: Vec<f64> = g.iter().enumerate().map(|(idx, &gv)| gv * scale[idx % c]).collect();
                    let mut gv = vec![0.0; c];
                    for (idx, &gval) in g.iter().enumerate() {
                        gv[idx % c] += gval * xd[idx];
                    }
                    self.accumulate(x, gx);
                    self.accumulate(v, gv);
                }
                Op::SelectColumn { x, col } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut gx = vec![0.0; r * c];
                    for ii in 0..r {
                        gx[ii * c + col] = g[ii];
                    }
                    self.accumulate(x, gx);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let len = self.tensors[i].shape[1];
                    let mut gx = vec![0.0; r * c];
                    for ii in 0..r {
                        gx[ii * c + start..ii * c + start + len]
                            .copy_from_slice(&g[ii * len..(ii + 1) * len]);
                    }
                    self.accumulate(x, gx);
                }
                Op::SelectRows { x, rows } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut gx = vec![0.0; r * c];
                    for (out_i, &src_r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[src_r * c + j] += g[out_i * c + j];
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::ConcatRows { a, b } => {
                    let na = self.data(a).len();
                    self.accumulate(a, g[..na].to_vec());
                    self.accumulate(b, g[na..].to_vec());
                }

                Op::SumAll { a } => {
                    let n = self.data(a).len();
                    self.accumulate(a, vec![g[0]; n]);
                }
                Op::MeanAll { a } => {
                    let n = self.data(a).len();
                    self.accumulate(a, vec![g[0] / n as f64; n]);
                }
                Op::MeanRows { x } => {
                    let (r, c) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut gx = vec![0.0; r * c];
                    for ii in 0..r {
                        for j in 0..c {
                            gx[ii * c + j] = g[j] / r as f64;
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::GlobalAvgPool { x } => {
                    let sx = self.shape(x).to_vec();
                    let plane = sx[2] * sx[3];
                    let mut gx = vec![0.0; numel(&sx)];
                    for (p, &gv) in g.iter().enumerate() {
                        let share = gv / plane as f64;
                        for q in 0..plane {
                            gx[p * plane + q] = share;
                        }
                    }
                    self.accumulate(x, gx);
                }

                Op::Conv2d { x, k, stride, pad } => {
                    let sx = self.shape(x).to_vec();
                    let sk = self.shape(k).to_vec();
                    let (bn, cn, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                    let (on, kh, kw) = (sk[0], sk[2], sk[3]);
                    let so = self.tensors[i].shape.clone();
                    let (ho, wo) = (so[2], so[3]);
                    let xd = self.data(x).to_vec();
                    let kd = self.data(k).to_vec();
                    let want_x = self.rg(x);
                    let mut gx = if want_x { vec![0.0; xd.len()] } else { Vec::new() };
                    let mut gk = vec![0.0; kd.len()];
                    for b in 0..bn {
                        for o in 0..on {
                            let obase = (b * on + o) * ho * wo;
                            for c in 0..cn {
                                let xbase = (b * cn + c) * h * w;
                                let kbase = (o * cn + c) * kh * kw;
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let kv = kd[kbase + u * kw + v];
                                        let mut ksum = 0.0;
                                        for ii in 0..ho {
                                            let r = (ii * stride + u) as isize - pad as isize;
                                            if r < 0 || r >= h as isize {
                                                continue;
                                            }
                                            let xrow = xbase + r as usize * w;
                                            let orow = obase + ii * wo;
                                            for jj in 0..wo {
                                                let s = (jj * stride + v) as isize - pad as isize;
                                                if s < 0 || s >= w as isize {
                                                    continue;
                                                }
                                                let gv = g[orow + jj];
                                                ksum += gv * xd[xrow + s as usize];
                                                if want_x {
                                                    gx[xrow + s as usize] += gv * kv;
                                                }
                                            }
                                        }
                                        gk[kbase + u * kw + v] += ksum;
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        self.accumulate(x, gx);
                    }
                    self.accumulate(k, gk);
                }

                Op::MulSpatialMask { x, m } => {
                    let sx = self.shape(x).to_vec();
                    let plane = sx[2] * sx[3];
                    let mask = self.data(m).to_vec();
                    let xd = self.data(x).to_vec();
                    let gx: Vec<f64> = g.iter().enumerate().map(|(idx, &gv)| gv * mask[idx % plane]).collect();
                    let mut gm = vec![0.0; plane];
                    for (idx, &gv) in g.iter().enumerate() {
                        gm[idx % plane] += gv * xd[idx];
                    }
                    self.accumulate(x, gx);
                    self.accumulate(m, gm);
                }
                Op::ScalePerSample { x, s } => {
                    let sx = self.shape(x).to_vec();
                    let per = numel(&sx) / sx[0];
                    let scale = self.data(s).to_vec();
                    let xd = self.data(x).to_vec();
                    let gx: Vec<f64> = g.iter().enumerate().map(|(idx, &gv)| gv * scale[idx / per]).collect();
                    let mut gs = vec![0.0; sx[0]];
                    for (idx, &gv) in g.iter().enumerate() {
                        gs[idx / per] += gv * xd[idx];
                    }
                    self.accumulate(x, gx);
                    self.accumulate(s, gs);
                }
                Op::ScalePerChannel { x, s } => {
                    let sx = self.shape(x).to_vec();
                    let plane = sx[2] * sx[3];
                    let scale = self.data(s).to_vec();
                    let xd = self.data(x).to_vec();
                    let gx: Vec<f64> = g.iter().enumerate().map(|(idx, &gv)| gv * scale[idx / plane]).collect();
                    let mut gs = vec![0.0; sx[0] * sx[1]];
                    for (idx, &gv) in g.iter().enumerate() {
                        gs[idx / plane] += gv * xd[idx];
                    }
                    self.accumulate(x, gx);
                    self.accumulate(s, gs);
                }
                Op::RowNormalize { x } => {
                    let c = self.shape(x)[1];
                    let xd = self.data(x).to_vec();
                    let y = self.tensors[i].data.clone();
                    let mut gx = vec![0.0; xd.len()];
                    for r in 0..xd.len() / c {
                        let xs = &xd[r * c..(r + 1) * c];
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &g[r * c..(r + 1) * c];
                        let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let dot: f64 = gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum();
                        for j in 0..c {
                            gx[r * c + j] = (gs[j] - dot * ys[j]) / norm;
                        }
                    }
                    self.accumulate(x, gx);
                }

                // The transform is linear, so its backward is the adjoint
                // map: for R = Re(F x), grad_x += Re(F g); for I = Im(F x),
                // grad_x += Im(F g), using the symmetry of the DFT kernel.
                Op::Fft2Real { x } | Op::Fft2Imag { x } => {
                    let sx = self.shape(x).to_vec();
                    let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                    let mut re = g;
                    let mut im = vec![0.0; re.len()];
                    fft::fft2d_batch(&mut re, &mut im, h, w, false);
                    let contrib = if matches!(self.ops[i], Op::Fft2Real { .. }) { re } else { im };
                    self.accumulate(x, contrib);
                }
                Op::Ifft2Real { re, im } => {
                    let shape = self.tensors[i].shape.clone();
                    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    let scale = 1.0 / (h * w) as f64;
                    let mut gr = g;
                    let mut gi = vec![0.0; gr.len()];
                    fft::fft2d_batch(&mut gr, &mut gi, h, w, false);
                    for v in gr.iter_mut() {
                        *v *= scale;
                    }
                    for v in gi.iter_mut() {
                        *v *= scale;
                    }
                    self.accumulate(re, gr);
                    self.accumulate(im, gi);
                }

                Op::BceWithLogits { logits, labels } => {
                    let zs = self.data(logits).to_vec();
                    let bsz = labels.len() as f64;
                    let contrib: Vec<f64> = zs
                        .iter()
                        .zip(&labels)
                        .map(|(&z, &y)| g[0] * (sigmoid(z) - y) / bsz)
                        .collect();
                    self.accumulate(logits, contrib);
                }
                Op::ContrastiveRows { sim, pos } => {
                    let b = self.shape(sim)[0];
                    let included = pos.iter().flatten().count();
                    if included > 0 {
                        let s = self.data(sim).to_vec();
                        let scale = g[0] / included as f64;
                        let mut gs = vec![0.0; b * b];
                        for (ii, p) in pos.iter().enumerate() {
                            let Some(p) = p else { continue };
                            let row = &s[ii * b..(ii + 1) * b];
                            let m = row
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != ii)
                                .map(|(_, &v)| v)
                                .fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row
                                .iter()
                                .enumerate()
                                .filter(|(j, _)| *j != ii)
                                .map(|(_, &v)| (v - m).exp())
                                .sum();
                            for j in 0..b {
                                if j == ii {
                                    continue;
                                }
                                let soft = (row[j] - m).exp() / denom;
                                gs[ii * b + j] += scale * soft;
                            }
                            gs[ii * b + p] -= scale;
                        }
                        self.accumulate(sim, gs);
                    }
                }
            }
        }
        Ok(())
    }

    /// Elementwise grad helper for Mul: g * other, with scalar broadcast
    /// of the other operand.
    fn ew_grad(&self, g: &[f64], other: TensorId) -> Vec<f64> {
        let d = self.data(other);
        if d.len() == 1 && g.len() != 1 {
            g.iter().map(|&gv| gv * d[0]).collect()
        } else if d.len() == g.len() {
            g.iter().zip(d).map(|(&gv, &ov)| gv * ov).collect()
        } else {
            // Output took the scalar operand's length: other is the big one,
            // which cannot happen for Mul (output has the larger shape).
            unreachable!("mul output smaller than operand")
        }
    }
}

// ── Finite-difference oracle ────────────────────────────────────────────

/// Central-difference gradient of a scalar function of a flat buffer.
/// The workhorse oracle behind every gradient check in the crate.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error |a - n| / (|n| + 1e-8).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max)
}
