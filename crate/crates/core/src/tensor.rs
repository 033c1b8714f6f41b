//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Operations are recorded on a [`Tape`]; ids returned by the ops index
//! into it. The tape is created fresh per training step, `backward` runs
//! once, and gradients are then read back per leaf. Rank 0 (scalar),
//! rank 1, and rank 2 tensors are supported; matrix ops view rank-1
//! tensors as single rows. Broadcasting is restricted to
//! scalar-with-tensor for `add`/`mul`; the explicit row-broadcast ops
//! (`add_bcast_rows`, `mul_bcast_rows`, `add_tiled_rows`) cover the
//! structured cases so every backward rule stays auditable.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SeededRng;

/// GELU tanh-approximation curvature constant.
pub const GELU_C: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// Index of a tensor on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R> {
    pub shape: Vec<usize>,
    pub data: Vec<R>,
    pub grad: Option<Vec<R>>,
    pub requires_grad: bool,
}

impl<R: Real> Tensor<R> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(alloc::format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![R::ZERO; numel], grad: None, requires_grad: false }
    }

    pub fn scalar(x: R) -> Self {
        Tensor { shape: Vec::new(), data: vec![x], grad: None, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// View as `(rows, cols)`: scalars are 1x1, rank-1 is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::Shape(alloc::format!("expected rank <= 2, got shape {:?}", self.shape))),
        }
    }

    /// Root mean square over all elements; 0 for empty tensors.
    pub fn rms(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.data.iter().map(|x| {
            let v = x.to_f64();
            v * v
        }).sum();
        crate::real::sqrt64(ss / self.data.len() as f64)
    }
}

/// I.i.d. Gaussian tensor with standard deviation `std`.
///
/// `std == 0` returns exact zeros without consuming the stream.
pub fn init_normal<R: Real>(shape: &[usize], std: f64, rng: &mut SeededRng) -> Result<Tensor<R>> {
    if std < 0.0 {
        return Err(Error::Config(alloc::format!("negative init std {std}")));
    }
    let numel: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![R::ZERO; numel]
    } else {
        (0..numel).map(|_| R::from_f64(rng.normal() * std)).collect()
    };
    Ok(Tensor { shape: shape.to_vec(), data, grad: None, requires_grad: false })
}

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: R },
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    ConcatCols { a: TensorId, b: TensorId },
    SliceCols { a: TensorId, start: usize },
    ConcatTokens { a: TensorId, b: TensorId, ta: usize, tb: usize },
    SliceTokens { a: TensorId, ta: usize, tb: usize, first: bool },
    GatherRows { a: TensorId, indices: Vec<usize> },
    AddBcastRows { a: TensorId, v: TensorId },
    MulBcastRows { a: TensorId, v: TensorId },
    AddTiledRows { a: TensorId, v: TensorId },
    Softmax { a: TensorId },
    LayerNorm { a: TensorId },
    RmsNormGroups { a: TensorId, group: usize },
    Silu { a: TensorId },
    Gelu { a: TensorId },
    MeanAll { a: TensorId },
    Mse { a: TensorId, b: TensorId },
    Attention { q: TensorId, k: TensorId, v: TensorId, tokens_q: usize, tokens_kv: usize, head_dim: usize },
}

struct Node<R> {
    tensor: Tensor<R>,
    op: Op<R>,
    /// Per-op cached forward quantities reused by backward.
    aux: Vec<R>,
    needs_grad: bool,
}

/// Records a forward pass and plays it backwards once.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    consumed: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor; its `requires_grad` flag is honored.
    pub fn leaf(&mut self, tensor: Tensor<R>) -> TensorId {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, Vec::new(), needs)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<R> {
        &self.nodes[id.0].tensor
    }

    pub fn value(&self, id: TensorId) -> &[R] {
        &self.nodes[id.0].tensor.data
    }

    /// Scalar value of a rank-0/1-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<R> {
        let t = self.tensor(id);
        if !t.is_scalar() {
            return Err(Error::Shape(alloc::format!("expected scalar, got shape {:?}", t.shape)));
        }
        Ok(t.data[0])
    }

    /// Gradient buffer of `id` after `backward`, if it was tracked.
    pub fn grad(&self, id: TensorId) -> Option<&[R]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor<R>, op: Op<R>, aux: Vec<R>, needs_grad: bool) -> TensorId {
        let mut t = tensor;
        t.requires_grad = needs_grad;
        self.nodes.push(Node { tensor: t, op, aux, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape_of(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    // --- elementwise ---------------------------------------------------

    fn zip_broadcast(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &str,
    ) -> Result<(Vec<R>, Vec<usize>, BroadcastKind)> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape == tb.shape {
            return Ok((Vec::with_capacity(ta.numel()), ta.shape.clone(), BroadcastKind::Equal));
        }
        if tb.is_scalar() {
            return Ok((Vec::with_capacity(ta.numel()), ta.shape.clone(), BroadcastKind::ScalarRhs));
        }
        if ta.is_scalar() {
            return Ok((Vec::with_capacity(tb.numel()), tb.shape.clone(), BroadcastKind::ScalarLhs));
        }
        Err(Error::Shape(alloc::format!(
            "{name}: incompatible shapes {:?} vs {:?} (only equal-shape or scalar broadcasting)",
            ta.shape,
            tb.shape
        )))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (mut out, shape, kind) = self.zip_broadcast(a, b, "add")?;
        {
            let da = &self.nodes[a.0].tensor.data;
            let db = &self.nodes[b.0].tensor.data;
            match kind {
                BroadcastKind::Equal => out.extend(da.iter().zip(db).map(|(&x, &y)| x + y)),
                BroadcastKind::ScalarRhs => {
                    let s = db[0];
                    out.extend(da.iter().map(|&x| x + s));
                }
                BroadcastKind::ScalarLhs => {
                    let s = da[0];
                    out.extend(db.iter().map(|&y| s + y));
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Add { a, b }, Vec::new(), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (mut out, shape, kind) = self.zip_broadcast(a, b, "mul")?;
        {
            let da = &self.nodes[a.0].tensor.data;
            let db = &self.nodes[b.0].tensor.data;
            match kind {
                BroadcastKind::Equal => out.extend(da.iter().zip(db).map(|(&x, &y)| x * y)),
                BroadcastKind::ScalarRhs => {
                    let s = db[0];
                    out.extend(da.iter().map(|&x| x * s));
                }
                BroadcastKind::ScalarLhs => {
                    let s = da[0];
                    out.extend(db.iter().map(|&y| s * y));
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Mul { a, b }, Vec::new(), needs))
    }

    /// Multiply by a compile-time constant (weight multipliers, 1/sqrt(d)).
    pub fn scale(&mut self, a: TensorId, c: R) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].tensor.data.iter().map(|&x| x * c).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Scale { a, c }, Vec::new(), needs))
    }

    pub fn silu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].tensor.data.iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Silu { a }, Vec::new(), needs))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<R> = self.nodes[a.0].tensor.data.iter().map(|&x| gelu_tanh(x)).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Gelu { a }, Vec::new(), needs))
    }

    // --- matrix ops -----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.nodes[a.0].tensor.dims2()?;
        let (kb, n) = self.nodes[b.0].tensor.dims2()?;
        if ka != kb {
            return Err(Error::Shape(alloc::format!(
                "matmul: inner dimensions disagree ({:?} x {:?})",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        let mut out = vec![R::ZERO; m * n];
        R::gemm(m, ka, n, R::ONE, &self.nodes[a.0].tensor.data, &self.nodes[b.0].tensor.data, R::ZERO, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::Matmul { a, b }, Vec::new(), needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        let da = &self.nodes[a.0].tensor.data;
        let mut out = vec![R::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![c, r], out)?, Op::Transpose { a }, Vec::new(), needs))
    }

    pub fn concat_lastdim(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.nodes[a.0].tensor.dims2()?;
        let (rb, cb) = self.nodes[b.0].tensor.dims2()?;
        if ra != rb {
            return Err(Error::Shape(alloc::format!(
                "concat_lastdim: row counts disagree ({ra} vs {rb})"
            )));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        {
            let da = &self.nodes[a.0].tensor.data;
            let db = &self.nodes[b.0].tensor.data;
            for i in 0..ra {
                out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![ra, ca + cb], out)?, Op::ConcatCols { a, b }, Vec::new(), needs))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        if start + len > c {
            return Err(Error::Shape(alloc::format!(
                "slice_cols: range {start}..{} out of {c} columns",
                start + len
            )));
        }
        let da = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&da[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![r, len], out)?, Op::SliceCols { a, start }, Vec::new(), needs))
    }

    /// Per-sample concatenation of two token streams.
    ///
    /// `a` is `[samples*ta, n]`, `b` is `[samples*tb, n]`; the result is
    /// `[samples*(ta+tb), n]` with each sample's `a`-rows followed by its
    /// `b`-rows.
    pub fn concat_tokens(&mut self, a: TensorId, b: TensorId, ta: usize, tb: usize) -> Result<TensorId> {
        let (ra, ca) = self.nodes[a.0].tensor.dims2()?;
        let (rb, cb) = self.nodes[b.0].tensor.dims2()?;
        if ca != cb || ta == 0 || tb == 0 || ra % ta != 0 || rb % tb != 0 || ra / ta != rb / tb {
            return Err(Error::Shape(alloc::format!(
                "concat_tokens: [{ra},{ca}] x {ta} tokens vs [{rb},{cb}] x {tb} tokens"
            )));
        }
        let samples = ra / ta;
        let mut out = Vec::with_capacity((ra + rb) * ca);
        {
            let da = &self.nodes[a.0].tensor.data;
            let db = &self.nodes[b.0].tensor.data;
            for s in 0..samples {
                out.extend_from_slice(&da[s * ta * ca..(s + 1) * ta * ca]);
                out.extend_from_slice(&db[s * tb * ca..(s + 1) * tb * ca]);
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(vec![samples * (ta + tb), ca], out)?,
            Op::ConcatTokens { a, b, ta, tb },
            Vec::new(),
            needs,
        ))
    }

    /// Inverse of [`Tape::concat_tokens`]: select the first (`first ==
    /// true`) or second stream back out of the joint sequence.
    pub fn slice_tokens(&mut self, a: TensorId, ta: usize, tb: usize, first: bool) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        let t = ta + tb;
        if t == 0 || r % t != 0 {
            return Err(Error::Shape(alloc::format!(
                "slice_tokens: {r} rows not divisible by {ta}+{tb} tokens"
            )));
        }
        let samples = r / t;
        let keep = if first { ta } else { tb };
        let off = if first { 0 } else { ta };
        let da = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(samples * keep * c);
        for s in 0..samples {
            let base = (s * t + off) * c;
            out.extend_from_slice(&da[base..base + keep * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(vec![samples * keep, c], out)?,
            Op::SliceTokens { a, ta, tb, first },
            Vec::new(),
            needs,
        ))
    }

    /// Row lookup: `out[i] = a[indices[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        for &ix in indices {
            if ix >= r {
                return Err(Error::Config(alloc::format!("gather_rows: index {ix} out of {r} rows")));
            }
        }
        let da = &self.nodes[a.0].tensor.data;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            out.extend_from_slice(&da[ix * c..(ix + 1) * c]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_vec(vec![indices.len(), c], out)?,
            Op::GatherRows { a, indices: indices.to_vec() },
            Vec::new(),
            needs,
        ))
    }

    fn bcast_check(&self, a: TensorId, v: TensorId, name: &str) -> Result<(usize, usize, usize)> {
        let (ra, ca) = self.nodes[a.0].tensor.dims2()?;
        let (rv, cv) = self.nodes[v.0].tensor.dims2()?;
        if ca != cv || rv == 0 || ra % rv != 0 {
            return Err(Error::Shape(alloc::format!(
                "{name}: [{ra},{ca}] vs [{rv},{cv}] (rows must divide, columns must match)"
            )));
        }
        Ok((ra, ca, rv))
    }

    /// `out[i] = a[i] + v[i / (a.rows / v.rows)]` — per-sample vectors
    /// broadcast over each sample's block of rows.
    pub fn add_bcast_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ra, ca, rv) = self.bcast_check(a, v, "add_bcast_rows")?;
        let factor = ra / rv;
        let da = &self.nodes[a.0].tensor.data;
        let dv = &self.nodes[v.0].tensor.data;
        let mut out = Vec::with_capacity(ra * ca);
        for i in 0..ra {
            let vr = &dv[(i / factor) * ca..(i / factor + 1) * ca];
            let xr = &da[i * ca..(i + 1) * ca];
            out.extend(xr.iter().zip(vr).map(|(&x, &y)| x + y));
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::from_vec(vec![ra, ca], out)?, Op::AddBcastRows { a, v }, Vec::new(), needs))
    }

    /// `out[i] = a[i] * v[i / (a.rows / v.rows)]` elementwise per row.
    pub fn mul_bcast_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ra, ca, rv) = self.bcast_check(a, v, "mul_bcast_rows")?;
        let factor = ra / rv;
        let da = &self.nodes[a.0].tensor.data;
        let dv = &self.nodes[v.0].tensor.data;
        let mut out = Vec::with_capacity(ra * ca);
        for i in 0..ra {
            let vr = &dv[(i / factor) * ca..(i / factor + 1) * ca];
            let xr = &da[i * ca..(i + 1) * ca];
            out.extend(xr.iter().zip(vr).map(|(&x, &y)| x * y));
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::from_vec(vec![ra, ca], out)?, Op::MulBcastRows { a, v }, Vec::new(), needs))
    }

    /// `out[i] = a[i] + v[i % v.rows]` — per-position vectors repeated
    /// across samples (positional tables).
    pub fn add_tiled_rows(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ra, ca, rv) = self.bcast_check(a, v, "add_tiled_rows")?;
        let da = &self.nodes[a.0].tensor.data;
        let dv = &self.nodes[v.0].tensor.data;
        let mut out = Vec::with_capacity(ra * ca);
        for i in 0..ra {
            let vr = &dv[(i % rv) * ca..(i % rv + 1) * ca];
            let xr = &da[i * ca..(i + 1) * ca];
            out.extend(xr.iter().zip(vr).map(|(&x, &y)| x + y));
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(Tensor::from_vec(vec![ra, ca], out)?, Op::AddTiledRows { a, v }, Vec::new(), needs))
    }

    // --- normalizations and attention ------------------------------------

    /// Row-wise softmax over the last dimension, max-shifted.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        if c == 0 {
            return Err(Error::Shape(String::from("softmax_lastdim: empty rows")));
        }
        let da = &self.nodes[a.0].tensor.data;
        let mut out = vec![R::ZERO; r * c];
        for i in 0..r {
            let row = &da[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maxr(x);
            }
            let orow = &mut out[i * c..(i + 1) * c];
            let mut sum = R::ZERO;
            for (o, &x) in orow.iter_mut().zip(row) {
                let e = (x - mx).exp();
                *o = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![r, c], out)?, Op::Softmax { a }, Vec::new(), needs))
    }

    /// Layer normalization without learnable parameters:
    /// `(x - mean) / sqrt(var + eps)` per row, population variance.
    pub fn layer_norm_nolearn(&mut self, a: TensorId, eps: R) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        if eps < R::ZERO {
            return Err(Error::Config(String::from("layer_norm_nolearn: negative eps")));
        }
        if eps == R::ZERO && c < 2 {
            return Err(Error::Numeric(String::from(
                "layer_norm_nolearn: rows of length < 2 with eps = 0",
            )));
        }
        let da = &self.nodes[a.0].tensor.data;
        let inv_c = R::ONE / R::from_usize(c);
        let mut out = vec![R::ZERO; r * c];
        let mut aux = vec![R::ZERO; 2 * r];
        for i in 0..r {
            let row = &da[i * c..(i + 1) * c];
            let mut mean = R::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_c;
            let mut var = R::ZERO;
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var *= inv_c;
            let denom = (var + eps).sqrt();
            if denom == R::ZERO {
                return Err(Error::Numeric(alloc::format!(
                    "layer_norm_nolearn: zero-variance row {i} with eps = 0"
                )));
            }
            let inv_std = R::ONE / denom;
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (x - mean) * inv_std;
            }
            aux[2 * i] = mean;
            aux[2 * i + 1] = inv_std;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![r, c], out)?, Op::LayerNorm { a }, aux, needs))
    }

    /// RMS-normalize contiguous groups of `group` columns within each
    /// row: `x / sqrt(mean(x^2) + eps)` per group (per-head QK-norm).
    pub fn rms_norm_groups(&mut self, a: TensorId, group: usize, eps: R) -> Result<TensorId> {
        let (r, c) = self.nodes[a.0].tensor.dims2()?;
        if group == 0 || c % group != 0 {
            return Err(Error::Shape(alloc::format!(
                "rms_norm_groups: {c} columns not divisible into groups of {group}"
            )));
        }
        let groups = c / group;
        let da = &self.nodes[a.0].tensor.data;
        let inv_g = R::ONE / R::from_usize(group);
        let mut out = vec![R::ZERO; r * c];
        let mut aux = vec![R::ZERO; r * groups];
        for i in 0..r {
            for g in 0..groups {
                let base = i * c + g * group;
                let seg = &da[base..base + group];
                let mut ss = R::ZERO;
                for &x in seg {
                    ss += x * x;
                }
                let denom = (ss * inv_g + eps).sqrt();
                if denom == R::ZERO {
                    return Err(Error::Numeric(alloc::format!(
                        "rms_norm_groups: zero group at row {i} with eps = 0"
                    )));
                }
                let inv_rms = R::ONE / denom;
                for (o, &x) in out[base..base + group].iter_mut().zip(seg) {
                    *o = x * inv_rms;
                }
                aux[i * groups + g] = inv_rms;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_vec(vec![r, c], out)?, Op::RmsNormGroups { a, group }, aux, needs))
    }

    /// Multi-head scaled-dot-product attention within each sample.
    ///
    /// `q` is `[samples*tokens_q, n]` and `k`, `v` are
    /// `[samples*tokens_kv, n]` with `n = heads * head_dim`; attention
    /// is restricted to each sample's rows and computed per head with
    /// logits `q . k / sqrt(head_dim)` and a softmax over the key
    /// tokens. Self-attention is `tokens_q == tokens_kv` with shared
    /// inputs; cross-attention passes a separate key/value stream.
    /// Softmax probabilities are cached for backward.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        tokens_q: usize,
        tokens_kv: usize,
        head_dim: usize,
    ) -> Result<TensorId> {
        let (rq, n) = self.nodes[q.0].tensor.dims2()?;
        let (rk, nk) = self.nodes[k.0].tensor.dims2()?;
        let (rv, nv) = self.nodes[v.0].tensor.dims2()?;
        if (rk, nk) != (rv, nv) || nk != n {
            return Err(Error::Shape(alloc::format!(
                "attention: q [{rq},{n}] vs k [{rk},{nk}] vs v [{rv},{nv}]"
            )));
        }
        if tokens_q == 0
            || tokens_kv == 0
            || rq % tokens_q != 0
            || rk % tokens_kv != 0
            || rq / tokens_q != rk / tokens_kv
            || head_dim == 0
            || n % head_dim != 0
        {
            return Err(Error::Shape(alloc::format!(
                "attention: [{rq},{n}]/[{rk},{n}] incompatible with tokens {tokens_q}/{tokens_kv}, head_dim {head_dim}"
            )));
        }
        let samples = rq / tokens_q;
        let heads = n / head_dim;
        let scale = R::ONE / R::from_f64(crate::real::sqrt64(head_dim as f64));
        let dq = &self.nodes[q.0].tensor.data;
        let dk = &self.nodes[k.0].tensor.data;
        let dv = &self.nodes[v.0].tensor.data;
        let mut out = vec![R::ZERO; rq * n];
        let mut probs = vec![R::ZERO; samples * heads * tokens_q * tokens_kv];
        // token counts are small here, so plain loops beat gemm dispatch
        for s in 0..samples {
            for h in 0..heads {
                let col0 = h * head_dim;
                let qoff = s * tokens_q * n + col0;
                let koff = s * tokens_kv * n + col0;
                let pbase = (s * heads + h) * tokens_q * tokens_kv;
                for tq in 0..tokens_q {
                    let qrow = &dq[qoff + tq * n..qoff + tq * n + head_dim];
                    let prow = &mut probs[pbase + tq * tokens_kv..pbase + (tq + 1) * tokens_kv];
                    let mut mx = R::from_f64(f64::NEG_INFINITY);
                    for (tk, p) in prow.iter_mut().enumerate() {
                        let krow = &dk[koff + tk * n..koff + tk * n + head_dim];
                        let mut dot = R::ZERO;
                        for (&a, &b) in qrow.iter().zip(krow) {
                            dot += a * b;
                        }
                        let logit = dot * scale;
                        *p = logit;
                        mx = mx.maxr(logit);
                    }
                    let mut sum = R::ZERO;
                    for p in prow.iter_mut() {
                        let e = (*p - mx).exp();
                        *p = e;
                        sum += e;
                    }
                    let inv = R::ONE / sum;
                    for p in prow.iter_mut() {
                        *p *= inv;
                    }
                    // out_h[tq] = sum_tk P[tq,tk] V_h[tk]
                    let orow = &mut out[qoff + tq * n..qoff + tq * n + head_dim];
                    for (tk, &p) in prow.iter().enumerate() {
                        let vrow = &dv[koff + tk * n..koff + tk * n + head_dim];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_vec(vec![rq, n], out)?,
            Op::Attention { q, k, v, tokens_q, tokens_kv, head_dim },
            probs,
            needs,
        ))
    }

    // --- reductions -------------------------------------------------------

    /// Mean over all elements; returns a scalar.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let t = &self.nodes[a.0].tensor;
        if t.numel() == 0 {
            return Err(Error::Shape(String::from("mean_all: empty tensor")));
        }
        let inv = R::ONE / R::from_usize(t.numel());
        let mut sum = R::ZERO;
        for &x in &t.data {
            sum += x;
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::scalar(sum * inv), Op::MeanAll { a }, Vec::new(), needs))
    }

    /// Mean squared error over all elements; returns a scalar.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a.0].tensor, &self.nodes[b.0].tensor);
        if ta.shape != tb.shape {
            return Err(Error::Shape(alloc::format!(
                "mse: shapes disagree ({:?} vs {:?})",
                ta.shape,
                tb.shape
            )));
        }
        if ta.numel() == 0 {
            return Err(Error::Shape(String::from("mse: empty tensor")));
        }
        let inv = R::ONE / R::from_usize(ta.numel());
        let mut sum = R::ZERO;
        for (&x, &y) in ta.data.iter().zip(&tb.data) {
            let d = x - y;
            sum += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(sum * inv), Op::Mse { a, b }, Vec::new(), needs))
    }

    // --- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. One pass per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage(String::from("backward called twice on the same tape")));
        }
        self.consumed = true;
        let t = &self.nodes[loss.0].tensor;
        if !t.is_scalar() {
            return Err(Error::Shape(alloc::format!(
                "backward: loss must be scalar, got shape {:?}",
                t.shape
            )));
        }

        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::ONE]);

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            self.nodes[idx].tensor.grad = Some(g);
        }
        Ok(())
    }

    fn ensure<'g>(grads: &'g mut [Option<Vec<R>>], id: TensorId, numel: usize) -> &'g mut [R] {
        grads[id.0].get_or_insert_with(|| vec![R::ZERO; numel]).as_mut_slice()
    }

    /// Propagate the output gradient `g` of node `idx` into its inputs.
    fn accumulate(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let na = self.nodes[a.0].tensor.numel();
                    let ga = Self::ensure(grads, *a, na);
                    if na == g.len() {
                        for (d, &x) in ga.iter_mut().zip(g) {
                            *d += x;
                        }
                    } else {
                        // a is the scalar side
                        let mut s = R::ZERO;
                        for &x in g {
                            s += x;
                        }
                        ga[0] += s;
                    }
                }
                if self.needs(*b) {
                    let nb = self.nodes[b.0].tensor.numel();
                    let gb = Self::ensure(grads, *b, nb);
                    if nb == g.len() {
                        for (d, &x) in gb.iter_mut().zip(g) {
                            *d += x;
                        }
                    } else {
                        let mut s = R::ZERO;
                        for &x in g {
                            s += x;
                        }
                        gb[0] += s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let da = &self.nodes[a.0].tensor.data;
                let db = &self.nodes[b.0].tensor.data;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, da.len());
                    if da.len() == g.len() {
                        if db.len() == g.len() {
                            for ((d, &x), &y) in ga.iter_mut().zip(g).zip(db) {
                                *d += x * y;
                            }
                        } else {
                            let s = db[0];
                            for (d, &x) in ga.iter_mut().zip(g) {
                                *d += x * s;
                            }
                        }
                    } else {
                        let mut s = R::ZERO;
                        for (&x, &y) in g.iter().zip(db) {
                            s += x * y;
                        }
                        ga[0] += s;
                    }
                }
                if self.needs(*b) {
                    let gb = Self::ensure(grads, *b, db.len());
                    if db.len() == g.len() {
                        if da.len() == g.len() {
                            for ((d, &x), &y) in gb.iter_mut().zip(g).zip(da) {
                                *d += x * y;
                            }
                        } else {
                            let s = da[0];
                            for (d, &x) in gb.iter_mut().zip(g) {
                                *d += x * s;
                            }
                        }
                    } else {
                        let mut s = R::ZERO;
                        for (&x, &y) in g.iter().zip(da) {
                            s += x * y;
                        }
                        gb[0] += s;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, g.len());
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *c;
                    }
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                let n = self.nodes[b.0].tensor.dims2().expect("checked in forward").1;
                if self.needs(*a) {
                    let db = self.nodes[b.0].tensor.data.as_ptr();
                    let ga = Self::ensure(grads, *a, m * k);
                    // dA += g . B^T
                    unsafe {
                        R::gemm_strided(
                            m, n, k, R::ONE,
                            g.as_ptr(), n as isize, 1,
                            db, 1, n as isize,
                            R::ONE,
                            ga.as_mut_ptr(), k as isize, 1,
                        );
                    }
                }
                if self.needs(*b) {
                    let da = self.nodes[a.0].tensor.data.as_ptr();
                    let gb = Self::ensure(grads, *b, k * n);
                    // dB += A^T . g
                    unsafe {
                        R::gemm_strided(
                            k, m, n, R::ONE,
                            da, 1, k as isize,
                            g.as_ptr(), n as isize, 1,
                            R::ONE,
                            gb.as_mut_ptr(), n as isize, 1,
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..c {
                        for j in 0..r {
                            ga[j * c + i] += g[i * r + j];
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ca) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                let cb = self.nodes[b.0].tensor.dims2().expect("checked in forward").1;
                let c = ca + cb;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, r * ca);
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * c + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = Self::ensure(grads, *b, r * cb);
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                    let len = g.len() / r;
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..r {
                        for j in 0..len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatTokens { a, b, ta, tb } => {
                let ca = self.nodes[a.0].tensor.dims2().expect("checked in forward").1;
                let ra = self.nodes[a.0].tensor.dims2().expect("checked in forward").0;
                let rb = self.nodes[b.0].tensor.dims2().expect("checked in forward").0;
                let samples = ra / ta;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, ra * ca);
                    for s in 0..samples {
                        let src = (s * (ta + tb)) * ca;
                        let dst = s * ta * ca;
                        for j in 0..ta * ca {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = Self::ensure(grads, *b, rb * ca);
                    for s in 0..samples {
                        let src = (s * (ta + tb) + ta) * ca;
                        let dst = s * tb * ca;
                        for j in 0..tb * ca {
                            gb[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::SliceTokens { a, ta, tb, first } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                    let t = ta + tb;
                    let samples = r / t;
                    let keep = if *first { *ta } else { *tb };
                    let off = if *first { 0 } else { *ta };
                    let ga = Self::ensure(grads, *a, r * c);
                    for s in 0..samples {
                        let dst = (s * t + off) * c;
                        let src = s * keep * c;
                        for j in 0..keep * c {
                            ga[dst + j] += g[src + j];
                        }
                    }
                }
            }
            Op::GatherRows { a, indices } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                    let ga = Self::ensure(grads, *a, r * c);
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            ga[ix * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddBcastRows { a, v } => {
                let (ra, ca) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                let rv = self.nodes[v.0].tensor.dims2().expect("checked in forward").0;
                let factor = ra / rv;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, ra * ca);
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.needs(*v) {
                    let gv = Self::ensure(grads, *v, rv * ca);
                    for i in 0..ra {
                        let vb = (i / factor) * ca;
                        for j in 0..ca {
                            gv[vb + j] += g[i * ca + j];
                        }
                    }
                }
            }
            Op::MulBcastRows { a, v } => {
                let (ra, ca) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                let rv = self.nodes[v.0].tensor.dims2().expect("checked in forward").0;
                let factor = ra / rv;
                let da = &self.nodes[a.0].tensor.data;
                let dv = &self.nodes[v.0].tensor.data;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, ra * ca);
                    for i in 0..ra {
                        let vb = (i / factor) * ca;
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * ca + j] * dv[vb + j];
                        }
                    }
                }
                if self.needs(*v) {
                    let gv = Self::ensure(grads, *v, rv * ca);
                    for i in 0..ra {
                        let vb = (i / factor) * ca;
                        for j in 0..ca {
                            gv[vb + j] += g[i * ca + j] * da[i * ca + j];
                        }
                    }
                }
            }
            Op::AddTiledRows { a, v } => {
                let (ra, ca) = self.nodes[a.0].tensor.dims2().expect("checked in forward");
                let rv = self.nodes[v.0].tensor.dims2().expect("checked in forward").0;
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, ra * ca);
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if self.needs(*v) {
                    let gv = Self::ensure(grads, *v, rv * ca);
                    for i in 0..ra {
                        let vb = (i % rv) * ca;
                        for j in 0..ca {
                            gv[vb + j] += g[i * ca + j];
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[idx].tensor.dims2().expect("own shape");
                    let y = &self.nodes[idx].tensor.data;
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut dot = R::ZERO;
                        for (&yy, &gg) in yr.iter().zip(gr) {
                            dot += yy * gg;
                        }
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[idx].tensor.dims2().expect("own shape");
                    let y = &self.nodes[idx].tensor.data;
                    let aux = &self.nodes[idx].aux;
                    let inv_c = R::ONE / R::from_usize(c);
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..r {
                        let inv_std = aux[2 * i + 1];
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut gsum = R::ZERO;
                        let mut gysum = R::ZERO;
                        for (&yy, &gg) in yr.iter().zip(gr) {
                            gsum += gg;
                            gysum += gg * yy;
                        }
                        let gmean = gsum * inv_c;
                        let gymean = gysum * inv_c;
                        for j in 0..c {
                            ga[i * c + j] += inv_std * (gr[j] - gmean - yr[j] * gymean);
                        }
                    }
                }
            }
            Op::RmsNormGroups { a, group } => {
                if self.needs(*a) {
                    let (r, c) = self.nodes[idx].tensor.dims2().expect("own shape");
                    let groups = c / group;
                    let y = &self.nodes[idx].tensor.data;
                    let aux = &self.nodes[idx].aux;
                    let inv_g = R::ONE / R::from_usize(*group);
                    let ga = Self::ensure(grads, *a, r * c);
                    for i in 0..r {
                        for gi in 0..groups {
                            let base = i * c + gi * group;
                            let inv_rms = aux[i * groups + gi];
                            let yr = &y[base..base + group];
                            let gr = &g[base..base + group];
                            let mut gy = R::ZERO;
                            for (&yy, &gg) in yr.iter().zip(gr) {
                                gy += yy * gg;
                            }
                            // dx = inv_rms * (g - y * mean(g .* y) * inv_rms^2 * ... )
                            // with y = x*inv_rms: dx_j = inv_rms*(g_j - y_j * mean(g.*y))
                            let gym = gy * inv_g;
                            for j in 0..*group {
                                ga[base + j] += inv_rms * (gr[j] - yr[j] * gym);
                            }
                        }
                    }
                }
            }
            Op::Silu { a } => {
                if self.needs(*a) {
                    let da = &self.nodes[a.0].tensor.data;
                    let ga = Self::ensure(grads, *a, da.len());
                    for ((d, &x), &gg) in ga.iter_mut().zip(da).zip(g) {
                        let s = sigmoid(x);
                        *d += gg * s * (R::ONE + x * (R::ONE - s));
                    }
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let da = &self.nodes[a.0].tensor.data;
                    let ga = Self::ensure(grads, *a, da.len());
                    let c0 = R::from_f64(SQRT_2_OVER_PI);
                    let c1 = R::from_f64(GELU_C);
                    let three = R::from_f64(3.0);
                    let half = R::from_f64(0.5);
                    for ((d, &x), &gg) in ga.iter_mut().zip(da).zip(g) {
                        let u = c0 * (x + c1 * x * x * x);
                        let t = u.tanh();
                        let du = c0 * (R::ONE + three * c1 * x * x);
                        *d += gg * (half * (R::ONE + t) + half * x * (R::ONE - t * t) * du);
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let numel = self.nodes[a.0].tensor.numel();
                    let scale = g[0] / R::from_usize(numel);
                    let ga = Self::ensure(grads, *a, numel);
                    for d in ga.iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::Mse { a, b } => {
                let da = &self.nodes[a.0].tensor.data;
                let db = &self.nodes[b.0].tensor.data;
                let numel = da.len();
                let scale = g[0] * R::from_f64(2.0) / R::from_usize(numel);
                if self.needs(*a) {
                    let ga = Self::ensure(grads, *a, numel);
                    for ((d, &x), &y) in ga.iter_mut().zip(da).zip(db) {
                        *d += scale * (x - y);
                    }
                }
                if self.needs(*b) {
                    let gb = Self::ensure(grads, *b, numel);
                    for ((d, &x), &y) in gb.iter_mut().zip(da).zip(db) {
                        *d += scale * (y - x);
                    }
                }
            }
            Op::Attention { q, k, v, tokens_q, tokens_kv, head_dim } => {
                let (rq, n) = self.nodes[q.0].tensor.dims2().expect("checked in forward");
                let rk = self.nodes[k.0].tensor.dims2().expect("checked in forward").0;
                let samples = rq / tokens_q;
                let heads = n / head_dim;
                let scale = R::ONE / R::from_f64(crate::real::sqrt64(*head_dim as f64));
                let probs = &self.nodes[idx].aux;
                let dq_in = &self.nodes[q.0].tensor.data;
                let dk_in = &self.nodes[k.0].tensor.data;
                let dv_in = &self.nodes[v.0].tensor.data;
                let needs_q = self.needs(*q);
                let needs_k = self.needs(*k);
                let needs_v = self.needs(*v);
                // Ensure all grad buffers exist up front so raw pointers
                // into them stay valid through the loop.
                if needs_v {
                    Self::ensure(grads, *v, rk * n);
                }
                if needs_q {
                    Self::ensure(grads, *q, rq * n);
                }
                if needs_k {
                    Self::ensure(grads, *k, rk * n);
                }
                let (tq, tk) = (*tokens_q, *tokens_kv);
                let d = *head_dim;
                let mut dp = vec![R::ZERO; tq * tk];
                let mut dl = vec![R::ZERO; tq * tk];
                for s in 0..samples {
                    for h in 0..heads {
                        let col0 = h * head_dim;
                        let qoff = s * tq * n + col0;
                        let koff = s * tk * n + col0;
                        let pbase = (s * heads + h) * tq * tk;
                        let p = &probs[pbase..pbase + tq * tk];
                        if needs_v {
                            // dV_h += P^T dO_h
                            let gv = grads[v.0].as_mut().expect("ensured").as_mut_slice();
                            for ti in 0..tq {
                                let grow = &g[qoff + ti * n..qoff + ti * n + d];
                                for tj in 0..tk {
                                    let pij = p[ti * tk + tj];
                                    let vrow = &mut gv[koff + tj * n..koff + tj * n + d];
                                    for (dst, &gg) in vrow.iter_mut().zip(grow) {
                                        *dst += pij * gg;
                                    }
                                }
                            }
                        }
                        if needs_q || needs_k {
                            // dP = dO_h V_h^T, then dL = P .* (dP - rowsum(dP .* P))
                            for ti in 0..tq {
                                let grow = &g[qoff + ti * n..qoff + ti * n + d];
                                for tj in 0..tk {
                                    let vrow = &dv_in[koff + tj * n..koff + tj * n + d];
                                    let mut dot = R::ZERO;
                                    for (&gg, &vv) in grow.iter().zip(vrow) {
                                        dot += gg * vv;
                                    }
                                    dp[ti * tk + tj] = dot;
                                }
                            }
                            for ti in 0..tq {
                                let prow = &p[ti * tk..(ti + 1) * tk];
                                let dprow = &dp[ti * tk..(ti + 1) * tk];
                                let mut dot = R::ZERO;
                                for (&pp, &dd) in prow.iter().zip(dprow) {
                                    dot += pp * dd;
                                }
                                for tj in 0..tk {
                                    dl[ti * tk + tj] = prow[tj] * (dprow[tj] - dot);
                                }
                            }
                            if needs_q {
                                // dQ_h += scale * dL K_h
                                let gq = grads[q.0].as_mut().expect("ensured").as_mut_slice();
                                for ti in 0..tq {
                                    let qrow = &mut gq[qoff + ti * n..qoff + ti * n + d];
                                    for tj in 0..tk {
                                        let l = dl[ti * tk + tj] * scale;
                                        let krow = &dk_in[koff + tj * n..koff + tj * n + d];
                                        for (dst, &kk) in qrow.iter_mut().zip(krow) {
                                            *dst += l * kk;
                                        }
                                    }
                                }
                            }
                            if needs_k {
                                // dK_h += scale * dL^T Q_h
                                let gk = grads[k.0].as_mut().expect("ensured").as_mut_slice();
                                for tj in 0..tk {
                                    let krow = &mut gk[koff + tj * n..koff + tj * n + d];
                                    for ti in 0..tq {
                                        let l = dl[ti * tk + tj] * scale;
                                        let qrow = &dq_in[qoff + ti * n..qoff + ti * n + d];
                                        for (dst, &qq) in krow.iter_mut().zip(qrow) {
                                            *dst += l * qq;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

enum BroadcastKind {
    Equal,
    ScalarRhs,
    ScalarLhs,
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::ONE / (R::ONE + (-x).exp())
}

/// GELU with the tanh approximation.
#[inline]
pub fn gelu_tanh<R: Real>(x: R) -> R {
    let c0 = R::from_f64(SQRT_2_OVER_PI);
    let c1 = R::from_f64(GELU_C);
    let half = R::from_f64(0.5);
    half * x * (R::ONE + (c0 * (x + c1 * x * x * x)).tanh())
}

/// SiLU (x * sigmoid(x)) as a plain function, shared with non-tape code.
#[inline]
pub fn silu_scalar<R: Real>(x: R) -> R {
    x * sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn init_normal_zero_std_is_zeros() {
        let mut rng = SeededRng::new(1, "w");
        let t: Tensor<f64> = init_normal(&[3], 0.0, &mut rng).unwrap();
        assert_eq!(t.data, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_normal_negative_std_rejected() {
        let mut rng = SeededRng::new(1, "w");
        assert!(matches!(init_normal::<f64>(&[3], -1.0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn init_normal_sample_std() {
        let mut rng = SeededRng::new(42, "w");
        let t: Tensor<f64> = init_normal(&[10_000], 1.0, &mut rng).unwrap();
        let mean: f64 = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let var: f64 = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.data.len() as f64;
        let sd = var.sqrt();
        assert!((sd - 1.0).abs() < 0.05, "sample std {sd}");
    }

    #[test]
    fn init_normal_deterministic_per_name() {
        let a: Tensor<f64> = init_normal(&[8], 1.0, &mut SeededRng::new(5, "w1")).unwrap();
        let b: Tensor<f64> = init_normal(&[8], 1.0, &mut SeededRng::new(5, "w1")).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn matmul_hand_case() {
        let mut t = tape();
        let a = t.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = tape();
        let eye = t.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = t.leaf(Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = tape();
        let a = t.leaf(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::from_vec(vec![2, 2], vec![0.0; 4]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_two_point() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = t.layer_norm_nolearn(x, 0.0).unwrap();
        let v = t.value(y);
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_with_eps() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![1, 4], vec![2.5; 4]).unwrap());
        let y = t.layer_norm_nolearn(x, 1.0).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_zero_variance_eps_zero_errors() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![1, 4], vec![2.5; 4]).unwrap());
        assert!(matches!(t.layer_norm_nolearn(x, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_row_stats() {
        let mut rng = SeededRng::new(9, "x");
        let mut t = tape();
        let x = t.leaf(init_normal(&[4, 64], 1.3, &mut rng).unwrap());
        let y = t.layer_norm_nolearn(x, 0.0).unwrap();
        let v = t.value(y);
        for i in 0..4 {
            let row = &v[i * 64..(i + 1) * 64];
            let mean: f64 = row.iter().sum::<f64>() / 64.0;
            let var: f64 = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-7, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row var {var}");
        }
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);

        let a = t.leaf(Tensor::from_vec(vec![1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let sa = t.softmax_lastdim(a).unwrap();
        let c = t.leaf(Tensor::from_vec(vec![1, 3], vec![0.3 + 7.0, -1.2 + 7.0, 2.0 + 7.0]).unwrap());
        let sc = t.softmax_lastdim(c).unwrap();
        let (va, vc) = (t.value(sa).to_vec(), t.value(sc).to_vec());
        for (x, y) in va.iter().zip(&vc) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_mse_trivial() {
        let mut t = tape();
        let z = t.leaf(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let s = t.silu(z).unwrap();
        assert_eq!(t.value(s), &[0.0]);
        let x = t.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let m = t.mse(x, x).unwrap();
        assert_eq!(t.scalar_value(m).unwrap(), 0.0);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![1], vec![2.0]).unwrap().with_grad());
        let y = t.mean_all(x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_through_mul_chain() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap().with_grad());
        let y = t.mul(x, x).unwrap();
        let l = t.mean_all(y).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        // d/dx mean(x^2) = 2x/n
        assert!((g[0] - 3.0).abs() < 1e-12);
        assert!((g[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_single_token_is_value() {
        // softmax over one key gives weight 1: output == V.
        let mut t = tape();
        let q = t.leaf(Tensor::from_vec(vec![1, 4], vec![0.3, -2.0, 1.0, 0.5]).unwrap());
        let k = t.leaf(Tensor::from_vec(vec![1, 4], vec![1.0, 1.0, -1.0, 2.0]).unwrap());
        let v = t.leaf(Tensor::from_vec(vec![1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let o = t.attention(q, k, v, 1, 1, 2).unwrap();
        assert_eq!(t.value(o), t.value(v));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = SeededRng::new(3, "attn");
        let mut t = tape();
        let q = t.leaf(init_normal(&[6, 8], 1.0, &mut rng).unwrap());
        let k = t.leaf(init_normal(&[6, 8], 1.0, &mut rng).unwrap());
        let ones = t.leaf(Tensor::from_vec(vec![6, 8], vec![1.0; 48]).unwrap());
        // With V = all-ones, out = P . 1 = row sums of P.
        let o = t.attention(q, k, ones, 3, 3, 4).unwrap();
        for &x in t.value(o) {
            assert!((x - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_groups_unit_rms() {
        let mut rng = SeededRng::new(11, "qk");
        let mut t = tape();
        let x = t.leaf(init_normal(&[5, 16], 2.0, &mut rng).unwrap());
        let y = t.rms_norm_groups(x, 8, 0.0).unwrap();
        let v = t.value(y);
        for i in 0..5 {
            for g in 0..2 {
                let seg = &v[i * 16 + g * 8..i * 16 + (g + 1) * 8];
                let rms = (seg.iter().map(|x| x * x).sum::<f64>() / 8.0).sqrt();
                assert!((rms - 1.0).abs() < 1e-6, "rms {rms}");
            }
        }
    }

    #[test]
    fn concat_and_slice_tokens_roundtrip() {
        let mut t = tape();
        let a = t.leaf(Tensor::from_vec(vec![4, 2], (0..8).map(|x| x as f64).collect()).unwrap());
        let b = t.leaf(Tensor::from_vec(vec![2, 2], (100..104).map(|x| x as f64).collect()).unwrap());
        let j = t.concat_tokens(a, b, 2, 1).unwrap();
        assert_eq!(
            t.value(j),
            &[0.0, 1.0, 2.0, 3.0, 100.0, 101.0, 4.0, 5.0, 6.0, 7.0, 102.0, 103.0]
        );
        let back_a = t.slice_tokens(j, 2, 1, true).unwrap();
        let back_b = t.slice_tokens(j, 2, 1, false).unwrap();
        assert_eq!(t.value(back_a), t.value(a));
        assert_eq!(t.value(back_b), t.value(b));
    }

    #[test]
    fn bcast_and_tile_rows() {
        let mut t = tape();
        let x = t.leaf(Tensor::from_vec(vec![4, 2], vec![0.0; 8]).unwrap());
        let v = t.leaf(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.add_bcast_rows(x, v).unwrap();
        assert_eq!(t.value(b), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let tl = t.add_tiled_rows(x, v).unwrap();
        assert_eq!(t.value(tl), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gather_rows_matches_one_hot_product() {
        let mut t = tape();
        let table = t.leaf(Tensor::from_vec(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = t.gather_rows(table, &[2, 0]).unwrap();
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0]);
        // one-hot x table
        let oh = t.leaf(Tensor::from_vec(vec![2, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap());
        let p = t.matmul(oh, table).unwrap();
        assert_eq!(t.value(p), t.value(g));
    }
}
