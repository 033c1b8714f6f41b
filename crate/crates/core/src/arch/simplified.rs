//! Simplified single-token DiT forward pass.
//!
//! This is the direct-evaluation counterpart of the instruction program
//! in [`crate::tp`]: all constant dimensions are 1 (one patch, scalar
//! latent/label, one-dimensional frequency feature), a single head of
//! dimension 1, no biases, and multiplicative attention `k .* q .* v`
//! in place of softmax. Vectors are `[n, 1]` columns so matrix
//! multiplication is plain `W . v`, sharing buffer layout with the
//! interpreter's bindings. The two paths must agree numerically at
//! every width.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::real::sin64;
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, TensorId};

/// Weight set of the simplified model. Matrices are row-major `n x n`,
/// vectors length `n`.
#[derive(Clone, Debug)]
pub struct SimplifiedDitWeights {
    pub n: usize,
    pub w_cnn: Vec<f64>,
    pub x_pos: Vec<f64>,
    pub w_t1: Vec<f64>,
    pub w_t2: Vec<f64>,
    pub w_label: Vec<f64>,
    pub w_gate_attn: Vec<f64>,
    pub w_shift_attn: Vec<f64>,
    pub w_scale_attn: Vec<f64>,
    pub w_gate_mlp: Vec<f64>,
    pub w_shift_mlp: Vec<f64>,
    pub w_scale_mlp: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_mlp1: Vec<f64>,
    pub w_mlp2: Vec<f64>,
    pub w_shift_final: Vec<f64>,
    pub w_scale_final: Vec<f64>,
    pub w_final: Vec<f64>,
}

impl SimplifiedDitWeights {
    /// Standard-normal weights for equivalence checks.
    pub fn sample(n: usize, rng: &mut SeededRng) -> Self {
        let vecn = |label: &str| -> Vec<f64> {
            let mut r = SeededRng::new(rng.master(), &alloc::format!("{}/{label}", rng.label()));
            (0..n).map(|_| r.normal()).collect()
        };
        let w_cnn = vecn("w_cnn");
        let x_pos = vecn("x_pos");
        let w_t1 = vecn("w_t1");
        let w_label = vecn("w_label");
        let matn = |label: &str| -> Vec<f64> {
            let mut r = SeededRng::new(rng.master(), &alloc::format!("{}/{label}", rng.label()));
            (0..n * n).map(|_| r.normal()).collect()
        };
        SimplifiedDitWeights {
            n,
            w_cnn,
            x_pos,
            w_t1,
            w_t2: matn("w_t2"),
            w_label,
            w_gate_attn: matn("w_gate_attn"),
            w_shift_attn: matn("w_shift_attn"),
            w_scale_attn: matn("w_scale_attn"),
            w_gate_mlp: matn("w_gate_mlp"),
            w_shift_mlp: matn("w_shift_mlp"),
            w_scale_mlp: matn("w_scale_mlp"),
            w_k: matn("w_k"),
            w_q: matn("w_q"),
            w_v: matn("w_v"),
            w_mlp1: matn("w_mlp1"),
            w_mlp2: matn("w_mlp2"),
            w_shift_final: matn("w_shift_final"),
            w_scale_final: matn("w_scale_final"),
            w_final: matn("w_final")[..n].to_vec(),
        }
    }

    /// All `(name, values)` pairs, matching the interpreter's binding names.
    pub fn bindings(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_cnn", &self.w_cnn[..]),
            ("x_pos", &self.x_pos[..]),
            ("w_t1", &self.w_t1[..]),
            ("w_t2", &self.w_t2[..]),
            ("w_label", &self.w_label[..]),
            ("w_gate_attn", &self.w_gate_attn[..]),
            ("w_shift_attn", &self.w_shift_attn[..]),
            ("w_scale_attn", &self.w_scale_attn[..]),
            ("w_gate_mlp", &self.w_gate_mlp[..]),
            ("w_shift_mlp", &self.w_shift_mlp[..]),
            ("w_scale_mlp", &self.w_scale_mlp[..]),
            ("w_k", &self.w_k[..]),
            ("w_q", &self.w_q[..]),
            ("w_v", &self.w_v[..]),
            ("w_mlp1", &self.w_mlp1[..]),
            ("w_mlp2", &self.w_mlp2[..]),
            ("w_shift_final", &self.w_shift_final[..]),
            ("w_scale_final", &self.w_scale_final[..]),
            ("w_final", &self.w_final[..]),
        ]
    }
}

/// Frequency feature of the simplified timestep embedder (size 1).
pub fn simplified_freq(t: f64) -> f64 {
    sin64(t)
}

struct Cols<'a> {
    tape: &'a mut Tape<f64>,
    n: usize,
}

impl<'a> Cols<'a> {
    fn vec(&mut self, data: &[f64]) -> TensorId {
        self.tape.leaf(Tensor::from_vec(vec![self.n, 1], data.to_vec()).unwrap())
    }
    fn mat(&mut self, data: &[f64]) -> TensorId {
        self.tape.leaf(Tensor::from_vec(vec![self.n, self.n], data.to_vec()).unwrap())
    }
    fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        self.tape.matmul(m, v)
    }
    /// Layer norm over the n entries of a column vector.
    fn layer_norm(&mut self, v: TensorId, eps: f64) -> Result<TensorId> {
        let row = self.tape.transpose(v)?;
        let normed = self.tape.layer_norm_nolearn(row, eps)?;
        self.tape.transpose(normed)
    }
    fn scale_by_scalar(&mut self, v: TensorId, s: f64) -> Result<TensorId> {
        self.tape.scale(v, s)
    }
}

/// Direct evaluation of the simplified forward pass.
///
/// Inputs are the scalar latent `x`, timestep `t`, and label `y`; the
/// output is the scalar readout `mean(w_final .* z_modulated)` — the
/// averaged output layer.
pub fn forward(w: &SimplifiedDitWeights, x: f64, t: f64, y: f64, ln_eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut c = Cols { tape: &mut tape, n: w.n };

    // latent embedding plus fixed positions
    let w_cnn = c.vec(&w.w_cnn);
    let x_pos = c.vec(&w.x_pos);
    let xe = c.scale_by_scalar(w_cnn, x)?;
    let x_embed = c.tape.add(xe, x_pos)?;

    // timestep embedder: 1-dim frequency feature, then the two-layer MLP
    let w_t1 = c.vec(&w.w_t1);
    let t1 = c.scale_by_scalar(w_t1, simplified_freq(t))?;
    let h1 = c.tape.silu(t1)?;
    let w_t2 = c.mat(&w.w_t2);
    let t_embed = c.matvec(w_t2, h1)?;

    // label embedding and condition sum
    let w_label = c.vec(&w.w_label);
    let y_embed = c.scale_by_scalar(w_label, y)?;
    let cond = c.tape.add(t_embed, y_embed)?;

    // gate/shift/scale from SiLU'd condition
    let c_silu = c.tape.silu(cond)?;
    let cmap = |c: &mut Cols<'_>, m: &[f64]| -> Result<TensorId> {
        let mid = c.mat(m);
        c.matvec(mid, c_silu)
    };
    let gate_attn = cmap(&mut c, &w.w_gate_attn)?;
    let shift_attn = cmap(&mut c, &w.w_shift_attn)?;
    let scale_attn = cmap(&mut c, &w.w_scale_attn)?;
    let gate_mlp = cmap(&mut c, &w.w_gate_mlp)?;
    let shift_mlp = cmap(&mut c, &w.w_shift_mlp)?;
    let scale_mlp = cmap(&mut c, &w.w_scale_mlp)?;

    // attention branch: LN, modulate, multiplicative attention, gate
    let xn = c.layer_norm(x_embed, ln_eps)?;
    let xs = c.tape.mul(xn, scale_attn)?;
    let xm = c.tape.add(xs, shift_attn)?;
    let w_k = c.mat(&w.w_k);
    let w_q = c.mat(&w.w_q);
    let w_v = c.mat(&w.w_v);
    let k = c.matvec(w_k, xm)?;
    let q = c.matvec(w_q, xm)?;
    let v = c.matvec(w_v, xm)?;
    let kq = c.tape.mul(k, q)?;
    let x_attn = c.tape.mul(kq, v)?;
    let gated = c.tape.mul(gate_attn, x_attn)?;
    let h = c.tape.add(x_embed, gated)?;

    // MLP branch
    let hn = c.layer_norm(h, ln_eps)?;
    let hs = c.tape.mul(hn, scale_mlp)?;
    let hm = c.tape.add(hs, shift_mlp)?;
    let w1 = c.mat(&w.w_mlp1);
    let h1 = c.matvec(w1, hm)?;
    let hg = c.tape.gelu(h1)?;
    let w2 = c.mat(&w.w_mlp2);
    let h_mlp = c.matvec(w2, hg)?;
    let gated = c.tape.mul(gate_mlp, h_mlp)?;
    let h_out = c.tape.add(h, gated)?;

    // final layer: fresh SiLU of the condition, shift/scale, LN,
    // modulate, averaged readout
    let c_silu2 = c.tape.silu(cond)?;
    let wsf = c.mat(&w.w_shift_final);
    let shift_f = c.matvec(wsf, c_silu2)?;
    let wcf = c.mat(&w.w_scale_final);
    let scale_f = c.matvec(wcf, c_silu2)?;
    let zn = c.layer_norm(h_out, ln_eps)?;
    let zs = c.tape.mul(zn, scale_f)?;
    let zm = c.tape.add(zs, shift_f)?;
    let w_final = c.vec(&w.w_final);
    let zf = c.tape.mul(w_final, zm)?;
    let out = c.tape.mean_all(zf)?;
    tape.scalar_value(out)
}
