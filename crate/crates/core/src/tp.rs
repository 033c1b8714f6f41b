//! Interpreter for width-indexed instruction programs built from three
//! operators — vector averaging (`Avg`), matrix multiplication
//! (`MatMul`), and nonlinear outer products (`OuterNonlin`) — plus the
//! derived scalars-to-scalars transformation. Programs are symbolic:
//! the same instruction list executes at any width `n` given bindings.
//!
//! [`build_dit_program`] writes the simplified single-token DiT forward
//! pass as such a program; [`equivalence_check`] runs it against the
//! direct evaluation in [`crate::arch::simplified`] on identical
//! bindings and reports the largest absolute difference.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::simplified::{self, SimplifiedDitWeights};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::gelu_tanh;

/// A value in the program environment.
#[derive(Clone, Debug, PartialEq)]
pub enum TpValue {
    Scalar(f64),
    Vector(Vec<f64>),
    /// Row-major `n x n` initial matrix (only consumed by `MatMul`).
    Matrix(Vec<f64>),
}

/// Pointwise functions available to `OuterNonlin`.
///
/// Each variant documents its argument layout: `rows` holds `order + 1`
/// row-groups (the alpha row first, then one per summation index), each
/// with one entry per input vector; `scalars` holds the scalar
/// arguments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PsiFn {
    /// 1 vector: SiLU of the entry.
    Silu,
    /// 1 vector: GELU (tanh form) of the entry.
    Gelu,
    /// 1 vector, 1 scalar: `v * c`.
    ScaleByScalar,
    /// 2 vectors: `a + b`.
    Add2,
    /// 2 vectors: `a * b`.
    MulPair,
    /// 3 vectors: `a * b * c`.
    MulTriple,
    /// 3 vectors `[x, shift, scale]`: `scale * x + shift`.
    Modulate,
    /// 3 vectors `[branch, gate, x]`: `x + gate * branch`.
    GatedResidual,
    /// 1 vector, 1 scalar: `(v - c)^2`.
    SqDiff,
    /// 1 vector, 2 scalars `[mean, var]`: `(v - mean) / sqrt(var + eps)`.
    Normalize { eps: f64 },
    /// 2 vectors: `a * b / |a|` (sign-preserving gain).
    QkNorm,
    /// 5 vectors `[a, b, c, d, e]`: `a*b*c + a*d*e`.
    JointAttn,
    /// 1 vector, order 1: product of the alpha entry and the beta entry.
    MulRows,
}

impl PsiFn {
    /// `(vectors, scalars, order)` this function expects.
    pub fn arity(&self) -> (usize, usize, usize) {
        match self {
            PsiFn::Silu | PsiFn::Gelu => (1, 0, 0),
            PsiFn::ScaleByScalar => (1, 1, 0),
            PsiFn::Add2 | PsiFn::MulPair | PsiFn::QkNorm => (2, 0, 0),
            PsiFn::MulTriple | PsiFn::Modulate | PsiFn::GatedResidual => (3, 0, 0),
            PsiFn::SqDiff => (1, 1, 0),
            PsiFn::Normalize { .. } => (1, 2, 0),
            PsiFn::JointAttn => (5, 0, 0),
            PsiFn::MulRows => (1, 0, 1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PsiFn::Silu => "silu",
            PsiFn::Gelu => "gelu",
            PsiFn::ScaleByScalar => "scale_by_scalar",
            PsiFn::Add2 => "add2",
            PsiFn::MulPair => "mul_pair",
            PsiFn::MulTriple => "mul_triple",
            PsiFn::Modulate => "modulate",
            PsiFn::GatedResidual => "gated_residual",
            PsiFn::SqDiff => "sq_diff",
            PsiFn::Normalize { .. } => "normalize",
            PsiFn::QkNorm => "qk_norm",
            PsiFn::JointAttn => "joint_attn",
            PsiFn::MulRows => "mul_rows",
        }
    }

    fn eval(&self, rows: &[&[f64]], scalars: &[f64]) -> f64 {
        let r0 = rows[0];
        match self {
            PsiFn::Silu => {
                let x = r0[0];
                x / (1.0 + crate::real::exp64(-x))
            }
            PsiFn::Gelu => gelu_tanh(r0[0]),
            PsiFn::ScaleByScalar => r0[0] * scalars[0],
            PsiFn::Add2 => r0[0] + r0[1],
            PsiFn::MulPair => r0[0] * r0[1],
            PsiFn::MulTriple => r0[0] * r0[1] * r0[2],
            PsiFn::Modulate => r0[2] * r0[0] + r0[1],
            PsiFn::GatedResidual => r0[2] + r0[1] * r0[0],
            PsiFn::SqDiff => {
                let d = r0[0] - scalars[0];
                d * d
            }
            PsiFn::Normalize { eps } => (r0[0] - scalars[0]) / crate::real::sqrt64(scalars[1] + eps),
            PsiFn::QkNorm => r0[0] * r0[1] / r0[0].abs(),
            PsiFn::JointAttn => r0[0] * r0[1] * r0[2] + r0[0] * r0[3] * r0[4],
            PsiFn::MulRows => r0[0] * rows[1][0],
        }
    }
}

/// Scalars-to-scalars functions (the derived transformation).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarPsi {
    /// Frequency feature of the simplified timestep embedder: `sin(t)`.
    Freq,
}

impl ScalarPsi {
    pub fn name(&self) -> &'static str {
        match self {
            ScalarPsi::Freq => "freq",
        }
    }

    fn eval(&self, args: &[f64]) -> f64 {
        match self {
            ScalarPsi::Freq => crate::real::sin64(args[0]),
        }
    }
}

/// One program instruction.
#[derive(Clone, Debug, PartialEq)]
pub enum Instr {
    /// `dst = (1/n) sum_alpha src[alpha]`
    Avg { dst: String, src: String },
    /// `dst = mat . vec` (or `mat^T . vec`)
    MatMul { dst: String, mat: String, vec: String, transpose: bool },
    /// `dst[alpha] = n^-r sum_{beta_1..beta_r} psi(X[alpha]; X[beta_1]; ..; c)`
    OuterNonlin { dst: String, psi: PsiFn, vecs: Vec<String>, scalars: Vec<String>, order: usize },
    /// `dst = psi(scalars...)`
    ScalarFn { dst: String, psi: ScalarPsi, args: Vec<String> },
}

impl Instr {
    pub fn dst(&self) -> &str {
        match self {
            Instr::Avg { dst, .. }
            | Instr::MatMul { dst, .. }
            | Instr::OuterNonlin { dst, .. }
            | Instr::ScalarFn { dst, .. } => dst,
        }
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            Instr::Avg { .. } => "avg",
            Instr::MatMul { .. } => "matmul",
            Instr::OuterNonlin { .. } => "outer_nonlin",
            Instr::ScalarFn { .. } => "scalar_fn",
        }
    }
}

/// An ordered instruction list, executable at any width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TpProgram {
    pub instrs: Vec<Instr>,
}

fn get<'e>(env: &'e BTreeMap<String, TpValue>, name: &str) -> Result<&'e TpValue> {
    env.get(name)
        .ok_or_else(|| Error::Config(alloc::format!("program references undefined value {name}")))
}

fn get_vector<'e>(env: &'e BTreeMap<String, TpValue>, name: &str, n: usize) -> Result<&'e [f64]> {
    match get(env, name)? {
        TpValue::Vector(v) if v.len() == n => Ok(v),
        TpValue::Vector(v) => Err(Error::Shape(alloc::format!(
            "vector {name} has width {} but the program runs at width {n}",
            v.len()
        ))),
        _ => Err(Error::Config(alloc::format!("{name} is not a vector"))),
    }
}

fn get_scalar(env: &BTreeMap<String, TpValue>, name: &str) -> Result<f64> {
    match get(env, name)? {
        TpValue::Scalar(s) => Ok(*s),
        _ => Err(Error::Config(alloc::format!("{name} is not a scalar"))),
    }
}

/// Execute `program` at width `n` over the given bindings; returns the
/// full environment including every instruction's output.
pub fn run(
    program: &TpProgram,
    n: usize,
    bindings: &BTreeMap<String, TpValue>,
) -> Result<BTreeMap<String, TpValue>> {
    if n == 0 {
        return Err(Error::Config(String::from("program width must be at least 1")));
    }
    let mut env = bindings.clone();
    for instr in &program.instrs {
        let value = match instr {
            Instr::Avg { src, .. } => {
                let v = get_vector(&env, src, n)?;
                TpValue::Scalar(v.iter().sum::<f64>() / n as f64)
            }
            Instr::MatMul { mat, vec: v, transpose, .. } => {
                let m = match get(&env, mat)? {
                    TpValue::Matrix(m) if m.len() == n * n => m,
                    TpValue::Matrix(m) => {
                        return Err(Error::Shape(alloc::format!(
                            "matrix {mat} has {} entries, expected {}",
                            m.len(),
                            n * n
                        )))
                    }
                    _ => return Err(Error::Config(alloc::format!("{mat} is not a matrix"))),
                };
                let x = get_vector(&env, v, n)?;
                let mut y = vec![0.0; n];
                if *transpose {
                    for (j, xv) in x.iter().enumerate() {
                        let row = &m[j * n..(j + 1) * n];
                        for (yi, w) in y.iter_mut().zip(row) {
                            *yi += w * xv;
                        }
                    }
                } else {
                    for i in 0..n {
                        let row = &m[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for (w, xv) in row.iter().zip(x) {
                            acc += w * xv;
                        }
                        y[i] = acc;
                    }
                }
                TpValue::Vector(y)
            }
            Instr::OuterNonlin { psi, vecs, scalars, order, .. } => {
                let (want_k, want_l, want_r) = psi.arity();
                if vecs.len() != want_k || scalars.len() != want_l || *order != want_r {
                    return Err(Error::Config(alloc::format!(
                        "{} expects {want_k} vectors, {want_l} scalars, order {want_r}",
                        psi.name()
                    )));
                }
                let xs: Vec<&[f64]> = vecs
                    .iter()
                    .map(|name| get_vector(&env, name, n))
                    .collect::<Result<_>>()?;
                let cs: Vec<f64> = scalars.iter().map(|name| get_scalar(&env, name)).collect::<Result<_>>()?;
                let k = xs.len();
                let mut y = vec![0.0; n];
                let mut alpha_row = vec![0.0; k];
                match order {
                    0 => {
                        for a in 0..n {
                            for (slot, xcol) in alpha_row.iter_mut().zip(&xs) {
                                *slot = xcol[a];
                            }
                            y[a] = psi.eval(&[&alpha_row], &cs);
                        }
                    }
                    1 => {
                        let mut beta_row = vec![0.0; k];
                        let inv = 1.0 / n as f64;
                        for a in 0..n {
                            for (slot, xcol) in alpha_row.iter_mut().zip(&xs) {
                                *slot = xcol[a];
                            }
                            let mut acc = 0.0;
                            for bidx in 0..n {
                                for (slot, xcol) in beta_row.iter_mut().zip(&xs) {
                                    *slot = xcol[bidx];
                                }
                                acc += psi.eval(&[&alpha_row, &beta_row], &cs);
                            }
                            y[a] = acc * inv;
                        }
                    }
                    _ => {
                        return Err(Error::Config(alloc::format!(
                            "outer_nonlin order {order} not supported"
                        )))
                    }
                }
                TpValue::Vector(y)
            }
            Instr::ScalarFn { psi, args, .. } => {
                let vals: Vec<f64> = args.iter().map(|name| get_scalar(&env, name)).collect::<Result<_>>()?;
                TpValue::Scalar(psi.eval(&vals))
            }
        };
        env.insert(String::from(instr.dst()), value);
    }
    Ok(env)
}

/// Builder shorthand used by the program constructions.
struct ProgramBuilder {
    instrs: Vec<Instr>,
}

impl ProgramBuilder {
    fn new() -> Self {
        ProgramBuilder { instrs: Vec::new() }
    }

    fn avg(&mut self, dst: &str, src: &str) {
        self.instrs.push(Instr::Avg { dst: dst.into(), src: src.into() });
    }

    fn matmul(&mut self, dst: &str, mat: &str, v: &str) {
        self.instrs.push(Instr::MatMul { dst: dst.into(), mat: mat.into(), vec: v.into(), transpose: false });
    }

    fn outer(&mut self, dst: &str, psi: PsiFn, vecs: &[&str], scalars: &[&str]) {
        self.instrs.push(Instr::OuterNonlin {
            dst: dst.into(),
            psi,
            vecs: vecs.iter().map(|s| String::from(*s)).collect(),
            scalars: scalars.iter().map(|s| String::from(*s)).collect(),
            order: 0,
        });
    }

    fn scalar_fn(&mut self, dst: &str, psi: ScalarPsi, args: &[&str]) {
        self.instrs.push(Instr::ScalarFn {
            dst: dst.into(),
            psi,
            args: args.iter().map(|s| String::from(*s)).collect(),
        });
    }

    /// Layer norm without learnable parameters: mean, squared
    /// deviations, variance, normalize.
    fn layer_norm(&mut self, dst: &str, src: &str, eps: f64) {
        let mean = alloc::format!("{dst}_mean");
        let sq = alloc::format!("{dst}_sq");
        let var = alloc::format!("{dst}_var");
        self.avg(&mean, src);
        self.outer(&sq, PsiFn::SqDiff, &[src], &[&mean]);
        self.avg(&var, &sq);
        self.outer(dst, PsiFn::Normalize { eps }, &[src], &[&mean, &var]);
    }
}

/// The simplified DiT forward pass, instruction by instruction:
/// latent embed and positional add, frequency feature and two-layer
/// timestep MLP, label embed, condition sum, the six condition maps,
/// layer norm / modulate / multiplicative attention / gated residual,
/// the MLP branch, the final layer's shift-scale maps, and the averaged
/// readout.
///
/// Free bindings: scalars `x`, `t`, `y`; vectors `w_cnn`, `x_pos`,
/// `w_t1`, `w_label`, `w_final`; matrices `w_t2`, the six `w_*_attn` /
/// `w_*_mlp` condition maps, `w_k`, `w_q`, `w_v`, `w_mlp1`, `w_mlp2`,
/// `w_shift_final`, `w_scale_final`.
pub fn build_dit_program(ln_eps: f64) -> TpProgram {
    let mut b = ProgramBuilder::new();

    // latent embedding plus fixed positions
    b.outer("x_embed_raw", PsiFn::ScaleByScalar, &["w_cnn"], &["x"]);
    b.outer("x_embed", PsiFn::Add2, &["x_embed_raw", "x_pos"], &[]);

    // timestep embedder
    b.scalar_fn("t_freq", ScalarPsi::Freq, &["t"]);
    b.outer("t1", PsiFn::ScaleByScalar, &["w_t1"], &["t_freq"]);
    b.outer("h1", PsiFn::Silu, &["t1"], &[]);
    b.matmul("t_embed", "w_t2", "h1");

    // label embedding and condition
    b.outer("y_embed", PsiFn::ScaleByScalar, &["w_label"], &["y"]);
    b.outer("cond", PsiFn::Add2, &["t_embed", "y_embed"], &[]);

    // condition maps
    b.outer("c_silu", PsiFn::Silu, &["cond"], &[]);
    for name in ["gate_attn", "shift_attn", "scale_attn", "gate_mlp", "shift_mlp", "scale_mlp"] {
        b.matmul(name, &alloc::format!("w_{name}"), "c_silu");
    }

    // attention branch
    b.layer_norm("x_norm", "x_embed", ln_eps);
    b.outer("x_mod", PsiFn::Modulate, &["x_norm", "shift_attn", "scale_attn"], &[]);
    b.matmul("k", "w_k", "x_mod");
    b.matmul("q", "w_q", "x_mod");
    b.matmul("v", "w_v", "x_mod");
    b.outer("x_attn", PsiFn::MulTriple, &["k", "q", "v"], &[]);
    b.outer("h", PsiFn::GatedResidual, &["x_attn", "gate_attn", "x_embed"], &[]);

    // MLP branch
    b.layer_norm("h_norm", "h", ln_eps);
    b.outer("h_mod", PsiFn::Modulate, &["h_norm", "shift_mlp", "scale_mlp"], &[]);
    b.matmul("m1", "w_mlp1", "h_mod");
    b.outer("m1_act", PsiFn::Gelu, &["m1"], &[]);
    b.matmul("h_mlp", "w_mlp2", "m1_act");
    b.outer("h_out", PsiFn::GatedResidual, &["h_mlp", "gate_mlp", "h"], &[]);

    // final layer and averaged readout
    b.outer("c_silu_final", PsiFn::Silu, &["cond"], &[]);
    b.matmul("shift_final", "w_shift_final", "c_silu_final");
    b.matmul("scale_final", "w_scale_final", "c_silu_final");
    b.layer_norm("z_norm", "h_out", ln_eps);
    b.outer("z_mod", PsiFn::Modulate, &["z_norm", "shift_final", "scale_final"], &[]);
    b.outer("z_final", PsiFn::MulPair, &["w_final", "z_mod"], &[]);
    b.avg("out", "z_final");

    TpProgram { instrs: b.instrs }
}

/// Bindings for the DiT program from a simplified weight set and inputs.
pub fn dit_bindings(w: &SimplifiedDitWeights, x: f64, t: f64, y: f64) -> BTreeMap<String, TpValue> {
    let n = w.n;
    let mut env = BTreeMap::new();
    env.insert(String::from("x"), TpValue::Scalar(x));
    env.insert(String::from("t"), TpValue::Scalar(t));
    env.insert(String::from("y"), TpValue::Scalar(y));
    for (name, data) in w.bindings() {
        let value = if data.len() == n {
            TpValue::Vector(data.to_vec())
        } else {
            TpValue::Matrix(data.to_vec())
        };
        env.insert(String::from(name), value);
    }
    env
}

/// Run the program and the direct simplified forward on identical
/// random bindings for each `(n, seed)` pair; returns the maximum
/// absolute difference between the two scalar outputs.
pub fn equivalence_check(ns: &[usize], seeds: &[u64], ln_eps: f64) -> Result<f64> {
    let program = build_dit_program(ln_eps);
    let mut max_diff = 0.0f64;
    for &n in ns {
        for &seed in seeds {
            let mut rng = SeededRng::new(seed, "tp/eq");
            let w = SimplifiedDitWeights::sample(n, &mut rng);
            let mut inputs = SeededRng::new(seed, "tp/eq/inputs");
            let x = inputs.normal();
            let t = inputs.uniform() * 1000.0;
            let y = inputs.normal();

            let direct = simplified::forward(&w, x, t, y, ln_eps)?;
            let env = run(&program, n, &dit_bindings(&w, x, t, y))?;
            let program_out = match get(&env, "out")? {
                TpValue::Scalar(s) => *s,
                _ => return Err(Error::Config(String::from("program output is not a scalar"))),
            };
            let diff = (direct - program_out).abs();
            if diff > max_diff {
                max_diff = diff;
            }
        }
    }
    Ok(max_diff)
}
