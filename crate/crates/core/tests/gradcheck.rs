//! Central-finite-difference checks for every differentiable op.
//!
//! The numeric side rebuilds the forward pass from scratch around each
//! perturbed input element, so it shares no code path with the tape's
//! backward rules. h = 1e-5, 64-bit, relative error < 1e-4, at least
//! 100 random cases per op.

use mupdit_core::rng::SeededRng;
use mupdit_core::tensor::{init_normal, Tape, Tensor, TensorId};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: usize = 100;

type Build = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> TensorId;

/// Evaluate the composite loss for the given concrete inputs.
fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let out = build(&mut tape, inputs);
    tape.scalar_value(out).expect("composite must be scalar")
}

/// Compare tape gradients against central differences for every element
/// of every input.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let tracked: Vec<Tensor<f64>> = inputs.iter().cloned().map(|t| t.with_grad()).collect();
    let out = build(&mut tape, &tracked);
    // Builders insert leaves in order; recover their ids by replaying.
    // To keep the harness simple, builders receive tensors and must
    // insert them as the first leaves in order.
    tape.backward(out).expect("backward");
    // Builders insert the tracked inputs as the first leaves, in order.
    let leaf_ids: Vec<TensorId> = (0..inputs.len()).map(TensorId).collect();
    for (i, id) in leaf_ids.iter().enumerate() {
        assert_eq!(
            tape.tensor(*id).shape,
            inputs[i].shape,
            "{name}: leaf {i} is not input {i}"
        );
    }

    for (which, id) in leaf_ids.iter().enumerate() {
        let analytic: Vec<f64> = tape.grad(*id).unwrap_or(&[]).to_vec();
        for e in 0..inputs[which].data.len() {
            let mut plus = inputs.clone();
            plus[which].data[e] += H;
            let mut minus = inputs.clone();
            minus[which].data[e] -= H;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * H);
            let a = analytic.get(e).copied().unwrap_or(0.0);
            let denom = a.abs().max(numeric.abs()).max(1.0);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel < TOL,
                "{name}: input {which} elem {e}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
}

fn rand_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Random projection so that every output element reaches the scalar
/// loss with a distinct weight.
fn project(tape: &mut Tape<f64>, out: TensorId, rng: &mut SeededRng) -> TensorId {
    let shape = tape.tensor(out).shape.clone();
    let w = init_normal(&shape, 1.0, rng).unwrap();
    let wid = tape.leaf(w);
    let prod = tape.mul(out, wid).unwrap();
    tape.mean_all(prod).unwrap()
}

#[test]
fn grad_add_equal_and_scalar() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(1000 + case as u64, "grad/add");
        let prng = SeededRng::new(2000 + case as u64, "grad/add/proj");
        if case % 2 == 0 {
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[3, 4]);
            let p = prng.clone();
            check(
                "add",
                &move |t, ins| {
                    let x = t.leaf(ins[0].clone());
                    let y = t.leaf(ins[1].clone());
                    let s = t.add(x, y).unwrap();
                    project(t, s, &mut p.clone())
                },
                vec![a, b],
            );
        } else {
            let a = rand_tensor(&mut rng, &[2, 5]);
            let b = rand_tensor(&mut rng, &[]);
            let p = prng.clone();
            check(
                "add scalar",
                &move |t, ins| {
                    let x = t.leaf(ins[0].clone());
                    let y = t.leaf(ins[1].clone());
                    let s = t.add(x, y).unwrap();
                    project(t, s, &mut p.clone())
                },
                vec![a, b],
            );
        }
    }
}

#[test]
fn grad_mul_equal_and_scalar() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(3000 + case as u64, "grad/mul");
        let prng = SeededRng::new(4000 + case as u64, "grad/mul/proj");
        let shapes: (&[usize], &[usize]) = if case % 2 == 0 { (&[4, 3], &[4, 3]) } else { (&[3, 3], &[]) };
        let a = rand_tensor(&mut rng, shapes.0);
        let b = rand_tensor(&mut rng, shapes.1);
        let p = prng.clone();
        check(
            "mul",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let y = t.leaf(ins[1].clone());
                let s = t.mul(x, y).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a, b],
        );
    }
}

#[test]
fn grad_scale() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(5000 + case as u64, "grad/scale");
        let prng = SeededRng::new(5100 + case as u64, "grad/scale/proj");
        let a = rand_tensor(&mut rng, &[4, 2]);
        let c = rng.uniform() * 3.0 - 1.5;
        let p = prng.clone();
        check(
            "scale",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let s = t.scale(x, c).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a],
        );
    }
}

#[test]
fn grad_matmul() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(6000 + case as u64, "grad/matmul");
        let prng = SeededRng::new(6100 + case as u64, "grad/matmul/proj");
        let (m, k, n) = (2 + case % 3, 2 + (case / 3) % 3, 2 + (case / 9) % 3);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        let p = prng.clone();
        check(
            "matmul",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let y = t.leaf(ins[1].clone());
                let s = t.matmul(x, y).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a, b],
        );
    }
}

#[test]
fn grad_transpose_concat_slice() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(7000 + case as u64, "grad/shapeops");
        let prng = SeededRng::new(7100 + case as u64, "grad/shapeops/proj");
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 2]);
        let p = prng.clone();
        check(
            "transpose+concat+slice",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let y = t.leaf(ins[1].clone());
                let cat = t.concat_lastdim(x, y).unwrap();
                let tr = t.transpose(cat).unwrap();
                let back = t.transpose(tr).unwrap();
                let sl = t.slice_cols(back, 1, 4).unwrap();
                project(t, sl, &mut p.clone())
            },
            vec![a, b],
        );
    }
}

#[test]
fn grad_token_ops_and_gather() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(8000 + case as u64, "grad/tokens");
        let prng = SeededRng::new(8100 + case as u64, "grad/tokens/proj");
        let a = rand_tensor(&mut rng, &[4, 3]); // 2 samples x 2 tokens
        let b = rand_tensor(&mut rng, &[2, 3]); // 2 samples x 1 token
        let table = rand_tensor(&mut rng, &[3, 3]);
        let p = prng.clone();
        check(
            "concat_tokens+slice_tokens+gather",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let y = t.leaf(ins[1].clone());
                let tb = t.leaf(ins[2].clone());
                let j = t.concat_tokens(x, y, 2, 1).unwrap();
                let sx = t.slice_tokens(j, 2, 1, true).unwrap();
                let sy = t.slice_tokens(j, 2, 1, false).unwrap();
                let g = t.gather_rows(tb, &[2, 0]).unwrap();
                let sum = t.add(sy, g).unwrap();
                let p1 = project(t, sx, &mut p.clone());
                let p2 = project(t, sum, &mut p.clone());
                t.add(p1, p2).unwrap()
            },
            vec![a, b, table],
        );
    }
}

#[test]
fn grad_broadcast_rows() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(9000 + case as u64, "grad/bcast");
        let prng = SeededRng::new(9100 + case as u64, "grad/bcast/proj");
        let x = rand_tensor(&mut rng, &[6, 3]); // 2 samples x 3 tokens
        let v = rand_tensor(&mut rng, &[2, 3]);
        let w = rand_tensor(&mut rng, &[3, 3]); // positions
        let p = prng.clone();
        check(
            "add/mul_bcast_rows + add_tiled_rows",
            &move |t, ins| {
                let a = t.leaf(ins[0].clone());
                let b = t.leaf(ins[1].clone());
                let c = t.leaf(ins[2].clone());
                let m = t.mul_bcast_rows(a, b).unwrap();
                let s = t.add_bcast_rows(m, b).unwrap();
                let tl = t.add_tiled_rows(s, c).unwrap();
                project(t, tl, &mut p.clone())
            },
            vec![x, v, w],
        );
    }
}

#[test]
fn grad_softmax() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(10_000 + case as u64, "grad/softmax");
        let prng = SeededRng::new(10_100 + case as u64, "grad/softmax/proj");
        let a = rand_tensor(&mut rng, &[3, 5]);
        let p = prng.clone();
        check(
            "softmax_lastdim",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let s = t.softmax_lastdim(x).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a],
        );
    }
}

#[test]
fn grad_layer_norm() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(11_000 + case as u64, "grad/ln");
        let prng = SeededRng::new(11_100 + case as u64, "grad/ln/proj");
        let a = rand_tensor(&mut rng, &[3, 8]);
        let eps = if case % 2 == 0 { 0.0 } else { 0.01 };
        let p = prng.clone();
        check(
            "layer_norm_nolearn",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let s = t.layer_norm_nolearn(x, eps).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a],
        );
    }
}

#[test]
fn grad_rms_norm_groups() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(12_000 + case as u64, "grad/rms");
        let prng = SeededRng::new(12_100 + case as u64, "grad/rms/proj");
        let a = rand_tensor(&mut rng, &[3, 8]);
        let p = prng.clone();
        check(
            "rms_norm_groups",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let s = t.rms_norm_groups(x, 4, 1e-6).unwrap();
                project(t, s, &mut p.clone())
            },
            vec![a],
        );
    }
}

#[test]
fn grad_silu_gelu() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(13_000 + case as u64, "grad/act");
        let prng = SeededRng::new(13_100 + case as u64, "grad/act/proj");
        let a = rand_tensor(&mut rng, &[4, 4]);
        let p = prng.clone();
        check(
            "silu+gelu",
            &move |t, ins| {
                let x = t.leaf(ins[0].clone());
                let s = t.silu(x).unwrap();
                let g = t.gelu(s).unwrap();
                project(t, g, &mut p.clone())
            },
            vec![a],
        );
    }
}

#[test]
fn grad_mean_mse() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(14_000 + case as u64, "grad/loss");
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        check(
            "mean_all+mse",
            &|t, ins| {
                let x = t.leaf(ins[0].clone());
                let y = t.leaf(ins[1].clone());
                let m = t.mse(x, y).unwrap();
                let n = t.mean_all(x).unwrap();
                t.add(m, n).unwrap()
            },
            vec![a, b],
        );
    }
}

#[test]
fn grad_attention_self_and_cross() {
    for case in 0..CASES {
        let mut rng = SeededRng::new(15_000 + case as u64, "grad/attn");
        let prng = SeededRng::new(15_100 + case as u64, "grad/attn/proj");
        if case % 2 == 0 {
            // self-attention: 2 samples x 3 tokens, 2 heads of dim 2
            let q = rand_tensor(&mut rng, &[6, 4]);
            let k = rand_tensor(&mut rng, &[6, 4]);
            let v = rand_tensor(&mut rng, &[6, 4]);
            let p = prng.clone();
            check(
                "attention self",
                &move |t, ins| {
                    let q = t.leaf(ins[0].clone());
                    let k = t.leaf(ins[1].clone());
                    let v = t.leaf(ins[2].clone());
                    let o = t.attention(q, k, v, 3, 3, 2).unwrap();
                    project(t, o, &mut p.clone())
                },
                vec![q, k, v],
            );
        } else {
            // cross-attention: 2 samples, 2 query tokens, 3 kv tokens
            let q = rand_tensor(&mut rng, &[4, 4]);
            let k = rand_tensor(&mut rng, &[6, 4]);
            let v = rand_tensor(&mut rng, &[6, 4]);
            let p = prng.clone();
            check(
                "attention cross",
                &move |t, ins| {
                    let q = t.leaf(ins[0].clone());
                    let k = t.leaf(ins[1].clone());
                    let v = t.leaf(ins[2].clone());
                    let o = t.attention(q, k, v, 2, 3, 2).unwrap();
                    project(t, o, &mut p.clone())
                },
                vec![q, k, v],
            );
        }
    }
}

#[test]
fn forward_determinism_is_bitwise() {
    let run = || {
        let mut rng = SeededRng::new(99, "det");
        let mut t = Tape::new();
        let a = t.leaf(init_normal(&[8, 8], 1.0, &mut rng).unwrap());
        let b = t.leaf(init_normal(&[8, 8], 0.5, &mut rng).unwrap());
        let m = t.matmul(a, b).unwrap();
        let s = t.silu(m).unwrap();
        let l = t.layer_norm_nolearn(s, 1e-6).unwrap();
        let o = t.attention(l, l, l, 4, 4, 4).unwrap();
        let loss = t.mean_all(o).unwrap();
        t.value(loss).to_vec()
    };
    assert_eq!(run(), run());
}
