use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::mup::{make_plan, BaseHps, Scheme};
use crate::tensor::Tape;

fn toy(variant: Variant, n: usize) -> ModelSpec {
    ModelSpec::toy(variant, 32, n, 8).unwrap()
}

fn all_variants() -> [Variant; 4] {
    [Variant::Dit, Variant::PixArt, Variant::UVit, Variant::MmDit]
}

fn random_input(spec: &ModelSpec, batch: usize, seed: u64) -> ForwardInput<f64> {
    let tokens = spec.tokens();
    let pd = spec.patch.patch_dim();
    let mut rng = SeededRng::new(seed, "arch/test/input");
    let x_tokens = init_normal(&[batch * tokens, pd], 1.0, &mut rng).unwrap();
    let mut t_feats = Vec::new();
    for _ in 0..batch {
        t_feats.extend(embed::freq_features(rng.uniform() * 1000.0, spec.freq_dim));
    }
    ForwardInput {
        x_tokens,
        t_feats: Tensor::from_vec(vec![batch, spec.freq_dim], t_feats.into_iter().collect()).unwrap(),
        labels: (0..batch).map(|i| i % spec.num_classes).collect(),
    }
}

fn run_forward(spec: &ModelSpec, base: &BaseHps, scheme: Scheme, batch: usize, seed: u64) -> (Tape<f64>, ForwardOutput) {
    let model: Model<f64> = Model::new(spec.clone()).unwrap();
    let plan = make_plan(model.graph.weights.iter(), spec.widths, base, scheme).unwrap();
    let store = WeightStore::init(&model.graph, &plan, seed).unwrap();
    let mut tape = Tape::new();
    let bound = bind_weights(&mut tape, &store).unwrap();
    let input = random_input(spec, batch, seed);
    let out = model.forward(&mut tape, &bound.eff, &input).unwrap();
    (tape, out)
}

#[test]
fn shape_contract_across_variants_and_widths() {
    for variant in all_variants() {
        for n in [32usize, 64, 128] {
            let spec = toy(variant, n);
            let (tape, out) = run_forward(&spec, &BaseHps::default(), Scheme::Mup, 2, 5);
            let shape = &tape.tensor(out.pred).shape;
            assert_eq!(
                shape,
                &vec![2 * spec.tokens(), spec.patch.patch_dim()],
                "{variant:?} at width {n}"
            );
        }
    }
    // one wide sanity point
    let spec = toy(Variant::Dit, 512);
    let (tape, out) = run_forward(&spec, &BaseHps::default(), Scheme::Mup, 1, 5);
    assert_eq!(tape.tensor(out.pred).shape, vec![spec.tokens(), spec.patch.patch_dim()]);
}

#[test]
fn zero_output_init_gives_exactly_zero_everywhere() {
    // sigma_out = 0 (default) and zero biases: the final projection and
    // its bias are identically zero, so the model output is exactly 0.
    for variant in all_variants() {
        let spec = toy(variant, 64);
        let (tape, out) = run_forward(&spec, &BaseHps::default(), Scheme::Mup, 3, 11);
        assert!(
            tape.value(out.pred).iter().all(|&v| v == 0.0),
            "{variant:?} output not identically zero"
        );
    }
}

#[test]
fn gate_zero_init_makes_blocks_pass_through() {
    // With every conditioning map and table at zero, the gates are zero
    // and each block leaves x unchanged. PixArt's ungated cross-attention
    // path is silenced by zeroing its output projection as well.
    for variant in [Variant::Dit, Variant::PixArt, Variant::MmDit] {
        let mut spec = toy(variant, 32);
        spec.adaln_init = AdalnInit::ZeroAll;
        let model: Model<f64> = Model::new(spec.clone()).unwrap();
        let plan = make_plan(model.graph.weights.iter(), spec.widths, &BaseHps::default(), Scheme::Mup).unwrap();
        let mut store = WeightStore::init(&model.graph, &plan, 3).unwrap();
        if variant == Variant::PixArt {
            for (i, name) in store.names.clone().iter().enumerate() {
                if name.contains(".cross.o.") {
                    store.tensors[i].data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut tape = Tape::new();
        let bound = bind_weights(&mut tape, &store).unwrap();
        let input = random_input(&spec, 2, 3);
        let out = model.forward(&mut tape, &bound.eff, &input).unwrap();

        let embed = out.probes.iter().find(|(n, _)| n == "embed").unwrap().1;
        for (name, id) in &out.probes {
            if name.starts_with("block") && !name.ends_with(".c") {
                let a = tape.value(embed);
                let b = tape.value(*id);
                assert_eq!(a, b, "{variant:?} {name} is not a pass-through");
            }
        }
    }
}

#[test]
fn role_audit_from_cross_width_fan_dims() {
    // A fan dimension is width-like iff it changes between two widths;
    // recomputing roles from that signal must reproduce the tags.
    for variant in all_variants() {
        let g32 = build_graph(&toy(variant, 32)).unwrap();
        let g64 = build_graph(&toy(variant, 64)).unwrap();
        assert_eq!(g32.len(), g64.len());
        for (a, b) in g32.weights.iter().zip(&g64.weights) {
            assert_eq!(a.name, b.name);
            let in_like = a.fan_in != b.fan_in;
            let out_like = a.fan_out != b.fan_out;
            assert_eq!(
                crate::mup::classify_role(in_like, out_like),
                a.role,
                "{variant:?} {}",
                a.name
            );
        }
    }
}

#[test]
fn plan_covers_every_weight() {
    for variant in all_variants() {
        let spec = toy(variant, 64);
        let graph = build_graph(&spec).unwrap();
        let plan = make_plan(graph.weights.iter(), spec.widths, &BaseHps::default(), Scheme::Mup).unwrap();
        assert_eq!(plan.entries.len(), graph.len());
        for w in &graph.weights {
            assert!(plan.get(&w.name).is_some(), "{} unhoused", w.name);
        }
    }
}

#[test]
fn plans_agree_at_base_width_except_output_init() {
    for variant in all_variants() {
        let spec = toy(variant, 32); // n == n_base
        let graph = build_graph(&spec).unwrap();
        let base = BaseHps::default();
        let mup = make_plan(graph.weights.iter(), spec.widths, &base, Scheme::Mup).unwrap();
        let sp = make_plan(graph.weights.iter(), spec.widths, &base, Scheme::Sp).unwrap();
        for w in &graph.weights {
            let (m, s) = (mup.get(&w.name).unwrap(), sp.get(&w.name).unwrap());
            assert_eq!(m.lr, s.lr, "{}", w.name);
            assert_eq!(m.mult, s.mult, "{}", w.name);
            if w.role == crate::mup::WeightRole::Output {
                assert_eq!(m.init_std, 0.0);
                assert!(s.init_std > 0.0);
            } else {
                assert_eq!(m.init_std, s.init_std, "{}", w.name);
            }
        }
    }
}

#[test]
fn weight_census_matches_block_inventories() {
    let pixart = build_graph(&toy(Variant::PixArt, 32)).unwrap();
    let names: Vec<&str> = pixart.names().collect();
    // six shared time-derived maps
    assert_eq!(names.iter().filter(|n| n.starts_with("tadaln.") && n.ends_with(".w")).count(), 6);
    // six per-block table vectors and four cross-attention maps
    for b in 0..2 {
        assert_eq!(names.iter().filter(|n| n.starts_with(&format!("block{b}.table."))).count(), 6);
        assert_eq!(
            names.iter().filter(|n| n.starts_with(&format!("block{b}.cross.")) && n.ends_with(".w")).count(),
            4
        );
    }

    let mmdit = build_graph(&toy(Variant::MmDit, 32)).unwrap();
    let names: Vec<&str> = mmdit.names().collect();
    for b in 0..2 {
        // six k/q/v maps (three per stream), four gains, two output projections
        let kqv = names
            .iter()
            .filter(|n| {
                n.starts_with(&format!("block{b}."))
                    && (n.ends_with(".attn.q.w") || n.ends_with(".attn.k.w") || n.ends_with(".attn.v.w"))
            })
            .count();
        assert_eq!(kqv, 6);
        let gains = names
            .iter()
            .filter(|n| n.starts_with(&format!("block{b}.")) && (n.ends_with("qgain") || n.ends_with("kgain")))
            .count();
        assert_eq!(gains, 4);
        let oproj = names
            .iter()
            .filter(|n| n.starts_with(&format!("block{b}.")) && n.ends_with(".attn.o.w"))
            .count();
        assert_eq!(oproj, 2);
    }

    // role spot checks
    let dit = build_graph(&toy(Variant::Dit, 32)).unwrap();
    assert_eq!(dit.get("temb.fc1.w").unwrap().role, crate::mup::WeightRole::Input);
    assert_eq!(dit.get("temb.fc2.w").unwrap().role, crate::mup::WeightRole::Hidden);
    assert_eq!(dit.get("patch.w").unwrap().role, crate::mup::WeightRole::Input);
    assert_eq!(dit.get("label.table").unwrap().role, crate::mup::WeightRole::Input);
    assert_eq!(dit.get("final.proj.w").unwrap().role, crate::mup::WeightRole::Output);
    assert_eq!(dit.get("final.proj.b").unwrap().role, crate::mup::WeightRole::Scalar);
    for b in 0..2 {
        for branch in ["attn", "mlp"] {
            for kind in ["gate", "shift", "scale"] {
                let w = dit.get(&format!("block{b}.adaln.{kind}_{branch}.w")).unwrap();
                assert_eq!(w.role, crate::mup::WeightRole::Hidden, "{}", w.name);
            }
        }
    }
}

#[test]
fn zero_image_embeds_to_positional_table() {
    let spec = toy(Variant::Dit, 32);
    let model: Model<f64> = Model::new(spec.clone()).unwrap();
    let plan = make_plan(model.graph.weights.iter(), spec.widths, &BaseHps::default(), Scheme::Mup).unwrap();
    let store = WeightStore::init(&model.graph, &plan, 2).unwrap();
    let mut tape = Tape::new();
    let bound = bind_weights(&mut tape, &store).unwrap();
    let mut input = random_input(&spec, 2, 2);
    input.x_tokens.data.iter_mut().for_each(|v| *v = 0.0);
    let out = model.forward(&mut tape, &bound.eff, &input).unwrap();
    let embed = out.probes.iter().find(|(n, _)| n == "embed").unwrap().1;
    let got = tape.value(embed);
    let pos = &model.positional().data;
    let tokens = spec.tokens();
    for b in 0..2 {
        for tk in 0..tokens {
            for j in 0..spec.widths.n {
                assert_eq!(got[(b * tokens + tk) * spec.widths.n + j], pos[tk * spec.widths.n + j]);
            }
        }
    }
}

#[test]
fn distinct_timesteps_give_distinct_predictions() {
    let mut spec = toy(Variant::Dit, 32);
    spec.adaln_init = AdalnInit::Standard;
    let base = BaseHps { sigma_out: 1.0, ..BaseHps::default() };
    let model: Model<f64> = Model::new(spec.clone()).unwrap();
    let plan = make_plan(model.graph.weights.iter(), spec.widths, &base, Scheme::Mup).unwrap();
    let store = WeightStore::init(&model.graph, &plan, 7).unwrap();

    let mut preds = Vec::new();
    for t in [5.0f64, 700.0] {
        let mut tape = Tape::new();
        let bound = bind_weights(&mut tape, &store).unwrap();
        let mut input = random_input(&spec, 1, 7);
        input.t_feats =
            Tensor::from_vec(vec![1, spec.freq_dim], embed::freq_features(t, spec.freq_dim)).unwrap();
        let out = model.forward(&mut tape, &bound.eff, &input).unwrap();
        preds.push(tape.value(out.pred).to_vec());
    }
    assert_ne!(preds[0], preds[1]);
}

#[test]
fn uvit_skip_equals_concat_linear_oracle() {
    // W^m h_main + W^s h_skip must equal [h_main; h_skip] @ [[W^m], [W^s]].
    let n = 16;
    let mut rng = SeededRng::new(13, "uvit/skip");
    let wm = init_normal::<f64>(&[n, n], 1.0, &mut rng).unwrap();
    let ws = init_normal::<f64>(&[n, n], 1.0, &mut rng).unwrap();
    let hm = init_normal::<f64>(&[3, n], 1.0, &mut rng).unwrap();
    let hs = init_normal::<f64>(&[3, n], 1.0, &mut rng).unwrap();

    let mut tape = Tape::new();
    let wm_id = tape.leaf(wm.clone());
    let ws_id = tape.leaf(ws.clone());
    let hm_id = tape.leaf(hm.clone());
    let hs_id = tape.leaf(hs.clone());
    let a = tape.matmul(hm_id, wm_id).unwrap();
    let b = tape.matmul(hs_id, ws_id).unwrap();
    let decomposed = tape.add(a, b).unwrap();

    // oracle: single matmul over the concatenation
    let cat = tape.concat_lastdim(hm_id, hs_id).unwrap();
    let mut stacked = wm.data.clone();
    stacked.extend_from_slice(&ws.data);
    let big = tape.leaf(Tensor::from_vec(vec![2 * n, n], stacked).unwrap());
    let oracle = tape.matmul(cat, big).unwrap();

    for (x, y) in tape.value(decomposed).iter().zip(tape.value(oracle)) {
        assert!((x - y).abs() < 1e-12);
    }

    // both halves are hidden in the plan
    let g = build_graph(&toy(Variant::UVit, 32)).unwrap();
    assert_eq!(g.get("skip0.main.w").unwrap().role, crate::mup::WeightRole::Hidden);
    assert_eq!(g.get("skip0.skip.w").unwrap().role, crate::mup::WeightRole::Hidden);
}

#[test]
fn joint_attention_matches_manual_softmax_oracle() {
    // Two streams of 2 tokens each; the joint sequence attends over all
    // four keys. Recompute with plain loops.
    let n = 8;
    let d = 4;
    let (tx, tc) = (2usize, 2usize);
    let mut rng = SeededRng::new(17, "joint/oracle");
    let qx = init_normal::<f64>(&[tx, n], 1.0, &mut rng).unwrap();
    let qc = init_normal::<f64>(&[tc, n], 1.0, &mut rng).unwrap();
    let kx = init_normal::<f64>(&[tx, n], 1.0, &mut rng).unwrap();
    let kc = init_normal::<f64>(&[tc, n], 1.0, &mut rng).unwrap();
    let vx = init_normal::<f64>(&[tx, n], 1.0, &mut rng).unwrap();
    let vc = init_normal::<f64>(&[tc, n], 1.0, &mut rng).unwrap();

    let mut tape = Tape::new();
    let ids: Vec<_> = [&qx, &qc, &kx, &kc, &vx, &vc].iter().map(|t| tape.leaf((*t).clone())).collect();
    let q = tape.concat_tokens(ids[0], ids[1], tx, tc).unwrap();
    let k = tape.concat_tokens(ids[2], ids[3], tx, tc).unwrap();
    let v = tape.concat_tokens(ids[4], ids[5], tx, tc).unwrap();
    let joint = tape.attention(q, k, v, tx + tc, tx + tc, d).unwrap();
    let got = tape.value(joint);

    // manual oracle over the concatenated sequence
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        let mut out = a.data.clone();
        out.extend_from_slice(&b.data);
        out
    };
    let (qj, kj, vj) = (cat(&qx, &qc), cat(&kx, &kc), cat(&vx, &vc));
    let t = tx + tc;
    let heads = n / d;
    let scale = 1.0 / (d as f64).sqrt();
    for ti in 0..t {
        for h in 0..heads {
            let mut logits = vec![0.0; t];
            for (tj, logit) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += qj[ti * n + h * d + e] * kj[tj * n + h * d + e];
                }
                *logit = dot * scale;
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for e in 0..d {
                let mut out = 0.0;
                for tj in 0..t {
                    out += probs[tj] * vj[tj * n + h * d + e];
                }
                let gotv = got[ti * n + h * d + e];
                assert!((out - gotv).abs() < 1e-12, "token {ti} head {h} elem {e}: {out} vs {gotv}");
            }
        }
    }
}

#[test]
fn pixart_zero_tables_reduce_to_shared_tuple() {
    // Default init zeroes the per-block tables, so block modulation
    // equals the shared time-derived tuple exactly (additive identity).
    let spec = toy(Variant::PixArt, 32);
    let graph = build_graph(&spec).unwrap();
    for b in 0..2 {
        for branch in ["attn", "mlp"] {
            for kind in ["gate", "shift", "scale"] {
                let w = graph.get(&format!("block{b}.table.{kind}_{branch}")).unwrap();
                assert_eq!(w.init, InitKind::Zeros);
                assert_eq!(w.role, crate::mup::WeightRole::Input);
            }
        }
    }
}

#[test]
fn mmdit_gain_init_is_ones_and_input_role() {
    let g = build_graph(&toy(Variant::MmDit, 32)).unwrap();
    for b in 0..2 {
        for stream in ["x", "c"] {
            for gain in ["qgain", "kgain"] {
                let w = g.get(&format!("block{b}.{stream}.attn.{gain}")).unwrap();
                assert_eq!(w.init, InitKind::Ones);
                assert_eq!(w.role, crate::mup::WeightRole::Input);
            }
        }
    }
}

#[test]
fn mmdit_without_text_runs_single_stream() {
    let mut spec = toy(Variant::MmDit, 32);
    spec.text_tokens = 0;
    let (tape, out) = run_forward(&spec, &BaseHps::default(), Scheme::Mup, 2, 9);
    assert_eq!(tape.tensor(out.pred).shape, vec![2 * spec.tokens(), spec.patch.patch_dim()]);
    // no c-stream probes in the single-stream configuration
    assert!(out.probes.iter().all(|(n, _)| !n.ends_with(".c")));
}
