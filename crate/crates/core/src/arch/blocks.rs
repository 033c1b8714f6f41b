//! Forward passes for the four variants.
//!
//! All variants operate on a `[batch*tokens, n]` token matrix so the
//! large projections run as single matrix products; attention is
//! restricted per sample inside the fused op. Condition vectors live in
//! `[batch, n]` matrices and reach tokens through the row-broadcast ops.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, TensorId};

use super::{ForwardInput, ForwardOutput, Model, Variant};

struct Ctx<'a, R: Real> {
    tape: &'a mut Tape<R>,
    w: &'a BTreeMap<String, TensorId>,
}

impl<'a, R: Real> Ctx<'a, R> {
    fn id(&self, name: &str) -> Result<TensorId> {
        self.w
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("weight {name} not bound")))
    }

    /// `x @ w + b`, broadcasting the bias across rows.
    fn linear(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let w = self.id(&format!("{prefix}.w"))?;
        let b = self.id(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bcast_rows(y, b)
    }

    /// `scale .* x + shift` with per-sample condition rows.
    fn modulate(&mut self, x: TensorId, scale: TensorId, shift: TensorId) -> Result<TensorId> {
        let m = self.tape.mul_bcast_rows(x, scale)?;
        self.tape.add_bcast_rows(m, shift)
    }

    /// `x + gate .* branch`.
    fn gated_residual(&mut self, x: TensorId, branch: TensorId, gate: TensorId) -> Result<TensorId> {
        let gb = self.tape.mul_bcast_rows(branch, gate)?;
        self.tape.add(x, gb)
    }

    /// Gate/shift/scale for one branch from SiLU'd condition rows.
    fn cond3(&mut self, c_silu: TensorId, prefix: &str, branch: &str) -> Result<(TensorId, TensorId, TensorId)> {
        let gate = self.linear(c_silu, &format!("{prefix}.gate_{branch}"))?;
        let shift = self.linear(c_silu, &format!("{prefix}.shift_{branch}"))?;
        let scale = self.linear(c_silu, &format!("{prefix}.scale_{branch}"))?;
        Ok((gate, shift, scale))
    }

    /// Pre-LN attention branch input -> projected attention output.
    fn self_attn(&mut self, xin: TensorId, prefix: &str, tokens: usize, head_dim: usize) -> Result<TensorId> {
        let q = self.linear(xin, &format!("{prefix}.q"))?;
        let k = self.linear(xin, &format!("{prefix}.k"))?;
        let v = self.linear(xin, &format!("{prefix}.v"))?;
        let a = self.tape.attention(q, k, v, tokens, tokens, head_dim)?;
        self.linear(a, &format!("{prefix}.o"))
    }

    fn mlp(&mut self, xin: TensorId, prefix: &str) -> Result<TensorId> {
        let h = self.linear(xin, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h)?;
        self.linear(h, &format!("{prefix}.fc2"))
    }
}

/// Shared stem: patch tokens, positional add, timestep embedding.
/// Returns `(x_tokens [B*T, n], t_embed [B, n])`.
fn stem<R: Real>(model: &Model<R>, ctx: &mut Ctx<'_, R>, input: &ForwardInput<R>) -> Result<(TensorId, TensorId)> {
    let xt = ctx.tape.leaf(input.x_tokens.clone());
    let mut x = ctx.linear(xt, "patch")?;
    let pos = ctx.tape.leaf(model.pos.clone());
    x = ctx.tape.add_tiled_rows(x, pos)?;

    let tf = ctx.tape.leaf(input.t_feats.clone());
    let h = ctx.linear(tf, "temb.fc1")?;
    let h = ctx.tape.silu(h)?;
    let t_embed = ctx.linear(h, "temb.fc2")?;
    Ok((x, t_embed))
}

/// Class-embedding rows for the batch.
fn label_embed<R: Real>(ctx: &mut Ctx<'_, R>, labels: &[usize], num_classes: usize) -> Result<TensorId> {
    for &y in labels {
        if y >= num_classes {
            return Err(Error::Config(format!("label {y} out of {num_classes} classes")));
        }
    }
    let table = ctx.id("label.table")?;
    ctx.tape.gather_rows(table, labels)
}

pub(super) fn forward<R: Real>(
    model: &Model<R>,
    tape: &mut Tape<R>,
    weights: &BTreeMap<String, TensorId>,
    input: &ForwardInput<R>,
) -> Result<ForwardOutput> {
    let mut ctx = Ctx { tape, w: weights };
    match model.spec.variant {
        Variant::Dit => forward_dit(model, &mut ctx, input),
        Variant::PixArt => forward_pixart(model, &mut ctx, input),
        Variant::UVit => forward_uvit(model, &mut ctx, input),
        Variant::MmDit => forward_mmdit(model, &mut ctx, input),
    }
}

fn forward_dit<R: Real>(model: &Model<R>, ctx: &mut Ctx<'_, R>, input: &ForwardInput<R>) -> Result<ForwardOutput> {
    let spec = &model.spec;
    let (tokens, d, eps) = (spec.tokens(), spec.widths.head_dim, R::from_f64(spec.ln_eps));
    let mut probes = Vec::new();

    let (mut x, t_embed) = stem(model, ctx, input)?;
    let y_embed = label_embed(ctx, &input.labels, spec.num_classes)?;
    let cond = ctx.tape.add(t_embed, y_embed)?;
    let c_silu = ctx.tape.silu(cond)?;
    probes.push((String::from("embed"), x));

    for i in 0..spec.depth {
        let p = format!("block{i}");
        let (gate_a, shift_a, scale_a) = ctx.cond3(c_silu, &format!("{p}.adaln"), "attn")?;
        let xh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let xm = ctx.modulate(xh, scale_a, shift_a)?;
        let o = ctx.self_attn(xm, &format!("{p}.attn"), tokens, d)?;
        x = ctx.gated_residual(x, o, gate_a)?;

        let (gate_m, shift_m, scale_m) = ctx.cond3(c_silu, &format!("{p}.adaln"), "mlp")?;
        let hh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let hm = ctx.modulate(hh, scale_m, shift_m)?;
        let h = ctx.mlp(hm, &format!("{p}.mlp"))?;
        x = ctx.gated_residual(x, h, gate_m)?;
        probes.push((p, x));
    }

    let shift_f = ctx.linear(c_silu, "final.adaln.shift")?;
    let scale_f = ctx.linear(c_silu, "final.adaln.scale")?;
    let zh = ctx.tape.layer_norm_nolearn(x, eps)?;
    let zm = ctx.modulate(zh, scale_f, shift_f)?;
    let pred = ctx.linear(zm, "final.proj")?;
    probes.push((String::from("final"), pred));
    Ok(ForwardOutput { pred, probes })
}

fn forward_pixart<R: Real>(model: &Model<R>, ctx: &mut Ctx<'_, R>, input: &ForwardInput<R>) -> Result<ForwardOutput> {
    let spec = &model.spec;
    let (tokens, d, eps) = (spec.tokens(), spec.widths.head_dim, R::from_f64(spec.ln_eps));
    let mut probes = Vec::new();

    let (mut x, t_embed) = stem(model, ctx, input)?;
    let t_silu = ctx.tape.silu(t_embed)?;
    probes.push((String::from("embed"), x));

    // text tokens
    let text = ctx.tape.leaf(model.text_features(&input.labels)?);
    let y_embed = ctx.linear(text, "text.proj")?;

    // shared time-derived tuple, computed once per forward
    let mut shared = BTreeMap::new();
    for branch in ["attn", "mlp"] {
        for kind in ["gate", "shift", "scale"] {
            let id = ctx.linear(t_silu, &format!("tadaln.{kind}_{branch}"))?;
            shared.insert(format!("{kind}_{branch}"), id);
        }
    }

    for i in 0..spec.depth {
        let p = format!("block{i}");
        // per-block table + shared tuple
        let mut cond = BTreeMap::new();
        for branch in ["attn", "mlp"] {
            for kind in ["gate", "shift", "scale"] {
                let table = ctx.id(&format!("{p}.table.{kind}_{branch}"))?;
                let sum = ctx.tape.add_bcast_rows(shared[&format!("{kind}_{branch}")], table)?;
                cond.insert(format!("{kind}_{branch}"), sum);
            }
        }

        let xh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let xm = ctx.modulate(xh, cond["scale_attn"], cond["shift_attn"])?;
        let o = ctx.self_attn(xm, &format!("{p}.attn"), tokens, d)?;
        x = ctx.gated_residual(x, o, cond["gate_attn"])?;

        // cross-attention over text tokens, plain residual
        let q = ctx.linear(x, &format!("{p}.cross.q"))?;
        let k = ctx.linear(y_embed, &format!("{p}.cross.k"))?;
        let v = ctx.linear(y_embed, &format!("{p}.cross.v"))?;
        let a = ctx.tape.attention(q, k, v, tokens, spec.text_tokens, d)?;
        let o = ctx.linear(a, &format!("{p}.cross.o"))?;
        x = ctx.tape.add(x, o)?;

        let hh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let hm = ctx.modulate(hh, cond["scale_mlp"], cond["shift_mlp"])?;
        let h = ctx.mlp(hm, &format!("{p}.mlp"))?;
        x = ctx.gated_residual(x, h, cond["gate_mlp"])?;
        probes.push((p, x));
    }

    // final layer: learnable table + shared time-derived shift/scale
    let shift_t = ctx.linear(t_silu, "final.tadaln.shift")?;
    let scale_t = ctx.linear(t_silu, "final.tadaln.scale")?;
    let shift_tab = ctx.id("final.table.shift")?;
    let scale_tab = ctx.id("final.table.scale")?;
    let shift_f = ctx.tape.add_bcast_rows(shift_t, shift_tab)?;
    let scale_f = ctx.tape.add_bcast_rows(scale_t, scale_tab)?;
    let zh = ctx.tape.layer_norm_nolearn(x, eps)?;
    let zm = ctx.modulate(zh, scale_f, shift_f)?;
    let pred = ctx.linear(zm, "final.proj")?;
    probes.push((String::from("final"), pred));
    Ok(ForwardOutput { pred, probes })
}

fn forward_uvit<R: Real>(model: &Model<R>, ctx: &mut Ctx<'_, R>, input: &ForwardInput<R>) -> Result<ForwardOutput> {
    let spec = &model.spec;
    let (patches, d, eps) = (spec.tokens(), spec.widths.head_dim, R::from_f64(spec.ln_eps));
    let mut probes = Vec::new();

    let (x_patches, t_embed) = stem(model, ctx, input)?;
    let y_embed = label_embed(ctx, &input.labels, spec.num_classes)?;

    // timestep and class ride along as two extra tokens per sample
    let cond_tok = ctx.tape.concat_tokens(t_embed, y_embed, 1, 1)?;
    let mut x = ctx.tape.concat_tokens(cond_tok, x_patches, 2, patches)?;
    let tokens = patches + 2;
    probes.push((String::from("embed"), x));

    let half = spec.depth / 2;
    let mut skips: Vec<TensorId> = Vec::new();

    for i in 0..spec.depth {
        // merge the long skip before each block of the second half
        if i >= spec.depth - half {
            let j = spec.depth - 1 - i; // pairs block i with stored entry j
            let skip = skips[j];
            let p = format!("skip{}", i - (spec.depth - half));
            let wm = ctx.id(&format!("{p}.main.w"))?;
            let ws = ctx.id(&format!("{p}.skip.w"))?;
            let b = ctx.id(&format!("{p}.b"))?;
            let main_part = ctx.tape.matmul(x, wm)?;
            let skip_part = ctx.tape.matmul(skip, ws)?;
            let merged = ctx.tape.add(main_part, skip_part)?;
            x = ctx.tape.add_bcast_rows(merged, b)?;
        } else {
            skips.push(x);
        }

        let p = format!("block{i}");
        let xh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let o = ctx.self_attn(xh, &format!("{p}.attn"), tokens, d)?;
        x = ctx.tape.add(x, o)?;
        let hh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let h = ctx.mlp(hh, &format!("{p}.mlp"))?;
        x = ctx.tape.add(x, h)?;
        probes.push((p, x));
    }

    // readout over patch tokens only
    let xp = ctx.tape.slice_tokens(x, 2, patches, false)?;
    let zh = ctx.tape.layer_norm_nolearn(xp, eps)?;
    let pred = ctx.linear(zh, "final.proj")?;
    probes.push((String::from("final"), pred));
    Ok(ForwardOutput { pred, probes })
}

/// One stream's modulated, RMS-normalized q/k/v plus its attention gate.
fn mmdit_qkv<R: Real>(
    ctx: &mut Ctx<'_, R>,
    pfx: &str,
    s: TensorId,
    c_silu: TensorId,
    head_dim: usize,
    eps: R,
    qk_eps: R,
) -> Result<(TensorId, TensorId, TensorId, TensorId)> {
    let (gate, shift, scale) = ctx.cond3(c_silu, &format!("{pfx}.adaln"), "attn")?;
    let sh = ctx.tape.layer_norm_nolearn(s, eps)?;
    let sm = ctx.modulate(sh, scale, shift)?;
    let q = ctx.linear(sm, &format!("{pfx}.attn.q"))?;
    let k = ctx.linear(sm, &format!("{pfx}.attn.k"))?;
    let v = ctx.linear(sm, &format!("{pfx}.attn.v"))?;
    let qn = ctx.tape.rms_norm_groups(q, head_dim, qk_eps)?;
    let qg = ctx.id(&format!("{pfx}.attn.qgain"))?;
    let q = ctx.tape.mul_bcast_rows(qn, qg)?;
    let kn = ctx.tape.rms_norm_groups(k, head_dim, qk_eps)?;
    let kg = ctx.id(&format!("{pfx}.attn.kgain"))?;
    let k = ctx.tape.mul_bcast_rows(kn, kg)?;
    Ok((q, k, v, gate))
}

fn forward_mmdit<R: Real>(model: &Model<R>, ctx: &mut Ctx<'_, R>, input: &ForwardInput<R>) -> Result<ForwardOutput> {
    let spec = &model.spec;
    let (tx, d, eps) = (spec.tokens(), spec.widths.head_dim, R::from_f64(spec.ln_eps));
    let tc = spec.text_tokens;
    let qk_eps = R::from_f64(spec.qk_eps);
    let mut probes = Vec::new();

    let (mut x, t_embed) = stem(model, ctx, input)?;
    let y_embed = label_embed(ctx, &input.labels, spec.num_classes)?;
    let cond = ctx.tape.add(t_embed, y_embed)?;
    let c_silu = ctx.tape.silu(cond)?;
    probes.push((String::from("embed"), x));

    let mut c = if tc > 0 {
        let text = ctx.tape.leaf(model.text_features(&input.labels)?);
        Some(ctx.linear(text, "text.proj")?)
    } else {
        None
    };

    for i in 0..spec.depth {
        let p = format!("block{i}");

        let (qx, kx, vx, gate_x) = mmdit_qkv(ctx, &format!("{p}.x"), x, c_silu, d, eps, qk_eps)?;

        let (ax, ac_gate) = if let Some(cs) = c {
            let (qc, kc, vc, gate_c) = mmdit_qkv(ctx, &format!("{p}.c"), cs, c_silu, d, eps, qk_eps)?;
            // joint attention over the concatenated token sequence
            let q = ctx.tape.concat_tokens(qx, qc, tx, tc)?;
            let k = ctx.tape.concat_tokens(kx, kc, tx, tc)?;
            let v = ctx.tape.concat_tokens(vx, vc, tx, tc)?;
            let a = ctx.tape.attention(q, k, v, tx + tc, tx + tc, d)?;
            let ax = ctx.tape.slice_tokens(a, tx, tc, true)?;
            let ac = ctx.tape.slice_tokens(a, tx, tc, false)?;
            (ax, Some((ac, gate_c)))
        } else {
            let a = ctx.tape.attention(qx, kx, vx, tx, tx, d)?;
            (a, None)
        };

        let ox = ctx.linear(ax, &format!("{p}.x.attn.o"))?;
        x = ctx.gated_residual(x, ox, gate_x)?;
        let (gate_xm, shift_xm, scale_xm) = ctx.cond3(c_silu, &format!("{p}.x.adaln"), "mlp")?;
        let xh = ctx.tape.layer_norm_nolearn(x, eps)?;
        let xm = ctx.modulate(xh, scale_xm, shift_xm)?;
        let hx = ctx.mlp(xm, &format!("{p}.x.mlp"))?;
        x = ctx.gated_residual(x, hx, gate_xm)?;
        probes.push((format!("{p}.x"), x));

        if let (Some(cs), Some((ac, gate_c))) = (c, ac_gate) {
            let oc = ctx.linear(ac, &format!("{p}.c.attn.o"))?;
            let mut cnew = ctx.gated_residual(cs, oc, gate_c)?;
            let (gate_cm, shift_cm, scale_cm) = ctx.cond3(c_silu, &format!("{p}.c.adaln"), "mlp")?;
            let ch = ctx.tape.layer_norm_nolearn(cnew, eps)?;
            let cm = ctx.modulate(ch, scale_cm, shift_cm)?;
            let hc = ctx.mlp(cm, &format!("{p}.c.mlp"))?;
            cnew = ctx.gated_residual(cnew, hc, gate_cm)?;
            probes.push((format!("{p}.c"), cnew));
            c = Some(cnew);
        }
    }

    let shift_f = ctx.linear(c_silu, "final.adaln.shift")?;
    let scale_f = ctx.linear(c_silu, "final.adaln.scale")?;
    let zh = ctx.tape.layer_norm_nolearn(x, eps)?;
    let zm = ctx.modulate(zh, scale_f, shift_f)?;
    let pred = ctx.linear(zm, "final.proj")?;
    probes.push((String::from("final"), pred));
    Ok(ForwardOutput { pred, probes })
}
