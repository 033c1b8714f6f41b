//! Diffusion-Transformer variants as role-tagged weight graphs with
//! executable forward passes.
//!
//! Four variants share one skeleton: patch embedding with a fixed
//! sin-cos positional table, a timestep embedder (frequency features
//! followed by a two-layer MLP), class/text conditioning, a stack of
//! attention blocks, and a final projection back to patch space.
//!
//! * `Dit` — gated adaLN conditioning: per-block maps produce gate,
//!   shift, and scale vectors from the condition.
//! * `PixArt` — one shared set of time-derived gate/shift/scale maps
//!   plus per-block learnable tables, and a cross-attention layer over
//!   text tokens.
//! * `UVit` — plain pre-LN blocks, timestep and class as extra tokens,
//!   long skip connections (concat-then-linear, decomposed into two
//!   matrices).
//! * `MmDit` — two parameter streams (image and text) with joint
//!   attention over the concatenated token sequence and RMS
//!   query/key normalization with learnable gains.

mod blocks;
mod embed;
pub mod simplified;

pub use embed::{freq_features, pos_embed_2d};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mup::{classify_role, ParamPlan, PlannedWeight, WeightRole, WidthSpec};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::{init_normal, Tape, Tensor, TensorId};

/// Fixed seed for the synthetic text-token table so the conditioning
/// code is identical across training seeds.
const TEXT_TABLE_SEED: u64 = 0x7e87_7ab1;

/// Architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Dit,
    PixArt,
    UVit,
    MmDit,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Dit => "dit",
            Variant::PixArt => "pixart",
            Variant::UVit => "uvit",
            Variant::MmDit => "mmdit",
        }
    }
}

/// Image-to-token geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
}

impl PatchSpec {
    pub fn tokens_per_side(&self) -> usize {
        self.image_side / self.patch_side
    }
    pub fn tokens(&self) -> usize {
        let t = self.tokens_per_side();
        t * t
    }
    /// Flattened patch dimension (the model's input/output channel count).
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
    pub fn image_numel(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }
}

/// How conditioning maps are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdalnInit {
    /// Gate and shift maps start at zero (branches disabled), scale maps
    /// start at their Gaussian init so modulation is non-degenerate.
    ZeroGateShift,
    /// All conditioning maps and tables start at zero.
    ZeroAll,
    /// Everything starts at its Gaussian init.
    Standard,
}

/// Full architecture description.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub depth: usize,
    pub widths: WidthSpec,
    pub patch: PatchSpec,
    pub num_classes: usize,
    /// Synthetic text tokens per sample (PixArt / MMDiT conditioning).
    pub text_tokens: usize,
    /// Width-independent text feature dimension.
    pub text_dim: usize,
    pub mlp_ratio: f64,
    /// Frequency-feature size of the timestep embedder (even).
    pub freq_dim: usize,
    pub ln_eps: f64,
    pub qk_eps: f64,
    pub adaln_init: AdalnInit,
}

impl ModelSpec {
    /// Desk-scale defaults: 8x8 single-channel images, patch 4, depth 2.
    pub fn toy(variant: Variant, n_base: usize, n: usize, head_dim: usize) -> Result<Self> {
        let spec = ModelSpec {
            variant,
            depth: 2,
            widths: WidthSpec::new(n_base, n, head_dim)?,
            patch: PatchSpec { image_side: 8, patch_side: 4, channels: 1 },
            num_classes: 4,
            text_tokens: match variant {
                Variant::PixArt | Variant::MmDit => 2,
                _ => 0,
            },
            text_dim: 16,
            mlp_ratio: 4.0,
            freq_dim: 16,
            ln_eps: 1e-6,
            qk_eps: 1e-6,
            adaln_init: AdalnInit::ZeroGateShift,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tokens(&self) -> usize {
        self.patch.tokens()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.widths.n as f64) as usize
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.patch;
        if p.patch_side == 0 || p.image_side % p.patch_side != 0 {
            return Err(Error::Config(alloc::format!(
                "image_side {} not divisible by patch_side {}",
                p.image_side,
                p.patch_side
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config(String::from("depth must be at least 1")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config(String::from("num_classes must be at least 1")));
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            return Err(Error::Config(String::from("freq_dim must be even and >= 2")));
        }
        if self.widths.n % 4 != 0 {
            return Err(Error::Config(String::from("width must be divisible by 4 for the positional table")));
        }
        if self.mlp_hidden() == 0 {
            return Err(Error::Config(String::from("mlp_ratio too small")));
        }
        if matches!(self.variant, Variant::PixArt) && self.text_tokens == 0 {
            return Err(Error::Config(String::from("pixart requires at least one text token")));
        }
        Ok(())
    }
}

/// How a weight's initial values are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Gaussian with the plan's init std.
    Gaussian,
    Zeros,
    Ones,
}

/// One named trainable weight.
#[derive(Clone, Debug)]
pub struct WeightSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: WeightRole,
    pub fan_in: usize,
    pub fan_out: usize,
    pub init: InitKind,
}

impl PlannedWeight for WeightSpec {
    fn name(&self) -> &str {
        &self.name
    }
    fn role(&self) -> WeightRole {
        self.role
    }
    fn fan_in(&self) -> usize {
        self.fan_in
    }
}

/// Ordered collection of all trainable weights of one model.
#[derive(Clone, Debug, Default)]
pub struct WeightGraph {
    pub weights: Vec<WeightSpec>,
}

impl WeightGraph {
    pub fn get(&self, name: &str) -> Option<&WeightSpec> {
        self.weights.iter().find(|w| w.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.weights.iter().map(|w| w.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Collects weights during graph construction.
struct GraphBuilder {
    weights: Vec<WeightSpec>,
    adaln_init: AdalnInit,
}

impl GraphBuilder {
    fn new(adaln_init: AdalnInit) -> Self {
        GraphBuilder { weights: Vec::new(), adaln_init }
    }

    /// `in_like`/`out_like`: whether the fan dimension scales with width.
    fn push(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        in_like: bool,
        fan_out: usize,
        out_like: bool,
        init: InitKind,
    ) {
        let role = classify_role(in_like, out_like);
        self.weights.push(WeightSpec { name, shape, role, fan_in, fan_out, init });
    }

    /// Linear `w` of shape `[fan_in, fan_out]` plus a zero bias of
    /// `[fan_out]`.
    fn linear(&mut self, prefix: &str, fan_in: usize, in_like: bool, fan_out: usize, out_like: bool) {
        self.linear_init(prefix, fan_in, in_like, fan_out, out_like, InitKind::Gaussian)
    }

    fn linear_init(
        &mut self,
        prefix: &str,
        fan_in: usize,
        in_like: bool,
        fan_out: usize,
        out_like: bool,
        init: InitKind,
    ) {
        self.push(alloc::format!("{prefix}.w"), alloc::vec![fan_in, fan_out], fan_in, in_like, fan_out, out_like, init);
        self.push(alloc::format!("{prefix}.b"), alloc::vec![fan_out], 1, false, fan_out, out_like, InitKind::Zeros);
    }

    /// Condition map: zero or Gaussian depending on the init policy and
    /// whether this map produces a gate/shift (suppressible) or a scale.
    fn cond_map(&mut self, prefix: &str, n: usize, is_scale: bool) {
        let init = match (self.adaln_init, is_scale) {
            (AdalnInit::Standard, _) => InitKind::Gaussian,
            (AdalnInit::ZeroAll, _) => InitKind::Zeros,
            (AdalnInit::ZeroGateShift, true) => InitKind::Gaussian,
            (AdalnInit::ZeroGateShift, false) => InitKind::Zeros,
        };
        self.linear_init(prefix, n, true, n, true, init);
    }

    /// The six per-branch condition maps (gate/shift/scale for the
    /// attention and MLP branches) under `prefix`.
    fn adaln6(&mut self, prefix: &str, n: usize) {
        for branch in ["attn", "mlp"] {
            self.cond_map(&alloc::format!("{prefix}.gate_{branch}"), n, false);
            self.cond_map(&alloc::format!("{prefix}.shift_{branch}"), n, false);
            self.cond_map(&alloc::format!("{prefix}.scale_{branch}"), n, true);
        }
    }

    /// Self-attention projections (q, k, v, o), all hidden.
    fn attn(&mut self, prefix: &str, n: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&alloc::format!("{prefix}.{p}"), n, true, n, true);
        }
    }

    fn mlp(&mut self, prefix: &str, n: usize, hidden: usize) {
        self.linear(&alloc::format!("{prefix}.fc1"), n, true, hidden, true);
        self.linear(&alloc::format!("{prefix}.fc2"), hidden, true, n, true);
    }

    /// Per-block learnable n-vector table entry (additive to a shared map).
    fn table(&mut self, name: String, n: usize) {
        let init = match self.adaln_init {
            AdalnInit::Standard => InitKind::Gaussian,
            _ => InitKind::Zeros,
        };
        self.push(name, alloc::vec![n], 1, false, n, true, init);
    }
}

/// Build the weight inventory for a spec.
pub fn build_graph(spec: &ModelSpec) -> Result<WeightGraph> {
    spec.validate()?;
    let n = spec.widths.n;
    let pd = spec.patch.patch_dim();
    let hidden = spec.mlp_hidden();
    let mut b = GraphBuilder::new(spec.adaln_init);

    // shared embedders
    b.linear("patch", pd, false, n, true);
    b.linear("temb.fc1", spec.freq_dim, false, n, true);
    b.linear("temb.fc2", n, true, n, true);
    match spec.variant {
        Variant::Dit | Variant::UVit | Variant::MmDit => {
            b.push(String::from("label.table"), alloc::vec![spec.num_classes, n], 1, false, n, true, InitKind::Gaussian);
        }
        Variant::PixArt => {}
    }
    if matches!(spec.variant, Variant::PixArt | Variant::MmDit) && spec.text_tokens > 0 {
        b.linear("text.proj", spec.text_dim, false, n, true);
    }

    match spec.variant {
        Variant::Dit => {
            for i in 0..spec.depth {
                let p = alloc::format!("block{i}");
                b.adaln6(&alloc::format!("{p}.adaln"), n);
                b.attn(&alloc::format!("{p}.attn"), n);
                b.mlp(&alloc::format!("{p}.mlp"), n, hidden);
            }
            b.cond_map("final.adaln.shift", n, false);
            b.cond_map("final.adaln.scale", n, true);
        }
        Variant::PixArt => {
            // shared time-derived maps, one set for all blocks
            b.adaln6("tadaln", n);
            for i in 0..spec.depth {
                let p = alloc::format!("block{i}");
                for branch in ["attn", "mlp"] {
                    for kind in ["gate", "shift", "scale"] {
                        b.table(alloc::format!("{p}.table.{kind}_{branch}"), n);
                    }
                }
                b.attn(&alloc::format!("{p}.attn"), n);
                for c in ["q", "k", "v", "o"] {
                    b.linear(&alloc::format!("{p}.cross.{c}"), n, true, n, true);
                }
                b.mlp(&alloc::format!("{p}.mlp"), n, hidden);
            }
            b.table(String::from("final.table.shift"), n);
            b.table(String::from("final.table.scale"), n);
            b.cond_map("final.tadaln.shift", n, false);
            b.cond_map("final.tadaln.scale", n, true);
        }
        Variant::UVit => {
            for i in 0..spec.depth {
                let p = alloc::format!("block{i}");
                b.attn(&alloc::format!("{p}.attn"), n);
                b.mlp(&alloc::format!("{p}.mlp"), n, hidden);
            }
            // one skip merge before each block in the second half
            for j in 0..spec.depth / 2 {
                let p = alloc::format!("skip{j}");
                b.push(alloc::format!("{p}.main.w"), alloc::vec![n, n], n, true, n, true, InitKind::Gaussian);
                b.push(alloc::format!("{p}.skip.w"), alloc::vec![n, n], n, true, n, true, InitKind::Gaussian);
                b.push(alloc::format!("{p}.b"), alloc::vec![n], 1, false, n, true, InitKind::Zeros);
            }
        }
        Variant::MmDit => {
            for i in 0..spec.depth {
                let p = alloc::format!("block{i}");
                for stream in ["x", "c"] {
                    b.adaln6(&alloc::format!("{p}.{stream}.adaln"), n);
                    for c in ["q", "k", "v"] {
                        b.linear(&alloc::format!("{p}.{stream}.attn.{c}"), n, true, n, true);
                    }
                    b.push(alloc::format!("{p}.{stream}.attn.qgain"), alloc::vec![n], 1, false, n, true, InitKind::Ones);
                    b.push(alloc::format!("{p}.{stream}.attn.kgain"), alloc::vec![n], 1, false, n, true, InitKind::Ones);
                    b.linear(&alloc::format!("{p}.{stream}.attn.o"), n, true, n, true);
                    b.mlp(&alloc::format!("{p}.{stream}.mlp"), n, hidden);
                }
            }
            b.cond_map("final.adaln.shift", n, false);
            b.cond_map("final.adaln.scale", n, true);
        }
    }

    // output head (shared shape across variants)
    b.push(String::from("final.proj.w"), alloc::vec![n, pd], n, true, pd, false, InitKind::Gaussian);
    b.push(String::from("final.proj.b"), alloc::vec![pd], 1, false, pd, false, InitKind::Zeros);

    // names must be unique
    let mut seen = BTreeMap::new();
    for w in &b.weights {
        if seen.insert(w.name.clone(), ()).is_some() {
            return Err(Error::Config(alloc::format!("duplicate weight name {}", w.name)));
        }
    }
    Ok(WeightGraph { weights: b.weights })
}

/// Named weight values plus their resolved multipliers.
pub struct WeightStore<R> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<R>>,
    pub mults: Vec<f64>,
    index: BTreeMap<String, usize>,
}

impl<R: Real> WeightStore<R> {
    /// Initialize all weights from the plan: Gaussian weights use the
    /// plan's init std with a per-name substream of `seed`; structured
    /// weights (zeros, ones) ignore the std.
    pub fn init(graph: &WeightGraph, plan: &ParamPlan, seed: u64) -> Result<Self> {
        let mut names = Vec::with_capacity(graph.len());
        let mut tensors = Vec::with_capacity(graph.len());
        let mut mults = Vec::with_capacity(graph.len());
        let mut index = BTreeMap::new();
        for w in &graph.weights {
            let entry = plan
                .get(&w.name)
                .ok_or_else(|| Error::Config(alloc::format!("weight {} missing from plan", w.name)))?;
            let tensor = match w.init {
                InitKind::Gaussian => {
                    let mut rng = SeededRng::new(seed, &w.name);
                    init_normal(&w.shape, entry.init_std, &mut rng)?
                }
                InitKind::Zeros => Tensor::zeros(w.shape.clone()),
                InitKind::Ones => {
                    let numel: usize = w.shape.iter().product();
                    Tensor::from_vec(w.shape.clone(), alloc::vec![R::ONE; numel])?
                }
            };
            index.insert(w.name.clone(), tensors.len());
            names.push(w.name.clone());
            tensors.push(tensor);
            mults.push(entry.mult);
        }
        Ok(WeightStore { names, tensors, mults, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }
}

/// Leaf and effective (multiplier-applied) tape ids for every weight.
pub struct BoundWeights {
    pub leaf: BTreeMap<String, TensorId>,
    pub eff: BTreeMap<String, TensorId>,
}

/// Insert every weight as a tracked leaf and apply its multiplier.
pub fn bind_weights<R: Real>(tape: &mut Tape<R>, store: &WeightStore<R>) -> Result<BoundWeights> {
    let mut leaf = BTreeMap::new();
    let mut eff = BTreeMap::new();
    for (i, name) in store.names.iter().enumerate() {
        let id = tape.leaf(store.tensors[i].clone().with_grad());
        let e = if store.mults[i] != 1.0 {
            tape.scale(id, R::from_f64(store.mults[i]))?
        } else {
            id
        };
        leaf.insert(name.clone(), id);
        eff.insert(name.clone(), e);
    }
    Ok(BoundWeights { leaf, eff })
}

/// Inputs to one forward pass, already in token layout.
pub struct ForwardInput<R> {
    /// `[batch*tokens, patch_dim]` corrupted-image patches.
    pub x_tokens: Tensor<R>,
    /// `[batch, freq_dim]` timestep frequency features.
    pub t_feats: Tensor<R>,
    /// Class index per sample.
    pub labels: Vec<usize>,
}

/// Forward result: prediction plus named activation probes.
pub struct ForwardOutput {
    /// `[batch*tokens, patch_dim]` prediction in patch space.
    pub pred: TensorId,
    pub probes: Vec<(String, TensorId)>,
}

/// A spec bound to its graph and non-trainable constants.
pub struct Model<R> {
    pub spec: ModelSpec,
    pub graph: WeightGraph,
    /// `[tokens, n]` fixed sin-cos positional table.
    pos: Tensor<R>,
    /// `[num_classes, text_tokens*text_dim]` fixed random text features.
    text_table: Option<Tensor<R>>,
}

impl<R: Real> Model<R> {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let graph = build_graph(&spec)?;
        let side = spec.patch.tokens_per_side();
        let pos64 = pos_embed_2d(side, spec.widths.n);
        let pos = Tensor::from_vec(
            alloc::vec![spec.tokens(), spec.widths.n],
            pos64.into_iter().map(R::from_f64).collect(),
        )?;
        let text_table = if matches!(spec.variant, Variant::PixArt | Variant::MmDit) && spec.text_tokens > 0 {
            let mut rng = SeededRng::new(TEXT_TABLE_SEED, "const/text_table");
            Some(init_normal(
                &[spec.num_classes, spec.text_tokens * spec.text_dim],
                1.0,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model { spec, graph, pos, text_table })
    }

    /// Text token features for a batch of labels: `[batch*text_tokens,
    /// text_dim]`.
    pub fn text_features(&self, labels: &[usize]) -> Result<Tensor<R>> {
        let table = self
            .text_table
            .as_ref()
            .ok_or_else(|| Error::Config(String::from("variant has no text conditioning")))?;
        let tt = self.spec.text_tokens;
        let td = self.spec.text_dim;
        let mut data = Vec::with_capacity(labels.len() * tt * td);
        for &y in labels {
            if y >= self.spec.num_classes {
                return Err(Error::Config(alloc::format!("label {y} out of range")));
            }
            data.extend_from_slice(&table.data[y * tt * td..(y + 1) * tt * td]);
        }
        Tensor::from_vec(alloc::vec![labels.len() * tt, td], data)
    }

    pub fn positional(&self) -> &Tensor<R> {
        &self.pos
    }

    /// Run the variant's forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        weights: &BTreeMap<String, TensorId>,
        input: &ForwardInput<R>,
    ) -> Result<ForwardOutput> {
        blocks::forward(self, tape, weights, input)
    }
}

#[cfg(test)]
mod tests;
