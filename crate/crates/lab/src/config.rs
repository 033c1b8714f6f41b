//! Declarative experiment configuration (TOML) and canonical hashing.
//!
//! Unknown keys are rejected. The resolved config hashes over a
//! canonicalized rendering (sorted keys, normalized scalars) so
//! semantically identical documents hash identically regardless of key
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mupdit_core::arch::{AdalnInit, ModelSpec, PatchSpec, Variant};
use mupdit_core::mup::{BaseHps, CostInputs, CostPhase, Scheme, WidthSpec};
use mupdit_core::task::{ScheduleKind, ToyDataset, TrainSpec};
use mupdit_core::transfer::{Axis, GridSpec, HpName, SearchDim, SearchSpec};

use crate::LabError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub mup: MupSection,
    #[serde(default)]
    pub base_hps: BaseHpsSection,
    #[serde(default)]
    pub task: TaskSection,
    pub run: RunSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub search: Option<SearchSection>,
    #[serde(default)]
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub coordcheck: Option<CoordSection>,
    #[serde(default)]
    pub cost: Option<CostSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_image_side")]
    pub image_side: usize,
    #[serde(default = "default_patch_side")]
    pub patch_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub text_tokens: Option<usize>,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_freq_dim")]
    pub freq_dim: usize,
}

fn default_depth() -> usize {
    2
}
fn default_head_dim() -> usize {
    8
}
fn default_image_side() -> usize {
    8
}
fn default_patch_side() -> usize {
    4
}
fn default_channels() -> usize {
    1
}
fn default_num_classes() -> usize {
    4
}
fn default_text_dim() -> usize {
    16
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_freq_dim() -> usize {
    16
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MupSection {
    pub scheme: String,
    pub n_base: usize,
    #[serde(default = "default_true")]
    pub sigma_out_zero: bool,
    #[serde(default = "default_true")]
    pub adaln_zero_init: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BaseHpsSection {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_one")]
    pub sigma: f64,
    #[serde(default = "default_one")]
    pub phi: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub warmup_steps: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub loss_weights: BTreeMap<String, f64>,
}

fn default_eta() -> f64 {
    0.00390625
}
fn default_one() -> f64 {
    1.0
}

impl Default for BaseHpsSection {
    fn default() -> Self {
        BaseHpsSection {
            eta: default_eta(),
            sigma: 1.0,
            phi: 1.0,
            grad_clip: None,
            warmup_steps: 0,
            weight_decay: 0.0,
            loss_weights: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default = "default_blob_sigma")]
    pub blob_sigma: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_schedule() -> String {
    "ddpm".into()
}
fn default_blob_sigma() -> f64 {
    1.4
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_jitter() -> f64 {
    0.5
}
fn default_divergence_factor() -> f64 {
    10.0
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            schedule: default_schedule(),
            blob_sigma: default_blob_sigma(),
            noise_std: default_noise_std(),
            jitter: default_jitter(),
            divergence_factor: default_divergence_factor(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: u64,
    pub batch: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_precision")]
    pub precision: u8,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_precision() -> u8 {
    64
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub points: Vec<u64>,
    pub hp: String,
    pub values: Vec<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: usize,
}

fn default_tolerance() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub n_trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub hp: Vec<SearchHpSection>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SearchHpSection {
    pub name: String,
    pub low: f64,
    pub high: f64,
    #[serde(default = "default_scale")]
    pub scale: String,
    #[serde(default)]
    pub integer: bool,
}

fn default_scale() -> String {
    "linear".into()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub target_width: usize,
    pub target_batch: usize,
    pub target_steps: u64,
    /// `sweep` or `search`: where the proxy optimum comes from.
    #[serde(default = "default_source")]
    pub source: String,
}

fn default_source() -> String {
    "sweep".into()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CoordSection {
    pub widths: Vec<usize>,
    #[serde(default = "default_coord_steps")]
    pub steps: u64,
    #[serde(default = "default_coord_threshold")]
    pub threshold: f64,
    #[serde(default = "default_coord_batch")]
    pub batch: usize,
}

fn default_coord_steps() -> u64 {
    10
}
fn default_coord_threshold() -> f64 {
    4.0
}
fn default_coord_batch() -> usize {
    32
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Single-phase epoch form.
    #[serde(default)]
    pub trials: Option<f64>,
    #[serde(default)]
    pub s_proxy: Option<f64>,
    #[serde(default)]
    pub e_proxy: Option<f64>,
    #[serde(default)]
    pub s_target: Option<f64>,
    #[serde(default)]
    pub e_target: Option<f64>,
    /// Iteration form extras.
    #[serde(default)]
    pub b_proxy: Option<f64>,
    #[serde(default)]
    pub t_proxy: Option<f64>,
    #[serde(default)]
    pub b_target: Option<f64>,
    #[serde(default)]
    pub t_target: Option<f64>,
    /// Summed form: `[[trials, params, units], ...]` vs `target = [params, units]`.
    #[serde(default)]
    pub phases: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub target: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_out_dir() }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| LabError::Config(format!("config parse error: {e}")))
    }

    pub fn variant(&self) -> Result<Variant, LabError> {
        Ok(match self.model.variant.as_str() {
            "dit" => Variant::Dit,
            "pixart" => Variant::PixArt,
            "uvit" => Variant::UVit,
            "mmdit" => Variant::MmDit,
            other => return Err(LabError::Config(format!("unknown variant {other}"))),
        })
    }

    pub fn scheme(&self) -> Result<Scheme, LabError> {
        Ok(match self.mup.scheme.as_str() {
            "mup" => Scheme::Mup,
            "sp" => Scheme::Sp,
            other => return Err(LabError::Config(format!("unknown scheme {other}"))),
        })
    }

    pub fn schedule(&self) -> Result<ScheduleKind, LabError> {
        Ok(match self.task.schedule.as_str() {
            "ddpm" => ScheduleKind::Ddpm,
            "flow" | "flow_matching" => ScheduleKind::FlowMatching,
            other => return Err(LabError::Config(format!("unknown schedule {other}"))),
        })
    }

    /// Model spec at an explicit width (sweeps substitute the axis).
    pub fn model_spec_at(&self, width: usize) -> Result<ModelSpec, LabError> {
        let variant = self.variant()?;
        let text_tokens = self.model.text_tokens.unwrap_or(match variant {
            Variant::PixArt | Variant::MmDit => 2,
            _ => 0,
        });
        let spec = ModelSpec {
            variant,
            depth: self.model.depth,
            widths: WidthSpec::new(self.mup.n_base, width, self.model.head_dim)
                .map_err(LabError::from_core)?,
            patch: PatchSpec {
                image_side: self.model.image_side,
                patch_side: self.model.patch_side,
                channels: self.model.channels,
            },
            num_classes: self.model.num_classes,
            text_tokens,
            text_dim: self.model.text_dim,
            mlp_ratio: self.model.mlp_ratio,
            freq_dim: self.model.freq_dim,
            ln_eps: 1e-6,
            qk_eps: 1e-6,
            adaln_init: if self.mup.adaln_zero_init {
                AdalnInit::ZeroGateShift
            } else {
                AdalnInit::Standard
            },
        };
        spec.validate().map_err(LabError::from_core)?;
        Ok(spec)
    }

    pub fn base_hps(&self) -> BaseHps {
        let b = &self.base_hps;
        BaseHps {
            eta: b.eta,
            sigma: b.sigma,
            phi: b.phi,
            sigma_out: if self.mup.sigma_out_zero { 0.0 } else { b.sigma },
            grad_clip: b.grad_clip,
            warmup_steps: b.warmup_steps,
            weight_decay: b.weight_decay,
            loss_weights: b.loss_weights.clone(),
        }
    }

    pub fn dataset(&self) -> ToyDataset {
        ToyDataset {
            image_side: self.model.image_side,
            channels: self.model.channels,
            num_classes: self.model.num_classes,
            blob_sigma: self.task.blob_sigma,
            noise_std: self.task.noise_std,
            jitter: self.task.jitter,
        }
    }

    /// Fully resolved training spec for one trial.
    pub fn train_spec(
        &self,
        width: usize,
        base: BaseHps,
        steps: u64,
        batch: usize,
        seed: u64,
    ) -> Result<TrainSpec, LabError> {
        Ok(TrainSpec {
            model: self.model_spec_at(width)?,
            scheme: self.scheme()?,
            base,
            schedule: self.schedule()?,
            dataset: self.dataset(),
            steps,
            batch,
            seed,
            divergence_factor: self.task.divergence_factor,
        })
    }

    pub fn grid_spec(&self) -> Result<GridSpec, LabError> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| LabError::Config("config has no [sweep] section".into()))?;
        let axis = match s.axis.as_str() {
            "width" => Axis::Width,
            "batch" => Axis::Batch,
            "steps" => Axis::Steps,
            other => return Err(LabError::Config(format!("unknown sweep axis {other}"))),
        };
        let grid = GridSpec {
            axis,
            points: s.points.clone(),
            hp: HpName::parse(&s.hp).map_err(LabError::from_core)?,
            values: s.values.clone(),
            seeds: self.run.seeds.clone(),
            tolerance: s.tolerance,
        };
        grid.validate().map_err(LabError::from_core)?;
        Ok(grid)
    }

    pub fn search_spec(&self) -> Result<(SearchSpec, u64), LabError> {
        let s = self
            .search
            .as_ref()
            .ok_or_else(|| LabError::Config("config has no [search] section".into()))?;
        let dims = s
            .hp
            .iter()
            .map(|d| {
                Ok(SearchDim {
                    hp: HpName::parse(&d.name).map_err(LabError::from_core)?,
                    low: d.low,
                    high: d.high,
                    log_scale: match d.scale.as_str() {
                        "log" => true,
                        "linear" => false,
                        other => return Err(LabError::Config(format!("unknown scale {other}"))),
                    },
                    integer: d.integer,
                })
            })
            .collect::<Result<Vec<_>, LabError>>()?;
        let spec = SearchSpec { n_trials: s.n_trials, dims };
        spec.validate().map_err(LabError::from_core)?;
        Ok((spec, s.seed))
    }

    pub fn cost_inputs(&self) -> Result<CostInputs, LabError> {
        let c = self
            .cost
            .as_ref()
            .ok_or_else(|| LabError::Config("config has no [cost] section".into()))?;
        if let (Some(phases), Some(target)) = (&c.phases, &c.target) {
            return Ok(CostInputs {
                phases: phases
                    .iter()
                    .map(|p| CostPhase { trials: p[0], params: p[1], units: p[2] })
                    .collect(),
                target_params: target[0],
                target_units: target[1],
            });
        }
        let trials = c.trials.ok_or_else(|| LabError::Config("[cost] needs trials".into()))?;
        let s_proxy = c.s_proxy.ok_or_else(|| LabError::Config("[cost] needs s_proxy".into()))?;
        let s_target = c.s_target.ok_or_else(|| LabError::Config("[cost] needs s_target".into()))?;
        if let (Some(e_proxy), Some(e_target)) = (c.e_proxy, c.e_target) {
            return Ok(CostInputs::epochs(trials, s_proxy, e_proxy, s_target, e_target));
        }
        match (c.b_proxy, c.t_proxy, c.b_target, c.t_target) {
            (Some(bp), Some(tp), Some(bt), Some(tt)) => {
                Ok(CostInputs::iterations(trials, s_proxy, bp, tp, s_target, bt, tt))
            }
            _ => Err(LabError::Config(
                "[cost] needs either epoch inputs, iteration inputs, or phases".into(),
            )),
        }
    }
}

/// Canonical rendering of a TOML value: sorted keys, minimal scalars.
fn canonicalize(value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::String(s) => {
            out.push('"');
            out.push_str(&s.replace('\\', "\\\\").replace('"', "\\\""));
            out.push('"');
        }
        toml::Value::Integer(i) => out.push_str(&i.to_string()),
        toml::Value::Float(f) => out.push_str(&format!("{f}")),
        toml::Value::Boolean(b) => out.push_str(if *b { "true" } else { "false" }),
        toml::Value::Datetime(d) => out.push_str(&d.to_string()),
        toml::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                canonicalize(item, out);
            }
            out.push(']');
        }
        toml::Value::Table(table) => {
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('"');
                out.push_str(k);
                out.push_str("\":");
                canonicalize(&table[*k as &str], out);
            }
            out.push('}');
        }
    }
}

fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Hash of a canonicalized TOML document.
pub fn config_hash_of_document(text: &str) -> Result<String, LabError> {
    let value: toml::Value =
        toml::from_str(text).map_err(|e| LabError::Config(format!("config parse error: {e}")))?;
    let mut canon = String::new();
    canonicalize(&value, &mut canon);
    Ok(sha256_hex(&canon))
}

/// Canonical descriptor of one resolved trial; hashing it keys the
/// trial log. The seed deliberately stays outside.
#[derive(Serialize)]
pub struct TrialDescriptor<'a> {
    pub variant: &'a str,
    pub depth: usize,
    pub width: usize,
    pub head_dim: usize,
    pub n_base: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
    pub mlp_ratio: f64,
    pub freq_dim: usize,
    pub scheme: &'a str,
    pub sigma_out_zero: bool,
    pub adaln_zero_init: bool,
    pub eta: f64,
    pub sigma: f64,
    pub phi: f64,
    pub grad_clip: Option<f64>,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub loss_weights: &'a BTreeMap<String, f64>,
    pub schedule: &'a str,
    pub blob_sigma: f64,
    pub noise_std: f64,
    pub jitter: f64,
    pub divergence_factor: f64,
    pub steps: u64,
    pub batch: usize,
    pub precision: u8,
}

/// Hash a resolved trial descriptor.
pub fn trial_hash(desc: &TrialDescriptor<'_>) -> String {
    let json = serde_json::to_string(desc).expect("descriptor serializes");
    sha256_hex(&json)
}
