//! Width-scaling rules: the abc table, weight roles, and plan
//! resolution.
//!
//! A weight's `(multiplier, init std, learning rate)` triple is derived
//! from its role and the active scheme. Under maximal-update scaling
//! the width ratio `r = n / n_base` substitutes for the raw width
//! wherever the two schemes differ: hidden rates shrink by `1/r`,
//! output multipliers shrink by `1/r`, and output weights initialize at
//! `sigma_out` (zero by default). Everything else — input weights,
//! scalar weights, and all global knobs (clipping, warmup, decay, loss
//! weights) — is width-invariant.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Weight categories by how fan-in/fan-out scale with width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum WeightRole {
    /// fan-in O(1), fan-out O(n): embeddings, gains, per-block tables, biases of width n.
    Input,
    /// fan-in O(n), fan-out O(n): the bulk of the network.
    Hidden,
    /// fan-in O(n), fan-out O(1): final projections.
    Output,
    /// fan-in O(1), fan-out O(1).
    Scalar,
}

impl WeightRole {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightRole::Input => "input",
            WeightRole::Hidden => "hidden",
            WeightRole::Output => "output",
            WeightRole::Scalar => "scalar",
        }
    }
}

/// Parameterization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Standard practice: Kaiming-style init, width-independent rates.
    Sp,
    /// Maximal-update scaling.
    Mup,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Sp => "sp",
            Scheme::Mup => "mup",
        }
    }
}

/// One row of the abc table: exponents on width for the multiplier
/// (`a`), init std (`b`), and learning rate (`c`). Values are exact
/// rationals with denominator 2, stored in halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbcEntry {
    pub a_halves: i8,
    pub b_halves: i8,
    pub c_halves: i8,
}

impl AbcEntry {
    pub fn a(&self) -> f64 {
        self.a_halves as f64 / 2.0
    }
    pub fn b(&self) -> f64 {
        self.b_halves as f64 / 2.0
    }
    pub fn c(&self) -> f64 {
        self.c_halves as f64 / 2.0
    }
}

/// Exact abc exponents per role and scheme.
///
/// Adam/AdamW column set. The scheme-dependent cells are: output `a`
/// (1 vs 0), output `b` (0 vs 1/2), and hidden `c` (1 vs 0).
pub fn abc_lookup(role: WeightRole, scheme: Scheme) -> AbcEntry {
    let (a2, b2, c2) = match (role, scheme) {
        (WeightRole::Input, _) => (0, 0, 0),
        (WeightRole::Hidden, Scheme::Mup) => (0, 1, 2),
        (WeightRole::Hidden, Scheme::Sp) => (0, 1, 0),
        (WeightRole::Output, Scheme::Mup) => (2, 0, 0),
        (WeightRole::Output, Scheme::Sp) => (0, 1, 0),
        (WeightRole::Scalar, _) => (0, 0, 0),
    };
    AbcEntry { a_halves: a2, b_halves: b2, c_halves: c2 }
}

/// Role from whether the fan dimensions scale with width.
pub fn classify_role(fan_in_widthlike: bool, fan_out_widthlike: bool) -> WeightRole {
    match (fan_in_widthlike, fan_out_widthlike) {
        (false, true) => WeightRole::Input,
        (true, true) => WeightRole::Hidden,
        (true, false) => WeightRole::Output,
        (false, false) => WeightRole::Scalar,
    }
}

/// Width layout of one model: base width, actual width, and the head
/// split. Head dimension is held constant while scaling; the head count
/// carries the width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WidthSpec {
    pub n_base: usize,
    pub n: usize,
    pub head_dim: usize,
}

impl WidthSpec {
    pub fn new(n_base: usize, n: usize, head_dim: usize) -> Result<Self> {
        if n_base == 0 || n == 0 || head_dim == 0 {
            return Err(Error::Config(String::from("widths and head_dim must be positive")));
        }
        if n % head_dim != 0 {
            return Err(Error::Config(alloc::format!(
                "width {n} is not divisible by head_dim {head_dim}"
            )));
        }
        Ok(WidthSpec { n_base, n, head_dim })
    }

    pub fn n_heads(&self) -> usize {
        self.n / self.head_dim
    }

    /// Width ratio `n / n_base`.
    pub fn ratio(&self) -> f64 {
        self.n as f64 / self.n_base as f64
    }
}

/// Width-independent base hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseHps {
    /// Base learning rate.
    pub eta: f64,
    /// Base init std for Gaussian weights.
    pub sigma: f64,
    /// Base weight multiplier.
    pub phi: f64,
    /// Output-weight init std (zero by default: zero output init).
    pub sigma_out: f64,
    /// Global knobs, identical at every width.
    pub grad_clip: Option<f64>,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub loss_weights: BTreeMap<String, f64>,
}

impl Default for BaseHps {
    fn default() -> Self {
        BaseHps {
            eta: 0.00390625, // 2^-8
            sigma: 1.0,
            phi: 1.0,
            sigma_out: 0.0,
            grad_clip: None,
            warmup_steps: 0,
            weight_decay: 0.0,
            loss_weights: BTreeMap::new(),
        }
    }
}

/// Resolved `(multiplier, init std, learning rate, role)` for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanEntry {
    pub mult: f64,
    pub init_std: f64,
    pub lr: f64,
    pub role: WeightRole,
}

/// The per-weight resolution of base HPs at a concrete width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamPlan {
    pub entries: BTreeMap<String, PlanEntry>,
}

impl ParamPlan {
    pub fn get(&self, name: &str) -> Option<&PlanEntry> {
        self.entries.get(name)
    }

    pub fn lr_map(&self) -> BTreeMap<String, f64> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.lr)).collect()
    }
}

/// Minimal view of a weight needed to resolve its plan entry.
pub trait PlannedWeight {
    fn name(&self) -> &str;
    fn role(&self) -> WeightRole;
    /// True incoming dimension (used for 1/sqrt(fan_in) inits).
    fn fan_in(&self) -> usize;
}

/// Resolve a plan for every weight.
///
/// With `r = n / n_base`:
///
/// | role   | scheme | mult   | init std          | lr      |
/// |--------|--------|--------|-------------------|---------|
/// | input  | both   | phi    | sigma             | eta     |
/// | hidden | mup    | phi    | sigma/sqrt(fan_in)| eta / r |
/// | hidden | sp     | phi    | sigma/sqrt(fan_in)| eta     |
/// | output | mup    | phi / r| sigma_out         | eta     |
/// | output | sp     | phi    | sigma/sqrt(fan_in)| eta     |
/// | scalar | both   | phi    | sigma             | eta     |
pub fn make_plan<'a, W: PlannedWeight + 'a>(
    weights: impl Iterator<Item = &'a W>,
    widths: WidthSpec,
    base: &BaseHps,
    scheme: Scheme,
) -> Result<ParamPlan> {
    let r = widths.ratio();
    let mut entries = BTreeMap::new();
    for w in weights {
        let role = w.role();
        let fan_in = w.fan_in();
        if fan_in == 0 && matches!(role, WeightRole::Hidden | WeightRole::Output) {
            return Err(Error::Config(alloc::format!(
                "weight {} has role {:?} but zero fan-in",
                w.name(),
                role
            )));
        }
        let kaiming = base.sigma / crate::real::sqrt64(fan_in as f64);
        let entry = match (role, scheme) {
            (WeightRole::Input, _) | (WeightRole::Scalar, _) => {
                PlanEntry { mult: base.phi, init_std: base.sigma, lr: base.eta, role }
            }
            (WeightRole::Hidden, Scheme::Mup) => {
                PlanEntry { mult: base.phi, init_std: kaiming, lr: base.eta / r, role }
            }
            (WeightRole::Hidden, Scheme::Sp) => {
                PlanEntry { mult: base.phi, init_std: kaiming, lr: base.eta, role }
            }
            (WeightRole::Output, Scheme::Mup) => {
                PlanEntry { mult: base.phi / r, init_std: base.sigma_out, lr: base.eta, role }
            }
            (WeightRole::Output, Scheme::Sp) => {
                PlanEntry { mult: base.phi, init_std: kaiming, lr: base.eta, role }
            }
        };
        if entries.insert(String::from(w.name()), entry).is_some() {
            return Err(Error::Config(alloc::format!("duplicate weight name {}", w.name())));
        }
    }
    Ok(ParamPlan { entries })
}

/// Inputs for the tuning-cost ratio.
///
/// `phases` lists `(trials, params, units)` per search phase, where
/// `units` is whatever extent measure both sides share: epochs, steps,
/// or batch x steps. The target is `(params, units)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostInputs {
    pub phases: Vec<CostPhase>,
    pub target_params: f64,
    pub target_units: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostPhase {
    pub trials: f64,
    pub params: f64,
    pub units: f64,
}

impl CostInputs {
    /// Single-phase iteration form: `R S_p B_p T_p / (S_t B_t T_t)`.
    #[allow(clippy::too_many_arguments)]
    pub fn iterations(
        trials: f64,
        s_proxy: f64,
        b_proxy: f64,
        t_proxy: f64,
        s_target: f64,
        b_target: f64,
        t_target: f64,
    ) -> Self {
        CostInputs {
            phases: alloc::vec![CostPhase { trials, params: s_proxy, units: b_proxy * t_proxy }],
            target_params: s_target,
            target_units: b_target * t_target,
        }
    }

    /// Single-phase epoch form: `R S_p E_p / (S_t E_t)`.
    pub fn epochs(trials: f64, s_proxy: f64, e_proxy: f64, s_target: f64, e_target: f64) -> Self {
        CostInputs {
            phases: alloc::vec![CostPhase { trials, params: s_proxy, units: e_proxy }],
            target_params: s_target,
            target_units: e_target,
        }
    }
}

/// Ratio of total tuning cost to one pretraining run.
pub fn cost_ratio(inputs: &CostInputs) -> Result<f64> {
    let denom = inputs.target_params * inputs.target_units;
    if !(denom > 0.0) {
        return Err(Error::Config(String::from("cost ratio: target cost must be positive")));
    }
    let mut numer = 0.0;
    for p in &inputs.phases {
        if !(p.trials > 0.0 && p.params > 0.0 && p.units > 0.0) {
            return Err(Error::Config(String::from("cost ratio: all phase inputs must be positive")));
        }
        numer += p.trials * p.params * p.units;
    }
    Ok(numer / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_classification() {
        assert_eq!(classify_role(false, true), WeightRole::Input);
        assert_eq!(classify_role(true, true), WeightRole::Hidden);
        assert_eq!(classify_role(true, false), WeightRole::Output);
        assert_eq!(classify_role(false, false), WeightRole::Scalar);
    }

    #[test]
    fn abc_table_cells() {
        let e = abc_lookup(WeightRole::Output, Scheme::Mup);
        assert_eq!((e.a(), e.b(), e.c()), (1.0, 0.0, 0.0));
        let e = abc_lookup(WeightRole::Hidden, Scheme::Mup);
        assert_eq!((e.a(), e.b(), e.c()), (0.0, 0.5, 1.0));
        let e = abc_lookup(WeightRole::Hidden, Scheme::Sp);
        assert_eq!((e.a(), e.b(), e.c()), (0.0, 0.5, 0.0));
        let e = abc_lookup(WeightRole::Scalar, Scheme::Mup);
        assert_eq!((e.a(), e.b(), e.c()), (0.0, 0.0, 0.0));
    }

    struct W {
        name: &'static str,
        role: WeightRole,
        fan_in: usize,
    }
    impl PlannedWeight for W {
        fn name(&self) -> &str {
            self.name
        }
        fn role(&self) -> WeightRole {
            self.role
        }
        fn fan_in(&self) -> usize {
            self.fan_in
        }
    }

    #[test]
    fn hidden_lr_uses_width_ratio() {
        let ws = [W { name: "h", role: WeightRole::Hidden, fan_in: 1152 }];
        let widths = WidthSpec::new(288, 1152, 72).unwrap();
        let base = BaseHps { eta: 2f64.powi(-10), ..BaseHps::default() };
        let plan = make_plan(ws.iter(), widths, &base, Scheme::Mup).unwrap();
        assert_eq!(plan.get("h").unwrap().lr, 2f64.powi(-12));
    }

    #[test]
    fn output_zero_init_and_ratio_multiplier() {
        let ws = [W { name: "o", role: WeightRole::Output, fan_in: 128 }];
        let widths = WidthSpec::new(32, 128, 8).unwrap();
        let base = BaseHps::default();
        let plan = make_plan(ws.iter(), widths, &base, Scheme::Mup).unwrap();
        let e = plan.get("o").unwrap();
        assert_eq!(e.init_std, 0.0);
        assert_eq!(e.mult, 0.25);
        assert_eq!(e.lr, base.eta);
    }

    #[test]
    fn plans_coincide_at_base_width_modulo_sigma_out() {
        let ws = [
            W { name: "in", role: WeightRole::Input, fan_in: 16 },
            W { name: "h", role: WeightRole::Hidden, fan_in: 32 },
            W { name: "o", role: WeightRole::Output, fan_in: 32 },
            W { name: "s", role: WeightRole::Scalar, fan_in: 1 },
        ];
        let widths = WidthSpec::new(32, 32, 8).unwrap();
        let base = BaseHps::default();
        let mup = make_plan(ws.iter(), widths, &base, Scheme::Mup).unwrap();
        let sp = make_plan(ws.iter(), widths, &base, Scheme::Sp).unwrap();
        for name in ["in", "h", "s"] {
            assert_eq!(mup.get(name), sp.get(name), "{name}");
        }
        let (mo, so) = (mup.get("o").unwrap(), sp.get("o").unwrap());
        assert_eq!(mo.mult, so.mult);
        assert_eq!(mo.lr, so.lr);
        // only the output init differs, because sigma_out = 0
        assert_eq!(mo.init_std, 0.0);
        assert!(so.init_std > 0.0);
    }

    #[test]
    fn doubling_width_halves_hidden_lr_and_output_mult() {
        let ws = [
            W { name: "h", role: WeightRole::Hidden, fan_in: 64 },
            W { name: "o", role: WeightRole::Output, fan_in: 64 },
            W { name: "in", role: WeightRole::Input, fan_in: 4 },
        ];
        let base = BaseHps::default();
        let p1 = make_plan(ws.iter(), WidthSpec::new(32, 64, 8).unwrap(), &base, Scheme::Mup).unwrap();
        let p2 = make_plan(ws.iter(), WidthSpec::new(32, 128, 8).unwrap(), &base, Scheme::Mup).unwrap();
        assert_eq!(p2.get("h").unwrap().lr, p1.get("h").unwrap().lr / 2.0);
        assert_eq!(p2.get("o").unwrap().mult, p1.get("o").unwrap().mult / 2.0);
        assert_eq!(p2.get("in").unwrap(), p1.get("in").unwrap());
    }

    #[test]
    fn cost_ratio_epoch_form() {
        let inputs = CostInputs::epochs(5.0, 0.04, 5.0, 0.61, 30.0);
        let r = cost_ratio(&inputs).unwrap();
        assert!((r - 1.0 / 18.3).abs() < 1e-12);
        assert!((r - 0.0546448087).abs() < 1e-9);
    }

    #[test]
    fn cost_ratio_two_phase() {
        let inputs = CostInputs {
            phases: alloc::vec![
                CostPhase { trials: 80.0, params: 0.18, units: 30_000.0 },
                CostPhase { trials: 5.0, params: 0.18, units: 100_000.0 },
            ],
            target_params: 18.0,
            target_units: 200_000.0,
        };
        assert_eq!(cost_ratio(&inputs).unwrap(), 0.145);
    }

    #[test]
    fn cost_ratio_identity() {
        let inputs = CostInputs::iterations(1.0, 2.0, 3.0, 4.0, 2.0, 3.0, 4.0);
        assert_eq!(cost_ratio(&inputs).unwrap(), 1.0);
    }

    #[test]
    fn cost_ratio_rejects_nonpositive() {
        let inputs = CostInputs::epochs(5.0, 0.04, 5.0, 0.0, 30.0);
        assert!(matches!(cost_ratio(&inputs), Err(Error::Config(_))));
    }
}
