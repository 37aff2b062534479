//! Context-adaptive unlearning: back-end-first dampening with checkpointed
//! forget-accuracy tests, early stop, and multiply-accumulate accounting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dampening::{count_selected, dampen_layer, scaled_params, DampeningParams, DampeningReport, ProfileParams};
use crate::error::{Error, Result};
use crate::fisher::{estimate_importance, stream_layer_importance, ImportanceMap, ImportanceSource};
use crate::nn::{forward_batch, partial_accuracy, BackwardStream, LabeledBatch, LayerSpec, Model, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlearnMode {
    /// Every layer dampened with the base thresholds, no checkpoints.
    SsdFull,
    /// Early stop, uniform thresholds.
    Cau,
    /// Early stop with depth-scaled thresholds.
    #[default]
    CauBalanced,
}

impl std::fmt::Display for UnlearnMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UnlearnMode::SsdFull => "ssd_full",
            UnlearnMode::Cau => "cau",
            UnlearnMode::CauBalanced => "cau_balanced",
        })
    }
}

impl std::str::FromStr for UnlearnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssd_full" | "ssd" => Ok(UnlearnMode::SsdFull),
            "cau" => Ok(UnlearnMode::Cau),
            "cau_balanced" | "ficabu" => Ok(UnlearnMode::CauBalanced),
            other => Err(Error::Config(format!("unknown unlearning mode {other:?}"))),
        }
    }
}

/// How operations are converted into multiply-accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacConvention {
    /// Gradient pass of a layer costs this many times its forward MACs.
    pub gradient_factor: u64,
    /// MACs charged per dampened-layer parameter. Zero treats the elementwise
    /// Fisher and dampening arithmetic as free.
    pub dampening_per_param: u64,
}

impl Default for MacConvention {
    fn default() -> Self {
        MacConvention { gradient_factor: 2, dampening_per_param: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub params: DampeningParams,
    pub checkpoints: BTreeSet<usize>,
    pub tau: f64,
    pub n: usize,
    /// Used only in [`UnlearnMode::CauBalanced`].
    pub profile: Option<ProfileParams>,
    pub mode: UnlearnMode,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub macs: MacConvention,
}

impl UnlearnConfig {
    pub fn ssd(params: DampeningParams, n: usize) -> Self {
        UnlearnConfig {
            params,
            checkpoints: BTreeSet::new(),
            tau: 0.0,
            n,
            profile: None,
            mode: UnlearnMode::SsdFull,
            precision: Precision::F32,
            macs: MacConvention::default(),
        }
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        self.params.validate()?;
        if let Some(&bad) = self.checkpoints.iter().find(|&&l| l == 0 || l > model.depth()) {
            return Err(Error::Config(format!("checkpoint {bad} outside layers 1..={}", model.depth())));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.n == 0 {
            return Err(Error::Config("forget batch size must be at least 1".into()));
        }
        if self.mode == UnlearnMode::CauBalanced {
            let p = self
                .profile
                .ok_or_else(|| Error::Config("balanced mode needs a depth profile".into()))?;
            p.validate()?;
            if p.depth != model.depth() {
                return Err(Error::Config(format!(
                    "profile depth {} does not match model depth {}",
                    p.depth,
                    model.depth()
                )));
            }
        }
        Ok(())
    }
}

/// First and last layers plus every `ceil(L / 4)`-th layer.
pub fn default_checkpoints(depth: usize) -> BTreeSet<usize> {
    if depth == 0 {
        return BTreeSet::new();
    }
    let step = depth.div_ceil(4);
    let mut set: BTreeSet<usize> = (1..=depth).filter(|l| l % step == 0).collect();
    set.insert(1);
    set.insert(depth);
    set
}

/// Forward MACs of a parameterized layer over `n` samples; zero otherwise.
pub fn count_macs_layer(spec: &LayerSpec, n: usize) -> u64 {
    n as u64 * spec.forward_macs()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub gradient: u64,
    /// Per-sample gradient values produced for the layer.
    pub gradient_elements: u64,
    pub checkpoint: u64,
    pub dampening: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacLedger {
    pub forward_pass: u64,
    pub gradient_pass: u64,
    pub checkpoint_partial_inference: u64,
    pub dampening_ops: u64,
    pub total: u64,
    /// Total of a full SSD run on the same model and batch size.
    pub ssd_total: u64,
    /// `100 * total / ssd_total`.
    pub ratio_vs_ssd: f64,
    pub layers: Vec<LayerMacs>,
}

impl MacLedger {
    fn new(model: &Model, n: usize, conv: MacConvention) -> Result<Self> {
        let forward_pass = forward_macs(model, n)?;
        let ssd_total = ssd_ledger(model, n, conv)?.total;
        Ok(MacLedger {
            forward_pass,
            gradient_pass: 0,
            checkpoint_partial_inference: 0,
            dampening_ops: 0,
            total: forward_pass,
            ssd_total,
            ratio_vs_ssd: 0.0,
            layers: Vec::new(),
        })
    }

    fn record(&mut self, entry: LayerMacs) {
        self.gradient_pass += entry.gradient;
        self.checkpoint_partial_inference += entry.checkpoint;
        self.dampening_ops += entry.dampening;
        self.total = self.forward_pass + self.gradient_pass + self.checkpoint_partial_inference + self.dampening_ops;
        self.layers.push(entry);
    }

    fn finish(&mut self) {
        self.ratio_vs_ssd = if self.ssd_total == 0 {
            0.0
        } else {
            100.0 * self.total as f64 / self.ssd_total as f64
        };
    }
}

fn layer_macs(model: &Model, l: usize, n: usize, conv: MacConvention) -> Result<LayerMacs> {
    let spec = model.param_layer(l)?.spec;
    Ok(LayerMacs {
        layer: l,
        gradient: conv.gradient_factor * count_macs_layer(&spec, n),
        gradient_elements: (n * spec.param_count()) as u64,
        checkpoint: 0,
        dampening: conv.dampening_per_param * spec.param_count() as u64,
    })
}

/// Ledger of a full SSD run over `n` samples: one forward pass and the
/// gradient pass of every layer.
pub fn ssd_ledger(model: &Model, n: usize, conv: MacConvention) -> Result<MacLedger> {
    let forward_pass = forward_macs(model, n)?;
    let mut ledger = MacLedger {
        forward_pass,
        gradient_pass: 0,
        checkpoint_partial_inference: 0,
        dampening_ops: 0,
        total: forward_pass,
        ssd_total: 0,
        ratio_vs_ssd: 0.0,
        layers: Vec::new(),
    };
    for l in 1..=model.depth() {
        ledger.record(layer_macs(model, l, n, conv)?);
    }
    ledger.ssd_total = ledger.total;
    ledger.finish();
    Ok(ledger)
}

/// Forward MACs of the whole model over `n` samples.
pub fn forward_macs(model: &Model, n: usize) -> Result<u64> {
    (1..=model.depth()).map(|l| Ok(count_macs_layer(&model.param_layer(l)?.spec, n))).sum()
}

/// MACs of partial inference from layer `l` down to the output.
pub fn checkpoint_macs(model: &Model, l: usize, n: usize) -> Result<u64> {
    (1..=l).map(|k| Ok(count_macs_layer(&model.param_layer(k)?.spec, n))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointAccuracy {
    pub layer: usize,
    pub forget_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnOutcome {
    pub mode: UnlearnMode,
    pub stop_layer: usize,
    pub early_stop: bool,
    pub forget_acc_trace: Vec<CheckpointAccuracy>,
    pub model: Model,
    pub ledger: MacLedger,
    pub report: DampeningReport,
    pub params: DampeningParams,
    pub profile: Option<ProfileParams>,
}

/// Machine-readable record of an outcome, without the model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub mode: UnlearnMode,
    pub depth: usize,
    pub stop_layer: usize,
    pub early_stop: bool,
    pub forget_acc_trace: Vec<CheckpointAccuracy>,
    pub ledger: MacLedger,
    pub dampening: DampeningReport,
    pub params: DampeningParams,
    pub profile: Option<ProfileParams>,
}

impl UnlearnOutcome {
    pub fn to_report(&self) -> OutcomeReport {
        OutcomeReport {
            mode: self.mode,
            depth: self.model.depth(),
            stop_layer: self.stop_layer,
            early_stop: self.early_stop,
            forget_acc_trace: self.forget_acc_trace.clone(),
            ledger: self.ledger.clone(),
            dampening: self.report.clone(),
            params: self.params,
            profile: self.profile,
        }
    }

    /// Forget accuracy measured at the stopping checkpoint, if one fired.
    pub fn stop_accuracy(&self) -> Option<f64> {
        self.forget_acc_trace
            .last()
            .filter(|c| self.early_stop && c.layer == self.stop_layer)
            .map(|c| c.forget_accuracy)
    }
}

/// Runs the layer loop on a copy of `model` and returns the edited copy.
pub fn run_unlearning(
    model: &Model,
    forget: &LabeledBatch,
    global: &ImportanceMap,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate(model)?;
    global.check_matches(model)?;
    if forget.len() != cfg.n {
        return Err(Error::Config(format!(
            "forget batch has {} samples, configuration expects {}",
            forget.len(),
            cfg.n
        )));
    }
    let (checkpoints, profile) = match cfg.mode {
        UnlearnMode::SsdFull => (BTreeSet::new(), None),
        UnlearnMode::Cau => (cfg.checkpoints.clone(), None),
        UnlearnMode::CauBalanced => (cfg.checkpoints.clone(), cfg.profile),
    };
    let depth = model.depth();
    let mut work = model.clone();
    let mut ledger = MacLedger::new(model, cfg.n, cfg.macs)?;
    let mut report = DampeningReport::default();
    let mut trace = Vec::new();

    let cache = if checkpoints.is_empty() {
        None
    } else {
        Some(forward_batch(model, &forget.inputs, &checkpoints, cfg.precision)?.1)
    };
    let mut stream = BackwardStream::new(model, forget)?;
    let mut stop_layer = depth;
    let mut early_stop = false;

    for l in 1..=depth {
        let (idx, imp_f) = stream_layer_importance(&mut stream, &work)?;
        debug_assert_eq!(idx, l);
        let params = match &profile {
            Some(p) => scaled_params(cfg.params, l, p)?,
            None => cfg.params,
        };
        let entry = dampen_layer(&mut work, l, &imp_f, global.layer(l)?, params)?;
        let mut macs = layer_macs(&work, l, cfg.n, cfg.macs)?;
        report.push(entry);
        if let (true, Some(cache)) = (checkpoints.contains(&l), cache.as_ref()) {
            let acc = partial_accuracy(&work, cache, l, &forget.labels)?;
            macs.checkpoint = checkpoint_macs(&work, l, cfg.n)?;
            trace.push(CheckpointAccuracy { layer: l, forget_accuracy: acc });
            if acc <= cfg.tau {
                ledger.record(macs);
                stop_layer = l;
                early_stop = true;
                break;
            }
        }
        ledger.record(macs);
    }
    ledger.finish();

    Ok(UnlearnOutcome {
        mode: cfg.mode,
        stop_layer,
        early_stop,
        forget_acc_trace: trace,
        model: work,
        ledger,
        report,
        params: cfg.params,
        profile,
    })
}

/// Full selective dampening over every layer; the 100% MAC reference.
pub fn run_ssd_baseline(
    model: &Model,
    forget: &LabeledBatch,
    global: &ImportanceMap,
    params: DampeningParams,
) -> Result<UnlearnOutcome> {
    run_unlearning(model, forget, global, &UnlearnConfig::ssd(params, forget.len()))
}

/// Per-layer counts (`counts[l - 1]`) of parameters full SSD would select.
pub fn ssd_selection_counts(
    model: &Model,
    forget: &LabeledBatch,
    global: &ImportanceMap,
    alpha: f32,
) -> Result<Vec<usize>> {
    global.check_matches(model)?;
    let imp_f = estimate_importance(model, forget, ImportanceSource::Forget)?;
    (1..=model.depth())
        .map(|l| count_selected(model, l, imp_f.layer(l)?, global.layer(l)?, alpha))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::estimate_global_importance;
    use crate::nn::{evaluate_accuracy, LayerKind};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Model, LabeledBatch, ImportanceMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Model::mlp(&[6, 8, 8, 3], &mut rng).unwrap();
        let mut data = LabeledBatch::default();
        for _ in 0..30 {
            let y = rng.gen_range(0..3);
            let x = (0..6).map(|i| if i % 3 == y { 1.0 } else { 0.0 } + rng.gen_range(-0.3f32..0.3)).collect();
            data.push(Tensor::from_vec(x).unwrap(), y);
        }
        let global = estimate_global_importance(&m, &data, 8).unwrap();
        let forget = data.filter(|y| y == 0).take(4);
        (m, forget, global)
    }

    fn cfg(n: usize, mode: UnlearnMode, checkpoints: BTreeSet<usize>) -> UnlearnConfig {
        UnlearnConfig {
            params: DampeningParams::new(1.0, 1.0).unwrap(),
            checkpoints,
            tau: 0.0,
            n,
            profile: Some(ProfileParams { b_r: 10.0, c_m: 2.0, depth: 3 }),
            mode,
            precision: Precision::F32,
            macs: MacConvention::default(),
        }
    }

    #[test]
    fn mac_formula_examples() {
        let dense = LayerSpec::new(LayerKind::Dense { in_features: 128, out_features: 64 });
        assert_eq!(count_macs_layer(&dense, 1), 8192);
        let conv = LayerSpec::new(LayerKind::Conv2d {
            in_channels: 8,
            out_channels: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            in_height: 10,
            in_width: 10,
        });
        assert_eq!(count_macs_layer(&conv, 2), 230_400);
        assert_eq!(count_macs_layer(&LayerSpec::new(LayerKind::Relu), 5), 0);
    }

    #[test]
    fn ssd_ledger_matches_hand_sum() {
        let (m, forget, global) = setup(1);
        let out = run_ssd_baseline(&m, &forget, &global, DampeningParams::new(1.0, 1.0).unwrap()).unwrap();
        // layers 6x8, 8x8, 8x3 over 4 samples
        let fwd = 4 * (48 + 64 + 24);
        assert_eq!(out.ledger.forward_pass, fwd);
        assert_eq!(out.ledger.gradient_pass, 2 * fwd);
        assert_eq!(out.ledger.checkpoint_partial_inference, 0);
        assert_eq!(out.ledger.total, 3 * fwd);
        assert_eq!(out.ledger.ssd_total, 3 * fwd);
        assert_eq!(out.ledger.ratio_vs_ssd, 100.0);
        assert_eq!(out.stop_layer, 3);
        assert!(!out.early_stop);
        assert_eq!(ssd_ledger(&m, 4, MacConvention::default()).unwrap(), out.ledger);
    }

    #[test]
    fn vacuous_target_stops_at_first_checkpoint() {
        let (m, forget, global) = setup(2);
        let mut c = cfg(4, UnlearnMode::Cau, [2, 3].into_iter().collect());
        c.tau = 1.0;
        let out = run_unlearning(&m, &forget, &global, &c).unwrap();
        assert_eq!(out.stop_layer, 2);
        assert!(out.early_stop);
        assert_eq!(out.forget_acc_trace.len(), 1);
        assert!(out.model.suffix_bit_eq(&m, 3));
        let l = &out.ledger;
        assert_eq!(l.checkpoint_partial_inference, 4 * (24 + 64));
        assert_eq!(l.total, l.forward_pass + l.gradient_pass + l.checkpoint_partial_inference);
    }

    #[test]
    fn empty_checkpoints_equal_ssd() {
        let (m, forget, global) = setup(3);
        let ssd = run_ssd_baseline(&m, &forget, &global, DampeningParams::new(1.0, 1.0).unwrap()).unwrap();
        let cau = run_unlearning(&m, &forget, &global, &cfg(4, UnlearnMode::Cau, BTreeSet::new())).unwrap();
        assert!(cau.model.params_bit_eq(&ssd.model));
        assert_eq!(cau.report, ssd.report);
        assert_eq!(cau.ledger, ssd.ledger);
    }

    #[test]
    fn unit_bound_balanced_equals_uniform() {
        let (m, forget, global) = setup(4);
        let set: BTreeSet<usize> = [1, 2, 3].into_iter().collect();
        let mut bal = cfg(4, UnlearnMode::CauBalanced, set.clone());
        bal.profile = Some(ProfileParams { b_r: 1.0, c_m: 2.0, depth: 3 });
        bal.tau = 0.4;
        let mut uni = cfg(4, UnlearnMode::Cau, set);
        uni.tau = 0.4;
        let a = run_unlearning(&m, &forget, &global, &bal).unwrap();
        let b = run_unlearning(&m, &forget, &global, &uni).unwrap();
        assert!(a.model.params_bit_eq(&b.model));
        assert_eq!(a.stop_layer, b.stop_layer);
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn stop_accuracy_equals_full_forward() {
        for seed in 0..6 {
            let (m, forget, global) = setup(seed);
            let mut c = cfg(4, UnlearnMode::CauBalanced, [1, 2, 3].into_iter().collect());
            c.tau = 0.5;
            let out = run_unlearning(&m, &forget, &global, &c).unwrap();
            assert!(out.model.suffix_bit_eq(&m, out.stop_layer + 1));
            if let Some(acc) = out.stop_accuracy() {
                assert_eq!(acc.to_bits(), evaluate_accuracy(&out.model, &forget, Precision::F32).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn config_errors() {
        let (m, forget, global) = setup(5);
        let mut c = cfg(4, UnlearnMode::Cau, [4].into_iter().collect());
        assert!(matches!(run_unlearning(&m, &forget, &global, &c), Err(Error::Config(_))));
        c.checkpoints = [1].into_iter().collect();
        c.tau = 1.5;
        assert!(run_unlearning(&m, &forget, &global, &c).is_err());
        c.tau = 0.2;
        c.n = 5;
        assert!(run_unlearning(&m, &forget, &global, &c).is_err());
        let mut bal = cfg(4, UnlearnMode::CauBalanced, BTreeSet::new());
        bal.profile = None;
        assert!(run_unlearning(&m, &forget, &global, &bal).is_err());
        bal.profile = Some(ProfileParams { b_r: 10.0, c_m: 2.0, depth: 4 });
        assert!(run_unlearning(&m, &forget, &global, &bal).is_err());
    }

    #[test]
    fn checkpoint_defaults() {
        assert_eq!(default_checkpoints(16), [1, 4, 8, 12, 16].into_iter().collect());
        assert_eq!(default_checkpoints(3), [1, 2, 3].into_iter().collect());
        assert_eq!(default_checkpoints(10), [1, 3, 6, 9, 10].into_iter().collect());
        assert_eq!(default_checkpoints(1), [1].into_iter().collect());
    }

    #[test]
    fn selection_counts_match_ssd_report() {
        let (m, forget, global) = setup(6);
        let p = DampeningParams::new(1.0, 1.0).unwrap();
        let counts = ssd_selection_counts(&m, &forget, &global, p.alpha).unwrap();
        let ssd = run_ssd_baseline(&m, &forget, &global, p).unwrap();
        let from_report: Vec<usize> = ssd.report.layers.iter().map(|e| e.selected).collect();
        assert_eq!(counts, from_report);
    }

    #[test]
    fn report_json_roundtrip() {
        let (m, forget, global) = setup(7);
        let mut c = cfg(4, UnlearnMode::CauBalanced, [1, 3].into_iter().collect());
        c.tau = 0.3;
        let out = run_unlearning(&m, &forget, &global, &c).unwrap();
        let json = serde_json::to_string_pretty(&out.to_report()).unwrap();
        let back: OutcomeReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, out.to_report());
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
    }

    #[test]
    fn modes_parse() {
        assert_eq!("cau".parse::<UnlearnMode>().unwrap(), UnlearnMode::Cau);
        assert_eq!("ssd_full".parse::<UnlearnMode>().unwrap(), UnlearnMode::SsdFull);
        assert_eq!("cau_balanced".parse::<UnlearnMode>().unwrap(), UnlearnMode::CauBalanced);
        assert!("fast".parse::<UnlearnMode>().is_err());
    }
}
