//! Experiment steps, both in memory and as file-producing subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::cau::{run_ssd_baseline, run_unlearning, ssd_ledger, OutcomeReport, UnlearnMode, UnlearnOutcome};
use crate::dampening::derive_midpoint;
use crate::error::{Error, Result};
use crate::fisher::{estimate_global_importance, load_importance_for, save_importance, ImportanceMap};
use crate::metrics::{compare_runs, AccuracyPair, Comparison, RunEval};
use crate::nn::{evaluate_accuracy, load_model, save_model, LabeledBatch, Model};
use crate::pipeline::{simulate_system, SystemReport};

use super::config::{DatasetSpec, ExperimentConfig, ModelKind};
use super::data::{load_image_dir, synth_blobs, Dataset, ForgetSplits};
use super::train::train_sgd;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.dataset {
        DatasetSpec::Blobs(spec) => synth_blobs(spec)?,
        DatasetSpec::Images(spec) => load_image_dir(spec)?,
    };
    if cfg.unlearn.forget_class >= data.classes {
        return Err(Error::Config(format!(
            "forget class {} out of range for {} classes",
            cfg.unlearn.forget_class, data.classes
        )));
    }
    Ok(data)
}

pub fn init_model(cfg: &ExperimentConfig, data: &Dataset) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    match cfg.model.kind {
        ModelKind::Mlp => {
            if data.input_shape.len() != 1 {
                return Err(Error::Config(format!("mlp needs flat inputs, data has shape {:?}", data.input_shape)));
            }
            let mut sizes = vec![data.input_shape[0]];
            sizes.extend(&cfg.model.hidden);
            sizes.push(data.classes);
            Model::mlp(&sizes, &mut rng)
        }
        ModelKind::TinyCnn => {
            let [c, h, w] = data.input_shape[..] else {
                return Err(Error::Config(format!("tiny_cnn needs [c, h, w] inputs, data has {:?}", data.input_shape)));
            };
            Model::tiny_cnn(c, h, w, cfg.model.hidden[0], data.classes, &mut rng)
        }
    }
}

/// The forget batch: the first `n` training samples of the forget class.
pub fn forget_batch(splits: &ForgetSplits, n: usize) -> Result<LabeledBatch> {
    if splits.forget_train.len() < n {
        return Err(Error::Config(format!(
            "forget class has {} training samples, n = {n}",
            splits.forget_train.len()
        )));
    }
    Ok(splits.forget_train.take(n))
}

pub fn evaluate_pair(model: &Model, splits: &ForgetSplits, cfg: &ExperimentConfig) -> Result<AccuracyPair> {
    let p = cfg.unlearn.precision;
    Ok(AccuracyPair {
        retain_acc: evaluate_accuracy(model, &splits.retain_test, p)?,
        forget_acc: evaluate_accuracy(model, &splits.forget_test, p)?,
    })
}

/// Sigmoid midpoint: the configured value, else derived from the full-SSD
/// per-layer selection counts.
pub fn midpoint(cfg: &ExperimentConfig, ssd: &OutcomeReport) -> f64 {
    cfg.unlearn.c_m.unwrap_or_else(|| {
        let counts: Vec<usize> = ssd.dampening.layers.iter().map(|e| e.selected).collect();
        derive_midpoint(&counts)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub baseline: AccuracyPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: Option<u64>,
    pub train: TrainReport,
    pub c_m: f64,
    pub ssd: RunEval,
    pub cau: RunEval,
    pub balanced: RunEval,
    pub comparison: Comparison,
    pub system: SystemReport,
}

pub struct Trained {
    pub data: Dataset,
    pub splits: ForgetSplits,
    pub model: Model,
    pub report: TrainReport,
}

pub fn train_model(cfg: &ExperimentConfig) -> Result<Trained> {
    let data = load_dataset(cfg)?;
    let splits = data.forget_splits(cfg.unlearn.forget_class)?;
    let mut model = init_model(cfg, &data)?;
    let losses = train_sgd(&mut model, &data.train, &cfg.train)?;
    let p = cfg.unlearn.precision;
    let report = TrainReport {
        epochs: cfg.train.epochs,
        final_loss: losses.last().copied(),
        train_acc: evaluate_accuracy(&model, &data.train, p)?,
        test_acc: evaluate_accuracy(&model, &data.test, p)?,
        baseline: evaluate_pair(&model, &splits, cfg)?,
    };
    Ok(Trained { data, splits, model, report })
}

fn evaluated(outcome: &UnlearnOutcome, splits: &ForgetSplits, cfg: &ExperimentConfig) -> Result<RunEval> {
    Ok(RunEval { accuracy: evaluate_pair(&outcome.model, splits, cfg)?, outcome: outcome.to_report() })
}

/// Train, estimate global importance, then run SSD, uniform and balanced
/// unlearning on the same model and compare them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let t = train_model(cfg)?;
    let global = estimate_global_importance(&t.model, &t.data.train, cfg.unlearn.global_chunk)?;
    let forget = forget_batch(&t.splits, cfg.unlearn.n)?;
    let depth = t.model.depth();
    let ssd = run_ssd_baseline(&t.model, &forget, &global, cfg.unlearn.params()?)?;
    let ssd_eval = evaluated(&ssd, &t.splits, cfg)?;
    let c_m = midpoint(cfg, &ssd_eval.outcome);
    let cau = run_unlearning(&t.model, &forget, &global, &cfg.unlearn.config(UnlearnMode::Cau, depth, c_m)?)?;
    let bal = run_unlearning(&t.model, &forget, &global, &cfg.unlearn.config(UnlearnMode::CauBalanced, depth, c_m)?)?;
    let cau_eval = evaluated(&cau, &t.splits, cfg)?;
    let bal_eval = evaluated(&bal, &t.splits, cfg)?;
    let system = simulate_system(&bal.ledger, &ssd.ledger, &cfg.pipeline, &cfg.power)?;
    let mut comparison = compare_runs(&t.report.baseline, &ssd_eval, &bal_eval)?;
    comparison.ssd.energy_ratio = Some(100.0);
    comparison.ours.energy_ratio = system.ficabu.energy_ratio_vs_baseline;
    Ok(ExperimentResult {
        seed: None,
        train: t.report,
        c_m,
        ssd: ssd_eval,
        cau: cau_eval,
        balanced: bal_eval,
        comparison,
        system,
    })
}

/// Files an experiment reads and writes below the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Layout { root: cfg.output_dir.clone() }
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.fcbm")
    }

    pub fn importance(&self) -> PathBuf {
        self.root.join("global.fcbi")
    }

    pub fn train_report(&self) -> PathBuf {
        self.root.join("train.json")
    }

    pub fn run_dir(&self, mode: UnlearnMode) -> PathBuf {
        self.root.join(mode.to_string())
    }

    pub fn outcome(&self, mode: UnlearnMode) -> PathBuf {
        self.run_dir(mode).join("outcome.json")
    }

    pub fn eval(&self, mode: UnlearnMode) -> PathBuf {
        self.run_dir(mode).join("eval.json")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Missing(format!("{} not found; run the earlier step first", path.display())))
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let t = train_model(cfg)?;
    let layout = Layout::new(cfg);
    fs::create_dir_all(&layout.root)?;
    save_model(&t.model, &layout.model())?;
    write_json(&layout.train_report(), &t.report)?;
    Ok(t.report)
}

pub fn cmd_importance(cfg: &ExperimentConfig, model_path: Option<&Path>) -> Result<ImportanceMap> {
    let layout = Layout::new(cfg);
    let path = model_path.map_or_else(|| layout.model(), Path::to_path_buf);
    require(&path)?;
    let model = load_model(&path)?;
    let data = load_dataset(cfg)?;
    let map = estimate_global_importance(&model, &data.train, cfg.unlearn.global_chunk)?;
    fs::create_dir_all(&layout.root)?;
    save_importance(&map, &layout.importance())?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub eval: RunEval,
    pub comparison: Option<Comparison>,
}

pub fn cmd_unlearn(
    cfg: &ExperimentConfig,
    mode: UnlearnMode,
    model_path: Option<&Path>,
    importance_path: Option<&Path>,
) -> Result<UnlearnReport> {
    let layout = Layout::new(cfg);
    let model_path = model_path.map_or_else(|| layout.model(), Path::to_path_buf);
    let imp_path = importance_path.map_or_else(|| layout.importance(), Path::to_path_buf);
    require(&model_path)?;
    require(&imp_path)?;
    let model = load_model(&model_path)?;
    let global = load_importance_for(&imp_path, &model)?;
    let data = load_dataset(cfg)?;
    let splits = data.forget_splits(cfg.unlearn.forget_class)?;
    let forget = forget_batch(&splits, cfg.unlearn.n)?;
    let c_m = match (mode, cfg.unlearn.c_m) {
        (UnlearnMode::CauBalanced, None) => {
            let ssd = run_ssd_baseline(&model, &forget, &global, cfg.unlearn.params()?)?;
            midpoint(cfg, &ssd.to_report())
        }
        (_, c) => c.unwrap_or((model.depth() as f64 + 1.0) / 2.0),
    };
    let outcome = run_unlearning(&model, &forget, &global, &cfg.unlearn.config(mode, model.depth(), c_m)?)?;
    let eval = evaluated(&outcome, &splits, cfg)?;
    fs::create_dir_all(layout.run_dir(mode))?;
    save_model(&outcome.model, &layout.run_dir(mode).join("model.fcbm"))?;
    write_json(&layout.outcome(mode), &eval.outcome)?;
    write_json(&layout.eval(mode), &eval)?;

    let comparison = if mode != UnlearnMode::SsdFull && layout.eval(UnlearnMode::SsdFull).exists() {
        let baseline = evaluate_pair(&model, &splits, cfg)?;
        let ssd: RunEval = read_json(&layout.eval(UnlearnMode::SsdFull))?;
        Some(compare_runs(&baseline, &ssd, &eval)?)
    } else {
        None
    };
    Ok(UnlearnReport { eval, comparison })
}

/// Simulates the outcome at `outcome_path` (default: the configured mode)
/// against a full SSD run of the trained model on the no-IP processor.
pub fn cmd_simulate(cfg: &ExperimentConfig, outcome_path: Option<&Path>) -> Result<SystemReport> {
    let layout = Layout::new(cfg);
    let path = outcome_path.map_or_else(|| layout.outcome(cfg.unlearn.mode), Path::to_path_buf);
    require(&path)?;
    let outcome: OutcomeReport = read_json(&path)?;
    require(&layout.model())?;
    let model = load_model(&layout.model())?;
    if model.depth() != outcome.depth {
        return Err(Error::ShapeMismatch(format!(
            "outcome covers {} layers, model has {}",
            outcome.depth,
            model.depth()
        )));
    }
    let ssd = ssd_ledger(&model, cfg.unlearn.n, cfg.unlearn.macs)?;
    let report = simulate_system(&outcome.ledger, &ssd, &cfg.pipeline, &cfg.power)?;
    write_json(&path.with_file_name("sim.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub comparison: Comparison,
    pub table: String,
}

/// Assembles the baseline/SSD/ours table from files left by earlier steps.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<FinalReport> {
    let layout = Layout::new(cfg);
    let ours_mode = match cfg.unlearn.mode {
        UnlearnMode::SsdFull => UnlearnMode::CauBalanced,
        m => m,
    };
    for p in [layout.train_report(), layout.eval(UnlearnMode::SsdFull), layout.eval(ours_mode)] {
        require(&p)?;
    }
    let train: TrainReport = read_json(&layout.train_report())?;
    let ssd: RunEval = read_json(&layout.eval(UnlearnMode::SsdFull))?;
    let ours: RunEval = read_json(&layout.eval(ours_mode))?;
    let mut comparison = compare_runs(&train.baseline, &ssd, &ours)?;
    let sim = layout.run_dir(ours_mode).join("sim.json");
    if sim.exists() {
        let system: SystemReport = read_json(&sim)?;
        comparison.ssd.energy_ratio = Some(100.0);
        comparison.ours.energy_ratio = system.ficabu.energy_ratio_vs_baseline;
    }
    let table = comparison.to_table();
    write_json(&layout.root.join("report.json"), &comparison)?;
    fs::write(layout.root.join("report.txt"), &table)?;
    Ok(FinalReport { comparison, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub baseline_retain: f64,
    pub ssd_stop: usize,
    pub cau_stop: usize,
    pub balanced_stop: usize,
    pub cau_forget: f64,
    pub cau_retain_drop: f64,
    pub cau_mac_ratio: f64,
    pub balanced_forget: f64,
    pub balanced_retain_drop: f64,
    pub balanced_mac_ratio: f64,
    pub ssd_retain_drop: f64,
    pub rpr: Option<f64>,
    pub energy_ratio: Option<f64>,
}

impl SweepRow {
    pub fn from_result(seed: u64, r: &ExperimentResult) -> Self {
        let base = r.train.baseline.retain_acc;
        let drop = |e: &RunEval| (base - e.accuracy.retain_acc) * 100.0;
        SweepRow {
            seed,
            baseline_retain: base,
            ssd_stop: r.ssd.outcome.stop_layer,
            cau_stop: r.cau.outcome.stop_layer,
            balanced_stop: r.balanced.outcome.stop_layer,
            cau_forget: r.cau.accuracy.forget_acc,
            cau_retain_drop: drop(&r.cau),
            cau_mac_ratio: r.cau.outcome.ledger.ratio_vs_ssd,
            balanced_forget: r.balanced.accuracy.forget_acc,
            balanced_retain_drop: drop(&r.balanced),
            balanced_mac_ratio: r.balanced.outcome.ledger.ratio_vs_ssd,
            ssd_retain_drop: drop(&r.ssd),
            rpr: r.comparison.ours.rpr,
            energy_ratio: r.system.ficabu.energy_ratio_vs_baseline,
        }
    }
}

/// Runs the whole experiment once per seed and writes `sweep.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for seed in seeds {
        let r = run_experiment(&cfg.with_seed(seed))?;
        rows.push(SweepRow::from_result(seed, &r));
    }
    write_json(&Layout::new(cfg).root.join("sweep.json"), &rows)?;
    Ok(rows)
}
