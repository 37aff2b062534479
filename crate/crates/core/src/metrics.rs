//! Retain/forget accuracy records, retain preservation rate and the
//! baseline/SSD/ours comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cau::{OutcomeReport, UnlearnMode};
use crate::error::{Error, Result};

/// Accuracies of one model on the retain and forget test splits, as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub retain_acc: f64,
    pub forget_acc: f64,
}

impl AccuracyPair {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("retain", self.retain_acc), ("forget", self.forget_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} accuracy {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Evaluated unlearning run: accuracies after the edit plus its outcome record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEval {
    pub accuracy: AccuracyPair,
    pub outcome: OutcomeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub label: String,
    pub retain_acc: f64,
    pub forget_acc: f64,
    /// Retain accuracy drop against the original model, in percentage points.
    pub delta_retain: f64,
    pub mac_ratio: Option<f64>,
    pub rpr: Option<f64>,
    pub energy_ratio: Option<f64>,
    /// Membership-inference accuracy; not computed.
    pub mia: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: EvalRecord,
    pub ssd: EvalRecord,
    pub ours: EvalRecord,
}

/// `(1 - delta_ours / delta_ssd) * 100`; `None` when `delta_ssd` is zero.
pub fn rpr(delta_ssd: f64, delta_ours: f64) -> Option<f64> {
    if delta_ssd == 0.0 || !delta_ssd.is_finite() || !delta_ours.is_finite() {
        return None;
    }
    Some((1.0 - delta_ours / delta_ssd) * 100.0)
}

/// Retain-accuracy drop in percentage points.
pub fn retain_drop(before: &AccuracyPair, after: &AccuracyPair) -> f64 {
    (before.retain_acc - after.retain_acc) * 100.0
}

pub fn compare_runs(baseline: &AccuracyPair, ssd: &RunEval, ours: &RunEval) -> Result<Comparison> {
    baseline.validate()?;
    ssd.accuracy.validate()?;
    ours.accuracy.validate()?;
    if ssd.outcome.mode != UnlearnMode::SsdFull {
        return Err(Error::Consistency("reference run is not a full SSD run".into()));
    }
    if ssd.outcome.depth != ours.outcome.depth || ssd.outcome.ledger.ssd_total != ours.outcome.ledger.ssd_total {
        return Err(Error::Consistency("runs were made on different models or batch sizes".into()));
    }
    if ssd.outcome.params != ours.outcome.params {
        return Err(Error::Consistency("runs use different base thresholds".into()));
    }
    let ssd_macs = ssd.outcome.ledger.total as f64;
    let delta_ssd = retain_drop(baseline, &ssd.accuracy);
    let delta_ours = retain_drop(baseline, &ours.accuracy);
    let base = EvalRecord {
        label: "Baseline".into(),
        retain_acc: baseline.retain_acc,
        forget_acc: baseline.forget_acc,
        delta_retain: 0.0,
        mac_ratio: None,
        rpr: None,
        energy_ratio: None,
        mia: None,
    };
    let ssd_rec = EvalRecord {
        label: "SSD".into(),
        retain_acc: ssd.accuracy.retain_acc,
        forget_acc: ssd.accuracy.forget_acc,
        delta_retain: delta_ssd,
        mac_ratio: Some(100.0),
        rpr: None,
        energy_ratio: None,
        mia: None,
    };
    let ours_rec = EvalRecord {
        label: "Ours".into(),
        retain_acc: ours.accuracy.retain_acc,
        forget_acc: ours.accuracy.forget_acc,
        delta_retain: delta_ours,
        mac_ratio: Some(100.0 * ours.outcome.ledger.total as f64 / ssd_macs),
        rpr: if delta_ssd > 0.0 { rpr(delta_ssd, delta_ours) } else { None },
        energy_ratio: None,
        mia: None,
    };
    Ok(Comparison { baseline: base, ssd: ssd_rec, ours: ours_rec })
}

impl Comparison {
    /// Aligned plain-text table with one column per run.
    pub fn to_table(&self) -> String {
        let cols = [&self.baseline, &self.ssd, &self.ours];
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let rows: Vec<(&str, Vec<String>)> = vec![
            ("Dr acc (%)", cols.iter().map(|c| format!("{:.2}", c.retain_acc * 100.0)).collect()),
            ("Df acc (%)", cols.iter().map(|c| format!("{:.2}", c.forget_acc * 100.0)).collect()),
            ("dDr (pp)", cols.iter().map(|c| format!("{:.2}", c.delta_retain)).collect()),
            ("MACs (%)", cols.iter().map(|c| pct(c.mac_ratio)).collect()),
            ("RPR", cols.iter().map(|c| pct(c.rpr)).collect()),
            ("Energy (%)", cols.iter().map(|c| pct(c.energy_ratio)).collect()),
            ("MIA", cols.iter().map(|c| pct(c.mia)).collect()),
        ];
        let first = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let width = rows
            .iter()
            .flat_map(|(_, v)| v.iter().map(String::len))
            .chain(cols.iter().map(|c| c.label.len()))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", "Metric");
        for c in cols {
            let _ = write!(out, "  {:>width$}", c.label);
        }
        out.push('\n');
        for (name, vals) in rows {
            let _ = write!(out, "{name:<first$}");
            for v in vals {
                let _ = write!(out, "  {v:>width$}");
            }
            out.push('\n');
        }
        out
    }
}
