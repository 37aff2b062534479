//! Parameter selection, dampening and the depth profile that scales both
//! thresholds from the back end toward the front end.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DampeningParams {
    pub alpha: f32,
    pub lambda: f32,
}

impl DampeningParams {
    pub fn new(alpha: f32, lambda: f32) -> Result<Self> {
        let p = DampeningParams { alpha, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub b_r: f64,
    pub c_m: f64,
    pub depth: usize,
}

impl ProfileParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_r >= 1.0 && self.b_r.is_finite()) {
            return Err(Error::Config(format!("b_r must be at least 1, got {}", self.b_r)));
        }
        if !self.c_m.is_finite() {
            return Err(Error::Config("c_m must be finite".into()));
        }
        if self.depth < 2 {
            return Err(Error::DegenerateDepth(self.depth));
        }
        Ok(())
    }
}

/// Selection and strength statistics for one dampened layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDampening {
    pub layer: usize,
    pub parameters: usize,
    pub selected: usize,
    pub beta_min: Option<f32>,
    pub beta_mean: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DampeningReport {
    pub layers: Vec<LayerDampening>,
    pub total_modified: usize,
}

impl DampeningReport {
    pub fn push(&mut self, entry: LayerDampening) {
        self.total_modified += entry.selected;
        self.layers.push(entry);
    }

    pub fn selected_in(&self, l: usize) -> Option<usize> {
        self.layers.iter().find(|e| e.layer == l).map(|e| e.selected)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("layer\tselected\tparameters\tbeta_min\tbeta_mean\n");
        for e in &self.layers {
            let min = e.beta_min.map_or("-".to_string(), |v| format!("{v:.6}"));
            let mean = e.beta_mean.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", e.layer, e.selected, e.parameters, min, mean);
        }
        let _ = writeln!(out, "total_modified\t{}", self.total_modified);
        out
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "importance shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `imp_f > alpha * imp_d`, elementwise and strict.
pub fn select_mask(imp_f: &Tensor, imp_d: &Tensor, alpha: f32) -> Result<Vec<bool>> {
    check_same_shape(imp_f, imp_d)?;
    Ok(imp_f.data().iter().zip(imp_d.data()).map(|(&f, &d)| f > alpha * d).collect())
}

/// `min(lambda * imp_d / imp_f, 1)` in f32.
pub fn beta(imp_f: f32, imp_d: f32, lambda: f32) -> Result<f32> {
    if imp_f <= 0.0 {
        return Err(Error::Consistency(format!("dampening strength undefined for forget importance {imp_f}")));
    }
    Ok((lambda * imp_d / imp_f).min(1.0))
}

/// Selects and dampens layer `l` in place. Tensors flagged ineligible on the
/// layer are left alone.
pub fn dampen_layer(
    model: &mut Model,
    l: usize,
    imp_f: &[Tensor],
    imp_d: &[Tensor],
    params: DampeningParams,
) -> Result<LayerDampening> {
    params.validate()?;
    let layer = model.param_layer_mut(l)?;
    if imp_f.len() != layer.params.len() || imp_d.len() != layer.params.len() {
        return Err(Error::ShapeMismatch(format!(
            "layer {l} has {} parameter tensors, importance slices have {} and {}",
            layer.params.len(),
            imp_f.len(),
            imp_d.len()
        )));
    }
    let mut entry = LayerDampening { layer: l, parameters: 0, selected: 0, beta_min: None, beta_mean: None };
    let mut beta_sum = 0.0f64;
    for ((theta, f), (d, &eligible)) in layer.params.iter_mut().zip(imp_f).zip(imp_d.iter().zip(&layer.eligible)) {
        check_same_shape(f, d)?;
        if theta.shape() != f.shape() {
            return Err(Error::ShapeMismatch(format!(
                "layer {l}: importance shape {:?} does not match parameter shape {:?}",
                f.shape(),
                theta.shape()
            )));
        }
        entry.parameters += theta.len();
        if !eligible {
            continue;
        }
        for ((w, &fi), &di) in theta.data_mut().iter_mut().zip(f.data()).zip(d.data()) {
            if fi > params.alpha * di {
                let b = (params.lambda * di / fi).min(1.0);
                *w *= b;
                entry.selected += 1;
                beta_sum += b as f64;
                entry.beta_min = Some(entry.beta_min.map_or(b, |m| m.min(b)));
            }
        }
    }
    if entry.selected > 0 {
        entry.beta_mean = Some(beta_sum / entry.selected as f64);
    }
    Ok(entry)
}

/// Number of parameters of layer `l` that would be selected, without editing.
pub fn count_selected(model: &Model, l: usize, imp_f: &[Tensor], imp_d: &[Tensor], alpha: f32) -> Result<usize> {
    let layer = model.param_layer(l)?;
    let mut n = 0;
    for ((f, d), &eligible) in imp_f.iter().zip(imp_d).zip(&layer.eligible) {
        if eligible {
            n += select_mask(f, d, alpha)?.into_iter().filter(|&s| s).count();
        }
    }
    Ok(n)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `S(l) = 1 + (b_r - 1) (sigma(l) - sigma(1)) / (sigma(L) - sigma(1))` with
/// `sigma(l) = 1 / (1 + exp(-(l - c_m)))`.
pub fn profile_scale(l: usize, p: &ProfileParams) -> Result<f64> {
    p.validate()?;
    if l == 0 || l > p.depth {
        return Err(Error::LayerOutOfRange { index: l, depth: p.depth });
    }
    let (l, first, last) = (l as f64, 1.0, p.depth as f64);
    // Differences near the upper plateau are taken on the complement
    // 1 - sigma(x) = sigma(-x).
    let (num, den) = if p.c_m >= (first + last) / 2.0 {
        let s = |x: f64| sigmoid(x - p.c_m);
        (s(l) - s(first), s(last) - s(first))
    } else {
        let s = |x: f64| sigmoid(p.c_m - x);
        (s(first) - s(l), s(first) - s(last))
    };
    if !(den > 0.0) {
        return Err(Error::Config(format!("profile midpoint {} is too far from the layer range", p.c_m)));
    }
    Ok(1.0 + (p.b_r - 1.0) * (num / den))
}

/// `(S(l) alpha, S(l) lambda)`.
pub fn scaled_params(base: DampeningParams, l: usize, p: &ProfileParams) -> Result<DampeningParams> {
    let s = profile_scale(l, p)?;
    if s == 1.0 {
        return Ok(base);
    }
    DampeningParams::new((s * base.alpha as f64) as f32, (s * base.lambda as f64) as f32)
}

/// Default sigmoid midpoint from per-layer selection counts (`counts[l - 1]`):
/// counts are smoothed with a 3-point moving average, and the midpoint sits
/// halfway between the first and last layer whose smoothed count exceeds 10%
/// of the maximum.
pub fn derive_midpoint(counts: &[usize]) -> f64 {
    let n = counts.len();
    if n == 0 {
        return 1.0;
    }
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            counts[lo..=hi].iter().map(|&c| c as f64).sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let max = smoothed.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return (n as f64 + 1.0) / 2.0;
    }
    let above: Vec<usize> = (0..n).filter(|&i| smoothed[i] > 0.1 * max).collect();
    let first = above[0] + 1;
    let last = above[above.len() - 1] + 1;
    (first + last) as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn selection_boundaries() {
        let d = t(&[1.0, 2.0, 0.5]);
        assert_eq!(select_mask(&d, &d, 1.0).unwrap(), vec![false; 3]);
        assert_eq!(select_mask(&t(&[2.0, 4.0, 1.0]), &t(&[0.9, 1.9, 0.4]), 1.0).unwrap(), vec![true; 3]);
        assert_eq!(select_mask(&t(&[5.0, 11.0]), &t(&[1.0, 1.0]), 10.0).unwrap(), vec![false, true]);
        assert!(matches!(select_mask(&t(&[1.0]), &t(&[1.0, 2.0]), 1.0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_importance_edges() {
        assert_eq!(select_mask(&t(&[0.3, 0.0]), &t(&[0.0, 0.0]), 10.0).unwrap(), vec![true, false]);
        assert_eq!(beta(0.3, 0.0, 1.0).unwrap(), 0.0);
        assert!(matches!(beta(0.0, 0.0, 1.0), Err(Error::Consistency(_))));
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta(3.0, 3.0, 1.0).unwrap(), 1.0);
        assert_eq!(beta(4.0, 2.0, 0.1).unwrap(), 0.1f32 * 2.0 / 4.0);
        assert!((beta(4.0, 2.0, 0.1).unwrap() - 0.05).abs() < 1e-8);
        assert_eq!(beta(1.0, 5.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn params_validation() {
        assert!(DampeningParams::new(0.0, 1.0).is_err());
        assert!(DampeningParams::new(1.0, -1.0).is_err());
        assert!(DampeningParams::new(f32::NAN, 1.0).is_err());
        assert!(DampeningParams::new(10.0, 1.0).is_ok());
    }

    fn small_model() -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Model::mlp(&[3, 2], &mut rng).unwrap()
    }

    #[test]
    fn nothing_selected_leaves_layer_untouched() {
        let mut m = small_model();
        let before = m.clone();
        let f = vec![Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2])];
        let d = vec![Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap(), Tensor::new(vec![2], vec![1.0; 2]).unwrap()];
        let r = dampen_layer(&mut m, 1, &f, &d, DampeningParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(r.selected, 0);
        assert_eq!(r.beta_min, None);
        assert!(m.params_bit_eq(&before));
    }

    #[test]
    fn all_selected_with_unit_beta_leaves_layer_untouched() {
        let mut m = small_model();
        let before = m.clone();
        let f = vec![Tensor::new(vec![3, 2], vec![2.0; 6]).unwrap(), Tensor::new(vec![2], vec![2.0; 2]).unwrap()];
        let d = vec![Tensor::new(vec![3, 2], vec![1.0; 6]).unwrap(), Tensor::new(vec![2], vec![1.0; 2]).unwrap()];
        // selected (2 > 1 * 1), strength min(4 * 1 / 2, 1) = 1
        let r = dampen_layer(&mut m, 1, &f, &d, DampeningParams::new(1.0, 4.0).unwrap()).unwrap();
        assert_eq!(r.selected, 8);
        assert_eq!(r.beta_min, Some(1.0));
        assert!(m.params_bit_eq(&before));
    }

    #[test]
    fn ineligible_tensor_skipped() {
        let mut m = small_model();
        m.set_eligible(1, 1, false).unwrap();
        let bias_before = m.param_layer(1).unwrap().bias().clone();
        let f = vec![Tensor::new(vec![3, 2], vec![2.0; 6]).unwrap(), Tensor::new(vec![2], vec![2.0; 2]).unwrap()];
        let d = vec![Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![2])];
        let r = dampen_layer(&mut m, 1, &f, &d, DampeningParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(r.selected, 6);
        assert!(m.param_layer(1).unwrap().weight().data().iter().all(|&w| w == 0.0));
        assert!(m.param_layer(1).unwrap().bias().bit_eq(&bias_before));
    }

    #[test]
    fn report_text_lists_layers() {
        let mut r = DampeningReport::default();
        r.push(LayerDampening { layer: 1, parameters: 10, selected: 2, beta_min: Some(0.5), beta_mean: Some(0.75) });
        r.push(LayerDampening { layer: 2, parameters: 10, selected: 0, beta_min: None, beta_mean: None });
        let text = r.to_text();
        assert!(text.contains("1\t2\t10\t0.500000\t0.750000"));
        assert!(text.contains("2\t0\t10\t-\t-"));
        assert!(text.ends_with("total_modified\t2\n"));
        assert_eq!(r.selected_in(1), Some(2));
    }

    #[test]
    fn profile_endpoints_and_symmetry() {
        let p = ProfileParams { b_r: 10.0, c_m: 8.5, depth: 16 };
        assert_eq!(profile_scale(1, &p).unwrap(), 1.0);
        assert_eq!(profile_scale(16, &p).unwrap(), 10.0);
        let s: Vec<f64> = (1..=16).map(|l| profile_scale(l, &p).unwrap()).collect();
        assert!(s.windows(2).all(|w| w[1] > w[0]));
        for k in 0..8 {
            let lo = s[7 - k];
            let hi = s[8 + k];
            assert!(((lo + hi) / 2.0 - 5.5).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_errors_and_uniform_case() {
        assert!(matches!(
            profile_scale(1, &ProfileParams { b_r: 10.0, c_m: 1.0, depth: 1 }),
            Err(Error::DegenerateDepth(1))
        ));
        let p = ProfileParams { b_r: 10.0, c_m: 2.0, depth: 4 };
        assert!(matches!(profile_scale(0, &p), Err(Error::LayerOutOfRange { .. })));
        assert!(matches!(profile_scale(5, &p), Err(Error::LayerOutOfRange { .. })));
        assert!(profile_scale(2, &ProfileParams { b_r: 0.5, ..p }).is_err());
        let flat = ProfileParams { b_r: 1.0, ..p };
        assert!((1..=4).all(|l| profile_scale(l, &flat).unwrap() == 1.0));
    }

    #[test]
    fn scaled_params_endpoints() {
        let base = DampeningParams::new(10.0, 1.0).unwrap();
        let p = ProfileParams { b_r: 10.0, c_m: 2.5, depth: 4 };
        assert_eq!(scaled_params(base, 1, &p).unwrap(), base);
        assert_eq!(scaled_params(base, 4, &p).unwrap(), DampeningParams { alpha: 100.0, lambda: 10.0 });
        let alphas: Vec<f32> = (1..=4).map(|l| scaled_params(base, l, &p).unwrap().alpha).collect();
        assert!(alphas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn midpoint_rules() {
        assert_eq!(derive_midpoint(&[0, 0, 0, 0]), 2.5);
        // smoothed: [5, 10/3, 0, 0]; above 0.5: layers 1..2
        assert_eq!(derive_midpoint(&[10, 0, 0, 0]), 1.5);
        assert_eq!(derive_midpoint(&[100, 100, 100, 100]), 2.5);
        // smoothed [0, 10, 10, 10, 0, 0, 0]: layers 2..4
        assert_eq!(derive_midpoint(&[0, 0, 30, 0, 0, 0, 0]), 3.0);
    }

    proptest! {
        #[test]
        fn dampening_never_grows_or_flips(
            w in proptest::collection::vec(-5.0f32..5.0, 6),
            f in proptest::collection::vec(0.0f32..3.0, 6),
            d in proptest::collection::vec(0.0f32..3.0, 6),
            alpha in 0.1f32..5.0,
            lambda in 0.01f32..5.0,
        ) {
            let mut m = small_model();
            m.param_layer_mut(1).unwrap().params[0] = Tensor::new(vec![3, 2], w.clone()).unwrap();
            let fi = vec![Tensor::new(vec![3, 2], f).unwrap(), Tensor::zeros(vec![2])];
            let di = vec![Tensor::new(vec![3, 2], d).unwrap(), Tensor::zeros(vec![2])];
            let r = dampen_layer(&mut m, 1, &fi, &di, DampeningParams { alpha, lambda }).unwrap();
            prop_assert!(r.selected <= r.parameters);
            for (before, after) in w.iter().zip(m.param_layer(1).unwrap().weight().data()) {
                prop_assert!(after.abs() <= before.abs());
                prop_assert!(*after == 0.0 || after.signum() == before.signum());
            }
        }

        #[test]
        fn profile_monotone_for_any_midpoint(depth in 2usize..33, frac in 0.0f64..1.0, b_r in 1.5f64..20.0) {
            let c_m = 1.0 + frac * (depth as f64 - 1.0);
            let p = ProfileParams { b_r, c_m, depth };
            prop_assert_eq!(profile_scale(1, &p).unwrap(), 1.0);
            prop_assert_eq!(profile_scale(depth, &p).unwrap(), b_r);
            let s: Vec<f64> = (1..=depth).map(|l| profile_scale(l, &p).unwrap()).collect();
            prop_assert!(s.windows(2).all(|w| w[1] > w[0]));
        }
    }
}
