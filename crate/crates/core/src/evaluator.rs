//! Leave-one-out evaluation, prediction metrics and threshold calibration.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{Archive, Experiment};
use crate::composer::{assess, Assessment, ComposeError, ComposerConfig};
use crate::representation::FeatureMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("insufficient data: {0}")]
    Insufficient(&'static str),
    #[error("no feature vector for {0:?}")]
    MissingFeature(String),
    #[error("assessing {id:?}: {source}")]
    Compose {
        id: String,
        #[source]
        source: ComposeError,
    },
    #[error("invalid calibration grid: {0}")]
    Grid(&'static str),
}

/// `-1`, `0` or `1`. Zero has its own sign.
pub fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Same direction, where zero only matches zero.
pub fn sign_match(pred: f64, obs: f64) -> bool {
    sign(pred) == sign(obs)
}

/// Per-target outcome of a leave-one-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target_id: String,
    pub observed_effect: f64,
    pub predicted_effect: f64,
    pub rho: f64,
    pub composable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign_matched: Option<bool>,
}

impl TargetResult {
    pub fn new(target_id: String, observed: f64, predicted: f64, rho: f64, lambda: f64) -> Self {
        let composable = rho <= lambda;
        Self {
            target_id,
            observed_effect: observed,
            predicted_effect: predicted,
            rho,
            composable,
            sign_matched: composable.then(|| sign_match(predicted, observed)),
        }
    }
}

/// Average (fractional) ranks, 1-based; ties share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ as the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Insufficient("spearman inputs differ in length"));
    }
    if a.len() < 2 {
        return Err(EvalError::Insufficient("spearman needs at least 2 points"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(EvalError::Insufficient("zero rank variance"));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sign_match_rate: f64,
    pub mse: f64,
    pub mae: f64,
    /// `None` when fewer than two points or no rank variance.
    pub spearman: Option<f64>,
}

/// Sign match, MSE, MAE and Spearman over the given (composable) results.
pub fn metrics(results: &[TargetResult]) -> Result<Metrics, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Insufficient("no composable targets"));
    }
    let m = results.len() as f64;
    let matched = results
        .iter()
        .filter(|r| sign_match(r.predicted_effect, r.observed_effect))
        .count();
    let errors: Vec<f64> = results.iter().map(|r| r.predicted_effect - r.observed_effect).collect();
    let pred: Vec<f64> = results.iter().map(|r| r.predicted_effect).collect();
    let obs: Vec<f64> = results.iter().map(|r| r.observed_effect).collect();
    Ok(Metrics {
        sign_match_rate: matched as f64 / m,
        mse: errors.iter().map(|e| e * e).sum::<f64>() / m,
        mae: errors.iter().map(|e| e.abs()).sum::<f64>() / m,
        spearman: spearman(&pred, &obs).ok(),
    })
}

pub fn mean_squared_error(results: &[TargetResult]) -> Option<f64> {
    (!results.is_empty()).then(|| {
        results
            .iter()
            .map(|r| (r.predicted_effect - r.observed_effect).powi(2))
            .sum::<f64>()
            / results.len() as f64
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub n_composable: usize,
    pub coverage: f64,
    pub sign_match_rate: Option<f64>,
    pub mse: Option<f64>,
    pub mae: Option<f64>,
    pub spearman: Option<f64>,
    pub lambda_used: f64,
}

impl EvalReport {
    pub fn from_results(results: &[TargetResult], lambda: f64) -> Self {
        let composable: Vec<TargetResult> = results.iter().filter(|r| r.composable).cloned().collect();
        let m = metrics(&composable).ok();
        Self {
            n_total: results.len(),
            n_composable: composable.len(),
            coverage: if results.is_empty() {
                0.0
            } else {
                composable.len() as f64 / results.len() as f64
            },
            sign_match_rate: m.map(|m| m.sign_match_rate),
            mse: m.map(|m| m.mse),
            mae: m.map(|m| m.mae),
            spearman: m.and_then(|m| m.spearman),
            lambda_used: lambda,
        }
    }

    /// Text table: Method, Sign match, MSE, MAE, Spearman ρ.
    pub fn render_table(&self, method: &str) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let num = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ["Method".to_string(), "Sign match".into(), "MSE".into(), "MAE".into(), "Spearman ρ".into()],
            [method.to_string(), pct(self.sign_match_rate), num(self.mse), num(self.mae), num(self.spearman)],
        ];
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
            }
        }
        let _ = writeln!(
            out,
            "composable {}/{} (coverage {:.4}) at lambda {}",
            self.n_composable, self.n_total, self.coverage, self.lambda_used
        );
        out
    }
}

/// Produces the assessment for one held-out target.
pub trait TargetAssessor: Sync {
    fn assess_target(&self, target: &Experiment) -> Result<Assessment, EvalError>;
}

/// Assesses each target against every other experiment of the archive.
pub struct LeaveOneOut<'a> {
    pub archive: &'a Archive,
    pub features: &'a FeatureMatrix,
    pub cfg: ComposerConfig,
}

impl<'a> LeaveOneOut<'a> {
    pub fn new(archive: &'a Archive, features: &'a FeatureMatrix, cfg: ComposerConfig) -> Result<Self, EvalError> {
        if archive.len() < 2 {
            return Err(EvalError::Insufficient("leave-one-out needs at least 2 experiments"));
        }
        if let Some(missing) = archive.ids().find(|id| features.get(id).is_none()) {
            return Err(EvalError::MissingFeature(missing.to_string()));
        }
        Ok(Self { archive, features, cfg })
    }
}

impl TargetAssessor for LeaveOneOut<'_> {
    fn assess_target(&self, target: &Experiment) -> Result<Assessment, EvalError> {
        let x_t = self
            .features
            .get(&target.id)
            .ok_or_else(|| EvalError::MissingFeature(target.id.clone()))?;
        let pool = self
            .archive
            .iter()
            .filter(|e| e.id != target.id)
            .map(|e| (e.id.as_str(), &self.features.vectors[&e.id]));
        let effects = |id: &str| self.archive.get(id).map(|e| e.effect_size);
        assess(&target.id, x_t, pool, &effects, &self.cfg).map_err(|source| EvalError::Compose {
            id: target.id.clone(),
            source,
        })
    }
}

/// One assessment per experiment, in archive order.
pub fn loo_assessments(archive: &Archive, assessor: &dyn TargetAssessor) -> Result<Vec<Assessment>, EvalError> {
    archive
        .experiments()
        .par_iter()
        .map(|e| assessor.assess_target(e))
        .collect()
}

pub fn results_from_assessments(archive: &Archive, assessments: &[Assessment], lambda: f64) -> Vec<TargetResult> {
    archive
        .iter()
        .zip(assessments)
        .map(|(exp, a)| {
            TargetResult::new(
                exp.id.clone(),
                exp.effect_size,
                a.composition.composed_effect,
                a.composition.normalized_residual,
                lambda,
            )
        })
        .collect()
}

pub fn loo_run(archive: &Archive, features: &FeatureMatrix, cfg: &ComposerConfig) -> Result<Vec<TargetResult>, EvalError> {
    let loo = LeaveOneOut::new(archive, features, *cfg)?;
    let assessments = loo_assessments(archive, &loo)?;
    Ok(results_from_assessments(archive, &assessments, cfg.lambda))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub grid: Vec<f64>,
    pub coverage_at: Vec<f64>,
    /// `None` where no target is composable.
    pub mse_at: Vec<Option<f64>>,
    pub scaled_mse_at: Vec<f64>,
    pub objective_at: Vec<f64>,
    pub chosen_lambda: f64,
}

/// One line of a calibration curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub lambda: f64,
    pub coverage: f64,
    pub mse: Option<f64>,
    pub scaled_mse: f64,
    pub objective: f64,
}

impl CalibrationCurve {
    pub fn points(&self) -> Vec<CalibrationPoint> {
        (0..self.grid.len())
            .map(|i| CalibrationPoint {
                lambda: self.grid[i],
                coverage: self.coverage_at[i],
                mse: self.mse_at[i],
                scaled_mse: self.scaled_mse_at[i],
                objective: self.objective_at[i],
            })
            .collect()
    }
}

/// `start, start+step, …` up to and including `end` (within half a step).
pub fn lambda_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>, EvalError> {
    if !(step > 0.0 && start > 0.0 && end >= start) || !(start.is_finite() && end.is_finite()) {
        return Err(EvalError::Grid("need 0 < start <= end and step > 0"));
    }
    let n = ((end - start) / step + 0.5).floor() as usize;
    // Rounded to 12 decimals so grid points print as written.
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// 0.05 to 1.50, step 0.005.
pub fn default_grid() -> Vec<f64> {
    lambda_grid(0.05, 1.50, 0.005).expect("static grid is valid")
}

/// Calibration from precomputed per-target `(ρ, τ̂, τ)`; weights do not
/// depend on λ so a single leave-one-out pass serves every grid point.
pub fn calibrate_from_results(results: &[TargetResult], grid: &[f64]) -> Result<CalibrationCurve, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::Grid("empty grid"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(EvalError::Grid("grid must be strictly increasing"));
    }
    let n = results.len();
    let mut coverage_at = Vec::with_capacity(grid.len());
    let mut mse_at = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let composable: Vec<TargetResult> = results.iter().filter(|r| r.rho <= lambda).cloned().collect();
        coverage_at.push(if n == 0 { 0.0 } else { composable.len() as f64 / n as f64 });
        mse_at.push(mean_squared_error(&composable));
    }
    let defined: Vec<f64> = mse_at.iter().flatten().copied().collect();
    let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled_mse_at: Vec<f64> = mse_at
        .iter()
        .map(|m| match m {
            Some(m) if hi > lo => (m - lo) / (hi - lo),
            Some(_) => 0.0,
            None => 1.0,
        })
        .collect();
    let objective_at: Vec<f64> = scaled_mse_at
        .iter()
        .zip(&coverage_at)
        .zip(&mse_at)
        .map(|((s, c), m)| if m.is_some() { (1.0 - s) * c } else { 0.0 })
        .collect();
    // First maximum, i.e. the smallest λ among ties.
    let mut best = 0;
    for (i, v) in objective_at.iter().enumerate() {
        if *v > objective_at[best] {
            best = i;
        }
    }
    Ok(CalibrationCurve {
        grid: grid.to_vec(),
        coverage_at,
        mse_at,
        scaled_mse_at,
        objective_at,
        chosen_lambda: grid[best],
    })
}

/// Runs one leave-one-out pass through `assessor` and calibrates on `grid`.
pub fn calibrate_with(archive: &Archive, assessor: &dyn TargetAssessor, grid: &[f64]) -> Result<(CalibrationCurve, Vec<Assessment>), EvalError> {
    let assessments = loo_assessments(archive, assessor)?;
    // λ here only fills the composable flag, which calibration ignores.
    let results = results_from_assessments(archive, &assessments, f64::INFINITY);
    Ok((calibrate_from_results(&results, grid)?, assessments))
}

pub fn calibrate_lambda(
    archive: &Archive,
    features: &FeatureMatrix,
    cfg: &ComposerConfig,
    grid: &[f64],
) -> Result<CalibrationCurve, EvalError> {
    let loo = LeaveOneOut::new(archive, features, *cfg)?;
    calibrate_with(archive, &loo, grid).map(|(curve, _)| curve)
}
