//! Local neighbourhoods, simplex-constrained reconstruction weights and
//! effect composition.
//!
//! For a target `x_t` the composer picks nearby pool vectors, finds weights
//! `α ≥ 0, Σα = 1` minimising `‖x_t − Σ α_j x_j‖² + ridge·‖α‖²`, and reports
//! the residual `r = ‖x_t − Σ α_j x_j‖` and `ρ = r / s` where `s` is the
//! median distance from the target to the whole pool. The target is
//! composable when `ρ ≤ λ`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::representation::{euclidean, FeatureVector};

pub const DEFAULT_RADIUS_FACTOR: f64 = 1.5;
pub const DEFAULT_MAX_CANDIDATES: usize = 30;
pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const DEFAULT_LAMBDA: f64 = 0.462;

/// Simplex feasibility tolerance on the weight sum.
pub const SIMPLEX_TOL: f64 = 1e-6;
/// Required bound on `f(α) − f*`, certified by the Frank–Wolfe gap.
pub const OBJECTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ComposeError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("pool contains the target {0:?}")]
    TargetInPool(String),
    #[error("dimension mismatch: target has {expected}, {id:?} has {got}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("no candidates given")]
    NoCandidates,
    #[error("weight count {weights} does not match candidate count {candidates}")]
    WeightCount { weights: usize, candidates: usize },
    #[error("local scale is zero but residual is {0}")]
    ZeroScale(f64),
    #[error("local scale must be non-negative and finite, got {0}")]
    BadScale(f64),
    #[error("no observed effect for {0:?}")]
    MissingEffect(String),
    #[error("invalid composer config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposerConfig {
    pub radius_factor: f64,
    pub max_candidates: usize,
    pub ridge: f64,
    pub lambda: f64,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            radius_factor: DEFAULT_RADIUS_FACTOR,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            ridge: DEFAULT_RIDGE,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

impl ComposerConfig {
    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<(), ComposeError> {
        if !(self.radius_factor > 0.0 && self.radius_factor.is_finite()) {
            return Err(ComposeError::Config("radius_factor must be > 0"));
        }
        if self.max_candidates < 1 {
            return Err(ComposeError::Config("max_candidates must be >= 1"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(ComposeError::Config("ridge must be >= 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(ComposeError::Config("lambda must be > 0"));
        }
        Ok(())
    }
}

/// Candidate set around one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub target_id: String,
    /// Ascending by distance, ties by id.
    pub candidate_ids: Vec<String>,
    pub distances: Vec<f64>,
    /// Median distance over the full pool, before the radius cut and cap.
    pub local_scale: f64,
}

impl Neighborhood {
    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    pub fn nearest(&self, n: usize) -> Vec<String> {
        self.candidate_ids.iter().take(n).cloned().collect()
    }
}

/// Median with the mean-of-two-middles convention. `values` must be non-empty.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn select_candidates<'a, I>(
    target_id: &str,
    target: &FeatureVector,
    pool: I,
    cfg: &ComposerConfig,
) -> Result<Neighborhood, ComposeError>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let mut scored: Vec<(f64, &str)> = Vec::new();
    for (id, x) in pool {
        if id == target_id {
            return Err(ComposeError::TargetInPool(id.to_string()));
        }
        if x.len() != target.len() {
            return Err(ComposeError::Dimension {
                id: id.to_string(),
                expected: target.len(),
                got: x.len(),
            });
        }
        scored.push((target.distance(x), id));
    }
    if scored.is_empty() {
        return Err(ComposeError::EmptyPool);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let all: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let local_scale = median(&all);
    let radius = cfg.radius_factor * local_scale;
    let mut kept: Vec<(f64, &str)> = scored
        .iter()
        .copied()
        .take_while(|(d, _)| *d <= radius)
        .take(cfg.max_candidates)
        .collect();
    if kept.is_empty() {
        // Only reachable with radius_factor < 1; keep the nearest point.
        kept.push(scored[0]);
    }
    Ok(Neighborhood {
        target_id: target_id.to_string(),
        candidate_ids: kept.iter().map(|(_, id)| id.to_string()).collect(),
        distances: kept.iter().map(|(d, _)| *d).collect(),
        local_scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Optimal,
    FallbackUniform,
}

/// `‖x − Σ α_j c_j‖² + ridge·‖α‖²`, evaluated directly.
pub fn reconstruction_objective(target: &[f64], candidates: &[&[f64]], weights: &[f64], ridge: f64) -> f64 {
    let recon = combine(candidates, weights, target.len());
    let sq: f64 = target.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum();
    sq + ridge * weights.iter().map(|w| w * w).sum::<f64>()
}

fn combine(candidates: &[&[f64]], weights: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (c, w) in candidates.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(c.iter()) {
            *o += w * v;
        }
    }
    out
}

/// Euclidean projection onto `{α ≥ 0, Σα = 1}` (sort-and-threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Quadratic model of the objective in weight space: `αᵀGα − 2bᵀα + c`.
struct SimplexQp {
    gram: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl SimplexQp {
    fn new(target: &[f64], candidates: &[&[f64]], ridge: f64) -> Self {
        let k = candidates.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut gram = DMatrix::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let g = dot(candidates[i], candidates[j]);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
            gram[(i, i)] += ridge;
        }
        let linear = DVector::from_iterator(k, candidates.iter().map(|c| dot(c, target)));
        Self {
            gram,
            linear,
            constant: dot(target, target),
        }
    }

    fn value(&self, a: &DVector<f64>) -> f64 {
        (a.dot(&(&self.gram * a)) - 2.0 * self.linear.dot(a) + self.constant).max(0.0)
    }

    fn gradient(&self, a: &DVector<f64>) -> DVector<f64> {
        (&self.gram * a - &self.linear) * 2.0
    }

    /// Upper bound on `f(α) − f*` from convexity.
    fn frank_wolfe_gap(&self, a: &DVector<f64>) -> f64 {
        let g = self.gradient(a);
        let min_g = g.iter().copied().fold(f64::INFINITY, f64::min);
        (g.dot(a) - min_g).max(0.0)
    }

    /// Minimiser restricted to `support` with `Σα = 1`, ignoring `α ≥ 0`.
    fn solve_on_support(&self, support: &[usize]) -> Option<DVector<f64>> {
        let s = support.len();
        let mut kkt = DMatrix::zeros(s + 1, s + 1);
        let mut rhs = DVector::zeros(s + 1);
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                kkt[(r, c)] = 2.0 * self.gram[(i, j)];
            }
            kkt[(r, s)] = 1.0;
            kkt[(s, r)] = 1.0;
            rhs[r] = 2.0 * self.linear[i];
        }
        rhs[s] = 1.0;
        let sol = kkt.lu().solve(&rhs)?;
        let mut full = DVector::zeros(self.linear.len());
        for (r, &i) in support.iter().enumerate() {
            full[i] = sol[r];
        }
        full.iter().all(|v| v.is_finite()).then_some(full)
    }
}

const MAX_ACTIVE_SET_STEPS: usize = 500;
const MAX_GRADIENT_STEPS: usize = 20_000;

enum ActiveSetOutcome {
    Solved(DVector<f64>),
    /// An equality subproblem was singular (possible only without ridge).
    Singular,
}

/// Primal active-set method on the simplex, started from the best vertex.
fn active_set(qp: &SimplexQp) -> ActiveSetOutcome {
    let k = qp.linear.len();
    let start = (0..k)
        .min_by(|&i, &j| {
            let fi = qp.gram[(i, i)] - 2.0 * qp.linear[i];
            let fj = qp.gram[(j, j)] - 2.0 * qp.linear[j];
            fi.total_cmp(&fj)
        })
        .expect("k >= 1");
    let mut alpha = DVector::zeros(k);
    alpha[start] = 1.0;
    let mut free = vec![false; k];
    free[start] = true;

    for _ in 0..MAX_ACTIVE_SET_STEPS {
        let support: Vec<usize> = (0..k).filter(|&i| free[i]).collect();
        let Some(target) = qp.solve_on_support(&support) else {
            return ActiveSetOutcome::Singular;
        };
        let direction = &target - &alpha;
        if direction.amax() > 1e-14 {
            // Longest feasible step towards the subproblem minimiser.
            let mut step = 1.0;
            let mut blocking = None;
            for &i in &support {
                if direction[i] < 0.0 {
                    let limit = alpha[i] / -direction[i];
                    if limit < step {
                        step = limit;
                        blocking = Some(i);
                    }
                }
            }
            alpha += &direction * step;
            if let Some(i) = blocking {
                alpha[i] = 0.0;
                free[i] = false;
            }
            continue;
        }
        // Subproblem optimal: release the most violated bound, if any.
        let g = qp.gradient(&alpha);
        let level = support.iter().map(|&i| g[i]).sum::<f64>() / support.len() as f64;
        let slack = 1e-12 * (1.0 + g.amax());
        let entering = (0..k)
            .filter(|&i| !free[i] && g[i] < level - slack)
            .min_by(|&i, &j| g[i].total_cmp(&g[j]));
        match entering {
            Some(i) => free[i] = true,
            None => break,
        }
    }
    ActiveSetOutcome::Solved(DVector::from_vec(project_to_simplex(alpha.as_slice())))
}

fn accelerated_projected_gradient(qp: &SimplexQp, step: f64) -> DVector<f64> {
    let k = qp.linear.len();
    let project = |v: &DVector<f64>| DVector::from_vec(project_to_simplex(v.as_slice()));
    let mut x = DVector::from_element(k, 1.0 / k as f64);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut f_prev = qp.value(&x);
    for it in 0..MAX_GRADIENT_STEPS {
        let x_next = project(&(&y - qp.gradient(&y) * step));
        let f_next = qp.value(&x_next);
        if f_next > f_prev {
            // Function-value restart.
            y = x.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
        x = x_next;
        t = t_next;
        f_prev = f_next;
        if it % 16 == 0 && qp.frank_wolfe_gap(&x) <= 1e-10 * (1.0 + f_prev) {
            break;
        }
    }
    x
}

/// Simplex-constrained ridge reconstruction weights.
///
/// A primal active-set method does the work. When one of its equality
/// subproblems is singular (no ridge and collinear candidates), accelerated
/// projected gradient takes over. The result is accepted when its
/// Frank–Wolfe gap certifies objective accuracy [`OBJECTIVE_TOL`];
/// otherwise uniform weights are returned with
/// [`SolverStatus::FallbackUniform`].
pub fn solve_weights(
    target: &FeatureVector,
    candidates: &[&FeatureVector],
    ridge: f64,
) -> Result<(Vec<f64>, SolverStatus), ComposeError> {
    let cands: Vec<&[f64]> = candidates.iter().map(|c| c.as_slice()).collect();
    for (i, c) in cands.iter().enumerate() {
        if c.len() != target.len() {
            return Err(ComposeError::Dimension {
                id: format!("candidate #{i}"),
                expected: target.len(),
                got: c.len(),
            });
        }
    }
    solve_simplex_ridge(target.as_slice(), &cands, ridge)
}

/// Slice-level form of [`solve_weights`].
pub fn solve_simplex_ridge(
    target: &[f64],
    candidates: &[&[f64]],
    ridge: f64,
) -> Result<(Vec<f64>, SolverStatus), ComposeError> {
    let k = candidates.len();
    if k == 0 {
        return Err(ComposeError::NoCandidates);
    }
    if k == 1 {
        return Ok((vec![1.0], SolverStatus::Optimal));
    }
    let uniform = || (vec![1.0 / k as f64; k], SolverStatus::FallbackUniform);
    let qp = SimplexQp::new(target, candidates, ridge);
    if qp.gram.iter().chain(qp.linear.iter()).any(|v| !v.is_finite()) {
        return Ok(uniform());
    }
    let alpha = match active_set(&qp) {
        ActiveSetOutcome::Solved(alpha) => alpha,
        ActiveSetOutcome::Singular => {
            let lipschitz = 2.0
                * SymmetricEigen::new(qp.gram.clone())
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(0.0f64, f64::max);
            if lipschitz > 0.0 && lipschitz.is_finite() {
                accelerated_projected_gradient(&qp, 1.0 / lipschitz)
            } else {
                // Zero gram matrix: every feasible point is optimal.
                DVector::from_element(k, 1.0 / k as f64)
            }
        }
    };
    let sum: f64 = alpha.iter().sum();
    let feasible = alpha.iter().all(|v| v.is_finite() && *v >= 0.0) && (sum - 1.0).abs() <= SIMPLEX_TOL;
    if !feasible || qp.frank_wolfe_gap(&alpha) > OBJECTIVE_TOL {
        log::warn!("simplex solver did not certify optimality; using uniform weights");
        return Ok(uniform());
    }
    Ok((alpha.iter().copied().collect(), SolverStatus::Optimal))
}

/// Returns `(r, ρ)`. With a zero local scale, `ρ = 0` when `r = 0` and an
/// error otherwise.
pub fn residuals(
    target: &FeatureVector,
    candidates: &[&FeatureVector],
    weights: &[f64],
    local_scale: f64,
) -> Result<(f64, f64), ComposeError> {
    if weights.len() != candidates.len() {
        return Err(ComposeError::WeightCount {
            weights: weights.len(),
            candidates: candidates.len(),
        });
    }
    if !(local_scale >= 0.0 && local_scale.is_finite()) {
        return Err(ComposeError::BadScale(local_scale));
    }
    let cands: Vec<&[f64]> = candidates.iter().map(|c| c.as_slice()).collect();
    let recon = combine(&cands, weights, target.len());
    let r = euclidean(target.as_slice(), &recon);
    if local_scale == 0.0 {
        return if r == 0.0 { Ok((0.0, 0.0)) } else { Err(ComposeError::ZeroScale(r)) };
    }
    Ok((r, r / local_scale))
}

pub fn compose_effect(weights: &BTreeMap<String, f64>, effects: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ComposeError> {
    weights.iter().try_fold(0.0, |acc, (id, w)| {
        effects(id)
            .map(|tau| acc + w * tau)
            .ok_or_else(|| ComposeError::MissingEffect(id.clone()))
    })
}

/// Map-based convenience over [`compose_effect`].
pub fn compose_effect_map(weights: &BTreeMap<String, f64>, effects: &BTreeMap<String, f64>) -> Result<f64, ComposeError> {
    compose_effect(weights, &|id| effects.get(id).copied())
}

/// Geometry of one reconstruction, independent of effects and of λ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub neighborhood: Neighborhood,
    /// Parallel to `neighborhood.candidate_ids`.
    pub weights: Vec<f64>,
    pub status: SolverStatus,
    pub residual: f64,
    pub normalized_residual: f64,
}

impl Fit {
    pub fn weight_map(&self) -> BTreeMap<String, f64> {
        self.neighborhood
            .candidate_ids
            .iter()
            .cloned()
            .zip(self.weights.iter().copied())
            .collect()
    }

    pub fn is_composable(&self, lambda: f64) -> bool {
        self.normalized_residual <= lambda
    }
}

/// select → solve → residuals.
pub fn fit_target<'a, I>(target_id: &str, target: &FeatureVector, pool: I, cfg: &ComposerConfig) -> Result<Fit, ComposeError>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    cfg.validate()?;
    let pool: Vec<(&str, &FeatureVector)> = pool.into_iter().collect();
    let neighborhood = select_candidates(target_id, target, pool.iter().copied(), cfg)?;
    let lookup: BTreeMap<&str, &FeatureVector> = pool.into_iter().collect();
    let cands: Vec<&FeatureVector> = neighborhood
        .candidate_ids
        .iter()
        .map(|id| lookup[id.as_str()])
        .collect();
    let (weights, status) = solve_weights(target, &cands, cfg.ridge)?;
    let (residual, normalized_residual) = residuals(target, &cands, &weights, neighborhood.local_scale)?;
    Ok(Fit {
        neighborhood,
        weights,
        status,
        residual,
        normalized_residual,
    })
}

/// Result of assessing one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    pub target_id: String,
    pub weights: BTreeMap<String, f64>,
    #[serde(rename = "r")]
    pub residual: f64,
    #[serde(rename = "rho")]
    pub normalized_residual: f64,
    pub composed_effect: f64,
    pub composable: bool,
    pub solver_status: SolverStatus,
}

impl Composition {
    /// Same composition gated at a different threshold.
    pub fn regate(&self, lambda: f64) -> Composition {
        Composition {
            composable: self.normalized_residual <= lambda,
            ..self.clone()
        }
    }

    /// Source ids with positive weight, heaviest first (ties by id).
    pub fn contributors(&self) -> Vec<(&str, f64)> {
        let mut v: Vec<(&str, f64)> = self
            .weights
            .iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|(id, w)| (id.as_str(), *w))
            .collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(b.0)));
        v
    }
}

/// A composition together with the neighbourhood that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub neighborhood: Neighborhood,
    pub composition: Composition,
}

impl Assessment {
    pub fn from_fit(fit: Fit, effects: &dyn Fn(&str) -> Option<f64>, lambda: f64) -> Result<Self, ComposeError> {
        let weights = fit.weight_map();
        let composed_effect = compose_effect(&weights, effects)?;
        let composition = Composition {
            target_id: fit.neighborhood.target_id.clone(),
            weights,
            residual: fit.residual,
            normalized_residual: fit.normalized_residual,
            composed_effect,
            composable: fit.normalized_residual <= lambda,
            solver_status: fit.status,
        };
        Ok(Self {
            neighborhood: fit.neighborhood,
            composition,
        })
    }

    pub fn regate(&self, lambda: f64) -> Assessment {
        Assessment {
            neighborhood: self.neighborhood.clone(),
            composition: self.composition.regate(lambda),
        }
    }
}

/// Full assessment: geometry plus composed effect. `composed_effect` is
/// filled even when the target is not composable.
pub fn assess<'a, I>(
    target_id: &str,
    target: &FeatureVector,
    pool: I,
    effects: &dyn Fn(&str) -> Option<f64>,
    cfg: &ComposerConfig,
) -> Result<Assessment, ComposeError>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let fit = fit_target(target_id, target, pool, cfg)?;
    Assessment::from_fit(fit, effects, cfg.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::from_raw(v.to_vec())
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[5.0]), 5.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]), 2.5);
    }

    #[test]
    fn radius_cut_example() {
        let target = fv(&[0.0]);
        let pool = [("a", fv(&[1.0])), ("b", fv(&[-2.0])), ("c", fv(&[3.0])), ("d", fv(&[10.0]))];
        let n = select_candidates("t", &target, pool.iter().map(|(i, x)| (*i, x)), &ComposerConfig::default()).unwrap();
        assert_eq!(n.local_scale, 2.5);
        assert_eq!(n.candidate_ids, ["a", "b", "c"]);
        assert_eq!(n.distances, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn cap_keeps_lexicographically_smallest_on_ties() {
        let target = fv(&[0.0, 0.0]);
        // Inserted in reverse so ordering must come from the tie rule.
        let pool: Vec<(String, FeatureVector)> = (0..40)
            .rev()
            .map(|i| (format!("e{i:02}"), fv(&[0.0, 1.0])))
            .collect();
        let n = select_candidates("t", &target, pool.iter().map(|(i, x)| (i.as_str(), x)), &ComposerConfig::default()).unwrap();
        assert_eq!(n.len(), 30);
        let expected: Vec<String> = (0..30).map(|i| format!("e{i:02}")).collect();
        assert_eq!(n.candidate_ids, expected);
        assert_eq!(n.local_scale, 1.0);
    }

    #[test]
    fn singleton_pool() {
        let pool = [("only", fv(&[3.0, 4.0]))];
        let n = select_candidates("t", &fv(&[0.0, 0.0]), pool.iter().map(|(i, x)| (*i, x)), &ComposerConfig::default()).unwrap();
        assert_eq!(n.candidate_ids, ["only"]);
        assert_eq!(n.local_scale, 5.0);
    }

    #[test]
    fn pool_errors() {
        let cfg = ComposerConfig::default();
        let empty: Vec<(&str, &FeatureVector)> = vec![];
        assert_eq!(select_candidates("t", &fv(&[0.0]), empty, &cfg), Err(ComposeError::EmptyPool));
        let x = fv(&[1.0]);
        assert_eq!(
            select_candidates("t", &fv(&[0.0]), [("t", &x)], &cfg),
            Err(ComposeError::TargetInPool("t".into()))
        );
        let y = fv(&[1.0, 2.0]);
        assert!(matches!(
            select_candidates("t", &fv(&[0.0]), [("y", &y)], &cfg),
            Err(ComposeError::Dimension { .. })
        ));
    }

    #[test]
    fn symmetric_midpoint_gets_equal_weights() {
        let a = fv(&[1.0, 1.0, 0.0]);
        let b = fv(&[-1.0, 1.0, 0.0]);
        let (w, status) = solve_weights(&fv(&[0.0, 1.0, 0.0]), &[&a, &b], 1e-2).unwrap();
        assert_eq!(status, SolverStatus::Optimal);
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[1] - 0.5).abs() < 1e-9, "{w:?}");
    }

    #[test]
    fn single_candidate_weight_is_one() {
        for ridge in [0.0, 1e-2, 10.0] {
            let (w, status) = solve_weights(&fv(&[1.0, 2.0]), &[&fv(&[5.0, -1.0])], ridge).unwrap();
            assert_eq!((w, status), (vec![1.0], SolverStatus::Optimal));
        }
    }

    #[test]
    fn dimension_mismatch_in_solver() {
        let err = solve_weights(&fv(&[1.0, 2.0]), &[&fv(&[1.0])], 0.0).unwrap_err();
        assert!(matches!(err, ComposeError::Dimension { expected: 2, got: 1, .. }));
    }

    #[test]
    fn non_finite_input_falls_back_to_uniform() {
        let (w, status) = solve_weights(&fv(&[1.0]), &[&fv(&[f64::NAN]), &fv(&[0.0]), &fv(&[2.0])], 1e-2).unwrap();
        assert_eq!(status, SolverStatus::FallbackUniform);
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn residual_examples() {
        let c = fv(&[0.0, 0.8]);
        let (r, rho) = residuals(&fv(&[0.0, 0.0]), &[&c], &[1.0], 2.0).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
        assert!((rho - 0.4).abs() < 1e-15);
        let (r, rho) = residuals(&fv(&[1.0]), &[&fv(&[0.0]), &fv(&[2.0])], &[0.5, 0.5], 1.0).unwrap();
        assert_eq!((r, rho), (0.0, 0.0));
        assert_eq!(residuals(&fv(&[1.0]), &[&fv(&[1.0])], &[1.0], 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(
            residuals(&fv(&[1.0]), &[&fv(&[0.0])], &[1.0], 0.0),
            Err(ComposeError::ZeroScale(1.0))
        );
    }

    #[test]
    fn compose_effect_examples() {
        let m = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>();
        assert!((compose_effect_map(&m(&[("a", 1.0)]), &m(&[("a", 2.3)])).unwrap() - 2.3).abs() < 1e-15);
        assert_eq!(compose_effect_map(&m(&[("a", 0.5), ("b", 0.5)]), &m(&[("a", 1.0), ("b", -1.0)])).unwrap(), 0.0);
        let v = compose_effect_map(&m(&[("a", 0.2), ("b", 0.3), ("c", 0.5)]), &m(&[("a", 1.0), ("b", 2.0), ("c", 3.0)])).unwrap();
        assert!((v - 2.3).abs() < 1e-12);
        assert!((compose_effect_map(&m(&[("a", 0.25), ("b", 0.75)]), &m(&[("a", -1.0), ("b", 1.0)])).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            compose_effect_map(&m(&[("zz", 1.0)]), &m(&[("a", 1.0)])),
            Err(ComposeError::MissingEffect("zz".into()))
        );
    }

    #[test]
    fn assess_gates_on_lambda() {
        let fit = Fit {
            neighborhood: Neighborhood {
                target_id: "t".into(),
                candidate_ids: vec!["a".into(), "b".into()],
                distances: vec![1.0, 1.0],
                local_scale: 1.0,
            },
            weights: vec![0.25, 0.75],
            status: SolverStatus::Optimal,
            residual: 0.3,
            normalized_residual: 0.30,
        };
        let effects = |id: &str| match id {
            "a" => Some(-1.0),
            "b" => Some(1.0),
            _ => None,
        };
        let a = Assessment::from_fit(fit.clone(), &effects, 0.462).unwrap();
        assert!(a.composition.composable);
        assert!((a.composition.composed_effect - 0.5).abs() < 1e-15);
        let rejected = Assessment::from_fit(Fit { normalized_residual: 0.5, ..fit }, &effects, 0.462).unwrap();
        assert!(!rejected.composition.composable);
        assert!((rejected.composition.composed_effect - 0.5).abs() < 1e-15);
    }

    #[test]
    fn composition_record_field_names() {
        let c = Composition {
            target_id: "t".into(),
            weights: [("a".to_string(), 1.0)].into_iter().collect(),
            residual: 0.1,
            normalized_residual: 0.2,
            composed_effect: 0.3,
            composable: true,
            solver_status: SolverStatus::FallbackUniform,
        };
        let v = serde_json::to_value(&c).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["target_id", "weights", "r", "rho", "composed_effect", "composable", "solver_status"]);
        assert_eq!(v["solver_status"], "fallback-uniform");
    }

    #[test]
    fn simplex_projection_basics() {
        assert_eq!(project_to_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project_to_simplex(&[5.0, 0.0]), vec![1.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 0.5]);
        assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, f64)> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(d, k)| {
            (
                prop::collection::vec(-2.0f64..2.0, d),
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k),
                prop_oneof![Just(0.0), Just(1e-2), Just(1.0)],
            )
        })
    }

    proptest! {
        #[test]
        fn weights_always_on_simplex((x, cands, ridge) in instance()) {
            let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
            let (w, _) = solve_simplex_ridge(&x, &refs, ridge).unwrap();
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL);
        }

        #[test]
        fn residual_matches_direct_norm((x, cands, ridge) in instance()) {
            let refs: Vec<&[f64]> = cands.iter().map(Vec::as_slice).collect();
            let (w, _) = solve_simplex_ridge(&x, &refs, ridge).unwrap();
            let fx = fv(&x);
            let fc: Vec<FeatureVector> = cands.iter().map(|c| fv(c)).collect();
            let fr: Vec<&FeatureVector> = fc.iter().collect();
            let (r, rho) = residuals(&fx, &fr, &w, 2.0).unwrap();
            let mut err = x.clone();
            for (c, wj) in cands.iter().zip(&w) {
                for (e, v) in err.iter_mut().zip(c) { *e -= wj * v; }
            }
            let direct = err.iter().map(|e| e * e).sum::<f64>().sqrt();
            prop_assert!((r - direct).abs() <= 1e-9);
            prop_assert_eq!(rho, r / 2.0);
        }

        #[test]
        fn gating_is_monotone(rho in 0.0f64..3.0, l1 in 0.01f64..3.0, extra in 0.0f64..3.0) {
            let c = Composition {
                target_id: "t".into(), weights: BTreeMap::new(), residual: rho, normalized_residual: rho,
                composed_effect: 0.0, composable: false, solver_status: SolverStatus::Optimal,
            };
            if c.regate(l1).composable { prop_assert!(c.regate(l1 + extra).composable); }
        }

        #[test]
        fn composition_is_linear_in_effects(
            raw in prop::collection::vec((0.0f64..1.0, -5.0f64..5.0, -5.0f64..5.0), 1..8),
            a in -3.0f64..3.0, b in -3.0f64..3.0,
        ) {
            let total: f64 = raw.iter().map(|r| r.0).sum::<f64>().max(1e-9);
            let w: BTreeMap<String, f64> = raw.iter().enumerate().map(|(i, r)| (format!("e{i}"), r.0 / total)).collect();
            let t1: BTreeMap<String, f64> = raw.iter().enumerate().map(|(i, r)| (format!("e{i}"), r.1)).collect();
            let t2: BTreeMap<String, f64> = raw.iter().enumerate().map(|(i, r)| (format!("e{i}"), r.2)).collect();
            let mix: BTreeMap<String, f64> = t1.keys().map(|k| (k.clone(), a * t1[k] + b * t2[k])).collect();
            let lhs = compose_effect_map(&w, &mix).unwrap();
            let rhs = a * compose_effect_map(&w, &t1).unwrap() + b * compose_effect_map(&w, &t2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9);
        }
    }
}
