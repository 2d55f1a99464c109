//! Synthetic worlds with quadratic effect surfaces for checking the
//! composition error bound against ground truth.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composer::solve_simplex_ridge;
use crate::representation::splitmix64;

/// Absolute tolerance on the bound comparison.
pub const BOUND_TOL: f64 = 1e-9;
/// Allowed distance of weights from the simplex.
pub const WEIGHT_TOL: f64 = 1e-6;
/// Rounding allowance on the residual floor `2δ`.
pub const FLOOR_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid world parameters: {0}")]
    Params(&'static str),
    #[error("target index {0} out of range")]
    Target(usize),
    #[error("weights are off the simplex: {0}")]
    Weights(String),
}

/// `μ(m) = c + g·m + ½ mᵀQm`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSurface {
    pub c: f64,
    pub g: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl QuadraticSurface {
    pub fn eval(&self, m: &DVector<f64>) -> f64 {
        self.c + self.g.dot(m) + 0.5 * m.dot(&(&self.q * m))
    }

    /// Largest absolute eigenvalue of the symmetric `Q`.
    pub fn operator_norm(&self) -> f64 {
        op_norm(&self.q)
    }
}

fn op_norm(q: &DMatrix<f64>) -> f64 {
    if q.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(q.clone())
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub latent_dim: usize,
    pub points: Vec<DVector<f64>>,
    pub surface: QuadraticSurface,
    pub lipschitz_l: f64,
    pub hessian_h: f64,
    pub noise_bound: f64,
    pub noises: Vec<f64>,
    pub region_radius: f64,
    pub seed: u64,
}

impl SyntheticWorld {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Observed effect `τ_i = μ(m_i) + ε_i`.
    pub fn effect(&self, i: usize) -> f64 {
        self.surface.eval(&self.points[i]) + self.noises[i]
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; 1 - u keeps the log argument in (0, 1].
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| standard_normal(rng));
        let n = v.norm();
        if n > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
            return v * (r / n);
        }
    }
}

/// Samples a world: points uniform in the ball of `region_radius`, a
/// quadratic surface with `‖Q‖_op = H`, and noises uniform in `[−δ, δ]`.
pub fn sample_world(seed: u64, n: usize, d: usize, h: f64, delta: f64, region_radius: f64) -> Result<SyntheticWorld, TheoryError> {
    if n < 3 {
        return Err(TheoryError::Params("n must be >= 3"));
    }
    if d < 1 {
        return Err(TheoryError::Params("d must be >= 1"));
    }
    if !(h >= 0.0 && h.is_finite()) {
        return Err(TheoryError::Params("H must be finite and >= 0"));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(TheoryError::Params("delta must be finite and >= 0"));
    }
    if !(region_radius > 0.0 && region_radius.is_finite()) {
        return Err(TheoryError::Params("region radius must be > 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<DVector<f64>> = (0..n).map(|_| uniform_in_ball(&mut rng, d, region_radius)).collect();
    let c = rng.random_range(-1.0..1.0);
    let g = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let sym = (&a + a.transpose()) * 0.5;
    let norm = op_norm(&sym);
    let q = if h == 0.0 || norm == 0.0 {
        DMatrix::zeros(d, d)
    } else {
        sym * (h / norm)
    };
    let measured = op_norm(&q);
    if measured > h * (1.0 + 1e-12) + 1e-300 {
        return Err(TheoryError::Params("curvature rescaling exceeded H"));
    }
    let noises = (0..n)
        .map(|_| if delta == 0.0 { 0.0 } else { rng.random_range(-delta..=delta) })
        .collect();
    let lipschitz_l = g.norm() + h * region_radius;
    Ok(SyntheticWorld {
        latent_dim: d,
        points,
        surface: QuadraticSurface { c, g, q },
        lipschitz_l,
        hessian_h: h,
        noise_bound: delta,
        noises,
        region_radius,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub realized_error: f64,
    pub term_extrapolation: f64,
    pub term_curvature: f64,
    pub term_residual: f64,
    pub bound: f64,
    pub holds: bool,
    pub slack: f64,
}

fn check_weights(world: &SyntheticWorld, target: usize, weights: &[f64]) -> Result<(), TheoryError> {
    if target >= world.len() {
        return Err(TheoryError::Target(target));
    }
    if weights.len() != world.len() {
        return Err(TheoryError::Weights(format!("{} weights for {} points", weights.len(), world.len())));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < -WEIGHT_TOL) {
        return Err(TheoryError::Weights("negative or non-finite weight".into()));
    }
    if weights[target].abs() > WEIGHT_TOL {
        return Err(TheoryError::Weights("target carries weight".into()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOL {
        return Err(TheoryError::Weights(format!("weights sum to {sum}")));
    }
    Ok(())
}

/// Evaluates the three-term bound for one target. `weights` has one entry
/// per point; the target's entry must be zero.
pub fn check_bound(world: &SyntheticWorld, target: usize, weights: &[f64]) -> Result<BoundReport, TheoryError> {
    check_weights(world, target, weights)?;
    let d = world.latent_dim;
    let mut m_bar = DVector::zeros(d);
    let mut tau_comp = 0.0;
    let mut noise_comp = 0.0;
    for (j, &w) in weights.iter().enumerate() {
        if j == target || w == 0.0 {
            continue;
        }
        m_bar += &world.points[j] * w;
        tau_comp += w * world.effect(j);
        noise_comp += w * world.noises[j];
    }
    let eps_t = &world.points[target] - &m_bar;
    let spread: f64 = weights
        .iter()
        .enumerate()
        .filter(|(j, w)| *j != target && **w != 0.0)
        .map(|(j, w)| w * (&world.points[j] - &m_bar).norm_squared())
        .sum();
    let realized_error = (world.effect(target) - tau_comp).abs();
    let term_extrapolation = world.lipschitz_l * eps_t.norm();
    let term_curvature = 0.5 * world.hessian_h * spread;
    let term_residual = (world.noises[target] - noise_comp).abs();
    let bound = term_extrapolation + term_curvature + term_residual;
    Ok(BoundReport {
        realized_error,
        term_extrapolation,
        term_curvature,
        term_residual,
        bound,
        holds: realized_error <= bound + BOUND_TOL,
        slack: bound - realized_error,
    })
}

/// `|ε_t − Σ α_j ε_j| ≤ 2δ`.
pub fn residual_floor_check(world: &SyntheticWorld, target: usize, weights: &[f64]) -> Result<bool, TheoryError> {
    let r = check_bound(world, target, weights)?;
    Ok(r.term_residual <= 2.0 * world.noise_bound + FLOOR_TOL)
}

/// Weight vector that reconstructs `target` from the other points'
/// latent vectors with the composition solver.
pub fn solver_weights(world: &SyntheticWorld, target: usize, ridge: f64) -> Result<Vec<f64>, TheoryError> {
    if target >= world.len() {
        return Err(TheoryError::Target(target));
    }
    let others: Vec<usize> = (0..world.len()).filter(|j| *j != target).collect();
    let cands: Vec<&[f64]> = others.iter().map(|j| world.points[*j].as_slice()).collect();
    let (alpha, _) = solve_simplex_ridge(world.points[target].as_slice(), &cands, ridge)
        .map_err(|e| TheoryError::Weights(e.to_string()))?;
    let mut w = vec![0.0; world.len()];
    for (j, a) in others.iter().zip(alpha) {
        w[*j] = a;
    }
    Ok(w)
}

/// Random simplex weights over a random subset of the non-target points.
pub fn random_weights(rng: &mut ChaCha8Rng, n: usize, target: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    let k = rng.random_range(1..n);
    let mut others: Vec<usize> = (0..n).filter(|j| *j != target).collect();
    for i in 0..k {
        let j = rng.random_range(i..others.len());
        others.swap(i, j);
    }
    let mut total = 0.0;
    for &j in &others[..k] {
        let e = -(1.0 - rng.random::<f64>()).ln();
        w[j] = e;
        total += e;
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub seed: u64,
    pub curvatures: Vec<f64>,
    pub noise_bounds: Vec<f64>,
    pub dims: Vec<usize>,
    pub worlds_per_cell: usize,
    pub targets_per_world: usize,
    pub points_per_world: usize,
    pub region_radius: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            curvatures: vec![0.0, 0.1, 1.0, 10.0],
            noise_bounds: vec![0.0, 0.01, 0.1],
            dims: vec![2, 8, 32],
            worlds_per_cell: 3,
            targets_per_world: 10,
            points_per_world: 24,
            region_radius: 1.0,
        }
    }
}

impl SweepConfig {
    pub fn triples(&self) -> usize {
        self.curvatures.len() * self.noise_bounds.len() * self.dims.len() * self.worlds_per_cell * self.targets_per_world
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Seed of the world this row was drawn from.
    pub seed: u64,
    #[serde(rename = "H")]
    pub h: f64,
    pub delta: f64,
    pub d: usize,
    pub realized_error: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
    pub residual_within_floor: bool,
}

/// Deterministic sweep over the curvature × noise × dimension grid. Even
/// targets use solver weights, odd targets random simplex weights.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, TheoryError> {
    let mut cells = Vec::new();
    for &h in &cfg.curvatures {
        for &delta in &cfg.noise_bounds {
            for &d in &cfg.dims {
                for w in 0..cfg.worlds_per_cell {
                    cells.push((h, delta, d, w));
                }
            }
        }
    }
    let mut state = cfg.seed;
    let seeds: Vec<u64> = cells.iter().map(|_| splitmix64(&mut state)).collect();
    let chunks: Vec<Vec<SweepRow>> = cells
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&(h, delta, d, _), &seed)| {
            let world = sample_world(seed, cfg.points_per_world, d, h, delta, cfg.region_radius)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let mut rows = Vec::with_capacity(cfg.targets_per_world);
            for k in 0..cfg.targets_per_world {
                let target = k % world.len();
                let weights = if k % 2 == 0 {
                    solver_weights(&world, target, 1e-2)?
                } else {
                    random_weights(&mut rng, world.len(), target)
                };
                let r = check_bound(&world, target, &weights)?;
                rows.push(SweepRow {
                    seed,
                    h,
                    delta,
                    d,
                    realized_error: r.realized_error,
                    bound: r.bound,
                    slack: r.slack,
                    holds: r.holds,
                    residual_within_floor: r.term_residual <= 2.0 * delta + FLOOR_TOL,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_, TheoryError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
