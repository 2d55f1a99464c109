//! Brute-force reference for simplex-constrained ridge least squares.
//!
//! Derivative-free and projection-free: a coarse lattice over the simplex,
//! then pattern search along pairwise mass transfers `e_i − e_j`, halving the
//! step from the lattice spacing through 10⁻³ down to 10⁻⁹.

#![allow(dead_code)]

pub fn objective(target: &[f64], candidates: &[Vec<f64>], weights: &[f64], ridge: f64) -> f64 {
    let mut sq = 0.0;
    for (k, t) in target.iter().enumerate() {
        let recon: f64 = candidates.iter().zip(weights).map(|(c, w)| w * c[k]).sum();
        sq += (t - recon) * (t - recon);
    }
    sq + ridge * weights.iter().map(|w| w * w).sum::<f64>()
}

fn lattice(k: usize, divisions: usize, prefix: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    let used: usize = prefix.iter().sum();
    if prefix.len() == k - 1 {
        prefix.push(divisions - used);
        visit(prefix);
        prefix.pop();
        return;
    }
    for n in 0..=(divisions - used) {
        prefix.push(n);
        lattice(k, divisions, prefix, visit);
        prefix.pop();
    }
}

/// Best weights and objective found by the reference search.
pub fn grid_oracle(target: &[f64], candidates: &[Vec<f64>], ridge: f64) -> (Vec<f64>, f64) {
    let k = candidates.len();
    assert!(k >= 1);
    if k == 1 {
        return (vec![1.0], objective(target, candidates, &[1.0], ridge));
    }
    let divisions = match k {
        2 => 1000,
        3 => 200,
        4 => 60,
        5 => 30,
        _ => 20,
    };
    let f = |w: &[f64]| objective(target, candidates, w, ridge);
    let mut best = vec![1.0 / k as f64; k];
    let mut best_f = f(&best);
    lattice(k, divisions, &mut Vec::with_capacity(k), &mut |counts| {
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / divisions as f64).collect();
        let v = f(&w);
        if v < best_f {
            best_f = v;
            best = w;
        }
    });

    let mut step = 1.0 / divisions as f64;
    while step >= 1e-9 {
        for _ in 0..20_000 {
            let mut improved = false;
            for i in 0..k {
                for j in 0..k {
                    if i == j || best[j] <= 0.0 {
                        continue;
                    }
                    let amount = step.min(best[j]);
                    let mut w = best.clone();
                    w[j] -= amount;
                    w[i] += amount;
                    let v = f(&w);
                    if v < best_f {
                        best_f = v;
                        best = w;
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        step *= 0.5;
    }
    (best, best_f)
}
