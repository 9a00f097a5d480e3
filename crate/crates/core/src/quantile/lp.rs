//! Dense primal simplex for weighted quantile regression.
//!
//! Variables are `[beta+ (p), beta- (p), u (n), v (n)]` with
//! `X beta+ - X beta- + u - v = y` and cost `tau w'u + (1 - tau) w'v`. The slack
//! basis (`u_i` or `v_i` depending on the sign of `y_i`) is feasible from the start.

use super::{has_full_rank, prepare, WeightedObservation};
use crate::error::{Error, Result};

const PIVOT_EPS: f64 = 1e-11;

/// Exact weighted quantile regression by linear programming.
pub fn weighted_qr_lp_oracle(obs: &[WeightedObservation], tau: f64) -> Result<Vec<f64>> {
    let (p, rows) = prepare(obs)?;
    if p == 0 {
        return Ok(Vec::new());
    }
    if !has_full_rank(&rows, p) {
        return Err(Error::RankDeficientDesign);
    }
    solve_prepared(&rows, p, tau)
}

pub(super) fn solve_prepared(rows: &[WeightedObservation], p: usize, tau: f64) -> Result<Vec<f64>> {
    let n = rows.len();
    let ncols = 2 * p + 2 * n;
    let rhs_col = ncols;
    let width = ncols + 1;
    let mut tab = vec![0.0; n * width];
    let mut cost = vec![0.0; ncols];
    let mut basis = vec![0usize; n];

    for (i, o) in rows.iter().enumerate() {
        cost[2 * p + i] = tau * o.weight;
        cost[2 * p + n + i] = (1.0 - tau) * o.weight;
        let flip = if o.response < 0.0 { -1.0 } else { 1.0 };
        let row = &mut tab[i * width..(i + 1) * width];
        for j in 0..p {
            row[j] = flip * o.design[j];
            row[p + j] = -flip * o.design[j];
        }
        row[2 * p + i] = flip;
        row[2 * p + n + i] = -flip;
        row[rhs_col] = flip * o.response;
        basis[i] = if flip > 0.0 { 2 * p + i } else { 2 * p + n + i };
    }

    // reduced costs: c_j - c_B' T_j
    let mut reduced = cost.clone();
    for i in 0..n {
        let cb = cost[basis[i]];
        if cb != 0.0 {
            for j in 0..ncols {
                reduced[j] -= cb * tab[i * width + j];
            }
        }
    }

    let max_iter = 50 * (n + ncols) + 1000;
    let mut stall = 0usize;
    let mut last_obj = f64::INFINITY;
    for _ in 0..max_iter {
        let scale = cost.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1e-300);
        let bland = stall > 50;
        let mut enter = None;
        let mut best = -PIVOT_EPS * scale;
        for (j, &rc) in reduced.iter().enumerate() {
            if rc < best || (bland && rc < -PIVOT_EPS * scale) {
                enter = Some(j);
                if bland {
                    break;
                }
                best = rc;
            }
        }
        let Some(e) = enter else {
            let mut beta = vec![0.0; p];
            for (i, &bv) in basis.iter().enumerate() {
                let val = tab[i * width + rhs_col];
                if bv < p {
                    beta[bv] += val;
                } else if bv < 2 * p {
                    beta[bv - p] -= val;
                }
            }
            return Ok(beta);
        };

        let mut leave = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..n {
            let a = tab[i * width + e];
            if a > PIVOT_EPS {
                let ratio = tab[i * width + rhs_col] / a;
                let better = ratio < best_ratio - 1e-14
                    || (ratio <= best_ratio + 1e-14
                        && leave.map_or(true, |l: usize| basis[i] < basis[l]));
                if better {
                    best_ratio = ratio.min(best_ratio);
                    leave = Some(i);
                }
            }
        }
        let Some(l) = leave else {
            return Err(Error::Unbounded);
        };

        let piv = tab[l * width + e];
        for j in 0..width {
            tab[l * width + j] /= piv;
        }
        for i in 0..n {
            if i == l {
                continue;
            }
            let f = tab[i * width + e];
            if f != 0.0 {
                for j in 0..width {
                    tab[i * width + j] -= f * tab[l * width + j];
                }
            }
        }
        let f = reduced[e];
        for j in 0..ncols {
            reduced[j] -= f * tab[l * width + j];
        }
        basis[l] = e;

        let obj: f64 = (0..n).map(|i| cost[basis[i]] * tab[i * width + rhs_col]).sum();
        if obj < last_obj - 1e-13 * last_obj.abs().max(1.0) {
            stall = 0;
            last_obj = obj;
        } else {
            stall += 1;
        }
    }
    Err(Error::NoConvergence(max_iter))
}

#[cfg(test)]
mod tests {
    use super::super::{objective, weighted_qr};
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64) / ((1u64 << 53) as f64)
    }

    fn problem(seed: u64, n: usize) -> Vec<WeightedObservation> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                let x = lcg(&mut s) * 4.0 - 2.0;
                let y = 1.0 - 0.5 * x + (lcg(&mut s) - 0.3) * 2.0;
                WeightedObservation::new(y, vec![1.0, x], 0.2 + lcg(&mut s))
            })
            .collect()
    }

    #[test]
    fn oracle_recovers_exact_line() {
        let obs: Vec<_> = (0..8)
            .map(|k| {
                let x = k as f64;
                WeightedObservation::new(2.0 * x, vec![1.0, x], 1.0)
            })
            .collect();
        let c = weighted_qr_lp_oracle(&obs, 0.3).unwrap();
        assert!(c[0].abs() < 1e-9 && (c[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_rows_are_neutral() {
        let mut obs = problem(7, 20);
        let base = weighted_qr_lp_oracle(&obs, 0.4).unwrap();
        obs.push(WeightedObservation::new(1e6, vec![1.0, 3.0], 0.0));
        let with = weighted_qr_lp_oracle(&obs, 0.4).unwrap();
        assert!(base.iter().zip(&with).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn duplicated_row_equals_doubled_weight() {
        let obs = problem(11, 15);
        let mut dup = obs.clone();
        dup.push(obs[3].clone());
        let mut doubled = obs.clone();
        doubled[3].weight *= 2.0;
        for &tau in &[0.25, 0.5, 0.8] {
            let a = weighted_qr_lp_oracle(&dup, tau).unwrap();
            let b = weighted_qr_lp_oracle(&doubled, tau).unwrap();
            assert!((objective(&dup, tau, &a) - objective(&doubled, tau, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn oracle_and_main_path_agree() {
        for seed in 0..20 {
            let obs = problem(seed, 30);
            for &tau in &[0.2, 0.5, 0.9] {
                let a = weighted_qr_lp_oracle(&obs, tau).unwrap();
                let b = weighted_qr(&obs, tau, 1e-10).unwrap();
                assert!(
                    a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-8),
                    "seed {seed} tau {tau}: {a:?} vs {b:?}"
                );
            }
        }
    }
}
