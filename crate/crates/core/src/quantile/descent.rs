//! Exact descent over vertices of the weighted check-loss surface.
//!
//! A vertex is fixed by `p` rows with zero residual. Each edge releases one of
//! them in either direction; along an edge the objective is convex piecewise
//! linear, so the step ends at the kink where the slope turns nonnegative and
//! that kink's row enters the basis.

use nalgebra::DMatrix;

use super::{
    check_loss, dot, has_full_rank, lp, objective, prepare, WeightedObservation,
    LP_FALLBACK_MAX_ROWS,
};
use crate::error::{Error, Result};

/// Moves from `seed` to an exact minimiser of the weighted check loss.
pub fn polish_from(obs: &[WeightedObservation], tau: f64, seed: &[f64]) -> Result<Vec<f64>> {
    let (p, rows) = prepare(obs)?;
    if seed.len() != p {
        return Err(Error::DimensionMismatch("seed length differs from design width".into()));
    }
    if p == 0 {
        return Ok(Vec::new());
    }
    if !has_full_rank(&rows, p) {
        return Err(Error::RankDeficientDesign);
    }
    match polish(&rows, p, tau, seed) {
        Err(Error::NoConvergence(_)) if rows.len() <= LP_FALLBACK_MAX_ROWS => {
            lp::solve_prepared(&rows, p, tau)
        }
        other => other,
    }
}

pub(super) fn polish(
    rows: &[WeightedObservation],
    p: usize,
    tau: f64,
    seed: &[f64],
) -> Result<Vec<f64>> {
    let n = rows.len();
    if n < p {
        return Err(Error::RankDeficientDesign);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let seed_res: Vec<f64> = rows.iter().map(|o| o.residual(seed).abs()).collect();
    order.sort_by(|&a, &b| seed_res[a].total_cmp(&seed_res[b]).then(a.cmp(&b)));
    let mut basis = select_basis(rows, &order, p).ok_or(Error::RankDeficientDesign)?;

    let max_pivots = 20 * n + 200;
    let mut in_basis = vec![false; n];
    let mut a = vec![0.0; n];
    for pivot in 0..=max_pivots {
        let inv = basis_inverse(rows, &basis).ok_or(Error::NoConvergence(pivot))?;
        let beta: Vec<f64> = (0..p)
            .map(|row| (0..p).map(|k| inv[(row, k)] * rows[basis[k]].response).sum())
            .collect();
        in_basis.iter_mut().for_each(|f| *f = false);
        for &bidx in &basis {
            in_basis[bidx] = true;
        }
        let resid: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, o)| if in_basis[i] { 0.0 } else { o.residual(&beta) })
            .collect();
        let zero_tol: Vec<f64> = rows
            .iter()
            .map(|o| 1e-11 * (1.0 + o.response.abs() + o.design.iter().zip(&beta).map(|(x, b)| (x * b).abs()).sum::<f64>()))
            .collect();

        // (normalised slope, raw slope, leaving slot, direction sign)
        let mut best: Option<(f64, f64, usize, f64)> = None;
        for j in 0..p {
            let d: Vec<f64> = (0..p).map(|row| inv[(row, j)]).collect();
            let mut s_plus = 0.0;
            let mut s_minus = 0.0;
            let mut mass = rows[basis[j]].weight;
            for (i, o) in rows.iter().enumerate() {
                a[i] = dot(&o.design, &d);
                if in_basis[i] {
                    continue;
                }
                mass += o.weight * a[i].abs();
                if resid[i].abs() <= zero_tol[i] {
                    s_plus += o.weight * check_loss(-a[i], tau);
                    s_minus += o.weight * check_loss(a[i], tau);
                } else {
                    let psi = if resid[i] < 0.0 { tau - 1.0 } else { tau };
                    s_plus -= o.weight * a[i] * psi;
                    s_minus += o.weight * a[i] * psi;
                }
            }
            let wj = rows[basis[j]].weight;
            let g_plus = wj * (1.0 - tau) + s_plus;
            let g_minus = wj * tau + s_minus;
            for (g, sign) in [(g_plus, 1.0), (g_minus, -1.0)] {
                let norm = g / mass;
                if norm < -1e-12 && best.map_or(true, |b| norm < b.0) {
                    best = Some((norm, g, j, sign));
                }
            }
        }

        let Some((_, slope0, leave, sign)) = best else {
            return finish(rows, p, tau, beta, &resid, &zero_tol, &in_basis);
        };

        let d: Vec<f64> = (0..p).map(|row| sign * inv[(row, leave)]).collect();
        let mut kinks: Vec<(f64, f64, usize)> = Vec::new();
        for (i, o) in rows.iter().enumerate() {
            if in_basis[i] || resid[i].abs() <= zero_tol[i] {
                continue;
            }
            let ai = dot(&o.design, &d);
            if ai == 0.0 {
                continue;
            }
            let t = resid[i] / ai;
            if t > 0.0 {
                kinks.push((t, o.weight * ai.abs(), i));
            }
        }
        kinks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.2.cmp(&y.2)));
        let mut slope = slope0;
        let mut entering = None;
        for &(_, inc, i) in &kinks {
            slope += inc;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let Some(k) = entering else {
            return Err(Error::Unbounded);
        };
        basis[leave] = k;
    }
    Err(Error::NoConvergence(max_pivots))
}

fn finish(
    rows: &[WeightedObservation],
    p: usize,
    tau: f64,
    beta: Vec<f64>,
    resid: &[f64],
    zero_tol: &[f64],
    in_basis: &[bool],
) -> Result<Vec<f64>> {
    let degenerate = resid
        .iter()
        .zip(zero_tol)
        .zip(in_basis)
        .any(|((r, z), &b)| !b && r.abs() <= *z);
    if degenerate && rows.len() <= LP_FALLBACK_MAX_ROWS {
        // edge tests at a degenerate vertex do not certify optimality on their own
        if let Ok(alt) = lp::solve_prepared(rows, p, tau) {
            let (f0, f1) = (objective(rows, tau, &beta), objective(rows, tau, &alt));
            if f1 < f0 - 1e-12 * f0.abs().max(1e-300) {
                return Ok(alt);
            }
        }
    }
    Ok(beta)
}

/// Greedy choice of `p` linearly independent rows, taken in `order`.
fn select_basis(rows: &[WeightedObservation], order: &[usize], p: usize) -> Option<Vec<usize>> {
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut chosen = Vec::with_capacity(p);
    for &i in order {
        let x = &rows[i].design;
        let norm0 = dot(x, x).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v: Vec<f64> = x.iter().map(|e| e / norm0).collect();
        for _ in 0..2 {
            for q in &ortho {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-8 {
            v.iter_mut().for_each(|e| *e /= nv);
            ortho.push(v);
            chosen.push(i);
            if chosen.len() == p {
                return Some(chosen);
            }
        }
    }
    None
}

fn basis_inverse(rows: &[WeightedObservation], basis: &[usize]) -> Option<DMatrix<f64>> {
    let p = basis.len();
    let xb = DMatrix::from_fn(p, p, |r, c| rows[basis[r]].design[c]);
    let inv = xb.try_inverse()?;
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}
