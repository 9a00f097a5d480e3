//! Check loss, asymmetric Laplace density and weighted quantile regression.
//!
//! The main entry point is [`weighted_qr`], which minimises
//! `sum_i w_i * rho_tau(y_i - x_i' beta)`. It runs iteratively reweighted least
//! squares on a Huber-smoothed check loss, then moves to an exact vertex of the
//! piecewise-linear objective by basis exchange. [`weighted_qr_lp_oracle`] solves
//! the same problem as a plain linear program and is kept independent of that
//! path so it can certify it.

mod descent;
mod irls;
mod lp;

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use descent::polish_from;
pub use lp::weighted_qr_lp_oracle;

/// Weights below this are dropped before any solve.
pub const MIN_WEIGHT: f64 = 1e-12;

/// Largest problem the dense simplex fallback will accept.
pub(crate) const LP_FALLBACK_MAX_ROWS: usize = 400;

/// `u * (tau - 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Log-density of the asymmetric Laplace distribution with location `mu`, scale `sigma`
/// and skewness `tau`.
pub fn ald_logdensity(y: f64, mu: f64, sigma: f64, tau: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveScale(sigma));
    }
    Ok(ald_logdensity_unchecked(y, mu, sigma, tau))
}

#[inline]
pub(crate) fn ald_logdensity_unchecked(y: f64, mu: f64, sigma: f64, tau: f64) -> f64 {
    (tau * (1.0 - tau) / sigma).ln() - check_loss((y - mu) / sigma, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedObservation {
    pub response: f64,
    pub design: Vec<f64>,
    pub weight: f64,
}

impl WeightedObservation {
    pub fn new(response: f64, design: Vec<f64>, weight: f64) -> Self {
        Self {
            response,
            design,
            weight,
        }
    }

    #[inline]
    pub fn residual(&self, coef: &[f64]) -> f64 {
        self.response - dot(&self.design, coef)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted check-loss objective at `coef`.
pub fn objective(obs: &[WeightedObservation], tau: f64, coef: &[f64]) -> f64 {
    obs.iter()
        .map(|o| o.weight * check_loss(o.residual(coef), tau))
        .sum()
}

/// Weighted `tau`-quantile: the smallest residual whose cumulative weight fraction
/// reaches `tau`. Minimises `sum_j w_j rho_tau(r_j - a)` over `a`.
pub fn weighted_quantile_scalar(residuals: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    if residuals.len() != weights.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} residuals vs {} weights",
            residuals.len(),
            weights.len()
        )));
    }
    let mut pairs: Vec<(f64, f64)> = residuals
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&r, &w)| (r, w))
        .collect();
    if pairs.is_empty() {
        return Err(Error::AllWeightsZero);
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(weighted_select(&mut pairs, tau * total * (1.0 - 1e-14)))
}

/// Smallest key whose cumulative weight, in ascending key order, reaches
/// `threshold` (the last key if none does). Expected linear time.
fn weighted_select(pts: &mut [(f64, f64)], mut threshold: f64) -> f64 {
    let mut lo = 0;
    let mut hi = pts.len();
    while hi - lo > 1 {
        let part = &mut pts[lo..hi];
        let mid = part.len() / 2;
        part.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0));
        let left: f64 = part[..mid].iter().map(|p| p.1).sum();
        if left >= threshold {
            hi = lo + mid;
        } else if left + part[mid].1 >= threshold {
            return part[mid].0;
        } else {
            threshold -= left + part[mid].1;
            lo += mid + 1;
            if lo == hi {
                // threshold exceeds the total: the largest key
                return pts[lo - 1].0;
            }
        }
    }
    pts[lo].0
}

/// Exact minimiser over a scalar coefficient `c` of `sum_i w_i rho_tau(y_i - x_i c)`.
///
/// Rows with negative `x_i` flip to `1 - tau` after dividing through, so this is a
/// weighted quantile with row-specific asymmetry.
pub fn weighted_qr_single_column(obs: &[WeightedObservation], tau: f64) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(obs.len());
    let mut threshold = 0.0;
    let mut any_weight = false;
    for o in obs {
        if o.weight < MIN_WEIGHT {
            continue;
        }
        any_weight = true;
        let x = o.design[0];
        if x == 0.0 {
            continue;
        }
        let c = o.weight * x.abs();
        let t = if x > 0.0 { tau } else { 1.0 - tau };
        threshold += c * t;
        pts.push((o.response / x, c));
    }
    if !any_weight {
        return Err(Error::AllWeightsZero);
    }
    if pts.is_empty() {
        return Err(Error::RankDeficientDesign);
    }
    Ok(weighted_select(&mut pts, threshold * (1.0 - 1e-14)))
}

/// Drops negligible weights, validates inputs and merges rows that share both
/// response and design.
pub(crate) fn prepare(obs: &[WeightedObservation]) -> Result<(usize, Vec<WeightedObservation>)> {
    let p = obs.first().map(|o| o.design.len()).unwrap_or(0);
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<WeightedObservation> = Vec::with_capacity(obs.len());
    let mut saw_any = false;
    for o in obs {
        if o.design.len() != p {
            return Err(Error::DimensionMismatch("design rows differ in length".into()));
        }
        if !(o.weight >= 0.0) || !o.weight.is_finite() {
            return Err(Error::NonFiniteValue("observation weight".into()));
        }
        if !o.response.is_finite() || o.design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("observation".into()));
        }
        saw_any = true;
        if o.weight < MIN_WEIGHT {
            continue;
        }
        let mut key = Vec::with_capacity(p + 1);
        key.push(o.response.to_bits());
        key.extend(o.design.iter().map(|v| v.to_bits()));
        match index.get(&key) {
            Some(&k) => out[k].weight += o.weight,
            None => {
                index.insert(key, out.len());
                out.push(o.clone());
            }
        }
    }
    if !saw_any || out.is_empty() {
        return Err(Error::AllWeightsZero);
    }
    Ok((p, out))
}

/// Weighted least squares fit; `None` when the weighted Gram matrix is singular.
pub(crate) fn weighted_least_squares(obs: &[WeightedObservation], p: usize) -> Option<Vec<f64>> {
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for o in obs {
        for a in 0..p {
            let wa = o.weight * o.design[a];
            rhs[a] += wa * o.response;
            for b in 0..p {
                gram[(a, b)] += wa * o.design[b];
            }
        }
    }
    solve_spd(gram, rhs)
}

pub(crate) fn solve_spd(gram: DMatrix<f64>, rhs: DVector<f64>) -> Option<Vec<f64>> {
    if let Some(ch) = gram.clone().cholesky() {
        let sol = ch.solve(&rhs);
        if sol.iter().all(|v| v.is_finite()) {
            return Some(sol.iter().copied().collect());
        }
    }
    gram.lu()
        .solve(&rhs)
        .filter(|s| s.iter().all(|v| v.is_finite()))
        .map(|s| s.iter().copied().collect())
}

/// Whether the weighted design has full column rank (scale-free test on the
/// normalised Gram matrix).
pub(crate) fn has_full_rank(obs: &[WeightedObservation], p: usize) -> bool {
    if p == 0 {
        return true;
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    for o in obs {
        for a in 0..p {
            for b in 0..=a {
                gram[(a, b)] += o.weight * o.design[a] * o.design[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let scale: Vec<f64> = (0..p).map(|a| gram[(a, a)].sqrt()).collect();
    if scale.iter().any(|&s| !(s > 0.0)) {
        return false;
    }
    let norm = DMatrix::from_fn(p, p, |a, b| gram[(a, b)] / (scale[a] * scale[b]));
    let eig = norm.symmetric_eigenvalues();
    eig.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-11
}

/// Minimises the weighted check loss over the coefficient vector.
///
/// Intercept-only and single-column problems take exact sorted routes; everything
/// else goes through smoothed IRLS followed by an exact basis-exchange polish.
pub fn weighted_qr(obs: &[WeightedObservation], tau: f64, tol: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidSpec(format!("tau must lie in (0, 1), got {tau}")));
    }
    let (p, rows) = prepare(obs)?;
    if p == 0 {
        return Ok(Vec::new());
    }
    if p == 1 && rows.iter().all(|o| o.design[0] == 1.0) {
        let r: Vec<f64> = rows.iter().map(|o| o.response).collect();
        let w: Vec<f64> = rows.iter().map(|o| o.weight).collect();
        return Ok(vec![weighted_quantile_scalar(&r, &w, tau)?]);
    }
    if !has_full_rank(&rows, p) {
        return Err(Error::RankDeficientDesign);
    }
    if p == 1 {
        return Ok(vec![weighted_qr_single_column(&rows, tau)?]);
    }
    let seed = irls::smoothed_irls(&rows, p, tau, tol.max(1e-12))?;
    match descent::polish(&rows, p, tau, &seed) {
        Ok(sol) => Ok(sol),
        Err(Error::NoConvergence(n)) if rows.len() <= LP_FALLBACK_MAX_ROWS => {
            log::debug!("basis exchange stalled after {n} pivots; using simplex fallback");
            lp::solve_prepared(&rows, p, tau)
        }
        Err(e) => Err(e),
    }
}
