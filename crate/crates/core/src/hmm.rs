//! Log-space forward/backward recursions and E-step posteriors.
//!
//! Tables are indexed per unit as `[(t * m + h) * G + g]`: the chain runs
//! separately inside every mixture component and the components are only mixed
//! at the end through the (possibly `T_i`-dependent) prior weights.

use rayon::prelude::*;

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSet, PosteriorSet, Priors, UnitPosterior};
use crate::quantile::ald_logdensity_unchecked;

/// `log(sum(exp(v)))`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log F(x)` for the standard logistic cdf.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(F(hi) - F(lo))` for `lo <= hi`, with `lo = -inf` and `hi = +inf` allowed.
pub fn log_logistic_interval(lo: f64, hi: f64) -> f64 {
    match (lo == f64::NEG_INFINITY, hi == f64::INFINITY) {
        (true, true) => 0.0,
        (true, false) => log_sigmoid(hi),
        (false, true) => log_sigmoid(-lo),
        (false, false) => {
            if hi <= lo {
                return f64::NEG_INFINITY;
            }
            // F(b) - F(a) = F(b) F(-a) (1 - e^{a - b})
            log_sigmoid(hi) + log_sigmoid(-lo) + (-(lo - hi).exp_m1()).ln()
        }
    }
}

/// Log prior weights of every component for a unit observed on `t_len` occasions.
pub fn log_component_priors(priors: &Priors, t_len: usize) -> Vec<f64> {
    match priors {
        Priors::Mixture(pi) => pi.iter().map(|p| p.ln()).collect(),
        Priors::LatentDropOut { lambda0, lambda1 } => {
            let g = lambda0.len() + 1;
            let shift = lambda1 * t_len as f64;
            (0..g)
                .map(|k| {
                    let lo = if k == 0 { f64::NEG_INFINITY } else { lambda0[k - 1] + shift };
                    let hi = if k + 1 == g { f64::INFINITY } else { lambda0[k] + shift };
                    log_logistic_interval(lo, hi)
                })
                .collect()
        }
    }
}

/// Prior probability of component `g` for a unit with `t_len` observed occasions.
pub fn component_prior(params: &ParamSet, t_len: usize, g: usize) -> f64 {
    log_component_priors(&params.priors, t_len)[g].exp()
}

/// Forward/backward quantities for every unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackwardTable {
    pub n_states: usize,
    pub n_components: usize,
    /// `log a_it(h, g)` per unit.
    pub log_fwd: Vec<Vec<f64>>,
    /// `log b_it(h, g)` per unit; empty when only the forward pass was run.
    pub log_bwd: Vec<Vec<f64>>,
    /// `log f(y_it | h, g)` per unit.
    pub log_dens: Vec<Vec<f64>>,
    pub log_prior: Vec<Vec<f64>>,
    pub per_unit_loglik: Vec<f64>,
}

impl ForwardBackwardTable {
    #[inline]
    pub fn idx(&self, t: usize, h: usize, g: usize) -> usize {
        (t * self.n_states + h) * self.n_components + g
    }

    pub fn loglik(&self) -> f64 {
        self.per_unit_loglik.iter().sum()
    }
}

struct UnitPass {
    dens: Vec<f64>,
    fwd: Vec<f64>,
    bwd: Vec<f64>,
    prior: Vec<f64>,
    loglik: f64,
}

fn log_matrix(q: &[Vec<f64>]) -> Vec<f64> {
    q.iter().flatten().map(|v| v.ln()).collect()
}

fn unit_pass(
    data: &PanelDataset,
    params: &ParamSet,
    tau: f64,
    log_q: &[f64],
    i: usize,
    with_backward: bool,
) -> UnitPass {
    let m = params.n_states();
    let gc = params.n_components();
    let unit = data.unit(i);
    let tl = unit.len();
    let at = |t: usize, h: usize, g: usize| (t * m + h) * gc + g;

    let mut dens = vec![0.0; tl * m * gc];
    for (t, occ) in unit.occasions.iter().enumerate() {
        for h in 0..m {
            for g in 0..gc {
                let mu = params.location(occ, h, g);
                dens[at(t, h, g)] = ald_logdensity_unchecked(occ.y, mu, params.sigma, tau);
            }
        }
    }

    let mut fwd = vec![0.0; tl * m * gc];
    let mut buf = vec![0.0; m];
    for h in 0..m {
        let ld = params.delta[h].ln();
        for g in 0..gc {
            fwd[at(0, h, g)] = ld + dens[at(0, h, g)];
        }
    }
    for t in 1..tl {
        for h in 0..m {
            for g in 0..gc {
                for k in 0..m {
                    buf[k] = fwd[at(t - 1, k, g)] + log_q[k * m + h];
                }
                fwd[at(t, h, g)] = logsumexp(&buf) + dens[at(t, h, g)];
            }
        }
    }

    let prior = log_component_priors(&params.priors, tl);
    let mut last = Vec::with_capacity(m * gc);
    for h in 0..m {
        for g in 0..gc {
            last.push(fwd[at(tl - 1, h, g)] + prior[g]);
        }
    }
    let loglik = logsumexp(&last);

    let mut bwd = Vec::new();
    if with_backward {
        bwd = vec![0.0; tl * m * gc];
        for t in (0..tl.saturating_sub(1)).rev() {
            for h in 0..m {
                for g in 0..gc {
                    for k in 0..m {
                        buf[k] = log_q[h * m + k] + dens[at(t + 1, k, g)] + bwd[at(t + 1, k, g)];
                    }
                    bwd[at(t, h, g)] = logsumexp(&buf);
                }
            }
        }
    }

    UnitPass {
        dens,
        fwd,
        bwd,
        prior,
        loglik,
    }
}

fn run(
    data: &PanelDataset,
    params: &ParamSet,
    spec: &ModelSpec,
    with_backward: bool,
) -> Result<ForwardBackwardTable> {
    check_dims(data, params)?;
    let log_q = log_matrix(&params.q);
    let passes: Vec<UnitPass> = (0..data.n_units())
        .into_par_iter()
        .map(|i| unit_pass(data, params, spec.tau, &log_q, i, with_backward))
        .collect();
    if let Some(i) = passes.iter().position(|p| !p.loglik.is_finite()) {
        return Err(Error::NonFiniteLikelihood(i));
    }
    let mut table = ForwardBackwardTable {
        n_states: params.n_states(),
        n_components: params.n_components(),
        log_fwd: Vec::with_capacity(passes.len()),
        log_bwd: Vec::with_capacity(passes.len()),
        log_dens: Vec::with_capacity(passes.len()),
        log_prior: Vec::with_capacity(passes.len()),
        per_unit_loglik: Vec::with_capacity(passes.len()),
    };
    for p in passes {
        table.log_fwd.push(p.fwd);
        table.log_bwd.push(p.bwd);
        table.log_dens.push(p.dens);
        table.log_prior.push(p.prior);
        table.per_unit_loglik.push(p.loglik);
    }
    Ok(table)
}

fn check_dims(data: &PanelDataset, params: &ParamSet) -> Result<()> {
    let (p, r, d) = (data.p(), data.r(), data.d());
    if params.beta.len() != p
        || params.b.iter().any(|b| b.len() != r)
        || params.alpha.iter().any(|a| a.len() != d)
        || params.priors.n_components() != params.b.len()
    {
        return Err(Error::DimensionMismatch(
            "parameter dimensions do not match the dataset columns".into(),
        ));
    }
    if !(params.sigma > 0.0) {
        return Err(Error::NonPositiveScale(params.sigma));
    }
    Ok(())
}

/// Forward pass and per-unit log-likelihoods.
pub fn forward(data: &PanelDataset, params: &ParamSet, spec: &ModelSpec) -> Result<ForwardBackwardTable> {
    run(data, params, spec, false)
}

/// Forward and backward passes.
pub fn forward_backward(
    data: &PanelDataset,
    params: &ParamSet,
    spec: &ModelSpec,
) -> Result<ForwardBackwardTable> {
    run(data, params, spec, true)
}

/// Backward variables only (`log b_it(h, g)` per unit).
pub fn backward(data: &PanelDataset, params: &ParamSet, spec: &ModelSpec) -> Result<Vec<Vec<f64>>> {
    Ok(run(data, params, spec, true)?.log_bwd)
}

/// Observed-data log-likelihood.
pub fn loglik(data: &PanelDataset, params: &ParamSet, spec: &ModelSpec) -> Result<f64> {
    Ok(forward(data, params, spec)?.loglik())
}

/// Posterior expectations from a completed forward/backward table.
pub fn posteriors_from_table(data: &PanelDataset, params: &ParamSet, table: &ForwardBackwardTable) -> PosteriorSet {
    let m = table.n_states;
    let gc = table.n_components;
    let log_q = log_matrix(&params.q);
    let units = (0..data.n_units())
        .into_par_iter()
        .map(|i| unit_posterior(table, &log_q, i, data.t_len(i), m, gc))
        .collect();
    PosteriorSet {
        n_states: m,
        n_components: gc,
        units,
    }
}

fn unit_posterior(
    table: &ForwardBackwardTable,
    log_q: &[f64],
    i: usize,
    tl: usize,
    m: usize,
    gc: usize,
) -> UnitPosterior {
    let at = |t: usize, h: usize, g: usize| (t * m + h) * gc + g;
    let fwd = &table.log_fwd[i];
    let bwd = &table.log_bwd[i];
    let dens = &table.log_dens[i];
    let prior = &table.log_prior[i];
    let ll = table.per_unit_loglik[i];

    // per-component conditional likelihood log L_ig
    let comp: Vec<f64> = (0..gc)
        .map(|g| {
            let v: Vec<f64> = (0..m).map(|h| fwd[at(tl - 1, h, g)]).collect();
            logsumexp(&v)
        })
        .collect();
    let zeta: Vec<f64> = (0..gc).map(|g| (comp[g] + prior[g] - ll).exp()).collect();

    let mut u_single = vec![0.0; tl * m];
    let mut u_cond = vec![0.0; tl * m * gc];
    let mut terms = vec![0.0; gc];
    for t in 0..tl {
        for h in 0..m {
            for g in 0..gc {
                let fb = fwd[at(t, h, g)] + bwd[at(t, h, g)];
                terms[g] = fb + prior[g] - ll;
                u_cond[at(t, h, g)] = if comp[g].is_finite() {
                    (fb - comp[g]).exp()
                } else {
                    1.0 / m as f64
                };
            }
            u_single[t * m + h] = terms.iter().map(|v| v.exp()).sum();
        }
    }

    let mut u_pair = vec![0.0; tl.saturating_sub(1) * m * m];
    for t in 1..tl {
        for k in 0..m {
            for h in 0..m {
                let mut s = 0.0;
                for g in 0..gc {
                    s += (fwd[at(t - 1, k, g)] + log_q[k * m + h] + dens[at(t, h, g)] + bwd[at(t, h, g)]
                        + prior[g]
                        - ll)
                        .exp();
                }
                u_pair[(t - 1) * m * m + k * m + h] = s;
            }
        }
    }

    UnitPosterior {
        t_len: tl,
        u_single,
        u_pair,
        zeta,
        u_cond,
    }
}

/// E-step: posteriors together with per-unit log-likelihoods.
pub fn estep_with_loglik(
    data: &PanelDataset,
    params: &ParamSet,
    spec: &ModelSpec,
) -> Result<(PosteriorSet, Vec<f64>)> {
    let table = forward_backward(data, params, spec)?;
    let post = posteriors_from_table(data, params, &table);
    Ok((post, table.per_unit_loglik))
}

pub fn estep(data: &PanelDataset, params: &ParamSet, spec: &ModelSpec) -> Result<PosteriorSet> {
    Ok(estep_with_loglik(data, params, spec)?.0)
}
