//! EM iterations, starting values, multi-start fitting and (m, G) selection.

use log::{debug, info, warn};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::dataset::PanelDataset;
use crate::error::{Error, Result};
use crate::hmm::estep_with_loglik;
use crate::model::{ModelSpec, ParamSet, PosteriorSet, PriorMode, Priors};
use crate::mstep::{mstep, MStepOptions, SIGMA_FLOOR};
use crate::quantile::{check_loss, weighted_qr, WeightedObservation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartConfig {
    pub n_random_starts: usize,
    /// Extra weight on the transition diagonal of the deterministic start.
    pub s_diag: f64,
    pub perturb_scale: f64,
    pub rng_seed: u64,
}

impl Default for StartConfig {
    fn default() -> Self {
        Self {
            n_random_starts: 30,
            s_diag: 1.0,
            perturb_scale: 0.25,
            rng_seed: 0,
        }
    }
}

impl StartConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_random_starts == 0 {
            return Err(Error::InvalidSpec("n_random_starts must be at least 1".into()));
        }
        if !(self.s_diag >= 0.0 && self.s_diag.is_finite()) {
            return Err(Error::InvalidSpec("s_diag must be nonnegative".into()));
        }
        if !(self.perturb_scale >= 0.0 && self.perturb_scale.is_finite()) {
            return Err(Error::InvalidSpec("perturb_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitDiagnostics {
    /// Final log-likelihood of every start (`NaN` for a failed start), in start order.
    pub start_logliks: Vec<f64>,
    pub failed_starts: usize,
    pub best_start: usize,
    pub lambda_clamped: bool,
    /// Iterations where the cumulative-logit optimiser stopped short of its tolerance.
    pub lambda_unconverged_iters: usize,
    pub empty_state_events: usize,
    pub skipped_block_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    pub n_params: usize,
    /// BIC on the total number of observations.
    pub bic: f64,
    /// BIC on the number of units.
    pub bic_n: f64,
    pub posterior: PosteriorSet,
    pub converged: bool,
    pub n_iter: usize,
    /// The scale collapsed onto its floor; the fit interpolates the data.
    pub degenerate: bool,
    pub diagnostics: FitDiagnostics,
}

/// Free parameters of the model at the given dimensions.
pub fn count_params(spec: &ModelSpec, p: usize, r: usize, d: usize) -> usize {
    let (m, g) = (spec.n_states, spec.n_components);
    let prior = match (spec.prior_mode, g) {
        (_, 1) => 0,
        (PriorMode::ConstantMixture, _) => g - 1,
        (PriorMode::LatentDropOut, _) => g,
    };
    p + m * d + g * r + (m - 1) + m * (m - 1) + 1 + prior
}

pub fn bic(loglik: f64, n_params: usize, basis: usize) -> f64 {
    -2.0 * loglik + n_params as f64 * (basis as f64).ln()
}

/// Nodes of the `n`-point Gauss–Hermite rule for the standard normal weight, ascending.
pub fn gauss_hermite_nodes(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    // Golub–Welsch: eigenvalues of the symmetric Jacobi matrix of the Hermite recurrence
    let jac = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    // symmetric rule: clean the centre node for odd n
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    nodes
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn robust_scale(resid: &[f64]) -> f64 {
    let mut r = resid.to_vec();
    let med = median(&mut r);
    let mut dev: Vec<f64> = resid.iter().map(|v| (v - med).abs()).collect();
    let mad = 1.4826 * median(&mut dev);
    if mad > 0.0 {
        return mad;
    }
    let mean_abs = resid.iter().map(|v| v.abs()).sum::<f64>() / resid.len().max(1) as f64;
    if mean_abs > 0.0 {
        mean_abs
    } else {
        1.0
    }
}

fn uniform_transition(m: usize, s: f64) -> Vec<Vec<f64>> {
    (0..m)
        .map(|k| {
            (0..m)
                .map(|h| (1.0 + if h == k { s } else { 0.0 }) / (m as f64 + s))
                .collect()
        })
        .collect()
}

/// Starting values from a pooled quantile regression plus quadrature spreads.
pub fn deterministic_start(data: &PanelDataset, spec: &ModelSpec, s_diag: f64) -> Result<ParamSet> {
    spec.validate()?;
    let cols = data.columns();
    let names = cols.distinct();
    let (m, gc) = (spec.n_states, spec.n_components);

    // where each distinct column lives in an occasion: (block, index)
    let locate = |name: &String| -> (u8, usize) {
        if let Some(k) = cols.x.iter().position(|c| c == name) {
            (0, k)
        } else if let Some(k) = cols.z.iter().position(|c| c == name) {
            (1, k)
        } else {
            (2, cols.w.iter().position(|c| c == name).unwrap_or(0))
        }
    };
    let place: Vec<(u8, usize)> = names.iter().map(locate).collect();
    let obs: Vec<WeightedObservation> = data
        .units()
        .iter()
        .flat_map(|u| u.occasions.iter())
        .map(|o| {
            let design = place
                .iter()
                .map(|&(blk, k)| match blk {
                    0 => o.x[k],
                    1 => o.z[k],
                    _ => o.w[k],
                })
                .collect();
            WeightedObservation::new(o.y, design, 1.0)
        })
        .collect();
    let coef = weighted_qr(&obs, spec.tau, 1e-10)?;
    let coef_of = |name: &String| names.iter().position(|n| n == name).map_or(0.0, |k| coef[k]);

    let beta: Vec<f64> = cols.x.iter().map(|c| coef_of(c)).collect();
    let b_base: Vec<f64> = cols
        .z
        .iter()
        .map(|c| if cols.x.contains(c) { 0.0 } else { coef_of(c) })
        .collect();
    let a_base: Vec<f64> = cols
        .w
        .iter()
        .map(|c| if cols.x.contains(c) || cols.z.contains(c) { 0.0 } else { coef_of(c) })
        .collect();

    let resid: Vec<f64> = obs.iter().map(|o| o.residual(&coef)).collect();
    let scale = robust_scale(&resid);
    let rms = |f: &dyn Fn(&crate::dataset::Occasion) -> f64| {
        let (s, n) = data
            .units()
            .iter()
            .flat_map(|u| u.occasions.iter())
            .fold((0.0, 0usize), |(s, n), o| (s + f(o).powi(2), n + 1));
        let v = (s / n.max(1) as f64).sqrt();
        if v > 0.0 {
            v
        } else {
            1.0
        }
    };

    let state_nodes = gauss_hermite_nodes(m);
    let alpha: Vec<Vec<f64>> = (0..m)
        .map(|h| {
            let mut a = a_base.clone();
            if let Some(first) = a.first_mut() {
                *first += state_nodes[h] * scale / rms(&|o| o.w[0]);
            }
            a
        })
        .collect();
    let comp_nodes = gauss_hermite_nodes(gc);
    let b: Vec<Vec<f64>> = (0..gc)
        .map(|g| {
            let mut v = b_base.clone();
            if let Some(first) = v.first_mut() {
                *first += comp_nodes[g] * scale / rms(&|o| o.z[0]);
            }
            v
        })
        .collect();

    let sigma = (obs.iter().map(|o| check_loss(o.residual(&coef), spec.tau)).sum::<f64>() / obs.len() as f64)
        .max(SIGMA_FLOOR);
    let priors = match spec.prior_mode {
        PriorMode::ConstantMixture => Priors::Mixture(vec![1.0 / gc as f64; gc]),
        PriorMode::LatentDropOut => Priors::LatentDropOut {
            lambda0: (1..gc)
                .map(|g| {
                    let p = g as f64 / gc as f64;
                    (p / (1.0 - p)).ln()
                })
                .collect(),
            lambda1: 0.0,
        },
    };
    Ok(ParamSet {
        beta,
        alpha,
        b,
        delta: vec![1.0 / m as f64; m],
        q: uniform_transition(m, s_diag),
        sigma,
        priors,
    })
}

fn jitter_probs<R: Rng>(p: &[f64], s: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = p
        .iter()
        .map(|v| v * (s * rng.sample::<f64, _>(StandardNormal)).exp())
        .collect();
    let tot: f64 = raw.iter().sum();
    raw.iter().map(|v| v / tot).collect()
}

/// Randomly perturbed copy of a start.
///
/// Location coordinates move by `U(-1, 1) * perturb_scale * reference`, where the
/// reference is the spread of that coordinate across states/components (or the
/// magnitude of a fixed effect), never less than `sigma`. Probability rows get
/// multiplicative lognormal jitter and are renormalised; `sigma` is jittered
/// multiplicatively; cumulative-logit thresholds keep their order.
pub fn random_start<R: Rng>(det: &ParamSet, perturb_scale: f64, rng: &mut R) -> ParamSet {
    if perturb_scale == 0.0 {
        return det.clone();
    }
    let s = perturb_scale;
    let mut out = det.clone();
    let sig = det.sigma;
    for v in out.beta.iter_mut() {
        *v += rng.random_range(-1.0..1.0) * s * v.abs().max(sig);
    }
    let spread = |rows: &[Vec<f64>], j: usize| {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
        (hi - lo).max(sig)
    };
    let d = det.alpha.first().map_or(0, |a| a.len());
    for j in 0..d {
        let rf = spread(&det.alpha, j);
        for a in out.alpha.iter_mut() {
            a[j] += rng.random_range(-1.0..1.0) * s * rf;
        }
    }
    let r = det.b.first().map_or(0, |b| b.len());
    for j in 0..r {
        let rf = spread(&det.b, j);
        for b in out.b.iter_mut() {
            b[j] += rng.random_range(-1.0..1.0) * s * rf;
        }
    }
    out.delta = jitter_probs(&det.delta, s, rng);
    out.q = det.q.iter().map(|row| jitter_probs(row, s, rng)).collect();
    out.sigma = det.sigma * (s * rng.sample::<f64, _>(StandardNormal)).exp();
    out.priors = match &det.priors {
        Priors::Mixture(pi) => Priors::Mixture(jitter_probs(pi, s, rng)),
        Priors::LatentDropOut { lambda0, lambda1 } => {
            let mut l0 = lambda0.clone();
            if let Some(first) = l0.first_mut() {
                *first += rng.random_range(-1.0..1.0) * s * 2.0;
            }
            for k in 1..l0.len() {
                let gap = (lambda0[k] - lambda0[k - 1]) * (s * rng.sample::<f64, _>(StandardNormal)).exp();
                l0[k] = l0[k - 1] + gap;
            }
            Priors::LatentDropOut {
                lambda0: l0,
                lambda1: lambda1 + rng.random_range(-1.0..1.0) * s,
            }
        }
    };
    out
}

/// Reorders states by ascending first `alpha` coordinate and, for constant
/// mixtures, components by ascending first `b` coordinate.
///
/// Returns the reordered parameters and the permutations applied (new index `k`
/// holds old index `perm[k]`).
pub fn sort_labels(params: &ParamSet) -> (ParamSet, Vec<usize>, Vec<usize>) {
    let key = |v: &Vec<f64>| v.first().copied().unwrap_or(0.0);
    let mut sp: Vec<usize> = (0..params.n_states()).collect();
    sp.sort_by(|&a, &b| key(&params.alpha[a]).total_cmp(&key(&params.alpha[b])).then(a.cmp(&b)));
    let mut cp: Vec<usize> = (0..params.n_components()).collect();
    if matches!(params.priors, Priors::Mixture(_)) {
        cp.sort_by(|&a, &b| key(&params.b[a]).total_cmp(&key(&params.b[b])).then(a.cmp(&b)));
    }
    let out = params.permute_states(&sp).permute_components(&cp);
    (out, sp, cp)
}

/// Runs EM from `start` with default M-step options.
pub fn fit(data: &PanelDataset, spec: &ModelSpec, start: &ParamSet) -> Result<FitResult> {
    fit_with(data, spec, start, &MStepOptions::default())
}

pub fn fit_with(data: &PanelDataset, spec: &ModelSpec, start: &ParamSet, opts: &MStepOptions) -> Result<FitResult> {
    spec.validate()?;
    let (p, r, d) = (data.p(), data.r(), data.d());
    start.validate(p, r, d)?;
    if start.n_states() != spec.n_states
        || start.n_components() != spec.n_components
        || start.priors.mode() != spec.prior_mode
    {
        return Err(Error::InvalidParams("start does not match the model specification".into()));
    }

    let mut params = start.clone();
    let (mut post, lls) = estep_with_loglik(data, &params, spec)?;
    let mut ll: f64 = lls.iter().sum();
    let mut trace = vec![ll];
    let mut diag = FitDiagnostics::default();
    let mut converged = false;
    let mut degenerate = false;
    let mut n_iter = 0;

    while n_iter < spec.max_iter {
        n_iter += 1;
        let rep = mstep(data, &post, &params, spec, opts)?;
        diag.lambda_clamped |= rep.lambda_clamped;
        diag.lambda_unconverged_iters += usize::from(!rep.lambda_converged);
        diag.empty_state_events += rep.empty_states.len();
        diag.skipped_block_events += rep.skipped_blocks.len();
        params = rep.updated;
        let (np, lls) = estep_with_loglik(data, &params, spec)?;
        post = np;
        let prev = ll;
        ll = lls.iter().sum();
        trace.push(ll);
        if rep.sigma_floored {
            warn!("scale collapsed to its floor after {n_iter} iterations; stopping (degenerate fit)");
            degenerate = true;
            break;
        }
        if ll < prev - 1e-8 {
            debug!("log-likelihood decreased by {} at iteration {n_iter}", prev - ll);
        }
        if (ll - prev).abs() / (prev.abs() + 1.0) < spec.eps_em {
            converged = true;
            break;
        }
    }

    let (sorted, sp, cp) = sort_labels(&params);
    let identity = sp.iter().enumerate().all(|(k, &v)| k == v) && cp.iter().enumerate().all(|(k, &v)| k == v);
    let (params, posterior, final_ll) = if identity {
        (params, post, ll)
    } else {
        let (post, lls) = estep_with_loglik(data, &sorted, spec)?;
        (sorted, post, lls.iter().sum())
    };
    let n_params = count_params(spec, p, r, d);
    Ok(FitResult {
        spec: *spec,
        bic: bic(final_ll, n_params, data.total_obs()),
        bic_n: bic(final_ll, n_params, data.n_units()),
        n_params,
        params,
        loglik_trace: trace,
        final_loglik: final_ll,
        posterior,
        converged,
        n_iter,
        degenerate,
        diagnostics: diag,
    })
}

/// Deterministic per-job seed.
pub fn job_seed(seed: u64, m: usize, g: usize, idx: usize) -> u64 {
    let mut z = seed;
    for v in [m as u64, g as u64, idx as u64] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fits from the deterministic start and `n_random_starts - 1` perturbed copies,
/// keeping the highest final log-likelihood (non-degenerate fits preferred).
///
/// Starts run on the current rayon pool; the outcome does not depend on scheduling.
pub fn multi_start_fit(data: &PanelDataset, spec: &ModelSpec, cfg: &StartConfig) -> Result<FitResult> {
    multi_start_fit_with(data, spec, cfg, &MStepOptions::default())
}

pub fn multi_start_fit_with(
    data: &PanelDataset,
    spec: &ModelSpec,
    cfg: &StartConfig,
    opts: &MStepOptions,
) -> Result<FitResult> {
    cfg.validate()?;
    let det = deterministic_start(data, spec, cfg.s_diag)?;
    let results: Vec<Result<FitResult>> = (0..cfg.n_random_starts)
        .into_par_iter()
        .map(|k| {
            let start = if k == 0 {
                det.clone()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(job_seed(cfg.rng_seed, spec.n_states, spec.n_components, k));
                random_start(&det, cfg.perturb_scale, &mut rng)
            };
            fit_with(data, spec, &start, opts)
        })
        .collect();

    let start_logliks: Vec<f64> = results
        .iter()
        .map(|r| r.as_ref().map_or(f64::NAN, |f| f.final_loglik))
        .collect();
    let failed = results.iter().filter(|r| r.is_err()).count();
    let mut best: Option<(usize, FitResult)> = None;
    let mut first_err = None;
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok(f) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => (b.degenerate && !f.degenerate)
                        || (b.degenerate == f.degenerate && f.final_loglik > b.final_loglik),
                };
                if better {
                    best = Some((k, f));
                }
            }
            Err(e) => {
                debug!("start {k} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let Some((k, mut fit)) = best else {
        warn!("all {} starts failed; first error: {:?}", cfg.n_random_starts, first_err);
        return Err(Error::AllStartsFailed(cfg.n_random_starts));
    };
    fit.diagnostics.start_logliks = start_logliks;
    fit.diagnostics.failed_starts = failed;
    fit.diagnostics.best_start = k;
    Ok(fit)
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub n_states: usize,
    pub n_components: usize,
    pub fit: std::result::Result<FitResult, Error>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub cells: Vec<GridCell>,
    /// Index into `cells` of the BIC-minimising fit.
    pub chosen: Option<usize>,
}

impl Selection {
    pub fn chosen_fit(&self) -> Option<&FitResult> {
        self.chosen.and_then(|k| self.cells[k].fit.as_ref().ok())
    }

    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.fit.is_err()).count()
    }
}

/// Multi-start fits over an (m, G) grid; chooses the lowest BIC among converged
/// cells, falling back to all available cells if none converged.
pub fn select_model(
    data: &PanelDataset,
    m_range: &[usize],
    g_range: &[usize],
    tau: f64,
    mode: PriorMode,
    cfg: &StartConfig,
) -> Result<Selection> {
    let mut grid = Vec::new();
    for &m in m_range {
        for &g in g_range {
            grid.push((m, g));
        }
    }
    let specs: Vec<ModelSpec> = grid
        .iter()
        .map(|&(m, g)| ModelSpec::new(tau, m, g, mode))
        .collect::<Result<_>>()?;
    let cells: Vec<GridCell> = specs
        .par_iter()
        .map(|spec| GridCell {
            n_states: spec.n_states,
            n_components: spec.n_components,
            fit: multi_start_fit(data, spec, cfg),
        })
        .collect();
    let pick = |need_converged: bool| {
        cells
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.fit.as_ref().ok().map(|f| (k, f)))
            .filter(|(_, f)| !need_converged || f.converged)
            .min_by(|a, b| a.1.bic.total_cmp(&b.1.bic))
            .map(|(k, _)| k)
    };
    let chosen = pick(true).or_else(|| pick(false));
    if let Some(k) = chosen {
        info!("selected m = {}, G = {}", cells[k].n_states, cells[k].n_components);
    }
    Ok(Selection { cells, chosen })
}

/// Runs `f` on a dedicated pool of `jobs` threads (`0` uses the global pool).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidSpec(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let mix = ModelSpec::new(0.5, 2, 3, PriorMode::ConstantMixture).unwrap();
        assert_eq!(count_params(&mix, 1, 1, 1), 12);
        let ldo = ModelSpec::new(0.5, 2, 3, PriorMode::LatentDropOut).unwrap();
        assert_eq!(count_params(&ldo, 1, 1, 1), 13);
        let one = ModelSpec::new(0.5, 1, 1, PriorMode::LatentDropOut).unwrap();
        assert_eq!(count_params(&one, 2, 1, 1), 2 + 1 + 1 + 1);
    }

    #[test]
    fn bic_arithmetic() {
        assert!((bic(-100.0, 5, 100) - 223.0259).abs() < 1e-4);
    }

    #[test]
    fn transition_start() {
        let q = uniform_transition(2, 1.0);
        assert!((q[0][0] - 2.0 / 3.0).abs() < 1e-15 && (q[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((q[1][1] - 2.0 / 3.0).abs() < 1e-15);
        for row in uniform_transition(3, 0.0) {
            assert!(row.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn hermite_nodes() {
        assert_eq!(gauss_hermite_nodes(1), vec![0.0]);
        let two = gauss_hermite_nodes(2);
        assert!((two[0] + 1.0).abs() < 1e-12 && (two[1] - 1.0).abs() < 1e-12);
        let three = gauss_hermite_nodes(3);
        assert!((three[0] + 3f64.sqrt()).abs() < 1e-12 && three[1] == 0.0);
        // 4-point nodes: ±sqrt(3 ± sqrt(6))
        let four = gauss_hermite_nodes(4);
        let outer = (3.0 + 6f64.sqrt()).sqrt();
        let inner = (3.0 - 6f64.sqrt()).sqrt();
        assert!((four[3] - outer).abs() < 1e-12 && (four[2] - inner).abs() < 1e-12);
    }

    #[test]
    fn seeds_differ_across_jobs() {
        let a = job_seed(1, 2, 3, 0);
        assert_ne!(a, job_seed(1, 2, 3, 1));
        assert_ne!(a, job_seed(1, 3, 2, 0));
        assert_ne!(a, job_seed(2, 2, 3, 0));
        assert_eq!(a, job_seed(1, 2, 3, 0));
    }
}
