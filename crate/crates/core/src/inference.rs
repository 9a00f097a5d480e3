//! Block bootstrap intervals, MAP classification and hidden-state decoding.

use std::io::Write;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::PanelDataset;
use crate::em::{fit, job_seed, multi_start_fit, FitResult, StartConfig};
use crate::error::{Error, Result};
use crate::hmm::{estep, forward, ForwardBackwardTable};
use crate::kv::flatten_params;
use crate::model::{ModelSpec, ParamSet, PosteriorSet, Priors};

/// Share of unusable replicates above which the bootstrap fails.
pub const MAX_FAILED_SHARE: f64 = 0.2;
const AMBIGUITY_TOL: f64 = 1e-9;
const BOOT_SALT: u64 = 0xb00f_57a9;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub rng_seed: u64,
    /// Refit each replicate with full multi-start instead of warm-starting at
    /// the point estimate.
    pub multi_start: Option<StartConfig>,
}

impl BootstrapOptions {
    pub fn new(replicates: usize, level: f64, rng_seed: u64) -> Self {
        Self {
            replicates,
            level,
            rng_seed,
            multi_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub level: f64,
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    /// Label-aligned refits, in replicate order.
    pub replicate_params: Vec<ParamSet>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub failed: usize,
    pub ambiguous: usize,
}

impl BootstrapResult {
    pub fn effective(&self) -> usize {
        self.replicate_params.len()
    }

    /// `parameter,estimate,lower,upper,B_effective`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["parameter", "estimate", "lower", "upper", "B_effective"])?;
        for k in 0..self.names.len() {
            w.write_record([
                self.names[k].clone(),
                self.estimate[k].to_string(),
                self.ci_lower[k].to_string(),
                self.ci_upper[k].to_string(),
                self.effective().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn interval(&self, name: &str) -> Option<(f64, f64)> {
        let k = self.names.iter().position(|n| n == name)?;
        Some((self.ci_lower[k], self.ci_upper[k]))
    }
}

/// Linear-interpolation sample quantile (type 7) of sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// True when the sort rule cannot order the labels: two states (or, for
/// constant mixtures, two components) share a leading coordinate.
pub fn labels_ambiguous(params: &ParamSet) -> bool {
    let tied = |rows: &[Vec<f64>]| {
        let mut keys: Vec<f64> = rows.iter().map(|r| r.first().copied().unwrap_or(0.0)).collect();
        keys.sort_by(f64::total_cmp);
        keys.windows(2)
            .any(|w| (w[1] - w[0]).abs() <= AMBIGUITY_TOL * w[0].abs().max(1.0))
    };
    tied(&params.alpha) || (matches!(params.priors, Priors::Mixture(_)) && tied(&params.b))
}

/// Nonparametric bootstrap over units: each replicate resamples whole unit
/// trajectories with replacement and refits, warm-started at `point` unless
/// full multi-start is requested.
pub fn block_bootstrap(
    data: &PanelDataset,
    spec: &ModelSpec,
    point: &ParamSet,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult> {
    if opts.replicates < 2 {
        return Err(Error::InvalidSpec("bootstrap needs at least 2 replicates".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::InvalidSpec(format!("confidence level {} outside (0, 1)", opts.level)));
    }
    let n = data.n_units();
    let outcomes: Vec<Result<FitResult>> = (0..opts.replicates)
        .into_par_iter()
        .map(|k| {
            let seed = job_seed(opts.rng_seed ^ BOOT_SALT, spec.n_states, spec.n_components, k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.resample(&idx);
            match &opts.multi_start {
                None => fit(&sample, spec, point),
                Some(cfg) => multi_start_fit(&sample, spec, &StartConfig { rng_seed: seed, ..cfg.clone() }),
            }
        })
        .collect();

    let mut kept = Vec::new();
    let (mut failed, mut ambiguous) = (0, 0);
    for (k, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(f) if labels_ambiguous(&f.params) => {
                warn!("bootstrap replicate {k}: labels cannot be ordered; dropped");
                ambiguous += 1;
            }
            Ok(f) => kept.push(f.params),
            Err(e) => {
                debug!("bootstrap replicate {k} failed: {e}");
                failed += 1;
            }
        }
    }
    let unusable = failed + ambiguous;
    if kept.is_empty() || unusable as f64 > MAX_FAILED_SHARE * opts.replicates as f64 {
        return Err(Error::TooManyFailures {
            failed: unusable,
            total: opts.replicates,
        });
    }

    let columns = data.columns();
    let point = flatten_params(point, columns);
    let rows: Vec<Vec<f64>> = kept
        .iter()
        .map(|p| flatten_params(p, columns).into_iter().map(|(_, v)| v).collect())
        .collect();
    let a = 1.0 - opts.level;
    let (mut lower, mut upper) = (Vec::new(), Vec::new());
    for j in 0..point.len() {
        let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        col.sort_by(f64::total_cmp);
        lower.push(percentile_sorted(&col, a / 2.0));
        upper.push(percentile_sorted(&col, 1.0 - a / 2.0));
    }
    Ok(BootstrapResult {
        replicates: opts.replicates,
        level: opts.level,
        names: point.iter().map(|(k, _)| k.clone()).collect(),
        estimate: point.iter().map(|(_, v)| *v).collect(),
        replicate_params: kept,
        ci_lower: lower,
        ci_upper: upper,
        failed,
        ambiguous,
    })
}

/// MAP component per unit; ties go to the smaller index.
pub fn classify_components(post: &PosteriorSet) -> Vec<usize> {
    post.units.iter().map(|u| argmax_first(&u.zeta)).collect()
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Per-occasion argmax of the marginal state posterior.
    Local,
    /// Most probable path within the unit's MAP component.
    Viterbi,
}

impl DecodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" => Ok(DecodeMode::Local),
            "viterbi" | "global" => Ok(DecodeMode::Viterbi),
            other => Err(Error::Parse(format!("unknown decoding mode `{other}`"))),
        }
    }
}

pub fn decode_states(
    data: &PanelDataset,
    params: &ParamSet,
    spec: &ModelSpec,
    mode: DecodeMode,
) -> Result<Vec<Vec<usize>>> {
    let post = estep(data, params, spec)?;
    let m = spec.n_states;
    match mode {
        DecodeMode::Local => Ok((0..data.n_units())
            .map(|i| {
                (0..data.t_len(i))
                    .map(|t| {
                        let row: Vec<f64> = (0..m).map(|h| post.single(i, t, h)).collect();
                        argmax_first(&row)
                    })
                    .collect()
            })
            .collect()),
        DecodeMode::Viterbi => {
            let tab = forward(data, params, spec)?;
            let classes = classify_components(&post);
            Ok((0..data.n_units())
                .map(|i| viterbi_unit(&tab, params, i, classes[i], data.t_len(i)))
                .collect())
        }
    }
}

fn viterbi_unit(tab: &ForwardBackwardTable, params: &ParamSet, i: usize, g: usize, tl: usize) -> Vec<usize> {
    let m = params.n_states();
    let dens = |t: usize, h: usize| tab.log_dens[i][tab.idx(t, h, g)];
    let lq: Vec<Vec<f64>> = params.q.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
    let mut score: Vec<f64> = (0..m).map(|h| params.delta[h].ln() + dens(0, h)).collect();
    let mut back = vec![vec![0usize; m]; tl];
    for t in 1..tl {
        let mut next = vec![f64::NEG_INFINITY; m];
        for h in 0..m {
            let mut arg = 0;
            for k in 0..m {
                if score[k] + lq[k][h] > score[arg] + lq[arg][h] {
                    arg = k;
                }
            }
            back[t][h] = arg;
            next[h] = score[arg] + lq[arg][h] + dens(t, h);
        }
        score = next;
    }
    let mut path = vec![argmax_first(&score); tl];
    for t in (1..tl).rev() {
        path[t - 1] = back[t][path[t]];
    }
    path
}

/// Joint log-probability of observations and a state path within component `g`.
pub fn path_log_prob(
    data: &PanelDataset,
    params: &ParamSet,
    spec: &ModelSpec,
    i: usize,
    g: usize,
    path: &[usize],
) -> Result<f64> {
    let occ = &data.unit(i).occasions;
    if path.len() != occ.len() {
        return Err(Error::DimensionMismatch("path length differs from the unit's occasions".into()));
    }
    let mut lp = params.delta[path[0]].ln();
    for (t, o) in occ.iter().enumerate() {
        if t > 0 {
            lp += params.q[path[t - 1]][path[t]].ln();
        }
        lp += crate::quantile::ald_logdensity(o.y, params.location(o, path[t], g), params.sigma, spec.tau)?;
    }
    Ok(lp)
}
