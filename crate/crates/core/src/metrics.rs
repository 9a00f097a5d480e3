//! Bias/RMSE, adjusted Rand index, truth alignment and the replicate-study driver.

use std::collections::HashMap;
use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;

use crate::em::{job_seed, multi_start_fit, StartConfig};
use crate::error::{Error, Result};
use crate::hmm::log_component_priors;
use crate::inference::classify_components;
use crate::model::{ModelSpec, ParamSet, PriorMode};
use crate::simulate::{generate, Scenario, ScenarioConfig};

/// Share of failed replicates above which a study errors.
pub const MAX_STUDY_FAILURES: f64 = 0.1;
const STUDY_SALT: u64 = 0x5717_d1e5;

/// `(mean(est) - truth, sqrt(mean((est - truth)^2)))`.
pub fn bias_rmse(estimates: &[f64], truth: f64) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::InvalidSpec("bias/RMSE of an empty estimate list".into()));
    }
    let n = estimates.len() as f64;
    let bias = estimates.iter().map(|e| e - truth).sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n;
    Ok((bias, mse.sqrt()))
}

fn choose2(k: usize) -> f64 {
    (k as f64) * (k as f64 - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index. Two trivial partitions (both a single
/// block, or both all singletons) score 1.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Assignment minimising total absolute distance: `perm[k]` is the fitted row
/// matched to truth row `k`. Exhaustive, so only for a handful of labels.
pub fn align_to_truth(fitted: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<Vec<usize>> {
    if fitted.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} fitted labels vs {} generating labels",
            fitted.len(),
            truth.len()
        )));
    }
    let cost = |p: &[usize]| -> f64 {
        p.iter()
            .enumerate()
            .map(|(k, &f)| fitted[f].iter().zip(&truth[k]).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum()
    };
    let best = permutations(fitted.len())
        .into_iter()
        .min_by(|a, b| cost(a).total_cmp(&cost(b)))
        .unwrap_or_default();
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub scenario: ScenarioConfig,
    pub replicates: usize,
    pub taus: Vec<f64>,
    pub n_states: usize,
    pub n_components: usize,
    pub modes: Vec<PriorMode>,
    pub starts: StartConfig,
}

impl StudyConfig {
    pub fn new(scenario: ScenarioConfig, replicates: usize) -> Self {
        Self {
            scenario,
            replicates,
            taus: vec![0.5],
            n_states: 2,
            n_components: 3,
            modes: vec![PriorMode::LatentDropOut, PriorMode::ConstantMixture],
            starts: StartConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.starts.validate()?;
        if self.replicates == 0 || self.taus.is_empty() || self.modes.is_empty() {
            return Err(Error::InvalidSpec("a study needs replicates, quantiles and models".into()));
        }
        if self.scenario.scenario == Scenario::Two && self.n_components != 3 {
            return Err(Error::InvalidSpec("the drop-out scenario is scored with three components".into()));
        }
        for &tau in &self.taus {
            ModelSpec::new(tau, self.n_states, self.n_components, self.modes[0])?;
        }
        Ok(())
    }
}

/// One fitted model in one replicate, relabelled to match the truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFit {
    pub tau: f64,
    pub mode: PriorMode,
    pub params: ParamSet,
    /// Named estimates compared with the truth (see [`ReplicateStudy::targets`]).
    pub estimates: Vec<f64>,
    /// ARI of MAP components against generating classes (drop-out scenario).
    pub ari: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub fits: Vec<AlignedFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub parameter: String,
    pub mode: PriorMode,
    pub tau: f64,
    pub truth_raw: f64,
    pub truth_adjusted: f64,
    pub bias_raw: f64,
    pub rmse_raw: f64,
    pub bias_adjusted: f64,
    pub rmse_adjusted: f64,
    pub n_effective: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateStudy {
    pub config: StudyConfig,
    pub per_replicate: Vec<ReplicateOutcome>,
    pub failed: usize,
    pub summary: Vec<SummaryRow>,
}

/// A scored quantity: name, generating value and quantile-adjusted value.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub name: String,
    pub raw: f64,
    pub adjusted: f64,
}

pub fn study_targets(cfg: &ScenarioConfig, tau: f64) -> Vec<Target> {
    let truth = cfg.truth_params();
    let shift = cfg.error_dist.quantile(tau) * cfg.overrides.error_scale;
    let mut out = vec![Target {
        name: "beta.x2".into(),
        raw: truth.beta[0],
        adjusted: truth.beta[0],
    }];
    for (h, a) in truth.alpha.iter().enumerate() {
        out.push(Target {
            name: format!("alpha.{}.one", h + 1),
            raw: a[0],
            adjusted: a[0] + shift,
        });
    }
    match cfg.scenario {
        Scenario::Two => {
            for (g, b) in truth.b.iter().enumerate() {
                out.push(Target {
                    name: format!("b.{}.x1", g + 1),
                    raw: b[0],
                    adjusted: b[0],
                });
            }
        }
        Scenario::One => out.push(Target {
            name: "mean_slope.x1".into(),
            raw: truth.b[0][0],
            adjusted: truth.b[0][0],
        }),
    }
    out
}

fn mean_slope(params: &ParamSet, t_lens: &[usize]) -> f64 {
    let total: f64 = t_lens
        .iter()
        .map(|&tl| {
            log_component_priors(&params.priors, tl)
                .iter()
                .zip(&params.b)
                .map(|(lp, b)| lp.exp() * b[0])
                .sum::<f64>()
        })
        .sum();
    total / t_lens.len() as f64
}

fn score_replicate(cfg: &StudyConfig, r: usize) -> Result<ReplicateOutcome> {
    let seed = job_seed(cfg.scenario.rng_seed ^ STUDY_SALT, 0, 0, r);
    let scen = ScenarioConfig {
        rng_seed: seed,
        ..cfg.scenario.clone()
    };
    let (data, truth) = generate(&scen)?;
    let t_lens: Vec<usize> = (0..data.n_units()).map(|i| data.t_len(i)).collect();
    let mut fits = Vec::new();
    for (ti, &tau) in cfg.taus.iter().enumerate() {
        let targets = study_targets(&scen, tau);
        let truth_alpha: Vec<Vec<f64>> = targets
            .iter()
            .filter(|t| t.name.starts_with("alpha."))
            .map(|t| vec![t.adjusted])
            .collect();
        for (mi, &mode) in cfg.modes.iter().enumerate() {
            let spec = ModelSpec::new(tau, cfg.n_states, cfg.n_components, mode)?;
            let starts = StartConfig {
                rng_seed: job_seed(seed, ti, mi, 1),
                ..cfg.starts.clone()
            };
            let res = multi_start_fit(&data, &spec, &starts)?;
            let sp = align_to_truth(&res.params.alpha, &truth_alpha)?;
            let mut params = res.params.permute_states(&sp);
            let mut classes = classify_components(&res.posterior);
            if scen.scenario == Scenario::Two {
                let cp = align_to_truth(&params.b, &truth.params.b)?;
                params = params.permute_components(&cp);
                let mut inverse = vec![0; cp.len()];
                for (new, &old) in cp.iter().enumerate() {
                    inverse[old] = new;
                }
                classes.iter_mut().for_each(|c| *c = inverse[*c]);
            }
            let estimates = targets
                .iter()
                .map(|t| match t.name.as_str() {
                    "beta.x2" => params.beta[0],
                    "mean_slope.x1" => mean_slope(&params, &t_lens),
                    name => {
                        let mut parts = name.split('.');
                        let kind = parts.next().unwrap_or("");
                        let k: usize = parts.next().and_then(|s| s.parse().ok()).unwrap_or(1) - 1;
                        if kind == "alpha" {
                            params.alpha[k][0]
                        } else {
                            params.b[k][0]
                        }
                    }
                })
                .collect();
            let ari = match scen.scenario {
                Scenario::Two => Some(adjusted_rand(&classes, &truth.classes)?),
                Scenario::One => None,
            };
            fits.push(AlignedFit {
                tau,
                mode,
                params,
                estimates,
                ari,
                converged: res.converged,
            });
        }
    }
    Ok(ReplicateOutcome {
        replicate: r,
        seed,
        fits,
    })
}

/// Generates `replicates` data sets, fits every (quantile, model) pair and
/// summarises bias and RMSE against the generating values.
pub fn run_study(cfg: &StudyConfig) -> Result<ReplicateStudy> {
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| score_replicate(cfg, r))
        .collect();
    let mut per_replicate = Vec::new();
    let mut failed = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => per_replicate.push(o),
            Err(e) => {
                warn!("replicate {r} failed: {e}");
                failed += 1;
            }
        }
    }
    if per_replicate.is_empty() || failed as f64 > MAX_STUDY_FAILURES * cfg.replicates as f64 {
        return Err(Error::TooManyFailures {
            failed,
            total: cfg.replicates,
        });
    }
    info!("study finished: {} replicates kept, {failed} failed", per_replicate.len());

    let mut summary = Vec::new();
    for (ti, &tau) in cfg.taus.iter().enumerate() {
        let targets = study_targets(&cfg.scenario, tau);
        for (mi, &mode) in cfg.modes.iter().enumerate() {
            let slot = ti * cfg.modes.len() + mi;
            for (j, t) in targets.iter().enumerate() {
                let est: Vec<f64> = per_replicate.iter().map(|o| o.fits[slot].estimates[j]).collect();
                let (bias_raw, rmse_raw) = bias_rmse(&est, t.raw)?;
                let (bias_adjusted, rmse_adjusted) = bias_rmse(&est, t.adjusted)?;
                summary.push(SummaryRow {
                    parameter: t.name.clone(),
                    mode,
                    tau,
                    truth_raw: t.raw,
                    truth_adjusted: t.adjusted,
                    bias_raw,
                    rmse_raw,
                    bias_adjusted,
                    rmse_adjusted,
                    n_effective: est.len(),
                });
            }
        }
    }
    Ok(ReplicateStudy {
        config: cfg.clone(),
        per_replicate,
        failed,
        summary,
    })
}

fn model_label(mode: PriorMode) -> &'static str {
    match mode {
        PriorMode::LatentDropOut => "lqHMM+LDO",
        PriorMode::ConstantMixture => "lqmHMM",
    }
}

impl ReplicateStudy {
    pub fn row(&self, parameter: &str, mode: PriorMode, tau: f64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.parameter == parameter && r.mode == mode && r.tau == tau)
    }

    /// Per-replicate ARI for `mode` at `tau` (drop-out scenario only).
    pub fn ari(&self, mode: PriorMode, tau: f64) -> Vec<f64> {
        self.per_replicate
            .iter()
            .filter_map(|o| o.fits.iter().find(|f| f.mode == mode && f.tau == tau)?.ari)
            .collect()
    }

    /// Long-format summary with raw and quantile-adjusted truth columns.
    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "parameter",
            "model",
            "tau",
            "error_dist",
            "truth_raw",
            "truth_adjusted",
            "bias_raw",
            "rmse_raw",
            "bias_adjusted",
            "rmse_adjusted",
            "n_effective",
        ])?;
        for r in &self.summary {
            w.write_record([
                r.parameter.clone(),
                model_label(r.mode).to_string(),
                r.tau.to_string(),
                self.config.scenario.error_dist.as_str().to_string(),
                r.truth_raw.to_string(),
                r.truth_adjusted.to_string(),
                r.bias_raw.to_string(),
                r.rmse_raw.to_string(),
                r.bias_adjusted.to_string(),
                r.rmse_adjusted.to_string(),
                r.n_effective.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Wide table: one row per parameter, one `bias (rmse)` cell per
    /// (model, quantile), against the quantile-adjusted truth.
    pub fn write_table_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let dist = self.config.scenario.error_dist.as_str();
        let mut header = vec!["parameter".to_string()];
        for &tau in &self.config.taus {
            for &mode in &self.config.modes {
                header.push(format!("{} tau={tau} {dist}", model_label(mode)));
            }
        }
        w.write_record(&header)?;
        let names: Vec<String> = study_targets(&self.config.scenario, self.config.taus[0])
            .into_iter()
            .map(|t| t.name)
            .collect();
        for name in names {
            let mut rec = vec![name.clone()];
            for &tau in &self.config.taus {
                for &mode in &self.config.modes {
                    let cell = self
                        .row(&name, mode, tau)
                        .map(|r| format!("{:.3} ({:.2})", r.bias_adjusted, r.rmse_adjusted))
                        .unwrap_or_default();
                    rec.push(cell);
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `replicate,tau,model,ari` rows for external plotting.
    pub fn write_ari_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["replicate", "tau", "model", "ari"])?;
        for o in &self.per_replicate {
            for f in &o.fits {
                if let Some(a) = f.ari {
                    w.write_record([
                        (o.replicate + 1).to_string(),
                        f.tau.to_string(),
                        model_label(f.mode).to_string(),
                        a.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample median (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
