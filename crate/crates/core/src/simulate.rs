//! Synthetic panels: the two benchmark scenarios and generic generation from a
//! parameter set.
//!
//! Scenario Two draws the observed length `T_i` first, then the drop-out class
//! from the cumulative-logit law given `T_i`, then the hidden path, covariates and
//! errors: `y = alpha_h + b_g x1 + beta x2 + e`. Scenario One has complete panels,
//! a continuous random slope and `y = alpha_h + (b_i + beta1) x1 + beta2 x2 + e`;
//! it is laid out with `x2` as the fixed covariate and `x1` as the random slope.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Exp1, Normal, StudentT, Uniform};
use statrs::distribution::{ContinuousCDF, Normal as NormalCdf, StudentsT};

use crate::dataset::{ColumnMap, PanelDataset, RawRecord};
use crate::error::{Error, Result};
use crate::hmm::log_component_priors;
use crate::model::{ParamSet, Priors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorDist {
    Normal01,
    StudentT3,
    ChiSq2,
    /// Asymmetric Laplace with zero `tau`-quantile and unit scale.
    Ald { tau: f64 },
}

impl ErrorDist {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "normal01" | "n" | "gaussian" => Ok(ErrorDist::Normal01),
            "t3" | "student_t3" | "studentt3" => Ok(ErrorDist::StudentT3),
            "chisq2" | "chi2" | "chisq" => Ok(ErrorDist::ChiSq2),
            other => Err(Error::Parse(format!("unknown error distribution '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorDist::Normal01 => "normal",
            ErrorDist::StudentT3 => "t3",
            ErrorDist::ChiSq2 => "chisq2",
            ErrorDist::Ald { .. } => "ald",
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorDist::Normal01 => rng.sample(rand_distr::StandardNormal),
            ErrorDist::StudentT3 => StudentT::new(3.0).expect("valid dof").sample(rng),
            ErrorDist::ChiSq2 => ChiSquared::new(2.0).expect("valid dof").sample(rng),
            ErrorDist::Ald { tau } => {
                let e1: f64 = rng.sample(Exp1);
                let e2: f64 = rng.sample(Exp1);
                e1 / tau - e2 / (1.0 - tau)
            }
        }
    }

    /// `tau`-quantile of the (unrecentred) error law.
    pub fn quantile(&self, tau: f64) -> f64 {
        match *self {
            ErrorDist::Normal01 => NormalCdf::standard().inverse_cdf(tau),
            ErrorDist::StudentT3 => StudentsT::new(0.0, 1.0, 3.0).expect("valid dof").inverse_cdf(tau),
            ErrorDist::ChiSq2 => -2.0 * (1.0 - tau).ln(),
            ErrorDist::Ald { tau: own } => {
                // piecewise-exponential inverse cdf of the unit-scale law
                if tau <= own {
                    (tau / own).ln() / (1.0 - own)
                } else {
                    -((1.0 - tau) / (1.0 - own)).ln() / own
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomEffectDist {
    Normal01,
    StudentT3,
}

impl RandomEffectDist {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "normal01" | "n" | "gaussian" => Ok(RandomEffectDist::Normal01),
            "t3" | "student_t3" | "studentt3" => Ok(RandomEffectDist::StudentT3),
            other => Err(Error::Parse(format!("unknown random-effect distribution '{other}'"))),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            RandomEffectDist::Normal01 => rng.sample(rand_distr::StandardNormal),
            RandomEffectDist::StudentT3 => StudentT::new(3.0).expect("valid dof").sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSet {
    Low,
    High,
}

impl LambdaSet {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(LambdaSet::Low),
            "high" => Ok(LambdaSet::High),
            other => Err(Error::Parse(format!("unknown lambda set '{other}'"))),
        }
    }

    /// `(lambda01, lambda02, lambda1)`.
    pub fn values(&self) -> (f64, f64, f64) {
        match self {
            LambdaSet::Low => (1.0, 2.75, -0.3),
            LambdaSet::High => (5.0, 8.5, -1.1),
        }
    }
}

/// Law of the number of observed occasions in Scenario Two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutLaw {
    /// `Pr(T_i = j) = 1 / T` for `j = 1..=T`.
    Uniform1ToT,
    /// `Pr(T_i = j) = 1 / (T - 1)` for `j = 2..=T`.
    Uniform2ToT,
}

impl DropoutLaw {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform_1_to_T" | "uniform_1_to_t" => Ok(DropoutLaw::Uniform1ToT),
            "uniform_2_to_T" | "uniform_2_to_t" => Ok(DropoutLaw::Uniform2ToT),
            other => Err(Error::Parse(format!("unknown drop-out law '{other}'"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, t_max: usize, rng: &mut R) -> usize {
        match self {
            DropoutLaw::Uniform1ToT => rng.random_range(1..=t_max),
            DropoutLaw::Uniform2ToT if t_max >= 2 => rng.random_range(2..=t_max),
            DropoutLaw::Uniform2ToT => t_max,
        }
    }
}

/// Reading of the dispersion in `x1 ~ N(1, 3)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum X1Spread {
    Variance3,
    Sd3,
}

/// Test hooks that pin parts of the generating process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebugOverrides {
    pub zero_error: bool,
    pub force_state: Option<usize>,
    pub force_class: Option<usize>,
    pub force_x1: Option<f64>,
    pub force_x2: Option<f64>,
    pub zero_reffect: bool,
    pub error_scale: f64,
}

impl Default for DebugOverrides {
    fn default() -> Self {
        Self {
            zero_error: false,
            force_state: None,
            force_class: None,
            force_x1: None,
            force_x2: None,
            zero_reffect: false,
            error_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub t: usize,
    pub error_dist: ErrorDist,
    pub reffect_dist: RandomEffectDist,
    pub lambda_set: LambdaSet,
    pub dropout: DropoutLaw,
    pub x1_spread: X1Spread,
    pub rng_seed: u64,
    pub overrides: DebugOverrides,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, t: usize) -> Self {
        Self {
            scenario,
            n,
            t,
            error_dist: ErrorDist::Normal01,
            reffect_dist: RandomEffectDist::Normal01,
            lambda_set: LambdaSet::High,
            dropout: DropoutLaw::Uniform2ToT,
            x1_spread: X1Spread::Variance3,
            rng_seed: 0,
            overrides: DebugOverrides::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidSpec("n and T must be at least 1".into()));
        }
        Ok(())
    }

    pub fn columns(&self) -> ColumnMap {
        match self.scenario {
            Scenario::One => ColumnMap::new(&["x2"], &["x1"], &["one"]),
            Scenario::Two => ColumnMap::new(&["x2"], &["x1"], &["one"]),
        }
    }

    /// Generating parameters. Scenario One's random slope is continuous; its
    /// parameter set carries a single component at the slope mean `beta1`.
    pub fn truth_params(&self) -> ParamSet {
        match self.scenario {
            Scenario::One => ParamSet {
                beta: vec![-0.8],
                alpha: vec![vec![100.0], vec![110.0]],
                b: vec![vec![2.0]],
                delta: vec![0.7, 0.3],
                q: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
                sigma: 1.0,
                priors: Priors::Mixture(vec![1.0]),
            },
            Scenario::Two => {
                let (l01, l02, l1) = self.lambda_set.values();
                ParamSet {
                    beta: vec![-0.8],
                    alpha: vec![vec![100.0], vec![102.5]],
                    b: vec![vec![0.5], vec![1.5], vec![3.0]],
                    delta: vec![0.7, 0.3],
                    q: vec![vec![0.7, 0.3], vec![0.3, 0.7]],
                    sigma: 1.0,
                    priors: Priors::LatentDropOut {
                        lambda0: vec![l01, l02],
                        lambda1: l1,
                    },
                }
            }
        }
    }
}

/// Latent quantities behind a generated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub params: ParamSet,
    pub unit_labels: Vec<String>,
    /// Mixture component per unit (0-based).
    pub classes: Vec<usize>,
    /// Hidden state per unit and occasion (0-based).
    pub states: Vec<Vec<usize>>,
    /// Continuous random slopes (Scenario One only).
    pub reffects: Vec<f64>,
}

impl Truth {
    /// Long-format sidecar: `unit,time,class,state` with 1-based class/state.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "time", "class", "state"])?;
        for (i, label) in self.unit_labels.iter().enumerate() {
            for (t, s) in self.states[i].iter().enumerate() {
                w.write_record([
                    label.clone(),
                    (t + 1).to_string(),
                    (self.classes[i] + 1).to_string(),
                    (s + 1).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Per-unit class labels and per-occasion states read back from a truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthLabels {
    pub unit_labels: Vec<String>,
    pub classes: Vec<usize>,
    pub states: Vec<Vec<usize>>,
}

pub fn read_truth_csv<R: Read>(reader: R) -> Result<TruthLabels> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = TruthLabels {
        unit_labels: Vec::new(),
        classes: Vec::new(),
        states: Vec::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(Error::Parse("truth rows need unit,time,class,state".into()));
        }
        let num = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse::<usize>()
                .ok()
                .filter(|v| *v >= 1)
                .map(|v| v - 1)
                .ok_or_else(|| Error::Parse(format!("bad truth value '{}'", &rec[k])))
        };
        let label = rec[0].to_string();
        let (class, state) = (num(2)?, num(3)?);
        if out.unit_labels.last() != Some(&label) {
            out.unit_labels.push(label);
            out.classes.push(class);
            out.states.push(Vec::new());
        }
        out.states.last_mut().expect("pushed").push(state);
    }
    Ok(out)
}

fn markov_path<R: Rng + ?Sized>(params: &ParamSet, len: usize, rng: &mut R) -> Vec<usize> {
    let mut path = Vec::with_capacity(len);
    let mut cur = draw_index(&params.delta, rng);
    path.push(cur);
    for _ in 1..len {
        cur = draw_index(&params.q[cur], rng);
        path.push(cur);
    }
    path
}

fn draw_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn class_probs(priors: &Priors, t_len: usize) -> Vec<f64> {
    log_component_priors(priors, t_len).iter().map(|v| v.exp()).collect()
}

pub fn generate_scenario2(cfg: &ScenarioConfig) -> Result<(PanelDataset, Truth)> {
    cfg.validate()?;
    let params = ScenarioConfig {
        scenario: Scenario::Two,
        ..cfg.clone()
    }
    .truth_params();
    let ov = &cfg.overrides;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let sd = match cfg.x1_spread {
        X1Spread::Variance3 => 3f64.sqrt(),
        X1Spread::Sd3 => 3.0,
    };
    let x1_law = Normal::new(1.0, sd).expect("valid normal");
    let x2_law = Uniform::new(0.0, 10.0).expect("valid range");

    let mut recs = Vec::new();
    let mut truth = Truth {
        params: params.clone(),
        unit_labels: Vec::with_capacity(cfg.n),
        classes: Vec::with_capacity(cfg.n),
        states: Vec::with_capacity(cfg.n),
        reffects: Vec::new(),
    };
    for i in 0..cfg.n {
        let tl = cfg.dropout.sample(cfg.t, &mut rng);
        let probs = class_probs(&params.priors, tl);
        let drawn_class = draw_index(&probs, &mut rng);
        let g = ov.force_class.unwrap_or(drawn_class);
        let drawn_path = markov_path(&params, tl, &mut rng);
        let path: Vec<usize> = drawn_path.iter().map(|&h| ov.force_state.unwrap_or(h)).collect();
        let label = (i + 1).to_string();
        for (t, &h) in path.iter().enumerate() {
            let x1 = ov.force_x1.unwrap_or_else(|| x1_law.sample(&mut rng));
            let x2 = ov.force_x2.unwrap_or_else(|| x2_law.sample(&mut rng));
            let e = cfg.error_dist.sample(&mut rng);
            let e = if ov.zero_error { 0.0 } else { e * ov.error_scale };
            let y = params.alpha[h][0] + params.b[g][0] * x1 + params.beta[0] * x2 + e;
            recs.push(RawRecord {
                unit: label.clone(),
                time: (t + 1) as i64,
                y,
                x: vec![x2],
                z: vec![x1],
                w: vec![1.0],
            });
        }
        truth.unit_labels.push(label);
        truth.classes.push(g);
        truth.states.push(path);
    }
    let data = PanelDataset::from_records(cfg.columns(), recs)?;
    Ok((data, truth))
}

pub fn generate_scenario1(cfg: &ScenarioConfig) -> Result<(PanelDataset, Truth)> {
    cfg.validate()?;
    let params = ScenarioConfig {
        scenario: Scenario::One,
        ..cfg.clone()
    }
    .truth_params();
    let ov = &cfg.overrides;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let x1_law = Uniform::new_inclusive(-10.0, 10.0).expect("valid range");
    let x2_law = Bernoulli::new(0.5).expect("valid probability");

    let mut recs = Vec::new();
    let mut truth = Truth {
        params: params.clone(),
        unit_labels: Vec::with_capacity(cfg.n),
        classes: vec![0; cfg.n],
        states: Vec::with_capacity(cfg.n),
        reffects: Vec::with_capacity(cfg.n),
    };
    for i in 0..cfg.n {
        let bi = cfg.reffect_dist.sample(&mut rng);
        let bi = if ov.zero_reffect { 0.0 } else { bi };
        let x2_draw = if x2_law.sample(&mut rng) { 1.0 } else { 0.0 };
        let x2 = ov.force_x2.unwrap_or(x2_draw);
        let drawn_path = markov_path(&params, cfg.t, &mut rng);
        let path: Vec<usize> = drawn_path.iter().map(|&h| ov.force_state.unwrap_or(h)).collect();
        let label = (i + 1).to_string();
        for (t, &h) in path.iter().enumerate() {
            let x1 = ov.force_x1.unwrap_or_else(|| x1_law.sample(&mut rng));
            let e = cfg.error_dist.sample(&mut rng);
            let e = if ov.zero_error { 0.0 } else { e * ov.error_scale };
            let y = params.alpha[h][0] + (bi + params.b[0][0]) * x1 + params.beta[0] * x2 + e;
            recs.push(RawRecord {
                unit: label.clone(),
                time: (t + 1) as i64,
                y,
                x: vec![x2],
                z: vec![x1],
                w: vec![1.0],
            });
        }
        truth.unit_labels.push(label);
        truth.reffects.push(bi);
        truth.states.push(path);
    }
    let data = PanelDataset::from_records(cfg.columns(), recs)?;
    Ok((data, truth))
}

pub fn generate(cfg: &ScenarioConfig) -> Result<(PanelDataset, Truth)> {
    match cfg.scenario {
        Scenario::One => generate_scenario1(cfg),
        Scenario::Two => generate_scenario2(cfg),
    }
}

/// Error law for [`generate_from_params`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorLaw {
    /// Asymmetric Laplace at `tau` with the parameter set's scale.
    Ald { tau: f64 },
    /// The given distribution multiplied by the parameter set's scale.
    Scaled(ErrorDist),
}

/// Covariates of one occasion: `(x, z, w)`.
pub type Design = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Generic generator: draws `T_i` from `t_law`, the component from the priors
/// given `T_i`, the hidden path from `(delta, Q)`, covariates from `design` and
/// errors from `errors`.
pub fn generate_from_params<D, L>(
    params: &ParamSet,
    columns: ColumnMap,
    n: usize,
    mut t_law: L,
    mut design: D,
    errors: ErrorLaw,
    seed: u64,
) -> Result<(PanelDataset, Truth)>
where
    D: FnMut(&mut ChaCha8Rng, usize, usize) -> Design,
    L: FnMut(&mut ChaCha8Rng) -> usize,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recs = Vec::new();
    let mut truth = Truth {
        params: params.clone(),
        unit_labels: Vec::with_capacity(n),
        classes: Vec::with_capacity(n),
        states: Vec::with_capacity(n),
        reffects: Vec::new(),
    };
    for i in 0..n {
        let tl = t_law(&mut rng).max(1);
        let g = draw_index(&class_probs(&params.priors, tl), &mut rng);
        let path = markov_path(params, tl, &mut rng);
        let label = (i + 1).to_string();
        for (t, &h) in path.iter().enumerate() {
            let (x, z, w) = design(&mut rng, i, t);
            let occ = crate::dataset::Occasion { y: 0.0, x, z, w };
            let e = match errors {
                ErrorLaw::Ald { tau } => ErrorDist::Ald { tau }.sample(&mut rng),
                ErrorLaw::Scaled(d) => d.sample(&mut rng),
            };
            let y = params.location(&occ, h, g) + params.sigma * e;
            recs.push(RawRecord {
                unit: label.clone(),
                time: (t + 1) as i64,
                y,
                x: occ.x,
                z: occ.z,
                w: occ.w,
            });
        }
        truth.unit_labels.push(label);
        truth.classes.push(g);
        truth.states.push(path);
    }
    let data = PanelDataset::from_records(columns, recs)?;
    Ok((data, truth))
}
