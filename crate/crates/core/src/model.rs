//! Model specification, parameter sets and E-step posteriors.

use crate::dataset::Occasion;
use crate::error::{Error, Result};

const PROB_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorMode {
    /// Component masses `pi_g` shared by every unit.
    ConstantMixture,
    /// Component masses from a cumulative-logit model in the unit's occasion count.
    LatentDropOut,
}

impl PriorMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorMode::ConstantMixture => "mixture",
            PriorMode::LatentDropOut => "ldo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mixture" | "constant" | "constantmixture" | "lqmhmm" => Ok(PriorMode::ConstantMixture),
            "ldo" | "latentdropout" | "lqhmm+ldo" => Ok(PriorMode::LatentDropOut),
            other => Err(Error::Parse(format!("unknown prior mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub tau: f64,
    pub n_states: usize,
    pub n_components: usize,
    pub prior_mode: PriorMode,
    /// Relative log-likelihood change below which EM stops.
    pub eps_em: f64,
    pub max_iter: usize,
}

impl ModelSpec {
    pub const DEFAULT_EPS: f64 = 1e-8;
    pub const DEFAULT_MAX_ITER: usize = 500;

    pub fn new(tau: f64, n_states: usize, n_components: usize, prior_mode: PriorMode) -> Result<Self> {
        let spec = Self {
            tau,
            n_states,
            n_components,
            prior_mode,
            eps_em: Self::DEFAULT_EPS,
            max_iter: Self::DEFAULT_MAX_ITER,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps_em = eps;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidSpec(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.n_states == 0 || self.n_components == 0 {
            return Err(Error::InvalidSpec("state and component counts must be at least 1".into()));
        }
        if !(self.eps_em > 0.0) {
            return Err(Error::InvalidSpec("eps_em must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidSpec("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Priors {
    Mixture(Vec<f64>),
    /// Cumulative-logit thresholds (length `G - 1`, nondecreasing) and common slope on `T_i`.
    LatentDropOut { lambda0: Vec<f64>, lambda1: f64 },
}

impl Priors {
    pub fn mode(&self) -> PriorMode {
        match self {
            Priors::Mixture(_) => PriorMode::ConstantMixture,
            Priors::LatentDropOut { .. } => PriorMode::LatentDropOut,
        }
    }

    pub fn n_components(&self) -> usize {
        match self {
            Priors::Mixture(pi) => pi.len(),
            Priors::LatentDropOut { lambda0, .. } => lambda0.len() + 1,
        }
    }
}

/// Full parameter vector of the quantile mixed HMM at one `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub beta: Vec<f64>,
    /// One coefficient vector per hidden state (length `d` each).
    pub alpha: Vec<Vec<f64>>,
    /// One location vector per mixture component (length `r` each).
    pub b: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    /// Row-stochastic transition matrix, `q[k][h] = Pr(S_t = h | S_{t-1} = k)`.
    pub q: Vec<Vec<f64>>,
    pub sigma: f64,
    pub priors: Priors,
}

impl ParamSet {
    /// Conditional `tau`-quantile `x'beta + z'b_g + w'alpha_h` of one occasion.
    #[inline]
    pub fn location(&self, occ: &Occasion, h: usize, g: usize) -> f64 {
        dot(&occ.x, &self.beta) + dot(&occ.z, &self.b[g]) + dot(&occ.w, &self.alpha[h])
    }

    pub fn n_states(&self) -> usize {
        self.delta.len()
    }

    pub fn n_components(&self) -> usize {
        self.b.len()
    }

    /// Checks every structural invariant against dimensions `(p, r, d)`.
    pub fn validate(&self, p: usize, r: usize, d: usize) -> Result<()> {
        let m = self.delta.len();
        let g = self.b.len();
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if m == 0 || g == 0 {
            return bad("need at least one state and one component".into());
        }
        if self.beta.len() != p {
            return bad(format!("beta has length {}, expected {p}", self.beta.len()));
        }
        if self.alpha.len() != m || self.alpha.iter().any(|a| a.len() != d) {
            return bad(format!("alpha must be {m} vectors of length {d}"));
        }
        if self.b.iter().any(|b| b.len() != r) {
            return bad(format!("b must be {g} vectors of length {r}"));
        }
        if self.q.len() != m || self.q.iter().any(|row| row.len() != m) {
            return bad(format!("Q must be {m}x{m}"));
        }
        let finite = self
            .beta
            .iter()
            .chain(self.alpha.iter().flatten())
            .chain(self.b.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteValue("location parameters".into()));
        }
        check_prob_vector(&self.delta, "delta")?;
        for (k, row) in self.q.iter().enumerate() {
            check_prob_vector(row, &format!("Q row {}", k + 1))?;
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::NonPositiveScale(self.sigma));
        }
        match &self.priors {
            Priors::Mixture(pi) => {
                if pi.len() != g {
                    return bad(format!("pi has length {}, expected {g}", pi.len()));
                }
                check_prob_vector(pi, "pi")?;
            }
            Priors::LatentDropOut { lambda0, lambda1 } => {
                if lambda0.len() + 1 != g {
                    return bad(format!("lambda0 has length {}, expected {}", lambda0.len(), g - 1));
                }
                if !lambda1.is_finite() || lambda0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteValue("lambda".into()));
                }
                if lambda0.windows(2).any(|w| w[1] < w[0]) {
                    return bad("lambda0 must be nondecreasing".into());
                }
            }
        }
        Ok(())
    }

    /// Reorders states by `perm` (new state `h` is old state `perm[h]`).
    pub fn permute_states(&self, perm: &[usize]) -> ParamSet {
        let mut out = self.clone();
        out.alpha = perm.iter().map(|&k| self.alpha[k].clone()).collect();
        out.delta = perm.iter().map(|&k| self.delta[k]).collect();
        out.q = perm
            .iter()
            .map(|&k| perm.iter().map(|&h| self.q[k][h]).collect())
            .collect();
        out
    }

    /// Reorders mixture components. Only meaningful for constant-mixture priors.
    pub fn permute_components(&self, perm: &[usize]) -> ParamSet {
        let mut out = self.clone();
        out.b = perm.iter().map(|&g| self.b[g].clone()).collect();
        if let Priors::Mixture(pi) = &self.priors {
            out.priors = Priors::Mixture(perm.iter().map(|&g| pi[g]).collect());
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_prob_vector(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidParams(format!("{what} has entries outside [0, 1]")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidParams(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Posterior quantities for one unit, stored densely over its observed occasions.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitPosterior {
    pub t_len: usize,
    /// `[t * m + h]`
    pub u_single: Vec<f64>,
    /// `[(t - 1) * m * m + k * m + h]` for `t >= 1` (0-based occasions).
    pub u_pair: Vec<f64>,
    /// `[g]`
    pub zeta: Vec<f64>,
    /// `[(t * m + h) * G + g]`, state posterior conditional on component `g`.
    pub u_cond: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSet {
    pub n_states: usize,
    pub n_components: usize,
    pub units: Vec<UnitPosterior>,
}

impl PosteriorSet {
    pub fn single(&self, i: usize, t: usize, h: usize) -> f64 {
        self.units[i].u_single[t * self.n_states + h]
    }

    /// Transition posterior into occasion `t >= 1` (0-based).
    pub fn pair(&self, i: usize, t: usize, k: usize, h: usize) -> f64 {
        let m = self.n_states;
        self.units[i].u_pair[(t - 1) * m * m + k * m + h]
    }

    pub fn zeta(&self, i: usize, g: usize) -> f64 {
        self.units[i].zeta[g]
    }

    pub fn cond(&self, i: usize, t: usize, h: usize, g: usize) -> f64 {
        self.units[i].u_cond[(t * self.n_states + h) * self.n_components + g]
    }

    /// Joint posterior weight of (state `h`, component `g`) at occasion `t`.
    pub fn joint(&self, i: usize, t: usize, h: usize, g: usize) -> f64 {
        self.zeta(i, g) * self.cond(i, t, h, g)
    }

    /// Largest violation of the normalisation identities.
    pub fn max_invariant_violation(&self) -> f64 {
        let (m, gc) = (self.n_states, self.n_components);
        let mut worst: f64 = 0.0;
        for (i, u) in self.units.iter().enumerate() {
            let zs: f64 = u.zeta.iter().sum();
            worst = worst.max((zs - 1.0).abs());
            for t in 0..u.t_len {
                let s: f64 = (0..m).map(|h| self.single(i, t, h)).sum();
                worst = worst.max((s - 1.0).abs());
                for g in 0..gc {
                    let c: f64 = (0..m).map(|h| self.cond(i, t, h, g)).sum();
                    worst = worst.max((c - 1.0).abs());
                }
                if t >= 1 {
                    let mut total = 0.0;
                    for h in 0..m {
                        let col: f64 = (0..m).map(|k| self.pair(i, t, k, h)).sum();
                        worst = worst.max((col - self.single(i, t, h)).abs());
                        total += col;
                    }
                    worst = worst.max((total - 1.0).abs());
                    for k in 0..m {
                        let row: f64 = (0..m).map(|h| self.pair(i, t, k, h)).sum();
                        worst = worst.max((row - self.single(i, t - 1, k)).abs());
                    }
                }
            }
        }
        worst
    }
}
