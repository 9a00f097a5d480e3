//! M-step updates given a fixed set of posteriors.

use log::{debug, warn};

use crate::dataset::{Occasion, PanelDataset};
use crate::error::{Error, Result};
use crate::hmm::{log_component_priors, log_sigmoid, sigmoid};
use crate::model::{ModelSpec, ParamSet, PosteriorSet, PriorMode, Priors};
use crate::quantile::{
    ald_logdensity_unchecked, check_loss, polish_from, weighted_qr_single_column, WeightedObservation,
    MIN_WEIGHT,
};

/// Posterior mass below which a state or component counts as empty.
pub const EMPTY_MASS: f64 = 1e-10;
/// Largest admissible magnitude for cumulative-logit coefficients.
pub const LAMBDA_BOUND: f64 = 50.0;
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepOptions {
    pub block_tol: f64,
    pub max_cycles: usize,
    /// Finish the location update with an exact descent on the stacked design.
    pub joint_polish: bool,
    /// Hold the cumulative-logit slope at zero.
    pub freeze_slope: bool,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            block_tol: 1e-8,
            max_cycles: 1,
            joint_polish: true,
            freeze_slope: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionUpdate {
    pub delta: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    /// States whose outgoing transition mass vanished; their rows were reset to uniform.
    pub empty_states: Vec<usize>,
}

pub fn update_initial_transition(post: &PosteriorSet) -> TransitionUpdate {
    let m = post.n_states;
    let n = post.units.len();
    let mut delta = vec![0.0; m];
    let mut counts = vec![vec![0.0; m]; m];
    for (i, u) in post.units.iter().enumerate() {
        for (h, d) in delta.iter_mut().enumerate() {
            *d += post.single(i, 0, h);
        }
        for t in 1..u.t_len {
            for (k, row) in counts.iter_mut().enumerate() {
                for (h, c) in row.iter_mut().enumerate() {
                    *c += post.pair(i, t, k, h);
                }
            }
        }
    }
    delta.iter_mut().for_each(|d| *d /= n as f64);
    let s: f64 = delta.iter().sum();
    delta.iter_mut().for_each(|d| *d /= s);

    let mut empty_states = Vec::new();
    let q = counts
        .into_iter()
        .enumerate()
        .map(|(k, row)| {
            let tot: f64 = row.iter().sum();
            if tot < EMPTY_MASS {
                empty_states.push(k);
                vec![1.0 / m as f64; m]
            } else {
                row.iter().map(|c| c / tot).collect()
            }
        })
        .collect();
    if !empty_states.is_empty() {
        debug!("transition rows reset to uniform for states {empty_states:?}");
    }
    TransitionUpdate { delta, q, empty_states }
}

/// One (unit, occasion, state, component) cell with its joint posterior weight.
#[derive(Debug, Clone, Copy)]
struct Cell<'a> {
    occ: &'a Occasion,
    h: usize,
    g: usize,
    weight: f64,
}

fn cells<'a>(data: &'a PanelDataset, post: &PosteriorSet) -> Vec<Cell<'a>> {
    let (m, gc) = (post.n_states, post.n_components);
    let mut out = Vec::with_capacity(data.total_obs() * m * gc);
    for (i, unit) in data.units().iter().enumerate() {
        for (t, occ) in unit.occasions.iter().enumerate() {
            for h in 0..m {
                for g in 0..gc {
                    let weight = post.joint(i, t, h, g);
                    if weight >= MIN_WEIGHT {
                        out.push(Cell { occ, h, g, weight });
                    }
                }
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cells_objective(cells: &[Cell], params: &ParamSet, tau: f64) -> f64 {
    cells
        .iter()
        .map(|c| c.weight * check_loss(c.occ.y - params.location(c.occ, c.h, c.g), tau))
        .sum()
}

/// Total posterior-weighted check loss of the location parameters.
pub fn weighted_check_loss(data: &PanelDataset, post: &PosteriorSet, params: &ParamSet, tau: f64) -> f64 {
    cells_objective(&cells(data, post), params, tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockUpdate {
    pub beta: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub objective_before: f64,
    pub objective_after: f64,
    pub cycles: usize,
    /// Blocks left at their previous value because they carried no weight or had
    /// a rank-deficient design (`"beta"`, `"alpha.h"`, `"b.g"`, 1-based).
    pub skipped_blocks: Vec<String>,
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Beta,
    Alpha(usize),
    B(usize),
}

fn block_problem(cells: &[Cell], params: &ParamSet, block: Block) -> Vec<WeightedObservation> {
    cells
        .iter()
        .filter(|c| match block {
            Block::Beta => true,
            Block::Alpha(h) => c.h == h,
            Block::B(g) => c.g == g,
        })
        .map(|c| {
            let o = c.occ;
            let (design, own) = match block {
                Block::Beta => (&o.x, dot(&o.x, &params.beta)),
                Block::Alpha(_) => (&o.w, dot(&o.w, &params.alpha[c.h])),
                Block::B(_) => (&o.z, dot(&o.z, &params.b[c.g])),
            };
            let partial = o.y - (params.location(o, c.h, c.g) - own);
            WeightedObservation::new(partial, design.clone(), c.weight)
        })
        .collect()
}

/// Exact minimiser of one block, warm-started at `current`.
fn solve_block(obs: &[WeightedObservation], tau: f64, current: &[f64]) -> Result<Vec<f64>> {
    match current.len() {
        0 => Ok(Vec::new()),
        1 => Ok(vec![weighted_qr_single_column(obs, tau)?]),
        _ => polish_from(obs, tau, current),
    }
}

fn block_value<'p>(params: &'p mut ParamSet, block: Block) -> &'p mut Vec<f64> {
    match block {
        Block::Beta => &mut params.beta,
        Block::Alpha(h) => &mut params.alpha[h],
        Block::B(g) => &mut params.b[g],
    }
}

fn block_name(block: Block) -> String {
    match block {
        Block::Beta => "beta".into(),
        Block::Alpha(h) => format!("alpha.{}", h + 1),
        Block::B(g) => format!("b.{}", g + 1),
    }
}

/// Block-cyclic update of `beta`, `alpha` and `b`, optionally followed by a joint
/// exact descent over all location parameters at once.
///
/// Each block is an exact weighted quantile regression on partial residuals built
/// from the freshest estimates of the other blocks. Cycling stops when the total
/// weighted check loss decreases by less than `block_tol` (relative) or after
/// `max_cycles`. Coordinate-wise minimisation of a nonsmooth objective can stall
/// away from the joint minimum, which the final stacked-design descent repairs.
pub fn update_longitudinal_block(
    data: &PanelDataset,
    post: &PosteriorSet,
    params: &ParamSet,
    tau: f64,
    opts: &MStepOptions,
) -> Result<BlockUpdate> {
    let cells = cells(data, post);
    let mut cur = params.clone();
    let before = cells_objective(&cells, &cur, tau);
    let (m, gc) = (post.n_states, post.n_components);

    let mut state_mass = vec![0.0; m];
    let mut comp_mass = vec![0.0; gc];
    for c in &cells {
        state_mass[c.h] += c.weight;
        comp_mass[c.g] += c.weight;
    }
    let mut skipped = Vec::new();
    let mut order = vec![Block::Beta];
    for h in 0..m {
        if state_mass[h] < EMPTY_MASS {
            skipped.push(block_name(Block::Alpha(h)));
        } else {
            order.push(Block::Alpha(h));
        }
    }
    for g in 0..gc {
        if comp_mass[g] < EMPTY_MASS {
            skipped.push(block_name(Block::B(g)));
        } else {
            order.push(Block::B(g));
        }
    }

    let mut obj = before;
    let mut cycles = 0;
    while cycles < opts.max_cycles {
        cycles += 1;
        let start = obj;
        for &block in &order {
            let problem = block_problem(&cells, &cur, block);
            let old = block_value(&mut cur, block).clone();
            if old.is_empty() || problem.is_empty() {
                continue;
            }
            match solve_block(&problem, tau, &old) {
                Ok(new) => {
                    *block_value(&mut cur, block) = new;
                    let next = cells_objective(&cells, &cur, tau);
                    if next > obj {
                        *block_value(&mut cur, block) = old;
                    } else {
                        obj = next;
                    }
                }
                Err(Error::RankDeficientDesign) | Err(Error::AllWeightsZero) => {
                    let name = block_name(block);
                    if !skipped.contains(&name) {
                        warn!("{name} block has a rank-deficient weighted design; kept at previous value");
                        skipped.push(name);
                    }
                }
                Err(e) => return Err(e),
            }
        }
        if start - obj <= opts.block_tol * start.abs().max(1e-300) {
            break;
        }
    }

    if opts.joint_polish {
        if let Some(joint) = joint_descent(&cells, &cur, tau, &state_mass, &comp_mass)? {
            let next = cells_objective(&cells, &joint, tau);
            if next < obj {
                cur = joint;
                obj = next;
            }
        }
    }

    Ok(BlockUpdate {
        beta: cur.beta,
        alpha: cur.alpha,
        b: cur.b,
        objective_before: before,
        objective_after: obj,
        cycles,
        skipped_blocks: skipped,
    })
}

/// Stacked layout: `[beta (p) | alpha_1..alpha_m (d each) | b_1..b_G (r each)]`.
fn stacked_row(c: &Cell, p: usize, d: usize, r: usize, m: usize, gc: usize) -> Vec<f64> {
    let mut row = vec![0.0; p + m * d + gc * r];
    row[..p].copy_from_slice(&c.occ.x);
    let a0 = p + c.h * d;
    row[a0..a0 + d].copy_from_slice(&c.occ.w);
    let b0 = p + m * d + c.g * r;
    row[b0..b0 + r].copy_from_slice(&c.occ.z);
    row
}

fn stack_params(params: &ParamSet) -> Vec<f64> {
    let mut v = params.beta.clone();
    params.alpha.iter().for_each(|a| v.extend(a));
    params.b.iter().for_each(|b| v.extend(b));
    v
}

fn unstack_params(v: &[f64], template: &ParamSet) -> ParamSet {
    let mut out = template.clone();
    let p = out.beta.len();
    out.beta.copy_from_slice(&v[..p]);
    let mut at = p;
    for a in out.alpha.iter_mut() {
        let d = a.len();
        a.copy_from_slice(&v[at..at + d]);
        at += d;
    }
    for b in out.b.iter_mut() {
        let r = b.len();
        b.copy_from_slice(&v[at..at + r]);
        at += r;
    }
    out
}

/// Columns that are not (numerically) spanned by earlier ones in the weighted design.
fn independent_columns(rows: &[Vec<f64>], weights: &[f64], ncol: usize) -> Vec<bool> {
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = vec![false; ncol];
    for (j, k) in keep.iter_mut().enumerate() {
        let mut v: Vec<f64> = rows.iter().zip(&sw).map(|(r, s)| r[j] * s).collect();
        let n0 = dot(&v, &v).sqrt();
        if n0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nv = dot(&v, &v).sqrt();
        if nv > 1e-9 * n0 {
            v.iter_mut().for_each(|a| *a /= nv);
            basis.push(v);
            *k = true;
        }
    }
    keep
}

fn joint_descent(
    cells: &[Cell],
    params: &ParamSet,
    tau: f64,
    state_mass: &[f64],
    comp_mass: &[f64],
) -> Result<Option<ParamSet>> {
    let (p, m, gc) = (params.beta.len(), params.alpha.len(), params.b.len());
    let d = params.alpha.first().map_or(0, |a| a.len());
    let r = params.b.first().map_or(0, |b| b.len());
    let ncol = p + m * d + gc * r;
    if ncol == 0 || cells.is_empty() {
        return Ok(None);
    }
    let rows: Vec<Vec<f64>> = cells.iter().map(|c| stacked_row(c, p, d, r, m, gc)).collect();
    let weights: Vec<f64> = cells.iter().map(|c| c.weight).collect();
    let mut free = independent_columns(&rows, &weights, ncol);
    for h in (0..m).filter(|&h| state_mass[h] < EMPTY_MASS) {
        free[p + h * d..p + (h + 1) * d].iter_mut().for_each(|f| *f = false);
    }
    for g in (0..gc).filter(|&g| comp_mass[g] < EMPTY_MASS) {
        let b0 = p + m * d + g * r;
        free[b0..b0 + r].iter_mut().for_each(|f| *f = false);
    }
    let cols: Vec<usize> = (0..ncol).filter(|&j| free[j]).collect();
    if cols.is_empty() {
        return Ok(None);
    }
    let current = stack_params(params);
    let obs: Vec<WeightedObservation> = rows
        .iter()
        .zip(cells)
        .map(|(row, c)| {
            let offset: f64 = (0..ncol).filter(|&j| !free[j]).map(|j| row[j] * current[j]).sum();
            let design = cols.iter().map(|&j| row[j]).collect();
            WeightedObservation::new(c.occ.y - offset, design, c.weight)
        })
        .collect();
    let seed: Vec<f64> = cols.iter().map(|&j| current[j]).collect();
    match polish_from(&obs, tau, &seed) {
        Ok(sol) => {
            let mut full = current;
            for (k, &j) in cols.iter().enumerate() {
                full[j] = sol[k];
            }
            Ok(Some(unstack_params(&full, params)))
        }
        Err(e @ (Error::NoConvergence(_) | Error::Unbounded | Error::RankDeficientDesign)) => {
            debug!("joint location descent skipped: {e}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorUpdate {
    pub priors: Priors,
    /// Whether the cumulative-logit optimiser met its tolerance (always true for constant mixtures).
    pub converged: bool,
    /// Whether any cumulative-logit coefficient hit the `LAMBDA_BOUND` clamp.
    pub clamped: bool,
}

/// Posterior class mass per observed length: `counts[T - 1][g] = sum_{i: T_i = T} zeta_ig`.
fn class_counts(post: &PosteriorSet) -> Vec<Vec<f64>> {
    let max_t = post.units.iter().map(|u| u.t_len).max().unwrap_or(0);
    let mut counts = vec![vec![0.0; post.n_components]; max_t];
    for u in &post.units {
        for (g, z) in u.zeta.iter().enumerate() {
            counts[u.t_len - 1][g] += z;
        }
    }
    counts
}

/// `sum_T sum_g counts[T][g] log pi_g(T | lambda)`.
pub fn cumulative_logit_objective(counts: &[Vec<f64>], lambda0: &[f64], lambda1: f64) -> f64 {
    let priors = Priors::LatentDropOut {
        lambda0: lambda0.to_vec(),
        lambda1,
    };
    let mut total = 0.0;
    for (k, row) in counts.iter().enumerate() {
        let lp = log_component_priors(&priors, k + 1);
        for (c, l) in row.iter().zip(&lp) {
            if *c > 0.0 {
                total += c * l;
            }
        }
    }
    total
}

pub fn update_mixture_priors(
    post: &PosteriorSet,
    mode: PriorMode,
    current: &Priors,
    opts: &MStepOptions,
) -> Result<PriorUpdate> {
    let gc = post.n_components;
    match mode {
        PriorMode::ConstantMixture => {
            let n = post.units.len() as f64;
            let mut pi = vec![0.0; gc];
            for u in &post.units {
                pi.iter_mut().zip(&u.zeta).for_each(|(p, z)| *p += z);
            }
            pi.iter_mut().for_each(|p| *p /= n);
            let s: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= s);
            Ok(PriorUpdate {
                priors: Priors::Mixture(pi),
                converged: true,
                clamped: false,
            })
        }
        PriorMode::LatentDropOut => {
            let Priors::LatentDropOut { lambda0, lambda1 } = current else {
                return Err(Error::InvalidParams("latent drop-out update needs lambda priors".into()));
            };
            if gc == 1 {
                return Ok(PriorUpdate {
                    priors: current.clone(),
                    converged: true,
                    clamped: false,
                });
            }
            let counts = class_counts(post);
            let fit = fit_cumulative_logit(&counts, lambda0, *lambda1, opts.freeze_slope);
            Ok(fit)
        }
    }
}

struct Reparam {
    k: usize,
    freeze_slope: bool,
}

impl Reparam {
    fn dim(&self) -> usize {
        self.k + usize::from(!self.freeze_slope)
    }

    fn to_lambda(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let mut l0 = Vec::with_capacity(self.k);
        l0.push(theta[0]);
        for j in 1..self.k {
            let prev = l0[j - 1];
            l0.push(prev + theta[j].exp());
        }
        let l1 = if self.freeze_slope { 0.0 } else { theta[self.k] };
        (l0, l1)
    }

    fn from_lambda(&self, l0: &[f64], l1: f64) -> Vec<f64> {
        let mut th = vec![l0[0]];
        for j in 1..self.k {
            th.push((l0[j] - l0[j - 1]).max(1e-8).ln());
        }
        if !self.freeze_slope {
            th.push(l1);
        }
        th
    }

    /// Negative objective and its gradient in `theta`.
    fn eval(&self, counts: &[Vec<f64>], theta: &[f64]) -> (f64, Vec<f64>) {
        let (l0, l1) = self.to_lambda(theta);
        if l0.iter().any(|v| !v.is_finite()) || !l1.is_finite() {
            return (f64::INFINITY, vec![0.0; theta.len()]);
        }
        let k = self.k;
        let mut f = 0.0;
        let mut g0 = vec![0.0; k];
        let mut g1 = 0.0;
        for (ti, row) in counts.iter().enumerate() {
            let tl = (ti + 1) as f64;
            let c: Vec<f64> = l0.iter().map(|v| v + l1 * tl).collect();
            for (g, &w) in row.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                let lo = if g == 0 { f64::NEG_INFINITY } else { c[g - 1] };
                let hi = if g == k { f64::INFINITY } else { c[g] };
                let lp = crate::hmm::log_logistic_interval(lo, hi);
                f -= w * lp;
                // d log pi / d hi = f(hi) / pi, d log pi / d lo = -f(lo) / pi
                if g < k {
                    let dh = if g == 0 {
                        sigmoid(-hi)
                    } else {
                        (log_sigmoid(hi) + log_sigmoid(-hi) - lp).exp()
                    };
                    g0[g] -= w * dh;
                    g1 -= w * dh * tl;
                }
                if g > 0 {
                    let dl = if g == k {
                        sigmoid(lo)
                    } else {
                        (log_sigmoid(lo) + log_sigmoid(-lo) - lp).exp()
                    };
                    g0[g - 1] += w * dl;
                    g1 += w * dl * tl;
                }
            }
        }
        if !f.is_finite() {
            return (f64::INFINITY, vec![0.0; theta.len()]);
        }
        let mut grad = vec![0.0; theta.len()];
        grad[0] = g0.iter().sum();
        for j in 1..k {
            grad[j] = theta[j].exp() * g0[j..].iter().sum::<f64>();
        }
        if !self.freeze_slope {
            grad[k] = g1;
        }
        (f, grad)
    }
}

/// Maximises the cumulative-logit class log-likelihood by BFGS over an
/// order-preserving reparameterisation, warm-started at the incoming coefficients.
pub fn fit_cumulative_logit(counts: &[Vec<f64>], lambda0: &[f64], lambda1: f64, freeze_slope: bool) -> PriorUpdate {
    let rp = Reparam {
        k: lambda0.len(),
        freeze_slope,
    };
    let start_l1 = if freeze_slope { 0.0 } else { lambda1 };
    let incoming = cumulative_logit_objective(counts, lambda0, start_l1);
    let n = rp.dim();
    let total: f64 = counts.iter().flatten().sum();
    let mut theta = rp.from_lambda(lambda0, start_l1);
    let (mut f, mut grad) = rp.eval(counts, &theta);
    let mut hinv = identity(n);
    let mut converged = false;
    for _ in 0..300 {
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax <= 1e-9 * total.max(1.0) {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&hinv[i], &grad)).collect();
        let mut slope = dot(&dir, &grad);
        if !(slope < 0.0) {
            hinv = identity(n);
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&dir, &grad);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (ft, gt) = rp.eval(counts, &trial);
            if ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((next, fn_, gn)) = accepted else {
            // no further decrease available at working precision
            converged = grad.iter().fold(0.0f64, |a, g| a.max(g.abs())) <= 1e-6 * total.max(1.0);
            break;
        };
        let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            bfgs_update(&mut hinv, &s, &y, sy);
        }
        let df = f - fn_;
        theta = next;
        f = fn_;
        grad = gn;
        let (l0, l1) = rp.to_lambda(&theta);
        if l0.iter().chain(std::iter::once(&l1)).any(|v| v.abs() > LAMBDA_BOUND) {
            break;
        }
        if df.abs() <= 1e-15 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
    }
    let (mut l0, mut l1) = rp.to_lambda(&theta);
    let mut clamped = false;
    for v in l0.iter_mut().chain(std::iter::once(&mut l1)) {
        if v.abs() > LAMBDA_BOUND {
            *v = v.clamp(-LAMBDA_BOUND, LAMBDA_BOUND);
            clamped = true;
        }
    }
    if clamped {
        warn!("cumulative-logit coefficients exceeded ±{LAMBDA_BOUND}; clamped (class separation)");
    }
    let fitted = cumulative_logit_objective(counts, &l0, l1);
    if !(fitted >= incoming) && incoming.is_finite() && lambda0.windows(2).all(|w| w[0] <= w[1]) {
        // keep the incoming coefficients rather than step downhill
        return PriorUpdate {
            priors: Priors::LatentDropOut {
                lambda0: lambda0.to_vec(),
                lambda1: start_l1,
            },
            converged,
            clamped: false,
        };
    }
    PriorUpdate {
        priors: Priors::LatentDropOut { lambda0: l0, lambda1: l1 },
        converged,
        clamped,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Closed-form scale update; the flag reports whether the floor was applied.
pub fn update_sigma(data: &PanelDataset, post: &PosteriorSet, params: &ParamSet, tau: f64) -> (f64, bool) {
    let loss = weighted_check_loss(data, post, params, tau);
    let sigma = loss / data.total_obs() as f64;
    if sigma < SIGMA_FLOOR || !sigma.is_finite() {
        (SIGMA_FLOOR, true)
    } else {
        (sigma, false)
    }
}

/// Expected complete-data log-likelihood at `params` under fixed posteriors.
pub fn expected_complete_loglik(data: &PanelDataset, post: &PosteriorSet, params: &ParamSet, tau: f64) -> f64 {
    let xlogy = |w: f64, p: f64| if w > 0.0 { w * p.ln() } else { 0.0 };
    let m = post.n_states;
    let mut total = 0.0;
    for (i, unit) in data.units().iter().enumerate() {
        let u = &post.units[i];
        for h in 0..m {
            total += xlogy(post.single(i, 0, h), params.delta[h]);
        }
        for t in 1..u.t_len {
            for k in 0..m {
                for h in 0..m {
                    total += xlogy(post.pair(i, t, k, h), params.q[k][h]);
                }
            }
        }
        let lp = log_component_priors(&params.priors, u.t_len);
        for (g, z) in u.zeta.iter().enumerate() {
            if *z > 0.0 {
                total += z * lp[g];
            }
        }
        for (t, occ) in unit.occasions.iter().enumerate() {
            for h in 0..m {
                for g in 0..post.n_components {
                    let w = post.joint(i, t, h, g);
                    if w > 0.0 {
                        total += w * ald_logdensity_unchecked(occ.y, params.location(occ, h, g), params.sigma, tau);
                    }
                }
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepReport {
    pub updated: ParamSet,
    pub block_objective_before: f64,
    pub block_objective_after: f64,
    pub lambda_converged: bool,
    pub lambda_clamped: bool,
    pub sigma_floored: bool,
    pub empty_states: Vec<usize>,
    pub skipped_blocks: Vec<String>,
}

/// Full M-step: initial/transition probabilities, locations, priors, then scale.
pub fn mstep(
    data: &PanelDataset,
    post: &PosteriorSet,
    params: &ParamSet,
    spec: &ModelSpec,
    opts: &MStepOptions,
) -> Result<MStepReport> {
    let tr = update_initial_transition(post);
    let blocks = update_longitudinal_block(data, post, params, spec.tau, opts)?;
    let pr = update_mixture_priors(post, spec.prior_mode, &params.priors, opts)?;
    let mut updated = ParamSet {
        beta: blocks.beta,
        alpha: blocks.alpha,
        b: blocks.b,
        delta: tr.delta,
        q: tr.q,
        sigma: params.sigma,
        priors: pr.priors,
    };
    let (sigma, floored) = update_sigma(data, post, &updated, spec.tau);
    updated.sigma = sigma;
    Ok(MStepReport {
        updated,
        block_objective_before: blocks.objective_before,
        block_objective_after: blocks.objective_after,
        lambda_converged: pr.converged,
        lambda_clamped: pr.clamped,
        sigma_floored: floored,
        empty_states: tr.empty_states,
        skipped_blocks: blocks.skipped_blocks,
    })
}
