#![allow(dead_code)]

use lqhmm::dataset::{ColumnMap, PanelDataset, RawRecord};
use lqhmm::model::{ModelSpec, ParamSet, PriorMode, Priors};
use lqhmm::quantile::check_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub data: PanelDataset,
    pub params: ParamSet,
    pub spec: ModelSpec,
}

fn prob_vector(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| 0.1 + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Small random instance: `n <= max_n` units with ragged lengths `<= max_t`.
pub fn random_instance(seed: u64, max_n: usize, max_t: usize, m: usize, g: usize, mode: PriorMode) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_n);
    let mut recs = Vec::new();
    for i in 0..n {
        let tl = rng.random_range(1..=max_t);
        for t in 1..=tl {
            let x: f64 = rng.random_range(-2.0..2.0);
            let z: f64 = rng.random_range(-1.0..3.0);
            recs.push(RawRecord {
                unit: format!("u{i}"),
                time: t as i64,
                y: rng.random_range(-3.0..4.0),
                x: vec![x],
                z: vec![z],
                w: vec![1.0],
            });
        }
    }
    let data = PanelDataset::from_records(ColumnMap::new(&["x"], &["z"], &["one"]), recs).unwrap();
    let priors = match mode {
        PriorMode::ConstantMixture => Priors::Mixture(prob_vector(&mut rng, g)),
        PriorMode::LatentDropOut => {
            let mut l0: Vec<f64> = (0..g - 1).map(|_| rng.random_range(-2.0..2.0)).collect();
            l0.sort_by(f64::total_cmp);
            Priors::LatentDropOut {
                lambda0: l0,
                lambda1: rng.random_range(-0.8..0.8),
            }
        }
    };
    let params = ParamSet {
        beta: vec![rng.random_range(-1.0..1.0)],
        alpha: (0..m).map(|_| vec![rng.random_range(-2.0..2.0)]).collect(),
        b: (0..g).map(|_| vec![rng.random_range(-1.0..1.0)]).collect(),
        delta: prob_vector(&mut rng, m),
        q: (0..m).map(|_| prob_vector(&mut rng, m)).collect(),
        sigma: rng.random_range(0.3..2.0),
        priors,
    };
    let tau = rng.random_range(0.1..0.9);
    let spec = ModelSpec::new(tau, m, g, mode).unwrap();
    Instance { data, params, spec }
}

/// Independent prior evaluation straight from the logistic cdf.
pub fn oracle_prior(priors: &Priors, t_len: usize) -> Vec<f64> {
    match priors {
        Priors::Mixture(pi) => pi.clone(),
        Priors::LatentDropOut { lambda0, lambda1 } => {
            let f = |x: f64| 1.0 / (1.0 + (-x).exp());
            let mut cum: Vec<f64> = lambda0.iter().map(|l| f(l + lambda1 * t_len as f64)).collect();
            cum.insert(0, 0.0);
            cum.push(1.0);
            cum.windows(2).map(|w| w[1] - w[0]).collect()
        }
    }
}

fn density(y: f64, mu: f64, sigma: f64, tau: f64) -> f64 {
    tau * (1.0 - tau) / sigma * (-check_loss((y - mu) / sigma, tau)).exp()
}

/// Every (component, state path) with its joint probability for one unit.
pub fn enumerate_paths(inst: &Instance, i: usize) -> Vec<(usize, Vec<usize>, f64)> {
    let par = &inst.params;
    let m = par.delta.len();
    let gc = par.b.len();
    let occ = &inst.data.unit(i).occasions;
    let tl = occ.len();
    let prior = oracle_prior(&par.priors, tl);
    let mut out = Vec::new();
    for g in 0..gc {
        for code in 0..m.pow(tl as u32) {
            let mut path = Vec::with_capacity(tl);
            let mut c = code;
            for _ in 0..tl {
                path.push(c % m);
                c /= m;
            }
            let mut p = prior[g] * par.delta[path[0]];
            for t in 0..tl {
                if t > 0 {
                    p *= par.q[path[t - 1]][path[t]];
                }
                let o = &occ[t];
                let mu = o.x[0] * par.beta[0] + o.z[0] * par.b[g][0] + o.w[0] * par.alpha[path[t]][0];
                p *= density(o.y, mu, par.sigma, inst.spec.tau);
            }
            out.push((g, path, p));
        }
    }
    out
}

pub fn enumerate_loglik(inst: &Instance, i: usize) -> f64 {
    enumerate_paths(inst, i).iter().map(|e| e.2).sum::<f64>().ln()
}
