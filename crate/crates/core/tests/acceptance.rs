//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

mod common;

use std::time::Instant;

use common::{enumerate_loglik, random_instance};
use lqhmm::dataset::PanelDataset;
use lqhmm::em::{deterministic_start, fit, job_seed, multi_start_fit, random_start, StartConfig};
use lqhmm::hmm::{forward, log_component_priors};
use lqhmm::inference::{block_bootstrap, BootstrapOptions};
use lqhmm::metrics::{median, run_study, ReplicateStudy, StudyConfig};
use lqhmm::model::{ModelSpec, PriorMode, Priors};
use lqhmm::quantile::{objective, weighted_qr, weighted_qr_lp_oracle, WeightedObservation};
use lqhmm::simulate::{generate_scenario1, generate_scenario2, DropoutLaw, Scenario, ScenarioConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// 1. Forward log-likelihood equals brute-force enumeration.
fn oracle_likelihood() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let m = 1 + (seed % 2) as usize;
        let g = 1 + ((seed / 2) % 2) as usize;
        let mode = if seed % 3 == 0 { PriorMode::LatentDropOut } else { PriorMode::ConstantMixture };
        let inst = random_instance(10_000 + seed, 5, 4, m, g, mode);
        let tab = forward(&inst.data, &inst.params, &inst.spec).unwrap();
        for i in 0..inst.data.n_units() {
            let e = enumerate_loglik(&inst, i);
            worst = worst.max((tab.per_unit_loglik[i] - e).abs() / e.abs().max(1e-300));
        }
    }
    outcome(worst <= 1e-10, format!("100 instances, max relative error {worst:.2e} (tol 1e-10)"))
}

/// 2. Every EM step is non-decreasing in log-likelihood.
fn em_monotonicity() -> Outcome {
    let mut worst = 0.0f64;
    let mut steps = 0usize;
    for k in 0..100u64 {
        let (data, spec) = if k < 50 {
            let cfg = ScenarioConfig {
                rng_seed: 500 + k,
                ..ScenarioConfig::new(Scenario::One, 50, 5)
            };
            let mode = if k % 2 == 0 { PriorMode::ConstantMixture } else { PriorMode::LatentDropOut };
            (generate_scenario1(&cfg).unwrap().0, ModelSpec::new(0.5, 2, 2, mode).unwrap())
        } else {
            let cfg = ScenarioConfig {
                rng_seed: 500 + k,
                ..ScenarioConfig::new(Scenario::Two, 100, 5)
            };
            let mode = if k % 2 == 0 { PriorMode::LatentDropOut } else { PriorMode::ConstantMixture };
            let tau = [0.25, 0.5, 0.75][(k % 3) as usize];
            (generate_scenario2(&cfg).unwrap().0, ModelSpec::new(tau, 2, 3, mode).unwrap())
        };
        let det = deterministic_start(&data, &spec, 1.0).unwrap();
        let start = random_start(&det, 0.25, &mut ChaCha8Rng::seed_from_u64(k));
        let res = fit(&data, &spec, &start).unwrap();
        for w in res.loglik_trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
            steps += 1;
        }
    }
    outcome(
        worst <= 1e-8,
        format!("100 fits, {steps} steps, largest decrease {worst:.2e} (tol 1e-8)"),
    )
}

/// 3. Reduction identities.
fn reductions() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // (a) single component: both prior modes give the same fit
    let mut worst_a = 0.0f64;
    for seed in 0..5u64 {
        let cfg = ScenarioConfig {
            rng_seed: 70 + seed,
            ..ScenarioConfig::new(Scenario::Two, 80, 5)
        };
        let (data, _) = generate_scenario2(&cfg).unwrap();
        let mix = ModelSpec::new(0.5, 2, 1, PriorMode::ConstantMixture).unwrap();
        let ldo = ModelSpec::new(0.5, 2, 1, PriorMode::LatentDropOut).unwrap();
        let sm = deterministic_start(&data, &mix, 1.0).unwrap();
        let sl = deterministic_start(&data, &ldo, 1.0).unwrap();
        let a = fit(&data, &mix, &sm).unwrap().final_loglik;
        let b = fit(&data, &ldo, &sl).unwrap().final_loglik;
        worst_a = worst_a.max((a - b).abs());
    }
    pass &= worst_a <= 1e-8;
    notes.push(format!("(a) G=1 loglik gap {worst_a:.1e}"));

    // (b) flat slope evaluates like the matched constant mixture
    let mut worst_b = 0.0f64;
    for seed in 0..50u64 {
        let mut inst = random_instance(20_000 + seed, 8, 6, 2, 3, PriorMode::LatentDropOut);
        if let Priors::LatentDropOut { lambda1, .. } = &mut inst.params.priors {
            *lambda1 = 0.0;
        }
        let pi: Vec<f64> = log_component_priors(&inst.params.priors, 1).iter().map(|v| v.exp()).collect();
        let mut mixed = inst.params.clone();
        mixed.priors = Priors::Mixture(pi);
        let spec = ModelSpec::new(inst.spec.tau, 2, 3, PriorMode::ConstantMixture).unwrap();
        let a = forward(&inst.data, &inst.params, &inst.spec).unwrap().loglik();
        let b = forward(&inst.data, &mixed, &spec).unwrap().loglik();
        worst_b = worst_b.max((a - b).abs() / b.abs().max(1.0));
    }
    pass &= worst_b <= 1e-10;
    notes.push(format!("(b) lambda1=0 vs mixture gap {worst_b:.1e}"));

    // (c) m = G = 1 is pooled quantile regression
    let mut worst_c = 0.0f64;
    for seed in 0..10u64 {
        let inst = random_instance(30_000 + seed, 40, 6, 1, 1, PriorMode::ConstantMixture);
        let obs: Vec<WeightedObservation> = inst
            .data
            .units()
            .iter()
            .flat_map(|u| u.occasions.iter())
            .map(|o| WeightedObservation::new(o.y, vec![o.x[0], o.z[0], 1.0], 1.0))
            .collect();
        if obs.len() < 6 {
            continue;
        }
        let oracle = weighted_qr_lp_oracle(&obs, inst.spec.tau).unwrap();
        let spec = ModelSpec::new(inst.spec.tau, 1, 1, PriorMode::ConstantMixture).unwrap();
        let res = multi_start_fit(&inst.data, &spec, &StartConfig::default()).unwrap();
        let got = [res.params.beta[0], res.params.b[0][0], res.params.alpha[0][0]];
        for (a, b) in got.iter().zip(&oracle) {
            worst_c = worst_c.max((a - b).abs());
        }
    }
    pass &= worst_c <= 1e-5;
    notes.push(format!("(c) pooled QR coefficient gap {worst_c:.1e}"));
    outcome(pass, notes.join("; ") + " (tols 1e-8, 1e-10, 1e-5)")
}

/// 4. Production solver matches the LP oracle.
fn weighted_qr_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut interpolating) = (0.0f64, 0);
    for _ in 0..200 {
        let p = rng.random_range(1..=4);
        let n = rng.random_range(p + 2..=40);
        let tau = rng.random_range(0.05..0.95);
        let coef: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let obs: Vec<WeightedObservation> = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..p)
                    .map(|j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) })
                    .collect();
                let y = x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-2.0..2.0);
                let w = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.05..2.0) };
                WeightedObservation::new(y, x, w)
            })
            .collect();
        let lp = weighted_qr_lp_oracle(&obs, tau).unwrap();
        let ours = weighted_qr(&obs, tau, 1e-10).unwrap();
        let (fl, fo) = (objective(&obs, tau, &lp), objective(&obs, tau, &ours));
        // when the weighted rows are interpolated exactly the optimum is rounding
        // noise, so the gap is measured against the scale of the responses
        let scale = 1e-9 * obs.iter().map(|o| o.weight * o.response.abs()).sum::<f64>();
        if fl < scale {
            interpolating += 1;
        }
        worst = worst.max((fo - fl) / fl.abs().max(scale).max(1e-300));
    }
    outcome(
        worst <= 1e-6,
        format!("200 problems ({interpolating} exactly interpolated), worst relative excess {worst:.2e} (tol 1e-6)"),
    )
}

fn desk_study() -> ReplicateStudy {
    let scen = ScenarioConfig {
        rng_seed: 2024,
        ..ScenarioConfig::new(Scenario::Two, 100, 5)
    };
    let mut cfg = StudyConfig::new(scen, 50);
    cfg.taus = vec![0.25, 0.5];
    run_study(&cfg).expect("study")
}

/// 5. Bias and RMSE in the drop-out scenario at the median.
fn table_reproduction(study: &ReplicateStudy) -> Outcome {
    let ldo = PriorMode::LatentDropOut;
    let row = |name: &str, mode| study.row(name, mode, 0.5).expect("summary row");
    let beta = row("beta.x2", ldo);
    let b1 = row("b.1.x1", ldo);
    let a1 = row("alpha.1.one", ldo);
    let a2 = row("alpha.2.one", ldo);
    let pass = beta.bias_adjusted.abs() <= 0.03
        && beta.rmse_adjusted <= 0.08
        && b1.bias_adjusted.abs() <= 0.05
        && a1.rmse_adjusted <= 0.52
        && a2.rmse_adjusted <= 0.70;
    let mix = |name: &str| {
        let r = row(name, PriorMode::ConstantMixture);
        format!("{:+.3} ({:.3})", r.bias_adjusted, r.rmse_adjusted)
    };
    outcome(
        pass,
        format!(
            "B={} LDO beta {:+.3} ({:.3}) [|bias|<=0.03, rmse<=0.08], b1 bias {:+.3} [<=0.05], alpha1 rmse {:.3} [<=0.52], alpha2 rmse {:.3} [<=0.70]; mixture beta {}, b1 {}",
            beta.n_effective,
            beta.bias_adjusted,
            beta.rmse_adjusted,
            b1.bias_adjusted,
            a1.rmse_adjusted,
            a2.rmse_adjusted,
            mix("beta.x2"),
            mix("b.1.x1"),
        ),
    )
}

/// 6. Classification into drop-out classes is at least as reliable under the
/// drop-out model.
fn ari_dominance(study: &ReplicateStudy) -> Outcome {
    let a = study.ari(PriorMode::LatentDropOut, 0.25);
    let b = study.ari(PriorMode::ConstantMixture, 0.25);
    let (ma, mb) = (median(&a).unwrap_or(f64::NAN), median(&b).unwrap_or(f64::NAN));
    let wins = a.iter().zip(&b).filter(|(x, y)| x >= y).count();
    let quart = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| lqhmm::inference::percentile_sorted(&s, p);
        format!("[{:.2}, {:.2}, {:.2}]", q(0.25), q(0.5), q(0.75))
    };
    outcome(
        ma >= mb,
        format!(
            "tau=0.25 median ARI LDO {ma:.3} vs mixture {mb:.3}; quartiles LDO {} mixture {}; LDO >= mixture in {wins}/{} replicates",
            quart(&a),
            quart(&b),
            a.len()
        ),
    )
}

/// 7. Completer fractions under the default drop-out law.
fn dropout_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 100_000;
    let mut parts = Vec::new();
    let mut pass = true;
    for (t, want) in [(5usize, 0.25), (10, 0.11)] {
        let full = (0..n).filter(|_| DropoutLaw::Uniform2ToT.sample(t, &mut rng) == t).count() as f64 / n as f64;
        pass &= (full - want).abs() <= 0.015;
        parts.push(format!("T={t}: {:.2}% (target {:.0}% +/- 1.5pp)", 100.0 * full, 100.0 * want));
    }
    outcome(pass, parts.join(", "))
}

/// 8. Bootstrap interval for the fixed slope covers the generating value.
fn bootstrap_sanity() -> Outcome {
    let cfg = ScenarioConfig {
        rng_seed: 808,
        ..ScenarioConfig::new(Scenario::Two, 100, 5)
    };
    let (data, _): (PanelDataset, _) = generate_scenario2(&cfg).unwrap();
    let spec = ModelSpec::new(0.5, 2, 3, PriorMode::LatentDropOut).unwrap();
    let point = multi_start_fit(
        &data,
        &spec,
        &StartConfig {
            rng_seed: job_seed(8, 2, 3, 0),
            ..StartConfig::default()
        },
    )
    .unwrap();
    let opts = BootstrapOptions::new(100, 0.95, 88);
    let a = block_bootstrap(&data, &spec, &point.params, &opts).unwrap();
    let b = block_bootstrap(&data, &spec, &point.params, &opts).unwrap();
    let (lo, hi) = a.interval("beta.x2").unwrap();
    let covers = lo <= -0.8 && -0.8 <= hi;
    let same = a.ci_lower == b.ci_lower && a.ci_upper == b.ci_upper;
    outcome(
        covers && same,
        format!(
            "beta 95% CI [{lo:.4}, {hi:.4}] (B_effective {}), covers -0.8: {covers}; seeded rerun identical: {same}",
            a.effective()
        ),
    )
}

fn main() {
    let mut all = true;
    let mut report = |k: usize, f: &dyn Fn() -> Outcome| {
        let t0 = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "criterion {k}: {} - {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t0.elapsed().as_secs_f64()
        );
    };
    report(1, &oracle_likelihood);
    report(2, &em_monotonicity);
    report(3, &reductions);
    report(4, &weighted_qr_correctness);
    let t0 = Instant::now();
    let study = desk_study();
    println!("(desk-scale study: {:.1}s, {} failed replicates)", t0.elapsed().as_secs_f64(), study.failed);
    report(5, &|| table_reproduction(&study));
    report(6, &|| ari_dominance(&study));
    report(7, &dropout_calibration);
    report(8, &bootstrap_sanity);
    if !all {
        std::process::exit(1);
    }
}
