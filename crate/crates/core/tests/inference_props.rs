mod common;

use common::random_instance;
use lqhmm::dataset::{ColumnMap, PanelDataset, RawRecord};
use lqhmm::em::{deterministic_start, fit, multi_start_fit, StartConfig};
use lqhmm::hmm::estep;
use lqhmm::inference::{block_bootstrap, classify_components, decode_states, path_log_prob, BootstrapOptions, DecodeMode};
use lqhmm::model::{ModelSpec, PriorMode};
use lqhmm::simulate::{generate_scenario2, DebugOverrides, Scenario, ScenarioConfig};
use proptest::prelude::*;

fn identical_units(n: usize) -> PanelDataset {
    let ys = [1.0, 2.5, 0.3, 4.0];
    let mut recs = Vec::new();
    for i in 0..n {
        for (t, y) in ys.iter().enumerate() {
            recs.push(RawRecord {
                unit: format!("u{i}"),
                time: t as i64 + 1,
                y: *y,
                x: vec![t as f64],
                z: vec![1.0 + (t % 2) as f64],
                w: vec![1.0],
            });
        }
    }
    PanelDataset::from_records(ColumnMap::new(&["x"], &["z"], &["one"]), recs).unwrap()
}

#[test]
fn identical_units_give_zero_width_intervals() {
    let data = identical_units(6);
    let spec = ModelSpec::new(0.5, 1, 1, PriorMode::ConstantMixture).unwrap();
    let point = fit(&data, &spec, &deterministic_start(&data, &spec, 1.0).unwrap()).unwrap();
    let boot = block_bootstrap(&data, &spec, &point.params, &BootstrapOptions::new(2, 0.95, 4)).unwrap();
    assert_eq!(boot.replicate_params[0], boot.replicate_params[1]);
    for k in 0..boot.names.len() {
        assert_eq!(boot.ci_lower[k], boot.ci_upper[k], "{}", boot.names[k]);
    }
}

#[test]
fn bootstrap_is_reproducible_and_brackets_replicates() {
    let cfg = ScenarioConfig {
        rng_seed: 31,
        ..ScenarioConfig::new(Scenario::Two, 60, 5)
    };
    let (data, _) = generate_scenario2(&cfg).unwrap();
    let spec = ModelSpec::new(0.5, 2, 3, PriorMode::LatentDropOut).unwrap();
    let point = multi_start_fit(&data, &spec, &StartConfig { n_random_starts: 4, ..StartConfig::default() }).unwrap();
    let opts = BootstrapOptions::new(20, 0.9, 8);
    let a = block_bootstrap(&data, &spec, &point.params, &opts).unwrap();
    let b = block_bootstrap(&data, &spec, &point.params, &opts).unwrap();
    assert_eq!(a.ci_lower, b.ci_lower);
    assert_eq!(a.ci_upper, b.ci_upper);
    let bn = a.effective() as f64;
    for k in 0..a.names.len() {
        assert!(a.ci_lower[k] <= a.ci_upper[k]);
        let vals: Vec<f64> = a
            .replicate_params
            .iter()
            .map(|p| lqhmm::kv::flatten_params(p, data.columns())[k].1)
            .collect();
        let inside = vals.iter().filter(|v| **v >= a.ci_lower[k] && **v <= a.ci_upper[k]).count() as f64;
        assert!(inside / bn >= 0.9 - 2.0 / bn, "{}: {inside}/{bn}", a.names[k]);
    }
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert!(String::from_utf8(csv).unwrap().starts_with("parameter,estimate,lower,upper,B_effective\n"));
}

#[test]
fn single_state_decodes_to_first_state() {
    let inst = random_instance(4, 6, 5, 1, 2, PriorMode::ConstantMixture);
    for mode in [DecodeMode::Local, DecodeMode::Viterbi] {
        let s = decode_states(&inst.data, &inst.params, &inst.spec, mode).unwrap();
        assert!(s.iter().flatten().all(|&h| h == 0));
    }
}

#[test]
fn well_separated_states_are_recovered() {
    let mut cfg = ScenarioConfig {
        rng_seed: 5,
        ..ScenarioConfig::new(Scenario::Two, 200, 5)
    };
    cfg.overrides = DebugOverrides {
        error_scale: 0.05,
        ..DebugOverrides::default()
    };
    let (data, truth) = generate_scenario2(&cfg).unwrap();
    let spec = ModelSpec::new(0.5, 2, 3, PriorMode::LatentDropOut).unwrap();
    let mut params = cfg.truth_params();
    params.sigma = 0.05;
    for mode in [DecodeMode::Local, DecodeMode::Viterbi] {
        let dec = decode_states(&data, &params, &spec, mode).unwrap();
        let total = truth.states.iter().map(Vec::len).sum::<usize>() as f64;
        let hits = dec
            .iter()
            .flatten()
            .zip(truth.states.iter().flatten())
            .filter(|(a, b)| a == b)
            .count() as f64;
        assert!(hits / total >= 0.99, "{mode:?}: {}", hits / total);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn viterbi_path_dominates_local_path(seed in any::<u64>(), m in 1usize..=3, g in 1usize..=2) {
        let inst = random_instance(seed, 6, 6, m, g, PriorMode::ConstantMixture);
        let post = estep(&inst.data, &inst.params, &inst.spec).unwrap();
        let classes = classify_components(&post);
        let vit = decode_states(&inst.data, &inst.params, &inst.spec, DecodeMode::Viterbi).unwrap();
        let loc = decode_states(&inst.data, &inst.params, &inst.spec, DecodeMode::Local).unwrap();
        for i in 0..inst.data.n_units() {
            let a = path_log_prob(&inst.data, &inst.params, &inst.spec, i, classes[i], &vit[i]).unwrap();
            let b = path_log_prob(&inst.data, &inst.params, &inst.spec, i, classes[i], &loc[i]).unwrap();
            prop_assert!(a >= b - 1e-9, "{a} < {b}");
        }
    }

    #[test]
    fn classification_ignores_row_scaling(seed in any::<u64>(), scale in 1e-3f64..1e3, g in 1usize..=4) {
        let inst = random_instance(seed, 8, 4, 2, g, PriorMode::ConstantMixture);
        let post = estep(&inst.data, &inst.params, &inst.spec).unwrap();
        let mut scaled = post.clone();
        for u in &mut scaled.units {
            u.zeta.iter_mut().for_each(|z| *z *= scale);
        }
        prop_assert_eq!(classify_components(&post), classify_components(&scaled));
    }
}
