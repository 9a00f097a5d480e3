//! Command bodies. Each returns whether the run was complete or partial.

use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use lqhmm::dataset::PanelDataset;
use lqhmm::em::{multi_start_fit, select_model, FitResult};
use lqhmm::inference::{block_bootstrap, classify_components, decode_states, BootstrapOptions};
use lqhmm::kv::{flatten_params, read_params_path, write_params_path, KvDocument};
use lqhmm::metrics::{adjusted_rand, run_study, StudyConfig};
use lqhmm::model::{ModelSpec, ParamSet};
use lqhmm::simulate::{generate, read_truth_csv, Scenario};
use lqhmm::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Complete,
    Partial,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

/// One output directory per quantile when several are requested.
fn tau_dir(cfg: &RunConfig, tau: f64) -> PathBuf {
    if cfg.taus.len() == 1 {
        cfg.out.clone()
    } else {
        cfg.out.join(format!("tau_{tau}"))
    }
}

fn load_data(cfg: &RunConfig) -> Result<PanelDataset> {
    cfg.check_columns()?;
    let path = cfg.require("data", &cfg.data)?;
    PanelDataset::read_csv_path(&path, cfg.columns())
}

fn write_fit_outputs(cfg: &RunConfig, data: &PanelDataset, res: &FitResult, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    write_params_path(&res.params, data.columns(), &dir.join("params.kv"))?;

    let mut w = csv::Writer::from_writer(create(&dir.join("loglik_trace.csv"))?);
    w.write_record(["iteration", "loglik"])?;
    for (k, ll) in res.loglik_trace.iter().enumerate() {
        w.write_record([k.to_string(), ll.to_string()])?;
    }
    w.flush()?;

    let post = &res.posterior;
    let (m, g) = (post.n_states, post.n_components);
    let states = decode_states(data, &res.params, &res.spec, cfg.decode)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("posteriors.csv"))?);
    let mut header = vec!["unit".to_string(), "time".into()];
    header.extend((1..=m).map(|h| format!("state_{h}")));
    header.push("state".into());
    w.write_record(&header)?;
    for (i, u) in data.units().iter().enumerate() {
        for t in 0..u.len() {
            let mut row = vec![u.label.clone(), (t + 1).to_string()];
            row.extend((0..m).map(|h| post.single(i, t, h).to_string()));
            row.push((states[i][t] + 1).to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;

    let classes = classify_components(post);
    let mut w = csv::Writer::from_writer(create(&dir.join("classification.csv"))?);
    let mut header = vec!["unit".to_string(), "T".into(), "class".into()];
    header.extend((1..=g).map(|k| format!("zeta_{k}")));
    w.write_record(&header)?;
    for (i, u) in data.units().iter().enumerate() {
        let mut row = vec![u.label.clone(), u.len().to_string(), (classes[i] + 1).to_string()];
        row.extend((0..g).map(|k| post.zeta(i, k).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;

    let d = &res.diagnostics;
    let mut s = KvDocument::default();
    s.insert("tau", res.spec.tau);
    s.insert("m", res.spec.n_states);
    s.insert("G", res.spec.n_components);
    s.insert("mode", res.spec.prior_mode.as_str());
    s.insert("loglik", res.final_loglik);
    s.insert("n_params", res.n_params);
    s.insert("bic", res.bic);
    s.insert("bic_units", res.bic_n);
    s.insert("converged", res.converged);
    s.insert("iterations", res.n_iter);
    s.insert("degenerate", res.degenerate);
    s.insert("best_start", d.best_start + 1);
    s.insert("failed_starts", d.failed_starts);
    s.insert("lambda_clamped", d.lambda_clamped);
    s.insert("empty_state_events", d.empty_state_events);
    s.insert("skipped_block_events", d.skipped_block_events);
    fs::write(dir.join("fit_summary.kv"), s.render())?;
    Ok(())
}

pub fn fit(cfg: &RunConfig) -> Result<Status> {
    let data = load_data(cfg)?;
    let specs: Vec<ModelSpec> = cfg.taus.iter().map(|&t| cfg.spec(t)).collect::<Result<_>>()?;
    let mut status = Status::Complete;
    for spec in &specs {
        let res = multi_start_fit(&data, spec, &cfg.starts)?;
        if !res.converged || res.degenerate {
            warn!("tau = {}: converged = {}, degenerate = {}", spec.tau, res.converged, res.degenerate);
        }
        if res.diagnostics.failed_starts > 0 {
            status = Status::Partial;
        }
        info!("tau = {}: loglik {:.6}, BIC {:.4}", spec.tau, res.final_loglik, res.bic);
        write_fit_outputs(cfg, &data, &res, &tau_dir(cfg, spec.tau))?;
    }
    Ok(status)
}

pub fn select(cfg: &RunConfig) -> Result<Status> {
    let data = load_data(cfg)?;
    let mut status = Status::Complete;
    for &tau in &cfg.taus {
        let sel = select_model(&data, &cfg.m_range, &cfg.g_range, tau, cfg.mode, &cfg.starts)?;
        let dir = tau_dir(cfg, tau);
        ensure_dir(&dir)?;
        let mut w = csv::Writer::from_writer(create(&dir.join("grid.csv"))?);
        w.write_record(["m", "G", "loglik", "n_params", "bic", "bic_units", "converged", "status", "chosen"])?;
        for (k, c) in sel.cells.iter().enumerate() {
            let chosen = (sel.chosen == Some(k)).to_string();
            let (m, g) = (c.n_states.to_string(), c.n_components.to_string());
            match &c.fit {
                Ok(f) => w.write_record([
                    m,
                    g,
                    f.final_loglik.to_string(),
                    f.n_params.to_string(),
                    f.bic.to_string(),
                    f.bic_n.to_string(),
                    f.converged.to_string(),
                    "ok".into(),
                    chosen,
                ])?,
                Err(e) => w.write_record([m, g, "".into(), "".into(), "".into(), "".into(), "false".into(), format!("failed: {e}"), chosen])?,
            }
        }
        w.flush()?;
        if sel.failed_cells() > 0 {
            status = Status::Partial;
        }
        let Some(best) = sel.chosen_fit() else {
            return Err(Error::AllStartsFailed(cfg.starts.n_random_starts));
        };
        info!("tau = {tau}: chose m = {}, G = {}", best.spec.n_states, best.spec.n_components);
        write_fit_outputs(cfg, &data, best, &dir)?;
    }
    Ok(status)
}

fn spec_for_params(params: &ParamSet, tau: f64, cfg: &RunConfig) -> Result<ModelSpec> {
    Ok(ModelSpec::new(tau, params.n_states(), params.n_components(), params.priors.mode())?
        .with_eps(cfg.eps)
        .with_max_iter(cfg.max_iter))
}

pub fn bootstrap(cfg: &RunConfig) -> Result<Status> {
    let data = load_data(cfg)?;
    let params_path = cfg.require("params", &cfg.params)?;
    let point = read_params_path(&params_path, data.columns())?;
    let [tau] = cfg.taus[..] else {
        return Err(Error::InvalidSpec("bootstrap takes exactly one quantile".into()));
    };
    let spec = spec_for_params(&point, tau, cfg)?;
    let mut opts = BootstrapOptions::new(cfg.replicates_boot, cfg.level, cfg.seed());
    if cfg.bootstrap_multistart {
        opts.multi_start = Some(cfg.starts.clone());
    }
    let res = block_bootstrap(&data, &spec, &point, &opts)?;
    ensure_dir(&cfg.out)?;
    res.write_csv(create(&cfg.out.join("ci.csv"))?)?;
    info!("bootstrap: {} of {} replicates usable", res.effective(), res.replicates);
    Ok(if res.failed + res.ambiguous > 0 { Status::Partial } else { Status::Complete })
}

pub fn simulate(cfg: &RunConfig) -> Result<Status> {
    let (data, truth) = generate(&cfg.scenario)?;
    ensure_dir(&cfg.out)?;
    data.write_csv_path(&cfg.out.join("data.csv"))?;
    truth.write_csv_path(&cfg.out.join("truth.csv"))?;
    write_params_path(&truth.params, data.columns(), &cfg.out.join("truth_params.kv"))?;
    let cols = data.columns();
    let mut doc = KvDocument::default();
    doc.insert("data", "data.csv");
    doc.insert("x", cols.x.join(","));
    doc.insert("z", cols.z.join(","));
    doc.insert("w", cols.w.join(","));
    doc.insert("m", truth.params.n_states());
    doc.insert("G", truth.params.n_components());
    doc.insert("mode", truth.params.priors.mode().as_str());
    fs::write(cfg.out.join("columns.cfg"), doc.render())?;
    Ok(Status::Complete)
}

pub fn study(cfg: &RunConfig) -> Result<Status> {
    let mut sc = StudyConfig::new(cfg.scenario.clone(), cfg.study_replicates);
    sc.taus = cfg.taus.clone();
    sc.n_states = cfg.n_states;
    sc.n_components = cfg.n_components.unwrap_or(match cfg.scenario.scenario {
        Scenario::Two => 3,
        Scenario::One => 2,
    });
    sc.modes = cfg.models.clone();
    sc.starts = cfg.starts.clone();
    let st = run_study(&sc)?;
    ensure_dir(&cfg.out)?;
    st.write_summary_csv(create(&cfg.out.join("study_summary.csv"))?)?;
    st.write_table_csv(create(&cfg.out.join("study_table.csv"))?)?;
    st.write_ari_csv(create(&cfg.out.join("ari.csv"))?)?;
    Ok(if st.failed > 0 { Status::Partial } else { Status::Complete })
}

/// Reads `(unit, label)` pairs from a CSV column (labels are 1-based there).
fn read_labels(path: &Path, column: &str) -> Result<Vec<(String, usize)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let (ui, li) = (find("unit")?, find(column)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let v: usize = rec[li]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad {column} label `{}`", &rec[li])))?;
        out.push((rec[ui].to_string(), v));
    }
    Ok(out)
}

pub fn evaluate(cfg: &RunConfig) -> Result<Status> {
    let truth_path = cfg.require("truth", &cfg.truth)?;
    let truth = read_truth_csv(fs::File::open(&truth_path)?)?;
    let mut metrics: Vec<(String, f64)> = Vec::new();

    if cfg.classification.is_some() {
        let path = cfg.require("classification", &cfg.classification)?;
        let fitted: HashMap<String, usize> = read_labels(&path, "class")?.into_iter().collect();
        let mut a = Vec::new();
        for label in &truth.unit_labels {
            let f = fitted
                .get(label)
                .ok_or_else(|| Error::Parse(format!("unit `{label}` missing from classification")))?;
            a.push(*f);
        }
        metrics.push(("ari_class".into(), adjusted_rand(&a, &truth.classes)?));
    }
    if cfg.states.is_some() {
        let path = cfg.require("states", &cfg.states)?;
        let rows = read_labels(&path, "state")?;
        let mut by_unit: HashMap<String, Vec<usize>> = HashMap::new();
        for (u, s) in rows {
            by_unit.entry(u).or_default().push(s);
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (label, path) in truth.unit_labels.iter().zip(&truth.states) {
            let f = by_unit
                .get(label)
                .filter(|v| v.len() == path.len())
                .ok_or_else(|| Error::Parse(format!("unit `{label}` has mismatched decoded states")))?;
            a.extend(f.iter().copied());
            b.extend(path.iter().copied());
        }
        metrics.push(("ari_state".into(), adjusted_rand(&a, &b)?));
    }
    if cfg.params.is_some() && cfg.truth_params.is_some() {
        cfg.check_columns()?;
        let cols = cfg.columns();
        let est = read_params_path(&cfg.require("params", &cfg.params)?, &cols)?;
        let tru = read_params_path(&cfg.require("truth_params", &cfg.truth_params)?, &cols)?;
        let tv: HashMap<String, f64> = flatten_params(&tru, &cols).into_iter().collect();
        for (k, v) in flatten_params(&est, &cols) {
            if let Some(t) = tv.get(&k) {
                metrics.push((format!("error.{k}"), v - t));
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::InvalidSpec(
            "evaluate needs a classification, states, or params/truth_params pair".into(),
        ));
    }
    ensure_dir(&cfg.out)?;
    let mut w = csv::Writer::from_writer(create(&cfg.out.join("evaluation.csv"))?);
    w.write_record(["metric", "value"])?;
    for (k, v) in &metrics {
        w.write_record([k.clone(), v.to_string()])?;
        println!("{k} = {v}");
    }
    w.flush()?;
    Ok(Status::Complete)
}
