use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn lqhmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqhmm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn kv(path: &Path) -> Vec<(String, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().parse().unwrap()))
        .collect()
}

fn lookup(pairs: &[(String, f64)], key: &str) -> f64 {
    pairs.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key}")).1
}

fn check(r: f64, tau: f64) -> f64 {
    r * (tau - if r < 0.0 { 1.0 } else { 0.0 })
}

fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Exhaustive search over interpolating fits: some optimal linear quantile fit
/// passes through as many observations as it has coefficients.
fn vertex_search(rows: &[([f64; 3], f64)], tau: f64) -> ([f64; 3], f64) {
    let n = rows.len();
    let mut best = ([0.0; 3], f64::INFINITY);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let a = [rows[i].0, rows[j].0, rows[k].0];
                let y = [rows[i].1, rows[j].1, rows[k].1];
                let d = det3(a);
                if d.abs() < 1e-10 {
                    continue;
                }
                let mut coef = [0.0; 3];
                for (c, slot) in coef.iter_mut().enumerate() {
                    let mut m = a;
                    for r in 0..3 {
                        m[r][c] = y[r];
                    }
                    *slot = det3(m) / d;
                }
                let loss: f64 = rows
                    .iter()
                    .map(|(x, y)| check(y - (0..3).map(|c| x[c] * coef[c]).sum::<f64>(), tau))
                    .sum();
                if loss < best.1 {
                    best = (coef, loss);
                }
            }
        }
    }
    best
}

#[test]
fn pooled_fit_matches_exhaustive_vertex_search() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("unit,time,y,a,c,one\n");
    let mut rows = Vec::new();
    for r in 0..10 {
        let (unit, time) = (r / 2 + 1, r % 2 + 1);
        let a = (r as f64 * 1.7).sin() * 3.0;
        let c = (r as f64 * 0.9 + 0.4).cos() * 2.0;
        let y = 1.0 + 2.0 * a - 0.5 * c + (r as f64 * 2.3).sin();
        csv.push_str(&format!("u{unit},{time},{y},{a},{c},1\n"));
        rows.push(([a, c, 1.0], y));
    }
    fs::write(dir.path().join("panel.csv"), csv).unwrap();
    fs::write(
        dir.path().join("fit.cfg"),
        "data = panel.csv\nx = a\nz = c\nw = one\nm = 1\nG = 1\nn_random_starts = 2\n",
    )
    .unwrap();
    for tau in [0.3, 0.5] {
        let out = dir.path().join(format!("out{tau}"));
        let o = lqhmm(&[
            "fit",
            "--config",
            dir.path().join("fit.cfg").to_str().unwrap(),
            "--tau",
            &tau.to_string(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let p = kv(&out.join("params.kv"));
        let (coef, _) = vertex_search(&rows, tau);
        let got = [lookup(&p, "beta.a"), lookup(&p, "b.1.c"), lookup(&p, "alpha.1.one")];
        for c in 0..3 {
            assert!((got[c] - coef[c]).abs() <= 1e-5, "tau {tau}: {got:?} vs {coef:?}");
        }
    }
}

#[test]
fn missing_column_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("d.csv"), "unit,time,y,a,one\n1,1,0.5,1,1\n").unwrap();
    fs::write(dir.path().join("f.cfg"), "data = d.csv\nx = a\nz = speed\nw = one\n").unwrap();
    let o = lqhmm(&["fit", "--config", dir.path().join("f.cfg").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("speed"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("f.cfg"), "scenario = two\nwibble = 3\n").unwrap();
    let o = lqhmm(&["simulate", "--config", dir.path().join("f.cfg").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("wibble"), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(code(&lqhmm(&["--help"])), 0);
    assert_eq!(code(&lqhmm(&["no-such-command"])), 1);
}

fn simulate(dir: &Path, extra: &str, seed: &str) -> std::path::PathBuf {
    let cfg = dir.join("sim.cfg");
    fs::write(&cfg, extra).unwrap();
    let out = dir.join("sim");
    let o = lqhmm(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

/// Appends settings to the fitting configuration written by `simulate`.
fn fit_config(sim: &Path, extra: &str) -> String {
    let path = sim.join("columns.cfg");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str(extra);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn same_seed_gives_identical_outputs() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "n = 40\nT = 4\n", "11");
    let cfg = fit_config(&sim, "n_random_starts = 3\n");
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("fit{k}"));
        let o = lqhmm(&["fit", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        runs.push(out);
    }
    for f in ["params.kv", "loglik_trace.csv", "posteriors.csv", "classification.csv", "fit_summary.kv"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn single_cell_grid_has_one_row() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "n = 30\nT = 4\n", "5");
    let cfg = fit_config(&sim, "m_range = 2\nG_range = 1\nn_random_starts = 2\n");
    let out = dir.path().join("sel");
    let o = lqhmm(&["select", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    let lines: Vec<&str> = grid.lines().collect();
    assert_eq!(lines.len(), 2, "{grid}");
    assert!(lines[1].starts_with("2,1,") && lines[1].ends_with(",true"), "{grid}");
    assert!(out.join("params.kv").exists());
}

fn unit_lengths(data_csv: &Path) -> Vec<usize> {
    let text = fs::read_to_string(data_csv).unwrap();
    let mut lens: Vec<(String, usize)> = Vec::new();
    for line in text.lines().skip(1) {
        let unit = line.split(',').next().unwrap().to_string();
        match lens.last_mut() {
            Some((u, n)) if *u == unit => *n += 1,
            _ => lens.push((unit, 1)),
        }
    }
    lens.into_iter().map(|(_, n)| n).collect()
}

#[test]
fn simulated_dropout_matches_its_law() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "scenario = two\nn = 2000\nT = 5\n", "21");
    let lens = unit_lengths(&sim.join("data.csv"));
    assert_eq!(lens.len(), 2000);
    assert!(lens.iter().all(|&t| (2..=5).contains(&t)));
    // uniform on {2, ..., 5}: a quarter complete the panel; four standard errors of slack
    let completers = lens.iter().filter(|&&t| t == 5).count() as f64 / 2000.0;
    assert!((completers - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / 2000.0).sqrt(), "{completers}");

    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "scenario = one\nn = 50\nT = 6\n", "21");
    assert!(unit_lengths(&sim.join("data.csv")).iter().all(|&t| t == 6));
}

#[test]
fn bootstrap_is_reproducible_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "n = 40\nT = 4\n", "3");
    let cfg = fit_config(&sim, "n_random_starts = 2\nB = 6\n");
    let fit = dir.path().join("fit");
    assert_eq!(code(&lqhmm(&["fit", "--config", &cfg, "--out", fit.to_str().unwrap()])), 0);
    let params = fit.join("params.kv");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("boot{k}"));
        let o = lqhmm(&[
            "bootstrap",
            "--config",
            &cfg,
            "--seed",
            "19",
            "--out",
            out.to_str().unwrap(),
            sim.join("data.csv").to_str().unwrap(),
            params.to_str().unwrap(),
        ]);
        assert!(matches!(code(&o), 0 | 3), "{}", stderr(&o));
        outputs.push(fs::read_to_string(out.join("ci.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(outputs[0].starts_with("parameter,estimate,lower,upper,B_effective\n"));
}

#[test]
fn study_writes_one_row_per_location_parameter() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("study.cfg");
    fs::write(&cfg, "scenario = two\nn = 40\nT = 4\nreplicates = 2\nmodels = ldo\nn_random_starts = 2\n").unwrap();
    let out = dir.path().join("study");
    let o = lqhmm(&["study", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = fs::read_to_string(out.join("study_table.csv")).unwrap();
    // header, beta, two state intercepts, three component slopes
    assert_eq!(table.lines().count(), 7, "{table}");
    let ari = fs::read_to_string(out.join("ari.csv")).unwrap();
    assert_eq!(ari.lines().count(), 1 + 2, "{ari}");
}

#[test]
fn evaluate_scores_perfect_labels_as_one() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(dir.path(), "n = 30\nT = 4\n", "8");
    let truth = fs::read_to_string(sim.join("truth.csv")).unwrap();
    // the truth file already has unit/class/state columns, so it doubles as a fitted labelling
    let out = dir.path().join("ev");
    let o = lqhmm(&[
        "evaluate",
        "--truth",
        sim.join("truth.csv").to_str().unwrap(),
        "--states",
        sim.join("truth.csv").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(truth.starts_with("unit,time,class,state"));
    let ev = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    assert!(ev.contains("ari_state,1\n"), "{ev}");
}
