//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines print in order and nothing is captured.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use chrono::NaiveDate;
use common::{aligned_steps, errors, max_abs, normal, ols_exact, random_day, random_fleet, rel_err, rng, stack_price};
use esmcast_core::backtest::{load_data, run_backtest, write_report, Arm, ModelKind, RunConfig};
use esmcast_core::dispatch::clear_window;
use esmcast_core::evaluate::{gw_test, metrics, DayAheadForecast};
use esmcast_core::linear::{cross_validate_lambda, default_grid, lasso_fit, LassoDesign, LassoOptions};
use esmcast_core::neural::{backprop_grad, Activation, LstmNet, LstmSpec, Network, NetworkSpec, Samples, SeqSamples};
use esmcast_core::panel::{write_panel, HOURS};
use esmcast_core::storage::{backtest_storage, plan_day, StorageSpec};
use esmcast_core::synth::SynthConfig;
use ndarray::Array2;

/// Criteria that cannot be met as written; the reason is printed with the line.
const KNOWN_UNATTAINABLE: [(u32, &str); 1] = [(
    6,
    "the two-level example assumes losses on discharge; with the level equation charging at eta the optimum is 350/9",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "headline numbers via the ingestion path", c1_ingestion),
        (2, "metric micro-suite", c2_metrics),
        (3, "lasso oracles", c3_lasso),
        (4, "gradient checks", c4_gradients),
        (5, "dispatch duals", c5_dispatch),
        (6, "storage", c6_storage),
        (7, "gw calibration", c7_gw),
        (8, "mcp improves larx and lear", c8_directional),
        (9, "determinism", c9_determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let t = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {verdict} [{:.1}s] {}", t.elapsed().as_secs_f64(), o.detail);
        if !o.pass {
            match KNOWN_UNATTAINABLE.iter().find(|k| k.0 == id) {
                Some((_, why)) => println!("    known: {why}"),
                None => unexpected.push(id),
            }
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn c1_ingestion() -> Outcome {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut cfg = RunConfig {
        seed: 5,
        synth: SynthConfig {
            days: 100,
            ..Default::default()
        },
        test_days: 35,
        arms: vec![Arm::Fundamentals, Arm::FundamentalsMcp],
        models: vec![ModelKind::Naive, ModelKind::Esm, ModelKind::Larx],
        ..Default::default()
    };
    cfg.larx.window_days = 56;
    cfg.cadence.linear = 7;
    let synthetic = load_data(&cfg).expect("synthetic panel");
    let path = dir.path().join("panel.csv");
    let mut buf = Vec::new();
    write_panel(&synthetic, &mut buf).expect("write panel");
    fs::write(&path, buf).expect("write file");
    cfg.data.panel = Some(path);
    let loaded = match load_data(&cfg) {
        Ok(p) => p,
        Err(e) => return outcome(false, format!("csv ingestion failed: {e}")),
    };
    if loaded != synthetic {
        return outcome(false, "csv panel differs from the generated one");
    }
    let report = match run_backtest(&cfg, &loaded) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("backtest on csv data failed: {e}")),
    };
    let finite = report
        .metrics
        .iter()
        .all(|(_, _, m)| m.mae.is_finite() && m.rmse.is_finite() && m.smape.is_finite() && m.rmae.is_some());
    let factors = report.storage.iter().all(|s| s.factor.is_some_and(|f| f <= 1.0 + 1e-9));
    outcome(
        finite && factors && report.gw.is_some(),
        format!(
            "published tables need the 2015-2020 German data; csv path yields {} metric rows, {} storage rows and a gw matrix",
            report.metrics.len(),
            report.storage.len()
        ),
    )
}

fn c2_metrics() -> Outcome {
    let tile = |v: [f64; 4]| -> Vec<f64> { v.iter().copied().cycle().take(HOURS).collect() };
    let m = metrics(&tile([2.0, 2.0, 2.0, 4.0]), &tile([1.0, 2.0, 3.0, 4.0]), &tile([0.0; 4])).expect("metrics");
    let rmae = m.rmae.unwrap_or(f64::NAN);
    let errs = [
        (m.mae - 0.5).abs(),
        (m.rmse - 0.5_f64.sqrt()).abs(),
        (m.smape - 80.0 / 3.0).abs(),
        (rmae - 0.2).abs(),
    ];
    let mut r = rng(1);
    let actual: Vec<f64> = (0..HOURS * 10).map(|_| 40.0 + 10.0 * normal(&mut r)).collect();
    let naive: Vec<f64> = (0..HOURS * 10).map(|_| 40.0 + 10.0 * normal(&mut r)).collect();
    let self_rmae = metrics(&naive, &actual, &naive).expect("metrics").rmae;
    let worst = errs.iter().copied().fold(0.0, f64::max);
    outcome(
        worst <= 1e-12 && self_rmae == Some(1.0),
        format!(
            "mae {} rmse {:.15} smape {:.12} rmae {} (max error {worst:.1e}); naive rmae {:?}",
            m.mae, m.rmse, m.smape, rmae, self_rmae
        ),
    )
}

fn c3_lasso() -> Outcome {
    let tight = LassoOptions {
        tol: 1e-13,
        max_iter: 200_000,
        ..Default::default()
    };
    let mut worst_ols: f64 = 0.0;
    let mut zero_ok = true;
    for seed in 0..50u64 {
        let mut r = rng(3000 + seed);
        let p = 2 + seed as usize % 7;
        let x = Array2::from_shape_fn((60, p), |_| normal(&mut r));
        let beta: Vec<f64> = (0..p).map(|_| 2.0 * normal(&mut r)).collect();
        let y: Vec<f64> = (0..60)
            .map(|i| 1.0 + (0..p).map(|j| x[[i, j]] * beta[j]).sum::<f64>() + 0.5 * normal(&mut r))
            .collect();
        let (b0, b) = ols_exact(&x, &y);
        let fit = lasso_fit(x.view(), &y, 0.0, &tight).expect("fit");
        let scale = max_abs(&b).max(b0.abs());
        for j in 0..p {
            worst_ols = worst_ols.max((fit.coef[j] - b[j]).abs() / scale);
        }
        worst_ols = worst_ols.max((fit.intercept - b0).abs() / scale);
        let d = LassoDesign::new(x.view(), true).expect("design");
        let lmax = d.lambda_max(&d.target(&y).expect("target"));
        for l in [lmax, 2.0 * lmax] {
            zero_ok &= lasso_fit(x.view(), &y, l, &LassoOptions::default()).expect("fit").coef.iter().all(|c| *c == 0.0);
        }
    }
    let (mut recovered, mut exact) = (0, 0);
    let sd = (9.0 * 5.0 / 20.0_f64).sqrt();
    for seed in 0..20u64 {
        let mut r = rng(4000 + seed);
        let x = Array2::from_shape_fn((200, 50), |_| normal(&mut r));
        let y: Vec<f64> = (0..200)
            .map(|i| (0..5).map(|j| 3.0 * x[[i, j]]).sum::<f64>() + sd * normal(&mut r))
            .collect();
        let opts = LassoOptions::default();
        let grid = default_grid(x.view(), &y, 20, 1e-4).expect("grid");
        let cv = cross_validate_lambda(x.view(), &y, 5, &grid, &opts).expect("cv");
        let fit = lasso_fit(x.view(), &y, cv.lambda, &opts).expect("fit");
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| fit.coef[b].abs().total_cmp(&fit.coef[a].abs()));
        let mut top = order[..5].to_vec();
        top.sort();
        let all_in = (0..5).all(|j| fit.coef[j] != 0.0);
        recovered += (all_in && top == [0, 1, 2, 3, 4]) as usize;
        exact += (all_in && fit.n_nonzero() == 5) as usize;
    }
    outcome(
        worst_ols < 1e-6 && zero_ok && recovered >= 18,
        format!(
            "normal equations max rel error {worst_ols:.1e}; zero at lambda_max {zero_ok}; support recovered {recovered}/20 (exact support with cv penalty {exact}/20)"
        ),
    )
}

fn c4_gradients() -> Outcome {
    let mut worst_dnn: f64 = 0.0;
    for act in [Activation::Tanh, Activation::Sigmoid, Activation::Linear] {
        let mut spec = NetworkSpec::new(4, &[6, 5], act, 24);
        spec.l1 = 1e-4;
        spec.seed = 9;
        let mut net = Network::new(spec).expect("net");
        let mut r = rng(90);
        let s = Samples {
            x: Array2::from_shape_fn((6, 4), |_| normal(&mut r)),
            y: Array2::from_shape_fn((6, 24), |_| normal(&mut r)),
        };
        let g = backprop_grad(&net, &s).expect("grad").flat();
        let p0 = net.params();
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += 1e-5;
            net.set_params(&p);
            let up = net.loss(&s).expect("loss");
            p[k] -= 2e-5;
            net.set_params(&p);
            let down = net.loss(&s).expect("loss");
            worst_dnn = worst_dnn.max(rel_err((up - down) / 2e-5, g[k]));
        }
    }
    let mut net = LstmNet::new(LstmSpec {
        input: 3,
        hidden: 4,
        seq_len: 5,
        extra: 2,
        outputs: 24,
        l1: 1e-4,
        learning_rate: 1e-3,
        seed: 4,
    })
    .expect("lstm");
    let mut r = rng(91);
    let s = SeqSamples {
        seqs: (0..3).map(|_| Array2::from_shape_fn((5, 3), |_| normal(&mut r))).collect(),
        extra: Array2::from_shape_fn((3, 2), |_| normal(&mut r)),
        y: Array2::from_shape_fn((3, 24), |_| normal(&mut r)),
    };
    let (_, g) = net.gradient(&s, &[0, 1, 2]).expect("grad");
    let p0 = net.params();
    let mut worst_lstm: f64 = 0.0;
    for k in 0..p0.len() {
        let mut p = p0.clone();
        p[k] += 1e-5;
        net.set_params(&p);
        let up = net.loss(&s).expect("loss");
        p[k] -= 2e-5;
        net.set_params(&p);
        let down = net.loss(&s).expect("loss");
        worst_lstm = worst_lstm.max(rel_err((up - down) / 2e-5, g[k]));
    }
    outcome(
        worst_dnn < 1e-4 && worst_lstm < 1e-4,
        format!("dnn max rel error {worst_dnn:.1e}; 5-step lstm {worst_lstm:.1e}"),
    )
}

fn c5_dispatch() -> Outcome {
    let mut r = rng(500);
    let mut mismatches = 0;
    let mut worst_fd: f64 = 0.0;
    let mut fd_checks = 0;
    for _ in 0..100 {
        let (fleet, demand) = random_fleet(&mut r, 24);
        let res = match clear_window(&fleet, &demand, 0..24) {
            Ok(res) => res,
            Err(e) => return outcome(false, format!("clearing failed: {e}")),
        };
        let stack: Vec<(f64, f64)> = fleet.units.iter().map(|u| (u.marginal_cost, u.capacity)).collect();
        for h in 0..24 {
            let oracle = stack_price(&stack, demand[h] - fleet.wind[h], fleet.curtailment_cost, fleet.shedding_cost);
            mismatches += (res.mcp[h] != oracle) as usize;
        }
        let h = 12;
        let net = demand[h] - fleet.wind[h];
        let mut sorted = stack.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut edge = 0.0;
        let mut near = net.abs() < 0.01;
        for (_, cap) in sorted {
            edge += cap;
            near |= (net - edge).abs() < 0.01;
        }
        if near {
            continue;
        }
        let eps = 1e-3;
        let bumped = |d: f64| {
            let mut dem = demand.clone();
            dem[h] += d;
            clear_window(&fleet, &dem, 0..24).map(|x| x.objective)
        };
        let (Ok(up), Ok(down)) = (bumped(eps), bumped(-eps)) else {
            return outcome(false, "perturbed clearing failed");
        };
        worst_fd = worst_fd.max(rel_err((up - down) / (2.0 * eps), res.mcp[h]));
        fd_checks += 1;
    }
    outcome(
        mismatches == 0 && worst_fd < 1e-4,
        format!("{mismatches} of 2400 hourly prices differ from the merit order; shadow price max rel error {worst_fd:.1e} over {fd_checks} checks"),
    )
}

fn c6_storage() -> Outcome {
    let mut r = rng(600);
    let mut worst_gap: f64 = 0.0;
    let days: Vec<[f64; HOURS]> = (0..50).map(|_| random_day(&mut r)).collect();
    for (_, spec) in StorageSpec::archetypes() {
        let steps = aligned_steps(&spec, 100);
        for d in &days {
            let lp = plan_day(d, &spec).expect("plan").objective;
            worst_gap = worst_gap.max((lp - common::storage_dp(d, &spec, steps)).abs() / lp.abs().max(1e-9));
        }
    }
    let start = NaiveDate::from_ymd_opt(2021, 1, 4).expect("date");
    let actual: Vec<(NaiveDate, [f64; HOURS])> =
        days.iter().enumerate().map(|(i, d)| (start + chrono::Days::new(i as u64), *d)).collect();
    let perfect: Vec<DayAheadForecast> =
        actual.iter().map(|(d, p)| DayAheadForecast::new("perfect", *d, *p).expect("forecast")).collect();
    let noisy: Vec<DayAheadForecast> = actual
        .iter()
        .map(|(d, p)| DayAheadForecast::new("noisy", *d, p.map(|v| v + 8.0 * normal(&mut r))).expect("forecast"))
        .collect();
    let rows = backtest_storage(
        &[("perfect".into(), perfect), ("noisy".into(), noisy)],
        &actual,
        &StorageSpec::archetypes(),
    )
    .expect("storage backtest");
    let perfect_one = rows.iter().filter(|r| r.model == "perfect").all(|r| r.factor == Some(1.0));
    let max_factor = rows.iter().filter_map(|r| r.factor).fold(f64::NEG_INFINITY, f64::max);
    let two_level: [f64; HOURS] = std::array::from_fn(|h| if h < 12 { 10.0 } else { 50.0 });
    let worked = plan_day(&two_level, &StorageSpec::new(1.0, 1.0, 0.9).expect("spec")).expect("plan").objective;
    let worked_ok = (worked - 35.0).abs() <= 1e-6;
    outcome(
        worst_gap <= 0.01 && perfect_one && max_factor <= 1.0 + 1e-9 && worked_ok,
        format!(
            "dp gap max {:.4}% over 150 days; perfect factor 1.0: {perfect_one}; max factor {max_factor:.4}; two-level day objective {worked:.6} (expected 35.0)",
            100.0 * worst_gap
        ),
    )
}

fn c7_gw() -> Outcome {
    let mut r = rng(42);
    let mut rejections = 0;
    for _ in 0..1000 {
        let a = errors(&mut r, 200, 1.0);
        let b = errors(&mut r, 200, 1.0);
        rejections += (gw_test(&a, &b).expect("gw").p_value < 0.05) as usize;
    }
    let rate = rejections as f64 / 1000.0;
    let b: Vec<[f64; HOURS]> = errors(&mut r, 200, 1.0).into_iter().map(|d| d.map(f64::abs)).collect();
    let a: Vec<[f64; HOURS]> = b.iter().map(|d| d.map(|e| 0.5 * e)).collect();
    let alt = gw_test(&a, &b).expect("gw");
    outcome(
        (0.025..=0.075).contains(&rate) && alt.p_value < 0.01 && alt.mean_differential < 0.0,
        format!("null rejection rate {:.1}%; scale alternative p {:.1e}", 100.0 * rate, alt.p_value),
    )
}

fn c8_directional() -> Outcome {
    let window = 84;
    let test_days = 90;
    let (mut larx_wins, mut lear_wins, mut ensemble_runs, mut ensemble_ok) = (0, 0, 0, 0);
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = RunConfig {
            seed,
            synth: SynthConfig {
                days: window + 7 + test_days,
                ..Default::default()
            },
            test_days,
            arms: vec![Arm::Fundamentals, Arm::FundamentalsMcp],
            models: vec![ModelKind::Naive, ModelKind::Larx, ModelKind::Lear],
            ..Default::default()
        };
        cfg.larx.window_days = window;
        cfg.lear.window_days = window;
        cfg.ens_lear.windows = vec![window / 2, window * 2 / 3, window * 5 / 6, window];
        cfg.cadence.linear = 7;
        let panel = match load_data(&cfg) {
            Ok(p) => p,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let report = match run_backtest(&cfg, &panel) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed}: {e}")),
        };
        let mae = |m: &str, a: Arm| report.mae(m, Some(a)).unwrap_or(f64::NAN);
        let larx = (mae("larx", Arm::Fundamentals), mae("larx", Arm::FundamentalsMcp));
        let lear = (mae("lear", Arm::Fundamentals), mae("lear", Arm::FundamentalsMcp));
        larx_wins += (larx.1 < larx.0) as usize;
        lear_wins += (lear.1 < lear.0) as usize;
        rows.push(format!(
            "s{seed} larx {:.2}->{:.2} lear {:.2}->{:.2}",
            larx.0, larx.1, lear.0, lear.1
        ));

        cfg.arms = vec![Arm::FundamentalsMcp];
        cfg.models = vec![ModelKind::Naive, ModelKind::EnsLear];
        let report = match run_backtest(&cfg, &panel) {
            Ok(r) => r,
            Err(e) => return outcome(false, format!("seed {seed} ensemble: {e}")),
        };
        ensemble_runs += 1;
        ensemble_ok += (!report.ensembles.is_empty() && report.ensembles.iter().all(|e| e.holds())) as usize;
    }
    outcome(
        larx_wins >= 8 && lear_wins >= 8 && ensemble_ok == ensemble_runs,
        format!(
            "mcp lowers mae for larx in {larx_wins}/10 and lear in {lear_wins}/10 seeds; ensemble property {ensemble_ok}/{ensemble_runs} runs; {}",
            rows.join(", ")
        ),
    )
}

fn c9_determinism() -> Outcome {
    let mut cfg = RunConfig {
        seed: 9,
        synth: SynthConfig {
            days: 90,
            ..Default::default()
        },
        test_days: 14,
        arms: vec![Arm::Fundamentals, Arm::FundamentalsMcp],
        models: ModelKind::ALL.to_vec(),
        ..Default::default()
    };
    cfg.larx.window_days = 42;
    cfg.lear.window_days = 42;
    cfg.ens_lear.windows = vec![21, 28, 35, 42];
    cfg.rf.window_days = 42;
    cfg.rf.params.trees = 10;
    cfg.dnn.window_days = 42;
    cfg.dnn.config.budget = 2;
    cfg.dnn.config.train.epochs = 15;
    cfg.dnn.seeds = vec![1, 2];
    cfg.lstm.window_days = 42;
    cfg.lstm.config.seq_len = 24;
    cfg.lstm.config.train.epochs = 5;
    cfg.cadence.linear = 7;
    let run = |dir: &Path| -> Result<(), String> {
        let panel = load_data(&cfg).map_err(|e| e.to_string())?;
        let report = run_backtest(&cfg, &panel).map_err(|e| e.to_string())?;
        write_report(&report, &cfg, dir).map_err(|e| e.to_string())?;
        Ok(())
    };
    let (a, b) = (tempfile::tempdir().expect("dir"), tempfile::tempdir().expect("dir"));
    if let Err(e) = run(a.path()).and_then(|_| run(b.path())) {
        return outcome(false, e);
    }
    let mut names: Vec<String> = fs::read_dir(a.path())
        .expect("listing")
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| fs::read(a.path().join(n)).ok() != fs::read(b.path().join(n)).ok())
        .collect();
    outcome(
        differing.is_empty() && names.iter().any(|n| n == "forecasts.csv"),
        format!("{} report files compared across two runs of all nine models; differing: {differing:?}", names.len()),
    )
}
