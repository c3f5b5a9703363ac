//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits 0;
//! a FAIL is a measured outcome, not a crash.
//!
//! `cargo test --test acceptance -- 3 5` runs only the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unbalance_lab::eval;
use unbalance_lab::losses::{self, LossSpec};
use unbalance_lab::net::LayerSpec;
use unbalance_lab::sweep::{
    self, Cell, CellResult, DataSource, MethodGrid, Problem, ResultMatrix, SweepOptions, SweepPlan, SynthTemplate,
};
use unbalance_lab::synthdata::{self, SynthConfig};
use unbalance_lab::train::{self, LfoConfig, TrainConfig};
use unbalance_lab::Mode;

const SEED: u64 = 20_200_607;
const RUNS: usize = 5;
const N_TRAIN: usize = 20_000;
/// FBI ξ over the published range [0, 5].
const XI_GRID: [f64; 9] = [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0];

struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, ok: bool, what: &str, detail: String, elapsed: Duration) {
        if ok {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
        println!(
            "{} criterion {id:>2}: {what} | {detail} | {:.1}s",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
}

fn gradient_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut bump = |name: &'static str, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    for point in 0..100u64 {
        let y = rng.random_range(0..2u8);
        let d = rng.random_range(0..2u8);
        let p = rng.random_range(0.01..0.99);
        let mut specs = common::per_example_specs(&mut rng);
        for spec in &specs {
            bump(spec.name(), common::loss_fd_error(spec, y, d, p));
        }
        let peo = loop {
            if let Some(err) = common::peo_fd_error(&mut rng) {
                break err;
            }
        };
        bump("peo", peo);
        specs.push(LossSpec::Peo {
            lambda: rng.random_range(0.0..2.0),
            epsilon: 0.0,
        });
        for spec in &specs {
            bump(spec.name(), common::network_fd_error(spec, SEED ^ point));
        }
        bump("brnn_trunk", common::brnn_fd_error(SEED + point, rng.random_range(0.0..2.0)));
    }
    let ok = worst
        .iter()
        .all(|(&name, &e)| e < if name == "brnn_trunk" { 1e-3 } else { 1e-4 });
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    (ok, format!("max rel err {detail} (tol 1e-4, brnn 1e-3)"))
}

fn reductions() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut bad = BTreeMap::<&str, usize>::new();
    let mut check = |name: &'static str, ok: bool| {
        *bad.entry(name).or_insert(0) += usize::from(!ok);
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON * a.abs().max(b.abs());
    for _ in 0..1000 {
        let y = rng.random_range(0..2u8);
        let p = rng.random_range(1e-6..1.0 - 1e-6);
        let k = rng.random_range(1.0..1000.0);
        let xi = rng.random_range(0.0..5.0);
        let c = rng.random_range(0.001..0.999);
        let h = losses::h_star(y, p);
        check("fbi(d=0)", losses::fbi_loss(y, 0, p, k, xi) == h);
        check("fbi(xi=0)", losses::fbi_loss(y, 1, p, k, 0.0) == h);
        check("focal(K=1,a=0)", losses::focal_loss(y, p, 1.0, 0.0) == h);
        check("cc(C=1)", losses::cc_loss(y, p, 1.0) == h);
        let half = losses::weighted_ce(y, p, 0.5);
        check(
            "wce(0.5)",
            close(half.loss, 0.5 * h.loss) && close(half.dloss_dp, 0.5 * h.dloss_dp),
        );
        let w = losses::weighted_ce(y, p, c);
        let cc = losses::cc_loss(y, p, (1.0 - c) / c);
        check("wce=c*cc", close(w.loss, c * cc.loss) && close(w.dloss_dp, c * cc.dloss_dp));
    }
    let ok = bad.values().all(|&n| n == 0);
    let detail = bad
        .iter()
        .map(|(n, v)| format!("{n}:{v}"))
        .collect::<Vec<_>>()
        .join(" ");
    (ok, format!("violations of 1000 {detail} (tol 4 ulp)"))
}

fn baseline_shift_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let pi_hat = rng.random_range(0.001..0.999);
        match losses::baseline_shift(0.5, 0.5, pi_hat) {
            Ok(c) => worst = worst.max((c - pi_hat).abs()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    (worst <= 1e-12, format!("max |c_hat - pi_hat| = {worst:.1e} (tol 1e-12)"))
}

fn brute_force_auc(y: &[u8], p: &[f64]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for i in 0..y.len() {
        if y[i] == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    for i in (0..y.len()).filter(|&i| y[i] == 1) {
        for j in (0..y.len()).filter(|&j| y[j] == 0) {
            twice += if p[i] > p[j] {
                2
            } else if p[i] == p[j] {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

fn auc_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=1000usize);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        // coarse levels force ties on most datasets
        let levels = rng.random_range(2..50u32);
        let p: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
            .collect();
        ties += usize::from(levels < n as u32);
        let fast = eval::auc_group(&y, Array1::from(p.clone()).view()).unwrap();
        if fast != brute_force_auc(&y, &p) {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("{mismatches} mismatches of 100 datasets ({ties} with ties, exact equality)"),
    )
}

fn plan(problem: Problem, theta: f64, unbalance: f64, methods: Vec<MethodGrid>) -> SweepPlan {
    SweepPlan {
        source: DataSource::Synthetic(SynthTemplate {
            n_train: N_TRAIN,
            ..SynthTemplate::default()
        }),
        unbalance_grid: vec![unbalance],
        complexity_grid: vec![theta],
        methods,
        runs_per_cell: RUNS,
        epochs: None,
        ..SweepPlan::desk(problem)
    }
}

fn run(plan: &SweepPlan, dir: &Path) -> ResultMatrix {
    let options = SweepOptions::default();
    sweep::run_sweep(plan, dir, &options).expect("sweep").matrix
}

fn only_cell<'a>(m: &'a ResultMatrix, method: &str, plan: &SweepPlan) -> &'a CellResult {
    let cell = Cell {
        theta_y: Some(plan.complexity_grid[0]),
        unbalance: plan.unbalance_grid[0],
    };
    m.get(method, cell).expect("cell result")
}

fn balanced_sanity(dir: &Path) -> (bool, String) {
    let plan = plan(Problem::CI, 2.0, 0.5, vec![MethodGrid::HStar]);
    let m = run(&plan, dir);
    let r = only_cell(&m, "h_star", &plan);
    let (u, o) = (r.underg.mean, r.overg.mean);
    let ok = (u - o).abs() <= 0.05 && u >= 0.9 && o >= 0.9;
    (
        ok,
        format!("UnderG {u:.3} OverG {o:.3} |gap| {:.3} (need gap <= 0.05, both >= 0.9)", (u - o).abs()),
    )
}

fn divergence(dir: &Path) -> (bool, String) {
    let plan = plan(
        Problem::CI,
        0.5,
        0.95,
        vec![MethodGrid::HStar, MethodGrid::Fbi { xi: XI_GRID.to_vec() }],
    );
    let m = run(&plan, dir);
    let h = only_cell(&m, "h_star", &plan);
    let f = only_cell(&m, "fbi", &plan);
    let h_min = h.underg.mean.min(h.overg.mean);
    let f_min = f.underg.mean.min(f.overg.mean);
    let ok = h.underg.mean <= 0.5 && h.overg.mean >= 0.9 && f_min >= h_min + 0.15;
    (
        ok,
        format!(
            "h_star U {:.3} O {:.3}; fbi ({}) U {:.3} O {:.3}; min gain {:+.3} (need U <= 0.5, O >= 0.9, gain >= 0.15)",
            h.underg.mean,
            h.overg.mean,
            f.chosen,
            f.underg.mean,
            f.overg.mean,
            f_min - h_min
        ),
    )
}

fn impossible_task(dir: &Path) -> (bool, String) {
    let plan = plan(
        Problem::CB,
        0.0,
        0.9,
        vec![MethodGrid::HStar, MethodGrid::Fbi { xi: XI_GRID.to_vec() }],
    );
    let m = run(&plan, dir);
    let h = only_cell(&m, "h_star", &plan);
    let f = only_cell(&m, "fbi", &plan);
    let near_half = |v: f64| (v - 0.5).abs() <= 0.1;
    let gap = h.overg.mean - h.underg.mean;
    let ok = near_half(f.underg.mean) && near_half(f.overg.mean) && gap > 0.2;
    (
        ok,
        format!(
            "fbi ({}) AUC U {:.3} O {:.3}; h_star O-U gap {gap:.3} (need fbi in 0.5+-0.1, gap > 0.2)",
            f.chosen, f.underg.mean, f.overg.mean
        ),
    )
}

/// Average ranks, ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            out[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&ra), mean(&rb));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let var = |r: &[f64], m: f64| r.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    cov / (var(&ra, ma) * var(&rb, mb)).sqrt()
}

fn kxi_trend(desk: &[(Problem, ResultMatrix)]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (problem, matrix) in desk {
        let rows = sweep::kxi_trend(matrix);
        let mut levels: Vec<f64> = rows.iter().filter_map(|r| r.theta_y).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        let avg: Vec<f64> = levels
            .iter()
            .map(|&t| {
                let v: Vec<f64> = rows.iter().filter(|r| r.theta_y == Some(t)).map(|r| r.k_pow_xi).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        // complexity rank grows as theta_y shrinks
        let complexity: Vec<f64> = rows.iter().map(|r| -r.theta_y.unwrap_or(f64::NAN)).collect();
        let kxi: Vec<f64> = rows.iter().map(|r| r.k_pow_xi).collect();
        let rho = spearman(&complexity, &kxi);
        let monotone = avg.windows(2).all(|w| w[1] <= w[0]);
        let easiest = *avg.last().expect("levels");
        ok &= monotone && rho > 0.0 && easiest <= 1.5;
        let shown: Vec<String> = levels.iter().zip(&avg).map(|(t, a)| format!("{t}:{a:.1}")).collect();
        parts.push(format!("{problem:?} avg K^xi by theta [{}] rho {rho:+.2}", shown.join(" ")));
    }
    (
        ok,
        format!("{} (need non-increasing, rho > 0, easiest <= 1.5)", parts.join("; ")),
    )
}

fn lfo_contract() -> (bool, String) {
    let seed = SEED + 9;
    let config = SynthConfig::new(Mode::Cbuc, 2.0, 0.8, seed).with_n_train(N_TRAIN);
    let ds = synthdata::generate_train(&config).expect("data");
    let spec = LayerSpec::classifier(ds.n_features(), &[50, 10]);
    let epsilon = 0.05;
    let lfo = LfoConfig {
        lr_model: 1e-3,
        lr_lambda: 1e-3,
        epsilon,
        lambda_init: 0.0,
    };
    let tc = TrainConfig::new(LossSpec::StandardCe, seed).with_epochs(30);
    let out = train::train_lfo(&spec, &ds, &tc, &lfo, None).expect("lfo");
    let steps = &out.history.lambda_steps;
    let negative = steps.iter().filter(|&&l| !(l >= 0.0)).count();
    let p = out.params.predict(ds.view()).expect("predict");
    let z = ds.z.as_ref().expect("z");
    let c_peo = losses::eo_proxy(&ds.y, z, p.view()).expect("all cells populated").value;
    let ok = negative == 0 && !steps.is_empty() && c_peo <= epsilon + 0.05;
    (
        ok,
        format!(
            "{} lambda steps, {negative} negative, final lambda {:.3}; C_PEO {c_peo:.4} (need <= {:.2})",
            steps.len(),
            out.lambda,
            epsilon + 0.05
        ),
    )
}

fn fairness_gaps(dir: &Path) -> (bool, String) {
    let mut methods = vec![MethodGrid::Fbi { xi: XI_GRID.to_vec() }];
    methods.extend(
        MethodGrid::desk_defaults(Problem::UC)
            .into_iter()
            .filter(|m| matches!(m, MethodGrid::Peo { .. } | MethodGrid::Lfo { .. })),
    );
    let plan = plan(Problem::UC, 1.0, 0.9, methods);
    let m = run(&plan, dir);
    let gaps = |name: &str| {
        let r = only_cell(&m, name, &plan);
        (r.fpr_gap.expect("fpr gap").abs(), r.fnr_gap.expect("fnr gap").abs())
    };
    let (f_fpr, f_fnr) = gaps("fbi");
    let (p_fpr, p_fnr) = gaps("peo");
    let (l_fpr, l_fnr) = gaps("lfo");
    let best_fpr = p_fpr.min(l_fpr);
    let best_fnr = p_fnr.min(l_fnr);
    let ok = f_fpr <= best_fpr + 0.1 && f_fnr <= best_fnr + 0.1;
    (
        ok,
        format!(
            "|FPR gap| fbi {f_fpr:.3} peo {p_fpr:.3} lfo {l_fpr:.3}; |FNR gap| fbi {f_fnr:.3} peo {p_fnr:.3} lfo {l_fnr:.3} (need fbi <= best + 0.1)"
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn determinism(first: &Path, plan: &SweepPlan, scratch: &Path) -> (bool, String) {
    let again = scratch.join("rerun");
    sweep::run_sweep(plan, &again, &SweepOptions::default()).expect("rerun");
    let (a, b) = (csv_files(first), csv_files(&again));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let ok = !a.is_empty() && a.keys().eq(b.keys()) && differing.is_empty();
    (
        ok,
        format!(
            "{:?} desk rerun: {} CSV files, {} differ{}",
            plan.problem,
            a.len(),
            differing.len(),
            if a.keys().eq(b.keys()) { "" } else { ", file sets differ" }
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: usize| selected.is_empty() || selected.contains(&id);
    let scratch = tempfile::tempdir().expect("tempdir");
    let sub = |name: &str| scratch.path().join(name);
    let mut report = Report { passed: 0, failed: 0 };

    let timed = |f: &dyn Fn() -> (bool, String)| {
        let t = Instant::now();
        let (ok, detail) = f();
        (ok, detail, t.elapsed())
    };

    if want(1) {
        let (ok, d, t) = timed(&gradient_suite);
        report.line(1, ok && t < Duration::from_secs(60), "gradient suite (< 60s)", d, t);
    }
    if want(2) {
        let (ok, d, t) = timed(&reductions);
        report.line(2, ok, "reduction identities", d, t);
    }
    if want(3) {
        let (ok, d, t) = timed(&baseline_shift_identity);
        report.line(3, ok, "baseline shift at c = pi = 0.5", d, t);
    }
    if want(4) {
        let (ok, d, t) = timed(&auc_oracle);
        report.line(4, ok, "AUC against pair counting", d, t);
    }
    if want(5) {
        let (ok, d, t) = timed(&|| balanced_sanity(&sub("c5")));
        report.line(5, ok && t < Duration::from_secs(300), "balanced sanity, CI (< 300s)", d, t);
    }
    if want(6) {
        let (ok, d, t) = timed(&|| divergence(&sub("c6")));
        report.line(6, ok && t < Duration::from_secs(1200), "divergence and FBI recovery, CI (< 1200s)", d, t);
    }
    if want(7) {
        let (ok, d, t) = timed(&|| impossible_task(&sub("c7")));
        report.line(7, ok, "impossible task guard, CB", d, t);
    }

    // one desk sweep per problem feeds criteria 8, 11 and 12
    let desk_needed = want(8) || want(11) || want(12);
    let mut desk = Vec::new();
    let mut desk_time = Duration::ZERO;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    if desk_needed {
        for problem in [Problem::CI, Problem::CB, Problem::UC] {
            let plan = SweepPlan::desk(problem);
            let t = Instant::now();
            let matrix = run(&plan, &sub(&format!("desk_{problem:?}")));
            desk_time += t.elapsed();
            desk.push((problem, matrix));
        }
    }
    if want(8) {
        let (ok, d, _) = timed(&|| kxi_trend(&desk));
        report.line(8, ok, "K^xi trend over the desk sweep", d, desk_time);
    }
    if want(9) {
        let (ok, d, t) = timed(&lfo_contract);
        report.line(9, ok, "LFO multiplier and constraint, UC", d, t);
    }
    if want(10) {
        let (ok, d, t) = timed(&|| fairness_gaps(&sub("c10")));
        report.line(10, ok, "fairness gaps against PEO and LFO, UC", d, t);
    }
    if want(11) {
        let plan = SweepPlan::desk(Problem::CI);
        let (ok, d, t) = timed(&|| determinism(&sub("desk_CI"), &plan, scratch.path()));
        report.line(11, ok, "byte-identical desk rerun", d, t);
    }
    if want(12) {
        // projection assumes the cells spread evenly over the workers, which
        // holds for desk plans (108 independent (cell, run) tasks each)
        let used = workers.min(8) as f64;
        let projected = desk_time.as_secs_f64() * used / 8.0;
        let ok = projected < 1800.0;
        report.line(
            12,
            ok,
            "desk sweep under 30 min on 8 cores",
            format!(
                "CI+CB+UC wall {:.0}s on {workers} core(s), projected {projected:.0}s on 8 (limit 1800s)",
                desk_time.as_secs_f64()
            ),
            desk_time,
        );
    }
    println!("acceptance: {} passed, {} failed", report.passed, report.failed);
}
