//! Acceptance checks. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p beamtc --test acceptance -- --nocapture --test-threads 1`
//! to see them in order.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use beamtc::metrics::FrameTiming;
use beamtc::pipeline::{run, Evaluation, ExperimentConfig, Layout};
use beamtc::recommend::Source;
use beamtc::smc::{build_y_system, smc_solve, solve_y, svt, y_objective, SmcParams, SmcProblem};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: &str, ok: bool, detail: String) {
    println!("{} criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id}: {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0))
}

/// Random mask with the requested density and at least one observed cell.
fn random_mask(rng: &mut ChaCha8Rng, m: usize, n: usize, frac: f64) -> DMatrix<bool> {
    let mut cells: Vec<usize> = (0..m * n).collect();
    cells.shuffle(rng);
    let count = ((frac * (m * n) as f64).round() as usize).clamp(1, m * n);
    let mut mask = DMatrix::from_element(m, n, false);
    for &k in &cells[..count] {
        mask[(k / n, k % n)] = true;
    }
    mask
}

#[test]
fn c1_observed_entries_preserved() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let (m, n) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let frac = rng.random_range(0.1..=0.9);
        let values = random_matrix(&mut rng, m, n);
        let mask = random_mask(&mut rng, m, n, frac);
        let p = SmcProblem::with_mask(values.clone(), mask.clone(), SmcParams::default()).unwrap();
        let sol = smc_solve(&p);
        for (k, &obs) in mask.iter().enumerate() {
            if obs && sol.completed.as_slice()[k].to_bits() != values.as_slice()[k].to_bits() {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "1",
        mismatches == 0 && elapsed < Duration::from_secs(30),
        format!("100 problems, {mismatches} observed cells changed, {:.2} s (limit 30 s)", elapsed.as_secs_f64()),
    );
}

/// Minimizes ½‖LRᵀ − A‖² + τ/2(‖L‖² + ‖R‖²) by alternating ridge
/// regressions. At a minimum LRᵀ is the prox of τ‖·‖_* at A; no SVD is used.
fn numerical_prox(a: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let k = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut l = DMatrix::from_fn(m, k, |_, _| rng.random_range(-1.0..1.0));
    let mut r = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
    let eye = DMatrix::<f64>::identity(k, k);
    let mut prev = &l * r.transpose();
    for _ in 0..500_000 {
        l = (a * &r) * (r.transpose() * &r + &eye * tau).try_inverse().unwrap();
        r = (a.transpose() * &l) * (l.transpose() * &l + &eye * tau).try_inverse().unwrap();
        let cur = &l * r.transpose();
        if (&cur - &prev).norm() < 1e-14 {
            return cur;
        }
        prev = cur;
    }
    prev
}

#[test]
fn c2_svt_matches_numerical_prox() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..=8), rng.random_range(1..=6));
        let a = random_matrix(&mut rng, m, n);
        for tau in [0.1, 1.0, 5.0] {
            let diff = (svt(&a, tau).unwrap() - numerical_prox(&a, tau)).norm();
            worst = worst.max(diff);
        }
    }
    let elapsed = start.elapsed();
    report(
        "2",
        worst <= 1e-5 && elapsed < Duration::from_secs(60),
        format!("150 prox problems, worst Frobenius gap {worst:.2e} (limit 1e-5), {:.2} s (limit 60 s)", elapsed.as_secs_f64()),
    );
}

#[test]
fn c3_y_update_stationary() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut cells = 0usize;
    for _ in 0..25 {
        let (m, n) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let params = SmcParams {
            gamma: rng.random_range(0.1..5.0),
            lambda: rng.random_range(0.1..5.0),
            ..SmcParams::default()
        };
        let frac = rng.random_range(0.1..0.9);
        let p = SmcProblem::with_mask(random_matrix(&mut rng, m, n), random_mask(&mut rng, m, n, frac), params).unwrap();
        let sys = build_y_system(&p).unwrap();
        let x = random_matrix(&mut rng, m, n);
        let z = random_matrix(&mut rng, m, n);
        let y = solve_y(&sys, &p, &x, &z);
        for i in 0..m {
            for j in 0..n {
                if p.is_observed(i, j) {
                    continue;
                }
                let (mut up, mut dn) = (y.clone(), y.clone());
                up[(i, j)] += h;
                dn[(i, j)] -= h;
                let g = (y_objective(&p, &x, &z, &up) - y_objective(&p, &x, &z, &dn)) / (2.0 * h);
                worst = worst.max(g.abs());
                cells += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "3",
        worst <= 1e-4 && elapsed < Duration::from_secs(60),
        format!("{cells} unobserved cells, worst |gradient| {worst:.2e} (limit 1e-4), {:.2} s", elapsed.as_secs_f64()),
    );
}

type Cells = Vec<(usize, usize)>;

/// Shuffled split into (hidden, observed) cells.
fn hide(m: usize, n: usize, fraction: f64, seed: u64) -> (Cells, Cells) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    cells.shuffle(&mut rng);
    let hidden = (fraction * (m * n) as f64).round() as usize;
    let (hid, obs) = cells.split_at(hidden);
    (hid.to_vec(), obs.to_vec())
}

#[test]
fn c4a_rank_one_recovery() {
    let (m, n) = (16, 16);
    let truth = DMatrix::from_fn(m, n, |i, j| (i + 1) as f64 * (j + 1) as f64);
    let (hid, obs) = hide(m, n, 0.3, 21);
    let sol = smc_solve(&SmcProblem::new(truth.clone(), &obs, SmcParams::default()).unwrap());
    let err: f64 = hid.iter().map(|&c| (sol.completed[c] - truth[c]).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = hid.iter().map(|&c| truth[c].powi(2)).sum::<f64>().sqrt();
    let rel = err / scale;
    report("4a", rel < 0.05, format!("rank-1 16x16, 30% hidden, relative error {rel:.4} (limit 0.05)"));
}

#[test]
fn c4b_constant_recovery() {
    let (m, n) = (16, 16);
    let (hid, obs) = hide(m, n, 0.3, 22);
    let sol = smc_solve(&SmcProblem::new(DMatrix::from_element(m, n, 4.5), &obs, SmcParams::default()).unwrap());
    let worst = hid.iter().map(|&c| (sol.completed[c] - 4.5).abs()).fold(0.0, f64::max);
    report("4b", worst <= 1e-3, format!("constant 16x16, 30% hidden, worst error {worst:.2e} (limit 1e-3)"));
}

struct FullRun {
    eval: Evaluation,
    elapsed: Duration,
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
}

fn full_run() -> &'static FullRun {
    static RUN: OnceLock<FullRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let eval = run(&cfg, &Layout::new(dir.path())).unwrap();
        FullRun { eval, elapsed: start.elapsed(), _dir: dir, cfg }
    })
}

fn tc(r: &FullRun, k: f64, f: f64) -> f64 {
    r.eval.p_pl(k, f, Source::TensorCompletion).unwrap()
}

#[test]
fn c5a_ppl_monotone_in_trained_beams() {
    let r = full_run();
    let fr = &r.cfg.evaluation.n_tr_fractions;
    let mut violations = Vec::new();
    for k in [0.2, 0.4] {
        for w in fr.windows(2) {
            if tc(r, k, w[1]) > tc(r, k, w[0]) {
                violations.push(format!("K_op {k}: {} -> {}", w[0], w[1]));
            }
        }
    }
    report("5a", violations.is_empty(), format!("TC P_pl non-increasing over {} fractions, violations {violations:?}", fr.len()));
}

#[test]
fn c5b_tc_beats_fingerprint() {
    let r = full_run();
    let t = tc(r, 0.2, 0.02);
    let fp = r.eval.p_pl(0.2, 0.02, Source::Fingerprint).unwrap();
    report(
        "5b",
        fp - t >= 0.10,
        format!("2% beams, K_op 20%: TC {t:.4}, fingerprint {fp:.4}, margin {:.4} (required 0.10)", fp - t),
    );
}

#[test]
fn c5c_more_observed_positions_do_not_hurt() {
    let r = full_run();
    let (worst_f, worst) = r
        .cfg
        .evaluation
        .n_tr_fractions
        .iter()
        .map(|&f| (f, tc(r, 0.4, f) - tc(r, 0.2, f)))
        .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    report(
        "5c",
        worst <= 0.02,
        format!("largest TC P_pl increase K_op 20%->40% is {worst:+.4} at {worst_f} (limit 0.02)"),
    );
}

#[test]
fn c5d_runtime() {
    let r = full_run();
    report(
        "5 runtime",
        r.elapsed < Duration::from_secs(600),
        format!("full-scale pipeline {:.2} s (limit 600 s)", r.elapsed.as_secs_f64()),
    );
}

#[test]
fn c6a_exhaustive_f_comm() {
    let f = FrameTiming::default().f_comm(256).unwrap();
    report("6a", f == 0.488, format!("f_comm(256) = {f} (required exactly 0.488)"));
}

#[test]
fn c6b_se_ordering() {
    let r = full_run();
    let n_small = r.cfg.n_tr(r.cfg.evaluation.n_tr_fractions[0]);
    let mut bad = Vec::new();
    for &k in &r.cfg.survey.k_op {
        for &p in &r.cfg.evaluation.p_t_dbm {
            let se = |m: Source, n: usize| {
                r.eval.se.iter().find(|s| s.k_op == k && s.p_t_dbm == p && s.method == m && s.n_tr == n).unwrap().se_bps_hz
            };
            let (t, e) = (se(Source::TensorCompletion, n_small), se(Source::Exhaustive, 256));
            if t <= e {
                bad.push(format!("K_op {k}, {p} dBm: TC {t:.3} <= exhaustive {e:.3}"));
            }
        }
    }
    report(
        "6b",
        bad.is_empty(),
        format!("SE(TC, N_tr {n_small}) > SE(exhaustive) at {} powers, violations {bad:?}", r.cfg.evaluation.p_t_dbm.len()),
    );
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "toml") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c7_rerun_is_byte_identical() {
    let cfg = ExperimentConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&cfg, &Layout::new(a.path())).unwrap();
    run(&cfg, &Layout::new(b.path())).unwrap();
    let files = csv_files(a.path());
    let mut differing = Vec::new();
    for f in &files {
        let rel = f.strip_prefix(a.path()).unwrap();
        if fs::read(f).unwrap() != fs::read(b.path().join(rel)).unwrap_or_default() {
            differing.push(rel.display().to_string());
        }
    }
    report(
        "7",
        !files.is_empty() && differing.is_empty() && files.len() == csv_files(b.path()).len(),
        format!("{} artifacts compared, differing {differing:?}", files.len()),
    );
}
