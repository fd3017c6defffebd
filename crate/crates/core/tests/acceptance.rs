//! Acceptance run: one line per criterion. Criterion 10 is informational and
//! never fails the run.

mod common;

use std::time::{Duration, Instant};

use common::*;
use distgp::dense::Matrix;
use distgp::distla::*;
use distgp::gp::{CovarianceSpec, KrigeProblem, NelderMeadConfig, ProblemConfig};
use distgp::grid::{BlockLayout, ObjectLayout, ProcessGrid};
use distgp::transport::protocol::{Inputs, Side, StoreValue};
use distgp::transport::Targets;
use distgp::{Cluster, ClusterOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

const SWEEP_N: [usize; 3] = [64, 257, 1000];
const SWEEP_P: [usize; 4] = [1, 3, 6, 10];
const SWEEP_H: [usize; 3] = [1, 2, 3];

// 1. Layout laws.
fn layout_laws() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    for d in 1..=5 {
        let grid = ProcessGrid::with_order(d).unwrap();
        for h in 1..=4 {
            let b = h * d;
            let layout = ObjectLayout::triangular(BlockLayout::new(b * 3, h, &grid).unwrap());
            let mut seen = vec![vec![0u32; b]; b];
            for c in grid.coords() {
                let blocks = layout.owned_blocks(c);
                let want = if c.is_diagonal() { h * (h + 1) / 2 } else { h * h };
                if blocks.len() != want {
                    failures.push(format!("D={d} h={h} {c:?}: {} blocks", blocks.len()));
                }
                for (i, j) in blocks {
                    seen[i - 1][j - 1] += 1;
                }
            }
            for (i, row) in seen.iter().enumerate() {
                for (j, &count) in row.iter().enumerate() {
                    if count != u32::from(j <= i) {
                        failures.push(format!("D={d} h={h} block ({},{}) owned {count} times", i + 1, j + 1));
                    }
                }
            }
        }
    }
    let t = secs(start.elapsed());
    outcome(failures.is_empty() && t < 1.0, format!("{} violations, {t:.3} s", failures.len()))
}

fn spd_sweep_inputs() -> Vec<(usize, Matrix, Matrix)> {
    SWEEP_N.iter().map(|&n| {
        let c = random_spd(n as u64, n);
        let l = naive_cholesky(&c);
        (n, c, l)
    }).collect()
}

// 2. Cholesky oracle sweep, plus the memory figures for criterion 4.
fn cholesky_sweep(inputs: &[(usize, Matrix, Matrix)], memory: &mut Vec<String>) -> Outcome {
    let start = Instant::now();
    let (mut worst_res, mut worst_l) = (0.0f64, 0.0f64);
    for (n, c, oracle) in inputs {
        let n = *n;
        for p in SWEEP_P {
            for h in SWEEP_H {
                let mut cl = Cluster::in_process(p, 1).unwrap();
                let bl = BlockLayout::new(n, h, cl.grid()).unwrap();
                distribute_triangular(&mut cl, "C", c, bl).unwrap();
                distributed_cholesky(&mut cl, "C", "L").unwrap();
                let l = collect_triangular(&mut cl, "L").unwrap();
                let res = rel_err(&l.matmul(&l.transpose()), c);
                worst_res = worst_res.max(res);
                worst_l = worst_l.max(rel_err(&l, oracle));

                for s in cl.last_cholesky_stats() {
                    let own = if s.coord.is_diagonal() { h * (h + 1) / 2 } else { h * h };
                    if s.owned_blocks != own || (!s.coord.is_diagonal() && s.peak_resident > h * h + 4) {
                        memory.push(format!("n={n} P={p} h={h} {:?}", s));
                    }
                }
            }
        }
    }
    let t = secs(start.elapsed());
    outcome(
        worst_res <= 1e-10 && worst_l <= 1e-10 && t < 120.0,
        format!("max residual {worst_res:.2e}, max |L - serial| {worst_l:.2e}, {t:.1} s"),
    )
}

// 3. Kernel oracles.
fn kernel_sweep(inputs: &[(usize, Matrix, Matrix)]) -> Outcome {
    let start = Instant::now();
    let m = 24;
    let (mut solve_err, mut prod_err, mut logdet_err) = (0.0f64, 0.0f64, 0.0f64);
    for (n, _, lm) in inputs {
        let n = *n;
        let b = normals(n as u64 + 1, n);
        let bm = random_matrix(n as u64 + 2, n, m);
        let bcol = Matrix::column_vector(&b);
        let want_fwd = naive_forward(lm, &bcol);
        let want_back = naive_back(lm, &bcol);
        let want_fwd_m = naive_forward(lm, &bm);
        let want_back_m = naive_back(lm, &bm);
        let want_mult = naive_matmul(lm, &bcol);
        let want_mult_m = naive_matmul(lm, &bm);
        let bmt = bm.transpose();
        let want_w = naive_matmul(&bmt, &bcol);
        let want_s = lower_of(&naive_matmul(&bmt, &bm));
        let want_ld: f64 = 2.0 * (0..n).map(|i| get(lm, i, i).ln()).sum::<f64>();
        for p in SWEEP_P {
            for h in SWEEP_H {
                let mut cl = Cluster::in_process(p, 1).unwrap();
                let rows = BlockLayout::new(n, h, cl.grid()).unwrap();
                let cols = BlockLayout::new(m, h, cl.grid()).unwrap();
                distribute_triangular(&mut cl, "L", lm, rows).unwrap();
                distribute_vector(&mut cl, "b", &b, rows).unwrap();
                distribute_matrix(&mut cl, "B", &bm, rows, cols).unwrap();
                triangular_solve(&mut cl, "L", "b", "f", Side::Forward).unwrap();
                triangular_solve(&mut cl, "L", "b", "k", Side::Back).unwrap();
                triangular_solve(&mut cl, "L", "B", "F", Side::Forward).unwrap();
                triangular_solve(&mut cl, "L", "B", "K", Side::Back).unwrap();
                mult_chol(&mut cl, "L", "b", "lb").unwrap();
                mult_chol(&mut cl, "L", "B", "LB").unwrap();
                crossprod_mat_vec(&mut cl, "B", "b", "w").unwrap();
                crossprod_self(&mut cl, "B", "S").unwrap();
                crossprod_self_diag(&mut cl, "B", "s").unwrap();
                let v = |cl: &mut Cluster, name: &str| Matrix::column_vector(&collect_vector(cl, name).unwrap());
                for (name, want) in [("f", &want_fwd), ("k", &want_back)] {
                    solve_err = solve_err.max(rel_err(&v(&mut cl, name), want));
                }
                solve_err = solve_err.max(rel_err(&collect_matrix(&mut cl, "F").unwrap(), &want_fwd_m));
                solve_err = solve_err.max(rel_err(&collect_matrix(&mut cl, "K").unwrap(), &want_back_m));
                prod_err = prod_err.max(rel_err(&v(&mut cl, "lb"), &want_mult));
                prod_err = prod_err.max(rel_err(&collect_matrix(&mut cl, "LB").unwrap(), &want_mult_m));
                prod_err = prod_err.max(rel_err(&v(&mut cl, "w"), &want_w));
                prod_err = prod_err.max(rel_err(&collect_triangular(&mut cl, "S").unwrap(), &want_s));
                prod_err = prod_err.max(rel_err_vec(&collect_vector(&mut cl, "s").unwrap(), &want_s.diagonal()));
                let ld = log_det_from_chol(&mut cl, "L").unwrap();
                logdet_err = logdet_err.max((ld - want_ld).abs() / want_ld.abs());
            }
        }
    }
    let t = secs(start.elapsed());
    outcome(
        solve_err <= 1e-10 && prod_err <= 1e-12 && logdet_err <= 1e-10 && t < 60.0,
        format!("solves {solve_err:.2e}, products {prod_err:.2e}, log-det {logdet_err:.2e}, {t:.1} s"),
    )
}

// 4. Memory bound. The overhead factor is the largest per-worker peak, in
// entries, over the ideal share n(n+1)/(D(D+1)) of the triangle, measured
// with hD dividing n.
fn memory_bound(violations: &[String]) -> Outcome {
    let (d, h, n) = (4, 3, 960);
    let mut cl = Cluster::in_process(d * (d + 1) / 2, 0).unwrap();
    let bl = BlockLayout::new(n, h, cl.grid()).unwrap();
    distribute_triangular(&mut cl, "C", &random_spd(5, n), bl).unwrap();
    distributed_cholesky(&mut cl, "C", "C").unwrap();
    let peak = cl.last_cholesky_stats().iter().map(|s| s.peak_resident).max().unwrap();
    let bs = bl.block_size() as f64;
    let factor = peak as f64 * bs * bs / ((n * (n + 1)) as f64 / (d * (d + 1)) as f64);
    outcome(
        violations.is_empty() && factor <= 1.9,
        format!(
            "{} peak/ownership violations over the sweep; h=3 D=4 peak {peak} blocks, overhead factor {factor:.3}",
            violations.len()
        ),
    )
}

fn gp_inputs(x: &[f64], xp: &[f64]) -> Inputs {
    let mut inp = Inputs::new().with_array("x", Matrix::column_vector(x)).with_scalar("nu", 0.5).with_scalar("mean", 0.0);
    if !xp.is_empty() {
        inp = inp.with_array("x_pred", Matrix::column_vector(xp));
    }
    inp
}

fn gp_problem(cl: &mut Cluster, x: &[f64], y: &[f64], xp: &[f64], h: Option<usize>) -> KrigeProblem {
    let spec = CovarianceSpec::builtin("matern-nugget").unwrap();
    let cfg = ProblemConfig::new("gp", spec, y.to_vec(), gp_inputs(x, xp)).predictions(xp.len()).replication(h, h);
    KrigeProblem::new(cl, cfg).unwrap()
}

// 5. GP end to end.
fn gp_end_to_end() -> Outcome {
    let start = Instant::now();
    let n = 400;
    let x = locations(51, n, 40.0);
    let xp = locations(52, 20, 40.0);
    let theta = [1.0, 1.0, 0.1];
    let y = synthetic_gp(53, &x, &theta, 0.0);
    let want = serial_kriging(&x, &y, &xp, &theta, 0.0);
    let (mut oracle_err, mut layout_err) = (0.0f64, 0.0f64);
    let mut first: Option<(f64, Vec<f64>, Vec<f64>, Matrix)> = None;
    for (p, h) in [(1, 1), (3, 2), (6, 3), (10, 1), (10, 2)] {
        let mut cl = Cluster::in_process(p, 0).unwrap();
        let mut prob = gp_problem(&mut cl, &x, &y, &xp, Some(h));
        let l = prob.log_density(&mut cl, &theta).unwrap();
        let pred = prob.predict(&mut cl, true).unwrap();
        let se = pred.se.clone().unwrap();
        let sigma = prob.prediction_variance(&mut cl).unwrap();
        oracle_err = oracle_err
            .max(((l - want.loglik) / want.loglik).abs())
            .max(rel_err_vec(&pred.mean, &want.mean))
            .max(rel_err_vec(&se, &want.se))
            .max(rel_err(&sigma, &want.sigma));
        match &first {
            None => first = Some((l, pred.mean, se, sigma)),
            Some((l0, m0, s0, sg0)) => {
                layout_err = layout_err
                    .max(((l - l0) / l0).abs())
                    .max(rel_err_vec(&pred.mean, m0))
                    .max(rel_err_vec(&se, s0))
                    .max(rel_err(&sigma, sg0));
            }
        }
    }
    let t = secs(start.elapsed());
    outcome(
        oracle_err <= 1e-8 && layout_err <= 1e-10 && t < 120.0,
        format!("vs serial {oracle_err:.2e}, across (P, h) {layout_err:.2e}, {t:.1} s"),
    )
}

// 6. MLE recovery.
fn mle_recovery() -> Outcome {
    let start = Instant::now();
    let nm = NelderMeadConfig::default();

    let n = 100;
    let y: Vec<f64> = normals(61, n).iter().map(|v| 1.4 * v).collect();
    let closed = y.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut cl = Cluster::in_process(3, 0).unwrap();
    let spec = CovarianceSpec::builtin("white").unwrap();
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mut p = KrigeProblem::new(&mut cl, ProblemConfig::new("w", spec, y, gp_inputs(&xs, &[]))).unwrap();
    let fit = p.optimize_log_dens(&mut cl, &[1.0], &nm).unwrap();
    let white_err = ((fit.theta[0] - closed) / closed).abs();

    let truth = [1.0, 1.0, 0.1];
    let n = 400;
    let mut sums = [0.0; 3];
    let mut below_truth = 0;
    for seed in 0..5u64 {
        let x = locations(70 + seed, n, 40.0);
        let y = synthetic_gp(80 + seed, &x, &truth, 0.0);
        let mut cl = Cluster::in_process(3, seed).unwrap();
        let mut prob = gp_problem(&mut cl, &x, &y, &[], None);
        let l_true = prob.log_density(&mut cl, &truth).unwrap();
        let fit = prob.optimize_log_dens(&mut cl, &[2.0, 3.0, 0.5], &nm).unwrap();
        if fit.loglik < l_true {
            below_truth += 1;
        }
        for (s, t) in sums.iter_mut().zip(&fit.theta) {
            *s += t / 5.0;
        }
    }
    let within = |est: f64, t: f64| est >= t / 2.0 && est <= t * 2.0;
    let t = secs(start.elapsed());
    outcome(
        white_err <= 1e-4 && below_truth == 0 && within(sums[0], truth[0]) && within(sums[1], truth[1]) && t < 600.0,
        format!(
            "white-noise MLE rel err {white_err:.1e}; mean fit over 5 seeds sigma2 {:.3} range {:.3} nugget {:.3}; \
             {below_truth} fits below the true likelihood; {t:.1} s",
            sums[0], sums[1], sums[2]
        ),
    )
}

// 7. Simulation statistics.
fn simulation_statistics() -> Outcome {
    let start = Instant::now();
    let theta = [1.0, 1.0, 0.1];
    let n = 30;
    let x = locations(91, n, 6.0);
    let y = synthetic_gp(92, &x, &theta, 0.0);
    let xp = locations(93, 5, 6.0);
    let mut cl = Cluster::in_process(3, 2024).unwrap();
    let mut prob = gp_problem(&mut cl, &x, &y, &xp, None);
    prob.set_theta(&theta).unwrap();

    let r = 5000;
    let sims = prob.simulate_realizations(&mut cl, r, false).unwrap();
    let mean: Vec<f64> = (0..n).map(|i| (0..r).map(|c| sims[(i, c)]).sum::<f64>() / r as f64).collect();
    let cov = Matrix::from_fn(n, n, |i, j| {
        (0..r).map(|c| (sims[(i, c)] - mean[i]) * (sims[(j, c)] - mean[j])).sum::<f64>() / (r - 1) as f64
    });
    let mut c = exp_cov(&x, &x, theta[0], theta[1]);
    for i in 0..n {
        c.as_mut_slice()[i + i * n] += theta[2];
    }
    let cov_err = rel_err(&cov, &c);
    let cov_bound = 5.0 * (2.0 / r as f64).sqrt();

    let r = 2000;
    let post = prob.simulate_realizations(&mut cl, r, true).unwrap();
    let pred = prob.predict(&mut cl, true).unwrap();
    let se = pred.se.unwrap();
    let mut worst = 0.0f64;
    for (i, (m, s)) in pred.mean.iter().zip(&se).enumerate() {
        let avg = (0..r).map(|c| post[(i, c)]).sum::<f64>() / r as f64;
        worst = worst.max((avg - m).abs() / (4.0 * s / (r as f64).sqrt()));
    }
    let t = secs(start.elapsed());
    outcome(
        cov_err <= cov_bound && worst <= 1.0 && t < 120.0,
        format!(
            "covariance rel err {cov_err:.4} (bound {cov_bound:.4}); worst posterior mean deviation {worst:.3} of the 4 se/sqrt(r) bound; {t:.1} s"
        ),
    )
}

// 8. Determinism.
fn determinism() -> Outcome {
    let theta = [1.0, 1.0, 0.1];
    let x = locations(101, 60, 8.0);
    let y = synthetic_gp(102, &x, &theta, 0.0);
    let xp = locations(103, 6, 8.0);
    let run = || {
        let mut cl = Cluster::in_process(6, 7).unwrap();
        let mut prob = gp_problem(&mut cl, &x, &y, &xp, Some(2));
        let fit = prob.optimize_log_dens(&mut cl, &[0.5, 2.0, 0.3], &NelderMeadConfig::default()).unwrap();
        let pred = prob.predict(&mut cl, true).unwrap();
        let sims = prob.simulate_realizations(&mut cl, 4, true).unwrap();
        let prior = prob.simulate_realizations(&mut cl, 4, false).unwrap();
        let mut bits: Vec<u64> = Vec::new();
        for e in &fit.trace {
            bits.extend(e.theta.iter().map(|v| v.to_bits()));
            bits.push(e.loglik.map_or(0, f64::to_bits));
        }
        bits.extend(fit.theta.iter().map(|v| v.to_bits()));
        bits.extend(pred.mean.iter().chain(pred.se.as_ref().unwrap()).map(|v| v.to_bits()));
        bits.extend(sims.as_slice().iter().chain(prior.as_slice()).map(|v| v.to_bits()));
        bits
    };
    let a = run();
    let b = run();
    outcome(a == b, format!("{} output words compared", a.len()))
}

// 9. Freshness.
fn freshness() -> Outcome {
    let theta = [1.0, 1.0, 0.1];
    let x = locations(111, 80, 8.0);
    let y = synthetic_gp(112, &x, &theta, 0.0);
    let mut cl = Cluster::spawn(ClusterOptions::new(6, 0).event_log(true)).unwrap();
    let mut prob = gp_problem(&mut cl, &x, &y, &[], Some(2));
    prob.log_density(&mut cl, &theta).unwrap();
    let first = cl.take_events().unwrap().len();
    prob.log_density(&mut cl, &theta).unwrap();
    let second = cl.take_events().unwrap().len();
    outcome(first > 0 && second == 0, format!("{first} block events on the first call, {second} on the second"))
}

// 10. Performance smoke.
fn performance() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let n = 3072;
    let time = |p: usize, h: usize| -> f64 {
        let mut cl = Cluster::in_process(p, 0).unwrap();
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let inp = Inputs::new().with_array("x", Matrix::column_vector(&xs)).with_scalar("nu", 0.5);
        cl.push("in", StoreValue::Inputs(inp), &Targets::All).unwrap();
        let layout = ObjectLayout::triangular(BlockLayout::new(n, h, cl.grid()).unwrap());
        construct_distributed(&mut cl, "C", layout, "matern-nugget:cov", &[1.0, 0.1, 1.0], Some("in")).unwrap();
        let start = Instant::now();
        distributed_cholesky(&mut cl, "C", "C").unwrap();
        secs(start.elapsed())
    };
    let serial = time(1, 1);
    let parallel: Vec<(usize, f64)> = SWEEP_H.iter().map(|&h| (h, time(6, h))).collect();
    let (best_h, best) = parallel.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let speedup = serial / best;
    let verdict = if threads < 6 {
        "not applicable, fewer than 6 hardware threads"
    } else if speedup >= 1.8 {
        "met"
    } else {
        "not met"
    };
    let cells: Vec<String> = parallel.iter().map(|(h, t)| format!("h={h} {t:.2} s")).collect();
    format!(
        "n={n}: P=1 {serial:.2} s; P=6 {}; best h={best_h}, speedup {speedup:.2}x (target 1.8x, {verdict}; {threads} hardware threads)",
        cells.join(", ")
    )
}

fn main() {
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |k: u32, o: Outcome| {
        println!("criterion {k}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((k, o));
    };

    report(1, layout_laws());
    let inputs = spd_sweep_inputs();
    let mut violations = Vec::new();
    report(2, cholesky_sweep(&inputs, &mut violations));
    report(3, kernel_sweep(&inputs));
    report(4, memory_bound(&violations));
    report(5, gp_end_to_end());
    report(6, mle_recovery());
    report(7, simulation_statistics());
    report(8, determinism());
    report(9, freshness());
    println!("criterion 10: RECORDED (non-gating) - {}", performance());

    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
