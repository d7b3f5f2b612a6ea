//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line per
//! criterion to stderr. Set `ACCEPTANCE_ONLY=2,5` to run a subset.
//!
//! Criteria 6 and 7 are nested Monte Carlo runs and take tens of minutes on
//! a single core.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{LogNormal, StandardNormal};

use geosae::bootstrap::{
    fill_bins, mse_eblup, run_bootstrap, run_lr_test, summarize_se_ci, BootstrapInputs, CovariateRounds,
    LrCovariateSource, TestedParameter,
};
use geosae::cli::{execute, Cli, Cmd};
use geosae::config::PipelineConfig;
use geosae::diagnostics::{envelope_share, variogram_envelope};
use geosae::geo::{density_for_nodes, discretize_block, Point, Polygon, Region};
use geosae::kriging::{block_krige, point_krige, upscale_all, BlockOptions};
use geosae::pipeline::{self, Command};
use geosae::rng::{Lane, Stream};
use geosae::sfh::{ColumnScaling, Design, RandomEffect, Structure, INTERCEPT};
use geosae::simulate::{
    lattice_regions, make_scenario, simulate_conditional, simulate_unconditional, CovariateSimulator, Population,
    PopulationCell, ScenarioConfig, SimulateOver, VariogramScale,
};
use geosae::survey::direct_estimates;
use geosae::variogram::{
    default_max_lag, empirical_variogram, fit_ols, EmpiricalVariogram, EstimatorKind, Family, LagBin,
    VariogramModel,
};

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Outcome;

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "direct estimator unbiasedness", criterion_1),
    (2, "kriging oracle equivalence", criterion_2),
    (3, "variogram self-consistency", criterion_3),
    (4, "REML recovery", criterion_4),
    (5, "conditional simulation exactness and envelope", criterion_5),
    (6, "bootstrap calibration", criterion_6),
    (7, "likelihood-ratio test size and power", criterion_7),
    (8, "efficiency gain over direct estimates", criterion_8),
    (9, "determinism across worker counts", criterion_9),
    (10, "aggregation consistency", criterion_10),
];

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        });
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        if !outcome.pass {
            failed += 1;
        }
        eprintln!("criterion {n:>2} {status} {name}: {} [{:.1}s]", outcome.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Row-standardized rook contiguity on an `n x n` lattice, row-major.
fn rook(n: usize) -> DMatrix<f64> {
    let m = n * n;
    let mut w = DMatrix::zeros(m, m);
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - n);
            }
            if r + 1 < n {
                nb.push(i + n);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < n {
                nb.push(i + 1);
            }
            for &j in &nb {
                w[(i, j)] = 1.0 / nb.len() as f64;
            }
        }
    }
    w
}

fn normals(r: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.sample(StandardNormal))
}

// ---------------------------------------------------------------------------
// 1

fn criterion_1() -> Outcome {
    const REDRAWS: u64 = 10_000;
    let t = Instant::now();
    let (areas, units) = (4usize, 200usize);
    let mut rng = Stream::new(101, 0, Lane::Population).rng();
    let heavy = LogNormal::new(0.0, 0.5).unwrap();
    let mut cells = Vec::new();
    for a in 0..areas {
        for k in 0..6 {
            let scale = (1.0 + a as f64) * (1.0 + k as f64 / 2.0);
            // 4% large units, the rest near zero: CV about 5.
            let values: Vec<f64> = (0..units)
                .map(|j| {
                    if j < units / 25 {
                        20.0 * scale * rng.sample(heavy)
                    } else {
                        0.1 * scale * rng.random::<f64>()
                    }
                })
                .collect();
            cells.push(PopulationCell {
                region_id: format!("R{:02}C{:02}", a / 2, a % 2),
                size_class: (k / 3 + 1) as u8,
                type_class: (k % 3 + 1) as u8,
                values,
            });
        }
    }
    let population = Population { cells };
    let cell_cv: Vec<f64> = population
        .cells
        .iter()
        .map(|c| {
            let m = mean(&c.values);
            sample_var(&c.values).sqrt() / m
        })
        .collect();
    let regions = lattice_regions(2, 2, 1.0, &vec![(6 * units) as u64; areas]).unwrap();
    let census = population.census();
    let truth: Vec<f64> = population.area_totals().iter().map(|(_, _, t)| *t).collect();

    let mut tau = vec![Vec::with_capacity(REDRAWS as usize); areas];
    let mut var_hat = vec![0.0; areas];
    for r in 0..REDRAWS {
        let sample = population.draw_sample(0.5, Stream::new(101, r + 1, Lane::Sample)).unwrap();
        let (est, _) = direct_estimates(&regions, &sample, &census, 1e-8).unwrap();
        for (i, e) in est.iter().enumerate() {
            tau[i].push(e.tau_tilde);
            var_hat[i] += e.var_tau / REDRAWS as f64;
        }
    }
    let bias: Vec<f64> = (0..areas).map(|i| (mean(&tau[i]) - truth[i]) / truth[i]).collect();
    let ratio: Vec<f64> = (0..areas).map(|i| var_hat[i] / sample_var(&tau[i])).collect();
    let max_bias = bias.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let z: Vec<f64> =
        (0..areas).map(|i| (mean(&tau[i]) - truth[i]) / (sample_var(&tau[i]) / REDRAWS as f64).sqrt()).collect();
    let max_dev = ratio.iter().fold(0.0f64, |a, b| a.max((b - 1.0).abs()));
    let units_total = areas * 6 * units;
    Outcome {
        pass: max_bias < 0.01 && max_dev <= 0.10 && units_total >= 1000 && within(t.elapsed(), 60),
        detail: format!(
            "{units_total} units, cell CV {:.1}-{:.1}; max |rel bias| {:.4} (< 0.01), z-scores {:?}; variance ratios {:?} (within 0.10)",
            cell_cv.iter().cloned().fold(f64::INFINITY, f64::min),
            cell_cv.iter().cloned().fold(0.0, f64::max),
            max_bias,
            z.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            ratio.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    }
}

// ---------------------------------------------------------------------------
// 2

/// Gauss-Jordan with partial pivoting on plain arrays.
fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    (0..n).map(|i| b[i] / a[i][i]).collect()
}

/// Bordered ordinary kriging system with right-hand side `rhs`; returns
/// `(weights, lagrange)`.
fn oracle_system(pts: &[Point], model: &VariogramModel, rhs: &[f64]) -> (Vec<f64>, f64) {
    let n = pts.len();
    let mut a = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = model.gamma(pts[i].dist(&pts[j]));
        }
        a[i][n] = 1.0;
        a[n][i] = 1.0;
    }
    let mut b = rhs.to_vec();
    b.push(1.0);
    let s = dense_solve(a, b);
    (s[..n].to_vec(), s[n])
}

fn random_model(r: &mut impl Rng, nugget_zero: bool) -> VariogramModel {
    let nugget = if nugget_zero || r.random::<bool>() { 0.0 } else { r.random_range(0.0..0.5) };
    let psill = r.random_range(0.5..2.0);
    let range = r.random_range(1.0..5.0);
    match r.random_range(0..3) {
        0 => VariogramModel::matern(nugget, psill, range, [0.5, 0.8, 1.0, 1.5, 2.5][r.random_range(0..5)]),
        1 => VariogramModel::exponential(nugget, psill, range),
        _ => VariogramModel::spherical(nugget, psill, range * 3.0),
    }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut track = |label: &str, k: usize, got: f64, want: f64| {
        let err = (got - want).abs() / want.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-8 {
            failures.push(format!("{label}#{k}: {got} vs {want}"));
        }
    };
    for k in 0..100u64 {
        let mut r = Stream::new(202, k, Lane::Auxiliary).rng();
        let n = r.random_range(3..=10);
        let pts: Vec<Point> = (0..n).map(|_| Point::new(r.random_range(0.0..10.0), r.random_range(0.0..10.0))).collect();
        let vals: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let model = random_model(&mut r, false);
        let target = Point::new(r.random_range(0.0..10.0), r.random_range(0.0..10.0));

        // Point kriging against the oracle.
        let rhs: Vec<f64> = pts.iter().map(|p| model.gamma(p.dist(&target))).collect();
        let (lam, mu) = oracle_system(&pts, &model, &rhs);
        let pred: f64 = lam.iter().zip(&vals).map(|(l, v)| l * v).sum();
        let var: f64 = lam.iter().zip(&rhs).map(|(l, g)| l * g).sum::<f64>() + mu;
        let got = point_krige(target, &pts, &vals, &model, n).unwrap();
        track("point", k as usize, got.prediction, pred);
        track("point-var", k as usize, got.variance, var);

        // Block kriging of a rectangle against the oracle.
        let (x0, y0) = (r.random_range(1.0..5.0), r.random_range(1.0..5.0));
        let region = Region::new("B", vec![Polygon::rect(x0, y0, x0 + 3.0, y0 + 2.0)], 1).unwrap();
        let quad = discretize_block(&region, r.random_range(2.0..8.0)).unwrap();
        let rhs_b: Vec<f64> = pts
            .iter()
            .map(|p| quad.nodes.iter().zip(&quad.weights).map(|(q, w)| w * model.gamma(p.dist(q))).sum())
            .collect();
        let mut gvv = 0.0;
        for (qi, wi) in quad.nodes.iter().zip(&quad.weights) {
            for (qj, wj) in quad.nodes.iter().zip(&quad.weights) {
                gvv += wi * wj * model.gamma(qi.dist(qj));
            }
        }
        let (lam_b, mu_b) = oracle_system(&pts, &model, &rhs_b);
        let pred_b: f64 = lam_b.iter().zip(&vals).map(|(l, v)| l * v).sum();
        let var_b: f64 = lam_b.iter().zip(&rhs_b).map(|(l, g)| l * g).sum::<f64>() + mu_b - gvv;
        let got_b = block_krige(&region, &quad, &pts, &vals, &model, n, BlockOptions::default()).unwrap();
        track("block", k as usize, got_b.block_mean, pred_b);
        track("block-var", k as usize, got_b.kriging_variance, var_b);

        // Constant field.
        let c = r.random_range(-5.0..5.0);
        let cv = vec![c; n];
        track("const-point", k as usize, point_krige(target, &pts, &cv, &model, n).unwrap().prediction, c);
        track(
            "const-block",
            k as usize,
            block_krige(&region, &quad, &pts, &cv, &model, n, BlockOptions::default()).unwrap().block_mean,
            c,
        );

        // Exact interpolation without nugget.
        let m0 = random_model(&mut r, true);
        let j = r.random_range(0..n);
        let at = point_krige(pts[j], &pts, &vals, &m0, n).unwrap();
        track("exact", k as usize, at.prediction, vals[j]);
        track("exact-var", k as usize, at.variance, 0.0);
    }
    let elapsed = t.elapsed();
    Outcome {
        pass: failures.is_empty() && within(elapsed, 10),
        detail: format!(
            "100 instances, worst relative error {worst:.2e} (<= 1e-8){}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    }
}

// ---------------------------------------------------------------------------
// 3

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let cases: [(VariogramModel, Option<f64>); 5] = [
        (VariogramModel::matern(0.1, 1.0, 2.0, 1.5), Some(1.5)),
        (VariogramModel::matern(0.2, 2.0, 3.0, 1.0), Some(1.0)),
        (VariogramModel::matern(0.1, 1.0, 2.0, 2.5), None),
        (VariogramModel::exponential(0.05, 1.5, 4.0), None),
        (VariogramModel::spherical(0.3, 1.0, 9.0), None),
    ];
    let mut worst = 0.0f64;
    let mut exact_ok = true;
    for (model, nu) in cases {
        let bins: Vec<LagBin> = (0..15)
            .map(|k| {
                let lag = k as f64 + 0.5;
                LagBin { lag, gamma: model.gamma(lag), pairs: 100 + 10 * k }
            })
            .collect();
        let emp = EmpiricalVariogram { bins, kind: EstimatorKind::Classical, max_lag: 15.0, bin_width: 1.0 };
        let fit = fit_ols(&emp, model.family, nu).unwrap().model;
        let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
        let mut errs = vec![rel(fit.nugget, model.nugget), rel(fit.partial_sill, model.partial_sill), rel(fit.range, model.range)];
        if model.family == Family::Matern {
            errs.push(rel(fit.smoothness, model.smoothness));
        }
        let e = errs.into_iter().fold(0.0, f64::max);
        worst = worst.max(e);
        exact_ok &= e <= 1e-4;
    }

    let truth = VariogramModel::matern(0.0, 1.0, 2.0, 1.5);
    let pts: Vec<Point> = (0..900).map(|i| Point::new((i % 30) as f64, (i / 30) as f64)).collect();
    let mut ranges = Vec::new();
    for rep in 0..5 {
        let field = simulate_unconditional(&pts, &truth, Stream::new(303, rep, Lane::Field)).unwrap();
        let emp = empirical_variogram(&pts, &field.values, EstimatorKind::Classical, default_max_lag(&pts), 15).unwrap();
        ranges.push(fit_ols(&emp, Family::Matern, Some(1.5)).unwrap().model.range);
    }
    let mean_range = mean(&ranges);
    let range_ok = (mean_range / truth.range - 1.0).abs() <= 0.30;
    Outcome {
        pass: exact_ok && range_ok && within(t.elapsed(), 120),
        detail: format!(
            "exact-bin refits worst relative error {worst:.2e} (<= 1e-4); simulated ranges {:?}, mean {mean_range:.3} vs {} (+-30%)",
            ranges.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            truth.range
        ),
    }
}

// ---------------------------------------------------------------------------
// 4

/// Smooth standardized covariate on an `n x n` lattice.
fn smooth_covariate(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (x, y) = ((i % n) as f64, (i / n) as f64);
            (x / 3.0).sin() + (y / 4.0).cos() + 0.05 * x
        })
        .collect();
    let m = mean(&raw);
    let sd = sample_var(&raw).sqrt();
    raw.iter().map(|v| (v - m) / sd).collect()
}

fn sampling_variances(m: usize) -> DVector<f64> {
    DVector::from_fn(m, |i, _| 0.05 + 0.10 * ((i * 7) % 15) as f64 / 14.0)
}

/// `y = X beta + (I - rho W)^-1 v + e`.
fn draw_sar(x: &DMatrix<f64>, beta: &[f64], sigma2: f64, rho: f64, w: &DMatrix<f64>, v_eps: &DVector<f64>, s: Stream) -> (DVector<f64>, DVector<f64>) {
    let m = x.nrows();
    let mut rv = s.with_lane(Lane::RandomEffect).rng();
    let mut re = s.with_lane(Lane::SamplingError).rng();
    let v = normals(&mut rv, m) * sigma2.sqrt();
    let a = DMatrix::<f64>::identity(m, m) - w * rho;
    let u = a.lu().solve(&v).unwrap();
    let theta = x * DVector::from_column_slice(beta) + u;
    let e = normals(&mut re, m).component_mul(&v_eps.map(f64::sqrt));
    (theta.clone() + e, theta)
}

/// Fay-Herriot EBLUP for a given sigma2 by plain normal equations.
fn fh_oracle(y: &DVector<f64>, x: &DMatrix<f64>, v_eps: &DVector<f64>, sigma2: f64) -> Vec<f64> {
    let (m, p) = (x.nrows(), x.ncols());
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for i in 0..m {
        let w = 1.0 / (sigma2 + v_eps[i]);
        for j in 0..p {
            b[j] += w * x[(i, j)] * y[i];
            for k in 0..p {
                a[j][k] += w * x[(i, j)] * x[(i, k)];
            }
        }
    }
    let beta = dense_solve(a, b);
    (0..m)
        .map(|i| {
            let syn: f64 = (0..p).map(|j| x[(i, j)] * beta[j]).sum();
            let g = sigma2 / (sigma2 + v_eps[i]);
            syn + g * (y[i] - syn)
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let (n, reps) = (15usize, 200u64);
    let m = n * n;
    let (beta, sigma2, rho) = ([3.45, 0.61], 0.2, 0.7);
    let w = rook(n);
    let z = smooth_covariate(n);
    let x = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
    let names = vec![INTERCEPT.to_string(), "z".to_string()];
    let v_eps = sampling_variances(m);
    let sar = Structure::new(v_eps.clone(), Some(&w)).unwrap();
    let ind = Structure::new(v_eps.clone(), None).unwrap();
    let mut est: Vec<[f64; 4]> = Vec::new();
    let mut failures = 0;
    let mut fh_err = 0.0f64;
    for r in 0..reps {
        let (y, _) = draw_sar(&x, &beta, sigma2, rho, &w, &v_eps, Stream::new(404, r, Lane::Locations));
        match sar.fit(&y, &x, &names, RandomEffect::Sar) {
            Ok(f) => est.push([f.beta[0], f.beta[1], f.sigma2_v, f.rho]),
            Err(_) => failures += 1,
        }
        if r < 20 {
            let f = ind.fit(&y, &x, &names, RandomEffect::Independent).unwrap();
            let oracle = fh_oracle(&y, &x, &v_eps, f.sigma2_v);
            for (a, b) in f.eblups().iter().zip(&oracle) {
                fh_err = fh_err.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    let avg = |k: usize| est.iter().map(|e| e[k]).sum::<f64>() / est.len() as f64;
    let (b0, b1, s2, rh) = (avg(0), avg(1), avg(2), avg(3));
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let ok = rel(b0, beta[0]) <= 0.10
        && rel(b1, beta[1]) <= 0.10
        && rel(s2, sigma2) <= 0.10
        && (rh - rho).abs() <= 0.10
        && fh_err <= 1e-8
        && failures == 0;
    Outcome {
        pass: ok && within(t.elapsed(), 600),
        detail: format!(
            "{} fits ({failures} failed): mean beta0 {b0:.4}, beta1 {b1:.4}, sigma2_v {s2:.4}, rho {rh:.4}; FH oracle max error {fh_err:.2e}",
            est.len()
        ),
    }
}

// ---------------------------------------------------------------------------
// 5

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let (side, nd, nt, trajectories, n_bins) = (20.0, 100usize, 150usize, 1000u64, 12usize);
    let truth = VariogramModel::matern(0.0, 0.5, 3.0, 1.5);
    let mut r = Stream::new(505, 0, Lane::Locations).rng();
    let data_pts: Vec<Point> = (0..nd).map(|_| Point::new(r.random_range(0.0..side), r.random_range(0.0..side))).collect();
    let field = simulate_unconditional(&data_pts, &truth, Stream::new(505, 0, Lane::Field)).unwrap();
    let raw: Vec<f64> = field.values.iter().map(|g| (2.0 + g).exp()).collect();
    let logs: Vec<f64> = raw.iter().map(|v| v.ln()).collect();

    // Exactness at the data locations with the nugget-free model.
    let at_data = simulate_conditional(&data_pts, &data_pts, &logs, &truth, 15, Stream::new(505, 1, Lane::Field)).unwrap();
    let exact_err = at_data
        .values
        .iter()
        .zip(&raw)
        .map(|(g, v)| (g.exp() - v).abs() / v)
        .fold(0.0, f64::max);

    // Envelope from trajectories under the fitted log-scale model.
    let max_lag = default_max_lag(&data_pts);
    let emp = empirical_variogram(&data_pts, &logs, EstimatorKind::Classical, max_lag, n_bins).unwrap();
    let model = fit_ols(&emp, Family::Matern, None).unwrap().model;
    let data = fill_bins(&emp.bins, max_lag, n_bins);
    let mut sims = Vec::new();
    for k in 0..trajectories {
        let s = Stream::new(505, k + 2, Lane::Locations);
        let mut rl = s.rng();
        let targets: Vec<Point> = (0..nt).map(|_| Point::new(rl.random_range(0.0..side), rl.random_range(0.0..side))).collect();
        let sim = simulate_conditional(&targets, &data_pts, &logs, &model, 15, s.with_lane(Lane::Field)).unwrap();
        let e = empirical_variogram(&targets, &sim.values, EstimatorKind::Classical, max_lag, n_bins).unwrap();
        sims.push(fill_bins(&e.bins, max_lag, n_bins));
    }
    let rows = variogram_envelope(&data, &sims, max_lag, 0.95);
    let share = envelope_share(&rows);
    Outcome {
        pass: exact_err <= 1e-8 && share >= 0.90 && within(t.elapsed(), 300),
        detail: format!(
            "max relative deviation at data {exact_err:.2e} (<= 1e-8); {trajectories} trajectories, envelope share {share:.3} (>= 0.90)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 6

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let (outer, b, q) = (200u64, 500usize, 8usize);
    let (beta, sigma2, rho) = ([3.45, 0.61], 0.2, 0.7);
    let cfg = ScenarioConfig { grid_per_cell: 2, grid_margin: 0.0, ..Default::default() };
    let sc = make_scenario(&cfg, 606).unwrap();
    let (pts, vals) = (sc.grid_points.clone(), sc.grid_values.clone());
    let max_lag = default_max_lag(&pts);
    let raw_emp = empirical_variogram(&pts, &vals, EstimatorKind::Classical, max_lag, 15).unwrap();
    let bk = fit_ols(&raw_emp, Family::Matern, None).unwrap().model;
    let logs: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
    let log_emp = empirical_variogram(&pts, &logs, EstimatorKind::Classical, max_lag, 15).unwrap();
    let sim_model = fit_ols(&log_emp, Family::Matern, None).unwrap().model;
    let density = density_for_nodes(&sc.regions, 4);
    let blocks: Vec<f64> = upscale_all(&sc.regions, &pts, &vals, &bk, q, density, BlockOptions::default())
        .into_iter()
        .map(|b| b.unwrap().block_mean)
        .collect();
    let simulator = CovariateSimulator::new(
        sc.regions.clone(),
        density,
        pts,
        vals,
        sim_model,
        VariogramScale::Log,
        bk,
        q,
        100,
        SimulateOver::Region,
        0.0,
        BlockOptions::default(),
    )
    .unwrap();

    let m = blocks.len();
    let (bm, bsd) = (mean(&blocks), sample_var(&blocks).sqrt());
    let column = "grid_block_mean".to_string();
    let x = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { (blocks[i] - bm) / bsd });
    let w = rook(cfg.nx);
    let v_eps = sampling_variances(m);
    let structure = Structure::new(v_eps.clone(), Some(&w)).unwrap();
    let template = Design {
        region_ids: sc.regions.ids().map(String::from).collect(),
        rows: (0..m).collect(),
        y: DVector::zeros(m),
        x: x.clone(),
        v_eps: v_eps.clone(),
        names: vec![INTERCEPT.into(), column.clone()],
        scalings: vec![ColumnScaling { name: column.clone(), mean: bm, sd: bsd, standardized: true }],
    };

    let (mut covered, mut done, mut failed) = (0usize, 0usize, 0usize);
    let mut boot_mse = 0.0;
    let mut sq_err = 0.0;
    for r in 0..outer {
        let (y, theta) = draw_sar(&x, &beta, sigma2, rho, &w, &v_eps, Stream::new(606, r, Lane::Scenario));
        let design = Design { y: y.clone(), ..template.clone() };
        let outcome = (|| {
            let fit = structure.fit(&y, &x, &design.names, RandomEffect::Sar).ok()?;
            let inputs = BootstrapInputs {
                design: &design,
                w: Some(&w),
                effect: RandomEffect::Sar,
                covariate: Some(CovariateRounds { simulator: &simulator, column: column.clone(), envelope_bins: None }),
            };
            let run = run_bootstrap(&fit, &inputs, b, 606_000 + r).ok()?;
            let summary = summarize_se_ci(&run, &fit, 0.95).ok()?;
            let slope = summary.iter().find(|s| s.parameter == column)?.clone();
            let mse = mse_eblup(&run).ok()?;
            Some((fit.eblups(), slope, mse))
        })();
        match outcome {
            Some((eblups, slope, mse)) => {
                done += 1;
                covered += usize::from(slope.ci_lower <= beta[1] && beta[1] <= slope.ci_upper);
                boot_mse += mean(&mse);
                sq_err += eblups.iter().zip(theta.iter()).map(|(e, th)| (e - th).powi(2)).sum::<f64>() / m as f64;
            }
            None => failed += 1,
        }
    }
    let coverage = covered as f64 / outer as f64;
    let ratio = boot_mse / sq_err;
    Outcome {
        pass: (0.92..=0.98).contains(&coverage) && (0.75..=1.25).contains(&ratio) && within(t.elapsed(), 7200),
        detail: format!(
            "{outer} outer reps x B={b} ({failed} failed): slope CI coverage {coverage:.3} (0.92-0.98); bootstrap/empirical MSE {ratio:.3} (0.75-1.25); {done} used"
        ),
    }
}

// ---------------------------------------------------------------------------
// 7

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let (n, reps, b) = (7usize, 200u64, 199usize);
    let m = n * n;
    let (beta0, sigma2, rho) = (3.45, 0.2, 0.7);
    let w = rook(n);
    // Fixed white-noise covariate. A spatially smooth one is confounded with
    // the SAR effect, which then absorbs the signal under the null fit.
    let raw: Vec<f64> = normals(&mut Stream::new(77, 0, Lane::Auxiliary).rng(), m).iter().copied().collect();
    let (zm, zs) = (mean(&raw), sample_var(&raw).sqrt());
    let z: Vec<f64> = raw.iter().map(|v| (v - zm) / zs).collect();
    let x = DMatrix::from_fn(m, 2, |i, j| if j == 0 { 1.0 } else { z[i] });
    let v_eps = sampling_variances(m);

    // SD of the GLS slope under the true covariance.
    let a = DMatrix::<f64>::identity(m, m) - &w * rho;
    let v = (a.transpose() * &a).try_inverse().unwrap() * sigma2 + DMatrix::from_diagonal(&v_eps);
    let info = x.transpose() * v.try_inverse().unwrap() * &x;
    let sd = info.try_inverse().unwrap()[(1, 1)].sqrt();
    let parameter = TestedParameter::Coefficient("z".into());

    let run = |slope: f64, seed: u64| -> (usize, usize, usize) {
        let (mut reject, mut extreme, mut failed) = (0, 0, 0);
        for r in 0..reps {
            let (y, _) = draw_sar(&x, &[beta0, slope], sigma2, rho, &w, &v_eps, Stream::new(seed, r, Lane::Scenario));
            let design = Design {
                region_ids: (0..m).map(|i| format!("A{i:02}")).collect(),
                rows: (0..m).collect(),
                y,
                x: x.clone(),
                v_eps: v_eps.clone(),
                names: vec![INTERCEPT.into(), "z".into()],
                scalings: vec![ColumnScaling { name: "z".into(), mean: 0.0, sd: 1.0, standardized: false }],
            };
            let inputs = BootstrapInputs { design: &design, w: Some(&w), effect: RandomEffect::Sar, covariate: None };
            match run_lr_test(&inputs, &parameter, b, seed * 1000 + r, LrCovariateSource::Observed) {
                Ok(res) => {
                    reject += usize::from(res.p_value <= 0.05);
                    extreme += usize::from((res.p_value - 1.0 / (b + 1) as f64).abs() < 1e-12);
                }
                Err(_) => failed += 1,
            }
        }
        (reject, extreme, failed)
    };
    let (rej0, _, fail0) = run(0.0, 707);
    let (_, ext1, fail1) = run(5.0 * sd, 708);
    let size = rej0 as f64 / reps as f64;
    let power = ext1 as f64 / reps as f64;
    Outcome {
        pass: (0.02..=0.10).contains(&size) && power >= 0.95 && within(t.elapsed(), 3600),
        detail: format!(
            "B={b}, {reps} reps each: null rejection rate {size:.3} (0.02-0.10, {fail0} failed); p = 1/(B+1) under 5-SD alternative in {power:.3} (>= 0.95, {fail1} failed)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 8 and 10

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    let text = format!(
        "regions = \"regions.geojson\"\nsurvey = \"survey.csv\"\ncensus = \"census.csv\"\ngrid = \"grid.csv\"\nscenario_grid_per_cell = 2\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

/// Writes a synthetic scenario into `dir` and returns the loaded config.
fn scenario_inputs(dir: &Path, seed: u64, extra: &str) -> PipelineConfig {
    let path = write_config(dir, extra);
    let mut cfg = PipelineConfig::load(&path).unwrap();
    cfg.seed = seed;
    let files = pipeline::run(&cfg, Command::Simulate).unwrap();
    files.write_all(dir).unwrap();
    cfg
}

fn csv_rows(bytes: &[u8]) -> Vec<BTreeMap<String, String>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let headers = rd.headers().unwrap().clone();
    rd.records()
        .map(|r| headers.iter().zip(r.unwrap().iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario_inputs(
        dir.path(),
        808,
        "random_effects = [\"sar\"]\nbootstrap_b = 200\nn_sim_points = 300\n",
    );
    let out = pipeline::run(&cfg, Command::Diagnose).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(out.get("diagnostics/summary_sar.json").unwrap()).unwrap();
    let red = summary["cv_reduction"].as_f64().unwrap();
    Outcome {
        pass: red >= 0.10 && within(t.elapsed(), 600),
        detail: format!(
            "{}x{} scenario, f = {}: mean CV direct {:.4}, model {:.4}, reduction {red:.3} (>= 0.10)",
            cfg.scenario_nx,
            cfg.scenario_ny,
            cfg.scenario_sampling_fraction,
            summary["mean_cv_direct"].as_f64().unwrap(),
            summary["mean_cv_model"].as_f64().unwrap()
        ),
    }
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in [1001u64, 1002, 1003] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = scenario_inputs(
            dir.path(),
            seed,
            "random_effects = [\"independent\", \"sar\"]\nbootstrap_b = 100\nn_sim_points = 200\n",
        );
        let out = pipeline::run(&cfg, Command::Diagnose).unwrap();
        let regions = lattice_regions(cfg.scenario_nx, cfg.scenario_ny, cfg.scenario_cell_size, &[]).unwrap();
        for effect in ["independent", "sar"] {
            let eff = csv_rows(out.get(&format!("diagnostics/efficiency_{effect}.csv")).unwrap());
            let groups = csv_rows(out.get(&format!("diagnostics/groups_{effect}.csv")).unwrap());
            let (mut exact, mut contained) = (true, true);
            for g in &groups {
                let name = &g["group"];
                let sum: f64 = eff
                    .iter()
                    .filter(|r| regions.get(&r["region_id"]).and_then(|x| x.group.as_ref()) == Some(name))
                    .map(|r| num(r, "tau_model"))
                    .sum();
                exact &= sum == num(g, "tau_hat");
                contained &= num(g, "ci_lower") <= num(g, "tau_hat") && num(g, "tau_hat") <= num(g, "ci_upper");
            }
            ok &= exact && contained && !groups.is_empty();
            notes.push(format!("seed {seed} {effect}: {} groups, sums exact {exact}, CIs contain estimate {contained}", groups.len()));
        }
    }
    Outcome { pass: ok && within(t.elapsed(), 600), detail: notes.join("; ") }
}

// ---------------------------------------------------------------------------
// 9

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let common = "scenario_nx = 4\nscenario_ny = 4\nrandom_effects = [\"independent\", \"sar\"]\nbootstrap_b = 20\n\
                  lr_b = 19\nn_sim_points = 60\nq = 8\nneighborhood = \"cv\"\nq_candidates = [4, 8, 12]\nsimulate_rounds = 3\n";
    scenario_inputs(dir.path(), 909, common);
    let scenario_cfg = write_config(dir.path(), common);
    let rounds_dir = dir.path().join("rounds");
    std::fs::create_dir(&rounds_dir).unwrap();
    for f in ["regions.geojson", "survey.csv", "census.csv", "grid.csv"] {
        std::fs::copy(dir.path().join(f), rounds_dir.join(f)).unwrap();
    }
    let rounds_cfg = write_config(&rounds_dir, &format!("{common}simulate_mode = \"rounds\"\n"));

    let runs: [(&str, Cmd, &Path); 8] = [
        ("direct", Cmd::Direct, &scenario_cfg),
        ("upscale", Cmd::Upscale, &scenario_cfg),
        ("fit", Cmd::Fit, &scenario_cfg),
        ("bootstrap", Cmd::Bootstrap, &scenario_cfg),
        ("test", Cmd::Test, &scenario_cfg),
        ("diagnose", Cmd::Diagnose, &scenario_cfg),
        ("simulate-scenario", Cmd::Simulate, &scenario_cfg),
        ("simulate-rounds", Cmd::Simulate, &rounds_cfg),
    ];
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (label, cmd, cfg) in runs {
        let mut trees = Vec::new();
        for workers in [1usize, 4, 8, 1] {
            let out = dir.path().join(format!("out-{label}-{workers}-{}", trees.len()));
            let cli = Cli {
                config: Some(cfg.to_path_buf()),
                seed: Some(9),
                workers: Some(workers),
                out: Some(out.clone()),
                crs_note: None,
                command: cmd,
            };
            execute(&cli).unwrap();
            trees.push(read_tree(&out));
        }
        files += trees[0].len();
        if trees[0].is_empty() || trees.iter().any(|t| *t != trees[0]) {
            mismatches.push(label);
        }
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: format!(
            "8 subcommand runs x workers 1/4/8/1, {files} files compared{}",
            if mismatches.is_empty() { String::new() } else { format!("; differing: {}", mismatches.join(", ")) }
        ),
    }
}
