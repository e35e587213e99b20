//! Oracle and property checks shared by the integration tests and the
//! acceptance run. Each check returns `Err` with a description on failure.

#![allow(dead_code)]

use std::path::Path;
use std::process::Command;

use approx::relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dyncov::coefficients::{cv_select_k, fit_curves, fit_in_sample, residuals, BandwidthRule, CvPlan};
use dyncov::factor_dynamics::{conditional_covariance, conditional_mean, select_h2};
use dyncov::garch::{forecast_sigma2, nll_eval, variance_recursion, GarchFit, GarchParams, InitMode};
use dyncov::index::{fit_anchor_curves, index_quadratic};
use dyncov::linalg::min_eigenvalue;
use dyncov::panel::{FactorPanel, ReturnPanel};
use dyncov::portfolio::{assemble_covariance, markowitz_weights, ConditionalCovariance};
use dyncov::smoothing::{solve_wls, Bandwidth, WlsProblem};

pub type Check = fn() -> Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1.0)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

fn epan(u: f64) -> f64 {
    if u.abs() < 1.0 {
        0.75 * (1.0 - u * u)
    } else {
        0.0
    }
}

/// Dense `(X'WX)^-1 X'WY` through an explicit inverse.
fn normal_equations(x: &DMatrix<f64>, y: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let wm = DMatrix::from_diagonal(&DVector::from_column_slice(w));
    let gram = x.transpose() * &wm * x;
    gram.try_inverse().expect("oracle Gram is singular") * x.transpose() * wm * y
}

/// Noiseless panel with `g(z) = g0 + g1 z` and `Phi(z) = P0 + P1 z`.
pub fn affine_panel(n: usize, p: usize, q: usize, seed: u64) -> (ReturnPanel, FactorPanel, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, n, q, -1.0, 1.0);
    let beta = DVector::from_fn(q, |_, _| rng.random_range(0.2..1.0)).normalize();
    let g0 = uniform(&mut rng, p, 1, -1.0, 1.0);
    let g1 = uniform(&mut rng, p, 1, -1.0, 1.0);
    let p0 = uniform(&mut rng, p, q, -1.0, 1.0);
    let p1 = uniform(&mut rng, p, q, -1.0, 1.0);
    let mut y = DMatrix::zeros(n, p);
    for t in 1..n {
        let z = x.row(t - 1).transpose().dot(&beta);
        for k in 0..p {
            let mut v = g0[k] + g1[k] * z;
            for j in 0..q {
                v += (p0[(k, j)] + p1[(k, j)] * z) * x[(t, j)];
            }
            y[(t, k)] = v;
        }
    }
    (ReturnPanel::new(y).unwrap(), FactorPanel::new(x).unwrap(), beta)
}

/// Affine panel plus uniform noise.
pub fn noisy_panel(n: usize, p: usize, q: usize, seed: u64) -> (ReturnPanel, FactorPanel, DVector<f64>) {
    let (r, f, b) = affine_panel(n, p, q, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let y = r.data() + uniform(&mut rng, n, p, -0.3, 0.3);
    (ReturnPanel::new(y).unwrap(), f, b)
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

// ---------------------------------------------------------------- oracles

pub fn wls_matches_normal_equations() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let n = rng.random_range(12..40);
        let d = rng.random_range(1..6);
        let r = rng.random_range(1..4);
        let x = uniform(&mut rng, n, d, -2.0, 2.0);
        let y = uniform(&mut rng, n, r, -2.0, 2.0);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let sol = solve_wls(&WlsProblem { design: x.clone(), response: y.clone(), weights: w.clone(), ridge: 0.0 })
            .map_err(|e| format!("case {case}: {e}"))?;
        let oracle = normal_equations(&x, &y, &w);
        let err = rel_err(&sol.coefficients, &oracle);
        ensure(err <= 1e-8, || format!("case {case}: relative error {err:e}"))?;
        let ols = solve_wls(&WlsProblem { design: x.clone(), response: y.clone(), weights: vec![1.0; n], ridge: 0.0 })
            .map_err(|e| e.to_string())?;
        let err = rel_err(&ols.coefficients, &normal_equations(&x, &y, &vec![1.0; n]));
        ensure(err <= 1e-8, || format!("case {case}: OLS relative error {err:e}"))?;
    }
    Ok(())
}

/// Local-linear fit at one query against `(I_q, 0)(D'WD)^-1 D'Wy` with the
/// design `D` and weights built here from scratch.
pub fn local_linear_matches_direct_formula() -> Result<(), String> {
    let (n, p, q) = (12, 2, 2);
    for seed in 0..20 {
        let (returns, factors, beta) = noisy_panel(n, p, q, 100 + seed);
        let x = factors.data();
        let y = returns.data();
        let z: Vec<f64> = (0..n).map(|t| x.row(t).transpose().dot(&beta)).collect();
        let u = 0.5 * (z[2] + z[5]);
        let h = 3.0;
        let rows = n - 1;
        let mut design = DMatrix::zeros(rows, 2 * q + 2);
        let mut resp = DMatrix::zeros(rows, p);
        let mut w = vec![0.0; rows];
        for r in 0..rows {
            let dz = z[r] - u;
            w[r] = epan(dz / h) / h;
            design[(r, 0)] = 1.0;
            design[(r, 1)] = dz;
            for j in 0..q {
                design[(r, 2 + j)] = x[(r + 1, j)];
                design[(r, 2 + q + j)] = dz * x[(r + 1, j)];
            }
            for k in 0..p {
                resp[(r, k)] = y[(r + 1, k)];
            }
        }
        let oracle = normal_equations(&design, &resp, &w);
        let field = fit_curves(&returns, &factors, &beta, BandwidthRule::Fixed(Bandwidth::new(h).unwrap()), &[u])
            .map_err(|e| e.to_string())?;
        for k in 0..p {
            let gd = (field.g[0][k] - oracle[(0, k)]).abs();
            ensure(gd <= 1e-9, || format!("seed {seed}: g differs by {gd:e}"))?;
            let dd = (field.g_deriv[0][k] - oracle[(1, k)]).abs();
            ensure(dd <= 1e-9, || format!("seed {seed}: g' differs by {dd:e}"))?;
            for j in 0..q {
                let pd = (field.phi[0][(k, j)] - oracle[(2 + j, k)]).abs();
                ensure(pd <= 1e-9, || format!("seed {seed}: phi differs by {pd:e}"))?;
            }
        }
    }
    Ok(())
}

/// Moment form of the conditional factor covariance against the weighted
/// matrix form `tr(W)^-2 X'(tr(W) W - W11'W) X`.
pub fn factor_covariance_dual_forms_agree() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for case in 0..100 {
        let n = rng.random_range(10..60);
        let q = rng.random_range(1..5);
        let x = uniform(&mut rng, n, q, -1.0, 1.0);
        let factors = FactorPanel::new(x.clone()).unwrap();
        let u = DVector::from_fn(q, |_, _| rng.random_range(-0.5..0.5));
        let h = rng.random_range(1.0..3.0);
        let est = conditional_covariance(&factors, &u, Bandwidth::new(h).unwrap()).map_err(|e| e.to_string())?;
        let moment = &est.second_moment - &est.mean * est.mean.transpose();

        let rows = n - 1;
        let w = DVector::from_fn(rows, |t, _| epan((x.row(t).transpose() - &u).norm() / h));
        let tr = w.sum();
        let wm = DMatrix::from_diagonal(&w);
        let xs = x.rows(1, rows).into_owned();
        let ones = DVector::from_element(rows, 1.0);
        let inner = &wm * tr - &wm * &ones * ones.transpose() * &wm;
        let matrix = xs.transpose() * inner * &xs / (tr * tr);
        let err = (&moment - &matrix).amax();
        ensure(err <= 1e-10, || format!("case {case}: forms differ by {err:e}"))?;
    }
    Ok(())
}

/// Markowitz weights against the KKT system of
/// `min w'Sw` subject to `1'w = 1`, `mu'w = delta`.
pub fn markowitz_matches_kkt() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..100 {
        let p = rng.random_range(2..20);
        let a = uniform(&mut rng, p, p, -1.0, 1.0);
        let sigma = &a * a.transpose() + DMatrix::identity(p, p) * 0.1;
        let mu = DVector::from_fn(p, |_, _| rng.random_range(-1.0..2.0));
        let delta = rng.random_range(0.2..1.5);
        let cov = ConditionalCovariance::from_matrix(sigma.clone(), 0).map_err(|e| e.to_string())?;
        let w = markowitz_weights(&cov, &mu, delta).map_err(|e| format!("case {case}: {e}"))?.weights;

        let mut kkt = DMatrix::zeros(p + 2, p + 2);
        kkt.view_mut((0, 0), (p, p)).copy_from(&(&sigma * 2.0));
        for i in 0..p {
            kkt[(i, p)] = 1.0;
            kkt[(p, i)] = 1.0;
            kkt[(i, p + 1)] = mu[i];
            kkt[(p + 1, i)] = mu[i];
        }
        let mut rhs = DVector::zeros(p + 2);
        rhs[p] = 1.0;
        rhs[p + 1] = delta;
        let sol = kkt.lu().solve(&rhs).ok_or("singular KKT system")?;
        let oracle = sol.rows(0, p).into_owned();
        let err = (&w - &oracle).amax() / oracle.amax().max(1.0);
        ensure(err <= 1e-8, || format!("case {case}: weights differ by {err:e}"))?;
        let budget = (w.sum() - 1.0).abs();
        let target = (w.dot(&mu) - delta).abs();
        ensure(budget <= 1e-8 && target <= 1e-8, || {
            format!("case {case}: constraint residuals {budget:e}, {target:e}")
        })?;
    }
    Ok(())
}

pub fn garch_matches_hand_recursion() -> Result<(), String> {
    let theta = GarchParams::new(0.5, vec![0.1], vec![0.1]).map_err(|e| e.to_string())?;
    let r = [1.0, 2.0, 0.5];
    let first = variance_recursion(&theta, &r, InitMode::FirstResidual).map_err(|e| e.to_string())?;
    // seed max(1, 0.5) = 1; 0.5 + 0.1*1 + 0.1*1; 0.5 + 0.1*4 + 0.1*0.7
    let hand_first = [1.0, 0.7, 0.97];
    let alpha0 = variance_recursion(&theta, &r, InitMode::Alpha0).map_err(|e| e.to_string())?;
    // pre-sample terms equal 0.5: 0.5 + 0.05 + 0.05; 0.5 + 0.1 + 0.06; 0.5 + 0.4 + 0.066
    let hand_alpha0 = [0.6, 0.66, 0.966];
    for t in 0..3 {
        ensure((first[t] - hand_first[t]).abs() <= 1e-14, || format!("first_residual step {t}: {}", first[t]))?;
        ensure((alpha0[t] - hand_alpha0[t]).abs() <= 1e-14, || format!("alpha0 step {t}: {}", alpha0[t]))?;
    }
    let nll = nll_eval(&theta, &r, InitMode::FirstResidual).map_err(|e| e.to_string())?;
    let hand = (4.0 / 0.7 + 0.7f64.ln() + 0.25 / 0.97 + 0.97f64.ln()) / 4.0;
    ensure((nll - hand).abs() <= 1e-13, || format!("nll {nll} vs hand {hand}"))?;
    let fit = GarchFit {
        params: theta.clone(),
        nll,
        sigma2_path: first.clone(),
        converged: true,
        init_mode: InitMode::FirstResidual,
        at_boundary: false,
        short_sample: true,
    };
    let next = forecast_sigma2(&fit, &r).map_err(|e| e.to_string())?;
    let hand_next = 0.5 + 0.1 * 0.25 + 0.1 * 0.97;
    ensure((next - hand_next).abs() <= 1e-14, || format!("forecast {next} vs {hand_next}"))
}

/// Neighbour-count CV scores against refitting from scratch on each
/// truncated sample through the public curve fitter.
pub fn cv_k_matches_brute_force() -> Result<(), String> {
    let (n, p, q) = (40, 2, 2);
    for seed in 0..3 {
        let (returns, factors, beta) = noisy_panel(n, p, q, 200 + seed);
        let plan = CvPlan { candidate_k: vec![8, 12, 20], lookback_m: 10 };
        let out = cv_select_k(&returns, &factors, &beta, &plan).map_err(|e| e.to_string())?;
        let x = factors.data();
        let y = returns.data();
        for (i, &k) in plan.candidate_k.iter().enumerate() {
            let mut total = 0.0;
            // predict observation t + 1 from curves fitted on observations 0..=t
            for t in n - 2 - plan.lookback_m..n - 1 {
                let u = x.row(t).transpose().dot(&beta);
                let f = fit_curves(
                    &returns.slice(0, t + 1),
                    &factors.slice(0, t + 1),
                    &beta,
                    BandwidthRule::NearestNeighbours(k),
                    &[u],
                )
                .map_err(|e| format!("k {k}, fold {t}: {e}"))?;
                let xt = x.row(t + 1).transpose();
                let pred = &f.g[0] + &f.phi[0] * xt;
                let err = y.row(t + 1).transpose() - pred;
                total += err.norm();
            }
            let score = out.scores[i].ok_or_else(|| format!("k {k}: no score"))?;
            ensure(relative_eq!(score, total, max_relative = 1e-10), || {
                format!("seed {seed}, k {k}: score {score} vs brute force {total}")
            })?;
        }
        let best = plan.candidate_k[(0..3)
            .min_by(|&a, &b| out.scores[a].unwrap().total_cmp(&out.scores[b].unwrap()))
            .unwrap()];
        ensure(out.selected_k == best, || format!("selected {} vs {best}", out.selected_k))?;
    }
    Ok(())
}

pub fn cv_h2_matches_brute_force() -> Result<(), String> {
    let (n, q, m) = (30, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = uniform(&mut rng, n, q, -1.0, 1.0);
    let factors = FactorPanel::new(x.clone()).unwrap();
    let candidates: Vec<Bandwidth> = [0.15, 0.4, 0.8, 1.6].iter().map(|&h| Bandwidth::new(h).unwrap()).collect();
    let out = select_h2(&factors, &candidates, m).map_err(|e| e.to_string())?;
    for (i, h) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for s in n - 1 - m..n {
            let window = factors.slice(0, s);
            let u = x.row(s - 1).transpose();
            let pred = match conditional_mean(&window, &u, *h) {
                Ok(v) => v,
                Err(_) => DVector::from_fn(q, |j, _| x.view((1, j), (s - 1, 1)).mean()),
            };
            total += (x.row(s).transpose() - pred).norm();
        }
        ensure(relative_eq!(out.scores[i], total, max_relative = 1e-10), || {
            format!("h {}: score {} vs brute force {total}", h.value(), out.scores[i])
        })?;
    }
    Ok(())
}

/// Step 1 on a tiny panel: every anchor fit equals its own dense WLS solve.
pub fn index_step1_matches_per_anchor_wls() -> Result<(), String> {
    let (n, p, q) = (8, 2, 2);
    let (returns, factors, _) = noisy_panel(n, p, q, 300);
    let beta0 = DVector::from_vec(vec![0.6, 0.8]);
    let x = factors.data();
    let y = returns.data();
    let z: Vec<f64> = (0..n).map(|t| x.row(t).transpose().dot(&beta0)).collect();
    let h = 4.0;
    let anchors = fit_anchor_curves(&returns, &factors, &beta0, Bandwidth::new(h).unwrap()).map_err(|e| e.to_string())?;
    let rows = n - 1;
    for (j, anchor) in anchors.iter().enumerate() {
        let a = anchor.as_ref().ok_or_else(|| format!("anchor {j} missing"))?;
        let mut design = DMatrix::zeros(rows, 2 * q + 2);
        let mut w = vec![0.0; rows];
        for r in 0..rows {
            let dz = z[r] - z[j];
            w[r] = epan(dz / h) / h;
            design[(r, 0)] = 1.0;
            design[(r, 1)] = dz;
            for l in 0..q {
                design[(r, 2 + l)] = x[(r + 1, l)];
                design[(r, 2 + q + l)] = dz * x[(r + 1, l)];
            }
        }
        let resp = y.rows(1, rows).into_owned();
        let oracle = normal_equations(&design, &resp, &w);
        for k in 0..p {
            let mut diffs = vec![(a.g[k] - oracle[(0, k)]).abs(), (a.g_deriv[k] - oracle[(1, k)]).abs()];
            for l in 0..q {
                diffs.push((a.phi[(k, l)] - oracle[(2 + l, k)]).abs());
                diffs.push((a.phi_deriv[(k, l)] - oracle[(2 + q + l, k)]).abs());
            }
            let worst = diffs.iter().copied().fold(0.0, f64::max);
            ensure(worst <= 1e-9, || format!("anchor {j}, asset {k}: differs by {worst:e}"))?;
        }
    }
    Ok(())
}

/// Step 2 on a tiny panel: the quadratic reproduces the double-sum
/// objective and its minimizer beats every point of a surrounding grid.
pub fn index_step2_matches_direct_objective() -> Result<(), String> {
    let (n, p, q) = (8, 2, 2);
    let (returns, factors, _) = noisy_panel(n, p, q, 301);
    let beta0 = DVector::from_vec(vec![0.6, 0.8]);
    let h = Bandwidth::new(4.0).unwrap();
    let anchors = fit_anchor_curves(&returns, &factors, &beta0, h).map_err(|e| e.to_string())?;
    let quad = index_quadratic(&returns, &factors, &beta0, h, &anchors).map_err(|e| e.to_string())?;
    let x = factors.data();
    let y = returns.data();
    let z: Vec<f64> = (0..n).map(|t| x.row(t).transpose().dot(&beta0)).collect();
    let rows = n - 1;
    let direct = |b: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for (j, a) in anchors.iter().enumerate() {
            let a = a.as_ref().unwrap();
            for i in 0..rows {
                let w = epan((z[i] - z[j]) / 4.0) / 4.0;
                let xi = x.row(i + 1).transpose();
                let shift = (x.row(i) - x.row(j)).transpose().dot(b);
                let fitted = &a.g + &a.phi * &xi + (&a.g_deriv + &a.phi_deriv * &xi) * shift;
                total += w * (y.row(i + 1).transpose() - fitted).norm_squared();
            }
        }
        total
    };
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    for _ in 0..5 {
        let b = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
        let (v, d) = (quad.value(&b), direct(&b));
        ensure(relative_eq!(v, d, max_relative = 1e-10), || format!("Q {v} vs direct {d}"))?;
    }
    let bmin = quad.minimizer().map_err(|e| e.to_string())?;
    let explicit = quad.hessian.clone().try_inverse().ok_or("singular Hessian")? * &quad.linear;
    let gap = (&bmin - &explicit).amax() / explicit.amax().max(1.0);
    ensure(gap <= 1e-9, || format!("minimizer differs from H^-1 r by {gap:e}"))?;
    let best = direct(&bmin);
    for da in [-1e-3, 0.0, 1e-3] {
        for db in [-1e-3, 0.0, 1e-3] {
            let b = &bmin + DVector::from_vec(vec![da, db]);
            ensure(direct(&b) >= best - 1e-9 * best.abs().max(1.0), || {
                format!("grid point ({da}, {db}) improves on the minimizer")
            })?;
        }
    }
    Ok(())
}

pub const ORACLES: &[(&str, Check)] = &[
    ("wls_normal_equations", wls_matches_normal_equations),
    ("local_linear_direct_formula", local_linear_matches_direct_formula),
    ("factor_covariance_dual_forms", factor_covariance_dual_forms_agree),
    ("markowitz_kkt", markowitz_matches_kkt),
    ("garch_hand_recursion", garch_matches_hand_recursion),
    ("cv_k_brute_force", cv_k_matches_brute_force),
    ("cv_h2_brute_force", cv_h2_matches_brute_force),
    ("index_step1_per_anchor", index_step1_matches_per_anchor_wls),
    ("index_step2_direct_objective", index_step2_matches_direct_objective),
];

// ------------------------------------------------------------- properties

pub fn assembled_covariance_symmetric_psd() -> Result<(), String> {
    runner(1000)
        .run(&(1usize..10, 1usize..5, any::<u64>()), |(p, q, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let phi = uniform(&mut rng, p, q, -3.0, 3.0);
            let a = uniform(&mut rng, q, q, -1.0, 1.0);
            let sigma_x = &a * a.transpose();
            let idio = DVector::from_fn(p, |_, _| rng.random_range(1e-4..2.0));
            let cov = assemble_covariance(&phi, &sigma_x, &idio).unwrap();
            let m = &cov.matrix;
            prop_assert!((m - m.transpose()).amax() <= 1e-12);
            let scale = m.amax().max(1.0);
            prop_assert!(min_eigenvalue(m) >= -1e-10 * scale);
            let mut parts = cov.factor_part.clone();
            for i in 0..p {
                parts[(i, i)] += cov.idio_part[i];
            }
            prop_assert_eq!(&parts, m);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn markowitz_scale_invariant() -> Result<(), String> {
    runner(100)
        .run(&(2usize..15, 0.01f64..100.0, any::<u64>()), |(p, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = uniform(&mut rng, p, p, -1.0, 1.0);
            let sigma = &a * a.transpose() + DMatrix::identity(p, p) * 0.05;
            let mu = DVector::from_fn(p, |_, _| rng.random_range(-1.0..2.0));
            let base = markowitz_weights(&ConditionalCovariance::from_matrix(sigma.clone(), 0).unwrap(), &mu, 1.0).unwrap();
            let scaled = markowitz_weights(&ConditionalCovariance::from_matrix(sigma * c, 0).unwrap(), &mu, 1.0).unwrap();
            let err = (&scaled.weights - &base.weights).amax() / base.weights.amax().max(1.0);
            prop_assert!(err <= 1e-8, "relative change {:e}", err);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn local_linear_exact_on_affine_data() -> Result<(), String> {
    runner(30)
        .run(&(60usize..150, 1usize..4, 1usize..4, any::<u64>()), |(n, p, q, seed)| {
            let (r, f, b) = affine_panel(n, p, q, seed);
            let k = (n / 4).max(2 * q + 6);
            let field = fit_in_sample(&r, &f, &b, BandwidthRule::NearestNeighbours(k)).unwrap();
            let res = residuals(&r, &f, &b, &field).unwrap();
            prop_assert!(res.amax() <= 1e-8, "max residual {:e}", res.amax());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn fit_curves_permutation_equivariant() -> Result<(), String> {
    runner(20)
        .run(&(30usize..80, 2usize..6, any::<u64>()), |(n, p, seed)| {
            let (r, f, b) = noisy_panel(n, p, 2, seed);
            let mut order: Vec<usize> = (0..p).collect();
            order.rotate_left(1);
            order.swap(0, p - 1);
            let rule = BandwidthRule::NearestNeighbours(n / 3);
            let u = [-0.2, 0.0, 0.3];
            let base = fit_curves(&r, &f, &b, rule, &u).unwrap();
            let perm = fit_curves(&r.permute_assets(&order), &f, &b, rule, &u).unwrap();
            for i in 0..u.len() {
                for (k, &src) in order.iter().enumerate() {
                    prop_assert!((perm.g[i][k] - base.g[i][src]).abs() <= 1e-12);
                    for j in 0..2 {
                        prop_assert!((perm.phi[i][(k, j)] - base.phi[i][(src, j)]).abs() <= 1e-12);
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn wls_weight_scale_invariant() -> Result<(), String> {
    runner(100)
        .run(&(10usize..30, 1usize..5, 1e-3f64..1e3, any::<u64>()), |(n, d, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = uniform(&mut rng, n, d, -1.0, 1.0);
            let y = uniform(&mut rng, n, 2, -1.0, 1.0);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
            let base = solve_wls(&WlsProblem { design: x.clone(), response: y.clone(), weights: w.clone(), ridge: 0.0 }).unwrap();
            let scaled = solve_wls(&WlsProblem {
                design: x,
                response: y,
                weights: w.iter().map(|v| v * c).collect(),
                ridge: 0.0,
            })
            .unwrap();
            prop_assert!(rel_err(&scaled.coefficients, &base.coefficients) <= 1e-10);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn factor_covariance_symmetric_psd() -> Result<(), String> {
    runner(200)
        .run(&(10usize..80, 1usize..5, 0.5f64..3.0, any::<u64>()), |(n, q, h, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FactorPanel::new(uniform(&mut rng, n, q, -1.0, 1.0)).unwrap();
            let u = DVector::from_fn(q, |_, _| rng.random_range(-0.3..0.3));
            let est = conditional_covariance(&f, &u, Bandwidth::new(h).unwrap()).unwrap();
            let c = &est.covariance;
            prop_assert!((c - c.transpose()).amax() <= 1e-12);
            prop_assert!(min_eigenvalue(c) >= -1e-10);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn garch_variance_bounded_below() -> Result<(), String> {
    runner(200)
        .run(
            &(1e-6f64..2.0, 0.0f64..0.5, 0.0f64..0.49, prop::collection::vec(-5.0f64..5.0, 3..60)),
            |(a0, a, g, r)| {
                let theta = GarchParams::new(a0, vec![a.max(1e-6)], vec![g.max(1e-6)]).unwrap();
                for mode in [InitMode::Alpha0, InitMode::FirstResidual] {
                    let s2 = variance_recursion(&theta, &r, mode).unwrap();
                    prop_assert!(s2.iter().all(|v| *v >= a0));
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// Runs `simulate` twice with the same flags and compares the bytes of
/// every output file.
pub fn cli_is_deterministic() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().join("sim.csv");
    let run = || -> Result<Vec<Vec<u8>>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_dyncov"))
            .args(["simulate", "--n", "200", "--p", "10", "--reps", "2", "--seed", "1", "--out"])
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("simulate exited with {status}"))?;
        let files = ["sim.csv", "sim.summary.csv", "sim.meta.json"]
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        for f in ["sim.csv", "sim.summary.csv", "sim.meta.json"] {
            std::fs::remove_file(dir.path().join(f)).map_err(|e| e.to_string())?;
        }
        Ok(files)
    };
    let a = run()?;
    let b = run()?;
    ensure(a == b, || "repeated simulate runs differ".into())
}

pub const PROPERTIES: &[(&str, Check)] = &[
    ("assembled_covariance_symmetric_psd", assembled_covariance_symmetric_psd),
    ("markowitz_scale_invariant", markowitz_scale_invariant),
    ("local_linear_exact_on_affine_data", local_linear_exact_on_affine_data),
    ("fit_curves_permutation_equivariant", fit_curves_permutation_equivariant),
    ("wls_weight_scale_invariant", wls_weight_scale_invariant),
    ("factor_covariance_symmetric_psd", factor_covariance_symmetric_psd),
    ("garch_variance_bounded_below", garch_variance_bounded_below),
    ("cli_deterministic", cli_is_deterministic),
];

pub fn fixture_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/french"))
}

pub const INDUSTRY_FILE: &str = "49_Industry_Portfolios_Daily.csv";
pub const FACTORS_FILE: &str = "F-F_Research_Data_Factors_daily.csv";
