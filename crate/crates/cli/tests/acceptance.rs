//! Acceptance criteria for the workspace. Each test covers one numbered
//! criterion and prints a single pass/fail line; the comparisons run against
//! independent oracles implemented inside this file (closed forms evaluated
//! by hand, dense grid search, finite differences, subprocess byte
//! comparisons) rather than against the code under test.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use scm_relax::baselines::{scm_closed_form_unconstrained, solve_scm};
use scm_relax::divergence::{divergence_gradient, divergence_value, Divergence};
use scm_relax::moments::{compute_moments, eta_bar, MomentPair};
use scm_relax::oracle::{
    oracle_weights_g, oracle_weights_l2, GroupStructure, OracleError, OracleInputs,
};
use scm_relax::panel::PanelData;
use scm_relax::simulation::{run_experiment, DgpConfig, ExperimentReport, GroupMode, KMode, Method};
use scm_relax::solver::{check_feasibility, solve_relaxation, SolveStatus};

fn report(criterion: usize, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("criterion {criterion:02} [{name}]: PASS ({detail})"),
        Err(detail) => {
            println!("criterion {criterion:02} [{name}]: FAIL ({detail})");
            panic!("criterion {criterion:02} [{name}]: FAIL ({detail})");
        }
    }
}

fn simplex_point(rng: &mut impl Rng, n: usize, min_coord: f64) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / s).collect();
        if w.iter().all(|&x| x > min_coord) {
            return w;
        }
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: oracle closed form vs numeric equivalence
// ---------------------------------------------------------------------------

enum OracleCaseKind {
    KLtR,
    KEqR,
    KGtRInCol,
    KGtROutCol,
}

/// Random oracle instance with an interior (non-boundary) closed-form
/// solution; dimensions honor J <= 60, r <= 8.
fn random_oracle_instance(kind: &OracleCaseKind, rng: &mut ChaCha8Rng) -> OracleInputs {
    loop {
        let (k, r) = match kind {
            OracleCaseKind::KLtR => {
                let r = rng.gen_range(3..=8usize);
                (rng.gen_range(2..r), r)
            }
            OracleCaseKind::KEqR => {
                let r = rng.gen_range(2..=8usize);
                (r, r)
            }
            OracleCaseKind::KGtRInCol | OracleCaseKind::KGtROutCol => {
                let r = rng.gen_range(1..=6usize);
                (rng.gen_range(r + 1..=r + 4), r)
            }
        };
        let mut lambda_co = DMatrix::from_fn(k, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        if matches!(kind, OracleCaseKind::KGtRInCol) {
            for i in 0..k {
                lambda_co[(i, 0)] = 1.0;
            }
        }
        if matches!(kind, OracleCaseKind::KGtROutCol) {
            // verify 1_K really is outside the column space
            let ones = DVector::from_element(k, 1.0);
            let svd = lambda_co.clone().svd(true, true);
            let sol = svd.solve(&ones, 1e-12).unwrap();
            let resid = (&lambda_co * sol - &ones).norm() / (k as f64).sqrt();
            if resid < 1e-4 {
                continue;
            }
        }
        let a = DMatrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let omega = &a * a.transpose() / r as f64 + DMatrix::identity(r, r) * 0.5;
        // target an interior solution: lambda0 generated from an interior
        // group-weight vector
        let wt = simplex_point(rng, k, 0.02);
        let lambda0 = lambda_co.transpose() * DVector::from_column_slice(&wt);
        let mut membership = Vec::new();
        for g in 1..=k {
            for _ in 0..rng.gen_range(1..=4usize) {
                membership.push(g);
            }
        }
        if membership.len() > 60 {
            continue;
        }
        let groups = GroupStructure::new(membership, k).unwrap();
        let inp = match OracleInputs::new(lambda_co, lambda0, omega, groups) {
            Ok(i) => i,
            Err(_) => continue,
        };
        match oracle_weights_l2(&inp) {
            Ok(o) if o.w.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-4 => return inp,
            _ => continue,
        }
    }
}

#[test]
fn criterion_01_oracle_closed_form_vs_numeric() {
    let start = Instant::now();
    let cases = [
        OracleCaseKind::KLtR,
        OracleCaseKind::KEqR,
        OracleCaseKind::KGtRInCol,
        OracleCaseKind::KGtROutCol,
    ];
    let outcome = (0..cases.len() * 200)
        .into_par_iter()
        .map(|idx| {
            let kind = &cases[idx / 200];
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC1 + idx as u64);
            let inp = random_oracle_instance(kind, &mut rng);
            let closed =
                oracle_weights_l2(&inp).map_err(|e| format!("instance {idx}: closed form: {e}"))?;
            let (numeric, _) = oracle_weights_g(&inp, &Divergence::L2, 1e-9)
                .map_err(|e| format!("instance {idx}: numeric solve: {e}"))?;
            let diff = closed
                .w
                .iter()
                .zip(&numeric)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if diff > 1e-6 {
                return Err(format!("instance {idx}: closed vs numeric diff {diff:.3e}"));
            }
            // Lemma 1 within-group equality on the numeric solve
            let membership = inp.groups.membership().to_vec();
            for g in 1..=inp.groups.k() {
                let vals: Vec<f64> = numeric
                    .iter()
                    .zip(&membership)
                    .filter(|(_, &m)| m == g)
                    .map(|(v, _)| *v)
                    .collect();
                let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - vals.iter().cloned().fold(f64::INFINITY, f64::min);
                if spread > 1e-8 {
                    return Err(format!("instance {idx}: within-group spread {spread:.3e}"));
                }
            }
            Ok(diff)
        })
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)));
    let elapsed = start.elapsed().as_secs_f64();
    let outcome = outcome.and_then(|worst| {
        if elapsed < 60.0 {
            Ok(format!("800 instances, worst diff {worst:.2e}, {elapsed:.1}s"))
        } else {
            Err(format!("runtime {elapsed:.1}s exceeds 60s"))
        }
    });
    report(1, "oracle closed form vs numeric", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 2: solver vs dense simplex grid, J = 3
// ---------------------------------------------------------------------------

/// Hand-coded divergence values (independent of the library).
fn g_value(d: &Divergence, w: &[f64]) -> f64 {
    w.iter()
        .map(|&x| match d {
            Divergence::L2 => x * x,
            Divergence::El => {
                if x <= 0.0 {
                    f64::INFINITY
                } else {
                    -x.ln()
                }
            }
            Divergence::Entropy => {
                if x < 0.0 {
                    f64::INFINITY
                } else if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
            Divergence::CressieRead(g) => {
                if x < 0.0 || (x == 0.0 && *g < 0.0) {
                    f64::INFINITY
                } else {
                    (x.powf(g + 1.0) - 1.0) / (g * (g + 1.0))
                }
            }
        })
        .sum()
}

/// Best gamma makes the band residual symmetric: feasible iff half the
/// range of sigma w - upsilon is within eta.
fn band_ok(m: &MomentPair, w: &[f64], eta: f64) -> bool {
    let v = [
        m.sigma_hat[(0, 0)] * w[0] + m.sigma_hat[(0, 1)] * w[1] + m.sigma_hat[(0, 2)] * w[2]
            - m.upsilon_hat[0],
        m.sigma_hat[(1, 0)] * w[0] + m.sigma_hat[(1, 1)] * w[1] + m.sigma_hat[(1, 2)] * w[2]
            - m.upsilon_hat[1],
        m.sigma_hat[(2, 0)] * w[0] + m.sigma_hat[(2, 1)] * w[1] + m.sigma_hat[(2, 2)] * w[2]
            - m.upsilon_hat[2],
    ];
    let hi = v[0].max(v[1]).max(v[2]);
    let lo = v[0].min(v[1]).min(v[2]);
    (hi - lo) / 2.0 <= eta + 1e-12
}

/// Dense grid over the J = 3 simplex with two local refinement stages
/// (1e-3 -> 1e-4 -> 1e-5).
fn grid_minimize(m: &MomentPair, d: &Divergence, eta: f64) -> Option<[f64; 3]> {
    let scan = |c: [f64; 2], half: f64, step: f64| -> Option<([f64; 2], f64)> {
        let mut best: Option<([f64; 2], f64)> = None;
        let lo0 = ((c[0] - half) / step).floor().max(0.0) as i64;
        let hi0 = (((c[0] + half) / step).ceil() as i64).min((1.0 / step).round() as i64);
        for i in lo0..=hi0 {
            let w0 = i as f64 * step;
            let lo1 = ((c[1] - half) / step).floor().max(0.0) as i64;
            let hi1 = (((c[1] + half) / step).ceil() as i64)
                .min(((1.0 - w0) / step).floor() as i64);
            for jdx in lo1..=hi1 {
                let w1 = jdx as f64 * step;
                let w = [w0, w1, (1.0 - w0 - w1).max(0.0)];
                if !band_ok(m, &w, eta) {
                    continue;
                }
                let val = g_value(d, &w);
                if best.as_ref().map_or(true, |(_, b)| val < *b) {
                    best = Some(([w0, w1], val));
                }
            }
        }
        best
    };
    // generous refinement boxes: with an active band face the coarse best
    // can sit several steps from the continuum optimum
    let (c1, _) = scan([0.5, 0.5], 0.5, 1e-3)?;
    let (c2, _) = scan(c1, 1e-2, 1e-4)?;
    let (c3, _) = scan(c2, 1e-3, 1e-5)?;
    Some([c3[0], c3[1], 1.0 - c3[0] - c3[1]])
}

/// Random J = 3 moment instance with eta strictly between eta_min and
/// eta_bar and a comfortably interior feasible point.
fn random_grid_instance(rng: &mut ChaCha8Rng) -> (MomentPair, f64) {
    loop {
        let t0 = 15;
        let a = DMatrix::from_fn(t0, 3, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let sigma = a.transpose() * &a / t0 as f64;
        let wt = simplex_point(rng, 3, 0.1);
        let noise = DVector::from_fn(3, |_, _| 0.3 * (rng.gen::<f64>() - 0.5));
        let upsilon = &sigma * DVector::from_column_slice(&wt) + noise;
        let m = MomentPair::new(sigma, upsilon, t0);
        let cert = match check_feasibility(&m, 0.0) {
            Ok(c) => c,
            Err(_) => continue,
        };
        let eb = eta_bar(&m).eta_bar;
        if eb - cert.eta_min < 1e-2 {
            continue;
        }
        let eta = cert.eta_min + (0.2 + 0.6 * rng.gen::<f64>()) * (eb - cert.eta_min);
        // require an interior feasible point so log-domain divergences are
        // well posed
        let probe = (0..500).any(|_| {
            let w = simplex_point(rng, 3, 0.05);
            band_ok(&m, &w, eta)
        });
        if probe {
            return (m, eta);
        }
    }
}

#[test]
fn criterion_02_solver_vs_brute_force() {
    let start = Instant::now();
    let divs = [
        Divergence::L2,
        Divergence::El,
        Divergence::Entropy,
        Divergence::CressieRead(0.5),
        Divergence::CressieRead(-0.5),
    ];
    let outcome = (0..50usize)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC2 + i as u64);
            let (m, eta) = random_grid_instance(&mut rng);
            let mut worst = 0.0f64;
            for d in &divs {
                let sol = solve_relaxation(&m, d, eta, 1e-9)
                    .map_err(|e| format!("instance {i} {d:?}: {e}"))?;
                if sol.status != SolveStatus::Converged {
                    return Err(format!("instance {i} {d:?}: status {:?}", sol.status));
                }
                if sol.kkt.max_residual > 1e-8 {
                    return Err(format!(
                        "instance {i} {d:?}: kkt residual {:.3e}",
                        sol.kkt.max_residual
                    ));
                }
                let grid = grid_minimize(&m, d, eta)
                    .ok_or_else(|| format!("instance {i} {d:?}: grid found no feasible point"))?;
                for c in 0..3 {
                    let diff = (sol.w[c] - grid[c]).abs();
                    worst = worst.max(diff);
                    if diff > 2e-3 {
                        return Err(format!(
                            "instance {i} {d:?}: coord {c} solver {:.6} grid {:.6}",
                            sol.w[c], grid[c]
                        ));
                    }
                }
            }
            Ok(worst)
        })
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)));
    let elapsed = start.elapsed().as_secs_f64();
    let outcome = outcome.and_then(|worst| {
        if elapsed < 120.0 {
            Ok(format!(
                "50 instances x 5 divergences, worst coord diff {worst:.2e}, {elapsed:.1}s"
            ))
        } else {
            Err(format!("runtime {elapsed:.1}s exceeds 120s"))
        }
    });
    report(2, "solver vs dense grid", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 3: eta_bar boundary and eta_min infeasibility
// ---------------------------------------------------------------------------

fn random_panel(rng: &mut ChaCha8Rng, j: usize, t0: usize, t1: usize) -> PanelData {
    let outcomes = DMatrix::from_fn(t0 + t1, j + 1, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    PanelData::new(
        outcomes,
        t0,
        t1,
        (0..=j)
            .map(|i| if i == 0 { "treated".into() } else { format!("c{i}") })
            .collect(),
        (0..t0 + t1).map(|t| format!("t{t}")).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_03_eta_bar_boundary_and_eta_min_infeasibility() {
    let outcome = (0..100usize)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC3 + i as u64);
            let (m, cert) = loop {
                let j = rng.gen_range(4..=20usize);
                let panel = random_panel(&mut rng, j, 25, 2);
                let m = compute_moments(&panel).unwrap();
                if let Ok(c) = check_feasibility(&m, 0.0) {
                    if c.eta_min > 1e-4 {
                        break (m, c);
                    }
                }
            };
            let eb = eta_bar(&m).eta_bar;
            let sol = solve_relaxation(&m, &Divergence::L2, eb, 1e-9)
                .map_err(|e| format!("instance {i}: {e}"))?;
            let jf = m.j as f64;
            let dev = sol
                .w
                .iter()
                .map(|&w| (w - 1.0 / jf).abs())
                .fold(0.0f64, f64::max);
            if dev > 1e-6 {
                return Err(format!("instance {i}: ||w - 1/J||_inf = {dev:.3e} at eta_bar"));
            }
            let below = check_feasibility(&m, cert.eta_min - 1e-6)
                .map_err(|e| format!("instance {i}: feasibility probe: {e}"))?;
            if below.feasible {
                return Err(format!(
                    "instance {i}: eta_min - 1e-6 certified feasible (eta_min {:.3e})",
                    cert.eta_min
                ));
            }
            Ok(dev)
        })
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)));
    report(
        3,
        "eta_bar equal weights / eta_min infeasibility",
        outcome.map(|worst| format!("100 instances, worst equal-weight dev {worst:.2e}")),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: interior closed form vs solve_scm
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_interior_closed_form_matches_solve_scm() {
    let outcome = (0..100usize)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC4 + i as u64);
            let j = rng.gen_range(3..=12usize);
            // construct upsilon so the unconstrained KKT solution is a known
            // interior simplex point
            let t0 = 40;
            let a = DMatrix::from_fn(t0, j, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
            let sigma = a.transpose() * &a / t0 as f64 + DMatrix::identity(j, j) * 0.3;
            let wt = simplex_point(&mut rng, j, 0.03);
            let gamma0: f64 = rng.gen::<f64>() - 0.5;
            let upsilon = &sigma * DVector::from_column_slice(&wt)
                + DVector::from_element(j, gamma0);
            let m = MomentPair::new(sigma, upsilon, t0);
            let (closed, _gamma) =
                scm_closed_form_unconstrained(&m).map_err(|e| format!("instance {i}: {e}"))?;
            if closed.iter().cloned().fold(f64::INFINITY, f64::min) < 1e-3 {
                // closed form not interior; construction failed -> skip is
                // not allowed, so treat as error
                return Err(format!("instance {i}: closed form left the interior"));
            }
            let scm = solve_scm(&m, 1e-10).map_err(|e| format!("instance {i}: {e}"))?;
            let diff = closed
                .iter()
                .zip(&scm.w)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            if diff > 1e-7 {
                return Err(format!("instance {i}: diff {diff:.3e} exceeds 1e-7"));
            }
            Ok(diff)
        })
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)));
    report(
        4,
        "interior closed form vs solve_scm",
        outcome.map(|worst| format!("100 instances, worst diff {worst:.2e}")),
    );
}

// ---------------------------------------------------------------------------
// Criteria 5 & 6: desk-scale Table 1 / Table 2 orderings (shared run)
// ---------------------------------------------------------------------------

fn table1_report() -> &'static (ExperimentReport, f64) {
    static REPORT: OnceLock<(ExperimentReport, f64)> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = DgpConfig::standard(50, 50, KMode::Lt, GroupMode::Exact, 20260823);
        let methods = [
            Method::Lasso,
            Method::Ridge,
            Method::Fspda,
            Method::L2Relax,
            Method::EntropyRelax,
        ];
        let start = Instant::now();
        let rep = run_experiment(&cfg, 100, &methods).expect("table-1 run failed");
        (rep, start.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_05_table1_prediction_ratio_ordering() {
    let (rep, elapsed) = table1_report();
    let p = |name: &str| rep.per_method[name].pred_ratio;
    let (l2, ridge, lasso, fspda) = (p("l2_relax"), p("ridge"), p("lasso"), p("fspda"));
    let outcome = if !(l2 < ridge && ridge < lasso && lasso < 1.0 && 1.0 < fspda) {
        Err(format!(
            "ordering violated: l2 {l2:.3} ridge {ridge:.3} lasso {lasso:.3} fspda {fspda:.3}"
        ))
    } else if l2 >= 0.6 {
        Err(format!("l2 mean ratio {l2:.3} not below 0.6"))
    } else {
        Ok(format!(
            "l2 {l2:.3} < ridge {ridge:.3} < lasso {lasso:.3} < 1 < fspda {fspda:.3}, {elapsed:.0}s"
        ))
    };
    report(5, "Table 1 prediction-ratio ordering", outcome);
}

#[test]
fn criterion_06_table2_l2_distance_ordering() {
    let (rep, _) = table1_report();
    let d = |name: &str| rep.per_method[name].l2_ratio;
    let (l2, ent, ridge, lasso) = (
        d("l2_relax"),
        d("entropy_relax"),
        d("ridge"),
        d("lasso"),
    );
    let outcome = if !(l2 < ent && ent < ridge && ridge < lasso) {
        Err(format!(
            "ordering violated: l2 {l2:.3} entropy {ent:.3} ridge {ridge:.3} lasso {lasso:.3}"
        ))
    } else if lasso >= 1.0 {
        Err(format!("largest ratio (lasso {lasso:.3}) not below 1"))
    } else {
        Ok(format!(
            "l2 {l2:.3} < entropy {ent:.3} < ridge {ridge:.3} < lasso {lasso:.3} < 1"
        ))
    };
    report(6, "Table 2 weight-distance ordering", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 7: approximate-group robustness
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_approximate_groups_l2_beats_ridge() {
    let cfg = DgpConfig::standard(50, 50, KMode::Lt, GroupMode::Approximate, 20260824);
    let rep = run_experiment(&cfg, 100, &[Method::Ridge, Method::L2Relax])
        .expect("approximate-group run failed");
    let l2 = rep.per_method["l2_relax"].pred_ratio;
    let ridge = rep.per_method["ridge"].pred_ratio;
    let outcome = if l2 < ridge {
        Ok(format!("l2 {l2:.3} < ridge {ridge:.3} under approximate groups"))
    } else {
        Err(format!("l2 {l2:.3} >= ridge {ridge:.3}"))
    };
    report(7, "approximate-group robustness", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 8: boundary oracle sign patterns
// ---------------------------------------------------------------------------

/// Random K = 3, r = 1 oracle instance whose L2 oracle pins one group to
/// zero while a strictly positive feasible point exists. The boundary
/// analysis is done by hand over the one-dimensional feasible segment.
fn random_boundary_instance(rng: &mut ChaCha8Rng) -> (OracleInputs, usize) {
    loop {
        let mut a: Vec<f64> = (0..3).map(|_| 0.5 + 2.5 * rng.gen::<f64>()).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        if a[1] - a[0] < 0.2 || a[2] - a[1] < 0.2 {
            continue;
        }
        let lambda0 = a[0] + (a[2] - a[0]) * (0.15 + 0.7 * rng.gen::<f64>());
        let sizes: Vec<usize> = (0..3).map(|_| rng.gen_range(1..=4usize)).collect();

        // feasible segment: w(t) = w0 + t d with 1'w = 1, a'w = lambda0
        let av = DVector::from_column_slice(&a);
        let ones = DVector::from_element(3, 1.0);
        // d spans null([1'; a']): cross product of the two rows
        let d = DVector::from_column_slice(&[
            a[1] - a[2],
            a[2] - a[0],
            a[0] - a[1],
        ]);
        // particular solution via least squares on the 2x3 system
        let sys = DMatrix::from_rows(&[ones.transpose(), av.transpose()]);
        let rhs = DVector::from_column_slice(&[1.0, lambda0]);
        let w0 = sys.svd(true, true).solve(&rhs, 1e-12).unwrap();
        // positivity range for t
        let (mut tlo, mut thi) = (f64::NEG_INFINITY, f64::INFINITY);
        for c in 0..3 {
            if d[c].abs() < 1e-12 {
                if w0[c] < 0.0 {
                    tlo = 1.0;
                    thi = 0.0;
                }
                continue;
            }
            let bound = -w0[c] / d[c];
            if d[c] > 0.0 {
                tlo = tlo.max(bound);
            } else {
                thi = thi.min(bound);
            }
        }
        if thi - tlo < 1e-2 {
            continue; // need a strictly positive interior point
        }
        // minimize sum_k w_k^2 / J_k over the segment
        let num: f64 = (0..3).map(|c| w0[c] * d[c] / sizes[c] as f64).sum();
        let den: f64 = (0..3).map(|c| d[c] * d[c] / sizes[c] as f64).sum();
        let t_star = -num / den;
        if t_star > tlo + 1e-3 && t_star < thi - 1e-3 {
            continue; // interior optimum: no pinned group
        }
        let t_clamped = t_star.clamp(tlo, thi);
        let w_opt: Vec<f64> = (0..3).map(|c| w0[c] + t_clamped * d[c]).collect();
        let zero_group = (0..3)
            .min_by(|&x, &y| w_opt[x].partial_cmp(&w_opt[y]).unwrap())
            .unwrap();
        if w_opt[zero_group] > 1e-8 {
            continue;
        }

        let mut membership = Vec::new();
        for (g, &s) in sizes.iter().enumerate() {
            for _ in 0..s {
                membership.push(g + 1);
            }
        }
        let groups = GroupStructure::new(membership, 3).unwrap();
        let lambda_co = DMatrix::from_column_slice(3, 1, &a);
        let omega = DMatrix::from_element(1, 1, 0.5 + rng.gen::<f64>());
        let inp = OracleInputs::new(
            lambda_co,
            DVector::from_element(1, lambda0),
            omega,
            groups,
        )
        .unwrap();
        return (inp, zero_group);
    }
}

#[test]
fn criterion_08_boundary_positivity_patterns() {
    let outcome = (0..50usize)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xACC8 + i as u64);
            let (inp, zero_group) = random_boundary_instance(&mut rng);
            // the closed form must agree that this instance is boundary
            match oracle_weights_l2(&inp) {
                Err(OracleError::BoundaryOracle { .. }) => {}
                other => {
                    return Err(format!(
                        "instance {i}: expected BoundaryOracle, got {other:?}"
                    ))
                }
            }
            let membership = inp.groups.membership().to_vec();
            let (w_l2, wg_l2) = oracle_weights_g(&inp, &Divergence::L2, 1e-9)
                .map_err(|e| format!("instance {i} L2: {e}"))?;
            let _ = w_l2;
            if wg_l2[zero_group] >= 0.05 {
                return Err(format!(
                    "instance {i}: L2 puts {:.3} on the zero-oracle group",
                    wg_l2[zero_group]
                ));
            }
            for d in [Divergence::El, Divergence::Entropy] {
                let (w, _) = oracle_weights_g(&inp, &d, 1e-9)
                    .map_err(|e| format!("instance {i} {d:?}: {e}"))?;
                let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
                if min <= 0.0 {
                    return Err(format!("instance {i} {d:?}: min weight {min:.3e} not positive"));
                }
            }
            let _ = membership;
            Ok(wg_l2[zero_group])
        })
        .try_reduce(|| 0.0f64, |a, b| Ok(a.max(b)));
    report(
        8,
        "boundary positivity (EL/Entropy interior, L2 pinned)",
        outcome.map(|worst| format!("50 instances, worst L2 zero-group mass {worst:.2e}")),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: empirical pipeline with a known -5%-of-GDP effect
// ---------------------------------------------------------------------------

/// SplitMix64 fixture noise, independent of the library's RNG stack.
struct Mix(u64);

impl Mix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    fn sym(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
}

fn write_level_fixture(path: &std::path::Path, seed: u64) {
    let w = [0.5, 0.3, 0.2];
    let mut rng = Mix(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0xf1f1);
    let mut levels: Vec<Vec<f64>> = vec![(0..3).map(|_| 100.0 + 10.0 * rng.sym()).collect()];
    for _ in 1..44 {
        let prev = levels.last().unwrap().clone();
        levels.push(prev.iter().map(|v| v * (1.02 + 0.005 * rng.sym())).collect());
    }
    let mut csv = String::from("time,treated,c1,c2,c3\n");
    for (t, row) in levels.iter().enumerate() {
        let mut y: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
        if t >= 34 {
            y *= 0.95; // -5% of GDP from the first treated quarter on
        }
        csv.push_str(&format!("t{t},{y:.12e}"));
        for v in row {
            csv.push_str(&format!(",{v:.12e}"));
        }
        csv.push('\n');
    }
    std::fs::write(path, csv).unwrap();
}

#[test]
fn criterion_09_pipeline_recovers_minus_five_percent_effect() {
    let dir = tempfile::tempdir().unwrap();
    let n = 50;
    let mut total = 0.0;
    for s in 0..n {
        let data = dir.path().join(format!("p{s}.csv"));
        write_level_fixture(&data, 7000 + s);
        let out = dir.path().join(format!("e{s}"));
        let o = Command::new(env!("CARGO_BIN_EXE_scm-relax"))
            .args(["estimate", "--data", data.to_str().unwrap()])
            .args(["--treated", "treated", "--treatment-time", "t34"])
            .args(["--method", "l2", "--cv", "--yoy", "4", "--levels"])
            .args(["--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !o.status.success() {
            report(
                9,
                "empirical pipeline effect recovery",
                Err(format!(
                    "fixture {s} failed: {}",
                    String::from_utf8_lossy(&o.stderr)
                )),
            );
            return;
        }
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join("summary.json")).unwrap(),
        )
        .unwrap();
        total += summary["cumulative_effect_ratio"].as_f64().unwrap();
    }
    let mean = total / n as f64;
    // observed = 0.95 x counterfactual, so the true ratio is -0.05/0.95
    let truth = -0.05 / 0.95;
    let outcome = if (mean - truth).abs() < 0.015 {
        Ok(format!(
            "mean cumulative effect ratio {:.2}% vs true {:.2}% over {n} fixtures",
            100.0 * mean,
            100.0 * truth
        ))
    } else {
        Err(format!(
            "mean ratio {:.3}% off true {:.3}% by more than 1.5pp",
            100.0 * mean,
            100.0 * truth
        ))
    };
    report(9, "empirical pipeline effect recovery", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 10: byte-identical simulation reports across worker counts
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_simulation_determinism_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for workers in ["1", "1", "2", "4"] {
        let out = dir.path().join(format!("w{}_{}", workers, outputs.len()));
        let o = Command::new(env!("CARGO_BIN_EXE_scm-relax"))
            .args(["simulate", "--j", "20", "--t0", "24", "--t1", "8"])
            .args(["--reps", "6", "--seed", "11", "--methods", "scm,l2,ridge"])
            .args(["--workers", workers])
            .args(["--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        if !o.status.success() {
            report(
                10,
                "simulation determinism",
                Err(format!(
                    "workers {workers}: {}",
                    String::from_utf8_lossy(&o.stderr)
                )),
            );
            return;
        }
        outputs.push((
            std::fs::read(out.join("report.csv")).unwrap(),
            std::fs::read(out.join("report.json")).unwrap(),
        ));
    }
    let all_equal = outputs.windows(2).all(|p| p[0] == p[1]);
    let outcome = if all_equal {
        Ok("reports byte-identical across repeat run and 1/2/4 workers".into())
    } else {
        Err("report files differ across worker counts or repeat runs".into())
    };
    report(10, "simulation determinism", outcome);
}

// ---------------------------------------------------------------------------
// Criterion 11: divergence gradients vs central finite differences
// ---------------------------------------------------------------------------

#[test]
fn criterion_11_gradient_finite_difference_check() {
    let divs = [
        Divergence::L2,
        Divergence::El,
        Divergence::Entropy,
        Divergence::CressieRead(0.5),
        Divergence::CressieRead(-0.5),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCB);
    let mut worst = 0.0f64;
    for d in &divs {
        for i in 0..100 {
            let w: Vec<f64> = (0..5).map(|_| 0.05 + 1.95 * rng.gen::<f64>()).collect();
            let grad = match divergence_gradient(d, &w) {
                Ok(g) => g,
                Err(e) => {
                    report(11, "gradient checks", Err(format!("{d:?} point {i}: {e}")));
                    return;
                }
            };
            let h = 1e-6;
            for c in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[c] += h;
                wm[c] -= h;
                let fd = (divergence_value(d, &wp).unwrap() - divergence_value(d, &wm).unwrap())
                    / (2.0 * h);
                let rel = (grad[c] - fd).abs() / (1.0 + grad[c].abs());
                worst = worst.max(rel);
                if rel > 1e-6 {
                    report(
                        11,
                        "gradient checks",
                        Err(format!(
                            "{d:?} point {i} coord {c}: analytic {:.8} fd {:.8} rel {rel:.2e}",
                            grad[c], fd
                        )),
                    );
                    return;
                }
            }
        }
    }
    report(
        11,
        "gradient checks",
        Ok(format!("5 divergences x 100 points, worst rel err {worst:.2e}")),
    );
}
