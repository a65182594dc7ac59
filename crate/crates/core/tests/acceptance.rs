//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero when any criterion fails.
//!
//! Run with `cargo test --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

use powertalk::budget::allocate_input_variance;
use powertalk::channel::{linearize, single_bus_channel, ChannelModel};
use powertalk::comsim::{measure_power_compliance, run_transmission, SimConfig, SimMode};
use powertalk::error::Error;
use powertalk::grid::{validate_grid, BusId, BusSpec, GridSpec, LoadSpec, ValidatedGrid, VscSpec};
use powertalk::optimizer::{capacity_sweep, concavity_probe, Link, SearchGrid, SearchOptions};
use powertalk::steady_state::{
    check_viability, solve_steady_state, two_source_closed_form, vsc_outputs, DroopState,
    SolverOptions,
};

const A: BusId = BusId(0);
const B: BusId = BusId(1);
const SIGMA_Z: f64 = 0.01;
const PI_SET: [f64; 5] = [2.0, 5.0, 10.0, 15.0, 20.0];
const STEP: f64 = 0.005;

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

fn within(limit: Duration, elapsed: Duration) -> bool {
    elapsed < limit
}

fn case() -> (ValidatedGrid, DroopState) {
    let grid = validate_grid(GridSpec::case_study()).unwrap();
    let droop = DroopState::nominal(&grid);
    (grid, droop)
}

fn precise() -> SolverOptions {
    SolverOptions::newton().with_tol(1e-12)
}

fn model_at(grid: &ValidatedGrid, droop: &DroopState) -> ChannelModel {
    let s = solve_steady_state(grid, droop, &precise()).unwrap();
    linearize(grid, droop, &s).unwrap()
}

fn shifted_voltages(grid: &ValidatedGrid, droop: &DroopState, dx: &[f64]) -> Vec<f64> {
    let d = droop.clone().with_input(grid, dx).unwrap();
    solve_steady_state(grid, &d, &precise()).unwrap().v
}

/// max_n |(v(x + dx) - v(x))_n - (H dx)_n|
fn prediction_error(grid: &ValidatedGrid, droop: &DroopState, m: &ChannelModel, dx: &[f64]) -> f64 {
    let v = shifted_voltages(grid, droop, dx);
    (0..grid.n_buses())
        .map(|n| {
            let lin: f64 = (0..grid.n_buses()).map(|k| m.h[(n, k)] * dx[k]).sum();
            (v[n] - m.operating_point.v[n] - lin).abs()
        })
        .fold(0.0, f64::max)
}

fn c1_linear_load_exactness() -> Outcome {
    let t = Instant::now();
    let mut spec = GridSpec::case_study();
    for b in &mut spec.buses {
        b.load.d_cp = 0.0;
    }
    let grid = validate_grid(spec).unwrap();
    let droop = DroopState::nominal(&grid);
    let m = model_at(&grid, &droop);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let dx = [rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0), 0.0];
        worst = worst.max(prediction_error(&grid, &droop, &m, &dx));
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-8 && within(Duration::from_secs(1), el),
        format!("max error {worst:.3e} V over 100 inputs (limit 1e-8), {el:.2?}"),
    )
}

fn c2_linearization_order() -> Outcome {
    let t = Instant::now();
    let (grid, droop) = case();
    let m = model_at(&grid, &droop);
    let errors: Vec<f64> = (0..5)
        .map(|k| {
            let dx = 0.2 / f64::powi(2.0, k);
            prediction_error(&grid, &droop, &m, &[dx, 0.0, 0.0])
        })
        .collect();
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    let el = t.elapsed();
    outcome(
        ratios.iter().all(|r| (3.2..=4.8).contains(r)) && within(Duration::from_secs(1), el),
        format!("error ratios per halving {ratios:.3?} (band [3.2, 4.8]), {el:.2?}"),
    )
}

fn c3_closed_form_equivalence() -> Outcome {
    let t = Instant::now();
    let (grid, droop) = case();
    let axis: Vec<f64> = (0..10).map(|i| 0.39 + (1.56 - 0.39) * i as f64 / 9.0).collect();
    let mut worst = 0.0_f64;
    for &ra in &axis {
        for &rb in &axis {
            let d = droop.clone().with_resistances(&[ra, rb]);
            let v = solve_steady_state(&grid, &d, &SolverOptions::default()).unwrap().v;
            let w = two_source_closed_form(&grid, &d).unwrap();
            for (a, b) in v.iter().zip(&w) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let el = t.elapsed();
    outcome(
        worst <= 1e-8 && within(Duration::from_secs(1), el),
        format!("max |solver - closed form| {worst:.3e} V over 10x10 (limit 1e-8), {el:.2?}"),
    )
}

fn c4_finite_difference_channel() -> Outcome {
    let (grid, droop) = case();
    let m = model_at(&grid, &droop);
    let delta = 1e-3;
    let mut worst = 0.0_f64;
    for &tx in grid.vsc_buses() {
        let mut dx = vec![0.0; 3];
        dx[tx.0] = delta;
        let up = droop.clone().with_input(&grid, &dx).unwrap();
        dx[tx.0] = -delta;
        let down = droop.clone().with_input(&grid, &dx).unwrap();
        let vu = solve_steady_state(&grid, &up, &precise()).unwrap().v;
        let vd = solve_steady_state(&grid, &down, &precise()).unwrap().v;
        for n in 0..3 {
            let fd = (vu[n] - vd[n]) / (2.0 * delta);
            worst = worst.max(((fd - m.h[(n, tx.0)]) / m.h[(n, tx.0)]).abs());
        }
        let pu = vsc_outputs(&grid, &up, &vu).p;
        let pd = vsc_outputs(&grid, &down, &vd).p;
        for (k, bus) in grid.vsc_buses().iter().enumerate() {
            let fd = (pu[k] - pd[k]) / (2.0 * delta);
            let phi = m.phi[(bus.0, tx.0)];
            worst = worst.max(((fd - phi) / phi).abs());
        }
    }
    outcome(
        worst <= 1e-4,
        format!("max relative deviation {worst:.3e} over all h and phi entries (limit 1e-4)"),
    )
}

fn c5_kappa() -> Outcome {
    let kappa_c = |d_cp: f64| {
        let mut spec = GridSpec::case_study();
        spec.buses[2].load.d_cp = d_cp;
        let grid = validate_grid(spec).unwrap();
        model_at(&grid, &DroopState::nominal(&grid)).kappa[2]
    };
    let loads = [2500.0, 1000.0, 100.0, 10.0, 1.0, 0.0];
    let ks: Vec<f64> = loads.iter().map(|&d| kappa_c(d)).collect();
    let monotone = ks.windows(2).all(|w| w[1] < w[0]);
    let at_least_one = ks.iter().all(|k| *k >= 1.0);
    let limit = ks[5] == 1.0 && (ks[4] - 1.0) < 1e-5;
    let nominal = (ks[0] - 1.0024).abs() <= 1e-3;
    outcome(
        monotone && at_least_one && limit && nominal,
        format!("kappa_C at d_cp {loads:?} W = {ks:.7?}"),
    )
}

fn c6_single_bus() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    let mut worst_sum = 0.0_f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let units: Vec<VscSpec> = (0..n)
            .map(|_| VscSpec::new(rng.random_range(350.0..450.0), rng.random_range(0.1..2.0)))
            .collect();
        let load = LoadSpec::new(Some(rng.random_range(5.0..100.0)), 0.0, 0.0);
        let ch = single_bus_channel(&units, &load).unwrap();
        for (h, u) in ch.h.iter().zip(&units) {
            ok &= (h - ch.r_bus / u.r_nom).abs() <= 1e-12 * h && *h < 1.0;
        }
        let sum: f64 = ch.h.iter().sum();
        ok &= sum < 1.0;
        worst_sum = worst_sum.max(sum);
    }
    outcome(ok, format!("50 unit sets, h_n = r_bus/r_n < 1, largest sum {worst_sum:.6}"))
}

fn c7_optimizer_dominance() -> Outcome {
    let t = Instant::now();
    let (grid, droop) = case();
    let opts = SearchOptions::default().with_step(STEP);
    let rows = capacity_sweep(&grid, &droop, &PI_SET, SIGMA_Z, Link::new(A, B), &opts).unwrap();
    let el = t.elapsed();
    let dominates = rows.iter().all(|r| r.capacity_opt >= r.capacity_nominal);
    let nondecreasing = rows.windows(2).all(|w| {
        w[1].capacity_nominal >= w[0].capacity_nominal && w[1].capacity_opt >= w[0].capacity_opt
    });
    let gains: Vec<f64> = rows
        .iter()
        .map(|r| (r.capacity_opt - r.capacity_nominal) / r.capacity_nominal)
        .collect();
    let strict = gains.iter().filter(|g| **g > 0.05).count();
    outcome(
        dominates && nondecreasing && strict >= 3 && within(Duration::from_secs(60), el),
        format!(
            "relative gains {:?} %, {strict}/5 above 5%, {el:.2?}",
            gains.iter().map(|g| (g * 1000.0).round() / 10.0).collect::<Vec<_>>()
        ),
    )
}

fn c8_optimum_certificate() -> Outcome {
    let (grid, droop) = case();
    let opts = SearchOptions::default().with_step(STEP);
    let search = SearchGrid::build(&grid, &droop, Link::new(A, B), &opts).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for &p in &PI_SET {
        let pi = [p, p];
        let (best, _) = search.best(&pi, SIGMA_Z).unwrap();
        let at = search.samples[best].as_ref().unwrap();
        let g = at.g_values(&pi);
        let min_g = g[0].min(g[1]);
        let mut variation = 0.0_f64;
        for nb in search.neighbors(best) {
            let Some(s) = search.samples[nb].as_ref() else { continue };
            let gn = s.g_values(&pi);
            ok &= gn[0].min(gn[1]).max(0.0) <= min_g.max(0.0);
            variation = variation
                .max((gn[0] - g[0]).abs())
                .max((gn[1] - g[1]).abs());
        }
        let gap = (g[0] - g[1]).abs();
        ok &= gap <= variation;
        notes.push(format!("pi={p}: |gA-gB|={gap:.2e} <= {variation:.2e}"));
    }
    outcome(ok, notes.join("; "))
}

fn c9_concavity() -> Outcome {
    let (grid, droop) = case();
    let opts = SearchOptions::default().with_step(STEP);
    let report = concavity_probe(&grid, &droop, &[10.0, 10.0], Link::new(A, B), 25, &opts).unwrap();
    let worst = report
        .points
        .iter()
        .flat_map(|p| p.max_eig_ratio.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        report.points.len() == 25 && report.violations == 0,
        format!(
            "{} of {} points violate (largest eigenvalue ratio {worst:.3e}, limit 1e-6); \
             dg/dr >= 0 at nominal: {}",
            report.violations,
            report.points.len(),
            report.increase_beyond_nominal
        ),
    )
}

fn q(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

fn c10_ber_waterfall() -> Outcome {
    let t = Instant::now();
    let (grid, droop) = case();
    let m = model_at(&grid, &droop);
    let h = m.gain(B, A);
    let slots = 100_000;
    let mut ok = true;
    let mut notes = Vec::new();
    for snr in [1.0_f64, 4.0, 9.0] {
        let cfg = SimConfig {
            slots,
            mode: SimMode::Linearized,
            rng_seed: 10,
            ..SimConfig::new(A, B, snr.sqrt() * SIGMA_Z / h, SIGMA_Z)
        };
        let r = run_transmission(&grid, &droop, &m, &cfg).unwrap();
        let p = q(snr.sqrt());
        let se = (p * (1.0 - p) / slots as f64).sqrt();
        ok &= (r.ber - p).abs() <= 3.0 * se;
        notes.push(format!("snr {snr}: ber {:.5} vs Q {:.5} (3se {:.5})", r.ber, p, 3.0 * se));
    }

    let alloc = allocate_input_variance(&grid, &m.phi, &[10.0, 10.0], &[0.0, 0.0], &[A]).unwrap();
    let run = |mode| {
        let cfg = SimConfig {
            slots,
            mode,
            rng_seed: 11,
            ..SimConfig::new(A, B, alloc.s[0].sqrt(), SIGMA_Z)
        };
        run_transmission(&grid, &droop, &m, &cfg).unwrap().ber
    };
    let (nl, lin) = (run(SimMode::Nonlinear), run(SimMode::Linearized));
    let band = 3.0 * ((nl * (1.0 - nl) + lin * (1.0 - lin)) / slots as f64).sqrt();
    ok &= (nl - lin).abs() <= band;
    notes.push(format!("nonlinear {nl:.5} vs linearized {lin:.5} (band {band:.5})"));
    let el = t.elapsed();
    ok &= within(Duration::from_secs(120), el);
    notes.push(format!("{el:.2?}"));
    outcome(ok, notes.join("; "))
}

fn c11_budget_compliance() -> Outcome {
    let (grid, nominal) = case();
    let pi = [10.0, 10.0];
    let mut ok = true;
    let mut notes = Vec::new();
    // nominal droop, and the optimum found for this budget
    for r in [[0.39, 0.39], [0.44, 0.48]] {
        let droop = nominal.clone().with_resistances(&r);
        let m = model_at(&grid, &droop);
        let dp = powertalk::budget::vr_power_investment(&grid, &nominal, &droop, &precise()).unwrap();
        let alloc = allocate_input_variance(&grid, &m.phi, &pi, &dp, &[A]).unwrap();
        let cfg = SimConfig {
            slots: 100_000,
            mode: SimMode::Nonlinear,
            rng_seed: 12,
            ..SimConfig::new(A, B, alloc.s[0].sqrt(), SIGMA_Z)
        };
        for c in measure_power_compliance(&grid, &droop, &cfg, &pi).unwrap() {
            ok &= c.empirical <= 1.05 * c.bound;
            notes.push(format!("r={r:?} bus {}: {:.3}/{} W^2", c.bus, c.empirical, c.bound));
        }
    }
    outcome(ok, notes.join("; "))
}

fn c12_viability_gating() -> Outcome {
    let (x, r) = (400.0, 0.39);
    let boundary = x * x / (4.0 * r);
    let grid_with = |d_cp: f64| {
        validate_grid(GridSpec {
            buses: vec![BusSpec {
                id: BusId(0),
                name: None,
                load: LoadSpec::new(None, 0.0, d_cp),
                vsc: Some(VscSpec::new(x, r)),
            }],
            lines: vec![],
        })
        .unwrap()
    };
    let below = grid_with(0.99 * boundary);
    let droop = DroopState::nominal(&below);
    let viable = solve_steady_state(&below, &droop, &SolverOptions::default()).is_ok()
        && check_viability(&below, &droop, &[x]).is_empty();
    let above = grid_with(1.01 * boundary);
    let rejected = matches!(
        solve_steady_state(&above, &droop, &SolverOptions::default()),
        Err(Error::NoRealRoot { .. })
    ) && !check_viability(&above, &droop, &[x]).is_empty();
    outcome(
        viable && rejected,
        format!("boundary {boundary:.1} W: 0.99x viable={viable}, 1.01x rejected={rejected}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("linear-load exactness", c1_linear_load_exactness),
        ("linearization order", c2_linearization_order),
        ("closed-form equivalence", c3_closed_form_equivalence),
        ("finite-difference channel", c4_finite_difference_channel),
        ("kappa properties", c5_kappa),
        ("single-bus gains", c6_single_bus),
        ("optimizer dominance and trend", c7_optimizer_dominance),
        ("optimum certificate", c8_optimum_certificate),
        ("concavity probe", c9_concavity),
        ("BER waterfall", c10_ber_waterfall),
        ("budget compliance", c11_budget_compliance),
        ("viability gating", c12_viability_gating),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let res = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !res.pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<30} {}  {}",
            i + 1,
            name,
            if res.pass { "PASS" } else { "FAIL" },
            res.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
