//! Steady-state operating point of the droop-controlled grid.
//!
//! Every bus obeys the current balance
//!
//! ```text
//! (x_n - v_n)/r_n = v_n/r_cr + i_cc + d_cp/v_n + sum_m (v_n - v_m)/r_nm
//! ```
//!
//! which, for fixed neighbor voltages, is the quadratic
//! `v^2/r_bus - b v + d_cp = 0` with `b = x_n/r_n + sum_m v_m/r_nm - i_cc`.
//! The physical solution is the positive root.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{bus_resistances, vsc_conductances, BusId, ValidatedGrid};

/// Live droop parameters, one entry per converter in slot order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroopState {
    /// Reference voltages (V).
    pub x: Vec<f64>,
    /// Virtual resistances (ohm).
    pub r: Vec<f64>,
}

impl DroopState {
    pub fn nominal(grid: &ValidatedGrid) -> Self {
        let (x, r) = (0..grid.n_vsc())
            .map(|k| (grid.vsc(k).x_nom, grid.vsc(k).r_nom))
            .unzip();
        DroopState { x, r }
    }

    pub fn with_r(mut self, slot: usize, r: f64) -> Self {
        self.r[slot] = r;
        self
    }

    pub fn with_resistances(mut self, r: &[f64]) -> Self {
        self.r.copy_from_slice(r);
        self
    }

    /// Offset reference voltages by a per-bus input vector (entries on
    /// buses without a converter must be zero).
    pub fn with_input(mut self, grid: &ValidatedGrid, dx: &[f64]) -> Result<Self> {
        if dx.len() != grid.n_buses() {
            return Err(Error::InvalidParameter(format!(
                "input vector has {} entries, grid has {} buses",
                dx.len(),
                grid.n_buses()
            )));
        }
        for (bus, &d) in dx.iter().enumerate() {
            match grid.vsc_slot(BusId(bus)) {
                Some(k) => self.x[k] += d,
                None if d != 0.0 => return Err(Error::InputOnLoadBus(BusId(bus))),
                None => {}
            }
        }
        Ok(self)
    }

    pub fn check(&self, grid: &ValidatedGrid) -> Result<()> {
        if self.x.len() != grid.n_vsc() || self.r.len() != grid.n_vsc() {
            return Err(Error::InvalidParameter(format!(
                "droop state has {}/{} entries, grid has {} converters",
                self.x.len(),
                self.r.len(),
                grid.n_vsc()
            )));
        }
        for (k, &r) in self.r.iter().enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::NonpositiveResistance {
                    what: format!("virtual resistance at bus {}", grid.vsc_buses()[k]),
                    value: r,
                });
            }
        }
        if let Some(x) = self.x.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "reference voltage must be finite, got {x}"
            )));
        }
        Ok(())
    }

    /// Reference voltage per bus, zero where no converter is hosted.
    pub(crate) fn x_per_bus(&self, grid: &ValidatedGrid) -> Vec<f64> {
        let mut x = vec![0.0; grid.n_buses()];
        for (k, bus) in grid.vsc_buses().iter().enumerate() {
            x[bus.0] = self.x[k];
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum SolverMethod {
    /// Damped Gauss-Seidel sweeps over the per-bus quadratic roots.
    #[default]
    GaussSeidel,
    /// Full-system Newton iteration on the current-balance residual.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Max absolute current-balance residual (A).
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation factor for Gauss-Seidel updates.
    pub damping: f64,
    pub method: SolverMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 10_000,
            damping: 0.7,
            method: SolverMethod::GaussSeidel,
        }
    }
}

impl SolverOptions {
    pub fn newton() -> Self {
        SolverOptions {
            method: SolverMethod::Newton,
            max_iter: 100,
            ..Default::default()
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyState {
    /// Bus voltages (V).
    pub v: Vec<f64>,
    /// Converter output currents (A), slot order.
    pub i: Vec<f64>,
    /// Converter output powers (W), slot order.
    pub p: Vec<f64>,
    /// Linearization factor per bus.
    pub kappa: Vec<f64>,
    /// Equivalent bus-to-ground resistance per bus (ohm).
    pub r_bus: Vec<f64>,
    /// Max current-balance residual at the returned voltages (A).
    pub residual: f64,
    pub iterations: usize,
}

/// Per-bus quantities that do not depend on the voltages.
struct BusTerms {
    // 1/r_bus
    a: Vec<f64>,
    // x_n/r_n, zero without converter
    drive: Vec<f64>,
    y: Vec<f64>,
    r_bus: Vec<f64>,
}

impl BusTerms {
    fn new(grid: &ValidatedGrid, droop: &DroopState) -> Self {
        let y = vsc_conductances(grid, droop);
        let x = droop.x_per_bus(grid);
        let r_bus = bus_resistances(grid, &y);
        BusTerms {
            a: r_bus.iter().map(|r| 1.0 / r).collect(),
            drive: x.iter().zip(&y).map(|(x, y)| x * y).collect(),
            y,
            r_bus,
        }
    }

    /// Linear coefficient `b` of the bus quadratic.
    fn linear_coeff(&self, grid: &ValidatedGrid, n: usize, v: &[f64]) -> f64 {
        let coupling: f64 = grid.neighbors(n).iter().map(|&(m, g)| g * v[m]).sum();
        self.drive[n] + coupling - grid.load(n).i_cc
    }
}

/// Current-balance residual per bus: converter current minus everything the
/// bus draws (loads and outgoing line currents).
pub fn current_residuals(grid: &ValidatedGrid, droop: &DroopState, v: &[f64]) -> Vec<f64> {
    let terms = BusTerms::new(grid, droop);
    residuals_with(grid, &terms, droop, v)
}

fn residuals_with(
    grid: &ValidatedGrid,
    terms: &BusTerms,
    droop: &DroopState,
    v: &[f64],
) -> Vec<f64> {
    let x = droop.x_per_bus(grid);
    (0..grid.n_buses())
        .map(|n| {
            let load = grid.load(n);
            let lines: f64 = grid
                .neighbors(n)
                .iter()
                .map(|&(m, g)| g * (v[n] - v[m]))
                .sum();
            terms.y[n] * (x[n] - v[n])
                - v[n] * load.conductance()
                - load.i_cc
                - load.d_cp / v[n]
                - lines
        })
        .collect()
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, r| acc.max(r.abs()))
}

fn initial_guess(grid: &ValidatedGrid) -> Vec<f64> {
    let n = grid.n_buses();
    let mut v = vec![f64::NAN; n];
    for (k, bus) in grid.vsc_buses().iter().enumerate() {
        v[bus.0] = grid.vsc(k).x_nom;
    }
    let mean_ref =
        (0..grid.n_vsc()).map(|k| grid.vsc(k).x_nom).sum::<f64>() / grid.n_vsc() as f64;
    let seed: Vec<f64> = v.iter().map(|x| if x.is_nan() { mean_ref } else { *x }).collect();
    for bus in 0..n {
        if v[bus].is_nan() {
            let adj = grid.neighbors(bus);
            v[bus] = adj.iter().map(|&(m, _)| seed[m]).sum::<f64>() / adj.len() as f64;
        }
    }
    v
}

pub fn solve_steady_state(
    grid: &ValidatedGrid,
    droop: &DroopState,
    opts: &SolverOptions,
) -> Result<SteadyState> {
    solve_from(grid, droop, opts, initial_guess(grid))
}

/// Same as [`solve_steady_state`] but starting from a caller-provided voltage
/// vector, e.g. the solution at a neighboring droop configuration.
pub fn solve_steady_state_from(
    grid: &ValidatedGrid,
    droop: &DroopState,
    opts: &SolverOptions,
    initial: &[f64],
) -> Result<SteadyState> {
    if initial.len() != grid.n_buses() || initial.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter(
            "initial voltages must be positive, one per bus".into(),
        ));
    }
    solve_from(grid, droop, opts, initial.to_vec())
}

fn solve_from(
    grid: &ValidatedGrid,
    droop: &DroopState,
    opts: &SolverOptions,
    mut v: Vec<f64>,
) -> Result<SteadyState> {
    droop.check(grid)?;
    let terms = BusTerms::new(grid, droop);
    let (residual, iterations) = match opts.method {
        SolverMethod::GaussSeidel => gauss_seidel(grid, droop, &terms, opts, &mut v)?,
        SolverMethod::Newton => newton(grid, droop, &terms, opts, &mut v)?,
    };
    let kappa = kappa_factors(grid, &terms, &v);
    let out = vsc_outputs(grid, droop, &v);
    Ok(SteadyState {
        v,
        i: out.i,
        p: out.p,
        kappa,
        r_bus: terms.r_bus,
        residual,
        iterations,
    })
}

fn positive_root(terms: &BusTerms, n: usize, b: f64, d: f64) -> Result<f64> {
    let disc = b * b - 4.0 * terms.a[n] * d;
    if disc < 0.0 || b <= 0.0 {
        return Err(Error::NoRealRoot {
            bus: BusId(n),
            discriminant: disc,
        });
    }
    Ok((b + disc.sqrt()) / (2.0 * terms.a[n]))
}

fn gauss_seidel(
    grid: &ValidatedGrid,
    droop: &DroopState,
    terms: &BusTerms,
    opts: &SolverOptions,
    v: &mut [f64],
) -> Result<(f64, usize)> {
    let mut residual = max_abs(&residuals_with(grid, terms, droop, v));
    let mut sweeps = 0;
    while residual > opts.tol {
        if sweeps == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: sweeps,
                residual,
            });
        }
        for n in 0..grid.n_buses() {
            let b = terms.linear_coeff(grid, n, v);
            let root = positive_root(terms, n, b, grid.load(n).d_cp)?;
            v[n] += opts.damping * (root - v[n]);
        }
        sweeps += 1;
        residual = max_abs(&residuals_with(grid, terms, droop, v));
    }
    Ok((residual, sweeps))
}

fn newton(
    grid: &ValidatedGrid,
    droop: &DroopState,
    terms: &BusTerms,
    opts: &SolverOptions,
    v: &mut [f64],
) -> Result<(f64, usize)> {
    let n = grid.n_buses();
    let mut f = residuals_with(grid, terms, droop, v);
    let mut residual = max_abs(&f);
    let mut iters = 0;
    while residual > opts.tol {
        if iters == opts.max_iter {
            return Err(Error::NonConvergence {
                iterations: iters,
                residual,
            });
        }
        let mut jac = DMatrix::zeros(n, n);
        for row in 0..n {
            let load = grid.load(row);
            let mut diag = -(terms.y[row] + load.conductance()) + load.d_cp / (v[row] * v[row]);
            for &(m, g) in grid.neighbors(row) {
                jac[(row, m)] = g;
                diag -= g;
            }
            jac[(row, row)] = diag;
        }
        let rhs = -DVector::from_column_slice(&f);
        let step = jac.lu().solve(&rhs).ok_or(Error::SingularSystem)?;

        // backtrack to keep voltages positive and the residual decreasing
        let mut scale = 1.0;
        let accepted = loop {
            let trial: Vec<f64> = v.iter().zip(step.iter()).map(|(v, s)| v + scale * s).collect();
            if trial.iter().all(|&x| x > 0.0) {
                let tf = residuals_with(grid, terms, droop, &trial);
                let tr = max_abs(&tf);
                if tr < residual || scale < 1e-6 {
                    break Some((trial, tf, tr));
                }
            } else if scale < 1e-6 {
                break None;
            }
            scale *= 0.5;
        };
        let Some((trial, tf, tr)) = accepted else {
            let bus = (0..n).find(|&b| v[b] + step[b] <= 0.0).unwrap_or(0);
            return Err(Error::NoRealRoot {
                bus: BusId(bus),
                discriminant: f64::NAN,
            });
        };
        iters += 1;
        if tr >= residual {
            // stalled at round-off level
            if tr <= opts.tol.max(1e-9) {
                v.copy_from_slice(&trial);
                return Ok((tr, iters));
            }
            return Err(Error::NonConvergence {
                iterations: iters,
                residual: tr,
            });
        }
        v.copy_from_slice(&trial);
        f = tf;
        residual = tr;
    }
    Ok((residual, iters))
}

/// Linearization factor of every bus at voltages `v`.
///
/// Differentiating the bus quadratic gives `dv_n = r_bus * kappa_n * db_n`
/// with `kappa_n = (1 + b / sqrt(b^2 - 4 d_cp / r_bus)) / 2`; it is exactly
/// one on buses without constant-power load.
fn kappa_factors(grid: &ValidatedGrid, terms: &BusTerms, v: &[f64]) -> Vec<f64> {
    (0..grid.n_buses())
        .map(|n| {
            let d = grid.load(n).d_cp;
            if d == 0.0 {
                return 1.0;
            }
            let b = terms.linear_coeff(grid, n, v);
            0.5 * (1.0 + b / (b * b - 4.0 * terms.a[n] * d).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViabilityViolation {
    pub bus: BusId,
    /// Linear coefficient of the bus quadratic at the given neighbor voltages.
    pub drive: f64,
    /// `sqrt(4 d_cp / r_bus)`; a real positive root needs `drive >= threshold`.
    pub threshold: f64,
    /// Smallest admissible reference voltage, for converter buses.
    pub x_min: Option<f64>,
}

/// Ratio `b / sqrt(4 d_cp / r_bus)` per bus; infinite on buses without
/// constant-power load and positive drive.
pub fn viability_margins(grid: &ValidatedGrid, droop: &DroopState, v: &[f64]) -> Vec<f64> {
    let terms = BusTerms::new(grid, droop);
    (0..grid.n_buses())
        .map(|n| {
            let b = terms.linear_coeff(grid, n, v);
            let thr = (4.0 * grid.load(n).d_cp * terms.a[n]).sqrt();
            if thr == 0.0 {
                if b > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            } else {
                b / thr
            }
        })
        .collect()
}

/// Buses whose quadratic has no real positive root for the given neighbor
/// voltages. For a converter bus this is `x_n < r_n (sqrt(4 d/r_bus) -
/// sum v_m/r_nm + i_cc)`.
pub fn check_viability(
    grid: &ValidatedGrid,
    droop: &DroopState,
    v_neighbors: &[f64],
) -> Vec<ViabilityViolation> {
    let terms = BusTerms::new(grid, droop);
    (0..grid.n_buses())
        .filter_map(|n| {
            let load = grid.load(n);
            let b = terms.linear_coeff(grid, n, v_neighbors);
            let threshold = (4.0 * load.d_cp * terms.a[n]).sqrt();
            let ok = if load.d_cp > 0.0 { b >= threshold } else { b > 0.0 };
            if ok {
                return None;
            }
            let x_min = grid.vsc_slot(BusId(n)).map(|k| {
                let coupling: f64 = grid
                    .neighbors(n)
                    .iter()
                    .map(|&(m, g)| g * v_neighbors[m])
                    .sum();
                droop.r[k] * (threshold - coupling + load.i_cc)
            });
            Some(ViabilityViolation {
                bus: BusId(n),
                drive: b,
                threshold,
                x_min,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VscOutputs {
    pub i: Vec<f64>,
    pub p: Vec<f64>,
}

/// Converter currents `(x - v)/r` and powers `v (x - v)/r`, slot order.
pub fn vsc_outputs(grid: &ValidatedGrid, droop: &DroopState, v: &[f64]) -> VscOutputs {
    let (i, p) = grid
        .vsc_buses()
        .iter()
        .enumerate()
        .map(|(k, bus)| {
            let vn = v[bus.0];
            let i = (droop.x[k] - vn) / droop.r[k];
            (i, vn * (droop.x[k] - vn) / droop.r[k])
        })
        .unzip();
    VscOutputs { i, p }
}

/// Closed-form bus voltages for two converter buses feeding one load bus.
///
/// Each source is reduced to its Thevenin equivalent at the load bus, the
/// load-bus quadratic is solved directly, and the source-bus voltages follow
/// from the divider `v_n = r_bus,n (x_n/r_n + v_L/r_nL)`.
pub fn two_source_closed_form(grid: &ValidatedGrid, droop: &DroopState) -> Result<Vec<f64>> {
    droop.check(grid)?;
    let mismatch = |why: &str| Err(Error::TopologyMismatch(why.to_string()));
    if grid.n_buses() != 3 || grid.n_vsc() != 2 || grid.spec().lines.len() != 2 {
        return mismatch("need exactly three buses, two converters and two lines");
    }
    let load_bus = (0..3)
        .find(|&b| grid.vsc_slot(BusId(b)).is_none())
        .expect("one bus without converter");
    let mut sources = Vec::with_capacity(2);
    for (k, bus) in grid.vsc_buses().iter().enumerate() {
        if !grid.load(bus.0).is_empty() {
            return mismatch("converter buses must not host loads");
        }
        let Some(r_line) = grid.line_resistance(*bus, BusId(load_bus)) else {
            return mismatch("every converter bus must connect to the load bus");
        };
        sources.push((bus.0, droop.x[k], droop.r[k], r_line));
    }

    let load = grid.load(load_bus);
    let g_total: f64 =
        sources.iter().map(|s| 1.0 / (s.2 + s.3)).sum::<f64>() + load.conductance();
    let drive: f64 = sources.iter().map(|s| s.1 / (s.2 + s.3)).sum::<f64>() - load.i_cc;
    let disc = drive * drive - 4.0 * load.d_cp * g_total;
    if disc < 0.0 || drive <= 0.0 {
        return Err(Error::NoRealRoot {
            bus: BusId(load_bus),
            discriminant: disc,
        });
    }
    let v_load = (drive + disc.sqrt()) / (2.0 * g_total);

    let mut v = vec![0.0; 3];
    v[load_bus] = v_load;
    for (bus, x, r, r_line) in sources {
        let r_bus = 1.0 / (1.0 / r + 1.0 / r_line);
        v[bus] = r_bus * (x / r + v_load / r_line);
    }
    Ok(v)
}
