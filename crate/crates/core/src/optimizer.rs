//! One-way SNR maximization over virtual resistances.
//!
//! For a link `tx -> rx` and a droop configuration, every converter `n`
//! bounds the transmitter's input variance; the received SNR is
//!
//! ```text
//! snr = min_n g_n / sigma_z^2,   g_n = h_rx,tx^2 / phi_n,tx^2 * (pi_n^2 - dp_vr_n^2)
//! ```
//!
//! The channel gain, the power coefficients and the investment `dp_vr` do
//! not depend on the budget, so a [`SearchGrid`] evaluates them once per
//! virtual-resistance point and any number of budgets can be scanned on it.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::budget::investment_from_states;
use crate::channel::linearize;
use crate::error::{Error, Result};
use crate::grid::{BusId, ValidatedGrid};
use crate::steady_state::{
    solve_steady_state, solve_steady_state_from, viability_margins, DroopState, SolverOptions,
    SteadyState,
};

/// Default virtual-resistance grid step (ohm).
pub const DEFAULT_STEP: f64 = 0.005;
/// Relative margin on the viability condition used to derive a default `r_max`.
pub const VIABILITY_MARGIN: f64 = 1.1;
/// Default `r_max` never exceeds this multiple of `r_nom`.
pub const R_MAX_CAP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Link {
    pub tx: BusId,
    pub rx: BusId,
}

impl Link {
    pub fn new(tx: BusId, rx: BusId) -> Self {
        Link { tx, rx }
    }

    fn check(&self, grid: &ValidatedGrid) -> Result<()> {
        if grid.vsc_slot(self.tx).is_none() {
            return Err(Error::InputOnLoadBus(self.tx));
        }
        if grid.vsc_slot(self.rx).is_none() {
            return Err(Error::InvalidParameter(format!(
                "receiver bus {} hosts no converter",
                self.rx
            )));
        }
        if self.tx == self.rx {
            return Err(Error::InvalidParameter("transmitter and receiver must differ".into()));
        }
        Ok(())
    }
}

/// Budget-independent link quantities at one droop configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkSample {
    /// Virtual resistances, slot order.
    pub r: Vec<f64>,
    /// Channel gain h_rx,tx.
    pub gain: f64,
    /// Power coefficient phi_n,tx for every converter, slot order.
    pub phi_tx: Vec<f64>,
    /// Supplied-power investment relative to nominal, slot order.
    pub dp_vr: Vec<f64>,
}

impl LinkSample {
    /// `g_n` for every converter; infinite where a converter's power does not
    /// react to the transmitter.
    pub fn g_values(&self, pi: &[f64]) -> Vec<f64> {
        self.phi_tx
            .iter()
            .zip(pi.iter().zip(&self.dp_vr))
            .map(|(phi, (p, d))| {
                if *phi == 0.0 {
                    f64::INFINITY
                } else {
                    self.gain * self.gain / (phi * phi) * (p * p - d * d)
                }
            })
            .collect()
    }

    pub fn min_g(&self, pi: &[f64]) -> f64 {
        self.g_values(pi).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn snr(&self, pi: &[f64], sigma_z: f64) -> f64 {
        (self.min_g(pi) / (sigma_z * sigma_z)).max(0.0)
    }
}

/// Evaluates [`LinkSample`]s for one link against a fixed nominal state.
pub struct Evaluator<'a> {
    grid: &'a ValidatedGrid,
    nominal: DroopState,
    nominal_state: SteadyState,
    link: Link,
    opts: SolverOptions,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        grid: &'a ValidatedGrid,
        nominal: &DroopState,
        link: Link,
        opts: SolverOptions,
    ) -> Result<Self> {
        link.check(grid)?;
        let nominal_state = solve_steady_state(grid, nominal, &opts)?;
        Ok(Evaluator {
            grid,
            nominal: nominal.clone(),
            nominal_state,
            link,
            opts,
        })
    }

    pub fn nominal(&self) -> &DroopState {
        &self.nominal
    }

    pub fn link(&self) -> Link {
        self.link
    }

    pub fn sample(&self, r: &[f64]) -> Result<LinkSample> {
        let droop = self.nominal.clone().with_resistances(r);
        self.sample_droop(&droop)
    }

    pub fn sample_droop(&self, droop: &DroopState) -> Result<LinkSample> {
        let state =
            solve_steady_state_from(self.grid, droop, &self.opts, &self.nominal_state.v)?;
        let model = linearize(self.grid, droop, &state)?;
        let dp_vr = investment_from_states(&self.nominal, &self.nominal_state, droop, &state)?;
        let tx = self.link.tx.0;
        Ok(LinkSample {
            r: droop.r.clone(),
            gain: model.h[(self.link.rx.0, tx)],
            phi_tx: self
                .grid
                .vsc_buses()
                .iter()
                .map(|b| model.phi[(b.0, tx)])
                .collect(),
            dp_vr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrEvaluation {
    pub snr: f64,
    /// `g_n` per converter, slot order.
    pub g: Vec<f64>,
    pub gain: f64,
    pub phi_tx: Vec<f64>,
    pub dp_vr: Vec<f64>,
}

/// Received SNR of `link` at `droop`, with budget investments measured from
/// `nominal`.
pub fn one_way_snr(
    grid: &ValidatedGrid,
    droop: &DroopState,
    nominal: &DroopState,
    pi: &[f64],
    sigma_z: f64,
    link: Link,
) -> Result<SnrEvaluation> {
    check_budget_args(grid, pi, sigma_z)?;
    let eval = Evaluator::new(grid, nominal, link, SolverOptions::default())?;
    let s = eval.sample_droop(droop)?;
    Ok(SnrEvaluation {
        snr: s.snr(pi, sigma_z),
        g: s.g_values(pi),
        gain: s.gain,
        phi_tx: s.phi_tx,
        dp_vr: s.dp_vr,
    })
}

fn check_budget_args(grid: &ValidatedGrid, pi: &[f64], sigma_z: f64) -> Result<()> {
    if pi.len() != grid.n_vsc() {
        return Err(Error::InvalidParameter(format!(
            "expected {} budgets, got {}",
            grid.n_vsc(),
            pi.len()
        )));
    }
    if let Some(p) = pi.iter().find(|p| !(**p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidParameter(format!("budget must be >= 0, got {p}")));
    }
    if !(sigma_z > 0.0 && sigma_z.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma_z must be > 0, got {sigma_z}")));
    }
    Ok(())
}

/// Capacity of the scalar Gaussian link in bits per slot.
pub fn capacity(snr: f64) -> f64 {
    if snr < 0.0 {
        return f64::NAN;
    }
    0.5 * snr.ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOptions {
    pub step: f64,
    /// Per-converter upper bounds overriding the nameplate / derived default.
    pub r_max: Option<Vec<f64>>,
    /// Re-search at `step / 10` around the incumbent.
    pub refine: bool,
    /// Operating-point solver; Newton by default, which converges in a few
    /// steps at large virtual resistances where Gauss-Seidel crawls.
    pub solver: SolverOptions,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            step: DEFAULT_STEP,
            r_max: None,
            refine: false,
            solver: SolverOptions::newton(),
        }
    }
}

impl SearchOptions {
    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }
}

/// Largest virtual resistance of converter `slot` (others nominal) for which
/// every bus keeps a 10% margin on the viability condition, capped at
/// `10 r_nom`. A nameplate `r_max` takes precedence.
pub fn default_r_max(
    grid: &ValidatedGrid,
    nominal: &DroopState,
    slot: usize,
    opts: &SolverOptions,
) -> f64 {
    let vsc = grid.vsc(slot);
    if let Some(r) = vsc.r_max {
        return r;
    }
    let r_nom = nominal.r[slot];
    let cap = R_MAX_CAP * r_nom;
    let viable = |r: f64| {
        let droop = nominal.clone().with_r(slot, r);
        match solve_steady_state(grid, &droop, opts) {
            Ok(s) => viability_margins(grid, &droop, &s.v)
                .iter()
                .all(|m| *m >= VIABILITY_MARGIN),
            Err(_) => false,
        }
    };
    if !viable(r_nom) {
        return r_nom;
    }
    const SCAN: usize = 100;
    let mut good = r_nom;
    for i in 1..=SCAN {
        let r = r_nom + (cap - r_nom) * i as f64 / SCAN as f64;
        if viable(r) {
            good = r;
            continue;
        }
        let mut bad = r;
        for _ in 0..60 {
            let mid = 0.5 * (good + bad);
            if viable(mid) {
                good = mid;
            } else {
                bad = mid;
            }
        }
        return good;
    }
    cap
}

/// Exhaustively evaluated virtual-resistance lattice for one link.
#[derive(Debug, Clone)]
pub struct SearchGrid {
    /// Lattice values per converter, slot order.
    pub axes: Vec<Vec<f64>>,
    /// Samples in lexicographic index order (slot 0 most significant);
    /// `None` where the operating point could not be solved.
    pub samples: Vec<Option<LinkSample>>,
    pub step: f64,
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let count = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=count).map(|i| lo + i as f64 * step).collect()
}

impl SearchGrid {
    pub fn build(
        grid: &ValidatedGrid,
        nominal: &DroopState,
        link: Link,
        opts: &SearchOptions,
    ) -> Result<Self> {
        if !(opts.step > 0.0 && opts.step.is_finite()) {
            return Err(Error::InvalidParameter(format!("step must be > 0, got {}", opts.step)));
        }
        let bounds = search_bounds(grid, nominal, opts)?;
        let axes: Vec<Vec<f64>> = bounds.iter().map(|(lo, hi)| axis(*lo, *hi, opts.step)).collect();
        let eval = Evaluator::new(grid, nominal, link, opts.solver)?;
        let samples = evaluate_lattice(&eval, &axes);
        Ok(SearchGrid {
            axes,
            samples,
            step: opts.step,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Multi-index of a flat lattice position.
    pub fn index_of(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for (k, ax) in self.axes.iter().enumerate().rev() {
            idx[k] = flat % ax.len();
            flat /= ax.len();
        }
        idx
    }

    pub fn flat_of(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (i, ax)| acc * ax.len() + i)
    }

    /// Lattice neighbors one step away along each axis.
    pub fn neighbors(&self, flat: usize) -> Vec<usize> {
        let idx = self.index_of(flat);
        let mut out = Vec::new();
        for k in 0..idx.len() {
            for delta in [-1i64, 1] {
                let j = idx[k] as i64 + delta;
                if j >= 0 && (j as usize) < self.axes[k].len() {
                    let mut n = idx.clone();
                    n[k] = j as usize;
                    out.push(self.flat_of(&n));
                }
            }
        }
        out
    }

    /// Best lattice point for the given budgets: highest SNR, ties broken by
    /// the lexicographically smallest resistances.
    pub fn best(&self, pi: &[f64], sigma_z: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.samples.iter().enumerate() {
            let Some(s) = s else { continue };
            let snr = s.snr(pi, sigma_z);
            if best.is_none_or(|(_, b)| snr > b) {
                best = Some((i, snr));
            }
        }
        best
    }

    pub fn excluded(&self) -> usize {
        self.samples.iter().filter(|s| s.is_none()).count()
    }
}

fn search_bounds(
    grid: &ValidatedGrid,
    nominal: &DroopState,
    opts: &SearchOptions,
) -> Result<Vec<(f64, f64)>> {
    nominal.check(grid)?;
    if let Some(r) = &opts.r_max {
        if r.len() != grid.n_vsc() {
            return Err(Error::InvalidParameter(format!(
                "expected {} r_max values, got {}",
                grid.n_vsc(),
                r.len()
            )));
        }
    }
    (0..grid.n_vsc())
        .map(|k| {
            let lo = nominal.r[k];
            let hi = match &opts.r_max {
                Some(r) => r[k],
                None => default_r_max(grid, nominal, k, &opts.solver),
            };
            if hi < lo {
                return Err(Error::EmptySearchSpace {
                    bus: grid.vsc_buses()[k],
                    r_nom: lo,
                    r_max: hi,
                });
            }
            Ok((lo, hi))
        })
        .collect()
}

fn evaluate_lattice(eval: &Evaluator<'_>, axes: &[Vec<f64>]) -> Vec<Option<LinkSample>> {
    let total: usize = axes.iter().map(Vec::len).product();
    (0..total)
        .into_par_iter()
        .map(|mut flat| {
            let mut r = vec![0.0; axes.len()];
            for (k, ax) in axes.iter().enumerate().rev() {
                r[k] = ax[flat % ax.len()];
                flat /= ax.len();
            }
            eval.sample(&r).ok()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationResult {
    /// Optimal virtual resistances, slot order.
    pub r_star: Vec<f64>,
    pub snr: f64,
    pub capacity: f64,
    /// `g_n` at the optimum, slot order.
    pub g_values: Vec<f64>,
    pub dp_vr: Vec<f64>,
    pub snr_nominal: f64,
    pub capacity_nominal: f64,
    pub grid_step: f64,
    pub evaluations: usize,
    /// Lattice points whose operating point could not be solved.
    pub excluded: usize,
    pub r_max: Vec<f64>,
}

fn result_from(
    search: &SearchGrid,
    eval: &Evaluator<'_>,
    pi: &[f64],
    sigma_z: f64,
    refine: bool,
) -> Result<OptimizationResult> {
    let nominal_sample = search.samples[0]
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("nominal operating point is not solvable".into()))?;
    let snr_nominal = nominal_sample.snr(pi, sigma_z);
    let (flat, _) = search.best(pi, sigma_z).expect("nominal sample exists");
    let mut best = search.samples[flat].clone().expect("best sample exists");
    let mut evaluations = search.len() - search.excluded();
    let mut step = search.step;

    if refine {
        let fine = search.step / 10.0;
        let local: Vec<Vec<f64>> = best
            .r
            .iter()
            .zip(&search.axes)
            .map(|(r, ax)| {
                let lo = (r - search.step).max(ax[0]);
                let hi = (r + search.step).min(*ax.last().unwrap());
                axis(lo, hi, fine)
            })
            .collect();
        let mut best_snr = best.snr(pi, sigma_z);
        for s in evaluate_lattice(eval, &local).into_iter().flatten() {
            evaluations += 1;
            let snr = s.snr(pi, sigma_z);
            if snr > best_snr {
                best_snr = snr;
                best = s;
            }
        }
        step = fine;
    }

    let snr = best.snr(pi, sigma_z);
    Ok(OptimizationResult {
        r_star: best.r.clone(),
        snr,
        capacity: capacity(snr),
        g_values: best.g_values(pi),
        dp_vr: best.dp_vr.clone(),
        snr_nominal,
        capacity_nominal: capacity(snr_nominal),
        grid_step: step,
        evaluations,
        excluded: search.excluded(),
        r_max: search.axes.iter().map(|a| *a.last().unwrap()).collect(),
    })
}

/// Grid search of the virtual resistances maximizing the received SNR.
pub fn maximize_snr_grid(
    grid: &ValidatedGrid,
    nominal: &DroopState,
    pi: &[f64],
    sigma_z: f64,
    link: Link,
    opts: &SearchOptions,
) -> Result<OptimizationResult> {
    check_budget_args(grid, pi, sigma_z)?;
    let search = SearchGrid::build(grid, nominal, link, opts)?;
    let eval = Evaluator::new(grid, nominal, link, opts.solver)?;
    result_from(&search, &eval, pi, sigma_z, opts.refine)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub pi: f64,
    pub capacity_nominal: f64,
    pub capacity_opt: f64,
    pub r_star: Vec<f64>,
    pub snr_nominal: f64,
    pub snr_opt: f64,
}

/// Capacity before and after optimization for equal budgets on every
/// converter, one row per budget.
pub fn capacity_sweep(
    grid: &ValidatedGrid,
    nominal: &DroopState,
    pi_range: &[f64],
    sigma_z: f64,
    link: Link,
    opts: &SearchOptions,
) -> Result<Vec<SweepRow>> {
    if pi_range.is_empty() {
        return Err(Error::InvalidParameter("budget range is empty".into()));
    }
    if pi_range.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter("budget range must be ascending".into()));
    }
    for &p in pi_range {
        check_budget_args(grid, &vec![p; grid.n_vsc()], sigma_z)?;
    }
    let search = SearchGrid::build(grid, nominal, link, opts)?;
    let eval = Evaluator::new(grid, nominal, link, opts.solver)?;
    pi_range
        .iter()
        .map(|&p| {
            let pi = vec![p; grid.n_vsc()];
            let res = result_from(&search, &eval, &pi, sigma_z, opts.refine)?;
            Ok(SweepRow {
                pi: p,
                capacity_nominal: res.capacity_nominal,
                capacity_opt: res.capacity,
                r_star: res.r_star,
                snr_nominal: res.snr_nominal,
                snr_opt: res.snr,
            })
        })
        .collect()
}

/// Relative tolerance on the largest Hessian eigenvalue.
pub const CONCAVITY_TOL: f64 = 1e-6;
/// Finite-difference step for the Hessian and gradient probes (ohm).
pub const PROBE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbePoint {
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    /// Hessian eigenvalues of each `g_n`, ascending.
    pub eigenvalues: Vec<Vec<f64>>,
    /// Largest eigenvalue over the spectral norm, per `g_n`.
    pub max_eig_ratio: Vec<f64>,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConcavityReport {
    pub points: Vec<ProbePoint>,
    pub violations: usize,
    pub tolerance: f64,
    /// Interior lattice points of the positive-SNR region the sample was drawn from.
    pub interior_candidates: usize,
    /// Central-difference gradient of each `g_n` at nominal resistances.
    pub gradient_at_nominal: Vec<Vec<f64>>,
    /// Derivative of each `g_n` when all resistances increase together.
    pub joint_derivative_at_nominal: Vec<f64>,
    /// Every `g_n` grows when any resistance, or all of them jointly, is
    /// raised from nominal.
    pub increase_beyond_nominal: bool,
}

/// Central-difference Hessians of every output of `f` at `r`, together with
/// the smallest output value seen on the stencil.
fn fd_hessian(
    f: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    r: &[f64],
    h: f64,
) -> Result<(Vec<DMatrix<f64>>, f64)> {
    let dim = r.len();
    let mut lowest = f64::INFINITY;
    let mut at = |offsets: &[(usize, f64)]| -> Result<Vec<f64>> {
        let mut p = r.to_vec();
        for &(k, d) in offsets {
            p[k] += d;
        }
        let out = f(&p)?;
        lowest = out.iter().copied().fold(lowest, f64::min);
        Ok(out)
    };
    let f0 = at(&[])?;
    let outputs = f0.len();
    let mut hess = vec![DMatrix::zeros(dim, dim); outputs];
    for i in 0..dim {
        let fp = at(&[(i, h)])?;
        let fm = at(&[(i, -h)])?;
        for o in 0..outputs {
            hess[o][(i, i)] = (fp[o] - 2.0 * f0[o] + fm[o]) / (h * h);
        }
        for j in (i + 1)..dim {
            let fpp = at(&[(i, h), (j, h)])?;
            let fpm = at(&[(i, h), (j, -h)])?;
            let fmp = at(&[(i, -h), (j, h)])?;
            let fmm = at(&[(i, -h), (j, -h)])?;
            for o in 0..outputs {
                let v = (fpp[o] - fpm[o] - fmp[o] + fmm[o]) / (4.0 * h * h);
                hess[o][(i, j)] = v;
                hess[o][(j, i)] = v;
            }
        }
    }
    Ok((hess, lowest))
}

fn probe_point(r: Vec<f64>, g: Vec<f64>, hess: Vec<DMatrix<f64>>) -> ProbePoint {
    let mut eigenvalues = Vec::new();
    let mut ratios = Vec::new();
    for h in hess {
        let mut ev: Vec<f64> = SymmetricEigen::new(h).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let norm = ev.iter().fold(0.0_f64, |a, e| a.max(e.abs()));
        let top = *ev.last().expect("square matrix has eigenvalues");
        ratios.push(if norm > 0.0 { top / norm } else { 0.0 });
        eigenvalues.push(ev);
    }
    ProbePoint {
        violation: ratios.iter().any(|r| *r > CONCAVITY_TOL),
        r,
        g,
        eigenvalues,
        max_eig_ratio: ratios,
    }
}

/// Numerical concavity check of every `g_n` over the region `R` where all
/// budgets hold (every `g_n >= 0`).
///
/// A lattice point is interior when its whole finite-difference stencil lies
/// in `R` and inside the search box. `R` can be a strip only a few lattice
/// steps wide, so lattice neighbors are not required to be in `R`. Interior
/// points are sampled evenly in lattice order; at each, the central-difference
/// Hessian of each `g_n` must have its largest eigenvalue below
/// `CONCAVITY_TOL` times its spectral norm.
pub fn concavity_probe(
    grid: &ValidatedGrid,
    nominal: &DroopState,
    pi: &[f64],
    link: Link,
    samples: usize,
    opts: &SearchOptions,
) -> Result<ConcavityReport> {
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one probe sample".into()));
    }
    check_budget_args(grid, pi, 1.0)?;
    let search = SearchGrid::build(grid, nominal, link, opts)?;
    let probe_solver = SolverOptions {
        tol: opts.solver.tol.min(1e-12),
        ..opts.solver
    };
    let eval = Evaluator::new(grid, nominal, link, probe_solver)?;
    let g_at = |r: &[f64]| -> Result<Vec<f64>> { Ok(eval.sample(r)?.g_values(pi)) };

    let candidates: Vec<&LinkSample> = search
        .samples
        .iter()
        .flatten()
        .filter(|s| {
            let inside_box = s
                .r
                .iter()
                .zip(&search.axes)
                .all(|(r, ax)| *r - PROBE_STEP >= ax[0] && *r + PROBE_STEP <= *ax.last().unwrap());
            inside_box && s.g_values(pi).iter().all(|g| *g > 0.0)
        })
        .collect();
    let interior: Vec<ProbePoint> = candidates
        .par_iter()
        .map(|s| -> Result<Option<ProbePoint>> {
            let (hess, lowest) = fd_hessian(&g_at, &s.r, PROBE_STEP)?;
            if lowest < 0.0 {
                return Ok(None);
            }
            Ok(Some(probe_point(s.r.clone(), s.g_values(pi), hess)))
        })
        .filter_map(|p| p.transpose())
        .collect::<Result<_>>()?;

    let interior_candidates = interior.len();
    let points: Vec<ProbePoint> = if interior.len() <= samples {
        interior
    } else {
        let last = interior.len() - 1;
        (0..samples)
            .map(|k| interior[k * last / (samples - 1).max(1)].clone())
            .collect()
    };

    // central differences: g is smooth through nominal, and the -dp_vr^2
    // term's large curvature would bias a one-sided estimate
    let r0 = nominal.r.clone();
    let directional = |dir: &[f64]| -> Result<Vec<f64>> {
        let shift = |sign: f64| -> Vec<f64> {
            r0.iter().zip(dir).map(|(r, d)| r + sign * PROBE_STEP * d).collect()
        };
        let (up, down) = (g_at(&shift(1.0))?, g_at(&shift(-1.0))?);
        Ok(up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * PROBE_STEP)).collect())
    };
    let mut gradient = vec![vec![0.0; r0.len()]; pi.len()];
    for k in 0..r0.len() {
        let mut unit = vec![0.0; r0.len()];
        unit[k] = 1.0;
        for (o, d) in directional(&unit)?.into_iter().enumerate() {
            gradient[o][k] = d;
        }
    }
    let joint = directional(&vec![1.0; r0.len()])?;

    Ok(ConcavityReport {
        violations: points.iter().filter(|p| p.violation).count(),
        points,
        tolerance: CONCAVITY_TOL,
        interior_candidates,
        increase_beyond_nominal: gradient.iter().flatten().chain(&joint).all(|d| *d >= 0.0),
        gradient_at_nominal: gradient,
        joint_derivative_at_nominal: joint,
    })
}
