//! Power-deviation budget bookkeeping.
//!
//! A converter's supplied power may deviate from its nominal value by at most
//! `pi` in RMS. Moving a virtual resistance away from nominal consumes part of
//! that budget permanently (`dp_vr`); the rest bounds the variance of the
//! reference-voltage inputs through
//! `sum_m phi_nm^2 E[dx_m^2] <= pi_n^2 - dp_vr_n^2` for every converter `n`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{BusId, ValidatedGrid};
use crate::steady_state::{solve_steady_state, DroopState, SolverOptions, SteadyState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetAllocation {
    pub transmitters: Vec<BusId>,
    /// Input variance E[dx^2] per transmitter (V^2), aligned with `transmitters`.
    pub s: Vec<f64>,
    /// Power investment of the virtual-resistance change, slot order (W).
    pub dp_vr: Vec<f64>,
    pub feasible: bool,
    /// Unused budget `pi^2 - dp_vr^2 - sum phi^2 s`, slot order (W^2).
    pub slack: Vec<f64>,
}

/// Allocation objective when several converters transmit at once.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AllocationMode {
    /// Every transmitter gets the same, largest feasible variance.
    #[default]
    EqualVariance,
    /// Maximize `sum_m w_m E[dx_m^2]` over the same constraint rows.
    Weighted(Vec<f64>),
}

/// Change in supplied power caused by moving from `droop_nom` to `droop_new`
/// with unchanged reference voltages, per converter.
pub fn vr_power_investment(
    grid: &ValidatedGrid,
    droop_nom: &DroopState,
    droop_new: &DroopState,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    let nom = solve_steady_state(grid, droop_nom, opts)?;
    let new = solve_steady_state(grid, droop_new, opts)?;
    investment_from_states(droop_nom, &nom, droop_new, &new)
}

/// [`vr_power_investment`] from already solved operating points.
pub fn investment_from_states(
    droop_nom: &DroopState,
    nom: &SteadyState,
    droop_new: &DroopState,
    new: &SteadyState,
) -> Result<Vec<f64>> {
    if droop_nom.x != droop_new.x {
        return Err(Error::InvalidParameter(
            "power investment compares states with identical reference voltages".into(),
        ));
    }
    Ok(new.p.iter().zip(&nom.p).map(|(p, p0)| p - p0).collect())
}

fn check_inputs(
    grid: &ValidatedGrid,
    phi: &DMatrix<f64>,
    pi: &[f64],
    dp_vr: &[f64],
    transmitters: &[BusId],
) -> Result<Vec<f64>> {
    let n_vsc = grid.n_vsc();
    if pi.len() != n_vsc || dp_vr.len() != n_vsc {
        return Err(Error::InvalidParameter(format!(
            "expected {n_vsc} budgets and investments, got {} and {}",
            pi.len(),
            dp_vr.len()
        )));
    }
    if phi.nrows() != grid.n_buses() || phi.ncols() != grid.n_buses() {
        return Err(Error::InvalidParameter("power coefficient matrix has wrong shape".into()));
    }
    if transmitters.is_empty() {
        return Err(Error::InvalidParameter("no transmitter given".into()));
    }
    for (i, t) in transmitters.iter().enumerate() {
        if grid.vsc_slot(*t).is_none() {
            return Err(Error::InputOnLoadBus(*t));
        }
        if transmitters[..i].contains(t) {
            return Err(Error::InvalidParameter(format!("transmitter {t} listed twice")));
        }
    }
    if let Some(p) = pi.iter().find(|p| !(**p >= 0.0)) {
        return Err(Error::InvalidParameter(format!("budget must be >= 0, got {p}")));
    }
    let capacity: Vec<f64> = pi.iter().zip(dp_vr).map(|(p, d)| p * p - d * d).collect();
    for (k, c) in capacity.iter().enumerate() {
        if *c < 0.0 {
            return Err(Error::InfeasibleBudget {
                bus: grid.vsc_buses()[k],
                slack: *c,
            });
        }
    }
    Ok(capacity)
}

fn finish(
    grid: &ValidatedGrid,
    phi: &DMatrix<f64>,
    capacity: &[f64],
    dp_vr: &[f64],
    transmitters: &[BusId],
    s: Vec<f64>,
) -> BudgetAllocation {
    let slack: Vec<f64> = grid
        .vsc_buses()
        .iter()
        .zip(capacity)
        .map(|(bus, c)| {
            let used: f64 = transmitters
                .iter()
                .zip(&s)
                .map(|(t, s)| phi[(bus.0, t.0)].powi(2) * s)
                .sum();
            c - used
        })
        .collect();
    let feasible = slack
        .iter()
        .zip(capacity)
        .all(|(sl, c)| *sl >= -1e-9 * c.max(1e-300));
    BudgetAllocation {
        transmitters: transmitters.to_vec(),
        s,
        dp_vr: dp_vr.to_vec(),
        feasible,
        slack,
    }
}

/// Largest common input variance satisfying every converter's budget row.
///
/// With one transmitter `t` this is `min_n (pi_n^2 - dp_vr_n^2) / phi_nt^2`;
/// rows with no sensitivity to any transmitter do not constrain.
pub fn allocate_input_variance(
    grid: &ValidatedGrid,
    phi: &DMatrix<f64>,
    pi: &[f64],
    dp_vr: &[f64],
    transmitters: &[BusId],
) -> Result<BudgetAllocation> {
    let capacity = check_inputs(grid, phi, pi, dp_vr, transmitters)?;
    let common = grid
        .vsc_buses()
        .iter()
        .zip(&capacity)
        .filter_map(|(bus, c)| {
            let load: f64 = transmitters.iter().map(|t| phi[(bus.0, t.0)].powi(2)).sum();
            (load > 0.0).then(|| c / load)
        })
        .fold(f64::INFINITY, f64::min);
    let s = vec![common; transmitters.len()];
    Ok(finish(grid, phi, &capacity, dp_vr, transmitters, s))
}

/// Allocation under an explicit objective; see [`AllocationMode`].
pub fn allocate_input_variance_with(
    grid: &ValidatedGrid,
    phi: &DMatrix<f64>,
    pi: &[f64],
    dp_vr: &[f64],
    transmitters: &[BusId],
    mode: &AllocationMode,
) -> Result<BudgetAllocation> {
    let weights = match mode {
        AllocationMode::EqualVariance => {
            return allocate_input_variance(grid, phi, pi, dp_vr, transmitters)
        }
        AllocationMode::Weighted(w) => w,
    };
    let capacity = check_inputs(grid, phi, pi, dp_vr, transmitters)?;
    if weights.len() != transmitters.len() || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidParameter(
            "one non-negative weight per transmitter required".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = grid
        .vsc_buses()
        .iter()
        .map(|bus| transmitters.iter().map(|t| phi[(bus.0, t.0)].powi(2)).collect())
        .collect();
    let s = packing_lp(weights, &rows, &capacity).ok_or_else(|| {
        Error::InvalidParameter("weighted allocation is unbounded: a transmitter has no budget row".into())
    })?;
    Ok(finish(grid, phi, &capacity, dp_vr, transmitters, s))
}

/// Solve `max c.s  s.t.  A s <= b, s >= 0` with `A, b >= 0` by the tableau
/// simplex method, starting from the slack basis. Bland's rule prevents
/// cycling. Returns `None` when unbounded.
fn packing_lp(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    const EPS: f64 = 1e-12;
    let (m, n) = (a.len(), c.len());
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    loop {
        let Some(col) = (0..n + m).find(|&j| t[m][j] < -EPS) else {
            break;
        };
        let mut pivot: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                let better = match pivot {
                    None => true,
                    Some((p, best)) => {
                        ratio < best - EPS || (ratio <= best + EPS && basis[i] < basis[p])
                    }
                };
                if better {
                    pivot = Some((i, ratio));
                }
            }
        }
        let (row, _) = pivot?;
        let scale = t[row][col];
        for v in t[row].iter_mut() {
            *v /= scale;
        }
        let pivot_row = t[row].clone();
        for (i, r) in t.iter_mut().enumerate() {
            if i != row && r[col] != 0.0 {
                let f = r[col];
                for (v, p) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
        basis[row] = col;
    }

    let mut s = vec![0.0; n];
    for (i, &j) in basis.iter().enumerate() {
        if j < n {
            s[j] = t[i][width - 1].max(0.0);
        }
    }
    Some(s)
}
