//! Network description: buses, loads, converters and distribution lines.
//!
//! A [`GridSpec`] is plain data as read from a configuration document.
//! [`validate_grid`] checks it and produces a [`ValidatedGrid`], which carries
//! the per-bus adjacency used by every solver in the crate.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steady_state::DroopState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub usize);

impl BusId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Parallel combination of a resistive, a constant-current and a
/// constant-power load at one bus.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoadSpec {
    /// Shunt resistance in ohm; `None` means no resistive component.
    pub r_cr: Option<f64>,
    /// Constant current draw in A.
    pub i_cc: f64,
    /// Constant power draw in W.
    pub d_cp: f64,
}

impl LoadSpec {
    pub fn new(r_cr: Option<f64>, i_cc: f64, d_cp: f64) -> Self {
        LoadSpec { r_cr, i_cc, d_cp }
    }

    /// Shunt conductance 1/r_cr, zero when the resistive component is absent.
    pub fn conductance(&self) -> f64 {
        self.r_cr.map_or(0.0, |r| 1.0 / r)
    }

    pub fn is_empty(&self) -> bool {
        self.r_cr.is_none() && self.i_cc == 0.0 && self.d_cp == 0.0
    }
}

/// Nameplate of a droop-controlled voltage source converter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VscSpec {
    /// Nominal reference voltage (V).
    pub x_nom: f64,
    /// Nominal virtual resistance (ohm).
    pub r_nom: f64,
    /// Upper bound on the virtual resistance (ohm). When absent the optimizer
    /// derives one from the viability condition.
    pub r_max: Option<f64>,
    /// Power deviation budget (W).
    pub pi_budget: f64,
}

impl VscSpec {
    pub fn new(x_nom: f64, r_nom: f64) -> Self {
        VscSpec {
            x_nom,
            r_nom,
            r_max: None,
            pi_budget: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub a: BusId,
    pub b: BusId,
    /// Line resistance (ohm).
    pub r_line: f64,
}

impl LineSpec {
    pub fn new(a: BusId, b: BusId, r_line: f64) -> Self {
        LineSpec { a, b, r_line }
    }

    /// Distance-based line: r = rho * length.
    pub fn from_length(a: BusId, b: BusId, rho_ohm_per_km: f64, length_km: f64) -> Self {
        LineSpec::new(a, b, rho_ohm_per_km * length_km)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusSpec {
    pub id: BusId,
    pub name: Option<String>,
    pub load: LoadSpec,
    pub vsc: Option<VscSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GridSpec {
    pub buses: Vec<BusSpec>,
    pub lines: Vec<LineSpec>,
}

impl GridSpec {
    /// Three-bus test system: two converter buses A and B feeding a load bus C
    /// over lines of 0.3 km and 1 km (0.641 ohm/km).
    pub fn case_study() -> GridSpec {
        let rho = 0.641;
        let vsc = VscSpec {
            x_nom: 400.0,
            r_nom: 0.39,
            r_max: None,
            pi_budget: 10.0,
        };
        GridSpec {
            buses: vec![
                BusSpec {
                    id: BusId(0),
                    name: Some("A".into()),
                    load: LoadSpec::default(),
                    vsc: Some(vsc),
                },
                BusSpec {
                    id: BusId(1),
                    name: Some("B".into()),
                    load: LoadSpec::default(),
                    vsc: Some(vsc),
                },
                BusSpec {
                    id: BusId(2),
                    name: Some("C".into()),
                    load: LoadSpec::new(Some(50.0), 0.0, 2500.0),
                    vsc: None,
                },
            ],
            lines: vec![
                LineSpec::from_length(BusId(0), BusId(2), rho, 0.3),
                LineSpec::from_length(BusId(1), BusId(2), rho, 1.0),
            ],
        }
    }
}

/// A checked grid with adjacency and converter indexing.
///
/// Converter-indexed quantities (droop parameters, budgets, converter
/// outputs) are stored in "slot" order: slot `k` is the converter hosted on
/// bus `vsc_buses()[k]`, and buses are visited in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedGrid {
    spec: GridSpec,
    vsc_buses: Vec<BusId>,
    vsc_slot: Vec<Option<usize>>,
    // (neighbor index, line conductance), sorted by neighbor index
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl ValidatedGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n_buses(&self) -> usize {
        self.spec.buses.len()
    }

    pub fn n_vsc(&self) -> usize {
        self.vsc_buses.len()
    }

    pub fn vsc_buses(&self) -> &[BusId] {
        &self.vsc_buses
    }

    pub fn vsc_slot(&self, bus: BusId) -> Option<usize> {
        self.vsc_slot.get(bus.0).copied().flatten()
    }

    pub fn vsc(&self, slot: usize) -> &VscSpec {
        let bus = self.vsc_buses[slot];
        self.spec.buses[bus.0]
            .vsc
            .as_ref()
            .expect("slot refers to a converter bus")
    }

    pub fn bus(&self, bus: BusId) -> &BusSpec {
        &self.spec.buses[bus.0]
    }

    pub fn load(&self, bus: usize) -> &LoadSpec {
        &self.spec.buses[bus].load
    }

    pub fn neighbors(&self, bus: usize) -> &[(usize, f64)] {
        &self.neighbors[bus]
    }

    /// Line resistance between two buses, `None` when not directly connected.
    pub fn line_resistance(&self, a: BusId, b: BusId) -> Option<f64> {
        self.neighbors
            .get(a.0)?
            .iter()
            .find(|(m, _)| *m == b.0)
            .map(|(_, g)| 1.0 / g)
    }

    /// Resolve a bus by its name or its numeric id.
    pub fn resolve_bus(&self, key: &str) -> Option<BusId> {
        if let Some(b) = self
            .spec
            .buses
            .iter()
            .find(|b| b.name.as_deref() == Some(key))
        {
            return Some(b.id);
        }
        key.parse::<usize>()
            .ok()
            .filter(|&i| i < self.n_buses())
            .map(BusId)
    }

    pub fn bus_label(&self, bus: BusId) -> String {
        self.spec.buses[bus.0]
            .name
            .clone()
            .unwrap_or_else(|| bus.0.to_string())
    }

    /// Budgets from the converter nameplates, in slot order.
    pub fn budgets(&self) -> Vec<f64> {
        (0..self.n_vsc()).map(|k| self.vsc(k).pi_budget).collect()
    }
}

fn check_resistance(what: impl FnOnce() -> String, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveResistance {
            what: what(),
            value,
        })
    }
}

fn check_nonnegative(what: &str, bus: BusId, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{what} at bus {bus} must be finite and non-negative, got {value}"
        )))
    }
}

pub fn validate_grid(mut spec: GridSpec) -> Result<ValidatedGrid> {
    if spec.buses.is_empty() {
        return Err(Error::InvalidParameter("grid has no buses".into()));
    }
    spec.buses.sort_by_key(|b| b.id);
    for (i, bus) in spec.buses.iter().enumerate() {
        if bus.id.0 != i {
            return Err(Error::InvalidParameter(format!(
                "bus ids must be the dense range 0..{}, found {} at position {i}",
                spec.buses.len(),
                bus.id
            )));
        }
        if let Some(r) = bus.load.r_cr {
            check_resistance(|| format!("load r_cr at bus {i}"), r)?;
        }
        check_nonnegative("i_cc", bus.id, bus.load.i_cc)?;
        check_nonnegative("d_cp", bus.id, bus.load.d_cp)?;
        if let Some(vsc) = &bus.vsc {
            if !(vsc.x_nom > 0.0 && vsc.x_nom.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "x_nom at bus {i} must be positive, got {}",
                    vsc.x_nom
                )));
            }
            check_resistance(|| format!("r_nom at bus {i}"), vsc.r_nom)?;
            if let Some(r_max) = vsc.r_max {
                check_resistance(|| format!("r_max at bus {i}"), r_max)?;
                if r_max < vsc.r_nom {
                    return Err(Error::InvalidParameter(format!(
                        "r_max {r_max} below r_nom {} at bus {i}",
                        vsc.r_nom
                    )));
                }
            }
            check_nonnegative("pi", bus.id, vsc.pi_budget)?;
        }
    }

    let n = spec.buses.len();
    let mut seen = BTreeSet::new();
    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for line in &spec.lines {
        let (a, b) = (line.a.0, line.b.0);
        if a >= n || b >= n {
            return Err(Error::InvalidParameter(format!(
                "line {}-{} references an unknown bus",
                line.a, line.b
            )));
        }
        if a == b {
            return Err(Error::InvalidParameter(format!(
                "line endpoints must be distinct, got {a}-{b}"
            )));
        }
        check_resistance(|| format!("line {a}-{b}"), line.r_line)?;
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(Error::DuplicateLine(BusId(key.0), BusId(key.1)));
        }
        let g = 1.0 / line.r_line;
        neighbors[a].push((b, g));
        neighbors[b].push((a, g));
    }
    for adj in &mut neighbors {
        adj.sort_by_key(|&(m, _)| m);
    }

    let mut reached = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    reached[0] = true;
    while let Some(u) = queue.pop_front() {
        for &(m, _) in &neighbors[u] {
            if !reached[m] {
                reached[m] = true;
                queue.push_back(m);
            }
        }
    }
    if let Some(orphan) = reached.iter().position(|r| !r) {
        return Err(Error::DisconnectedGraph(BusId(orphan)));
    }

    let vsc_buses: Vec<BusId> = spec
        .buses
        .iter()
        .filter(|b| b.vsc.is_some())
        .map(|b| b.id)
        .collect();
    if vsc_buses.is_empty() {
        return Err(Error::NoConverter);
    }
    let mut vsc_slot = vec![None; n];
    for (k, b) in vsc_buses.iter().enumerate() {
        vsc_slot[b.0] = Some(k);
    }

    Ok(ValidatedGrid {
        spec,
        vsc_buses,
        vsc_slot,
        neighbors,
    })
}

/// Structural matrices of the grid at a droop configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkMatrices {
    /// Line admittance matrix (graph Laplacian weighted by line conductances).
    pub psi: DMatrix<f64>,
    /// Converter conductance 1/r_n per bus, zero on buses without a converter.
    pub y: Vec<f64>,
    /// Load shunt conductance 1/r_cr per bus, zero when absent.
    pub y_cr: Vec<f64>,
    /// Equivalent bus-to-ground resistance per bus.
    pub r_bus: Vec<f64>,
}

/// Per-bus converter conductance under a droop configuration.
pub(crate) fn vsc_conductances(grid: &ValidatedGrid, droop: &DroopState) -> Vec<f64> {
    let mut y = vec![0.0; grid.n_buses()];
    for (k, bus) in grid.vsc_buses().iter().enumerate() {
        y[bus.0] = 1.0 / droop.r[k];
    }
    y
}

/// Equivalent bus-to-ground resistance of every bus.
pub(crate) fn bus_resistances(grid: &ValidatedGrid, y: &[f64]) -> Vec<f64> {
    (0..grid.n_buses())
        .map(|n| {
            let lines: f64 = grid.neighbors(n).iter().map(|&(_, g)| g).sum();
            1.0 / (grid.load(n).conductance() + lines + y[n])
        })
        .collect()
}

pub fn network_matrices(grid: &ValidatedGrid, droop: &DroopState) -> Result<NetworkMatrices> {
    droop.check(grid)?;
    let n = grid.n_buses();
    let mut psi = DMatrix::zeros(n, n);
    for row in 0..n {
        let mut diag = 0.0;
        for &(m, g) in grid.neighbors(row) {
            psi[(row, m)] = -g;
            diag += g;
        }
        psi[(row, row)] = diag;
    }
    let y = vsc_conductances(grid, droop);
    let y_cr = (0..n).map(|b| grid.load(b).conductance()).collect();
    let r_bus = bus_resistances(grid, &y);
    Ok(NetworkMatrices { psi, y, y_cr, r_bus })
}
