//! Small-signal channel model around an operating point.
//!
//! Reference-voltage deviations `dx` map to bus-voltage deviations through
//! `dv = H dx` with `H = (Psi_k + K^-1 (Y + Y_cr))^-1 Y`, where `Psi_k` is
//! the admittance matrix with its diagonal divided by `kappa`. Converter
//! power deviations follow `dp = Phi dx`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{network_matrices, BusId, LoadSpec, ValidatedGrid, VscSpec};
use crate::steady_state::{DroopState, SteadyState};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelModel {
    /// Voltage gains, N x N; columns of buses without converter are zero.
    #[serde(serialize_with = "serialize_matrix")]
    pub h: DMatrix<f64>,
    /// Power coefficients (W/V), N x N; rows of buses without converter are zero.
    #[serde(serialize_with = "serialize_matrix")]
    pub phi: DMatrix<f64>,
    pub kappa: Vec<f64>,
    pub operating_point: SteadyState,
    pub droop: DroopState,
    vsc_buses: Vec<BusId>,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl ChannelModel {
    pub fn n_buses(&self) -> usize {
        self.h.nrows()
    }

    pub fn gain(&self, rx: BusId, tx: BusId) -> f64 {
        self.h[(rx.0, tx.0)]
    }

    pub fn power_coeff(&self, n: BusId, m: BusId) -> f64 {
        self.phi[(n.0, m.0)]
    }

    pub fn vsc_buses(&self) -> &[BusId] {
        &self.vsc_buses
    }
}

pub fn linearize(grid: &ValidatedGrid, droop: &DroopState, state: &SteadyState) -> Result<ChannelModel> {
    let nm = network_matrices(grid, droop)?;
    let n = grid.n_buses();
    if state.v.len() != n || state.kappa.len() != n {
        return Err(Error::InvalidParameter(
            "operating point does not match the grid".into(),
        ));
    }
    let mut a = nm.psi.clone();
    for k in 0..n {
        a[(k, k)] = (nm.psi[(k, k)] + nm.y[k] + nm.y_cr[k]) / state.kappa[k];
    }
    let rhs = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&nm.y));
    let h = a.lu().solve(&rhs).ok_or(Error::SingularSystem)?;

    let mut model = ChannelModel {
        h,
        phi: DMatrix::zeros(n, n),
        kappa: state.kappa.clone(),
        operating_point: state.clone(),
        droop: droop.clone(),
        vsc_buses: grid.vsc_buses().to_vec(),
    };
    model.phi = power_coefficients(&model);
    Ok(model)
}

/// First-order sensitivities of converter output powers `p = v (x - v) / r`
/// to reference-voltage inputs:
/// `phi_nm = h_nm (x_n - 2 v_n) / r_n + [n == m] v_n / r_n`.
pub fn power_coefficients(model: &ChannelModel) -> DMatrix<f64> {
    let n = model.n_buses();
    let v = &model.operating_point.v;
    let mut phi = DMatrix::zeros(n, n);
    for (k, bus) in model.vsc_buses.iter().enumerate() {
        let row = bus.0;
        let (x, r) = (model.droop.x[k], model.droop.r[k]);
        for col in 0..n {
            phi[(row, col)] = model.h[(row, col)] * (x - 2.0 * v[row]) / r;
        }
        phi[(row, row)] += v[row] / r;
    }
    phi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleBusChannel {
    /// Gain of every unit onto the common bus voltage.
    pub h: Vec<f64>,
    pub kappa: f64,
    pub r_bus: f64,
}

/// Channel of units sharing one bus with negligible line resistance,
/// evaluated at nominal droop parameters.
pub fn single_bus_channel(units: &[VscSpec], load: &LoadSpec) -> Result<SingleBusChannel> {
    if units.is_empty() {
        return Err(Error::InvalidParameter("single-bus channel needs at least one unit".into()));
    }
    let g: f64 = units.iter().map(|u| 1.0 / u.r_nom).sum();
    let r_bus = 1.0 / (load.conductance() + g);
    let drive: f64 = units.iter().map(|u| u.x_nom / u.r_nom).sum::<f64>() - load.i_cc;
    let kappa = if load.d_cp == 0.0 {
        1.0
    } else {
        let disc = drive * drive - 4.0 * load.d_cp / r_bus;
        if disc <= 0.0 || drive <= 0.0 {
            return Err(Error::NoRealRoot {
                bus: BusId(0),
                discriminant: disc,
            });
        }
        0.5 * (1.0 + drive / disc.sqrt())
    };
    let h = units.iter().map(|u| kappa * r_bus / u.r_nom).collect();
    Ok(SingleBusChannel { h, kappa, r_bus })
}

/// Linear channel response `dv = H dx` and its observation with i.i.d.
/// Gaussian noise of standard deviation `sigma_z` on every bus.
pub fn predict_outputs(
    model: &ChannelModel,
    dx: &[f64],
    sigma_z: f64,
    rng_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = model.n_buses();
    if dx.len() != n {
        return Err(Error::InvalidParameter(format!(
            "input vector has {} entries, channel has {n} buses",
            dx.len()
        )));
    }
    if !(sigma_z >= 0.0 && sigma_z.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma_z must be >= 0, got {sigma_z}")));
    }
    for (bus, &d) in dx.iter().enumerate() {
        if d != 0.0 && !model.vsc_buses.contains(&BusId(bus)) {
            return Err(Error::InputOnLoadBus(BusId(bus)));
        }
    }
    let dv: Vec<f64> = (0..n)
        .map(|row| (0..n).map(|col| model.h[(row, col)] * dx[col]).sum())
        .collect();
    if sigma_z == 0.0 {
        return Ok((dv.clone(), dv));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noisy = dv
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma_z * z
        })
        .collect();
    Ok((dv, noisy))
}
