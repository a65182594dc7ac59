//! Slot-based Monte-Carlo simulation of one-way signaling.
//!
//! Each slot the transmitter offsets its reference voltage by `+a` or `-a`
//! (equiprobable), the receiver observes its bus-voltage deviation with
//! Gaussian noise and decides on the sign of `h * y`.
//!
//! Randomness is counter-based: slot `k` draws from the ChaCha stream `k` of
//! the configured seed, so slots can be evaluated in any order or in
//! parallel with bit-identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{linearize, ChannelModel};
use crate::error::{Error, Result};
use crate::grid::{BusId, ValidatedGrid};
use crate::steady_state::{
    solve_steady_state, solve_steady_state_from, vsc_outputs, DroopState, SolverOptions,
};

/// Relative slack tolerated on the power budget before warning.
pub const BUDGET_SLACK: f64 = 0.05;
pub const DEFAULT_SLOTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Every symbol is pushed through the nonlinear steady-state solver.
    #[default]
    Nonlinear,
    /// Outputs follow the small-signal model `H dx`, `Phi dx`.
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub slots: usize,
    /// Antipodal level (V).
    pub amplitude: f64,
    pub sigma_z: f64,
    pub mode: SimMode,
    pub rng_seed: u64,
    pub tx: BusId,
    pub rx: BusId,
}

impl SimConfig {
    pub fn new(tx: BusId, rx: BusId, amplitude: f64, sigma_z: f64) -> Self {
        SimConfig {
            slots: DEFAULT_SLOTS,
            amplitude,
            sigma_z,
            mode: SimMode::Nonlinear,
            rng_seed: 0,
            tx,
            rx,
        }
    }

    fn check(&self, grid: &ValidatedGrid) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::InvalidParameter("need at least one slot".into()));
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be >= 0, got {}",
                self.amplitude
            )));
        }
        if !(self.sigma_z >= 0.0 && self.sigma_z.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_z must be >= 0, got {}",
                self.sigma_z
            )));
        }
        if grid.vsc_slot(self.tx).is_none() {
            return Err(Error::InputOnLoadBus(self.tx));
        }
        if self.rx.0 >= grid.n_buses() {
            return Err(Error::InvalidParameter(format!("unknown receiver bus {}", self.rx)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SimWarning {
    BudgetExceeded { bus: BusId, mean_sq: f64, bound: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub ber: f64,
    /// Half-width of the normal-approximation 95% interval on `ber`.
    pub ber_ci95: f64,
    pub bit_errors: usize,
    /// Squared mean over variance of the sign-corrected observation.
    pub snr_empirical: f64,
    /// Empirical mean-square deviation of supplied power from nominal, per
    /// converter in slot order (W^2).
    pub p_dev_mean_sq: Vec<f64>,
    pub slots_run: usize,
    pub warnings: Vec<SimWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotRecord {
    pub slot: usize,
    pub bit: bool,
    /// Noisy receiver observation (V).
    pub observation: f64,
    pub decision: bool,
}

/// Noise-free response to one symbol.
struct Hypothesis {
    dv_rx: f64,
    /// Supplied power minus nominal, slot order.
    dp: Vec<f64>,
}

fn hypotheses(
    grid: &ValidatedGrid,
    droop: &DroopState,
    model: &ChannelModel,
    cfg: &SimConfig,
) -> Result<[Hypothesis; 2]> {
    let opts = SolverOptions::newton().with_tol(1e-12);
    let nominal = DroopState::nominal(grid);
    let p_nom = vsc_outputs(grid, &nominal, &solve_steady_state(grid, &nominal, &opts)?.v).p;
    let base = &model.operating_point;
    let p_base = vsc_outputs(grid, droop, &base.v).p;
    let tx = cfg.tx.0;

    let make = |symbol: f64| -> Result<Hypothesis> {
        match cfg.mode {
            SimMode::Linearized => Ok(Hypothesis {
                dv_rx: model.h[(cfg.rx.0, tx)] * symbol,
                dp: grid
                    .vsc_buses()
                    .iter()
                    .zip(p_base.iter().zip(&p_nom))
                    .map(|(b, (p, pn))| p + model.phi[(b.0, tx)] * symbol - pn)
                    .collect(),
            }),
            SimMode::Nonlinear => {
                let mut dx = vec![0.0; grid.n_buses()];
                dx[tx] = symbol;
                let shifted = droop.clone().with_input(grid, &dx)?;
                let s = solve_steady_state_from(grid, &shifted, &opts, &base.v)?;
                let p = vsc_outputs(grid, &shifted, &s.v).p;
                Ok(Hypothesis {
                    dv_rx: s.v[cfg.rx.0] - base.v[cfg.rx.0],
                    dp: p.iter().zip(&p_nom).map(|(p, pn)| p - pn).collect(),
                })
            }
        }
    };
    Ok([make(-cfg.amplitude)?, make(cfg.amplitude)?])
}

fn slot_record(slot: usize, cfg: &SimConfig, hyp: &[Hypothesis; 2], gain: f64) -> SlotRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(slot as u64);
    let bit: bool = rng.random();
    let z: f64 = StandardNormal.sample(&mut rng);
    let observation = hyp[bit as usize].dv_rx + cfg.sigma_z * z;
    SlotRecord {
        slot,
        bit,
        observation,
        decision: gain * observation >= 0.0,
    }
}

fn collect_slots(cfg: &SimConfig, hyp: &[Hypothesis; 2], gain: f64, parallel: bool) -> Vec<SlotRecord> {
    if parallel {
        (0..cfg.slots)
            .into_par_iter()
            .map(|k| slot_record(k, cfg, hyp, gain))
            .collect()
    } else {
        (0..cfg.slots).map(|k| slot_record(k, cfg, hyp, gain)).collect()
    }
}

fn summarize(
    grid: &ValidatedGrid,
    records: &[SlotRecord],
    hyp: &[Hypothesis; 2],
    pi: &[f64],
) -> SimReport {
    let n = records.len() as f64;
    let bit_errors = records.iter().filter(|r| r.bit != r.decision).count();
    let ber = bit_errors as f64 / n;

    let signed: Vec<f64> = records
        .iter()
        .map(|r| if r.bit { r.observation } else { -r.observation })
        .collect();
    let mean = signed.iter().sum::<f64>() / n;
    let var = signed.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
    let snr_empirical = if var > 0.0 { mean * mean / var } else { f64::INFINITY };

    let ones = records.iter().filter(|r| r.bit).count() as f64;
    let p_dev_mean_sq: Vec<f64> = (0..grid.n_vsc())
        .map(|k| (ones * hyp[1].dp[k].powi(2) + (n - ones) * hyp[0].dp[k].powi(2)) / n)
        .collect();

    let warnings = grid
        .vsc_buses()
        .iter()
        .zip(p_dev_mean_sq.iter().zip(pi))
        .filter(|(_, (m, p))| **m > (1.0 + BUDGET_SLACK) * *p * *p)
        .map(|(bus, (m, p))| SimWarning::BudgetExceeded {
            bus: *bus,
            mean_sq: *m,
            bound: p * p,
        })
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("{w:?}");
    }

    SimReport {
        ber,
        ber_ci95: 1.96 * (ber * (1.0 - ber) / n).sqrt(),
        bit_errors,
        snr_empirical,
        p_dev_mean_sq,
        slots_run: records.len(),
        warnings,
    }
}

/// Simulate `cfg.slots` symbols and keep the per-slot trace.
pub fn transmission_trace(
    grid: &ValidatedGrid,
    droop: &DroopState,
    model: &ChannelModel,
    cfg: &SimConfig,
) -> Result<(SimReport, Vec<SlotRecord>)> {
    cfg.check(grid)?;
    droop.check(grid)?;
    let hyp = hypotheses(grid, droop, model, cfg)?;
    let records = collect_slots(cfg, &hyp, model.gain(cfg.rx, cfg.tx), true);
    Ok((summarize(grid, &records, &hyp, &grid.budgets()), records))
}

/// Simulate `cfg.slots` symbols; budget warnings use the grid's nameplate
/// budgets.
pub fn run_transmission(
    grid: &ValidatedGrid,
    droop: &DroopState,
    model: &ChannelModel,
    cfg: &SimConfig,
) -> Result<SimReport> {
    transmission_trace(grid, droop, model, cfg).map(|(r, _)| r)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerCompliance {
    pub bus: BusId,
    /// Empirical mean-square deviation from nominal supplied power (W^2).
    pub empirical: f64,
    /// Budget `pi^2` (W^2).
    pub bound: f64,
    /// `empirical <= (1 + BUDGET_SLACK) * bound`.
    pub pass: bool,
}

/// Run a transmission at `droop` and compare every converter's mean-square
/// power deviation against its budget.
pub fn measure_power_compliance(
    grid: &ValidatedGrid,
    droop: &DroopState,
    cfg: &SimConfig,
    pi: &[f64],
) -> Result<Vec<PowerCompliance>> {
    if pi.len() != grid.n_vsc() {
        return Err(Error::InvalidParameter(format!(
            "expected {} budgets, got {}",
            grid.n_vsc(),
            pi.len()
        )));
    }
    cfg.check(grid)?;
    let state = solve_steady_state(grid, droop, &SolverOptions::newton().with_tol(1e-12))?;
    let model = linearize(grid, droop, &state)?;
    let hyp = hypotheses(grid, droop, &model, cfg)?;
    let records = collect_slots(cfg, &hyp, model.gain(cfg.rx, cfg.tx), true);
    let report = summarize(grid, &records, &hyp, pi);
    Ok(grid
        .vsc_buses()
        .iter()
        .zip(report.p_dev_mean_sq.iter().zip(pi))
        .map(|(bus, (m, p))| PowerCompliance {
            bus: *bus,
            empirical: *m,
            bound: p * p,
            pass: *m <= (1.0 + BUDGET_SLACK) * p * p,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{validate_grid, GridSpec};

    fn setup() -> (ValidatedGrid, DroopState, ChannelModel) {
        let grid = validate_grid(GridSpec::case_study()).unwrap();
        let droop = DroopState::nominal(&grid);
        let s = solve_steady_state(&grid, &droop, &SolverOptions::newton()).unwrap();
        let model = linearize(&grid, &droop, &s).unwrap();
        (grid, droop, model)
    }

    fn cfg(mode: SimMode, amplitude: f64, sigma_z: f64) -> SimConfig {
        SimConfig {
            slots: 2000,
            mode,
            ..SimConfig::new(BusId(0), BusId(1), amplitude, sigma_z)
        }
    }

    #[test]
    fn noiseless_detection_is_perfect() {
        let (grid, droop, model) = setup();
        for mode in [SimMode::Nonlinear, SimMode::Linearized] {
            let r = run_transmission(&grid, &droop, &model, &cfg(mode, 0.05, 0.0)).unwrap();
            assert_eq!(r.ber, 0.0);
            assert_eq!(r.bit_errors, 0);
            assert_eq!(r.slots_run, 2000);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (grid, droop, model) = setup();
        let c = cfg(SimMode::Nonlinear, 0.02, 0.01);
        let a = run_transmission(&grid, &droop, &model, &c).unwrap();
        let b = run_transmission(&grid, &droop, &model, &c).unwrap();
        assert_eq!(a, b);
        let other = SimConfig { rng_seed: 1, ..c };
        assert_ne!(run_transmission(&grid, &droop, &model, &other).unwrap(), a);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (grid, droop, model) = setup();
        let c = cfg(SimMode::Linearized, 0.02, 0.01);
        let hyp = hypotheses(&grid, &droop, &model, &c).unwrap();
        let g = model.gain(c.rx, c.tx);
        assert_eq!(collect_slots(&c, &hyp, g, true), collect_slots(&c, &hyp, g, false));
    }

    #[test]
    fn zero_amplitude_nominal_has_no_deviation() {
        let (grid, droop, _) = setup();
        let out = measure_power_compliance(&grid, &droop, &cfg(SimMode::Nonlinear, 0.0, 0.01), &[10.0, 10.0]).unwrap();
        for c in out {
            assert!(c.empirical < 1e-16, "{}", c.empirical);
            assert!(c.pass);
        }
    }

    #[test]
    fn deviation_scales_quadratically() {
        let (grid, droop, _) = setup();
        let pi = [10.0, 10.0];
        let a = measure_power_compliance(&grid, &droop, &cfg(SimMode::Nonlinear, 0.01, 0.01), &pi).unwrap();
        let b = measure_power_compliance(&grid, &droop, &cfg(SimMode::Nonlinear, 0.02, 0.01), &pi).unwrap();
        for (a, b) in a.iter().zip(&b) {
            assert!((b.empirical / a.empirical - 4.0).abs() < 0.01);
        }
    }

    #[test]
    fn overspending_warns() {
        let (grid, droop, model) = setup();
        let r = run_transmission(&grid, &droop, &model, &cfg(SimMode::Linearized, 1.0, 0.01)).unwrap();
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn config_validation() {
        let (grid, droop, model) = setup();
        let bad = [
            SimConfig { slots: 0, ..cfg(SimMode::Nonlinear, 0.1, 0.01) },
            cfg(SimMode::Nonlinear, -0.1, 0.01),
            cfg(SimMode::Nonlinear, 0.1, -1.0),
            SimConfig { tx: BusId(2), ..cfg(SimMode::Nonlinear, 0.1, 0.01) },
            SimConfig { rx: BusId(9), ..cfg(SimMode::Nonlinear, 0.1, 0.01) },
        ];
        for c in bad {
            assert!(run_transmission(&grid, &droop, &model, &c).is_err());
        }
    }

    #[test]
    fn ber_falls_with_amplitude() {
        let (grid, droop, model) = setup();
        let mut last = 1.0;
        for a in [0.005, 0.01, 0.02, 0.04] {
            let r = run_transmission(&grid, &droop, &model, &cfg(SimMode::Linearized, a, 0.01)).unwrap();
            assert!(r.ber <= last);
            last = r.ber;
        }
    }
}
