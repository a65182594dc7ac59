//! Command-line front end: argument model, dispatch and output formatting.
//!
//! Tables are written as CSV, reports as JSON. Every number is printed with
//! at most 9 significant digits so that golden files compare cleanly.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::budget::{allocate_input_variance, vr_power_investment};
use crate::channel::linearize;
use crate::comsim::{measure_power_compliance, transmission_trace, SimConfig, SimMode};
use crate::config::{load_config, parse_config, Config, CASE_STUDY_JSON};
use crate::error::{Error, Result};
use crate::grid::{validate_grid, BusId, ValidatedGrid};
use crate::optimizer::{capacity_sweep, maximize_snr_grid, one_way_snr, Link, SearchOptions};
use crate::steady_state::{solve_steady_state, DroopState, SolverOptions};

#[derive(Parser, Debug, Clone)]
#[command(name = "powertalk", version, about = "Power-talk channel analysis for droop-controlled DC microgrids")]
pub struct Cli {
    /// Grid document (JSON); the bundled three-bus case study when omitted
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,

    /// Write the result here instead of stdout
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// RNG seed, overriding the document's `sim.seed`
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Observation noise standard deviation in V, overriding `sim.sigma_z`
    #[arg(long = "sigma-z", global = true)]
    pub sigma_z: Option<f64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Steady-state bus voltages and converter outputs
    Solve {
        #[command(flatten)]
        droop: DroopArgs,
        #[arg(long, value_enum, default_value_t = Method::GaussSeidel)]
        method: Method,
        /// Current-balance tolerance (A)
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Channel gains, power coefficients and kappa factors
    Channel {
        #[command(flatten)]
        droop: DroopArgs,
    },
    /// Input-variance allocation under the power budgets
    Budget {
        #[command(flatten)]
        droop: DroopArgs,
        #[command(flatten)]
        pi: PiArgs,
        /// Transmitting buses (id or name); the first converter when omitted
        #[arg(long, value_delimiter = ',')]
        tx: Vec<String>,
    },
    /// Virtual resistances maximizing the one-way SNR
    Optimize {
        #[command(flatten)]
        pi: PiArgs,
        #[command(flatten)]
        link: LinkArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Nominal and optimized capacity over a range of equal budgets (CSV)
    Sweep {
        /// Budgets in W: a list `1,2,5` or a range `start:stop:step`
        #[arg(long, default_value = "1:20:1")]
        pi: String,
        #[command(flatten)]
        link: LinkArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Monte-Carlo transmission with BER and power-compliance report
    Simulate {
        #[command(flatten)]
        droop: DroopArgs,
        #[command(flatten)]
        pi: PiArgs,
        #[command(flatten)]
        link: LinkArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Nonlinear)]
        mode: ModeArg,
        /// Number of slots, overriding `sim.slots`
        #[arg(long)]
        slots: Option<usize>,
        /// Antipodal level in V; by default the largest level the budgets allow
        #[arg(long)]
        amplitude: Option<f64>,
        /// Per-slot CSV trace
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    GaussSeidel,
    Newton,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Nonlinear,
    Linearized,
}

#[derive(Args, Debug, Clone)]
pub struct DroopArgs {
    /// Virtual resistances in ohm, one per converter or a single shared value
    #[arg(long = "r", value_delimiter = ',')]
    pub r: Vec<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct PiArgs {
    /// Power budgets in W, one per converter or a single shared value;
    /// the nameplate budgets when omitted
    #[arg(long)]
    pub pi: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct LinkArgs {
    /// Transmitting bus (id or name); the first converter when omitted
    #[arg(long)]
    pub tx: Option<String>,
    /// Receiving bus (id or name); the second converter when omitted
    #[arg(long)]
    pub rx: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Virtual-resistance grid step (ohm)
    #[arg(long, default_value_t = crate::optimizer::DEFAULT_STEP)]
    pub step: f64,
    /// Upper virtual-resistance bounds, one per converter or a single shared value
    #[arg(long = "r-max", value_delimiter = ',')]
    pub r_max: Vec<f64>,
    /// Refine the optimum on a 10x finer local grid
    #[arg(long)]
    pub refine: bool,
}

/// Format with at most 9 significant digits, `%.9g` style.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-5..9).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Round to 9 significant digits; non-finite values pass through.
pub fn round_sig(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.8e}").parse().expect("round trip")
    } else {
        x
    }
}

fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round_sig(f)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let v = round_json(serde_json::to_value(value).expect("reports serialize"));
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
    s.push('\n');
    s
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn per_vsc(values: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        k if k == n => Ok(values.to_vec()),
        k => Err(Error::InvalidParameter(format!(
            "{what}: expected 1 or {n} values, got {k}"
        ))),
    }
}

/// Parse a budget list `a,b,c` or an inclusive range `start:stop:step`.
pub fn parse_pi_list(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("cannot parse budgets {text:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [start, stop, step] = parts.as_slice() else {
            return Err(bad());
        };
        let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize;
        return Ok((0..=count).map(|i| start + i as f64 * step).collect());
    }
    text.split(',').map(num).collect()
}

struct Session {
    config: Config,
    grid: ValidatedGrid,
    sigma_z: f64,
    seed: u64,
}

impl Session {
    fn open(cli: &Cli) -> Result<Self> {
        let config = match &cli.grid {
            Some(path) => load_config(path)?,
            None => parse_config(CASE_STUDY_JSON)?,
        };
        let grid = validate_grid(config.grid.clone())?;
        Ok(Session {
            sigma_z: cli.sigma_z.unwrap_or(config.sim.sigma_z),
            seed: cli.seed.unwrap_or(config.sim.seed),
            config,
            grid,
        })
    }

    fn droop(&self, args: &DroopArgs) -> Result<DroopState> {
        let nominal = DroopState::nominal(&self.grid);
        if args.r.is_empty() {
            return Ok(nominal);
        }
        let r = per_vsc(&args.r, self.grid.n_vsc(), "--r")?;
        let droop = nominal.with_resistances(&r);
        droop.check(&self.grid)?;
        Ok(droop)
    }

    fn pi(&self, args: &PiArgs) -> Result<Vec<f64>> {
        match &args.pi {
            None => Ok(self.grid.budgets()),
            Some(text) => per_vsc(&parse_pi_list(text)?, self.grid.n_vsc(), "--pi"),
        }
    }

    fn bus(&self, key: &str) -> Result<BusId> {
        self.grid
            .resolve_bus(key)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown bus {key:?}")))
    }

    fn link(&self, args: &LinkArgs) -> Result<Link> {
        let vsc = self.grid.vsc_buses();
        let default = |k: usize| {
            vsc.get(k).copied().ok_or_else(|| {
                Error::InvalidParameter("a link needs two converter buses".into())
            })
        };
        let tx = match &args.tx {
            Some(k) => self.bus(k)?,
            None => default(0)?,
        };
        let rx = match &args.rx {
            Some(k) => self.bus(k)?,
            None if tx == vsc[0] => default(1)?,
            None => default(0)?,
        };
        Ok(Link::new(tx, rx))
    }

    fn search(&self, args: &SearchArgs) -> Result<SearchOptions> {
        Ok(SearchOptions {
            step: args.step,
            r_max: if args.r_max.is_empty() {
                None
            } else {
                Some(per_vsc(&args.r_max, self.grid.n_vsc(), "--r-max")?)
            },
            refine: args.refine,
            ..Default::default()
        })
    }

    fn label(&self, bus: BusId) -> String {
        self.grid.bus_label(bus)
    }
}

/// Run a parsed command and return what it prints.
pub fn execute(cli: &Cli) -> Result<String> {
    let s = Session::open(cli)?;
    let grid = &s.grid;
    match &cli.command {
        Command::Solve { droop, method, tol } => {
            let droop = s.droop(droop)?;
            let opts = match method {
                Method::GaussSeidel => SolverOptions::default(),
                Method::Newton => SolverOptions::newton(),
            }
            .with_tol(*tol);
            let st = solve_steady_state(grid, &droop, &opts)?;
            log::info!("converged in {} iterations, residual {:.3e} A", st.iterations, st.residual);
            let rows = (0..grid.n_buses())
                .map(|n| {
                    let slot = grid.vsc_slot(BusId(n));
                    let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
                    vec![
                        n.to_string(),
                        s.label(BusId(n)),
                        fmt_sig(st.v[n]),
                        opt(slot.map(|k| st.i[k])),
                        opt(slot.map(|k| st.p[k])),
                        fmt_sig(st.kappa[n]),
                        fmt_sig(st.r_bus[n]),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(csv_table(&["bus", "name", "v_V", "i_A", "p_W", "kappa", "r_bus_ohm"], &rows))
        }
        Command::Channel { droop } => {
            let droop = s.droop(droop)?;
            let st = solve_steady_state(grid, &droop, &SolverOptions::newton())?;
            let model = linearize(grid, &droop, &st)?;
            let mut rows = Vec::new();
            for n in 0..grid.n_buses() {
                for &m in grid.vsc_buses() {
                    rows.push(vec![
                        s.label(BusId(n)),
                        s.label(m),
                        fmt_sig(model.h[(n, m.0)]),
                        fmt_sig(model.phi[(n, m.0)]),
                        fmt_sig(model.kappa[n]),
                    ]);
                }
            }
            Ok(csv_table(&["bus", "input", "h", "phi_W_per_V", "kappa"], &rows))
        }
        Command::Budget { droop, pi, tx } => {
            let droop = s.droop(droop)?;
            let pi = s.pi(pi)?;
            let tx: Vec<BusId> = if tx.is_empty() {
                vec![grid.vsc_buses()[0]]
            } else {
                tx.iter().map(|k| s.bus(k)).collect::<Result<_>>()?
            };
            let opts = SolverOptions::newton();
            let dp = vr_power_investment(grid, &DroopState::nominal(grid), &droop, &opts)?;
            let st = solve_steady_state(grid, &droop, &opts)?;
            let model = linearize(grid, &droop, &st)?;
            let alloc = allocate_input_variance(grid, &model.phi, &pi, &dp, &tx)?;
            let rows = grid
                .vsc_buses()
                .iter()
                .enumerate()
                .map(|(k, bus)| {
                    let s_tx = alloc
                        .transmitters
                        .iter()
                        .position(|t| t == bus)
                        .map(|i| fmt_sig(alloc.s[i]))
                        .unwrap_or_default();
                    vec![
                        s.label(*bus),
                        fmt_sig(pi[k]),
                        fmt_sig(alloc.dp_vr[k]),
                        fmt_sig(alloc.slack[k]),
                        s_tx,
                        alloc.feasible.to_string(),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(csv_table(&["bus", "pi_W", "dp_vr_W", "slack_W2", "s_V2", "feasible"], &rows))
        }
        Command::Optimize { pi, link, search } => {
            let pi = s.pi(pi)?;
            let link = s.link(link)?;
            let opts = s.search(search)?;
            let res = maximize_snr_grid(grid, &DroopState::nominal(grid), &pi, s.sigma_z, link, &opts)?;
            Ok(to_json(&serde_json::json!({
                "tx": s.label(link.tx),
                "rx": s.label(link.rx),
                "pi_W": pi,
                "sigma_z_V": s.sigma_z,
                "result": res,
            })))
        }
        Command::Sweep { pi, link, search } => {
            let pis = parse_pi_list(pi)?;
            let link = s.link(link)?;
            let opts = s.search(search)?;
            let rows = capacity_sweep(grid, &DroopState::nominal(grid), &pis, s.sigma_z, link, &opts)?;
            let tx = grid.vsc_slot(link.tx).expect("link endpoints host converters");
            let rx = grid.vsc_slot(link.rx).expect("link endpoints host converters");
            let table = rows
                .iter()
                .map(|r| {
                    vec![
                        fmt_sig(r.pi),
                        fmt_sig(r.capacity_nominal),
                        fmt_sig(r.capacity_opt),
                        fmt_sig(r.r_star[tx]),
                        fmt_sig(r.r_star[rx]),
                        fmt_sig(r.snr_nominal),
                        fmt_sig(r.snr_opt),
                    ]
                })
                .collect::<Vec<_>>();
            Ok(csv_table(
                &[
                    "pi_W",
                    "capacity_nominal_bits",
                    "capacity_opt_bits",
                    "r_a_star_ohm",
                    "r_b_star_ohm",
                    "snr_nominal",
                    "snr_opt",
                ],
                &table,
            ))
        }
        Command::Simulate {
            droop,
            pi,
            link,
            mode,
            slots,
            amplitude,
            trace,
        } => {
            let droop = s.droop(droop)?;
            let pi = s.pi(pi)?;
            let link = s.link(link)?;
            let nominal = DroopState::nominal(grid);
            let opts = SolverOptions::newton();
            let dp = vr_power_investment(grid, &nominal, &droop, &opts)?;
            let st = solve_steady_state(grid, &droop, &opts)?;
            let model = linearize(grid, &droop, &st)?;
            let alloc = allocate_input_variance(grid, &model.phi, &pi, &dp, &[link.tx])?;
            let predicted = one_way_snr(grid, &droop, &nominal, &pi, s.sigma_z, link)?;
            let cfg = SimConfig {
                slots: slots.unwrap_or(s.config.sim.slots),
                amplitude: amplitude.unwrap_or_else(|| alloc.s[0].sqrt()),
                sigma_z: s.sigma_z,
                mode: match mode {
                    ModeArg::Nonlinear => SimMode::Nonlinear,
                    ModeArg::Linearized => SimMode::Linearized,
                },
                rng_seed: s.seed,
                tx: link.tx,
                rx: link.rx,
            };
            let (report, records) = transmission_trace(grid, &droop, &model, &cfg)?;
            let compliance = measure_power_compliance(grid, &droop, &cfg, &pi)?;
            if let Some(path) = trace {
                let rows = records
                    .iter()
                    .map(|r| {
                        vec![
                            r.slot.to_string(),
                            u8::from(r.bit).to_string(),
                            fmt_sig(r.observation),
                            u8::from(r.decision).to_string(),
                        ]
                    })
                    .collect::<Vec<_>>();
                std::fs::write(path, csv_table(&["slot", "bit", "observation_V", "decision"], &rows))?;
            }
            Ok(to_json(&serde_json::json!({
                "config": cfg,
                "pi_W": pi,
                "allocated_variance_V2": alloc.s[0],
                "snr_predicted": predicted.snr,
                "report": report,
                "compliance": compliance,
            })))
        }
    }
}

/// Run a parsed command, writing to `--out` or stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let text = execute(cli)?;
    match &cli.out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}
