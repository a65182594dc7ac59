//! JSON grid documents.
//!
//! ```json
//! {
//!   "buses": [
//!     {"id": 0, "name": "A", "vsc": {"x_nom": 400, "r_nom": 0.39, "pi": 10}},
//!     {"id": 1, "load": {"r_cr": 50, "d_cp": 2500}}
//!   ],
//!   "lines": [{"a": 0, "b": 1, "rho": 0.641, "length_km": 0.3}],
//!   "sim": {"sigma_z": 0.01, "seed": 0, "slots": 100000}
//! }
//! ```
//!
//! Line endpoints may be bus ids or bus names. A line gives either its
//! resistance `r` directly or `rho` (ohm/km) and `length_km`. Omitted load
//! terms are zero, an omitted `r_cr` means no resistive load, an omitted
//! `pi` is a zero budget and an omitted `sim` section takes [`SimDefaults`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusId, BusSpec, GridSpec, LineSpec, LoadSpec, VscSpec};

/// Bundled three-bus case-study document.
pub const CASE_STUDY_JSON: &str = include_str!("../fixtures/case_study.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimDefaults {
    pub sigma_z: f64,
    pub seed: u64,
    pub slots: usize,
}

impl Default for SimDefaults {
    fn default() -> Self {
        SimDefaults {
            sigma_z: 0.01,
            seed: 0,
            slots: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid: GridSpec,
    pub sim: SimDefaults,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    buses: Vec<BusDoc>,
    lines: Vec<LineDoc>,
    #[serde(default)]
    sim: SimDefaults,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "LoadDoc::is_empty")]
    load: LoadDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vsc: Option<VscDoc>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_cr: Option<f64>,
    #[serde(default)]
    i_cc: f64,
    #[serde(default)]
    d_cp: f64,
}

impl LoadDoc {
    fn is_empty(&self) -> bool {
        self.r_cr.is_none() && self.i_cc == 0.0 && self.d_cp == 0.0
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VscDoc {
    x_nom: f64,
    r_nom: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
    #[serde(default)]
    pi: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BusRef {
    Id(usize),
    Name(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    a: BusRef,
    b: BusRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length_km: Option<f64>,
}

fn json_error(e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Data => Error::Schema(e.to_string()),
        Category::Io => Error::Io(e.to_string()),
        Category::Syntax | Category::Eof => Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
    }
}

/// Parse a grid document. Structural checks (connectivity, resistances)
/// are left to [`crate::grid::validate_grid`].
pub fn parse_config(text: &str) -> Result<Config> {
    let doc: Document = serde_json::from_str(text).map_err(json_error)?;
    if doc.lines.is_empty() && doc.buses.len() > 1 {
        return Err(Error::Schema(format!(
            "no lines given for {} buses; the grid cannot be connected",
            doc.buses.len()
        )));
    }

    let resolve = |r: &BusRef, i: usize| -> Result<BusId> {
        match r {
            BusRef::Id(id) => Ok(BusId(*id)),
            BusRef::Name(name) => doc
                .buses
                .iter()
                .find(|b| b.name.as_deref() == Some(name.as_str()))
                .map(|b| BusId(b.id))
                .ok_or_else(|| Error::Schema(format!("line {i}: unknown bus name {name:?}"))),
        }
    };

    let lines = doc
        .lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let (a, b) = (resolve(&l.a, i)?, resolve(&l.b, i)?);
            match (l.r, l.rho, l.length_km) {
                (Some(r), None, None) => Ok(LineSpec::new(a, b, r)),
                (None, Some(rho), Some(len)) => Ok(LineSpec::from_length(a, b, rho, len)),
                _ => Err(Error::Schema(format!(
                    "line {i}: give either `r` or both `rho` and `length_km`"
                ))),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let buses = doc
        .buses
        .iter()
        .map(|b| BusSpec {
            id: BusId(b.id),
            name: b.name.clone(),
            load: LoadSpec::new(b.load.r_cr, b.load.i_cc, b.load.d_cp),
            vsc: b.vsc.as_ref().map(|v| VscSpec {
                x_nom: v.x_nom,
                r_nom: v.r_nom,
                r_max: v.r_max,
                pi_budget: v.pi,
            }),
        })
        .collect();

    Ok(Config {
        grid: GridSpec { buses, lines },
        sim: doc.sim,
    })
}

pub fn load_config(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Render a configuration as a document that parses back to the same value.
/// Lines are written with their resistance.
pub fn to_document(cfg: &Config) -> String {
    let doc = Document {
        buses: cfg
            .grid
            .buses
            .iter()
            .map(|b| BusDoc {
                id: b.id.0,
                name: b.name.clone(),
                load: LoadDoc {
                    r_cr: b.load.r_cr,
                    i_cc: b.load.i_cc,
                    d_cp: b.load.d_cp,
                },
                vsc: b.vsc.map(|v| VscDoc {
                    x_nom: v.x_nom,
                    r_nom: v.r_nom,
                    r_max: v.r_max,
                    pi: v.pi_budget,
                }),
            })
            .collect(),
        lines: cfg
            .grid
            .lines
            .iter()
            .map(|l| LineDoc {
                a: BusRef::Id(l.a.0),
                b: BusRef::Id(l.b.0),
                r: Some(l.r_line),
                rho: None,
                length_km: None,
            })
            .collect(),
        sim: cfg.sim,
    };
    serde_json::to_string_pretty(&doc).expect("grid documents always serialize")
}
