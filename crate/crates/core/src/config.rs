//! Run configuration shared by the command-line front end and the
//! verification suite.
//!
//! A configuration is a JSON object. Every physics parameter is explicit:
//!
//! ```json
//! {
//!   "k_f": 1.0, "transfer_radius": 1.0, "m": 6, "delta": 0.0833,
//!   "shell_thickness": 1.1, "potential": "constant:4",
//!   "q_list": [[0, 0, 2], [0, 0, 1]],
//!   "methods": ["exact-truncated", "oracle"], "n_max": 4, "seed": 17
//! }
//! ```
//!
//! `potential` is either a preset name (`"zero"`, `"constant:<v>"`) or a
//! table `[{"k": [x, y, z], "v_hat": v}, ...]`. `q_list` is a list of
//! momenta or the string `"all-in-shell"`. When `n_max` is omitted the series
//! methods use [`DEFAULT_EXACT_ORDER`] and [`DEFAULT_BOSONIZED_ORDER`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Potential, PotentialEntry};
use crate::lattice::{FermiSystem, Momentum};
use crate::patches::PatchScheme;
use crate::series::{SeriesContext, SeriesOptions};

pub use crate::series::Method;

pub const DEFAULT_EXACT_ORDER: usize = 4;
pub const DEFAULT_BOSONIZED_ORDER: usize = 8;

/// Named potentials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Preset {
    Zero,
    Constant(f64),
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidParameter {
            field: "potential",
            reason: format!("unknown preset `{s}` (expected `zero` or `constant:<value>`)"),
        };
        if s == "zero" {
            return Ok(Preset::Zero);
        }
        let v: f64 = s.strip_prefix("constant:").ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        Ok(Preset::Constant(v))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::Zero => write!(f, "zero"),
            Preset::Constant(v) => write!(f, "constant:{v}"),
        }
    }
}

impl Preset {
    pub fn potential(self) -> Potential {
        match self {
            Preset::Zero => Potential::zero(),
            Preset::Constant(v) => Potential::constant(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Preset(String),
    Table(Vec<PotentialEntry>),
}

impl PotentialSpec {
    pub fn build(&self) -> Result<Potential> {
        match self {
            PotentialSpec::Preset(name) => Ok(name.parse::<Preset>()?.potential()),
            PotentialSpec::Table(entries) => Potential::from_entries(entries),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QList {
    Keyword(String),
    Momenta(Vec<Momentum>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k_f: f64,
    pub transfer_radius: f64,
    pub m: usize,
    pub delta: f64,
    pub shell_thickness: f64,
    pub potential: PotentialSpec,
    pub q_list: QList,
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub n_max: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub allow_large_orders: bool,
}

impl RunConfig {
    /// Seven-point Fermi ball, three transfers, octahedral patches.
    pub fn toy() -> Self {
        RunConfig {
            k_f: 1.0,
            transfer_radius: 1.0,
            m: 6,
            delta: 1.0 / 12.0,
            shell_thickness: 1.1,
            potential: PotentialSpec::Preset("constant:4".into()),
            q_list: QList::Momenta(vec![Momentum::new(0, 0, 2), Momentum::new(0, 0, 1)]),
            methods: Method::ALL.to_vec(),
            n_max: None,
            output: None,
            seed: 17,
            allow_large_orders: false,
        }
    }

    /// Same geometry with a larger Fermi ball (twelve modes per sector).
    pub fn toy_large() -> Self {
        RunConfig { k_f: 1.415, potential: PotentialSpec::Preset("constant:2".into()), ..Self::toy() }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Checks every field without building anything expensive.
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &'static str, reason: String| Err(Error::InvalidParameter { field, reason });
        if !(self.k_f.is_finite() && self.k_f >= 0.0) {
            return invalid("k_f", format!("must be finite and nonnegative, got {}", self.k_f));
        }
        if !(self.transfer_radius.is_finite() && self.transfer_radius > 0.0) {
            return invalid("transfer_radius", format!("must be finite and positive, got {}", self.transfer_radius));
        }
        if self.m == 0 || !self.m.is_multiple_of(2) {
            return invalid("m", format!("must be a positive even integer, got {}", self.m));
        }
        if !(self.delta.is_finite() && self.delta > 0.0 && self.delta < 1.0 / 6.0) {
            return invalid("delta", format!("must lie in (0, 1/6), got {}", self.delta));
        }
        if !(self.shell_thickness.is_finite() && self.shell_thickness > 0.0) {
            return invalid("shell_thickness", format!("must be finite and positive, got {}", self.shell_thickness));
        }
        self.potential.build()?;
        if let QList::Keyword(k) = &self.q_list {
            if k != "all-in-shell" {
                return invalid("q_list", format!("expected a list of momenta or \"all-in-shell\", got \"{k}\""));
            }
        }
        if let Some(n) = self.n_max {
            let series = self.methods.iter().any(|m| matches!(m, Method::ExactTruncated | Method::BosonizedSeries));
            if series && n % 2 != 0 {
                return Err(Error::OddOrder(n));
            }
        }
        Ok(())
    }

    /// Maximal order used for `method`.
    pub fn order_for(&self, method: Method) -> Option<usize> {
        match method {
            Method::ExactTruncated => Some(self.n_max.unwrap_or(DEFAULT_EXACT_ORDER)),
            Method::BosonizedSeries => Some(self.n_max.unwrap_or(DEFAULT_BOSONIZED_ORDER)),
            Method::BosonizedClosed | Method::Oracle => None,
        }
    }

    pub fn series_options(&self) -> SeriesOptions {
        SeriesOptions { allow_large_orders: self.allow_large_orders }
    }
}

/// A configuration with its lattice, patches and kernels built.
#[derive(Clone, Debug)]
pub struct System {
    pub config: RunConfig,
    pub context: SeriesContext,
}

impl System {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let sys = FermiSystem::new(config.k_f, config.transfer_radius)?;
        let scheme = PatchScheme::build(&sys, config.m, config.delta, config.shell_thickness)?;
        let context = SeriesContext::new(sys, scheme, &config.potential.build()?)?;
        Ok(System { config: config.clone(), context })
    }

    /// The momenta requested by `q_list`, in lattice order for `all-in-shell`.
    pub fn q_values(&self) -> Vec<Momentum> {
        match &self.config.q_list {
            QList::Momenta(v) => v.clone(),
            QList::Keyword(_) => self.context.scheme.claimed(),
        }
    }
}
