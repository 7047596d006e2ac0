//! Run configuration: a single TOML file with one section per concern.
//!
//! ```toml
//! [system]
//! f = ["-x + x^2"]
//! delta = 0.25
//!
//! [sets.W]
//! kind = "box"
//! lo = [-1.0]
//! hi = [-0.9]
//!
//! [grid]
//! lo = [-1.5]
//! hi = [1.5]
//! h = 1e-3
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, DisturbancePolicy, IntegrationSettings, PerturbedSystem};
use crate::expr::{default_vars, ScalarField, VectorField};
use crate::geometry::{BoxSet, Grid, SetSpec};

/// Invalid configuration, with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    #[serde(default)]
    pub sets: BTreeMap<String, SetConfig>,
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub battery: BatteryConfig,
    #[serde(default)]
    pub integration: IntegrationConfig,
    #[serde(default)]
    pub tolerances: TolerancesConfig,
    pub simulate: Option<SimulateConfig>,
    pub reach: Option<ReachConfig>,
    pub invariant: Option<InvariantConfig>,
    pub winning: Option<WinningConfig>,
    pub probe: Option<ProbeConfig>,
    pub certificate: Option<CertificateConfig>,
    pub converse: Option<ConverseConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub dim: Option<usize>,
    pub vars: Option<Vec<String>>,
    pub f: Vec<String>,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SetConfig {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Closure of the complement of a box.
    Complement { lo: Vec<f64>, hi: Vec<f64> },
    Sublevel {
        g: String,
        #[serde(default)]
        level: f64,
    },
    Union { parts: Vec<SetConfig> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatteryConfig {
    pub n_random: usize,
    pub seed: Option<u64>,
    pub dwell: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            n_random: 8,
            seed: None,
            dwell: dynamics::DEFAULT_DWELL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegrationConfig {
    pub dt: f64,
    pub horizon: f64,
    pub blowup_bound: f64,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            dt: dynamics::DEFAULT_DT,
            horizon: 30.0,
            blowup_bound: dynamics::DEFAULT_BLOWUP_BOUND,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesConfig {
    pub tol: f64,
    pub strict_tol: f64,
    pub pd_coeff: f64,
    pub validation_tol: f64,
}

impl Default for TolerancesConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            strict_tol: 1e-9,
            pd_coeff: 1e-6,
            validation_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub x0: Option<Vec<f64>>,
    /// Name of a set whose grid points (or box corners) are simulated.
    pub set: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReachConfig {
    pub from: String,
    pub t_lo: f64,
    pub t_hi: Option<f64>,
    pub semantics: String,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            from: "W".into(),
            t_lo: 0.0,
            t_hi: None,
            semantics: "sampled_under".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InvariantConfig {
    pub set: String,
    pub horizon: Option<f64>,
    pub stride: usize,
}

impl Default for InvariantConfig {
    fn default() -> Self {
        Self {
            set: "Omega".into(),
            horizon: None,
            stride: crate::reach::DEFAULT_CHECK_STRIDE,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct WinningConfig {
    pub conv_radius: Option<f64>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub eps: Vec<f64>,
    pub rho: f64,
    pub horizon: Option<f64>,
    /// Overrides `system.delta` for the probe.
    pub delta: Option<f64>,
    pub dt: Option<f64>,
    pub conv_radius: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.01, 0.02, 0.05, 0.1],
            rho: 0.01,
            horizon: None,
            delta: None,
            dt: None,
            conv_radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateConfig {
    #[serde(rename = "V")]
    pub v: String,
    #[serde(rename = "B")]
    pub b: Option<String>,
    pub alpha1: Option<String>,
    pub alpha2: Option<String>,
    /// `theorem8`, `prop11`, or `both`; inferred when absent.
    pub check: Option<String>,
    /// Build `B = c - V` over `K ∪ W` instead of reading `B`.
    #[serde(default)]
    pub barrier_from_v: bool,
    #[serde(default = "default_barrier_margin")]
    pub barrier_margin: f64,
}

fn default_barrier_margin() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConverseConfig {
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub n_bins: usize,
    pub n_times: usize,
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    /// Maximum number of grid points used for the envelope.
    pub points: usize,
    /// Number of random validation samples.
    pub samples: usize,
    pub seed: Option<u64>,
    pub taus: Vec<f64>,
    pub settle_ratio: f64,
}

impl Default for ConverseConfig {
    fn default() -> Self {
        Self {
            delta: None,
            lambda: None,
            mu: None,
            n_bins: 20,
            n_times: 200,
            horizon: None,
            dt: None,
            points: 400,
            samples: 200,
            seed: None,
            taus: crate::converse::DEFAULT_TAUS.to_vec(),
            settle_ratio: 0.1,
        }
    }
}

/// A validated configuration with the shared objects already built.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub vars: Vec<String>,
    pub system: PerturbedSystem,
    pub sets: BTreeMap<String, SetSpec>,
    pub grid: Option<Grid>,
    pub settings: IntegrationSettings,
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive and finite (got {v})")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let path = e
                .span()
                .map(|s| {
                    let line = text[..s.start].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_default();
            ConfigError::new(path, e.message().to_string())
        })
    }

    pub fn resolve(self) -> Result<Resolved, ConfigError> {
        let sys = &self.system;
        let dim = sys.f.len();
        if dim == 0 {
            return Err(ConfigError::new("system.f", "needs at least one component"));
        }
        if let Some(d) = sys.dim {
            if d != dim {
                return Err(ConfigError::new(
                    "system.dim",
                    format!("is {d} but system.f has {dim} components"),
                ));
            }
        }
        let vars = sys.vars.clone().unwrap_or_else(|| default_vars(dim));
        if vars.len() != dim {
            return Err(ConfigError::new(
                "system.vars",
                format!("has {} names for {dim} components", vars.len()),
            ));
        }
        if !(sys.delta >= 0.0) || !sys.delta.is_finite() {
            return Err(ConfigError::new(
                "system.delta",
                format!("must be >= 0 (got {})", sys.delta),
            ));
        }
        let f = VectorField::parse(&sys.f, &vars)
            .map_err(|e| ConfigError::new("system.f", e.to_string()))?;
        let system = PerturbedSystem::new(f, sys.delta)
            .map_err(|e| ConfigError::new("system", e.to_string()))?;

        let mut sets = BTreeMap::new();
        for (name, sc) in &self.sets {
            let path = format!("sets.{name}");
            sets.insert(name.clone(), build_set(sc, &vars, &path)?);
        }

        let grid = match &self.grid {
            None => None,
            Some(g) => {
                check_len("grid.lo", &g.lo, dim)?;
                check_len("grid.hi", &g.hi, dim)?;
                let domain = BoxSet::new(g.lo.clone(), g.hi.clone())
                    .map_err(|e| ConfigError::new("grid", e.to_string()))?;
                Some(Grid::new(domain, g.h).map_err(|e| ConfigError::new("grid", e.to_string()))?)
            }
        };

        let i = &self.integration;
        positive("integration.dt", i.dt)?;
        positive("integration.horizon", i.horizon)?;
        positive("integration.blowup_bound", i.blowup_bound)?;
        let mut settings = IntegrationSettings::new(i.dt, i.horizon);
        settings.blowup_bound = i.blowup_bound;
        settings
            .validate()
            .map_err(|e| ConfigError::new("integration", e.to_string()))?;

        positive("battery.dwell", self.battery.dwell)?;
        if self.battery.n_random > 0 && self.battery.seed.is_none() {
            return Err(ConfigError::new(
                "battery.seed",
                "is required when battery.n_random > 0",
            ));
        }
        let t = &self.tolerances;
        positive("tolerances.tol", t.tol)?;
        positive("tolerances.strict_tol", t.strict_tol)?;
        positive("tolerances.pd_coeff", t.pd_coeff)?;
        positive("tolerances.validation_tol", t.validation_tol)?;

        Ok(Resolved {
            config: self,
            vars,
            system,
            sets,
            grid,
            settings,
        })
    }
}

fn check_len(path: &str, v: &[f64], dim: usize) -> Result<(), ConfigError> {
    if v.len() == dim {
        Ok(())
    } else {
        Err(ConfigError::new(
            path,
            format!("has {} entries, expected {dim}", v.len()),
        ))
    }
}

fn build_set(sc: &SetConfig, vars: &[String], path: &str) -> Result<SetSpec, ConfigError> {
    let dim = vars.len();
    let boxed = |lo: &Vec<f64>, hi: &Vec<f64>| {
        check_len(&format!("{path}.lo"), lo, dim)?;
        check_len(&format!("{path}.hi"), hi, dim)?;
        BoxSet::new(lo.clone(), hi.clone()).map_err(|e| ConfigError::new(path, e.to_string()))
    };
    Ok(match sc {
        SetConfig::Box { lo, hi } => SetSpec::Box(boxed(lo, hi)?),
        SetConfig::Complement { lo, hi } => SetSpec::BoxComplement(boxed(lo, hi)?),
        SetConfig::Sublevel { g, level } => SetSpec::Sublevel {
            g: ScalarField::parse(g, vars)
                .map_err(|e| ConfigError::new(format!("{path}.g"), e.to_string()))?,
            level: *level,
        },
        SetConfig::Union { parts } => SetSpec::Union(
            parts
                .iter()
                .enumerate()
                .map(|(i, p)| build_set(p, vars, &format!("{path}.parts[{i}]")))
                .collect::<Result<_, _>>()?,
        ),
    })
}

impl Resolved {
    pub fn set(&self, name: &str) -> Result<&SetSpec, ConfigError> {
        self.sets
            .get(name)
            .ok_or_else(|| ConfigError::new(format!("sets.{name}"), "is required for this command"))
    }

    pub fn grid(&self) -> Result<&Grid, ConfigError> {
        self.grid
            .as_ref()
            .ok_or_else(|| ConfigError::new("grid", "is required for this command"))
    }

    pub fn seed(&self) -> u64 {
        self.config.battery.seed.unwrap_or(0)
    }

    /// Sublevel functions of every configured set, for gradient-feedback
    /// policies.
    pub fn set_functions(&self) -> Vec<(String, ScalarField)> {
        let mut out = Vec::new();
        for (name, set) in &self.sets {
            for (k, g) in set.defining_functions().into_iter().enumerate() {
                out.push((format!("{name}.g{k}"), g.clone()));
            }
        }
        out
    }

    pub fn battery_for(&self, sys: &PerturbedSystem) -> Result<Vec<DisturbancePolicy>, ConfigError> {
        let b = &self.config.battery;
        dynamics::default_policy_battery(sys, b.n_random, self.seed(), b.dwell, &self.set_functions())
            .map_err(|e| ConfigError::new("battery", e.to_string()))
    }

    pub fn battery(&self) -> Result<Vec<DisturbancePolicy>, ConfigError> {
        self.battery_for(&self.system)
    }

    pub fn system_with_delta(&self, delta: Option<f64>, path: &str) -> Result<PerturbedSystem, ConfigError> {
        match delta {
            None => Ok(self.system.clone()),
            Some(d) => self
                .system
                .with_delta(d)
                .map_err(|e| ConfigError::new(path, e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[system]
f = ["-x + x^2"]
delta = 0.25

[sets.U]
kind = "box"
lo = [0.6]
hi = [inf]

[battery]
n_random = 8
seed = 7
"#;

    #[test]
    fn parses_and_resolves() {
        let r = RunConfig::from_toml(BASE).unwrap().resolve().unwrap();
        assert_eq!(r.vars, vec!["x".to_string()]);
        assert!(r.set("U").unwrap().contains_raw(&[1e9]));
        assert_eq!(r.battery().unwrap().len(), 11);
    }

    #[test]
    fn negative_delta_names_the_field() {
        let text = BASE.replace("delta = 0.25", "delta = -0.1");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.path, "system.delta");
    }

    #[test]
    fn missing_seed_is_rejected() {
        let text = BASE.replace("seed = 7", "");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.path, "battery.seed");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = format!("{BASE}\n[grid]\nlo=[0.0]\nhi=[1.0]\nh=0.1\nstep=2\n");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn set_dimension_mismatch() {
        let text = BASE.replace("lo = [0.6]", "lo = [0.6, 1.0]");
        let err = RunConfig::from_toml(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.path, "sets.U.lo");
    }
}
