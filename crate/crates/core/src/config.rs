//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design_effect::DEFAULT_EPS;
use crate::error::{Error, Result};
use crate::io;
use crate::simulation::SimulationConfig;
use crate::stmra::DEFAULT_JITTER;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Levels beyond the root.
    #[serde(rename = "M")]
    pub max_level: usize,
    #[serde(rename = "J")]
    pub branching: usize,
    pub r: usize,
    /// Quadrature points per tract.
    pub q: usize,
    pub eps: f64,
    pub jitter: f64,
    /// Seed for quadrature points.
    pub quadrature_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_level: 2,
            branching: 4,
            r: 9,
            q: 16,
            eps: DEFAULT_EPS,
            jitter: DEFAULT_JITTER,
            quadrature_seed: 20_200_101,
        }
    }
}

/// Shape and rate of an inverse-gamma prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub const fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub ig_tau2: InverseGamma,
    #[serde(rename = "ig_tauC2")]
    pub ig_tau_c2: InverseGamma,
    pub ig_sigma2: InverseGamma,
    /// Shape and rate of the gamma prior on the range.
    pub phi_gamma: (f64, f64),
    /// Bounds of the uniform prior on the smoothness.
    pub nu_uniform: (f64, f64),
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            ig_tau2: InverseGamma::new(2.0, 1.0),
            ig_tau_c2: InverseGamma::new(2.0, 1.0),
            ig_sigma2: InverseGamma::new(2.0, 1.0),
            phi_gamma: (1.0, 1.0),
            nu_uniform: (0.0, 2.0),
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        for (name, ig) in [("ig_tau2", self.ig_tau2), ("ig_tauC2", self.ig_tau_c2), ("ig_sigma2", self.ig_sigma2)] {
            if !(ig.shape > 0.0 && ig.rate > 0.0) {
                return Err(Error::Config(format!("{name} needs positive shape and rate")));
            }
        }
        if !(self.phi_gamma.0 > 0.0 && self.phi_gamma.1 > 0.0) {
            return Err(Error::Config("phi_gamma needs positive shape and rate".into()));
        }
        let (a, b) = self.nu_uniform;
        if !(a >= 0.0 && b <= 2.0 && a < b) {
            return Err(Error::Config("nu_uniform must be an interval inside [0, 2]".into()));
        }
        Ok(())
    }
}

pub const FIXABLE: [&str; 6] = ["phi", "nu", "alpha", "sigma2", "tau2", "tauC2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iters: usize,
    pub burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub chains: usize,
    /// Trials per cell above which latent sums use their normal approximation.
    pub clt_threshold: u64,
    /// Target acceptance rate for the adaptive random walks.
    pub target_accept: f64,
    /// Chain effective sample size below which the CLI reports failure.
    pub min_ess: f64,
    /// Parameters held at their initial values: any of `phi`, `nu`, `alpha`,
    /// `sigma2`, `tau2`, `tauC2`.
    pub fixed: Vec<String>,
    pub init: InitialValues,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iters: 10_000,
            burnin: 2_000,
            thin: 5,
            seed: 1,
            chains: 1,
            clt_threshold: 50,
            target_accept: 0.3,
            min_ess: 1000.0,
            fixed: Vec::new(),
            init: InitialValues::default(),
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.burnin >= self.iters {
            return Err(Error::Config("need 0 <= burnin < iters".into()));
        }
        if self.thin == 0 || self.chains == 0 {
            return Err(Error::Config("thin and chains must be >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        if let Some(bad) = self.fixed.iter().find(|f| !FIXABLE.contains(&f.as_str())) {
            return Err(Error::Config(format!("unknown fixed parameter {bad}")));
        }
        Ok(())
    }

    pub fn is_fixed(&self, name: &str) -> bool {
        self.fixed.iter().any(|f| f == name)
    }

    pub fn retained(&self) -> usize {
        (self.iters - self.burnin) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialValues {
    pub tau2: f64,
    #[serde(rename = "tauC2")]
    pub tau_c2: f64,
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
    pub alpha: f64,
}

impl Default for InitialValues {
    fn default() -> Self {
        Self {
            tau2: 0.1,
            tau_c2: 0.1,
            sigma2: 0.5,
            phi: 1.0,
            nu: 1.0,
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub geometry: Option<PathBuf>,
    pub hierarchy: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub estimates: Option<PathBuf>,
    pub supports: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub basis_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub priors: Priors,
    pub mcmc: McmcConfig,
    pub paths: Paths,
    /// Synthetic data generation for `simulate`.
    pub simulation: SimulationConfig,
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.priors.validate()?;
        self.mcmc.validate()?;
        self.simulation.validate()?;
        if self.model.q == 0 {
            return Err(Error::Config("model.q must be >= 1".into()));
        }
        if !(self.model.eps > 0.0 && self.model.eps < 0.5) {
            return Err(Error::Config("model.eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Hash of the canonical serialisation, written into every output.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("config serialises");
        io::fingerprint(text.as_bytes())[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}
