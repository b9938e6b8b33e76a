//! TOML configuration shared by the library entry points and the CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::VehicleParams;
use crate::mpc::MpcConfig;
use crate::qp::SolverOptions;
use crate::safeset::BrakingSpec;
use crate::sim::ScenarioConfig;
use crate::{Error, Result};

/// Complete experiment configuration. Every table and field is optional and
/// falls back to the nominal platoon setup.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub scenario: ScenarioConfig,
    pub solver: SolverOptions,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.mpc.validate()?;
        self.scenario.validate(&self.mpc)?;
        self.braking_spec().validate()?;
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config("solver.tol and solver.max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn braking_spec(&self) -> BrakingSpec {
        self.mpc.braking_spec(&self.vehicle, self.scenario.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(Config::from_toml_str("").unwrap(), Config::default());
    }

    #[test]
    fn partial_tables_override_fields() {
        let cfg = Config::from_toml_str("[mpc]\ntrust = 7\n[scenario]\nvehicles = 6\n").unwrap();
        assert_eq!(cfg.mpc.trust, 7);
        assert_eq!(cfg.scenario.vehicles, 6);
        assert_eq!(cfg.mpc.h_des, 9.0);
    }

    #[test]
    fn errors_carry_location() {
        let err = Config::from_toml_str("[mpc]\nhorizon = 20\nbogus = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus") && msg.contains("line 3"), "{msg}");
        let err = Config::from_toml_str("[scenario]\nspacing = 5.0\n").unwrap_err();
        assert!(err.to_string().contains("h_min"), "{err}");
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = Config::default();
        cfg.mpc.a_min = Some(-3.218);
        cfg.scenario.trust_values = vec![0, 20];
        let back = Config::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn missing_file_is_config_error() {
        let err = Config::load(Path::new("/nonexistent/platoon.toml")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
