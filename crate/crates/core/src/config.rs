//! Flat experiment configuration. Keys carry their units; any flat key-value
//! syntax can hold it, TOML is what the runner reads and writes.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{ChshSettings, ChshTerm, ScanVariable};
use crate::event_sim::DetectorModel;
use crate::interferometer::{InterferometerError, NmziConfig};
use crate::par::{self, Stream};
use crate::spdc_source::{SpectralModel, SpectralShape};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub f0_thz: f64,
    pub delta_f_thz: f64,
    pub pump_linewidth_ghz: f64,
    #[serde(rename = "delta_L_mm")]
    pub delta_l_mm: f64,
    pub phi_a_rad: f64,
    pub phi_b_rad: f64,
    pub scan_variable: ScanVariable,
    pub scan_start_rad: f64,
    pub scan_stop_rad: f64,
    pub scan_steps: usize,
    pub efficiency: f64,
    pub jitter_sigma_ps: f64,
    pub dark_rate_hz: f64,
    pub n_pairs: usize,
    pub pair_rate_hz: f64,
    pub seed: u64,
    pub window_half_width_ps: i64,
    pub bin_width_ps: u64,
    pub histogram_range_ps: u64,
    pub min_factor: f64,
    pub chsh_a_rad: f64,
    pub chsh_a_prime_rad: f64,
    pub chsh_b_rad: f64,
    pub chsh_b_prime_rad: f64,
    pub tag_format: TagFormat,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let chsh = ChshSettings::default();
        ExperimentConfig {
            f0_thz: 370.0,
            delta_f_thz: 1.0,
            pump_linewidth_ghz: 1.0,
            delta_l_mm: 30.0,
            phi_a_rad: 0.0,
            phi_b_rad: 0.0,
            scan_variable: ScanVariable::Joint,
            scan_start_rad: 0.0,
            scan_stop_rad: TAU,
            scan_steps: 16,
            efficiency: 1.0,
            jitter_sigma_ps: 5.0,
            dark_rate_hz: 0.0,
            n_pairs: 1_000_000,
            pair_rate_hz: 1e6,
            seed: 1,
            window_half_width_ps: 25,
            bin_width_ps: 2,
            histogram_range_ps: 200,
            min_factor: 10.0,
            chsh_a_rad: chsh.a,
            chsh_a_prime_rad: chsh.a_prime,
            chsh_b_rad: chsh.b,
            chsh_b_prime_rad: chsh.b_prime,
            tag_format: TagFormat::Csv,
            output_dir: "out".to_string(),
        }
    }
}

/// Every config key, in document order.
pub const CONFIG_KEYS: &[&str] = &[
    "f0_thz",
    "delta_f_thz",
    "pump_linewidth_ghz",
    "delta_L_mm",
    "phi_a_rad",
    "phi_b_rad",
    "scan_variable",
    "scan_start_rad",
    "scan_stop_rad",
    "scan_steps",
    "efficiency",
    "jitter_sigma_ps",
    "dark_rate_hz",
    "n_pairs",
    "pair_rate_hz",
    "seed",
    "window_half_width_ps",
    "bin_width_ps",
    "histogram_range_ps",
    "min_factor",
    "chsh_a_rad",
    "chsh_a_prime_rad",
    "chsh_b_rad",
    "chsh_b_prime_rad",
    "tag_format",
    "output_dir",
];

/// Keys that only say where output goes and are left out of the content hash.
const UNHASHED_KEYS: &[&str] = &["output_dir"];

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses without range checks, so overrides can still be applied.
    pub fn parse_toml(s: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for key in table.keys() {
            if !CONFIG_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg = Self::parse_toml(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// TOML integers are signed 64-bit, so seeds above `i64::MAX` (such as
    /// derived per-run seeds) have no TOML form.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        if i64::try_from(self.seed).is_err() {
            return Err(invalid("seed", "exceeds the TOML integer range"));
        }
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads a config file without range checks.
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_toml(&text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let cfg = Self::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value, parsed as a TOML value (bare
    /// words are taken as strings).
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ConfigError> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut map = serde_json::to_value(&*self).expect("config serializes");
        map[key] = serde_json::to_value(value).map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
        let updated: ExperimentConfig =
            serde_json::from_value(map).map_err(|e| ConfigError::Parse(format!("{key}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pos = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be > 0, got {v}")))
            }
        };
        let non_neg = |field: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, format!("must be >= 0, got {v}")))
            }
        };
        let finite = |field: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(invalid(field, "must be finite"))
            }
        };
        pos("f0_thz", self.f0_thz)?;
        pos("delta_f_thz", self.delta_f_thz)?;
        non_neg("pump_linewidth_ghz", self.pump_linewidth_ghz)?;
        pos("delta_L_mm", self.delta_l_mm)?;
        finite("phi_a_rad", self.phi_a_rad)?;
        finite("phi_b_rad", self.phi_b_rad)?;
        finite("scan_start_rad", self.scan_start_rad)?;
        finite("scan_stop_rad", self.scan_stop_rad)?;
        if self.scan_stop_rad <= self.scan_start_rad {
            return Err(invalid("scan_stop_rad", "must exceed scan_start_rad"));
        }
        if self.scan_steps < crate::analysis::MIN_SCAN_POINTS {
            return Err(invalid(
                "scan_steps",
                format!("must be >= {}, got {}", crate::analysis::MIN_SCAN_POINTS, self.scan_steps),
            ));
        }
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(invalid("efficiency", format!("must be in [0, 1], got {}", self.efficiency)));
        }
        non_neg("jitter_sigma_ps", self.jitter_sigma_ps)?;
        non_neg("dark_rate_hz", self.dark_rate_hz)?;
        if self.n_pairs == 0 {
            return Err(invalid("n_pairs", "must be >= 1"));
        }
        pos("pair_rate_hz", self.pair_rate_hz)?;
        if self.window_half_width_ps <= 0 {
            return Err(invalid("window_half_width_ps", "must be > 0"));
        }
        let tau = self.tau_ps();
        if (self.window_half_width_ps as f64) >= tau / 2.0 {
            return Err(invalid(
                "window_half_width_ps",
                format!("must be < tau/2 = {:.3} ps so the three slot windows are disjoint", tau / 2.0),
            ));
        }
        if self.bin_width_ps == 0 || self.histogram_range_ps == 0 || !(2 * self.histogram_range_ps).is_multiple_of(self.bin_width_ps) {
            return Err(invalid("bin_width_ps", "must be > 0 and divide 2 x histogram_range_ps"));
        }
        pos("min_factor", self.min_factor)?;
        for (field, v) in [
            ("chsh_a_rad", self.chsh_a_rad),
            ("chsh_a_prime_rad", self.chsh_a_prime_rad),
            ("chsh_b_rad", self.chsh_b_rad),
            ("chsh_b_prime_rad", self.chsh_b_prime_rad),
        ] {
            finite(field, v)?;
        }
        Ok(())
    }

    /// Content hash of the canonical form: SHA-256 over the compact JSON of
    /// every physics and analysis key, truncated to 128 bits.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for k in UNHASHED_KEYS {
                map.remove(*k);
            }
        }
        let canonical = serde_json::to_string(&value).expect("json value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..16])
    }

    pub fn tau_ps(&self) -> f64 {
        crate::interferometer::tau_ps(self.delta_l_mm)
    }

    pub fn model(&self) -> SpectralModel {
        SpectralModel {
            f0_thz: self.f0_thz,
            delta_f_thz: self.delta_f_thz,
            pump_linewidth_ghz: self.pump_linewidth_ghz,
            shape: SpectralShape::Gaussian,
        }
    }

    pub fn detector(&self) -> DetectorModel {
        DetectorModel {
            efficiency: self.efficiency,
            jitter_sigma_ps: self.jitter_sigma_ps,
            dark_rate_hz: self.dark_rate_hz,
        }
    }

    pub fn interferometers(&self) -> Result<(NmziConfig, NmziConfig), InterferometerError> {
        Ok((
            NmziConfig::alice(self.delta_l_mm, self.phi_a_rad)?,
            NmziConfig::bob(self.delta_l_mm, self.phi_b_rad)?,
        ))
    }

    pub fn chsh_settings(&self) -> ChshSettings {
        ChshSettings {
            a: self.chsh_a_rad,
            a_prime: self.chsh_a_prime_rad,
            b: self.chsh_b_rad,
            b_prime: self.chsh_b_prime_rad,
        }
    }

    pub fn with_phases(&self, phi_a: f64, phi_b: f64) -> Self {
        ExperimentConfig {
            phi_a_rad: phi_a,
            phi_b_rad: phi_b,
            ..self.clone()
        }
    }

    /// Run configuration for one CHSH term: its phase plates and a seed
    /// derived from the base seed.
    pub fn for_chsh_term(&self, term: ChshTerm) -> Self {
        let (phi_a, phi_b) = self.chsh_settings().phases(term);
        ExperimentConfig {
            seed: par::derive_seed(self.seed, Stream::ChshSetting, term as u64),
            ..self.with_phases(phi_a, phi_b)
        }
    }

    /// Scan grid as (x, φ_A, φ_B); the stop value is exclusive.
    pub fn scan_grid(&self) -> Vec<(f64, f64, f64)> {
        let step = (self.scan_stop_rad - self.scan_start_rad) / self.scan_steps as f64;
        (0..self.scan_steps)
            .map(|k| {
                let x = self.scan_start_rad + k as f64 * step;
                let (pa, pb) = match self.scan_variable {
                    ScanVariable::PhiA => (x, self.phi_b_rad),
                    ScanVariable::PhiB => (self.phi_a_rad, x),
                    ScanVariable::Joint => (x - self.phi_b_rad, self.phi_b_rad),
                    ScanVariable::Synchronized => (x, x),
                };
                (x, pa, pb)
            })
            .collect()
    }

    /// Seed for scan point `k`.
    pub fn point_seed(&self, k: usize) -> u64 {
        par::derive_seed(self.seed, Stream::ScanPoint, k as u64)
    }
}
