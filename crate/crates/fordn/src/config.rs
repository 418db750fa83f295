//! Experiment configuration: one TOML file, every field defaulted, hashed
//! into every output.

use std::path::{Path, PathBuf};

use fordn_core::geometry::Eigenvalues;
use fordn_core::network::{TrainConfig, DEFAULT_DEPTH, DEFAULT_LAMBDA, DEFAULT_TAU};
use fordn_core::pipeline::{FoExtractionConfig, GuidedSettings};
use fordn_core::signal::BaselineMode;
use fordn_core::solvers::SolverSettings;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub basis: BasisConfig,
    pub acquisition: AcquisitionConfig,
    pub phantom: PhantomConfig,
    pub network: NetworkConfig,
    pub solver: SolverConfig,
    pub extraction: ExtractionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisConfig {
    /// Tessellation level of the coarse (network) basis.
    pub coarse_level: u32,
    /// Tessellation level of the dense (final solve) basis.
    pub dense_level: u32,
    pub axial_diffusivity: f64,
    pub radial_diffusivity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub directions: usize,
    pub b_value: f64,
    pub scheme_seed: u64,
    /// A `gx gy gz b` table replacing the generated scheme.
    pub gradient_table: Option<PathBuf>,
    pub snr: f64,
    pub s0: f64,
    /// Normalize by a noisy rather than the clean baseline image.
    pub noisy_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub depth: usize,
    pub lambda: f64,
    pub tau: f64,
    /// Multiplier on the input weights of the thresholding initialization.
    pub init_gain: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub samples_per_combo: usize,
    pub training_seed: u64,
    /// SNR of the synthesized training signals.
    pub training_snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub beta_fordn: f64,
    pub beta_cfari: f64,
    pub beta_l2l0: f64,
    pub alpha: f64,
    pub reweight_rounds: usize,
    pub reweight_epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub threshold: f64,
    pub refine_angle_deg: f64,
}

impl Default for BasisConfig {
    fn default() -> Self {
        let e = Eigenvalues::default();
        Self {
            coarse_level: 6,
            dense_level: 12,
            axial_diffusivity: e.axial,
            radial_diffusivity: e.radial,
        }
    }
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            directions: 30,
            b_value: 1000.0,
            scheme_seed: 1,
            gradient_table: None,
            snr: 20.0,
            s0: 1.0,
            noisy_baseline: false,
        }
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { noise_seed: 7 }
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            depth: DEFAULT_DEPTH,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            init_gain: 50.0,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            samples_per_combo: 60,
            training_seed: 3,
            training_snr: 20.0,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        let g = GuidedSettings::default();
        let s = SolverSettings::default();
        Self {
            beta_fordn: g.beta,
            beta_cfari: 4.0,
            beta_l2l0: 0.1,
            alpha: g.alpha,
            reweight_rounds: 5,
            reweight_epsilon: 1e-3,
            max_iter: s.max_iter,
            tol: s.tol,
        }
    }
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        let e = FoExtractionConfig::default();
        Self {
            threshold: e.threshold,
            refine_angle_deg: e.refine_angle_deg,
        }
    }
}

fn check(ok: bool, message: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Validation(message()))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::format(path, m),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.basis;
        check((1..=64).contains(&b.coarse_level), || format!("basis.coarse_level must be in 1..=64 (got {})", b.coarse_level))?;
        check(b.dense_level >= b.coarse_level && b.dense_level <= 64, || {
            format!("basis.dense_level must be in coarse_level..=64 (got {})", b.dense_level)
        })?;
        self.eigenvalues().validate()?;
        let a = &self.acquisition;
        check(a.directions >= 6, || format!("acquisition.directions must be at least 6 (got {})", a.directions))?;
        check(a.b_value > 0.0 && a.b_value.is_finite(), || format!("acquisition.b_value must be positive (got {})", a.b_value))?;
        check(a.snr > 0.0, || format!("acquisition.snr must be positive (got {})", a.snr))?;
        check(a.s0 > 0.0 && a.s0.is_finite(), || format!("acquisition.s0 must be positive (got {})", a.s0))?;
        let n = &self.network;
        check(n.depth >= 1, || "network.depth must be at least 1".into())?;
        check(n.lambda >= 0.0 && n.lambda.is_finite(), || format!("network.lambda must be ≥ 0 (got {})", n.lambda))?;
        check(n.tau > 0.0 && n.tau.is_finite(), || format!("network.tau must be positive (got {})", n.tau))?;
        check(n.init_gain > 0.0 && n.init_gain.is_finite(), || format!("network.init_gain must be positive (got {})", n.init_gain))?;
        check(n.learning_rate > 0.0 && n.learning_rate.is_finite(), || {
            format!("network.learning_rate must be positive (got {})", n.learning_rate)
        })?;
        check(n.batch_size >= 1, || "network.batch_size must be at least 1".into())?;
        check(n.epochs >= 1, || "network.epochs must be at least 1".into())?;
        check(n.samples_per_combo >= 1, || "network.samples_per_combo must be at least 1".into())?;
        check(n.training_snr > 0.0, || format!("network.training_snr must be positive (got {})", n.training_snr))?;
        let s = &self.solver;
        for (name, beta) in [("beta_fordn", s.beta_fordn), ("beta_cfari", s.beta_cfari), ("beta_l2l0", s.beta_l2l0)] {
            check(beta >= 0.0 && beta.is_finite(), || format!("solver.{name} must be ≥ 0 (got {beta})"))?;
        }
        check((0.0..1.0).contains(&s.alpha), || format!("solver.alpha must be in [0, 1) (got {})", s.alpha))?;
        check(s.reweight_rounds >= 1, || "solver.reweight_rounds must be at least 1".into())?;
        check(s.reweight_epsilon > 0.0, || format!("solver.reweight_epsilon must be positive (got {})", s.reweight_epsilon))?;
        check(s.tol > 0.0, || format!("solver.tol must be positive (got {})", s.tol))?;
        self.extraction_config().validate()?;
        Ok(())
    }

    pub fn eigenvalues(&self) -> Eigenvalues {
        Eigenvalues {
            axial: self.basis.axial_diffusivity,
            radial: self.basis.radial_diffusivity,
        }
    }

    pub fn baseline_mode(&self) -> BaselineMode {
        if self.acquisition.noisy_baseline {
            BaselineMode::Noisy
        } else {
            BaselineMode::Clean
        }
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            max_iter: self.solver.max_iter,
            tol: self.solver.tol,
            ..SolverSettings::default()
        }
    }

    pub fn extraction_config(&self) -> FoExtractionConfig {
        FoExtractionConfig {
            threshold: self.extraction.threshold,
            refine_angle_deg: self.extraction.refine_angle_deg,
        }
    }

    pub fn guided_settings(&self) -> GuidedSettings {
        GuidedSettings {
            alpha: self.solver.alpha,
            beta: self.solver.beta_fordn,
            solver: self.solver_settings(),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.network.epochs,
            batch_size: self.network.batch_size,
            learning_rate: self.network.learning_rate,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = ExperimentConfig::from_toml("[acquisition]\nsnr = 10.0\n").unwrap();
        assert_eq!(c.acquisition.snr, 10.0);
        assert_eq!(c.basis.coarse_level, 6);
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("[solver]\nalpha = 1.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[extraction]\nthreshold = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml("[basis]\ncoarse_level = 8\ndense_level = 4\n").is_err());
        assert!(ExperimentConfig::from_toml("[nonsense]\nx = 1\n").is_err());
    }
}
