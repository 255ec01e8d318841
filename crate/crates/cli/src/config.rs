//! Run configuration: one TOML document, every key optional. Command-line
//! flags override file values; the top-level `seed` feeds every seeded
//! component.

use std::path::{Path, PathBuf};

use affectsynth::eval::ExperimentConfig;
use affectsynth::mmfit::FitConfig;
use affectsynth::splocs::SolverConfig;
use affectsynth::synthetic::GalleryPlan;
use affectsynth::va_grid::CellIndex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub gallery: GalleryConfig,
    pub fit: FitConfig,
    pub synthesis: SynthesisConfig,
    pub augment: AugmentConfig,
    pub experiment: ExperimentConfig,
    pub generator: GeneratorConfig,
    pub serve: ServeConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalleryConfig {
    /// Components per cell model, capped by the cell's frame count.
    pub cell_components: usize,
    /// Solver settings for the per-cell models; `h` is replaced per cell.
    pub solver: SolverConfig,
}

impl Default for GalleryConfig {
    fn default() -> Self {
        GalleryConfig {
            cell_components: 10,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub intensity: f64,
    /// Side length of the preview render when no session image is given.
    pub preview_size: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            intensity: 1.0,
            preview_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub valence_eps: f64,
    pub arousal_eps: f64,
    /// Optional list of human-confirmed neutral images, one per line; when
    /// given, a frame must pass the threshold and be listed.
    pub allowlist: Option<PathBuf>,
    /// Cells to synthesize per neutral frame; empty means every populated
    /// gallery cell.
    pub cells: Vec<CellIndex>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            valence_eps: 0.01,
            arousal_eps: 0.01,
            allowlist: None,
            cells: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub plan: GalleryPlan,
    pub model_components: usize,
    pub model_sigma: f64,
    pub fixture_size: usize,
    pub landmark_count: usize,
    /// Identities rendered into the demo augmentation dataset.
    pub dataset_subjects: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            plan: GalleryPlan::default(),
            model_components: 8,
            model_sigma: 1.0,
            fixture_size: 128,
            landmark_count: 40,
            dataset_subjects: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// File (or defaults) with the command-line seed applied.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    pub fn propagate_seed(&mut self) {
        self.gallery.solver.rng_seed = self.seed;
        self.experiment.solver.rng_seed = self.seed;
        self.experiment.split.seed = self.seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
