use std::fs;
use std::path::{Path, PathBuf};

use loupe::data::PhantomSpec;
use loupe::masks::ReadoutAxis;
use loupe::reconnet::UNetConfig;
use loupe::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Uniform,
    Vd,
    Cartesian,
    Spectrum,
}

impl MaskKind {
    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Uniform => "uniform",
            MaskKind::Vd => "vd",
            MaskKind::Cartesian => "cartesian",
            MaskKind::Spectrum => "spectrum",
        }
    }
}

/// Parameters of the benchmark mask generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub kind: MaskKind,
    pub alpha: f64,
    pub height: usize,
    pub width: usize,
    /// Exponent of the variable-density profile.
    pub power: f64,
    pub center_lines: usize,
    pub readout: ReadoutAxis,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            kind: MaskKind::Uniform,
            alpha: 0.25,
            height: 64,
            width: 64,
            power: 3.0,
            center_lines: 0,
            readout: ReadoutAxis::Rows,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlopeGrid {
    pub slope_s: Vec<f64>,
    pub slope_t: Vec<f64>,
}

impl Default for SlopeGrid {
    fn default() -> Self {
        SlopeGrid {
            slope_s: vec![50.0, 100.0, 200.0],
            slope_t: vec![1.0, 5.0, 10.0],
        }
    }
}

/// Everything a run reads, as one JSON document. Missing fields take their
/// defaults; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides every per-section seed when set.
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub data: PhantomSpec,
    pub train: TrainConfig,
    pub net: UNetConfig,
    pub mask: MaskConfig,
    pub slope_grid: SlopeGrid,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Defaults, then the optional file, then the global seed.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = seed.or(cfg.seed) {
            cfg.set_seed(s);
        }
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.data.seed = seed;
        self.train.seed = seed;
        self.net.seed = seed;
        self.mask.seed = seed;
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}
