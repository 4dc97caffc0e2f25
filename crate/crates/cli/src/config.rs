//! Run configuration file (TOML). Every section is optional; missing
//! fields fall back to the library defaults so a minimal config can be
//! just a seed.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use microscreen_core::autoencoder::TrainConfig;
use microscreen_core::evaluation::CvConfig;
use microscreen_core::forest::ForestConfig;
use microscreen_core::screening::AggregationConfig;
use microscreen_core::synthesis::PhantomConfig;

/// Cross-validation knobs: fold count plus desk-scale subsample caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSection {
    pub k: usize,
    /// Cap on autoencoder training slices per round (None = all).
    pub ae_train_cap: Option<usize>,
    /// Cap on autoencoder validation slices per round.
    pub ae_val_cap: Option<usize>,
    /// Cap on slice-forest training slices per round.
    pub forest_train_cap: Option<usize>,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { k: 5, ae_train_cap: None, ae_val_cap: None, forest_train_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; fanned out to per-stage seeds via labeled hashing.
    /// The --seed flag wins over this value.
    pub seed: u64,
    /// Dataset manifest for read operations (--manifest wins).
    pub manifest: Option<PathBuf>,
    /// Output directory (--out wins).
    pub out: Option<PathBuf>,
    /// Autoencoder checkpoint path (--model wins for read operations).
    pub checkpoint: Option<PathBuf>,
    /// Fraction of studies held out as the autoencoder validation split
    /// for the standalone train-ae command.
    pub val_fraction: f64,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub aggregation: AggregationConfig,
    pub cv: CvSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            manifest: None,
            out: None,
            checkpoint: None,
            val_fraction: 0.1,
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            aggregation: AggregationConfig::default(),
            cv: CvSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Cross-validation config for one pipeline run, seeded from `seed`.
    pub fn cv_config(&self, seed: u64) -> CvConfig {
        CvConfig {
            k: self.cv.k,
            seed,
            train: self.train.clone(),
            forest: self.forest.clone(),
            aggregation: self.aggregation.clone(),
            ae_train_cap: self.cv.ae_train_cap,
            ae_val_cap: self.cv.ae_val_cap,
            forest_train_cap: self.cv.forest_train_cap,
        }
    }
}
