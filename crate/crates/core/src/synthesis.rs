//! Synthetic cohort generator: speckled phantom sweeps with planted
//! hyperechoic lesions, plus clinical covariates drawn from published
//! cohort quartiles.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cohort, PatientRecord, SliceImage, SliceLabel, Study};
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed_indexed, seeded_rng};

/// Normal-score conversion of the quartile: Φ⁻¹(0.75) ≈ 0.6745.
const PROBIT_75: f64 = 0.674_489_750_196_081_7;

// ---------------------------------------------------------------------------
// Clinical covariates
// ---------------------------------------------------------------------------

/// Median with interquartile bounds, as reported in cohort tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn new(q1: f64, median: f64, q3: f64) -> Self {
        Self { q1, median, q3 }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.q1 > 0.0 && self.q1 < self.median && self.median < self.q3) {
            return Err(CoreError::InvalidInput(format!(
                "quartiles must satisfy 0 < q1 < median < q3, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Two-piece log-normal hitting all three quartiles exactly: a single
    /// log-normal cannot match an asymmetric (q1, median, q3) triple, so
    /// the two tails get separate log-scale widths.
    pub fn sample_split_lognormal(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let ln_m = self.median.ln();
        let sigma = if z < 0.0 {
            (ln_m - self.q1.ln()) / PROBIT_75
        } else {
            (self.q3.ln() - ln_m) / PROBIT_75
        };
        (ln_m + sigma * z).exp()
    }

    /// Normal draw with σ = IQR / 1.349, rounded to whole years and
    /// clamped to a plausible screening-age range.
    pub fn sample_age(&self, rng: &mut ChaCha8Rng) -> u32 {
        let sigma = (self.q3 - self.q1) / (2.0 * PROBIT_75);
        let z: f64 = StandardNormal.sample(rng);
        (self.median + sigma * z).round().clamp(45.0, 90.0) as u32
    }
}

/// Per-class clinical profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub age: Quartiles,
    pub psa: Quartiles,
    pub volume: Quartiles,
    /// Fraction with a suspicious digital rectal exam.
    pub dre_rate: f64,
}

impl ClassProfile {
    pub fn check(&self) -> Result<()> {
        self.age.check()?;
        self.psa.check()?;
        self.volume.check()?;
        if !(0.0..=1.0).contains(&self.dre_rate) {
            return Err(CoreError::InvalidInput(format!(
                "dre_rate must lie in [0, 1], got {}",
                self.dre_rate
            )));
        }
        Ok(())
    }
}

/// Clinical covariate distributions for both outcome classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalDistributions {
    pub positive: ClassProfile,
    pub negative: ClassProfile,
}

impl Default for ClinicalDistributions {
    fn default() -> Self {
        Self {
            positive: ClassProfile {
                age: Quartiles::new(66.0, 70.0, 74.0),
                psa: Quartiles::new(5.8, 8.2, 13.1),
                volume: Quartiles::new(31.5, 37.5, 49.4),
                dre_rate: 0.494,
            },
            negative: ClassProfile {
                age: Quartiles::new(63.0, 69.0, 71.0),
                psa: Quartiles::new(3.3, 5.7, 7.5),
                volume: Quartiles::new(39.0, 47.1, 55.4),
                dre_rate: 0.091,
            },
        }
    }
}

impl ClinicalDistributions {
    pub fn check(&self) -> Result<()> {
        self.positive.check()?;
        self.negative.check()
    }

    pub fn profile(&self, cspca: bool) -> &ClassProfile {
        if cspca {
            &self.positive
        } else {
            &self.negative
        }
    }
}

/// Draw one patient's covariates from the class-conditional profile.
pub fn sample_clinical(
    distributions: &ClinicalDistributions,
    cspca: bool,
    patient_id: &str,
    rng: &mut ChaCha8Rng,
) -> PatientRecord {
    let p = distributions.profile(cspca);
    PatientRecord {
        patient_id: patient_id.to_string(),
        age: Some(p.age.sample_age(rng)),
        psa: Some(p.psa.sample_split_lognormal(rng)),
        dre: Some(u8::from(rng.gen::<f64>() < p.dre_rate)),
        prostate_volume: Some(p.volume.sample_split_lognormal(rng)),
        cspca,
    }
}

// ---------------------------------------------------------------------------
// Phantom sweeps
// ---------------------------------------------------------------------------

/// Synthetic cohort parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    /// Inclusive slice-count range per sweep.
    pub slices_min: usize,
    pub slices_max: usize,
    pub image_size: usize,
    /// Additive lesion brightness as a fraction of full scale; 0 plants
    /// invisible lesions (labels kept, no imaging signal).
    pub lesion_contrast: f64,
    /// Standard deviation of the multiplicative speckle factor (mean 1).
    pub speckle_sigma: f64,
    /// Ambiguous boundary slices excluded on each side of a lesion run.
    pub margin: usize,
    pub clinical: ClinicalDistributions,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_positive: 79,
            n_negative: 66,
            slices_min: 200,
            slices_max: 300,
            image_size: 256,
            lesion_contrast: 0.35,
            speckle_sigma: 0.05,
            margin: 2,
            clinical: ClinicalDistributions::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn check(&self) -> Result<()> {
        self.clinical.check()?;
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(CoreError::InvalidInput("both classes must be non-empty".into()));
        }
        if self.slices_min == 0 || self.slices_min > self.slices_max {
            return Err(CoreError::InvalidInput(format!(
                "invalid slice range [{}, {}]",
                self.slices_min, self.slices_max
            )));
        }
        let needed = MIN_RUN + 2 * self.margin;
        if self.slices_min < needed {
            return Err(CoreError::InvalidInput(format!(
                "slices_min {} cannot hold a {MIN_RUN}-slice lesion with {}-slice margins",
                self.slices_min, self.margin
            )));
        }
        if self.image_size < 32 {
            return Err(CoreError::InvalidInput("image_size must be at least 32".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_contrast) {
            return Err(CoreError::InvalidInput("lesion_contrast must lie in [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.speckle_sigma) {
            return Err(CoreError::InvalidInput("speckle_sigma must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Shortest lesion run a positive sweep can carry.
pub const MIN_RUN: usize = 8;

/// Ground truth for a planted lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionTruth {
    /// First lesion-bearing frame.
    pub start: usize,
    /// Number of consecutive lesion frames (>= MIN_RUN).
    pub len: usize,
}

/// Generated cohort with the planted-lesion truth map (positives only).
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub lesions: BTreeMap<String, LesionTruth>,
}

/// True label a frame should carry given the planted lesion.
pub fn lesion_oracle(truth: Option<&LesionTruth>, frame: usize, margin: usize) -> SliceLabel {
    let Some(t) = truth else { return SliceLabel::Negative };
    if frame >= t.start && frame < t.start + t.len {
        SliceLabel::Positive
    } else if frame + margin >= t.start && frame < t.start + t.len + margin {
        SliceLabel::Excluded
    } else {
        SliceLabel::Negative
    }
}

/// Radial gland background in full-scale units, hypoechoic rim to bright
/// center. Identical for every slice; speckle provides the variation.
fn gland_background(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut bg = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)) / (c * c);
            bg.push(40.0 + 140.0 * (-1.8 * r2).exp());
        }
    }
    bg
}

/// Additive lesion template: a bright disk, zero elsewhere.
fn lesion_template(size: usize, cy: f64, cx: f64, radius: f64, contrast: f64) -> Vec<f64> {
    let amp = contrast * 255.0;
    let mut t = vec![0.0; size * size];
    let r2 = radius * radius;
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= r2 {
                t[y * size + x] = amp;
            }
        }
    }
    t
}

fn render_slice(
    patient_id: &str,
    frame: u32,
    size: usize,
    bg: &[f64],
    lesion: Option<&[f64]>,
    noise_amp: f64,
    rng: &mut ChaCha8Rng,
) -> SliceImage {
    let mut noise = vec![0u8; size * size];
    rng.fill(&mut noise[..]);
    let mut data = Vec::with_capacity(size * size);
    for i in 0..size * size {
        // Byte -> uniform multiplicative speckle factor 1 +/- noise_amp.
        // Uniform matches the requested std at a fraction of the cost of a
        // Gaussian draw; noise_amp = sqrt(3) * sigma gives std sigma.
        let s = 1.0 + (noise[i] as f64 / 255.0 * 2.0 - 1.0) * noise_amp;
        let mut v = bg[i];
        if let Some(l) = lesion {
            v += l[i];
        }
        data.push((v * s).clamp(0.0, 255.0) as u8);
    }
    SliceImage::from_bytes(patient_id, frame, size, size, data).expect("consistent dimensions")
}

fn generate_study(config: &PhantomConfig, index: usize, cspca: bool) -> (Study, Option<LesionTruth>) {
    let patient_id = format!("S{:04}", index + 1);
    let mut rng = seeded_rng(derive_seed_indexed(config.seed, "study", index as u64));
    let record = sample_clinical(&config.clinical, cspca, &patient_id, &mut rng);
    let n_slices = rng.gen_range(config.slices_min..=config.slices_max);
    let size = config.image_size;

    let truth = if cspca {
        // Run length: 8 plus a geometric tail, capped so run + margins fit.
        let mut extra = 0usize;
        while rng.gen::<bool>() {
            extra += 1;
        }
        let max_len = n_slices - 2 * config.margin;
        let len = (MIN_RUN + extra).min(max_len);
        let start = rng.gen_range(config.margin..=n_slices - len - config.margin);
        Some(LesionTruth { start, len })
    } else {
        None
    };

    let bg = gland_background(size);
    let lesion = truth.map(|_| {
        let c = (size as f64 - 1.0) / 2.0;
        let offset = size as f64 / 4.0;
        let cy = c + rng.gen_range(-offset..offset);
        let cx = c + rng.gen_range(-offset..offset);
        let radius = rng.gen_range(size as f64 / 10.0..size as f64 / 6.0);
        lesion_template(size, cy, cx, radius, config.lesion_contrast)
    });
    // Boundary slices carry a fainter partial lesion.
    let margin_lesion = lesion
        .as_ref()
        .map(|l| l.iter().map(|&v| v * 0.5).collect::<Vec<f64>>());

    let noise_amp = config.speckle_sigma * 3.0f64.sqrt();
    let mut slices = Vec::with_capacity(n_slices);
    let mut labels = Vec::with_capacity(n_slices);
    for frame in 0..n_slices {
        let label = lesion_oracle(truth.as_ref(), frame, config.margin);
        let overlay = match label {
            SliceLabel::Positive => lesion.as_deref(),
            SliceLabel::Excluded => margin_lesion.as_deref(),
            SliceLabel::Negative => None,
        };
        slices.push(render_slice(&patient_id, frame as u32, size, &bg, overlay, noise_amp, &mut rng));
        labels.push(label);
    }
    (Study { record, slices, labels }, truth)
}

/// Generate a full synthetic cohort, deterministic per seed. Studies are
/// rendered in parallel from independently derived streams, so the output
/// does not depend on thread scheduling.
pub fn generate_cohort(config: &PhantomConfig) -> Result<SyntheticCohort> {
    config.check()?;
    let n = config.n_positive + config.n_negative;
    let results: Vec<(Study, Option<LesionTruth>)> = (0..n)
        .into_par_iter()
        .map(|i| generate_study(config, i, i < config.n_positive))
        .collect();
    let mut lesions = BTreeMap::new();
    let mut studies = Vec::with_capacity(n);
    for (study, truth) in results {
        if let Some(t) = truth {
            lesions.insert(study.record.patient_id.clone(), t);
        }
        study.check_invariants()?;
        studies.push(study);
    }
    Ok(SyntheticCohort { cohort: Cohort { studies }, lesions })
}
