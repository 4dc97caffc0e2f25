//! Patient-level screening pipelines.
//!
//! The imaging path turns autoencoder features into slice probabilities
//! and aggregates them with a consecutive-run rule; the clinical baseline
//! is a forest over (age, psa, volume, dre). Both share the same decision
//! threshold.
//!
//! The continuous patient score is the maximum over all length-L windows
//! of the minimum probability in the window; thresholding it at tau is
//! exactly "at least L consecutive slices with probability >= tau".

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::autoencoder::{extract_features, AutoencoderWeights};
use crate::dataset::{PatientRecord, Study};
use crate::error::{CoreError, Result};
use crate::forest::{fit_forest, predict_proba, ForestConfig, ForestModel};

/// Slice-level probability, ordered by frame within a patient.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePrediction {
    pub patient_id: String,
    pub frame_index: u32,
    pub probability: f64,
}

/// Run-rule parameters: run length L and slice threshold tau.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub run_length: usize,
    pub slice_threshold: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self { run_length: 8, slice_threshold: 0.15 }
    }
}

impl AggregationConfig {
    pub fn check(&self) -> Result<()> {
        if self.run_length == 0 {
            return Err(CoreError::InvalidInput("run_length must be >= 1".into()));
        }
        if !(self.slice_threshold > 0.0 && self.slice_threshold < 1.0) {
            return Err(CoreError::InvalidInput("slice_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Patient-level score and decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientScore {
    pub patient_id: String,
    pub score: f64,
    pub decision: bool,
}

/// The four clinical biomarkers in canonical order (age, psa, volume, dre).
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalFeatures {
    pub age: f64,
    pub psa: f64,
    pub volume: f64,
    pub dre: f64,
}

impl ClinicalFeatures {
    /// Canonical feature vector; rejects incomplete records.
    pub fn from_record(record: &PatientRecord) -> Result<Self> {
        let missing = |field: &str| CoreError::Patient {
            patient_id: record.patient_id.clone(),
            message: format!("missing clinical value: {field}"),
        };
        Ok(Self {
            age: record.age.ok_or_else(|| missing("age"))? as f64,
            psa: record.psa.ok_or_else(|| missing("psa"))?,
            volume: record.prostate_volume.ok_or_else(|| missing("volume"))?,
            dre: record.dre.ok_or_else(|| missing("dre"))? as f64,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.age, self.psa, self.volume, self.dre]
    }
}

/// Score every slice of a study in frame order. All slices are scored,
/// including ones whose training label was EXCLUDED.
pub fn predict_slices(
    study: &Study,
    ae_weights: &AutoencoderWeights,
    slice_model: &ForestModel,
) -> Result<Vec<SlicePrediction>> {
    if study.slices.is_empty() {
        return Err(CoreError::Patient {
            patient_id: study.record.patient_id.clone(),
            message: "empty study".into(),
        });
    }
    let refs: Vec<&crate::dataset::SliceImage> = study.slices.iter().collect();
    let features = extract_features(&refs, ae_weights, 32)?;
    let mut out = Vec::with_capacity(refs.len());
    for (slice, feat) in refs.iter().zip(&features) {
        let fv: Vec<f64> = feat.0.iter().map(|&v| v as f64).collect();
        out.push(SlicePrediction {
            patient_id: slice.patient_id.clone(),
            frame_index: slice.frame_index,
            probability: predict_proba(slice_model, &fv)?,
        });
    }
    Ok(out)
}

/// Max over all length-L windows of the windowed minimum probability;
/// 0 when fewer than L slices exist. O(n) via a monotonic deque.
pub fn patient_score(probs: &[f64], run_length: usize) -> f64 {
    assert!(run_length >= 1, "run_length must be >= 1");
    if probs.len() < run_length {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    let mut deque: VecDeque<usize> = VecDeque::new();
    for i in 0..probs.len() {
        while let Some(&back) = deque.back() {
            if probs[back] >= probs[i] {
                deque.pop_back();
            } else {
                break;
            }
        }
        deque.push_back(i);
        if let Some(&front) = deque.front() {
            if front + run_length <= i {
                deque.pop_front();
            }
        }
        if i + 1 >= run_length {
            best = best.max(probs[*deque.front().expect("window nonempty")]);
        }
    }
    best
}

/// Positive iff score >= tau; equivalent to the existence of >= L
/// consecutive slices each with probability >= tau.
pub fn classify_patient(score: f64, tau: f64) -> bool {
    score >= tau
}

/// Score and classify one patient's ordered slice probabilities.
pub fn score_patient(patient_id: &str, probs: &[f64], config: &AggregationConfig) -> PatientScore {
    let score = patient_score(probs, config.run_length);
    PatientScore {
        patient_id: patient_id.to_string(),
        score,
        decision: classify_patient(score, config.slice_threshold),
    }
}

/// Fit the clinical baseline forest over (age, psa, volume, dre).
pub fn fit_clinical(records: &[PatientRecord], config: &ForestConfig) -> Result<ForestModel> {
    if records.len() < 2 {
        return Err(CoreError::InvalidInput("need at least 2 records".into()));
    }
    let mut rows = Vec::with_capacity(records.len() * 4);
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        rows.extend(ClinicalFeatures::from_record(r)?.to_vec());
        y.push(r.cspca as u8);
    }
    let x = Array2::from_shape_vec((records.len(), 4), rows).expect("4 features per record");
    fit_forest(x.view(), &y, config)
}

/// csPCa probability for one clinical record.
pub fn predict_clinical(model: &ForestModel, record: &PatientRecord) -> Result<f64> {
    let features = ClinicalFeatures::from_record(record)?;
    predict_proba(model, &features.to_vec())
}

/// Write slice predictions as `patient_id,frame_index,probability`.
pub fn write_slice_predictions(preds: &[SlicePrediction], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "patient_id,frame_index,probability")?;
    for p in preds {
        writeln!(f, "{},{},{}", p.patient_id, p.frame_index, p.probability)?;
    }
    Ok(())
}

/// Write patient scores as `patient_id,score,decision,ground_truth`.
pub fn write_patient_scores(
    scores: &[(PatientScore, bool)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "patient_id,score,decision,ground_truth")?;
    for (s, truth) in scores {
        writeln!(f, "{},{},{},{}", s.patient_id, s.score, s.decision as u8, *truth as u8)?;
    }
    Ok(())
}

/// Brute-force run scan used as the independent oracle for the run rule.
pub fn run_rule_brute_force(probs: &[f64], run_length: usize, tau: f64) -> bool {
    let mut run = 0usize;
    for &p in probs {
        if p >= tau {
            run += 1;
            if run >= run_length {
                return true;
            }
        } else {
            run = 0;
        }
    }
    false
}
