//! Cohort domain types, manifest ingestion/validation, and prostate volume
//! computation from segmentation stacks.
//!
//! Slice pixels are stored as 8-bit grayscale (the on-disk PNG convention)
//! and exposed as intensities in `[0, 1]` by dividing by 255 on access, so
//! the in-memory representation round-trips losslessly through the manifest
//! format.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One 2D micro-ultrasound frame of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    pub patient_id: String,
    /// 0-based position in the sweep.
    pub frame_index: u32,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SliceImage {
    pub fn from_bytes(
        patient_id: impl Into<String>,
        frame_index: u32,
        height: usize,
        width: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::InvalidInput("slice dimensions must be positive".into()));
        }
        if data.len() != height * width {
            return Err(CoreError::DimensionMismatch {
                expected: format!("{}x{} = {} pixels", height, width, height * width),
                actual: format!("{} pixels", data.len()),
            });
        }
        Ok(Self { patient_id: patient_id.into(), frame_index, height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Intensity in [0, 1] at (row, col).
    pub fn intensity(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x] as f32 / 255.0
    }

    /// Grayscale intensities as a (H, W) array in [0, 1].
    pub fn to_grayscale(&self) -> Array2<f32> {
        Array2::from_shape_vec(
            (self.height, self.width),
            self.data.iter().map(|&v| v as f32 / 255.0).collect(),
        )
        .expect("length checked at construction")
    }

    /// Model input convention: bilinear resize to `size`x`size`, then
    /// replicate the grayscale channel three times -> (3, size, size).
    pub fn to_model_input(&self, size: usize) -> Array3<f32> {
        let gray = self.to_grayscale();
        let resized = resize_bilinear(&gray, size, size);
        let mut out = Array3::zeros((3, size, size));
        for c in 0..3 {
            out.index_axis_mut(ndarray::Axis(0), c).assign(&resized);
        }
        out
    }
}

/// Bilinear resampling of a 2D intensity grid.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Array2::zeros((out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        // Align sample centers.
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Three-state training label for a slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SliceLabel {
    Positive,
    Negative,
    /// Cancer status could not be confidently determined; dropped from
    /// training but still scored at inference.
    Excluded,
}

impl SliceLabel {
    pub fn from_manifest_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(SliceLabel::Positive),
            "neg" => Ok(SliceLabel::Negative),
            "excl" => Ok(SliceLabel::Excluded),
            other => Err(CoreError::Manifest(format!("unknown slice label {other:?}"))),
        }
    }

    pub fn manifest_str(&self) -> &'static str {
        match self {
            SliceLabel::Positive => "pos",
            SliceLabel::Negative => "neg",
            SliceLabel::Excluded => "excl",
        }
    }
}

/// Clinical record for one patient. Biomarkers may be absent until
/// validation removes incomplete records; volume may additionally be
/// filled in later from a segmentation stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: Option<u32>,
    pub psa: Option<f64>,
    pub dre: Option<u8>,
    pub prostate_volume: Option<f64>,
    pub cspca: bool,
}

impl PatientRecord {
    /// Range checks on whichever fields are present.
    pub fn check_ranges(&self) -> Result<()> {
        let fail = |message: String| {
            Err(CoreError::Patient { patient_id: self.patient_id.clone(), message })
        };
        if let Some(age) = self.age {
            if !(18..=120).contains(&age) {
                return fail(format!("age {age} outside [18, 120]"));
            }
        }
        if let Some(psa) = self.psa {
            if !psa.is_finite() || psa < 0.0 {
                return fail(format!("psa {psa} must be finite and nonnegative"));
            }
        }
        if let Some(dre) = self.dre {
            if dre > 1 {
                return fail(format!("dre {dre} must be 0 or 1"));
            }
        }
        if let Some(v) = self.prostate_volume {
            if !v.is_finite() || v <= 0.0 {
                return fail(format!("prostate volume {v} must be finite and positive"));
            }
        }
        Ok(())
    }

    /// True when age, psa and dre are all present.
    pub fn has_complete_clinical(&self) -> bool {
        self.age.is_some() && self.psa.is_some() && self.dre.is_some()
    }
}

/// One patient's ordered slice stack, labels and clinical record.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub record: PatientRecord,
    pub slices: Vec<SliceImage>,
    pub labels: Vec<SliceLabel>,
}

impl Study {
    pub fn check_invariants(&self) -> Result<()> {
        let pid = &self.record.patient_id;
        if self.slices.len() != self.labels.len() {
            return Err(CoreError::Patient {
                patient_id: pid.clone(),
                message: format!(
                    "slice/label count mismatch: {} slices, {} labels",
                    self.slices.len(),
                    self.labels.len()
                ),
            });
        }
        for (i, s) in self.slices.iter().enumerate() {
            if s.frame_index as usize != i {
                return Err(CoreError::Patient {
                    patient_id: pid.clone(),
                    message: format!("frame_index {} at position {i}: gaps or disorder", s.frame_index),
                });
            }
        }
        if !self.record.cspca && self.labels.iter().any(|l| *l == SliceLabel::Excluded) {
            return Err(CoreError::Patient {
                patient_id: pid.clone(),
                message: "EXCLUDED label in a csPCa-negative study".into(),
            });
        }
        self.record.check_ranges()
    }
}

/// The study population.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cohort {
    pub studies: Vec<Study>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }
}

/// Ordered binary masks plus voxel spacing in mm.
#[derive(Debug, Clone)]
pub struct SegmentationStack {
    pub masks: Vec<Array2<bool>>,
    pub spacing: (f64, f64, f64),
}

/// Reason a study was dropped by [`validate_cohort`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    Duplicate,
    MissingClinical,
}

/// Removal report emitted by [`validate_cohort`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub patient_id: String,
    pub reason: ExclusionReason,
}

// ---------------------------------------------------------------------------
// Manifest format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestDoc {
    patients: Vec<ManifestPatient>,
}

#[derive(Serialize, Deserialize)]
struct ManifestPatient {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    psa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dre: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    volume: Option<f64>,
    cspca: bool,
    slices: Vec<ManifestSlice>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSlice {
    file: String,
    label: String,
}

/// Load a cohort manifest and decode the referenced 8-bit grayscale PNGs.
/// Paths in the manifest are relative to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let doc: ManifestDoc =
        serde_json::from_str(&text).map_err(|e| CoreError::Manifest(format!("malformed manifest: {e}")))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let studies: Result<Vec<Study>> = doc
        .patients
        .par_iter()
        .map(|p| load_study(base, p))
        .collect();
    Ok(Cohort { studies: studies? })
}

fn load_study(base: &Path, p: &ManifestPatient) -> Result<Study> {
    let record = PatientRecord {
        patient_id: p.id.clone(),
        age: p.age,
        psa: p.psa,
        dre: p.dre,
        prostate_volume: p.volume,
        cspca: p.cspca,
    };
    let mut slices = Vec::with_capacity(p.slices.len());
    let mut labels = Vec::with_capacity(p.slices.len());
    for (i, s) in p.slices.iter().enumerate() {
        let label = SliceLabel::from_manifest_str(&s.label).map_err(|e| CoreError::Patient {
            patient_id: p.id.clone(),
            message: format!("slice {i}: {e}"),
        })?;
        let file: PathBuf = base.join(&s.file);
        let img = image::open(&file).map_err(|e| CoreError::Patient {
            patient_id: p.id.clone(),
            message: format!("unreadable image {}: {e}", file.display()),
        })?;
        let gray = img.into_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        slices.push(SliceImage::from_bytes(&p.id, i as u32, h, w, gray.into_raw())?);
        labels.push(label);
    }
    let study = Study { record, slices, labels };
    study.check_invariants()?;
    Ok(study)
}

/// Write a cohort as a manifest plus per-patient PNG directories.
/// Inverse of [`load_manifest`] on cohort content.
pub fn save_manifest(cohort: &Cohort, dir: impl AsRef<Path>, manifest_name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut patients = Vec::with_capacity(cohort.studies.len());
    for study in &cohort.studies {
        let pid = &study.record.patient_id;
        let pdir = dir.join(pid);
        std::fs::create_dir_all(&pdir)?;
        let mut slices = Vec::with_capacity(study.slices.len());
        for (img, label) in study.slices.iter().zip(&study.labels) {
            let rel = format!("{pid}/frame_{:04}.png", img.frame_index);
            let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.raw().to_vec())
                .expect("slice buffer matches dimensions");
            buf.save(dir.join(&rel))?;
            slices.push(ManifestSlice { file: rel, label: label.manifest_str().to_string() });
        }
        patients.push(ManifestPatient {
            id: pid.clone(),
            age: study.record.age,
            psa: study.record.psa,
            dre: study.record.dre,
            volume: study.record.prostate_volume,
            cspca: study.record.cspca,
            slices,
        });
    }
    let manifest_path = dir.join(manifest_name);
    let json = serde_json::to_string_pretty(&ManifestDoc { patients })?;
    std::fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Remove duplicate patient ids (first occurrence kept) and studies with
/// missing clinical values. Removals are reports, not failures.
pub fn validate_cohort(cohort: Cohort) -> (Cohort, Vec<ExclusionReport>) {
    let mut seen = HashSet::new();
    let mut clean = Vec::with_capacity(cohort.studies.len());
    let mut reports = Vec::new();
    for study in cohort.studies {
        let pid = study.record.patient_id.clone();
        if !seen.insert(pid.clone()) {
            reports.push(ExclusionReport { patient_id: pid, reason: ExclusionReason::Duplicate });
            continue;
        }
        if !study.record.has_complete_clinical() {
            reports.push(ExclusionReport { patient_id: pid, reason: ExclusionReason::MissingClinical });
            continue;
        }
        clean.push(study);
    }
    (Cohort { studies: clean }, reports)
}

/// Prostate volume in mL from a binary segmentation stack with voxel
/// spacing in mm: true-voxel count x sx x sy x sz / 1000.
pub fn compute_prostate_volume(stack: &SegmentationStack) -> Result<f64> {
    if stack.masks.is_empty() {
        return Err(CoreError::InvalidInput("empty segmentation stack".into()));
    }
    let (sx, sy, sz) = stack.spacing;
    if sx <= 0.0 || sy <= 0.0 || sz <= 0.0 {
        return Err(CoreError::InvalidInput(format!("nonpositive spacing ({sx}, {sy}, {sz})")));
    }
    let dim = stack.masks[0].dim();
    for (i, m) in stack.masks.iter().enumerate() {
        if m.dim() != dim {
            return Err(CoreError::DimensionMismatch {
                expected: format!("{dim:?}"),
                actual: format!("mask {i}: {:?}", m.dim()),
            });
        }
    }
    let voxels: usize = stack.masks.iter().map(|m| m.iter().filter(|&&v| v).count()).sum();
    Ok(voxels as f64 * sx * sy * sz / 1000.0)
}

/// Every POSITIVE/NEGATIVE slice with its binary label; EXCLUDED slices
/// are dropped. Order is deterministic: patient_id, then frame_index.
pub fn training_slices(cohort: &Cohort) -> Vec<(&SliceImage, u8)> {
    let mut studies: Vec<&Study> = cohort.studies.iter().collect();
    studies.sort_by(|a, b| a.record.patient_id.cmp(&b.record.patient_id));
    let mut out = Vec::new();
    for study in studies {
        for (img, label) in study.slices.iter().zip(&study.labels) {
            match label {
                SliceLabel::Positive => out.push((img, 1u8)),
                SliceLabel::Negative => out.push((img, 0u8)),
                SliceLabel::Excluded => {}
            }
        }
    }
    out
}
