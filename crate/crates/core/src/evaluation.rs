//! Patient-level five-fold cross-validation, AUROC, threshold metrics,
//! and ROC export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{extract_features, train_autoencoder, TrainConfig};
use crate::dataset::{training_slices, Cohort, SliceImage, Study};
use crate::error::{CoreError, Result};
use crate::forest::{fit_forest, ForestConfig};
use crate::rng::{derive_seed, derive_seed_indexed, seeded_rng};
use crate::screening::{
    fit_clinical, predict_clinical, predict_slices, score_patient, AggregationConfig, PatientScore,
};

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

/// Stratified patient-to-fold map with a rotating role schedule:
/// in round r, fold r is the test set and fold (r+1) mod k the validation
/// set; the remaining folds train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

/// Roles for one evaluation round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundRoles {
    pub test: usize,
    pub validation: usize,
}

impl FoldAssignment {
    pub fn roles(&self, round: usize) -> RoundRoles {
        RoundRoles { test: round % self.k, validation: (round + 1) % self.k }
    }

    pub fn fold_members(&self, fold: usize) -> Vec<&str> {
        self.fold_of.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.as_str()).collect()
    }
}

/// Stratified random partition into k folds, deterministic per seed.
/// Per-class counts differ by at most one across folds, and extras are
/// placed to keep total fold sizes balanced as well.
pub fn make_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut positives: Vec<&str> = Vec::new();
    let mut negatives: Vec<&str> = Vec::new();
    for s in &cohort.studies {
        if s.record.cspca {
            positives.push(&s.record.patient_id);
        } else {
            negatives.push(&s.record.patient_id);
        }
    }
    if positives.len() < k || negatives.len() < k {
        return Err(CoreError::InvalidInput(format!(
            "need at least {k} patients of each class, got {} positive / {} negative",
            positives.len(),
            negatives.len()
        )));
    }
    positives.sort_unstable();
    negatives.sort_unstable();
    let mut rng = seeded_rng(derive_seed(seed, "folds"));
    positives.shuffle(&mut rng);
    negatives.shuffle(&mut rng);

    let mut totals = vec![0usize; k];
    let mut fold_of = BTreeMap::new();
    // Larger class first so the smaller one can even out the totals.
    let mut classes = [positives, negatives];
    classes.sort_by_key(|c| std::cmp::Reverse(c.len()));
    for members in &classes {
        let base = members.len() / k;
        let rem = members.len() % k;
        // The `rem` folds with the smallest running totals get one extra.
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&f| (totals[f], f));
        let mut quota = vec![base; k];
        for &f in order.iter().take(rem) {
            quota[f] += 1;
        }
        let mut cursor = 0usize;
        for f in 0..k {
            for _ in 0..quota[f] {
                fold_of.insert(members[cursor].to_string(), f);
                cursor += 1;
            }
            totals[f] += quota[f];
        }
    }
    Ok(FoldAssignment { k, fold_of })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mann-Whitney AUROC: fraction of (positive, negative) pairs where the
/// positive outscores the negative, ties credited 0.5. Computed via
/// tie-averaged ranks, which matches pairwise counting exactly.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{} labels", scores.len()),
            actual: format!("{}", labels.len()),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::InvalidInput("both classes required for AUROC".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::InvalidInput("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Threshold metrics; ratios with a zero denominator are reported as
/// absent rather than zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn confusion_metrics(decisions: &[bool], labels: &[bool]) -> Result<ConfusionMetrics> {
    if decisions.len() != labels.len() {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{} labels", decisions.len()),
            actual: format!("{}", labels.len()),
        });
    }
    if decisions.is_empty() {
        return Err(CoreError::InvalidInput("empty decision list".into()));
    }
    let mut tp = 0f64;
    let mut fp = 0f64;
    let mut tn = 0f64;
    let mut fn_ = 0f64;
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    let ratio = |num: f64, den: f64| if den > 0.0 { Some(num / den) } else { None };
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let precision = ratio(tp, tp + fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(s)) if p + s > 0.0 => Some(2.0 * p * s / (p + s)),
        _ => None,
    };
    Ok(ConfusionMetrics {
        sensitivity,
        specificity,
        accuracy: (tp + tn) / decisions.len() as f64,
        precision,
        f1,
    })
}

// ---------------------------------------------------------------------------
// ROC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// Threshold-sweep ROC: one point per distinct score plus both endpoints,
/// monotone nondecreasing in fpr and tpr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn from_scores(scores: &[f64], labels: &[bool]) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&l| l).count() as f64;
        let n_neg = labels.len() as f64 - n_pos;
        if n_pos == 0.0 || n_neg == 0.0 {
            return Err(CoreError::InvalidInput("both classes required for ROC".into()));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
        let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
        let mut tp = 0f64;
        let mut fp = 0f64;
        let mut i = 0usize;
        while i < order.len() {
            let t = scores[order[i]];
            while i < order.len() && scores[order[i]] == t {
                if labels[order[i]] {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
                i += 1;
            }
            points.push(RocPoint { threshold: t, fpr: fp / n_neg, tpr: tp / n_pos });
        }
        points.push(RocPoint { threshold: f64::NEG_INFINITY, fpr: 1.0, tpr: 1.0 });
        Ok(Self { points })
    }

    /// Trapezoidal area under the curve.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0)
            .sum()
    }

    /// CSV rows `threshold,fpr,tpr`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(f, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

/// Build and write the ROC for a score/label set.
pub fn emit_roc(scores: &[f64], labels: &[bool], path: impl AsRef<Path>) -> Result<RocCurve> {
    let curve = RocCurve::from_scores(scores, labels)?;
    curve.write_csv(path)?;
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PipelineKind {
    Imaging,
    Clinical,
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::Imaging => "imaging",
            PipelineKind::Clinical => "clinical",
        }
    }
}

/// Cross-validation configuration. The train/forest seeds are overridden
/// per round from the top-level seed so both pipelines share folds.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub forest: ForestConfig,
    pub aggregation: AggregationConfig,
    /// Caps on autoencoder/forest training-set sizes; desk-scale runtime
    /// knobs, deterministic per seed. `None` uses every slice.
    pub ae_train_cap: Option<usize>,
    pub ae_val_cap: Option<usize>,
    pub forest_train_cap: Option<usize>,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            train: TrainConfig::default(),
            forest: ForestConfig::default(),
            aggregation: AggregationConfig::default(),
            ae_train_cap: None,
            ae_val_cap: None,
            forest_train_cap: None,
        }
    }
}

/// Per-fold metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auroc: Option<f64>,
    #[serde(flatten)]
    pub confusion: ConfusionMetrics,
}

/// Fold-averaged metric suite for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub threshold: f64,
    pub run_length: usize,
    pub folds: Vec<FoldMetrics>,
    pub mean_auroc: Option<f64>,
    pub mean_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub mean_accuracy: f64,
    pub mean_precision: Option<f64>,
    pub mean_f1: Option<f64>,
    pub warnings: Vec<String>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

impl MetricsReport {
    fn from_folds(
        model: &str,
        threshold: f64,
        run_length: usize,
        folds: Vec<FoldMetrics>,
        warnings: Vec<String>,
    ) -> Self {
        let mean_accuracy =
            folds.iter().map(|f| f.confusion.accuracy).sum::<f64>() / folds.len() as f64;
        Self {
            model: model.to_string(),
            threshold,
            run_length,
            mean_auroc: mean_present(folds.iter().map(|f| f.auroc)),
            mean_sensitivity: mean_present(folds.iter().map(|f| f.confusion.sensitivity)),
            mean_specificity: mean_present(folds.iter().map(|f| f.confusion.specificity)),
            mean_accuracy,
            mean_precision: mean_present(folds.iter().map(|f| f.confusion.precision)),
            mean_f1: mean_present(folds.iter().map(|f| f.confusion.f1)),
            folds,
            warnings,
        }
    }

    /// Flat CSV: `model,fold,auroc,sensitivity,specificity,accuracy,precision,f1`
    /// with a trailing `mean` row. Absent values are empty cells.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "model,fold,auroc,sensitivity,specificity,accuracy,precision,f1")?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.folds {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                self.model,
                row.fold,
                cell(row.auroc),
                cell(row.confusion.sensitivity),
                cell(row.confusion.specificity),
                row.confusion.accuracy,
                cell(row.confusion.precision),
                cell(row.confusion.f1),
            )?;
        }
        writeln!(
            f,
            "{},mean,{},{},{},{},{},{}",
            self.model,
            cell(self.mean_auroc),
            cell(self.mean_sensitivity),
            cell(self.mean_specificity),
            self.mean_accuracy,
            cell(self.mean_precision),
            cell(self.mean_f1),
        )?;
        Ok(())
    }
}

/// Everything produced by one cross-validated evaluation.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: MetricsReport,
    /// One ROC per fold where the test set had both classes.
    pub rocs: Vec<Option<RocCurve>>,
    /// Per-fold (score, ground truth) pairs in patient order.
    pub fold_scores: Vec<Vec<(PatientScore, bool)>>,
}

fn subsample<'a, T: Copy>(items: &'a [T], cap: Option<usize>, seed: u64) -> Vec<T> {
    match cap {
        Some(cap) if cap < items.len() => {
            let mut idx: Vec<usize> = (0..items.len()).collect();
            idx.shuffle(&mut seeded_rng(seed));
            idx.truncate(cap);
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i]).collect()
        }
        _ => items.to_vec(),
    }
}

/// Class-aware cap: subsamples positives and negatives proportionally so
/// a capped training set never becomes single-class.
fn subsample_stratified<'a>(
    items: &[(&'a SliceImage, u8)],
    cap: Option<usize>,
    seed: u64,
) -> Vec<(&'a SliceImage, u8)> {
    let Some(cap) = cap else { return items.to_vec() };
    if cap >= items.len() {
        return items.to_vec();
    }
    let pos: Vec<(&SliceImage, u8)> = items.iter().copied().filter(|(_, y)| *y == 1).collect();
    let neg: Vec<(&SliceImage, u8)> = items.iter().copied().filter(|(_, y)| *y == 0).collect();
    let pos_cap = ((cap as f64 * pos.len() as f64 / items.len() as f64).round() as usize)
        .clamp(1.min(pos.len()), pos.len());
    let neg_cap = (cap - pos_cap.min(cap)).clamp(1.min(neg.len()), neg.len());
    let mut out = subsample(&pos, Some(pos_cap), derive_seed(seed, "cap-pos"));
    out.extend(subsample(&neg, Some(neg_cap), derive_seed(seed, "cap-neg")));
    out
}

fn studies_in<'a>(cohort: &'a Cohort, folds: &FoldAssignment, pred: impl Fn(usize) -> bool) -> Vec<&'a Study> {
    cohort
        .studies
        .iter()
        .filter(|s| pred(folds.fold_of[&s.record.patient_id]))
        .collect()
}

fn fold_metrics(
    round: usize,
    scored: &[(PatientScore, bool)],
    tau: f64,
    warnings: &mut Vec<String>,
) -> Result<(FoldMetrics, Option<RocCurve>)> {
    let scores: Vec<f64> = scored.iter().map(|(s, _)| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|(_, t)| *t).collect();
    let decisions: Vec<bool> = scored.iter().map(|(s, _)| s.decision).collect();
    let confusion = confusion_metrics(&decisions, &labels)?;
    let single_class = labels.iter().all(|&l| l) || labels.iter().all(|&l| !l);
    let (fold_auroc, roc) = if single_class {
        warnings.push(format!("fold {round}: single-class test set, AUROC omitted from mean"));
        (None, None)
    } else {
        (Some(auroc(&scores, &labels)?), Some(RocCurve::from_scores(&scores, &labels)?))
    };
    let _ = tau;
    Ok((FoldMetrics { fold: round, auroc: fold_auroc, confusion }, roc))
}

/// Run k-fold cross-validation for one pipeline on a validated cohort.
/// Both pipelines invoked with the same seed share an identical fold
/// assignment and therefore identical test sets.
pub fn run_cross_validation(cohort: &Cohort, kind: PipelineKind, config: &CvConfig) -> Result<CvOutcome> {
    config.aggregation.check()?;
    let folds = make_folds(cohort, config.k, config.seed)?;
    let tau = config.aggregation.slice_threshold;
    let mut fold_rows = Vec::with_capacity(config.k);
    let mut rocs = Vec::with_capacity(config.k);
    let mut fold_scores = Vec::with_capacity(config.k);
    let mut warnings = Vec::new();

    for round in 0..config.k {
        let roles = folds.roles(round);
        let test_studies = studies_in(cohort, &folds, |f| f == roles.test);
        let scored: Vec<(PatientScore, bool)> = match kind {
            PipelineKind::Imaging => {
                let train_studies =
                    studies_in(cohort, &folds, |f| f != roles.test && f != roles.validation);
                let val_studies = studies_in(cohort, &folds, |f| f == roles.validation);
                evaluate_imaging_round(round, &train_studies, &val_studies, &test_studies, config)?
            }
            PipelineKind::Clinical => {
                // OOB validation stands in for the validation fold, which is
                // left unused so both pipelines see identical test sets.
                let train_studies =
                    studies_in(cohort, &folds, |f| f != roles.test && f != roles.validation);
                evaluate_clinical_round(round, &train_studies, &test_studies, config)?
            }
        };
        let (row, roc) = fold_metrics(round, &scored, tau, &mut warnings)?;
        fold_rows.push(row);
        rocs.push(roc);
        fold_scores.push(scored);
    }
    let report = MetricsReport::from_folds(
        kind.name(),
        tau,
        config.aggregation.run_length,
        fold_rows,
        warnings,
    );
    Ok(CvOutcome { report, rocs, fold_scores })
}

fn evaluate_imaging_round(
    round: usize,
    train_studies: &[&Study],
    val_studies: &[&Study],
    test_studies: &[&Study],
    config: &CvConfig,
) -> Result<Vec<(PatientScore, bool)>> {
    let train_cohort = Cohort { studies: train_studies.iter().map(|s| (*s).clone()).collect() };
    let val_cohort = Cohort { studies: val_studies.iter().map(|s| (*s).clone()).collect() };
    let train_labeled = training_slices(&train_cohort);
    let val_labeled = training_slices(&val_cohort);

    // Self-supervised stage ignores labels.
    let ae_train_pool: Vec<&SliceImage> = train_labeled.iter().map(|(s, _)| *s).collect();
    let ae_val_pool: Vec<&SliceImage> = val_labeled.iter().map(|(s, _)| *s).collect();
    let ae_train = subsample(
        &ae_train_pool,
        config.ae_train_cap,
        derive_seed_indexed(config.seed, "ae-train-cap", round as u64),
    );
    let ae_val = subsample(
        &ae_val_pool,
        config.ae_val_cap,
        derive_seed_indexed(config.seed, "ae-val-cap", round as u64),
    );
    let train_cfg = TrainConfig {
        seed: derive_seed_indexed(config.seed, "ae", round as u64),
        ..config.train.clone()
    };
    let (weights, _history) = train_autoencoder(&ae_train, &ae_val, &train_cfg)?;

    let forest_slices = subsample_stratified(
        &train_labeled,
        config.forest_train_cap,
        derive_seed_indexed(config.seed, "forest-cap", round as u64),
    );
    let refs: Vec<&SliceImage> = forest_slices.iter().map(|(s, _)| *s).collect();
    let labels: Vec<u8> = forest_slices.iter().map(|(_, y)| *y).collect();
    let features = extract_features(&refs, &weights, config.train.batch_size)?;
    let mut rows = Vec::with_capacity(refs.len() * 256);
    for f in &features {
        rows.extend(f.0.iter().map(|&v| v as f64));
    }
    let x = Array2::from_shape_vec((refs.len(), 256), rows).expect("256 features per slice");
    let forest_cfg = ForestConfig {
        seed: derive_seed_indexed(config.seed, "slice-forest", round as u64),
        ..config.forest.clone()
    };
    let slice_model = fit_forest(x.view(), &labels, &forest_cfg)?;

    let mut scored = Vec::with_capacity(test_studies.len());
    for study in test_studies {
        let preds = predict_slices(study, &weights, &slice_model)?;
        let probs: Vec<f64> = preds.iter().map(|p| p.probability).collect();
        let score = score_patient(&study.record.patient_id, &probs, &config.aggregation);
        scored.push((score, study.record.cspca));
    }
    Ok(scored)
}

fn evaluate_clinical_round(
    round: usize,
    train_studies: &[&Study],
    test_studies: &[&Study],
    config: &CvConfig,
) -> Result<Vec<(PatientScore, bool)>> {
    let records: Vec<_> = train_studies.iter().map(|s| s.record.clone()).collect();
    let forest_cfg = ForestConfig {
        seed: derive_seed_indexed(config.seed, "clinical-forest", round as u64),
        ..config.forest.clone()
    };
    let model = fit_clinical(&records, &forest_cfg)?;
    let tau = config.aggregation.slice_threshold;
    let mut scored = Vec::with_capacity(test_studies.len());
    for study in test_studies {
        let p = predict_clinical(&model, &study.record)?;
        scored.push((
            PatientScore { patient_id: study.record.patient_id.clone(), score: p, decision: p >= tau },
            study.record.cspca,
        ));
    }
    Ok(scored)
}

/// Independent pairwise oracle for AUROC used by tests.
pub fn auroc_brute_force(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let mut credit = 0.0f64;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PatientRecord;
    use proptest::prelude::*;
    use rand::Rng;

    fn label_cohort(n_pos: usize, n_neg: usize) -> Cohort {
        let studies = (0..n_pos + n_neg)
            .map(|i| Study {
                record: PatientRecord {
                    patient_id: format!("P{i:03}"),
                    age: Some(70),
                    psa: Some(5.0),
                    dre: Some(0),
                    prostate_volume: Some(40.0),
                    cspca: i < n_pos,
                },
                slices: vec![],
                labels: vec![],
            })
            .collect();
        Cohort { studies }
    }

    #[test]
    fn folds_on_default_cohort_shape() {
        let cohort = label_cohort(79, 66);
        let folds = make_folds(&cohort, 5, 42).unwrap();
        let mut sizes = vec![0usize; 5];
        let mut pos_counts = vec![0usize; 5];
        for s in &cohort.studies {
            let f = folds.fold_of[&s.record.patient_id];
            sizes[f] += 1;
            if s.record.cspca {
                pos_counts[f] += 1;
            }
        }
        assert_eq!(sizes, vec![29; 5]);
        let mut sorted = pos_counts.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![15, 16, 16, 16, 16]);
    }

    #[test]
    fn every_patient_tests_once_and_validates_once() {
        let cohort = label_cohort(79, 66);
        let folds = make_folds(&cohort, 5, 7).unwrap();
        let mut tested = BTreeMap::new();
        let mut validated = BTreeMap::new();
        for round in 0..5 {
            let roles = folds.roles(round);
            for (pid, &f) in &folds.fold_of {
                if f == roles.test {
                    *tested.entry(pid.clone()).or_insert(0) += 1;
                }
                if f == roles.validation {
                    *validated.entry(pid.clone()).or_insert(0) += 1;
                }
            }
        }
        for s in &cohort.studies {
            assert_eq!(tested[&s.record.patient_id], 1);
            assert_eq!(validated[&s.record.patient_id], 1);
        }
    }

    #[test]
    fn folds_deterministic_per_seed() {
        let cohort = label_cohort(20, 15);
        assert_eq!(make_folds(&cohort, 5, 3).unwrap(), make_folds(&cohort, 5, 3).unwrap());
        assert_ne!(make_folds(&cohort, 5, 3).unwrap(), make_folds(&cohort, 5, 4).unwrap());
    }

    #[test]
    fn folds_reject_too_few_patients() {
        let cohort = label_cohort(4, 10);
        assert!(make_folds(&cohort, 5, 0).is_err());
    }

    #[test]
    fn auroc_perfect_separation() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        assert_eq!(auroc(&[0.5; 6], &[true, true, false, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_known_pair_count() {
        // pos {0.8, 0.6}, neg {0.3, 0.7}: 3 of 4 pairs favor the positive.
        let scores = [0.8, 0.6, 0.3, 0.7];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auroc_single_class_rejected() {
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let mut rng = crate::rng::seeded_rng(55);
        for _ in 0..300 {
            let n = rng.gen_range(2..=50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_brute_force(&scores, &labels);
            assert_eq!(fast, slow, "scores={scores:?} labels={labels:?}");
        }
    }

    proptest! {
        #[test]
        fn auroc_invariant_under_increasing_transform(
            raw in proptest::collection::vec(0.0f64..1.0, 4..30),
        ) {
            let n = raw.len();
            let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let a = auroc(&raw, &labels).unwrap();
            let transformed: Vec<f64> = raw.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_known_values() {
        // TP=3, FN=1, TN=2, FP=2
        let decisions = [true, true, true, false, true, true, false, false];
        let labels = [true, true, true, true, false, false, false, false];
        let m = confusion_metrics(&decisions, &labels).unwrap();
        assert_eq!(m.sensitivity, Some(0.75));
        assert_eq!(m.specificity, Some(0.5));
        assert_eq!(m.accuracy, 0.625);
        assert_eq!(m.precision, Some(0.6));
        assert!((m.f1.unwrap() - 2.0 * 0.6 * 0.75 / 1.35).abs() < 1e-12);
    }

    #[test]
    fn confusion_all_correct() {
        let labels = [true, false, true];
        let m = confusion_metrics(&labels, &labels).unwrap();
        assert_eq!(m.sensitivity, Some(1.0));
        assert_eq!(m.specificity, Some(1.0));
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.precision, Some(1.0));
        assert_eq!(m.f1, Some(1.0));
    }

    #[test]
    fn confusion_no_predicted_positives() {
        let decisions = [false, false, false];
        let labels = [true, false, false];
        let m = confusion_metrics(&decisions, &labels).unwrap();
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.specificity, Some(1.0));
    }

    #[test]
    fn roc_two_distinct_scores_four_points() {
        let curve = RocCurve::from_scores(&[0.8, 0.2], &[true, false]).unwrap();
        assert_eq!(curve.points.len(), 4);
        assert_eq!((curve.points[0].fpr, curve.points[0].tpr), (0.0, 0.0));
        let last = curve.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    }

    #[test]
    fn roc_monotone_and_area_matches_auroc() {
        let mut rng = crate::rng::seeded_rng(77);
        for _ in 0..100 {
            let n = rng.gen_range(2..=50);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            if labels.iter().all(|&l| l) {
                labels[0] = false;
            }
            if labels.iter().all(|&l| !l) {
                labels[0] = true;
            }
            let curve = RocCurve::from_scores(&scores, &labels).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[1].fpr >= w[0].fpr);
                assert!(w[1].tpr >= w[0].tpr);
            }
            let area = curve.trapezoid_area();
            let mw = auroc(&scores, &labels).unwrap();
            assert!((area - mw).abs() < 1e-9, "{area} vs {mw}");
        }
    }

    #[test]
    fn report_mean_recomputable_from_folds() {
        let folds: Vec<FoldMetrics> = (0..5)
            .map(|i| FoldMetrics {
                fold: i,
                auroc: Some(0.6 + 0.05 * i as f64),
                confusion: ConfusionMetrics {
                    sensitivity: Some(0.9),
                    specificity: Some(0.5 + 0.1 * i as f64),
                    accuracy: 0.7,
                    precision: Some(0.8),
                    f1: Some(0.85),
                },
            })
            .collect();
        let report = MetricsReport::from_folds("imaging", 0.15, 8, folds, vec![]);
        let expect_auroc: f64 = (0..5).map(|i| 0.6 + 0.05 * i as f64).sum::<f64>() / 5.0;
        assert!((report.mean_auroc.unwrap() - expect_auroc).abs() < 1e-12);
        assert!((report.mean_specificity.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(report.mean_accuracy, 0.7);
    }
}
