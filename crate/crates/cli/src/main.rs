//! Command-line driver: synthesize cohorts, train models, run
//! cross-validated evaluations, and merge reports.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use microscreen_core::autoencoder::{
    extract_features, load_checkpoint, save_checkpoint, train_autoencoder, FeatureVector,
};
use microscreen_core::dataset::{
    load_manifest, save_manifest, training_slices, validate_cohort, Cohort, SliceImage,
};
use microscreen_core::evaluation::{run_cross_validation, CvOutcome, MetricsReport, PipelineKind};
use microscreen_core::forest::{fit_forest, oob_score, save_forest};
use microscreen_core::rng::derive_seed;
use microscreen_core::screening::fit_clinical;
use microscreen_core::synthesis::generate_cohort;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "microscreen", version, about = "Micro-ultrasound screening pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, env = "MICROSCREEN_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, env = "MICROSCREEN_SEED", global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, env = "MICROSCREEN_OUT", global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest; overrides the config file.
    #[arg(long, env = "MICROSCREEN_MANIFEST", global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelChoice {
    Imaging,
    Clinical,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it as a dataset manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the slice autoencoder on a dataset and save a checkpoint.
    TrainAe {
        #[command(flatten)]
        common: Common,
    },
    /// Extract pooled slice features with a trained checkpoint.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Autoencoder checkpoint path.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the slice-level random forest from checkpoint features.
    TrainForest {
        #[command(flatten)]
        common: Common,
        /// Autoencoder checkpoint path.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train the clinical-biomarker forest baseline.
    TrainClinical {
        #[command(flatten)]
        common: Common,
    },
    /// Run cross-validated evaluation and write reports and ROC curves.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "both")]
        model: ModelChoice,
        /// Slice probability threshold tau.
        #[arg(long, env = "MICROSCREEN_THRESHOLD")]
        threshold: Option<f64>,
        /// Consecutive-slice run length L.
        #[arg(long, env = "MICROSCREEN_RUN_LENGTH")]
        run_length: Option<usize>,
    },
    /// Merge metric report files into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        /// MetricsReport JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn main() {
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        // Single-threaded BLAS: rayon owns the coarse parallelism.
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common } => cmd_synth(&common),
        Command::TrainAe { common } => cmd_train_ae(&common),
        Command::Extract { common, model } => cmd_extract(&common, model.as_deref()),
        Command::TrainForest { common, model } => cmd_train_forest(&common, model.as_deref()),
        Command::TrainClinical { common } => cmd_train_clinical(&common),
        Command::Evaluate { common, model, threshold, run_length } => {
            cmd_evaluate(&common, model, threshold, run_length)
        }
        Command::Report { common, reports } => cmd_report(&common, &reports),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

struct Ctx {
    config: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let config = RunConfig::load(common.config.as_deref())?;
        let seed = common.seed.unwrap_or(config.seed);
        let out = common
            .out
            .clone()
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { config, seed, out })
    }

    fn manifest_path(&self, common: &Common) -> anyhow::Result<PathBuf> {
        common
            .manifest
            .clone()
            .or_else(|| self.config.manifest.clone())
            .ok_or_else(|| anyhow::anyhow!("no manifest given (use --manifest or the config file)"))
    }

    fn load_cohort(&self, common: &Common) -> anyhow::Result<Cohort> {
        let path = self.manifest_path(common)?;
        let cohort = load_manifest(&path)
            .with_context(|| format!("loading manifest {}", path.display()))?;
        let (cohort, excluded) = validate_cohort(cohort);
        for report in &excluded {
            eprintln!("excluded {}: {:?}", report.patient_id, report.reason);
        }
        if cohort.is_empty() {
            bail!("no usable studies in {}", path.display());
        }
        Ok(cohort)
    }

    fn ensure_out(&self) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out)
            .with_context(|| format!("creating output directory {}", self.out.display()))
    }
}

fn cmd_synth(common: &Common) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let mut phantom = ctx.config.phantom.clone();
    phantom.seed = derive_seed(ctx.seed, "synth");
    let synth = generate_cohort(&phantom)?;
    ctx.ensure_out()?;
    let manifest = save_manifest(&synth.cohort, &ctx.out, "manifest.json")?;
    let lesions = serde_json::to_string_pretty(&synth.lesions)?;
    std::fs::write(ctx.out.join("lesions.json"), lesions)?;
    let n_pos = synth.cohort.studies.iter().filter(|s| s.record.cspca).count();
    let n_slices: usize = synth.cohort.studies.iter().map(|s| s.slices.len()).sum();
    println!(
        "wrote {}: {} studies ({} positive / {} negative), {} slices",
        manifest.display(),
        synth.cohort.len(),
        n_pos,
        synth.cohort.len() - n_pos,
        n_slices
    );
    Ok(())
}

/// Deterministic study-level train/validation split for standalone training.
fn split_studies(cohort: &Cohort, val_fraction: f64, seed: u64) -> (Vec<&SliceImage>, Vec<&SliceImage>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut microscreen_core::rng::seeded_rng(derive_seed(seed, "ae-split")));
    let n_val = ((cohort.len() as f64 * val_fraction).round() as usize).clamp(1, cohort.len() - 1);
    let is_val: Vec<bool> = {
        let mut v = vec![false; cohort.len()];
        for &i in order.iter().take(n_val) {
            v[i] = true;
        }
        v
    };
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, study) in cohort.studies.iter().enumerate() {
        let target = if is_val[i] { &mut val } else { &mut train };
        target.extend(study.slices.iter());
    }
    (train, val)
}

fn cmd_train_ae(common: &Common) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let cohort = ctx.load_cohort(common)?;
    let (train, val) = split_studies(&cohort, ctx.config.val_fraction, ctx.seed);
    let mut train_cfg = ctx.config.train.clone();
    train_cfg.seed = derive_seed(ctx.seed, "train-ae");
    let (weights, history) = train_autoencoder(&train, &val, &train_cfg)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("autoencoder.bin");
    save_checkpoint(&weights, train_cfg.seed, &path)?;
    println!(
        "wrote {}: {} train / {} val slices, best epoch {} (val mse {:.6})",
        path.display(),
        train.len(),
        val.len(),
        history.best_epoch,
        history.val_mse[history.best_epoch]
    );
    Ok(())
}

fn checkpoint_path(ctx: &Ctx, flag: Option<&Path>) -> anyhow::Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| ctx.config.checkpoint.clone())
        .ok_or_else(|| anyhow::anyhow!("no checkpoint given (use --model or the config file)"))
}

fn slice_features(
    slices: &[&SliceImage],
    ckpt: &Path,
    batch: usize,
) -> anyhow::Result<Vec<FeatureVector>> {
    let (weights, _) = load_checkpoint(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(extract_features(slices, &weights, batch)?)
}

fn cmd_extract(common: &Common, model: Option<&Path>) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let cohort = ctx.load_cohort(common)?;
    let ckpt = checkpoint_path(&ctx, model)?;
    let slices: Vec<&SliceImage> = cohort
        .studies
        .iter()
        .flat_map(|s| s.slices.iter())
        .collect();
    let features = slice_features(&slices, &ckpt, ctx.config.train.batch_size)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("features.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let mut header = String::from("patient_id,frame_index");
    for i in 0..FeatureVector::LEN {
        write!(header, ",f{i}")?;
    }
    writeln!(f, "{header}")?;
    for (slice, feat) in slices.iter().zip(&features) {
        write!(f, "{},{}", slice.patient_id, slice.frame_index)?;
        for v in &feat.0 {
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    drop(f);
    println!("wrote {}: {} slices x {} features", path.display(), slices.len(), FeatureVector::LEN);
    Ok(())
}

fn feature_matrix(features: &[FeatureVector]) -> Array2<f64> {
    let mut rows = Vec::with_capacity(features.len() * FeatureVector::LEN);
    for f in features {
        rows.extend(f.0.iter().map(|&v| v as f64));
    }
    Array2::from_shape_vec((features.len(), FeatureVector::LEN), rows)
        .expect("fixed feature width")
}

fn cmd_train_forest(common: &Common, model: Option<&Path>) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let cohort = ctx.load_cohort(common)?;
    let ckpt = checkpoint_path(&ctx, model)?;
    let labeled = training_slices(&cohort);
    let slices: Vec<&SliceImage> = labeled.iter().map(|(s, _)| *s).collect();
    let labels: Vec<u8> = labeled.iter().map(|(_, y)| *y).collect();
    let features = slice_features(&slices, &ckpt, ctx.config.train.batch_size)?;
    let x = feature_matrix(&features);
    let mut forest_cfg = ctx.config.forest.clone();
    forest_cfg.seed = derive_seed(ctx.seed, "train-forest");
    let forest = fit_forest(x.view(), &labels, &forest_cfg)?;
    let oob = oob_score(&forest, x.view(), &labels)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("slice_forest.json");
    save_forest(&forest, &path)?;
    println!(
        "wrote {}: {} trees on {} slices, OOB accuracy {:.4}",
        path.display(),
        forest_cfg.n_trees,
        labels.len(),
        oob
    );
    Ok(())
}

fn cmd_train_clinical(common: &Common) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let cohort = ctx.load_cohort(common)?;
    let records: Vec<_> = cohort.studies.iter().map(|s| s.record.clone()).collect();
    let mut forest_cfg = ctx.config.forest.clone();
    forest_cfg.seed = derive_seed(ctx.seed, "train-clinical");
    let forest = fit_clinical(&records, &forest_cfg)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("clinical_forest.json");
    save_forest(&forest, &path)?;
    println!("wrote {}: {} trees on {} records", path.display(), forest_cfg.n_trees, records.len());
    Ok(())
}

/// Console table mirroring the report columns.
fn print_table(reports: &[&MetricsReport]) {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<10} {:>7} {:>12} {:>12} {:>9} {:>10} {:>8}",
        "model", "auroc", "sensitivity", "specificity", "accuracy", "precision", "f1"
    );
    for r in reports {
        println!(
            "{:<10} {:>7} {:>12} {:>12} {:>9.3} {:>10} {:>8}",
            r.model,
            cell(r.mean_auroc),
            cell(r.mean_sensitivity),
            cell(r.mean_specificity),
            r.mean_accuracy,
            cell(r.mean_precision),
            cell(r.mean_f1),
        );
    }
}

fn write_outcome(out: &Path, outcome: &CvOutcome) -> anyhow::Result<()> {
    let model = &outcome.report.model;
    let json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(out.join(format!("report_{model}.json")), json)?;
    outcome.report.write_csv(out.join(format!("metrics_{model}.csv")))?;
    for (fold, roc) in outcome.rocs.iter().enumerate() {
        if let Some(roc) = roc {
            roc.write_csv(out.join(format!("roc_{model}_fold{fold}.csv")))?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(
        out.join(format!("scores_{model}.csv")),
    )?);
    writeln!(f, "fold,patient_id,score,decision,ground_truth")?;
    for (fold, scored) in outcome.fold_scores.iter().enumerate() {
        for (score, truth) in scored {
            writeln!(
                f,
                "{fold},{},{},{},{}",
                score.patient_id,
                score.score,
                u8::from(score.decision),
                u8::from(*truth)
            )?;
        }
    }
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    model: ModelChoice,
    threshold: Option<f64>,
    run_length: Option<usize>,
) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let cohort = ctx.load_cohort(common)?;
    let mut cv = ctx.config.cv_config(derive_seed(ctx.seed, "evaluate"));
    if let Some(tau) = threshold {
        cv.aggregation.slice_threshold = tau;
    }
    if let Some(l) = run_length {
        cv.aggregation.run_length = l;
    }
    cv.aggregation.check()?;
    let kinds: &[PipelineKind] = match model {
        ModelChoice::Imaging => &[PipelineKind::Imaging],
        ModelChoice::Clinical => &[PipelineKind::Clinical],
        ModelChoice::Both => &[PipelineKind::Imaging, PipelineKind::Clinical],
    };
    let mut outcomes = Vec::new();
    for &kind in kinds {
        eprintln!("running {} cross-validation ({} folds)...", kind.name(), cv.k);
        outcomes.push(run_cross_validation(&cohort, kind, &cv)?);
    }
    ctx.ensure_out()?;
    for outcome in &outcomes {
        write_outcome(&ctx.out, outcome)?;
        for w in &outcome.report.warnings {
            eprintln!("warning: {w}");
        }
    }
    print_table(&outcomes.iter().map(|o| &o.report).collect::<Vec<_>>());
    Ok(())
}

fn cmd_report(common: &Common, reports: &[PathBuf]) -> anyhow::Result<()> {
    let ctx = Ctx::new(common)?;
    let mut loaded = Vec::new();
    for path in reports {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading report {}", path.display()))?;
        let report: MetricsReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing report {}", path.display()))?;
        loaded.push(report);
    }
    ctx.ensure_out()?;
    let path = ctx.out.join("comparison.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    writeln!(f, "model,auroc,sensitivity,specificity,accuracy,precision,f1")?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &loaded {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.model,
            cell(r.mean_auroc),
            cell(r.mean_sensitivity),
            cell(r.mean_specificity),
            r.mean_accuracy,
            cell(r.mean_precision),
            cell(r.mean_f1),
        )?;
    }
    drop(f);
    print_table(&loaded.iter().collect::<Vec<_>>());
    println!("wrote {}", path.display());
    Ok(())
}
