//! Acceptance suite: one test per top-level criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them on success).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use ndarray::{Array2, Array4};
use rand::Rng;

use microscreen_core::autoencoder::nn::{mse_and_grad, Conv2d, ConvTranspose2d};
use microscreen_core::autoencoder::{
    train_autoencoder, Autoencoder, EncoderConfig, TrainConfig,
};
use microscreen_core::dataset::{Cohort, PatientRecord, Study};
use microscreen_core::evaluation::{
    auroc, auroc_brute_force, make_folds, run_cross_validation, CvConfig, PipelineKind, RocCurve,
};
use microscreen_core::forest::{
    class_weights, fit_forest, fit_forest_serial, ForestConfig, Node,
};
use microscreen_core::rng::seeded_rng;
use microscreen_core::screening::{
    classify_patient, patient_score, run_rule_brute_force, AggregationConfig,
};
use microscreen_core::synthesis::{
    generate_cohort, sample_clinical, ClinicalDistributions, PhantomConfig, Quartiles,
};

fn criterion(name: &str, f: impl FnOnce()) {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(()) => println!("ACCEPTANCE {name}: PASS"),
        Err(cause) => {
            println!("ACCEPTANCE {name}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

#[test]
fn run_rule_oracle() {
    criterion("run-rule oracle (10,000 sequences)", || {
        let start = Instant::now();
        let mut rng = seeded_rng(0xAC01);
        let run_lengths = [1usize, 4, 8, 12];
        let taus = [0.05f64, 0.15, 0.5];
        for case in 0..10_000 {
            let len = rng.gen_range(1..=300);
            let l = run_lengths[case % run_lengths.len()];
            let tau = taus[(case / run_lengths.len()) % taus.len()];
            let probs: Vec<f64> = (0..len)
                .map(|_| {
                    // Mix exact-threshold values in to exercise tie handling.
                    if rng.gen_bool(0.2) {
                        taus[rng.gen_range(0..taus.len())]
                    } else {
                        rng.gen()
                    }
                })
                .collect();
            let fast = classify_patient(patient_score(&probs, l), tau);
            let slow = run_rule_brute_force(&probs, l, tau);
            assert_eq!(fast, slow, "len={len} L={l} tau={tau}");
        }
        assert!(start.elapsed().as_secs() < 10, "took {:?}", start.elapsed());
    });
}

#[test]
fn auroc_oracle() {
    criterion("AUROC oracle (200 sets) + ROC trapezoid", || {
        let start = Instant::now();
        let mut rng = seeded_rng(0xAC02);
        let mut done = 0usize;
        while done < 200 {
            let n = rng.gen_range(2..=50);
            // Coarse grid forces ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64 / 12.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_brute_force(&scores, &labels);
            assert_eq!(fast, slow, "scores={scores:?}");
            let curve = RocCurve::from_scores(&scores, &labels).unwrap();
            assert!(
                (curve.trapezoid_area() - slow).abs() < 1e-9,
                "trapezoid {} vs pairwise {}",
                curve.trapezoid_area(),
                slow
            );
            done += 1;
        }
        assert!(start.elapsed().as_secs() < 5, "took {:?}", start.elapsed());
    });
}

fn label_cohort(n_pos: usize, n_neg: usize) -> Cohort {
    let studies = (0..n_pos + n_neg)
        .map(|i| Study {
            record: PatientRecord {
                patient_id: format!("P{i:03}"),
                age: Some(70),
                psa: Some(6.0),
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
fn fold_invariants() {
    criterion("fold invariants (20 seeds, 79/66)", || {
        let start = Instant::now();
        let cohort = label_cohort(79, 66);
        for seed in 0..20u64 {
            let folds = make_folds(&cohort, 5, seed).unwrap();
            let mut sizes = vec![0usize; 5];
            let mut pos = vec![0usize; 5];
            for s in &cohort.studies {
                let f = folds.fold_of[&s.record.patient_id];
                sizes[f] += 1;
                if s.record.cspca {
                    pos[f] += 1;
                }
            }
            assert_eq!(sizes, vec![29; 5], "seed {seed}");
            assert!(pos.iter().all(|&p| p == 15 || p == 16), "seed {seed}: {pos:?}");
            // Each patient is in exactly one fold (map), tests exactly once,
            // validates exactly once, and never sits in two roles at once.
            let mut tested = vec![0usize; 145];
            let mut validated = vec![0usize; 145];
            for round in 0..5 {
                let roles = folds.roles(round);
                assert_ne!(roles.test, roles.validation);
                for (i, s) in cohort.studies.iter().enumerate() {
                    let f = folds.fold_of[&s.record.patient_id];
                    if f == roles.test {
                        tested[i] += 1;
                    }
                    if f == roles.validation {
                        validated[i] += 1;
                    }
                }
            }
            assert!(tested.iter().all(|&t| t == 1));
            assert!(validated.iter().all(|&v| v == 1));
        }
        assert!(start.elapsed().as_secs() < 5, "took {:?}", start.elapsed());
    });
}

/// Central-difference gradient of a scalar loss w.r.t. one tensor entry.
fn finite_diff(mut loss: impl FnMut(f64) -> f64, at: f64) -> f64 {
    let h = 1e-5;
    (loss(at + h) - loss(at - h)) / (2.0 * h)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, a.abs().max(b.abs()))
}

#[test]
fn autoencoder_shape_and_gradients() {
    criterion("autoencoder shapes + finite-difference gradients", || {
        // Shape chain: 256 -> 8 spatial through the channel progression.
        let config = EncoderConfig::default();
        let model = Autoencoder::<f32>::init(config, 7).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 256, 256));
        let z = model.encode_batch(&x.view()).unwrap();
        assert_eq!(z.dim(), (1, 256, 8, 8));
        let back = model.decode_batch(&z.view()).unwrap();
        assert_eq!(back.dim(), (1, 3, 256, 256));

        // 1-layer miniatures in f64 against central differences.
        let mut rng = seeded_rng(0xAC04);
        let mut conv = Conv2d::<f64>::zeros(2, 3);
        conv.weight.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
        conv.bias.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
        let x = Array4::<f64>::from_shape_fn((2, 2, 6, 6), |_| rng.gen::<f64>() - 0.5);
        let target = Array4::<f64>::from_shape_fn((2, 3, 3, 3), |_| rng.gen::<f64>() - 0.5);
        let loss_of = |layer: &Conv2d<f64>, x: &Array4<f64>| {
            mse_and_grad(&layer.forward(&x.view()), &target).0
        };
        let (_, dy) = mse_and_grad(&conv.forward(&x.view()), &target);
        let (dx, dw, db) = conv.backward(&x.view(), &dy.view(), true);
        for idx in [(0, 0, 0, 0), (1, 1, 1, 1), (2, 0, 2, 2), (0, 1, 0, 2)] {
            let base = conv.weight[idx];
            let fd = finite_diff(
                |v| {
                    let mut c = conv.clone();
                    c.weight[idx] = v;
                    loss_of(&c, &x)
                },
                base,
            );
            assert!(rel_err(dw[idx], fd) < 1e-4, "conv dw{idx:?}: {} vs {}", dw[idx], fd);
        }
        for i in 0..3 {
            let fd = finite_diff(
                |v| {
                    let mut c = conv.clone();
                    c.bias[i] = v;
                    loss_of(&c, &x)
                },
                conv.bias[i],
            );
            assert!(rel_err(db[i], fd) < 1e-4, "conv db[{i}]");
        }
        let dx = dx.unwrap();
        for idx in [(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 5, 5), (1, 0, 2, 4)] {
            let fd = finite_diff(
                |v| {
                    let mut xp = x.clone();
                    xp[idx] = v;
                    loss_of(&conv, &xp)
                },
                x[idx],
            );
            assert!(rel_err(dx[idx], fd) < 1e-4, "conv dx{idx:?}: {} vs {}", dx[idx], fd);
        }

        let mut tconv = ConvTranspose2d::<f64>::zeros(3, 2);
        tconv.weight.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
        tconv.bias.mapv_inplace(|_| rng.gen::<f64>() - 0.5);
        let xt = Array4::<f64>::from_shape_fn((2, 3, 3, 3), |_| rng.gen::<f64>() - 0.5);
        let tt = Array4::<f64>::from_shape_fn((2, 2, 6, 6), |_| rng.gen::<f64>() - 0.5);
        let loss_t = |layer: &ConvTranspose2d<f64>, x: &Array4<f64>| {
            mse_and_grad(&layer.forward(&x.view()), &tt).0
        };
        let (_, dyt) = mse_and_grad(&tconv.forward(&xt.view()), &tt);
        let (dxt, dwt, dbt) = tconv.backward(&xt.view(), &dyt.view());
        for idx in [(0, 0, 0, 0), (2, 1, 1, 1), (1, 0, 2, 2), (0, 1, 2, 0)] {
            let fd = finite_diff(
                |v| {
                    let mut c = tconv.clone();
                    c.weight[idx] = v;
                    loss_t(&c, &xt)
                },
                tconv.weight[idx],
            );
            assert!(rel_err(dwt[idx], fd) < 1e-4, "tconv dw{idx:?}");
        }
        for i in 0..2 {
            let fd = finite_diff(
                |v| {
                    let mut c = tconv.clone();
                    c.bias[i] = v;
                    loss_t(&c, &xt)
                },
                tconv.bias[i],
            );
            assert!(rel_err(dbt[i], fd) < 1e-4, "tconv db[{i}]");
        }
        for idx in [(0, 0, 0, 0), (1, 2, 2, 2), (0, 1, 1, 2)] {
            let fd = finite_diff(
                |v| {
                    let mut xp = xt.clone();
                    xp[idx] = v;
                    loss_t(&tconv, &xp)
                },
                xt[idx],
            );
            assert!(rel_err(dxt[idx], fd) < 1e-4, "tconv dx{idx:?}");
        }
    });
}

#[test]
fn training_progress() {
    criterion("training progress (500 slices, 20 epochs, < 5 min)", || {
        let start = Instant::now();
        let phantom = PhantomConfig {
            n_positive: 2,
            n_negative: 1,
            slices_min: 184,
            slices_max: 184,
            seed: 42,
            ..PhantomConfig::default()
        };
        let synth = generate_cohort(&phantom).unwrap();
        let slices: Vec<_> = synth.cohort.studies.iter().flat_map(|s| s.slices.iter()).collect();
        assert!(slices.len() >= 540);
        let train = &slices[..500];
        let val = &slices[500..540];
        let config = TrainConfig { max_epochs: 20, seed: 42, ..TrainConfig::default() };
        let (_weights, history) = train_autoencoder(train, val, &config).unwrap();
        assert_eq!(history.train_mse.len(), 20);
        let ratio = history.train_mse[19] / history.train_mse[0];
        assert!(ratio <= 0.5, "epoch-20/epoch-1 MSE ratio {ratio}");
        // Checkpoint selection is the min-validation epoch.
        let argmin = history
            .val_mse
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(history.best_epoch, argmin);
        let elapsed = start.elapsed();
        println!("  training progress runtime: {elapsed:.1?}");
        assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    });
}

/// Exhaustive weighted-Gini search over every feature and midpoint.
fn exhaustive_best_score(x: &Array2<f64>, y: &[u8]) -> Option<f64> {
    let weights = class_weights(y).unwrap();
    let gini = |w: &[f64; 2]| {
        let t = w[0] + w[1];
        if t <= 0.0 {
            return 0.0;
        }
        1.0 - (w[0] / t).powi(2) - (w[1] / t).powi(2)
    };
    let mut best: Option<f64> = None;
    for f in 0..x.ncols() {
        let mut pairs: Vec<(f64, u8)> = (0..y.len()).map(|i| (x[[i, f]], y[i])).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut total = [0.0f64; 2];
        for &(_, l) in &pairs {
            total[l as usize] += weights[l as usize];
        }
        let mut left = [0.0f64; 2];
        let mut i = 0;
        while i < pairs.len() {
            let v = pairs[i].0;
            while i < pairs.len() && pairs[i].0 == v {
                left[pairs[i].1 as usize] += weights[pairs[i].1 as usize];
                i += 1;
            }
            if i == pairs.len() {
                break;
            }
            let right = [total[0] - left[0], total[1] - left[1]];
            let (wl, wr) = (left[0] + left[1], right[0] + right[1]);
            let score = (wl * gini(&left) + wr * gini(&right)) / (wl + wr);
            if best.map_or(true, |b| score < b) {
                best = Some(score);
            }
        }
    }
    best
}

/// Score realized by splitting the node at (feature, threshold).
fn realized_score(x: &Array2<f64>, y: &[u8], feature: usize, threshold: f64) -> f64 {
    let weights = class_weights(y).unwrap();
    let gini = |w: &[f64; 2]| {
        let t = w[0] + w[1];
        if t <= 0.0 {
            return 0.0;
        }
        1.0 - (w[0] / t).powi(2) - (w[1] / t).powi(2)
    };
    let mut left = [0.0f64; 2];
    let mut right = [0.0f64; 2];
    for i in 0..y.len() {
        let side = if x[[i, feature]] < threshold { &mut left } else { &mut right };
        side[y[i] as usize] += weights[y[i] as usize];
    }
    let (wl, wr) = (left[0] + left[1], right[0] + right[1]);
    (wl * gini(&left) + wr * gini(&right)) / (wl + wr)
}

#[test]
fn forest_oracles() {
    criterion("forest oracles (Gini exhaustive, OOB fraction, parallel==serial)", || {
        // Gini split choice vs exhaustive search on small datasets.
        let mut rng = seeded_rng(0xAC06);
        let mut checked = 0usize;
        while checked < 200 {
            let n = rng.gen_range(2..=12);
            let d = rng.gen_range(1..=3);
            let x = Array2::<f64>::from_shape_fn((n, d), |_| rng.gen_range(0..6) as f64);
            let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if y.iter().all(|&l| l == 0) || y.iter().all(|&l| l == 1) {
                continue;
            }
            let config = ForestConfig {
                n_trees: 1,
                max_features: Some(d),
                max_depth: Some(1),
                bootstrap: false,
                seed: checked as u64,
                ..ForestConfig::default()
            };
            let model = fit_forest(x.view(), &y, &config).unwrap();
            let oracle = exhaustive_best_score(&x, &y);
            let weights = class_weights(&y).unwrap();
            let node_w = y.iter().fold([0.0f64; 2], |mut w, &l| {
                w[l as usize] += weights[l as usize];
                w
            });
            let t = node_w[0] + node_w[1];
            let impurity = 1.0 - (node_w[0] / t).powi(2) - (node_w[1] / t).powi(2);
            match &model.trees[0].nodes[0] {
                Node::Split { feature, threshold, .. } => {
                    let realized = realized_score(&x, &y, *feature as usize, *threshold);
                    let best = oracle.expect("split exists so a candidate exists");
                    assert!(
                        (realized - best).abs() < 1e-12,
                        "case {checked}: realized {realized} vs exhaustive {best}"
                    );
                }
                Node::Leaf { .. } => {
                    // Leaf only if no candidate strictly improves impurity.
                    if let Some(best) = oracle {
                        assert!(best >= impurity - 1e-12, "case {checked}: missed split {best} < {impurity}");
                    }
                }
            }
            checked += 1;
        }

        // OOB (sample, tree) pair fraction at n = 200, 1000 trees.
        let n = 200usize;
        let x = Array2::<f64>::from_shape_fn((n, 2), |_| rng.gen::<f64>());
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let config = ForestConfig { n_trees: 1000, max_depth: Some(2), seed: 9, ..ForestConfig::default() };
        let model = fit_forest(x.view(), &y, &config).unwrap();
        let oob_pairs: usize = model.oob_indices.iter().map(|v| v.len()).sum();
        let fraction = oob_pairs as f64 / (n * 1000) as f64;
        let expected = (1.0 - 1.0 / n as f64).powi(n as i32);
        assert!(
            (fraction - expected).abs() <= 0.02,
            "OOB fraction {fraction} vs (1-1/n)^n = {expected}"
        );

        // Parallel and serial fits agree bitwise.
        let config = ForestConfig { n_trees: 64, seed: 11, ..ForestConfig::default() };
        let a = fit_forest(x.view(), &y, &config).unwrap();
        let b = fit_forest_serial(x.view(), &y, &config).unwrap();
        assert_eq!(a, b);
    });
}

fn e2e_cv_config() -> CvConfig {
    CvConfig {
        k: 5,
        seed: 42,
        train: TrainConfig { max_epochs: 2, seed: 0, ..TrainConfig::default() },
        forest: ForestConfig { n_trees: 300, ..ForestConfig::default() },
        aggregation: AggregationConfig::default(),
        ae_train_cap: Some(400),
        ae_val_cap: Some(80),
        forest_train_cap: Some(1200),
    }
}

#[test]
fn end_to_end_directional() {
    criterion("end-to-end: imaging >= 0.85 > clinical; contrast 0 ~ chance", || {
        let start = Instant::now();
        let cv = e2e_cv_config();

        let phantom = PhantomConfig { seed: 42, ..PhantomConfig::default() };
        let (imaging_auroc, clinical_auroc) = {
            let synth = generate_cohort(&phantom).unwrap();
            let imaging = run_cross_validation(&synth.cohort, PipelineKind::Imaging, &cv).unwrap();
            let clinical = run_cross_validation(&synth.cohort, PipelineKind::Clinical, &cv).unwrap();
            (
                imaging.report.mean_auroc.expect("both classes in every fold"),
                clinical.report.mean_auroc.expect("both classes in every fold"),
            )
        };
        println!("  imaging AUROC {imaging_auroc:.3}, clinical AUROC {clinical_auroc:.3}");
        assert!(imaging_auroc >= 0.85, "imaging AUROC {imaging_auroc}");
        assert!(imaging_auroc > clinical_auroc, "{imaging_auroc} vs {clinical_auroc}");

        let blank = PhantomConfig { lesion_contrast: 0.0, seed: 42, ..PhantomConfig::default() };
        let synth = generate_cohort(&blank).unwrap();
        let chance = run_cross_validation(&synth.cohort, PipelineKind::Imaging, &cv).unwrap();
        let chance_auroc = chance.report.mean_auroc.expect("both classes in every fold");
        println!("  contrast-0 imaging AUROC {chance_auroc:.3}");
        assert!(
            (0.4..=0.6).contains(&chance_auroc),
            "contrast-0 AUROC {chance_auroc} outside [0.4, 0.6]"
        );
        let elapsed = start.elapsed();
        println!("  end-to-end runtime: {elapsed:.1?}");
        assert!(elapsed.as_secs() < 1800, "took {elapsed:?}");
    });
}

#[test]
fn clinical_distribution_fit() {
    criterion("clinical distribution fit (10,000 samples per class)", || {
        let dists = ClinicalDistributions::default();
        let n = 10_000usize;
        for (class, positive) in [("positive", true), ("negative", false)] {
            let mut rng = seeded_rng(0xAC08 + positive as u64);
            let mut ages = Vec::with_capacity(n);
            let mut psas = Vec::with_capacity(n);
            let mut vols = Vec::with_capacity(n);
            let mut dre_hits = 0usize;
            for i in 0..n {
                let r = sample_clinical(&dists, positive, &format!("X{i}"), &mut rng);
                ages.push(r.age.unwrap() as f64);
                psas.push(r.psa.unwrap());
                vols.push(r.prostate_volume.unwrap());
                dre_hits += r.dre.unwrap() as usize;
            }
            let profile = dists.profile(positive);
            let quartiles = |mut xs: Vec<f64>| {
                xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Quartiles::new(xs[n / 4], xs[n / 2], xs[3 * n / 4])
            };
            for (field, got, want) in [
                ("psa", quartiles(psas), profile.psa),
                ("volume", quartiles(vols), profile.volume),
                ("age", quartiles(ages), profile.age),
            ] {
                assert!(
                    (got.median - want.median).abs() / want.median <= 0.05,
                    "{class} {field} median {} vs {}",
                    got.median,
                    want.median
                );
                assert!(
                    (got.q1 - want.q1).abs() / want.q1 <= 0.10,
                    "{class} {field} q1 {} vs {}",
                    got.q1,
                    want.q1
                );
                assert!(
                    (got.q3 - want.q3).abs() / want.q3 <= 0.10,
                    "{class} {field} q3 {} vs {}",
                    got.q3,
                    want.q3
                );
            }
            let rate = dre_hits as f64 / n as f64;
            assert!(
                (rate - profile.dre_rate).abs() <= 0.01,
                "{class} dre rate {rate} vs {}",
                profile.dre_rate
            );
        }
    });
}
