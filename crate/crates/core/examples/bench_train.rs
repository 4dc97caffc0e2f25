//! Times the 500-slice, 20-epoch training workload end to end.

use std::time::Instant;

use microscreen_core::autoencoder::{train_autoencoder, TrainConfig};
use microscreen_core::synthesis::{generate_cohort, PhantomConfig};

fn main() {
    let config = PhantomConfig {
        n_positive: 2,
        n_negative: 1,
        slices_min: 184,
        slices_max: 184,
        seed: 42,
        ..PhantomConfig::default()
    };
    let t0 = Instant::now();
    let synth = generate_cohort(&config).unwrap();
    eprintln!("cohort gen: {:.1?}", t0.elapsed());
    let slices: Vec<_> = synth.cohort.studies.iter().flat_map(|s| s.slices.iter()).collect();
    let train = &slices[..500];
    let val = &slices[500..540];
    let cfg = TrainConfig { max_epochs: 20, seed: 42, ..TrainConfig::default() };
    let t1 = Instant::now();
    let (_w, hist) = train_autoencoder(train, val, &cfg).unwrap();
    eprintln!("20 epochs over 500 train + 40 val: {:.1?}", t1.elapsed());
    eprintln!(
        "train mse epoch1 {:.5} epoch20 {:.5} ratio {:.3}; best epoch {}",
        hist.train_mse[0],
        hist.train_mse[19],
        hist.train_mse[19] / hist.train_mse[0],
        hist.best_epoch
    );
}
