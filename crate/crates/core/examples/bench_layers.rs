//! Per-layer timing of the encoder/decoder stack at batch 32.

use std::time::Instant;

use microscreen_core::autoencoder::nn::{Conv2d, ConvTranspose2d};
use ndarray::Array4;
use rand::Rng;

fn main() {
    let chans = [3usize, 16, 32, 64, 128, 256];
    let mut rng = microscreen_core::rng::seeded_rng(2);
    let n = 8;
    for i in 0..5 {
        let (ci, co) = (chans[i], chans[i + 1]);
        let s = 256 >> i;
        let conv = Conv2d::<f32> {
            weight: Array4::from_shape_fn((co, ci, 3, 3), |_| rng.gen::<f32>() - 0.5),
            bias: ndarray::Array1::zeros(co),
        };
        let x = Array4::<f32>::from_shape_fn((n, ci, s, s), |_| rng.gen::<f32>());
        let t = Instant::now();
        let y = conv.forward(&x.view());
        let fwd = t.elapsed();
        let t = Instant::now();
        let _ = conv.backward(&x.view(), &y.view(), i > 0);
        let bwd = t.elapsed();

        let tconv = ConvTranspose2d::<f32> {
            weight: Array4::from_shape_fn((co, ci, 3, 3), |_| rng.gen::<f32>() - 0.5),
            bias: ndarray::Array1::zeros(ci),
        };
        let z = Array4::<f32>::from_shape_fn((n, co, s / 2, s / 2), |_| rng.gen::<f32>());
        let t = Instant::now();
        let yd = tconv.forward(&z.view());
        let dfwd = t.elapsed();
        let t = Instant::now();
        let _ = tconv.backward(&z.view(), &yd.view());
        let dbwd = t.elapsed();
        eprintln!(
            "L{i} {ci}->{co} @{s}: conv fwd {:>7.1?} bwd {:>7.1?} | tconv fwd {:>7.1?} bwd {:>7.1?}",
            fwd, bwd, dfwd, dbwd
        );
    }
}
