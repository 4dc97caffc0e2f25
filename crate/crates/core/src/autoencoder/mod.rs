//! Self-supervised convolutional autoencoder for slice feature learning.
//!
//! Five stride-2 encoder layers take a (3, 256, 256) input down to a
//! (256, 8, 8) latent; the decoder mirrors them with transposed
//! convolutions. Training minimizes reconstruction MSE with Adam; after
//! training the encoder is frozen and its adaptively average-pooled latent
//! is the 256-dim slice feature.

pub mod nn;

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::SliceImage;
use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, seeded_rng};
use nn::{mse_and_grad, relu_backward, relu_inplace, Adam, Conv2d, ConvTranspose2d, Scalar};

/// Fixed encoder architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Square input side; the loader resizes slices to this.
    pub input_size: usize,
    /// Channel counts from input to latent, one conv layer per step.
    pub channels: [usize; 6],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_size: 256, channels: [3, 16, 32, 64, 128, 256] }
    }
}

impl EncoderConfig {
    pub const LAYERS: usize = 5;

    pub fn latent_channels(&self) -> usize {
        self.channels[Self::LAYERS]
    }

    /// Spatial side of the latent grid: input_size / 2^5.
    pub fn latent_size(&self) -> usize {
        self.input_size >> Self::LAYERS
    }

    pub fn check(&self) -> Result<()> {
        if self.channels[0] != 3 || self.channels[Self::LAYERS] != 256 {
            return Err(CoreError::InvalidInput(format!(
                "channel progression must run 3 -> 256, got {:?}",
                self.channels
            )));
        }
        if self.input_size % (1 << Self::LAYERS) != 0 || self.input_size == 0 {
            return Err(CoreError::InvalidInput(format!(
                "input size {} not divisible by 2^{}",
                self.input_size,
                Self::LAYERS
            )));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 32, max_epochs: 20, seed: 0 }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidInput("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidInput("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Encoder + mirrored decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder<F> {
    pub config: EncoderConfig,
    pub encoder: Vec<Conv2d<F>>,
    pub decoder: Vec<ConvTranspose2d<F>>,
}

/// 256-dim pooled slice embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub const LEN: usize = 256;
}

/// Per-epoch loss curves plus the retained checkpoint epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    /// 0-based index of the epoch whose weights were retained.
    pub best_epoch: usize,
}

impl<F: Scalar> Autoencoder<F> {
    /// Zero-initialized model of the given architecture.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.check()?;
        let ch = &config.channels;
        let encoder = (0..EncoderConfig::LAYERS).map(|i| Conv2d::zeros(ch[i], ch[i + 1])).collect();
        let decoder = (0..EncoderConfig::LAYERS)
            .rev()
            .map(|i| ConvTranspose2d::zeros(ch[i + 1], ch[i]))
            .collect();
        Ok(Self { config, encoder, decoder })
    }

    /// Uniform fan-in initialization, biases zero, deterministic per seed.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = seeded_rng(derive_seed(seed, "ae-init"));
        for layer in &mut model.encoder {
            let bound = 1.0 / ((layer.c_in() * nn::KERNEL * nn::KERNEL) as f64).sqrt();
            layer.weight.mapv_inplace(|_| F::from_f64(rng.gen_range(-bound..bound)).unwrap());
        }
        for layer in &mut model.decoder {
            let bound = 1.0 / ((layer.c_in() * nn::KERNEL * nn::KERNEL) as f64).sqrt();
            layer.weight.mapv_inplace(|_| F::from_f64(rng.gen_range(-bound..bound)).unwrap());
        }
        Ok(model)
    }

    /// Latent representation of a batch: (n, 3, S, S) -> (n, 256, S/32, S/32).
    pub fn encode_batch(&self, x: &ArrayView4<'_, F>) -> Result<Array4<F>> {
        let (_, c, h, w) = x.dim();
        let s = self.config.input_size;
        if c != self.config.channels[0] || h != s || w != s {
            return Err(CoreError::DimensionMismatch {
                expected: format!("(_, {}, {s}, {s})", self.config.channels[0]),
                actual: format!("(_, {c}, {h}, {w})"),
            });
        }
        let mut a = x.to_owned();
        for layer in &self.encoder {
            a = layer.forward(&a.view());
            relu_inplace(&mut a);
        }
        Ok(a)
    }

    /// Reconstruction from a latent batch: (n, 256, S/32, S/32) -> (n, 3, S, S).
    pub fn decode_batch(&self, z: &ArrayView4<'_, F>) -> Result<Array4<F>> {
        let (_, c, h, w) = z.dim();
        let ls = self.config.latent_size();
        if c != self.config.latent_channels() || h != ls || w != ls {
            return Err(CoreError::DimensionMismatch {
                expected: format!("(_, {}, {ls}, {ls})", self.config.latent_channels()),
                actual: format!("(_, {c}, {h}, {w})"),
            });
        }
        let mut a = z.to_owned();
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            a = layer.forward(&a.view());
            if i != last {
                relu_inplace(&mut a);
            }
        }
        Ok(a)
    }

    /// Forward pass retaining the activation chain for backprop.
    fn forward_cached(&self, x: &Array4<F>) -> Vec<Array4<F>> {
        // acts[0] = input, then one post-activation per layer; the final
        // entry is the reconstruction.
        let mut acts: Vec<Array4<F>> = Vec::with_capacity(2 * EncoderConfig::LAYERS + 1);
        acts.push(x.clone());
        for layer in &self.encoder {
            let mut a = layer.forward(&acts.last().unwrap().view());
            relu_inplace(&mut a);
            acts.push(a);
        }
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let mut a = layer.forward(&acts.last().unwrap().view());
            if i != last {
                relu_inplace(&mut a);
            }
            acts.push(a);
        }
        acts
    }

    /// Backprop of dL/d(reconstruction), accumulating parameter gradients
    /// into `grads` (so minibatch gradients can be summed sample by sample).
    fn backward_accum(&self, acts: &[Array4<F>], drecon: Array4<F>, grads: &mut Autoencoder<F>) {
        let l = EncoderConfig::LAYERS;
        let mut dy = drecon;
        // Decoder layers, last to first. acts layout:
        //   acts[0..=l]        encoder chain (input + l post-relu outputs)
        //   acts[l+1..=2l]     decoder outputs (relu'd except the last)
        for i in (0..l).rev() {
            let out_idx = l + 1 + i;
            if i != l - 1 {
                relu_backward(&acts[out_idx], &mut dy);
            }
            let input = &acts[out_idx - 1];
            let g = &mut grads.decoder[i];
            dy = self.decoder[i].backward_into(&input.view(), &dy.view(), &mut g.weight, &mut g.bias);
        }
        // Encoder layers, last to first. All encoder outputs are relu'd.
        for i in (0..l).rev() {
            relu_backward(&acts[i + 1], &mut dy);
            let input = &acts[i];
            let g = &mut grads.encoder[i];
            let dx =
                self.encoder[i].backward_into(&input.view(), &dy.view(), i > 0, &mut g.weight, &mut g.bias);
            if let Some(dx) = dx {
                dy = dx;
            } else {
                break;
            }
        }
    }

    /// Flat views over every parameter tensor, in a fixed order.
    fn param_slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(layer.weight.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        for layer in &mut self.decoder {
            out.push(layer.weight.as_slice_mut().unwrap());
            out.push(layer.bias.as_slice_mut().unwrap());
        }
        out
    }

    fn param_slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        for layer in &self.decoder {
            out.push(layer.weight.as_slice().unwrap());
            out.push(layer.bias.as_slice().unwrap());
        }
        out
    }
}

/// Production weights are single precision.
pub type AutoencoderWeights = Autoencoder<f32>;

/// Encode one image: (3, S, S) -> latent (256, S/32, S/32).
pub fn encode(image: &Array3<f32>, weights: &AutoencoderWeights) -> Result<Array3<f32>> {
    let batch = image.view().insert_axis(Axis(0));
    let z = weights.encode_batch(&batch.view())?;
    Ok(z.index_axis(Axis(0), 0).to_owned())
}

/// Decode one latent: (256, S/32, S/32) -> (3, S, S).
pub fn decode(latent: &Array3<f32>, weights: &AutoencoderWeights) -> Result<Array3<f32>> {
    let batch = latent.view().insert_axis(Axis(0));
    let y = weights.decode_batch(&batch.view())?;
    Ok(y.index_axis(Axis(0), 0).to_owned())
}

/// Mean over all elements of (x - x_hat)^2.
pub fn reconstruction_loss(x: &Array3<f32>, x_hat: &Array3<f32>) -> Result<f32> {
    if x.dim() != x_hat.dim() {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{:?}", x.dim()),
            actual: format!("{:?}", x_hat.dim()),
        });
    }
    let diff = x - x_hat;
    Ok(diff.mapv(|v| v * v).sum() / x.len() as f32)
}

/// Spatial average per latent channel.
pub fn pool_latent(latent: &Array3<f32>) -> Vec<f32> {
    latent
        .axis_iter(Axis(0))
        .map(|ch| ch.sum() / ch.len() as f32)
        .collect()
}

/// Encode + adaptive average pool: one 256-dim vector per slice.
pub fn extract_feature(image: &Array3<f32>, weights: &AutoencoderWeights) -> Result<FeatureVector> {
    let latent = encode(image, weights)?;
    Ok(FeatureVector(pool_latent(&latent)))
}

/// Batched feature extraction for a set of slices.
pub fn extract_features(
    slices: &[&SliceImage],
    weights: &AutoencoderWeights,
    batch_size: usize,
) -> Result<Vec<FeatureVector>> {
    let size = weights.config.input_size;
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(batch_size.max(1)) {
        let x = stack_inputs(chunk, size);
        let z = weights.encode_batch(&x.view())?;
        for zi in z.axis_iter(Axis(0)) {
            out.push(FeatureVector(pool_latent(&zi.to_owned())));
        }
    }
    Ok(out)
}

fn stack_inputs(slices: &[&SliceImage], size: usize) -> Array4<f32> {
    let mut x = Array4::<f32>::zeros((slices.len(), 3, size, size));
    for (i, s) in slices.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&s.to_model_input(size));
    }
    x
}

fn mean_val_loss(model: &AutoencoderWeights, val: &[&SliceImage], batch_size: usize) -> Result<f64> {
    let size = model.config.input_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in val.chunks(batch_size) {
        let x = stack_inputs(chunk, size);
        let z = model.encode_batch(&x.view())?;
        let recon = model.decode_batch(&z.view())?;
        let (loss, _) = mse_and_grad(&recon, &x);
        total += loss as f64 * x.len() as f64;
        count += x.len();
    }
    Ok(total / count as f64)
}

/// Train on reconstruction MSE with Adam; returns the weight snapshot at
/// the epoch with minimum validation MSE plus both loss curves.
/// Deterministic given the config seed.
pub fn train_autoencoder(
    train: &[&SliceImage],
    val: &[&SliceImage],
    config: &TrainConfig,
) -> Result<(AutoencoderWeights, LossHistory)> {
    config.check()?;
    if train.is_empty() || val.is_empty() {
        return Err(CoreError::InvalidInput("train and validation sets must be nonempty".into()));
    }
    let mut model = Autoencoder::<f32>::init(EncoderConfig::default(), config.seed)?;
    let size = model.config.input_size;
    let sizes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::<f32>::new(config.learning_rate as f32, &sizes);
    let mut shuffle_rng = seeded_rng(derive_seed(config.seed, "ae-shuffle"));

    let mut history = LossHistory { train_mse: Vec::new(), val_mse: Vec::new(), best_epoch: 0 };
    let mut best: Option<(f64, AutoencoderWeights)> = None;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            // One sample at a time keeps the whole activation chain
            // cache-resident; gradients are summed into `grads` and the
            // optimizer steps once per minibatch as usual.
            let inv_b = 1.0f32 / batch_idx.len() as f32;
            let mut grads =
                Autoencoder::<f32>::zeros(model.config.clone()).expect("config already validated");
            for &idx in batch_idx {
                let x = stack_inputs(&[train[idx]], size);
                let acts = model.forward_cached(&x);
                let (loss, mut dloss) = mse_and_grad(acts.last().unwrap(), &x);
                if !loss.is_finite() {
                    return Err(CoreError::Diverged(format!("non-finite loss at epoch {epoch}")));
                }
                epoch_loss += loss as f64;
                seen += 1;
                // Minibatch loss is the mean over samples.
                dloss.mapv_inplace(|v| v * inv_b);
                model.backward_accum(&acts, dloss, &mut grads);
            }
            let grad_slices = grads.param_slices();
            let mut param_slices = model.param_slices_mut();
            adam.step(&mut param_slices, &grad_slices);
        }
        history.train_mse.push(epoch_loss / seen as f64);
        let vloss = mean_val_loss(&model, val, config.batch_size)?;
        if !vloss.is_finite() {
            return Err(CoreError::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        history.val_mse.push(vloss);
        if best.as_ref().map_or(true, |(b, _)| vloss < *b) {
            best = Some((vloss, model.clone()));
            history.best_epoch = epoch;
        }
    }
    let (_, weights) = best.expect("at least one epoch ran");
    Ok((weights, history))
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic, version, config, seed, parameter tensors (LE f32)
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MUAE";
const CKPT_VERSION: u32 = 1;

/// Persist weights with their config and originating seed.
pub fn save_checkpoint(weights: &AutoencoderWeights, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.write_u32::<LittleEndian>(CKPT_VERSION)?;
    buf.write_u64::<LittleEndian>(seed)?;
    buf.write_u32::<LittleEndian>(weights.config.input_size as u32)?;
    for &c in &weights.config.channels {
        buf.write_u32::<LittleEndian>(c as u32)?;
    }
    for slice in weights.param_slices() {
        buf.write_u64::<LittleEndian>(slice.len() as u64)?;
        for &v in slice {
            buf.write_f32::<LittleEndian>(v)?;
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a checkpoint, rejecting unknown versions and configs that disagree
/// with the fixed architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AutoencoderWeights, u64)> {
    let data = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(&data);
    let mut magic = [0u8; 4];
    std::io::Read::read_exact(&mut cur, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CoreError::Checkpoint("bad magic".into()));
    }
    let version = cur.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(CoreError::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = cur.read_u64::<LittleEndian>()?;
    let input_size = cur.read_u32::<LittleEndian>()? as usize;
    let mut channels = [0usize; 6];
    for c in &mut channels {
        *c = cur.read_u32::<LittleEndian>()? as usize;
    }
    let config = EncoderConfig { input_size, channels };
    let expected = EncoderConfig::default();
    if config != expected {
        return Err(CoreError::Checkpoint(format!(
            "checkpoint config {config:?} disagrees with expected {expected:?}"
        )));
    }
    let mut weights = Autoencoder::<f32>::zeros(config)?;
    for slice in weights.param_slices_mut() {
        let len = cur.read_u64::<LittleEndian>()? as usize;
        if len != slice.len() {
            return Err(CoreError::Checkpoint(format!(
                "tensor length mismatch: expected {}, got {len}",
                slice.len()
            )));
        }
        for v in slice.iter_mut() {
            *v = cur.read_f32::<LittleEndian>()?;
        }
    }
    if cur.position() != data.len() as u64 {
        return Err(CoreError::Checkpoint("trailing bytes".into()));
    }
    Ok((weights, seed))
}
