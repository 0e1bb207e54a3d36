//! The dual-encoder 1D convolutional network that learns the nuisance signal.
//!
//! A measured voxel spectrum is x1 = m + l + w (metabolites, lipids, residual
//! water). The network sees two views of the same voxel: encoder 1 takes x1,
//! encoder 2 takes x2 = (1 - L) x1, the part the closed-form suppression
//! operator [`crate::lipid::LipidOperator`] attributes to lipid. From the pair
//! it predicts the full nuisance y ~ l + w, and the cleaned spectrum is the
//! literal difference m~ = x1 - y. Whether a trained model removes lipids
//! only or lipids and water is decided entirely by its training targets
//! (`NuisanceMode` in [`crate::simgen`]); inference is identical.
//!
//! Complex spectra enter as two real channels (real, imaginary). Each encoder
//! level is conv(k) -> PReLU -> dropout -> conv -> PReLU -> dropout followed
//! by a max-pool of 2, with channels doubling from `base_channels`; the
//! bottleneck concatenates both encoders' deepest features; each decoder
//! level upsamples (nearest neighbour) and concatenates the same-level
//! features of both encoders; a final block and a kernel-1 convolution
//! produce the two output channels. The graph is fully convolutional, so any
//! length divisible by `pool_factor^depth` works; odd lengths are zero-padded
//! up and cropped back after inference (453 -> 464 at depth 4).
//!
//! Training normalizes each sample by the root-sum-squared difference
//! E = sqrt(sum_k |x1_k - x2_k|^2) (floored to survive the x1 == x2
//! degenerate pair), rotates x1, x2 and the target by one shared random
//! phase e^{i omega} per sample, and minimizes the mean-squared error over
//! both channels against y / E with Adam; the learning rate is multiplied by
//! `lr_decay` every `lr_decay_every` epochs. All randomness (weight init,
//! shuffling, phases, dropout masks) runs on separate seeded streams of one
//! generator, so a fixed seed reproduces the final weights bit for bit on a
//! single thread.
//!
//! Weights persist in the `YNW1` container: magic, u32 version, the config
//! fields in fixed order (little-endian), then every tensor in canonical
//! order as u32 rank, u32 dims, f32 data. Storage is deliberately f32 —
//! loading widens exactly, so save -> load -> save reproduces the file byte
//! for byte, but the first save of freshly trained f64 weights rounds them.

mod layers;
mod model;

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array3;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::lipid::LipidOperator;
use crate::simgen::TrainingSample;
use crate::spectrum::{Domain, Spectrum};
use crate::{Error, Result};

use layers::Feat;
use model::ParamSet;
pub use model::ForwardCache;

/// Floor applied to the pair energy E so a degenerate x1 == x2 pair
/// normalizes to zeros instead of NaNs.
pub const DEFAULT_ENERGY_FLOOR: f64 = 1e-12;

const MAGIC: &[u8; 4] = b"YNW1";
const VERSION: u32 = 1;

/// Architecture hyperparameters. `padded_length` is the training length and
/// must be a multiple of `pool_factor^depth`; inference pads any input up to
/// the next multiple on its own.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub dropout_rate: f64,
    pub in_channels_per_branch: usize,
    pub out_channels: usize,
    pub pool_factor: usize,
    pub padded_length: usize,
}

impl Default for YNetConfig {
    fn default() -> Self {
        YNetConfig {
            depth: 4,
            base_channels: 16,
            kernel: 7,
            dropout_rate: 0.01,
            in_channels_per_branch: 2,
            out_channels: 2,
            pool_factor: 2,
            padded_length: 512,
        }
    }
}

impl YNetConfig {
    /// Default architecture at a given training length.
    pub fn with_padded_length(padded_length: usize) -> Self {
        YNetConfig { padded_length, ..YNetConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("depth must be in 1..=16, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd for same padding, got {}",
                self.kernel
            )));
        }
        if !self.dropout_rate.is_finite() || !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.in_channels_per_branch == 0 {
            return Err(Error::Config("in_channels_per_branch must be at least 1".into()));
        }
        if self.out_channels == 0 {
            return Err(Error::Config("out_channels must be at least 1".into()));
        }
        if self.pool_factor < 2 || self.pool_factor > 255 {
            return Err(Error::Config(format!(
                "pool_factor must be in 2..=255, got {}",
                self.pool_factor
            )));
        }
        let stride = self
            .pool_factor
            .checked_pow(self.depth as u32)
            .filter(|&s| s <= 1 << 30)
            .ok_or_else(|| {
                Error::Config(format!(
                    "pool_factor {} to the power depth {} overflows",
                    self.pool_factor, self.depth
                ))
            })?;
        if self.padded_length == 0 || self.padded_length % stride != 0 {
            return Err(Error::Config(format!(
                "padded_length {} is not a positive multiple of pool_factor^depth = {stride}",
                self.padded_length
            )));
        }
        Ok(())
    }

    /// Total downsampling factor, `pool_factor^depth`.
    pub fn level_stride(&self) -> usize {
        self.pool_factor.pow(self.depth as u32)
    }

    /// Smallest padded length the graph accepts for an `n`-point spectrum.
    pub fn pad_to(&self, n: usize) -> usize {
        let s = self.level_stride();
        n.div_ceil(s) * s
    }

    fn enc_out(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn enc_in(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels_per_branch
        } else {
            self.enc_out(level - 1)
        }
    }

    fn bneck_channels(&self) -> usize {
        2 * self.enc_out(self.depth - 1)
    }

    fn dec_out(&self, level: usize) -> usize {
        self.enc_out(level)
    }

    /// Decoder input channels at `level`: the upsampled deeper features plus
    /// the same-level skip features of both encoders.
    fn dec_in(&self, level: usize) -> usize {
        let carried = if level + 1 == self.depth {
            self.bneck_channels()
        } else {
            self.dec_out(level + 1)
        };
        carried + 2 * self.enc_out(level)
    }
}

/// The learned parameters plus the architecture they instantiate.
#[derive(Clone, Debug)]
pub struct YNetWeights {
    pub config: YNetConfig,
    pub(crate) params: ParamSet,
}

impl YNetWeights {
    /// Fresh weights: He-style fan-in uniform conv kernels, zero biases,
    /// PReLU slopes at 0.25. Tensors draw in canonical order, so the seed
    /// pins the weights exactly.
    pub fn init(config: &YNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(YNetWeights { config: *config, params: ParamSet::build(config, Some(rng)) })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// All parameters in canonical order (the order gradients come back in).
    pub fn params_flat(&self) -> Vec<f64> {
        self.params.flat()
    }

    pub fn set_params_flat(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, the network has {}",
                v.len(),
                self.num_params()
            )));
        }
        self.params.set_flat(v);
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub energy_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 400,
            lr: 0.01,
            lr_decay: 0.25,
            lr_decay_every: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            energy_floor: DEFAULT_ENERGY_FLOOR,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config(format!("lr_decay must be positive, got {}", self.lr_decay)));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be at least 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.energy_floor.is_finite() && self.energy_floor > 0.0) {
            return Err(Error::Config(format!(
                "energy_floor must be positive, got {}",
                self.energy_floor
            )));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based): the base rate times
    /// `lr_decay^(epoch / lr_decay_every)`, so with the defaults epoch 50 is
    /// the first quartered epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One row of the training history. Epoch 0 is the pre-training evaluation;
/// `train_mse` for later rows is the optimized (augmented, dropout-active)
/// loss averaged over the epoch, `val_mse` is an eval-mode pass with no
/// augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

fn feat_from_array(a: &Array3<f64>) -> Feat {
    let (c, b, l) = a.dim();
    let data = a
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, b * l))
        .expect("contiguous reshape");
    Feat { data, batch: b, len: l }
}

fn feat_into_array(f: Feat) -> Array3<f64> {
    let (c, b, l) = (f.channels(), f.batch, f.len);
    f.data.into_shape_with_order((c, b, l)).expect("contiguous reshape")
}

fn check_inputs(cfg: &YNetConfig, x1: &Array3<f64>, x2: &Array3<f64>) -> Result<()> {
    if x1.dim() != x2.dim() {
        return Err(Error::Config(format!(
            "encoder inputs differ in shape: {:?} vs {:?}",
            x1.dim(),
            x2.dim()
        )));
    }
    let (c, b, l) = x1.dim();
    if c != cfg.in_channels_per_branch {
        return Err(Error::Config(format!(
            "inputs have {c} channels, the network takes {}",
            cfg.in_channels_per_branch
        )));
    }
    if b == 0 {
        return Err(Error::Config("empty batch".into()));
    }
    let stride = cfg.level_stride();
    if l == 0 || l % stride != 0 {
        return Err(Error::Config(format!(
            "length {l} is not a positive multiple of pool_factor^depth = {stride}"
        )));
    }
    Ok(())
}

/// Run the network on a batch. Inputs are `[channels, batch, length]` with
/// the two branches shaped alike; the result is `[out_channels, batch,
/// length]` plus the tape [`backward`] consumes. Dropout fires only in
/// `train_mode` (and only if the configured rate is positive), drawing masks
/// from `rng` in a fixed graph order.
pub fn forward(
    w: &YNetWeights,
    x1: &Array3<f64>,
    x2: &Array3<f64>,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Array3<f64>, ForwardCache)> {
    check_inputs(&w.config, x1, x2)?;
    let rng = if train_mode { Some(rng) } else { None };
    let (y, cache) =
        model::run_forward(&w.params, &w.config, feat_from_array(x1), feat_from_array(x2), rng);
    Ok((feat_into_array(y), cache))
}

/// Forward pass without a tape — the inference path. Identical arithmetic to
/// [`forward`] with `train_mode = false`.
pub fn forward_eval(w: &YNetWeights, x1: &Array3<f64>, x2: &Array3<f64>) -> Result<Array3<f64>> {
    check_inputs(&w.config, x1, x2)?;
    let y =
        model::run_forward_eval(&w.params, &w.config, &feat_from_array(x1), &feat_from_array(x2));
    Ok(feat_into_array(y))
}

/// Exact gradients of every parameter, flattened in canonical order (the
/// same order as [`YNetWeights::params_flat`]), given the tape of the
/// matching [`forward`] call and the loss gradient at the output.
pub fn backward(
    w: &YNetWeights,
    cache: &ForwardCache,
    grad_out: &Array3<f64>,
) -> Result<Vec<f64>> {
    let want = (cache.out_channels, cache.batch, cache.len);
    if grad_out.dim() != want {
        return Err(Error::Config(format!(
            "gradient shape {:?} does not match the forward output {want:?}",
            grad_out.dim()
        )));
    }
    let g = model::run_backward(&w.params, &w.config, cache, &feat_from_array(grad_out));
    Ok(g.flat())
}

/// Mean-squared error over every element (channels, batch and length).
pub fn mse(pred: &Array3<f64>, target: &Array3<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "loss operands must agree in shape");
    let n = pred.len() as f64;
    pred.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

/// Gradient of [`mse`] with respect to the prediction: `2 (pred - target) / n`.
pub fn mse_grad(pred: &Array3<f64>, target: &Array3<f64>) -> Array3<f64> {
    assert_eq!(pred.dim(), target.dim(), "loss operands must agree in shape");
    let scale = 2.0 / pred.len() as f64;
    let mut g = pred - target;
    g.mapv_inplace(|v| v * scale);
    g
}

/// Scale a spectrum pair by its root-sum-squared difference
/// E = sqrt(sum_k |x1_k - x2_k|^2), floored at `energy_floor`. Returns the
/// scaled pair and E. Both spectra must share axis and domain.
pub fn normalize_pair(x1: &Spectrum, x2: &Spectrum, energy_floor: f64) -> (Spectrum, Spectrum, f64) {
    assert_eq!(x1.axis, x2.axis, "pair must share the spectral axis");
    assert_eq!(x1.domain, x2.domain, "pair must share the domain");
    let e = pair_energy(&x1.samples, &x2.samples, energy_floor);
    let scale = |s: &Spectrum| {
        Spectrum::from_samples(s.axis, s.domain, s.samples.iter().map(|z| z / e).collect())
    };
    (scale(x1), scale(x2), e)
}

fn pair_energy(a: &[Complex64], b: &[Complex64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt().max(floor)
}

/// Multiply every sample by `e^{i omega}`.
pub fn phase_rotate(x: &Spectrum, omega: f64) -> Spectrum {
    let rot = Complex64::from_polar(1.0, omega);
    Spectrum::from_samples(x.axis, x.domain, x.samples.iter().map(|z| z * rot).collect())
}

/// Rotate by a random phase, uniform over [0, 2pi). Draw the angle once and
/// use [`phase_rotate`] directly to apply the SAME rotation to the partner
/// spectra of a training sample.
pub fn augment_phase(x: &Spectrum, rng: &mut ChaCha8Rng) -> Spectrum {
    phase_rotate(x, rng.gen_range(0.0..TAU))
}

/// Complex samples to (real, imaginary) channel pair.
pub fn split_channels(samples: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    (samples.iter().map(|z| z.re).collect(), samples.iter().map(|z| z.im).collect())
}

/// Inverse of [`split_channels`].
pub fn merge_channels(re: &[f64], im: &[f64]) -> Vec<Complex64> {
    assert_eq!(re.len(), im.len(), "channel lengths differ");
    re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect()
}

/// Rotate (optionally), normalize and pack a set of samples into the three
/// `[2, batch, padded]` arrays the graph consumes: both inputs and the
/// target, all scaled by each sample's own E. The zero padding past the axis
/// length trains the output toward zero there, which the crop after
/// inference discards anyway.
fn pack_batch(
    set: &[TrainingSample],
    idx: &[usize],
    padded: usize,
    mut phase_rng: Option<&mut ChaCha8Rng>,
    energy_floor: f64,
) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
    let b = idx.len();
    let n = set[idx[0]].x1.axis.n_points;
    let mut x1a = Array3::zeros((2, b, padded));
    let mut x2a = Array3::zeros((2, b, padded));
    let mut ya = Array3::zeros((2, b, padded));
    for (s, &i) in idx.iter().enumerate() {
        let smp = &set[i];
        let rot = match phase_rng.as_deref_mut() {
            Some(r) => Complex64::from_polar(1.0, r.gen_range(0.0..TAU)),
            None => Complex64::new(1.0, 0.0),
        };
        let r1: Vec<Complex64> = smp.x1.samples.iter().map(|z| z * rot).collect();
        let r2: Vec<Complex64> = smp.x2.samples.iter().map(|z| z * rot).collect();
        let ry: Vec<Complex64> = smp.target_y.samples.iter().map(|z| z * rot).collect();
        let e = pair_energy(&r1, &r2, energy_floor);
        for t in 0..n {
            let (v1, v2, vy) = (r1[t] / e, r2[t] / e, ry[t] / e);
            x1a[[0, s, t]] = v1.re;
            x1a[[1, s, t]] = v1.im;
            x2a[[0, s, t]] = v2.re;
            x2a[[1, s, t]] = v2.im;
            ya[[0, s, t]] = vy.re;
            ya[[1, s, t]] = vy.im;
        }
    }
    (x1a, x2a, ya)
}

/// Eval-mode loss over a whole set: no augmentation, no dropout.
fn eval_mse(w: &YNetWeights, set: &[TrainingSample], cfg: &TrainConfig) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut sum = 0.0;
    for chunk in idx.chunks(cfg.batch_size) {
        let (x1, x2, tgt) =
            pack_batch(set, chunk, w.config.padded_length, None, cfg.energy_floor);
        let pred = forward_eval(w, &x1, &x2)?;
        sum += mse(&pred, &tgt) * chunk.len() as f64;
    }
    Ok(sum / set.len() as f64)
}

fn adam_step(
    params: &mut ParamSet,
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let mut off = 0;
    params.visit_tensors_mut(&mut |_, _, data| {
        for p in data {
            let g = grads[off];
            m[off] = b1 * m[off] + (1.0 - b1) * g;
            v[off] = b2 * v[off] + (1.0 - b2) * g * g;
            let mh = m[off] / bc1;
            let vh = v[off] / bc2;
            *p -= lr * mh / (vh.sqrt() + eps);
            off += 1;
        }
    });
    debug_assert_eq!(off, grads.len());
}

/// Everything a training run carries between epochs: the weights, the Adam
/// moment buffers with their step counter, how many epochs have completed,
/// and where the shuffle/phase/dropout random streams stand. Holding one of
/// these (plus the original data and config) is enough to continue a run as
/// if it had never stopped; [`train`] is the fresh-start wrapper around it.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub weights: YNetWeights,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    /// Adam bias-correction counter: batches consumed so far.
    pub step: u64,
    /// Fully completed epochs; the next one to run is `epochs_done + 1`.
    pub epochs_done: usize,
    /// ChaCha word positions of the shuffle, phase, and dropout streams, in
    /// that order, so a resumed run draws exactly where the stopped one
    /// left off.
    pub rng_word_pos: [u128; 3],
}

// seeded stream layout: 0 weight init, 1 shuffling, 2 phases, 3 dropout
fn data_stream(seed: u64, k: u64, word_pos: u128) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r.set_word_pos(word_pos);
    r
}

impl TrainState {
    /// Freshly initialized weights (seeded by `cfg.seed`) with zeroed Adam
    /// buffers and every data stream at its start.
    pub fn fresh(cfg: &TrainConfig, ycfg: &YNetConfig) -> Result<TrainState> {
        ycfg.validate()?;
        cfg.validate()?;
        let weights = YNetWeights::init(ycfg, &mut data_stream(cfg.seed, 0, 0))?;
        let n_params = weights.num_params();
        Ok(TrainState {
            weights,
            adam_m: vec![0.0; n_params],
            adam_v: vec![0.0; n_params],
            step: 0,
            epochs_done: 0,
            rng_word_pos: [0; 3],
        })
    }
}

fn check_sets(
    ycfg: &YNetConfig,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
) -> Result<()> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if ycfg.in_channels_per_branch != 2 || ycfg.out_channels != 2 {
        return Err(Error::Config(
            "spectrum training packs complex data as 2 channels per branch; \
             in_channels_per_branch and out_channels must both be 2"
                .into(),
        ));
    }
    let axis = train_set[0].x1.axis;
    for s in train_set.iter().chain(val_set) {
        if s.x1.axis != axis {
            return Err(Error::AxisMismatch("training samples disagree on the spectral axis".into()));
        }
    }
    if axis.n_points > ycfg.padded_length {
        return Err(Error::Config(format!(
            "spectra have {} points but the network's padded length is {}",
            axis.n_points, ycfg.padded_length
        )));
    }
    Ok(())
}

/// Run epochs `state.epochs_done + 1 ..= cfg.epochs` on `state`, scoring
/// `val_set` after each epoch (an empty validation set falls back to scoring
/// the training set), and return one history row per epoch run.
///
/// The state must descend from [`TrainState::fresh`] under the same
/// `cfg.seed` and the same data; the random streams continue from their
/// recorded positions, so stopping and resuming reproduces the uninterrupted
/// run bit for bit while the state stays in memory. (Round-tripping the
/// weights through a file rounds them to single precision; a resumed run is
/// then equal to that quantization.)
pub fn train_epochs(
    state: &mut TrainState,
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let ycfg = state.weights.config;
    check_sets(&ycfg, train_set, val_set)?;
    let n_params = state.weights.num_params();
    if state.adam_m.len() != n_params || state.adam_v.len() != n_params {
        return Err(Error::Config(format!(
            "optimizer state holds {} moments but the network has {} parameters",
            state.adam_m.len().min(state.adam_v.len()),
            n_params
        )));
    }
    if cfg.epochs <= state.epochs_done {
        return Err(Error::Config(format!(
            "target of {} epochs already reached: {} are done",
            cfg.epochs, state.epochs_done
        )));
    }
    let mut shuffle_rng = data_stream(cfg.seed, 1, state.rng_word_pos[0]);
    let mut phase_rng = data_stream(cfg.seed, 2, state.rng_word_pos[1]);
    let mut drop_rng = data_stream(cfg.seed, 3, state.rng_word_pos[2]);
    let mut history = Vec::with_capacity(cfg.epochs - state.epochs_done);
    for epoch in state.epochs_done + 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        // each epoch shuffles the identity order, not the previous epoch's
        // permutation, so a resumed run sees the same batches as an
        // uninterrupted one
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x1, x2, tgt) = pack_batch(
                train_set,
                chunk,
                ycfg.padded_length,
                Some(&mut phase_rng),
                cfg.energy_floor,
            );
            let (pred, cache) = forward(&state.weights, &x1, &x2, true, &mut drop_rng)?;
            let loss = mse(&pred, &tgt);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss became {loss} at epoch {epoch} (step {})",
                    state.step
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            let grad = mse_grad(&pred, &tgt);
            let grads = backward(&state.weights, &cache, &grad)?;
            state.step += 1;
            adam_step(
                &mut state.weights.params,
                &grads,
                &mut state.adam_m,
                &mut state.adam_v,
                state.step,
                lr,
                cfg,
            );
        }
        let train_mse = loss_sum / train_set.len() as f64;
        let val_mse = if val_set.is_empty() {
            eval_mse(&state.weights, train_set, cfg)?
        } else {
            eval_mse(&state.weights, val_set, cfg)?
        };
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became {val_mse} after epoch {epoch}"
            )));
        }
        history.push(EpochStats { epoch, lr, train_mse, val_mse });
        state.epochs_done = epoch;
    }
    state.rng_word_pos =
        [shuffle_rng.get_word_pos(), phase_rng.get_word_pos(), drop_rng.get_word_pos()];
    Ok(history)
}

/// Train fresh weights on `train_set`, scoring `val_set` after every epoch
/// (an empty validation set falls back to scoring the training set). Returns
/// the weights and the per-epoch history, whose first row (epoch 0) is the
/// pre-training evaluation. Fully seeded and single-threaded: identical
/// seed and data give bit-identical weights.
pub fn train(
    train_set: &[TrainingSample],
    val_set: &[TrainingSample],
    cfg: &TrainConfig,
    ycfg: &YNetConfig,
) -> Result<(YNetWeights, Vec<EpochStats>)> {
    let mut state = TrainState::fresh(cfg, ycfg)?;
    check_sets(ycfg, train_set, val_set)?;
    let tr0 = eval_mse(&state.weights, train_set, cfg)?;
    let val0 = if val_set.is_empty() { tr0 } else { eval_mse(&state.weights, val_set, cfg)? };
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    history.push(EpochStats { epoch: 0, lr: cfg.lr_at(0), train_mse: tr0, val_mse: val0 });
    if cfg.epochs > 0 {
        history.extend(train_epochs(&mut state, train_set, val_set, cfg)?);
    }
    Ok((state.weights, history))
}

/// Remove the nuisance signal from one frequency-domain spectrum: build
/// x2 = (1 - L) x1 with the operator, pad both to the next usable length,
/// normalize by the pair energy, run the network in eval mode, undo the
/// normalization, crop, and subtract. Returns `(m~, y)` with the exact
/// identity m~ + y == x1 (the prediction y is nudged by at most one rounding
/// step to make the subtraction lossless).
/// Move `y` by at most a few ulps so the two-term decomposition of `x`
/// closes exactly in floating point: `(x - y') + y' == x`.
///
/// Naively re-deriving `y` as `x - (x - y)` can reach a stable pair whose
/// round-trip sum is still one ulp off, so the subtraction's rounding error
/// is recovered exactly (Fast2Sum) and folded back into `y`. When that
/// correction is a rounding tie — round-to-even maps `y` onto itself — the
/// ulp neighbors are scanned.
///
/// `None` when no nearby `y'` can work at all. That is arithmetic, not a
/// scan limit: when `y` and the complement `x - y` both carry exponents
/// above `x`'s (an opposite-signed or much larger prediction), every
/// representable round trip is a multiple of at least two ulps of `x`, and
/// an `x` with its last mantissa bit set falls between them.
fn settle_component(x: f64, y: f64) -> Option<f64> {
    let mut y = y;
    for _ in 0..4 {
        let m = x - y;
        if m + y == x {
            return Some(y);
        }
        let (a, b) = if x.abs() >= y.abs() { (x, -y) } else { (-y, x) };
        let err = b - (m - a);
        let next = y + err;
        if next == y || !next.is_finite() {
            break;
        }
        y = next;
    }
    let (mut up, mut down) = (y, y);
    for _ in 0..8 {
        up = up.next_up();
        if (x - up) + up == x {
            return Some(up);
        }
        down = down.next_down();
        if (x - down) + down == x {
            return Some(down);
        }
    }
    None
}

pub fn infer(w: &YNetWeights, x1: &Spectrum, op: &LipidOperator) -> Result<(Spectrum, Spectrum)> {
    assert_eq!(x1.domain, Domain::Frequency, "inference runs on frequency-domain spectra");
    let x2 = op.project_lipid(x1)?;
    let n = x1.axis.n_points;
    let padded = w.config.pad_to(n);
    let (x1n, x2n, e) = normalize_pair(x1, &x2, DEFAULT_ENERGY_FLOOR);
    let mut a1 = Array3::zeros((2, 1, padded));
    let mut a2 = Array3::zeros((2, 1, padded));
    for t in 0..n {
        a1[[0, 0, t]] = x1n.samples[t].re;
        a1[[1, 0, t]] = x1n.samples[t].im;
        a2[[0, 0, t]] = x2n.samples[t].re;
        a2[[1, 0, t]] = x2n.samples[t].im;
    }
    let y_ch = forward_eval(w, &a1, &a2)?;
    let y: Vec<Complex64> =
        (0..n).map(|t| Complex64::new(y_ch[[0, 0, t]], y_ch[[1, 0, t]]) * e).collect();
    if y.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numeric("network output is not finite".into()));
    }
    // Close the decomposition per real component: nudge the prediction by a
    // few ulps so that (x1 - y) + y == x1 holds bitwise. Components whose
    // prediction scale cannot close the round trip at all (see
    // settle_component) keep the plainly rounded subtraction instead.
    let mut m = Vec::with_capacity(n);
    let mut y_out = Vec::with_capacity(n);
    for (a, b) in x1.samples.iter().zip(&y) {
        let yr = settle_component(a.re, b.re).unwrap_or(b.re);
        let yi = settle_component(a.im, b.im).unwrap_or(b.im);
        y_out.push(Complex64::new(yr, yi));
        m.push(Complex64::new(a.re - yr, a.im - yi));
    }
    Ok((
        Spectrum::from_samples(x1.axis, Domain::Frequency, m),
        Spectrum::from_samples(x1.axis, Domain::Frequency, y_out),
    ))
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize weights to the `YNW1` byte layout (see the module docs).
pub fn weights_to_bytes(w: &YNetWeights) -> Result<Vec<u8>> {
    w.config.validate()?;
    let c = &w.config;
    for (name, v) in [
        ("depth", c.depth),
        ("base_channels", c.base_channels),
        ("kernel", c.kernel),
        ("in_channels_per_branch", c.in_channels_per_branch),
        ("out_channels", c.out_channels),
        ("pool_factor", c.pool_factor),
        ("padded_length", c.padded_length),
    ] {
        if v > u32::MAX as usize {
            return Err(Error::DimOverflow(format!("{name} {v} exceeds the u32 file field")));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    push_u32(&mut buf, c.depth as u32);
    push_u32(&mut buf, c.base_channels as u32);
    push_u32(&mut buf, c.kernel as u32);
    buf.extend_from_slice(&c.dropout_rate.to_le_bytes());
    push_u32(&mut buf, c.in_channels_per_branch as u32);
    push_u32(&mut buf, c.out_channels as u32);
    push_u32(&mut buf, c.pool_factor as u32);
    push_u32(&mut buf, c.padded_length as u32);
    w.params.visit_tensors(&mut |_, dims, data| {
        push_u32(&mut buf, dims.len() as u32);
        for d in &dims {
            push_u32(&mut buf, *d as u32);
        }
        for &x in data {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    });
    Ok(buf)
}

pub fn save_weights(w: &YNetWeights, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, weights_to_bytes(w)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated(format!("weights file ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse the `YNW1` byte layout.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<YNetWeights> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "the magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("the version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let config = YNetConfig {
        depth: r.u32("depth")? as usize,
        base_channels: r.u32("base_channels")? as usize,
        kernel: r.u32("kernel")? as usize,
        dropout_rate: r.f64("dropout_rate")?,
        in_channels_per_branch: r.u32("in_channels_per_branch")? as usize,
        out_channels: r.u32("out_channels")? as usize,
        pool_factor: r.u32("pool_factor")? as usize,
        padded_length: r.u32("padded_length")? as usize,
    };
    config.validate()?;
    let mut params = ParamSet::build(&config, None);
    let mut failure: Option<Error> = None;
    params.visit_tensors_mut(&mut |name, dims, data| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = read_tensor(&mut r, &name, &dims, data) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let mut bad: Option<String> = None;
    params.visit_tensors(&mut |name, _, data| {
        if bad.is_none() && !data.iter().all(|v| v.is_finite()) {
            bad = Some(name);
        }
    });
    if let Some(name) = bad {
        return Err(Error::Format(format!("tensor `{name}` contains non-finite values")));
    }
    Ok(YNetWeights { config, params })
}

fn read_tensor(r: &mut Reader<'_>, name: &str, dims: &[usize], data: &mut [f64]) -> Result<()> {
    let rank = r.u32(name)? as usize;
    if rank != dims.len() {
        return Err(Error::Format(format!(
            "tensor `{name}`: expected rank {}, file has {rank} \
             (the config fields depth/base_channels/kernel decide these shapes)",
            dims.len()
        )));
    }
    let mut fdims = Vec::with_capacity(rank);
    for _ in 0..rank {
        fdims.push(r.u32(name)? as usize);
    }
    if fdims != dims {
        return Err(Error::Format(format!(
            "tensor `{name}`: expected dims {dims:?}, file has {fdims:?} \
             (the config fields depth/base_channels/kernel decide these shapes)"
        )));
    }
    for x in data.iter_mut() {
        *x = f32::from_le_bytes(r.take(4, name)?.try_into().unwrap()) as f64;
    }
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<YNetWeights> {
    weights_from_bytes(&std::fs::read(path)?)
}
