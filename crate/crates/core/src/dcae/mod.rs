//! Mel-spectrogram autoencoder with 8× compression in time and frequency
//! into 8 latent channels, plus reconstruction-only training.
//!
//! Feature maps are `[positions × channels]` with positions ordered
//! time-major. Each of the three downsampling stages is a 2×2
//! space-to-depth followed by a pointwise projection; the first two stages
//! also carry a 3×3 residual convolution. The decoder mirrors it.

mod infer;
pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::nn::{depth_to_space, im2col3x3, init_linear, linear, space_to_depth};
use crate::optim::{AdamState, AdamW};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;

pub use synth::{synth_mel, synth_mel_with, SongSpec, STYLES};

/// 44.1 kHz audio with a 512-sample hop.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 44_100.0 / 512.0;
pub const DEFAULT_N_BINS: usize = 128;
pub const LATENT_CHANNELS: usize = 8;
/// Spatial compression factor in both axes.
pub const COMPRESSION: usize = 8;

/// Mel frames for a duration: rounded, then padded up to a multiple of 8.
pub fn frames_for_duration(duration_s: f64, frame_rate_hz: f64) -> usize {
    let raw = (duration_s * frame_rate_hz).round().max(1.0) as usize;
    raw.div_ceil(COMPRESSION) * COMPRESSION
}

/// Time × frequency magnitudes in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    data: Matrix,
    frame_rate_hz: f64,
    /// Frame count before right-padding.
    original_frames: usize,
}

impl MelSpectrogram {
    pub fn new(data: Matrix, frame_rate_hz: f64) -> Self {
        let original_frames = data.rows();
        Self {
            data,
            frame_rate_hz,
            original_frames,
        }
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.cols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn original_frames(&self) -> usize {
        self.original_frames
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.frame_rate_hz
    }

    /// Right-pads frames with zeros to a multiple of 8, remembering the
    /// original length for [`MelSpectrogram::cropped`].
    pub fn pad_to_multiple_of_8(&self) -> Result<Self> {
        if self.n_bins() % COMPRESSION != 0 {
            return Err(Error::InvalidArgument(format!(
                "mel bin count {} must be a multiple of 8",
                self.n_bins()
            )));
        }
        let t = self.frames().div_ceil(COMPRESSION) * COMPRESSION;
        let f = self.n_bins();
        let mut data = Matrix::zeros(t, f);
        data.data_mut()[..self.data.len()].copy_from_slice(self.data.data());
        Ok(Self {
            data,
            frame_rate_hz: self.frame_rate_hz,
            original_frames: self.original_frames,
        })
    }

    /// Drops padding frames.
    pub fn cropped(&self) -> Self {
        let keep = self.original_frames.min(self.frames());
        let rows: Vec<usize> = (0..keep).collect();
        Self::new(self.data.select_rows(&rows), self.frame_rate_hz)
    }

    pub fn with_original_frames(mut self, frames: usize) -> Self {
        self.original_frames = frames;
        self
    }

    /// Mel file layout: `mel` `[frames × bins]` and `meta` `[frame_rate_hz, n_bins]`.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert_matrix("mel", &self.data)?;
        c.insert_matrix(
            "meta",
            &Matrix::row_vector(vec![self.frame_rate_hz, self.n_bins() as f64]),
        )?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let data = c.matrix("mel")?;
        let meta = c.matrix("meta")?;
        if meta.len() != 2 || meta.data()[1] as usize != data.cols() {
            return Err(Error::shape(format!(
                "mel meta {:?} inconsistent with data {}x{}",
                meta.data(),
                data.rows(),
                data.cols()
            )));
        }
        Ok(Self::new(data, meta.data()[0]))
    }
}

/// Latent tensor `[8 × F/8 × T/8]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    data: Vec<f64>,
    freq: usize,
    frames: usize,
    latent_rate_hz: f64,
}

impl Latent {
    pub fn new(data: Vec<f64>, freq: usize, frames: usize, latent_rate_hz: f64) -> Result<Self> {
        if data.len() != LATENT_CHANNELS * freq * frames {
            return Err(Error::shape(format!(
                "latent data length {} != 8x{freq}x{frames}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            freq,
            frames,
            latent_rate_hz,
        })
    }

    pub fn zeros(freq: usize, frames: usize, latent_rate_hz: f64) -> Self {
        Self {
            data: vec![0.0; LATENT_CHANNELS * freq * frames],
            freq,
            frames,
            latent_rate_hz,
        }
    }

    pub fn channels(&self) -> usize {
        LATENT_CHANNELS
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (LATENT_CHANNELS, self.freq, self.frames)
    }

    pub fn latent_rate_hz(&self) -> f64 {
        self.latent_rate_hz
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, f: usize, t: usize) -> f64 {
        self.data[(c * self.freq + f) * self.frames + t]
    }

    /// Width of one time column: `channels × freq`.
    pub fn token_width(&self) -> usize {
        LATENT_CHANNELS * self.freq
    }

    /// One row per latent frame; row `t` is the `(c, f)` column flattened
    /// channel-major.
    pub fn to_tokens(&self) -> Matrix {
        let w = self.token_width();
        Matrix::from_fn(self.frames, w, |t, k| self.data[k * self.frames + t])
    }

    pub fn from_tokens(tokens: &Matrix, freq: usize, latent_rate_hz: f64) -> Result<Self> {
        let frames = tokens.rows();
        if tokens.cols() != LATENT_CHANNELS * freq {
            return Err(Error::shape(format!(
                "token width {} != 8x{freq}",
                tokens.cols()
            )));
        }
        let w = tokens.cols();
        let mut data = vec![0.0; w * frames];
        for t in 0..frames {
            for (k, v) in tokens.row(t).iter().enumerate() {
                data[k * frames + t] = *v;
            }
        }
        Self::new(data, freq, frames, latent_rate_hz)
    }

    /// Encoder layout `[T·F × C]` → latent.
    fn from_positions(m: &Matrix, freq: usize, frames: usize, rate: f64) -> Result<Self> {
        if m.cols() != LATENT_CHANNELS {
            return Err(Error::ChannelCount(m.cols()));
        }
        let mut data = vec![0.0; LATENT_CHANNELS * freq * frames];
        for t in 0..frames {
            for f in 0..freq {
                for c in 0..LATENT_CHANNELS {
                    data[(c * freq + f) * frames + t] = m.get(t * freq + f, c);
                }
            }
        }
        Self::new(data, freq, frames, rate)
    }

    fn to_positions(&self) -> Matrix {
        Matrix::from_fn(self.frames * self.freq, LATENT_CHANNELS, |p, c| {
            let (t, f) = (p / self.freq, p % self.freq);
            self.get(c, f, t)
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcaeConfig {
    pub n_bins: usize,
    pub frame_rate_hz: f64,
    /// Channels after the first and second downsampling stages.
    pub c1: usize,
    pub c2: usize,
}

impl Default for DcaeConfig {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_N_BINS,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            c1: 16,
            c2: 32,
        }
    }
}

impl DcaeConfig {
    pub fn latent_rate_hz(&self) -> f64 {
        self.frame_rate_hz / COMPRESSION as f64
    }

    pub fn latent_freq(&self) -> usize {
        self.n_bins / COMPRESSION
    }
}

/// Autoencoder parameters. Immutable once built; share freely.
#[derive(Clone, Debug, PartialEq)]
pub struct Dcae {
    pub config: DcaeConfig,
    pub params: ParamStore,
}

impl Dcae {
    pub fn init(config: DcaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let mut p = ParamStore::new();
        let (c1, c2, z) = (config.c1, config.c2, LATENT_CHANNELS);
        init_linear(&mut p, &mut init, "dcae.enc.down1", 4, c1);
        init_res(&mut p, &mut init, "dcae.enc.res1", c1);
        init_linear(&mut p, &mut init, "dcae.enc.down2", 4 * c1, c2);
        init_res(&mut p, &mut init, "dcae.enc.res2", c2);
        init_linear(&mut p, &mut init, "dcae.enc.down3", 4 * c2, z);
        init_linear(&mut p, &mut init, "dcae.dec.up3", z, 4 * c2);
        init_res(&mut p, &mut init, "dcae.dec.res2", c2);
        init_linear(&mut p, &mut init, "dcae.dec.up2", c2, 4 * c1);
        init_res(&mut p, &mut init, "dcae.dec.res1", c1);
        init_linear(&mut p, &mut init, "dcae.dec.up1", c1, 4);
        Self { config, params: p }
    }

    fn check_mel(&self, mel: &MelSpectrogram) -> Result<()> {
        let (t, f) = mel.data().shape();
        if t % COMPRESSION != 0 || f % COMPRESSION != 0 || t == 0 {
            return Err(Error::NotPadded { frames: t, bins: f });
        }
        if f != self.config.n_bins {
            return Err(Error::shape(format!(
                "mel has {f} bins, autoencoder expects {}",
                self.config.n_bins
            )));
        }
        Ok(())
    }

    /// Encoder on the tape: `x` is `[t·f × 1]`, result `[(t/8)·(f/8) × 8]`.
    pub fn encode_graph(&self, g: &mut Graph<'_>, p: &Bound, x: Var, t: usize, f: usize) -> Result<Var> {
        let (c1, c2) = (self.config.c1, self.config.c2);
        let h = space_to_depth(g, x, t, f, 1);
        let h = linear(g, p, h, "dcae.enc.down1")?;
        let h = g.silu(h);
        let h = residual(g, p, h, t / 2, f / 2, c1, "dcae.enc.res1")?;
        let h = space_to_depth(g, h, t / 2, f / 2, c1);
        let h = linear(g, p, h, "dcae.enc.down2")?;
        let h = g.silu(h);
        let h = residual(g, p, h, t / 4, f / 4, c2, "dcae.enc.res2")?;
        let h = space_to_depth(g, h, t / 4, f / 4, c2);
        linear(g, p, h, "dcae.enc.down3")
    }

    /// Decoder on the tape: `z` is `[(t/8)·(f/8) × 8]`, result `[t·f × 1]`.
    pub fn decode_graph(&self, g: &mut Graph<'_>, p: &Bound, z: Var, t: usize, f: usize) -> Result<Var> {
        let (c1, c2) = (self.config.c1, self.config.c2);
        let h = linear(g, p, z, "dcae.dec.up3")?;
        let h = depth_to_space(g, h, t / 4, f / 4, c2);
        let h = g.silu(h);
        let h = residual(g, p, h, t / 4, f / 4, c2, "dcae.dec.res2")?;
        let h = linear(g, p, h, "dcae.dec.up2")?;
        let h = depth_to_space(g, h, t / 2, f / 2, c1);
        let h = g.silu(h);
        let h = residual(g, p, h, t / 2, f / 2, c1, "dcae.dec.res1")?;
        let h = linear(g, p, h, "dcae.dec.up1")?;
        Ok(depth_to_space(g, h, t, f, 1))
    }

    pub fn encode(&self, mel: &MelSpectrogram) -> Result<Latent> {
        self.check_mel(mel)?;
        let (t, f) = mel.data().shape();
        let z = self.encode_positions(mel.data().clone().reshape(t * f, 1), t, f)?;
        let out = Latent::from_positions(&z, f / COMPRESSION, t / COMPRESSION, mel.frame_rate_hz() / COMPRESSION as f64)?;
        if !out.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                what: "encoder output".into(),
                step: 0,
            });
        }
        Ok(out)
    }

    /// [`Dcae::encode_graph`] without the tape, computed in f32.
    fn encode_positions(&self, x: Matrix, t: usize, f: usize) -> Result<Matrix> {
        use infer::{linear, residual, space_to_depth};
        let p = &self.params;
        let x = infer::Map::from_matrix(&x);
        let h = linear(p, &space_to_depth(&x, t, f), "dcae.enc.down1", true)?;
        let h = residual(p, h, t / 2, f / 2, "dcae.enc.res1")?;
        let h = linear(p, &space_to_depth(&h, t / 2, f / 2), "dcae.enc.down2", true)?;
        let h = residual(p, h, t / 4, f / 4, "dcae.enc.res2")?;
        let z = linear(p, &space_to_depth(&h, t / 4, f / 4), "dcae.enc.down3", false)?;
        Ok(z.into_matrix((t / 8) * (f / 8), LATENT_CHANNELS))
    }

    /// [`Dcae::decode_graph`] without the tape, computed in f32.
    fn decode_positions(&self, z: &Matrix, t: usize, f: usize) -> Result<Matrix> {
        use infer::{depth_to_space, linear, residual};
        let p = &self.params;
        let z = infer::Map::from_matrix(z);
        let h = depth_to_space(&linear(p, &z, "dcae.dec.up3", false)?, t / 4, f / 4, true);
        let h = residual(p, h, t / 4, f / 4, "dcae.dec.res2")?;
        let h = depth_to_space(&linear(p, &h, "dcae.dec.up2", false)?, t / 2, f / 2, true);
        let h = residual(p, h, t / 2, f / 2, "dcae.dec.res1")?;
        let y = depth_to_space(&linear(p, &h, "dcae.dec.up1", false)?, t, f, false);
        Ok(y.into_matrix(t * f, 1))
    }

    pub fn decode(&self, latent: &Latent) -> Result<MelSpectrogram> {
        if latent.channels() != LATENT_CHANNELS {
            return Err(Error::ChannelCount(latent.channels()));
        }
        if latent.freq() * COMPRESSION != self.config.n_bins {
            return Err(Error::shape(format!(
                "latent freq {} does not match {} mel bins",
                latent.freq(),
                self.config.n_bins
            )));
        }
        let (t, f) = (latent.frames() * COMPRESSION, latent.freq() * COMPRESSION);
        let mel = self.decode_positions(&latent.to_positions(), t, f)?.reshape(t, f);
        Ok(MelSpectrogram::new(mel, latent.latent_rate_hz() * COMPRESSION as f64))
    }

    /// Reconstruction MSE of a batch of padded mels, on the tape.
    pub fn reconstruction_loss(&self, g: &mut Graph<'_>, p: &Bound, mels: &[&MelSpectrogram]) -> Result<Var> {
        let mut terms = Vec::with_capacity(mels.len());
        for mel in mels {
            self.check_mel(mel)?;
            let (t, f) = mel.data().shape();
            let flat = mel.data().clone().reshape(t * f, 1);
            let x = g.constant(flat.clone());
            let z = self.encode_graph(g, p, x, t, f)?;
            let y = self.decode_graph(g, p, z, t, f)?;
            terms.push(g.mse(y, &flat));
        }
        let all = g.concat_rows(&terms);
        Ok(g.mean(all))
    }

    pub fn to_container(&self, c: &mut Container) -> Result<()> {
        for (name, m) in self.params.iter() {
            c.insert_matrix(name, m)?;
        }
        Ok(())
    }

    /// Loads parameters for `config`, checking every shape.
    pub fn from_container(config: DcaeConfig, c: &Container) -> Result<Self> {
        let mut d = Self::init(config, 0);
        let names: Vec<String> = d.params.names().map(str::to_string).collect();
        for name in names {
            let want = d.params.get(&name)?.shape();
            let m = c.matrix_with_shape(&name, want.0, want.1)?;
            d.params.insert(name, m);
        }
        Ok(d)
    }
}

fn init_res(p: &mut ParamStore, init: &mut Init<'_>, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.w"), init.normal(9 * c, c, 0.5 / (9.0 * c as f64).sqrt()));
    p.insert(format!("{prefix}.b"), Matrix::zeros(1, c));
}

/// `x + conv3x3(silu(x))`.
fn residual(
    g: &mut Graph<'_>,
    p: &Bound,
    x: Var,
    h: usize,
    w: usize,
    c: usize,
    prefix: &str,
) -> Result<Var> {
    let a = g.silu(x);
    let cols = im2col3x3(g, a, h, w, c);
    let y = linear(g, p, cols, prefix)?;
    Ok(g.add(x, y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DcaeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Result of [`train_dcae`]: parameters plus the per-step MSE trace.
#[derive(Clone, Debug)]
pub struct DcaeTrainOutput {
    pub model: Dcae,
    pub losses: Vec<f64>,
}

/// Reconstruction-only training with Adam. Batches are drawn with a seeded
/// RNG, so identical inputs give identical parameters.
pub fn train_dcae(
    dataset: &[MelSpectrogram],
    model_config: DcaeConfig,
    config: &DcaeTrainConfig,
) -> Result<DcaeTrainOutput> {
    train_dcae_with_progress(dataset, model_config, config, |_, _| {})
}

pub fn train_dcae_with_progress(
    dataset: &[MelSpectrogram],
    model_config: DcaeConfig,
    config: &DcaeTrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<DcaeTrainOutput> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("dcae training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let padded: Vec<MelSpectrogram> = dataset
        .iter()
        .map(|m| m.pad_to_multiple_of_8())
        .collect::<Result<_>>()?;
    let mut model = Dcae::init(model_config, config.seed);
    let mut adam = AdamState::zeros_like(&model.params);
    let opt = AdamW::new(0.9, 0.999, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0dca_e000);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<&MelSpectrogram> = (0..config.batch_size.min(padded.len()))
            .map(|_| &padded[rng.random_range(0..padded.len())])
            .collect();
        let (loss, grads) = {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, |_| true);
            let l = model.reconstruction_loss(&mut g, &p, &batch)?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("dcae reconstruction loss ({loss})"),
                    step,
                });
            }
            let mut gr = g.backward(l);
            (loss, p.gradients(&model.params, &mut gr))
        };
        opt.step(&mut model.params, &mut adam, &grads, config.lr, |_| true)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(DcaeTrainOutput { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;

    fn micro() -> DcaeConfig {
        DcaeConfig {
            n_bins: 16,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            c1: 2,
            c2: 2,
        }
    }

    fn mel(t: usize, f: usize, seed: u64) -> MelSpectrogram {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram::new(Matrix::from_fn(t, f, |_, _| r.random::<f64>()), DEFAULT_FRAME_RATE_HZ)
    }

    #[test]
    fn shape_law() {
        let d = Dcae::init(DcaeConfig::default(), 1);
        let z = d.encode(&mel(1024, 128, 0)).unwrap();
        assert_eq!(z.dims(), (8, 16, 128));
        assert!((z.latent_rate_hz() - 10.7666).abs() < 1e-3);
        let back = d.decode(&z).unwrap();
        assert_eq!(back.data().shape(), (1024, 128));
    }

    #[test]
    fn direct_passes_match_the_tape() {
        let mut d = Dcae::init(DcaeConfig { n_bins: 32, c1: 3, c2: 5, ..micro() }, 2);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for (_, m) in d.params.iter_mut() {
            m.data_mut().iter_mut().for_each(|v| *v += 0.1 * (r.random::<f64>() - 0.5));
        }
        let (t, f) = (24, 32);
        let x = mel(t, f, 4).data().clone().reshape(t * f, 1);
        let mut g = Graph::new();
        let p = d.params.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let zv = d.encode_graph(&mut g, &p, xv, t, f).unwrap();
        let yv = d.decode_graph(&mut g, &p, zv, t, f).unwrap();
        let z = d.encode_positions(x, t, f).unwrap();
        // f32 arithmetic against the f64 tape.
        assert!(z.max_abs_diff(g.value(zv)) < 1e-5);
        let y = d.decode_positions(&z, t, f).unwrap();
        assert!(y.max_abs_diff(g.value(yv)) < 1e-5);
    }

    #[test]
    fn minimal_input() {
        let cfg = DcaeConfig {
            n_bins: 8,
            ..micro()
        };
        let d = Dcae::init(cfg, 1);
        let z = d.encode(&mel(8, 8, 0)).unwrap();
        assert_eq!(z.dims(), (8, 1, 1));
    }

    #[test]
    fn unpadded_input_is_rejected_with_hint() {
        let d = Dcae::init(micro(), 1);
        let err = d.encode(&mel(12, 16, 0)).unwrap_err();
        assert!(matches!(err, Error::NotPadded { frames: 12, bins: 16 }));
        assert!(err.to_string().contains("pad"));
        let padded = mel(12, 16, 0).pad_to_multiple_of_8().unwrap();
        assert_eq!(padded.frames(), 16);
        assert_eq!(padded.cropped().frames(), 12);
        assert!(d.encode(&padded).is_ok());
    }

    #[test]
    fn zero_latent_decodes_to_finite_bias_image() {
        let d = Dcae::init(micro(), 3);
        let out = d.decode(&Latent::zeros(2, 2, 10.0)).unwrap();
        assert!(out.data().all_finite());
        // Biases start at zero, so the bias image is zero too.
        assert_eq!(out.data().sum_squares(), 0.0);
    }

    #[test]
    fn tokens_roundtrip() {
        let z = Latent::new((0..8 * 3 * 5).map(|v| v as f64).collect(), 3, 5, 10.0).unwrap();
        let tok = z.to_tokens();
        assert_eq!(tok.shape(), (5, 24));
        assert_eq!(tok.get(2, 0), z.get(0, 0, 2));
        assert_eq!(tok.get(2, 3 + 1), z.get(1, 1, 2));
        assert_eq!(Latent::from_tokens(&tok, 3, 10.0).unwrap(), z);
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let d = Dcae::init(micro(), 5);
        assert!(d.params.numel() <= 1000, "{} params", d.params.numel());
        let mels: Vec<MelSpectrogram> = (0..4).map(|s| mel(16, 16, s)).collect();
        let refs: Vec<&MelSpectrogram> = mels.iter().collect();
        let report = check_params(&d.params, |_| true, 1e-5, 1e-3, 1e-7, |g, p| {
            d.reconstruction_loss(g, p, &refs).unwrap()
        });
        assert!(report.passed(), "{:#?}", report.failures);
    }

    #[test]
    fn zero_lr_keeps_initial_parameters() {
        let data = vec![mel(16, 16, 1)];
        let cfg = DcaeTrainConfig {
            steps: 3,
            batch_size: 1,
            lr: 0.0,
            seed: 4,
        };
        let out = train_dcae(&data, micro(), &cfg).unwrap();
        assert_eq!(out.model.params, Dcae::init(micro(), 4).params);
    }

    #[test]
    fn training_is_deterministic() {
        let data: Vec<_> = (0..3).map(|s| mel(16, 16, s)).collect();
        let cfg = DcaeTrainConfig {
            steps: 5,
            batch_size: 2,
            lr: 1e-2,
            seed: 7,
        };
        let a = train_dcae(&data, micro(), &cfg).unwrap();
        let b = train_dcae(&data, micro(), &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train_dcae(&[], micro(), &DcaeTrainConfig::default()).is_err());
    }
}
