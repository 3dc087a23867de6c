//! Evaluation harness: generation from prompts, the lyric-burst
//! localization score, and attention timing.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::lyrics::LyricTokens;
use crate::conditioning::ConditionBundle;
use crate::data::Song;
use crate::dcae::synth::{burst_windows, vocal_band_start, BURST_FRAMES, SLOT_FRAMES};
use crate::dcae::{Dcae, Latent, MelSpectrogram, COMPRESSION};
use crate::dit::attention::{linear_attention_plain, softmax_attention_plain};
use crate::error::{Error, Result};
use crate::model::MusicModel;
use crate::pipeline::LatentStats;
use crate::sampler::{ode_sample, SamplerConfig};
use crate::tensor::Matrix;

/// A trained generator: autoencoder, denoiser and the latent scaling
/// between them.
#[derive(Clone, Debug)]
pub struct Generator {
    pub dcae: Dcae,
    pub model: MusicModel,
    pub stats: LatentStats,
}

impl Generator {
    pub fn latent_frames(&self, mel_frames: usize) -> usize {
        mel_frames.div_ceil(COMPRESSION)
    }

    /// Latent tokens back to a mel.
    pub fn decode_tokens(&self, tokens: &Matrix) -> Result<MelSpectrogram> {
        let raw = self.stats.denormalize(tokens);
        let latent = Latent::from_tokens(&raw, self.dcae.config.latent_freq(), self.dcae.config.latent_rate_hz())?;
        self.dcae.decode(&latent)
    }

    /// Normalized tokens for a mel.
    pub fn encode_mel(&self, mel: &MelSpectrogram) -> Result<Matrix> {
        Ok(self.stats.normalize(&self.dcae.encode(&mel.pad_to_multiple_of_8()?)?.to_tokens()))
    }

    /// Samples `latent_frames` frames of normalized tokens for `bundle`.
    pub fn sample_tokens(&self, bundle: &ConditionBundle, latent_frames: usize, config: &SamplerConfig) -> Result<Matrix> {
        let cond = self.model.prepare(bundle)?;
        let uncond = self.model.prepare_unconditional()?;
        let shape = (latent_frames, self.model.dit.config.token_width);
        ode_sample(&self.model, shape, &cond, &uncond, config)
    }

    pub fn sample_mel(&self, bundle: &ConditionBundle, latent_frames: usize, config: &SamplerConfig) -> Result<MelSpectrogram> {
        self.decode_tokens(&self.sample_tokens(bundle, latent_frames, config)?)
    }
}

/// 1 inside each sung burst, 0 elsewhere.
pub fn burst_mask(tokens: &LyricTokens, frames: usize) -> Vec<f64> {
    let mut m = vec![0.0; frames];
    for (s, e) in burst_windows(tokens) {
        m[s.min(frames)..e.min(frames)].iter_mut().for_each(|v| *v = 1.0);
    }
    m
}

/// Mean magnitude of the vocal band per frame.
pub fn vocal_envelope(mel: &MelSpectrogram) -> Vec<f64> {
    let lo = vocal_band_start(mel.n_bins());
    let d = mel.data();
    (0..mel.frames())
        .map(|t| d.row(t)[lo..].iter().sum::<f64>() / (d.cols() - lo) as f64)
        .collect()
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Lyric slots (after BOS) whose burst window fits in `frames`.
fn slots(frames: usize) -> std::ops::Range<usize> {
    1..(frames + SLOT_FRAMES - BURST_FRAMES) / SLOT_FRAMES
}

/// Per slot: mean vocal envelope over the slot's burst window, and whether
/// the lyrics sing there.
pub fn slot_profile(mel: &MelSpectrogram, tokens: &LyricTokens) -> (Vec<f64>, Vec<f64>) {
    let env = vocal_envelope(mel);
    let sung = tokens.sung_positions();
    slots(mel.frames())
        .map(|p| {
            let w = &env[p * SLOT_FRAMES..p * SLOT_FRAMES + BURST_FRAMES];
            (w.iter().sum::<f64>() / w.len() as f64, sung.contains(&p) as u8 as f64)
        })
        .unzip()
}

/// How well vocal energy in `mel` follows where `tokens` are sung:
/// correlation, over lyric slots, between vocal energy in the slot and
/// whether the slot holds a sung token. A fixed rhythm that ignores the
/// lyrics scores about 0.
pub fn localization_score(mel: &MelSpectrogram, tokens: &LyricTokens) -> f64 {
    let (energy, sung) = slot_profile(mel, tokens);
    pearson(&energy, &sung)
}

/// Frame-level correlation of the vocal envelope with the burst mask. It
/// also rewards the shared slot rhythm, so it is reported alongside
/// [`localization_score`] rather than used for decisions.
pub fn envelope_correlation(mel: &MelSpectrogram, tokens: &LyricTokens) -> f64 {
    pearson(&vocal_envelope(mel), &burst_mask(tokens, mel.frames()))
}

/// Evaluation prompts: the first `n` songs, in corpus order, with both sung
/// and silent slots (the score is undefined otherwise).
pub fn eval_prompts(songs: &[Song], n: usize) -> Vec<&Song> {
    songs
        .iter()
        .filter(|s| {
            let Ok(t) = s.tokens() else { return false };
            let sung = t.sung_positions();
            let r = slots(s.mel.frames());
            let k = r.clone().filter(|p| sung.contains(p)).count();
            s.speaker.is_some() && k > 0 && k < r.len()
        })
        .take(n)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub per_prompt: Vec<f64>,
    pub mean: f64,
    /// Mean [`envelope_correlation`] over the same samples.
    pub envelope_mean: f64,
}

/// Generates each prompt at its own length (sampler seed offset by index)
/// and averages the localization score.
pub fn evaluate_localization(generator: &Generator, prompts: &[&Song], config: &SamplerConfig) -> Result<LocalizationReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no evaluation prompts".into()));
    }
    let mut per_prompt = Vec::with_capacity(prompts.len());
    let mut envelope = 0.0;
    for (i, song) in prompts.iter().enumerate() {
        let cfg = SamplerConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let tokens = song.tokens()?;
        let bundle = song.bundle()?;
        let mel = generator.sample_mel(&bundle, generator.latent_frames(song.mel.frames()), &cfg)?;
        per_prompt.push(localization_score(&mel, &tokens));
        envelope += envelope_correlation(&mel, &tokens);
    }
    let n = per_prompt.len() as f64;
    Ok(LocalizationReport {
        mean: per_prompt.iter().sum::<f64>() / n,
        envelope_mean: envelope / n,
        per_prompt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Linear,
    Softmax,
}

/// Median wall-clock seconds of one single-head attention call over `len`
/// tokens of width `dim`.
pub fn time_attention(kind: AttentionKind, len: usize, dim: usize, reps: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = || Matrix::from_fn(len, dim, |_, _| StandardNormal.sample(&mut rng));
    let (q, k, v) = (m(), m(), m());
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let start = Instant::now();
            let out = match kind {
                AttentionKind::Linear => linear_attention_plain(&q, &k, &v),
                AttentionKind::Softmax => softmax_attention_plain(&q, &k, &v),
            };
            std::hint::black_box(out);
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingReport {
    pub linear_ratio: f64,
    pub softmax_ratio: f64,
}

/// Time at `2·len` over time at `len` for both kernels.
pub fn attention_scaling(len: usize, dim: usize, reps: usize) -> ScalingReport {
    let ratio = |kind| time_attention(kind, 2 * len, dim, reps, 2) / time_attention(kind, len, dim, reps, 1);
    ScalingReport {
        linear_ratio: ratio(AttentionKind::Linear),
        softmax_ratio: ratio(AttentionKind::Softmax),
    }
}
