//! Deterministic synthetic songs.
//!
//! The lower half of the mel axis carries an "accompaniment": a harmonic
//! stack whose fundamental is set by the style tag, pulsing at a
//! style-dependent tempo. The upper half is the "vocal" band: every sung
//! lyric token produces one burst in its own slot, with formants determined
//! by the token byte and the speaker. Both are easy to condition on and easy
//! to measure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{frames_for_duration, MelSpectrogram, DEFAULT_FRAME_RATE_HZ, DEFAULT_N_BINS};
use crate::conditioning::lyrics::LyricTokens;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Style vocabulary; `SongSpec::tag_id` indexes it.
pub const STYLES: [&str; 8] = [
    "pop", "rock", "jazz", "metal", "folk", "edm", "blues", "ambient",
];

/// Mel frames per lyric slot; lyric token at sequence position `p` sings in
/// frames `[p·SLOT, p·SLOT + BURST)`.
pub const SLOT_FRAMES: usize = 16;
pub const BURST_FRAMES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct SongSpec {
    pub duration_s: f64,
    pub tag_id: usize,
    pub lyric_tokens: LyricTokens,
    pub speaker_id: Option<u32>,
    pub seed: u64,
}

impl SongSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "duration must be positive, got {}",
                self.duration_s
            )));
        }
        if self.tag_id >= STYLES.len() {
            return Err(Error::InvalidArgument(format!(
                "tag id {} outside the {}-style vocabulary",
                self.tag_id,
                STYLES.len()
            )));
        }
        Ok(())
    }

    /// Prompt text for the text encoder: the style name, plus
    /// "instrumental" when nothing is sung.
    pub fn tags(&self) -> String {
        if self.lyric_tokens.is_instrumental() {
            format!("{}, instrumental", STYLES[self.tag_id])
        } else {
            STYLES[self.tag_id].to_string()
        }
    }
}

/// Frames `[start, end)` of each sung burst, in lyric order.
pub fn burst_windows(tokens: &LyricTokens) -> Vec<(usize, usize)> {
    tokens
        .sung_positions()
        .into_iter()
        .map(|p| (p * SLOT_FRAMES, p * SLOT_FRAMES + BURST_FRAMES))
        .collect()
}

/// First vocal-band bin for a mel with `n_bins` bins.
pub fn vocal_band_start(n_bins: usize) -> usize {
    n_bins / 2
}

fn gaussian(x: f64, center: f64, width: f64) -> f64 {
    let d = (x - center) / width;
    (-0.5 * d * d).exp()
}

/// Formant centre (in bins) for a sung byte and speaker.
pub fn formant_center(byte: u32, speaker: u32, n_bins: usize) -> f64 {
    let lo = vocal_band_start(n_bins) as f64;
    let span = (n_bins / 2) as f64;
    let frac = ((byte as u64 * 37 + speaker as u64 * 11) % 97) as f64 / 97.0;
    lo + span * (0.1 + 0.65 * frac)
}

pub fn synth_mel(spec: &SongSpec) -> Result<MelSpectrogram> {
    synth_mel_with(spec, DEFAULT_N_BINS, DEFAULT_FRAME_RATE_HZ)
}

pub fn synth_mel_with(spec: &SongSpec, n_bins: usize, frame_rate_hz: f64) -> Result<MelSpectrogram> {
    spec.validate()?;
    if n_bins < 8 || n_bins % 8 != 0 {
        return Err(Error::InvalidArgument(format!(
            "n_bins must be a positive multiple of 8, got {n_bins}"
        )));
    }
    let frames = frames_for_duration(spec.duration_s, frame_rate_hz);
    let windows = burst_windows(&spec.lyric_tokens);
    if let Some(&(_, end)) = windows.last() {
        let needed = end.div_ceil(SLOT_FRAMES) * SLOT_FRAMES;
        if needed > frames {
            return Err(Error::SongTooShort {
                duration_s: spec.duration_s,
                frames,
                tokens: windows.len(),
                needed,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let period = SLOT_FRAMES * (2 + spec.tag_id % 3);
    let phase = rng.random_range(0..period);
    let gain = 0.8 + 0.2 * rng.random::<f64>();
    let scale = n_bins as f64 / 128.0;
    let half = vocal_band_start(n_bins) as f64;

    // Accompaniment spectrum (time-invariant shape).
    let f0 = (3.0 + 2.0 * spec.tag_id as f64) * scale;
    let mut accomp = vec![0.0; n_bins];
    for (b, a) in accomp.iter_mut().enumerate() {
        let x = b as f64;
        let mut v = 0.0;
        let mut h = 1.0;
        while h * f0 < half {
            v += 0.5 / h * gaussian(x, h * f0, 0.9 * scale.max(0.5));
            h += 1.0;
        }
        *a = v;
    }

    let speaker = spec.speaker_id.unwrap_or(0);
    let ids = spec.lyric_tokens.ids();
    let sung: Vec<(usize, u32)> = spec
        .lyric_tokens
        .sung_positions()
        .into_iter()
        .map(|p| (p, ids[p]))
        .collect();

    let mut data = Matrix::zeros(frames, n_bins);
    for t in 0..frames {
        let beat = ((std::f64::consts::PI * (t + phase) as f64) / period as f64).cos();
        let env = gain * (0.55 + 0.45 * beat * beat);
        let row = data.row_mut(t);
        for (v, a) in row.iter_mut().zip(&accomp) {
            *v = 0.02 + env * a;
        }
    }
    for (&(start, end), &(_, byte)) in windows.iter().zip(&sung) {
        let c = formant_center(byte, speaker, n_bins);
        let width = 1.5 * scale.max(0.5);
        let second = (c + 6.0 * scale).min(n_bins as f64 - 1.0);
        for t in start..end.min(frames) {
            let env = (std::f64::consts::PI * (t - start) as f64 / BURST_FRAMES as f64).sin();
            let row = data.row_mut(t);
            for (b, v) in row.iter_mut().enumerate().skip(n_bins / 2) {
                let x = b as f64;
                *v += env * (0.9 * gaussian(x, c, width) + 0.5 * gaussian(x, second, width));
            }
        }
    }
    for v in data.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(MelSpectrogram::new(data, frame_rate_hz))
}
