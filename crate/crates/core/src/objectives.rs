//! Training objectives: the shifted noise schedule, flow-matching loss with
//! preconditioned clean-latent reconstruction, and representation alignment
//! of an intermediate denoiser layer with two frozen teacher networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::dcae::synth::vocal_band_start;
use crate::dcae::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{self, linear};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;

/// `σ = s·t / (1 + (s − 1)·t)`.
pub fn sigma_from_t(t: f64, shift: f64) -> f64 {
    shift * t / (1.0 + (shift - 1.0) * t)
}

/// Inverse of [`sigma_from_t`].
pub fn t_from_sigma(sigma: f64, shift: f64) -> f64 {
    sigma / (shift - (shift - 1.0) * sigma)
}

/// Logit-normal timestep: `logistic(u)`, `u ~ N(0, 1)`.
pub fn sample_timestep(rng: &mut impl Rng) -> f64 {
    let u: f64 = StandardNormal.sample(rng);
    1.0 / (1.0 + (-u).exp())
}

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(1 − σ)·x0 + σ·z`.
pub fn make_noisy(x0: &Matrix, z: &Matrix, sigma: f64) -> Result<Matrix> {
    check_same(x0, z, "make_noisy")?;
    Ok(x0.zip_map(z, |a, b| (1.0 - sigma) * a + sigma * b))
}

/// Velocity target `z − x0`.
pub fn fm_target(x0: &Matrix, z: &Matrix) -> Result<Matrix> {
    check_same(x0, z, "fm_target")?;
    Ok(z.sub(x0))
}

/// Clean-latent estimate `v·(−σ) + x_noisy`.
pub fn precondition_x0(v: &Matrix, sigma: f64, x_noisy: &Matrix) -> Result<Matrix> {
    check_same(v, x_noisy, "precondition_x0")?;
    Ok(v.zip_map(x_noisy, |a, b| a * -sigma + b))
}

/// Flow-matching loss on the tape: MSE between the preconditioned estimate
/// and `x0`.
pub fn fm_loss_graph(g: &mut Graph<'_>, v: Var, sigma: f64, x_noisy: &Matrix, x0: &Matrix) -> Var {
    let scaled = g.scale(v, -sigma);
    let xn = g.constant(x_noisy.clone());
    let pred = g.add(scaled, xn);
    g.mse(pred, x0)
}

/// The same loss for a velocity already in hand.
pub fn fm_loss_value(v: &Matrix, sigma: f64, x_noisy: &Matrix, x0: &Matrix) -> Result<f64> {
    let pred = precondition_x0(v, sigma, x_noisy)?;
    check_same(&pred, x0, "fm_loss")?;
    Ok(pred.sub(x0).sum_squares() / x0.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ssl: f64,
    pub w_mert: f64,
    pub w_hubert: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssl: 1.0,
            w_mert: 1.0,
            w_hubert: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_ssl, self.w_mert, self.w_hubert].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

/// `L_FM + λ·L_SSL`.
pub fn total_loss(fm: f64, ssl: f64, lambda_ssl: f64) -> f64 {
    fm + lambda_ssl * ssl
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherKind {
    /// Music-wide features: all mel bins, 1024-d at 75 Hz, 5 s chunks.
    MertProxy,
    /// Vocal features: upper half of the mel, 768-d at 50 Hz, 30 s chunks.
    HubertProxy,
}

/// A frozen pseudo-teacher: pooled, time-centred mel frames through a fixed
/// random projection and `tanh`.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub dim: usize,
    pub rate_hz: f64,
    pub chunk_s: f64,
    n_bins: usize,
    weight: Matrix,
}

const TEACHER_GAIN: f64 = 4.0;

impl Teacher {
    pub fn new(kind: TeacherKind, n_bins: usize) -> Self {
        let (dim, rate_hz, chunk_s, seed) = match kind {
            TeacherKind::MertProxy => (1024, 75.0, 5.0, 0x3e27_u64),
            TeacherKind::HubertProxy => (768, 50.0, 30.0, 0x4b5e_u64),
        };
        let band = n_bins - Self::band_lo(kind, n_bins);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let weight = init.normal(band, dim, 1.0 / (band as f64).sqrt());
        Self {
            kind,
            dim,
            rate_hz,
            chunk_s,
            n_bins,
            weight,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TeacherKind::MertProxy => "mert_proxy",
            TeacherKind::HubertProxy => "hubert_proxy",
        }
    }

    fn band_lo(kind: TeacherKind, n_bins: usize) -> usize {
        match kind {
            TeacherKind::MertProxy => 0,
            TeacherKind::HubertProxy => vocal_band_start(n_bins),
        }
    }

    /// Output frames for `duration_s` seconds: each chunk contributes
    /// `round(chunk_length · rate)`.
    pub fn frames_for(&self, duration_s: f64) -> usize {
        self.chunks(duration_s).iter().map(|c| c.2).sum()
    }

    /// `(start_s, length_s, frames)` per chunk.
    fn chunks(&self, duration_s: f64) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        let mut start = 0.0;
        while start < duration_s - 1e-9 {
            let len = self.chunk_s.min(duration_s - start);
            out.push((start, len, (len * self.rate_hz).round() as usize));
            start += self.chunk_s;
        }
        out
    }

    /// `[T_teacher × dim]` features of the mel's unpadded extent.
    pub fn features(&self, mel: &MelSpectrogram) -> Result<Matrix> {
        if mel.n_bins() != self.n_bins {
            return Err(Error::shape(format!(
                "{} expects {} mel bins, got {}",
                self.name(),
                self.n_bins,
                mel.n_bins()
            )));
        }
        let frames = mel.original_frames().min(mel.frames());
        let fr = mel.frame_rate_hz();
        let duration = frames as f64 / fr;
        let lo = Self::band_lo(self.kind, self.n_bins);
        let band = self.n_bins - lo;
        let mut pooled = Vec::new();
        for (start, _, n) in self.chunks(duration) {
            for j in 0..n {
                let centre = start + (j as f64 + 0.5) / self.rate_hz;
                let half = 0.5 / self.rate_hz;
                let a = ((centre - half) * fr).floor().max(0.0) as usize;
                let b = (((centre + half) * fr).ceil() as usize).min(frames).max(a + 1).min(frames);
                let a = a.min(b - 1);
                let mut acc = vec![0.0; band];
                for t in a..b {
                    for (v, x) in acc.iter_mut().zip(&mel.data().row(t)[lo..]) {
                        *v += x;
                    }
                }
                let k = (b - a) as f64;
                pooled.extend(acc.into_iter().map(|v| v / k));
            }
        }
        let rows = pooled.len() / band;
        let mut x = Matrix::new(rows, band, pooled);
        // Remove each bin's mean over time so features describe what changes
        // frame to frame rather than the song's average spectrum.
        for c in 0..band {
            let m = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64;
            for r in 0..rows {
                x.set(r, c, x.get(r, c) - m);
            }
        }
        Ok(x.matmul(&self.weight).scale(TEACHER_GAIN).map(f64::tanh))
    }
}

/// Linear-interpolation matrix `[target × source]`: output `i` samples the
/// source at `i·(S−1)/(T−1)`, so both endpoints are kept.
pub fn interpolation_matrix(source_len: usize, target_len: usize) -> Result<Matrix> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "temporal_align needs non-empty lengths (source {source_len}, target {target_len})"
        )));
    }
    let mut m = Matrix::zeros(target_len, source_len);
    for i in 0..target_len {
        let pos = if target_len == 1 {
            (source_len - 1) as f64 / 2.0
        } else {
            i as f64 * (source_len - 1) as f64 / (target_len - 1) as f64
        };
        let j = (pos.floor() as usize).min(source_len - 1);
        let frac = pos - j as f64;
        if frac == 0.0 || j + 1 >= source_len {
            m.set(i, j, 1.0);
        } else {
            m.set(i, j, 1.0 - frac);
            m.set(i, j + 1, frac);
        }
    }
    Ok(m)
}

pub fn temporal_align(features: &Matrix, target_len: usize) -> Result<Matrix> {
    if features.rows() == target_len {
        return Ok(features.clone());
    }
    Ok(interpolation_matrix(features.rows(), target_len)?.matmul(features))
}

pub const COSINE_EPS: f64 = 1e-8;

/// Mean cosine similarity over rows, skipping rows where either side is
/// (near) zero. Returns a `1×1` node.
pub fn mean_cosine(g: &mut Graph<'_>, a: Var, b: &Matrix) -> Var {
    let (rows, _) = g.shape(a);
    let valid = (0..rows)
        .filter(|&i| {
            let na = g.value(a).row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            na * nb >= COSINE_EPS
        })
        .count();
    let c = g.row_cosine(a, b, COSINE_EPS);
    let s = g.col_sum(c);
    g.scale(s, if valid == 0 { 0.0 } else { 1.0 / valid as f64 })
}

/// Cached teacher targets for one training item.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTargets {
    pub mert: Matrix,
    pub hubert: Matrix,
}

impl TeacherTargets {
    pub fn compute(mel: &MelSpectrogram) -> Result<Self> {
        Ok(Self {
            mert: Teacher::new(TeacherKind::MertProxy, mel.n_bins()).features(mel)?,
            hubert: Teacher::new(TeacherKind::HubertProxy, mel.n_bins()).features(mel)?,
        })
    }
}

pub fn init_ssl_heads(store: &mut ParamStore, d_model: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55e1_0003);
    let mut init = Init::new(&mut rng);
    nn::init_linear(store, &mut init, "repa.mert", d_model, 1024);
    nn::init_linear(store, &mut init, "repa.hubert", d_model, 768);
}

/// Alignment loss for one teacher: `1 − mean cosine` after projecting the
/// tap activation and resampling both sides to the shorter length.
pub fn teacher_loss(g: &mut Graph<'_>, p: &Bound, h: Var, target: &Matrix, head: &str) -> Result<Var> {
    let proj = linear(g, p, h, head)?;
    let (lp, _) = g.shape(proj);
    let common = lp.min(target.rows());
    let proj = if lp == common {
        proj
    } else {
        let m = g.constant(interpolation_matrix(lp, common)?);
        g.matmul(m, proj)
    };
    let target = temporal_align(target, common)?;
    let c = mean_cosine(g, proj, &target);
    let neg = g.scale(c, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// `(w_mert·(1 − c_M) + w_hubert·(1 − c_H)) / 2`.
pub fn ssl_loss(g: &mut Graph<'_>, p: &Bound, h: Var, targets: &TeacherTargets, weights: &LossWeights) -> Result<Var> {
    let m = teacher_loss(g, p, h, &targets.mert, "repa.mert")?;
    let hb = teacher_loss(g, p, h, &targets.hubert, "repa.hubert")?;
    let m = g.scale(m, weights.w_mert / 2.0);
    let hb = g.scale(hb, weights.w_hubert / 2.0);
    Ok(g.add(m, hb))
}
