//! Self-check suites run by `melflow eval`. Each returns named checks with
//! the measured value next to the threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::{apply_condition_dropout, ConditionBundle, DropoutRates};
use crate::data::Song;
use crate::dcae::{frames_for_duration, synth_mel_with, Dcae, Latent, SongSpec};
use crate::error::Result;
use crate::eval::{attention_scaling, evaluate_localization, eval_prompts, Generator};
use crate::objectives::{fm_loss_value, fm_target, make_noisy, precondition_x0, sample_timestep, sigma_from_t, t_from_sigma};
use crate::sampler::{flow_edit, initial_noise, ode_sample, ode_sample_from, repaint, variation_noise, EditMask, SamplerConfig, VelocityField};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// 11.88 s encodes to 128 latent frames; 2584 latent frames decode to
/// about 240 s.
pub fn geometry(dcae: &Dcae) -> Result<Vec<Check>> {
    let cfg = dcae.config;
    let spec = SongSpec {
        duration_s: 11.88,
        tag_id: 0,
        lyric_tokens: crate::conditioning::lyrics::tokenize_lyrics("la")?,
        speaker_id: Some(0),
        seed: 1,
    };
    let mel = synth_mel_with(&spec, cfg.n_bins, cfg.frame_rate_hz)?;
    let frames = dcae.encode(&mel.pad_to_multiple_of_8()?)?.frames();
    let decoded = dcae.decode(&Latent::zeros(cfg.latent_freq(), crate::dit::LATENT_BUDGET, cfg.latent_rate_hz()))?;
    let expected = (240.0 * cfg.frame_rate_hz).round() as i64;
    let off = decoded.frames() as i64 - expected;
    Ok(vec![
        Check::new("encode 11.88 s", frames == 128, format!("{frames} latent frames (want 128)")),
        Check::new(
            "decode 2584 frames",
            off.abs() <= 1,
            format!("{} mel frames = {:.3} s (want {expected} ± 1)", decoded.frames(), decoded.duration_s()),
        ),
    ])
}

struct OracleField {
    x0: Matrix,
    shift: f64,
}

impl VelocityField for OracleField {
    type Cond = ();
    fn velocity(&self, x: &Matrix, t: f64, _: &()) -> Result<Matrix> {
        let s = sigma_from_t(t, self.shift);
        Ok(x.sub(&self.x0).scale(1.0 / s))
    }
}

/// Preconditioning identity, zero-model loss and oracle exactness.
pub fn flow_identities(seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let (mut worst_id, mut worst_zero, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64);
    let mut sigmas = ChaCha8Rng::seed_from_u64(seed ^ 0x5e);
    for _ in 0..1000 {
        let (x0, z) = (randn(4, 6), randn(4, 6));
        let sigma: f64 = sigmas.random_range(1e-3..1.0);
        let xn = make_noisy(&x0, &z, sigma)?;
        let v = fm_target(&x0, &z)?;
        worst_id = worst_id.max(precondition_x0(&v, sigma, &xn)?.max_abs_diff(&x0));
        let zero = fm_loss_value(&Matrix::zeros(4, 6), sigma, &xn, &x0)?;
        let want = sigma * sigma * z.sub(&x0).sum_squares() / x0.len() as f64;
        worst_zero = worst_zero.max((zero - want).abs());
        worst_oracle = worst_oracle.max(fm_loss_value(&v, sigma, &xn, &x0)?.abs());
    }
    let x0 = randn(5, 3);
    let field = OracleField { x0: x0.clone(), shift: 3.0 };
    let cfg = SamplerConfig {
        steps: 1,
        guidance_scale: 1.0,
        shift: 3.0,
        seed,
    };
    let one = ode_sample(&field, (5, 3), &(), &(), &cfg)?.max_abs_diff(&x0);
    Ok(vec![
        Check::new("preconditioning identity", worst_id <= 1e-6, format!("max error {worst_id:.2e} over 1000 draws")),
        Check::new("zero-model loss", worst_zero <= 1e-6, format!("max error {worst_zero:.2e}")),
        Check::new("oracle loss", worst_oracle <= 1e-6, format!("max loss {worst_oracle:.2e}")),
        Check::new("oracle one-step sample", one <= 1e-12, format!("max error {one:.2e}")),
    ])
}

/// Exactness of repaint, variation and flow editing on any velocity field.
pub fn controls<F: VelocityField>(field: &F, shape: (usize, usize), cond: &F::Cond, uncond: &F::Cond, cfg: &SamplerConfig) -> Result<Vec<Check>> {
    let base = ode_sample(field, shape, cond, uncond, cfg)?;
    let x_ref = initial_noise(cfg.seed ^ 0xabc, shape.0, shape.1);
    let mut keep = EditMask::all_keep(shape.0);
    for k in keep.keep.iter_mut().skip(shape.0 / 4).take(shape.0 / 2) {
        *k = false;
    }
    let painted = repaint(field, &x_ref, &keep, cond, uncond, cfg)?;
    let mut dev = 0.0f64;
    for (r, &k) in keep.keep.iter().enumerate() {
        if k {
            for (a, b) in painted.row(r).iter().zip(x_ref.row(r)) {
                dev = dev.max((a - b).abs());
            }
        }
    }
    let regen = repaint(field, &x_ref, &EditMask::all_regenerate(shape.0), cond, uncond, cfg)?;
    let z = initial_noise(cfg.seed, shape.0, shape.1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a);
    let varied = ode_sample_from(field, variation_noise(&z, 0.0, &mut rng)?, cond, uncond, cfg)?;
    let edited = flow_edit(field, &x_ref, cond, cond, uncond, cfg)?;
    Ok(vec![
        Check::new("repaint keep region", dev == 0.0, format!("max deviation {dev:e}")),
        Check::new("all-regenerate repaint", regen == base, format!("bit-equal to plain sampling: {}", regen == base)),
        Check::new("variation ratio 0", varied == base, format!("bit-equal to baseline: {}", varied == base)),
        Check::new("flow edit, same conditions", edited == x_ref, format!("bit-equal to input: {}", edited == x_ref)),
    ])
}

/// Two-sided 99% normal-approximation binomial interval half-width.
pub fn binomial_half_width_99(p: f64, n: usize) -> f64 {
    2.575_829_303_549 * (p * (1.0 - p) / n as f64).sqrt()
}

/// `P(σ ≤ s)` under logit-normal t pushed through the shift.
pub fn sigma_cdf(s: f64, shift: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let t = t_from_sigma(s, shift);
    let u = (t / (1.0 - t)).ln();
    0.5 * (1.0 + libm::erf(u / std::f64::consts::SQRT_2))
}

pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

/// Condition-dropout rates and the timestep distribution.
pub fn statistics(seed: u64) -> Result<Vec<Check>> {
    let rates = DropoutRates::default();
    let bundle = ConditionBundle::new("pop", crate::conditioning::lyrics::tokenize_lyrics("la")?, Some(0))?;
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let f = apply_condition_dropout(&bundle, &mut rng, &rates).dropped;
        for (c, hit) in counts.iter_mut().zip([f.global, f.text, f.lyric, f.speaker]) {
            *c += hit as usize;
        }
    }
    let mut out = Vec::new();
    for ((name, p), c) in [("global", rates.global), ("text", rates.text), ("lyric", rates.lyric), ("speaker", rates.speaker)]
        .into_iter()
        .zip(counts)
    {
        let rate = c as f64 / n as f64;
        let hw = binomial_half_width_99(p, n);
        out.push(Check::new(
            &format!("{name} dropout rate"),
            (rate - p).abs() <= hw,
            format!("{rate:.4} (want {p} ± {hw:.4})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1);
    let mut sigmas: Vec<f64> = (0..100_000).map(|_| sigma_from_t(sample_timestep(&mut rng), 3.0)).collect();
    let ks = ks_statistic(&mut sigmas, |s| sigma_cdf(s, 3.0));
    out.push(Check::new("sigma distribution", ks < 0.01, format!("KS {ks:.5} over 100000 draws (want < 0.01)")));
    Ok(out)
}

/// Linear attention must roughly double from 2048 to 4096 tokens while the
/// quadratic reference roughly quadruples.
pub fn attention(reps: usize) -> Vec<Check> {
    let r = attention_scaling(2048, 32, reps);
    vec![
        Check::new("linear attention 4096/2048", r.linear_ratio <= 3.0, format!("{:.2}x (want ≤ 3)", r.linear_ratio)),
        Check::new("quadratic attention 4096/2048", r.softmax_ratio > 3.4, format!("{:.2}x (want > 3.4)", r.softmax_ratio)),
    ]
}

/// Mean lyric-burst localization over the first `n` evaluation prompts.
/// Passes when at least `threshold`.
pub fn localization(generator: &Generator, songs: &[Song], n: usize, cfg: &SamplerConfig, threshold: f64) -> Result<Vec<Check>> {
    let r = evaluate_localization(generator, &eval_prompts(songs, n), cfg)?;
    Ok(vec![Check::new(
        "lyric-burst localization",
        r.mean >= threshold,
        format!(
            "{:.4} over {} prompts (want ≥ {threshold}); envelope correlation {:.4}",
            r.mean,
            r.per_prompt.len(),
            r.envelope_mean
        ),
    )])
}

/// Mel frames for `duration_s` at the generator's rate.
pub fn mel_frames(generator: &Generator, duration_s: f64) -> usize {
    frames_for_duration(duration_s, generator.dcae.config.frame_rate_hz)
}
