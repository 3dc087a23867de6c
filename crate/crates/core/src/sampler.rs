//! ODE sampling of a learned velocity field, with classifier-free guidance
//! and the editing controls built on the same integrator: variations,
//! mask-constrained repainting and two-branch flow editing.
//!
//! States are latent token matrices `[T_lat × width]`; σ runs from 1 (pure
//! noise) down to 0 on the shifted grid `σ_i = sigma_from_t(1 − i/steps)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::objectives::{make_noisy, sigma_from_t};
use crate::tensor::Matrix;

/// Anything that predicts a velocity for state `x` at time `t` under a
/// condition.
pub trait VelocityField {
    type Cond;
    fn velocity(&self, x: &Matrix, t: f64, cond: &Self::Cond) -> Result<Matrix>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub shift: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance_scale: 3.0,
            shift: 3.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("sampler steps must be at least 1".into()));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be finite and ≥ 0, got {}",
                self.guidance_scale
            )));
        }
        if !(self.shift > 0.0 && self.shift.is_finite()) {
            return Err(Error::InvalidArgument(format!("shift must be > 0, got {}", self.shift)));
        }
        Ok(())
    }

    /// `(t_i, σ_i)` for `i = 0..=steps`, descending from `(1, 1)` to `(0, 0)`.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        (0..=self.steps)
            .map(|i| {
                let t = 1.0 - i as f64 / self.steps as f64;
                (t, sigma_from_t(t, self.shift))
            })
            .collect()
    }
}

/// `v_u + s·(v_c − v_u)`; scales 0 and 1 return the corresponding input.
pub fn cfg_velocity(v_cond: &Matrix, v_uncond: &Matrix, scale: f64) -> Result<Matrix> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::shape("cfg_velocity: branch shapes differ"));
    }
    Ok(if scale == 1.0 {
        v_cond.clone()
    } else if scale == 0.0 {
        v_uncond.clone()
    } else {
        v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
    })
}

fn guided<F: VelocityField>(field: &F, x: &Matrix, t: f64, cond: &F::Cond, uncond: &F::Cond, scale: f64) -> Result<Matrix> {
    if scale == 1.0 {
        return field.velocity(x, t, cond);
    }
    if scale == 0.0 {
        return field.velocity(x, t, uncond);
    }
    let vc = field.velocity(x, t, cond)?;
    let vu = field.velocity(x, t, uncond)?;
    cfg_velocity(&vc, &vu, scale)
}

/// Standard normal noise for a run, a pure function of `seed`.
pub fn initial_noise(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// `cos(rπ/2)·z_orig + sin(rπ/2)·z_new` with fresh `z_new` from `rng`.
pub fn variation_noise(z_orig: &Matrix, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("variation ratio {ratio} outside [0, 1]")));
    }
    if ratio == 0.0 {
        return Ok(z_orig.clone());
    }
    let a = ratio * std::f64::consts::FRAC_PI_2;
    let (c, s) = if ratio == 1.0 { (0.0, 1.0) } else { (a.cos(), a.sin()) };
    Ok(Matrix::from_fn(z_orig.rows(), z_orig.cols(), |r, k| {
        let fresh: f64 = StandardNormal.sample(rng);
        c * z_orig.get(r, k) + s * fresh
    }))
}

fn check_finite(x: &Matrix, step: usize) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::NonFinite {
            what: "sampler state".into(),
            step,
        });
    }
    Ok(())
}

/// Euler integration from `x_init` at σ = 1. `after_step(i, σ_{i+1}, x)`
/// runs after every update.
fn integrate<F: VelocityField>(
    field: &F,
    x_init: Matrix,
    cond: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
    mut after_step: impl FnMut(usize, f64, &mut Matrix),
) -> Result<Matrix> {
    config.validate()?;
    let grid = config.grid();
    let mut x = x_init;
    for i in 0..config.steps {
        let (t, s) = grid[i];
        let (_, s_next) = grid[i + 1];
        let v = guided(field, &x, t, cond, uncond, config.guidance_scale)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("velocity shape differs from state"));
        }
        x.axpy(s_next - s, &v);
        after_step(i, s_next, &mut x);
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Integrates from the given starting noise.
pub fn ode_sample_from<F: VelocityField>(
    field: &F,
    z: Matrix,
    cond: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
) -> Result<Matrix> {
    integrate(field, z, cond, uncond, config, |_, _, _| {})
}

/// Integrates from `initial_noise(config.seed)`.
pub fn ode_sample<F: VelocityField>(
    field: &F,
    shape: (usize, usize),
    cond: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
) -> Result<Matrix> {
    let z = initial_noise(config.seed, shape.0, shape.1);
    ode_sample_from(field, z, cond, uncond, config)
}

/// Runs the Euler grid backwards from a clean latent to σ = 1, giving the
/// noise that `ode_sample_from` would map (approximately) back to `x0`.
pub fn ode_invert<F: VelocityField>(
    field: &F,
    x0: &Matrix,
    cond: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
) -> Result<Matrix> {
    config.validate()?;
    let grid = config.grid();
    let mut x = x0.clone();
    for i in (0..config.steps).rev() {
        let (t, s) = grid[i + 1];
        let (_, s_prev) = grid[i];
        let v = guided(field, &x, t, cond, uncond, config.guidance_scale)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("velocity shape differs from state"));
        }
        x.axpy(s_prev - s, &v);
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Per-frame repaint mask: `keep[i]` preserves latent frame `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditMask {
    pub keep: Vec<bool>,
}

impl EditMask {
    pub fn all_keep(frames: usize) -> Self {
        Self { keep: vec![true; frames] }
    }

    pub fn all_regenerate(frames: usize) -> Self {
        Self { keep: vec![false; frames] }
    }

    /// Regenerates `[floor(start·rate), ceil(end·rate))`, keeps the rest.
    pub fn from_seconds(frames: usize, latent_rate_hz: f64, start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s >= 0.0 && end_s > start_s && end_s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "mask range {start_s}..{end_s} must satisfy 0 ≤ start < end"
            )));
        }
        let a = (start_s * latent_rate_hz).floor() as usize;
        let b = ((end_s * latent_rate_hz).ceil() as usize).min(frames);
        if a >= frames {
            return Err(Error::InvalidArgument(format!(
                "mask start {start_s} s is past the end of the latent ({frames} frames)"
            )));
        }
        Ok(Self {
            keep: (0..frames).map(|i| !(a..b).contains(&i)).collect(),
        })
    }

    /// Parses `"start..end"` in seconds.
    pub fn parse(spec: &str, frames: usize, latent_rate_hz: f64) -> Result<Self> {
        let (a, b) = spec
            .split_once("..")
            .ok_or_else(|| Error::InvalidArgument(format!("mask spec {spec:?} is not start..end")))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("mask spec {spec:?}: {s:?} is not a number")))
        };
        Self::from_seconds(frames, latent_rate_hz, num(a)?, num(b)?)
    }
}

fn overwrite_keep(x: &mut Matrix, x_ref: &Matrix, z: &Matrix, sigma: f64, keep: &[bool]) {
    for (r, &k) in keep.iter().enumerate() {
        if !k {
            continue;
        }
        let (a, b) = (x_ref.row(r), z.row(r));
        let row = x.row_mut(r);
        if sigma == 0.0 {
            row.copy_from_slice(a);
        } else {
            for ((v, &x0), &zz) in row.iter_mut().zip(a).zip(b) {
                *v = (1.0 - sigma) * x0 + sigma * zz;
            }
        }
    }
}

/// Regenerates the frames outside `mask.keep`; kept frames follow the
/// noised reference (fixed noise for the whole run) and end at `x_ref`
/// exactly.
pub fn repaint<F: VelocityField>(
    field: &F,
    x_ref: &Matrix,
    mask: &EditMask,
    cond: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
) -> Result<Matrix> {
    if mask.keep.len() != x_ref.rows() {
        return Err(Error::shape(format!(
            "mask has {} frames, latent has {}",
            mask.keep.len(),
            x_ref.rows()
        )));
    }
    let z = initial_noise(config.seed, x_ref.rows(), x_ref.cols());
    let mut x = z.clone();
    overwrite_keep(&mut x, x_ref, &z, 1.0, &mask.keep);
    integrate(field, x, cond, uncond, config, |_, s, x| overwrite_keep(x, x_ref, &z, s, &mask.keep))
}

/// Inversion-free edit of `x_src` from `cond_src` toward `cond_tgt`.
///
/// At each grid point a fresh noise draw (shared by both branches) noises
/// the source; the target branch sits at the same noise plus the current
/// edit offset. The target state moves by the step-scaled difference of the
/// two guided velocities, so identical conditions leave it unchanged.
pub fn flow_edit<F: VelocityField>(
    field: &F,
    x_src: &Matrix,
    cond_src: &F::Cond,
    cond_tgt: &F::Cond,
    uncond: &F::Cond,
    config: &SamplerConfig,
) -> Result<Matrix> {
    config.validate()?;
    let grid = config.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x_tgt = x_src.clone();
    for i in 0..config.steps {
        let (t, s) = grid[i];
        let (_, s_next) = grid[i + 1];
        let z = Matrix::from_fn(x_src.rows(), x_src.cols(), |_, _| StandardNormal.sample(&mut rng));
        let src_noisy = make_noisy(x_src, &z, s)?;
        let tgt_noisy = src_noisy.add(&x_tgt.sub(x_src));
        let v_src = guided(field, &src_noisy, t, cond_src, uncond, config.guidance_scale)?;
        let v_tgt = guided(field, &tgt_noisy, t, cond_tgt, uncond, config.guidance_scale)?;
        if v_src.shape() != x_src.shape() || v_tgt.shape() != x_src.shape() {
            return Err(Error::shape("velocity shape differs from latent"));
        }
        x_tgt.axpy(s_next - s, &v_tgt.sub(&v_src));
        check_finite(&x_tgt, i)?;
    }
    Ok(x_tgt)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The exact field of straight paths toward a known `x0`.
    struct Oracle {
        x0: Matrix,
    }

    impl VelocityField for Oracle {
        type Cond = ();
        fn velocity(&self, x: &Matrix, t: f64, _: &()) -> Result<Matrix> {
            let s = sigma_from_t(t, 3.0);
            Ok(x.sub(&self.x0).scale(1.0 / s))
        }
    }

    /// Condition-dependent toy field: pulls toward `cond`.
    struct Toward;

    impl VelocityField for Toward {
        type Cond = Matrix;
        fn velocity(&self, x: &Matrix, t: f64, cond: &Matrix) -> Result<Matrix> {
            Ok(x.sub(cond).scale(1.0 + t))
        }
    }

    fn randn(r: usize, c: usize, seed: u64) -> Matrix {
        initial_noise(seed, r, c)
    }

    fn cfg(steps: usize, scale: f64) -> SamplerConfig {
        SamplerConfig {
            steps,
            guidance_scale: scale,
            shift: 3.0,
            seed: 42,
        }
    }

    #[test]
    fn grid_endpoints() {
        let g = cfg(30, 1.0).grid();
        assert_eq!(g[0], (1.0, 1.0));
        assert_eq!(g[30], (0.0, 0.0));
        assert!(g.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn oracle_reaches_x0() {
        let x0 = randn(4, 6, 1);
        let o = Oracle { x0: x0.clone() };
        for steps in [1, 2, 7, 30] {
            let out = ode_sample(&o, (4, 6), &(), &(), &cfg(steps, 1.0)).unwrap();
            assert!(out.max_abs_diff(&x0) < 1e-12, "steps {steps}");
        }
    }

    #[test]
    fn single_step_is_preconditioned_estimate() {
        let f = Toward;
        let c = randn(3, 2, 2);
        let config = cfg(1, 1.0);
        let z = initial_noise(config.seed, 3, 2);
        let out = ode_sample(&f, (3, 2), &c, &c, &config).unwrap();
        let v = f.velocity(&z, 1.0, &c).unwrap();
        let est = crate::objectives::precondition_x0(&v, 1.0, &z).unwrap();
        assert_eq!(out, est);
    }

    #[test]
    fn cfg_examples() {
        let c = Matrix::filled(2, 2, 1.0);
        let u = Matrix::zeros(2, 2);
        assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_velocity(&c, &u, 2.0).unwrap(), Matrix::filled(2, 2, 2.0));
    }

    #[test]
    fn deterministic_given_seed() {
        let c = randn(5, 3, 3);
        let u = randn(5, 3, 4);
        let a = ode_sample(&Toward, (5, 3), &c, &u, &cfg(10, 3.0)).unwrap();
        let b = ode_sample(&Toward, (5, 3), &c, &u, &cfg(10, 3.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variation_ratio_contract() {
        let z = randn(100, 100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(variation_noise(&z, 0.0, &mut rng).unwrap(), z);
        let z1 = variation_noise(&z, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let other = randn(100, 100, 6);
        let z2 = variation_noise(&other, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(z1, z2);
        let half = variation_noise(&z, 0.5, &mut rng).unwrap();
        let var = half.sum_squares() / half.len() as f64;
        assert!((0.97..=1.03).contains(&var), "{var}");
        assert!(variation_noise(&z, 1.5, &mut rng).is_err());
    }

    #[test]
    fn repaint_all_keep_returns_reference() {
        let x_ref = randn(6, 4, 7);
        let c = randn(6, 4, 8);
        let out = repaint(&Toward, &x_ref, &EditMask::all_keep(6), &c, &c, &cfg(12, 3.0)).unwrap();
        assert_eq!(out, x_ref);
    }

    #[test]
    fn repaint_all_regenerate_equals_sampling() {
        let x_ref = randn(6, 4, 9);
        let c = randn(6, 4, 10);
        let u = randn(6, 4, 11);
        let config = cfg(9, 2.5);
        let a = repaint(&Toward, &x_ref, &EditMask::all_regenerate(6), &c, &u, &config).unwrap();
        let b = ode_sample(&Toward, (6, 4), &c, &u, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn repaint_keeps_exact_frames() {
        let x_ref = randn(8, 3, 12);
        let c = randn(8, 3, 13);
        let mask = EditMask {
            keep: vec![true, true, false, false, true, false, true, true],
        };
        let out = repaint(&Toward, &x_ref, &mask, &c, &c, &cfg(15, 1.0)).unwrap();
        for (r, &k) in mask.keep.iter().enumerate() {
            if k {
                assert_eq!(out.row(r), x_ref.row(r));
            } else {
                assert_ne!(out.row(r), x_ref.row(r));
            }
        }
        assert!(repaint(&Toward, &x_ref, &EditMask::all_keep(7), &c, &c, &cfg(2, 1.0)).is_err());
    }

    #[test]
    fn flow_edit_identity_under_equal_conditions() {
        let x = randn(5, 4, 14);
        let c = randn(5, 4, 15);
        let u = randn(5, 4, 16);
        assert_eq!(flow_edit(&Toward, &x, &c, &c, &u, &cfg(20, 3.0)).unwrap(), x);
        assert_eq!(flow_edit(&Toward, &x, &c, &randn(5, 4, 17), &u, &cfg(20, 0.0)).unwrap(), x);
        assert_ne!(flow_edit(&Toward, &x, &c, &randn(5, 4, 17), &u, &cfg(20, 1.0)).unwrap(), x);
    }

    #[test]
    fn mask_from_seconds() {
        let m = EditMask::from_seconds(20, 10.0, 0.25, 0.71).unwrap();
        let regen: Vec<usize> = (0..20).filter(|&i| !m.keep[i]).collect();
        assert_eq!(regen, (2..8).collect::<Vec<_>>());
        assert_eq!(EditMask::parse("0.25..0.71", 20, 10.0).unwrap(), m);
        assert!(EditMask::parse("3..1", 20, 10.0).is_err());
        assert!(EditMask::parse("abc", 20, 10.0).is_err());
    }

    #[test]
    fn nan_reports_step() {
        struct Bad;
        impl VelocityField for Bad {
            type Cond = ();
            fn velocity(&self, x: &Matrix, t: f64, _: &()) -> Result<Matrix> {
                Ok(x.map(|_| if t < 0.5 { f64::NAN } else { 0.0 }))
            }
        }
        let err = ode_sample(&Bad, (2, 2), &(), &(), &cfg(4, 1.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3, .. }), "{err}");
    }

    #[test]
    fn inversion_undoes_sampling_on_constant_fields() {
        struct Constant(Matrix);
        impl VelocityField for Constant {
            type Cond = ();
            fn velocity(&self, _: &Matrix, _: f64, _: &()) -> Result<Matrix> {
                Ok(self.0.clone())
            }
        }
        let f = Constant(randn(3, 4, 8));
        let x0 = randn(3, 4, 9);
        let z = ode_invert(&f, &x0, &(), &(), &cfg(10, 1.0)).unwrap();
        assert!(z.sub(&x0).max_abs_diff(&f.0) < 1e-12);
        let back = ode_sample_from(&f, z, &(), &(), &cfg(10, 1.0)).unwrap();
        assert!(back.max_abs_diff(&x0) < 1e-12);
    }
}
