//! The denoiser training loop: length-grouped batches, linear warm-up,
//! global-norm clipping, AdamW, and checkpoints that resume exactly.
//!
//! Randomness is derived from `(seed, step)` alone: each step has its own
//! ChaCha stream and each epoch's batch order its own, so a run restored at
//! step `k` replays the same draws as one that never stopped.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Graph;
use crate::checkpoint::{CheckpointError, Container};
use crate::conditioning::{apply_condition_dropout, ConditionBundle, DropFlags, DropoutRates};
use crate::dit::lora::is_lora_param;
use crate::error::{Error, Result};
use crate::model::MusicModel;
use crate::objectives::{fm_loss_graph, make_noisy, sample_timestep, sigma_from_t, ssl_loss, temporal_align, LossWeights, TeacherTargets};
use crate::optim::{AdamState, AdamW};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Phase::Pretrain),
            "finetune" => Some(Phase::Finetune),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

/// What the phase changes, and nothing else.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhaseEffects {
    pub w_hubert: f64,
    pub omit_speaker: bool,
}

pub const FINETUNE_W_HUBERT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip_norm: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub phase: Phase,
    pub weights: LossWeights,
    pub shift: f64,
    pub dropout: DropoutRates,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 200,
            weight_decay: 1e-2,
            betas: (0.8, 0.9),
            clip_norm: 0.5,
            steps: 3000,
            batch_size: 4,
            phase: Phase::Pretrain,
            weights: LossWeights::default(),
            shift: 3.0,
            dropout: DropoutRates::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.clip_norm > 0.0) || !(self.shift > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need lr ≥ 0, clip_norm > 0, shift > 0 (got {}, {}, {})",
                self.lr, self.clip_norm, self.shift
            )));
        }
        self.weights.validate()?;
        self.dropout.validate()
    }

    pub fn phase_effects(&self) -> PhaseEffects {
        match self.phase {
            Phase::Pretrain => PhaseEffects {
                w_hubert: self.weights.w_hubert,
                omit_speaker: false,
            },
            Phase::Finetune => PhaseEffects {
                w_hubert: FINETUNE_W_HUBERT,
                omit_speaker: true,
            },
        }
    }

    /// Loss weights after the phase adjustment.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            w_hubert: self.phase_effects().w_hubert,
            ..self.weights
        }
    }
}

/// `lr · min(1, step / warmup)`; constant `lr` when there is no warm-up.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr;
    }
    config.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
}

/// Global L2 norm over all tensors.
pub fn global_norm(grads: &ParamStore) -> f64 {
    grads.iter().map(|(_, m)| m.sum_squares()).sum::<f64>().sqrt()
}

/// Scales `grads` so the global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            what: format!("gradient norm ({norm})"),
            step: 0,
        });
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, m) in grads.iter_mut() {
            m.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Buckets item indices by length, shuffles within buckets, cuts batches
/// inside each bucket and shuffles the batch order. Every index appears
/// exactly once.
pub fn length_grouped_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lengths.iter().enumerate() {
        buckets.entry(l).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut items) in buckets {
        items.shuffle(rng);
        batches.extend(items.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// One training example: normalized latent tokens, its conditions, and
/// teacher features already resampled to the latent length.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub tokens: Matrix,
    pub bundle: ConditionBundle,
    pub teachers: TeacherTargets,
}

impl TrainItem {
    pub fn new(tokens: Matrix, bundle: ConditionBundle, teachers: &TeacherTargets) -> Result<Self> {
        let l = tokens.rows();
        // The alignment loss compares at min(T_latent, T_teacher) frames.
        let align = |m: &Matrix| temporal_align(m, l.min(m.rows()));
        Ok(Self {
            teachers: TeacherTargets {
                mert: align(&teachers.mert)?,
                hubert: align(&teachers.hubert)?,
            },
            tokens,
            bundle,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub l_fm: f64,
    pub l_ssl: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub drops: Vec<DropFlags>,
}

impl StepMetrics {
    /// One line of the metrics log.
    pub fn log_line(&self) -> String {
        format!(
            "step={} l_fm={:.8e} l_ssl={:.8e} grad_norm={:.8e} lr={:.8e}",
            self.step, self.l_fm, self.l_ssl, self.grad_norm, self.lr
        )
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub step: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + step as u64);
    r
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream((1u64 << 48) + epoch as u64);
    r
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: MusicModel,
    pub adam: AdamState,
    pub step: usize,
    items: Vec<TrainItem>,
    epoch: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, mut model: MusicModel, items: Vec<TrainItem>) -> Result<Self> {
        config.validate()?;
        if items.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        model.cond.config.omit_speaker = config.phase_effects().omit_speaker;
        let adam = AdamState::zeros_like(&model.params);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            items,
            epoch: None,
        })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.model.params.clone(),
            adam: self.adam.clone(),
            step: self.step,
        }
    }

    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        for (name, m) in self.model.params.iter() {
            let got = state.params.get(name)?;
            if got.shape() != m.shape() {
                return Err(CheckpointError::DimensionMismatch {
                    name: name.to_string(),
                    expected: vec![m.rows(), m.cols()],
                    found: vec![got.rows(), got.cols()],
                }
                .into());
            }
        }
        self.model.params = state.params;
        self.adam = state.adam;
        self.step = state.step;
        self.epoch = None;
        Ok(())
    }

    fn trainable(&self) -> impl Fn(&str) -> bool + 'static {
        let lora_only = self.model.lora.is_some();
        move |n: &str| !lora_only || is_lora_param(n)
    }

    fn batch_for(&mut self, step: usize) -> Result<Vec<usize>> {
        let lengths: Vec<usize> = self.items.iter().map(|i| i.tokens.rows()).collect();
        let per_epoch = {
            // Batch count depends only on bucket sizes, not on the shuffle.
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            lengths.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
            counts.values().map(|c| c.div_ceil(self.config.batch_size)).sum::<usize>()
        };
        let (epoch, idx) = (step / per_epoch, step % per_epoch);
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut rng = epoch_rng(self.config.seed, epoch);
            let batches = length_grouped_batches(&lengths, self.config.batch_size, &mut rng)?;
            self.epoch = Some((epoch, batches));
        }
        Ok(self.epoch.as_ref().expect("just set").1[idx].clone())
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let batch = self.batch_for(step)?;
        let mut rng = step_rng(self.config.seed, step);
        let weights = self.config.effective_weights();
        let lambda = weights.lambda_ssl;
        let tap = self.model.dit.config.repa_tap();
        let trainable = self.trainable();

        let (l_fm, l_ssl, mut grads, drops) = {
            let model = &self.model;
            let mut g = Graph::new();
            let p = model.bind(&mut g, &trainable)?;
            let mut losses = Vec::with_capacity(batch.len());
            let (mut fm_sum, mut ssl_sum) = (0.0, 0.0);
            let mut drops = Vec::with_capacity(batch.len());
            for &i in &batch {
                let item = &self.items[i];
                let bundle = apply_condition_dropout(&item.bundle, &mut rng, &self.config.dropout);
                drops.push(bundle.dropped);
                let t = sample_timestep(&mut rng);
                let sigma = sigma_from_t(t, self.config.shift);
                let x0 = &item.tokens;
                let z = Matrix::from_fn(x0.rows(), x0.cols(), |_, _| StandardNormal.sample(&mut rng));
                let xn = make_noisy(x0, &z, sigma)?;
                let cond = model.cond.encode(&mut g, &p, &bundle)?;
                let xv = g.constant(xn.clone());
                let out = model.dit.forward(&mut g, &p, xv, t, &cond)?;
                let fm = fm_loss_graph(&mut g, out.velocity, sigma, &xn, x0);
                let h = out.hidden_at(tap)?;
                let ssl = ssl_loss(&mut g, &p, h, &item.teachers, &weights)?;
                fm_sum += g.value(fm).item();
                ssl_sum += g.value(ssl).item();
                let total = if lambda == 0.0 {
                    fm
                } else {
                    let s = g.scale(ssl, lambda);
                    g.add(fm, s)
                };
                losses.push(total);
            }
            let n = batch.len() as f64;
            let sum = g.concat_rows(&losses);
            let loss = g.mean(sum);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("training loss ({value})"),
                    step,
                });
            }
            let mut gr = g.backward(loss);
            (fm_sum / n, ssl_sum / n, p.gradients(&model.params, &mut gr), drops)
        };
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm).map_err(|_| Error::NonFinite {
            what: "gradient".into(),
            step,
        })?;
        let lr = lr_at(step, &self.config);
        let opt = AdamW::new(self.config.betas.0, self.config.betas.1, self.config.weight_decay);
        opt.step(&mut self.model.params, &mut self.adam, &grads, lr, &trainable)?;
        self.step += 1;
        Ok(StepMetrics {
            step,
            l_fm,
            l_ssl,
            grad_norm,
            lr,
            drops,
        })
    }

    /// Runs until `config.steps` updates have been made.
    pub fn run(&mut self, on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        self.run_until(self.config.steps, on_step)
    }

    /// Runs until `min(stop, config.steps)` updates have been made.
    pub fn run_until(&mut self, stop: usize, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while self.step < stop.min(self.config.steps) {
            let m = self.train_step()?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }
}

const STEP_TENSOR: &str = "train.step";

/// Stores a `u64` exactly as four 16-bit limbs.
pub fn u64_tensor(v: u64) -> Matrix {
    Matrix::row_vector((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect())
}

pub fn tensor_u64(m: &Matrix) -> Option<u64> {
    if m.len() != 4 {
        return None;
    }
    let mut v = 0u64;
    for (i, &x) in m.data().iter().enumerate() {
        if !(0.0..65536.0).contains(&x) || x.fract() != 0.0 {
            return None;
        }
        v |= (x as u64) << (16 * i);
    }
    Some(v)
}

impl TrainState {
    /// Writes parameters under their own names and moments under
    /// `adam.m.` / `adam.v.`.
    pub fn to_container(&self, c: &mut Container) -> Result<()> {
        for (name, m) in self.params.iter() {
            c.insert_matrix(name, m)?;
        }
        for (name, m) in self.adam.m.iter() {
            c.insert_matrix(format!("adam.m.{name}"), m)?;
        }
        for (name, m) in self.adam.v.iter() {
            c.insert_matrix(format!("adam.v.{name}"), m)?;
        }
        c.insert_matrix(STEP_TENSOR, &u64_tensor(self.step as u64))?;
        c.insert_matrix("adam.t", &u64_tensor(self.adam.t))?;
        Ok(())
    }

    /// Reads a state whose tensors match `reference` in names and shapes.
    pub fn from_container(c: &Container, reference: &ParamStore) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, r) in reference.iter() {
            params.insert(name, c.matrix_with_shape(name, r.rows(), r.cols())?);
            m.insert(name, c.matrix_with_shape(&format!("adam.m.{name}"), r.rows(), r.cols())?);
            v.insert(name, c.matrix_with_shape(&format!("adam.v.{name}"), r.rows(), r.cols())?);
        }
        let read = |n: &str| -> Result<u64> {
            tensor_u64(&c.matrix(n)?).ok_or_else(|| {
                CheckpointError::DimensionMismatch {
                    name: n.to_string(),
                    expected: vec![4],
                    found: c.get(n).map(|t| t.dims.clone()).unwrap_or_default(),
                }
                .into()
            })
        };
        Ok(Self {
            params,
            adam: AdamState { m, v, t: read("adam.t")? },
            step: read(STEP_TENSOR)? as usize,
        })
    }
}
