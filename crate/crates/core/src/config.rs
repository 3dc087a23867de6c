//! Run configuration: a flat `key = value` file with namespaced keys.
//!
//! Unknown keys are rejected. `RunConfig::to_text` renders every key with
//! its annotation, and checkpoints embed that text verbatim.

use thiserror::Error;

use crate::conditioning::ConditionConfig;
use crate::data::CorpusConfig;
use crate::dcae::{DcaeConfig, DcaeTrainConfig};
use crate::dit::lora::{default_targets, LoraConfig};
use crate::dit::DitConfig;
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::trainer::{Phase, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value {value:?} for {key}: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
}

/// Positional features added to token inputs. Only one scheme exists; the
/// key is kept so the choice is visible in every config and checkpoint.
pub const POSITIONAL_SCHEMES: [&str; 1] = ["octave"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: CorpusConfig,
    pub dcae: DcaeConfig,
    pub dcae_train: DcaeTrainConfig,
    pub dit: DitConfig,
    pub positional: String,
    pub cond: ConditionConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Rank 0 means no adapter.
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

/// Desk runs are 3k steps; 1e-4 barely moves the loss in that budget.
pub const DESK_LR: f64 = 1e-3;

impl Default for RunConfig {
    fn default() -> Self {
        let dcae = DcaeConfig::default();
        let dit = DitConfig {
            token_width: dcae.latent_freq() * crate::dcae::LATENT_CHANNELS,
            ..DitConfig::default()
        };
        Self {
            data: CorpusConfig::default(),
            dcae,
            dcae_train: DcaeTrainConfig {
                steps: 100,
                ..DcaeTrainConfig::default()
            },
            cond: ConditionConfig {
                d_model: dit.d_model,
                ..ConditionConfig::default()
            },
            dit,
            positional: POSITIONAL_SCHEMES[0].to_string(),
            train: TrainConfig {
                lr: DESK_LR,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
            lora_rank: 0,
            lora_alpha: 8.0,
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',').map(|s| parse::<f64>(s.trim())).collect()
}

impl RunConfig {
    /// `(key, value, annotation)` for every key, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        let d = &self.data;
        let t = &self.train;
        let durations = d.durations_s.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("data.songs", d.songs.to_string(), "synthetic corpus size"),
            ("data.durations_s", durations, "song lengths, cycled"),
            ("data.n_bins", d.n_bins.to_string(), "mel bins"),
            ("data.frame_rate_hz", d.frame_rate_hz.to_string(), "44.1 kHz / hop 512"),
            ("data.speakers", d.speakers.to_string(), ""),
            ("data.instrumental_every", d.instrumental_every.to_string(), "0 = every song sung"),
            ("data.seed", d.seed.to_string(), ""),
            ("dcae.c1", self.dcae.c1.to_string(), "channels after the first downsampling"),
            ("dcae.c2", self.dcae.c2.to_string(), "channels after the second downsampling"),
            ("dcae.steps", self.dcae_train.steps.to_string(), ""),
            ("dcae.batch_size", self.dcae_train.batch_size.to_string(), ""),
            ("dcae.lr", self.dcae_train.lr.to_string(), ""),
            ("dcae.seed", self.dcae_train.seed.to_string(), ""),
            ("dit.d_model", self.dit.d_model.to_string(), "paper: 2560"),
            ("dit.blocks", self.dit.blocks.to_string(), "paper: 24"),
            ("dit.heads", self.dit.heads.to_string(), "paper: 20"),
            ("dit.ffn_mult", self.dit.ffn_mult.to_string(), "paper: 2.5"),
            ("dit.positional", self.positional.clone(), "sinusoidal octave features on token inputs"),
            ("cond.speakers", self.cond.speakers.to_string(), "speaker table rows"),
            ("cond.lyric_blocks", self.cond.lyric_blocks.to_string(), ""),
            ("cond.lyric_heads", self.cond.lyric_heads.to_string(), ""),
            ("train.lr", t.lr.to_string(), "paper: 1e-4"),
            ("train.warmup_steps", t.warmup_steps.to_string(), "paper: 4000"),
            ("train.weight_decay", t.weight_decay.to_string(), "paper: 1e-2"),
            ("train.beta1", t.betas.0.to_string(), "paper: 0.8"),
            ("train.beta2", t.betas.1.to_string(), "paper: 0.9"),
            ("train.clip_norm", t.clip_norm.to_string(), "paper: 0.5"),
            ("train.steps", t.steps.to_string(), "paper: 460000 pretrain + 240000 finetune"),
            ("train.batch_size", t.batch_size.to_string(), ""),
            ("train.phase", t.phase.as_str().to_string(), "pretrain | finetune"),
            ("train.lambda_ssl", t.weights.lambda_ssl.to_string(), "paper: 1.0"),
            ("train.w_mert", t.weights.w_mert.to_string(), "paper: 1.0"),
            ("train.w_hubert", t.weights.w_hubert.to_string(), "paper: 1.0, 0.01 when finetuning"),
            ("train.shift", t.shift.to_string(), "paper: 3.0"),
            ("train.drop_global", t.dropout.global.to_string(), "paper: 0.15"),
            ("train.drop_text", t.dropout.text.to_string(), "paper: 0.15"),
            ("train.drop_lyric", t.dropout.lyric.to_string(), "paper: 0.15"),
            ("train.drop_speaker", t.dropout.speaker.to_string(), "paper: 0.5"),
            ("train.seed", t.seed.to_string(), ""),
            ("sampler.steps", self.sampler.steps.to_string(), "Euler steps"),
            ("sampler.guidance_scale", self.sampler.guidance_scale.to_string(), ""),
            ("sampler.shift", self.sampler.shift.to_string(), "paper: 3.0"),
            ("sampler.seed", self.sampler.seed.to_string(), ""),
            ("lora.rank", self.lora_rank.to_string(), "0 disables the adapter"),
            ("lora.alpha", self.lora_alpha.to_string(), ""),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> Option<Result<(), String>> {
        let r = match key {
            "data.songs" => parse(v).map(|x| self.data.songs = x),
            "data.durations_s" => parse_list(v).map(|x| self.data.durations_s = x),
            "data.n_bins" => parse(v).map(|x| self.data.n_bins = x),
            "data.frame_rate_hz" => parse(v).map(|x| self.data.frame_rate_hz = x),
            "data.speakers" => parse(v).map(|x| self.data.speakers = x),
            "data.instrumental_every" => parse(v).map(|x| self.data.instrumental_every = x),
            "data.seed" => parse(v).map(|x| self.data.seed = x),
            "dcae.c1" => parse(v).map(|x| self.dcae.c1 = x),
            "dcae.c2" => parse(v).map(|x| self.dcae.c2 = x),
            "dcae.steps" => parse(v).map(|x| self.dcae_train.steps = x),
            "dcae.batch_size" => parse(v).map(|x| self.dcae_train.batch_size = x),
            "dcae.lr" => parse(v).map(|x| self.dcae_train.lr = x),
            "dcae.seed" => parse(v).map(|x| self.dcae_train.seed = x),
            "dit.d_model" => parse(v).map(|x| self.dit.d_model = x),
            "dit.blocks" => parse(v).map(|x| self.dit.blocks = x),
            "dit.heads" => parse(v).map(|x| self.dit.heads = x),
            "dit.ffn_mult" => parse(v).map(|x| self.dit.ffn_mult = x),
            "dit.positional" => {
                if POSITIONAL_SCHEMES.contains(&v) {
                    self.positional = v.to_string();
                    Ok(())
                } else {
                    Err(format!("supported schemes: {}", POSITIONAL_SCHEMES.join(", ")))
                }
            }
            "cond.speakers" => parse(v).map(|x| self.cond.speakers = x),
            "cond.lyric_blocks" => parse(v).map(|x| self.cond.lyric_blocks = x),
            "cond.lyric_heads" => parse(v).map(|x| self.cond.lyric_heads = x),
            "train.lr" => parse(v).map(|x| self.train.lr = x),
            "train.warmup_steps" => parse(v).map(|x| self.train.warmup_steps = x),
            "train.weight_decay" => parse(v).map(|x| self.train.weight_decay = x),
            "train.beta1" => parse(v).map(|x| self.train.betas.0 = x),
            "train.beta2" => parse(v).map(|x| self.train.betas.1 = x),
            "train.clip_norm" => parse(v).map(|x| self.train.clip_norm = x),
            "train.steps" => parse(v).map(|x| self.train.steps = x),
            "train.batch_size" => parse(v).map(|x| self.train.batch_size = x),
            "train.phase" => Phase::parse(v)
                .map(|p| self.train.phase = p)
                .ok_or_else(|| "expected pretrain or finetune".to_string()),
            "train.lambda_ssl" => parse(v).map(|x| self.train.weights.lambda_ssl = x),
            "train.w_mert" => parse(v).map(|x| self.train.weights.w_mert = x),
            "train.w_hubert" => parse(v).map(|x| self.train.weights.w_hubert = x),
            "train.shift" => parse(v).map(|x| self.train.shift = x),
            "train.drop_global" => parse(v).map(|x| self.train.dropout.global = x),
            "train.drop_text" => parse(v).map(|x| self.train.dropout.text = x),
            "train.drop_lyric" => parse(v).map(|x| self.train.dropout.lyric = x),
            "train.drop_speaker" => parse(v).map(|x| self.train.dropout.speaker = x),
            "train.seed" => parse(v).map(|x| self.train.seed = x),
            "sampler.steps" => parse(v).map(|x| self.sampler.steps = x),
            "sampler.guidance_scale" => parse(v).map(|x| self.sampler.guidance_scale = x),
            "sampler.shift" => parse(v).map(|x| self.sampler.shift = x),
            "sampler.seed" => parse(v).map(|x| self.sampler.seed = x),
            "lora.rank" => parse(v).map(|x| self.lora_rank = x),
            "lora.alpha" => parse(v).map(|x| self.lora_alpha = x),
            _ => return None,
        };
        Some(r)
    }

    /// Starts from the defaults and applies every line of `text`. `#` starts
    /// a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            match cfg.set(key, value) {
                None => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })
                }
                Some(Err(reason)) => {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        value: value.to_string(),
                        reason,
                    })
                }
                Some(Ok(())) => {}
            }
        }
        cfg.derive();
        Ok(cfg)
    }

    /// Fills fields that follow from others.
    fn derive(&mut self) {
        self.dcae.n_bins = self.data.n_bins;
        self.dcae.frame_rate_hz = self.data.frame_rate_hz;
        self.dit.token_width = self.dcae.latent_freq() * crate::dcae::LATENT_CHANNELS;
        self.cond.d_model = self.dit.d_model;
        self.cond.omit_speaker = self.train.phase_effects().omit_speaker;
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v, note) in self.entries() {
            if note.is_empty() {
                out.push_str(&format!("{k} = {v}\n"));
            } else {
                out.push_str(&format!("{k} = {v}  # {note}\n"));
            }
        }
        out
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dit: self.dit.clone(),
            cond: self.cond.clone(),
        }
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        (self.lora_rank > 0).then(|| LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
            targets: default_targets(self.dit.blocks),
        })
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        self.sampler.validate()?;
        if self.cond.speakers < self.data.speakers as usize {
            return Err(crate::Error::InvalidArgument(format!(
                "cond.speakers = {} cannot index data.speakers = {}",
                self.cond.speakers, self.data.speakers
            )));
        }
        Ok(())
    }
}
