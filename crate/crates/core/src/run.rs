//! End-to-end runs driven by a [`RunConfig`], and the checkpoint files
//! they produce.
//!
//! Every checkpoint carries the config text it was made with under
//! `meta.config`, so a file alone is enough to rebuild the model.

use std::path::Path;

use crate::checkpoint::Container;
use crate::config::RunConfig;
use crate::data::{generate_corpus, Song};
use crate::dcae::{train_dcae_with_progress, Dcae};
use crate::error::Result;
use crate::eval::Generator;
use crate::model::MusicModel;
use crate::pipeline::{build_train_items, LatentStats};
use crate::trainer::{StepMetrics, TrainState, Trainer};

pub const CONFIG_TENSOR: &str = "meta.config";

/// Parses config text and validates it.
pub fn load_config(text: &str) -> Result<RunConfig> {
    let cfg = RunConfig::parse(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn read_config(path: &Path) -> Result<(RunConfig, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    Ok((load_config(&text)?, text))
}

pub fn gen_data(cfg: &RunConfig) -> Result<Vec<Song>> {
    generate_corpus(&cfg.data)
}

pub fn train_autoencoder(cfg: &RunConfig, songs: &[Song], progress: impl FnMut(usize, f64)) -> Result<Dcae> {
    let mels: Vec<_> = songs.iter().map(|s| s.mel.clone()).collect();
    Ok(train_dcae_with_progress(&mels, cfg.dcae, &cfg.dcae_train, progress)?.model)
}

pub fn dcae_checkpoint(config_text: &str, dcae: &Dcae) -> Result<Container> {
    let mut c = Container::new();
    c.insert_text(CONFIG_TENSOR, config_text)?;
    dcae.to_container(&mut c)?;
    Ok(c)
}

/// Reads the autoencoder from either an autoencoder or a full checkpoint.
pub fn dcae_from_checkpoint(c: &Container) -> Result<(RunConfig, Dcae)> {
    let cfg = load_config(&c.text(CONFIG_TENSOR)?)?;
    let dcae = Dcae::from_container(cfg.dcae, c)?;
    Ok((cfg, dcae))
}

/// A fresh model for `cfg`, with an adapter when `lora.rank > 0`.
pub fn init_model(cfg: &RunConfig) -> Result<MusicModel> {
    let mut m = MusicModel::init(&cfg.model(), cfg.train.seed)?;
    if let Some(l) = cfg.lora() {
        m.attach_lora(l, cfg.train.seed)?;
    }
    Ok(m)
}

/// Builds the trainer. `base` supplies starting weights (adapter runs
/// start from a trained model); its adapter tensors, if any, are ignored.
pub fn build_trainer(cfg: &RunConfig, dcae: &Dcae, songs: &[Song], base: Option<&MusicModel>) -> Result<(Trainer, LatentStats)> {
    let (items, stats) = build_train_items(dcae, songs)?;
    let mut model = init_model(cfg)?;
    if let Some(b) = base {
        for (name, m) in model.params.iter_mut() {
            if let Ok(src) = b.params.get(name) {
                if !crate::dit::lora::is_lora_param(name) && src.shape() == m.shape() {
                    *m = src.clone();
                }
            }
        }
    }
    Ok((Trainer::new(cfg.train.clone(), model, items)?, stats))
}

pub fn model_checkpoint(config_text: &str, dcae: &Dcae, stats: &LatentStats, state: &TrainState) -> Result<Container> {
    let mut c = dcae_checkpoint(config_text, dcae)?;
    stats.to_container(&mut c)?;
    state.to_container(&mut c)?;
    Ok(c)
}

/// Everything stored in a full checkpoint.
pub struct LoadedModel {
    pub config: RunConfig,
    pub config_text: String,
    pub generator: Generator,
    pub state: TrainState,
}

pub fn load_model(c: &Container) -> Result<LoadedModel> {
    let config_text = c.text(CONFIG_TENSOR)?;
    let (config, dcae) = dcae_from_checkpoint(c)?;
    let reference = init_model(&config)?;
    let state = TrainState::from_container(c, &reference.params)?;
    let model = MusicModel::from_params(&config.model(), state.params.clone(), config.lora())?;
    Ok(LoadedModel {
        generator: Generator {
            dcae,
            model,
            stats: LatentStats::from_container(c)?,
        },
        config,
        config_text,
        state,
    })
}

/// Result of [`full_pipeline`].
pub struct PipelineOutput {
    pub songs: Vec<Song>,
    pub checkpoint: Container,
    pub metrics: Vec<StepMetrics>,
    pub generator: Generator,
}

/// Corpus → autoencoder → denoiser, all from `config_text`.
pub fn full_pipeline(config_text: &str, mut on_step: impl FnMut(&StepMetrics)) -> Result<PipelineOutput> {
    let cfg = load_config(config_text)?;
    let songs = gen_data(&cfg)?;
    let dcae = train_autoencoder(&cfg, &songs, |_, _| {})?;
    let (mut trainer, stats) = build_trainer(&cfg, &dcae, &songs, None)?;
    let metrics = trainer.run(&mut on_step)?;
    let checkpoint = model_checkpoint(config_text, &dcae, &stats, &trainer.state())?;
    Ok(PipelineOutput {
        songs,
        checkpoint,
        metrics,
        generator: Generator {
            dcae,
            model: trainer.model,
            stats,
        },
    })
}
