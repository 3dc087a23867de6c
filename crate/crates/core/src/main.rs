use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use melflow::checkpoint::Container;
use melflow::conditioning::lyrics::tokenize_lyrics_verbose;
use melflow::conditioning::ConditionBundle;
use melflow::data::{read_corpus, write_corpus};
use melflow::dcae::{frames_for_duration, MelSpectrogram};
use melflow::eval::Generator;
use melflow::run::{self, LoadedModel};
use melflow::sampler::{flow_edit, initial_noise, ode_invert, ode_sample_from, repaint, variation_noise, EditMask, SamplerConfig};
use melflow::suites::{self, Check};
use melflow::trainer::TrainState;
use melflow::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "melflow", version, about = "Latent flow-matching music generation on mel spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Prompt {
    /// Comma- or space-separated style tags.
    #[arg(long, default_value = "")]
    tags: String,
    /// Lyrics; `[verse]`, `[chorus]`, `[bridge]`, `[inst]` are recognized.
    #[arg(long, default_value = "")]
    lyrics: String,
    #[arg(long)]
    speaker: Option<u32>,
}

#[derive(clap::Args)]
struct SampleOpts {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mel autoencoder on a corpus.
    TrainDcae {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a corpus encoded by a trained autoencoder.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Autoencoder checkpoint from train-dcae.
        #[arg(long)]
        dcae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log, one line per step.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by this command.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from a trained model's weights (for adapter runs).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stop after this many total steps; the checkpoint can be resumed.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Generate a mel from a prompt.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        prompt: Prompt,
        #[arg(long)]
        duration: f64,
        #[command(flatten)]
        opts: SampleOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a time range of an existing mel.
    Repaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Seconds to regenerate, `start..end`.
        #[arg(long)]
        mask: String,
        #[command(flatten)]
        prompt: Prompt,
        #[command(flatten)]
        opts: SampleOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variation of a seed's sample, or of an existing mel via inversion.
    Variate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "base_seed")]
        input: Option<PathBuf>,
        #[arg(long)]
        base_seed: Option<u64>,
        /// Required with --base-seed.
        #[arg(long)]
        duration: Option<f64>,
        /// 0 keeps the original noise, 1 replaces it.
        #[arg(long)]
        ratio: f64,
        #[command(flatten)]
        prompt: Prompt,
        #[command(flatten)]
        opts: SampleOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Change the lyrics of an existing mel.
    Edit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "")]
        tags: String,
        #[arg(long)]
        lyrics_src: String,
        #[arg(long)]
        lyrics_tgt: String,
        #[arg(long)]
        speaker: Option<u32>,
        #[command(flatten)]
        opts: SampleOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the tensors of a container and check its CRC.
    InspectCkpt { path: PathBuf },
    /// Run self-check suites.
    Eval {
        /// Model checkpoint; needed for the controls and localization suites.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Corpus for localization prompts; regenerated from the config if omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Geometry,
    Flow,
    Controls,
    Stats,
    Scaling,
    Localization,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            println!("error kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData { config, out } => {
            let (cfg, _) = run::read_config(&config)?;
            let songs = run::gen_data(&cfg)?;
            let manifest = write_corpus(&out, &songs)?;
            println!("wrote {} songs, manifest {}", songs.len(), manifest.display());
        }
        Command::TrainDcae { config, data, out } => {
            let (cfg, text) = run::read_config(&config)?;
            let songs = read_corpus(&data)?;
            let dcae = run::train_autoencoder(&cfg, &songs, |step, loss| {
                if step % 10 == 0 || step + 1 == cfg.dcae_train.steps {
                    println!("dcae step={step} mse={loss:.8e}");
                }
            })?;
            run::dcae_checkpoint(&text, &dcae)?.write(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Train {
            config,
            data,
            dcae,
            out,
            log,
            resume,
            init,
            stop_at,
        } => train(&config, &data, &dcae, &out, log.as_deref(), resume.as_deref(), init.as_deref(), stop_at)?,
        Command::Sample {
            ckpt,
            prompt,
            duration,
            opts,
            out,
        } => {
            let m = load(&ckpt)?;
            let cfg = sampler_config(&m, &opts);
            let bundle = bundle(&prompt.tags, &prompt.lyrics, prompt.speaker)?;
            let frames = frames_for_duration(duration, m.generator.dcae.config.frame_rate_hz);
            let mel = m.generator.sample_mel(&bundle, m.generator.latent_frames(frames), &cfg)?;
            write_mel(&mel, &out)?;
        }
        Command::Repaint {
            ckpt,
            input,
            mask,
            prompt,
            opts,
            out,
        } => {
            let m = load(&ckpt)?;
            let cfg = sampler_config(&m, &opts);
            let g = &m.generator;
            let x_ref = g.encode_mel(&read_mel(&input)?)?;
            let mask = EditMask::parse(&mask, x_ref.rows(), g.dcae.config.latent_rate_hz())?;
            let (cond, uncond) = prepared(g, &bundle(&prompt.tags, &prompt.lyrics, prompt.speaker)?)?;
            let x = repaint(&g.model, &x_ref, &mask, &cond, &uncond, &cfg)?;
            write_mel(&g.decode_tokens(&x)?, &out)?;
        }
        Command::Variate {
            ckpt,
            input,
            base_seed,
            duration,
            ratio,
            prompt,
            opts,
            out,
        } => {
            let m = load(&ckpt)?;
            let cfg = sampler_config(&m, &opts);
            let g = &m.generator;
            let (cond, uncond) = prepared(g, &bundle(&prompt.tags, &prompt.lyrics, prompt.speaker)?)?;
            let z = match (input, base_seed) {
                (Some(path), _) => {
                    let x0 = g.encode_mel(&read_mel(&path)?)?;
                    ode_invert(&g.model, &x0, &cond, &uncond, &cfg)?
                }
                (None, Some(seed)) => {
                    let d = duration.ok_or_else(|| Error::InvalidArgument("--duration is required with --base-seed".into()))?;
                    let rows = g.latent_frames(frames_for_duration(d, g.dcae.config.frame_rate_hz));
                    initial_noise(seed, rows, g.model.dit.config.token_width)
                }
                (None, None) => return Err(Error::InvalidArgument("give --input or --base-seed".into())),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let z = variation_noise(&z, ratio, &mut rng)?;
            let x = ode_sample_from(&g.model, z, &cond, &uncond, &cfg)?;
            write_mel(&g.decode_tokens(&x)?, &out)?;
        }
        Command::Edit {
            ckpt,
            input,
            tags,
            lyrics_src,
            lyrics_tgt,
            speaker,
            opts,
            out,
        } => {
            let m = load(&ckpt)?;
            let cfg = sampler_config(&m, &opts);
            let g = &m.generator;
            let x_src = g.encode_mel(&read_mel(&input)?)?;
            let src = g.model.prepare(&bundle(&tags, &lyrics_src, speaker)?)?;
            let tgt = g.model.prepare(&bundle(&tags, &lyrics_tgt, speaker)?)?;
            let uncond = g.model.prepare_unconditional()?;
            let x = flow_edit(&g.model, &x_src, &src, &tgt, &uncond, &cfg)?;
            write_mel(&g.decode_tokens(&x)?, &out)?;
        }
        Command::InspectCkpt { path } => return inspect(&path),
        Command::Eval { ckpt, data, suite } => return eval(ckpt.as_deref(), data.as_deref(), suite),
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    data: &Path,
    dcae: &Path,
    out: &Path,
    log: Option<&Path>,
    resume: Option<&Path>,
    init: Option<&Path>,
    stop_at: Option<usize>,
) -> Result<()> {
    let (cfg, text) = run::read_config(config)?;
    let songs = read_corpus(data)?;
    let (_, autoencoder) = run::dcae_from_checkpoint(&Container::read(dcae)?)?;
    let base = init.map(load).transpose()?;
    let (mut trainer, stats) = run::build_trainer(&cfg, &autoencoder, &songs, base.as_ref().map(|b| &b.generator.model))?;
    if let Some(path) = resume {
        let c = Container::read(path)?;
        trainer.restore(TrainState::from_container(&c, &trainer.model.params)?)?;
        println!("resumed at step {}", trainer.step);
    }
    let mut log = match log {
        Some(p) => {
            let f = if resume.is_some() {
                File::options().append(true).create(true).open(p)
            } else {
                File::create(p)
            };
            Some(BufWriter::new(f.map_err(|e| Error::io(p, e))?))
        }
        None => None,
    };
    let mut io_err = None;
    trainer.run_until(stop_at.unwrap_or(usize::MAX), |m| {
        let line = m.log_line();
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{line}") {
                io_err.get_or_insert(e);
            }
        }
        if m.step % 100 == 0 {
            println!("{line}");
        }
    })?;
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io("metrics log", e))?;
    }
    if let Some(e) = io_err {
        return Err(Error::io("metrics log", e));
    }
    run::model_checkpoint(&text, &autoencoder, &stats, &trainer.state())?.write(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn load(path: &Path) -> Result<LoadedModel> {
    run::load_model(&Container::read(path)?)
}

fn sampler_config(m: &LoadedModel, opts: &SampleOpts) -> SamplerConfig {
    let base = &m.config.sampler;
    SamplerConfig {
        seed: opts.seed.unwrap_or(base.seed),
        steps: opts.steps.unwrap_or(base.steps),
        guidance_scale: opts.guidance.unwrap_or(base.guidance_scale),
        shift: base.shift,
    }
}

fn bundle(tags: &str, lyrics: &str, speaker: Option<u32>) -> Result<ConditionBundle> {
    let t = tokenize_lyrics_verbose(lyrics)?;
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    ConditionBundle::new(tags, t.tokens, speaker)
}

fn prepared(g: &Generator, b: &ConditionBundle) -> Result<(melflow::model::PreparedCond, melflow::model::PreparedCond)> {
    Ok((g.model.prepare(b)?, g.model.prepare_unconditional()?))
}

fn read_mel(path: &Path) -> Result<MelSpectrogram> {
    MelSpectrogram::from_container(&Container::read(path)?)
}

fn write_mel(mel: &MelSpectrogram, out: &Path) -> Result<()> {
    mel.to_container()?.write(out)?;
    println!("wrote {} ({} frames x {} bins)", out.display(), mel.frames(), mel.n_bins());
    Ok(())
}

fn inspect(path: &Path) -> Result<ExitCode> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 4 {
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let status = if stored == computed { "ok" } else { "MISMATCH" };
        println!("crc stored={stored:#010x} computed={computed:#010x} status={status}");
    }
    let c = Container::from_bytes(&bytes)?;
    println!("{} tensors", c.len());
    for (name, t) in c.iter() {
        let dims: Vec<String> = t.dims.iter().map(usize::to_string).collect();
        println!("{name}\t[{}]\t{}", dims.join("x"), t.data.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(ckpt: Option<&Path>, data: Option<&Path>, suite: Suite) -> Result<ExitCode> {
    let want = |s: Suite| suite == s || suite == Suite::All;
    let model = ckpt.map(load).transpose()?;
    let need_model = |name: &str| {
        Error::InvalidArgument(format!("the {name} suite needs --ckpt"))
    };
    let mut checks: Vec<Check> = Vec::new();
    if want(Suite::Geometry) {
        let dcae = match &model {
            Some(m) => m.generator.dcae.clone(),
            None => melflow::dcae::Dcae::init(Default::default(), 0),
        };
        checks.extend(suites::geometry(&dcae)?);
    }
    if want(Suite::Flow) {
        checks.extend(suites::flow_identities(0)?);
    }
    if want(Suite::Stats) {
        checks.extend(suites::statistics(0)?);
    }
    if want(Suite::Scaling) {
        checks.extend(suites::attention(5));
    }
    if want(Suite::Controls) {
        match &model {
            Some(m) => {
                let g = &m.generator;
                let songs = run::gen_data(&m.config)?;
                let (cond, uncond) = prepared(g, &songs[0].bundle()?)?;
                let shape = (g.latent_frames(songs[0].mel.frames()), g.model.dit.config.token_width);
                checks.extend(suites::controls(&g.model, shape, &cond, &uncond, &m.config.sampler)?);
            }
            None if suite == Suite::Controls => return Err(need_model("controls")),
            None => {}
        }
    }
    if want(Suite::Localization) {
        match &model {
            Some(m) => {
                let songs = match data {
                    Some(d) => read_corpus(d)?,
                    None => run::gen_data(&m.config)?,
                };
                checks.extend(suites::localization(&m.generator, &songs, 8, &m.config.sampler, 0.0)?);
            }
            None if suite == Suite::Localization => return Err(need_model("localization")),
            None => {}
        }
    }
    for c in &checks {
        println!("{}", c.line());
    }
    Ok(if checks.iter().all(|c| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
