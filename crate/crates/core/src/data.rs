//! Synthetic song corpus: generation, on-disk layout and loading.
//!
//! A corpus directory holds one container per song (`song_NNNN.acep`, the
//! mel plus its prompt) and a `manifest.txt` with one line per song.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::conditioning::lyrics::{tokenize_lyrics, LyricTokens};
use crate::conditioning::ConditionBundle;
use crate::dcae::synth::SLOT_FRAMES;
use crate::dcae::{frames_for_duration, synth_mel_with, MelSpectrogram, SongSpec, STYLES};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub songs: usize,
    /// Song lengths are drawn round-robin from this list.
    pub durations_s: Vec<f64>,
    pub n_bins: usize,
    pub frame_rate_hz: f64,
    pub speakers: u32,
    /// Every `instrumental_every`-th song has no vocals; 0 disables.
    pub instrumental_every: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            songs: 64,
            durations_s: vec![1.49, 2.97],
            n_bins: crate::dcae::DEFAULT_N_BINS,
            frame_rate_hz: crate::dcae::DEFAULT_FRAME_RATE_HZ,
            speakers: 8,
            instrumental_every: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Song {
    pub tags: String,
    pub lyrics: String,
    pub speaker: Option<u32>,
    pub mel: MelSpectrogram,
}

impl Song {
    pub fn tokens(&self) -> Result<LyricTokens> {
        tokenize_lyrics(&self.lyrics)
    }

    pub fn bundle(&self) -> Result<ConditionBundle> {
        ConditionBundle::new(&self.tags, self.tokens()?, self.speaker)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.mel.to_container()?;
        c.insert_text("song.tags", &self.tags)?;
        c.insert_text("song.lyrics", &self.lyrics)?;
        let speaker = self.speaker.map_or(-1.0, f64::from);
        c.insert_matrix("song.speaker", &Matrix::row_vector(vec![speaker]))?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let speaker = c.matrix_with_shape("song.speaker", 1, 1)?.item();
        Ok(Self {
            tags: c.text("song.tags")?,
            lyrics: c.text("song.lyrics")?,
            speaker: (speaker >= 0.0).then_some(speaker as u32),
            mel: MelSpectrogram::from_container(c)?,
        })
    }
}

/// Random letters and spaces, one per slot that fits in `frames`, with at
/// least one letter.
pub fn random_lyrics(frames: usize, rng: &mut impl Rng) -> String {
    // Token 0 is BOS, so the last usable slot is frames/SLOT - 1.
    let slots = (frames / SLOT_FRAMES).saturating_sub(1).max(1);
    let mut s: String = (0..slots)
        .map(|_| {
            if rng.random::<f64>() < 0.75 {
                char::from(b'a' + rng.random_range(0..26u8))
            } else {
                ' '
            }
        })
        .collect();
    if !s.bytes().any(|b| b.is_ascii_alphabetic()) {
        s.replace_range(0..1, "a");
    }
    s
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<Song>> {
    if config.songs == 0 || config.durations_s.is_empty() || config.speakers == 0 {
        return Err(Error::InvalidArgument(
            "corpus needs at least one song, one duration and one speaker".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.songs)
        .map(|i| {
            let duration_s = config.durations_s[i % config.durations_s.len()];
            let frames = frames_for_duration(duration_s, config.frame_rate_hz);
            let tag_id = rng.random_range(0..STYLES.len());
            let instrumental = config.instrumental_every > 0 && i % config.instrumental_every == config.instrumental_every - 1;
            let (lyrics, speaker) = if instrumental {
                ("[inst]".to_string(), None)
            } else {
                (random_lyrics(frames, &mut rng), Some(rng.random_range(0..config.speakers)))
            };
            let spec = SongSpec {
                duration_s,
                tag_id,
                lyric_tokens: tokenize_lyrics(&lyrics)?,
                speaker_id: speaker,
                seed: rng.random(),
            };
            Ok(Song {
                tags: spec.tags(),
                lyrics,
                speaker,
                mel: synth_mel_with(&spec, config.n_bins, config.frame_rate_hz)?,
            })
        })
        .collect()
}

pub const MANIFEST: &str = "manifest.txt";

fn song_file(i: usize) -> String {
    format!("song_{i:04}.acep")
}

/// Writes every song plus the manifest; returns the manifest path.
pub fn write_corpus(dir: &Path, songs: &[Song]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# file\tframes\tspeaker\ttags\tlyrics\n");
    for (i, s) in songs.iter().enumerate() {
        let name = song_file(i);
        s.to_container()?.write(dir.join(&name))?;
        let speaker = s.speaker.map_or("-".to_string(), |v| v.to_string());
        writeln!(
            manifest,
            "{name}\t{}\t{speaker}\t{}\t{}",
            s.mel.frames(),
            s.tags,
            s.lyrics.escape_default()
        )
        .expect("writing to a String");
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Song>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let file = l.split('\t').next().unwrap_or_default();
            Song::from_container(&Container::read(dir.join(file))?)
        })
        .collect()
}
