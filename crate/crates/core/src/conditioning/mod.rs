//! Conditioning: tag text, lyrics, speaker identity, and the dropout policy
//! that makes classifier-free guidance possible.
//!
//! Everything reaches the denoiser as one sequence of `d_model` rows:
//! `[speaker, text…, lyrics…]`. Dropped or missing signals are replaced by
//! their null forms: a zero speaker vector, and learned single-row null
//! tokens for text and lyrics.

pub mod lyrics;
pub mod text;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::dit::attention::{init_attention, multi_head, Kernel};
use crate::dit::CondInput;
use crate::error::{Error, Result};
use crate::nn::{self, linear};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;
use lyrics::{LyricTokens, LYRIC_BUDGET, PAD, VOCAB_SIZE};
use text::{TEXT_BUDGET, TEXT_DIM};

pub const SPEAKER_DIM: usize = 512;

/// Which signals were dropped. These are the raw independent draws; the
/// global flag nulls everything regardless of the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub global: bool,
    pub text: bool,
    pub lyric: bool,
    pub speaker: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Frozen tag embeddings, `[L_txt × 768]`; zero rows means "no text".
    pub text_emb: Matrix,
    pub lyrics: LyricTokens,
    pub speaker: Option<u32>,
    pub dropped: DropFlags,
}

impl ConditionBundle {
    pub fn new(tags: &str, lyrics: LyricTokens, speaker: Option<u32>) -> Result<Self> {
        let b = Self {
            text_emb: text::embed_text(tags)?,
            lyrics,
            speaker,
            dropped: DropFlags::default(),
        };
        b.check_budgets()?;
        Ok(b)
    }

    /// The bundle guidance uses at inference. Identical to what
    /// [`apply_condition_dropout`] produces when every rate is 1.
    pub fn unconditional() -> Self {
        Self {
            text_emb: Matrix::zeros(0, TEXT_DIM),
            lyrics: LyricTokens::empty(),
            speaker: None,
            dropped: DropFlags {
                global: true,
                text: true,
                lyric: true,
                speaker: true,
            },
        }
    }

    pub fn text_dropped(&self) -> bool {
        self.dropped.global || self.dropped.text
    }

    pub fn lyric_dropped(&self) -> bool {
        self.dropped.global || self.dropped.lyric
    }

    pub fn speaker_dropped(&self) -> bool {
        self.dropped.global || self.dropped.speaker
    }

    pub fn check_budgets(&self) -> Result<()> {
        if self.text_emb.cols() != TEXT_DIM {
            return Err(Error::shape(format!("text embeddings must be {TEXT_DIM} wide")));
        }
        if self.text_emb.rows() > TEXT_BUDGET {
            return Err(Error::OverBudget {
                what: "text",
                len: self.text_emb.rows(),
                budget: TEXT_BUDGET,
            });
        }
        if self.lyrics.len() > LYRIC_BUDGET {
            return Err(Error::OverBudget {
                what: "lyrics",
                len: self.lyrics.len(),
                budget: LYRIC_BUDGET,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutRates {
    pub global: f64,
    pub text: f64,
    pub lyric: f64,
    pub speaker: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        Self {
            global: 0.15,
            text: 0.15,
            lyric: 0.15,
            speaker: 0.5,
        }
    }
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        global: 0.0,
        text: 0.0,
        lyric: 0.0,
        speaker: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("global", self.global),
            ("text", self.text),
            ("lyric", self.lyric),
            ("speaker", self.speaker),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("{name} dropout rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draws four uniforms (global, text, lyric, speaker, always in that order)
/// and nulls the selected signals.
pub fn apply_condition_dropout(bundle: &ConditionBundle, rng: &mut impl Rng, rates: &DropoutRates) -> ConditionBundle {
    let mut draw = |p: f64| rng.random::<f64>() < p;
    let flags = DropFlags {
        global: draw(rates.global),
        text: draw(rates.text),
        lyric: draw(rates.lyric),
        speaker: draw(rates.speaker),
    };
    let mut out = bundle.clone();
    out.dropped = flags;
    if out.text_dropped() {
        out.text_emb = Matrix::zeros(0, TEXT_DIM);
    }
    if out.lyric_dropped() {
        out.lyrics = LyricTokens::empty();
    }
    if out.speaker_dropped() {
        out.speaker = None;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionConfig {
    pub d_model: usize,
    pub speakers: usize,
    pub lyric_blocks: usize,
    pub lyric_heads: usize,
    /// Finetune mode: the speaker vector is always zero.
    pub omit_speaker: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            speakers: 8,
            lyric_blocks: 2,
            lyric_heads: 4,
            omit_speaker: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub config: ConditionConfig,
}

impl ConditionEncoder {
    pub fn new(config: ConditionConfig) -> Result<Self> {
        if config.d_model == 0 || config.lyric_heads == 0 || config.d_model % config.lyric_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "conditioning: lyric heads must divide d_model (got {config:?})"
            )));
        }
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0d1_0002);
        let mut init = Init::new(&mut rng);
        store.insert("lyric.embed", init.normal(VOCAB_SIZE, d, 1.0));
        for i in 0..self.config.lyric_blocks {
            let b = format!("lyric.block{i}");
            init_attention(store, &mut init, &format!("{b}.attn"), d, d, d);
            nn::init_linear(store, &mut init, &format!("{b}.mlp1"), d, 2 * d);
            nn::init_linear(store, &mut init, &format!("{b}.mlp2"), 2 * d, d);
        }
        store.insert("speaker.table", init.normal(self.config.speakers, SPEAKER_DIM, 1.0));
        nn::init_linear(store, &mut init, "cond.speaker_proj", SPEAKER_DIM, d);
        nn::init_linear(store, &mut init, "cond.text_proj", TEXT_DIM, d);
        store.insert("cond.null_text", init.normal(1, TEXT_DIM, 1.0 / (TEXT_DIM as f64).sqrt()));
        store.insert("cond.null_lyric", init.normal(1, d, 1.0));
    }

    /// Learned table row for a known speaker; zeros when absent.
    pub fn speaker_embed(&self, g: &mut Graph<'_>, p: &Bound, speaker: Option<u32>) -> Result<Var> {
        match speaker {
            None => Ok(g.constant(Matrix::zeros(1, SPEAKER_DIM))),
            Some(id) if (id as usize) < self.config.speakers => {
                let table = p.var("speaker.table")?;
                Ok(g.select_rows(table, &[Some(id as usize)]))
            }
            Some(id) => Err(Error::UnknownSpeaker {
                id,
                size: self.config.speakers,
            }),
        }
    }

    /// Trainable lyric encoder: embedding lookup, position features, then
    /// pre-norm self-attention blocks. One output row per token.
    pub fn lyric_encode(&self, g: &mut Graph<'_>, p: &Bound, tokens: &LyricTokens) -> Result<Var> {
        if tokens.len() > LYRIC_BUDGET {
            return Err(Error::OverBudget {
                what: "lyrics",
                len: tokens.len(),
                budget: LYRIC_BUDGET,
            });
        }
        let d = self.config.d_model;
        let rows: Vec<Option<usize>> = tokens.ids().iter().map(|&i| Some(i as usize)).collect();
        let table = p.var("lyric.embed")?;
        let emb = g.select_rows(table, &rows);
        let pos = g.constant(nn::octave_positions(tokens.len(), d));
        let mut x = g.add(emb, pos);
        let mask = lyric_mask(tokens);
        for i in 0..self.config.lyric_blocks {
            let b = format!("lyric.block{i}");
            let h = g.layer_norm(x, 1e-6);
            let a = multi_head(g, p, h, h, &format!("{b}.attn"), self.config.lyric_heads, Kernel::Softmax, Some(&mask))?;
            x = g.add(x, a);
            let h = g.layer_norm(x, 1e-6);
            let h = linear(g, p, h, &format!("{b}.mlp1"))?;
            let h = g.silu(h);
            let h = linear(g, p, h, &format!("{b}.mlp2"))?;
            x = g.add(x, h);
        }
        Ok(g.layer_norm(x, 1e-6))
    }

    /// Full condition sequence for the denoiser.
    pub fn encode(&self, g: &mut Graph<'_>, p: &Bound, bundle: &ConditionBundle) -> Result<CondInput> {
        bundle.check_budgets()?;
        let speaker = if self.config.omit_speaker || bundle.speaker_dropped() {
            None
        } else {
            bundle.speaker
        };
        let s = self.speaker_embed(g, p, speaker)?;
        let s = linear(g, p, s, "cond.speaker_proj")?;

        let text_in = if bundle.text_dropped() || bundle.text_emb.rows() == 0 {
            p.var("cond.null_text")?
        } else {
            g.constant(bundle.text_emb.clone())
        };
        let t = linear(g, p, text_in, "cond.text_proj")?;

        let (l, lmask) = if bundle.lyric_dropped() {
            (p.var("cond.null_lyric")?, vec![true])
        } else {
            (self.lyric_encode(g, p, &bundle.lyrics)?, lyric_mask(&bundle.lyrics))
        };

        // Speaker and text rows are always visible.
        let mut mask = vec![true; 1 + g.shape(t).0];
        mask.extend(lmask);
        let seq = g.concat_rows(&[s, t, l]);
        Ok(CondInput { seq, mask })
    }

    /// Encodes outside any training graph, for inference.
    pub fn encode_matrix(&self, params: &ParamStore, bundle: &ConditionBundle) -> Result<(Matrix, Vec<bool>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| false);
        let c = self.encode(&mut g, &p, bundle)?;
        Ok((g.value(c.seq).clone(), c.mask))
    }
}

/// `false` at PAD positions.
pub fn lyric_mask(tokens: &LyricTokens) -> Vec<bool> {
    tokens.ids().iter().map(|&i| i != PAD).collect()
}
