//! Byte-level lyric tokenizer with structural tags.

use crate::error::{Error, Result};

/// Lyric sequences longer than this are rejected before any forward pass.
pub const LYRIC_BUDGET: usize = 4096;

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VERSE: u32 = 259;
pub const CHORUS: u32 = 260;
pub const BRIDGE: u32 = 261;
pub const INST: u32 = 262;
pub const INSTRUMENTAL: u32 = 263;
pub const VOCAB_SIZE: usize = 264;

const TAGS: [(&str, u32); 5] = [
    ("verse", VERSE),
    ("chorus", CHORUS),
    ("bridge", BRIDGE),
    ("inst", INST),
    ("instrumental", INSTRUMENTAL),
];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LyricTokens {
    ids: Vec<u32>,
}

impl LyricTokens {
    /// Validates ids against the vocabulary and the instrumental-tag rule.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidArgument(format!("lyric token id {bad} outside vocabulary")));
        }
        if ids.len() > LYRIC_BUDGET {
            return Err(Error::OverBudget {
                what: "lyrics",
                len: ids.len(),
                budget: LYRIC_BUDGET,
            });
        }
        let content: Vec<u32> = ids
            .iter()
            .copied()
            .filter(|&i| !matches!(i, PAD | BOS | EOS))
            .collect();
        if content.iter().any(|&i| is_instrumental(i)) && content.len() != 1 {
            return Err(Error::InvalidArgument(
                "[inst]/[instrumental] must be the only content token".into(),
            ));
        }
        Ok(Self { ids })
    }

    /// The `[BOS, EOS]` sequence used for instrumental songs with no tag.
    pub fn empty() -> Self {
        Self { ids: vec![BOS, EOS] }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions (into `ids`) of sung tokens: alphanumeric bytes.
    pub fn sung_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &i)| i < 256 && (i as u8).is_ascii_alphanumeric())
            .map(|(p, _)| p)
            .collect()
    }

    pub fn is_instrumental(&self) -> bool {
        self.sung_positions().is_empty()
    }

    /// Reconstructs the text. Lossless for anything `tokenize_lyrics` produced.
    pub fn to_text(&self) -> String {
        let mut bytes = Vec::new();
        for &i in &self.ids {
            if i < 256 {
                bytes.push(i as u8);
            } else if let Some((name, _)) = TAGS.iter().find(|(_, id)| *id == i) {
                bytes.extend_from_slice(format!("[{name}]").as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn is_instrumental(id: u32) -> bool {
    id == INST || id == INSTRUMENTAL
}

/// Tokenized lyrics plus notes about bracket tags that were not recognized.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub tokens: LyricTokens,
    pub warnings: Vec<String>,
}

/// `[BOS, ..., EOS]`: known `[tag]`s become special tokens, everything else
/// is emitted byte by byte. Unknown bracket tags stay as bytes.
pub fn tokenize_lyrics(text: &str) -> Result<LyricTokens> {
    tokenize_lyrics_verbose(text).map(|t| t.tokens)
}

pub fn tokenize_lyrics_verbose(text: &str) -> Result<Tokenized> {
    let bytes = text.as_bytes();
    let mut ids = vec![BOS];
    let mut warnings = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(close) = bytes[i + 1..].iter().position(|&b| b == b']') {
                let inner = &text[i + 1..i + 1 + close];
                if let Some((_, id)) = TAGS.iter().find(|(n, _)| *n == inner) {
                    ids.push(*id);
                    i += close + 2;
                    continue;
                }
                warnings.push(format!("unknown tag [{inner}] kept as plain text"));
            }
        }
        ids.push(bytes[i] as u32);
        i += 1;
    }
    ids.push(EOS);
    if ids.len() > LYRIC_BUDGET {
        return Err(Error::OverBudget {
            what: "lyrics",
            len: ids.len(),
            budget: LYRIC_BUDGET,
        });
    }
    Ok(Tokenized {
        tokens: LyricTokens::new(ids)?,
        warnings,
    })
}
