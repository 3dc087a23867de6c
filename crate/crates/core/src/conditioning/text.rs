//! Frozen tag embedder: each comma/whitespace separated tag maps to a fixed
//! pseudo-random unit-scale vector derived from its bytes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const TEXT_DIM: usize = 768;
pub const TEXT_BUDGET: usize = 256;

const EMBED_SEED: u64 = 0x7e47_e3b0_5eed_0768;

pub fn split_tags(tags: &str) -> Vec<&str> {
    tags.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn token_seed(token: &str) -> u64 {
    // FNV-1a over the bytes, mixed with a fixed seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ EMBED_SEED
}

/// One `TEXT_DIM` row per tag, entries `N(0, 1/768)` (rows have norm ≈ 1).
pub fn embed_text(tags: &str) -> Result<Matrix> {
    let tokens = split_tags(tags);
    if tokens.len() > TEXT_BUDGET {
        return Err(Error::OverBudget {
            what: "text",
            len: tokens.len(),
            budget: TEXT_BUDGET,
        });
    }
    let scale = 1.0 / (TEXT_DIM as f64).sqrt();
    let mut data = Vec::with_capacity(tokens.len() * TEXT_DIM);
    for tok in &tokens {
        let mut rng = ChaCha8Rng::seed_from_u64(token_seed(tok));
        for _ in 0..TEXT_DIM {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((z * scale) as f32 as f64);
        }
    }
    Ok(Matrix::new(tokens.len(), TEXT_DIM, data))
}
