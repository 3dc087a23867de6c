//! Layer helpers built on the autograd tape.

use crate::autograd::{Graph, Var, GATHER_ZERO};
use crate::error::Result;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;

/// `x · W + b` with parameters `{prefix}.w` (`in×out`) and `{prefix}.b` (`1×out`).
pub fn linear(g: &mut Graph<'_>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w);
    Ok(g.add_row(y, b))
}

pub fn init_linear(store: &mut ParamStore, init: &mut Init<'_>, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), init.linear(fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, fan_out));
}

pub fn init_linear_zero(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Matrix::zeros(fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Matrix::zeros(1, fan_out));
}

/// `[h·w × c]` → `[(h/2)·(w/2) × 4c]`; each 2×2 block becomes one position
/// with channels ordered `(dh, dw, c)`.
pub fn space_to_depth(g: &mut Graph<'_>, x: Var, h: usize, w: usize, c: usize) -> Var {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..ho {
        for j in 0..wo {
            for dh in 0..2 {
                for dw in 0..2 {
                    let src = ((2 * i + dh) * w + (2 * j + dw)) * c;
                    idx.extend((src..src + c).map(|s| s as u32));
                }
            }
        }
    }
    g.gather(x, idx, ho * wo, 4 * c)
}

/// Inverse of [`space_to_depth`]: `[(h/2)·(w/2) × 4c]` → `[h·w × c]`.
pub fn depth_to_space(g: &mut Graph<'_>, x: Var, h: usize, w: usize, c: usize) -> Var {
    let wo = w / 2;
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let pos = (i / 2) * wo + j / 2;
            let ch = ((i % 2) * 2 + j % 2) * c;
            let src = pos * 4 * c + ch;
            idx.extend((src..src + c).map(|s| s as u32));
        }
    }
    g.gather(x, idx, h * w, c)
}

/// 3×3 neighbourhoods with zero padding: `[h·w × c]` → `[h·w × 9c]`.
pub fn im2col3x3(g: &mut Graph<'_>, x: Var, h: usize, w: usize, c: usize) -> Var {
    let mut idx = Vec::with_capacity(h * w * 9 * c);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    let (ii, jj) = (i + di, j + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        idx.extend(std::iter::repeat_n(GATHER_ZERO, c));
                    } else {
                        let src = (ii as usize * w + jj as usize) * c;
                        idx.extend((src..src + c).map(|s| s as u32));
                    }
                }
            }
        }
    }
    g.gather(x, idx, h * w, 9 * c)
}

/// Rows shifted by `offset` along the sequence axis, zero-filled at the ends:
/// `out[l] = x[l + offset]`.
pub fn shift_rows(g: &mut Graph<'_>, x: Var, offset: isize) -> Var {
    let (l, _) = g.shape(x);
    let rows: Vec<Option<usize>> = (0..l as isize)
        .map(|i| {
            let s = i + offset;
            (s >= 0 && s < l as isize).then_some(s as usize)
        })
        .collect();
    g.select_rows(x, &rows)
}

/// Sinusoidal embedding of a scalar, the usual timestep featurization.
pub fn timestep_features(t: f64, dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    Matrix::row_vector(out)
}

/// Number of octaves in [`octave_positions`]; periods run from 4 to 2^14.
pub const POSITION_OCTAVES: usize = 13;

/// Absolute position features whose frequencies are successive powers of
/// two. Doubling a position is then a fixed linear map on the features
/// (octave `k` at `2p` equals octave `k-1` at `p`), which lets attention
/// relate sequences sampled at rates that differ by powers of two.
pub fn octave_positions(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |p, c| {
        let pair = c / 2;
        let k = pair % POSITION_OCTAVES;
        let omega = std::f64::consts::PI / f64::powi(2.0, k as i32 + 1);
        let a = omega * p as f64;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}
