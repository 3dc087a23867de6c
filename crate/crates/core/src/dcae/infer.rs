//! Tape-free forward passes for encoding and decoding whole songs, in f32.
//!
//! Same layers as the graph versions; the 3×3 convolution runs as nine
//! shifted matrix products over a zero-bordered grid instead of an im2col
//! gather, which keeps a 240 s decode well under a second.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// `[positions × cols]`, row-major.
pub(super) struct Map {
    pub data: Vec<f32>,
    pub cols: usize,
}

impl Map {
    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            data: m.data().iter().map(|&v| v as f32).collect(),
            cols: m.cols(),
        }
    }

    pub fn into_matrix(self, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, self.data.into_iter().map(f64::from).collect())
    }

    fn rows(&self) -> usize {
        self.data.len() / self.cols
    }
}

const BAND_FLOATS: usize = 1 << 16;

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// `c += a·b` on row-major slices: `a` is m×k, `b` is k×n, `c` is m×n.
fn sgemm_acc(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "sgemm_acc slice too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the length checks above keep every access of the row-major
    // m×k, k×n and m×n views in bounds; `c` is a unique borrow.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

fn param(p: &ParamStore, name: String) -> Result<Vec<f32>> {
    Ok(p.get(&name)?.data().iter().map(|&v| v as f32).collect())
}

/// `x·w + b` for the layer stored under `prefix`, optionally through SiLU.
pub(super) fn linear(p: &ParamStore, x: &Map, prefix: &str, act: bool) -> Result<Map> {
    let w = param(p, format!("{prefix}.w"))?;
    let b = param(p, format!("{prefix}.b"))?;
    let n = b.len();
    let m = x.rows();
    let mut out = vec![0.0; m * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(&b);
    }
    sgemm_acc(m, x.cols, n, &x.data, &w, &mut out);
    if act {
        out.iter_mut().for_each(|v| *v = silu(*v));
    }
    Ok(Map { data: out, cols: n })
}

pub(super) fn space_to_depth(x: &Map, h: usize, w: usize) -> Map {
    let c = x.cols;
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo * 4 * c];
    let mut k = 0;
    for i in 0..ho {
        for j in 0..wo {
            for dh in 0..2 {
                let s = ((2 * i + dh) * w + 2 * j) * c;
                out[k..k + 2 * c].copy_from_slice(&x.data[s..s + 2 * c]);
                k += 2 * c;
            }
        }
    }
    Map { data: out, cols: 4 * c }
}

/// `[(h/2)·(w/2) × 4c]` → `[h·w × c]`, optionally through SiLU.
pub(super) fn depth_to_space(x: &Map, h: usize, w: usize, act: bool) -> Map {
    let c = x.cols / 4;
    let wo = w / 2;
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let s = ((i / 2) * wo + j / 2) * 4 * c + ((i % 2) * 2 + j % 2) * c;
            let d = (i * w + j) * c;
            let (src, dst) = (&x.data[s..s + c], &mut out[d..d + c]);
            if act {
                dst.iter_mut().zip(src).for_each(|(o, &v)| *o = silu(v));
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Map { data: out, cols: c }
}

/// `x + conv3x3(silu(x)) + b` on an `h × w` grid of `c`-channel positions.
pub(super) fn residual(p: &ParamStore, mut x: Map, h: usize, w: usize, prefix: &str) -> Result<Map> {
    let weight = param(p, format!("{prefix}.w"))?;
    let bias = param(p, format!("{prefix}.b"))?;
    let c = x.cols;
    let wp = w + 2;
    // Grid position `q` lives at `q + 1`; the spare slot at each end keeps
    // the corner shifts in bounds.
    let mut padded = vec![0.0; ((h + 2) * wp + 2) * c];
    for i in 0..h {
        let d = ((i + 1) * wp + 2) * c;
        let s = i * w * c;
        for (o, &v) in padded[d..d + w * c].iter_mut().zip(&x.data[s..s + w * c]) {
            *o = silu(v);
        }
    }
    // Output rows cover grid rows 1..=h at every column, borders included.
    let n = h * wp;
    let mut acc = vec![0.0; n * c];
    // Bands small enough that each accumulator block stays in cache across
    // the nine products.
    let band = (BAND_FLOATS / c).max(1);
    for (b, block) in acc.chunks_mut(band * c).enumerate() {
        let rows = block.len() / c;
        for (k, (di, dj)) in (-1isize..=1).flat_map(|di| (-1isize..=1).map(move |dj| (di, dj))).enumerate() {
            let from = (wp as isize + 1 + di * wp as isize + dj) as usize + b * band;
            sgemm_acc(rows, c, c, &padded[from * c..], &weight[k * c * c..], block);
        }
    }
    for i in 0..h {
        let a = (i * wp + 1) * c;
        let s = i * w * c;
        let rows = x.data[s..s + w * c].chunks_exact_mut(c).zip(acc[a..a + w * c].chunks_exact(c));
        for (row, conv) in rows {
            for ((o, &v), &b) in row.iter_mut().zip(conv).zip(&bias) {
                *o += v + b;
            }
        }
    }
    Ok(x)
}
