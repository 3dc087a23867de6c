//! Attention variants: kernelized linear attention for the latent sequence,
//! softmax attention for conditioning and the lyric encoder, and a plain
//! quadratic reference used by the scaling benchmark.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;

/// Floor for the linear-attention normalizer.
pub const LINEAR_ATTENTION_EPS: f64 = 1e-6;

/// Single-head linear attention with feature map `φ = elu + 1`:
///
/// `out_i = φ(q_i)·(Σ_j φ(k_j)ᵀ v_j) / max(φ(q_i)·Σ_j φ(k_j), ε)`
///
/// Cost is `O(L·d²)`; nothing here depends on token order, so permuting the
/// sequence permutes the output.
pub fn linear_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var) -> Var {
    let fq = g.elu_plus_one(q);
    let fk = g.elu_plus_one(k);
    let kv = g.matmul_t(fk, true, v, false);
    let ksum = g.col_sum(fk);
    let num = g.matmul(fq, kv);
    let den = g.matmul_t(fq, false, ksum, true);
    let den = g.clamp_min(den, LINEAR_ATTENTION_EPS);
    g.div_col(num, den)
}

/// Single-head scaled dot-product attention. `key_mask[j] == false` hides key `j`.
pub fn softmax_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, key_mask: Option<&[bool]>) -> Var {
    let d = g.shape(q).1 as f64;
    let s = g.matmul_t(q, false, k, true);
    let s = g.scale(s, 1.0 / d.sqrt());
    let a = g.softmax_rows(s, key_mask);
    g.matmul(a, v)
}

/// Weights for one attention layer: `{prefix}.wq/.wk/.wv/.wo` and `{prefix}.bo`.
pub fn init_attention(
    store: &mut ParamStore,
    init: &mut Init<'_>,
    prefix: &str,
    d_query: usize,
    d_kv: usize,
    d_model: usize,
) {
    store.insert(format!("{prefix}.wq"), init.linear(d_query, d_model));
    store.insert(format!("{prefix}.wk"), init.linear(d_kv, d_model));
    store.insert(format!("{prefix}.wv"), init.linear(d_kv, d_model));
    store.insert(format!("{prefix}.wo"), init.linear(d_model, d_query));
    store.insert(format!("{prefix}.bo"), Matrix::zeros(1, d_query));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    Linear,
    Softmax,
}

/// Multi-head attention from `xq` onto `xkv` using weights under `prefix`.
pub fn multi_head(
    g: &mut Graph<'_>,
    p: &Bound,
    xq: Var,
    xkv: Var,
    prefix: &str,
    heads: usize,
    kernel: Kernel,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let wq = p.var(&format!("{prefix}.wq"))?;
    let wk = p.var(&format!("{prefix}.wk"))?;
    let wv = p.var(&format!("{prefix}.wv"))?;
    let wo = p.var(&format!("{prefix}.wo"))?;
    let bo = p.var(&format!("{prefix}.bo"))?;
    let q = g.matmul(xq, wq);
    let k = g.matmul(xkv, wk);
    let v = g.matmul(xkv, wv);
    let d = g.shape(q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        outs.push(match kernel {
            Kernel::Linear => linear_attention(g, qh, kh, vh),
            Kernel::Softmax => softmax_attention(g, qh, kh, vh, key_mask),
        });
    }
    let o = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let o = g.matmul(o, wo);
    Ok(g.add_row(o, bo))
}

/// Quadratic softmax attention without the tape, for benchmarking against
/// [`linear_attention_plain`].
pub fn softmax_attention_plain(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let mut s = q.matmul(&k.transpose());
    let scale = 1.0 / (q.cols() as f64).sqrt();
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x * scale - mx).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    s.matmul(v)
}

/// Linear attention without the tape.
pub fn linear_attention_plain(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
    let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
    let fq = q.map(phi);
    let fk = k.map(phi);
    let kv = crate::tensor::matmul_t(&fk, true, v, false);
    let ksum = fk.col_sum();
    let mut num = fq.matmul(&kv);
    for r in 0..num.rows() {
        let den: f64 = fq.row(r).iter().zip(ksum.data()).map(|(a, b)| a * b).sum();
        let den = den.max(LINEAR_ATTENTION_EPS);
        for x in num.row_mut(r) {
            *x /= den;
        }
    }
    num
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_inputs;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn run_linear(q: &Matrix, k: &Matrix, v: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = linear_attention(&mut g, q, k, v);
        g.value(o).clone()
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = (randn(1, 8, 1), randn(1, 8, 2), randn(1, 5, 3));
        let o = run_linear(&q, &k, &v);
        for (a, b) in o.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn permutation_equivariant_against_brute_force() {
        let (q, k, v) = (randn(5, 4, 4), randn(5, 4, 5), randn(5, 3, 6));
        // Brute force: explicit pairwise kernel weights.
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        let brute = Matrix::from_fn(5, 3, |i, c| {
            let w: Vec<f64> = (0..5)
                .map(|j| (0..4).map(|d| phi(q.get(i, d)) * phi(k.get(j, d))).sum())
                .collect();
            let z: f64 = w.iter().sum();
            (0..5).map(|j| w[j] * v.get(j, c)).sum::<f64>() / z
        });
        let out = run_linear(&q, &k, &v);
        assert!(out.max_abs_diff(&brute) < 1e-12);

        let perm = [3, 0, 4, 1, 2];
        let p = |m: &Matrix| m.select_rows(&perm);
        let permuted = run_linear(&p(&q), &p(&k), &p(&v));
        assert!(permuted.max_abs_diff(&p(&out)) < 1e-12);
    }

    #[test]
    fn plain_and_tape_versions_agree() {
        let (q, k, v) = (randn(7, 4, 7), randn(7, 4, 8), randn(7, 4, 9));
        assert!(run_linear(&q, &k, &v).max_abs_diff(&linear_attention_plain(&q, &k, &v)) < 1e-12);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = softmax_attention(&mut g, qv, kv, vv, None);
        assert!(g.value(o).max_abs_diff(&softmax_attention_plain(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn linear_attention_gradcheck() {
        let inputs = [randn(4, 3, 10), randn(4, 3, 11), randn(4, 2, 12)];
        let r = check_inputs(&inputs, 1e-5, 1e-5, 1e-8, |g, x| {
            let o = linear_attention(g, x[0], x[1], x[2]);
            let s = g.mul(o, o);
            g.mean(s)
        });
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn masked_keys_are_ignored() {
        let (q, k, v) = (randn(3, 4, 13), randn(4, 4, 14), randn(4, 2, 15));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let masked = softmax_attention(&mut g, qv, kv, vv, Some(&[true, true, false, true]));
        let keep = [0, 1, 3];
        let want = softmax_attention_plain(&q, &k.select_rows(&keep), &v.select_rows(&keep));
        assert!(g.value(masked).max_abs_diff(&want) < 1e-12);
    }
}
