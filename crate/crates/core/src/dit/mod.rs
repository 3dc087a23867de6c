//! Linear diffusion transformer over patchified latents.
//!
//! Each latent time frame becomes one token. Blocks are pre-norm residual:
//! modulated linear self-attention, softmax cross-attention onto the
//! condition sequence, then a modulated feed-forward layer with a depthwise
//! convolution along time. A single timestep MLP produces the modulation for
//! every block; blocks only add a learned offset to it.

pub mod attention;
pub mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::dcae::Latent;
use crate::error::{Error, Result};
use crate::nn::{self, linear};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Matrix;
use attention::{init_attention, multi_head, Kernel};

/// Longest latent sequence accepted (about four minutes at 10.77 Hz).
pub const LATENT_BUDGET: usize = 2584;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DitConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Width of one latent frame, `8 · F_lat`.
    pub token_width: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            blocks: 8,
            heads: 4,
            ffn_mult: 2,
            token_width: 8 * 16,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.heads == 0 || self.d_model % self.heads != 0 || self.ffn_mult == 0 {
            return Err(Error::InvalidArgument(format!(
                "dit: need blocks ≥ 1, heads dividing d_model and ffn_mult ≥ 1 (got {self:?})"
            )));
        }
        if self.d_model % 2 != 0 || self.token_width == 0 {
            return Err(Error::InvalidArgument("dit: d_model must be even".into()));
        }
        Ok(())
    }

    /// 1-based index of the block whose output feeds the alignment loss:
    /// a third of the way up (block 8 of 24).
    pub fn repa_tap(&self) -> usize {
        self.blocks.div_ceil(3)
    }

    /// Names of the tensors that make up the timestep modulation.
    pub fn modulation_param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["dit.t1.w", "dit.t1.b", "dit.t2.w", "dit.t2.b", "dit.adaln.w", "dit.adaln.b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((0..self.blocks).map(|i| format!("dit.block{i}.mod")));
        v
    }
}

/// Condition sequence already projected to `d_model`, with a key mask
/// (`false` = padding, never attended).
#[derive(Clone, Debug)]
pub struct CondInput {
    pub seq: Var,
    pub mask: Vec<bool>,
}

/// Velocity prediction plus every block's output, in block order.
#[derive(Clone, Debug)]
pub struct DitOutput {
    pub velocity: Var,
    pub hidden: Vec<Var>,
}

impl DitOutput {
    /// Post-block activation for 1-based block `index`.
    pub fn hidden_at(&self, index: usize) -> Result<Var> {
        index
            .checked_sub(1)
            .and_then(|i| self.hidden.get(i))
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no block {index} (have {})", self.hidden.len())))
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
}

impl Dit {
    pub fn new(config: DitConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let c = &self.config;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd17_0001);
        let mut init = Init::new(&mut rng);
        nn::init_linear(store, &mut init, "dit.in", c.token_width, d);
        nn::init_linear(store, &mut init, "dit.t1", d, d);
        nn::init_linear(store, &mut init, "dit.t2", d, d);
        store.insert("dit.adaln.w", init.normal(d, 6 * d, 0.5 / (d as f64).sqrt()));
        store.insert("dit.adaln.b", Matrix::zeros(1, 6 * d));
        let hidden = c.ffn_mult * d;
        for i in 0..c.blocks {
            let b = format!("dit.block{i}");
            store.insert(format!("{b}.mod"), Matrix::zeros(1, 6 * d));
            init_attention(store, &mut init, &format!("{b}.self"), d, d, d);
            init_attention(store, &mut init, &format!("{b}.cross"), d, d, d);
            nn::init_linear(store, &mut init, &format!("{b}.ffn.w1"), d, hidden);
            store.insert(format!("{b}.ffn.dw"), init.normal(3, hidden, 1.0 / 3f64.sqrt()));
            store.insert(format!("{b}.ffn.dw_b"), Matrix::zeros(1, hidden));
            nn::init_linear(store, &mut init, &format!("{b}.ffn.w2"), hidden, d);
        }
        store.insert("dit.final.mod", Matrix::zeros(1, 2 * d));
        nn::init_linear_zero(store, "dit.out", d, c.token_width);
    }

    /// Latent frames → `[T_lat × d_model]` tokens with position features.
    pub fn patchify(&self, g: &mut Graph<'_>, p: &Bound, tokens: Var) -> Result<Var> {
        let (l, w) = g.shape(tokens);
        if w != self.config.token_width {
            return Err(Error::shape(format!(
                "latent token width {w}, model expects {}",
                self.config.token_width
            )));
        }
        if l == 0 {
            return Err(Error::shape("empty latent sequence"));
        }
        if l > LATENT_BUDGET {
            return Err(Error::OverBudget {
                what: "latent",
                len: l,
                budget: LATENT_BUDGET,
            });
        }
        let h = self.project_in(g, p, tokens)?;
        let pos = g.constant(nn::octave_positions(l, self.config.d_model));
        Ok(g.add(h, pos))
    }

    /// The token projection alone, without position features.
    pub fn project_in(&self, g: &mut Graph<'_>, p: &Bound, tokens: Var) -> Result<Var> {
        linear(g, p, tokens, "dit.in")
    }

    /// `[T_lat × d_model]` → `[T_lat × token_width]`.
    pub fn unpatchify(&self, g: &mut Graph<'_>, p: &Bound, h: Var) -> Result<Var> {
        linear(g, p, h, "dit.out")
    }

    /// Timestep embedding and the shared base modulation `[1 × 6D]`.
    pub fn adaln_single(&self, g: &mut Graph<'_>, p: &Bound, t: f64) -> Result<(Var, Var)> {
        let feats = g.constant(nn::timestep_features(t, self.config.d_model));
        let h = linear(g, p, feats, "dit.t1")?;
        let h = g.silu(h);
        let temb = linear(g, p, h, "dit.t2")?;
        let s = g.silu(temb);
        let base = linear(g, p, s, "dit.adaln")?;
        Ok((temb, base))
    }

    /// Per-block modulation rows: base plus that block's offset.
    pub fn block_modulation(&self, g: &mut Graph<'_>, p: &Bound, base: Var, block: usize) -> Result<Var> {
        let off = p.var(&format!("dit.block{block}.mod"))?;
        Ok(g.add(base, off))
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, tokens: Var, t: f64, cond: &CondInput) -> Result<DitOutput> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, 1]")));
        }
        let c = &self.config;
        let d = c.d_model;
        if g.shape(cond.seq).1 != d || g.shape(cond.seq).0 != cond.mask.len() {
            return Err(Error::shape("condition sequence must be [L × d_model] with one mask entry per row"));
        }
        let mut x = self.patchify(g, p, tokens)?;
        let (temb, base) = self.adaln_single(g, p, t)?;
        let mut hidden = Vec::with_capacity(c.blocks);
        for i in 0..c.blocks {
            let m = self.block_modulation(g, p, base, i)?;
            let part = |g: &mut Graph<'_>, k: usize| g.slice_cols(m, k * d, d);
            let (shift1, scale1, gate1) = (part(g, 0), part(g, 1), part(g, 2));
            let (shift2, scale2, gate2) = (part(g, 3), part(g, 4), part(g, 5));
            let b = format!("dit.block{i}");

            let h = modulate(g, x, shift1, scale1);
            let a = multi_head(g, p, h, h, &format!("{b}.self"), c.heads, Kernel::Linear, None)?;
            let a = g.mul_row(a, gate1);
            x = g.add(x, a);

            let h = g.layer_norm(x, LN_EPS);
            let a = multi_head(g, p, h, cond.seq, &format!("{b}.cross"), c.heads, Kernel::Softmax, Some(&cond.mask))?;
            x = g.add(x, a);

            let h = modulate(g, x, shift2, scale2);
            let f = ffn_1d(g, p, h, &format!("{b}.ffn"))?;
            let f = g.mul_row(f, gate2);
            x = g.add(x, f);
            hidden.push(x);
        }
        let fm = p.var("dit.final.mod")?;
        let tt = g.concat_cols(&[temb, temb]);
        let fm = g.add(fm, tt);
        let shift = g.slice_cols(fm, 0, d);
        let scale = g.slice_cols(fm, d, d);
        let h = modulate(g, x, shift, scale);
        let velocity = self.unpatchify(g, p, h)?;
        Ok(DitOutput { velocity, hidden })
    }
}

/// `LN(x)·(1 + scale) + shift` with row-vector modulation.
fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.layer_norm(x, LN_EPS);
    let s = g.add_scalar(scale, 1.0);
    let h = g.mul_row(h, s);
    g.add_row(h, shift)
}

/// Pointwise expansion, depthwise kernel-3 convolution along time (zero
/// padded), SiLU, pointwise projection.
pub fn ffn_1d(g: &mut Graph<'_>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, p, x, &format!("{prefix}.w1"))?;
    let k = p.var(&format!("{prefix}.dw"))?;
    let kb = p.var(&format!("{prefix}.dw_b"))?;
    let mut acc = None;
    for (tap, offset) in [-1isize, 0, 1].into_iter().enumerate() {
        let row = g.select_rows(k, &[Some(tap)]);
        let shifted = if offset == 0 { h } else { nn::shift_rows(g, h, offset) };
        let term = g.mul_row(shifted, row);
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term),
        });
    }
    let y = g.add_row(acc.expect("three taps"), kb);
    let y = g.silu(y);
    linear(g, p, y, &format!("{prefix}.w2"))
}

/// Latent → token matrix with the width check the model needs.
pub fn latent_tokens(latent: &Latent, config: &DitConfig) -> Result<Matrix> {
    let m = latent.to_tokens();
    if m.cols() != config.token_width {
        return Err(Error::shape(format!(
            "latent token width {} does not match model width {}",
            m.cols(),
            config.token_width
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn micro() -> (Dit, ParamStore) {
        let dit = Dit::new(DitConfig {
            d_model: 4,
            blocks: 2,
            heads: 2,
            ffn_mult: 2,
            token_width: 8,
        })
        .unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 3);
        // Non-zero head/offsets so every parameter influences the output.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut init = Init::new(&mut rng);
        store.insert("dit.out.w", init.normal(4, 8, 0.5));
        store.insert("dit.final.mod", init.normal(1, 8, 0.3));
        for i in 0..2 {
            store.insert(format!("dit.block{i}.mod"), init.normal(1, 24, 0.3));
        }
        (dit, store)
    }

    fn run(dit: &Dit, store: &ParamStore, x: &Matrix, t: f64, cond: &Matrix, mask: &[bool]) -> Matrix {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let out = dit
            .forward(&mut g, &p, xv, t, &CondInput { seq: cv, mask: mask.to_vec() })
            .unwrap();
        g.value(out.velocity).clone()
    }

    #[test]
    fn zero_head_gives_zero_velocity() {
        let dit = Dit::new(DitConfig { token_width: 16, d_model: 8, blocks: 2, heads: 2, ffn_mult: 2 }).unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 1);
        let v = run(&dit, &store, &randn(5, 16, 2), 0.3, &randn(3, 8, 3), &[true; 3]);
        assert_eq!(v.shape(), (5, 16));
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn deterministic_and_shape_preserving() {
        let (dit, store) = micro();
        let x = randn(6, 8, 4);
        let c = randn(3, 4, 5);
        let a = run(&dit, &store, &x, 0.7, &c, &[true, true, false]);
        let b = run(&dit, &store, &x, 0.7, &c, &[true, true, false]);
        assert_eq!(a, b);
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn masked_condition_rows_have_no_effect() {
        let (dit, store) = micro();
        let x = randn(4, 8, 6);
        let mut c = randn(3, 4, 7);
        let a = run(&dit, &store, &x, 0.5, &c, &[true, false, true]);
        c.row_mut(1).iter_mut().for_each(|v| *v += 10.0);
        let b = run(&dit, &store, &x, 0.5, &c, &[true, false, true]);
        assert_eq!(a, b);
    }

    #[test]
    fn gradcheck_velocity_norm() {
        let (dit, store) = micro();
        let x = randn(4, 8, 8);
        let c = randn(3, 4, 9);
        let report = check_params(&store, |_| true, 1e-5, 1e-3, 1e-7, |g, p| {
            let xv = g.constant(x.clone());
            let cv = g.constant(c.clone());
            let out = dit
                .forward(g, p, xv, 0.4, &CondInput { seq: cv, mask: vec![true, true, false] })
                .unwrap();
            let sq = g.mul(out.velocity, out.velocity);
            g.mean(sq)
        });
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
        assert!(report.checked > 300 && report.checked < 1000, "{}", report.checked);
    }

    #[test]
    fn hidden_states_by_index() {
        let (dit, store) = micro();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(randn(3, 8, 10));
        let cv = g.constant(randn(2, 4, 11));
        let out = dit.forward(&mut g, &p, xv, 0.2, &CondInput { seq: cv, mask: vec![true; 2] }).unwrap();
        assert_eq!(out.hidden.len(), 2);
        assert_eq!(out.hidden_at(1).unwrap(), out.hidden[0]);
        assert!(out.hidden_at(0).is_err() && out.hidden_at(3).is_err());
        assert_eq!(g.shape(out.hidden[1]), (3, 4));
    }

    #[test]
    fn repa_tap_scales_with_depth() {
        let tap = |blocks| DitConfig { blocks, ..DitConfig::default() }.repa_tap();
        assert_eq!(tap(24), 8);
        assert_eq!(tap(8), 3);
        assert_eq!(tap(1), 1);
    }

    #[test]
    fn adaln_parameters_are_shared() {
        let count = |blocks| {
            let dit = Dit::new(DitConfig { blocks, ..DitConfig::default() }).unwrap();
            let mut s = ParamStore::new();
            dit.init_params(&mut s, 0);
            dit.config
                .modulation_param_names()
                .iter()
                .map(|n| s.get(n).unwrap().len())
                .sum::<usize>()
        };
        let d = 128;
        let per_block = 6 * d;
        assert_eq!(count(8), count(1) + 7 * per_block);
        let mlp = count(1) - per_block;
        assert!(count(8) < 8 * mlp);
        // The only modulation MLP is the one under dit.t1/t2/adaln.
        let dit = Dit::new(DitConfig::default()).unwrap();
        let mut s = ParamStore::new();
        dit.init_params(&mut s, 0);
        assert_eq!(s.names().filter(|n| n.contains("adaln")).count(), 2);
    }

    #[test]
    fn fresh_offsets_give_identical_block_modulation() {
        let dit = Dit::new(DitConfig { d_model: 8, blocks: 3, heads: 2, ffn_mult: 2, token_width: 8 }).unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 5);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let (_, base) = dit.adaln_single(&mut g, &p, 0.3).unwrap();
        let mods: Vec<Matrix> = (0..3)
            .map(|i| {
                let m = dit.block_modulation(&mut g, &p, base, i).unwrap();
                g.value(m).clone()
            })
            .collect();
        assert_eq!(mods[0], mods[1]);
        assert_eq!(mods[1], mods[2]);
    }

    #[test]
    fn over_budget_latent_rejected() {
        let dit = Dit::new(DitConfig { d_model: 4, blocks: 1, heads: 1, ffn_mult: 1, token_width: 2 }).unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(Matrix::zeros(LATENT_BUDGET + 1, 2));
        let cv = g.constant(Matrix::zeros(1, 4));
        let err = dit.forward(&mut g, &p, xv, 0.5, &CondInput { seq: cv, mask: vec![true] }).unwrap_err();
        assert!(matches!(err, Error::OverBudget { what: "latent", .. }));
    }

    #[test]
    fn patchify_identity_round_trip() {
        let dit = Dit::new(DitConfig { d_model: 8, blocks: 1, heads: 1, ffn_mult: 1, token_width: 8 }).unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 0);
        store.insert("dit.in.w", Matrix::identity(8));
        store.insert("dit.out.w", Matrix::identity(8));
        let latent = Latent::new((0..8 * 3).map(|i| i as f64 * 0.25).collect(), 1, 3, 10.0).unwrap();
        let tokens = latent_tokens(&latent, &dit.config).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(tokens.clone());
        assert_eq!(dit.patchify(&mut g, &p, xv).map(|h| g.shape(h)).unwrap(), (3, 8));
        let h = dit.project_in(&mut g, &p, xv).unwrap();
        let back = dit.unpatchify(&mut g, &p, h).unwrap();
        let round = Latent::from_tokens(g.value(back), 1, 10.0).unwrap();
        assert_eq!(round, latent);
    }

    #[test]
    fn ffn_single_token_is_pointwise() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init::new(&mut rng);
        nn::init_linear(&mut store, &mut init, "f.w1", 3, 6);
        store.insert("f.dw", init.normal(3, 6, 1.0));
        store.insert("f.dw_b", init.normal(1, 6, 1.0));
        nn::init_linear(&mut store, &mut init, "f.w2", 6, 3);
        let x = randn(1, 3, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let y = ffn_1d(&mut g, &p, xv, "f").unwrap();
        let s = |n: &str| store.get(n).unwrap();
        let h = x.matmul(s("f.w1.w")).add(s("f.w1.b"));
        let center = Matrix::row_vector(s("f.dw").row(1).to_vec());
        let h = h.zip_map(&center, |a, b| a * b).add(s("f.dw_b")).map(|v| v / (1.0 + (-v).exp()));
        let want = h.matmul(s("f.w2.w")).add(s("f.w2.b"));
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn ffn_zero_depthwise_adds_nothing() {
        let mut store = ParamStore::new();
        store.insert("f.w1.w", Matrix::identity(4));
        store.insert("f.w1.b", Matrix::zeros(1, 4));
        store.insert("f.dw", Matrix::zeros(3, 4));
        store.insert("f.dw_b", Matrix::zeros(1, 4));
        store.insert("f.w2.w", Matrix::identity(4));
        store.insert("f.w2.b", Matrix::zeros(1, 4));
        let x = randn(5, 4, 3);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let xv = g.constant(x.clone());
        let y = ffn_1d(&mut g, &p, xv, "f").unwrap();
        let out = g.add(xv, y);
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn ffn_translation_equivariant_in_interior() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut init = Init::new(&mut rng);
        nn::init_linear(&mut store, &mut init, "f.w1", 3, 6);
        store.insert("f.dw", init.normal(3, 6, 1.0));
        store.insert("f.dw_b", init.normal(1, 6, 1.0));
        nn::init_linear(&mut store, &mut init, "f.w2", 6, 3);
        let x = randn(16, 3, 5);
        let k = 3;
        // Shift down by k, filling the top with fresh values.
        let fill = randn(k, 3, 6);
        let shifted = Matrix::from_fn(16, 3, |r, c| if r < k { fill.get(r, c) } else { x.get(r - k, c) });
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, |_| false);
            let v = g.constant(m.clone());
            let y = ffn_1d(&mut g, &p, v, "f").unwrap();
            g.value(y).clone()
        };
        let (a, b) = (eval(&x), eval(&shifted));
        // Output rows 1..15 of x (away from both boundaries) reappear k rows later.
        for r in 1..16 - k - 1 {
            for c in 0..3 {
                assert!((a.get(r, c) - b.get(r + k, c)).abs() < 1e-12);
            }
        }
    }
}
