//! Low-rank adapters on weight matrices of the parameter store.
//!
//! An adapter on `W` (`in × out`, applied as `x·W`) stores `lora.{W}.b`
//! (`in × r`, zero at creation) and `lora.{W}.a` (`r × out`). The effective
//! weight is `W + (alpha / r)·B·A`; the base tensor is never written unless
//! [`merge`] is called.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};

pub const PREFIX: &str = "lora.";

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<String>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Attention projections of every block, the usual adapter targets.
pub fn default_targets(blocks: usize) -> Vec<String> {
    let mut v = Vec::new();
    for i in 0..blocks {
        for path in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                v.push(format!("dit.block{i}.{path}.{w}"));
            }
        }
    }
    v
}

pub fn is_lora_param(name: &str) -> bool {
    name.starts_with(PREFIX)
}

fn names(target: &str) -> (String, String) {
    (format!("{PREFIX}{target}.a"), format!("{PREFIX}{target}.b"))
}

/// Adds fresh adapter tensors for every target to `store`.
pub fn create(store: &mut ParamStore, config: &LoraConfig, seed: u64) -> Result<()> {
    if config.rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1047a);
    let mut init = Init::new(&mut rng);
    for target in &config.targets {
        let w = store.get(target)?;
        let (rows, cols) = w.shape();
        if config.rank >= rows.min(cols) {
            return Err(Error::LoraRank {
                name: target.clone(),
                rank: config.rank,
                rows,
                cols,
            });
        }
        let (a, b) = names(target);
        let a_init = init.linear(config.rank, cols);
        store.insert(a, a_init);
        store.insert(b, crate::tensor::Matrix::zeros(rows, config.rank));
    }
    Ok(())
}

/// Rebinds every adapted target in `p` to `W + scale·B·A`.
pub fn apply(g: &mut Graph<'_>, p: &mut Bound, config: &LoraConfig) -> Result<()> {
    for target in &config.targets {
        let (a, b) = names(target);
        let (av, bv, wv) = (p.var(&a)?, p.var(&b)?, p.var(target)?);
        let ba = g.matmul(bv, av);
        let delta = g.scale(ba, config.scale());
        let w = g.add(wv, delta);
        p.replace(target, w)?;
    }
    Ok(())
}

/// Folds adapters into their base weights and removes them from the store.
pub fn merge(store: &ParamStore, config: &LoraConfig) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, m) in store.iter() {
        if is_lora_param(name) {
            continue;
        }
        let mut m = m.clone();
        if config.targets.iter().any(|t| t == name) {
            let (a, b) = names(name);
            let delta = store.get(&b)?.matmul(store.get(&a)?);
            m.axpy(config.scale(), &delta);
        }
        out.insert(name.to_string(), m);
    }
    Ok(out)
}

/// Parameter store with all adapter tensors removed.
pub fn strip(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, m) in store.iter() {
        if !is_lora_param(name) {
            out.insert(name.to_string(), m.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{CondInput, Dit, DitConfig};
    use crate::tensor::Matrix;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng))
    }

    fn setup() -> (Dit, ParamStore, LoraConfig) {
        let dit = Dit::new(DitConfig { d_model: 8, blocks: 2, heads: 2, ffn_mult: 2, token_width: 8 }).unwrap();
        let mut store = ParamStore::new();
        dit.init_params(&mut store, 2);
        store.insert("dit.out.w", randn(8, 8, 3).map(|v| (v * 0.3) as f32 as f64));
        let cfg = LoraConfig { rank: 2, alpha: 4.0, targets: default_targets(2) };
        (dit, store, cfg)
    }

    fn velocity(dit: &Dit, store: &ParamStore, lora: Option<&LoraConfig>) -> Matrix {
        let mut g = Graph::new();
        let mut p = store.bind(&mut g, |_| false);
        if let Some(c) = lora {
            apply(&mut g, &mut p, c).unwrap();
        }
        let x = g.constant(randn(5, 8, 7));
        let c = g.constant(randn(3, 8, 8));
        let out = dit.forward(&mut g, &p, x, 0.6, &CondInput { seq: c, mask: vec![true; 3] }).unwrap();
        g.value(out.velocity).clone()
    }

    #[test]
    fn fresh_adapter_is_bit_identical() {
        let (dit, mut store, cfg) = setup();
        let base = velocity(&dit, &store, None);
        create(&mut store, &cfg, 1).unwrap();
        assert_eq!(velocity(&dit, &store, Some(&cfg)), base);
    }

    #[test]
    fn merge_matches_adapted_outputs() {
        let (dit, mut store, cfg) = setup();
        create(&mut store, &cfg, 1).unwrap();
        for t in &cfg.targets {
            let (_, b) = names(t);
            let (r, c) = store.get(&b).unwrap().shape();
            store.insert(b, randn(r, c, 9).scale(0.1));
        }
        let adapted = velocity(&dit, &store, Some(&cfg));
        let merged = merge(&store, &cfg).unwrap();
        assert!(merged.names().all(|n| !is_lora_param(n)));
        let base_untouched = strip(&store);
        assert_ne!(velocity(&dit, &base_untouched, None), adapted);
        assert!(velocity(&dit, &merged, None).max_abs_diff(&adapted) < 1e-6);
    }

    #[test]
    fn rank_too_large_rejected() {
        let (_, mut store, mut cfg) = setup();
        cfg.rank = 8;
        assert!(matches!(create(&mut store, &cfg, 0), Err(Error::LoraRank { .. })));
        cfg.rank = 2;
        cfg.targets = vec!["dit.nope".into()];
        assert!(create(&mut store, &cfg, 0).is_err());
    }
}
