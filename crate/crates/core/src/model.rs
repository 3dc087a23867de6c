//! The denoiser together with its conditioning encoders and alignment
//! heads, sharing one parameter store.

use crate::autograd::Graph;
use crate::conditioning::{ConditionBundle, ConditionConfig, ConditionEncoder};
use crate::dit::lora::{self, LoraConfig};
use crate::dit::{CondInput, Dit, DitConfig};
use crate::error::{Error, Result};
use crate::objectives::init_ssl_heads;
use crate::params::{Bound, ParamStore};
use crate::sampler::VelocityField;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dit: DitConfig,
    pub cond: ConditionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        if self.cond.d_model != self.dit.d_model {
            return Err(Error::InvalidArgument(format!(
                "conditioning width {} must equal d_model {}",
                self.cond.d_model, self.dit.d_model
            )));
        }
        Ok(())
    }
}

/// Condition sequence computed once and reused for every sampler step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCond {
    pub seq: Matrix,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct MusicModel {
    pub dit: Dit,
    pub cond: ConditionEncoder,
    pub params: ParamStore,
    pub lora: Option<LoraConfig>,
}

impl MusicModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dit = Dit::new(config.dit.clone())?;
        let cond = ConditionEncoder::new(config.cond.clone())?;
        let mut params = ParamStore::new();
        dit.init_params(&mut params, seed);
        cond.init_params(&mut params, seed);
        init_ssl_heads(&mut params, config.dit.d_model, seed);
        Ok(Self {
            dit,
            cond,
            params,
            lora: None,
        })
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore, lora: Option<LoraConfig>) -> Result<Self> {
        config.validate()?;
        let model = Self {
            dit: Dit::new(config.dit.clone())?,
            cond: ConditionEncoder::new(config.cond.clone())?,
            params,
            lora,
        };
        // Every expected tensor must be present with the right shape.
        let reference = Self::init(config, 0)?;
        for (name, m) in reference.params.iter() {
            let got = model.params.get(name)?;
            if got.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: checkpoint {:?}, config {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            dit: self.dit.config.clone(),
            cond: self.cond.config.clone(),
        }
    }

    /// Binds parameters and rebinds adapted weights when an adapter is set.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: impl Fn(&str) -> bool) -> Result<Bound> {
        let mut p = self.params.bind(g, trainable);
        if let Some(cfg) = &self.lora {
            lora::apply(g, &mut p, cfg)?;
        }
        Ok(p)
    }

    pub fn prepare(&self, bundle: &ConditionBundle) -> Result<PreparedCond> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false)?;
        let c = self.cond.encode(&mut g, &p, bundle)?;
        Ok(PreparedCond {
            seq: g.value(c.seq).clone(),
            mask: c.mask,
        })
    }

    pub fn prepare_unconditional(&self) -> Result<PreparedCond> {
        self.prepare(&ConditionBundle::unconditional())
    }

    /// Adds an adapter (B = 0) and switches the model to use it.
    pub fn attach_lora(&mut self, config: LoraConfig, seed: u64) -> Result<()> {
        lora::create(&mut self.params, &config, seed)?;
        self.lora = Some(config);
        Ok(())
    }
}

impl VelocityField for MusicModel {
    type Cond = PreparedCond;

    fn velocity(&self, x: &Matrix, t: f64, cond: &PreparedCond) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false)?;
        let xv = g.constant(x.clone());
        let seq = g.constant(cond.seq.clone());
        let out = self.dit.forward(
            &mut g,
            &p,
            xv,
            t,
            &CondInput {
                seq,
                mask: cond.mask.clone(),
            },
        )?;
        Ok(g.value(out.velocity).clone())
    }
}
