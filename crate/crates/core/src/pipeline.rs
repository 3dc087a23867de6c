//! Glue between the frozen autoencoder and the denoiser: latent
//! normalization and training-set construction.

use crate::checkpoint::Container;
use crate::data::Song;
use crate::dcae::{Dcae, Latent};
use crate::error::{Error, Result};
use crate::objectives::TeacherTargets;
use crate::tensor::Matrix;
use crate::trainer::TrainItem;

/// Scalar affine map bringing latents to roughly unit variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

impl LatentStats {
    pub const IDENTITY: LatentStats = LatentStats { mean: 0.0, std: 1.0 };

    pub fn compute(latents: &[Latent]) -> Result<Self> {
        let n: usize = latents.iter().map(|l| l.data().len()).sum();
        if n == 0 {
            return Err(Error::InvalidArgument("no latent values to normalize".into()));
        }
        let mean = latents.iter().flat_map(|l| l.data()).sum::<f64>() / n as f64;
        let var = latents.iter().flat_map(|l| l.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        // Round through f32 so the stored copy is exact.
        Ok(Self {
            mean: mean as f32 as f64,
            std: (var.sqrt().max(1e-6)) as f32 as f64,
        })
    }

    pub fn normalize(&self, tokens: &Matrix) -> Matrix {
        tokens.map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, tokens: &Matrix) -> Matrix {
        tokens.map(|v| v * self.std + self.mean)
    }

    pub const TENSOR: &'static str = "meta.latent_stats";

    pub fn to_container(&self, c: &mut Container) -> Result<()> {
        c.insert_matrix(Self::TENSOR, &Matrix::row_vector(vec![self.mean, self.std]))?;
        Ok(())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let m = c.matrix_with_shape(Self::TENSOR, 1, 2)?;
        Ok(Self {
            mean: m.data()[0],
            std: m.data()[1],
        })
    }
}

/// Encodes every song, fits normalization stats, and pairs each latent
/// with its conditions and ground-truth teacher features.
pub fn build_train_items(dcae: &Dcae, songs: &[Song]) -> Result<(Vec<TrainItem>, LatentStats)> {
    let latents: Vec<Latent> = songs.iter().map(|s| dcae.encode(&s.mel)).collect::<Result<_>>()?;
    let stats = LatentStats::compute(&latents)?;
    let items = songs
        .iter()
        .zip(&latents)
        .map(|(s, l)| {
            let teachers = TeacherTargets::compute(&s.mel)?;
            TrainItem::new(stats.normalize(&l.to_tokens()), s.bundle()?, &teachers)
        })
        .collect::<Result<_>>()?;
    Ok((items, stats))
}
