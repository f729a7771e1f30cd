//! Additive deep kernel: `alpha_v^2 k_SE(e(x), e(x')) + alpha_i^2 k_SE(g(i), g(i'))`.
//!
//! Inducing points live directly in the latent space. Row `m` of the inducing
//! matrix is `[z_v | z_i]`: the first `D_v` columns pair with encoder outputs
//! and the last `D_i` columns with individual embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::encoder::{EmbeddingTable, EncoderParams, EntityId, Pass};
use crate::error::{Error, Result};
use crate::numerics::{add_jitter, DenseMatrix, DEFAULT_JITTER};

/// Largest dataset for which the full `N x N` kernel is materialized.
pub const KXX_CAP: usize = 2000;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared-exponential kernel with unit lengthscale, `exp(-|a - b|^2 / 2)`.
pub fn k_se(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("k_se", a.len(), b.len()));
    }
    Ok((-0.5 * sq_dist(a, b)).exp())
}

/// How covariates reach the time-varying latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureMap {
    /// Learned deep encoder.
    Encoder(EncoderParams),
    /// Raw covariates (plain RBF kernel on the inputs).
    Identity { dim: usize },
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Encoder(e) => e.input_dim(),
            FeatureMap::Identity { dim } => *dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            FeatureMap::Encoder(e) => e.output_dim(),
            FeatureMap::Identity { dim } => *dim,
        }
    }

    pub fn map(&self, x: &[f64], pass: Pass<'_>) -> Result<Vec<f64>> {
        match self {
            FeatureMap::Encoder(e) => e.encode(x, pass),
            FeatureMap::Identity { dim } => {
                if x.len() != *dim {
                    return Err(Error::shape("identity feature map", dim, x.len()));
                }
                Ok(x.to_vec())
            }
        }
    }

    /// Eval-mode latents of every row of `x`.
    pub fn map_rows(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("feature map input", self.input_dim(), x.cols()));
        }
        let d = self.latent_dim();
        let mut out = DenseMatrix::zeros(x.rows(), d);
        if d == 0 {
            return Ok(out);
        }
        out.as_mut_slice()
            .par_chunks_mut(d)
            .enumerate()
            .try_for_each(|(r, row)| -> Result<()> {
                row.copy_from_slice(&self.map(x.row(r), Pass::Eval)?);
                Ok(())
            })?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub alpha_v: f64,
    pub alpha_i: f64,
    pub features: FeatureMap,
    pub embeddings: EmbeddingTable,
}

/// `M x (D_v + D_i)` inducing locations in the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPoints {
    pub z: DenseMatrix,
    pub dv: usize,
}

impl InducingPoints {
    pub fn new(z: DenseMatrix, dv: usize) -> Result<Self> {
        if z.rows() == 0 || dv > z.cols() {
            return Err(Error::InvalidConfig(format!(
                "inducing matrix {}x{} cannot hold a {dv}-wide time-varying block",
                z.rows(),
                z.cols()
            )));
        }
        if !z.is_finite() {
            return Err(Error::NonFiniteValue("inducing points".into()));
        }
        Ok(InducingPoints { z, dv })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    pub fn di(&self) -> usize {
        self.z.cols() - self.dv
    }

    #[inline]
    pub fn varying(&self, m: usize) -> &[f64] {
        &self.z.row(m)[..self.dv]
    }

    #[inline]
    pub fn invariant(&self, m: usize) -> &[f64] {
        &self.z.row(m)[self.dv..]
    }
}

/// Time-varying kernel between two covariate vectors (encoder in eval mode).
pub fn k_timevarying(kp: &KernelParams, x1: &[f64], x2: &[f64]) -> Result<f64> {
    let a = kp.features.map(x1, Pass::Eval)?;
    let b = kp.features.map(x2, Pass::Eval)?;
    k_se(&a, &b)
}

/// Time-invariant kernel between two entities (individuals or inducing points).
pub fn k_timeinvariant(kp: &KernelParams, z: &InducingPoints, id1: EntityId, id2: EntityId) -> Result<f64> {
    let a = kp.embeddings.embed(&z.z, id1)?;
    let b = kp.embeddings.embed(&z.z, id2)?;
    k_se(a, b)
}

/// One observation as seen by the kernel.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub covariates: &'a [f64],
    pub entity: EntityId,
}

pub fn k_additive(kp: &KernelParams, z: &InducingPoints, p1: Point<'_>, p2: Point<'_>) -> Result<f64> {
    let v = k_timevarying(kp, p1.covariates, p2.covariates)?;
    let i = k_timeinvariant(kp, z, p1.entity, p2.entity)?;
    Ok(kp.alpha_v.powi(2) * v + kp.alpha_i.powi(2) * i)
}

/// The two additive components of the cross- and inducing kernels, before
/// scaling by the alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlocks {
    pub kv_xz: DenseMatrix,
    pub ki_xz: DenseMatrix,
    pub kv_zz: DenseMatrix,
    pub ki_zz: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrices {
    /// Only materialized on request and for `N <= KXX_CAP`.
    pub kxx: Option<DenseMatrix>,
    pub kxz: DenseMatrix,
    /// Without jitter; see [`KernelMatrices::kzz_jittered`].
    pub kzz: DenseMatrix,
    pub jitter: f64,
}

impl KernelMatrices {
    pub fn new(kxz: DenseMatrix, kzz: DenseMatrix) -> Self {
        KernelMatrices {
            kxx: None,
            kxz,
            kzz,
            jitter: 0.0,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn n(&self) -> usize {
        self.kxz.rows()
    }

    pub fn m(&self) -> usize {
        self.kzz.rows()
    }

    pub fn kzz_jittered(&self) -> DenseMatrix {
        add_jitter(&self.kzz, self.jitter)
    }
}

impl KernelBlocks {
    pub fn combine(&self, alpha_v: f64, alpha_i: f64, jitter: f64) -> KernelMatrices {
        let (av, ai) = (alpha_v * alpha_v, alpha_i * alpha_i);
        let mix = |v: &DenseMatrix, i: &DenseMatrix| {
            DenseMatrix::from_fn(v.rows(), v.cols(), |r, c| av * v[(r, c)] + ai * i[(r, c)])
        };
        KernelMatrices {
            kxx: None,
            kxz: mix(&self.kv_xz, &self.ki_xz),
            kzz: mix(&self.kv_zz, &self.ki_zz),
            jitter,
        }
    }
}

/// Component kernels from precomputed latents: `latent_v` holds one
/// time-varying latent per row and `latent_i` one embedding per row.
pub fn kernel_blocks(latent_v: &DenseMatrix, latent_i: &DenseMatrix, z: &InducingPoints) -> Result<KernelBlocks> {
    if latent_v.cols() != z.dv || latent_i.cols() != z.di() {
        return Err(Error::shape(
            "kernel_blocks latent widths",
            format!("{} + {}", z.dv, z.di()),
            format!("{} + {}", latent_v.cols(), latent_i.cols()),
        ));
    }
    if latent_v.rows() != latent_i.rows() {
        return Err(Error::shape("kernel_blocks rows", latent_v.rows(), latent_i.rows()));
    }
    let m = z.len();
    let cross = |lat: &DenseMatrix, varying: bool| {
        let mut out = DenseMatrix::zeros(lat.rows(), m);
        out.as_mut_slice().par_chunks_mut(m.max(1)).enumerate().for_each(|(r, row)| {
            for (c, v) in row.iter_mut().enumerate() {
                let zc = if varying { z.varying(c) } else { z.invariant(c) };
                *v = (-0.5 * sq_dist(lat.row(r), zc)).exp();
            }
        });
        out
    };
    let kv_xz = cross(latent_v, true);
    let ki_xz = cross(latent_i, false);
    let kv_zz = DenseMatrix::from_fn(m, m, |a, b| (-0.5 * sq_dist(z.varying(a), z.varying(b))).exp());
    let ki_zz = DenseMatrix::from_fn(m, m, |a, b| (-0.5 * sq_dist(z.invariant(a), z.invariant(b))).exp());
    Ok(KernelBlocks {
        kv_xz,
        ki_xz,
        kv_zz,
        ki_zz,
    })
}

/// Embedding row of every observation.
pub fn individual_latents(table: &EmbeddingTable, individual: &[usize]) -> Result<DenseMatrix> {
    let d = table.dim();
    let mut out = DenseMatrix::zeros(individual.len(), d);
    for (r, &i) in individual.iter().enumerate() {
        if i >= table.n_individuals() {
            return Err(Error::UnknownEntity {
                id: i + 1,
                max: table.n_individuals(),
            });
        }
        out.row_mut(r).copy_from_slice(table.individual(i));
    }
    Ok(out)
}

/// `N x N` additive kernel from latents.
pub fn kxx_from_latents(alpha_v: f64, alpha_i: f64, latent_v: &DenseMatrix, latent_i: &DenseMatrix) -> Result<DenseMatrix> {
    let n = latent_v.rows();
    if n > KXX_CAP {
        return Err(Error::SizeCapExceeded { n, cap: KXX_CAP });
    }
    let (av, ai) = (alpha_v * alpha_v, alpha_i * alpha_i);
    let mut out = DenseMatrix::zeros(n, n);
    if n == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(r, row)| {
        for (c, v) in row.iter_mut().enumerate() {
            *v = av * (-0.5 * sq_dist(latent_v.row(r), latent_v.row(c))).exp()
                + ai * (-0.5 * sq_dist(latent_i.row(r), latent_i.row(c))).exp();
        }
    });
    Ok(out)
}

/// Gram matrices of `data` against the inducing points, encoder in eval mode.
pub fn gram(kp: &KernelParams, data: &LongitudinalDataset, z: &InducingPoints, with_kxx: bool) -> Result<KernelMatrices> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("gram of an empty dataset".into()));
    }
    let lv = kp.features.map_rows(&data.x)?;
    let li = individual_latents(&kp.embeddings, &data.individual)?;
    let mut km = kernel_blocks(&lv, &li, z)?.combine(kp.alpha_v, kp.alpha_i, DEFAULT_JITTER);
    if with_kxx {
        km.kxx = Some(kxx_from_latents(kp.alpha_v, kp.alpha_i, &lv, &li)?);
    }
    Ok(km)
}
