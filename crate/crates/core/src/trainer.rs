//! Alternating optimization: a closed-form update of `q(u)` on the full
//! training set, then gradient steps on the kernel, encoder, embeddings,
//! inducing points and noise with the posterior held fixed.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::encoder::{EmbeddingTable, EncoderGrads, EncoderParams, ForwardTrace, Pass, DEFAULT_DROPOUT};
use crate::error::{Error, Result};
use crate::inference::{
    elbo_closed_form, elbo_kernel_gradient, kl_term, optimal_posterior, Factorized, LqRule, NoiseModel, PosteriorForm,
    PosteriorOptions, VariationalPosterior,
};
use crate::kernels::{individual_latents, kernel_blocks, kxx_from_latents, FeatureMap, InducingPoints, KernelBlocks, KernelMatrices, KernelParams};
use crate::numerics::{dot, DenseMatrix, LowerTriangular, DEFAULT_JITTER};
use crate::optimizer::Adam;
use crate::predictor::{predict_mean, r_squared, MeanRule};

/// Which kernel components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelVariant {
    #[default]
    Full,
    /// Drop the embedding kernel (`alpha_i = 0`, frozen).
    NoTimeInvariant,
    /// Drop the encoder kernel (`alpha_v = 0`, frozen).
    NoTimeVarying,
    /// SE kernel on the raw covariates instead of the encoder latents.
    RbfOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Closed-form posterior update alternating with gradient steps.
    #[default]
    ClosedForm,
    /// `mu` and the diagonal of `L_q` learned by gradient steps on a sampled
    /// ELBO; no closed-form update.
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Width of the encoder latent space.
    pub latent_dim: usize,
    /// Width of the individual embeddings.
    pub embedding_dim: usize,
    pub inducing_points: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    /// Gradient steps between posterior updates; `None` means one pass over
    /// the training set.
    pub alternation_steps: Option<usize>,
    pub learning_rate: f64,
    pub embedding_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive validation decreases that stop training.
    pub patience: usize,
    pub jitter: f64,
    pub weight_decay: f64,
    pub embedding_init_std: f64,
    pub seed: u64,
    pub variant: KernelVariant,
    pub solver: Solver,
    /// Draws per gradient step of the sampling solver.
    pub mc_samples: usize,
    pub posterior: PosteriorOptions,
    pub predictive_mean: MeanRule,
    /// Verify after every update that the full-batch ELBO did not decrease.
    pub debug_checks: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 10,
            embedding_dim: 10,
            inducing_points: 10,
            hidden_units: 16,
            dropout: DEFAULT_DROPOUT,
            alternation_steps: None,
            learning_rate: 0.001,
            embedding_learning_rate: 0.01,
            batch_size: 1024,
            max_epochs: 300,
            patience: 2,
            jitter: DEFAULT_JITTER,
            weight_decay: 0.0,
            embedding_init_std: 0.1,
            seed: 0,
            variant: KernelVariant::Full,
            solver: Solver::ClosedForm,
            mc_samples: 8,
            posterior: PosteriorOptions::default(),
            predictive_mean: MeanRule::default(),
            debug_checks: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_dim", self.latent_dim),
            ("embedding_dim", self.embedding_dim),
            ("inducing_points", self.inducing_points),
            ("hidden_units", self.hidden_units),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("embedding_learning_rate", self.embedding_learning_rate),
            ("jitter", self.jitter),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(self.weight_decay >= 0.0) || !(self.embedding_init_std >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay and embedding_init_std must be non-negative".into()));
        }
        if self.solver == Solver::Sampling && self.posterior.form == PosteriorForm::Full {
            return Err(Error::InvalidConfig("the sampling solver learns a diagonal L_q only".into()));
        }
        Ok(())
    }
}

/// Everything that defines a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub kernel: KernelParams,
    pub inducing: InducingPoints,
    pub noise: NoiseModel,
    pub posterior: VariationalPosterior,
    pub optimizer: Adam,
    pub epoch: usize,
    /// Jitter in effect (may exceed the configured value after a retry).
    pub jitter: f64,
    pub variant: KernelVariant,
    pub mean_rule: MeanRule,
}

impl ModelState {
    pub fn is_finite(&self) -> bool {
        let k = &self.kernel;
        let enc = match &k.features {
            FeatureMap::Encoder(e) => e.is_finite(),
            FeatureMap::Identity { .. } => true,
        };
        enc && k.alpha_v.is_finite()
            && k.alpha_i.is_finite()
            && k.embeddings.individuals.is_finite()
            && self.inducing.z.is_finite()
            && self.noise.log_sigma2.is_finite()
            && self.posterior.mu.iter().all(|v| v.is_finite())
            && self.posterior.l.to_dense().is_finite()
    }

    /// Trainable parameters outside the embedding table, in a fixed order:
    /// `alpha_v, alpha_i, log sigma^2, encoder..., Z...`.
    pub fn base_flat(&self) -> Vec<f64> {
        let mut v = vec![self.kernel.alpha_v, self.kernel.alpha_i, self.noise.log_sigma2];
        if let FeatureMap::Encoder(e) = &self.kernel.features {
            v.extend(e.to_flat());
        }
        v.extend_from_slice(self.inducing.z.as_slice());
        v
    }

    pub fn set_base_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.kernel.alpha_v = flat[0];
        self.kernel.alpha_i = flat[1];
        self.noise.log_sigma2 = flat[2];
        let mut off = 3;
        if let FeatureMap::Encoder(e) = &mut self.kernel.features {
            let n = e.num_params();
            e.set_flat(&flat[off..off + n])?;
            off += n;
        }
        let zn = self.inducing.z.as_slice().len();
        if flat.len() != off + zn {
            return Err(Error::shape("base parameter vector", off + zn, flat.len()));
        }
        self.inducing.z.as_mut_slice().copy_from_slice(&flat[off..]);
        Ok(())
    }

    /// `mu` followed by the log of the diagonal of `L_q`.
    fn variational_flat(&self) -> Vec<f64> {
        let mut v = self.posterior.mu.clone();
        v.extend(self.posterior.l.diag().iter().map(|d| d.ln()));
        v
    }

    fn set_variational_flat(&mut self, flat: &[f64]) {
        let m = self.posterior.dim();
        self.posterior.mu.copy_from_slice(&flat[..m]);
        let diag: Vec<f64> = flat[m..].iter().map(|v| v.exp()).collect();
        self.posterior.l = LowerTriangular::from_diag(&diag);
    }
}

/// Initial state: unit `alpha`s and noise, `Z ~ U[0,1)`, uniform encoder
/// weights, normal embeddings with `cfg.embedding_init_std`.
pub fn init_state(cfg: &TrainConfig, data: &LongitudinalDataset, rng: &mut dyn RngCore) -> Result<ModelState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot initialize from an empty dataset".into()));
    }
    let p = data.n_covariates();
    let features = match cfg.variant {
        KernelVariant::RbfOnly => FeatureMap::Identity { dim: p },
        _ => FeatureMap::Encoder(EncoderParams::init(
            &[p, cfg.hidden_units, cfg.hidden_units, cfg.latent_dim],
            cfg.dropout,
            rng,
        )?),
    };
    let dv = features.latent_dim();
    let embeddings = EmbeddingTable::init_normal(data.n_individuals(), cfg.embedding_dim, cfg.embedding_init_std, rng);
    let m = cfg.inducing_points;
    let z = DenseMatrix::from_fn(m, dv + cfg.embedding_dim, |_, _| rng.random::<f64>());
    let (alpha_v, alpha_i) = match cfg.variant {
        KernelVariant::NoTimeInvariant => (1.0, 0.0),
        KernelVariant::NoTimeVarying => (0.0, 1.0),
        _ => (1.0, 1.0),
    };
    let state = ModelState {
        kernel: KernelParams {
            alpha_v,
            alpha_i,
            features,
            embeddings,
        },
        inducing: InducingPoints::new(z, dv)?,
        noise: NoiseModel { log_sigma2: 0.0 },
        posterior: VariationalPosterior::standard(m),
        optimizer: Adam::new(&[0], cfg.weight_decay),
        epoch: 0,
        jitter: cfg.jitter,
        variant: cfg.variant,
        mean_rule: cfg.predictive_mean,
    };
    let sizes = [
        state.base_flat().len(),
        state.kernel.embeddings.individuals.as_slice().len(),
        if cfg.solver == Solver::Sampling { 2 * m } else { 0 },
    ];
    Ok(ModelState {
        optimizer: Adam::new(&sizes, cfg.weight_decay),
        ..state
    })
}

/// Per-step learning rates of the three parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub base: f64,
    pub embedding: f64,
    pub variational: f64,
}

impl LearningRates {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        LearningRates {
            base: cfg.learning_rate,
            embedding: cfg.embedding_learning_rate,
            variational: cfg.learning_rate,
        }
    }
}

/// Gradients of the (batch-weighted) ELBO; ascent directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    /// Objective value the gradients belong to.
    pub value: f64,
    pub alpha_v: f64,
    pub alpha_i: f64,
    pub log_sigma2: f64,
    pub encoder: Option<EncoderGrads>,
    pub z: DenseMatrix,
    pub embeddings: DenseMatrix,
    /// `d/d mu` then `d/d log diag(L_q)`; empty unless sampled.
    pub variational: Vec<f64>,
}

impl ParamGrads {
    pub fn base_flat(&self) -> Vec<f64> {
        let mut v = vec![self.alpha_v, self.alpha_i, self.log_sigma2];
        if let Some(e) = &self.encoder {
            v.extend(e.to_flat());
        }
        v.extend_from_slice(self.z.as_slice());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.base_flat().iter().all(|v| v.is_finite())
            && self.embeddings.is_finite()
            && self.variational.iter().all(|v| v.is_finite())
    }
}

/// Rescaling of the two ELBO pieces for one minibatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchWeights {
    /// Multiplies the likelihood term (`N / |batch|`).
    pub data_scale: f64,
    /// Multiplies the KL term (`1 / batches per epoch`).
    pub kl_weight: f64,
}

impl BatchWeights {
    pub const FULL: BatchWeights = BatchWeights {
        data_scale: 1.0,
        kl_weight: 1.0,
    };
}

/// Which ELBO the gradients are taken of.
pub enum Objective<'a> {
    ClosedForm,
    Sampled { samples: usize, rng: &'a mut dyn RngCore },
}

pub fn optimizer_step(state: &mut ModelState, grads: &ParamGrads, rates: LearningRates) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteValue("parameter gradients".into()));
    }
    let mut base = state.base_flat();
    let mut base_grad = grads.base_flat();
    if base_grad.len() != base.len() {
        return Err(Error::shape("base gradient", base.len(), base_grad.len()));
    }
    let mut emb = state.kernel.embeddings.individuals.as_slice().to_vec();
    let mut emb_grad = grads.embeddings.as_slice().to_vec();
    match state.variant {
        KernelVariant::NoTimeInvariant => {
            base_grad[1] = 0.0;
            emb_grad.iter_mut().for_each(|g| *g = 0.0);
        }
        KernelVariant::NoTimeVarying => {
            // alpha_v and everything upstream of it
            let enc = match &state.kernel.features {
                FeatureMap::Encoder(e) => e.num_params(),
                FeatureMap::Identity { .. } => 0,
            };
            base_grad[0] = 0.0;
            base_grad[3..3 + enc].iter_mut().for_each(|g| *g = 0.0);
        }
        _ => {}
    }
    let sampled = !state.optimizer.groups[2].first.is_empty();
    let mut var = if sampled { state.variational_flat() } else { Vec::new() };
    let var_grad = if sampled {
        if grads.variational.len() != var.len() {
            return Err(Error::shape("variational gradient", var.len(), grads.variational.len()));
        }
        grads.variational.clone()
    } else {
        Vec::new()
    };
    state.optimizer.step(
        &mut [base.as_mut_slice(), emb.as_mut_slice(), var.as_mut_slice()],
        &[&base_grad, &emb_grad, &var_grad],
        &[rates.base, rates.embedding, rates.variational],
    )?;
    state.set_base_flat(&base)?;
    state.kernel.embeddings.individuals.as_mut_slice().copy_from_slice(&emb);
    if sampled {
        state.set_variational_flat(&var);
    }
    Ok(())
}

/// Latents of one batch plus what the reverse pass needs.
struct BatchForward {
    latent_v: DenseMatrix,
    latent_i: DenseMatrix,
    traces: Vec<ForwardTrace>,
    blocks: KernelBlocks,
}

fn forward_batch(state: &ModelState, batch: &LongitudinalDataset, mut pass: Pass<'_>) -> Result<BatchForward> {
    let n = batch.len();
    let (latent_v, traces) = match &state.kernel.features {
        FeatureMap::Encoder(e) => {
            let mut traces = Vec::with_capacity(n);
            let mut lv = DenseMatrix::zeros(n, e.output_dim());
            for r in 0..n {
                let p = match &mut pass {
                    Pass::Eval => Pass::Eval,
                    Pass::Train(rng) => Pass::Train(&mut **rng),
                };
                let t = e.forward(batch.x.row(r), p)?;
                lv.row_mut(r).copy_from_slice(&t.output);
                traces.push(t);
            }
            (lv, traces)
        }
        FeatureMap::Identity { dim } => {
            if batch.n_covariates() != *dim {
                return Err(Error::shape("batch covariates", dim, batch.n_covariates()));
            }
            (batch.x.clone(), Vec::new())
        }
    };
    let latent_i = individual_latents(&state.kernel.embeddings, &batch.individual)?;
    let blocks = kernel_blocks(&latent_v, &latent_i, &state.inducing)?;
    Ok(BatchForward {
        latent_v,
        latent_i,
        traces,
        blocks,
    })
}

/// Sampled-objective analogue of [`elbo_kernel_gradient`] that also returns
/// gradients for `mu` and `log diag(L_q)`.
fn sampled_kernel_gradient(
    kz: &KernelMatrices,
    post: &VariationalPosterior,
    y: &[f64],
    noise: &NoiseModel,
    w: BatchWeights,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<(f64, DenseMatrix, DenseMatrix, f64, Vec<f64>)> {
    let fac = Factorized::new(kz)?;
    let (n, m) = (y.len(), post.dim());
    let s2 = noise.sigma2();
    let ldiag = post.l.diag();
    let mut g_a = DenseMatrix::zeros(n, m);
    let mut d_mu = vec![0.0; m];
    let mut d_logl = vec![0.0; m];
    let (mut ll_sum, mut sq_sum) = (0.0, 0.0);
    let mut eps = vec![0.0; m];
    let mut u = vec![0.0; m];
    for _ in 0..samples {
        for k in 0..m {
            eps[k] = StandardNormal.sample(rng);
            u[k] = post.mu[k] + ldiag[k] * eps[k];
        }
        let f = fac.a.matvec(&u)?;
        let r: Vec<f64> = y.iter().zip(&f).map(|(y, f)| y - f).collect();
        let sq = dot(&r, &r);
        sq_sum += sq;
        ll_sum += -0.5 * n as f64 * noise.log_sigma2 - sq / (2.0 * s2);
        let at_r = fac.a.t_matvec(&r)?;
        for k in 0..m {
            d_mu[k] += at_r[k];
            d_logl[k] += at_r[k] * eps[k] * ldiag[k];
        }
        for i in 0..n {
            let row = g_a.row_mut(i);
            for k in 0..m {
                row[k] += r[i] * u[k];
            }
        }
    }
    let inv = w.data_scale / (samples as f64 * s2);
    let g_a = g_a.scale(inv);
    let kinv = fac.kinv()?;
    let kinv_mu = kinv.matvec(&post.mu)?;
    let mut var_grad = Vec::with_capacity(2 * m);
    for k in 0..m {
        var_grad.push(d_mu[k] * inv - w.kl_weight * kinv_mu[k]);
    }
    for k in 0..m {
        var_grad.push(d_logl[k] * inv - w.kl_weight * (kinv[(k, k)] * ldiag[k] * ldiag[k] - 1.0));
    }
    let (d_kxz, mut d_kzz) = fac.chain_a(&g_a)?;
    d_kzz = d_kzz.sub(&fac.kl_kzz_grad(post)?.scale(w.kl_weight))?;
    let s = samples as f64;
    let kl = kl_term(kz, post)?;
    let value = w.data_scale * ll_sum / s - w.kl_weight * kl;
    let d_log_sigma2 = w.data_scale * (-0.5 * n as f64 + sq_sum / s / (2.0 * s2));
    Ok((value, d_kxz, d_kzz, d_log_sigma2, var_grad))
}

/// Gradients of the weighted ELBO on `batch` with respect to every trainable
/// parameter, the closed-form posterior held fixed. `pass` controls dropout.
pub fn elbo_gradients(
    state: &ModelState,
    batch: &LongitudinalDataset,
    weights: BatchWeights,
    objective: Objective<'_>,
    pass: Pass<'_>,
) -> Result<ParamGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty gradient batch".into()));
    }
    let fwd = forward_batch(state, batch, pass)?;
    let (av, ai) = (state.kernel.alpha_v, state.kernel.alpha_i);
    let kz = fwd.blocks.combine(av, ai, state.jitter);
    let (value, g_xz, g_zz, d_log_sigma2, variational) = match objective {
        Objective::ClosedForm => {
            let g = elbo_kernel_gradient(&kz, &state.posterior, &batch.y, &state.noise, weights.data_scale, weights.kl_weight)?;
            (g.value, g.d_kxz, g.d_kzz, g.d_log_sigma2, Vec::new())
        }
        Objective::Sampled { samples, rng } => {
            sampled_kernel_gradient(&kz, &state.posterior, &batch.y, &state.noise, weights, samples, rng)?
        }
    };
    let b = &fwd.blocks;
    let inner = |g: &DenseMatrix, k: &DenseMatrix| -> f64 { g.as_slice().iter().zip(k.as_slice()).map(|(a, b)| a * b).sum() };
    let alpha_v = 2.0 * av * (inner(&g_xz, &b.kv_xz) + inner(&g_zz, &b.kv_zz));
    let alpha_i = 2.0 * ai * (inner(&g_xz, &b.ki_xz) + inner(&g_zz, &b.ki_zz));

    let z = &state.inducing;
    let (m, dv, di) = (z.len(), z.dv, z.di());
    let n = batch.len();
    let mut d_z = DenseMatrix::zeros(m, dv + di);
    let mut d_lv = DenseMatrix::zeros(n, dv);
    let mut d_emb = DenseMatrix::zeros(state.kernel.embeddings.n_individuals(), di);
    let (av2, ai2) = (av * av, ai * ai);
    for r in 0..n {
        let e = fwd.latent_v.row(r);
        let g = fwd.latent_i.row(r);
        let ind = batch.individual[r];
        for c in 0..m {
            let cv = g_xz[(r, c)] * av2 * b.kv_xz[(r, c)];
            let ci = g_xz[(r, c)] * ai2 * b.ki_xz[(r, c)];
            let zv = z.varying(c);
            let zi = z.invariant(c);
            for d in 0..dv {
                let diff = e[d] - zv[d];
                d_lv[(r, d)] -= cv * diff;
                d_z[(c, d)] += cv * diff;
            }
            for d in 0..di {
                let diff = g[d] - zi[d];
                d_emb[(ind, d)] -= ci * diff;
                d_z[(c, dv + d)] += ci * diff;
            }
        }
    }
    for a in 0..m {
        for c in 0..m {
            if a == c {
                continue;
            }
            let gs = g_zz[(a, c)] + g_zz[(c, a)];
            let cv = gs * av2 * b.kv_zz[(a, c)];
            let ci = gs * ai2 * b.ki_zz[(a, c)];
            for d in 0..dv {
                d_z[(a, d)] -= cv * (z.varying(a)[d] - z.varying(c)[d]);
            }
            for d in 0..di {
                d_z[(a, dv + d)] -= ci * (z.invariant(a)[d] - z.invariant(c)[d]);
            }
        }
    }
    let encoder = match &state.kernel.features {
        FeatureMap::Encoder(enc) => {
            let mut grads = EncoderGrads::zeros_like(enc);
            for (r, trace) in fwd.traces.iter().enumerate() {
                enc.backward_into(trace, d_lv.row(r), &mut grads)?;
            }
            Some(grads)
        }
        FeatureMap::Identity { .. } => None,
    };
    let out = ParamGrads {
        value,
        alpha_v,
        alpha_i,
        log_sigma2: d_log_sigma2,
        encoder,
        z: d_z,
        embeddings: d_emb,
        variational,
    };
    if !out.is_finite() || !value.is_finite() {
        return Err(Error::NonFiniteValue("ELBO gradients".into()));
    }
    Ok(out)
}

/// Eval-mode kernel matrices of a whole dataset under `state`.
pub fn dataset_kernels(state: &ModelState, data: &LongitudinalDataset) -> Result<KernelMatrices> {
    let lv = state.kernel.features.map_rows(&data.x)?;
    let li = individual_latents(&state.kernel.embeddings, &data.individual)?;
    Ok(kernel_blocks(&lv, &li, &state.inducing)?.combine(state.kernel.alpha_v, state.kernel.alpha_i, state.jitter))
}

/// Eval-mode `K_XX` of a whole dataset under `state`.
pub fn dataset_kxx(state: &ModelState, data: &LongitudinalDataset) -> Result<DenseMatrix> {
    let lv = state.kernel.features.map_rows(&data.x)?;
    let li = individual_latents(&state.kernel.embeddings, &data.individual)?;
    kxx_from_latents(state.kernel.alpha_v, state.kernel.alpha_i, &lv, &li)
}

/// Full-batch closed-form ELBO of the current state.
pub fn full_elbo(state: &ModelState, data: &LongitudinalDataset) -> Result<f64> {
    elbo_closed_form(&dataset_kernels(state, data)?, &state.posterior, &data.y, &state.noise)
}

/// Closed-form posterior update on the full training set.
pub fn update_posterior(state: &mut ModelState, data: &LongitudinalDataset, opts: PosteriorOptions, check: bool) -> Result<f64> {
    let kz = dataset_kernels(state, data)?;
    let before = if check {
        Some(elbo_closed_form(&kz, &state.posterior, &data.y, &state.noise)?)
    } else {
        None
    };
    let post = optimal_posterior(&kz, &data.y, &state.noise, opts)?;
    let after = elbo_closed_form(&kz, &post, &data.y, &state.noise)?;
    if let Some(before) = before {
        let comparable = opts.rule == LqRule::Stationary && (opts.form == PosteriorForm::Full || state.posterior.l.is_diagonal());
        if comparable && after < before - 1e-8 * before.abs().max(1.0) {
            return Err(Error::InvariantViolated(format!(
                "posterior update lowered the ELBO from {before} to {after}"
            )));
        }
    }
    state.posterior = post;
    Ok(after)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Full-batch closed-form ELBO after the epoch.
    pub elbo: f64,
    pub valid_r2: f64,
    /// Seconds spent in this epoch.
    pub wall_time: f64,
    pub gradient_steps: usize,
    pub jitter: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the best validation R^2.
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn is_pd_failure(e: &Error) -> bool {
    matches!(e, Error::NotPositiveDefinite { .. })
}

/// Runs `step` on a copy of `state`; on a positive-definiteness failure
/// raises the jitter tenfold once and repeats from the same starting point.
fn with_jitter_retry<T>(
    state: &mut ModelState,
    retried: &mut bool,
    mut step: impl FnMut(&mut ModelState) -> Result<T>,
) -> Result<T> {
    let snapshot = state.clone();
    match step(state) {
        Err(e) if is_pd_failure(&e) && !*retried => {
            *retried = true;
            *state = snapshot;
            state.jitter *= 10.0;
            step(state)
        }
        other => other,
    }
}

struct EpochRunner<'a> {
    cfg: &'a TrainConfig,
    train: &'a LongitudinalDataset,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochRunner<'_> {
    fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Next minibatch, reshuffling at the end of each pass.
    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.order.len());
        let rows = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        rows
    }

    fn gradient_steps(
        &mut self,
        state: &mut ModelState,
        steps: usize,
        shuffle_rng: &mut ChaCha8Rng,
        dropout_rng: &mut ChaCha8Rng,
        mc_rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let rates = LearningRates::from_config(self.cfg);
        let kl_weight = 1.0 / self.batches_per_epoch() as f64;
        for _ in 0..steps {
            let rows = self.next_batch(shuffle_rng);
            let batch = self.train.subset(&rows);
            let weights = BatchWeights {
                data_scale: self.train.len() as f64 / rows.len() as f64,
                kl_weight,
            };
            let objective = match self.cfg.solver {
                Solver::ClosedForm => Objective::ClosedForm,
                Solver::Sampling => Objective::Sampled {
                    samples: self.cfg.mc_samples,
                    rng: &mut *mc_rng,
                },
            };
            let pass = if self.cfg.dropout > 0.0 {
                Pass::Train(&mut *dropout_rng)
            } else {
                Pass::Eval
            };
            let grads = elbo_gradients(state, &batch, weights, objective, pass)?;
            optimizer_step(state, &grads, rates)?;
        }
        Ok(())
    }
}

/// Trains on `train`, early-stopping on the R^2 of `valid`.
pub fn train(cfg: &TrainConfig, train: &LongitudinalDataset, valid: &LongitudinalDataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::InvalidConfig("training and validation sets must be nonempty".into()));
    }
    if train.n_covariates() != valid.n_covariates() {
        return Err(Error::shape("validation covariates", train.n_covariates(), valid.n_covariates()));
    }
    if let Some(&bad) = valid.individual.iter().find(|&&i| i >= train.n_individuals()) {
        return Err(Error::UnknownEntity {
            id: bad + 1,
            max: train.n_individuals(),
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut mc_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut state = init_state(cfg, train, &mut init_rng)?;
    let mut retried = false;
    let closed_form = cfg.solver == Solver::ClosedForm;
    if closed_form {
        with_jitter_retry(&mut state, &mut retried, |s| update_posterior(s, train, cfg.posterior, false))?;
    }
    let mut runner = EpochRunner {
        cfg,
        train,
        order: (0..train.len()).collect(),
        cursor: usize::MAX,
    };
    let steps = cfg.alternation_steps.unwrap_or_else(|| runner.batches_per_epoch());

    let mut log = Vec::new();
    let mut best: Option<(f64, ModelState, usize)> = None;
    let mut previous = f64::NAN;
    let mut decreases = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let elbo = with_jitter_retry(&mut state, &mut retried, |s| {
            runner.gradient_steps(s, steps, &mut shuffle_rng, &mut dropout_rng, &mut mc_rng)?;
            if closed_form {
                update_posterior(s, train, cfg.posterior, cfg.debug_checks)
            } else {
                full_elbo(s, train)
            }
        })?;
        state.epoch = epoch;
        if !state.is_finite() {
            return Err(Error::NonFiniteValue(format!("model parameters after epoch {epoch}")));
        }
        let r2 = r_squared(&predict_mean(&state, valid, false)?, &valid.y)?;
        log.push(EpochRecord {
            epoch,
            elbo,
            valid_r2: r2,
            wall_time: started.elapsed().as_secs_f64(),
            gradient_steps: steps,
            jitter: state.jitter,
        });
        if best.as_ref().is_none_or(|(b, _, _)| r2 > *b) {
            best = Some((r2, state.clone(), epoch));
        }
        if r2 < previous {
            decreases += 1;
        } else {
            decreases = 0;
        }
        previous = r2;
        if decreases >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (_, best_state, best_epoch) = best.expect("max_epochs >= 1");
    Ok(TrainOutcome {
        state: best_state,
        log,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data(seed: u64, n_ind: usize, per: usize, p: usize) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_ind * per;
        let individual: Vec<usize> = (0..n).map(|r| r / per).collect();
        let time: Vec<f64> = (0..n).map(|r| (r % per) as f64).collect();
        let x = DenseMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..n)
            .map(|r| x.row(r).iter().sum::<f64>().sin() + 0.3 * individual[r] as f64 + rng.random_range(-0.1..0.1))
            .collect();
        LongitudinalDataset::new(individual, time, x, y).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            latent_dim: 2,
            embedding_dim: 2,
            inducing_points: 3,
            hidden_units: 4,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_follows_defaults() {
        let data = tiny_data(1, 4, 5, 3);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = init_state(&cfg, &data, &mut rng).unwrap();
        assert_eq!((s.kernel.alpha_v, s.kernel.alpha_i, s.noise.sigma2()), (1.0, 1.0, 1.0));
        assert_eq!(s.inducing.z.rows(), 10);
        assert_eq!(s.inducing.z.cols(), 20);
        assert!(s.inducing.z.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(init_state(&cfg, &data, &mut rng).unwrap(), s);
        let bad = TrainConfig {
            inducing_points: 0,
            ..cfg
        };
        assert!(matches!(init_state(&bad, &data, &mut rng), Err(Error::InvalidConfig(_))));
    }

    fn objective(state: &ModelState, batch: &LongitudinalDataset, w: BatchWeights) -> f64 {
        elbo_gradients(state, batch, w, Objective::ClosedForm, Pass::Eval).unwrap().value
    }

    fn check_against_fd(state: &ModelState, batch: &LongitudinalDataset, w: BatchWeights) {
        let h = 1e-4;
        let g = elbo_gradients(state, batch, w, Objective::ClosedForm, Pass::Eval).unwrap();
        let close = |an: f64, fd: f64, what: &str| {
            assert!((an - fd).abs() <= 1e-3 * fd.abs().max(1e-2), "{what}: analytic {an} vs fd {fd}");
        };
        let base = state.base_flat();
        let gb = g.base_flat();
        for k in 0..base.len() {
            let mut up = state.clone();
            let mut dn = state.clone();
            let mut v = base.clone();
            v[k] += h;
            up.set_base_flat(&v).unwrap();
            v[k] -= 2.0 * h;
            dn.set_base_flat(&v).unwrap();
            let fd = (objective(&up, batch, w) - objective(&dn, batch, w)) / (2.0 * h);
            close(gb[k], fd, &format!("base[{k}]"));
        }
        let emb = &state.kernel.embeddings.individuals;
        for k in 0..emb.as_slice().len() {
            let mut up = state.clone();
            let mut dn = state.clone();
            up.kernel.embeddings.individuals.as_mut_slice()[k] += h;
            dn.kernel.embeddings.individuals.as_mut_slice()[k] -= h;
            let fd = (objective(&up, batch, w) - objective(&dn, batch, w)) / (2.0 * h);
            close(g.embeddings.as_slice()[k], fd, &format!("embedding[{k}]"));
        }
    }

    fn perturbed_state(seed: u64, cfg: &TrainConfig, data: &LongitudinalDataset) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = init_state(cfg, data, &mut rng).unwrap();
        update_posterior(&mut s, data, cfg.posterior, false).unwrap();
        s.kernel.alpha_v = 0.8;
        s.kernel.alpha_i = 1.3;
        s.noise.log_sigma2 = -0.4;
        s.kernel.embeddings.individuals = s.kernel.embeddings.individuals.scale(0.5);
        s
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let data = tiny_data(10 + seed, 4, 5, 4);
            let cfg = tiny_cfg();
            let s = perturbed_state(seed, &cfg, &data);
            check_against_fd(&s, &data, BatchWeights::FULL);
            let half = data.subset(&(0..9).collect::<Vec<_>>());
            check_against_fd(
                &s,
                &half,
                BatchWeights {
                    data_scale: 20.0 / 9.0,
                    kl_weight: 0.5,
                },
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_full_lq_and_identity_map() {
        let data = tiny_data(21, 3, 5, 3);
        let mut cfg = tiny_cfg();
        cfg.posterior.form = PosteriorForm::Full;
        check_against_fd(&perturbed_state(5, &cfg, &data), &data, BatchWeights::FULL);
        cfg.variant = KernelVariant::RbfOnly;
        check_against_fd(&perturbed_state(6, &cfg, &data), &data, BatchWeights::FULL);
    }

    #[test]
    fn frozen_component_has_zero_gradient() {
        let data = tiny_data(4, 4, 4, 3);
        let cfg = tiny_cfg();
        let mut s = perturbed_state(1, &cfg, &data);
        s.kernel.alpha_i = 0.0;
        let g = elbo_gradients(&s, &data, BatchWeights::FULL, Objective::ClosedForm, Pass::Eval).unwrap();
        assert_eq!(g.embeddings.max_abs(), 0.0);
        assert_eq!(g.alpha_i, 0.0);
        let zi_grad: f64 = (0..3).map(|m| g.z.row(m)[2..].iter().map(|v| v.abs()).sum::<f64>()).sum();
        assert_eq!(zi_grad, 0.0);
    }

    #[test]
    fn noise_gradient_vanishes_at_stationary_noise() {
        let data = tiny_data(6, 4, 5, 3);
        let cfg = tiny_cfg();
        let mut s = perturbed_state(2, &cfg, &data);
        // the optimal sigma^2 for fixed q is the mean expected squared residual
        let kz = dataset_kernels(&s, &data).unwrap();
        let a = crate::inference::projection_a(&kz).unwrap();
        let fit = a.matvec(&s.posterior.mu).unwrap();
        let resid: f64 = data.y.iter().zip(&fit).map(|(y, f)| (y - f).powi(2)).sum();
        let spread = a.matmul(&s.posterior.l.to_dense()).unwrap().frobenius_sq();
        s.noise.log_sigma2 = ((resid + spread) / data.len() as f64).ln();
        let g = elbo_gradients(&s, &data, BatchWeights::FULL, Objective::ClosedForm, Pass::Eval).unwrap();
        assert!(g.log_sigma2.abs() < 1e-6, "{}", g.log_sigma2);
    }

    #[test]
    fn sampled_gradients_are_unbiased_for_variational_parameters() {
        let data = tiny_data(8, 3, 4, 3);
        let cfg = TrainConfig {
            solver: Solver::Sampling,
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = init_state(&cfg, &data, &mut rng).unwrap();
        s.posterior.mu = vec![0.3, -0.2, 0.5];
        s.posterior.l = LowerTriangular::from_diag(&[0.7, 0.4, 0.9]);
        let mut mc = ChaCha8Rng::seed_from_u64(1);
        let g = elbo_gradients(
            &s,
            &data,
            BatchWeights::FULL,
            Objective::Sampled { samples: 400_000, rng: &mut mc },
            Pass::Eval,
        )
        .unwrap();
        let exact = elbo_gradients(&s, &data, BatchWeights::FULL, Objective::ClosedForm, Pass::Eval).unwrap();
        assert!((g.log_sigma2 - exact.log_sigma2).abs() < 2e-2 * exact.log_sigma2.abs().max(1.0));
        assert!((g.alpha_v - exact.alpha_v).abs() < 2e-2 * exact.alpha_v.abs().max(1.0));
        // mu gradient against finite differences of the exact ELBO
        let h = 1e-5;
        for k in 0..3 {
            let mut up = s.clone();
            let mut dn = s.clone();
            up.posterior.mu[k] += h;
            dn.posterior.mu[k] -= h;
            let fd = (full_elbo(&up, &data).unwrap() - full_elbo(&dn, &data).unwrap()) / (2.0 * h);
            assert!((g.variational[k] - fd).abs() < 2e-2 * fd.abs().max(1.0), "mu[{k}] {} vs {fd}", g.variational[k]);
        }
    }

    #[test]
    fn posterior_only_epochs_never_lower_the_elbo() {
        let data = tiny_data(2, 5, 6, 3);
        let valid = tiny_data(3, 5, 2, 3);
        for form in [PosteriorForm::Diagonal, PosteriorForm::Full] {
            let cfg = TrainConfig {
                alternation_steps: Some(0),
                max_epochs: 3,
                patience: 5,
                debug_checks: true,
                posterior: PosteriorOptions {
                    form,
                    rule: LqRule::Stationary,
                },
                ..tiny_cfg()
            };
            let out = train(&cfg, &data, &valid).unwrap();
            assert_eq!(out.log.len(), 3);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let init = init_state(&cfg, &data, &mut rng).unwrap();
            let before = full_elbo(&init, &data).unwrap();
            assert!(out.log[0].elbo >= before);
            assert!(out.log.windows(2).all(|w| (w[1].elbo - w[0].elbo).abs() < 1e-9));
        }
    }

    #[test]
    fn single_epoch_logs_once_and_is_deterministic() {
        let data = tiny_data(2, 5, 6, 3);
        let valid = tiny_data(3, 5, 2, 3);
        let cfg = TrainConfig {
            max_epochs: 1,
            dropout: 0.2,
            ..tiny_cfg()
        };
        let a = train(&cfg, &data, &valid).unwrap();
        assert_eq!(a.log.len(), 1);
        let b = train(&cfg, &data, &valid).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.log[0].elbo, b.log[0].elbo);
    }

    #[test]
    fn training_raises_the_elbo() {
        let data = tiny_data(5, 6, 8, 3);
        let valid = tiny_data(5, 6, 3, 3);
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 1000,
            learning_rate: 0.01,
            debug_checks: true,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, &valid).unwrap();
        assert_eq!(out.log.len(), 200);
        assert!(out.log.last().unwrap().elbo > out.log[0].elbo);
    }

    #[test]
    fn early_stopping_counts_strict_decreases() {
        let data = tiny_data(7, 5, 6, 3);
        let valid = tiny_data(8, 5, 2, 3);
        let cfg = TrainConfig {
            max_epochs: 300,
            learning_rate: 0.05,
            embedding_learning_rate: 0.2,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, &valid).unwrap();
        let r2: Vec<f64> = out.log.iter().map(|r| r.valid_r2).collect();
        if out.stopped_early {
            let k = r2.len();
            assert!(r2[k - 1] < r2[k - 2] && r2[k - 2] < r2[k - 3]);
        }
        let best = r2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r2[out.best_epoch - 1], best);
        assert_eq!(out.state.epoch, out.best_epoch);
    }

    #[test]
    fn rejects_unknown_validation_individuals() {
        let data = tiny_data(2, 3, 4, 2);
        let mut valid = tiny_data(3, 4, 1, 2);
        valid.individual_labels = (1..=4).map(|i| i.to_string()).collect();
        assert!(matches!(train(&tiny_cfg(), &data, &valid), Err(Error::UnknownEntity { .. })));
    }
}
