//! Fully connected encoder mapping covariates into the time-varying latent
//! space, plus the per-individual embedding table.
//!
//! The network is `P -> H -> CELU -> Dropout -> H -> CELU -> Dropout -> D_v`
//! by default, but any chain of layer widths is accepted: every layer except
//! the last is followed by CELU and dropout. Gradients are computed by a
//! hand-written reverse pass over a [`ForwardTrace`].

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

pub const DEFAULT_DROPOUT: f64 = 0.2;

/// `max(0, x) + min(0, alpha * (exp(x / alpha) - 1))`.
#[inline]
pub fn celu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * ((x / alpha).exp() - 1.0)
    }
}

#[inline]
pub fn celu_derivative(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        (x / alpha).exp()
    }
}

/// Whether stochastic layers are active for a forward pass.
pub enum Pass<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weight: DenseMatrix::zeros(fan_out, fan_in),
            bias: vec![0.0; fan_out],
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = DenseMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
        Layer {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.fan_out()).map(|o| dot(self.weight.row(o), x) + self.bias[o]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
    pub dropout: f64,
    pub celu_alpha: f64,
}

/// Intermediate values of one forward pass, needed by [`EncoderParams::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input fed to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers (0 or 1/keep) of every hidden layer.
    masks: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Parameter gradients with the same layout as [`EncoderParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub layers: Vec<Layer>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        EncoderGrads {
            layers: params.layers.iter().map(|l| Layer::zeros(l.fan_in(), l.fan_out())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &EncoderGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl EncoderParams {
    /// Random network with the given layer widths, e.g. `[P, H, H, D_v]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], dropout: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("encoder widths {widths:?} must have >= 2 positive entries")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidConfig(format!("dropout rate {dropout} not in [0, 1)")));
        }
        let layers = widths.windows(2).map(|w| Layer::init_uniform(w[0], w[1], rng)).collect();
        Ok(EncoderParams {
            layers,
            dropout,
            celu_alpha: 1.0,
        })
    }

    /// All-zero network (every input maps to the origin).
    pub fn zeros(widths: &[usize], dropout: f64) -> Self {
        EncoderParams {
            layers: widths.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
            dropout,
            celu_alpha: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::fan_out)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape("EncoderParams::set_flat", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64], pass: Pass<'_>) -> Result<Vec<f64>> {
        Ok(self.forward(x, pass)?.output)
    }

    /// Forward pass keeping everything the reverse pass needs.
    pub fn forward(&self, x: &[f64], mut pass: Pass<'_>) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("encode", self.input_dim(), x.len()));
        }
        let depth = self.layers.len();
        let keep = 1.0 - self.dropout;
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth - 1);
        let mut masks = Vec::with_capacity(depth - 1);
        let mut h = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            if li + 1 == depth {
                h = z;
                break;
            }
            let mask: Vec<f64> = match &mut pass {
                Pass::Train(rng) if self.dropout > 0.0 => z
                    .iter()
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect(),
                _ => vec![1.0; z.len()],
            };
            h = z.iter().zip(&mask).map(|(&v, &m)| celu(v, self.celu_alpha) * m).collect();
            pre.push(z);
            masks.push(mask);
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            masks,
            output: h,
        })
    }

    /// Reverse pass: gradients of `upstream . output` with respect to every
    /// parameter and to the input, reusing the trace's dropout masks.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64]) -> Result<(EncoderGrads, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("encode_grad upstream", self.output_dim(), upstream.len()));
        }
        let mut grads = EncoderGrads::zeros_like(self);
        let input_grad = self.backward_into(trace, upstream, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`EncoderParams::backward`] but adds the parameter gradients into
    /// `grads`; returns the input gradient.
    pub fn backward_into(&self, trace: &ForwardTrace, upstream: &[f64], grads: &mut EncoderGrads) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("encode_grad upstream", self.output_dim(), upstream.len()));
        }
        let mut delta = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.inputs[li];
            let g = &mut grads.layers[li];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                for (w, &xi) in g.weight.row_mut(o).iter_mut().zip(input) {
                    *w += d * xi;
                }
            }
            let mut below = vec![0.0; layer.fan_in()];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (b, &w) in below.iter_mut().zip(layer.weight.row(o)) {
                    *b += d * w;
                }
            }
            if li > 0 {
                let pre = &trace.pre[li - 1];
                let mask = &trace.masks[li - 1];
                for ((b, &z), &m) in below.iter_mut().zip(pre).zip(mask) {
                    *b *= m * celu_derivative(z, self.celu_alpha);
                }
            }
            delta = below;
        }
        Ok(delta)
    }

    /// Deterministic (eval-mode) gradient of `upstream . encode(x)`.
    pub fn encode_grad(&self, x: &[f64], upstream: &[f64]) -> Result<(EncoderGrads, Vec<f64>)> {
        let trace = self.forward(x, Pass::Eval)?;
        self.backward(&trace, upstream)
    }
}

/// 1-based entity index: `1..=I` are individuals, `I+1..=I+M` inducing points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub usize);

impl EntityId {
    pub fn individual(zero_based: usize) -> Self {
        EntityId(zero_based + 1)
    }

    pub fn inducing(n_individuals: usize, zero_based: usize) -> Self {
        EntityId(n_individuals + zero_based + 1)
    }
}

/// One learned latent vector per individual.
///
/// Inducing points do not get rows of their own: entity `I + m` resolves to
/// the time-invariant block of inducing point `m`, so the table and the
/// inducing-point matrix can never drift apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub individuals: DenseMatrix,
}

impl EmbeddingTable {
    pub fn new(individuals: DenseMatrix) -> Self {
        EmbeddingTable { individuals }
    }

    /// Rows drawn from `N(0, std^2)`.
    pub fn init_normal<R: Rng + ?Sized>(n_individuals: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let individuals = DenseMatrix::from_fn(n_individuals, dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        EmbeddingTable { individuals }
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.rows()
    }

    pub fn dim(&self) -> usize {
        self.individuals.cols()
    }

    /// Row of a zero-based individual index.
    #[inline]
    pub fn individual(&self, i: usize) -> &[f64] {
        self.individuals.row(i)
    }

    /// Entity lookup over the combined index space; the second block is the
    /// time-invariant part of `inducing` (an `M x (D_v + D_i)` matrix).
    pub fn embed<'a>(&'a self, inducing: &'a DenseMatrix, id: EntityId) -> Result<&'a [f64]> {
        let n_ind = self.n_individuals();
        let max = n_ind + inducing.rows();
        match id.0 {
            k if k >= 1 && k <= n_ind => Ok(self.individuals.row(k - 1)),
            k if k > n_ind && k <= max => {
                let row = inducing.row(k - n_ind - 1);
                if row.len() < self.dim() {
                    return Err(Error::shape("embed inducing row", self.dim(), row.len()));
                }
                Ok(&row[row.len() - self.dim()..])
            }
            k => Err(Error::UnknownEntity { id: k, max }),
        }
    }

    /// Mean of all individual rows; the fallback for unseen individuals.
    pub fn mean_row(&self) -> Vec<f64> {
        let n = self.n_individuals().max(1) as f64;
        let mut out = vec![0.0; self.dim()];
        for i in 0..self.n_individuals() {
            for (o, v) in out.iter_mut().zip(self.individual(i)) {
                *o += v / n;
            }
        }
        out
    }
}
