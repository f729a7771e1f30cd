//! Predictive distribution of the latent signal at new observations and the
//! implied outcome correlation.

use serde::{Deserialize, Serialize};

use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::kernels::{kernel_blocks, kxx_from_latents, KernelMatrices, KXX_CAP};
use crate::numerics::{cholesky, DenseMatrix};
use crate::trainer::ModelState;

/// How the predictive mean maps `mu_q` to new points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanRule {
    /// `K_*Z (K_ZZ + sigma^2 I)^{-1} mu_q`, covariance
    /// `K_** - K_*Z (K_ZZ + sigma^2 I)^{-1} K_Z*`.
    NoisyInducing,
    /// Mean of `p(f* | u)` under `q(u)` with the training conditional:
    /// `K_*Z K_ZZ^{-1} mu_q`, covariance `K_** - Q_** + A_* L_q L_q^T A_*^T`.
    #[default]
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    #[default]
    Full,
    Diagonal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub covariance: CovarianceMode,
    /// Add `sigma^2` to the diagonal (outcome rather than signal variance).
    pub observation_noise: bool,
    /// Substitute the mean embedding for individuals the model never saw.
    pub unseen_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub mean: Vec<f64>,
    /// Present for [`CovarianceMode::Full`].
    pub covariance: Option<DenseMatrix>,
    /// Marginal variances; empty for [`CovarianceMode::None`].
    pub variance: Vec<f64>,
}

/// Latents of `data` under `state`, eval mode.
fn latents(state: &ModelState, data: &LongitudinalDataset, fallback: bool) -> Result<(DenseMatrix, DenseMatrix)> {
    let lv = state.kernel.features.map_rows(&data.x)?;
    let table = &state.kernel.embeddings;
    let mean_row = if fallback { Some(table.mean_row()) } else { None };
    let mut li = DenseMatrix::zeros(data.len(), table.dim());
    for (r, &i) in data.individual.iter().enumerate() {
        let row = if i < table.n_individuals() {
            table.individual(i)
        } else if let Some(m) = &mean_row {
            m.as_slice()
        } else {
            return Err(Error::UnknownEntity {
                id: i + 1,
                max: table.n_individuals(),
            });
        };
        li.row_mut(r).copy_from_slice(row);
    }
    Ok((lv, li))
}

/// The matrix whose inverse maps inducing values to predictions.
fn mean_operator(state: &ModelState, kz: &KernelMatrices) -> DenseMatrix {
    let kzz = kz.kzz_jittered();
    match state.mean_rule {
        MeanRule::NoisyInducing => kzz.add(&DenseMatrix::identity(kz.m()).scale(state.noise.sigma2())).expect("square"),
        MeanRule::Projected => kzz,
    }
}

pub fn predict(state: &ModelState, test: &LongitudinalDataset, opts: PredictOptions) -> Result<PredictiveResult> {
    let (lv, li) = latents(state, test, opts.unseen_fallback)?;
    let (av, ai) = (state.kernel.alpha_v, state.kernel.alpha_i);
    let kz = kernel_blocks(&lv, &li, &state.inducing)?.combine(av, ai, state.jitter);
    let op = cholesky(&mean_operator(state, &kz))?;
    // W = op^{-1} K_Z*, so mean = W^T mu and the subtracted term is K_*Z W
    let w = op.cho_solve_matrix(&kz.kxz.transpose())?;
    let mean = w.t_matvec(&state.posterior.mu)?;
    let noise = if opts.observation_noise { state.noise.sigma2() } else { 0.0 };
    let n = test.len();
    // rows of the extra DTC spread term A_* L_q
    let spread = match state.mean_rule {
        MeanRule::Projected => Some(w.t_matmul(&state.posterior.l.to_dense())?),
        MeanRule::NoisyInducing => None,
    };
    let (covariance, variance) = match opts.covariance {
        CovarianceMode::None => (None, Vec::new()),
        CovarianceMode::Diagonal => {
            let prior = av * av + ai * ai;
            let var = (0..n)
                .map(|r| {
                    let explained: f64 = (0..kz.m()).map(|c| kz.kxz[(r, c)] * w[(c, r)]).sum();
                    let extra = spread.as_ref().map_or(0.0, |s| s.row(r).iter().map(|v| v * v).sum());
                    prior - explained + extra + noise
                })
                .collect();
            (None, var)
        }
        CovarianceMode::Full => {
            let kxx = kxx_from_latents(av, ai, &lv, &li)?;
            let mut cov = kxx.sub(&kz.kxz.matmul(&w)?)?;
            if let Some(s) = &spread {
                cov = cov.add(&s.matmul_t(s)?)?;
            }
            for r in 0..n {
                cov[(r, r)] += noise;
            }
            let cov = cov.symmetrize();
            let var = cov.diag();
            (Some(cov), var)
        }
    };
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("predictive mean".into()));
    }
    Ok(PredictiveResult {
        mean,
        covariance,
        variance,
    })
}

/// Predictive mean only.
pub fn predict_mean(state: &ModelState, test: &LongitudinalDataset, unseen_fallback: bool) -> Result<Vec<f64>> {
    Ok(predict(
        state,
        test,
        PredictOptions {
            covariance: CovarianceMode::None,
            observation_noise: false,
            unseen_fallback,
        },
    )?
    .mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrelationOptions {
    pub cap: usize,
    /// Normalize the outcome covariance (signal plus `sigma^2`) instead of
    /// the signal covariance.
    pub include_noise: bool,
    pub unseen_fallback: bool,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions {
            cap: KXX_CAP,
            include_noise: false,
            unseen_fallback: false,
        }
    }
}

/// Predictive covariance over `data` rescaled to unit diagonal. Variances
/// below the model jitter are clamped to it before normalizing.
pub fn correlation_matrix(state: &ModelState, data: &LongitudinalDataset, opts: CorrelationOptions) -> Result<DenseMatrix> {
    let n = data.len();
    let cap = opts.cap.min(KXX_CAP);
    if n > cap {
        return Err(Error::SizeCapExceeded { n, cap });
    }
    let pred = predict(
        state,
        data,
        PredictOptions {
            covariance: CovarianceMode::Full,
            observation_noise: opts.include_noise,
            unseen_fallback: opts.unseen_fallback,
        },
    )?;
    let cov = pred.covariance.expect("full covariance requested");
    let sd: Vec<f64> = cov.diag().iter().map(|v| v.max(state.jitter).sqrt()).collect();
    Ok(DenseMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
        }
    }))
}

/// Coefficient of determination; negative when worse than the mean.
pub fn r_squared(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::shape("r_squared", actual.len(), pred.len()));
    }
    if actual.is_empty() {
        return Err(Error::InvalidConfig("R^2 of an empty vector".into()));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let total: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if total <= 1e-300 * actual.len() as f64 || !total.is_finite() {
        return Err(Error::DegenerateTarget);
    }
    let resid: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum();
    Ok(1.0 - resid / total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Pass;
    use crate::inference::PosteriorOptions;
    use crate::kernels::k_se;
    use crate::trainer::{init_state, update_posterior, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, n_ind: usize, per: usize) -> (ModelState, LongitudinalDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_ind * per;
        let p = 3;
        let individual: Vec<usize> = (0..n).map(|r| r / per).collect();
        let x = DenseMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..n).map(|r| x.row(r)[0].sin() + 0.5 * (individual[r] % 2) as f64).collect();
        let data = LongitudinalDataset::new(individual, vec![0.0; n], x, y).unwrap();
        let cfg = TrainConfig {
            latent_dim: 2,
            embedding_dim: 2,
            inducing_points: 4,
            hidden_units: 5,
            dropout: 0.0,
            embedding_init_std: 0.5,
            ..TrainConfig::default()
        };
        let mut s = init_state(&cfg, &data, &mut rng).unwrap();
        s.noise.log_sigma2 = -1.0;
        update_posterior(&mut s, &data, PosteriorOptions::default(), false).unwrap();
        (s, data)
    }

    /// Additive kernel evaluated pointwise from the model parameters.
    fn kernel_oracle(s: &ModelState, xa: &[f64], ia: usize, xb: Option<&[f64]>, ib: Option<usize>, zb: Option<usize>) -> f64 {
        let enc = |x: &[f64]| s.kernel.features.map(x, Pass::Eval).unwrap();
        let ea = enc(xa);
        let ga = s.kernel.embeddings.individual(ia);
        let (av, ai) = (s.kernel.alpha_v, s.kernel.alpha_i);
        match zb {
            Some(m) => av * av * k_se(&ea, s.inducing.varying(m)).unwrap() + ai * ai * k_se(ga, s.inducing.invariant(m)).unwrap(),
            None => {
                let eb = enc(xb.unwrap());
                let gb = s.kernel.embeddings.individual(ib.unwrap());
                av * av * k_se(&ea, &eb).unwrap() + ai * ai * k_se(ga, gb).unwrap()
            }
        }
    }

    /// Plain Gauss-Jordan inverse for the oracle only.
    fn gauss_inverse(m: &DenseMatrix) -> DenseMatrix {
        let n = m.rows();
        let mut a = m.clone();
        let mut inv = DenseMatrix::identity(n);
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[(i, c)].abs().total_cmp(&a[(j, c)].abs())).unwrap();
            for k in 0..n {
                let t = a[(c, k)];
                a[(c, k)] = a[(p, k)];
                a[(p, k)] = t;
                let t = inv[(c, k)];
                inv[(c, k)] = inv[(p, k)];
                inv[(p, k)] = t;
            }
            let d = a[(c, c)];
            for k in 0..n {
                a[(c, k)] /= d;
                inv[(c, k)] /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = a[(r, c)];
                    for k in 0..n {
                        a[(r, k)] -= f * a[(c, k)];
                        inv[(r, k)] -= f * inv[(c, k)];
                    }
                }
            }
        }
        inv
    }

    #[test]
    fn matches_dense_formula() {
        for seed in 0..3 {
            let (mut s, data) = setup(seed, 3, 4);
            s.mean_rule = MeanRule::NoisyInducing;
            let pred = predict(&s, &data, PredictOptions::default()).unwrap();
            let m = s.inducing.len();
            let n = data.len();
            let kzz_noisy = DenseMatrix::from_fn(m, m, |a, b| {
                let za = &s.inducing.z.row(a);
                let zb = &s.inducing.z.row(b);
                let (av, ai) = (s.kernel.alpha_v, s.kernel.alpha_i);
                let dv = s.inducing.dv;
                let k = av * av * k_se(&za[..dv], &zb[..dv]).unwrap() + ai * ai * k_se(&za[dv..], &zb[dv..]).unwrap();
                k + if a == b { s.jitter + s.noise.sigma2() } else { 0.0 }
            });
            let inv = gauss_inverse(&kzz_noisy);
            let ksz = DenseMatrix::from_fn(n, m, |r, c| kernel_oracle(&s, data.x.row(r), data.individual[r], None, None, Some(c)));
            let proj = ksz.matmul(&inv).unwrap();
            let mean = proj.matvec(&s.posterior.mu).unwrap();
            for r in 0..n {
                assert!((mean[r] - pred.mean[r]).abs() < 1e-8);
            }
            let cov = pred.covariance.unwrap();
            for a in 0..n {
                for b in 0..n {
                    let kab = kernel_oracle(&s, data.x.row(a), data.individual[a], Some(data.x.row(b)), Some(data.individual[b]), None);
                    let sub: f64 = (0..m).map(|c| proj[(a, c)] * ksz[(b, c)]).sum();
                    assert!((cov[(a, b)] - (kab - sub)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn projected_mean_matches_dense_formula() {
        let (s, data) = setup(12, 3, 4);
        let kz = crate::trainer::dataset_kernels(&s, &data).unwrap();
        let inv = gauss_inverse(&kz.kzz_jittered());
        let a = kz.kxz.matmul(&inv).unwrap();
        let pred = predict(&s, &data, PredictOptions::default()).unwrap();
        let mean = a.matvec(&s.posterior.mu).unwrap();
        let kxx = crate::trainer::dataset_kxx(&s, &data).unwrap();
        let q = a.matmul_t(&kz.kxz).unwrap();
        let al = a.matmul(&s.posterior.l.to_dense()).unwrap();
        let cov = kxx.sub(&q).unwrap().add(&al.matmul_t(&al).unwrap()).unwrap();
        for r in 0..data.len() {
            assert!((mean[r] - pred.mean[r]).abs() < 1e-8);
        }
        assert!(cov.max_abs_diff(pred.covariance.as_ref().unwrap()) < 1e-8);
    }

    #[test]
    fn zero_mean_and_prior_recovery() {
        let (mut s, data) = setup(4, 3, 3);
        s.posterior.mu = vec![0.0; 4];
        let pred = predict(&s, &data, PredictOptions::default()).unwrap();
        assert!(pred.mean.iter().all(|&v| v == 0.0));
        // inducing points far away: K_*Z vanishes
        let (mut s, data) = setup(5, 3, 3);
        s.inducing.z = s.inducing.z.scale(0.0).add(&DenseMatrix::from_fn(4, 4, |_, _| 1e3)).unwrap();
        let pred = predict(&s, &data, PredictOptions::default()).unwrap();
        assert!(pred.mean.iter().all(|v| v.abs() < 1e-300));
        let lv = s.kernel.features.map_rows(&data.x).unwrap();
        let li = crate::kernels::individual_latents(&s.kernel.embeddings, &data.individual).unwrap();
        let kxx = kxx_from_latents(s.kernel.alpha_v, s.kernel.alpha_i, &lv, &li).unwrap();
        assert!(pred.covariance.unwrap().max_abs_diff(&kxx) < 1e-12);
    }

    #[test]
    fn diagonal_mode_and_noise_option() {
        for rule in [MeanRule::NoisyInducing, MeanRule::Projected] {
            let (mut s, data) = setup(6, 3, 4);
            s.mean_rule = rule;
            let full = predict(&s, &data, PredictOptions::default()).unwrap();
            let diag = predict(
                &s,
                &data,
                PredictOptions {
                    covariance: CovarianceMode::Diagonal,
                    ..Default::default()
                },
            )
            .unwrap();
            for (a, b) in full.variance.iter().zip(&diag.variance) {
                assert!((a - b).abs() < 1e-10);
            }
            let noisy = predict(
                &s,
                &data,
                PredictOptions {
                    observation_noise: true,
                    ..Default::default()
                },
            )
            .unwrap();
            for (a, b) in full.variance.iter().zip(&noisy.variance) {
                assert!((b - a - s.noise.sigma2()).abs() < 1e-12);
            }
        }
    }

    fn min_eigenvalue(m: &DenseMatrix) -> f64 {
        // smallest shift that makes the matrix factorizable, by bisection
        let (mut lo, mut hi) = (-10.0 * (1.0 + m.max_abs()), 10.0 * (1.0 + m.max_abs()));
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let shifted = m.add(&DenseMatrix::identity(m.rows()).scale(-mid)).unwrap();
            if cholesky(&shifted).is_ok() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    #[test]
    fn covariance_is_psd() {
        for seed in 0..10 {
            for rule in [MeanRule::NoisyInducing, MeanRule::Projected] {
                let (mut s, data) = setup(20 + seed, 5, 6);
                s.mean_rule = rule;
                let cov = predict(&s, &data, PredictOptions::default()).unwrap().covariance.unwrap();
                assert!(cov.asymmetry() == 0.0);
                assert!(min_eigenvalue(&cov) >= -1e-8);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (s, data) = setup(7, 4, 3);
        let perm: Vec<usize> = (0..data.len()).rev().collect();
        let shuffled = data.subset(&perm);
        let a = predict(&s, &data, PredictOptions::default()).unwrap();
        let b = predict(&s, &shuffled, PredictOptions::default()).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert!((a.mean[p] - b.mean[k]).abs() < 1e-12);
            assert!((a.variance[p] - b.variance[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn unseen_individual_policy() {
        let (s, data) = setup(8, 3, 3);
        let mut other = data.subset(&[0, 1]);
        other.individual = vec![5, 5];
        assert!(matches!(predict_mean(&s, &other, false), Err(Error::UnknownEntity { id: 6, .. })));
        let fb = predict_mean(&s, &other, true).unwrap();
        assert_eq!(fb.len(), 2);
    }

    #[test]
    fn correlation_properties() {
        let (s, data) = setup(9, 4, 5);
        let r = correlation_matrix(&s, &data, CorrelationOptions::default()).unwrap();
        for i in 0..data.len() {
            assert_eq!(r[(i, i)], 1.0);
            for j in 0..data.len() {
                assert!(r[(i, j)] >= -1.0 && r[(i, j)] <= 1.0 + 1e-10);
            }
        }
        let mut dup = data.subset(&[0, 0, 3]);
        dup.y = vec![0.0, 0.0, 1.0];
        let r = correlation_matrix(
            &s,
            &dup,
            CorrelationOptions {
                include_noise: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(r[(0, 1)] > 1.0 - 1e-6);
        let small = CorrelationOptions {
            cap: 5,
            ..Default::default()
        };
        assert!(matches!(
            correlation_matrix(&s, &data, small),
            Err(Error::SizeCapExceeded { n: 20, cap: 5 })
        ));
    }

    #[test]
    fn r_squared_cases() {
        let a = [1.0, 2.0, 4.0, 3.0];
        assert_eq!(r_squared(&a, &a).unwrap(), 1.0);
        assert!(r_squared(&[2.5; 4], &a).unwrap().abs() < 1e-15);
        assert!(r_squared(&[4.0, 3.0, 1.0, 2.0], &a).unwrap() < 0.0);
        assert!(matches!(r_squared(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::DegenerateTarget)));
        assert!(r_squared(&[1.0], &[1.0, 2.0]).is_err());
    }
}
