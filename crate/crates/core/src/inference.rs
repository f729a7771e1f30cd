//! Variational inference over the inducing signal `u ~ q = N(mu, L L^T)` with
//! the deterministic training conditional `f = A u`, `A = K_XZ K_ZZ^{-1}`.
//!
//! Log-likelihoods omit the constant `-N/2 log(2 pi)` throughout; the Monte
//! Carlo estimator uses the same convention so the two are comparable.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelMatrices;
use crate::numerics::{cholesky, dot, solve_lq, solve_psd, DenseMatrix, LowerTriangular};

/// Gaussian observation noise, stored as `log sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub log_sigma2: f64,
}

impl NoiseModel {
    pub fn from_sigma2(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise variance {sigma2} must be positive")));
        }
        Ok(NoiseModel {
            log_sigma2: sigma2.ln(),
        })
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub mu: Vec<f64>,
    pub l: LowerTriangular,
}

impl VariationalPosterior {
    /// The prior-like initial state `N(0, I)`.
    pub fn standard(m: usize) -> Self {
        VariationalPosterior {
            mu: vec![0.0; m],
            l: LowerTriangular::identity(m),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Shape of the variational factor `L_q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorForm {
    /// Only the main diagonal of `L_q` is kept.
    #[default]
    Diagonal,
    Full,
}

/// How the optimal `L_q` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LqRule {
    /// Exact maximizer of the closed-form ELBO within the chosen form:
    /// `chol(K B K)` when full, `1/sqrt(diag((K B K)^{-1}))` when diagonal.
    #[default]
    Stationary,
    /// Factor both sides of `L_q (I + 1 1^T) = K B K` and solve `L_q C = U`
    /// (full) or take `diag(U) / diag(C)` (diagonal).
    CholeskyRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PosteriorOptions {
    pub form: PosteriorForm,
    pub rule: LqRule,
}

fn check_dims(kz: &KernelMatrices, y: &[f64]) -> Result<()> {
    if kz.kxz.rows() != y.len() {
        return Err(Error::shape("outcomes vs K_XZ rows", kz.kxz.rows(), y.len()));
    }
    if kz.kxz.cols() != kz.m() || !kz.kzz.is_square() {
        return Err(Error::shape("K_XZ cols vs K_ZZ", kz.m(), kz.kxz.cols()));
    }
    Ok(())
}

/// `A = K_XZ K_ZZ^{-1}` (N x M), computed as the transpose of `K_ZZ^{-1} K_XZ^T`.
pub fn projection_a(kz: &KernelMatrices) -> Result<DenseMatrix> {
    Ok(solve_psd(&kz.kzz_jittered(), &kz.kxz.transpose())?.transpose())
}

fn b_operand(kz: &KernelMatrices, noise: &NoiseModel) -> Result<DenseMatrix> {
    let gram = kz.kxz.t_matmul(&kz.kxz)?;
    Ok(kz.kzz_jittered().add(&gram.scale(1.0 / noise.sigma2()))?.symmetrize())
}

/// `B = (K_ZZ + sigma^{-2} K_XZ^T K_XZ)^{-1}`.
pub fn projection_b(kz: &KernelMatrices, noise: &NoiseModel) -> Result<DenseMatrix> {
    let op = b_operand(kz, noise)?;
    Ok(solve_psd(&op, &DenseMatrix::identity(kz.m()))?.symmetrize())
}

/// Closed-form posterior update:
/// `mu = sigma^{-2} K_ZZ B K_XZ^T y`, and `L_q` per `opts`.
pub fn optimal_posterior(
    kz: &KernelMatrices,
    y: &[f64],
    noise: &NoiseModel,
    opts: PosteriorOptions,
) -> Result<VariationalPosterior> {
    check_dims(kz, y)?;
    let m = kz.m();
    let kzz = kz.kzz_jittered();
    let op_factor = cholesky(&b_operand(kz, noise)?)?;
    let kty = kz.kxz.t_matvec(y)?;
    let b_kty = op_factor.cho_solve(&kty)?;
    let inv_s2 = 1.0 / noise.sigma2();
    let mu: Vec<f64> = kzz.matvec(&b_kty)?.into_iter().map(|v| v * inv_s2).collect();

    let kbk = kzz.matmul(&op_factor.cho_solve_matrix(&kzz)?)?.symmetrize();
    let l = match (opts.rule, opts.form) {
        (LqRule::Stationary, PosteriorForm::Full) => cholesky(&kbk)?,
        (LqRule::Stationary, PosteriorForm::Diagonal) => {
            // (K B K)^{-1} = K^{-1} B^{-1} K^{-1}, evaluated through solves
            let kf = cholesky(&kzz)?;
            let left = kf.cho_solve_matrix(&b_operand(kz, noise)?)?;
            let precision = kf.cho_solve_matrix(&left.transpose())?;
            let diag: Vec<f64> = precision.diag().into_iter().map(|p| 1.0 / p.sqrt()).collect();
            if diag.iter().any(|d| !d.is_finite()) {
                return Err(Error::NonFiniteValue("diagonal posterior factor".into()));
            }
            LowerTriangular::from_diag(&diag)
        }
        (LqRule::CholeskyRatio, form) => {
            let c = ones_factor(m)?;
            let u = cholesky(&kbk)?;
            match form {
                PosteriorForm::Full => solve_lq(&u, &c)?,
                PosteriorForm::Diagonal => {
                    let diag: Vec<f64> = (0..m).map(|i| u.get(i, i) / c.get(i, i)).collect();
                    LowerTriangular::from_diag(&diag)
                }
            }
        }
    };
    Ok(VariationalPosterior { mu, l })
}

/// Cholesky factor of `I + 1 1^T`.
pub fn ones_factor(m: usize) -> Result<LowerTriangular> {
    cholesky(&DenseMatrix::from_fn(m, m, |i, j| if i == j { 2.0 } else { 1.0 }))
}

fn log_det_positive(l: &LowerTriangular) -> Result<f64> {
    let diag = l.diag();
    if diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::NonFiniteValue("log-determinant of L_q with a non-positive diagonal".into()));
    }
    Ok(diag.iter().map(|d| d.ln()).sum())
}

/// `KL[N(mu, L L^T) || N(0, K_ZZ)]`.
pub fn kl_term(kz: &KernelMatrices, post: &VariationalPosterior) -> Result<f64> {
    let m = kz.m();
    if post.dim() != m || post.l.dim() != m {
        return Err(Error::shape("posterior dimension", m, post.dim()));
    }
    let kf = cholesky(&kz.kzz_jittered())?;
    let log_det_k = 2.0 * kf.log_det();
    let log_det_l = log_det_positive(&post.l)?;
    // tr(K^{-1} L L^T) = |K_chol^{-1} L|_F^2
    let mut trace = 0.0;
    for j in 0..m {
        let col: Vec<f64> = (0..m).map(|i| post.l.get(i, j)).collect();
        let w = kf.solve(&col)?;
        trace += dot(&w, &w);
    }
    let w = kf.solve(&post.mu)?;
    let maha = dot(&w, &w);
    let kl = 0.5 * (log_det_k - 2.0 * log_det_l - m as f64 + trace + maha);
    if !kl.is_finite() {
        return Err(Error::NonFiniteValue("KL term".into()));
    }
    Ok(kl)
}

/// Pieces of the closed-form ELBO; `value = data - kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `E_q[log p(y | f = A u)]`.
    pub data: f64,
    pub kl: f64,
    pub value: f64,
}

/// Expected log-likelihood under `q` with `f = A u`:
/// `-N log sigma - (|y - A mu|^2 + |A L|_F^2) / (2 sigma^2)`.
pub fn expected_log_likelihood(a: &DenseMatrix, post: &VariationalPosterior, y: &[f64], noise: &NoiseModel) -> Result<f64> {
    let fitted = a.matvec(&post.mu)?;
    let resid: f64 = y.iter().zip(&fitted).map(|(y, f)| (y - f) * (y - f)).sum();
    let spread = a.matmul(&post.l.to_dense())?.frobenius_sq();
    let n = y.len() as f64;
    Ok(-0.5 * n * noise.log_sigma2 - (resid + spread) / (2.0 * noise.sigma2()))
}

pub fn elbo_terms(kz: &KernelMatrices, post: &VariationalPosterior, y: &[f64], noise: &NoiseModel) -> Result<ElboTerms> {
    check_dims(kz, y)?;
    let a = projection_a(kz)?;
    let data = expected_log_likelihood(&a, post, y, noise)?;
    let kl = kl_term(kz, post)?;
    let value = data - kl;
    if !value.is_finite() {
        return Err(Error::NonFiniteValue("ELBO".into()));
    }
    Ok(ElboTerms { data, kl, value })
}

pub fn elbo_closed_form(kz: &KernelMatrices, post: &VariationalPosterior, y: &[f64], noise: &NoiseModel) -> Result<f64> {
    Ok(elbo_terms(kz, post, y, noise)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloElbo {
    pub value: f64,
    /// Standard error of the sampled data term.
    pub std_error: f64,
}

/// Sampled ELBO: averages `log p(y | A (mu + L eps))` over `samples` draws and
/// subtracts the exact KL term.
pub fn elbo_monte_carlo(
    kz: &KernelMatrices,
    post: &VariationalPosterior,
    y: &[f64],
    noise: &NoiseModel,
    samples: usize,
    rng: &mut dyn RngCore,
) -> Result<MonteCarloElbo> {
    if samples == 0 {
        return Err(Error::InvalidConfig("Monte Carlo ELBO needs at least one sample".into()));
    }
    check_dims(kz, y)?;
    let a = projection_a(kz)?;
    let spread = a.matmul(&post.l.to_dense())?;
    let fitted = a.matvec(&post.mu)?;
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let m = post.dim();
    let n = y.len() as f64;
    let const_part = -0.5 * n * noise.log_sigma2;
    let inv = 1.0 / (2.0 * noise.sigma2());
    let mut eps = vec![0.0; m];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        let mut sq = 0.0;
        for (i, r) in resid.iter().enumerate() {
            let d = r - dot(spread.row(i), &eps);
            sq += d * d;
        }
        let ll = const_part - sq * inv;
        sum += ll;
        sum_sq += ll * ll;
    }
    let s = samples as f64;
    let mean = sum / s;
    let var = if samples > 1 {
        ((sum_sq - s * mean * mean) / (s - 1.0)).max(0.0)
    } else {
        0.0
    };
    let kl = kl_term(kz, post)?;
    Ok(MonteCarloElbo {
        value: mean - kl,
        std_error: (var / s).sqrt(),
    })
}

/// Gradient of `data_scale * E_q[log p] - kl_weight * KL` with respect to the
/// kernel matrices and `log sigma^2`, holding `q` fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGradient {
    pub value: f64,
    pub d_kxz: DenseMatrix,
    /// Contract with a symmetric perturbation of `K_ZZ` as `sum_ij G_ij dK_ij`.
    pub d_kzz: DenseMatrix,
    pub d_log_sigma2: f64,
}

/// Gradient terms shared by the exact and the sampled objectives.
pub(crate) struct Factorized {
    pub kf: LowerTriangular,
    pub a: DenseMatrix,
}

impl Factorized {
    pub fn new(kz: &KernelMatrices) -> Result<Self> {
        let kf = cholesky(&kz.kzz_jittered())?;
        let a = kf.cho_solve_matrix(&kz.kxz.transpose())?.transpose();
        Ok(Factorized { kf, a })
    }

    /// Maps `dJ/dA` to `(dJ/dK_XZ, dJ/dK_ZZ)` through `A = K_XZ K_ZZ^{-1}`.
    pub fn chain_a(&self, g_a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let g_kxz = self.kf.cho_solve_matrix(&g_a.transpose())?.transpose();
        let g_kzz = self.a.t_matmul(&g_kxz)?.scale(-1.0);
        Ok((g_kxz, g_kzz))
    }

    /// `dKL/dK_ZZ = (K^{-1} - K^{-1} (L L^T + mu mu^T) K^{-1}) / 2`.
    pub fn kl_kzz_grad(&self, post: &VariationalPosterior) -> Result<DenseMatrix> {
        let m = post.dim();
        let kinv = self.kf.cho_solve_matrix(&DenseMatrix::identity(m))?.symmetrize();
        let mut second = post.l.outer();
        for i in 0..m {
            for j in 0..m {
                second[(i, j)] += post.mu[i] * post.mu[j];
            }
        }
        let inner = kinv.matmul(&second)?.matmul(&kinv)?;
        Ok(kinv.sub(&inner)?.scale(0.5))
    }

    pub fn kinv(&self) -> Result<DenseMatrix> {
        Ok(self.kf.cho_solve_matrix(&DenseMatrix::identity(self.kf.dim()))?.symmetrize())
    }
}

pub fn elbo_kernel_gradient(
    kz: &KernelMatrices,
    post: &VariationalPosterior,
    y: &[f64],
    noise: &NoiseModel,
    data_scale: f64,
    kl_weight: f64,
) -> Result<KernelGradient> {
    check_dims(kz, y)?;
    let fac = Factorized::new(kz)?;
    let s2 = noise.sigma2();
    let fitted = fac.a.matvec(&post.mu)?;
    let resid: Vec<f64> = y.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let cov = post.l.outer();
    let a_cov = fac.a.matmul(&cov)?;
    let spread: f64 = fac.a.as_slice().iter().zip(a_cov.as_slice()).map(|(x, y)| x * y).sum();
    let sq: f64 = resid.iter().map(|r| r * r).sum();
    let n = y.len() as f64;
    let data = -0.5 * n * noise.log_sigma2 - (sq + spread) / (2.0 * s2);

    // dData/dA = sigma^{-2} (r mu^T - A S)
    let m = post.dim();
    let g_a = DenseMatrix::from_fn(y.len(), m, |i, j| data_scale * (resid[i] * post.mu[j] - a_cov[(i, j)]) / s2);
    let (d_kxz, mut d_kzz) = fac.chain_a(&g_a)?;
    let kl = kl_term(kz, post)?;
    if kl_weight != 0.0 {
        d_kzz = d_kzz.sub(&fac.kl_kzz_grad(post)?.scale(kl_weight))?;
    }
    let d_log_sigma2 = data_scale * (-0.5 * n + (sq + spread) / (2.0 * s2));
    let value = data_scale * data - kl_weight * kl;
    if !value.is_finite() || !d_kxz.is_finite() || !d_kzz.is_finite() {
        return Err(Error::NonFiniteValue("ELBO gradient".into()));
    }
    Ok(KernelGradient {
        value,
        d_kxz,
        d_kzz,
        d_log_sigma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small instance with kernel-like matrices and a random posterior.
    fn instance(seed: u64, n: usize, m: usize) -> (KernelMatrices, VariationalPosterior, Vec<f64>, NoiseModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..n + m).map(|_| (0..2).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let k = |a: &[f64], b: &[f64]| 1.3 * (-0.5 * crate::kernels::sq_dist(a, b)).exp();
        let kxz = DenseMatrix::from_fn(n, m, |i, j| k(&pts[i], &pts[n + j]));
        let kzz = DenseMatrix::from_fn(m, m, |i, j| k(&pts[n + i], &pts[n + j]));
        let kz = KernelMatrices::new(kxz, kzz).with_jitter(1e-3);
        let mu = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut l = LowerTriangular::from_diag(&(0..m).map(|_| rng.random_range(0.2..1.0)).collect::<Vec<_>>());
        for i in 0..m {
            for j in 0..i {
                l.set(i, j, rng.random_range(-0.3..0.3));
            }
        }
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let noise = NoiseModel::from_sigma2(rng.random_range(0.2..1.5)).unwrap();
        (kz, VariationalPosterior { mu, l }, y, noise)
    }

    #[test]
    fn projection_a_cases() {
        let k = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let kz = KernelMatrices::new(k.clone(), k.clone());
        assert!(projection_a(&kz).unwrap().max_abs_diff(&DenseMatrix::identity(2)) < 1e-12);
        let kz = KernelMatrices::new(DenseMatrix::zeros(3, 2), k);
        assert_eq!(projection_a(&kz).unwrap().max_abs(), 0.0);
        let (kz, _, _, _) = instance(1, 9, 4);
        let a = projection_a(&kz).unwrap();
        assert!(a.matmul(&kz.kzz_jittered()).unwrap().max_abs_diff(&kz.kxz) < 1e-8);
    }

    #[test]
    fn projection_b_cases() {
        let kz = KernelMatrices::new(DenseMatrix::zeros(4, 3), DenseMatrix::identity(3));
        let one = NoiseModel::from_sigma2(1.0).unwrap();
        assert!(projection_b(&kz, &one).unwrap().max_abs_diff(&DenseMatrix::identity(3)) < 1e-15);
        let kz = KernelMatrices::new(DenseMatrix::from_fn(4, 3, |i, j| (i + j) as f64 * 0.1), DenseMatrix::identity(3));
        let huge = NoiseModel::from_sigma2(1e12).unwrap();
        assert!(projection_b(&kz, &huge).unwrap().max_abs_diff(&DenseMatrix::identity(3)) < 1e-10);
        let (kz, _, _, noise) = instance(2, 12, 4);
        let b = projection_b(&kz, &noise).unwrap();
        let op = b_operand(&kz, &noise).unwrap();
        assert!(b.matmul(&op).unwrap().max_abs_diff(&DenseMatrix::identity(4)) < 1e-8);
        assert!(b.asymmetry() == 0.0);
    }

    #[test]
    fn zero_outcomes_give_zero_mean() {
        let (kz, _, y, noise) = instance(3, 8, 3);
        let post = optimal_posterior(&kz, &vec![0.0; y.len()], &noise, PosteriorOptions::default()).unwrap();
        assert!(post.mu.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_data_signal_lq_cases() {
        let kz = KernelMatrices::new(DenseMatrix::zeros(5, 3), DenseMatrix::identity(3));
        let y = [1.0, -1.0, 0.5, 2.0, 0.0];
        let noise = NoiseModel::from_sigma2(0.5).unwrap();
        let ratio_full = PosteriorOptions {
            form: PosteriorForm::Full,
            rule: LqRule::CholeskyRatio,
        };
        let post = optimal_posterior(&kz, &y, &noise, ratio_full).unwrap();
        assert!(post.mu.iter().all(|&v| v == 0.0));
        let c = ones_factor(3).unwrap();
        let lc = post.l.to_dense().matmul(&c.to_dense()).unwrap();
        assert!(lc.max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
        // the stationary rule recovers the prior factor exactly
        let post = optimal_posterior(&kz, &y, &noise, PosteriorOptions::default()).unwrap();
        assert!(post.l.to_dense().max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    fn elbo_at(kz: &KernelMatrices, mu: &[f64], l: &LowerTriangular, y: &[f64], noise: &NoiseModel) -> f64 {
        let post = VariationalPosterior { mu: mu.to_vec(), l: l.clone() };
        elbo_closed_form(kz, &post, y, noise).unwrap()
    }

    #[test]
    fn optimal_posterior_is_stationary() {
        let h = 1e-5;
        for seed in 0..10 {
            let (kz, _, y, noise) = instance(40 + seed, 15, 3);
            for form in [PosteriorForm::Diagonal, PosteriorForm::Full] {
                let post = optimal_posterior(&kz, &y, &noise, PosteriorOptions { form, rule: LqRule::Stationary }).unwrap();
                let mut worst = 0.0_f64;
                for k in 0..post.dim() {
                    let mut up = post.mu.clone();
                    let mut dn = post.mu.clone();
                    up[k] += h;
                    dn[k] -= h;
                    let g = (elbo_at(&kz, &up, &post.l, &y, &noise) - elbo_at(&kz, &dn, &post.l, &y, &noise)) / (2.0 * h);
                    worst = worst.max(g.abs());
                }
                for i in 0..post.dim() {
                    let cols = if form == PosteriorForm::Full { 0..=i } else { i..=i };
                    for j in cols {
                        let mut up = post.l.clone();
                        let mut dn = post.l.clone();
                        up.set(i, j, post.l.get(i, j) + h);
                        dn.set(i, j, post.l.get(i, j) - h);
                        let g = (elbo_at(&kz, &post.mu, &up, &y, &noise) - elbo_at(&kz, &post.mu, &dn, &y, &noise)) / (2.0 * h);
                        worst = worst.max(g.abs());
                    }
                }
                assert!(worst < 1e-5, "seed {seed} {form:?}: gradient {worst:e}");
            }
        }
    }

    #[test]
    fn elbo_trivial_cases() {
        let kz = KernelMatrices::new(DenseMatrix::zeros(0, 3), DenseMatrix::identity(3));
        let post = VariationalPosterior::standard(3);
        let one = NoiseModel::from_sigma2(1.0).unwrap();
        assert_eq!(kl_term(&kz, &post).unwrap(), 0.0);
        assert_eq!(elbo_closed_form(&kz, &post, &[], &one).unwrap(), 0.0);

        let kz = KernelMatrices::new(DenseMatrix::zeros(3, 3), DenseMatrix::identity(3));
        let y = [1.0, -2.0, 0.5];
        let value = elbo_closed_form(&kz, &post, &y, &one).unwrap();
        assert!((value - (-0.5 * 5.25)).abs() < 1e-14);
    }

    #[test]
    fn kl_cases() {
        let kz = KernelMatrices::new(DenseMatrix::zeros(0, 2), DenseMatrix::identity(2));
        let mut post = VariationalPosterior::standard(2);
        post.mu[0] = 1.0;
        assert!((kl_term(&kz, &post).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_sampled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..5 {
            let (kz, post, _, _) = instance(70 + seed, 1, 3);
            let exact = kl_term(&kz, &post).unwrap();
            // E_q[log q(u) - log p(u)] by sampling u ~ q
            let kf = cholesky(&kz.kzz_jittered()).unwrap();
            let log_det_k = 2.0 * kf.log_det();
            let log_det_s = 2.0 * post.l.log_det();
            let samples = 200_000;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for _ in 0..samples {
                let eps: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
                let lf = post.l.to_dense().matvec(&eps).unwrap();
                let u: Vec<f64> = post.mu.iter().zip(&lf).map(|(m, v)| m + v).collect();
                let w = kf.solve(&u).unwrap();
                let log_q = -0.5 * log_det_s - 0.5 * dot(&eps, &eps);
                let log_p = -0.5 * log_det_k - 0.5 * dot(&w, &w);
                let d = log_q - log_p;
                sum += d;
                sum_sq += d * d;
            }
            let mean = sum / samples as f64;
            let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
            assert!((mean - exact).abs() < 3.0 * se + 1e-9, "{mean} vs {exact} (se {se})");
        }
    }

    #[test]
    fn kl_is_nonnegative() {
        for seed in 0..200 {
            let (kz, post, _, _) = instance(1000 + seed, 2, 1 + (seed as usize % 5));
            assert!(kl_term(&kz, &post).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn elbo_splits_into_data_and_kl() {
        let (kz, post, y, noise) = instance(11, 10, 3);
        let t = elbo_terms(&kz, &post, &y, &noise).unwrap();
        // recompute the data term by brute force over A
        let a = projection_a(&kz).unwrap();
        let mut sq = 0.0;
        for i in 0..y.len() {
            let f: f64 = (0..3).map(|j| a[(i, j)] * post.mu[j]).sum();
            sq += (y[i] - f).powi(2);
            for j in 0..3 {
                let al: f64 = (0..3).map(|k| a[(i, k)] * post.l.get(k, j)).sum();
                sq += al * al;
            }
        }
        let data = -0.5 * y.len() as f64 * noise.log_sigma2 - sq / (2.0 * noise.sigma2());
        assert!((t.data - data).abs() < 1e-10);
        assert!((t.value - (data - kl_term(&kz, &post).unwrap())).abs() < 1e-10);
    }

    #[test]
    fn elbo_decreases_with_misfit() {
        let (kz, post, y, noise) = instance(12, 10, 3);
        let a = projection_a(&kz).unwrap();
        let fit = a.matvec(&post.mu).unwrap();
        let mut last = f64::INFINITY;
        for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let yy: Vec<f64> = fit.iter().map(|f| f + shift).collect();
            let _ = &y;
            let v = elbo_closed_form(&kz, &post, &yy, &noise).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn monte_carlo_degenerate_and_seeded() {
        let (kz, mut post, y, noise) = instance(13, 8, 3);
        post.l = LowerTriangular::from_diag(&[1e-12; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mc = elbo_monte_carlo(&kz, &post, &y, &noise, 10, &mut rng).unwrap();
        let a = projection_a(&kz).unwrap();
        let data = expected_log_likelihood(&a, &post, &y, &noise).unwrap();
        let kl = kl_term(&kz, &post).unwrap();
        assert!((mc.value - (data - kl)).abs() < 1e-9);

        let mut r1 = ChaCha8Rng::seed_from_u64(99);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let post = instance(13, 8, 3).1;
        let a = elbo_monte_carlo(&kz, &post, &y, &noise, 500, &mut r1).unwrap();
        let b = elbo_monte_carlo(&kz, &post, &y, &noise, 500, &mut r2).unwrap();
        assert_eq!(a, b);
        assert!(elbo_monte_carlo(&kz, &post, &y, &noise, 0, &mut r1).is_err());
    }

    #[test]
    fn kernel_gradient_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..4 {
            let (kz, post, y, noise) = instance(200 + seed, 7, 3);
            let (scale, w) = (1.7, 0.6);
            let g = elbo_kernel_gradient(&kz, &post, &y, &noise, scale, w).unwrap();
            let f = |kz: &KernelMatrices, noise: &NoiseModel| {
                let t = elbo_terms(kz, &post, &y, noise).unwrap();
                scale * t.data - w * t.kl
            };
            assert!((g.value - f(&kz, &noise)).abs() < 1e-10);
            for i in 0..kz.n() {
                for j in 0..kz.m() {
                    let mut up = kz.clone();
                    let mut dn = kz.clone();
                    up.kxz[(i, j)] += h;
                    dn.kxz[(i, j)] -= h;
                    let fd = (f(&up, &noise) - f(&dn, &noise)) / (2.0 * h);
                    assert!((fd - g.d_kxz[(i, j)]).abs() < 1e-5 * fd.abs().max(1.0));
                }
            }
            for i in 0..kz.m() {
                for j in 0..=i {
                    let mut up = kz.clone();
                    let mut dn = kz.clone();
                    up.kzz[(i, j)] += h;
                    dn.kzz[(i, j)] -= h;
                    if i != j {
                        up.kzz[(j, i)] += h;
                        dn.kzz[(j, i)] -= h;
                    }
                    let fd = (f(&up, &noise) - f(&dn, &noise)) / (2.0 * h);
                    let an = if i == j { g.d_kzz[(i, i)] } else { g.d_kzz[(i, j)] + g.d_kzz[(j, i)] };
                    assert!((fd - an).abs() < 1e-5 * fd.abs().max(1.0), "({i},{j}) fd {fd} an {an}");
                }
            }
            let up = NoiseModel { log_sigma2: noise.log_sigma2 + h };
            let dn = NoiseModel { log_sigma2: noise.log_sigma2 - h };
            let fd = (f(&kz, &up) - f(&kz, &dn)) / (2.0 * h);
            assert!((fd - g.d_log_sigma2).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }
}
