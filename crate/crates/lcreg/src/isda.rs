//! Per-latent-category Gaussian statistics tracked incrementally across
//! training iterations, the linear ramp schedule for augmentation strength,
//! the closed-form augmented cross-entropy bound, and explicit Gaussian
//! sampling used as a Monte-Carlo verification oracle.

use crate::error::{Error, Result};
use crate::gaussian::{check_psd, sample_gaussian};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::pool::{LatentPool, PoolVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Running count / mean / covariance per latent category, merged with the
/// pooled-population update rule:
///
/// ```text
/// n      <- n_old + n'
/// mu     <- (n_old*mu_old + n'*mu') / n
/// Sigma  <- (n_old*Sigma_old + n'*Sigma') / n
///           + n_old*n' * (mu_old - mu')(mu_old - mu')^T / n^2
/// ```
///
/// A category with no observations keeps zero mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    categories: usize,
    dim: usize,
    counts: Vec<u64>,
    means: Vec<f64>, // categories x dim
    covs: Vec<f64>,  // categories x dim x dim
}

impl RunningStats {
    pub fn new(categories: usize, dim: usize) -> Result<Self> {
        if categories == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "running stats need categories, dim >= 1, got {categories}, {dim}"
            )));
        }
        Ok(Self {
            categories,
            dim,
            counts: vec![0; categories],
            means: vec![0.0; categories * dim],
            covs: vec![0.0; categories * dim * dim],
        })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, m: usize) -> u64 {
        self.counts[m]
    }

    pub fn mean(&self, m: usize) -> &[f64] {
        &self.means[m * self.dim..(m + 1) * self.dim]
    }

    pub fn cov(&self, m: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.covs[m * dd..(m + 1) * dd]
    }

    /// Merge a group observation (size `n_prime`, mean `obs_mean`, population
    /// covariance `obs_cov`) into category `m`.
    pub fn update(
        &mut self,
        m: usize,
        obs_mean: &[f64],
        obs_cov: &[f64],
        n_prime: u64,
    ) -> Result<()> {
        if m >= self.categories {
            return Err(Error::InvalidArgument(format!("category {m} out of {}", self.categories)));
        }
        if n_prime == 0 {
            return Err(Error::InvalidArgument("statistics update needs n' >= 1".to_string()));
        }
        let d = self.dim;
        if obs_mean.len() != d || obs_cov.len() != d * d {
            return Err(Error::Shape(format!(
                "observation shapes ({}, {}) do not match dim {d}",
                obs_mean.len(),
                obs_cov.len()
            )));
        }
        if obs_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation mean".to_string()));
        }
        // The all-zero covariance (a point mass) is the common case from
        // per-iteration observations; skip the eigen check for it.
        if obs_cov.iter().any(|&v| v != 0.0) {
            check_psd(obs_cov, d)?;
        }

        let n_old = self.counts[m] as f64;
        let np = n_prime as f64;
        let n_new = n_old + np;
        let mean_base = m * d;
        let cov_base = m * d * d;

        let delta: Vec<f64> = (0..d).map(|i| self.means[mean_base + i] - obs_mean[i]).collect();
        for i in 0..d {
            for j in 0..d {
                let idx = cov_base + i * d + j;
                self.covs[idx] = (n_old * self.covs[idx] + np * obs_cov[i * d + j]) / n_new
                    + n_old * np * delta[i] * delta[j] / (n_new * n_new);
            }
        }
        for (i, &om) in obs_mean.iter().enumerate() {
            let idx = mean_base + i;
            self.means[idx] = (n_old * self.means[idx] + np * om) / n_new;
        }
        self.counts[m] += n_prime;
        Ok(())
    }

    /// Record one training iteration: every latent category contributes its
    /// current embedding as a point mass weighted by the batch size, so the
    /// covariance accumulates cross-iteration drift of the embeddings.
    pub fn observe_iteration(&mut self, latents: &Tensor, batch_size: u64) -> Result<()> {
        if latents.shape() != [self.categories, self.dim] {
            return Err(Error::Shape(format!(
                "latents shape {:?} does not match stats ({}, {})",
                latents.shape(),
                self.categories,
                self.dim
            )));
        }
        let zero_cov = vec![0.0; self.dim * self.dim];
        for m in 0..self.categories {
            self.update(m, latents.row(m), &zero_cov, batch_size)?;
        }
        Ok(())
    }

    /// Pack into tensors for checkpointing: counts `[M]`, means `[M, D]`,
    /// covariances `[M, D, D]`.
    pub fn to_tensors(&self) -> (Tensor, Tensor, Tensor) {
        let n = Tensor::new(vec![self.categories], self.counts.iter().map(|&c| c as f64).collect())
            .expect("counts shape is valid");
        let mu = Tensor::new(vec![self.categories, self.dim], self.means.clone())
            .expect("means shape is valid");
        let sigma = Tensor::new(vec![self.categories, self.dim, self.dim], self.covs.clone())
            .expect("covs shape is valid");
        (n, mu, sigma)
    }

    /// Rebuild from checkpoint tensors, re-validating symmetry/PSD of every
    /// stored covariance.
    pub fn from_tensors(n: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Self> {
        let shape = mu.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("means must be [M, D], got {shape:?}")));
        }
        let (categories, dim) = (shape[0], shape[1]);
        if n.shape() != [categories] {
            return Err(Error::Shape(format!(
                "counts shape {:?} does not match {categories} categories",
                n.shape()
            )));
        }
        if sigma.shape() != [categories, dim, dim] {
            return Err(Error::Shape(format!(
                "covariance shape {:?} does not match [{categories}, {dim}, {dim}]",
                sigma.shape()
            )));
        }
        let mut counts = Vec::with_capacity(categories);
        for &c in n.data() {
            if !(c.is_finite() && c >= 0.0 && c.fract() == 0.0) {
                return Err(Error::InvalidArgument(format!("invalid stored count {c}")));
            }
            counts.push(c as u64);
        }
        let dd = dim * dim;
        for m in 0..categories {
            let cov = &sigma.data()[m * dd..(m + 1) * dd];
            if cov.iter().any(|&v| v != 0.0) {
                check_psd(cov, dim)?;
            }
        }
        Ok(Self { categories, dim, counts, means: mu.data().to_vec(), covs: sigma.data().to_vec() })
    }
}

/// Linear ramp of the augmentation strength from 0 at the first iteration to
/// `lambda0` at the last.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugSchedule {
    pub lambda0: f64,
    pub total_iterations: usize,
}

impl AugSchedule {
    pub fn new(lambda0: f64, total_iterations: usize) -> Result<Self> {
        if !(lambda0.is_finite() && lambda0 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda0 must be finite and >= 0, got {lambda0}"
            )));
        }
        if total_iterations == 0 {
            return Err(Error::InvalidArgument("schedule needs >= 1 iteration".to_string()));
        }
        Ok(Self { lambda0, total_iterations })
    }

    /// `lambda = (t / T) * lambda0`, clamped to `lambda0` past the end. The
    /// returned flag reports whether clamping occurred.
    pub fn lambda_at_checked(&self, t: usize) -> (f64, bool) {
        if t > self.total_iterations {
            (self.lambda0, true)
        } else {
            (self.lambda0 * t as f64 / self.total_iterations as f64, false)
        }
    }

    pub fn lambda_at(&self, t: usize) -> f64 {
        self.lambda_at_checked(t).0
    }
}

/// One term of the augmented cross-entropy bound: for a feature column
/// `[D, 1]` scored by a K-way linear head under a Gaussian perturbation with
/// covariance `lambda * sigma`, the expected cross-entropy against `target`
/// is bounded by
///
/// ```text
/// z_j  = (w_j - w_t)^T f + (b_j - b_t)
///        + (lambda/2) (w_j - w_t)^T Sigma (w_j - w_t)
/// loss = log sum_j exp(z_j)        (z_t = 0)
/// ```
///
/// Returns a `[1]`-shaped node. `sigma` enters as a constant; gradients flow
/// to the feature, weight, and bias.
pub fn isda_bound_ce(
    g: &mut Graph,
    feature: Var,
    weight: Var,
    bias: Var,
    sigma: &[f64],
    target: usize,
    lambda: f64,
) -> Result<Var> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let dim = g.shape(weight)[1];
    if sigma.len() != dim * dim {
        return Err(Error::Shape(format!(
            "covariance has {} entries, expected {dim}x{dim}",
            sigma.len()
        )));
    }
    let u = g.matmul(weight, feature)?; // [K, 1]
    let u = g.add_col_bias(u, bias)?;
    let z_lin = g.sub_row(u, target)?; // z_lin[target] = 0

    let logits = if lambda > 0.0 && sigma.iter().any(|&v| v != 0.0) {
        let wd = g.sub_row(weight, target)?; // [K, D]
        let sigma = g.constant(vec![dim, dim], sigma.to_vec())?;
        let ws = g.matmul(wd, sigma)?; // [K, D]
        let quad_terms = g.mul(ws, wd)?;
        let quad = g.row_sums(quad_terms)?; // [K, 1], quad[target] = 0
        let scaled = g.scale(quad, lambda / 2.0);
        g.add(z_lin, scaled)?
    } else {
        z_lin
    };

    let row = g.transpose(logits)?; // [1, K]
    g.cross_entropy_rows(row, vec![target])
}

/// Closed-form augmented classification loss over the latent pool. Each
/// latent category m is its own pseudo-class with feature `f'_m`, pseudo-label
/// m, and perturbation covariance `lambda * Sigma_m`; the per-category bounds
/// are averaged over the M categories. Differentiable with respect to the
/// embeddings and the latent head; the stored covariances are constants.
pub fn latent_aug_loss(
    g: &mut Graph,
    pool: &PoolVars,
    stats: &RunningStats,
    lambda: f64,
) -> Result<Var> {
    let m_total = g.shape(pool.latents)[0];
    if stats.categories() != m_total || stats.dim() != g.shape(pool.latents)[1] {
        return Err(Error::Shape(format!(
            "stats ({}, {}) do not match latents {:?}",
            stats.categories(),
            stats.dim(),
            g.shape(pool.latents)
        )));
    }
    let mut total: Option<Var> = None;
    for m in 0..m_total {
        let f_m = g.row(pool.latents, m)?; // [D, 1]
        let ce = isda_bound_ce(g, f_m, pool.head_weight, pool.head_bias, stats.cov(m), m, lambda)?;
        total = Some(match total {
            Some(acc) => g.add(acc, ce)?,
            None => ce,
        });
    }
    let sum = g.sum_all(total.expect("M >= 1"));
    Ok(g.scale(sum, 1.0 / m_total as f64))
}

/// Draw one explicitly augmented embedding for category `m`:
/// `N(f'_m, lambda * Sigma_m)`.
pub fn sample_augmented(
    pool: &LatentPool,
    stats: &RunningStats,
    m: usize,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if m >= stats.categories() {
        return Err(Error::InvalidArgument(format!("category {m} out of {}", stats.categories())));
    }
    sample_gaussian(pool.latents.row(m), stats.cov(m), lambda, rng)
}

/// Monte-Carlo estimate of the expected augmented cross-entropy that
/// [`latent_aug_loss`] upper-bounds: average over `draws` rounds of sampling
/// every category once and scoring the latent head. Returns the estimate and
/// its standard error.
pub fn mc_aug_loss(
    pool: &LatentPool,
    stats: &RunningStats,
    lambda: f64,
    draws: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    if draws == 0 {
        return Err(Error::InvalidArgument("need >= 1 draw".to_string()));
    }
    let m_total = stats.categories();
    let d = stats.dim();
    let w = pool.head_weight.data();
    let b = pool.head_bias.data();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut logits = vec![0.0; m_total];
    for _ in 0..draws {
        let mut round = 0.0;
        for m in 0..m_total {
            let f_a = sample_augmented(pool, stats, m, lambda, rng)?;
            for (j, logit) in logits.iter_mut().enumerate() {
                *logit = b[j]
                    + w[j * d..(j + 1) * d].iter().zip(&f_a).map(|(wj, fj)| wj * fj).sum::<f64>();
            }
            round += ops::cross_entropy_logits(&logits, m)?;
        }
        round /= m_total as f64;
        sum += round;
        sum_sq += round * round;
    }
    let mean = sum / draws as f64;
    let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
    let se = (var / draws as f64).sqrt();
    Ok((mean, se))
}
