//! Multivariate Gaussian sampling with PSD repair.
//!
//! Incrementally merged covariances can drift slightly indefinite, so the
//! sampler symmetrizes the matrix, eigendecomposes it, clamps eigenvalues in
//! [-PSD_TOLERANCE, 0) to zero, and rejects anything more indefinite than
//! that.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest allowed asymmetry |cov[i][j] - cov[j][i]|.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
/// Eigenvalues below -PSD_TOLERANCE are an error; in [-PSD_TOLERANCE, 0)
/// they are clamped to zero.
pub const PSD_TOLERANCE: f64 = 1e-8;

/// Draw from N(mean, scale * cov).
///
/// `cov` is a row-major d*d matrix. `scale = 0` or an all-zero covariance
/// returns the mean exactly (no stream draws are consumed).
pub fn sample_gaussian(mean: &[f64], cov: &[f64], scale: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let d = mean.len();
    if cov.len() != d * d {
        return Err(Error::Shape(format!(
            "covariance has {} entries, expected {}x{}",
            cov.len(),
            d,
            d
        )));
    }
    if scale < 0.0 {
        return Err(Error::InvalidArgument(format!("negative scale {scale}")));
    }
    if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gaussian parameters".to_string()));
    }
    check_symmetric(cov, d)?;

    if scale == 0.0 || cov.iter().all(|&v| v == 0.0) {
        return Ok(mean.to_vec());
    }

    let factor = psd_factor(cov, d)?;
    let z = DVector::from_vec(rng.normal_vec(d));
    let sample = DVector::from_column_slice(mean) + factor * z * scale.sqrt();
    Ok(sample.iter().copied().collect())
}

fn check_symmetric(cov: &[f64], d: usize) -> Result<()> {
    for i in 0..d {
        for j in (i + 1)..d {
            if (cov[i * d + j] - cov[j * d + i]).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::CovarianceNotPsd);
            }
        }
    }
    Ok(())
}

/// Symmetric factor A with A * A^T equal to the eigenvalue-clamped matrix.
fn psd_factor(cov: &[f64], d: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::from_row_slice(d, d, cov);
    // Symmetrize before decomposing; tolerated asymmetry is below 1e-9.
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if *v < -PSD_TOLERANCE {
            return Err(Error::CovarianceNotPsd);
        }
        *v = v.max(0.0);
    }
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(|v| v.sqrt()));
    Ok(&eig.eigenvectors * sqrt_diag)
}

/// Validate that a covariance is symmetric and PSD up to the clamp tolerance.
pub fn check_psd(cov: &[f64], d: usize) -> Result<()> {
    if cov.len() != d * d {
        return Err(Error::Shape(format!(
            "covariance has {} entries, expected {}x{}",
            cov.len(),
            d,
            d
        )));
    }
    check_symmetric(cov, d)?;
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(());
    }
    psd_factor(cov, d).map(|_| ())
}
