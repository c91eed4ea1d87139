use super::EncodingError;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Principal axes of a `T x D_e` design.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit {
    /// `D x D_e`, one orthonormal component per row.
    pub components: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Sample-covariance eigenvalues, descending.
    pub explained_variance: Vec<f64>,
}

impl PcaFit {
    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.components.ncols()
    }
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

pub fn pca_fit(x: &DMatrix<f64>, d: usize) -> Result<PcaFit, EncodingError> {
    let (t, d_e) = x.shape();
    if t < 2 {
        return Err(EncodingError::Configuration(format!(
            "PCA needs at least 2 rows, got {t}"
        )));
    }
    if d == 0 || d > d_e.min(t - 1) {
        return Err(EncodingError::Configuration(format!(
            "{d} components requested, at most min(T-1, D_e) = {} available",
            d_e.min(t - 1)
        )));
    }
    let mean = x.row_mean().transpose();
    let xc = centered(x, &mean);
    let cov = (xc.transpose() * &xc) / (t - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d_e).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = DMatrix::zeros(d, d_e);
    let mut explained_variance = Vec::with_capacity(d);
    for (k, &j) in order.iter().take(d).enumerate() {
        let mut v = eig.eigenvectors.column(j).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.neg_mut();
        }
        components.set_row(k, &v.transpose());
        // Rank-deficient inputs give tiny negative eigenvalues.
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }
    Ok(PcaFit {
        components,
        mean,
        explained_variance,
    })
}

/// `(X - mean) * components^T`.
pub fn pca_transform(x: &DMatrix<f64>, fit: &PcaFit) -> Result<DMatrix<f64>, EncodingError> {
    if x.ncols() != fit.n_features() {
        return Err(EncodingError::Configuration(format!(
            "input has {} features, PCA was fitted on {}",
            x.ncols(),
            fit.n_features()
        )));
    }
    Ok(centered(x, &fit.mean) * fit.components.transpose())
}

/// `Z * components + mean`.
pub fn pca_inverse_transform(z: &DMatrix<f64>, fit: &PcaFit) -> Result<DMatrix<f64>, EncodingError> {
    if z.ncols() != fit.n_components() {
        return Err(EncodingError::Configuration(format!(
            "input has {} columns, PCA has {} components",
            z.ncols(),
            fit.n_components()
        )));
    }
    let mut x = z * &fit.components;
    for mut row in x.row_iter_mut() {
        row += fit.mean.transpose();
    }
    Ok(x)
}
