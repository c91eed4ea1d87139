use super::EncodingError;
use crate::par;
use nalgebra::{Cholesky, DMatrix};

/// Voxels solved per parallel task.
const VOXEL_BLOCK: usize = 64;

/// Ridge solution with an unpenalized intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// `(D + 1) x N_v`; row 0 is the intercept.
    pub weights: DMatrix<f64>,
    pub lambda: f64,
}

impl RidgeFit {
    pub fn intercept(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.weights.rows(0, 1)
    }

    pub fn slopes(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.weights.rows(1, self.weights.nrows() - 1)
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, EncodingError> {
        if x.ncols() + 1 != self.weights.nrows() {
            return Err(EncodingError::Configuration(format!(
                "design has {} columns, ridge fit expects {}",
                x.ncols(),
                self.weights.nrows() - 1
            )));
        }
        let mut y = x * self.slopes();
        let b = self.intercept();
        for mut row in y.row_iter_mut() {
            row += &b;
        }
        Ok(y)
    }
}

/// Solves `(Xc^T Xc + lambda I) W = Xc^T Yc` for every voxel column, where
/// `Xc`, `Yc` are column-centered; the intercept restores the means.
pub fn ridge_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeFit, EncodingError> {
    let (t, d) = x.shape();
    if y.nrows() != t {
        return Err(EncodingError::Alignment(format!(
            "design has {t} rows, targets have {}",
            y.nrows()
        )));
    }
    if t <= d {
        return Err(EncodingError::Configuration(format!(
            "ridge needs more rows than features, got T = {t}, D = {d}"
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(EncodingError::Configuration(format!(
            "ridge penalty must be non-negative, got {lambda}"
        )));
    }
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }

    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let chol = Cholesky::new(gram.clone()).ok_or(EncodingError::Singular { lambda })?;
    // A factorization can succeed on a numerically singular system; reject it
    // when the pivots span more than the representable range.
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if d > 0 && (lo <= 0.0 || (lo / hi).powi(2) < 1e-14) {
        return Err(EncodingError::Singular { lambda });
    }

    let n_v = y.ncols();
    let blocks = par::map_range(n_v.div_ceil(VOXEL_BLOCK), |b| {
        let start = b * VOXEL_BLOCK;
        let cols = VOXEL_BLOCK.min(n_v - start);
        let mut yc = y.columns(start, cols).into_owned();
        for mut row in yc.row_iter_mut() {
            row -= y_mean.columns(start, cols);
        }
        chol.solve(&(xc.transpose() * yc))
    });
    let mut weights = DMatrix::zeros(d + 1, n_v);
    for (b, w) in blocks.into_iter().enumerate() {
        let start = b * VOXEL_BLOCK;
        weights.view_mut((1, start), (d, w.ncols())).copy_from(&w);
    }
    let intercept = &y_mean - &x_mean * weights.rows(1, d);
    weights.set_row(0, &intercept);
    Ok(RidgeFit { weights, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(seed: u64, t: usize, d: usize) -> DMatrix<f64> {
        let mut rng = seeding::rng(seed);
        DMatrix::from_fn(t, d, |_, _| StandardNormal.sample(&mut rng))
    }

    /// Gauss-Jordan inverse with partial pivoting on row-major vectors.
    fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            m[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let src = m[c].clone();
                    m[r].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    /// Closed form on centered data, written out element by element.
    fn oracle(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let (t, d) = x.shape();
        let nv = y.ncols();
        let xm: Vec<f64> = (0..d).map(|j| (0..t).map(|i| x[(i, j)]).sum::<f64>() / t as f64).collect();
        let ym: Vec<f64> = (0..nv).map(|j| (0..t).map(|i| y[(i, j)]).sum::<f64>() / t as f64).collect();
        let mut a = vec![vec![0.0; d]; d];
        for p in 0..d {
            for q in 0..d {
                a[p][q] = (0..t).map(|i| (x[(i, p)] - xm[p]) * (x[(i, q)] - xm[q])).sum::<f64>();
            }
            a[p][p] += lambda;
        }
        let inv = invert(&a);
        let mut xty = vec![vec![0.0; nv]; d];
        for p in 0..d {
            for v in 0..nv {
                xty[p][v] = (0..t).map(|i| (x[(i, p)] - xm[p]) * (y[(i, v)] - ym[v])).sum::<f64>();
            }
        }
        let w: Vec<Vec<f64>> = (0..d)
            .map(|p| (0..nv).map(|v| (0..d).map(|q| inv[p][q] * xty[q][v]).sum()).collect())
            .collect();
        let b = (0..nv).map(|v| ym[v] - (0..d).map(|p| xm[p] * w[p][v]).sum::<f64>()).collect();
        (w, b)
    }

    #[test]
    fn matches_closed_form() {
        for (k, &lambda) in [0.0, 0.7, 100.0].iter().enumerate() {
            let x = gaussian(k as u64, 50, 5);
            let y = gaussian(100 + k as u64, 50, 3);
            let fit = ridge_fit(&x, &y, lambda).unwrap();
            let (w, b) = oracle(&x, &y, lambda);
            let mut num = 0.0;
            let mut den = 0.0;
            for v in 0..3 {
                for p in 0..5 {
                    num += (fit.weights[(p + 1, v)] - w[p][v]).powi(2);
                    den += w[p][v].powi(2);
                }
                num += (fit.weights[(0, v)] - b[v]).powi(2);
                den += b[v].powi(2);
            }
            assert!((num / den).sqrt() < 1e-8);
        }
    }

    #[test]
    fn ols_residual_orthogonal() {
        let x = gaussian(1, 40, 4);
        let y = gaussian(2, 40, 2);
        let fit = ridge_fit(&x, &y, 0.0).unwrap();
        let resid = &y - fit.predict(&x).unwrap();
        let proj = x.transpose() * &resid;
        assert!(proj.iter().all(|v| v.abs() < 1e-8));
        assert!(resid.row_sum().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn huge_penalty_shrinks_to_means() {
        let x = gaussian(3, 30, 3);
        let y = gaussian(4, 30, 2) + DMatrix::from_element(30, 2, 5.0);
        let fit = ridge_fit(&x, &y, 1e12).unwrap();
        assert!(fit.slopes().iter().all(|v| v.abs() < 1e-9));
        let pred = fit.predict(&x).unwrap();
        let means = y.row_mean();
        for row in pred.row_iter() {
            assert!((row - &means).abs().max() < 1e-8);
        }
    }

    #[test]
    fn singular_at_zero_penalty() {
        let mut x = gaussian(5, 20, 3);
        for i in 0..20 {
            x[(i, 2)] = 2.0 * x[(i, 0)] - x[(i, 1)];
        }
        let y = gaussian(6, 20, 1);
        let err = ridge_fit(&x, &y, 0.0).unwrap_err();
        assert_eq!(err, EncodingError::Singular { lambda: 0.0 });
        assert!(err.to_string().contains("lambda = 0"));
        assert!(ridge_fit(&x, &y, 0.1).is_ok());
    }

    #[test]
    fn column_shift_absorbed_by_intercept() {
        let x = gaussian(7, 25, 3);
        let y = gaussian(8, 25, 4);
        let mut shifted = x.clone();
        shifted.column_mut(1).add_scalar_mut(13.5);
        let a = ridge_fit(&x, &y, 0.3).unwrap().predict(&x).unwrap();
        let b = ridge_fit(&shifted, &y, 0.3).unwrap().predict(&shifted).unwrap();
        assert!((a - b).abs().max() < 1e-8);
    }

    #[test]
    fn many_voxels_span_blocks() {
        let x = gaussian(9, 30, 2);
        let y = gaussian(10, 30, 150);
        let all = ridge_fit(&x, &y, 0.5).unwrap();
        let one = ridge_fit(&x, &y.columns(140, 1).into_owned(), 0.5).unwrap();
        assert!((all.weights.column(140) - one.weights.column(0)).abs().max() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let x = gaussian(1, 5, 5);
        assert!(matches!(ridge_fit(&x, &gaussian(1, 5, 1), 1.0), Err(EncodingError::Configuration(_))));
        assert!(matches!(ridge_fit(&gaussian(1, 6, 2), &gaussian(1, 5, 1), 1.0), Err(EncodingError::Alignment(_))));
        assert!(ridge_fit(&gaussian(1, 6, 2), &gaussian(1, 6, 1), -1.0).is_err());
    }
}
