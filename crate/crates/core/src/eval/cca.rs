//! Canonical correlation analysis by whitening and SVD of the whitened
//! cross-covariance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Added to the diagonal of each within-view covariance before whitening.
pub const CCA_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CcaModel {
    loadings_x: DMatrix<f64>,
    loadings_y: DMatrix<f64>,
    correlations: Vec<f64>,
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
}

impl CcaModel {
    /// `dX x k`.
    pub fn loadings_x(&self) -> &DMatrix<f64> {
        &self.loadings_x
    }

    /// `dY x k`.
    pub fn loadings_y(&self) -> &DMatrix<f64> {
        &self.loadings_y
    }

    /// Correlation of each canonical variate pair on the training data,
    /// descending.
    pub fn correlations(&self) -> &[f64] {
        &self.correlations
    }

    pub fn mean_x(&self) -> &DVector<f64> {
        &self.mean_x
    }

    pub fn mean_y(&self) -> &DVector<f64> {
        &self.mean_y
    }

    pub fn k(&self) -> usize {
        self.correlations.len()
    }

    /// Centered `x` times the X loadings.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        project_view(x, &self.mean_x, &self.loadings_x)
    }

    pub fn transform_y(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        project_view(y, &self.mean_y, &self.loadings_y)
    }
}

fn project_view(x: &DMatrix<f64>, mean: &DVector<f64>, loadings: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != mean.len() {
        return Err(Error::LengthMismatch {
            expected: mean.len(),
            actual: x.ncols(),
        });
    }
    Ok(center(x, mean) * loadings)
}

fn center(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    x.row_mean().transpose()
}

/// `C^{-1/2}` for a symmetric positive definite covariance.
fn inverse_sqrt(cov: DMatrix<f64>, view: &str) -> Result<DMatrix<f64>> {
    let eig = cov.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max.max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular(format!(
            "{view} covariance is rank deficient beyond the ridge (eigenvalues {min:e}..{max:e})"
        )));
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

/// Fits `k` canonical pairs between the rows of `x` (`N x dX`) and `y`
/// (`N x dY`).
///
/// Loadings come from the ridge-whitened cross-covariance; the reported
/// correlations are the empirical correlations of the resulting training
/// variates, so the ridge only perturbs directions, not the scores.
pub fn cca_fit(x: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Result<CcaModel> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: y.nrows(),
        });
    }
    let (dx, dy) = (x.ncols(), y.ncols());
    if dx == 0 || dy == 0 {
        return Err(Error::InvalidInput("CCA views need at least one column".into()));
    }
    if n <= dx.max(dy) {
        return Err(Error::InvalidInput(format!(
            "CCA needs more samples ({n}) than view dimensions ({dx}, {dy})"
        )));
    }
    if k == 0 || k > dx.min(dy) {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be in 1..={}",
            dx.min(dy)
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CCA input"));
    }

    let mean_x = column_means(x);
    let mean_y = column_means(y);
    let xc = center(x, &mean_x);
    let yc = center(y, &mean_y);
    let nf = n as f64;
    let mut cxx = xc.tr_mul(&xc) / nf;
    let mut cyy = yc.tr_mul(&yc) / nf;
    let cxy = xc.tr_mul(&yc) / nf;
    for i in 0..dx {
        cxx[(i, i)] += CCA_RIDGE;
    }
    for i in 0..dy {
        cyy[(i, i)] += CCA_RIDGE;
    }
    let wx = inverse_sqrt(cxx, "X")?;
    let wy = inverse_sqrt(cyy, "Y")?;
    let t = &wx * cxy * &wy;
    let svd = t.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Singular("CCA SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Singular("CCA SVD failed".into()))?;

    // nalgebra does not guarantee singular value order
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let mut loadings_x = DMatrix::zeros(dx, k);
    let mut loadings_y = DMatrix::zeros(dy, k);
    let mut pairs = Vec::with_capacity(k);
    for (slot, &idx) in order.iter().take(k).enumerate() {
        let mut a = &wx * u.column(idx);
        let mut b = &wy * v_t.row(idx).transpose();
        // sign convention: largest-magnitude X loading positive
        if a[a.iamax()] < 0.0 {
            a.neg_mut();
            b.neg_mut();
        }
        let sx = &xc * &a;
        let sy = &yc * &b;
        let mut r = correlation(&sx, &sy);
        if r < 0.0 {
            b.neg_mut();
            r = -r;
        }
        loadings_x.set_column(slot, &a);
        loadings_y.set_column(slot, &b);
        pairs.push((r.clamp(0.0, 1.0), slot));
    }
    // recomputed correlations can swap order when nearly equal
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let correlations = pairs.iter().map(|p| p.0).collect();
    let loadings_x = DMatrix::from_columns(&pairs.iter().map(|p| loadings_x.column(p.1)).collect::<Vec<_>>());
    let loadings_y = DMatrix::from_columns(&pairs.iter().map(|p| loadings_y.column(p.1)).collect::<Vec<_>>());

    Ok(CcaModel {
        loadings_x,
        loadings_y,
        correlations,
        mean_x,
        mean_y,
    })
}

fn correlation(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn exact_linear_relation_is_fully_correlated() {
        let x = gaussian(200, 2, 1);
        let m = DMatrix::from_row_slice(2, 2, &[1.3, -0.4, 0.7, 2.1]);
        let y = &x * m;
        let model = cca_fit(&x, &y, 2).unwrap();
        for &r in model.correlations() {
            assert!(r >= 1.0 - 1e-6, "{r}");
        }
    }

    #[test]
    fn transform_of_mean_is_zero() {
        let x = gaussian(50, 3, 2);
        let y = gaussian(50, 2, 3);
        let model = cca_fit(&x, &y, 2).unwrap();
        let mean_row = model.mean_x().transpose();
        let z = model.transform(&DMatrix::from_row_slice(1, 3, mean_row.as_slice())).unwrap();
        assert!(z.amax() < 1e-12);
        assert!(model.transform(&gaussian(2, 4, 0)).is_err());
    }

    #[test]
    fn input_validation() {
        let x = gaussian(3, 3, 4);
        let y = gaussian(3, 2, 5);
        assert!(cca_fit(&x, &y, 2).is_err());
        let x = gaussian(30, 3, 4);
        let y = gaussian(30, 2, 5);
        assert!(cca_fit(&x, &y, 3).is_err());
        assert!(cca_fit(&x, &y, 0).is_err());
        assert!(cca_fit(&x, &gaussian(29, 2, 5), 1).is_err());
    }

    #[test]
    fn correlations_sorted_and_bounded() {
        let x = gaussian(300, 4, 6);
        let noise = gaussian(300, 2, 7);
        let y = x.columns(0, 2).into_owned() * 0.5 + noise;
        let model = cca_fit(&x, &y, 2).unwrap();
        let r = model.correlations();
        assert!(r[0] >= r[1]);
        assert!(r.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }
}
