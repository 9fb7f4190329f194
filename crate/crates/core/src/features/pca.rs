use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, CowArray, Ix2};
use serde::{Deserialize, Serialize};

use super::{FeatureKind, FeatureMatrix, Transform};
use crate::error::{Error, Result};

const PCA_FORMAT_VERSION: u32 = 1;

/// Principal axes of a training set, truncated to a variance fraction.
///
/// Eigenvalues are variances under the unbiased (1/(N-1)) covariance estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub version: u32,
    pub mean: Vec<f64>,
    /// `kept × dim`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Kept eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
    pub variance_fraction: f64,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kept(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn explained_fraction(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn components_array(&self) -> Array2<f64> {
        let dim = self.input_dim();
        Array2::from_shape_fn((self.kept(), dim), |(i, j)| self.components[i][j])
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::parse("pca model", e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: PcaModel = serde_json::from_str(text).map_err(|e| Error::parse("pca model", e.to_string()))?;
        if model.version != PCA_FORMAT_VERSION {
            return Err(Error::parse(
                "pca model",
                format!("unsupported version {}", model.version),
            ));
        }
        if model.components.iter().any(|r| r.len() != model.mean.len())
            || model.components.len() != model.eigenvalues.len()
        {
            return Err(Error::parse("pca model", "inconsistent shapes"));
        }
        Ok(model)
    }
}

/// Eigendecomposition of a covariance matrix, truncated at `variance_fraction`.
fn truncate_eigen(mean: Vec<f64>, cov: DMatrix<f64>, variance_fraction: f64) -> Result<PcaModel> {
    let dim = mean.len();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("training data has zero variance".into()));
    }
    let mut kept = dim;
    let mut cumulative = 0.0;
    for (k, v) in values.iter().enumerate() {
        cumulative += v;
        if cumulative / total >= variance_fraction - 1e-12 {
            kept = k + 1;
            break;
        }
    }
    let components = order[..kept]
        .iter()
        .map(|&i| {
            let col = eig.eigenvectors.column(i);
            // sign convention: largest-magnitude entry positive
            let pivot = col
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(1.0);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|v| sign * v).collect()
        })
        .collect();
    Ok(PcaModel {
        version: PCA_FORMAT_VERSION,
        mean,
        components,
        eigenvalues: values[..kept].to_vec(),
        total_variance: total,
        variance_fraction,
    })
}

fn check_fraction(variance_fraction: f64) -> Result<()> {
    if !(variance_fraction > 0.0 && variance_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "variance fraction must be in (0, 1], got {variance_fraction}"
        )));
    }
    Ok(())
}

/// Fits PCA on the rows of `train` and keeps the fewest leading components whose
/// cumulative eigenvalue share reaches `variance_fraction`.
pub fn fit_pca(train: &FeatureMatrix, variance_fraction: f64) -> Result<PcaModel> {
    fit_pca_streaming(variance_fraction, train.dim(), || {
        std::iter::once(Ok(train.values.view().into()))
    })
}

/// Two-pass PCA over a sequence of row blocks that is too large to hold at once.
/// `blocks` is called twice: once for the mean, once for the centred covariance.
pub fn fit_pca_streaming<'a, F, I>(variance_fraction: f64, dim: usize, blocks: F) -> Result<PcaModel>
where
    F: Fn() -> I,
    I: Iterator<Item = Result<CowArray<'a, f64, Ix2>>>,
{
    check_fraction(variance_fraction)?;
    let mut sum = Array1::<f64>::zeros(dim);
    let mut count = 0usize;
    for block in blocks() {
        let block = block?;
        if block.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: block.ncols(),
            });
        }
        for row in block.rows() {
            sum += &row;
        }
        count += block.nrows();
    }
    if count < 2 {
        return Err(Error::InvalidInput(format!("PCA needs at least 2 frames, got {count}")));
    }
    let mean = sum / count as f64;
    let mut scatter = Array2::<f64>::zeros((dim, dim));
    for block in blocks() {
        let centred = &block? - &mean;
        scatter += &centred.t().dot(&centred);
    }
    let denom = (count - 1) as f64;
    let cov = DMatrix::from_fn(dim, dim, |i, j| 0.5 * (scatter[[i, j]] + scatter[[j, i]]) / denom);
    truncate_eigen(mean.to_vec(), cov, variance_fraction)
}

/// Maps every row to `(x - mean) · componentsᵀ`.
pub fn apply_pca(model: &PcaModel, feat: &FeatureMatrix) -> Result<FeatureMatrix> {
    if feat.dim() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            got: feat.dim(),
        });
    }
    let mean = Array1::from(model.mean.clone());
    let centred = &feat.values - &mean;
    let projected = centred.dot(&model.components_array().t());
    Ok(feat.derived(
        projected,
        FeatureKind::PcaProjected,
        Transform::Pca { kept: model.kept() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fm(values: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix::new(values, FeatureKind::Stacked, 10.0)
    }

    fn diag_data() -> FeatureMatrix {
        // six axis points; unbiased covariance is exactly diag(4, 1, 0.01)
        let (a, b, c) = (10f64.sqrt(), 2.5f64.sqrt(), 0.025f64.sqrt());
        fm(array![
            [a, 0.0, 0.0],
            [-a, 0.0, 0.0],
            [0.0, b, 0.0],
            [0.0, -b, 0.0],
            [0.0, 0.0, c],
            [0.0, 0.0, -c],
        ])
    }

    fn orthonormality_error(m: &PcaModel) -> f64 {
        let q = m.components_array();
        let qqt = q.dot(&q.t());
        let mut worst: f64 = 0.0;
        for ((i, j), v) in qqt.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((v - target).abs());
        }
        worst
    }

    #[test]
    fn diagonal_covariance_keeps_two() {
        let m = fit_pca(&diag_data(), 0.95).unwrap();
        assert_eq!(m.kept(), 2);
        assert!((m.eigenvalues[0] - 4.0).abs() < 1e-12);
        assert!((m.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((m.explained_fraction() - 5.0 / 5.01).abs() < 1e-12);
        assert!(orthonormality_error(&m) < 1e-8);
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let mut rng = crate::seed::rng_from(5);
        let x = Array2::from_shape_fn((200, 6), |_| rng.random::<f64>());
        let m = fit_pca(&fm(x), 1.0).unwrap();
        assert_eq!(m.kept(), 6);
    }

    #[test]
    fn rank_two_data_reconstructs_exactly() {
        let mut rng = crate::seed::rng_from(9);
        let basis = Array2::from_shape_fn((2, 10), |_| StandardNormal.sample(&mut rng));
        let coeffs = Array2::from_shape_fn((100, 2), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            3.0 * v
        });
        let offset = Array1::from_shape_fn(10, |i| i as f64);
        let x = coeffs.dot(&basis) + &offset;
        let m = fit_pca(&fm(x.clone()), 0.999_999).unwrap();
        assert_eq!(m.kept(), 2);
        let z = apply_pca(&m, &fm(x.clone())).unwrap();
        let back = z.values.dot(&m.components_array()) + &Array1::from(m.mean.clone());
        let err = (&back - &x).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn projected_variance_equals_eigenvalue() {
        let mut rng = crate::seed::rng_from(21);
        let mix = Array2::from_shape_fn((5, 5), |_| rng.random_range(-1.0..1.0));
        let raw = Array2::from_shape_fn((400, 5), |_| StandardNormal.sample(&mut rng));
        let x = raw.dot(&mix);
        let m = fit_pca(&fm(x.clone()), 1.0).unwrap();
        let z = apply_pca(&m, &fm(x)).unwrap();
        let n = z.num_frames() as f64;
        for (i, col) in z.values.columns().into_iter().enumerate() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!(mean.abs() < 1e-10);
            assert!((var - m.eigenvalues[i]).abs() < 1e-8, "{var} vs {}", m.eigenvalues[i]);
        }
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(orthonormality_error(&m) < 1e-8);
    }

    #[test]
    fn mean_projects_to_zero_and_identity_is_shift() {
        let m = fit_pca(&diag_data(), 1.0).unwrap();
        let mean_row = fm(Array2::from_shape_vec((1, 3), m.mean.clone()).unwrap());
        let z = apply_pca(&m, &mean_row).unwrap();
        assert!(z.values.iter().all(|v| v.abs() < 1e-15));

        let identity = PcaModel {
            version: 1,
            mean: vec![1.0, 2.0],
            components: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            eigenvalues: vec![1.0, 1.0],
            total_variance: 2.0,
            variance_fraction: 1.0,
        };
        let z = apply_pca(&identity, &fm(array![[3.0, 5.0]])).unwrap();
        assert_eq!(z.values, array![[2.0, 3.0]]);
        assert_eq!(z.kind, FeatureKind::PcaProjected);
    }

    #[test]
    fn errors_and_serialization() {
        assert!(fit_pca(&fm(array![[1.0, 2.0]]), 0.95).is_err());
        assert!(fit_pca(&diag_data(), 0.0).is_err());
        assert!(fit_pca(&diag_data(), 1.5).is_err());
        let m = fit_pca(&diag_data(), 0.95).unwrap();
        assert!(matches!(
            apply_pca(&m, &fm(array![[1.0, 2.0]])),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
        let back = PcaModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn streaming_matches_single_block() {
        let mut rng = crate::seed::rng_from(2);
        let x = Array2::from_shape_fn((90, 4), |_| rng.random::<f64>());
        let whole = fit_pca(&fm(x.clone()), 0.9).unwrap();
        let parts = [x.slice(ndarray::s![..40, ..]), x.slice(ndarray::s![40.., ..])];
        let split = fit_pca_streaming(0.9, 4, || parts.iter().map(|p| Ok(p.view().into()))).unwrap();
        assert_eq!(whole.kept(), split.kept());
        for (a, b) in whole.eigenvalues.iter().zip(&split.eigenvalues) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
