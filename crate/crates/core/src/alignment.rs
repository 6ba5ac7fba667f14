//! Ridge regression from padded fMRI vectors to condition vectors.

use crate::error::{Error, Result};
use crate::nn::NamedTensor;
use crate::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

pub const DEFAULT_RIDGE: f64 = 1.0;

/// Relative eigenvalue floor below which an unregularized system is treated
/// as singular.
const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAligner {
    /// input_length × condition_dim.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub ridge_lambda: f64,
}

impl LinearAligner {
    pub fn input_length(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// A fixed random map standing in for a fitted aligner. Entries are
    /// N(0, 1/input_length) and the bias is zero.
    pub fn random_projection(input_length: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "random-projection", 0);
        let scale = 1.0 / (input_length.max(1) as f64).sqrt();
        let weights = DMatrix::from_fn(input_length, output_dim, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self {
            weights,
            bias: DVector::zeros(output_dim),
            ridge_lambda: 0.0,
        }
    }

    /// Row-wise predictions for an n × L matrix; shorter rows are accepted
    /// as already zero-padded only if their width equals the input length.
    pub fn predict(&self, fmri: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if fmri.ncols() != self.input_length() {
            return Err(Error::Shape(format!(
                "aligner expects {} columns, got {}",
                self.input_length(),
                fmri.ncols()
            )));
        }
        let mut out = fmri * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(out)
    }

    /// Maps one voxel vector to a condition vector, zero-padding short input.
    pub fn align(&self, voxels: &[f64]) -> Result<DVector<f64>> {
        if voxels.len() > self.input_length() {
            return Err(Error::Shape(format!(
                "fMRI vector of length {} exceeds the aligner input length {}",
                voxels.len(),
                self.input_length()
            )));
        }
        let mut out = self.bias.clone();
        for (i, &v) in voxels.iter().enumerate() {
            if v != 0.0 {
                out.axpy(v, &self.weights.row(i).transpose(), 1.0);
            }
        }
        Ok(out)
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        let (l, d) = self.weights.shape();
        let mut w = Vec::with_capacity(l * d);
        for r in 0..l {
            w.extend(self.weights.row(r).iter().copied());
        }
        vec![
            NamedTensor {
                name: format!("{prefix}.weights"),
                shape: vec![l, d],
                data: w,
            },
            NamedTensor {
                name: format!("{prefix}.bias"),
                shape: vec![d],
                data: self.bias.iter().copied().collect(),
            },
            NamedTensor {
                name: format!("{prefix}.ridge_lambda"),
                shape: vec![],
                data: vec![self.ridge_lambda],
            },
        ]
    }

    pub fn from_named(prefix: &str, tensors: &[NamedTensor]) -> Result<Self> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let w = find("weights")?;
        let b = find("bias")?;
        let r = find("ridge_lambda")?;
        if w.shape.len() != 2 || b.shape != [w.shape[1]] || w.data.len() != w.shape[0] * w.shape[1] || r.data.len() != 1 {
            return Err(Error::Checkpoint("aligner tensors have inconsistent shapes".into()));
        }
        Ok(Self {
            weights: DMatrix::from_row_slice(w.shape[0], w.shape[1], &w.data),
            bias: DVector::from_vec(b.data.clone()),
            ridge_lambda: r.data[0],
        })
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn centered(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= means.transpose();
    }
    out
}

/// Solves (a + λI) x = b for symmetric positive semi-definite `a`.
fn solve_regularized(mut a: DMatrix<f64>, b: DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    if ridge == 0.0 {
        let eig = a.clone().symmetric_eigen();
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        if max == 0.0 || min <= SINGULAR_TOL * max {
            return Err(Error::Singular(
                "normal equations are singular with ridge_lambda = 0; use ridge_lambda > 0".into(),
            ));
        }
    }
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let chol = a.cholesky().ok_or_else(|| {
        Error::Singular("normal equations are not positive definite; increase ridge_lambda".into())
    })?;
    Ok(chol.solve(&b))
}

/// Minimizes ‖X·W + b − Y‖² + λ‖W‖² with an unpenalized bias. Uses the primal
/// system when L ≤ n and the dual (kernel) system otherwise.
pub fn fit_alignment(fmri: &DMatrix<f64>, features: &DMatrix<f64>, ridge_lambda: f64) -> Result<LinearAligner> {
    let n = fmri.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("alignment needs at least one sample".into()));
    }
    if features.nrows() != n {
        return Err(Error::Shape(format!(
            "fMRI has {n} rows but features have {}",
            features.nrows()
        )));
    }
    if !(ridge_lambda.is_finite() && ridge_lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("ridge_lambda must be finite and ≥ 0, got {ridge_lambda}")));
    }
    if fmri.iter().chain(features.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("alignment inputs contain non-finite values".into()));
    }
    let x_mean = column_means(fmri);
    let y_mean = column_means(features);
    let xc = centered(fmri, &x_mean);
    let yc = centered(features, &y_mean);
    let weights = if fmri.ncols() <= n {
        solve_regularized(xc.transpose() * &xc, xc.transpose() * &yc, ridge_lambda)?
    } else {
        let dual = solve_regularized(&xc * xc.transpose(), yc, ridge_lambda)?;
        xc.transpose() * dual
    };
    let bias = &y_mean - weights.transpose() * x_mean;
    Ok(LinearAligner {
        weights,
        bias,
        ridge_lambda,
    })
}

/// Coefficient of determination pooled over every output column:
/// 1 − Σ residual² / Σ (target − column mean)².
pub fn r_squared(predictions: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<f64> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    let means = column_means(targets);
    let ss_tot = centered(targets, &means).norm_squared();
    if ss_tot == 0.0 {
        return Err(Error::InvalidInput("targets have zero variance".into()));
    }
    Ok(1.0 - (predictions - targets).norm_squared() / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, "m", 0);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_features_give_zero_map() {
        let x = random(10, 6, 1);
        let a = fit_alignment(&x, &DMatrix::zeros(10, 3), 1.0).unwrap();
        assert!(a.weights.iter().all(|&v| v == 0.0));
        assert!(a.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dual_and_primal_agree() {
        let x = random(12, 8, 2);
        let y = random(12, 3, 3);
        let primal = fit_alignment(&x, &y, 0.5).unwrap();
        let wide = fit_alignment(&x.columns(0, 8).into_owned(), &y, 0.5).unwrap();
        assert!((primal.weights - wide.weights).abs().max() < 1e-12);
        let xw = random(5, 9, 4);
        let yw = random(5, 2, 5);
        let dual = fit_alignment(&xw, &yw, 0.5).unwrap();
        let xc = centered(&xw, &column_means(&xw));
        let yc = centered(&yw, &column_means(&yw));
        let mut g = xc.transpose() * &xc;
        for i in 0..9 {
            g[(i, i)] += 0.5;
        }
        let direct = g.cholesky().unwrap().solve(&(xc.transpose() * yc));
        assert!((dual.weights - direct).abs().max() < 1e-10);
    }

    #[test]
    fn singular_without_ridge_is_an_error() {
        let x = random(4, 10, 6);
        let y = random(4, 2, 7);
        assert!(matches!(fit_alignment(&x, &y, 0.0), Err(Error::Singular(_))));
        assert!(fit_alignment(&x, &y, 0.1).is_ok());
        assert!(fit_alignment(&x, &random(3, 2, 1), 0.1).is_err());
    }

    #[test]
    fn align_pads_and_is_affine() {
        let a = fit_alignment(&random(20, 6, 8), &random(20, 3, 9), 1.0).unwrap();
        assert_eq!(a.align(&[0.0; 6]).unwrap(), a.bias);
        let short = a.align(&[0.5, -1.0]).unwrap();
        let padded = a.align(&[0.5, -1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(short, padded);
        assert!(a.align(&[0.0; 7]).is_err());
    }

    #[test]
    fn named_round_trip() {
        let a = fit_alignment(&random(20, 6, 8), &random(20, 3, 9), 1.0).unwrap();
        let b = LinearAligner::from_named("al", &a.to_named("al")).unwrap();
        assert_eq!(a, b);
        assert!(LinearAligner::from_named("other", &a.to_named("al")).is_err());
    }
}
