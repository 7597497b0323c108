//! Gaze-distance metrics and the closed-form baselines.

use crate::data::{TrialSet, PX_PER_MM};
use crate::error::{Error, Result};
use crate::kernels::{dot, matmul_nt, matmul_tn};
use crate::tensor::{Real, Tensor};

use rayon::prelude::*;

/// Distances between predicted and true gaze points, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// √(mean ‖pred − target‖²), the canonical metric.
    pub rmse_px: f64,
    /// mean ‖pred − target‖, reported alongside.
    pub mean_dist_px: f64,
    pub n: usize,
}

impl Metrics {
    pub fn rmse_mm(&self) -> f64 {
        self.rmse_px / PX_PER_MM
    }

    pub fn mean_dist_mm(&self) -> f64 {
        self.mean_dist_px / PX_PER_MM
    }
}

/// Both distance metrics for `pred, target: [N, 2]`.
pub fn evaluate<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Metrics> {
    if pred.shape() != target.shape() || pred.rank() != 2 || pred.shape()[1] != 2 {
        return Err(Error::shape("metrics (N, 2)", target.shape(), pred.shape()));
    }
    let n = pred.shape()[0];
    let (mut sq, mut dist) = (0.0, 0.0);
    for (p, t) in pred.data().chunks_exact(2).zip(target.data().chunks_exact(2)) {
        let dx = p[0].as_f64() - t[0].as_f64();
        let dy = p[1].as_f64() - t[1].as_f64();
        let d2 = dx * dx + dy * dy;
        sq += d2;
        dist += d2.sqrt();
    }
    Ok(Metrics {
        rmse_px: (sq / n as f64).sqrt(),
        mean_dist_px: dist / n as f64,
        n,
    })
}

pub fn rmse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(evaluate(pred, target)?.rmse_px)
}

pub fn label_mean(set: &TrialSet) -> [f64; 2] {
    let n = set.len() as f64;
    let mut m = [0.0; 2];
    for xy in set.labels.data().chunks_exact(2) {
        m[0] += f64::from(xy[0]);
        m[1] += f64::from(xy[1]);
    }
    [m[0] / n, m[1] / n]
}

fn constant_predictions(point: [f64; 2], n: usize) -> Tensor<f32> {
    let data = (0..n).flat_map(|_| [point[0] as f32, point[1] as f32]).collect();
    Tensor::new(&[n, 2], data).expect("n ≥ 1")
}

/// Predict the training-label mean for every evaluation trial.
pub fn naive_baseline(train: &TrialSet, eval: &TrialSet) -> Result<Metrics> {
    let pred = constant_predictions(label_mean(train), eval.len());
    evaluate(&pred, &eval.labels)
}

/// Temporal subsampling stride of the linear-baseline features.
pub const FEATURE_STRIDE: usize = 8;

/// Row-major `[N, channels · ⌈samples / stride⌉]` features: every
/// `stride`-th sample of every channel.
pub fn downsample_features(set: &TrialSet, stride: usize) -> (Vec<f64>, usize) {
    let (c, s) = (set.channels(), set.samples());
    let kept = s.div_ceil(stride);
    let d = c * kept;
    let mut out = Vec::with_capacity(set.len() * d);
    for i in 0..set.len() {
        let trial = set.trial(i);
        for ch in 0..c {
            out.extend(trial[ch * s..(ch + 1) * s].iter().step_by(stride).map(|&v| f64::from(v)));
        }
    }
    (out, d)
}

/// In-place Cholesky factorization `a = L·Lᵀ` of an SPD `n × n` matrix;
/// `L` overwrites the lower triangle. A pivot at or below `1e-12 ·` the
/// largest diagonal entry counts as singular.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    let floor = 1e-12 * (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
    for j in 0..n {
        let (done, rest) = a.split_at_mut((j + 1) * n);
        let row_j = &mut done[j * n..];
        let d = row_j[j] - dot(&row_j[..j], &row_j[..j]);
        // Negated so that a NaN pivot also counts as singular.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(d > floor) {
            return Err(Error::Singular);
        }
        let d = d.sqrt();
        row_j[j] = d;
        let lj = &row_j[..j];
        let update = |row_i: &mut [f64]| {
            row_i[j] = (row_i[j] - dot(&row_i[..j], lj)) / d;
        };
        if (n - j) * j > 1 << 15 {
            rest.par_chunks_mut(n).for_each(update);
        } else {
            rest.chunks_mut(n).for_each(update);
        }
    }
    Ok(())
}

/// Solve `L·Lᵀ·x = b` in place for `cols` right-hand sides stored row-major
/// in `b: [n, cols]`.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], cols: usize) {
    for c in 0..cols {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * b[k * cols + c]).sum();
            b[i * cols + c] = (b[i * cols + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k * cols + c]).sum();
            b[i * cols + c] = (b[i * cols + c] - s) / l[i * n + i];
        }
    }
}

/// Least-squares (λ = 0) or ridge (λ > 0) regression from downsampled EEG
/// features to gaze coordinates, fitted in closed form on centred data.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub stride: usize,
    feature_mean: Vec<f64>,
    label_mean: [f64; 2],
    /// `[d, 2]`
    weights: Vec<f64>,
}

impl LinearModel {
    /// Solves the normal equations in primal form `(XᵀX + λI)·W = XᵀY` when
    /// features do not outnumber trials, otherwise in dual form
    /// `W = Xᵀ·(XXᵀ + λI)⁻¹·Y`. Both give the same ridge solution.
    pub fn fit(train: &TrialSet, lambda: f64, stride: usize) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config("ridge", format!("lambda {lambda} must be ≥ 0")));
        }
        if stride == 0 {
            return Err(Error::config("ridge", "stride must be positive"));
        }
        let (mut x, d) = downsample_features(train, stride);
        let n = train.len();
        let mut feature_mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in feature_mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in x.chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(&feature_mean) {
                *v -= m;
            }
        }
        let label_mean = label_mean(train);
        let y: Vec<f64> = train
            .labels
            .data()
            .chunks_exact(2)
            .flat_map(|l| [f64::from(l[0]) - label_mean[0], f64::from(l[1]) - label_mean[1]])
            .collect();

        let weights = if d <= n {
            let mut gram = vec![0.0; d * d];
            matmul_tn(&x, &x, &mut gram, 1, (d, n, d));
            for i in 0..d {
                gram[i * d + i] += lambda;
            }
            let mut rhs = vec![0.0; d * 2];
            matmul_tn(&x, &y, &mut rhs, 1, (d, n, 2));
            cholesky(&mut gram, d)?;
            cholesky_solve(&gram, d, &mut rhs, 2);
            rhs
        } else {
            let mut gram = vec![0.0; n * n];
            matmul_nt(&x, &x, &mut gram, 1, 1, (n, d, n));
            for i in 0..n {
                gram[i * n + i] += lambda;
            }
            let mut alpha = y;
            cholesky(&mut gram, n)?;
            cholesky_solve(&gram, n, &mut alpha, 2);
            let mut w = vec![0.0; d * 2];
            matmul_tn(&x, &alpha, &mut w, 1, (d, n, 2));
            w
        };
        Ok(LinearModel {
            stride,
            feature_mean,
            label_mean,
            weights,
        })
    }

    pub fn predict(&self, set: &TrialSet) -> Result<Tensor<f32>> {
        let (x, d) = downsample_features(set, self.stride);
        if d != self.feature_mean.len() {
            return Err(Error::shape("ridge features", &[self.feature_mean.len()], &[d]));
        }
        let mut out = Vec::with_capacity(set.len() * 2);
        for row in x.chunks_exact(d) {
            let mut p = self.label_mean;
            for ((v, m), w) in row.iter().zip(&self.feature_mean).zip(self.weights.chunks_exact(2)) {
                p[0] += (v - m) * w[0];
                p[1] += (v - m) * w[1];
            }
            out.extend([p[0] as f32, p[1] as f32]);
        }
        Tensor::new(&[set.len(), 2], out)
    }
}

/// Fit on `train` (λ = 0 for plain least squares) and score on `eval`.
pub fn linear_baseline(train: &TrialSet, eval: &TrialSet, ridge_lambda: f64) -> Result<Metrics> {
    let model = LinearModel::fit(train, ridge_lambda, FEATURE_STRIDE)?;
    evaluate(&model.predict(eval)?, &eval.labels)
}
