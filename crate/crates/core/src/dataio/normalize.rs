use super::{DataError, FeatureSet};
use crate::diffmath::Matrix;

/// Per-dimension z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(x: &Matrix) -> Result<Self, DataError> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(DataError::TooFewSamples { needed: 2, got: n });
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes `x`; dimensions with zero training variance map to 0.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix, DataError> {
        if x.cols() != self.dim() {
            return Err(DataError::InvalidHeader(format!(
                "feature width {} does not match normalization width {}",
                x.cols(),
                self.dim()
            )));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(x.rows() * d);
        for r in 0..x.rows() {
            for (j, &v) in x.row(r).iter().enumerate() {
                let s = self.std[j];
                data.push(if s > 0.0 { (v - self.mean[j]) / s } else { 0.0 });
            }
        }
        Ok(Matrix::new(x.rows(), d, data)?)
    }

    pub fn apply_set(&self, fs: &FeatureSet) -> Result<FeatureSet, DataError> {
        fs.with_features(self.apply(&fs.features)?)
    }
}

/// Fits statistics on `fs` and returns the standardized set with them.
pub fn normalize(fs: &FeatureSet) -> Result<(FeatureSet, NormStats), DataError> {
    let stats = NormStats::fit(&fs.features)?;
    Ok((stats.apply_set(fs)?, stats))
}
