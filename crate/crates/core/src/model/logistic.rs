//! Binary logistic regression on kinematic features at yellow onset.

use serde::{Deserialize, Serialize};

use super::tape::{bce_mean, sigmoid};
use crate::dataset::{Sample, Scale};
use crate::error::{Error, Result};
use crate::kinematics::{time_to_clear, time_to_stop, KinematicLimits};

pub const LOGISTIC_FEATURES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            // Enough steps to reach the regularized optimum on standardized
            // features; fewer leave separable data visibly under-fit.
            iterations: 20_000,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: [f64; LOGISTIC_FEATURES],
    pub bias: f64,
    /// Standardization applied to raw features before the linear map.
    pub scales: [Scale; LOGISTIC_FEATURES],
}

/// `(v0, x, t_a, t_b, yellow_elapsed)` from the first window row of an
/// unnormalized sample.
pub fn logistic_features(sample: &Sample, limits: &KinematicLimits) -> Result<[f64; LOGISTIC_FEATURES]> {
    let [v0, x, elapsed] = *sample
        .common_seq
        .first()
        .ok_or_else(|| Error::Shape("sample has an empty window".into()))?;
    let t_a = time_to_clear(x.max(0.0), v0, limits)?;
    let t_b = time_to_stop(v0, limits)?;
    Ok([v0, x, t_a, t_b, elapsed])
}

impl LogisticModel {
    pub fn zeros() -> Self {
        Self {
            weights: [0.0; LOGISTIC_FEATURES],
            bias: 0.0,
            scales: [Scale { mean: 0.0, sd: 1.0 }; LOGISTIC_FEATURES],
        }
    }

    fn standardize(&self, f: &[f64; LOGISTIC_FEATURES]) -> [f64; LOGISTIC_FEATURES] {
        std::array::from_fn(|j| self.scales[j].apply(f[j]))
    }

    fn logit_std(&self, z: &[f64; LOGISTIC_FEATURES]) -> f64 {
        self.weights.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + self.bias
    }

    /// P(Go) for a raw feature vector.
    pub fn predict(&self, features: &[f64; LOGISTIC_FEATURES]) -> f64 {
        sigmoid(self.logit_std(&self.standardize(features)))
    }

    /// Regularized mean cross-entropy over standardized features.
    pub fn objective(&self, z: &[[f64; LOGISTIC_FEATURES]], y: &[f64], l2: f64) -> f64 {
        let probs: Vec<f64> = z.iter().map(|r| sigmoid(self.logit_std(r))).collect();
        let reg: f64 = self.weights.iter().map(|w| w * w).sum();
        bce_mean(&probs, y) + 0.5 * l2 * reg
    }

    /// Closed-form gradient of [`Self::objective`]: `(∂w, ∂c)`.
    pub fn gradient(
        &self,
        z: &[[f64; LOGISTIC_FEATURES]],
        y: &[f64],
        l2: f64,
    ) -> ([f64; LOGISTIC_FEATURES], f64) {
        let n = z.len() as f64;
        let mut gw = [0.0; LOGISTIC_FEATURES];
        let mut gc = 0.0;
        for (r, &label) in z.iter().zip(y) {
            let err = sigmoid(self.logit_std(r)) - label;
            for (g, x) in gw.iter_mut().zip(r) {
                *g += err * x / n;
            }
            gc += err / n;
        }
        for (g, w) in gw.iter_mut().zip(&self.weights) {
            *g += l2 * w;
        }
        (gw, gc)
    }
}

/// Full-batch gradient descent on standardized features.
pub fn logistic_train(
    features: &[[f64; LOGISTIC_FEATURES]],
    labels: &[f64],
    cfg: &LogisticConfig,
) -> Result<LogisticModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Domain(format!(
            "logistic training needs matching non-empty inputs, got {} features and {} labels",
            features.len(),
            labels.len()
        )));
    }
    let mut model = LogisticModel::zeros();
    model.scales = std::array::from_fn(|j| {
        Scale::fit(features.iter().map(|f| f[j]))
    });
    let z: Vec<_> = features.iter().map(|f| model.standardize(f)).collect();
    for it in 0..cfg.iterations {
        let (gw, gc) = model.gradient(&z, labels, cfg.l2);
        for (w, g) in model.weights.iter_mut().zip(gw) {
            *w -= cfg.lr * g;
        }
        model.bias -= cfg.lr * gc;
        if !model.bias.is_finite() {
            return Err(Error::Diverged {
                epoch: it,
                loss: f64::NAN,
            });
        }
    }
    Ok(model)
}

pub fn logistic_predict(model: &LogisticModel, features: &[f64; LOGISTIC_FEATURES]) -> f64 {
    model.predict(features)
}

/// Features and labels for a set of raw samples.
pub fn logistic_inputs(
    samples: &[Sample],
    limits: &KinematicLimits,
) -> Result<(Vec<[f64; LOGISTIC_FEATURES]>, Vec<f64>)> {
    let feats = samples
        .iter()
        .map(|s| logistic_features(s, limits))
        .collect::<Result<Vec<_>>>()?;
    let labels = samples.iter().map(|s| f64::from(s.label)).collect();
    Ok((feats, labels))
}
