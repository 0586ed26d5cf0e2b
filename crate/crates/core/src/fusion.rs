//! Accept/reject fusion of an uncertainty score with a verification
//! confidence.
//!
//! Both raw features are min-max scaled on the training set and a linear
//! classifier is fitted by stochastic subgradient descent on the mean hinge
//! loss plus an L1 penalty on the weights. Label `true` (+1) is a correct
//! match.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training labels contain a single class")]
    SingleClassTraining,
    #[error("{features} feature rows for {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("non-finite feature in row {0}")]
    NonFiniteFeature(usize),
    #[error("model file: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Per-feature affine map fitted so training minima go to 0 and maxima to 1.
/// Values outside the training range are not clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub mins: [f64; 2],
    pub maxs: [f64; 2],
}

pub fn fit_scaler(train: &[[f64; 2]]) -> Result<MinMaxScaler, FusionError> {
    if train.is_empty() {
        return Err(FusionError::EmptyTrainingSet);
    }
    let mut mins = [f64::INFINITY; 2];
    let mut maxs = [f64::NEG_INFINITY; 2];
    for (row, x) in train.iter().enumerate() {
        for j in 0..2 {
            if !x[j].is_finite() {
                return Err(FusionError::NonFiniteFeature(row));
            }
            mins[j] = mins[j].min(x[j]);
            maxs[j] = maxs[j].max(x[j]);
        }
    }
    Ok(MinMaxScaler { mins, maxs })
}

impl MinMaxScaler {
    /// A feature that was constant in training maps to 0.
    pub fn transform(&self, x: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for j in 0..2 {
            let range = self.maxs[j] - self.mins[j];
            out[j] = if range > 0.0 {
                (x[j] - self.mins[j]) / range
            } else {
                0.0
            };
        }
        out
    }

    pub fn transform_all(&self, xs: &[[f64; 2]]) -> Vec<[f64; 2]> {
        xs.iter().map(|&x| self.transform(x)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Base step size; epoch `t` uses `learning_rate / sqrt(t + 1)`.
    pub learning_rate: f64,
    /// L1 penalty strength on the weights (the bias is not penalized).
    pub l1: f64,
    /// Passes over the shuffled training set.
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            l1: 1e-4,
            max_iters: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: [f64; 2],
    pub bias: f64,
    pub config: SvmConfig,
    /// Training objective of the returned parameters.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }
}

fn margin(w: [f64; 2], b: f64, x: [f64; 2]) -> f64 {
    w[0] * x[0] + w[1] * x[1] + b
}

/// Mean hinge loss plus `l1 * |w|_1`.
pub fn svm_objective(weights: [f64; 2], bias: f64, l1: f64, features: &[[f64; 2]], labels: &[bool]) -> f64 {
    let hinge: f64 = features
        .iter()
        .zip(labels)
        .map(|(&x, &y)| {
            let y = if y { 1.0 } else { -1.0 };
            (1.0 - y * margin(weights, bias, x)).max(0.0)
        })
        .sum();
    hinge / features.len() as f64 + l1 * (weights[0].abs() + weights[1].abs())
}

/// Fits the classifier. The shuffle order of every epoch is fixed by
/// `config.seed`, so training is reproducible bit for bit. The parameters at
/// the end of the epoch with the lowest objective are returned.
pub fn train_linear_svm(features: &[[f64; 2]], labels: &[bool], config: &SvmConfig) -> Result<SvmModel, FusionError> {
    if features.len() != labels.len() {
        return Err(FusionError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(FusionError::EmptyTrainingSet);
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(FusionError::SingleClassTraining);
    }
    if let Some(row) = features.iter().position(|x| !x[0].is_finite() || !x[1].is_finite()) {
        return Err(FusionError::NonFiniteFeature(row));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut w = [0.0f64; 2];
    let mut b = 0.0f64;
    let mut best = (w, b, svm_objective(w, b, config.l1, features, labels));

    for epoch in 0..config.max_iters {
        order.shuffle(&mut rng);
        let eta = config.learning_rate / ((epoch + 1) as f64).sqrt();
        for &i in &order {
            let x = features[i];
            let y = if labels[i] { 1.0 } else { -1.0 };
            let active = y * margin(w, b, x) < 1.0;
            for j in 0..2 {
                let mut g = config.l1 * w[j].signum() * (w[j] != 0.0) as u8 as f64;
                if active {
                    g -= y * x[j];
                }
                w[j] -= eta * g;
            }
            if active {
                b += eta * y;
            }
        }
        let obj = svm_objective(w, b, config.l1, features, labels);
        if obj < best.2 {
            best = (w, b, obj);
        }
    }

    Ok(SvmModel {
        weights: best.0,
        bias: best.1,
        config: *config,
        objective: best.2,
    })
}

/// Accepts only strictly on the correct-match side; the boundary rejects.
pub fn svm_decide(model: &SvmModel, x: [f64; 2]) -> Decision {
    if margin(model.weights, model.bias, x) > 0.0 {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

/// Fraction of decisions agreeing with the labels (accept ⇔ correct).
pub fn classification_accuracy(decisions: &[Decision], labels: &[bool]) -> Result<f64, FusionError> {
    if decisions.len() != labels.len() || decisions.is_empty() {
        return Err(FusionError::LengthMismatch {
            features: decisions.len(),
            labels: labels.len(),
        });
    }
    let hits = decisions
        .iter()
        .zip(labels)
        .filter(|(d, &l)| d.is_accept() == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Scaler and classifier together; operates on raw `(score, confidence)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub scaler: MinMaxScaler,
    pub svm: SvmModel,
}

impl FusionModel {
    pub fn fit(raw: &[[f64; 2]], labels: &[bool], config: &SvmConfig) -> Result<Self, FusionError> {
        let scaler = fit_scaler(raw)?;
        let svm = train_linear_svm(&scaler.transform_all(raw), labels, config)?;
        Ok(Self { scaler, svm })
    }

    pub fn decide(&self, raw: [f64; 2]) -> Decision {
        svm_decide(&self.svm, self.scaler.transform(raw))
    }

    pub fn decide_all(&self, raw: &[[f64; 2]]) -> Vec<Decision> {
        raw.iter().map(|&x| self.decide(x)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, FusionError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
