use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ComplexityFeatures, Stage};
use crate::error::{Error, Result};

const N_CLASSES: usize = 4;
const N_FEATURES: usize = 3;
const MAX_ITERS: usize = 10_000;
const TOLERANCE: f64 = 1e-8;
const STEP: f64 = 0.5;

/// Multinomial logistic regression over the three complexity features.
/// Features are standardized with the training mean and spread before the
/// linear map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityModel {
    /// Per class: three feature weights then the bias.
    pub weights: [[f64; N_FEATURES + 1]; N_CLASSES],
    pub mean: [f64; N_FEATURES],
    pub scale: [f64; N_FEATURES],
    pub iterations: usize,
}

impl ComplexityModel {
    fn standardize(&self, f: &ComplexityFeatures) -> [f64; N_FEATURES] {
        let x = f.to_array();
        std::array::from_fn(|j| (x[j] - self.mean[j]) / self.scale[j])
    }

    pub fn probabilities(&self, f: &ComplexityFeatures) -> [f64; N_CLASSES] {
        probs(&self.weights, &self.standardize(f))
    }

    pub fn predict(&self, f: &ComplexityFeatures) -> Stage {
        let p = self.probabilities(f);
        let mut best = 0;
        for c in 1..N_CLASSES {
            if p[c] > p[best] {
                best = c;
            }
        }
        Stage::ALL[best]
    }
}

fn probs(w: &[[f64; N_FEATURES + 1]; N_CLASSES], x: &[f64; N_FEATURES]) -> [f64; N_CLASSES] {
    let mut z: [f64; N_CLASSES] =
        std::array::from_fn(|c| w[c][N_FEATURES] + (0..N_FEATURES).map(|j| w[c][j] * x[j]).sum::<f64>());
    crate::tensor::kernels::softmax_in_place(&mut z);
    z
}

/// Full-batch gradient descent on the mean cross-entropy until the loss
/// changes by less than 1e-8 or 10 000 iterations have run.
pub fn train_complexity_classifier(labeled: &[(ComplexityFeatures, Stage)]) -> Result<ComplexityModel> {
    let mut present = [false; N_CLASSES];
    for (_, s) in labeled {
        present[s.index()] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("classifier needs at least two classes"));
    }

    // identical rows are merged into one weighted row, so the fit depends
    // only on the empirical distribution
    let mut counts: BTreeMap<([u64; N_FEATURES], usize), usize> = BTreeMap::new();
    for (f, s) in labeled {
        *counts.entry((f.to_array().map(f64::to_bits), s.index())).or_default() += 1;
    }
    let n = labeled.len();
    let rows: Vec<([f64; N_FEATURES], usize, f64)> =
        counts.into_iter().map(|((bits, y), c)| (bits.map(f64::from_bits), y, c as f64 / n as f64)).collect();

    let mut mean = [0.0; N_FEATURES];
    for (x, _, wt) in &rows {
        for j in 0..N_FEATURES {
            mean[j] += wt * x[j];
        }
    }
    let mut scale = [0.0; N_FEATURES];
    for (x, _, wt) in &rows {
        for j in 0..N_FEATURES {
            scale[j] += wt * (x[j] - mean[j]).powi(2);
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let rows: Vec<([f64; N_FEATURES], usize, f64)> =
        rows.into_iter().map(|(x, y, wt)| (std::array::from_fn(|j| (x[j] - mean[j]) / scale[j]), y, wt)).collect();

    let mut w = [[0.0; N_FEATURES + 1]; N_CLASSES];
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..MAX_ITERS {
        iterations = it + 1;
        let mut grad = [[0.0; N_FEATURES + 1]; N_CLASSES];
        let mut loss = 0.0;
        for (x, y, wt) in &rows {
            let p = probs(&w, x);
            let y = *y;
            loss -= wt * p[y].max(f64::MIN_POSITIVE).ln();
            for c in 0..N_CLASSES {
                let r = wt * (p[c] - if c == y { 1.0 } else { 0.0 });
                for j in 0..N_FEATURES {
                    grad[c][j] += r * x[j];
                }
                grad[c][N_FEATURES] += r;
            }
        }
        for c in 0..N_CLASSES {
            for j in 0..=N_FEATURES {
                w[c][j] -= STEP * grad[c][j];
            }
        }
        if (prev - loss).abs() < TOLERANCE {
            break;
        }
        prev = loss;
    }
    Ok(ComplexityModel { weights: w, mean, scale, iterations })
}
