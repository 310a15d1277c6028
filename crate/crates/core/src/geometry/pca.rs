use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::eigen::symmetric_eigenvalues;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureScore {
    pub step: u64,
    pub score: f64,
    pub per_layer: Vec<f64>,
}

/// Share of total variance in the top `k` principal components of the
/// `n × d` row-major sample matrix `x`. Data with no variance scores 1.
pub fn explained_variance_ratio(x: &[f64], n: usize, d: usize, k: usize) -> Result<f64> {
    if x.len() != n * d || d == 0 {
        return Err(Error::shape("explained_variance_ratio", format!("{} values for {n}x{d}", x.len())));
    }
    if n < k + 1 {
        return Err(Error::invalid(format!("{n} samples, need at least {}", k + 1)));
    }
    let mut mean = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= (n - 1) as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let eig: Vec<f64> = symmetric_eigenvalues(&cov, d)?.into_iter().map(|e| e.max(0.0)).collect();
    let total: f64 = eig.iter().sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok((eig.iter().take(k).sum::<f64>() / total).min(1.0))
}

/// Mean over layers of the top-`k` explained variance of up to `n_samples`
/// token states drawn without replacement; the same tokens are used for every
/// layer. `prompts[p][l]` is prompt `p`'s `[T, D]` state after layer `l`.
pub fn pca_structure_score(
    prompts: &[Vec<Tensor>],
    n_samples: usize,
    k: usize,
    seed: u64,
    step: u64,
) -> Result<StructureScore> {
    let first = prompts.first().ok_or_else(|| Error::invalid("no hidden states"))?;
    let n_layers = first.len();
    if n_layers == 0 {
        return Err(Error::invalid("hidden states have no layers"));
    }
    let d = first[0].dims2("pca_structure_score")?.1;
    let mut positions = Vec::new();
    for (p, layers) in prompts.iter().enumerate() {
        if layers.len() != n_layers {
            return Err(Error::shape("pca_structure_score", "prompts disagree on layer count"));
        }
        let (t, dd) = layers[0].dims2("pca_structure_score")?;
        if dd != d || layers.iter().any(|s| s.shape() != [t, d]) {
            return Err(Error::shape("pca_structure_score", "inconsistent [T, D] across layers"));
        }
        positions.extend((0..t).map(|i| (p, i)));
    }
    let take = n_samples.min(positions.len());
    if take < k + 1 {
        return Err(Error::invalid(format!("{take} token states, need at least {}", k + 1)));
    }
    let mut rng = rng::stream(seed, streams::PCA_SAMPLES);
    let mut chosen: Vec<usize> = index::sample(&mut rng, positions.len(), take).into_vec();
    chosen.sort_unstable();

    let mut x = Vec::with_capacity(take * d);
    let per_layer = (0..n_layers)
        .map(|l| {
            x.clear();
            for &c in &chosen {
                let (p, i) = positions[c];
                x.extend_from_slice(prompts[p][l].row(i));
            }
            explained_variance_ratio(&x, take, d, k)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(StructureScore { step, score: per_layer.iter().sum::<f64>() / n_layers as f64, per_layer })
}
