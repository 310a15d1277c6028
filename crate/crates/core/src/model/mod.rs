//! GPT-2-shaped decoder-only transformer with per-head gates and capture hooks.

mod forward;
mod generate;

pub use forward::{forward, gate_gradients, loss_and_grads, sequence_loss, AttentionMaps, CaptureBundle, LmExample};
pub use generate::{generate_greedy, KvDecoder};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: trains on a laptop CPU in minutes.
    fn default() -> Self {
        ModelConfig { n_layers: 4, n_heads: 4, d_model: 128, vocab_size: 512, max_seq_len: 128, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid("model dimensions must all be >= 1"));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Trainable parameter count (gates excluded).
    pub fn trainable_count(&self) -> usize {
        let (d, v, l) = (self.d_model, self.vocab_size, self.n_layers);
        2 * v * d + l * (12 * d * d + 13 * d) + 2 * d
    }
}

pub const BLOCK_TENSOR_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "w_query", "b_query", "w_key", "b_key", "w_value", "b_value", "w_out", "b_out", "ln2_gain",
    "ln2_bias", "w_fc", "b_fc", "w_proj", "b_proj",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_query: Tensor,
    pub b_query: Tensor,
    pub w_key: Tensor,
    pub b_key: Tensor,
    pub w_value: Tensor,
    pub b_value: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl BlockParams {
    pub fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_query,
            &self.b_query,
            &self.w_key,
            &self.b_key,
            &self.w_value,
            &self.b_value,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_query,
            &mut self.b_query,
            &mut self.w_key,
            &mut self.b_key,
            &mut self.w_value,
            &mut self.b_value,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// All model weights. `gates` (`[L,H]`) multiply each head's output and stay
/// at exactly 1 outside saliency probes; they are never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub unembedding: Tensor,
    pub gates: Tensor,
}

impl ModelParams {
    /// Trainable tensors in a fixed order shared by gradients and optimizer state.
    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.token_embedding];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.unembedding]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.unembedding]);
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string()];
        for l in 0..self.blocks.len() {
            out.extend(BLOCK_TENSOR_NAMES.iter().map(|n| format!("block{l}.{n}")));
        }
        out.extend(["final_gain", "final_bias", "unembedding"].map(String::from));
        out
    }

    /// Every tensor including the gates, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self.trainable_names().into_iter().zip(self.trainable()).collect();
        out.push(("gates".to_string(), &self.gates));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = self.trainable_names();
        let mut out: Vec<(String, &mut Tensor)> = Vec::with_capacity(names.len() + 1);
        let ModelParams { token_embedding, blocks, final_gain, final_bias, unembedding, gates, .. } = self;
        let mut tensors = vec![token_embedding];
        for b in blocks {
            tensors.extend(b.tensors_mut());
        }
        tensors.extend([final_gain, final_bias, unembedding]);
        out.extend(names.into_iter().zip(tensors));
        out.push(("gates".to_string(), gates));
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn gates_are_identity(&self) -> bool {
        self.gates.data().iter().all(|&g| g == 1.0)
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Seeded initialization: weights ~ N(0, 0.02²), biases 0, layer-norm gains 1,
/// gates 1.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut weight = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };
    let (d, v) = (config.d_model, config.vocab_size);
    let token_embedding = weight(vec![v, d]);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        blocks.push(BlockParams {
            ln1_gain: Tensor::full(vec![d], 1.0),
            ln1_bias: Tensor::zeros(vec![d]),
            w_query: weight(vec![d, d]),
            b_query: Tensor::zeros(vec![d]),
            w_key: weight(vec![d, d]),
            b_key: Tensor::zeros(vec![d]),
            w_value: weight(vec![d, d]),
            b_value: Tensor::zeros(vec![d]),
            w_out: weight(vec![d, d]),
            b_out: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], 1.0),
            ln2_bias: Tensor::zeros(vec![d]),
            w_fc: weight(vec![d, 4 * d]),
            b_fc: Tensor::zeros(vec![4 * d]),
            w_proj: weight(vec![4 * d, d]),
            b_proj: Tensor::zeros(vec![d]),
        });
    }
    let unembedding = weight(vec![d, v]);
    Ok(ModelParams {
        config: config.clone(),
        token_embedding,
        blocks,
        final_gain: Tensor::full(vec![d], 1.0),
        final_bias: Tensor::zeros(vec![d]),
        unembedding,
        gates: Tensor::full(vec![config.n_layers, config.n_heads], 1.0),
    })
}

/// Fixed sinusoidal position table `[len, d_model]`:
/// even columns `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn sinusoidal_positions(len: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; len * d_model];
    for pos in 0..len {
        for i in 0..d_model.div_ceil(2) {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d_model], data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, vocab_size: 256, max_seq_len: 32, seed: 7 }
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.d_model = 15;
        assert!(c.validate().is_err());
        c.d_model = 16;
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small()).unwrap();
        let b = init_params(&small()).unwrap();
        for ((_, x), (_, y)) in a.named_tensors().iter().zip(b.named_tensors()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn gates_start_at_one() {
        let p = init_params(&small()).unwrap();
        assert_eq!(p.gates.shape(), &[2, 2]);
        assert!(p.gates_are_identity());
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // V*d embedding + d*V unembedding + per layer (4 d^2 + 4 d attention,
        // 8 d^2 + 5 d MLP, 4 d layer norms) + 2 d final norm
        let (l, d, v) = (2usize, 16usize, 256usize);
        let expected = v * d + d * v + l * (4 * d * d + 4 * d + 8 * d * d + 5 * d + 4 * d) + 2 * d;
        assert_eq!(expected, 14_784);
        let p = init_params(&small()).unwrap();
        assert_eq!(p.trainable_count(), expected);
        assert_eq!(small().trainable_count(), expected);
        assert_eq!(p.trainable_names().len(), p.trainable().len());
    }

    #[test]
    fn sinusoid_matches_closed_form() {
        let d = 10;
        let table = sinusoidal_positions(20, d);
        for pos in 0..20 {
            for j in 0..d {
                let i = (j / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
                let want = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                assert!((table.data()[pos * d + j] - want).abs() <= 1e-12);
            }
        }
    }
}
