use super::{sinusoidal_positions, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::kernels::{dot, gelu, matmul, matmul_acc, softmax_in_place};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

fn layer_norm_row(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.iter().zip(gain.data().iter().zip(bias.data())).map(|(v, (g, b))| (v - mean) * r * g + b).collect()
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = b.len();
    let mut out = vec![0.0; n];
    matmul(x, w.data(), 1, x.len(), n, &mut out);
    for (o, bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    out
}

/// Tape-free decoder that keeps every layer's keys and values, so each new
/// token costs one row of work. Logits match [`forward`](super::forward) bit for bit.
pub struct KvDecoder<'a> {
    params: &'a ModelParams,
    positions: Tensor,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> KvDecoder<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let cfg = &params.config;
        KvDecoder {
            params,
            positions: sinusoidal_positions(cfg.max_seq_len, cfg.d_model),
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the next-token logits.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        if self.len == cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.len + 1, max: cfg.max_seq_len });
        }
        if token >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { id: token, vocab: cfg.vocab_size });
        }
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let t = self.len + 1;
        let mut x: Vec<f64> =
            p.token_embedding.row(token).iter().zip(self.positions.row(self.len)).map(|(e, q)| e + q).collect();

        for (l, b) in p.blocks.iter().enumerate() {
            let a_in = layer_norm_row(&x, &b.ln1_gain, &b.ln1_bias);
            let q = affine(&a_in, &b.w_query, &b.b_query);
            self.keys[l].extend(affine(&a_in, &b.w_key, &b.b_key));
            self.values[l].extend(affine(&a_in, &b.w_value, &b.b_value));
            let (keys, values) = (&self.keys[l], &self.values[l]);

            let mut cat = Vec::with_capacity(d);
            let mut scores = vec![0.0; t];
            let mut kh = vec![0.0; dh];
            let mut vh = vec![0.0; t * dh];
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    kh.copy_from_slice(&keys[j * d..(j + 1) * d][cols.clone()]);
                    *s = dot(&q[cols.clone()], &kh) * inv_sqrt;
                    vh[j * dh..(j + 1) * dh].copy_from_slice(&values[j * d..(j + 1) * d][cols.clone()]);
                }
                softmax_in_place(&mut scores);
                let mut out = vec![0.0; dh];
                matmul_acc(&scores, &vh, 1, t, dh, &mut out);
                let gate = p.gates.data()[l * h + head];
                cat.extend(out.iter().map(|v| v * gate));
            }
            let attn = affine(&cat, &b.w_out, &b.b_out);
            for (xv, a) in x.iter_mut().zip(&attn) {
                *xv += a;
            }
            let m_in = layer_norm_row(&x, &b.ln2_gain, &b.ln2_bias);
            let f: Vec<f64> = affine(&m_in, &b.w_fc, &b.b_fc).into_iter().map(gelu).collect();
            let f = affine(&f, &b.w_proj, &b.b_proj);
            for (xv, fv) in x.iter_mut().zip(&f) {
                *xv += fv;
            }
        }
        self.len = t;
        let x = layer_norm_row(&x, &p.final_gain, &p.final_bias);
        let mut logits = vec![0.0; cfg.vocab_size];
        matmul(&x, p.unembedding.data(), 1, d, cfg.vocab_size, &mut logits);
        Ok(logits)
    }
}

/// Greedy decoding over ids below `vocab`. Returns only the continuation,
/// which stops after `eos` (not included), after `max_new` tokens, or when the
/// context is full. Ties between logits resolve to the lowest token id.
pub fn generate_greedy(
    params: &ModelParams,
    prompt: &[usize],
    max_new: usize,
    eos: usize,
    vocab: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() || vocab == 0 {
        return Err(Error::invalid("generation needs a nonempty prompt and vocabulary"));
    }
    let max_len = params.config.max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::SequenceTooLong { len: prompt.len(), max: max_len });
    }
    let mut decoder = KvDecoder::new(params);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = decoder.push(tok)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new && decoder.len() < max_len {
        let next = argmax(&logits[..vocab.min(logits.len())]);
        if next == eos {
            break;
        }
        out.push(next);
        if decoder.len() + 1 < max_len && out.len() < max_new {
            logits = decoder.push(next)?;
        } else {
            break;
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn params() -> ModelParams {
        init_params(&ModelConfig { n_layers: 1, n_heads: 2, d_model: 8, vocab_size: 20, max_seq_len: 10, seed: 11 })
            .unwrap()
    }

    #[test]
    fn greedy_is_deterministic() {
        let p = params();
        let a = generate_greedy(&p, &[1, 2, 3], 5, 19, usize::MAX).unwrap();
        let b = generate_greedy(&p, &[1, 2, 3], 5, 19, usize::MAX).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_budget_gives_empty_continuation() {
        assert!(generate_greedy(&params(), &[1, 2], 0, 19, usize::MAX).unwrap().is_empty());
    }

    #[test]
    fn stops_at_context_limit() {
        let out = generate_greedy(&params(), &[1, 2, 3, 4], 100, usize::MAX, usize::MAX).unwrap();
        assert_eq!(out.len(), 6);
    }

    #[test]
    fn never_emits_ids_at_or_above_vocab() {
        let out = generate_greedy(&params(), &[1, 2, 3, 4], 100, usize::MAX, 5).unwrap();
        assert!(!out.is_empty() && out.iter().all(|&t| t < 5));
    }

    #[test]
    fn prompt_errors() {
        assert!(generate_greedy(&params(), &[], 3, 0, usize::MAX).is_err());
        assert!(generate_greedy(&params(), &[1; 11], 3, 0, usize::MAX).is_err());
    }

    /// The original definition: one full forward pass per generated token.
    fn greedy_by_full_forward(p: &ModelParams, prompt: &[usize], max_new: usize, eos: usize) -> Vec<usize> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && seq.len() < p.config.max_seq_len {
            let (logits, _) = crate::model::forward(p, &seq, false).unwrap();
            let next = argmax(logits.row(seq.len() - 1));
            if next == eos {
                break;
            }
            seq.push(next);
            out.push(next);
        }
        out
    }

    #[test]
    fn cached_logits_equal_full_forward_bitwise() {
        let p = init_params(&ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 16,
            vocab_size: 40,
            max_seq_len: 12,
            seed: 5,
        })
        .unwrap();
        let tokens = [3, 17, 17, 0, 39, 8, 21, 2, 2, 30, 11, 5];
        let (full, _) = crate::model::forward(&p, &tokens, false).unwrap();
        let mut dec = KvDecoder::new(&p);
        for (i, &t) in tokens.iter().enumerate() {
            assert_eq!(dec.push(t).unwrap(), full.row(i), "position {i}");
        }
        assert!(matches!(dec.push(1), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn cached_greedy_matches_full_forward_greedy() {
        for seed in 0..6 {
            let p = init_params(&ModelConfig {
                n_layers: 2,
                n_heads: 2,
                d_model: 8,
                vocab_size: 20,
                max_seq_len: 16,
                seed,
            })
            .unwrap();
            for (budget, eos) in [(20, usize::MAX), (5, 7), (0, 0)] {
                assert_eq!(
                    generate_greedy(&p, &[1, 4, 9], budget, eos, usize::MAX).unwrap(),
                    greedy_by_full_forward(&p, &[1, 4, 9], budget, eos)
                );
            }
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.5, 2.0, 2.0, 1.0]), 1);
    }
}
