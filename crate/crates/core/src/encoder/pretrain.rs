use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::EncoderState;
use crate::corpus::{MASK_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{Adam, Gradients, Parameter, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub mask_prob: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            mask_prob: 0.15,
            batch_size: 8,
            lr: 1e-3,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Masked-token cross-entropy per step (0 when nothing was masked).
    pub losses: Vec<f64>,
}

impl PretrainLog {
    /// Mean loss over the first and last `window` steps.
    pub fn first_last(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.losses.len());
        if w == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..w]),
            mean(&self.losses[self.losses.len() - w..]),
        ))
    }
}

/// Masked-token pre-training with an output layer tied to the token
/// embeddings. The bias of the prediction head is discarded afterwards.
pub fn pretrain_backbone(
    mut state: EncoderState,
    corpus: &[Vec<u32>],
    cfg: &PretrainConfig,
) -> Result<(EncoderState, PretrainLog)> {
    if state.is_frozen() {
        return Err(Error::contract("cannot pre-train a frozen encoder"));
    }
    if !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(Error::config("mask_prob must lie in [0, 1]"));
    }
    let mut log = PretrainLog::default();
    if cfg.steps == 0 {
        return Ok((state, log));
    }
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            s.iter()
                .filter(|&&t| t != PAD_ID)
                .take(state.config().n_max)
                .map(|&t| t as usize)
                .collect::<Vec<_>>()
        })
        .filter(|s: &Vec<usize>| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::contract("pre-training corpus is empty"));
    }

    let mut head_bias = Parameter::new(Tensor::zeros(&[state.config().vocab_size]));
    let mut adam = Adam::with_lr(cfg.lr);
    let mut rng = stream(cfg.seed, 0x6d6c6d);
    let batch = cfg.batch_size.max(1);

    for _ in 0..cfg.steps {
        let mut grads = Gradients::new();
        let mut total = 0.0;
        let mut used = 0usize;
        let picks: Vec<usize> = (0..batch).map(|_| rng.random_range(0..seqs.len())).collect();
        let mut masked: Vec<(usize, Vec<usize>)> = Vec::with_capacity(batch);
        for &i in &picks {
            let positions: Vec<usize> = (0..seqs[i].len())
                .filter(|_| rng.random::<f64>() < cfg.mask_prob)
                .collect();
            if !positions.is_empty() {
                masked.push((i, positions));
            }
        }
        let scale = if masked.is_empty() {
            0.0
        } else {
            1.0 / masked.len() as f64
        };
        for (i, positions) in &masked {
            let seq = &seqs[*i];
            let mut input = seq.clone();
            for &p in positions {
                input[p] = MASK_ID as usize;
            }
            let targets: Vec<usize> = positions.iter().map(|&p| seq[p]).collect();
            let pos: Vec<usize> = (0..seq.len()).collect();

            let mut tape = Tape::new();
            let x = state.embed(&mut tape, &input)?;
            let h = state.forward(&mut tape, x, &pos)?;
            let hm = tape.gather_rows(h, positions)?;
            let table = tape.param(&state.token_embeddings);
            let logits = tape.matmul_t(hm, table)?;
            let bias = tape.param(&head_bias);
            let logits = tape.add_row(logits, bias)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            total += tape.value(loss).item();
            used += 1;
            let loss = tape.scale(loss, scale);
            tape.backward(loss, &mut grads)?;
        }
        if used == 0 {
            log.losses.push(0.0);
            continue;
        }
        log.losses.push(total / used as f64);
        for p in state.params_mut() {
            p.absorb(&grads, 1.0);
        }
        head_bias.absorb(&grads, 1.0);
        adam.step(state.params_mut().into_iter().chain([&mut head_bias]));
        for p in state.params_mut() {
            p.zero_grad();
        }
        head_bias.zero_grad();
    }
    Ok((state, log))
}
