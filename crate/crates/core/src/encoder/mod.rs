//! The miniature pre-LN transformer encoder that stands in for the frozen
//! pre-trained language model.
//!
//! Padding is handled by compaction: only unmasked rows enter the layers,
//! each keeping the positional encoding of its original row. Attention
//! weights to masked rows are therefore exactly zero, and masked rows come
//! back from [`EncoderState::encode`] as zero vectors.

mod pretrain;

pub use pretrain::{pretrain_backbone, PretrainConfig, PretrainLog};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{normal_tensor, stream, Rng};
use crate::tensor::{Parameter, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Token count including PAD, MASK and UNK.
    pub vocab_size: usize,
    /// Maximum article length in tokens.
    pub n_max: usize,
    /// Extra positional rows reserved for soft prompts.
    pub prompt_capacity: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 2000,
            n_max: 128,
            prompt_capacity: 8 * 20,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("d_model, heads and ffn_dim must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.n_max == 0 {
            return Err(Error::config("n_max must be at least 1"));
        }
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size must leave room for PAD, MASK, UNK"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Rows of positional encodings: articles plus reserved prompt rows.
    pub fn positional_capacity(&self) -> usize {
        self.n_max + self.prompt_capacity
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1_gamma: Parameter,
    pub ln1_beta: Parameter,
    /// Fused query/key/value projection, `d × 3d`.
    pub w_qkv: Parameter,
    pub b_qkv: Parameter,
    pub w_out: Parameter,
    pub b_out: Parameter,
    pub ln2_gamma: Parameter,
    pub ln2_beta: Parameter,
    pub w_ff1: Parameter,
    pub b_ff1: Parameter,
    pub w_ff2: Parameter,
    pub b_ff2: Parameter,
}

impl EncoderLayer {
    fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let std_d = 1.0 / (d as f64).sqrt();
        let std_f = 1.0 / (f as f64).sqrt();
        EncoderLayer {
            ln1_gamma: Parameter::new(Tensor::full(&[d], 1.0)),
            ln1_beta: Parameter::new(Tensor::zeros(&[d])),
            w_qkv: Parameter::new(normal_tensor(rng, &[d, 3 * d], std_d)),
            b_qkv: Parameter::new(Tensor::zeros(&[3 * d])),
            w_out: Parameter::new(normal_tensor(rng, &[d, d], std_d * out_scale)),
            b_out: Parameter::new(Tensor::zeros(&[d])),
            ln2_gamma: Parameter::new(Tensor::full(&[d], 1.0)),
            ln2_beta: Parameter::new(Tensor::zeros(&[d])),
            w_ff1: Parameter::new(normal_tensor(rng, &[d, f], std_d)),
            b_ff1: Parameter::new(Tensor::zeros(&[f])),
            w_ff2: Parameter::new(normal_tensor(rng, &[f, d], std_f * out_scale)),
            b_ff2: Parameter::new(Tensor::zeros(&[d])),
        }
    }

    fn params(&self) -> [&Parameter; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn params_mut(&mut self) -> [&mut Parameter; 12] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, h: Var, cfg: &EncoderConfig) -> Result<Var> {
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let g1 = tape.param(&self.ln1_gamma);
        let b1 = tape.param(&self.ln1_beta);
        let a = tape.layer_norm(h, g1, b1, LN_EPS)?;
        let w = tape.param(&self.w_qkv);
        let b = tape.param(&self.b_qkv);
        let qkv = tape.matmul(a, w)?;
        let qkv = tape.add_row(qkv, b)?;

        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let q = tape.slice_cols(qkv, hd * dh, (hd + 1) * dh)?;
            let k = tape.slice_cols(qkv, d + hd * dh, d + (hd + 1) * dh)?;
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh)?;
            let scores = tape.matmul_t(q, k)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let wo = tape.param(&self.w_out);
        let bo = tape.param(&self.b_out);
        let o = tape.matmul(merged, wo)?;
        let o = tape.add_row(o, bo)?;
        let h = tape.add(h, o)?;

        let g2 = tape.param(&self.ln2_gamma);
        let b2 = tape.param(&self.ln2_beta);
        let f = tape.layer_norm(h, g2, b2, LN_EPS)?;
        let w1 = tape.param(&self.w_ff1);
        let bf1 = tape.param(&self.b_ff1);
        let f = tape.matmul(f, w1)?;
        let f = tape.add_row(f, bf1)?;
        let f = tape.gelu(f);
        let w2 = tape.param(&self.w_ff2);
        let bf2 = tape.param(&self.b_ff2);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, bf2)?;
        tape.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderState {
    config: EncoderConfig,
    pub token_embeddings: Parameter,
    pub positional: Parameter,
    pub layers: Vec<EncoderLayer>,
    pub final_gamma: Parameter,
    pub final_beta: Parameter,
    frozen: bool,
}

impl EncoderState {
    /// Scaled-normal initialization, deterministic in `config.seed`.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, 0x656e_636f);
        let d = config.d_model;
        let token_embeddings =
            Parameter::new(normal_tensor(&mut rng, &[config.vocab_size, d], 0.5));
        let positional = Parameter::new(normal_tensor(
            &mut rng,
            &[config.positional_capacity(), d],
            0.1,
        ));
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::init(&config, &mut rng))
            .collect();
        Ok(EncoderState {
            token_embeddings,
            positional,
            layers,
            final_gamma: Parameter::new(Tensor::full(&[d], 1.0)),
            final_beta: Parameter::new(Tensor::zeros(&[d])),
            frozen: false,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Every parameter in declaration order (the serialization order).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embeddings, &self.positional];
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.token_embeddings, &mut self.positional];
        for layer in &mut self.layers {
            out.extend(layer.params_mut());
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out
    }

    /// Marks every parameter non-trainable. Idempotent.
    pub fn freeze(mut self) -> Self {
        self.set_frozen(true);
        self
    }

    /// Makes every parameter trainable again (full fine-tuning baselines).
    pub fn unfreeze(mut self) -> Self {
        self.set_frozen(false);
        self
    }

    fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.set_trainable(!frozen);
        }
        self.frozen = frozen;
    }

    /// Token-embedding rows for `ids`, recorded on the tape.
    pub fn embed<'a>(&'a self, tape: &mut Tape<'a>, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = tape.param(&self.token_embeddings);
        tape.gather_rows(table, ids)
    }

    /// Runs the layers over already-compacted rows. `positions[i]` is the
    /// original sequence row of input row `i`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var, positions: &[usize]) -> Result<Var> {
        let cap = self.config.positional_capacity();
        if let Some(&max) = positions.iter().max() {
            if max >= cap {
                return Err(Error::Capacity {
                    limit: cap,
                    requested: max + 1,
                });
            }
        }
        if tape.value(x).rows() != positions.len() {
            return Err(Error::dim(
                "encoder input",
                tape.value(x).shape(),
                &[positions.len(), self.config.d_model],
            ));
        }
        if tape.value(x).cols() != self.config.d_model {
            return Err(Error::dim(
                "encoder input",
                tape.value(x).shape(),
                &[positions.len(), self.config.d_model],
            ));
        }
        let table = tape.param(&self.positional);
        let pos = tape.gather_rows(table, positions)?;
        let mut h = tape.add(x, pos)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, &self.config)?;
        }
        let g = tape.param(&self.final_gamma);
        let b = tape.param(&self.final_beta);
        tape.layer_norm(h, g, b, LN_EPS)
    }

    /// `H = PLM(X′)` for a full composed sequence. Masked rows neither attend
    /// nor are attended to; their output rows are zero.
    pub fn encode(&self, x_prime: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let rows = x_prime.rows();
        let cap = self.config.positional_capacity();
        if rows > cap {
            return Err(Error::Capacity {
                limit: cap,
                requested: rows,
            });
        }
        if mask.len() != rows {
            return Err(Error::dim("encode mask", x_prime.shape(), &[mask.len()]));
        }
        let d = self.config.d_model;
        let mut out = Tensor::zeros(&[rows, d]);
        let positions: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
        if positions.is_empty() {
            return Ok(out);
        }
        let mut tape = Tape::inference();
        let x = tape.constant(x_prime.gather_rows(&positions)?);
        let h = self.forward(&mut tape, x, &positions)?;
        let h = tape.value(h);
        for (i, &r) in positions.iter().enumerate() {
            out.row_mut(r).copy_from_slice(h.row(i));
        }
        Ok(out)
    }
}

/// Mean of the hidden rows inside `span` whose mask is set.
pub fn pool(h: &Tensor, span: Range<usize>, mask: &[bool]) -> Result<Tensor> {
    if span.end > h.rows() || span.end > mask.len() {
        return Err(Error::contract(format!(
            "span {span:?} outside {} rows",
            h.rows()
        )));
    }
    let rows: Vec<usize> = span.filter(|&r| mask[r]).collect();
    if rows.is_empty() {
        return Err(Error::contract("pooling span contains no unmasked rows"));
    }
    let d = h.cols();
    let mut acc = vec![0.0; d];
    for &r in &rows {
        for (a, v) in acc.iter_mut().zip(h.row(r)) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(vec![d], acc)
}
