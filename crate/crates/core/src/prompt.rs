//! Per-generator soft prompts and their ordered composition in front of (or
//! behind) an article.
//!
//! With `k` prompts of `m` rows and an article of `n` rows, prepend mode lays
//! the sequence out as `[P_k; P_{k-1}; …; P_1; X]` and append mode as
//! `[X; P_k; …; P_1]`. Both have `k·m + n` rows.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK_ID;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::rng::{derive, stream};
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    #[default]
    Prepend,
    Append,
}

impl std::str::FromStr for PositionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prepend" => Ok(PositionMode::Prepend),
            "append" => Ok(PositionMode::Append),
            other => Err(Error::config(format!(
                "position must be prepend or append, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionMode::Prepend => "prepend",
            PositionMode::Append => "append",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SoftPrompt {
    generator_id: String,
    pub matrix: Parameter,
    frozen: bool,
}

impl SoftPrompt {
    pub(crate) fn from_parts(generator_id: String, matrix: Parameter, frozen: bool) -> Self {
        let mut p = SoftPrompt {
            generator_id,
            matrix,
            frozen,
        };
        p.matrix.set_trainable(!frozen);
        p
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    /// Prompt token count `m`.
    pub fn len(&self) -> usize {
        self.matrix.value().rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn freeze(&mut self) {
        self.frozen = true;
        self.matrix.set_trainable(false);
    }
}

/// A fresh trainable prompt whose rows are copies of randomly chosen
/// vocabulary embeddings (special tokens excluded).
pub fn init_prompt(
    generator_id: &str,
    m: usize,
    encoder: &EncoderState,
    seed: u64,
) -> Result<SoftPrompt> {
    if m < 1 {
        return Err(Error::config("prompt length must be at least 1"));
    }
    let table = encoder.token_embeddings.value();
    let vocab = table.rows();
    let first = (UNK_ID as usize + 1).min(vocab - 1);
    let mut rng = stream(derive(seed, generator_id, m as u64), 0x7072_6d74);
    let rows: Vec<usize> = (0..m).map(|_| rng.random_range(first..vocab)).collect();
    let matrix = Parameter::new(table.gather_rows(&rows)?);
    Ok(SoftPrompt {
        generator_id: generator_id.to_string(),
        matrix,
        frozen: false,
    })
}

/// Row layout of a composed sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub total_rows: usize,
    pub article_span: Range<usize>,
    /// `(bank index, rows)` in sequence order, newest prompt first.
    pub prompt_blocks: Vec<(usize, Range<usize>)>,
}

/// A composed input `X′` with the article span and validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Composed {
    pub input: Tensor,
    pub article_span: Range<usize>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct PromptBank {
    prompts: Vec<SoftPrompt>,
    position_mode: PositionMode,
}

impl PromptBank {
    pub fn new(position_mode: PositionMode) -> Self {
        PromptBank {
            prompts: Vec::new(),
            position_mode,
        }
    }

    pub fn position_mode(&self) -> PositionMode {
        self.position_mode
    }

    /// Prompts in learning order (`P_1` first).
    pub fn prompts(&self) -> &[SoftPrompt] {
        &self.prompts
    }

    pub fn prompts_mut(&mut self) -> &mut [SoftPrompt] {
        &mut self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn newest(&self) -> Option<&SoftPrompt> {
        self.prompts.last()
    }

    /// Total prompt rows `k·m` (prompts may differ in length).
    pub fn prompt_rows(&self) -> usize {
        self.prompts.iter().map(SoftPrompt::len).sum()
    }

    pub fn all_frozen(&self) -> bool {
        self.prompts.iter().all(SoftPrompt::is_frozen)
    }

    /// Appends a prompt. Every earlier prompt must already be frozen and ids
    /// must be unique.
    pub fn push(&mut self, prompt: SoftPrompt) -> Result<()> {
        if let Some(open) = self.prompts.iter().find(|p| !p.is_frozen()) {
            return Err(Error::contract(format!(
                "prompt {:?} must be frozen before adding {:?}",
                open.generator_id, prompt.generator_id
            )));
        }
        if self.prompts.iter().any(|p| p.generator_id == prompt.generator_id) {
            return Err(Error::contract(format!(
                "a prompt for generator {:?} already exists",
                prompt.generator_id
            )));
        }
        if let Some(first) = self.prompts.first() {
            if first.matrix.value().cols() != prompt.matrix.value().cols() {
                return Err(Error::dim(
                    "prompt bank",
                    first.matrix.value().shape(),
                    prompt.matrix.value().shape(),
                ));
            }
        }
        self.prompts.push(prompt);
        Ok(())
    }

    /// Freezes the newest prompt. Freezing an already frozen prompt is a
    /// no-op; freezing anything but the newest is an error.
    pub fn freeze_prompt(&mut self, generator_id: &str) -> Result<()> {
        let pos = self
            .prompts
            .iter()
            .position(|p| p.generator_id == generator_id)
            .ok_or_else(|| Error::contract(format!("no prompt for generator {generator_id:?}")))?;
        if self.prompts[pos].is_frozen() {
            return Ok(());
        }
        if pos + 1 != self.prompts.len() {
            return Err(Error::contract(format!(
                "prompt {generator_id:?} is not the most recent one"
            )));
        }
        self.prompts[pos].freeze();
        Ok(())
    }

    pub fn layout(&self, article_rows: usize) -> Layout {
        let km = self.prompt_rows();
        let prompt_start = match self.position_mode {
            PositionMode::Prepend => 0,
            PositionMode::Append => article_rows,
        };
        let article_start = match self.position_mode {
            PositionMode::Prepend => km,
            PositionMode::Append => 0,
        };
        let mut blocks = Vec::with_capacity(self.prompts.len());
        let mut row = prompt_start;
        for (i, p) in self.prompts.iter().enumerate().rev() {
            blocks.push((i, row..row + p.len()));
            row += p.len();
        }
        Layout {
            total_rows: km + article_rows,
            article_span: article_start..article_start + article_rows,
            prompt_blocks: blocks,
        }
    }

    /// Builds `X′` from an article embedding. An empty bank returns the
    /// article unchanged.
    pub fn compose_input(&self, article: &Tensor, article_mask: &[bool]) -> Result<Composed> {
        let n = article.rows();
        if article_mask.len() != n {
            return Err(Error::dim("compose mask", article.shape(), &[article_mask.len()]));
        }
        if let Some(p) = self.prompts.first() {
            if p.matrix.value().cols() != article.cols() {
                return Err(Error::dim(
                    "compose_input",
                    p.matrix.value().shape(),
                    article.shape(),
                ));
            }
        }
        let layout = self.layout(n);
        let mut mask = vec![true; layout.total_rows];
        mask[layout.article_span.clone()].copy_from_slice(article_mask);
        let newest_first = layout
            .prompt_blocks
            .iter()
            .map(|(i, _)| self.prompts[*i].matrix.value());
        let parts: Vec<&Tensor> = match self.position_mode {
            PositionMode::Prepend => newest_first.chain([article]).collect(),
            PositionMode::Append => std::iter::once(article).chain(newest_first).collect(),
        };
        let input = Tensor::concat_rows(&parts)?;
        Ok(Composed {
            input,
            article_span: layout.article_span,
            mask,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.prompts.iter().map(|p| &p.matrix).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.prompts.iter_mut().map(|p| &mut p.matrix).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn encoder() -> EncoderState {
        EncoderState::init(EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 40,
            n_max: 10,
            prompt_capacity: 16,
            seed: 1,
        })
        .unwrap()
    }

    fn constant_prompt(id: &str, m: usize, v: f64) -> SoftPrompt {
        SoftPrompt::from_parts(id.into(), Parameter::new(Tensor::full(&[m, 8], v)), false)
    }

    #[test]
    fn init_shape_determinism_and_membership() {
        let enc = encoder();
        let p = init_prompt("g", 4, &enc, 9).unwrap();
        assert_eq!(p.matrix.value().shape(), &[4, 8]);
        assert!(p.matrix.trainable() && !p.is_frozen());
        let q = init_prompt("g", 4, &enc, 9).unwrap();
        assert_eq!(p.matrix.value(), q.matrix.value());
        let table = enc.token_embeddings.value();
        for r in 0..4 {
            let row = p.matrix.value().row(r);
            assert!((0..table.rows()).any(|v| table.row(v) == row));
        }
        assert!(matches!(init_prompt("g", 0, &enc, 9), Err(Error::Config(_))));
    }

    #[test]
    fn prepend_layout_is_newest_first() {
        let mut bank = PromptBank::new(PositionMode::Prepend);
        bank.push(constant_prompt("a", 4, 1.0)).unwrap();
        bank.freeze_prompt("a").unwrap();
        bank.push(constant_prompt("b", 4, 2.0)).unwrap();
        let article = Tensor::full(&[10, 8], 9.0);
        let c = bank.compose_input(&article, &[true; 10]).unwrap();
        assert_eq!(c.input.rows(), 18);
        assert_eq!(c.article_span, 8..18);
        for r in 0..4 {
            assert!(c.input.row(r).iter().all(|v| *v == 2.0));
        }
        for r in 4..8 {
            assert!(c.input.row(r).iter().all(|v| *v == 1.0));
        }
        for r in 8..18 {
            assert!(c.input.row(r).iter().all(|v| *v == 9.0));
        }
    }

    #[test]
    fn append_layout() {
        let mut bank = PromptBank::new(PositionMode::Append);
        bank.push(constant_prompt("a", 4, 1.0)).unwrap();
        let article = Tensor::full(&[10, 8], 9.0);
        let mut mask = vec![true; 10];
        mask[9] = false;
        let c = bank.compose_input(&article, &mask).unwrap();
        assert_eq!(c.article_span, 0..10);
        for r in 0..10 {
            assert_eq!(c.input.row(r), article.row(r));
        }
        for r in 10..14 {
            assert!(c.input.row(r).iter().all(|v| *v == 1.0));
        }
        assert!(!c.mask[9] && c.mask[10]);
    }

    #[test]
    fn empty_bank_is_identity() {
        let bank = PromptBank::new(PositionMode::Prepend);
        let article = Tensor::full(&[3, 8], 0.5);
        let c = bank.compose_input(&article, &[true; 3]).unwrap();
        assert_eq!(c.input, article);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut bank = PromptBank::new(PositionMode::Prepend);
        bank.push(constant_prompt("a", 2, 1.0)).unwrap();
        let article = Tensor::zeros(&[3, 6]);
        assert!(matches!(
            bank.compose_input(&article, &[true; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn freezing_rules() {
        let mut bank = PromptBank::new(PositionMode::Prepend);
        bank.push(constant_prompt("a", 2, 1.0)).unwrap();
        // cannot add while the newest is open
        assert!(bank.push(constant_prompt("b", 2, 1.0)).is_err());
        bank.freeze_prompt("a").unwrap();
        bank.freeze_prompt("a").unwrap();
        assert!(bank.prompts()[0].is_frozen());
        assert!(!bank.prompts()[0].matrix.trainable());
        bank.push(constant_prompt("b", 2, 1.0)).unwrap();
        assert!(bank.freeze_prompt("zzz").is_err());
        assert!(bank.push(constant_prompt("a", 2, 1.0)).is_err());
        let open: Vec<bool> = bank.prompts().iter().map(|p| p.is_frozen()).collect();
        assert_eq!(open, vec![true, false]);
    }
}
