//! Shared fixtures for the criterion benches.

use deld_core::encoder::{EncoderConfig, EncoderState};
use deld_core::prompt::init_prompt;
use deld_core::rng::{normal_tensor, stream};
use deld_core::{ModelState, PositionMode, Tensor};

pub const D_MODEL: usize = 64;

/// Frozen encoder sized for articles of up to `n_max` tokens plus
/// `prompt_rows` prompt rows.
pub fn encoder(layers: usize, n_max: usize, prompt_rows: usize) -> EncoderState {
    EncoderState::init(EncoderConfig {
        d_model: D_MODEL,
        layers,
        heads: 4,
        ffn_dim: 2 * D_MODEL,
        vocab_size: 500,
        n_max,
        prompt_capacity: prompt_rows,
        seed: 1,
    })
    .expect("valid bench encoder")
    .freeze()
}

/// Random `n × d` input rows.
pub fn article(n: usize) -> Tensor {
    normal_tensor(&mut stream(n as u64, 3), &[n, D_MODEL], 1.0)
}

/// A model with `k` frozen prompts of `m` rows each.
pub fn staged_model(layers: usize, n_max: usize, k: usize, m: usize) -> ModelState {
    let mut model = ModelState::new(encoder(layers, n_max, k * m), PositionMode::Prepend);
    for i in 0..k {
        let id = format!("g{i}");
        let p = init_prompt(&id, m, &model.encoder, 9).expect("prompt");
        model.bank.push(p).expect("push");
        model.bank.freeze_prompt(&id).expect("freeze");
    }
    model
}

/// Token ids `3..3+n`, cycling through the vocabulary.
pub fn token_ids(n: usize) -> Vec<usize> {
    (0..n).map(|i| 3 + i % 497).collect()
}
