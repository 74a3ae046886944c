//! News examples grouped by generator, the synthetic multi-generator corpus,
//! JSONL ingestion, tokenization and stratified 80/20 splitting.

mod jsonl;
mod synth;
mod vocab;

pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl, write_jsonl};
pub use synth::{synth_generate, GeneratorSpec, Marker, Placement, SynthSpec};
pub use vocab::{words, Tokenized, Vocabulary, MASK_ID, PAD_ID, UNK_ID};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, stream};

/// Generator ids in the default training order.
pub const DEFAULT_GENERATORS: [&str; 4] = ["human", "vicuna", "llama", "chatgpt"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsExample {
    pub text: String,
    /// 0 = true news, 1 = disinformation.
    pub label: u8,
    pub generator: String,
}

/// All examples produced by one generator (one continual-learning task).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorDataset {
    pub generator: String,
    pub examples: Vec<NewsExample>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_REPEATS: usize = 10;

impl GeneratorDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let fake = self.examples.iter().filter(|e| e.label == 1).count();
        (self.examples.len() - fake, fake)
    }

    /// Stratified 80/20 split, deterministic in `(seed, repeat)`.
    pub fn split(&self, repeat: usize, seed: u64) -> Result<Split> {
        split_80_20(&self.labels(), &self.generator, repeat, seed)
    }
}

/// Stratified split with `|train| = round(0.8·N)` and each class within one
/// example of its 80% share. Both index lists come back sorted.
pub fn split_80_20(labels: &[u8], generator: &str, repeat: usize, seed: u64) -> Result<Split> {
    let n = labels.len();
    if n < 5 {
        return Err(Error::contract(format!(
            "need at least 5 examples to split, got {n}"
        )));
    }
    let mut rng = stream(derive(seed, generator, repeat as u64), 0x7370_6c74);
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[usize::from(y == 1)].push(i);
    }
    let total_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let first_train = (TRAIN_FRACTION * by_class[0].len() as f64).round() as usize;
    let quotas = [first_train, total_train - first_train.min(total_train)];

    let mut train = Vec::with_capacity(total_train);
    let mut test = Vec::with_capacity(n - total_train);
    for (class, quota) in by_class.iter_mut().zip(quotas) {
        class.shuffle(&mut rng);
        let quota = quota.min(class.len());
        train.extend_from_slice(&class[..quota]);
        test.extend_from_slice(&class[quota..]);
    }
    // Rounding of the two class quotas can leave the total one short.
    while train.len() < total_train {
        train.push(test.pop().expect("test non-empty while train short"));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize) -> Vec<u8> {
        (0..n).map(|i| (i % 2) as u8).collect()
    }

    #[test]
    fn balanced_hundred_splits_evenly() {
        let labels = balanced(100);
        let s = split_80_20(&labels, "g", 0, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (80, 20));
        let fake_train = s.train.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(fake_train, 40);
        let fake_test = s.test.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(fake_test, 10);
    }

    #[test]
    fn repeats_differ_and_are_reproducible() {
        let labels = balanced(100);
        let a = split_80_20(&labels, "g", 0, 1).unwrap();
        let b = split_80_20(&labels, "g", 1, 1).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, split_80_20(&labels, "g", 0, 1).unwrap());
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(
            split_80_20(&[0, 1, 0, 1], "g", 0, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn imbalanced_counts_respect_stratification() {
        // vicuna-like: 500 true / 326 fake
        let mut labels = vec![0u8; 500];
        labels.extend(vec![1u8; 326]);
        let s = split_80_20(&labels, "vicuna", 3, 9).unwrap();
        assert_eq!(s.train.len(), (0.8f64 * 826.0).round() as usize);
        let fake = s.train.iter().filter(|&&i| labels[i] == 1).count() as f64;
        assert!((fake - 0.8 * 326.0).abs() <= 1.0);
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..826).collect::<Vec<_>>());
    }
}
