//! Synthetic multi-generator news corpus.
//!
//! Articles are token sequences, not English. Each generator draws filler
//! words from a shared vocabulary with its own Zipf ranking, mixes in
//! generator-specific style words, and plants marker tokens whose placement
//! depends on the label. With `s = +1` for disinformation and `-1` for true
//! news and marker correlation `c`:
//!
//! * a [`Placement::Presence`] marker appears with probability `(1 + c·s)/2`;
//! * a [`Placement::Lead`] marker is always present and opens the article
//!   with probability `(1 + c·s)/2`, otherwise it sits somewhere later;
//! * a [`Placement::Pair`] marker and its partner each appear half the time,
//!   and they agree (both or neither) with probability `(1 + c·s)/2`.
//!
//! Presence cues are shared by every generator with the same sign. The
//! conflict presets add one marker whose sign alternates between
//! generators. A pair marker carries no signal in any single word, so a
//! linear read-out of frozen bag-like features barely sees it while full
//! fine-tuning learns it, and then unlearns it on the next generator.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{GeneratorDataset, NewsExample};
use crate::error::{Error, Result};
use crate::rng::{derive, stream, Rng};

/// `(generator, true news, disinformation)` counts of the reference corpus.
pub const GENERATOR_COUNTS: [(&str, usize, usize); 4] = [
    ("human", 2500, 2500),
    ("vicuna", 500, 326),
    ("llama", 501, 557),
    ("chatgpt", 501, 587),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Presence,
    Lead,
    /// The marker and its partner each appear with probability one half;
    /// they agree (both or neither) with probability `(1 + c·s)/2`.
    Pair { partner: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub token: String,
    /// Correlation with the disinformation label, in `[-1, 1]`.
    pub correlation: f64,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub id: String,
    pub n_true: usize,
    pub n_fake: usize,
    /// Number of generator-specific style words.
    pub style_vocab: usize,
    /// Probability that a body slot draws a style word instead of filler.
    pub style_rate: f64,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub markers: Vec<Marker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    /// Size of the filler vocabulary shared by all generators.
    pub filler_vocab: usize,
    pub generators: Vec<GeneratorSpec>,
}

const FAKE_CUES: usize = 2;
const TRUE_CUES: usize = 2;
const CUE_CORRELATION: f64 = 0.6;
const LEAD_TOKEN: &str = "leadmark";
const PAIR_TOKENS: (&str, &str) = ("pairmarka", "pairmarkb");

fn consistent_cues() -> Vec<Marker> {
    let fake = (0..FAKE_CUES).map(|i| Marker {
        token: format!("fakecue{i}"),
        correlation: CUE_CORRELATION,
        placement: Placement::Presence,
    });
    let truth = (0..TRUE_CUES).map(|i| Marker {
        token: format!("truecue{i}"),
        correlation: -CUE_CORRELATION,
        placement: Placement::Presence,
    });
    fake.chain(truth).collect()
}

impl SynthSpec {
    /// Four generators with the reference class counts and label cues that
    /// agree across generators.
    pub fn standard(seed: u64) -> Self {
        let generators = GENERATOR_COUNTS
            .iter()
            .enumerate()
            .map(|(i, &(id, n_true, n_fake))| GeneratorSpec {
                id: id.to_string(),
                n_true,
                n_fake,
                style_vocab: 60,
                style_rate: 0.3,
                zipf_exponent: 0.9 + 0.1 * i as f64,
                min_len: 6,
                max_len: 10,
                markers: consistent_cues(),
            })
            .collect();
        SynthSpec {
            seed,
            filler_vocab: 400,
            generators,
        }
    }

    /// The reference suite plus a shared lead marker whose correlation with
    /// the label alternates in sign across the default generator order.
    pub fn lead_conflict(seed: u64) -> Self {
        let mut spec = Self::standard(seed);
        for (i, g) in spec.generators.iter_mut().enumerate() {
            g.markers.push(Marker {
                token: LEAD_TOKEN.to_string(),
                correlation: if i % 2 == 0 { 1.0 } else { -1.0 },
                placement: Placement::Lead,
            });
        }
        spec
    }

    /// The reference suite plus a pair marker whose correlation with the
    /// label alternates in sign across the default generator order, so that
    /// consecutive tasks contradict each other.
    pub fn conflict(seed: u64) -> Self {
        let mut spec = Self::standard(seed);
        for (i, g) in spec.generators.iter_mut().enumerate() {
            g.markers.push(Marker {
                token: PAIR_TOKENS.0.to_string(),
                correlation: if i % 2 == 0 { 1.0 } else { -1.0 },
                placement: Placement::Pair {
                    partner: PAIR_TOKENS.1.to_string(),
                },
            });
        }
        spec
    }

    /// Same shape as [`Self::standard`] with every correlation set to zero.
    pub fn uncorrelated(seed: u64) -> Self {
        let mut spec = Self::standard(seed);
        for g in &mut spec.generators {
            for m in &mut g.markers {
                m.correlation = 0.0;
            }
        }
        spec
    }

    /// Sets the strength of every presence cue, keeping its sign.
    pub fn with_cue_strength(mut self, strength: f64) -> Self {
        for g in &mut self.generators {
            for m in &mut g.markers {
                if m.placement == Placement::Presence && m.correlation != 0.0 {
                    m.correlation = strength * m.correlation.signum();
                }
            }
        }
        self
    }

    /// Scales every class count by `factor` (at least 5 per class).
    pub fn scaled(mut self, factor: f64) -> Self {
        for g in &mut self.generators {
            g.n_true = ((g.n_true as f64 * factor).round() as usize).max(5);
            g.n_fake = ((g.n_fake as f64 * factor).round() as usize).max(5);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.generators.is_empty() {
            return Err(Error::config("synthetic spec needs at least one generator"));
        }
        if self.filler_vocab == 0 {
            return Err(Error::config("filler_vocab must be positive"));
        }
        for (i, g) in self.generators.iter().enumerate() {
            if self.generators[..i].iter().any(|o| o.id == g.id) {
                return Err(Error::config(format!("duplicate generator id {:?}", g.id)));
            }
            if g.n_true + g.n_fake < 10 {
                return Err(Error::config(format!(
                    "generator {:?} has {} examples; need at least 10",
                    g.id,
                    g.n_true + g.n_fake
                )));
            }
            if g.min_len == 0 || g.min_len > g.max_len {
                return Err(Error::config(format!("generator {:?}: bad length range", g.id)));
            }
            if !(0.0..=1.0).contains(&g.style_rate) || (g.style_rate > 0.0 && g.style_vocab == 0) {
                return Err(Error::config(format!("generator {:?}: bad style settings", g.id)));
            }
            if !g.zipf_exponent.is_finite() || g.zipf_exponent < 0.0 {
                return Err(Error::config(format!("generator {:?}: bad zipf exponent", g.id)));
            }
            for m in &g.markers {
                if !(-1.0..=1.0).contains(&m.correlation) {
                    return Err(Error::config(format!(
                        "marker {:?} correlation {} outside [-1, 1]",
                        m.token, m.correlation
                    )));
                }
                if m.token.is_empty() || !m.token.chars().all(char::is_alphanumeric) {
                    return Err(Error::config(format!(
                        "marker {:?} must be a single alphanumeric word",
                        m.token
                    )));
                }
            }
            if let Some(bad) = g.markers.iter().find_map(|m| match &m.placement {
                Placement::Pair { partner }
                    if partner.is_empty()
                        || partner == &m.token
                        || !partner.chars().all(char::is_alphanumeric) =>
                {
                    Some(partner)
                }
                _ => None,
            }) {
                return Err(Error::config(format!("bad pair partner {bad:?}")));
            }
            if g.markers.iter().filter(|m| m.placement == Placement::Lead).count() > 1 {
                return Err(Error::config(format!(
                    "generator {:?} has more than one lead marker",
                    g.id
                )));
            }
        }
        Ok(())
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::conflict(2024)
    }
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (0..n).map(|r| 1.0 / ((r + 1) as f64).powf(exponent)).collect()
}

fn style_prefix(id: &str) -> String {
    let p: String = id.chars().filter(|c| c.is_alphanumeric()).collect();
    if p.is_empty() {
        "gen".into()
    } else {
        p.to_lowercase()
    }
}

fn generate_one(spec: &SynthSpec, g: &GeneratorSpec, index: usize) -> GeneratorDataset {
    let mut rng: Rng = stream(derive(spec.seed, &g.id, index as u64), 0x7379_6e74);

    // Generator-specific ranking of the shared filler words.
    let mut filler_order: Vec<usize> = (0..spec.filler_vocab).collect();
    filler_order.shuffle(&mut rng);
    let filler = WeightedIndex::new(zipf_weights(spec.filler_vocab, g.zipf_exponent))
        .expect("positive weights");
    let style = (g.style_vocab > 0).then(|| {
        WeightedIndex::new(zipf_weights(g.style_vocab, g.zipf_exponent)).expect("positive weights")
    });
    let prefix = style_prefix(&g.id);

    let mut labels: Vec<u8> = std::iter::repeat_n(0u8, g.n_true)
        .chain(std::iter::repeat_n(1u8, g.n_fake))
        .collect();
    labels.shuffle(&mut rng);

    let examples = labels
        .into_iter()
        .map(|label| {
            let s = if label == 1 { 1.0 } else { -1.0 };
            let len = rng.random_range(g.min_len..=g.max_len);
            let mut body: Vec<String> = (0..len)
                .map(|_| match &style {
                    Some(st) if rng.random::<f64>() < g.style_rate => {
                        format!("{prefix}x{}", st.sample(&mut rng))
                    }
                    _ => format!("w{}", filler_order[filler.sample(&mut rng)]),
                })
                .collect();
            let mut lead: Option<&str> = None;
            for m in &g.markers {
                let hit = rng.random::<f64>() < (1.0 + m.correlation * s) / 2.0;
                match &m.placement {
                    Placement::Presence => {
                        if hit {
                            let at = rng.random_range(1..=body.len());
                            body.insert(at, m.token.clone());
                        }
                    }
                    Placement::Lead => {
                        if hit {
                            lead = Some(&m.token);
                        } else {
                            let at = rng.random_range(1..=body.len());
                            body.insert(at, m.token.clone());
                        }
                    }
                    Placement::Pair { partner } => {
                        let first = rng.random::<bool>();
                        let second = if hit { first } else { !first };
                        for (present, tok) in [(first, &m.token), (second, partner)] {
                            if present {
                                let at = rng.random_range(1..=body.len());
                                body.insert(at, tok.clone());
                            }
                        }
                    }
                }
            }
            if let Some(tok) = lead {
                body.insert(0, tok.to_string());
            }
            NewsExample {
                text: body.join(" "),
                label,
                generator: g.id.clone(),
            }
        })
        .collect();
    GeneratorDataset {
        generator: g.id.clone(),
        examples,
    }
}

/// Builds one dataset per generator, deterministic in `spec.seed`.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<GeneratorDataset>> {
    spec.validate()?;
    Ok(spec
        .generators
        .iter()
        .enumerate()
        .map(|(i, g)| generate_one(spec, g, i))
        .collect())
}
