//! Experiment orchestration behind the command-line tool: configuration,
//! data preparation, the regime runners, prompt characterization, forward
//! benchmarks and atomic report output.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    load_jsonl, synth_generate, write_jsonl, GeneratorDataset, SynthSpec, Vocabulary, DEFAULT_REPEATS,
};
use crate::encoder::{pretrain_backbone, EncoderConfig, EncoderState, PretrainConfig, PretrainLog};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::{
    ablate_prompts, forgetting_csv, order_robustness, reports_table, AblationGrid, AccuracyMatrix,
    ExperimentReport, OrderReport, OrderResult, TRAINING_ORDERS, REPORT_SCHEMA_VERSION,
};
use crate::prompt::{PositionMode, PromptBank};
use crate::rng::{derive, stream};
use crate::trainer::{
    encode_tasks, run_deld_seq, run_ft_all, run_ft_per, run_ft_seq, EncodedTask, ModelState,
    StageLog, TrainConfig, PROMPT_LENGTHS,
};
use crate::zeroshot::{evaluate_zero_shot, ZeroShotConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Sequential prompts over the frozen encoder (`ft-seq` with DELD).
    DeldSeq,
    FtSeq,
    FtAll,
    FtPer,
    ZeroShot,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "deld-seq" => Regime::DeldSeq,
            "ft-seq" => Regime::FtSeq,
            "ft-all" => Regime::FtAll,
            "ft-per" => Regime::FtPer,
            "zero-shot" => Regime::ZeroShot,
            other => {
                return Err(Error::config(format!(
                    "unknown regime {other:?} (expected deld-seq, ft-seq, ft-all, ft-per or zero-shot)"
                )))
            }
        })
    }
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::DeldSeq | Regime::FtSeq => "ft-seq",
            Regime::FtAll => "ft-all",
            Regime::FtPer => "ft-per",
            Regime::ZeroShot => "zero-shot",
        }
    }

    pub fn is_sequential(self) -> bool {
        matches!(self, Regime::DeldSeq | Regime::FtSeq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Jsonl(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub lengths: Vec<usize>,
    pub positions: Vec<PositionMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            lengths: PROMPT_LENGTHS.to_vec(),
            positions: vec![PositionMode::Prepend, PositionMode::Append],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub lengths: Vec<usize>,
    pub layers: Vec<usize>,
    pub samples: usize,
    /// Forward passes per timing sample.
    pub inner: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            d_model: 64,
            heads: 4,
            lengths: vec![64, 128, 256],
            layers: vec![2, 4],
            samples: 5,
            inner: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub regime: Regime,
    /// Turns `ft-seq` into `deld-seq` and switches `ft-all`/`ft-per` to
    /// prompt tuning over the frozen encoder.
    pub with_deld: bool,
    pub data: DataSource,
    /// Training order as generator ids; defaults to the data's order.
    pub order: Option<Vec<String>>,
    /// Split repeats averaged per run; 1 is the fast mode.
    pub repeats: usize,
    /// Directory holding `encoder.ckpt` and `vocab.txt` from a previous
    /// `pretrain`; when unset the encoder is pre-trained in-process.
    pub pretrained: Option<PathBuf>,
    pub ablation: AblationConfig,
    pub zero_shot: ZeroShotConfig,
    pub bench: BenchConfig,
    pub top_n: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            regime: Regime::DeldSeq,
            with_deld: false,
            data: DataSource::Synthetic(SynthSpec::default()),
            order: None,
            repeats: DEFAULT_REPEATS,
            pretrained: None,
            ablation: AblationConfig::default(),
            zero_shot: ZeroShotConfig::default(),
            bench: BenchConfig::default(),
            top_n: 10,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Re-derives every component seed from one master seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.encoder.seed = derive(seed, "encoder", 0);
        self.pretrain.seed = derive(seed, "pretrain", 0);
        self.train.seed = derive(seed, "train", 0);
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = derive(seed, "corpus", 0);
        }
    }

    /// `ft-seq` with DELD is the sequential prompt regime.
    pub fn effective_regime(&self) -> Regime {
        match (self.regime, self.with_deld) {
            (Regime::FtSeq, true) => Regime::DeldSeq,
            (r, _) => r,
        }
    }

    pub fn uses_deld(&self) -> bool {
        self.with_deld || self.regime == Regime::DeldSeq
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (what, r) in [
            ("encoder", self.encoder.validate()),
            ("train", self.train.validate()),
            ("zero_shot", self.zero_shot.validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        }
        if self.repeats == 0 {
            problems.push("repeats must be at least 1".into());
        }
        if self.top_n == 0 {
            problems.push("top_n must be at least 1".into());
        }
        if let DataSource::Synthetic(spec) = &self.data {
            if let Err(e) = spec.validate() {
                problems.push(format!("data: {e}"));
            }
        }
        if let Some(order) = &self.order {
            let mut sorted = order.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != order.len() {
                problems.push("order repeats a generator id".into());
            }
        }
        let worst = self.train.prompt_len * self.max_stages();
        if self.uses_deld() && worst > self.encoder.prompt_capacity {
            problems.push(format!(
                "{worst} prompt rows exceed prompt_capacity {}",
                self.encoder.prompt_capacity
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn max_stages(&self) -> usize {
        match (&self.order, &self.data) {
            (Some(o), _) => o.len(),
            (None, DataSource::Synthetic(s)) => s.generators.len(),
            (None, DataSource::Jsonl(_)) => 1,
        }
    }
}

/// Datasets in training order.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<GeneratorDataset>> {
    let data = match &cfg.data {
        DataSource::Synthetic(spec) => synth_generate(spec)?,
        DataSource::Jsonl(path) => load_jsonl(path)?,
    };
    match &cfg.order {
        Some(order) => reorder(&data, order),
        None => Ok(data),
    }
}

/// Applies an order that must be a bijection over the dataset ids.
pub fn reorder<T: Clone + HasGenerator>(items: &[T], order: &[impl AsRef<str>]) -> Result<Vec<T>> {
    if order.len() != items.len() {
        return Err(Error::config(format!(
            "order names {} generators but the data has {}",
            order.len(),
            items.len()
        )));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let id = id.as_ref();
        let item = items
            .iter()
            .find(|d| d.generator() == id)
            .ok_or_else(|| Error::config(format!("order names unknown generator {id:?}")))?;
        if out.iter().any(|o: &T| o.generator() == id) {
            return Err(Error::config(format!("order repeats generator {id:?}")));
        }
        out.push(item.clone());
    }
    Ok(out)
}

pub trait HasGenerator {
    fn generator(&self) -> &str;
}

impl HasGenerator for GeneratorDataset {
    fn generator(&self) -> &str {
        &self.generator
    }
}

impl HasGenerator for EncodedTask {
    fn generator(&self) -> &str {
        &self.generator
    }
}

/// Vocabulary plus the frozen-able backbone shared by all regimes.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub vocab: Vocabulary,
    pub encoder: EncoderState,
    pub log: PretrainLog,
}

pub fn pretrain(cfg: &RunConfig, datasets: &[GeneratorDataset]) -> Result<Backbone> {
    if let Some(dir) = &cfg.pretrained {
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let encoder = Checkpoint::load(&dir.join("encoder.ckpt"))?.encoder.unfreeze();
        if encoder.config().vocab_size < vocab.len() {
            return Err(Error::config("pretrained vocabulary is larger than the encoder's"));
        }
        return Ok(Backbone {
            vocab,
            encoder,
            log: PretrainLog::default(),
        });
    }
    let texts: Vec<&str> = datasets
        .iter()
        .flat_map(|d| d.examples.iter().map(|e| e.text.as_str()))
        .collect();
    let vocab = Vocabulary::build(texts.iter().copied(), cfg.encoder.vocab_size)?;
    let corpus: Vec<Vec<u32>> = texts
        .iter()
        .map(|t| vocab.tokenize(t, cfg.encoder.n_max).ids)
        .collect();
    let encoder = EncoderState::init(cfg.encoder.clone())?;
    let (encoder, log) = pretrain_backbone(encoder, &corpus, &cfg.pretrain)?;
    Ok(Backbone {
        vocab,
        encoder,
        log,
    })
}

/// Everything produced by one repeat of one regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub per_dataset: Vec<f64>,
    pub matrix: Option<AccuracyMatrix>,
    pub logs: Vec<StageLog>,
}

/// Runs `regime` once on already-encoded tasks. Sequential regimes also
/// return the final model.
pub fn run_regime(
    regime: Regime,
    with_deld: bool,
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    train: &TrainConfig,
) -> Result<(RepeatResult, Option<ModelState>)> {
    let (per_dataset, matrix, logs, model) = match regime {
        Regime::DeldSeq | Regime::FtSeq => {
            let out = if regime == Regime::DeldSeq || with_deld {
                run_deld_seq(encoder, tasks, train)?
            } else {
                run_ft_seq(encoder, tasks, train)?
            };
            (
                out.matrix.final_accuracies()?,
                Some(out.matrix),
                out.logs,
                Some(out.model),
            )
        }
        Regime::FtAll => {
            let out = run_ft_all(encoder, tasks, train, with_deld)?;
            (out.accuracies, None, out.logs, None)
        }
        Regime::FtPer => {
            let out = run_ft_per(encoder, tasks, train, with_deld)?;
            (out.accuracies, None, out.logs, None)
        }
        Regime::ZeroShot => {
            return Err(Error::config("zero-shot is not a training regime"));
        }
    };
    Ok((
        RepeatResult {
            repeat: 0,
            per_dataset,
            matrix,
            logs,
        },
        model,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report: ExperimentReport,
    pub repeats: Vec<RepeatResult>,
    pub pretrain_losses: Vec<f64>,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub backbone: Backbone,
    /// Final model of the last repeat (sequential regimes only).
    pub model: Option<ModelState>,
}

/// Runs the configured regime over `repeats` splits and averages them.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let regime = cfg.effective_regime();
    if regime == Regime::ZeroShot {
        return Err(Error::config("use the zero-shot command for the zero-shot regime"));
    }
    let datasets = load_datasets(cfg)?;
    let backbone = pretrain(cfg, &datasets)?;
    let n_max = backbone.encoder.config().n_max;
    let mut repeats = Vec::with_capacity(cfg.repeats);
    let mut last_model = None;
    for r in 0..cfg.repeats {
        let tasks = encode_tasks(&datasets, &backbone.vocab, n_max, r, cfg.seed)?;
        let train = TrainConfig {
            seed: cfg.train.seed.wrapping_add(r as u64),
            ..cfg.train.clone()
        };
        let (mut result, model) = run_regime(regime, cfg.with_deld, &backbone.encoder, &tasks, &train)?;
        result.repeat = r;
        repeats.push(result);
        last_model = model;
    }
    let generators: Vec<String> = datasets.iter().map(|d| d.generator.clone()).collect();
    let per_dataset = mean_columns(repeats.iter().map(|r| r.per_dataset.as_slice()));
    let mut report = ExperimentReport::new(
        regime.name(),
        cfg.uses_deld(),
        generators,
        per_dataset,
        cfg.seed,
    )?;
    if regime.is_sequential() {
        let matrices: Vec<AccuracyMatrix> =
            repeats.iter().filter_map(|r| r.matrix.clone()).collect();
        report = report.with_matrix(AccuracyMatrix::mean_of(&matrices)?)?;
    }
    report.config = serde_json::to_value(cfg)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report: RunReport {
            report,
            repeats,
            pretrain_losses: backbone.log.losses.clone(),
        },
        backbone,
        model: last_model,
    })
}

fn mean_columns<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        n += 1;
    }
    sum.iter().map(|s| s / n.max(1) as f64).collect()
}

/// Writes pretty JSON atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Removes `wall_clock_secs` fields at any depth, for comparing reports.
pub fn strip_wall_clock(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            map.remove("wall_clock_secs");
            map.values_mut().for_each(strip_wall_clock);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_wall_clock),
        _ => {}
    }
}

/// `synth`: writes the corpus as JSONL.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let datasets = load_datasets(cfg)?;
    let path = cfg.out_dir.join("corpus.jsonl");
    write_jsonl(&path, &datasets)?;
    if let DataSource::Synthetic(spec) = &cfg.data {
        write_json(&cfg.out_dir.join("synth_spec.json"), spec)?;
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub losses: Vec<f64>,
    pub vocab_size: usize,
    pub wall_clock_secs: f64,
}

/// `pretrain`: writes `encoder.ckpt`, `vocab.txt` and `pretrain.json`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let datasets = load_datasets(cfg)?;
    let cfg_fresh = RunConfig {
        pretrained: None,
        ..cfg.clone()
    };
    let backbone = pretrain(&cfg_fresh, &datasets)?;
    Checkpoint::encoder_only(backbone.encoder.clone()).save(&cfg.out_dir.join("encoder.ckpt"))?;
    backbone.vocab.save(&cfg.out_dir.join("vocab.txt"))?;
    let report = PretrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: serde_json::to_value(cfg)?,
        losses: backbone.log.losses,
        vocab_size: backbone.vocab.len(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join("pretrain.json"), &report)?;
    Ok(report)
}

/// `run`: writes `run.json`, `run.txt`, and for sequential regimes
/// `forgetting.csv`; prompt regimes also save `model.ckpt` and `vocab.txt`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunReport> {
    let out = execute(cfg)?;
    let dir = &cfg.out_dir;
    write_json(&dir.join("run.json"), &out.report)?;
    let mut text = reports_table(std::slice::from_ref(&out.report.report));
    if let Some(m) = &out.report.report.matrix {
        text.push('\n');
        text.push_str(&m.to_table(&out.report.report.generators));
        if m.size() >= 2 {
            write_text(
                &dir.join("forgetting.csv"),
                &forgetting_csv(m, &out.report.report.generators)?,
            )?;
        }
    }
    write_text(&dir.join("run.txt"), &text)?;
    if let Some(model) = out.model {
        if !model.bank.is_empty() {
            Checkpoint::from(model).save(&dir.join("model.ckpt"))?;
            out.backbone.vocab.save(&dir.join("vocab.txt"))?;
        }
    }
    Ok(out.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub grid: AblationGrid,
    pub wall_clock_secs: f64,
}

/// `ablate`: the prompt length × position grid on the first split.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let started = Instant::now();
    let datasets = load_datasets(cfg)?;
    let backbone = pretrain(cfg, &datasets)?;
    let tasks = encode_tasks(&datasets, &backbone.vocab, cfg.encoder.n_max, 0, cfg.seed)?;
    let train = TrainConfig {
        custom_prompt_len: true,
        ..cfg.train.clone()
    };
    let grid = ablate_prompts(
        &backbone.encoder,
        &tasks,
        &cfg.ablation.lengths,
        &cfg.ablation.positions,
        &train,
    )?;
    let report = AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: serde_json::to_value(cfg)?,
        grid,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join("ablation.json"), &report)?;
    write_text(&cfg.out_dir.join("ablation.txt"), &report.grid.to_table())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrdersReport {
    pub schema_version: u32,
    pub regime: String,
    pub config: serde_json::Value,
    pub orders: OrderReport,
    pub matrices: Vec<AccuracyMatrix>,
    pub wall_clock_secs: f64,
}

/// Runs a sequential regime over each of the four fixed training orders.
pub fn run_orders(
    regime: Regime,
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    train: &TrainConfig,
) -> Result<(OrderReport, Vec<AccuracyMatrix>)> {
    if !regime.is_sequential() {
        return Err(Error::config("training orders only apply to sequential regimes"));
    }
    let mut results = Vec::with_capacity(TRAINING_ORDERS.len());
    let mut matrices = Vec::with_capacity(TRAINING_ORDERS.len());
    for (i, order) in TRAINING_ORDERS.iter().enumerate() {
        let ordered = reorder(tasks, order)?;
        let (result, _) = run_regime(regime, false, encoder, &ordered, train)?;
        let matrix = result.matrix.expect("sequential regimes fill a matrix");
        results.push(OrderResult {
            name: format!("order-{}", i + 1),
            order: order.iter().map(|s| s.to_string()).collect(),
            average: matrix.average_final()?,
        });
        matrices.push(matrix);
    }
    Ok((order_robustness(results)?, matrices))
}

/// `orders`: the configured sequential regime under each fixed order.
pub fn cmd_orders(cfg: &RunConfig) -> Result<OrdersReport> {
    cfg.validate()?;
    let started = Instant::now();
    let regime = cfg.effective_regime();
    let datasets = load_datasets(cfg)?;
    let backbone = pretrain(cfg, &datasets)?;
    let tasks = encode_tasks(&datasets, &backbone.vocab, cfg.encoder.n_max, 0, cfg.seed)?;
    let (orders, matrices) = run_orders(regime, &backbone.encoder, &tasks, &cfg.train)?;
    let label = if regime == Regime::DeldSeq {
        "ft-seq w/ DELD"
    } else {
        regime.name()
    };
    let report = OrdersReport {
        schema_version: REPORT_SCHEMA_VERSION,
        regime: label.to_string(),
        config: serde_json::to_value(cfg)?,
        orders,
        matrices,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out_dir.join("orders.json"), &report)?;
    write_text(&cfg.out_dir.join("orders.txt"), &report.orders.to_table(label))?;
    Ok(report)
}

/// `zero-shot`: queries the endpoint with every test-split article.
pub fn cmd_zero_shot(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let datasets = load_datasets(cfg)?;
    let test_only = datasets
        .iter()
        .map(|d| {
            let split = d.split(0, cfg.seed)?;
            Ok(GeneratorDataset {
                generator: d.generator.clone(),
                examples: split.test.iter().map(|&i| d.examples[i].clone()).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = evaluate_zero_shot(&cfg.zero_shot, &test_only)?;
    report.seed = cfg.seed;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    write_json(&cfg.out_dir.join("zero_shot.json"), &report)?;
    write_text(&cfg.out_dir.join("zero_shot.txt"), &reports_table(std::slice::from_ref(&report)))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTokens {
    pub generator: String,
    pub tokens: Vec<TokenScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub schema_version: u32,
    pub top_n: usize,
    pub generators: Vec<GeneratorTokens>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ranks vocabulary tokens per prompt by their best cosine similarity to
/// any of the prompt's rows. Ties go to the lower token id.
pub fn characterize(
    bank: &PromptBank,
    encoder: &EncoderState,
    vocab: Option<&Vocabulary>,
    top_n: usize,
) -> Result<CharacterizationReport> {
    if top_n < 1 {
        return Err(Error::contract("top_n must be at least 1"));
    }
    if bank.is_empty() {
        return Err(Error::contract("prompt bank is empty"));
    }
    let table = encoder.token_embeddings.value();
    let n = top_n.min(table.rows());
    let generators = bank
        .prompts()
        .iter()
        .map(|p| {
            let m = p.matrix.value();
            let mut scored: Vec<(usize, f64)> = (0..table.rows())
                .map(|t| {
                    let best = (0..m.rows())
                        .map(|r| cosine(m.row(r), table.row(t)))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (t, best)
                })
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let tokens = scored
                .into_iter()
                .take(n)
                .map(|(t, score)| TokenScore {
                    token: vocab
                        .and_then(|v| v.token(t as u32))
                        .map_or_else(|| t.to_string(), str::to_string),
                    score,
                })
                .collect();
            GeneratorTokens {
                generator: p.generator_id().to_string(),
                tokens,
            }
        })
        .collect();
    Ok(CharacterizationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        top_n: n,
        generators,
    })
}

/// `characterize`: reads `model.ckpt` and `vocab.txt` from `model_dir`.
pub fn cmd_characterize(cfg: &RunConfig, model_dir: &Path) -> Result<CharacterizationReport> {
    let ck = Checkpoint::load(&model_dir.join("model.ckpt"))?;
    let vocab = Vocabulary::load(&model_dir.join("vocab.txt"))?;
    let report = characterize(&ck.bank, &ck.encoder, Some(&vocab), cfg.top_n)?;
    write_json(&cfg.out_dir.join("characterize.json"), &report)?;
    let mut text = String::new();
    for g in &report.generators {
        text.push_str(&g.generator);
        text.push('\n');
        for t in &g.tokens {
            text.push_str(&format!("  {:<24} {:.4}\n", t.token, t.score));
        }
    }
    write_text(&cfg.out_dir.join("characterize.txt"), &text)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub layers: usize,
    pub median_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub d_model: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn get(&self, n: usize, layers: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.layers == layers)
            .map(|r| r.median_secs)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,layers,median_secs\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.9}\n", r.n, r.layers, r.median_secs));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Median wall-clock of one encoder forward pass per `(n, L)` cell.
///
/// Samples are taken round-robin over the cells, so a burst of load on the
/// machine lands on every cell instead of skewing one.
pub fn bench_forward(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.contains(&0) {
        return Err(Error::contract("benchmark articles need at least one token"));
    }
    if cfg.samples == 0 || cfg.inner == 0 || cfg.layers.contains(&0) {
        return Err(Error::config("samples, inner and layers must be positive"));
    }
    let n_max = cfg.lengths.iter().copied().max().unwrap_or(1);
    let mut encoders = Vec::with_capacity(cfg.layers.len());
    for &layers in &cfg.layers {
        let enc_cfg = EncoderConfig {
            d_model: cfg.d_model,
            layers,
            heads: cfg.heads,
            ffn_dim: 2 * cfg.d_model,
            vocab_size: 256,
            n_max,
            prompt_capacity: 0,
            seed: 1,
        };
        encoders.push((layers, EncoderState::init(enc_cfg)?.freeze()));
    }
    let mut cells = Vec::new();
    for (layers, encoder) in &encoders {
        for &n in &cfg.lengths {
            cells.push((*layers, ForwardProbe::new(encoder, n)?, Vec::with_capacity(cfg.samples)));
        }
    }
    for _ in 0..cfg.samples {
        for (_, probe, times) in &mut cells {
            times.push(probe.sample(cfg.inner)?);
        }
    }
    let rows = cells
        .into_iter()
        .map(|(layers, probe, times)| BenchRow {
            n: probe.n(),
            layers,
            median_secs: median(times),
        })
        .collect();
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        d_model: cfg.d_model,
        rows,
    })
}

struct ForwardProbe<'a> {
    encoder: &'a EncoderState,
    x: crate::tensor::Tensor,
    mask: Vec<bool>,
}

impl<'a> ForwardProbe<'a> {
    /// Builds a random article of `n` rows and runs one warm-up pass.
    fn new(encoder: &'a EncoderState, n: usize) -> Result<Self> {
        let cap = encoder.config().positional_capacity();
        if n > cap {
            return Err(Error::Capacity {
                limit: cap,
                requested: n,
            });
        }
        let mut rng = stream(n as u64, 0x6265_6e63);
        let x = crate::rng::normal_tensor(&mut rng, &[n, encoder.d_model()], 1.0);
        let probe = ForwardProbe {
            encoder,
            x,
            mask: vec![true; n],
        };
        probe.encoder.encode(&probe.x, &probe.mask)?;
        Ok(probe)
    }

    fn n(&self) -> usize {
        self.mask.len()
    }

    /// Mean seconds per pass over `inner` back-to-back passes.
    fn sample(&self, inner: usize) -> Result<f64> {
        let t = Instant::now();
        for _ in 0..inner {
            std::hint::black_box(self.encoder.encode(&self.x, &self.mask)?);
        }
        Ok(t.elapsed().as_secs_f64() / inner as f64)
    }
}

/// Median seconds per forward pass over `samples` timings of `inner` passes.
pub fn time_forward(encoder: &EncoderState, n: usize, samples: usize, inner: usize) -> Result<f64> {
    let probe = ForwardProbe::new(encoder, n)?;
    let times = (0..samples).map(|_| probe.sample(inner)).collect::<Result<Vec<_>>>()?;
    Ok(median(times))
}

/// `bench`: writes `bench.csv` and `bench.json`.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let report = bench_forward(&cfg.bench)?;
    write_text(&cfg.out_dir.join("bench.csv"), &report.to_csv())?;
    write_json(&cfg.out_dir.join("bench.json"), &report)?;
    Ok(report)
}
