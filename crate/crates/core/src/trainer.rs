//! Training regimes: the two-phase prompt pipeline (prompt + classifier, then
//! classifier only) and the full fine-tuning baselines.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{GeneratorDataset, Vocabulary};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, AccuracyMatrix};
use crate::prompt::{init_prompt, PositionMode, PromptBank};
use crate::rng::{derive, stream};
use crate::tensor::{Adam, Gradients, Parameter, Tape, Tensor, Var};

pub use crate::tensor::bce_loss;

/// Prompt lengths swept by the ablation grid.
pub const PROMPT_LENGTHS: [usize; 5] = [4, 8, 12, 16, 20];

/// Binary head `ŷ = σ(W·h + b)`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub w: Parameter,
    pub b: Parameter,
}

impl Classifier {
    pub fn new(d: usize) -> Self {
        Classifier {
            w: Parameter::new(Tensor::zeros(&[1, d])),
            b: Parameter::new(Tensor::zeros(&[1])),
        }
    }

    pub fn d(&self) -> usize {
        self.w.value().cols()
    }

    /// `pooled` is `1×d`; returns a `1×1` probability.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, pooled: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let z = tape.matmul_t(pooled, w)?;
        let z = tape.add_row(z, b)?;
        Ok(tape.sigmoid(z))
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w, &mut self.b]
    }
}

pub fn classify(pooled: &Tensor, clf: &Classifier) -> Result<f64> {
    if pooled.len() != clf.d() {
        return Err(Error::dim("classify", pooled.shape(), clf.w.value().shape()));
    }
    let z: f64 = pooled
        .data()
        .iter()
        .zip(clf.w.value().data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + clf.b.value().data()[0];
    Ok(crate::tensor::sigmoid(z))
}

/// Probabilities at or above one half are class 1.
pub fn predict(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_len: usize,
    /// Permits prompt lengths outside [`PROMPT_LENGTHS`].
    pub custom_prompt_len: bool,
    pub position_mode: PositionMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            prompt_len: 12,
            custom_prompt_len: false,
            position_mode: PositionMode::Prepend,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.prompt_len == 0 {
            return Err(Error::config("prompt_len must be at least 1"));
        }
        if !self.custom_prompt_len && !PROMPT_LENGTHS.contains(&self.prompt_len) {
            return Err(Error::config(format!(
                "prompt_len must be one of {PROMPT_LENGTHS:?}, got {}",
                self.prompt_len
            )));
        }
        Ok(())
    }
}

/// One generator's examples as compact token ids plus a train/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTask {
    pub generator: String,
    /// Non-PAD ids, at most `n_max` per example.
    pub ids: Vec<Vec<usize>>,
    pub labels: Vec<u8>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl EncodedTask {
    pub fn new(
        dataset: &GeneratorDataset,
        vocab: &Vocabulary,
        n_max: usize,
        repeat: usize,
        seed: u64,
    ) -> Result<Self> {
        let split = dataset.split(repeat, seed)?;
        let ids = dataset
            .examples
            .iter()
            .map(|e| {
                let t = vocab.tokenize(&e.text, n_max);
                t.ids
                    .iter()
                    .zip(&t.mask)
                    .filter(|(_, m)| **m)
                    .map(|(id, _)| *id as usize)
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(EncodedTask {
            generator: dataset.generator.clone(),
            ids,
            labels: dataset.labels(),
            train: split.train,
            test: split.test,
        })
    }

    /// The union of several tasks' splits, used by the pooled regime.
    pub fn union(tasks: &[EncodedTask]) -> EncodedTask {
        let mut out = EncodedTask {
            generator: "all".into(),
            ids: Vec::new(),
            labels: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for t in tasks {
            let off = out.ids.len();
            out.ids.extend(t.ids.iter().cloned());
            out.labels.extend(&t.labels);
            out.train.extend(t.train.iter().map(|i| i + off));
            out.test.extend(t.test.iter().map(|i| i + off));
        }
        out
    }
}

pub fn encode_tasks(
    datasets: &[GeneratorDataset],
    vocab: &Vocabulary,
    n_max: usize,
    repeat: usize,
    seed: u64,
) -> Result<Vec<EncodedTask>> {
    datasets
        .iter()
        .map(|d| EncodedTask::new(d, vocab, n_max, repeat, seed))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub encoder: EncoderState,
    pub bank: PromptBank,
    pub classifier: Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Prompt,
    Classifier,
    Full,
}

/// Per-phase training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub generator: String,
    pub phase: Phase,
    pub epoch_losses: Vec<f64>,
    /// Rows of the composed input (`k·m + n_max`) during this phase.
    pub composed_rows: usize,
}

impl ModelState {
    pub fn new(encoder: EncoderState, position_mode: PositionMode) -> Self {
        let d = encoder.d_model();
        ModelState {
            encoder,
            bank: PromptBank::new(position_mode),
            classifier: Classifier::new(d),
        }
    }

    /// Rows of `X′` for an `n_max`-padded article under the current bank.
    pub fn composed_rows(&self) -> usize {
        self.bank.layout(self.encoder.config().n_max).total_rows
    }

    /// Records the forward pass for one article and returns the pooled
    /// `1×d` representation. Only real article rows are computed; each keeps
    /// its position in the padded layout.
    pub fn pooled<'a>(&'a self, tape: &mut Tape<'a>, ids: &[usize]) -> Result<Var> {
        let n_max = self.encoder.config().n_max;
        if ids.is_empty() {
            return Err(Error::contract("article has no tokens"));
        }
        if ids.len() > n_max {
            return Err(Error::Capacity {
                limit: n_max,
                requested: ids.len(),
            });
        }
        let layout = self.bank.layout(n_max);
        let mut segments: Vec<(usize, Option<usize>)> = layout
            .prompt_blocks
            .iter()
            .map(|(i, rows)| (rows.start, Some(*i)))
            .collect();
        segments.push((layout.article_span.start, None));
        segments.sort_by_key(|s| s.0);

        let mut parts = Vec::with_capacity(segments.len());
        let mut positions = Vec::with_capacity(ids.len() + self.bank.prompt_rows());
        let mut article_rows = Vec::with_capacity(ids.len());
        for (start, seg) in segments {
            match seg {
                Some(i) => {
                    let p = &self.bank.prompts()[i];
                    parts.push(tape.param(&p.matrix));
                    positions.extend(start..start + p.len());
                }
                None => {
                    parts.push(self.encoder.embed(tape, ids)?);
                    article_rows.extend(positions.len()..positions.len() + ids.len());
                    positions.extend(start..start + ids.len());
                }
            }
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let h = self.encoder.forward(tape, x, &positions)?;
        tape.mean_rows(h, &article_rows)
    }

    pub fn predict_proba(&self, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::inference();
        let pooled = self.pooled(&mut tape, ids)?;
        let p = self.classifier.forward(&mut tape, pooled)?;
        Ok(tape.value(p).item())
    }

    /// Accuracy (%) over `task`'s test split with the full current bank.
    pub fn evaluate(&self, task: &EncodedTask) -> Result<f64> {
        let mut preds = Vec::with_capacity(task.test.len());
        let mut labels = Vec::with_capacity(task.test.len());
        for &i in &task.test {
            preds.push(predict(self.predict_proba(&task.ids[i])?));
            labels.push(task.labels[i]);
        }
        accuracy(&preds, &labels)
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.encoder.params_mut();
        out.extend(self.bank.params_mut());
        out.extend(self.classifier.params_mut());
        out
    }
}

fn epoch_order(cfg: &TrainConfig, task: &EncodedTask, phase: Phase, epoch: usize) -> Vec<usize> {
    let tag = match phase {
        Phase::Prompt => 1,
        Phase::Classifier => 2,
        Phase::Full => 3,
    };
    let mut rng = stream(
        derive(cfg.seed, &task.generator, (epoch as u64) << 2 | tag),
        0x6570_6f63,
    );
    let mut order = task.train.clone();
    order.shuffle(&mut rng);
    order
}

/// Minibatch Adam on the end-to-end forward. Whichever parameters are
/// trainable in `model` get updated.
fn train_end_to_end(
    model: &mut ModelState,
    task: &EncodedTask,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<StageLog> {
    let mut adam = Adam::with_lr(cfg.lr);
    let mut log = StageLog {
        generator: task.generator.clone(),
        phase,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        composed_rows: model.composed_rows(),
    };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg, task, phase, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let pooled = model.pooled(&mut tape, &task.ids[i])?;
                let p = model.classifier.forward(&mut tape, pooled)?;
                let loss = tape.bce(p, f64::from(task.labels[i]))?;
                total += tape.value(loss).item();
                let loss = tape.scale(loss, scale);
                tape.backward(loss, &mut grads)?;
            }
            let mut params = model.all_params_mut();
            for p in params.iter_mut() {
                p.absorb(&grads, 1.0);
            }
            adam.step(params.iter_mut().map(|p| &mut **p));
            for p in params {
                p.zero_grad();
            }
        }
        log.epoch_losses.push(total / order.len().max(1) as f64);
    }
    Ok(log)
}

/// Trains the newest prompt jointly with the classifier over a frozen
/// encoder and frozen earlier prompts.
pub fn train_prompt_for_task(
    model: &mut ModelState,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    if !model.encoder.is_frozen() {
        return Err(Error::contract("prompt training needs a frozen encoder"));
    }
    let prompts = model.bank.prompts();
    let Some((newest, earlier)) = prompts.split_last() else {
        return Err(Error::contract("no prompt to train; append one first"));
    };
    if let Some(open) = earlier.iter().find(|p| !p.is_frozen()) {
        return Err(Error::contract(format!(
            "earlier prompt {:?} is not frozen",
            open.generator_id()
        )));
    }
    if newest.is_frozen() {
        return Err(Error::contract(format!(
            "newest prompt {:?} is already frozen",
            newest.generator_id()
        )));
    }
    train_end_to_end(model, task, cfg, Phase::Prompt)
}

/// Re-tunes `W, b` alone. Everything upstream is frozen, so pooled features
/// are computed once and reused across epochs.
pub fn finetune_classifier(
    model: &mut ModelState,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<StageLog> {
    cfg.validate()?;
    if !model.encoder.is_frozen() {
        return Err(Error::contract("classifier tuning needs a frozen encoder"));
    }
    if let Some(open) = model.bank.prompts().iter().find(|p| !p.is_frozen()) {
        return Err(Error::contract(format!(
            "prompt {:?} is not frozen",
            open.generator_id()
        )));
    }
    let mut log = StageLog {
        generator: task.generator.clone(),
        phase: Phase::Classifier,
        epoch_losses: Vec::with_capacity(cfg.epochs),
        composed_rows: model.composed_rows(),
    };
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let mut features = vec![None; task.ids.len()];
    for &i in &task.train {
        let mut tape = Tape::inference();
        let pooled = model.pooled(&mut tape, &task.ids[i])?;
        features[i] = Some(tape.value(pooled).clone());
    }
    let clf = &mut model.classifier;
    let mut adam = Adam::with_lr(cfg.lr);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg, task, Phase::Classifier, epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let feat = features[i].as_ref().expect("train feature cached");
                let mut tape = Tape::new();
                let x = tape.constant_ref(feat);
                let p = clf.forward(&mut tape, x)?;
                let loss = tape.bce(p, f64::from(task.labels[i]))?;
                total += tape.value(loss).item();
                let loss = tape.scale(loss, scale);
                tape.backward(loss, &mut grads)?;
            }
            for p in clf.params_mut() {
                p.absorb(&grads, 1.0);
            }
            adam.step(clf.params_mut());
            for p in clf.params_mut() {
                p.zero_grad();
            }
        }
        log.epoch_losses.push(total / order.len().max(1) as f64);
    }
    Ok(log)
}

/// Appends a fresh prompt for `task`, trains it with the classifier, freezes
/// it, then re-tunes the classifier alone.
pub fn deld_stage(
    model: &mut ModelState,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<[StageLog; 2]> {
    let prompt = init_prompt(&task.generator, cfg.prompt_len, &model.encoder, cfg.seed)?;
    model.bank.push(prompt)?;
    let first = train_prompt_for_task(model, task, cfg)?;
    model.bank.freeze_prompt(&task.generator)?;
    let second = finetune_classifier(model, task, cfg)?;
    Ok([first, second])
}

/// Outcome of a sequential regime.
#[derive(Clone, Debug)]
pub struct SeqOutcome {
    pub model: ModelState,
    pub matrix: AccuracyMatrix,
    pub logs: Vec<StageLog>,
}

fn check_tasks(tasks: &[EncodedTask]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::contract("at least one dataset is required"));
    }
    Ok(())
}

fn record_stage(model: &ModelState, tasks: &[EncodedTask], k: usize, m: &mut AccuracyMatrix) -> Result<()> {
    for (i, t) in tasks.iter().enumerate() {
        m.set(i, k, model.evaluate(t)?)?;
    }
    Ok(())
}

/// Sequential prompt regime: one prompt per task over the frozen encoder.
pub fn run_deld_seq(
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    cfg: &TrainConfig,
) -> Result<SeqOutcome> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let mut model = ModelState::new(encoder.clone().freeze(), cfg.position_mode);
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut logs = Vec::with_capacity(2 * tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        logs.extend(deld_stage(&mut model, task, cfg)?);
        record_stage(&model, tasks, k, &mut matrix)?;
        log::info!(
            "deld stage {}/{} ({}) done",
            k + 1,
            tasks.len(),
            task.generator
        );
    }
    Ok(SeqOutcome {
        model,
        matrix,
        logs,
    })
}

/// Full fine-tuning of encoder and classifier on each task in turn.
pub fn run_ft_seq(
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    cfg: &TrainConfig,
) -> Result<SeqOutcome> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let mut model = ModelState::new(encoder.clone().unfreeze(), cfg.position_mode);
    let mut matrix = AccuracyMatrix::new(tasks.len());
    let mut logs = Vec::with_capacity(tasks.len());
    for (k, task) in tasks.iter().enumerate() {
        logs.push(train_end_to_end(&mut model, task, cfg, Phase::Full)?);
        record_stage(&model, tasks, k, &mut matrix)?;
        log::info!(
            "ft-seq stage {}/{} ({}) done",
            k + 1,
            tasks.len(),
            task.generator
        );
    }
    Ok(SeqOutcome {
        model,
        matrix,
        logs,
    })
}

/// Outcome of a non-sequential regime: one test accuracy per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependentOutcome {
    pub accuracies: Vec<f64>,
    pub logs: Vec<StageLog>,
}

fn train_single(
    encoder: &EncoderState,
    task: &EncodedTask,
    cfg: &TrainConfig,
    with_deld: bool,
) -> Result<(ModelState, Vec<StageLog>)> {
    if with_deld {
        let mut model = ModelState::new(encoder.clone().freeze(), cfg.position_mode);
        let logs = deld_stage(&mut model, task, cfg)?;
        Ok((model, logs.to_vec()))
    } else {
        let mut model = ModelState::new(encoder.clone().unfreeze(), cfg.position_mode);
        let log = train_end_to_end(&mut model, task, cfg, Phase::Full)?;
        Ok((model, vec![log]))
    }
}

/// One model on the union of all training splits, tested per task. With
/// `with_deld`, a single prompt is trained on the pooled data instead.
pub fn run_ft_all(
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    cfg: &TrainConfig,
    with_deld: bool,
) -> Result<IndependentOutcome> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let pooled = EncodedTask::union(tasks);
    let (model, logs) = train_single(encoder, &pooled, cfg, with_deld)?;
    let accuracies = tasks
        .iter()
        .map(|t| model.evaluate(t))
        .collect::<Result<_>>()?;
    Ok(IndependentOutcome { accuracies, logs })
}

/// An independent model per task, each tested on its own split. With
/// `with_deld`, each task gets its own prompt over the shared frozen encoder.
pub fn run_ft_per(
    encoder: &EncoderState,
    tasks: &[EncodedTask],
    cfg: &TrainConfig,
    with_deld: bool,
) -> Result<IndependentOutcome> {
    cfg.validate()?;
    check_tasks(tasks)?;
    let mut accuracies = Vec::with_capacity(tasks.len());
    let mut logs = Vec::new();
    for task in tasks {
        let (model, l) = train_single(encoder, task, cfg, with_deld)?;
        accuracies.push(model.evaluate(task)?);
        logs.extend(l);
    }
    Ok(IndependentOutcome { accuracies, logs })
}
