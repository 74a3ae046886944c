//! Acceptance suite. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits nonzero if any fails. Positional arguments select
//! criteria by id, e.g. `cargo test --test acceptance -- A5 A8`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::mock::{self, Reply};
use deld_core::checkpoint::{encoder_bytes, tensor_bytes};
use deld_core::corpus::{GeneratorDataset, SynthSpec};
use deld_core::encoder::{EncoderConfig, EncoderState, PretrainConfig};
use deld_core::harness::{
    self, bench_forward, cmd_ablate, cmd_run, load_datasets, reorder, strip_wall_clock,
    BenchConfig, DataSource, RunConfig,
};
use deld_core::metrics::{forgetting, order_robustness, AccuracyMatrix, OrderResult, TRAINING_ORDERS};
use deld_core::prompt::init_prompt;
use deld_core::rng::{normal_tensor, stream};
use deld_core::trainer::{
    encode_tasks, finetune_classifier, run_deld_seq, run_ft_seq, train_prompt_for_task,
    EncodedTask, SeqOutcome, PROMPT_LENGTHS,
};
use deld_core::zeroshot::{build_prompt, evaluate_zero_shot, ZeroShotConfig, SYSTEM_PROMPT};
use deld_core::{Gradients, ModelState, PositionMode, Tape, Tensor, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

/// The calibrated conflict suite: four generators at the reference class
/// counts, d=64, two layers, 12-row prompts, 10 epochs.
fn suite_config() -> RunConfig {
    RunConfig {
        seed: 1,
        encoder: EncoderConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            vocab_size: 2000,
            n_max: 32,
            prompt_capacity: 80,
            seed: 5,
        },
        pretrain: PretrainConfig::default(),
        train: TrainConfig::default(),
        data: DataSource::Synthetic(SynthSpec::conflict(2024)),
        ..RunConfig::default()
    }
}

struct Suite {
    encoder: EncoderState,
    tasks: Vec<EncodedTask>,
    train: TrainConfig,
    first_order: Option<(SeqOutcome, SeqOutcome, f64)>,
}

impl Suite {
    fn prepare() -> Result<Self, String> {
        let cfg = suite_config();
        let datasets = load_datasets(&cfg).map_err(fail)?;
        let backbone = harness::pretrain(&cfg, &datasets).map_err(fail)?;
        let tasks = encode_tasks(&datasets, &backbone.vocab, cfg.encoder.n_max, 0, cfg.seed)
            .map_err(fail)?;
        Ok(Suite {
            encoder: backbone.encoder,
            tasks,
            train: cfg.train,
            first_order: None,
        })
    }

    fn both(&self, tasks: &[EncodedTask]) -> Result<(SeqOutcome, SeqOutcome), String> {
        let deld = run_deld_seq(&self.encoder, tasks, &self.train).map_err(fail)?;
        let ft = run_ft_seq(&self.encoder, tasks, &self.train).map_err(fail)?;
        Ok((deld, ft))
    }

    /// DELD and FT-Seq under the first fixed order, with elapsed seconds
    /// including suite preparation.
    fn first_order(&mut self, prep_secs: f64) -> Result<&(SeqOutcome, SeqOutcome, f64), String> {
        if self.first_order.is_none() {
            let t = Instant::now();
            let ordered = reorder(&self.tasks, &TRAINING_ORDERS[0]).map_err(fail)?;
            let (d, f) = self.both(&ordered)?;
            self.first_order = Some((d, f, prep_secs + t.elapsed().as_secs_f64()));
        }
        Ok(self.first_order.as_ref().unwrap())
    }
}

struct Ctx {
    suite: Option<(Suite, f64)>,
}

impl Ctx {
    fn suite(&mut self) -> Result<&mut (Suite, f64), String> {
        if self.suite.is_none() {
            let t = Instant::now();
            let s = Suite::prepare()?;
            self.suite = Some((s, t.elapsed().as_secs_f64()));
        }
        Ok(self.suite.as_mut().unwrap())
    }
}

fn a1_gradients(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let encoder = EncoderState::init(EncoderConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 50,
        n_max: 6,
        prompt_capacity: 4,
        seed: 21,
    })
    .map_err(fail)?;
    let mut model = ModelState::new(encoder, PositionMode::Prepend);
    for (id, seed) in [("old", 1), ("new", 2)] {
        let p = init_prompt(id, 2, &model.encoder, seed).map_err(fail)?;
        model.bank.push(p).map_err(fail)?;
        if id == "old" {
            model.bank.freeze_prompt(id).map_err(fail)?;
        }
    }
    let mut rng = stream(31, 0);
    *model.classifier.w.value_mut() = normal_tensor(&mut rng, &[1, 8], 0.5);
    *model.classifier.b.value_mut() = Tensor::full(&[1], 0.1);
    let batch: [(&[usize], f64); 2] = [(&[5, 9, 12, 40], 1.0), (&[7, 7, 30, 3, 18, 44], 0.0)];

    let loss_on = |m: &ModelState| -> Result<f64, String> {
        let mut total = 0.0;
        for (ids, y) in batch {
            let mut t = Tape::inference();
            let pooled = m.pooled(&mut t, ids).map_err(fail)?;
            let p = m.classifier.forward(&mut t, pooled).map_err(fail)?;
            let l = t.bce(p, y).map_err(fail)?;
            total += t.value(l).item();
        }
        Ok(total)
    };

    let mut grads = Gradients::new();
    for (ids, y) in batch {
        let mut tape = Tape::new();
        let pooled = model.pooled(&mut tape, ids).map_err(fail)?;
        let p = model.classifier.forward(&mut tape, pooled).map_err(fail)?;
        let l = tape.bce(p, y).map_err(fail)?;
        tape.backward(l, &mut grads).map_err(fail)?;
    }

    let h = common::FD_STEP;
    let n_params = model.all_params_mut().len();
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for pi in 0..n_params {
        let (trainable, id, len) = {
            let ps = model.all_params_mut();
            (ps[pi].trainable(), ps[pi].id(), ps[pi].value().len())
        };
        if !trainable {
            continue;
        }
        for j in 0..len {
            let orig = model.all_params_mut()[pi].value().data()[j];
            model.all_params_mut()[pi].value_mut().data_mut()[j] = orig + h;
            let up = loss_on(&model)?;
            model.all_params_mut()[pi].value_mut().data_mut()[j] = orig - h;
            let down = loss_on(&model)?;
            model.all_params_mut()[pi].value_mut().data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(common::rel_err(analytic, numeric));
            checked += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0,
        format!("{checked} coordinates, max rel err {worst:.2e}, {secs:.1}s"),
    )
}

fn small_tasks(n_max: usize, vocab: usize, generators: usize) -> Result<(Vec<EncodedTask>, usize), String> {
    let mut spec = SynthSpec::conflict(77).scaled(0.03);
    spec.generators.truncate(generators);
    let data = deld_core::corpus::synth_generate(&spec).map_err(fail)?;
    let texts = data.iter().flat_map(|d| d.examples.iter().map(|e| e.text.as_str()));
    let v = deld_core::corpus::Vocabulary::build(texts, vocab).map_err(fail)?;
    let tasks = encode_tasks(&data, &v, n_max, 0, 3).map_err(fail)?;
    Ok((tasks, v.len()))
}

fn a2_frozen_state(_: &mut Ctx) -> Outcome {
    let (tasks, _) = small_tasks(16, 300, 3)?;
    let encoder = EncoderState::init(EncoderConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ffn_dim: 32,
        vocab_size: 300,
        n_max: 16,
        prompt_capacity: 12,
        seed: 4,
    })
    .map_err(fail)?;
    let cfg = TrainConfig {
        epochs: 2,
        prompt_len: 4,
        custom_prompt_len: true,
        ..TrainConfig::default()
    };
    let before = encoder_bytes(&encoder);

    // Stage by stage, snapshotting each prompt the moment it is frozen.
    let mut model = ModelState::new(encoder.clone().freeze(), cfg.position_mode);
    let encoder_at_freeze = encoder_bytes(&model.encoder);
    let mut snapshots = Vec::new();
    for task in &tasks {
        let p = init_prompt(&task.generator, cfg.prompt_len, &model.encoder, cfg.seed).map_err(fail)?;
        model.bank.push(p).map_err(fail)?;
        train_prompt_for_task(&mut model, task, &cfg).map_err(fail)?;
        model.bank.freeze_prompt(&task.generator).map_err(fail)?;
        snapshots.push(tensor_bytes(model.bank.newest().unwrap().matrix.value()));
        finetune_classifier(&mut model, task, &cfg).map_err(fail)?;
    }

    let out = run_deld_seq(&encoder, &tasks, &cfg).map_err(fail)?;
    let finals: Vec<Vec<u8>> = out
        .model
        .bank
        .prompts()
        .iter()
        .map(|p| tensor_bytes(p.matrix.value()))
        .collect();
    let stepwise_final: Vec<Vec<u8>> = model
        .bank
        .prompts()
        .iter()
        .map(|p| tensor_bytes(p.matrix.value()))
        .collect();
    let encoder_ok = encoder_at_freeze == encoder_bytes(&out.model.encoder)
        && encoder_at_freeze == encoder_bytes(&model.encoder)
        && before == encoder_bytes(&encoder);
    let prompts_ok = snapshots[..2] == finals[..2] && snapshots == stepwise_final;
    let same_run = finals == stepwise_final;
    check(
        encoder_ok && prompts_ok && same_run,
        format!("encoder identical: {encoder_ok}, P1/P2 identical: {prompts_ok}, stepwise run matches: {same_run}"),
    )
}

fn a3_shape_law(_: &mut Ctx) -> Outcome {
    let (n, m) = (128, 12);
    let (tasks, _) = small_tasks(n, 300, 4)?;
    let mut problems = Vec::new();
    for mode in [PositionMode::Prepend, PositionMode::Append] {
        let encoder = EncoderState::init(EncoderConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 8,
            vocab_size: 300,
            n_max: n,
            prompt_capacity: 4 * m,
            seed: 8,
        })
        .map_err(fail)?;
        let cfg = TrainConfig {
            epochs: 1,
            prompt_len: m,
            position_mode: mode,
            ..TrainConfig::default()
        };
        let out = run_deld_seq(&encoder, &tasks, &cfg).map_err(fail)?;
        for (s, log) in out.logs.iter().enumerate() {
            let k = s / 2 + 1;
            if log.composed_rows != m * k + n {
                problems.push(format!("{mode} stage {k}: logged {}", log.composed_rows));
            }
        }
        // Materialize X' for each prefix of the final bank.
        let article = Tensor::zeros(&[n, 8]);
        let mask = vec![true; n];
        let mut bank = deld_core::PromptBank::new(mode);
        for (k, p) in out.model.bank.prompts().iter().enumerate() {
            bank.push(p.clone()).map_err(fail)?;
            let rows = bank.compose_input(&article, &mask).map_err(fail)?.input.rows();
            if rows != m * (k + 1) + n {
                problems.push(format!("{mode} stage {}: composed {rows}", k + 1));
            }
        }
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "rows 140/152/164/176 at stages 1-4, both positions".into()
        } else {
            problems.join("; ")
        },
    )
}

fn a4_forgetting(ctx: &mut Ctx) -> Outcome {
    let (suite, prep) = ctx.suite()?;
    let prep = *prep;
    let (deld, ft, secs) = suite.first_order(prep)?;
    let (fd, ff) = (forgetting(&deld.matrix).map_err(fail)?, forgetting(&ft.matrix).map_err(fail)?);
    let (ad, af) = (
        deld.matrix.average_final().map_err(fail)?,
        ft.matrix.average_final().map_err(fail)?,
    );
    // the first generator itself is forgotten by full fine-tuning
    let row: Vec<f64> = (0..4).filter_map(|k| ft.matrix.get(0, k)).collect();
    let first_forgotten = row[3] < row.iter().cloned().fold(f64::MIN, f64::max);
    check(
        ff >= 15.0 && fd <= ff - 10.0 && ad >= af + 5.0 && first_forgotten && *secs < 900.0,
        format!(
            "Fgt ft-seq {ff:.2} / DELD {fd:.2}; avg ft-seq {af:.2} / DELD {ad:.2}; \
             ft-seq first task {:.1} -> {:.1}; {secs:.0}s",
            row[0], row[3]
        ),
    )
}

fn a5_forgetting_oracle(_: &mut Ctx) -> Outcome {
    let fgt = |rows: &[Vec<f64>]| forgetting(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
    let drop = fgt(&[vec![90.0, 80.0], vec![0.0, 75.0]]);
    let flat = fgt(&[vec![60.0; 3], vec![60.0; 3], vec![60.0; 3]]);
    let gain = fgt(&[vec![70.0, 85.0], vec![0.0, 50.0]]);
    check(
        drop == 10.0 && flat == 0.0 && gain == -15.0,
        format!("{drop}, {flat}, {gain}"),
    )
}

fn a6_orders(ctx: &mut Ctx) -> Outcome {
    let (suite, prep) = ctx.suite()?;
    let prep = *prep;
    let mut deld = Vec::new();
    let mut ft = Vec::new();
    let push = |v: &mut Vec<OrderResult>, i: usize, m: &AccuracyMatrix| -> Result<(), String> {
        v.push(OrderResult {
            name: format!("order-{}", i + 1),
            order: TRAINING_ORDERS[i].iter().map(|s| s.to_string()).collect(),
            average: m.average_final().map_err(fail)?,
        });
        Ok(())
    };
    {
        let (d, f, _) = suite.first_order(prep)?;
        push(&mut deld, 0, &d.matrix)?;
        push(&mut ft, 0, &f.matrix)?;
    }
    for (i, order) in TRAINING_ORDERS.iter().enumerate().skip(1) {
        let ordered = reorder(&suite.tasks, order).map_err(fail)?;
        let (d, f) = suite.both(&ordered)?;
        push(&mut deld, i, &d.matrix)?;
        push(&mut ft, i, &f.matrix)?;
    }
    let deld = order_robustness(deld).map_err(fail)?;
    let ft = order_robustness(ft).map_err(fail)?;
    let wins = deld
        .orders
        .iter()
        .zip(&ft.orders)
        .all(|(d, f)| d.average > f.average);
    let per: Vec<String> = deld
        .orders
        .iter()
        .zip(&ft.orders)
        .map(|(d, f)| format!("{:.1}/{:.1}", d.average, f.average))
        .collect();
    check(
        deld.spread <= ft.spread && wins,
        format!(
            "spread DELD {:.2} vs ft-seq {:.2}; DELD/ft-seq per order {}",
            deld.spread,
            ft.spread,
            per.join(" ")
        ),
    )
}

fn a7_ablation(_: &mut Ctx) -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut cfg = suite_config();
    cfg.data = DataSource::Synthetic(SynthSpec::conflict(2024).scaled(0.1));
    cfg.train.epochs = 3;
    cfg.out_dir = dir.path().to_path_buf();
    let report = cmd_ablate(&cfg).map_err(fail)?;
    let g = &report.grid;
    let table = std::fs::read_to_string(dir.path().join("ablation.txt")).map_err(fail)?;
    let lines: Vec<&str> = table.lines().collect();
    let header_ok = lines[0].starts_with("prompt length")
        && lines[0].contains("prepend")
        && lines[0].contains("append");
    let rows_ok = PROMPT_LENGTHS
        .iter()
        .zip(&lines[2..])
        .all(|(m, l)| l.split_whitespace().next() == Some(&m.to_string()))
        && lines.len() == 2 + PROMPT_LENGTHS.len();
    let shape_ok = g.lengths == PROMPT_LENGTHS && g.positions.len() == 2 && g.is_valid();
    let best = g.cells.iter().flatten().cloned().fold(f64::NAN, f64::max);
    check(
        shape_ok && header_ok && rows_ok,
        format!("5x2 grid in range: {shape_ok}, table layout: {}, best cell {best:.2}", header_ok && rows_ok),
    )
}

fn a8_zero_shot(_: &mut Ctx) -> Outcome {
    let golden = std::fs::read(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/system_prompt.txt"))
        .map_err(fail)?;
    let (system, user) = build_prompt("Markets rallied today.").map_err(fail)?;
    let golden_ok = system.as_bytes() == golden.as_slice()
        && SYSTEM_PROMPT.as_bytes() == golden.as_slice()
        && user == "news: Markets rallied today.";

    // The mock flags an article as disinformation when it carries a fake cue.
    let verdict = |text: &str| u8::from(text.contains("fakecue"));
    let server = mock::spawn(move |_, body| {
        let user = mock::user_message(body);
        let text = user.strip_prefix("news: ").unwrap_or(&user);
        Reply::Json(200, mock::completion(&verdict(text).to_string()))
    });
    let data = deld_core::corpus::synth_generate(&SynthSpec::conflict(5).scaled(0.05)).map_err(fail)?;
    let cfg = ZeroShotConfig {
        endpoint: server.url.clone(),
        model: "mock".into(),
        api_key_env: "DELD_ACCEPTANCE_NO_KEY".into(),
        backoff_ms: 1,
        ..ZeroShotConfig::default()
    };
    let report = evaluate_zero_shot(&cfg, &data).map_err(fail)?;
    let expected: Vec<f64> = data
        .iter()
        .map(|d: &GeneratorDataset| {
            let hits = d.examples.iter().filter(|e| verdict(&e.text) == e.label).count();
            100.0 * hits as f64 / d.len() as f64
        })
        .collect();
    let exact = report.per_dataset == expected;
    let sent = server.hits.load(std::sync::atomic::Ordering::SeqCst);
    let total: usize = data.iter().map(|d| d.len()).sum();
    check(
        golden_ok && exact && sent == total,
        format!(
            "golden prompt: {golden_ok}, accuracies exact: {exact} ({}), {sent}/{total} requests",
            expected.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn a9_determinism(_: &mut Ctx) -> Outcome {
    let root = tempfile::tempdir().map_err(fail)?;
    let mut cfg = RunConfig {
        encoder: EncoderConfig {
            d_model: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            vocab_size: 400,
            n_max: 16,
            prompt_capacity: 16,
            seed: 3,
        },
        pretrain: PretrainConfig {
            steps: 20,
            ..PretrainConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            prompt_len: 4,
            custom_prompt_len: true,
            ..TrainConfig::default()
        },
        data: DataSource::Synthetic(SynthSpec::conflict(3).scaled(0.03)),
        repeats: 2,
        ..RunConfig::default()
    };
    cfg.reseed(99);
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for name in ["first", "second"] {
        cfg.out_dir = root.path().join(name);
        cmd_run(&cfg).map_err(fail)?;
        let text = std::fs::read_to_string(cfg.out_dir.join("run.json")).map_err(fail)?;
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(fail)?;
        strip_wall_clock(&mut v);
        // out_dir is the one field allowed to differ
        v["report"]["config"]["out_dir"] = serde_json::Value::Null;
        reports.push(serde_json::to_vec(&v).map_err(fail)?);
        let other: Vec<Vec<u8>> = ["run.txt", "forgetting.csv", "model.ckpt"]
            .iter()
            .map(|f| std::fs::read(cfg.out_dir.join(f)))
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        files.push(other);
    }
    let same_report = reports[0] == reports[1];
    let same_files = files[0] == files[1];
    check(
        same_report && same_files,
        format!("run.json identical: {same_report}; run.txt, forgetting.csv, model.ckpt identical: {same_files}"),
    )
}

fn a10_complexity(_: &mut Ctx) -> Outcome {
    let cfg = BenchConfig {
        d_model: 64,
        heads: 4,
        lengths: vec![128, 256],
        layers: vec![2, 4],
        samples: 9,
        inner: 10,
    };
    let r = bench_forward(&cfg).map_err(fail)?;
    let t = |n, l| r.get(n, l).unwrap();
    let depth: Vec<f64> = cfg.lengths.iter().map(|&n| t(n, 4) / t(n, 2)).collect();
    let length: Vec<f64> = cfg.layers.iter().map(|&l| t(256, l) / t(128, l)).collect();
    let ok = depth.iter().all(|r| (1.6..=2.6).contains(r)) && length.iter().all(|&r| r >= 2.0);
    check(
        ok,
        format!(
            "L doubling ratios {:.2}/{:.2} (n=128/256), n doubling ratios {:.2}/{:.2} (L=2/4)",
            depth[0], depth[1], length[0], length[1]
        ),
    )
}

type Criterion = (&'static str, &'static str, fn(&mut Ctx) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("A1", "gradient correctness", a1_gradients),
    ("A2", "frozen-state discipline", a2_frozen_state),
    ("A3", "composed shape law", a3_shape_law),
    ("A4", "forgetting reduction", a4_forgetting),
    ("A5", "forgetting oracle", a5_forgetting_oracle),
    ("A6", "order robustness", a6_orders),
    ("A7", "ablation grid", a7_ablation),
    ("A8", "zero-shot plumbing", a8_zero_shot),
    ("A9", "determinism", a9_determinism),
    ("A10", "complexity smoke", a10_complexity),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut ctx = Ctx { suite: None };
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| f == id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run(&mut ctx);
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
