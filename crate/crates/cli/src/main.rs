use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use deld_core::harness::{self, Regime, RunConfig};
use deld_core::PositionMode;

#[derive(Parser)]
#[command(name = "deld", version, about = "Continual soft-prompt disinformation detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus as JSONL.
    Synth(Overrides),
    /// Pre-train the backbone and save it with its vocabulary.
    Pretrain(Overrides),
    /// Train and evaluate one regime.
    Run(Overrides),
    /// Prompt length by position grid.
    Ablate(Overrides),
    /// Sequential regime under each of the four fixed training orders.
    Orders(Overrides),
    /// Query a chat-completion endpoint without fine-tuning.
    ZeroShot(Overrides),
    /// Time encoder forward passes over sequence length and depth.
    Bench(Overrides),
    /// Nearest vocabulary tokens for each saved soft prompt.
    Characterize {
        #[command(flatten)]
        overrides: Overrides,
        /// Directory holding model.ckpt and vocab.txt from `run`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        top_n: Option<usize>,
    },
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// deld-seq, ft-seq, ft-all, ft-per or zero-shot.
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    with_deld: bool,
    /// Comma-separated generator ids.
    #[arg(long, value_delimiter = ',')]
    order: Option<Vec<String>>,
    #[arg(long)]
    prompt_len: Option<usize>,
    /// prepend or append.
    #[arg(long)]
    position: Option<PositionMode>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    endpoint: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.reseed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(regime) = self.regime {
            cfg.regime = regime;
        }
        if self.with_deld {
            cfg.with_deld = true;
        }
        if let Some(order) = &self.order {
            cfg.order = Some(order.iter().map(|s| s.trim().to_string()).collect());
        }
        if let Some(m) = self.prompt_len {
            cfg.train.prompt_len = m;
            cfg.train.custom_prompt_len = true;
        }
        if let Some(p) = self.position {
            cfg.train.position_mode = p;
        }
        if let Some(r) = self.repeats {
            cfg.repeats = r;
        }
        if let Some(e) = &self.endpoint {
            cfg.zero_shot.endpoint = e.clone();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir)
            .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(o) => {
            let cfg = o.resolve()?;
            let path = harness::cmd_synth(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain(o) => {
            let cfg = o.resolve()?;
            let r = harness::cmd_pretrain(&cfg)?;
            let last = r.losses.last().copied().unwrap_or(f64::NAN);
            println!("pre-trained {} steps, final loss {last:.4}", r.losses.len());
        }
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let r = harness::cmd_run(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("run.txt"))?);
            if let Some(f) = r.report.forgetting {
                println!("Fgt {f:.2}");
            }
        }
        Command::Ablate(o) => {
            let cfg = o.resolve()?;
            let r = harness::cmd_ablate(&cfg)?;
            print!("{}", r.grid.to_table());
        }
        Command::Orders(o) => {
            let cfg = o.resolve()?;
            harness::cmd_orders(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("orders.txt"))?);
        }
        Command::ZeroShot(o) => {
            let cfg = o.resolve()?;
            harness::cmd_zero_shot(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("zero_shot.txt"))?);
        }
        Command::Bench(o) => {
            let cfg = o.resolve()?;
            let r = harness::cmd_bench(&cfg)?;
            print!("{}", r.to_csv());
        }
        Command::Characterize {
            overrides,
            model,
            top_n,
        } => {
            let mut cfg = overrides.resolve()?;
            if let Some(n) = top_n {
                cfg.top_n = n;
            }
            harness::cmd_characterize(&cfg, &model)?;
            print!("{}", std::fs::read_to_string(cfg.out_dir.join("characterize.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
