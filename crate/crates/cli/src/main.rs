//! `s3net`: corpus generation, training stages, mask extraction,
//! evaluation, analysis and sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s3net::config::RunConfig;
use s3net::pipeline::{cmd_gen_data, cmd_pipeline, cmd_sweep, read_masks, PipelineOptions, PipelineStage, Run};
use s3net::pruning::{language_masks, Grouping, Scope, Strategy};
use s3net::{Error, Result};

#[derive(Parser)]
#[command(name = "s3net", version, about = "Language-adaptive speech pre-training with sparse sharing sub-networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(Common),
    /// Multilingual pre-training.
    Pretrain(Common),
    /// Per-group warmup from the pre-trained checkpoint.
    Warmup(Common),
    /// Extract one mask per group.
    ExtractMasks(Common),
    /// Joint adaptation of the masked sub-networks.
    Adapt(Common),
    /// Held-out loss of the adapted model.
    Eval(Common),
    /// Mask overlap and density report.
    Analyze(Common),
    /// Every stage in order.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Reuse the artifacts of every earlier stage as they are.
        #[arg(long, value_parser = parse_stage)]
        skip_to: Option<PipelineStage>,
    },
    /// The grid of the config's `[sweep]` section.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config; desk defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory: the corpus for gen-data, the run or sweep otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus directory, overriding the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_scope)]
    scope: Option<Scope>,
    #[arg(long)]
    prune_rate: Option<f64>,
    /// Mask count, or a JSON grouping file.
    #[arg(long)]
    masks: Option<String>,
}

fn parse_stage(s: &str) -> std::result::Result<PipelineStage, String> {
    PipelineStage::parse(s).ok_or_else(|| {
        let all: Vec<&str> = PipelineStage::ALL.iter().map(|s| s.as_str()).collect();
        format!("expected one of {}", all.join(", "))
    })
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| "expected lth, te or random".into())
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    Scope::parse(s).ok_or_else(|| "expected layerwise or global".into())
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(0),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.strategy {
            cfg.pruning.strategy = s;
        }
        if let Some(s) = self.scope {
            cfg.pruning.scope = s;
        }
        if let Some(p) = self.prune_rate {
            cfg.pruning.prune_rate = p;
        }
        if let Some(m) = &self.masks {
            match m.parse::<usize>() {
                Ok(n) => {
                    cfg.pruning.masks = Some(n);
                    cfg.pruning.grouping = None;
                }
                Err(_) => {
                    let text = std::fs::read(m).map_err(|e| Error::Io { path: m.into(), source: e })?;
                    let g: Grouping = serde_json::from_slice(&text)
                        .map_err(|e| Error::Validation { field: "--masks".into(), detail: e.to_string() })?;
                    cfg.pruning.grouping = Some(g);
                    cfg.pruning.masks = None;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn corpus(&self, cfg: &RunConfig) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| cfg.data.path.clone())
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::Validation { field: "--out".into(), detail: "required".into() })
    }

    /// Opens the run, trusting the artifacts of stages before `stage`.
    fn run(&self, stage: PipelineStage) -> Result<Run> {
        let cfg = self.config()?;
        let opts = PipelineOptions { skip_to: Some(stage), pretrain_dir: None };
        Run::open(&cfg, &self.corpus(&cfg), self.out()?, &opts)
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg = c.config()?;
            let out = c.out.clone().unwrap_or_else(|| c.corpus(&cfg));
            let m = cmd_gen_data(&cfg, &out)?;
            println!("corpus {} ({} languages, digest {})", out.display(), m.languages.len(), m.digest()?);
        }
        Command::Pretrain(c) => {
            let run = c.run(PipelineStage::Pretrain)?;
            let ck = run.pretrain()?;
            println!("pretrained {} steps into {}", ck.step, run.dir.join("pretrain").display());
        }
        Command::Warmup(c) => {
            let run = c.run(PipelineStage::Warmup)?;
            let base = run.pretrain()?;
            run.warmup(&base)?;
            println!("warmed up {} groups under {}", run.grouping()?.len(), run.dir.join("warmup").display());
        }
        Command::ExtractMasks(c) => {
            let run = c.run(PipelineStage::Warmup)?;
            let base = run.pretrain()?;
            let (g, m) = run.extract_masks(&base)?;
            for (id, mask) in &m {
                println!("{id}: density {:.4}", mask.density());
            }
            println!("{} masks for {} groups in {}", m.len(), g.len(), run.dir.join("masks").display());
        }
        Command::Adapt(c) => {
            let run = c.run(PipelineStage::Adapt)?;
            let base = run.pretrain()?;
            let (g, m) = read_masks(&run.dir.join("masks"))?;
            let ck = run.adapt(&base, &g, &m)?;
            println!("adapted {} steps into {}", ck.step, run.dir.join("adapt").display());
        }
        Command::Eval(c) => {
            let run = c.run(PipelineStage::Eval)?;
            let base = run.pretrain()?;
            let (g, m) = read_masks(&run.dir.join("masks"))?;
            let ck = run.adapt(&base, &g, &m)?;
            let r = run.eval(&ck, Some(&language_masks(&g, &m)?))?;
            print!("{}", r.to_text());
        }
        Command::Analyze(c) => {
            let run = c.run(PipelineStage::Analyze)?;
            let r = run.analyze(&run.language_masks()?)?;
            print!("{}", r.to_text());
        }
        Command::Pipeline { common, skip_to } => {
            let cfg = common.config()?;
            let opts = PipelineOptions { skip_to, pretrain_dir: None };
            let s = cmd_pipeline(&cfg, &common.corpus(&cfg), common.out()?, &opts)?;
            print!("{}", s.eval.to_text());
        }
        Command::Sweep { common, jobs } => {
            let cfg = common.config()?;
            let t = cmd_sweep(&cfg, &common.corpus(&cfg), common.out()?, jobs)?;
            print!("{}", t.to_text());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Validation { .. } | Error::UnknownLanguage(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
