use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ssmmt::config::{RunConfig, WeightingKind};
use ssmmt::pipeline::{self, Arm};
use ssmmt::{Error, Result};
use ssmmt_core::translator::Objective;

/// Search-image multimodal translation pipeline.
///
/// Any configuration field can be overridden after the subcommand with
/// `--section.field value` (for example `--translator.beam 1`); overrides
/// win over the config file, which wins over built-in defaults.
#[derive(Parser, Debug)]
#[command(name = "ssmmt", version = version(), long_version = version())]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; shorthand for `--seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory holding every stage output; shorthand for `--paths.work`.
    #[arg(long, global = true)]
    work: Option<PathBuf>,
    /// Suppress progress lines on standard error.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

fn version() -> &'static str {
    Box::leak(ssmmt::version_line().trim_start_matches("ssmmt ").to_string().into_boxed_str())
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum WeightingArg {
    Learned,
    Hard,
    Uniform,
}

impl From<WeightingArg> for WeightingKind {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Learned => WeightingKind::Learned,
            WeightingArg::Hard => WeightingKind::Hard,
            WeightingArg::Uniform => WeightingKind::Uniform,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ObjectiveArg {
    Tlm,
    Vtlm,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ArmArg {
    Baseline,
    System,
    Ablation,
    All,
}

impl ArmArg {
    fn arms(self) -> Vec<Arm> {
        match self {
            ArmArg::Baseline => vec![Arm::Baseline],
            ArmArg::System => vec![Arm::System],
            ArmArg::Ablation => vec![Arm::Ablation],
            ArmArg::All => Arm::ALL.to_vec(),
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark corpus, search terms and answer key.
    Synth,
    /// Build the vocabulary and extract search keywords from the source side.
    Prepare,
    /// Fetch candidate images for every query list through the cache.
    Retrieve,
    /// Extract one feature vector per distinct retrieved image.
    ExtractFeatures,
    /// Train the sentence-image matcher on keyword-labeled pairs.
    TrainMatcher,
    /// Weight and pool each sentence's candidates into a visual context.
    BuildContexts {
        /// Weighting scheme; defaults to `filter.weighting`. The uniform
        /// contexts needed by the ablation arm are also written unless this is given.
        #[arg(long, value_enum)]
        weighting: Option<WeightingArg>,
    },
    /// Masked-language-model pretraining on concatenated sentence pairs.
    Pretrain {
        #[arg(long, value_enum, default_value = "both")]
        objective: ObjectiveArg,
    },
    /// Fine-tune translation arms from their pretrained checkpoints.
    Finetune {
        #[arg(long, value_enum, default_value = "all")]
        arm: ArmArg,
    },
    /// Decode the test split with the fine-tuned arms.
    Translate {
        #[arg(long, value_enum, default_value = "all")]
        arm: ArmArg,
    },
    /// Compare two translation files against references.
    Evaluate {
        /// Defaults to the baseline arm's translations in the work directory.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Defaults to the system arm's translations in the work directory.
        #[arg(long)]
        system: Option<PathBuf>,
        /// Defaults to the references written by `translate`.
        #[arg(long)]
        references: Option<PathBuf>,
        /// Answer-key JSONL aligned line by line with the references; defaults
        /// to the test-split key written by `translate`, when present.
        #[arg(long)]
        answer_key: Option<PathBuf>,
        /// Report destination; defaults to `evaluation.json` in the work directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage on the synthetic benchmark and write the comparison report.
    E2e,
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of the argument list.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::usage(format!("override --{flag} needs a value")))?;
                overrides.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<()> {
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(w) = &cli.work {
        overrides.push(("paths.work".into(), serde_json::to_string(&w.to_string_lossy())?));
    }
    if let Some(c) = &cli.config {
        pipeline::require(&[c])?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let quiet = cli.quiet;
    match cli.command {
        Command::Synth => print(&pipeline::synth(&cfg)?)?,
        Command::Prepare => print(&pipeline::prepare(&cfg)?)?,
        Command::Retrieve => print(&pipeline::retrieve(&cfg)?)?,
        Command::ExtractFeatures => print(&pipeline::extract_features(&cfg)?)?,
        Command::TrainMatcher => print(&pipeline::train_matcher_stage(&cfg)?)?,
        Command::BuildContexts { weighting } => {
            let kinds = match weighting {
                Some(w) => vec![w.into()],
                None if cfg.filter.weighting == WeightingKind::Uniform => vec![WeightingKind::Uniform],
                None => vec![cfg.filter.weighting, WeightingKind::Uniform],
            };
            for k in kinds {
                print(&pipeline::build_contexts(&cfg, k)?)?;
            }
        }
        Command::Pretrain { objective } => {
            let objs = match objective {
                ObjectiveArg::Tlm => vec![Objective::Tlm],
                ObjectiveArg::Vtlm => vec![Objective::Vtlm],
                ObjectiveArg::Both => vec![Objective::Tlm, Objective::Vtlm],
            };
            for o in objs {
                print(&pipeline::pretrain_stage(&cfg, o)?)?;
            }
        }
        Command::Finetune { arm } => {
            for a in arm.arms() {
                print(&pipeline::finetune_stage(&cfg, a)?)?;
            }
        }
        Command::Translate { arm } => {
            for a in arm.arms() {
                print(&pipeline::translate_stage(&cfg, a, None, a.name())?)?;
            }
        }
        Command::Evaluate { baseline, system, references, answer_key, out } => {
            let t = |n: &str| pipeline::translation_path(&cfg, n);
            let b = baseline.unwrap_or_else(|| t("baseline"));
            let s = system.unwrap_or_else(|| t("system"));
            let r = references.unwrap_or_else(|| pipeline::reference_path(&cfg));
            let key = answer_key.or_else(|| Some(pipeline::test_key_path(&cfg)).filter(|p| p.exists()));
            let c = pipeline::evaluate_files(&b, &s, &r, key.as_deref())?;
            pipeline::write_json(&out.unwrap_or_else(|| cfg.paths.work.join("evaluation.json")), &c)?;
            print(&serde_json::json!({"baseline": c.baseline.bleu, "system": c.system.bleu, "delta": c.delta, "sense_accuracy": c.sense_accuracy}))?;
        }
        Command::E2e => {
            let mut progress = |stage: &str| {
                if !quiet {
                    eprintln!("ssmmt: {stage}");
                }
            };
            let r = pipeline::e2e(&cfg, &mut progress)?;
            print(&serde_json::json!({
                "baseline": r.comparison.baseline.bleu,
                "system": r.comparison.system.bleu,
                "delta": r.comparison.delta,
                "sense_accuracy": r.comparison.sense_accuracy,
                "ablation_bleu": r.ablation.bleu,
                "report": cfg.report_path(),
            }))?;
            return Ok(());
        }
    }
    pipeline::echo_config(&cfg)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            return ExitCode::from(e.kind.exit_code() as u8);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", Error::usage(line).to_json_line());
            return ExitCode::from(1);
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
