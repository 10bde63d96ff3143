//! The `cycada` command line.
//!
//! Every verb resolves a config (defaults, file, `--override key=value`),
//! writes the resolved snapshot next to its outputs and maps failures to
//! exit codes: 2 config, 3 data or integrity, 4 training abort, 5 report.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, out_root, scope_overrides, DataKind, ExperimentConfig};
use crate::data::{make_toy_pair, prepare_digits, DigitShift, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_confusion_heatmap, ConfusionMatrix};
use crate::models::load_checkpoint;
use crate::report::{emit_report, markdown_table};
use crate::trainer::{
    read_summary, run_dir_name, run_experiment, run_stage, DomainData, RunArtifacts, RunStatus, Stage,
};

#[derive(Debug, Parser)]
#[command(name = "cycada", version, about = "Cycle-consistent adversarial domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the file. Repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output root (default: $CYCADA_OUT_ROOT, then `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Clone)]
pub struct StageArgs {
    #[command(flatten)]
    pub common: Common,
    /// Seed of the run this stage belongs to.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw digit archives (or generate a toy pair) into IDX datasets.
    PrepareData {
        /// Directory holding the raw archives.
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Digit shift to prepare; all three when omitted.
        #[arg(long)]
        shift: Option<DigitShift>,
        /// Destination (default: $CYCADA_DATA_ROOT, then `data`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the configured toy pair instead of digits.
        #[arg(long)]
        toy: bool,
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Supervised pretraining of the task net on the source domain.
    TrainSource(StageArgs),
    /// Pixel-level adaptation (generators and image discriminators).
    AdaptPixel(StageArgs),
    /// Task training on source images translated into the target style.
    TrainTask(StageArgs),
    /// Gated feature-level adaptation of the task net.
    AdaptFeat(StageArgs),
    /// Run the configured stage list for every seed and aggregate.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Number of seeds (0..N), replacing the configured list.
        #[arg(long)]
        seeds: Option<u64>,
        /// Explicit seed; repeatable. Takes precedence over --seeds.
        #[arg(long = "seed")]
        seed: Vec<u64>,
    },
    /// Evaluate a task-net checkpoint on a test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which domain's test split to use.
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Build the results table and figure index from finished experiments.
    Report {
        #[arg(long)]
        from: PathBuf,
        /// Report directory (default: `<from>/report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config_for(common: &Common, overrides: &[String]) -> Result<ExperimentConfig> {
    load_config(common.config.as_deref(), overrides)
}

fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("resolved-config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn clear(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    Ok(())
}

fn run_single_stage(stage: Stage, args: &StageArgs) -> Result<String> {
    let overrides = scope_overrides(&args.common.overrides, stage);
    let cfg = config_for(&args.common, &overrides)?;
    let run_dir = out_root(args.common.out.as_deref()).join(&cfg.experiment.id).join(run_dir_name(args.seed));
    let stage_dir = run_dir.join(stage.name());
    if read_summary(&stage_dir)?.is_some() {
        if !args.common.force {
            return Err(Error::Config(format!(
                "{} already holds a finished stage; pass --force to replace it",
                stage_dir.display()
            )));
        }
        clear(&stage_dir)?;
    }
    let data = DomainData::load(&cfg)?;
    let mut art = RunArtifacts::load(&run_dir, stage)?;
    write_snapshot(&cfg, &stage_dir)?;
    let summary = run_stage(&cfg, stage, args.seed, &data, &mut art, Some(&run_dir))?;
    let mut out = format!("{} finished after {} iterations", stage.name(), summary.iterations);
    if let Some(s) = summary.target_score {
        out += &format!("; target score {:.4}", s);
    }
    if let Some(s) = summary.source_score {
        out += &format!("; source score {:.4}", s);
    }
    if let Some(r) = summary.reconstruction_error {
        out += &format!("; reconstruction error {:.4}", r);
    }
    if let Some(stop) = &summary.stop {
        out += &format!("; stop: {stop:?}");
    }
    Ok(out)
}

/// Executes a parsed command and returns the text to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::PrepareData { raw, shift, out, toy, config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let out = out.unwrap_or_else(|| cfg.data.resolved_root());
            if toy || (raw.is_none() && cfg.data.kind == DataKind::Toy) {
                let pair = make_toy_pair(&cfg.data.toy)?;
                let name = format!("toy-{}", cfg.data.toy.kind.name());
                let src = out.join(format!("{name}-source"));
                let tgt = out.join(format!("{name}-target"));
                for (d, dir) in [(&pair.source_train, &src), (&pair.source_test, &src), (&pair.target_train, &tgt), (&pair.target_test, &tgt)] {
                    d.save(dir)?;
                }
                return Ok(format!("wrote {} and {}", src.display(), tgt.display()));
            }
            let raw = raw.ok_or_else(|| Error::Config("prepare-data needs --raw <dir> for digit data".into()))?;
            let shifts = match shift {
                Some(s) => vec![s],
                None => vec![DigitShift::MnistUsps, DigitShift::UspsMnist, DigitShift::SvhnMnist],
            };
            let mut lines = Vec::new();
            for s in shifts {
                let p = prepare_digits(&raw, &out, s)?;
                for d in [&p.source, &p.target] {
                    lines.push(format!(
                        "{}: train {} ({}), test {} ({})",
                        d.dir.display(),
                        d.train.count,
                        &d.train.sha256[..12],
                        d.test.count,
                        &d.test.sha256[..12]
                    ));
                }
            }
            Ok(lines.join("\n"))
        }
        Command::TrainSource(a) => run_single_stage(Stage::SourcePretrain, &a),
        Command::AdaptPixel(a) => run_single_stage(Stage::PixelAdapt, &a),
        Command::TrainTask(a) => run_single_stage(Stage::TaskOnTranslated, &a),
        Command::AdaptFeat(a) => run_single_stage(Stage::FeatureAdapt, &a),
        Command::RunExperiment { common, seeds, seed } => {
            let mut overrides = common.overrides.clone();
            if !seed.is_empty() {
                let list: Vec<String> = seed.iter().map(u64::to_string).collect();
                overrides.push(format!("experiment.seeds=[{}]", list.join(",")));
            } else if let Some(n) = seeds {
                let list: Vec<String> = (0..n).map(|s| s.to_string()).collect();
                overrides.push(format!("experiment.seeds=[{}]", list.join(",")));
            }
            let cfg = config_for(&common, &overrides)?;
            let root = out_root(common.out.as_deref());
            let exp_dir = root.join(&cfg.experiment.id);
            if exp_dir.join(crate::trainer::ExperimentManifest::FILE).exists() {
                if !common.force {
                    return Err(Error::Config(format!(
                        "{} already holds a finished experiment; pass --force to replace it",
                        exp_dir.display()
                    )));
                }
                clear(&exp_dir)?;
            }
            let manifest = run_experiment(&cfg, Some(&root))?;
            let aborted: Vec<_> = manifest
                .runs
                .iter()
                .filter_map(|r| match &r.status {
                    RunStatus::Aborted { stage, error } => Some(format!("seed {} aborted in {}: {error}", r.seed, stage.name())),
                    RunStatus::Completed => None,
                })
                .collect();
            let mut out = String::new();
            for r in &manifest.runs {
                if let Some(s) = r.final_score {
                    out += &format!("seed {}: {:.4}\n", r.seed, s);
                }
            }
            match &manifest.aggregate {
                Some(a) => {
                    out += &format!("mean {:.4}", a.mean);
                    if let Some(se) = a.stderr {
                        out += &format!(" +/- {:.4} (stderr, {} runs)", se, a.runs);
                    }
                }
                None => {
                    return Err(Error::Abort(format!("every run aborted: {}", aborted.join("; "))));
                }
            }
            for a in aborted {
                out += &format!("\n{a}");
            }
            out += &format!("\nmanifest: {}", exp_dir.join(crate::trainer::ExperimentManifest::FILE).display());
            Ok(out)
        }
        Command::Evaluate { common, checkpoint, domain } => {
            let cfg = config_for(&common, &common.overrides)?;
            let data = DomainData::load(&cfg)?;
            let test = match domain.as_str() {
                "target" => &data.target_test,
                "source" => &data.source_test,
                other => return Err(Error::Config(format!("unknown domain `{other}` (source or target)"))),
            };
            let model = load_checkpoint(&checkpoint)?;
            let metrics = evaluate(&model, test)?;
            let dir = out_root(common.out.as_deref()).join(&cfg.experiment.id).join(format!("evaluate-{domain}"));
            if dir.join("metrics.json").exists() && !common.force {
                return Err(Error::Config(format!("{} exists; pass --force to replace it", dir.display())));
            }
            write_snapshot(&cfg, &dir)?;
            metrics.write(&dir.join("metrics.json"))?;
            write_confusion_heatmap(&ConfusionMatrix::from_counts(metrics.confusion.clone())?, &dir.join("confusion.png"), 16)?;
            Ok(format!("{} split of {domain}: score {:.4} (checkpoint {})", Split::Test.as_str(), metrics.score(), model.digest()?))
        }
        Command::Report { from, out } => {
            let out = out.unwrap_or_else(|| from.join("report"));
            let bundle = emit_report(&from, &out)?;
            Ok(format!("{}\nwrote {} and {}", markdown_table(&bundle.rows), bundle.markdown.display(), bundle.csv.display()))
        }
    }
}

/// Parses `args`, runs, prints, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(text) => {
            println!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
