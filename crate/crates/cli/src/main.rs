use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use patternrnn_autodiff::OpKind;
use patternrnn_core::checkpoint::Checkpoint;
use patternrnn_core::config::RunConfig;
use patternrnn_core::data::synth::synth_generate;
use patternrnn_core::data::{write_scenes_csv, DatasetFormat};
use patternrnn_core::eval::{
    attach_predictions, evaluate, predictions_csv, read_predictions_csv, render_svg, score, MetricsReport, TOOL_VERSION,
};
use patternrnn_core::model::{gradcheck, Ablation, PatternSource};
use patternrnn_core::training::loss_log_csv;
use patternrnn_core::{pipeline, Error, Result};
use serde_json::json;

const GRADCHECK_BOUND: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "patternrnn", version, about = "Pattern- and socially-conditioned trajectory prediction")]
#[command(after_long_help = config_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn config_help() -> String {
    format!(
        "Configuration files hold `key = value` lines with `#` comments. Keys and defaults:\n{}",
        RunConfig::describe_keys()
    )
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of trajectory CSV files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// trajair, sdd, nba or synth; selects the matching default profile.
    #[arg(long)]
    dataset_format: Option<DatasetFormat>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed of training and sampling; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Sampled futures per agent; overrides `k`.
    #[arg(long)]
    k: Option<usize>,
    /// vrnn, pat, pat_soc or pat_soc_att; overrides `ablation`.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Worker threads for loading and evaluation.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides one configuration key, e.g. `--set lr=0.0005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its best checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint with best-of-K ADE and FDE.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score predictions from a CSV file instead of sampling a model.
        #[arg(long)]
        oracle_pred: Option<PathBuf>,
    },
    /// Write sampled futures as CSV and SVG overlays.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Windows rendered as SVG.
        #[arg(long, default_value_t = 4)]
        svg: usize,
    },
    /// Train and evaluate the four ablation modes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Overrides `max_epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Test data directory; synthetic evaluation scenes when omitted.
        #[arg(long)]
        test_dir: Option<PathBuf>,
        /// Comma-separated seeds; metrics are averaged over them.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale the backward rule of one primitive, e.g. `softmax`.
        #[arg(long)]
        corrupt: Option<String>,
        /// Multiplier applied to the corrupted backward rule.
        #[arg(long, default_value_t = 1.5)]
        corrupt_factor: f64,
        /// Pattern source of the checked pass: teacher or predicted.
        #[arg(long, default_value = "teacher")]
        patterns: PatternSource,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) | Error::Invalid(_) | Error::Autodiff(_) => 1,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 2,
        Error::NonFinite(_) => 3,
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let text = match &common.config {
        Some(path) => Some(fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
        None => None,
    };
    let mut cfg = match (common.dataset_format, &text) {
        (Some(format), text) => {
            let mut cfg = RunConfig::for_format(format);
            if let Some(text) = text {
                cfg.apply_text(text)?;
            }
            cfg.set("format", format.name())?;
            cfg
        }
        (None, Some(text)) => RunConfig::from_text(text)?,
        (None, None) => RunConfig::default(),
    };
    for pair in &common.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(k) = common.k {
        cfg.eval.k = k;
    }
    if let Some(a) = common.ablation {
        cfg.model.ablation = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_threads(common: &Common) -> Result<()> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("threads: {e}")))?;
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn out_dir(path: &Path) -> Result<&Path> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path)
}

/// Records what produced the files in `dir`.
fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, files: &[&str]) -> Result<()> {
    let manifest = json!({
        "tool_version": TOOL_VERSION,
        "command": command,
        "files": files,
        "config": cfg.to_text(),
    });
    write(&dir.join("config.txt"), format!("# {TOOL_VERSION}\n{}", cfg.to_text()))?;
    write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("json value"))
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serialisable report")
}

fn cmd_train(common: &Common, epochs: Option<usize>) -> Result<()> {
    set_threads(common)?;
    let mut cfg = resolve_config(common)?;
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    let (train_w, val_w) = pipeline::training_windows(&cfg, common.data_dir.as_deref())?;
    eprintln!("training {} on {} windows, validating on {}", cfg.model.ablation, train_w.len(), val_w.len());
    let run = pipeline::train(&cfg, &train_w, &val_w, |r| {
        eprintln!("epoch {:4}  train {:.4}  val {:.4}  grad {:.3}", r.epoch, r.train.total, r.metric(), r.grad_norm);
    })?;
    let dir = out_dir(&common.out)?;
    pipeline::checkpoint(&cfg, &run.outcome).save(&dir.join("checkpoint.bin"))?;
    write(&dir.join("loss_log.csv"), loss_log_csv(&run.outcome.log))?;
    write_manifest(dir, "train", &cfg, &["checkpoint.bin", "loss_log.csv", "config.txt"])?;
    println!(
        "best epoch {} of {}, validation loss {:.6}",
        run.outcome.best_epoch,
        run.outcome.log.len(),
        run.outcome.best_metric
    );
    Ok(())
}

/// Configuration and test windows for a checkpoint; command-line keys
/// apply on top of the stored configuration.
fn checkpoint_run(common: &Common, path: &Path) -> Result<(RunConfig, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let (mut cfg, _, _) = pipeline::restore(&ck)?;
    for pair in &common.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.eval.seed = seed;
    }
    if let Some(k) = common.k {
        cfg.eval.k = k;
    }
    if common.ablation.is_some_and(|a| a != cfg.model.ablation) {
        return Err(Error::Config(format!("checkpoint was trained as {}", cfg.model.ablation)));
    }
    cfg.validate()?;
    Ok((cfg, ck))
}

fn cmd_evaluate(common: &Common, checkpoint: Option<&Path>, oracle: Option<&Path>) -> Result<()> {
    set_threads(common)?;
    let dir = out_dir(&common.out)?;
    let (cfg, metrics, ablation) = match (checkpoint, oracle) {
        (_, Some(oracle)) => {
            let cfg = match checkpoint {
                Some(path) => checkpoint_run(common, path)?.0,
                None => resolve_config(common)?,
            };
            let samples = pipeline::windows(&cfg, pipeline::evaluation_scenes(&cfg, common.data_dir.as_deref())?)?;
            let sets = attach_predictions(&samples, &read_predictions_csv(oracle)?)?;
            (cfg.clone(), score(&sets, cfg.eval.joint_best)?, "oracle".to_string())
        }
        (Some(path), None) => {
            let (cfg, ck) = checkpoint_run(common, path)?;
            let (_, model, store) = pipeline::restore(&ck)?;
            let samples = pipeline::windows(&cfg, pipeline::evaluation_scenes(&cfg, common.data_dir.as_deref())?)?;
            let (metrics, _) = evaluate(&model, &store, &samples, &cfg.eval)?;
            (cfg.clone(), metrics, cfg.model.ablation.name().to_string())
        }
        (None, None) => return Err(Error::Config("evaluate needs --checkpoint or --oracle-pred".into())),
    };
    let report = MetricsReport::new(
        metrics,
        cfg.data.format.name(),
        cfg.data.format.units(),
        &ablation,
        &cfg.eval,
        cfg.to_text(),
    );
    write(&dir.join("metrics.json"), pretty(&report))?;
    println!(
        "min_ade {:.6} min_fde {:.6} {} (k={}, {} agent-windows)",
        report.min_ade, report.min_fde, report.units, report.k, report.agent_windows
    );
    Ok(())
}

fn cmd_predict(common: &Common, checkpoint: &Path, svg: usize) -> Result<()> {
    set_threads(common)?;
    let (cfg, ck) = checkpoint_run(common, checkpoint)?;
    let (_, model, store) = pipeline::restore(&ck)?;
    let samples = pipeline::windows(&cfg, pipeline::evaluation_scenes(&cfg, common.data_dir.as_deref())?)?;
    let (_, sets) = evaluate(&model, &store, &samples, &cfg.eval)?;
    let dir = out_dir(&common.out)?;
    write(&dir.join("predictions.csv"), predictions_csv(&sets)?)?;
    let mut files = vec!["predictions.csv".to_string()];
    for set in sets.iter().take(svg) {
        let name = format!("{}_{}.svg", set.scene_id, set.window);
        write(&dir.join(&name), render_svg(set))?;
        files.push(name);
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    write_manifest(dir, "predict", &cfg, &names)?;
    println!("wrote {} windows of {} samples to {}", sets.len(), cfg.eval.k, dir.display());
    Ok(())
}

fn cmd_ablate(common: &Common, epochs: Option<usize>, test_dir: Option<&Path>, seeds: &[u64]) -> Result<()> {
    set_threads(common)?;
    let mut cfg = resolve_config(common)?;
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    let modes: Vec<Ablation> = match common.ablation {
        Some(_) => return Err(Error::Config("ablate always runs every mode; drop --ablation".into())),
        None => Ablation::ALL.to_vec(),
    };
    let report = pipeline::ablate(&cfg, common.data_dir.as_deref(), test_dir, &modes, seeds, |mode, seed, r| {
        eprintln!("{mode} seed {seed} epoch {:4}  train {:.4}  val {:.4}", r.epoch, r.train.total, r.metric());
    })?;
    let dir = out_dir(&common.out)?;
    write(&dir.join("ablation.json"), pretty(&report))?;
    write(&dir.join("ablation.csv"), report.to_csv())?;
    write_manifest(dir, "ablate", &cfg, &["ablation.json", "ablation.csv"])?;
    println!("{:<20} {:>8} {:>10} {:>10}", "mode", "params", "min_ade", "min_fde");
    for r in &report.rows {
        println!("{:<20} {:>8} {:>10.4} {:>10.4}", r.label, r.param_count, r.mean_min_ade, r.mean_min_fde);
    }
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let mut common = common.clone();
    common.dataset_format.get_or_insert(DatasetFormat::Synth);
    let cfg = resolve_config(&common)?;
    let spec = cfg.synth_spec();
    let generated = synth_generate(&spec, cfg.synth_seed)?;
    let dir = out_dir(&common.out)?;
    let scenes: Vec<_> = generated.iter().map(|g| g.scene.clone()).collect();
    write_scenes_csv(&dir.join("trajectories.csv"), &scenes)?;
    let truth: Vec<_> = generated
        .iter()
        .map(|g| json!({ "scene_id": g.scene.scene_id, "agents": g.truth }))
        .collect();
    let doc = json!({
        "tool_version": TOOL_VERSION,
        "seed": cfg.synth_seed,
        "spec": spec,
        "scenes": truth,
        "config": cfg.to_text(),
    });
    write(&dir.join("generator.json"), pretty(&doc))?;
    println!("wrote {} scenes to {}", scenes.len(), dir.display());
    Ok(())
}

fn cmd_gradcheck(common: &Common, corrupt: Option<&str>, factor: f64, patterns: PatternSource) -> Result<bool> {
    let ablation = common.ablation.unwrap_or(Ablation::PatSocAtt);
    let faults = match corrupt {
        Some(name) => vec![(
            OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))?,
            factor,
        )],
        None => Vec::new(),
    };
    let report = gradcheck(ablation, patterns, &faults)?;
    let pass = report.max_rel_error < GRADCHECK_BOUND;
    println!(
        "{} {ablation}: max relative error {:.3e} over {} entries (worst {}[{}], analytic {:.6e}, numeric {:.6e})",
        if pass { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.checked,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    Ok(pass)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, epochs } => cmd_train(&common, epochs).map(|_| true),
        Command::Evaluate {
            common,
            checkpoint,
            oracle_pred,
        } => cmd_evaluate(&common, checkpoint.as_deref(), oracle_pred.as_deref()).map(|_| true),
        Command::Predict { common, checkpoint, svg } => cmd_predict(&common, &checkpoint, svg).map(|_| true),
        Command::Ablate {
            common,
            epochs,
            test_dir,
            seeds,
        } => cmd_ablate(&common, epochs, test_dir.as_deref(), &seeds).map(|_| true),
        Command::Synth { common } => cmd_synth(&common).map(|_| true),
        Command::Gradcheck {
            common,
            corrupt,
            corrupt_factor,
            patterns,
        } => cmd_gradcheck(&common, corrupt.as_deref(), corrupt_factor, patterns),
    }
}

fn main() -> ExitCode {
    let help = config_help();
    let command = Cli::command().mut_subcommands(|c| c.after_long_help(help.clone()));
    let parsed = command
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use std::str::FromStr;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_and_flags_layer_in_order() {
        let common = Common {
            dataset_format: Some(DatasetFormat::Sdd),
            overrides: vec!["lr = 0.01".into(), "seed=4".into()],
            seed: Some(9),
            ..Common::default()
        };
        let cfg = resolve_config(&common).unwrap();
        assert_eq!(cfg.data.future, 12);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!((cfg.train.seed, cfg.eval.seed), (9, 9));
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 3);
    }

    #[test]
    fn unknown_primitive_is_a_config_error() {
        let err = cmd_gradcheck(&Common::default(), Some("warp"), 1.5, PatternSource::Teacher).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(PatternSource::from_str("predicted").is_ok());
    }
}
