//! Command-line entry point: train / eval / ablate / sweep / synth.
//!
//! Every run resolves its configuration from defaults, an optional config
//! file and repeated `--set key=value` overrides, echoes the result to
//! `<out>/resolved.cfg`, and writes its artifacts into the output
//! directory. Errors print one line: `error[category]: detail`.

use crate::config::{ConfigError, RunConfig};
use crate::data::{load_csv, normalize, split, synth_multiseasonal, write_csv, SynthSpec};
use crate::data::{windows, RawSeries, SplitBundle};
use crate::eval::{evaluate, lookback_sweep, render_reports, Experiment};
use crate::framework::ForecastModel;
use crate::optim::{train, validation_l1};
use crate::params::{load_checkpoint, save_checkpoint};
use crate::tensor::Tensor;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mtpnet", version, about = "Multi-scale transformer pyramid forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, histories and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override one key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.ckpt, history.csv and train_summary.txt.
    Train,
    /// Evaluate a checkpoint; writes report.csv and eval_summary.txt.
    Eval,
    /// Train/evaluate every (variant, seed) cell; writes reports and table.
    Ablate,
    /// Sweep look-back lengths per horizon; writes reports and table.
    Sweep,
    /// Generate a synthetic multi-seasonal dataset; writes synthetic.csv.
    Synth,
}

/// Run with process arguments and return the exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage/help text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

#[derive(Debug)]
struct CliError {
    category: &'static str,
    detail: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.detail)
    }
}

impl std::error::Error for CliError {}

fn err(category: &'static str, detail: impl ToString) -> CliError {
    CliError {
        category,
        detail: detail.to_string(),
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        err("config", e)
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    if let Command::Eval = cli.command {
        // checkpoint header (written by train) is the architecture source
        let cfg_for_path = resolved_config(cli, RunConfig::default())?;
        let ckpt = checkpoint_path(cli, &cfg_for_path);
        let (header, _) = load_checkpoint(&ckpt).map_err(|e| err("io", e))?;
        cfg.apply_text(&header)?;
    }
    let cfg = resolved_config(cli, cfg)?;

    std::fs::create_dir_all(&cli.out)
        .map_err(|e| err("io", format!("cannot create {}: {e}", cli.out.display())))?;
    std::fs::write(cli.out.join("resolved.cfg"), cfg.to_provenance())
        .map_err(|e| err("io", e))?;

    match cli.command {
        Command::Train => cmd_train(cli, &cfg),
        Command::Eval => cmd_eval(cli, &cfg),
        Command::Ablate => cmd_ablate(cli, &cfg),
        Command::Sweep => cmd_sweep(cli, &cfg),
        Command::Synth => cmd_synth(cli, &cfg),
    }
}

fn resolved_config(cli: &Cli, mut cfg: RunConfig) -> Result<RunConfig, CliError> {
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.overrides {
        let Some((k, v)) = pair.split_once('=') else {
            return Err(err(
                "config",
                format!("--set expects KEY=VALUE, got {pair:?}"),
            ));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn checkpoint_path(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    let configured = cfg.get("checkpoint");
    if configured.is_empty() {
        cli.out.join("model.ckpt")
    } else {
        PathBuf::from(configured)
    }
}

struct LoadedData {
    raw: RawSeries,
    bundle: SplitBundle,
    normalized: Tensor,
}

fn load_data(cfg: &RunConfig) -> Result<LoadedData, CliError> {
    let path = cfg.get("data_path");
    if path.is_empty() {
        return Err(err(
            "data",
            "data_path is empty; point it at a CSV (the synth command can generate one)",
        ));
    }
    let raw = load_csv(Path::new(path)).map_err(|e| err("data", e))?;
    let bundle = split(&raw, cfg.split_ratios()?).map_err(|e| err("data", e))?;
    let normalized = normalize(&raw, &bundle);
    Ok(LoadedData {
        raw,
        bundle,
        normalized,
    })
}

fn build_experiment(cfg: &RunConfig, data: &LoadedData) -> Result<Experiment, CliError> {
    let pyramid = cfg.pyramid_config(data.raw.dims())?;
    pyramid.validate().map_err(|e| err("model", e))?;
    data.bundle
        .ensure_fits(pyramid.lookback, pyramid.horizon)
        .map_err(|e| err("data", e))?;
    Ok(Experiment {
        dataset: dataset_id(cfg),
        series: data.normalized.clone(),
        bundle: data.bundle.clone(),
        pyramid,
        decomposition: cfg.decomposition()?,
        mode: cfg.model_mode()?,
        train_cfg: cfg.train_config()?,
        train_stride: cfg.get_usize("train_stride")?.max(1),
        eval_stride: cfg.get_usize("eval_stride")?.max(1),
    })
}

fn dataset_id(cfg: &RunConfig) -> String {
    Path::new(cfg.get("data_path"))
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let exp = build_experiment(cfg, &data)?;
    let mut model = ForecastModel::init(
        exp.pyramid.clone(),
        exp.decomposition.clone(),
        exp.mode,
        exp.train_cfg.seed,
    )
    .map_err(|e| err("model", e))?;
    let (i, h) = (exp.pyramid.lookback, exp.pyramid.horizon);
    let tr = windows(&exp.series, exp.bundle.train.clone(), i, h, exp.train_stride)
        .map_err(|e| err("data", e))?;
    let va = windows(&exp.series, exp.bundle.val.clone(), i, h, exp.eval_stride)
        .map_err(|e| err("data", e))?;
    let history = train(&mut model, &tr, &va, &exp.train_cfg).map_err(|e| err("train", e))?;

    save_checkpoint(
        &cli.out.join("model.ckpt"),
        &cfg.to_provenance(),
        &model.params,
    )
    .map_err(|e| err("io", e))?;
    std::fs::write(cli.out.join("history.csv"), history.to_table())
        .map_err(|e| err("io", e))?;
    let summary = format!(
        "best_val_l1 = {}\nbest_epoch = {}\nepochs_run = {}\n",
        history.best_val_l1.map_or("nan".into(), |v| v.to_string()),
        history
            .best_epoch
            .map_or("none".into(), |v| v.to_string()),
        history.records.len(),
    );
    std::fs::write(cli.out.join("train_summary.txt"), &summary).map_err(|e| err("io", e))?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = checkpoint_path(cli, cfg);
    let (_, params) = load_checkpoint(&ckpt_path).map_err(|e| err("io", e))?;
    let data = load_data(cfg)?;
    let exp = build_experiment(cfg, &data)?;
    let mut model = ForecastModel::init(
        exp.pyramid.clone(),
        exp.decomposition.clone(),
        exp.mode,
        exp.train_cfg.seed,
    )
    .map_err(|e| err("model", e))?;
    let expected: Vec<&String> = model.params.paths().collect();
    let loaded: Vec<&String> = params.paths().collect();
    if expected != loaded {
        return Err(err(
            "model",
            format!(
                "checkpoint {} does not match the configured architecture",
                ckpt_path.display()
            ),
        ));
    }
    model.params = params;

    let (i, h) = (exp.pyramid.lookback, exp.pyramid.horizon);
    let va = windows(&exp.series, exp.bundle.val.clone(), i, h, exp.eval_stride)
        .map_err(|e| err("data", e))?;
    let te = windows(&exp.series, exp.bundle.test.clone(), i, h, exp.eval_stride)
        .map_err(|e| err("data", e))?;
    let val_l1 = validation_l1(&model, &va).map_err(|e| err("train", e))?;
    let denorm = cfg.get_bool("denormalized_metrics")?;
    let report = evaluate(
        &model,
        &te,
        &exp.dataset,
        exp.train_cfg.seed,
        cfg.variant()?,
        denorm.then_some(&exp.bundle),
    )
    .map_err(|e| err("train", e))?;

    std::fs::write(cli.out.join("report.csv"), render_reports(&[report.clone()]))
        .map_err(|e| err("io", e))?;
    let summary = format!(
        "val_l1 = {val_l1}\ntest_mse = {}\ntest_mae = {}\n",
        report.mse, report.mae
    );
    std::fs::write(cli.out.join("eval_summary.txt"), &summary).map_err(|e| err("io", e))?;
    print!("{summary}");
    Ok(())
}

fn cmd_ablate(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let exp = build_experiment(cfg, &data)?;
    let variants = cfg.variants()?;
    let seeds = cfg.get_list_u64("seeds")?;
    let (reports, table) =
        crate::eval::ablation_suite(&exp, &variants, &seeds).map_err(|e| err("train", e))?;
    std::fs::write(cli.out.join("reports.csv"), render_reports(&reports))
        .map_err(|e| err("io", e))?;
    std::fs::write(cli.out.join("ablation_table.txt"), &table).map_err(|e| err("io", e))?;
    print!("{table}");
    Ok(())
}

fn cmd_sweep(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let exp = build_experiment(cfg, &data)?;
    let lookbacks = cfg.get_list_usize("lookbacks")?;
    let horizons = cfg.get_list_usize("horizons")?;
    let (reports, table) =
        lookback_sweep(&exp, &lookbacks, &horizons).map_err(|e| err("train", e))?;
    std::fs::write(cli.out.join("reports.csv"), render_reports(&reports))
        .map_err(|e| err("io", e))?;
    std::fs::write(cli.out.join("sweep_table.csv"), &table).map_err(|e| err("io", e))?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(cli: &Cli, cfg: &RunConfig) -> Result<(), CliError> {
    let periods = cfg.get_list_usize("periods")?;
    let amplitudes = if cfg.get("amplitudes").is_empty() {
        vec![1.0; periods.len()]
    } else {
        cfg.get_list_f64("amplitudes")?
    };
    let spec = SynthSpec {
        length: cfg.get_usize("synth_T")?,
        dims: cfg.get_usize("synth_D")?,
        periods,
        amplitudes,
        trend_slope: cfg.get_f64("trend_slope")?,
        noise_std: cfg.get_f64("noise_std")?,
        seed: cfg.get_u64("seed")?,
    };
    let raw = synth_multiseasonal(&spec).map_err(|e| err("data", e))?;
    let path = cli.out.join("synthetic.csv");
    write_csv(&raw, &path).map_err(|e| err("io", e))?;
    println!("wrote {} ({} rows, {} columns)", path.display(), raw.len(), raw.dims() + 1);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_override_fails_with_suggestion() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(&args(&[
            "mtpnet",
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "patchsizes=4",
        ]));
        assert_ne!(code, 0);
    }

    #[test]
    fn synth_writes_expected_file_shape() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(&args(&[
            "mtpnet",
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "synth_T=2048",
            "--set",
            "synth_D=3",
            "--set",
            "periods=24,96",
        ]));
        assert_eq!(code, 0);
        let raw = load_csv(&out.join("synthetic.csv")).unwrap();
        assert_eq!(raw.len(), 2048);
        assert_eq!(raw.dims(), 3);
        // resolved config echoed for provenance
        let prov = std::fs::read_to_string(out.join("resolved.cfg")).unwrap();
        assert!(prov.contains("synth_T = 2048"));
    }

    #[test]
    fn bad_set_syntax_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(&args(&[
            "mtpnet",
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "oops",
        ]));
        assert_ne!(code, 0);
    }
}
