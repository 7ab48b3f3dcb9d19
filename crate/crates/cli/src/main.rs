use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ending_core::config::RunConfig;
use ending_core::data::{export_voc_layout, generate_synthetic_dataset, PROPOSAL_SLOTS};
use ending_core::eval::{emit_report, evaluate, render_table, MetricReport, ReportFormat, RunReports};
use ending_core::protocol::build_task;
use ending_core::train::{load_datasets, load_trained, Experiment};
use ending_core::Error;

#[derive(Parser)]
#[command(name = "ending", version, about = "Class-incremental segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in VOC layout, with proposal files.
    GenData {
        #[arg(long)]
        seed: u64,
        /// Foreground classes (2..=25).
        #[arg(long)]
        classes: u8,
        /// Total images; the last `--val-images` form the val split.
        #[arg(long)]
        images: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to a fifth of `--images`.
        #[arg(long)]
        val_images: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train every step of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted `key=value` override, repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run the static-projection ablation once per subset of levels.
        #[arg(long)]
        sweep_levels: bool,
    },
    /// Re-evaluate a saved checkpoint.
    Eval {
        /// Run directory holding resolved_config.json.
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the last step with a checkpoint.
        #[arg(long)]
        step: Option<usize>,
    },
    /// Tables, JSON and plots across run directories.
    Report {
        runs: Vec<PathBuf>,
        #[arg(long)]
        plot: bool,
        #[arg(long)]
        json: bool,
        /// Directory for the emitted files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MalformedSplit { .. } => 2,
        Error::FrozenDrift { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("ENDING_NUM_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { seed, classes, images, size, out, val_images, force } => {
            gen_data(seed, classes, images, size, &out, val_images, force)
        }
        Command::Run { config, overrides, sweep_levels } => run(&config, &overrides, sweep_levels),
        Command::Eval { run, step } => eval(&run, step),
        Command::Report { runs, plot, json, out } => report(&runs, plot, json, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn gen_data(seed: u64, classes: u8, images: usize, size: usize, out: &Path, val: Option<usize>, force: bool) -> ending_core::Result<()> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", out.display())));
        }
        std::fs::remove_dir_all(out)?;
    }
    let val = val.unwrap_or(images / 5);
    if val == 0 || val >= images {
        return Err(Error::Config(format!("need 0 < val images ({val}) < images ({images})")));
    }
    let all = generate_synthetic_dataset(seed, classes, images, size).map_err(|e| Error::Config(e.to_string()))?;
    let (train, valset) = all.split_at(images - val);
    export_voc_layout(out, &train, &valset, PROPOSAL_SLOTS)?;
    log::info!("wrote {} train / {} val images to {}", train.len(), valset.len(), out.display());
    Ok(())
}

fn level_subsets() -> Vec<Vec<usize>> {
    (0u8..8).map(|bits| (1..=3).filter(|l| bits & (1 << (l - 1)) != 0).collect()).collect()
}

fn run(config: &Path, overrides: &[String], sweep: bool) -> ending_core::Result<()> {
    let base = RunConfig::load(config, overrides)?;
    let configs: Vec<RunConfig> = if sweep {
        level_subsets()
            .into_iter()
            .map(|levels| {
                let tag = if levels.is_empty() { "none".to_string() } else { levels.iter().map(|l| l.to_string()).collect() };
                let extra = [
                    "model.fusion_mode=nfp".to_string(),
                    format!("fusion.levels={levels:?}"),
                    format!("output.run_name={}_nfp_{tag}", base.output.run_name),
                ];
                let text = serde_json::to_string(&base)?;
                RunConfig::from_json(&text, &extra)
            })
            .collect::<ending_core::Result<_>>()?
    } else {
        vec![base]
    };
    let mut rows = Vec::new();
    for cfg in configs {
        let dir = Path::new(&cfg.output.root).join(&cfg.output.run_name);
        log::info!("run {} -> {}", cfg.output.run_name, dir.display());
        let reports = Experiment::new(cfg.clone(), dir)?.run()?;
        rows.push(RunReports { name: cfg.output.run_name.clone(), reports });
    }
    print!("{}", render_table(&rows));
    Ok(())
}

fn last_step(run: &Path) -> Option<usize> {
    (1..).take_while(|s| run.join(format!("step_{s}")).join("checkpoint.safetensors").exists()).last()
}

fn eval(run: &Path, step: Option<usize>) -> ending_core::Result<()> {
    let cfg = RunConfig::load(&run.join("resolved_config.json"), &[])?;
    let task = build_task(&cfg.task.split, cfg.task.total_classes, cfg.task.mode)?;
    let step = match step.or_else(|| last_step(run)) {
        Some(s) => s,
        None => return Err(Error::MissingCheckpoint(run.join("step_1").join("checkpoint.safetensors"))),
    };
    let (model, reg) = load_trained(&cfg, &task, run, step)?;
    let (_, val) = load_datasets(&cfg)?;
    let report = evaluate(&model, &reg, &task, step, &val, cfg.train.batch_size)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn read_run(run: &Path, missing: &mut Vec<PathBuf>) -> RunReports {
    let mut reports = Vec::new();
    for step in 1.. {
        let dir = run.join(format!("step_{step}"));
        if !dir.exists() {
            break;
        }
        let path = dir.join("metrics.json");
        match std::fs::read(&path).ok().and_then(|b| serde_json::from_slice::<MetricReport>(&b).ok()) {
            Some(r) => reports.push(r),
            None => missing.push(path),
        }
    }
    if reports.is_empty() && !run.join("step_1").exists() {
        missing.push(run.join("step_1").join("metrics.json"));
    }
    let name = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
    RunReports { name, reports }
}

fn report(runs: &[PathBuf], plot: bool, json: bool, out: &Path) -> ending_core::Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut missing = Vec::new();
    let all: Vec<RunReports> = runs.iter().map(|r| read_run(r, &mut missing)).collect();
    for m in &missing {
        eprintln!("missing metrics: {}", m.display());
    }
    let present: Vec<RunReports> = all.into_iter().filter(|r| !r.reports.is_empty()).collect();
    if present.is_empty() {
        return Err(Error::Contract("no metrics found in any run".into()));
    }
    print!("{}", render_table(&present));
    emit_report(&present, ReportFormat::Table, out)?;
    if json {
        emit_report(&present, ReportFormat::Json, out)?;
    }
    if plot {
        let path = emit_report(&present, ReportFormat::Plot, out)?;
        eprintln!("plot written to {}", path.display());
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("{} metrics file(s) missing; partial report emitted", missing.len())))
    }
}
