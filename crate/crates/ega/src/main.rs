//! Experiment CLI: dataset generation, single runs, strategy comparison,
//! noise-robustness sweeps, and report aggregation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ega::config::{ExperimentConfig, NoiseProtocol};
use ega::error::{Error, Result};
use ega::harness::{
    aggregate_rows, compare_strategies, noise_sweep, run_rows, sweep_protocols, sweep_rows, train,
    CompareOutput, ReportGroup, RunRecord, SweepOutput,
};
use ega::metrics::{read_rows, write_rows, MetricRow};
use ega::synth::{gen_record, write_record_file};

#[derive(Parser)]
#[command(name = "ega", version, about = "Multi-task gradient balancing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic dataset records as text files
    Gen(CommonArgs),
    /// Run one training experiment and export its metric rows
    Train(CommonArgs),
    /// Compare strategies over repeated seeds (first one is the baseline)
    Compare(CommonArgs),
    /// Train once on clean data and evaluate under the noise grid
    Sweep(CommonArgs),
    /// Aggregate exported metric rows into a summary table
    Report {
        /// Paths of rows.csv files to aggregate
        inputs: Vec<PathBuf>,
        /// Directory for the aggregated table (report.csv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the strategy id (for `compare`: comma-separated list)
    #[arg(long)]
    strategy: Option<String>,
    /// Override the softmax temperature
    #[arg(long)]
    temperature: Option<f64>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(strategy) = &self.strategy {
            if strategy.contains(',') {
                config.compare_strategies =
                    strategy.split(',').map(|s| s.trim().to_string()).collect();
            } else {
                config.strategy.id = strategy.clone();
                config.compare_strategies = vec![strategy.clone()];
            }
        }
        if let Some(t) = self.temperature {
            config.strategy.temperature = t;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let config = args.load()?;
            cmd_gen(&config, &args.out)
        }
        Command::Train(args) => {
            let config = args.load()?;
            cmd_train(&config, &args.out)
        }
        Command::Compare(args) => {
            let config = args.load()?;
            cmd_compare(&config, &args.out)
        }
        Command::Sweep(args) => {
            let config = args.load()?;
            cmd_sweep(&config, &args.out)
        }
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_rows(file, rows)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let mean_ppi = 0.5 * (config.synth.ppi.lo() + config.synth.ppi.hi());
    let k = ((config.dataset.record_s / mean_ppi).round() as usize).max(1);
    for i in 0..config.dataset.records {
        let seed = ega::config::derive_seed(config.seed, 1000 + i as u64);
        let record = gen_record(seed, &config.synth, k)?;
        let path = out.join(format!("record_{i:04}.txt"));
        write_record_file(&path, &record)?;
    }
    println!(
        "wrote {} records (~{:.0}s each at {} Hz) to {}",
        config.dataset.records,
        config.dataset.record_s,
        config.synth.fs,
        out.display()
    );
    Ok(())
}

fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let result = train(config)?;
    let rows = run_rows(&result.record, &config.noise);
    write_csv(&out.join("rows.csv"), &rows)?;
    write_json(&out.join("run.json"), &result.record)?;
    result.model.save_checkpoint(out.join("model.json"))?;
    print_run(&result.record, &config.noise);
    println!("\nwrote rows.csv, run.json, model.json to {}", out.display());
    Ok(())
}

fn cmd_compare(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let output = compare_strategies(config, &config.compare_strategies)?;
    write_csv(&out.join("rows.csv"), &output.rows)?;
    write_json(&out.join("compare.json"), &output.summaries)?;
    print_compare(&output);
    println!("\nwrote rows.csv, compare.json to {}", out.display());
    Ok(())
}

fn cmd_sweep(config: &ExperimentConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let protocols = sweep_protocols(config);
    let output = noise_sweep(config, &protocols)?;
    let rows = sweep_rows(&output);
    write_csv(&out.join("rows.csv"), &rows)?;
    write_json(&out.join("sweep.json"), &output)?;
    print_sweep(&output);
    println!("\nwrote rows.csv, sweep.json to {}", out.display());
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("report needs at least one rows.csv path".into()));
    }
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_rows(fs::File::open(path)?)?);
    }
    let groups = aggregate_rows(&rows);
    print_report(&groups);
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let mut text = String::from("strategy,T,noise_type,noise_db,task,metric,runs,mean,ci95\n");
        for g in &groups {
            let db = g.noise_db.map(|v| v.to_string()).unwrap_or_default();
            let ci = g.ci95.map(|v| v.to_string()).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                g.strategy, g.temperature, g.noise_type, db, g.task, g.metric, g.runs, g.mean, ci
            ));
        }
        fs::write(dir.join("report.csv"), text)?;
        println!("\nwrote report.csv to {}", dir.display());
    }
    Ok(())
}

fn print_run(record: &RunRecord, noise: &NoiseProtocol) {
    println!("run {} seed {} strategy {}", record.config_hash, record.seed, record.strategy);
    println!("evaluation noise: {}", noise.label());
    if let Some(last) = record.epoch_losses.last() {
        println!(
            "final epoch losses: wave {:.5}  anchor {:.5}  length {:.5}",
            last[0], last[1], last[2]
        );
    }
    if record.skipped_updates > 0 {
        println!("skipped {} degenerate trunk updates", record.skipped_updates);
    }
    println!("{:<6} {:<18} {:>12}", "task", "metric", "value");
    for entry in &record.metrics {
        println!("{:<6} {:<18} {:>12.6}", entry.task, entry.metric, entry.value);
    }
}

fn print_compare(output: &CompareOutput) {
    println!("baseline strategy: {}", output.baseline);
    println!(
        "{:<16} {:>14} {:>12}  per-metric mean±ci",
        "strategy", "delta_m% ± ci", "p-value"
    );
    for s in &output.summaries {
        let p = s
            .p_value
            .map(|p| format!("{p:.4}"))
            .unwrap_or_else(|| "-".into());
        let mut cells = Vec::new();
        for (entry, ci) in &s.per_metric {
            cells.push(format!("{}/{} {:.4}±{:.4}", entry.task, entry.metric, entry.value, ci));
        }
        println!(
            "{:<16} {:>7.2}±{:<6.2} {:>12}  {}",
            s.strategy,
            s.delta_m_mean,
            s.delta_m_ci,
            p,
            cells.join("  ")
        );
    }
}

fn print_sweep(output: &SweepOutput) {
    println!(
        "clean baseline ({} epochs, strategy {}):",
        output.baseline.epochs, output.baseline.strategy
    );
    for entry in &output.baseline.metrics {
        println!("  {}/{} = {:.6}", entry.task, entry.metric, entry.value);
    }
    println!("training traces untouched: {}", output.train_trace_hash_before == output.train_trace_hash_after);
    if let Some(monotone) = output.constant_trend_monotone() {
        println!("monotone degradation over constant-SNR levels: {monotone}");
    }
    println!("{:<28} {:>12}", "noise level", "delta_m%");
    for row in &output.rows {
        println!("{:<28} {:>12.3}", row.protocol.label(), row.delta_m_pct);
    }
}

fn print_report(groups: &[ReportGroup]) {
    println!(
        "{:<16} {:>5} {:<10} {:>8} {:<5} {:<18} {:>5} {:>12} {:>10}",
        "strategy", "T", "noise", "dB", "task", "metric", "runs", "mean", "ci95"
    );
    for g in groups {
        let db = g.noise_db.map(|v| format!("{v}")).unwrap_or_else(|| "-".into());
        let ci = g.ci95.map(|v| format!("{v:.5}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:>5} {:<10} {:>8} {:<5} {:<18} {:>5} {:>12.6} {:>10}",
            g.strategy, g.temperature, g.noise_type, db, g.task, g.metric, g.runs, g.mean, ci
        );
    }
}
