//! `liveval` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric or
//! solver failure, 4 I/O failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use liveval::baselines::BaselineMethod;
use liveval::dataio::save_csv;
use liveval::experiment::{
    detection_metric, export_results, pool_values, prepare_seed, run_baseline, run_experiment,
    run_liveval, run_probe, volatility_csv, ExperimentConfig, ExportFormat, RunManifest, SeedSetup,
    LIVEVAL,
};
use liveval::trainer::run_training;
use liveval::valuation::{basic_valuate, ValuationLedger};
use liveval::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "liveval", version, about = "Training-integrated data valuation experiments")]
struct Cli {
    /// Experiment configuration (TOML or JSON); a run manifest also works.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the dataset, inject corruption and write it out with its manifest.
    Corrupt,
    /// Train once and value every sample.
    TrainValue {
        #[arg(long, value_enum, default_value_t = Method::Liveval)]
        method: Method,
        /// Also persist the full trajectory here (basic method only).
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run one comparison method on the evaluation pool.
    Baseline {
        #[arg(long, value_enum)]
        method: Baseline,
    },
    /// Run the configured experiment over all seeds and export result tables.
    Report {
        #[arg(long, value_enum, default_value_t = Format::All)]
        format: Format,
    },
    /// Measure step-value spread across training seeds.
    ProbeVolatility,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Liveval,
    Basic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Loo,
    If,
    Gradnd,
}

impl From<Baseline> for BaselineMethod {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Loo => BaselineMethod::Loo,
            Baseline::If => BaselineMethod::If,
            Baseline::Gradnd => BaselineMethod::Gradnd,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
    All,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn to_json(value: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds[0]
}

fn pool_json(setup: &SeedSetup) -> Result<String> {
    let ids: Vec<u64> = setup.pool.iter().map(|&r| setup.train.ids()[r]).collect();
    to_json(&serde_json::json!({ "seed": setup.seed, "pool_ids": ids }))
}

fn cmd_corrupt(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let setup = prepare_seed(config, first_seed(config))?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_csv(&setup.train, out.join("train.csv"))?;
    if !setup.holdout.is_empty() {
        save_csv(&setup.holdout, out.join("holdout.csv"))?;
    }
    write(out, "corruption.json", &setup.corruption.to_json()?)?;
    write(out, "pool.json", &pool_json(&setup)?)?;
    println!(
        "seed {}: {} rows, {} corrupted, dataset {}",
        setup.seed,
        setup.train.len(),
        setup.train.corrupted_count(),
        setup.train.digest()
    );
    Ok(())
}

fn values_table(setup: &SeedSetup, values: &[f64]) -> String {
    let mut out = String::from("sample_id,value,corrupted,in_pool\n");
    for (row, v) in values.iter().enumerate() {
        let in_pool = setup.pool.binary_search(&row).is_ok();
        let _ = writeln!(
            out,
            "{},{v:?},{},{}",
            setup.train.ids()[row],
            setup.train.mask()[row] as u8,
            in_pool as u8
        );
    }
    out
}

fn report_detection(name: &str, setup: &SeedSetup, values: &std::collections::BTreeMap<usize, f64>, k: usize) -> Result<()> {
    let r = detection_metric(name, values, setup.train.mask(), k, &setup.pool)?;
    println!("{name}: {}/{} corrupted rows among the {} lowest-valued pool members", r.detected, r.k, r.k);
    Ok(())
}

fn cmd_train_value(config: &ExperimentConfig, out: &Path, method: Method, store: Option<&Path>) -> Result<()> {
    let setup = prepare_seed(config, first_seed(config))?;
    let ids = setup.train.ids();
    let (name, ledger, params): (&str, ValuationLedger, _) = match method {
        Method::Liveval => {
            let run = run_liveval(&setup, config.valuation, false)?;
            let deltas = run.engine.deltas();
            let mut window = String::from("step,delta\n");
            for (t, d) in deltas.iter().enumerate() {
                let _ = writeln!(window, "{t},{d}");
            }
            write(out, "window.csv", &window)?;
            println!("liveval: {:.1} ms", run.resources.wall_ms);
            (LIVEVAL, run.engine.into_ledger(), run.final_params)
        }
        Method::Basic => {
            let trajectory = run_training(&setup.model, &setup.train, &setup.train_config, &mut [])?;
            if let Some(dir) = store {
                trajectory.save(dir, setup.model.spec())?;
            }
            let ledger = basic_valuate(&trajectory, &setup.model, &setup.train, config.valuation.denominator)?;
            ("basic", ledger, trajectory.final_params)
        }
    };
    write(out, &format!("values_{name}.csv"), &values_table(&setup, ledger.cumulative()))?;
    write(out, &format!("step_values_{name}.csv"), &ledger.step_values_csv(ids))?;
    params.save(out.join("params.bin"), setup.model.spec())?;
    write(out, "pool.json", &pool_json(&setup)?)?;
    report_detection(name, &setup, &pool_values(ledger.cumulative(), &setup.pool), config.corruption.count)
}

fn cmd_baseline(config: &ExperimentConfig, out: &Path, method: BaselineMethod) -> Result<()> {
    let setup = prepare_seed(config, first_seed(config))?;
    let result = run_baseline(&setup, method, &config.baselines)?;
    let mut values = String::from("sample_id,value,corrupted\n");
    for (&row, v) in &result.values {
        let _ = writeln!(values, "{},{v:?},{}", setup.train.ids()[row], setup.train.mask()[row] as u8);
    }
    write(out, &format!("values_{}.csv", method.name()), &values)?;
    write(
        out,
        "resources.csv",
        &format!(
            "method,wall_ms,peak_rss_bytes\n{},{:.3},{}\n",
            method.name(),
            result.resources.wall_ms,
            result.resources.peak_rss_bytes
        ),
    )?;
    write(out, &format!("{}_details.json", method.name()), &to_json(&result.details)?)?;
    println!("{}: {:.1} ms", method.name(), result.resources.wall_ms);
    if result.values.len() == setup.pool.len() {
        report_detection(method.name(), &setup, &result.values, config.corruption.count)?;
    }
    Ok(())
}

fn cmd_report(config: &ExperimentConfig, out: &Path, format: Format) -> Result<()> {
    let outcome = run_experiment(config)?;
    let format = match format {
        Format::Csv => ExportFormat::Csv,
        Format::Json => ExportFormat::Json,
        Format::All => ExportFormat::All,
    };
    if !outcome.detections.is_empty() {
        for f in export_results(&outcome, out, format)? {
            println!("wrote {}", f.display());
        }
    }
    println!("{:<10} {:>4} {:>6} {:>8} {:>8}", "method", "k", "runs", "mean", "std");
    for row in outcome.summary() {
        println!("{:<10} {:>4} {:>6} {:>8.2} {:>8.2}", row.method, row.k, row.runs, row.mean, row.std);
    }
    match outcome.failure {
        Some(f) => Err(Error::Numeric(format!("seed {} failed in stage {}: {}", f.seed, f.stage, f.message))),
        None => Ok(()),
    }
}

fn cmd_probe(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let report = run_probe(config)?;
    write(out, "volatility.csv", &volatility_csv(&report))?;
    write(out, "volatility.json", &to_json(&report)?)?;
    println!(
        "{} runs, {} pairs ({} seen once), {} above 2ηĜ/D, {} above ηĜ/D, Spearman(t, max σ) = {}",
        report.runs,
        report.entries.len(),
        report.skipped,
        report.violations,
        report.tight_violations,
        report.spearman_step_vs_max.map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Corrupt => cmd_corrupt(&config, out),
        Command::TrainValue { method, store } => cmd_train_value(&config, out, *method, store.as_deref()),
        Command::Baseline { method } => cmd_baseline(&config, out, (*method).into()),
        Command::Report { format } => cmd_report(&config, out, *format),
        Command::ProbeVolatility => cmd_probe(&config, out),
        Command::ShowConfig => {
            print!("{}", config.to_toml()?);
            let manifest = RunManifest::new(config);
            eprintln!("manifest digest {}", manifest.digest());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Numeric => 3,
                ErrorClass::Io => 4,
            })
        }
    }
}
