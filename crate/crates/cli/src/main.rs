use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opzo::credit::Engine;
use opzo::experiment::{compare, read_record, run_with_progress, variance_study, RunConfig, RunRecord, RUN_PRESETS};
use opzo::metrics::{cost_model, CostModelInput};
use opzo::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "opzo", version, about = "Train and analyze spiking networks with online credit assignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one run described by a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print a preset run config as JSON.
    InitConfig {
        #[arg(long, value_parser = RUN_PRESETS)]
        preset: String,
        #[arg(long, default_value = "opzo")]
        engine: Engine,
        #[arg(long, default_value_t = 2022)]
        seed: u64,
    },
    /// Run the Monte-Carlo and finite-difference checks.
    Verify {
        /// lemmas, prop1, prop2, fd, oracle_eq or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize finished runs, grouped by dataset, model and engine.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// One epoch per engine, reporting per-layer batch-gradient variance.
    AnalyzeVariance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "bp_sg,opzo,zo_sp")]
        engines: Vec<Engine>,
    },
    /// Firing rates and synaptic operations of finished runs.
    ProfileEfficiency {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
    },
    /// Error-backward memory and operation counts per method.
    CostModel {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        m: u64,
        #[arg(long)]
        layers: u64,
    },
}

type CliResult<T = ()> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<ExitCode> {
    match cmd {
        Command::Train { config, out, quiet } => train(&config, out, quiet)?,
        Command::InitConfig { preset, engine, seed } => println!("{}", RunConfig::preset(&preset, engine, seed)?.to_json()?),
        Command::Verify { suite, seed } => return verify(&suite, seed),
        Command::Compare { runs, csv } => {
            let summary = compare(&load_records(&runs)?)?;
            print!("{}", summary.to_table());
            if let Some(path) = csv {
                fs::write(&path, summary.to_csv())?;
            }
        }
        Command::AnalyzeVariance { config, engines } => {
            let (cfg, _) = load_config(&config)?;
            let study = variance_study(&cfg, &engines, |e, r| {
                eprintln!("{e}: one epoch in {:.1}s, test acc {:.4}", r.wall_seconds, r.final_test_acc);
            })?;
            print!("{}", study.to_table());
            if let Some(base) = engines.first() {
                for &e in &engines[1..] {
                    if let Some(r) = study.ratio(e, *base) {
                        let cells: Vec<String> = r.iter().map(|x| format!("{x:.3e}")).collect();
                        println!("Var({e})/Var({base}): {}", cells.join(" "));
                    }
                }
            }
        }
        Command::ProfileEfficiency { runs } => {
            for (path, r) in runs.iter().zip(load_records(&runs)?) {
                let rates: Vec<String> = r.efficiency.layer_rates.iter().map(|f| format!("{f:.4}")).collect();
                println!(
                    "{} [{}] layer fr {} | total fr {:.4} | synops/sample {:.0}",
                    path.display(),
                    r.config.engine,
                    rates.join(" "),
                    r.efficiency.total_rate,
                    r.efficiency.synops_per_sample
                );
            }
        }
        Command::CostModel { n, m, layers } => {
            let input = CostModelInput::new(layers, n, m)?;
            if let Some(w) = input.warning() {
                eprintln!("warning: {w}");
            }
            println!("{}", cost_model(&input));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: &Path) -> CliResult<(RunConfig, String)> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.validate()?;
    Ok((cfg, text))
}

fn load_records(paths: &[PathBuf]) -> CliResult<Vec<RunRecord>> {
    paths.iter().map(|p| read_record(p).map_err(|e| format!("missing run record: {e}").into())).collect()
}

fn train(path: &Path, out: Option<PathBuf>, quiet: bool) -> CliResult {
    let (cfg, text) = load_config(path)?;
    let out_dir = out.or_else(|| cfg.out_dir.clone());
    let result = run_with_progress(&cfg, |m| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}",
                m.epoch, m.train_loss, m.train_acc, m.test_loss, m.test_acc
            );
        }
    })?;
    if let Some(dir) = out_dir {
        result.write(&dir)?;
        fs::write(dir.join("config.input.json"), &text)?;
        if !quiet {
            eprintln!("wrote {}", dir.display());
        }
    }
    println!("final test accuracy {:.4} ({:.1}s)", result.record.final_test_acc, result.record.wall_seconds);
    Ok(())
}

fn verify(suite: &str, seed: u64) -> CliResult<ExitCode> {
    let suites = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse::<Suite>()?] };
    let mut ok = true;
    for s in suites {
        for check in run_suite(s, seed)? {
            println!("[{}] {check}", s.as_str());
            ok &= check.passed;
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
