use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stgnrde::checkpoint::Checkpoint;
use stgnrde::config::RunConfig;
use stgnrde::data::{self, fmt_f64, write_atomic, SynthSpec};
use stgnrde::logsig::{window_logsig, LyndonBasis};
use stgnrde::path::fit_spline;
use stgnrde::pipeline::{self, Part};
use stgnrde::verify::{self, Suite};
use stgnrde::{Error, Result};

#[derive(Parser)]
#[command(name = "stgnrde", version, about = "Graph neural rough differential equations for traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ring-graph dataset (values.csv, adjacency.csv).
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        nodes: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        timesteps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Period of each node's sinusoid, in timesteps.
        #[arg(long, default_value_t = 24)]
        period: usize,
        /// Noise standard deviation as a fraction of the amplitude.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Weight of the lagged ring-neighbour term.
        #[arg(long, default_value_t = 0.5)]
        coupling: f64,
    },
    /// Dump log-signatures of the first window of a dataset.
    Logsig {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        depth: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        subpath: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Number of timesteps in the window.
        #[arg(long, default_value_t = 12)]
        input_len: usize,
        /// Chord samples per grid interval.
        #[arg(long, default_value_t = 4)]
        substeps: usize,
    },
    /// Train a model and write checkpoint, history, metrics and resolved config.
    Train {
        /// Run configuration file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Bundled preset (synth, pemsd3, pemsd4, pemsd7, pemsd8, pemsd7m, pemsd7l).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        adjacency: Option<PathBuf>,
        /// full | temporal | spatial
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        drop_rate: Option<f64>,
        /// rolling | blocked
        #[arg(long)]
        cv: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Print metrics of a checkpoint on one split as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Write per-window forecasts as CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run built-in property suites.
    Verify {
        /// logsig | grad | solver | all
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn synth(spec: SynthSpec, out: &Path) -> Result<()> {
    let (d, edges) = spec.write(out)?;
    println!(
        "wrote {} ({} nodes x {} timesteps) and {} ({} edges)",
        out.join("values.csv").display(),
        d.nodes(),
        d.timesteps(),
        out.join("adjacency.csv").display(),
        edges.len()
    );
    Ok(())
}

fn logsig_dump(data: &Path, channels: usize, input_len: usize, depth: usize, subpath: usize, substeps: usize, out: &Path) -> Result<()> {
    let ds = data::load_csv(data, channels)?;
    let windows = data::make_windows(&ds, input_len, 1)?;
    let series = windows.input(&ds, &windows.windows[0])?;
    let path = fit_spline(&series)?;
    let basis = LyndonBasis::new(path.path_channels(), depth)?;
    let knots: Vec<f64> = (0..input_len).map(|t| t as f64).collect();
    let seq = window_logsig(&path, &knots, &basis, subpath, substeps)?;
    let mut s = String::from("window,node");
    for i in 0..basis.len() {
        s.push_str(&format!(",coord_{i}"));
    }
    s.push('\n');
    for w in 0..seq.windows() {
        for v in 0..seq.nodes() {
            s.push_str(&format!("{w},{v}"));
            for x in seq.get(w, v) {
                s.push(',');
                s.push_str(&fmt_f64(*x));
            }
            s.push('\n');
        }
    }
    write_atomic(out, s.as_bytes())?;
    println!("wrote {} ({} windows x {} nodes, {} coordinates)", out.display(), seq.windows(), seq.nodes(), basis.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: Option<PathBuf>,
    preset: Option<String>,
    data: Option<PathBuf>,
    adjacency: Option<PathBuf>,
    variant: Option<String>,
    drop_rate: Option<f64>,
    cv: Option<String>,
    seed: Option<u64>,
    epochs: Option<usize>,
    overrides: Vec<String>,
    out: &Path,
) -> Result<i32> {
    let mut run = match (config, preset) {
        (Some(p), _) => RunConfig::load(&p)?,
        (None, Some(name)) => RunConfig::preset(&name)?,
        (None, None) => return Err(Error::Config("pass --config FILE or --preset NAME".into())),
    };
    if let Some(d) = data {
        run.data = Some(d);
    }
    if let Some(a) = adjacency {
        run.adjacency = Some(a);
    }
    if let Some(v) = variant {
        run.variant = v.parse()?;
    }
    if let Some(r) = drop_rate {
        run.drop_rate = r;
    }
    if let Some(c) = cv {
        run.split = match c.as_str() {
            "rolling" | "rolling_cv" | "blocked" | "blocked_cv" => c.parse()?,
            _ => return Err(Error::Config(format!("--cv expects rolling or blocked, got '{c}'"))),
        };
    }
    if let Some(s) = seed {
        run.seed = s;
    }
    if let Some(e) = epochs {
        run.epochs = e;
    }
    for o in &overrides {
        run.apply_override(o)?;
    }
    run.validate()?;
    let result = pipeline::train_and_save(&run, out)?;
    for f in &result.folds {
        println!(
            "fold {}: {} epochs ({}), best epoch {}; test MAE {:.4} RMSE {:.4} MAPE {:.2}% | HA MAE {:.4}",
            f.fold,
            f.epochs_run,
            f.stop,
            f.best_epoch,
            f.test.mae,
            f.test.rmse,
            100.0 * f.test.mape,
            f.historical_average_test.mae
        );
    }
    println!("artifacts in {}", out.display());
    if let Some(msg) = result.diverged {
        eprintln!("error: training diverged ({msg}); kept the last good checkpoint");
        return Ok(3);
    }
    Ok(0)
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            nodes,
            timesteps,
            seed,
            out,
            period,
            noise,
            coupling,
        } => {
            let spec = SynthSpec {
                period,
                noise,
                coupling,
                ..SynthSpec::new(nodes as usize, timesteps as usize, seed)
            };
            synth(spec, &out)?;
        }
        Command::Logsig {
            data,
            depth,
            subpath,
            out,
            channels,
            input_len,
            substeps,
        } => logsig_dump(&data, channels, input_len, depth as usize, subpath as usize, substeps, &out)?,
        Command::Train {
            config,
            preset,
            data,
            adjacency,
            variant,
            drop_rate,
            cv,
            seed,
            epochs,
            overrides,
            out,
        } => return train(config, preset, data, adjacency, variant, drop_rate, cv, seed, epochs, overrides, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            fold,
        } => {
            let part: Part = split.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let report = pipeline::evaluate_checkpoint(&ck, data.as_deref(), part, fold)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            split,
            fold,
        } => {
            let part: Part = split.parse()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let csv = pipeline::predict_checkpoint(&ck, data.as_deref(), part, fold)?;
            write_atomic(&out, csv.as_bytes())?;
            println!("wrote {} ({} rows)", out.display(), csv.lines().count() - 1);
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let checks = verify::run(suite)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed > 0 {
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
