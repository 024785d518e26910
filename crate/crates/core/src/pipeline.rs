//! End-to-end runs: data preparation, per-fold training and artifact output.

use std::path::Path;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, fmt_f64, write_atomic, Dataset, Fold, Normalizer, WindowSet};
use crate::error::{Error, Result};
use crate::features::{build_samples, SampleSet};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{self, FitOutcome, MetricReport, StopReason};

/// Raw data, windows (with masks) and fold boundaries of a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Dataset,
    pub adjacency: Option<Tensor>,
    pub windows: WindowSet,
    pub folds: Vec<Fold>,
}

pub fn prepare(run: &RunConfig) -> Result<Prepared> {
    run.validate()?;
    let path = run
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no data file given (set `data` or pass --data)".into()))?;
    let data = data::load_csv(path, run.channels)?;
    if run.out_channels > data.channels() {
        return Err(Error::Config("out_channels exceeds the data's channels".into()));
    }
    let adjacency = match &run.adjacency {
        Some(p) => Some(data::adjacency(&data::load_edges(p)?, data.nodes())?),
        None => None,
    };
    let mut windows = data::make_windows(&data, run.input_len, run.horizon)?;
    if run.drop_rate > 0.0 {
        windows = data::drop_observations(&windows, run.drop_rate, run.seed)?;
    }
    let folds = run.split_plan().split(windows.len())?;
    Ok(Prepared {
        data,
        adjacency,
        windows,
        folds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Part::Train),
            "val" | "valid" | "validation" => Ok(Part::Val),
            "test" => Ok(Part::Test),
            _ => Err(Error::Config(format!("unknown split part '{s}' (train|val|test)"))),
        }
    }
}

/// One fold, normalised with its own training statistics.
pub struct FoldData {
    pub norm: Normalizer,
    pub data: Dataset,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl FoldData {
    pub fn windows(&self, part: Part) -> &WindowSet {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    pub fn samples(&self, part: Part, cfg: &ModelConfig, run: &RunConfig) -> Result<SampleSet> {
        build_samples(&self.data, self.windows(part), cfg, run.logsig_substeps)
    }
}

pub fn fold_data(prep: &Prepared, fold: usize) -> Result<FoldData> {
    let f = prep
        .folds
        .get(fold)
        .ok_or_else(|| Error::Config(format!("fold {fold} out of range (0..{})", prep.folds.len())))?;
    let train = prep.windows.subset(f.train.clone());
    let norm = Normalizer::fit(&prep.data, train.time_span())?;
    Ok(FoldData {
        data: norm.apply(&prep.data),
        norm,
        train,
        val: prep.windows.subset(f.val.clone()),
        test: prep.windows.subset(f.test.clone()),
    })
}

pub fn build_model(run: &RunConfig, prep: &Prepared) -> Result<Model> {
    let cfg = run.model_config(prep.data.nodes());
    match &prep.adjacency {
        Some(a) if cfg.gnn_kind.needs_external_graph() => Model::with_graph(cfg, run.seed, a),
        _ => Model::new(cfg, run.seed),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stop: String,
    pub train: MetricReport,
    pub val: MetricReport,
    pub test: MetricReport,
    pub historical_average_test: MetricReport,
}

pub struct FoldRun {
    pub report: FoldReport,
    pub outcome: FitOutcome,
    pub norm: Normalizer,
}

/// Trains and scores one fold.
pub fn run_fold(run: &RunConfig, prep: &Prepared, fold: usize) -> Result<FoldRun> {
    let fd = fold_data(prep, fold)?;
    let model = build_model(run, prep)?;
    let cfg = model.config.clone();
    let train_set = fd.samples(Part::Train, &cfg, run)?;
    let val_set = fd.samples(Part::Val, &cfg, run)?;
    let test_set = fd.samples(Part::Test, &cfg, run)?;
    let solve = run.solve_spec();
    let outcome = train::fit(model, &train_set, &val_set, &fd.norm, &run.train_config(), &solve)?;
    let stop = match &outcome.stop {
        StopReason::Completed => "completed".to_string(),
        StopReason::EarlyStopped { epoch } => format!("early stop at epoch {epoch}"),
        StopReason::Diverged { epoch, detail } => format!("diverged at epoch {epoch}: {detail}"),
    };
    let m = &outcome.model;
    let report = FoldReport {
        fold,
        epochs_run: outcome.history.epochs.len(),
        best_epoch: outcome.best_epoch,
        stop,
        train: train::evaluate(m, &train_set, &fd.norm, &solve)?,
        val: train::evaluate(m, &val_set, &fd.norm, &solve)?,
        test: train::evaluate(m, &test_set, &fd.norm, &solve)?,
        historical_average_test: train::historical_average(&fd.data, &fd.test, &fd.norm, run.out_channels)?,
    };
    Ok(FoldRun {
        report,
        outcome,
        norm: fd.norm,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn write_fold(dir: &Path, run: &RunConfig, fr: &FoldRun) -> Result<()> {
    Checkpoint {
        model: fr.outcome.model.clone(),
        run: Some(run.clone()),
        normalizer: Some(fr.norm.clone()),
    }
    .save(&dir.join("checkpoint.bin"))?;
    write_atomic(&dir.join("history.csv"), fr.outcome.history.to_csv().as_bytes())?;
    write_json(&dir.join("metrics.json"), &fr.report)
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub mean: Summary,
    pub std: Summary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Outcome of `train`: one report per fold, plus whether any fold diverged.
pub struct TrainResult {
    pub folds: Vec<FoldReport>,
    pub diverged: Option<String>,
}

/// Runs every fold of `run` and writes artifacts under `out`.
///
/// Single split: `checkpoint.bin`, `history.csv`, `metrics.json` and
/// `resolved.conf` in `out`. Cross-validation: the same per fold under
/// `fold_<k>/`, with `metrics.json` in `out` holding every fold plus the
/// mean and standard deviation of the test metrics.
pub fn train_and_save(run: &RunConfig, out: &Path) -> Result<TrainResult> {
    let prep = prepare(run)?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("resolved.conf"), run.to_text().as_bytes())?;
    let cv = prep.folds.len() > 1;
    let mut reports = Vec::new();
    let mut diverged = None;
    for k in 0..prep.folds.len() {
        let fr = run_fold(run, &prep, k)?;
        let dir = if cv { out.join(format!("fold_{k}")) } else { out.to_path_buf() };
        std::fs::create_dir_all(&dir)?;
        write_fold(&dir, run, &fr)?;
        if cv {
            write_atomic(&dir.join("resolved.conf"), run.to_text().as_bytes())?;
        }
        if let StopReason::Diverged { .. } = fr.outcome.stop {
            diverged.get_or_insert_with(|| format!("fold {k}: {}", fr.report.stop));
        }
        reports.push(fr.report);
    }
    if cv {
        let col = |f: fn(&MetricReport) -> f64| mean_std(&reports.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
        let (mae, rmse, mape) = (col(|m| m.mae), col(|m| m.rmse), col(|m| m.mape));
        write_json(
            &out.join("metrics.json"),
            &CvReport {
                folds: reports.clone(),
                mean: Summary {
                    mae: mae.0,
                    rmse: rmse.0,
                    mape: mape.0,
                },
                std: Summary {
                    mae: mae.1,
                    rmse: rmse.1,
                    mape: mape.1,
                },
            },
        )?;
    }
    Ok(TrainResult {
        folds: reports,
        diverged,
    })
}

/// The run config stored in a checkpoint, with an optional data override.
fn checkpoint_run(ck: &Checkpoint, data: Option<&Path>) -> Result<RunConfig> {
    let mut run = ck
        .run
        .clone()
        .ok_or_else(|| Error::Load("checkpoint carries no run configuration".into()))?;
    if let Some(d) = data {
        run.data = Some(d.to_path_buf());
    }
    Ok(run)
}

/// Loads a checkpoint and rebuilds the requested split exactly as training did.
pub fn reload(ck: &Checkpoint, data: Option<&Path>, fold: usize) -> Result<(RunConfig, FoldData)> {
    let run = checkpoint_run(ck, data)?;
    let prep = prepare(&run)?;
    if prep.data.nodes() != ck.model.config.num_nodes {
        return Err(Error::Load(format!(
            "checkpoint expects {} nodes, data has {}",
            ck.model.config.num_nodes,
            prep.data.nodes()
        )));
    }
    let fd = fold_data(&prep, fold)?;
    if let Some(n) = &ck.normalizer {
        if *n != fd.norm {
            return Err(Error::Load("data statistics differ from those stored in the checkpoint".into()));
        }
    }
    Ok((run, fd))
}

pub fn evaluate_checkpoint(ck: &Checkpoint, data: Option<&Path>, part: Part, fold: usize) -> Result<MetricReport> {
    let (run, fd) = reload(ck, data, fold)?;
    let set = fd.samples(part, &ck.model.config, &run)?;
    train::evaluate(&ck.model, &set, &fd.norm, &run.solve_spec())
}

/// Forecast CSV `window,node,horizon,value` (plus `channel` when more than
/// one output channel), values in data units. `window` is the window's
/// start offset in the series.
pub fn predict_checkpoint(ck: &Checkpoint, data: Option<&Path>, part: Part, fold: usize) -> Result<String> {
    let (run, fd) = reload(ck, data, fold)?;
    let cfg = &ck.model.config;
    let set = fd.samples(part, cfg, &run)?;
    let pred = train::predict_all(&ck.model, &set, &run.solve_spec())?;
    let (v, s, m) = (cfg.num_nodes, cfg.horizon, cfg.out_channels);
    let multi = m > 1;
    let mut out = String::from(if multi { "window,node,horizon,channel,value\n" } else { "window,node,horizon,value\n" });
    for (i, sample) in set.samples.iter().enumerate() {
        for node in 0..v {
            for h in 0..s {
                for c in 0..m {
                    let x = fd.norm.denorm(pred[((i * v + node) * s + h) * m + c], c);
                    if multi {
                        out.push_str(&format!("{},{node},{},{c},{}\n", sample.offset, h + 1, fmt_f64(x)));
                    } else {
                        out.push_str(&format!("{},{node},{},{}\n", sample.offset, h + 1, fmt_f64(x)));
                    }
                }
            }
        }
    }
    Ok(out)
}
