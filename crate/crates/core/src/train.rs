//! Loss, optimiser, training loop, metrics and gradient checking.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, Normalizer, WindowSet};
use crate::error::{dim_err, Error, Result};
use crate::features::SampleSet;
use crate::model::{Batch, Model, ModelConfig, ParamStore};
use crate::solver::SolveSpec;
use crate::tensor::{Tape, Tensor, Var};

/// Mean absolute deviation over every entry.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.value(pred).shape() != tape.value(target).shape() {
        return dim_err(format!(
            "prediction shape {:?} vs target {:?}",
            tape.value(pred).shape(),
            tape.value(target).shape()
        ));
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-3,
            patience: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_size and patience must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !self.lr.is_finite() || !self.weight_decay.is_finite() {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with the L2 penalty folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero task gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return dim_err(format!("gradient for '{name}' has shape {:?}", g.shape()));
                }
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n {
                return dim_err(format!("optimizer state for '{name}' has {} entries", m.len()));
            }
            let data = p.data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g.data()[i]) + self.weight_decay * data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerHorizon {
    pub mae: Vec<f64>,
    pub rmse: Vec<f64>,
    pub mape: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent.
    pub mape: f64,
    pub per_horizon: PerHorizon,
}

/// Targets with smaller magnitude are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
struct Acc {
    abs: f64,
    sq: f64,
    n: usize,
    pct: f64,
    pct_n: usize,
}

impl Acc {
    fn add(&mut self, pred: f64, y: f64) {
        let e = pred - y;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if y.abs() >= MAPE_FLOOR {
            self.pct += (e / y).abs();
            self.pct_n += 1;
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.abs += o.abs;
        self.sq += o.sq;
        self.n += o.n;
        self.pct += o.pct;
        self.pct_n += o.pct_n;
    }

    fn finish(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        let mape = if self.pct_n == 0 { 0.0 } else { self.pct / self.pct_n as f64 };
        (self.abs / n, (self.sq / n).sqrt(), mape)
    }
}

/// Accumulates de-normalised errors per horizon.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    horizon: usize,
    out_channels: usize,
    per: Vec<Acc>,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, out_channels: usize) -> Self {
        MetricAccumulator {
            horizon,
            out_channels,
            per: vec![Acc::default(); horizon],
        }
    }

    /// `pred` and `target` are row-major `rows × (horizon·out_channels)`.
    pub fn add(&mut self, pred: &[f64], target: &[f64]) -> Result<()> {
        let width = self.horizon * self.out_channels;
        if pred.len() != target.len() || pred.len() % width != 0 {
            return dim_err(format!("{} predictions vs {} targets", pred.len(), target.len()));
        }
        for (i, (&p, &y)) in pred.iter().zip(target).enumerate() {
            self.per[(i % width) / self.out_channels].add(p, y);
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        let mut all = Acc::default();
        let mut ph = PerHorizon::default();
        for a in &self.per {
            all.merge(a);
            let (mae, rmse, mape) = a.finish();
            ph.mae.push(mae);
            ph.rmse.push(rmse);
            ph.mape.push(mape);
        }
        if all.n == 0 {
            return Err(Error::Data("no predictions to score".into()));
        }
        let (mae, rmse, mape) = all.finish();
        Ok(MetricReport {
            mae,
            rmse,
            mape,
            per_horizon: ph,
        })
    }
}

/// Scores one block of predictions (both already in data units).
pub fn metrics(pred: &[f64], target: &[f64], horizon: usize, out_channels: usize) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(horizon, out_channels);
    acc.add(pred, target)?;
    acc.report()
}

fn denormalize(values: &mut [f64], norm: &Normalizer, out_channels: usize) {
    for (i, x) in values.iter_mut().enumerate() {
        *x = norm.denorm(*x, i % out_channels);
    }
}

/// Evaluation batch size; predictions do not depend on it.
const EVAL_BATCH: usize = 64;

/// Predictions for every sample in order, normalised units,
/// `samples × nodes × (horizon·out_channels)` flattened.
pub fn predict_all(model: &Model, set: &SampleSet, solve: &SolveSpec) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = set.batch(chunk)?;
        out.extend(model.predict(&batch, solve)?.into_data());
    }
    Ok(out)
}

/// De-normalised metrics of `model` on `set`.
pub fn evaluate(model: &Model, set: &SampleSet, norm: &Normalizer, solve: &SolveSpec) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let m = set.out_channels;
    let mut acc = MetricAccumulator::new(set.horizon, m);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = set.batch(chunk)?;
        let mut pred = model.predict(&batch, solve)?.into_data();
        let mut target = batch.target.expect("sample batches carry targets").into_data();
        denormalize(&mut pred, norm, m);
        denormalize(&mut target, norm, m);
        acc.add(&pred, &target)?;
    }
    acc.report()
}

/// Historical-average baseline: each horizon is forecast by the mean of the
/// observed inputs of the window.
pub fn historical_average(
    data: &Dataset,
    set: &WindowSet,
    norm: &Normalizer,
    out_channels: usize,
) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let mut acc = MetricAccumulator::new(set.horizon, out_channels);
    let n = set.input_len;
    for w in &set.windows {
        let mut pred = Vec::with_capacity(data.nodes() * set.horizon * out_channels);
        for v in 0..data.nodes() {
            let seen: Vec<usize> = (0..n)
                .filter(|&t| w.mask.as_ref().is_none_or(|m| m[v * n + t]))
                .collect();
            let means: Vec<f64> = (0..out_channels)
                .map(|c| seen.iter().map(|&t| data.value(v, w.offset + t, c)).sum::<f64>() / seen.len() as f64)
                .collect();
            for _ in 0..set.horizon {
                pred.extend_from_slice(&means);
            }
        }
        let mut target = set.target(data, w, out_channels);
        denormalize(&mut pred, norm, out_channels);
        denormalize(&mut target, norm, out_channels);
        acc.add(&pred, &target)?;
    }
    acc.report()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_mae\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{}\n", r.epoch, fmt_f64(r.train_loss), fmt_f64(r.val_mae)));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Completed,
    EarlyStopped { epoch: usize },
    /// Training hit a non-finite value; the returned model is the last good one.
    Diverged { epoch: usize, detail: String },
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Parameters with the best validation MAE seen.
    pub model: Model,
    pub history: History,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stop: StopReason,
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::BlowUp { .. })
}

/// Loss and parameter gradients on one batch.
pub fn loss_and_grads(model: &Model, batch: &Batch, solve: &SolveSpec) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let fwd = model.begin(&mut tape, true)?;
    let pred = fwd.forward(&mut tape, batch, solve)?;
    let target = batch
        .target
        .clone()
        .ok_or_else(|| Error::Contract("training batch without targets".into()))?;
    let t = tape.constant(target);
    let loss = l1_loss(&mut tape, pred, t)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    Ok((value, fwd.bound.collect(&mut grads)))
}

/// Mini-batch training with per-epoch validation and early stopping.
pub fn fit(
    mut model: Model,
    train: &SampleSet,
    val: &SampleSet,
    norm: &Normalizer,
    cfg: &TrainConfig,
    solve: &SolveSpec,
) -> Result<FitOutcome> {
    cfg.validate()?;
    solve.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut history = History::default();
    let mut best = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.batch(chunk)?;
            let step = loss_and_grads(&model, &batch, solve).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                opt.step(&mut model.params, &grads)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => total += loss * chunk.len() as f64,
                Err(e) if is_numeric(&e) => {
                    stop = StopReason::Diverged {
                        epoch,
                        detail: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if model.params.iter().any(|(_, t)| !t.is_finite()) {
            stop = StopReason::Diverged {
                epoch,
                detail: "parameters became non-finite".into(),
            };
            break;
        }
        let val_mae = match evaluate(&model, val, norm, solve) {
            Ok(r) => r.mae,
            Err(e) if is_numeric(&e) => {
                stop = StopReason::Diverged {
                    epoch,
                    detail: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_mae,
        });
        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best = model.params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::EarlyStopped { epoch };
                break;
            }
        }
    }
    model.params = best;
    Ok(FitOutcome {
        model,
        history,
        best_epoch,
        best_val_mae: best_val,
        stop,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Finite-difference step.
const FD_EPS: f64 = 1e-5;
/// Denominator floor so vanishing gradients do not inflate the relative error.
const REL_FLOOR: f64 = 1e-6;

/// Compares taped gradients of the L1 loss on one random batch against
/// central differences, for every parameter scalar.
pub fn gradcheck(cfg: &ModelConfig, solve: &SolveSpec, input_len: usize, seed: u64) -> Result<GradReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = match cfg.gnn_kind.needs_external_graph() {
        true => {
            let n = cfg.num_nodes;
            let ring = Tensor::new(
                vec![n, n],
                (0..n * n)
                    .map(|k| if (k / n + 1) % n == k % n || (k % n + 1) % n == k / n { 1.0 } else { 0.0 })
                    .collect(),
            )?;
            Model::with_graph(cfg.clone(), seed, &ring)?
        }
        false => Model::new(cfg.clone(), seed)?,
    };
    let batch_size = 2;
    let steps = input_len + cfg.horizon + batch_size - 1;
    let values: Vec<f64> = (0..cfg.num_nodes * steps * cfg.in_channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let data = Dataset::new("gradcheck", cfg.num_nodes, steps, cfg.in_channels, values)?;
    let set = crate::data::make_windows(&data, input_len, cfg.horizon)?;
    let samples = crate::features::build_samples(&data, &set, cfg, 2)?;
    let batch = samples.batch(&(0..batch_size).collect::<Vec<_>>())?;
    let (_, grads) = loss_and_grads(&model, &batch, solve)?;
    let target = batch.target.clone().expect("targets");
    let loss_at = |m: &Model| -> Result<f64> {
        let pred = m.predict(&batch, solve)?;
        let n = pred.numel() as f64;
        Ok(pred.data().iter().zip(target.data()).map(|(p, y)| (p - y).abs()).sum::<f64>() / n)
    };
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for name in names {
        let n = model.params.get(&name).map_or(0, Tensor::numel);
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
        for i in 0..n {
            let orig = model.params.get(&name).unwrap().data()[i];
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig + FD_EPS;
            let up = loss_at(&model)?;
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig - FD_EPS;
            let down = loss_at(&model)?;
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_EPS);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    Ok(GradReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        checked,
    })
}
