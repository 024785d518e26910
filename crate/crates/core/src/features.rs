//! Turns windows of a normalised dataset into model-ready samples.
//!
//! Each window is interpolated, cut into sub-paths and reduced to one
//! log-signature per (sub-path, node). Those are divided by the sub-path
//! length once here, so the solver sees the piecewise-constant control
//! directly.

use crate::data::{Dataset, WindowSet};
use crate::error::{Error, Result};
use crate::logsig::{window_logsig, LyndonBasis};
use crate::model::{Batch, ModelConfig};
use crate::path::fit_spline;
use crate::tensor::Tensor;

/// Precomputed inputs and targets of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub offset: usize,
    /// `nodes × in_channels`.
    pub first_frame: Vec<f64>,
    /// `windows × nodes × L`, already divided by each window's length.
    pub controls: Vec<f64>,
    /// `nodes × (horizon·out_channels)`.
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SampleSet {
    pub nodes: usize,
    pub in_channels: usize,
    pub width: usize,
    pub horizon: usize,
    pub out_channels: usize,
    pub window_lengths: Vec<f64>,
    pub samples: Vec<Sample>,
}

/// Log-signature features of every window in `set`.
pub fn build_samples(data: &Dataset, set: &WindowSet, cfg: &ModelConfig, substeps: usize) -> Result<SampleSet> {
    if data.nodes() != cfg.num_nodes || data.channels() != cfg.in_channels {
        return Err(Error::Dimension(format!(
            "dataset has {} nodes x {} channels, model expects {} x {}",
            data.nodes(),
            data.channels(),
            cfg.num_nodes,
            cfg.in_channels
        )));
    }
    if set.horizon != cfg.horizon {
        return Err(Error::Dimension(format!(
            "windows forecast {} steps, model predicts {}",
            set.horizon, cfg.horizon
        )));
    }
    let basis = LyndonBasis::new(cfg.path_channels(), cfg.sig_depth)?;
    let knot_times: Vec<f64> = (0..set.input_len).map(|t| t as f64).collect();
    let mut window_lengths = Vec::new();
    let mut samples = Vec::with_capacity(set.len());
    for w in &set.windows {
        let series = set.input(data, w)?;
        let path = fit_spline(&series)?;
        let seq = window_logsig(&path, &knot_times, &basis, cfg.subpath_len, substeps)?;
        if window_lengths.is_empty() {
            window_lengths = (0..seq.windows()).map(|i| seq.divisor(i)).collect();
        }
        let mut controls = Vec::with_capacity(seq.data().len());
        for (i, len) in window_lengths.iter().enumerate() {
            controls.extend(seq.window_block(i).iter().map(|x| x / len));
        }
        let first_frame = (0..data.nodes())
            .flat_map(|v| (0..data.channels()).map(move |c| (v, c)))
            .map(|(v, c)| data.value(v, w.offset, c))
            .collect();
        samples.push(Sample {
            offset: w.offset,
            first_frame,
            controls,
            target: set.target(data, w, cfg.out_channels),
        });
    }
    Ok(SampleSet {
        nodes: data.nodes(),
        in_channels: data.channels(),
        width: basis.len(),
        horizon: set.horizon,
        out_channels: cfg.out_channels,
        window_lengths,
        samples,
    })
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen samples, sample-major, into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let rows = indices.len() * self.nodes;
        let block = self.nodes * self.width;
        let out = self.horizon * self.out_channels;
        let mut first = Vec::with_capacity(rows * self.in_channels);
        let mut target = Vec::with_capacity(rows * out);
        let mut controls = vec![Vec::with_capacity(rows * self.width); self.window_lengths.len()];
        for &i in indices {
            let s = &self.samples[i];
            first.extend_from_slice(&s.first_frame);
            target.extend_from_slice(&s.target);
            for (w, c) in controls.iter_mut().enumerate() {
                c.extend_from_slice(&s.controls[w * block..(w + 1) * block]);
            }
        }
        Ok(Batch {
            size: indices.len(),
            first_frame: Tensor::new(vec![rows, self.in_channels], first)?,
            controls: controls
                .into_iter()
                .map(|c| Tensor::new(vec![rows, self.width], c))
                .collect::<Result<_>>()?,
            window_lengths: self.window_lengths.clone(),
            target: Some(Tensor::new(vec![rows, out], target)?),
        })
    }
}
