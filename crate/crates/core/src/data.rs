//! Series ingestion, normalisation, sliding windows, splits, irregular
//! dropping and a synthetic ring-graph generator.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::RawSeries;
use crate::tensor::Tensor;

/// Node-major value matrix `nodes × timesteps × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    nodes: usize,
    timesteps: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, nodes: usize, timesteps: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes * timesteps * channels {
            return Err(Error::Dimension(format!(
                "{} values for {nodes}x{timesteps}x{channels}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            name: name.into(),
            nodes,
            timesteps,
            channels,
            values,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, node: usize, t: usize, channel: usize) -> f64 {
        self.values[(node * self.timesteps + t) * self.channels + channel]
    }
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok()
}

/// Reads a values CSV: rows are timesteps, columns are channel-blocked node
/// readings (`column = channel·nodes + node`). A first row containing any
/// non-numeric cell is treated as a header.
pub fn load_csv(path: &Path, channels: usize) -> Result<Dataset> {
    if channels == 0 {
        return Err(Error::Config("channels must be at least 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let parsed: Vec<Option<f64>> = rec.iter().map(parse_cell).collect();
        if i == 0 && parsed.iter().any(Option::is_none) {
            continue;
        }
        let w = *width.get_or_insert(parsed.len());
        if parsed.len() != w {
            return Err(Error::Parse {
                line,
                msg: format!("expected {w} columns, found {}", parsed.len()),
            });
        }
        let row = parsed
            .into_iter()
            .zip(rec.iter())
            .map(|(v, raw)| match v {
                Some(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Parse {
                    line,
                    msg: format!("non-numeric cell '{raw}'"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no data rows", path.display())))?;
    if width % channels != 0 {
        return Err(Error::Data(format!(
            "{width} columns cannot be split into {channels} channel blocks"
        )));
    }
    let nodes = width / channels;
    let timesteps = rows.len();
    let mut values = vec![0.0; nodes * timesteps * channels];
    for (t, row) in rows.iter().enumerate() {
        for c in 0..channels {
            for v in 0..nodes {
                values[(v * timesteps + t) * channels + c] = row[c * nodes + v];
            }
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, nodes, timesteps, channels, values)
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the dataset as a values CSV with a header row.
pub fn save_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..data.channels)
        .flat_map(|c| (0..data.nodes).map(move |v| format!("n{v}_c{c}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..data.timesteps {
        let row: Vec<String> = (0..data.channels)
            .flat_map(|c| (0..data.nodes).map(move |v| (v, c)))
            .map(|(v, c)| fmt_f64(data.value(v, t, c)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Weighted directed edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

pub fn save_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut out = String::from("src,dst,weight\n");
    for e in edges {
        out.push_str(&format!("{},{},{}\n", e.src, e.dst, fmt_f64(e.weight)));
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_edges(path: &Path) -> Result<Vec<Edge>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut edges = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: "edge rows need src,dst,weight".into(),
            });
        }
        let bad = |what: &str| Error::Parse {
            line,
            msg: format!("bad {what}"),
        };
        edges.push(Edge {
            src: rec[0].parse().map_err(|_| bad("src"))?,
            dst: rec[1].parse().map_err(|_| bad("dst"))?,
            weight: rec[2].parse().map_err(|_| bad("weight"))?,
        });
    }
    Ok(edges)
}

/// Dense symmetric adjacency from an edge list.
pub fn adjacency(edges: &[Edge], nodes: usize) -> Result<Tensor> {
    let mut a = Tensor::zeros(&[nodes, nodes]);
    for e in edges {
        if e.src >= nodes || e.dst >= nodes {
            return Err(Error::Data(format!(
                "edge {}->{} references a node outside 0..{nodes}",
                e.src, e.dst
            )));
        }
        if e.src != e.dst {
            a.data_mut()[e.src * nodes + e.dst] = e.weight;
            a.data_mut()[e.dst * nodes + e.src] = e.weight;
        }
    }
    Ok(a)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Statistics over timesteps `range` of every node.
    pub fn fit(data: &Dataset, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > data.timesteps {
            return Err(Error::Data(format!(
                "normalisation range {range:?} outside 0..{}",
                data.timesteps
            )));
        }
        let mut mean = Vec::with_capacity(data.channels);
        let mut std = Vec::with_capacity(data.channels);
        let n = (data.nodes * range.len()) as f64;
        for c in 0..data.channels {
            let vals = || (0..data.nodes).flat_map(|v| range.clone().map(move |t| (v, t)));
            let m = vals().map(|(v, t)| data.value(v, t, c)).sum::<f64>() / n;
            let var = vals().map(|(v, t)| (data.value(v, t, c) - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Data(format!("channel {c} is constant over the training range")));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, data: &Dataset) -> Dataset {
        let ch = data.channels;
        let values = data
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.mean[i % ch]) / self.std[i % ch])
            .collect();
        Dataset { values, ..data.clone() }
    }

    pub fn invert(&self, data: &Dataset) -> Dataset {
        let ch = data.channels;
        let values = data
            .values
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.std[i % ch] + self.mean[i % ch])
            .collect();
        Dataset { values, ..data.clone() }
    }

    #[inline]
    pub fn denorm(&self, x: f64, channel: usize) -> f64 {
        x * self.std[channel] + self.mean[channel]
    }
}

/// One forecasting sample: inputs `offset..offset+input_len`, targets the
/// following `horizon` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub offset: usize,
    /// Observation mask `nodes × input_len`; `None` means fully observed.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub windows: Vec<Window>,
}

/// Every valid window of `input_len` inputs followed by `horizon` targets.
pub fn make_windows(data: &Dataset, input_len: usize, horizon: usize) -> Result<WindowSet> {
    if input_len < 2 || horizon == 0 {
        return Err(Error::Config("windows need at least 2 inputs and 1 target".into()));
    }
    let span = input_len + horizon;
    if data.timesteps < span {
        return Err(Error::Data(format!(
            "{} timesteps are fewer than one window ({input_len} inputs + {horizon} targets)",
            data.timesteps
        )));
    }
    let windows = (0..=data.timesteps - span).map(|offset| Window { offset, mask: None }).collect();
    Ok(WindowSet {
        nodes: data.nodes,
        input_len,
        horizon,
        windows,
    })
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, range: Range<usize>) -> WindowSet {
        WindowSet {
            windows: self.windows[range].to_vec(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> WindowSet {
        WindowSet {
            nodes: self.nodes,
            input_len: self.input_len,
            horizon: self.horizon,
            windows: Vec::new(),
        }
    }

    /// Timesteps touched by any window, inputs and targets included.
    pub fn time_span(&self) -> Range<usize> {
        match (self.windows.first(), self.windows.last()) {
            (Some(a), Some(b)) => a.offset..b.offset + self.input_len + self.horizon,
            _ => 0..0,
        }
    }

    /// Input slice of `window` as a raw series on the integer grid.
    pub fn input(&self, data: &Dataset, window: &Window) -> Result<RawSeries> {
        let (n, ch) = (self.input_len, data.channels);
        let mut values = Vec::with_capacity(data.nodes * n * ch);
        for v in 0..data.nodes {
            let base = (v * data.timesteps + window.offset) * ch;
            values.extend_from_slice(&data.values[base..base + n * ch]);
        }
        let series = RawSeries::regular(data.nodes, ch, values)?;
        match &window.mask {
            Some(m) => series.with_mask(m.clone()),
            None => Ok(series),
        }
    }

    /// Targets `nodes × (horizon·out_channels)`, horizon-major per node.
    pub fn target(&self, data: &Dataset, window: &Window, out_channels: usize) -> Vec<f64> {
        let start = window.offset + self.input_len;
        let mut out = Vec::with_capacity(data.nodes * self.horizon * out_channels);
        for v in 0..data.nodes {
            for s in 0..self.horizon {
                for c in 0..out_channels {
                    out.push(data.value(v, start + s, c));
                }
            }
        }
        out
    }
}

/// Masks each interior input timestep of every node independently with
/// probability `rate`. First and last inputs stay observed.
pub fn drop_observations(set: &WindowSet, rate: f64, seed: u64) -> Result<WindowSet> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("drop rate {rate} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = set.input_len;
    let windows = set
        .windows
        .iter()
        .map(|w| {
            let mask = (0..set.nodes * n)
                .map(|i| {
                    let t = i % n;
                    let keep = !rng.random_bool(rate);
                    t == 0 || t == n - 1 || keep
                })
                .collect();
            Window {
                offset: w.offset,
                mask: Some(mask),
            }
        })
        .collect();
    Ok(WindowSet {
        windows,
        ..set.clone_empty()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Chronological,
    RollingCv,
    BlockedCv,
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chronological" => Ok(SplitKind::Chronological),
            "rolling" | "rolling_cv" => Ok(SplitKind::RollingCv),
            "blocked" | "blocked_cv" => Ok(SplitKind::BlockedCv),
            _ => Err(Error::Config(format!(
                "unknown split '{s}' (chronological|rolling_cv|blocked_cv)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Chronological => "chronological",
            SplitKind::RollingCv => "rolling_cv",
            SplitKind::BlockedCv => "blocked_cv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    /// Train, validation and test weights.
    pub ratios: [f64; 3],
    pub folds: usize,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            kind: SplitKind::Chronological,
            ratios: [6.0, 2.0, 2.0],
            folds: 4,
        }
    }
}

/// Window-index ranges of one train/validation/test triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        if self.kind != SplitKind::Chronological && self.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }

    pub fn fold_count(&self) -> usize {
        match self.kind {
            SplitKind::Chronological => 1,
            _ => self.folds,
        }
    }

    /// Splits `n` chronologically ordered windows.
    pub fn split(&self, n: usize) -> Result<Vec<Fold>> {
        self.validate()?;
        let folds = match self.kind {
            SplitKind::Chronological => vec![chronological(0, n, &self.ratios)],
            SplitKind::BlockedCv => {
                let block = n / self.folds;
                (0..self.folds)
                    .map(|k| chronological(k * block, block, &self.ratios))
                    .collect()
            }
            SplitKind::RollingCv => {
                let [rt, rv, rs] = self.ratios;
                let f = self.folds as f64;
                let test = (n as f64 * rs / (rt + f * (rv + rs)) + 1e-9).floor() as usize;
                let val = (test as f64 * rv / rs + 1e-9).floor() as usize;
                let train0 = n.saturating_sub(self.folds * (val + test));
                (0..self.folds)
                    .map(|k| {
                        let tr = train0 + k * (val + test);
                        Fold {
                            train: 0..tr,
                            val: tr..tr + val,
                            test: tr + val..tr + val + test,
                        }
                    })
                    .collect()
            }
        };
        for (k, fold) in folds.iter().enumerate() {
            for (part, r) in [("train", &fold.train), ("validation", &fold.val), ("test", &fold.test)] {
                if r.is_empty() {
                    return Err(Error::Data(format!(
                        "fold {k}: {n} windows leave the {part} set empty"
                    )));
                }
            }
        }
        Ok(folds)
    }
}

/// Contiguous split of `start..start+n`; boundary windows go to the earlier set.
fn chronological(start: usize, n: usize, ratios: &[f64; 3]) -> Fold {
    let total: f64 = ratios.iter().sum();
    let cut = |frac: f64| ((n as f64 * frac / total) - 1e-9).ceil().max(0.0) as usize;
    let a = cut(ratios[0]).min(n);
    let b = cut(ratios[0] + ratios[1]).clamp(a, n);
    Fold {
        train: start..start + a,
        val: start + a..start + b,
        test: start + b..start + n,
    }
}

/// Parameters of the synthetic ring-graph process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub nodes: usize,
    pub timesteps: usize,
    pub seed: u64,
    /// Amplitude of each node's own sinusoid.
    pub amplitude: f64,
    /// Constant level the signal oscillates around.
    pub offset: f64,
    /// Period in timesteps.
    pub period: usize,
    /// Weight of the lagged neighbour term, relative to `amplitude`.
    pub coupling: f64,
    /// Noise standard deviation as a fraction of `amplitude`.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(nodes: usize, timesteps: usize, seed: u64) -> Self {
        SynthSpec {
            nodes,
            timesteps,
            seed,
            amplitude: 1.0,
            offset: 3.0,
            period: 24,
            coupling: 0.5,
            noise: 0.05,
        }
    }

    /// Bound on `|x - offset|` excluding noise.
    pub fn clean_bound(&self) -> f64 {
        self.amplitude * (1.0 + self.coupling)
    }

    pub fn noise_std(&self) -> f64 {
        self.noise * self.amplitude
    }

    /// Noise-free value of `node` at `t`.
    pub fn clean_value(&self, node: usize, t: usize) -> f64 {
        let v = self.nodes;
        let own = self.phase_sin(node, t);
        let diffusion = if t == 0 || self.coupling == 0.0 {
            0.0
        } else {
            0.5 * (self.phase_sin((node + v - 1) % v, t - 1) + self.phase_sin((node + 1) % v, t - 1))
        };
        self.offset + self.amplitude * (own + self.coupling * diffusion)
    }

    fn phase_sin(&self, node: usize, t: usize) -> f64 {
        let phase = 2.0 * PI * node as f64 / self.nodes as f64;
        let cycle = 2.0 * PI * (t % self.period) as f64 / self.period as f64;
        (cycle + phase).sin()
    }

    /// Generates the series and the ring edge list.
    pub fn generate(&self) -> Result<(Dataset, Vec<Edge>)> {
        if self.nodes < 2 {
            return Err(Error::Config("the ring graph needs at least 2 nodes".into()));
        }
        if self.timesteps == 0 || self.period == 0 {
            return Err(Error::Config("timesteps and period must be positive".into()));
        }
        let sigma = self.noise_std();
        let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut values = vec![0.0; self.nodes * self.timesteps];
        for t in 0..self.timesteps {
            for v in 0..self.nodes {
                let eps = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                values[v * self.timesteps + t] = self.clean_value(v, t) + eps;
            }
        }
        let edges = if self.nodes == 2 {
            vec![Edge { src: 0, dst: 1, weight: 1.0 }]
        } else {
            (0..self.nodes)
                .map(|v| Edge {
                    src: v,
                    dst: (v + 1) % self.nodes,
                    weight: 1.0,
                })
                .collect()
        };
        Ok((Dataset::new("synth", self.nodes, self.timesteps, 1, values)?, edges))
    }

    /// Writes `values.csv` and `adjacency.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(Dataset, Vec<Edge>)> {
        let (data, edges) = self.generate()?;
        save_csv(&dir.join("values.csv"), &data)?;
        save_edges(&dir.join("adjacency.csv"), &edges)?;
        Ok((data, edges))
    }
}
