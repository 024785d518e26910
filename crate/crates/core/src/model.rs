//! The coupled temporal/spatial rough-path model.
//!
//! The hidden state is a pair of node-stacked matrices: `H` (temporal,
//! `rows × dim_h`) and `Z` (spatial, `rows × dim_z`), where a batch of `B`
//! samples contributes `B·|V|` rows, sample-major. Within window `i` the
//! control is `ℓ_i / Δr_i`, one row of log-signature coordinates per node.
//!
//! * `f` maps each row of `H` through `K+1` ReLU layers and a tanh head that
//!   widens to `dim_h·L`, read as a `dim_h × L` matrix per row.
//! * `g` maps `Z` through one ReLU layer, mixes nodes with a message-passing
//!   step (by default `(I + softmax(ReLU(E·Eᵀ)))·B₀·W_spatial`), and ends in
//!   a tanh head widening to `dim_z·dim_h`.
//! * The augmented system is `dH = f(H)·ℓ/Δr`, `dZ = g(Z)·dH`.
//!
//! The temporal-only variant evolves `H` alone and reads out from it. The
//! spatial-only variant drives `Z` directly by the control, so its `g` head
//! widens to `dim_z·L` instead.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::logsig::witt_dimension;
use crate::solver::{integrate, SolveSpec};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    TemporalOnly,
    SpatialOnly,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "temporal" | "temporal_only" => Ok(Variant::TemporalOnly),
            "spatial" | "spatial_only" => Ok(Variant::SpatialOnly),
            _ => Err(Error::Config(format!(
                "unknown variant '{s}' (full|temporal_only|spatial_only)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::TemporalOnly => "temporal_only",
            Variant::SpatialOnly => "spatial_only",
        })
    }
}

/// Message-passing step used inside `g`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnKind {
    /// `(I + Ā)·B₀·W` with the learned adjacency `Ā`.
    Adaptive,
    /// Order-2 Chebyshev filter on an external graph: `B₀·W + L̃·B₀·W₁`.
    Chebyshev,
    /// Renormalised GCN on an external graph: `Â·B₀·W`.
    PlainGcn,
    /// One attention head over the complete graph.
    Attention,
}

impl GnnKind {
    pub fn needs_external_graph(self) -> bool {
        matches!(self, GnnKind::Chebyshev | GnnKind::PlainGcn)
    }
}

impl FromStr for GnnKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(GnnKind::Adaptive),
            "chebyshev" => Ok(GnnKind::Chebyshev),
            "plain_gcn" | "gcn" => Ok(GnnKind::PlainGcn),
            "attention" | "gat" => Ok(GnnKind::Attention),
            _ => Err(Error::Config(format!(
                "unknown gnn kind '{s}' (adaptive|chebyshev|plain_gcn|attention)"
            ))),
        }
    }
}

impl fmt::Display for GnnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GnnKind::Adaptive => "adaptive",
            GnnKind::Chebyshev => "chebyshev",
            GnnKind::PlainGcn => "plain_gcn",
            GnnKind::Attention => "attention",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_nodes: usize,
    pub in_channels: usize,
    pub horizon: usize,
    pub out_channels: usize,
    pub dim_h: usize,
    pub dim_z: usize,
    /// Number of hidden ReLU layers after the first in `f`.
    pub num_layers: usize,
    pub embed_dim: usize,
    pub sig_depth: usize,
    pub subpath_len: usize,
    pub variant: Variant,
    pub gnn_kind: GnnKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_nodes: 8,
            in_channels: 1,
            horizon: 12,
            out_channels: 1,
            dim_h: 32,
            dim_z: 32,
            num_layers: 1,
            embed_dim: 2,
            sig_depth: 2,
            subpath_len: 2,
            variant: Variant::Full,
            gnn_kind: GnnKind::Adaptive,
        }
    }
}

impl ModelConfig {
    /// Data channels plus the time channel.
    pub fn path_channels(&self) -> usize {
        self.in_channels + 1
    }

    /// Log-signature width `L`.
    pub fn logsig_width(&self) -> usize {
        witt_dimension(self.path_channels(), self.sig_depth)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_nodes", self.num_nodes),
            ("in_channels", self.in_channels),
            ("horizon", self.horizon),
            ("out_channels", self.out_channels),
            ("dim_h", self.dim_h),
            ("dim_z", self.dim_z),
            ("embed_dim", self.embed_dim),
            ("sig_depth", self.sig_depth),
            ("subpath_len", self.subpath_len),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.out_channels > self.in_channels {
            return Err(Error::Config(
                "out_channels cannot exceed in_channels (targets are the leading input channels)".into(),
            ));
        }
        Ok(())
    }

    /// Width of the final hidden state fed to the output layer.
    fn readout_width(&self) -> usize {
        match self.variant {
            Variant::TemporalOnly => self.dim_h,
            _ => self.dim_z,
        }
    }

    /// Every parameter's name, shape and fan-in, in initialisation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let (dh, dz, l) = (self.dim_h, self.dim_z, self.logsig_width());
        let mut out = Vec::new();
        let mut fc = |name: &str, fan_in: usize, fan_out: usize| {
            out.push((format!("{name}.weight"), vec![fan_in, fan_out], fan_in));
            out.push((format!("{name}.bias"), vec![fan_out], fan_in));
        };
        fc("init.h", self.in_channels, dh);
        if self.variant != Variant::TemporalOnly {
            fc("init.z", dh, dz);
        }
        if self.variant != Variant::SpatialOnly {
            for i in 0..=self.num_layers {
                fc(&format!("f.trunk.{i}"), dh, dh);
            }
            fc("f.head", dh, dh * l);
        }
        if self.variant != Variant::TemporalOnly {
            fc("g.b0", dz, dz);
            let control = if self.variant == Variant::SpatialOnly { l } else { dh };
            fc("g.head", dz, dz * control);
        }
        fc("output", self.readout_width(), self.horizon * self.out_channels);
        if self.variant != Variant::TemporalOnly {
            out.push(("g.spatial".into(), vec![dz, dz], dz));
            match self.gnn_kind {
                GnnKind::Adaptive => {
                    out.push(("embedding".into(), vec![self.num_nodes, self.embed_dim], self.embed_dim))
                }
                GnnKind::Chebyshev => out.push(("g.cheb".into(), vec![dz, dz], dz)),
                GnnKind::Attention => {
                    out.push(("g.attn.src".into(), vec![dz, 1], dz));
                    out.push(("g.attn.dst".into(), vec![dz, 1], dz));
                }
                GnnKind::PlainGcn => {}
            }
        }
        out
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Uniform `±1/√fan_in` initialisation, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                (name, Tensor::new(shape, data).expect("finite init"))
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Load(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                None => return Err(Error::Load(format!("missing parameter '{name}'"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Load(format!(
                        "parameter '{name}' has shape {:?}, config expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Load(format!("parameter '{name}' is not finite")))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Collects per-parameter gradients after a backward pass.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, &v)| grads.take(v).map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Hidden state of the augmented system; absent parts are unused by the variant.
#[derive(Clone, Copy, Debug)]
pub struct HiddenState {
    pub h: Option<Var>,
    pub z: Option<Var>,
}

impl HiddenState {
    fn to_vec(self) -> Vec<Var> {
        self.h.into_iter().chain(self.z).collect()
    }

    fn from_vec(variant: Variant, v: &[Var]) -> Self {
        match variant {
            Variant::Full => HiddenState {
                h: Some(v[0]),
                z: Some(v[1]),
            },
            Variant::TemporalOnly => HiddenState { h: Some(v[0]), z: None },
            Variant::SpatialOnly => HiddenState { h: None, z: Some(v[0]) },
        }
    }
}

/// Model inputs for a batch of `size` samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// First observed frame, `(size·V) × D`.
    pub first_frame: Tensor,
    /// Per window: log-signatures divided by the window length, `(size·V) × L`.
    pub controls: Vec<Tensor>,
    /// Window lengths `r_{i+1} - r_i`.
    pub window_lengths: Vec<f64>,
    /// Targets, `(size·V) × (S·M)`, in normalised units.
    pub target: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Normalised external graph operator for `chebyshev`/`plain_gcn`.
    pub support: Option<Tensor>,
    /// Replaces the learned adjacency `Ā` when set (testing hook).
    #[doc(hidden)]
    pub adjacency_override: Option<Tensor>,
}

/// Per-forward context: bound parameters plus quantities shared by every
/// right-hand-side evaluation.
pub struct Forward<'m> {
    model: &'m Model,
    pub bound: Bound,
    /// `I + Ā` (adaptive) or the external operator, as a tape constant/var.
    mixer: Option<Var>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.variant != Variant::TemporalOnly && config.gnn_kind.needs_external_graph() {
            return Err(Error::Config(format!(
                "gnn kind {} needs an external adjacency; use Model::with_graph",
                config.gnn_kind
            )));
        }
        let params = ParamStore::init(&config, seed);
        Ok(Model {
            config,
            params,
            support: None,
            adjacency_override: None,
        })
    }

    /// Model whose message passing uses an external weighted adjacency
    /// (`nodes × nodes`, no self loops required).
    pub fn with_graph(config: ModelConfig, seed: u64, adjacency: &Tensor) -> Result<Self> {
        config.validate()?;
        let support = match config.gnn_kind {
            GnnKind::Chebyshev => Some(scaled_laplacian(adjacency)?),
            GnnKind::PlainGcn => Some(renormalized_adjacency(adjacency)?),
            _ => None,
        };
        let params = ParamStore::init(&config, seed);
        Ok(Model {
            config,
            params,
            support,
            adjacency_override: None,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, support: Option<Tensor>) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        let needs = config.variant != Variant::TemporalOnly && config.gnn_kind.needs_external_graph();
        if needs && support.is_none() {
            return Err(Error::Load(format!("gnn kind {} needs a stored graph support", config.gnn_kind)));
        }
        Ok(Model {
            config,
            params,
            support,
            adjacency_override: None,
        })
    }

    /// Places all parameters on `tape`, tracked for gradients iff `track`.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if track {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Binds parameters and precomputes the node-mixing operator.
    pub fn begin<'m>(&'m self, tape: &mut Tape, track: bool) -> Result<Forward<'m>> {
        let bound = self.bind(tape, track);
        let cfg = &self.config;
        let mixer = if cfg.variant == Variant::TemporalOnly {
            None
        } else {
            match cfg.gnn_kind {
                GnnKind::Adaptive => {
                    let adj = match &self.adjacency_override {
                        Some(a) => tape.constant(a.clone()),
                        None => adaptive_adjacency(tape, bound.var("embedding"))?,
                    };
                    let eye = tape.constant(Tensor::eye(cfg.num_nodes));
                    Some(tape.add(eye, adj)?)
                }
                GnnKind::Chebyshev | GnnKind::PlainGcn => {
                    let s = self.support.clone().ok_or_else(|| {
                        Error::Config(format!("gnn kind {} needs an external adjacency", cfg.gnn_kind))
                    })?;
                    Some(tape.constant(s))
                }
                GnnKind::Attention => None,
            }
        };
        Ok(Forward {
            model: self,
            bound,
            mixer,
        })
    }
}

/// `softmax_rows(ReLU(E·Eᵀ))`.
pub fn adaptive_adjacency(tape: &mut Tape, embedding: Var) -> Result<Var> {
    let et = tape.transpose(embedding)?;
    let sim = tape.matmul(embedding, et)?;
    let sim = tape.relu(sim)?;
    tape.softmax_rows(sim)
}

/// `D̃^{-1/2}(A + I)D̃^{-1/2}`.
pub fn renormalized_adjacency(adj: &Tensor) -> Result<Tensor> {
    let (n, m) = adj.dims2()?;
    if n != m {
        return dim_err("adjacency must be square");
    }
    let mut a = adj.clone();
    for i in 0..n {
        a.data_mut()[i * n + i] += 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.data()[i * n..(i + 1) * n].iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            let d = (deg[i] * deg[j]).sqrt();
            a.data_mut()[i * n + j] = if d > 0.0 { a.data()[i * n + j] / d } else { 0.0 };
        }
    }
    Ok(a)
}

/// `-D^{-1/2} A D^{-1/2}`: the normalised Laplacian rescaled with `λ_max = 2`.
pub fn scaled_laplacian(adj: &Tensor) -> Result<Tensor> {
    let (n, m) = adj.dims2()?;
    if n != m {
        return dim_err("adjacency must be square");
    }
    let deg: Vec<f64> = (0..n).map(|i| adj.data()[i * n..(i + 1) * n].iter().sum()).collect();
    let data = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let d = (deg[i] * deg[j]).sqrt();
            if d > 0.0 {
                -adj.data()[k] / d
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(vec![n, n], data)
}

impl Forward<'_> {
    fn p(&self, name: &str) -> Var {
        self.bound.var(name)
    }

    fn fc(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        tape.linear(x, w, Some(b))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Temporal vector field: `rows × (dim_h·L)`, rows processed independently.
    pub fn field_f(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let mut a = h;
        for i in 0..=self.config().num_layers {
            let z = self.fc(tape, &format!("f.trunk.{i}"), a)?;
            a = tape.relu(z)?;
        }
        let head = self.fc(tape, "f.head", a)?;
        tape.tanh(head)
    }

    /// Spatial vector field: `rows × (dim_z·dim_h)` (or `dim_z·L` spatial-only).
    pub fn field_g(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let nodes = self.config().num_nodes;
        let b0 = self.fc(tape, "g.b0", z)?;
        let b0 = tape.relu(b0)?;
        let w = self.p("g.spatial");
        let b1 = match self.config().gnn_kind {
            GnnKind::Adaptive | GnnKind::PlainGcn => {
                let mixed = tape.block_mix(self.mixer.expect("mixer bound"), b0, nodes)?;
                tape.linear(mixed, w, None)?
            }
            GnnKind::Chebyshev => {
                let own = tape.linear(b0, w, None)?;
                let lap = tape.block_mix(self.mixer.expect("mixer bound"), b0, nodes)?;
                let nb = tape.linear(lap, self.p("g.cheb"), None)?;
                tape.add(own, nb)?
            }
            GnnKind::Attention => {
                let xw = tape.linear(b0, w, None)?;
                let src = tape.linear(xw, self.p("g.attn.src"), None)?;
                let dst = tape.linear(xw, self.p("g.attn.dst"), None)?;
                let scores = tape.pair_scores(src, dst, nodes)?;
                let alpha = tape.softmax_rows(scores)?;
                tape.block_mix(alpha, xw, nodes)?
            }
        };
        let head = self.fc(tape, "g.head", b1)?;
        tape.tanh(head)
    }

    /// `H(0) = FC(F₀)`, `Z(0) = FC(H(0))`.
    pub fn init_state(&self, tape: &mut Tape, first_frame: Var) -> Result<HiddenState> {
        let h = self.fc(tape, "init.h", first_frame)?;
        let z = match self.config().variant {
            Variant::TemporalOnly => None,
            _ => Some(self.fc(tape, "init.z", h)?),
        };
        let h = match self.config().variant {
            Variant::SpatialOnly => None,
            _ => Some(h),
        };
        Ok(HiddenState { h, z })
    }

    /// Time derivative of the state under the control `ℓ/Δr`.
    pub fn augmented_rhs(&self, tape: &mut Tape, state: HiddenState, control: Var) -> Result<HiddenState> {
        match self.config().variant {
            Variant::SpatialOnly => {
                let g = self.field_g(tape, state.z.expect("z state"))?;
                Ok(HiddenState {
                    h: None,
                    z: Some(tape.row_contract(g, control)?),
                })
            }
            variant => {
                let f = self.field_f(tape, state.h.expect("h state"))?;
                let dh = tape.row_contract(f, control)?;
                let dz = if variant == Variant::Full {
                    let g = self.field_g(tape, state.z.expect("z state"))?;
                    Some(tape.row_contract(g, dh)?)
                } else {
                    None
                };
                Ok(HiddenState { h: Some(dh), z: dz })
            }
        }
    }

    /// Output layer applied to the final state: `rows × (S·M)`.
    pub fn readout(&self, tape: &mut Tape, state: HiddenState) -> Result<Var> {
        let x = match self.config().variant {
            Variant::TemporalOnly => state.h,
            _ => state.z,
        }
        .expect("readout state");
        self.fc(tape, "output", x)
    }

    /// Full forward pass for a batch; returns predictions `(B·V) × (S·M)`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, solve: &SolveSpec) -> Result<Var> {
        let cfg = self.config();
        let rows = batch.size * cfg.num_nodes;
        if batch.first_frame.shape() != [rows, cfg.in_channels] {
            return dim_err(format!(
                "first frame shape {:?}, expected [{rows}, {}]",
                batch.first_frame.shape(),
                cfg.in_channels
            ));
        }
        if batch.controls.len() != batch.window_lengths.len() {
            return dim_err("one control block per window expected");
        }
        let l = cfg.logsig_width();
        let controls: Vec<Var> = batch
            .controls
            .iter()
            .map(|c| {
                if c.shape() != [rows, l] {
                    return dim_err(format!("control shape {:?}, expected [{rows}, {l}]", c.shape()));
                }
                Ok(tape.constant(c.clone()))
            })
            .collect::<Result<_>>()?;
        let f0 = tape.constant(batch.first_frame.clone());
        let init = self.init_state(tape, f0)?;
        let variant = cfg.variant;
        let out = integrate(tape, init.to_vec(), &batch.window_lengths, solve, |tape, w, y| {
            let s = HiddenState::from_vec(variant, y);
            Ok(self.augmented_rhs(tape, s, controls[w])?.to_vec())
        })?;
        self.readout(tape, HiddenState::from_vec(variant, &out))
    }
}

impl Model {
    /// Predictions for a batch without gradient tracking.
    pub fn predict(&self, batch: &Batch, solve: &SolveSpec) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fwd = self.begin(&mut tape, false)?;
        let pred = fwd.forward(&mut tape, batch, solve)?;
        Ok(tape.value(pred).clone())
    }

    /// Learned adjacency `Ā` (adaptive kind only).
    pub fn adjacency(&self) -> Result<Tensor> {
        let e = self
            .params
            .get("embedding")
            .ok_or_else(|| Error::Config("model has no node embedding".into()))?;
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let a = adaptive_adjacency(&mut tape, ev)?;
        Ok(tape.value(a).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            num_nodes: 3,
            in_channels: 1,
            horizon: 2,
            out_channels: 1,
            dim_h: 2,
            dim_z: 2,
            num_layers: 1,
            embed_dim: 2,
            sig_depth: 2,
            subpath_len: 2,
            variant,
            gnn_kind: GnnKind::Adaptive,
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let (_, c) = t.dims2().unwrap();
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn eval_f(model: &Model, h: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let hv = tape.constant(h.clone());
        let out = fwd.field_f(&mut tape, hv).unwrap();
        tape.value(out).clone()
    }

    fn eval_g(model: &Model, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let zv = tape.constant(z.clone());
        let out = fwd.field_g(&mut tape, zv).unwrap();
        tape.value(out).clone()
    }

    /// Scalar re-implementation of one FC layer.
    fn fc(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (k, n) = w.dims2().unwrap();
        (0..n)
            .map(|j| b.data()[j] + (0..k).map(|i| x[i] * w.at(i, j)).sum::<f64>())
            .collect()
    }

    fn p<'a>(m: &'a Model, n: &str) -> &'a Tensor {
        m.params.get(n).unwrap()
    }

    #[test]
    fn shapes_match_config() {
        let cfg = tiny(Variant::Full);
        let store = ParamStore::init(&cfg, 3);
        store.validate(&cfg).unwrap();
        assert_eq!(store.get("f.head.weight").unwrap().shape(), &[2, 2 * 3]);
        assert_eq!(store.get("g.head.weight").unwrap().shape(), &[2, 4]);
        assert_eq!(store.get("embedding").unwrap().shape(), &[3, 2]);
        let sp = tiny(Variant::SpatialOnly);
        let s2 = ParamStore::init(&sp, 3);
        assert_eq!(s2.get("g.head.weight").unwrap().shape(), &[2, 2 * 3]);
        assert!(s2.get("f.head.weight").is_none());
        let tp = ParamStore::init(&tiny(Variant::TemporalOnly), 3);
        assert!(tp.get("embedding").is_none());
        assert_eq!(tp.get("output.weight").unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = tiny(Variant::Full);
        assert_eq!(ParamStore::init(&cfg, 11), ParamStore::init(&cfg, 11));
        assert_ne!(ParamStore::init(&cfg, 11), ParamStore::init(&cfg, 12));
        let s = ParamStore::init(&cfg, 11);
        let e = s.get("embedding").unwrap();
        assert!(e.max_abs() <= 1.0 / 2f64.sqrt());
    }

    #[test]
    fn field_f_matches_scalar_oracle() {
        let mut cfg = tiny(Variant::Full);
        cfg.num_nodes = 2;
        let model = Model::new(cfg, 5).unwrap();
        let h = Tensor::from_rows(&[vec![0.4, -0.3], vec![-0.8, 0.25]]).unwrap();
        let got = eval_f(&model, &h);
        for (r, row) in rows(&h).iter().enumerate() {
            let relu = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
            let a0 = relu(fc(row, p(&model, "f.trunk.0.weight"), p(&model, "f.trunk.0.bias")));
            let a1 = relu(fc(&a0, p(&model, "f.trunk.1.weight"), p(&model, "f.trunk.1.bias")));
            let head: Vec<f64> = fc(&a1, p(&model, "f.head.weight"), p(&model, "f.head.bias"))
                .into_iter()
                .map(f64::tanh)
                .collect();
            for (j, want) in head.iter().enumerate() {
                assert!((got.at(r, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn field_f_zero_weights_gives_zero() {
        let mut model = Model::new(tiny(Variant::Full), 1).unwrap();
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]]).unwrap();
        assert!(eval_f(&model, &h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn field_f_is_row_equivariant() {
        let model = Model::new(tiny(Variant::Full), 9).unwrap();
        let h = Tensor::from_rows(&[vec![0.1, 0.9], vec![-0.5, 0.2], vec![0.7, -0.4]]).unwrap();
        let perm = [2usize, 0, 1];
        let hr = rows(&h);
        let hp = Tensor::from_rows(&perm.iter().map(|&i| hr[i].clone()).collect::<Vec<_>>()).unwrap();
        let (a, b) = (rows(&eval_f(&model, &h)), rows(&eval_f(&model, &hp)));
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(a[i], b[k]);
        }
    }

    #[test]
    fn adjacency_of_zero_embedding_is_uniform() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[4, 3]));
        let a = adaptive_adjacency(&mut tape, e).unwrap();
        assert!(tape.value(a).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn adjacency_rows_sum_to_one() {
        let model = Model::new(ModelConfig::default(), 4).unwrap();
        let a = model.adjacency().unwrap();
        for row in rows(&a) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn large_orthogonal_embeddings_approach_identity() {
        let diag_min = |scale: f64| {
            let e = Tensor::from_rows(&[
                vec![scale, 0.0, 0.0],
                vec![0.0, scale, 0.0],
                vec![0.0, 0.0, scale],
            ])
            .unwrap();
            let mut tape = Tape::new();
            let ev = tape.constant(e);
            let a = adaptive_adjacency(&mut tape, ev).unwrap();
            let a = tape.value(a).clone();
            (0..3).map(|i| a.at(i, i)).fold(1.0, f64::min)
        };
        let (d1, d2, d3) = (diag_min(1.0), diag_min(2.0), diag_min(3.0));
        assert!(d1 < d2 && d2 < d3 && d3 > 0.99, "{d1} {d2} {d3}");
    }

    #[test]
    fn field_g_single_node_uses_doubled_identity() {
        let mut cfg = tiny(Variant::Full);
        cfg.num_nodes = 1;
        let model = Model::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        assert_eq!(tape.value(fwd.mixer.unwrap()).data(), &[2.0]);
    }

    #[test]
    fn field_g_matches_scalar_oracle() {
        let model = Model::new(tiny(Variant::Full), 21).unwrap();
        let z = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.1], vec![-0.2, 0.5]]).unwrap();
        let got = eval_g(&model, &z);
        let e = p(&model, "embedding");
        let n = 3;
        // Ā by hand.
        let mut adj = vec![vec![0.0; n]; n];
        for i in 0..n {
            let s: Vec<f64> = (0..n)
                .map(|j| (e.at(i, 0) * e.at(j, 0) + e.at(i, 1) * e.at(j, 1)).max(0.0))
                .collect();
            let tot: f64 = s.iter().map(|x| x.exp()).sum();
            for j in 0..n {
                adj[i][j] = s[j].exp() / tot + if i == j { 1.0 } else { 0.0 };
            }
        }
        let b0: Vec<Vec<f64>> = rows(&z)
            .iter()
            .map(|r| fc(r, p(&model, "g.b0.weight"), p(&model, "g.b0.bias")).into_iter().map(|x| x.max(0.0)).collect())
            .collect();
        let w = p(&model, "g.spatial");
        for i in 0..n {
            let mixed: Vec<f64> = (0..2).map(|c| (0..n).map(|j| adj[i][j] * b0[j][c]).sum()).collect();
            let b1: Vec<f64> = (0..2).map(|c| (0..2).map(|k| mixed[k] * w.at(k, c)).sum()).collect();
            let head: Vec<f64> = fc(&b1, p(&model, "g.head.weight"), p(&model, "g.head.bias"))
                .into_iter()
                .map(f64::tanh)
                .collect();
            for (j, want) in head.iter().enumerate() {
                assert!((got.at(i, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_adjacency_makes_g_row_independent() {
        let mut model = Model::new(tiny(Variant::Full), 8).unwrap();
        model.adjacency_override = Some(Tensor::zeros(&[3, 3]));
        let z = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.1], vec![-0.2, 0.5]]).unwrap();
        let mut z2 = z.clone();
        z2.data_mut()[0] = 5.0;
        let (a, b) = (rows(&eval_g(&model, &z)), rows(&eval_g(&model, &z2)));
        assert_eq!(a[1], b[1]);
        assert_eq!(a[2], b[2]);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn init_state_cases() {
        let mut cfg = tiny(Variant::Full);
        cfg.dim_h = 1;
        cfg.dim_z = 1;
        let mut model = Model::new(cfg, 0).unwrap();
        for (name, t) in model.params.iter_mut() {
            let v = if name.ends_with("weight") { 1.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|x| *x = v);
        }
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let f0 = tape.constant(Tensor::from_rows(&[vec![1.5], vec![0.0], vec![-2.0]]).unwrap());
        let s = fwd.init_state(&mut tape, f0).unwrap();
        assert_eq!(tape.value(s.h.unwrap()).data(), &[1.5, 0.0, -2.0]);
        assert_eq!(tape.value(s.z.unwrap()).data(), &[1.5, 0.0, -2.0]);
    }

    #[test]
    fn init_state_matches_oracle() {
        let model = Model::new(tiny(Variant::Full), 13).unwrap();
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let frame = vec![vec![0.7], vec![-1.1], vec![0.2]];
        let f0 = tape.constant(Tensor::from_rows(&frame).unwrap());
        let s = fwd.init_state(&mut tape, f0).unwrap();
        let (h, z) = (tape.value(s.h.unwrap()).clone(), tape.value(s.z.unwrap()).clone());
        for (r, x) in frame.iter().enumerate() {
            let hh = fc(x, p(&model, "init.h.weight"), p(&model, "init.h.bias"));
            let zz = fc(&hh, p(&model, "init.z.weight"), p(&model, "init.z.bias"));
            for c in 0..2 {
                assert!((h.at(r, c) - hh[c]).abs() < 1e-15);
                assert!((z.at(r, c) - zz[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_control_freezes_state() {
        for variant in [Variant::Full, Variant::TemporalOnly, Variant::SpatialOnly] {
            let model = Model::new(tiny(variant), 3).unwrap();
            let mut tape = Tape::new();
            let fwd = model.begin(&mut tape, false).unwrap();
            let f0 = tape.constant(Tensor::from_rows(&[vec![0.7], vec![-1.1], vec![0.2]]).unwrap());
            let s = fwd.init_state(&mut tape, f0).unwrap();
            let ctrl = tape.constant(Tensor::zeros(&[3, 3]));
            let d = fwd.augmented_rhs(&mut tape, s, ctrl).unwrap();
            for v in d.h.into_iter().chain(d.z) {
                assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn augmented_rhs_matches_oracle() {
        let model = Model::new(tiny(Variant::Full), 17).unwrap();
        let h = Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.8], vec![-0.6, 0.4]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.2], vec![0.0, -0.7]]).unwrap();
        let ctrl = Tensor::from_rows(&[vec![0.2, 0.5, -0.1], vec![1.0, 0.5, 0.3], vec![-0.4, 0.5, 0.05]]).unwrap();
        let f = eval_f(&model, &h);
        let g = eval_g(&model, &z);
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let s = HiddenState {
            h: Some(tape.constant(h)),
            z: Some(tape.constant(z)),
        };
        let c = tape.constant(ctrl.clone());
        let d = fwd.augmented_rhs(&mut tape, s, c).unwrap();
        let (dh, dz) = (tape.value(d.h.unwrap()).clone(), tape.value(d.z.unwrap()).clone());
        for v in 0..3 {
            let want_dh: Vec<f64> = (0..2)
                .map(|i| (0..3).map(|j| f.at(v, i * 3 + j) * ctrl.at(v, j)).sum())
                .collect();
            let want_dz: Vec<f64> = (0..2)
                .map(|i| (0..2).map(|j| g.at(v, i * 2 + j) * want_dh[j]).sum())
                .collect();
            for i in 0..2 {
                assert!((dh.at(v, i) - want_dh[i]).abs() < 1e-15);
                assert!((dz.at(v, i) - want_dz[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn readout_cases() {
        let mut model = Model::new(tiny(Variant::Full), 3).unwrap();
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let y = fwd.readout(&mut tape, HiddenState { h: None, z: Some(z) }).unwrap();
        let b = p(&model, "output.bias").data().to_vec();
        for r in rows(tape.value(y)) {
            assert_eq!(r, b);
        }
        // Random Z against the scalar oracle.
        let zr = vec![vec![0.2, -0.9], vec![0.4, 0.4], vec![-1.0, 0.1]];
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let z = tape.constant(Tensor::from_rows(&zr).unwrap());
        let y = fwd.readout(&mut tape, HiddenState { h: None, z: Some(z) }).unwrap();
        let yv = tape.value(y).clone();
        for (r, zrow) in zr.iter().enumerate() {
            let want = fc(zrow, p(&model, "output.weight"), p(&model, "output.bias"));
            for c in 0..2 {
                assert!((yv.at(r, c) - want[c]).abs() < 1e-15);
            }
        }
        // 1x1 affine map.
        let mut cfg = tiny(Variant::Full);
        cfg.dim_z = 1;
        cfg.horizon = 1;
        model = Model::new(cfg, 3).unwrap();
        let mut tape = Tape::new();
        let fwd = model.begin(&mut tape, false).unwrap();
        let z = tape.constant(Tensor::from_rows(&[vec![2.0], vec![0.0], vec![-1.0]]).unwrap());
        let y = fwd.readout(&mut tape, HiddenState { h: None, z: Some(z) }).unwrap();
        let (w, b) = (p(&model, "output.weight").data()[0], p(&model, "output.bias").data()[0]);
        assert_eq!(tape.value(y).data(), &[2.0 * w + b, b, -w + b]);
    }

    #[test]
    fn external_graph_kinds_need_adjacency() {
        let mut cfg = tiny(Variant::Full);
        cfg.gnn_kind = GnnKind::Chebyshev;
        assert!(matches!(Model::new(cfg.clone(), 0), Err(Error::Config(_))));
        let ring = Tensor::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let m = Model::with_graph(cfg, 0, &ring).unwrap();
        let z = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.1], vec![-0.2, 0.5]]).unwrap();
        assert!(eval_g(&m, &z).is_finite());
    }

    #[test]
    fn gnn_kinds_run() {
        let ring = Tensor::from_rows(&[vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.3, -0.6], vec![0.9, 0.1], vec![-0.2, 0.5]]).unwrap();
        for kind in [GnnKind::PlainGcn, GnnKind::Attention] {
            let mut cfg = tiny(Variant::Full);
            cfg.gnn_kind = kind;
            let m = Model::with_graph(cfg, 0, &ring).unwrap();
            assert_eq!(eval_g(&m, &z).shape(), &[3, 4]);
        }
        let a = renormalized_adjacency(&ring).unwrap();
        assert!((a.at(0, 0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn parse_enums() {
        assert_eq!("spatial".parse::<Variant>().unwrap(), Variant::SpatialOnly);
        assert_eq!("gat".parse::<GnnKind>().unwrap(), GnnKind::Attention);
        assert!("lstm".parse::<Variant>().is_err());
    }
}
