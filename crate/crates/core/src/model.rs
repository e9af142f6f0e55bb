//! The imputation network and its two ablations.
//!
//! Full model, per time step `t`:
//!
//! 1. graph attention over `N(i) ∪ {i}` turns the N x d column `X_t` into
//!    N x f node embeddings,
//! 2. a bidirectional GRU with weights shared across nodes runs over the
//!    T steps of each node's embedding sequence, and
//! 3. two affine heads read the concatenated `[forward ‖ backward]` state
//!    and emit the mean and (softplus-positive) variance.
//!
//! Missing inputs are zeros; the network never sees the mask.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::tensor::Tensor2D;

/// Lower bound added to the softplus variance head.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Graph attention + BiGRU.
    Full,
    /// Graph convolution + heads, no recurrence.
    SpatialOnly,
    /// BiGRU + heads on raw features, no graph.
    TemporalOnly,
}

impl Architecture {
    /// Method name used in reports.
    pub fn method_name(self) -> &'static str {
        match self {
            Architecture::Full => "ST-GIN",
            Architecture::SpatialOnly => "GCN",
            Architecture::TemporalOnly => "BiGRU",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Full => "full",
            Architecture::SpatialOnly => "spatial-only",
            Architecture::TemporalOnly => "temporal-only",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "stgin" | "st-gin" => Ok(Architecture::Full),
            "spatial-only" | "gcn" => Ok(Architecture::SpatialOnly),
            "temporal-only" | "bigru" => Ok(Architecture::TemporalOnly),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Features per node per step (1 for univariate traffic).
    pub input_dim: usize,
    /// Embedding width `f` of the graph layer.
    pub gat_width: usize,
    /// Hidden width `H` of each GRU direction.
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Activation applied to the aggregated graph embedding.
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Full,
            input_dim: 1,
            gat_width: 16,
            hidden: 32,
            leaky_slope: 0.2,
            activation: Activation::Elu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.gat_width == 0 || self.hidden == 0 {
            return Err(Error::invalid(format!(
                "widths must be positive (input_dim={}, gat_width={}, hidden={})",
                self.input_dim, self.gat_width, self.hidden
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::invalid("leaky slope must be finite"));
        }
        Ok(())
    }

    pub fn with_architecture(&self, architecture: Architecture) -> Self {
        Self { architecture, ..self.clone() }
    }
}

/// Positions of each tensor inside [`ModelParams::params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruLayout {
    pub w_z: usize,
    pub u_z: usize,
    pub b_z: usize,
    pub w_r: usize,
    pub u_r: usize,
    pub b_r: usize,
    pub w_h: usize,
    pub u_h: usize,
    pub b_h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub gat_w: Option<usize>,
    pub gat_a: Option<usize>,
    pub gcn_w: Option<usize>,
    pub gru_fwd: Option<GruLayout>,
    pub gru_bwd: Option<GruLayout>,
    pub mu_w: usize,
    pub mu_b: usize,
    pub sigma_w: usize,
    pub sigma_b: usize,
}

/// All learnable tensors of one network, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    seed: u64,
    params: Vec<Parameter>,
    layout: Layout,
}

struct Builder {
    specs: Vec<(String, usize, usize, bool)>,
}

impl Builder {
    fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, bias: bool) -> usize {
        self.specs.push((name.into(), rows, cols, bias));
        self.specs.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruLayout {
        let mut gate = |g: &str| {
            (
                self.push(format!("{prefix}.W_{g}"), input, hidden, false),
                self.push(format!("{prefix}.U_{g}"), hidden, hidden, false),
                self.push(format!("{prefix}.b_{g}"), 1, hidden, true),
            )
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        GruLayout { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
    }
}

impl ModelParams {
    /// Glorot-uniform weights `U(±sqrt(6 / (fan_in + fan_out)))`, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, f, h) = (config.input_dim, config.gat_width, config.hidden);
        let mut b = Builder { specs: Vec::new() };
        let (mut gat_w, mut gat_a, mut gcn_w, mut gru_fwd, mut gru_bwd) = (None, None, None, None, None);
        let head_in = match config.architecture {
            Architecture::Full => {
                gat_w = Some(b.push("gat.W", d, f, false));
                gat_a = Some(b.push("gat.a", 2 * f, 1, false));
                gru_fwd = Some(b.gru("gru.fwd", f, h));
                gru_bwd = Some(b.gru("gru.bwd", f, h));
                2 * h
            }
            Architecture::TemporalOnly => {
                gru_fwd = Some(b.gru("gru.fwd", d, h));
                gru_bwd = Some(b.gru("gru.bwd", d, h));
                2 * h
            }
            Architecture::SpatialOnly => {
                gcn_w = Some(b.push("gcn.W", d, f, false));
                f
            }
        };
        let mu_w = b.push("head.mu.w", head_in, 1, false);
        let mu_b = b.push("head.mu.b", 1, 1, true);
        let sigma_w = b.push("head.sigma.w", head_in, 1, false);
        let sigma_b = b.push("head.sigma.b", 1, 1, true);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = b
            .specs
            .into_iter()
            .map(|(name, rows, cols, bias)| {
                let value = if bias {
                    Tensor2D::zeros(rows, cols)
                } else {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Tensor2D::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
                };
                Parameter::new(name, value)
            })
            .collect();
        let layout = Layout { gat_w, gat_a, gcn_w, gru_fwd, gru_bwd, mu_w, mu_b, sigma_w, sigma_b };
        Ok(Self { config: config.clone(), seed, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor2D> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces all values; shapes must match.
    pub fn set_values(&mut self, values: &[Tensor2D]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("set_values", format!("{} tensors for {} parameters", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value.expect_same_shape("set_values", v)?;
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Records every parameter on `tape`, in [`ModelParams::params`] order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            p.accumulate(grads, v);
        }
    }

    /// Rebuilds from stored tensors (used by checkpoint loading).
    pub fn from_parts(config: ModelConfig, seed: u64, named: Vec<(String, Tensor2D)>) -> Result<Self> {
        let mut fresh = Self::init(&config, seed)?;
        if named.len() != fresh.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this configuration, found {}",
                fresh.params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in fresh.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {}x{} does not match expected {} {}x{}",
                    value.rows(),
                    value.cols(),
                    p.name,
                    p.value.rows(),
                    p.value.cols()
                )));
            }
            *p = Parameter::new(name, value);
        }
        Ok(fresh)
    }
}

/// Per-entry Gaussian output: means and strictly positive variances.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianField {
    pub mu: Tensor2D,
    pub sigma2: Tensor2D,
}

impl GaussianField {
    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    /// Concatenates fields along time.
    pub fn concat_time(parts: &[GaussianField]) -> Result<GaussianField> {
        let n = parts.first().map_or(0, |p| p.mu.rows());
        let t: usize = parts.iter().map(|p| p.mu.cols()).sum();
        let mut mu = Tensor2D::zeros(n, t);
        let mut sigma2 = Tensor2D::zeros(n, t);
        let mut off = 0;
        for p in parts {
            if p.mu.rows() != n {
                return Err(Error::shape("concat_time", "fields disagree on sensor count"));
            }
            for i in 0..n {
                for j in 0..p.mu.cols() {
                    mu[(i, off + j)] = p.mu[(i, j)];
                    sigma2[(i, off + j)] = p.sigma2[(i, j)];
                }
            }
            off += p.mu.cols();
        }
        Ok(GaussianField { mu, sigma2 })
    }
}

/// Handles to one GRU direction's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    fn from_layout(l: &GruLayout, bound: &[Var]) -> Self {
        Self {
            w_z: bound[l.w_z],
            u_z: bound[l.u_z],
            b_z: bound[l.b_z],
            w_r: bound[l.w_r],
            u_r: bound[l.u_r],
            b_r: bound[l.b_r],
            w_h: bound[l.w_h],
            u_h: bound[l.u_h],
            b_h: bound[l.b_h],
        }
    }
}

/// One GRU step for a batch of rows (one row per node):
///
/// ```text
/// z  = sigmoid(a W_z + h U_z + b_z)
/// r  = sigmoid(a W_r + h U_r + b_r)
/// h~ = tanh(a W_h + (r ⊙ h) U_h + b_h)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
pub fn gru_step(tape: &Tape, g: &GruVars, input: Var, h_prev: Var) -> Result<Var> {
    let affine = |w: Var, u_in: Var, u: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(input, w)?;
        let hu = tape.matmul(u_in, u)?;
        let s = tape.add(xw, hu)?;
        tape.add(s, b)
    };
    let z = tape.sigmoid(affine(g.w_z, h_prev, g.u_z, g.b_z)?)?;
    let r = tape.sigmoid(affine(g.w_r, h_prev, g.u_r, g.b_r)?)?;
    let rh = tape.mul(r, h_prev)?;
    let cand = tape.tanh(affine(g.w_h, rh, g.u_h, g.b_h)?)?;
    let delta = tape.sub(cand, h_prev)?;
    let step = tape.mul(z, delta)?;
    tape.add(h_prev, step)
}

/// Runs `fwd` over steps `0..T` and `bwd` over `T-1..=0` from zero states and
/// returns `[h_t ‖ h'_t]` per step.
pub fn bigru(tape: &Tape, fwd: &GruVars, bwd: &GruVars, seq: &[Var], hidden: usize) -> Result<Vec<Var>> {
    if seq.is_empty() {
        return Err(Error::invalid("bidirectional GRU needs at least one time step"));
    }
    let rows = tape.shape(seq[0]).0;
    let zero = tape.constant(Tensor2D::zeros(rows, hidden));
    let mut forward = Vec::with_capacity(seq.len());
    let mut h = zero;
    for &x in seq {
        h = gru_step(tape, fwd, x, h)?;
        forward.push(h);
    }
    let mut backward = vec![zero; seq.len()];
    let mut h = zero;
    for (t, &x) in seq.iter().enumerate().rev() {
        h = gru_step(tape, bwd, x, h)?;
        backward[t] = h;
    }
    forward.into_iter().zip(backward).map(|(f, b)| tape.concat_cols(&[f, b])).collect()
}

/// Attention-layer handles shared by every time step of one forward pass.
struct GatVars {
    w: Var,
    a_self: Var,
    a_neigh: Var,
    mask: Arc<Vec<bool>>,
    slope: f64,
}

impl GatVars {
    fn new(tape: &Tape, w: Var, a: Var, graph: &SensorGraph, slope: f64) -> Result<Self> {
        let f = tape.shape(w).1;
        let a_row = tape.transpose(a)?;
        let a_self = tape.transpose(tape.slice_cols(a_row, 0, f)?)?;
        let a_neigh = tape.transpose(tape.slice_cols(a_row, f, 2 * f)?)?;
        Ok(Self { w, a_self, a_neigh, mask: Arc::new(graph.attention_mask()), slope })
    }

    /// Returns (`alpha`, `Wx`) for one N x d feature matrix.
    fn attention(&self, tape: &Tape, x: Var) -> Result<(Var, Var)> {
        let wx = tape.matmul(x, self.w)?;
        let s_self = tape.matmul(wx, self.a_self)?;
        let s_neigh = tape.matmul(wx, self.a_neigh)?;
        let s_neigh_row = tape.transpose(s_neigh)?;
        let logits = tape.add(s_self, s_neigh_row)?;
        let logits = tape.leaky_relu(logits, self.slope)?;
        Ok((tape.row_softmax_masked(logits, self.mask.clone())?, wx))
    }

    fn embed(&self, tape: &Tape, x: Var, act: Activation) -> Result<Var> {
        let (alpha, wx) = self.attention(tape, x)?;
        let agg = tape.matmul(alpha, wx)?;
        activate(tape, agg, act)
    }
}

fn activate(tape: &Tape, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Elu => tape.elu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => Ok(x),
    }
}

/// Mean / variance variables produced on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub mu: Var,
    pub sigma2: Var,
}

fn check_inputs(params: &ModelParams, x: &Tensor2D, graph: &SensorGraph) -> Result<()> {
    if params.config.input_dim != 1 {
        return Err(Error::invalid("sensor matrices carry one feature per node; input_dim must be 1"));
    }
    if x.rows() != graph.n() {
        return Err(Error::shape("model_forward", format!("{} sensors but graph has {} nodes", x.rows(), graph.n())));
    }
    if x.cols() == 0 {
        return Err(Error::invalid("input has no time steps"));
    }
    Ok(())
}

/// Builds the forward pass for an N x T input (missing entries already zero).
pub fn forward_on_tape(
    tape: &Tape,
    params: &ModelParams,
    bound: &[Var],
    x: &Tensor2D,
    graph: &SensorGraph,
) -> Result<FieldVars> {
    check_inputs(params, x, graph)?;
    let cfg = &params.config;
    let lay = &params.layout;
    let columns: Vec<Var> = (0..x.cols())
        .map(|t| tape.constant(Tensor2D::from_vec(x.rows(), 1, x.col(t)).expect("column shape")))
        .collect();

    let features: Vec<Var> = match cfg.architecture {
        Architecture::Full => {
            let (w, a) = (lay.gat_w.expect("full model has gat.W"), lay.gat_a.expect("full model has gat.a"));
            let gat = GatVars::new(tape, bound[w], bound[a], graph, cfg.leaky_slope)?;
            let embedded: Vec<Var> =
                columns.iter().map(|&c| gat.embed(tape, c, cfg.activation)).collect::<Result<_>>()?;
            run_bigru(tape, params, bound, &embedded)?
        }
        Architecture::TemporalOnly => run_bigru(tape, params, bound, &columns)?,
        Architecture::SpatialOnly => {
            let w = bound[lay.gcn_w.expect("spatial model has gcn.W")];
            let a_hat = tape.constant(graph.normalized_adjacency());
            columns
                .iter()
                .map(|&c| {
                    let prop = tape.matmul(a_hat, c)?;
                    let z = tape.matmul(prop, w)?;
                    activate(tape, z, cfg.activation)
                })
                .collect::<Result<_>>()?
        }
    };

    let mut mus = Vec::with_capacity(features.len());
    let mut vars = Vec::with_capacity(features.len());
    for &h in &features {
        let mu = tape.add(tape.matmul(h, bound[lay.mu_w])?, bound[lay.mu_b])?;
        let pre = tape.add(tape.matmul(h, bound[lay.sigma_w])?, bound[lay.sigma_b])?;
        let var = tape.add_scalar(tape.softplus(pre)?, VARIANCE_FLOOR)?;
        mus.push(mu);
        vars.push(var);
    }
    Ok(FieldVars { mu: tape.concat_cols(&mus)?, sigma2: tape.concat_cols(&vars)? })
}

fn run_bigru(tape: &Tape, params: &ModelParams, bound: &[Var], seq: &[Var]) -> Result<Vec<Var>> {
    let lay = &params.layout;
    let fwd = GruVars::from_layout(lay.gru_fwd.as_ref().expect("recurrent model"), bound);
    let bwd = GruVars::from_layout(lay.gru_bwd.as_ref().expect("recurrent model"), bound);
    bigru(tape, &fwd, &bwd, seq, params.config.hidden)
}

/// Evaluates the network configured in `params` on one N x T window.
pub fn model_forward(params: &ModelParams, x: &Tensor2D, graph: &SensorGraph) -> Result<GaussianField> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward_on_tape(&tape, params, &bound, x, graph)?;
    Ok(GaussianField { mu: tape.value(out.mu), sigma2: tape.value(out.sigma2) })
}

/// Same as [`model_forward`] but checks that `params` were built for `variant`.
pub fn ablation_forward(
    variant: Architecture,
    params: &ModelParams,
    x: &Tensor2D,
    graph: &SensorGraph,
) -> Result<GaussianField> {
    if params.config.architecture != variant {
        return Err(Error::invalid(format!(
            "parameters were initialised for {} but {variant} was requested",
            params.config.architecture
        )));
    }
    model_forward(params, x, graph)
}

/// Runs the network over consecutive non-overlapping windows of `window` steps.
pub fn forward_windows(params: &ModelParams, x: &Tensor2D, graph: &SensorGraph, window: usize) -> Result<GaussianField> {
    if window == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    let parts = window_ranges(x.cols(), window)
        .into_iter()
        .map(|(s, e)| {
            let xw = Tensor2D::from_fn(x.rows(), e - s, |i, j| x[(i, s + j)]);
            model_forward(params, &xw, graph)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianField::concat_time(&parts)
}

/// `[start, end)` ranges of non-overlapping windows; the last may be shorter.
pub fn window_ranges(t: usize, window: usize) -> Vec<(usize, usize)> {
    (0..t).step_by(window.max(1)).map(|s| (s, (s + window).min(t))).collect()
}

/// Attention coefficients of the graph layer for one N x d feature matrix.
pub fn gat_attention(params: &ModelParams, x: &Tensor2D, graph: &SensorGraph) -> Result<Tensor2D> {
    let tape = Tape::new();
    let gat = bind_gat(&tape, params, graph)?;
    let xv = tape.constant(x.clone());
    let (alpha, _) = gat.attention(&tape, xv)?;
    Ok(tape.value(alpha))
}

/// Graph-attention embeddings `γ(Σ_j α_ij W x_j)` for one N x d feature matrix.
pub fn gat_forward(params: &ModelParams, x: &Tensor2D, graph: &SensorGraph) -> Result<Tensor2D> {
    let tape = Tape::new();
    let gat = bind_gat(&tape, params, graph)?;
    let xv = tape.constant(x.clone());
    let h = gat.embed(&tape, xv, params.config.activation)?;
    Ok(tape.value(h))
}

fn bind_gat(tape: &Tape, params: &ModelParams, graph: &SensorGraph) -> Result<GatVars> {
    let (Some(w), Some(a)) = (params.layout.gat_w, params.layout.gat_a) else {
        return Err(Error::invalid("parameters have no graph-attention layer"));
    };
    let w = tape.constant(params.params[w].value.clone());
    let a = tape.constant(params.params[a].value.clone());
    GatVars::new(tape, w, a, graph, params.config.leaky_slope)
}

/// BiGRU outputs (one N x 2H matrix per step) for a feature sequence.
pub fn bigru_forward(params: &ModelParams, seq: &[Tensor2D]) -> Result<Vec<Tensor2D>> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let vars: Vec<Var> = seq.iter().map(|s| tape.constant(s.clone())).collect();
    let out = run_bigru_checked(&tape, params, &bound, &vars)?;
    Ok(out.into_iter().map(|v| tape.value(v)).collect())
}

fn run_bigru_checked(tape: &Tape, params: &ModelParams, bound: &[Var], seq: &[Var]) -> Result<Vec<Var>> {
    if params.layout.gru_fwd.is_none() {
        return Err(Error::invalid("parameters have no recurrent layer"));
    }
    run_bigru(tape, params, bound, seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ring_distances;

    fn small_config(arch: Architecture) -> ModelConfig {
        ModelConfig { architecture: arch, gat_width: 3, hidden: 4, ..ModelConfig::default() }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_config(Architecture::Full);
        assert_eq!(ModelParams::init(&cfg, 5).unwrap(), ModelParams::init(&cfg, 5).unwrap());
        assert_ne!(ModelParams::init(&cfg, 5).unwrap().values(), ModelParams::init(&cfg, 6).unwrap().values());
    }

    #[test]
    fn init_bounds_and_zero_biases() {
        let cfg = ModelConfig { gat_width: 3, hidden: 3, ..ModelConfig::default() };
        let p = ModelParams::init(&cfg, 1).unwrap();
        // U_* are 3x3: sqrt(6 / 6) = 1
        for name in ["gru.fwd.U_z", "gru.bwd.U_h"] {
            assert!(p.get(name).unwrap().value.as_slice().iter().all(|v| v.abs() <= 1.0));
        }
        for name in ["gru.fwd.b_z", "gru.bwd.b_r", "head.mu.b", "head.sigma.b"] {
            assert!(p.get(name).unwrap().value.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_rejects_zero_width() {
        let cfg = ModelConfig { hidden: 0, ..ModelConfig::default() };
        assert!(ModelParams::init(&cfg, 0).is_err());
    }

    #[test]
    fn layouts_per_architecture() {
        let full = ModelParams::init(&small_config(Architecture::Full), 0).unwrap();
        assert_eq!(full.get("gat.a").unwrap().value.shape(), (6, 1));
        assert_eq!(full.get("gru.fwd.W_z").unwrap().value.shape(), (3, 4));
        let temporal = ModelParams::init(&small_config(Architecture::TemporalOnly), 0).unwrap();
        assert!(temporal.get("gat.W").is_none());
        assert_eq!(temporal.get("gru.fwd.W_z").unwrap().value.shape(), (1, 4));
        let spatial = ModelParams::init(&small_config(Architecture::SpatialOnly), 0).unwrap();
        assert!(spatial.get("gru.fwd.W_z").is_none());
        assert_eq!(spatial.get("head.mu.w").unwrap().value.shape(), (3, 1));
    }

    #[test]
    fn forward_shapes_and_positive_variance() {
        let graph = SensorGraph::from_distances_default(&ring_distances(5)).unwrap();
        let x = Tensor2D::from_fn(5, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin().abs());
        for arch in [Architecture::Full, Architecture::SpatialOnly, Architecture::TemporalOnly] {
            let p = ModelParams::init(&small_config(arch), 2).unwrap();
            let f = model_forward(&p, &x, &graph).unwrap();
            assert_eq!(f.mu.shape(), (5, 7));
            assert_eq!(f.sigma2.shape(), (5, 7));
            assert!(f.sigma2.as_slice().iter().all(|&v| v >= VARIANCE_FLOOR));
            assert_eq!(f, model_forward(&p, &x, &graph).unwrap());
        }
    }

    #[test]
    fn graph_size_mismatch_is_rejected() {
        let graph = SensorGraph::from_distances_default(&ring_distances(4)).unwrap();
        let p = ModelParams::init(&small_config(Architecture::Full), 0).unwrap();
        assert!(model_forward(&p, &Tensor2D::zeros(5, 3), &graph).is_err());
    }

    #[test]
    fn ablation_checks_variant() {
        let graph = SensorGraph::from_distances_default(&ring_distances(3)).unwrap();
        let p = ModelParams::init(&small_config(Architecture::TemporalOnly), 0).unwrap();
        let x = Tensor2D::ones(3, 2);
        assert!(ablation_forward(Architecture::TemporalOnly, &p, &x, &graph).is_ok());
        assert!(ablation_forward(Architecture::SpatialOnly, &p, &x, &graph).is_err());
    }

    #[test]
    fn windows_cover_series() {
        assert_eq!(window_ranges(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(window_ranges(8, 8), vec![(0, 8)]);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = ModelParams::init(&small_config(Architecture::TemporalOnly), 0).unwrap();
        assert!(bigru_forward(&p, &[]).is_err());
    }
}
