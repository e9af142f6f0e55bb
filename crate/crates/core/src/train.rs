//! Adam training loop over non-overlapping time windows, plus the fitted-model
//! wrapper that handles normalization on the way in and out.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_grad, relative_error, Parameter, Tape, FD_STEP};
use crate::data::{Mask, NormScheme, NormalizationParams, TrafficTensor};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::loss::{check_lambda, losses_on_tape, LossParts, NllReduction};
use crate::model::{forward_on_tape, forward_windows, window_ranges, GaussianField, ModelConfig, ModelParams};
use crate::tensor::Tensor2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Weight of the reconstruction term; `1 - lambda` goes to the NLL term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Steps per training window.
    pub window_length: usize,
    pub seed: u64,
    /// Epochs without improvement before stopping (0 never stops early). The
    /// watched score is the validation MSE when validating, else the combined loss.
    pub patience: usize,
    /// Global gradient-norm clip; `None` (written `"none"` in config files) disables clipping.
    #[serde(with = "optional_clip")]
    pub grad_clip: Option<f64>,
    pub nll_reduction: NllReduction,
    /// Per-epoch probability of hiding an observed input entry (its target stays in the loss).
    pub input_dropout: f64,
    /// Per-window probability of hiding a sensor's entire input row.
    pub sensor_dropout: f64,
    /// Fraction of observed entries withheld from training (input and loss)
    /// and used to select the returned parameters; 0 disables validation.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            learning_rate: 1e-3,
            max_epochs: 200,
            window_length: 48,
            seed: 0,
            patience: 20,
            grad_clip: Some(5.0),
            nll_reduction: NllReduction::Mean,
            input_dropout: 0.0,
            sensor_dropout: 0.0,
            validation_fraction: 0.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.window_length == 0 {
            return Err(Error::invalid("window length must be positive"));
        }
        for (name, p) in [
            ("input_dropout", self.input_dropout),
            ("sensor_dropout", self.sensor_dropout),
            ("validation_fraction", self.validation_fraction),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("gradient clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// TOML has no null, so a disabled clip is spelled `"none"`.
mod optional_clip {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(c) => s.serialize_f64(*c),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(c) => Ok(Some(c)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("grad_clip must be a number or \"none\", got {w:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub reg: f64,
    pub combined: f64,
    /// MSE on the withheld validation entries, when validation is enabled.
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    pub fn initial(&self) -> Option<&EpochLog> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLog> {
        self.epochs.last()
    }

    /// `epoch,recon,reg,combined` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,recon,reg,combined,val_mse\n");
        for e in &self.epochs {
            let val = e.val_mse.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.recon, e.reg, e.combined, val));
        }
        out
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor2D>,
    v: Vec<Tensor2D>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Parameter]) -> Self {
        let zeros = |p: &Parameter| Tensor2D::zeros(p.value.rows(), p.value.cols());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Parameter]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.as_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                let g = grads[k];
                ms[k] = self.beta1 * ms[k] + (1.0 - self.beta1) * g;
                vs[k] = self.beta2 * vs[k] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (ms[k] / c1) / ((vs[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn clip_gradients(params: &mut [Parameter], max_norm: f64) -> f64 {
    let norm = params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params {
            p.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Combined loss of one window: network input `input`, loss on `target` under `mask`.
pub struct WindowObjective<'a> {
    pub input: Tensor2D,
    pub target: Tensor2D,
    pub mask: Mask,
    pub graph: &'a SensorGraph,
    pub lambda: f64,
    pub reduction: NllReduction,
}

impl WindowObjective<'_> {
    pub fn evaluate(&self, params: &ModelParams) -> Result<LossParts> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        self.record(&tape, params, &bound).map(|(parts, _)| parts)
    }

    /// Evaluates and adds the gradient into every parameter's accumulator.
    pub fn evaluate_with_grad(&self, params: &mut ModelParams) -> Result<LossParts> {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (parts, root) = self.record(&tape, params, &bound)?;
        let grads = tape.backward(root)?;
        params.accumulate(&bound, &grads);
        Ok(parts)
    }

    fn record(
        &self,
        tape: &Tape,
        params: &ModelParams,
        bound: &[crate::autodiff::Var],
    ) -> Result<(LossParts, crate::autodiff::Var)> {
        let field = forward_on_tape(tape, params, bound, &self.input, self.graph)?;
        let l = losses_on_tape(tape, field.mu, field.sigma2, &self.target, &self.mask, self.lambda, self.reduction)?;
        let val = |v| tape.value(v).item().expect("scalar loss");
        Ok((LossParts { recon: val(l.recon), reg: val(l.reg), combined: val(l.combined) }, l.combined))
    }
}

/// Hides extra observed inputs. Hidden entries keep their targets in the loss.
fn corrupt(x: &TrafficTensor, cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> Tensor2D {
    let mut input = x.values.clone();
    let t = x.t();
    for i in 0..x.n() {
        let drop_row = cfg.sensor_dropout > 0.0 && rng.random::<f64>() < cfg.sensor_dropout;
        for j in 0..t {
            let hide = !x.mask.get(i, j)
                || drop_row
                || (cfg.input_dropout > 0.0 && rng.random::<f64>() < cfg.input_dropout);
            if hide {
                input[(i, j)] = 0.0;
            }
        }
    }
    input
}

/// Withholds `round(fraction · k)` of the `k` observed entries, chosen
/// uniformly; returns the reduced training tensor and the withheld mask.
fn split_validation(data: &TrafficTensor, fraction: f64, rng: &mut ChaCha8Rng) -> Result<(TrafficTensor, Option<Mask>)> {
    let observed: Vec<usize> = (0..data.mask.as_slice().len()).filter(|&k| data.mask.as_slice()[k]).collect();
    let count = (fraction * observed.len() as f64).round() as usize;
    if count == 0 {
        return Ok((data.clone(), None));
    }
    let (n, t) = data.shape();
    let mut held = vec![false; n * t];
    for k in rand::seq::index::sample(rng, observed.len(), count) {
        held[observed[k]] = true;
    }
    let held = Mask::from_vec(n, t, held)?;
    let mut train = data.clone();
    for (k, &h) in held.as_slice().iter().enumerate() {
        if h {
            train.mask.set(k / t, k % t, false);
            train.values.as_mut_slice()[k] = 0.0;
        }
    }
    Ok((train, Some(held)))
}

fn validation_mse(params: &ModelParams, train: &TrafficTensor, truth: &Tensor2D, held: &Mask, graph: &SensorGraph, window: usize) -> Result<f64> {
    let field = forward_windows(params, &train.values, graph, window)?;
    let (sum, count) = held
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .fold((0.0, 0usize), |(s, c), (k, _)| (s + (field.mu.as_slice()[k] - truth.as_slice()[k]).powi(2), c + 1));
    Ok(sum / count as f64)
}

/// Trains `params` on the observed entries of `data` (missing entries already zero).
///
/// With a nonzero `validation_fraction`, the withheld entries are scored after
/// every epoch, early stopping watches their MSE, and the best-scoring
/// parameters are returned. Otherwise early stopping watches the combined
/// training loss and the final parameters are returned.
pub fn train(
    mut params: ModelParams,
    data: &TrafficTensor,
    graph: &SensorGraph,
    cfg: &TrainingConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_data, held) = split_validation(data, cfg.validation_fraction, &mut rng)?;
    let windows: Vec<TrafficTensor> =
        window_ranges(data.t(), cfg.window_length).into_iter().map(|(s, e)| train_data.window(s, e)).collect();
    if let Some(w) = windows.iter().position(|w| w.mask.observed_count() == 0) {
        return Err(Error::invalid(format!("training window {w} has no observed entries")));
    }
    let mut adam = Adam::new(cfg.learning_rate, params.params());
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut report = TrainReport { epochs: Vec::new(), best_epoch: 0, stopped_early: false, wall_time_secs: 0.0 };
    let mut best = f64::INFINITY;
    let mut best_values: Option<Vec<Tensor2D>> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut recon, mut reg, mut combined) = (0.0, 0.0, 0.0);
        for &w in &order {
            let win = &windows[w];
            let objective = WindowObjective {
                input: corrupt(win, cfg, &mut rng),
                target: win.values.clone(),
                mask: win.mask.clone(),
                graph,
                lambda: cfg.lambda,
                reduction: cfg.nll_reduction,
            };
            params.zero_grad();
            let parts = objective.evaluate_with_grad(&mut params)?;
            if !parts.combined.is_finite() {
                let last_finite = report.epochs.iter().rev().take(3).map(|e| e.combined).collect();
                return Err(Error::Diverged { epoch, last_finite });
            }
            if let Some(c) = cfg.grad_clip {
                clip_gradients(params.params_mut(), c);
            }
            adam.step(params.params_mut());
            recon += parts.recon;
            reg += parts.reg;
            combined += parts.combined;
        }
        let nw = windows.len() as f64;
        let val_mse = match &held {
            Some(h) => Some(validation_mse(&params, &train_data, &data.values, h, graph, cfg.window_length)?),
            None => None,
        };
        let log = EpochLog { epoch, recon: recon / nw, reg: reg / nw, combined: combined / nw, val_mse };
        log::debug!(
            "epoch {epoch}: recon {:.6} reg {:.6} combined {:.6} val {:?}",
            log.recon,
            log.reg,
            log.combined,
            log.val_mse
        );
        report.epochs.push(log);
        let score = val_mse.unwrap_or(log.combined);
        if score < best {
            best = score;
            since_best = 0;
            report.best_epoch = epoch;
            if held.is_some() {
                best_values = Some(params.values());
            }
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    match best_values {
        Some(values) => params.set_values(&values)?,
        None => report.best_epoch = report.epochs.len().saturating_sub(1),
    }
    params.zero_grad();
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub worst_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst_param: String,
    pub worst_index: usize,
}

/// Checks every parameter coordinate of the combined loss on a random
/// `n × t` instance (ring graph, about a quarter of the entries missing).
pub fn gradient_check(model_cfg: &ModelConfig, n: usize, t: usize, seed: u64, lambda: f64) -> Result<GradCheckReport> {
    if n < 2 || t == 0 {
        return Err(Error::invalid(format!("gradient check needs n >= 2 and t >= 1, got {n}x{t}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Tensor2D::from_fn(n, t, |_, _| rng.random_range(0.0..1.0));
    let observed: Vec<bool> = (0..n * t).map(|_| rng.random::<f64>() >= 0.25).collect();
    let mut mask = Mask::from_vec(n, t, observed)?;
    mask.set(0, 0, true);
    let graph = SensorGraph::from_distances_default(&crate::graph::ring_distances(n))?;
    let input = Tensor2D::from_fn(n, t, |i, j| if mask.get(i, j) { values[(i, j)] } else { 0.0 });
    let objective = WindowObjective {
        input,
        target: values,
        mask,
        graph: &graph,
        lambda,
        reduction: NllReduction::Mean,
    };
    let mut params = ModelParams::init(model_cfg, seed)?;
    params.zero_grad();
    objective.evaluate_with_grad(&mut params)?;
    let analytic: Vec<Tensor2D> = params.params().iter().map(|p| p.grad.clone()).collect();
    let probe = params.clone();
    let numeric = finite_diff_grad(
        |vals| {
            let mut local = probe.clone();
            local.set_values(vals).expect("shapes unchanged");
            objective.evaluate(&local).map(|l| l.combined).unwrap_or(f64::NAN)
        },
        &params.values(),
        FD_STEP,
    )?;
    let mut report = GradCheckReport { coordinates: 0, worst_relative_error: 0.0, worst_param: String::new(), worst_index: 0 };
    for ((p, a), b) in params.params().iter().zip(&analytic).zip(&numeric) {
        for (k, (x, y)) in a.as_slice().iter().zip(b.as_slice()).enumerate() {
            let err = relative_error(*x, *y);
            report.coordinates += 1;
            if err > report.worst_relative_error || report.worst_param.is_empty() {
                report.worst_relative_error = err;
                report.worst_param = p.name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

/// A trained network plus the normalization it was trained under.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub params: ModelParams,
    pub norm: NormalizationParams,
    pub window_length: usize,
}

impl FittedModel {
    /// Fits normalization on the observed entries of `masked`, then trains.
    pub fn fit(
        masked: &TrafficTensor,
        graph: &SensorGraph,
        model_cfg: &ModelConfig,
        train_cfg: &TrainingConfig,
        scheme: NormScheme,
    ) -> Result<(Self, TrainReport)> {
        let norm = NormalizationParams::fit(masked, scheme)?;
        let normalized = norm.normalize(masked);
        let init = ModelParams::init(model_cfg, train_cfg.seed)?;
        let (params, report) = train(init, &normalized, graph, train_cfg)?;
        Ok((Self { params, norm, window_length: train_cfg.window_length }, report))
    }

    /// Mean and variance in physical units for every entry of `masked`.
    pub fn impute(&self, masked: &TrafficTensor, graph: &SensorGraph) -> Result<GaussianField> {
        let normalized = self.norm.normalize(masked);
        let field = forward_windows(&self.params, &normalized.values, graph, self.window_length)?;
        Ok(GaussianField {
            mu: field.mu.map(|v| self.norm.denormalize_value(v)),
            sigma2: field.sigma2.map(|v| self.norm.denormalize_variance(v)),
        })
    }

    /// Same as [`FittedModel::impute`] but left in normalized units.
    pub fn impute_normalized(&self, masked: &TrafficTensor, graph: &SensorGraph) -> Result<GaussianField> {
        let normalized = self.norm.normalize(masked);
        forward_windows(&self.params, &normalized.values, graph, self.window_length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::model::Architecture;

    fn tiny() -> (TrafficTensor, SensorGraph, ModelConfig) {
        let ds = synth_generate(4, 12, 3, 1.0).unwrap();
        let norm = NormalizationParams::fit(&ds.tensor, NormScheme::MinMax).unwrap();
        let cfg = ModelConfig { gat_width: 3, hidden: 4, ..ModelConfig::default() };
        (norm.normalize(&ds.tensor), ds.graph, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (x, g, mcfg) = tiny();
        let init = ModelParams::init(&mcfg, 1).unwrap();
        let cfg = TrainingConfig { learning_rate: 0.0, max_epochs: 3, window_length: 6, ..TrainingConfig::default() };
        let (out, report) = train(init.clone(), &x, &g, &cfg).unwrap();
        assert_eq!(out.values(), init.values());
        assert_eq!(report.epochs.len(), 3);
    }

    #[test]
    fn combined_equals_lambda_mix_per_epoch() {
        let (x, g, mcfg) = tiny();
        let cfg = TrainingConfig { lambda: 0.3, max_epochs: 4, window_length: 5, ..TrainingConfig::default() };
        let (_, report) = train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &cfg).unwrap();
        for e in &report.epochs {
            assert!((e.combined - (0.3 * e.recon + 0.7 * e.reg)).abs() < 1e-12);
        }
        assert!(report.to_csv().starts_with("epoch,recon,reg,combined,val_mse\n0,"));
    }

    #[test]
    fn training_is_deterministic() {
        let (x, g, mcfg) = tiny();
        let cfg = TrainingConfig { max_epochs: 3, window_length: 6, seed: 9, ..TrainingConfig::default() };
        let a = train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &cfg).unwrap();
        let b = train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.epochs, b.1.epochs);
    }

    #[test]
    fn rejects_window_without_observations() {
        let (mut x, g, mcfg) = tiny();
        for i in 0..x.n() {
            for t in 0..6 {
                x.mask.set(i, t, false);
            }
        }
        let cfg = TrainingConfig { window_length: 6, ..TrainingConfig::default() };
        assert!(train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig { lambda: -0.1, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { window_length: 0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig { input_dropout: 1.0, ..TrainingConfig::default() }.validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn validation_returns_best_epoch_params() {
        let (x, g, mcfg) = tiny();
        let cfg = TrainingConfig { max_epochs: 6, window_length: 6, learning_rate: 0.05, validation_fraction: 0.3, ..TrainingConfig::default() };
        let (out, report) = train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &cfg).unwrap();
        let vals: Vec<f64> = report.epochs.iter().map(|e| e.val_mse.unwrap()).collect();
        let best = vals.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(vals[report.best_epoch], best);
        // rerunning up to the best epoch reproduces the returned parameters
        let shorter = TrainingConfig { max_epochs: report.best_epoch + 1, ..cfg };
        let (again, _) = train(ModelParams::init(&mcfg, 1).unwrap(), &x, &g, &shorter).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn small_gradient_check_passes() {
        let cfg = ModelConfig { gat_width: 3, hidden: 4, ..ModelConfig::default() };
        let r = gradient_check(&cfg, 4, 5, 2, 0.5).unwrap();
        assert_eq!(r.coordinates, ModelParams::init(&cfg, 2).unwrap().num_scalars());
        assert!(r.worst_relative_error < 1e-6, "{r:?}");
    }

    #[test]
    fn early_stop_with_flat_loss() {
        let (x, g, mcfg) = tiny();
        let cfg = TrainingConfig {
            learning_rate: 0.0,
            input_dropout: 0.0,
            max_epochs: 50,
            patience: 3,
            window_length: 12,
            ..TrainingConfig::default()
        };
        let mcfg = mcfg.with_architecture(Architecture::SpatialOnly);
        let (_, report) = train(ModelParams::init(&mcfg, 0).unwrap(), &x, &g, &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs.len(), 4);
    }
}
