//! Declarative run configuration (TOML), with `[model]`, `[training]` and
//! `[eval]` tables. Every key is optional and defaults to the library
//! defaults; unknown keys are rejected. The key set is listed in the README.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::SvdConfig;
use crate::data::{NormScheme, Regime, STEPS_PER_DAY};
use crate::error::{Error, Result};
use crate::eval::{BenchmarkSpec, Method, ReportUnits};
use crate::model::ModelConfig;
use crate::train::TrainingConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub regimes: Vec<Regime>,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub level: f64,
    pub scheme: NormScheme,
    pub units: ReportUnits,
    /// `None` uses `min(10, min(N, T) - 1)`.
    pub svd_rank: Option<usize>,
    pub svd_max_iterations: usize,
    pub svd_tol: f64,
    pub steps_per_day: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let spec = BenchmarkSpec::default();
        Self {
            methods: spec.methods,
            regimes: spec.regimes,
            rates: spec.rates,
            seeds: spec.seeds,
            level: spec.level,
            scheme: spec.scheme,
            units: spec.units,
            svd_rank: spec.svd.rank,
            svd_max_iterations: spec.svd.max_iterations,
            svd_tol: spec.svd.tol,
            steps_per_day: STEPS_PER_DAY,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.eval.steps_per_day == 0 {
            return Err(Error::Config("eval.steps_per_day must be positive".into()));
        }
        if let Some(r) = self.eval.rates.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::Config(format!("eval.rates entries must lie in (0, 1), got {r}")));
        }
        Ok(())
    }

    pub fn benchmark_spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            methods: self.eval.methods.clone(),
            regimes: self.eval.regimes.clone(),
            rates: self.eval.rates.clone(),
            seeds: self.eval.seeds.clone(),
            level: self.eval.level,
            model: self.model.clone(),
            training: self.training.clone(),
            scheme: self.eval.scheme,
            units: self.eval.units,
            svd: SvdConfig {
                rank: self.eval.svd_rank,
                max_iterations: self.eval.svd_max_iterations,
                tol: self.eval.svd_tol,
            },
            steps_per_day: self.eval.steps_per_day,
        }
    }
}
