//! TOML run configuration and command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use rirsolve::experiment::Method;
use rirsolve::flow_engine::FlowConfig;
use rirsolve::scenario::{CorpusSpec, MeasurementSetup};
use rirsolve::task::TaskKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Every input file must have this rate; nothing is resampled.
    pub sample_rate: u32,
    /// Master seed for corpus generation, simulated noise and the sampler.
    pub seed: u64,
    pub flow: FlowConfig,
    /// `None` takes the paper defaults of the task at hand.
    pub measurement: Option<MeasurementSetup>,
    pub corpus: CorpusSpec,
    pub solve: SolveSection,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            seed: 0,
            flow: FlowConfig {
                steps_t: 200,
                ..FlowConfig::default()
            },
            measurement: None,
            corpus: CorpusSpec::default(),
            solve: SolveSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

/// Noise and clip parameters for solving a recorded measurement. Anything left
/// out is estimated from the observation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub sigma_n: Option<f64>,
    pub laplace_b: Option<f64>,
    /// Clip threshold τ; defaults to the peak of the clipped observation.
    pub clip_level: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub task: TaskKind,
    /// Empty means the measurement SNR.
    pub snr_db: Vec<f64>,
    /// Empty means the method plus its baselines for the task.
    pub methods: Vec<Method>,
    /// Concurrent corpus items; 0 uses every available core.
    pub workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            task: TaskKind::Denoise,
            snr_db: Vec::new(),
            methods: Vec::new(),
            workers: 1,
        }
    }
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snr_db: Option<f64>,
    pub sigma_n: Option<f64>,
    pub gamma: Option<f64>,
    pub steps: Option<usize>,
}

/// A parsed configuration with the text it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    /// The file exactly as read, kept for provenance.
    pub source: Option<(PathBuf, String)>,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> CliResult<Loaded> {
        match path {
            None => Ok(Loaded {
                config: Config::default(),
                source: None,
            }),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let config = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Ok(Loaded {
                    config,
                    source: Some((p.to_path_buf(), text)),
                })
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
            self.corpus.seed = seed;
        }
        if let Some(snr) = o.snr_db {
            self.experiment.snr_db = vec![snr];
            self.measurement.get_or_insert_with(MeasurementSetup::default).snr_db = snr;
        }
        if o.sigma_n.is_some() {
            self.solve.sigma_n = o.sigma_n;
        }
        if let Some(g) = o.gamma {
            self.flow.gamma = g;
        }
        if let Some(s) = o.steps {
            self.flow.steps_t = s;
        }
        self.flow.seed = self.seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.sample_rate == 0 {
            return Err(CliError::Config("sample_rate must be positive".into()));
        }
        self.flow.validate()?;
        self.flow.resolve_plan(self.sample_rate)?;
        self.corpus.validate()?;
        if self.corpus.sample_rate != self.sample_rate {
            return Err(CliError::Config(format!(
                "corpus sample rate {} differs from sample_rate {}",
                self.corpus.sample_rate, self.sample_rate
            )));
        }
        let positive = |name: &str, v: Option<f64>| match v {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(CliError::Config(format!("{name} must be positive"))),
            _ => Ok(()),
        };
        positive("sigma_n", self.solve.sigma_n)?;
        positive("laplace_b", self.solve.laplace_b)?;
        positive("clip_level", self.solve.clip_level)?;
        if let Some(m) = &self.measurement {
            if !m.snr_db.is_finite() || !m.laplace_snr_db.is_finite() {
                return Err(CliError::Config("measurement SNRs must be finite".into()));
            }
        }
        if self.experiment.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(CliError::Config("experiment SNRs must be finite".into()));
        }
        if let Some(m) = self.experiment.methods.iter().find(|m| !m.applies_to(self.experiment.task)) {
            return Err(CliError::Config(format!(
                "method {m} does not apply to {}",
                self.experiment.task
            )));
        }
        Ok(())
    }

    /// Measurement settings for `kind`: the file's section, or the defaults.
    pub fn measurement_for(&self, kind: TaskKind) -> MeasurementSetup {
        self.measurement.clone().unwrap_or_else(|| MeasurementSetup::for_task(kind))
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(format!("serializing config: {e}")))
    }
}
