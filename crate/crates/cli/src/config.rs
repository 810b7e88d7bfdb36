//! `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; unknown or repeated keys are errors, and the whole file is
//! validated before any command does work.
//!
//! | key | default |
//! |-----|---------|
//! | `data` | none |
//! | `out` | `out` |
//! | `seed` | `0` |
//! | `lead`, `input_length` | `6`, `24` |
//! | `layer1_filters`, `layer2_filters` | `128`, `64` |
//! | `kernel` | `2x2` |
//! | `activation` | `relu` (`tanh`) |
//! | `peepholes` | `true` |
//! | `learning_rate`, `beta1`, `beta2`, `epsilon` | `0.001`, `0.9`, `0.999`, `1e-8` |
//! | `batch_size`, `max_epochs`, `early_stop_patience` | `32`, `100`, `10` |
//! | `clip_norm` | `none` |
//! | `correlation_mode` | `spatial-mean` (`pooled-cells`) |
//! | `synth_hours`, `synth_dynamics`, `synth_snr`, `synth_lead` | `2000`, `advection`, `10`, `6` |
//! | `synth_planted` | empty, e.g. `sp:0.3,rh500:0.5` |
//! | `synth_start` | `2011-01-01T00:00:00Z` |

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use nowcast_core::convlstm::{CellActivation, NetworkSpec};
use nowcast_core::datapipe::{parse_time, Variable, WindowSpec};
use nowcast_core::metrics::CorrelationMode;
use nowcast_core::synth::{Dynamics, SynthConfig};
use nowcast_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub window: WindowSpec,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub correlation_mode: CorrelationMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            out: PathBuf::from("out"),
            seed: 0,
            window: WindowSpec::default(),
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            correlation_mode: CorrelationMode::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for {key}"))
}

fn parse_kernel(value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| anyhow!("kernel must look like 2x2, got {value:?}"))?;
    Ok((parse("kernel", a.trim())?, parse("kernel", b.trim())?))
}

fn parse_planted(value: &str) -> Result<Vec<(Variable, f64)>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (code, rho) = item
            .split_once(':')
            .ok_or_else(|| anyhow!("synth_planted entries look like sp:0.3, got {item:?}"))?;
        let var: Variable = code.trim().parse().map_err(|e| anyhow!("synth_planted: {e}"))?;
        out.push((var, parse("synth_planted", rho.trim())?));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("config line {}: {key} given twice", n + 1);
            }
            cfg.set(key, value).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("config {}", path.display()))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "lead" => self.window.lead = parse(key, value)?,
            "input_length" => self.window.input_length = parse(key, value)?,
            "layer1_filters" => self.network.layer1_filters = parse(key, value)?,
            "layer2_filters" => self.network.layer2_filters = parse(key, value)?,
            "kernel" => self.network.kernel = parse_kernel(value)?,
            "activation" => self.network.activation = value.parse::<CellActivation>()?,
            "peepholes" => self.network.peepholes = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "epsilon" => self.train.epsilon = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "max_epochs" => self.train.max_epochs = parse(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse(key, value)?,
            "clip_norm" => {
                self.train.clip_norm = if value == "none" { None } else { Some(parse(key, value)?) };
            }
            "correlation_mode" => self.correlation_mode = value.parse()?,
            "synth_hours" => self.synth.hours = parse(key, value)?,
            "synth_dynamics" => self.synth.dynamics = value.parse::<Dynamics>()?,
            "synth_snr" => self.synth.signal_to_noise = parse(key, value)?,
            "synth_lead" => self.synth.lead = parse(key, value)?,
            "synth_planted" => self.synth.planted_correlations = parse_planted(value)?,
            "synth_start" => self.synth.start_time = parse_time(value)?,
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    /// Applies command-line overrides and checks every section.
    pub fn finish(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window.input_length == 0 || self.window.lead == 0 {
            bail!("input_length and lead must be at least 1");
        }
        self.network.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }
}
