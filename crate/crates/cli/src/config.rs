use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use prosody_core::corpus::{FeatureConfig, SyntheticCorpusSpec};
use prosody_core::metrics::{EvalConfig, DEFAULT_MCEP_COEFFS, GPE_THRESHOLD};
use prosody_core::model::ModelConfig;
use prosody_core::pitch::F0Config;
use prosody_core::spectral::StftConfig;
use prosody_core::train::{SweepConfig, TrainConfig};

use crate::UsageError;

pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocoderSection {
    pub iterations: usize,
    pub seed: u64,
}

impl Default for VocoderSection {
    fn default() -> Self {
        Self { iterations: 60, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub gpe_threshold: f64,
    pub mcep_coeffs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { gpe_threshold: GPE_THRESHOLD, mcep_coeffs: DEFAULT_MCEP_COEFFS }
    }
}

/// Everything a command can be configured with. Loaded from TOML, then overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of training, corpus generation and the vocoder.
    pub seed: Option<u64>,
    /// Parent of the timestamped run directories.
    pub runs_dir: PathBuf,
    pub stft: StftConfig,
    /// Defaults to the frame grid of `stft`.
    pub f0: Option<F0Config>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticCorpusSpec,
    pub sweep: SweepConfig,
    pub vocoder: VocoderSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            runs_dir: PathBuf::from("runs"),
            stft: StftConfig::default(),
            f0: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticCorpusSpec::default(),
            sweep: SweepConfig::default(),
            vocoder: VocoderSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Fills derived values so the echoed file shows what actually ran.
    pub fn resolve(mut self) -> Result<Self> {
        if self.f0.is_none() {
            self.f0 = Some(F0Config::aligned_with(&self.stft));
        }
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.synthetic.seed = seed;
            self.vocoder.seed = seed;
        }
        self.stft.validate().map_err(|e| UsageError(e.to_string()))?;
        self.f0().validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(self)
    }

    pub fn f0(&self) -> F0Config {
        self.f0.clone().unwrap_or_else(|| F0Config::aligned_with(&self.stft))
    }

    pub fn features(&self) -> FeatureConfig {
        FeatureConfig { stft: self.stft.clone(), f0: self.f0(), fail_fast: false }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { stft: self.stft.clone(), f0: self.f0(), gpe_threshold: self.eval.gpe_threshold, mcep_coeffs: self.eval.mcep_coeffs }
    }
}

/// Parses `text` as a TOML value, falling back to a plain string.
fn parse_value(text: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {text}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(text.to_string())),
        Err(_) => toml::Value::String(text.to_string()),
    }
}

pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(UsageError(format!("bad configuration key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(UsageError(format!("`{p}` in `{key}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Merges the file, then `--set key=value` overrides in order, then command flags.
pub fn load_config(file: Option<&Path>, sets: &[String], flags: Vec<(&str, toml::Value)>) -> Result<RunConfig> {
    let mut table = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| UsageError(format!("{}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for s in sets {
        let Some((key, value)) = s.split_once('=') else {
            bail!(UsageError(format!("--set expects key=value, got `{s}`")));
        };
        set_key(&mut table, key.trim(), parse_value(value.trim()))?;
    }
    for (key, value) in flags {
        set_key(&mut table, key, value)?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| UsageError(format!("configuration: {}", e.message())))?;
    cfg.resolve()
}

/// Creates the run directory: `out` when given, else `<runs_dir>/<cmd>-<unix seconds>`.
/// An existing non-empty directory is refused unless `force`.
pub fn create_run_dir(cmd: &str, out: Option<&Path>, runs_dir: &Path, force: bool) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            let base = runs_dir.join(format!("{cmd}-{secs}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() && !force {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    let occupied = dir.is_dir() && std::fs::read_dir(&dir)?.next().is_some();
    if occupied && !force {
        bail!(UsageError(format!("{} already exists and is not empty (use --force)", dir.display())));
    }
    if dir.exists() && !dir.is_dir() {
        bail!(UsageError(format!("{} exists and is not a directory", dir.display())));
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let text = toml::to_string_pretty(cfg).context("serializing configuration")?;
    std::fs::write(dir.join(CONFIG_ECHO), text)?;
    Ok(())
}
