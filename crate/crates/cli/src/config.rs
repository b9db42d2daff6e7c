//! Run configuration: a TOML file whose tables mirror the library's
//! configuration types, overridden by command-line flags.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! flags. The top-level `seed` drives corpus generation, model
//! initialization and the trainer's random streams.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use kws_core::array::{FrontendConfig, LookDirection};
use kws_core::corpus::InputView;
use kws_core::dsp::{FBankExtractor, FeatureConfig};
use kws_core::manifest::FieldTag;
use kws_core::model::{ModelConfig, ReferenceModel};
use kws_core::scene::ScenePrior;
use kws_core::trainer::TrainerConfig;
use kws_core::wav::SampleFormat;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for audio loading and feature extraction; 0 means all cores.
    pub threads: usize,
    /// How model inputs are derived from recordings.
    pub input: InputKind,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub frontend: FrontendConfig,
    pub data: DataConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            input: InputKind::Raw,
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            trainer: TrainerConfig::default(),
            frontend: FrontendConfig::default(),
            data: DataConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Every channel the recording carries.
    #[default]
    Raw,
    /// Channel 0 only.
    Reference,
    /// MVDR beams at the front-end looks plus raw channel 0; six-channel input only.
    MultiLook,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifests; entries are grouped into curriculum phases by field.
    pub train: Vec<PathBuf>,
    pub dev: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

impl From<WavFormat> for SampleFormat {
    fn from(f: WavFormat) -> Self {
        match f {
            WavFormat::Pcm16 => SampleFormat::Pcm16,
            WavFormat::Float32 => SampleFormat::Float32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Scenes per field, split between train, dev and eval.
    pub count: usize,
    pub fields: Vec<FieldTag>,
    pub dev_fraction: f64,
    pub eval_fraction: f64,
    pub format: WavFormat,
    /// Per-field scene priors; a missing table uses that field's defaults.
    pub near: Option<ScenePrior>,
    pub mid: Option<ScenePrior>,
    pub far: Option<ScenePrior>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            count: 100,
            fields: vec![FieldTag::Far],
            dev_fraction: 0.1,
            eval_fraction: 0.1,
            format: WavFormat::Float32,
            near: None,
            mid: None,
            far: None,
        }
    }
}

impl SimulateConfig {
    pub fn prior(&self, field: FieldTag) -> ScenePrior {
        let custom = match field {
            FieldTag::Near => &self.near,
            FieldTag::Mid => &self.mid,
            FieldTag::Far => &self.far,
        };
        let mut p = custom.clone().unwrap_or_else(|| ScenePrior::for_field(field));
        p.field = field;
        p
    }

    /// Scene counts for train, dev and eval.
    pub fn split_counts(&self) -> [usize; 3] {
        let dev = (self.count as f64 * self.dev_fraction).round() as usize;
        let eval = (self.count as f64 * self.eval_fraction).round() as usize;
        [self.count - dev - eval, dev, eval]
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub preset: Option<ReferenceModel>,
    pub channels: Option<usize>,
    pub input: Option<InputKind>,
    pub threshold: Option<f64>,
    pub train: Vec<PathBuf>,
    pub dev: Option<PathBuf>,
    pub count: Option<usize>,
    pub fields: Vec<FieldTag>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = o.seed {
            cfg.seed = s;
        }
        if let Some(t) = o.threads {
            cfg.threads = t;
        }
        if let Some(p) = o.preset {
            cfg.model = ModelConfig::reference(p);
        }
        if let Some(c) = o.channels {
            cfg.model.channels = c;
        }
        if let Some(i) = o.input {
            cfg.input = i;
        }
        if let Some(t) = o.threshold {
            cfg.trainer.threshold = t;
        }
        if !o.train.is_empty() {
            cfg.data.train = o.train.clone();
        }
        if o.dev.is_some() {
            cfg.data.dev = o.dev.clone();
        }
        if let Some(n) = o.count {
            cfg.simulate.count = n;
        }
        if !o.fields.is_empty() {
            cfg.simulate.fields = o.fields.clone();
        }
        cfg.trainer.seed = cfg.seed;
        Ok(cfg)
    }

    /// Checks every section that does not depend on the command.
    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.trainer.validate().context("trainer")?;
        let ex = self.extractor()?;
        let frames = ex.config().frames();
        ensure!(
            self.model.frames == frames,
            "model.frames is {} but the feature settings give {frames} frames per utterance",
            self.model.frames
        );
        ensure!(
            self.model.mels == self.features.n_mels,
            "model.mels is {} but features.n_mels is {}",
            self.model.mels,
            self.features.n_mels
        );
        for &d in &self.frontend.looks_deg {
            LookDirection::new(d).context("frontend.looks_deg")?;
        }
        ensure!(!self.frontend.looks_deg.is_empty(), "frontend.looks_deg is empty");
        ensure!(
            self.frontend.hop > 0 && self.frontend.hop <= self.frontend.win_len,
            "frontend needs 0 < hop <= win_len"
        );
        let s = &self.simulate;
        ensure!(!s.fields.is_empty(), "simulate.fields is empty");
        ensure!(
            (0.0..1.0).contains(&s.dev_fraction)
                && (0.0..1.0).contains(&s.eval_fraction)
                && s.dev_fraction + s.eval_fraction < 1.0,
            "simulate dev and eval fractions must be non-negative and sum below 1"
        );
        let mut seen = s.fields.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != s.fields.len() {
            bail!("simulate.fields lists a field twice");
        }
        Ok(())
    }

    pub fn extractor(&self) -> Result<FBankExtractor> {
        FBankExtractor::new(self.features.clone()).context("features")
    }

    pub fn view(&self) -> InputView {
        match self.input {
            InputKind::Raw => InputView::Raw,
            InputKind::Reference => InputView::Reference,
            InputKind::MultiLook => InputView::MultiLook(self.frontend.clone()),
        }
    }

    /// Channels the model sees for a recording with `recorded` channels.
    pub fn input_channels(&self, recorded: usize) -> usize {
        match self.input {
            InputKind::Raw => recorded,
            InputKind::Reference => 1,
            InputKind::MultiLook => self.frontend.looks_deg.len() + 1,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing the effective config")
    }

    /// Prints the effective config to stderr and, given a run directory,
    /// writes it there as `config.toml`.
    pub fn echo(&self, run_dir: Option<&Path>) -> Result<()> {
        let text = self.to_toml()?;
        eprintln!("# effective config\n{text}");
        if let Some(dir) = run_dir {
            let path = dir.join(crate::run::CONFIG_ECHO);
            fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "seed = 3\n[model]\nchannels = 2\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!((cfg.seed, cfg.model.channels, cfg.trainer.seed), (3, 2, 3));
        let o = Overrides {
            seed: Some(9),
            channels: Some(1),
            ..Overrides::default()
        };
        let cfg = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!((cfg.seed, cfg.model.channels, cfg.trainer.seed), (9, 1, 9));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "sed = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
        let mut cfg = RunConfig::default();
        cfg.model.frames = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.simulate.dev_fraction = 0.6;
        cfg.simulate.eval_fraction = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn split_counts_sum_to_total() {
        let s = SimulateConfig {
            count: 10,
            ..SimulateConfig::default()
        };
        assert_eq!(s.split_counts(), [8, 1, 1]);
    }
}
