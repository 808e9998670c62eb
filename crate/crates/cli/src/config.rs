use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vsu::curriculum::TrainRunConfig;
use vsu::eval::{DecodeConfig, ProbeConfig};
use vsu::model::ModelConfig;
use vsu::numerics::TriStageLR;
use vsu::seed;
use vsu::synth::WorldSpec;

use crate::CliError;

/// Overrides applied on top of the default five-language world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub n_speakers: usize,
    pub feature_dim: usize,
    pub audio_noise: f32,
    pub visual_noise: f32,
    pub speaker_offset_scale: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        let w = WorldSpec::default_world(0);
        DataConfig {
            train_utterances: 1800,
            test_utterances: 200,
            n_speakers: w.n_speakers,
            feature_dim: w.feature_dim,
            audio_noise: w.audio_noise,
            visual_noise: w.visual_noise,
            speaker_offset_scale: w.speaker_offset_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    pub k: usize,
    pub max_iters: usize,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { k: 64, max_iters: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig { vocab_size: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub steps: usize,
    pub batch_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: 20,
            batch_frames: 512,
            frame_h: 88,
            frame_w: 88,
        }
    }
}

/// Everything a run needs. Component seeds are derived from `seed` when the
/// config is resolved, so the root seed alone fixes every random stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub quantizer: QuantizerConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub pretrain: TrainRunConfig,
    pub finetune: TrainRunConfig,
    pub eval: DecodeConfig,
    pub probe: ProbeConfig,
    pub bench: BenchConfig,
}

pub fn desk_model() -> ModelConfig {
    ModelConfig::default()
}

pub fn desk_pretrain() -> TrainRunConfig {
    TrainRunConfig::default()
}

pub fn desk_finetune() -> TrainRunConfig {
    TrainRunConfig {
        epochs: 20,
        frozen_steps: 300,
        lr: TriStageLR {
            peak_lr: 2e-3,
            ..TriStageLR::default()
        },
        ..TrainRunConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            quantizer: QuantizerConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: desk_model(),
            pretrain: desk_pretrain(),
            finetune: desk_finetune(),
            eval: DecodeConfig::default(),
            probe: ProbeConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a config document. Keys missing from a table keep the desk
    /// defaults of that table; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        let user: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(RunConfig::default()).expect("config serializes");
        merge(&mut merged, user);
        toml::Value::Table(merged).try_into()
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Fills in derived seeds and cross-field settings, then validates.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let s = self.seed;
        self.model.init_seed = sub_seed(s, "model");
        self.pretrain.seed = sub_seed(s, "pretrain");
        self.finetune.seed = sub_seed(s, "finetune");
        self.probe.seed = sub_seed(s, "probe");
        self.model.vocab_size = self.model.vocab_size.max(self.tokenizer.vocab_size);
        self.model.k_units = self.model.k_units.max(self.quantizer.k);
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.train_utterances == 0 {
            return Err(CliError::Config("data.train_utterances must be positive".into()));
        }
        if self.quantizer.k == 0 || self.quantizer.max_iters == 0 {
            return Err(CliError::Config("quantizer.k and quantizer.max_iters must be positive".into()));
        }
        if self.eval.beam == 0 {
            return Err(CliError::Config("eval.beam must be at least 1".into()));
        }
        self.world().validate()?;
        Ok(self)
    }

    pub fn world(&self) -> WorldSpec {
        let mut w = WorldSpec::default_world(self.seed);
        w.n_speakers = self.data.n_speakers;
        w.feature_dim = self.data.feature_dim;
        w.audio_noise = self.data.audio_noise;
        w.visual_noise = self.data.visual_noise;
        w.speaker_offset_scale = self.data.speaker_offset_scale;
        w
    }

    pub fn quantizer_seed(&self, modality: vsu::units::Modality) -> u64 {
        seed::derive(self.seed, "quantizer", u64::from(modality.code())) >> 1
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved config to `path`.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        }
        fs::write(path, self.to_toml()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// TOML integers are signed, so derived seeds keep 63 bits.
fn sub_seed(root: u64, label: &str) -> u64 {
    seed::derive(root, label, 0) >> 1
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
