use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sgalign_core::align::{AlignConfig, GanKind, MappingMode};
use sgalign_core::checkpoint::config_hash;
use sgalign_core::decoder::AttentionVariant;
use sgalign_core::model::ModelDims;
use sgalign_core::pipeline::desk_train_config;
use sgalign_core::training::TrainConfig;
use sgalign_core::{Error, Result};

/// Everything a run depends on. Stored as flat TOML next to every
/// checkpoint the run writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub corpus_size: usize,
    pub word_min_count: usize,
    pub graph_min_count: usize,
    /// Corpus directory, relative to the run directory.
    pub data_dir: String,

    pub d_e: usize,
    pub d_x: usize,
    pub d_f: usize,
    pub d_h: usize,
    #[serde(with = "as_text")]
    pub variant: AttentionVariant,

    pub learning_rate: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub xe_epochs: usize,
    pub rl_epochs: usize,
    pub clip_norm: f64,

    #[serde(with = "as_text")]
    pub gan: GanKind,
    #[serde(with = "as_text")]
    pub mapping: MappingMode,
    pub disc_out_dim: usize,
    pub lambda: f64,
    pub gp_weight: f64,
    pub disc_steps: usize,
    pub align_steps: usize,
    pub align_batch_size: usize,
    pub align_learning_rate: f64,

    pub beam: usize,
    /// Rank beam hypotheses by mean log-probability per token.
    pub length_normalize: bool,
    /// Drop image-side symbols the text vocabulary lacks instead of failing.
    pub prune_unknown: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let text = desk_train_config(1);
        let align = AlignConfig::default();
        let dims = ModelDims::default();
        Self {
            seed: 1,
            corpus_size: 2000,
            word_min_count: 5,
            graph_min_count: 1,
            data_dir: "data".into(),
            d_e: dims.d_e,
            d_x: dims.d_x,
            d_f: dims.d_x,
            d_h: dims.d_h,
            variant: AttentionVariant::Separate,
            learning_rate: text.learning_rate,
            decay: text.decay,
            decay_every: text.decay_every,
            batch_size: text.batch_size,
            xe_epochs: text.xe_epochs,
            rl_epochs: TrainConfig::default().rl_epochs,
            clip_norm: text.clip_norm,
            gan: align.kind,
            mapping: align.mode,
            disc_out_dim: align.out_dim,
            lambda: align.lambda,
            gp_weight: align.gp_weight,
            disc_steps: align.disc_steps,
            align_steps: align.steps,
            align_batch_size: align.batch_size,
            align_learning_rate: align.learning_rate,
            beam: 5,
            length_normalize: false,
            prune_unknown: false,
        }
    }
}

/// The subset of the configuration that determines the text model.
#[derive(Serialize)]
struct TextSection<'a> {
    seed: u64,
    corpus_size: usize,
    word_min_count: usize,
    graph_min_count: usize,
    d_e: usize,
    d_x: usize,
    d_h: usize,
    variant: String,
    learning_rate: f64,
    decay: f64,
    decay_every: usize,
    batch_size: usize,
    xe_epochs: usize,
    rl_epochs: usize,
    clip_norm: f64,
    data_dir: &'a str,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_e, self.d_x, self.d_f, self.d_h].contains(&0) {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_f != self.d_x {
            return Err(Error::Config(format!("d_f ({}) must equal d_x ({})", self.d_f, self.d_x)));
        }
        if self.corpus_size < 20 {
            return Err(Error::Config("corpus_size must be at least 20".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.data_dir.is_empty() {
            return Err(Error::Config("data_dir must not be empty".into()));
        }
        self.train_config().validate()?;
        self.align_config().validate(self.d_f)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_e: self.d_e,
            d_x: self.d_x,
            d_h: self.d_h,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            decay: self.decay,
            decay_every: self.decay_every,
            batch_size: self.batch_size,
            xe_epochs: self.xe_epochs,
            rl_epochs: self.rl_epochs,
            clip_norm: self.clip_norm,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn align_config(&self) -> AlignConfig {
        AlignConfig {
            mode: self.mapping,
            kind: self.gan,
            out_dim: self.disc_out_dim,
            lambda: self.lambda,
            gp_weight: self.gp_weight,
            disc_steps: self.disc_steps,
            steps: self.align_steps,
            batch_size: self.align_batch_size,
            learning_rate: self.align_learning_rate,
            seed: self.seed,
            ..AlignConfig::default()
        }
    }

    /// Hash stamped on text checkpoints. Alignment and decoding settings are
    /// excluded so they can change without retraining the text model.
    pub fn text_hash(&self) -> String {
        let section = TextSection {
            seed: self.seed,
            corpus_size: self.corpus_size,
            word_min_count: self.word_min_count,
            graph_min_count: self.graph_min_count,
            d_e: self.d_e,
            d_x: self.d_x,
            d_h: self.d_h,
            variant: self.variant.to_string(),
            learning_rate: self.learning_rate,
            decay: self.decay,
            decay_every: self.decay_every,
            batch_size: self.batch_size,
            xe_epochs: self.xe_epochs,
            rl_epochs: self.rl_epochs,
            clip_norm: self.clip_norm,
            data_dir: &self.data_dir,
        };
        config_hash(&toml::to_string(&section).expect("flat config always serializes"))
    }

    /// Hash stamped on alignment checkpoints: the whole configuration minus
    /// the decoding settings.
    pub fn align_hash(&self) -> String {
        let mut c = self.clone();
        c.beam = 0;
        c.length_normalize = false;
        config_hash(&c.to_toml())
    }
}

mod as_text {
    use super::*;
    use serde::{de, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(value: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(value)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}
