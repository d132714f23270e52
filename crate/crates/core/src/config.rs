//! Run configuration: every module's settings plus the global seed and
//! output directory, loaded from JSON with command-line overrides on top.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acss::CurriculumMode;
use crate::adversary::{AdaptConfig, Toggles};
use crate::corpus::{ImageInput, SplitSpec};
use crate::corpus::{PairRecord, SyntheticCorpusConfig};
use crate::encoders::{EncoderConfig, ImageMode};
use crate::error::{Error, Result};
use crate::pretrain::ContrastiveConfig;
use crate::segment_filter::FilterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TagConfig {
    /// Number of k-means clusters.
    pub k: usize,
}

impl Default for TagConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives every random stream; the `seed` fields of sub-configs are
    /// replaced by this value when a command runs.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: SyntheticCorpusConfig,
    /// Image shape, vocabulary and sequence length are widened to fit the
    /// manifests when a model is created.
    pub encoder: EncoderConfig,
    pub filter: FilterConfig,
    pub pretrain: ContrastiveConfig,
    pub adapt: AdaptConfig,
    pub toggles: Toggles,
    pub tags: TagConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: SyntheticCorpusConfig::default(),
            encoder: EncoderConfig::default(),
            filter: FilterConfig::default(),
            pretrain: ContrastiveConfig::default(),
            adapt: AdaptConfig::default(),
            toggles: Toggles::default(),
            tags: TagConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub no_ss: bool,
    pub no_cl: bool,
    pub no_at: bool,
    pub mode: Option<CurriculumMode>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::config("--config", format!("{} does not exist", path.display())));
        }
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.filter.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        if self.tags.k == 0 {
            return Err(Error::config("tags.k", "must be positive"));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if o.no_ss {
            self.toggles.ss = false;
        }
        if o.no_cl {
            self.toggles.cl = false;
        }
        if o.no_at {
            self.toggles.at = false;
        }
        if let Some(mode) = o.mode {
            self.adapt.curriculum_mode = mode;
        }
        self.validate()
    }

    /// Data config with the global seed applied.
    pub fn data_config(&self) -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn pretrain_split(&self) -> SplitSpec {
        SplitSpec::pretrain(self.seed)
    }

    pub fn finetune_split(&self) -> SplitSpec {
        SplitSpec::finetune(self.seed)
    }

    /// Encoder config sized for `records`, seeded with the global seed.
    pub fn encoder_for(&self, records: &[PairRecord]) -> Result<EncoderConfig> {
        let first = records.first().ok_or(Error::EmptyCorpus)?;
        let image = match &first.image {
            ImageInput::Features(f) => ImageMode::Features { dim: f.len() },
            ImageInput::Pixels(g) => ImageMode::Pixels {
                height: g.height,
                width: g.width,
            },
        };
        let max_token = records
            .iter()
            .flat_map(|r| r.caption_tokens.iter())
            .max()
            .map_or(0, |&t| t as usize);
        let longest = records.iter().map(|r| r.caption_tokens.len()).max().unwrap_or(0);
        let cfg = EncoderConfig {
            image,
            vocab_size: self.encoder.vocab_size.max(max_token + 1),
            max_seq_len: self.encoder.max_seq_len.max(longest + 2),
            seed: self.seed,
            ..self.encoder.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every default that has a published value, by short name.
pub fn canonical_defaults() -> BTreeMap<&'static str, f64> {
    let c = RunConfig::default();
    BTreeMap::from([
        ("T_a", c.filter.area_threshold),
        ("T_s", c.filter.score_threshold),
        ("num_seg", c.filter.max_segments as f64),
        ("beta", c.adapt.beta),
        ("n_t", c.adapt.target_batch as f64),
        ("n_s", c.adapt.source_batch as f64),
        ("pretrain_epochs", c.pretrain.epochs as f64),
        ("finetune_epochs", c.adapt.epochs as f64),
        ("finetune_lr", c.adapt.lr),
    ])
}
