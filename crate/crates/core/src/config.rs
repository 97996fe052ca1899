//! Run configuration: one TOML document with a section per stage plus a
//! global seed that every stage inherits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{GraphEncoderConfig, TextEncoderConfig, EMBED_DIM};
use crate::error::{Result, ZptError};
use crate::evalharness::{PseudoLabelConfig, SimpleClassifierConfig, SweepConfig, TaskConfig, ZptConfig};
use crate::pretrain::PretrainConfig;
use crate::tagcore::SyntheticTagSpec;
use crate::ubcg::UbcgConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for every stage after corpus generation. The corpus keeps its
    /// own `synthetic.seed` so that runs with different seeds share one graph.
    pub seed: u64,
    pub synthetic: SyntheticTagSpec,
    pub pretrain: PretrainConfig,
    pub text_encoder: TextEncoderConfig,
    pub graph_encoder: GraphEncoderConfig,
    pub ubcg: UbcgConfig,
    pub zpt: ZptConfig,
    pub tasks: TaskConfig,
    pub simple: SimpleClassifierConfig,
    pub pseudo: PseudoLabelConfig,
    pub sweep: SweepConfig,
}

/// Seeds actually used by each stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedBundle {
    pub corpus: u64,
    pub pretrain: u64,
    pub ubcg: u64,
    pub tasks: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| ZptError::config(field_of(&e), e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ZptError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Copy with the global seed replaced and pushed into every stage.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.pretrain.seed = seed;
        c.ubcg.seed = seed;
        c.zpt.hybrid.seed = seed;
        c.pseudo.hybrid.seed = seed;
        c
    }

    /// Copy whose stage seeds follow the global seed.
    pub fn resolved(&self) -> Self {
        self.with_seed(self.seed)
    }

    pub fn seeds(&self) -> SeedBundle {
        SeedBundle {
            corpus: self.synthetic.seed,
            pretrain: self.seed,
            ubcg: self.seed,
            tasks: self.seed,
            eval: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.pretrain.validate()?;
        self.text_encoder.validate()?;
        self.graph_encoder.validate()?;
        self.ubcg.validate()?;
        self.zpt.validate()?;
        self.tasks.validate()?;
        self.pseudo.validate()?;
        if self.ubcg.input_dim != EMBED_DIM || self.ubcg.cond_dim != EMBED_DIM {
            return Err(ZptError::config(
                "ubcg.input_dim",
                format!("generator input and condition widths must equal the embedding width {EMBED_DIM}"),
            ));
        }
        Ok(())
    }
}

/// Dotted key path of a TOML error, or `config` when unknown.
fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return rest[..end].to_string();
        }
    }
    "config".to_string()
}
