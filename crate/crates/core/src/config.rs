//! Flat `key = value` pipeline configuration with two built-in profiles.
//!
//! ```text
//! # comment
//! profile = toy
//! qformer.num_queries = 16
//! ```
//!
//! `profile` (if present) selects the base values, every other line overrides
//! one field. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::bev_partition::GridSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Toy,
    PaperShape,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper-shape" => Ok(Profile::PaperShape),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::PaperShape => "paper-shape",
        })
    }
}

/// How the per-pair contrastive similarity pools over the query bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SimilarityPooling {
    #[default]
    Max,
    Mean,
}

impl FromStr for SimilarityPooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown similarity pooling `{other}`"))),
        }
    }
}

impl fmt::Display for SimilarityPooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Mean => "mean",
        })
    }
}

/// Which network produces the grounded-generation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BtgPath {
    /// The Q-Former text branch (caption supervision stays on the LM).
    #[default]
    QFormer,
    /// The language model's caption cross-entropy doubles as the term.
    Lm,
}

impl FromStr for BtgPath {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qformer" => Ok(Self::QFormer),
            "lm" => Ok(Self::Lm),
            other => Err(Error::Config(format!("unknown btg path `{other}`"))),
        }
    }
}

impl fmt::Display for BtgPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::QFormer => "qformer",
            Self::Lm => "lm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub grid: GridSpec,
    pub bev_channels: usize,
    pub d_pos: usize,
    pub num_queries: usize,
    pub d_q: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    pub cross_attention_every: usize,
    pub max_text_len: usize,
    pub mlp_hidden: usize,
    pub d_llm: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub temperature: f64,
    pub w_btc: f64,
    pub w_btg: f64,
    pub w_btm: f64,
    pub w_caption: f64,
    pub similarity: SimilarityPooling,
    pub btg_path: BtgPath,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub num_scenes: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn toy() -> Self {
        Self {
            profile: Profile::Toy,
            grid: GridSpec::centered(4, 4),
            bev_channels: 32,
            d_pos: 32,
            num_queries: 8,
            d_q: 32,
            qformer_layers: 2,
            qformer_heads: 2,
            cross_attention_every: 1,
            max_text_len: 32,
            mlp_hidden: 128,
            d_llm: 64,
            lm_layers: 2,
            lm_heads: 2,
            lm_max_positions: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            temperature: 0.07,
            w_btc: 1.0,
            w_btg: 1.0,
            w_btm: 1.0,
            w_caption: 1.0,
            similarity: SimilarityPooling::Max,
            btg_path: BtgPath::QFormer,
            steps: 200,
            batch_size: 3,
            learning_rate: 1e-3,
            num_scenes: 4,
            seed: 7,
        }
    }

    /// Published dimensions: 512-channel 180×180 BEV maps, 512 queries of
    /// width 768, 2048-wide LM embeddings.
    pub fn paper_shape() -> Self {
        Self {
            profile: Profile::PaperShape,
            grid: GridSpec::centered(180, 180),
            bev_channels: 512,
            d_pos: 512,
            num_queries: 512,
            d_q: 768,
            qformer_layers: 2,
            qformer_heads: 12,
            mlp_hidden: 3072,
            d_llm: 2048,
            lm_heads: 16,
            lm_max_positions: 1024,
            ..Self::toy()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self::toy(),
            Profile::PaperShape => Self::paper_shape(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.d_pos != self.bev_channels {
            return Err(Error::Config(format!(
                "positional dimension {} must equal BEV channels {} (encodings are added)",
                self.d_pos, self.bev_channels
            )));
        }
        if self.d_pos % 2 != 0 {
            return Err(Error::Config("positional dimension must be even".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_size == 0 || self.num_scenes == 0 {
            return Err(Error::Config("batch_size and num_scenes must be positive".into()));
        }
        if self.lm_heads == 0 || self.d_llm % self.lm_heads != 0 {
            return Err(Error::Config(format!(
                "d_llm {} not divisible by {} heads",
                self.d_llm, self.lm_heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_llm {
            return Err(Error::Config(format!(
                "LoRA rank {} must lie in 1..={}",
                self.lora_rank, self.d_llm
            )));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            entries.push((lineno + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let profile = entries
            .iter()
            .find(|(_, k, _)| k == "profile")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Profile::Toy);
        let mut cfg = Self::for_profile(profile);
        let mut ego_set = false;
        for (lineno, key, value) in &entries {
            if key == "profile" {
                continue;
            }
            ego_set |= key == "grid.ego_row" || key == "grid.ego_col";
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {lineno}: {e}")))?;
        }
        if !ego_set {
            let centered = GridSpec::centered(cfg.grid.height, cfg.grid.width);
            cfg.grid.ego_row = centered.ego_row;
            cfg.grid.ego_col = centered.ego_col;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_flat_string(&self) -> String {
        let mut out = format!("profile = {}\n", self.profile);
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+ ;)*) => {
        impl PipelineConfig {
            /// Every configurable key in a fixed order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse_value(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$($field).+.to_string())),*]
            }
        }
    };
}

config_keys! {
    "grid.height" => grid.height;
    "grid.width" => grid.width;
    "grid.ego_row" => grid.ego_row;
    "grid.ego_col" => grid.ego_col;
    "grid.forward_axis" => grid.forward_axis;
    "grid.sector_offset_deg" => grid.sector_offset_deg;
    "bev.channels" => bev_channels;
    "pos.d_pos" => d_pos;
    "qformer.num_queries" => num_queries;
    "qformer.d_q" => d_q;
    "qformer.num_layers" => qformer_layers;
    "qformer.num_heads" => qformer_heads;
    "qformer.cross_attention_every" => cross_attention_every;
    "qformer.max_text_len" => max_text_len;
    "mlp.hidden" => mlp_hidden;
    "lm.d_llm" => d_llm;
    "lm.num_layers" => lm_layers;
    "lm.num_heads" => lm_heads;
    "lm.max_positions" => lm_max_positions;
    "lora.rank" => lora_rank;
    "lora.alpha" => lora_alpha;
    "loss.temperature" => temperature;
    "loss.w_btc" => w_btc;
    "loss.w_btg" => w_btg;
    "loss.w_btm" => w_btm;
    "loss.w_caption" => w_caption;
    "loss.similarity" => similarity;
    "loss.btg_path" => btg_path;
    "train.steps" => steps;
    "train.batch_size" => batch_size;
    "train.learning_rate" => learning_rate;
    "train.num_scenes" => num_scenes;
    "seed" => seed;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev_partition::ForwardAxis;

    #[test]
    fn paper_shape_pins_published_dims() {
        let c = PipelineConfig::parse("profile = paper-shape").unwrap();
        assert_eq!((c.bev_channels, c.grid.height, c.grid.width), (512, 180, 180));
        assert_eq!((c.num_queries, c.d_q, c.d_llm), (512, 768, 2048));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::parse("qformer.num_querys = 4").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
    }

    #[test]
    fn flat_round_trip() {
        let mut c = PipelineConfig::toy();
        c.learning_rate = 3e-4;
        c.grid.forward_axis = ForwardAxis::IncreasingCol;
        let back = PipelineConfig::parse(&c.to_flat_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn resizing_grid_recenters_ego() {
        let c = PipelineConfig::parse("grid.height = 10\ngrid.width = 6 # comment").unwrap();
        assert_eq!((c.grid.ego_row, c.grid.ego_col), (4.5, 2.5));
    }

    #[test]
    fn mismatched_pos_dim_rejected() {
        assert!(PipelineConfig::parse("pos.d_pos = 16").is_err());
        assert!(PipelineConfig::parse("garbage line").is_err());
    }
}
