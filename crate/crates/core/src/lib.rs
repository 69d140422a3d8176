//! View-aware scene captioning from bird's-eye-view feature maps.
//!
//! The pipeline: partition the BEV raster into six camera sectors
//! ([`bev_partition`]), add a sinusoidal encoding of each cell's sector
//! ([`pos_encoding`]), compress the cells into a fixed query bank with the
//! Positional Q-Former ([`qformer`]), project the queries into a frozen
//! decoder's embedding space and caption with LoRA adapters ([`llm`]).
//! Training ([`trainer`]) combines contrastive, grounded-generation and
//! matching objectives ([`losses`]); captions are scored with BLEU, ROUGE-L
//! and BERT-score ([`metrics`]). Grounding captions for synthetic scenes come
//! from a rule-based generator ([`groundview`]).

pub mod attention;
pub mod autograd;
pub mod bev_partition;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod groundview;
pub mod llm;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod pos_encoding;
pub mod qformer;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
