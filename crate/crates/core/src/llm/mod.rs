//! Bridge from query embeddings to the language model: tokenizer, chat
//! prompt, projection MLP, low-rank adapters, toy frozen decoder, decoding.

mod adapters;
mod lm;
mod prompt;
mod tokenizer;

pub use adapters::{lora_apply, project_queries, LoraAdapter, LoraSet, ProjectionMlp, LORA_TARGETS};
pub use lm::{
    assemble_graph, assemble_llm_input, generate_caption, Decoding, Generation, LmConfig,
    ToyFrozenLm,
};
pub use prompt::{build_prompt, caption_prompt, ChatMessage, PromptAssembly, Role};
pub use tokenizer::{special_token_registry, SpecialTokens, Tokenizer, BEV, MAX_VOCAB};
