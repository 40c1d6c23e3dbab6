//! Deterministic miniature diffusion engine: vocabulary, cross-attention
//! layers and a fixed-step sampler.

mod attention;
mod config;
mod model;
mod vocab;

pub use attention::{attention_weights, cross_attention};
pub use config::{EngineConfig, LatentShape, LayerSpec, DEFAULT_ENGINE_SEED};
pub use model::{
    init_model, CapturedActivations, GenerationOutput, LayerWeights, ModelCheckpoint,
    TextConditioning, CONCEPT_GAIN, NOUN_SHARE, QUERY_BIAS, STEP_SIZE, TIME_FEATURES, WORD_GAIN,
};
pub use vocab::{
    Category, Concept, Prompt, TokenId, Vocabulary, CONCEPTS_PER_CATEGORY, MAX_PROMPT_LEN,
    NUM_CATEGORIES, NUM_CONCEPTS,
};
