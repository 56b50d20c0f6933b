//! A trainable miniature model and synthetic fact universe standing in for
//! an LLM: pretrain a base, fine-tune one adapter per unknown fact, filter.

pub mod model;
pub mod pool;
pub mod tasks;
pub mod train;
pub mod universe;

pub use model::{adapter_delta, option_probs, Dims, ToyModel, DOWN_PROJ, EMBEDDING, UP_PROJ};
pub use pool::{build_pool, load_pool, save_pool, Pool, PoolConfig, PoolCounters, PoolRecord, ToyEvaluator};
pub use train::{
    gradient_check, make_material, material_loss, perplexity, perplexity_from_probs, pretrain_base, train_dense,
    train_lora, Material, MaterialConfig, PretrainConfig, TrainConfig, TrainOutcome,
};
pub use universe::{FactUniverse, Question, UniverseConfig};
