//! Dynamic mask attention on the CPU.
//!
//! Each head derives a positive weight per key from its value vector, keeps
//! the `window` heaviest causal keys for every query row, and attends only to
//! those, adding the weight to the kept scores. The kernel tiles the score
//! matrix and never touches a tile that holds no kept entry; [`grad`] carries
//! the matching backward pass.

pub mod attention;
pub mod config;
pub mod error;
pub mod grad;
pub mod mask;
pub mod mqar;
pub mod oracle;
pub mod rope;
pub mod tensor;

pub use attention::{
    attend, concat_kv, decode_step, dynamic_delta, forward, project_qkv, sparse_attention_forward,
    AttentionActivations, KernelOptions, KvCache, SkipStats,
};
pub use config::{DmaConfig, DmaWeights, MaskKind, Tau};
pub use error::{DmaError, Result};
pub use grad::{backward, grad_skip_audit, GradBundle, SkipAudit};
pub use mask::{build_mask, DynamicMask};
pub use tensor::{DType, Scalar, Tensor};
