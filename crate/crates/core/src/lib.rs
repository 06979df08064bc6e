//! Self-supervised profiling of multi-site, multi-channel cell images.
//!
//! The crate covers the whole offline workflow:
//!
//! * [`dataio`]: `CPIM` image files, `CPEM` embedding tables and JSON-lines manifests.
//! * [`synthgen`]: a synthetic plate/well/site generator with class-separable phenotypes.
//! * [`augment`]: channel-aware color jitter, microscope noise, elastic deformation,
//!   rotation, block masking and training-view construction.
//! * [`encoder`]: a small vision transformer with hand-written backward pass,
//!   prototype heads, EMA teacher updates and checkpoints.
//! * [`objective`]: instance-level and patch-level distillation losses, KoLeo
//!   and the combined objective with a local-aggregation term.
//! * [`trainer`]: schedules, AdamW, the student/teacher loop and dataset embedding.
//! * [`postprocess`]: site fusion, 4×4→3×3 grid resampling, well merging,
//!   cross-plate alignment and fusion of the two channel models.
//! * [`evaluate`]: kNN classification, stratified K-fold, cross-cell-line transfer
//!   and collapse diagnostics.

pub mod augment;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod objective;
pub mod postprocess;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use dataio::{
    CellImage, ChannelKind, ChannelSet, DatasetManifest, EmbeddingKey, EmbeddingLevel,
    EmbeddingTable, SiteRecord,
};

pub use encoder::{EncoderConfig, ModelParams, Scalar, TokenOutputs};
pub use error::{Error, Result};
pub use evaluate::{EvalConfig, EvalReport};
pub use objective::{CenterState, LossWeights};
pub use trainer::{TrainConfig, TrainState};


