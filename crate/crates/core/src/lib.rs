//! Desk-scale unified multimodal autoregression: a VQ image tokenizer and a
//! byte-pair text tokenizer share one vocabulary, one embedding table, and
//! one decoder-only transformer trained by next-token prediction over mixed
//! text / text-to-image / image-to-text sequences, plus the experiment
//! harness (scaling ladder, modality trade-off, mutual boost) built on a
//! synthetic shapes corpus.

pub mod analyze;
pub mod bpe;
pub mod checkpoint;
pub mod data;
pub mod fdcheck;
pub mod frechet;
pub mod generate;
pub mod harness;
pub mod image;
pub mod lm;
pub mod optim;
pub mod params;
pub mod scene;
pub mod seeding;
pub mod sequence;
pub mod tape;
pub mod trainer;
pub mod tensor;
pub mod vocab;
pub mod vq;

pub use bpe::{BpeError, BpeVocab};
pub use generate::{GenError, GenerationResult, SampleConfig};
pub use harness::{
    BoostTable, EvalBudget, ExperimentWorld, HarnessError, Regime, SweepRecord, TradeoffReport,
    TradeoffVerdict, WorldConfig,
};
pub use image::{ImageError, ImageU8};
pub use lm::{LmConfig, LmError, LmModel};
pub use scene::{Cell, ColorName, Fact, ObjectSpec, SceneError, SceneSpec, Shape, SizeClass};
pub use sequence::{MixSpec, MixStream, SequenceError, SequenceExample, TaskKind};
pub use tape::{CrossEntropyOut, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
pub use trainer::{MetricsPoint, TrainConfig, TrainError};
pub use vocab::{Modality, SpecialToken, UnifiedVocab, VocabError};
pub use vq::{CodeGrid, VqConfig, VqError, VqModel, VqTrainConfig};
