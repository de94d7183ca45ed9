//! Discrete speech-representation toolkit built around two intermediate
//! representations: continuous per-frame *speech vectors* and discrete
//! *semantic tokens*.
//!
//! The pipeline, stage by stage:
//!
//! ```text
//! features ──normalize──▶ zero-mean frames ──k-means──▶ tokens ──BPE──▶ compressed tokens
//!     ▲                                                   │                    │
//!     │                                                   ▼                    ▼
//!  prompt mean ◀──────── reconstruct (center lookup) ◀── tokens ◀──── token LM (TTS / S2ST)
//! ```
//!
//! | module            | role                                                         |
//! |-------------------|--------------------------------------------------------------|
//! | [`featureio`]     | `VTKF` / `VTKT` files, manifests, synthetic feature corpora  |
//! | [`normalizer`]    | utterance-level mean normalization                            |
//! | [`quantizer`]     | k-means codebook training, tokenization, `VTKC` files         |
//! | [`bpe`]           | byte-pair encoding over token streams, bitrate statistics     |
//! | [`reconstructor`] | inverse lookup, prompt conditioning, de-identification        |
//! | [`neural`]        | reverse-mode autodiff core and the prompt-conditioned inverse model |
//! | [`seqlm`]         | causal token LM, candidate sampling and re-scoring            |
//! | [`eval`]          | speaker-leakage probe, cluster purity, pipeline report        |
//! | [`cli`]           | the `vectok` command line                                     |
//!
//! Runnable walkthroughs for each stage live in `crates/core/examples/`.

pub mod bpe;
pub mod cli;
pub mod eval;
pub mod featureio;
pub mod neural;
pub mod normalizer;
pub mod quantizer;
pub mod reconstructor;
pub mod rng;
pub mod seqlm;

pub use bpe::BpeModel;
pub use featureio::{FeatureMatrix, SyntheticCorpus, SyntheticCorpusSpec, UtteranceRecord};
pub use normalizer::UtteranceMean;
pub use quantizer::{Codebook, TokenSequence};
pub use rng::SplitMix64;
