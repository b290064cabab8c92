//! Feature-space adaptation head for cross-domain few-shot detection.
//!
//! Precomputed instance embeddings come in through [`pack`], are sampled into
//! N-way K-shot [`episode`]s, turned into class prototypes by [`adapt`] and
//! scored by the cosine [`head`]. [`finetune`] trains the learnable instances,
//! the reweighting module, the domain prompter ([`prompter`]) and the head on
//! the support set; [`eval`] measures query accuracy and detection mAP and
//! runs the module ablation. [`metrics`] computes dataset-level domain-gap
//! measures.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod autodiff;
pub mod boxes;
pub mod checks;
pub mod episode;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod head;
pub mod metrics;
pub mod pack;
pub mod params;
pub mod prompter;
pub mod rng;
pub mod synth;

pub use adapt::{LearnableInstances, PrototypeSet, ReweightParams};
pub use autodiff::{Tape, Tensor, Var};
pub use boxes::{iou, Rect};
pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use error::{Error, Result};
pub use eval::{evaluate_classification, evaluate_detection, run_ablation, EvalReport, Stage};
pub use finetune::{finetune, FinetuneConfig, TrainLog};
pub use head::{HeadParams, QueryRegion, RegionLabel};
pub use metrics::{DomainGapReport, IbLevel, IcvLevel};
pub use pack::{load_feature_pack, FeaturePack, FeatureRecord, Role};
pub use params::{AdaptationParams, Module};
pub use prompter::DomainVectors;
pub use synth::{synth_pack, SynthConfig};
