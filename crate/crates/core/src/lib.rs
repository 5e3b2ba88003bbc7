//! Credential-token-gated classification with dynamic domain authorization.
//!
//! A frozen two-encoder backbone maps samples and prompt-token sequences into
//! a shared similarity space. Three small trainable projectors produce the
//! prompt tokens; one of them, held by the model owner, turns a domain's
//! feature mean into a credential token that acts as a key. Matching
//! credentials unlock task predictions; mismatched or missing credentials
//! route inputs to a dedicated unauthorized class, and every prediction is
//! paired with a legality bit. New domains are authorized after training by
//! issuing fresh credentials, with no parameter updates anywhere.

pub mod backbone;
pub mod domains;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tokens;
pub mod training;

pub use backbone::{backbone_digest, Backbone, BackboneSpec, FeatureVector, MultiScaleFeature};
pub use domains::{
    apply_augmentation, embed_watermark, generate_extended, generate_synthetic_domains,
    AugKind, AugmentationOp, DomainDataset, WatermarkKey,
};
pub use error::{Error, Result};
pub use inference::{
    evaluate_domain, infer, legality, DualOutput, InferenceRequest, InferenceSession, LoadedModel,
};
pub use metrics::{
    d_cross, drop_a, drop_u, legality_rates, verify_paper_rows, w_diff, MetricsReport, TaskResult,
};
pub use pipeline::{run_experiment, RunConfig, Scenario};
pub use tokens::{
    assemble_prompts, derive_credential, issue_credential, project_domain_token,
    project_image_token, CredentialRecord, CredentialStore, Prompt, ProjectorParams, Token,
    TokenRole,
};
pub use training::{
    compute_logits, cross_entropy, gradient_check, kl_separation, total_loss, train, Checkpoint,
    LossBreakdown, Objective, TrainConfig, TrainOutput,
};
