//! Graph-conditioned diffusion over articulated-object part abstractions.
//!
//! An articulated object is a kinematic tree of parts. Each part is abstracted
//! as an axis-aligned box in the resting state plus a joint (type, axis, range)
//! and a semantic label. A denoising diffusion model over the padded
//! `5 × K × M` attribute tensor generates these abstractions conditioned on the
//! object category and the tree; retrieval then assembles meshes from a corpus.
//!
//! Module map:
//! - [`schema`]: data model, tensor encoding and validation
//! - [`corpus`]: on-disk corpus format and mesh library
//! - [`kinematics`]: joint transforms, posed boxes, surface sampling
//! - [`diffusion`]: noise schedule, forward corruption, sampler, inpainting
//! - [`nn`]: the attribute-attention denoiser and its hand-written backward pass
//! - [`train`]: augmentation, learning-rate schedule, AdamW loop, checkpoints
//! - [`synth`]: procedural corpus generator
//! - [`metrics`]: ID, AID, MMD, COV, 1-NNA, AOR
//! - [`retrieval`]: WL hashing, base/part retrieval and mesh assembly

pub mod corpus;
pub mod diffusion;
pub mod exec;
pub mod generate;
pub mod kinematics;
mod knn;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod retrieval;
pub mod schema;
pub mod synth;
pub mod train;

pub use schema::{
    ArticulatedObject, ArticulationGraph, AttributeTensor, Category, JointSpec, JointType, PartAbstraction,
    SemanticLabel, ATTR_WIDTH, MAX_PARTS, NUM_ATTRIBUTES,
};
