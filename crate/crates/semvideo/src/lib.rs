//! Reconstruct short videos from fMRI recordings.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`captions`] — mine layered captions (scene anchor, motion, holistic)
//!    for each training clip from a multimodal language model endpoint.
//! 2. [`semantic`] — decode fMRI into text-conditioning embeddings (77×768)
//!    with a per-subject projector, a shared MLP, and a causal-transformer
//!    diffusion prior that refines the regressed embedding.
//! 3. [`motion`] — decode fMRI into a coarse spatiotemporal latent
//!    (n×64×7×7) with spatial / temporal / cross attention branches fused by
//!    learnable weights, then a convolutional decoder to per-frame VAE
//!    latents (n×4×28×28).
//! 4. [`render`] — turn decoded latents and embeddings into frames through a
//!    staged image→video renderer; [`metrics`] scores the result.
//!
//! [`data`] handles the on-disk formats (binary tensors, manifests), fMRI
//! preprocessing (voxel selection, BOLD lag, z-scoring) and a synthetic
//! dataset generator so everything runs end-to-end on a laptop.
//!
//! # Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --example generate_fixture    # build a synthetic dataset
//! cargo run --example preprocess          # voxel selection + normalization
//! cargo run --example mine_captions       # two-stage caption mining (mock MLLM)
//! cargo run --example train_semantic      # embedding decoder + diffusion prior
//! cargo run --example train_motion        # motion decoder on frozen embeddings
//! cargo run --example render_video        # staged rendering from decoded latents
//! cargo run --example evaluate            # metric suite + significance report
//! cargo run --example shuffle_test       # permutation test for temporal order
//! cargo run --example roi_importance      # which voxel groups drive the decoder
//! cargo run --example pipeline            # the whole thing, end to end
//! ```
//!
//! The `semvideo` binary wraps the same operations as subcommands
//! (`fixture`, `preprocess`, `mine`, `train`, `infer`, `evaluate`,
//! `shuffletest`) for scripted use; see `semvideo --help`.

pub mod captions;
mod ckpt;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod semantic;
pub mod tensor;

pub use error::{Error, Result};
