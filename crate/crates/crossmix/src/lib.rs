//! Few-shot cross-modal retrieval with per-sample Gaussian mixture prototypes.
//!
//! `crossmix` trains a pair of modality projections so that image and text
//! descriptor sets land in a shared latent space, summarizes every sample by
//! a Gaussian mixture fitted over its local descriptors, and ranks galleries
//! by cosine similarity between the resulting prototype vectors. Training
//! combines a multi-positive contrastive loss over mixture components, a
//! cross-modal component alignment term, and a relative-distance-preservation
//! regularizer, optimized in two stages with Adam.
//!
//! The crate is a library first; each major capability has a runnable
//! example:
//!
//! ```bash
//! cargo run --example generate_dataset
//! cargo run --example fit_mixture
//! cargo run --example gradient_check
//! cargo run --example loss_breakdown
//! cargo run --example train_and_evaluate
//! cargo run --example few_shot_episode
//! cargo run --example ablation_grid
//! ```
//!
//! A thin `crossmix` binary wraps the same entry points behind `generate`,
//! `train`, `evaluate`, `ablate`, and `report` subcommands.

use std::fmt;

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod kernel;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
pub use kernel::{Tape, Tensor};

/// The two sides of an image-text pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}
