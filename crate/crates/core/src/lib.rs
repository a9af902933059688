//! Uncertainty-aware weak-pair metric learning for image–text retrieval.
//!
//! Two small encoders embed images and texts into a shared space. Training
//! combines a contrastive loss on annotated pairs, an uncertainty-weighted
//! contrastive loss on weak pairs (same identity, different records), and
//! pair matching on mined hard-negative groups. Everything is deterministic
//! on one CPU core and runs on generated data.
//!
//! - [`kernel`]: dense tensors, reverse-mode gradients, gradient checking
//! - [`datagen`]: synthetic identities, views and splits
//! - [`encoders`]: the image and text towers and the matching head
//! - [`losses`]: contrastive, uncertainty-weighted and matching losses
//! - [`mining`]: hard negatives and per-anchor pair groups
//! - [`objective`]: the assembled training objective
//! - [`trainer`]: AdamW training loop and checkpoints
//! - [`metrics`] and [`evaluate`]: retrieval metrics and diagnostics
//! - [`ablation`]: multi-seed ablation grids
//! - [`gradcheck`]: the op and loss gradient suite
//! - [`config`] and [`cli`]: the `weakpair` command line tool
//!
//! ```
//! use weakpair::losses::{consistency_uncertainty, UncertaintyMapping};
//!
//! let v = [1.0, 0.0];
//! let w = [0.0, 1.0];
//! let u = consistency_uncertainty(&v, &w, &v, &w, UncertaintyMapping::Exponential).unwrap();
//! assert!((u.u_w - (-1.0f64).exp()).abs() < 1e-12);
//! ```

pub mod ablation;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod encoders;
pub mod evaluate;
pub mod gradcheck;
pub mod kernel;
pub mod losses;
pub mod metrics;
pub mod mining;
pub mod objective;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/mining.md")]
    mod mining {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
