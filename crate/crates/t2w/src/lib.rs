//! Text-conditioned generation of two-layer classifier-head weights.
//!
//! The pipeline: build a synthetic class universe, train per-task projection
//! heads to form a text-to-weight corpus, train a transformer denoiser with
//! diffusion + permutation-symmetry + adversarial losses, then sample weights
//! for unseen task descriptions. Downstream: weight initialization
//! comparison, text-driven fusion, weight enhancement, and loss-landscape
//! grids. Everything runs on a from-scratch reverse-mode autodiff engine over
//! dense `f64` matrices; no ML framework is involved.

pub mod diffusion;
pub mod downstream;
pub mod graph;
pub mod headtrainer;
pub mod landscape;
pub mod matrix;
pub mod optim;
pub mod seeds;
pub mod store;
pub mod taskgen;
pub mod theory;
pub mod weightspace;

pub use matrix::DenseMatrix;
