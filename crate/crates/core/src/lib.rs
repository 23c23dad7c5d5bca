//! Camera localization against SfM-style scene models.
//!
//! The pipeline registers a query photograph against a database of 3D points,
//! each observed as 2D *views* in a set of posed model images. Model images
//! are grouped into clusters (by default one cluster per image), and matching
//! exploits that structure:
//!
//! 1. [`matching::global_forward_match`] — seeded sampling of query features,
//!    approximate k-NN retrieval, and a conservative k-ratio test.
//! 2. [`matching::cluster_wise_ratio_test`] — per-cluster re-ranking with a
//!    local 1-ratio test, falling back to a t-ratio bound for clusters that
//!    contributed a single candidate.
//! 3. [`voting::prioritized_back_match`] — clusters vote with their filtered
//!    matches; the highest-voted images are matched back against the query,
//!    propagating votes through the co-visibility graph.
//! 4. [`pnp::ransac_pnp`] — a 3-point minimal solver inside adaptive RANSAC,
//!    followed by Levenberg–Marquardt refinement.
//!
//! [`synth`] generates controllable synthetic worlds (noise, distractors,
//! repeated structure) with ground truth, [`baseline`] provides the reference
//! matchers the pipeline is compared against, and [`eval`] aggregates batch
//! results.

pub mod ann;
pub mod baseline;
pub mod eval;
pub mod io;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod pnp;
pub mod synth;
pub mod voting;
