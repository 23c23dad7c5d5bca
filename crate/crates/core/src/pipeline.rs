//! End-to-end localization of a query image against a scene model.
//!
//! Two modes share the forward-matching and filtering stages and differ in
//! how they produce the final correspondence set:
//!
//! * fast voting — the filtered matches only *vote*; correspondences come
//!   from exact back matching of the most promising clusters.
//! * full forward — every query feature is forward-matched, filtered, and
//!   then verified by the best-buddy check; no voting.
//!
//! Per-query work is deterministic: the effective seed is derived from the
//! run seed and the query id, so batch order and thread count never change
//! a result.

use std::time::Instant;

use nalgebra::{Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ann::AnnIndex;
use crate::matching::{
    best_buddy_filter, cluster_wise_ratio_test, global_forward_match, to_correspondences,
    MatchConfig, MatchError, QueryImage,
};
use crate::model::SceneModel;
use crate::pnp::{ransac_pnp, PnpError, PoseConfig};
use crate::voting::{cast_votes, prioritized_back_match, StopReason};

pub const STATUS_POSE: &str = "Pose";
pub const STATUS_NOT_FOUND: &str = "Error - Pose not found";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Pose(#[from] PnpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    FastVoting,
    FullForward,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::FastVoting => write!(f, "fast-voting"),
            Mode::FullForward => write!(f, "full-forward"),
        }
    }
}

/// Everything a localization run needs besides the data itself.
#[derive(Debug, Clone)]
pub struct RunParams {
    pub mode: Mode,
    pub match_cfg: MatchConfig,
    pub pose_cfg: PoseConfig,
    /// Leaf budget for the approximate forward search.
    pub max_leaves: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        Self {
            mode: Mode::FastVoting,
            match_cfg: MatchConfig::default(),
            pose_cfg: PoseConfig::default(),
            max_leaves: 128,
        }
    }
}

/// splitmix64 finalizer: decorrelates per-query seeds from the run seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Wall-clock seconds per stage. Excluded from determinism comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub forward_s: f64,
    pub filter_s: f64,
    pub back_s: f64,
    pub pose_s: f64,
    pub total_s: f64,
}

/// One line of localization output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub query_id: u32,
    /// "Pose" or "Error - Pose not found".
    pub status: String,
    pub success: bool,
    /// Unit quaternion (w, x, y, z); present iff `success`.
    pub rotation: Option<[f64; 4]>,
    /// Camera center in world coordinates; present iff `success`.
    pub center: Option<[f64; 3]>,
    pub num_forward_matches: usize,
    pub num_filtered_matches: usize,
    /// Back matches (fast voting) or best buddies (full forward).
    pub num_final_matches: usize,
    pub num_correspondences: usize,
    pub num_inliers: usize,
    pub inlier_ratio: f64,
    pub median_inlier_residual_px: Option<f64>,
    pub clusters_visited: usize,
    pub stop: Option<StopReason>,
    pub timings: StageTimings,
}

/// Diagnostic companion to a [`LocalizationRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub query_id: u32,
    /// Clusters ranked by initial (pre-back-matching) votes, descending.
    pub initial_votes: Vec<(u32, u32)>,
    pub visits: Vec<TraceVisit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceVisit {
    pub cluster: u32,
    pub votes_at_selection: u32,
    pub matches_found: usize,
    pub propagated: bool,
}

fn median(sorted: &[f64]) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 })
}

/// Localizes one query. An empty query is a data condition, not a crash: it
/// yields a not-found record so batch runs keep going.
pub fn localize_query(
    model: &SceneModel,
    index: &AnnIndex,
    query: &QueryImage,
    params: &RunParams,
) -> Result<(LocalizationRecord, TraceRecord), PipelineError> {
    let t_start = Instant::now();
    let mut timings = StageTimings::default();
    let mut cfg = params.match_cfg;
    cfg.seed = derive_seed(params.match_cfg.seed, u64::from(query.id));
    let mut pose_cfg = params.pose_cfg.clone();
    pose_cfg.seed = derive_seed(!params.match_cfg.seed, u64::from(query.id));
    if params.mode == Mode::FullForward {
        cfg.n_forward = usize::MAX; // every feature participates
    }

    let empty = |timings: StageTimings| {
        (
            LocalizationRecord {
                query_id: query.id,
                status: STATUS_NOT_FOUND.to_string(),
                success: false,
                rotation: None,
                center: None,
                num_forward_matches: 0,
                num_filtered_matches: 0,
                num_final_matches: 0,
                num_correspondences: 0,
                num_inliers: 0,
                inlier_ratio: 0.0,
                median_inlier_residual_px: None,
                clusters_visited: 0,
                stop: None,
                timings,
            },
            TraceRecord { query_id: query.id, initial_votes: Vec::new(), visits: Vec::new() },
        )
    };
    if query.features.is_empty() {
        timings.total_s = t_start.elapsed().as_secs_f64();
        return Ok(empty(timings));
    }

    let t = Instant::now();
    let forward = global_forward_match(query, index, &cfg, params.max_leaves)?;
    timings.forward_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let filtered = cluster_wise_ratio_test(&forward, model, &cfg)?;
    timings.filter_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (final_matches, visits, initial_votes, stop) = match params.mode {
        Mode::FastVoting => {
            let outcome = prioritized_back_match(&filtered, query, model, &cfg)?;
            (outcome.matches, outcome.visits, outcome.initial_votes, Some(outcome.stop))
        }
        Mode::FullForward => {
            let votes = cast_votes(&filtered, model)?;
            let buddies = best_buddy_filter(&filtered, query, model, &cfg)?;
            (buddies, Vec::new(), votes, None)
        }
    };
    timings.back_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let corrs = to_correspondences(&final_matches, query, model)?;
    let pose = if corrs.len() >= 4 {
        match ransac_pnp(&corrs, query.focal, &query.principal_point, &pose_cfg) {
            Ok(result) => Some(result),
            Err(PnpError::Insufficient { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    timings.pose_s = t.elapsed().as_secs_f64();
    timings.total_s = t_start.elapsed().as_secs_f64();

    let success = pose.as_ref().is_some_and(|r| r.success);
    let (rotation, center, num_inliers, inlier_ratio, median_res) = match &pose {
        Some(r) if r.success => {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
                r.pose.rotation,
            ));
            let mut inlier_res: Vec<f64> = r.inliers.iter().map(|&i| r.residuals[i]).collect();
            inlier_res.sort_by(f64::total_cmp);
            (
                Some([q.w, q.i, q.j, q.k]),
                Some([r.pose.center.x, r.pose.center.y, r.pose.center.z]),
                r.inliers.len(),
                r.inliers.len() as f64 / corrs.len() as f64,
                median(&inlier_res),
            )
        }
        Some(r) => (None, None, r.inliers.len(), r.inliers.len() as f64 / corrs.len() as f64, None),
        None => (None, None, 0, 0.0, None),
    };

    let record = LocalizationRecord {
        query_id: query.id,
        status: if success { STATUS_POSE } else { STATUS_NOT_FOUND }.to_string(),
        success,
        rotation,
        center,
        num_forward_matches: forward.len(),
        num_filtered_matches: filtered.len(),
        num_final_matches: final_matches.len(),
        num_correspondences: corrs.len(),
        num_inliers,
        inlier_ratio,
        median_inlier_residual_px: median_res,
        clusters_visited: visits.len(),
        stop,
        timings,
    };
    let trace = TraceRecord {
        query_id: query.id,
        initial_votes: initial_votes.ranked().iter().map(|&(c, v)| (c.0, v)).collect(),
        visits: visits
            .iter()
            .map(|v| TraceVisit {
                cluster: v.cluster.0,
                votes_at_selection: v.votes_at_selection,
                matches_found: v.matches_found,
                propagated: v.propagated,
            })
            .collect(),
    };
    Ok((record, trace))
}

/// Localizes a batch in parallel. Results keep the input order; every query
/// sees the same derived seed it would see alone.
pub fn localize_batch(
    model: &SceneModel,
    index: &AnnIndex,
    queries: &[QueryImage],
    params: &RunParams,
) -> Result<Vec<(LocalizationRecord, TraceRecord)>, PipelineError> {
    use rayon::prelude::*;
    queries.par_iter().map(|query| localize_query(model, index, query, params)).collect()
}
