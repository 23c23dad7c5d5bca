//! Descriptor matching between a query image and the model.
//!
//! Three stages, each narrowing the previous one:
//!
//! 1. [`global_forward_match`] — sample query features at random and retrieve
//!    k+1 approximate neighbors each; a conservative global ratio test (first
//!    vs (k+1)-th distance) either admits all k pairs or drops the feature.
//! 2. [`cluster_wise_ratio_test`] — re-rank the surviving candidates inside
//!    each image cluster and apply a local first-vs-second ratio test; where a
//!    cluster holds only one candidate, a triangle-inequality surrogate uses
//!    the precomputed in-cluster neighbor distance instead of a second search.
//! 3. [`best_buddy_filter`] — optionally require mutual distinctiveness by
//!    ratio-testing each surviving view against the query's own features.
//!
//! Candidate distances are computed once at retrieval and threaded through;
//! later stages never re-search the model.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ann::{AnnError, AnnIndex, SearchBudget, DEFAULT_LEAF_SIZE};
use crate::model::{ClusterId, Descriptor, PointId, SceneModel, ViewId};
use crate::pnp::Correspondence;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("query image has no features")]
    EmptyQuery,
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error("match references view {0}, which is not in the model")]
    UnknownView(ViewId),
    #[error("match references query feature {0}, which is not in the query")]
    UnknownFeature(u32),
    #[error("view {0} has no nearest-neighbor table entry")]
    MissingNnEntry(ViewId),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("query image invalid: {0}")]
    BadQuery(String),
}

/// One feature of a query image.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature {
    pub id: u32,
    pub pixel: Vector2<f64>,
    pub descriptor: Descriptor,
}

/// A query image: features plus pinhole intrinsics (focal length from image
/// metadata in real deployments; exact in the synthetic harness).
#[derive(Debug, Clone, PartialEq)]
pub struct QueryImage {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub principal_point: Vector2<f64>,
    pub features: Vec<QueryFeature>,
}

impl QueryImage {
    pub fn validate(&self) -> Result<(), MatchError> {
        let fail = |msg: String| Err(MatchError::BadQuery(msg));
        if self.width == 0 || self.height == 0 {
            return fail(format!("query {}: zero-sized image", self.id));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return fail(format!("query {}: focal must be positive, got {}", self.id, self.focal));
        }
        if !self.principal_point.iter().all(|c| c.is_finite()) {
            return fail(format!("query {}: non-finite principal point", self.id));
        }
        let mut seen = BTreeSet::new();
        let dim = self.features.first().map(|f| f.descriptor.dim());
        for f in &self.features {
            if !seen.insert(f.id) {
                return fail(format!("query {}: duplicate feature id {}", self.id, f.id));
            }
            if Some(f.descriptor.dim()) != dim {
                return fail(format!("query {}: mixed descriptor dimensions", self.id));
            }
            if !f.pixel.iter().all(|c| c.is_finite())
                || f.pixel.x < 0.0
                || f.pixel.y < 0.0
                || f.pixel.x > self.width as f64
                || f.pixel.y > self.height as f64
            {
                return fail(format!(
                    "query {}: feature {} pixel ({}, {}) outside {}x{}",
                    self.id, f.id, f.pixel.x, f.pixel.y, self.width, self.height
                ));
            }
        }
        Ok(())
    }

    pub fn feature(&self, id: u32) -> Option<&QueryFeature> {
        self.features.iter().find(|f| f.id == id)
    }
}

/// Matching parameters. Defaults follow the reference configuration: k = 5,
/// tau = 0.7 for every ratio test, 200 forward and 200 back matches, at most
/// 20 back-matched images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub k: usize,
    pub tau: f32,
    pub n_forward: usize,
    pub n_back: usize,
    pub max_visited: usize,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { k: 5, tau: 0.7, n_forward: 200, n_back: 200, max_visited: 20, seed: 0 }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.k < 1 {
            return Err(MatchError::BadConfig("k must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(MatchError::BadConfig(format!(
                "tau must lie strictly between 0 and 1, got {}",
                self.tau
            )));
        }
        if self.n_forward < 1 || self.n_back < 1 {
            return Err(MatchError::BadConfig("match count targets must be at least 1".into()));
        }
        if self.max_visited < 1 {
            return Err(MatchError::BadConfig("max back-matched images must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which ratio test admitted a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    /// Global first-vs-(k+1)-th neighbor test.
    KRatio,
    /// First-vs-second test within one cluster (either matching direction).
    LocalOneRatio,
    /// Triangle-inequality surrogate for a cluster singleton.
    TRatio,
    /// Degenerate back-match against a single-feature query; no second
    /// neighbor exists, so the pair is kept on mutual-nearest alone.
    SingleFeatureFallback,
}

/// Pipeline stage a match set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Raw global candidates (k per admitted query feature).
    Global,
    /// Survivors of the cluster-wise ratio tests; these cast the votes.
    Forward,
    /// Back-matched pairs; these feed pose estimation.
    Back,
}

/// A (query feature, model view) pair with the distance and the ratio value
/// that admitted it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCandidate {
    pub query_feature_id: u32,
    pub view_id: ViewId,
    /// L2 descriptor distance between the query feature and the view.
    pub distance: f32,
    /// The test statistic at admission time (always <= tau, except 0.0 for
    /// auto-passed locally unique singletons and fallback pairs).
    pub ratio: f32,
    pub test_kind: TestKind,
}

/// An ordered, duplicate-free set of match candidates. Candidates are kept in
/// canonical `(query_feature_id, view_id)` order so identical inputs produce
/// bit-identical sets regardless of construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    stage: Stage,
    candidates: Vec<MatchCandidate>,
}

impl MatchSet {
    pub fn new(stage: Stage, mut candidates: Vec<MatchCandidate>) -> Self {
        candidates.sort_by_key(|c| (c.query_feature_id, c.view_id));
        debug_assert!(
            candidates.windows(2).all(|w| {
                (w[0].query_feature_id, w[0].view_id) != (w[1].query_feature_id, w[1].view_id)
            }),
            "duplicate (query feature, view) pair"
        );
        debug_assert!(
            candidates.iter().all(|c| (0.0..=1.0).contains(&c.ratio) && c.distance >= 0.0),
            "candidate outside admissible range"
        );
        Self { stage, candidates }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MatchCandidate> {
        self.candidates.iter()
    }

    pub fn candidates(&self) -> &[MatchCandidate] {
        &self.candidates
    }

    /// The raw (feature, view) pairs — convenient for subset checks.
    pub fn pair_set(&self) -> BTreeSet<(u32, ViewId)> {
        self.candidates.iter().map(|c| (c.query_feature_id, c.view_id)).collect()
    }
}

/// Ratio with a guarded denominator: a zero denominator means every distance
/// in play is zero (duplicate descriptors), where a ratio test carries no
/// information — report 1.0, which every test at tau < 1 rejects.
pub fn safe_ratio(numerator: f32, denominator: f32) -> f32 {
    if denominator > 0.0 {
        numerator / denominator
    } else {
        1.0
    }
}

/// Stage 1: global forward matching.
///
/// Samples query features uniformly without replacement (seeded by
/// `cfg.seed`). For each sampled feature the index returns up to k+1
/// neighbors sorted by distance; the ratio of the first to the last retrieved
/// distance must pass tau for the feature to contribute, in which case every
/// neighbor except the last becomes a candidate pair. Sampling stops once the
/// set holds `cfg.n_forward` pairs (counting pairs, not features) or every
/// feature has been tried.
pub fn global_forward_match(
    query: &QueryImage,
    index: &AnnIndex,
    cfg: &MatchConfig,
    max_leaves: usize,
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    if query.features.is_empty() {
        return Err(MatchError::EmptyQuery);
    }
    let budget = SearchBudget { max_leaves_checked: max_leaves, k: cfg.k };
    let mut order: Vec<usize> = (0..query.features.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    for fi in order {
        if out.len() >= cfg.n_forward {
            break;
        }
        let feature = &query.features[fi];
        let neighbors = index.knn(feature.descriptor.as_slice(), &budget)?;
        if neighbors.len() < 2 {
            // A one-view model admits no ratio; nothing to test against.
            continue;
        }
        // When the model holds fewer than k+1 views the last retrieved
        // neighbor plays the denominator role and the pairs ahead of it are
        // admitted, mirroring the full-size case.
        let denominator = neighbors.last().unwrap().distance;
        let alpha = safe_ratio(neighbors[0].distance, denominator);
        if alpha <= cfg.tau {
            for n in &neighbors[..neighbors.len() - 1] {
                out.push(MatchCandidate {
                    query_feature_id: feature.id,
                    view_id: ViewId(n.id),
                    distance: n.distance,
                    ratio: alpha,
                    test_kind: TestKind::KRatio,
                });
            }
        }
    }
    Ok(MatchSet::new(Stage::Global, out))
}

/// Stage 2: cluster-wise ratio tests.
///
/// Candidates are grouped by (cluster, query feature) and re-ranked by
/// distance. Views of a 3D point already represented closer in the ranking
/// are dropped (they are near-duplicates of the same geometry, not evidence
/// of ambiguity). With two or more distinct points in a cluster the top pair
/// takes the standard first-vs-second ratio test; a lone candidate instead
/// takes d / (d + nn) against the precomputed distance from its view to that
/// view's nearest other-point cluster-mate — a lower bound on the true
/// second-neighbor distance by the triangle inequality, so nothing a real
/// second neighbor would keep gets rejected. At most one candidate per
/// (query feature, cluster) survives.
pub fn cluster_wise_ratio_test(
    matches: &MatchSet,
    model: &SceneModel,
    cfg: &MatchConfig,
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    let mut groups: BTreeMap<(ClusterId, u32), Vec<&MatchCandidate>> = BTreeMap::new();
    for cand in matches.iter() {
        let view = model.view(cand.view_id).ok_or(MatchError::UnknownView(cand.view_id))?;
        let cluster = model
            .clustering()
            .cluster_of(view.image)
            .expect("validated model has a cluster per image");
        groups.entry((cluster, cand.query_feature_id)).or_default().push(cand);
    }

    let mut out = Vec::new();
    for ((_cluster, qid), mut group) in groups {
        group.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.view_id.cmp(&b.view_id)));
        let mut seen_points = BTreeSet::new();
        let mut ranked: Vec<&MatchCandidate> = Vec::new();
        for cand in group {
            let point = model.view(cand.view_id).unwrap().point;
            if seen_points.insert(point) {
                ranked.push(cand);
            }
        }
        let top = ranked[0];
        let (alpha, kind) = if ranked.len() >= 2 {
            (safe_ratio(top.distance, ranked[1].distance), TestKind::LocalOneRatio)
        } else {
            match model.nn_table().get(top.view_id) {
                None => return Err(MatchError::MissingNnEntry(top.view_id)),
                // No other-point view exists in this cluster: the candidate
                // is locally unique by construction and passes outright.
                Some(None) => (0.0, TestKind::TRatio),
                Some(Some((_nn, nn_dist))) => {
                    (safe_ratio(top.distance, top.distance + nn_dist), TestKind::TRatio)
                }
            }
        };
        if alpha <= cfg.tau {
            out.push(MatchCandidate {
                query_feature_id: qid,
                view_id: top.view_id,
                distance: top.distance,
                ratio: alpha,
                test_kind: kind,
            });
        }
    }
    Ok(MatchSet::new(Stage::Forward, out))
}

/// An exact-search index over the query image's own features, used for the
/// model-to-query direction (best buddies and back-matching). The query side
/// is small, so these searches run at full budget.
pub fn query_feature_index(query: &QueryImage) -> Result<AnnIndex, MatchError> {
    query.validate()?;
    let first = query.features.first().ok_or(MatchError::EmptyQuery)?;
    let dim = first.descriptor.dim();
    let ids: Vec<u32> = query.features.iter().map(|f| f.id).collect();
    let mut data = Vec::with_capacity(ids.len() * dim);
    for f in &query.features {
        data.extend_from_slice(f.descriptor.as_slice());
    }
    Ok(AnnIndex::build(dim, ids, data, DEFAULT_LEAF_SIZE, 0)?)
}

/// Stage 3 (full-forward pipeline): best-buddy filtering.
///
/// Each candidate view is matched back against the query features with a
/// first-vs-second ratio test; the pair survives only if the view's nearest
/// query feature is its forward partner and the back ratio passes. A query
/// with a single feature cannot form the ratio, so the mutual-nearest check
/// alone decides (flagged via the candidate's test kind).
pub fn best_buddy_filter(
    matches: &MatchSet,
    query: &QueryImage,
    model: &SceneModel,
    cfg: &MatchConfig,
) -> Result<MatchSet, MatchError> {
    cfg.validate()?;
    let qindex = query_feature_index(query)?;
    let budget = SearchBudget::exact(1);
    let mut out = Vec::new();
    for cand in matches.iter() {
        let view = model.view(cand.view_id).ok_or(MatchError::UnknownView(cand.view_id))?;
        let neighbors = qindex.knn(view.descriptor.as_slice(), &budget)?;
        if neighbors[0].id != cand.query_feature_id {
            continue;
        }
        if neighbors.len() >= 2 {
            let alpha = safe_ratio(neighbors[0].distance, neighbors[1].distance);
            if alpha <= cfg.tau {
                out.push(MatchCandidate {
                    ratio: alpha,
                    test_kind: TestKind::LocalOneRatio,
                    ..*cand
                });
            }
        } else {
            out.push(MatchCandidate {
                ratio: 0.0,
                test_kind: TestKind::SingleFeatureFallback,
                ..*cand
            });
        }
    }
    Ok(MatchSet::new(Stage::Back, out))
}

/// Resolves matches into 2D-3D correspondences for pose estimation. A query
/// feature matched to several views of one 3D point (possible across
/// clusters) yields a single correspondence — duplicates would double-count
/// inliers — keeping the lowest-view-id representative. Output order is
/// (query_feature_id, point_id), so it is deterministic.
pub fn to_correspondences(
    matches: &MatchSet,
    query: &QueryImage,
    model: &SceneModel,
) -> Result<Vec<Correspondence>, MatchError> {
    let pixels: BTreeMap<u32, Vector2<f64>> =
        query.features.iter().map(|f| (f.id, f.pixel)).collect();
    let mut unique: BTreeMap<(u32, PointId), Correspondence> = BTreeMap::new();
    for cand in matches.iter() {
        let view = model.view(cand.view_id).ok_or(MatchError::UnknownView(cand.view_id))?;
        let pixel = *pixels
            .get(&cand.query_feature_id)
            .ok_or(MatchError::UnknownFeature(cand.query_feature_id))?;
        let point = model.point(view.point).expect("validated model");
        // Matches iterate in ascending (feature, view) order, so the first
        // insertion wins and carries the lowest view id.
        unique
            .entry((cand.query_feature_id, view.point))
            .or_insert(Correspondence { pixel, point: point.position });
    }
    Ok(unique.into_values().collect())
}
