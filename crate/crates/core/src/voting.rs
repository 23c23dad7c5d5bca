//! Vote-driven back-matching.
//!
//! Forward matches vote for the cluster (by default: the image) that contains
//! their view. Clusters are then back-matched greedily in descending vote
//! order: every view of the selected cluster is matched against the query's
//! features with a first-vs-second ratio test, growing the correspondence
//! pool for pose estimation. A cluster that back-matches convincingly (12 or
//! more matches) propagates votes through the co-visibility graph to clusters
//! observing the same 3D points, pulling neighboring images forward in the
//! queue. The loop stops once enough matches are banked, the image budget is
//! spent, or no positive-vote cluster remains.

use std::collections::{BTreeMap, BTreeSet};

use crate::ann::{AnnIndex, SearchBudget};
use crate::matching::{
    query_feature_index, safe_ratio, MatchCandidate, MatchConfig, MatchError, MatchSet, QueryImage,
    Stage, TestKind,
};
use crate::model::{ClusterId, SceneModel};

/// A back-matched image may only propagate votes when it returned at least
/// this many matches — weaker images would inject noise into the queue.
pub const VOTE_PROPAGATION_MIN_MATCHES: usize = 12;

/// Per-cluster vote counts. Clusters absent from the map hold zero votes and
/// are never selected for back-matching.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoteHistogram {
    counts: BTreeMap<ClusterId, u32>,
}

impl VoteHistogram {
    pub fn get(&self, cluster: ClusterId) -> u32 {
        self.counts.get(&cluster).copied().unwrap_or(0)
    }

    pub fn increment(&mut self, cluster: ClusterId) {
        *self.counts.entry(cluster).or_insert(0) += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.values().map(|&c| c as u64).sum()
    }

    /// Highest-voted cluster outside `skip`; ties resolve to the lower
    /// cluster id (ascending map order plus a strict comparison). Clusters
    /// with zero votes are never returned.
    pub fn argmax_excluding(&self, skip: &BTreeSet<ClusterId>) -> Option<ClusterId> {
        let mut best: Option<(u32, ClusterId)> = None;
        for (&cluster, &count) in &self.counts {
            if count == 0 || skip.contains(&cluster) {
                continue;
            }
            if best.is_none_or(|(bc, _)| count > bc) {
                best = Some((count, cluster));
            }
        }
        best.map(|(_, c)| c)
    }

    /// Clusters in descending vote order (ties toward the lower id);
    /// zero-vote clusters omitted. This is the candidate-location ranking
    /// that recognition metrics consume.
    pub fn ranked(&self) -> Vec<(ClusterId, u32)> {
        let mut out: Vec<(ClusterId, u32)> =
            self.counts.iter().filter(|(_, &v)| v > 0).map(|(&c, &v)| (c, v)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClusterId, u32)> + '_ {
        self.counts.iter().map(|(&c, &v)| (c, v))
    }
}

/// One iteration of the greedy loop, for traces and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterVisit {
    pub cluster: ClusterId,
    pub votes_at_selection: u32,
    pub matches_found: usize,
    /// Whether this cluster propagated votes through the co-visibility graph.
    pub propagated: bool,
}

/// Why the greedy loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// Banked at least the requested number of back matches.
    ReachedTarget,
    /// Back-matched the maximum number of images.
    VisitLimit,
    /// No unvisited cluster with positive votes remained.
    VotesExhausted,
    /// The forward stage produced no votes at all.
    NoVotes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackMatchOutcome {
    pub matches: MatchSet,
    pub visits: Vec<ClusterVisit>,
    /// Histogram as cast from the forward matches, before any propagation —
    /// the ranking signal for location recognition.
    pub initial_votes: VoteHistogram,
    pub stop: StopReason,
}

/// Counts forward matches per cluster. The total equals the size of the
/// forward set: every match casts exactly one vote.
pub fn cast_votes(matches: &MatchSet, model: &SceneModel) -> Result<VoteHistogram, MatchError> {
    let mut histogram = VoteHistogram::default();
    for cand in matches.iter() {
        let view = model.view(cand.view_id).ok_or(MatchError::UnknownView(cand.view_id))?;
        let cluster = model
            .clustering()
            .cluster_of(view.image)
            .expect("validated model has a cluster per image");
        histogram.increment(cluster);
    }
    Ok(histogram)
}

/// Matches every view of one cluster against the query features (exact 2-NN
/// over the small query side) with a first-vs-second ratio test at tau. At
/// most one match per view. A single-feature query has no second neighbor:
/// the nearest feature is accepted unconditionally and flagged.
pub fn back_match_cluster(
    cluster: ClusterId,
    query: &QueryImage,
    model: &SceneModel,
    cfg: &MatchConfig,
) -> Result<Vec<MatchCandidate>, MatchError> {
    cfg.validate()?;
    let qindex = query_feature_index(query)?;
    back_match_with_index(cluster, &qindex, model, cfg)
}

fn back_match_with_index(
    cluster: ClusterId,
    qindex: &AnnIndex,
    model: &SceneModel,
    cfg: &MatchConfig,
) -> Result<Vec<MatchCandidate>, MatchError> {
    let budget = SearchBudget::exact(1);
    let mut out = Vec::new();
    for vid in model.views_in_cluster(cluster) {
        let view = model.view(vid).expect("validated model");
        let neighbors = qindex.knn(view.descriptor.as_slice(), &budget)?;
        if neighbors.len() >= 2 {
            let alpha = safe_ratio(neighbors[0].distance, neighbors[1].distance);
            if alpha <= cfg.tau {
                out.push(MatchCandidate {
                    query_feature_id: neighbors[0].id,
                    view_id: vid,
                    distance: neighbors[0].distance,
                    ratio: alpha,
                    test_kind: TestKind::LocalOneRatio,
                });
            }
        } else {
            out.push(MatchCandidate {
                query_feature_id: neighbors[0].id,
                view_id: vid,
                distance: neighbors[0].distance,
                ratio: 0.0,
                test_kind: TestKind::SingleFeatureFallback,
            });
        }
    }
    Ok(out)
}

/// The greedy prioritized loop. Each iteration selects the unvisited cluster
/// with the most votes, back-matches it, and appends the result. An image
/// that returned [`VOTE_PROPAGATION_MIN_MATCHES`] or more matches casts one
/// extra vote per (match, cluster) pair onto every unvisited cluster holding
/// another view of the matched 3D point. Visited clusters are frozen: their
/// counts never change and they are never reselected.
pub fn prioritized_back_match(
    forward: &MatchSet,
    query: &QueryImage,
    model: &SceneModel,
    cfg: &MatchConfig,
) -> Result<BackMatchOutcome, MatchError> {
    cfg.validate()?;
    let initial_votes = cast_votes(forward, model)?;
    if initial_votes.total() == 0 {
        return Ok(BackMatchOutcome {
            matches: MatchSet::new(Stage::Back, Vec::new()),
            visits: Vec::new(),
            initial_votes,
            stop: StopReason::NoVotes,
        });
    }
    let qindex = query_feature_index(query)?;
    let mut votes = initial_votes.clone();
    let mut visited: BTreeSet<ClusterId> = BTreeSet::new();
    let mut visits: Vec<ClusterVisit> = Vec::new();
    let mut banked: Vec<MatchCandidate> = Vec::new();

    let stop = loop {
        if banked.len() >= cfg.n_back {
            break StopReason::ReachedTarget;
        }
        if visited.len() >= cfg.max_visited {
            break StopReason::VisitLimit;
        }
        let Some(cluster) = votes.argmax_excluding(&visited) else {
            break StopReason::VotesExhausted;
        };
        let votes_at_selection = votes.get(cluster);
        let found = back_match_with_index(cluster, &qindex, model, cfg)?;
        visited.insert(cluster);
        let propagated = found.len() >= VOTE_PROPAGATION_MIN_MATCHES;
        if propagated {
            for cand in &found {
                let point = model.view(cand.view_id).expect("validated model").point;
                let mut receivers: BTreeSet<ClusterId> = BTreeSet::new();
                for image in model.graph().images_of_point(point) {
                    let c2 = model.clustering().cluster_of(image).expect("validated model");
                    if c2 != cluster && !visited.contains(&c2) {
                        receivers.insert(c2);
                    }
                }
                for c2 in receivers {
                    votes.increment(c2);
                }
            }
        }
        visits.push(ClusterVisit {
            cluster,
            votes_at_selection,
            matches_found: found.len(),
            propagated,
        });
        banked.extend(found);
    };

    Ok(BackMatchOutcome {
        matches: MatchSet::new(Stage::Back, banked),
        visits,
        initial_votes,
        stop,
    })
}
