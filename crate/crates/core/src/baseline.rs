//! Reference matchers: global 1-ratio filtering and exhaustive per-cluster
//! matching.
//!
//! Both are deliberately simple, exact (no approximate search), and
//! single-threaded; they exist as correctness and speed yardsticks for the
//! voting pipeline. One refinement over the textbook recipe is shared by
//! both: the ratio is taken against the nearest view of a *different* 3D
//! point. Models store several views per point with near-identical
//! descriptors, so the naive second-nearest neighbor is almost always
//! another view of the same point and the test would reject everything as
//! its noise level drops. Comparing against the closest rival point keeps
//! the test meaningful at every noise level while preserving what it is
//! meant to measure: global (or per-cluster) distinctiveness.

use crate::matching::{
    safe_ratio, to_correspondences, MatchCandidate, MatchError, MatchSet, QueryImage, Stage,
    TestKind,
};
use crate::model::{l2, ClusterId, SceneModel, View};
use crate::pnp::{ransac_pnp, CameraPose, PoseConfig, PoseResult};

/// Nearest view and nearest view of a different point, by exhaustive scan.
/// Ties break toward the lower view id. Returns None when `views` is empty
/// or holds views of a single point only (no rival to test against).
fn two_nn_distinct<'a, I>(views: I, query: &[f32]) -> Option<(&'a View, f32, f32)>
where
    I: IntoIterator<Item = &'a View> + Clone,
{
    let mut best: Option<(f32, &View)> = None;
    for view in views.clone() {
        let d = l2(query, view.descriptor.as_slice());
        let better = match best {
            None => true,
            Some((bd, bv)) => d < bd || (d == bd && view.id < bv.id),
        };
        if better {
            best = Some((d, view));
        }
    }
    let (d1, v1) = best?;
    let mut rival: Option<f32> = None;
    for view in views {
        if view.point == v1.point {
            continue;
        }
        let d = l2(query, view.descriptor.as_slice());
        if rival.is_none() || d < rival.unwrap() {
            rival = Some(d);
        }
    }
    rival.map(|d2| (v1, d1, d2))
}

/// Matches every query feature against the whole model with a single global
/// ratio test: nearest view wins iff it beats the nearest rival point by the
/// factor `tau`. This is the matcher that collapses under repeated
/// structure — copies of a point are each other's rivals at ratio ≈ 1.
pub fn global_one_ratio_match(query: &QueryImage, model: &SceneModel, tau: f32) -> MatchSet {
    let mut out = Vec::new();
    for feature in &query.features {
        let all = model.views().iter();
        let Some((view, d1, d2)) = two_nn_distinct(all, feature.descriptor.as_slice()) else {
            continue;
        };
        let ratio = safe_ratio(d1, d2);
        if ratio <= tau {
            out.push(MatchCandidate {
                query_feature_id: feature.id,
                view_id: view.id,
                distance: d1,
                ratio,
                test_kind: TestKind::LocalOneRatio,
            });
        }
    }
    MatchSet::new(Stage::Global, out)
}

/// Per-cluster variant of [`global_one_ratio_match`].
pub fn local_one_ratio_match(
    query: &QueryImage,
    model: &SceneModel,
    cluster: ClusterId,
    tau: f32,
) -> MatchSet {
    let views: Vec<&View> = model
        .views_in_cluster(cluster)
        .iter()
        .map(|&id| model.view(id).expect("validated model"))
        .collect();
    let mut out = Vec::new();
    for feature in &query.features {
        let Some((view, d1, d2)) =
            two_nn_distinct(views.iter().copied(), feature.descriptor.as_slice())
        else {
            continue;
        };
        let ratio = safe_ratio(d1, d2);
        if ratio <= tau {
            out.push(MatchCandidate {
                query_feature_id: feature.id,
                view_id: view.id,
                distance: d1,
                ratio,
                test_kind: TestKind::LocalOneRatio,
            });
        }
    }
    MatchSet::new(Stage::Global, out)
}

/// Match set plus pose attempt for one cluster of the exhaustive sweep.
#[derive(Debug, Clone)]
pub struct ClusterAttempt {
    pub cluster: ClusterId,
    pub num_matches: usize,
    pub pose: Option<PoseResult>,
}

impl ClusterAttempt {
    pub fn succeeded(&self) -> bool {
        self.pose.as_ref().is_some_and(|p| p.success)
    }
}

/// Result of matching against every cluster independently.
#[derive(Debug, Clone)]
pub struct ExhaustiveOutcome {
    pub attempts: Vec<ClusterAttempt>,
    /// Index into `attempts` of the chosen cluster, if any succeeded.
    pub best: Option<usize>,
}

impl ExhaustiveOutcome {
    pub fn best_attempt(&self) -> Option<&ClusterAttempt> {
        self.best.map(|i| &self.attempts[i])
    }

    pub fn registered(&self) -> bool {
        self.best_attempt().is_some_and(|a| a.succeeded())
    }
}

/// The gold standard: run the ratio test and a robust pose solve inside
/// every cluster, then keep the best success. With ground truth available
/// the best cluster is the one with the smallest camera-center error;
/// otherwise the one with the most inliers. Ties go to the lower cluster id.
pub fn localize_exhaustive(
    query: &QueryImage,
    model: &SceneModel,
    tau: f32,
    pose_cfg: &PoseConfig,
    truth: Option<&CameraPose>,
) -> Result<ExhaustiveOutcome, MatchError> {
    let mut attempts = Vec::new();
    for cluster in 0..model.clustering().num_clusters {
        let cluster = ClusterId(cluster);
        let matches = local_one_ratio_match(query, model, cluster, tau);
        let corrs = to_correspondences(&matches, query, model)?;
        let pose = if corrs.len() >= 4 {
            ransac_pnp(&corrs, query.focal, &query.principal_point, pose_cfg).ok()
        } else {
            None
        };
        attempts.push(ClusterAttempt { cluster, num_matches: matches.len(), pose });
    }
    let mut best: Option<usize> = None;
    for (i, attempt) in attempts.iter().enumerate() {
        if !attempt.succeeded() {
            continue;
        }
        let better = match best {
            None => true,
            Some(j) => {
                let (a, b) = (&attempts[i], &attempts[j]);
                match truth {
                    Some(gt) => {
                        let ea = pose_center_error(a, gt);
                        let eb = pose_center_error(b, gt);
                        ea < eb
                    }
                    None => {
                        let (ia, ib) = (a.pose.as_ref().unwrap(), b.pose.as_ref().unwrap());
                        ia.inliers.len() > ib.inliers.len()
                    }
                }
            }
        };
        if better {
            best = Some(i);
        }
    }
    Ok(ExhaustiveOutcome { attempts, best })
}

fn pose_center_error(attempt: &ClusterAttempt, truth: &CameraPose) -> f64 {
    let pose = &attempt.pose.as_ref().unwrap().pose;
    (pose.center - truth.center).norm()
}

/// Global baseline end to end: one ratio test over the whole model, then a
/// robust pose solve.
pub fn localize_global_baseline(
    query: &QueryImage,
    model: &SceneModel,
    tau: f32,
    pose_cfg: &PoseConfig,
) -> Result<(MatchSet, Option<PoseResult>), MatchError> {
    let matches = global_one_ratio_match(query, model, tau);
    let corrs = to_correspondences(&matches, query, model)?;
    let pose = if corrs.len() >= 4 {
        ransac_pnp(&corrs, query.focal, &query.principal_point, pose_cfg).ok()
    } else {
        None
    };
    Ok((matches, pose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::model_from_triples;
    use crate::model::{PointId, ViewId};
    use crate::synth::{generate_world, QueryPlacement, SynthConfig};
    use nalgebra::Vector2;

    fn query_with(descs: &[Vec<f32>]) -> QueryImage {
        QueryImage {
            id: 0,
            width: 64,
            height: 64,
            focal: 100.0,
            principal_point: Vector2::new(32.0, 32.0),
            features: descs
                .iter()
                .enumerate()
                .map(|(i, d)| crate::matching::QueryFeature {
                    id: i as u32,
                    pixel: Vector2::new(1.0 + i as f64, 1.0),
                    descriptor: crate::model::Descriptor::new(d.clone()).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn rival_is_nearest_other_point_not_same_point() {
        // Point 0 has two views at distances 0.1 and 0.15 from the query;
        // point 1 sits at 0.5. A naive second neighbor would compare 0.1
        // against 0.15 (ratio 0.67 — barely passing); the rival rule
        // compares against 0.5 (ratio 0.2).
        let model = model_from_triples(
            1,
            &[(0, 0, vec![1.1]), (0, 1, vec![1.15]), (1, 0, vec![1.5]), (1, 1, vec![1.52])],
            None,
        );
        let query = query_with(&[vec![1.0]]);
        let m = global_one_ratio_match(&query, &model, 0.3);
        assert_eq!(m.len(), 1);
        let c = m.candidates()[0];
        assert_eq!(c.view_id, ViewId(0));
        assert!((c.ratio - 0.1 / 0.5).abs() < 1e-6);
    }

    #[test]
    fn ambiguous_match_is_dropped() {
        let model = model_from_triples(
            1,
            &[(0, 0, vec![1.1]), (0, 1, vec![3.0]), (1, 0, vec![1.15]), (1, 1, vec![3.5])],
            None,
        );
        let query = query_with(&[vec![1.0]]);
        // 0.1 vs 0.15: ratio 0.67 exceeds tau = 0.5.
        assert!(global_one_ratio_match(&query, &model, 0.5).is_empty());
    }

    #[test]
    fn single_point_cluster_yields_no_matches() {
        let model = model_from_triples(1, &[(0, 0, vec![1.0]), (0, 1, vec![1.0])], None);
        let query = query_with(&[vec![1.0]]);
        assert!(global_one_ratio_match(&query, &model, 0.9).is_empty());
    }

    #[test]
    fn local_match_is_confined_to_the_cluster() {
        // Clusters: images {0,1} -> 0, image 2 -> 1. Point 2 lives only in
        // cluster 1 and must not appear when matching cluster 0.
        let model = model_from_triples(
            1,
            &[
                (0, 0, vec![1.0]),
                (0, 1, vec![1.02]),
                (1, 0, vec![2.0]),
                (1, 1, vec![2.02]),
                (2, 2, vec![1.01]),
                (2, 1, vec![9.0]),
            ],
            Some(&[(0, 0), (1, 0), (2, 1)]),
        );
        let query = query_with(&[vec![1.0]]);
        let local = local_one_ratio_match(&query, &model, ClusterId(0), 0.7);
        assert_eq!(local.len(), 1);
        let view = model.view(local.candidates()[0].view_id).unwrap();
        assert_eq!(view.point, PointId(0));
    }

    #[test]
    fn exhaustive_registers_noiseless_world_and_picks_a_true_neighbor() {
        let cfg = SynthConfig {
            num_points: 300,
            num_model_images: 40,
            num_query_images: 2,
            ..SynthConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let pose_cfg = PoseConfig::default();
        for (query, gt) in world.queries.iter().zip(&world.ground_truth) {
            let out =
                localize_exhaustive(query, &world.model, 0.7, &pose_cfg, Some(&gt.pose)).unwrap();
            assert!(out.registered(), "exhaustive baseline failed a noiseless query");
            let best = out.best_attempt().unwrap();
            let err = (best.pose.as_ref().unwrap().pose.center - gt.pose.center).norm();
            assert!(err < 1e-6, "center error {err}");
        }
    }

    #[test]
    fn global_baseline_fails_on_patch_queries_but_not_gap_queries() {
        let cfg = SynthConfig {
            num_points: 400,
            num_model_images: 48,
            num_query_images: 8,
            repetition_groups: 2,
            group_size: 2,
            focal: 2000.0,
            ..SynthConfig::default()
        };
        let world = generate_world(&cfg).unwrap();
        let pose_cfg = PoseConfig::default();
        let mut patch_reg = 0;
        let mut gap_reg = 0;
        let mut gap_total = 0;
        for (i, query) in world.queries.iter().enumerate() {
            let (_, pose) = localize_global_baseline(query, &world.model, 0.7, &pose_cfg).unwrap();
            let ok = pose.is_some_and(|p| p.success);
            match world.placements[i] {
                QueryPlacement::Patch(_) => patch_reg += ok as usize,
                QueryPlacement::Gap(_) => {
                    gap_total += 1;
                    gap_reg += ok as usize;
                }
                QueryPlacement::Free => {}
            }
        }
        assert_eq!(patch_reg, 0, "repeated structure should starve the global ratio test");
        assert_eq!(gap_reg, gap_total, "gap queries see unique points and must register");
    }
}
