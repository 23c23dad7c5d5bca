//! Conservativeness guarantees of the two-stage ratio filter, checked
//! against exhaustive oracles on randomized instances.
//!
//! Two claims are verified, each at the scope where it provably holds:
//!
//! 1. For a query feature and a cluster whose two best distinct-point views
//!    both rank inside the exact global top-k, the pipeline (k-ratio
//!    admission followed by the cluster-wise test) accepts whenever the
//!    exact per-cluster 1-ratio test at the same threshold accepts. The
//!    approximate stage never loses such a match.
//! 2. The t-ratio bound d/(d + nn) never exceeds the exact local 1-ratio of
//!    the same match, so a cluster singleton that exhaustive local matching
//!    would keep is never rejected by the t-ratio stage.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use loc_core::ann::{brute_force_knn, AnnIndex, DEFAULT_LEAF_SIZE};
use loc_core::matching::{
    cluster_wise_ratio_test, global_forward_match, safe_ratio, MatchConfig, QueryFeature,
    QueryImage,
};
use loc_core::model::{
    l2, ClusterId, Clustering, ClusteringMode, Descriptor, ImageId, ModelImage, Point3D, PointId,
    SceneModel, View, ViewId,
};
use loc_core::pnp::CameraPose;

fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(0.0f32..1.0)).collect()
}

/// A random but structurally valid model: `num_points` points with 2–4 views
/// each, spread over `num_images` images in `num_clusters` clusters.
fn random_model(
    rng: &mut ChaCha8Rng,
    num_points: usize,
    num_images: usize,
    num_clusters: usize,
    dim: usize,
) -> SceneModel {
    let mut points = Vec::new();
    let mut views = Vec::new();
    let mut image_views: BTreeMap<ImageId, Vec<ViewId>> = BTreeMap::new();
    for p in 0..num_points {
        let track_len = rng.gen_range(2..=4.min(num_images));
        let mut imgs: Vec<u32> = (0..num_images as u32).collect();
        imgs.shuffle(rng);
        imgs.truncate(track_len);
        imgs.sort_unstable();
        let base = random_descriptor(rng, dim);
        let mut view_ids = Vec::new();
        for img in imgs {
            let vid = ViewId(views.len() as u32);
            views.push(View {
                id: vid,
                point: PointId(p as u32),
                image: ImageId(img),
                pixel: Vector2::new(rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)),
                descriptor: Descriptor::new(
                    base.iter().map(|&c| c + rng.gen_range(-0.02f32..0.02)).collect(),
                )
                .unwrap(),
            });
            image_views.entry(ImageId(img)).or_default().push(vid);
            view_ids.push(vid);
        }
        points.push(Point3D {
            id: PointId(p as u32),
            position: Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(5.0..15.0),
            ),
            view_ids,
        });
    }
    let images: Vec<ModelImage> = (0..num_images)
        .map(|i| ModelImage {
            id: ImageId(i as u32),
            cluster: ClusterId((i % num_clusters) as u32),
            width: 32,
            height: 32,
            pose: CameraPose {
                rotation: Matrix3::identity(),
                center: Vector3::new(i as f64, 0.0, 0.0),
                focal: 100.0,
                principal_point: Vector2::new(16.0, 16.0),
            },
            view_ids: image_views.remove(&ImageId(i as u32)).unwrap_or_default(),
        })
        .collect();
    let assignment = images.iter().map(|img| (img.id, img.cluster)).collect();
    let clustering =
        Clustering::new(ClusteringMode::Explicit, num_clusters as u32, assignment).unwrap();
    SceneModel::new(dim, points, views, images, clustering).unwrap()
}

fn single_feature_query(descriptor: Vec<f32>) -> QueryImage {
    QueryImage {
        id: 0,
        width: 32,
        height: 32,
        focal: 100.0,
        principal_point: Vector2::new(16.0, 16.0),
        features: vec![QueryFeature {
            id: 0,
            pixel: Vector2::new(16.0, 16.0),
            descriptor: Descriptor::new(descriptor).unwrap(),
        }],
    }
}

/// Best and second-best views of the cluster for the query, required to be
/// of distinct points, ties toward the lower view id.
fn cluster_top2_distinct(
    model: &SceneModel,
    cluster: ClusterId,
    query: &[f32],
) -> Option<(ViewId, f32, ViewId, f32)> {
    let mut ranked: Vec<(f32, ViewId, PointId)> = model
        .views_in_cluster(cluster)
        .iter()
        .map(|&id| {
            let v = model.view(id).unwrap();
            (l2(query, v.descriptor.as_slice()), id, v.point)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (d1, v1, p1) = *ranked.first()?;
    let (d2, v2, _) = *ranked.iter().find(|(_, _, p)| *p != p1)?;
    Some((v1, d1, v2, d2))
}

#[test]
fn pipeline_keeps_every_scoped_match_the_exact_local_ratio_test_keeps() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut checks = 0u64;
    let mut kept = 0u64;
    for _ in 0..1500 {
        let num_clusters = rng.gen_range(2..6);
        let num_images = rng.gen_range(num_clusters..num_clusters * 3);
        let dim = rng.gen_range(3..6);
        let num_points = rng.gen_range(6..30);
        let model = random_model(&mut rng, num_points, num_images, num_clusters, dim);
        let index = AnnIndex::for_model(&model, DEFAULT_LEAF_SIZE, 7).unwrap();
        let k = rng.gen_range(2..=5usize);
        let tau = rng.gen_range(0.5..0.9f32);
        let cfg = MatchConfig { k, tau, n_forward: usize::MAX, ..MatchConfig::default() };
        let query = single_feature_query(random_descriptor(&mut rng, dim));
        let q = query.features[0].descriptor.as_slice();

        // Exact global ranking; the first k ids define "inside the top-k".
        let exact = brute_force_knn(&model, q, k + 1);
        assert!(exact.len() > k, "models are built with plenty of views");
        let topk: Vec<u32> = exact.iter().take(k).map(|n| n.id).collect();

        let forward = global_forward_match(&query, &index, &cfg, usize::MAX).unwrap();
        let filtered = cluster_wise_ratio_test(&forward, &model, &cfg).unwrap();
        let accepted = filtered.pair_set();

        for c in 0..model.clustering().num_clusters {
            let cluster = ClusterId(c);
            let Some((v1, d1, v2, d2)) = cluster_top2_distinct(&model, cluster, q) else {
                continue;
            };
            // Scope of the guarantee: both cluster leaders rank inside the
            // exact global top-k.
            if !(topk.contains(&v1.0) && topk.contains(&v2.0)) {
                continue;
            }
            checks += 1;
            if safe_ratio(d1, d2) <= tau {
                assert!(
                    accepted.contains(&(0, v1)),
                    "cluster {cluster}: exact local ratio {:.4} <= tau {tau:.4} but the \
                     pipeline dropped view {v1} (d1={d1:.4}, d2={d2:.4})",
                    safe_ratio(d1, d2),
                );
                kept += 1;
            }
        }
    }
    assert!(checks >= 600, "only {checks} scoped checks — model generator too sparse");
    assert!(kept >= 150, "only {kept} accepting checks — thresholds never bind");
}

#[test]
fn t_ratio_never_exceeds_the_exact_local_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checks = 0u64;
    for _ in 0..300 {
        let num_clusters = rng.gen_range(2..5);
        let num_images = rng.gen_range(num_clusters..num_clusters * 3);
        let dim = rng.gen_range(3..6);
        let num_points = rng.gen_range(4..20);
        let model = random_model(&mut rng, num_points, num_images, num_clusters, dim);
        let query = random_descriptor(&mut rng, dim);
        for view in model.views() {
            let cluster = model.cluster_of_view(view.id).unwrap();
            let Some(&Some((_, nn_dist))) = model.nn_table().get(view.id) else {
                continue; // no distinct-point view in the cluster: no exact ratio either
            };
            let d = l2(&query, view.descriptor.as_slice());
            let t_ratio = safe_ratio(d, d + nn_dist);
            // Exact denominator: nearest view of a different point, scanned
            // exhaustively within the cluster.
            let d2 = model
                .views_in_cluster(cluster)
                .iter()
                .filter_map(|&id| {
                    let w = model.view(id).unwrap();
                    (w.point != view.point).then(|| l2(&query, w.descriptor.as_slice()))
                })
                .min_by(f32::total_cmp)
                .expect("nn table entry implies a rival exists");
            let exact_ratio = safe_ratio(d, d2);
            assert!(
                t_ratio <= exact_ratio * (1.0 + 1e-4) + 1e-6,
                "t-ratio {t_ratio} exceeds exact local ratio {exact_ratio} \
                 (d={d}, nn={nn_dist}, d2={d2})"
            );
            checks += 1;
        }
    }
    assert!(checks >= 5_000, "only {checks} pointwise checks");
}

/// System-level reading of the singleton guarantee: when a (query, cluster)
/// group ends up with a single candidate, the t-ratio stage keeps it
/// whenever the exact local 1-ratio at the same tau would.
#[test]
fn singleton_groups_survive_when_exhaustive_matching_would_keep_them() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut singles = 0u64;
    let mut would_keep = 0u64;
    for _ in 0..1200 {
        let num_clusters = rng.gen_range(2..6);
        let num_images = rng.gen_range(num_clusters..num_clusters * 3);
        let dim = rng.gen_range(3..6);
        let num_points = rng.gen_range(6..25);
        let model = random_model(&mut rng, num_points, num_images, num_clusters, dim);
        let index = AnnIndex::for_model(&model, DEFAULT_LEAF_SIZE, 11).unwrap();
        let k = rng.gen_range(2..=4usize);
        let tau = rng.gen_range(0.5..0.9f32);
        let cfg = MatchConfig { k, tau, n_forward: usize::MAX, ..MatchConfig::default() };
        let query = single_feature_query(random_descriptor(&mut rng, dim));
        let q = query.features[0].descriptor.as_slice();

        let forward = global_forward_match(&query, &index, &cfg, usize::MAX).unwrap();
        let filtered = cluster_wise_ratio_test(&forward, &model, &cfg).unwrap();
        let accepted = filtered.pair_set();

        let mut groups: BTreeMap<ClusterId, Vec<ViewId>> = BTreeMap::new();
        for cand in forward.iter() {
            groups
                .entry(model.cluster_of_view(cand.view_id).unwrap())
                .or_default()
                .push(cand.view_id);
        }
        for (cluster, members) in groups {
            let [only] = members.as_slice() else { continue };
            singles += 1;
            let view = model.view(*only).unwrap();
            let d = l2(q, view.descriptor.as_slice());
            let d2 = model
                .views_in_cluster(cluster)
                .iter()
                .filter_map(|&id| {
                    let w = model.view(id).unwrap();
                    (w.point != view.point).then(|| l2(q, w.descriptor.as_slice()))
                })
                .min_by(f32::total_cmp);
            let exact_keeps = match d2 {
                Some(d2) => safe_ratio(d, d2) <= tau,
                None => true, // nothing to distinguish from
            };
            if exact_keeps {
                would_keep += 1;
                assert!(
                    accepted.contains(&(0, *only)),
                    "cluster {cluster}: singleton {only} kept by the exact ratio \
                     (d={d}) but dropped by the t-ratio stage"
                );
            }
        }
    }
    assert!(singles >= 300, "only {singles} singleton groups arose");
    assert!(would_keep >= 100, "only {would_keep} singletons were keepable");
}
