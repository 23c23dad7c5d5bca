//! Scene model: 3D points, their 2D views, posed model images, image
//! clustering, the co-visibility graph, and the per-cluster nearest-neighbor
//! table that backs the t-ratio test.
//!
//! A *view* is one observation of a 3D point in one model image: a pixel plus
//! a descriptor. Views are the unit of descriptor matching; the point and
//! image they reference tie matches back to geometry and to clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pnp::CameraPose;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Identifier of a 3D point.
    PointId
);
id_type!(
    /// Identifier of a view (one observation of a point in one image).
    ViewId
);
id_type!(
    /// Identifier of a model image.
    ImageId
);
id_type!(
    /// Identifier of an image cluster.
    ClusterId
);

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("descriptor has dimension {got}, model uses {expected} ({entity})")]
    DescriptorDim { entity: String, got: usize, expected: usize },
    #[error("descriptor dimension must be positive")]
    ZeroDescriptorDim,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },
    #[error("dangling reference: {from} refers to missing {to}")]
    DanglingRef { from: String, to: String },
    #[error("point {0} has {1} views; every point needs at least 2")]
    PointTooFewViews(PointId, usize),
    #[error("point {point} and view {view} disagree about their association")]
    BackRefMismatch { point: PointId, view: ViewId },
    #[error("image {image} and view {view} disagree about their association")]
    ImageRefMismatch { image: ImageId, view: ViewId },
    #[error("point {point} observed twice in image {image}")]
    DuplicateObservation { point: PointId, image: ImageId },
    #[error("view {view}: pixel ({x}, {y}) outside image {image} bounds {w}x{h}")]
    PixelOutOfBounds { view: ViewId, image: ImageId, x: f64, y: f64, w: u32, h: u32 },
    #[error("image {0}: {1}")]
    BadImage(ImageId, String),
    #[error("clustering: {0}")]
    BadClustering(String),
    #[error("nearest-neighbor table: {0}")]
    BadNnTable(String),
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

/// A real-valued feature descriptor. Components are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(Vec<f32>);

impl Descriptor {
    pub fn new(components: Vec<f32>) -> Result<Self, ModelError> {
        if components.is_empty() {
            return Err(ModelError::ZeroDescriptorDim);
        }
        if !components.iter().all(|c| c.is_finite()) {
            return Err(ModelError::NonFinite("descriptor".into()));
        }
        Ok(Self(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn distance_to(&self, other: &Descriptor) -> f32 {
        l2(&self.0, &other.0)
    }
}

/// Squared L2 distance. This is the single distance definition used by the
/// index, the brute-force scans, the NN table, and every ratio test, so all
/// stages see bitwise-identical values.
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// L2 distance.
pub fn l2(a: &[f32], b: &[f32]) -> f32 {
    l2_sq(a, b).sqrt()
}

// ---------------------------------------------------------------------------
// Entities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: PointId,
    pub position: Vector3<f64>,
    /// Views observing this point, in ascending view-id order.
    pub view_ids: Vec<ViewId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub id: ViewId,
    pub point: PointId,
    pub image: ImageId,
    pub pixel: Vector2<f64>,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelImage {
    pub id: ImageId,
    pub cluster: ClusterId,
    pub width: u32,
    pub height: u32,
    pub pose: CameraPose,
    /// Views anchored to this image, in ascending view-id order.
    pub view_ids: Vec<ViewId>,
}

/// How images were grouped into clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusteringMode {
    /// Every image is its own cluster (the default at moderate model sizes).
    SingleImage,
    /// Cluster ids were assigned externally.
    Explicit,
}

/// Assignment of images to clusters. Cluster ids are dense (`0..num_clusters`)
/// and every cluster is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub mode: ClusteringMode,
    pub num_clusters: u32,
    assignment: BTreeMap<ImageId, ClusterId>,
    members: BTreeMap<ClusterId, Vec<ImageId>>,
}

impl Clustering {
    pub fn new(
        mode: ClusteringMode,
        num_clusters: u32,
        assignment: BTreeMap<ImageId, ClusterId>,
    ) -> Result<Self, ModelError> {
        let mut members: BTreeMap<ClusterId, Vec<ImageId>> = BTreeMap::new();
        for (&img, &cluster) in &assignment {
            if cluster.0 >= num_clusters {
                return Err(ModelError::BadClustering(format!(
                    "image {img} assigned to cluster {cluster}, but num_clusters = {num_clusters}"
                )));
            }
            members.entry(cluster).or_default().push(img);
        }
        for c in 0..num_clusters {
            if !members.contains_key(&ClusterId(c)) {
                return Err(ModelError::BadClustering(format!("cluster {c} is empty")));
            }
        }
        Ok(Self { mode, num_clusters, assignment, members })
    }

    /// One cluster per image, numbered in ascending image-id order.
    pub fn single_image(image_ids: &[ImageId]) -> Result<Self, ModelError> {
        let mut sorted = image_ids.to_vec();
        sorted.sort_unstable();
        let assignment =
            sorted.iter().enumerate().map(|(i, &img)| (img, ClusterId(i as u32))).collect();
        Self::new(ClusteringMode::SingleImage, sorted.len() as u32, assignment)
    }

    pub fn cluster_of(&self, image: ImageId) -> Option<ClusterId> {
        self.assignment.get(&image).copied()
    }

    /// Images of a cluster in ascending image-id order.
    pub fn images_in(&self, cluster: ClusterId) -> &[ImageId] {
        self.members.get(&cluster).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn assignment(&self) -> &BTreeMap<ImageId, ClusterId> {
        &self.assignment
    }
}

/// Co-visibility structure: which images observe which points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneGraph {
    images_of_point: BTreeMap<PointId, BTreeSet<ImageId>>,
    points_in_image: BTreeMap<ImageId, BTreeSet<PointId>>,
    edge_count: usize,
}

impl SceneGraph {
    /// Builds the bipartite point/image adjacency from view records.
    pub fn from_views<'a>(views: impl IntoIterator<Item = &'a View>) -> Self {
        let mut graph = SceneGraph::default();
        for v in views {
            let inserted = graph.images_of_point.entry(v.point).or_default().insert(v.image);
            graph.points_in_image.entry(v.image).or_default().insert(v.point);
            if inserted {
                graph.edge_count += 1;
            }
        }
        graph
    }

    pub fn images_of_point(&self, point: PointId) -> impl Iterator<Item = ImageId> + '_ {
        self.images_of_point.get(&point).into_iter().flatten().copied()
    }

    pub fn points_in_image(&self, image: ImageId) -> impl Iterator<Item = PointId> + '_ {
        self.points_in_image.get(&image).into_iter().flatten().copied()
    }

    pub fn observes(&self, image: ImageId, point: PointId) -> bool {
        self.points_in_image.get(&image).is_some_and(|s| s.contains(&point))
    }

    /// Number of distinct (point, image) incidences; equals the view count
    /// when each point appears at most once per image.
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Sum of per-point degrees; by bipartite symmetry this equals the sum of
    /// per-image degrees and `edge_count`.
    pub fn point_degree_sum(&self) -> usize {
        self.images_of_point.values().map(BTreeSet::len).sum()
    }

    pub fn image_degree_sum(&self) -> usize {
        self.points_in_image.values().map(BTreeSet::len).sum()
    }
}

/// Per-view nearest neighbor *within the view's own cluster*, excluding views
/// of the same 3D point. `None` marks the sentinel: no other-point view
/// exists in the cluster (the t-ratio test auto-passes those).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NearestNeighborTable {
    entries: BTreeMap<ViewId, Option<(ViewId, f32)>>,
}

impl NearestNeighborTable {
    pub fn from_entries(entries: BTreeMap<ViewId, Option<(ViewId, f32)>>) -> Self {
        Self { entries }
    }

    pub fn get(&self, view: ViewId) -> Option<&Option<(ViewId, f32)>> {
        self.entries.get(&view)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ViewId, &Option<(ViewId, f32)>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

// ---------------------------------------------------------------------------
// SceneModel
// ---------------------------------------------------------------------------

/// A fully validated scene model. Construction checks every structural
/// invariant and builds the co-visibility graph; lookup maps make id-based
/// access cheap.
#[derive(Debug, Clone)]
pub struct SceneModel {
    descriptor_dim: usize,
    points: Vec<Point3D>,
    views: Vec<View>,
    images: Vec<ModelImage>,
    clustering: Clustering,
    graph: SceneGraph,
    nn_table: NearestNeighborTable,
    point_index: BTreeMap<PointId, usize>,
    view_index: BTreeMap<ViewId, usize>,
    image_index: BTreeMap<ImageId, usize>,
}

impl PartialEq for SceneModel {
    fn eq(&self, other: &Self) -> bool {
        // Lookup maps and the graph are derived from the rest.
        self.descriptor_dim == other.descriptor_dim
            && self.points == other.points
            && self.views == other.views
            && self.images == other.images
            && self.clustering == other.clustering
            && self.nn_table == other.nn_table
    }
}

impl SceneModel {
    /// Assembles and validates a model, computing the NN table.
    pub fn new(
        descriptor_dim: usize,
        points: Vec<Point3D>,
        views: Vec<View>,
        images: Vec<ModelImage>,
        clustering: Clustering,
    ) -> Result<Self, ModelError> {
        let mut model = Self::assemble(descriptor_dim, points, views, images, clustering)?;
        model.nn_table = precompute_nn_table(&model);
        Ok(model)
    }

    /// Assembles a model around an existing NN table (e.g. loaded from disk).
    /// The table is checked structurally — every view has an entry, neighbors
    /// are same-cluster other-point views, distances are finite and
    /// non-negative — but not recomputed.
    pub fn with_nn_table(
        descriptor_dim: usize,
        points: Vec<Point3D>,
        views: Vec<View>,
        images: Vec<ModelImage>,
        clustering: Clustering,
        nn_table: NearestNeighborTable,
    ) -> Result<Self, ModelError> {
        let mut model = Self::assemble(descriptor_dim, points, views, images, clustering)?;
        model.validate_nn_table(&nn_table)?;
        model.nn_table = nn_table;
        Ok(model)
    }

    fn assemble(
        descriptor_dim: usize,
        mut points: Vec<Point3D>,
        mut views: Vec<View>,
        mut images: Vec<ModelImage>,
        clustering: Clustering,
    ) -> Result<Self, ModelError> {
        if descriptor_dim == 0 {
            return Err(ModelError::ZeroDescriptorDim);
        }
        points.sort_by_key(|p| p.id);
        views.sort_by_key(|v| v.id);
        images.sort_by_key(|i| i.id);

        let mut point_index = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            if point_index.insert(p.id, i).is_some() {
                return Err(ModelError::DuplicateId { kind: "point", id: p.id.0 });
            }
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite(format!("point {} position", p.id)));
            }
        }
        let mut view_index = BTreeMap::new();
        for (i, v) in views.iter().enumerate() {
            if view_index.insert(v.id, i).is_some() {
                return Err(ModelError::DuplicateId { kind: "view", id: v.id.0 });
            }
        }
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(ModelError::DuplicateId { kind: "image", id: img.id.0 });
            }
        }

        // Views: references resolve, descriptors match the model dimension,
        // pixels are finite and inside the owning image.
        let mut seen_obs = BTreeSet::new();
        for v in &views {
            if !point_index.contains_key(&v.point) {
                return Err(ModelError::DanglingRef {
                    from: format!("view {}", v.id),
                    to: format!("point {}", v.point),
                });
            }
            let Some(&img_idx) = image_index.get(&v.image) else {
                return Err(ModelError::DanglingRef {
                    from: format!("view {}", v.id),
                    to: format!("image {}", v.image),
                });
            };
            if v.descriptor.dim() != descriptor_dim {
                return Err(ModelError::DescriptorDim {
                    entity: format!("view {}", v.id),
                    got: v.descriptor.dim(),
                    expected: descriptor_dim,
                });
            }
            if !v.pixel.iter().all(|c| c.is_finite()) {
                return Err(ModelError::NonFinite(format!("view {} pixel", v.id)));
            }
            if !seen_obs.insert((v.point, v.image)) {
                return Err(ModelError::DuplicateObservation { point: v.point, image: v.image });
            }
            let img = &images[img_idx];
            if v.pixel.x < 0.0
                || v.pixel.y < 0.0
                || v.pixel.x > img.width as f64
                || v.pixel.y > img.height as f64
            {
                return Err(ModelError::PixelOutOfBounds {
                    view: v.id,
                    image: img.id,
                    x: v.pixel.x,
                    y: v.pixel.y,
                    w: img.width,
                    h: img.height,
                });
            }
        }

        // Points: at least two views, and back-references agree.
        for p in &points {
            if p.view_ids.len() < 2 {
                return Err(ModelError::PointTooFewViews(p.id, p.view_ids.len()));
            }
            for &vid in &p.view_ids {
                let Some(&vi) = view_index.get(&vid) else {
                    return Err(ModelError::DanglingRef {
                        from: format!("point {}", p.id),
                        to: format!("view {vid}"),
                    });
                };
                if views[vi].point != p.id {
                    return Err(ModelError::BackRefMismatch { point: p.id, view: vid });
                }
            }
        }
        // Completeness of back-references: every view appears in its point's
        // and image's lists.
        let mut listed_by_point: BTreeSet<ViewId> =
            points.iter().flat_map(|p| p.view_ids.iter().copied()).collect();
        for v in &views {
            if !listed_by_point.remove(&v.id) {
                return Err(ModelError::BackRefMismatch { point: v.point, view: v.id });
            }
        }

        for img in &images {
            if img.width == 0 || img.height == 0 {
                return Err(ModelError::BadImage(img.id, "zero-sized image".into()));
            }
            img.pose.validate().map_err(|e| ModelError::BadImage(img.id, e.to_string()))?;
            for &vid in &img.view_ids {
                let Some(&vi) = view_index.get(&vid) else {
                    return Err(ModelError::DanglingRef {
                        from: format!("image {}", img.id),
                        to: format!("view {vid}"),
                    });
                };
                if views[vi].image != img.id {
                    return Err(ModelError::ImageRefMismatch { image: img.id, view: vid });
                }
            }
        }
        let mut listed_by_image: BTreeSet<ViewId> =
            images.iter().flat_map(|i| i.view_ids.iter().copied()).collect();
        for v in &views {
            if !listed_by_image.remove(&v.id) {
                return Err(ModelError::ImageRefMismatch { image: v.image, view: v.id });
            }
        }

        // Clustering covers exactly the image set.
        if clustering.assignment.len() != images.len() {
            return Err(ModelError::BadClustering(format!(
                "assignment covers {} images, model has {}",
                clustering.assignment.len(),
                images.len()
            )));
        }
        for img in &images {
            match clustering.cluster_of(img.id) {
                None => {
                    return Err(ModelError::BadClustering(format!(
                        "image {} has no cluster assignment",
                        img.id
                    )))
                }
                Some(c) if c != img.cluster => {
                    return Err(ModelError::BadClustering(format!(
                        "image {} says cluster {}, assignment says {c}",
                        img.id, img.cluster
                    )))
                }
                Some(_) => {}
            }
        }

        let graph = SceneGraph::from_views(&views);
        Ok(Self {
            descriptor_dim,
            points,
            views,
            images,
            clustering,
            graph,
            nn_table: NearestNeighborTable::default(),
            point_index,
            view_index,
            image_index,
        })
    }

    fn validate_nn_table(&self, table: &NearestNeighborTable) -> Result<(), ModelError> {
        if table.len() != self.views.len() {
            return Err(ModelError::BadNnTable(format!(
                "{} entries for {} views",
                table.len(),
                self.views.len()
            )));
        }
        for (vid, entry) in table.iter() {
            let Some(view) = self.view(vid) else {
                return Err(ModelError::BadNnTable(format!("entry for unknown view {vid}")));
            };
            if let Some((nn, dist)) = entry {
                let Some(nn_view) = self.view(*nn) else {
                    return Err(ModelError::BadNnTable(format!(
                        "view {vid}: neighbor {nn} does not exist"
                    )));
                };
                if nn_view.point == view.point {
                    return Err(ModelError::BadNnTable(format!(
                        "view {vid}: neighbor {nn} observes the same point"
                    )));
                }
                if self.cluster_of_view(vid) != self.cluster_of_view(*nn) {
                    return Err(ModelError::BadNnTable(format!(
                        "view {vid}: neighbor {nn} is in a different cluster"
                    )));
                }
                if !dist.is_finite() || *dist < 0.0 {
                    return Err(ModelError::BadNnTable(format!(
                        "view {vid}: invalid distance {dist}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    pub fn points(&self) -> &[Point3D] {
        &self.points
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn images(&self) -> &[ModelImage] {
        &self.images
    }

    pub fn clustering(&self) -> &Clustering {
        &self.clustering
    }

    pub fn graph(&self) -> &SceneGraph {
        &self.graph
    }

    pub fn nn_table(&self) -> &NearestNeighborTable {
        &self.nn_table
    }

    pub fn point(&self, id: PointId) -> Option<&Point3D> {
        self.point_index.get(&id).map(|&i| &self.points[i])
    }

    pub fn view(&self, id: ViewId) -> Option<&View> {
        self.view_index.get(&id).map(|&i| &self.views[i])
    }

    pub fn image(&self, id: ImageId) -> Option<&ModelImage> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn cluster_of_view(&self, id: ViewId) -> Option<ClusterId> {
        let view = self.view(id)?;
        self.clustering.cluster_of(view.image)
    }

    /// Views of a cluster: ascending image id, then the image's view order.
    pub fn views_in_cluster(&self, cluster: ClusterId) -> Vec<ViewId> {
        self.clustering
            .images_in(cluster)
            .iter()
            .filter_map(|img| self.image(*img))
            .flat_map(|img| img.view_ids.iter().copied())
            .collect()
    }
}

/// One row of the nearest-neighbor table: the view and its nearest rival
/// (or the sentinel when the cluster holds no other point).
type NnRow = (ViewId, Option<(ViewId, f32)>);

/// Computes the per-cluster nearest-neighbor table: for every view, the
/// closest view in the same cluster that observes a *different* 3D point
/// (same-point observations are near-duplicates by construction and would
/// make the t-ratio bound vacuous). Ties break toward the lower view id;
/// views with no other-point cluster-mate get the sentinel.
pub fn precompute_nn_table(model: &SceneModel) -> NearestNeighborTable {
    let per_cluster: Vec<Vec<NnRow>> = (0..model.clustering().num_clusters)
        .into_par_iter()
        .map(|c| {
            let view_ids = model.views_in_cluster(ClusterId(c));
            let views: Vec<&View> =
                view_ids.iter().map(|id| model.view(*id).expect("validated")).collect();
            views
                .iter()
                .map(|v| {
                    let mut best: Option<(f32, ViewId)> = None;
                    for w in &views {
                        if w.id == v.id || w.point == v.point {
                            continue;
                        }
                        let d = l2(v.descriptor.as_slice(), w.descriptor.as_slice());
                        let candidate = (d, w.id);
                        if best.is_none_or(|b| candidate < b) {
                            best = Some(candidate);
                        }
                    }
                    (v.id, best.map(|(d, id)| (id, d)))
                })
                .collect()
        })
        .collect();
    let mut entries = BTreeMap::new();
    for cluster in per_cluster {
        for (vid, entry) in cluster {
            entries.insert(vid, entry);
        }
    }
    NearestNeighborTable::from_entries(entries)
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn descriptor_rejects_non_finite_and_empty() {
        assert!(Descriptor::new(vec![]).is_err());
        assert!(Descriptor::new(vec![1.0, f32::NAN]).is_err());
        assert!(Descriptor::new(vec![1.0, f32::INFINITY]).is_err());
        assert!(Descriptor::new(vec![0.5, -0.5]).is_ok());
    }

    #[test]
    fn l2_matches_hand_computed_values() {
        assert_eq!(l2(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(l2_sq(&[1.0, 1.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn two_views_of_distinct_points_are_mutual_neighbors() {
        // Same image, two points, descriptor distance 0.4.
        let model = model_from_triples(
            2,
            &[
                (0, 0, vec![0.0, 0.0]),
                (1, 0, vec![0.4, 0.0]),
                (0, 1, vec![0.0, 0.0]),
                (1, 1, vec![0.4, 0.0]),
            ],
            None,
        );
        let t = model.nn_table();
        assert_eq!(t.get(ViewId(0)).unwrap().unwrap(), (ViewId(1), 0.4));
        assert_eq!(t.get(ViewId(1)).unwrap().unwrap(), (ViewId(0), 0.4));
    }

    #[test]
    fn same_point_views_get_sentinel_not_zero_distance() {
        // One image contains two points; the other contains only point 0, so
        // its view has no other-point cluster-mate.
        let model = model_from_triples(
            2,
            &[
                (0, 0, vec![0.0, 0.0]),
                (1, 0, vec![0.7, 0.0]),
                (0, 1, vec![0.01, 0.0]),
                (1, 2, vec![0.69, 0.0]),
            ],
            None,
        );
        assert_eq!(*model.nn_table().get(ViewId(2)).unwrap(), None);
        assert_eq!(*model.nn_table().get(ViewId(3)).unwrap(), None);
        assert!(model.nn_table().get(ViewId(0)).unwrap().is_some());
    }

    #[test]
    fn nn_table_matches_exhaustive_scan_on_random_model() {
        // 200 views spread over points/images/clusters; the oracle is a flat
        // triple loop written independently of the rayon implementation.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 8;
        let mut triples = Vec::new();
        for pid in 0..50u32 {
            let n_views = rng.gen_range(2..=5);
            for _ in 0..n_views {
                let iid = rng.gen_range(0..12u32);
                let desc: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                triples.push((pid, iid, desc));
            }
        }
        // Deduplicate (point, image) collisions by reassigning images.
        let mut seen = BTreeSet::new();
        for t in &mut triples {
            let mut img = t.1;
            while !seen.insert((t.0, img)) {
                img = (img + 1) % 12;
            }
            t.1 = img;
        }
        let clusters: Vec<(u32, u32)> = (0..12).map(|i| (i, i % 4)).collect();
        let model = model_from_triples(dim, &triples, Some(&clusters));

        for v in model.views() {
            let vc = model.cluster_of_view(v.id).unwrap();
            let mut best: Option<(f32, ViewId)> = None;
            for w in model.views() {
                if w.id == v.id || w.point == v.point || model.cluster_of_view(w.id).unwrap() != vc
                {
                    continue;
                }
                let d = l2(v.descriptor.as_slice(), w.descriptor.as_slice());
                if best.is_none() || (d, w.id) < best.unwrap() {
                    best = Some((d, w.id));
                }
            }
            let expect = best.map(|(d, id)| (id, d));
            assert_eq!(*model.nn_table().get(v.id).unwrap(), expect, "view {}", v.id);
        }
    }

    #[test]
    fn graph_adjacency_and_degree_identity() {
        let model = model_from_triples(
            2,
            &[
                (0, 0, vec![0.0, 0.0]),
                (0, 1, vec![0.1, 0.0]),
                (1, 1, vec![1.0, 0.0]),
                (1, 2, vec![1.1, 0.0]),
            ],
            None,
        );
        let g = model.graph();
        let imgs: Vec<ImageId> = g.images_of_point(PointId(0)).collect();
        assert_eq!(imgs, vec![ImageId(0), ImageId(1)]);
        assert!(g.observes(ImageId(1), PointId(1)));
        assert!(!g.observes(ImageId(0), PointId(1)));
        assert_eq!(g.point_degree_sum(), g.image_degree_sum());
        assert_eq!(g.point_degree_sum(), g.edge_count());
        assert_eq!(g.edge_count(), model.views().len());
    }

    #[test]
    fn dangling_view_reference_is_reported_with_ids() {
        let model = model_from_triples(2, &[(0, 0, vec![0.0, 0.0]), (0, 1, vec![0.1, 0.0])], None);
        let mut views: Vec<View> = model.views().to_vec();
        views[1].point = PointId(99);
        let err = SceneModel::new(
            2,
            model.points().to_vec(),
            views,
            model.images().to_vec(),
            model.clustering().clone(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("view 1") && msg.contains("point 99"), "{msg}");
    }

    #[test]
    fn duplicate_point_image_observation_is_rejected() {
        let mut triples = vec![(0u32, 0u32, vec![0.0, 0.0]), (0, 1, vec![0.1, 0.0])];
        // Manually construct a duplicate (point 0, image 0) observation.
        triples.push((1, 0, vec![0.9, 0.0]));
        triples.push((1, 1, vec![0.8, 0.0]));
        let model = model_from_triples(2, &triples, None);
        let mut views = model.views().to_vec();
        views[2].point = PointId(0); // now point 0 twice in image 0
        let mut points = model.points().to_vec();
        points[0].view_ids.push(views[2].id);
        points[1].view_ids.retain(|v| *v != views[2].id);
        let err =
            SceneModel::new(2, points, views, model.images().to_vec(), model.clustering().clone())
                .unwrap_err();
        assert!(matches!(err, ModelError::DuplicateObservation { .. }), "{err}");
    }

    #[test]
    fn single_view_points_are_rejected() {
        let model = model_from_triples(2, &[(0, 0, vec![0.0; 2]), (0, 1, vec![0.0; 2])], None);
        let mut points = model.points().to_vec();
        let mut views = model.views().to_vec();
        views.pop();
        points[0].view_ids.pop();
        let mut images = model.images().to_vec();
        images[1].view_ids.clear();
        let err = SceneModel::new(2, points, views, images, model.clustering().clone());
        assert!(matches!(err, Err(ModelError::PointTooFewViews(PointId(0), 1))));
    }

    #[test]
    fn out_of_bounds_pixels_are_rejected() {
        let model = model_from_triples(2, &[(0, 0, vec![0.0; 2]), (0, 1, vec![0.0; 2])], None);
        let mut views = model.views().to_vec();
        views[0].pixel = Vector2::new(641.0, 10.0);
        let err = SceneModel::new(
            2,
            model.points().to_vec(),
            views,
            model.images().to_vec(),
            model.clustering().clone(),
        );
        assert!(matches!(err, Err(ModelError::PixelOutOfBounds { .. })));
    }

    #[test]
    fn empty_cluster_ids_are_rejected() {
        let assignment: BTreeMap<ImageId, ClusterId> =
            [(ImageId(0), ClusterId(0)), (ImageId(1), ClusterId(2))].into_iter().collect();
        let err = Clustering::new(ClusteringMode::Explicit, 3, assignment).unwrap_err();
        assert!(err.to_string().contains("cluster 1 is empty"), "{err}");
    }
}
