//! Synthetic scene generation with controllable repeated structure.
//!
//! The geometry is a courtyard: model cameras sit on an inner ring looking
//! radially outward at a cylindrical wall of 3D points. Repetition is
//! injected as *patches* — arcs of wall slightly wider than a camera's field
//! of view whose points reuse the descriptors of every other copy in their
//! group, so a camera (or query) inside a patch sees almost nothing that is
//! globally distinctive except a handful of per-patch unique *anchor* points.
//! The arcs between patches hold ordinary unique points. Every quantity is
//! drawn from a single seeded generator, so a configuration maps to exactly
//! one world.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::{QueryFeature, QueryImage};
use crate::model::{
    Clustering, Descriptor, ImageId, ModelError, ModelImage, Point3D, PointId, SceneModel, View,
    ViewId,
};
use crate::pnp::{reproject, CameraPose, PnpError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("layout infeasible: {0}")]
    Layout(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pose(#[from] PnpError),
}

/// Generator parameters. Serialized form accepts any subset of fields; the
/// rest take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Total 3D point budget (patch points first, remainder in the gaps).
    pub num_points: usize,
    pub num_model_images: usize,
    pub num_query_images: usize,
    pub descriptor_dim: usize,
    /// Per-view (and per-query-feature) descriptor jitter.
    pub descriptor_noise_sigma: f32,
    /// Query-feature pixel jitter; model views project exactly.
    pub pixel_noise_sigma: f64,
    /// Number of repeated-structure groups R (0 disables repetition).
    pub repetition_groups: usize,
    /// Copies per group; each copy occupies its own patch.
    pub group_size: usize,
    /// Repeated points per patch (descriptors shared across the group).
    pub points_per_structure: usize,
    /// Globally unique points per patch; these give the voting stage its
    /// signal while staying below the inlier threshold on their own.
    pub unique_anchors_per_structure: usize,
    /// Per-copy perturbation of the shared descriptors.
    pub repetition_jitter_sigma: f32,
    /// Fraction of extra random-junk features added to each query.
    pub distractor_feature_fraction: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Radius of the camera ring.
    pub camera_ring_radius: f64,
    /// Radius of the point wall (must exceed the ring).
    pub wall_radius: f64,
    /// Longest allowed track: a point keeps only its nearest cameras. Kept at
    /// the retrieval depth k so the (k+1)-th neighbor of a clean query is a
    /// different point, not yet another view of the same one.
    pub max_views_per_point: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_points: 2500,
            num_model_images: 60,
            num_query_images: 24,
            descriptor_dim: 8,
            descriptor_noise_sigma: 0.0,
            pixel_noise_sigma: 0.0,
            repetition_groups: 0,
            group_size: 3,
            points_per_structure: 30,
            unique_anchors_per_structure: 6,
            repetition_jitter_sigma: 0.0,
            distractor_feature_fraction: 0.1,
            image_width: 640,
            image_height: 480,
            focal: 1200.0,
            camera_ring_radius: 1.0,
            wall_radius: 10.0,
            max_views_per_point: 5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.num_points == 0
            || self.num_model_images == 0
            || self.num_query_images == 0
            || self.descriptor_dim == 0
        {
            return bad("point, image, query, and dimension counts must be positive".into());
        }
        if self.repetition_groups > 0 && self.group_size < 2 {
            return bad("repetition needs at least 2 copies per group".into());
        }
        if self.descriptor_noise_sigma < 0.0
            || self.repetition_jitter_sigma < 0.0
            || self.pixel_noise_sigma < 0.0
        {
            return bad("noise levels must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_feature_fraction) {
            return bad("distractor fraction must lie in [0, 1]".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return bad(format!("focal must be positive, got {}", self.focal));
        }
        if !(self.camera_ring_radius > 0.0 && self.wall_radius > self.camera_ring_radius * 2.0) {
            return bad("wall radius must clearly exceed the camera ring radius".into());
        }
        if self.max_views_per_point < 2 {
            return bad("points need at least 2 views".into());
        }
        if self.repetition_groups > 0 {
            let patches = self.repetition_groups * self.group_size;
            let spacing = 2.0 * PI / patches as f64;
            let width = self.patch_width();
            if width > 0.75 * spacing {
                return Err(SynthError::Layout(format!(
                    "{patches} patches of width {width:.3} rad do not fit on the wall with \
                     usable gaps (spacing {spacing:.3} rad); reduce groups/copies, raise the \
                     focal length, or shrink the field of view"
                )));
            }
            let patch_points =
                patches * (self.points_per_structure + self.unique_anchors_per_structure);
            if self.num_points < patch_points {
                return bad(format!(
                    "num_points = {} cannot hold {patch_points} patch points",
                    self.num_points
                ));
            }
        }
        Ok(())
    }

    /// Full azimuthal arc of wall visible from a camera on the ring: the
    /// wall angle at which a point leaves the horizontal field of view.
    pub fn visible_arc(&self) -> f64 {
        let t = (self.image_width as f64 / 2.0) / self.focal;
        let psi = t.atan();
        let half = psi - ((self.camera_ring_radius / self.wall_radius) * psi.sin()).asin();
        2.0 * half
    }

    /// Patches are 1.3x the visible arc, so a query centered on a patch sees
    /// nothing outside it.
    pub fn patch_width(&self) -> f64 {
        1.3 * self.visible_arc()
    }

    /// Height band that keeps points inside every observing camera's
    /// vertical field of view, with a 20% margin.
    fn height_limit(&self) -> f64 {
        let min_depth =
            self.wall_radius * (self.visible_arc() / 2.0).cos() - self.camera_ring_radius;
        0.8 * (self.image_height as f64 / 2.0) / self.focal * min_depth
    }
}

/// Ground truth for one query: its exact pose and, per feature, the 3D point
/// it was projected from (None marks a distractor).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthQuery {
    pub query_id: u32,
    pub pose: CameraPose,
    pub provenance: Vec<Option<PointId>>,
}

/// Where a query camera was placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "index")]
pub enum QueryPlacement {
    /// Centered on repetition patch `index`: the hard case.
    Patch(u32),
    /// Centered on the gap after patch `index`: globally distinctive.
    Gap(u32),
    /// Anywhere on the ring (worlds without repetition).
    Free,
}

/// Membership of a point in a repeated group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepetitionTag {
    pub group: u32,
    pub copy: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub model: SceneModel,
    pub queries: Vec<QueryImage>,
    pub ground_truth: Vec<GroundTruthQuery>,
    /// Which points carry repeated descriptors, and where.
    pub repetition: BTreeMap<PointId, RepetitionTag>,
    pub placements: Vec<QueryPlacement>,
    /// Points discarded because fewer than two cameras saw them.
    pub dropped_points: usize,
}

/// An outward-looking camera on the ring at the given azimuth. The camera x
/// axis runs along the ring tangent, y points down (world -z), z radially
/// outward, so the world up direction is up in the image.
pub fn ring_pose(
    azimuth: f64,
    radius: f64,
    height: f64,
    focal: f64,
    width: u32,
    image_height: u32,
) -> CameraPose {
    let (s, c) = azimuth.sin_cos();
    let rotation = Matrix3::new(
        s, -c, 0.0, //
        0.0, 0.0, -1.0, //
        c, s, 0.0,
    );
    CameraPose {
        rotation,
        center: Vector3::new(radius * c, radius * s, height),
        focal,
        principal_point: Vector2::new(width as f64 / 2.0, image_height as f64 / 2.0),
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    a
}

struct PointSpec {
    azimuth: f64,
    height: f64,
    base: Vec<f32>,
    tag: Option<RepetitionTag>,
}

impl PointSpec {
    fn position(&self, wall_radius: f64) -> Vector3<f64> {
        Vector3::new(
            wall_radius * self.azimuth.cos(),
            wall_radius * self.azimuth.sin(),
            self.height,
        )
    }
}

fn random_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(0.0f32..1.0)).collect()
}

fn jittered(base: &[f32], sigma: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let normal = Normal::new(0.0f32, sigma).expect("validated sigma");
    base.iter().map(|&v| v + normal.sample(rng)).collect()
}

fn in_bounds(pixel: &Vector2<f64>, width: u32, height: u32) -> bool {
    pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x <= width as f64 && pixel.y <= height as f64
}

/// Generates a world. Deterministic: the same configuration yields the same
/// world, bit for bit.
pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h_lim = cfg.height_limit();
    let patches = cfg.repetition_groups * cfg.group_size;
    let spacing = if patches > 0 { 2.0 * PI / patches as f64 } else { 0.0 };
    let patch_width = cfg.patch_width();

    // --- point specs ------------------------------------------------------
    let mut specs: Vec<PointSpec> = Vec::with_capacity(cfg.num_points);
    if patches > 0 {
        // Shared per-group content: descriptor bases and the local layout,
        // reused by every copy so copies are congruent.
        let mut group_bases = Vec::with_capacity(cfg.repetition_groups);
        let mut group_layouts = Vec::with_capacity(cfg.repetition_groups);
        for _ in 0..cfg.repetition_groups {
            let bases: Vec<Vec<f32>> = (0..cfg.points_per_structure)
                .map(|_| random_descriptor(&mut rng, cfg.descriptor_dim))
                .collect();
            let layout: Vec<(f64, f64)> = (0..cfg.points_per_structure)
                .map(|_| (rng.gen_range(-0.45..0.45) * patch_width, rng.gen_range(-h_lim..h_lim)))
                .collect();
            group_bases.push(bases);
            group_layouts.push(layout);
        }
        // Patch p hosts copy p/R of group p%R: adjacent patches come from
        // different groups and a group's copies sit far apart on the wall.
        for p in 0..patches {
            let group = p % cfg.repetition_groups;
            let copy = p / cfg.repetition_groups;
            let center = spacing * p as f64;
            let tag = RepetitionTag { group: group as u32, copy: copy as u32 };
            for j in 0..cfg.points_per_structure {
                let (offset, height) = group_layouts[group][j];
                specs.push(PointSpec {
                    azimuth: center + offset,
                    height,
                    base: jittered(&group_bases[group][j], cfg.repetition_jitter_sigma, &mut rng),
                    tag: Some(tag),
                });
            }
            for _ in 0..cfg.unique_anchors_per_structure {
                specs.push(PointSpec {
                    azimuth: center + rng.gen_range(-0.45..0.45) * patch_width,
                    height: rng.gen_range(-h_lim..h_lim),
                    base: random_descriptor(&mut rng, cfg.descriptor_dim),
                    tag: None,
                });
            }
        }
    }
    let gap_budget = cfg.num_points - specs.len();
    let gap_width = if patches > 0 { spacing - patch_width } else { 2.0 * PI };
    for _ in 0..gap_budget {
        let azimuth = if patches > 0 {
            let gap = rng.gen_range(0..patches);
            spacing * gap as f64 + spacing / 2.0 + rng.gen_range(-0.45..0.45) * gap_width
        } else {
            rng.gen_range(0.0..2.0 * PI)
        };
        specs.push(PointSpec {
            azimuth,
            height: rng.gen_range(-h_lim..h_lim),
            base: random_descriptor(&mut rng, cfg.descriptor_dim),
            tag: None,
        });
    }

    // --- model cameras ------------------------------------------------------
    let camera_azimuths: Vec<f64> = (0..cfg.num_model_images)
        .map(|i| 2.0 * PI * i as f64 / cfg.num_model_images as f64)
        .collect();
    let mut images: Vec<ModelImage> = camera_azimuths
        .iter()
        .enumerate()
        .map(|(i, &az)| ModelImage {
            id: ImageId(i as u32),
            cluster: crate::model::ClusterId(i as u32),
            width: cfg.image_width,
            height: cfg.image_height,
            pose: ring_pose(
                az,
                cfg.camera_ring_radius,
                0.0,
                cfg.focal,
                cfg.image_width,
                cfg.image_height,
            ),
            view_ids: Vec::new(),
        })
        .collect();

    // --- views: nearest cameras that actually see the point ----------------
    let mut points: Vec<Point3D> = Vec::new();
    let mut views: Vec<View> = Vec::new();
    let mut repetition = BTreeMap::new();
    // Noise-free descriptor base per kept point, indexed by point id; query
    // features are generated from the base, not from any particular view.
    let mut point_bases: Vec<Vec<f32>> = Vec::new();
    let mut dropped_points = 0usize;
    for spec in &specs {
        let position = spec.position(cfg.wall_radius);
        let mut observers: Vec<(f64, usize, Vector2<f64>)> = Vec::new();
        for (i, img) in images.iter().enumerate() {
            if let Some(pixel) = reproject(&img.pose, &position) {
                if in_bounds(&pixel, cfg.image_width, cfg.image_height) {
                    observers.push((wrap_angle(spec.azimuth - camera_azimuths[i]).abs(), i, pixel));
                }
            }
        }
        observers.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        observers.truncate(cfg.max_views_per_point);
        if observers.len() < 2 {
            dropped_points += 1;
            continue;
        }
        observers.sort_by_key(|o| o.1); // ascending image id for stable view order
        let pid = PointId(points.len() as u32);
        let mut view_ids = Vec::with_capacity(observers.len());
        for (_, img_idx, pixel) in observers {
            let vid = ViewId(views.len() as u32);
            views.push(View {
                id: vid,
                point: pid,
                image: images[img_idx].id,
                pixel,
                descriptor: Descriptor::new(jittered(
                    &spec.base,
                    cfg.descriptor_noise_sigma,
                    &mut rng,
                ))
                .expect("finite synthetic descriptor"),
            });
            images[img_idx].view_ids.push(vid);
            view_ids.push(vid);
        }
        points.push(Point3D { id: pid, position, view_ids });
        point_bases.push(spec.base.clone());
        if let Some(tag) = spec.tag {
            repetition.insert(pid, tag);
        }
    }

    let image_ids: Vec<ImageId> = images.iter().map(|i| i.id).collect();
    let clustering = Clustering::single_image(&image_ids)?;
    // Point ids were assigned relative to kept specs, so positions, bases,
    // and the repetition map all line up with the final model.
    let model = SceneModel::new(cfg.descriptor_dim, points, views, images, clustering)?;

    // --- queries -------------------------------------------------------------
    let mut queries = Vec::with_capacity(cfg.num_query_images);
    let mut ground_truth = Vec::with_capacity(cfg.num_query_images);
    let mut placements = Vec::with_capacity(cfg.num_query_images);
    for qi in 0..cfg.num_query_images {
        let mut attempt = 0;
        let (features, provenance, pose, placement) = loop {
            let (azimuth, placement) = if patches > 0 && attempt < 10 {
                // Alternate the hard case (patch-centered) with the easy one.
                let slot = (qi / 2) % patches;
                if qi % 2 == 0 {
                    (
                        spacing * slot as f64 + rng.gen_range(-0.01..0.01),
                        QueryPlacement::Patch(slot as u32),
                    )
                } else {
                    (
                        spacing * slot as f64 + spacing / 2.0 + rng.gen_range(-0.01..0.01),
                        QueryPlacement::Gap(slot as u32),
                    )
                }
            } else {
                (rng.gen_range(0.0..2.0 * PI), QueryPlacement::Free)
            };
            let pose = ring_pose(
                azimuth,
                cfg.camera_ring_radius + rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                cfg.focal,
                cfg.image_width,
                cfg.image_height,
            );
            let pixel_noise = if cfg.pixel_noise_sigma > 0.0 {
                Some(Normal::new(0.0f64, cfg.pixel_noise_sigma).expect("validated sigma"))
            } else {
                None
            };
            let mut features = Vec::new();
            let mut provenance = Vec::new();
            for point in model.points() {
                let Some(exact) = reproject(&pose, &point.position) else { continue };
                if !in_bounds(&exact, cfg.image_width, cfg.image_height) {
                    continue;
                }
                let pixel = match pixel_noise {
                    Some(n) => {
                        Vector2::new(exact.x + n.sample(&mut rng), exact.y + n.sample(&mut rng))
                    }
                    None => exact,
                };
                if !in_bounds(&pixel, cfg.image_width, cfg.image_height) {
                    continue; // noise pushed it off the sensor
                }
                let base = &point_bases[point.id.0 as usize];
                features.push(QueryFeature {
                    id: features.len() as u32,
                    pixel,
                    descriptor: Descriptor::new(jittered(
                        base,
                        cfg.descriptor_noise_sigma,
                        &mut rng,
                    ))
                    .expect("finite synthetic descriptor"),
                });
                provenance.push(Some(point.id));
            }
            if !features.is_empty() {
                let n_distractors =
                    (cfg.distractor_feature_fraction * features.len() as f64).round() as usize;
                for _ in 0..n_distractors {
                    features.push(QueryFeature {
                        id: features.len() as u32,
                        pixel: Vector2::new(
                            rng.gen_range(0.0..cfg.image_width as f64),
                            rng.gen_range(0.0..cfg.image_height as f64),
                        ),
                        descriptor: Descriptor::new(random_descriptor(
                            &mut rng,
                            cfg.descriptor_dim,
                        ))
                        .expect("finite synthetic descriptor"),
                    });
                    provenance.push(None);
                }
                break (features, provenance, pose, placement);
            }
            attempt += 1;
            if attempt > 30 {
                return Err(SynthError::Layout(format!(
                    "query {qi} sees no points from any sampled placement"
                )));
            }
        };
        let query = QueryImage {
            id: qi as u32,
            width: cfg.image_width,
            height: cfg.image_height,
            focal: cfg.focal,
            principal_point: Vector2::new(
                cfg.image_width as f64 / 2.0,
                cfg.image_height as f64 / 2.0,
            ),
            features,
        };
        query.validate().map_err(|e| SynthError::BadConfig(e.to_string()))?;
        queries.push(query);
        ground_truth.push(GroundTruthQuery { query_id: qi as u32, pose, provenance });
        placements.push(placement);
    }

    Ok(SynthWorld { model, queries, ground_truth, repetition, placements, dropped_points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::brute_force_knn;
    use crate::model::l2;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_points: 300,
            num_model_images: 40,
            num_query_images: 6,
            ..SynthConfig::default()
        }
    }

    fn repetition_cfg() -> SynthConfig {
        SynthConfig {
            num_points: 250,
            num_model_images: 48,
            num_query_images: 8,
            repetition_groups: 2,
            group_size: 2,
            focal: 2000.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_config_produces_identical_worlds() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&small_cfg()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_world(&small_cfg()).unwrap();
        let b = generate_world(&SynthConfig { seed: 1, ..small_cfg() }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn noiseless_features_hit_their_own_point_first() {
        let world = generate_world(&small_cfg()).unwrap();
        for (query, gt) in world.queries.iter().zip(&world.ground_truth).take(2) {
            for (f, prov) in query.features.iter().zip(&gt.provenance) {
                let Some(pid) = prov else { continue };
                let nearest = brute_force_knn(&world.model, f.descriptor.as_slice(), 1);
                let view = world.model.view(crate::model::ViewId(nearest[0].id)).unwrap();
                assert_eq!(view.point, *pid);
                assert_eq!(nearest[0].distance, 0.0);
            }
        }
    }

    #[test]
    fn noiseless_query_pixels_equal_reprojections() {
        let world = generate_world(&small_cfg()).unwrap();
        for (query, gt) in world.queries.iter().zip(&world.ground_truth) {
            for (f, prov) in query.features.iter().zip(&gt.provenance) {
                let Some(pid) = prov else { continue };
                let point = world.model.point(*pid).unwrap();
                let proj = reproject(&gt.pose, &point.position).unwrap();
                assert!((proj - f.pixel).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn noisy_pixels_stay_near_reprojections() {
        let cfg = SynthConfig { pixel_noise_sigma: 0.5, ..small_cfg() };
        let world = generate_world(&cfg).unwrap();
        for (query, gt) in world.queries.iter().zip(&world.ground_truth) {
            for (f, prov) in query.features.iter().zip(&gt.provenance) {
                let Some(pid) = prov else { continue };
                let point = world.model.point(*pid).unwrap();
                let proj = reproject(&gt.pose, &point.position).unwrap();
                assert!((proj - f.pixel).norm() < 6.0 * 0.5);
            }
        }
    }

    #[test]
    fn repeated_points_are_globally_ambiguous_and_unique_points_are_not() {
        let world = generate_world(&repetition_cfg()).unwrap();
        assert!(!world.repetition.is_empty());
        let model = &world.model;
        let mut checked = 0;
        for point in model.points() {
            let view = model.view(point.view_ids[0]).unwrap();
            // Nearest view of a *different* point, by exhaustive scan.
            let mut best: Option<(f32, PointId)> = None;
            for other in model.views() {
                if other.point == point.id {
                    continue;
                }
                let d = l2(view.descriptor.as_slice(), other.descriptor.as_slice());
                if best.is_none() || d < best.unwrap().0 {
                    best = Some((d, other.point));
                }
            }
            let (dist, rival) = best.unwrap();
            if let Some(tag) = world.repetition.get(&point.id) {
                // The indistinguishable rival is the same group, another copy.
                assert_eq!(dist, 0.0, "copies share descriptors exactly at zero jitter");
                let rival_tag = world.repetition.get(&rival).unwrap();
                assert_eq!(rival_tag.group, tag.group);
                assert_ne!(rival_tag.copy, tag.copy);
                checked += 1;
            } else {
                assert!(dist > 0.0, "unique point duplicated");
            }
        }
        assert!(checked >= 50);
    }

    #[test]
    fn patch_queries_see_only_their_patch() {
        let cfg = repetition_cfg();
        let world = generate_world(&cfg).unwrap();
        let patches = cfg.repetition_groups * cfg.group_size;
        let spacing = 2.0 * PI / patches as f64;
        for (i, placement) in world.placements.iter().enumerate() {
            let QueryPlacement::Patch(p) = placement else { continue };
            let center = spacing * *p as f64;
            for prov in world.ground_truth[i].provenance.iter().flatten() {
                let pos = world.model.point(*prov).unwrap().position;
                let az = pos.y.atan2(pos.x);
                assert!(
                    wrap_angle(az - center).abs() <= cfg.patch_width() / 2.0 + 1e-9,
                    "query {i} sees a point outside its patch"
                );
            }
        }
    }

    #[test]
    fn distractor_features_are_flagged_as_such() {
        let cfg = SynthConfig { distractor_feature_fraction: 0.25, ..small_cfg() };
        let world = generate_world(&cfg).unwrap();
        for (query, gt) in world.queries.iter().zip(&world.ground_truth) {
            assert_eq!(query.features.len(), gt.provenance.len());
            let real = gt.provenance.iter().filter(|p| p.is_some()).count();
            let junk = gt.provenance.len() - real;
            assert_eq!(junk, (0.25 * real as f64).round() as usize);
        }
    }

    #[test]
    fn every_point_keeps_a_bounded_track() {
        let world = generate_world(&small_cfg()).unwrap();
        for p in world.model.points() {
            assert!(p.view_ids.len() >= 2 && p.view_ids.len() <= 5);
        }
    }

    #[test]
    fn infeasible_patch_layout_is_reported() {
        let cfg = SynthConfig {
            repetition_groups: 8,
            group_size: 4,
            focal: 1200.0,
            num_points: 3000,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_world(&cfg), Err(SynthError::Layout(_))));
    }

    #[test]
    fn zero_point_config_is_rejected() {
        let cfg = SynthConfig { num_points: 0, ..SynthConfig::default() };
        assert!(matches!(generate_world(&cfg), Err(SynthError::BadConfig(_))));
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let json = r#"{ "num_points": 100, "repetition_groups": 2 }"#;
        let cfg: SynthConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.num_points, 100);
        assert_eq!(cfg.repetition_groups, 2);
        assert_eq!(cfg.focal, SynthConfig::default().focal);
        let back: SynthConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }
}
