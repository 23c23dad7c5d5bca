//! On-disk formats: binary model directories, query sets, search indexes,
//! and JSON ground truth.
//!
//! A model directory holds five files:
//!
//! * `model.json` — human-readable header: format version, descriptor
//!   dimension, counts, clustering mode.
//! * `points.bin` — per point: id, position, view ids.
//! * `views.bin` — per view: id, point, image, pixel, descriptor. The
//!   SHA-256 of this file's bytes identifies the descriptor content; the
//!   nearest-neighbor table and any search index store that hash and are
//!   rejected as stale when it no longer matches.
//! * `images.bin` — per image: id, cluster, size, pose, view ids.
//! * `nn_table.bin` — per view: nearest same-cluster different-point view.
//!
//! All binary files are little-endian and open with a four-byte magic and a
//! `u32` version. Loading validates structure through the same paths as
//! in-memory construction, so a corrupt or hand-edited file fails with a
//! diagnostic rather than producing a quietly wrong model. A line-oriented
//! plain-text import exists for writing tiny models by hand.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ann::{AnnError, AnnIndex};
use crate::matching::{MatchError, QueryFeature, QueryImage};
use crate::model::{
    ClusterId, Clustering, ClusteringMode, Descriptor, ImageId, ModelError, ModelImage,
    NearestNeighborTable, Point3D, PointId, SceneModel, View, ViewId,
};
use crate::pnp::CameraPose;
use crate::synth::{GroundTruthQuery, QueryPlacement, RepetitionTag, SynthWorld};

pub const FORMAT_VERSION: u32 = 1;

const MAGIC_POINTS: &[u8; 4] = b"LPTS";
const MAGIC_VIEWS: &[u8; 4] = b"LVWS";
const MAGIC_IMAGES: &[u8; 4] = b"LIMG";
const MAGIC_NN: &[u8; 4] = b"LNNT";
const MAGIC_INDEX: &[u8; 4] = b"LIDX";
const MAGIC_QUERIES: &[u8; 4] = b"LQRY";

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ann(#[from] AnnError),
    #[error(transparent)]
    Query(#[from] MatchError),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{artifact} is stale: it was built from different view data (re-run the build)")]
    Stale { artifact: String },
}

fn format_err(path: &Path, detail: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Primitive readers with bounds discipline

fn read_magic(cur: &mut Cursor<&[u8]>, magic: &[u8; 4], path: &Path) -> Result<(), IoError> {
    let mut got = [0u8; 4];
    cur.read_exact(&mut got).map_err(|_| format_err(path, "file too short for magic"))?;
    if &got != magic {
        return Err(format_err(
            path,
            format!("bad magic {:?}, expected {:?}", got, std::str::from_utf8(magic).unwrap()),
        ));
    }
    let version = cur.read_u32::<LE>().map_err(|_| format_err(path, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    Ok(())
}

/// Rejects counts that could not possibly fit in the remaining bytes, so a
/// corrupt length field fails fast instead of attempting a huge allocation.
fn checked_count(
    cur: &Cursor<&[u8]>,
    count: u64,
    min_record_bytes: usize,
    path: &Path,
) -> Result<usize, IoError> {
    let remaining = cur.get_ref().len() as u64 - cur.position();
    if count.saturating_mul(min_record_bytes as u64) > remaining {
        return Err(format_err(
            path,
            format!("record count {count} exceeds what the file can hold"),
        ));
    }
    Ok(count as usize)
}

fn read_f64s<const N: usize>(cur: &mut Cursor<&[u8]>, path: &Path) -> Result<[f64; N], IoError> {
    let mut out = [0.0; N];
    for v in &mut out {
        *v = cur.read_f64::<LE>().map_err(|_| format_err(path, "truncated float block"))?;
    }
    Ok(out)
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// Model directory

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    descriptor_dim: usize,
    num_points: usize,
    num_views: usize,
    num_images: usize,
    clustering_mode: ClusteringMode,
    num_clusters: u32,
}

/// Writes a model directory. Returns the SHA-256 of `views.bin`, which keys
/// every derived artifact.
pub fn save_model(model: &SceneModel, dir: &Path) -> Result<[u8; 32], IoError> {
    fs::create_dir_all(dir)?;
    let header = ModelHeader {
        format: "scene-model".into(),
        version: FORMAT_VERSION,
        descriptor_dim: model.descriptor_dim(),
        num_points: model.points().len(),
        num_views: model.views().len(),
        num_images: model.images().len(),
        clustering_mode: model.clustering().mode,
        num_clusters: model.clustering().num_clusters,
    };
    fs::write(dir.join("model.json"), serde_json::to_vec_pretty(&header)?)?;

    let mut buf = Vec::new();
    buf.write_all(MAGIC_POINTS)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u64::<LE>(model.points().len() as u64)?;
    for p in model.points() {
        buf.write_u32::<LE>(p.id.0)?;
        for c in &p.position {
            buf.write_f64::<LE>(*c)?;
        }
        buf.write_u32::<LE>(p.view_ids.len() as u32)?;
        for v in &p.view_ids {
            buf.write_u32::<LE>(v.0)?;
        }
    }
    fs::write(dir.join("points.bin"), &buf)?;

    buf.clear();
    buf.write_all(MAGIC_VIEWS)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u32::<LE>(model.descriptor_dim() as u32)?;
    buf.write_u64::<LE>(model.views().len() as u64)?;
    for v in model.views() {
        buf.write_u32::<LE>(v.id.0)?;
        buf.write_u32::<LE>(v.point.0)?;
        buf.write_u32::<LE>(v.image.0)?;
        buf.write_f64::<LE>(v.pixel.x)?;
        buf.write_f64::<LE>(v.pixel.y)?;
        for &c in v.descriptor.as_slice() {
            buf.write_f32::<LE>(c)?;
        }
    }
    let views_hash = sha256(&buf);
    fs::write(dir.join("views.bin"), &buf)?;

    buf.clear();
    buf.write_all(MAGIC_IMAGES)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u64::<LE>(model.images().len() as u64)?;
    for img in model.images() {
        buf.write_u32::<LE>(img.id.0)?;
        buf.write_u32::<LE>(img.cluster.0)?;
        buf.write_u32::<LE>(img.width)?;
        buf.write_u32::<LE>(img.height)?;
        for r in 0..3 {
            for c in 0..3 {
                buf.write_f64::<LE>(img.pose.rotation[(r, c)])?;
            }
        }
        for c in &img.pose.center {
            buf.write_f64::<LE>(*c)?;
        }
        buf.write_f64::<LE>(img.pose.focal)?;
        buf.write_f64::<LE>(img.pose.principal_point.x)?;
        buf.write_f64::<LE>(img.pose.principal_point.y)?;
        buf.write_u32::<LE>(img.view_ids.len() as u32)?;
        for v in &img.view_ids {
            buf.write_u32::<LE>(v.0)?;
        }
    }
    fs::write(dir.join("images.bin"), &buf)?;

    buf.clear();
    buf.write_all(MAGIC_NN)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_all(&views_hash)?;
    buf.write_u64::<LE>(model.nn_table().len() as u64)?;
    for (view, entry) in model.nn_table().iter() {
        buf.write_u32::<LE>(view.0)?;
        match entry {
            Some((nn, dist)) => {
                buf.write_u8(1)?;
                buf.write_u32::<LE>(nn.0)?;
                buf.write_f32::<LE>(*dist)?;
            }
            None => buf.write_u8(0)?,
        }
    }
    fs::write(dir.join("nn_table.bin"), &buf)?;
    Ok(views_hash)
}

/// SHA-256 of the view data a derived artifact should have been built from.
pub fn views_file_hash(model_dir: &Path) -> Result<[u8; 32], IoError> {
    Ok(sha256(&fs::read(model_dir.join("views.bin"))?))
}

pub fn load_model(dir: &Path) -> Result<SceneModel, IoError> {
    let header_path = dir.join("model.json");
    let header: ModelHeader = serde_json::from_slice(&fs::read(&header_path)?)?;
    if header.format != "scene-model" {
        return Err(format_err(&header_path, format!("unexpected format '{}'", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(format_err(
            &header_path,
            format!("unsupported format version {}", header.version),
        ));
    }

    // points.bin
    let path = dir.join("points.bin");
    let bytes = fs::read(&path)?;
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_POINTS, &path)?;
    let count = cur.read_u64::<LE>().map_err(|_| format_err(&path, "missing point count"))?;
    let count = checked_count(cur, count, 4 + 24 + 4, &path)?;
    if count != header.num_points {
        return Err(format_err(&path, "point count disagrees with model.json"));
    }
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated point"))?;
        let [x, y, z] = read_f64s(cur, &path)?;
        let n = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated point"))? as u64;
        let n = checked_count(cur, n, 4, &path)?;
        let mut view_ids = Vec::with_capacity(n);
        for _ in 0..n {
            view_ids.push(ViewId(
                cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated view list"))?,
            ));
        }
        points.push(Point3D { id: PointId(id), position: Vector3::new(x, y, z), view_ids });
    }

    // views.bin
    let path = dir.join("views.bin");
    let bytes = fs::read(&path)?;
    let views_hash = sha256(&bytes);
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_VIEWS, &path)?;
    let dim =
        cur.read_u32::<LE>().map_err(|_| format_err(&path, "missing descriptor dim"))? as usize;
    if dim != header.descriptor_dim {
        return Err(format_err(&path, "descriptor dimension disagrees with model.json"));
    }
    let count = cur.read_u64::<LE>().map_err(|_| format_err(&path, "missing view count"))?;
    let count = checked_count(cur, count, 12 + 16 + 4 * dim, &path)?;
    if count != header.num_views {
        return Err(format_err(&path, "view count disagrees with model.json"));
    }
    let mut views = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated view"))?;
        let point = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated view"))?;
        let image = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated view"))?;
        let [px, py] = read_f64s(cur, &path)?;
        let mut desc = vec![0.0f32; dim];
        for c in &mut desc {
            *c = cur.read_f32::<LE>().map_err(|_| format_err(&path, "truncated descriptor"))?;
        }
        views.push(View {
            id: ViewId(id),
            point: PointId(point),
            image: ImageId(image),
            pixel: Vector2::new(px, py),
            descriptor: Descriptor::new(desc)?,
        });
    }

    // images.bin
    let path = dir.join("images.bin");
    let bytes = fs::read(&path)?;
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_IMAGES, &path)?;
    let count = cur.read_u64::<LE>().map_err(|_| format_err(&path, "missing image count"))?;
    let count = checked_count(cur, count, 16 + 9 * 8 + 3 * 8 + 24 + 4, &path)?;
    if count != header.num_images {
        return Err(format_err(&path, "image count disagrees with model.json"));
    }
    let mut images = Vec::with_capacity(count);
    let mut assignment = BTreeMap::new();
    for _ in 0..count {
        let id = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated image"))?;
        let cluster = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated image"))?;
        let width = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated image"))?;
        let height = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated image"))?;
        let r = read_f64s::<9>(cur, &path)?;
        let [cx, cy, cz] = read_f64s(cur, &path)?;
        let [focal, ppx, ppy] = read_f64s(cur, &path)?;
        let n = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated image"))? as u64;
        let n = checked_count(cur, n, 4, &path)?;
        let mut view_ids = Vec::with_capacity(n);
        for _ in 0..n {
            view_ids.push(ViewId(
                cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated view list"))?,
            ));
        }
        let pose = CameraPose {
            rotation: Matrix3::from_row_slice(&r),
            center: Vector3::new(cx, cy, cz),
            focal,
            principal_point: Vector2::new(ppx, ppy),
        };
        assignment.insert(ImageId(id), ClusterId(cluster));
        images.push(ModelImage {
            id: ImageId(id),
            cluster: ClusterId(cluster),
            width,
            height,
            pose,
            view_ids,
        });
    }
    let clustering = Clustering::new(header.clustering_mode, header.num_clusters, assignment)?;

    // nn_table.bin
    let path = dir.join("nn_table.bin");
    let bytes = fs::read(&path)?;
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_NN, &path)?;
    let mut stored_hash = [0u8; 32];
    cur.read_exact(&mut stored_hash).map_err(|_| format_err(&path, "missing view hash"))?;
    if stored_hash != views_hash {
        return Err(IoError::Stale { artifact: "nn_table.bin".into() });
    }
    let count = cur.read_u64::<LE>().map_err(|_| format_err(&path, "missing entry count"))?;
    let count = checked_count(cur, count, 5, &path)?;
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let view = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated entry"))?;
        let flag = cur.read_u8().map_err(|_| format_err(&path, "truncated entry"))?;
        let entry = match flag {
            0 => None,
            1 => {
                let nn = cur.read_u32::<LE>().map_err(|_| format_err(&path, "truncated entry"))?;
                let dist =
                    cur.read_f32::<LE>().map_err(|_| format_err(&path, "truncated entry"))?;
                Some((ViewId(nn), dist))
            }
            other => {
                return Err(format_err(&path, format!("bad presence flag {other}")));
            }
        };
        if entries.insert(ViewId(view), entry).is_some() {
            return Err(format_err(&path, format!("duplicate entry for view {view}")));
        }
    }
    let nn_table = NearestNeighborTable::from_entries(entries);

    Ok(SceneModel::with_nn_table(
        header.descriptor_dim,
        points,
        views,
        images,
        clustering,
        nn_table,
    )?)
}

// ---------------------------------------------------------------------------
// Search index

/// Saves an index stamped with the hash of the view data it was built from.
pub fn save_index(index: &AnnIndex, views_hash: &[u8; 32], path: &Path) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.write_all(MAGIC_INDEX)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_all(views_hash)?;
    index.write_to(&mut buf)?;
    fs::write(path, &buf)?;
    Ok(())
}

/// Loads an index and the view hash it was stamped with.
pub fn load_index(path: &Path) -> Result<(AnnIndex, [u8; 32]), IoError> {
    let bytes = fs::read(path)?;
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_INDEX, path)?;
    let mut hash = [0u8; 32];
    cur.read_exact(&mut hash).map_err(|_| format_err(path, "missing view hash"))?;
    let index = AnnIndex::read_from(cur)?;
    Ok((index, hash))
}

/// Loads an index, rejecting it if it was built from different view data.
pub fn load_index_checked(path: &Path, views_hash: &[u8; 32]) -> Result<AnnIndex, IoError> {
    let (index, stored) = load_index(path)?;
    if &stored != views_hash {
        return Err(IoError::Stale { artifact: path.display().to_string() });
    }
    Ok(index)
}

// ---------------------------------------------------------------------------
// Queries

pub fn save_queries(queries: &[QueryImage], path: &Path) -> Result<(), IoError> {
    let dim = queries
        .iter()
        .flat_map(|q| q.features.first())
        .map(|f| f.descriptor.dim())
        .next()
        .unwrap_or(0);
    for q in queries {
        q.validate()?;
        if let Some(f) = q.features.first() {
            if f.descriptor.dim() != dim {
                return Err(format_err(
                    path,
                    format!("query {} descriptor dimension differs from the first query", q.id),
                ));
            }
        }
    }
    let mut buf = Vec::new();
    buf.write_all(MAGIC_QUERIES)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u32::<LE>(dim as u32)?;
    buf.write_u64::<LE>(queries.len() as u64)?;
    for q in queries {
        buf.write_u32::<LE>(q.id)?;
        buf.write_u32::<LE>(q.width)?;
        buf.write_u32::<LE>(q.height)?;
        buf.write_f64::<LE>(q.focal)?;
        buf.write_f64::<LE>(q.principal_point.x)?;
        buf.write_f64::<LE>(q.principal_point.y)?;
        buf.write_u32::<LE>(q.features.len() as u32)?;
        for f in &q.features {
            buf.write_u32::<LE>(f.id)?;
            buf.write_f64::<LE>(f.pixel.x)?;
            buf.write_f64::<LE>(f.pixel.y)?;
            for &c in f.descriptor.as_slice() {
                buf.write_f32::<LE>(c)?;
            }
        }
    }
    fs::write(path, &buf)?;
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryImage>, IoError> {
    let bytes = fs::read(path)?;
    let cur = &mut Cursor::new(bytes.as_slice());
    read_magic(cur, MAGIC_QUERIES, path)?;
    let dim = cur.read_u32::<LE>().map_err(|_| format_err(path, "missing dim"))? as usize;
    let count = cur.read_u64::<LE>().map_err(|_| format_err(path, "missing query count"))?;
    let count = checked_count(cur, count, 12 + 24 + 4, path)?;
    let mut queries = Vec::with_capacity(count);
    for _ in 0..count {
        let id = cur.read_u32::<LE>().map_err(|_| format_err(path, "truncated query"))?;
        let width = cur.read_u32::<LE>().map_err(|_| format_err(path, "truncated query"))?;
        let height = cur.read_u32::<LE>().map_err(|_| format_err(path, "truncated query"))?;
        let [focal, ppx, ppy] = read_f64s(cur, path)?;
        let n = cur.read_u32::<LE>().map_err(|_| format_err(path, "truncated query"))? as u64;
        let n = checked_count(cur, n, 4 + 16 + 4 * dim, path)?;
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let fid = cur.read_u32::<LE>().map_err(|_| format_err(path, "truncated feature"))?;
            let [px, py] = read_f64s(cur, path)?;
            let mut desc = vec![0.0f32; dim];
            for c in &mut desc {
                *c = cur.read_f32::<LE>().map_err(|_| format_err(path, "truncated descriptor"))?;
            }
            features.push(QueryFeature {
                id: fid,
                pixel: Vector2::new(px, py),
                descriptor: Descriptor::new(desc)?,
            });
        }
        let query = QueryImage {
            id,
            width,
            height,
            focal,
            principal_point: Vector2::new(ppx, ppy),
            features,
        };
        query.validate()?;
        queries.push(query);
    }
    Ok(queries)
}

// ---------------------------------------------------------------------------
// Ground truth (JSON)

#[derive(Debug, Serialize, Deserialize)]
struct GtQueryJson {
    query_id: u32,
    /// World-to-camera rotation, row-major.
    rotation: [[f64; 3]; 3],
    center: [f64; 3],
    focal: f64,
    principal_point: [f64; 2],
    /// Per feature: source point id, or null for distractors.
    provenance: Vec<Option<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RepeatedPointJson {
    point: u32,
    group: u32,
    copy: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthFile {
    version: u32,
    queries: Vec<GtQueryJson>,
    #[serde(default)]
    repeated_points: Vec<RepeatedPointJson>,
    #[serde(default)]
    placements: Vec<QueryPlacement>,
    #[serde(default)]
    dropped_points: usize,
}

pub fn save_ground_truth(world: &SynthWorld, path: &Path) -> Result<(), IoError> {
    let file = GroundTruthFile {
        version: FORMAT_VERSION,
        queries: world
            .ground_truth
            .iter()
            .map(|gt| {
                let r = &gt.pose.rotation;
                GtQueryJson {
                    query_id: gt.query_id,
                    rotation: [
                        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    ],
                    center: [gt.pose.center.x, gt.pose.center.y, gt.pose.center.z],
                    focal: gt.pose.focal,
                    principal_point: [gt.pose.principal_point.x, gt.pose.principal_point.y],
                    provenance: gt.provenance.iter().map(|p| p.map(|id| id.0)).collect(),
                }
            })
            .collect(),
        repeated_points: world
            .repetition
            .iter()
            .map(|(&point, tag)| RepeatedPointJson {
                point: point.0,
                group: tag.group,
                copy: tag.copy,
            })
            .collect(),
        placements: world.placements.clone(),
        dropped_points: world.dropped_points,
    };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Ground truth as loaded from disk, decoupled from any generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthData {
    pub queries: Vec<GroundTruthQuery>,
    pub repetition: BTreeMap<PointId, RepetitionTag>,
    pub placements: Vec<QueryPlacement>,
    pub dropped_points: usize,
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthData, IoError> {
    let file: GroundTruthFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {}", file.version)));
    }
    let queries = file
        .queries
        .into_iter()
        .map(|q| GroundTruthQuery {
            query_id: q.query_id,
            pose: CameraPose {
                rotation: Matrix3::new(
                    q.rotation[0][0],
                    q.rotation[0][1],
                    q.rotation[0][2],
                    q.rotation[1][0],
                    q.rotation[1][1],
                    q.rotation[1][2],
                    q.rotation[2][0],
                    q.rotation[2][1],
                    q.rotation[2][2],
                ),
                center: Vector3::new(q.center[0], q.center[1], q.center[2]),
                focal: q.focal,
                principal_point: Vector2::new(q.principal_point[0], q.principal_point[1]),
            },
            provenance: q.provenance.into_iter().map(|p| p.map(PointId)).collect(),
        })
        .collect();
    Ok(GroundTruthData {
        queries,
        repetition: file
            .repeated_points
            .into_iter()
            .map(|r| (PointId(r.point), RepetitionTag { group: r.group, copy: r.copy }))
            .collect(),
        placements: file.placements,
        dropped_points: file.dropped_points,
    })
}

// ---------------------------------------------------------------------------
// Whole worlds

/// Writes `model/`, `queries.bin`, and `ground_truth.json` under `dir`.
pub fn save_world(world: &SynthWorld, dir: &Path) -> Result<[u8; 32], IoError> {
    fs::create_dir_all(dir)?;
    let hash = save_model(&world.model, &dir.join("model"))?;
    save_queries(&world.queries, &dir.join("queries.bin"))?;
    save_ground_truth(world, &dir.join("ground_truth.json"))?;
    Ok(hash)
}

pub fn load_world(dir: &Path) -> Result<SynthWorld, IoError> {
    let model = load_model(&dir.join("model"))?;
    let queries = load_queries(&dir.join("queries.bin"))?;
    let gt = load_ground_truth(&dir.join("ground_truth.json"))?;
    Ok(SynthWorld {
        model,
        queries,
        ground_truth: gt.queries,
        repetition: gt.repetition,
        placements: gt.placements,
        dropped_points: gt.dropped_points,
    })
}

// ---------------------------------------------------------------------------
// Plain-text import

/// Imports a model from a line-oriented text file, convenient for writing
/// tiny scenes by hand:
///
/// ```text
/// # comment
/// dim 2
/// image <id> <cluster> <width> <height> <focal> <cx> <cy> <r00..r22> <tx> <ty> <tz>
/// point <id> <x> <y> <z>
/// view <id> <point> <image> <px> <py> <d0> <d1> ...
/// ```
///
/// Clusters are taken as given (explicit mode) and numbered up to the
/// largest id mentioned. The nearest-neighbor table is computed on load.
pub fn import_text_model(path: &Path) -> Result<SceneModel, IoError> {
    let text = fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut points = Vec::new();
    let mut views = Vec::new();
    let mut images = Vec::new();
    let mut point_views: BTreeMap<PointId, Vec<ViewId>> = BTreeMap::new();
    let mut image_views: BTreeMap<ImageId, Vec<ViewId>> = BTreeMap::new();

    let bad =
        |line_no: usize, detail: String| format_err(path, format!("line {line_no}: {detail}"));
    let parse = |tok: &str, what: &str, line_no: usize| -> Result<f64, IoError> {
        tok.parse::<f64>().map_err(|_| bad(line_no, format!("bad {what} '{tok}'")))
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "dim" => {
                if tokens.len() != 2 {
                    return Err(bad(line_no, "expected: dim <n>".into()));
                }
                dim = Some(
                    tokens[1]
                        .parse()
                        .map_err(|_| bad(line_no, format!("bad dimension '{}'", tokens[1])))?,
                );
            }
            "image" => {
                if tokens.len() != 20 {
                    return Err(bad(
                        line_no,
                        format!("image record needs 20 tokens, got {}", tokens.len()),
                    ));
                }
                let id = tokens[1]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad image id '{}'", tokens[1])))?;
                let cluster = tokens[2]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad cluster id '{}'", tokens[2])))?;
                let width = tokens[3]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad width '{}'", tokens[3])))?;
                let height = tokens[4]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad height '{}'", tokens[4])))?;
                let focal = parse(tokens[5], "focal", line_no)?;
                let ppx = parse(tokens[6], "principal point", line_no)?;
                let ppy = parse(tokens[7], "principal point", line_no)?;
                let mut r = [0.0; 9];
                for (j, v) in r.iter_mut().enumerate() {
                    *v = parse(tokens[8 + j], "rotation entry", line_no)?;
                }
                let tx = parse(tokens[17], "center", line_no)?;
                let ty = parse(tokens[18], "center", line_no)?;
                let tz = parse(tokens[19], "center", line_no)?;
                images.push(ModelImage {
                    id: ImageId(id),
                    cluster: ClusterId(cluster),
                    width,
                    height,
                    pose: CameraPose {
                        rotation: Matrix3::from_row_slice(&r),
                        center: Vector3::new(tx, ty, tz),
                        focal,
                        principal_point: Vector2::new(ppx, ppy),
                    },
                    view_ids: Vec::new(),
                });
            }
            "point" => {
                if tokens.len() != 5 {
                    return Err(bad(line_no, "expected: point <id> <x> <y> <z>".into()));
                }
                let id = tokens[1]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad point id '{}'", tokens[1])))?;
                let x = parse(tokens[2], "coordinate", line_no)?;
                let y = parse(tokens[3], "coordinate", line_no)?;
                let z = parse(tokens[4], "coordinate", line_no)?;
                points.push(Point3D {
                    id: PointId(id),
                    position: Vector3::new(x, y, z),
                    view_ids: Vec::new(),
                });
            }
            "view" => {
                let d = dim.ok_or_else(|| {
                    bad(line_no, "dim must be declared before the first view".into())
                })?;
                if tokens.len() != 6 + d {
                    return Err(bad(
                        line_no,
                        format!("view record needs {} tokens, got {}", 6 + d, tokens.len()),
                    ));
                }
                let id = tokens[1]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad view id '{}'", tokens[1])))?;
                let point = tokens[2]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad point id '{}'", tokens[2])))?;
                let image = tokens[3]
                    .parse::<u32>()
                    .map_err(|_| bad(line_no, format!("bad image id '{}'", tokens[3])))?;
                let px = parse(tokens[4], "pixel", line_no)?;
                let py = parse(tokens[5], "pixel", line_no)?;
                let mut desc = Vec::with_capacity(d);
                for t in &tokens[6..] {
                    desc.push(parse(t, "descriptor component", line_no)? as f32);
                }
                let vid = ViewId(id);
                point_views.entry(PointId(point)).or_default().push(vid);
                image_views.entry(ImageId(image)).or_default().push(vid);
                views.push(View {
                    id: vid,
                    point: PointId(point),
                    image: ImageId(image),
                    pixel: Vector2::new(px, py),
                    descriptor: Descriptor::new(desc)?,
                });
            }
            other => {
                return Err(bad(line_no, format!("unknown record type '{other}'")));
            }
        }
    }

    let dim = dim.ok_or_else(|| format_err(path, "missing 'dim' declaration"))?;
    for p in &mut points {
        if let Some(vs) = point_views.get(&p.id) {
            p.view_ids = vs.clone();
        }
    }
    for img in &mut images {
        if let Some(vs) = image_views.get(&img.id) {
            img.view_ids = vs.clone();
        }
    }
    let num_clusters = images.iter().map(|i| i.cluster.0).max().map_or(0, |m| m + 1);
    let assignment = images.iter().map(|i| (i.id, i.cluster)).collect();
    let clustering = Clustering::new(ClusteringMode::Explicit, num_clusters, assignment)?;
    Ok(SceneModel::new(dim, points, views, images, clustering)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::DEFAULT_LEAF_SIZE;
    use crate::synth::{generate_world, SynthConfig};

    fn tiny_world() -> SynthWorld {
        generate_world(&SynthConfig {
            num_points: 120,
            num_model_images: 24,
            num_query_images: 3,
            descriptor_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn world_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let world = tiny_world();
        save_world(&world, dir.path()).unwrap();
        let loaded = load_world(dir.path()).unwrap();
        assert_eq!(world, loaded);
    }

    #[test]
    fn saved_index_round_trips_and_checks_its_hash() {
        let dir = tempfile::tempdir().unwrap();
        let world = tiny_world();
        let hash = save_world(&world, dir.path()).unwrap();
        assert_eq!(hash, views_file_hash(&dir.path().join("model")).unwrap());
        let index = AnnIndex::for_model(&world.model, DEFAULT_LEAF_SIZE, 0).unwrap();
        let index_path = dir.path().join("index.bin");
        save_index(&index, &hash, &index_path).unwrap();
        let loaded = load_index_checked(&index_path, &hash).unwrap();
        assert_eq!(index, loaded);
        let other = [0u8; 32];
        assert!(matches!(load_index_checked(&index_path, &other), Err(IoError::Stale { .. })));
    }

    #[test]
    fn truncated_file_names_the_culprit() {
        let dir = tempfile::tempdir().unwrap();
        let world = tiny_world();
        save_world(&world, dir.path()).unwrap();
        let path = dir.path().join("model").join("points.bin");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_model(&dir.path().join("model")).unwrap_err();
        assert!(err.to_string().contains("points.bin"), "unhelpful error: {err}");
    }

    #[test]
    fn edited_view_data_marks_derived_tables_stale() {
        let dir = tempfile::tempdir().unwrap();
        let world = tiny_world();
        save_world(&world, dir.path()).unwrap();
        let path = dir.path().join("model").join("views.bin");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01; // perturb one descriptor byte
        fs::write(&path, &bytes).unwrap();
        let err = load_model(&dir.path().join("model")).unwrap_err();
        assert!(matches!(err, IoError::Stale { .. }), "expected staleness, got: {err}");
    }

    #[test]
    fn garbage_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.bin");
        fs::write(&path, b"not a query file at all").unwrap();
        let err = load_queries(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "unexpected error: {err}");
    }

    #[test]
    fn implausible_record_count_fails_fast() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.bin");
        let mut buf = Vec::new();
        buf.write_all(MAGIC_QUERIES).unwrap();
        buf.write_u32::<LE>(FORMAT_VERSION).unwrap();
        buf.write_u32::<LE>(4).unwrap(); // dim
        buf.write_u64::<LE>(u64::MAX).unwrap(); // absurd count
        fs::write(&path, &buf).unwrap();
        let err = load_queries(&path).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "unexpected error: {err}");
    }

    #[test]
    fn text_import_builds_a_validated_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        fs::write(
            &path,
            "# two cameras, two points, two views each\n\
             dim 2\n\
             image 0 0 64 64 100.0 32.0 32.0  1 0 0  0 1 0  0 0 1  0 0 0\n\
             image 1 1 64 64 100.0 32.0 32.0  1 0 0  0 1 0  0 0 1  0.5 0 0\n\
             point 0  1.0 1.0 10.0\n\
             point 1  -1.0 -1.0 10.0\n\
             view 0 0 0  42.0 42.0  0.1 0.9\n\
             view 1 0 1  37.0 42.0  0.1 0.9\n\
             view 2 1 0  22.0 22.0  0.9 0.1\n\
             view 3 1 1  17.0 22.0  0.9 0.1\n",
        )
        .unwrap();
        let model = import_text_model(&path).unwrap();
        assert_eq!(model.points().len(), 2);
        assert_eq!(model.views().len(), 4);
        assert_eq!(model.images().len(), 2);
        assert_eq!(model.clustering().num_clusters, 2);
        // NN table was computed: view 0's nearest same-cluster rival is view 2.
        let entry = *model.nn_table().get(ViewId(0)).unwrap();
        assert_eq!(entry.unwrap().0, ViewId(2));
    }

    #[test]
    fn text_import_reports_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        fs::write(&path, "dim 2\npoint zero 1 2 3\n").unwrap();
        let err = import_text_model(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "unexpected error: {err}");
    }
}
