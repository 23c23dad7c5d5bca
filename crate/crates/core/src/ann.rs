//! Approximate nearest-neighbor search over descriptor vectors.
//!
//! A single kd-tree holds every descriptor; queries run best-bin-first with a
//! bounded number of leaf visits, so accuracy degrades gracefully as the
//! budget shrinks. An exact linear-scan oracle lives alongside for tests and
//! for the exhaustive baseline.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{l2_sq, SceneModel};

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("cannot build an index over zero descriptors")]
    Empty,
    #[error("query has dimension {got}, index stores dimension {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("descriptor data length {len} is not {rows} rows of dimension {dim}")]
    BadShape { len: usize, rows: usize, dim: usize },
    #[error("non-finite component in {0}")]
    NonFinite(String),
    #[error("corrupt index data: {0}")]
    Corrupt(String),
}

/// How hard a query may work: visit at most `max_leaves_checked` leaves while
/// collecting `k` neighbors (plus one extra, the ratio-test denominator).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchBudget {
    pub max_leaves_checked: usize,
    pub k: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self { max_leaves_checked: 128, k: 5 }
    }
}

impl SearchBudget {
    /// A budget large enough to visit every leaf: the search becomes exact.
    pub fn exact(k: usize) -> Self {
        Self { max_leaves_checked: usize::MAX, k }
    }
}

/// One search result. `distance` is the L2 descriptor distance; result lists
/// are sorted ascending by `(distance, id)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub distance: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split {
        dim: u32,
        value: f32,
        left: u32,
        right: u32,
    },
    /// Range into `order`.
    Leaf {
        start: u32,
        end: u32,
    },
}

/// Candidate ordering used everywhere: ascending distance, ties to the lower
/// id. Distances are finite by construction, so `total_cmp` is a plain
/// numeric comparison here.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    dist_sq: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq.total_cmp(&other.dist_sq).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    bound_sq: f32,
    node: u32,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound_sq.total_cmp(&other.bound_sq).then(self.node.cmp(&other.node))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// kd-tree over flat descriptor rows. Immutable after build; queries share it
/// freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    dim: usize,
    leaf_size: usize,
    ids: Vec<u32>,
    data: Vec<f32>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
    num_leaves: usize,
}

pub const DEFAULT_LEAF_SIZE: usize = 16;

impl AnnIndex {
    /// Builds a tree over `rows` descriptors stored contiguously in `data`
    /// (`data[r*dim..(r+1)*dim]` belongs to `ids[r]`). Splits use the
    /// largest-spread dimension with the median as pivot; equal-spread ties
    /// are broken by the seeded generator, so the tree is a pure function of
    /// (data, ids, leaf_size, seed).
    pub fn build(
        dim: usize,
        ids: Vec<u32>,
        data: Vec<f32>,
        leaf_size: usize,
        seed: u64,
    ) -> Result<Self, AnnError> {
        if ids.is_empty() || dim == 0 {
            return Err(AnnError::Empty);
        }
        assert!(leaf_size >= 1, "leaf_size must be at least 1");
        if data.len() != ids.len() * dim {
            return Err(AnnError::BadShape { len: data.len(), rows: ids.len(), dim });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AnnError::NonFinite(format!("descriptor row {}", i / dim)));
        }
        let mut order: Vec<u32> = (0..ids.len() as u32).collect();
        let mut nodes = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root =
            build_node(&mut nodes, &mut order, 0, ids.len(), &ids, &data, dim, leaf_size, &mut rng);
        let num_leaves = nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count();
        Ok(Self { dim, leaf_size, ids, data, order, nodes, root, num_leaves })
    }

    /// Index over every view descriptor of a model, keyed by view id.
    pub fn for_model(model: &SceneModel, leaf_size: usize, seed: u64) -> Result<Self, AnnError> {
        let ids: Vec<u32> = model.views().iter().map(|v| v.id.0).collect();
        let mut data = Vec::with_capacity(ids.len() * model.descriptor_dim());
        for v in model.views() {
            data.extend_from_slice(v.descriptor.as_slice());
        }
        Self::build(model.descriptor_dim(), ids, data, leaf_size, seed)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    /// Best-bin-first k+1-nearest search. Nodes are expanded in ascending
    /// order of a lower bound on their distance to the query (the splitting
    /// planes crossed so far); each visited leaf is scanned exhaustively. The
    /// search ends when the budget is spent or when the smallest outstanding
    /// bound strictly exceeds the current worst kept distance — at that point
    /// no unvisited subtree can improve the result, so a budget of
    /// `num_leaves()` makes the search exact.
    pub fn knn(&self, query: &[f32], budget: &SearchBudget) -> Result<Vec<Neighbor>, AnnError> {
        if query.len() != self.dim {
            return Err(AnnError::DimMismatch { got: query.len(), expected: self.dim });
        }
        if !query.iter().all(|v| v.is_finite()) {
            return Err(AnnError::NonFinite("query".into()));
        }
        assert!(budget.k >= 1, "k must be at least 1");
        assert!(budget.max_leaves_checked >= 1, "leaf budget must be at least 1");
        let want = budget.k + 1;

        // Max-heap of the best `want` candidates found so far; the top is the
        // current worst and the displacement threshold.
        let mut best: BinaryHeap<Cand> = BinaryHeap::with_capacity(want + 1);
        let mut pending: BinaryHeap<std::cmp::Reverse<Pending>> = BinaryHeap::new();
        pending.push(std::cmp::Reverse(Pending { bound_sq: 0.0, node: self.root }));
        let mut leaves_visited = 0usize;

        while let Some(std::cmp::Reverse(p)) = pending.pop() {
            if leaves_visited >= budget.max_leaves_checked {
                break;
            }
            if best.len() == want && p.bound_sq > best.peek().unwrap().dist_sq {
                // Min-ordered heap: every remaining bound is at least this
                // one. Equal bounds are still explored so the lower-id tie
                // rule holds under full budget.
                break;
            }
            match self.nodes[p.node as usize] {
                Node::Leaf { start, end } => {
                    leaves_visited += 1;
                    for &row in &self.order[start as usize..end as usize] {
                        let r = row as usize;
                        let d = l2_sq(query, &self.data[r * self.dim..(r + 1) * self.dim]);
                        let cand = Cand { dist_sq: d, id: self.ids[r] };
                        if best.len() < want {
                            best.push(cand);
                        } else if cand < *best.peek().unwrap() {
                            best.pop();
                            best.push(cand);
                        }
                    }
                }
                Node::Split { dim, value, left, right } => {
                    let delta = query[dim as usize] - value;
                    let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                    pending.push(std::cmp::Reverse(Pending { bound_sq: p.bound_sq, node: near }));
                    pending.push(std::cmp::Reverse(Pending {
                        bound_sq: p.bound_sq.max(delta * delta),
                        node: far,
                    }));
                }
            }
        }

        let mut out: Vec<Cand> = best.into_vec();
        out.sort_unstable();
        Ok(out.into_iter().map(|c| Neighbor { id: c.id, distance: c.dist_sq.sqrt() }).collect())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.leaf_size as u32)?;
        w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
        for &id in &self.ids {
            w.write_u32::<LittleEndian>(id)?;
        }
        for &v in &self.data {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &o in &self.order {
            w.write_u32::<LittleEndian>(o)?;
        }
        w.write_u64::<LittleEndian>(self.nodes.len() as u64)?;
        w.write_u32::<LittleEndian>(self.root)?;
        for node in &self.nodes {
            match *node {
                Node::Split { dim, value, left, right } => {
                    w.write_u8(0)?;
                    w.write_u32::<LittleEndian>(dim)?;
                    w.write_f32::<LittleEndian>(value)?;
                    w.write_u32::<LittleEndian>(left)?;
                    w.write_u32::<LittleEndian>(right)?;
                }
                Node::Leaf { start, end } => {
                    w.write_u8(1)?;
                    w.write_u32::<LittleEndian>(start)?;
                    w.write_u32::<LittleEndian>(end)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, AnnError> {
        let bad = |e: std::io::Error| AnnError::Corrupt(e.to_string());
        let dim = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let leaf_size = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
        let n = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        if dim == 0 || n == 0 || leaf_size == 0 {
            return Err(AnnError::Corrupt("zero dimension, row count, or leaf size".into()));
        }
        if n.saturating_mul(dim) > 1 << 32 {
            return Err(AnnError::Corrupt("implausible index size".into()));
        }
        let mut ids = vec![0u32; n];
        for id in &mut ids {
            *id = r.read_u32::<LittleEndian>().map_err(bad)?;
        }
        let mut data = vec![0f32; n * dim];
        for v in &mut data {
            *v = r.read_f32::<LittleEndian>().map_err(bad)?;
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(AnnError::Corrupt(format!("non-finite descriptor in row {}", i / dim)));
        }
        let mut order = vec![0u32; n];
        for o in &mut order {
            *o = r.read_u32::<LittleEndian>().map_err(bad)?;
        }
        let mut seen = vec![false; n];
        for &o in &order {
            if o as usize >= n || seen[o as usize] {
                return Err(AnnError::Corrupt("row order is not a permutation".into()));
            }
            seen[o as usize] = true;
        }
        let node_count = r.read_u64::<LittleEndian>().map_err(bad)? as usize;
        let root = r.read_u32::<LittleEndian>().map_err(bad)?;
        if node_count == 0 || node_count > 2 * n || root as usize >= node_count {
            return Err(AnnError::Corrupt("bad node table header".into()));
        }
        let mut nodes = Vec::with_capacity(node_count);
        let mut num_leaves = 0usize;
        let mut covered = 0usize;
        for _ in 0..node_count {
            match r.read_u8().map_err(bad)? {
                0 => {
                    let d = r.read_u32::<LittleEndian>().map_err(bad)?;
                    let value = r.read_f32::<LittleEndian>().map_err(bad)?;
                    let left = r.read_u32::<LittleEndian>().map_err(bad)?;
                    let right = r.read_u32::<LittleEndian>().map_err(bad)?;
                    if d as usize >= dim
                        || left as usize >= node_count
                        || right as usize >= node_count
                        || !value.is_finite()
                    {
                        return Err(AnnError::Corrupt("split node out of range".into()));
                    }
                    nodes.push(Node::Split { dim: d, value, left, right });
                }
                1 => {
                    let start = r.read_u32::<LittleEndian>().map_err(bad)?;
                    let end = r.read_u32::<LittleEndian>().map_err(bad)?;
                    if start > end || end as usize > n {
                        return Err(AnnError::Corrupt("leaf range out of bounds".into()));
                    }
                    num_leaves += 1;
                    covered += (end - start) as usize;
                    nodes.push(Node::Leaf { start, end });
                }
                t => return Err(AnnError::Corrupt(format!("unknown node tag {t}"))),
            }
        }
        if covered != n {
            return Err(AnnError::Corrupt(format!("leaves cover {covered} of {n} rows")));
        }
        Ok(Self { dim, leaf_size, ids, data, order, nodes, root, num_leaves })
    }
}

#[allow(clippy::too_many_arguments)]
fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    start: usize,
    end: usize,
    ids: &[u32],
    data: &[f32],
    dim: usize,
    leaf_size: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    let count = end - start;
    if count <= leaf_size {
        nodes.push(Node::Leaf { start: start as u32, end: end as u32 });
        return (nodes.len() - 1) as u32;
    }
    // Split on the dimension with the widest spread; among equally wide
    // dimensions pick one at random (seeded) to avoid a systematic bias on
    // grid-like data.
    let mut best_spread = f32::NEG_INFINITY;
    let mut best_dims: Vec<usize> = Vec::new();
    for d in 0..dim {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &row in &order[start..end] {
            let v = data[row as usize * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let spread = hi - lo;
        if spread > best_spread {
            best_spread = spread;
            best_dims.clear();
            best_dims.push(d);
        } else if spread == best_spread {
            best_dims.push(d);
        }
    }
    let split_dim = best_dims[rng.gen_range(0..best_dims.len())];
    order[start..end].sort_unstable_by(|&a, &b| {
        let va = data[a as usize * dim + split_dim];
        let vb = data[b as usize * dim + split_dim];
        va.total_cmp(&vb).then(ids[a as usize].cmp(&ids[b as usize]))
    });
    // Positional median split: both halves shrink strictly, so duplicate
    // coordinates cannot cause unbounded recursion. Rows left of the pivot
    // have coordinate <= value and rows from the pivot on have >= value,
    // which is exactly what the search's plane-distance bound assumes.
    let mid = start + count / 2;
    let value = data[order[mid] as usize * dim + split_dim];
    let placeholder = nodes.len() as u32;
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build_node(nodes, order, start, mid, ids, data, dim, leaf_size, rng);
    let right = build_node(nodes, order, mid, end, ids, data, dim, leaf_size, rng);
    nodes[placeholder as usize] = Node::Split { dim: split_dim as u32, value, left, right };
    placeholder
}

/// Exact k-nearest neighbors by linear scan over arbitrary (id, descriptor)
/// rows; ties broken by lower id. The oracle against which the tree is
/// tested, and the matcher used by the exhaustive baseline.
pub fn brute_force_knn_rows<'a>(
    rows: impl IntoIterator<Item = (u32, &'a [f32])>,
    query: &[f32],
    k: usize,
) -> Vec<Neighbor> {
    let mut cands: Vec<Cand> =
        rows.into_iter().map(|(id, desc)| Cand { dist_sq: l2_sq(query, desc), id }).collect();
    cands.sort_unstable();
    cands.truncate(k);
    cands.into_iter().map(|c| Neighbor { id: c.id, distance: c.dist_sq.sqrt() }).collect()
}

/// Exact k-nearest model views for a query descriptor.
pub fn brute_force_knn(model: &SceneModel, query: &[f32], k: usize) -> Vec<Neighbor> {
    brute_force_knn_rows(model.views().iter().map(|v| (v.id.0, v.descriptor.as_slice())), query, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_rows(n: usize, dim: usize, seed: u64) -> (Vec<u32>, Vec<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids = (0..n as u32).collect();
        let data = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (ids, data)
    }

    #[test]
    fn single_descriptor_index_always_returns_it() {
        let index = AnnIndex::build(3, vec![7], vec![0.1, 0.2, 0.3], 8, 0).unwrap();
        let out = index.knn(&[9.0, 9.0, 9.0], &SearchBudget::exact(5)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].id, 7);
    }

    #[test]
    fn self_queries_return_distance_zero() {
        let (ids, data) = random_rows(1000, 8, 1);
        let index = AnnIndex::build(8, ids, data.clone(), 16, 0).unwrap();
        for r in 0..1000 {
            let q = &data[r * 8..(r + 1) * 8];
            let out = index.knn(q, &SearchBudget::exact(1)).unwrap();
            assert_eq!(out[0].id, r as u32);
            assert_eq!(out[0].distance, 0.0);
        }
    }

    #[test]
    fn full_budget_matches_brute_force() {
        let (ids, data) = random_rows(2000, 8, 2);
        let index = AnnIndex::build(8, ids.clone(), data.clone(), 16, 0).unwrap();
        let budget = SearchBudget { max_leaves_checked: index.num_leaves(), k: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let got = index.knn(&q, &budget).unwrap();
            let want = brute_force_knn_rows(
                ids.iter().map(|&i| (i, &data[i as usize * 8..(i as usize + 1) * 8])),
                &q,
                6,
            );
            assert_eq!(got, want);
        }
    }

    #[test]
    fn equidistant_results_prefer_lower_id() {
        // Rows 0 and 1 are mirror images around the query.
        let data = vec![1.0, 0.0, -1.0, 0.0, 5.0, 5.0];
        let index = AnnIndex::build(2, vec![10, 4, 9], data, 1, 0).unwrap();
        let out = index.knn(&[0.0, 0.0], &SearchBudget::exact(1)).unwrap();
        assert_eq!(out[0].id, 4);
        assert_eq!(out[1].id, 10);
        assert_eq!(out[0].distance, out[1].distance);
    }

    #[test]
    fn requesting_more_than_stored_returns_everything_sorted() {
        let (ids, data) = random_rows(10, 4, 4);
        let index = AnnIndex::build(4, ids, data, 4, 0).unwrap();
        let out = index.knn(&[0.0; 4], &SearchBudget::exact(50)).unwrap();
        assert_eq!(out.len(), 10);
        for w in out.windows(2) {
            assert!(w[0].distance <= w[1].distance);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let index = AnnIndex::build(3, vec![0], vec![0.0; 3], 8, 0).unwrap();
        assert!(matches!(
            index.knn(&[0.0; 4], &SearchBudget::default()),
            Err(AnnError::DimMismatch { got: 4, expected: 3 })
        ));
    }

    #[test]
    fn identical_descriptors_build_and_rank_by_id() {
        let data = vec![0.5f32; 20 * 2];
        let index = AnnIndex::build(2, (0..20).collect(), data, 2, 0).unwrap();
        let out = index.knn(&[0.5, 0.5], &SearchBudget::exact(3)).unwrap();
        assert_eq!(out.iter().map(|n| n.id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn first_neighbor_distance_is_monotone_in_budget() {
        let (ids, data) = random_rows(3000, 8, 5);
        let index = AnnIndex::build(8, ids, data, 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut prev = f32::INFINITY;
            let mut budget = 1;
            while budget <= index.num_leaves() {
                let out =
                    index.knn(&q, &SearchBudget { max_leaves_checked: budget, k: 1 }).unwrap();
                assert!(out[0].distance <= prev, "budget {budget} got worse");
                prev = out[0].distance;
                budget *= 2;
            }
        }
    }

    #[test]
    fn serialized_index_round_trips_and_answers_identically() {
        let (ids, data) = random_rows(500, 6, 7);
        let index = AnnIndex::build(6, ids, data, 16, 42).unwrap();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        let reloaded = AnnIndex::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(index, reloaded);
        let q = vec![0.1f32; 6];
        assert_eq!(
            index.knn(&q, &SearchBudget::default()).unwrap(),
            reloaded.knn(&q, &SearchBudget::default()).unwrap()
        );
    }

    #[test]
    fn same_seed_builds_identical_trees() {
        let (ids, data) = random_rows(400, 5, 8);
        let a = AnnIndex::build(5, ids.clone(), data.clone(), 8, 123).unwrap();
        let b = AnnIndex::build(5, ids, data, 8, 123).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_bytes_are_rejected() {
        let (ids, data) = random_rows(50, 4, 9);
        let index = AnnIndex::build(4, ids, data, 8, 0).unwrap();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(matches!(AnnIndex::read_from(&mut bytes.as_slice()), Err(AnnError::Corrupt(_))));
    }

    proptest! {
        #[test]
        fn full_budget_equals_brute_force_on_arbitrary_points(
            rows in proptest::collection::vec(
                proptest::collection::vec(-1.0f32..1.0, 3), 1..60),
            qx in -1.5f32..1.5, qy in -1.5f32..1.5, qz in -1.5f32..1.5,
            k in 1usize..8,
        ) {
            let ids: Vec<u32> = (0..rows.len() as u32).collect();
            let data: Vec<f32> = rows.iter().flatten().copied().collect();
            let index = AnnIndex::build(3, ids.clone(), data.clone(), 2, 0).unwrap();
            let got = index.knn(&[qx, qy, qz], &SearchBudget::exact(k)).unwrap();
            let want = brute_force_knn_rows(
                ids.iter().map(|&i| (i, &data[i as usize * 3..(i as usize + 1) * 3])),
                &[qx, qy, qz],
                k + 1,
            );
            prop_assert_eq!(got, want);
        }
    }
}
