//! Embedded deformation graphs.
//!
//! A graph is a set of nodes sampled on a surface. Each node carries an affine
//! motion `(A, b)` acting as `p -> A (p - g) + g + b`, and every vertex blends
//! the motions of a few nearby nodes with normalized skinning weights.

mod serial;

pub use serial::{decode_f64s, encode_f64s, GraphDocument, MotionDocument};

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use rayon::prelude::*;

use crate::linalg::polar_rotation;
use crate::mesh::{EdgeGraph, TriMesh};
use crate::{Error, Mat3, Result, Vec3};

/// Default number of skinning neighbours per vertex.
pub const DEFAULT_SKIN_NEIGHBORS: usize = 4;

/// Parameters per node when motions are packed into a flat vector.
pub const NODE_PARAMS: usize = 12;

/// Smallest determinant of a blended matrix accepted by
/// [`decompose_vertex_motion`].
pub const MIN_BLEND_DET: f64 = 1e-9;

/// Default node budget for a mesh with `vertex_count` vertices.
pub fn default_node_count(vertex_count: usize, vertices_per_node: f64) -> usize {
    let raw = (vertex_count as f64 / vertices_per_node).floor() as usize;
    raw.clamp(16, 512).min(vertex_count)
}

/// Per-vertex skinning rows: `(node, weight)` pairs summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningWeights {
    pub k: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Support radius of each vertex (distance to the `k+1`-th node).
    pub radius: Vec<f64>,
}

impl SkinningWeights {
    pub fn row(&self, v: usize) -> &[(usize, f64)] {
        &self.rows[v]
    }
}

/// Nodes sampled on a mesh, their neighbour relation and the skinning of
/// the mesh vertices onto them.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformGraph {
    nodes: Vec<Vec3>,
    node_vertices: Vec<usize>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    weights: SkinningWeights,
}

impl DeformGraph {
    /// Builds a graph from nodes placed on the given vertices.
    pub fn from_node_vertices(mesh: &TriMesh, node_vertices: Vec<usize>, k: usize) -> Result<Self> {
        let graph = EdgeGraph::from_mesh(mesh);
        Self::with_edge_graph(mesh, &graph, node_vertices, k)
    }

    fn with_edge_graph(mesh: &TriMesh, graph: &EdgeGraph, node_vertices: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("skinning needs k >= 1".into()));
        }
        if node_vertices.is_empty() {
            return Err(Error::InvalidArgument("a deformation graph needs at least one node".into()));
        }
        for &v in &node_vertices {
            if v >= mesh.vertex_count() {
                return Err(Error::IndexOutOfRange { index: v, len: mesh.vertex_count() });
            }
        }
        let nodes: Vec<Vec3> = node_vertices.iter().map(|&v| mesh.vertices()[v]).collect();
        let nearest = k_nearest_sources(graph, &node_vertices, k + 1);
        let weights = weights_from_nearest(&nearest, k);

        let mut edge_set = BTreeSet::new();
        // shared influence
        for row in &weights.rows {
            for (i, &(a, _)) in row.iter().enumerate() {
                for &(b, _) in &row[i + 1..] {
                    edge_set.insert((a.min(b), a.max(b)));
                }
            }
        }
        // adjacent geodesic cells
        let (_, label) = graph.dijkstra_multi(&node_vertices);
        for (a, b) in mesh.edges() {
            let (la, lb) = (label[a], label[b]);
            if la != lb && la != usize::MAX && lb != usize::MAX {
                edge_set.insert((la.min(lb), la.max(lb)));
            }
        }
        let edges: Vec<(usize, usize)> = edge_set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self { nodes, node_vertices, edges, neighbors, weights })
    }

    /// Reassembles a graph from stored parts (used by deserialization).
    pub fn from_parts(
        nodes: Vec<Vec3>,
        node_vertices: Vec<usize>,
        edges: Vec<(usize, usize)>,
        weights: SkinningWeights,
    ) -> Result<Self> {
        if nodes.len() != node_vertices.len() {
            return Err(Error::InvalidArgument("node and node-vertex counts differ".into()));
        }
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for &(a, b) in &edges {
            if a >= nodes.len() || b >= nodes.len() || a == b {
                return Err(Error::InvalidArgument(format!("bad graph edge ({a}, {b})")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self { nodes, node_vertices, edges, neighbors, weights })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn node_vertices(&self) -> &[usize] {
        &self.node_vertices
    }

    /// Undirected edges with `a < b`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, t: usize) -> &[usize] {
        &self.neighbors[t]
    }

    pub fn weights(&self) -> &SkinningWeights {
        &self.weights
    }

    /// Deformed positions of the vertices this graph was built on.
    pub fn deform_points(&self, points: &[Vec3], motion: &NodeMotion) -> Vec<Vec3> {
        points
            .par_iter()
            .enumerate()
            .map(|(i, p)| deform_vertex(p, self.weights.row(i), &self.nodes, motion))
            .collect()
    }

    /// Deformed normals: each normal is mapped by the cofactor of the blended
    /// affine matrix and renormalized.
    pub fn deform_normals(&self, normals: &[Vec3], motion: &NodeMotion) -> Vec<Vec3> {
        normals
            .par_iter()
            .enumerate()
            .map(|(i, n)| {
                let m = blended_matrix(self.weights.row(i), motion);
                let cof = cofactor(&m);
                let out = cof * n;
                let len = out.norm();
                if len > 1e-300 {
                    out / len
                } else {
                    *n
                }
            })
            .collect()
    }
}

/// Samples `target_count` nodes by geodesic farthest-point sampling and
/// skins the mesh onto them with `k` neighbours per vertex.
///
/// The first node is the vertex farthest from vertex 0; each further node is
/// the vertex farthest from all nodes chosen so far (ties to the lower id).
pub fn sample_nodes(mesh: &TriMesh, target_count: usize, k: usize) -> Result<DeformGraph> {
    let n = mesh.vertex_count();
    if target_count < 2 {
        return Err(Error::InvalidArgument("at least two nodes are required".into()));
    }
    if target_count > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {target_count} nodes from {n} vertices"
        )));
    }
    let graph = EdgeGraph::from_mesh(mesh);
    let node_vertices = farthest_point_sample(&graph, target_count);
    DeformGraph::with_edge_graph(mesh, &graph, node_vertices, k)
}

fn farthest_point_sample(graph: &EdgeGraph, count: usize) -> Vec<usize> {
    let n = graph.vertex_count();
    let from_zero = graph.dijkstra(0);
    let first = argmax(&from_zero);
    let mut chosen = vec![first];
    let mut is_node = vec![false; n];
    is_node[first] = true;
    let mut mind = vec![f64::INFINITY; n];
    relax_from(graph, first, &mut mind);
    while chosen.len() < count {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for v in 0..n {
            if !is_node[v] && mind[v] > best_d {
                best_d = mind[v];
                best = v;
            }
        }
        chosen.push(best);
        is_node[best] = true;
        relax_from(graph, best, &mut mind);
    }
    chosen
}

/// Largest value, ties to the lowest index; infinities count as largest.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Lowers `mind` with distances from `source`, exploring only where the
/// distance improves.
fn relax_from(graph: &EdgeGraph, source: usize, mind: &mut [f64]) {
    let mut heap = BinaryHeap::new();
    mind[source] = 0.0;
    heap.push(HeapEntry { dist: 0.0, vertex: source, source: 0 });
    while let Some(HeapEntry { dist, vertex, .. }) = heap.pop() {
        if dist > mind[vertex] {
            continue;
        }
        for (w, len) in graph.neighbors(vertex) {
            let nd = dist + len;
            if nd < mind[w] {
                mind[w] = nd;
                heap.push(HeapEntry { dist: nd, vertex: w, source: 0 });
            }
        }
    }
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
    source: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.source.cmp(&self.source))
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// For every vertex, the `count` nearest sources by edge-graph distance as
/// `(source index, distance)` sorted ascending.
pub(crate) fn k_nearest_sources(graph: &EdgeGraph, sources: &[usize], count: usize) -> Vec<Vec<(usize, f64)>> {
    let n = graph.vertex_count();
    let mut found: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(count); n];
    let mut heap = BinaryHeap::new();
    for (i, &s) in sources.iter().enumerate() {
        heap.push(HeapEntry { dist: 0.0, vertex: s, source: i });
    }
    while let Some(HeapEntry { dist, vertex, source }) = heap.pop() {
        let list = &mut found[vertex];
        if list.len() >= count || list.iter().any(|e| e.0 == source) {
            continue;
        }
        list.push((source, dist));
        for (w, len) in graph.neighbors(vertex) {
            let lw = &found[w];
            if lw.len() < count && !lw.iter().any(|e| e.0 == source) {
                heap.push(HeapEntry { dist: dist + len, vertex: w, source });
            }
        }
    }
    found
}

/// Cubic falloff weight `max(0, (1 - d^2/r^2)^3)`.
pub fn raw_weight(d: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return if d <= 0.0 { 1.0 } else { 0.0 };
    }
    let x = 1.0 - (d * d) / (r * r);
    if x <= 0.0 {
        0.0
    } else {
        x * x * x
    }
}

fn weights_from_nearest(nearest: &[Vec<(usize, f64)>], k: usize) -> SkinningWeights {
    let mut rows = Vec::with_capacity(nearest.len());
    let mut radius = Vec::with_capacity(nearest.len());
    for list in nearest {
        // Vertices on small components or tiny graphs reach fewer than k+1 nodes; the
        // support then extends past the farthest reachable one.
        let r = if list.len() > k {
            list[k].1
        } else {
            list.last().map(|e| 2.0 * e.1).unwrap_or(0.0)
        };
        let mut row: Vec<(usize, f64)> = list
            .iter()
            .take(k)
            .map(|&(t, d)| (t, raw_weight(d, r)))
            .filter(|e| e.1 > 0.0)
            .collect();
        if row.is_empty() {
            if let Some(&(t, _)) = list.first() {
                row.push((t, 1.0));
            }
        }
        let sum: f64 = row.iter().map(|e| e.1).sum();
        for e in &mut row {
            e.1 /= sum;
        }
        row.sort_by_key(|e| e.0);
        rows.push(row);
        radius.push(r);
    }
    SkinningWeights { k, rows, radius }
}

/// Skinning of `mesh` onto nodes placed at `node_vertices`.
pub fn compute_skinning_weights(mesh: &TriMesh, node_vertices: &[usize], k: usize) -> Result<SkinningWeights> {
    if k == 0 || node_vertices.is_empty() {
        return Err(Error::InvalidArgument("skinning needs k >= 1 and at least one node".into()));
    }
    let graph = EdgeGraph::from_mesh(mesh);
    Ok(weights_from_nearest(&k_nearest_sources(&graph, node_vertices, k + 1), k))
}

/// Per-node affine motions.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMotion {
    pub affine: Vec<Mat3>,
    pub translation: Vec<Vec3>,
}

impl NodeMotion {
    pub fn identity(nodes: usize) -> Self {
        Self { affine: vec![Mat3::identity(); nodes], translation: vec![Vec3::zeros(); nodes] }
    }

    pub fn len(&self) -> usize {
        self.affine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.affine.is_empty()
    }

    /// Motion where every node applies `p -> r p + t`.
    pub fn global_rigid(nodes: &[Vec3], r: &Mat3, t: &Vec3) -> Self {
        Self {
            affine: vec![*r; nodes.len()],
            translation: nodes.iter().map(|g| r * g + t - g).collect(),
        }
    }

    /// Packs into 12 scalars per node: row-major `A`, then `b`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * NODE_PARAMS);
        for (a, b) in self.affine.iter().zip(&self.translation) {
            write_node_params(a, b, &mut out);
        }
        out
    }

    pub fn from_params(params: &[f64]) -> Self {
        let n = params.len() / NODE_PARAMS;
        let mut affine = Vec::with_capacity(n);
        let mut translation = Vec::with_capacity(n);
        for chunk in params.chunks_exact(NODE_PARAMS) {
            let (a, b) = read_node_params(chunk);
            affine.push(a);
            translation.push(b);
        }
        Self { affine, translation }
    }

    pub fn is_finite(&self) -> bool {
        self.affine.iter().all(|a| a.iter().all(|x| x.is_finite()))
            && self.translation.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    /// Image of `p` under node `t`'s own map.
    pub fn apply_node(&self, t: usize, node: &Vec3, p: &Vec3) -> Vec3 {
        self.affine[t] * (p - node) + node + self.translation[t]
    }
}

pub fn write_node_params(a: &Mat3, b: &Vec3, out: &mut Vec<f64>) {
    for i in 0..3 {
        for j in 0..3 {
            out.push(a[(i, j)]);
        }
    }
    out.extend_from_slice(b.as_slice());
}

pub fn read_node_params(p: &[f64]) -> (Mat3, Vec3) {
    (
        Mat3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]),
        Vec3::new(p[9], p[10], p[11]),
    )
}

/// Blended position `sum_t w_t [A_t (v - g_t) + g_t + b_t]`.
pub fn deform_vertex(v: &Vec3, row: &[(usize, f64)], nodes: &[Vec3], motion: &NodeMotion) -> Vec3 {
    let mut out = Vec3::zeros();
    for &(t, w) in row {
        out += w * (motion.affine[t] * (v - nodes[t]) + nodes[t] + motion.translation[t]);
    }
    out
}

/// `sum_t w_t A_t`.
pub fn blended_matrix(row: &[(usize, f64)], motion: &NodeMotion) -> Mat3 {
    row.iter().fold(Mat3::zeros(), |acc, &(t, w)| acc + motion.affine[t] * w)
}

fn cofactor(m: &Mat3) -> Mat3 {
    let c0 = m.column(1).cross(&m.column(2));
    let c1 = m.column(2).cross(&m.column(0));
    let c2 = m.column(0).cross(&m.column(1));
    Mat3::from_columns(&[c0, c1, c2])
}

/// Rigid motion `p -> rotation p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let (rotation, translation) = invert_rigid_motion(&self.rotation, &self.translation);
        Self { rotation, translation }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidMotion) -> Self {
        Self {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Node-anchored affine form reproducing this map at `node`:
    /// `A = R`, `b = R g + T - g`.
    pub fn to_node_affine(&self, node: &Vec3) -> (Mat3, Vec3) {
        (self.rotation, self.rotation * node + self.translation - node)
    }
}

/// Rigid part of the deformation at `v`: the polar rotation of the blended
/// matrix and the translation that makes `R v + T` equal the deformed point.
pub fn decompose_vertex_motion(v: &Vec3, row: &[(usize, f64)], nodes: &[Vec3], motion: &NodeMotion) -> Result<RigidMotion> {
    let m = blended_matrix(row, motion);
    let rotation = polar_rotation(&m, MIN_BLEND_DET).ok_or(Error::DegenerateBlend { det: m.determinant() })?;
    let target = deform_vertex(v, row, nodes, motion);
    Ok(RigidMotion { rotation, translation: target - rotation * v })
}

pub fn invert_rigid_motion(r: &Mat3, t: &Vec3) -> (Mat3, Vec3) {
    let rt = r.transpose();
    (rt, -(rt * t))
}
