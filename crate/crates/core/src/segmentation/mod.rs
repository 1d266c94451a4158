//! Partition of the template into near-rigid patches.
//!
//! Graph nodes of every aligned frame are clustered with K-means; each
//! template vertex gets an affinity to every cluster from the skinning
//! weights of nearby aligned vertices, and a Potts labeling is found by
//! alpha-expansion. Labels that fall apart are split into connected patches.

mod maxflow;

pub use maxflow::FlowGraph;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mesh::{PointIndex, TriMesh};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct NodeClusters {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec3>,
    pub iterations: usize,
}

impl NodeClusters {
    /// Sum of squared distances to the assigned centers.
    pub fn distortion(&self, points: &[Vec3]) -> f64 {
        points.iter().zip(&self.assignment).map(|(p, &c)| (p - self.centers[c]).norm_squared()).sum()
    }
}

pub const MAX_KMEANS_ITERATIONS: usize = 100;

fn nearest_center(p: &Vec3, centers: &[Vec3]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, q) in centers.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// K-means with farthest-point seeding: the first seed is the point farthest
/// from the mean, each further seed the point farthest from all seeds.
pub fn cluster_nodes(points: &[Vec3], k: usize) -> Result<NodeClusters> {
    if k == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    let mut distinct: Vec<[u64; 3]> = points.iter().map(|p| [p.x, p.y, p.z].map(f64::to_bits)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::InvalidArgument(format!(
            "{k} clusters requested from {} distinct points",
            distinct.len()
        )));
    }
    let mean = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut mind: Vec<f64> = points.iter().map(|p| (p - mean).norm_squared()).collect();
    let mut seeds = Vec::with_capacity(k);
    // the mean is not a seed: start from the farthest point, then restart the distances
    let first = argmax(&mind);
    seeds.push(points[first]);
    for (d, p) in mind.iter_mut().zip(points) {
        *d = (p - points[first]).norm_squared();
    }
    while seeds.len() < k {
        let s = argmax(&mind);
        seeds.push(points[s]);
        for (d, p) in mind.iter_mut().zip(points) {
            *d = d.min((p - points[s]).norm_squared());
        }
    }
    let mut centers = seeds;
    let mut assignment: Vec<usize> = points.par_iter().map(|p| nearest_center(p, &centers)).collect();
    let mut iterations = 0;
    while iterations < MAX_KMEANS_ITERATIONS {
        iterations += 1;
        let mut sums = vec![Vec3::zeros(); k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assignment) {
            sums[c] += p;
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = points.par_iter().map(|p| nearest_center(p, &centers)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }
    Ok(NodeClusters { k, assignment, centers, iterations })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean weight of the `(cluster, weight)` pairs that belong to `cluster`;
/// zero when there are none.
pub fn mean_pair_weight(pairs: &[(usize, f64)], cluster: usize) -> f64 {
    let (sum, count) = pairs
        .iter()
        .filter(|p| p.0 == cluster)
        .fold((0.0, 0usize), |(s, n), p| (s + p.1, n + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// One aligned frame as seen by the segmentation: positions in the
/// reference pose and skinning rows over the frame's own nodes, whose
/// global ids start at `node_offset`.
#[derive(Debug, Clone, Copy)]
pub struct AlignedSkin<'a> {
    pub positions: &'a [Vec3],
    pub rows: &'a [Vec<(usize, f64)>],
    pub node_offset: usize,
}

/// Vertex-to-cluster affinities: for each template vertex, the nearest
/// `neighborhood` aligned vertices over all frames contribute their
/// skinning pairs, and each cluster gets the mean weight of its pairs.
/// Rows are sparse `(cluster, weight)` lists sorted by cluster.
pub fn vertex_cluster_weights(
    template: &[Vec3],
    frames: &[AlignedSkin<'_>],
    node_cluster: &[usize],
    neighborhood: usize,
) -> Vec<Vec<(usize, f64)>> {
    let mut owner = Vec::new();
    let mut all = Vec::new();
    for (f, fr) in frames.iter().enumerate() {
        for (i, p) in fr.positions.iter().enumerate() {
            all.push(*p);
            owner.push((f, i));
        }
    }
    let index = PointIndex::new(all);
    template
        .par_iter()
        .map(|v| {
            let mut pairs: Vec<(usize, f64)> = Vec::new();
            for (q, _) in index.k_nearest(v, neighborhood) {
                let (f, i) = owner[q];
                let fr = &frames[f];
                for &(t, w) in &fr.rows[i] {
                    pairs.push((node_cluster[fr.node_offset + t], w));
                }
            }
            let mut clusters: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            clusters.sort_unstable();
            clusters.dedup();
            clusters.into_iter().map(|c| (c, mean_pair_weight(&pairs, c))).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationOptions {
    /// Potts weight.
    pub lambda: f64,
    /// Aligned vertices consulted per template vertex.
    pub neighborhood: usize,
    /// Full expansion sweeps over the labels.
    pub max_sweeps: usize,
}

impl Default for SegmentationOptions {
    fn default() -> Self {
        Self { lambda: 1.0, neighborhood: 8, max_sweeps: 2 }
    }
}

/// A multi-label Potts problem: `costs[i][l]` per vertex and label, unit
/// disagreement cost `lambda` on every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct PottsProblem {
    pub costs: Vec<Vec<f64>>,
    pub edges: Vec<(usize, usize)>,
    pub lambda: f64,
}

impl PottsProblem {
    /// Data costs `max_j w_ij - w_ij` from sparse affinities.
    pub fn from_weights(weights: &[Vec<(usize, f64)>], labels: usize, edges: Vec<(usize, usize)>, lambda: f64) -> Result<Self> {
        let mut costs = Vec::with_capacity(weights.len());
        for (i, row) in weights.iter().enumerate() {
            let mut w = vec![0.0; labels];
            for &(c, x) in row {
                if c >= labels {
                    return Err(Error::IndexOutOfRange { index: c, len: labels });
                }
                w[c] = x;
            }
            let top = w.iter().copied().fold(0.0, f64::max);
            if !(top > 0.0) {
                return Err(Error::Unsupported { vertex: i });
            }
            costs.push(w.iter().map(|x| top - x).collect());
        }
        Ok(Self { costs, edges, lambda })
    }

    pub fn labels(&self) -> usize {
        self.costs.first().map_or(0, Vec::len)
    }

    pub fn energy(&self, labeling: &[usize]) -> f64 {
        let data: f64 = labeling.iter().enumerate().map(|(i, &l)| self.costs[i][l]).sum();
        let cut = self.edges.iter().filter(|&&(a, b)| labeling[a] != labeling[b]).count();
        data + self.lambda * cut as f64
    }

    /// Lowest-cost label per vertex (ties to the lower label).
    pub fn argmin_labeling(&self) -> Vec<usize> {
        self.costs
            .iter()
            .map(|c| {
                let mut best = 0;
                for (l, &x) in c.iter().enumerate() {
                    if x < c[best] {
                        best = l;
                    }
                }
                best
            })
            .collect()
    }

    /// Best labeling reachable from `current` by one alpha-expansion.
    fn expand(&self, current: &[usize], alpha: usize) -> Vec<usize> {
        let n = current.len();
        let (s, t) = (n, n + 1);
        let mut g = FlowGraph::new(n + 2);
        // cost of keeping (x = 0, source side) and of switching (x = 1)
        let mut keep: Vec<f64> = (0..n).map(|i| self.costs[i][current[i]]).collect();
        let mut switch: Vec<f64> = (0..n).map(|i| self.costs[i][alpha]).collect();
        let mut pair_edges = Vec::new();
        for &(i, k) in &self.edges {
            let (li, lk) = (current[i], current[k]);
            let lam = self.lambda;
            let e00 = if li != lk { lam } else { 0.0 };
            let e01 = if li != alpha { lam } else { 0.0 };
            let e10 = if alpha != lk { lam } else { 0.0 };
            // e11 = 0; E = e00 + (e10 - e00) x_i + (0 - e10) x_k + (e01 + e10 - e00) (1 - x_i) x_k
            let di = e10 - e00;
            if di >= 0.0 {
                switch[i] += di;
            } else {
                keep[i] -= di;
            }
            keep[k] += e10;
            let cross = e01 + e10 - e00;
            if cross > 0.0 {
                pair_edges.push((i, k, cross));
            }
        }
        for i in 0..n {
            let d = switch[i] - keep[i];
            if d > 0.0 {
                g.add_edge(s, i, d, 0.0);
            } else if d < 0.0 {
                g.add_edge(i, t, -d, 0.0);
            }
        }
        for (i, k, c) in pair_edges {
            g.add_edge(i, k, c, 0.0);
        }
        g.max_flow(s, t);
        let side = g.source_side(s);
        (0..n).map(|i| if side[i] { current[i] } else { alpha }).collect()
    }

    /// Alpha-expansion from the data-only labeling, labels in ascending
    /// order, until a sweep changes nothing or `max_sweeps` is reached.
    pub fn alpha_expansion(&self, max_sweeps: usize) -> (Vec<usize>, f64) {
        let mut labeling = self.argmin_labeling();
        let mut energy = self.energy(&labeling);
        if self.lambda == 0.0 {
            return (labeling, energy);
        }
        for _ in 0..max_sweeps {
            let mut improved = false;
            for alpha in 0..self.labels() {
                let candidate = self.expand(&labeling, alpha);
                let e = self.energy(&candidate);
                if e < energy - 1e-12 * energy.abs().max(1.0) {
                    labeling = candidate;
                    energy = e;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        (labeling, energy)
    }

    /// Exhaustive minimum over all labelings (small instances only).
    pub fn brute_force(&self) -> (Vec<usize>, f64) {
        let n = self.costs.len();
        let k = self.labels();
        let mut labeling = vec![0; n];
        let mut best = (labeling.clone(), self.energy(&labeling));
        loop {
            let mut i = 0;
            while i < n {
                labeling[i] += 1;
                if labeling[i] < k {
                    break;
                }
                labeling[i] = 0;
                i += 1;
            }
            if i == n {
                return best;
            }
            let e = self.energy(&labeling);
            if e < best.1 {
                best = (labeling.clone(), e);
            }
        }
    }
}

/// Template patches: connected vertex sets sharing one cluster label.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSegmentation {
    /// Cluster label of each template vertex.
    pub labels: Vec<usize>,
    /// Patch id of each template vertex.
    pub patch_of: Vec<usize>,
    pub patches: Vec<Vec<usize>>,
    /// Cluster label of each patch.
    pub patch_label: Vec<usize>,
    /// Mean position of each patch's vertices.
    pub centroids: Vec<Vec3>,
    /// Patch vertex nearest to the centroid; used as the graph node.
    pub node_vertices: Vec<usize>,
    pub energy: f64,
}

impl PatchSegmentation {
    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    /// Builds patches from a labeling: each label's vertex set is split into
    /// edge-connected components, numbered by lowest vertex.
    pub fn from_labels(mesh: &TriMesh, labels: Vec<usize>, energy: f64) -> Self {
        let n = mesh.vertex_count();
        let neighbors = mesh.vertex_neighbors();
        let mut patch_of = vec![usize::MAX; n];
        let mut patches = Vec::new();
        let mut patch_label = Vec::new();
        for start in 0..n {
            if patch_of[start] != usize::MAX {
                continue;
            }
            let id = patches.len();
            let mut members = vec![start];
            patch_of[start] = id;
            let mut head = 0;
            while head < members.len() {
                let v = members[head];
                head += 1;
                for &w in &neighbors[v] {
                    if patch_of[w] == usize::MAX && labels[w] == labels[start] {
                        patch_of[w] = id;
                        members.push(w);
                    }
                }
            }
            members.sort_unstable();
            patches.push(members);
            patch_label.push(labels[start]);
        }
        let verts = mesh.vertices();
        let centroids: Vec<Vec3> = patches.iter().map(|p| p.iter().map(|&v| verts[v]).sum::<Vec3>() / p.len() as f64).collect();
        let node_vertices = patches
            .iter()
            .zip(&centroids)
            .map(|(p, c)| {
                let mut best = p[0];
                for &v in p {
                    if (verts[v] - c).norm_squared() < (verts[best] - c).norm_squared() {
                        best = v;
                    }
                }
                best
            })
            .collect();
        Self { labels, patch_of, patches, patch_label, centroids, node_vertices, energy }
    }
}

/// Labels the template by alpha-expansion over triangle-sharing vertex
/// pairs and splits the result into connected patches.
pub fn segment(mesh: &TriMesh, weights: &[Vec<(usize, f64)>], clusters: usize, options: &SegmentationOptions) -> Result<PatchSegmentation> {
    if weights.len() != mesh.vertex_count() {
        return Err(Error::InvalidArgument("one affinity row per template vertex is required".into()));
    }
    let problem = PottsProblem::from_weights(weights, clusters, mesh.edges(), options.lambda)?;
    let (labels, energy) = problem.alpha_expansion(options.max_sweeps);
    Ok(PatchSegmentation::from_labels(mesh, labels, energy))
}

/// Checks and statistics of a segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub patch_count: usize,
    pub covered: bool,
    pub disconnected_patches: Vec<usize>,
    pub within_cluster_count: bool,
    pub areas: Vec<f64>,
    pub boundary_lengths: Vec<f64>,
}

impl SegmentationReport {
    pub fn passed(&self) -> bool {
        self.covered && self.disconnected_patches.is_empty() && self.within_cluster_count
    }
}

/// Verifies coverage, patch connectivity and patch count; areas split each
/// face evenly among its vertices' patches.
pub fn verify_segmentation(seg: &PatchSegmentation, mesh: &TriMesh, clusters: usize) -> SegmentationReport {
    let n = mesh.vertex_count();
    let count = seg.patches.len();
    let mut seen = vec![0usize; n];
    for p in &seg.patches {
        for &v in p {
            if v < n {
                seen[v] += 1;
            }
        }
    }
    let covered = seen.iter().all(|&c| c == 1) && seg.patch_of.len() == n && seg.patch_of.iter().all(|&p| p < count);
    let neighbors = mesh.vertex_neighbors();
    let disconnected_patches = seg
        .patches
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            if p.is_empty() {
                return false;
            }
            let member: std::collections::HashSet<usize> = p.iter().copied().collect();
            let mut reached = std::collections::HashSet::from([p[0]]);
            let mut stack = vec![p[0]];
            while let Some(v) = stack.pop() {
                for &w in &neighbors[v] {
                    if member.contains(&w) && reached.insert(w) {
                        stack.push(w);
                    }
                }
            }
            reached.len() != p.len()
        })
        .map(|(i, _)| i)
        .collect();
    let mut areas = vec![0.0; count];
    let mut boundary_lengths = vec![0.0; count];
    if covered {
        for (f, face) in mesh.faces().iter().enumerate() {
            let a = mesh.face_area(f) / 3.0;
            for &v in face {
                areas[seg.patch_of[v]] += a;
            }
        }
        for (a, b) in mesh.edges() {
            let (pa, pb) = (seg.patch_of[a], seg.patch_of[b]);
            if pa != pb {
                let len = (mesh.vertices()[a] - mesh.vertices()[b]).norm();
                boundary_lengths[pa] += len;
                boundary_lengths[pb] += len;
            }
        }
    }
    SegmentationReport {
        patch_count: count,
        covered,
        disconnected_patches,
        within_cluster_count: count <= clusters,
        areas,
        boundary_lengths,
    }
}

/// JSON summary of a segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub patch_count: usize,
    pub clusters: usize,
    pub energy: f64,
    pub centroids: Vec<[f64; 3]>,
    pub node_vertices: Vec<usize>,
    pub patch_labels: Vec<usize>,
    pub areas: Vec<f64>,
}

impl SegmentationSummary {
    pub fn new(seg: &PatchSegmentation, report: &SegmentationReport, clusters: usize) -> Self {
        Self {
            patch_count: seg.patch_count(),
            clusters,
            energy: seg.energy,
            centroids: seg.centroids.iter().map(|c| [c.x, c.y, c.z]).collect(),
            node_vertices: seg.node_vertices.clone(),
            patch_labels: seg.patch_label.clone(),
            areas: report.areas.clone(),
        }
    }
}
