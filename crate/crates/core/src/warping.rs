//! Warping the template back onto every frame.
//!
//! For each frame the template is first pushed along its normals onto the
//! frame's aligned surface (a scalar least-squares problem per vertex with
//! patch-restricted smoothing). Every patch node then takes the rigid motion
//! of the aligned frame under it, or a geodesic blend of its direct
//! neighbours where the frame has a hole. The node motions of all frames are
//! refined jointly with a second-difference temporal term before the
//! template is deformed into each frame.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{deform_vertex, DeformGraph, NodeMotion, RigidMotion, DEFAULT_SKIN_NEIGHBORS};
use crate::fusion::AlignedFrame;
use crate::linalg::{average_rotations, conjugate_gradient, CscUpper};
use crate::mesh::{Bvh, EdgeGraph, PointIndex, TriMesh};
use crate::segmentation::PatchSegmentation;
use crate::solver::{solve, Problem, SolverOptions, SolverReport};
use crate::terms::{DeformedPointsTerm, RigidTerm, SmoothTerm};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineWeights {
    pub rigid: f64,
    pub smooth: f64,
    pub tempo: f64,
    pub data: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        Self { rigid: 100.0, smooth: 30.0, tempo: 1.0, data: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpOptions {
    /// Weight of the patch smoothness term of the expansion.
    pub patch_smoothness: f64,
    /// Ray search cutoff as a fraction of the template's bbox diagonal.
    pub ray_cutoff_fraction: f64,
    /// Same-patch neighbours per vertex in the expansion smoothness.
    pub smooth_neighbors: usize,
    /// Direct nodes blended for a node over a hole.
    pub fallback_neighbors: usize,
    pub skin_neighbors: usize,
    pub weights: RefineWeights,
    pub refine: bool,
    /// Template vertices sampled per frame for the refinement terms.
    pub refine_samples: usize,
    pub solver: SolverOptions,
}

impl Default for WarpOptions {
    fn default() -> Self {
        Self {
            patch_smoothness: 1.0,
            ray_cutoff_fraction: 0.02,
            smooth_neighbors: 4,
            fallback_neighbors: 3,
            skin_neighbors: DEFAULT_SKIN_NEIGHBORS,
            weights: RefineWeights::default(),
            refine: true,
            refine_samples: 1000,
            solver: SolverOptions::default().with_max_iterations(20),
        }
    }
}

/// Deformation graph of the template with one node per patch.
pub fn patch_graph(template: &TriMesh, seg: &PatchSegmentation, skin_neighbors: usize) -> Result<DeformGraph> {
    let k = skin_neighbors.min(seg.patch_count()).max(1);
    DeformGraph::from_node_vertices(template, seg.node_vertices.clone(), k)
}

/// Per-vertex displacement along the template normals.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionField {
    pub displacement: Vec<f64>,
    /// Ray hit on the frame surface, for vertices that have one.
    pub hits: Vec<Option<Vec3>>,
    /// Smoothness-connected regions without any hit; their displacement is 0.
    pub unsupported_regions: usize,
}

impl ExpansionField {
    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }

    /// Template positions moved by the field.
    pub fn apply(&self, template: &TriMesh) -> Vec<Vec3> {
        template
            .vertices()
            .iter()
            .zip(template.normals())
            .zip(&self.displacement)
            .map(|((v, n), d)| v + n * *d)
            .collect()
    }
}

/// The quadratic of the expansion as normal equations `M d = rhs`.
#[derive(Debug, Clone)]
pub struct ExpansionSystem {
    pub matrix: CscUpper,
    pub rhs: Vec<f64>,
    /// Ordered smoothness pairs `(i, k)`.
    pub pairs: Vec<(usize, usize)>,
}

/// For every vertex, up to `k` nearest other vertices of the same patch.
pub fn patch_neighbor_pairs(template: &TriMesh, seg: &PatchSegmentation, k: usize) -> Vec<(usize, usize)> {
    let verts = template.vertices();
    let per_patch: Vec<Vec<(usize, usize)>> = seg
        .patches
        .par_iter()
        .map(|patch| {
            let index = PointIndex::new(patch.iter().map(|&v| verts[v]).collect());
            let mut out = Vec::new();
            for &v in patch {
                for (q, _) in index.k_nearest(&verts[v], k + 1) {
                    let w = patch[q];
                    if w != v && out.iter().filter(|p: &&(usize, usize)| p.0 == v).count() < k {
                        out.push((v, w));
                    }
                }
            }
            out
        })
        .collect();
    let mut pairs: Vec<(usize, usize)> = per_patch.into_iter().flatten().collect();
    pairs.sort_unstable();
    pairs
}

/// Builds the normal equations of
/// `sum_hits |v + d n - c|^2 + lambda sum_pairs (d_i - d_k)^2`.
pub fn expansion_system(template: &TriMesh, hits: &[Option<Vec3>], pairs: Vec<(usize, usize)>, lambda: f64) -> ExpansionSystem {
    let n = template.vertex_count();
    let pattern = (0..n).map(|i| (i, i)).chain(pairs.iter().map(|&(i, k)| (i.min(k), i.max(k))));
    let mut matrix = CscUpper::from_pattern(n, pattern);
    let mut rhs = vec![0.0; n];
    for (i, h) in hits.iter().enumerate() {
        if let Some(c) = h {
            let p = matrix.position(i, i).unwrap();
            matrix.values[p] += 1.0;
            rhs[i] = template.normals()[i].dot(&(c - template.vertices()[i]));
        }
    }
    for &(i, k) in &pairs {
        let pi = matrix.position(i, i).unwrap();
        matrix.values[pi] += lambda;
        let pk = matrix.position(k, k).unwrap();
        matrix.values[pk] += lambda;
        let po = matrix.position(i.min(k), i.max(k)).unwrap();
        matrix.values[po] -= lambda;
    }
    ExpansionSystem { matrix, rhs, pairs }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Solves the expansion of `template` onto the aligned frame surface.
pub fn expand_surface(template: &TriMesh, frame: &Bvh, seg: &PatchSegmentation, options: &WarpOptions) -> Result<ExpansionField> {
    let n = template.vertex_count();
    if seg.patch_of.len() != n {
        return Err(Error::InvalidArgument("segmentation does not match the template".into()));
    }
    let cutoff = options.ray_cutoff_fraction * template.bbox_diagonal();
    let hits: Vec<Option<Vec3>> = template
        .vertices()
        .par_iter()
        .zip(template.normals())
        .map(|(v, nrm)| frame.ray_intersect(v, nrm, true, cutoff).map(|h| h.point))
        .collect();
    let pairs = patch_neighbor_pairs(template, seg, options.smooth_neighbors);
    let lambda = options.patch_smoothness;

    // regions of the smoothness graph with no hit are pinned to zero
    let mut parent: Vec<usize> = (0..n).collect();
    if lambda > 0.0 {
        for &(i, k) in &pairs {
            let (a, b) = (find(&mut parent, i), find(&mut parent, k));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut supported = vec![false; n];
    for i in 0..n {
        if hits[i].is_some() {
            let r = find(&mut parent, i);
            supported[r] = true;
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let pinned: Vec<bool> = roots.iter().map(|&r| !supported[r]).collect();
    let mut unsupported_regions = (0..n).filter(|&i| roots[i] == i && !supported[i]).count();
    if unsupported_regions > 0 {
        log::warn!("{unsupported_regions} template regions have no ray hits; their expansion is zero");
    }
    if lambda <= 0.0 {
        unsupported_regions = 0;
    }

    let mut system = expansion_system(template, &hits, pairs, lambda);
    // pinned rows become d = 0
    for c in 0..n {
        for p in system.matrix.col_ptr[c]..system.matrix.col_ptr[c + 1] {
            let r = system.matrix.row_idx[p];
            if pinned[r] || pinned[c] {
                system.matrix.values[p] = if r == c { 1.0 } else { 0.0 };
            }
        }
        if pinned[c] {
            system.rhs[c] = 0.0;
        }
    }
    let mut displacement = vec![0.0; n];
    let scale = system.rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 {
        conjugate_gradient(&system.matrix, &system.rhs, &mut displacement, 1e-13 * scale.max(1e-300), 20 * n + 100);
    }
    Ok(ExpansionField { displacement, hits, unsupported_regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Direct,
    Fallback,
}

/// Inverse-distance blend: translations averaged linearly, rotations in
/// quaternion space. A zero distance takes that motion outright.
pub fn blend_rigid(motions: &[RigidMotion], distances: &[f64]) -> RigidMotion {
    if let Some(i) = distances.iter().position(|&d| d <= 0.0) {
        return motions[i];
    }
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let rotations: Vec<_> = motions.iter().map(|m| m.rotation).collect();
    let translation = motions.iter().zip(&weights).map(|(m, w)| m.translation * *w).sum();
    RigidMotion { rotation: average_rotations(&rotations, &weights), translation }
}

/// Template-to-frame rigid motion of each patch node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimates {
    pub motions: Vec<RigidMotion>,
    pub provenance: Vec<Provenance>,
}

impl NodeEstimates {
    pub fn direct_count(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Direct).count()
    }

    /// Node-anchored affine form over the given node positions.
    pub fn to_node_motion(&self, nodes: &[Vec3]) -> NodeMotion {
        let (affine, translation) = self.motions.iter().zip(nodes).map(|(m, g)| m.to_node_affine(g)).unzip();
        NodeMotion { affine, translation }
    }
}

/// Estimates the motion of every node of `graph` for one frame.
///
/// `positions` and `normals` are the (expanded) template at the nodes'
/// vertices; `frame` is the frame's aligned surface and `frame_bvh` its
/// acceleration structure.
pub fn estimate_node_motions(
    graph: &DeformGraph,
    geodesic: &EdgeGraph,
    positions: &[Vec3],
    normals: &[Vec3],
    frame: &AlignedFrame,
    frame_bvh: &Bvh,
    cutoff: f64,
    fallback_neighbors: usize,
) -> Result<NodeEstimates> {
    let m = graph.node_count();
    let faces = frame.mesh.faces();
    let verts = frame.mesh.vertices();
    let direct: Vec<Option<RigidMotion>> = graph
        .node_vertices()
        .iter()
        .map(|&v| {
            let hit = frame_bvh.ray_intersect(&positions[v], &normals[v], true, cutoff)?;
            let face = faces[hit.face_index];
            let nearest = *face
                .iter()
                .min_by(|&&a, &&b| (verts[a] - hit.point).norm_squared().total_cmp(&(verts[b] - hit.point).norm_squared()))
                .unwrap();
            Some(frame.motions[nearest].inverse())
        })
        .collect();
    if direct.iter().all(Option::is_none) {
        return Err(Error::NoDirectMotion { frame: frame.frame });
    }
    let mut motions = Vec::with_capacity(m);
    let mut provenance = Vec::with_capacity(m);
    for t in 0..m {
        if let Some(d) = direct[t] {
            motions.push(d);
            provenance.push(Provenance::Direct);
            continue;
        }
        let dist = geodesic.dijkstra(graph.node_vertices()[t]);
        let g = graph.nodes()[t];
        let mut candidates: Vec<(f64, usize)> = (0..m)
            .filter(|&s| direct[s].is_some())
            .map(|s| {
                let d = dist[graph.node_vertices()[s]];
                // unreachable nodes rank after reachable ones by straight-line distance
                if d.is_finite() {
                    (d, s)
                } else {
                    (f64::MAX / 4.0 + (graph.nodes()[s] - g).norm(), s)
                }
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(fallback_neighbors.max(1));
        let ms: Vec<RigidMotion> = candidates.iter().map(|&(_, s)| direct[s].unwrap()).collect();
        let ds: Vec<f64> = candidates.iter().map(|c| c.0).collect();
        motions.push(blend_rigid(&ms, &ds));
        provenance.push(Provenance::Fallback);
    }
    Ok(NodeEstimates { motions, provenance })
}

/// `sum_n sum_i |p_i(n+1) + p_i(n-1) - 2 p_i(n)|^2` over interior frames.
pub fn tempo_energy(trajectories: &[Vec<Vec3>]) -> f64 {
    trajectories
        .windows(3)
        .map(|w| w[0].iter().zip(&w[1]).zip(&w[2]).map(|((a, b), c)| (a + c - 2.0 * b).norm_squared()).sum::<f64>())
        .sum()
}

/// Mean per-vertex second-difference magnitude over interior frames.
pub fn mean_second_difference(trajectories: &[Vec<Vec3>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in trajectories.windows(3) {
        for ((a, b), c) in w[0].iter().zip(&w[1]).zip(&w[2]) {
            total += (a + c - 2.0 * b).norm();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Deforms template positions with a node motion of `graph`.
pub fn warp_positions(positions: &[Vec3], graph: &DeformGraph, motion: &NodeMotion) -> Vec<Vec3> {
    positions
        .par_iter()
        .enumerate()
        .map(|(i, v)| deform_vertex(v, graph.weights().row(i), graph.nodes(), motion))
        .collect()
}

/// Deformed template with the template's connectivity.
pub fn warp_template_to_frame(template: &TriMesh, positions: &[Vec3], graph: &DeformGraph, motion: &NodeMotion) -> Result<TriMesh> {
    template.with_positions(warp_positions(positions, graph, motion))
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub motions: Vec<NodeMotion>,
    pub report: Option<SolverReport>,
}

fn sample_indices(n: usize, max_samples: usize) -> Vec<usize> {
    if max_samples == 0 || n <= max_samples {
        return (0..n).collect();
    }
    let stride = n.div_ceil(max_samples);
    (0..n).step_by(stride).collect()
}

/// Joint refinement of all frames' node motions: per-frame rigidity and
/// smoothness, anchoring of sampled vertices to their initial warp, and a
/// second-difference penalty on their trajectories.
pub fn refine_temporal(
    graph: &DeformGraph,
    positions: &[Vec<Vec3>],
    initial: &[NodeMotion],
    weights: &RefineWeights,
    samples: usize,
    solver: &SolverOptions,
) -> Result<Refinement> {
    let frames = initial.len();
    if positions.len() != frames {
        return Err(Error::InvalidArgument("one position set per frame is required".into()));
    }
    let m = graph.node_count();
    if initial.iter().any(|mo| mo.len() != m) {
        return Err(Error::InvalidArgument("motion size does not match the graph".into()));
    }
    if frames == 0 {
        return Ok(Refinement { motions: Vec::new(), report: None });
    }
    let nodes = graph.nodes();
    let picks = sample_indices(graph.weights().rows.len(), samples);
    let mut problem = Problem::new(12, frames * m);
    for f in 0..frames {
        let off = f * m;
        for t in 0..m {
            problem.add(RigidTerm::new(off + t, weights.rigid));
            for &k in graph.neighbors(t) {
                problem.add(SmoothTerm::new(off + t, off + k, &nodes[t], &nodes[k], weights.smooth));
            }
        }
        for &i in &picks {
            let anchor = deform_vertex(&positions[f][i], graph.weights().row(i), nodes, &initial[f]);
            let mut term = DeformedPointsTerm::new(anchor, weights.data);
            term.add_skinned(off, 1.0, &positions[f][i], graph.weights().row(i), nodes);
            problem.add(term);
        }
    }
    if weights.tempo > 0.0 {
        for f in 1..frames.saturating_sub(1) {
            for &i in &picks {
                let row = graph.weights().row(i);
                let mut term = DeformedPointsTerm::new(Vec3::zeros(), weights.tempo);
                term.add_skinned((f - 1) * m, 1.0, &positions[f - 1][i], row, nodes);
                term.add_skinned((f + 1) * m, 1.0, &positions[f + 1][i], row, nodes);
                term.add_skinned(f * m, -2.0, &positions[f][i], row, nodes);
                problem.add(term);
            }
        }
    }
    let x0: Vec<f64> = initial.iter().flat_map(NodeMotion::to_params).collect();
    let (x, report) = solve(&problem, &x0, solver)?;
    let motions = x.chunks_exact(12 * m).map(NodeMotion::from_params).collect();
    Ok(Refinement { motions, report: Some(report) })
}

/// Per-frame warp diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameWarpInfo {
    pub frame: usize,
    pub direct_nodes: usize,
    pub fallback_nodes: usize,
    pub expansion_hits: usize,
    pub max_displacement: f64,
    pub hausdorff_to_input: f64,
}

#[derive(Debug, Clone)]
pub struct WarpResult {
    pub graph: DeformGraph,
    /// Expanded template positions of each frame.
    pub expanded: Vec<Vec<Vec3>>,
    pub initial: Vec<NodeMotion>,
    pub motions: Vec<NodeMotion>,
    pub provenance: Vec<Vec<Provenance>>,
    pub meshes: Vec<TriMesh>,
    pub info: Vec<FrameWarpInfo>,
    pub report: Option<SolverReport>,
}

impl WarpResult {
    /// Warped meshes with the unrefined motions.
    pub fn unrefined_meshes(&self, template: &TriMesh) -> Result<Vec<TriMesh>> {
        self.expanded
            .iter()
            .zip(&self.initial)
            .map(|(p, m)| warp_template_to_frame(template, p, &self.graph, m))
            .collect()
    }
}

/// Runs expansion, node estimation, refinement and warping for all frames.
/// `inputs[f]` is frame `f` in its own pose, used only for diagnostics.
pub fn warp_sequence(
    template: &TriMesh,
    seg: &PatchSegmentation,
    aligned: &[AlignedFrame],
    inputs: &[TriMesh],
    options: &WarpOptions,
) -> Result<WarpResult> {
    if aligned.len() != inputs.len() {
        return Err(Error::InvalidArgument("one input mesh per aligned frame is required".into()));
    }
    let graph = patch_graph(template, seg, options.skin_neighbors)?;
    let geodesic = EdgeGraph::from_mesh(template);
    let cutoff = options.ray_cutoff_fraction * template.bbox_diagonal();
    let per_frame: Vec<(Vec<Vec3>, NodeEstimates, ExpansionField)> = aligned
        .par_iter()
        .map(|a| {
            let bvh = Bvh::new(&a.mesh);
            let field = expand_surface(template, &bvh, seg, options)?;
            let expanded = field.apply(template);
            let normals = template.with_positions(expanded.clone()).map(|m| m.normals().to_vec()).unwrap_or_else(|_| template.normals().to_vec());
            let est = estimate_node_motions(&graph, &geodesic, &expanded, &normals, a, &bvh, cutoff, options.fallback_neighbors)?;
            Ok((expanded, est, field))
        })
        .collect::<Result<_>>()?;
    let expanded: Vec<Vec<Vec3>> = per_frame.iter().map(|p| p.0.clone()).collect();
    let initial: Vec<NodeMotion> = per_frame.iter().map(|p| p.1.to_node_motion(graph.nodes())).collect();
    let provenance: Vec<Vec<Provenance>> = per_frame.iter().map(|p| p.1.provenance.clone()).collect();
    let (motions, report) = if options.refine && aligned.len() > 1 {
        let r = refine_temporal(&graph, &expanded, &initial, &options.weights, options.refine_samples, &options.solver)?;
        (r.motions, r.report)
    } else {
        (initial.clone(), None)
    };
    let meshes: Vec<TriMesh> = expanded
        .par_iter()
        .zip(&motions)
        .map(|(p, m)| warp_template_to_frame(template, p, &graph, m))
        .collect::<Result<_>>()?;
    let info = per_frame
        .iter()
        .zip(&meshes)
        .zip(aligned.iter().zip(inputs))
        .map(|(((_, est, field), mesh), (a, input))| FrameWarpInfo {
            frame: a.frame,
            direct_nodes: est.direct_count(),
            fallback_nodes: est.provenance.len() - est.direct_count(),
            expansion_hits: field.hit_count(),
            max_displacement: field.displacement.iter().fold(0.0, |acc: f64, d| acc.max(d.abs())),
            hausdorff_to_input: crate::mesh::hausdorff_mean(input, mesh),
        })
        .collect();
    Ok(WarpResult { graph, expanded, initial, motions, provenance, meshes, info, report })
}
