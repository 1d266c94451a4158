//! Pairwise registration of a frame onto both of its neighbours.
//!
//! Frame `n` carries its own deformation graph. A forward motion maps it onto
//! frame `n+1` and a backward motion onto frame `n-1`; both are solved jointly
//! with a temporal coupling term that keeps them inverse to each other.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{DeformGraph, GraphDocument, MotionDocument, NodeMotion, NODE_PARAMS};
use crate::mesh::{Bvh, PointIndex, TriMesh};
use crate::solver::{solve, Problem, ResidualBlock, SolverOptions, SolverReport};
use crate::terms::{DeformedPointsTerm, RigidTerm, SmoothTerm, TempoTerm};
use crate::{Result, Vec3};

/// A mesh with the acceleration structures correspondence search needs.
#[derive(Debug, Clone)]
pub struct SurfaceIndex {
    mesh: TriMesh,
    bvh: Bvh,
    points: PointIndex,
    diagonal: f64,
}

impl SurfaceIndex {
    pub fn new(mesh: TriMesh) -> Self {
        let bvh = Bvh::new(&mesh);
        let points = PointIndex::new(mesh.vertices().to_vec());
        let diagonal = mesh.bbox_diagonal();
        Self { mesh, bvh, points, diagonal }
    }

    pub fn mesh(&self) -> &TriMesh {
        &self.mesh
    }

    pub fn bvh(&self) -> &Bvh {
        &self.bvh
    }

    pub fn points(&self) -> &PointIndex {
        &self.points
    }

    pub fn diagonal(&self) -> f64 {
        self.diagonal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceOptions {
    /// Hits farther than this multiple of the median hit distance are pruned.
    pub prune_factor: f64,
    pub max_normal_angle_deg: f64,
    /// Rays are not followed beyond this distance.
    pub max_distance: Option<f64>,
}

impl Default for CorrespondenceOptions {
    fn default() -> Self {
        Self { prune_factor: 5.0, max_normal_angle_deg: 60.0, max_distance: None }
    }
}

/// Pruning never rejects hits closer than this fraction of the target's
/// bounding-box diagonal. When most of the surface is static the median
/// collapses and would otherwise reject every vertex of the moving part.
const PRUNE_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: usize,
    /// Target vertex nearest to the ray hit.
    pub target_vertex: usize,
    pub point: Vec3,
    pub normal: Vec3,
    /// Signed distance along the source normal to the hit.
    pub hit_distance: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    /// One entry per source vertex; pruned entries stay in place.
    pub entries: Vec<Correspondence>,
    /// Fraction of rays that hit the target at all.
    pub hit_rate: f64,
    pub median_distance: f64,
}

impl CorrespondenceSet {
    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|c| c.valid).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.valid_count() as f64 / self.entries.len() as f64
        }
    }

    /// Mean `|v - c|` over valid entries.
    pub fn mean_distance(&self, positions: &[Vec3]) -> f64 {
        let (sum, n) = self
            .entries
            .iter()
            .filter(|c| c.valid)
            .fold((0.0, 0usize), |(s, n), c| (s + (positions[c.source] - c.point).norm(), n + 1));
        if n == 0 {
            f64::INFINITY
        } else {
            sum / n as f64
        }
    }

    pub fn rms_distance(&self, positions: &[Vec3]) -> f64 {
        let (sum, n) = self
            .entries
            .iter()
            .filter(|c| c.valid)
            .fold((0.0, 0usize), |(s, n), c| (s + (positions[c.source] - c.point).norm_squared(), n + 1));
        if n == 0 {
            f64::INFINITY
        } else {
            (sum / n as f64).sqrt()
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// Casts an undirected ray along each source normal and matches the target
/// vertex closest to the hit.
pub fn find_correspondences(
    positions: &[Vec3],
    normals: &[Vec3],
    target: &SurfaceIndex,
    options: &CorrespondenceOptions,
) -> CorrespondenceSet {
    let mut entries: Vec<Correspondence> = positions
        .par_iter()
        .zip(normals.par_iter())
        .enumerate()
        .map(|(i, (p, n))| {
            let miss = Correspondence {
                source: i,
                target_vertex: usize::MAX,
                point: *p,
                normal: *n,
                hit_distance: f64::INFINITY,
                valid: false,
            };
            let Some(hit) = target.bvh.ray_intersect(p, n, true, options.max_distance.unwrap_or(f64::INFINITY)) else {
                return miss;
            };
            let Some((tv, _)) = target.points.nearest(&hit.point) else {
                return miss;
            };
            Correspondence {
                source: i,
                target_vertex: tv,
                point: target.mesh.vertices()[tv],
                normal: target.mesh.normals()[tv],
                hit_distance: hit.distance,
                valid: true,
            }
        })
        .collect();
    let hits = entries.iter().filter(|c| c.valid).count();
    let mut dists: Vec<f64> = entries.iter().filter(|c| c.valid).map(|c| c.hit_distance.abs()).collect();
    let med = median(&mut dists);
    let limit = (options.prune_factor * med).max(PRUNE_FLOOR * target.diagonal);
    let cos_limit = options.max_normal_angle_deg.to_radians().cos();
    for c in entries.iter_mut().filter(|c| c.valid) {
        if c.hit_distance.abs() > limit || normals[c.source].dot(&c.normal) < cos_limit {
            c.valid = false;
        }
    }
    let hit_rate = if entries.is_empty() { 0.0 } else { hits as f64 / entries.len() as f64 };
    CorrespondenceSet { entries, hit_rate, median_distance: med }
}

/// Term weights of the pairwise energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationWeights {
    pub rigid: f64,
    pub smooth: f64,
    pub fit: f64,
    pub tempo: f64,
    pub point: f64,
    pub plane: f64,
}

impl Default for RegistrationWeights {
    fn default() -> Self {
        Self { rigid: 100.0, smooth: 20.0, fit: 1.0, tempo: 5.0, point: 0.1, plane: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOptions {
    pub weights: RegistrationWeights,
    pub correspondence: CorrespondenceOptions,
    pub icp_rounds: usize,
    pub gn_iterations: usize,
    /// Registration is flagged failed when the final mean correspondence
    /// distance exceeds this fraction of the bounding-box diagonal.
    pub failure_fraction: f64,
    pub solver: SolverOptions,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        Self {
            weights: RegistrationWeights::default(),
            correspondence: CorrespondenceOptions::default(),
            icp_rounds: 20,
            gn_iterations: 5,
            failure_fraction: 0.05,
            solver: SolverOptions::default(),
        }
    }
}

fn motion_energy(blocks: &[Box<dyn ResidualBlock>], params: &[f64]) -> f64 {
    let mut total = 0.0;
    for b in blocks {
        let slices: Vec<&[f64]> = b.groups().iter().map(|&g| &params[g * NODE_PARAMS..(g + 1) * NODE_PARAMS]).collect();
        let mut r = vec![0.0; b.residual_dim()];
        b.evaluate(&slices, &mut r, None);
        total += b.weight() * r.iter().map(|x| x * x).sum::<f64>();
    }
    total
}

/// Column orthonormality penalty summed over nodes (unit weight).
pub fn energy_rigid(motion: &NodeMotion) -> f64 {
    let blocks: Vec<Box<dyn ResidualBlock>> =
        (0..motion.len()).map(|t| Box::new(RigidTerm::new(t, 1.0)) as Box<dyn ResidualBlock>).collect();
    motion_energy(&blocks, &motion.to_params())
}

fn smooth_blocks(graph: &DeformGraph, offset: usize, weight: f64) -> Vec<Box<dyn ResidualBlock>> {
    let nodes = graph.nodes();
    let mut out: Vec<Box<dyn ResidualBlock>> = Vec::new();
    for t in 0..graph.node_count() {
        for &k in graph.neighbors(t) {
            out.push(Box::new(SmoothTerm::new(offset + t, offset + k, &nodes[t], &nodes[k], weight)));
        }
    }
    out
}

/// Directed neighbour smoothness summed over graph edges (unit weight).
pub fn energy_smooth(graph: &DeformGraph, motion: &NodeMotion) -> f64 {
    motion_energy(&smooth_blocks(graph, 0, 1.0), &motion.to_params())
}

/// `sum lambda_point |v - c|^2 + lambda_plane (n'(v - c))^2` over valid
/// correspondences, with `n` the source normal.
pub fn energy_fit(set: &CorrespondenceSet, positions: &[Vec3], normals: &[Vec3], point: f64, plane: f64) -> f64 {
    set.entries
        .iter()
        .filter(|c| c.valid)
        .map(|c| {
            let d = positions[c.source] - c.point;
            point * d.norm_squared() + plane * normals[c.source].dot(&d).powi(2)
        })
        .sum()
}

/// `sum |I - A+ A-|_F^2 + |A- b+ + b-|^2` over nodes.
pub fn energy_tempo(forward: &NodeMotion, backward: &NodeMotion) -> f64 {
    let m = forward.len();
    let mut params = forward.to_params();
    params.extend(backward.to_params());
    let blocks: Vec<Box<dyn ResidualBlock>> =
        (0..m).map(|t| Box::new(TempoTerm::new(t, m + t, 1.0)) as Box<dyn ResidualBlock>).collect();
    motion_energy(&blocks, &params)
}

/// Final weighted energies of each term family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermEnergies {
    pub rigid: f64,
    pub smooth: f64,
    pub fit: f64,
    pub tempo: f64,
    pub total: f64,
}

/// Forward and backward motions of one frame over its own graph.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionPair {
    pub forward: Option<NodeMotion>,
    pub backward: Option<NodeMotion>,
}

#[derive(Debug, Clone)]
pub struct PairwiseResult {
    /// Motion onto the next frame; absent for the last frame.
    pub forward: Option<NodeMotion>,
    /// Motion onto the previous frame; absent for the first frame.
    pub backward: Option<NodeMotion>,
    pub energies: TermEnergies,
    /// One solver report per ICP round.
    pub reports: Vec<SolverReport>,
    /// Mean valid-correspondence distance after the last round.
    pub mean_distance: f64,
    pub failed: bool,
}

impl PairwiseResult {
    pub fn rounds(&self) -> usize {
        self.reports.len()
    }

    pub fn motions(&self) -> MotionPair {
        MotionPair { forward: self.forward.clone(), backward: self.backward.clone() }
    }
}

/// JSON form: the frame's graph plus both motions and the final energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationDocument {
    pub graph: GraphDocument,
    pub forward: Option<MotionDocument>,
    pub backward: Option<MotionDocument>,
    pub energies: TermEnergies,
    pub mean_distance: f64,
    pub failed: bool,
    pub rounds: usize,
}

impl RegistrationDocument {
    pub fn new(graph: &DeformGraph, result: &PairwiseResult) -> Self {
        Self {
            graph: GraphDocument::from_graph(graph),
            forward: result.forward.as_ref().map(MotionDocument::from_motion),
            backward: result.backward.as_ref().map(MotionDocument::from_motion),
            energies: result.energies,
            mean_distance: result.mean_distance,
            failed: result.failed,
            rounds: result.reports.len(),
        }
    }
}

struct Direction<'a> {
    target: &'a SurfaceIndex,
    offset: usize,
}

#[derive(Default)]
struct BlockRanges {
    rigid: Vec<usize>,
    smooth: Vec<usize>,
    fit: Vec<usize>,
    tempo: Vec<usize>,
}

/// Registers `curr` onto `prev` (backward) and `next` (forward).
///
/// Either neighbour may be absent; its motion and the temporal term are then
/// dropped. `init` warm-starts the motions; identity otherwise.
pub fn register_triplet(
    prev: Option<&SurfaceIndex>,
    curr: &TriMesh,
    graph: &DeformGraph,
    next: Option<&SurfaceIndex>,
    init: Option<&MotionPair>,
    options: &RegistrationOptions,
) -> Result<PairwiseResult> {
    let m = graph.node_count();
    let w = &options.weights;
    let mut dirs = Vec::new();
    let mut params = Vec::new();
    let mut fwd_offset = None;
    let mut bwd_offset = None;
    if let Some(t) = next {
        fwd_offset = Some(dirs.len() * m);
        let start = init.and_then(|i| i.forward.clone()).unwrap_or_else(|| NodeMotion::identity(m));
        params.extend(start.to_params());
        dirs.push(Direction { target: t, offset: dirs.len() * m });
    }
    if let Some(t) = prev {
        bwd_offset = Some(dirs.len() * m);
        let start = init.and_then(|i| i.backward.clone()).unwrap_or_else(|| NodeMotion::identity(m));
        params.extend(start.to_params());
        dirs.push(Direction { target: t, offset: dirs.len() * m });
    }
    if dirs.is_empty() {
        return Ok(PairwiseResult {
            forward: None,
            backward: None,
            energies: TermEnergies::default(),
            reports: Vec::new(),
            mean_distance: 0.0,
            failed: false,
        });
    }
    if params.len() != dirs.len() * m * NODE_PARAMS {
        return Err(crate::Error::InvalidArgument("initial motions do not match the graph".into()));
    }

    let solver_opts = options.solver.clone().with_max_iterations(options.gn_iterations);
    let verts = curr.vertices();
    let mut reports = Vec::new();
    let mut previous_matches: Option<Vec<Vec<(usize, bool)>>> = None;
    let mut energies = TermEnergies::default();
    let point_scale = w.point.sqrt();
    let plane_scale = w.plane.sqrt();

    for _round in 0..options.icp_rounds {
        let mut problem = Problem::new(NODE_PARAMS, dirs.len() * m);
        let mut ranges = BlockRanges::default();
        let mut matches = Vec::with_capacity(dirs.len());
        for d in &dirs {
            let motion = NodeMotion::from_params(&params[d.offset * NODE_PARAMS..(d.offset + m) * NODE_PARAMS]);
            let positions = graph.deform_points(verts, &motion);
            let normals = graph.deform_normals(curr.normals(), &motion);
            let set = find_correspondences(&positions, &normals, d.target, &options.correspondence);
            matches.push(set.entries.iter().map(|c| (c.target_vertex, c.valid)).collect::<Vec<_>>());
            for t in 0..m {
                ranges.rigid.push(problem.blocks().len());
                problem.add(RigidTerm::new(d.offset + t, w.rigid));
            }
            for b in smooth_blocks(graph, d.offset, w.smooth) {
                ranges.smooth.push(problem.blocks().len());
                problem.add_boxed(b);
            }
            for c in set.entries.iter().filter(|c| c.valid) {
                let v = c.source;
                let mut term = DeformedPointsTerm::new(c.point, w.fit);
                term.add_skinned(d.offset, 1.0, &verts[v], graph.weights().row(v), graph.nodes());
                ranges.fit.push(problem.blocks().len());
                problem.add(term.with_scales(point_scale, Some((normals[v], plane_scale))));
            }
        }
        if let (Some(f), Some(b)) = (fwd_offset, bwd_offset) {
            for t in 0..m {
                ranges.tempo.push(problem.blocks().len());
                problem.add(TempoTerm::new(f + t, b + t, w.tempo));
            }
        }
        let (x, report) = solve(&problem, &params, &solver_opts)?;
        let energy_of = |idx: &[usize]| {
            let set: std::collections::HashSet<usize> = idx.iter().copied().collect();
            problem.partial_energy(&x, |i| set.contains(&i))
        };
        energies = TermEnergies {
            rigid: energy_of(&ranges.rigid),
            smooth: energy_of(&ranges.smooth),
            fit: energy_of(&ranges.fit),
            tempo: energy_of(&ranges.tempo),
            total: report.final_energy,
        };
        let decrease = report.initial_energy - report.final_energy;
        let settled = decrease <= options.solver.relative_tolerance * report.initial_energy.max(f64::MIN_POSITIVE);
        params = x;
        reports.push(report);
        let same_matches = previous_matches.as_ref() == Some(&matches);
        previous_matches = Some(matches);
        if settled && same_matches {
            break;
        }
    }

    let motion_at = |offset: usize| NodeMotion::from_params(&params[offset * NODE_PARAMS..(offset + m) * NODE_PARAMS]);
    let forward = fwd_offset.map(motion_at);
    let backward = bwd_offset.map(motion_at);

    // final correspondence quality over both directions
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut diagonal: f64 = curr.bbox_diagonal();
    for d in &dirs {
        let motion = motion_at(d.offset);
        let positions = graph.deform_points(verts, &motion);
        let normals = graph.deform_normals(curr.normals(), &motion);
        let set = find_correspondences(&positions, &normals, d.target, &options.correspondence);
        for c in set.entries.iter().filter(|c| c.valid) {
            sum += (positions[c.source] - c.point).norm();
            count += 1;
        }
        diagonal = diagonal.max(d.target.diagonal());
    }
    let mean_distance = if count == 0 { f64::INFINITY } else { sum / count as f64 };
    let failed = !(mean_distance <= options.failure_fraction * diagonal);
    if failed {
        log::warn!("registration failed: mean correspondence distance {mean_distance:.4e}");
    }
    Ok(PairwiseResult { forward, backward, energies, reports, mean_distance, failed })
}

/// Initial motions for frame `n` from the forward motion of frame `n-1`.
///
/// Each node of the current graph takes the map of the previous frame's node
/// whose deformed position is nearest: the backward motion is its inverse
/// and the forward motion repeats it.
pub fn warm_start(prev_graph: &DeformGraph, prev_forward: &NodeMotion, graph: &DeformGraph, forward: bool, backward: bool) -> MotionPair {
    let moved: Vec<Vec3> = prev_graph
        .nodes()
        .iter()
        .enumerate()
        .map(|(t, g)| g + prev_forward.translation[t])
        .collect();
    let index = PointIndex::new(moved.clone());
    let m = graph.node_count();
    let mut fwd = NodeMotion::identity(m);
    let mut bwd = NodeMotion::identity(m);
    for (t, g) in graph.nodes().iter().enumerate() {
        let Some((s, _)) = index.nearest(g) else { continue };
        let a = prev_forward.affine[s];
        let Some(inv) = a.try_inverse() else { continue };
        let b = prev_forward.translation[s];
        let g_prev = prev_graph.nodes()[s];
        // the previous node map x -> a (x - g_prev) + g_prev + b, anchored at g
        fwd.affine[t] = a;
        fwd.translation[t] = a * (g - g_prev) + g_prev + b - g;
        // and its inverse
        bwd.affine[t] = inv;
        bwd.translation[t] = inv * (g - g_prev - b) + g_prev - g;
    }
    MotionPair { forward: forward.then_some(fwd), backward: backward.then_some(bwd) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::sample_nodes;
    use crate::linalg::{axis_angle, rotation_from_uniform};
    use crate::mesh::fixtures::grid;
    use crate::synth::shapes::icosphere;
    use crate::Mat3;
    use proptest::prelude::*;

    fn ellipsoid(subdiv: usize) -> TriMesh {
        let s = icosphere(1.0, subdiv);
        let v = s.vertices().iter().map(|p| Vec3::new(p.x, 0.7 * p.y, 0.5 * p.z + 0.1 * p.x * p.x)).collect();
        TriMesh::new(v, s.faces().to_vec()).unwrap()
    }

    fn moved(m: &TriMesh, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        m.with_positions(m.vertices().iter().map(f).collect()).unwrap()
    }

    #[test]
    fn identical_meshes_match_themselves() {
        let m = ellipsoid(2);
        let idx = SurfaceIndex::new(m.clone());
        let set = find_correspondences(m.vertices(), m.normals(), &idx, &CorrespondenceOptions::default());
        assert_eq!(set.valid_count(), m.vertex_count());
        for c in &set.entries {
            assert_eq!(c.target_vertex, c.source);
            assert!(c.hit_distance.abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_offset_over_a_plane() {
        let target = grid(10, 1.0, 0.0);
        let source = grid(10, 1.0, 0.1);
        let idx = SurfaceIndex::new(target);
        let set = find_correspondences(source.vertices(), source.normals(), &idx, &CorrespondenceOptions::default());
        assert_eq!(set.valid_count(), source.vertex_count());
        for c in &set.entries {
            assert!((c.hit_distance.abs() - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn hole_in_target_invalidates_covered_sources() {
        let n = 30;
        let source = grid(n, 1.0, 0.05);
        let full = grid(n, 1.0, 0.0);
        let center = Vec3::zeros();
        // disk covering 30% of the unit square
        let radius = (0.3 / std::f64::consts::PI).sqrt();
        let (holed, _) = full
            .filter_faces(|_, f| {
                let c = f.iter().map(|&i| full.vertices()[i]).sum::<Vec3>() / 3.0;
                (c - center).norm() > radius
            })
            .unwrap();
        // oracle: a source vertex is covered when its projection lies in a kept triangle
        let covered = |p: &Vec3| {
            holed.faces().iter().any(|f| {
                let [a, b, c] = f.map(|i| holed.vertices()[i]);
                let cross = |u: Vec3, v: Vec3, w: Vec3| (v.x - u.x) * (w.y - u.y) - (v.y - u.y) * (w.x - u.x);
                let (d0, d1, d2) = (cross(a, b, *p), cross(b, c, *p), cross(c, a, *p));
                let eps = 1e-12;
                (d0 >= -eps && d1 >= -eps && d2 >= -eps) || (d0 <= eps && d1 <= eps && d2 <= eps)
            })
        };
        let expected = source.vertices().iter().filter(|p| covered(p)).count();
        let idx = SurfaceIndex::new(holed.clone());
        let set = find_correspondences(source.vertices(), source.normals(), &idx, &CorrespondenceOptions::default());
        assert_eq!(set.valid_count(), expected);
        let frac = set.valid_fraction();
        assert!((frac - 0.7).abs() < 0.07, "valid fraction {frac}");
        for c in set.entries.iter().filter(|c| c.valid) {
            assert!((c.hit_distance.abs() - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_cone_prunes_flipped_targets() {
        let target = grid(5, 1.0, 0.0);
        let flipped: Vec<Vec3> = target.normals().iter().map(|n| -n).collect();
        let target = TriMesh::with_normals(target.vertices().to_vec(), target.faces().to_vec(), flipped).unwrap();
        let idx = SurfaceIndex::new(target);
        let source = grid(5, 1.0, 0.1);
        let set = find_correspondences(source.vertices(), source.normals(), &idx, &CorrespondenceOptions::default());
        assert_eq!(set.valid_count(), 0);
        assert_eq!(set.hit_rate, 1.0);
    }

    #[test]
    fn rigid_energy_values() {
        assert_eq!(energy_rigid(&NodeMotion::identity(3)), 0.0);
        let r = rotation_from_uniform(0.3, 0.6, 0.9);
        let mut m = NodeMotion::identity(2);
        m.affine[0] = r;
        assert!(energy_rigid(&m) < 1e-12);
        let mut m = NodeMotion::identity(1);
        m.affine[0] = Mat3::identity() * 2.0;
        assert!((energy_rigid(&m) - 27.0).abs() < 1e-12);
    }

    #[test]
    fn smooth_energy_two_nodes() {
        let mesh = grid(4, 1.0 / 3.0, 0.0);
        let g = sample_nodes(&mesh, 5, 4).unwrap();
        assert_eq!(energy_smooth(&g, &NodeMotion::identity(5)), 0.0);
        let mut m = NodeMotion::identity(5);
        m.translation[g.edges()[0].0] = Vec3::new(0.0, 1.0, 0.0);
        // moving one node costs 1 on each directed edge it touches, twice
        let deg = g.neighbors(g.edges()[0].0).len() as f64;
        assert!((energy_smooth(&g, &m) - 2.0 * deg).abs() < 1e-12);
    }

    #[test]
    fn fit_energy_offsets() {
        let set = CorrespondenceSet {
            entries: vec![Correspondence {
                source: 0,
                target_vertex: 0,
                point: Vec3::zeros(),
                normal: Vec3::z(),
                hit_distance: 1.0,
                valid: true,
            }],
            hit_rate: 1.0,
            median_distance: 1.0,
        };
        let n = [Vec3::z()];
        assert!((energy_fit(&set, &[Vec3::z()], &n, 0.1, 1.0) - 1.1).abs() < 1e-12);
        assert!((energy_fit(&set, &[Vec3::x()], &n, 0.1, 1.0) - 0.1).abs() < 1e-12);
        assert_eq!(energy_fit(&set, &[Vec3::zeros()], &n, 0.1, 1.0), 0.0);
    }

    #[test]
    fn tempo_energy_values() {
        let mut f = NodeMotion::identity(1);
        let mut b = NodeMotion::identity(1);
        f.translation[0] = Vec3::x();
        b.translation[0] = -Vec3::x();
        assert_eq!(energy_tempo(&f, &b), 0.0);
        b.translation[0] = Vec3::x();
        assert!((energy_tempo(&f, &b) - 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn tempo_vanishes_on_inverse_pairs(u in prop::array::uniform3(0.0..1.0f64), t in prop::array::uniform3(-2.0..2.0f64)) {
            let r = rotation_from_uniform(u[0], u[1], u[2]);
            let t = Vec3::from(t);
            let mut f = NodeMotion::identity(1);
            let mut b = NodeMotion::identity(1);
            f.affine[0] = r;
            f.translation[0] = t;
            b.affine[0] = r.transpose();
            b.translation[0] = -(r.transpose() * t);
            prop_assert!(energy_tempo(&f, &b) < 1e-20);
            b.translation[0] += Vec3::new(1e-3, 0.0, 0.0);
            prop_assert!(energy_tempo(&f, &b) > 0.0);
        }

        #[test]
        fn global_rigid_has_no_rigid_or_smooth_cost(u in prop::array::uniform3(0.0..1.0f64), t in prop::array::uniform3(-2.0..2.0f64)) {
            let mesh = icosphere(1.0, 1);
            let g = sample_nodes(&mesh, 8, 4).unwrap();
            let m = NodeMotion::global_rigid(g.nodes(), &rotation_from_uniform(u[0], u[1], u[2]), &Vec3::from(t));
            prop_assert!(energy_rigid(&m) < 1e-20);
            prop_assert!(energy_smooth(&g, &m) < 1e-20);
        }

        #[test]
        fn rigid_energy_zero_iff_orthonormal(entries in prop::array::uniform9(-1.5..1.5f64)) {
            let a = Mat3::from_row_slice(&entries);
            let mut m = NodeMotion::identity(1);
            m.affine[0] = a;
            let e = energy_rigid(&m);
            let ortho = (a.transpose() * a - Mat3::identity()).norm();
            prop_assert_eq!(e < 1e-12, ortho < 1e-6);
        }
    }

    #[test]
    fn static_triplet_stays_at_identity() {
        let m = ellipsoid(3);
        let g = sample_nodes(&m, 20, 4).unwrap();
        let idx = SurfaceIndex::new(m.clone());
        let r = register_triplet(Some(&idx), &m, &g, Some(&idx), None, &RegistrationOptions::default()).unwrap();
        for motion in [r.forward.as_ref().unwrap(), r.backward.as_ref().unwrap()] {
            for t in 0..motion.len() {
                assert!((motion.affine[t] - Mat3::identity()).norm() < 1e-4);
                assert!(motion.translation[t].norm() < 1e-4);
            }
        }
        assert!(r.energies.fit < 1e-10);
        assert!(!r.failed);
        assert!(r.reports.iter().all(|rep| rep.is_monotone()));
    }

    #[test]
    fn boundary_frame_registers_one_direction() {
        let m = ellipsoid(3);
        let rot = axis_angle(&Vec3::new(0.0, 0.0, 1.0), 5f64.to_radians());
        let next = moved(&m, |p| rot * p);
        let g = sample_nodes(&m, 20, 4).unwrap();
        let idx = SurfaceIndex::new(next.clone());
        let r = register_triplet(None, &m, &g, Some(&idx), None, &RegistrationOptions::default()).unwrap();
        assert!(r.backward.is_none());
        assert_eq!(r.energies.tempo, 0.0);
        let fwd = r.forward.unwrap();
        let out = g.deform_points(m.vertices(), &fwd);
        let rms = (out.iter().zip(next.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / out.len() as f64).sqrt();
        assert!(rms < 1e-3 * m.bbox_diagonal(), "rms {rms}");
    }

    #[test]
    fn rigid_triplet_recovers_rotations() {
        let curr = ellipsoid(4);
        let rot = axis_angle(&Vec3::new(0.3, 1.0, 0.2).normalize(), 10f64.to_radians());
        let c = curr.centroid();
        let prev = moved(&curr, |p| rot.transpose() * (p - c) + c);
        let next = moved(&curr, |p| rot * (p - c) + c);
        let g = sample_nodes(&curr, 28, 4).unwrap();
        let r = register_triplet(
            Some(&SurfaceIndex::new(prev.clone())),
            &curr,
            &g,
            Some(&SurfaceIndex::new(next.clone())),
            None,
            &RegistrationOptions::default(),
        )
        .unwrap();
        let diag = curr.bbox_diagonal();
        for (motion, truth, target) in [(r.forward.unwrap(), rot, &next), (r.backward.unwrap(), rot.transpose(), &prev)] {
            let worst = motion.affine.iter().map(|a| (a - truth).norm()).fold(0.0, f64::max);
            assert!(worst < 1e-3, "affine error {worst}");
            let out = g.deform_points(curr.vertices(), &motion);
            let rms = (out.iter().zip(target.vertices()).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / out.len() as f64).sqrt();
            assert!(rms < 1e-3 * diag, "rms {rms}");
        }
    }

    #[test]
    fn warm_start_inverts_the_previous_forward_motion() {
        let m = ellipsoid(2);
        let g = sample_nodes(&m, 12, 4).unwrap();
        let rot = axis_angle(&Vec3::new(1.0, 2.0, 0.5).normalize(), 0.2);
        let t = Vec3::new(0.1, -0.2, 0.05);
        let fwd = NodeMotion::global_rigid(g.nodes(), &rot, &t);
        let curr = moved(&m, |p| rot * p + t);
        let gc = sample_nodes(&curr, 12, 4).unwrap();
        let pair = warm_start(&g, &fwd, &gc, true, true);
        let back = pair.backward.unwrap();
        let restored = gc.deform_points(curr.vertices(), &back);
        for (a, b) in restored.iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
        // constant-velocity guess applies the same rigid motion again
        let again = gc.deform_points(curr.vertices(), pair.forward.as_ref().unwrap());
        for (a, b) in again.iter().zip(curr.vertices()) {
            assert!((a - (rot * b + t)).norm() < 1e-12);
        }
    }
}
