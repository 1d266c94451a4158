//! Global alignment of all frames into a reference pose and fusion of the
//! aligned partial surfaces into one closed template.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::{decompose_vertex_motion, default_node_count, sample_nodes, DeformGraph, NodeMotion, RigidMotion, NODE_PARAMS};
use crate::mesh::{Bvh, PointIndex, TriMesh};
use crate::registration::PairwiseResult;
use crate::solver::{solve, Problem, SolverOptions, SolverReport};
use crate::terms::{DeformedPointsTerm, RigidTerm, SmoothTerm};
use crate::{Error, Mat3, Result, Vec3};

/// Longest sequence the alignment accepts.
pub const MAX_FRAMES: usize = 370;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentWeights {
    pub rigid: f64,
    pub smooth: f64,
    pub corr: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        Self { rigid: 150.0, smooth: 5.0, corr: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentOptions {
    pub weights: AlignmentWeights,
    pub reference: usize,
    /// Gauss-Newton iterations after each frame is introduced.
    pub iterations_per_frame: usize,
    /// Iterations of the final joint solve.
    pub polish_iterations: usize,
    pub max_frames: usize,
    /// Correspondence pairs whose forward image lies farther than this
    /// fraction of the diagonal from the next frame are skipped.
    pub gap_fraction: f64,
    /// Frames whose residual exceeds this fraction of the diagonal are
    /// excluded from fusion.
    pub exclusion_fraction: f64,
    pub solver: SolverOptions,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self {
            weights: AlignmentWeights::default(),
            reference: 0,
            iterations_per_frame: 3,
            polish_iterations: 10,
            max_frames: MAX_FRAMES,
            gap_fraction: 0.01,
            exclusion_fraction: 0.05,
            solver: SolverOptions::default(),
        }
    }
}

/// Per-frame motions into the reference pose, over each frame's own graph.
#[derive(Debug, Clone)]
pub struct GlobalAlignment {
    pub reference: usize,
    pub motions: Vec<NodeMotion>,
    /// RMS correspondence residual of the pairs touching each frame.
    pub residuals: Vec<f64>,
    pub excluded: Vec<bool>,
    pub reports: Vec<SolverReport>,
}

/// One alignment correspondence: vertex `vertex` of frame `n` against
/// the point `q` (its forward image) skinned by vertex `anchor` of `n+1`.
#[derive(Debug, Clone, Copy)]
struct CorrPair {
    frame: usize,
    vertex: usize,
    q: Vec3,
    anchor: usize,
}

fn corr_pairs(frames: &[TriMesh], graphs: &[DeformGraph], forwards: &[Option<&NodeMotion>], max_gap: f64) -> Vec<CorrPair> {
    let mut out = Vec::new();
    for n in 0..frames.len().saturating_sub(1) {
        let Some(fwd) = forwards[n] else { continue };
        let images = graphs[n].deform_points(frames[n].vertices(), fwd);
        let next = &frames[n + 1];
        let index = PointIndex::new(next.vertices().to_vec());
        let bvh = max_gap.is_finite().then(|| Bvh::new(next));
        let found: Vec<Option<CorrPair>> = images
            .par_iter()
            .enumerate()
            .map(|(v, q)| {
                if let Some(b) = &bvh {
                    let c = b.closest_point(q)?;
                    if c.distance > max_gap {
                        return None;
                    }
                }
                let (anchor, _) = index.nearest(q)?;
                Some(CorrPair { frame: n, vertex: v, q: *q, anchor })
            })
            .collect();
        out.extend(found.into_iter().flatten());
    }
    out
}

fn corr_term(pair: &CorrPair, frames: &[TriMesh], graphs: &[DeformGraph], offsets: &[usize], weight: f64) -> DeformedPointsTerm {
    let n = pair.frame;
    let mut term = DeformedPointsTerm::new(Vec3::zeros(), weight);
    term.add_skinned(offsets[n], 1.0, &frames[n].vertices()[pair.vertex], graphs[n].weights().row(pair.vertex), graphs[n].nodes());
    term.add_skinned(offsets[n + 1], -1.0, &pair.q, graphs[n + 1].weights().row(pair.anchor), graphs[n + 1].nodes());
    term
}

fn group_offsets(graphs: &[DeformGraph]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    let mut acc = 0;
    for g in graphs {
        offsets.push(acc);
        acc += g.node_count();
    }
    offsets.push(acc);
    offsets
}

fn pack(motions: &[NodeMotion]) -> Vec<f64> {
    motions.iter().flat_map(|m| m.to_params()).collect()
}

fn unpack(params: &[f64], offsets: &[usize]) -> Vec<NodeMotion> {
    offsets
        .windows(2)
        .map(|w| NodeMotion::from_params(&params[w[0] * NODE_PARAMS..w[1] * NODE_PARAMS]))
        .collect()
}

/// Alignment correspondence energy: for every adjacent pair, the squared gap
/// between a vertex sent directly to the reference and the same vertex sent
/// forward first. Pairs farther than `max_gap` from frame `n+1` are skipped.
pub fn energy_corr(
    frames: &[TriMesh],
    graphs: &[DeformGraph],
    motions: &[NodeMotion],
    forwards: &[Option<&NodeMotion>],
    max_gap: f64,
) -> f64 {
    let offsets = group_offsets(graphs);
    let params = pack(motions);
    corr_pairs(frames, graphs, forwards, max_gap)
        .iter()
        .map(|p| {
            let term = corr_term(p, frames, graphs, &offsets, 1.0);
            let slices: Vec<&[f64]> = crate::solver::ResidualBlock::groups(&term)
                .iter()
                .map(|&g| &params[g * NODE_PARAMS..(g + 1) * NODE_PARAMS])
                .collect();
            term.combination(&slices).norm_squared()
        })
        .sum()
}

/// Node-wise composition: each node of `graph` is first moved by `step`,
/// then by the motion of the nearest node of `onward_graph`.
fn compose_motion(graph: &DeformGraph, step: &NodeMotion, onward_graph: &DeformGraph, onward: &NodeMotion) -> NodeMotion {
    let index = PointIndex::new(onward_graph.nodes().to_vec());
    let mut out = NodeMotion::identity(graph.node_count());
    for (t, g) in graph.nodes().iter().enumerate() {
        let moved = g + step.translation[t];
        let Some((s, _)) = index.nearest(&moved) else { continue };
        let gs = onward_graph.nodes()[s];
        out.affine[t] = onward.affine[s] * step.affine[t];
        out.translation[t] = onward.affine[s] * (moved - gs) + gs + onward.translation[s] - g;
    }
    out
}

/// Chains the pairwise motions into the reference pose and refines them
/// jointly, introducing one frame at a time.
pub fn align_all_frames(
    frames: &[TriMesh],
    graphs: &[DeformGraph],
    pairwise: &[PairwiseResult],
    options: &AlignmentOptions,
) -> Result<GlobalAlignment> {
    let count = frames.len();
    if count > options.max_frames || count > MAX_FRAMES {
        return Err(Error::TooManyFrames { frames: count, max: options.max_frames.min(MAX_FRAMES) });
    }
    if count == 0 {
        return Err(Error::InvalidArgument("no frames to align".into()));
    }
    if graphs.len() != count || pairwise.len() != count {
        return Err(Error::InvalidArgument("frames, graphs and registrations differ in length".into()));
    }
    let reference = options.reference;
    if reference >= count {
        return Err(Error::IndexOutOfRange { index: reference, len: count });
    }
    let diag = frames.iter().map(TriMesh::bbox_diagonal).fold(0.0, f64::max);
    let offsets = group_offsets(graphs);
    let forwards: Vec<Option<&NodeMotion>> = pairwise.iter().map(|p| p.forward.as_ref()).collect();
    let pairs = corr_pairs(frames, graphs, &forwards, options.gap_fraction * diag);
    let w = &options.weights;

    let mut motions: Vec<NodeMotion> = graphs.iter().map(|g| NodeMotion::identity(g.node_count())).collect();
    let mut order: Vec<usize> = (reference + 1..count).collect();
    order.extend((0..reference).rev());
    let mut introduced = vec![false; count];
    introduced[reference] = true;
    let mut reports = Vec::new();

    let build = |introduced: &[bool]| {
        let mut problem = Problem::new(NODE_PARAMS, offsets[count]);
        for n in 0..count {
            let fixed = n == reference || !introduced[n];
            for t in 0..graphs[n].node_count() {
                problem.set_fixed(offsets[n] + t, fixed);
            }
            if fixed {
                continue;
            }
            for t in 0..graphs[n].node_count() {
                problem.add(RigidTerm::new(offsets[n] + t, w.rigid));
            }
            let nodes = graphs[n].nodes();
            for t in 0..graphs[n].node_count() {
                for &k in graphs[n].neighbors(t) {
                    problem.add(SmoothTerm::new(offsets[n] + t, offsets[n] + k, &nodes[t], &nodes[k], w.smooth));
                }
            }
        }
        for p in &pairs {
            if introduced[p.frame] && introduced[p.frame + 1] {
                problem.add(corr_term(p, frames, graphs, &offsets, w.corr));
            }
        }
        problem
    };

    for &n in &order {
        motions[n] = if n > reference {
            let step = pairwise[n].backward.clone().unwrap_or_else(|| NodeMotion::identity(graphs[n].node_count()));
            compose_motion(&graphs[n], &step, &graphs[n - 1], &motions[n - 1])
        } else {
            let step = pairwise[n].forward.clone().unwrap_or_else(|| NodeMotion::identity(graphs[n].node_count()));
            compose_motion(&graphs[n], &step, &graphs[n + 1], &motions[n + 1])
        };
        introduced[n] = true;
        if options.iterations_per_frame > 0 {
            let problem = build(&introduced);
            let (x, report) = solve(&problem, &pack(&motions), &options.solver.clone().with_max_iterations(options.iterations_per_frame))?;
            motions = unpack(&x, &offsets);
            reports.push(report);
        }
    }
    if options.polish_iterations > 0 && count > 1 {
        let problem = build(&introduced);
        let (x, report) = solve(&problem, &pack(&motions), &options.solver.clone().with_max_iterations(options.polish_iterations))?;
        motions = unpack(&x, &offsets);
        reports.push(report);
    }

    // residual statistics per frame
    let params = pack(&motions);
    let mut sums = vec![0.0; count];
    let mut counts = vec![0usize; count];
    for p in &pairs {
        let term = corr_term(p, frames, graphs, &offsets, 1.0);
        let slices: Vec<&[f64]> = crate::solver::ResidualBlock::groups(&term)
            .iter()
            .map(|&g| &params[g * NODE_PARAMS..(g + 1) * NODE_PARAMS])
            .collect();
        let e = term.combination(&slices).norm_squared();
        for f in [p.frame, p.frame + 1] {
            sums[f] += e;
            counts[f] += 1;
        }
    }
    let residuals: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { (s / c as f64).sqrt() })
        .collect();
    let excluded: Vec<bool> = (0..count)
        .map(|n| n != reference && (!motions[n].is_finite() || !(residuals[n] <= options.exclusion_fraction * diag)))
        .collect();
    for (n, &e) in excluded.iter().enumerate() {
        if e {
            log::warn!("frame {n} excluded from fusion (residual {:.4e})", residuals[n]);
        }
    }
    Ok(GlobalAlignment { reference, motions, residuals, excluded, reports })
}

/// A frame deformed into the reference pose.
#[derive(Debug, Clone)]
pub struct AlignedFrame {
    pub frame: usize,
    /// Aligned positions with the input normals rotated by each vertex's
    /// rigid motion.
    pub mesh: TriMesh,
    /// Per-vertex rigid motion from the frame into the reference pose.
    pub motions: Vec<RigidMotion>,
}

pub fn align_frame(frame: usize, mesh: &TriMesh, graph: &DeformGraph, motion: &NodeMotion) -> Result<AlignedFrame> {
    let motions: Vec<RigidMotion> = mesh
        .vertices()
        .par_iter()
        .enumerate()
        .map(|(i, v)| decompose_vertex_motion(v, graph.weights().row(i), graph.nodes(), motion))
        .collect::<Result<_>>()?;
    let positions: Vec<Vec3> = mesh.vertices().iter().zip(&motions).map(|(v, m)| m.apply(v)).collect();
    let normals: Vec<Vec3> = mesh.normals().iter().zip(&motions).map(|(n, m)| (m.rotation * n).normalize()).collect();
    let mesh = TriMesh::with_normals(positions, mesh.faces().to_vec(), normals)?;
    Ok(AlignedFrame { frame, mesh, motions })
}

/// Points with unit outward normals.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OrientedCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
}

impl OrientedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Samples every triangle on a barycentric lattice no coarser than
    /// `spacing`, interpolating the vertex normals.
    pub fn sample_surface(mesh: &TriMesh, spacing: f64) -> Self {
        let mut out = Self::default();
        let v = mesh.vertices();
        let nrm = mesh.normals();
        for f in mesh.faces() {
            let [a, b, c] = [v[f[0]], v[f[1]], v[f[2]]];
            let longest = (b - a).norm().max((c - b).norm()).max((a - c).norm());
            let steps = ((longest / spacing).ceil() as usize).max(1);
            for i in 0..=steps {
                for j in 0..=steps - i {
                    let (u, w) = (i as f64 / steps as f64, j as f64 / steps as f64);
                    let s = 1.0 - u - w;
                    let n = nrm[f[0]] * s + nrm[f[1]] * u + nrm[f[2]] * w;
                    let len = n.norm();
                    if len < 1e-12 {
                        continue;
                    }
                    out.points.push(a * s + b * u + c * w);
                    out.normals.push(n / len);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionOptions {
    /// Voxel size as a fraction of the cloud's bounding-box diagonal
    /// (`diagonal / resolution`) unless `voxel_size` is set.
    pub resolution: f64,
    pub voxel_size: Option<f64>,
    pub truncation_voxels: f64,
    /// Drop every connected piece of the output but the largest.
    pub keep_largest: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { resolution: 256.0, voxel_size: None, truncation_voxels: 3.0, keep_largest: true }
    }
}

impl FusionOptions {
    pub fn voxel_for(&self, diagonal: f64) -> f64 {
        self.voxel_size.unwrap_or(diagonal / self.resolution)
    }
}

struct Grid {
    origin: Vec3,
    voxel: f64,
    dims: [usize; 3],
}

impl Grid {
    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    fn position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Merges the clouds, dropping exact duplicates, in a canonical order.
fn canonical_points(clouds: &[OrientedCloud]) -> Vec<(Vec3, Vec3)> {
    let mut all: Vec<(Vec3, Vec3)> = clouds
        .iter()
        .flat_map(|c| c.points.iter().copied().zip(c.normals.iter().copied()))
        .collect();
    let key = |p: &(Vec3, Vec3)| [p.0.x, p.0.y, p.0.z, p.1.x, p.1.y, p.1.z].map(f64::to_bits);
    all.sort_by_key(key);
    all.dedup_by(|a, b| key(a) == key(b));
    all
}

/// Fuses oriented points into a closed surface: a truncated signed-distance
/// field on a voxel grid, sign-completed by flood fill and triangulated with
/// marching cubes.
pub fn fuse_aligned_frames(clouds: &[OrientedCloud], options: &FusionOptions) -> Result<TriMesh> {
    for c in clouds {
        if c.normals.len() != c.points.len() {
            return Err(Error::InvalidArgument("every fused point needs a normal".into()));
        }
    }
    let points = canonical_points(clouds);
    if points.is_empty() {
        return Err(Error::InvalidArgument("nothing to fuse".into()));
    }
    if points.iter().any(|(p, n)| !p.iter().all(|x| x.is_finite()) || !((n.norm() - 1.0).abs() < 1e-6)) {
        return Err(Error::InvalidArgument("fused points must be finite with unit normals".into()));
    }
    let positions: Vec<Vec3> = points.iter().map(|p| p.0).collect();
    let (lo, hi) = crate::mesh::bounds_of(&positions);
    let diag = (hi - lo).norm();
    let voxel = options.voxel_for(diag);
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {voxel} must be positive")));
    }
    let trunc = options.truncation_voxels * voxel;
    let pad = trunc + 2.0 * voxel;
    let origin = lo - Vec3::repeat(pad);
    let ext = hi - lo + Vec3::repeat(2.0 * pad);
    let dims = [0, 1, 2].map(|a| (ext[a] / voxel).ceil() as usize + 1);
    let grid = Grid { origin, voxel, dims };

    // samples within the truncation distance of some point
    let mut band = vec![false; grid.len()];
    let reach = options.truncation_voxels.ceil() as isize;
    for p in &positions {
        let c = (p - origin) / voxel;
        let base = [c.x.round() as isize, c.y.round() as isize, c.z.round() as isize];
        for dk in -reach..=reach {
            for dj in -reach..=reach {
                for di in -reach..=reach {
                    let (i, j, k) = (base[0] + di, base[1] + dj, base[2] + dk);
                    if i < 0 || j < 0 || k < 0 || i as usize >= dims[0] || j as usize >= dims[1] || k as usize >= dims[2] {
                        continue;
                    }
                    let (i, j, k) = (i as usize, j as usize, k as usize);
                    if (grid.position(i, j, k) - p).norm() <= trunc {
                        band[grid.index(i, j, k)] = true;
                    }
                }
            }
        }
    }
    let index = PointIndex::new(positions.clone());
    let band_ids: Vec<usize> = (0..grid.len()).filter(|&i| band[i]).collect();
    let band_values: Vec<f64> = band_ids
        .par_iter()
        .map(|&id| {
            let [i, j, k] = grid.coords(id);
            let x = grid.position(i, j, k);
            let mut near = index.within(&x, trunc);
            near.sort_by_key(|e| e.0);
            let sum: f64 = near.iter().map(|&(q, _)| points[q].1.dot(&(x - points[q].0))).sum();
            sum / near.len().max(1) as f64
        })
        .collect();

    // flood the outside from the grid boundary through samples off the band
    let mut outside = vec![false; grid.len()];
    let mut queue = VecDeque::new();
    for id in 0..grid.len() {
        let [i, j, k] = grid.coords(id);
        let on_face = i == 0 || j == 0 || k == 0 || i + 1 == dims[0] || j + 1 == dims[1] || k + 1 == dims[2];
        if on_face && !band[id] {
            outside[id] = true;
            queue.push_back(id);
        }
    }
    while let Some(id) = queue.pop_front() {
        let [i, j, k] = grid.coords(id);
        let mut visit = |i: usize, j: usize, k: usize| {
            let n = grid.index(i, j, k);
            if !band[n] && !outside[n] {
                outside[n] = true;
                queue.push_back(n);
            }
        };
        if i > 0 {
            visit(i - 1, j, k);
        }
        if i + 1 < dims[0] {
            visit(i + 1, j, k);
        }
        if j > 0 {
            visit(i, j - 1, k);
        }
        if j + 1 < dims[1] {
            visit(i, j + 1, k);
        }
        if k > 0 {
            visit(i, j, k - 1);
        }
        if k + 1 < dims[2] {
            visit(i, j, k + 1);
        }
    }
    let mut values: Vec<f64> = outside.iter().map(|&o| if o { trunc } else { -trunc }).collect();
    for (&id, &v) in band_ids.iter().zip(&band_values) {
        values[id] = v;
    }

    let (vertices, faces) = marching_cubes(&grid, &values);
    if faces.is_empty() {
        return Err(Error::Stage { stage: "fusion".into(), message: "the fused field has no surface".into() });
    }
    let mesh = TriMesh::new(vertices, faces)?;
    if options.keep_largest {
        largest_component(&mesh)
    } else {
        Ok(mesh)
    }
}

/// Corner offsets of a cube cell, bit 0 = x, bit 1 = y, bit 2 = z.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
];

/// Cube faces as (fixed axis, side), corners listed counter-clockwise seen
/// from outside the cell.
fn face_cycles() -> [[usize; 4]; 6] {
    let mut out = [[0; 4]; 6];
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |a: usize, b: usize| (side << axis) | (a << u) | (b << v);
            let mut cycle = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            if side == 0 {
                cycle.reverse();
            }
            out[axis * 2 + side] = cycle;
        }
    }
    out
}

/// Surface loops of one inside-corner mask, as corner pairs of the cut edges.
///
/// Each face contributes segments running from a crossing where its cycle
/// enters the inside to the crossing where it leaves; on faces with four
/// crossings the inside corners are kept apart. Chaining the segments gives
/// closed loops that agree across neighbouring cells.
fn cell_loops(mask: usize) -> Vec<Vec<(usize, usize)>> {
    let inside = |c: usize| mask >> c & 1 == 1;
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut next: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
    for cycle in face_cycles() {
        let mut enters = Vec::new();
        let mut leaves = Vec::new();
        for e in 0..4 {
            let (a, b) = (cycle[e], cycle[(e + 1) % 4]);
            match (inside(a), inside(b)) {
                (false, true) => enters.push((e, key(a, b))),
                (true, false) => leaves.push((e, key(a, b))),
                _ => {}
            }
        }
        for &(e, from) in &enters {
            // the first leaving crossing after this entry along the cycle
            let to = leaves.iter().min_by_key(|(l, _)| (l + 4 - e) % 4).map(|&(_, k)| k);
            if let Some(to) = to {
                next.insert(from, to);
            }
        }
    }
    let mut starts: Vec<(usize, usize)> = next.keys().copied().collect();
    starts.sort_unstable();
    let mut seen = std::collections::HashSet::new();
    let mut loops = Vec::new();
    for s in starts {
        if seen.contains(&s) {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = s;
        while seen.insert(e) {
            lp.push(e);
            e = next[&e];
        }
        loops.push(lp);
    }
    loops
}

/// True when no fan diagonal from the first loop vertex joins two cut edges
/// of the same cube face.
fn fan_is_safe(lp: &[(usize, usize)]) -> bool {
    let (a0, b0) = lp[0];
    lp.iter().skip(2).take(lp.len().saturating_sub(3)).all(|&(a, b)| {
        let all = a0 & b0 & a & b;
        let any = a0 | b0 | a | b;
        (all | !any) & 7 == 0
    })
}

const EDGE_T_MIN: f64 = 1e-4;

fn marching_cubes(grid: &Grid, values: &[f64]) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let table: Vec<Vec<Vec<(usize, usize)>>> = (0..256).map(cell_loops).collect();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    let corner_position = |id: usize| {
        let [i, j, k] = grid.coords(id);
        grid.position(i, j, k)
    };
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let ids = CORNERS.map(|c| grid.index(i + c[0], j + c[1], k + c[2]));
                let mask = (0..8).filter(|&c| values[ids[c]] < 0.0).fold(0, |m, c| m | 1 << c);
                if mask == 0 || mask == 255 {
                    continue;
                }
                for lp in &table[mask] {
                    let ring: Vec<usize> = lp
                        .iter()
                        .map(|&(a, b)| {
                            let key = (ids[a].min(ids[b]), ids[a].max(ids[b]));
                            *edge_vertex.entry(key).or_insert_with(|| {
                                let (fa, fb) = (values[key.0], values[key.1]);
                                let s = (fa / (fa - fb)).clamp(EDGE_T_MIN, 1.0 - EDGE_T_MIN);
                                let (pa, pb) = (corner_position(key.0), corner_position(key.1));
                                vertices.push(pa + (pb - pa) * s);
                                vertices.len() - 1
                            })
                        })
                        .collect();
                    if fan_is_safe(lp) {
                        for w in 1..ring.len() - 1 {
                            faces.push([ring[0], ring[w], ring[w + 1]]);
                        }
                    } else {
                        // a loop crossing a face twice: a fan diagonal could
                        // duplicate one made by the neighbouring cell
                        let centre = ring.iter().map(|&v| vertices[v]).sum::<Vec3>() / ring.len() as f64;
                        vertices.push(centre);
                        let c = vertices.len() - 1;
                        for w in 0..ring.len() {
                            faces.push([c, ring[w], ring[(w + 1) % ring.len()]]);
                        }
                    }
                }
            }
        }
    }
    (vertices, faces)
}

/// Keeps the connected piece with the most faces (ties: lowest first face).
pub fn largest_component(mesh: &TriMesh) -> Result<TriMesh> {
    let labels = face_components(mesh);
    let count = labels.iter().copied().max().map_or(0, |m| m + 1);
    if count <= 1 {
        return Ok(mesh.clone());
    }
    let mut sizes = vec![0usize; count];
    for &l in &labels {
        sizes[l] += 1;
    }
    let best = (0..count).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a))).unwrap_or(0);
    Ok(mesh.filter_faces(|f, _| labels[f] == best)?.0)
}

/// Component label of each face, numbered in order of first face.
pub fn face_components(mesh: &TriMesh) -> Vec<usize> {
    let n = mesh.vertex_count();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for f in mesh.faces() {
        let a = find(&mut parent, f[0]);
        for &v in &f[1..] {
            let b = find(&mut parent, v);
            if a != b {
                let (lo, hi) = (a.min(b), a.max(b));
                parent[hi] = lo;
            }
        }
    }
    let mut label_of_root = HashMap::new();
    mesh.faces()
        .iter()
        .map(|f| {
            let r = find(&mut parent, f[0]);
            let next = label_of_root.len();
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}

/// Merges vertices closer than `tolerance` (in index order) and drops faces
/// that collapse.
pub fn weld_vertices(mesh: &TriMesh, tolerance: f64) -> Result<TriMesh> {
    let index = PointIndex::new(mesh.vertices().to_vec());
    let mut target = vec![usize::MAX; mesh.vertex_count()];
    let mut vertices = Vec::new();
    for v in 0..mesh.vertex_count() {
        if target[v] != usize::MAX {
            continue;
        }
        let id = vertices.len();
        vertices.push(mesh.vertices()[v]);
        for (u, _) in index.within(&mesh.vertices()[v], tolerance) {
            if target[u] == usize::MAX {
                target[u] = id;
            }
        }
    }
    let faces: Vec<[usize; 3]> = mesh
        .faces()
        .iter()
        .map(|f| f.map(|v| target[v]))
        .filter(|f| f[0] != f[1] && f[1] != f[2] && f[0] != f[2])
        .collect();
    // placeholder normals; filtering recomputes them and drops unused vertices
    let n = vertices.len();
    Ok(TriMesh::with_normals(vertices, faces, vec![Vec3::z(); n])?.filter_faces(|_, _| true)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateOptions {
    pub fusion: FusionOptions,
    /// Template vertices per graph node.
    pub vertices_per_node: f64,
    pub skin_neighbors: usize,
}

impl Default for TemplateOptions {
    fn default() -> Self {
        Self { fusion: FusionOptions::default(), vertices_per_node: 90.0, skin_neighbors: crate::deform::DEFAULT_SKIN_NEIGHBORS }
    }
}

/// Fused template with its own graph and per-vertex source frame.
#[derive(Debug, Clone)]
pub struct GlobalTemplate {
    pub mesh: TriMesh,
    pub graph: DeformGraph,
    pub provenance: Vec<usize>,
    pub voxel_size: f64,
}

/// Fuses the aligned frames and builds the template graph.
pub fn build_template(aligned: &[AlignedFrame], options: &TemplateOptions) -> Result<GlobalTemplate> {
    if aligned.is_empty() {
        return Err(Error::InvalidArgument("no aligned frames to fuse".into()));
    }
    let all: Vec<Vec3> = aligned.iter().flat_map(|a| a.mesh.vertices().iter().copied()).collect();
    let (lo, hi) = crate::mesh::bounds_of(&all);
    let voxel = options.fusion.voxel_for((hi - lo).norm());
    let clouds: Vec<OrientedCloud> = aligned.par_iter().map(|a| OrientedCloud::sample_surface(&a.mesh, voxel)).collect();
    let fusion = FusionOptions { voxel_size: Some(voxel), ..options.fusion.clone() };
    let mesh = fuse_aligned_frames(&clouds, &fusion)?;
    let frame_of: Vec<usize> = aligned.iter().flat_map(|a| std::iter::repeat_n(a.frame, a.mesh.vertex_count())).collect();
    let index = PointIndex::new(all);
    let provenance: Vec<usize> = mesh
        .vertices()
        .par_iter()
        .map(|v| index.nearest(v).map_or(0, |(i, _)| frame_of[i]))
        .collect();
    let nodes = default_node_count(mesh.vertex_count(), options.vertices_per_node);
    let graph = sample_nodes(&mesh, nodes, options.skin_neighbors)?;
    Ok(GlobalTemplate { mesh, graph, provenance, voxel_size: voxel })
}

/// Rotation error (radians) between two affine matrices' polar rotations.
pub fn rotation_error(a: &Mat3, b: &Mat3) -> f64 {
    match (crate::linalg::polar_rotation(a, 0.0), crate::linalg::polar_rotation(b, 0.0)) {
        (Some(ra), Some(rb)) => crate::linalg::rotation_angle_between(&ra, &rb),
        _ => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{axis_angle, rotation_from_uniform};
    use crate::mesh::hausdorff_mean;
    use crate::registration::{register_triplet, RegistrationOptions, SurfaceIndex};
    use crate::synth::shapes::icosphere;
    use proptest::prelude::*;

    fn ellipsoid(subdiv: usize) -> TriMesh {
        let s = icosphere(1.0, subdiv);
        let v = s.vertices().iter().map(|p| Vec3::new(p.x, 0.7 * p.y, 0.5 * p.z + 0.1 * p.x * p.x)).collect();
        TriMesh::new(v, s.faces().to_vec()).unwrap()
    }

    fn moved(m: &TriMesh, f: impl Fn(&Vec3) -> Vec3) -> TriMesh {
        m.with_positions(m.vertices().iter().map(f).collect()).unwrap()
    }

    fn fake_pairwise(forward: Option<NodeMotion>, backward: Option<NodeMotion>) -> PairwiseResult {
        PairwiseResult {
            forward,
            backward,
            energies: Default::default(),
            reports: Vec::new(),
            mean_distance: 0.0,
            failed: false,
        }
    }

    #[test]
    fn sphere_cloud_fuses_to_a_closed_sphere() {
        let s = icosphere(1.0, 4);
        let opts = FusionOptions { resolution: 100.0, ..Default::default() };
        let voxel = opts.voxel_for(2.0 * 3f64.sqrt());
        let cloud = OrientedCloud::sample_surface(&s, voxel);
        let m = fuse_aligned_frames(std::slice::from_ref(&cloud), &opts).unwrap();
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        let volume: f64 = m
            .faces()
            .iter()
            .map(|f| m.vertices()[f[0]].dot(&m.vertices()[f[1]].cross(&m.vertices()[f[2]])) / 6.0)
            .sum();
        assert!((volume - 4.0 / 3.0 * std::f64::consts::PI).abs() < 0.05, "volume {volume}");
        // analytic oracle: distance of each fused vertex to the unit sphere
        let mean = m.vertices().iter().map(|v| (v.norm() - 1.0).abs()).sum::<f64>() / m.vertex_count() as f64;
        assert!(mean < 2.0 * voxel, "mean {mean} voxel {voxel}");
        assert!(hausdorff_mean(&m, &s) < 2.0 * voxel);
    }

    #[test]
    fn hemispheres_fuse_into_one_sphere() {
        let s = icosphere(1.0, 4);
        // 10% overlap band around the equator
        let (top, _) = s.filter_faces(|_, f| f.iter().any(|&v| s.vertices()[v].z > -0.1)).unwrap();
        let (bottom, _) = s.filter_faces(|_, f| f.iter().any(|&v| s.vertices()[v].z < 0.1)).unwrap();
        let opts = FusionOptions { resolution: 100.0, ..Default::default() };
        let voxel = opts.voxel_for(2.0 * 3f64.sqrt());
        let clouds = [OrientedCloud::sample_surface(&top, voxel), OrientedCloud::sample_surface(&bottom, voxel)];
        let m = fuse_aligned_frames(&clouds, &opts).unwrap();
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
    }

    #[test]
    fn empty_or_unoriented_input_is_rejected() {
        assert!(fuse_aligned_frames(&[], &FusionOptions::default()).is_err());
        let bad = OrientedCloud { points: vec![Vec3::zeros()], normals: vec![] };
        assert!(fuse_aligned_frames(&[bad], &FusionOptions::default()).is_err());
    }

    #[test]
    fn fusing_a_cloud_twice_matches_fusing_it_once() {
        let s = icosphere(1.0, 3);
        let opts = FusionOptions { resolution: 60.0, ..Default::default() };
        let cloud = OrientedCloud::sample_surface(&s, 0.05);
        let once = fuse_aligned_frames(std::slice::from_ref(&cloud), &opts).unwrap();
        let twice = fuse_aligned_frames(&[cloud.clone(), cloud], &opts).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn welding_merges_duplicate_vertices() {
        let s = icosphere(1.0, 1);
        // split every face onto its own vertices
        let mut v = Vec::new();
        let mut f = Vec::new();
        for face in s.faces() {
            let base = v.len();
            v.extend(face.iter().map(|&i| s.vertices()[i]));
            f.push([base, base + 1, base + 2]);
        }
        let split = TriMesh::new(v, f).unwrap();
        let welded = weld_vertices(&split, 1e-9).unwrap();
        assert_eq!(welded.vertex_count(), s.vertex_count());
        assert!(welded.is_closed());
    }

    #[test]
    fn static_sequence_aligns_to_identity() {
        let m = ellipsoid(3);
        let g = sample_nodes(&m, 20, 4).unwrap();
        let frames = vec![m.clone(), m.clone(), m.clone()];
        let graphs = vec![g.clone(), g.clone(), g.clone()];
        let idx = SurfaceIndex::new(m.clone());
        let opts = RegistrationOptions::default();
        let pw: Vec<PairwiseResult> = (0..3)
            .map(|n| {
                let prev = (n > 0).then_some(&idx);
                let next = (n < 2).then_some(&idx);
                register_triplet(prev, &m, &g, next, None, &opts).unwrap()
            })
            .collect();
        let al = align_all_frames(&frames, &graphs, &pw, &AlignmentOptions::default()).unwrap();
        for motion in &al.motions {
            for t in 0..motion.len() {
                assert!((motion.affine[t] - Mat3::identity()).norm() < 1e-4);
                assert!(motion.translation[t].norm() < 1e-4);
            }
        }
        let fwd: Vec<Option<&NodeMotion>> = pw.iter().map(|p| p.forward.as_ref()).collect();
        assert!(energy_corr(&frames, &graphs, &al.motions, &fwd, f64::INFINITY) < 1e-8);
        assert!(al.excluded.iter().all(|&e| !e));
        assert!(al.reports.iter().all(|r| r.is_monotone()));
    }

    #[test]
    fn rigid_sequence_recovers_composed_rotations() {
        let base = ellipsoid(3);
        let c = base.centroid();
        let axis = Vec3::new(0.3, 1.0, 0.2).normalize();
        let rots: Vec<Mat3> = (0..3).map(|k| axis_angle(&axis, (10.0 * k as f64).to_radians())).collect();
        let frames: Vec<TriMesh> = rots.iter().map(|r| moved(&base, |p| r * (p - c) + c)).collect();
        let graphs: Vec<DeformGraph> = frames.iter().map(|f| sample_nodes(f, 20, 4).unwrap()).collect();
        let idx: Vec<SurfaceIndex> = frames.iter().cloned().map(SurfaceIndex::new).collect();
        let opts = RegistrationOptions::default();
        let pw: Vec<PairwiseResult> = (0..3)
            .map(|n| {
                let prev = (n > 0).then(|| &idx[n - 1]);
                let next = (n < 2).then(|| &idx[n + 1]);
                register_triplet(prev, &frames[n], &graphs[n], next, None, &opts).unwrap()
            })
            .collect();
        let al = align_all_frames(&frames, &graphs, &pw, &AlignmentOptions::default()).unwrap();
        for n in 0..3 {
            let truth = rots[n].transpose();
            for a in &al.motions[n].affine {
                let err = rotation_error(a, &truth);
                assert!(err < 1e-3, "frame {n} rotation error {err}");
            }
        }
    }

    #[test]
    fn too_many_frames_is_a_configuration_error() {
        let m = icosphere(1.0, 0);
        let g = sample_nodes(&m, 6, 4).unwrap();
        let n = MAX_FRAMES + 30;
        let frames = vec![m; n];
        let graphs = vec![g; n];
        let pw: Vec<PairwiseResult> = (0..n).map(|_| fake_pairwise(None, None)).collect();
        assert!(matches!(
            align_all_frames(&frames, &graphs, &pw, &AlignmentOptions::default()),
            Err(Error::TooManyFrames { frames: 400, .. })
        ));
    }

    #[test]
    fn corr_energy_of_a_translated_frame() {
        let m = icosphere(1.0, 2);
        let g = sample_nodes(&m, 10, 4).unwrap();
        let frames = vec![m.clone(), m.clone()];
        let graphs = vec![g.clone(), g.clone()];
        let id = NodeMotion::identity(10);
        let fwd = [Some(&id), None];
        let eps = 0.01;
        let mut shifted = id.clone();
        for b in &mut shifted.translation {
            *b = Vec3::new(eps, 0.0, 0.0);
        }
        let e = energy_corr(&frames, &graphs, &[shifted, id.clone()], &fwd, f64::INFINITY);
        let expected = m.vertex_count() as f64 * eps * eps;
        assert!((e - expected).abs() < 1e-12, "{e} vs {expected}");
        assert!(energy_corr(&frames, &graphs, &[id.clone(), id.clone()], &fwd, f64::INFINITY) < 1e-20);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn corr_energy_vanishes_on_composed_rigid_chains(
            u in prop::array::uniform3(0.0..1.0f64),
            v in prop::array::uniform3(0.0..1.0f64),
            t in prop::array::uniform3(-1.0..1.0f64),
        ) {
            let base = icosphere(1.0, 2);
            let r1 = rotation_from_uniform(u[0], u[1], u[2]);
            let r0 = rotation_from_uniform(v[0], v[1], v[2]);
            let t = Vec3::from(t);
            // frame 1 = r1 * frame 0 + t; frame 1 goes to the reference by r0
            let f0 = base.clone();
            let f1 = moved(&base, |p| r1 * p + t);
            let g0 = sample_nodes(&f0, 10, 4).unwrap();
            let g1 = sample_nodes(&f1, 10, 4).unwrap();
            let fwd = NodeMotion::global_rigid(g0.nodes(), &r1, &t);
            let m1 = NodeMotion::global_rigid(g1.nodes(), &r0, &Vec3::zeros());
            // the direct motion of frame 0 is r0 (r1 p + t)
            let m0 = NodeMotion::global_rigid(g0.nodes(), &(r0 * r1), &(r0 * t));
            let e = energy_corr(&[f0, f1], &[g0, g1], &[m0, m1], &[Some(&fwd), None], f64::INFINITY);
            prop_assert!(e < 1e-10, "{}", e);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn marching_cubes_is_closed_and_oriented_on_random_fields(
            inner in prop::collection::vec(prop_oneof![-1.0..-0.05f64, 0.05..1.0f64], 125),
        ) {
            // positive border, random 5x5x5 interior
            let n = 7;
            let grid = Grid { origin: Vec3::zeros(), voxel: 1.0, dims: [n, n, n] };
            let mut values = vec![1.0; n * n * n];
            for k in 0..5 {
                for j in 0..5 {
                    for i in 0..5 {
                        values[grid.index(i + 1, j + 1, k + 1)] = inner[(k * 5 + j) * 5 + i];
                    }
                }
            }
            let (_, faces) = marching_cubes(&grid, &values);
            let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
            for f in &faces {
                prop_assert!(f[0] != f[1] && f[1] != f[2] && f[0] != f[2]);
                for e in 0..3 {
                    *directed.entry((f[e], f[(e + 1) % 3])).or_insert(0) += 1;
                }
            }
            for (&(a, b), &count) in &directed {
                prop_assert_eq!(count, 1, "edge {:?} used twice in one direction", (a, b));
                prop_assert!(directed.contains_key(&(b, a)), "edge {:?} is a boundary", (a, b));
            }
        }
    }
}
