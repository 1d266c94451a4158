//! Synthetic articulated sequences with scripted occlusion, and the metrics
//! used to score reconstructions against them.

pub mod shapes;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::axis_angle;
use crate::mesh::{hausdorff_mean_with, Bvh, TriMesh};
use crate::{Error, Mat3, Result, Vec3};

/// Which generator produced a sequence, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    Bending(BendSpec),
    TwoBody(TwoBodySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BendSpec {
    pub frames: usize,
    pub max_bend_deg: f64,
    pub radius: f64,
    pub length: f64,
    /// Half-width of the smooth blend around the hinge.
    pub blend: f64,
    pub segments: usize,
    /// Gaussian jitter (degrees) added to each interior frame's bend angle.
    pub angle_jitter_deg: f64,
    /// Gaussian vertex noise standard deviation (world units).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BendSpec {
    fn default() -> Self {
        Self {
            frames: 10,
            max_bend_deg: 30.0,
            radius: 0.3,
            length: 2.0,
            blend: 0.5,
            segments: 48,
            angle_jitter_deg: 0.0,
            noise_sigma: 0.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBodySpec {
    pub frames: usize,
    /// Final rotation of body B about `axis` through the origin (degrees).
    pub rotation_deg: f64,
    pub axis: [f64; 3],
    /// Final translation of body B.
    pub translation: [f64; 3],
    pub segments: usize,
    pub seed: u64,
}

impl Default for TwoBodySpec {
    fn default() -> Self {
        Self { frames: 6, rotation_deg: 40.0, axis: [0.0, 1.0, 0.0], translation: [0.0, 0.0, 0.0], segments: 40, seed: 7 }
    }
}

/// Ground-truth frames with dense correspondence plus their corrupted views.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub scenario: Scenario,
    /// Undeformed surface all frames are posed from.
    pub rest: TriMesh,
    pub ground_truth: Vec<TriMesh>,
    pub frames: Vec<TriMesh>,
    /// Per frame, the ground-truth vertices removed by corruption.
    pub masks: Vec<Vec<usize>>,
    /// Per frame, the ground-truth vertex behind each frame vertex.
    pub visible: Vec<Vec<usize>>,
}

impl SyntheticSequence {
    fn uncorrupted(scenario: Scenario, rest: TriMesh, ground_truth: Vec<TriMesh>) -> Self {
        let n = ground_truth.len();
        let all: Vec<usize> = (0..rest.vertex_count()).collect();
        Self {
            scenario,
            rest,
            frames: ground_truth.clone(),
            ground_truth,
            masks: vec![Vec::new(); n],
            visible: vec![all; n],
        }
    }

    pub fn frame_count(&self) -> usize {
        self.ground_truth.len()
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn add_noise(meshes: &mut [TriMesh], sigma: f64, seed: u64) -> Result<()> {
    if sigma <= 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for (f, m) in meshes.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9 + f as u64));
        let v: Vec<Vec3> = m
            .vertices()
            .iter()
            .map(|p| p + Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        *m = m.with_positions(v)?;
    }
    Ok(())
}

/// Bend angle (radians) of every frame.
pub fn bend_angles(spec: &BendSpec) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, spec.angle_jitter_deg.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let last = (spec.frames - 1) as f64;
    Ok((0..spec.frames)
        .map(|f| {
            let mut deg = spec.max_bend_deg * f as f64 / last;
            if spec.angle_jitter_deg > 0.0 && f > 0 && f + 1 < spec.frames {
                deg += normal.sample(&mut rng);
            }
            deg.to_radians()
        })
        .collect())
}

/// Capped cylinder along z whose upper half bends about the x axis through
/// the origin, interpolated from 0 to `max_bend_deg` over the frames.
pub fn make_bending_cylinder(frames: usize, max_bend_deg: f64, segments: usize) -> Result<SyntheticSequence> {
    bending_cylinder(&BendSpec { frames, max_bend_deg, segments, ..BendSpec::default() })
}

pub fn bending_cylinder(spec: &BendSpec) -> Result<SyntheticSequence> {
    if spec.frames < 3 {
        return Err(Error::InvalidArgument("a bending sequence needs at least 3 frames".into()));
    }
    if spec.max_bend_deg.abs() > 120.0 {
        return Err(Error::InvalidArgument(format!(
            "bend of {} degrees would self-intersect (limit 120)",
            spec.max_bend_deg
        )));
    }
    let circumference = std::f64::consts::TAU * spec.radius;
    let rings = ((spec.length / (circumference / spec.segments as f64)).round() as usize).max(2);
    let rest = shapes::tube(spec.radius, spec.length, spec.segments, rings);
    let angles = bend_angles(spec)?;
    let mut gt = Vec::with_capacity(spec.frames);
    for &theta in &angles {
        let v: Vec<Vec3> = rest
            .vertices()
            .iter()
            .map(|p| {
                let phi = theta * smoothstep((p.z + spec.blend) / (2.0 * spec.blend));
                axis_angle(&Vec3::x(), phi) * p
            })
            .collect();
        gt.push(rest.with_positions(v)?);
    }
    add_noise(&mut gt, spec.noise_sigma, spec.seed)?;
    Ok(SyntheticSequence::uncorrupted(Scenario::Bending(spec.clone()), rest, gt))
}

/// Half-extent of the boxes, and where the bridge meets them.
const BOX_HALF: f64 = 0.4;
const BRIDGE_HALF: f64 = 0.12;
const BRIDGE_END: f64 = 0.15;
const BOX_START: f64 = 0.3;
const BODY_END: f64 = 1.2;

/// Blend from body A (0) to body B (1) along the x axis.
pub fn two_body_blend(x: f64) -> f64 {
    smoothstep((x + BRIDGE_END) / (2.0 * BRIDGE_END))
}

/// Whether a rest-pose point belongs to the full-size part of a box.
pub fn two_body_box(x: f64) -> Option<usize> {
    if x <= -BOX_START {
        Some(0)
    } else if x >= BOX_START {
        Some(1)
    } else {
        None
    }
}

/// Two boxy bodies along x joined by a thin bridge. Body A stays fixed and
/// body B moves rigidly; bridge vertices blend the two motions.
pub fn make_two_body(spec: &TwoBodySpec) -> Result<SyntheticSequence> {
    if spec.frames < 2 {
        return Err(Error::InvalidArgument("a two-body sequence needs at least 2 frames".into()));
    }
    let samples = 48usize;
    let profile: Vec<(f64, f64)> = (0..=samples)
        .map(|i| {
            let x = -BODY_END + 2.0 * BODY_END * i as f64 / samples as f64;
            let t = smoothstep((x.abs() - BRIDGE_END) / (BOX_START - BRIDGE_END));
            (x, BRIDGE_HALF + (BOX_HALF - BRIDGE_HALF) * t)
        })
        .collect();
    let local = shapes::revolve(&profile, spec.segments, 6.0);
    // axis z -> x by a cyclic permutation (keeps orientation)
    let v: Vec<Vec3> = local.vertices().iter().map(|p| Vec3::new(p.z, p.x, p.y)).collect();
    let rest = TriMesh::new(v, local.faces().to_vec())?;
    let axis = Vec3::from(spec.axis);
    let translation = Vec3::from(spec.translation);
    let mut gt = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let s = f as f64 / (spec.frames - 1) as f64;
        let r: Mat3 = if axis.norm() > 0.0 { axis_angle(&axis, (spec.rotation_deg * s).to_radians()) } else { Mat3::identity() };
        let t = translation * s;
        let v: Vec<Vec3> = rest
            .vertices()
            .iter()
            .map(|p| {
                let beta = two_body_blend(p.x);
                let b = r * p + t;
                if beta >= 1.0 {
                    b
                } else {
                    p + (b - p) * beta
                }
            })
            .collect();
        gt.push(rest.with_positions(v)?);
    }
    Ok(SyntheticSequence::uncorrupted(Scenario::TwoBody(spec.clone()), rest, gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

/// Occlusion schemes. Regions are evaluated on each frame's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum Corruption {
    /// Sphere whose centre moves linearly from `start` to `end` over the
    /// sequence; faces touching it are removed.
    SphereHole { start: [f64; 3], end: [f64; 3], radius: f64 },
    /// Faces touching the negative side of the plane are removed. One plane
    /// applies to every frame; otherwise one plane per frame.
    PlaneTruncation { planes: Vec<Plane> },
    /// The rest surface is split into three sectors by azimuth around its
    /// longest axis; frame `f` loses sector `f mod 3`.
    ComplementaryThirds,
}

/// Largest fraction of a frame's vertices a corruption may remove.
pub const MAX_REMOVED_FRACTION: f64 = 0.8;

pub fn corrupt(sequence: &SyntheticSequence, scheme: &Corruption) -> Result<SyntheticSequence> {
    let n = sequence.frame_count();
    let sectors = match scheme {
        Corruption::ComplementaryThirds => Some(face_sectors(&sequence.rest)),
        _ => None,
    };
    if let Corruption::PlaneTruncation { planes } = scheme {
        if planes.len() != 1 && planes.len() != n {
            return Err(Error::InvalidArgument(format!("{} planes for {n} frames", planes.len())));
        }
        if planes.iter().any(|p| Vec3::from(p.normal).norm() == 0.0) {
            return Err(Error::InvalidArgument("plane normal must be nonzero".into()));
        }
    }
    if let Corruption::SphereHole { radius, .. } = scheme {
        if *radius < 0.0 {
            return Err(Error::InvalidArgument("hole radius must be nonnegative".into()));
        }
    }
    let mut out = sequence.clone();
    for f in 0..n {
        let gt = &sequence.ground_truth[f];
        let in_region: Box<dyn Fn(&Vec3) -> bool> = match scheme {
            Corruption::SphereHole { start, end, radius } => {
                let s = if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
                let c = Vec3::from(*start) * (1.0 - s) + Vec3::from(*end) * s;
                let r = *radius;
                Box::new(move |p: &Vec3| (p - c).norm() < r)
            }
            Corruption::PlaneTruncation { planes } => {
                let pl = if planes.len() == 1 { &planes[0] } else { &planes[f] };
                let (o, nrm) = (Vec3::from(pl.point), Vec3::from(pl.normal).normalize());
                Box::new(move |p: &Vec3| nrm.dot(&(p - o)) < 0.0)
            }
            Corruption::ComplementaryThirds => Box::new(|_: &Vec3| false),
        };
        let hidden = f % 3;
        let (mesh, origin) = gt.filter_faces(|fi, face| match &sectors {
            Some(sec) => sec[fi] != hidden,
            None => !face.iter().any(|&v| in_region(&gt.vertices()[v])),
        })?;
        let removed = gt.vertex_count() - origin.len();
        if removed as f64 > MAX_REMOVED_FRACTION * gt.vertex_count() as f64 {
            return Err(Error::InvalidArgument(format!(
                "corruption removes {removed} of {} vertices in frame {f}",
                gt.vertex_count()
            )));
        }
        let mut keep = vec![false; gt.vertex_count()];
        for &o in &origin {
            keep[o] = true;
        }
        out.masks[f] = (0..gt.vertex_count()).filter(|&v| !keep[v]).collect();
        out.frames[f] = mesh;
        out.visible[f] = origin;
    }
    Ok(out)
}

/// Sector (0, 1, 2) of every face by the azimuth of its centroid around the
/// longest bounding-box axis of `mesh`.
fn face_sectors(mesh: &TriMesh) -> Vec<usize> {
    let (lo, hi) = mesh.bounds();
    let ext = hi - lo;
    let axis = ext.imax();
    let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
    let c = (lo + hi) / 2.0;
    mesh.faces()
        .iter()
        .map(|f| {
            let p = (mesh.vertices()[f[0]] + mesh.vertices()[f[1]] + mesh.vertices()[f[2]]) / 3.0;
            let az = (p[w] - c[w]).atan2(p[u] - c[u]).rem_euclid(std::f64::consts::TAU);
            ((az / (std::f64::consts::TAU / 3.0)) as usize).min(2)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub frame: usize,
    pub hausdorff_mean: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: Vec<FrameEval>,
    pub mean_hausdorff: f64,
    pub mean_coverage: f64,
    /// Wall-clock seconds per stage, when recorded.
    #[serde(default)]
    pub stage_seconds: Vec<(String, f64)>,
}

/// Fraction of ground-truth distance tolerance used for coverage.
pub const COVERAGE_TOLERANCE: f64 = 0.02;

/// Scores reconstructions: mean distance from the visible input to the
/// reconstruction, and the fraction of ground-truth vertices within 2% of
/// the bounding-box diagonal of it.
pub fn evaluate(reconstruction: &[TriMesh], sequence: &SyntheticSequence) -> Result<EvalReport> {
    if reconstruction.len() != sequence.frame_count() {
        return Err(Error::InvalidArgument(format!(
            "{} reconstructed frames for {} ground-truth frames",
            reconstruction.len(),
            sequence.frame_count()
        )));
    }
    let frames: Vec<FrameEval> = (0..reconstruction.len())
        .into_par_iter()
        .map(|f| {
            let bvh = Bvh::new(&reconstruction[f]);
            let gt = &sequence.ground_truth[f];
            let tol = COVERAGE_TOLERANCE * gt.bbox_diagonal();
            let covered = gt
                .vertices()
                .iter()
                .filter(|p| bvh.closest_point(p).is_some_and(|c| c.distance <= tol))
                .count();
            FrameEval {
                frame: f,
                hausdorff_mean: hausdorff_mean_with(sequence.frames[f].vertices(), &bvh),
                coverage: covered as f64 / gt.vertex_count() as f64,
            }
        })
        .collect();
    Ok(summarize(frames))
}

pub fn summarize(frames: Vec<FrameEval>) -> EvalReport {
    let n = frames.len().max(1) as f64;
    let mean_hausdorff = frames.iter().map(|f| f.hausdorff_mean).sum::<f64>() / n;
    let mean_coverage = frames.iter().map(|f| f.coverage).sum::<f64>() / n;
    EvalReport { frames, mean_hausdorff, mean_coverage, stage_seconds: Vec::new() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_bend(frames: usize, deg: f64) -> SyntheticSequence {
        bending_cylinder(&BendSpec { frames, max_bend_deg: deg, segments: 16, ..BendSpec::default() }).unwrap()
    }

    #[test]
    fn zero_bend_is_static() {
        let s = small_bend(4, 0.0);
        for m in &s.ground_truth {
            assert_eq!(m, &s.ground_truth[0]);
        }
    }

    #[test]
    fn upper_cap_rotates_rigidly() {
        let s = small_bend(5, 60.0);
        let top: Vec<usize> = (0..s.rest.vertex_count()).filter(|&v| s.rest.vertices()[v].z == 1.0).collect();
        assert!(!top.is_empty());
        let centroid = |m: &TriMesh| top.iter().map(|&v| m.vertices()[v]).sum::<Vec3>() / top.len() as f64;
        let c0 = centroid(&s.rest);
        for f in 0..5 {
            let expect = axis_angle(&Vec3::x(), (60.0 * f as f64 / 4.0).to_radians()) * c0;
            assert!((centroid(&s.ground_truth[f]) - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn middle_frame_is_half_bend() {
        let a = bend_angles(&BendSpec { frames: 3, max_bend_deg: 30.0, ..BendSpec::default() }).unwrap();
        assert!((a[1] - 15f64.to_radians()).abs() < 1e-15);
    }

    #[test]
    fn excessive_bend_rejected() {
        assert!(make_bending_cylinder(5, 130.0, 16).is_err());
        assert!(make_bending_cylinder(2, 30.0, 16).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        let spec = BendSpec { frames: 4, segments: 16, angle_jitter_deg: 3.0, noise_sigma: 0.001, ..BendSpec::default() };
        assert_eq!(bending_cylinder(&spec).unwrap(), bending_cylinder(&spec).unwrap());
    }

    #[test]
    fn two_body_static_and_translated() {
        let s = make_two_body(&TwoBodySpec { rotation_deg: 0.0, ..TwoBodySpec::default() }).unwrap();
        for m in &s.ground_truth {
            assert_eq!(m.vertices(), s.rest.vertices());
        }
        let spec = TwoBodySpec { rotation_deg: 0.0, translation: [1.0, 0.0, 0.0], frames: 3, ..TwoBodySpec::default() };
        let s = make_two_body(&spec).unwrap();
        assert!(s.rest.is_closed());
        let last = &s.ground_truth[2];
        for (v, p) in s.rest.vertices().iter().enumerate() {
            if two_body_box(p.x) == Some(1) {
                assert!((last.vertices()[v] - p - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
            }
            if two_body_box(p.x) == Some(0) {
                assert_eq!(last.vertices()[v], *p);
            }
        }
    }

    #[test]
    fn zero_radius_hole_changes_nothing() {
        let s = small_bend(3, 30.0);
        let c = corrupt(&s, &Corruption::SphereHole { start: [0.0; 3], end: [0.0; 3], radius: 0.0 }).unwrap();
        assert_eq!(c.frames, s.frames);
        assert!(c.masks.iter().all(Vec::is_empty));
    }

    #[test]
    fn midplane_truncation_removes_exactly_lower_half() {
        let s = small_bend(3, 0.0);
        let plane = Plane { point: [0.0, 0.0, 0.01], normal: [0.0, 0.0, 1.0] };
        let c = corrupt(&s, &Corruption::PlaneTruncation { planes: vec![plane] }).unwrap();
        for f in 0..3 {
            let below: Vec<usize> = (0..s.rest.vertex_count()).filter(|&v| s.ground_truth[f].vertices()[v].z < 0.01).collect();
            assert_eq!(c.masks[f], below);
        }
    }

    #[test]
    fn complementary_thirds_visibility() {
        let s = small_bend(6, 45.0);
        let c = corrupt(&s, &Corruption::ComplementaryThirds).unwrap();
        let mut seen = vec![0usize; s.rest.vertex_count()];
        for vis in &c.visible {
            for &v in vis {
                seen[v] += 1;
            }
        }
        assert!(seen.iter().all(|&k| k >= 4), "min visibility {}", seen.iter().min().unwrap());
        // masks and visible sets reproduce the stored frames exactly
        for f in 0..6 {
            for (i, &o) in c.visible[f].iter().enumerate() {
                assert_eq!(c.frames[f].vertices()[i], s.ground_truth[f].vertices()[o]);
            }
            assert_eq!(c.visible[f].len() + c.masks[f].len(), s.rest.vertex_count());
        }
    }

    #[test]
    fn heavy_corruption_rejected() {
        let s = small_bend(3, 0.0);
        let plane = Plane { point: [0.0, 0.0, 0.9], normal: [0.0, 0.0, 1.0] };
        assert!(corrupt(&s, &Corruption::PlaneTruncation { planes: vec![plane] }).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let s = small_bend(3, 30.0);
        let r = evaluate(&s.ground_truth, &s).unwrap();
        assert!(r.frames.iter().all(|f| f.hausdorff_mean == 0.0 && f.coverage == 1.0));

        let c = corrupt(&s, &Corruption::ComplementaryThirds).unwrap();
        let r = evaluate(&c.frames, &c).unwrap();
        for f in &r.frames {
            assert_eq!(f.hausdorff_mean, 0.0);
            let visible = c.visible[f.frame].len() as f64 / s.rest.vertex_count() as f64;
            // uncovered vertices lie inside the removed sector, farther than
            // the tolerance from any kept face
            assert!(f.coverage >= visible - 1e-12 && f.coverage < 0.9);
        }
    }
}
