//! Bounding volume hierarchy over mesh triangles.
//!
//! Construction is a deterministic median split on the longest centroid axis.
//! Queries resolve ties by face index, so they return exactly what an
//! exhaustive scan over all triangles returns.

use super::{bounds_of, TriMesh};
use crate::Vec3;

const LEAF_SIZE: usize = 4;
/// Barycentric slack for rays through shared edges and vertices.
const BARY_EPS: f64 = 1e-9;

/// Intersection of a ray (or line) with a triangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub face_index: usize,
    pub point: Vec3,
    /// Signed distance along the ray direction; negative when the hit lies
    /// behind the origin.
    pub distance: f64,
    pub barycentric: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub point: Vec3,
    pub face_index: usize,
    pub distance: f64,
    pub barycentric: [f64; 3],
}

#[derive(Debug, Clone)]
struct Node {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: `start..start+count` into `order`; interior: children indices.
    start: usize,
    count: usize,
    left: usize,
    right: usize,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    tris: Vec<[Vec3; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
    pad: f64,
}

impl Bvh {
    pub fn new(mesh: &TriMesh) -> Self {
        let tris: Vec<[Vec3; 3]> = mesh
            .faces()
            .iter()
            .map(|&[a, b, c]| [mesh.vertices()[a], mesh.vertices()[b], mesh.vertices()[c]])
            .collect();
        let (lo, hi) = bounds_of(mesh.vertices());
        let pad = 1e-7 * (hi - lo).norm().max(1e-12);
        let mut bvh = Self { order: (0..tris.len()).collect(), tris, nodes: Vec::new(), pad };
        if !bvh.tris.is_empty() {
            let centroids: Vec<Vec3> = bvh.tris.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
            bvh.build(0, bvh.tris.len(), &centroids);
        }
        bvh
    }

    pub fn triangle(&self, face: usize) -> [Vec3; 3] {
        self.tris[face]
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let mut clo = lo;
        let mut chi = hi;
        for &f in &self.order[start..end] {
            for p in &self.tris[f] {
                lo = lo.inf(p);
                hi = hi.sup(p);
            }
            clo = clo.inf(&centroids[f]);
            chi = chi.sup(&centroids[f]);
        }
        let pad = Vec3::repeat(self.pad);
        let id = self.nodes.len();
        self.nodes.push(Node { lo: lo - pad, hi: hi + pad, start, count: end - start, left: 0, right: 0 });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let ext = chi - clo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        self.order[start..end].sort_by(|&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        let node = &mut self.nodes[id];
        node.count = 0;
        node.left = left;
        node.right = right;
        id
    }

    /// Nearest hit by absolute distance within `max_distance`. With
    /// `bidirectional` the line is searched on both sides of the origin.
    pub fn ray_intersect(&self, origin: &Vec3, direction: &Vec3, bidirectional: bool, max_distance: f64) -> Option<RayHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let tmin = if bidirectional { -max_distance } else { 0.0 };
        let mut best: Option<RayHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let Some((t0, t1)) = slab(origin, direction, &node.lo, &node.hi, tmin, max_distance) else {
                continue;
            };
            let bound = if t0 <= 0.0 && t1 >= 0.0 { 0.0 } else { t0.abs().min(t1.abs()) };
            if let Some(b) = &best {
                if bound > b.distance.abs() {
                    continue;
                }
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    if let Some(hit) = ray_triangle(origin, direction, &self.tris[f], f) {
                        if hit.distance < tmin || hit.distance > max_distance {
                            continue;
                        }
                        if better_hit(&hit, best.as_ref()) {
                            best = Some(hit);
                        }
                    }
                }
            } else {
                stack.push(node.right);
                stack.push(node.left);
            }
        }
        best
    }

    /// Globally nearest surface point.
    pub fn closest_point(&self, query: &Vec3) -> Option<ClosestPoint> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<(f64, ClosestPoint)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let d2 = box_dist2(query, &node.lo, &node.hi);
            if let Some((bd2, _)) = &best {
                if d2 > *bd2 {
                    continue;
                }
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    let (p, bary) = closest_on_triangle(query, &self.tris[f]);
                    let pd2 = (p - query).norm_squared();
                    let take = match &best {
                        None => true,
                        Some((bd2, b)) => pd2 < *bd2 || (pd2 == *bd2 && f < b.face_index),
                    };
                    if take {
                        best = Some((pd2, ClosestPoint { point: p, face_index: f, distance: pd2.sqrt(), barycentric: bary }));
                    }
                }
            } else {
                let (l, r) = (node.left, node.right);
                let dl = box_dist2(query, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_dist2(query, &self.nodes[r].lo, &self.nodes[r].hi);
                // visit the nearer child first
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best.map(|(_, c)| c)
    }
}

fn better_hit(hit: &RayHit, best: Option<&RayHit>) -> bool {
    match best {
        None => true,
        Some(b) => {
            let (ha, ba) = (hit.distance.abs(), b.distance.abs());
            ha < ba || (ha == ba && hit.face_index < b.face_index)
        }
    }
}

/// Reference scan over every triangle; ties resolved like [`Bvh::ray_intersect`].
pub fn exhaustive_ray_intersect(mesh: &TriMesh, origin: &Vec3, direction: &Vec3, bidirectional: bool, max_distance: f64) -> Option<RayHit> {
    let tmin = if bidirectional { -max_distance } else { 0.0 };
    let mut best: Option<RayHit> = None;
    for (f, &[a, b, c]) in mesh.faces().iter().enumerate() {
        let tri = [mesh.vertices()[a], mesh.vertices()[b], mesh.vertices()[c]];
        if let Some(hit) = ray_triangle(origin, direction, &tri, f) {
            if hit.distance >= tmin && hit.distance <= max_distance && better_hit(&hit, best.as_ref()) {
                best = Some(hit);
            }
        }
    }
    best
}

/// Möller-Trumbore without back-face culling, over the whole line.
pub(crate) fn ray_triangle(origin: &Vec3, dir: &Vec3, tri: &[Vec3; 3], face_index: usize) -> Option<RayHit> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    let scale = e1.norm() * e2.norm() * dir.norm();
    if det.abs() <= 1e-14 * scale || scale == 0.0 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let u = s.dot(&p) * inv;
    if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
        return None;
    }
    let t = e2.dot(&q) * inv;
    if !t.is_finite() {
        return None;
    }
    let u = u.clamp(0.0, 1.0);
    let v = v.clamp(0.0, 1.0);
    let (u, v) = if u + v > 1.0 {
        let s = u + v;
        (u / s, v / s)
    } else {
        (u, v)
    };
    let w = 1.0 - u - v;
    Some(RayHit {
        face_index,
        point: origin + dir * t,
        distance: t,
        barycentric: [w, u, v],
    })
}

/// Slab test returning the parameter interval inside the box, clipped to
/// `[tmin, tmax]`.
fn slab(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3, tmin: f64, tmax: f64) -> Option<(f64, f64)> {
    let mut t0 = tmin;
    let mut t1 = tmax;
    for k in 0..3 {
        if d[k] == 0.0 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let mut a = (lo[k] - o[k]) * inv;
        let mut b = (hi[k] - o[k]) * inv;
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

fn box_dist2(p: &Vec3, lo: &Vec3, hi: &Vec3) -> f64 {
    let mut d2 = 0.0;
    for k in 0..3 {
        let v = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d2 += v * v;
    }
    d2
}

/// Closest point on a triangle with its barycentric coordinates
/// (Voronoi-region case analysis).
pub(crate) fn closest_on_triangle(p: &Vec3, tri: &[Vec3; 3]) -> (Vec3, [f64; 3]) {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Reference scan for the closest surface point.
pub fn exhaustive_closest_point(mesh: &TriMesh, query: &Vec3) -> Option<ClosestPoint> {
    let mut best: Option<(f64, ClosestPoint)> = None;
    for (f, &[a, b, c]) in mesh.faces().iter().enumerate() {
        let tri = [mesh.vertices()[a], mesh.vertices()[b], mesh.vertices()[c]];
        let (p, bary) = closest_on_triangle(query, &tri);
        let d2 = (p - query).norm_squared();
        if best.as_ref().is_none_or(|(bd2, _)| d2 < *bd2) {
            best = Some((d2, ClosestPoint { point: p, face_index: f, distance: d2.sqrt(), barycentric: bary }));
        }
    }
    best.map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::quad;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_quads() -> TriMesh {
        let a = quad(0.0);
        let b = quad(1.0);
        let mut v = a.vertices().to_vec();
        v.extend_from_slice(b.vertices());
        let mut f = a.faces().to_vec();
        f.extend(b.faces().iter().map(|t| [t[0] + 4, t[1] + 4, t[2] + 4]));
        TriMesh::new(v, f).unwrap()
    }

    fn random_soup(rng: &mut ChaCha8Rng, n: usize) -> TriMesh {
        let mut v = Vec::new();
        let mut f = Vec::new();
        for i in 0..n {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for _ in 0..3 {
                v.push(c + Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
            }
            f.push([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        TriMesh::new(v, f).unwrap()
    }

    #[test]
    fn ray_hits_quad() {
        let m = quad(0.0);
        let bvh = Bvh::new(&m);
        let hit = bvh.ray_intersect(&Vec3::new(0.0, 0.0, -1.0), &Vec3::z(), false, f64::INFINITY).unwrap();
        assert!((hit.point - Vec3::zeros()).norm() < 1e-15);
        assert!((hit.distance - 1.0).abs() < 1e-15);
        let s: f64 = hit.barycentric.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bidirectional_picks_nearest_in_absolute_value() {
        let m = two_quads();
        let bvh = Bvh::new(&m);
        let o = Vec3::new(0.0, 0.0, 0.3);
        let hit = bvh.ray_intersect(&o, &Vec3::z(), true, f64::INFINITY).unwrap();
        assert!((hit.point.z - 0.0).abs() < 1e-15);
        assert!((hit.distance + 0.3).abs() < 1e-15);
        let ex = exhaustive_ray_intersect(&m, &o, &Vec3::z(), true, f64::INFINITY).unwrap();
        assert_eq!(hit, ex);
        // forward only: the upper quad
        let fwd = bvh.ray_intersect(&o, &Vec3::z(), false, f64::INFINITY).unwrap();
        assert!((fwd.distance - 0.7).abs() < 1e-15);
    }

    #[test]
    fn parallel_ray_misses() {
        let bvh = Bvh::new(&quad(0.0));
        assert!(bvh.ray_intersect(&Vec3::new(0.0, 0.0, 0.5), &Vec3::x(), true, f64::INFINITY).is_none());
    }

    #[test]
    fn max_distance_cuts_off() {
        let bvh = Bvh::new(&quad(0.0));
        assert!(bvh.ray_intersect(&Vec3::new(0.0, 0.0, 2.0), &Vec3::z(), true, 1.0).is_none());
        assert!(bvh.ray_intersect(&Vec3::new(0.0, 0.0, 2.0), &Vec3::z(), true, 2.5).is_some());
    }

    #[test]
    fn closest_point_cases() {
        let m = quad(0.0);
        let bvh = Bvh::new(&m);
        let c = bvh.closest_point(&Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert!((c.point - Vec3::zeros()).norm() < 1e-15);
        assert!((c.distance - 5.0).abs() < 1e-15);
        let v = m.vertices()[2];
        let c = bvh.closest_point(&v).unwrap();
        assert_eq!(c.distance, 0.0);
        assert_eq!(c.point, v);
    }

    #[test]
    fn closest_point_matches_exhaustive_on_random_soup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_soup(&mut rng, 50);
        let bvh = Bvh::new(&m);
        for _ in 0..100 {
            let q = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert_eq!(bvh.closest_point(&q), exhaustive_closest_point(&m, &q));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn accelerated_queries_equal_exhaustive(seed in any::<u64>(), n in 1usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_soup(&mut rng, n);
            let bvh = Bvh::new(&m);
            for _ in 0..40 {
                let o = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                let bidir = rng.random_bool(0.5);
                prop_assert_eq!(bvh.ray_intersect(&o, &d, bidir, 10.0), exhaustive_ray_intersect(&m, &o, &d, bidir, 10.0));
                prop_assert_eq!(bvh.closest_point(&o), exhaustive_closest_point(&m, &o));
            }
        }
    }
}
