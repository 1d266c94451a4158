//! Indexed triangle meshes and the geometric queries built on them.

mod bvh;
mod geodesic;
mod kdtree;
mod metrics;

pub use bvh::{exhaustive_closest_point, exhaustive_ray_intersect, Bvh, ClosestPoint, RayHit};
pub use geodesic::{geodesic_distances, EdgeGraph, GeodesicField};
pub use kdtree::PointIndex;
pub use metrics::{hausdorff_mean, hausdorff_mean_with};

use std::collections::HashMap;

use crate::{Error, Result, Vec3};

/// Indexed triangle surface with one unit normal per vertex.
///
/// Meshes are immutable once built; every constructor validates face indices
/// and recomputes or checks the normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
}

impl TriMesh {
    /// Builds a mesh and computes area-weighted vertex normals.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        validate_faces(vertices.len(), &faces)?;
        let normals = area_weighted_normals(&vertices, &faces)?;
        Ok(Self { vertices, faces, normals })
    }

    /// Builds a mesh with caller-supplied normals (each must be unit length).
    pub fn with_normals(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, normals: Vec<Vec3>) -> Result<Self> {
        validate_faces(vertices.len(), &faces)?;
        if normals.len() != vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} normals for {} vertices",
                normals.len(),
                vertices.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::InvalidMesh(format!("normal {i} is not unit length")));
        }
        Ok(Self { vertices, faces, normals })
    }

    /// Same connectivity, new vertex positions; normals are recomputed.
    pub fn with_positions(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} positions, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        let normals = area_weighted_normals(&vertices, &self.faces)?;
        Ok(Self { vertices, faces: self.faces.clone(), normals })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Recomputes area-weighted normals from the current positions.
    pub fn compute_vertex_normals(&self) -> Result<Self> {
        compute_vertex_normals(self)
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
        n.normalize()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        0.5 * (self.vertices[b] - self.vertices[a])
            .cross(&(self.vertices[c] - self.vertices[a]))
            .norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        bounds_of(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn centroid(&self) -> Vec3 {
        if self.vertices.is_empty() {
            return Vec3::zeros();
        }
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    /// Undirected edges `(lo, hi)` sorted and deduplicated.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(u, w)| (u.min(w), u.max(w)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Number of incident faces per undirected edge.
    pub fn edge_face_counts(&self) -> HashMap<(usize, usize), usize> {
        let mut counts = HashMap::new();
        for &[a, b, c] in &self.faces {
            for (u, w) in [(a, b), (b, c), (c, a)] {
                *counts.entry((u.min(w), u.max(w))).or_insert(0) += 1;
            }
        }
        counts
    }

    /// True when every edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        !self.faces.is_empty() && self.edge_face_counts().values().all(|&c| c == 2)
    }

    /// V - E + F.
    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Per-vertex sorted neighbour lists over mesh edges.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for (u, w) in self.edges() {
            adj[u].push(w);
            adj[w].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Keeps the faces for which `keep` returns true and drops vertices that
    /// are no longer referenced. Returns the new mesh and, for each new
    /// vertex, its index in `self`.
    pub fn filter_faces(&self, mut keep: impl FnMut(usize, &[usize; 3]) -> bool) -> Result<(Self, Vec<usize>)> {
        let faces: Vec<[usize; 3]> = self
            .faces
            .iter()
            .enumerate()
            .filter(|(i, f)| keep(*i, f))
            .map(|(_, f)| *f)
            .collect();
        let mut used = vec![false; self.vertices.len()];
        for f in &faces {
            for &v in f {
                used[v] = true;
            }
        }
        let mut remap = vec![usize::MAX; self.vertices.len()];
        let mut origin = Vec::new();
        for (v, &u) in used.iter().enumerate() {
            if u {
                remap[v] = origin.len();
                origin.push(v);
            }
        }
        let vertices = origin.iter().map(|&v| self.vertices[v]).collect();
        let faces = faces.iter().map(|f| [remap[f[0]], remap[f[1]], remap[f[2]]]).collect();
        Ok((TriMesh::new(vertices, faces)?, origin))
    }
}

/// Area-weighted average of incident face normals, normalized.
pub fn compute_vertex_normals(mesh: &TriMesh) -> Result<TriMesh> {
    if mesh.faces.is_empty() {
        return Err(Error::InvalidMesh("mesh has no faces".into()));
    }
    let normals = area_weighted_normals(&mesh.vertices, &mesh.faces)?;
    Ok(TriMesh { vertices: mesh.vertices.clone(), faces: mesh.faces.clone(), normals })
}

fn validate_faces(vertex_count: usize, faces: &[[usize; 3]]) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        for &v in f {
            if v >= vertex_count {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references vertex {v} but the mesh has {vertex_count}"
                )));
            }
        }
        if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
            return Err(Error::InvalidMesh(format!("face {i} repeats a vertex")));
        }
    }
    Ok(())
}

fn area_weighted_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<Vec3>> {
    if faces.is_empty() {
        return Err(Error::InvalidMesh("mesh has no faces".into()));
    }
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for &[a, b, c] in faces {
        // cross product magnitude is twice the area, so this is area weighting
        let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += n;
        acc[b] += n;
        acc[c] += n;
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(Error::UndefinedNormal { vertex: i })
            }
        })
        .collect()
}

/// Nearest line hit along `direction` (both sides when `bidirectional`).
/// Builds a hierarchy per call; reuse a [`Bvh`] for repeated queries.
pub fn ray_intersect(mesh: &TriMesh, origin: &Vec3, direction: &Vec3, bidirectional: bool) -> Option<RayHit> {
    Bvh::new(mesh).ray_intersect(origin, direction, bidirectional, f64::INFINITY)
}

/// Globally nearest point on the surface and the face it lies on.
pub fn closest_point_on_mesh(mesh: &TriMesh, query: &Vec3) -> Option<(Vec3, usize)> {
    Bvh::new(mesh).closest_point(query).map(|c| (c.point, c.face_index))
}

pub(crate) fn bounds_of(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Unit quad in the z = `z` plane, centred at the origin, facing +z.
    pub fn quad(z: f64) -> TriMesh {
        let v = vec![
            Vec3::new(-0.5, -0.5, z),
            Vec3::new(0.5, -0.5, z),
            Vec3::new(0.5, 0.5, z),
            Vec3::new(-0.5, 0.5, z),
        ];
        TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3]]).unwrap()
    }

    /// Regular grid of `n x n` quads spanning `[-s/2, s/2]^2` at height z.
    pub fn grid(n: usize, s: f64, z: f64) -> TriMesh {
        let mut v = Vec::new();
        for j in 0..=n {
            for i in 0..=n {
                v.push(Vec3::new(s * (i as f64 / n as f64 - 0.5), s * (j as f64 / n as f64 - 0.5), z));
            }
        }
        let mut f = Vec::new();
        let id = |i: usize, j: usize| j * (n + 1) + i;
        for j in 0..n {
            for i in 0..n {
                f.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
                f.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
            }
        }
        TriMesh::new(v, f).unwrap()
    }

    /// Thin triangle strip along x with `n` unit-length segments.
    pub fn strip(n: usize) -> TriMesh {
        let mut v = Vec::new();
        for i in 0..=n {
            v.push(Vec3::new(i as f64, 0.0, 0.0));
            v.push(Vec3::new(i as f64, 0.1, 0.0));
        }
        let mut f = Vec::new();
        for i in 0..n {
            let a = 2 * i;
            f.push([a, a + 2, a + 3]);
            f.push([a, a + 3, a + 1]);
        }
        TriMesh::new(v, f).unwrap()
    }
}
