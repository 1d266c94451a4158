//! Closed primitive surfaces.

use std::collections::HashMap;

use crate::mesh::TriMesh;
use crate::Vec3;

/// Subdivided icosahedron projected onto a sphere centred at the origin.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(f.len() * 4);
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                v.push(((v[a] + v[b]) / 2.0).normalize());
                v.len() - 1
            })
        };
        for &[a, b, c] in &f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    let v = v.into_iter().map(|p| p * radius).collect();
    TriMesh::new(v, f).expect("icosphere is well formed")
}

/// Cross-section point on a superellipse of the given exponent (2 = circle).
fn superellipse(angle: f64, radius: f64, exponent: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let e = 2.0 / exponent;
    (radius * c.signum() * c.abs().powf(e), radius * s.signum() * s.abs().powf(e))
}

/// Closed surface of revolution along +z with flat capped ends.
///
/// `profile` lists `(z, radius)` samples in increasing z. Caps are filled
/// with concentric rings spaced like the profile samples.
pub fn revolve(profile: &[(f64, f64)], segments: usize, exponent: f64) -> TriMesh {
    assert!(profile.len() >= 2 && segments >= 3);
    let mut v = Vec::new();
    let mut f = Vec::new();
    let ring = |v: &mut Vec<Vec3>, z: f64, r: f64| -> usize {
        let start = v.len();
        for j in 0..segments {
            let a = std::f64::consts::TAU * j as f64 / segments as f64;
            let (x, y) = superellipse(a, r, exponent);
            v.push(Vec3::new(x, y, z));
        }
        start
    };
    let starts: Vec<usize> = profile.iter().map(|&(z, r)| ring(&mut v, z, r)).collect();
    for w in starts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        for j in 0..segments {
            let jn = (j + 1) % segments;
            f.push([lo + j, lo + jn, hi + jn]);
            f.push([lo + j, hi + jn, hi + j]);
        }
    }
    let spacing = (profile[profile.len() - 1].0 - profile[0].0) / (profile.len() - 1) as f64;
    for (end, top) in [(0usize, false), (profile.len() - 1, true)] {
        let (z, r) = profile[end];
        let rings = ((r / spacing).round() as usize).max(1);
        let mut outer = starts[end];
        for k in 1..rings {
            let inner = ring(&mut v, z, r * (rings - k) as f64 / rings as f64);
            for j in 0..segments {
                let jn = (j + 1) % segments;
                if top {
                    f.push([outer + j, outer + jn, inner + jn]);
                    f.push([outer + j, inner + jn, inner + j]);
                } else {
                    f.push([outer + jn, outer + j, inner + jn]);
                    f.push([inner + jn, outer + j, inner + j]);
                }
            }
            outer = inner;
        }
        let center = v.len();
        v.push(Vec3::new(0.0, 0.0, z));
        for j in 0..segments {
            let jn = (j + 1) % segments;
            if top {
                f.push([outer + j, outer + jn, center]);
            } else {
                f.push([outer + jn, outer + j, center]);
            }
        }
    }
    TriMesh::new(v, f).expect("revolved surface is well formed")
}

/// Capped cylinder along z, centred at the origin.
pub fn tube(radius: f64, length: f64, segments: usize, rings: usize) -> TriMesh {
    let profile: Vec<(f64, f64)> = (0..=rings)
        .map(|i| (-length / 2.0 + length * i as f64 / rings as f64, radius))
        .collect();
    revolve(&profile, segments, 2.0)
}
