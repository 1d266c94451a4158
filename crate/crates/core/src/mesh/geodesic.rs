//! Edge-graph geodesics (Dijkstra over mesh edges).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::TriMesh;
use crate::{Error, Result};

/// Distances from a single source vertex; unreachable vertices are infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    pub source: usize,
    pub distances: Vec<f64>,
}

/// Mesh edge graph in compressed adjacency form.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    lengths: Vec<f64>,
}

#[derive(Copy, Clone, PartialEq)]
struct Entry {
    dist: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, then vertex id
        other.dist.total_cmp(&self.dist).then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl EdgeGraph {
    pub fn from_mesh(mesh: &TriMesh) -> Self {
        let n = mesh.vertex_count();
        let edges = mesh.edges();
        let mut degree = vec![0usize; n];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut fill = offsets.clone();
        let mut targets = vec![0usize; offsets[n]];
        let mut lengths = vec![0.0; offsets[n]];
        let vs = mesh.vertices();
        for &(a, b) in &edges {
            let len = (vs[a] - vs[b]).norm();
            targets[fill[a]] = b;
            lengths[fill[a]] = len;
            fill[a] += 1;
            targets[fill[b]] = a;
            lengths[fill[b]] = len;
            fill[b] += 1;
        }
        Self { offsets, targets, lengths }
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[v]..self.offsets[v + 1];
        self.targets[r.clone()].iter().copied().zip(self.lengths[r].iter().copied())
    }

    /// Multi-source shortest paths. Returns distances and, per vertex, the
    /// index (into `sources`) of the source that reached it first.
    pub fn dijkstra_multi(&self, sources: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let n = self.vertex_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut label = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        for (i, &s) in sources.iter().enumerate() {
            if dist[s] > 0.0 {
                dist[s] = 0.0;
                label[s] = i;
                heap.push(Entry { dist: 0.0, vertex: s });
            }
        }
        while let Some(Entry { dist: d, vertex: u }) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for (w, len) in self.neighbors(u) {
                let nd = d + len;
                if nd < dist[w] {
                    dist[w] = nd;
                    label[w] = label[u];
                    heap.push(Entry { dist: nd, vertex: w });
                }
            }
        }
        (dist, label)
    }

    pub fn dijkstra(&self, source: usize) -> Vec<f64> {
        self.dijkstra_multi(&[source]).0
    }
}

/// Geodesic distance from `source` to every vertex over the edge graph.
pub fn geodesic_distances(mesh: &TriMesh, source: usize) -> Result<GeodesicField> {
    if source >= mesh.vertex_count() {
        return Err(Error::IndexOutOfRange { index: source, len: mesh.vertex_count() });
    }
    let graph = EdgeGraph::from_mesh(mesh);
    Ok(GeodesicField { source, distances: graph.dijkstra(source) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::strip;
    use crate::synth::shapes::icosphere;
    use std::f64::consts::PI;

    #[test]
    fn source_is_zero_and_chain_sums() {
        let m = strip(6);
        let f = geodesic_distances(&m, 0).unwrap();
        assert_eq!(f.distances[0], 0.0);
        // vertex 6 is the 4th vertex along the bottom row: three unit edges
        assert!((f.distances[6] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_source_fails() {
        assert!(geodesic_distances(&strip(2), 99).is_err());
    }

    #[test]
    fn antipodal_distance_close_to_half_circumference() {
        let m = icosphere(1.0, 3);
        // vertex 0 and its antipode
        let p0 = m.vertices()[0];
        let anti = m
            .vertices()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 + p0).norm().total_cmp(&(b.1 + p0).norm()))
            .unwrap()
            .0;
        let d = geodesic_distances(&m, 0).unwrap().distances[anti];
        assert!(d >= PI * 0.999 && d <= PI * 1.10, "d = {d}");
    }

    #[test]
    fn symmetric_and_edge_lipschitz() {
        let m = icosphere(1.0, 2);
        let g = EdgeGraph::from_mesh(&m);
        let da = g.dijkstra(3);
        let db = g.dijkstra(40);
        assert!((da[40] - db[3]).abs() < 1e-9);
        for (u, w) in m.edges() {
            let len = (m.vertices()[u] - m.vertices()[w]).norm();
            assert!((da[u] - da[w]).abs() <= len + 1e-9);
        }
    }

    #[test]
    fn multi_source_labels_nearest() {
        let m = strip(10);
        let g = EdgeGraph::from_mesh(&m);
        let (d, label) = g.dijkstra_multi(&[0, 20]);
        assert_eq!(label[2], 0);
        assert_eq!(label[18], 1);
        assert_eq!(d[0], 0.0);
    }
}
