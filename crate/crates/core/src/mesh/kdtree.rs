//! Static k-d tree for nearest-neighbour queries over point sets.

use crate::Vec3;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Nearest-neighbour index. Results are ordered by `(squared distance, index)`
/// so ties are deterministic.
#[derive(Debug, Clone)]
pub struct PointIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl PointIndex {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut index = Self { order: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !index.points.is_empty() {
            index.build(0, index.points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let ext = hi - lo;
        let axis = ext.imax();
        let pts = &self.points;
        self.order[start..end].sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = start + (end - start) / 2;
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.k_nearest(q, 1).into_iter().next()
    }

    /// The `k` nearest points sorted by `(squared distance, index)`.
    pub fn k_nearest(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.nodes.is_empty() {
            return best;
        }
        self.search(0, q, k, &mut best);
        best
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, best: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    insert(best, k, (i, d2));
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, best);
                if best.len() < k || diff * diff <= best[best.len() - 1].1 {
                    self.search(far, q, k, best);
                }
            }
        }
    }

    /// All points within `radius`, sorted by `(squared distance, index)`.
    pub fn within(&self, q: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.collect_within(0, q, radius * radius, &mut out);
        }
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn collect_within(&self, node: usize, q: &Vec3, r2: f64, out: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = (self.points[i] - q).norm_squared();
                    if d2 <= r2 {
                        out.push((i, d2));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff < 0.0 || diff * diff <= r2 {
                    self.collect_within(left, q, r2, out);
                }
                if diff >= 0.0 || diff * diff <= r2 {
                    self.collect_within(right, q, r2, out);
                }
            }
        }
    }
}

fn insert(best: &mut Vec<(usize, f64)>, k: usize, cand: (usize, f64)) {
    let key = |e: &(usize, f64)| (e.1, e.0);
    if best.len() == k {
        let last = best[k - 1];
        if cand.1 > last.1 || (cand.1 == last.1 && cand.0 > last.0) {
            return;
        }
    }
    let pos = best
        .iter()
        .position(|e| {
            let (d, i) = key(e);
            cand.1 < d || (cand.1 == d && cand.0 < i)
        })
        .unwrap_or(best.len());
    best.insert(pos, cand);
    best.truncate(k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let index = PointIndex::new(pts.clone());
        for _ in 0..50 {
            let q = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut brute: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(index.k_nearest(&q, 7), brute[..7].to_vec());
            let within: Vec<_> = brute.iter().copied().filter(|e| e.1 <= 0.09).collect();
            assert_eq!(index.within(&q, 0.3), within);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let index = PointIndex::new(vec![Vec3::x(), -Vec3::x(), Vec3::y()]);
        assert_eq!(index.nearest(&Vec3::zeros()).unwrap().0, 0);
    }
}
