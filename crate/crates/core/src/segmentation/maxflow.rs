//! Dinic max-flow on a small directed graph with real capacities.

use std::collections::VecDeque;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: f64,
}

#[derive(Debug, Clone)]
pub struct FlowGraph {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl FlowGraph {
    pub fn new(nodes: usize) -> Self {
        Self { edges: Vec::new(), adj: vec![Vec::new(); nodes] }
    }

    /// Adds `a -> b` with capacity `cap` and `b -> a` with `rev_cap`.
    pub fn add_edge(&mut self, a: usize, b: usize, cap: f64, rev_cap: f64) {
        if cap <= 0.0 && rev_cap <= 0.0 {
            return;
        }
        self.adj[a].push(self.edges.len());
        self.edges.push(Edge { to: b, cap: cap.max(0.0) });
        self.adj[b].push(self.edges.len());
        self.edges.push(Edge { to: a, cap: rev_cap.max(0.0) });
    }

    fn levels(&self, s: usize) -> Vec<usize> {
        let mut level = vec![usize::MAX; self.adj.len()];
        level[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let edge = &self.edges[e];
                if edge.cap > EPS && level[edge.to] == usize::MAX {
                    level[edge.to] = level[u] + 1;
                    queue.push_back(edge.to);
                }
            }
        }
        level
    }

    /// One augmenting path in the level graph, found without recursion.
    fn augment(&mut self, s: usize, t: usize, level: &[usize], next: &mut [usize]) -> f64 {
        let mut path: Vec<usize> = Vec::new();
        let mut u = s;
        loop {
            if u == t {
                let f = path.iter().map(|&e| self.edges[e].cap).fold(f64::INFINITY, f64::min);
                for &e in &path {
                    self.edges[e].cap -= f;
                    self.edges[e ^ 1].cap += f;
                }
                return f;
            }
            let mut advanced = false;
            while next[u] < self.adj[u].len() {
                let e = self.adj[u][next[u]];
                let to = self.edges[e].to;
                if self.edges[e].cap > EPS && level[to] == level[u] + 1 {
                    path.push(e);
                    u = to;
                    advanced = true;
                    break;
                }
                next[u] += 1;
            }
            if !advanced {
                let Some(e) = path.pop() else { return 0.0 };
                u = self.edges[e ^ 1].to;
                next[u] += 1;
            }
        }
    }

    /// Maximum flow from `s` to `t`; afterwards `source_side` gives the cut.
    pub fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        loop {
            let level = self.levels(s);
            if level[t] == usize::MAX {
                return flow;
            }
            let mut next = vec![0; self.adj.len()];
            loop {
                let f = self.augment(s, t, &level, &mut next);
                if f <= EPS {
                    break;
                }
                flow += f;
            }
        }
    }

    /// Nodes reachable from `s` in the residual graph.
    pub fn source_side(&self, s: usize) -> Vec<bool> {
        let level = self.levels(s);
        level.iter().map(|&l| l != usize::MAX).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_network() {
        // CLRS figure 26.1: max flow 23
        let mut g = FlowGraph::new(6);
        for &(a, b, c) in &[(0, 1, 16.0), (0, 2, 13.0), (2, 1, 4.0), (1, 3, 12.0), (3, 2, 9.0), (2, 4, 14.0), (4, 3, 7.0), (3, 5, 20.0), (4, 5, 4.0)] {
            g.add_edge(a, b, c, 0.0);
        }
        assert!((g.max_flow(0, 5) - 23.0).abs() < 1e-12);
        let side = g.source_side(0);
        assert!(side[0] && !side[5]);
    }

    #[test]
    fn min_cut_equals_brute_force_on_random_graphs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = 6;
            let mut caps = vec![vec![0.0; n]; n];
            for a in 0..n {
                for b in 0..n {
                    if a != b && rng.random::<f64>() < 0.5 {
                        caps[a][b] = rng.random::<f64>() * 10.0;
                    }
                }
            }
            let mut g = FlowGraph::new(n);
            for a in 0..n {
                for b in 0..n {
                    if caps[a][b] > 0.0 {
                        g.add_edge(a, b, caps[a][b], 0.0);
                    }
                }
            }
            let flow = g.max_flow(0, n - 1);
            // enumerate all s-t cuts
            let mut best = f64::INFINITY;
            for mask in 0..(1u32 << (n - 2)) {
                let in_s = |v: usize| v == 0 || (v != n - 1 && mask >> (v - 1) & 1 == 1);
                let mut cut = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        if in_s(a) && !in_s(b) {
                            cut += caps[a][b];
                        }
                    }
                }
                best = f64::min(best, cut);
            }
            assert!((flow - best).abs() < 1e-9, "{flow} vs {best}");
        }
    }
}
