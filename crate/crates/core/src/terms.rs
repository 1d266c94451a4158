//! Residual blocks shared by the pipeline stages.
//!
//! Node parameter groups hold 12 scalars: the affine matrix row-major, then
//! the translation. Surface-expansion blocks use scalar groups.

use crate::deform::read_node_params;
use crate::solver::ResidualBlock;
use crate::Vec3;

const P: usize = 12;

/// Orthonormality of the columns of one affine matrix: three pairwise dot
/// products and three squared-norm deviations from one.
#[derive(Debug, Clone)]
pub struct RigidTerm {
    groups: [usize; 1],
    weight: f64,
}

impl RigidTerm {
    pub fn new(group: usize, weight: f64) -> Self {
        Self { groups: [group], weight }
    }
}

impl ResidualBlock for RigidTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        6
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        let p = params[0];
        // column j of A is (p[j], p[3 + j], p[6 + j])
        let col = |j: usize| Vec3::new(p[j], p[3 + j], p[6 + j]);
        let c = [col(0), col(1), col(2)];
        let pairs = [(0, 1), (0, 2), (1, 2)];
        for (k, &(a, b)) in pairs.iter().enumerate() {
            residual[k] = c[a].dot(&c[b]);
        }
        for j in 0..3 {
            residual[3 + j] = c[j].dot(&c[j]) - 1.0;
        }
        if let Some(jac) = jacobian {
            jac.iter_mut().for_each(|v| *v = 0.0);
            for (k, &(a, b)) in pairs.iter().enumerate() {
                for i in 0..3 {
                    jac[k * P + 3 * i + a] += c[b][i];
                    jac[k * P + 3 * i + b] += c[a][i];
                }
            }
            for j in 0..3 {
                for i in 0..3 {
                    jac[(3 + j) * P + 3 * i + j] = 2.0 * c[j][i];
                }
            }
        }
    }
}

/// Directed smoothness between node `t` and its neighbour `k`:
/// `A_t (g_k - g_t) + g_t + b_t - (g_k + b_k)`.
#[derive(Debug, Clone)]
pub struct SmoothTerm {
    groups: [usize; 2],
    offset: Vec3,
    weight: f64,
}

impl SmoothTerm {
    pub fn new(group_t: usize, group_k: usize, node_t: &Vec3, node_k: &Vec3, weight: f64) -> Self {
        Self { groups: [group_t, group_k], offset: node_k - node_t, weight }
    }
}

impl ResidualBlock for SmoothTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        3
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        let (a, bt) = read_node_params(params[0]);
        let (_, bk) = read_node_params(params[1]);
        let d = self.offset;
        let r = a * d - d + bt - bk;
        residual.copy_from_slice(r.as_slice());
        if let Some(jac) = jacobian {
            jac.iter_mut().for_each(|v| *v = 0.0);
            let w = 2 * P;
            for i in 0..3 {
                for j in 0..3 {
                    jac[i * w + 3 * i + j] = d[j];
                }
                jac[i * w + 9 + i] = 1.0;
                jac[i * w + P + 9 + i] = -1.0;
            }
        }
    }
}

/// Forward/backward consistency of one node: `I - A+ A-` and `A- b+ + b-`.
#[derive(Debug, Clone)]
pub struct TempoTerm {
    groups: [usize; 2],
    weight: f64,
}

impl TempoTerm {
    pub fn new(forward_group: usize, backward_group: usize, weight: f64) -> Self {
        Self { groups: [forward_group, backward_group], weight }
    }
}

impl ResidualBlock for TempoTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        12
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        let (ap, bp) = read_node_params(params[0]);
        let (am, bm) = read_node_params(params[1]);
        let prod = ap * am;
        for i in 0..3 {
            for j in 0..3 {
                residual[3 * i + j] = if i == j { 1.0 } else { 0.0 } - prod[(i, j)];
            }
        }
        let t = am * bp + bm;
        residual[9..12].copy_from_slice(t.as_slice());
        if let Some(jac) = jacobian {
            jac.iter_mut().for_each(|v| *v = 0.0);
            let w = 2 * P;
            for i in 0..3 {
                for j in 0..3 {
                    let row = 3 * i + j;
                    for k in 0..3 {
                        jac[row * w + 3 * i + k] = -am[(k, j)];
                        jac[row * w + P + 3 * k + j] = -ap[(i, k)];
                    }
                }
            }
            for i in 0..3 {
                let row = 9 + i;
                for k in 0..3 {
                    jac[row * w + 9 + k] = am[(i, k)];
                    jac[row * w + P + 3 * i + k] = bp[k];
                }
                jac[row * w + P + 9 + i] = 1.0;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Influence {
    slot: usize,
    coef: f64,
    offset: Vec3,
    anchor: Vec3,
}

/// A linear combination of deformed points minus a target:
/// `p = sum_e coef_e [A (v_e - g_e) + g_e + b_e] - target`.
///
/// The residual is `point_scale * p` (3 rows), followed by
/// `plane_scale * n'p` when a normal is set. This one shape covers the
/// fitting, correspondence, data and second-difference terms.
#[derive(Debug, Clone)]
pub struct DeformedPointsTerm {
    groups: Vec<usize>,
    influences: Vec<Influence>,
    target: Vec3,
    point_scale: f64,
    plane: Option<(Vec3, f64)>,
    weight: f64,
}

impl DeformedPointsTerm {
    pub fn new(target: Vec3, weight: f64) -> Self {
        Self { groups: Vec::new(), influences: Vec::new(), target, point_scale: 1.0, plane: None, weight }
    }

    /// Adds `coef * [A_g (v - node) + node + b_g]` for parameter group `group`.
    pub fn add(&mut self, group: usize, coef: f64, v: &Vec3, node: &Vec3) -> &mut Self {
        let slot = match self.groups.iter().position(|&g| g == group) {
            Some(s) => s,
            None => {
                self.groups.push(group);
                self.groups.len() - 1
            }
        };
        self.influences.push(Influence { slot, coef, offset: v - node, anchor: *node });
        self
    }

    /// Adds `coef * f(v)` for a skinned point; `row` holds `(node, weight)`
    /// and node `t` lives in group `group_offset + t`.
    pub fn add_skinned(&mut self, group_offset: usize, coef: f64, v: &Vec3, row: &[(usize, f64)], nodes: &[Vec3]) -> &mut Self {
        for &(t, w) in row {
            self.add(group_offset + t, coef * w, v, &nodes[t]);
        }
        self
    }

    pub fn with_scales(mut self, point_scale: f64, plane: Option<(Vec3, f64)>) -> Self {
        self.point_scale = point_scale;
        self.plane = plane;
        self
    }

    /// The combination `p` at the given parameters (before scaling).
    pub fn combination(&self, params: &[&[f64]]) -> Vec3 {
        let mut p = -self.target;
        for e in &self.influences {
            let (a, b) = read_node_params(params[e.slot]);
            p += e.coef * (a * e.offset + e.anchor + b);
        }
        p
    }
}

impl ResidualBlock for DeformedPointsTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        3 + usize::from(self.plane.is_some())
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        let p = self.combination(params);
        for i in 0..3 {
            residual[i] = self.point_scale * p[i];
        }
        if let Some((n, s)) = self.plane {
            residual[3] = s * n.dot(&p);
        }
        if let Some(jac) = jacobian {
            jac.iter_mut().for_each(|v| *v = 0.0);
            let w = self.groups.len() * P;
            for e in &self.influences {
                let base = e.slot * P;
                for i in 0..3 {
                    for j in 0..3 {
                        jac[i * w + base + 3 * i + j] += self.point_scale * e.coef * e.offset[j];
                    }
                    jac[i * w + base + 9 + i] += self.point_scale * e.coef;
                }
                if let Some((n, s)) = self.plane {
                    for i in 0..3 {
                        for j in 0..3 {
                            jac[3 * w + base + 3 * i + j] += s * n[i] * e.coef * e.offset[j];
                        }
                        jac[3 * w + base + 9 + i] += s * n[i] * e.coef;
                    }
                }
            }
        }
    }
}

/// Expansion data residual `v + d n - c` on a scalar group.
#[derive(Debug, Clone)]
pub struct ExpansionDataTerm {
    groups: [usize; 1],
    base: Vec3,
    normal: Vec3,
    target: Vec3,
}

impl ExpansionDataTerm {
    pub fn new(group: usize, base: Vec3, normal: Vec3, target: Vec3) -> Self {
        Self { groups: [group], base, normal, target }
    }
}

impl ResidualBlock for ExpansionDataTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        3
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        let r = self.base + params[0][0] * self.normal - self.target;
        residual.copy_from_slice(r.as_slice());
        if let Some(jac) = jacobian {
            jac.copy_from_slice(self.normal.as_slice());
        }
    }
}

/// Expansion smoothness `d_i - d_k` on scalar groups.
#[derive(Debug, Clone)]
pub struct ExpansionSmoothTerm {
    groups: [usize; 2],
    weight: f64,
}

impl ExpansionSmoothTerm {
    pub fn new(i: usize, k: usize, weight: f64) -> Self {
        Self { groups: [i, k], weight }
    }
}

impl ResidualBlock for ExpansionSmoothTerm {
    fn groups(&self) -> &[usize] {
        &self.groups
    }
    fn residual_dim(&self) -> usize {
        1
    }
    fn weight(&self) -> f64 {
        self.weight
    }
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
        residual[0] = params[0][0] - params[1][0];
        if let Some(jac) = jacobian {
            jac[0] = 1.0;
            jac[1] = -1.0;
        }
    }
}
