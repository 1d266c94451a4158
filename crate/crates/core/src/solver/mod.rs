//! Damped Gauss-Newton over residual blocks.
//!
//! Parameters are a flat vector split into groups of equal size. Each block
//! touches a few groups and contributes `weight * |r|^2` to the energy. The
//! normal equations are assembled block-sparse and solved with a sparse
//! LDL' whose symbolic analysis is computed once per problem.

mod assembly;

pub use assembly::{assemble_normal_equations, NormalEquations};

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::linalg::{CscUpper, LdlSymbolic};
use crate::{Error, Result};
use assembly::Assembler;

/// A weighted residual over a few parameter groups.
pub trait ResidualBlock: Send + Sync {
    /// Parameter groups read by the block, in Jacobian column order.
    fn groups(&self) -> &[usize];

    fn residual_dim(&self) -> usize;

    fn weight(&self) -> f64 {
        1.0
    }

    /// Writes the residual and, when requested, the row-major Jacobian of
    /// size `residual_dim x (groups().len() * group_size)`.
    fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>);
}

/// A least-squares problem: blocks plus the parameter layout.
pub struct Problem {
    group_size: usize,
    group_count: usize,
    fixed: Vec<bool>,
    blocks: Vec<Box<dyn ResidualBlock>>,
}

impl Problem {
    pub fn new(group_size: usize, group_count: usize) -> Self {
        Self { group_size, group_count, fixed: vec![false; group_count], blocks: Vec::new() }
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.group_count
    }

    pub fn set_fixed(&mut self, group: usize, fixed: bool) {
        self.fixed[group] = fixed;
    }

    pub fn is_fixed(&self, group: usize) -> bool {
        self.fixed[group]
    }

    pub fn add(&mut self, block: impl ResidualBlock + 'static) {
        self.blocks.push(Box::new(block));
    }

    pub fn add_boxed(&mut self, block: Box<dyn ResidualBlock>) {
        self.blocks.push(block);
    }

    pub fn blocks(&self) -> &[Box<dyn ResidualBlock>] {
        &self.blocks
    }

    pub fn validate(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.group_size * self.group_count {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.group_size * self.group_count,
                params.len()
            )));
        }
        for b in &self.blocks {
            if let Some(&g) = b.groups().iter().find(|&&g| g >= self.group_count) {
                return Err(Error::IndexOutOfRange { index: g, len: self.group_count });
            }
            if !(b.weight() >= 0.0) {
                return Err(Error::InvalidArgument("block weights must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn group_slices<'a>(&self, block: &dyn ResidualBlock, params: &'a [f64]) -> Vec<&'a [f64]> {
        let s = self.group_size;
        block.groups().iter().map(|&g| &params[g * s..(g + 1) * s]).collect()
    }

    /// `sum_b weight_b * |r_b|^2`.
    pub fn energy(&self, params: &[f64]) -> f64 {
        self.blocks.par_iter().map(|b| block_energy(self, b.as_ref(), params)).collect::<Vec<f64>>().iter().sum()
    }

    /// Energy of the blocks selected by `filter` (by block index).
    pub fn partial_energy(&self, params: &[f64], filter: impl Fn(usize) -> bool) -> f64 {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(i, _)| filter(*i))
            .map(|(_, b)| block_energy(self, b.as_ref(), params))
            .sum()
    }
}

fn block_energy(problem: &Problem, block: &dyn ResidualBlock, params: &[f64]) -> f64 {
    let slices = problem.group_slices(block, params);
    let mut r = vec![0.0; block.residual_dim()];
    block.evaluate(&slices, &mut r, None);
    block.weight() * r.iter().map(|x| x * x).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-6,
            step_tolerance: 1e-8,
            initial_damping: 1e-6,
            max_damping: 1e3,
            max_backtracks: 20,
        }
    }
}

impl SolverOptions {
    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub energy: f64,
    pub damping: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Energy after every accepted iterate, starting with the initial one.
    pub energy_trace: Vec<f64>,
    pub records: Vec<IterationRecord>,
    pub status: Convergence,
}

impl SolverReport {
    pub fn is_monotone(&self) -> bool {
        self.energy_trace.windows(2).all(|w| w[1] <= w[0])
    }

    /// CSV with columns iteration, energy, damping, step_norm.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,energy,damping,step_norm\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{:e},{:e},{:e}", r.iteration, r.energy, r.damping, r.step_norm);
        }
        out
    }
}

/// Minimizes the problem energy starting from `initial`.
pub fn solve(problem: &Problem, initial: &[f64], options: &SolverOptions) -> Result<(Vec<f64>, SolverReport)> {
    problem.validate(initial)?;
    let mut x = initial.to_vec();
    let e0 = problem.energy(&x);
    if !e0.is_finite() {
        return Err(Error::NonFiniteResidual);
    }
    let mut report = SolverReport {
        iterations: 0,
        initial_energy: e0,
        final_energy: e0,
        energy_trace: vec![e0],
        records: vec![IterationRecord { iteration: 0, energy: e0, damping: 0.0, step_norm: 0.0 }],
        status: Convergence::Converged,
    };
    let free = (0..problem.group_count).filter(|&g| !problem.fixed[g]).count();
    if problem.blocks.is_empty() || free == 0 || options.max_iterations == 0 {
        return Ok((x, report));
    }

    let assembler = Assembler::new(problem, true);
    let symbolic = LdlSymbolic::new(assembler.pattern());
    let mut damping = options.initial_damping;
    let mut energy = e0;
    let mut status = Convergence::MaxIterations;
    let mut it = 0;
    while it < options.max_iterations {
        it += 1;
        if energy <= f64::MIN_POSITIVE {
            status = Convergence::Converged;
            it -= 1;
            break;
        }
        let mut system: CscUpper = assembler.pattern().clone();
        let mut rhs = vec![0.0; system.n];
        assembler.assemble(problem, &x, &mut system, &mut rhs);
        let base = system.values.clone();

        // find an acceptable step, raising the damping when none exists
        let accepted = loop {
            let diag = assembler.diagonal_positions();
            system.values.copy_from_slice(&base);
            for &p in diag {
                system.values[p] += damping;
            }
            let factor = match symbolic.factor(&system) {
                Some(f) => f,
                None => {
                    damping *= 10.0;
                    if damping > options.max_damping {
                        return Err(Error::SingularSystem { damping });
                    }
                    continue;
                }
            };
            let mut step = rhs.clone();
            factor.solve_in_place(&mut step);
            let full_step = assembler.scatter_step(&step, problem);
            let step_norm = full_step.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut alpha = 1.0;
            let mut found = None;
            for _ in 0..=options.max_backtracks {
                let trial: Vec<f64> = x.iter().zip(&full_step).map(|(a, d)| a + alpha * d).collect();
                let e = problem.energy(&trial);
                if e.is_finite() && e <= energy {
                    found = Some((trial, e, alpha * step_norm));
                    break;
                }
                alpha *= 0.5;
            }
            match found {
                Some((trial, e, norm)) => {
                    if alpha == 1.0 {
                        damping = (damping / 10.0).max(1e-12);
                    }
                    break Some((trial, e, norm));
                }
                None => {
                    damping *= 10.0;
                    if damping > options.max_damping {
                        break None;
                    }
                }
            }
        };
        let Some((trial, e, step_norm)) = accepted else {
            status = Convergence::Stalled;
            break;
        };
        let decrease = (energy - e) / energy.max(f64::MIN_POSITIVE);
        x = trial;
        energy = e;
        report.energy_trace.push(e);
        report.records.push(IterationRecord { iteration: it, energy: e, damping, step_norm });
        if decrease < options.relative_tolerance || step_norm < options.step_tolerance {
            status = Convergence::Converged;
            break;
        }
    }
    report.iterations = it;
    report.final_energy = energy;
    report.status = status;
    Ok((x, report))
}

/// Largest elementwise relative difference between the analytic Jacobian and
/// central finite differences, with denominator `max(1, |analytic|)`.
pub fn check_jacobian(block: &dyn ResidualBlock, params: &[&[f64]], step: f64) -> f64 {
    let dim = block.residual_dim();
    let widths: Vec<usize> = params.iter().map(|p| p.len()).collect();
    let cols: usize = widths.iter().sum();
    let mut r = vec![0.0; dim];
    let mut jac = vec![0.0; dim * cols];
    block.evaluate(params, &mut r, Some(&mut jac));
    let mut owned: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    let mut rp = vec![0.0; dim];
    let mut rm = vec![0.0; dim];
    let mut worst = 0.0f64;
    let mut col = 0;
    for g in 0..owned.len() {
        for k in 0..widths[g] {
            let orig = owned[g][k];
            owned[g][k] = orig + step;
            {
                let views: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
                block.evaluate(&views, &mut rp, None);
            }
            owned[g][k] = orig - step;
            {
                let views: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
                block.evaluate(&views, &mut rm, None);
            }
            owned[g][k] = orig;
            // the representable spacing, not 2*step, divides the difference
            let span = (orig + step) - (orig - step);
            for i in 0..dim {
                let fd = (rp[i] - rm[i]) / span;
                let an = jac[i * cols + col];
                worst = worst.max((fd - an).abs() / an.abs().max(1.0));
            }
            col += 1;
        }
    }
    worst
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// `r = coeffs . x[groups] - target` on scalar groups.
    pub struct Linear {
        pub groups: Vec<usize>,
        pub coeffs: Vec<f64>,
        pub target: f64,
        pub weight: f64,
    }

    impl ResidualBlock for Linear {
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
            let width = params[0].len();
            let mut s = -self.target;
            for (g, p) in params.iter().enumerate() {
                for k in 0..width {
                    s += self.coeffs[g * width + k] * p[k];
                }
            }
            residual[0] = s;
            if let Some(j) = jacobian {
                j.copy_from_slice(&self.coeffs);
            }
        }
    }

    /// Rosenbrock residuals `(1 - x, 10 (y - x^2))` on one group of size 2.
    pub struct Rosenbrock;

    impl ResidualBlock for Rosenbrock {
        fn groups(&self) -> &[usize] {
            &[0]
        }
        fn residual_dim(&self) -> usize {
            2
        }
        fn evaluate(&self, params: &[&[f64]], residual: &mut [f64], jacobian: Option<&mut [f64]>) {
            let (x, y) = (params[0][0], params[0][1]);
            residual[0] = 1.0 - x;
            residual[1] = 10.0 * (y - x * x);
            if let Some(j) = jacobian {
                j.copy_from_slice(&[-1.0, 0.0, -20.0 * x, 10.0]);
            }
        }
    }
}
