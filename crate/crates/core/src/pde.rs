//! Neumann Poisson problem `−Δu = f` in Ω, `∇u·n = 0` on ∂Ω, on uniform
//! cell-vertex grids.
//!
//! The second-order Laplacian closes the boundary with mirrored ghost nodes
//! (`u_{−1} = u_1`). Scaling each row by its trapezoid weight makes the
//! operator symmetric positive semi-definite with the constants as its
//! kernel, so the system is solved by conjugate gradients on the mean-zero
//! subspace. The solvability condition is the trapezoid integral `∫f = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::UniformGrid;
use crate::potential::GridDensity;
use crate::table::GridTable;

#[derive(Clone, Debug, PartialEq)]
pub struct NeumannProblem {
    pub grid: UniformGrid,
    /// Node values of the right-hand side `f`.
    pub rhs: Vec<f64>,
    pub compatibility_tol: f64,
}

impl NeumannProblem {
    pub fn new(grid: UniformGrid, rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != grid.len() {
            return Err(Error::invalid("rhs length does not match the grid"));
        }
        Ok(NeumannProblem { grid, rhs, compatibility_tol: 1e-9 })
    }

    /// `f = ρ₁ − ρ₀` for two densities on the same grid.
    pub fn from_densities(rho0: &GridDensity, rho1: &GridDensity) -> Result<Self> {
        if !rho0.grid.same_as(&rho1.grid) {
            return Err(Error::invalid("endpoint densities live on different grids"));
        }
        let rhs = rho1.values.iter().zip(&rho0.values).map(|(a, b)| a - b).collect();
        Self::new(rho0.grid.clone(), rhs)
    }

    /// Subtracts the mean `∫f/|Ω|` so that the problem is solvable.
    pub fn projected(grid: UniformGrid, mut rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != grid.len() {
            return Err(Error::invalid("rhs length does not match the grid"));
        }
        let mean = grid.integrate(&rhs) / grid.domain.volume();
        rhs.iter_mut().for_each(|v| *v -= mean);
        Self::new(grid, rhs)
    }

    pub fn integral(&self) -> f64 {
        self.grid.integrate(&self.rhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Relative residual target `‖r‖/‖b‖`.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal (Jacobi) preconditioning.
    pub jacobi: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 50_000, jacobi: false }
    }
}

/// Solution `u` in the mean-zero gauge together with `∇u` at every node.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub grid: UniformGrid,
    pub u: Vec<f64>,
    /// `grad[axis][node]`.
    pub grad: Vec<Vec<f64>>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Weighted operator `W·(−Δ_h)` with mirrored ghost nodes.
struct Operator<'a> {
    grid: &'a UniformGrid,
    strides: Vec<usize>,
    inv_h2: Vec<f64>,
    weights: Vec<f64>,
}

impl<'a> Operator<'a> {
    fn new(grid: &'a UniformGrid) -> Self {
        Operator {
            grid,
            strides: grid.strides(),
            inv_h2: grid.spacings().iter().map(|h| 1.0 / (h * h)).collect(),
            weights: grid.weights(),
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let s: f64 = self.inv_h2.iter().map(|v| 2.0 * v).sum();
        self.weights.iter().map(|w| w * s).collect()
    }

    fn apply_row(&self, k: usize, u: &[f64]) -> f64 {
        let mut rest = k;
        let mut acc = 0.0;
        for a in (0..self.grid.dim()).rev() {
            let n = self.grid.nodes[a];
            let i = rest % n;
            rest /= n;
            let s = self.strides[a];
            let left = if i == 0 { u[k + s] } else { u[k - s] };
            let right = if i + 1 == n { u[k - s] } else { u[k + s] };
            acc += (2.0 * u[k] - left - right) * self.inv_h2[a];
        }
        self.weights[k] * acc
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().with_min_len(1024).for_each(|(k, o)| *o = self.apply_row(k, u));
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves the Neumann problem by (optionally Jacobi-preconditioned) CG.
pub fn solve_neumann(p: &NeumannProblem, opts: &SolverOptions) -> Result<PotentialField> {
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    if p.rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Neumann right-hand side".into()));
    }
    let integral = p.integral();
    if integral.abs() > p.compatibility_tol {
        return Err(Error::invalid(format!(
            "incompatible Neumann data: ∫f = {integral:e} exceeds tolerance {:e}",
            p.compatibility_tol
        )));
    }
    let grid = &p.grid;
    let n = grid.len();
    let op = Operator::new(grid);
    // b = W f projected onto the range of the operator (orthogonal to constants)
    let mut b: Vec<f64> = p.rhs.iter().zip(&op.weights).map(|(f, w)| f * w).collect();
    remove_mean(&mut b);
    let b_norm = dot(&b, &b).sqrt();
    let mut u = vec![0.0; n];
    let mut iterations = 0;
    let mut rel = 0.0;
    if b_norm > 0.0 {
        let inv_diag: Option<Vec<f64>> = opts.jacobi.then(|| op.diagonal().iter().map(|d| 1.0 / d).collect());
        let precondition = |r: &[f64]| -> Vec<f64> {
            let mut z = match &inv_diag {
                Some(m) => r.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => r.to_vec(),
            };
            remove_mean(&mut z);
            z
        };
        let mut r = b.clone();
        let mut z = precondition(&r);
        let mut dir = z.clone();
        let mut rz = dot(&r, &z);
        let mut ad = vec![0.0; n];
        rel = 1.0;
        while iterations < opts.max_iter {
            op.apply(&dir, &mut ad);
            let denom = dot(&dir, &ad);
            if !(denom > 0.0) {
                break;
            }
            let alpha = rz / denom;
            for k in 0..n {
                u[k] += alpha * dir[k];
                r[k] -= alpha * ad[k];
            }
            remove_mean(&mut r);
            iterations += 1;
            rel = dot(&r, &r).sqrt() / b_norm;
            if rel <= opts.tol {
                break;
            }
            z = precondition(&r);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                dir[k] = z[k] + beta * dir[k];
            }
        }
        if rel > opts.tol {
            return Err(Error::Convergence { iterations, residual: rel });
        }
    }
    remove_mean(&mut u);
    let grad = node_gradient(grid, &u);
    Ok(PotentialField { grid: grid.clone(), u, grad, residual_norm: rel, iterations })
}

/// Central differences; across a boundary face the mirrored ghost value
/// makes the normal component exactly zero.
fn node_gradient(grid: &UniformGrid, u: &[f64]) -> Vec<Vec<f64>> {
    let strides = grid.strides();
    (0..grid.dim())
        .map(|a| {
            let n = grid.nodes[a];
            let s = strides[a];
            let inv = 1.0 / (2.0 * grid.spacing(a));
            (0..grid.len())
                .map(|k| {
                    let i = (k / s) % n;
                    if i == 0 || i + 1 == n {
                        0.0
                    } else {
                        (u[k + s] - u[k - s]) * inv
                    }
                })
                .collect()
        })
        .collect()
}

impl PotentialField {
    /// Multilinear interpolation of `∇u`; exact at nodes.
    pub fn sample_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (cell, frac) = self.grid.locate(x)?;
        Ok(self.grad.iter().map(|g| self.grid.interpolate_located(g, &cell, &frac)).collect())
    }

    pub fn mean_u(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len() as f64
    }

    pub fn to_table(&self) -> String {
        let mut fields = vec![("u".to_string(), self.u.clone())];
        for (a, g) in self.grad.iter().enumerate() {
            fields.push((format!("grad{a}"), g.clone()));
        }
        GridTable {
            kind: "potential_field".into(),
            grid: self.grid.clone(),
            header: vec![
                ("residual_norm".into(), self.residual_norm.to_string()),
                ("iterations".into(), self.iterations.to_string()),
                ("gauge".into(), "mean_zero".into()),
            ],
            fields,
        }
        .render()
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let t = GridTable::parse(text)?;
        if t.kind != "potential_field" {
            return Err(Error::Parse(format!("expected a potential_field table, found '{}'", t.kind)));
        }
        let num = |key: &str| -> Result<&str> {
            t.header_value(key).ok_or_else(|| Error::Parse(format!("missing header '{key}'")))
        };
        let residual_norm = num("residual_norm")?.parse().map_err(|_| Error::Parse("bad residual_norm".into()))?;
        let iterations = num("iterations")?.parse().map_err(|_| Error::Parse("bad iterations".into()))?;
        let grad = (0..t.grid.dim()).map(|a| t.field(&format!("grad{a}")).map(<[f64]>::to_vec)).collect::<Result<_>>()?;
        Ok(PotentialField { grid: t.grid.clone(), u: t.field("u")?.to_vec(), grad, residual_norm, iterations })
    }
}
