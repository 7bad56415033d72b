//! Moser transport between two positive grid densities.
//!
//! With `−Δu = ρ₁ − ρ₀` (zero Neumann data) the velocity field
//!
//! ```text
//! v_t(x) = ∇u(x) / ((1 − t)ρ₀(x) + tρ₁(x))
//! ```
//!
//! keeps the linear interpolation `ρ_t` a solution of the continuity
//! equation, so the time-1 flow map `Φ₁` pushes `ρ₀` onto `ρ₁`. `∇u`, `ρ₀`
//! and `ρ₁` are evaluated off-grid by multilinear interpolation.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoxDomain;
use crate::pde::{solve_neumann, NeumannProblem, PotentialField, SolverOptions};
use crate::potential::GridDensity;
use crate::rng::rng;
use crate::samples::{Provenance, SampleSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    /// `G⁽ᵏ⁾(x) = x + v_{t_k}(x)/ℓ`, composed for `k = 1..ℓ`.
    EulerComposition,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoserOptions {
    #[serde(default = "default_ell")]
    pub ell: usize,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "default_floor")]
    pub floor_delta: f64,
    #[serde(default = "default_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_max_iter")]
    pub solver_max_iter: usize,
    #[serde(default)]
    pub jacobi: bool,
}

fn default_ell() -> usize {
    256
}

fn default_floor() -> f64 {
    1e-8
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    50_000
}

impl Default for MoserOptions {
    fn default() -> Self {
        MoserOptions {
            ell: default_ell(),
            integrator: Integrator::Rk4,
            floor_delta: default_floor(),
            solver_tol: default_tol(),
            solver_max_iter: default_max_iter(),
            jacobi: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoserMap {
    pub field: PotentialField,
    pub rho0: GridDensity,
    pub rho1: GridDensity,
    pub ell: usize,
    pub integrator: Integrator,
    pub floor_delta: f64,
}

impl MoserMap {
    /// Solves the Neumann problem for `ρ₁ − ρ₀` and wraps the result.
    pub fn build(rho0: GridDensity, rho1: GridDensity, opts: &MoserOptions) -> Result<Self> {
        let problem = NeumannProblem::from_densities(&rho0, &rho1)?;
        let solver = SolverOptions { tol: opts.solver_tol, max_iter: opts.solver_max_iter, jacobi: opts.jacobi };
        let field = solve_neumann(&problem, &solver)?;
        Self::from_parts(field, rho0, rho1, opts.ell, opts.integrator, opts.floor_delta)
    }

    pub fn from_parts(
        field: PotentialField,
        rho0: GridDensity,
        rho1: GridDensity,
        ell: usize,
        integrator: Integrator,
        floor_delta: f64,
    ) -> Result<Self> {
        if ell == 0 {
            return Err(Error::invalid("ell must be at least 1"));
        }
        if !(floor_delta >= 0.0) {
            return Err(Error::invalid("floor_delta must be nonnegative"));
        }
        if !rho0.grid.same_as(&field.grid) || !rho1.grid.same_as(&field.grid) {
            return Err(Error::invalid("densities and potential field must share one grid"));
        }
        // ρ_t is a convex combination, so its minimum over t sits at an endpoint.
        let (k, min) = rho0
            .values
            .iter()
            .chain(&rho1.values)
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
        if !(min > 0.0) || min < floor_delta {
            return Err(Error::DensityFloor {
                density: min,
                floor: floor_delta,
                point: field.grid.node(k % field.grid.len()),
            });
        }
        Ok(MoserMap { field, rho0, rho1, ell, integrator, floor_delta })
    }

    pub fn dim(&self) -> usize {
        self.field.grid.dim()
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.field.grid.domain
    }

    /// `v_t(x)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let grid = &self.field.grid;
        let (cell, frac) = grid.locate(x)?;
        let r0 = grid.interpolate_located(&self.rho0.values, &cell, &frac);
        let r1 = grid.interpolate_located(&self.rho1.values, &cell, &frac);
        let rho = (1.0 - t) * r0 + t * r1;
        if !(rho >= self.floor_delta) || rho <= 0.0 {
            return Err(Error::DensityFloor { density: rho, floor: self.floor_delta, point: x.to_vec() });
        }
        Ok(self
            .field
            .grad
            .iter()
            .map(|g| grid.interpolate_located(g, &cell, &frac) / rho)
            .collect())
    }

    fn velocity_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.velocity(x, t).map_err(|e| match e {
            Error::OutOfDomain { point, .. } => Error::OutOfDomain { point, exit_time: Some(t) },
            other => other,
        })
    }

    /// `Φ₁(x0)` (forward) or `Φ₁⁻¹(x0)` (backward) with the configured integrator.
    pub fn integrate(&self, x0: &[f64], direction: Direction) -> Result<Vec<f64>> {
        match self.integrator {
            Integrator::Rk4 => self.integrate_rk4(x0, direction, self.ell),
            Integrator::EulerComposition => match direction {
                Direction::Forward => Ok(self.compose_steps(x0)?.pop().unwrap_or_else(|| x0.to_vec())),
                Direction::Backward => self.euler_backward(x0),
            },
        }
    }

    /// Classical RK4 with `steps` uniform steps.
    pub fn integrate_rk4(&self, x0: &[f64], direction: Direction, steps: usize) -> Result<Vec<f64>> {
        if x0.len() != self.dim() {
            return Err(Error::invalid("point dimension does not match the map"));
        }
        if !self.domain().contains(x0) {
            return Err(Error::OutOfDomain { point: x0.to_vec(), exit_time: None });
        }
        let (mut t, h) = match direction {
            Direction::Forward => (0.0, 1.0 / steps as f64),
            Direction::Backward => (1.0, -1.0 / steps as f64),
        };
        let d = self.dim();
        let mut x = x0.to_vec();
        let mut tmp = vec![0.0; d];
        for step in 0..steps {
            let k1 = self.velocity_at(&x, t)?;
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            let k2 = self.velocity_at(&tmp, t + 0.5 * h)?;
            for i in 0..d {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            let k3 = self.velocity_at(&tmp, t + 0.5 * h)?;
            for i in 0..d {
                tmp[i] = x[i] + h * k3[i];
            }
            let t_next = match direction {
                Direction::Forward => (step + 1) as f64 / steps as f64,
                Direction::Backward => 1.0 - (step + 1) as f64 / steps as f64,
            };
            let k4 = self.velocity_at(&tmp, t_next)?;
            for i in 0..d {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t = t_next;
            if !self.domain().contains(&x) {
                return Err(Error::OutOfDomain { point: x, exit_time: Some(t) });
            }
        }
        Ok(x)
    }

    /// Explicit Euler composition `G⁽ℓ⁾ ∘ ⋯ ∘ G⁽¹⁾`, returning the state
    /// after every step (length `ℓ`).
    pub fn compose_steps(&self, x0: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x0.len() != self.dim() {
            return Err(Error::invalid("point dimension does not match the map"));
        }
        let h = 1.0 / self.ell as f64;
        let mut x = x0.to_vec();
        let mut states = Vec::with_capacity(self.ell);
        for k in 1..=self.ell {
            let t = k as f64 / self.ell as f64;
            let v = self.velocity_at(&x, t)?;
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi += h * vi;
            }
            if !self.domain().contains(&x) {
                return Err(Error::OutOfDomain { point: x, exit_time: Some(t) });
            }
            states.push(x.clone());
        }
        Ok(states)
    }

    fn euler_backward(&self, x0: &[f64]) -> Result<Vec<f64>> {
        let h = 1.0 / self.ell as f64;
        let mut x = x0.to_vec();
        for k in (0..self.ell).rev() {
            let t = k as f64 / self.ell as f64;
            let v = self.velocity_at(&x, t)?;
            for (xi, vi) in x.iter_mut().zip(&v) {
                *xi -= h * vi;
            }
            if !self.domain().contains(&x) {
                return Err(Error::OutOfDomain { point: x, exit_time: Some(t) });
            }
        }
        Ok(x)
    }

    /// Maps every point forward. Failed points are dropped and counted in
    /// `meta.failed_points`; more than 0.1% failures is an error.
    pub fn pushforward(&self, samples: &SampleSet) -> Result<SampleSet> {
        let mapped: Vec<Result<Vec<f64>>> = (0..samples.len())
            .into_par_iter()
            .map(|i| self.integrate(samples.point(i), Direction::Forward))
            .collect();
        let mut out = SampleSet::new(self.dim(), Provenance::MoserPushforward);
        out.seed = samples.seed;
        out.meta = samples.meta.clone();
        let mut failed = Vec::new();
        for (i, r) in mapped.into_iter().enumerate() {
            match r {
                Ok(p) => out.push(&p)?,
                Err(e) => failed.push((i, e)),
            }
        }
        if failed.len() * 1000 > samples.len() {
            let (i, e) = failed.swap_remove(0);
            return Err(Error::NumericalBlowup {
                step: i,
                detail: format!("{} of {} points failed; first: {e}", failed.len() + 1, samples.len()),
            });
        }
        out.meta.insert("failed_points".into(), failed.len().to_string());
        out.meta.insert("ell".into(), self.ell.to_string());
        Ok(out)
    }

    /// Max over interior nodes of `|div(ρ_t v_t) + ρ₁ − ρ₀|` with central
    /// differences; `ρ_t v_t = ∇u` for every `t`.
    pub fn continuity_residual(&self) -> f64 {
        let grid = &self.field.grid;
        let strides = grid.strides();
        let mut worst: f64 = 0.0;
        for k in 0..grid.len() {
            let idx = grid.multi_index(k);
            if idx.iter().zip(&grid.nodes).any(|(&i, &n)| i == 0 || i + 1 == n) {
                continue;
            }
            let mut div = 0.0;
            for a in 0..grid.dim() {
                let s = strides[a];
                div += (self.field.grad[a][k + s] - self.field.grad[a][k - s]) / (2.0 * grid.spacing(a));
            }
            worst = worst.max((div + self.rho1.values[k] - self.rho0.values[k]).abs());
        }
        worst
    }
}

/// Empirical Lipschitz constant `max |T(x) − T(y)| / |x − y|` over random
/// pairs in `region`. Pair separations are log-stratified from the region
/// diameter down to `1e−4` of it.
pub fn lipschitz_estimate<F>(map: F, region: &BoxDomain, n_pairs: usize, seed: u64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    region.validate()?;
    let d = region.dim();
    let diam = region.diameter();
    let mut r = rng(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let x: Vec<f64> = (0..d).map(|a| r.random_range(region.lower[a]..=region.upper[a])).collect();
        let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        dir.iter_mut().for_each(|v| *v /= norm);
        let level = (i as f64 + r.random::<f64>()) / n_pairs as f64;
        let dist = diam * 10f64.powf(-4.0 * level);
        let y: Vec<f64> = (0..d)
            .map(|a| (x[a] + dist * dir[a]).clamp(region.lower[a], region.upper[a]))
            .collect();
        pairs.push((x, y));
    }
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(x, y)| {
            let sep = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if sep == 0.0 {
                return Ok(0.0);
            }
            let (tx, ty) = (map(x)?, map(y)?);
            Ok(tx.iter().zip(&ty).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / sep)
        })
        .collect::<Result<_>>()?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::UniformGrid;
    use crate::mixture::{Boundary, Component, Mixture};

    fn mixture_pair(n: usize) -> (GridDensity, GridDensity) {
        let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
        let grid = UniformGrid::square(2, 0.0, 1.0, n).unwrap();
        let m0 = Mixture::new(
            vec![Component { weight: 1.0, mean: vec![0.35, 0.4], std: vec![0.15, 0.15] }],
            0.3,
            dom.clone(),
            Boundary::Truncate,
        )
        .unwrap();
        let m1 = Mixture::new(
            vec![
                Component { weight: 1.0, mean: vec![0.3, 0.7], std: vec![0.1, 0.1] },
                Component { weight: 1.0, mean: vec![0.7, 0.35], std: vec![0.12, 0.1] },
            ],
            0.3,
            dom,
            Boundary::Truncate,
        )
        .unwrap();
        (m0.on_grid(&grid).unwrap(), m1.on_grid(&grid).unwrap())
    }

    #[test]
    fn equal_endpoints_give_identity() {
        let (rho0, _) = mixture_pair(17);
        let map = MoserMap::build(rho0.clone(), rho0, &MoserOptions { ell: 1, ..Default::default() }).unwrap();
        assert_eq!(map.velocity(&[0.2, 0.9], 0.4).unwrap(), vec![0.0, 0.0]);
        assert_eq!(map.integrate(&[0.2, 0.9], Direction::Forward).unwrap(), vec![0.2, 0.9]);
        assert_eq!(map.compose_steps(&[0.2, 0.9]).unwrap(), vec![vec![0.2, 0.9]]);
    }

    #[test]
    fn velocity_at_t0_is_grad_over_rho0() {
        let (rho0, rho1) = mixture_pair(33);
        let map = MoserMap::build(rho0.clone(), rho1, &MoserOptions::default()).unwrap();
        let x = [0.41, 0.63];
        let g = map.field.sample_gradient(&x).unwrap();
        let r0 = rho0.at(&x).unwrap();
        let v = map.velocity(&x, 0.0).unwrap();
        for a in 0..2 {
            assert!((v[a] - g[a] / r0).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_backward_round_trip() {
        let (rho0, rho1) = mixture_pair(65);
        let map = MoserMap::build(rho0, rho1, &MoserOptions::default()).unwrap();
        let mut r = rng(5);
        for _ in 0..200 {
            let x = [r.random_range(0.05..0.95), r.random_range(0.05..0.95)];
            let y = map.integrate(&x, Direction::Forward).unwrap();
            let back = map.integrate(&y, Direction::Backward).unwrap();
            assert!((back[0] - x[0]).abs() < 1e-6 && (back[1] - x[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn continuity_residual_is_second_order() {
        let coarse = {
            let (a, b) = mixture_pair(33);
            MoserMap::build(a, b, &MoserOptions::default()).unwrap().continuity_residual()
        };
        let fine = {
            let (a, b) = mixture_pair(65);
            MoserMap::build(a, b, &MoserOptions::default()).unwrap().continuity_residual()
        };
        let order = (coarse / fine).log2();
        assert!(order > 1.7, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn density_floor_is_enforced() {
        let grid = UniformGrid::square(1, 0.0, 1.0, 33).unwrap();
        let rho0 = GridDensity::from_fn(grid.clone(), |_| 1.0).unwrap();
        let rho1 = GridDensity::from_fn(grid, |x| (x[0] - 0.5).abs()).unwrap();
        assert!(matches!(
            MoserMap::build(rho0, rho1, &MoserOptions::default()),
            Err(Error::DensityFloor { .. })
        ));
    }

    #[test]
    fn one_dimensional_map_is_monotone() {
        let grid = UniformGrid::square(1, 0.0, 1.0, 513).unwrap();
        let rho0 = GridDensity::from_fn(grid.clone(), |x| (-(x[0] - 0.3f64).powi(2) / 0.02).exp() + 0.05).unwrap();
        let rho1 = GridDensity::from_fn(grid, |x| (-(x[0] - 0.7f64).powi(2) / 0.01).exp() + 0.05).unwrap();
        let map = MoserMap::build(rho0, rho1, &MoserOptions { ell: 128, ..Default::default() }).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..200 {
            let x = 0.0025 + 0.995 * i as f64 / 199.0;
            let y = map.integrate(&[x], Direction::Forward).unwrap()[0];
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn lipschitz_of_linear_maps() {
        let region = BoxDomain::cube(2, -1.0, 1.0).unwrap();
        let id = lipschitz_estimate(|x| Ok(x.to_vec()), &region, 500, 1).unwrap();
        assert!((id - 1.0).abs() < 1e-12);
        let double = lipschitz_estimate(|x| Ok(x.iter().map(|v| 2.0 * v).collect()), &region, 500, 1).unwrap();
        assert!((double - 2.0).abs() < 1e-12);
        assert!(lipschitz_estimate(|x| Ok(x.to_vec()), &region, 0, 1).is_err());
        let failing = lipschitz_estimate(|_| Err(Error::NonFinite("map".into())), &region, 3, 1);
        assert!(failing.is_err());
    }
}
