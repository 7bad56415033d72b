//! Analytic reference distributions: axis-aligned Gaussian mixtures,
//! optionally blended with a uniform floor, truncated to a box, or wrapped
//! onto a periodic box.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxDomain, UniformGrid};
use crate::potential::GridDensity;
use crate::rng::rng;
use crate::samples::{Provenance, SampleSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-axis standard deviations.
    pub std: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Restrict to the box and renormalize (rejection sampling).
    #[default]
    Truncate,
    /// Wrap every axis periodically onto the box.
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub components: Vec<Component>,
    /// Mass of a uniform component on the box.
    #[serde(default)]
    pub uniform_weight: f64,
    pub domain: BoxDomain,
    #[serde(default)]
    pub boundary: Boundary,
}

impl Mixture {
    pub fn new(components: Vec<Component>, uniform_weight: f64, domain: BoxDomain, boundary: Boundary) -> Result<Self> {
        let m = Mixture { components, uniform_weight, domain, boundary };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let d = self.domain.dim();
        if self.components.is_empty() && self.uniform_weight <= 0.0 {
            return Err(Error::invalid("mixture has no mass"));
        }
        if !(0.0..=1.0).contains(&self.uniform_weight) {
            return Err(Error::invalid("uniform_weight must lie in [0, 1]"));
        }
        for c in &self.components {
            if c.mean.len() != d || c.std.len() != d {
                return Err(Error::invalid("component dimension does not match the domain"));
            }
            if !(c.weight > 0.0) || c.std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::invalid("component weights and std must be positive"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn gaussian_weight_total(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Unnormalized Gaussian part at `x` (no truncation constant).
    fn gaussian_part(&self, x: &[f64]) -> f64 {
        let total = self.gaussian_weight_total();
        let mut acc = 0.0;
        for c in &self.components {
            let mut log = 0.0;
            let mut norm = 1.0;
            for a in 0..x.len() {
                let s = c.std[a];
                let diff = match self.boundary {
                    Boundary::Truncate => x[a] - c.mean[a],
                    Boundary::Periodic => {
                        // nearest image; tails beyond one period are negligible
                        let l = self.domain.upper[a] - self.domain.lower[a];
                        let r = (x[a] - c.mean[a]).rem_euclid(l);
                        if r > 0.5 * l { r - l } else { r }
                    }
                };
                log -= 0.5 * (diff / s).powi(2);
                norm *= s * (2.0 * std::f64::consts::PI).sqrt();
            }
            acc += c.weight / total * log.exp() / norm;
        }
        acc
    }

    /// Density up to the truncation constant of the Gaussian part, which
    /// [`Mixture::on_grid`] removes by normalization.
    pub fn unnormalized_density(&self, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return 0.0;
        }
        let gw = if self.components.is_empty() { 0.0 } else { 1.0 - self.uniform_weight };
        gw * self.gaussian_part(x) + self.uniform_weight / self.domain.volume()
    }

    /// Normalized tabulation on `grid`.
    pub fn on_grid(&self, grid: &UniformGrid) -> Result<GridDensity> {
        if grid.domain != self.domain {
            return Err(Error::invalid("grid must cover exactly the mixture domain"));
        }
        // Exact normalization of the truncated Gaussian part is replaced by
        // quadrature; the uniform mass is kept at `uniform_weight`.
        let gauss: Vec<f64> = (0..grid.len()).map(|k| self.gaussian_part(&grid.node(k))).collect();
        let gmass = grid.integrate(&gauss);
        let uw = if self.components.is_empty() { 1.0 } else { self.uniform_weight };
        let vol = self.domain.volume();
        let values = gauss
            .iter()
            .map(|g| if gmass > 0.0 { (1.0 - uw) * g / gmass } else { 0.0 } + uw / vol)
            .collect();
        GridDensity::from_unnormalized(grid.clone(), values)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        let mut r = rng(seed);
        let d = self.dim();
        let total = self.gaussian_weight_total();
        let mut out = SampleSet::new(d, Provenance::Reference).with_seed(seed);
        let mut x = vec![0.0; d];
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * n + 1000 {
                return Err(Error::NumericalBlowup {
                    step: attempts,
                    detail: "rejection sampler acceptance rate too low".into(),
                });
            }
            let uniform = self.components.is_empty() || r.random::<f64>() < self.uniform_weight;
            if uniform {
                for a in 0..d {
                    x[a] = r.random_range(self.domain.lower[a]..self.domain.upper[a]);
                }
            } else {
                let mut pick = r.random::<f64>() * total;
                let mut comp = &self.components[self.components.len() - 1];
                for c in &self.components {
                    if pick < c.weight {
                        comp = c;
                        break;
                    }
                    pick -= c.weight;
                }
                for a in 0..d {
                    let z: f64 = StandardNormal.sample(&mut r);
                    x[a] = comp.mean[a] + comp.std[a] * z;
                }
                if self.boundary == Boundary::Periodic {
                    for a in 0..d {
                        let lo = self.domain.lower[a];
                        let l = self.domain.upper[a] - lo;
                        x[a] = lo + (x[a] - lo).rem_euclid(l);
                    }
                }
            }
            if self.domain.contains(&x) {
                out.push(&x)?;
            }
        }
        Ok(out)
    }
}
