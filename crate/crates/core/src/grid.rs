//! Uniform cell-vertex grids on axis-aligned boxes.
//!
//! Nodes include both box faces. Quadrature uses the composite trapezoid rule,
//! i.e. boundary nodes carry half weight per axis. Values are stored row-major
//! with the last axis varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = BoxDomain { lower, upper };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() || self.lower.is_empty() {
            return Err(Error::invalid("box bounds must be non-empty and of equal length"));
        }
        for (axis, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::invalid(format!(
                    "box axis {axis}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(lo, hi)| hi - lo).product()
    }
}

/// Uniform cell-vertex grid over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub domain: BoxDomain,
    /// Node count per axis, including both boundary nodes.
    pub nodes: Vec<usize>,
}

impl UniformGrid {
    pub fn new(domain: BoxDomain, nodes: Vec<usize>) -> Result<Self> {
        domain.validate()?;
        if nodes.len() != domain.dim() {
            return Err(Error::invalid("grid node counts do not match box dimension"));
        }
        if nodes.iter().any(|&n| n < 2) {
            return Err(Error::invalid("every grid axis needs at least 2 nodes"));
        }
        Ok(UniformGrid { domain, nodes })
    }

    /// `n` nodes per axis on `[lo, hi]^dim`.
    pub fn square(dim: usize, lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(BoxDomain::cube(dim, lo, hi)?, vec![n; dim])
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.domain.upper[axis] - self.domain.lower[axis]) / (self.nodes[axis] - 1) as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim()).map(|a| self.spacing(a)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.spacing(a)).product()
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.nodes[axis] {
            self.domain.upper[axis]
        } else {
            self.domain.lower[axis] + i as f64 * self.spacing(axis)
        }
    }

    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.nodes[axis]).map(|i| self.axis_coord(axis, i)).collect()
    }

    /// Row-major strides (last axis fastest).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for a in (0..self.dim().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.nodes[a + 1];
        }
        strides
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            idx[a] = flat % self.nodes[a];
            flat /= self.nodes[a];
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        self.multi_index(flat)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.axis_coord(a, i))
            .collect()
    }

    /// Trapezoid quadrature weight of a node.
    pub fn weight(&self, flat: usize) -> f64 {
        let mut w = self.cell_volume();
        for (a, &i) in self.multi_index(flat).iter().enumerate() {
            if i == 0 || i + 1 == self.nodes[a] {
                w *= 0.5;
            }
        }
        w
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.weight(k)).collect()
    }

    /// Ordered (deterministic) trapezoid quadrature of node values.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        values
            .iter()
            .enumerate()
            .map(|(k, v)| self.weight(k) * v)
            .sum()
    }

    /// Lower-corner cell index and local coordinates in `[0, 1]` per axis.
    pub fn locate(&self, x: &[f64]) -> Result<(Vec<usize>, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, grid has {}",
                x.len(),
                self.dim()
            )));
        }
        let mut cell = Vec::with_capacity(self.dim());
        let mut frac = Vec::with_capacity(self.dim());
        for (a, &v) in x.iter().enumerate() {
            let lo = self.domain.lower[a];
            let hi = self.domain.upper[a];
            let slack = 1e-12 * (hi - lo);
            if !(v >= lo - slack && v <= hi + slack) {
                return Err(Error::OutOfDomain { point: x.to_vec(), exit_time: None });
            }
            let h = self.spacing(a);
            let s = ((v - lo) / h).clamp(0.0, (self.nodes[a] - 1) as f64);
            let i = (s.floor() as usize).min(self.nodes[a] - 2);
            cell.push(i);
            frac.push(s - i as f64);
        }
        Ok((cell, frac))
    }

    /// Multilinear interpolation of node values at `x`.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        let (cell, frac) = self.locate(x)?;
        Ok(self.interpolate_located(values, &cell, &frac))
    }

    pub(crate) fn interpolate_located(&self, values: &[f64], cell: &[usize], frac: &[f64]) -> f64 {
        let strides = self.strides();
        let base: usize = cell.iter().zip(&strides).map(|(i, s)| i * s).sum();
        let d = self.dim();
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = 0;
            for a in 0..d {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    off += strides[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * values[base + off];
            }
        }
        acc
    }

    pub fn same_as(&self, other: &UniformGrid) -> bool {
        self == other
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_integrates_linear_exactly() {
        let g = UniformGrid::square(2, 0.0, 2.0, 17).unwrap();
        let vals: Vec<f64> = (0..g.len()).map(|k| {
            let p = g.node(k);
            1.0 + p[0] + 3.0 * p[1]
        }).collect();
        // ∫∫ (1 + x + 3y) over [0,2]² = 4 + 4 + 12
        assert!((g.integrate(&vals) - 20.0).abs() < 1e-12);
        assert!((g.weights().iter().sum::<f64>() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_exact_at_nodes_and_bilinear() {
        let g = UniformGrid::new(BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap(), vec![5, 7]).unwrap();
        let f = |p: &[f64]| 2.0 * p[0] - p[1] + 0.5 * p[0] * p[1];
        let vals: Vec<f64> = (0..g.len()).map(|k| f(&g.node(k))).collect();
        for k in 0..g.len() {
            assert_eq!(g.interpolate(&vals, &g.node(k)).unwrap(), vals[k]);
        }
        let x = [0.123, 2.71];
        assert!((g.interpolate(&vals, &x).unwrap() - f(&x)).abs() < 1e-12);
        assert!(matches!(g.interpolate(&vals, &[1.5, 0.0]), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoxDomain::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoxDomain::new(vec![0.0], vec![f64::INFINITY]).is_err());
        assert!(UniformGrid::square(1, 0.0, 1.0, 1).is_err());
    }
}
