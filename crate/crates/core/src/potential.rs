//! Closed-form potential energies, high-energy regularization and gridded
//! Boltzmann densities.
//!
//! Energies take values in `ℝ ∪ {+∞}`; `+∞` is returned exactly on the
//! collision set of pairs that carry a Coulomb or Lennard-Jones term.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxDomain, UniformGrid};
use crate::table::GridTable;

/// Anything that can be sampled with Langevin dynamics or tabulated on a grid.
pub trait Energy: Sync {
    fn dim(&self) -> usize;

    /// Energy at `x`; may be `+∞`.
    fn energy(&self, x: &[f64]) -> Result<f64>;

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Optional confining box. Langevin reflects at its faces.
    fn domain(&self) -> Option<&BoxDomain> {
        None
    }
}

/// Pairwise non-bonded term `q_i q_j / r + A / r¹² − B / r⁶`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTerm {
    pub qq: f64,
    pub a: f64,
    pub b: f64,
}

impl PairTerm {
    fn is_active(&self) -> bool {
        self.qq != 0.0 || self.a != 0.0 || self.b != 0.0
    }

    /// Singular at `r = 0` exactly when a Coulomb or LJ term is present.
    fn singular_at_zero(&self) -> bool {
        self.qq != 0.0 || self.a > 0.0
    }

    pub fn value(&self, r: f64) -> f64 {
        if r == 0.0 {
            return if self.singular_at_zero() { f64::INFINITY } else { 0.0 };
        }
        let inv6 = r.powi(-6);
        self.qq / r + self.a * inv6 * inv6 - self.b * inv6
    }

    /// dφ/dr.
    pub fn derivative(&self, r: f64) -> f64 {
        let inv = 1.0 / r;
        let inv6 = inv.powi(6);
        -self.qq * inv * inv - 12.0 * self.a * inv6 * inv6 * inv + 6.0 * self.b * inv6 * inv
    }

    /// Infimum of the pair energy over `r > 0`.
    pub fn infimum(&self) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        if self.qq == 0.0 {
            // r* = (2A/B)^(1/6), φ(r*) = −B²/(4A)
            return if self.b > 0.0 { -self.b * self.b / (4.0 * self.a) } else { 0.0 };
        }
        // Log-spaced scan, then golden-section refinement around the best bracket.
        let n = 4000;
        let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
        let r_at = |i: usize| (lo + (hi - lo) * i as f64 / n as f64).exp();
        let best = (0..=n)
            .min_by(|&i, &j| self.value(r_at(i)).total_cmp(&self.value(r_at(j))))
            .unwrap_or(0);
        let mut a = r_at(best.saturating_sub(1));
        let mut b = r_at((best + 1).min(n));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.value(c) < self.value(d) {
                b = d;
            } else {
                a = c;
            }
        }
        self.value(0.5 * (a + b)).min(self.value(r_at(best))).min(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Force constant `b_ij > 0`.
    pub k: f64,
    pub rest: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Angle {
    pub i: usize,
    /// Vertex atom.
    pub j: usize,
    pub k: usize,
    pub stiffness: f64,
    /// Rest angle in radians.
    pub rest: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorsionTerm {
    pub n: u32,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Torsion {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub terms: Vec<TorsionTerm>,
}

/// Molecular energy: bonds, angles, torsions and all-pairs Coulomb + LJ.
/// Atoms live in ℝ³ and `x` is the flat `3N` coordinate vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Molecule {
    pub charges: Vec<f64>,
    /// Symmetric `N × N` LJ repulsion coefficients; the diagonal is ignored.
    pub lj_a: Vec<Vec<f64>>,
    pub lj_b: Vec<Vec<f64>>,
    pub bonds: Vec<Bond>,
    pub angles: Vec<Angle>,
    pub torsions: Vec<Torsion>,
}

impl Molecule {
    pub fn n_atoms(&self) -> usize {
        self.charges.len()
    }

    fn pair(&self, i: usize, j: usize) -> PairTerm {
        PairTerm {
            qq: self.charges[i] * self.charges[j],
            a: self.lj_a[i][j],
            b: self.lj_b[i][j],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_atoms();
        if n < 2 {
            return Err(Error::invalid("composite potential needs at least 2 atoms"));
        }
        for m in [&self.lj_a, &self.lj_b] {
            if m.len() != n || m.iter().any(|row| row.len() != n) {
                return Err(Error::invalid("LJ coefficient matrices must be N × N"));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (self.lj_a[i][j], self.lj_b[i][j]);
                if a != self.lj_a[j][i] || b != self.lj_b[j][i] {
                    return Err(Error::invalid(format!("LJ matrices not symmetric at ({i}, {j})")));
                }
                check_pair(self.charges[i] * self.charges[j], a, b, (i, j))?;
            }
        }
        let in_range = |idx: &[usize]| idx.iter().all(|&a| a < n);
        for b in &self.bonds {
            if !in_range(&[b.i, b.j]) || b.i == b.j {
                return Err(Error::invalid(format!("bad bond atoms ({}, {})", b.i, b.j)));
            }
            if !(b.k > 0.0) || !b.rest.is_finite() {
                return Err(Error::invalid("bond constants must be positive"));
            }
        }
        for a in &self.angles {
            if !in_range(&[a.i, a.j, a.k]) {
                return Err(Error::invalid("angle atom index out of range"));
            }
            if !(a.stiffness > 0.0) || !a.rest.is_finite() {
                return Err(Error::invalid("angle constants must be positive"));
            }
        }
        for t in &self.torsions {
            if !in_range(&[t.i, t.j, t.k, t.l]) {
                return Err(Error::invalid("torsion atom index out of range"));
            }
            if t.terms.iter().any(|c| !(c.amplitude >= 0.0) || c.n == 0 || !c.phase.is_finite()) {
                return Err(Error::invalid("torsion amplitudes must be ≥ 0 with n ≥ 1"));
            }
        }
        Ok(())
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let p = |i: usize| [x[3 * i], x[3 * i + 1], x[3 * i + 2]];
        let n = self.n_atoms();
        let mut u = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let term = self.pair(i, j);
                if term.is_active() {
                    u += term.value(norm(sub(p(i), p(j))));
                    if u == f64::INFINITY {
                        // bonded terms are undefined on the collision set
                        return u;
                    }
                }
            }
        }
        for b in &self.bonds {
            let r = norm(sub(p(b.i), p(b.j)));
            u += b.k * (r - b.rest).powi(2);
        }
        for a in &self.angles {
            let theta = bond_angle(p(a.i), p(a.j), p(a.k));
            u += a.stiffness * (theta - a.rest).powi(2);
        }
        for t in &self.torsions {
            let phi = dihedral(p(t.i), p(t.j), p(t.k), p(t.l));
            for c in &t.terms {
                u += c.amplitude * (1.0 + (c.n as f64 * phi - c.phase).cos());
            }
        }
        u
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = |i: usize| [x[3 * i], x[3 * i + 1], x[3 * i + 2]];
        let n = self.n_atoms();
        let mut g = vec![0.0; x.len()];
        let mut add = |i: usize, v: [f64; 3], s: f64| {
            for c in 0..3 {
                g[3 * i + c] += s * v[c];
            }
        };
        for i in 0..n {
            for j in (i + 1)..n {
                let term = self.pair(i, j);
                if !term.is_active() {
                    continue;
                }
                let d = sub(p(i), p(j));
                let r = norm(d);
                if r == 0.0 {
                    if term.singular_at_zero() {
                        return Err(Error::Singularity(format!("atoms {i} and {j} coincide")));
                    }
                    continue;
                }
                let f = term.derivative(r) / r;
                add(i, d, f);
                add(j, d, -f);
            }
        }
        for b in &self.bonds {
            let d = sub(p(b.i), p(b.j));
            let r = norm(d);
            if r == 0.0 {
                if b.rest == 0.0 {
                    continue;
                }
                return Err(Error::Singularity(format!("bond {}-{} has zero length", b.i, b.j)));
            }
            let f = 2.0 * b.k * (r - b.rest) / r;
            add(b.i, d, f);
            add(b.j, d, -f);
        }
        for a in &self.angles {
            let (xi, xj, xk) = (p(a.i), p(a.j), p(a.k));
            let u = sub(xi, xj);
            let w = sub(xk, xj);
            let (nu, nw) = (norm(u), norm(w));
            let cos = (dot(u, w) / (nu * nw)).clamp(-1.0, 1.0);
            let theta = cos.acos();
            let sin = (1.0 - cos * cos).sqrt();
            if nu == 0.0 || nw == 0.0 || sin < 1e-12 {
                return Err(Error::Singularity(format!(
                    "angle {}-{}-{} is degenerate",
                    a.i, a.j, a.k
                )));
            }
            let de = 2.0 * a.stiffness * (theta - a.rest);
            // dθ/du = −(w/(|u||w|) − cos·u/|u|²) / sin
            let gu: [f64; 3] = std::array::from_fn(|c| -(w[c] / (nu * nw) - cos * u[c] / (nu * nu)) / sin);
            let gw: [f64; 3] = std::array::from_fn(|c| -(u[c] / (nu * nw) - cos * w[c] / (nw * nw)) / sin);
            add(a.i, gu, de);
            add(a.k, gw, de);
            add(a.j, gu, -de);
            add(a.j, gw, -de);
        }
        for t in &self.torsions {
            let (xi, xj, xk, xl) = (p(t.i), p(t.j), p(t.k), p(t.l));
            let b1 = sub(xj, xi);
            let b2 = sub(xk, xj);
            let b3 = sub(xl, xk);
            let n1 = cross(b1, b2);
            let n2 = cross(b2, b3);
            let (n1sq, n2sq) = (dot(n1, n1), dot(n2, n2));
            let b2n = norm(b2);
            if n1sq < 1e-24 || n2sq < 1e-24 || b2n == 0.0 {
                return Err(Error::Singularity(format!(
                    "torsion {}-{}-{}-{} is degenerate",
                    t.i, t.j, t.k, t.l
                )));
            }
            let phi = dihedral(xi, xj, xk, xl);
            let de: f64 = t
                .terms
                .iter()
                .map(|c| -c.amplitude * c.n as f64 * (c.n as f64 * phi - c.phase).sin())
                .sum();
            let gi: [f64; 3] = std::array::from_fn(|c| -b2n * n1[c] / n1sq);
            let gl: [f64; 3] = std::array::from_fn(|c| b2n * n2[c] / n2sq);
            let r1 = dot(b1, b2) / (b2n * b2n);
            let r3 = dot(b3, b2) / (b2n * b2n);
            let gj: [f64; 3] = std::array::from_fn(|c| (-r1 - 1.0) * gi[c] + r3 * gl[c]);
            let gk: [f64; 3] = std::array::from_fn(|c| (-r3 - 1.0) * gl[c] + r1 * gi[c]);
            add(t.i, gi, de);
            add(t.j, gj, de);
            add(t.k, gk, de);
            add(t.l, gl, de);
        }
        Ok(g)
    }

    fn lower_bound(&self) -> f64 {
        let n = self.n_atoms();
        let mut u0 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                u0 += self.pair(i, j).infimum();
            }
        }
        u0
    }
}

fn check_pair(qq: f64, a: f64, b: f64, pair: (usize, usize)) -> Result<()> {
    if !(a >= 0.0) || !(b >= 0.0) || !a.is_finite() || !b.is_finite() || !qq.is_finite() {
        return Err(Error::invalid(format!(
            "pair {pair:?}: LJ coefficients must be finite and nonnegative"
        )));
    }
    if (qq < 0.0 || b > 0.0) && a <= 0.0 {
        return Err(Error::invalid(format!(
            "pair {pair:?}: A must be positive when q_i q_j < 0 or B > 0"
        )));
    }
    Ok(())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn bond_angle(xi: [f64; 3], xj: [f64; 3], xk: [f64; 3]) -> f64 {
    let u = sub(xi, xj);
    let w = sub(xk, xj);
    (dot(u, w) / (norm(u) * norm(w))).clamp(-1.0, 1.0).acos()
}

/// IUPAC dihedral angle in `(−π, π]`.
fn dihedral(xi: [f64; 3], xj: [f64; 3], xk: [f64; 3], xl: [f64; 3]) -> f64 {
    let b1 = sub(xj, xi);
    let b2 = sub(xk, xj);
    let b3 = sub(xl, xk);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    (norm(b2) * dot(b1, n2)).atan2(dot(n1, n2))
}

#[derive(Clone, Debug, PartialEq)]
pub enum PotentialKind {
    /// `¼(x₁² − 1)² + ½x₂²`.
    DoubleWell,
    /// Two particles reduced to their relative coordinate `x ∈ ℝᵈ`.
    Diatomic { charges: [f64; 2], lj_a: f64, lj_b: f64 },
    Composite(Molecule),
}

/// A closed-form energy together with its domain Ω.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PotentialRecord", into = "PotentialRecord")]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub domain: BoxDomain,
}

/// On-disk layout of a [`PotentialSpec`]: the kind tag, the domain box and
/// the kind's parameters side by side in one table.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum PotentialRecord {
    DoubleWell {
        domain: BoxDomain,
    },
    Diatomic {
        domain: BoxDomain,
        charges: [f64; 2],
        lj_a: f64,
        lj_b: f64,
    },
    Composite {
        domain: BoxDomain,
        charges: Vec<f64>,
        lj_a: Vec<Vec<f64>>,
        lj_b: Vec<Vec<f64>>,
        #[serde(default)]
        bonds: Vec<Bond>,
        #[serde(default)]
        angles: Vec<Angle>,
        #[serde(default)]
        torsions: Vec<Torsion>,
    },
}

impl TryFrom<PotentialRecord> for PotentialSpec {
    type Error = Error;

    fn try_from(r: PotentialRecord) -> Result<Self> {
        match r {
            PotentialRecord::DoubleWell { domain } => Self::new(PotentialKind::DoubleWell, domain),
            PotentialRecord::Diatomic { domain, charges, lj_a, lj_b } => {
                Self::new(PotentialKind::Diatomic { charges, lj_a, lj_b }, domain)
            }
            PotentialRecord::Composite { domain, charges, lj_a, lj_b, bonds, angles, torsions } => Self::new(
                PotentialKind::Composite(Molecule { charges, lj_a, lj_b, bonds, angles, torsions }),
                domain,
            ),
        }
    }
}

impl From<PotentialSpec> for PotentialRecord {
    fn from(s: PotentialSpec) -> Self {
        let domain = s.domain;
        match s.kind {
            PotentialKind::DoubleWell => PotentialRecord::DoubleWell { domain },
            PotentialKind::Diatomic { charges, lj_a, lj_b } => {
                PotentialRecord::Diatomic { domain, charges, lj_a, lj_b }
            }
            PotentialKind::Composite(m) => PotentialRecord::Composite {
                domain,
                charges: m.charges,
                lj_a: m.lj_a,
                lj_b: m.lj_b,
                bonds: m.bonds,
                angles: m.angles,
                torsions: m.torsions,
            },
        }
    }
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind, domain: BoxDomain) -> Result<Self> {
        let spec = PotentialSpec { kind, domain };
        spec.validate()?;
        Ok(spec)
    }

    pub fn double_well(domain: BoxDomain) -> Result<Self> {
        Self::new(PotentialKind::DoubleWell, domain)
    }

    pub fn diatomic(charges: [f64; 2], lj_a: f64, lj_b: f64, domain: BoxDomain) -> Result<Self> {
        Self::new(PotentialKind::Diatomic { charges, lj_a, lj_b }, domain)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let d = self.domain.dim();
        match &self.kind {
            PotentialKind::DoubleWell => {
                if d != 2 {
                    return Err(Error::invalid("double well is two-dimensional"));
                }
            }
            PotentialKind::Diatomic { charges, lj_a, lj_b } => {
                check_pair(charges[0] * charges[1], *lj_a, *lj_b, (0, 1))?;
            }
            PotentialKind::Composite(m) => {
                m.validate()?;
                if d != 3 * m.n_atoms() {
                    return Err(Error::invalid(format!(
                        "composite domain has dimension {d}, expected 3N = {}",
                        3 * m.n_atoms()
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.domain.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, potential expects {}",
                x.len(),
                self.domain.dim()
            )));
        }
        Ok(())
    }

    fn diatomic_pair(&self) -> Option<PairTerm> {
        match self.kind {
            PotentialKind::Diatomic { charges, lj_a, lj_b } => Some(PairTerm {
                qq: charges[0] * charges[1],
                a: lj_a,
                b: lj_b,
            }),
            _ => None,
        }
    }

    /// The constant `U₀ ≤ U` everywhere.
    pub fn lower_bound(&self) -> f64 {
        match &self.kind {
            PotentialKind::DoubleWell => 0.0,
            PotentialKind::Diatomic { .. } => self.diatomic_pair().map_or(0.0, |p| p.infimum()),
            PotentialKind::Composite(m) => m.lower_bound(),
        }
    }

    pub fn regularize(&self, epsilon: f64) -> Result<RegularizedPotential> {
        RegularizedPotential::new(self.clone(), epsilon)
    }
}

impl Energy for PotentialSpec {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            PotentialKind::DoubleWell => {
                let a = x[0] * x[0] - 1.0;
                0.25 * a * a + 0.5 * x[1] * x[1]
            }
            PotentialKind::Diatomic { .. } => {
                let pair = self.diatomic_pair().expect("diatomic");
                pair.value(x.iter().map(|v| v * v).sum::<f64>().sqrt())
            }
            PotentialKind::Composite(m) => m.energy(x),
        })
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        match &self.kind {
            PotentialKind::DoubleWell => Ok(vec![x[0] * (x[0] * x[0] - 1.0), x[1]]),
            PotentialKind::Diatomic { .. } => {
                let pair = self.diatomic_pair().expect("diatomic");
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r == 0.0 {
                    if pair.singular_at_zero() {
                        return Err(Error::Singularity("particles coincide".into()));
                    }
                    return Ok(vec![0.0; x.len()]);
                }
                let f = pair.derivative(r) / r;
                Ok(x.iter().map(|v| f * v).collect())
            }
            PotentialKind::Composite(m) => m.gradient(x),
        }
    }

    fn domain(&self) -> Option<&BoxDomain> {
        Some(&self.domain)
    }
}

/// C¹ monotone cutoff: 0 for `u ≤ 1`, 1 for `u ≥ 2`, smoothstep in between.
pub fn cutoff(u: f64) -> f64 {
    let t = (u - 1.0).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn cutoff_derivative(u: f64) -> f64 {
    if u <= 1.0 || u >= 2.0 {
        return 0.0;
    }
    let t = u - 1.0;
    6.0 * t * (1.0 - t)
}

/// `U_ε = (1 − ζ)U + ζ·2/ε` with `ζ = χ(ε U)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizedPotential {
    pub base: PotentialSpec,
    pub epsilon: f64,
    /// Lower bound `U₀` of the base potential; `M = |U₀|`.
    pub lower_bound: f64,
}

impl RegularizedPotential {
    pub fn new(base: PotentialSpec, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let lower_bound = base.lower_bound();
        Ok(RegularizedPotential { base, epsilon, lower_bound })
    }

    /// The uniform bound `M` with `U_ε ≥ −M`.
    pub fn m(&self) -> f64 {
        self.lower_bound.abs()
    }

    pub fn cap(&self) -> f64 {
        2.0 / self.epsilon
    }

    /// Regularized value for a given base energy level.
    pub fn blend(&self, u: f64) -> f64 {
        if u <= 1.0 / self.epsilon {
            return u;
        }
        let cap = self.cap();
        if u.is_infinite() {
            return cap;
        }
        let zeta = cutoff(self.epsilon * u);
        if zeta == 1.0 {
            return cap;
        }
        (1.0 - zeta) * u + zeta * cap
    }
}

impl Energy for RegularizedPotential {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn energy(&self, x: &[f64]) -> Result<f64> {
        Ok(self.blend(self.base.energy(x)?))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.base.energy(x)?;
        if u <= 1.0 / self.epsilon {
            return self.base.gradient(x);
        }
        let level = self.epsilon * u;
        if !u.is_finite() || level >= 2.0 {
            return Ok(vec![0.0; x.len()]);
        }
        let zeta = cutoff(level);
        let factor = (1.0 - zeta) + (self.cap() - u) * cutoff_derivative(level) * self.epsilon;
        Ok(self.base.gradient(x)?.into_iter().map(|g| factor * g).collect())
    }

    fn domain(&self) -> Option<&BoxDomain> {
        Some(&self.base.domain)
    }
}

/// Probability density tabulated at the nodes of a uniform grid,
/// normalized under trapezoid quadrature.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
    pub beta: Option<f64>,
    /// `log Z` of the unnormalized Boltzmann factor, when built from an energy.
    pub log_z: Option<f64>,
}

impl GridDensity {
    /// Normalizes nonnegative node values.
    pub fn from_unnormalized(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("value count does not match grid"));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("density values must be finite and nonnegative"));
        }
        let mass = grid.integrate(&values);
        if !(mass > 0.0) {
            return Err(Error::invalid("density has zero mass"));
        }
        let values = values.into_iter().map(|v| v / mass).collect();
        Ok(GridDensity { grid, values, beta: None, log_z: None })
    }

    pub fn from_fn(grid: UniformGrid, f: impl Fn(&[f64]) -> f64 + Sync) -> Result<Self> {
        let values: Vec<f64> = (0..grid.len()).into_par_iter().map(|k| f(&grid.node(k))).collect();
        Self::from_unnormalized(grid, values)
    }

    pub fn partition_function(&self) -> Option<f64> {
        self.log_z.map(f64::exp)
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn at(&self, x: &[f64]) -> Result<f64> {
        self.grid.interpolate(&self.values, x)
    }

    /// One-dimensional marginal along `axis` (trapezoid in the other axes).
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.nodes[axis]];
        let w_axis = g.spacing(axis);
        for k in 0..g.len() {
            let idx = g.multi_index(k);
            let mut w = g.weight(k);
            // undo the weight contribution of `axis` itself
            let end = idx[axis] == 0 || idx[axis] + 1 == g.nodes[axis];
            w /= if end { 0.5 * w_axis } else { w_axis };
            out[idx[axis]] += w * self.values[k];
        }
        out
    }
}

/// Tabulates `e^{−βU}/Z` on `grid`. Nodes with `U = +∞` get density 0.
pub fn boltzmann_grid(energy: &dyn Energy, beta: f64, grid: &UniformGrid) -> Result<GridDensity> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if energy.dim() != grid.dim() {
        return Err(Error::invalid("grid dimension does not match the energy"));
    }
    let energies: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| energy.energy(&grid.node(k)))
        .collect::<Result<_>>()?;
    if let Some(k) = energies.iter().position(|u| u.is_nan() || *u == f64::NEG_INFINITY) {
        return Err(Error::NonFinite(format!("energy at grid node {k}")));
    }
    // log Z = log Σ w_k e^{−βU_k}, ordered log-sum-exp
    let log_terms: Vec<f64> = energies
        .iter()
        .enumerate()
        .map(|(k, u)| -beta * u + grid.weight(k).ln())
        .collect();
    let peak = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::OverflowDomain(format!(
            "partition function is not representable at beta = {beta}"
        )));
    }
    let log_z = peak + log_terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    let values: Vec<f64> = energies
        .iter()
        .map(|u| if u.is_infinite() { 0.0 } else { (-beta * u - log_z).exp() })
        .collect();
    // renormalize against rounding; the correction is at the 1e-16 level
    let mass = grid.integrate(&values);
    let values = values.into_iter().map(|v| v / mass).collect();
    Ok(GridDensity { grid: grid.clone(), values, beta: Some(beta), log_z: Some(log_z + mass.ln()) })
}

impl GridDensity {
    pub fn to_table(&self) -> String {
        let mut header = Vec::new();
        header.push(("beta".to_string(), self.beta.map_or("none".into(), |b| b.to_string())));
        header.push(("log_z".to_string(), self.log_z.map_or("none".into(), |z| z.to_string())));
        GridTable {
            kind: "grid_density".into(),
            grid: self.grid.clone(),
            header,
            fields: vec![("density".into(), self.values.clone())],
        }
        .render()
    }

    /// Parses a table written by [`GridDensity::to_table`]. Values are taken
    /// as stored (no renormalization), so the round trip is bit-exact.
    pub fn from_table(text: &str) -> Result<Self> {
        let t = GridTable::parse(text)?;
        if t.kind != "grid_density" {
            return Err(Error::Parse(format!("expected a grid_density table, found '{}'", t.kind)));
        }
        let opt = |key: &str| -> Result<Option<f64>> {
            match t.header_value(key) {
                None | Some("none") => Ok(None),
                Some(v) => v.parse().map(Some).map_err(|_| Error::Parse(format!("bad {key} '{v}'"))),
            }
        };
        let values = t.field("density")?.to_vec();
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Parse("negative density value".into()));
        }
        Ok(GridDensity { grid: t.grid.clone(), values, beta: opt("beta")?, log_z: opt("log_z")? })
    }
}

/// `∫ |a − b|` by trapezoid quadrature.
pub fn l1_distance(a: &GridDensity, b: &GridDensity) -> Result<f64> {
    if !a.grid.same_as(&b.grid) {
        return Err(Error::invalid("l1_distance needs identical grids"));
    }
    let diff: Vec<f64> = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).collect();
    Ok(a.grid.integrate(&diff))
}
