//! Overdamped Langevin sampling and metastable-transition counting.
//!
//! Euler–Maruyama discretization of `dx = −∇U dt + √(2/β) dW`:
//!
//! ```text
//! x_{k+1} = x_k − ∇U(x_k)·dt + √(2·dt/β)·ξ_k,   ξ_k ~ N(0, I)
//! ```
//!
//! Proposals that land on the collision set, or where `|∇U|` exceeds
//! `grad_cap`, are rejected and the noise is redrawn (at most `max_retries`
//! times). If the energy has a domain box, proposals are reflected
//! coordinate-wise at its faces.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::Energy;
use crate::rng::{rng, split_seed};
use crate::samples::{Provenance, SampleSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    pub dt: f64,
    pub n_steps: usize,
    /// Inverse temperature. `+∞` turns the noise off (gradient descent).
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub burn_in: usize,
    pub x0: Vec<f64>,
    /// Keep every `thin`-th post-burn-in state.
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default = "default_grad_cap")]
    pub grad_cap: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
}

fn default_thin() -> usize {
    1
}

fn default_grad_cap() -> f64 {
    1e8
}

fn default_retries() -> usize {
    100
}

impl LangevinConfig {
    pub fn new(x0: Vec<f64>, dt: f64, n_steps: usize, beta: f64, seed: u64) -> Self {
        LangevinConfig {
            dt,
            n_steps,
            beta,
            seed,
            burn_in: 0,
            x0,
            thin: 1,
            grad_cap: default_grad_cap(),
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.n_steps <= self.burn_in {
            return Err(Error::invalid("n_steps must exceed burn_in"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if self.x0.is_empty() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("x0 must be a finite, non-empty vector"));
        }
        Ok(())
    }

    /// Number of frames [`simulate`] returns.
    pub fn retained_frames(&self) -> usize {
        (self.n_steps - self.burn_in) / self.thin
    }
}

fn reflect(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        if *v < lo {
            *v = 2.0 * lo - *v;
        }
        if *v > hi {
            *v = 2.0 * hi - *v;
        }
        *v = v.clamp(lo, hi);
    }
}

fn admissible(energy: &dyn Energy, x: &[f64], cap: f64) -> Option<Vec<f64>> {
    match energy.energy(x) {
        Ok(u) if u.is_finite() => {}
        _ => return None,
    }
    let g = energy.gradient(x).ok()?;
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm.is_finite() && norm <= cap).then_some(g)
}

/// Runs one Euler–Maruyama chain. Bit-identical for identical inputs.
pub fn simulate(energy: &dyn Energy, cfg: &LangevinConfig) -> Result<SampleSet> {
    cfg.validate()?;
    let d = energy.dim();
    if cfg.x0.len() != d {
        return Err(Error::invalid(format!("x0 has dimension {}, energy has {d}", cfg.x0.len())));
    }
    let bounds = energy.domain().map(|b| (b.lower.clone(), b.upper.clone()));
    let mut x = cfg.x0.clone();
    let mut grad = admissible(energy, &x, cfg.grad_cap)
        .ok_or_else(|| Error::Singularity(format!("initial point {x:?} is singular")))?;
    let noise = if cfg.beta.is_infinite() { 0.0 } else { (2.0 * cfg.dt / cfg.beta).sqrt() };
    let mut rng = rng(cfg.seed);
    let mut out = SampleSet::new(d, Provenance::Langevin).with_seed(cfg.seed);
    out.meta.insert("dt".into(), cfg.dt.to_string());
    out.meta.insert("beta".into(), cfg.beta.to_string());
    out.meta.insert("thin".into(), cfg.thin.to_string());
    out.meta.insert("burn_in".into(), cfg.burn_in.to_string());
    let mut proposal = vec![0.0; d];
    let mut rejected = 0usize;
    for step in 1..=cfg.n_steps {
        let mut accepted = None;
        for _ in 0..=cfg.max_retries {
            for i in 0..d {
                let xi: f64 = StandardNormal.sample(&mut rng);
                proposal[i] = x[i] - grad[i] * cfg.dt + noise * xi;
            }
            if proposal.iter().any(|v| v.is_nan()) {
                return Err(Error::NumericalBlowup { step, detail: format!("state {proposal:?}") });
            }
            if let Some((lo, hi)) = &bounds {
                reflect(&mut proposal, lo, hi);
            }
            if let Some(g) = admissible(energy, &proposal, cfg.grad_cap) {
                accepted = Some(g);
                break;
            }
            rejected += 1;
        }
        grad = accepted.ok_or_else(|| Error::NumericalBlowup {
            step,
            detail: format!("{} consecutive proposals rejected near {x:?}", cfg.max_retries + 1),
        })?;
        x.copy_from_slice(&proposal);
        if step > cfg.burn_in && (step - cfg.burn_in) % cfg.thin == 0 {
            out.push(&x)?;
        }
    }
    out.meta.insert("rejected_proposals".into(), rejected.to_string());
    Ok(out)
}

/// Independent chains with seeds `split_seed(cfg.seed, chain)`, run in parallel.
pub fn simulate_chains(energy: &dyn Energy, cfg: &LangevinConfig, n_chains: usize) -> Result<Vec<SampleSet>> {
    (0..n_chains as u64)
        .into_par_iter()
        .map(|c| {
            let mut c_cfg = cfg.clone();
            c_cfg.seed = split_seed(cfg.seed, c);
            simulate(energy, &c_cfg)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
}

/// Counts LEFT↔RIGHT switches of a hysteresis automaton on `coord`:
/// the state becomes LEFT below `lo` and RIGHT above `hi`; values in
/// between keep the previous state.
///
/// Counts depend on sample order. On i.i.d. samples the number is not a
/// dynamical quantity.
pub fn count_transitions(traj: &SampleSet, coord: usize, lo: f64, hi: f64) -> Result<usize> {
    if traj.is_empty() {
        return Err(Error::invalid("cannot count transitions on an empty trajectory"));
    }
    if !(lo < hi) {
        return Err(Error::invalid(format!("need lo < hi, got lo = {lo}, hi = {hi}")));
    }
    if coord >= traj.dim() {
        return Err(Error::invalid(format!("coordinate {coord} out of range")));
    }
    let mut state = None;
    let mut count = 0;
    for p in traj.iter() {
        let v = p[coord];
        let next = if v < lo {
            Some(Side::Left)
        } else if v > hi {
            Some(Side::Right)
        } else {
            state
        };
        if let (Some(prev), Some(now)) = (state, next) {
            if prev != now {
                count += 1;
            }
        }
        state = next;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoxDomain, UniformGrid};
    use crate::potential::{boltzmann_grid, PotentialSpec};
    use proptest::prelude::*;

    fn dw() -> PotentialSpec {
        PotentialSpec::double_well(BoxDomain::cube(2, -3.0, 3.0).unwrap()).unwrap()
    }

    struct Harmonic;
    impl Energy for Harmonic {
        fn dim(&self) -> usize {
            1
        }
        fn energy(&self, x: &[f64]) -> Result<f64> {
            Ok(0.5 * x[0] * x[0])
        }
        fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![x[0]])
        }
    }

    fn line(xs: &[f64]) -> SampleSet {
        SampleSet::from_flat(1, xs.to_vec(), Provenance::Langevin).unwrap()
    }

    #[test]
    fn zero_noise_descends_into_nearest_well() {
        let cfg = LangevinConfig::new(vec![0.3, 0.7], 1e-2, 5000, f64::INFINITY, 1);
        let traj = simulate(&dw(), &cfg).unwrap();
        let last = traj.point(traj.len() - 1);
        assert!((last[0] - 1.0).abs() < 1e-4 && last[1].abs() < 1e-4, "{last:?}");
    }

    #[test]
    fn ornstein_uhlenbeck_variance() {
        let mut cfg = LangevinConfig::new(vec![0.0], 1e-3, 1_000_000, 2.0, 11);
        cfg.burn_in = 1000;
        let traj = simulate(&Harmonic, &cfg).unwrap();
        let xs = traj.coordinate(0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var - 0.5).abs() < 0.025, "variance {var}");
    }

    #[test]
    fn deterministic_given_seed() {
        let mut cfg = LangevinConfig::new(vec![1.0, 0.0], 5e-3, 2000, 3.0, 5);
        cfg.thin = 7;
        let a = simulate(&dw(), &cfg).unwrap();
        let b = simulate(&dw(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.retained_frames());
        cfg.seed = 6;
        assert_ne!(simulate(&dw(), &cfg).unwrap().as_flat(), a.as_flat());
    }

    #[test]
    fn thinned_chain_visits_both_wells() {
        let mut cfg = LangevinConfig::new(vec![1.0, 0.0], 5e-3, 600 * 200, 4.0, 2024);
        cfg.thin = 200;
        let traj = simulate(&dw(), &cfg).unwrap();
        assert_eq!(traj.len(), 600);
        let xs = traj.coordinate(0);
        assert!(xs.iter().any(|&v| v < -0.5) && xs.iter().any(|&v| v > 0.5));
        assert!(count_transitions(&traj, 0, -0.5, 0.5).unwrap() > 0);
    }

    #[test]
    fn stays_in_domain_and_off_collision_set() {
        let spec = PotentialSpec::diatomic([0.0, 0.0], 1.0, 1.0, BoxDomain::cube(2, -2.0, 2.0).unwrap()).unwrap();
        let cfg = LangevinConfig::new(vec![1.2, 0.0], 1e-3, 50_000, 1.0, 3);
        let traj = simulate(&spec, &cfg).unwrap();
        for p in traj.iter() {
            assert!(p.iter().all(|v| v.abs() <= 2.0));
            assert!(p[0].hypot(p[1]) > 0.5);
        }
    }

    #[test]
    fn singular_start_is_rejected() {
        let spec = PotentialSpec::diatomic([0.0, 0.0], 1.0, 1.0, BoxDomain::cube(2, -2.0, 2.0).unwrap()).unwrap();
        let cfg = LangevinConfig::new(vec![0.0, 0.0], 1e-3, 10, 1.0, 3);
        assert!(matches!(simulate(&spec, &cfg), Err(Error::Singularity(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = LangevinConfig::new(vec![0.0], 1e-3, 10, 1.0, 0);
        cfg.burn_in = 10;
        assert!(cfg.validate().is_err());
        let cfg = LangevinConfig::new(vec![0.0], 0.0, 10, 1.0, 0);
        assert!(cfg.validate().is_err());
        let cfg = LangevinConfig::new(vec![0.0], 1e-3, 10, -1.0, 0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chains_have_distinct_streams() {
        let cfg = LangevinConfig::new(vec![1.0, 0.0], 1e-2, 100, 1.0, 9);
        let chains = simulate_chains(&dw(), &cfg, 3).unwrap();
        assert_ne!(chains[0].as_flat(), chains[1].as_flat());
        assert_eq!(chains, simulate_chains(&dw(), &cfg, 3).unwrap());
    }

    #[test]
    fn stationary_marginals_match_boltzmann_grid() {
        let spec = dw();
        let mut cfg = LangevinConfig::new(vec![1.0, 0.0], 1e-3, 1_000_000, 1.0, 77);
        cfg.burn_in = 10_000;
        let traj = simulate(&spec, &cfg).unwrap();
        let nodes = 61;
        let grid = UniformGrid::square(2, -3.0, 3.0, nodes).unwrap();
        let rho = boltzmann_grid(&spec, 1.0, &grid).unwrap();
        let h = grid.spacing(0);
        for axis in 0..2 {
            let marginal = rho.marginal(axis);
            // histogram with bins centred on the grid nodes
            let mut hist = vec![0.0; nodes];
            for v in traj.coordinate(axis) {
                let k = (((v + 3.0) / h).round() as usize).min(nodes - 1);
                hist[k] += 1.0;
            }
            let n = traj.len() as f64;
            let l1: f64 = hist
                .iter()
                .zip(&marginal)
                .enumerate()
                .map(|(k, (c, m))| {
                    let width = if k == 0 || k == nodes - 1 { 0.5 * h } else { h };
                    (c / n - m * width).abs()
                })
                .sum();
            assert!(l1 < 0.05, "axis {axis}: L1 {l1}");
        }
    }

    #[test]
    fn transition_examples() {
        let flat = SampleSet::from_points(&vec![vec![1.0, 0.0]; 10], Provenance::Langevin).unwrap();
        assert_eq!(count_transitions(&flat, 0, -0.5, 0.5).unwrap(), 0);
        assert_eq!(count_transitions(&line(&[-1.0, -1.0, 1.0, 1.0]), 0, -0.5, 0.5).unwrap(), 1);
        assert_eq!(count_transitions(&line(&[-1.0, 0.4, -1.0, 1.0, -1.0]), 0, -0.5, 0.5).unwrap(), 2);
        assert!(count_transitions(&SampleSet::new(1, Provenance::Langevin), 0, -0.5, 0.5).is_err());
        assert!(count_transitions(&line(&[0.0]), 0, 0.5, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn hysteresis_ignores_non_crossing_insertions(
            xs in proptest::collection::vec(-2.0f64..2.0, 1..50),
            inserts in proptest::collection::vec((0usize..50, -0.49f64..0.49), 0..20),
        ) {
            let base = count_transitions(&line(&xs), 0, -0.5, 0.5).unwrap();
            let mut ys = xs.clone();
            for (pos, v) in inserts {
                let at = pos.min(ys.len());
                ys.insert(at, v);
            }
            prop_assert_eq!(count_transitions(&line(&ys), 0, -0.5, 0.5).unwrap(), base);
        }
    }
}
