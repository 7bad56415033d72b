//! Sweeps and comparisons shared by the command-line driver and the
//! acceptance suite.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoxDomain, UniformGrid};
use crate::langevin::count_transitions;
use crate::metrics::{hist_l1, per_coordinate_w2, w2_exact, Bins, W2Report};
use crate::mixture::Mixture;
use crate::moser::{lipschitz_estimate, Direction, MoserMap, MoserOptions};
use crate::potential::{boltzmann_grid, l1_distance, Energy, GridDensity, PotentialSpec};
use crate::rng::{rng, split_seed};
use crate::samples::SampleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationRow {
    pub epsilon: f64,
    pub l1: f64,
    /// Grid nodes with `U ≤ 1/ε`, where `U_ε` must equal `U` exactly.
    pub nodes_checked: usize,
    pub bit_exact: bool,
}

/// `‖ρ_ε − ρ‖_{L¹}` on `grid` for each `ε`, plus the exactness check of
/// `U_ε` below the cutoff level.
pub fn regularization_sweep(
    spec: &PotentialSpec,
    beta: f64,
    grid: &UniformGrid,
    epsilons: &[f64],
) -> Result<Vec<RegularizationRow>> {
    let rho = boltzmann_grid(spec, beta, grid)?;
    let u: Vec<Option<f64>> = (0..grid.len()).map(|k| spec.energy(&grid.node(k)).ok()).collect();
    epsilons
        .iter()
        .map(|&eps| {
            let reg = spec.regularize(eps)?;
            let rho_eps = boltzmann_grid(&reg, beta, grid)?;
            let mut checked = 0;
            let mut exact = true;
            for (k, uk) in u.iter().enumerate() {
                let Some(uk) = *uk else { continue };
                if uk <= 1.0 / eps {
                    checked += 1;
                    exact &= reg.energy(&grid.node(k))?.to_bits() == uk.to_bits();
                }
            }
            Ok(RegularizationRow { epsilon: eps, l1: l1_distance(&rho_eps, &rho)?, nodes_checked: checked, bit_exact: exact })
        })
        .collect()
}

/// Target on `[0,1]²` proportional to `(x₀ − x₁)² + δ`, which vanishes on
/// the diagonal as `δ → 0`.
pub fn diagonal_target(grid: &UniformGrid, delta: f64) -> Result<GridDensity> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    GridDensity::from_fn(grid.clone(), |x| (x[0] - x[1]).powi(2) + delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzSweep {
    pub deltas: Vec<f64>,
    /// Grid nodes per axis on `[0,1]²`.
    pub nodes: usize,
    pub ell: usize,
    pub region_center: Vec<f64>,
    pub region_half_width: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for LipschitzSweep {
    fn default() -> Self {
        LipschitzSweep {
            deltas: vec![1e-1, 1e-2, 1e-3],
            nodes: 129,
            ell: 512,
            region_center: vec![0.5, 0.5],
            region_half_width: 0.1,
            n_pairs: 2000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow {
    pub delta: f64,
    pub min_density: f64,
    pub lipschitz: f64,
}

/// Lipschitz estimate of the Moser map from the uniform density to
/// [`diagonal_target`] for each floor `δ`, on a fixed region and pair set.
pub fn lipschitz_sweep(cfg: &LipschitzSweep) -> Result<Vec<LipschitzRow>> {
    if cfg.region_center.len() != 2 {
        return Err(Error::invalid("region_center must be a 2-vector"));
    }
    let grid = UniformGrid::square(2, 0.0, 1.0, cfg.nodes)?;
    let uniform = GridDensity::from_fn(grid.clone(), |_| 1.0)?;
    let region = BoxDomain::new(
        cfg.region_center.iter().map(|c| (c - cfg.region_half_width).max(0.0)).collect(),
        cfg.region_center.iter().map(|c| (c + cfg.region_half_width).min(1.0)).collect(),
    )?;
    let opts = MoserOptions { ell: cfg.ell, floor_delta: 0.0, ..MoserOptions::default() };
    cfg.deltas
        .iter()
        .map(|&delta| {
            let target = diagonal_target(&grid, delta)?;
            let min_density = target.min_value();
            let map = MoserMap::build(uniform.clone(), target, &opts)?;
            let lipschitz = lipschitz_estimate(|x| map.integrate(x, Direction::Forward), &region, cfg.n_pairs, cfg.seed)?;
            Ok(LipschitzRow { delta, min_density, lipschitz })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoserComparison {
    /// Pushforward of ρ₀-samples against independent ρ₁-samples.
    pub w2: W2Report,
    /// Mean W2 between independent ρ₁ draws of the same size.
    pub floor: f64,
    pub max_displacement: f64,
    pub continuity_residual: f64,
    pub failed_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoserCompareSpec {
    pub rho0: Mixture,
    pub rho1: Mixture,
    pub nodes: Vec<usize>,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_n_sub")]
    pub n_sub: usize,
    #[serde(default = "default_repeats")]
    pub floor_repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_samples() -> usize {
    10_000
}

fn default_n_sub() -> usize {
    1000
}

fn default_repeats() -> usize {
    4
}

/// Builds the Moser map between the tabulated mixtures, pushes ρ₀-samples
/// forward and compares them with ρ₁-samples.
pub fn moser_compare(spec: &MoserCompareSpec, opts: &MoserOptions) -> Result<(MoserComparison, SampleSet)> {
    if spec.rho0.domain != spec.rho1.domain {
        return Err(Error::invalid("rho0 and rho1 must share one domain"));
    }
    let grid = UniformGrid::new(spec.rho0.domain.clone(), spec.nodes.clone())?;
    let map = MoserMap::build(spec.rho0.on_grid(&grid)?, spec.rho1.on_grid(&grid)?, opts)?;
    let source = spec.rho0.sample(spec.n_samples, split_seed(spec.seed, 0))?;
    let pushed = map.pushforward(&source)?;
    let target = spec.rho1.sample(spec.n_samples, split_seed(spec.seed, 1))?;
    let n_sub = spec.n_sub.min(pushed.len()).min(target.len());
    let w2 = w2_exact(&pushed, &target, n_sub, split_seed(spec.seed, 2))?;
    let floor = crate::metrics::self_distance_floor(
        |n, s| spec.rho1.sample(n, s),
        spec.n_samples,
        n_sub,
        spec.floor_repeats,
        split_seed(spec.seed, 3),
    )?;
    let failed_points = pushed.meta.get("failed_points").and_then(|v| v.parse().ok()).unwrap_or(0);
    // displacement needs the source points that survived; with no failures they line up
    let max_displacement = if failed_points == 0 {
        source
            .iter()
            .zip(pushed.iter())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    } else {
        f64::NAN
    };
    let cmp = MoserComparison { w2, floor, max_displacement, continuity_residual: map.continuity_residual(), failed_points };
    Ok((cmp, pushed))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionSpec {
    pub coord: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOptions {
    pub n_sub: usize,
    pub floor_repeats: usize,
    /// `Some(L)` marks a periodic axis with period `L`.
    pub periods: Vec<Option<f64>>,
    pub transitions: Option<TransitionSpec>,
    pub bins: Option<Bins>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub w2: W2Report,
    /// Joint and per-axis floors from disjoint halves of the reference.
    pub floor: Option<f64>,
    pub floor_per_coordinate: Option<Vec<f64>>,
    pub transitions_candidate: Option<usize>,
    pub transitions_reference: Option<usize>,
    pub hist_l1: Option<f64>,
}

fn halves(set: &SampleSet, m: usize, seed: u64) -> (SampleSet, SampleSet) {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut rng(seed));
    (set.select(&idx[..m]), set.select(&idx[m..2 * m]))
}

/// Joint and per-coordinate W2 of `candidate` against `reference`, with a
/// data-only noise floor, transition counts and histogram L¹.
pub fn evaluate(candidate: &SampleSet, reference: &SampleSet, opts: &EvalOptions) -> Result<EvalReport> {
    let n_sub = opts.n_sub.min(candidate.len()).min(reference.len());
    let per = per_coordinate_w2(candidate, reference, &opts.periods)?;
    let w2 = w2_exact(candidate, reference, n_sub, opts.seed)?.with_per_coordinate(per);
    let (floor, floor_per_coordinate) = if opts.floor_repeats >= 1 && reference.len() >= 4 {
        let m_joint = n_sub.min(reference.len() / 2);
        let m_axis = reference.len() / 2;
        let mut joint = 0.0;
        let mut axes = vec![0.0; reference.dim()];
        for r in 0..opts.floor_repeats as u64 {
            let (a, b) = halves(reference, m_axis, split_seed(opts.seed, 10 + r));
            joint += w2_exact(&a, &b, m_joint, split_seed(opts.seed, 100 + r))?.value;
            for (acc, v) in axes.iter_mut().zip(per_coordinate_w2(&a, &b, &opts.periods)?) {
                *acc += v;
            }
        }
        let k = opts.floor_repeats as f64;
        (Some(joint / k), Some(axes.into_iter().map(|v| v / k).collect()))
    } else {
        (None, None)
    };
    let (tc, tr) = match opts.transitions {
        Some(t) => (
            Some(count_transitions(candidate, t.coord, t.lo, t.hi)?),
            Some(count_transitions(reference, t.coord, t.lo, t.hi)?),
        ),
        None => (None, None),
    };
    let hist = opts.bins.as_ref().map(|b| hist_l1(candidate, reference, b)).transpose()?;
    Ok(EvalReport {
        w2,
        floor,
        floor_per_coordinate,
        transitions_candidate: tc,
        transitions_reference: tr,
        hist_l1: hist,
    })
}
