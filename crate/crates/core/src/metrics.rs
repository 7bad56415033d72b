//! Wasserstein-2 distances between sample sets and histogram L¹ distances.
//!
//! Joint W2 uses an exact optimal assignment on the squared-Euclidean cost
//! (shortest augmenting paths with dual potentials, O(n³)). One-dimensional
//! W2 is the sorted-quantile matching; on periodic axes the quantile
//! matching is minimized over cyclic rotations.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoxDomain;
use crate::rng::{rng, split_seed};
use crate::samples::SampleSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    ExactAssignment,
    Quantile1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    pub value: f64,
    pub n_used: usize,
    pub method: W2Method,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_coordinate: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_coordinate_mean: Option<f64>,
}

impl W2Report {
    /// Attaches per-axis 1D distances and their mean.
    pub fn with_per_coordinate(mut self, values: Vec<f64>) -> Self {
        self.per_coordinate_mean = Some(values.iter().sum::<f64>() / values.len() as f64);
        self.per_coordinate = Some(values);
        self
    }

    /// Single-line JSON record.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("W2Report serializes")
    }
}

/// Minimum-cost perfect matching on a dense square cost matrix.
/// Returns `assignment[row] = column`.
pub fn solve_assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::invalid("cost matrix must be n × n"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let base = (i0 - 1) * n;
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[base + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

fn subsample(set: &SampleSet, n: usize, seed: u64) -> SampleSet {
    if n == set.len() {
        return set.clone();
    }
    let mut r = rng(seed);
    let mut idx = sample_indices(&mut r, set.len(), n).into_vec();
    idx.sort_unstable();
    set.select(&idx)
}

/// Exact W2 between uniform subsamples of size `n_sub` of `a` and `b`.
///
/// Side `a` is subsampled with `split_seed(seed, 0)`, side `b` with
/// `split_seed(seed, 1)`. When `n_sub` equals a set's size the whole set
/// is used in its stored order.
pub fn w2_exact(a: &SampleSet, b: &SampleSet, n_sub: usize, seed: u64) -> Result<W2Report> {
    if n_sub < 1 {
        return Err(Error::invalid("n_sub must be at least 1"));
    }
    if a.dim() != b.dim() {
        return Err(Error::invalid("sample sets have different dimensions"));
    }
    if n_sub > a.len() || n_sub > b.len() {
        return Err(Error::invalid(format!(
            "n_sub = {n_sub} exceeds set sizes ({}, {})",
            a.len(),
            b.len()
        )));
    }
    let sa = subsample(a, n_sub, split_seed(seed, 0));
    let sb = subsample(b, n_sub, split_seed(seed, 1));
    let n = n_sub;
    let mut cost = vec![0.0; n * n];
    cost.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let p = sa.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = p.iter().zip(sb.point(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        }
    });
    let assignment = solve_assignment(&cost, n)?;
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(W2Report {
        value: (total / n as f64).max(0.0).sqrt(),
        n_used: n,
        method: W2Method::ExactAssignment,
        seed,
        per_coordinate: None,
        per_coordinate_mean: None,
    })
}

/// Sorted values resampled to `n` points by linear interpolation of the
/// empirical quantile function at `(i + ½)/n`.
fn resample_sorted(sorted: &[f64], n: usize) -> Vec<f64> {
    let m = sorted.len();
    (0..n)
        .map(|i| {
            let pos = ((i as f64 + 0.5) / n as f64) * m as f64 - 0.5;
            let pos = pos.clamp(0.0, (m - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let w = pos - lo as f64;
            sorted[lo] * (1.0 - w) + sorted[hi] * w
        })
        .collect()
}

fn sorted_pair(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("w2_1d needs non-empty inputs"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("w2_1d input".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Less => a = resample_sorted(&a, b.len()),
        std::cmp::Ordering::Greater => b = resample_sorted(&b, a.len()),
        std::cmp::Ordering::Equal => {}
    }
    Ok((a, b))
}

/// `sqrt(mean (a₍ᵢ₎ − b₍ᵢ₎)²)` over sorted values.
pub fn w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    let (a, b) = sorted_pair(a, b)?;
    let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.len() as f64).sqrt())
}

/// W2 on a circle of circumference `period`: the quantile matching is
/// minimized over all cyclic rotations of the sorted target (with the
/// wrapped points lifted by one period).
pub fn circular_w2_1d(a: &[f64], b: &[f64], period: f64) -> Result<f64> {
    if !(period > 0.0) {
        return Err(Error::invalid("period must be positive"));
    }
    let wrap = |v: &[f64]| v.iter().map(|x| x.rem_euclid(period)).collect::<Vec<_>>();
    let (a, b) = sorted_pair(&wrap(a), &wrap(b))?;
    let n = a.len();
    let shifts: Vec<i64> = (-(n as i64)..=n as i64).collect();
    let best = shifts
        .par_iter()
        .map(|&k| {
            let mut s = 0.0;
            for (i, ai) in a.iter().enumerate() {
                let idx = i as i64 + k;
                let lifted = if idx >= n as i64 {
                    b[(idx - n as i64) as usize] + period
                } else if idx < 0 {
                    b[(idx + n as i64) as usize] - period
                } else {
                    b[idx as usize]
                };
                s += (ai - lifted).powi(2);
            }
            s
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok((best / n as f64).sqrt())
}

/// Per-axis 1D W2 on full sets; `periods[a] = Some(L)` marks a periodic axis.
pub fn per_coordinate_w2(a: &SampleSet, b: &SampleSet, periods: &[Option<f64>]) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::invalid("sample sets have different dimensions"));
    }
    (0..a.dim())
        .map(|axis| {
            let (ca, cb) = (a.coordinate(axis), b.coordinate(axis));
            match periods.get(axis).copied().flatten() {
                Some(l) => circular_w2_1d(&ca, &cb, l),
                None => w2_1d(&ca, &cb),
            }
        })
        .collect()
}

/// Mean exact W2 between independent same-size draws from one sampler,
/// over `repeats` pairs. `sampler(n, seed)` must be deterministic.
pub fn self_distance_floor<F>(sampler: F, n: usize, n_sub: usize, repeats: usize, seed: u64) -> Result<f64>
where
    F: Fn(usize, u64) -> Result<SampleSet>,
{
    if repeats < 2 {
        return Err(Error::invalid("self_distance_floor needs repeats ≥ 2"));
    }
    let mut total = 0.0;
    for r in 0..repeats as u64 {
        let a = sampler(n, split_seed(seed, 2 * r))?;
        let b = sampler(n, split_seed(seed, 2 * r + 1))?;
        total += w2_exact(&a, &b, n_sub.min(n), split_seed(seed, 1000 + r))?.value;
    }
    Ok(total / repeats as f64)
}

/// Regular binning of a box; points outside fall into one shared overflow bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub domain: BoxDomain,
    pub counts: Vec<usize>,
}

impl Bins {
    pub fn new(domain: BoxDomain, counts: Vec<usize>) -> Result<Self> {
        domain.validate()?;
        if counts.len() != domain.dim() || counts.iter().any(|&c| c == 0) {
            return Err(Error::invalid("bin counts must be positive, one per axis"));
        }
        Ok(Bins { domain, counts })
    }

    fn total(&self) -> usize {
        self.counts.iter().product::<usize>() + 1
    }

    fn index(&self, p: &[f64]) -> usize {
        if !self.domain.contains(p) {
            return self.total() - 1;
        }
        let mut flat = 0;
        for (a, &v) in p.iter().enumerate() {
            let (lo, hi) = (self.domain.lower[a], self.domain.upper[a]);
            let c = self.counts[a];
            let i = (((v - lo) / (hi - lo)) * c as f64).floor() as usize;
            flat = flat * c + i.min(c - 1);
        }
        flat
    }

    /// Normalized bin masses; the last entry is the overflow bin.
    pub fn histogram(&self, s: &SampleSet) -> Vec<f64> {
        let mut h = vec![0.0; self.total()];
        for p in s.iter() {
            h[self.index(p)] += 1.0;
        }
        let n = s.len() as f64;
        h.iter_mut().for_each(|v| *v /= n);
        h
    }

    pub fn centers(&self, axis: usize) -> Vec<f64> {
        let (lo, hi) = (self.domain.lower[axis], self.domain.upper[axis]);
        let c = self.counts[axis];
        (0..c).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / c as f64).collect()
    }

    /// Text table: one row per bin (`c0,..,mass_a,mass_b`), overflow last.
    pub fn table(&self, a: &SampleSet, b: &SampleSet) -> String {
        let (ha, hb) = (self.histogram(a), self.histogram(b));
        let d = self.counts.len();
        let mut out = String::new();
        let cols: Vec<String> = (0..d).map(|i| format!("c{i}")).collect();
        let _ = writeln!(out, "{},mass_a,mass_b", cols.join(","));
        let centers: Vec<Vec<f64>> = (0..d).map(|a| self.centers(a)).collect();
        for k in 0..self.total() - 1 {
            let mut rest = k;
            let mut idx = vec![0; d];
            for a in (0..d).rev() {
                idx[a] = rest % self.counts[a];
                rest /= self.counts[a];
            }
            let coords: Vec<String> = idx.iter().enumerate().map(|(a, &i)| centers[a][i].to_string()).collect();
            let _ = writeln!(out, "{},{},{}", coords.join(","), ha[k], hb[k]);
        }
        let _ = writeln!(out, "{}overflow,{},{}", ",".repeat(d.saturating_sub(1)), ha[self.total() - 1], hb[self.total() - 1]);
        out
    }
}

/// L¹ distance between normalized histograms, in `[0, 2]`.
pub fn hist_l1(a: &SampleSet, b: &SampleSet, bins: &Bins) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("hist_l1 needs non-empty sample sets"));
    }
    if a.dim() != bins.domain.dim() || b.dim() != bins.domain.dim() {
        return Err(Error::invalid("binning dimension does not match the samples"));
    }
    let (ha, hb) = (bins.histogram(a), bins.histogram(b));
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum())
}
