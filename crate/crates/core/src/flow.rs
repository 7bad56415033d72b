//! RealNVP normalizing flow with affine coupling layers.
//!
//! `forward` maps prior space to data space. Each layer keeps the masked
//! coordinates `x_a` and updates the rest as `x_b ⊙ exp(s(x_a)) + t(x_a)`;
//! a fixed per-axis affine map (data whitening) is applied last. Training
//! minimizes the negative log-likelihood with Adam, using a hand-written
//! reverse pass through the inverse map.

use std::collections::BTreeMap;
use std::path::Path;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BoxDomain;
use crate::rng::{rng, split_seed};
use crate::samples::{Provenance, SampleSet};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// What the `s` and `t` subnetworks see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetConvention {
    /// Input is `x_a`, output has one entry per updated coordinate.
    #[default]
    PartitionInput,
    /// Input is `x ⊙ mask` (length d), output has length d; entries on the
    /// pass-through coordinates are ignored.
    MaskedFullInput,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    #[default]
    StandardNormal,
    Uniform { domain: BoxDomain },
}

impl Prior {
    pub fn log_density(&self, z: &[f64]) -> f64 {
        match self {
            Prior::StandardNormal => -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI,
            Prior::Uniform { domain } => {
                if domain.contains(z) {
                    -domain.volume().ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn neg_log_density_gradient(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Prior::StandardNormal => z.to_vec(),
            Prior::Uniform { .. } => vec![0.0; z.len()],
        }
    }

    fn draw(&self, r: &mut crate::rng::Rng, d: usize) -> Vec<f64> {
        match self {
            Prior::StandardNormal => (0..d).map(|_| StandardNormal.sample(r)).collect(),
            Prior::Uniform { domain } => (0..d).map(|a| r.random_range(domain.lower[a]..domain.upper[a])).collect(),
        }
    }
}

fn default_clamp() -> f64 {
    5.0
}

fn default_init_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dim: usize,
    pub layers: usize,
    pub hidden: usize,
    #[serde(default)]
    pub convention: SubnetConvention,
    #[serde(default = "default_clamp")]
    pub s_clamp: f64,
    #[serde(default)]
    pub prior: Prior,
    /// Multiplier on the default hidden-weight init range.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Init range multiplier for the output layers; 0 starts at the identity.
    #[serde(default)]
    pub output_init_scale: f64,
}

impl Architecture {
    pub fn new(dim: usize, layers: usize, hidden: usize, convention: SubnetConvention) -> Self {
        Architecture {
            dim,
            layers,
            hidden,
            convention,
            s_clamp: default_clamp(),
            prior: Prior::StandardNormal,
            init_scale: default_init_scale(),
            output_init_scale: 0.0,
        }
    }

    pub fn with_prior(mut self, prior: Prior) -> Self {
        self.prior = prior;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::invalid("coupling flows need dim ≥ 2"));
        }
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::invalid("layers and hidden must be positive"));
        }
        if !(self.s_clamp > 0.0 && self.s_clamp.is_finite()) {
            return Err(Error::invalid("s_clamp must be positive and finite"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite())
            || !(self.output_init_scale >= 0.0 && self.output_init_scale.is_finite())
        {
            return Err(Error::invalid("init scales must be non-negative"));
        }
        if let Prior::Uniform { domain } = &self.prior {
            domain.validate()?;
            if domain.dim() != self.dim {
                return Err(Error::invalid("prior box dimension does not match the flow"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(self.layers, self.hidden, self.dim, self.convention)
    }
}

/// Pass-through mask of layer `k`: coordinate `i` is kept when `i + k` is even.
pub fn layer_mask(dim: usize, k: usize) -> Vec<bool> {
    (0..dim).map(|i| (i + k) % 2 == 0).collect()
}

fn subnet_shape(dim: usize, k: usize, convention: SubnetConvention) -> (usize, usize) {
    match convention {
        SubnetConvention::MaskedFullInput => (dim, dim),
        SubnetConvention::PartitionInput => {
            let da = layer_mask(dim, k).iter().filter(|&&m| m).count();
            (da, dim - da)
        }
    }
}

/// Trainable parameters of the architecture: two subnets per layer, each
/// with `n_in·h + h + h·n_out + n_out` weights.
pub fn param_count(layers: usize, hidden: usize, dim: usize, convention: SubnetConvention) -> usize {
    (0..layers)
        .map(|k| {
            let (n_in, n_out) = subnet_shape(dim, k, convention);
            2 * (n_in * hidden + hidden + hidden * n_out + n_out)
        })
        .sum()
}

/// One-hidden-layer tanh perceptron, weights stored flat as `[W1, b1, W2, b2]`
/// with row-major `W1: h × n_in` and `W2: n_out × h`.
#[derive(Clone, Debug, PartialEq)]
struct Subnet {
    n_in: usize,
    hidden: usize,
    n_out: usize,
    p: Vec<f64>,
}

impl Subnet {
    fn len(n_in: usize, hidden: usize, n_out: usize) -> usize {
        n_in * hidden + hidden + hidden * n_out + n_out
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.n_in * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.n_out;
        (b1, w2, b2)
    }

    /// Returns hidden activations and outputs.
    fn eval(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (b1, w2, b2) = self.offsets();
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.p[j * self.n_in..(j + 1) * self.n_in];
                let pre: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.p[b1 + j];
                pre.tanh()
            })
            .collect();
        let out = (0..self.n_out)
            .map(|o| {
                let row = &self.p[w2 + o * self.hidden..w2 + (o + 1) * self.hidden];
                row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>() + self.p[b2 + o]
            })
            .collect();
        (h, out)
    }

    /// Accumulates parameter gradients into `gp` and input gradients into `g_in`.
    fn backward(&self, input: &[f64], h: &[f64], g_out: &[f64], gp: &mut [f64], g_in: &mut [f64]) {
        let (b1, w2, b2) = self.offsets();
        let mut g_pre = vec![0.0; self.hidden];
        for (o, &g) in g_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gp[b2 + o] += g;
            let base = w2 + o * self.hidden;
            for j in 0..self.hidden {
                gp[base + j] += g * h[j];
                g_pre[j] += g * self.p[base + j];
            }
        }
        for j in 0..self.hidden {
            let gj = g_pre[j] * (1.0 - h[j] * h[j]);
            gp[b1 + j] += gj;
            let base = j * self.n_in;
            for i in 0..self.n_in {
                gp[base + i] += gj * input[i];
                g_in[i] += gj * self.p[base + i];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pass: Vec<usize>,
    active: Vec<usize>,
    convention: SubnetConvention,
    s_clamp: f64,
    s: Subnet,
    t: Subnet,
}

/// Intermediate values of one layer, kept for the reverse pass.
struct LayerTape {
    input: Vec<f64>,
    net_in: Vec<f64>,
    hs: Vec<f64>,
    ht: Vec<f64>,
    s: Vec<f64>,
    output: Vec<f64>,
}

impl CouplingLayer {
    fn new(arch: &Architecture, k: usize) -> Self {
        let mask = layer_mask(arch.dim, k);
        let pass = (0..arch.dim).filter(|&i| mask[i]).collect();
        let active = (0..arch.dim).filter(|&i| !mask[i]).collect();
        let (n_in, n_out) = subnet_shape(arch.dim, k, arch.convention);
        let zero = Subnet { n_in, hidden: arch.hidden, n_out, p: vec![0.0; Subnet::len(n_in, arch.hidden, n_out)] };
        CouplingLayer { mask, pass, active, convention: arch.convention, s_clamp: arch.s_clamp, s: zero.clone(), t: zero }
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn param_len(&self) -> usize {
        self.s.p.len() + self.t.p.len()
    }

    fn net_input(&self, y: &[f64]) -> Vec<f64> {
        match self.convention {
            SubnetConvention::PartitionInput => self.pass.iter().map(|&i| y[i]).collect(),
            SubnetConvention::MaskedFullInput => y.iter().zip(&self.mask).map(|(v, &m)| if m { *v } else { 0.0 }).collect(),
        }
    }

    fn pick_active(&self, out: &[f64], j: usize) -> f64 {
        match self.convention {
            SubnetConvention::PartitionInput => out[j],
            SubnetConvention::MaskedFullInput => out[self.active[j]],
        }
    }

    /// Clamped `s` and `t` on the updated coordinates, plus the tape pieces.
    fn scale_shift(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let net_in = self.net_input(y);
        let (hs, s_raw) = self.s.eval(&net_in);
        let (ht, t_raw) = self.t.eval(&net_in);
        let c = self.s_clamp;
        let s = (0..self.active.len()).map(|j| c * (self.pick_active(&s_raw, j) / c).tanh()).collect();
        let t = (0..self.active.len()).map(|j| self.pick_active(&t_raw, j)).collect();
        (net_in, hs, ht, s, t)
    }

    fn forward(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let (_, _, _, s, t) = self.scale_shift(y);
        let mut out = y.to_vec();
        for (j, &i) in self.active.iter().enumerate() {
            out[i] = y[i] * s[j].exp() + t[j];
        }
        (out, s.iter().sum())
    }

    fn inverse(&self, y: &[f64]) -> (Vec<f64>, f64) {
        let (_, _, _, s, t) = self.scale_shift(y);
        let mut out = y.to_vec();
        for (j, &i) in self.active.iter().enumerate() {
            out[i] = (y[i] - t[j]) * (-s[j]).exp();
        }
        (out, -s.iter().sum::<f64>())
    }

    fn inverse_taped(&self, y: &[f64]) -> LayerTape {
        let (net_in, hs, ht, s, t) = self.scale_shift(y);
        let mut output = y.to_vec();
        for (j, &i) in self.active.iter().enumerate() {
            output[i] = (y[i] - t[j]) * (-s[j]).exp();
        }
        LayerTape { input: y.to_vec(), net_in, hs, ht, s, output }
    }

    /// Reverse pass through one inverse step. The per-sample loss carries
    /// `+Σ s` from this layer's log-determinant. `g` is the gradient w.r.t.
    /// the layer output on entry and w.r.t. its input on exit.
    fn backward(&self, tape: &LayerTape, g: &mut [f64], gp: &mut [f64]) {
        let n_out = self.s.n_out;
        let mut gs = vec![0.0; n_out];
        let mut gt = vec![0.0; n_out];
        let c = self.s_clamp;
        let mut g_in = g.to_vec();
        for (j, &i) in self.active.iter().enumerate() {
            let e = (-tape.s[j]).exp();
            let go = g[i];
            let g_s = 1.0 - go * tape.output[i];
            let slot = match self.convention {
                SubnetConvention::PartitionInput => j,
                SubnetConvention::MaskedFullInput => i,
            };
            gs[slot] = g_s * (1.0 - (tape.s[j] / c).powi(2));
            gt[slot] = -go * e;
            g_in[i] = go * e;
        }
        let mut g_net = vec![0.0; tape.net_in.len()];
        let (gp_s, gp_t) = gp.split_at_mut(self.s.p.len());
        self.s.backward(&tape.net_in, &tape.hs, &gs, gp_s, &mut g_net);
        self.t.backward(&tape.net_in, &tape.ht, &gt, gp_t, &mut g_net);
        match self.convention {
            SubnetConvention::PartitionInput => {
                for (k, &i) in self.pass.iter().enumerate() {
                    g_in[i] += g_net[k];
                }
            }
            SubnetConvention::MaskedFullInput => {
                for i in 0..g_in.len() {
                    if self.mask[i] {
                        g_in[i] += g_net[i];
                    }
                }
            }
        }
        g.copy_from_slice(&g_in);
        debug_assert_eq!(tape.input.len(), g.len());
    }
}

/// Per-axis affine map `x ↦ shift + scale ⊙ x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Whitening {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Whitening {
    pub fn identity(dim: usize) -> Self {
        Whitening { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    /// Per-axis mean and standard deviation of `data`.
    pub fn fit(data: &SampleSet) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::invalid("whitening needs at least two points"));
        }
        let n = data.len() as f64;
        let mut shift = Vec::with_capacity(data.dim());
        let mut scale = Vec::with_capacity(data.dim());
        for a in 0..data.dim() {
            let c = data.coordinate(a);
            let m = c.iter().sum::<f64>() / n;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("coordinate {a} has zero or non-finite spread")));
            }
            shift.push(m);
            scale.push(v.sqrt());
        }
        Ok(Whitening { shift, scale })
    }

    fn log_det(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    arch: Architecture,
    layers: Vec<CouplingLayer>,
    whitening: Whitening,
}

fn check_finite(v: &[f64], layer: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("coupling layer {layer} produced a non-finite value")))
    }
}

impl FlowModel {
    /// All weights zero: the identity map.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = (0..arch.layers).map(|k| CouplingLayer::new(&arch, k)).collect();
        let whitening = Whitening::identity(arch.dim);
        Ok(FlowModel { arch, layers, whitening })
    }

    /// Hidden weights uniform in `±init_scale·sqrt(6/(n_in+h))`, output
    /// weights in `±output_init_scale·sqrt(6/(h+n_out))`, biases zero. The
    /// default output scale of 0 starts the model at the identity.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        let mut r = rng(seed);
        let (scale, out_scale) = (m.arch.init_scale, m.arch.output_init_scale);
        for layer in &mut m.layers {
            for net in [&mut layer.s, &mut layer.t] {
                let (_, w2, b2) = net.offsets();
                let bound = scale * (6.0 / (net.n_in + net.hidden) as f64).sqrt();
                for w in &mut net.p[..net.n_in * net.hidden] {
                    *w = if bound > 0.0 { r.random_range(-bound..bound) } else { 0.0 };
                }
                let bound = out_scale * (6.0 / (net.hidden + net.n_out) as f64).sqrt();
                for w in &mut net.p[w2..b2] {
                    *w = if bound > 0.0 { r.random_range(-bound..bound) } else { 0.0 };
                }
            }
        }
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn dim(&self) -> usize {
        self.arch.dim
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn whitening(&self) -> &Whitening {
        &self.whitening
    }

    pub fn set_whitening(&mut self, w: Whitening) -> Result<()> {
        if w.shift.len() != self.dim() || w.scale.len() != self.dim() {
            return Err(Error::invalid("whitening dimension does not match the flow"));
        }
        if w.shift.iter().any(|v| !v.is_finite()) || w.scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("whitening needs finite shifts and positive scales"));
        }
        self.whitening = w;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_len).sum()
    }

    /// Flat parameter vector: per layer `[s-net, t-net]`, each `[W1, b1, W2, b2]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.s.p);
            out.extend_from_slice(&l.t.p);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.param_count(), p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow parameters".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for net in [&mut l.s, &mut l.t] {
                let n = net.p.len();
                net.p.copy_from_slice(&p[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected a {}-vector", self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// Prior space to data space; returns the point and `log|det J|`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(x)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (k, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(&y);
            check_finite(&next, k)?;
            y = next;
            logdet += ld;
        }
        let w = &self.whitening;
        for a in 0..y.len() {
            y[a] = w.shift[a] + w.scale[a] * y[a];
        }
        Ok((y, logdet + w.log_det()))
    }

    /// Data space to prior space; the log-determinant is that of the inverse.
    pub fn inverse(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_input(z)?;
        let w = &self.whitening;
        let mut y: Vec<f64> = z.iter().enumerate().map(|(a, v)| (v - w.shift[a]) / w.scale[a]).collect();
        let mut logdet = -w.log_det();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (next, ld) = layer.inverse(&y);
            check_finite(&next, k)?;
            y = next;
            logdet += ld;
        }
        Ok((y, logdet))
    }

    /// Log-density of the pushforward of the prior at a data-space point.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let (z, ld_inv) = self.inverse(x)?;
        Ok(self.arch.prior.log_density(&z) + ld_inv)
    }

    pub fn log_prob_batch(&self, batch: &SampleSet) -> Result<Vec<f64>> {
        if batch.dim() != self.dim() {
            return Err(Error::invalid("batch dimension does not match the flow"));
        }
        batch.as_flat().par_chunks(self.dim()).map(|p| self.log_prob(p)).collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::invalid("n must be at least 1"));
        }
        let mut r = rng(seed);
        let draws: Vec<Vec<f64>> = (0..n).map(|_| self.arch.prior.draw(&mut r, self.dim())).collect();
        let pushed: Vec<Vec<f64>> = draws.par_iter().map(|z| self.forward(z).map(|(x, _)| x)).collect::<Result<_>>()?;
        let mut out = SampleSet::from_points(&pushed, Provenance::Flow)?.with_seed(seed);
        out.meta.insert("param_count".into(), self.param_count().to_string());
        Ok(out)
    }

    /// Mean negative log-likelihood; `+∞` if any point has zero density.
    pub fn nll_loss(&self, batch: &SampleSet) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let lp = self.log_prob_batch(batch)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Per-point loss `−log ρ` and its parameter gradient, accumulated into `gp`.
    fn point_loss_grad(&self, x: &[f64], gp: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        let w = &self.whitening;
        let mut y: Vec<f64> = x.iter().enumerate().map(|(a, v)| (v - w.shift[a]) / w.scale[a]).collect();
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut sum_s = 0.0;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let tape = layer.inverse_taped(&y);
            check_finite(&tape.output, k)?;
            sum_s += tape.s.iter().sum::<f64>();
            y = tape.output.clone();
            tapes.push(tape);
        }
        let loss = -self.arch.prior.log_density(&y) + sum_s + w.log_det();
        if !loss.is_finite() {
            return Ok(loss);
        }
        let mut g = self.arch.prior.neg_log_density_gradient(&y);
        // tapes run from the last layer to the first; the reverse pass goes back
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_len();
        }
        for (k, tape) in tapes.iter().rev().enumerate() {
            let layer = &self.layers[k];
            layer.backward(tape, &mut g, &mut gp[offsets[k]..offsets[k] + layer.param_len()]);
        }
        Ok(loss)
    }

    fn loss_and_grad(&self, points: &[&[f64]]) -> Result<(f64, Vec<f64>)> {
        if points.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let np = self.param_count();
        // fixed chunking and an ordered sum keep results independent of threads
        let parts: Vec<(f64, Vec<f64>)> = points
            .par_chunks(32)
            .map(|chunk| {
                let mut g = vec![0.0; np];
                let mut loss = 0.0;
                for p in chunk {
                    loss += self.point_loss_grad(p, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; np];
        for (l, g) in parts {
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = points.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        Ok((loss / n, grad))
    }

    fn name_param_block(&self, index: usize) -> String {
        let mut off = 0;
        for (k, l) in self.layers.iter().enumerate() {
            for (name, net) in [("s", &l.s), ("t", &l.t)] {
                if index < off + net.p.len() {
                    let local = index - off;
                    let (b1, w2, b2) = net.offsets();
                    let block = if local < b1 {
                        "W1"
                    } else if local < w2 {
                        "b1"
                    } else if local < b2 {
                        "W2"
                    } else {
                        "b2"
                    };
                    return format!("layer {k}, {name}-net {block}");
                }
                off += net.p.len();
            }
        }
        "unknown".into()
    }

    /// Gradient of [`FlowModel::nll_loss`] with respect to [`FlowModel::params`].
    pub fn grad_nll(&self, batch: &SampleSet) -> Result<Vec<f64>> {
        if batch.dim() != self.dim() {
            return Err(Error::invalid("batch dimension does not match the flow"));
        }
        let points: Vec<&[f64]> = batch.iter().collect();
        let (_, grad) = self.loss_and_grad(&points)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient in {}", self.name_param_block(i))));
        }
        Ok(grad)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `learning_rate` to zero over `n_epochs`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: Option<usize>,
    /// Fit the whitening map to the data before the first epoch.
    pub standardize: bool,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            n_epochs: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_fraction: 0.1,
            patience: None,
            standardize: false,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam needs β₁, β₂ in [0, 1) and ε > 0"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: Option<f64>,
}

/// `epoch,nll` text table of training losses.
pub fn loss_table(history: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,nll\n");
    for e in history {
        out.push_str(&format!("{},{}\n", e.epoch, e.train));
    }
    out
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut [f64], g: &[f64], cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            p[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

/// Minibatch Adam on the NLL. With a validation split, the parameters with
/// the best validation loss are returned.
pub fn train(model: &FlowModel, data: &SampleSet, cfg: &TrainConfig) -> Result<(FlowModel, Vec<EpochLoss>)> {
    cfg.validate()?;
    if data.dim() != model.dim() {
        return Err(Error::invalid("data dimension does not match the flow"));
    }
    if data.is_empty() {
        return Err(Error::invalid("no training data"));
    }
    let mut model = model.clone();
    if cfg.n_epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if cfg.standardize {
        model.set_whitening(Whitening::fit(data)?)?;
    }
    let mut split_rng = rng(split_seed(cfg.seed, 0));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = (cfg.validation_fraction * data.len() as f64).floor() as usize;
    if n_val >= data.len() {
        return Err(Error::invalid("validation split leaves no training data"));
    }
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&[f64]> = val_idx.iter().map(|&i| data.point(i)).collect();
    let mut train_idx = train_idx.to_vec();

    let mut params = model.params();
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };
    let mut shuffle_rng = rng(split_seed(cfg.seed, 1));
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.n_epochs {
        train_idx.shuffle(&mut shuffle_rng);
        let lr = match cfg.lr_schedule {
            LrSchedule::Constant => cfg.learning_rate,
            LrSchedule::Cosine => {
                let progress = (epoch - 1) as f64 / cfg.n_epochs as f64;
                0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        };
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let points: Vec<&[f64]> = batch.iter().map(|&i| data.point(i)).collect();
            let (loss, grad) = model.loss_and_grad(&points).map_err(|_| Error::TrainingDiverged { epoch })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * points.len() as f64;
            adam.step(&mut params, &grad, cfg, lr);
            model.set_params(&params).map_err(|_| Error::TrainingDiverged { epoch })?;
        }
        let train_loss = total / train_idx.len() as f64;
        let validation = if val.is_empty() {
            None
        } else {
            let lp: Vec<f64> = val.par_iter().map(|p| model.log_prob(p)).collect::<Result<_>>().map_err(|_| Error::TrainingDiverged { epoch })?;
            Some(-lp.iter().sum::<f64>() / lp.len() as f64)
        };
        history.push(EpochLoss { epoch, train: train_loss, validation });
        if let Some(v) = validation {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    break;
                }
            }
        }
    }
    if let Some((_, p)) = best {
        model.set_params(&p)?;
    }
    Ok((model, history))
}

/// A model with its training record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub train_config: Option<TrainConfig>,
    pub seed: Option<u64>,
    pub history: Vec<EpochLoss>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    mask: String,
    s: String,
    t: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhiteningDoc {
    shift: String,
    scale: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    schema_version: u32,
    kind: String,
    architecture: Architecture,
    param_count: usize,
    layers: Vec<LayerDoc>,
    whitening: WhiteningDoc,
    train_config: Option<TrainConfig>,
    seed: Option<u64>,
    loss_history: Vec<EpochLoss>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn encode(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Parse(format!("{what}: {e}")))?;
    if bytes.len() != 8 * expected {
        return Err(Error::Parse(format!("{what}: expected {expected} values, found {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn mask_string(mask: &[bool]) -> String {
    mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
}

impl Checkpoint {
    pub fn new(model: FlowModel) -> Self {
        Checkpoint { model, train_config: None, seed: None, history: Vec::new(), meta: BTreeMap::new() }
    }

    pub fn to_json(&self) -> String {
        let m = &self.model;
        let doc = CheckpointDoc {
            schema_version: crate::SCHEMA_VERSION,
            kind: "flow_checkpoint".into(),
            architecture: m.arch.clone(),
            param_count: m.param_count(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerDoc { mask: mask_string(&l.mask), s: encode(&l.s.p), t: encode(&l.t.p) })
                .collect(),
            whitening: WhiteningDoc { shift: encode(&m.whitening.shift), scale: encode(&m.whitening.scale) },
            train_config: self.train_config.clone(),
            seed: self.seed,
            loss_history: self.history.clone(),
            meta: self.meta.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if doc.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported schema_version {}", doc.schema_version)));
        }
        if doc.kind != "flow_checkpoint" {
            return Err(Error::Parse(format!("expected a flow_checkpoint, found {}", doc.kind)));
        }
        let mut model = FlowModel::zeros(doc.architecture)?;
        if doc.layers.len() != model.layers.len() || doc.param_count != model.param_count() {
            return Err(Error::Parse("layer count or param_count does not match the architecture".into()));
        }
        for (k, (layer, ld)) in model.layers.iter_mut().zip(&doc.layers).enumerate() {
            if ld.mask != mask_string(&layer.mask) {
                return Err(Error::Parse(format!("layer {k}: mask {} does not follow the alternation", ld.mask)));
            }
            layer.s.p = decode(&ld.s, layer.s.p.len(), &format!("layer {k} s"))?;
            layer.t.p = decode(&ld.t, layer.t.p.len(), &format!("layer {k} t"))?;
        }
        let p = model.params();
        model.set_params(&p).map_err(|e| Error::Parse(e.to_string()))?;
        let d = model.dim();
        let w = Whitening {
            shift: decode(&doc.whitening.shift, d, "whitening shift")?,
            scale: decode(&doc.whitening.scale, d, "whitening scale")?,
        };
        model.set_whitening(w).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Checkpoint { model, train_config: doc.train_config, seed: doc.seed, history: doc.loss_history, meta: doc.meta })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
