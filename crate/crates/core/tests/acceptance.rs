//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use boltzgen::experiments::{lipschitz_sweep, moser_compare, regularization_sweep, LipschitzSweep, MoserCompareSpec};
use boltzgen::flow::{param_count, train, Architecture, FlowModel, LrSchedule, SubnetConvention, TrainConfig, Whitening};
use boltzgen::langevin::{count_transitions, simulate, LangevinConfig};
use boltzgen::metrics::{circular_w2_1d, per_coordinate_w2, self_distance_floor, w2_exact};
use boltzgen::mixture::{Boundary, Component, Mixture};
use boltzgen::moser::{Direction, Integrator, MoserMap, MoserOptions};
use boltzgen::pde::{solve_neumann, NeumannProblem, SolverOptions};
use boltzgen::rng::{rng, split_seed};
use boltzgen::{BoxDomain, GridDensity, PotentialSpec, Provenance, SampleSet, UniformGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn random_model(arch: Architecture, seed: u64, amp: f64) -> FlowModel {
    let mut m = FlowModel::zeros(arch).unwrap();
    let mut r = rng(seed);
    let p: Vec<f64> = (0..m.param_count()).map(|_| r.random_range(-amp..amp)).collect();
    m.set_params(&p).unwrap();
    m
}

fn normal_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect()).collect()
}

fn invertibility() -> Outcome {
    let start = Instant::now();
    let archs = [
        (2, 6, 32, SubnetConvention::PartitionInput),
        (2, 4, 64, SubnetConvention::MaskedFullInput),
        (3, 5, 16, SubnetConvention::PartitionInput),
        (4, 8, 24, SubnetConvention::MaskedFullInput),
        (5, 3, 8, SubnetConvention::PartitionInput),
    ];
    let mut worst = 0.0f64;
    for (i, &(d, l, h, conv)) in archs.iter().enumerate() {
        let mut m = random_model(Architecture::new(d, l, h, conv), 100 + i as u64, 0.5);
        m.set_whitening(Whitening { shift: vec![0.25; d], scale: vec![1.5; d] }).unwrap();
        for x in normal_points(10_000, d, i as u64) {
            let (z, _) = m.forward(&x).unwrap();
            let (back, _) = m.inverse(&z).unwrap();
            worst = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst < 1e-9 && secs < 5.0, format!("max |F⁻¹(F(x)) − x| = {worst:.2e}, {secs:.2} s"))
}

fn log_abs_det(j: &[Vec<f64>]) -> f64 {
    let det = match j.len() {
        2 => j[0][0] * j[1][1] - j[0][1] * j[1][0],
        3 => {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        }
        _ => unreachable!(),
    };
    det.abs().ln()
}

fn log_det() -> Outcome {
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for d in [2, 3] {
        for k in 0..50u64 {
            let conv = if k % 2 == 0 { SubnetConvention::PartitionInput } else { SubnetConvention::MaskedFullInput };
            let m = random_model(Architecture::new(d, 4, 8, conv), 1000 + k, 0.6);
            let x = &normal_points(1, d, 2000 + k)[0];
            let (_, ld) = m.forward(x).unwrap();
            let h = 1e-6;
            let mut jac = vec![vec![0.0; d]; d];
            for c in 0..d {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let (fp, _) = m.forward(&xp).unwrap();
                let (fm, _) = m.forward(&xm).unwrap();
                for r in 0..d {
                    jac[r][c] = (fp[r] - fm[r]) / (2.0 * h);
                }
            }
            let fd = log_abs_det(&jac);
            worst = worst.max((ld - fd).abs() / fd.abs().max(ld.abs()));
            pairs += 1;
        }
    }
    outcome(worst < 1e-4, format!("{pairs} pairs, max relative error {worst:.2e}"))
}

fn gradient() -> Outcome {
    let mut m = random_model(Architecture::new(2, 2, 4, SubnetConvention::PartitionInput), 21, 0.7);
    let batch = SampleSet::from_points(&normal_points(8, 2, 4), Provenance::Reference).unwrap();
    let g = m.grad_nll(&batch).unwrap();
    let p0 = m.params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut smallest = f64::INFINITY;
    for i in 0..p0.len() {
        let mut p = p0.clone();
        p[i] += h;
        m.set_params(&p).unwrap();
        let fp = m.nll_loss(&batch).unwrap();
        p[i] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let fm = m.nll_loss(&batch).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        smallest = smallest.min(fd.abs());
        worst = worst.max((g[i] - fd).abs() / fd.abs().max(g[i].abs()));
    }
    outcome(
        worst < 1e-5,
        format!("{} parameters, max relative error {worst:.2e} (smallest |∂L| = {smallest:.1e})", p0.len()),
    )
}

fn normalization() -> Outcome {
    let mut m = random_model(Architecture::new(2, 4, 8, SubnetConvention::PartitionInput), 5, 0.3);
    m.set_whitening(Whitening { shift: vec![0.5, -0.2], scale: vec![0.8, 1.2] }).unwrap();
    let grid = UniformGrid::square(2, -9.0, 9.0, 256).unwrap();
    let values: Vec<f64> = (0..grid.len()).map(|k| m.log_prob(&grid.node(k)).unwrap().exp()).collect();
    let mass = grid.integrate(&values);
    outcome((mass - 1.0).abs() < 1e-3, format!("∫ exp(log_prob) = {mass:.6}"))
}

fn poisson_order() -> Outcome {
    let start = Instant::now();
    let mut errs = Vec::new();
    for n in [33, 65, 129] {
        let grid = UniformGrid::square(2, 0.0, 1.0, n).unwrap();
        let exact: Vec<f64> = (0..grid.len())
            .map(|k| {
                let x = grid.node(k);
                (PI * x[0]).cos() * (PI * x[1]).cos()
            })
            .collect();
        let rhs: Vec<f64> = exact.iter().map(|u| 2.0 * PI * PI * u).collect();
        let field = solve_neumann(&NeumannProblem::projected(grid.clone(), rhs).unwrap(), &SolverOptions::default()).unwrap();
        let mean = |v: &[f64]| grid.integrate(v);
        let (mu, me) = (mean(&field.u), mean(&exact));
        let sq: Vec<f64> = field.u.iter().zip(&exact).map(|(a, b)| ((a - mu) - (b - me)).powi(2)).collect();
        errs.push(grid.integrate(&sq).sqrt());
    }
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let secs = start.elapsed().as_secs_f64();
    let pass = orders.iter().all(|o| (1.7..=2.3).contains(o)) && secs < 10.0;
    outcome(pass, format!("L² errors {}, orders {orders:.3?}, {secs:.2} s", sci(&errs)))
}

/// CDF of N(μ, σ²) truncated to [0, 1].
fn truncated_cdf(mu: f64, sigma: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(mu, sigma).unwrap();
    let (lo, hi) = (n.cdf(0.0), n.cdf(1.0));
    move |x| (n.cdf(x) - lo) / (hi - lo)
}

fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut a, mut b) = (0.0, 1.0);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if f(m) < target {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn moser_quantile_1d() -> Outcome {
    let (m0, s0, m1, s1) = (0.35, 0.12, 0.6, 0.15);
    let dom = BoxDomain::cube(1, 0.0, 1.0).unwrap();
    let grid = UniformGrid::new(dom, vec![4096]).unwrap();
    let gauss = |m: f64, s: f64| move |x: &[f64]| (-0.5 * ((x[0] - m) / s).powi(2)).exp();
    let rho0 = GridDensity::from_fn(grid.clone(), gauss(m0, s0)).unwrap();
    let rho1 = GridDensity::from_fn(grid, gauss(m1, s1)).unwrap();
    let map = MoserMap::build(rho0, rho1, &MoserOptions { ell: 256, ..MoserOptions::default() }).unwrap();
    let (f0, f1) = (truncated_cdf(m0, s0), truncated_cdf(m1, s1));
    let mut worst = 0.0f64;
    for i in 0..512 {
        // test points at the ρ₀ quantiles (i + ½)/512
        let x = bisect(&f0, (i as f64 + 0.5) / 512.0);
        let oracle = bisect(&f1, f0(x));
        let mapped = map.integrate(&[x], Direction::Forward).unwrap()[0];
        worst = worst.max((mapped - oracle).abs());
    }
    outcome(worst < 5e-3, format!("sup |Φ₁(x) − F₁⁻¹(F₀(x))| = {worst:.2e} over 512 points"))
}

fn unit_box_mixtures() -> (Mixture, Mixture) {
    let dom = BoxDomain::cube(2, 0.0, 1.0).unwrap();
    let rho0 = Mixture::new(
        vec![Component { weight: 1.0, mean: vec![0.35, 0.4], std: vec![0.15, 0.15] }],
        0.3,
        dom.clone(),
        Boundary::Truncate,
    )
    .unwrap();
    let rho1 = Mixture::new(
        vec![
            Component { weight: 1.0, mean: vec![0.3, 0.7], std: vec![0.1, 0.1] },
            Component { weight: 1.5, mean: vec![0.7, 0.35], std: vec![0.12, 0.1] },
        ],
        0.2,
        dom,
        Boundary::Truncate,
    )
    .unwrap();
    (rho0, rho1)
}

fn moser_pushforward() -> Outcome {
    let (rho0, rho1) = unit_box_mixtures();
    let spec = MoserCompareSpec { rho0, rho1, nodes: vec![129, 129], n_samples: 10_000, n_sub: 1000, floor_repeats: 4, seed: 7 };
    let (cmp, _) = moser_compare(&spec, &MoserOptions { ell: 64, ..MoserOptions::default() }).unwrap();
    outcome(
        cmp.w2.value <= 2.0 * cmp.floor,
        format!("W2 = {:.4}, floor = {:.4} (n_sub = 1000), failed points = {}", cmp.w2.value, cmp.floor, cmp.failed_points),
    )
}

fn euler_convergence() -> Outcome {
    let (m0, m1) = unit_box_mixtures();
    let grid = UniformGrid::square(2, 0.0, 1.0, 65).unwrap();
    let base = MoserMap::build(m0.on_grid(&grid).unwrap(), m1.on_grid(&grid).unwrap(), &MoserOptions::default()).unwrap();
    let pts = m0.sample(64, 3).unwrap();
    let reference: Vec<Vec<f64>> = pts.iter().map(|x| base.integrate_rk4(x, Direction::Forward, 4096).unwrap()).collect();
    let mut errs = Vec::new();
    for ell in [64, 128, 256] {
        let mut map = base.clone();
        map.ell = ell;
        map.integrator = Integrator::EulerComposition;
        let e: f64 = pts
            .iter()
            .zip(&reference)
            .map(|(x, r)| {
                let y = map.integrate(x, Direction::Forward).unwrap();
                y.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / pts.len() as f64;
        errs.push(e.sqrt());
    }
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[1] / w[0]).collect();
    let pass = ratios.iter().all(|r| (0.35..=0.65).contains(r));
    outcome(pass, format!("RMS errors {}, successive ratios {ratios:.3?}", sci(&errs)))
}

fn double_well_end_to_end() -> Outcome {
    let start = Instant::now();
    let spec = PotentialSpec::double_well(BoxDomain::cube(2, -3.0, 3.0).unwrap()).unwrap();
    let n = 10_000;
    let (thin, burn_in) = (4000, 2000);
    let run = |frames: usize, seed: u64| {
        let mut cfg = LangevinConfig::new(vec![-1.0, 0.0], 5e-3, burn_in + thin * frames, 4.0, seed);
        cfg.thin = thin;
        cfg.burn_in = burn_in;
        simulate(&spec, &cfg)
    };
    let data = run(n, 1).unwrap();
    let held_out = run(n, 2).unwrap();

    let mut arch = Architecture::new(2, 6, 128, SubnetConvention::MaskedFullInput);
    arch.output_init_scale = 1.0;
    let count = param_count(6, 128, 2, SubnetConvention::MaskedFullInput);
    let model = FlowModel::new(arch, 11).unwrap();
    let cfg = TrainConfig {
        n_epochs: 300,
        learning_rate: 3e-3,
        batch_size: 128,
        seed: 12,
        standardize: true,
        lr_schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let (trained, history) = train(&model, &data, &cfg).unwrap();
    let generated = trained.sample(n, 13).unwrap();

    let w2 = w2_exact(&generated, &held_out, 1000, 14).unwrap();
    let per = per_coordinate_w2(&generated, &held_out, &[None, None]).unwrap();
    let floor = self_distance_floor(run, 1000, 1000, 4, 15).unwrap();
    let t_data = count_transitions(&held_out, 0, -0.5, 0.5).unwrap();
    let t_flow = count_transitions(&generated, 0, -0.5, 0.5).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = count == 7704 && trained.param_count() == 7704 && w2.value < 0.2 && per.iter().all(|v| *v < 0.05) && secs < 600.0;
    outcome(
        pass,
        format!(
            "params {count}, joint W2 {:.4}, per-coordinate {per:.4?}, floor {floor:.4}, transitions data {t_data} / flow {t_flow}, {} epochs, {secs:.0} s",
            w2.value,
            history.len()
        ),
    )
}

fn regularization() -> Outcome {
    let spec = PotentialSpec::diatomic([0.0, 0.0], 1.0, 1.0, BoxDomain::cube(2, -3.0, 3.0).unwrap()).unwrap();
    let grid = UniformGrid::square(2, -3.0, 3.0, 256).unwrap();
    let rows = regularization_sweep(&spec, 1.0, &grid, &[1.0, 0.5, 0.25, 0.125]).unwrap();
    let l1: Vec<f64> = rows.iter().map(|r| r.l1).collect();
    let decreasing = l1.windows(2).all(|w| w[1] < w[0]);
    let exact = rows.iter().all(|r| r.bit_exact && r.nodes_checked > 0);
    let last = *l1.last().unwrap();
    outcome(decreasing && exact && last < 0.01, format!("L¹ {}, bit-exact below cutoff: {exact}", sci(&l1)))
}

fn lipschitz_blowup() -> Outcome {
    let rows = lipschitz_sweep(&LipschitzSweep::default()).unwrap();
    let lip: Vec<f64> = rows.iter().map(|r| r.lipschitz).collect();
    let increasing = lip.windows(2).all(|w| w[1] > w[0]);
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    outcome(increasing, format!("δ {deltas:?} → Lipschitz {lip:.3?}"))
}

fn periodic_surrogate() -> Outcome {
    let target = Mixture::new(
        vec![
            Component { weight: 0.45, mean: vec![-1.3, 2.4], std: vec![0.45, 0.4] },
            Component { weight: 0.4, mean: vec![-1.2, -0.6], std: vec![0.35, 0.35] },
            Component { weight: 0.15, mean: vec![1.0, 0.7], std: vec![0.3, 0.3] },
        ],
        0.0,
        BoxDomain::cube(2, -PI, PI).unwrap(),
        Boundary::Periodic,
    )
    .unwrap();
    let data = target.sample(10_000, 1).unwrap();
    let mut arch = Architecture::new(2, 6, 64, SubnetConvention::PartitionInput);
    arch.output_init_scale = 1.0;
    let model = FlowModel::new(arch, 2).unwrap();
    let cfg = TrainConfig {
        n_epochs: 300,
        learning_rate: 3e-3,
        batch_size: 128,
        seed: 3,
        standardize: true,
        lr_schedule: LrSchedule::Cosine,
        ..TrainConfig::default()
    };
    let (trained, _) = train(&model, &data, &cfg).unwrap();
    let n = 1000;
    let generated = trained.sample(n, 4).unwrap();
    let reference = target.sample(n, 5).unwrap();
    let period = 2.0 * PI;
    let circ = |a: &SampleSet, b: &SampleSet, axis: usize| circular_w2_1d(&a.coordinate(axis), &b.coordinate(axis), period).unwrap();
    let mut pass = trained.param_count() == 2316;
    let mut parts = Vec::new();
    for axis in 0..2 {
        let w = circ(&generated, &reference, axis);
        let floor = (0..4u64)
            .map(|r| {
                let a = target.sample(n, split_seed(6, 2 * r)).unwrap();
                let b = target.sample(n, split_seed(6, 2 * r + 1)).unwrap();
                circ(&a, &b, axis)
            })
            .sum::<f64>()
            / 4.0;
        pass &= w <= 2.0 * floor;
        parts.push(format!("axis {axis}: W2 {w:.4} vs floor {floor:.4}"));
    }
    outcome(pass, format!("{} params; {}", trained.param_count(), parts.join("; ")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("exact invertibility", invertibility),
        ("log-det correctness", log_det),
        ("gradient exactness", gradient),
        ("flow normalization", normalization),
        ("Poisson solver order", poisson_order),
        ("1D Moser map equals quantile map", moser_quantile_1d),
        ("Moser pushforward matches target", moser_pushforward),
        ("Euler composition convergence", euler_convergence),
        ("double-well end to end", double_well_end_to_end),
        ("regularization convergence", regularization),
        ("Lipschitz blow-up", lipschitz_blowup),
        ("periodic mixture surrogate", periodic_surrogate),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {status} {name}: {} [{:.1} s]", i + 1, o.detail, start.elapsed().as_secs_f64());
        failures += usize::from(!o.pass);
    }
    println!("acceptance: {failures} failing");
    if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
