//! Command-line driver. Each command reads a TOML experiment config,
//! applies `--section.key value` overrides, writes the resolved config next
//! to its outputs and stamps every artifact with the config digest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::experiments::{
    evaluate, lipschitz_sweep, moser_compare, regularization_sweep, EvalOptions, LipschitzSweep, MoserCompareSpec,
    TransitionSpec,
};
use crate::flow::{loss_table, train, Architecture, Checkpoint, FlowModel, TrainConfig};
use crate::grid::{BoxDomain, UniformGrid};
use crate::langevin::{count_transitions, simulate, LangevinConfig};
use crate::metrics::{w2_exact, Bins};
use crate::moser::MoserOptions;
use crate::potential::PotentialSpec;
use crate::rng::split_seed;
use crate::samples::SampleSet;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_CHECK: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "boltzgen", version, about = "Flow-based Boltzmann sampling experiments")]
#[command(after_help = "Any config value can be overridden with --section.key VALUE, e.g. --train.learning_rate 5e-4")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run overdamped Langevin dynamics and write the trajectory samples.
    Simulate(RunArgs),
    /// Train a flow on a sample file by negative log-likelihood.
    Train(RunArgs),
    /// Draw samples from a trained flow checkpoint.
    Sample(RunArgs),
    /// Compare flow samples with reference samples.
    Eval(RunArgs),
    /// Push samples through the Moser map and compare with the target.
    MoserCompare(RunArgs),
    /// Sweep the regularization parameter on a grid.
    RegularizeDemo(RunArgs),
    /// Sweep the target-density floor and estimate Moser-map Lipschitz constants.
    LipschitzSweep(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Exit with status 3 if an acceptance threshold is violated.
    #[arg(long)]
    check: bool,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::Train(a) => ("train", a),
            Command::Sample(a) => ("sample", a),
            Command::Eval(a) => ("eval", a),
            Command::MoserCompare(a) => ("moser-compare", a),
            Command::RegularizeDemo(a) => ("regularize-demo", a),
            Command::LipschitzSweep(a) => ("lipschitz-sweep", a),
        }
    }
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numerical(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e)
        } else {
            Failure::Config(e.to_string())
        }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

/// Artifact file names, relative to `output_dir` unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoPaths {
    pub samples: PathBuf,
    pub reference: PathBuf,
    pub checkpoint: PathBuf,
    pub losses: PathBuf,
    pub flow_samples: PathBuf,
    pub pushforward: PathBuf,
}

impl Default for IoPaths {
    fn default() -> Self {
        IoPaths {
            samples: "langevin.csv".into(),
            reference: "reference.csv".into(),
            checkpoint: "flow.json".into(),
            losses: "losses.csv".into(),
            flow_samples: "flow_samples.csv".into(),
            pushforward: "moser_pushforward.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { n: 10_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_sub: usize,
    pub floor_repeats: usize,
    pub periodic_axes: Vec<usize>,
    pub period: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transitions: Option<TransitionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hist_domain: Option<BoxDomain>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hist_bins: Option<Vec<usize>>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_sub: 1000,
            floor_repeats: 4,
            periodic_axes: Vec::new(),
            period: 2.0 * std::f64::consts::PI,
            transitions: None,
            hist_domain: None,
            hist_bins: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizeSection {
    pub epsilons: Vec<f64>,
    pub beta: f64,
    /// Grid nodes per axis on the potential's domain.
    pub nodes: usize,
}

impl Default for RegularizeSection {
    fn default() -> Self {
        RegularizeSection { epsilons: vec![1.0, 0.5, 0.25, 0.125], beta: 1.0, nodes: 256 }
    }
}

/// Thresholds enforced by `--check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    pub max_w2: f64,
    pub max_per_coordinate: f64,
    /// Optional bound on `W2 / floor` for `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_floor_ratio: Option<f64>,
    pub moser_floor_ratio: f64,
    pub regularize_final_l1: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            max_w2: 0.2,
            max_per_coordinate: 0.05,
            max_floor_ratio: None,
            moser_floor_ratio: 2.0,
            regularize_final_l1: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Recorded in artifacts.
    #[serde(default = "yes")]
    pub deterministic: bool,
    #[serde(default)]
    pub io: IoPaths,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<PotentialSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub langevin: Option<LangevinConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub moser: MoserOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub densities: Option<MoserCompareSpec>,
    #[serde(default)]
    pub regularize: RegularizeSection,
    #[serde(default)]
    pub lipschitz: LipschitzSweep,
    #[serde(default)]
    pub check: CheckSection,
}

/// Seeds that fit a TOML integer.
fn derived_seed(seed: u64, stream: u64) -> u64 {
    split_seed(seed, stream) & (i64::MAX as u64)
}

/// `(section, stream, create)`: sections whose missing `seed` is derived
/// from the global seed. `create` adds the section if it is absent.
const SEEDED_SECTIONS: [(&str, u64, bool); 6] = [
    ("langevin", 1, false),
    ("train", 2, false),
    ("sample", 3, true),
    ("eval", 4, true),
    ("densities", 5, false),
    ("lipschitz", 6, true),
];

fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| config_err(format!("bad override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| config_err(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Reads a config, applies overrides and derived seeds, and validates the schema.
pub fn load_config(
    path: &Path,
    overrides: &[(String, String)],
    seed: Option<u64>,
    output_dir: Option<&Path>,
) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    for (k, v) in overrides {
        set_dotted(&mut table, k, parse_override_value(v))?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| config_err("seed must fit in 63 bits"))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    if let Some(dir) = output_dir {
        table.insert("output_dir".into(), toml::Value::String(dir.display().to_string()));
    }
    let global = match table.get("seed") {
        None => 0,
        Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => return Err(config_err(format!("seed must be a nonnegative integer, got {other}"))),
    };
    for (name, stream, create) in SEEDED_SECTIONS {
        if create && !table.contains_key(name) {
            table.insert(name.into(), toml::Value::Table(toml::Table::new()));
        }
        if let Some(toml::Value::Table(section)) = table.get_mut(name) {
            section
                .entry("seed")
                .or_insert(toml::Value::Integer(derived_seed(global, stream) as i64));
        }
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))
}

fn parse_args(args: Vec<OsString>) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let key = arg.to_str().and_then(|s| s.strip_prefix("--")).filter(|k| k.contains('.')).map(str::to_string);
        match key {
            Some(k) => {
                if let Some((k, v)) = k.split_once('=') {
                    overrides.push((k.to_string(), v.to_string()));
                } else if let Some(v) = it.next() {
                    overrides.push((k, v.to_string_lossy().into_owned()));
                } else {
                    overrides.push((k, String::new()));
                }
            }
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

pub fn main_from_env() -> i32 {
    run(std::env::args_os().collect())
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run(args: Vec<OsString>) -> i32 {
    let (rest, overrides) = parse_args(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (name, a) = cli.command.parts();
    let result = load_config(&a.config, &overrides, a.seed, a.output_dir.as_deref())
        .and_then(|cfg| execute(name, &cfg));
    match result {
        Ok(report) => {
            print!("{}", report.human);
            println!("record: {}", report.record);
            if a.check && !report.violations.is_empty() {
                for v in &report.violations {
                    eprintln!("check failed: {v}");
                }
                EXIT_CHECK
            } else {
                EXIT_OK
            }
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: invalid configuration: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("error: numerical failure: {e}");
            EXIT_NUMERICAL
        }
    }
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub human: String,
    pub record: serde_json::Value,
    pub violations: Vec<String>,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    command: &'a str,
    digest: String,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.cfg.output_dir.join(p)
        }
    }

    fn stamp(&self, mut s: SampleSet) -> SampleSet {
        s.meta.insert("command".into(), self.command.into());
        s.meta.insert("config_digest".into(), self.digest.clone());
        s
    }

    fn header(&self, seed: u64) -> String {
        format!(
            "#schema_version={}\n#command={}\n#seed={seed}\n#config_digest={}\n",
            crate::SCHEMA_VERSION,
            self.command,
            self.digest
        )
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf, Failure> {
        let path = self.cfg.output_dir.join(name);
        crate::io::write_atomic(&path, body.as_bytes())?;
        Ok(path)
    }

    fn finish(&self, seed: u64, payload: serde_json::Value, human: String, violations: Vec<String>) -> Result<Report, Failure> {
        let record = json!({
            "schema_version": crate::SCHEMA_VERSION,
            "command": self.command,
            "seed": seed,
            "config_digest": self.digest,
            "result": payload,
            "check_violations": violations,
        });
        let name = format!("{}.report.json", self.command);
        self.write(&name, &format!("{record}\n"))?;
        Ok(Report { human, record, violations })
    }
}

fn require<'a, T>(section: &'a Option<T>, name: &str, command: &str) -> Result<&'a T, Failure> {
    section.as_ref().ok_or_else(|| config_err(format!("`{command}` needs a [{name}] section")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Validates the sections a command needs, writes the resolved config and runs it.
pub fn execute(command: &str, cfg: &ExperimentConfig) -> Result<Report, Failure> {
    validate_for(command, cfg)?;
    let resolved = toml::to_string(cfg).map_err(|e| config_err(format!("cannot serialize config: {e}")))?;
    let digest = hex(&Sha256::digest(resolved.as_bytes()));
    std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from)?;
    let ctx = Ctx { cfg, command, digest };
    ctx.write(&format!("{command}.resolved.toml"), &resolved)?;
    match command {
        "simulate" => cmd_simulate(&ctx),
        "train" => cmd_train(&ctx),
        "sample" => cmd_sample(&ctx),
        "eval" => cmd_eval(&ctx),
        "moser-compare" => cmd_moser(&ctx),
        "regularize-demo" => cmd_regularize(&ctx),
        "lipschitz-sweep" => cmd_lipschitz(&ctx),
        other => Err(config_err(format!("unknown command {other}"))),
    }
}

fn validate_for(command: &str, cfg: &ExperimentConfig) -> Result<(), Failure> {
    match command {
        "simulate" => {
            let p = require(&cfg.potential, "potential", command)?;
            let l = require(&cfg.langevin, "langevin", command)?;
            l.validate()?;
            if l.x0.len() != p.domain.dim() {
                return Err(config_err("langevin.x0 does not match the potential's dimension"));
            }
        }
        "train" => {
            require(&cfg.flow, "flow", command)?.validate()?;
            require(&cfg.train, "train", command)?.validate()?;
        }
        "sample" => {
            if cfg.sample.n == 0 {
                return Err(config_err("sample.n must be positive"));
            }
        }
        "eval" => {
            if cfg.eval.n_sub == 0 {
                return Err(config_err("eval.n_sub must be positive"));
            }
            if cfg.eval.hist_bins.is_some() != cfg.eval.hist_domain.is_some() {
                return Err(config_err("eval.hist_bins and eval.hist_domain go together"));
            }
            if !(cfg.eval.period > 0.0) {
                return Err(config_err("eval.period must be positive"));
            }
        }
        "moser-compare" => {
            let d = require(&cfg.densities, "densities", command)?;
            d.rho0.validate()?;
            d.rho1.validate()?;
            if d.nodes.len() != d.rho0.dim() {
                return Err(config_err("densities.nodes needs one entry per axis"));
            }
        }
        "regularize-demo" => {
            require(&cfg.potential, "potential", command)?;
            let r = &cfg.regularize;
            if r.epsilons.is_empty() || r.epsilons.iter().any(|e| !(*e > 0.0)) || r.nodes < 2 || !(r.beta > 0.0) {
                return Err(config_err("regularize needs positive epsilons and beta, and nodes ≥ 2"));
            }
        }
        "lipschitz-sweep" => {
            let l = &cfg.lipschitz;
            if l.deltas.is_empty() || l.deltas.iter().any(|d| !(*d > 0.0)) || l.nodes < 2 || l.ell == 0 || l.n_pairs == 0 {
                return Err(config_err("lipschitz needs positive deltas, nodes ≥ 2, ell and n_pairs ≥ 1"));
            }
        }
        _ => return Err(config_err(format!("unknown command {command}"))),
    }
    Ok(())
}

fn cmd_simulate(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let (spec, lcfg) = (cfg.potential.as_ref().unwrap(), cfg.langevin.as_ref().unwrap());
    let samples = ctx.stamp(simulate(spec, lcfg)?);
    let out = ctx.path(&cfg.io.samples);
    samples.write(&out)?;
    let transitions = cfg.eval.transitions.map(|t| count_transitions(&samples, t.coord, t.lo, t.hi)).transpose()?;
    let rejected = samples.meta.get("rejected_proposals").cloned().unwrap_or_default();
    let mut human = format!("frames        {}\nrejected      {rejected}\n", samples.len());
    if let Some(t) = transitions {
        let _ = writeln!(human, "transitions   {t}");
    }
    let _ = writeln!(human, "written       {}", out.display());
    let payload = json!({ "frames": samples.len(), "rejected_proposals": rejected, "transitions": transitions, "output": out });
    ctx.finish(lcfg.seed, payload, human, Vec::new())
}

fn cmd_train(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let (arch, tcfg) = (cfg.flow.as_ref().unwrap(), cfg.train.as_ref().unwrap());
    let data = SampleSet::read(&ctx.path(&cfg.io.samples))?;
    let model = FlowModel::new(arch.clone(), split_seed(tcfg.seed, 0))?;
    let (trained, history) = train(&model, &data, tcfg)?;
    let mut ck = Checkpoint::new(trained);
    ck.train_config = Some(tcfg.clone());
    ck.seed = Some(tcfg.seed);
    ck.history = history.clone();
    ck.meta.insert("config_digest".into(), ctx.digest.clone());
    ck.meta.insert("training_data".into(), cfg.io.samples.display().to_string());
    let ck_path = ctx.path(&cfg.io.checkpoint);
    ck.write(&ck_path)?;
    let loss_path = ctx.path(&cfg.io.losses);
    crate::io::write_atomic(&loss_path, format!("{}{}", ctx.header(tcfg.seed), loss_table(&history)).as_bytes())?;
    let last = history.last();
    let human = format!(
        "parameters    {}\nepochs        {}\nfinal nll     {}\nvalidation    {}\nwritten       {}\n",
        ck.model.param_count(),
        history.len(),
        last.map_or("-".into(), |e| format!("{:.6}", e.train)),
        last.and_then(|e| e.validation).map_or("-".into(), |v| format!("{v:.6}")),
        ck_path.display()
    );
    let payload = json!({
        "param_count": ck.model.param_count(),
        "epochs": history.len(),
        "final": last,
        "checkpoint": ck_path,
        "losses": loss_path,
    });
    ctx.finish(tcfg.seed, payload, human, Vec::new())
}

fn cmd_sample(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let ck = Checkpoint::read(&ctx.path(&cfg.io.checkpoint))?;
    let mut samples = ctx.stamp(ck.model.sample(cfg.sample.n, cfg.sample.seed)?);
    if let Some(d) = ck.meta.get("config_digest") {
        samples.meta.insert("checkpoint_digest".into(), d.clone());
    }
    let out = ctx.path(&cfg.io.flow_samples);
    samples.write(&out)?;
    let human = format!("samples       {}\nwritten       {}\n", samples.len(), out.display());
    ctx.finish(cfg.sample.seed, json!({ "samples": samples.len(), "output": out }), human, Vec::new())
}

fn cmd_eval(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let e = &cfg.eval;
    let candidate = SampleSet::read(&ctx.path(&cfg.io.flow_samples))?;
    let reference = SampleSet::read(&ctx.path(&cfg.io.reference))?;
    if candidate.dim() != reference.dim() {
        return Err(config_err("candidate and reference have different dimensions"));
    }
    let bins = match (&e.hist_domain, &e.hist_bins) {
        (Some(d), Some(b)) => Some(Bins::new(d.clone(), b.clone())?),
        _ => None,
    };
    let opts = EvalOptions {
        n_sub: e.n_sub,
        floor_repeats: e.floor_repeats,
        periods: (0..candidate.dim()).map(|a| e.periodic_axes.contains(&a).then_some(e.period)).collect(),
        transitions: e.transitions,
        bins: bins.clone(),
        seed: e.seed,
    };
    let r = evaluate(&candidate, &reference, &opts)?;
    if let Some(b) = &bins {
        ctx.write("eval_histogram.csv", &format!("{}{}", ctx.header(e.seed), b.table(&candidate, &reference)))?;
    }
    let per = r.w2.per_coordinate.clone().unwrap_or_default();
    let mut human = String::new();
    let _ = writeln!(human, "joint W2         {:.6}  (exact assignment, n = {})", r.w2.value, r.w2.n_used);
    for (a, v) in per.iter().enumerate() {
        let kind = if e.periodic_axes.contains(&a) { "circular" } else { "linear" };
        let _ = writeln!(human, "W2 x{a}            {v:.6}  ({kind})");
    }
    if let Some(m) = r.w2.per_coordinate_mean {
        let _ = writeln!(human, "per-axis mean    {m:.6}");
    }
    if let Some(f) = r.floor {
        let _ = writeln!(human, "floor (joint)    {f:.6}");
    }
    if let (Some(c), Some(rf)) = (r.transitions_candidate, r.transitions_reference) {
        let _ = writeln!(human, "transitions      candidate {c}, reference {rf}");
    }
    if let Some(h) = r.hist_l1 {
        let _ = writeln!(human, "histogram L1     {h:.6}");
    }
    let mut violations = Vec::new();
    let c = &cfg.check;
    if r.w2.value >= c.max_w2 {
        violations.push(format!("joint W2 {:.6} ≥ {}", r.w2.value, c.max_w2));
    }
    for (a, v) in per.iter().enumerate() {
        if *v >= c.max_per_coordinate {
            violations.push(format!("W2 on axis {a} {v:.6} ≥ {}", c.max_per_coordinate));
        }
    }
    if let (Some(ratio), Some(floor)) = (c.max_floor_ratio, r.floor) {
        if r.w2.value > ratio * floor {
            violations.push(format!("joint W2 {:.6} > {ratio} × floor {floor:.6}", r.w2.value));
        }
    }
    let payload = serde_json::to_value(&r).expect("EvalReport serializes");
    ctx.finish(e.seed, payload, human, violations)
}

fn cmd_moser(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let spec = cfg.densities.as_ref().unwrap();
    let (cmp, pushed) = moser_compare(spec, &cfg.moser)?;
    let pushed = ctx.stamp(pushed);
    let out = ctx.path(&cfg.io.pushforward);
    pushed.write(&out)?;
    let flow_path = ctx.path(&cfg.io.flow_samples);
    let flow_w2 = if flow_path.exists() {
        let flow = SampleSet::read(&flow_path)?;
        let n = cmp.w2.n_used.min(flow.len()).min(pushed.len());
        Some(w2_exact(&flow, &pushed, n, split_seed(spec.seed, 9))?)
    } else {
        None
    };
    let identity = cmp.max_displacement <= 1e-9;
    let ratio = cmp.w2.value / cmp.floor;
    let mut human = format!(
        "W2 pushforward vs target  {:.6}\nfloor                     {:.6}\nratio                     {ratio:.3}\nmax displacement          {:.3e}{}\ncontinuity residual       {:.3e}\nfailed points             {}\n",
        cmp.w2.value,
        cmp.floor,
        cmp.max_displacement,
        if identity { "  (identity)" } else { "" },
        cmp.continuity_residual,
        cmp.failed_points
    );
    if let Some(f) = &flow_w2 {
        let _ = writeln!(human, "W2 flow vs pushforward    {:.6}", f.value);
    }
    let mut violations = Vec::new();
    if cmp.w2.value > cfg.check.moser_floor_ratio * cmp.floor {
        violations.push(format!("W2 {:.6} > {} × floor {:.6}", cmp.w2.value, cfg.check.moser_floor_ratio, cmp.floor));
    }
    let payload = json!({ "comparison": cmp, "identity": identity, "flow_w2": flow_w2, "output": out });
    ctx.finish(spec.seed, payload, human, violations)
}

fn cmd_regularize(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let spec = cfg.potential.as_ref().unwrap();
    let r = &cfg.regularize;
    let grid = UniformGrid::new(spec.domain.clone(), vec![r.nodes; spec.domain.dim()])?;
    let rows = regularization_sweep(spec, r.beta, &grid, &r.epsilons)?;
    let mut table = String::from("epsilon,l1,nodes_checked,bit_exact\n");
    let mut human = String::from("epsilon      L1 distance   U_eps == U below 1/eps\n");
    for row in &rows {
        let _ = writeln!(table, "{},{},{},{}", row.epsilon, row.l1, row.nodes_checked, row.bit_exact);
        let _ = writeln!(human, "{:<12} {:<13.6e} {} ({} nodes)", row.epsilon, row.l1, row.bit_exact, row.nodes_checked);
    }
    ctx.write("regularize.csv", &format!("{}{table}", ctx.header(cfg.seed)))?;
    let mut violations = Vec::new();
    if rows.windows(2).any(|w| w[1].l1 >= w[0].l1) {
        violations.push("L1 distance is not strictly decreasing in epsilon".into());
    }
    if let Some(last) = rows.last() {
        if last.l1 >= cfg.check.regularize_final_l1 {
            violations.push(format!("final L1 {:.6e} ≥ {}", last.l1, cfg.check.regularize_final_l1));
        }
    }
    if rows.iter().any(|r| !r.bit_exact) {
        violations.push("U_eps differs from U below the cutoff".into());
    }
    ctx.finish(cfg.seed, json!({ "rows": rows }), human, violations)
}

fn cmd_lipschitz(ctx: &Ctx) -> Result<Report, Failure> {
    let cfg = ctx.cfg;
    let rows = lipschitz_sweep(&cfg.lipschitz)?;
    let mut table = String::from("delta,min_density,lipschitz\n");
    let mut human = String::from("delta        min density   Lipschitz estimate\n");
    for row in &rows {
        let _ = writeln!(table, "{},{},{}", row.delta, row.min_density, row.lipschitz);
        let _ = writeln!(human, "{:<12} {:<13.4e} {:.4}", row.delta, row.min_density, row.lipschitz);
    }
    ctx.write("lipschitz.csv", &format!("{}{table}", ctx.header(cfg.lipschitz.seed)))?;
    let mut violations = Vec::new();
    if rows.windows(2).any(|w| w[1].lipschitz <= w[0].lipschitz) {
        violations.push("Lipschitz estimates do not increase as the floor decreases".into());
    }
    ctx.finish(cfg.lipschitz.seed, json!({ "rows": rows }), human, violations)
}

/// Flattened `key = value` view of a config, for diffing runs.
pub fn describe(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    if let Ok(v) = toml::Value::try_from(cfg) {
        walk("", &v, &mut out);
    }
    out
}
