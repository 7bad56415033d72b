//! Ordered point collections and their text-table format.
//!
//! ```text
//! #schema_version=1
//! #dim=2
//! #provenance=langevin
//! #seed=42
//! #meta.dt=0.005
//! x0,x1
//! 0.9731,-0.0425
//! ```
//!
//! Coordinates are written in shortest round-trip decimal form, so a
//! write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::SCHEMA_VERSION;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Langevin,
    Flow,
    MoserPushforward,
    Prior,
    /// Direct draws from an analytic reference distribution.
    Reference,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Langevin => "langevin",
            Provenance::Flow => "flow",
            Provenance::MoserPushforward => "moser_pushforward",
            Provenance::Prior => "prior",
            Provenance::Reference => "reference",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "langevin" => Provenance::Langevin,
            "flow" => Provenance::Flow,
            "moser_pushforward" => Provenance::MoserPushforward,
            "prior" => Provenance::Prior,
            "reference" => Provenance::Reference,
            other => return Err(Error::Parse(format!("unknown provenance '{other}'"))),
        })
    }
}

/// Points of a common dimension, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub meta: BTreeMap<String, String>,
}

impl SampleSet {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        assert!(dim > 0, "sample dimension must be positive");
        SampleSet { dim, data: Vec::new(), provenance, seed: None, meta: BTreeMap::new() }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values cannot be split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(SampleSet { dim, data, provenance, seed: None, meta: BTreeMap::new() })
    }

    pub fn from_points(points: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let dim = points.first().map(Vec::len).ok_or_else(|| Error::invalid("no points"))?;
        let mut set = SampleSet::new(dim.max(1), provenance);
        for p in points {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::invalid(format!(
                "point of dimension {} pushed into a {}-dimensional set",
                p.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(p);
        Ok(())
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn coordinate(&self, axis: usize) -> Vec<f64> {
        self.iter().map(|p| p[axis]).collect()
    }

    /// Subset in the given index order; metadata is carried over.
    pub fn select(&self, indices: &[usize]) -> SampleSet {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        SampleSet { dim: self.dim, data, provenance: self.provenance, seed: self.seed, meta: self.meta.clone() }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#schema_version={SCHEMA_VERSION}");
        let _ = writeln!(out, "#dim={}", self.dim);
        let _ = writeln!(out, "#provenance={}", self.provenance);
        match self.seed {
            Some(s) => {
                let _ = writeln!(out, "#seed={s}");
            }
            None => out.push_str("#seed=none\n"),
        }
        for (k, v) in &self.meta {
            let _ = writeln!(out, "#meta.{k}={v}");
        }
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{i}")).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for p in self.iter() {
            for (i, v) in p.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let mut header: BTreeMap<String, String> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut lines = text.lines().enumerate().peekable();
        while let Some((_, line)) = lines.peek() {
            let Some(rest) = line.strip_prefix('#') else { break };
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed header line '{line}'")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
            } else {
                header.insert(k.to_string(), v.to_string());
            }
            lines.next();
        }
        let get = |k: &str| header.get(k).ok_or_else(|| Error::Parse(format!("missing header '{k}'")));
        let version: u32 = get("schema_version")?
            .parse()
            .map_err(|_| Error::Parse("bad schema_version".into()))?;
        if version != SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported schema_version {version}")));
        }
        let dim: usize = get("dim")?.parse().map_err(|_| Error::Parse("bad dim".into()))?;
        let provenance: Provenance = get("provenance")?.parse()?;
        let seed = match get("seed")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|_| Error::Parse(format!("bad seed '{s}'")))?),
        };
        let columns = lines.next().map(|(_, l)| l).unwrap_or("");
        if columns.split(',').count() != dim {
            return Err(Error::Parse(format!("column header '{columns}' does not match dim {dim}")));
        }
        let mut set = SampleSet::new(dim, provenance);
        set.seed = seed;
        set.meta = meta;
        let mut row = Vec::with_capacity(dim);
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            row.clear();
            for tok in line.split(',') {
                row.push(tok.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!("line {}: bad number '{tok}'", lineno + 1))
                })?);
            }
            set.push(&row).map_err(|_| Error::Parse(format!("line {}: wrong column count", lineno + 1)))?;
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_table().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path)?)
    }
}
