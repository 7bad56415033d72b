//! Text tables for fields tabulated on a [`UniformGrid`].
//!
//! ```text
//! #schema_version=1
//! #kind=grid_density
//! #dim=2
//! #axis0=-3,3,61
//! #axis1=-3,3,61
//! #beta=1
//! #fields=density
//! 1.2e-9
//! ...
//! ```
//!
//! `axisN` is `lower,upper,nodes`. After the header comes one line per node
//! in row-major order (last axis fastest) holding one comma-separated
//! column per field, in shortest round-trip decimal form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{BoxDomain, UniformGrid};
use crate::SCHEMA_VERSION;

#[derive(Clone, Debug, PartialEq)]
pub struct GridTable {
    pub kind: String,
    pub grid: UniformGrid,
    /// Extra header entries, written in order.
    pub header: Vec<(String, String)>,
    pub fields: Vec<(String, Vec<f64>)>,
}

impl GridTable {
    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn field(&self, name: &str) -> Result<&[f64]> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Parse(format!("missing field '{name}'")))
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#schema_version={SCHEMA_VERSION}");
        let _ = writeln!(out, "#kind={}", self.kind);
        let _ = writeln!(out, "#dim={}", self.grid.dim());
        for a in 0..self.grid.dim() {
            let d = &self.grid.domain;
            let _ = writeln!(out, "#axis{a}={},{},{}", d.lower[a], d.upper[a], self.grid.nodes[a]);
        }
        for (k, v) in &self.header {
            let _ = writeln!(out, "#{k}={v}");
        }
        let names: Vec<&str> = self.fields.iter().map(|(n, _)| n.as_str()).collect();
        let _ = writeln!(out, "#fields={}", names.join(","));
        for node in 0..self.grid.len() {
            for (i, (_, vals)) in self.fields.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", vals[node]);
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        let mut body_start = text.len();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let trimmed = line.trim_end();
            match trimmed.strip_prefix('#') {
                Some(rest) => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| Error::Parse(format!("malformed header line '{trimmed}'")))?;
                    entries.push((k.to_string(), v.to_string()));
                }
                None => {
                    body_start = offset;
                    break;
                }
            }
            offset += line.len();
        }
        let take = |key: &str, entries: &mut Vec<(String, String)>| -> Result<String> {
            let pos = entries
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::Parse(format!("missing header '{key}'")))?;
            Ok(entries.remove(pos).1)
        };
        let version: u32 = take("schema_version", &mut entries)?
            .parse()
            .map_err(|_| Error::Parse("bad schema_version".into()))?;
        if version != SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported schema_version {version}")));
        }
        let kind = take("kind", &mut entries)?;
        let dim: usize = take("dim", &mut entries)?.parse().map_err(|_| Error::Parse("bad dim".into()))?;
        let (mut lower, mut upper, mut nodes) = (Vec::new(), Vec::new(), Vec::new());
        for a in 0..dim {
            let spec = take(&format!("axis{a}"), &mut entries)?;
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Parse(format!("bad axis spec '{spec}'")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{s}'")));
            lower.push(num(parts[0])?);
            upper.push(num(parts[1])?);
            nodes.push(parts[2].parse().map_err(|_| Error::Parse(format!("bad node count '{}'", parts[2])))?);
        }
        let grid = UniformGrid::new(BoxDomain::new(lower, upper)?, nodes)?;
        let names: Vec<String> = take("fields", &mut entries)?.split(',').map(str::to_string).collect();
        let mut fields: Vec<(String, Vec<f64>)> =
            names.into_iter().map(|n| (n, Vec::with_capacity(grid.len()))).collect();
        for (lineno, line) in text[body_start..].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split(',').collect();
            if toks.len() != fields.len() {
                return Err(Error::Parse(format!("data line {}: expected {} columns", lineno + 1, fields.len())));
            }
            for (tok, (_, col)) in toks.iter().zip(fields.iter_mut()) {
                col.push(tok.trim().parse().map_err(|_| Error::Parse(format!("bad number '{tok}'")))?);
            }
        }
        if fields.iter().any(|(_, c)| c.len() != grid.len()) {
            return Err(Error::Parse(format!("expected {} data rows", grid.len())));
        }
        Ok(GridTable { kind, grid, header: entries, fields })
    }
}
