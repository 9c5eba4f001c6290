//! Checkpoint file format.
//!
//! A checkpoint is UTF-8 text made of newline-terminated key-value records.
//! The first line is the version tag `fscascade-checkpoint 1`. Each parameter
//! then contributes five records, in this order:
//!
//! ```text
//! param <name>
//! shape <d0> <d1> ...
//! data <v0> <v1> ...
//! momentum <m0> <m1> ...
//! end
//! ```
//!
//! Values are the IEEE-754 bit patterns of the `f64`s written as 16 lowercase
//! hex digits, so `load(save(store))` reproduces every bit, including `-0.0`.
//! Parameter names must not contain whitespace.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::{ParamStore, Parameter};
use crate::tensor::Tensor;

pub const VERSION_TAG: &str = "fscascade-checkpoint 1";

pub fn to_string(store: &ParamStore) -> String {
    let mut out = String::new();
    out.push_str(VERSION_TAG);
    out.push('\n');
    for p in store.iter() {
        let _ = writeln!(out, "param {}", p.name);
        out.push_str("shape");
        for d in p.tensor.shape() {
            let _ = write!(out, " {d}");
        }
        out.push_str("\ndata");
        push_bits(&mut out, p.tensor.data());
        out.push_str("\nmomentum");
        push_bits(&mut out, &p.momentum);
        out.push_str("\nend\n");
    }
    out
}

fn push_bits(out: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(out, " {:016x}", v.to_bits());
    }
}

pub fn from_str(text: &str, origin: &Path) -> Result<ParamStore> {
    let bad = |line: usize, what: &str| Error::format(origin, format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, tag)) if tag.trim() == VERSION_TAG => {}
        _ => return Err(Error::format(origin, format!("missing version tag `{VERSION_TAG}`"))),
    }
    let mut store = ParamStore::new();
    let field = |key: &str, lines: &mut dyn Iterator<Item = (usize, &str)>| -> Result<(usize, Vec<String>)> {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::format(origin, format!("unexpected end of file, expected `{key}`")))?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(bad(no, &format!("expected `{key}` record")));
        }
        Ok((no, parts.map(str::to_owned).collect()))
    };
    loop {
        let Some((no, line)) = lines.next() else { break };
        if line.trim().is_empty() {
            continue;
        }
        let name = line
            .strip_prefix("param ")
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| bad(no, "expected `param <name>` record"))?
            .to_string();
        let (sno, dims) = field("shape", &mut lines)?;
        let shape = dims
            .iter()
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(sno, &format!("bad dimension: {e}")))?;
        let (dno, data) = field("data", &mut lines)?;
        let data = parse_bits(&data).map_err(|e| bad(dno, &e))?;
        let (mno, mom) = field("momentum", &mut lines)?;
        let momentum = parse_bits(&mom).map_err(|e| bad(mno, &e))?;
        let (eno, rest) = field("end", &mut lines)?;
        if !rest.is_empty() {
            return Err(bad(eno, "trailing tokens after `end`"));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| bad(dno, &e.to_string()))?;
        if momentum.len() != tensor.len() {
            return Err(bad(mno, "momentum length differs from data length"));
        }
        store.insert(Parameter {
            name,
            tensor,
            momentum,
        })?;
    }
    Ok(store)
}

fn parse_bits(tokens: &[String]) -> std::result::Result<Vec<f64>, String> {
    tokens
        .iter()
        .map(|t| {
            u64::from_str_radix(t, 16)
                .map(f64::from_bits)
                .map_err(|e| format!("bad value `{t}`: {e}"))
        })
        .collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}
