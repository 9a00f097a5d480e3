//! Flat `key = value` documents: run configurations and `params.kv` files.
//!
//! Parameter keys are 1-based: `beta.<col>`, `alpha.<h>.<col>`, `b.<g>.<col>`,
//! `delta.<h>`, `Q.<k>.<h>`, `sigma`, then `pi.<g>` or `lambda0.<g>` and `lambda1`.
//! Values are written with Rust's shortest round-trip float formatting.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::ColumnMap;
use crate::error::{Error, Result};
use crate::model::{ParamSet, Priors};

/// Ordered key/value pairs parsed from text; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvDocument {
    entries: Vec<(String, String)>,
    used: BTreeSet<String>,
}

impl KvDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDocument::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", lineno + 1)));
            }
            if doc.entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Parse(format!("duplicate key `{k}`")));
            }
            doc.entries.push((k.to_string(), v.to_string()));
        }
        Ok(doc)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    /// Raw value, marking the key as consumed.
    pub fn get(&mut self, key: &str) -> Option<String> {
        let v = self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn get_parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Parse(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn get_list(&mut self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
    }

    pub fn get_usize_list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get_list(key) {
            None => Ok(None),
            Some(items) => items
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad value `{s}` in `{key}`"))))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Errors on any key never read through the getters.
    pub fn reject_unknown(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Parse(format!("unknown configuration keys: {}", unknown.join(", "))))
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// Named scalar view of a parameter set, in canonical order.
pub fn flatten_params(params: &ParamSet, columns: &ColumnMap) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (c, v) in columns.x.iter().zip(&params.beta) {
        out.push((format!("beta.{c}"), *v));
    }
    for (h, row) in params.alpha.iter().enumerate() {
        for (c, v) in columns.w.iter().zip(row) {
            out.push((format!("alpha.{}.{c}", h + 1), *v));
        }
    }
    for (g, row) in params.b.iter().enumerate() {
        for (c, v) in columns.z.iter().zip(row) {
            out.push((format!("b.{}.{c}", g + 1), *v));
        }
    }
    for (h, v) in params.delta.iter().enumerate() {
        out.push((format!("delta.{}", h + 1), *v));
    }
    for (k, row) in params.q.iter().enumerate() {
        for (h, v) in row.iter().enumerate() {
            out.push((format!("Q.{}.{}", k + 1, h + 1), *v));
        }
    }
    out.push(("sigma".into(), params.sigma));
    match &params.priors {
        Priors::Mixture(pi) => {
            for (g, v) in pi.iter().enumerate() {
                out.push((format!("pi.{}", g + 1), *v));
            }
        }
        Priors::LatentDropOut { lambda0, lambda1 } => {
            for (g, v) in lambda0.iter().enumerate() {
                out.push((format!("lambda0.{}", g + 1), *v));
            }
            out.push(("lambda1".into(), *lambda1));
        }
    }
    out
}

pub fn render_params(params: &ParamSet, columns: &ColumnMap) -> String {
    let mut s = String::new();
    for (k, v) in flatten_params(params, columns) {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn write_params_path(params: &ParamSet, columns: &ColumnMap, path: &Path) -> Result<()> {
    std::fs::write(path, render_params(params, columns))?;
    Ok(())
}

fn count_indexed(doc: &KvDocument, prefix: &str) -> usize {
    doc.entries()
        .iter()
        .filter_map(|(k, _)| k.strip_prefix(prefix))
        .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
        .max()
        .unwrap_or(0)
}

/// Rebuilds a parameter set from `params.kv` text; dimensions are inferred from
/// the keys and checked against `columns`.
pub fn parse_params(text: &str, columns: &ColumnMap) -> Result<ParamSet> {
    let mut doc = KvDocument::parse(text)?;
    let m = count_indexed(&doc, "delta.");
    let g = count_indexed(&doc, "b.");
    if m == 0 || g == 0 {
        return Err(Error::Parse("params file needs delta.<h> and b.<g> keys".into()));
    }
    let need = |doc: &mut KvDocument, key: String| -> Result<f64> {
        doc.get_parsed::<f64>(&key)?
            .ok_or_else(|| Error::Parse(format!("params file is missing `{key}`")))
    };
    let beta = columns
        .x
        .iter()
        .map(|c| need(&mut doc, format!("beta.{c}")))
        .collect::<Result<Vec<_>>>()?;
    let alpha = (1..=m)
        .map(|h| columns.w.iter().map(|c| need(&mut doc, format!("alpha.{h}.{c}"))).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let b = (1..=g)
        .map(|k| columns.z.iter().map(|c| need(&mut doc, format!("b.{k}.{c}"))).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let delta = (1..=m).map(|h| need(&mut doc, format!("delta.{h}"))).collect::<Result<Vec<_>>>()?;
    let q = (1..=m)
        .map(|k| (1..=m).map(|h| need(&mut doc, format!("Q.{k}.{h}"))).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let sigma = need(&mut doc, "sigma".into())?;
    let has_lambda = doc.entries().iter().any(|(k, _)| k == "lambda1");
    let priors = if has_lambda {
        let lambda0 = (1..g)
            .map(|k| need(&mut doc, format!("lambda0.{k}")))
            .collect::<Result<Vec<_>>>()?;
        Priors::LatentDropOut {
            lambda0,
            lambda1: need(&mut doc, "lambda1".into())?,
        }
    } else {
        Priors::Mixture((1..=g).map(|k| need(&mut doc, format!("pi.{k}"))).collect::<Result<Vec<_>>>()?)
    };
    doc.reject_unknown()?;
    let params = ParamSet {
        beta,
        alpha,
        b,
        delta,
        q,
        sigma,
        priors,
    };
    params.validate(columns.x.len(), columns.z.len(), columns.w.len())?;
    Ok(params)
}

pub fn read_params_path(path: &Path, columns: &ColumnMap) -> Result<ParamSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_params(&text, columns)
}
