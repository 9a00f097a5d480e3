//! Unbalanced longitudinal panels with monotone drop-out.
//!
//! Each unit contributes `T_i` consecutive occasions `1..=T_i`. Every occasion
//! carries a response and three covariate blocks: `x` (fixed effects), `z`
//! (time-constant random effects) and `w` (state-dependent effects). Blocks are
//! filled from named CSV columns; the same column may feed more than one block.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Named columns populating the three covariate blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ColumnMap {
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub w: Vec<String>,
}

impl ColumnMap {
    pub fn new<S: AsRef<str>>(x: &[S], z: &[S], w: &[S]) -> Self {
        let own = |v: &[S]| v.iter().map(|s| s.as_ref().to_string()).collect();
        Self {
            x: own(x),
            z: own(z),
            w: own(w),
        }
    }

    /// Distinct column names in first-seen order across x, z, w.
    pub fn distinct(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.x.iter().chain(&self.z).chain(&self.w) {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
        out
    }

    /// Columns declared in both x and z. Only `beta + b_g` is identified for these.
    pub fn shared_xz(&self) -> Vec<String> {
        self.z
            .iter()
            .filter(|c| self.x.contains(c))
            .cloned()
            .collect()
    }
}

/// One raw long-format record before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub unit: String,
    pub time: i64,
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Occasion {
    pub y: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub label: String,
    pub occasions: Vec<Occasion>,
}

impl Unit {
    pub fn len(&self) -> usize {
        self.occasions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occasions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    columns: ColumnMap,
    units: Vec<Unit>,
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit(&self, i: usize) -> &Unit {
        &self.units[i]
    }

    /// Number of observed occasions of unit `i`.
    pub fn t_len(&self, i: usize) -> usize {
        self.units[i].occasions.len()
    }

    pub fn max_t(&self) -> usize {
        self.units.iter().map(Unit::len).max().unwrap_or(0)
    }

    pub fn total_obs(&self) -> usize {
        self.units.iter().map(Unit::len).sum()
    }

    pub fn columns(&self) -> &ColumnMap {
        &self.columns
    }

    pub fn p(&self) -> usize {
        self.columns.x.len()
    }

    pub fn r(&self) -> usize {
        self.columns.z.len()
    }

    pub fn d(&self) -> usize {
        self.columns.w.len()
    }

    /// Builds a dataset from the listed unit indices (repeats allowed), relabelling
    /// copies so that every resampled unit stays distinct.
    pub fn resample(&self, indices: &[usize]) -> PanelDataset {
        let units = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| Unit {
                label: format!("{}#{}", self.units[i].label, k),
                occasions: self.units[i].occasions.clone(),
            })
            .collect();
        PanelDataset {
            columns: self.columns.clone(),
            units,
        }
    }

    /// Validates long-format records. Units are indexed densely in order of first appearance.
    pub fn from_records(columns: ColumnMap, records: Vec<RawRecord>) -> Result<Self> {
        let (p, r, d) = (columns.x.len(), columns.z.len(), columns.w.len());
        let mut order: Vec<String> = Vec::new();
        let mut grouped: HashMap<String, Vec<RawRecord>> = HashMap::new();
        for rec in records {
            if rec.x.len() != p || rec.z.len() != r || rec.w.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "unit {} time {}: expected (p, r, d) = ({p}, {r}, {d}), got ({}, {}, {})",
                    rec.unit,
                    rec.time,
                    rec.x.len(),
                    rec.z.len(),
                    rec.w.len()
                )));
            }
            let finite = rec.y.is_finite()
                && rec.x.iter().chain(&rec.z).chain(&rec.w).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteValue(format!(
                    "unit {} time {}",
                    rec.unit, rec.time
                )));
            }
            if !grouped.contains_key(&rec.unit) {
                order.push(rec.unit.clone());
            }
            grouped.entry(rec.unit.clone()).or_default().push(rec);
        }

        let mut units = Vec::with_capacity(order.len());
        for label in order {
            let mut recs = grouped.remove(&label).unwrap_or_default();
            recs.sort_by_key(|r| r.time);
            for pair in recs.windows(2) {
                if pair[0].time == pair[1].time {
                    return Err(Error::DuplicateOccasion {
                        unit: label,
                        time: pair[0].time,
                    });
                }
            }
            for (k, rec) in recs.iter().enumerate() {
                let expected = k as i64 + 1;
                if rec.time != expected {
                    return Err(Error::NonMonotoneDropout {
                        unit: label,
                        expected,
                        found: rec.time,
                    });
                }
            }
            let occasions = recs
                .into_iter()
                .map(|r| Occasion {
                    y: r.y,
                    x: r.x,
                    z: r.z,
                    w: r.w,
                })
                .collect();
            units.push(Unit { label, occasions });
        }
        if units.is_empty() {
            return Err(Error::DimensionMismatch("dataset has no units".into()));
        }
        Ok(PanelDataset { columns, units })
    }

    /// Flattens back into long-format records (unit labels preserved).
    pub fn to_records(&self) -> Vec<RawRecord> {
        let mut out = Vec::with_capacity(self.total_obs());
        for u in &self.units {
            for (t, o) in u.occasions.iter().enumerate() {
                out.push(RawRecord {
                    unit: u.label.clone(),
                    time: t as i64 + 1,
                    y: o.y,
                    x: o.x.clone(),
                    z: o.z.clone(),
                    w: o.w.clone(),
                });
            }
        }
        out
    }

    /// Reads `unit,time,y,<cols...>` CSV, pulling the blocks named in `columns`.
    pub fn read_csv<R: Read>(reader: R, columns: ColumnMap) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let unit_ix = find("unit")?;
        let time_ix = find("time")?;
        let y_ix = find("y")?;
        let lookup = |names: &[String]| -> Result<Vec<usize>> {
            names.iter().map(|n| find(n)).collect()
        };
        let (xi, zi, wi) = (
            lookup(&columns.x)?,
            lookup(&columns.z)?,
            lookup(&columns.w)?,
        );

        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let num = |ix: usize| -> Result<f64> {
                let s = row.get(ix).unwrap_or("");
                s.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "row {}: column `{}` is not numeric: `{s}`",
                        line + 2,
                        header[ix]
                    ))
                })
            };
            let time_s = row.get(time_ix).unwrap_or("");
            let time = time_s.parse::<i64>().map_err(|_| {
                Error::Parse(format!("row {}: time is not an integer: `{time_s}`", line + 2))
            })?;
            records.push(RawRecord {
                unit: row.get(unit_ix).unwrap_or("").to_string(),
                time,
                y: num(y_ix)?,
                x: xi.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                z: zi.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                w: wi.iter().map(|&i| num(i)).collect::<Result<_>>()?,
            });
        }
        Self::from_records(columns, records)
    }

    pub fn read_csv_path(path: &Path, columns: ColumnMap) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(f, columns)
    }

    /// Writes the long format with each distinct column emitted once.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let names = self.columns.distinct();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string(), "time".into(), "y".into()];
        header.extend(names.iter().cloned());
        wtr.write_record(&header)?;
        for u in &self.units {
            for (t, o) in u.occasions.iter().enumerate() {
                let mut row = vec![u.label.clone(), (t + 1).to_string(), o.y.to_string()];
                for name in &names {
                    row.push(self.value_of(o, name).to_string());
                }
                wtr.write_record(&row)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    fn value_of(&self, o: &Occasion, name: &str) -> f64 {
        let c = &self.columns;
        if let Some(j) = c.x.iter().position(|n| n == name) {
            o.x[j]
        } else if let Some(j) = c.z.iter().position(|n| n == name) {
            o.z[j]
        } else {
            let j = c.w.iter().position(|n| n == name).expect("column in map");
            o.w[j]
        }
    }
}
