//! Wide CSV reports: one row per replicate seed and a final `mean` row.

use std::fmt::Write as _;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

/// Ordered `(column, value)` pairs measured for one seed.
pub type Row = Vec<(String, f64)>;

impl Report {
    pub fn push(&mut self, seed: u64, row: Row) -> Result<()> {
        let names: Vec<String> = row.iter().map(|(n, _)| n.clone()).collect();
        if self.rows.is_empty() {
            self.columns = names;
        } else if names != self.columns {
            return Err(CliError::Usage(format!("seed {seed} produced columns {names:?}, expected {:?}", self.columns)));
        }
        self.rows.push((seed, row.into_iter().map(|(_, v)| v).collect()));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn values(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.column(name)?;
        Some(self.rows.iter().map(|(_, r)| r[k]).collect())
    }

    /// Mean of a column over seeds.
    pub fn mean(&self, name: &str) -> Option<f64> {
        let v = self.values(name)?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let line = |out: &mut String, key: &str, vals: &[f64]| {
            out.push_str(key);
            for v in vals {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        };
        for (seed, vals) in &self.rows {
            line(&mut out, &seed.to_string(), vals);
        }
        let means: Vec<f64> = self.columns.iter().filter_map(|c| self.mean(c)).collect();
        line(&mut out, "mean", &means);
        out
    }
}

/// Column-safe rendering of a number or phrase: `0.25` → `0.25`, `"a photo of"` → `a_photo_of`.
pub fn slug(text: &str) -> String {
    let s: String = text
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "empty".into()
    } else {
        s
    }
}
