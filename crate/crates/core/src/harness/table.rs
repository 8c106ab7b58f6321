use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One level of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub boundary_edges: usize,
    /// `||u - u_h||_{L2(Gamma)}`.
    pub control_error: f64,
    /// `||y - y_h||_{L2(Omega)}`.
    pub state_error: f64,
    /// `||d_n theta - theta_h||_{L2(Gamma)}`.
    pub flux_error: f64,
    /// Best-approximation error of piecewise constants for a smooth boundary function.
    pub p0_error: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Seconds.
    pub wall_time: f64,
}

/// Experimental orders `log(e_k / e_{k+1}) / log(h_k / h_{k+1})`; the first entry is `None`.
pub fn eoc(h: &[f64], e: &[f64]) -> Vec<Option<f64>> {
    let mut out = vec![None];
    for k in 1..e.len() {
        out.push(Some((e[k - 1] / e[k]).log2() / (h[k - 1] / h[k]).log2()));
    }
    out
}

/// Rows of a convergence study, coarsest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

/// Context written alongside a table in JSON form.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StudyMeta {
    pub flags: BTreeMap<String, String>,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

const METRICS: [&str; 4] = ["control_error", "state_error", "flux_error", "p0_error"];

const HEADER: &str = "level,h,boundary_edges,control_error,control_eoc,state_error,state_eoc,\
flux_error,flux_eoc,p0_error,p0_eoc,kkt_residual,iterations,wall_time";

fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

impl ConvergenceTable {
    pub fn h(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.h).collect()
    }

    pub fn metric(&self, name: &str) -> Option<Vec<f64>> {
        let get: fn(&ConvergenceRow) -> f64 = match name {
            "control_error" => |r| r.control_error,
            "state_error" => |r| r.state_error,
            "flux_error" => |r| r.flux_error,
            "p0_error" => |r| r.p0_error,
            "kkt_residual" => |r| r.kkt_residual,
            _ => return None,
        };
        Some(self.rows.iter().map(get).collect())
    }

    pub fn eoc(&self, name: &str) -> Option<Vec<Option<f64>>> {
        Some(eoc(&self.h(), &self.metric(name)?))
    }

    /// Header plus one line per row; reals in 17-significant-digit scientific
    /// notation, rates empty on the first row.
    pub fn to_csv(&self) -> String {
        let rates: Vec<Vec<Option<f64>>> = METRICS.iter().map(|m| self.eoc(m).unwrap()).collect();
        let mut s = String::from(HEADER);
        s.push('\n');
        for (k, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.level,
                fmt_real(r.h),
                r.boundary_edges,
                fmt_real(r.control_error),
                fmt_opt(rates[0][k]),
                fmt_real(r.state_error),
                fmt_opt(rates[1][k]),
                fmt_real(r.flux_error),
                fmt_opt(rates[2][k]),
                fmt_real(r.p0_error),
                fmt_opt(rates[3][k]),
                fmt_real(r.kkt_residual),
                r.iterations,
                fmt_real(r.wall_time),
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        if header.trim() != HEADER {
            return Err(Error::Parse(format!("unexpected CSV header: {header}")));
        }
        let real = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(format!("bad integer {s:?}: {e}")));
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(Error::Parse(format!("expected 14 fields, got {}: {line}", f.len())));
            }
            rows.push(ConvergenceRow {
                level: int(f[0])?,
                h: real(f[1])?,
                boundary_edges: int(f[2])?,
                control_error: real(f[3])?,
                state_error: real(f[5])?,
                flux_error: real(f[7])?,
                p0_error: real(f[9])?,
                kkt_residual: real(f[11])?,
                iterations: int(f[12])?,
                wall_time: real(f[13])?,
            });
        }
        Ok(ConvergenceTable { rows })
    }

    /// `{"meta": ..., "rows": [...]}`; each row carries the CSV columns.
    pub fn to_json(&self, meta: &StudyMeta) -> String {
        let rates: Vec<Vec<Option<f64>>> = METRICS.iter().map(|m| self.eoc(m).unwrap()).collect();
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let mut v = serde_json::to_value(r).expect("rows serialize");
                let obj = v.as_object_mut().unwrap();
                for (m, rate) in METRICS.iter().zip(&rates) {
                    let key = format!("{}_eoc", m.trim_end_matches("_error"));
                    obj.insert(key, rate[k].map_or(serde_json::Value::Null, serde_json::Value::from));
                }
                v
            })
            .collect();
        let doc = serde_json::json!({ "meta": meta, "rows": rows });
        serde_json::to_string_pretty(&doc).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<(Self, StudyMeta)> {
        #[derive(Deserialize)]
        struct Doc {
            meta: StudyMeta,
            rows: Vec<ConvergenceRow>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok((ConvergenceTable { rows: doc.rows }, doc.meta))
    }

    /// Copy with the wall-clock column zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.rows.iter_mut().for_each(|r| r.wall_time = 0.0);
        t
    }
}
