//! CSV files of a run and the β table built from them.

use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use crate::metrics::ErrorReport;
use crate::optimizer::CurveRow;

pub const CURVE_FILE: &str = "curve.csv";
pub const FINAL_FILE: &str = "final.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub const CURVE_HEADER: [&str; 9] = [
    "epoch",
    "loss_total",
    "loss_interior",
    "loss_dirichlet_penalty",
    "loss_dirichlet_consistency",
    "loss_neumann",
    "e_L2",
    "e_H1",
    "e_H1_semi",
];

pub const FINAL_HEADER: [&str; 5] = ["problem", "beta", "p", "e_L2", "e_H1"];

/// Streams `curve.csv`, flushing after each row.
pub struct CurveWriter {
    inner: csv::Writer<File>,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        inner.write_record(CURVE_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &CurveRow) -> Result<()> {
        let l = row.loss;
        let e = row.errors;
        let mut fields = vec![row.epoch.to_string()];
        fields.extend(
            [
                l.total,
                l.interior,
                l.dirichlet_penalty,
                l.dirichlet_consistency,
                l.neumann,
                e.e_l2,
                e.e_h1,
                e.e_h1_semi,
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        self.inner.write_record(&fields)?;
        self.inner.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalRow {
    pub problem: String,
    pub beta: f64,
    pub p: Option<f64>,
    pub e_l2: f64,
    pub e_h1: f64,
}

impl FinalRow {
    pub fn new(problem: &str, beta: f64, p: Option<f64>, errors: &ErrorReport) -> Self {
        Self {
            problem: problem.to_string(),
            beta,
            p,
            e_l2: errors.e_l2,
            e_h1: errors.e_h1,
        }
    }

    /// Problem name with `p` when present, used to group table rows.
    pub fn group(&self) -> String {
        match self.p {
            Some(p) => format!("{} (p={p})", self.problem),
            None => self.problem.clone(),
        }
    }
}

pub fn write_final(path: &Path, row: &FinalRow) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(FINAL_HEADER)?;
    w.write_record([
        row.problem.clone(),
        row.beta.to_string(),
        row.p.map(|p| p.to_string()).unwrap_or_default(),
        row.e_l2.to_string(),
        row.e_h1.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

pub fn read_final(path: &Path) -> Result<Vec<FinalRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != FINAL_HEADER {
        bail!("{}: unexpected header {:?}", path.display(), headers);
    }
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse()
                .map_err(|_| anyhow!("{}: bad number {:?}", path.display(), &record[i]))
        };
        rows.push(FinalRow {
            problem: record[0].to_string(),
            beta: num(1)?,
            p: if record[2].is_empty() { None } else { Some(num(2)?) },
            e_l2: num(3)?,
            e_h1: num(4)?,
        });
    }
    Ok(rows)
}

/// `3.925e-02`: three decimals and a signed two-digit exponent.
pub fn sci(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let s = format!("{v:.3e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// β against `(e_L2, e_H1)`, one block per problem in order of first
/// appearance, rows sorted by β.
pub fn format_table(rows: &[FinalRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} & {:<11} & {:<11}", "beta", "e_L2", "e_H1");
    let mut groups: Vec<String> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group()) {
            groups.push(r.group());
        }
    }
    for g in groups {
        let _ = writeln!(out, "% {g}");
        let mut block: Vec<&FinalRow> = rows.iter().filter(|r| r.group() == g).collect();
        block.sort_by(|a, b| a.beta.total_cmp(&b.beta));
        for r in block {
            let _ = writeln!(
                out,
                "{:<10} & {:<11} & {:<11}",
                r.beta,
                sci(r.e_l2),
                sci(r.e_h1)
            );
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scientific_format() {
        assert_eq!(sci(0.03925), "3.925e-02");
        assert_eq!(sci(2.036e-2), "2.036e-02");
        assert_eq!(sci(1.0), "1.000e+00");
        assert_eq!(sci(123.4), "1.234e+02");
        assert_eq!(sci(5.85e-3), "5.850e-03");
    }

    fn row(problem: &str, p: Option<f64>, beta: f64, e: f64) -> FinalRow {
        FinalRow {
            problem: problem.into(),
            beta,
            p,
            e_l2: e,
            e_h1: 2.0 * e,
        }
    }

    #[test]
    fn table_layout() {
        let empty = format_table(&[]);
        assert_eq!(empty.lines().count(), 1);
        assert!(empty.starts_with("beta"));
        let rows = vec![
            row("mixed2d", None, 2000.0, 0.02),
            row("crack2d", None, 500.0, 0.005),
            row("mixed2d", None, 500.0, 0.04),
            row("mixed2d", None, 1000.0, 0.03),
        ];
        let t = format_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 1 + 4 + 2);
        assert_eq!(lines[1], "% mixed2d");
        assert!(lines[2].starts_with("500 "));
        assert!(lines[2].contains("4.000e-02") && lines[2].contains("8.000e-02"));
        assert!(lines[4].starts_with("2000 "));
        assert_eq!(lines[5], "% crack2d");
    }

    #[test]
    fn final_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(FINAL_FILE);
        for r in [row("mixed2d", None, 2000.0, 0.1234567), row("plap_smooth", Some(2.4), 500.0, 1e-3)] {
            write_final(&path, &r).unwrap();
            assert_eq!(read_final(&path).unwrap(), vec![r]);
        }
    }
}
