//! Binary inter-rater agreement (Gwet's AC1) and pass-rate tables.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Pass,
    Fail,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::Pass => Label::Fail,
            Label::Fail => Label::Pass,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Pass => "PASS",
            Label::Fail => "FAIL",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PASS" => Ok(Label::Pass),
            "FAIL" => Ok(Label::Fail),
            other => Err(format!("label must be PASS or FAIL, got `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgreementError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty label vector")]
    Empty,
    #[error("item order differs between rating files at row {0}")]
    ItemMismatch(usize),
    #[error("rating file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("rating matrix needs at least one item and two raters")]
    InvalidMatrix,
}

fn check(a: &[Label], b: &[Label]) -> Result<(), AgreementError> {
    if a.len() != b.len() {
        return Err(AgreementError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(AgreementError::Empty);
    }
    Ok(())
}

pub fn observed_agreement(a: &[Label], b: &[Label]) -> Result<f64, AgreementError> {
    check(a, b)?;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(agree as f64 / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ac1 {
    pub po: f64,
    pub phat: f64,
    pub pe: f64,
    pub ac1: f64,
}

pub fn gwet_ac1(a: &[Label], b: &[Label]) -> Result<Ac1, AgreementError> {
    let po = observed_agreement(a, b)?;
    let n = a.len() as f64;
    let pass = |v: &[Label]| v.iter().filter(|l| **l == Label::Pass).count() as f64 / n;
    let phat = (pass(a) + pass(b)) / 2.0;
    let pe = 2.0 * phat * (1.0 - phat);
    Ok(Ac1 {
        po,
        phat,
        pe,
        ac1: (po - pe) / (1.0 - pe),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub rater_a: String,
    pub rater_b: String,
    #[serde(flatten)]
    pub stats: Ac1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub pairs: Vec<PairAgreement>,
    pub mean_ac1: f64,
}

/// System versus each human rater, plus the arithmetic mean of the AC1 values.
pub fn mean_agreement_report(
    system: (&str, &[Label]),
    raters: &[(&str, &[Label])],
) -> Result<AgreementReport, AgreementError> {
    if raters.is_empty() {
        return Err(AgreementError::InvalidMatrix);
    }
    let pairs = raters
        .iter()
        .map(|(name, labels)| {
            Ok(PairAgreement {
                rater_a: system.0.to_string(),
                rater_b: name.to_string(),
                stats: gwet_ac1(system.1, labels)?,
            })
        })
        .collect::<Result<Vec<_>, AgreementError>>()?;
    let mean_ac1 = pairs.iter().map(|p| p.stats.ac1).sum::<f64>() / pairs.len() as f64;
    Ok(AgreementReport { pairs, mean_ac1 })
}

/// Items by raters. Column `j` of `labels` belongs to `raters[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub items: Vec<String>,
    pub raters: Vec<String>,
    pub labels: Vec<Vec<Label>>,
}

impl RatingMatrix {
    pub fn new(items: Vec<String>, raters: Vec<String>, labels: Vec<Vec<Label>>) -> Result<Self, AgreementError> {
        if items.is_empty() || raters.is_empty() {
            return Err(AgreementError::InvalidMatrix);
        }
        for row in &labels {
            if row.len() != raters.len() {
                return Err(AgreementError::LengthMismatch(row.len(), raters.len()));
            }
        }
        if labels.len() != items.len() {
            return Err(AgreementError::LengthMismatch(labels.len(), items.len()));
        }
        Ok(Self { items, raters, labels })
    }

    /// Builds a matrix from per-rater columns sharing the same item order.
    pub fn from_columns(items: Vec<String>, columns: Vec<(String, Vec<Label>)>) -> Result<Self, AgreementError> {
        let mut labels = vec![Vec::with_capacity(columns.len()); items.len()];
        for (_, col) in &columns {
            if col.len() != items.len() {
                return Err(AgreementError::LengthMismatch(col.len(), items.len()));
            }
            for (row, l) in labels.iter_mut().zip(col) {
                row.push(*l);
            }
        }
        Self::new(items, columns.into_iter().map(|c| c.0).collect(), labels)
    }

    pub fn column(&self, j: usize) -> Vec<Label> {
        self.labels.iter().map(|row| row[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRate {
    pub rater: String,
    pub passed: usize,
    pub total: usize,
}

impl PassRate {
    /// Percentage rendered to one decimal. Ties round to the even digit, which
    /// is how the reference tables render exact .x5 values.
    pub fn percent_display(&self) -> String {
        // tenths of a percent, as an exact rational: passed * 1000 / total
        let num = self.passed as u128 * 1000;
        let den = self.total as u128;
        let mut q = num / den;
        let r2 = (num % den) * 2;
        if r2 > den || (r2 == den && q % 2 == 1) {
            q += 1;
        }
        format!("{}.{}", q / 10, q % 10)
    }
}

impl fmt::Display for PassRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}% ({}/{})", self.percent_display(), self.passed, self.total)
    }
}

pub fn pass_rate_table(matrix: &RatingMatrix) -> Vec<PassRate> {
    (0..matrix.raters.len())
        .map(|j| PassRate {
            rater: matrix.raters[j].clone(),
            passed: matrix.labels.iter().filter(|row| row[j] == Label::Pass).count(),
            total: matrix.items.len(),
        })
        .collect()
}

/// Reads an `item_id,label` CSV.
pub fn read_ratings(path: &Path) -> Result<(Vec<String>, Vec<Label>), AgreementError> {
    let err = |reason: String| AgreementError::Parse {
        path: path.display().to_string(),
        reason,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["item_id", "label"] {
        return Err(err("header must be `item_id,label`".into()));
    }
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        items.push(rec[0].trim().to_string());
        labels.push(rec[1].parse().map_err(err)?);
    }
    Ok((items, labels))
}

/// Aligns a rater's file to a reference item order.
pub fn align(reference: &[String], items: &[String], labels: Vec<Label>) -> Result<Vec<Label>, AgreementError> {
    if reference.len() != items.len() {
        return Err(AgreementError::LengthMismatch(reference.len(), items.len()));
    }
    if let Some(i) = reference.iter().zip(items).position(|(a, b)| a != b) {
        return Err(AgreementError::ItemMismatch(i + 1));
    }
    Ok(labels)
}

pub const REPORT_HEADER: &str = "checkpoint\trater\tPo\tphat\tPe\tAC1\tmean_AC1";

/// One TSV row per pair; `mean_AC1` repeats the report mean on each row.
pub fn report_rows(checkpoint: &str, report: &AgreementReport) -> Vec<String> {
    report
        .pairs
        .iter()
        .map(|p| {
            format!(
                "{checkpoint}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.rater_b, p.stats.po, p.stats.phat, p.stats.pe, p.stats.ac1, report.mean_ac1
            )
        })
        .collect()
}
