use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{MetricVector, QcError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HighBad,
    LowBad,
    Both,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HighBad => "high_bad",
            Direction::LowBad => "low_bad",
            Direction::Both => "both",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "high_bad" => Ok(Direction::HighBad),
            "low_bad" => Ok(Direction::LowBad),
            "both" => Ok(Direction::Both),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningKind {
    Iqr,
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningRule {
    pub kind: ScreeningKind,
    #[serde(default = "default_multiplier")]
    pub iqr_multiplier: f64,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Per-metric overrides of the checkpoint's default directions.
    #[serde(default)]
    pub directions: BTreeMap<String, Direction>,
}

fn default_multiplier() -> f64 {
    1.5
}

fn default_fraction() -> f64 {
    0.15
}

impl ScreeningRule {
    pub fn iqr() -> Self {
        Self {
            kind: ScreeningKind::Iqr,
            iqr_multiplier: default_multiplier(),
            fraction: default_fraction(),
            directions: BTreeMap::new(),
        }
    }

    pub fn top_k(fraction: f64) -> Self {
        Self {
            kind: ScreeningKind::TopK,
            fraction,
            ..Self::iqr()
        }
    }

    pub fn validate(&self) -> Result<(), QcError> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(QcError::InvalidRule(format!("fraction {} outside (0, 1]", self.fraction)));
        }
        if self.iqr_multiplier.is_nan() || self.iqr_multiplier < 0.0 {
            return Err(QcError::InvalidRule(format!("negative multiplier {}", self.iqr_multiplier)));
        }
        Ok(())
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Lower and upper Tukey hinges. For odd counts the median belongs to both
/// halves.
pub fn tukey_hinges(values: &[f64]) -> (f64, f64) {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let half = n.div_ceil(2);
    (median(&s[..half]), median(&s[n - half..]))
}

/// `(lower, upper)` fences `[Q1 - m*IQR, Q3 + m*IQR]`.
pub fn iqr_fences(values: &BTreeMap<String, f64>, multiplier: f64) -> Result<(f64, f64), QcError> {
    if values.len() < 4 {
        return Err(QcError::TooFewValues(values.len()));
    }
    let v: Vec<f64> = values.values().copied().collect();
    let (q1, q3) = tukey_hinges(&v);
    let iqr = q3 - q1;
    Ok((q1 - multiplier * iqr, q3 + multiplier * iqr))
}

/// Subjects strictly outside the fences on the side(s) given by `direction`.
pub fn screen_iqr_directional(
    values: &BTreeMap<String, f64>,
    multiplier: f64,
    direction: Direction,
) -> Result<BTreeSet<String>, QcError> {
    let (lo, hi) = iqr_fences(values, multiplier)?;
    Ok(values
        .iter()
        .filter(|(_, v)| match direction {
            Direction::HighBad => **v > hi,
            Direction::LowBad => **v < lo,
            Direction::Both => **v > hi || **v < lo,
        })
        .map(|(s, _)| s.clone())
        .collect())
}

pub fn screen_iqr(values: &BTreeMap<String, f64>, multiplier: f64) -> Result<BTreeSet<String>, QcError> {
    screen_iqr_directional(values, multiplier, Direction::Both)
}

/// `ceil(fraction * n)`, ignoring float noise just above an integer.
pub fn top_k_count(fraction: f64, n: usize) -> usize {
    (((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Flags the `ceil(fraction * N)` most abnormal subjects. Ties go to the
/// lexicographically smaller subject id.
pub fn screen_topk(values: &BTreeMap<String, f64>, fraction: f64, direction: Direction) -> BTreeSet<String> {
    if values.is_empty() {
        return BTreeSet::new();
    }
    let k = top_k_count(fraction, values.len()).max(1);
    let mut sorted: Vec<f64> = values.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let badness = |v: f64| match direction {
        Direction::HighBad => v,
        Direction::LowBad => -v,
        Direction::Both => (v - med).abs(),
    };
    let mut ranked: Vec<(&String, f64)> = values.iter().map(|(s, v)| (s, badness(*v))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().take(k).map(|(s, _)| s.clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub flagged: BTreeSet<String>,
    /// Why each flagged subject was flagged (metric names, with values).
    pub triggers: BTreeMap<String, Vec<String>>,
}

/// Screens a cohort metric by metric and takes the union of the per-metric
/// flags. Subjects missing any listed metric are flagged unconditionally.
pub fn screen_cohort(
    vectors: &[MetricVector],
    metrics: &[(String, Direction)],
    rule: &ScreeningRule,
) -> Result<ScreeningResult, QcError> {
    rule.validate()?;
    let mut out = ScreeningResult::default();
    let flag = |out: &mut ScreeningResult, s: &str, why: String| {
        out.flagged.insert(s.to_string());
        out.triggers.entry(s.to_string()).or_default().push(why);
    };
    for (name, default_dir) in metrics {
        let dir = rule.directions.get(name).copied().unwrap_or(*default_dir);
        let mut values = BTreeMap::new();
        for v in vectors {
            match v.usable(name) {
                Some(x) => {
                    values.insert(v.subject.clone(), x);
                }
                None => flag(&mut out, &v.subject, format!("{name} missing")),
            }
        }
        let hits = match rule.kind {
            ScreeningKind::Iqr => screen_iqr_directional(&values, rule.iqr_multiplier, dir)?,
            ScreeningKind::TopK => screen_topk(&values, rule.fraction, dir),
        };
        for s in hits {
            flag(&mut out, &s, format!("{name}={:.4} ({dir})", values[&s]));
        }
    }
    Ok(out)
}
