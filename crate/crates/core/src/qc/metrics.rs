use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{QcError, VoxelGrid};

pub const DEFAULT_NMI_BINS: usize = 64;

fn is_set(v: f64) -> bool {
    v != 0.0
}

pub fn compute_dice(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64, QcError> {
    a.same_dims(b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.values.iter().zip(&b.values) {
        let (x, y) = (is_set(*x), is_set(*y));
        na += usize::from(x);
        nb += usize::from(y);
        both += usize::from(x && y);
    }
    if na + nb == 0 {
        return Err(QcError::BothEmpty);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

fn bin_indices(values: &[f64], bins: usize) -> Vec<usize> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = max - min;
    values
        .iter()
        .map(|v| {
            if width > 0.0 {
                (((v - min) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|c| *c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `2 I(A;B) / (H(A) + H(B))` over a joint
/// histogram with equal-width bins spanning each image's own range.
pub fn compute_nmi(a: &VoxelGrid, b: &VoxelGrid, bins: usize) -> Result<f64, QcError> {
    a.same_dims(b)?;
    if bins < 2 {
        return Err(QcError::InvalidRule(format!("bins must be >= 2, got {bins}")));
    }
    if a.is_empty() {
        return Err(QcError::DegenerateEntropy);
    }
    let ia = bin_indices(&a.values, bins);
    let ib = bin_indices(&b.values, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut ca = vec![0usize; bins];
    let mut cb = vec![0usize; bins];
    for (x, y) in ia.iter().zip(&ib) {
        joint[x * bins + y] += 1;
        ca[*x] += 1;
        cb[*y] += 1;
    }
    let n = a.len() as f64;
    let ha = entropy(ca.into_iter(), n);
    let hb = entropy(cb.into_iter(), n);
    let hab = entropy(joint.into_iter(), n);
    if ha + hb == 0.0 {
        return Err(QcError::DegenerateEntropy);
    }
    let mi = ha + hb - hab;
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Pearson correlation over all voxels, or over voxels where `mask` is set.
pub fn compute_ncc(a: &VoxelGrid, b: &VoxelGrid, mask: Option<&VoxelGrid>) -> Result<f64, QcError> {
    a.same_dims(b)?;
    if let Some(m) = mask {
        a.same_dims(m)?;
    }
    let pairs: Vec<(f64, f64)> = a
        .values
        .iter()
        .zip(&b.values)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| is_set(m.values[*i])))
        .map(|(_, (x, y))| (*x, *y))
        .collect();
    if pairs.is_empty() {
        return Err(QcError::ZeroVariance);
    }
    let n = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(QcError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Volume in milliliters of nonzero voxels, or of voxels equal to `label`.
pub fn compute_volume_ml(mask: &VoxelGrid, label: Option<i64>) -> Result<f64, QcError> {
    let count = match label {
        None => mask.values.iter().filter(|v| is_set(**v)).count(),
        Some(l) => {
            let c = mask.values.iter().filter(|v| v.round() as i64 == l && v.fract() == 0.0).count();
            if c == 0 {
                return Err(QcError::LabelAbsent(l));
            }
            c
        }
    };
    Ok(count as f64 * mask.voxel_volume_mm3() / 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub subject: String,
    pub step: String,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default)]
    pub missing: BTreeSet<String>,
}

impl MetricVector {
    pub fn new(subject: impl Into<String>, step: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            step: step.into(),
            metrics: BTreeMap::new(),
            missing: BTreeSet::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    /// A metric counts as usable only when present and finite.
    pub fn usable(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().filter(|v| v.is_finite())
    }
}

const SUBJECT_COLUMNS: [&str; 3] = ["subject_id", "subject", "bids_name"];

/// Reads a metric table (TSV, or JSON array of objects) into one vector per
/// row. Blank or `n/a` cells go to `missing`.
pub fn ingest_metric_table(path: &Path, step: &str) -> Result<Vec<MetricVector>, QcError> {
    let text = std::fs::read_to_string(path)?;
    let perr = |reason: String| QcError::ParseError {
        path: path.display().to_string(),
        reason,
    };
    let is_json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('[');
    let rows: Vec<BTreeMap<String, String>> = if is_json {
        let v: Vec<serde_json::Map<String, Value>> = serde_json::from_str(&text).map_err(|e| perr(e.to_string()))?;
        v.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|(k, v)| {
                        let s = match v {
                            Value::Null => String::new(),
                            Value::String(s) => s,
                            other => other.to_string(),
                        };
                        (k, s)
                    })
                    .collect()
            })
            .collect()
    } else {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or(QcError::NoSubjectColumn)?
            .split('\t')
            .map(|h| h.trim().to_string())
            .collect();
        lines
            .enumerate()
            .map(|(i, line)| {
                let cells: Vec<&str> = line.split('\t').collect();
                if cells.len() > header.len() {
                    return Err(perr(format!("row {} has {} cells, header has {}", i + 2, cells.len(), header.len())));
                }
                Ok(header
                    .iter()
                    .enumerate()
                    .map(|(j, h)| (h.clone(), cells.get(j).map_or("", |c| c.trim()).to_string()))
                    .collect())
            })
            .collect::<Result<_, _>>()?
    };
    let Some(first) = rows.first() else {
        return Ok(Vec::new());
    };
    let id_col = SUBJECT_COLUMNS
        .iter()
        .find(|c| first.contains_key(**c))
        .ok_or(QcError::NoSubjectColumn)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let subject = row.get(*id_col).cloned().unwrap_or_default();
        if subject.is_empty() {
            return Err(perr(format!("row {} has an empty subject id", i + 1)));
        }
        let mut mv = MetricVector::new(subject, step);
        for (k, v) in row {
            if SUBJECT_COLUMNS.contains(&k.as_str()) {
                continue;
            }
            if v.is_empty() || v.eq_ignore_ascii_case("n/a") || v.eq_ignore_ascii_case("nan") {
                mv.missing.insert(k.clone());
                continue;
            }
            // non-numeric descriptive columns are ignored
            if let Ok(x) = v.parse::<f64>() {
                mv.metrics.insert(k.clone(), x);
            }
        }
        out.push(mv);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(values: &[f64]) -> VoxelGrid {
        VoxelGrid::new([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = line(&[1., 1., 1., 1., 1., 1., 0., 0., 0.]);
        let b = line(&[0., 0., 0., 1., 1., 1., 1., 0., 0.]);
        assert!((compute_dice(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(compute_dice(&a, &a).unwrap(), 1.0);
        let c = line(&[0., 0., 0., 0., 0., 0., 0., 1., 1.]);
        assert_eq!(compute_dice(&a, &c).unwrap(), 0.0);
        let z = line(&[0.; 9]);
        assert!(matches!(compute_dice(&z, &z), Err(QcError::BothEmpty)));
        assert!(matches!(compute_dice(&z, &line(&[0.; 3])), Err(QcError::DimMismatch(..))));
    }

    #[test]
    fn nmi_examples() {
        let a = line(&[0., 0., 1., 1.]);
        let b = line(&[0., 1., 0., 1.]);
        assert!(compute_nmi(&a, &b, 2).unwrap().abs() < 1e-12);
        assert!((compute_nmi(&a, &a, 64).unwrap() - 1.0).abs() < 1e-12);
        let c = line(&[3.; 4]);
        assert!(matches!(compute_nmi(&c, &c, 8), Err(QcError::DegenerateEntropy)));
        assert_eq!(compute_nmi(&a, &c, 8).unwrap(), 0.0);
    }

    #[test]
    fn ncc_examples() {
        let a = line(&[1., 4., 2., 8., 5., 7., 3., 6.]);
        let b = line(&a.values.iter().map(|v| 2.0 * v + 3.0).collect::<Vec<_>>());
        assert!((compute_ncc(&a, &b, None).unwrap() - 1.0).abs() < 1e-12);
        let n = line(&a.values.iter().map(|v| -v).collect::<Vec<_>>());
        assert!((compute_ncc(&a, &n, None).unwrap() + 1.0).abs() < 1e-12);
        // hand-evaluated Pearson on 8 values
        let c = line(&[2., 1., 4., 3., 6., 5., 8., 7.]);
        let x = [1., 4., 2., 8., 5., 7., 3., 6.];
        let y = [2., 1., 4., 3., 6., 5., 8., 7.];
        let (mx, my) = (4.5, 4.5);
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        let expected = sxy / (sxx * syy).sqrt();
        assert!((compute_ncc(&a, &c, None).unwrap() - expected).abs() < 1e-12);
        assert!(matches!(
            compute_ncc(&a, &line(&[1.; 8]), None),
            Err(QcError::ZeroVariance)
        ));
    }

    #[test]
    fn volume_examples() {
        let empty = VoxelGrid::zeros([4, 4, 4], [1.0; 3]);
        assert_eq!(compute_volume_ml(&empty, None).unwrap(), 0.0);
        let mut m = VoxelGrid::zeros([4, 4, 4], [2.0; 3]);
        for i in 0..7 {
            m.values[i * 3] = 1.0;
        }
        assert!((compute_volume_ml(&m, None).unwrap() - 0.056).abs() < 1e-12);
        let labels = VoxelGrid::from_fn([10, 10, 3], [1.0; 3], |_, _, z| (z + 1) as f64);
        assert!((compute_volume_ml(&labels, Some(2)).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(compute_volume_ml(&labels, Some(4)), Err(QcError::LabelAbsent(4))));
    }

    #[test]
    fn ingest_tsv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t1w.tsv");
        std::fs::write(&p, "bids_name\tcjv\tsnr_total\nsub-01\t0.4\t10.1\nsub-02\t0.5\t\nsub-03\t0.45\t9.0\n").unwrap();
        let v = ingest_metric_table(&p, "raw").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v[0].metrics.len(), 2);
        assert_eq!(v[1].missing, BTreeSet::from(["snr_total".to_string()]));
        assert!(v.iter().all(|m| m.metrics.keys().all(|k| !m.missing.contains(k))));

        std::fs::write(&p, "name\tcjv\nsub-01\t0.4\n").unwrap();
        assert!(matches!(ingest_metric_table(&p, "raw"), Err(QcError::NoSubjectColumn)));

        let j = dir.path().join("m.json");
        std::fs::write(&j, r#"[{"subject_id":"s1","dice":0.9,"nmi":null}]"#).unwrap();
        let v = ingest_metric_table(&j, "coreg").unwrap();
        assert_eq!(v[0].metrics["dice"], 0.9);
        assert!(v[0].missing.contains("nmi"));
    }
}
