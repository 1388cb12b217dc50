use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compute_dice, compute_ncc, compute_nmi, compute_volume_ml, render_montage, screen_cohort, visual_inspect,
    Direction, ElementVerdict, InspectionProtocol, Judge, MetricVector, QcError, ScreeningResult, ScreeningRule,
    VisualizationDescriptor, VizInputs, VizKind, VoxelGrid, DEFAULT_NMI_BINS,
};
use crate::agreement::Label;

/// Worker count for metric and inspection pools.
pub const DEFAULT_WORKERS: usize = 5;
/// Below this cohort size screening is skipped and everyone is inspected.
pub const SMALL_COHORT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricSource {
    /// Dice of `mask` against `reference_mask`.
    Dice,
    /// NMI of `image` against `reference_image`.
    Nmi,
    /// NCC of `image` against `reference_image`.
    Ncc,
    /// Volume of `labels` (or `mask` when no label is given).
    VolumeMl { label: Option<i64> },
    /// Taken from an ingested metric table.
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub direction: Direction,
    pub source: MetricSource,
}

impl MetricSpec {
    pub fn new(name: &str, direction: Direction, source: MetricSource) -> Self {
        Self {
            name: name.into(),
            direction,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcMode {
    /// Screen the cohort, then inspect only flagged subjects.
    Hierarchical,
    /// Flagged subjects fail; no inspection.
    MetricOnly,
    /// Inspect everyone with multi-turn cropping.
    VisualOnly,
    /// Inspect everyone with a single turn.
    VisualOneShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub name: String,
    pub metrics: Vec<MetricSpec>,
    pub rule: ScreeningRule,
    pub visualization: VizKind,
    #[serde(default = "default_bins")]
    pub nmi_bins: usize,
}

fn default_bins() -> usize {
    DEFAULT_NMI_BINS
}

fn table_metrics(names: &[(&str, Direction)]) -> Vec<MetricSpec> {
    names
        .iter()
        .map(|(n, d)| MetricSpec::new(n, *d, MetricSource::Table))
        .collect()
}

/// Default checkpoints with their screening metrics and visualization.
pub fn default_checkpoints() -> Vec<CheckpointConfig> {
    use Direction::*;
    let cp = |name: &str, metrics, rule, viz| CheckpointConfig {
        name: name.into(),
        metrics,
        rule,
        visualization: viz,
        nmi_bins: DEFAULT_NMI_BINS,
    };
    vec![
        cp(
            "raw_t1w",
            table_metrics(&[
                ("cjv", HighBad),
                ("cnr", LowBad),
                ("efc", HighBad),
                ("fber", LowBad),
                ("qi_1", HighBad),
                ("snr_total", LowBad),
                ("wm2max", Both),
            ]),
            ScreeningRule::iqr(),
            VizKind::RawMosaic,
        ),
        cp(
            "raw_bold",
            table_metrics(&[
                ("aqi", HighBad),
                ("dvars_std", HighBad),
                ("efc", HighBad),
                ("fd_mean", HighBad),
                ("gcor", HighBad),
                ("snr", LowBad),
                ("tsnr", LowBad),
            ]),
            ScreeningRule::iqr(),
            VizKind::RawMosaic,
        ),
        cp(
            "skull_strip",
            vec![MetricSpec::new("brain_volume_ml", Both, MetricSource::VolumeMl { label: None })],
            ScreeningRule::iqr(),
            VizKind::MaskContourMontage,
        ),
        cp(
            "tissue_segmentation",
            vec![
                MetricSpec::new("csf_ml", Both, MetricSource::VolumeMl { label: Some(1) }),
                MetricSpec::new("gm_ml", Both, MetricSource::VolumeMl { label: Some(2) }),
                MetricSpec::new("wm_ml", Both, MetricSource::VolumeMl { label: Some(3) }),
            ],
            ScreeningRule::iqr(),
            VizKind::SegmentationContourMontage,
        ),
        cp(
            "t1w_to_mni",
            vec![
                MetricSpec::new("nmi", LowBad, MetricSource::Nmi),
                MetricSpec::new("ncc", LowBad, MetricSource::Ncc),
            ],
            ScreeningRule::top_k(0.15),
            VizKind::TemplateContourMontage,
        ),
        cp(
            "bold_to_t1w",
            vec![
                MetricSpec::new("nmi", LowBad, MetricSource::Nmi),
                MetricSpec::new("dice", LowBad, MetricSource::Dice),
            ],
            ScreeningRule::iqr(),
            VizKind::TemplateContourMontage,
        ),
        cp(
            "bold_to_mni",
            vec![
                MetricSpec::new("nmi", LowBad, MetricSource::Nmi),
                MetricSpec::new("dice", LowBad, MetricSource::Dice),
            ],
            ScreeningRule::top_k(0.15),
            VizKind::TemplateContourMontage,
        ),
    ]
}

pub fn default_checkpoint(name: &str) -> Option<CheckpointConfig> {
    default_checkpoints().into_iter().find(|c| c.name == name)
}

/// Artifacts of one subject at one checkpoint. Unused slots stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubjectArtifacts {
    pub subject: String,
    #[serde(default)]
    pub image: Option<VoxelGrid>,
    #[serde(default)]
    pub reference_image: Option<VoxelGrid>,
    #[serde(default)]
    pub mask: Option<VoxelGrid>,
    #[serde(default)]
    pub reference_mask: Option<VoxelGrid>,
    #[serde(default)]
    pub labels: Option<VoxelGrid>,
    /// Precomputed metrics (e.g. from an ingested table).
    #[serde(default)]
    pub table: Option<MetricVector>,
}

impl SubjectArtifacts {
    pub fn new(subject: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            ..Self::default()
        }
    }

    /// Loads `<dir>/<slot>.json` for each artifact slot present.
    pub fn load_dir(subject: &str, dir: &Path) -> Result<Self, QcError> {
        let slot = |name: &str| -> Result<Option<VoxelGrid>, QcError> {
            let p = dir.join(format!("{name}.json"));
            if p.exists() {
                VoxelGrid::load(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            subject: subject.to_string(),
            image: slot("image")?,
            reference_image: slot("reference_image")?,
            mask: slot("mask")?,
            reference_mask: slot("reference_mask")?,
            labels: slot("labels")?,
            table: None,
        })
    }
}

/// Loads a cohort laid out as `<root>/<subject>/<slot>.json`.
pub fn load_cohort(root: &Path) -> Result<Vec<SubjectArtifacts>, QcError> {
    let mut dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .collect();
    dirs.sort_by_key(|e| e.file_name());
    dirs.iter()
        .map(|e| SubjectArtifacts::load_dir(&e.file_name().to_string_lossy(), &e.path()))
        .collect()
}

/// One metric for one subject; `None` when the input slots are absent.
fn metric_value(step: &CheckpointConfig, spec: &MetricSpec, a: &SubjectArtifacts) -> Option<Result<f64, QcError>> {
    match spec.source {
        MetricSource::Dice => a.mask.as_ref().zip(a.reference_mask.as_ref()).map(|(m, r)| compute_dice(m, r)),
        MetricSource::Nmi => a
            .image
            .as_ref()
            .zip(a.reference_image.as_ref())
            .map(|(i, r)| compute_nmi(i, r, step.nmi_bins)),
        MetricSource::Ncc => a.image.as_ref().zip(a.reference_image.as_ref()).map(|(i, r)| compute_ncc(i, r, None)),
        MetricSource::VolumeMl { label } => {
            let grid = if label.is_some() { a.labels.as_ref() } else { a.mask.as_ref() };
            grid.map(|g| compute_volume_ml(g, label))
        }
        MetricSource::Table => a.table.as_ref().and_then(|t| t.usable(&spec.name)).map(Ok),
    }
}

/// Computes one subject's metric vector. Metrics that cannot be computed are
/// recorded as missing.
pub fn compute_metrics(step: &CheckpointConfig, a: &SubjectArtifacts) -> MetricVector {
    let mut mv = MetricVector::new(a.subject.clone(), step.name.clone());
    for spec in &step.metrics {
        match metric_value(step, spec, a).and_then(Result::ok).filter(|v| v.is_finite()) {
            Some(v) => {
                mv.metrics.insert(spec.name.clone(), v);
            }
            None => {
                mv.missing.insert(spec.name.clone());
            }
        }
    }
    mv
}

/// Like [`compute_metrics`], but computation errors (mismatched grids,
/// degenerate inputs) are returned instead of recorded as missing.
pub fn compute_metrics_strict(step: &CheckpointConfig, a: &SubjectArtifacts) -> Result<MetricVector, QcError> {
    let mut mv = MetricVector::new(a.subject.clone(), step.name.clone());
    for spec in &step.metrics {
        match metric_value(step, spec, a).transpose()?.filter(|v| v.is_finite()) {
            Some(v) => {
                mv.metrics.insert(spec.name.clone(), v);
            }
            None => {
                mv.missing.insert(spec.name.clone());
            }
        }
    }
    Ok(mv)
}

/// Builds the subject's view for the checkpoint's visualization kind.
pub fn visualize(step: &CheckpointConfig, a: &SubjectArtifacts) -> Result<VisualizationDescriptor, QcError> {
    let (image, reference) = match step.visualization {
        VizKind::RawMosaic => (a.image.as_ref(), a.reference_mask.as_ref()),
        VizKind::MaskContourMontage => (a.image.as_ref(), a.mask.as_ref()),
        VizKind::SegmentationContourMontage => (a.labels.as_ref(), a.mask.as_ref()),
        VizKind::TemplateContourMontage => (a.image.as_ref(), a.reference_mask.as_ref()),
    };
    let image = image.ok_or_else(|| QcError::Source(format!("{}: no image to visualize", a.subject)))?;
    Ok(VisualizationDescriptor {
        subject: a.subject.clone(),
        step: step.name.clone(),
        kind: step.visualization,
        montage: render_montage(step.visualization, &VizInputs { image, reference })?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvidence {
    pub verdict: ElementVerdict,
    #[serde(default)]
    pub triggering_metrics: Vec<String>,
    #[serde(default)]
    pub visualization_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub per_step: BTreeMap<String, StepEvidence>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectVerdict {
    pub subject: String,
    pub y: Label,
    pub evidence: EvidenceBundle,
}

/// PASS iff every step is acceptable; the summary names each rejected step.
pub fn aggregate_subject_verdicts(
    subject: &str,
    per_step: BTreeMap<String, StepEvidence>,
) -> Result<SubjectVerdict, QcError> {
    if per_step.is_empty() {
        return Err(QcError::NoSteps);
    }
    for e in per_step.values() {
        e.verdict.validate()?;
    }
    let rejected: Vec<String> = per_step
        .iter()
        .filter(|(_, e)| e.verdict.is_rejected())
        .map(|(step, e)| {
            let mut s = format!("{step}: {}", e.verdict.reject_reason.as_deref().unwrap_or_default());
            if !e.triggering_metrics.is_empty() {
                s.push_str(&format!(" [{}]", e.triggering_metrics.join(", ")));
            }
            s
        })
        .collect();
    let (y, summary) = if rejected.is_empty() {
        (Label::Pass, format!("all {} step(s) acceptable", per_step.len()))
    } else {
        (Label::Fail, format!("failed {}", rejected.join("; ")))
    };
    Ok(SubjectVerdict {
        subject: subject.to_string(),
        y,
        evidence: EvidenceBundle { per_step, summary },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointReport {
    pub checkpoint: String,
    pub mode: QcMode,
    pub metrics: Vec<MetricVector>,
    pub screening: Option<ScreeningResult>,
    /// Subjects that were shown to the judge.
    pub inspected: BTreeSet<String>,
    pub verdicts: BTreeMap<String, SubjectVerdict>,
}

impl CheckpointReport {
    pub fn count(&self, label: Label) -> usize {
        self.verdicts.values().filter(|v| v.y == label).count()
    }

    pub fn failed(&self) -> BTreeSet<String> {
        self.verdicts
            .values()
            .filter(|v| v.y == Label::Fail)
            .map(|v| v.subject.clone())
            .collect()
    }

    /// `subject<TAB>verdict<TAB>summary` rows with a header.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("subject\tverdict\tsummary\n");
        for v in self.verdicts.values() {
            out.push_str(&format!("{}\t{}\t{}\n", v.subject, v.y, v.evidence.summary));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub mode: QcMode,
    pub protocol: InspectionProtocol,
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: QcMode::Hierarchical,
            protocol: InspectionProtocol::default(),
            workers: DEFAULT_WORKERS,
        }
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, QcError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| QcError::Source(e.to_string()))
}

/// Runs one checkpoint over a cohort.
pub fn run_checkpoint(
    cohort: &[SubjectArtifacts],
    step: &CheckpointConfig,
    opts: &RunOptions,
    judge: &dyn Judge,
) -> Result<CheckpointReport, QcError> {
    let workers = pool(opts.workers)?;
    let metrics: Vec<MetricVector> = workers.install(|| cohort.par_iter().map(|a| compute_metrics(step, a)).collect());
    let all: BTreeSet<String> = cohort.iter().map(|a| a.subject.clone()).collect();
    let metric_list: Vec<(String, Direction)> = step.metrics.iter().map(|m| (m.name.clone(), m.direction)).collect();

    let screening = match opts.mode {
        QcMode::Hierarchical if cohort.len() >= SMALL_COHORT => Some(screen_cohort(&metrics, &metric_list, &step.rule)?),
        QcMode::MetricOnly => Some(screen_cohort(&metrics, &metric_list, &step.rule)?),
        _ => None,
    };
    let to_inspect: BTreeSet<String> = match (opts.mode, &screening) {
        (QcMode::MetricOnly, _) => BTreeSet::new(),
        (QcMode::Hierarchical, Some(s)) => s.flagged.clone(),
        _ => all.clone(),
    };
    let protocol = match opts.mode {
        QcMode::VisualOneShot => InspectionProtocol {
            max_turns: 0,
            ..opts.protocol.clone()
        },
        _ => opts.protocol.clone(),
    };

    let inspections: Mutex<BTreeMap<String, (ElementVerdict, String)>> = Mutex::new(BTreeMap::new());
    workers.install(|| {
        cohort
            .par_iter()
            .filter(|a| to_inspect.contains(&a.subject))
            .try_for_each(|a| -> Result<(), QcError> {
                let viz = visualize(step, a)?;
                let r = visual_inspect(&viz, judge, &protocol)?;
                let viz_ref = format!("{}/{}/{}", step.name, a.subject, viz.kind);
                inspections
                    .lock()
                    .unwrap_or_else(|e| e.into_inner())
                    .insert(a.subject.clone(), (r.verdict, viz_ref));
                Ok(())
            })
    })?;
    let inspections = inspections.into_inner().unwrap_or_else(|e| e.into_inner());

    let mut verdicts = BTreeMap::new();
    for mv in &metrics {
        let s = &mv.subject;
        let triggers = screening
            .as_ref()
            .and_then(|r| r.triggers.get(s).cloned())
            .unwrap_or_default();
        let evidence = match inspections.get(s) {
            Some((v, viz_ref)) => StepEvidence {
                verdict: v.clone(),
                triggering_metrics: triggers,
                visualization_refs: vec![viz_ref.clone()],
            },
            None if opts.mode == QcMode::MetricOnly && !triggers.is_empty() => StepEvidence {
                verdict: ElementVerdict::rejected(format!("metric outlier: {}", triggers.join(", "))),
                triggering_metrics: triggers,
                visualization_refs: vec![],
            },
            None => StepEvidence {
                verdict: ElementVerdict::acceptable(),
                triggering_metrics: vec![],
                visualization_refs: vec![],
            },
        };
        let v = aggregate_subject_verdicts(s, BTreeMap::from([(step.name.clone(), evidence)]))?;
        verdicts.insert(s.clone(), v);
    }
    Ok(CheckpointReport {
        checkpoint: step.name.clone(),
        mode: opts.mode,
        metrics,
        screening,
        inspected: inspections.keys().cloned().collect(),
        verdicts,
    })
}

/// Judge wrapper that records which subjects it was asked about.
pub struct RecordingJudge<J> {
    pub inner: J,
    seen: Mutex<BTreeSet<String>>,
}

impl<J: Judge> RecordingJudge<J> {
    pub fn new(inner: J) -> Self {
        Self {
            inner,
            seen: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn seen(&self) -> BTreeSet<String> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl<J: Judge> Judge for RecordingJudge<J> {
    fn respond(&self, prompt: &super::JudgePrompt<'_>) -> Result<String, QcError> {
        self.seen
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(prompt.descriptor.subject.clone());
        self.inner.respond(prompt)
    }
}
