//! Deterministic synthetic fixtures: phantom cohorts, a 40-card registry and
//! a scripted end-to-end episode over mock primitives.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::action::AgentRole;
use crate::policy::{write_script, DecisionPoint, ScriptRecord, Usage};
use crate::qc::{MetricVector, QcError, SubjectArtifacts, VoxelGrid};
use crate::registry::{Family, PrimitiveCard, Registry};
use crate::runtime::{DatasetRef, Objective};

pub const PHANTOM_DIMS: [usize; 3] = [16, 16, 16];

/// Ellipsoidal head phantom, brightest at the centre, displaced by `shift` voxels.
pub fn phantom(shift: [i64; 3], scale: f64) -> VoxelGrid {
    let [nx, ny, nz] = PHANTOM_DIMS;
    let radii = [5.0 * scale, 6.0 * scale, 5.0 * scale];
    VoxelGrid::from_fn(PHANTOM_DIMS, [2.0, 2.0, 2.0], |x, y, z| {
        let c = [
            x as f64 - (nx / 2) as f64 - shift[0] as f64,
            y as f64 - (ny / 2) as f64 - shift[1] as f64,
            z as f64 - (nz / 2) as f64 - shift[2] as f64,
        ];
        let r2: f64 = c.iter().zip(radii).map(|(d, r)| (d / r).powi(2)).sum();
        if r2 < 1.0 {
            100.0 * (1.0 - r2)
        } else {
            0.0
        }
    })
}

/// The region a contour montage draws for `image`.
pub fn region(image: &VoxelGrid) -> VoxelGrid {
    image.threshold(0.5 * image.max())
}

/// Keeps the first voxels of `mask` (in storage order) so that its Dice
/// against the original is as close as possible to `dice`.
pub fn erode_to_dice(mask: &VoxelGrid, dice: f64) -> VoxelGrid {
    let n = mask.values.iter().filter(|v| **v != 0.0).count();
    // dice = 2m / (n + m)
    let keep = ((dice * n as f64) / (2.0 - dice)).round() as usize;
    let mut out = mask.clone();
    let mut kept = 0;
    for v in &mut out.values {
        if *v != 0.0 {
            if kept < keep {
                kept += 1;
            } else {
                *v = 0.0;
            }
        }
    }
    out
}

/// Removes the last `k` voxels of `mask`.
fn trim(mask: &VoxelGrid, k: usize) -> VoxelGrid {
    let mut out = mask.clone();
    let mut removed = 0;
    for v in out.values.iter_mut().rev() {
        if removed == k {
            break;
        }
        if *v != 0.0 {
            *v = 0.0;
            removed += 1;
        }
    }
    out
}

fn coreg_subject(id: String, scale: f64, trim_k: usize) -> SubjectArtifacts {
    let image = phantom([0, 0, 0], scale);
    let reg = region(&image);
    SubjectArtifacts {
        mask: Some(trim(&reg, trim_k)),
        reference_mask: Some(reg),
        reference_image: Some(image.clone()),
        image: Some(image),
        ..SubjectArtifacts::new(id)
    }
}

/// Marks a subject as visibly misaligned: the image moves off its template
/// and the mask overlap drops to `dice`.
fn misalign(a: &mut SubjectArtifacts, dice: f64) {
    let reg = a.reference_mask.clone().expect("coregistration subjects carry a reference mask");
    a.image = Some(phantom([3, 2, 0], 1.0));
    a.mask = Some(erode_to_dice(&reg, dice));
}

/// Marks a subject whose mask overlap is poor but whose image sits on the
/// template, so visual review accepts it.
fn erode(a: &mut SubjectArtifacts, dice: f64) {
    let reg = a.reference_mask.clone().expect("coregistration subjects carry a reference mask");
    a.mask = Some(erode_to_dice(&reg, dice));
}

/// Twelve subjects `s1..s12`. `s7` has an eroded mask (Dice 0.30) over a
/// well-placed image; `s9` is shifted off the template (Dice 0.30).
pub fn coregistration_cohort() -> Vec<SubjectArtifacts> {
    let mut cohort: Vec<SubjectArtifacts> = (1..=12)
        .map(|i| coreg_subject(format!("s{i}"), 1.0, i % 3))
        .collect();
    erode(&mut cohort[6], 0.30);
    misalign(&mut cohort[8], 0.30);
    cohort
}

/// `n` subjects `sub-001..`; subjects at the `planted` positions get poor
/// overlap, and every other planted subject is also misaligned.
pub fn screening_cohort(n: usize, planted: &[usize], seed: u64) -> Vec<SubjectArtifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cohort: Vec<SubjectArtifacts> = (0..n)
        .map(|i| coreg_subject(format!("sub-{:03}", i + 1), 1.0, rng.gen_range(0..4)))
        .collect();
    for (j, &p) in planted.iter().enumerate() {
        let dice = rng.gen_range(0.25..0.6);
        if j % 2 == 0 {
            misalign(&mut cohort[p], dice);
        } else {
            erode(&mut cohort[p], dice);
        }
    }
    cohort
}

/// Writes a cohort as `<dir>/<subject>/<slot>.json`.
pub fn write_cohort(dir: &Path, cohort: &[SubjectArtifacts]) -> Result<(), QcError> {
    for a in cohort {
        let d = dir.join(&a.subject);
        fs::create_dir_all(&d)?;
        let slots = [
            ("image", &a.image),
            ("reference_image", &a.reference_image),
            ("mask", &a.mask),
            ("reference_mask", &a.reference_mask),
            ("labels", &a.labels),
        ];
        for (name, grid) in slots {
            if let Some(g) = grid {
                g.save(&d.join(format!("{name}.json")))?;
            }
        }
    }
    Ok(())
}

/// Ten T1w IQM rows with one planted low-SNR subject (`s10`).
pub fn iqm_rows() -> Vec<MetricVector> {
    let snr = [10., 11., 12., 11., 10., 12., 11., 10., 11., 2.];
    snr.iter()
        .enumerate()
        .map(|(i, v)| {
            MetricVector::new(format!("s{:02}", i + 1), "raw_t1w")
                .with("snr_total", *v)
                .with("cjv", 0.45 + 0.01 * (i % 3) as f64)
        })
        .collect()
}

const CARD_TABLE: &[(Family, &str, &str, &str, &str)] = &[
    (Family::Processing, "fsl_bet_t1w", "fsl.bet", "Skull strip T1w anatomical images with BET", "input: T1w image; output: brain image and mask; frac: fractional intensity threshold"),
    (Family::Processing, "fsl_fast", "fsl.fast", "Segment brain tissue into CSF, gray matter and white matter", "input: skull-stripped T1w; output: label map 1=CSF 2=GM 3=WM and partial volume maps"),
    (Family::Processing, "fsl_slicetimer", "fsl.slicetimer", "Correct BOLD slice acquisition timing", "input: BOLD series; tr: repetition time; slice_order: acquisition order"),
    (Family::Processing, "fsl_mcflirt", "fsl.mcflirt", "Motion correct BOLD volumes to a reference volume", "input: BOLD series; output: realigned series and motion parameters"),
    (Family::Processing, "ants_n4_bias_correction", "ants.n4", "Remove intensity bias field from anatomical images", "input: T1w; output: bias corrected T1w; shrink_factor: integer"),
    (Family::Processing, "ants_t1w_to_mni", "ants.registration", "Nonlinear registration of T1w to the MNI template", "input: T1w brain; template: MNI152; output: warped image and transforms"),
    (Family::Processing, "bold_to_t1w_coregistration", "tool_lib/coregister.sh", "Coregister mean BOLD to the subject T1w image", "subject: id; variant: registration variant; out_dir: derivative root; writes image, mask and reference slots"),
    (Family::Processing, "bold_to_mni_normalization", "ants.apply_transforms", "Warp BOLD series to MNI space using composed transforms", "input: BOLD; transforms: list; output: normalized BOLD"),
    (Family::Processing, "spatial_smoothing", "fsl.susan", "Smooth images with a Gaussian kernel", "input: image; fwhm_mm: kernel width; output: smoothed image"),
    (Family::Processing, "confound_regression", "nilearn.clean", "Regress motion and physiological confounds from BOLD", "input: BOLD; confounds: table; output: cleaned BOLD"),
    (Family::Processing, "bandpass_filter", "nilearn.filter", "Temporal band-pass filter of BOLD time series", "input: BOLD; low_hz; high_hz; tr"),
    (Family::Processing, "freesurfer_recon_all", "freesurfer.recon_all", "Reconstruct cortical surfaces from T1w", "subject: id; input: T1w; output: subjects_dir tree"),
    (Family::Processing, "atlas_parcellation", "nilearn.maskers", "Extract parcel time series using a brain atlas", "input: BOLD in MNI; atlas: name; output: parcel by time matrix"),
    (Family::Processing, "fmriprep_pipeline", "fmriprep", "Run the full fMRIPrep preprocessing workflow for one subject", "participant_label: id; output_spaces: list; writes derivatives/fmriprep"),
    (Family::Processing, "dwi_denoise", "mrtrix.dwidenoise", "Denoise diffusion weighted images", "input: DWI; output: denoised DWI and noise map"),
    (Family::Processing, "fieldmap_correction", "fsl.topup", "Correct susceptibility distortion using field maps", "input: BOLD; fieldmap: phase difference image; output: unwarped BOLD"),
    (Family::Processing, "sample_subjects", "neuroflow::sandbox::sample_subjects", "Draw a seeded random subset of subjects for a pilot run", "subjects_file: path; n: count; out: path of the sampled list"),
    (Family::Processing, "check_derivatives", "neuroflow::sandbox::check_derivatives", "Check that every subject has its expected derivative files", "root: derivative root; patterns: list with {subject}; subjects_file: path"),
    (Family::QC, "qc_checkpoint", "neuroflow::qc::checkpoint", "Run a quality control checkpoint with cohort screening and visual review", "checkpoint: name; cohort_dir: path; metrics_table: optional path; mode: hierarchical|metric_only|visual_only|visual_one_shot; out: report path; exclude: bool"),
    (Family::QC, "mriqc_iqm_extraction", "mriqc", "Compute image quality metrics for raw T1w and BOLD", "participant_label: id; modalities: T1w|bold; output: IQM table"),
    (Family::QC, "compute_dice_overlap", "qc.metrics.dice", "Dice overlap between a mask and its reference", "mask: path; reference: path; output: float in [0,1]"),
    (Family::QC, "compute_nmi_similarity", "qc.metrics.nmi", "Normalized mutual information between two aligned images", "image: path; reference: path; bins: integer"),
    (Family::QC, "compute_ncc_similarity", "qc.metrics.ncc", "Normalized cross correlation between two aligned images", "image: path; reference: path; mask: optional path"),
    (Family::QC, "compute_tissue_volumes", "qc.metrics.volume", "Tissue volumes in millilitres from a label map", "labels: path; label ids: CSF=1 GM=2 WM=3"),
    (Family::QC, "render_raw_mosaic", "qc.visual.mosaic", "Render an axial mosaic of a raw image for visual review", "image: path; output: montage"),
    (Family::QC, "render_mask_contour", "qc.visual.mask_contour", "Overlay a brain mask contour on its image", "image: path; mask: path; output: montage"),
    (Family::QC, "render_template_contour", "qc.visual.template_contour", "Overlay template contours on a registered image", "image: path; template_mask: path; output: montage"),
    (Family::QC, "framewise_displacement_summary", "qc.motion.fd", "Summarize framewise displacement from motion parameters", "motion: parameter file; threshold_mm: float; output: mean FD and outlier count"),
    (Family::Analysis, "connectivity_matrix", "nilearn.connectome", "Compute functional connectivity matrices from parcel time series", "timeseries: path; kind: correlation|partial; output: matrix"),
    (Family::Analysis, "roi_timeseries_extraction", "nilearn.roi", "Extract mean time series for regions of interest", "input: BOLD; rois: atlas; output: table"),
    (Family::Analysis, "graph_features", "networkx.features", "Graph theoretical features from connectivity matrices", "matrix: path; features: degree|clustering|efficiency"),
    (Family::Analysis, "brain_network_transformer", "bnt.train", "Train a transformer classifier on connectivity matrices", "matrices: path; labels: path; epochs; output: model"),
    (Family::Analysis, "neuro_graph", "neurograph.train", "Train a graph neural network on brain connectivity graphs", "graphs: path; labels: path; output: model"),
    (Family::Analysis, "logistic_regression_classifier", "sklearn.logistic", "Train a regularized logistic regression classifier on subject features", "features: table; labels: table; c: inverse regularization; output: model file"),
    (Family::Analysis, "svm_classifier", "sklearn.svm", "Train a support vector machine classifier", "features: table; labels: table; kernel; output: model file"),
    (Family::Analysis, "cross_validate_model", "sklearn.cross_validate", "Stratified cross validation of a classifier", "model: spec; folds: count; metrics: auc|f1|accuracy"),
    (Family::Analysis, "write_inference_script", "codegen.inference", "Write a standalone inference script for a trained model", "model: path; output: script path"),
    (Family::Analysis, "feature_standardization", "sklearn.scale", "Standardize features to zero mean and unit variance", "features: table; output: table and scaler"),
    (Family::Analysis, "roc_auc_evaluation", "sklearn.metrics.auc", "Evaluate a classifier with ROC AUC, F1 and accuracy", "predictions: table; labels: table"),
    (Family::Analysis, "permutation_test", "stats.permutation", "Permutation test of classifier performance against chance", "model: path; n_permutations: count"),
];

/// Forty cards spread over the three families.
pub fn fixture_cards() -> Vec<PrimitiveCard> {
    CARD_TABLE
        .iter()
        .map(|(family, name, module, description, schema)| PrimitiveCard {
            name: name.to_string(),
            module: module.to_string(),
            description: description.to_string(),
            detailed_schema: format!("Parameters and outputs of {name}:\n{}\n", schema.replace("; ", "\n")),
            family: *family,
            command_template: (*name == "bold_to_t1w_coregistration")
                .then(|| "sh tool_lib/coregister.sh {subject} {variant} {out_dir}".to_string()),
            extra: Default::default(),
        })
        .collect()
}

pub fn fixture_registry() -> Registry {
    Registry::from_cards(fixture_cards()).expect("fixture cards are valid")
}

/// Writes cards as `<dir>/<family>/<name>.json`.
pub fn write_cards(dir: &Path, cards: &[PrimitiveCard]) -> io::Result<()> {
    for c in cards {
        let d = dir.join(c.family.as_str());
        fs::create_dir_all(&d)?;
        let text = serde_json::to_string_pretty(c).map_err(io::Error::other)?;
        fs::write(d.join(format!("{}.json", c.name)), text + "\n")?;
    }
    Ok(())
}

pub const HAPPY_SUBJECTS: usize = 12;

pub fn happy_subjects() -> Vec<String> {
    (1..=HAPPY_SUBJECTS).map(|i| format!("sub-{i:02}")).collect()
}

const COREGISTER_TOOL: &str = r#"#!/bin/sh
# usage: coregister.sh <subject> <variant> <out_root>
set -e
mkdir -p "$3/$1"
cp "$DATASET/$1/variant_$2/"*.json "$3/$1/"
echo "coregistered $1 (variant $2)"
"#;

fn write_grid(path: &Path, g: &VoxelGrid) -> io::Result<()> {
    g.save(path).map_err(io::Error::other)
}

/// Writes the happy-path dataset under `<ws>/data` and the mock tool library
/// under `<ws>/tool_lib`.
pub fn write_happy_dataset(ws: &Path) -> io::Result<()> {
    let data = ws.join("data");
    fs::create_dir_all(&data)?;
    let mut iqms = String::from("subject_id\tcjv\tcnr\tefc\tfber\tqi_1\tsnr_total\twm2max\n");
    let mut labels = String::from("subject_id\tlabel\n");
    for (i, s) in happy_subjects().iter().enumerate() {
        let n = i + 1;
        let scale = 0.95 + 0.01 * (n % 5) as f64;
        let image = phantom([0, 0, 0], scale);
        let reg = region(&image);
        let d = data.join(s);
        fs::create_dir_all(&d)?;
        write_grid(&d.join("image.json"), &image)?;
        let raw_ref = if n == HAPPY_SUBJECTS { region(&phantom([4, 0, 0], scale)) } else { reg.clone() };
        write_grid(&d.join("reference_mask.json"), &raw_ref)?;
        for (variant, shift) in [("a", [3, 0, 0]), ("b", [0, 0, 0])] {
            let v = d.join(format!("variant_{variant}"));
            fs::create_dir_all(&v)?;
            let moved = phantom(shift, scale);
            write_grid(&v.join("image.json"), &moved)?;
            write_grid(&v.join("reference_image.json"), &image)?;
            write_grid(&v.join("mask.json"), &region(&moved))?;
            write_grid(&v.join("reference_mask.json"), &reg)?;
        }
        let j = ((n * 7) % 5) as f64 * 0.01;
        let snr = if n == HAPPY_SUBJECTS { 4.0 } else { 14.0 + j * 10.0 };
        iqms.push_str(&format!(
            "{s}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.4}\t{snr:.3}\t{:.3}\n",
            0.42 + j,
            3.1 + j,
            0.48 + j,
            1800.0 + j * 1000.0,
            0.001 + j / 100.0,
            0.55 + j
        ));
        labels.push_str(&format!("{s}\t{}\n", if n % 2 == 0 { "patient" } else { "control" }));
    }
    fs::write(data.join("iqms.tsv"), iqms)?;
    fs::write(data.join("labels.tsv"), labels)?;
    let tools = ws.join("tool_lib");
    fs::create_dir_all(&tools)?;
    fs::write(tools.join("coregister.sh"), COREGISTER_TOOL)?;
    Ok(())
}

pub fn happy_objective() -> Objective {
    Objective {
        goal_text: "Build a resting-state fMRI preprocessing pipeline with quality control for this cohort, \
                    then train a classifier separating patients from controls and provide an inference script."
            .into(),
        dataset: DatasetRef {
            root_path: "data".into(),
            subject_ids: happy_subjects(),
            labels_path: Some("data/labels.tsv".into()),
        },
        deliverable_spec: vec!["pipeline".into(), "model".into(), "inference_script".into()],
    }
}

fn reply(thought: &str, action: Value) -> String {
    format!("{thought}\n```json\n{}\n```", serde_json::to_string_pretty(&action).expect("json serializes"))
}

fn record(agent: AgentRole, n: usize, thought: &str, action: Value) -> ScriptRecord {
    let prompt_tokens = 1400 + 90 * n as u64;
    let completion_tokens = 110 + 7 * (n as u64 % 9);
    ScriptRecord {
        agent,
        decision_point: DecisionPoint::ReactStep,
        pattern: String::new(),
        response: reply(thought, action),
        usage: Usage {
            prompt_tokens,
            completion_tokens,
            cost: (prompt_tokens as f64 * 3.0 + completion_tokens as f64 * 15.0) / 1_000_000.0,
        },
        repeat: false,
    }
}

const PIPELINE_2A: &str = r#"#!/bin/sh
# pipeline 2_A: rigid bold_to_t1w_coregistration
set -e
SUB="$1"
sh "$TOOL_LIB/coregister.sh" "$SUB" a derivatives/2_A
echo "step 01 has completed for $SUB"
"#;

const PIPELINE_2B_BROKEN: &str = r#"#!/bin/sh
# pipeline 2_B: boundary-based bold_to_t1w_coregistration with field map
set -e
SUB="$1"
cat "$DATASET/$SUB/fieldmap.json"
sh "$TOOL_LIB/coregister.sh" "$SUB" b derivatives/2_B
echo "step 01 has completed for $SUB"
"#;

const PIPELINE_2B: &str = r#"#!/bin/sh
# pipeline 2_B: boundary-based bold_to_t1w_coregistration
set -e
SUB="$1"
sh "$TOOL_LIB/coregister.sh" "$SUB" b derivatives/2_B
echo "step 01 has completed for $SUB"
"#;

fn train_source(c: &str, auc: &str) -> String {
    format!(
        r#"#!/bin/sh
# logistic_regression_classifier on pipeline 2_B derivatives
set -e
mkdir -p models
N=$(ls -d derivatives/2_B/sub-* | wc -l)
P=$(grep -c patient "$DATASET/labels.tsv")
printf '{{"model":"logistic_regression","c":{c},"n_subjects":%s,"n_patients":%s}}\n' "$N" "$P" > models/classifier.json
echo "cv_auc={auc} (n=$N)"
"#
    )
}

const INFER_SCRIPT: &str = r#"#!/bin/sh
# usage: infer.sh <subject_dir>
set -e
test -f models/classifier.json
echo "prediction for $1: see models/classifier.json"
"#;

/// Scripted trajectory: profiling, raw QC with one exclusion, a rejected
/// pilot pipeline, a remediated second pipeline, scale-up, hierarchical QC,
/// training with one refinement, and the final report.
pub fn happy_script() -> Vec<ScriptRecord> {
    use AgentRole::*;
    let steps: Vec<(AgentRole, &str, Value)> = vec![
        (Supervisor, "Plan first.", json!({"action": "write_todos", "items": [
            {"text": "profile dataset"}, {"text": "raw data QC"}, {"text": "pilot pipeline and QC"},
            {"text": "scale pipeline"}, {"text": "cohort QC"}, {"text": "train classifier"}, {"text": "report"}]})),
        (Supervisor, "Start with the data.", json!({"action": "send_message", "to": "DataAwareness",
            "body": "Profile the dataset under data: list subjects and modalities and write the subject list to work/subjects_all.txt."})),
        (DataAwareness, "Look at the layout.", json!({"action": "read_file", "path": "data"})),
        (DataAwareness, "Write the subject list.", json!({"action": "run_command",
            "command": "mkdir -p work && ls -d data/sub-* | xargs -n1 basename > work/subjects_all.txt && wc -l < work/subjects_all.txt"})),
        (DataAwareness, "Report back.", json!({"action": "send_message", "to": "Supervisor",
            "body": "12 subjects (sub-01..sub-12) with T1w and BOLD-derived variants; IQMs in data/iqms.tsv; labels in data/labels.tsv; list in work/subjects_all.txt."})),
        (Supervisor, "Raw QC next.", json!({"action": "send_message", "to": "QualityControl",
            "body": "Run the raw_t1w checkpoint with qc_checkpoint on cohort data using metrics table data/iqms.tsv, exclude failures, write the report to qc/raw_t1w.json, and write the passing subjects to work/subjects_clean.txt."})),
        (QualityControl, "Run the checkpoint.", json!({"action": "invoke_primitive", "name": "qc_checkpoint", "args": {
            "checkpoint": "raw_t1w", "cohort_dir": "data", "metrics_table": "data/iqms.tsv", "out": "qc/raw_t1w.json", "exclude": true}})),
        (QualityControl, "Record the clean list.", json!({"action": "write_file", "path": "work/subjects_clean.txt",
            "content": "sub-01\nsub-02\nsub-03\nsub-04\nsub-05\nsub-06\nsub-07\nsub-08\nsub-09\nsub-10\nsub-11\n"})),
        (QualityControl, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "raw_t1w: 11 PASS / 1 FAIL; sub-12 excluded (low snr_total, template mismatch). Clean list: work/subjects_clean.txt."})),
        (Supervisor, "Pilot a pipeline.", json!({"action": "send_message", "to": "Processing",
            "body": "Pilot pipeline 2_A: draw 10 subjects from work/subjects_clean.txt with sample_subjects into work/pilot.txt, then write a per-subject program using bold_to_t1w_coregistration and run it as a job array."})),
        (Processing, "Sample the pilot set.", json!({"action": "invoke_primitive", "name": "sample_subjects", "args": {
            "subjects_file": "work/subjects_clean.txt", "n": 10, "out": "work/pilot.txt"}})),
        (Processing, "Write pipeline 2_A.", json!({"action": "synthesize_program", "path": "scripts/pipeline_2A.sh",
            "source": PIPELINE_2A, "declared_primitives": ["bold_to_t1w_coregistration"], "entry_kind": "per_subject", "pipeline": "2_A"})),
        (Processing, "Run it.", json!({"action": "execute_program", "path": "scripts/pipeline_2A.sh",
            "subjects_file": "work/pilot.txt", "max_parallel": 4})),
        (Processing, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "Pipeline 2_A finished for 10 pilot subjects; outputs in derivatives/2_A."})),
        (Supervisor, "Check the pilot.", json!({"action": "send_message", "to": "QualityControl",
            "body": "Run the bold_to_t1w checkpoint with qc_checkpoint on derivatives/2_A in visual_only mode and write the report to qc/bold_to_t1w_2A.json."})),
        (QualityControl, "Run the checkpoint.", json!({"action": "invoke_primitive", "name": "qc_checkpoint", "args": {
            "checkpoint": "bold_to_t1w", "cohort_dir": "derivatives/2_A", "mode": "visual_only", "out": "qc/bold_to_t1w_2A.json"}})),
        (QualityControl, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "bold_to_t1w on pipeline 2_A: 10/10 FAIL, template contours misaligned on every subject. Pipeline 2_A rejected."})),
        (Supervisor, "Switch pipelines.", json!({"action": "send_message", "to": "Processing",
            "body": "Pipeline 2_A was rejected by QC (10/10 FAIL). Build pipeline 2_B with boundary-based bold_to_t1w_coregistration and run it on work/pilot.txt."})),
        (Processing, "Write pipeline 2_B.", json!({"action": "synthesize_program", "path": "scripts/pipeline_2B.sh",
            "source": PIPELINE_2B_BROKEN, "declared_primitives": ["bold_to_t1w_coregistration"], "entry_kind": "per_subject", "pipeline": "2_B"})),
        (Processing, "Run it.", json!({"action": "execute_program", "path": "scripts/pipeline_2B.sh",
            "subjects_file": "work/pilot.txt", "max_parallel": 4})),
        (Processing, "No field maps in this dataset; drop that input.", json!({"action": "synthesize_program", "path": "scripts/pipeline_2B.sh",
            "source": PIPELINE_2B, "declared_primitives": ["bold_to_t1w_coregistration"], "entry_kind": "per_subject", "pipeline": "2_B"})),
        (Processing, "Run again.", json!({"action": "execute_program", "path": "scripts/pipeline_2B.sh",
            "subjects_file": "work/pilot.txt", "max_parallel": 4})),
        (Processing, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "Pipeline 2_B finished for 10 pilot subjects after removing the field map input; outputs in derivatives/2_B."})),
        (Supervisor, "Check pipeline 2_B.", json!({"action": "send_message", "to": "QualityControl",
            "body": "Run the bold_to_t1w checkpoint with qc_checkpoint on derivatives/2_B in visual_only mode and write the report to qc/bold_to_t1w_2B_pilot.json."})),
        (QualityControl, "Run the checkpoint.", json!({"action": "invoke_primitive", "name": "qc_checkpoint", "args": {
            "checkpoint": "bold_to_t1w", "cohort_dir": "derivatives/2_B", "mode": "visual_only", "out": "qc/bold_to_t1w_2B_pilot.json"}})),
        (QualityControl, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "bold_to_t1w on pipeline 2_B: 10/10 PASS."})),
        (Supervisor, "Update the plan.", json!({"action": "write_todos", "items": [
            {"text": "profile dataset", "done": true}, {"text": "raw data QC", "done": true}, {"text": "pilot pipeline and QC", "done": true},
            {"text": "scale pipeline"}, {"text": "cohort QC"}, {"text": "train classifier"}, {"text": "report"}]})),
        (Supervisor, "Scale up.", json!({"action": "send_message", "to": "Processing",
            "body": "Run pipeline 2_B (scripts/pipeline_2B.sh) on all subjects in work/subjects_clean.txt."})),
        (Processing, "Run on the full cohort.", json!({"action": "execute_program", "path": "scripts/pipeline_2B.sh",
            "subjects_file": "work/subjects_clean.txt", "max_parallel": 4})),
        (Processing, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "Pipeline 2_B finished for all 11 clean subjects."})),
        (Supervisor, "Cohort QC.", json!({"action": "send_message", "to": "QualityControl",
            "body": "Run the bold_to_t1w checkpoint with qc_checkpoint on derivatives/2_B in hierarchical mode and write the report to qc/bold_to_t1w_2B.json."})),
        (QualityControl, "Screen, then inspect flagged subjects.", json!({"action": "invoke_primitive", "name": "qc_checkpoint", "args": {
            "checkpoint": "bold_to_t1w", "cohort_dir": "derivatives/2_B", "mode": "hierarchical", "out": "qc/bold_to_t1w_2B.json"}})),
        (QualityControl, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "bold_to_t1w on the 11-subject cohort: 11 PASS, none flagged."})),
        (Supervisor, "Train.", json!({"action": "send_message", "to": "DownstreamAnalysis",
            "body": "Train a patient versus control classifier with logistic_regression_classifier on pipeline 2_B derivatives and labels in data/labels.tsv, save it under models, refine once, and provide an inference script with write_inference_script at scripts/infer.sh."})),
        (DownstreamAnalysis, "First model.", json!({"action": "synthesize_program", "path": "scripts/train.sh",
            "source": train_source("1.0", "0.71"), "declared_primitives": ["logistic_regression_classifier"]})),
        (DownstreamAnalysis, "Train.", json!({"action": "execute_program", "path": "scripts/train.sh"})),
        (DownstreamAnalysis, "Stronger regularization.", json!({"action": "synthesize_program", "path": "scripts/train.sh",
            "source": train_source("0.1", "0.78"), "declared_primitives": ["logistic_regression_classifier"]})),
        (DownstreamAnalysis, "Retrain.", json!({"action": "execute_program", "path": "scripts/train.sh"})),
        (DownstreamAnalysis, "Inference script.", json!({"action": "write_file", "path": "scripts/infer.sh", "content": INFER_SCRIPT})),
        (DownstreamAnalysis, "Report.", json!({"action": "send_message", "to": "Supervisor",
            "body": "Classifier saved to models/classifier.json (cv_auc 0.78 after one refinement); inference script at scripts/infer.sh."})),
        (Supervisor, "Deliver.", json!({"action": "report_final", "summary": "Pipeline 2_B adopted after 2_A was rejected; classifier trained on 11 subjects.",
            "deliverables": [
                {"kind": "pipeline", "path": "scripts/pipeline_2B.sh"},
                {"kind": "model", "path": "models/classifier.json"},
                {"kind": "inference_script", "path": "scripts/infer.sh"}]})),
    ];
    steps
        .into_iter()
        .enumerate()
        .map(|(n, (agent, thought, action))| record(agent, n, thought, action))
        .collect()
}

/// A Supervisor that reads the same file forever.
pub fn looping_script() -> Vec<ScriptRecord> {
    let mut r = record(
        AgentRole::Supervisor,
        0,
        "Check the data again.",
        json!({"action": "read_file", "path": "data/labels.tsv"}),
    );
    r.repeat = true;
    vec![r]
}

/// Files a `run` command needs, as written by [`write_run_inputs`].
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub objective: PathBuf,
    pub dataset: PathBuf,
    pub cards: PathBuf,
    pub script: PathBuf,
    pub config: PathBuf,
}

/// Writes the happy-path dataset, cards, objective, the given script and a
/// config with a simulated clock under `dir`. `extra_config` is appended to
/// the TOML verbatim.
pub fn write_run_inputs(dir: &Path, script: &[ScriptRecord], extra_config: &str) -> io::Result<RunInputs> {
    let src = dir.join("source");
    write_happy_dataset(&src)?;
    let cards = dir.join("cards");
    write_cards(&cards, &fixture_cards())?;
    let objective = dir.join("objective.json");
    fs::write(&objective, serde_json::to_string_pretty(&happy_objective()).map_err(io::Error::other)? + "\n")?;
    let script_path = dir.join("script.jsonl");
    write_script(&script_path, script).map_err(io::Error::other)?;
    let config = dir.join("config.toml");
    fs::write(
        &config,
        format!("seed = 7\ntool_lib = \"source/tool_lib\"\n{extra_config}\n[clock]\nkind = \"simulated\"\ntick_ms = 1000\n"),
    )?;
    Ok(RunInputs {
        objective,
        dataset: src.join("data"),
        cards,
        script: script_path,
        config,
    })
}

/// Shape of one synthetic run ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerSpec {
    pub completed: bool,
    pub runtime_ms: u64,
    pub cost: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub interactions: usize,
    pub scripts: usize,
    pub pipelines: usize,
    pub refinements: usize,
    pub errors: usize,
    pub recovered: usize,
}

/// Five runs with spread-out summary statistics.
pub fn fixture_ledger_specs() -> [LedgerSpec; 5] {
    let spec = |completed, hours: f64, cost, prompt, completion, interactions, scripts, pipelines, refinements, errors, recovered| LedgerSpec {
        completed,
        runtime_ms: (hours * 3_600_000.0) as u64,
        cost,
        prompt_tokens: prompt,
        completion_tokens: completion,
        interactions,
        scripts,
        pipelines,
        refinements,
        errors,
        recovered,
    };
    [
        spec(true, 3.2, 6.77, 1_210_000, 41_000, 18, 9, 2, 1, 4, 4),
        spec(false, 12.0, 11.94, 2_340_000, 77_500, 32, 21, 4, 3, 11, 9),
        spec(true, 5.1, 9.01, 1_780_000, 60_200, 25, 14, 3, 2, 7, 6),
        spec(true, 4.4, 8.0, 1_560_000, 52_000, 25, 12, 2, 1, 5, 5),
        spec(true, 6.0, 9.33, 1_900_000, 63_300, 25, 16, 3, 2, 8, 7),
    ]
}

/// Builds a closed ledger realizing `spec`. Usage is attached to the first
/// step so totals are exact.
pub fn fixture_ledger(spec: &LedgerSpec, ledger: &mut crate::ledger::Ledger) -> Result<(), crate::ledger::LedgerError> {
    use crate::action::Action;
    use crate::ledger::{Outcome, StepError, TraceStep};
    use crate::taxonomy::ErrorCategory;

    assert!(spec.errors <= spec.scripts && spec.recovered <= spec.errors && spec.refinements < spec.scripts);
    let mut steps: Vec<(AgentRole, Action, String, Option<StepError>)> = Vec::new();
    steps.push((
        AgentRole::Supervisor,
        Action::WriteTodos { items: vec![] },
        "todo plan updated: 0 items, 0 pending".into(),
        None,
    ));
    let roles = [AgentRole::DataAwareness, AgentRole::QualityControl, AgentRole::Processing, AgentRole::DownstreamAnalysis];
    for i in 0..spec.interactions {
        let peer = roles[(i / 2) % roles.len()];
        let (from, to) = if i % 2 == 0 { (AgentRole::Supervisor, peer) } else { (peer, AgentRole::Supervisor) };
        steps.push((from, Action::SendMessage { to, body: format!("message {i}") }, format!("delivered to {}", to.as_str()), None));
    }
    for k in 0..spec.pipelines {
        steps.push((
            AgentRole::Processing,
            Action::SynthesizeProgram {
                path: format!("scripts/pipeline_{k}.sh"),
                source: "#!/bin/sh\n".into(),
                declared_primitives: vec![],
                entry_kind: crate::action::EntryKind::PerSubject,
                pipeline: Some(format!("{}_A", k + 1)),
            },
            format!("wrote program scripts/pipeline_{k}.sh (1 lines)"),
            None,
        ));
    }
    let downstream_from = spec.scripts - (spec.refinements + 1);
    for k in 0..spec.scripts {
        let agent = if k >= downstream_from { AgentRole::DownstreamAnalysis } else { AgentRole::Processing };
        let (obs, err) = if k < spec.errors {
            let (obs, category) = if k % 2 == 0 {
                ("exit status 1\nValueError: could not broadcast input array", ErrorCategory::CodeGenExecutionError)
            } else {
                ("exit status 1\ncat: data/missing.json: No such file or directory", ErrorCategory::FilePathError)
            };
            (obs.to_string(), Some(StepError { category, note: obs.lines().last().unwrap_or_default().to_string() }))
        } else {
            ("exit status 0".to_string(), None)
        };
        steps.push((agent, Action::ExecuteProgram { path: format!("scripts/run_{k}.sh"), subjects_file: None, max_parallel: None, log_dir: None }, obs, err));
    }
    if spec.completed {
        steps.push((
            AgentRole::Supervisor,
            Action::ReportFinal { deliverables: vec![], summary: String::new() },
            "deliverables accepted: ".into(),
            None,
        ));
    }
    let n = steps.len() as u64;
    let mut recovered = Vec::new();
    for (i, (agent, action, observation, error)) in steps.into_iter().enumerate() {
        let index = i as u64 + 1;
        if error.is_some() && recovered.len() < spec.recovered {
            recovered.push(index);
        }
        ledger.append_step(TraceStep {
            index,
            agent,
            action,
            observation,
            usage: (i == 0).then_some(Usage {
                prompt_tokens: spec.prompt_tokens,
                completion_tokens: spec.completion_tokens,
                cost: spec.cost,
            }),
            t_ms: spec.runtime_ms * index / n,
            error,
        })?;
    }
    let outcome = if spec.completed { Outcome::Completed } else { Outcome::Halted { reason: "TimeLimit".into() } };
    ledger.close(outcome, spec.runtime_ms, recovered)?;
    Ok(())
}
