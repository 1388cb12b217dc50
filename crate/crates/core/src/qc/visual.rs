use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{QcError, Raster, VoxelGrid};
use crate::action::{extract_json_object, AgentRole};
use crate::policy::{DecisionPoint, ModelRequest, Policy, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizKind {
    RawMosaic,
    MaskContourMontage,
    SegmentationContourMontage,
    TemplateContourMontage,
}

impl fmt::Display for VizKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VizKind::RawMosaic => "raw_mosaic",
            VizKind::MaskContourMontage => "mask_contour_montage",
            VizKind::SegmentationContourMontage => "segmentation_contour_montage",
            VizKind::TemplateContourMontage => "template_contour_montage",
        })
    }
}

impl FromStr for VizKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown visualization kind `{s}`"))
    }
}

/// Overlay bit for the subject's own foreground.
pub const REGION_SUBJECT: u8 = 1;
/// Overlay bit for the reference region (mask, template, tissue boundary).
pub const REGION_REFERENCE: u8 = 2;

/// Tiled 2D rendering of a volume with a two-region overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Montage {
    pub intensity: Raster<f32>,
    pub overlay: Raster<u8>,
    pub tile: usize,
    pub cols: usize,
    /// Tile captions in row-major order, e.g. `axial z=8`.
    pub captions: Vec<String>,
}

impl Montage {
    pub fn width(&self) -> usize {
        self.intensity.width
    }

    pub fn height(&self) -> usize {
        self.intensity.height
    }

    pub fn mismatch_pixels(&self) -> usize {
        self.overlay
            .pixels
            .iter()
            .filter(|p| ((**p & REGION_SUBJECT) != 0) != ((**p & REGION_REFERENCE) != 0))
            .count()
    }

    /// Pixels where exactly one region is present, over all pixels.
    pub fn mismatch_fraction(&self) -> f64 {
        let total = self.overlay.pixels.len();
        if total == 0 {
            0.0
        } else {
            self.mismatch_pixels() as f64 / total as f64
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Montage {
        Montage {
            intensity: self.intensity.crop(x0, y0, x1, y1),
            overlay: self.overlay.crop(x0, y0, x1, y1),
            tile: self.tile,
            cols: self.cols,
            captions: Vec::new(),
        }
    }

    /// Bounds `[x0, y0, x1, y1]` of tile `i`.
    pub fn tile_bounds(&self, i: usize) -> [usize; 4] {
        let (r, c) = (i / self.cols, i % self.cols);
        [c * self.tile, r * self.tile, (c + 1) * self.tile, (r + 1) * self.tile]
    }

    pub fn n_tiles(&self) -> usize {
        self.captions.len()
    }

    /// Tile with the most mismatched pixels (first on ties).
    pub fn worst_tile(&self) -> usize {
        (0..self.n_tiles())
            .map(|i| {
                let [x0, y0, x1, y1] = self.tile_bounds(i);
                (i, self.crop(x0, y0, x1, y1).mismatch_pixels())
            })
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0
    }
}

#[derive(Clone, Copy)]
enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    fn axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 1,
            Plane::Sagittal => 0,
        }
    }

    /// Voxel for in-plane coordinate (u, v) of slice `s`.
    fn voxel(self, u: usize, v: usize, s: usize) -> (usize, usize, usize) {
        match self {
            Plane::Axial => (u, v, s),
            Plane::Coronal => (u, s, v),
            Plane::Sagittal => (s, u, v),
        }
    }

    fn extent(self, dims: [usize; 3]) -> (usize, usize) {
        match self {
            Plane::Axial => (dims[0], dims[1]),
            Plane::Coronal => (dims[0], dims[2]),
            Plane::Sagittal => (dims[1], dims[2]),
        }
    }
}

/// Inputs for rendering one subject's view.
pub struct VizInputs<'a> {
    pub image: &'a VoxelGrid,
    /// Reference region; when absent the subject region is its own reference.
    pub reference: Option<&'a VoxelGrid>,
}

fn subject_region(kind: VizKind, image: &VoxelGrid) -> VoxelGrid {
    match kind {
        VizKind::SegmentationContourMontage => image.threshold(0.0),
        _ => image.threshold(0.5 * image.max()),
    }
}

/// Renders the 3x3 view for `kind`. Montage kinds use axial, coronal and
/// sagittal rows at the quarter, half and three-quarter slices; the raw
/// mosaic uses nine evenly spaced axial slices.
pub fn render_montage(kind: VizKind, inputs: &VizInputs<'_>) -> Result<Montage, QcError> {
    let image = inputs.image;
    if let Some(r) = inputs.reference {
        image.same_dims(r)?;
    }
    if image.is_empty() {
        return Err(QcError::InvalidGrid("empty image".into()));
    }
    let region_a = subject_region(kind, image);
    let region_b = inputs.reference.map(|r| r.threshold(0.0)).unwrap_or_else(|| region_a.clone());
    let dims = image.dims;
    let tiles: Vec<(Plane, usize)> = match kind {
        VizKind::RawMosaic => (0..9).map(|i| (Plane::Axial, (i + 1) * dims[2] / 10)).collect(),
        _ => [Plane::Axial, Plane::Coronal, Plane::Sagittal]
            .into_iter()
            .flat_map(|p| {
                let n = dims[p.axis()];
                [n / 4, n / 2, 3 * n / 4].map(move |s| (p, s))
            })
            .collect(),
    };
    let tile = dims.iter().copied().max().unwrap_or(0);
    let cols = 3;
    let mut intensity = Raster::filled(tile * cols, tile * 3, 0.0f32);
    let mut overlay = Raster::filled(tile * cols, tile * 3, 0u8);
    let mut captions = Vec::new();
    for (i, (plane, s)) in tiles.into_iter().enumerate() {
        let s = s.min(dims[plane.axis()] - 1);
        captions.push(format!("{} {}={s}", plane.name(), ["x", "y", "z"][plane.axis()]));
        let (ox, oy) = ((i % cols) * tile, (i / cols) * tile);
        let (eu, ev) = plane.extent(dims);
        for v in 0..ev {
            for u in 0..eu {
                let (x, y, z) = plane.voxel(u, v, s);
                let idx = image.index(x, y, z);
                intensity.set(ox + u, oy + v, image.values[idx] as f32);
                let mut bits = 0u8;
                if region_a.values[idx] != 0.0 {
                    bits |= REGION_SUBJECT;
                }
                if region_b.values[idx] != 0.0 {
                    bits |= REGION_REFERENCE;
                }
                overlay.set(ox + u, oy + v, bits);
            }
        }
    }
    Ok(Montage {
        intensity,
        overlay,
        tile,
        cols,
        captions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualizationDescriptor {
    pub subject: String,
    pub step: String,
    pub kind: VizKind,
    pub montage: Montage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Acceptable,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementVerdict {
    pub verdict: Verdict,
    #[serde(default)]
    pub reject_reason: Option<String>,
}

impl ElementVerdict {
    pub fn acceptable() -> Self {
        Self {
            verdict: Verdict::Acceptable,
            reject_reason: None,
        }
    }

    pub fn rejected(reason: impl Into<String>) -> Self {
        Self {
            verdict: Verdict::Rejected,
            reject_reason: Some(reason.into()),
        }
    }

    pub fn is_rejected(&self) -> bool {
        self.verdict == Verdict::Rejected
    }

    pub fn validate(&self) -> Result<(), QcError> {
        if self.is_rejected() && self.reject_reason.as_deref().is_none_or(|r| r.trim().is_empty()) {
            return Err(QcError::MalformedJudgeOutput("REJECTED without reject_reason".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionProtocol {
    pub criteria: String,
    #[serde(default)]
    pub exemplars: Vec<String>,
    /// Non-final turns (crops or free text) allowed before a verdict is due.
    pub max_turns: usize,
}

impl Default for InspectionProtocol {
    fn default() -> Self {
        Self {
            criteria: "Reject if the subject's boundary departs visibly from the reference contour, \
                       or if artifacts (ghosting, signal dropout, noise) obscure anatomy."
                .into(),
            exemplars: Vec::new(),
            max_turns: 3,
        }
    }
}

/// What the judge sees on one turn.
pub struct JudgePrompt<'a> {
    pub descriptor: &'a VisualizationDescriptor,
    pub view: &'a Montage,
    pub protocol: &'a InspectionProtocol,
    pub turn: usize,
    pub history: &'a [String],
}

/// A visual judge answers with free text; verdicts and crop requests are JSON
/// objects within it.
pub trait Judge: Sync {
    fn respond(&self, prompt: &JudgePrompt<'_>) -> Result<String, QcError>;
}

impl<J: Judge + ?Sized> Judge for &J {
    fn respond(&self, prompt: &JudgePrompt<'_>) -> Result<String, QcError> {
        (**self).respond(prompt)
    }
}

/// Deterministic judge: crops the worst tile once (if turns allow), then
/// rejects when the mismatch fraction of the whole montage exceeds the
/// threshold.
#[derive(Debug, Clone)]
pub struct StubJudge {
    pub threshold: f64,
}

impl Default for StubJudge {
    fn default() -> Self {
        Self { threshold: 0.05 }
    }
}

impl Judge for StubJudge {
    fn respond(&self, prompt: &JudgePrompt<'_>) -> Result<String, QcError> {
        let m = &prompt.descriptor.montage;
        if prompt.turn == 0 && prompt.protocol.max_turns > 0 && m.n_tiles() > 0 {
            let b = m.tile_bounds(m.worst_tile());
            return Ok(json!({ "crop": b }).to_string());
        }
        let frac = m.mismatch_fraction();
        let out = if frac > self.threshold {
            let worst = m.captions.get(m.worst_tile()).cloned().unwrap_or_default();
            json!({
                "verdict": "REJECTED",
                "reject_reason": format!(
                    "contour mismatch {:.1}% of montage exceeds {:.1}% (worst tile: {worst})",
                    frac * 100.0,
                    self.threshold * 100.0
                ),
            })
        } else {
            json!({ "verdict": "ACCEPTABLE", "reject_reason": null })
        };
        Ok(out.to_string())
    }
}

/// Judge backed by a policy at the visual-judge decision point.
pub struct ModelJudge<P: Policy> {
    policy: Mutex<P>,
}

impl<P: Policy> ModelJudge<P> {
    pub fn new(policy: P) -> Self {
        Self {
            policy: Mutex::new(policy),
        }
    }

    pub fn into_inner(self) -> P {
        self.policy.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

fn describe_view(prompt: &JudgePrompt<'_>) -> String {
    let d = prompt.descriptor;
    format!(
        "subject {} step {} view {} ({}x{} px, tiles: {}) turn {}/{}",
        d.subject,
        d.step,
        d.kind,
        prompt.view.width(),
        prompt.view.height(),
        d.montage.captions.join("; "),
        prompt.turn,
        prompt.protocol.max_turns
    )
}

impl<P: Policy> Judge for ModelJudge<P> {
    fn respond(&self, prompt: &JudgePrompt<'_>) -> Result<String, QcError> {
        let mut system_context = prompt.protocol.criteria.clone();
        for e in &prompt.protocol.exemplars {
            system_context.push_str("\nexemplar: ");
            system_context.push_str(e);
        }
        system_context.push_str(
            "\nReply with {\"crop\":[x0,y0,x1,y1]} to zoom, or {\"verdict\":\"ACCEPTABLE\"|\"REJECTED\",\"reject_reason\":...}.",
        );
        let mut transcript: Vec<TranscriptEntry> = prompt
            .history
            .iter()
            .map(|h| TranscriptEntry {
                speaker: "judge".into(),
                text: h.clone(),
            })
            .collect();
        transcript.push(TranscriptEntry {
            speaker: "viewer".into(),
            text: describe_view(prompt),
        });
        let req = ModelRequest {
            agent: AgentRole::QualityControl,
            system_context,
            transcript,
            decision_point: DecisionPoint::VisualJudge,
        };
        let mut policy = self.policy.lock().unwrap_or_else(|e| e.into_inner());
        policy
            .complete(&req)
            .map(|r| r.content)
            .map_err(|e| QcError::JudgeFailure(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub verdict: ElementVerdict,
    pub turns: usize,
    pub crops: Vec<[usize; 4]>,
}

enum JudgeMove {
    Verdict(ElementVerdict),
    Crop([usize; 4]),
    Talk,
}

fn parse_judge(text: &str) -> Result<JudgeMove, QcError> {
    let Some(v) = extract_json_object(text, |v| v.get("verdict").is_some() || v.get("crop").is_some()) else {
        return Ok(JudgeMove::Talk);
    };
    if v.get("verdict").is_some() {
        let ev: ElementVerdict =
            serde_json::from_value(v).map_err(|e| QcError::MalformedJudgeOutput(e.to_string()))?;
        ev.validate()?;
        return Ok(JudgeMove::Verdict(ev));
    }
    let c: [usize; 4] = serde_json::from_value(v["crop"].clone())
        .map_err(|e| QcError::MalformedJudgeOutput(format!("crop: {e}")))?;
    if c[0] >= c[2] || c[1] >= c[3] {
        return Err(QcError::MalformedJudgeOutput(format!("empty crop {c:?}")));
    }
    Ok(JudgeMove::Crop(c))
}

/// Multi-turn inspection. Each non-verdict reply uses one turn; crops are
/// taken from the full view. A verdict is due by turn `max_turns`.
pub fn visual_inspect(
    viz: &VisualizationDescriptor,
    judge: &dyn Judge,
    protocol: &InspectionProtocol,
) -> Result<Inspection, QcError> {
    let mut view = viz.montage.clone();
    let mut history = Vec::new();
    let mut crops = Vec::new();
    for turn in 0..=protocol.max_turns {
        let text = judge.respond(&JudgePrompt {
            descriptor: viz,
            view: &view,
            protocol,
            turn,
            history: &history,
        })?;
        match parse_judge(&text)? {
            JudgeMove::Verdict(v) => {
                return Ok(Inspection {
                    verdict: v,
                    turns: turn + 1,
                    crops,
                })
            }
            JudgeMove::Crop(c) => {
                view = viz.montage.crop(c[0], c[1], c[2], c[3]);
                crops.push(c);
            }
            JudgeMove::Talk => {}
        }
        history.push(text);
    }
    Err(QcError::TurnLimitWithoutVerdict(protocol.max_turns + 1))
}
