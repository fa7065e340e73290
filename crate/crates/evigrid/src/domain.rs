//! Core data types shared by every other module: frame intervals, feature
//! streams, the two-stage response structure, the annotation file schema,
//! and preference pairs with perturbation provenance.
//!
//! All values are immutable after construction and all operations here are
//! pure. Annotation documents are UTF-8 JSON; serialization is canonical
//! (fixed key order), so equal samples serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tensor;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DomainError>;

/// Inclusive frame-index pair. At 1 FPS, frame index equals seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    start: usize,
    end: usize,
}

impl Interval {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(DomainError::Invariant(format!(
                "interval start {start} > end {end}"
            )));
        }
        Ok(Interval { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    /// Inclusive length, always >= 1.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// A T x C feature-stream "video": one feature vector per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub frames: Tensor,
    pub fps: f64,
}

impl VideoFeatures {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rows == 0 || frames.cols == 0 {
            return Err(DomainError::Invariant(format!(
                "video must be at least 1x1, got {}x{}",
                frames.rows, frames.cols
            )));
        }
        if !frames.is_finite() {
            return Err(DomainError::Invariant("video contains non-finite entries".into()));
        }
        Ok(VideoFeatures { frames, fps: 1.0 })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows
    }

    pub fn channels(&self) -> usize {
        self.frames.cols
    }

    /// Feature file: two little-endian u32 (T, C), then T*C f32 row-major.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(self.frames.rows as u32).to_le_bytes())?;
        f.write_all(&(self.frames.cols as u32).to_le_bytes())?;
        for v in &self.frames.data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let t = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let c = u32::from_le_bytes(u32buf) as usize;
        let mut data = vec![0.0f64; t * c];
        for d in data.iter_mut() {
            f.read_exact(&mut u32buf)?;
            *d = f32::from_le_bytes(u32buf) as f64;
        }
        VideoFeatures::new(Tensor::from_vec(t, c, data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Grounding,
    Answer,
}

/// One evidence token occurrence: its interval (ground truth or predicted)
/// and, once a forward pass has run, its hidden feature.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceSlot {
    pub interval: Interval,
    pub feature: Option<Vec<f64>>,
    pub stage: Stage,
}

impl EvidenceSlot {
    pub fn new(interval: Interval, stage: Stage) -> Self {
        EvidenceSlot { interval, feature: None, stage }
    }
}

/// A piece of the answer stage: either literal text tokens or a reference
/// back to a grounding-stage evidence slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponsePart {
    Text(Vec<u32>),
    Evi(usize),
}

/// Two-stage response: K grounding slots, then interleaved text spans and
/// evidence references.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSequence {
    pub grounding_slots: Vec<EvidenceSlot>,
    pub answer_parts: Vec<ResponsePart>,
}

impl ResponseSequence {
    pub fn k(&self) -> usize {
        self.grounding_slots.len()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.grounding_slots.iter().map(|s| s.interval).collect()
    }

    pub fn evidence_refs(&self) -> Vec<usize> {
        self.answer_parts
            .iter()
            .filter_map(|p| match p {
                ResponsePart::Evi(k) => Some(*k),
                ResponsePart::Text(_) => None,
            })
            .collect()
    }

    /// Text span attached to each event: the text part immediately before
    /// that event's evidence reference (empty when there is none).
    pub fn event_texts(&self) -> Vec<Vec<u32>> {
        let mut texts = vec![Vec::new(); self.k()];
        let mut pending: Vec<u32> = Vec::new();
        for part in &self.answer_parts {
            match part {
                ResponsePart::Text(t) => pending = t.clone(),
                ResponsePart::Evi(k) => {
                    if *k < texts.len() {
                        texts[*k] = std::mem::take(&mut pending);
                    }
                }
            }
        }
        texts
    }

    /// From K intervals and per-event text spans, in the canonical
    /// `[text_k, evi_k]*` interleaving.
    pub fn from_events(intervals: &[Interval], texts: &[Vec<u32>]) -> Self {
        let grounding_slots = intervals
            .iter()
            .map(|iv| EvidenceSlot::new(*iv, Stage::Grounding))
            .collect();
        let mut answer_parts = Vec::new();
        for (k, text) in texts.iter().enumerate() {
            if !text.is_empty() {
                answer_parts.push(ResponsePart::Text(text.clone()));
            }
            answer_parts.push(ResponsePart::Evi(k));
        }
        ResponseSequence { grounding_slots, answer_parts }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let refs = self.evidence_refs();
        for w in refs.windows(2) {
            if w[1] <= w[0] {
                return Err(DomainError::Invariant(format!(
                    "evidence refs must be unique and increasing, got {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(bad) = refs.iter().find(|&&r| r >= k) {
            return Err(DomainError::Invariant(format!(
                "evidence ref {bad} out of range for K={k}"
            )));
        }
        for w in self.grounding_slots.windows(2) {
            if w[1].interval.start() < w[0].interval.start() {
                return Err(DomainError::Invariant(format!(
                    "grounding slots out of temporal order: {:?} after {:?}",
                    w[1].interval, w[0].interval
                )));
            }
        }
        Ok(())
    }
}

/// Video payload of an annotation: feature-file reference or inline rows.
#[derive(Debug, Clone, PartialEq)]
pub enum VideoSource {
    Reference { path: String, t: usize, c: usize },
    Inline(VideoFeatures),
}

impl VideoSource {
    pub fn num_frames(&self) -> usize {
        match self {
            VideoSource::Reference { t, .. } => *t,
            VideoSource::Inline(v) => v.num_frames(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            VideoSource::Reference { c, .. } => *c,
            VideoSource::Inline(v) => v.channels(),
        }
    }

    /// Materialize the features, resolving references against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<VideoFeatures> {
        match self {
            VideoSource::Inline(v) => Ok(v.clone()),
            VideoSource::Reference { path, t, c } => {
                let v = VideoFeatures::read_file(&base_dir.join(path))?;
                if v.num_frames() != *t || v.channels() != *c {
                    return Err(DomainError::Invariant(format!(
                        "feature file {path} is {}x{}, annotation declares {t}x{c}",
                        v.num_frames(),
                        v.channels()
                    )));
                }
                Ok(v)
            }
        }
    }
}

/// One training sample: video, question, response template, ground-truth
/// event intervals. Both stages share the same `time_gt`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSample {
    pub video: VideoSource,
    pub question: Vec<u32>,
    pub response: ResponseSequence,
    pub time_gt: Vec<Interval>,
    pub vocab_hint: BTreeMap<u32, String>,
}

impl AnnotationSample {
    pub fn k(&self) -> usize {
        self.time_gt.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.response.validate()?;
        if self.response.k() != self.time_gt.len() {
            return Err(DomainError::Invariant(format!(
                "response has {} grounding slots but time_gt has {} entries",
                self.response.k(),
                self.time_gt.len()
            )));
        }
        let refs = self.response.evidence_refs();
        if refs.len() != self.time_gt.len() {
            return Err(DomainError::Invariant(format!(
                "answer stage references {} events but time_gt has {} entries",
                refs.len(),
                self.time_gt.len()
            )));
        }
        let t = self.video.num_frames();
        for iv in &self.time_gt {
            if iv.end() >= t {
                return Err(DomainError::Invariant(format!(
                    "interval {:?} out of range for T={t}",
                    iv
                )));
            }
        }
        for (slot, gt) in self.response.grounding_slots.iter().zip(&self.time_gt) {
            if slot.interval != *gt {
                return Err(DomainError::Invariant(format!(
                    "grounding slot interval {:?} disagrees with time_gt {:?}",
                    slot.interval, gt
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wire schema

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VideoDoc {
    Reference {
        path: String,
        #[serde(rename = "T")]
        t: usize,
        #[serde(rename = "C")]
        c: usize,
    },
    Inline(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
struct ResponseDoc {
    grounding_k: usize,
    answer: Vec<ResponsePart>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDoc {
    video: VideoDoc,
    question: Vec<u32>,
    response: ResponseDoc,
    time_gt: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocab_hint: Option<BTreeMap<String, String>>,
}

/// Parse and validate one annotation document.
pub fn parse_annotation(bytes: &[u8]) -> Result<AnnotationSample> {
    let doc: AnnotationDoc =
        serde_json::from_slice(bytes).map_err(|e| DomainError::Schema(e.to_string()))?;
    let video = match doc.video {
        VideoDoc::Reference { path, t, c } => {
            if t == 0 || c == 0 {
                return Err(DomainError::Invariant("referenced video must be at least 1x1".into()));
            }
            VideoSource::Reference { path, t, c }
        }
        VideoDoc::Inline(rows) => {
            if rows.is_empty() {
                return Err(DomainError::Invariant("inline video has no frames".into()));
            }
            let c = rows[0].len();
            if rows.iter().any(|r| r.len() != c) {
                return Err(DomainError::Schema("inline video rows have uneven lengths".into()));
            }
            let t = rows.len();
            let data: Vec<f64> = rows.into_iter().flatten().collect();
            VideoSource::Inline(VideoFeatures::new(Tensor::from_vec(t, c, data))?)
        }
    };
    let time_gt = doc
        .time_gt
        .iter()
        .map(|&(s, e)| Interval::new(s, e))
        .collect::<Result<Vec<_>>>()?;
    if doc.response.grounding_k != time_gt.len() {
        return Err(DomainError::Invariant(format!(
            "grounding_k = {} but time_gt has {} entries",
            doc.response.grounding_k,
            time_gt.len()
        )));
    }
    let grounding_slots = time_gt
        .iter()
        .map(|iv| EvidenceSlot::new(*iv, Stage::Grounding))
        .collect();
    let response = ResponseSequence { grounding_slots, answer_parts: doc.response.answer };
    let vocab_hint = doc
        .vocab_hint
        .unwrap_or_default()
        .into_iter()
        .map(|(k, v)| {
            k.parse::<u32>()
                .map(|id| (id, v))
                .map_err(|_| DomainError::Schema(format!("vocab_hint key {k} is not a token id")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let sample = AnnotationSample { video, question: doc.question, response, time_gt, vocab_hint };
    sample.validate()?;
    Ok(sample)
}

/// Canonical serialization: equal samples produce identical bytes.
pub fn serialize_annotation(sample: &AnnotationSample) -> Vec<u8> {
    let video = match &sample.video {
        VideoSource::Reference { path, t, c } => {
            VideoDoc::Reference { path: path.clone(), t: *t, c: *c }
        }
        VideoSource::Inline(v) => VideoDoc::Inline(
            (0..v.num_frames())
                .map(|i| {
                    v.frames.data[i * v.channels()..(i + 1) * v.channels()].to_vec()
                })
                .collect(),
        ),
    };
    let doc = AnnotationDoc {
        video,
        question: sample.question.clone(),
        response: ResponseDoc {
            grounding_k: sample.response.k(),
            answer: sample.response.answer_parts.clone(),
        },
        time_gt: sample.time_gt.iter().map(|iv| (iv.start(), iv.end())).collect(),
        vocab_hint: if sample.vocab_hint.is_empty() {
            None
        } else {
            Some(
                sample
                    .vocab_hint
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect(),
            )
        },
    };
    serde_json::to_vec(&doc).expect("annotation serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Preference pairs

/// Perturbation category used to construct a dispreferred response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Factor {
    TemporalShift,
    AddEvent,
    DeleteEvent,
    MergeEvents,
    DistortText,
    RepeatText,
}

impl Factor {
    pub const ALL: [Factor; 6] = [
        Factor::TemporalShift,
        Factor::AddEvent,
        Factor::DeleteEvent,
        Factor::MergeEvents,
        Factor::DistortText,
        Factor::RepeatText,
    ];

    pub fn is_temporal(&self) -> bool {
        matches!(
            self,
            Factor::TemporalShift | Factor::AddEvent | Factor::DeleteEvent | Factor::MergeEvents
        )
    }
}

/// What exactly was changed for one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub factor: Factor,
    pub event_index: usize,
    pub before_interval: Option<Interval>,
    pub after_interval: Option<Interval>,
    pub before_text: Option<Vec<u32>>,
    pub after_text: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub factor: Factor,
    pub records: Vec<PerturbationRecord>,
}

/// A response together with the intervals it claims.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundedResponse {
    pub response: ResponseSequence,
    pub time_gt: Vec<Interval>,
}

impl GroundedResponse {
    pub fn from_sample(sample: &AnnotationSample) -> Self {
        GroundedResponse { response: sample.response.clone(), time_gt: sample.time_gt.clone() }
    }
}

/// (preferred, dispreferred) over the same video and question, with full
/// perturbation provenance.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub base: AnnotationSample,
    pub preferred: GroundedResponse,
    pub dispreferred: GroundedResponse,
    pub provenance: Provenance,
}

/// One violated pair invariant: field and rule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

fn violation(list: &mut Vec<Violation>, field: &str, rule: impl Into<String>) {
    list.push(Violation { field: field.to_string(), rule: rule.into() });
}

/// Checks every PreferencePair invariant including factor purity; returns
/// one record per violated rule. Violations are data, not failures.
pub fn validate_pair(pair: &PreferencePair) -> Vec<Violation> {
    let mut out = Vec::new();
    let pref = &pair.preferred;
    let dis = &pair.dispreferred;
    if let Err(e) = pref.response.validate() {
        violation(&mut out, "preferred", e.to_string());
    }
    if let Err(e) = dis.response.validate() {
        violation(&mut out, "dispreferred", e.to_string());
    }
    if pref.response.k() != pref.time_gt.len() {
        violation(&mut out, "preferred", "slot count disagrees with time_gt");
    }
    if dis.response.k() != dis.time_gt.len() {
        violation(&mut out, "dispreferred", "slot count disagrees with time_gt");
    }
    let pref_texts = pref.response.event_texts();
    let dis_texts = dis.response.event_texts();
    let same_intervals = pref.time_gt == dis.time_gt;
    let same_texts = pref_texts == dis_texts;
    if same_intervals && same_texts {
        violation(&mut out, "dispreferred", "identical to preferred; perturbation was a no-op");
    }
    if pair.provenance.records.is_empty() {
        violation(&mut out, "provenance", "no perturbation records");
    }
    for rec in &pair.provenance.records {
        if rec.factor != pair.provenance.factor {
            violation(&mut out, "provenance", "record factor disagrees with pair factor");
        }
        let unchanged = rec.before_interval == rec.after_interval
            && rec.before_text == rec.after_text;
        if unchanged {
            violation(&mut out, "provenance", "record changes nothing");
        }
    }
    let pk = pref.time_gt.len();
    let dk = dis.time_gt.len();
    match pair.provenance.factor {
        Factor::TemporalShift => {
            if dk != pk {
                violation(&mut out, "dispreferred", "TemporalShift must preserve event count");
            }
            if same_intervals {
                violation(&mut out, "dispreferred", "TemporalShift left all intervals unchanged");
            }
            if dk == pk && !same_texts {
                violation(&mut out, "dispreferred", "TemporalShift must not change text");
            }
        }
        Factor::AddEvent => {
            if dk != pk + pair.provenance.records.len() {
                violation(&mut out, "dispreferred", "AddEvent must grow event count per record");
            }
        }
        Factor::DeleteEvent => {
            if dk >= pk {
                violation(&mut out, "dispreferred", "DeleteEvent must reduce event count");
            }
            if dk == 0 && pk == pair.provenance.records.len() {
                violation(&mut out, "dispreferred", "DeleteEvent must not delete all events");
            }
        }
        Factor::MergeEvents => {
            if dk + pair.provenance.records.len() != pk {
                violation(&mut out, "dispreferred", "MergeEvents must shrink count per merge");
            }
        }
        Factor::DistortText | Factor::RepeatText => {
            if !same_intervals {
                violation(&mut out, "dispreferred", "text factors must not change intervals");
            }
            if same_texts {
                violation(&mut out, "dispreferred", "text factor left all text unchanged");
            }
            if pair.provenance.factor == Factor::RepeatText {
                for rec in &pair.provenance.records {
                    let k = rec.event_index;
                    if k == 0 || k >= dis_texts.len() {
                        violation(&mut out, "provenance", "RepeatText needs a previous event");
                    } else if dis_texts[k] != dis_texts[k - 1] {
                        violation(
                            &mut out,
                            "dispreferred",
                            "RepeatText event text must equal its predecessor's",
                        );
                    }
                }
            }
        }
    }
    // non-overlap of dispreferred events after temporal edits
    if pair.provenance.factor.is_temporal() {
        let mut sorted = dis.time_gt.clone();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0].overlaps(&w[1]) {
                violation(&mut out, "dispreferred", "events overlap after perturbation");
            }
        }
    }
    out
}
