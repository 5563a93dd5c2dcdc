//! Pseudo-labeling of caption-only images.
//!
//! Per sample: extract nouns from the caption, ask a [`Detector`] for
//! region-text proposals, score them with a [`Scorer`], optionally relabel,
//! rescore, filter per region, filter per image. Real detector and scorer
//! models are out of reach here; [`FixtureSet`] scripts both from JSON and
//! [`ToyScorer`] gives a deterministic embedding-cosine stand-in.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{input_err, Error, Result};
use crate::head::{nms, Scored};
use crate::loss::{AnnotationEntry, AnnotationsFile, Source};
use crate::rng;
use crate::tensor::{dot, norm};
use crate::text::toy_encode;

/// Tokens never kept in a noun phrase: articles, prepositions, conjunctions,
/// pronouns, auxiliaries, a few determiners and number words.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "in", "on", "at", "of", "to", "for", "from", "with", "by", "near", "into", "onto", "over",
    "under", "above", "below", "behind", "beside", "next", "between", "through", "across", "around", "along",
    "up", "down", "out", "off", "and", "or", "but", "while", "as", "is", "are", "was", "were", "be", "been",
    "being", "has", "have", "had", "do", "does", "it", "its", "this", "that", "these", "those", "there", "here",
    "he", "she", "they", "them", "his", "her", "their", "we", "you", "i", "my", "your", "our", "some", "any",
    "very", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "s",
];

pub const MAX_PHRASE_LEN: usize = 3;

fn is_stopword(tok: &str) -> bool {
    STOPWORDS.contains(&tok)
}

/// Splits a caption into noun phrases.
///
/// Lowercases, splits on anything that is not alphanumeric, drops stopwords
/// and emits each maximal run of surviving tokens. Runs longer than three
/// tokens are cut into consecutive chunks of at most three. Phrases are
/// deduplicated in first-occurrence order.
pub fn extract_nouns(caption: &str) -> Result<Vec<String>> {
    if caption.trim().is_empty() {
        return Err(input_err("empty caption"));
    }
    let lower = caption.to_lowercase();
    let mut spans: Vec<Vec<&str>> = vec![Vec::new()];
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        if is_stopword(tok) {
            spans.push(Vec::new());
        } else {
            spans.last_mut().expect("non-empty").push(tok);
        }
    }
    let mut out: Vec<String> = Vec::new();
    for span in spans.iter().filter(|s| !s.is_empty()) {
        for chunk in span.chunks(MAX_PHRASE_LEN) {
            let phrase = chunk.join(" ");
            if !out.contains(&phrase) {
                out.push(phrase);
            }
        }
    }
    Ok(out)
}

/// One line of a caption dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSample {
    pub image_id: String,
    pub caption: String,
}

/// What a detector returns for one noun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub bbox: BBox,
    pub text: String,
    /// Detector confidence `c`.
    pub confidence: f64,
    /// Region-text score `s_r`.
    pub region_score: Option<f64>,
    /// `c̃ = sqrt(c · s_r)`.
    pub rescored: Option<f64>,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(input_err(format!("{name} = {v} outside [0, 1]")))
    }
}

pub trait Detector: Sync {
    fn propose(&self, image_id: &str, nouns: &[String]) -> Result<Vec<RawProposal>>;
}

pub trait Scorer: Sync {
    /// Whole-image score against the caption, in `[0, 1]`.
    fn image_text(&self, image_id: &str, caption: &str) -> Result<f64>;
    /// Score of the region `bbox` against `text`, in `[0, 1]`.
    fn region_text(&self, image_id: &str, bbox: &BBox, text: &str) -> Result<f64>;
}

pub fn propose_regions(sample: &CaptionSample, nouns: &[String], detector: &dyn Detector) -> Result<Vec<RegionProposal>> {
    if nouns.is_empty() {
        return Err(input_err(format!("{}: no nouns to propose for", sample.image_id)));
    }
    detector
        .propose(&sample.image_id, nouns)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let bad = |e: Error| Error::Pipeline(format!("{}: proposal {i} ({:?}): {e}", sample.image_id, p.text));
            p.bbox.validate().map_err(bad)?;
            check_unit("confidence", p.confidence).map_err(bad)?;
            if p.text.is_empty() {
                return Err(bad(input_err("empty text")));
            }
            Ok(RegionProposal { bbox: p.bbox, text: p.text, confidence: p.confidence, region_score: None, rescored: None })
        })
        .collect()
}

pub fn rescore(c: f64, s_r: f64) -> Result<f64> {
    check_unit("confidence", c)?;
    check_unit("region score", s_r)?;
    Ok((c * s_r).sqrt())
}

/// Argmax noun; ties go to the earliest entry.
pub fn relabel<S: AsRef<str>>(scores: &[(S, f64)]) -> Result<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (noun, s) in scores {
        if best.is_none_or(|(_, b)| *s > b) {
            best = Some((noun.as_ref(), *s));
        }
    }
    best.map(|(n, _)| n).ok_or_else(|| input_err("relabel: no candidate nouns"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionFilterOutcome {
    /// Surviving proposal indices, ascending.
    pub kept: Vec<usize>,
    pub dropped_nms: usize,
    pub dropped_conf: usize,
}

/// Per-text NMS on `c̃` (suppress when IoU > `nms_thresh`), then keeps
/// proposals with `c̃ > conf_thresh`.
pub fn region_filter(proposals: &[RegionProposal], nms_thresh: f64, conf_thresh: f64) -> Result<RegionFilterOutcome> {
    let mut groups: Vec<&str> = Vec::new();
    let mut scored = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let c = p
            .rescored
            .ok_or_else(|| Error::Pipeline(format!("proposal {i} ({:?}) filtered before rescoring", p.text)))?;
        let text_id = match groups.iter().position(|g| *g == p.text) {
            Some(g) => g,
            None => {
                groups.push(&p.text);
                groups.len() - 1
            }
        };
        scored.push(Scored { bbox: p.bbox, text_id, score: c });
    }
    let after_nms = nms(&scored, nms_thresh)?;
    let mut kept: Vec<usize> = after_nms.iter().copied().filter(|&i| scored[i].score > conf_thresh).collect();
    kept.sort_unstable();
    Ok(RegionFilterOutcome {
        dropped_nms: proposals.len() - after_nms.len(),
        dropped_conf: after_nms.len() - kept.len(),
        kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageDecision {
    pub keep: bool,
    pub s_region: f64,
    pub s: f64,
}

/// `s = sqrt(s_img · s_region)` where `s_region` is the mean region-text
/// score `s_r` of the kept proposals (0 when none). Keeps when `s > img_thresh`.
pub fn image_filter(s_img: f64, kept: &[&RegionProposal], img_thresh: f64) -> Result<ImageDecision> {
    check_unit("image score", s_img)?;
    let mut sum = 0.0;
    for p in kept {
        sum += p.region_score.ok_or_else(|| Error::Pipeline(format!("proposal {:?} was never scored", p.text)))?;
    }
    let s_region = if kept.is_empty() { 0.0 } else { sum / kept.len() as f64 };
    image_decision(s_img, s_region, img_thresh)
}

pub fn image_decision(s_img: f64, s_region: f64, img_thresh: f64) -> Result<ImageDecision> {
    check_unit("image score", s_img)?;
    check_unit("region score", s_region)?;
    let s = (s_img * s_region).sqrt();
    Ok(ImageDecision { keep: s > img_thresh, s_region, s })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub nms_thresh: f64,
    pub conf_thresh: f64,
    pub img_thresh: f64,
    pub relabel: bool,
    /// Value written to `box_accurate` on every emitted annotation.
    pub box_accurate: bool,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self { nms_thresh: 0.5, conf_thresh: 0.3, img_thresh: 0.3, relabel: false, box_accurate: false }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("nms_thresh", self.nms_thresh)?;
        check_unit("conf_thresh", self.conf_thresh)?;
        check_unit("img_thresh", self.img_thresh)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleError {
    pub image_id: String,
    pub message: String,
}

/// Counts per stage. Images: `in = kept + dropped + errored`. Proposals of
/// non-errored samples: `in = dropped_nms + dropped_conf + dropped_image + kept`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReport {
    pub images_in: usize,
    pub images_kept: usize,
    pub images_dropped: usize,
    pub images_errored: usize,
    pub proposals_in: usize,
    pub proposals_dropped_nms: usize,
    pub proposals_dropped_conf: usize,
    pub proposals_dropped_image: usize,
    pub proposals_kept: usize,
    pub relabeled: usize,
    pub errors: Vec<SampleError>,
}

impl LabelReport {
    pub fn reconciles(&self) -> bool {
        self.images_in == self.images_kept + self.images_dropped + self.images_errored
            && self.images_errored == self.errors.len()
            && self.proposals_in
                == self.proposals_dropped_nms + self.proposals_dropped_conf + self.proposals_dropped_image + self.proposals_kept
    }
}

/// Everything known about one processed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub nouns: Vec<String>,
    pub proposals: Vec<RegionProposal>,
    pub region: RegionFilterOutcome,
    pub image: ImageDecision,
    pub relabeled: usize,
}

pub fn label_sample(sample: &CaptionSample, detector: &dyn Detector, scorer: &dyn Scorer, cfg: &LabelConfig) -> Result<SampleTrace> {
    let nouns = extract_nouns(&sample.caption)?;
    let mut proposals = propose_regions(sample, &nouns, detector)?;
    let id = sample.image_id.as_str();
    let s_img = scorer.image_text(id, &sample.caption)?;
    check_unit("image-text score", s_img).map_err(|e| Error::Pipeline(format!("{id}: {e}")))?;
    let mut relabeled = 0;
    for p in &mut proposals {
        let score = |text: &str| -> Result<f64> {
            let s = scorer.region_text(id, &p.bbox, text)?;
            check_unit("region-text score", s).map_err(|e| Error::Pipeline(format!("{id}/{text}: {e}")))?;
            Ok(s)
        };
        let mut s_r = score(&p.text)?;
        if cfg.relabel {
            let all = nouns.iter().map(|n| Ok((n.as_str(), score(n)?))).collect::<Result<Vec<_>>>()?;
            let best = relabel(&all)?;
            let best_score = all.iter().find(|(n, _)| *n == best).map(|(_, s)| *s).expect("argmax present");
            if best != p.text {
                debug!("{id}: relabel {:?} -> {best:?}", p.text);
                p.text = best.to_string();
                relabeled += 1;
            }
            s_r = best_score;
        }
        p.region_score = Some(s_r);
        p.rescored = Some(rescore(p.confidence, s_r)?);
    }
    let region = region_filter(&proposals, cfg.nms_thresh, cfg.conf_thresh)?;
    let kept: Vec<&RegionProposal> = region.kept.iter().map(|&i| &proposals[i]).collect();
    let image = image_filter(s_img, &kept, cfg.img_thresh)?;
    Ok(SampleTrace { nouns, proposals, region, image, relabeled })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutput {
    /// One entry per kept image, in input order.
    pub annotations: Vec<AnnotationsFile>,
    pub report: LabelReport,
}

impl LabelOutput {
    pub fn annotations_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for a in &self.annotations {
            s.push_str(&serde_json::to_string(a)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn report_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report)? + "\n")
    }
}

/// Labels every sample. A failing sample is recorded in the report and
/// skipped; it never aborts the run. Samples run in parallel, output keeps
/// input order.
pub fn run_pipeline(dataset: &[CaptionSample], detector: &dyn Detector, scorer: &dyn Scorer, cfg: &LabelConfig) -> Result<LabelOutput> {
    cfg.validate()?;
    let traces: Vec<Result<SampleTrace>> = dataset.par_iter().map(|s| label_sample(s, detector, scorer, cfg)).collect();
    let mut report = LabelReport { images_in: dataset.len(), ..Default::default() };
    let mut annotations = Vec::new();
    for (sample, trace) in dataset.iter().zip(traces) {
        let t = match trace {
            Ok(t) => t,
            Err(e) => {
                warn!("{}: {e}", sample.image_id);
                report.images_errored += 1;
                report.errors.push(SampleError { image_id: sample.image_id.clone(), message: e.to_string() });
                continue;
            }
        };
        report.proposals_in += t.proposals.len();
        report.proposals_dropped_nms += t.region.dropped_nms;
        report.proposals_dropped_conf += t.region.dropped_conf;
        report.relabeled += t.relabeled;
        if !t.image.keep {
            report.images_dropped += 1;
            report.proposals_dropped_image += t.region.kept.len();
            continue;
        }
        report.images_kept += 1;
        report.proposals_kept += t.region.kept.len();
        annotations.push(AnnotationsFile {
            image_id: sample.image_id.clone(),
            source: Source::ImageText,
            annotations: t
                .region
                .kept
                .iter()
                .map(|&i| AnnotationEntry {
                    bbox: t.proposals[i].bbox,
                    text: t.proposals[i].text.clone(),
                    box_accurate: cfg.box_accurate,
                })
                .collect(),
        });
    }
    Ok(LabelOutput { annotations, report })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerFixture {
    pub image_text: BTreeMap<String, f64>,
    /// `image_id → text → score`; the box is ignored.
    pub region_text: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Scripted detector and scorer outputs keyed by image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSet {
    pub detector: BTreeMap<String, Vec<RawProposal>>,
    pub scorer: ScorerFixture,
}

impl FixtureSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("fixtures: {e}")))
    }
}

impl Detector for FixtureSet {
    fn propose(&self, image_id: &str, _nouns: &[String]) -> Result<Vec<RawProposal>> {
        self.detector
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::Pipeline(format!("no detector fixture for {image_id:?}")))
    }
}

impl Scorer for FixtureSet {
    fn image_text(&self, image_id: &str, _caption: &str) -> Result<f64> {
        self.scorer
            .image_text
            .get(image_id)
            .copied()
            .ok_or_else(|| Error::Pipeline(format!("no image-text fixture for {image_id:?}")))
    }

    fn region_text(&self, image_id: &str, _bbox: &BBox, text: &str) -> Result<f64> {
        self.scorer
            .region_text
            .get(image_id)
            .and_then(|m| m.get(text))
            .copied()
            .ok_or_else(|| Error::Pipeline(format!("no region-text fixture for ({image_id:?}, {text:?})")))
    }
}

/// Deterministic stand-in scorer: texts go through [`toy_encode`], images and
/// regions get pseudo-random features from their id and box, and the score is
/// `(1 + cos) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyScorer {
    pub dim: usize,
    pub seed: u64,
}

impl ToyScorer {
    fn features(&self, tag: &str) -> Vec<f64> {
        let mut r = rng::seeded(rng::derive(self.seed, tag));
        rng::uniform(&mut r, &[self.dim], 1.0).into_data()
    }

    fn score(&self, feat: &[f64], text: &str) -> Result<f64> {
        let emb = toy_encode(&[text], self.dim, self.seed)?;
        let n = norm(feat);
        if n == 0.0 {
            return Ok(0.5);
        }
        let cos = (dot(feat, emb.matrix().row(0)) / n).clamp(-1.0, 1.0);
        Ok((1.0 + cos) / 2.0)
    }
}

impl Scorer for ToyScorer {
    fn image_text(&self, image_id: &str, caption: &str) -> Result<f64> {
        self.score(&self.features(&format!("image/{image_id}")), caption)
    }

    fn region_text(&self, image_id: &str, bbox: &BBox, text: &str) -> Result<f64> {
        let [x1, y1, x2, y2] = bbox.0;
        self.score(&self.features(&format!("region/{image_id}/{x1}/{y1}/{x2}/{y2}")), text)
    }
}
