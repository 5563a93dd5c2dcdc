//! Region-text training objective: task-aligned assignment, contrastive
//! cross-entropy over the vocabulary, IoU and distribution focal losses, and
//! the source-gated total.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{dim_err, input_err, Result};
use crate::head::{HeadOutput, SimilarityMatrix};
use crate::tensor::{log_softmax_slice, sigmoid_scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Detection,
    Grounding,
    ImageText,
}

impl Source {
    /// Weight of the regression terms: 1 for box-annotated data, 0 for
    /// image-text data.
    pub fn regression_weight(self) -> f64 {
        match self {
            Source::Detection | Source::Grounding => 1.0,
            Source::ImageText => 0.0,
        }
    }
}

/// One box paired with a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionText {
    pub bbox: BBox,
    pub text_index: usize,
    pub box_accurate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub source: Source,
    pub annotations: Vec<RegionText>,
}

impl GroundTruth {
    pub fn new(source: Source, annotations: Vec<RegionText>, vocab_size: usize) -> Result<Self> {
        for (i, a) in annotations.iter().enumerate() {
            a.bbox.validate().map_err(|e| input_err(format!("annotation {i}: {e}")))?;
            if a.text_index >= vocab_size {
                return Err(input_err(format!(
                    "annotation {i}: text index {} out of vocabulary of {vocab_size}",
                    a.text_index
                )));
            }
        }
        Ok(Self { source, annotations })
    }

    /// Resolves an annotations file against a vocabulary.
    pub fn from_file<S: AsRef<str>>(file: &AnnotationsFile, vocab: &[S]) -> Result<Self> {
        let annotations = file
            .annotations
            .iter()
            .map(|a| {
                let idx = vocab
                    .iter()
                    .position(|v| v.as_ref() == a.text)
                    .ok_or_else(|| input_err(format!("text {:?} not in vocabulary", a.text)))?;
                Ok(RegionText { bbox: a.bbox, text_index: idx, box_accurate: a.box_accurate })
            })
            .collect::<Result<_>>()?;
        Self::new(file.source, annotations, vocab.len())
    }
}

/// `{"image_id", "source", "annotations": [{"box", "text", "box_accurate"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationsFile {
    pub image_id: String,
    pub source: Source,
    pub annotations: Vec<AnnotationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub text: String,
    pub box_accurate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Positive {
    pub gt: usize,
    pub text: usize,
}

/// Per-prediction label; `None` is a negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<Option<Positive>>,
}

impl Assignment {
    pub fn positives(&self) -> impl Iterator<Item = (usize, Positive)> + '_ {
        self.labels.iter().enumerate().filter_map(|(k, l)| l.map(|p| (k, p)))
    }

    pub fn num_positives(&self) -> usize {
        self.labels.iter().flatten().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignConfig {
    pub top_k: usize,
    /// Exponent on the classification score.
    pub alpha: f64,
    /// Exponent on the IoU.
    pub beta: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self { top_k: 10, alpha: 1.0, beta: 6.0 }
    }
}

pub(crate) fn box_row(t: &Tensor, k: usize) -> BBox {
    let r = t.row(k);
    BBox::new(r[0], r[1], r[2], r[3])
}

/// Task-aligned assignment.
///
/// Candidates for a ground truth are predictions whose anchor lies strictly
/// inside its box. Each candidate is scored `σ(s)^alpha · IoU^beta` and the
/// `top_k` best become positives. A prediction claimed by several ground
/// truths goes to the one with the larger score; ties prefer the lower ground
/// truth index, and candidate ranking ties prefer the lower prediction index.
pub fn task_aligned_assign(
    sim: &SimilarityMatrix,
    pred_boxes: &Tensor,
    anchors: &Tensor,
    gt: &GroundTruth,
    cfg: AssignConfig,
) -> Result<Assignment> {
    let (k, c) = sim.values.dims2()?;
    if pred_boxes.shape() != [k, 4] || anchors.shape() != [k, 2] {
        return Err(dim_err(format!(
            "{k} similarity rows but boxes {:?}, anchors {:?}",
            pred_boxes.shape(),
            anchors.shape()
        )));
    }
    let mut best: Vec<Option<(f64, usize)>> = vec![None; k];
    for (g, ann) in gt.annotations.iter().enumerate() {
        if ann.text_index >= c {
            return Err(input_err(format!("text index {} ≥ vocabulary {c}", ann.text_index)));
        }
        let mut cands: Vec<(f64, usize)> = (0..k)
            .filter(|&p| ann.bbox.contains(anchors.row(p)[0], anchors.row(p)[1]))
            .map(|p| {
                let cls = sigmoid_scalar(sim.get(p, ann.text_index)).powf(cfg.alpha);
                let iou = box_row(pred_boxes, p).iou(&ann.bbox).powf(cfg.beta);
                (cls * iou, p)
            })
            .collect();
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(t, p) in cands.iter().take(cfg.top_k) {
            // gts are visited in index order, so only a strictly larger metric
            // takes a prediction away from an earlier gt.
            if best[p].is_none_or(|(bt, _)| t > bt) {
                best[p] = Some((t, g));
            }
        }
    }
    let labels = best
        .into_iter()
        .map(|b| b.map(|(_, g)| Positive { gt: g, text: gt.annotations[g].text_index }))
        .collect();
    Ok(Assignment { labels })
}

/// Mean cross-entropy of each positive's softmax over the vocabulary against
/// its assigned text; zero without positives.
pub fn region_text_contrastive_loss(sim: &SimilarityMatrix, assign: &Assignment) -> Result<f64> {
    let (k, c) = sim.values.dims2()?;
    if assign.labels.len() != k {
        return Err(dim_err(format!("{} labels for {k} predictions", assign.labels.len())));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (p, pos) in assign.positives() {
        if pos.text >= c {
            return Err(input_err(format!("text index {} ≥ vocabulary {c}", pos.text)));
        }
        total -= log_softmax_slice(sim.values.row(p))[pos.text];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `1 − IoU(pred, gt)`.
pub fn iou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let inter = pred.intersection(gt);
    let union = pred.area() + gt.area() - inter;
    Ok((union - inter) / union)
}

/// Distribution focal loss for one box: `logits` is `4 × n_bins`, `targets`
/// holds the four side offsets in bin units.
pub fn dfl_loss(logits: &Tensor, targets: &[f64; 4]) -> Result<f64> {
    let (sides, bins) = logits.dims2()?;
    if sides != 4 || bins < 2 {
        return Err(dim_err(format!("expected 4×n logits, got {:?}", logits.shape())));
    }
    let mut sum = 0.0;
    for (side, &y) in targets.iter().enumerate() {
        if !(y >= 0.0 && y < (bins - 1) as f64) {
            return Err(input_err(format!("target {y} outside [0, {})", bins - 1)));
        }
        let i = y.floor() as usize;
        let lp = log_softmax_slice(logits.row(side));
        let (wl, wr) = ((i + 1) as f64 - y, y - i as f64);
        sum -= wl * lp[i] + wr * lp[i + 1];
    }
    Ok(sum / 4.0)
}

/// Largest target allowed when converting gt sides to bin units.
pub fn dfl_target_cap(n_bins: usize) -> f64 {
    (n_bins - 1) as f64 - 0.01
}

/// Side distances from an anchor to a gt box, in bins, clipped to the
/// representable range.
pub fn dfl_targets(anchor: [f64; 2], stride: f64, gt: &BBox, n_bins: usize) -> [f64; 4] {
    let [cx, cy] = anchor;
    let [x1, y1, x2, y2] = gt.0;
    let cap = dfl_target_cap(n_bins);
    [cx - x1, cy - y1, x2 - cx, y2 - cy].map(|d| (d / stride).clamp(0.0, cap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub contrastive: f64,
    pub iou: f64,
    pub dfl: f64,
    pub total: f64,
}

/// `L = L_con + λ·(L_iou + L_dfl)`, with `λ` from the sample source and
/// regression averaged over positives whose gt box is marked accurate.
pub fn total_loss(
    sim: &SimilarityMatrix,
    head: &HeadOutput,
    gt: &GroundTruth,
    assign: &Assignment,
) -> Result<LossBreakdown> {
    let contrastive = region_text_contrastive_loss(sim, assign)?;
    if gt.source.regression_weight() == 0.0 {
        return Ok(LossBreakdown { contrastive, iou: 0.0, dfl: 0.0, total: contrastive });
    }
    let (_, _, bins) = head.box_dist.dims3()?;
    let (mut iou, mut dfl, mut n) = (0.0, 0.0, 0usize);
    for (p, pos) in assign.positives() {
        let ann = gt
            .annotations
            .get(pos.gt)
            .ok_or_else(|| input_err(format!("positive {p} points at missing gt {}", pos.gt)))?;
        if !ann.box_accurate {
            continue;
        }
        iou += iou_loss(&box_row(&head.boxes, p), &ann.bbox)?;
        let anchor = [head.anchors.row(p)[0], head.anchors.row(p)[1]];
        let targets = dfl_targets(anchor, head.strides[p], &ann.bbox, bins);
        let logits = Tensor::matrix(4, bins, head.box_dist.data()[p * 4 * bins..(p + 1) * 4 * bins].to_vec())?;
        dfl += dfl_loss(&logits, &targets)?;
        n += 1;
    }
    if n > 0 {
        iou /= n as f64;
        dfl /= n as f64;
    }
    let w = gt.source.regression_weight();
    Ok(LossBreakdown { contrastive, iou, dfl, total: contrastive + w * (iou + dfl) })
}
