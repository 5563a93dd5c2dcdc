//! Decoupled detection head, text contrastive similarity, box decoding and
//! per-text NMS.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{dim_err, input_err, Result};
use crate::pan::{project, FeaturePyramid, STRIDES};
use crate::rng::{self, SeededRng};
use crate::tensor::{l2_normalize, matmul_nt, softmax_slice, Tensor};

pub const DEFAULT_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelHead {
    /// `D × D` object-embedding projection.
    pub embed: Tensor,
    /// `1 × D`.
    pub embed_bias: Tensor,
    /// `D × 4·n_bins` offset-distribution projection.
    pub box_proj: Tensor,
    /// `1 × 4·n_bins`.
    pub box_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub dim: usize,
    pub n_bins: usize,
    pub levels: [LevelHead; 3],
    /// Similarity scale.
    pub alpha: f64,
    /// Similarity shift.
    pub beta: f64,
}

impl HeadParams {
    pub fn seeded(dim: usize, n_bins: usize, seed: u64) -> Result<Self> {
        if n_bins < 2 {
            return Err(input_err("n_bins must be at least 2"));
        }
        let mut r = rng::seeded(seed);
        let level = |r: &mut SeededRng| LevelHead {
            embed: rng::uniform(r, &[dim, dim], (3.0 / dim as f64).sqrt()),
            embed_bias: Tensor::zeros(&[1, dim]).expect("dim > 0"),
            box_proj: rng::uniform(r, &[dim, 4 * n_bins], (3.0 / dim as f64).sqrt()),
            box_bias: Tensor::zeros(&[1, 4 * n_bins]).expect("bins > 0"),
        };
        Ok(Self {
            dim,
            n_bins,
            levels: [level(&mut r), level(&mut r), level(&mut r)],
            alpha: 1.0,
            beta: 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(input_err("n_bins must be at least 2"));
        }
        for (i, l) in self.levels.iter().enumerate() {
            let ok = l.embed.shape() == [self.dim, self.dim]
                && l.embed_bias.shape() == [1, self.dim]
                && l.box_proj.shape() == [self.dim, 4 * self.n_bins]
                && l.box_bias.shape() == [1, 4 * self.n_bins];
            if !ok {
                return Err(dim_err(format!("head level {} has inconsistent shapes", i + 3)));
            }
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(input_err("alpha/beta must be finite"));
        }
        Ok(())
    }
}

/// Per-anchor head outputs over the whole pyramid; level 3 first, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `K × 4` decoded boxes.
    pub boxes: Tensor,
    /// `K × D` object embeddings.
    pub embeddings: Tensor,
    /// `K × 4 × n_bins` offset logits, sides ordered left, top, right, bottom.
    pub box_dist: Tensor,
    /// `K × 2` anchor centers.
    pub anchors: Tensor,
    pub strides: Vec<f64>,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.strides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strides.is_empty()
    }
}

/// Object-text similarity `s = α·cos(e_k, w_j) + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    /// `K × C`.
    pub values: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

impl SimilarityMatrix {
    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values.row(k)[j]
    }

    pub fn n_texts(&self) -> usize {
        self.values.last_dim()
    }
}

pub fn contrastive_similarity(e: &Tensor, w: &Tensor, alpha: f64, beta: f64) -> Result<SimilarityMatrix> {
    let cos = matmul_nt(&l2_normalize(e)?, &l2_normalize(w)?)?;
    Ok(SimilarityMatrix { values: cos.map(|c| alpha * c + beta)?, alpha, beta })
}

/// Cell centers and strides for every anchor, level 3 first.
pub fn anchor_points(pyramid: &FeaturePyramid) -> Result<(Tensor, Vec<f64>)> {
    let mut pts = Vec::new();
    let mut strides = Vec::new();
    for (level, &s) in pyramid.levels().iter().zip(&STRIDES) {
        let (h, w, _) = level.dims3()?;
        let s = s as f64;
        for y in 0..h {
            for x in 0..w {
                pts.extend([(x as f64 + 0.5) * s, (y as f64 + 0.5) * s]);
                strides.push(s);
            }
        }
    }
    Ok((Tensor::matrix(strides.len(), 2, pts)?, strides))
}

/// Expected bin index `Σ i·softmax(logits)_i`.
pub fn expected_offset(logits: &[f64]) -> f64 {
    softmax_slice(logits).iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}

/// Decodes distribution logits into boxes clamped to `[0, width] × [0, height]`.
pub fn decode_boxes(
    box_dist: &Tensor,
    anchors: &Tensor,
    strides: &[f64],
    image_size: (f64, f64),
) -> Result<Tensor> {
    let (k, sides, bins) = box_dist.dims3()?;
    if sides != 4 || bins < 2 {
        return Err(dim_err(format!("box_dist must be K×4×n (n ≥ 2), got {:?}", box_dist.shape())));
    }
    if anchors.shape() != [k, 2] || strides.len() != k {
        return Err(dim_err("anchors/strides do not match box_dist"));
    }
    let (w, h) = image_size;
    let mut out = Vec::with_capacity(k * 4);
    for i in 0..k {
        let s = strides[i];
        let [cx, cy] = [anchors.row(i)[0], anchors.row(i)[1]];
        let off: Vec<f64> = (0..4).map(|side| expected_offset(box_dist.row(i * 4 + side)) * s).collect();
        out.extend([
            (cx - off[0]).clamp(0.0, w),
            (cy - off[1]).clamp(0.0, h),
            (cx + off[2]).clamp(0.0, w),
            (cy + off[3]).clamp(0.0, h),
        ]);
    }
    Tensor::matrix(k, 4, out)
}

/// Per-cell linear projections standing in for the two-conv decoupled head.
pub fn head_forward(pyramid: &FeaturePyramid, params: &HeadParams) -> Result<HeadOutput> {
    params.validate()?;
    if pyramid.dim() != params.dim {
        return Err(dim_err(format!("pyramid dim {} vs head dim {}", pyramid.dim(), params.dim)));
    }
    let n = params.n_bins;
    let mut emb = Vec::new();
    let mut dist = Vec::new();
    for (level, lp) in pyramid.levels().iter().zip(&params.levels) {
        let e = project(level, &lp.embed)?;
        for px in e.rows() {
            emb.extend(px.iter().zip(lp.embed_bias.data()).map(|(a, b)| a + b));
        }
        let d = project(level, &lp.box_proj)?;
        for px in d.rows() {
            dist.extend(px.iter().zip(lp.box_bias.data()).map(|(a, b)| a + b));
        }
    }
    let (anchors, strides) = anchor_points(pyramid)?;
    let k = strides.len();
    let embeddings = Tensor::matrix(k, params.dim, emb)?;
    let box_dist = Tensor::new(vec![k, 4, n], dist)?;
    let (h3, w3, _) = pyramid.level(3).dims3()?;
    let image = ((w3 * STRIDES[0]) as f64, (h3 * STRIDES[0]) as f64);
    let boxes = decode_boxes(&box_dist, &anchors, &strides, image)?;
    Ok(HeadOutput { boxes, embeddings, box_dist, anchors, strides })
}

/// One candidate for [`nms`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub bbox: BBox,
    pub text_id: usize,
    pub score: f64,
}

/// Greedy NMS within each text group. Returns kept input indices ordered by
/// score descending, ties by input index. A box is suppressed when its IoU
/// with an already kept box of the same text exceeds `iou_thresh`.
pub fn nms(dets: &[Scored], iou_thresh: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(input_err(format!("iou threshold {iou_thresh} outside [0, 1]")));
    }
    for (i, d) in dets.iter().enumerate() {
        d.bbox.validate().map_err(|e| input_err(format!("detection {i}: {e}")))?;
        if !d.score.is_finite() {
            return Err(input_err(format!("detection {i} has non-finite score")));
        }
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&j| dets[j].text_id == d.text_id && dets[j].bbox.iou(&d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(i);
        }
    }
    Ok(kept)
}
