//! Offline-vocabulary inference: image → backbone → fusion → head →
//! per-anchor best text → grouped NMS.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{dim_err, input_err, Error, Result};
use crate::head::{contrastive_similarity, head_forward, nms, HeadParams, Scored, DEFAULT_BINS};
use crate::pan::{repvlpan_forward, toy_backbone, FusionParams};
use crate::rng;
use crate::tensor::{sigmoid_scalar, Tensor};
use crate::text::TextEmbeddings;

pub const DEFAULT_IMAGE_SIZE: usize = 96;

/// All weights of the toy detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub backbone_seed: u64,
    pub fusion: FusionParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn seeded(dim: usize, heads: usize, n_bins: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            backbone_seed: rng::derive(seed, "backbone"),
            fusion: FusionParams::seeded(dim, heads, rng::derive(seed, "fusion"))?,
            head: HeadParams::seeded(dim, n_bins, rng::derive(seed, "head"))?,
        })
    }

    pub fn default_seeded(seed: u64) -> Result<Self> {
        Self::seeded(32, 4, DEFAULT_BINS, seed)
    }

    pub fn dim(&self) -> usize {
        self.fusion.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.head.validate()?;
        if self.fusion.dim != self.head.dim {
            return Err(dim_err(format!("fusion dim {} vs head dim {}", self.fusion.dim, self.head.dim)));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("params: {e}")))?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Keep anchors whose best score `σ(s)` exceeds this.
    pub score_thresh: f64,
    pub nms_thresh: f64,
    pub max_detections: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { score_thresh: 0.5, nms_thresh: 0.5, max_detections: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub text: String,
    pub score: f64,
}

/// `{"image_id", "detections": [{"box", "text", "score"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detections {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

impl Detections {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Uniform `[-1, 1)` image of shape `size × size × 3`.
pub fn random_image(size: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(rng::derive(seed, "image"));
    rng::uniform(&mut r, &[size, size, 3], 1.0)
}

/// Each anchor votes for its best-scoring text; anchors above the score
/// threshold go through per-text NMS. Output is ordered by score.
pub fn detect(image_id: &str, image: &Tensor, vocab: &TextEmbeddings, params: &ModelParams, cfg: &DetectConfig) -> Result<Detections> {
    params.validate()?;
    if vocab.is_empty() {
        return Err(input_err("empty vocabulary"));
    }
    if vocab.dim() != params.dim() {
        return Err(dim_err(format!("vocabulary dim {} vs model dim {}", vocab.dim(), params.dim())));
    }
    if !(0.0..=1.0).contains(&cfg.score_thresh) {
        return Err(input_err(format!("score threshold {} outside [0, 1]", cfg.score_thresh)));
    }
    let pyramid = toy_backbone(image, params.dim(), params.backbone_seed)?;
    let (fused, text) = repvlpan_forward(&pyramid, vocab, &params.fusion)?;
    let out = head_forward(&fused, &params.head)?;
    let sim = contrastive_similarity(&out.embeddings, &text, params.head.alpha, params.head.beta)?;
    let mut cands = Vec::new();
    for k in 0..out.len() {
        let row = sim.values.row(k);
        let (j, s) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bj, bs), (j, &s)| if s > bs { (j, s) } else { (bj, bs) });
        let score = sigmoid_scalar(s);
        if score > cfg.score_thresh {
            let b = out.boxes.row(k);
            cands.push(Scored { bbox: BBox([b[0], b[1], b[2], b[3]]), text_id: j, score });
        }
    }
    let kept = nms(&cands, cfg.nms_thresh)?;
    let detections = kept
        .into_iter()
        .take(cfg.max_detections)
        .map(|i| Detection { bbox: cands[i].bbox, text: vocab.nouns()[cands[i].text_id].clone(), score: cands[i].score })
        .collect();
    Ok(Detections { image_id: image_id.to_string(), detections })
}
