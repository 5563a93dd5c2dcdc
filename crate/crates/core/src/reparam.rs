//! Deployment-time re-parameterization of the fusion network.
//!
//! With an offline vocabulary, the text side of every T-CSP layer becomes a
//! fixed `C × D × 1 × 1` convolution, so the text attention reduces to a conv,
//! a channel max and a sigmoid gate. [`verify_equivalence`] runs the folded
//! network against the plain one on random inputs.
//!
//! Two text updates live side by side: the multi-head form used by the network
//! ([`crate::pan::text_update`]) and a projection-free single-head form
//! ([`reparam_text_update`]). They are not equivalent in general; the verifier
//! reports their gap without asserting on it.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::pan::{
    self, repvlpan_forward_with, FeaturePyramid, FusionParams, LayerId, MaxSigmoidGuide, PoolAttnParams,
    TextGuide, POOL_GRID,
};
use crate::rng;
use crate::tensor::{matmul, sigmoid_scalar, softmax_lastdim, Tensor};
use crate::text::TextEmbeddings;

/// Text embeddings laid out as 1×1 convolution kernels, shape `[C, D, 1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedConv {
    pub weights: Tensor,
}

impl FoldedConv {
    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

pub fn fold_tcsp(text: &Tensor) -> Result<FoldedConv> {
    let (c, d) = text.dims2()?;
    Ok(FoldedConv { weights: text.clone().reshape(vec![c, d, 1, 1])? })
}

pub fn unfold_tcsp(folded: &FoldedConv) -> Result<Tensor> {
    folded.weights.clone().reshape(vec![folded.out_channels(), folded.in_channels()])
}

/// `H×W×D → D×H×W`.
fn to_channels_first(x: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    let mut out = vec![0.0; x.len()];
    for (pos, px) in x.rows().enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            out[ch * h * w + pos] = v;
        }
    }
    Tensor::new(vec![d, h, w], out)
}

/// 1×1 convolution over an `H×W×D` map; returns the `C×H×W` response.
pub fn conv1x1(x: &Tensor, folded: &FoldedConv) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    if folded.in_channels() != d {
        return Err(dim_err(format!("kernel expects {} channels, map has {d}", folded.in_channels())));
    }
    let planes = to_channels_first(x)?;
    let hw = h * w;
    let c = folded.out_channels();
    let mut out = vec![0.0; c * hw];
    for oc in 0..c {
        let k = &folded.weights.data()[oc * d..(oc + 1) * d];
        let dst = &mut out[oc * hw..(oc + 1) * hw];
        for (ic, &wv) in k.iter().enumerate() {
            let src = &planes.data()[ic * hw..(ic + 1) * hw];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += wv * s;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `X' = X ⊙ σ(max_c Conv(X, W))`.
pub fn reparam_tcsp_forward(x: &Tensor, folded: &FoldedConv) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    let resp = conv1x1(x, folded)?;
    let hw = h * w;
    let mut gate = vec![f64::NEG_INFINITY; hw];
    for plane in resp.data().chunks_exact(hw) {
        for (g, &v) in gate.iter_mut().zip(plane) {
            *g = g.max(v);
        }
    }
    let mut out = Vec::with_capacity(x.len());
    for (px, m) in x.rows().zip(&gate) {
        let s = sigmoid_scalar(*m);
        out.extend(px.iter().map(|v| v * s));
    }
    Tensor::new(vec![h, w, d], out)
}

/// The 27 pooled tokens; same routine the network uses.
pub fn pool_tokens(pyramid: &FeaturePyramid) -> Result<Tensor> {
    pan::pool_tokens(pyramid)
}

/// Projection-free single-head update `W + softmax(W·X̃ᵀ)·X̃`.
pub fn reparam_text_update(text: &Tensor, tokens: &Tensor) -> Result<Tensor> {
    let attn = softmax_lastdim(&crate::tensor::matmul_nt(text, tokens)?)?;
    text.add(&matmul(&attn, tokens)?)
}

/// Single-head attention params under which the multi-head update reduces to
/// [`reparam_text_update`]: the query projection cancels the `1/√D` scale and
/// the rest are identities.
pub fn simplified_update_params(dim: usize) -> Result<PoolAttnParams> {
    Ok(PoolAttnParams {
        heads: 1,
        query: Tensor::identity(dim)?.scale((dim as f64).sqrt())?,
        key: Tensor::identity(dim)?,
        value: Tensor::identity(dim)?,
        output: Tensor::identity(dim)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingLayout {
    pub grid: usize,
    pub levels: Vec<usize>,
}

/// Everything precomputed from an offline vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamBundle {
    /// Folded kernels for layers whose text is known offline (top-down).
    pub folded_text_conv: HashMap<LayerId, FoldedConv>,
    pub pooling_layout: PoolingLayout,
    /// The offline `C × D` text matrix used as the query of the text update.
    pub simplified_text_update_weights: Tensor,
}

impl ReparamBundle {
    pub fn build(params: &FusionParams, text: &TextEmbeddings) -> Result<Self> {
        params.validate()?;
        let w = text.matrix();
        let mut folded = HashMap::new();
        for id in [LayerId::TopDown4, LayerId::TopDown3] {
            folded.insert(id, fold_tcsp(&matmul(w, &params.layer(id).text_proj)?)?);
        }
        Ok(Self {
            folded_text_conv: folded,
            pooling_layout: PoolingLayout { grid: POOL_GRID, levels: vec![3, 4, 5] },
            simplified_text_update_weights: w.clone(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.simplified_text_update_weights.shape()[0]
    }
}

/// Text guide that runs the folded convolution. Top-down layers use the
/// bundle's precomputed kernels; bottom-up layers fold the runtime text.
pub struct FoldedGuide<'a> {
    pub bundle: &'a ReparamBundle,
    /// Layer whose kernels get perturbed, for fault injection.
    pub corrupt: Option<LayerId>,
}

impl TextGuide for FoldedGuide<'_> {
    fn guide(&self, layer: LayerId, features: &Tensor, text: &Tensor) -> Result<Tensor> {
        let mut folded = match self.bundle.folded_text_conv.get(&layer) {
            Some(f) => f.clone(),
            None => fold_tcsp(text)?,
        };
        if self.corrupt == Some(layer) {
            let w = folded.weights.data_mut();
            w[0] += 1.0;
            let n = w.len();
            w[n - 1] -= 1.0;
        }
        reparam_tcsp_forward(features, &folded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Whether the check gates the overall verdict.
    pub asserted: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub trials: usize,
    pub tol: f64,
    pub checks: Vec<CheckReport>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn check(&self, name: &str) -> Option<&CheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Names of asserted checks that failed.
    pub fn failures(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| c.asserted && !c.passed).map(|c| c.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub tol: f64,
    pub seed: u64,
    pub corrupt: Option<LayerId>,
}

/// `(max |a−b|, max |a−b| / max |b|)`.
fn deviation(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(dim_err("deviation: shape mismatch"));
    }
    let abs = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    Ok((abs, abs / b.max_abs().max(1e-300)))
}

const TCSP_CHECKS: [(LayerId, &str); 4] = [
    (LayerId::TopDown4, "tcsp_fold/top_down_4"),
    (LayerId::TopDown3, "tcsp_fold/top_down_3"),
    (LayerId::BottomUp4, "tcsp_fold/bottom_up_4"),
    (LayerId::BottomUp5, "tcsp_fold/bottom_up_5"),
];

struct TrialDeviation {
    tcsp: [(f64, f64); 4],
    tokens_identical: bool,
    tokens: (f64, f64),
    text_update: (f64, f64),
}

fn run_trial(params: &FusionParams, text: &TextEmbeddings, bundle: &ReparamBundle, opts: &VerifyOptions, trial: usize) -> Result<TrialDeviation> {
    let mut r = rng::seeded(rng::derive(opts.seed, &format!("trial-{trial}")));
    let h5 = 3 + trial % 2;
    let w5 = 3 + (trial / 2) % 2;
    let pyr = FeaturePyramid::random(h5, w5, params.dim, &mut r)?;
    let plain = repvlpan_forward_with(&pyr, text.matrix(), params, &MaxSigmoidGuide)?;
    let deployed = repvlpan_forward_with(&pyr, text.matrix(), params, &FoldedGuide { bundle, corrupt: opts.corrupt })?;
    let mut tcsp = [(0.0, 0.0); 4];
    for (slot, (id, _)) in tcsp.iter_mut().zip(TCSP_CHECKS) {
        *slot = deviation(&deployed.layer(id).guide_output, &plain.layer(id).guide_output)?;
    }
    let pooled = pool_tokens(&plain.top_down)?;
    let simplified = reparam_text_update(text.matrix(), &plain.tokens)?;
    Ok(TrialDeviation {
        tcsp,
        tokens_identical: pooled == plain.tokens,
        tokens: deviation(&pooled, &plain.tokens)?,
        text_update: deviation(&simplified, &plain.text)?,
    })
}

/// Runs the folded and plain networks on `trials` seeded random pyramids.
///
/// Asserted: every T-CSP layer's folded output matches the plain one within
/// `tol` (relative to the layer's output magnitude) and the pooled tokens are
/// bit-identical. Reported only: the gap between the multi-head and the
/// simplified text update.
pub fn verify_equivalence(params: &FusionParams, text: &TextEmbeddings, opts: VerifyOptions) -> Result<VerificationReport> {
    if opts.trials == 0 {
        return Err(crate::error::input_err("trials must be at least 1"));
    }
    if !(opts.tol > 0.0) {
        return Err(crate::error::input_err("tolerance must be positive"));
    }
    if text.dim() != params.dim {
        return Err(dim_err(format!("vocabulary dim {} vs params dim {}", text.dim(), params.dim)));
    }
    let bundle = ReparamBundle::build(params, text)?;
    let results: Vec<TrialDeviation> = (0..opts.trials)
        .into_par_iter()
        .map(|t| run_trial(params, text, &bundle, &opts, t))
        .collect::<Result<_>>()?;

    let fold_max = |f: &dyn Fn(&TrialDeviation) -> (f64, f64)| {
        results.iter().map(f).fold((0.0f64, 0.0f64), |(a, r), (x, y)| (a.max(x), r.max(y)))
    };
    let mut checks = Vec::new();
    for (i, (_, name)) in TCSP_CHECKS.iter().enumerate() {
        let (max_abs, max_rel) = fold_max(&|d| d.tcsp[i]);
        checks.push(CheckReport { name: (*name).into(), max_abs, max_rel, asserted: true, passed: max_rel <= opts.tol });
    }
    let (max_abs, max_rel) = fold_max(&|d| d.tokens);
    checks.push(CheckReport {
        name: "pool_tokens".into(),
        max_abs,
        max_rel,
        asserted: true,
        passed: results.iter().all(|d| d.tokens_identical),
    });
    let (max_abs, max_rel) = fold_max(&|d| d.text_update);
    checks.push(CheckReport {
        name: "text_update_divergence".into(),
        max_abs,
        max_rel,
        asserted: false,
        passed: max_rel <= opts.tol,
    });
    let passed = checks.iter().filter(|c| c.asserted).all(|c| c.passed);
    Ok(VerificationReport { trials: opts.trials, tol: opts.tol, checks, passed })
}
