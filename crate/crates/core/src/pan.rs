//! Vision-language path aggregation: a toy strided backbone, text-guided CSP
//! layers (max-sigmoid attention) and pooled-token attention that refreshes the
//! text embeddings from the image.
//!
//! Forward order, fixed because the re-parameterized path mirrors it:
//!
//! ```text
//! T5 = C5
//! T4 = tcsp(C4 + up(T5), W)        td4
//! T3 = tcsp(C3 + up(T4), W)        td3
//! W' = W + MHA(W, pool(T3, T4, T5))
//! P3 = T3
//! P4 = tcsp(T4 + down(P3), W')     bu4
//! P5 = tcsp(T5 + down(P4), W')     bu5
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, input_err, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::{matmul, max_pool_grid, sigmoid_scalar, softmax_slice, dot, Tensor};
use crate::text::TextEmbeddings;

/// Cells per side when pooling a level into tokens.
pub const POOL_GRID: usize = 3;
/// Pooled tokens over the three levels.
pub const POOL_TOKENS: usize = 3 * POOL_GRID * POOL_GRID;
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Three feature maps at strides 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: [Tensor; 3],
}

impl FeaturePyramid {
    pub fn new(p3: Tensor, p4: Tensor, p5: Tensor) -> Result<Self> {
        let (h3, w3, d3) = p3.dims3()?;
        let (h4, w4, d4) = p4.dims3()?;
        let (h5, w5, d5) = p5.dims3()?;
        if d3 != d4 || d4 != d5 {
            return Err(dim_err(format!("channel dims {d3}/{d4}/{d5} differ")));
        }
        if h3 != 2 * h4 || h4 != 2 * h5 || w3 != 2 * w4 || w4 != 2 * w5 {
            return Err(dim_err(format!(
                "extents must halve per level: {h3}×{w3}, {h4}×{w4}, {h5}×{w5}"
            )));
        }
        Ok(Self { levels: [p3, p4, p5] })
    }

    /// Level `l` in `3..=5`.
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - 3]
    }

    pub fn levels(&self) -> &[Tensor; 3] {
        &self.levels
    }

    pub fn dim(&self) -> usize {
        self.levels[0].last_dim()
    }

    /// Spatial cells over all levels.
    pub fn cell_count(&self) -> usize {
        self.levels.iter().map(Tensor::n_rows).sum()
    }

    /// A random pyramid whose smallest level is `h5×w5`.
    pub fn random(h5: usize, w5: usize, dim: usize, rng: &mut SeededRng) -> Result<Self> {
        Self::new(
            rng::uniform(rng, &[4 * h5, 4 * w5, dim], 1.0),
            rng::uniform(rng, &[2 * h5, 2 * w5, dim], 1.0),
            rng::uniform(rng, &[h5, w5, dim], 1.0),
        )
    }
}

/// Weights of one text-guided CSP layer with channel dim `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcspParams {
    /// `D/2 × D/2`, applied to the first channel half.
    pub bottleneck: Tensor,
    /// `D × D/2`, maps text embeddings into the bottleneck's channel space.
    pub text_proj: Tensor,
    /// `D × D`, mixes the concatenated halves.
    pub mix: Tensor,
}

/// Multi-head attention projections, all `D × D`, no biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolAttnParams {
    pub heads: usize,
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerId {
    TopDown4,
    TopDown3,
    BottomUp4,
    BottomUp5,
}

impl LayerId {
    pub const ALL: [LayerId; 4] =
        [LayerId::TopDown4, LayerId::TopDown3, LayerId::BottomUp4, LayerId::BottomUp5];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::TopDown4 => "top_down_4",
            LayerId::TopDown3 => "top_down_3",
            LayerId::BottomUp4 => "bottom_up_4",
            LayerId::BottomUp5 => "bottom_up_5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub dim: usize,
    pub top_down_4: TcspParams,
    pub top_down_3: TcspParams,
    pub bottom_up_4: TcspParams,
    pub bottom_up_5: TcspParams,
    pub pool_attn: PoolAttnParams,
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize) -> Tensor {
    rng::uniform(rng, &[rows, cols], (3.0 / rows as f64).sqrt())
}

fn check_shape(t: &Tensor, want: [usize; 2], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(dim_err(format!("{what}: shape {:?}, expected {want:?}", t.shape())));
    }
    Ok(())
}

impl TcspParams {
    fn seeded(dim: usize, rng: &mut SeededRng) -> Self {
        let half = dim / 2;
        Self {
            bottleneck: glorot(rng, half, half),
            text_proj: glorot(rng, dim, half),
            mix: glorot(rng, dim, dim),
        }
    }

    fn identity(dim: usize) -> Result<Self> {
        let half = dim / 2;
        let mut text_proj = Tensor::zeros(&[dim, half])?;
        for i in 0..half {
            text_proj.data_mut()[i * half + i] = 1.0;
        }
        Ok(Self { bottleneck: Tensor::identity(half)?, text_proj, mix: Tensor::identity(dim)? })
    }

    fn validate(&self, dim: usize, what: &str) -> Result<()> {
        let half = dim / 2;
        check_shape(&self.bottleneck, [half, half], what)?;
        check_shape(&self.text_proj, [dim, half], what)?;
        check_shape(&self.mix, [dim, dim], what)
    }
}

impl FusionParams {
    /// Seeded random initialization.
    pub fn seeded(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        check_dims(dim, heads)?;
        let mut r = rng::seeded(seed);
        let p = Self {
            dim,
            top_down_4: TcspParams::seeded(dim, &mut r),
            top_down_3: TcspParams::seeded(dim, &mut r),
            bottom_up_4: TcspParams::seeded(dim, &mut r),
            bottom_up_5: TcspParams::seeded(dim, &mut r),
            pool_attn: PoolAttnParams {
                heads,
                query: glorot(&mut r, dim, dim),
                key: glorot(&mut r, dim, dim),
                value: glorot(&mut r, dim, dim),
                output: glorot(&mut r, dim, dim),
            },
        };
        Ok(p)
    }

    /// Identity CSP projections and a zero value projection, so the text
    /// update is the identity.
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        check_dims(dim, heads)?;
        let tc = TcspParams::identity(dim)?;
        Ok(Self {
            dim,
            top_down_4: tc.clone(),
            top_down_3: tc.clone(),
            bottom_up_4: tc.clone(),
            bottom_up_5: tc,
            pool_attn: PoolAttnParams {
                heads,
                query: Tensor::identity(dim)?,
                key: Tensor::identity(dim)?,
                value: Tensor::zeros(&[dim, dim])?,
                output: Tensor::identity(dim)?,
            },
        })
    }

    pub fn layer(&self, id: LayerId) -> &TcspParams {
        match id {
            LayerId::TopDown4 => &self.top_down_4,
            LayerId::TopDown3 => &self.top_down_3,
            LayerId::BottomUp4 => &self.bottom_up_4,
            LayerId::BottomUp5 => &self.bottom_up_5,
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> &mut TcspParams {
        match id {
            LayerId::TopDown4 => &mut self.top_down_4,
            LayerId::TopDown3 => &mut self.top_down_3,
            LayerId::BottomUp4 => &mut self.bottom_up_4,
            LayerId::BottomUp5 => &mut self.bottom_up_5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.dim, self.pool_attn.heads)?;
        for id in LayerId::ALL {
            self.layer(id).validate(self.dim, id.name())?;
        }
        let pa = &self.pool_attn;
        for (t, n) in [(&pa.query, "query"), (&pa.key, "key"), (&pa.value, "value"), (&pa.output, "output")] {
            check_shape(t, [self.dim, self.dim], n)?;
        }
        Ok(())
    }
}

pub(crate) fn check_dims(dim: usize, heads: usize) -> Result<()> {
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(dim_err(format!("channel dim {dim} must be even")));
    }
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(dim_err(format!("{heads} heads do not divide dim {dim}")));
    }
    Ok(())
}

/// Regroups `p×p` spatial patches into channels: `H×W×D → (H/p)×(W/p)×(p²D)`.
fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    if h % p != 0 || w % p != 0 {
        return Err(dim_err(format!("{h}×{w} not divisible by {p}")));
    }
    let (oh, ow) = (h / p, w / p);
    let mut out = Vec::with_capacity(x.len());
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..p {
                for dx in 0..p {
                    let idx = ((oy * p + dy) * w + ox * p + dx) * d;
                    out.extend_from_slice(&x.data()[idx..idx + d]);
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, p * p * d], out)
}

/// Applies a `D_in × D_out` matrix at every position of an `H×W×D_in` map.
pub fn project(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    let flat = x.clone().reshape(vec![h * w, d])?;
    let (_, out) = m.dims2()?;
    matmul(&flat, m)?.reshape(vec![h, w, out])
}

/// Deterministic stand-in for the image encoder: bias-free strided patch
/// projections to `{C3, C4, C5}` at strides 8/16/32.
pub fn toy_backbone(image: &Tensor, dim: usize, seed: u64) -> Result<FeaturePyramid> {
    let (h, w, ch) = image.dims3()?;
    if ch != 3 {
        return Err(dim_err(format!("image must have 3 channels, got {ch}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(dim_err(format!("image {h}×{w} not divisible by 32")));
    }
    let mut r = rng::seeded(seed);
    let stem = glorot(&mut r, 8 * 8 * 3, dim);
    let down4 = glorot(&mut r, 4 * dim, dim);
    let down5 = glorot(&mut r, 4 * dim, dim);
    let c3 = project(&patchify(image, 8)?, &stem)?;
    let c4 = project(&patchify(&c3, 2)?, &down4)?;
    let c5 = project(&patchify(&c4, 2)?, &down5)?;
    FeaturePyramid::new(c3, c4, c5)
}

/// `X' = X · σ(max_j X·W_jᵀ)` at every position.
pub fn max_sigmoid_attention(x: &Tensor, text: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    let (c, td) = text.dims2()?;
    if td != d {
        return Err(dim_err(format!("text dim {td} vs feature dim {d}")));
    }
    if c == 0 {
        return Err(input_err("no text embeddings"));
    }
    let mut out = Vec::with_capacity(x.len());
    for px in x.rows() {
        let best = text.rows().map(|t| dot(px, t)).fold(f64::NEG_INFINITY, f64::max);
        let gate = sigmoid_scalar(best);
        out.extend(px.iter().map(|v| v * gate));
    }
    Tensor::new(vec![h, w, d], out)
}

/// Splits channels into `[first half | second half]`.
pub(crate) fn split_halves(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w, d) = x.dims3()?;
    if d % 2 != 0 {
        return Err(dim_err(format!("odd channel dim {d}")));
    }
    let half = d / 2;
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for px in x.rows() {
        a.extend_from_slice(&px[..half]);
        b.extend_from_slice(&px[half..]);
    }
    Ok((Tensor::new(vec![h, w, half], a)?, Tensor::new(vec![h, w, half], b)?))
}

pub(crate) fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, da) = a.dims3()?;
    let (h2, w2, db) = b.dims3()?;
    if (h, w) != (h2, w2) {
        return Err(dim_err("concat: spatial extents differ"));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.rows().zip(b.rows()) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(vec![h, w, da + db], out)
}

/// How a T-CSP layer injects text into its bottleneck features. The plain
/// path is [`max_sigmoid_attention`]; the deployment path folds the text into
/// a 1×1 convolution.
pub trait TextGuide {
    fn guide(&self, layer: LayerId, features: &Tensor, text: &Tensor) -> Result<Tensor>;
}

pub struct MaxSigmoidGuide;

impl TextGuide for MaxSigmoidGuide {
    fn guide(&self, _: LayerId, features: &Tensor, text: &Tensor) -> Result<Tensor> {
        max_sigmoid_attention(features, text)
    }
}

/// Intermediate values of one T-CSP layer.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub id: LayerId,
    /// Bottleneck output, the input to the text guide.
    pub guide_input: Tensor,
    /// Projected text (`C × D/2`) the guide attended over.
    pub guide_text: Tensor,
    pub guide_output: Tensor,
    pub output: Tensor,
}

fn tcsp_traced(
    x: &Tensor,
    text: &Tensor,
    p: &TcspParams,
    id: LayerId,
    guide: &dyn TextGuide,
) -> Result<LayerTrace> {
    let (a, b) = split_halves(x)?;
    let z = project(&a, &p.bottleneck)?;
    let wt = matmul(text, &p.text_proj)?;
    let g = guide.guide(id, &z, &wt)?;
    let output = project(&concat_channels(&g, &b)?, &p.mix)?;
    Ok(LayerTrace { id, guide_input: z, guide_text: wt, guide_output: g, output })
}

/// Text-guided CSP layer: the first channel half goes through the bottleneck
/// and max-sigmoid attention, is concatenated with the untouched second half,
/// and the result is mixed back to `D` channels.
pub fn t_csplayer(x: &Tensor, text: &Tensor, p: &TcspParams) -> Result<Tensor> {
    Ok(tcsp_traced(x, text, p, LayerId::TopDown4, &MaxSigmoidGuide)?.output)
}

/// `X̃`: 3×3 max-pooled tokens from levels 3, 4, 5 in that order.
pub fn pool_tokens(pyramid: &FeaturePyramid) -> Result<Tensor> {
    let d = pyramid.dim();
    let mut data = Vec::with_capacity(POOL_TOKENS * d);
    for level in pyramid.levels() {
        data.extend(max_pool_grid(level, POOL_GRID)?.into_data());
    }
    Tensor::matrix(POOL_TOKENS, d, data)
}

/// Values retained by [`multi_head_attention`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct MhaCache {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// One `C × N` attention matrix per head.
    pub attn: Vec<Tensor>,
    pub out: Tensor,
}

pub(crate) fn mha_forward(query: &Tensor, tokens: &Tensor, p: &PoolAttnParams) -> Result<MhaCache> {
    let (c, d) = query.dims2()?;
    let (n, td) = tokens.dims2()?;
    if td != d {
        return Err(dim_err(format!("token dim {td} vs text dim {d}")));
    }
    check_dims(d, p.heads)?;
    let hd = d / p.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let q = matmul(query, &p.query)?;
    let k = matmul(tokens, &p.key)?;
    let v = matmul(tokens, &p.value)?;
    let mut heads_out = vec![0.0; c * d];
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * hd..(h + 1) * hd;
        let mut a = Vec::with_capacity(c * n);
        for i in 0..c {
            let qi = &q.row(i)[cols.clone()];
            let logits: Vec<f64> = (0..n).map(|t| dot(qi, &k.row(t)[cols.clone()]) * scale).collect();
            let probs = softmax_slice(&logits);
            for (t, &pr) in probs.iter().enumerate() {
                let vt = &v.row(t)[cols.clone()];
                for (o, &vv) in heads_out[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(vt) {
                    *o += pr * vv;
                }
            }
            a.extend(probs);
        }
        attn.push(Tensor::matrix(c, n, a)?);
    }
    let heads_out = Tensor::matrix(c, d, heads_out)?;
    let out = matmul(&heads_out, &p.output)?;
    Ok(MhaCache { q, k, v, attn, out })
}

/// `W' = W + MultiHeadAttention(W, X̃, X̃)` over the pooled pyramid tokens.
pub fn image_pooling_attention(text: &Tensor, pyramid: &FeaturePyramid, p: &PoolAttnParams) -> Result<Tensor> {
    text_update(text, &pool_tokens(pyramid)?, p)
}

/// The residual attention update given precomputed tokens.
pub fn text_update(text: &Tensor, tokens: &Tensor, p: &PoolAttnParams) -> Result<Tensor> {
    text.add(&mha_forward(text, tokens, p)?.out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    let mut out = Vec::with_capacity(4 * x.len());
    for y in 0..2 * h {
        for xx in 0..2 * w {
            out.extend_from_slice(x.row((y / 2) * w + xx / 2));
        }
    }
    Tensor::new(vec![2 * h, 2 * w, d], out)
}

/// 2×2 max pooling with stride 2.
pub fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (h, w, d) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err(format!("cannot halve {h}×{w}")));
    }
    let mut out = Vec::with_capacity(x.len() / 4);
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            let mut cell = vec![f64::NEG_INFINITY; d];
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                for (m, &v) in cell.iter_mut().zip(x.row((2 * y + dy) * w + 2 * xx + dx)) {
                    *m = m.max(v);
                }
            }
            out.extend(cell);
        }
    }
    Tensor::new(vec![h / 2, w / 2, d], out)
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pyramid: FeaturePyramid,
    /// Updated text `W'` (rows are not renormalized).
    pub text: Tensor,
    /// Pooled tokens the text update attended over.
    pub tokens: Tensor,
    /// Post-top-down maps `{T3, T4, T5}` the tokens were pooled from.
    pub top_down: FeaturePyramid,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn layer(&self, id: LayerId) -> &LayerTrace {
        self.layers.iter().find(|l| l.id == id).expect("every layer is traced")
    }
}

/// Runs the fusion network with a pluggable text guide.
pub fn repvlpan_forward_with(
    input: &FeaturePyramid,
    text: &Tensor,
    p: &FusionParams,
    guide: &dyn TextGuide,
) -> Result<ForwardTrace> {
    let (c, td) = text.dims2()?;
    if c == 0 {
        return Err(input_err("no text embeddings"));
    }
    if td != p.dim || input.dim() != p.dim {
        return Err(dim_err(format!(
            "params dim {} vs text dim {td} vs pyramid dim {}",
            p.dim,
            input.dim()
        )));
    }
    let [c3, c4, c5] = input.levels();
    let mut layers = Vec::with_capacity(4);

    let t5 = c5.clone();
    let l = tcsp_traced(&c4.add(&upsample2(&t5)?)?, text, &p.top_down_4, LayerId::TopDown4, guide)?;
    let t4 = l.output.clone();
    layers.push(l);
    let l = tcsp_traced(&c3.add(&upsample2(&t4)?)?, text, &p.top_down_3, LayerId::TopDown3, guide)?;
    let t3 = l.output.clone();
    layers.push(l);

    let top_down = FeaturePyramid::new(t3.clone(), t4.clone(), t5.clone())?;
    let tokens = pool_tokens(&top_down)?;
    let new_text = text_update(text, &tokens, &p.pool_attn)?;

    let p3 = t3;
    let l = tcsp_traced(&t4.add(&downsample2(&p3)?)?, &new_text, &p.bottom_up_4, LayerId::BottomUp4, guide)?;
    let p4 = l.output.clone();
    layers.push(l);
    let l = tcsp_traced(&t5.add(&downsample2(&p4)?)?, &new_text, &p.bottom_up_5, LayerId::BottomUp5, guide)?;
    let p5 = l.output.clone();
    layers.push(l);

    Ok(ForwardTrace {
        pyramid: FeaturePyramid::new(p3, p4, p5)?,
        text: new_text,
        tokens,
        top_down,
        layers,
    })
}

/// Fuses image features and text, returning `{P3, P4, P5}` and the updated
/// `C × D` text matrix.
pub fn repvlpan_forward(
    input: &FeaturePyramid,
    text: &TextEmbeddings,
    p: &FusionParams,
) -> Result<(FeaturePyramid, Tensor)> {
    let t = repvlpan_forward_with(input, text.matrix(), p, &MaxSigmoidGuide)?;
    Ok((t.pyramid, t.text))
}
