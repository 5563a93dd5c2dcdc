//! Hand-derived gradients for the similarity head, max-sigmoid attention,
//! pooled-token attention and the three losses, plus a central-difference
//! checker over seeded random instances.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::bbox::BBox;
use crate::error::{dim_err, input_err, Error, Result};
use crate::head::{contrastive_similarity, SimilarityMatrix};
use crate::loss::{dfl_loss, iou_loss, region_text_contrastive_loss, Assignment, Positive};
use crate::pan::{max_sigmoid_attention, mha_forward, text_update, PoolAttnParams, POOL_TOKENS};
use crate::rng::{self, SeededRng};
use crate::tensor::{dot, matmul, norm, sigmoid_scalar, softmax_slice, Tensor};

/// Gradient of `Σ G ⊙ (A·B)` with respect to `A`: `G·Bᵀ`.
pub fn matmul_grad_a(g: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(g, &b.transpose()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGrad {
    pub e: Tensor,
    pub w: Tensor,
    pub alpha: f64,
    pub beta: f64,
}

/// Backward of `s = α·L2(e)·L2(w)ᵀ + β` for upstream `g` (`K × C`).
pub fn similarity_backward(e: &Tensor, w: &Tensor, alpha: f64, g: &Tensor) -> Result<SimilarityGrad> {
    let (k, _) = e.dims2()?;
    let (c, _) = w.dims2()?;
    if g.shape() != [k, c] {
        return Err(dim_err("upstream gradient must be K×C"));
    }
    let en = crate::tensor::l2_normalize(e)?;
    let wn = crate::tensor::l2_normalize(w)?;
    // gradient w.r.t. the normalized rows
    let g_en = matmul(g, &wn)?.scale(alpha)?;
    let g_wn = matmul(&g.transpose()?, &en)?.scale(alpha)?;
    let through_norm = |x: &Tensor, xn: &Tensor, gx: &Tensor| -> Result<Tensor> {
        let mut out = Vec::with_capacity(x.len());
        for ((row, u), gr) in x.rows().zip(xn.rows()).zip(gx.rows()) {
            let n = norm(row);
            let proj = dot(gr, u);
            out.extend(gr.iter().zip(u).map(|(gi, ui)| (gi - proj * ui) / n));
        }
        Tensor::new(x.shape().to_vec(), out)
    };
    let cos = crate::tensor::matmul_nt(&en, &wn)?;
    Ok(SimilarityGrad {
        e: through_norm(e, &en, &g_en)?,
        w: through_norm(w, &wn, &g_wn)?,
        alpha: dot(g.data(), cos.data()),
        beta: g.data().iter().sum(),
    })
}

/// Backward of max-sigmoid attention: returns `(dX, dW)`.
pub fn max_sigmoid_backward(x: &Tensor, text: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    if g.shape() != x.shape() {
        return Err(dim_err("upstream gradient must match X"));
    }
    let d = x.last_dim();
    let mut dx = Vec::with_capacity(x.len());
    let mut dw = vec![0.0; text.len()];
    for (px, gp) in x.rows().zip(g.rows()) {
        let (j, m) = text
            .rows()
            .map(|t| dot(px, t))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
        let s = sigmoid_scalar(m);
        let ds = s * (1.0 - s) * dot(gp, px);
        let wj = text.row(j);
        dx.extend((0..d).map(|i| gp[i] * s + ds * wj[i]));
        for (o, &xi) in dw[j * d..(j + 1) * d].iter_mut().zip(px) {
            *o += ds * xi;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), dx)?, Tensor::new(text.shape().to_vec(), dw)?))
}

/// Backward of `W' = W + MHA(W, X̃, X̃)`: returns `(dW, dX̃)`.
pub fn text_update_backward(text: &Tensor, tokens: &Tensor, p: &PoolAttnParams, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let cache = mha_forward(text, tokens, p)?;
    let (c, d) = text.dims2()?;
    let (n, _) = tokens.dims2()?;
    let hd = d / p.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let d_heads = matmul(g, &p.output.transpose()?)?;
    let mut dq = vec![0.0; c * d];
    let mut dk = vec![0.0; n * d];
    let mut dv = vec![0.0; n * d];
    for (h, a) in cache.attn.iter().enumerate() {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..c {
            let go = &d_heads.row(i)[cols.clone()];
            let ai = a.row(i);
            // dA_it = go · v_t ; dV_t += a_it · go
            let da: Vec<f64> = (0..n).map(|t| dot(go, &cache.v.row(t)[cols.clone()])).collect();
            for t in 0..n {
                for (o, &gv) in dv[t * d + h * hd..t * d + (h + 1) * hd].iter_mut().zip(go) {
                    *o += ai[t] * gv;
                }
            }
            let inner: f64 = da.iter().zip(ai).map(|(x, y)| x * y).sum();
            for t in 0..n {
                let dlogit = ai[t] * (da[t] - inner) * scale;
                let kt = &cache.k.row(t)[cols.clone()];
                let qi = &cache.q.row(i)[cols.clone()];
                for (o, &kv) in dq[i * d + h * hd..i * d + (h + 1) * hd].iter_mut().zip(kt) {
                    *o += dlogit * kv;
                }
                for (o, &qv) in dk[t * d + h * hd..t * d + (h + 1) * hd].iter_mut().zip(qi) {
                    *o += dlogit * qv;
                }
            }
        }
    }
    let dq = Tensor::matrix(c, d, dq)?;
    let dk = Tensor::matrix(n, d, dk)?;
    let dv = Tensor::matrix(n, d, dv)?;
    let dw = g.add(&matmul(&dq, &p.query.transpose()?)?)?;
    let dx = matmul(&dk, &p.key.transpose()?)?.add(&matmul(&dv, &p.value.transpose()?)?)?;
    Ok((dw, dx))
}

/// Gradient of the mean contrastive loss with respect to the similarity values.
pub fn contrastive_backward(sim: &SimilarityMatrix, assign: &Assignment) -> Result<Tensor> {
    let (k, c) = sim.values.dims2()?;
    let n = assign.num_positives();
    let mut out = vec![0.0; k * c];
    if n == 0 {
        return Tensor::matrix(k, c, out);
    }
    for (p, pos) in assign.positives() {
        let probs = softmax_slice(sim.values.row(p));
        for (j, pr) in probs.into_iter().enumerate() {
            let target = if j == pos.text { 1.0 } else { 0.0 };
            out[p * c + j] = (pr - target) / n as f64;
        }
    }
    Tensor::matrix(k, c, out)
}

/// Gradient of `1 − IoU(pred, gt)` with respect to the predicted corners.
pub fn iou_loss_backward(pred: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    pred.validate()?;
    gt.validate()?;
    let [px1, py1, px2, py2] = pred.0;
    let [gx1, gy1, gx2, gy2] = gt.0;
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let (pw, ph) = (px2 - px1, py2 - py1);
    let overlap = iw > 0.0 && ih > 0.0;
    let inter = if overlap { iw * ih } else { 0.0 };
    let union = pw * ph + gt.area() - inter;

    // d(intersection)/d(pred corner)
    let di = if overlap {
        [
            if px1 > gx1 { -ih } else { 0.0 },
            if py1 > gy1 { -iw } else { 0.0 },
            if px2 < gx2 { ih } else { 0.0 },
            if py2 < gy2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let da = [-ph, -pw, ph, pw];
    let mut out = [0.0; 4];
    for i in 0..4 {
        let du = da[i] - di[i];
        out[i] = -(di[i] * union - inter * du) / (union * union);
    }
    Ok(out)
}

/// Gradient of [`dfl_loss`] with respect to its `4 × n` logits.
pub fn dfl_backward(logits: &Tensor, targets: &[f64; 4]) -> Result<Tensor> {
    dfl_loss(logits, targets)?;
    let (_, bins) = logits.dims2()?;
    let mut out = Vec::with_capacity(logits.len());
    for (side, &y) in targets.iter().enumerate() {
        let i = y.floor() as usize;
        let (wl, wr) = ((i + 1) as f64 - y, y - i as f64);
        let probs = softmax_slice(logits.row(side));
        // d/dz of −Σ w_b log p_b with Σ w_b = 1 is p − w.
        out.extend(probs.iter().enumerate().map(|(b, p)| {
            let w = if b == i { wl } else if b == i + 1 { wr } else { 0.0 };
            (p - w) / 4.0
        }));
    }
    Tensor::matrix(4, bins, out)
}

/// Operators with registered analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    Matmul,
    /// Contrastive similarity head.
    Similarity,
    MaxSigmoid,
    /// Pooled-token multi-head text update.
    TextUpdate,
    Contrastive,
    Iou,
    Dfl,
}

impl GradOp {
    pub const ALL: [GradOp; 7] =
        [GradOp::Matmul, GradOp::Similarity, GradOp::MaxSigmoid, GradOp::TextUpdate, GradOp::Contrastive, GradOp::Iou, GradOp::Dfl];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::Matmul => "matmul",
            GradOp::Similarity => "similarity",
            GradOp::MaxSigmoid => "max_sigmoid",
            GradOp::TextUpdate => "text_update",
            GradOp::Contrastive => "contrastive",
            GradOp::Iou => "iou",
            GradOp::Dfl => "dfl",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = Error;

    /// Accepts the op names plus the short ids `eq1`, `eq2`, `eq3` for the
    /// similarity, max-sigmoid and text-update ops.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq1" => return Ok(GradOp::Similarity),
            "eq2" => return Ok(GradOp::MaxSigmoid),
            "eq3" => return Ok(GradOp::TextUpdate),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| input_err(format!("unknown gradient op {s:?}")))
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> Result<f64>>;
type GradFn = Box<dyn Fn(&[f64]) -> Result<Vec<f64>>>;

/// A scalar function of a flat parameter vector and its claimed gradient.
struct Problem {
    x: Vec<f64>,
    f: ScalarFn,
    grad: GradFn,
}

fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
    dot(t.data(), r.data())
}

fn split(x: &[f64], at: usize) -> (&[f64], &[f64]) {
    x.split_at(at)
}

fn problem(op: GradOp, r: &mut SeededRng) -> Result<Problem> {
    Ok(match op {
        GradOp::Matmul => {
            let b = rng::uniform(r, &[4, 3], 1.0);
            let up = rng::uniform(r, &[5, 3], 1.0);
            let a = rng::uniform(r, &[5, 4], 1.0);
            let (b2, up2) = (b.clone(), up.clone());
            Problem {
                x: a.into_data(),
                f: Box::new(move |x| Ok(weighted_sum(&matmul(&Tensor::matrix(5, 4, x.to_vec())?, &b)?, &up))),
                grad: Box::new(move |_| Ok(matmul_grad_a(&up2, &b2)?.into_data())),
            }
        }
        GradOp::Similarity => {
            let (k, c, d) = (3, 4, 5);
            let e = rng::uniform(r, &[k, d], 1.0);
            let w = rng::uniform(r, &[c, d], 1.0);
            let up = rng::uniform(r, &[k, c], 1.0);
            let alpha = r.gen_range(0.5..3.0);
            let beta = r.gen_range(-1.0..1.0);
            let mut x = e.into_data();
            x.extend(w.into_data());
            x.extend([alpha, beta]);
            let unpack = move |x: &[f64]| -> Result<(Tensor, Tensor, f64, f64)> {
                let (e, rest) = split(x, k * d);
                let (w, ab) = split(rest, c * d);
                Ok((Tensor::matrix(k, d, e.to_vec())?, Tensor::matrix(c, d, w.to_vec())?, ab[0], ab[1]))
            };
            let up2 = up.clone();
            Problem {
                x,
                f: Box::new(move |x| {
                    let (e, w, a, b) = unpack(x)?;
                    Ok(weighted_sum(&contrastive_similarity(&e, &w, a, b)?.values, &up))
                }),
                grad: Box::new(move |x| {
                    let (e, w, a, _) = unpack(x)?;
                    let g = similarity_backward(&e, &w, a, &up2)?;
                    let mut out = g.e.into_data();
                    out.extend(g.w.into_data());
                    out.extend([g.alpha, g.beta]);
                    Ok(out)
                }),
            }
        }
        GradOp::MaxSigmoid => {
            let (h, w, d, c) = (2, 3, 4, 3);
            // Resample until every position's best text wins by a margin, so
            // finite differences never straddle the max.
            let (x, t) = loop {
                let x = rng::uniform(r, &[h, w, d], 1.0);
                let t = rng::uniform(r, &[c, d], 1.0);
                let ok = x.rows().all(|px| {
                    let mut s: Vec<f64> = t.rows().map(|tr| dot(px, tr)).collect();
                    s.sort_by(|a, b| b.total_cmp(a));
                    s[0] - s[1] > 1e-3
                });
                if ok {
                    break (x, t);
                }
            };
            let up = rng::uniform(r, &[h, w, d], 1.0);
            let mut flat = x.into_data();
            flat.extend(t.into_data());
            let unpack = move |x: &[f64]| -> Result<(Tensor, Tensor)> {
                let (a, b) = split(x, h * w * d);
                Ok((Tensor::new(vec![h, w, d], a.to_vec())?, Tensor::matrix(c, d, b.to_vec())?))
            };
            let up2 = up.clone();
            Problem {
                x: flat,
                f: Box::new(move |x| {
                    let (x, t) = unpack(x)?;
                    Ok(weighted_sum(&max_sigmoid_attention(&x, &t)?, &up))
                }),
                grad: Box::new(move |x| {
                    let (x, t) = unpack(x)?;
                    let (dx, dt) = max_sigmoid_backward(&x, &t, &up2)?;
                    let mut out = dx.into_data();
                    out.extend(dt.into_data());
                    Ok(out)
                }),
            }
        }
        GradOp::TextUpdate => {
            let (c, d, heads) = (3, 8, 2);
            let p = crate::pan::FusionParams::seeded(d, heads, r.gen())?.pool_attn;
            let w = rng::uniform(r, &[c, d], 1.0);
            let tokens = rng::uniform(r, &[POOL_TOKENS, d], 1.0);
            let up = rng::uniform(r, &[c, d], 1.0);
            let mut flat = w.into_data();
            flat.extend(tokens.into_data());
            let unpack = move |x: &[f64]| -> Result<(Tensor, Tensor)> {
                let (a, b) = split(x, c * d);
                Ok((Tensor::matrix(c, d, a.to_vec())?, Tensor::matrix(POOL_TOKENS, d, b.to_vec())?))
            };
            let (up2, p2) = (up.clone(), p.clone());
            Problem {
                x: flat,
                f: Box::new(move |x| {
                    let (w, t) = unpack(x)?;
                    Ok(weighted_sum(&text_update(&w, &t, &p)?, &up))
                }),
                grad: Box::new(move |x| {
                    let (w, t) = unpack(x)?;
                    let (dw, dt) = text_update_backward(&w, &t, &p2, &up2)?;
                    let mut out = dw.into_data();
                    out.extend(dt.into_data());
                    Ok(out)
                }),
            }
        }
        GradOp::Contrastive => {
            let (k, c) = (6, 5);
            let s = rng::uniform(r, &[k, c], 2.0);
            let labels = (0..k)
                .map(|_| r.gen_bool(0.6).then(|| Positive { gt: 0, text: r.gen_range(0..c) }))
                .collect();
            let a = Assignment { labels };
            let a2 = a.clone();
            let wrap = move |x: &[f64]| -> Result<SimilarityMatrix> {
                Ok(SimilarityMatrix { values: Tensor::matrix(k, c, x.to_vec())?, alpha: 1.0, beta: 0.0 })
            };
            Problem {
                x: s.into_data(),
                f: Box::new(move |x| region_text_contrastive_loss(&wrap(x)?, &a)),
                grad: Box::new(move |x| Ok(contrastive_backward(&wrap(x)?, &a2)?.into_data())),
            }
        }
        GradOp::Iou => {
            // Overlapping boxes with no coincident edges.
            let (pred, gt) = loop {
                let g = [r.gen_range(0.0..4.0), r.gen_range(0.0..4.0)];
                let gt = BBox::new(g[0], g[1], g[0] + r.gen_range(2.0..6.0), g[1] + r.gen_range(2.0..6.0));
                let p = [r.gen_range(0.0..4.0), r.gen_range(0.0..4.0)];
                let pred = BBox::new(p[0], p[1], p[0] + r.gen_range(2.0..6.0), p[1] + r.gen_range(2.0..6.0));
                let edges_apart = (0..4).all(|i| (0..4).all(|j| (pred.0[i] - gt.0[j]).abs() > 1e-3));
                if pred.iou(&gt) > 0.05 && edges_apart {
                    break (pred, gt);
                }
            };
            Problem {
                x: pred.0.to_vec(),
                f: Box::new(move |x| iou_loss(&BBox::new(x[0], x[1], x[2], x[3]), &gt)),
                grad: Box::new(move |x| Ok(iou_loss_backward(&BBox::new(x[0], x[1], x[2], x[3]), &gt)?.to_vec())),
            }
        }
        GradOp::Dfl => {
            let bins = 16;
            let logits = rng::uniform(r, &[4, bins], 1.0);
            let targets: [f64; 4] = std::array::from_fn(|_| r.gen_range(0.0..(bins - 1) as f64 - 0.01));
            Problem {
                x: logits.into_data(),
                f: Box::new(move |x| dfl_loss(&Tensor::matrix(4, bins, x.to_vec())?, &targets)),
                grad: Box::new(move |x| Ok(dfl_backward(&Tensor::matrix(4, bins, x.to_vec())?, &targets)?.into_data())),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub op: GradOp,
    pub seed: u64,
    pub eps: f64,
    pub components: usize,
    pub max_rel_error: f64,
}

pub const EPS_RANGE: std::ops::RangeInclusive<f64> = 1e-7..=1e-3;

/// Step used when none is given. Smaller steps let rounding noise dominate
/// components whose gradient is near zero.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Max relative error between central differences and an analytic gradient.
pub fn compare_gradient(
    f: impl Fn(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(dim_err("gradient length differs from parameter count"));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let hi = f(&probe)?;
        probe[i] = x[i] - eps;
        let lo = f(&probe)?;
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Checks the analytic gradient of `op` on the instance drawn from `seed`.
pub fn grad_check(op: GradOp, seed: u64, eps: f64) -> Result<GradCheckRow> {
    if !EPS_RANGE.contains(&eps) {
        return Err(input_err(format!("eps {eps:e} outside [1e-7, 1e-3]")));
    }
    let mut r = rng::seeded(rng::derive(seed, op.name()));
    let p = problem(op, &mut r)?;
    let analytic = (p.grad)(&p.x)?;
    let max_rel_error = compare_gradient(&p.f, &analytic, &p.x, eps)?;
    Ok(GradCheckRow { op, seed, eps, components: p.x.len(), max_rel_error })
}

/// Looks up an op by name and checks it.
pub fn grad_check_named(op_id: &str, seed: u64, eps: f64) -> Result<GradCheckRow> {
    grad_check(op_id.parse()?, seed, eps)
}
