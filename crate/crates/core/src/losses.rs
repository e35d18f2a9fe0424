//! The composite set-prediction objective.
//!
//! For every decoder layer, each image is matched independently and then
//! contributes
//!
//! * matched queries: `λ_vfl·VFL⁺ + λ_bbox·L1 + λ_giou·(1 − GIoU) + λ_maturity·(NLL + λ_reg(α + β))`
//! * unmatched queries: `λ_vfl·VFL⁻`
//!
//! divided by `max(1, #objects)`. Layers are summed with unit weight and
//! images are averaged over the batch, reduced in image order.
//!
//! Two implementations live here: plain `f64` functions over [`Detection`]s,
//! and a graph version that produces the same numbers on autograd values.

use crate::assignment::{MatchResult, PROB_CLAMP};
use crate::autograd::{Graph, Tensor, Var};
use crate::betax::{self, BetaParams, Maturity};
use crate::error::{Error, Result};
use crate::geometry::{giou, iou, l1_box, BoxCXCYWH};
use crate::model::{Detection, LayerOutputs};
use crate::synthdata::GroundTruthObject;

/// Varifocal weight and focusing exponent for negatives.
pub const VFL_ALPHA: f64 = 0.75;
pub const VFL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_vfl: f64,
    pub lambda_bbox: f64,
    pub lambda_giou: f64,
    pub lambda_maturity: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_vfl: 1.0, lambda_bbox: 5.0, lambda_giou: 2.0, lambda_maturity: 1.0, lambda_reg: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_vfl, self.lambda_bbox, self.lambda_giou, self.lambda_maturity, self.lambda_reg];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!("loss weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

/// Unweighted components of one layer (or a sum of layers) and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub vfl: f64,
    pub bbox_l1: f64,
    pub giou: f64,
    /// Includes the `λ_reg(α + β)` penalty.
    pub maturity: f64,
    pub total: f64,
}

impl LossTerms {
    fn weighted(vfl: f64, bbox_l1: f64, giou: f64, maturity: f64, w: &LossWeights) -> Self {
        let total = w.lambda_vfl * vfl + w.lambda_bbox * bbox_l1 + w.lambda_giou * giou + w.lambda_maturity * maturity;
        LossTerms { vfl, bbox_l1, giou, maturity, total }
    }

    fn scaled(&self, c: f64) -> Self {
        LossTerms {
            vfl: c * self.vfl,
            bbox_l1: c * self.bbox_l1,
            giou: c * self.giou,
            maturity: c * self.maturity,
            total: c * self.total,
        }
    }

    fn add(&mut self, o: &LossTerms) {
        self.vfl += o.vfl;
        self.bbox_l1 += o.bbox_l1;
        self.giou += o.giou;
        self.maturity += o.maturity;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub vfl: f64,
    pub bbox_l1: f64,
    pub giou: f64,
    pub maturity: f64,
    pub total: f64,
    pub per_layer: Vec<LossTerms>,
}

impl LossBreakdown {
    fn from_layers(per_layer: Vec<LossTerms>) -> Self {
        let mut sum = LossTerms::default();
        per_layer.iter().for_each(|t| sum.add(t));
        LossBreakdown {
            vfl: sum.vfl,
            bbox_l1: sum.bbox_l1,
            giou: sum.giou,
            maturity: sum.maturity,
            total: sum.total,
            per_layer,
        }
    }

    /// Mean over images, accumulated in the given order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let layers = items.first().map_or(0, |b| b.per_layer.len());
        let mut acc = vec![LossTerms::default(); layers];
        for b in items {
            for (a, t) in acc.iter_mut().zip(&b.per_layer) {
                a.add(t);
            }
        }
        let c = 1.0 / items.len().max(1) as f64;
        Self::from_layers(acc.iter().map(|t| t.scaled(c)).collect())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `−log p(y | α, β) + λ_reg(α + β)` at the clamped target.
pub fn maturity_loss(p: BetaParams, y_target: Maturity, lambda_reg: f64) -> f64 {
    -betax::log_pdf(p, y_target) + lambda_reg * p.concentration()
}

/// Varifocal loss for one query. `q` is the IoU target of a positive and is
/// ignored for negatives.
pub fn vfl(p_obj: f64, q: f64, is_positive: bool) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("varifocal target {q} outside [0, 1]")));
    }
    let p = clamp_prob(p_obj);
    Ok(if is_positive {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        VFL_ALPHA * p.powf(VFL_GAMMA) * -(1.0 - p).ln()
    })
}

pub fn giou_loss(a: &BoxCXCYWH, b: &BoxCXCYWH) -> f64 {
    1.0 - giou(&a.to_xyxy(), &b.to_xyxy())
}

fn layer_terms(preds: &[Detection], gts: &[GroundTruthObject], m: &MatchResult, w: &LossWeights) -> Result<LossTerms> {
    let mut matched = vec![false; preds.len()];
    let (mut v, mut l1, mut gi, mut mat) = (0.0, 0.0, 0.0, 0.0);
    for &(pi, gj) in &m.pairs {
        let (pred, gt) = (
            preds.get(pi).ok_or_else(|| Error::Input(format!("match refers to prediction {pi}")))?,
            gts.get(gj).ok_or_else(|| Error::Input(format!("match refers to object {gj}")))?,
        );
        matched[pi] = true;
        let q = iou(&pred.bbox.to_xyxy(), &gt.bbox.to_xyxy());
        v += vfl(pred.p_obj, q, true)?;
        l1 += l1_box(&pred.bbox, &gt.bbox);
        gi += giou_loss(&pred.bbox, &gt.bbox);
        mat += maturity_loss(pred.maturity, gt.y_target, w.lambda_reg);
    }
    for (pred, _) in preds.iter().zip(&matched).filter(|(_, &m)| !m) {
        v += vfl(pred.p_obj, 0.0, false)?;
    }
    Ok(LossTerms::weighted(v, l1, gi, mat, w))
}

/// Loss of one image over all decoder layers, each with its own matching.
pub fn composite_loss(
    layers: &[Vec<Detection>],
    gts: &[GroundTruthObject],
    matches: &[MatchResult],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if layers.len() != matches.len() {
        return Err(Error::Input(format!("{} layers but {} match results", layers.len(), matches.len())));
    }
    if let Some(m) = matches.iter().find(|m| m.pairs.len() != gts.len()) {
        return Err(Error::Input(format!("match covers {} of {} objects", m.pairs.len(), gts.len())));
    }
    let norm = 1.0 / gts.len().max(1) as f64;
    let per_layer = layers
        .iter()
        .zip(matches)
        .map(|(preds, m)| layer_terms(preds, gts, m, w).map(|t| t.scaled(norm)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::from_layers(per_layer))
}

/// Detached VFL targets `[layer][image][pair]`, in match-pair order.
pub type IouTargets = Vec<Vec<Vec<f64>>>;

pub struct GraphLoss {
    /// Scalar batch loss.
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// The IoU targets that were used.
    pub iou_targets: IouTargets,
}

/// Differentiable batch loss: `layers[l]` holds layer `l`'s head outputs for
/// the whole batch, `matches[l][b]` the matching of layer `l` on image `b`.
///
/// Returns the scalar loss (mean over images) and its breakdown. Objectness
/// enters through logits, `ln p = −softplus(−z)` and `ln(1 − p) = −softplus(z)`;
/// the VFL target IoU is a constant, recomputed from the current boxes unless
/// `frozen_iou` supplies it.
pub fn composite_loss_graph(
    g: &mut Graph,
    layers: &[LayerOutputs],
    gts: &[Vec<GroundTruthObject>],
    matches: &[Vec<MatchResult>],
    w: &LossWeights,
    frozen_iou: Option<&IouTargets>,
) -> Result<GraphLoss> {
    if layers.len() != matches.len() {
        return Err(Error::Input(format!("{} layers but {} match sets", layers.len(), matches.len())));
    }
    let mut iou_targets: IouTargets = vec![Vec::with_capacity(gts.len()); layers.len()];
    let batch = gts.len();
    let mut image_losses = Vec::with_capacity(batch);
    let mut breakdowns = Vec::with_capacity(batch);
    for (b, objects) in gts.iter().enumerate() {
        let norm = 1.0 / objects.len().max(1) as f64;
        let mut layer_vars = Vec::with_capacity(layers.len());
        let mut per_layer = Vec::with_capacity(layers.len());
        for (l, (out, m)) in layers.iter().zip(matches).enumerate() {
            let m = m.get(b).ok_or_else(|| Error::Input(format!("no match for image {b}")))?;
            if m.pairs.len() != objects.len() {
                return Err(Error::Input(format!("match covers {} of {} objects", m.pairs.len(), objects.len())));
            }
            let frozen = match frozen_iou {
                Some(t) => Some(
                    t.get(l)
                        .and_then(|per_image| per_image.get(b))
                        .filter(|q| q.len() == m.pairs.len())
                        .ok_or_else(|| Error::Input(format!("frozen IoU targets do not fit layer {l}, image {b}")))?
                        .as_slice(),
                ),
                None => None,
            };
            let (loss, terms, q) = image_layer_loss(g, out, b, objects, m, w, frozen)?;
            iou_targets[l].push(q);
            layer_vars.push(g.mul_scalar(loss, norm)?);
            per_layer.push(terms.scaled(norm));
        }
        let stacked = g.concat(&layer_vars, 0)?;
        image_losses.push(g.sum(stacked)?);
        breakdowns.push(LossBreakdown::from_layers(per_layer));
    }
    let all = g.concat(&image_losses, 0)?;
    let loss = g.mean(all)?;
    Ok(GraphLoss { loss, breakdown: LossBreakdown::mean(&breakdowns), iou_targets })
}

fn image_layer_loss(
    g: &mut Graph,
    out: &LayerOutputs,
    b: usize,
    objects: &[GroundTruthObject],
    m: &MatchResult,
    w: &LossWeights,
    frozen: Option<&[f64]>,
) -> Result<(Var, LossTerms, Vec<f64>)> {
    let q = out.num_queries;
    let mut is_pos = vec![false; q];
    let pos_rows: Vec<usize> = m.pairs.iter().map(|&(p, _)| b * q + p).collect();
    for &(p, _) in &m.pairs {
        is_pos[p] = true;
    }
    let neg_rows: Vec<usize> = (0..q).filter(|&i| !is_pos[i]).map(|i| b * q + i).collect();

    let mut parts = Vec::new();
    let mut terms = [0.0; 4];
    let mut targets = Vec::new();

    if !neg_rows.is_empty() {
        // α_v · p^γ · softplus(z)
        let z = g.gather_rows(out.logits, &neg_rows)?;
        let p = g.sigmoid(z)?;
        let p2 = g.mul(p, p)?;
        let sp = g.softplus(z)?;
        let t = g.mul(p2, sp)?;
        let s = g.sum(t)?;
        let s = g.mul_scalar(s, VFL_ALPHA)?;
        terms[0] += g.value(s).item();
        parts.push(g.mul_scalar(s, w.lambda_vfl)?);
    }

    if !pos_rows.is_empty() {
        let n = pos_rows.len();
        let pred_boxes = g.gather_rows(out.boxes, &pos_rows)?;
        let gt_data: Vec<f64> = m.pairs.iter().flat_map(|&(_, j)| objects[j].bbox.as_array()).collect();
        let gt_boxes = g.constant(Tensor::new(vec![n, 4], gt_data)?);

        // Varifocal positives with the detached IoU target q:
        // q · (q · softplus(−z) + (1 − q) · softplus(z)).
        let pb = g.value(pred_boxes).data().to_vec();
        targets = match frozen {
            Some(q) => q.to_vec(),
            None => m
                .pairs
                .iter()
                .enumerate()
                .map(|(k, &(_, j))| {
                    let pred = BoxCXCYWH { cx: pb[4 * k], cy: pb[4 * k + 1], w: pb[4 * k + 2], h: pb[4 * k + 3] };
                    iou(&pred.to_xyxy(), &objects[j].bbox.to_xyxy())
                })
                .collect(),
        };
        let z = g.gather_rows(out.logits, &pos_rows)?;
        let q_sq = g.constant(Tensor::new(vec![n, 1], targets.iter().map(|t| t * t).collect())?);
        let q_rest = g.constant(Tensor::new(vec![n, 1], targets.iter().map(|t| t * (1.0 - t)).collect())?);
        let neg_z = g.neg(z)?;
        let sp_neg = g.softplus(neg_z)?;
        let sp_pos = g.softplus(z)?;
        let a = g.mul(q_sq, sp_neg)?;
        let c = g.mul(q_rest, sp_pos)?;
        let v = g.add(a, c)?;
        let v = g.sum(v)?;
        terms[0] += g.value(v).item();
        parts.push(g.mul_scalar(v, w.lambda_vfl)?);

        let diff = g.sub(pred_boxes, gt_boxes)?;
        let ad = g.abs(diff)?;
        let l1 = g.sum(ad)?;
        terms[1] = g.value(l1).item();
        parts.push(g.mul_scalar(l1, w.lambda_bbox)?);

        let gsum = giou_sum(g, pred_boxes, gt_boxes)?;
        // Σ (1 − GIoU) = n − Σ GIoU
        let gl = g.neg(gsum)?;
        let gl = g.add_scalar(gl, n as f64)?;
        terms[2] = g.value(gl).item();
        parts.push(g.mul_scalar(gl, w.lambda_giou)?);

        let alpha = g.gather_rows(out.alpha, &pos_rows)?;
        let beta = g.gather_rows(out.beta, &pos_rows)?;
        let y: Vec<f64> = m.pairs.iter().map(|&(_, j)| objects[j].y_target.value()).collect();
        let nll = g.beta_nll(alpha, beta, &y)?;
        let nll = g.sum(nll)?;
        let conc = g.add(alpha, beta)?;
        let conc = g.sum(conc)?;
        let reg = g.mul_scalar(conc, w.lambda_reg)?;
        let mat = g.add(nll, reg)?;
        terms[3] = g.value(mat).item();
        parts.push(g.mul_scalar(mat, w.lambda_maturity)?);
    }

    let stacked = g.concat(&parts, 0)?;
    let loss = g.sum(stacked)?;
    Ok((loss, LossTerms::weighted(terms[0], terms[1], terms[2], terms[3], w), targets))
}

/// Σ GIoU over row pairs of two `[n, 4]` center/size box tensors.
fn giou_sum(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let corners = |g: &mut Graph, b: Var| -> Result<[Var; 6]> {
        let cx = g.slice(b, 1, 0, 1)?;
        let cy = g.slice(b, 1, 1, 1)?;
        let w = g.slice(b, 1, 2, 1)?;
        let h = g.slice(b, 1, 3, 1)?;
        let hw = g.mul_scalar(w, 0.5)?;
        let hh = g.mul_scalar(h, 0.5)?;
        let x0 = g.sub(cx, hw)?;
        let x1 = g.add(cx, hw)?;
        let y0 = g.sub(cy, hh)?;
        let y1 = g.add(cy, hh)?;
        let area = g.mul(w, h)?;
        Ok([x0, y0, x1, y1, area, w])
    };
    let [px0, py0, px1, py1, parea, _] = corners(g, pred)?;
    let [gx0, gy0, gx1, gy1, garea, _] = corners(g, gt)?;

    let ix0 = g.maximum(px0, gx0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy0 = g.maximum(py0, gy0)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;

    let areas = g.add(parea, garea)?;
    let union = g.sub(areas, inter)?;
    let iou = g.div(inter, union)?;

    let hx0 = g.minimum(px0, gx0)?;
    let hx1 = g.maximum(px1, gx1)?;
    let hy0 = g.minimum(py0, gy0)?;
    let hy1 = g.maximum(py1, gy1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;

    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    let giou = g.sub(iou, frac)?;
    g.sum(giou)
}
