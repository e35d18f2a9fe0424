//! Detection and maturity-calibration metrics.
//!
//! AP follows the COCO recipe: per image, detections in descending score
//! order greedily claim the unclaimed ground truth with the highest IoU at or
//! above the threshold; all detections are then ranked globally by score and
//! the precision envelope is sampled at the 101 recall levels `0, 0.01, …, 1`.
//! Score ties keep image order, then query order.
//!
//! Maturity metrics use the same greedy matching at IoU ≥ 0.5 among
//! detections whose objectness clears an operating threshold.

use crate::betax::{self, BetaParams, Maturity};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::model::Detection;
use crate::rng::RngState;
use crate::synthdata::GroundTruthObject;

pub const RECALL_POINTS: usize = 101;
pub const MATURITY_IOU: f64 = 0.5;
pub const DEFAULT_LEVELS: [f64; 3] = [0.5, 0.8, 0.9];
pub const MIN_PIT_PAIRS: usize = 100;

/// `{0.50, 0.55, …, 0.95}`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].p_obj.total_cmp(&dets[a].p_obj));
    idx
}

/// Score-ordered greedy matching of one image: `(detection, object)` pairs.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruthObject], iou_threshold: f64) -> Vec<(usize, usize)> {
    let gt_boxes: Vec<_> = gts.iter().map(|g| g.bbox.to_xyxy()).collect();
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for d in score_order(dets) {
        let db = dets[d].bbox.to_xyxy();
        let mut best: Option<(usize, f64)> = None;
        for (j, gb) in gt_boxes.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&db, gb);
            if v >= iou_threshold && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            pairs.push((d, j));
        }
    }
    pairs
}

/// 101-point interpolated AP over a set of images at one IoU threshold.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthObject>], iou_threshold: f64) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::Input(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return Err(Error::Domain("average precision needs at least one ground truth".into()));
    }
    // (score, is_true_positive), in image/score order before the global sort.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let mut tp = vec![false; d.len()];
        for (di, _) in greedy_match(d, g, iou_threshold) {
            tp[di] = true;
        }
        for i in score_order(d) {
            ranked.push((d[i].p_obj, tp[i]));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for t in 0..RECALL_POINTS {
        let r = t as f64 / (RECALL_POINTS - 1) as f64;
        let k = recall.partition_point(|&x| x < r);
        if k < precision.len() {
            total += precision[k];
        }
    }
    Ok(total / RECALL_POINTS as f64)
}

/// A detection paired with the object it found.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaturityPair {
    pub params: BetaParams,
    pub y_target: Maturity,
    pub y_true: Option<Maturity>,
}

/// Greedy IoU ≥ 0.5 pairs among detections with `p_obj ≥ score_threshold`.
pub fn maturity_pairs(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthObject>], score_threshold: f64) -> Vec<MaturityPair> {
    let mut out = Vec::new();
    for (d, g) in dets.iter().zip(gts) {
        let kept: Vec<Detection> = d.iter().filter(|x| x.p_obj >= score_threshold).copied().collect();
        for (di, gj) in greedy_match(&kept, g, MATURITY_IOU) {
            out.push(MaturityPair { params: kept[di].maturity, y_target: g[gj].y_target, y_true: g[gj].y_true });
        }
    }
    out
}

fn with_truth(pairs: &[MaturityPair]) -> Vec<(BetaParams, f64)> {
    pairs.iter().filter_map(|p| p.y_true.map(|y| (p.params, y.value()))).collect()
}

/// Mean `|E[Beta] − y_true|`; `None` without any pair carrying a truth.
pub fn maturity_mae(pairs: &[MaturityPair]) -> Option<f64> {
    let v = with_truth(pairs);
    (!v.is_empty()).then(|| v.iter().map(|(p, y)| (betax::mean(*p).value() - y).abs()).sum::<f64>() / v.len() as f64)
}

/// Mean negative log-density of the labelled (mapped) targets.
pub fn mean_nll(pairs: &[MaturityPair]) -> Option<f64> {
    (!pairs.is_empty())
        .then(|| pairs.iter().map(|p| -betax::log_pdf(p.params, p.y_target)).sum::<f64>() / pairs.len() as f64)
}

/// Central credible interval `[Q((1 − q)/2), Q((1 + q)/2)]`.
pub fn central_interval(p: BetaParams, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("credible level {level} outside (0, 1)")));
    }
    let lo = betax::quantile(p, 0.5 * (1.0 - level))?.value();
    let hi = betax::quantile(p, 0.5 * (1.0 + level))?.value();
    Ok((lo, hi))
}

/// Fraction of truths inside each level's central interval.
pub fn coverage(samples: &[(BetaParams, f64)], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Input("coverage needs at least one pair".into()));
    }
    levels
        .iter()
        .map(|&q| {
            let mut inside = 0usize;
            for &(p, y) in samples {
                let (lo, hi) = central_interval(p, q)?;
                if y >= lo && y <= hi {
                    inside += 1;
                }
            }
            Ok((q, inside as f64 / samples.len() as f64))
        })
        .collect()
}

/// Kolmogorov–Smirnov distance of a sample to the uniform law on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut u = values.to_vec();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n - x).max(x - i as f64 / n))
        .fold(0.0, f64::max)
}

/// KS statistic of the probability integral transform `u = F(y)`.
pub fn pit(samples: &[(BetaParams, f64)]) -> Result<f64> {
    if samples.len() < MIN_PIT_PAIRS {
        return Err(Error::Input(format!("PIT needs at least {MIN_PIT_PAIRS} pairs, got {}", samples.len())));
    }
    let u: Vec<f64> = samples
        .iter()
        .map(|&(p, y)| Ok(betax::cdf(p, Maturity::new(y)?)))
        .collect::<Result<_>>()?;
    Ok(ks_uniform(&u))
}

/// Self-consistency harness: draws `n` truths from the predicted
/// distributions themselves (cycling through `params`).
pub fn sample_from_predictions(params: &[BetaParams], n: usize, seed: u64) -> Result<Vec<(BetaParams, f64)>> {
    if params.is_empty() {
        return Err(Error::Input("no predicted distributions to sample from".into()));
    }
    let mut rng = RngState::new(seed);
    Ok((0..n)
        .map(|i| {
            let p = params[i % params.len()];
            (p, betax::sample(p, &mut rng).value())
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap_50_95: f64,
    pub maturity_mae: Option<f64>,
    pub mean_nll: Option<f64>,
    /// `(nominal level, empirical coverage)`; empty without truths.
    pub coverage: Vec<(f64, f64)>,
    pub pit_ks_stat: Option<f64>,
    pub matched: usize,
}

pub const REPORT_HEADER: &str =
    "ap50,ap75,ap_50_95,maturity_mae,mean_nll,coverage_50,coverage_80,coverage_90,pit_ks,matched";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    /// The CSV row matching [`REPORT_HEADER`].
    pub fn csv_row(&self) -> String {
        let cov = |level: f64| self.coverage.iter().find(|(q, _)| (q - level).abs() < 1e-12).map(|c| c.1);
        format!(
            "{:.6},{:.6},{:.6},{},{},{},{},{},{},{}",
            self.ap50,
            self.ap75,
            self.ap_50_95,
            opt(self.maturity_mae),
            opt(self.mean_nll),
            opt(cov(0.5)),
            opt(cov(0.8)),
            opt(cov(0.9)),
            opt(self.pit_ks_stat),
            self.matched
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_HEADER}\n{}\n", self.csv_row())
    }

    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("AP50".to_string(), format!("{:.4}", self.ap50)),
            ("AP75".to_string(), format!("{:.4}", self.ap75)),
            ("AP50:95".to_string(), format!("{:.4}", self.ap_50_95)),
            ("maturity MAE".to_string(), opt(self.maturity_mae)),
            ("mean NLL".to_string(), opt(self.mean_nll)),
        ];
        for (q, c) in &self.coverage {
            rows.push((format!("coverage@{q:.2}"), format!("{c:.4}")));
        }
        rows.push(("PIT KS".to_string(), opt(self.pit_ks_stat)));
        rows.push(("matched pairs".to_string(), self.matched.to_string()));
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v:>10}\n")).collect()
    }
}

/// Full report: AP over all detections, maturity metrics on pairs whose
/// objectness clears `score_threshold`.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruthObject>], score_threshold: f64) -> Result<EvalReport> {
    let thresholds = coco_thresholds();
    let aps = thresholds.iter().map(|&t| average_precision(dets, gts, t)).collect::<Result<Vec<_>>>()?;
    let pairs = maturity_pairs(dets, gts, score_threshold);
    let truths = with_truth(&pairs);
    let coverage = if truths.is_empty() { Vec::new() } else { coverage(&truths, &DEFAULT_LEVELS)? };
    let pit_ks_stat = if truths.len() >= MIN_PIT_PAIRS { Some(pit(&truths)?) } else { None };
    Ok(EvalReport {
        ap50: aps[0],
        ap75: aps[5],
        ap_50_95: aps.iter().sum::<f64>() / aps.len() as f64,
        maturity_mae: maturity_mae(&pairs),
        mean_nll: mean_nll(&pairs),
        coverage,
        pit_ks_stat,
        matched: pairs.len(),
    })
}
