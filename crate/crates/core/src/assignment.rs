//! Maturity-aware bipartite matching between detection queries and ground
//! truth objects.
//!
//! The matching cost of query `i` against object `j` is
//! `λ_cls·C_cls + λ_L1·C_L1 + λ_giou·C_giou + λ_mat·C_mat`, where `C_giou` is
//! the negated GIoU and `C_mat` is the Beta negative log-likelihood of the
//! object's maturity target under the query's predicted distribution.

use crate::betax::{self, BetaParams, Maturity};
use crate::error::{Error, Result};
use crate::geometry::{giou, l1_box};
use crate::model::Detection;
use crate::synthdata::GroundTruthObject;

/// Focal-cost balance and focusing parameters.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Objectness probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_mat: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { lambda_cls: 2.0, lambda_l1: 5.0, lambda_giou: 2.0, lambda_mat: 1.0 }
    }
}

impl CostWeights {
    pub fn new(lambda_cls: f64, lambda_l1: f64, lambda_giou: f64, lambda_mat: f64) -> Result<Self> {
        let w = CostWeights { lambda_cls, lambda_l1, lambda_giou, lambda_mat };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_l1, self.lambda_giou, self.lambda_mat];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(format!("cost weights must be finite and nonnegative: {all:?}")));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::Domain("at least one cost weight must be positive".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        CostWeights {
            lambda_cls: c * self.lambda_cls,
            lambda_l1: c * self.lambda_l1,
            lambda_giou: c * self.lambda_giou,
            lambda_mat: c * self.lambda_mat,
        }
    }
}

/// Dense row-major matrix; rows are predictions, columns ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len())));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        CostMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(prediction_index, gt_index)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchResult {
    /// Prediction matched to each ground truth, indexed by ground truth.
    pub fn pred_for_gt(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }
}

/// Focal classification cost for a single foreground class.
pub fn cls_cost(p_obj: f64) -> f64 {
    let p = p_obj.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

/// Negative log-likelihood of the clamped target; no concentration penalty.
pub fn maturity_cost(p: BetaParams, y_target: Maturity) -> f64 {
    -betax::log_pdf(p, y_target)
}

pub fn build_cost_matrix(preds: &[Detection], gts: &[GroundTruthObject], w: &CostWeights) -> Result<CostMatrix> {
    if preds.is_empty() {
        return Err(Error::Input("cost matrix needs at least one prediction".into()));
    }
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for pred in preds {
        let cls = cls_cost(pred.p_obj);
        let pred_xyxy = pred.bbox.to_xyxy();
        for gt in gts {
            let c = w.lambda_cls * cls
                + w.lambda_l1 * l1_box(&pred.bbox, &gt.bbox)
                + w.lambda_giou * -giou(&pred_xyxy, &gt.bbox.to_xyxy())
                + w.lambda_mat * maturity_cost(pred.maturity, gt.y_target);
            data.push(c);
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Minimum-cost assignment of every column to a distinct row.
///
/// Shortest augmenting paths with row/column potentials, one column at a
/// time, `O(cols² · rows)`.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (m, n) = (cost.rows, cost.cols);
    if n > m {
        return Err(Error::Input(format!("assignment needs rows >= cols, got {m}x{n}")));
    }
    if let Some(bad) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite cost entry {bad}")));
    }
    if n == 0 {
        return Ok(MatchResult { pairs: Vec::new(), total_cost: 0.0 });
    }
    // 1-based: columns of `cost` play the role of the assigned side (k), rows
    // the role of the receiving side (r).
    let a = |k: usize, r: usize| cost.get(r - 1, k - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for k in 1..=n {
        owner[0] = k;
        let mut r0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[r0] = true;
            let k0 = owner[r0];
            let mut delta = f64::INFINITY;
            let mut r1 = 0usize;
            for r in 1..=m {
                if used[r] {
                    continue;
                }
                let cur = a(k0, r) - u[k0] - v[r];
                if cur < minv[r] {
                    minv[r] = cur;
                    way[r] = r0;
                }
                if minv[r] < delta {
                    delta = minv[r];
                    r1 = r;
                }
            }
            for r in 0..=m {
                if used[r] {
                    u[owner[r]] += delta;
                    v[r] -= delta;
                } else {
                    minv[r] -= delta;
                }
            }
            r0 = r1;
            if owner[r0] == 0 {
                break;
            }
        }
        loop {
            let r1 = way[r0];
            owner[r0] = owner[r1];
            r0 = r1;
            if r0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        (1..=m).filter(|&r| owner[r] != 0).map(|r| (r - 1, owner[r] - 1)).collect();
    pairs.sort_by_key(|&(_, g)| g);
    let total_cost = pairs.iter().map(|&(p, g)| cost.get(p, g)).sum();
    Ok(MatchResult { pairs, total_cost })
}

/// Builds the cost matrix and solves it.
pub fn match_detections(preds: &[Detection], gts: &[GroundTruthObject], w: &CostWeights) -> Result<MatchResult> {
    hungarian(&build_cost_matrix(preds, gts, w)?)
}
