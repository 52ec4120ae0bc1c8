//! Minimum-cost assignment of ground-truth instances to queries and the
//! mask losses on matched pairs.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::sigmoid;
use crate::query::{InstancePrediction, ObjectQueryGenerator, PixelDecoderOut, QuerySet};

/// Weights of the matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCost {
    pub dice: f64,
    pub objectness: f64,
}

impl Default for MatchCost {
    fn default() -> Self {
        MatchCost {
            dice: 1.0,
            objectness: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `query_for_gt[i]` is the query matched to ground-truth object `i`.
    pub query_for_gt: Vec<usize>,
    /// Sum of matched costs, accumulated in ground-truth order.
    pub total_cost: f64,
}

/// Soft Dice coefficient with unit smoothing:
/// `(2 Σ p·g + 1) / (Σ p + Σ g + 1)`.
pub fn soft_dice(probs: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (2.0 * inter + 1.0) / (sp + sg + 1.0)
}

/// Mean binary cross-entropy of logits against targets, computed in the
/// overflow-free form `max(x, 0) − x·g + ln(1 + e^−|x|)`.
pub fn bce_with_logits(logits: &[f64], gt: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &g) in logits.iter().zip(gt) {
        acc += x.max(0.0) - x * g + (-x.abs()).exp().ln_1p();
    }
    acc / logits.len() as f64
}

fn check_gt(pred: &InstancePrediction, gt: &[Image]) -> Result<()> {
    let n = pred.num_queries();
    if gt.len() > n {
        return Err(Error::Capacity {
            count: gt.len(),
            capacity: n,
        });
    }
    let dims = pred.mask_dims();
    for g in gt {
        if g.dims() != dims || g.channels() != 1 {
            return Err(Error::Argument(format!(
                "ground-truth mask {:?} does not match prediction {:?}",
                g.dims(),
                dims
            )));
        }
    }
    Ok(())
}

/// `cost[i][j] = w_dice·(1 − Dice(σ(pred_j), gt_i)) + w_obj·(1 − σ(obj_j))`.
pub fn cost_matrix(pred: &InstancePrediction, gt: &[Image], weights: MatchCost) -> Result<Vec<Vec<f64>>> {
    check_gt(pred, gt)?;
    let probs: Vec<Vec<f64>> = (0..pred.num_queries())
        .map(|j| pred.logits(j).iter().map(|&l| sigmoid(l)).collect())
        .collect();
    Ok(gt
        .iter()
        .map(|g| {
            probs
                .iter()
                .zip(&pred.objectness)
                .map(|(p, &obj)| {
                    weights.dice * (1.0 - soft_dice(p, g.data()))
                        + weights.objectness * (1.0 - sigmoid(obj))
                })
                .collect()
        })
        .collect())
}

/// Hungarian algorithm with row/column potentials for a `rows × cols` cost
/// matrix with `rows ≤ cols`. Returns the column assigned to each row.
/// Columns are scanned in ascending order with strict comparisons, so ties
/// resolve toward the lowest column index.
pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Argument("cost matrix rows differ in length".into()));
    }
    if n > m {
        return Err(Error::Capacity {
            count: n,
            capacity: m,
        });
    }
    // 1-based with a virtual column 0, after the classic potentials method.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_for_row = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_for_row[row_of[j] - 1] = j - 1;
        }
    }
    Ok(col_for_row)
}

pub fn assignment_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &c) in cost.iter().zip(cols) {
        total += row[c];
    }
    total
}

pub fn hungarian_match(pred: &InstancePrediction, gt: &[Image]) -> Result<Assignment> {
    hungarian_match_weighted(pred, gt, MatchCost::default())
}

pub fn hungarian_match_weighted(
    pred: &InstancePrediction,
    gt: &[Image],
    weights: MatchCost,
) -> Result<Assignment> {
    let cost = cost_matrix(pred, gt, weights)?;
    let query_for_gt = solve_assignment(&cost)?;
    Ok(Assignment {
        total_cost: assignment_cost(&cost, &query_for_gt),
        query_for_gt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLosses {
    pub dice: f64,
    pub bce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLosses {
    /// Losses of the final queries.
    pub final_layer: PairLosses,
    /// Losses of the initial queries and each intermediate decoder layer.
    pub aux: Vec<PairLosses>,
}

/// Dice loss `1 − Dice` and mean BCE, averaged over matched pairs.
pub fn pair_losses(
    pred: &InstancePrediction,
    gt: &[Image],
    assignment: &Assignment,
) -> Result<PairLosses> {
    check_gt(pred, gt)?;
    if assignment.query_for_gt.len() != gt.len() {
        return Err(Error::Argument("assignment does not cover every object".into()));
    }
    if gt.is_empty() {
        return Ok(PairLosses { dice: 0.0, bce: 0.0 });
    }
    let (mut dice, mut bce) = (0.0, 0.0);
    for (g, &q) in gt.iter().zip(&assignment.query_for_gt) {
        let logits = pred.logits(q);
        let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        dice += 1.0 - soft_dice(&probs, g.data());
        bce += bce_with_logits(logits, g.data());
    }
    let k = gt.len() as f64;
    Ok(PairLosses {
        dice: dice / k,
        bce: bce / k,
    })
}

/// Final and auxiliary instance losses. Every query state is decoded by the
/// same head and matched independently.
pub fn instance_losses(
    generator: &ObjectQueryGenerator,
    queries: &QuerySet,
    pixels: &PixelDecoderOut,
    gt: &[Image],
) -> Result<InstanceLosses> {
    let mut per_layer = Vec::with_capacity(queries.layer_outputs.len());
    for q in &queries.layer_outputs {
        let pred = generator.predict_instance_masks(q, pixels)?;
        let assignment = hungarian_match(&pred, gt)?;
        per_layer.push(pair_losses(&pred, gt, &assignment)?);
    }
    let final_layer = per_layer.pop().expect("query set has at least one state");
    Ok(InstanceLosses {
        final_layer,
        aux: per_layer,
    })
}
