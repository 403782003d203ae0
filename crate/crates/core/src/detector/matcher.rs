//! One-to-one assignment of queries to ground-truth objects.

use super::boxes::{giou, BBox};

/// Weights of the three matching cost terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MatchCostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Per-image `(query_index, ground_truth_index)` pairs, sorted by query index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub per_image: Vec<Vec<(usize, usize)>>,
}

impl MatchResult {
    pub fn num_pairs(&self) -> usize {
        self.per_image.iter().map(Vec::len).sum()
    }
}

/// Minimum-cost assignment for a dense `rows x cols` cost matrix.
///
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row. Shortest
/// augmenting paths with dual potentials, `O(n^2 m)`.
pub fn linear_assignment(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    if cols == 0 {
        return Vec::new();
    }
    let sanitize = |c: f64| if c.is_nan() { f64::MAX / 4.0 } else { c.clamp(-1e300, 1e300) };
    if rows > cols {
        let transposed: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| cost[i][j]).collect())
            .collect();
        let mut pairs: Vec<_> = linear_assignment(&transposed)
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }
    let (n, m) = (rows, cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; way[j]: previous column on the path.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = sanitize(cost[i0 - 1][j - 1]) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total cost of an assignment, summed in row order.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    let mut sorted = pairs.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|&(r, c)| cost[r][c]).sum()
}

const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;
const LOG_EPS: f64 = 1e-8;

/// Query-by-ground-truth cost for one image: focal classification cost plus
/// L1 and negative-GIoU box costs.
pub fn match_cost_matrix(
    probs: &[Vec<f32>],
    boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    weights: &MatchCostWeights,
) -> Vec<Vec<f64>> {
    probs
        .iter()
        .zip(boxes)
        .map(|(p, b)| {
            gt_boxes
                .iter()
                .zip(gt_labels)
                .map(|(g, &label)| {
                    let prob = p[label] as f64;
                    let neg = (1.0 - FOCAL_ALPHA)
                        * prob.powf(FOCAL_GAMMA)
                        * -(1.0 - prob + LOG_EPS).ln();
                    let pos = FOCAL_ALPHA * (1.0 - prob).powf(FOCAL_GAMMA) * -(prob + LOG_EPS).ln();
                    let l1: f64 = b
                        .to_array()
                        .iter()
                        .zip(g.to_array())
                        .map(|(x, y)| (*x as f64 - y as f64).abs())
                        .sum();
                    weights.class * (pos - neg) + weights.l1 * l1 - weights.giou * giou(b, g)
                })
                .collect()
        })
        .collect()
}

/// Matches one image's predictions to its ground truth. Empty ground truth
/// yields an empty match.
pub fn match_image(
    probs: &[Vec<f32>],
    boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_labels: &[usize],
    weights: &MatchCostWeights,
) -> Vec<(usize, usize)> {
    if gt_boxes.is_empty() || probs.is_empty() {
        return Vec::new();
    }
    let cost = match_cost_matrix(probs, boxes, gt_boxes, gt_labels, weights);
    linear_assignment(&cost)
}
