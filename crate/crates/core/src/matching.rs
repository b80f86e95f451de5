//! Optimal bipartite assignment between predicted masks and ground-truth submasks.
//!
//! The solver is the Kuhn–Munkres (Hungarian) method with row/column
//! potentials. Among optimal assignments the lexicographically smallest one
//! is returned: pairs sorted by prediction index, earlier predictions matched
//! first, each to the lowest ground-truth index that still admits an optimum.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::losses::{pair_loss, LossConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(pred_index, gt_index)`, ascending in `pred_index`.
    pub pairs: Vec<(usize, usize)>,
    pub pair_costs: Vec<f64>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn empty(n_preds: usize, n_gts: usize) -> Self {
        Self {
            pairs: Vec::new(),
            pair_costs: Vec::new(),
            unmatched_preds: (0..n_preds).collect(),
            unmatched_gts: (0..n_gts).collect(),
        }
    }

    pub fn total_cost(&self) -> f64 {
        self.pair_costs.iter().sum()
    }

    pub fn gt_for_pred(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|&(_, g)| g)
    }
}

/// `cost[i][j] = focal_weight·focal(pred_i, gt_j) + dice_weight·dice(pred_i, gt_j)`.
///
/// `preds` holds one probability mask per row; every ground-truth slice must
/// have the same pixel count.
pub fn cost_matrix(preds: &Array2<f64>, gts: &[&[bool]], cfg: &LossConfig) -> Result<Array2<f64>> {
    let mut cost = Array2::zeros((preds.nrows(), gts.len()));
    for (i, row) in preds.rows().into_iter().enumerate() {
        let row = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
        for (j, gt) in gts.iter().enumerate() {
            if gt.len() != row.len() {
                return Err(Error::shape("mask resolution (pixels)", row.len(), gt.len()));
            }
            cost[[i, j]] = pair_loss(&row, gt, cfg)?;
        }
    }
    Ok(cost)
}

/// Minimum-cost assignment of size `min(rows, cols)`, as `row -> col`, for `rows <= cols`.
fn hungarian_rows_le_cols(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    debug_assert!(n <= m);
    // 1-based potentials formulation; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal pairs `(row, col)` of size `min(rows, cols)` for any rectangular matrix.
fn optimal_pairs(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n <= m {
        hungarian_rows_le_cols(cost)
            .into_iter()
            .enumerate()
            .collect()
    } else {
        let t = cost.t().to_owned();
        hungarian_rows_le_cols(&t)
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect()
    }
}

fn optimal_cost(cost: &Array2<f64>) -> f64 {
    optimal_pairs(cost).iter().map(|&(i, j)| cost[[i, j]]).sum()
}

fn sub_matrix(cost: &Array2<f64>, rows: &[usize], cols: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| cost[[rows[a], cols[b]]])
}

/// Minimum-cost injective assignment of size `min(N, M)` with deterministic tie-breaking.
pub fn solve_assignment(cost: &Array2<f64>) -> Result<MatchResult> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Ok(MatchResult::empty(n, m));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument("assignment cost matrix has non-finite entries".into()));
    }
    let size = n.min(m);
    let best = optimal_cost(cost);
    let tol = 1e-9 * best.abs().max(1.0);

    let mut col_used = vec![false; m];
    let mut pairs = Vec::with_capacity(size);
    let mut fixed_cost = 0.0;
    for i in 0..n {
        if pairs.len() == size {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if col_used[j] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..m).filter(|&c| !col_used[c] && c != j).collect();
            let need = size - pairs.len() - 1;
            if rest_rows.len().min(rest_cols.len()) != need {
                continue;
            }
            let completion = if need == 0 {
                0.0
            } else {
                optimal_cost(&sub_matrix(cost, &rest_rows, &rest_cols))
            };
            if fixed_cost + cost[[i, j]] + completion <= best + tol {
                chosen = Some(j);
                break;
            }
        }
        if let Some(j) = chosen {
            col_used[j] = true;
            fixed_cost += cost[[i, j]];
            pairs.push((i, j));
        }
    }
    debug_assert_eq!(pairs.len(), size);

    let pair_costs = pairs.iter().map(|&(i, j)| cost[[i, j]]).collect();
    let matched: Vec<bool> = {
        let mut v = vec![false; n];
        pairs.iter().for_each(|&(i, _)| v[i] = true);
        v
    };
    Ok(MatchResult {
        pair_costs,
        unmatched_preds: (0..n).filter(|&i| !matched[i]).collect(),
        unmatched_gts: (0..m).filter(|&j| !col_used[j]).collect(),
        pairs,
    })
}

/// A prediction is a positive example iff it was matched to some ground truth.
pub fn labels_from_matching(result: &MatchResult, n: usize) -> Vec<bool> {
    let mut labels = vec![false; n];
    for &(i, _) in &result.pairs {
        labels[i] = true;
    }
    labels
}

/// Ground-truth-assisted filtering: keeps exactly the matched predictions, each
/// paired with its ground-truth partner.
pub fn oracle_filter(preds: &Array2<f64>, gts: &[&[bool]], cfg: &LossConfig) -> Result<Vec<(usize, usize)>> {
    let cost = cost_matrix(preds, gts, cfg)?;
    Ok(solve_assignment(&cost)?.pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let r = solve_assignment(&array![[1.0, 2.0], [3.0, 1.0]]).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(r.total_cost(), 2.0);
    }

    #[test]
    fn zero_diagonal_is_identity() {
        let c = Array2::from_shape_fn((5, 5), |(i, j)| if i == j { 0.0 } else { 1.0 + (i * j) as f64 });
        let r = solve_assignment(&c).unwrap();
        assert_eq!(r.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(r.total_cost(), 0.0);
    }

    #[test]
    fn size_rule_for_wide_and_tall() {
        let c = Array2::from_shape_fn((11, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let r = solve_assignment(&c).unwrap();
        assert_eq!(r.pairs.len(), 4);
        assert_eq!(r.unmatched_preds.len(), 7);
        assert!(r.unmatched_gts.is_empty());
        let r = solve_assignment(&c.t().to_owned()).unwrap();
        assert_eq!(r.pairs.len(), 4);
        assert_eq!(r.unmatched_gts.len(), 7);
    }

    #[test]
    fn empty_and_non_finite() {
        let r = solve_assignment(&Array2::zeros((3, 0))).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(r.unmatched_preds, vec![0, 1, 2]);
        assert!(solve_assignment(&array![[f64::NAN]]).is_err());
    }

    #[test]
    fn ties_prefer_low_indices() {
        let r = solve_assignment(&Array2::ones((3, 3))).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let r = solve_assignment(&Array2::ones((4, 2))).unwrap();
        assert_eq!(r.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn labels_rule() {
        let r = MatchResult {
            pairs: vec![(0, 0), (2, 1)],
            pair_costs: vec![0.0, 0.0],
            unmatched_preds: vec![1, 3],
            unmatched_gts: vec![],
        };
        assert_eq!(labels_from_matching(&r, 4), vec![true, false, true, false]);
        assert_eq!(labels_from_matching(&MatchResult::empty(3, 0), 3), vec![false; 3]);
    }

    fn mask(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn perfect_pair_costs_zero() {
        let gt = mask(&[1, 1, 0, 0, 1, 0]);
        let pred = Array2::from_shape_vec((1, 6), gt.iter().map(|&b| b as u8 as f64).collect()).unwrap();
        let c = cost_matrix(&pred, &[&gt], &LossConfig::default()).unwrap();
        assert!(c[[0, 0]].abs() < 1e-18);
    }

    #[test]
    fn disjoint_dice_component_closed_form() {
        let cfg = LossConfig {
            focal_weight: 1e-300,
            ..LossConfig::default()
        };
        let gt = mask(&[0, 0, 0, 1, 1]);
        let pred = Array2::from_shape_vec((1, 5), vec![1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let c = cost_matrix(&pred, &[&gt], &cfg).unwrap();
        assert!((c[[0, 0]] - (1.0 - 1.0 / 5.0)).abs() < 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let pred = Array2::zeros((1, 4));
        assert!(cost_matrix(&pred, &[&[true; 5]], &LossConfig::default()).is_err());
    }

    #[test]
    fn oracle_keeps_lower_cost_duplicate() {
        let gt = mask(&[1, 1, 1, 0, 0, 0, 0, 0]);
        let other = mask(&[0, 0, 0, 0, 0, 1, 1, 0]);
        let preds = ndarray::stack![
            ndarray::Axis(0),
            ndarray::arr1(&[0.9, 0.8, 0.9, 0.1, 0.0, 0.0, 0.0, 0.0]),
            ndarray::arr1(&[0.95, 0.9, 0.95, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ndarray::arr1(&[0.0, 0.0, 0.0, 0.0, 0.1, 0.9, 0.9, 0.1])
        ];
        let kept = oracle_filter(&preds, &[&gt, &other], &LossConfig::default()).unwrap();
        assert_eq!(kept, vec![(1, 0), (2, 1)]);
    }

    proptest! {
        #[test]
        fn matches_exactly_min_n_m_and_injective(n in 0usize..8, m in 0usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = Array2::from_shape_fn((n, m), |_| rng.random_range(0.0..10.0));
            let r = solve_assignment(&c).unwrap();
            prop_assert_eq!(r.pairs.len(), n.min(m));
            prop_assert_eq!(labels_from_matching(&r, n).iter().filter(|&&b| b).count(), n.min(m));
            let mut gts: Vec<usize> = r.pairs.iter().map(|p| p.1).collect();
            gts.sort_unstable();
            gts.dedup();
            prop_assert_eq!(gts.len(), r.pairs.len());
            prop_assert_eq!(r.unmatched_preds.len() + r.pairs.len(), n);
            prop_assert_eq!(r.unmatched_gts.len() + r.pairs.len(), m);
        }
    }
}
