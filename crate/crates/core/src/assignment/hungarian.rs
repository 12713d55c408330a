use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pairwise costs, predictions along rows and ground truths along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    costs: Tensor,
}

impl CostMatrix {
    pub fn new(costs: Tensor) -> Result<Self> {
        if costs.rank() != 2 {
            return Err(Error::input(format!(
                "cost matrix must be rank 2, got {:?}",
                costs.shape()
            )));
        }
        if let Some(i) = costs.data().iter().position(|v| !v.is_finite()) {
            let cols = costs.shape()[1].max(1);
            return Err(Error::input(format!(
                "non-finite cost at ({}, {})",
                i / cols,
                i % cols
            )));
        }
        Ok(CostMatrix { costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn rows(&self) -> usize {
        self.costs.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.costs.shape()[1]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs.data()[r * self.cols() + c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.costs
    }
}

/// A partial bijection between prediction and ground-truth indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(pred, gt)` pairs sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn gt_for(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, g)| *g)
    }

    pub fn pred_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|(_, g)| *g == gt).map(|(p, _)| *p)
    }
}

/// Minimum-cost assignment of size `min(P, G)`.
///
/// Among optimal assignments the lexicographically smallest pair list (pairs
/// ordered by prediction index) is returned, so ties resolve deterministically.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let (p, g) = (costs.rows(), costs.cols());
    let k = p.min(g);
    if k == 0 {
        return Assignment {
            pairs: vec![],
            total_cost: 0.0,
        };
    }
    let all_rows: Vec<usize> = (0..p).collect();
    let all_cols: Vec<usize> = (0..g).collect();
    let target = solve_subset(costs, &all_rows, &all_cols).0;
    let scale: f64 = costs.tensor().data().iter().map(|v| v.abs()).fold(1.0, f64::max);
    let tol = 1e-9 * scale * k as f64;

    let mut pairs = Vec::with_capacity(k);
    let mut free_cols = all_cols;
    let mut running = 0.0;
    for row in 0..p {
        let needed = k - pairs.len();
        if needed == 0 {
            break;
        }
        let later_rows: Vec<usize> = (row + 1..p).collect();
        let mut chosen = None;
        for (ci, &col) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != ci)
                .map(|(_, &c)| c)
                .collect();
            if later_rows.len().min(rest_cols.len()) != needed - 1 {
                continue;
            }
            let rest = solve_subset(costs, &later_rows, &rest_cols).0;
            if (running + costs.get(row, col) + rest - target).abs() <= tol {
                chosen = Some(ci);
                break;
            }
        }
        if let Some(ci) = chosen {
            let col = free_cols.remove(ci);
            running += costs.get(row, col);
            pairs.push((row, col));
        }
    }
    debug_assert_eq!(pairs.len(), k);
    let total_cost = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
    Assignment { pairs, total_cost }
}

/// Optimal assignment restricted to the given rows and columns. Returns the
/// cost and `(row, col)` pairs using the original indices.
fn solve_subset(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    if rows.is_empty() || cols.is_empty() {
        return (0.0, vec![]);
    }
    if rows.len() <= cols.len() {
        let m = shortest_augmenting_path(rows.len(), cols.len(), |i, j| costs.get(rows[i], cols[j]));
        let pairs: Vec<(usize, usize)> = m.into_iter().map(|(i, j)| (rows[i], cols[j])).collect();
        (pairs.iter().map(|&(r, c)| costs.get(r, c)).sum(), pairs)
    } else {
        let m = shortest_augmenting_path(cols.len(), rows.len(), |j, i| costs.get(rows[i], cols[j]));
        let pairs: Vec<(usize, usize)> = m.into_iter().map(|(j, i)| (rows[i], cols[j])).collect();
        (pairs.iter().map(|&(r, c)| costs.get(r, c)).sum(), pairs)
    }
}

/// Potentials-based O(n^2 m) Hungarian method for `n <= m`; every row is matched.
fn shortest_augmenting_path(
    n: usize,
    m: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    debug_assert!(n <= m);
    // 1-based with column 0 as the virtual source
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
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Exhaustive minimum over all injections of size `min(P, G)`. Exponential;
/// used as an independent reference for small matrices.
pub fn brute_force_min_cost(costs: &CostMatrix) -> f64 {
    let (p, g) = (costs.rows(), costs.cols());
    let transposed = p > g;
    let (n, m) = if transposed { (g, p) } else { (p, g) };
    // (pred, gt) for slot i assigned to j
    let pair = |i: usize, j: usize| if transposed { (j, i) } else { (i, j) };
    let mut best = f64::INFINITY;
    let mut chosen = vec![0usize; n];
    let mut used = vec![false; m];
    fn recurse(
        i: usize,
        n: usize,
        m: usize,
        chosen: &mut [usize],
        used: &mut [bool],
        pair: &dyn Fn(usize, usize) -> (usize, usize),
        costs: &CostMatrix,
        best: &mut f64,
    ) {
        if i == n {
            // summed in prediction order, as `Assignment::total_cost` is
            let mut pairs: Vec<(usize, usize)> = (0..n).map(|r| pair(r, chosen[r])).collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(r, c)| costs.get(r, c)).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                chosen[i] = j;
                recurse(i + 1, n, m, chosen, used, pair, costs, best);
                used[j] = false;
            }
        }
    }
    if n == 0 {
        return 0.0;
    }
    recurse(0, n, m, &mut chosen, &mut used, &pair, costs, &mut best);
    best
}
