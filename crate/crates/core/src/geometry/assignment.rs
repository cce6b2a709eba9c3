//! Dense linear assignment by shortest augmenting paths (Jonker-Volgenant
//! style), with optional warm-started column potentials.

const NONE: usize = usize::MAX;

#[derive(Clone, Debug)]
pub struct Assignment {
    /// Column assigned to each row.
    pub row_to_col: Vec<usize>,
    /// Column dual potentials at the optimum; feed back as a warm start when
    /// solving a nearby problem.
    pub col_potential: Vec<f64>,
    pub cost: f64,
}

/// Minimum-cost perfect matching on a square `n x n` row-major cost matrix.
///
/// Any `warm` potentials give an exact result; good ones (from a similar
/// cost matrix) leave most rows matched by the initial greedy pass.
pub fn solve(cost: &[f64], n: usize, warm: Option<&[f64]>) -> Assignment {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut v: Vec<f64> = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => (0..n)
            .map(|j| (0..n).map(|i| c(i, j)).fold(f64::INFINITY, f64::min))
            .collect(),
    };
    let mut u = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];

    // Greedy pass: rows take their best reduced-cost column when free. This
    // keeps every matched edge tight and every reduced cost non-negative.
    for i in 0..n {
        let (mut best, mut bj) = (f64::INFINITY, 0);
        for j in 0..n {
            let r = c(i, j) - v[j];
            if r < best {
                best = r;
                bj = j;
            }
        }
        u[i] = best;
        if row4col[bj] == NONE {
            row4col[bj] = i;
            col4row[i] = bj;
        }
    }

    augmenting_row_reduction(cost, n, &mut v, &mut col4row, &mut row4col);
    for i in 0..n {
        u[i] = match col4row[i] {
            NONE => (0..n).map(|j| c(i, j) - v[j]).fold(f64::INFINITY, f64::min),
            j => c(i, j) - v[j],
        };
    }

    let mut shortest = vec![f64::INFINITY; n];
    let mut path = vec![NONE; n];
    let mut scanned_rows = vec![false; n];
    let mut scanned_cols = vec![false; n];
    let mut remaining = vec![0usize; n];

    for cur in 0..n {
        if col4row[cur] != NONE {
            continue;
        }
        shortest.fill(f64::INFINITY);
        scanned_rows.fill(false);
        scanned_cols.fill(false);
        for (k, r) in remaining.iter_mut().enumerate() {
            *r = n - 1 - k;
        }
        let mut left = n;
        let mut min_val = 0.0;
        let mut i = cur;
        let sink = loop {
            scanned_rows[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = NONE;
            for (it, &j) in remaining[..left].iter().enumerate() {
                let r = min_val + c(i, j) - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            assert!(index != NONE, "assignment cost matrix must be finite");
            min_val = lowest;
            let j = remaining[index];
            scanned_cols[j] = true;
            left -= 1;
            remaining[index] = remaining[left];
            if row4col[j] == NONE {
                break j;
            }
            i = row4col[j];
        };

        u[cur] += min_val;
        for r in 0..n {
            if scanned_rows[r] && r != cur {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if scanned_cols[j] {
                v[j] -= min_val - shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            let prev = col4row[r];
            col4row[r] = j;
            if r == cur {
                break;
            }
            j = prev;
        }
    }

    let total = col4row.iter().enumerate().map(|(i, &j)| c(i, j)).sum();
    Assignment {
        row_to_col: col4row,
        col_potential: v,
        cost: total,
    }
}

/// Two rounds of row reduction: each free row takes its best reduced-cost
/// column, lowering that column's potential to the row's second-best value
/// and evicting the previous owner. Every matched row stays tight and
/// minimal, so the shortest-path phase only has to place the leftovers.
fn augmenting_row_reduction(cost: &[f64], n: usize, v: &mut [f64], col4row: &mut [usize], row4col: &mut [usize]) {
    if n < 2 {
        return;
    }
    let mut free: Vec<usize> = (0..n).filter(|&i| col4row[i] == NONE).collect();
    for _ in 0..2 {
        let mut next = Vec::with_capacity(free.len());
        let mut budget = 2 * n;
        let mut k = 0;
        while k < free.len() {
            let i = free[k];
            k += 1;
            let row = &cost[i * n..(i + 1) * n];
            let (mut u1, mut j1) = (f64::INFINITY, 0);
            let (mut u2, mut j2) = (f64::INFINITY, 0);
            for j in 0..n {
                let r = row[j] - v[j];
                if r < u2 {
                    if r < u1 {
                        (u2, j2) = (u1, j1);
                        (u1, j1) = (r, j);
                    } else {
                        (u2, j2) = (r, j);
                    }
                }
            }
            let mut take = j1;
            let mut evicted = row4col[j1];
            if u1 < u2 {
                v[j1] -= u2 - u1;
            } else if evicted != NONE {
                take = j2;
                evicted = row4col[j2];
            }
            if evicted != NONE {
                col4row[evicted] = NONE;
            }
            row4col[take] = i;
            col4row[i] = take;
            if evicted != NONE {
                if u1 < u2 && budget > 0 {
                    budget -= 1;
                    k -= 1;
                    free[k] = evicted;
                } else {
                    next.push(evicted);
                }
            }
        }
        free = next;
        if free.is_empty() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn brute_force(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn matches_enumeration_on_random_matrices() {
        let mut rng = Rng::new(1);
        for n in 1..=7 {
            for _ in 0..30 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.uniform(-3.0, 5.0)).collect();
                let a = solve(&cost, n, None);
                let mut cols = a.row_to_col.clone();
                cols.sort();
                assert_eq!(cols, (0..n).collect::<Vec<_>>());
                assert!((a.cost - brute_force(&cost, n)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warm_start_from_any_potentials_is_exact() {
        let mut rng = Rng::new(2);
        let n = 6;
        for _ in 0..30 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let warm: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let a = solve(&cost, n, Some(&warm));
            assert!((a.cost - brute_force(&cost, n)).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_everywhere_still_a_permutation() {
        let n = 5;
        let a = solve(&vec![1.0; n * n], n, None);
        let mut cols = a.row_to_col;
        cols.sort();
        assert_eq!(cols, (0..n).collect::<Vec<_>>());
        assert_eq!(a.cost, 5.0);
    }
}
