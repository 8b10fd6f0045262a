//! Minimum-cost bipartite assignment.

/// Optimal assignment for a dense `rows x cols` cost matrix (row-major).
///
/// Returns, for each row, the assigned column or `None`. Exactly
/// `min(rows, cols)` rows are assigned and the total cost is minimal.
pub fn assign(cost: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(cost.len(), rows * cols, "cost matrix size");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows <= cols {
        hungarian(|i, j| cost[i * cols + j], rows, cols)
            .into_iter()
            .map(Some)
            .collect()
    } else {
        let by_col = hungarian(|i, j| cost[j * cols + i], cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            out[r] = Some(c);
        }
        out
    }
}

/// Shortest augmenting path Hungarian algorithm with potentials; requires
/// `n <= m` and assigns every one of the `n` rows.
fn hungarian(cost: impl Fn(usize, usize) -> f64, n: usize, m: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) owning column j; column 0 is the virtual root.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(cost: &[f64], cols: usize, a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[i * cols + j])).sum()
    }

    #[test]
    fn forced_single_pair() {
        assert_eq!(assign(&[1e9], 1, 1), vec![Some(0)]);
    }

    #[test]
    fn three_by_two_leaves_one_unmatched_at_minimum() {
        let cost = [4.0, 1.0, 2.0, 0.5, 3.0, 3.0];
        let a = assign(&cost, 3, 2);
        assert_eq!(a.iter().filter(|x| x.is_none()).count(), 1);
        assert_eq!(total(&cost, 2, &a), 3.0);
    }

    #[test]
    fn wide_matrix() {
        let cost = [5.0, 1.0, 9.0, 2.0, 8.0, 0.0];
        let a = assign(&cost, 2, 3);
        assert_eq!(a, vec![Some(1), Some(2)]);
    }

    #[test]
    fn empty_sides() {
        assert_eq!(assign(&[], 0, 4), Vec::<Option<usize>>::new());
        assert_eq!(assign(&[], 3, 0), vec![None, None, None]);
    }
}
