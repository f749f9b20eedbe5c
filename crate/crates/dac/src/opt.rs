//! Small shared optimization helpers.

/// Golden-section minimization of a unimodal function on [lo, hi].
/// Returns the bracketing midpoint once the interval shrinks below
/// `tol`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Euclidean projection onto the probability simplex (Duchi et al.).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&u| (u - theta).max(0.0)).collect()
}

/// Minimizes `w' A w - 2 b' w` over the probability simplex in three
/// variables by enumerating all seven support patterns: for each
/// candidate support the equality-constrained stationary point is solved
/// in closed form, infeasible candidates are discarded, and the feasible
/// candidate with the lowest objective wins. For a convex (PSD) `A` this
/// yields a global minimizer and is immune to the near-degenerate
/// directions that stall first-order methods on this problem.
pub fn solve_simplex_qp3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> [f64; 3] {
    let objective = |w: &[f64; 3]| -> f64 {
        let mut v = 0.0;
        for j in 0..3 {
            for k in 0..3 {
                v += w[j] * a[j][k] * w[k];
            }
            v -= 2.0 * w[j] * b[j];
        }
        v
    };

    let mut best = [1.0, 0.0, 0.0];
    let mut best_obj = objective(&best);
    for mask in 1u32..8 {
        let support: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let m = support.len();
        // KKT system for min over the support with sum(w) = 1:
        // [2 A_SS  1] [w]   [2 b_S]
        // [1'      0] [l] = [1    ]
        let dim = m + 1;
        let mut sys = vec![vec![0.0f64; dim + 1]; dim];
        for (i, &si) in support.iter().enumerate() {
            for (j, &sj) in support.iter().enumerate() {
                sys[i][j] = 2.0 * a[si][sj];
            }
            sys[i][m] = 1.0;
            sys[i][dim] = 2.0 * b[si];
        }
        for j in 0..m {
            sys[m][j] = 1.0;
        }
        sys[m][dim] = 1.0;

        if let Some(solution) = solve_dense(&mut sys) {
            if solution[..m].iter().all(|&wi| wi >= -1e-10) {
                let mut w = [0.0f64; 3];
                for (i, &si) in support.iter().enumerate() {
                    w[si] = solution[i].max(0.0);
                }
                let sum: f64 = w.iter().sum();
                for wi in &mut w {
                    *wi /= sum;
                }
                let obj = objective(&w);
                if obj < best_obj {
                    best_obj = obj;
                    best = w;
                }
            }
        }
    }
    best
}

/// Gaussian elimination with partial pivoting on an augmented system;
/// `None` when a pivot is negligible relative to the matrix scale.
fn solve_dense(sys: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let n = sys.len();
    let scale = sys
        .iter()
        .flat_map(|row| row[..n].iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1.0);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| sys[i][col].abs().total_cmp(&sys[j][col].abs()))
            .unwrap();
        if sys[pivot_row][col].abs() < 1e-12 * scale {
            return None;
        }
        sys.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = sys[row][col] / sys[col][col];
            for k in col..=n {
                sys[row][k] -= factor * sys[col][k];
            }
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = sys[row][n];
        for k in row + 1..n {
            acc -= sys[row][k] * x[k];
        }
        x[row] = acc / sys[row][row];
    }
    Some(x)
}
