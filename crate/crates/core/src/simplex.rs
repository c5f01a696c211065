//! Dense two-phase simplex with Bland's anti-cycling rule, for linear
//! programs of the form `min c'x  s.t.  A x <= b,  x >= 0` where `b` may
//! have negative entries. Small and deterministic; no external solver.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

const PIVOT_EPS: f64 = 1e-11;

struct Tableau {
    /// (m+1) x (cols+1): constraint rows plus an objective row; the last
    /// column is the right-hand side.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    m: usize,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[(row, col)];
        let ncols = self.cols + 1;
        for j in 0..ncols {
            self.t[(row, j)] /= piv;
        }
        for i in 0..=self.m {
            if i == row {
                continue;
            }
            let factor = self.t[(i, col)];
            if factor.abs() <= PIVOT_EPS {
                continue;
            }
            for j in 0..ncols {
                self.t[(i, j)] -= factor * self.t[(row, j)];
            }
        }
        self.basis[row] = col;
    }

    /// One simplex pass with Bland's rule over the allowed columns.
    /// Returns Ok(true) when optimal, Ok(false) after a pivot.
    fn bland_step(&mut self, allowed: &[bool]) -> Result<bool> {
        // entering: lowest-index column with negative reduced cost
        let mut enter = None;
        for j in 0..self.cols {
            if allowed[j] && self.t[(self.m, j)] < -PIVOT_EPS {
                enter = Some(j);
                break;
            }
        }
        let Some(col) = enter else {
            return Ok(true);
        };
        // leaving: min ratio, ties to the lowest basic variable index
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let a = self.t[(i, col)];
            if a > PIVOT_EPS {
                let ratio = self.t[(i, self.cols)] / a;
                let better = match leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < lr - PIVOT_EPS
                            || (ratio < lr + PIVOT_EPS && self.basis[i] < self.basis[li])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        let Some((row, _)) = leave else {
            // unbounded; cannot happen for the Dantzig reformulation but
            // surfaces as a stall rather than looping forever
            return Err(Error::SolverStall(0));
        };
        self.pivot(row, col);
        Ok(false)
    }
}

/// Solve `min c'x  s.t.  A x <= b,  x >= 0`.
pub fn solve_lp(c: &[f64], a: &DMatrix<f64>, b: &[f64], max_iters: usize) -> Result<LpSolution> {
    let m = a.nrows();
    let n = a.ncols();
    if c.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "c has {} entries, A is {}x{}, b has {}",
            c.len(),
            m,
            n,
            b.len()
        )));
    }

    // columns: n structural, m slack, then artificials for rows with b < 0
    let neg_rows: Vec<usize> = (0..m).filter(|&i| b[i] < 0.0).collect();
    let n_art = neg_rows.len();
    let cols = n + m + n_art;
    let mut t = DMatrix::<f64>::zeros(m + 1, cols + 1);
    let mut basis = vec![0usize; m];

    let mut art_idx = 0;
    for i in 0..m {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[(i, j)] = flip * a[(i, j)];
        }
        t[(i, n + i)] = flip; // slack
        t[(i, cols)] = flip * b[i];
        if b[i] < 0.0 {
            let aj = n + m + art_idx;
            t[(i, aj)] = 1.0;
            basis[i] = aj;
            art_idx += 1;
        } else {
            basis[i] = n + i;
        }
    }

    let mut tab = Tableau { t, basis, m, cols };
    let mut iterations = 0usize;

    if n_art > 0 {
        // phase 1: minimize the sum of artificials
        for j in (n + m)..cols {
            tab.t[(m, j)] = 1.0;
        }
        // price out the artificial basis
        for i in 0..m {
            if tab.basis[i] >= n + m {
                for j in 0..=cols {
                    let v = tab.t[(i, j)];
                    tab.t[(m, j)] -= v;
                }
            }
        }
        let allowed = vec![true; cols];
        loop {
            if tab.bland_step(&allowed)? {
                break;
            }
            iterations += 1;
            if iterations >= max_iters {
                return Err(Error::SolverStall(max_iters));
            }
        }
        let phase1_obj = -tab.t[(m, cols)];
        if phase1_obj > 1e-7 {
            return Err(Error::Infeasible);
        }
        // drive any artificial still in the basis out (degenerate rows)
        for i in 0..m {
            if tab.basis[i] >= n + m {
                let mut pivoted = false;
                for j in 0..(n + m) {
                    if tab.t[(i, j)].abs() > PIVOT_EPS {
                        tab.pivot(i, j);
                        pivoted = true;
                        break;
                    }
                }
                if !pivoted {
                    // redundant row; leave the artificial at zero
                    continue;
                }
            }
        }
    }

    // phase 2 objective over structural + slack columns only
    let allowed: Vec<bool> = (0..cols).map(|j| j < n + m).collect();
    for j in 0..=cols {
        tab.t[(m, j)] = 0.0;
    }
    for (j, &cj) in c.iter().enumerate() {
        tab.t[(m, j)] = cj;
    }
    for i in 0..m {
        let bi = tab.basis[i];
        if bi < n {
            let cb = c[bi];
            if cb != 0.0 {
                for j in 0..=cols {
                    let v = tab.t[(i, j)];
                    tab.t[(m, j)] -= cb * v;
                }
            }
        }
    }
    loop {
        if tab.bland_step(&allowed)? {
            break;
        }
        iterations += 1;
        if iterations >= max_iters {
            return Err(Error::SolverStall(max_iters));
        }
    }

    let mut x = vec![0.0f64; n];
    for i in 0..m {
        if tab.basis[i] < n {
            x[tab.basis[i]] = tab.t[(i, cols)];
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpSolution {
        x,
        objective,
        iterations,
    })
}
