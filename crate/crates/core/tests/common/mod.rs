#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_symmetric(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let v: f64 = StandardNormal.sample(rng);
            m[(i, j)] = v * scale;
            m[(j, i)] = v * scale;
        }
    }
    m
}

pub fn random_psd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim + 2, dim, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    g.transpose() * g / (dim + 2) as f64
}

fn eig_project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0);
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn clamp_to_box(x: &DMatrix<f64>, center: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        x[(i, j)].clamp(center[(i, j)] - t, center[(i, j)] + t)
    })
}

pub fn min_eig(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// Dual lower bound on the max-norm distance to the PSD cone: any direction
/// v gives `t* >= -v'Av / |v|_1^2` by weak duality with the rank-one dual
/// variable vv'/|v|_1^2. Maximized over the sphere by grid plus refinement.
fn psd_distance_lower_bound(a: &DMatrix<f64>) -> f64 {
    let score = |v: &DVector<f64>| {
        let l1 = v.lp_norm(1);
        -(a * v).dot(v) / (l1 * l1)
    };
    let dim = a.nrows();
    assert_eq!(dim, 3);
    let mut best = 0.0f64;
    let mut best_v = DVector::from_element(3, 1.0);
    let steps = 120;
    for it in 0..steps {
        let theta = std::f64::consts::PI * it as f64 / steps as f64;
        for ip in 0..(2 * steps) {
            let phi = std::f64::consts::PI * ip as f64 / steps as f64;
            let v = DVector::from_vec(vec![
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                theta.cos(),
            ]);
            let s = score(&v);
            if s > best {
                best = s;
                best_v = v;
            }
        }
    }
    // coordinate-wise pattern refinement around the best grid direction
    let mut step = 0.05f64;
    while step > 1e-9 {
        let mut improved = false;
        for j in 0..dim {
            for sgn in [-1.0f64, 1.0] {
                let mut v = best_v.clone();
                v[j] += sgn * step;
                if v.norm() < 1e-12 {
                    continue;
                }
                let s = score(&v);
                if s > best {
                    best = s;
                    best_v = v;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    best
}

/// Certified lower bound on the minimal max-norm distance from `a` to the
/// PSD cone: exact for 2x2, dual rank-one bound for 3x3. Any feasible
/// (PSD) point at distance within 1e-3 of this bound is within 1e-3 of
/// the optimum. Independent of the ADMM solver.
pub fn psd_distance_oracle(a: &DMatrix<f64>) -> f64 {
    if min_eig(a) >= 0.0 {
        return 0.0;
    }
    if a.nrows() == 2 {
        return psd_distance_2x2(a);
    }
    psd_distance_lower_bound(a)
}

/// Exact 2x2 feasibility: lifting both diagonal entries by t and shrinking
/// the off-diagonal toward zero by t is optimal, so feasibility at radius t
/// reduces to a determinant check.
fn psd_distance_2x2(a: &DMatrix<f64>) -> f64 {
    let feasible = |t: f64| {
        let d1 = a[(0, 0)] + t;
        let d2 = a[(1, 1)] + t;
        let b = (a[(0, 1)].abs() - t).max(0.0);
        d1 >= 0.0 && d2 >= 0.0 && d1 * d2 >= b * b
    };
    if feasible(0.0) {
        return 0.0;
    }
    let mut lo = 0.0f64;
    let mut hi = (eig_project_psd(a) - a).amax().max(1e-12);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Accelerated proximal-gradient reference for
/// `0.5 theta' Sigma theta - rho' theta + lambda |theta|_1`.
pub fn fista_lasso(
    sigma: &DMatrix<f64>,
    rho: &DVector<f64>,
    lambda: f64,
    iters: usize,
) -> DVector<f64> {
    let p = rho.len();
    let lip = sigma
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .amax()
        .max(1e-10);
    let step = 1.0 / lip;
    let mut theta = DVector::zeros(p);
    let mut momentum = theta.clone();
    let mut t_acc = 1.0f64;
    for _ in 0..iters {
        let grad = sigma * &momentum - rho;
        let mut next = &momentum - step * grad;
        for v in next.iter_mut() {
            *v = v.signum() * (v.abs() - lambda * step).max(0.0);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        momentum = &next + ((t_acc - 1.0) / t_next) * (&next - &theta);
        theta = next;
        t_acc = t_next;
    }
    theta
}

pub fn lasso_objective_value(
    sigma: &DMatrix<f64>,
    rho: &DVector<f64>,
    lambda: f64,
    theta: &DVector<f64>,
) -> f64 {
    0.5 * (sigma * theta).dot(theta) - rho.dot(theta) + lambda * theta.lp_norm(1)
}

/// Minimal l1 norm subject to `|s21 - s22 w|_inf <= lambda` by enumerating
/// basic solutions of the split LP over (w+, w-). Exhaustive for small d.
pub fn dantzig_oracle_l1(s22: &DMatrix<f64>, s21: &DVector<f64>, lambda: f64) -> f64 {
    let d = s21.len();
    let nv = 2 * d;
    let nc = 4 * d;
    // rows 0..d:   s22 (w+ - w-) <= s21 + lambda
    // rows d..2d: -s22 (w+ - w-) <= -s21 + lambda
    // rows 2d..4d: -x_j <= 0
    let mut a = DMatrix::zeros(nc, nv);
    let mut b = vec![0.0; nc];
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = s22[(i, j)];
            a[(i, d + j)] = -s22[(i, j)];
            a[(d + i, j)] = -s22[(i, j)];
            a[(d + i, d + j)] = s22[(i, j)];
        }
        b[i] = s21[i] + lambda;
        b[d + i] = -s21[i] + lambda;
    }
    for j in 0..nv {
        a[(2 * d + j, j)] = -1.0;
    }

    let mut best = f64::INFINITY;
    let mut active = vec![0usize; nv];
    enumerate_vertices(&a, &b, nv, 0, 0, &mut active, &mut best);
    best
}

fn enumerate_vertices(
    a: &DMatrix<f64>,
    b: &[f64],
    nv: usize,
    depth: usize,
    start: usize,
    active: &mut [usize],
    best: &mut f64,
) {
    let nc = b.len();
    if depth == nv {
        let mut m = DMatrix::zeros(nv, nv);
        let mut rhs = DVector::zeros(nv);
        for (r, &c) in active.iter().enumerate() {
            for j in 0..nv {
                m[(r, j)] = a[(c, j)];
            }
            rhs[r] = b[c];
        }
        let lu = m.lu();
        let Some(x) = lu.solve(&rhs) else { return };
        for i in 0..nc {
            let mut lhs = 0.0;
            for j in 0..nv {
                lhs += a[(i, j)] * x[j];
            }
            if lhs > b[i] + 1e-8 {
                return;
            }
        }
        let obj: f64 = x.iter().sum();
        if obj < *best {
            *best = obj;
        }
        return;
    }
    for c in start..nc {
        active[depth] = c;
        enumerate_vertices(a, b, nv, depth + 1, c + 1, active, best);
    }
}
