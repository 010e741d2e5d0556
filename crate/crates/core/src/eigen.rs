//! Symmetric eigendecomposition and first-order eigenvector perturbation.
//!
//! The solver is a Householder tridiagonalisation followed by implicit QL
//! iterations. Eigenpairs are returned in nonincreasing eigenvalue order with
//! a fixed sign convention: the largest-magnitude coordinate of every
//! eigenvector is positive (lowest index wins a tie).

use ndarray::{Array1, Array2, ArrayBase, ArrayView1, Data, Ix2};
use serde::Serialize;

use crate::{Error, Result};

const MAX_QL_ITERATIONS: usize = 60;

/// Eigenvalues in nonincreasing order with matching orthonormal eigenvectors
/// stored as columns.
#[derive(Debug, Clone, Serialize)]
pub struct SymmetricSpectrum {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl SymmetricSpectrum {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn vector(&self, r: usize) -> ArrayView1<'_, f64> {
        self.vectors.column(r)
    }

    /// Spectral norm of the decomposed matrix.
    pub fn norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Rebuilds `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.vectors.t())
    }
}

fn check_symmetric<S: Data<Elem = f64>>(a: &ArrayBase<S, Ix2>) -> Result<usize> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(Error::Precondition(format!(
            "matrix must be square, got {rows}x{cols}"
        )));
    }
    if rows == 0 {
        return Err(Error::Precondition("matrix is empty".into()));
    }
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..rows {
        for j in (i + 1)..rows {
            let (x, y) = (a[[i, j]], a[[j, i]]);
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::Precondition("matrix has non-finite entries".into()));
            }
            if (x - y).abs() > 1e-10 * scale {
                return Err(Error::Precondition(format!(
                    "matrix is not symmetric at ({i}, {j}): {x} vs {y}"
                )));
            }
        }
        if !a[[i, i]].is_finite() {
            return Err(Error::Precondition("matrix has non-finite entries".into()));
        }
    }
    Ok(rows)
}

/// Full eigendecomposition of a symmetric matrix.
pub fn sym_eigen<S: Data<Elem = f64>>(a: &ArrayBase<S, Ix2>) -> Result<SymmetricSpectrum> {
    let n = check_symmetric(a)?;
    // Work on the symmetrised lower triangle so tiny asymmetries cannot leak in.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let x = 0.5 * (a[[i, j]] + a[[j, i]]);
            v[i * n + j] = x;
            v[j * n + i] = x;
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    tridiagonal_ql(n, &mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));

    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        values[col] = d[src];
        let mut lead = 0;
        let mut lead_abs = -1.0;
        for k in 0..n {
            let x = v[k * n + src].abs();
            if x > lead_abs {
                lead_abs = x;
                lead = k;
            }
        }
        let sign = if v[lead * n + src] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, col]] = sign * v[k * n + src];
        }
    }
    Ok(SymmetricSpectrum { values, vectors })
}

/// Householder reduction to tridiagonal form (row-major `v`, accumulating the
/// orthogonal transform in place).
fn tridiagonalize(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`, rotating the columns of `v`.
fn tridiagonal_ql(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let mut total_iterations = 0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                total_iterations += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::NoConvergence {
                        iterations: total_iterations,
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let hk = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * hk;
                        v[at(k, i)] = c * v[at(k, i)] - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Spectral norm of a symmetric matrix.
pub fn symmetric_norm<S: Data<Elem = f64>>(a: &ArrayBase<S, Ix2>) -> Result<f64> {
    Ok(sym_eigen(a)?.norm())
}

/// Operator 2-norm of an arbitrary real matrix, via the largest eigenvalue of
/// `M^T M`.
pub fn operator_norm<S: Data<Elem = f64>>(m: &ArrayBase<S, Ix2>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let gram = m.t().dot(m);
    Ok(sym_eigen(&gram)?.values[0].max(0.0).sqrt())
}

/// Groups eigenvalue indices whose values agree within `tol`.
fn eigen_groups(values: &Array1<f64>, tol: f64) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, &x) in values.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if (values[*g.last().unwrap()] - x).abs() <= tol => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

fn multiplicity_tolerance(spectrum: &SymmetricSpectrum) -> f64 {
    1e-10 * (1.0 + spectrum.norm())
}

/// Smallest distance from eigenvalue `r` to any other eigenvalue.
pub fn min_gap(spectrum: &SymmetricSpectrum, r: usize) -> f64 {
    spectrum
        .values
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != r)
        .map(|(_, &x)| (x - spectrum.values[r]).abs())
        .fold(f64::INFINITY, f64::min)
}

/// The reduced resolvent `H_r = sum_{s != r} P_s / (lambda_s - lambda_r)`,
/// summing over eigenspaces (indices are zero-based).
pub fn h_matrix(spectrum: &SymmetricSpectrum, r: usize) -> Result<Array2<f64>> {
    let n = spectrum.dim();
    if r >= n {
        return Err(Error::Precondition(format!(
            "eigen index {r} out of range for dimension {n}"
        )));
    }
    let tol = multiplicity_tolerance(spectrum);
    let groups = eigen_groups(&spectrum.values, tol);
    let own = groups.iter().find(|g| g.contains(&r)).unwrap();
    if own.len() > 1 {
        return Err(Error::DegenerateEigenvalue {
            index: r,
            gap: min_gap(spectrum, r),
        });
    }
    let lambda_r = spectrum.values[r];
    let mut h = Array2::zeros((n, n));
    for group in groups.iter().filter(|g| !g.contains(&r)) {
        let mean = group.iter().map(|&s| spectrum.values[s]).sum::<f64>() / group.len() as f64;
        let coef = 1.0 / (mean - lambda_r);
        for &s in group {
            let p = spectrum.vectors.column(s);
            for i in 0..n {
                let pi = coef * p[i];
                for j in 0..n {
                    h[[i, j]] += pi * p[j];
                }
            }
        }
    }
    Ok(h)
}

/// First-order expansion of `p_r(A + B)` around `p_r(A)` with residual bounds.
#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub r: usize,
    pub h_r: Array2<f64>,
    /// `-H_r B p_r`.
    pub first_order: Array1<f64>,
    /// `(||H_r B|| + |lambda_r(A+B) - lambda_r(A)| ||H_r||) / 2`.
    pub delta: f64,
    /// `||B|| / min_{j != r} |lambda_j - lambda_r|`.
    pub delta_bar: f64,
    /// Minimum of `10 delta_bar^2` and, when `delta < (sqrt 5 - 1)/4`, the
    /// refined bound in `||H_r B p_r||` and `delta`.
    pub residual_bound: f64,
    /// `30 ||H_r B p_r|| delta_bar`, only reported when `delta_bar <= 1/4`.
    pub simplified_bound: Option<f64>,
    pub perturbed_eigenvalue: f64,
}

pub fn perturb_eigvec<S, T>(
    a: &ArrayBase<S, Ix2>,
    b: &ArrayBase<T, Ix2>,
    r: usize,
) -> Result<PerturbationReport>
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
{
    if a.dim() != b.dim() {
        return Err(Error::Precondition(format!(
            "A is {:?} but B is {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let spec_a = sym_eigen(a)?;
    let h_r = h_matrix(&spec_a, r)?;
    let p_r = spec_a.vector(r);
    let hb = h_r.dot(b);
    let first_order = -hb.dot(&p_r);
    let beta = first_order.dot(&first_order).sqrt();

    let sum = a.to_owned() + b;
    let spec_sum = sym_eigen(&sum)?;
    let perturbed_eigenvalue = spec_sum.values[r];

    let gap = min_gap(&spec_a, r);
    let norm_h = if gap.is_finite() { 1.0 / gap } else { 0.0 };
    let norm_b = symmetric_norm(b)?;
    let delta = 0.5 * (operator_norm(&hb)? + (perturbed_eigenvalue - spec_a.values[r]).abs() * norm_h);
    let delta_bar = if gap.is_finite() { norm_b / gap } else { 0.0 };

    let mut residual_bound = 10.0 * delta_bar * delta_bar;
    if delta < (5f64.sqrt() - 1.0) / 4.0 {
        let x = 2.0 * delta * (1.0 + 2.0 * delta);
        let refined = beta * (x / (1.0 - x) + beta / ((1.0 - x) * (1.0 - x)));
        residual_bound = residual_bound.min(refined);
    }
    let simplified_bound = (delta_bar <= 0.25).then_some(30.0 * beta * delta_bar);

    Ok(PerturbationReport {
        r,
        h_r,
        first_order,
        delta,
        delta_bar,
        residual_bound,
        simplified_bound,
        perturbed_eigenvalue,
    })
}
