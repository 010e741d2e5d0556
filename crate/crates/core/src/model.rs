//! The spiked covariance model `Sigma = sum_nu lambda_nu theta_nu theta_nu^T + I`,
//! Gaussian sampling in factor form, and `l_q` sparsity balls.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayBase, Axis, Data, Ix1, Ix2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::StreamSeed;
use crate::{Error, Result};

/// Orthonormality drift accepted silently.
const ORTHO_EXACT_TOL: f64 = 1e-10;
/// Orthonormality drift repaired by Gram-Schmidt; anything larger is rejected.
const ORTHO_REPAIR_TOL: f64 = 1e-4;

/// Population model with unit noise variance.
#[derive(Debug, Clone, Serialize)]
pub struct SpikedCovariance {
    lambdas: Vec<f64>,
    thetas: Array2<f64>,
}

impl SpikedCovariance {
    /// Builds a model from spike sizes and an `N x M` matrix of spike
    /// directions.
    ///
    /// Spikes must be finite, nonnegative and nonincreasing, strictly
    /// decreasing while positive. A zero spike is accepted so that the null
    /// model can be expressed with the same shape.
    pub fn new(lambdas: Vec<f64>, thetas: Array2<f64>) -> Result<Self> {
        let (dim, rank) = thetas.dim();
        if rank == 0 || lambdas.len() != rank {
            return Err(Error::InvalidModel(format!(
                "{} spike sizes for {} directions",
                lambdas.len(),
                rank
            )));
        }
        if rank >= dim {
            return Err(Error::InvalidModel(format!(
                "rank M = {rank} must be smaller than dimension N = {dim}"
            )));
        }
        for (i, &l) in lambdas.iter().enumerate() {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::InvalidModel(format!("lambda[{i}] = {l} is not a nonnegative number")));
            }
            if i > 0 {
                let prev = lambdas[i - 1];
                if l > prev || (l == prev && l > 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "spikes must be strictly decreasing: lambda[{}] = {prev}, lambda[{i}] = {l}",
                        i - 1
                    )));
                }
            }
        }
        let drift = orthonormality_error(&thetas);
        let thetas = if drift <= ORTHO_EXACT_TOL {
            thetas
        } else if drift <= ORTHO_REPAIR_TOL {
            modified_gram_schmidt(thetas)
        } else {
            return Err(Error::InvalidModel(format!(
                "spike directions are not orthonormal (max deviation {drift:e})"
            )));
        };
        Ok(SpikedCovariance { lambdas, thetas })
    }

    /// Single spike of size `lambda` along `theta`.
    pub fn single(lambda: f64, theta: Array1<f64>) -> Result<Self> {
        let n = theta.len();
        Self::new(vec![lambda], theta.into_shape_with_order((n, 1)).unwrap())
    }

    /// Spikes along the first `M` standard basis vectors.
    pub fn standard_basis(dim: usize, lambdas: Vec<f64>) -> Result<Self> {
        let rank = lambdas.len();
        if rank > dim {
            return Err(Error::InvalidModel(format!("rank {rank} exceeds dimension {dim}")));
        }
        let mut thetas = Array2::zeros((dim, rank));
        for j in 0..rank {
            thetas[[j, j]] = 1.0;
        }
        Self::new(lambdas, thetas)
    }

    pub fn dim(&self) -> usize {
        self.thetas.nrows()
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn thetas(&self) -> &Array2<f64> {
        &self.thetas
    }

    /// Noise variance, fixed to one. Rescale spikes by `1/sigma^2` for other
    /// noise levels.
    pub fn sigma2(&self) -> f64 {
        1.0
    }

    /// The population covariance matrix.
    pub fn covariance(&self) -> Array2<f64> {
        let scaled = &self.thetas * &Array1::from(self.lambdas.clone()).insert_axis(Axis(0));
        let mut sigma = scaled.dot(&self.thetas.t());
        for i in 0..self.dim() {
            sigma[[i, i]] += 1.0;
        }
        symmetrize(&mut sigma);
        sigma
    }

    /// Draws `n` observations `X_i = sum_nu sqrt(lambda_nu) v_{nu i} theta_nu + Z_i`.
    ///
    /// The stream is consumed in a fixed order: the `M x n` factor scores
    /// row by row, then the `N x n` noise matrix row by row.
    pub fn sample(&self, n: usize, seed: impl Into<StreamSeed>) -> Result<DataMatrix> {
        if n == 0 {
            return Err(Error::Precondition("sample size n must be at least 1".into()));
        }
        let seed = seed.into();
        let mut rng = seed.rng();
        let rank = self.rank();
        let dim = self.dim();
        let mut factors = Array2::<f64>::zeros((rank, n));
        for x in factors.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let mut entries = Array2::<f64>::zeros((dim, n));
        for x in entries.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        for (nu, &lambda) in self.lambdas.iter().enumerate() {
            if lambda == 0.0 {
                continue;
            }
            let amp = lambda.sqrt();
            let theta = self.thetas.column(nu);
            let v = factors.row(nu);
            for k in 0..dim {
                let tk = amp * theta[k];
                if tk != 0.0 {
                    entries.row_mut(k).scaled_add(tk, &v);
                }
            }
        }
        Ok(DataMatrix { entries, seed })
    }
}

/// An `N x n` data matrix with observations as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    pub entries: Array2<f64>,
    pub seed: StreamSeed,
}

impl DataMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn sample_size(&self) -> usize {
        self.entries.ncols()
    }

    /// The uncentered sample covariance `S = X X^T / n`.
    pub fn sample_covariance(&self) -> Array2<f64> {
        sample_covariance(&self.entries)
    }
}

/// `X X^T / n` for an `N x n` matrix, without mean subtraction.
pub fn sample_covariance<S: Data<Elem = f64>>(x: &ArrayBase<S, Ix2>) -> Array2<f64> {
    let n = x.ncols().max(1) as f64;
    let mut s = x.dot(&x.t());
    s.mapv_inplace(|v| v / n);
    symmetrize(&mut s);
    s
}

fn symmetrize(a: &mut Array2<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            a[[j, i]] = a[[i, j]];
        }
    }
}

/// Read access to a sample covariance matrix. Estimators only touch the
/// diagonal and a few blocks, so a data matrix can serve them without ever
/// forming the full `N x N` product.
pub trait CovarianceAccess {
    fn dim(&self) -> usize;
    fn diagonal(&self) -> Array1<f64>;
    fn block(&self, rows: &[usize], cols: &[usize]) -> Array2<f64>;
}

impl<S: Data<Elem = f64>> CovarianceAccess for ArrayBase<S, Ix2> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn diagonal(&self) -> Array1<f64> {
        self.diag().to_owned()
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> Array2<f64> {
        self.select(Axis(0), rows).select(Axis(1), cols)
    }
}

impl CovarianceAccess for DataMatrix {
    fn dim(&self) -> usize {
        self.entries.nrows()
    }

    fn diagonal(&self) -> Array1<f64> {
        let n = self.sample_size() as f64;
        self.entries.map_axis(Axis(1), |row| row.dot(&row) / n)
    }

    fn block(&self, rows: &[usize], cols: &[usize]) -> Array2<f64> {
        let n = self.sample_size() as f64;
        let xr = self.entries.select(Axis(0), rows);
        let xc = self.entries.select(Axis(0), cols);
        let mut b = xr.dot(&xc.t());
        b.mapv_inplace(|v| v / n);
        b
    }
}

/// Maximum deviation of `Theta^T Theta` from the identity.
pub fn orthonormality_error<S: Data<Elem = f64>>(thetas: &ArrayBase<S, Ix2>) -> f64 {
    let gram = thetas.t().dot(thetas);
    let mut worst = 0.0f64;
    for ((i, j), &g) in gram.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((g - target).abs());
    }
    worst
}

fn modified_gram_schmidt(mut q: Array2<f64>) -> Array2<f64> {
    let cols = q.ncols();
    for j in 0..cols {
        for i in 0..j {
            let (done, mut rest) = q.multi_slice_mut((s![.., i], s![.., j]));
            let proj = done.dot(&rest);
            rest.scaled_add(-proj, &done);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|v| v / norm);
    }
    q
}

/// The `l_q` ball `{a in S^{N-1} : sum |a_k|^q <= C^q}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityBall {
    pub q: f64,
    #[serde(rename = "C")]
    pub radius: f64,
}

impl SparsityBall {
    pub fn new(q: f64, radius: f64) -> Result<Self> {
        if !(q > 0.0 && q < 2.0) {
            return Err(Error::Precondition(format!("q = {q} must lie in (0, 2)")));
        }
        if !(radius >= 1.0) || !radius.is_finite() {
            return Err(Error::Precondition(format!("radius C = {radius} must be at least 1")));
        }
        Ok(SparsityBall { q, radius })
    }

    /// `C^q - 1`, the mass available beyond a single unit coordinate.
    pub fn c_bar_q(&self) -> f64 {
        self.radius.powf(self.q) - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LqMembership {
    pub inside: bool,
    /// `sum_k |v_k|^q`.
    pub value: f64,
}

pub fn lq_membership<S: Data<Elem = f64>>(v: &ArrayBase<S, Ix1>, ball: &SparsityBall) -> Result<LqMembership> {
    let norm = v.dot(v).sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::Precondition(format!("vector has norm {norm}, expected 1")));
    }
    let value: f64 = v.iter().map(|x| x.abs().powf(ball.q)).sum();
    Ok(LqMembership {
        inside: value <= ball.radius.powf(ball.q),
        value,
    })
}

/// Parameters of the single-spike least-favourable direction for diagonal
/// thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeastFavorable {
    /// Mass moved off the first coordinate, `r_n = Cbar^{q/2} n^{-(1-q/2)/4}`.
    pub r_n: f64,
    /// Number of small coordinates, `floor(Cbar^q n^{q/4} / 2)`.
    pub m_n: usize,
}

impl LeastFavorable {
    pub fn new(q: f64, c: f64, n: usize, dim: usize) -> Result<Self> {
        let ball = SparsityBall::new(q, c)?;
        if c <= 1.0 {
            return Err(Error::InfeasibleConstruction(format!("C = {c} must exceed 1")));
        }
        let c_bar_q = ball.c_bar_q();
        let nf = n as f64;
        let r_n = c_bar_q.sqrt() * nf.powf(-0.25 * (1.0 - q / 2.0));
        let m_n = (0.5 * c_bar_q * nf.powf(q / 4.0)).floor() as usize;
        if r_n >= 1.0 {
            return Err(Error::InfeasibleConstruction(format!("r_n = {r_n} is not below 1")));
        }
        if m_n < 1 {
            return Err(Error::InfeasibleConstruction("m_n = 0: no room for small coordinates".into()));
        }
        if m_n + 1 > dim {
            return Err(Error::InfeasibleConstruction(format!(
                "m_n + 1 = {} exceeds dimension {dim}",
                m_n + 1
            )));
        }
        Ok(LeastFavorable { r_n, m_n })
    }

    pub fn vector(&self, dim: usize) -> Array1<f64> {
        let mut theta = Array1::zeros(dim);
        theta[0] = (1.0 - self.r_n * self.r_n).sqrt();
        let small = self.r_n / (self.m_n as f64).sqrt();
        theta.slice_mut(s![1..=self.m_n]).fill(small);
        theta
    }
}

/// The unit vector `theta_*` whose small coordinates diagonal thresholding
/// misses: `sqrt(1 - r_n^2)` on the first coordinate and `r_n / sqrt(m_n)` on
/// the next `m_n`.
pub fn dt_least_favorable(q: f64, c: f64, n: usize, dim: usize) -> Result<Array1<f64>> {
    Ok(LeastFavorable::new(q, c, n, dim)?.vector(dim))
}

/// How spike directions are specified in a model config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSpec {
    StandardBasis,
    DtLeastFavorable {
        q: f64,
        #[serde(rename = "C")]
        c: f64,
    },
    /// Whitespace-separated rows of an `N x M` matrix.
    MatrixFile(String),
}

/// Plain-text model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "N")]
    pub dim: usize,
    #[serde(rename = "M", default)]
    pub rank: Option<usize>,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_theta_spec")]
    pub theta_spec: ThetaSpec,
}

fn default_theta_spec() -> ThetaSpec {
    ThetaSpec::StandardBasis
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config("model", e.to_string()))
    }

    /// Builds the model; `n` is only needed by the least-favourable spec.
    pub fn resolve(&self, n: usize) -> Result<SpikedCovariance> {
        if let Some(rank) = self.rank {
            if rank != self.lambdas.len() {
                return Err(Error::config(
                    "M",
                    format!("M = {rank} but {} lambdas given", self.lambdas.len()),
                ));
            }
        }
        let rank = self.lambdas.len();
        match &self.theta_spec {
            ThetaSpec::StandardBasis => SpikedCovariance::standard_basis(self.dim, self.lambdas.clone()),
            ThetaSpec::DtLeastFavorable { q, c } => {
                let lf = LeastFavorable::new(*q, *c, n, self.dim)?;
                let mut thetas = Array2::zeros((self.dim, rank));
                thetas.column_mut(0).assign(&lf.vector(self.dim));
                // remaining spikes sit on coordinates past the support of theta_*
                for j in 1..rank {
                    let k = lf.m_n + j;
                    if k >= self.dim {
                        return Err(Error::InfeasibleConstruction(format!(
                            "no free coordinate for spike {}",
                            j + 1
                        )));
                    }
                    thetas[[k, j]] = 1.0;
                }
                SpikedCovariance::new(self.lambdas.clone(), thetas)
            }
            ThetaSpec::MatrixFile(path) => {
                let thetas = read_matrix(Path::new(path))?;
                if thetas.dim() != (self.dim, rank) {
                    return Err(Error::config(
                        "theta_spec",
                        format!("matrix file is {:?}, expected ({}, {rank})", thetas.dim(), self.dim),
                    ));
                }
                SpikedCovariance::new(self.lambdas.clone(), thetas)
            }
        }
    }
}

/// Reads a matrix stored as whitespace-separated rows.
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    parse_matrix(&text)
}

pub fn parse_matrix(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::config("theta_spec", format!("line {}: bad number {tok:?}", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::config(
                    "theta_spec",
                    format!("line {}: expected {} columns, got {}", lineno + 1, first.len(), row.len()),
                ));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|e| Error::config("theta_spec", e.to_string()))
}
