//! Eigenvector estimators: standard PCA, diagonal thresholding (D.T.) and
//! augmented sparse PCA (ASPCA).
//!
//! All estimators read the sample covariance through [`CovarianceAccess`], so
//! they can run on a dense matrix or directly on a data matrix. Coordinate
//! indices are zero-based throughout.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::eigen::{sym_eigen, SymmetricSpectrum};
use crate::model::CovarianceAccess;
use crate::{Error, Result};

/// Hard cap on the estimated number of spikes.
pub const MAX_COMPONENTS: usize = 32;

/// Threshold multipliers shared by the sparse estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    /// ASPCA stage-1 multiplier `gamma_1`.
    pub gamma1: f64,
    /// D.T. multiplier.
    pub gamma_dt: f64,
    /// Sets `kappa = sqrt(2 + epsilon)` in the stage-2 threshold.
    pub epsilon: f64,
    /// Multiplier for the coordinate pre-selection used to estimate `M`.
    pub gamma_bar: f64,
    /// Multiplier of the `sqrt(log max(n, N) / n)` term in `alpha_n`.
    pub alpha_mult: f64,
    /// Upper limit on the estimated rank (further capped at [`MAX_COMPONENTS`]).
    pub max_components: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            gamma1: 4.0,
            gamma_dt: 4.0,
            epsilon: 0.1,
            gamma_bar: 4.0,
            alpha_mult: 2.0 * 2f64.sqrt(),
            max_components: MAX_COMPONENTS,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gamma1", self.gamma1),
            ("gamma_dt", self.gamma_dt),
            ("epsilon", self.epsilon),
            ("gamma_bar", self.gamma_bar),
            ("alpha_mult", self.alpha_mult),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be strictly positive, got {v}")));
            }
        }
        if self.max_components == 0 {
            return Err(Error::config("max_components", "must be at least 1"));
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        (2.0 + self.epsilon).sqrt()
    }

    pub fn gamma2(&self) -> f64 {
        self.kappa() * 1.5f64.sqrt()
    }

    /// Stage-2 threshold `gamma_2 (sqrt(log N / n) + sqrt(M / n) / kappa)`.
    pub fn gamma2n(&self, dim: usize, n: usize, m: usize) -> f64 {
        self.gamma2() * (log_scale(dim, n) + (m as f64 / n as f64).sqrt() / self.kappa())
    }
}

/// `sqrt(log N / n)`, the unit of every coordinate threshold.
pub fn log_scale(dim: usize, n: usize) -> f64 {
    ((dim as f64).ln() / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorResult {
    pub m_used: usize,
    /// `N x m_used`, unit columns.
    pub theta_hats: Array2<f64>,
    /// Stage-1 coordinates (empty for PCA).
    pub selected_i: Vec<usize>,
    /// Stage-2 additions (ASPCA only).
    pub selected_j: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    /// Stage-1 selection was empty and was replaced by the largest diagonal entry.
    pub fallback: bool,
    /// No spike was detected, so no eigenvector is returned.
    pub no_signal: bool,
}

impl EstimatorResult {
    pub fn theta(&self, nu: usize) -> Option<ArrayView1<'_, f64>> {
        (nu < self.m_used).then(|| self.theta_hats.column(nu))
    }

    /// All coordinates the estimator was allowed to use.
    pub fn support(&self) -> Vec<usize> {
        let mut k: Vec<usize> = self.selected_i.iter().chain(&self.selected_j).copied().collect();
        k.sort_unstable();
        k
    }
}

fn check_sizes(dim: usize, n: usize) -> Result<()> {
    if dim < 2 || n < 2 {
        return Err(Error::Precondition(format!("need N >= 2 and n >= 2, got N = {dim}, n = {n}")));
    }
    Ok(())
}

/// Top-`m` eigenvectors of the full sample covariance.
pub fn pca<C: CovarianceAccess + ?Sized>(s: &C, m: usize, n: usize) -> Result<EstimatorResult> {
    let dim = s.dim();
    if m == 0 || m > dim.min(n) {
        return Err(Error::Precondition(format!(
            "M = {m} out of range 1..={} (N = {dim}, n = {n})",
            dim.min(n)
        )));
    }
    let all: Vec<usize> = (0..dim).collect();
    let spec = sym_eigen(&s.block(&all, &all))?;
    Ok(EstimatorResult {
        m_used: m,
        theta_hats: spec.vectors.slice(ndarray::s![.., ..m]).to_owned(),
        selected_i: Vec::new(),
        selected_j: Vec::new(),
        eigenvalues: spec.values.iter().take(m).copied().collect(),
        fallback: false,
        no_signal: false,
    })
}

/// Indices with `diagonal[k] > 1 + gamma`, ascending.
pub fn select_coordinates(diagonal: ArrayView1<'_, f64>, gamma: f64) -> Vec<usize> {
    diagonal
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > 1.0 + gamma)
        .map(|(k, _)| k)
        .collect()
}

/// `I(gamma) = {k : S_kk > 1 + gamma}`.
pub fn select_i<C: CovarianceAccess + ?Sized>(s: &C, gamma: f64) -> Vec<usize> {
    select_coordinates(s.diagonal().view(), gamma)
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Eigen-analysis of `S_II`, keeping at most `min(n, |I|)` pairs.
fn sub_spectrum<C: CovarianceAccess + ?Sized>(s: &C, idx: &[usize], n: usize) -> Result<(SymmetricSpectrum, usize)> {
    let spec = sym_eigen(&s.block(idx, idx))?;
    Ok((spec, idx.len().min(n)))
}

fn pad(dim: usize, idx: &[usize], spec: &SymmetricSpectrum, m: usize) -> Array2<f64> {
    let mut out = Array2::zeros((dim, m));
    for nu in 0..m {
        for (local, &k) in idx.iter().enumerate() {
            out[[k, nu]] = spec.vectors[[local, nu]];
        }
    }
    out
}

fn empty_result(dim: usize, selected_i: Vec<usize>, fallback: bool) -> EstimatorResult {
    EstimatorResult {
        m_used: 0,
        theta_hats: Array2::zeros((dim, 0)),
        selected_i,
        selected_j: Vec::new(),
        eigenvalues: Vec::new(),
        fallback,
        no_signal: true,
    }
}

fn stage_one<C: CovarianceAccess + ?Sized>(s: &C, gamma: f64, n: usize) -> (Vec<usize>, bool) {
    let diag = s.diagonal();
    let selected = select_coordinates(diag.view(), gamma * log_scale(s.dim(), n));
    if selected.is_empty() {
        (vec![argmax(&diag)], true)
    } else {
        (selected, false)
    }
}

/// Diagonal thresholding: keep coordinates with `S_kk > 1 + gamma_dt sqrt(log N / n)`,
/// then take eigenvectors of `S_II` padded with zeros. With `m = None` the
/// rank is estimated by [`estimate_m`].
pub fn diagonal_thresholding<C: CovarianceAccess + ?Sized>(
    s: &C,
    m: Option<usize>,
    cfg: &ThresholdConfig,
    n: usize,
) -> Result<EstimatorResult> {
    cfg.validate()?;
    let dim = s.dim();
    check_sizes(dim, n)?;
    let (selected_i, fallback) = stage_one(s, cfg.gamma_dt, n);
    let target = match m {
        Some(m) => m,
        None => estimate_m(s, cfg, n)?,
    };
    if target == 0 {
        return Ok(empty_result(dim, selected_i, fallback));
    }
    let (spec, available) = sub_spectrum(s, &selected_i, n)?;
    let m_used = target.min(available);
    Ok(EstimatorResult {
        m_used,
        theta_hats: pad(dim, &selected_i, &spec, m_used),
        eigenvalues: spec.values.iter().take(m_used).copied().collect(),
        selected_i,
        selected_j: Vec::new(),
        fallback,
        no_signal: false,
    })
}

/// Details of the rank estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankEstimate {
    pub m_hat: usize,
    pub selected: Vec<usize>,
    pub eigenvalues: Vec<f64>,
    pub alpha_n: f64,
}

/// Rank estimate: number of eigenvalues of `S_{Ibar Ibar}` above `1 + alpha_n`,
/// with `Ibar = I(gamma_bar sqrt(log N / n))` and
/// `alpha_n = 2 sqrt(mbar/n) + mbar/n + alpha_mult sqrt(log max(n, N) / n)`.
pub fn rank_estimate<C: CovarianceAccess + ?Sized>(s: &C, cfg: &ThresholdConfig, n: usize) -> Result<RankEstimate> {
    cfg.validate()?;
    let dim = s.dim();
    check_sizes(dim, n)?;
    let selected = select_i(s, cfg.gamma_bar * log_scale(dim, n));
    let m_bar = selected.len().min(n);
    let nf = n as f64;
    let ratio = m_bar as f64 / nf;
    let alpha_n = 2.0 * ratio.sqrt() + ratio + cfg.alpha_mult * ((n.max(dim) as f64).ln() / nf).sqrt();
    if selected.is_empty() {
        return Ok(RankEstimate {
            m_hat: 0,
            selected,
            eigenvalues: Vec::new(),
            alpha_n,
        });
    }
    let spec = sym_eigen(&s.block(&selected, &selected))?;
    let eigenvalues: Vec<f64> = spec.values.iter().take(m_bar).copied().collect();
    let above = eigenvalues.iter().take_while(|&&l| l > 1.0 + alpha_n).count();
    let m_hat = above.min(cfg.max_components).min(MAX_COMPONENTS);
    Ok(RankEstimate {
        m_hat,
        selected,
        eigenvalues,
        alpha_n,
    })
}

pub fn estimate_m<C: CovarianceAccess + ?Sized>(s: &C, cfg: &ThresholdConfig, n: usize) -> Result<usize> {
    Ok(rank_estimate(s, cfg, n)?.m_hat)
}

/// Two-stage ASPCA.
///
/// Stage 1 selects `I` by the diagonal with multiplier `gamma1`. Stage 2 adds
/// `J = {k not in I : (Q Q^T)_kk > gamma_{2,n}^2}` where
/// `Q = S_{I^c I} [f_1 / sqrt(l_1) ... f_M / sqrt(l_M)]` uses the stage-1
/// eigenpairs. Stage 3 returns eigenvectors of `S_KK`, `K = I u J`.
pub fn aspca<C: CovarianceAccess + ?Sized>(
    s: &C,
    m: Option<usize>,
    cfg: &ThresholdConfig,
    n: usize,
) -> Result<EstimatorResult> {
    cfg.validate()?;
    let dim = s.dim();
    check_sizes(dim, n)?;

    let (selected_i, fallback) = stage_one(s, cfg.gamma1, n);
    let (stage1, available) = sub_spectrum(s, &selected_i, n)?;
    let target = match m {
        Some(m) => m,
        None => estimate_m(s, cfg, n)?,
    };
    // E needs strictly positive stage-1 eigenvalues
    let positive = stage1.values.iter().take(available).take_while(|&&l| l > 0.0).count();
    let m_used = target.min(positive);
    if m_used == 0 {
        return Ok(empty_result(dim, selected_i, fallback));
    }

    let mut in_i = vec![false; dim];
    for &k in &selected_i {
        in_i[k] = true;
    }
    let complement: Vec<usize> = (0..dim).filter(|&k| !in_i[k]).collect();
    let mut selected_j = Vec::new();
    if !complement.is_empty() {
        let mut e = Array2::zeros((selected_i.len(), m_used));
        for nu in 0..m_used {
            let scale = stage1.values[nu].sqrt();
            for r in 0..selected_i.len() {
                e[[r, nu]] = stage1.vectors[[r, nu]] / scale;
            }
        }
        let q = s.block(&complement, &selected_i).dot(&e);
        let threshold = cfg.gamma2n(dim, n, m_used).powi(2);
        for (row, &k) in q.rows().into_iter().zip(&complement) {
            if row.dot(&row) > threshold {
                selected_j.push(k);
            }
        }
    }

    let mut support: Vec<usize> = selected_i.iter().chain(&selected_j).copied().collect();
    support.sort_unstable();
    let (stage3, available) = sub_spectrum(s, &support, n)?;
    let m_used = m_used.min(available);
    Ok(EstimatorResult {
        m_used,
        theta_hats: pad(dim, &support, &stage3, m_used),
        eigenvalues: stage3.values.iter().take(m_used).copied().collect(),
        selected_i,
        selected_j,
        fallback,
        no_signal: false,
    })
}

/// Which estimator a harness should run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Pca,
    #[serde(alias = "diagonal_thresholding")]
    Dt,
    Aspca,
    /// Returns the true spike directions; a zero-risk reference.
    Oracle,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Pca => "pca",
            EstimatorKind::Dt => "dt",
            EstimatorKind::Aspca => "aspca",
            EstimatorKind::Oracle => "oracle",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "pca" => Ok(EstimatorKind::Pca),
            "dt" | "diagonal_thresholding" => Ok(EstimatorKind::Dt),
            "aspca" => Ok(EstimatorKind::Aspca),
            "oracle" => Ok(EstimatorKind::Oracle),
            other => Err(Error::config("estimators", format!("unknown estimator {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SpikedCovariance;
    use crate::risk::loss;
    use ndarray::array;

    #[test]
    fn pca_on_diagonal() {
        let s = Array2::from_diag(&array![5.0, 2.0, 1.0]);
        let r = pca(&s, 1, 10).unwrap();
        assert_eq!(r.theta_hats.column(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!(r.selected_i.is_empty() && r.selected_j.is_empty());
        assert!(pca(&s, 4, 10).is_err());
        assert!(pca(&s, 3, 2).is_err());
    }

    #[test]
    fn pca_recovers_population_eigenvectors() {
        let t = array![[0.6, 0.0], [0.8, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let model = SpikedCovariance::new(vec![4.0, 2.0], t).unwrap();
        let r = pca(&model.covariance(), 2, 100).unwrap();
        for nu in 0..2 {
            let l = loss(r.theta_hats.column(nu), model.thetas().column(nu)).unwrap();
            assert!(l < 1e-12);
        }
    }

    #[test]
    fn pca_scale_invariant() {
        let model = SpikedCovariance::standard_basis(6, vec![3.0]).unwrap();
        let data = model.sample(50, 4).unwrap();
        let s = data.sample_covariance();
        let a = pca(&s, 1, 50).unwrap();
        let b = pca(&(&s * 9.0), 1, 50).unwrap();
        let diff = &a.theta_hats - &b.theta_hats;
        assert!(diff.iter().all(|x| x.abs() < 1e-10));
    }

    #[test]
    fn select_examples() {
        let d = array![1.5, 1.05, 0.9];
        assert_eq!(select_coordinates(d.view(), 0.2), vec![0]);
        assert!(select_coordinates(d.view(), 0.6).is_empty());
        assert_eq!(select_coordinates(array![1.3, 1.3].view(), 0.2), vec![0, 1]);
    }

    #[test]
    fn dt_on_diagonal_spike() {
        let mut d = Array1::from_elem(10, 1.0);
        d[0] = 2.0;
        let s = Array2::from_diag(&d);
        let r = diagonal_thresholding(&s, Some(1), &ThresholdConfig::default(), 1000).unwrap();
        assert_eq!(r.selected_i, vec![0]);
        let mut e1 = Array1::zeros(10);
        e1[0] = 1.0;
        assert_eq!(r.theta_hats.column(0), e1);
        assert!(!r.fallback);
    }

    #[test]
    fn dt_empty_selection_falls_back() {
        let mut d = Array1::from_elem(5, 1.0);
        d[3] = 1.001;
        let s = Array2::from_diag(&d);
        let r = diagonal_thresholding(&s, Some(1), &ThresholdConfig::default(), 100).unwrap();
        assert!(r.fallback);
        assert_eq!(r.selected_i, vec![3]);
        assert_eq!(r.m_used, 1);
    }

    #[test]
    fn rank_estimate_population_and_empty() {
        let model = SpikedCovariance::standard_basis(20, vec![6.0, 3.0]).unwrap();
        let cfg = ThresholdConfig::default();
        assert_eq!(estimate_m(&model.covariance(), &cfg, 1000).unwrap(), 2);
        let flat = Array2::<f64>::eye(20);
        let est = rank_estimate(&flat, &cfg, 1000).unwrap();
        assert_eq!(est.m_hat, 0);
        assert!(est.selected.is_empty());
        let capped = ThresholdConfig {
            max_components: 1,
            ..cfg
        };
        assert_eq!(estimate_m(&model.covariance(), &capped, 1000).unwrap(), 1);
    }

    #[test]
    fn rank_estimate_pure_noise_sample() {
        let model = SpikedCovariance::standard_basis(50, vec![0.0]).unwrap();
        let cfg = ThresholdConfig::default();
        let zeros = (0..20)
            .filter(|&seed| {
                let data = model.sample(2000, seed).unwrap();
                estimate_m(&data, &cfg, 2000).unwrap() == 0
            })
            .count();
        assert!(zeros >= 19, "only {zeros}/20 pure-noise runs gave M = 0");
    }

    #[test]
    fn aspca_stage_two_threshold_by_hand() {
        // I = {0}; S_00 = 4 so E = f_1 / 2 = 1/2 and Q_k = S_k0 / 2.
        let n = 400;
        let dim = 4;
        let cfg = ThresholdConfig::default();
        let g2 = cfg.gamma2n(dim, n, 1);
        let mut s = Array2::<f64>::eye(dim);
        s[[0, 0]] = 4.0;
        // coordinate 1 just above, coordinate 2 just below, coordinate 3 zero
        let above = 2.0 * g2 * 1.001;
        let below = 2.0 * g2 * 0.999;
        s[[1, 0]] = above;
        s[[0, 1]] = above;
        s[[2, 0]] = -below;
        s[[0, 2]] = -below;
        let r = aspca(&s, Some(1), &cfg, n).unwrap();
        assert_eq!(r.selected_i, vec![0]);
        assert_eq!(r.selected_j, vec![1]);
        assert_eq!(r.support(), vec![0, 1]);
        assert_eq!(r.theta_hats[[2, 0]], 0.0);
        assert_eq!(r.theta_hats[[3, 0]], 0.0);
    }

    #[test]
    fn aspca_noiseless_population() {
        let t = array![[0.8, 0.6], [0.6, -0.8], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        let model = SpikedCovariance::new(vec![5.0, 2.0], t).unwrap();
        let r = aspca(&model.covariance(), None, &ThresholdConfig::default(), 1000).unwrap();
        assert_eq!(r.m_used, 2);
        let k = r.support();
        assert!(k.contains(&0) && k.contains(&1));
        for nu in 0..2 {
            let l = loss(r.theta_hats.column(nu), model.thetas().column(nu)).unwrap();
            assert!(l < 1e-8);
        }
        assert!(r.selected_i.iter().all(|k| !r.selected_j.contains(k)));
    }

    #[test]
    fn aspca_no_signal() {
        let s = Array2::<f64>::eye(8);
        let r = aspca(&s, None, &ThresholdConfig::default(), 500).unwrap();
        assert!(r.no_signal);
        assert!(r.fallback);
        assert_eq!(r.m_used, 0);
        assert_eq!(r.theta_hats.ncols(), 0);
    }

    #[test]
    fn invalid_config_and_sizes() {
        let s = Array2::<f64>::eye(3);
        let bad = ThresholdConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(matches!(aspca(&s, Some(1), &bad, 10), Err(Error::Config { .. })));
        assert!(diagonal_thresholding(&s, Some(1), &ThresholdConfig::default(), 1).is_err());
    }

    #[test]
    fn kappa_and_gamma2_defaults() {
        let cfg = ThresholdConfig::default();
        assert!((cfg.kappa() - 2.1f64.sqrt()).abs() < 1e-15);
        assert!((cfg.gamma2() - (2.1f64 * 1.5).sqrt()).abs() < 1e-14);
        assert!((cfg.alpha_mult - 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in [EstimatorKind::Pca, EstimatorKind::Dt, EstimatorKind::Aspca, EstimatorKind::Oracle] {
            assert_eq!(EstimatorKind::parse(k.name()).unwrap(), k);
        }
        assert!(EstimatorKind::parse("lasso").is_err());
    }

    mod props {
        use super::*;
        use crate::model::SpikedCovariance;
        use crate::risk::loss;
        use proptest::prelude::*;

        fn sample_cov(dim: usize, n: usize, lambda: f64, seed: u64) -> Array2<f64> {
            let model = SpikedCovariance::standard_basis(dim, vec![lambda]).unwrap();
            model.sample(n, seed).unwrap().sample_covariance()
        }

        fn zero_outside(r: &EstimatorResult, allowed: &[usize]) -> bool {
            r.theta_hats
                .rows()
                .into_iter()
                .enumerate()
                .all(|(k, row)| allowed.contains(&k) || row.iter().all(|&x| x == 0.0))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn selection_shrinks_with_threshold(
                diag in prop::collection::vec(0.0f64..5.0, 1..40),
                lo in 0.0f64..3.0,
                step in 0.0f64..2.0,
            ) {
                let d = Array1::from(diag);
                let wide = select_coordinates(d.view(), lo);
                let narrow = select_coordinates(d.view(), lo + step);
                prop_assert!(narrow.iter().all(|k| wide.contains(k)));
            }

            #[test]
            fn dt_pads_with_zeros(seed in any::<u64>(), dim in 5usize..30, lambda in 0.5f64..8.0) {
                let s = sample_cov(dim, 60, lambda, seed);
                let r = diagonal_thresholding(&s, Some(1), &ThresholdConfig::default(), 60).unwrap();
                prop_assert!(zero_outside(&r, &r.selected_i));
                for col in r.theta_hats.columns() {
                    prop_assert!((col.dot(&col) - 1.0).abs() < 1e-10);
                }
            }

            #[test]
            fn aspca_support_nesting(seed in any::<u64>(), dim in 5usize..30, lambda in 0.5f64..8.0) {
                let s = sample_cov(dim, 60, lambda, seed);
                let r = aspca(&s, Some(1), &ThresholdConfig::default(), 60).unwrap();
                prop_assert!(r.selected_j.iter().all(|k| !r.selected_i.contains(k)));
                let support = r.support();
                prop_assert!(r.selected_i.iter().all(|k| support.contains(k)));
                prop_assert!(zero_outside(&r, &support));
            }

            #[test]
            fn pca_ignores_scale(seed in any::<u64>(), dim in 2usize..12, scale in 0.01f64..100.0) {
                let s = sample_cov(dim, 40, 4.0, seed);
                let a = pca(&s, 1, 40).unwrap();
                let b = pca(&(&s * scale), 1, 40).unwrap();
                prop_assert!(loss(a.theta_hats.column(0), b.theta_hats.column(0)).unwrap() < 1e-10);
            }
        }
    }
}
