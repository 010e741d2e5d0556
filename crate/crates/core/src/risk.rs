//! Sign-invariant loss, closed-form PCA risk, and a seeded Monte Carlo risk
//! harness whose results do not depend on the number of worker threads.

use ndarray::{Array1, Array2, ArrayBase, Data, Ix1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{aspca, diagonal_thresholding, pca, EstimatorKind, EstimatorResult, ThresholdConfig};
use crate::model::{LeastFavorable, SpikedCovariance};
use crate::rng::StreamSeed;
use crate::{Error, Result};

/// `L(a, b) = 2 (1 - |<a, b>|)` for unit vectors.
pub fn loss<S, T>(a: ArrayBase<S, Ix1>, b: ArrayBase<T, Ix1>) -> Result<f64>
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
{
    if a.len() != b.len() {
        return Err(Error::Precondition(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    for v in [a.dot(&a), b.dot(&b)] {
        if (v.sqrt() - 1.0).abs() > 1e-8 {
            return Err(Error::Precondition(format!("loss needs unit vectors, got norm {}", v.sqrt())));
        }
    }
    let inner = a.dot(&b).abs().min(1.0);
    Ok(2.0 * (1.0 - inner))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} must be positive, got {v}")))
    }
}

/// `h(lambda) = lambda^2 / (1 + lambda)`.
pub fn h(lambda: f64) -> Result<f64> {
    positive("lambda", lambda)?;
    Ok(lambda * lambda / (1.0 + lambda))
}

/// `g(lambda, tau) = (lambda - tau)^2 / ((1 + lambda)(1 + tau))`.
pub fn g(lambda: f64, tau: f64) -> Result<f64> {
    positive("lambda", lambda)?;
    positive("tau", tau)?;
    Ok((lambda - tau).powi(2) / ((1.0 + lambda) * (1.0 + tau)))
}

fn check_component(model: &SpikedCovariance, nu: usize) -> Result<f64> {
    let lambdas = model.lambdas();
    if nu >= lambdas.len() {
        return Err(Error::Precondition(format!("component {nu} out of range (M = {})", lambdas.len())));
    }
    let l = lambdas[nu];
    positive("lambda_nu", l)?;
    if lambdas.iter().enumerate().any(|(mu, &x)| mu != nu && x == l) {
        return Err(Error::Precondition(format!("spike {nu} is not distinct")));
    }
    Ok(l)
}

/// Leading term of the PCA risk for component `nu` (zero-based):
/// `(N - M) / (n h(lambda_nu)) + (1/n) sum_{mu != nu} 1 / g(lambda_mu, lambda_nu)`.
pub fn pca_risk_formula(model: &SpikedCovariance, n: usize, nu: usize) -> Result<f64> {
    let l = check_component(model, nu)?;
    let nf = n as f64;
    let noise = (model.dim() - model.rank()) as f64 / (nf * h(l)?);
    let mut parametric = 0.0;
    for (mu, &lm) in model.lambdas().iter().enumerate() {
        if mu != nu {
            let gv = (lm - l).powi(2) / ((1.0 + lm) * (1.0 + l));
            parametric += 1.0 / gv;
        }
    }
    Ok(noise + parametric / nf)
}

/// `E ||H_nu S theta_nu||^2`, evaluated term by term:
/// `(N - M) / (n h(lambda_nu)) + (1/n) sum_{mu != nu} (1 + lambda_mu)(1 + lambda_nu) / (lambda_mu - lambda_nu)^2`.
pub fn exact_first_order_risk(model: &SpikedCovariance, n: usize, nu: usize) -> Result<f64> {
    let l = check_component(model, nu)?;
    let nf = n as f64;
    let mut total = (model.dim() - model.rank()) as f64 * (1.0 + l) / (nf * l * l);
    for (mu, &lm) in model.lambdas().iter().enumerate() {
        if mu != nu {
            total += (1.0 + lm) * (1.0 + l) / (nf * (lm - l) * (lm - l));
        }
    }
    Ok(total)
}

/// `H_nu = sum_{mu != nu} theta_mu theta_mu^T / (lambda_mu - lambda_nu) - P_perp / lambda_nu`.
pub fn h_nu(model: &SpikedCovariance, nu: usize) -> Result<Array2<f64>> {
    let l = check_component(model, nu)?;
    let dim = model.dim();
    let thetas = model.thetas();
    let mut out = Array2::<f64>::eye(dim) * (-1.0 / l);
    for (mu, &lm) in model.lambdas().iter().enumerate() {
        let coef = if mu == nu { 1.0 / l } else { 1.0 / (lm - l) + 1.0 / l };
        let t = thetas.column(mu);
        for i in 0..dim {
            let ti = coef * t[i];
            if ti != 0.0 {
                for j in 0..dim {
                    out[[i, j]] += ti * t[j];
                }
            }
        }
    }
    Ok(out)
}

/// Sample mean with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl MeanEstimate {
    /// Uses pairwise summation over the given order, so the same values in the
    /// same order always give the same bits.
    pub fn from_samples(values: &[f64]) -> MeanEstimate {
        let count = values.len();
        if count == 0 {
            return MeanEstimate {
                mean: f64::NAN,
                std_error: f64::NAN,
                count,
            };
        }
        let mean = pairwise_sum(values) / count as f64;
        let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
        let std_error = if count > 1 {
            (pairwise_sum(&sq) / (count - 1) as f64 / count as f64).sqrt()
        } else {
            0.0
        };
        MeanEstimate { mean, std_error, count }
    }

    /// |mean - target| in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.std_error
    }
}

pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Maps `f` over `0..count` on a pool of `jobs` threads (all cores when
/// `None`), returning results in index order.
pub fn parallel_map<T, F>(count: usize, jobs: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    Ok(pool.install(|| (0..count).into_par_iter().map(&f).collect()))
}

/// Estimator choice for the risk harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    #[serde(default)]
    pub config: ThresholdConfig,
    /// Estimate the number of spikes instead of using the model's `M`.
    #[serde(default)]
    pub estimate_rank: bool,
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec {
            kind,
            config: ThresholdConfig::default(),
            estimate_rank: false,
        }
    }

    pub fn with_config(mut self, config: ThresholdConfig) -> Self {
        self.config = config;
        self
    }

    pub fn run(&self, model: &SpikedCovariance, data: &crate::model::DataMatrix) -> Result<EstimatorResult> {
        let n = data.sample_size();
        let m = (!self.estimate_rank).then(|| model.rank());
        match self.kind {
            EstimatorKind::Pca => pca(data, model.rank(), n),
            EstimatorKind::Dt => diagonal_thresholding(data, m, &self.config, n),
            EstimatorKind::Aspca => aspca(data, m, &self.config, n),
            EstimatorKind::Oracle => Ok(EstimatorResult {
                m_used: model.rank(),
                theta_hats: model.thetas().clone(),
                selected_i: Vec::new(),
                selected_j: Vec::new(),
                eigenvalues: model.lambdas().iter().map(|l| l + 1.0).collect(),
                fallback: false,
                no_signal: false,
            }),
        }
    }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub replicates: usize,
    pub master_seed: u64,
    /// Separates the streams of different experiments sharing a master seed.
    #[serde(default)]
    pub experiment: u64,
    #[serde(default)]
    pub jobs: Option<usize>,
}

impl McSettings {
    pub fn new(replicates: usize, master_seed: u64) -> Self {
        McSettings {
            replicates,
            master_seed,
            experiment: 0,
            jobs: None,
        }
    }

    pub fn seed(&self, replicate: usize) -> StreamSeed {
        StreamSeed::new(self.master_seed, self.experiment, replicate as u64)
    }
}

/// One replicate's outcome for one component.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub nu: usize,
    /// `None` if the estimator failed or returned fewer components.
    pub loss: Option<f64>,
    /// `sum_{k not selected} theta_{nu k}^2` for coordinate-selecting estimators.
    pub bias: Option<f64>,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentRisk {
    pub nu: usize,
    pub loss: MeanEstimate,
    pub bias: Option<MeanEstimate>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    /// Replicates where stage-1 selection was empty and the fallback was used.
    pub fallback: usize,
    /// Replicates where the estimator errored or missed a component; excluded.
    pub failed: usize,
    /// Replicates where no spike was detected.
    pub no_signal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskEstimate {
    /// Mean over complete replicates of the component-averaged loss.
    pub mean_loss: f64,
    pub std_error: f64,
    /// Complete replicates used in `mean_loss`.
    pub replicates: usize,
    pub per_component: Vec<ComponentRisk>,
    pub diagnostics: Diagnostics,
}

struct ReplicateOutcome {
    records: Vec<ReplicateRecord>,
    fallback: bool,
    no_signal: bool,
    failed: bool,
}

fn run_replicate(model: &SpikedCovariance, n: usize, spec: &EstimatorSpec, settings: &McSettings, r: usize) -> ReplicateOutcome {
    let rank = model.rank();
    let result = model.sample(n, settings.seed(r)).and_then(|data| spec.run(model, &data));
    let result = match result {
        Ok(res) => res,
        Err(_) => {
            return ReplicateOutcome {
                records: (0..rank)
                    .map(|nu| ReplicateRecord {
                        replicate: r,
                        nu,
                        loss: None,
                        bias: None,
                        fallback: false,
                    })
                    .collect(),
                fallback: false,
                no_signal: false,
                failed: true,
            }
        }
    };
    let selective = matches!(spec.kind, EstimatorKind::Dt | EstimatorKind::Aspca);
    let support = result.support();
    let mut failed = false;
    let records = (0..rank)
        .map(|nu| {
            let truth = model.thetas().column(nu);
            let loss = result.theta(nu).and_then(|est| loss(est, truth).ok());
            failed |= loss.is_none();
            let bias = selective.then(|| {
                let kept: f64 = support.iter().map(|&k| truth[k] * truth[k]).sum();
                (1.0 - kept).max(0.0)
            });
            ReplicateRecord {
                replicate: r,
                nu,
                loss,
                bias,
                fallback: result.fallback,
            }
        })
        .collect();
    ReplicateOutcome {
        records,
        fallback: result.fallback,
        no_signal: result.no_signal,
        failed,
    }
}

/// Monte Carlo risk of an estimator, with per-replicate records.
pub fn mc_risk_detailed(
    model: &SpikedCovariance,
    n: usize,
    spec: &EstimatorSpec,
    settings: &McSettings,
) -> Result<(RiskEstimate, Vec<ReplicateRecord>)> {
    if settings.replicates < 2 {
        return Err(Error::Precondition("at least 2 replicates are required".into()));
    }
    spec.config.validate()?;
    let outcomes = parallel_map(settings.replicates, settings.jobs, |r| run_replicate(model, n, spec, settings, r))?;

    let rank = model.rank();
    let mut diagnostics = Diagnostics::default();
    let mut averaged = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        diagnostics.fallback += o.fallback as usize;
        diagnostics.no_signal += o.no_signal as usize;
        diagnostics.failed += o.failed as usize;
        if !o.failed {
            let sum: f64 = o.records.iter().filter_map(|r| r.loss).sum();
            averaged.push(sum / rank as f64);
        }
    }
    let per_component = (0..rank)
        .map(|nu| {
            let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.records[nu].loss).collect();
            let biases: Vec<f64> = outcomes.iter().filter_map(|o| o.records[nu].bias).collect();
            ComponentRisk {
                nu,
                loss: MeanEstimate::from_samples(&losses),
                bias: (!biases.is_empty()).then(|| MeanEstimate::from_samples(&biases)),
            }
        })
        .collect();
    let overall = MeanEstimate::from_samples(&averaged);
    let records = outcomes.into_iter().flat_map(|o| o.records).collect();
    Ok((
        RiskEstimate {
            mean_loss: overall.mean,
            std_error: overall.std_error,
            replicates: overall.count,
            per_component,
            diagnostics,
        },
        records,
    ))
}

pub fn mc_risk(model: &SpikedCovariance, n: usize, spec: &EstimatorSpec, replicates: usize, master_seed: u64) -> Result<RiskEstimate> {
    Ok(mc_risk_detailed(model, n, spec, &McSettings::new(replicates, master_seed))?.0)
}

/// Monte Carlo estimate of `E ||H_nu S theta_nu||^2` from independent samples.
pub fn mc_first_order_norm(model: &SpikedCovariance, n: usize, nu: usize, settings: &McSettings) -> Result<MeanEstimate> {
    let h = h_nu(model, nu)?;
    let theta = model.thetas().column(nu).to_owned();
    let values = parallel_map(settings.replicates, settings.jobs, |r| -> Result<f64> {
        let data = model.sample(n, settings.seed(r))?;
        let x = &data.entries;
        // S theta = X (X^T theta) / n
        let s_theta: Array1<f64> = x.dot(&x.t().dot(&theta)) / n as f64;
        let v = h.dot(&s_theta);
        Ok(v.dot(&v))
    })?;
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(MeanEstimate::from_samples(&values))
}

/// Certified lower bound on the diagonal-thresholding bias at the
/// least-favourable direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DtBiasBound {
    /// Squared mass on the small coordinates, `Cbar^q n^{-(1-q/2)/2}`.
    pub r_n2: f64,
    pub m_n: usize,
    /// Relative gap between the selection threshold and the small
    /// coordinates' expected variance.
    pub epsilon2: f64,
    /// Upper bound on the probability that a small coordinate is selected.
    pub a_n: f64,
    /// `(1 - a_n) r_n^2`.
    pub bound: f64,
}

/// `P(small coordinate missed) >= 1 - A_n` with `A_n = exp(-3 n eps_2^2 / 16)`,
/// where `eps_2 = (gamma sqrt(log N / n) - lambda r_n^2/m_n) / (1 + lambda r_n^2/m_n)`.
/// The chi-square tail applies for `eps < 1/2`; larger gaps are clamped to
/// that range, which only weakens the bound.
pub fn dt_bias_bound(q: f64, c: f64, n: usize, dim: usize, gamma: f64, lambda: f64) -> Result<DtBiasBound> {
    positive("gamma", gamma)?;
    positive("lambda", lambda)?;
    let lf = LeastFavorable::new(q, c, n, dim)?;
    let r_n2 = lf.r_n * lf.r_n;
    let nf = n as f64;
    let alpha_n = gamma * ((dim as f64).ln() / nf).sqrt();
    let small = lambda * r_n2 / lf.m_n as f64;
    let epsilon2 = (alpha_n - small) / (1.0 + small);
    let a_n = if epsilon2 > 0.0 {
        let eps = epsilon2.min(0.5);
        (-3.0 * nf * eps * eps / 16.0).exp()
    } else {
        1.0
    };
    Ok(DtBiasBound {
        r_n2,
        m_n: lf.m_n,
        epsilon2,
        a_n,
        bound: (1.0 - a_n) * r_n2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn loss_examples() {
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 1.0];
        assert_eq!(loss(e1.view(), e1.view()).unwrap(), 0.0);
        assert_eq!(loss(e1.view(), (-&e1).view()).unwrap(), 0.0);
        assert_eq!(loss(e1.view(), e2.view()).unwrap(), 2.0);
        let b = array![0.5, 0.75f64.sqrt()];
        assert!((loss(e1.view(), b.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!(loss(e1.view(), array![1.0, 1.0].view()).is_err());
    }

    #[test]
    fn h_and_g_examples() {
        assert_eq!(h(1.0).unwrap(), 0.5);
        assert_eq!(g(2.5, 2.5).unwrap(), 0.0);
        assert!((g(3.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(g(3.0, 1.0).unwrap(), g(1.0, 3.0).unwrap());
        assert!(h(0.0).is_err());
        assert!(g(1.0, -1.0).is_err());
    }

    #[test]
    fn pca_risk_examples() {
        let m = SpikedCovariance::standard_basis(50, vec![1.0]).unwrap();
        assert!((pca_risk_formula(&m, 1000, 0).unwrap() - 0.098).abs() < 1e-15);
        let m = SpikedCovariance::standard_basis(100, vec![3.0, 1.0]).unwrap();
        let expect = 98.0 / (1000.0 * 2.25) + 0.002;
        assert!((pca_risk_formula(&m, 1000, 0).unwrap() - expect).abs() < 1e-15);
        assert!((exact_first_order_risk(&m, 1000, 0).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn h_nu_examples() {
        let m = SpikedCovariance::standard_basis(2, vec![2.0]).unwrap();
        let h = h_nu(&m, 0).unwrap();
        assert_eq!(h, array![[0.0, 0.0], [0.0, -0.5]]);

        let t = array![[0.6, 0.0], [0.8, 0.0], [0.0, 0.6], [0.0, 0.8], [0.0, 0.0]];
        let model = SpikedCovariance::new(vec![4.0, 1.5], t).unwrap();
        let sigma = model.covariance();
        for nu in 0..2 {
            let h = h_nu(&model, nu).unwrap();
            let theta = model.thetas().column(nu);
            assert!(h.dot(&theta).iter().all(|x| x.abs() < 1e-14));
            assert!(h.dot(&sigma.dot(&theta)).iter().all(|x| x.abs() < 1e-13));
        }
    }

    #[test]
    fn pairwise_stats() {
        let est = MeanEstimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(est.mean, 2.5);
        assert!((est.std_error - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        let long: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&long), 499_500.0);
    }

    #[test]
    fn oracle_has_zero_risk() {
        let m = SpikedCovariance::standard_basis(10, vec![2.0]).unwrap();
        let r = mc_risk(&m, 50, &EstimatorSpec::new(EstimatorKind::Oracle), 5, 1).unwrap();
        assert_eq!(r.mean_loss, 0.0);
        assert_eq!(r.replicates, 5);
        assert!(mc_risk(&m, 50, &EstimatorSpec::new(EstimatorKind::Oracle), 1, 1).is_err());
    }

    #[test]
    fn failed_replicates_are_excluded_and_counted() {
        // PCA needs M <= n; with n = 1 and M = 2 every replicate fails
        let m = SpikedCovariance::standard_basis(10, vec![3.0, 2.0]).unwrap();
        let r = mc_risk(&m, 1, &EstimatorSpec::new(EstimatorKind::Pca), 3, 1).unwrap();
        assert_eq!(r.diagnostics.failed, 3);
        assert_eq!(r.replicates, 0);
    }

    #[test]
    fn dt_bias_bound_values() {
        let b = dt_bias_bound(1.0, 2.0, 10_000, 1000, 4.0, 2.0).unwrap();
        assert!((b.r_n2 - 0.1).abs() < 1e-12);
        assert!(b.a_n < 1e-2);
        assert!(b.bound < b.r_n2 && b.bound > 0.099);

        // A_n -> 0 with N = n
        let mut prev = 1.0;
        for n in [10_000usize, 100_000, 1_000_000] {
            let b = dt_bias_bound(1.0, 2.0, n, n, 4.0, 2.0).unwrap();
            assert!(b.a_n <= prev);
            prev = b.a_n;
        }
        assert!(prev < 1e-9);

        // strong spike: small coordinates get selected, no certificate
        let b = dt_bias_bound(1.0, 2.0, 10_000, 1000, 4.0, 50.0).unwrap();
        assert_eq!(b.bound, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit(v: Vec<f64>) -> Option<Array1<f64>> {
            let a = Array1::from(v);
            let norm = a.dot(&a).sqrt();
            (norm > 1e-3).then(|| a / norm)
        }

        fn spikes() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.1f64..20.0, 1..5).prop_map(|mut v| {
                v.sort_by(|a, b| b.total_cmp(a));
                v.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
                v
            })
        }

        proptest! {
            #[test]
            fn loss_is_aligned_distance(
                x in prop::collection::vec(-1.0f64..1.0, 5),
                y in prop::collection::vec(-1.0f64..1.0, 5),
            ) {
                let (Some(a), Some(b)) = (unit(x), unit(y)) else { return Ok(()) };
                let sign = if a.dot(&b) >= 0.0 { 1.0 } else { -1.0 };
                let diff = &a - &(sign * &b);
                let l = loss(a.view(), b.view()).unwrap();
                prop_assert!((l - diff.dot(&diff)).abs() < 1e-12);
                prop_assert!((0.0..=2.0 + 1e-12).contains(&l));
            }

            #[test]
            fn risk_formula_matches_term_sum(lambdas in spikes(), extra in 0usize..200, n in 1usize..100_000) {
                let dim = lambdas.len() + extra;
                prop_assume!(dim >= 2);
                let model = SpikedCovariance::standard_basis(dim, lambdas.clone()).unwrap();
                for nu in 0..lambdas.len() {
                    let a = pca_risk_formula(&model, n, nu).unwrap();
                    let b = exact_first_order_risk(&model, n, nu).unwrap();
                    prop_assert!((a - b).abs() <= 1e-10 * b.abs());
                }
            }
        }
    }

    #[test]
    fn pca_risk_grows_with_dimension() {
        let spec = EstimatorSpec::new(EstimatorKind::Pca);
        let risks: Vec<RiskEstimate> = [25, 50, 100]
            .iter()
            .map(|&dim| {
                let model = SpikedCovariance::standard_basis(dim, vec![1.0]).unwrap();
                mc_risk(&model, 5000, &spec, 40, 11).unwrap()
            })
            .collect();
        for w in risks.windows(2) {
            let se = w[0].std_error.hypot(w[1].std_error);
            assert!(w[1].mean_loss - w[0].mean_loss > 3.0 * se, "{} vs {}", w[0].mean_loss, w[1].mean_loss);
        }
    }
}
