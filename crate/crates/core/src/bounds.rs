//! Closed-form minimax rates, regime classification and the probability tail
//! bounds used to control sample covariances.

use serde::{Deserialize, Serialize};

use crate::model::SparsityBall;
use crate::risk::h;
use crate::{Error, Result};

/// Constants depending only on `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// `(2/9)^{1 - q/2}`
    pub a_q: f64,
    /// `ln(9/8)`
    pub c_1: f64,
    /// `1 / (a_q c_1^{q/2})`
    #[serde(rename = "A_q")]
    pub big_a_q: f64,
}

pub const C1: f64 = 0.117_783_035_656_383_45;

pub fn constants_q(q: f64) -> Result<Constants> {
    if !(q > 0.0 && q < 2.0) {
        return Err(Error::Precondition(format!("q must lie in (0, 2), got {q}")));
    }
    let a_q = (2.0f64 / 9.0).powf(1.0 - q / 2.0);
    Ok(Constants {
        a_q,
        c_1: C1,
        big_a_q: 1.0 / (a_q * C1.powf(q / 2.0)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    /// Noise level per coordinate, `1 / (n h(lambda))`.
    pub tau2: f64,
    /// Effective dimension `A_q (Cbar / tau)^q`.
    pub m_nu: f64,
    /// `c_1 (N - M)`.
    #[serde(rename = "N_prime")]
    pub n_prime: f64,
}

pub fn effective_params(lambda: f64, n: usize, dim: usize, rank: usize, q: f64, c: f64) -> Result<EffectiveParams> {
    let k = constants_q(q)?;
    let ball = SparsityBall::new(q, c)?;
    if n == 0 || rank >= dim {
        return Err(Error::Precondition(format!("need n >= 1 and M < N (n = {n}, N = {dim}, M = {rank})")));
    }
    let tau2 = 1.0 / (n as f64 * h(lambda)?);
    Ok(EffectiveParams {
        tau2,
        m_nu: k.big_a_q * ball.c_bar_q() * tau2.powf(-q / 2.0),
        n_prime: C1 * (dim - rank) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Dense,
    Sparse,
    UltraSparse,
    WeakSignal,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Dense => "dense",
            Regime::Sparse => "sparse",
            Regime::UltraSparse => "ultra_sparse",
            Regime::WeakSignal => "weak_signal",
        }
    }
}

/// Weak signal if `tau2 min(N', m) >= 1`, otherwise dense if `N' <= m`,
/// otherwise sparse. Returns the regime with its rate `delta_n`.
pub fn classify_regime(tau2: f64, m_nu: f64, n_prime: f64) -> (Regime, f64) {
    if tau2 * n_prime.min(m_nu) >= 1.0 {
        (Regime::WeakSignal, 1.0)
    } else if n_prime <= m_nu {
        (Regime::Dense, tau2 * n_prime)
    } else {
        (Regime::Sparse, tau2 * m_nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltraSparse {
    pub bar_tau2: f64,
    pub bar_m: f64,
    pub delta_n: f64,
    /// `bar_m * bar_tau2`; must not exceed 1.
    pub bar_m_tau2: f64,
    pub hypothesis_holds: bool,
    /// `bar_m / N^{1 - alpha}`, small when the growth condition is met.
    pub growth_ratio: f64,
}

/// Log-factor rate for very sparse directions:
/// `bar_tau2 = (alpha/9) log N / (n h)`, `bar_m = (Cbar / bar_tau)^q / a_q`,
/// `delta_n = C^q (log N / (n h))^{1 - q/2} / a_q`.
pub fn ultra_sparse_bound(lambda: f64, n: usize, dim: usize, q: f64, c: f64, alpha: f64) -> Result<UltraSparse> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Precondition(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if dim < 2 || n == 0 {
        return Err(Error::Precondition(format!("need N >= 2 and n >= 1 (N = {dim}, n = {n})")));
    }
    let k = constants_q(q)?;
    let ball = SparsityBall::new(q, c)?;
    let log_rate = (dim as f64).ln() / (n as f64 * h(lambda)?);
    let bar_tau2 = alpha / 9.0 * log_rate;
    let bar_m = ball.c_bar_q() * bar_tau2.powf(-q / 2.0) / k.a_q;
    let bar_m_tau2 = bar_m * bar_tau2;
    Ok(UltraSparse {
        bar_tau2,
        bar_m,
        delta_n: c.powf(q) * log_rate.powf(1.0 - q / 2.0) / k.a_q,
        bar_m_tau2,
        hypothesis_holds: bar_m_tau2 <= 1.0,
        growth_ratio: bar_m / (dim as f64).powf(1.0 - alpha),
    })
}

/// Inputs of a rate computation for one component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsInput {
    #[serde(rename = "N")]
    pub dim: usize,
    pub n: usize,
    #[serde(rename = "M", default = "one")]
    pub rank: usize,
    pub q: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub lambda: f64,
    #[serde(default)]
    pub alpha: Option<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConstants {
    pub a_q: f64,
    pub c_1: f64,
    #[serde(rename = "A_q")]
    pub big_a_q: f64,
    pub c_bar_q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub tau2: f64,
    pub m_nu: f64,
    #[serde(rename = "N_prime")]
    pub n_prime: f64,
    pub regime: Regime,
    pub delta_n: f64,
    pub constants: ReportConstants,
    pub ultra: Option<UltraSparse>,
}

/// Classifies the point. With `alpha` given, a sparse point whose ultra-sparse
/// hypothesis holds is reported as `ultra_sparse` with the log-factor rate.
pub fn regime_report(input: &BoundsInput) -> Result<RegimeReport> {
    let p = effective_params(input.lambda, input.n, input.dim, input.rank, input.q, input.c)?;
    let k = constants_q(input.q)?;
    let c_bar_q = SparsityBall::new(input.q, input.c)?.c_bar_q();
    if c_bar_q <= 0.0 {
        return Err(Error::Precondition("C = 1 leaves no room for a direction off the axis".into()));
    }
    let (mut regime, mut delta_n) = classify_regime(p.tau2, p.m_nu, p.n_prime);
    let ultra = input
        .alpha
        .map(|a| ultra_sparse_bound(input.lambda, input.n, input.dim, input.q, input.c, a))
        .transpose()?;
    if let Some(u) = ultra {
        if regime == Regime::Sparse && u.hypothesis_holds {
            regime = Regime::UltraSparse;
            delta_n = u.delta_n.min(1.0);
        }
    }
    Ok(RegimeReport {
        tau2: p.tau2,
        m_nu: p.m_nu,
        n_prime: p.n_prime,
        regime,
        delta_n,
        constants: ReportConstants {
            a_q: k.a_q,
            c_1: k.c_1,
            big_a_q: k.big_a_q,
            c_bar_q,
        },
        ultra,
    })
}

fn check_open(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
    if v > lo && v < hi {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{name} must lie in ({lo}, {hi}), got {v}")))
    }
}

/// `P(chi2_n > n(1 + eps)) <= exp(-3 n eps^2 / 16)` for `0 < eps < 1/2`.
pub fn chi2_tail_upper(n: usize, eps: f64) -> Result<f64> {
    check_open("eps", eps, 0.0, 0.5)?;
    Ok((-3.0 * n as f64 * eps * eps / 16.0).exp())
}

/// `P(chi2_n < n(1 - eps)) <= exp(-n eps^2 / 4)` for `0 < eps < 1`.
pub fn chi2_tail_lower(n: usize, eps: f64) -> Result<f64> {
    check_open("eps", eps, 0.0, 1.0)?;
    Ok((-(n as f64) * eps * eps / 4.0).exp())
}

/// `P(chi2_n > n(1 + eps)) <= sqrt(2) / (eps sqrt(n)) exp(-n eps^2 / 4)`,
/// for `0 < eps < 1/2` and `n >= 16`.
pub fn chi2_tail_upper_refined(n: usize, eps: f64) -> Result<f64> {
    check_open("eps", eps, 0.0, 0.5)?;
    if n < 16 {
        return Err(Error::Precondition(format!("refined tail needs n >= 16, got {n}")));
    }
    let nf = n as f64;
    Ok(2f64.sqrt() / (eps * nf.sqrt()) * (-nf * eps * eps / 4.0).exp())
}

/// All chi-square tail bounds valid at `(n, eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Chi2Tails {
    pub upper: Option<f64>,
    pub upper_refined: Option<f64>,
    pub lower: Option<f64>,
}

pub fn chi2_tails(n: usize, eps: f64) -> Chi2Tails {
    Chi2Tails {
        upper: chi2_tail_upper(n, eps).ok(),
        upper_refined: chi2_tail_upper_refined(n, eps).ok(),
        lower: chi2_tail_lower(n, eps).ok(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadFormTail {
    pub bound: f64,
    /// The `O(b^2 / n)` correction in the exponent is dropped.
    pub asymptotic: bool,
}

/// `P(|n^{-1} sum y1 y2| > sqrt(b/n)) <~ 2 exp(-3b/2)`, for `0 < b <= n^{1/4}`.
pub fn quad_form_tail(n: usize, b: f64) -> Result<QuadFormTail> {
    let cap = (n as f64).powf(0.25);
    if !(b > 0.0 && b <= cap) {
        return Err(Error::Precondition(format!("b must lie in (0, n^(1/4) = {cap}], got {b}")));
    }
    Ok(QuadFormTail {
        bound: 2.0 * (-1.5 * b).exp(),
        asymptotic: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WishartDeviation {
    pub t_n: f64,
    /// Level for `||Z Z^T / n - I||`.
    pub threshold: f64,
    pub prob_bound: f64,
}

/// `t_n = 8 (N_n/n) sqrt(log N_n / N_n)` with `N_n = max(n, N)`; the operator
/// norm deviation exceeds `N/n + 2 sqrt(N/n) + c t_n` with probability at
/// most `2 N_n^{-c^2}`.
pub fn wishart_deviation(n: usize, dim: usize, c: f64) -> Result<WishartDeviation> {
    if !(c > 0.0) || n == 0 || dim == 0 {
        return Err(Error::Precondition(format!("need c > 0, n, N >= 1 (c = {c})")));
    }
    let big = n.max(dim) as f64;
    let ratio = dim as f64 / n as f64;
    let t_n = 8.0 * (big / n as f64) * (big.ln() / big).sqrt();
    Ok(WishartDeviation {
        t_n,
        threshold: ratio + 2.0 * ratio.sqrt() + c * t_n,
        prob_bound: 2.0 * big.powf(-c * c),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SingularValueTails {
    /// Level for `s_max > 1 + sqrt(p/q) + t`.
    pub upper_level: f64,
    /// Level for `s_min < 1 - sqrt(p/q) - t`.
    pub lower_level: f64,
    pub upper_prob: f64,
    pub lower_prob: f64,
}

/// Tail bounds for the extreme singular values of a `p x q` matrix with
/// i.i.d. `N(0, 1/q)` entries: both `exp(-q t^2 / 2)`.
pub fn singular_value_bounds(p: usize, q_dim: usize, t: f64) -> Result<SingularValueTails> {
    if p == 0 || p > q_dim {
        return Err(Error::Precondition(format!("need 1 <= p <= q, got p = {p}, q = {q_dim}")));
    }
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t must be positive, got {t}")));
    }
    let shift = (p as f64 / q_dim as f64).sqrt();
    let prob = (-(q_dim as f64) * t * t / 2.0).exp();
    Ok(SingularValueTails {
        upper_level: 1.0 + shift + t,
        lower_level: 1.0 - shift - t,
        upper_prob: prob,
        lower_prob: prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn constants() {
        assert!(close(C1, (9.0f64 / 8.0).ln(), 1e-15));
        let k = constants_q(1.0).unwrap();
        assert!((k.a_q - 0.471405).abs() < 1e-6);
        assert!((k.big_a_q - 6.1807).abs() < 1e-3);
        assert!((constants_q(2.0 - 1e-12).unwrap().a_q - 1.0).abs() < 1e-9);
        assert!(constants_q(0.0).is_err());
        assert!(constants_q(2.0).is_err());
    }

    #[test]
    fn effective_params_examples() {
        let p = effective_params(1.0, 100, 50, 1, 1.0, 2.0).unwrap();
        assert!(close(p.tau2, 0.02, 1e-14));
        assert!((p.m_nu - 43.705).abs() < 1e-2);
        assert!(close(p.n_prime, C1 * 49.0, 1e-14));
        assert_eq!(effective_params(1.0, 100, 50, 1, 1.0, 1.0).unwrap().m_nu, 0.0);
        assert!(effective_params(0.0, 100, 50, 1, 1.0, 2.0).is_err());
        assert!(effective_params(1.0, 100, 50, 1, 1.0, 0.5).is_err());
    }

    #[test]
    fn classification_and_ties() {
        assert_eq!(classify_regime(0.5, 10.0, 4.0), (Regime::WeakSignal, 1.0));
        assert_eq!(classify_regime(0.25, 10.0, 4.0), (Regime::WeakSignal, 1.0));
        assert_eq!(classify_regime(0.01, 10.0, 10.0), (Regime::Dense, 0.1));
        assert_eq!(classify_regime(0.01, 5.0, 10.0), (Regime::Sparse, 0.05));
    }

    #[test]
    fn dense_rate_tracks_dimension_over_sample_size() {
        // Fix N/n; delta_n should stay constant as both grow
        let mut rates = Vec::new();
        for scale in [1usize, 10, 100] {
            let r = regime_report(&BoundsInput {
                dim: 100 * scale,
                n: 10_000 * scale,
                rank: 1,
                q: 1.5,
                c: 10.0,
                lambda: 1.0,
                alpha: None,
            })
            .unwrap();
            assert_eq!(r.regime, Regime::Dense);
            rates.push(r.delta_n);
        }
        assert!(close(rates[2], rates[0], 0.02));
    }

    #[test]
    fn sparse_rate_matches_closed_form_shape() {
        // tau^2 m_nu = A_q Cbar^q tau^{2-q}; its ratio to c_1 A_q C^q tau^{2-q}
        // is the constant Cbar^q / (c_1 C^q)
        let (q, c) = (1.0, 2.0);
        let k = constants_q(q).unwrap();
        for n in [1_000usize, 100_000] {
            let r = regime_report(&BoundsInput {
                dim: 1_000_000,
                n,
                rank: 1,
                q,
                c,
                lambda: 1.0,
                alpha: None,
            })
            .unwrap();
            assert_eq!(r.regime, Regime::Sparse);
            let shape = C1 * k.big_a_q * c.powf(q) * r.tau2.powf(1.0 - q / 2.0);
            assert!(close(r.delta_n / shape, 1.0 / (C1 * 2.0), 1e-12));
        }
    }

    #[test]
    fn ultra_sparse_examples() {
        let u = ultra_sparse_bound(1.0, 10_000, 1_000_000, 1.0, 2.0, 0.5).unwrap();
        assert!(close(u.bar_tau2, 1.5351e-4, 1e-4));
        let small = ultra_sparse_bound(1.0, 10_000, 1_000, 1.0, 2.0, 0.5).unwrap();
        let large = ultra_sparse_bound(1.0, 10_000, 1_000_000, 1.0, 2.0, 0.5).unwrap();
        let sparse = |dim| {
            let p = effective_params(1.0, 10_000, dim, 1, 1.0, 2.0).unwrap();
            p.tau2 * p.m_nu
        };
        let growth = (large.delta_n / sparse(1_000_000)) / (small.delta_n / sparse(1_000));
        assert!(close(growth, 2f64.sqrt(), 1e-12));
        assert!(ultra_sparse_bound(1.0, 100, 1000, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn tail_examples() {
        assert!(close(chi2_tail_upper(100, 0.4).unwrap(), (-3.0f64).exp(), 1e-14));
        assert!(chi2_tail_upper(100, 1e-9).unwrap() > 1.0 - 1e-12);
        assert!(chi2_tail_upper(100, 0.5).is_err());
        assert!(chi2_tail_lower(100, 0.9).is_ok());
        assert!(chi2_tail_upper_refined(15, 0.2).is_err());
        let all = chi2_tails(100, 0.7);
        assert!(all.upper.is_none() && all.upper_refined.is_none() && all.lower.is_some());

        let qf = quad_form_tail(10_000, 2.0).unwrap();
        assert!(close(qf.bound, 0.099574, 1e-5) && qf.asymptotic);
        assert!(quad_form_tail(10_000, 10.01).is_err());
        assert!(quad_form_tail(10_000, 10.0).unwrap().bound < 1e-6);

        let w = wishart_deviation(100, 100, 1.0).unwrap();
        assert!((w.t_n - 1.71681).abs() < 1e-4);
        assert!((w.threshold - 4.71681).abs() < 1e-4);
        assert!(close(w.prob_bound, 0.02, 1e-12));
        assert!(wishart_deviation(1_000_000, 10, 1.0).unwrap().threshold < 0.2);

        let s = singular_value_bounds(20, 200, 0.2).unwrap();
        assert!(close(s.upper_prob, 0.018316, 1e-4));
        assert!(singular_value_bounds(201, 200, 0.2).is_err());
        assert!(singular_value_bounds(20, 200, 10.0).unwrap().upper_prob < 1e-100);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn regime_rule_is_exhaustive(tau2 in 1e-8f64..10.0, m in 0.0f64..1e6, np in 0.0f64..1e6) {
                let (regime, delta) = classify_regime(tau2, m, np);
                match regime {
                    Regime::WeakSignal => prop_assert!(tau2 * np.min(m) >= 1.0 && delta == 1.0),
                    Regime::Dense => prop_assert!(np <= m && delta == tau2 * np && delta < 1.0),
                    Regime::Sparse => prop_assert!(np > m && delta == tau2 * m && delta < 1.0),
                    Regime::UltraSparse => prop_assert!(false, "not produced by the basic rule"),
                }
            }

            #[test]
            fn chi2_bounds_are_probabilities(n in 1usize..10_000, eps in 0.001f64..0.499) {
                let t = chi2_tails(n, eps);
                for p in [t.upper, t.lower].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&p));
                }
                if let Some(p) = t.upper_refined {
                    prop_assert!(p >= 0.0 && p.is_finite());
                }
            }
        }
    }
}
