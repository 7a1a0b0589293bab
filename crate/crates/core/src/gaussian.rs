//! Diagonal Normal distributions in (mu, p) parameter space.
//!
//! The KL divergence is computed through the log-scale form
//! `sigma_hat_2 - sigma_hat_1 + (sigma_1^2 + (mu_1 - mu_2)^2) / (2 sigma_2^2) - 1/2`,
//! so a tiny `sigma_1` never goes through `log(sigma_1)`. The float mode
//! controls how the scale values `sigma`/`sigma_hat` are produced at the
//! network/distribution interface (that is where the underflow pathology
//! lives); the combination arithmetic on those rounded values is carried in
//! f64, which keeps genuinely large-but-finite divergences representable.
//! The naive log-quotient variants below emulate the quotient term itself
//! and exist to demonstrate the failure.

use crate::precision::{naive_log_quotient, FloatMode, QuotientVariant};
use crate::rng::CounterRng;
use crate::scaleparam::ScaleParam;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GaussianError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("non-finite entry at index {index} in {field}")]
    NonFinite { field: &'static str, index: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

/// Diagonal Normal given by a mean vector, a pre-scale vector and a scale
/// parameterization. Immutable after construction; entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    p: Vec<f64>,
    param: ScaleParam,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, p: Vec<f64>, param: ScaleParam) -> Result<Self, GaussianError> {
        if mu.len() != p.len() {
            return Err(GaussianError::DimMismatch { left: mu.len(), right: p.len() });
        }
        if let Some(i) = mu.iter().position(|x| !x.is_finite()) {
            return Err(GaussianError::NonFinite { field: "mu", index: i });
        }
        if let Some(i) = p.iter().position(|x| !x.is_finite()) {
            return Err(GaussianError::NonFinite { field: "p", index: i });
        }
        Ok(DiagGaussian { mu, p, param })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn pre_scale(&self) -> &[f64] {
        &self.p
    }

    pub fn param(&self) -> ScaleParam {
        self.param
    }

    pub fn sigma(&self, mode: FloatMode) -> Vec<f64> {
        self.p.iter().map(|&p| self.param.sigma(p, mode)).collect()
    }

    pub fn log_sigma(&self, mode: FloatMode) -> Vec<f64> {
        self.p.iter().map(|&p| self.param.log_sigma(p, mode)).collect()
    }
}

/// Per-dimension KL terms plus their sum.
#[derive(Debug, Clone)]
pub struct KlResult {
    pub per_dim: Vec<f64>,
    pub total: f64,
}

fn check_dims(a: usize, b: usize) -> Result<(), GaussianError> {
    if a == b {
        Ok(())
    } else {
        Err(GaussianError::DimMismatch { left: a, right: b })
    }
}

/// KL(q1 || q2) through the log-scale form. Non-finite output under
/// NaiveExp / reduced precision is the studied signal, not an error.
pub fn kl(q1: &DiagGaussian, q2: &DiagGaussian, mode: FloatMode) -> Result<KlResult, GaussianError> {
    check_dims(q1.dim(), q2.dim())?;
    let per_dim: Vec<f64> = (0..q1.dim())
        .map(|i| {
            let s1 = q1.param.sigma(q1.p[i], mode);
            let ls1 = q1.param.log_sigma(q1.p[i], mode);
            let s2 = q2.param.sigma(q2.p[i], mode);
            let ls2 = q2.param.log_sigma(q2.p[i], mode);
            let dmu = mode.round(q1.mu[i]) - mode.round(q2.mu[i]);
            ls2 - ls1 + (s1 * s1 + dmu * dmu) / (2.0 * s2 * s2) - 0.5
        })
        .collect();
    let total = per_dim.iter().sum();
    Ok(KlResult { per_dim, total })
}

/// KL with the first term computed as an explicit log-quotient on the scale
/// values (never the log-scale), every elementary op of that term emulated.
/// Exists solely to demonstrate the instability of the quotient forms.
pub fn kl_naive_quotient(
    q1: &DiagGaussian,
    q2: &DiagGaussian,
    mode: FloatMode,
    variant: QuotientVariant,
) -> Result<f64, GaussianError> {
    check_dims(q1.dim(), q2.dim())?;
    let total = (0..q1.dim())
        .map(|i| {
            let s1 = q1.param.sigma(q1.p[i], mode);
            let s2 = q2.param.sigma(q2.p[i], mode);
            let dmu = mode.round(q1.mu[i]) - mode.round(q2.mu[i]);
            let quotient_term = naive_log_quotient(mode, variant, s1, s2);
            quotient_term + (s1 * s1 + dmu * dmu) / (2.0 * s2 * s2) - 0.5
        })
        .sum();
    Ok(total)
}

/// KL against the standard Normal prior: the right-hand side uses the exact
/// constants `sigma = 1`, `sigma_hat = 0`, `mu = 0`, bypassing any
/// parameterization.
pub fn kl_vs_standard_prior(q: &DiagGaussian, mode: FloatMode) -> KlResult {
    let per_dim: Vec<f64> = (0..q.dim())
        .map(|i| {
            let s1 = q.param.sigma(q.p[i], mode);
            let ls1 = q.param.log_sigma(q.p[i], mode);
            let mu = mode.round(q.mu[i]);
            -ls1 + (s1 * s1 + mu * mu) / 2.0 - 0.5
        })
        .collect();
    let total = per_dim.iter().sum();
    KlResult { per_dim, total }
}

/// Gradients of `kl(q1, q2).total` with respect to all four inputs (f64).
#[derive(Debug, Clone)]
pub struct KlGrad {
    pub d_mu1: Vec<f64>,
    pub d_p1: Vec<f64>,
    pub d_mu2: Vec<f64>,
    pub d_p2: Vec<f64>,
}

pub fn kl_grad(q1: &DiagGaussian, q2: &DiagGaussian) -> Result<KlGrad, GaussianError> {
    check_dims(q1.dim(), q2.dim())?;
    let n = q1.dim();
    let mut grad = KlGrad {
        d_mu1: vec![0.0; n],
        d_p1: vec![0.0; n],
        d_mu2: vec![0.0; n],
        d_p2: vec![0.0; n],
    };
    for i in 0..n {
        let s1 = q1.param.sigma(q1.p[i], FloatMode::F64);
        let s2 = q2.param.sigma(q2.p[i], FloatMode::F64);
        let dmu = q1.mu[i] - q2.mu[i];
        let s2_sq = s2 * s2;
        grad.d_mu1[i] = dmu / s2_sq;
        grad.d_mu2[i] = -dmu / s2_sq;
        grad.d_p1[i] = -q1.param.dlog_sigma_dp(q1.p[i])
            + s1 * q1.param.dsigma_dp(q1.p[i]) / s2_sq;
        grad.d_p2[i] = q2.param.dlog_sigma_dp(q2.p[i])
            - (s1 * s1 + dmu * dmu) / (s2_sq * s2) * q2.param.dsigma_dp(q2.p[i]);
    }
    Ok(grad)
}

/// Log-density of `x` under `g`, summed over dimensions, through the
/// log-scale (never `log(sigma)`).
pub fn log_prob(x: &[f64], g: &DiagGaussian, mode: FloatMode) -> Result<f64, GaussianError> {
    check_dims(x.len(), g.dim())?;
    let total = (0..g.dim())
        .map(|i| {
            let s = g.param.sigma(g.p[i], mode);
            let ls = g.param.log_sigma(g.p[i], mode);
            let r = mode.round(x[i]) - mode.round(g.mu[i]);
            -ls - 0.5 * LN_2PI - r * r / (2.0 * s * s)
        })
        .sum();
    Ok(total)
}

/// Gradients of `log_prob` with respect to `(mu, p)` (f64).
pub fn log_prob_grad(x: &[f64], g: &DiagGaussian) -> Result<(Vec<f64>, Vec<f64>), GaussianError> {
    check_dims(x.len(), g.dim())?;
    let n = g.dim();
    let mut d_mu = vec![0.0; n];
    let mut d_p = vec![0.0; n];
    for i in 0..n {
        let s = g.param.sigma(g.p[i], FloatMode::F64);
        let r = x[i] - g.mu[i];
        d_mu[i] = r / (s * s);
        d_p[i] = -g.param.dlog_sigma_dp(g.p[i]) + r * r / (s * s * s) * g.param.dsigma_dp(g.p[i]);
    }
    Ok((d_mu, d_p))
}

/// Reparameterized sample `mu + sigma(p) * eps`, deterministic in `eps`.
pub fn sample(g: &DiagGaussian, eps: &[f64], mode: FloatMode) -> Result<Vec<f64>, GaussianError> {
    check_dims(eps.len(), g.dim())?;
    Ok((0..g.dim())
        .map(|i| g.mu[i] + g.param.sigma(g.p[i], mode) * eps[i])
        .collect())
}

/// Closed-form optimal decoder scale: root mean square of the residuals.
pub fn optimal_gamma(residuals: &[f64]) -> Result<f64, GaussianError> {
    if residuals.is_empty() {
        return Err(GaussianError::Empty("residuals"));
    }
    let mean_sq = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Monte-Carlo estimate of KL(q1 || q2) with its standard error: the mean
/// over `n` samples `z ~ q1` of `log q1(z) - log q2(z)`. Oracle for [`kl`].
pub fn mc_kl_estimate(
    q1: &DiagGaussian,
    q2: &DiagGaussian,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), GaussianError> {
    check_dims(q1.dim(), q2.dim())?;
    assert!(n >= 1000, "mc_kl_estimate needs n >= 1000, got {n}");
    let mut rng = CounterRng::new(seed);
    let mut eps = vec![0.0; q1.dim()];
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        rng.fill_normal(&mut eps);
        let z = sample(q1, &eps, FloatMode::F64)?;
        let diff = log_prob(&z, q1, FloatMode::F64)? - log_prob(&z, q2, FloatMode::F64)?;
        sum += diff;
        sum_sq += diff * diff;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let std_err = (var / n as f64).sqrt();
    Ok((mean, std_err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const F64: FloatMode = FloatMode::F64;
    const F32: FloatMode = FloatMode::F32;

    fn exp_gaussian(mu: &[f64], p: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mu.to_vec(), p.to_vec(), ScaleParam::Exp).unwrap()
    }

    #[test]
    fn construction_contracts() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0], ScaleParam::Exp).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![0.0], ScaleParam::Exp).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![f64::INFINITY], ScaleParam::Exp).is_err());
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        for param in [
            ScaleParam::Exp,
            ScaleParam::ExpLin,
            ScaleParam::up_bounded(1.0).unwrap(),
            ScaleParam::bounded(1e-4, 1.0).unwrap(),
        ] {
            let q = DiagGaussian::new(vec![0.3, -2.0], vec![0.7, -1.2], param).unwrap();
            let r = kl(&q, &q, F64).unwrap();
            assert!(r.total.abs() < 1e-12, "{param}: {}", r.total);
        }
    }

    #[test]
    fn kl_unit_shift_is_half() {
        let q1 = exp_gaussian(&[1.0], &[0.0]);
        let q2 = exp_gaussian(&[0.0], &[0.0]);
        assert_relative_eq!(kl(&q1, &q2, F64).unwrap().total, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // N(0, 0.5) vs N(1, 1): closed form ~ 0.81815.
        let q1 = exp_gaussian(&[0.0], &[0.5f64.ln()]);
        let q2 = exp_gaussian(&[1.0], &[0.0]);
        let closed = kl(&q1, &q2, F64).unwrap().total;
        let expected = 2f64.ln() + (0.25 + 1.0) / 2.0 - 0.5;
        assert_relative_eq!(closed, expected, max_relative = 1e-12);
        let (mc, se) = mc_kl_estimate(&q1, &q2, 10_000_000, 20240601).unwrap();
        assert!(
            (mc - closed).abs() < 3.0 * se,
            "mc {mc} vs closed {closed} (se {se})"
        );
    }

    #[test]
    fn kl_exp_closed_form() {
        // With Exp on both sides the log-scale form reduces to
        // 0.5 (exp(2 p1) + dmu^2) exp(-2 p2) + p2 - p1 - 0.5.
        let cases = [
            ([0.0, 1.0], [0.3, -0.4], [1.0, -1.0], [0.0, 0.2]),
            ([5.0, -5.0], [2.0, 1.0], [0.0, 0.0], [-2.0, 3.0]),
        ];
        for (mu1, p1, mu2, p2) in cases {
            let q1 = exp_gaussian(&mu1, &p1);
            let q2 = exp_gaussian(&mu2, &p2);
            let got = kl(&q1, &q2, F64).unwrap().total;
            let want: f64 = (0..2)
                .map(|i| {
                    let dmu = mu1[i] - mu2[i];
                    0.5 * ((2.0 * p1[i]).exp() + dmu * dmu) * (-2.0 * p2[i]).exp() + p2[i]
                        - p1[i]
                        - 0.5
                })
                .sum();
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn naive_quotient_underflows_where_stable_path_survives() {
        let q1 = exp_gaussian(&[0.0], &[-60.0]);
        let q2 = exp_gaussian(&[0.0], &[0.0]);
        let naive = kl_naive_quotient(&q1, &q2, F32, QuotientVariant::SquaredQuotient).unwrap();
        assert!(!naive.is_finite(), "naive quotient should blow up: {naive}");
        let stable = kl(&q1, &q2, F32).unwrap().total;
        assert!(stable.is_finite());
        let reference = kl(&q1, &q2, F64).unwrap().total;
        assert!((stable - reference).abs() < 1e-4, "{stable} vs {reference}");
    }

    #[test]
    fn naive_quotient_agrees_at_benign_inputs() {
        let q1 = exp_gaussian(&[0.4, -0.2], &[0.0, 0.0]);
        let q2 = exp_gaussian(&[0.0, 0.1], &[0.0, 0.0]);
        let stable = kl(&q1, &q2, F64).unwrap().total;
        for variant in [QuotientVariant::Direct, QuotientVariant::SquaredQuotient] {
            let naive = kl_naive_quotient(&q1, &q2, F64, variant).unwrap();
            assert_relative_eq!(naive, stable, max_relative = 1e-12);
        }
    }

    #[test]
    fn naive_quotient_direct_boundary_matches_table() {
        let q2 = exp_gaussian(&[0.0], &[0.0]);
        let naive = |p1: f64, v| {
            let q1 = DiagGaussian::new(vec![0.0], vec![p1], ScaleParam::NaiveExp).unwrap();
            kl_naive_quotient(&q1, &q2, F32, v).unwrap()
        };
        assert!(naive(-103.0, QuotientVariant::Direct).is_finite());
        assert!(!naive(-104.0, QuotientVariant::Direct).is_finite());
        assert!(naive(-51.0, QuotientVariant::SquaredQuotient).is_finite());
        assert!(!naive(-52.0, QuotientVariant::SquaredQuotient).is_finite());
    }

    #[test]
    fn prior_kl_fixed_points() {
        let standard = exp_gaussian(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(kl_vs_standard_prior(&standard, F64).total.abs() < 1e-15);

        let q = exp_gaussian(&[0.0], &[0.5f64.ln()]);
        let expected = 2f64.ln() + 0.125 - 0.5;
        assert_relative_eq!(kl_vs_standard_prior(&q, F64).total, expected, max_relative = 1e-12);

        // UpBounded1 at large p approaches the prior from below.
        let up = DiagGaussian::new(vec![0.0], vec![40.0], ScaleParam::up_bounded(1.0).unwrap())
            .unwrap();
        let v = kl_vs_standard_prior(&up, F64).total;
        assert!(v >= 0.0 && v < 1e-12, "{v}");
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = CounterRng::new(5150);
        for _ in 0..200 {
            let mu1 = [rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0)];
            let mu2 = [rng.uniform_range(-5.0, 5.0), rng.uniform_range(-5.0, 5.0)];
            let p1 = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)];
            let p2 = [rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0)];
            let q1 = exp_gaussian(&mu1, &p1);
            let q2 = exp_gaussian(&mu2, &p2);
            let total = kl(&q1, &q2, F64).unwrap().total;
            assert!(total >= -1e-12, "negative KL {total}");
        }
    }

    #[test]
    fn kl_depends_only_on_mu_sigma() {
        // Pick sigma in the overlap of all families' ranges and solve each
        // family's p by bisection; the KL must agree across families.
        let families = [
            ScaleParam::Exp,
            ScaleParam::ExpLin,
            ScaleParam::up_bounded(1.0).unwrap(),
            ScaleParam::down_bounded(1e-4).unwrap(),
            ScaleParam::bounded(1e-4, 1.0).unwrap(),
        ];
        let solve = |param: &ScaleParam, target: f64| -> f64 {
            let (mut lo, mut hi) = (-60.0, 60.0);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if param.sigma(mid, F64) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (sigma1, sigma2) = (0.37f64, 0.82f64);
        let (mu1, mu2) = (0.25, -1.5);
        let reference = {
            let q1 = exp_gaussian(&[mu1], &[sigma1.ln()]);
            let q2 = exp_gaussian(&[mu2], &[sigma2.ln()]);
            kl(&q1, &q2, F64).unwrap().total
        };
        for fam1 in &families {
            for fam2 in &families {
                let q1 =
                    DiagGaussian::new(vec![mu1], vec![solve(fam1, sigma1)], *fam1).unwrap();
                let q2 =
                    DiagGaussian::new(vec![mu2], vec![solve(fam2, sigma2)], *fam2).unwrap();
                let got = kl(&q1, &q2, F64).unwrap().total;
                assert!(
                    (got - reference).abs() < 1e-10,
                    "{fam1} vs {fam2}: {got} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn kl_grad_fixed_points() {
        let q = exp_gaussian(&[0.0], &[0.0]);
        let g = kl_grad(&q, &q).unwrap();
        assert_eq!(g.d_mu1[0], 0.0);
        assert_eq!(g.d_mu2[0], 0.0);
        assert_eq!(g.d_p1[0], 0.0);
        assert_eq!(g.d_p2[0], 0.0);

        let q1 = exp_gaussian(&[0.0], &[1.0]);
        let q2 = exp_gaussian(&[0.0], &[0.0]);
        let g = kl_grad(&q1, &q2).unwrap();
        assert_relative_eq!(g.d_p1[0], 2f64.exp() - 1.0, max_relative = 1e-12);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let families = [
            ScaleParam::Exp,
            ScaleParam::ExpLin,
            ScaleParam::up_bounded(1.0).unwrap(),
            ScaleParam::down_bounded(0.01).unwrap(),
            ScaleParam::bounded(0.01, 2.0).unwrap(),
        ];
        let mut rng = CounterRng::new(808);
        let h = 1e-6;
        for fam1 in &families {
            for fam2 in &families {
                let mu1 = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
                let mu2 = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
                let p1 = vec![rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)];
                let p2 = vec![rng.uniform_range(-1.5, 1.5), rng.uniform_range(-1.5, 1.5)];
                let total = |mu1: &[f64], p1: &[f64], mu2: &[f64], p2: &[f64]| {
                    let q1 = DiagGaussian::new(mu1.to_vec(), p1.to_vec(), *fam1).unwrap();
                    let q2 = DiagGaussian::new(mu2.to_vec(), p2.to_vec(), *fam2).unwrap();
                    kl(&q1, &q2, F64).unwrap().total
                };
                let q1 = DiagGaussian::new(mu1.clone(), p1.clone(), *fam1).unwrap();
                let q2 = DiagGaussian::new(mu2.clone(), p2.clone(), *fam2).unwrap();
                let grad = kl_grad(&q1, &q2).unwrap();
                for i in 0..2 {
                    let bump = |which: usize, delta: f64| {
                        let (mut a, mut b, mut c, mut d) =
                            (mu1.clone(), p1.clone(), mu2.clone(), p2.clone());
                        match which {
                            0 => a[i] += delta,
                            1 => b[i] += delta,
                            2 => c[i] += delta,
                            _ => d[i] += delta,
                        }
                        total(&a, &b, &c, &d)
                    };
                    for (which, analytic) in [
                        (0, grad.d_mu1[i]),
                        (1, grad.d_p1[i]),
                        (2, grad.d_mu2[i]),
                        (3, grad.d_p2[i]),
                    ] {
                        let numeric = (bump(which, h) - bump(which, -h)) / (2.0 * h);
                        assert_relative_eq!(
                            analytic,
                            numeric,
                            max_relative = 1e-6,
                            epsilon = 1e-8
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn log_prob_fixed_points() {
        let g = exp_gaussian(&[0.5, -0.5, 2.0], &[0.0, 0.0, 0.0]);
        let at_mean = log_prob(&[0.5, -0.5, 2.0], &g, F64).unwrap();
        assert_relative_eq!(at_mean, -1.5 * LN_2PI, max_relative = 1e-14);

        let g1 = exp_gaussian(&[0.0], &[0.0]);
        assert_relative_eq!(
            log_prob(&[1.0], &g1, F64).unwrap(),
            -0.5 - 0.5 * LN_2PI,
            max_relative = 1e-14
        );
    }

    #[test]
    fn log_prob_grad_matches_finite_differences() {
        let mut rng = CounterRng::new(31337);
        let h = 1e-6;
        for param in [
            ScaleParam::Exp,
            ScaleParam::ExpLin,
            ScaleParam::bounded(0.01, 2.0).unwrap(),
        ] {
            let x = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
            let mu = vec![rng.uniform_range(-2.0, 2.0), rng.uniform_range(-2.0, 2.0)];
            let p = vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let g = DiagGaussian::new(mu.clone(), p.clone(), param).unwrap();
            let (d_mu, d_p) = log_prob_grad(&x, &g).unwrap();
            for i in 0..2 {
                let f = |mu_i: f64, p_i: f64| {
                    let mut mu2 = mu.clone();
                    let mut p2 = p.clone();
                    mu2[i] = mu_i;
                    p2[i] = p_i;
                    let g = DiagGaussian::new(mu2, p2, param).unwrap();
                    log_prob(&x, &g, F64).unwrap()
                };
                let num_mu = (f(mu[i] + h, p[i]) - f(mu[i] - h, p[i])) / (2.0 * h);
                let num_p = (f(mu[i], p[i] + h) - f(mu[i], p[i] - h)) / (2.0 * h);
                assert_relative_eq!(d_mu[i], num_mu, max_relative = 1e-6, epsilon = 1e-9);
                assert_relative_eq!(d_p[i], num_p, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn sample_is_deterministic_in_eps() {
        let g = exp_gaussian(&[1.0, -1.0], &[0.0, 0.7]);
        assert_eq!(sample(&g, &[0.0, 0.0], F64).unwrap(), vec![1.0, -1.0]);
        let std = exp_gaussian(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(sample(&std, &[0.3, -0.9], F64).unwrap(), vec![0.3, -0.9]);
    }

    #[test]
    fn sample_moments() {
        let g = exp_gaussian(&[2.0], &[0.5f64.ln()]);
        let mut rng = CounterRng::new(17);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = sample(&g, &[rng.standard_normal()], F64).unwrap()[0];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        let se_mean = 0.5 / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 4.0 * se_mean, "mean {mean}");
        let se_std = 0.5 * (0.5 / n as f64).sqrt();
        assert!((std - 0.5).abs() < 4.0 * se_std, "std {std}");
    }

    #[test]
    fn optimal_gamma_contract() {
        assert_eq!(optimal_gamma(&[1.0, -1.0, 1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(optimal_gamma(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(optimal_gamma(&[]).is_err());
    }

    #[test]
    fn optimal_gamma_of_uniform_residuals() {
        // RMS of U[-1/2, 1/2) is 1/sqrt(12).
        let mut rng = CounterRng::new(3);
        let residuals: Vec<f64> = (0..1_000_000)
            .map(|_| rng.uniform_range(-0.5, 0.5))
            .collect();
        let gamma = optimal_gamma(&residuals).unwrap();
        let expected = 1.0 / 12f64.sqrt();
        assert!((gamma - expected).abs() / expected < 0.01, "{gamma}");
    }

    #[test]
    fn mc_kl_self_and_nonnegativity() {
        let q = exp_gaussian(&[0.7, -0.3], &[0.2, -0.1]);
        let (est, se) = mc_kl_estimate(&q, &q, 10_000, 1).unwrap();
        assert!(est.abs() <= 3.0 * se.max(1e-15), "{est} vs {se}");

        let mut rng = CounterRng::new(9);
        for i in 0..10 {
            let q1 = exp_gaussian(
                &[rng.uniform_range(-2.0, 2.0)],
                &[rng.uniform_range(-1.0, 1.0)],
            );
            let q2 = exp_gaussian(
                &[rng.uniform_range(-2.0, 2.0)],
                &[rng.uniform_range(-1.0, 1.0)],
            );
            let (est, se) = mc_kl_estimate(&q1, &q2, 20_000, 100 + i).unwrap();
            assert!(est + 3.0 * se > 0.0, "pair {i}: {est} +- {se}");
        }
    }
}
