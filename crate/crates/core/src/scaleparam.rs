//! Scale parameterizations: maps from a raw network output `p` to a
//! positive scale `sigma` and to its log `sigma_hat`, with analytic
//! derivatives for manual backpropagation.
//!
//! The log-scale is computed directly by each family rather than as
//! `log(sigma(p))` wherever that matters: `NaiveExp` composes `log(exp(p))`
//! literally and underflows in reduced precision, while `Exp` returns `p`
//! itself, which is the whole difference between the unstable and stable
//! formulations.

use std::fmt;
use std::str::FromStr;

use crate::precision::FloatMode;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScaleParamError {
    #[error("invalid constant for {family}: {reason}")]
    InvalidConstant { family: &'static str, reason: String },
    #[error("cannot parse scale parameterization from `{0}`")]
    Parse(String),
}

/// Tagged family of scale parameterizations.
///
/// Constants are in scale units: `omega` is an upper bound, `alpha` a lower
/// bound. Constructors validate `omega > 0`, `alpha > 0` (DownBounded) and
/// `0 <= alpha < omega` (Bounded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleParam {
    /// `sigma = exp(p)`, `sigma_hat = log(exp(p))` composed literally.
    NaiveExp,
    /// `sigma = exp(p)`, `sigma_hat = p`.
    Exp,
    /// `exp(p)` for `p <= 0`, `p + 1` above; log-scale piecewise likewise.
    ExpLin,
    /// Scale capped at `omega`: `(omega/2)exp(p)` below 0, `(omega/2)(2 - exp(-p))` above.
    UpBounded { omega: f64 },
    /// Scale floored at `alpha`: `alpha + exp(p)`.
    DownBounded { alpha: f64 },
    /// Scale confined to `(alpha, omega)` through a sigmoid.
    Bounded { alpha: f64, omega: f64 },
}

impl ScaleParam {
    pub fn up_bounded(omega: f64) -> Result<Self, ScaleParamError> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(ScaleParamError::InvalidConstant {
                family: "upbounded",
                reason: format!("omega must be a positive finite real, got {omega}"),
            });
        }
        Ok(ScaleParam::UpBounded { omega })
    }

    pub fn down_bounded(alpha: f64) -> Result<Self, ScaleParamError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(ScaleParamError::InvalidConstant {
                family: "downbounded",
                reason: format!("alpha must be a positive finite real, got {alpha}"),
            });
        }
        Ok(ScaleParam::DownBounded { alpha })
    }

    pub fn bounded(alpha: f64, omega: f64) -> Result<Self, ScaleParamError> {
        if !(alpha >= 0.0 && alpha.is_finite() && omega.is_finite() && alpha < omega) {
            return Err(ScaleParamError::InvalidConstant {
                family: "bounded",
                reason: format!("need 0 <= alpha < omega, got alpha={alpha}, omega={omega}"),
            });
        }
        Ok(ScaleParam::Bounded { alpha, omega })
    }

    /// The scale `sigma(p)`, every elementary op emulated in `mode`.
    /// Overflow to infinity in reduced modes is an observable value.
    pub fn sigma(&self, p: f64, mode: FloatMode) -> f64 {
        match *self {
            ScaleParam::NaiveExp | ScaleParam::Exp => mode.exp(p),
            ScaleParam::ExpLin => {
                if p <= 0.0 {
                    mode.exp(p)
                } else {
                    mode.add(p, 1.0)
                }
            }
            ScaleParam::UpBounded { omega } => {
                let half = mode.div(omega, 2.0);
                if p <= 0.0 {
                    mode.mul(half, mode.exp(p))
                } else {
                    mode.mul(half, mode.sub(2.0, mode.exp(mode.neg(p))))
                }
            }
            ScaleParam::DownBounded { alpha } => mode.add(alpha, mode.exp(p)),
            ScaleParam::Bounded { alpha, omega } => {
                let s = sigmoid(p, mode);
                mode.add(alpha, mode.mul(mode.sub(omega, alpha), s))
            }
        }
    }

    /// The log-scale `sigma_hat(p)`, every elementary op emulated in `mode`.
    ///
    /// `NaiveExp` evaluates `log(exp(p))` without simplification; negative
    /// infinity under reduced precision is the modeled pathology.
    pub fn log_sigma(&self, p: f64, mode: FloatMode) -> f64 {
        match *self {
            ScaleParam::NaiveExp => mode.log(mode.exp(p)),
            ScaleParam::Exp => mode.round(p),
            ScaleParam::ExpLin => {
                if p <= 0.0 {
                    mode.round(p)
                } else {
                    mode.log(mode.add(p, 1.0))
                }
            }
            ScaleParam::UpBounded { omega } => {
                let log_half = mode.log(mode.div(omega, 2.0));
                if p <= 0.0 {
                    mode.add(p, log_half)
                } else {
                    mode.add(mode.log(mode.sub(2.0, mode.exp(mode.neg(p)))), log_half)
                }
            }
            ScaleParam::DownBounded { .. } | ScaleParam::Bounded { .. } => {
                mode.log(self.sigma(p, mode))
            }
        }
    }

    /// Analytic derivative of `sigma` with respect to `p` (f64 only).
    /// The NaiveExp derivative is defined to be Exp's.
    pub fn dsigma_dp(&self, p: f64) -> f64 {
        match *self {
            ScaleParam::NaiveExp | ScaleParam::Exp | ScaleParam::DownBounded { .. } => p.exp(),
            ScaleParam::ExpLin => {
                if p <= 0.0 {
                    p.exp()
                } else {
                    1.0
                }
            }
            ScaleParam::UpBounded { omega } => {
                if p <= 0.0 {
                    0.5 * omega * p.exp()
                } else {
                    0.5 * omega * (-p).exp()
                }
            }
            ScaleParam::Bounded { alpha, omega } => {
                let s = stable_sigmoid(p);
                (omega - alpha) * s * (1.0 - s)
            }
        }
    }

    /// Analytic derivative of `log_sigma` with respect to `p` (f64 only).
    pub fn dlog_sigma_dp(&self, p: f64) -> f64 {
        match *self {
            ScaleParam::NaiveExp | ScaleParam::Exp => 1.0,
            ScaleParam::ExpLin => {
                if p <= 0.0 {
                    1.0
                } else {
                    1.0 / (p + 1.0)
                }
            }
            ScaleParam::UpBounded { .. } => {
                if p <= 0.0 {
                    1.0
                } else {
                    let e = (-p).exp();
                    e / (2.0 - e)
                }
            }
            // exp(p)/(alpha + exp(p)) stabilized against exp overflow.
            ScaleParam::DownBounded { alpha } => 1.0 / (alpha * (-p).exp() + 1.0),
            ScaleParam::Bounded { alpha, omega } => {
                let s = stable_sigmoid(p);
                if alpha == 0.0 {
                    // (omega s (1-s)) / (omega s) without the 0/0 at underflow.
                    1.0 - s
                } else {
                    (omega - alpha) * s * (1.0 - s) / (alpha + (omega - alpha) * s)
                }
            }
        }
    }
}

/// Overflow-safe sigmoid under emulation: `1/(1+exp(-p))` for `p >= 0`,
/// `exp(p)/(1+exp(p))` for `p < 0`.
fn sigmoid(p: f64, mode: FloatMode) -> f64 {
    if p >= 0.0 {
        mode.div(1.0, mode.add(1.0, mode.exp(mode.neg(p))))
    } else {
        let e = mode.exp(p);
        mode.div(e, mode.add(1.0, e))
    }
}

fn stable_sigmoid(p: f64) -> f64 {
    if p >= 0.0 {
        1.0 / (1.0 + (-p).exp())
    } else {
        let e = p.exp();
        e / (1.0 + e)
    }
}

impl fmt::Display for ScaleParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ScaleParam::NaiveExp => write!(f, "naive-exp"),
            ScaleParam::Exp => write!(f, "exp"),
            ScaleParam::ExpLin => write!(f, "explin"),
            ScaleParam::UpBounded { omega } => write!(f, "upbounded:{omega}"),
            ScaleParam::DownBounded { alpha } => write!(f, "downbounded:{alpha}"),
            ScaleParam::Bounded { alpha, omega } => write!(f, "bounded:{alpha}:{omega}"),
        }
    }
}

impl FromStr for ScaleParam {
    type Err = ScaleParamError;

    /// Parses the configuration-string forms `naive-exp`, `exp`, `explin`,
    /// `upbounded:<omega>`, `downbounded:<alpha>`, `bounded:<alpha>:<omega>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let parse_err = || ScaleParamError::Parse(s.to_string());
        let mut parts = s.split(':');
        let head = parts.next().ok_or_else(parse_err)?.to_ascii_lowercase();
        let nums: Vec<f64> = parts
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err())?;
        match (head.as_str(), nums.as_slice()) {
            ("naive-exp", []) => Ok(ScaleParam::NaiveExp),
            ("exp", []) => Ok(ScaleParam::Exp),
            ("explin", []) => Ok(ScaleParam::ExpLin),
            ("upbounded", [omega]) => ScaleParam::up_bounded(*omega),
            ("downbounded", [alpha]) => ScaleParam::down_bounded(*alpha),
            ("bounded", [alpha, omega]) => ScaleParam::bounded(*alpha, *omega),
            _ => Err(parse_err()),
        }
    }
}

/// Default decoded-scale lower bound for pixel data scaled to `[0, 1]`:
/// the standard deviation of uniform dequantization noise, `1/(256*sqrt(12))`.
pub fn alpha_for_unit_pixels() -> f64 {
    1.0 / (256.0 * 12f64.sqrt())
}

/// Decoded-scale lower bound for raw `[0, 256)` pixel data, `1/sqrt(12)`.
pub fn alpha_for_raw_pixels() -> f64 {
    1.0 / 12f64.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::FloatMode;
    use approx::assert_relative_eq;

    const F64: FloatMode = FloatMode::F64;

    fn all_params() -> Vec<ScaleParam> {
        vec![
            ScaleParam::NaiveExp,
            ScaleParam::Exp,
            ScaleParam::ExpLin,
            ScaleParam::up_bounded(1.0).unwrap(),
            ScaleParam::up_bounded(256.0).unwrap(),
            ScaleParam::down_bounded(1e-4).unwrap(),
            ScaleParam::bounded(1e-4, 1.0).unwrap(),
            ScaleParam::bounded(0.0, 256.0).unwrap(),
        ]
    }

    #[test]
    fn sigma_fixed_points() {
        assert_eq!(ScaleParam::Exp.sigma(0.0, F64), 1.0);
        assert_eq!(ScaleParam::up_bounded(1.0).unwrap().sigma(0.0, F64), 0.5);
        assert_eq!(ScaleParam::bounded(0.0, 256.0).unwrap().sigma(0.0, F64), 128.0);
    }

    #[test]
    fn log_sigma_fixed_points() {
        // exp(-120) underflows binary32, then log(0).
        assert_eq!(
            ScaleParam::NaiveExp.log_sigma(-120.0, FloatMode::F32),
            f64::NEG_INFINITY
        );
        assert_eq!(ScaleParam::Exp.log_sigma(-120.0, FloatMode::F32), -120.0);
        assert_relative_eq!(
            ScaleParam::ExpLin.log_sigma(std::f64::consts::E - 1.0, F64),
            1.0,
            max_relative = 1e-15
        );
    }

    #[test]
    fn derivative_fixed_points() {
        assert_eq!(ScaleParam::Exp.dsigma_dp(0.0), 1.0);
        assert_eq!(ScaleParam::up_bounded(1.0).unwrap().dsigma_dp(0.0), 0.5);
        assert_relative_eq!(ScaleParam::ExpLin.dlog_sigma_dp(1.0), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn positivity_and_monotonicity() {
        for param in all_params() {
            let mut prev: Option<f64> = None;
            // Bounded families saturate to their caps in f64 (above ~36 for
            // the upper bound, below ~-45 for a 1e-4 floor), so strict
            // monotonicity is asserted where increments are representable.
            let hi = match param {
                ScaleParam::UpBounded { .. } | ScaleParam::Bounded { .. } => 30.0,
                _ => 50.0,
            };
            let lo = match param {
                ScaleParam::DownBounded { .. } | ScaleParam::Bounded { .. } => -40.0,
                _ => -50.0,
            };
            let mut p = lo;
            while p <= hi {
                let s = param.sigma(p, F64);
                assert!(s > 0.0, "{param} sigma({p}) = {s}");
                assert!(s.is_finite() || matches!(param, ScaleParam::NaiveExp | ScaleParam::Exp));
                if let Some(prev) = prev {
                    assert!(prev < s, "{param} not strictly increasing at p={p}");
                }
                prev = Some(s);
                p += 0.25;
            }
        }
    }

    #[test]
    fn bounds_hold_on_dense_grid() {
        let up = ScaleParam::up_bounded(1.0).unwrap();
        let down = ScaleParam::down_bounded(1e-4).unwrap();
        let bounded = ScaleParam::bounded(1e-4, 1.0).unwrap();
        let mut p = -50.0;
        while p <= 50.0 {
            let s = up.sigma(p, F64);
            assert!(s > 0.0 && s <= 1.0);
            assert!(down.sigma(p, F64) >= 1e-4);
            let b = bounded.sigma(p, F64);
            assert!(b >= 1e-4 && b <= 1.0);
            // Strict inequalities hold wherever the distance to the bound is
            // representable in f64: the exp/sigmoid saturates above ~36 and
            // drops below one ulp of a 1e-4 floor below ~-45.
            if p <= 35.0 {
                assert!(s < 1.0, "upbounded sigma({p}) = {s}");
                assert!(b < 1.0, "bounded sigma({p}) = {b}");
            }
            if p >= -40.0 {
                assert!(down.sigma(p, F64) > 1e-4, "downbounded sigma({p})");
                assert!(b > 1e-4, "bounded sigma({p}) = {b}");
            }
            p += 0.125;
        }
    }

    #[test]
    fn piecewise_seam_is_c1() {
        for param in [ScaleParam::ExpLin, ScaleParam::up_bounded(1.0).unwrap()] {
            let left = param.sigma(0.0, F64);
            let right = match param {
                ScaleParam::ExpLin => 0.0 + 1.0,
                ScaleParam::UpBounded { omega } => 0.5 * omega * (2.0 - 1.0),
                _ => unreachable!(),
            };
            assert_eq!(left, right, "{param} value mismatch at seam");
            // Branch derivatives at 0: evaluate the analytic forms of each side.
            let dl = param.dsigma_dp(0.0);
            let dr = param.dsigma_dp(1e-300); // p > 0 branch, infinitesimally right
            assert_relative_eq!(dl, dr, max_relative = 1e-12);
        }
    }

    #[test]
    fn log_sigma_consistent_with_log_of_sigma() {
        for param in all_params() {
            if matches!(param, ScaleParam::NaiveExp) {
                continue;
            }
            for &p in &[-30.0, -10.0, -1.0, -1e-3, 0.0, 1e-3, 1.0, 10.0, 30.0] {
                let direct = param.log_sigma(p, F64);
                let composed = param.sigma(p, F64).ln();
                assert!(
                    (direct - composed).abs() < 1e-12,
                    "{param} at p={p}: {direct} vs {composed}"
                );
            }
        }
        // Exp log-scale is the identity, exactly.
        for &p in &[-700.0, -1.0, 0.0, 3.5, 700.0] {
            assert_eq!(ScaleParam::Exp.log_sigma(p, F64), p);
        }
    }

    fn central_diff(f: impl Fn(f64) -> f64, p: f64, h: f64) -> f64 {
        (f(p + h) - f(p - h)) / (2.0 * h)
    }

    fn one_sided_diff(f: impl Fn(f64) -> f64, p: f64, h: f64, right: bool) -> f64 {
        if right {
            (f(p + h) - f(p)) / h
        } else {
            (f(p) - f(p - h)) / h
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for param in all_params() {
            if matches!(param, ScaleParam::NaiveExp) {
                // Derivative defined as Exp's; the forward is not differentiable
                // through the literal composition in reduced precision.
                continue;
            }
            for &p in &[-10.0, -1.0, -1e-3, 0.0, 1e-3, 1.0, 10.0] {
                let (num_s, num_ls) = if p == 0.0 {
                    // One-sided from the left: p = 0 belongs to the p <= 0 branch.
                    (
                        one_sided_diff(|q| param.sigma(q, F64), p, h, false),
                        one_sided_diff(|q| param.log_sigma(q, F64), p, h, false),
                    )
                } else {
                    (
                        central_diff(|q| param.sigma(q, F64), p, h),
                        central_diff(|q| param.log_sigma(q, F64), p, h),
                    )
                };
                let ana_s = param.dsigma_dp(p);
                let ana_ls = param.dlog_sigma_dp(p);
                // The absolute slack absorbs finite-difference cancellation
                // when sigma is large (omega = 256) and its slope tiny.
                assert_relative_eq!(ana_s, num_s, max_relative = 1e-6, epsilon = 1e-7);
                assert_relative_eq!(ana_ls, num_ls, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn boundedness_contrast_at_large_p() {
        let p = 40.0;
        assert_eq!(ScaleParam::ExpLin.sigma(p, F64), 41.0);
        // The cap saturates in f64 above ~36 but is never exceeded.
        assert!(ScaleParam::up_bounded(1.0).unwrap().sigma(p, F64) <= 1.0);
        assert!(ScaleParam::up_bounded(1.0).unwrap().sigma(35.0, F64) < 1.0);
        // Exp grows without bound: astronomically large already at 40 and
        // past the binary32 limit by 89.
        assert!(ScaleParam::Exp.sigma(p, FloatMode::F32) > 1e17);
        assert_eq!(ScaleParam::Exp.sigma(89.0, FloatMode::F32), f64::INFINITY);
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            "naive-exp",
            "exp",
            "explin",
            "upbounded:1",
            "upbounded:256",
            "downbounded:0.0001",
            "bounded:0.0001:1",
            "bounded:0:256",
        ] {
            let param: ScaleParam = s.parse().unwrap();
            let round: ScaleParam = param.to_string().parse().unwrap();
            assert_eq!(param, round);
        }
        assert!("upbounded:0".parse::<ScaleParam>().is_err());
        assert!("upbounded:-1".parse::<ScaleParam>().is_err());
        assert!("downbounded:0".parse::<ScaleParam>().is_err());
        assert!("bounded:1:1".parse::<ScaleParam>().is_err());
        assert!("bounded:2:1".parse::<ScaleParam>().is_err());
        assert!("mystery".parse::<ScaleParam>().is_err());
        assert!("upbounded".parse::<ScaleParam>().is_err());
    }

    #[test]
    fn default_alpha_constants() {
        assert_relative_eq!(alpha_for_unit_pixels(), 1.0 / (256.0 * 12f64.sqrt()));
        assert_relative_eq!(alpha_for_raw_pixels() / 256.0, alpha_for_unit_pixels());
    }
}
