//! Reduced-precision floating-point emulation.
//!
//! Every elementary operation is computed exactly in `f64`, then rounded
//! onto the target format's value set (round-to-nearest-even, including
//! subnormals and overflow to infinity). This models what a tensor library
//! running in float32/float16 produces for the scalar pipelines studied
//! here, where underflow of `exp(p)` and the subsequent `log(0)` are the
//! signals of interest.

use std::fmt;
use std::str::FromStr;

/// Precision evaluation mode. `F64` is the identity (no emulation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FloatMode {
    F64,
    F32,
    F16,
}

impl FloatMode {
    /// Round `x` to the nearest representable value of the mode.
    ///
    /// NaN maps to NaN, infinities are preserved, values below half the
    /// smallest subnormal round to (signed) zero, values beyond the largest
    /// finite round to infinity. Total and idempotent.
    pub fn round(self, x: f64) -> f64 {
        match self {
            FloatMode::F64 => x,
            FloatMode::F32 => x as f32 as f64,
            FloatMode::F16 => round_f16(x),
        }
    }

    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(self.round(a) + self.round(b))
    }

    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(self.round(a) - self.round(b))
    }

    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(self.round(a) * self.round(b))
    }

    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(self.round(a) / self.round(b))
    }

    /// `exp` of the rounded argument, rounded once at the output.
    pub fn exp(self, x: f64) -> f64 {
        self.round(self.round(x).exp())
    }

    /// `log` of the rounded argument; `log(0) = -inf`, `log(x<0) = NaN`.
    pub fn log(self, x: f64) -> f64 {
        self.round(self.round(x).ln())
    }

    pub fn sqrt(self, x: f64) -> f64 {
        self.round(self.round(x).sqrt())
    }

    pub fn neg(self, x: f64) -> f64 {
        -self.round(x)
    }
}

impl fmt::Display for FloatMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FloatMode::F64 => write!(f, "f64"),
            FloatMode::F32 => write!(f, "f32"),
            FloatMode::F16 => write!(f, "f16"),
        }
    }
}

impl FromStr for FloatMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f64" | "float64" => Ok(FloatMode::F64),
            "f32" | "float32" => Ok(FloatMode::F32),
            "f16" | "float16" => Ok(FloatMode::F16),
            other => Err(format!("unknown float mode `{other}` (expected f64|f32|f16)")),
        }
    }
}

/// Elementary operations available under emulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Sqrt,
    Neg,
}

/// Round `x` onto the mode's value set. See [`FloatMode::round`].
pub fn round_to(mode: FloatMode, x: f64) -> f64 {
    mode.round(x)
}

/// Apply one elementary operation under emulation: inputs are rounded onto
/// the mode's value set, the op is computed exactly in `f64`, and the result
/// is rounded once. Non-finite results are values, not errors.
///
/// Panics if the argument count does not match the op's arity.
pub fn q_op(mode: FloatMode, op: ElemOp, args: &[f64]) -> f64 {
    match (op, args) {
        (ElemOp::Add, [a, b]) => mode.add(*a, *b),
        (ElemOp::Sub, [a, b]) => mode.sub(*a, *b),
        (ElemOp::Mul, [a, b]) => mode.mul(*a, *b),
        (ElemOp::Div, [a, b]) => mode.div(*a, *b),
        (ElemOp::Exp, [a]) => mode.exp(*a),
        (ElemOp::Log, [a]) => mode.log(*a),
        (ElemOp::Sqrt, [a]) => mode.sqrt(*a),
        (ElemOp::Neg, [a]) => mode.neg(*a),
        _ => panic!("q_op: arity mismatch for {op:?} with {} args", args.len()),
    }
}

// binary16 grid rounding from f64, round-to-nearest-even.
//
// The value set is m * 2^-24 for |m| <= 1023 (subnormals) plus the normal
// binades 2^e..2^(e+1) for e in -14..=15 with 10 mantissa bits. Scaling by
// the binade quantum is exact in f64, so a single `round_ties_even` on the
// scaled value gives correct rounding with no double-rounding hazard.
fn round_f16(x: f64) -> f64 {
    if x.is_nan() || x.is_infinite() || x == 0.0 {
        return x;
    }
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let a = x.abs();
    // Midpoint between 65504 (max finite) and 65536; the tie rounds to even,
    // i.e. to infinity.
    if a >= 65520.0 {
        return sign * f64::INFINITY;
    }
    let bits = a.to_bits();
    let biased_exp = ((bits >> 52) & 0x7ff) as i64;
    if biased_exp == 0 {
        // f64 subnormal, far below half of the smallest binary16 subnormal.
        return sign * 0.0;
    }
    let e = biased_exp - 1023;
    let quantum_exp: i32 = if e < -14 { -24 } else { (e - 10) as i32 };
    let quantum = f64::powi(2.0, quantum_exp);
    let m = (a / quantum).round_ties_even();
    sign * m * quantum
}

/// How the log-quotient term of the Gaussian KL is evaluated.
///
/// `Direct` is the plain `log(sigma2/sigma1)` arrangement (the ratio is
/// formed as `sigma1/sigma2` and the log negated, which is how the common
/// library implementations keep the quotient in range). `SquaredQuotient`
/// squares the scales before the log, halving the usable exponent range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuotientVariant {
    Direct,
    SquaredQuotient,
}

impl fmt::Display for QuotientVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuotientVariant::Direct => write!(f, "direct"),
            QuotientVariant::SquaredQuotient => write!(f, "squared-quotient"),
        }
    }
}

/// Emulated value of the KL log-quotient term `log(sigma2/sigma1)` with
/// `sigma1 = exp(p)` and `sigma2 = 1`, every elementary op in `mode`.
pub fn log_quotient_term(mode: FloatMode, variant: QuotientVariant, p: f64) -> f64 {
    let sigma1 = mode.exp(p);
    let sigma2 = 1.0;
    naive_log_quotient(mode, variant, sigma1, sigma2)
}

/// Emulated log-quotient `log(sigma2/sigma1)` on already-produced scales.
pub fn naive_log_quotient(mode: FloatMode, variant: QuotientVariant, sigma1: f64, sigma2: f64) -> f64 {
    match variant {
        QuotientVariant::Direct => mode.neg(mode.log(mode.div(sigma1, sigma2))),
        QuotientVariant::SquaredQuotient => {
            let ratio_sq = mode.div(mode.mul(sigma1, sigma1), mode.mul(sigma2, sigma2));
            mode.neg(mode.mul(0.5, mode.log(ratio_sq)))
        }
    }
}

/// Lowest integer pre-scale probed by [`min_finite_log_quotient`]. F64 stays
/// finite down to exp(-745), well past this floor.
pub const SWEEP_FLOOR: i64 = -200;

/// Sweep integer `p` downward from 0 with `sigma1 = exp(p)` emulated in
/// `mode` and `sigma2 = 1`, and return the smallest `p` for which the
/// emulated log-quotient stays finite, together with `exp(p)` evaluated in
/// f64. Returns `None` when the quotient is still finite at the sweep floor.
pub fn min_finite_log_quotient(mode: FloatMode, variant: QuotientVariant) -> Option<(i64, f64)> {
    let mut last_finite: Option<i64> = None;
    for p in (SWEEP_FLOOR..=0).rev() {
        let value = log_quotient_term(mode, variant, p as f64);
        if value.is_finite() {
            last_finite = Some(p);
        } else {
            return last_finite.map(|p_min| (p_min, f64::exp(p_min as f64)));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use half::f16;
    use proptest::prelude::*;

    #[test]
    fn f64_mode_is_identity() {
        for &x in &[0.0, -0.0, 1.5, -3.25e300, 4.9e-324, f64::INFINITY] {
            assert_eq!(round_to(FloatMode::F64, x).to_bits(), x.to_bits());
        }
        assert!(round_to(FloatMode::F64, f64::NAN).is_nan());
    }

    #[test]
    fn round_examples_from_reference_conversion() {
        // Exactly representable.
        assert_eq!(round_to(FloatMode::F16, 1.0), 1.0);
        // Below half the smallest binary32 subnormal (2^-150 ~ 7.0e-46).
        assert_eq!(round_to(FloatMode::F32, 6.8e-46), 0.0);
        // Above half the smallest binary16 subnormal (2^-25 ~ 2.98e-8).
        let expected = f64::powi(2.0, -24);
        assert_eq!(round_to(FloatMode::F16, 4.14e-8), expected);
    }

    #[test]
    fn f16_special_values() {
        assert!(round_to(FloatMode::F16, f64::NAN).is_nan());
        assert_eq!(round_to(FloatMode::F16, f64::INFINITY), f64::INFINITY);
        assert_eq!(round_to(FloatMode::F16, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(round_to(FloatMode::F16, 65504.0), 65504.0);
        assert_eq!(round_to(FloatMode::F16, 65519.9), 65504.0);
        assert_eq!(round_to(FloatMode::F16, 65520.0), f64::INFINITY);
        assert_eq!(round_to(FloatMode::F16, -65520.0), f64::NEG_INFINITY);
        // Tie at half the smallest subnormal rounds to even (zero).
        assert_eq!(round_to(FloatMode::F16, f64::powi(2.0, -25)), 0.0);
        assert!(round_to(FloatMode::F16, -1e-30).is_sign_negative());
    }

    // The `half` crate is the independent reference for the binary16 grid.
    fn f16_reference(x: f64) -> f64 {
        f16::from_f64(x).to_f64()
    }

    #[test]
    fn f16_matches_reference_on_edge_cases() {
        let cases = [
            0.0,
            -0.0,
            1.0,
            1.0009765625, // 1 + 2^-10, exact
            f64::powi(2.0, -24),
            f64::powi(2.0, -25),
            f64::powi(2.0, -25) * 1.0000001,
            f64::powi(2.0, -14),
            f64::powi(2.0, -14) * 0.999999,
            65504.0,
            65519.0,
            65520.0,
            -42.0625,
            3.14159265358979,
            2.98e-8,
            4.14e-8,
            6.0e-5,
        ];
        for &x in &cases {
            let got = round_to(FloatMode::F16, x);
            let want = f16_reference(x);
            assert_eq!(got.to_bits(), want.to_bits(), "x={x:e}: got {got:e}, want {want:e}");
        }
    }

    proptest! {
        #[test]
        fn f16_matches_reference_crate(x in prop::num::f64::ANY) {
            let got = round_to(FloatMode::F16, x);
            let want = f16_reference(x);
            if want.is_nan() {
                prop_assert!(got.is_nan());
            } else {
                prop_assert_eq!(got.to_bits(), want.to_bits());
            }
        }

        #[test]
        fn f16_matches_reference_small(mag in -30.0f64..20.0, sign in prop::bool::ANY) {
            // Dense coverage of the subnormal/underflow region.
            let x = if sign { -mag.exp2() } else { mag.exp2() };
            let got = round_to(FloatMode::F16, x);
            let want = f16_reference(x);
            prop_assert_eq!(got.to_bits(), want.to_bits());
        }

        #[test]
        fn rounding_idempotent(x in prop::num::f64::ANY) {
            for mode in [FloatMode::F64, FloatMode::F32, FloatMode::F16] {
                let once = round_to(mode, x);
                let twice = round_to(mode, once);
                if once.is_nan() {
                    prop_assert!(twice.is_nan());
                } else {
                    prop_assert_eq!(once.to_bits(), twice.to_bits());
                }
            }
        }

        #[test]
        fn rounding_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for mode in [FloatMode::F32, FloatMode::F16] {
                prop_assert!(round_to(mode, lo) <= round_to(mode, hi));
            }
        }
    }

    #[test]
    fn q_op_underflow_signals() {
        // exp(-104) ~ 6.9e-46 is below half the smallest binary32 subnormal.
        assert_eq!(q_op(FloatMode::F32, ElemOp::Exp, &[-104.0]), 0.0);
        // exp(-103) ~ 1.85e-45 rounds to the smallest binary32 subnormal.
        let smallest_subnormal = f64::powi(2.0, -149);
        assert_eq!(q_op(FloatMode::F32, ElemOp::Exp, &[-103.0]), smallest_subnormal);
        assert_eq!(q_op(FloatMode::F64, ElemOp::Log, &[1.0]), 0.0);
        assert_eq!(q_op(FloatMode::F32, ElemOp::Log, &[0.0]), f64::NEG_INFINITY);
        assert!(q_op(FloatMode::F32, ElemOp::Log, &[-1.0]).is_nan());
    }

    #[test]
    fn table1_cells() {
        assert_eq!(
            min_finite_log_quotient(FloatMode::F32, QuotientVariant::Direct),
            Some((-103, f64::exp(-103.0)))
        );
        assert_eq!(
            min_finite_log_quotient(FloatMode::F32, QuotientVariant::SquaredQuotient),
            Some((-51, f64::exp(-51.0)))
        );
        assert_eq!(
            min_finite_log_quotient(FloatMode::F16, QuotientVariant::Direct),
            Some((-17, f64::exp(-17.0)))
        );
        assert_eq!(
            min_finite_log_quotient(FloatMode::F16, QuotientVariant::SquaredQuotient),
            Some((-8, f64::exp(-8.0)))
        );
    }

    #[test]
    fn table1_sigma_values_to_three_significant_figures() {
        let cells = [
            (FloatMode::F32, QuotientVariant::Direct, 1.85e-45),
            (FloatMode::F32, QuotientVariant::SquaredQuotient, 7.10e-23),
            (FloatMode::F16, QuotientVariant::Direct, 4.14e-8),
            (FloatMode::F16, QuotientVariant::SquaredQuotient, 3.35e-4),
        ];
        for (mode, variant, expected) in cells {
            let (_, sigma) = min_finite_log_quotient(mode, variant).unwrap();
            assert_eq!(
                format!("{sigma:.2e}"),
                format!("{expected:.2e}"),
                "{mode} {variant}"
            );
        }
    }

    #[test]
    fn f64_sweep_has_no_minimum_in_range() {
        assert_eq!(min_finite_log_quotient(FloatMode::F64, QuotientVariant::Direct), None);
        assert_eq!(
            min_finite_log_quotient(FloatMode::F64, QuotientVariant::SquaredQuotient),
            None
        );
    }

    #[test]
    fn squared_quotient_never_extends_range() {
        for mode in [FloatMode::F32, FloatMode::F16] {
            let (direct, _) = min_finite_log_quotient(mode, QuotientVariant::Direct).unwrap();
            let (squared, _) =
                min_finite_log_quotient(mode, QuotientVariant::SquaredQuotient).unwrap();
            assert!(squared >= direct);
        }
    }
}
