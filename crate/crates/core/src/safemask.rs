//! NaN-safe evaluation of piecewise formulas with multiplicative masks.
//!
//! Vectorized frameworks evaluate both branches of a piecewise definition
//! everywhere and select with indicator masks. The naive form evaluates each
//! branch at the raw input, so an overflowing branch produces `inf * 0 = NaN`
//! even where it is masked out. The safe form evaluates each branch on a copy
//! of the input clipped to that branch's domain, which keeps every branch
//! finite. Indicators are taken on the original input so that `p = 0`
//! selects the `p <= 0` branch, matching the scale parameterizations.

use crate::precision::FloatMode;

/// Elementary expression over one variable, built from
/// `{exp, log, +, -, *, /, neg, constants}`.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Var,
    Const(f64),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn eval(&self, p: f64, mode: FloatMode) -> f64 {
        match self {
            Expr::Var => mode.round(p),
            Expr::Const(c) => mode.round(*c),
            Expr::Exp(a) => mode.exp(a.eval(p, mode)),
            Expr::Log(a) => mode.log(a.eval(p, mode)),
            Expr::Neg(a) => mode.neg(a.eval(p, mode)),
            Expr::Add(a, b) => mode.add(a.eval(p, mode), b.eval(p, mode)),
            Expr::Sub(a, b) => mode.sub(a.eval(p, mode), b.eval(p, mode)),
            Expr::Mul(a, b) => mode.mul(a.eval(p, mode), b.eval(p, mode)),
            Expr::Div(a, b) => mode.div(a.eval(p, mode), b.eval(p, mode)),
        }
    }
}

fn var() -> Box<Expr> {
    Box::new(Expr::Var)
}

fn constant(c: f64) -> Box<Expr> {
    Box::new(Expr::Const(c))
}

/// A two-branch piecewise formula: `f_neg` applies on `p <= 0`, `f_pos` on
/// `p > 0`. Both branches are total functions of a real argument.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseSpec {
    pub f_neg: Expr,
    pub f_pos: Expr,
}

impl PiecewiseSpec {
    /// `exp(p)` below zero, `p + 1` above -- the ExpLin scale.
    pub fn explin() -> Self {
        PiecewiseSpec {
            f_neg: Expr::Exp(var()),
            f_pos: Expr::Add(var(), constant(1.0)),
        }
    }

    /// `(omega/2)exp(p)` below zero, `(omega/2)(2 - exp(-p))` above -- the
    /// UpBounded scale. The op sequence mirrors the scale parameterization
    /// so the two evaluation paths agree bit for bit.
    pub fn upbounded(omega: f64) -> Self {
        let half = || Box::new(Expr::Div(constant(omega), constant(2.0)));
        PiecewiseSpec {
            f_neg: Expr::Mul(half(), Box::new(Expr::Exp(var()))),
            f_pos: Expr::Mul(
                half(),
                Box::new(Expr::Sub(
                    constant(2.0),
                    Box::new(Expr::Exp(Box::new(Expr::Neg(var())))),
                )),
            ),
        }
    }

    /// Evaluate both branches at the raw input and combine with
    /// multiplicative indicator masks. Where a masked-out branch overflows,
    /// `inf * 0` yields NaN: the demonstrated failure, not an error.
    pub fn eval_naive(&self, p: &[f64], mode: FloatMode) -> Vec<f64> {
        p.iter()
            .map(|&pi| {
                let mask_neg = if pi <= 0.0 { 1.0 } else { 0.0 };
                let mask_pos = if pi > 0.0 { 1.0 } else { 0.0 };
                mode.add(
                    mode.mul(self.f_neg.eval(pi, mode), mask_neg),
                    mode.mul(self.f_pos.eval(pi, mode), mask_pos),
                )
            })
            .collect()
    }

    /// Evaluate each branch on the input clipped to its domain
    /// (`p_minus = min(p, 0)`, `p_plus = max(p, 0)`), masking on the
    /// original input. Finite for all finite `p` whenever each branch is
    /// finite on its clipped domain.
    pub fn eval_safe(&self, p: &[f64], mode: FloatMode) -> Vec<f64> {
        p.iter()
            .map(|&pi| {
                if pi <= 0.0 {
                    self.f_neg.eval(pi.min(0.0), mode)
                } else {
                    self.f_pos.eval(pi.max(0.0), mode)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::FloatMode;
    use crate::scaleparam::ScaleParam;
    use proptest::prelude::*;

    #[test]
    fn naive_mask_produces_nan_on_overflowing_branch() {
        let spec = PiecewiseSpec::explin();
        let out = spec.eval_naive(&[100.0], FloatMode::F32);
        assert!(out[0].is_nan());
    }

    #[test]
    fn naive_mask_fine_where_both_branches_finite() {
        let spec = PiecewiseSpec::explin();
        assert_eq!(spec.eval_naive(&[0.0], FloatMode::F64), vec![1.0]);
        assert_eq!(spec.eval_naive(&[0.0], FloatMode::F32), vec![1.0]);
        assert_eq!(spec.eval_naive(&[-1.0], FloatMode::F64), vec![(-1f64).exp()]);
    }

    #[test]
    fn safe_mask_recovers_the_piecewise_value() {
        let spec = PiecewiseSpec::explin();
        assert_eq!(spec.eval_safe(&[100.0], FloatMode::F32), vec![101.0]);
        let out = spec.eval_safe(&[-3.0, 0.0, 3.0], FloatMode::F64);
        assert_eq!(out, vec![(-3f64).exp(), 1.0, 4.0]);
    }

    #[test]
    fn safe_equals_sigma_everywhere() {
        let spec = PiecewiseSpec::explin();
        let param = ScaleParam::ExpLin;
        let mut p = -120.0;
        while p <= 120.0 {
            let safe = spec.eval_safe(&[p], FloatMode::F32)[0];
            let sig = param.sigma(p, FloatMode::F32);
            assert!(safe.is_finite());
            assert_eq!(safe.to_bits(), sig.to_bits(), "p={p}");
            p += 0.03125;
        }
    }

    #[test]
    fn safe_equals_sigma_for_upbounded() {
        let spec = PiecewiseSpec::upbounded(1.0);
        let param = ScaleParam::up_bounded(1.0).unwrap();
        let mut p = -60.0;
        while p <= 60.0 {
            let safe = spec.eval_safe(&[p], FloatMode::F32)[0];
            let sig = param.sigma(p, FloatMode::F32);
            assert_eq!(safe.to_bits(), sig.to_bits(), "p={p}");
            p += 0.5;
        }
    }

    proptest! {
        #[test]
        fn naive_and_safe_agree_where_naive_is_finite(p in -10.0f64..10.0) {
            let spec = PiecewiseSpec::explin();
            for mode in [FloatMode::F64, FloatMode::F32, FloatMode::F16] {
                let naive = spec.eval_naive(&[p], mode)[0];
                let safe = spec.eval_safe(&[p], mode)[0];
                if naive.is_finite() {
                    prop_assert_eq!(naive.to_bits(), safe.to_bits());
                }
            }
        }

        #[test]
        fn vector_evaluation_is_elementwise(mut ps in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let spec = PiecewiseSpec::explin();
            let forward = spec.eval_safe(&ps, FloatMode::F32);
            ps.reverse();
            let mut reversed = spec.eval_safe(&ps, FloatMode::F32);
            reversed.reverse();
            prop_assert_eq!(forward, reversed);
        }
    }
}
