//! Inequality comparisons reported by the verification routines.

use serde::{Deserialize, Serialize};

/// Relative slack granted to floating-point rounding in `lhs <= rhs`.
pub const ROUNDING_SLACK: f64 = 1e-12;

/// Outcome of checking `lhs <= rhs`.
///
/// `ratio` is `lhs / rhs`, or `None` when `rhs` is zero; a `0 <= 0`
/// comparison passes with no ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    pub pass: bool,
}

impl Comparison {
    pub fn le(lhs: f64, rhs: f64) -> Self {
        Self::le_with_slack(lhs, rhs, ROUNDING_SLACK)
    }

    pub fn le_with_slack(lhs: f64, rhs: f64, slack: f64) -> Self {
        let ratio = (rhs != 0.0).then(|| lhs / rhs);
        let scale = lhs.abs().max(rhs.abs());
        let pass = lhs.is_finite() && rhs.is_finite() && lhs <= rhs + slack * scale;
        Self { lhs, rhs, ratio, pass }
    }

    /// `lhs <= rhs` where `rhs` is a sum of cancelling terms whose absolute
    /// values add up to `magnitude`; rounding slack is relative to it.
    pub fn le_terms(lhs: f64, rhs: f64, magnitude: f64) -> Self {
        let mut c = Self::le(lhs, rhs);
        c.pass = lhs.is_finite() && rhs.is_finite() && lhs <= rhs + ROUNDING_SLACK * magnitude.max(lhs.abs());
        c
    }

    pub fn is_degenerate(&self) -> bool {
        self.ratio.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparisons() {
        let c = Comparison::le(1.0, 2.0);
        assert_eq!((c.ratio, c.pass), (Some(0.5), true));
        assert!(!Comparison::le(2.0, 1.0).pass);
        assert!(Comparison::le(1.0 + 1e-15, 1.0).pass);
        let z = Comparison::le(0.0, 0.0);
        assert!(z.pass && z.is_degenerate());
        assert!(!Comparison::le(f64::NAN, 1.0).pass);
        assert!(Comparison::le_terms(0.0, -1e-16, 4.0).pass);
        assert!(!Comparison::le_terms(0.0, -1e-6, 4.0).pass);
    }
}
