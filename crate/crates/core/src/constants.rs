//! Numerical constants of the heat kernel estimates.

/// Constant in the Nash inequality on the real line.
pub const ALPHA1: f64 = 0.171;

/// Constant in the two-dimensional Nash inequality on the plane.
pub const ALPHA2: f64 = 0.087;

/// One-dimensional Nash constant on a metric graph; bounds `2⁵·α₁`.
pub const BETA1: f64 = 6.0;

/// `(β₁/2)^{1/2}`: short-time ultracontractive constant.
pub const GAMMA1: f64 = 1.732_050_807_568_877_2;

/// `2⁵·α₁`, the constant delivered by the Euler tour argument.
pub const NASH1_LIFT_CONSTANT: f64 = 32.0 * ALPHA1;
