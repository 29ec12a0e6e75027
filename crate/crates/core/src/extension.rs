//! Extension of boundary data on a tangential polygon to its interior.
//!
//! The polygon is cut into the triangles spanned by each side and the
//! incentre. On the triangle over side `i`, in a frame with `v_i` at the
//! origin, the side along `+x` and the incentre at `(d_i, r)`,
//!
//! ```text
//! F_i(x, y) = (1 - y/r) f_i(u) + k y / r,    u = (x - d_i y / r) / (1 - y / r).
//! ```
//!
//! In the coordinates `(u, y)` the area element is `(1 - y/r) du dy` and
//! `∂F/∂y = (k - f(u) + (u - d) f'(u)) / r` does not depend on `y`, so all
//! integrals of `F` reduce to one-dimensional integrals of `f` along the
//! side, which are exact for piecewise-linear `f`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::Comparison;
use crate::functions::{side_value, LoopFunction};
use crate::geometry::{Point, Polygon};

#[derive(Debug, Error)]
pub enum ExtensionError {
    #[error("point ({x}, {y}) is outside the polygon")]
    Outside { x: f64, y: f64 },
    #[error("boundary data has {got} sides, polygon has {expected}")]
    SideCountMismatch { expected: usize, got: usize },
    #[error("side {side} of the boundary data has length {got}, polygon side has {expected}")]
    SideLengthMismatch { side: usize, expected: f64, got: f64 },
    #[error("boundary data takes the negative value {0}")]
    NegativeData(f64),
    #[error("offset constant k must be nonnegative, got {0}")]
    NegativeK(f64),
}

/// Triangle over one side in its local frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideTriangle {
    /// Start corner `v_i`.
    pub origin: Point,
    /// Unit vector from `v_i` to `v_{i+1}`.
    pub along: Point,
    /// Inward unit normal.
    pub inward: Point,
    /// Side length `l_i`.
    pub length: f64,
    /// Signed offset `d_i` of the foot of the altitude from `v_i`.
    pub foot: f64,
    /// `max(d_i, |l_i - d_i|)`.
    pub m: f64,
}

impl SideTriangle {
    /// Local coordinates of `p`.
    pub fn local(&self, p: Point) -> (f64, f64) {
        let q = p - self.origin;
        (q.dot(self.along), q.dot(self.inward))
    }

    /// Global position of local coordinates.
    pub fn global(&self, x: f64, y: f64) -> Point {
        self.origin + self.along * x + self.inward * y
    }

    pub fn area(&self, r: f64) -> f64 {
        0.5 * self.length * r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleDecomposition {
    pub incenter: Point,
    /// Common altitude `r`, the inradius.
    pub r: f64,
    pub perimeter: f64,
    pub triangles: Vec<SideTriangle>,
}

impl TriangleDecomposition {
    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// `max_i m_i`.
    pub fn m(&self) -> f64 {
        self.triangles.iter().map(|t| t.m).fold(0.0, f64::max)
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| t.area(self.r)).sum()
    }

    /// Triangle containing `p` and the local coordinates of `p` in it.
    /// Points on a shared ray resolve to the lower side index.
    pub fn locate(&self, p: Point) -> Option<(usize, f64, f64)> {
        let tol = 1e-12 * (self.r + self.perimeter);
        self.triangles.iter().enumerate().find_map(|(i, t)| {
            let (x, y) = t.local(p);
            let inside = y >= -tol
                && y <= self.r + tol
                && x >= t.foot * y / self.r - tol
                && x <= t.length - (t.length - t.foot) * y / self.r + tol;
            inside.then_some((i, x, y.clamp(0.0, self.r)))
        })
    }
}

pub fn triangle_decomposition(polygon: &Polygon) -> TriangleDecomposition {
    let incenter = polygon.incenter();
    let r = polygon.inradius();
    let triangles = polygon
        .sides()
        .map(|(a, b)| {
            let length = a.distance(b);
            let along = (b - a) * (1.0 / length);
            let inward = along.perp();
            let foot = (incenter - a).dot(along);
            SideTriangle {
                origin: a,
                along,
                inward,
                length,
                foot,
                m: foot.max((length - foot).abs()),
            }
        })
        .collect();
    TriangleDecomposition {
        incenter,
        r,
        perimeter: polygon.perimeter(),
        triangles,
    }
}

/// `min(f(v_1), …, f(v_n), ‖f‖₁ / |∂P|)`.
///
/// A mean that matches the smallest corner value up to rounding yields the
/// corner value, so `k` is always a value `f` actually takes.
pub fn choose_k(f: &LoopFunction) -> f64 {
    let mean = f.l1() / f.perimeter();
    let corner = f.corner_values().into_iter().fold(f64::INFINITY, f64::min);
    if corner <= mean || (corner - mean) <= 1e-12 * corner.abs() {
        corner
    } else {
        mean
    }
}

/// The extension `F` of boundary data `f` with offset constant `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtensionField {
    pub decomposition: TriangleDecomposition,
    pub boundary: LoopFunction,
    pub k: f64,
}

impl ExtensionField {
    pub fn new(polygon: &Polygon, boundary: LoopFunction, k: f64) -> Result<Self, ExtensionError> {
        if !(k >= 0.0) {
            return Err(ExtensionError::NegativeK(k));
        }
        let decomposition = triangle_decomposition(polygon);
        if boundary.side_count() != decomposition.len() {
            return Err(ExtensionError::SideCountMismatch {
                expected: decomposition.len(),
                got: boundary.side_count(),
            });
        }
        for (i, (t, &l)) in decomposition.triangles.iter().zip(boundary.side_lengths()).enumerate() {
            if (t.length - l).abs() > 1e-9 * t.length {
                return Err(ExtensionError::SideLengthMismatch {
                    side: i,
                    expected: t.length,
                    got: l,
                });
            }
        }
        Ok(Self {
            decomposition,
            boundary,
            k,
        })
    }

    /// Extension with `k` from [`choose_k`].
    pub fn with_chosen_k(polygon: &Polygon, boundary: LoopFunction) -> Result<Self, ExtensionError> {
        let k = choose_k(&boundary);
        Self::new(polygon, boundary, k)
    }

    fn side_piece(&self, side: usize, u: f64) -> (f64, f64) {
        let (nodes, vals) = self.boundary.side(side);
        let j = nodes.partition_point(|&n| n <= u).clamp(1, nodes.len() - 1);
        let h = nodes[j] - nodes[j - 1];
        let slope = if h > 0.0 { (vals[j] - vals[j - 1]) / h } else { 0.0 };
        (side_value(nodes, vals, u), slope)
    }

    fn parameter(&self, side: usize, x: f64, y: f64) -> f64 {
        let t = &self.decomposition.triangles[side];
        let s = 1.0 - y / self.decomposition.r;
        ((x - t.foot * (1.0 - s)) / s).clamp(0.0, t.length)
    }

    pub fn evaluate(&self, p: Point) -> Result<f64, ExtensionError> {
        let (i, x, y) = self.decomposition.locate(p).ok_or(ExtensionError::Outside { x: p.x, y: p.y })?;
        Ok(self.evaluate_local(i, x, y))
    }

    /// `F_i(x, y)` in the frame of triangle `side`.
    pub fn evaluate_local(&self, side: usize, x: f64, y: f64) -> f64 {
        let r = self.decomposition.r;
        let s = 1.0 - y / r;
        if s <= 0.0 {
            return self.k;
        }
        let (fu, _) = self.side_piece(side, self.parameter(side, x, y));
        s * fu + self.k * (1.0 - s)
    }

    /// `∇F` in global coordinates, using the slope of `f` to the right of
    /// the parameter at kinks.
    pub fn gradient(&self, p: Point) -> Result<Point, ExtensionError> {
        let (i, x, y) = self.decomposition.locate(p).ok_or(ExtensionError::Outside { x: p.x, y: p.y })?;
        let (dx, dy) = self.gradient_local(i, x, y);
        let t = &self.decomposition.triangles[i];
        Ok(t.along * dx + t.inward * dy)
    }

    /// `(∂F_i/∂x, ∂F_i/∂y)` in the frame of triangle `side`.
    pub fn gradient_local(&self, side: usize, x: f64, y: f64) -> (f64, f64) {
        let r = self.decomposition.r;
        let t = &self.decomposition.triangles[side];
        let u = self.parameter(side, x, y);
        let (fu, slope) = self.side_piece(side, u);
        (slope, (self.k - fu + (u - t.foot) * slope) / r)
    }
}

/// Closed-form integrals of `F` over one triangle, with the one-dimensional
/// quantities of `f_i` they are built from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriangleIntegrals {
    /// `∫ F_i`.
    pub i1: f64,
    /// `∫ F_i²`.
    pub i2: f64,
    /// `∫ |∇F_i|²`.
    pub id: f64,
    /// `∫ f_i`.
    pub side_integral: f64,
    /// `‖f_i‖₁`.
    pub side_l1: f64,
    /// `‖f_i‖₂²`.
    pub side_l2_squared: f64,
    /// `‖f_i'‖₂²`.
    pub side_energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionIntegrals {
    pub triangles: Vec<TriangleIntegrals>,
    pub i1: f64,
    pub i2: f64,
    pub id: f64,
}

pub fn extension_integrals(field: &ExtensionField) -> ExtensionIntegrals {
    let r = field.decomposition.r;
    let k = field.k;
    let triangles: Vec<TriangleIntegrals> = field
        .decomposition
        .triangles
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (nodes, vals) = field.boundary.side(i);
            let mut integral = 0.0;
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            let mut energy = 0.0;
            let mut grad = 0.0;
            for j in 1..nodes.len() {
                let h = nodes[j] - nodes[j - 1];
                if h <= 0.0 {
                    continue;
                }
                let (a, b) = (vals[j - 1], vals[j]);
                let c = (b - a) / h;
                let g = k - a + c * (nodes[j - 1] - t.foot);
                integral += 0.5 * h * (a + b);
                l1 += crate::functions::piece_abs_integral(h, a, b);
                l2 += crate::functions::piece_square_integral(h, a, b);
                energy += c * c * h;
                grad += h * (c * c + g * g / (r * r));
            }
            let l = t.length;
            TriangleIntegrals {
                i1: r * (integral / 3.0 + k * l / 6.0),
                i2: r * (l2 / 4.0 + k * integral / 6.0 + k * k * l / 12.0),
                id: 0.5 * r * grad,
                side_integral: integral,
                side_l1: l1,
                side_l2_squared: l2,
                side_energy: energy,
            }
        })
        .collect();
    ExtensionIntegrals {
        i1: triangles.iter().map(|t| t.i1).sum(),
        i2: triangles.iter().map(|t| t.i2).sum(),
        id: triangles.iter().map(|t| t.id).sum(),
        triangles,
    }
}

/// Right-hand side of the per-triangle Dirichlet bound, with vertex terms
/// `k t f(v)/r - t f(v)²/(2r)` at both ends of the side, where `t` is the
/// distance from the corner to the foot of the altitude. Returns the bound
/// and the sum of the absolute values of its terms.
pub fn triangle_dirichlet_bound(
    t: &SideTriangle,
    r: f64,
    k: f64,
    integrals: &TriangleIntegrals,
    start_value: f64,
    end_value: f64,
) -> (f64, f64) {
    let l = t.length;
    let (near, far) = (t.foot, l - t.foot);
    let terms = [
        (0.5 * r + t.m * t.m / (2.0 * r)) * integrals.side_energy,
        l * k * k / (2.0 * r),
        -2.0 * k / r * integrals.side_integral,
        integrals.side_l2_squared / r,
        k * far / r * end_value,
        -far / (2.0 * r) * end_value * end_value,
        k * near / r * start_value,
        -near / (2.0 * r) * start_value * start_value,
    ];
    (terms.iter().sum(), terms.iter().map(|x| x.abs()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionReport {
    pub k: f64,
    pub r: f64,
    pub perimeter: f64,
    pub m: f64,
    pub integrals: ExtensionIntegrals,
    /// `‖f‖²_{L²(∂P)} ≤ (4/r) ‖F‖²_{L²(P)}`.
    pub ineq1: Comparison,
    /// `‖F‖_{L¹(P)} ≤ (r/2) ‖f‖_{L¹(∂P)}`.
    pub ineq2: Comparison,
    /// `∫_P |∇F|² ≤ (r/2 + |∂P|²/(4r)) ‖f'‖²_{L²(∂P)}`.
    pub ineq3: Comparison,
    /// Per-triangle Dirichlet bounds.
    pub triangle_dirichlet: Vec<Comparison>,
    /// Sum of the per-triangle bounds with the vertex terms bounded by
    /// `|∂P| k² / (2r)`.
    pub dirichlet_sum: Comparison,
    /// Largest relative error in `∫F_i = (r/3)‖f_i‖₁ + l_i k r/6`.
    pub l1_identity_error: f64,
    /// Per-triangle lower bounds `∫F_i² ≥ (r/4)‖f_i‖₂²`.
    pub l2_lower_bounds: Vec<Comparison>,
    pub pass: bool,
}

/// Builds the extension with [`choose_k`] and checks all three inequalities
/// together with the intermediate per-triangle estimates.
pub fn verify_extension_bounds(polygon: &Polygon, f: &LoopFunction) -> Result<ExtensionReport, ExtensionError> {
    let min = f.min();
    if min < 0.0 {
        return Err(ExtensionError::NegativeData(min));
    }
    let field = ExtensionField::with_chosen_k(polygon, f.clone())?;
    Ok(report_for_field(&field))
}

pub fn report_for_field(field: &ExtensionField) -> ExtensionReport {
    let dec = &field.decomposition;
    let (r, k, perimeter) = (dec.r, field.k, dec.perimeter);
    let f = &field.boundary;
    let integrals = extension_integrals(field);
    let l1 = f.l1();
    let l2_squared = f.l2_squared();
    let energy = f.energy();

    let ineq1 = Comparison::le(l2_squared, 4.0 / r * integrals.i2);
    let ineq2 = Comparison::le(integrals.i1, 0.5 * r * l1);
    let ineq3 = Comparison::le(integrals.id, (0.5 * r + perimeter * perimeter / (4.0 * r)) * energy);

    let n = dec.len();
    let corners = f.corner_values();
    let triangle_dirichlet: Vec<Comparison> = (0..n)
        .map(|i| {
            let t = &dec.triangles[i];
            let (bound, magnitude) =
                triangle_dirichlet_bound(t, r, k, &integrals.triangles[i], corners[i], corners[(i + 1) % n]);
            Comparison::le_terms(integrals.triangles[i].id, bound, magnitude)
        })
        .collect();
    let m = dec.m();
    let sum_terms = [
        perimeter * k * k / r,
        -2.0 * k / r * f.integral(),
        l2_squared / r,
        (0.5 * r + m * m / (2.0 * r)) * energy,
    ];
    let dirichlet_sum = Comparison::le_terms(
        integrals.id,
        sum_terms.iter().sum(),
        sum_terms.iter().map(|x| x.abs()).sum(),
    );
    let l1_identity_error = dec
        .triangles
        .iter()
        .zip(&integrals.triangles)
        .map(|(t, ti)| {
            let expected = r / 3.0 * ti.side_l1 + t.length * k * r / 6.0;
            let scale = expected.abs().max(f64::MIN_POSITIVE);
            (ti.i1 - expected).abs() / scale
        })
        .fold(0.0, f64::max);
    let l2_lower_bounds: Vec<Comparison> = integrals
        .triangles
        .iter()
        .map(|ti| Comparison::le(r / 4.0 * ti.side_l2_squared, ti.i2))
        .collect();
    let pass = ineq1.pass
        && ineq2.pass
        && ineq3.pass
        && dirichlet_sum.pass
        && triangle_dirichlet.iter().all(|c| c.pass)
        && l2_lower_bounds.iter().all(|c| c.pass)
        && l1_identity_error <= 1e-10;
    ExtensionReport {
        k,
        r,
        perimeter,
        m,
        integrals,
        ineq1,
        ineq2,
        ineq3,
        triangle_dirichlet,
        dirichlet_sum,
        l1_identity_error,
        l2_lower_bounds,
        pass,
    }
}
