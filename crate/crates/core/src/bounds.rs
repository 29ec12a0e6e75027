//! End-to-end evaluation of the Nash inequalities, the ultracontractive
//! two-regime bound, the transition time and the Gaussian kernel bound.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::Comparison;
use crate::constants::{ALPHA2, BETA1, GAMMA1};
use crate::functions::{dirichlet_energy, norms, FormSpec, FunctionError, GraphFunction};
use crate::geometry::{tiling_constants, Tiling, TilingConstants};
use crate::semigroup::{
    front_clearance, heat_kernel_columns, sup_norm_1_to_inf, DiscreteLaplacian, Scheme, SemigroupError,
    DIAGONAL_REDUCTION,
};
use crate::skeleton::{boundary_clearance, distances_from, GraphPoint, MetricGraph, SkeletonError};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Discretization allowance on the ultracontractive bound.
pub const ULTRA_ALLOWANCE: f64 = 0.05;

/// Largest `d²/t` sampled by the Gaussian check.
pub const GAUSS_MAX_EXPONENT: f64 = 25.0;

/// Relative floor below which kernel values count as negative.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("Nash dimension must be 1 or 2, got {0}")]
    InvalidDimension(u8),
    #[error("test function takes the negative value {0}")]
    NegativeFunction(f64),
    #[error("no Gaussian samples: every (source, time) pair failed the clearance rule")]
    NoGaussianSamples,
    #[error(transparent)]
    Function(#[from] FunctionError),
    #[error(transparent)]
    Semigroup(#[from] SemigroupError),
    #[error(transparent)]
    Graph(#[from] SkeletonError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Beta2 {
    /// `(H²/(2h²)) (H + M²/(2h))`.
    pub value: f64,
    /// `4 α₂ (H²/h²) (H + M²/(2h))`.
    pub sharp: f64,
}

pub fn beta2(c: &TilingConstants) -> Beta2 {
    let shape = c.big_h + c.m * c.m / (2.0 * c.h);
    let ratio = c.big_h * c.big_h / (c.h * c.h);
    Beta2 {
        value: ratio / 2.0 * shape,
        sharp: 4.0 * ALPHA2 * ratio * shape,
    }
}

/// `t* = β²/3`, where the two ultracontractive regimes meet.
pub fn transition_time(beta: f64) -> f64 {
    beta * beta / 3.0
}

/// `min(√3 t^{-1/2}, β t^{-1})` and which branch is smaller.
pub fn ultracontractive_bound(t: f64, beta: f64) -> (f64, Regime) {
    let one = GAMMA1 / t.sqrt();
    let two = beta / t;
    if one <= two {
        (one, Regime::OneDimensional)
    } else {
        (two, Regime::TwoDimensional)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum NashRatio {
    Ratio(f64),
    Degenerate,
}

impl NashRatio {
    pub fn value(&self) -> Option<f64> {
        match self {
            NashRatio::Ratio(r) => Some(*r),
            NashRatio::Degenerate => None,
        }
    }

    pub fn passes(&self) -> bool {
        self.value().is_none_or(|r| r <= 1.0)
    }
}

/// `‖f‖₂^{2+4/μ} / (β Q(f) ‖f‖₁^{4/μ})` for the form `form`.
pub fn nash_ratio(f: &GraphFunction, mu: u8, beta: f64, form: &FormSpec) -> Result<NashRatio, BoundsError> {
    if mu != 1 && mu != 2 {
        return Err(BoundsError::InvalidDimension(mu));
    }
    let min = f.min();
    if min < 0.0 {
        return Err(BoundsError::NegativeFunction(min));
    }
    let n = norms(f);
    let q = dirichlet_energy(f, form)?;
    let (num, den) = if mu == 1 {
        (n.l2.powi(6), beta * q * n.l1.powi(4))
    } else {
        (n.l2.powi(4), beta * q * n.l1.powi(2))
    };
    Ok(if den > 0.0 { NashRatio::Ratio(num / den) } else { NashRatio::Degenerate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OneDimensional,
    TwoDimensional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UltraRecord {
    pub t: f64,
    pub estimate: f64,
    pub bound: f64,
    pub regime: Regime,
    pub ratio: f64,
    /// `ratio ≤ 1 + ULTRA_ALLOWANCE`, or the record is truncation-limited.
    pub pass: bool,
    pub truncation_limited: bool,
    pub argmax: GraphPoint,
    pub sources_used: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UltraReport {
    pub beta: f64,
    pub t_star: f64,
    pub records: Vec<UltraRecord>,
    /// Time where the log-log slope of the estimate first falls below
    /// `-3/4`, halfway between the two regimes.
    pub observed_crossover: Option<f64>,
    pub reduction: String,
}

/// Default sources: the vertex nearest the window centre, the midpoint of
/// its lowest-id edge and the quarter point of that edge.
pub fn core_sources(g: &MetricGraph, center: crate::geometry::Point) -> Vec<GraphPoint> {
    let v = (0..g.vertex_count())
        .min_by(|&a, &b| {
            g.vertex(a)
                .position
                .distance(center)
                .total_cmp(&g.vertex(b).position.distance(center))
                .then(a.cmp(&b))
        })
        .expect("graph has vertices");
    let (e, _) = g.incident(v)[0];
    let edge = g.edge(e);
    let from_v = |s: f64| if edge.ends[0] == v { s } else { edge.length - s };
    vec![
        g.vertex_point(v).expect("vertex has an edge"),
        GraphPoint::new(e, 0.5 * edge.length),
        GraphPoint::new(e, from_v(0.25 * edge.length)),
    ]
}

pub fn ultracontractive_check(
    l: &DiscreteLaplacian,
    times: &[f64],
    sources: &[GraphPoint],
    beta: f64,
    scheme: &Scheme,
) -> Result<UltraReport, BoundsError> {
    let estimates = sup_norm_1_to_inf(l, times, sources, scheme)?;
    let records: Vec<UltraRecord> = estimates
        .into_iter()
        .map(|e| {
            let (bound, regime) = ultracontractive_bound(e.t, beta);
            let ratio = e.estimate / bound;
            UltraRecord {
                t: e.t,
                estimate: e.estimate,
                bound,
                regime,
                ratio,
                pass: e.truncation_limited || ratio <= 1.0 + ULTRA_ALLOWANCE,
                truncation_limited: e.truncation_limited,
                argmax: e.argmax,
                sources_used: e.sources_used,
                warnings: e.warnings,
            }
        })
        .collect();
    let usable: Vec<&UltraRecord> = records.iter().filter(|r| !r.truncation_limited).collect();
    let observed_crossover = usable.windows(2).find_map(|w| {
        let (a, b) = (w[0], w[1]);
        let slope = (b.estimate.ln() - a.estimate.ln()) / (b.t.ln() - a.t.ln());
        (slope < -0.75).then(|| (a.t * b.t).sqrt())
    });
    Ok(UltraReport {
        beta,
        t_star: transition_time(beta),
        records,
        observed_crossover,
        reduction: DIAGONAL_REDUCTION.to_string(),
    })
}

/// `min(t^{-1/2}(1+d²/t)^{1/2}, t^{-1}(1+d²/t))`.
pub fn gaussian_shape(t: f64, d: f64) -> f64 {
    let q = 1.0 + d * d / t;
    (q.sqrt() / t.sqrt()).min(q / t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSample {
    pub source: GraphPoint,
    pub target: GraphPoint,
    pub t: f64,
    pub distance: f64,
    pub kernel: f64,
    pub shape: f64,
    /// `k e^{d²/(4t)} / shape`.
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianReport {
    /// Largest sampled `η`.
    pub eta: f64,
    pub samples: Vec<GaussianSample>,
    /// Smallest kernel value over all nodes of all columns, relative to
    /// the column maximum.
    pub min_relative_kernel: f64,
    pub positivity_pass: bool,
    /// `(source, t)` pairs skipped by the clearance rule.
    pub excluded: Vec<(GraphPoint, f64)>,
    pub warnings: Vec<String>,
}

impl GaussianReport {
    /// Per-sample `η_sample / η`.
    pub fn ratios(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| s.eta / self.eta)
    }
}

/// Vertices and edge midpoints.
pub fn default_targets(g: &MetricGraph) -> Vec<GraphPoint> {
    let mut out: Vec<GraphPoint> = (0..g.vertex_count()).filter_map(|v| g.vertex_point(v).ok()).collect();
    out.extend(g.edges().iter().map(|e| GraphPoint::new(e.id, 0.5 * e.length)));
    out
}

/// Fits `η` in `k(t,x,y) ≤ η e^{-d²/(4t)} shape(t, d)` over all sources,
/// targets with `d²/t ≤ 25`, and times passing the clearance rule.
pub fn gaussian_check(
    l: &DiscreteLaplacian,
    sources: &[GraphPoint],
    targets: Option<&[GraphPoint]>,
    times: &[f64],
    scheme: &Scheme,
) -> Result<GaussianReport, BoundsError> {
    let g = l.mesh().graph();
    let owned;
    let targets = match targets {
        Some(t) => t,
        None => {
            owned = default_targets(g);
            &owned
        }
    };
    let cell = g.cell_diameter();
    let per_source: Vec<(Vec<GaussianSample>, f64, Vec<(GraphPoint, f64)>, Vec<String>)> = sources
        .par_iter()
        .map(|&x| {
            let clearance = boundary_clearance(g, x)?;
            let (ok, skipped): (Vec<f64>, Vec<f64>) =
                times.iter().partition(|&&t| clearance >= front_clearance(t, cell));
            let excluded = skipped.into_iter().map(|t| (x, t)).collect();
            let mut samples = Vec::new();
            let mut min_rel = f64::INFINITY;
            let mut warnings = Vec::new();
            if ok.is_empty() {
                return Ok((samples, min_rel, excluded, warnings));
            }
            let dist = distances_from(g, x)?;
            let target_distances: Vec<f64> = targets.iter().map(|&y| dist.to_point(g, y)).collect();
            for col in heat_kernel_columns(l, x, &ok, scheme)? {
                let t = col.state.time;
                let values = col.state.function.values();
                let peak = values.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
                min_rel = min_rel.min(values.iter().copied().fold(f64::INFINITY, f64::min) / peak);
                warnings.extend(col.warnings.iter().cloned());
                for (&y, &d) in targets.iter().zip(&target_distances) {
                    if d * d / t > GAUSS_MAX_EXPONENT {
                        continue;
                    }
                    let k = col.state.function.evaluate(y);
                    let shape = gaussian_shape(t, d);
                    samples.push(GaussianSample {
                        source: x,
                        target: y,
                        t,
                        distance: d,
                        kernel: k,
                        shape,
                        eta: k * (d * d / (4.0 * t)).exp() / shape,
                    });
                }
            }
            Ok((samples, min_rel, excluded, warnings))
        })
        .collect::<Result<_, BoundsError>>()?;
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut min_relative_kernel = f64::INFINITY;
    for (s, m, e, w) in per_source {
        samples.extend(s);
        excluded.extend(e);
        min_relative_kernel = min_relative_kernel.min(m);
        for msg in w {
            if !warnings.contains(&msg) {
                warnings.push(msg);
            }
        }
    }
    if samples.is_empty() {
        return Err(BoundsError::NoGaussianSamples);
    }
    let eta = samples.iter().map(|s| s.eta).fold(f64::NEG_INFINITY, f64::max);
    Ok(GaussianReport {
        eta,
        samples,
        min_relative_kernel,
        positivity_pass: min_relative_kernel >= -POSITIVITY_FLOOR,
        excluded,
        warnings,
    })
}

/// `|η_other / η_base - 1| ≤ 0.1`.
pub fn eta_stable(base: f64, other: f64) -> bool {
    base.is_finite() && other.is_finite() && base > 0.0 && (other / base - 1.0).abs() <= 0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub lambda: f64,
    pub beta2: f64,
    pub t_star: f64,
    /// `t*(λ) / t*(1)`.
    pub ratio: f64,
    /// `ratio = λ²` to `1e-12` relative.
    pub pass: bool,
}

/// Transition time of each dilated copy, recomputed from the dilated
/// polygons.
pub fn transition_report(tiling: &Tiling, dilations: &[f64]) -> Vec<TransitionRow> {
    let base = transition_time(beta2(&tiling_constants(tiling)).value);
    dilations
        .iter()
        .map(|&lambda| {
            let b = beta2(&tiling_constants(&tiling.dilated(lambda))).value;
            let t_star = transition_time(b);
            let ratio = t_star / base;
            TransitionRow {
                lambda,
                beta2: b,
                t_star,
                ratio,
                pass: (ratio - lambda * lambda).abs() <= 1e-12 * lambda * lambda,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConstants {
    pub h: f64,
    #[serde(rename = "H")]
    pub big_h: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub l_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta2_sharp: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub t_star: f64,
}

impl ReportConstants {
    pub fn new(c: &TilingConstants) -> Self {
        let b = beta2(c);
        Self {
            h: c.h,
            big_h: c.big_h,
            m: c.m,
            l_min: c.l_min,
            beta1: BETA1,
            beta2: b.value,
            beta2_sharp: b.sharp,
            gamma1: GAMMA1,
            gamma2: b.value,
            t_star: transition_time(b.value),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    /// `pass` means `ratio ≤ 1 + tolerance`, or the record is degenerate.
    pub tolerance: f64,
    pub pass: bool,
    pub degenerate: bool,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl CheckRecord {
    pub fn from_comparison(name: impl Into<String>, c: &Comparison) -> Self {
        Self {
            name: name.into(),
            lhs: c.lhs,
            rhs: c.rhs,
            ratio: c.ratio,
            tolerance: 0.0,
            pass: c.pass,
            degenerate: c.is_degenerate(),
            metadata: serde_json::Value::Null,
        }
    }

    /// A record comparing `lhs ≤ (1 + tolerance) rhs`.
    pub fn with_tolerance(name: impl Into<String>, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let ratio = (rhs != 0.0).then(|| lhs / rhs);
        Self {
            name: name.into(),
            lhs,
            rhs,
            ratio,
            tolerance,
            pass: ratio.map_or(lhs <= 0.0, |r| r <= 1.0 + tolerance),
            degenerate: ratio.is_none(),
            metadata: serde_json::Value::Null,
        }
    }

    pub fn with_metadata(mut self, metadata: serde_json::Value) -> Self {
        self.metadata = metadata;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub schema_version: u32,
    pub tiling: String,
    pub constants: ReportConstants,
    pub checks: Vec<CheckRecord>,
    pub eta: Option<f64>,
    pub notes: Vec<String>,
}

impl BoundsReport {
    pub fn new(tiling: &str, constants: &TilingConstants) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tiling: tiling.to_string(),
            constants: ReportConstants::new(constants),
            checks: Vec::new(),
            eta: None,
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, record: CheckRecord) {
        self.checks.push(record);
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let c = &self.constants;
        let mut out = String::new();
        let _ = writeln!(out, "tiling {}", self.tiling);
        let _ = writeln!(
            out,
            "h = {:.6}  H = {:.6}  M = {:.6}  beta1 = {}  beta2 = {:.6} (sharp {:.6})  t* = {:.6}",
            c.h, c.big_h, c.m, c.beta1, c.beta2, c.beta2_sharp, c.t_star
        );
        if let Some(eta) = self.eta {
            let _ = writeln!(out, "eta = {eta:.6}");
        }
        let width = self.checks.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>14}  {:>12}  result", "check", "lhs", "rhs", "ratio");
        for r in &self.checks {
            let ratio = r.ratio.map_or_else(|| "degenerate".to_string(), |x| format!("{x:.6e}"));
            let verdict = if r.pass { "pass" } else { "FAIL" };
            let _ = writeln!(out, "{:<width$}  {:>14.6e}  {:>14.6e}  {:>12}  {verdict}", r.name, r.lhs, r.rhs, ratio);
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

/// CSV rows `t,bound,estimate,regime` for plotting.
pub fn ultra_csv(report: &UltraReport) -> String {
    let mut out = String::from("t,bound,estimate,regime\n");
    for r in &report.records {
        let regime = match r.regime {
            Regime::OneDimensional => "one_dimensional",
            Regime::TwoDimensional => "two_dimensional",
        };
        let _ = writeln!(out, "{},{},{},{}", r.t, r.bound, r.estimate, regime);
    }
    out
}
