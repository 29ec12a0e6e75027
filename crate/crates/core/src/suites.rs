//! Seeded randomized runs of the extension, lift and Nash checks.
//!
//! Every sample draws from its own ChaCha stream of the run seed, so a run
//! is reproducible and independent of the thread count.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{beta2, nash_ratio, BoundsError, NashRatio};
use crate::constants::BETA1;
use crate::euler_lift::{collapse_outer, euler_tour, evenize, nash1_in_ball, LiftError};
use crate::extension::{verify_extension_bounds, ExtensionError};
use crate::functions::{random_test_function, FormSpec, FunctionError, GraphFunction, LoopFunction, Mesh};
use crate::geometry::{Point, Polygon, TilingKind};
use crate::skeleton::{ball_subgraph, vertex_distances, MetricGraph};

/// Failing sample indices kept in a summary.
const MAX_LISTED: usize = 20;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// A random piecewise-linear nonnegative loop on a polygon with the given
/// side lengths. One sample in ten is constant, and corners are zeroed at
/// random so that both branches of `k` get exercised.
pub fn random_loop<R: Rng>(rng: &mut R, side_lengths: &[f64]) -> LoopFunction {
    let n = side_lengths.len();
    if rng.random_bool(0.1) {
        let c = rng.random::<f64>();
        return LoopFunction::from_sides(side_lengths.to_vec(), vec![vec![c, c]; n]).expect("constant loop");
    }
    let zero_corners = rng.random_bool(0.3);
    let corners: Vec<f64> = (0..n)
        .map(|_| if zero_corners && rng.random_bool(0.5) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let mut nodes = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for (i, &l) in side_lengths.iter().enumerate() {
        let interior = rng.random_range(0..=6usize);
        let mut offsets: Vec<f64> = (0..interior).map(|_| l * rng.random::<f64>()).collect();
        offsets.sort_by(f64::total_cmp);
        offsets.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * l);
        offsets.retain(|&x| x > 1e-9 * l && x < l * (1.0 - 1e-9));
        let mut side_nodes = vec![0.0];
        side_nodes.extend(offsets);
        side_nodes.push(l);
        let mut side_values = vec![corners[i]];
        side_values.extend((2..side_nodes.len()).map(|_| 2.0 * rng.random::<f64>()));
        side_values.push(corners[(i + 1) % n]);
        nodes.push(side_nodes);
        values.push(side_values);
    }
    LoopFunction::from_side_nodes(side_lengths.to_vec(), nodes, values).expect("corners are shared")
}

/// A tile of the given kind, randomly scaled, rotated and translated.
pub fn random_tile<R: Rng>(rng: &mut R, kind: TilingKind) -> Polygon {
    let scale = 0.25 + 3.75 * rng.random::<f64>();
    let angle = std::f64::consts::TAU * rng.random::<f64>();
    let shift = Point::new(20.0 * rng.random::<f64>() - 10.0, 20.0 * rng.random::<f64>() - 10.0);
    kind.tile(scale).moved(angle, shift)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSummary {
    pub label: String,
    pub samples: usize,
    pub passed: usize,
    /// Samples whose Ineq3 right side vanishes (constant boundary data).
    pub degenerate: usize,
    pub max_l1_identity_error: f64,
    /// Largest ratio seen for each of the three inequalities.
    pub max_ratios: [f64; 3],
    pub failures: Vec<usize>,
}

impl ExtensionSummary {
    pub fn pass(&self) -> bool {
        self.passed == self.samples
    }
}

/// Random loops on randomly placed tiles of one regular kind.
pub fn extension_suite(kind: TilingKind, samples: usize, seed: u64) -> Result<ExtensionSummary, ExtensionError> {
    run_extension(kind.to_string(), samples, seed, |rng| random_tile(rng, kind))
}

/// Random loops on polygons drawn from `polygons`.
pub fn extension_suite_on(
    label: &str,
    polygons: &[Polygon],
    samples: usize,
    seed: u64,
) -> Result<ExtensionSummary, ExtensionError> {
    run_extension(label.to_string(), samples, seed, |rng| {
        polygons[rng.random_range(0..polygons.len())].clone()
    })
}

fn run_extension(
    label: String,
    samples: usize,
    seed: u64,
    tile: impl Fn(&mut ChaCha8Rng) -> Polygon + Sync,
) -> Result<ExtensionSummary, ExtensionError> {
    let reports: Vec<_> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let polygon = tile(&mut rng);
            let f = random_loop(&mut rng, &polygon.side_lengths());
            verify_extension_bounds(&polygon, &f)
        })
        .collect::<Result<_, _>>()?;
    let mut summary = ExtensionSummary {
        label,
        samples,
        passed: 0,
        degenerate: 0,
        max_l1_identity_error: 0.0,
        max_ratios: [0.0; 3],
        failures: Vec::new(),
    };
    for (i, r) in reports.iter().enumerate() {
        if r.pass {
            summary.passed += 1;
        } else if summary.failures.len() < MAX_LISTED {
            summary.failures.push(i);
        }
        if r.ineq3.is_degenerate() {
            summary.degenerate += 1;
        }
        summary.max_l1_identity_error = summary.max_l1_identity_error.max(r.l1_identity_error);
        for (slot, c) in summary.max_ratios.iter_mut().zip([&r.ineq1, &r.ineq2, &r.ineq3]) {
            if let Some(ratio) = c.ratio {
                *slot = slot.max(ratio);
            }
        }
    }
    Ok(summary)
}

/// Vertices whose distance to the window rim exceeds `margin`.
pub fn interior_vertices(g: &MetricGraph, margin: f64) -> Vec<usize> {
    let rim: Vec<(usize, f64)> = g.boundary_vertices().map(|v| (v, 0.0)).collect();
    let clearance = vertex_distances(g, &rim);
    (0..g.vertex_count())
        .filter(|&v| clearance[v] > margin && g.degree(v) > 0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftSummary {
    pub samples: usize,
    pub passed: usize,
    pub degenerate: usize,
    /// Every evenized multigraph had only even degrees.
    pub all_even: bool,
    /// Every tour used each multigraph edge exactly once.
    pub tours_exact: bool,
    /// Largest number of times one graph edge was walked.
    pub max_edge_use: usize,
    /// Largest `lifted / graph` ratio for `L¹`, `L²` squared and energy.
    pub max_doubling: [f64; 3],
    pub max_ratio: f64,
    pub failures: Vec<usize>,
}

impl LiftSummary {
    pub fn pass(&self) -> bool {
        self.passed == self.samples && self.all_even && self.tours_exact && self.max_edge_use <= 2
    }
}

struct LiftSample {
    even: bool,
    exact: bool,
    report: crate::euler_lift::Nash1Report,
}

fn lift_sample(mesh: &Arc<Mesh>, centers: &[usize], max_radius: f64, seed: u64, i: usize) -> Result<LiftSample, LiftError> {
    let g = mesh.graph();
    let mut rng = sample_rng(seed, i);
    let center = centers[rng.random_range(0..centers.len())];
    let radius = g.min_edge_length() * 0.6 + rng.random::<f64>() * (max_radius - g.min_edge_length() * 0.6);
    let ball = ball_subgraph(g, center, radius)?;
    let collapsed = collapse_outer(&ball)?;
    let (even_graph, _) = evenize(&collapsed)?;
    let even = even_graph.odd_vertices().is_empty();
    let tour = euler_tour(&even_graph, even_graph.v_out())?;
    let mut used = vec![0usize; even_graph.edge_count()];
    for step in &tour {
        used[step.edge] += 1;
    }
    let exact = used.iter().all(|&u| u == 1);
    let f = random_test_function(mesh, &mut rng, center, radius).map_err(|e| match e {
        FunctionError::Graph(g) => LiftError::Graph(g),
        _ => LiftError::SupportTouchesBoundary,
    })?;
    let report = nash1_in_ball(&f, &ball)?;
    Ok(LiftSample { even, exact, report })
}

/// Random balls of radius up to `max_radius` around vertices clear of the
/// window rim, each carrying a random test function supported inside.
pub fn lift_suite(mesh: &Arc<Mesh>, samples: usize, max_radius: f64, seed: u64) -> Result<LiftSummary, LiftError> {
    let g = mesh.graph();
    let centers = interior_vertices(g, max_radius + g.cell_diameter());
    if centers.is_empty() {
        return Err(LiftError::SupportTouchesBoundary);
    }
    let results: Vec<LiftSample> = (0..samples)
        .into_par_iter()
        .map(|i| lift_sample(mesh, &centers, max_radius, seed, i))
        .collect::<Result<_, _>>()?;
    let mut summary = LiftSummary {
        samples,
        passed: 0,
        degenerate: 0,
        all_even: true,
        tours_exact: true,
        max_edge_use: 0,
        max_doubling: [0.0; 3],
        max_ratio: 0.0,
        failures: Vec::new(),
    };
    for (i, s) in results.iter().enumerate() {
        summary.all_even &= s.even;
        summary.tours_exact &= s.exact;
        let r = &s.report;
        if r.pass {
            summary.passed += 1;
        } else if summary.failures.len() < MAX_LISTED {
            summary.failures.push(i);
        }
        if r.is_degenerate() {
            summary.degenerate += 1;
        }
        summary.max_edge_use = summary.max_edge_use.max(r.max_edge_use);
        for (slot, c) in summary.max_doubling.iter_mut().zip(&r.doubling) {
            if c.rhs > 0.0 {
                *slot = slot.max(2.0 * c.lhs / c.rhs);
            }
        }
        summary.max_ratio = summary.max_ratio.max(r.ratio.unwrap_or(0.0));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashSample {
    pub index: usize,
    pub center: usize,
    pub radius: f64,
    pub ratio1: NashRatio,
    pub ratio2: NashRatio,
    /// Nash ratio reached through the Euler-tour lift, when it applies.
    pub lift_ratio: Option<f64>,
    pub lift_pass: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashSummary {
    pub samples: usize,
    pub passed: usize,
    pub degenerate: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub max_ratio1: f64,
    pub max_ratio2: f64,
    pub failures: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub records: Vec<NashSample>,
}

impl NashSummary {
    pub fn pass(&self) -> bool {
        self.passed == self.samples
    }
}

#[derive(Clone, Debug)]
pub struct NashSuiteOptions {
    pub samples: usize,
    pub seed: u64,
    /// Largest support radius, in multiples of the shortest edge.
    pub max_radius: f64,
    pub form: FormSpec,
    /// Also run every sample through the Euler-tour lift.
    pub lift: bool,
    /// Keep the per-sample records in the summary.
    pub keep_records: bool,
}

impl Default for NashSuiteOptions {
    fn default() -> Self {
        Self {
            samples: 100,
            seed: 0,
            max_radius: 3.0,
            form: FormSpec::plain(),
            lift: true,
            keep_records: false,
        }
    }
}

/// Vertices around which the Nash suite places supports.
pub fn nash_centers(g: &MetricGraph, options: &NashSuiteOptions) -> Vec<usize> {
    interior_vertices(g, options.max_radius * g.min_edge_length())
}

/// The centre, radius and test function of sample `index`.
pub fn nash_sample_function(
    mesh: &Arc<Mesh>,
    centers: &[usize],
    options: &NashSuiteOptions,
    index: usize,
) -> Result<(usize, f64, GraphFunction), FunctionError> {
    let mut rng = sample_rng(options.seed, index);
    let center = centers[rng.random_range(0..centers.len())];
    let unit = mesh.graph().min_edge_length();
    let radius = unit * (0.6 + rng.random::<f64>() * (options.max_radius - 0.6));
    let f = random_test_function(mesh, &mut rng, center, radius)?;
    Ok((center, radius, f))
}

fn nash_sample(
    mesh: &Arc<Mesh>,
    centers: &[usize],
    options: &NashSuiteOptions,
    beta: f64,
    index: usize,
) -> Result<NashSample, BoundsError> {
    let g = mesh.graph();
    let (center, radius, f) = nash_sample_function(mesh, centers, options, index)?;
    let ratio1 = nash_ratio(&f, 1, BETA1, &options.form)?;
    let ratio2 = nash_ratio(&f, 2, beta, &options.form)?;
    let (lift_ratio, lift_pass) = if options.lift {
        let ball = ball_subgraph(g, center, radius)?;
        match nash1_in_ball(&f, &ball) {
            Ok(r) => (r.ratio, r.pass),
            Err(LiftError::Graph(e)) => return Err(e.into()),
            Err(_) => (None, false),
        }
    } else {
        (None, true)
    };
    Ok(NashSample {
        index,
        center,
        radius,
        ratio1,
        ratio2,
        lift_ratio,
        lift_pass,
        pass: ratio1.passes() && ratio2.passes() && lift_pass,
    })
}

/// Random nonnegative compactly supported functions through the one- and
/// two-dimensional Nash inequalities, with `β₂` from the tiling constants.
pub fn nash_suite(mesh: &Arc<Mesh>, beta2_value: f64, options: &NashSuiteOptions) -> Result<NashSummary, BoundsError> {
    let g = mesh.graph();
    let centers = nash_centers(g, options);
    if centers.is_empty() {
        return Err(FunctionError::SupportTouchesBoundary {
            radius: options.max_radius * g.min_edge_length(),
            clearance: 0.0,
        }
        .into());
    }
    let records: Vec<NashSample> = (0..options.samples)
        .into_par_iter()
        .map(|i| nash_sample(mesh, &centers, options, beta2_value, i))
        .collect::<Result<_, _>>()?;
    let mut summary = NashSummary {
        samples: options.samples,
        passed: 0,
        degenerate: 0,
        beta1: BETA1,
        beta2: beta2_value,
        max_ratio1: 0.0,
        max_ratio2: 0.0,
        failures: Vec::new(),
        records: Vec::new(),
    };
    for s in &records {
        if s.pass {
            summary.passed += 1;
        } else if summary.failures.len() < MAX_LISTED {
            summary.failures.push(s.index);
        }
        if s.ratio1 == NashRatio::Degenerate {
            summary.degenerate += 1;
        }
        summary.max_ratio1 = summary.max_ratio1.max(s.ratio1.value().unwrap_or(0.0));
        summary.max_ratio2 = summary.max_ratio2.max(s.ratio2.value().unwrap_or(0.0));
    }
    if options.keep_records {
        summary.records = records;
    }
    Ok(summary)
}

/// [`nash_suite`] with `β₂` computed from the graph's tiling constants.
pub fn nash_suite_for(
    mesh: &Arc<Mesh>,
    constants: &crate::geometry::TilingConstants,
    options: &NashSuiteOptions,
) -> Result<NashSummary, BoundsError> {
    nash_suite(mesh, beta2(constants).value, options)
}
