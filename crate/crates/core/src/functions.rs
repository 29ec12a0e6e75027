//! Continuous piecewise-linear functions on a metric graph and on polygon
//! boundary loops, with exact norms and Dirichlet energies.
//!
//! Every edge `e` carries a uniform mesh of `n_e` subintervals. Degrees of
//! freedom are numbered vertices first, then the interior nodes of edge 0,
//! edge 1, and so on, so vertex values are shared storage and continuity at
//! vertices holds by construction.

use std::io::{self, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Polygon;
use crate::skeleton::{distances_from, vertex_distances, GraphPoint, MetricGraph, SkeletonError};

#[derive(Debug, Error)]
pub enum FunctionError {
    #[error("mesh size must be positive and finite, got {0}")]
    InvalidMeshSize(f64),
    #[error("expected {expected} nodal values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("coefficient not uniformly elliptic: {0}")]
    NotElliptic(String),
    #[error("invalid Robin weights: {0}")]
    InvalidRobin(String),
    #[error("functions live on different meshes")]
    MeshMismatch,
    #[error("loop data discontinuous at corner {corner}: {left} vs {right}")]
    LoopDiscontinuity { corner: usize, left: f64, right: f64 },
    #[error("loop side {side} needs at least two nodal values")]
    ShortSide { side: usize },
    #[error("support radius {radius} reaches the window rim (clearance {clearance})")]
    SupportTouchesBoundary { radius: f64, clearance: f64 },
    #[error(transparent)]
    Graph(#[from] SkeletonError),
}

/// Uniform per-edge subdivision of a metric graph.
#[derive(Debug)]
pub struct Mesh {
    graph: Arc<MetricGraph>,
    mesh_size: f64,
    subdivisions: Vec<usize>,
    interior_start: Vec<usize>,
    dofs: usize,
}

impl Mesh {
    /// Each edge gets the fewest equal subintervals of length `<= mesh_size`.
    pub fn new(graph: Arc<MetricGraph>, mesh_size: f64) -> Result<Arc<Self>, FunctionError> {
        if !(mesh_size > 0.0 && mesh_size.is_finite()) {
            return Err(FunctionError::InvalidMeshSize(mesh_size));
        }
        let mut subdivisions = Vec::with_capacity(graph.edge_count());
        let mut interior_start = Vec::with_capacity(graph.edge_count());
        let mut next = graph.vertex_count();
        for e in graph.edges() {
            let n = ((e.length / mesh_size) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            subdivisions.push(n);
            interior_start.push(next);
            next += n - 1;
        }
        Ok(Arc::new(Self {
            graph,
            mesh_size,
            subdivisions,
            interior_start,
            dofs: next,
        }))
    }

    /// Default resolution: a sixteenth of the shortest edge.
    pub fn with_default_size(graph: Arc<MetricGraph>) -> Result<Arc<Self>, FunctionError> {
        let h = graph.min_edge_length() / 16.0;
        Self::new(graph, h)
    }

    pub fn graph(&self) -> &Arc<MetricGraph> {
        &self.graph
    }

    pub fn mesh_size(&self) -> f64 {
        self.mesh_size
    }

    pub fn dof_count(&self) -> usize {
        self.dofs
    }

    pub fn subdivisions(&self, edge: usize) -> usize {
        self.subdivisions[edge]
    }

    pub fn step(&self, edge: usize) -> f64 {
        self.graph.edge(edge).length / self.subdivisions[edge] as f64
    }

    /// Dof of node `j` (0..=n_e) along `edge`.
    pub fn node_dof(&self, edge: usize, j: usize) -> usize {
        let n = self.subdivisions[edge];
        let ends = self.graph.edge(edge).ends;
        if j == 0 {
            ends[0]
        } else if j == n {
            ends[1]
        } else {
            self.interior_start[edge] + j - 1
        }
    }

    pub fn edge_dofs(&self, edge: usize) -> impl Iterator<Item = usize> + '_ {
        (0..=self.subdivisions[edge]).map(move |j| self.node_dof(edge, j))
    }

    /// A graph point located at `dof`.
    pub fn dof_point(&self, dof: usize) -> GraphPoint {
        if dof < self.graph.vertex_count() {
            self.graph.vertex_point(dof).expect("vertex has an incident edge")
        } else {
            let edge = self.interior_start.partition_point(|&s| s <= dof) - 1;
            let j = dof - self.interior_start[edge] + 1;
            GraphPoint::new(edge, j as f64 * self.step(edge))
        }
    }

    /// Dof of the mesh node nearest to `p` (ties go to the lower node).
    pub fn nearest_dof(&self, p: GraphPoint) -> usize {
        let h = self.step(p.edge);
        let j = (p.offset / h).round().min(self.subdivisions[p.edge] as f64) as usize;
        self.node_dof(p.edge, j)
    }

    /// Whether `dof` sits exactly (to rounding) at `p`.
    pub fn is_node_at(&self, p: GraphPoint) -> bool {
        let h = self.step(p.edge);
        let x = p.offset / h;
        (x - x.round()).abs() < 1e-9
    }
}

/// A continuous, edgewise piecewise-linear function on a meshed graph.
#[derive(Clone, Debug)]
pub struct GraphFunction {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
}

impl GraphFunction {
    pub fn zeros(mesh: &Arc<Mesh>) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![0.0; mesh.dof_count()],
        }
    }

    pub fn constant(mesh: &Arc<Mesh>, c: f64) -> Self {
        Self {
            mesh: Arc::clone(mesh),
            values: vec![c; mesh.dof_count()],
        }
    }

    pub fn from_values(mesh: &Arc<Mesh>, values: Vec<f64>) -> Result<Self, FunctionError> {
        if values.len() != mesh.dof_count() {
            return Err(FunctionError::LengthMismatch {
                expected: mesh.dof_count(),
                got: values.len(),
            });
        }
        Ok(Self {
            mesh: Arc::clone(mesh),
            values,
        })
    }

    /// Nodal interpolant of `f(point)`.
    pub fn from_fn(mesh: &Arc<Mesh>, mut f: impl FnMut(GraphPoint) -> f64) -> Self {
        let values = (0..mesh.dof_count()).map(|d| f(mesh.dof_point(d))).collect();
        Self {
            mesh: Arc::clone(mesh),
            values,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn graph(&self) -> &MetricGraph {
        &self.mesh.graph
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Nodal values along `edge` from `ends[0]` to `ends[1]`.
    pub fn edge_values(&self, edge: usize) -> Vec<f64> {
        self.mesh.edge_dofs(edge).map(|d| self.values[d]).collect()
    }

    pub fn evaluate(&self, p: GraphPoint) -> f64 {
        let h = self.mesh.step(p.edge);
        let n = self.mesh.subdivisions(p.edge);
        let x = (p.offset / h).clamp(0.0, n as f64);
        let j = (x.floor() as usize).min(n - 1);
        let t = x - j as f64;
        let a = self.values[self.mesh.node_dof(p.edge, j)];
        let b = self.values[self.mesh.node_dof(p.edge, j + 1)];
        a + t * (b - a)
    }

    /// Re-samples onto another mesh of the same graph.
    pub fn interpolate(&self, mesh: &Arc<Mesh>) -> Result<Self, FunctionError> {
        if !Arc::ptr_eq(mesh.graph(), self.mesh.graph()) {
            return Err(FunctionError::MeshMismatch);
        }
        Ok(Self::from_fn(mesh, |p| self.evaluate(p)))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            mesh: Arc::clone(&self.mesh),
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_zero_on_edge(&self, edge: usize) -> bool {
        self.mesh.edge_dofs(edge).all(|d| self.values[d] == 0.0)
    }

    /// Signed integral over the graph.
    pub fn integral(&self) -> f64 {
        self.fold_pieces(|h, a, b| 0.5 * h * (a + b))
    }

    /// `Q(f)`: the plain Dirichlet energy.
    pub fn energy(&self) -> f64 {
        self.fold_pieces(|h, a, b| (b - a) * (b - a) / h)
    }

    fn fold_pieces(&self, piece: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let g = self.graph();
        let mut total = 0.0;
        for e in 0..g.edge_count() {
            let h = self.mesh.step(e);
            let mut prev = self.values[self.mesh.node_dof(e, 0)];
            for j in 1..=self.mesh.subdivisions(e) {
                let cur = self.values[self.mesh.node_dof(e, j)];
                total += piece(h, prev, cur);
                prev = cur;
            }
        }
        total
    }

    /// Writes `edge_id,offset,value` rows for every node of every edge.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "edge_id,offset,value")?;
        for e in 0..self.graph().edge_count() {
            let h = self.mesh.step(e);
            for (j, d) in self.mesh.edge_dofs(e).enumerate() {
                writeln!(out, "{},{:?},{:?}", e, j as f64 * h, self.values[d])?;
            }
        }
        Ok(())
    }
}

/// Exact integral of `|f|` over one linear piece with end values `a`, `b`.
pub(crate) fn piece_abs_integral(h: f64, a: f64, b: f64) -> f64 {
    if a * b >= 0.0 {
        0.5 * h * (a.abs() + b.abs())
    } else {
        0.5 * h * (a * a + b * b) / (a.abs() + b.abs())
    }
}

/// Exact integral of `f²` over one linear piece.
pub(crate) fn piece_square_integral(h: f64, a: f64, b: f64) -> f64 {
    h * (a * a + a * b + b * b) / 3.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

pub fn norms(f: &GraphFunction) -> Norms {
    Norms {
        l1: f.fold_pieces(piece_abs_integral),
        l2: f.fold_pieces(piece_square_integral).sqrt(),
        linf: f.values.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

/// Edgewise diffusion coefficient for the weighted form `∫ α f'g'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conductivity {
    Uniform(f64),
    PerEdge(Vec<f64>),
}

impl Conductivity {
    pub fn value(&self, edge: usize) -> f64 {
        match self {
            Conductivity::Uniform(a) => *a,
            Conductivity::PerEdge(v) => v[edge],
        }
    }

    fn validate(&self, g: &MetricGraph) -> Result<(), FunctionError> {
        let values: &[f64] = match self {
            Conductivity::Uniform(a) => std::slice::from_ref(a),
            Conductivity::PerEdge(v) => {
                if v.len() != g.edge_count() {
                    return Err(FunctionError::NotElliptic(format!(
                        "expected {} edge values, got {}",
                        g.edge_count(),
                        v.len()
                    )));
                }
                v
            }
        };
        match values.iter().position(|a| !(*a > 0.0 && a.is_finite())) {
            Some(i) => Err(FunctionError::NotElliptic(format!("value {} at index {i}", values[i]))),
            None => Ok(()),
        }
    }
}

/// Variants of the Dirichlet form: optional vertex (Robin) weights `b_v`
/// and optional edgewise coefficient `α`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FormSpec {
    pub robin: Option<Vec<f64>>,
    pub alpha: Option<Conductivity>,
}

impl FormSpec {
    pub fn plain() -> Self {
        Self::default()
    }

    pub fn with_robin(mut self, weights: Vec<f64>) -> Self {
        self.robin = Some(weights);
        self
    }

    pub fn with_alpha(mut self, alpha: Conductivity) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn conductivity(&self, edge: usize) -> f64 {
        self.alpha.as_ref().map_or(1.0, |a| a.value(edge))
    }

    pub fn validate(&self, g: &MetricGraph) -> Result<(), FunctionError> {
        if let Some(alpha) = &self.alpha {
            alpha.validate(g)?;
        }
        if let Some(b) = &self.robin {
            if b.len() != g.vertex_count() {
                return Err(FunctionError::InvalidRobin(format!(
                    "expected {} vertex weights, got {}",
                    g.vertex_count(),
                    b.len()
                )));
            }
            if let Some(i) = b.iter().position(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(FunctionError::InvalidRobin(format!("weight {} at vertex {i}", b[i])));
            }
        }
        Ok(())
    }
}

/// `Q(f)` for the given form variant, exact for piecewise-linear `f`.
pub fn dirichlet_energy(f: &GraphFunction, form: &FormSpec) -> Result<f64, FunctionError> {
    let g = f.graph();
    form.validate(g)?;
    let mut total = 0.0;
    for e in 0..g.edge_count() {
        let h = f.mesh.step(e);
        let alpha = form.conductivity(e);
        let vals = f.edge_values(e);
        total += alpha * vals.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0]) / h).sum::<f64>();
    }
    if let Some(b) = &form.robin {
        total += b.iter().zip(&f.values).map(|(w, v)| w * v * v).sum::<f64>();
    }
    Ok(total)
}

/// Random nonnegative test function supported in the ball of radius
/// `radius` around vertex `center`.
///
/// A sum of one to five tent bumps (graph-distance tents with random
/// centres, widths and heights in `(0, 1]`) multiplied by a continuous
/// taper that falls from 1 to 0 over the outer quarter of the ball.
pub fn random_test_function<R: Rng>(
    mesh: &Arc<Mesh>,
    rng: &mut R,
    center: usize,
    radius: f64,
) -> Result<GraphFunction, FunctionError> {
    let g = mesh.graph();
    if center >= g.vertex_count() {
        return Err(SkeletonError::UnknownVertex(center).into());
    }
    let from_center = vertex_distances(g, &[(center, 0.0)]);
    let clearance = g
        .boundary_vertices()
        .map(|v| from_center[v])
        .fold(f64::INFINITY, f64::min);
    if radius >= clearance {
        return Err(FunctionError::SupportTouchesBoundary { radius, clearance });
    }
    let node_distance = |d: &[f64], p: GraphPoint| {
        let e = g.edge(p.edge);
        (d[e.ends[0]] + p.offset).min(d[e.ends[1]] + e.length - p.offset)
    };
    let near: Vec<usize> = (0..g.vertex_count())
        .filter(|&v| from_center[v] < 0.5 * radius)
        .collect();
    let bumps = rng.random_range(1..=5usize);
    let min_width = 2.0 * mesh.mesh_size();
    let mut values = vec![0.0; mesh.dof_count()];
    for _ in 0..bumps {
        let v = near[rng.random_range(0..near.len())];
        let incident = g.incident(v);
        let (e, _) = incident[rng.random_range(0..incident.len())];
        let edge = g.edge(e);
        let reach = (0.5 * radius - from_center[v]).min(edge.length);
        let along = rng.random::<f64>() * reach;
        let offset = if edge.ends[0] == v { along } else { edge.length - along };
        let peak = GraphPoint::new(e, offset);
        let width = min_width + rng.random::<f64>() * (radius - min_width).max(0.0);
        let height = 1.0 - rng.random::<f64>();
        let dist = distances_from(g, peak)?;
        for (d, val) in values.iter_mut().enumerate() {
            let p = mesh.dof_point(d);
            *val += height * (1.0 - dist.to_point(g, p) / width).max(0.0);
        }
    }
    for (d, val) in values.iter_mut().enumerate() {
        let r = node_distance(&from_center, mesh.dof_point(d));
        let taper = ((radius - r) / (0.25 * radius)).clamp(0.0, 1.0);
        *val *= taper;
    }
    Ok(GraphFunction {
        mesh: Arc::clone(mesh),
        values,
    })
}

/// Seeded convenience wrapper around [`random_test_function`].
pub fn random_test_function_seeded(
    mesh: &Arc<Mesh>,
    seed: u64,
    center: usize,
    radius: f64,
) -> Result<GraphFunction, FunctionError> {
    random_test_function(mesh, &mut ChaCha8Rng::seed_from_u64(seed), center, radius)
}

/// A continuous piecewise-linear function on a polygon boundary,
/// parameterized by arclength from the first corner, counterclockwise.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopFunction {
    side_lengths: Vec<f64>,
    /// Per side: node offsets in `[0, l_i]` (first 0, last `l_i`).
    side_nodes: Vec<Vec<f64>>,
    /// Per side: nodal values; the last value of side `i` equals the first
    /// of side `i + 1`.
    side_values: Vec<Vec<f64>>,
}

impl LoopFunction {
    /// Builds a loop from per-side node offsets and values.
    pub fn from_side_nodes(
        side_lengths: Vec<f64>,
        side_nodes: Vec<Vec<f64>>,
        side_values: Vec<Vec<f64>>,
    ) -> Result<Self, FunctionError> {
        let n = side_lengths.len();
        for i in 0..n {
            if side_values[i].len() < 2 || side_nodes[i].len() != side_values[i].len() {
                return Err(FunctionError::ShortSide { side: i });
            }
            let left = *side_values[i].last().unwrap();
            let right = side_values[(i + 1) % n][0];
            if (left - right).abs() > 1e-12 * (1.0 + left.abs().max(right.abs())) {
                return Err(FunctionError::LoopDiscontinuity {
                    corner: (i + 1) % n,
                    left,
                    right,
                });
            }
        }
        Ok(Self {
            side_lengths,
            side_nodes,
            side_values,
        })
    }

    /// Uniformly spaced nodal values on each side, corners included.
    pub fn from_sides(side_lengths: Vec<f64>, side_values: Vec<Vec<f64>>) -> Result<Self, FunctionError> {
        let side_nodes = side_lengths
            .iter()
            .zip(&side_values)
            .map(|(&l, v)| {
                let k = v.len().saturating_sub(1).max(1);
                (0..v.len()).map(|j| l * j as f64 / k as f64).collect()
            })
            .collect();
        Self::from_side_nodes(side_lengths, side_nodes, side_values)
    }

    /// Samples `f(arclength)` at `per_side + 1` uniform nodes on every side.
    pub fn sample(side_lengths: Vec<f64>, per_side: usize, f: impl Fn(f64) -> f64) -> Self {
        let mut start = 0.0;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(side_lengths.len());
        for &l in &side_lengths {
            values.push((0..=per_side).map(|j| f(start + l * j as f64 / per_side as f64)).collect());
            start += l;
        }
        // Shared corners were sampled from the same arclength up to rounding.
        let n = side_lengths.len();
        for i in 0..n {
            let first: f64 = values[(i + 1) % n][0];
            *values[i].last_mut().unwrap() = first;
        }
        Self::from_sides(side_lengths, values).expect("sampled loop is continuous")
    }

    pub fn side_count(&self) -> usize {
        self.side_lengths.len()
    }

    pub fn side_lengths(&self) -> &[f64] {
        &self.side_lengths
    }

    pub fn perimeter(&self) -> f64 {
        self.side_lengths.iter().sum()
    }

    /// Node offsets and values of side `i`, as a function on `[0, l_i]`.
    pub fn side(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.side_nodes[i], &self.side_values[i])
    }

    /// Value at the start corner of each side.
    pub fn corner_values(&self) -> Vec<f64> {
        self.side_values.iter().map(|v| v[0]).collect()
    }

    pub fn min(&self) -> f64 {
        self.side_values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.side_values.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at arclength `s` (taken modulo the perimeter).
    pub fn value_at(&self, s: f64) -> f64 {
        let mut s = s.rem_euclid(self.perimeter());
        for i in 0..self.side_count() {
            if s <= self.side_lengths[i] || i + 1 == self.side_count() {
                return side_value(&self.side_nodes[i], &self.side_values[i], s.min(self.side_lengths[i]));
            }
            s -= self.side_lengths[i];
        }
        unreachable!()
    }

    fn fold_pieces(&self, piece: impl Fn(f64, f64, f64) -> f64) -> f64 {
        let mut total = 0.0;
        for (nodes, vals) in self.side_nodes.iter().zip(&self.side_values) {
            for j in 1..nodes.len() {
                total += piece(nodes[j] - nodes[j - 1], vals[j - 1], vals[j]);
            }
        }
        total
    }

    pub fn integral(&self) -> f64 {
        self.fold_pieces(|h, a, b| 0.5 * h * (a + b))
    }

    pub fn l1(&self) -> f64 {
        self.fold_pieces(piece_abs_integral)
    }

    pub fn l2_squared(&self) -> f64 {
        self.fold_pieces(piece_square_integral)
    }

    /// `∫ (f')²` along the loop.
    pub fn energy(&self) -> f64 {
        self.fold_pieces(|h, a, b| if h > 0.0 { (b - a) * (b - a) / h } else { 0.0 })
    }
}

/// Linear interpolation on one side.
pub(crate) fn side_value(nodes: &[f64], vals: &[f64], x: f64) -> f64 {
    let j = nodes.partition_point(|&n| n <= x).clamp(1, nodes.len() - 1);
    let (x0, x1) = (nodes[j - 1], nodes[j]);
    if x1 == x0 {
        return vals[j];
    }
    let t = ((x - x0) / (x1 - x0)).clamp(0.0, 1.0);
    vals[j - 1] + t * (vals[j] - vals[j - 1])
}

/// Restricts `f` to the boundary of `polygon`, starting at its first corner
/// and running counterclockwise.
pub fn boundary_restriction(f: &GraphFunction, polygon: &Polygon) -> Result<LoopFunction, FunctionError> {
    let g = f.graph();
    let trace = g.trace_polygon(polygon)?;
    let side_lengths = polygon.side_lengths();
    let mut side_nodes = vec![Vec::new(); polygon.len()];
    let mut side_values = vec![Vec::new(); polygon.len()];
    let mut steps = trace.into_iter().peekable();
    for (i, (a, _)) in polygon.sides().enumerate() {
        let mut start = 0.0;
        while start < side_lengths[i] - 1e-9 * side_lengths[i] {
            let Some((e, forward)) = steps.next() else {
                return Err(SkeletonError::UncoveredSide { side: i }.into());
            };
            let h = f.mesh.step(e);
            let mut vals = f.edge_values(e);
            if !forward {
                vals.reverse();
            }
            let skip = usize::from(!side_values[i].is_empty());
            for (j, v) in vals.into_iter().enumerate().skip(skip) {
                side_nodes[i].push(start + j as f64 * h);
                side_values[i].push(v);
            }
            start += g.edge(e).length;
        }
        // Pin the final node on the corner exactly.
        if let Some(last) = side_nodes[i].last_mut() {
            *last = side_lengths[i];
        }
        let _ = a;
    }
    LoopFunction::from_side_nodes(side_lengths, side_nodes, side_values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoincareCheck {
    /// `∫ (f - f(z))²` with `z` a minimum point.
    pub lhs: f64,
    /// `(|∂P|² / 8) ∫ (f')²`.
    pub rhs: f64,
    pub pass: bool,
}

/// Loop Poincaré inequality around the minimum point of `f`.
pub fn loop_poincare_check(f: &LoopFunction) -> PoincareCheck {
    let z = f.min();
    let lhs = f.fold_pieces(|h, a, b| piece_square_integral(h, a - z, b - z));
    let l = f.perimeter();
    let rhs = l * l / 8.0 * f.energy();
    let pass = lhs <= rhs * (1.0 + 1e-12) + 1e-300;
    PoincareCheck { lhs, rhs, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_regular_tiling, Point, Rect, TilingKind};
    use crate::skeleton::build_skeleton;

    fn grid_mesh(n: f64, h: f64) -> Arc<Mesh> {
        let t = make_regular_tiling(TilingKind::Square, 1.0, Rect::square(n)).unwrap();
        Mesh::new(Arc::new(build_skeleton(&t).unwrap()), h).unwrap()
    }

    fn hat_on_edge(mesh: &Arc<Mesh>, edge: usize) -> GraphFunction {
        GraphFunction::from_fn(mesh, |p| {
            if p.edge == edge {
                1.0 - (2.0 * p.offset - 1.0).abs()
            } else {
                0.0
            }
        })
    }

    #[test]
    fn mesh_layout() {
        let m = grid_mesh(2.0, 0.25);
        assert_eq!(m.subdivisions(0), 4);
        assert_eq!(m.dof_count(), 9 + 12 * 3);
        for d in 0..m.dof_count() {
            assert_eq!(m.nearest_dof(m.dof_point(d)), d);
        }
    }

    #[test]
    fn hat_norms_and_energy() {
        let m = grid_mesh(3.0, 1.0 / 16.0);
        let f = hat_on_edge(&m, 5);
        let n = norms(&f);
        assert!((n.l1 - 0.5).abs() < 1e-14);
        assert!((n.l2 * n.l2 - 1.0 / 3.0).abs() < 1e-14);
        assert_eq!(n.linf, 1.0);
        assert!((f.energy() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_and_constant_norms() {
        let m = grid_mesh(2.0, 0.5);
        assert_eq!(norms(&GraphFunction::zeros(&m)), Norms { l1: 0.0, l2: 0.0, linf: 0.0 });
        let c = GraphFunction::constant(&m, 1.0);
        let n = norms(&c);
        assert!((n.l1 - 12.0).abs() < 1e-12);
        assert!((n.l2 - 12f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.energy(), 0.0);
        let b = vec![0.5; 9];
        let form = FormSpec::plain().with_robin(b);
        assert!((dirichlet_energy(&GraphFunction::constant(&m, 2.0), &form).unwrap() - 9.0 * 0.5 * 4.0).abs() < 1e-12);
    }

    #[test]
    fn ramp_energy_with_coefficient() {
        let m = grid_mesh(1.0, 0.1);
        let f = GraphFunction::from_fn(&m, |p| if p.edge == 0 { p.offset } else { 0.0 });
        // Only edge 0 is nonconstant, but its endpoints feed neighbouring edges.
        let e0 = FormSpec::plain();
        let plain = dirichlet_energy(&f, &e0).unwrap();
        let doubled = dirichlet_energy(&f, &FormSpec::plain().with_alpha(Conductivity::Uniform(2.0))).unwrap();
        assert!((doubled - 2.0 * plain).abs() < 1e-12);
        let single = GraphFunction::from_fn(&m, |p| {
            let e = m.graph().edge(p.edge);
            let a = m.graph().vertex(e.ends[0]).position;
            let b = m.graph().vertex(e.ends[1]).position;
            let pos = a + (b - a) * (p.offset / e.length);
            pos.x
        });
        // f = x on the unit square: slope 1 on both horizontal sides.
        assert!((single.energy() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        let m = grid_mesh(1.0, 0.5);
        let f = GraphFunction::zeros(&m);
        let err = dirichlet_energy(&f, &FormSpec::plain().with_alpha(Conductivity::Uniform(0.0))).unwrap_err();
        assert!(err.to_string().contains("not uniformly elliptic"));
        let err = dirichlet_energy(&f, &FormSpec::plain().with_robin(vec![-1.0; 4])).unwrap_err();
        assert!(matches!(err, FunctionError::InvalidRobin(_)));
    }

    #[test]
    fn refinement_keeps_piecewise_linear_integrals() {
        let coarse = grid_mesh(6.0, 1.0 / 8.0);
        let f = random_test_function_seeded(&coarse, 3, coarse.graph().vertex_at(Point::new(3.0, 3.0)).unwrap(), 2.0)
            .unwrap();
        let fine = Mesh::new(Arc::clone(coarse.graph()), 1.0 / 16.0).unwrap();
        let g = f.interpolate(&fine).unwrap();
        let (a, b) = (norms(&f), norms(&g));
        assert!((a.l1 - b.l1).abs() <= 1e-12 * a.l1);
        assert!((a.l2 - b.l2).abs() <= 1e-12 * a.l2);
        assert!((f.energy() - g.energy()).abs() <= 1e-12 * f.energy());
    }

    #[test]
    fn random_function_is_nonnegative_supported_and_deterministic() {
        let m = grid_mesh(10.0, 1.0 / 16.0);
        let c = m.graph().vertex_at(Point::new(5.0, 5.0)).unwrap();
        let f = random_test_function_seeded(&m, 11, c, 2.5).unwrap();
        let g = random_test_function_seeded(&m, 11, c, 2.5).unwrap();
        assert_eq!(f.values(), g.values());
        assert!(f.min() >= 0.0 && f.max() > 0.0);
        let dist = vertex_distances(m.graph(), &[(c, 0.0)]);
        for d in 0..m.dof_count() {
            let p = m.dof_point(d);
            let e = m.graph().edge(p.edge);
            let r = (dist[e.ends[0]] + p.offset).min(dist[e.ends[1]] + e.length - p.offset);
            if r >= 2.5 {
                assert_eq!(f.values()[d], 0.0);
            }
        }
        let corner = m.graph().vertex_at(Point::new(1.0, 1.0)).unwrap();
        assert!(matches!(
            random_test_function_seeded(&m, 1, corner, 2.0),
            Err(FunctionError::SupportTouchesBoundary { .. })
        ));
    }

    #[test]
    fn restriction_of_hat_on_square_side() {
        let t = make_regular_tiling(TilingKind::Square, 1.0, Rect::square(3.0)).unwrap();
        let g = Arc::new(build_skeleton(&t).unwrap());
        let m = Mesh::new(Arc::clone(&g), 0.125).unwrap();
        let poly = &t.polygons[4];
        let trace = g.trace_polygon(poly).unwrap();
        let f = hat_on_edge(&m, trace[0].0);
        let loopf = boundary_restriction(&f, poly).unwrap();
        assert!((loopf.l1() - 0.5).abs() < 1e-14);
        assert!((loopf.perimeter() - 4.0).abs() < 1e-14);
        assert_eq!(loopf.corner_values(), vec![0.0; 4]);
        let c = boundary_restriction(&GraphFunction::constant(&m, 2.5), poly).unwrap();
        assert!(c.side(2).1.iter().all(|&v| v == 2.5));
        // Consistency with per-edge integrals.
        let r = random_test_function_seeded(&m, 5, g.vertex_at(Point::new(1.0, 1.0)).unwrap(), 0.9).unwrap();
        let lr = boundary_restriction(&r, poly).unwrap();
        let direct: f64 = trace
            .iter()
            .map(|&(e, _)| r.edge_values(e).windows(2).map(|w| 0.5 * m.step(e) * (w[0] + w[1])).sum::<f64>())
            .sum();
        assert!((lr.integral() - direct).abs() < 1e-14);
    }

    #[test]
    fn poincare_on_constant_and_cosine_loops() {
        let c = LoopFunction::sample(vec![1.0; 4], 8, |_| 3.0);
        let chk = loop_poincare_check(&c);
        assert_eq!((chk.lhs, chk.rhs, chk.pass), (0.0, 0.0, true));

        let l = 4.0;
        let cos = LoopFunction::sample(vec![1.0; 4], 2500, |s| 1.0 - (2.0 * std::f64::consts::PI * s / l).cos());
        let chk = loop_poincare_check(&cos);
        // Closed forms for the smooth loop: 3L/2 and π²L/4.
        assert!((chk.lhs - 6.0).abs() < 1e-5);
        assert!((chk.rhs - std::f64::consts::PI.powi(2)).abs() < 1e-4);
        assert!(chk.pass);
    }

    #[test]
    fn discontinuous_loop_is_rejected() {
        let err = LoopFunction::from_sides(vec![1.0; 3], vec![vec![0.0, 1.0], vec![1.0, 2.0], vec![2.5, 0.0]]).unwrap_err();
        assert!(matches!(err, FunctionError::LoopDiscontinuity { corner: 2, .. }));
    }
}
