//! The Euler tour argument for the one-dimensional Nash inequality.
//!
//! A ball subgraph is collapsed onto a multigraph in which all outside
//! neighbours become a single vertex `v_out`. Odd-degree vertices are fixed
//! by duplicating the edges of a T-join, the resulting Eulerian multigraph is
//! toured from `v_out`, and a graph function is read off along the tour as a
//! function on an interval that vanishes at both ends.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::check::Comparison;
use crate::constants::{BETA1, NASH1_LIFT_CONSTANT};
use crate::functions::{norms, piece_abs_integral, piece_square_integral, GraphFunction};
use crate::skeleton::{ball_subgraph, vertex_distances, BallSubgraph, SkeletonError};

#[derive(Debug, Error)]
pub enum LiftError {
    #[error("support touches window boundary")]
    SupportTouchesBoundary,
    #[error("multigraph has odd degree at vertex {0}")]
    OddDegree(usize),
    #[error("multigraph is disconnected: {unused} edges unreachable from the start vertex")]
    Disconnected { unused: usize },
    #[error("lifted function jumps by {jump} at tour position {step}")]
    Discontinuity { step: usize, jump: f64 },
    #[error("function is {value} at the outer vertex, expected 0")]
    NonzeroOutside { value: f64 },
    #[error("function is nonzero on edge {0}, outside the ball")]
    SupportOutsideBall(usize),
    #[error(transparent)]
    Graph(#[from] SkeletonError),
}

/// One multigraph edge; ends are local vertex indices in the orientation of
/// the original graph edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiEdge {
    pub ends: [usize; 2],
    pub length: f64,
    /// Graph edge this edge stands for.
    pub origin: usize,
    /// Multigraph edge this one duplicates, if it was added by `evenize`.
    pub duplicate_of: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiGraph {
    /// Graph vertex id for each local vertex except `v_out`.
    vertex_ids: Vec<usize>,
    edges: Vec<MultiEdge>,
}

impl MultiGraph {
    /// Builds a multigraph from explicit edges. The last local vertex,
    /// `vertex_ids.len()`, plays the role of `v_out`.
    pub fn new(vertex_ids: Vec<usize>, edges: Vec<MultiEdge>) -> Self {
        Self { vertex_ids, edges }
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_ids.len() + 1
    }

    pub fn v_out(&self) -> usize {
        self.vertex_ids.len()
    }

    /// Graph vertex behind local vertex `v`; `None` for `v_out`.
    pub fn graph_vertex(&self, v: usize) -> Option<usize> {
        self.vertex_ids.get(v).copied()
    }

    pub fn edges(&self) -> &[MultiEdge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.vertex_count()];
        for e in &self.edges {
            deg[e.ends[0]] += 1;
            deg[e.ends[1]] += 1;
        }
        deg
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().map(|e| usize::from(e.ends[0] == v) + usize::from(e.ends[1] == v)).sum()
    }

    pub fn odd_vertices(&self) -> Vec<usize> {
        self.degrees()
            .iter()
            .enumerate()
            .filter(|(_, d)| *d % 2 == 1)
            .map(|(v, _)| v)
            .collect()
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertex_count()];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.ends[0]].push(i);
            if e.ends[1] != e.ends[0] {
                adj[e.ends[1]].push(i);
            }
        }
        adj
    }

    fn other_end(&self, edge: usize, v: usize) -> usize {
        let [a, b] = self.edges[edge].ends;
        if a == v {
            b
        } else {
            a
        }
    }
}

/// Merges the outside neighbours of `ball` into `v_out`.
///
/// Edges with both ends outside the ball never belong to it, so the only
/// loops that could appear are already absent.
pub fn collapse_outer(ball: &BallSubgraph<'_>) -> Result<MultiGraph, LiftError> {
    if ball.outer.is_empty() {
        return Err(LiftError::SupportTouchesBoundary);
    }
    let g = ball.graph;
    let v_out = ball.inner.len();
    let local = |v: usize| ball.inner.binary_search(&v).unwrap_or(v_out);
    let edges = ball
        .edges
        .iter()
        .filter_map(|&e| {
            let edge = g.edge(e);
            let ends = [local(edge.ends[0]), local(edge.ends[1])];
            (ends[0] != v_out || ends[1] != v_out).then_some(MultiEdge {
                ends,
                length: edge.length,
                origin: e,
                duplicate_of: None,
            })
        })
        .collect();
    Ok(MultiGraph::new(ball.inner.clone(), edges))
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    vertex: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest-path tree from `source`: distances and the edge used to reach
/// each vertex (lowest id among equal-length relaxations).
fn shortest_path_tree(mg: &MultiGraph, adj: &[Vec<usize>], source: usize) -> (Vec<f64>, Vec<Option<usize>>) {
    let n = mg.vertex_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred = vec![None; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Entry { dist: 0.0, vertex: source });
    while let Some(Entry { dist: d, vertex: v }) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &e in &adj[v] {
            let w = mg.other_end(e, v);
            let nd = d + mg.edges[e].length;
            if nd < dist[w] {
                dist[w] = nd;
                pred[w] = Some(e);
                heap.push(Entry { dist: nd, vertex: w });
            }
        }
    }
    (dist, pred)
}

/// Makes every degree even by duplicating the edges of a T-join.
///
/// Odd vertices are paired greedily (lowest id first, with its nearest odd
/// partner, ties to the lower id); each pair contributes a shortest path and
/// the join is the symmetric difference of those paths, so no edge is
/// duplicated twice. Returns the evenized multigraph and the ids of the
/// edges that were duplicated.
pub fn evenize(mg: &MultiGraph) -> Result<(MultiGraph, Vec<usize>), LiftError> {
    let adj = mg.adjacency();
    let mut odd = mg.odd_vertices();
    let mut in_join = vec![false; mg.edge_count()];
    while let Some(&u) = odd.first() {
        let (dist, pred) = shortest_path_tree(mg, &adj, u);
        let partner_index = (1..odd.len())
            .min_by(|&a, &b| dist[odd[a]].total_cmp(&dist[odd[b]]).then(odd[a].cmp(&odd[b])))
            .expect("odd vertices come in pairs");
        let t = odd[partner_index];
        if !dist[t].is_finite() {
            return Err(LiftError::Disconnected { unused: 0 });
        }
        let mut v = t;
        while v != u {
            let e = pred[v].expect("reachable vertex has a predecessor");
            in_join[e] = !in_join[e];
            v = mg.other_end(e, v);
        }
        odd.remove(partner_index);
        odd.remove(0);
    }
    let duplicated: Vec<usize> = (0..mg.edge_count()).filter(|&e| in_join[e]).collect();
    let mut out = mg.clone();
    for &e in &duplicated {
        let original = &mg.edges[e];
        out.edges.push(MultiEdge {
            duplicate_of: Some(e),
            ..original.clone()
        });
    }
    Ok((out, duplicated))
}

/// One tour step: multigraph edge and whether it is walked from `ends[0]`
/// to `ends[1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TourStep {
    pub edge: usize,
    pub forward: bool,
}

/// Closed walk from `start` through every edge exactly once (Hierholzer,
/// always taking the lowest unused edge id).
pub fn euler_tour(mg: &MultiGraph, start: usize) -> Result<Vec<TourStep>, LiftError> {
    if let Some(&v) = mg.odd_vertices().first() {
        return Err(LiftError::OddDegree(v));
    }
    let adj = mg.adjacency();
    let mut cursor = vec![0usize; mg.vertex_count()];
    let mut used = vec![false; mg.edge_count()];
    let mut stack: Vec<(usize, Option<TourStep>)> = vec![(start, None)];
    let mut circuit = Vec::with_capacity(mg.edge_count());
    while let Some(&(v, _)) = stack.last() {
        while cursor[v] < adj[v].len() && used[adj[v][cursor[v]]] {
            cursor[v] += 1;
        }
        if let Some(&e) = adj[v].get(cursor[v]) {
            used[e] = true;
            let forward = mg.edges[e].ends[0] == v;
            stack.push((mg.other_end(e, v), Some(TourStep { edge: e, forward })));
        } else {
            let (_, step) = stack.pop().expect("stack is nonempty");
            circuit.extend(step);
        }
    }
    let unused = used.iter().filter(|u| !**u).count();
    if unused > 0 {
        return Err(LiftError::Disconnected { unused });
    }
    circuit.reverse();
    Ok(circuit)
}

/// A graph function read along an Euler tour, as a piecewise-linear
/// function on `(0, l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TourLift {
    pub tour: Vec<TourStep>,
    /// Graph edge walked at each step.
    pub origins: Vec<usize>,
    /// Interval position where each step starts; the last entry is `l`.
    pub offsets: Vec<f64>,
    /// Interval nodes and values of the lifted function.
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl TourLift {
    pub fn length(&self) -> f64 {
        *self.offsets.last().unwrap_or(&0.0)
    }

    fn fold_pieces(&self, piece: impl Fn(f64, f64, f64) -> f64) -> f64 {
        (1..self.nodes.len())
            .map(|j| piece(self.nodes[j] - self.nodes[j - 1], self.values[j - 1], self.values[j]))
            .sum()
    }

    pub fn l1(&self) -> f64 {
        self.fold_pieces(piece_abs_integral)
    }

    pub fn l2_squared(&self) -> f64 {
        self.fold_pieces(piece_square_integral)
    }

    pub fn energy(&self) -> f64 {
        self.fold_pieces(|h, a, b| if h > 0.0 { (b - a) * (b - a) / h } else { 0.0 })
    }

    /// How often each graph edge is walked.
    pub fn edge_use_counts(&self, edge_count: usize) -> Vec<usize> {
        let mut counts = vec![0; edge_count];
        for &e in &self.origins {
            counts[e] += 1;
        }
        counts
    }
}

/// Reads `f` along `tour`. Duplicated edges carry the values of the edge
/// they copy.
pub fn lift_function(f: &GraphFunction, mg: &MultiGraph, tour: &[TourStep]) -> Result<TourLift, LiftError> {
    let mesh = f.mesh();
    let mut lift = TourLift {
        tour: tour.to_vec(),
        origins: Vec::with_capacity(tour.len()),
        offsets: vec![0.0],
        nodes: Vec::new(),
        values: Vec::new(),
    };
    let mut position = 0.0;
    for (i, step) in tour.iter().enumerate() {
        let origin = mg.edges[step.edge].origin;
        let h = mesh.step(origin);
        let mut vals = f.edge_values(origin);
        if !step.forward {
            vals.reverse();
        }
        if let Some(&last) = lift.values.last() {
            let jump = (vals[0] - last).abs();
            if jump > 1e-12 {
                return Err(LiftError::Discontinuity { step: i, jump });
            }
        }
        let skip = usize::from(!lift.values.is_empty());
        let n = vals.len() - 1;
        for (j, v) in vals.into_iter().enumerate().skip(skip) {
            lift.nodes.push(if j == n { position + f.graph().edge(origin).length } else { position + j as f64 * h });
            lift.values.push(v);
        }
        position += f.graph().edge(origin).length;
        lift.origins.push(origin);
        lift.offsets.push(position);
    }
    for value in [lift.values.first(), lift.values.last()].into_iter().flatten() {
        if value.abs() > 1e-12 {
            return Err(LiftError::NonzeroOutside { value: *value });
        }
    }
    Ok(lift)
}

/// Norms of `f` next to those of its lift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftNorms {
    pub l1: f64,
    pub l2_squared: f64,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nash1Report {
    pub graph: LiftNorms,
    pub lifted: LiftNorms,
    pub tour_edges: usize,
    pub duplicated_edges: usize,
    /// Largest number of times a graph edge is walked; at most 2.
    pub max_edge_use: usize,
    /// `‖f̃‖₁ ≤ 2‖f‖₁`, `‖f̃‖₂² ≤ 2‖f‖₂²`, `∫(f̃')² ≤ 2Q(f)`.
    pub doubling: [Comparison; 3],
    /// `‖f‖₂⁶ / (Q(f)‖f‖₁⁴)`; `None` when `f` is degenerate.
    pub ratio: Option<f64>,
    /// Same ratio for the lifted interval function.
    pub interval_ratio: Option<f64>,
    /// `ratio ≤ 2⁵·α₁`.
    pub lift_bound: Comparison,
    /// `ratio ≤ β₁`.
    pub beta_bound: Comparison,
    pub pass: bool,
}

impl Nash1Report {
    pub fn is_degenerate(&self) -> bool {
        self.ratio.is_none()
    }
}

fn nash_ratio(l1: f64, l2_squared: f64, energy: f64) -> Option<f64> {
    let denominator = energy * l1.powi(4);
    (denominator > 0.0).then(|| l2_squared.powi(3) / denominator)
}

/// The smallest ball around the lowest-id support vertex containing every
/// edge on which `f` is nonzero. `None` when `f` vanishes.
pub fn support_ball(f: &GraphFunction) -> Result<Option<BallSubgraph<'_>>, LiftError> {
    let g = f.graph();
    let support: Vec<usize> = (0..g.edge_count()).filter(|&e| !f.is_zero_on_edge(e)).collect();
    let Some(center) = support.iter().flat_map(|&e| g.edge(e).ends).min() else {
        return Ok(None);
    };
    let dist = vertex_distances(g, &[(center, 0.0)]);
    let reach = support
        .iter()
        .flat_map(|&e| g.edge(e).ends)
        .map(|v| dist[v])
        .fold(0.0, f64::max);
    let radius = reach + 0.5 * g.min_edge_length();
    Ok(Some(ball_subgraph(g, center, radius)?))
}

/// Lifts `f` through the ball `ball` and checks the doubling bounds and the
/// Nash ratio.
pub fn nash1_in_ball(f: &GraphFunction, ball: &BallSubgraph<'_>) -> Result<Nash1Report, LiftError> {
    let g = f.graph();
    if let Some(e) = (0..g.edge_count()).find(|&e| !ball.contains_edge(e) && !f.is_zero_on_edge(e)) {
        return Err(LiftError::SupportOutsideBall(e));
    }
    let collapsed = collapse_outer(ball)?;
    let (even, duplicated) = evenize(&collapsed)?;
    let tour = euler_tour(&even, even.v_out())?;
    let lift = lift_function(f, &even, &tour)?;

    let n = norms(f);
    let graph = LiftNorms {
        l1: n.l1,
        l2_squared: n.l2 * n.l2,
        energy: f.energy(),
    };
    let lifted = LiftNorms {
        l1: lift.l1(),
        l2_squared: lift.l2_squared(),
        energy: lift.energy(),
    };
    let doubling = [
        Comparison::le(lifted.l1, 2.0 * graph.l1),
        Comparison::le(lifted.l2_squared, 2.0 * graph.l2_squared),
        Comparison::le(lifted.energy, 2.0 * graph.energy),
    ];
    let max_edge_use = lift.edge_use_counts(g.edge_count()).into_iter().max().unwrap_or(0);
    let ratio = nash_ratio(graph.l1, graph.l2_squared, graph.energy);
    let interval_ratio = nash_ratio(lifted.l1, lifted.l2_squared, lifted.energy);
    let lhs = ratio.unwrap_or(0.0);
    let lift_bound = Comparison::le(lhs, NASH1_LIFT_CONSTANT);
    let beta_bound = Comparison::le(lhs, BETA1);
    let pass = doubling.iter().all(|c| c.pass) && max_edge_use <= 2 && lift_bound.pass && beta_bound.pass;
    Ok(Nash1Report {
        graph,
        lifted,
        tour_edges: tour.len(),
        duplicated_edges: duplicated.len(),
        max_edge_use,
        doubling,
        ratio,
        interval_ratio,
        lift_bound,
        beta_bound,
        pass,
    })
}

/// [`nash1_in_ball`] on the support ball of `f`. `Ok(None)` for `f ≡ 0`.
pub fn nash1_via_lift(f: &GraphFunction) -> Result<Option<Nash1Report>, LiftError> {
    match support_ball(f)? {
        Some(ball) => nash1_in_ball(f, &ball).map(Some),
        None => Ok(None),
    }
}
