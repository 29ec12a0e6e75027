//! One-skeleton of a tiling as a metric graph: vertices, straight edges with
//! lengths, shortest-path distances and ball subgraphs.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{segment_polygons, Point, Polygon, Tiling};

/// Version tag written into graph documents.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton is disconnected: {unreached} of {total} vertices unreachable from vertex 0")]
    Disconnected { unreached: usize, total: usize },
    #[error("unknown edge id {0}")]
    UnknownEdge(usize),
    #[error("unknown vertex id {0}")]
    UnknownVertex(usize),
    #[error("offset {offset} outside edge {edge} of length {length}")]
    OffsetOutOfRange { edge: usize, offset: f64, length: f64 },
    #[error("ball radius must be positive, got {0}")]
    EmptyBall(f64),
    #[error("polygon side {side} is not covered by graph edges")]
    UncoveredSide { side: usize },
    #[error("point ({x}, {y}) is not on the graph")]
    NotOnGraph { x: f64, y: f64 },
    #[error("malformed graph document: {0}")]
    Document(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphVertex {
    pub id: usize,
    pub position: Point,
    /// Lies on the outer boundary of the windowed tiling.
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub id: usize,
    /// Offset 0 sits at `ends[0]`, offset `length` at `ends[1]`.
    pub ends: [usize; 2],
    pub length: f64,
}

/// A point on the graph: an edge and the arclength from its first endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphPoint {
    pub edge: usize,
    pub offset: f64,
}

impl GraphPoint {
    pub fn new(edge: usize, offset: f64) -> Self {
        Self { edge, offset }
    }
}

#[derive(Clone, Debug)]
pub struct MetricGraph {
    vertices: Vec<GraphVertex>,
    edges: Vec<GraphEdge>,
    /// Per vertex: `(edge id, neighbour)` sorted by edge id.
    adjacency: Vec<Vec<(usize, usize)>>,
    /// Largest polygon diameter of the source tiling.
    cell_diameter: f64,
}

#[derive(Serialize, Deserialize)]
struct GraphDocument {
    schema_version: u32,
    cell_diameter: f64,
    vertices: Vec<GraphVertex>,
    edges: Vec<GraphEdge>,
}

impl MetricGraph {
    /// Assembles a graph from vertex and edge lists whose ids equal their
    /// positions.
    pub fn from_parts(
        vertices: Vec<GraphVertex>,
        edges: Vec<GraphEdge>,
        cell_diameter: f64,
    ) -> Result<Self, SkeletonError> {
        for (i, v) in vertices.iter().enumerate() {
            if v.id != i {
                return Err(SkeletonError::Document(format!("vertex at position {i} has id {}", v.id)));
            }
        }
        let mut adjacency = vec![Vec::new(); vertices.len()];
        for (i, e) in edges.iter().enumerate() {
            if e.id != i {
                return Err(SkeletonError::Document(format!("edge at position {i} has id {}", e.id)));
            }
            let [a, b] = e.ends;
            if a >= vertices.len() || b >= vertices.len() || a == b {
                return Err(SkeletonError::Document(format!("edge {i} has invalid ends {a}, {b}")));
            }
            if !(e.length > 0.0) {
                return Err(SkeletonError::Document(format!("edge {i} has length {}", e.length)));
            }
            adjacency[a].push((i, b));
            adjacency[b].push((i, a));
        }
        Ok(Self {
            vertices,
            edges,
            adjacency,
            cell_diameter,
        })
    }

    pub fn vertices(&self) -> &[GraphVertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn vertex(&self, id: usize) -> &GraphVertex {
        &self.vertices[id]
    }

    pub fn edge(&self, id: usize) -> &GraphEdge {
        &self.edges[id]
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `(edge id, neighbour)` pairs at `v`, ordered by edge id.
    pub fn incident(&self, v: usize) -> &[(usize, usize)] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn total_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).sum()
    }

    pub fn min_edge_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(f64::INFINITY, f64::min)
    }

    pub fn cell_diameter(&self) -> f64 {
        self.cell_diameter
    }

    pub fn boundary_vertices(&self) -> impl Iterator<Item = usize> + '_ {
        self.vertices.iter().filter(|v| v.boundary).map(|v| v.id)
    }

    /// Planar position of a graph point.
    pub fn position(&self, p: GraphPoint) -> Point {
        let e = &self.edges[p.edge];
        let a = self.vertices[e.ends[0]].position;
        let b = self.vertices[e.ends[1]].position;
        a + (b - a) * (p.offset / e.length)
    }

    pub fn check_point(&self, p: GraphPoint) -> Result<(), SkeletonError> {
        let e = self.edges.get(p.edge).ok_or(SkeletonError::UnknownEdge(p.edge))?;
        if !(0.0..=e.length).contains(&p.offset) {
            return Err(SkeletonError::OffsetOutOfRange {
                edge: p.edge,
                offset: p.offset,
                length: e.length,
            });
        }
        Ok(())
    }

    /// Graph point for vertex `v`, on its lowest-id incident edge.
    pub fn vertex_point(&self, v: usize) -> Result<GraphPoint, SkeletonError> {
        let &(e, _) = self
            .adjacency
            .get(v)
            .ok_or(SkeletonError::UnknownVertex(v))?
            .first()
            .ok_or(SkeletonError::UnknownVertex(v))?;
        let edge = &self.edges[e];
        let offset = if edge.ends[0] == v { 0.0 } else { edge.length };
        Ok(GraphPoint::new(e, offset))
    }

    fn tolerance(&self) -> f64 {
        1e-9 * self.min_edge_length()
    }

    /// Vertex at a planar position, within the coincidence tolerance.
    pub fn vertex_at(&self, p: Point) -> Option<usize> {
        let tol = self.tolerance();
        self.vertices
            .iter()
            .filter(|v| v.position.distance(p) <= tol)
            .min_by(|a, b| a.position.distance(p).total_cmp(&b.position.distance(p)))
            .map(|v| v.id)
    }

    /// Graph point at a planar position (lowest edge id when on a vertex).
    pub fn locate(&self, p: Point) -> Result<GraphPoint, SkeletonError> {
        let tol = self.tolerance();
        for e in &self.edges {
            let a = self.vertices[e.ends[0]].position;
            let b = self.vertices[e.ends[1]].position;
            let dir = (b - a) * (1.0 / e.length);
            let q = p - a;
            let along = q.dot(dir);
            if along >= -tol && along <= e.length + tol && dir.cross(q).abs() <= tol {
                return Ok(GraphPoint::new(e.id, along.clamp(0.0, e.length)));
            }
        }
        Err(SkeletonError::NotOnGraph { x: p.x, y: p.y })
    }

    /// Edges covering the boundary of `polygon`, counterclockwise from its
    /// first vertex, with traversal direction (`true` = from `ends[0]`).
    pub fn trace_polygon(&self, polygon: &Polygon) -> Result<Vec<(usize, bool)>, SkeletonError> {
        let tol = self.tolerance();
        let mut out = Vec::new();
        for (side, (a, b)) in polygon.sides().enumerate() {
            let mut cur = self.vertex_at(a).ok_or(SkeletonError::UncoveredSide { side })?;
            let len = a.distance(b);
            let dir = (b - a) * (1.0 / len);
            let mut guard = 0;
            while self.vertices[cur].position.distance(b) > tol {
                let here = self.vertices[cur].position;
                let step = self.adjacency[cur].iter().find(|&&(_, w)| {
                    let d = self.vertices[w].position - here;
                    let along = d.dot(dir);
                    along > tol && dir.cross(d).abs() <= tol && (self.vertices[w].position - a).dot(dir) <= len + tol
                });
                let &(e, w) = step.ok_or(SkeletonError::UncoveredSide { side })?;
                out.push((e, self.edges[e].ends[0] == cur));
                cur = w;
                guard += 1;
                if guard > self.edges.len() {
                    return Err(SkeletonError::UncoveredSide { side });
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            schema_version: GRAPH_SCHEMA_VERSION,
            cell_diameter: self.cell_diameter,
            vertices: self.vertices.clone(),
            edges: self.edges.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn from_json(doc: &str) -> Result<Self, SkeletonError> {
        let doc: GraphDocument = serde_json::from_str(doc).map_err(|e| SkeletonError::Document(e.to_string()))?;
        if doc.schema_version != GRAPH_SCHEMA_VERSION {
            return Err(SkeletonError::Document(format!(
                "unsupported schema version {}",
                doc.schema_version
            )));
        }
        Self::from_parts(doc.vertices, doc.edges, doc.cell_diameter)
    }
}

/// Builds the one-skeleton: every polygon corner becomes a vertex, sides are
/// cut at corners of neighbouring polygons lying on them, and shared sides
/// are merged into a single edge.
///
/// A vertex is flagged `boundary` when the polygon angles around it sum to
/// less than a full turn, i.e. it sits on the outer rim of the window.
pub fn build_skeleton(tiling: &Tiling) -> Result<MetricGraph, SkeletonError> {
    let seg = segment_polygons(&tiling.polygons);
    let mut angle = vec![0.0; seg.points.len()];
    let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges: Vec<GraphEdge> = Vec::new();
    for (poly, chains) in tiling.polygons.iter().zip(&seg.chains) {
        for (i, chain) in chains.iter().enumerate() {
            angle[chain[0]] += poly.interior_angle(i);
            for &inner in &chain[1..chain.len() - 1] {
                angle[inner] += PI;
            }
            for w in chain.windows(2) {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                edge_ids.entry(key).or_insert_with(|| {
                    let id = edges.len();
                    edges.push(GraphEdge {
                        id,
                        ends: [w[0], w[1]],
                        length: seg.points[w[0]].distance(seg.points[w[1]]),
                    });
                    id
                });
            }
        }
    }
    let vertices = seg
        .points
        .iter()
        .enumerate()
        .map(|(id, &position)| GraphVertex {
            id,
            position,
            boundary: angle[id] < 2.0 * PI - 1e-9,
        })
        .collect();
    let cell_diameter = tiling.polygons.iter().map(Polygon::diameter).fold(0.0, f64::max);
    let graph = MetricGraph::from_parts(vertices, edges, cell_diameter)?;
    let reach = vertex_distances(&graph, &[(0, 0.0)]);
    let unreached = reach.iter().filter(|d| d.is_infinite()).count();
    if unreached > 0 {
        return Err(SkeletonError::Disconnected {
            unreached,
            total: graph.vertex_count(),
        });
    }
    Ok(graph)
}

#[derive(Copy, Clone, PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Multi-source Dijkstra over vertices; `sources` carry initial distances.
pub fn vertex_distances(g: &MetricGraph, sources: &[(usize, f64)]) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; g.vertex_count()];
    let mut heap = BinaryHeap::new();
    for &(v, d) in sources {
        if d < dist[v] {
            dist[v] = d;
            heap.push(HeapEntry { dist: d, vertex: v });
        }
    }
    while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(e, w) in g.incident(v) {
            let nd = d + g.edge(e).length;
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(HeapEntry { dist: nd, vertex: w });
            }
        }
    }
    dist
}

/// Distances from one graph point to every vertex and, by extension, to any
/// other graph point.
#[derive(Clone, Debug)]
pub struct PointDistances {
    origin: GraphPoint,
    vertex: Vec<f64>,
}

impl PointDistances {
    pub fn to_vertex(&self, v: usize) -> f64 {
        self.vertex[v]
    }

    pub fn vertex_distances(&self) -> &[f64] {
        &self.vertex
    }

    /// Distance to the point at `offset` on edge `e`.
    pub fn to_point(&self, g: &MetricGraph, p: GraphPoint) -> f64 {
        let edge = g.edge(p.edge);
        let via = (self.vertex[edge.ends[0]] + p.offset).min(self.vertex[edge.ends[1]] + edge.length - p.offset);
        if p.edge == self.origin.edge {
            via.min((p.offset - self.origin.offset).abs())
        } else {
            via
        }
    }
}

pub fn distances_from(g: &MetricGraph, origin: GraphPoint) -> Result<PointDistances, SkeletonError> {
    g.check_point(origin)?;
    let e = g.edge(origin.edge);
    let vertex = vertex_distances(g, &[(e.ends[0], origin.offset), (e.ends[1], e.length - origin.offset)]);
    Ok(PointDistances { origin, vertex })
}

/// Shortest-path length between two graph points.
pub fn graph_distance(g: &MetricGraph, a: GraphPoint, b: GraphPoint) -> Result<f64, SkeletonError> {
    g.check_point(b)?;
    Ok(distances_from(g, a)?.to_point(g, b))
}

/// Graph distance from `p` to the nearest boundary vertex.
pub fn boundary_clearance(g: &MetricGraph, p: GraphPoint) -> Result<f64, SkeletonError> {
    let d = distances_from(g, p)?;
    Ok(g.boundary_vertices().map(|v| d.to_vertex(v)).fold(f64::INFINITY, f64::min))
}

/// Vertices within distance `R` of a centre vertex, their outside
/// neighbours, and all edges incident to the inside set.
#[derive(Clone, Debug)]
pub struct BallSubgraph<'g> {
    pub graph: &'g MetricGraph,
    pub center: usize,
    pub radius: f64,
    pub inner: Vec<usize>,
    pub outer: Vec<usize>,
    pub edges: Vec<usize>,
    /// No outside neighbours: the ball swallows the whole window.
    pub exceeds_window: bool,
    /// Some inside vertex is on the window rim.
    pub touches_boundary: bool,
}

impl BallSubgraph<'_> {
    pub fn contains_vertex(&self, v: usize) -> bool {
        self.inner.binary_search(&v).is_ok()
    }

    pub fn contains_edge(&self, e: usize) -> bool {
        self.edges.binary_search(&e).is_ok()
    }
}

pub fn ball_subgraph(g: &MetricGraph, center: usize, radius: f64) -> Result<BallSubgraph<'_>, SkeletonError> {
    if center >= g.vertex_count() {
        return Err(SkeletonError::UnknownVertex(center));
    }
    if !(radius > 0.0) {
        return Err(SkeletonError::EmptyBall(radius));
    }
    let dist = vertex_distances(g, &[(center, 0.0)]);
    let inside: Vec<bool> = dist.iter().map(|&d| d < radius).collect();
    let inner: Vec<usize> = (0..g.vertex_count()).filter(|&v| inside[v]).collect();
    let mut outer: Vec<usize> = Vec::new();
    let mut edges: Vec<usize> = Vec::new();
    for &v in &inner {
        for &(e, w) in g.incident(v) {
            edges.push(e);
            if !inside[w] {
                outer.push(w);
            }
        }
    }
    outer.sort_unstable();
    outer.dedup();
    edges.sort_unstable();
    edges.dedup();
    let touches_boundary = inner.iter().any(|&v| g.vertex(v).boundary);
    Ok(BallSubgraph {
        graph: g,
        center,
        radius,
        exceeds_window: outer.is_empty(),
        touches_boundary,
        inner,
        outer,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{load_tiling, make_regular_tiling, Rect, TilingKind};

    fn grid(n: f64) -> MetricGraph {
        build_skeleton(&make_regular_tiling(TilingKind::Square, 1.0, Rect::square(n)).unwrap()).unwrap()
    }

    #[test]
    fn two_by_two_grid() {
        let g = grid(2.0);
        assert_eq!(g.vertex_count(), 9);
        assert_eq!(g.edge_count(), 12);
        assert!(g.edges().iter().all(|e| e.length == 1.0));
        let center = g.vertex_at(Point::new(1.0, 1.0)).unwrap();
        assert_eq!(g.degree(center), 4);
        assert!(!g.vertex(center).boundary);
        assert_eq!(g.boundary_vertices().count(), 8);
    }

    #[test]
    fn corner_on_side_splits_long_side() {
        let doc = r#"{"polygons": [
            [[0,0],[2,0],[2,2],[0,2]],
            [[2,0],[3,0],[3,1],[2,1]],
            [[2,1],[3,1],[3,2],[2,2]]]}"#;
        let g = build_skeleton(&load_tiling(doc).unwrap()).unwrap();
        let mid = g.vertex_at(Point::new(2.0, 1.0)).unwrap();
        assert_eq!(g.degree(mid), 3);
        assert!(!g.vertex(mid).boundary);
        // No edge spans the full long side.
        assert!(g.edges().iter().all(|e| e.length <= 2.0 + 1e-12));
        assert_eq!(g.edges().iter().filter(|e| e.length == 2.0).count(), 3);
        let sq = &load_tiling(doc).unwrap().polygons[0];
        assert_eq!(g.trace_polygon(sq).unwrap().len(), 5);
    }

    #[test]
    fn manhattan_distance_on_grid() {
        let g = grid(6.0);
        let a = g.vertex_at(Point::new(1.0, 1.0)).unwrap();
        let b = g.vertex_at(Point::new(4.0, 5.0)).unwrap();
        let d = graph_distance(&g, g.vertex_point(a).unwrap(), g.vertex_point(b).unwrap()).unwrap();
        assert!((d - 7.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_side_midpoints_of_a_square() {
        let g = grid(1.0);
        let bottom = g.locate(Point::new(0.5, 0.0)).unwrap();
        let top = g.locate(Point::new(0.5, 1.0)).unwrap();
        let d = graph_distance(&g, bottom, top).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let right = g.locate(Point::new(1.0, 0.5)).unwrap();
        assert!((graph_distance(&g, bottom, right).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(graph_distance(&g, bottom, bottom).unwrap(), 0.0);
    }

    #[test]
    fn same_edge_shortcut() {
        let g = grid(3.0);
        let a = GraphPoint::new(4, 0.2);
        let b = GraphPoint::new(4, 0.7);
        assert!((graph_distance(&g, a, b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distance_errors() {
        let g = grid(2.0);
        assert!(matches!(
            graph_distance(&g, GraphPoint::new(99, 0.0), GraphPoint::new(0, 0.0)),
            Err(SkeletonError::UnknownEdge(99))
        ));
        assert!(matches!(
            graph_distance(&g, GraphPoint::new(0, 0.0), GraphPoint::new(0, 1.5)),
            Err(SkeletonError::OffsetOutOfRange { .. })
        ));
    }

    #[test]
    fn ball_on_grid() {
        let g = grid(8.0);
        let c = g.vertex_at(Point::new(4.0, 4.0)).unwrap();
        let b = ball_subgraph(&g, c, 1.5).unwrap();
        assert_eq!(b.inner.len(), 5);
        assert_eq!(b.outer.len(), 8);
        assert_eq!(b.edges.len(), 16);
        assert!(!b.exceeds_window && !b.touches_boundary);

        let small = ball_subgraph(&g, c, 0.5).unwrap();
        assert_eq!(small.inner, vec![c]);
        assert_eq!(small.outer.len(), 4);

        let huge = ball_subgraph(&g, c, 100.0).unwrap();
        assert!(huge.exceeds_window && huge.outer.is_empty());

        assert!(matches!(ball_subgraph(&g, c, 0.0), Err(SkeletonError::EmptyBall(_))));
    }

    #[test]
    fn graph_json_round_trip() {
        let g = grid(3.0);
        let back = MetricGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.vertices(), g.vertices());
        assert_eq!(back.edges(), g.edges());
        assert!(MetricGraph::from_json("{}").is_err());
    }
}
