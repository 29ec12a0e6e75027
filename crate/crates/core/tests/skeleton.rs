mod common;

use proptest::prelude::*;
use tileheat::geometry::{Point, TilingKind};
use tileheat::skeleton::{
    ball_subgraph, build_skeleton, distances_from, graph_distance, vertex_distances, GraphPoint, MetricGraph,
};

fn floyd_warshall(g: &MetricGraph) -> Vec<Vec<f64>> {
    let n = g.vertex_count();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0.0;
    }
    for e in g.edges() {
        let [a, b] = e.ends;
        d[a][b] = d[a][b].min(e.length);
        d[b][a] = d[b][a].min(e.length);
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

#[test]
fn interior_degrees_match_the_tiling() {
    for (kind, degree) in [(TilingKind::Square, 4), (TilingKind::Triangular, 6), (TilingKind::Hexagonal, 3)] {
        let g = common::graph(kind, 8.0);
        let interior: Vec<usize> = g.vertices().iter().filter(|v| !v.boundary).map(|v| v.id).collect();
        assert!(!interior.is_empty());
        for v in interior {
            assert_eq!(g.degree(v), degree, "{kind} vertex {v}");
        }
        assert_eq!(g.max_degree(), degree);
    }
}

#[test]
fn square_grid_counts() {
    let g = common::graph(TilingKind::Square, 5.0);
    assert_eq!(g.vertex_count(), 36);
    assert_eq!(g.edge_count(), 60);
    assert_eq!(g.boundary_vertices().count(), 20);
    assert!((g.total_length() - 60.0).abs() < 1e-12);
}

#[test]
fn dijkstra_agrees_with_floyd_warshall() {
    for kind in TilingKind::ALL {
        let g = common::graph(kind, 5.0);
        let all = floyd_warshall(&g);
        for s in (0..g.vertex_count()).step_by(7) {
            let d = vertex_distances(&g, &[(s, 0.0)]);
            for (v, &dv) in d.iter().enumerate() {
                assert!((dv - all[s][v]).abs() < 1e-9, "{kind} {s}->{v}: {dv} vs {}", all[s][v]);
            }
        }
    }
}

#[test]
fn manhattan_distance_on_the_grid() {
    let g = common::graph(TilingKind::Square, 6.0);
    let a = g.vertex_point(common::vertex_at(&g, 1.0, 1.0)).unwrap();
    let b = g.vertex_point(common::vertex_at(&g, 4.0, 3.0)).unwrap();
    assert!((graph_distance(&g, a, b).unwrap() - 5.0).abs() < 1e-12);
    let e = common::edge_between(&g, (2.0, 2.0), (3.0, 2.0));
    let lo = g.edge(e).ends[0];
    let offset = if g.vertex(lo).position.x < 2.5 { 0.25 } else { 0.75 };
    let mid = GraphPoint::new(e, offset);
    assert!((g.position(mid).x - 2.25).abs() < 1e-12);
    // Shortest route from (1,1) to (2.25, 2): up one, across 1.25.
    assert!((graph_distance(&g, a, mid).unwrap() - 2.25).abs() < 1e-12);
}

#[test]
fn points_on_one_edge_use_the_edge() {
    let g = common::graph(TilingKind::Hexagonal, 6.0);
    let e = g.edges().iter().find(|e| !g.vertex(e.ends[0]).boundary).unwrap().id;
    let a = GraphPoint::new(e, 0.1);
    let b = GraphPoint::new(e, 0.9);
    assert!((graph_distance(&g, a, b).unwrap() - 0.8 * g.edge(e).length).abs() < 1e-12);
}

#[test]
fn invalid_points_are_rejected() {
    let g = common::graph(TilingKind::Square, 3.0);
    assert!(g.check_point(GraphPoint::new(g.edge_count(), 0.0)).is_err());
    assert!(g.check_point(GraphPoint::new(0, 2.0)).is_err());
    assert!(ball_subgraph(&g, 0, 0.0).is_err());
    assert!(g.locate(Point::new(0.5, 0.5)).is_err());
}

#[test]
fn document_round_trip() {
    let g = common::graph(TilingKind::Triangular, 4.0);
    let back = MetricGraph::from_json(&g.to_json()).unwrap();
    assert_eq!(back.vertex_count(), g.vertex_count());
    assert_eq!(back.edges(), g.edges());
    assert_eq!(back.vertices(), g.vertices());
}

#[test]
fn ball_on_the_grid() {
    let g = common::graph(TilingKind::Square, 10.0);
    let c = common::vertex_at(&g, 5.0, 5.0);
    let ball = ball_subgraph(&g, c, 1.5).unwrap();
    // The centre and its four neighbours are strictly inside.
    assert_eq!(ball.inner.len(), 5);
    assert_eq!(ball.outer.len(), 8);
    assert_eq!(ball.edges.len(), 16);
    assert!(!ball.exceeds_window && !ball.touches_boundary);
}

#[test]
fn dilation_scales_distances() {
    let t = common::tiling(TilingKind::Hexagonal, 5.0);
    let g = build_skeleton(&t).unwrap();
    let big = build_skeleton(&t.dilated(2.5)).unwrap();
    assert_eq!(g.edge_count(), big.edge_count());
    let d = vertex_distances(&g, &[(0, 0.0)]);
    let db = vertex_distances(&big, &[(0, 0.0)]);
    for (a, b) in d.iter().zip(&db) {
        assert!((2.5 * a - b).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn triangle_inequality_and_euclidean_lower_bound(
        kind_index in 0usize..3,
        picks in proptest::collection::vec((0usize..10_000, 0.0f64..=1.0), 3),
    ) {
        let g = common::graph(TilingKind::ALL[kind_index], 5.0);
        let pts: Vec<GraphPoint> = picks
            .iter()
            .map(|&(e, s)| {
                let e = e % g.edge_count();
                GraphPoint::new(e, s * g.edge(e).length)
            })
            .collect();
        let d = |a: GraphPoint, b: GraphPoint| graph_distance(&g, a, b).unwrap();
        let (x, y, z) = (pts[0], pts[1], pts[2]);
        prop_assert!(d(x, z) <= d(x, y) + d(y, z) + 1e-9);
        prop_assert!((d(x, y) - d(y, x)).abs() < 1e-9);
        prop_assert!(g.position(x).distance(g.position(y)) <= d(x, y) + 1e-9);
        let from_x = distances_from(&g, x).unwrap();
        prop_assert!((from_x.to_point(&g, y) - d(x, y)).abs() < 1e-12);
    }
}
