//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use tileheat::functions::Mesh;
use tileheat::geometry::{make_regular_tiling, Point, Rect, Tiling, TilingKind};
use tileheat::skeleton::{build_skeleton, MetricGraph};

pub fn tiling(kind: TilingKind, window: f64) -> Tiling {
    make_regular_tiling(kind, 1.0, Rect::square(window)).unwrap()
}

pub fn graph(kind: TilingKind, window: f64) -> Arc<MetricGraph> {
    Arc::new(build_skeleton(&tiling(kind, window)).unwrap())
}

pub fn mesh(kind: TilingKind, window: f64, h: f64) -> Arc<Mesh> {
    Mesh::new(graph(kind, window), h).unwrap()
}

/// Vertex of `g` at planar position `(x, y)`.
pub fn vertex_at(g: &MetricGraph, x: f64, y: f64) -> usize {
    g.vertex_at(Point::new(x, y)).expect("no vertex there")
}

/// Edge joining the vertices at two planar positions.
pub fn edge_between(g: &MetricGraph, a: (f64, f64), b: (f64, f64)) -> usize {
    let (u, v) = (vertex_at(g, a.0, a.1), vertex_at(g, b.0, b.1));
    g.incident(u)
        .iter()
        .find(|&&(_, w)| w == v)
        .map(|&(e, _)| e)
        .expect("vertices are not adjacent")
}

/// Heat kernel of the whole line, `(4πt)^{-1/2} e^{-d²/(4t)}`.
pub fn free_kernel(t: f64, d: f64) -> f64 {
    (-d * d / (4.0 * t)).exp() / (4.0 * std::f64::consts::PI * t).sqrt()
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, by Newton iteration on
/// the Legendre polynomial.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let step = p1 / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out
}

/// `∫_T f` over the triangle `abc` with the collapsed-square rule built
/// from `order`-point Gauss–Legendre in each direction.
pub fn triangle_quadrature(a: Point, b: Point, c: Point, order: usize, f: impl Fn(Point) -> f64) -> f64 {
    let rule = gauss_legendre(order);
    let area2 = (b - a).cross(c - a).abs();
    let mut sum = 0.0;
    for &(s, ws) in &rule {
        for &(t, wt) in &rule {
            // (s, t) ∈ [0,1]² ↦ barycentric (s(1-t), st).
            let p = a + (b - a) * (s * (1.0 - t)) + (c - a) * (s * t);
            sum += ws * wt * s * f(p);
        }
    }
    sum * area2
}

/// All parity-fixing edge subsets of minimum size: subsets `J` such that
/// the vertices of odd degree in `J` are exactly `odd`.
pub fn minimal_tjoins(vertex_count: usize, edges: &[(usize, usize)], odd: &[usize]) -> Vec<Vec<usize>> {
    let target: BTreeSet<usize> = odd.iter().copied().collect();
    let mut best: Vec<Vec<usize>> = Vec::new();
    let mut best_size = usize::MAX;
    for mask in 0u64..(1u64 << edges.len()) {
        let size = mask.count_ones() as usize;
        if size > best_size {
            continue;
        }
        let mut deg = vec![0usize; vertex_count];
        for (i, &(u, v)) in edges.iter().enumerate() {
            if mask >> i & 1 == 1 {
                deg[u] += 1;
                deg[v] += 1;
            }
        }
        let odd_set: BTreeSet<usize> = (0..vertex_count).filter(|&v| deg[v] % 2 == 1).collect();
        if odd_set == target {
            if size < best_size {
                best.clear();
                best_size = size;
            }
            best.push((0..edges.len()).filter(|&i| mask >> i & 1 == 1).collect());
        }
    }
    best
}

/// Every closed walk from `start` using each edge exactly once, as edge
/// sequences.
pub fn euler_circuits(edges: &[(usize, usize)], start: usize) -> Vec<Vec<usize>> {
    fn walk(edges: &[(usize, usize)], at: usize, start: usize, used: &mut Vec<bool>, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if path.len() == edges.len() {
            if at == start {
                out.push(path.clone());
            }
            return;
        }
        for (i, &(u, v)) in edges.iter().enumerate() {
            if used[i] || (u != at && v != at) {
                continue;
            }
            let next = if u == at { v } else { u };
            used[i] = true;
            path.push(i);
            walk(edges, next, start, used, path, out);
            path.pop();
            used[i] = false;
        }
    }
    let mut out = Vec::new();
    walk(edges, start, start, &mut vec![false; edges.len()], &mut Vec::new(), &mut out);
    out
}
