//! Convex tangential polygons, tilings of a rectangular window, and the
//! tiling constants (inradius bounds, perimeter bound, shortest edge).

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance for the incircle tangency residuals.
pub const TANGENCY_TOL: f64 = 1e-9;

/// Point-coincidence tolerance, as a multiple of the shortest edge length.
pub const COINCIDENCE_TOL: f64 = 1e-9;

/// Version tag written into tiling documents.
pub const TILING_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }

    /// Counterclockwise rotation by a quarter turn.
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }

    pub fn rotated(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// The square `[0, side]²`.
    pub const fn square(side: f64) -> Self {
        Self::new(0.0, 0.0, side, side)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        !(self.width() > 0.0 && self.height() > 0.0)
    }

    pub fn center(&self) -> Point {
        Point::new(0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    pub fn corners(&self) -> [Point; 4] {
        [
            Point::new(self.x0, self.y0),
            Point::new(self.x1, self.y0),
            Point::new(self.x1, self.y1),
            Point::new(self.x0, self.y1),
        ]
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    fn bounding(points: &[Point]) -> Rect {
        points.iter().fold(
            Rect::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |r, p| Rect::new(r.x0.min(p.x), r.y0.min(p.y), r.x1.max(p.x), r.y1.max(p.y)),
        )
    }
}

impl From<[f64; 4]> for Rect {
    fn from(r: [f64; 4]) -> Self {
        Rect::new(r[0], r[1], r[2], r[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.x0, r.y0, r.x1, r.y1]
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PolygonError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("not convex: {0}")]
    NonConvex(String),
    #[error("no incircle: side distances {distances:?} from best-fit center ({}, {}), radius {radius}", center.x, center.y)]
    NoIncircle {
        center: Point,
        radius: f64,
        distances: Vec<f64>,
    },
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("empty window")]
    EmptyWindow,
    #[error("side length must be positive and finite, got {0}")]
    InvalidSide(f64),
    #[error("polygon {index}: {source}")]
    InvalidPolygon {
        index: usize,
        #[source]
        source: PolygonError,
    },
    #[error("polygons {first} and {second} have overlapping interiors (shared area {area:e})")]
    Overlap {
        first: usize,
        second: usize,
        area: f64,
    },
    #[error("tiling spec has no polygons")]
    NoPolygons,
    #[error("malformed tiling spec: {0}")]
    Spec(#[from] serde_json::Error),
}

/// A convex polygon with an inscribed circle touching every side.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
    incenter: Point,
    inradius: f64,
}

impl Polygon {
    /// Validates a counterclockwise vertex loop and computes its incircle.
    pub fn new(vertices: Vec<Point>) -> Result<Self, PolygonError> {
        check_convex(&vertices)?;
        let (incenter, inradius) = incircle(&vertices)?;
        Ok(Self {
            vertices,
            incenter,
            inradius,
        })
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn incenter(&self) -> Point {
        self.incenter
    }

    pub fn inradius(&self) -> f64 {
        self.inradius
    }

    /// Side `i` runs from vertex `i` to vertex `i + 1 (mod n)`.
    pub fn side(&self, i: usize) -> (Point, Point) {
        let n = self.vertices.len();
        (self.vertices[i % n], self.vertices[(i + 1) % n])
    }

    pub fn sides(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        (0..self.vertices.len()).map(move |i| self.side(i))
    }

    pub fn side_lengths(&self) -> Vec<f64> {
        self.sides().map(|(a, b)| a.distance(b)).collect()
    }

    pub fn perimeter(&self) -> f64 {
        self.side_lengths().iter().sum()
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.vertices)
    }

    pub fn bbox(&self) -> Rect {
        Rect::bounding(&self.vertices)
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.vertices.iter().enumerate() {
            for b in &self.vertices[i + 1..] {
                d = d.max(a.distance(*b));
            }
        }
        d
    }

    /// Interior angle at vertex `i`.
    pub fn interior_angle(&self, i: usize) -> f64 {
        let n = self.vertices.len();
        let prev = self.vertices[(i + n - 1) % n];
        let cur = self.vertices[i];
        let next = self.vertices[(i + 1) % n];
        let a = prev - cur;
        let b = next - cur;
        a.cross(b).abs().atan2(a.dot(b))
    }

    /// Whether `p` lies in the closed polygon, with absolute slack `tol`.
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        self.sides().all(|(a, b)| {
            let t = b - a;
            t.cross(p - a) / t.norm() >= -tol
        })
    }

    pub fn dilated(&self, factor: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&p| p * factor).collect(),
            incenter: self.incenter * factor,
            inradius: self.inradius * factor,
        }
    }

    /// Rotation about the origin followed by a translation.
    pub fn moved(&self, angle: f64, shift: Point) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&p| p.rotated(angle) + shift).collect(),
            incenter: self.incenter.rotated(angle) + shift,
            inradius: self.inradius,
        }
    }
}

/// Shoelace area of a vertex loop (positive when counterclockwise).
pub fn polygon_area(vertices: &[Point]) -> f64 {
    let n = vertices.len();
    0.5 * (0..n)
        .map(|i| vertices[i].cross(vertices[(i + 1) % n]))
        .sum::<f64>()
}

fn check_convex(vertices: &[Point]) -> Result<(), PolygonError> {
    let n = vertices.len();
    if n < 3 {
        return Err(PolygonError::TooFewVertices(n));
    }
    let mut turning = 0.0;
    for i in 0..n {
        let a = vertices[i] - vertices[(i + n - 1) % n];
        let b = vertices[(i + 1) % n] - vertices[i];
        let (la, lb) = (a.norm(), b.norm());
        if la == 0.0 || lb == 0.0 {
            return Err(PolygonError::NonConvex(format!("repeated vertex {i}")));
        }
        let sine = a.cross(b) / (la * lb);
        if sine <= 1e-12 {
            let what = if sine.abs() <= 1e-12 {
                "collinear"
            } else {
                "reflex or clockwise"
            };
            return Err(PolygonError::NonConvex(format!("{what} turn at vertex {i}")));
        }
        turning += a.cross(b).atan2(a.dot(b));
    }
    if (turning - 2.0 * PI).abs() > 1e-6 {
        return Err(PolygonError::NonConvex(format!(
            "vertex loop winds {:.3} turns",
            turning / (2.0 * PI)
        )));
    }
    Ok(())
}

/// Inscribed circle of a convex counterclockwise vertex loop.
///
/// The center and radius are the least-squares solution of
/// `n_i · (c - v_i) = r` over all sides (inward unit normals `n_i`); the
/// result is accepted only when every side distance matches `r` to
/// [`TANGENCY_TOL`] relative.
pub fn incircle(vertices: &[Point]) -> Result<(Point, f64), PolygonError> {
    let n = vertices.len();
    if n < 3 {
        return Err(PolygonError::TooFewVertices(n));
    }
    let origin = vertices.iter().fold(Point::new(0.0, 0.0), |acc, &v| acc + v) * (1.0 / n as f64);
    let mut a = DMatrix::<f64>::zeros(n, 3);
    let mut rhs = DVector::<f64>::zeros(n);
    let normals: Vec<Point> = (0..n)
        .map(|i| {
            let t = vertices[(i + 1) % n] - vertices[i];
            t.perp() * (1.0 / t.norm())
        })
        .collect();
    for (i, nrm) in normals.iter().enumerate() {
        a[(i, 0)] = nrm.x;
        a[(i, 1)] = nrm.y;
        a[(i, 2)] = -1.0;
        rhs[i] = nrm.dot(vertices[i] - origin);
    }
    let svd = a.svd(true, true);
    let sol = svd
        .solve(&rhs, 1e-14)
        .map_err(|e| PolygonError::NonConvex(e.to_string()))?;
    let center = origin + Point::new(sol[0], sol[1]);
    // For a tangential polygon `2·Area = r·perimeter`; this is exact for
    // lattice polygons where the solve is not.
    let perimeter: f64 = (0..n).map(|i| vertices[(i + 1) % n].distance(vertices[i])).sum();
    let radius = if sol[2] > 0.0 { 2.0 * polygon_area(vertices) / perimeter } else { sol[2] };
    let distances: Vec<f64> = normals
        .iter()
        .zip(vertices)
        .map(|(nrm, &v)| nrm.dot(center - v))
        .collect();
    let tangent = radius > 0.0
        && distances
            .iter()
            .all(|d| (d - radius).abs() <= TANGENCY_TOL * radius);
    if tangent {
        Ok((center, radius))
    } else {
        Err(PolygonError::NoIncircle {
            center,
            radius,
            distances,
        })
    }
}

/// Clips a convex (or arbitrary) subject loop against a convex
/// counterclockwise clip loop (Sutherland–Hodgman).
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % m];
        let edge = b - a;
        let inside = |p: Point| edge.cross(p - a) >= 0.0;
        let input = std::mem::take(&mut output);
        let k = input.len();
        for j in 0..k {
            let cur = input[j];
            let prev = input[(j + k - 1) % k];
            let intersect = |p: Point, q: Point| {
                let dp = edge.cross(p - a);
                let dq = edge.cross(q - a);
                p + (q - p) * (dp / (dp - dq))
            };
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(intersect(prev, cur)),
                (false, true) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

/// Area of the part of `polygon` inside `window`.
pub fn clipped_area(polygon: &Polygon, window: &Rect) -> f64 {
    let clipped = clip_convex(polygon.vertices(), &window.corners());
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_area(&clipped).max(0.0)
    }
}

/// Optimal constants of a tiling window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilingConstants {
    /// Smallest inradius.
    pub h: f64,
    /// Largest inradius.
    #[serde(rename = "H")]
    pub big_h: f64,
    /// Largest perimeter.
    #[serde(rename = "M")]
    pub m: f64,
    /// Shortest skeleton edge.
    pub l_min: f64,
    /// Largest vertex degree; known once the skeleton is built.
    pub d_max: Option<usize>,
}

impl TilingConstants {
    pub fn dilated(&self, factor: f64) -> Self {
        Self {
            h: self.h * factor,
            big_h: self.big_h * factor,
            m: self.m * factor,
            l_min: self.l_min * factor,
            d_max: self.d_max,
        }
    }

    pub fn with_max_degree(self, d_max: usize) -> Self {
        Self {
            d_max: Some(d_max),
            ..self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TilingKind {
    Square,
    Triangular,
    Hexagonal,
}

impl TilingKind {
    pub const ALL: [TilingKind; 3] = [TilingKind::Square, TilingKind::Triangular, TilingKind::Hexagonal];

    pub fn corners(self) -> usize {
        match self {
            TilingKind::Square => 4,
            TilingKind::Triangular => 3,
            TilingKind::Hexagonal => 6,
        }
    }

    /// The tile of this kind with the given side length, centred at the
    /// origin with its first side horizontal.
    pub fn tile(self, side: f64) -> Polygon {
        regular_polygon(self.corners(), side)
    }
}

/// Regular `n`-gon with side length `side` centred at the origin.
pub fn regular_polygon(n: usize, side: f64) -> Polygon {
    let step = 2.0 * PI / n as f64;
    let radius = side / (2.0 * (step / 2.0).sin());
    let start = -PI / 2.0 - step / 2.0;
    let vertices = (0..n)
        .map(|i| Point::new(radius, 0.0).rotated(start + i as f64 * step))
        .collect();
    Polygon::new(vertices).expect("regular polygons are tangential")
}

impl fmt::Display for TilingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TilingKind::Square => "square",
            TilingKind::Triangular => "triangular",
            TilingKind::Hexagonal => "hexagonal",
        })
    }
}

/// A finite window of a tiling of the plane.
#[derive(Clone, Debug)]
pub struct Tiling {
    pub name: String,
    pub window: Rect,
    pub polygons: Vec<Polygon>,
    pub constants: TilingConstants,
}

/// On-disk tiling document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TilingSpec {
    #[serde(default)]
    pub schema_version: Option<u32>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub window: Option<Rect>,
    pub polygons: Vec<Vec<Point>>,
}

impl Tiling {
    fn from_polygons(name: String, window: Rect, polygons: Vec<Polygon>) -> Self {
        let constants = tiling_constants_of(&polygons);
        Self {
            name,
            window,
            polygons,
            constants,
        }
    }

    pub fn to_spec(&self) -> TilingSpec {
        TilingSpec {
            schema_version: Some(TILING_SCHEMA_VERSION),
            name: Some(self.name.clone()),
            window: Some(self.window),
            polygons: self.polygons.iter().map(|p| p.vertices.clone()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_spec()).expect("tiling spec serializes")
    }

    /// The tiling scaled about the origin.
    pub fn dilated(&self, factor: f64) -> Self {
        let w = self.window;
        Self {
            name: self.name.clone(),
            window: Rect::new(w.x0 * factor, w.y0 * factor, w.x1 * factor, w.y1 * factor),
            polygons: self.polygons.iter().map(|p| p.dilated(factor)).collect(),
            constants: self.constants.dilated(factor),
        }
    }

    /// The tiling under a rigid motion. The window becomes the bounding box
    /// of the moved window.
    pub fn moved(&self, angle: f64, shift: Point) -> Self {
        let polygons: Vec<Polygon> = self.polygons.iter().map(|p| p.moved(angle, shift)).collect();
        let corners: Vec<Point> = self
            .window
            .corners()
            .iter()
            .map(|&c| c.rotated(angle) + shift)
            .collect();
        Self::from_polygons(self.name.clone(), Rect::bounding(&corners), polygons)
    }

    pub fn total_area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }

    /// Sum of polygon areas clipped to the window.
    pub fn covered_window_area(&self) -> f64 {
        self.polygons
            .iter()
            .map(|p| clipped_area(p, &self.window))
            .sum()
    }
}

/// Generates one of the three regular tilings with the given side length,
/// keeping every polygon whose interior meets the window.
pub fn make_regular_tiling(kind: TilingKind, side: f64, window: Rect) -> Result<Tiling, GeometryError> {
    if !(side > 0.0 && side.is_finite()) {
        return Err(GeometryError::InvalidSide(side));
    }
    if window.is_empty() {
        return Err(GeometryError::EmptyWindow);
    }
    let candidates: Vec<Vec<Point>> = match kind {
        TilingKind::Square => square_cells(side, &window),
        TilingKind::Triangular => triangle_cells(side, &window),
        TilingKind::Hexagonal => hexagon_cells(side, &window),
    };
    let mut polygons = Vec::new();
    let mut fits_inside = false;
    for verts in candidates {
        let bbox = Rect::bounding(&verts);
        if !bbox.overlaps(&window) {
            continue;
        }
        let polygon = Polygon::new(verts).map_err(|source| GeometryError::InvalidPolygon {
            index: polygons.len(),
            source,
        })?;
        if clipped_area(&polygon, &window) > 1e-9 * polygon.area() {
            fits_inside |= window.contains_rect(&bbox);
            polygons.push(polygon);
        }
    }
    if !fits_inside {
        return Err(GeometryError::EmptyWindow);
    }
    let name = format!("{kind}-{side}");
    Ok(Tiling::from_polygons(name, window, polygons))
}

fn square_cells(s: f64, w: &Rect) -> Vec<Vec<Point>> {
    let (i0, i1) = ((w.x0 / s).floor() as i64 - 1, (w.x1 / s).ceil() as i64 + 1);
    let (j0, j1) = ((w.y0 / s).floor() as i64 - 1, (w.y1 / s).ceil() as i64 + 1);
    let mut cells = Vec::new();
    for j in j0..j1 {
        for i in i0..i1 {
            let (x, y) = (i as f64 * s, j as f64 * s);
            cells.push(vec![
                Point::new(x, y),
                Point::new(x + s, y),
                Point::new(x + s, y + s),
                Point::new(x, y + s),
            ]);
        }
    }
    cells
}

fn triangle_cells(s: f64, w: &Rect) -> Vec<Vec<Point>> {
    let row = s * 3f64.sqrt() / 2.0;
    let (j0, j1) = ((w.y0 / row).floor() as i64 - 1, (w.y1 / row).ceil() as i64 + 1);
    let mut cells = Vec::new();
    for j in j0..j1 {
        let y = j as f64 * row;
        let shift = j as f64 * s / 2.0;
        let i0 = ((w.x0 - shift) / s).floor() as i64 - 2;
        let i1 = ((w.x1 - shift) / s).ceil() as i64 + 2;
        for i in i0..i1 {
            let x = i as f64 * s + shift;
            let p = Point::new(x, y);
            let q = Point::new(x + s, y);
            let top = Point::new(x + s / 2.0, y + row);
            let top_right = Point::new(x + 1.5 * s, y + row);
            cells.push(vec![p, q, top]);
            cells.push(vec![q, top_right, top]);
        }
    }
    cells
}

fn hexagon_cells(s: f64, w: &Rect) -> Vec<Vec<Point>> {
    let half = s * 3f64.sqrt() / 2.0;
    let (i0, i1) = ((w.x0 / (1.5 * s)).floor() as i64 - 2, (w.x1 / (1.5 * s)).ceil() as i64 + 2);
    let offsets = [
        Point::new(s, 0.0),
        Point::new(s / 2.0, half),
        Point::new(-s / 2.0, half),
        Point::new(-s, 0.0),
        Point::new(-s / 2.0, -half),
        Point::new(s / 2.0, -half),
    ];
    let mut cells = Vec::new();
    for i in i0..i1 {
        let cx = 1.5 * s * i as f64;
        let stagger = if i.rem_euclid(2) == 1 { half } else { 0.0 };
        let j0 = ((w.y0 - stagger) / (2.0 * half)).floor() as i64 - 2;
        let j1 = ((w.y1 - stagger) / (2.0 * half)).ceil() as i64 + 2;
        for j in j0..j1 {
            let c = Point::new(cx, 2.0 * half * j as f64 + stagger);
            cells.push(offsets.iter().map(|&o| c + o).collect());
        }
    }
    cells
}

/// Parses and validates a tiling document: convexity, tangency and pairwise
/// disjoint interiors, each failure naming the offending polygon.
pub fn load_tiling(doc: &str) -> Result<Tiling, GeometryError> {
    let spec: TilingSpec = serde_json::from_str(doc)?;
    tiling_from_spec(spec)
}

pub fn tiling_from_spec(spec: TilingSpec) -> Result<Tiling, GeometryError> {
    if spec.polygons.is_empty() {
        return Err(GeometryError::NoPolygons);
    }
    let polygons = spec
        .polygons
        .into_iter()
        .enumerate()
        .map(|(index, verts)| Polygon::new(verts).map_err(|source| GeometryError::InvalidPolygon { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    check_disjoint(&polygons)?;
    let all: Vec<Point> = polygons.iter().flat_map(|p| p.vertices.iter().copied()).collect();
    let window = spec.window.unwrap_or_else(|| Rect::bounding(&all));
    if window.is_empty() {
        return Err(GeometryError::EmptyWindow);
    }
    let name = spec.name.unwrap_or_else(|| "custom".to_string());
    Ok(Tiling::from_polygons(name, window, polygons))
}

fn check_disjoint(polygons: &[Polygon]) -> Result<(), GeometryError> {
    let boxes: Vec<Rect> = polygons.iter().map(Polygon::bbox).collect();
    let mut order: Vec<usize> = (0..polygons.len()).collect();
    order.sort_by(|&a, &b| boxes[a].x0.total_cmp(&boxes[b].x0));
    for (pos, &a) in order.iter().enumerate() {
        for &b in &order[pos + 1..] {
            if boxes[b].x0 >= boxes[a].x1 {
                break;
            }
            if !boxes[a].overlaps(&boxes[b]) {
                continue;
            }
            let shared = clip_convex(polygons[a].vertices(), polygons[b].vertices());
            let area = if shared.len() < 3 { 0.0 } else { polygon_area(&shared) };
            let scale = polygons[a].area().min(polygons[b].area());
            if area > 1e-9 * scale {
                let (first, second) = (a.min(b), a.max(b));
                return Err(GeometryError::Overlap { first, second, area });
            }
        }
    }
    Ok(())
}

/// Exact min/max of the inradius and perimeter over the window's polygons,
/// and the shortest skeleton edge (sides split at corners of neighbours).
pub fn tiling_constants(tiling: &Tiling) -> TilingConstants {
    tiling_constants_of(&tiling.polygons)
}

fn tiling_constants_of(polygons: &[Polygon]) -> TilingConstants {
    let mut h = f64::INFINITY;
    let mut big_h: f64 = 0.0;
    let mut m: f64 = 0.0;
    for p in polygons {
        h = h.min(p.inradius);
        big_h = big_h.max(p.inradius);
        m = m.max(p.perimeter());
    }
    let seg = segment_polygons(polygons);
    let l_min = seg
        .chains
        .iter()
        .flatten()
        .flat_map(|chain| chain.windows(2).map(|w| seg.points[w[0]].distance(seg.points[w[1]])))
        .fold(f64::INFINITY, f64::min);
    TilingConstants {
        h,
        big_h,
        m,
        l_min,
        d_max: None,
    }
}

/// Polygon boundaries cut at every corner point of the tiling.
pub(crate) struct Segmentation {
    /// Distinct corner points after merging coincident ones.
    pub points: Vec<Point>,
    /// Per polygon, per side: point ids from the side's start corner to its
    /// end corner, including corners of other polygons lying on the side.
    pub chains: Vec<Vec<Vec<usize>>>,
}

pub(crate) fn segment_polygons(polygons: &[Polygon]) -> Segmentation {
    let raw_min = polygons
        .iter()
        .flat_map(|p| p.side_lengths())
        .fold(f64::INFINITY, f64::min);
    let tol = COINCIDENCE_TOL * raw_min;
    let mut index = PointIndex::new(raw_min, tol);
    let corner_ids: Vec<Vec<usize>> = polygons
        .iter()
        .map(|p| p.vertices.iter().map(|&v| index.insert(v)).collect())
        .collect();
    let chains = polygons
        .iter()
        .zip(&corner_ids)
        .map(|(p, ids)| {
            let n = ids.len();
            (0..n)
                .map(|i| {
                    let (a, b) = p.side(i);
                    let mut inner: Vec<(f64, usize)> = index
                        .near_open_segment(a, b)
                        .into_iter()
                        .filter(|&id| id != ids[i] && id != ids[(i + 1) % n])
                        .map(|id| ((index.points[id] - a).dot(b - a), id))
                        .collect();
                    inner.sort_by(|x, y| x.0.total_cmp(&y.0));
                    let mut chain = Vec::with_capacity(inner.len() + 2);
                    chain.push(ids[i]);
                    chain.extend(inner.into_iter().map(|(_, id)| id));
                    chain.push(ids[(i + 1) % n]);
                    chain
                })
                .collect()
        })
        .collect();
    Segmentation {
        points: index.points,
        chains,
    }
}

/// Bucketed point set with merge-on-insert at a fixed tolerance.
pub(crate) struct PointIndex {
    cell: f64,
    tol: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    pub points: Vec<Point>,
}

impl PointIndex {
    pub fn new(cell: f64, tol: f64) -> Self {
        Self {
            cell,
            tol,
            buckets: HashMap::new(),
            points: Vec::new(),
        }
    }

    fn key(&self, p: Point) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    pub fn find(&self, p: Point) -> Option<usize> {
        let (kx, ky) = self.key(p);
        let mut best: Option<(f64, usize)> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &id in ids {
                        let d = self.points[id].distance(p);
                        if d <= self.tol && best.map_or(true, |(bd, bid)| (d, id) < (bd, bid)) {
                            best = Some((d, id));
                        }
                    }
                }
            }
        }
        best.map(|(_, id)| id)
    }

    pub fn insert(&mut self, p: Point) -> usize {
        if let Some(id) = self.find(p) {
            return id;
        }
        let id = self.points.len();
        self.points.push(p);
        let key = self.key(p);
        self.buckets.entry(key).or_default().push(id);
        id
    }

    /// Ids of points within `tol` of the open segment `(a, b)`.
    pub fn near_open_segment(&self, a: Point, b: Point) -> Vec<usize> {
        let len = a.distance(b);
        let dir = (b - a) * (1.0 / len);
        let (k0x, k0y) = self.key(Point::new(a.x.min(b.x) - self.tol, a.y.min(b.y) - self.tol));
        let (k1x, k1y) = self.key(Point::new(a.x.max(b.x) + self.tol, a.y.max(b.y) + self.tol));
        let mut out = Vec::new();
        for kx in k0x..=k1x {
            for ky in k0y..=k1y {
                if let Some(ids) = self.buckets.get(&(kx, ky)) {
                    for &id in ids {
                        let q = self.points[id] - a;
                        let along = q.dot(dir);
                        if along > self.tol && along < len - self.tol && dir.cross(q).abs() <= self.tol {
                            out.push(id);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[[f64; 2]]) -> Vec<Point> {
        raw.iter().map(|&p| p.into()).collect()
    }

    #[test]
    fn unit_square_incircle() {
        let (c, r) = incircle(&pts(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])).unwrap();
        assert!((c.x - 0.5).abs() < 1e-14 && (c.y - 0.5).abs() < 1e-14);
        assert!((r - 0.5).abs() < 1e-14);
    }

    #[test]
    fn equilateral_triangle_incircle_matches_area_over_semiperimeter() {
        let tri = pts(&[[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]]);
        let (_, r) = incircle(&tri).unwrap();
        let oracle = 2.0 * polygon_area(&tri) / 3.0;
        assert!((r - oracle).abs() < 1e-14);
        assert!((r - 0.288_675_134_594_812_9).abs() < 1e-12);
    }

    #[test]
    fn rectangle_has_no_incircle() {
        let err = incircle(&pts(&[[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]])).unwrap_err();
        match err {
            PolygonError::NoIncircle { distances, .. } => assert_eq!(distances.len(), 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nonconvex_and_clockwise() {
        let dart = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 0.5], [1.0, 2.0]]);
        assert!(matches!(Polygon::new(dart), Err(PolygonError::NonConvex(_))));
        let cw = pts(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!(matches!(Polygon::new(cw), Err(PolygonError::NonConvex(_))));
        let collinear = pts(&[[0.0, 0.0], [0.5, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        assert!(matches!(Polygon::new(collinear), Err(PolygonError::NonConvex(_))));
    }

    fn assert_constants(c: TilingConstants, expected: [f64; 4]) {
        let got = [c.h, c.big_h, c.m, c.l_min];
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
        }
    }

    #[test]
    fn square_window_has_sixteen_cells() {
        let t = make_regular_tiling(TilingKind::Square, 1.0, Rect::square(4.0)).unwrap();
        assert_eq!(t.polygons.len(), 16);
        assert!(t.polygons.iter().all(|p| (p.inradius() - 0.5).abs() < 1e-14));
        assert_constants(t.constants, [0.5, 0.5, 4.0, 1.0]);
    }

    #[test]
    fn window_smaller_than_a_cell_is_empty() {
        let err = make_regular_tiling(TilingKind::Hexagonal, 1.0, Rect::square(0.5)).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyWindow));
        let err = make_regular_tiling(TilingKind::Square, 1.0, Rect::new(0.0, 0.0, 0.0, 3.0)).unwrap_err();
        assert!(matches!(err, GeometryError::EmptyWindow));
    }

    #[test]
    fn regular_inradii() {
        let w = Rect::square(6.0);
        let tri = make_regular_tiling(TilingKind::Triangular, 1.0, w).unwrap();
        let hex = make_regular_tiling(TilingKind::Hexagonal, 1.0, w).unwrap();
        for p in &tri.polygons {
            assert!((p.inradius() - 1.0 / (2.0 * 3f64.sqrt())).abs() < 1e-12);
        }
        for p in &hex.polygons {
            assert!((p.inradius() - 3f64.sqrt() / 2.0).abs() < 1e-12);
        }
        assert!((tri.constants.m - 3.0).abs() < 1e-12);
        assert!((tri.constants.l_min - 1.0).abs() < 1e-12);
        assert!((hex.constants.m - 6.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_squares_constants_and_split_side() {
        let doc = r#"{"name": "mixed", "polygons": [
            [[0,0],[2,0],[2,2],[0,2]],
            [[2,0],[3,0],[3,1],[2,1]],
            [[2,1],[3,1],[3,2],[2,2]]]}"#;
        let t = load_tiling(doc).unwrap();
        assert_constants(t.constants, [0.5, 1.0, 8.0, 1.0]);
        let seg = segment_polygons(&t.polygons);
        // Right side of the big square is cut at (2, 1).
        assert_eq!(seg.chains[0][1].len(), 3);
    }

    #[test]
    fn load_reports_offending_polygon() {
        let rect = r#"{"polygons": [[[0,0],[1,0],[1,1],[0,1]], [[1,0],[3,0],[3,1],[1,1]]]}"#;
        match load_tiling(rect).unwrap_err() {
            GeometryError::InvalidPolygon { index: 1, source: PolygonError::NoIncircle { .. } } => {}
            other => panic!("unexpected {other}"),
        }
        let overlap = r#"{"polygons": [[[0,0],[1,0],[1,1],[0,1]], [[0.5,0],[1.5,0],[1.5,1],[0.5,1]]]}"#;
        assert!(matches!(
            load_tiling(overlap).unwrap_err(),
            GeometryError::Overlap { first: 0, second: 1, .. }
        ));
        let dart = r#"{"polygons": [[[0,0],[1,0],[1,1],[0,1]], [[0,0],[2,0],[1,0.5],[1,2]]]}"#;
        assert!(matches!(
            load_tiling(dart).unwrap_err(),
            GeometryError::InvalidPolygon { index: 1, source: PolygonError::NonConvex(_) }
        ));
    }

    #[test]
    fn spec_round_trip_preserves_tiling() {
        let t = make_regular_tiling(TilingKind::Triangular, 0.7, Rect::square(3.0)).unwrap();
        let back = load_tiling(&t.to_json()).unwrap();
        assert_eq!(back.polygons.len(), t.polygons.len());
        assert_eq!(back.constants, t.constants);
        assert_eq!(back.window, t.window);
    }

    #[test]
    fn clip_square_against_window() {
        let sq = Polygon::new(pts(&[[0.5, 0.5], [1.5, 0.5], [1.5, 1.5], [0.5, 1.5]])).unwrap();
        assert!((clipped_area(&sq, &Rect::square(1.0)) - 0.25).abs() < 1e-15);
    }
}
