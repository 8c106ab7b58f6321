//! Conforming triangulations of convex polygons.
//!
//! A [`Mesh`] is immutable once built. Every constructor goes through
//! [`Mesh::from_triangles`], which derives the edge table, the triangle/edge
//! adjacency and the counterclockwise boundary cycle from a plain vertex and
//! triangle list.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct Vertex {
    pub id: usize,
    pub position: Point,
    pub on_boundary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: usize,
    /// Endpoints with the smaller vertex id first.
    pub endpoints: [usize; 2],
    /// The first incident triangle and, for interior edges, the second one.
    pub triangles: (usize, Option<usize>),
    pub midpoint: Point,
    pub length: f64,
    /// Position of this edge in [`Mesh::boundary_cycle`], if it lies on the boundary.
    pub boundary_index: Option<usize>,
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.triangles.1.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triangle {
    pub id: usize,
    pub vertices: [usize; 3],
    /// `edges[i]` is the edge opposite `vertices[i]`.
    pub edges: [usize; 3],
    pub area: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    pub triangles: Vec<Triangle>,
    /// Largest triangle diameter.
    pub h: f64,
    /// Boundary edge ids in counterclockwise order. Edge `i` of the cycle runs
    /// from `boundary_vertices[i]` to `boundary_vertices[i + 1]` (cyclically).
    pub boundary_cycle: Vec<usize>,
    /// Boundary vertex ids in cycle order; vertex `i` is shared by cycle edges
    /// `i - 1` and `i`.
    pub boundary_vertices: Vec<usize>,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Mesh {
    /// Builds a mesh from vertex positions and triangle vertex triples.
    ///
    /// Triangles are expected counterclockwise but orientation is not
    /// enforced here; [`validate`] reports violations. Construction fails for
    /// out-of-range indices, degenerate triangles, edges shared by more than
    /// two triangles, and boundaries that are not a single closed loop.
    pub fn from_triangles(positions: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Mesh> {
        if triangles.is_empty() {
            return Err(Error::InvalidMesh("no triangles".into()));
        }
        if let Some(p) = positions.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidMesh(format!("non-finite vertex position {p:?}")));
        }
        let nv = positions.len();
        let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edge_tris: Vec<Vec<usize>> = Vec::new();
        let mut edge_ends: Vec<[usize; 2]> = Vec::new();
        let mut tris = Vec::with_capacity(triangles.len());

        for (tid, tv) in triangles.iter().enumerate() {
            if tv.iter().any(|&v| v >= nv) {
                return Err(Error::InvalidMesh(format!("triangle {tid} references a missing vertex")));
            }
            if tv[0] == tv[1] || tv[1] == tv[2] || tv[0] == tv[2] {
                return Err(Error::InvalidMesh(format!("triangle {tid} repeats a vertex")));
            }
            let p = tv.map(|v| positions[v]);
            let diameter = dist(p[0], p[1]).max(dist(p[1], p[2])).max(dist(p[2], p[0]));
            let area = 0.5 * cross(p[0], p[1], p[2]).abs();
            if area <= 1e-14 * diameter * diameter {
                return Err(Error::DegenerateTriangle { triangle: tid, area });
            }
            let mut edges = [0usize; 3];
            for (i, slot) in edges.iter_mut().enumerate() {
                let a = tv[(i + 1) % 3];
                let b = tv[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    edge_tris.push(Vec::with_capacity(2));
                    edge_ends.push([key.0, key.1]);
                    edge_ends.len() - 1
                });
                edge_tris[id].push(tid);
                *slot = id;
            }
            tris.push(Triangle { id: tid, vertices: *tv, edges, area, diameter });
        }

        let mut edges = Vec::with_capacity(edge_ends.len());
        for (id, (ends, ts)) in edge_ends.iter().zip(&edge_tris).enumerate() {
            let triangles = match ts.as_slice() {
                [t] => (*t, None),
                [t, s] => (*t, Some(*s)),
                _ => return Err(Error::InvalidMesh(format!("edge {ends:?} is shared by {} triangles", ts.len()))),
            };
            let (a, b) = (positions[ends[0]], positions[ends[1]]);
            edges.push(Edge {
                id,
                endpoints: *ends,
                triangles,
                midpoint: [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                length: dist(a, b),
                boundary_index: None,
            });
        }

        let (boundary_cycle, boundary_vertices) = build_boundary_cycle(&positions, &edges)?;
        for (i, &e) in boundary_cycle.iter().enumerate() {
            edges[e].boundary_index = Some(i);
        }
        let mut on_boundary = vec![false; nv];
        for &v in &boundary_vertices {
            on_boundary[v] = true;
        }
        let vertices = positions
            .iter()
            .enumerate()
            .map(|(id, &position)| Vertex { id, position, on_boundary: on_boundary[id] })
            .collect();
        let h = tris.iter().map(|t| t.diameter).fold(0.0, f64::max);
        Ok(Mesh { vertices, edges, triangles: tris, h, boundary_cycle, boundary_vertices })
    }

    pub fn num_boundary_edges(&self) -> usize {
        self.boundary_cycle.len()
    }

    pub fn position(&self, v: usize) -> Point {
        self.vertices[v].position
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        self.triangles[t].vertices.map(|v| self.vertices[v].position)
    }

    /// Twice the signed area; positive for counterclockwise triangles.
    pub fn signed_double_area(&self, t: usize) -> f64 {
        let p = self.triangle_points(t);
        cross(p[0], p[1], p[2])
    }

    /// Gradients of the barycentric coordinates on triangle `t`.
    pub fn barycentric_gradients(&self, t: usize) -> [[f64; 2]; 3] {
        let p = self.triangle_points(t);
        let d = self.signed_double_area(t);
        let mut g = [[0.0; 2]; 3];
        for (i, gi) in g.iter_mut().enumerate() {
            let pj = p[(i + 1) % 3];
            let pk = p[(i + 2) % 3];
            *gi = [(pj[1] - pk[1]) / d, (pk[0] - pj[0]) / d];
        }
        g
    }

    /// Maps barycentric coordinates on triangle `t` to a physical point.
    pub fn point_at(&self, t: usize, bary: [f64; 3]) -> Point {
        let p = self.triangle_points(t);
        [
            bary[0] * p[0][0] + bary[1] * p[1][0] + bary[2] * p[2][0],
            bary[0] * p[0][1] + bary[1] * p[1][1] + bary[2] * p[2][1],
        ]
    }

    /// Start and end point of cycle edge `i`, in counterclockwise direction.
    pub fn boundary_segment(&self, i: usize) -> (Point, Point) {
        let n = self.boundary_vertices.len();
        (self.position(self.boundary_vertices[i]), self.position(self.boundary_vertices[(i + 1) % n]))
    }

    /// Outward unit normal of cycle edge `i`.
    pub fn boundary_normal(&self, i: usize) -> [f64; 2] {
        let (a, b) = self.boundary_segment(i);
        let l = dist(a, b);
        [(b[1] - a[1]) / l, -(b[0] - a[0]) / l]
    }

    /// Lengths of the boundary edges in cycle order.
    pub fn boundary_lengths(&self) -> Vec<f64> {
        self.boundary_cycle.iter().map(|&e| self.edges[e].length).collect()
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary_lengths().iter().sum()
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| t.area).sum()
    }

    /// Ids of the edges not on the boundary, in increasing order.
    pub fn interior_edges(&self) -> Vec<usize> {
        self.edges.iter().filter(|e| !e.is_boundary()).map(|e| e.id).collect()
    }

    /// Interior angles of triangle `t` in radians, at `vertices[0..3]`.
    pub fn angles(&self, t: usize) -> [f64; 3] {
        triangle_angles(self.triangle_points(t))
    }

    pub fn min_angle_degrees(&self) -> f64 {
        (0..self.triangles.len()).flat_map(|t| self.angles(t)).fold(f64::INFINITY, f64::min).to_degrees()
    }

    /// Writes `v x y` per vertex and `t i j k` per triangle.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(w, "v {:.16e} {:.16e}", v.position[0], v.position[1])?;
        }
        for t in &self.triangles {
            writeln!(w, "t {} {} {}", t.vertices[0], t.vertices[1], t.vertices[2])?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Mesh> {
        let mut positions = Vec::new();
        let mut tris = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            let bad = || Error::Parse(format!("mesh line {}: {line:?}", lineno + 1));
            match it.next() {
                None => continue,
                Some("v") => {
                    let x = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    let y = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    positions.push([x, y]);
                }
                Some("t") => {
                    let mut t = [0usize; 3];
                    for slot in &mut t {
                        *slot = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
                    }
                    tris.push(t);
                }
                Some(_) => return Err(bad()),
            }
        }
        Mesh::from_triangles(positions, tris)
    }
}

fn triangle_angles(p: [Point; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, a) in out.iter_mut().enumerate() {
        let o = p[i];
        let u = [p[(i + 1) % 3][0] - o[0], p[(i + 1) % 3][1] - o[1]];
        let v = [p[(i + 2) % 3][0] - o[0], p[(i + 2) % 3][1] - o[1]];
        let c = u[0] * v[1] - u[1] * v[0];
        let d = u[0] * v[0] + u[1] * v[1];
        *a = c.abs().atan2(d);
    }
    out
}

fn build_boundary_cycle(positions: &[Point], edges: &[Edge]) -> Result<(Vec<usize>, Vec<usize>)> {
    let bedges: Vec<usize> = edges.iter().filter(|e| e.is_boundary()).map(|e| e.id).collect();
    if bedges.len() < 3 {
        return Err(Error::InvalidMesh(format!("only {} boundary edges", bedges.len())));
    }
    let mut incident: HashMap<usize, Vec<usize>> = HashMap::new();
    for &e in &bedges {
        for &v in &edges[e].endpoints {
            incident.entry(v).or_default().push(e);
        }
    }
    if let Some((v, es)) = incident.iter().find(|(_, es)| es.len() != 2) {
        return Err(Error::InvalidMesh(format!(
            "boundary vertex {v} touches {} boundary edges (non-manifold or hanging node)",
            es.len()
        )));
    }
    // Lexicographically smallest boundary vertex is a polygon corner and
    // survives refinement, which keeps arclength origins consistent.
    let start = *incident
        .keys()
        .min_by(|&&a, &&b| {
            let (pa, pb) = (positions[a], positions[b]);
            pa[0].total_cmp(&pb[0]).then(pa[1].total_cmp(&pb[1]))
        })
        .unwrap();

    let mut cycle = Vec::with_capacity(bedges.len());
    let mut verts = Vec::with_capacity(bedges.len());
    let mut v = start;
    let mut e = incident[&start][0];
    loop {
        cycle.push(e);
        verts.push(v);
        let [a, b] = edges[e].endpoints;
        v = if a == v { b } else { a };
        if v == start {
            break;
        }
        let es = &incident[&v];
        e = if es[0] == e { es[1] } else { es[0] };
        if cycle.len() > bedges.len() {
            return Err(Error::InvalidMesh("boundary walk does not close".into()));
        }
    }
    if cycle.len() != bedges.len() {
        return Err(Error::InvalidMesh(format!(
            "boundary splits into several loops ({} of {} edges reached)",
            cycle.len(),
            bedges.len()
        )));
    }
    let signed: f64 = (0..verts.len())
        .map(|i| {
            let p = positions[verts[i]];
            let q = positions[verts[(i + 1) % verts.len()]];
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if signed < 0.0 {
        // Reverse direction, keeping `start` as vertex 0.
        cycle.reverse();
        verts[1..].reverse();
    }
    Ok((cycle, verts))
}

/// Structured `n x n` grid on the unit square; every cell is split by the
/// diagonal from its lower-left to its upper-right corner.
pub fn triangulate_unit_square(n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::InvalidParameter("grid size must be at least 1".into()));
    }
    let idx = |i: usize, j: usize| j * (n + 1) + i;
    let mut positions = Vec::with_capacity((n + 1) * (n + 1));
    for j in 0..=n {
        for i in 0..=n {
            positions.push([i as f64 / n as f64, j as f64 / n as f64]);
        }
    }
    let mut tris = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let (p00, p10, p11, p01) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            tris.push([p00, p10, p11]);
            tris.push([p00, p11, p01]);
        }
    }
    Mesh::from_triangles(positions, tris)
}

/// Fan triangulation of a convex polygon from its vertex centroid.
pub fn triangulate_polygon_fan(corners: &[Point]) -> Result<Mesh> {
    let k = corners.len();
    if k < 3 {
        return Err(Error::InvalidParameter(format!("polygon needs at least 3 corners, got {k}")));
    }
    let scale = corners.iter().flat_map(|p| p.iter()).fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
    for i in 0..k {
        let c = cross(corners[i], corners[(i + 1) % k], corners[(i + 2) % k]);
        if !(c > 1e-12 * scale * scale) {
            return Err(Error::NonConvexPolygon { corner: (i + 1) % k });
        }
    }
    let cx = corners.iter().map(|p| p[0]).sum::<f64>() / k as f64;
    let cy = corners.iter().map(|p| p[1]).sum::<f64>() / k as f64;
    let mut positions = corners.to_vec();
    positions.push([cx, cy]);
    let tris = (0..k).map(|i| [k, i, (i + 1) % k]).collect();
    Mesh::from_triangles(positions, tris)
}

/// Corners of a regular polygon inscribed in the unit circle, counterclockwise,
/// first corner at angle -pi/2.
pub fn regular_polygon(sides: usize) -> Vec<Point> {
    (0..sides)
        .map(|i| {
            let a = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * i as f64 / sides as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Red refinement: every triangle is split into four similar children through
/// its edge midpoints.
pub fn refine_uniform(m: &Mesh) -> Mesh {
    let nv = m.vertices.len();
    let mut positions: Vec<Point> = m.vertices.iter().map(|v| v.position).collect();
    positions.extend(m.edges.iter().map(|e| e.midpoint));
    let mut tris = Vec::with_capacity(4 * m.triangles.len());
    for t in &m.triangles {
        let [v0, v1, v2] = t.vertices;
        let [m0, m1, m2] = t.edges.map(|e| nv + e);
        tris.push([v0, m2, m1]);
        tris.push([m2, v1, m0]);
        tris.push([m1, m0, v2]);
        tris.push([m0, m1, m2]);
    }
    Mesh::from_triangles(positions, tris).expect("refinement of a valid mesh is valid")
}

/// Returns the mesh unchanged if its boundary edge count is odd; otherwise
/// bisects one boundary edge and its triangle through the opposite vertex.
///
/// Among all boundary edges the one whose two children have the largest
/// minimum angle is chosen; ties go to the earliest edge in the cycle.
pub fn ensure_odd_boundary(m: &Mesh) -> Mesh {
    if m.num_boundary_edges() % 2 == 1 {
        return m.clone();
    }
    let mut best: Option<(f64, usize, usize, Point)> = None;
    for &e in &m.boundary_cycle {
        let edge = &m.edges[e];
        let t = edge.triangles.0;
        let local = m.triangles[t].edges.iter().position(|&x| x == e).unwrap();
        let tv = m.triangles[t].vertices;
        let (apex, a, b) = (m.position(tv[local]), m.position(tv[(local + 1) % 3]), m.position(tv[(local + 2) % 3]));
        let mid = edge.midpoint;
        let q = triangle_angles([apex, a, mid])
            .into_iter()
            .chain(triangle_angles([apex, mid, b]))
            .fold(f64::INFINITY, f64::min);
        if best.is_none_or(|(bq, ..)| q > bq + 1e-12) {
            best = Some((q, t, local, mid));
        }
    }
    let (_, t, local, mid) = best.expect("mesh has boundary edges");
    let mut positions: Vec<Point> = m.vertices.iter().map(|v| v.position).collect();
    positions.push(mid);
    let mv = positions.len() - 1;
    let tv = m.triangles[t].vertices;
    let (apex, a, b) = (tv[local], tv[(local + 1) % 3], tv[(local + 2) % 3]);
    let mut tris: Vec<[usize; 3]> = m.triangles.iter().map(|t| t.vertices).collect();
    tris[t] = [apex, a, mv];
    tris.push([apex, mv, b]);
    Mesh::from_triangles(positions, tris).expect("bisection of a valid mesh is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeshIssue {
    Orientation { triangle: usize, signed_area: f64 },
    Nonconforming(String),
    AngleBelowFloor { triangle: usize, degrees: f64 },
    BoundaryCycle(String),
    Euler { characteristic: i64 },
}

impl fmt::Display for MeshIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeshIssue::Orientation { triangle, signed_area } => {
                write!(f, "triangle {triangle} is clockwise (signed area {signed_area:e})")
            }
            MeshIssue::Nonconforming(s) => write!(f, "nonconforming: {s}"),
            MeshIssue::AngleBelowFloor { triangle, degrees } => {
                write!(f, "triangle {triangle} has an angle of {degrees:.3} degrees")
            }
            MeshIssue::BoundaryCycle(s) => write!(f, "boundary cycle: {s}"),
            MeshIssue::Euler { characteristic } => write!(f, "V - E + T = {characteristic}, expected 1"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub issues: Vec<MeshIssue>,
    pub min_angle_degrees: f64,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Default shape-regularity floor used by [`validate`].
pub const DEFAULT_MIN_ANGLE_DEGREES: f64 = 15.0;

pub fn validate(m: &Mesh) -> ValidationReport {
    validate_with_floor(m, DEFAULT_MIN_ANGLE_DEGREES)
}

pub fn validate_with_floor(m: &Mesh, floor_degrees: f64) -> ValidationReport {
    let mut issues = Vec::new();
    for t in 0..m.triangles.len() {
        let s = m.signed_double_area(t);
        if s <= 0.0 {
            issues.push(MeshIssue::Orientation { triangle: t, signed_area: 0.5 * s });
        }
        let a = m.angles(t).into_iter().fold(f64::INFINITY, f64::min).to_degrees();
        if a < floor_degrees - 1e-9 {
            issues.push(MeshIssue::AngleBelowFloor { triangle: t, degrees: a });
        }
    }

    for e in &m.edges {
        if !e.is_boundary() {
            continue;
        }
        let (a, b) = (m.position(e.endpoints[0]), m.position(e.endpoints[1]));
        for v in &m.vertices {
            if e.endpoints.contains(&v.id) {
                continue;
            }
            let p = v.position;
            let c = cross(a, b, p);
            let t = ((p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1])) / (e.length * e.length);
            if c.abs() <= 1e-12 * e.length * e.length && t > 1e-12 && t < 1.0 - 1e-12 {
                issues.push(MeshIssue::Nonconforming(format!("vertex {} hangs on edge {}", v.id, e.id)));
            }
        }
    }

    let n = m.boundary_cycle.len();
    let nb = m.edges.iter().filter(|e| e.is_boundary()).count();
    if n != nb {
        issues.push(MeshIssue::BoundaryCycle(format!("cycle has {n} edges, mesh has {nb} boundary edges")));
    }
    let mut seen = vec![false; m.edges.len()];
    for (i, &e) in m.boundary_cycle.iter().enumerate() {
        if seen[e] {
            issues.push(MeshIssue::BoundaryCycle(format!("edge {e} visited twice")));
        }
        seen[e] = true;
        let next = m.boundary_cycle[(i + 1) % n];
        let shared = m.edges[e].endpoints.iter().filter(|v| m.edges[next].endpoints.contains(v)).count();
        if shared != 1 {
            issues.push(MeshIssue::BoundaryCycle(format!("edges {e} and {next} share {shared} vertices")));
        }
        let (p, q) = m.boundary_segment(i);
        let ends = m.edges[e].endpoints.map(|v| m.position(v));
        if !((ends[0] == p && ends[1] == q) || (ends[0] == q && ends[1] == p)) {
            issues.push(MeshIssue::BoundaryCycle(format!("cycle vertex order disagrees with edge {e}")));
        }
    }
    let signed: f64 = (0..n)
        .map(|i| {
            let (p, q) = m.boundary_segment(i);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if signed <= 0.0 {
        issues.push(MeshIssue::BoundaryCycle("cycle is not counterclockwise".into()));
    }

    let chi = m.vertices.len() as i64 - m.edges.len() as i64 + m.triangles.len() as i64;
    if chi != 1 {
        issues.push(MeshIssue::Euler { characteristic: chi });
    }

    ValidationReport { issues, min_angle_degrees: m.min_angle_degrees() }
}

/// Bucket grid for locating points in a mesh.
pub struct PointLocator<'a> {
    mesh: &'a Mesh,
    origin: Point,
    cell: f64,
    dims: [usize; 2],
    buckets: Vec<Vec<usize>>,
}

impl<'a> PointLocator<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for v in &mesh.vertices {
            for d in 0..2 {
                lo[d] = lo[d].min(v.position[d]);
                hi[d] = hi[d].max(v.position[d]);
            }
        }
        let nt = mesh.triangles.len() as f64;
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let cell = (extent / nt.sqrt().max(1.0)).max(1e-300);
        let dims = [((hi[0] - lo[0]) / cell).floor() as usize + 1, ((hi[1] - lo[1]) / cell).floor() as usize + 1];
        let mut buckets = vec![Vec::new(); dims[0] * dims[1]];
        for t in 0..mesh.triangles.len() {
            let p = mesh.triangle_points(t);
            let bx0 = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min);
            let bx1 = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max);
            let by0 = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min);
            let by1 = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max);
            let i0 = (((bx0 - lo[0]) / cell).floor() as usize).min(dims[0] - 1);
            let i1 = (((bx1 - lo[0]) / cell).floor() as usize).min(dims[0] - 1);
            let j0 = (((by0 - lo[1]) / cell).floor() as usize).min(dims[1] - 1);
            let j1 = (((by1 - lo[1]) / cell).floor() as usize).min(dims[1] - 1);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    buckets[j * dims[0] + i].push(t);
                }
            }
        }
        PointLocator { mesh, origin: lo, cell, dims, buckets }
    }

    /// Triangle containing `p` and the barycentric coordinates of `p` in it.
    ///
    /// Points slightly outside the mesh (roundoff) are attributed to the
    /// nearest candidate triangle; points far outside return `None`.
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        let i = ((p[0] - self.origin[0]) / self.cell).floor();
        let j = ((p[1] - self.origin[1]) / self.cell).floor();
        if i < -1.0 || j < -1.0 || i > self.dims[0] as f64 || j > self.dims[1] as f64 {
            return None;
        }
        let i = (i.max(0.0) as usize).min(self.dims[0] - 1);
        let j = (j.max(0.0) as usize).min(self.dims[1] - 1);
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for &t in &self.buckets[j * self.dims[0] + i] {
            let b = self.barycentric(t, p);
            let worst = b.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -1e-12 {
                return Some((t, b));
            }
            if best.is_none_or(|(w, ..)| worst > w) {
                best = Some((worst, t, b));
            }
        }
        best.filter(|(w, ..)| *w > -1e-8).map(|(_, t, b)| (t, b))
    }

    fn barycentric(&self, t: usize, p: Point) -> [f64; 3] {
        let q = self.mesh.triangle_points(t);
        let d = cross(q[0], q[1], q[2]);
        let l1 = cross(q[0], p, q[2]) / d;
        let l2 = cross(q[0], q[1], p) / d;
        [1.0 - l1 - l2, l1, l2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(m: &Mesh) -> (usize, usize, usize) {
        (m.triangles.len(), m.edges.len(), m.num_boundary_edges())
    }

    #[test]
    fn unit_square_counts() {
        assert_eq!(counts(&triangulate_unit_square(1).unwrap()), (2, 5, 4));
        assert_eq!(counts(&triangulate_unit_square(2).unwrap()), (8, 16, 8));
        let m = triangulate_unit_square(4).unwrap();
        assert_eq!(m.triangles.len(), 32);
        assert_eq!(m.num_boundary_edges(), 16);
        assert!((m.h - 2f64.sqrt() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn edge_count_matches_enumeration() {
        // Each triangle contributes three edge slots; interior edges are counted twice.
        for n in 1..6 {
            let m = triangulate_unit_square(n).unwrap();
            let slots = 3 * m.triangles.len();
            let interior = m.edges.iter().filter(|e| !e.is_boundary()).count();
            assert_eq!(slots, 2 * interior + m.num_boundary_edges());
            assert_eq!(m.edges.len(), 3 * n * n + 2 * n);
        }
    }

    #[test]
    fn fan_counts() {
        let tri = triangulate_polygon_fan(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!((tri.triangles.len(), tri.num_boundary_edges()), (3, 3));
        let sq = triangulate_polygon_fan(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        assert_eq!((sq.triangles.len(), sq.num_boundary_edges()), (4, 4));
        let pent = triangulate_polygon_fan(&regular_polygon(5)).unwrap();
        assert_eq!((pent.triangles.len(), pent.num_boundary_edges()), (5, 5));
    }

    #[test]
    fn fan_rejects_nonconvex_and_clockwise() {
        let dart = [[0.0, 0.0], [2.0, 0.0], [1.0, 0.3], [1.0, 2.0]];
        assert!(matches!(triangulate_polygon_fan(&dart), Err(Error::NonConvexPolygon { .. })));
        let cw = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert!(matches!(triangulate_polygon_fan(&cw), Err(Error::NonConvexPolygon { .. })));
        assert!(triangulate_polygon_fan(&[[0.0, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn refinement_counts_and_similarity() {
        let r = refine_uniform(&triangulate_unit_square(1).unwrap());
        assert_eq!(r.triangles.len(), 8);
        let pent = triangulate_polygon_fan(&regular_polygon(5)).unwrap();
        let r2 = refine_uniform(&refine_uniform(&pent));
        assert_eq!((r2.triangles.len(), r2.num_boundary_edges()), (80, 20));
        let r1 = refine_uniform(&pent);
        for (p, t) in pent.triangles.iter().enumerate() {
            for c in 0..4 {
                assert!((r1.triangles[4 * p + c].diameter - 0.5 * t.diameter).abs() < 1e-14);
            }
        }
        assert!((r1.min_angle_degrees() - pent.min_angle_degrees()).abs() < 1e-10);
        assert!((r1.h - 0.5 * pent.h).abs() < 1e-15);
    }

    #[test]
    fn odd_boundary_adjustment() {
        let pent = triangulate_polygon_fan(&regular_polygon(5)).unwrap();
        let same = ensure_odd_boundary(&pent);
        assert_eq!(counts(&same), counts(&pent));

        let m = ensure_odd_boundary(&triangulate_unit_square(2).unwrap());
        assert_eq!(m.num_boundary_edges(), 9);
        assert_eq!(m.triangles.len(), 9);
        // The bisected right triangle with legs h and h/2 has smallest angle atan(1/3).
        let expected = (1.0f64 / 3.0).atan().to_degrees();
        assert!((m.min_angle_degrees() - expected).abs() < 1e-10);
        let report = validate(&m);
        assert!(report.is_valid(), "{:?}", report.issues);
    }

    #[test]
    fn structured_square_is_valid_with_45_degree_angles() {
        for k in [1, 2, 3, 7, 16, 64] {
            let m = triangulate_unit_square(k).unwrap();
            let r = validate(&m);
            assert!(r.is_valid(), "k={k}: {:?}", r.issues);
            assert!((r.min_angle_degrees - 45.0).abs() < 1e-10);
        }
    }

    #[test]
    fn flipped_triangle_is_flagged() {
        let m = triangulate_unit_square(2).unwrap();
        let positions = m.vertices.iter().map(|v| v.position).collect();
        let mut tris: Vec<[usize; 3]> = m.triangles.iter().map(|t| t.vertices).collect();
        tris[3].swap(1, 2);
        let bad = Mesh::from_triangles(positions, tris).unwrap();
        let r = validate(&bad);
        assert_eq!(r.issues, vec![MeshIssue::Orientation { triangle: 3, signed_area: -0.125 }]);
    }

    #[test]
    fn boundary_cycle_starts_at_lexicographic_corner() {
        let m = triangulate_unit_square(3).unwrap();
        assert_eq!(m.position(m.boundary_vertices[0]), [0.0, 0.0]);
        // Counterclockwise: the first edge runs along the bottom side.
        assert_eq!(m.position(m.boundary_vertices[1]), [1.0 / 3.0, 0.0]);
        assert_eq!(m.boundary_normal(0), [0.0, -1.0]);
    }

    #[test]
    fn text_export_round_trips() {
        let m = ensure_odd_boundary(&triangulate_unit_square(3).unwrap());
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let back = Mesh::read_text(&buf[..]).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.triangles, m.triangles);
        let first = String::from_utf8(buf).unwrap();
        assert!(first.starts_with("v 0.0000000000000000e0 0.0000000000000000e0\n"));
    }

    #[test]
    fn locator_finds_vertices_and_centroids() {
        let m = ensure_odd_boundary(&refine_uniform(&triangulate_polygon_fan(&regular_polygon(5)).unwrap()));
        let loc = PointLocator::new(&m);
        for t in 0..m.triangles.len() {
            let c = m.point_at(t, [1.0 / 3.0; 3]);
            let (found, b) = loc.locate(c).unwrap();
            assert_eq!(found, t);
            assert!(b.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        }
        assert!(loc.locate([5.0, 5.0]).is_none());
    }

    proptest::proptest! {
        #[test]
        fn euler_relation_holds_under_refinement(sides in 3usize..9, levels in 0usize..3) {
            let mut m = triangulate_polygon_fan(&regular_polygon(sides)).unwrap();
            for _ in 0..levels {
                m = refine_uniform(&m);
            }
            let odd = ensure_odd_boundary(&m);
            for mesh in [&m, &odd] {
                let chi = mesh.vertices.len() as i64 - mesh.edges.len() as i64 + mesh.triangles.len() as i64;
                proptest::prop_assert_eq!(chi, 1);
                proptest::prop_assert!(validate_with_floor(mesh, 5.0).is_valid());
            }
            proptest::prop_assert_eq!(odd.num_boundary_edges() % 2, 1);
        }
    }
}
