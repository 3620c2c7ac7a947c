//! Triangulations of a rectangle with circular activation sites.
//!
//! A mesh comes in two flavours. [`DomainKind::Holed`] covers only the tissue
//! region (rectangle minus the disks). [`DomainKind::Full`] also meshes the disks;
//! the circles are then interior interfaces resolved by edges. Full meshes are
//! generated so that the tissue vertices come first, which makes the holed submesh
//! share vertex indices with its parent.

mod generate;
mod io;

pub use generate::{generate_mesh, validate_holes};
pub use io::{load_mesh, read_mesh, save_mesh, write_mesh};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("mesh refinement failed: {0}")]
    Refinement(String),
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("hole interfaces are not edge-resolved: {0}")]
    UnresolvedInterface(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoleSpec {
    pub center: Point,
    pub radius: f64,
}

impl HoleSpec {
    pub fn new(center: Point, radius: f64) -> Self {
        Self { center, radius }
    }
}

/// Axis-aligned rectangle `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rectangle {
    pub width: f64,
    pub height: f64,
}

impl Default for Rectangle {
    fn default() -> Self {
        Self::unit()
    }
}

impl Rectangle {
    pub fn unit() -> Self {
        Self {
            width: 1.0,
            height: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.width + self.height)
    }

    /// Counterclockwise corners starting at the origin.
    pub fn corners(&self) -> [Point; 4] {
        [
            [0.0, 0.0],
            [self.width, 0.0],
            [self.width, self.height],
            [0.0, self.height],
        ]
    }

    pub fn on_boundary(&self, p: Point, tol: f64) -> bool {
        let inside = p[0] >= -tol && p[0] <= self.width + tol && p[1] >= -tol && p[1] <= self.height + tol;
        inside
            && (p[0].abs() <= tol
                || (p[0] - self.width).abs() <= tol
                || p[1].abs() <= tol
                || (p[1] - self.height).abs() <= tol)
    }

    /// Counterclockwise arc-length coordinate of a boundary point, starting at the
    /// origin and running along the bottom edge first. Values lie in `[0, perimeter)`.
    pub fn arc_length(&self, p: Point) -> f64 {
        let (w, h) = (self.width, self.height);
        let tol = 1e-12 * (w + h);
        let s = if p[1].abs() <= tol && p[0] < w - tol {
            p[0]
        } else if (p[0] - w).abs() <= tol && p[1] < h - tol {
            w + p[1]
        } else if (p[1] - h).abs() <= tol && p[0] > tol {
            w + h + (w - p[0])
        } else {
            2.0 * w + h + (h - p[1])
        };
        let per = self.perimeter();
        if s >= per {
            s - per
        } else {
            s.max(0.0)
        }
    }

    /// Inverse of [`Rectangle::arc_length`].
    pub fn point_at(&self, s: f64) -> Point {
        let (w, h) = (self.width, self.height);
        let s = s.rem_euclid(self.perimeter());
        if s < w {
            [s, 0.0]
        } else if s < w + h {
            [w, s - w]
        } else if s < 2.0 * w + h {
            [w - (s - w - h), h]
        } else {
            [0.0, h - (s - 2.0 * w - h)]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BoundaryTag {
    Outer,
    Hole(usize),
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundaryTag::Outer => write!(f, "OUTER"),
            BoundaryTag::Hole(i) => write!(f, "HOLE:{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    Holed,
    Full,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    holes: Vec<HoleSpec>,
    domain: Rectangle,
    kind: DomainKind,
    /// Per triangle: `None` in the tissue region, `Some(i)` inside disk `i`.
    regions: Vec<Option<usize>>,
    target_h: f64,
}

/// Twice the signed area of the triangle `(a, b, c)`.
#[inline]
pub fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    pub(crate) fn from_parts(
        vertices: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
        holes: Vec<HoleSpec>,
        domain: Rectangle,
        kind: DomainKind,
        regions: Vec<Option<usize>>,
        target_h: f64,
    ) -> Self {
        Self {
            vertices,
            triangles,
            boundary_edges,
            holes,
            domain,
            kind,
            regions,
            target_h,
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn holes(&self) -> &[HoleSpec] {
        &self.holes
    }

    pub fn domain(&self) -> Rectangle {
        self.domain
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn regions(&self) -> &[Option<usize>] {
        &self.regions
    }

    /// Mesh size the generator was asked for (estimated from edge lengths for loaded meshes).
    pub fn target_h(&self) -> f64 {
        self.target_h
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn num_holes(&self) -> usize {
        self.holes.len()
    }

    pub fn triangle_points(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_points(t);
        0.5 * orient(a, b, c)
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.triangle_points(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_triangles()).map(|t| self.triangle_area(t)).sum()
    }

    /// Smallest interior angle over all triangles, in degrees.
    pub fn min_angle_deg(&self) -> f64 {
        let mut min = 180.0f64;
        for t in 0..self.num_triangles() {
            let p = self.triangle_points(t);
            for k in 0..3 {
                let (a, b, c) = (p[k], p[(k + 1) % 3], p[(k + 2) % 3]);
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cos = (u[0] * v[0] + u[1] * v[1]) / ((u[0].hypot(u[1])) * v[0].hypot(v[1]));
                min = min.min(cos.clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        min
    }

    pub fn max_edge_length(&self) -> f64 {
        let mut m = 0.0f64;
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (self.vertices[tri[k]], self.vertices[tri[(k + 1) % 3]]);
                m = m.max((a[0] - b[0]).hypot(a[1] - b[1]));
            }
        }
        m
    }

    /// Number of distinct edges.
    pub fn num_edges(&self) -> usize {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| (0..3).map(move |k| edge_key(t[k], t[(k + 1) % 3])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges.len()
    }

    pub fn edges_with_tag(&self, tag: BoundaryTag) -> impl Iterator<Item = &BoundaryEdge> {
        self.boundary_edges.iter().filter(move |e| e.tag == tag)
    }

    /// Sorted, deduplicated vertices on the circle of hole `i`.
    pub fn hole_vertices(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .edges_with_tag(BoundaryTag::Hole(i))
            .flat_map(|e| e.vertices)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Vertices on the outer rectangle, ordered by arc length.
    pub fn outer_vertices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .edges_with_tag(BoundaryTag::Outer)
            .flat_map(|e| e.vertices)
            .collect();
        v.sort_unstable();
        v.dedup();
        v.sort_by(|&a, &b| {
            self.domain
                .arc_length(self.vertices[a])
                .total_cmp(&self.domain.arc_length(self.vertices[b]))
        });
        v
    }

    /// Triangles lying inside disk `i` (full meshes only).
    pub fn hole_triangles(&self, i: usize) -> Vec<usize> {
        (0..self.num_triangles())
            .filter(|&t| self.regions[t] == Some(i))
            .collect()
    }

    /// Copy of the mesh with every vertex shifted by `displacement[v]`.
    pub fn displaced(&self, displacement: &[Point]) -> Mesh {
        assert_eq!(displacement.len(), self.num_vertices());
        let mut m = self.clone();
        for (p, d) in m.vertices.iter_mut().zip(displacement) {
            p[0] += d[0];
            p[1] += d[1];
        }
        m
    }

    /// Checks orientation, boundary-edge incidence and tag placement.
    pub fn validate(&self) -> Result<(), MeshError> {
        let n = self.num_vertices();
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(MeshError::Invalid(format!("triangle {t} references a missing vertex")));
            }
            if self.triangle_area(t) <= 0.0 {
                return Err(MeshError::Invalid(format!("triangle {t} is not counterclockwise")));
            }
        }
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                *count.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default() += 1;
            }
        }
        let h = self.target_h.max(self.max_edge_length() * 0.5);
        for e in &self.boundary_edges {
            let c = count.get(&edge_key(e.vertices[0], e.vertices[1])).copied().unwrap_or(0);
            let expected = match (self.kind, e.tag) {
                (DomainKind::Full, BoundaryTag::Hole(_)) => 2,
                _ => 1,
            };
            if c != expected {
                return Err(MeshError::Invalid(format!(
                    "boundary edge {:?} belongs to {c} triangles",
                    e.vertices
                )));
            }
            for &v in &e.vertices {
                let p = self.vertices[v];
                match e.tag {
                    BoundaryTag::Outer => {
                        if !self.domain.on_boundary(p, 1e-12) {
                            return Err(MeshError::Invalid(format!("OUTER vertex {v} is off the rectangle")));
                        }
                    }
                    BoundaryTag::Hole(i) => {
                        let hole = self.holes.get(i).ok_or_else(|| {
                            MeshError::Invalid(format!("edge tagged with unknown hole {i}"))
                        })?;
                        let d = (p[0] - hole.center[0]).hypot(p[1] - hole.center[1]);
                        if (d - hole.radius).abs() > 0.2 * h {
                            return Err(MeshError::Invalid(format!(
                                "HOLE:{i} vertex {v} is {:.3e} away from its circle",
                                (d - hole.radius).abs()
                            )));
                        }
                    }
                }
            }
        }
        if self.kind == DomainKind::Holed {
            let boundary_count = count.values().filter(|&&c| c == 1).count();
            if boundary_count != self.boundary_edges.len() {
                return Err(MeshError::Invalid(format!(
                    "{} edges have one triangle but {} are tagged",
                    boundary_count,
                    self.boundary_edges.len()
                )));
            }
        }
        Ok(())
    }
}

/// Splits a full mesh into its tissue submesh. Returns the submesh and the map from
/// submesh vertex index to full-mesh vertex index.
pub fn extract_submesh(full: &Mesh) -> Result<(Mesh, Vec<usize>), MeshError> {
    if full.kind != DomainKind::Full {
        return Err(MeshError::Invalid("extract_submesh needs a FULL mesh".into()));
    }
    // interface edges must separate tissue from the matching disk
    let mut tri_of_edge: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, tri) in full.triangles.iter().enumerate() {
        for k in 0..3 {
            tri_of_edge.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default().push(t);
        }
    }
    for e in &full.boundary_edges {
        if let BoundaryTag::Hole(i) = e.tag {
            let ts = tri_of_edge
                .get(&edge_key(e.vertices[0], e.vertices[1]))
                .cloned()
                .unwrap_or_default();
            let mut regions: Vec<Option<usize>> = ts.iter().map(|&t| full.regions[t]).collect();
            regions.sort();
            if regions != [None, Some(i)] {
                return Err(MeshError::UnresolvedInterface(format!(
                    "edge {:?} of HOLE:{i} does not separate tissue from disk {i}",
                    e.vertices
                )));
            }
        }
    }
    for (a, b) in tri_of_edge.values().filter_map(|ts| (ts.len() == 2).then(|| (ts[0], ts[1]))) {
        let (ra, rb) = (full.regions[a], full.regions[b]);
        if ra != rb {
            // any region change must be across a tagged interface edge
            let shared = shared_edge(full.triangles[a], full.triangles[b]);
            let tagged = full
                .boundary_edges
                .iter()
                .any(|e| edge_key(e.vertices[0], e.vertices[1]) == shared);
            if !tagged {
                return Err(MeshError::UnresolvedInterface(format!(
                    "triangles {a} and {b} change region across an untagged edge"
                )));
            }
        }
    }

    let tissue: Vec<usize> = (0..full.num_triangles()).filter(|&t| full.regions[t].is_none()).collect();
    let mut new_index = vec![usize::MAX; full.num_vertices()];
    let mut map = Vec::new();
    let mut used = vec![false; full.num_vertices()];
    for &t in &tissue {
        for &v in &full.triangles[t] {
            used[v] = true;
        }
    }
    for v in 0..full.num_vertices() {
        if used[v] {
            new_index[v] = map.len();
            map.push(v);
        }
    }
    let vertices = map.iter().map(|&v| full.vertices[v]).collect();
    let triangles = tissue
        .iter()
        .map(|&t| full.triangles[t].map(|v| new_index[v]))
        .collect();
    let boundary_edges = full
        .boundary_edges
        .iter()
        .map(|e| BoundaryEdge {
            vertices: e.vertices.map(|v| new_index[v]),
            tag: e.tag,
        })
        .collect();
    let sub = Mesh {
        vertices,
        triangles,
        boundary_edges,
        holes: full.holes.clone(),
        domain: full.domain,
        kind: DomainKind::Holed,
        regions: vec![None; tissue.len()],
        target_h: full.target_h,
    };
    Ok((sub, map))
}

fn shared_edge(a: [usize; 3], b: [usize; 3]) -> (usize, usize) {
    let common: Vec<usize> = a.iter().copied().filter(|v| b.contains(v)).collect();
    edge_key(common[0], common[1])
}

/// Boundary edges of a triangle set with their tags. Tissue-side orientation is used
/// for interface edges. Outer edges are sorted by arc length, hole edges by hole index
/// then polar angle.
pub(crate) fn tag_boundary(
    vertices: &[Point],
    triangles: &[[usize; 3]],
    regions: &[Option<usize>],
    holes: &[HoleSpec],
    domain: Rectangle,
) -> Vec<BoundaryEdge> {
    let mut owners: HashMap<(usize, usize), Vec<(usize, [usize; 2])>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            owners.entry(edge_key(a, b)).or_default().push((t, [a, b]));
        }
    }
    let mut outer = Vec::new();
    let mut inner = Vec::new();
    for list in owners.values() {
        match list.as_slice() {
            [(t, e)] => {
                let (p, q) = (vertices[e[0]], vertices[e[1]]);
                let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
                if regions[*t].is_none() && domain.on_boundary(p, 1e-12) && domain.on_boundary(q, 1e-12) && domain.on_boundary(mid, 1e-12) {
                    outer.push(BoundaryEdge {
                        vertices: *e,
                        tag: BoundaryTag::Outer,
                    });
                } else {
                    inner.push(BoundaryEdge {
                        vertices: *e,
                        tag: BoundaryTag::Hole(nearest_hole(mid, holes)),
                    });
                }
            }
            [(t1, e1), (t2, e2)] => {
                let (r1, r2) = (regions[*t1], regions[*t2]);
                if r1 != r2 {
                    let (e, other) = if r1.is_none() { (e1, r2) } else { (e2, r1) };
                    let i = other.unwrap_or_else(|| {
                        let (p, q) = (vertices[e[0]], vertices[e[1]]);
                        nearest_hole([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0], holes)
                    });
                    inner.push(BoundaryEdge {
                        vertices: *e,
                        tag: BoundaryTag::Hole(i),
                    });
                }
            }
            _ => {}
        }
    }
    outer.sort_by(|a, b| {
        domain
            .arc_length(vertices[a.vertices[0]])
            .total_cmp(&domain.arc_length(vertices[b.vertices[0]]))
    });
    let angle = |e: &BoundaryEdge| {
        let BoundaryTag::Hole(i) = e.tag else { return 0.0 };
        let (p, q) = (vertices[e.vertices[0]], vertices[e.vertices[1]]);
        let c = holes.get(i).map_or([0.0, 0.0], |h| h.center);
        ((p[1] + q[1]) / 2.0 - c[1]).atan2((p[0] + q[0]) / 2.0 - c[0])
    };
    inner.sort_by(|a, b| a.tag.cmp(&b.tag).then(angle(a).total_cmp(&angle(b))));
    outer.extend(inner);
    outer
}

fn nearest_hole(p: Point, holes: &[HoleSpec]) -> usize {
    holes
        .iter()
        .enumerate()
        .map(|(i, h)| (i, ((p[0] - h.center[0]).hypot(p[1] - h.center[1]) - h.radius).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(0, |(i, _)| i)
}
