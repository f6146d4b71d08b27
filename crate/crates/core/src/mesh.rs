//! Structured triangulations of the two experiment domains.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::kernels::Vec2;
use crate::math;

/// Ice thickness of the sliding block, in meters.
pub const BLOCK_HEIGHT: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("invalid domain: {0}")]
    InvalidDomain(&'static str),
    #[error("degenerate column at x = {x}: surface {surface} is not above bed {bed}")]
    DegenerateCell { x: f64, surface: f64, bed: f64 },
    #[error("triangle {0} is not positively oriented")]
    Orientation(usize),
    #[error("vertex index {0} out of range")]
    VertexOutOfRange(usize),
    #[error("boundary edges do not match the triangulation boundary")]
    BoundaryMismatch,
    #[error("edge ({0}, {1}) is not a boundary edge")]
    NotBoundaryEdge(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundaryTag {
    /// Frozen bed or lateral wall, `v = 0`.
    Dirichlet,
    /// Free surface, zero traction.
    Air,
    /// Sliding bed: `v·n = 0` plus power-law friction.
    Bed,
}

impl BoundaryTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryTag::Dirichlet => "DIRICHLET",
            BoundaryTag::Air => "AIR",
            BoundaryTag::Bed => "BED",
        }
    }
}

impl fmt::Display for BoundaryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Boundary segment, oriented so the domain lies to its left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    pub vertices: [usize; 2],
    pub tag: BoundaryTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    /// Sinusoidal bed, frozen everywhere, horizontal surface.
    IsmipB,
    /// Flat rectangle with a sliding bed.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    /// Horizontal period / extent in meters.
    pub length: f64,
    /// Surface slope angle in radians.
    pub alpha: f64,
    /// Number of extra copies on each side.
    pub copies: usize,
    pub nx: usize,
    pub ny: usize,
}

impl DomainSpec {
    pub fn ismip_b(nx: usize, ny: usize) -> Self {
        DomainSpec {
            kind: DomainKind::IsmipB,
            length: 5000.0,
            alpha: 0.5_f64.to_radians(),
            copies: 3,
            nx,
            ny,
        }
    }

    pub fn block(nx: usize, ny: usize) -> Self {
        DomainSpec {
            kind: DomainKind::Block,
            length: 5000.0,
            alpha: 0.5_f64.to_radians(),
            copies: 0,
            nx,
            ny,
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if !(self.length > 0.0) || !self.length.is_finite() {
            return Err(MeshError::InvalidDomain("length must be positive"));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(MeshError::InvalidDomain("nx and ny must be at least 2"));
        }
        if !self.alpha.is_finite() {
            return Err(MeshError::InvalidDomain("alpha must be finite"));
        }
        Ok(())
    }

    /// Number of grid columns over the copy-extended domain.
    pub fn columns(&self) -> usize {
        self.nx * (1 + 2 * self.copies)
    }

    /// Horizontal extent including copies.
    pub fn total_length(&self) -> f64 {
        self.length * (1 + 2 * self.copies) as f64
    }

    /// Range of the central (original) copy in mesh coordinates.
    pub fn central_range(&self) -> (f64, f64) {
        let x0 = self.length * self.copies as f64;
        (x0, x0 + self.length)
    }
}

/// Sloped surface and sinusoidal bed elevations `(z_s, z_b)` at `x`.
pub fn ismip_profiles(spec: &DomainSpec, x: f64) -> (f64, f64) {
    let omega = 2.0 * PI / spec.length;
    let zs = -math::tan(spec.alpha) * x;
    let zb = zs - 1000.0 + 500.0 * math::sin(omega * x);
    (zs, zb)
}

/// Surface and bed of the mesh geometry: the tilt is removed for the
/// glacier (gravity is rotated instead) and the block is a flat slab.
fn mesh_profiles(spec: &DomainSpec, x: f64) -> (f64, f64) {
    match spec.kind {
        DomainKind::IsmipB => {
            let (zs, zb) = ismip_profiles(spec, x);
            (0.0, zb - zs)
        }
        DomainKind::Block => (BLOCK_HEIGHT, 0.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
}

#[inline]
fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Mesh {
    /// Validating constructor: positive orientation and a boundary that is
    /// exactly covered by the tagged edges.
    pub fn new(
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary_edges: Vec<BoundaryEdge>,
    ) -> Result<Self, MeshError> {
        let mesh = Mesh { vertices, triangles, boundary_edges };
        mesh.check()?;
        Ok(mesh)
    }

    fn check(&self) -> Result<(), MeshError> {
        let nv = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&v| v >= nv) {
                return Err(MeshError::VertexOutOfRange(bad));
            }
            if !(self.signed_area(t) > 0.0) {
                return Err(MeshError::Orientation(t));
            }
        }
        // Boundary = edges used by exactly one triangle, with their
        // in-triangle (counter-clockwise) orientation.
        let mut uses: BTreeMap<(usize, usize), (usize, [usize; 2])> = BTreeMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let e = uses.entry(key(a, b)).or_insert((0, [a, b]));
                e.0 += 1;
            }
        }
        if uses.values().any(|&(n, _)| n > 2) {
            return Err(MeshError::BoundaryMismatch);
        }
        let boundary: BTreeMap<_, _> =
            uses.into_iter().filter(|(_, (n, _))| *n == 1).map(|(k, (_, o))| (k, o)).collect();
        if boundary.len() != self.boundary_edges.len() {
            return Err(MeshError::BoundaryMismatch);
        }
        let mut seen = BTreeMap::new();
        for e in &self.boundary_edges {
            let [a, b] = e.vertices;
            match boundary.get(&key(a, b)) {
                Some(o) if *o == [a, b] => {}
                _ => return Err(MeshError::BoundaryMismatch),
            }
            if seen.insert(key(a, b), ()).is_some() {
                return Err(MeshError::BoundaryMismatch);
            }
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * ((pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge) -> f64 {
        let [a, b] = e.vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
        math::sqrt(dx * dx + dy * dy)
    }

    /// Total length of the boundary parts carrying `tag`.
    pub fn boundary_measure(&self, tag: BoundaryTag) -> f64 {
        self.boundary_edges.iter().filter(|e| e.tag == tag).map(|e| self.edge_length(e)).sum()
    }

    /// Outward unit normal of the boundary edge joining `a` and `b`.
    pub fn boundary_normal(&self, a: usize, b: usize) -> Result<Vec2, MeshError> {
        let e = self
            .boundary_edges
            .iter()
            .find(|e| key(e.vertices[0], e.vertices[1]) == key(a, b))
            .ok_or(MeshError::NotBoundaryEdge(a, b))?;
        Ok(self.outward_normal(e))
    }

    pub fn outward_normal(&self, e: &BoundaryEdge) -> Vec2 {
        let [a, b] = e.vertices;
        let (pa, pb) = (self.vertices[a], self.vertices[b]);
        let (dx, dy) = (pb[0] - pa[0], pb[1] - pa[1]);
        let len = math::sqrt(dx * dx + dy * dy);
        Vec2::new(dy / len, -dx / len)
    }

    /// Plain-text dump: `x y` per vertex, `i j k` per triangle, then
    /// `i j TAG` per boundary edge.
    pub fn dump<W: fmt::Write>(&self, out: &mut W) -> fmt::Result {
        for v in &self.vertices {
            writeln!(out, "{} {}", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(out, "{} {} {}", t[0], t[1], t[2])?;
        }
        for e in &self.boundary_edges {
            writeln!(out, "{} {} {}", e.vertices[0], e.vertices[1], e.tag)?;
        }
        Ok(())
    }
}

/// Structured mesh: every grid quad is split along its lower-left to
/// upper-right diagonal. Vertex `(i, j)` has index `i (ny + 1) + j`.
pub fn build_mesh(spec: &DomainSpec) -> Result<Mesh, MeshError> {
    spec.validate()?;
    let ncols = spec.columns();
    let ny = spec.ny;
    let dx = spec.length / spec.nx as f64;
    let idx = |i: usize, j: usize| i * (ny + 1) + j;

    let mut vertices = Vec::with_capacity((ncols + 1) * (ny + 1));
    for i in 0..=ncols {
        let x = i as f64 * dx;
        let (top, bottom) = mesh_profiles(spec, x);
        if !(top > bottom) {
            return Err(MeshError::DegenerateCell { x, surface: top, bed: bottom });
        }
        for j in 0..=ny {
            let s = j as f64 / ny as f64;
            vertices.push([x, bottom + (top - bottom) * s]);
        }
    }

    let mut triangles = Vec::with_capacity(2 * ncols * ny);
    for i in 0..ncols {
        for j in 0..ny {
            let (v00, v10, v01, v11) = (idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1));
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }

    let bed_tag = match spec.kind {
        DomainKind::IsmipB => BoundaryTag::Dirichlet,
        DomainKind::Block => BoundaryTag::Bed,
    };
    let mut boundary_edges = Vec::with_capacity(2 * (ncols + ny));
    for i in 0..ncols {
        boundary_edges.push(BoundaryEdge { vertices: [idx(i, 0), idx(i + 1, 0)], tag: bed_tag });
    }
    for j in 0..ny {
        boundary_edges.push(BoundaryEdge { vertices: [idx(ncols, j), idx(ncols, j + 1)], tag: BoundaryTag::Dirichlet });
    }
    for i in (0..ncols).rev() {
        boundary_edges.push(BoundaryEdge { vertices: [idx(i + 1, ny), idx(i, ny)], tag: BoundaryTag::Air });
    }
    for j in (0..ny).rev() {
        boundary_edges.push(BoundaryEdge { vertices: [idx(0, j + 1), idx(0, j)], tag: BoundaryTag::Dirichlet });
    }

    Mesh::new(vertices, triangles, boundary_edges)
}
