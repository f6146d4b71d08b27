//! Taylor-Hood P2-P1 discretization and assembly.
//!
//! Velocity dofs are interleaved per node (`2·node + component`), nodes
//! being the mesh vertices followed by one midpoint per edge. Pressure
//! dofs follow the velocity block, one per vertex.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::kernels::{self, KernelError, Mat2, PowerLaw, Tensor, Vec2};
use crate::linalg::SparseMatrix;
use crate::math::CompensatedSum;
use crate::mesh::{BoundaryTag, Mesh, MeshError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FemError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("invalid parameters: {0}")]
    Params(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("pressure is not determined: the mesh has no traction-free (AIR) boundary")]
    PressureUndetermined,
    #[error("slip condition needs an axis-aligned bed normal, edge ({0}, {1}) is inclined")]
    InclinedSlip(usize, usize),
    #[error("constraint on dof {dof}: {reason}")]
    Constraint { dof: usize, reason: &'static str },
}

// 6-point, degree-4 rule on the reference triangle (barycentric coordinates).
const TRI_A1: f64 = 0.445_948_490_915_964_9;
const TRI_W1: f64 = 0.223_381_589_678_011_5;
const TRI_A2: f64 = 0.091_576_213_509_770_74;
const TRI_W2: f64 = 0.109_951_743_655_321_9;

fn triangle_rule() -> [([f64; 3], f64); 6] {
    let b1 = 1.0 - 2.0 * TRI_A1;
    let b2 = 1.0 - 2.0 * TRI_A2;
    [
        ([TRI_A1, TRI_A1, b1], TRI_W1),
        ([TRI_A1, b1, TRI_A1], TRI_W1),
        ([b1, TRI_A1, TRI_A1], TRI_W1),
        ([TRI_A2, TRI_A2, b2], TRI_W2),
        ([TRI_A2, b2, TRI_A2], TRI_W2),
        ([b2, TRI_A2, TRI_A2], TRI_W2),
    ]
}

// 3-point Gauss on [0, 1].
fn edge_rule() -> [(f64, f64); 3] {
    let h = 0.5 * crate::math::sqrt(0.6);
    [(0.5 - h, 5.0 / 18.0), (0.5, 8.0 / 18.0), (0.5 + h, 5.0 / 18.0)]
}

/// Local P2 node `3 + k` sits on the edge `EDGE_VERTS[k]`.
const EDGE_VERTS: [[usize; 2]; 3] = [[0, 1], [1, 2], [2, 0]];

const NQ: usize = 6;
const NLOC: usize = 15;

#[derive(Debug, Clone, Copy)]
struct QuadPoint {
    weight: f64,
    x: [f64; 2],
    n: [f64; 6],
    dn: [[f64; 2]; 6],
    lambda: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct FacetPoint {
    weight: f64,
    x: [f64; 2],
    n: [f64; 3],
}

/// Boundary edge with its three P2 nodes `[start, midpoint, end]`.
#[derive(Debug, Clone)]
struct Facet {
    nodes: [usize; 3],
    tag: BoundaryTag,
    points: [FacetPoint; 3],
    /// CSR slots of the 6x6 velocity block, row-major.
    slots: [usize; 36],
}

#[derive(Debug, Clone)]
pub struct MixedSpace {
    mesh: Mesh,
    n_edges: usize,
    elem_nodes: Vec<[usize; 6]>,
    node_coords: Vec<[f64; 2]>,
    quad: Vec<[QuadPoint; NQ]>,
    facets: Vec<Facet>,
    fixed: Vec<bool>,
    constrained: Vec<usize>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// Per element, CSR slot of each (local row, local col); `usize::MAX` where
    /// no entry exists (pressure-pressure).
    elem_slots: Vec<[usize; NLOC * NLOC]>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl MixedSpace {
    pub fn new(mesh: Mesh) -> Result<Self, FemError> {
        let nv = mesh.vertices().len();
        if !mesh.boundary_edges().iter().any(|e| e.tag == BoundaryTag::Air) {
            return Err(FemError::PressureUndetermined);
        }

        let mut edges: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut elem_nodes = Vec::with_capacity(mesh.triangles().len());
        for tri in mesh.triangles() {
            let mut nodes = [tri[0], tri[1], tri[2], 0, 0, 0];
            for (k, ev) in EDGE_VERTS.iter().enumerate() {
                let key = edge_key(tri[ev[0]], tri[ev[1]]);
                let next = edges.len();
                let id = *edges.entry(key).or_insert(next);
                nodes[3 + k] = nv + id;
            }
            elem_nodes.push(nodes);
        }
        let n_edges = edges.len();
        let mut node_coords = mesh.vertices().to_vec();
        node_coords.resize(nv + n_edges, [0.0; 2]);
        for (&(a, b), &id) in &edges {
            let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
            node_coords[nv + id] = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        }

        let rule = triangle_rule();
        let quad = mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(t, tri)| {
                let p = [mesh.vertices()[tri[0]], mesh.vertices()[tri[1]], mesh.vertices()[tri[2]]];
                let area = mesh.signed_area(t);
                let inv2a = 1.0 / (2.0 * area);
                let gl = [
                    [(p[1][1] - p[2][1]) * inv2a, (p[2][0] - p[1][0]) * inv2a],
                    [(p[2][1] - p[0][1]) * inv2a, (p[0][0] - p[2][0]) * inv2a],
                    [(p[0][1] - p[1][1]) * inv2a, (p[1][0] - p[0][0]) * inv2a],
                ];
                rule.map(|(l, w)| {
                    let x = [
                        l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                        l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
                    ];
                    let mut n = [0.0; 6];
                    let mut dn = [[0.0; 2]; 6];
                    for i in 0..3 {
                        n[i] = l[i] * (2.0 * l[i] - 1.0);
                        for d in 0..2 {
                            dn[i][d] = (4.0 * l[i] - 1.0) * gl[i][d];
                        }
                    }
                    for (k, ev) in EDGE_VERTS.iter().enumerate() {
                        let (i, j) = (ev[0], ev[1]);
                        n[3 + k] = 4.0 * l[i] * l[j];
                        for d in 0..2 {
                            dn[3 + k][d] = 4.0 * (l[j] * gl[i][d] + l[i] * gl[j][d]);
                        }
                    }
                    QuadPoint { weight: w * area, x, n, dn, lambda: l }
                })
            })
            .collect();

        let n_vdofs = 2 * (nv + n_edges);
        let n_dofs = n_vdofs + nv;
        let mut fixed = vec![false; n_dofs];
        let mut slip = Vec::new();
        for e in mesh.boundary_edges() {
            let [a, b] = e.vertices;
            let mid = nv + edges[&edge_key(a, b)];
            match e.tag {
                BoundaryTag::Dirichlet => {
                    for node in [a, mid, b] {
                        fixed[2 * node] = true;
                        fixed[2 * node + 1] = true;
                    }
                }
                BoundaryTag::Bed => {
                    let n = mesh.outward_normal(e);
                    let comp = if n.x() == 0.0 {
                        1
                    } else if n.y() == 0.0 {
                        0
                    } else {
                        return Err(FemError::InclinedSlip(a, b));
                    };
                    slip.extend([a, mid, b].map(|node| 2 * node + comp));
                }
                BoundaryTag::Air => {}
            }
        }
        for dof in slip {
            fixed[dof] = true;
        }
        let constrained = (0..n_dofs).filter(|&d| fixed[d]).collect();

        // Sparsity: every element couples its 12 velocity and 3 pressure dofs,
        // except pressure with pressure.
        let local_dofs = |nodes: &[usize; 6]| -> [usize; NLOC] {
            let mut g = [0; NLOC];
            for a in 0..6 {
                g[2 * a] = 2 * nodes[a];
                g[2 * a + 1] = 2 * nodes[a] + 1;
            }
            for k in 0..3 {
                g[12 + k] = n_vdofs + nodes[k];
            }
            g
        };
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_dofs];
        for nodes in &elem_nodes {
            let g = local_dofs(nodes);
            for i in 0..NLOC {
                for j in 0..NLOC {
                    if i >= 12 && j >= 12 {
                        continue;
                    }
                    rows[g[i]].push(g[j]);
                }
            }
        }
        // keep a diagonal everywhere so constrained rows can hold 1
        for (r, row) in rows.iter_mut().enumerate() {
            row.push(r);
            row.sort_unstable();
            row.dedup();
        }
        let mut row_ptr = Vec::with_capacity(n_dofs + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            col_idx.extend_from_slice(row);
            row_ptr.push(col_idx.len());
        }
        let find = |r: usize, c: usize| -> usize {
            let range = row_ptr[r]..row_ptr[r + 1];
            range.start + col_idx[range].binary_search(&c).expect("pattern entry")
        };
        let elem_slots = elem_nodes
            .iter()
            .map(|nodes| {
                let g = local_dofs(nodes);
                let mut s = [usize::MAX; NLOC * NLOC];
                for i in 0..NLOC {
                    for j in 0..NLOC {
                        if i < 12 || j < 12 {
                            s[i * NLOC + j] = find(g[i], g[j]);
                        }
                    }
                }
                s
            })
            .collect();

        let erule = edge_rule();
        let facets = mesh
            .boundary_edges()
            .iter()
            .filter(|e| e.tag != BoundaryTag::Dirichlet)
            .map(|e| {
                let [a, b] = e.vertices;
                let mid = nv + edges[&edge_key(a, b)];
                let len = mesh.edge_length(e);
                let (pa, pb) = (mesh.vertices()[a], mesh.vertices()[b]);
                let points = erule.map(|(s, w)| FacetPoint {
                    weight: w * len,
                    x: [pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])],
                    n: [(1.0 - s) * (1.0 - 2.0 * s), 4.0 * s * (1.0 - s), s * (2.0 * s - 1.0)],
                });
                let nodes = [a, mid, b];
                let mut slots = [0; 36];
                for i in 0..6 {
                    for j in 0..6 {
                        slots[i * 6 + j] = find(2 * nodes[i / 2] + i % 2, 2 * nodes[j / 2] + j % 2);
                    }
                }
                Facet { nodes, tag: e.tag, points, slots }
            })
            .collect();

        Ok(MixedSpace {
            mesh,
            n_edges,
            elem_nodes,
            node_coords,
            quad,
            facets,
            fixed,
            constrained,
            row_ptr,
            col_idx,
            elem_slots,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn n_vertices(&self) -> usize {
        self.mesh.vertices().len()
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_vdofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn n_pdofs(&self) -> usize {
        self.n_vertices()
    }

    pub fn n_dofs(&self) -> usize {
        self.n_vdofs() + self.n_pdofs()
    }

    pub fn node_coords(&self) -> &[[f64; 2]] {
        &self.node_coords
    }

    pub fn is_constrained(&self, dof: usize) -> bool {
        self.fixed[dof]
    }

    pub fn constrained_mask(&self) -> &[bool] {
        &self.fixed
    }

    pub fn constrained_dofs(&self) -> &[usize] {
        &self.constrained
    }

    /// P2 nodes on boundary edges with `tag`, sorted and unique.
    pub fn boundary_nodes(&self, tag: BoundaryTag) -> Vec<usize> {
        let nv = self.n_vertices();
        let mut out = Vec::new();
        for e in self.mesh.boundary_edges().iter().filter(|e| e.tag == tag) {
            out.extend_from_slice(&e.vertices);
        }
        // midpoints: find through the element table
        let mut mids: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (tri, nodes) in self.mesh.triangles().iter().zip(&self.elem_nodes) {
            for (k, ev) in EDGE_VERTS.iter().enumerate() {
                mids.insert(edge_key(tri[ev[0]], tri[ev[1]]), nodes[3 + k]);
            }
        }
        for e in self.mesh.boundary_edges().iter().filter(|e| e.tag == tag) {
            let m = mids[&edge_key(e.vertices[0], e.vertices[1])];
            debug_assert!(m >= nv);
            out.push(m);
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    fn elem_dofs(&self, e: usize) -> [usize; NLOC] {
        let nodes = &self.elem_nodes[e];
        let nvd = self.n_vdofs();
        let mut g = [0; NLOC];
        for a in 0..6 {
            g[2 * a] = 2 * nodes[a];
            g[2 * a + 1] = 2 * nodes[a] + 1;
        }
        for k in 0..3 {
            g[12 + k] = nvd + nodes[k];
        }
        g
    }

    fn empty_matrix(&self) -> SparseMatrix {
        let n = self.n_dofs();
        SparseMatrix::from_pattern(n, n, self.row_ptr.clone(), self.col_idx.clone(), vec![0.0; self.col_idx.len()])
    }

    fn check_len(&self, v: &[f64], expected: usize) -> Result<(), FemError> {
        if v.len() != expected {
            return Err(FemError::Dimension { expected, got: v.len() });
        }
        Ok(())
    }

    /// P2 interpolant of a velocity field, pressure zero.
    pub fn interpolate_velocity<F: Fn([f64; 2]) -> Vec2>(&self, f: F) -> MixedState {
        let mut c = vec![0.0; self.n_dofs()];
        for (node, x) in self.node_coords.iter().enumerate() {
            let v = f(*x);
            c[2 * node] = v.x();
            c[2 * node + 1] = v.y();
        }
        MixedState { coeffs: c }
    }

    /// Adds the P1 interpolant of `f` to the pressure block.
    pub fn interpolate_pressure<F: Fn([f64; 2]) -> f64>(&self, state: &mut MixedState, f: F) {
        let off = self.n_vdofs();
        for (v, x) in self.mesh.vertices().iter().enumerate() {
            state.coeffs[off + v] = f(*x);
        }
    }
}

/// Coefficients of a mixed (velocity, pressure) finite-element function.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedState {
    coeffs: Vec<f64>,
}

impl MixedState {
    pub fn zeros(space: &MixedSpace) -> Self {
        MixedState { coeffs: vec![0.0; space.n_dofs()] }
    }

    pub fn from_vec(space: &MixedSpace, coeffs: Vec<f64>) -> Result<Self, FemError> {
        space.check_len(&coeffs, space.n_dofs())?;
        if coeffs.iter().any(|v| !v.is_finite()) {
            return Err(FemError::Params("state has non-finite entries"));
        }
        Ok(MixedState { coeffs })
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn velocity<'a>(&'a self, space: &MixedSpace) -> &'a [f64] {
        &self.coeffs[..space.n_vdofs()]
    }

    pub fn pressure<'a>(&'a self, space: &MixedSpace) -> &'a [f64] {
        &self.coeffs[space.n_vdofs()..]
    }

    pub fn node_velocity(&self, node: usize) -> Vec2 {
        Vec2::new(self.coeffs[2 * node], self.coeffs[2 * node + 1])
    }

    /// `self + t · dir`.
    pub fn axpy(&self, t: f64, dir: &[f64]) -> MixedState {
        MixedState { coeffs: self.coeffs.iter().zip(dir).map(|(a, b)| a + t * b).collect() }
    }

    /// True when every constrained entry is zero.
    pub fn satisfies_constraints(&self, space: &MixedSpace) -> bool {
        space.constrained.iter().all(|&d| self.coeffs[d] == 0.0)
    }
}

/// Extra forcing beyond gravity: a body force density and a traction on the
/// natural (AIR and BED) boundaries. Used for manufactured solutions.
#[derive(Clone)]
pub struct ExtraLoad {
    pub body: Arc<dyn Fn([f64; 2]) -> Vec2 + Send + Sync>,
    pub traction: Arc<dyn Fn([f64; 2], BoundaryTag) -> Vec2 + Send + Sync>,
}

impl fmt::Debug for ExtraLoad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ExtraLoad { .. }")
    }
}

/// Physical and regularization constants, in m, a (years), Pa.
#[derive(Debug, Clone)]
pub struct PStokesParams {
    /// Bulk power law (exponent p).
    pub bulk: PowerLaw,
    /// Sliding power law (exponent s).
    pub slide: PowerLaw,
    /// Ice hardness B, Pa·a^{p-1}.
    pub b: f64,
    /// Friction coefficient τ.
    pub tau: f64,
    /// Diffusion regularization μ0, Pa·a.
    pub mu0: f64,
    /// Density, kg/m³.
    pub rho: f64,
    /// Gravity vector, m/s². `rho · gravity` is taken in Pa/m.
    pub gravity: Vec2,
    /// Slope angle the gravity was rotated by, radians.
    pub alpha: f64,
    pub extra_load: Option<ExtraLoad>,
}

impl PStokesParams {
    pub fn validate(&self) -> Result<(), FemError> {
        let finite = [self.b, self.tau, self.mu0, self.rho, self.alpha, self.gravity.x(), self.gravity.y()];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(FemError::Params("non-finite parameter"));
        }
        if !(self.b > 0.0) {
            return Err(FemError::Params("B must be positive"));
        }
        if self.tau < 0.0 {
            return Err(FemError::Params("tau must be non-negative"));
        }
        if self.mu0 < 0.0 {
            return Err(FemError::Params("mu0 must be non-negative"));
        }
        if self.mu0 > 0.0 && (self.bulk.delta() == 0.0 || self.slide.delta() == 0.0) {
            return Err(FemError::Params("delta must be positive when mu0 > 0"));
        }
        Ok(())
    }

    /// Same parameters with both regularizations set to `delta`.
    pub fn with_delta(&self, delta: f64) -> Result<Self, FemError> {
        Ok(PStokesParams {
            bulk: self.bulk.with_delta(delta)?,
            slide: self.slide.with_delta(delta)?,
            ..self.clone()
        })
    }

    fn body_force(&self, x: [f64; 2]) -> Vec2 {
        let g = self.gravity * self.rho;
        match &self.extra_load {
            Some(l) => g + (l.body)(x),
            None => g,
        }
    }

    fn traction(&self, x: [f64; 2], tag: BoundaryTag) -> Option<Vec2> {
        self.extra_load.as_ref().map(|l| (l.traction)(x, tag))
    }
}

#[inline]
fn velocity_at(q: &QuadPoint, ve: &[[f64; 2]; 6]) -> (Vec2, Mat2) {
    let mut v = [0.0; 2];
    let mut g = [[0.0; 2]; 2];
    for a in 0..6 {
        for i in 0..2 {
            v[i] += q.n[a] * ve[a][i];
            for j in 0..2 {
                g[i][j] += ve[a][i] * q.dn[a][j];
            }
        }
    }
    (Vec2(v), Mat2(g))
}

fn elem_velocity(space: &MixedSpace, e: usize, v: &[f64]) -> [[f64; 2]; 6] {
    let nodes = &space.elem_nodes[e];
    nodes.map(|n| [v[2 * n], v[2 * n + 1]])
}

fn facet_velocity(f: &Facet, p: &FacetPoint, v: &[f64]) -> Vec2 {
    let mut out = [0.0; 2];
    for (m, &node) in f.nodes.iter().enumerate() {
        out[0] += p.n[m] * v[2 * node];
        out[1] += p.n[m] * v[2 * node + 1];
    }
    Vec2(out)
}

fn zero_constrained(space: &MixedSpace, r: &mut [f64]) {
    for &d in &space.constrained {
        if d < r.len() {
            r[d] = 0.0;
        }
    }
}

/// Velocity block of `G(v)` without the pressure coupling, i.e. the
/// derivative of the merit functional. Constrained entries are zero.
pub fn velocity_residual(space: &MixedSpace, params: &PStokesParams, state: &MixedState) -> Result<Vec<f64>, FemError> {
    let mut r = residual_impl(space, params, state, false)?;
    r.truncate(space.n_vdofs());
    Ok(r)
}

/// Full mixed residual: `⟨G(v),φ⟩ − (π, div φ)` on velocity test functions
/// and `−(div v, ψ)` on pressure test functions. Constrained entries are zero.
pub fn assemble_residual(space: &MixedSpace, params: &PStokesParams, state: &MixedState) -> Result<Vec<f64>, FemError> {
    residual_impl(space, params, state, true)
}

fn residual_impl(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
    mixed: bool,
) -> Result<Vec<f64>, FemError> {
    space.check_len(&state.coeffs, space.n_dofs())?;
    params.validate()?;
    let v = state.velocity(space);
    let pr = state.pressure(space);
    let mut out = vec![0.0; space.n_dofs()];
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        let g = space.elem_dofs(e);
        let mut loc = [0.0; NLOC];
        for q in &space.quad[e] {
            let (vel, grad) = velocity_at(q, &ve);
            let _ = vel;
            let s = kernels::s_apply(&params.bulk, &grad.sym())?;
            let mut sigma = s * params.b + grad * params.mu0;
            let div = grad.0[0][0] + grad.0[1][1];
            if mixed {
                let p: f64 = (0..3).map(|k| q.lambda[k] * pr[g[12 + k] - space.n_vdofs()]).sum();
                sigma.0[0][0] -= p;
                sigma.0[1][1] -= p;
                for k in 0..3 {
                    loc[12 + k] -= q.weight * q.lambda[k] * div;
                }
            }
            let f = params.body_force(q.x);
            for a in 0..6 {
                for i in 0..2 {
                    let flux = sigma.0[i][0] * q.dn[a][0] + sigma.0[i][1] * q.dn[a][1];
                    loc[2 * a + i] += q.weight * (flux - f.0[i] * q.n[a]);
                }
            }
        }
        for i in 0..NLOC {
            out[g[i]] += loc[i];
        }
    }
    for f in &space.facets {
        for p in &f.points {
            let mut force = Vec2::zero();
            if f.tag == BoundaryTag::Bed && params.tau > 0.0 {
                let vel = facet_velocity(f, p, v);
                force = kernels::s_apply(&params.slide, &vel)? * params.tau;
            }
            if let Some(h) = params.traction(p.x, f.tag) {
                force = force - h;
            }
            for (m, &node) in f.nodes.iter().enumerate() {
                out[2 * node] += p.weight * force.x() * p.n[m];
                out[2 * node + 1] += p.weight * force.y() * p.n[m];
            }
        }
    }
    zero_constrained(space, &mut out);
    Ok(out)
}

/// Right-hand side of the linear problems: `(ρg + f, φ) + (h, φ)_{∂Ω}`.
pub fn load_vector(space: &MixedSpace, params: &PStokesParams) -> Vec<f64> {
    let mut out = vec![0.0; space.n_dofs()];
    for e in 0..space.elem_nodes.len() {
        let g = space.elem_dofs(e);
        for q in &space.quad[e] {
            let f = params.body_force(q.x);
            for a in 0..6 {
                for i in 0..2 {
                    out[g[2 * a + i]] += q.weight * f.0[i] * q.n[a];
                }
            }
        }
    }
    for f in &space.facets {
        for p in &f.points {
            if let Some(h) = params.traction(p.x, f.tag) {
                for (m, &node) in f.nodes.iter().enumerate() {
                    out[2 * node] += p.weight * h.x() * p.n[m];
                    out[2 * node + 1] += p.weight * h.y() * p.n[m];
                }
            }
        }
    }
    zero_constrained(space, &mut out);
    out
}

/// Per-quadrature-point coefficients of a linearized bulk operator:
/// `sym · (Dw : ∇φ) + rank1 · (P:Dw)(P:∇φ) + grad · (∇w : ∇φ)`.
#[derive(Debug, Clone, Copy)]
struct BulkCoef {
    sym: f64,
    rank1: f64,
    p: Mat2,
    grad: f64,
}

/// Bed coefficients: `a0 (w·φ) + a1 (v·w)(v·φ)`.
#[derive(Debug, Clone, Copy)]
struct BedCoef {
    a0: f64,
    a1: f64,
    v: Vec2,
}

fn assemble_operator<FB, FF>(
    space: &MixedSpace,
    state: Option<&MixedState>,
    mut bulk: FB,
    mut bed: FF,
    divergence: bool,
) -> Result<SparseMatrix, FemError>
where
    FB: FnMut(Mat2) -> Result<BulkCoef, FemError>,
    FF: FnMut(Vec2) -> Result<Option<BedCoef>, FemError>,
{
    let mut mat = space.empty_matrix();
    let zeros;
    let v = match state {
        Some(s) => {
            space.check_len(&s.coeffs, space.n_dofs())?;
            s.velocity(space)
        }
        None => {
            zeros = vec![0.0; space.n_vdofs()];
            &zeros[..]
        }
    };
    let vals = mat.values_mut();
    let mut loc = [0.0; NLOC * NLOC];
    for e in 0..space.elem_nodes.len() {
        loc.iter_mut().for_each(|x| *x = 0.0);
        let ve = elem_velocity(space, e, v);
        for q in &space.quad[e] {
            let (_, grad) = velocity_at(q, &ve);
            let c = bulk(grad.sym())?;
            let w = q.weight;
            // P ∇N_a, a 2-vector per basis function
            let mut pn = [[0.0; 2]; 6];
            if c.rank1 != 0.0 {
                for a in 0..6 {
                    for i in 0..2 {
                        pn[a][i] = c.p.0[i][0] * q.dn[a][0] + c.p.0[i][1] * q.dn[a][1];
                    }
                }
            }
            for a in 0..6 {
                for b in 0..6 {
                    let gg = q.dn[a][0] * q.dn[b][0] + q.dn[a][1] * q.dn[b][1];
                    for i in 0..2 {
                        for k in 0..2 {
                            let delta = if i == k { 1.0 } else { 0.0 };
                            let sym = 0.5 * (delta * gg + q.dn[b][i] * q.dn[a][k]);
                            let val = c.sym * sym + c.rank1 * pn[b][k] * pn[a][i] + c.grad * delta * gg;
                            loc[(2 * a + i) * NLOC + 2 * b + k] += w * val;
                        }
                    }
                }
            }
            if divergence {
                for k in 0..3 {
                    for a in 0..6 {
                        for i in 0..2 {
                            let val = -w * q.lambda[k] * q.dn[a][i];
                            loc[(12 + k) * NLOC + 2 * a + i] += val;
                            loc[(2 * a + i) * NLOC + 12 + k] += val;
                        }
                    }
                }
            }
        }
        let slots = &space.elem_slots[e];
        for (idx, &val) in loc.iter().enumerate() {
            if val != 0.0 {
                vals[slots[idx]] += val;
            }
        }
    }
    for f in space.facets.iter().filter(|f| f.tag == BoundaryTag::Bed) {
        for p in &f.points {
            let vel = facet_velocity(f, p, v);
            let Some(c) = bed(vel)? else { continue };
            for m in 0..3 {
                for n in 0..3 {
                    for i in 0..2 {
                        for k in 0..2 {
                            let delta = if i == k { 1.0 } else { 0.0 };
                            let val = c.a0 * delta + c.a1 * c.v.0[i] * c.v.0[k];
                            vals[f.slots[(2 * m + i) * 6 + 2 * n + k]] += p.weight * val * p.n[m] * p.n[n];
                        }
                    }
                }
            }
        }
    }
    mat.eliminate_symmetric(&space.fixed, 1.0);
    Ok(mat)
}

/// Newton matrix `[[G'(v), Bᵀ], [B, 0]]` with constraints eliminated.
pub fn assemble_jacobian(space: &MixedSpace, params: &PStokesParams, state: &MixedState) -> Result<SparseMatrix, FemError> {
    params.validate()?;
    let mut m = assemble_operator(
        space,
        Some(state),
        |p| {
            let d = kernels::s_derivative(&params.bulk, &p)?;
            Ok(BulkCoef { sym: params.b * d.a0, rank1: params.b * d.a1, p, grad: params.mu0 })
        },
        |v| {
            if params.tau == 0.0 {
                return Ok(None);
            }
            let d = kernels::s_derivative(&params.slide, &v)?;
            Ok(Some(BedCoef { a0: params.tau * d.a0, a1: params.tau * d.a1, v }))
        },
        true,
    )?;
    m.mark_symmetric(1e-12);
    Ok(m)
}

/// Lagged-viscosity matrix and right-hand side `(ρg, φ)`.
pub fn assemble_picard_matrix(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
) -> Result<(SparseMatrix, Vec<f64>), FemError> {
    params.validate()?;
    let mut m = assemble_operator(
        space,
        Some(state),
        |p| {
            if !p.is_finite() {
                return Err(KernelError::NonFinite.into());
            }
            let c = params.bulk.secant_coefficient(p.norm_sq());
            Ok(BulkCoef { sym: params.b * c, rank1: 0.0, p, grad: params.mu0 })
        },
        |v| {
            if params.tau == 0.0 {
                return Ok(None);
            }
            if !v.is_finite() {
                return Err(KernelError::NonFinite.into());
            }
            let c = params.slide.secant_coefficient(v.norm_sq());
            Ok(Some(BedCoef { a0: params.tau * c, a1: 0.0, v }))
        },
        true,
    )?;
    m.mark_symmetric(1e-12);
    Ok((m, load_vector(space, params)))
}

/// Linear Stokes system with the power-law factor replaced by the constant
/// `viscosity_factor`, and optionally a linear bed term `τ v·φ`.
pub fn assemble_linear_stokes(
    space: &MixedSpace,
    params: &PStokesParams,
    viscosity_factor: f64,
    bed_friction: bool,
) -> Result<(SparseMatrix, Vec<f64>), FemError> {
    params.validate()?;
    let mut m = assemble_operator(
        space,
        None,
        |p| Ok(BulkCoef { sym: params.b * viscosity_factor, rank1: 0.0, p, grad: params.mu0 }),
        |v| Ok((bed_friction && params.tau > 0.0).then_some(BedCoef { a0: params.tau, a1: 0.0, v })),
        true,
    )?;
    m.mark_symmetric(1e-12);
    Ok((m, load_vector(space, params)))
}

/// `[[L, Bᵀ], [B, 0]]` with `L` the vector Laplacian `∫∇u:∇φ`.
pub fn assemble_riesz_matrix(space: &MixedSpace) -> Result<SparseMatrix, FemError> {
    let mut m = assemble_operator(
        space,
        None,
        |p| Ok(BulkCoef { sym: 0.0, rank1: 0.0, p, grad: 1.0 }),
        |_| Ok(None),
        true,
    )?;
    m.mark_symmetric(1e-12);
    Ok(m)
}

/// Velocity block alone (no divergence coupling) of the frozen-coefficient
/// operator; pressure rows hold the identity. For eigenvalue checks.
pub fn assemble_picard_velocity_block(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
) -> Result<SparseMatrix, FemError> {
    params.validate()?;
    let mut m = assemble_operator(
        space,
        Some(state),
        |p| Ok(BulkCoef { sym: params.b * params.bulk.secant_coefficient(p.norm_sq()), rank1: 0.0, p, grad: params.mu0 }),
        |v| Ok((params.tau > 0.0).then(|| BedCoef { a0: params.tau * params.slide.secant_coefficient(v.norm_sq()), a1: 0.0, v })),
        false,
    )?;
    let nvd = space.n_vdofs();
    for r in nvd..space.n_dofs() {
        if let Some(s) = m.slot(r, r) {
            m.values_mut()[s] = 1.0;
        }
    }
    Ok(m)
}

/// Merit functional
/// `J(v) = ∫ B/(cp)(c|Dv|²+δ²)^{p/2} + ∫_{Γb} τ/s(|v|²+δ²)^{s/2} + μ0/2 ‖∇v‖² − (ρg, v)`.
pub fn evaluate_functional(space: &MixedSpace, params: &PStokesParams, state: &MixedState) -> Result<f64, FemError> {
    space.check_len(&state.coeffs, space.n_dofs())?;
    params.validate()?;
    let v = state.velocity(space);
    let mut sum = CompensatedSum::default();
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        for q in &space.quad[e] {
            let (vel, grad) = velocity_at(q, &ve);
            let dens = kernels::j_density(&params.bulk, params.b, &grad.sym())?;
            let diff = 0.5 * params.mu0 * grad.norm_sq();
            let work = params.body_force(q.x).dot(&vel);
            sum.add(q.weight * dens);
            sum.add(q.weight * diff);
            sum.add(-q.weight * work);
        }
    }
    for f in &space.facets {
        for p in &f.points {
            let vel = facet_velocity(f, p, v);
            if f.tag == BoundaryTag::Bed && params.tau > 0.0 {
                sum.add(p.weight * kernels::j_density(&params.slide, params.tau, &vel)?);
            }
            if let Some(h) = params.traction(p.x, f.tag) {
                sum.add(-p.weight * h.dot(&vel));
            }
        }
    }
    Ok(sum.value())
}

/// `J(v + t w) − J(v)` evaluated term by term without cancellation.
pub fn functional_increment(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
    direction: &[f64],
    t: f64,
) -> Result<f64, FemError> {
    space.check_len(&state.coeffs, space.n_dofs())?;
    if direction.len() < space.n_vdofs() {
        return Err(FemError::Dimension { expected: space.n_vdofs(), got: direction.len() });
    }
    params.validate()?;
    let v = state.velocity(space);
    let w = &direction[..space.n_vdofs()];
    let mut sum = CompensatedSum::default();
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        let we = elem_velocity(space, e, w);
        for q in &space.quad[e] {
            let (_, gv) = velocity_at(q, &ve);
            let (wv, gw) = velocity_at(q, &we);
            let dens = kernels::j_density_increment(&params.bulk, params.b, &gv.sym(), &gw.sym(), t)?;
            let diff = 0.5 * params.mu0 * t * (2.0 * gv.dot(&gw) + t * gw.norm_sq());
            let work = t * params.body_force(q.x).dot(&wv);
            sum.add(q.weight * dens);
            sum.add(q.weight * diff);
            sum.add(-q.weight * work);
        }
    }
    for f in &space.facets {
        for p in &f.points {
            let wv = facet_velocity(f, p, w);
            if f.tag == BoundaryTag::Bed && params.tau > 0.0 {
                let vv = facet_velocity(f, p, v);
                sum.add(p.weight * kernels::j_density_increment(&params.slide, params.tau, &vv, &wv, t)?);
            }
            if let Some(h) = params.traction(p.x, f.tag) {
                sum.add(-p.weight * t * h.dot(&wv));
            }
        }
    }
    Ok(sum.value())
}

/// `⟨G(v), w⟩ = d/dt J(v + t w)|_{t=0}`.
pub fn functional_directional_derivative(
    space: &MixedSpace,
    params: &PStokesParams,
    state: &MixedState,
    direction: &[f64],
) -> Result<f64, FemError> {
    if direction.len() < space.n_vdofs() {
        return Err(FemError::Dimension { expected: space.n_vdofs(), got: direction.len() });
    }
    let g = velocity_residual(space, params, state)?;
    Ok(g.iter().zip(&direction[..space.n_vdofs()]).map(|(a, b)| a * b).sum())
}

/// `∫ |∇v|²` for a velocity vector.
pub fn grad_seminorm_sq(space: &MixedSpace, v: &[f64]) -> f64 {
    let mut sum = CompensatedSum::default();
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        for q in &space.quad[e] {
            let (_, g) = velocity_at(q, &ve);
            sum.add(q.weight * g.norm_sq());
        }
    }
    sum.value()
}

/// `∫_{Γb} |v|²`.
pub fn bed_l2_sq(space: &MixedSpace, v: &[f64]) -> f64 {
    let mut sum = 0.0;
    for f in space.facets.iter().filter(|f| f.tag == BoundaryTag::Bed) {
        for p in &f.points {
            sum += p.weight * facet_velocity(f, p, v).norm_sq();
        }
    }
    sum
}

/// Discrete divergence `(div v, ψ_k)` for every pressure basis function.
pub fn divergence_moments(space: &MixedSpace, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; space.n_pdofs()];
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        let nodes = &space.elem_nodes[e];
        for q in &space.quad[e] {
            let (_, g) = velocity_at(q, &ve);
            let div = g.0[0][0] + g.0[1][1];
            for k in 0..3 {
                out[nodes[k]] += q.weight * q.lambda[k] * div;
            }
        }
    }
    out
}

/// Integrates `f(x, v(x), ∇v(x), π(x))` over the domain.
pub fn integrate<F>(space: &MixedSpace, state: &MixedState, mut f: F) -> f64
where
    F: FnMut([f64; 2], Vec2, Mat2, f64) -> f64,
{
    let v = state.velocity(space);
    let pr = state.pressure(space);
    let mut sum = CompensatedSum::default();
    for e in 0..space.elem_nodes.len() {
        let ve = elem_velocity(space, e, v);
        let nodes = &space.elem_nodes[e];
        for q in &space.quad[e] {
            let (vel, g) = velocity_at(q, &ve);
            let p: f64 = (0..3).map(|k| q.lambda[k] * pr[nodes[k]]).sum();
            sum.add(q.weight * f(q.x, vel, g, p));
        }
    }
    sum.value()
}

/// Prescribed values for constrained dofs. Only homogeneous data is
/// supported; anything else is rejected.
pub fn apply_constraints(
    space: &MixedSpace,
    matrix: Option<&mut SparseMatrix>,
    rhs: Option<&mut [f64]>,
    values: &[(usize, f64)],
) -> Result<(), FemError> {
    let mut seen: BTreeMap<usize, f64> = BTreeMap::new();
    for &(dof, val) in values {
        if dof >= space.n_dofs() || !space.fixed[dof] {
            return Err(FemError::Constraint { dof, reason: "not a constrained dof" });
        }
        if let Some(prev) = seen.insert(dof, val) {
            if prev != val {
                return Err(FemError::Constraint { dof, reason: "conflicting prescribed values" });
            }
        }
        if val != 0.0 {
            return Err(FemError::Constraint { dof, reason: "inhomogeneous values are not supported" });
        }
    }
    if let Some(m) = matrix {
        if m.nrows() != space.n_dofs() {
            return Err(FemError::Dimension { expected: space.n_dofs(), got: m.nrows() });
        }
        m.eliminate_symmetric(&space.fixed, 1.0);
    }
    if let Some(r) = rhs {
        space.check_len(r, space.n_dofs())?;
        zero_constrained(space, r);
    }
    Ok(())
}
