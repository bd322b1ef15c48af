//! P1 finite elements for the four forward models.
//!
//! Every model has the weak form
//! `∫σ ∇y·∇v + ∫p y v + ∫c₃ y³ v + ∫c₂ |y|y v = ⟨f, v⟩`
//! where the coefficients collect the background and the inclusion
//! parameters `u_ℓ`. Nodal fields are plain `Vec<f64>`; boundary fields are
//! indexed by position in the boundary loop.

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};
use crate::mesh::{BoundaryLabel, BoundaryPartition, Mesh};

/// Residual conductivity inside a chemical-reaction inclusion.
pub const CE_SIGMA_INSIDE: f64 = 1e-4;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_STEPS: usize = 50;
const NEWTON_MAX_HALVINGS: usize = 30;
/// A guess whose residual is already this small (relative to the load) is returned as is.
const NEWTON_RESIDUAL_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Eit,
    Dot,
    Ce,
    Modulus,
}

/// How an inclusion parameter enters the weak form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeKind {
    /// `∫u ∇y·∇v`
    Conductivity,
    /// `∫u y v`
    Potential,
    /// `−(1−σ̃)∫u ∇y·∇v − ∫u y³ v`
    Reaction,
    /// `∫u |y|y v`
    Modulus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InclusionType {
    pub name: String,
    pub kind: TypeKind,
    pub lower: f64,
    pub upper: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub model: Model,
    pub c0: f64,
    pub p0: f64,
    /// Coefficient of the background cubic term of `A[y]`.
    pub cubic: f64,
    pub types: Vec<InclusionType>,
}

impl ProblemSpec {
    /// Whether `A` depends on the state.
    pub fn nonlinear_a(&self) -> bool {
        self.cubic != 0.0
    }

    /// Whether the forward problem needs Newton's method.
    pub fn semilinear(&self) -> bool {
        self.nonlinear_a()
            || self
                .types
                .iter()
                .any(|t| matches!(t.kind, TypeKind::Reaction | TypeKind::Modulus))
    }

    pub fn type_count(&self) -> usize {
        self.types.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.c0 <= 0.0 {
            return Err(Error::Validation(format!("background c0 = {} must be positive", self.c0)));
        }
        if self.types.is_empty() {
            return Err(Error::Validation("problem has no inclusion types".into()));
        }
        for t in &self.types {
            if !(t.lower < t.upper) {
                return Err(Error::Validation(format!(
                    "type {}: empty box [{}, {}]",
                    t.name, t.lower, t.upper
                )));
            }
            if !(t.gamma > 0.0) {
                return Err(Error::Validation(format!("type {}: gamma must be positive", t.name)));
            }
        }
        Ok(())
    }

    /// Checks that `u` has one field per type, of the right length, inside
    /// the admissible boxes.
    pub fn check_parameters(&self, mesh: &Mesh, u: &[Vec<f64>]) -> Result<()> {
        if u.len() != self.types.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter fields, got {}",
                self.types.len(),
                u.len()
            )));
        }
        for (t, field) in self.types.iter().zip(u) {
            if field.len() != mesh.node_count() {
                return Err(Error::Validation(format!(
                    "type {}: field has {} values for {} nodes",
                    t.name,
                    field.len(),
                    mesh.node_count()
                )));
            }
            if let Some((i, v)) = field
                .iter()
                .enumerate()
                .find(|(_, &v)| !(v >= t.lower && v <= t.upper))
            {
                return Err(Error::Validation(format!(
                    "type {}: value {v} at node {i} outside [{}, {}]",
                    t.name, t.lower, t.upper
                )));
            }
        }
        Ok(())
    }

    pub fn zero_parameters(&self, mesh: &Mesh) -> Vec<Vec<f64>> {
        vec![vec![0.0; mesh.node_count()]; self.types.len()]
    }
}

/// Right-hand side of the forward problem.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// Neumann flux, one value per boundary node in loop order.
    Flux(Vec<f64>),
    /// Volume source, one value per node.
    Volume(Vec<f64>),
}

/// Column-compressed sparse matrix.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    inner: SparseColMat<usize, f64>,
}

impl SparseMatrix {
    /// Duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let trips: Vec<Triplet<usize, usize, f64>> =
            entries.iter().map(|&(i, j, v)| Triplet::new(i, j, v)).collect();
        let inner = SparseColMat::try_new_from_triplets(nrows, ncols, &trips)
            .map_err(|e| Error::Solver(format!("sparse assembly: {e:?}")))?;
        Ok(Self { inner })
    }

    pub fn nrows(&self) -> usize {
        self.inner.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.inner.ncols()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        let a = self.inner.as_ref();
        let (cp, ri, val) = (a.col_ptr(), a.row_idx(), a.val());
        for j in 0..self.ncols() {
            let xj = x[j];
            for k in cp[j]..cp[j + 1] {
                y[ri[k]] += val[k] * xj;
            }
        }
        y
    }

    /// Row-major dense copy.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols()]; self.nrows()];
        let a = self.inner.as_ref();
        let (cp, ri, val) = (a.col_ptr(), a.row_idx(), a.val());
        for j in 0..self.ncols() {
            for k in cp[j]..cp[j + 1] {
                d[ri[k]][j] += val[k];
            }
        }
        d
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let a = self.inner.as_ref();
        let (cp, ri, val) = (a.col_ptr(), a.row_idx(), a.val());
        let mut out = Vec::with_capacity(val.len());
        for j in 0..self.ncols() {
            for k in cp[j]..cp[j + 1] {
                out.push((ri[k], j, val[k]));
            }
        }
        out
    }

    pub fn faer(&self) -> &SparseColMat<usize, f64> {
        &self.inner
    }
}

fn solve_with(n: usize, b: &[f64], f: impl FnOnce(faer::MatMut<'_, f64>)) -> Vec<f64> {
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    f(rhs.as_mut());
    (0..n).map(|i| rhs[(i, 0)]).collect()
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    llt: Llt<usize, f64>,
    n: usize,
}

impl SpdFactor {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let llt = a
            .inner
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::Solver(format!("Cholesky factorization failed: {e:?}")))?;
        Ok(Self { llt, n: a.nrows() })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        solve_with(self.n, b, |m| self.llt.solve_in_place(m))
    }
}

/// Sparse LU factorization of a general square matrix.
#[derive(Debug, Clone)]
pub struct LuFactor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn new(a: &SparseMatrix) -> Result<Self> {
        let lu = a
            .inner
            .sp_lu()
            .map_err(|e| Error::Solver(format!("LU factorization failed: {e:?}")))?;
        Ok(Self { lu, n: a.nrows() })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        solve_with(self.n, b, |m| self.lu.solve_in_place(m))
    }
}

/// Factorized symmetric operator. Pure-Neumann Laplacians are handled by
/// pinning node 0 and shifting the result to zero weighted mean.
#[derive(Debug, Clone)]
pub struct OperatorFactor {
    factor: SpdFactor,
    gauge: Option<Vec<f64>>,
}

impl OperatorFactor {
    pub fn new(a: &SparseMatrix, gauge_weights: Option<&[f64]>) -> Result<Self> {
        match gauge_weights {
            None => Ok(Self { factor: SpdFactor::new(a)?, gauge: None }),
            Some(w) => {
                let mut trips: Vec<(usize, usize, f64)> = a
                    .triplets()
                    .into_iter()
                    .filter(|&(i, j, _)| i != 0 && j != 0)
                    .collect();
                trips.push((0, 0, 1.0));
                let pinned = SparseMatrix::from_triplets(a.nrows(), a.ncols(), &trips)?;
                Ok(Self { factor: SpdFactor::new(&pinned)?, gauge: Some(w.to_vec()) })
            }
        }
    }

    /// Solves `A x = b`. With a gauge, `b` must sum to zero.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        match &self.gauge {
            None => self.factor.solve(b),
            Some(w) => {
                let mut rhs = b.to_vec();
                rhs[0] = 0.0;
                let mut x = self.factor.solve(&rhs);
                let mean = weighted_mean(&x, w);
                x.iter_mut().for_each(|v| *v -= mean);
                x
            }
        }
    }
}

fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let total: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// Shape functions at the three edge midpoints (0,1), (1,2), (2,0).
const MIDPOINT_EDGES: [[usize; 2]; 3] = [[0, 1], [1, 2], [2, 0]];

fn midpoint_values(tri: &[usize; 3], f: &[f64]) -> [f64; 3] {
    MIDPOINT_EDGES.map(|[a, b]| 0.5 * (f[tri[a]] + f[tri[b]]))
}

/// `∫_T φ_a φ_b φ_c / |T|`.
fn triple(a: usize, b: usize, c: usize) -> f64 {
    match (a == b, b == c, a == c) {
        (true, true, _) => 1.0 / 10.0,
        (false, false, false) => 1.0 / 60.0,
        _ => 1.0 / 30.0,
    }
}

fn edge_contains(e: usize, local: usize) -> bool {
    MIDPOINT_EDGES[e].contains(&local)
}

fn grad_of(mesh: &Mesh, t: usize, f: &[f64]) -> [f64; 2] {
    let g = &mesh.gradients()[t];
    let tri = &mesh.triangles()[t];
    let mut out = [0.0; 2];
    for a in 0..3 {
        out[0] += f[tri[a]] * g[a][0];
        out[1] += f[tri[a]] * g[a][1];
    }
    out
}

/// Triangle-mean of a nodal field.
fn tri_mean(tri: &[usize; 3], f: &[f64]) -> f64 {
    (f[tri[0]] + f[tri[1]] + f[tri[2]]) / 3.0
}

/// Accumulated coefficients of the weak form for a given `u`.
struct Coefficients {
    /// Per-triangle conductivity.
    sigma: Vec<f64>,
    /// Nodal potential (linear, integrated exactly).
    potential: Vec<f64>,
    /// Nodal cubic coefficient.
    cubic: Vec<f64>,
    /// Nodal `|y|y` coefficient.
    quadratic: Vec<f64>,
}

fn coefficients(problem: &ProblemSpec, mesh: &Mesh, u: &[Vec<f64>]) -> Result<Coefficients> {
    let n = mesh.node_count();
    let mut sigma_nodal = vec![problem.c0; n];
    let mut potential = vec![problem.p0; n];
    let mut cubic = vec![problem.cubic; n];
    let mut quadratic = vec![0.0; n];
    for (t, field) in problem.types.iter().zip(u) {
        for i in 0..n {
            match t.kind {
                TypeKind::Conductivity => sigma_nodal[i] += field[i],
                TypeKind::Potential => potential[i] += field[i],
                TypeKind::Reaction => {
                    sigma_nodal[i] -= (1.0 - CE_SIGMA_INSIDE) * field[i];
                    cubic[i] -= field[i];
                }
                TypeKind::Modulus => quadratic[i] += field[i],
            }
        }
    }
    let mut sigma = Vec::with_capacity(mesh.triangle_count());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let s = tri_mean(tri, &sigma_nodal);
        if !(s > 0.0) {
            return Err(Error::Coefficient { triangle: t, value: s });
        }
        sigma.push(s);
    }
    Ok(Coefficients { sigma, potential, cubic, quadratic })
}

fn push_stiffness(mesh: &Mesh, sigma: &[f64], out: &mut Vec<(usize, usize, f64)>) {
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let g = &mesh.gradients()[t];
        let s = sigma[t] * mesh.triangle_areas()[t];
        for a in 0..3 {
            for b in 0..3 {
                out.push((tri[a], tri[b], s * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
            }
        }
    }
}

/// Exact `∫w φ_a φ_b` for a nodal (P1) weight `w`.
fn push_mass(mesh: &Mesh, w: &[f64], out: &mut Vec<(usize, usize, f64)>) {
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.triangle_areas()[t];
        if tri.iter().all(|&v| w[v] == 0.0) {
            continue;
        }
        for a in 0..3 {
            for b in 0..3 {
                let v: f64 = (0..3).map(|c| w[tri[c]] * triple(a, b, c)).sum();
                out.push((tri[a], tri[b], area * v));
            }
        }
    }
}

/// Midpoint-rule `∫g φ_a φ_b` with `g` given at the three edge midpoints.
fn push_midpoint_mass(
    mesh: &Mesh,
    g: impl Fn(usize, &[usize; 3]) -> [f64; 3],
    out: &mut Vec<(usize, usize, f64)>,
) {
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let gm = g(t, tri);
        if gm.iter().all(|&v| v == 0.0) {
            continue;
        }
        let w = mesh.triangle_areas()[t] / 12.0;
        for a in 0..3 {
            for b in 0..3 {
                let v: f64 = (0..3)
                    .filter(|&e| edge_contains(e, a) && edge_contains(e, b))
                    .map(|e| gm[e])
                    .sum();
                if v != 0.0 {
                    out.push((tri[a], tri[b], w * v));
                }
            }
        }
    }
}

/// Midpoint-rule load `∫g φ_a` with `g` given at the edge midpoints.
fn add_midpoint_load(mesh: &Mesh, g: impl Fn(usize, &[usize; 3]) -> [f64; 3], out: &mut [f64]) {
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let gm = g(t, tri);
        let w = mesh.triangle_areas()[t] / 6.0;
        for a in 0..3 {
            let v: f64 = (0..3).filter(|&e| edge_contains(e, a)).map(|e| gm[e]).sum();
            out[tri[a]] += w * v;
        }
    }
}

/// Stiffness matrix `∫∇φ_a·∇φ_b`.
pub fn stiffness_matrix(mesh: &Mesh) -> SparseMatrix {
    let mut trips = Vec::new();
    push_stiffness(mesh, &vec![1.0; mesh.triangle_count()], &mut trips);
    SparseMatrix::from_triplets(mesh.node_count(), mesh.node_count(), &trips)
        .expect("valid stiffness indices")
}

/// Consistent mass matrix `∫φ_a φ_b`.
pub fn mass_matrix(mesh: &Mesh) -> SparseMatrix {
    let mut trips = Vec::new();
    push_mass(mesh, &vec![1.0; mesh.node_count()], &mut trips);
    SparseMatrix::from_triplets(mesh.node_count(), mesh.node_count(), &trips)
        .expect("valid mass indices")
}

/// Jacobian of the full forward operator at `y_lin` (the operator itself
/// for linear models).
pub fn assemble(
    problem: &ProblemSpec,
    mesh: &Mesh,
    u: &[Vec<f64>],
    y_lin: Option<&[f64]>,
) -> Result<SparseMatrix> {
    problem.check_parameters(mesh, u)?;
    let c = coefficients(problem, mesh, u)?;
    let y_lin = match (problem.semilinear(), y_lin) {
        (true, None) => {
            return Err(Error::Precondition(
                "semilinear model needs a linearization state".into(),
            ))
        }
        (_, y) => y,
    };
    assemble_from(mesh, &c, y_lin)
}

fn assemble_from(mesh: &Mesh, c: &Coefficients, y_lin: Option<&[f64]>) -> Result<SparseMatrix> {
    let mut trips = Vec::new();
    push_stiffness(mesh, &c.sigma, &mut trips);
    push_mass(mesh, &c.potential, &mut trips);
    if let Some(y) = y_lin {
        push_midpoint_mass(
            mesh,
            |_, tri| {
                let ym = midpoint_values(tri, y);
                let cm = midpoint_values(tri, &c.cubic);
                let qm = midpoint_values(tri, &c.quadratic);
                [0, 1, 2].map(|e| 3.0 * cm[e] * ym[e] * ym[e] + 2.0 * qm[e] * ym[e].abs())
            },
            &mut trips,
        );
    }
    SparseMatrix::from_triplets(mesh.node_count(), mesh.node_count(), &trips)
}

/// The background operator `A[y]` with no inclusion. For the cubic model it
/// is the secant form `z ↦ −Δz + y²z`, so that `A[y]y` reproduces the
/// nonlinear term exactly.
pub fn assemble_background(problem: &ProblemSpec, mesh: &Mesh, y_state: Option<&[f64]>) -> Result<SparseMatrix> {
    let mut trips = Vec::new();
    push_stiffness(mesh, &vec![problem.c0; mesh.triangle_count()], &mut trips);
    push_mass(mesh, &vec![problem.p0; mesh.node_count()], &mut trips);
    if problem.nonlinear_a() {
        let y = y_state.ok_or_else(|| {
            Error::Precondition("nonlinear background operator needs a state".into())
        })?;
        let cubic = problem.cubic;
        push_midpoint_mass(
            mesh,
            |_, tri| midpoint_values(tri, y).map(|v| cubic * v * v),
            &mut trips,
        );
    }
    SparseMatrix::from_triplets(mesh.node_count(), mesh.node_count(), &trips)
}

/// Weights `∫_Γ φ_i`, per node.
pub fn boundary_weights(mesh: &Mesh) -> Vec<f64> {
    let mut w = vec![0.0; mesh.node_count()];
    for e in mesh.boundary_edges() {
        w[e.nodes[0]] += 0.5 * e.length;
        w[e.nodes[1]] += 0.5 * e.length;
    }
    w
}

/// `(M_Γ v)` in boundary-loop indexing with an optional weight per edge.
pub fn boundary_mass_apply(mesh: &Mesh, edge_weights: Option<&[f64]>, v: &[f64]) -> Vec<f64> {
    let nb = mesh.boundary_count();
    let mut out = vec![0.0; nb];
    for (e, edge) in mesh.boundary_edges().iter().enumerate() {
        let w = edge_weights.map_or(1.0, |w| w[e]) * edge.length / 6.0;
        let (a, b) = (e, (e + 1) % nb);
        out[a] += w * (2.0 * v[a] + v[b]);
        out[b] += w * (v[a] + 2.0 * v[b]);
    }
    out
}

/// Triplets of the boundary mass matrix (boundary-loop indexing).
pub fn boundary_mass_triplets(mesh: &Mesh, edge_weights: Option<&[f64]>) -> Vec<(usize, usize, f64)> {
    let nb = mesh.boundary_count();
    let mut out = Vec::with_capacity(4 * nb);
    for (e, edge) in mesh.boundary_edges().iter().enumerate() {
        let w = edge_weights.map_or(1.0, |w| w[e]) * edge.length / 6.0;
        let (a, b) = (e, (e + 1) % nb);
        out.extend([(a, a, 2.0 * w), (a, b, w), (b, a, w), (b, b, 2.0 * w)]);
    }
    out
}

/// `∫_e v²` summed over the edges selected by `label` (all edges if `None`).
pub fn boundary_norm_sq(
    mesh: &Mesh,
    partition: Option<&BoundaryPartition>,
    label: Option<BoundaryLabel>,
    v: &[f64],
) -> f64 {
    let nb = mesh.boundary_count();
    mesh.boundary_edges()
        .iter()
        .enumerate()
        .filter(|(e, _)| match (partition, label) {
            (Some(p), Some(l)) => p.label(*e) == l,
            _ => true,
        })
        .map(|(e, edge)| {
            let (a, b) = (v[e], v[(e + 1) % nb]);
            edge.length / 3.0 * (a * a + a * b + b * b)
        })
        .sum()
}

/// Load vector of a source.
pub fn load_vector(mesh: &Mesh, source: &Source) -> Result<Vec<f64>> {
    match source {
        Source::Flux(f) => {
            if f.len() != mesh.boundary_count() {
                return Err(Error::Validation(format!(
                    "flux has {} values for {} boundary nodes",
                    f.len(),
                    mesh.boundary_count()
                )));
            }
            let mut b = vec![0.0; mesh.node_count()];
            for (pos, v) in boundary_mass_apply(mesh, None, f).into_iter().enumerate() {
                b[mesh.boundary_nodes()[pos]] += v;
            }
            Ok(b)
        }
        Source::Volume(f) => {
            if f.len() != mesh.node_count() {
                return Err(Error::Validation("volume source length differs from node count".into()));
            }
            Ok(mass_matrix(mesh).matvec(f))
        }
    }
}

/// Subtracts the boundary mean from a flux, as required by the pure
/// Neumann problem.
pub fn mean_correct(mesh: &Mesh, f: &[f64]) -> Vec<f64> {
    let mean = boundary_mass_apply(mesh, None, f).iter().sum::<f64>() / mesh.perimeter();
    f.iter().map(|v| v - mean).collect()
}

fn gauge_weights(problem: &ProblemSpec, mesh: &Mesh) -> Option<Vec<f64>> {
    (problem.model == Model::Eit).then(|| mesh.lumped_masses().to_vec())
}

/// Makes a load compatible with the Neumann problem by removing its
/// component along the boundary weights.
fn compatible_load(problem: &ProblemSpec, mesh: &Mesh, mut b: Vec<f64>) -> Vec<f64> {
    if problem.model == Model::Eit {
        let w = boundary_weights(mesh);
        let c = b.iter().sum::<f64>() / w.iter().sum::<f64>();
        b.iter_mut().zip(&w).for_each(|(x, wi)| *x -= c * wi);
    }
    b
}

/// Residual `F(y) − b` of the forward problem.
fn residual(mesh: &Mesh, c: &Coefficients, y: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let lin = assemble_from(mesh, c, None)?;
    let mut r = lin.matvec(y);
    add_midpoint_load(
        mesh,
        |_, tri| {
            let ym = midpoint_values(tri, y);
            let cm = midpoint_values(tri, &c.cubic);
            let qm = midpoint_values(tri, &c.quadratic);
            [0, 1, 2].map(|e| cm[e] * ym[e].powi(3) + qm[e] * ym[e].abs() * ym[e])
        },
        &mut r,
    );
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri -= bi);
    Ok(r)
}

/// Forward-model residual `F(y) − load`, exposed for diagnostics.
pub fn forward_residual(
    problem: &ProblemSpec,
    mesh: &Mesh,
    u: &[Vec<f64>],
    y: &[f64],
    source: &Source,
) -> Result<Vec<f64>> {
    let c = coefficients(problem, mesh, u)?;
    let b = compatible_load(problem, mesh, load_vector(mesh, source)?);
    residual(mesh, &c, y, &b)
}

/// Solves the forward problem for `y(u)`. `guess` seeds Newton's method for
/// semilinear models and is ignored otherwise.
pub fn solve_forward(
    problem: &ProblemSpec,
    mesh: &Mesh,
    u: &[Vec<f64>],
    source: &Source,
    guess: Option<&[f64]>,
) -> Result<Vec<f64>> {
    problem.check_parameters(mesh, u)?;
    let c = coefficients(problem, mesh, u)?;
    let b = compatible_load(problem, mesh, load_vector(mesh, source)?);
    if b.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; mesh.node_count()]);
    }
    if !problem.semilinear() {
        let a = assemble_from(mesh, &c, None)?;
        return Ok(OperatorFactor::new(&a, gauge_weights(problem, mesh).as_deref())?.solve(&b));
    }
    let y0 = match guess {
        Some(g) => g.to_vec(),
        None => initial_guess(problem, mesh, u, &b)?,
    };
    newton(mesh, &c, y0, &b)
}

fn initial_guess(problem: &ProblemSpec, mesh: &Mesh, u: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    if problem.nonlinear_a() {
        // Constant state balancing the total source against the cubic term.
        let mut cubic = vec![problem.cubic; mesh.node_count()];
        for (t, field) in problem.types.iter().zip(u) {
            if t.kind == TypeKind::Reaction {
                cubic.iter_mut().zip(field).for_each(|(c, v)| *c -= v);
            }
        }
        let denom: f64 = cubic.iter().zip(mesh.lumped_masses()).map(|(c, m)| c * m).sum();
        let total: f64 = b.iter().sum();
        let c = if denom > 0.0 { (total / denom).cbrt() } else { 0.0 };
        Ok(vec![c; mesh.node_count()])
    } else {
        let a = assemble_background(problem, mesh, None)?;
        Ok(SpdFactor::new(&a)?.solve(b))
    }
}

fn newton(mesh: &Mesh, c: &Coefficients, mut y: Vec<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let mut r = residual(mesh, c, &y, b)?;
    let mut rn = norm(&r);
    if rn <= NEWTON_RESIDUAL_FLOOR * norm(b) {
        return Ok(y);
    }
    for _ in 0..NEWTON_MAX_STEPS {
        let jac = assemble_from(mesh, c, Some(&y))?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = SpdFactor::new(&jac)?.solve(&neg);
        let mut t = 1.0;
        let mut trial: Vec<f64>;
        let mut trial_r: Vec<f64>;
        let mut halvings = 0;
        loop {
            trial = y.iter().zip(&delta).map(|(a, d)| a + t * d).collect();
            trial_r = residual(mesh, c, &trial, b)?;
            if norm(&trial_r) <= rn || halvings == NEWTON_MAX_HALVINGS {
                break;
            }
            t *= 0.5;
            halvings += 1;
        }
        let step = t * norm(&delta);
        y = trial;
        r = trial_r;
        rn = norm(&r);
        if step <= NEWTON_TOL * norm(&y) || rn == 0.0 {
            return Ok(y);
        }
    }
    Err(Error::NewtonDivergence { iterations: NEWTON_MAX_STEPS, residual: rn })
}

/// Factorized background operator `A[y]`, reused across solves.
#[derive(Debug, Clone)]
pub struct BackgroundSolver {
    factor: OperatorFactor,
}

impl BackgroundSolver {
    pub fn new(problem: &ProblemSpec, mesh: &Mesh, y_state: Option<&[f64]>) -> Result<Self> {
        let a = assemble_background(problem, mesh, y_state)?;
        let g = gauge_weights(problem, mesh);
        Ok(Self { factor: OperatorFactor::new(&a, g.as_deref())? })
    }

    pub fn solve_load(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }

    pub fn solve(&self, problem: &ProblemSpec, mesh: &Mesh, source: &Source) -> Result<Vec<f64>> {
        let b = compatible_load(problem, mesh, load_vector(mesh, source)?);
        Ok(self.factor.solve(&b))
    }
}

/// `y_∅ = A[y_state]⁻¹ f`. The state is ignored when `A` is linear.
pub fn solve_background(
    problem: &ProblemSpec,
    mesh: &Mesh,
    y_state: Option<&[f64]>,
    source: &Source,
) -> Result<Vec<f64>> {
    BackgroundSolver::new(problem, mesh, y_state)?.solve(problem, mesh, source)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracePart {
    D,
    N,
    Full,
}

/// Boundary values of `y`, zeroed outside the requested part.
pub fn trace(mesh: &Mesh, partition: &BoundaryPartition, y: &[f64], part: TracePart) -> Vec<f64> {
    mesh.boundary_nodes()
        .iter()
        .enumerate()
        .map(|(pos, &node)| {
            let keep = match part {
                TracePart::Full => true,
                TracePart::D => partition.node_in_d(pos),
                TracePart::N => !partition.node_in_d(pos),
            };
            if keep {
                y[node]
            } else {
                0.0
            }
        })
        .collect()
}

/// Boundary values of `y` in loop order.
pub fn full_trace(mesh: &Mesh, y: &[f64]) -> Vec<f64> {
    mesh.boundary_nodes().iter().map(|&v| y[v]).collect()
}

/// Load vector `⟨B[τ](y), φ_i⟩`, summed over types.
pub fn apply_b_tau(problem: &ProblemSpec, mesh: &Mesh, y: &[f64], tau: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.node_count()];
    for (t, q) in problem.types.iter().zip(tau) {
        match t.kind {
            TypeKind::Conductivity | TypeKind::Reaction => {
                let scale = if t.kind == TypeKind::Reaction { -(1.0 - CE_SIGMA_INSIDE) } else { 1.0 };
                for (tr, tri) in mesh.triangles().iter().enumerate() {
                    let gy = grad_of(mesh, tr, y);
                    let g = &mesh.gradients()[tr];
                    let s = scale * tri_mean(tri, q) * mesh.triangle_areas()[tr];
                    for a in 0..3 {
                        out[tri[a]] += s * (gy[0] * g[a][0] + gy[1] * g[a][1]);
                    }
                }
                if t.kind == TypeKind::Reaction {
                    add_midpoint_load(
                        mesh,
                        |_, tri| {
                            let (ym, qm) = (midpoint_values(tri, y), midpoint_values(tri, q));
                            [0, 1, 2].map(|e| -qm[e] * ym[e].powi(3))
                        },
                        &mut out,
                    );
                }
            }
            TypeKind::Potential => {
                for (tr, tri) in mesh.triangles().iter().enumerate() {
                    let area = mesh.triangle_areas()[tr];
                    for a in 0..3 {
                        let mut s = 0.0;
                        for b in 0..3 {
                            for c in 0..3 {
                                s += q[tri[b]] * y[tri[c]] * triple(a, b, c);
                            }
                        }
                        out[tri[a]] += area * s;
                    }
                }
            }
            TypeKind::Modulus => add_midpoint_load(
                mesh,
                |_, tri| {
                    let (ym, qm) = (midpoint_values(tri, y), midpoint_values(tri, q));
                    [0, 1, 2].map(|e| qm[e] * ym[e].abs() * ym[e])
                },
                &mut out,
            ),
        }
    }
    out
}

/// Per-type load vectors of `B_τ[y]* w`, i.e. `⟨B[φ_i](y), w⟩` for every
/// node `i`.
pub fn b_tau_adjoint(problem: &ProblemSpec, mesh: &Mesh, y: &[f64], w: &[f64]) -> Vec<Vec<f64>> {
    problem
        .types
        .iter()
        .map(|t| {
            let mut out = vec![0.0; mesh.node_count()];
            match t.kind {
                TypeKind::Conductivity | TypeKind::Reaction => {
                    let scale = if t.kind == TypeKind::Reaction { -(1.0 - CE_SIGMA_INSIDE) } else { 1.0 };
                    for (tr, tri) in mesh.triangles().iter().enumerate() {
                        let (gy, gw) = (grad_of(mesh, tr, y), grad_of(mesh, tr, w));
                        let s = scale * mesh.triangle_areas()[tr] / 3.0 * (gy[0] * gw[0] + gy[1] * gw[1]);
                        for &v in tri {
                            out[v] += s;
                        }
                    }
                    if t.kind == TypeKind::Reaction {
                        add_midpoint_load(
                            mesh,
                            |_, tri| {
                                let (ym, wm) = (midpoint_values(tri, y), midpoint_values(tri, w));
                                [0, 1, 2].map(|e| -ym[e].powi(3) * wm[e])
                            },
                            &mut out,
                        );
                    }
                }
                TypeKind::Potential => {
                    for (tr, tri) in mesh.triangles().iter().enumerate() {
                        let area = mesh.triangle_areas()[tr];
                        for a in 0..3 {
                            let mut s = 0.0;
                            for b in 0..3 {
                                for c in 0..3 {
                                    s += y[tri[b]] * w[tri[c]] * triple(a, b, c);
                                }
                            }
                            out[tri[a]] += area * s;
                        }
                    }
                }
                TypeKind::Modulus => add_midpoint_load(
                    mesh,
                    |_, tri| {
                        let (ym, wm) = (midpoint_values(tri, y), midpoint_values(tri, w));
                        [0, 1, 2].map(|e| ym[e].abs() * ym[e] * wm[e])
                    },
                    &mut out,
                ),
            }
            out
        })
        .collect()
}

/// Converts a load vector to the nodal density against lumped weights.
pub fn load_to_density(mesh: &Mesh, load: &[f64]) -> Vec<f64> {
    load.iter().zip(mesh.lumped_masses()).map(|(l, m)| l / m).collect()
}

/// Dual pairing `⟨ζ, η⟩ = Σ m_i ζ_i η_i` of a density with a nodal field.
pub fn pairing(mesh: &Mesh, density: &[f64], field: &[f64]) -> f64 {
    density
        .iter()
        .zip(field)
        .zip(mesh.lumped_masses())
        .map(|((z, e), m)| z * e * m)
        .sum()
}

/// `L^p` norm of a nodal field with lumped weights. Large `p` is handled by
/// scaling with the maximum first.
pub fn lp_norm(mesh: &Mesh, f: &[f64], p: f64) -> f64 {
    let max = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return 0.0;
    }
    if p.is_infinite() {
        return max;
    }
    let s: f64 = f
        .iter()
        .zip(mesh.lumped_masses())
        .map(|(v, m)| m * (v.abs() / max).powf(p))
        .sum();
    max * s.powf(1.0 / p)
}

pub fn l1_norm(mesh: &Mesh, f: &[f64]) -> f64 {
    f.iter().zip(mesh.lumped_masses()).map(|(v, m)| m * v.abs()).sum()
}
