//! Heterogeneously regularized Dirichlet-to-Neumann map and the adjoint
//! lifting of boundary residuals into dual densities.

use crate::error::{Error, Result};
use crate::fem::{self, LuFactor, ProblemSpec, SparseMatrix};
use crate::mesh::{BoundaryLabel, BoundaryPartition, Mesh};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrDtnParams {
    pub alpha_d: f64,
    pub alpha_n: f64,
}

impl HrDtnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_d > 0.0 && self.alpha_n > 0.0) {
            return Err(Error::Validation(format!(
                "regularization parameters must be positive (alpha_d = {}, alpha_n = {})",
                self.alpha_d, self.alpha_n
            )));
        }
        Ok(())
    }

    /// `α_D` per boundary edge.
    pub fn edge_alphas(&self, partition: &BoundaryPartition) -> Vec<f64> {
        partition
            .edge_labels
            .iter()
            .map(|l| match l {
                BoundaryLabel::D => self.alpha_d,
                BoundaryLabel::N => self.alpha_n,
            })
            .collect()
    }
}

/// Factorized saddle system
/// `[A, −TᵀM_Γ; M_Γ T, M_α] (w; p) = (0; M_Γ v)`.
#[derive(Debug, Clone)]
pub struct HrDtn {
    factor: LuFactor,
    n: usize,
    boundary_nodes: Vec<usize>,
    mesh_bmass: Vec<(usize, usize, f64)>,
}

impl HrDtn {
    pub fn new(
        mesh: &Mesh,
        a: &SparseMatrix,
        params: &HrDtnParams,
        partition: &BoundaryPartition,
    ) -> Result<Self> {
        params.validate()?;
        let n = mesh.node_count();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::Validation("operator size differs from node count".into()));
        }
        if partition.edge_labels.len() != mesh.boundary_count() {
            return Err(Error::Validation("partition does not match the mesh boundary".into()));
        }
        let bn = mesh.boundary_nodes().to_vec();
        let mb = fem::boundary_mass_triplets(mesh, None);
        let alphas = params.edge_alphas(partition);
        let ma = fem::boundary_mass_triplets(mesh, Some(&alphas));

        let mut trips = a.triplets();
        for &(i, j, v) in &mb {
            trips.push((bn[i], n + j, -v));
            trips.push((n + i, bn[j], v));
        }
        for &(i, j, v) in &ma {
            trips.push((n + i, n + j, v));
        }
        let nb = bn.len();
        let block = SparseMatrix::from_triplets(n + nb, n + nb, &trips)?;
        Ok(Self { factor: LuFactor::new(&block)?, n, boundary_nodes: bn, mesh_bmass: mb })
    }

    fn bmass_apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.boundary_nodes.len()];
        for &(i, j, m) in &self.mesh_bmass {
            out[i] += m * v[j];
        }
        out
    }

    fn solve_block(&self, boundary_rhs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut rhs = vec![0.0; self.n + boundary_rhs.len()];
        rhs[self.n..].copy_from_slice(boundary_rhs);
        let x = self.factor.solve(&rhs);
        (x[..self.n].to_vec(), x[self.n..].to_vec())
    }

    /// `(w, p)` with `p = Λ_{α,D} v`.
    pub fn solve(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.solve_block(&self.bmass_apply(v))
    }

    /// Adjoint problem with data `p₁`, returned as `(w₂, p₂)`. With a
    /// symmetric `A` it reuses the forward factorization: `w₂ = −w̃`,
    /// `p₂ = p̃` where `(w̃, p̃)` solves the forward system with data `p₁`.
    pub fn solve_adjoint(&self, p1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w, p) = self.solve(p1);
        (w.into_iter().map(|x| -x).collect(), p)
    }
}

/// One-shot HR-DtN solve.
pub fn solve_hrdtn(
    mesh: &Mesh,
    a: &SparseMatrix,
    params: &HrDtnParams,
    partition: &BoundaryPartition,
    v: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(HrDtn::new(mesh, a, params, partition)?.solve(v))
}

/// `ζ = −B_τ[y_k]* w₂`, one density per inclusion type.
pub fn adjoint_lift(
    problem: &ProblemSpec,
    mesh: &Mesh,
    op: &HrDtn,
    y_k: &[f64],
    v: &[f64],
) -> Vec<Vec<f64>> {
    let (_, p1) = op.solve(v);
    let (w2, _) = op.solve_adjoint(&p1);
    let neg: Vec<f64> = w2.iter().map(|x| -x).collect();
    fem::b_tau_adjoint(problem, mesh, y_k, &neg)
        .into_iter()
        .map(|load| fem::load_to_density(mesh, &load))
        .collect()
}

/// Sums dual densities over datasets, type by type.
pub fn aggregate_duals(per_dataset: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = per_dataset.first() else {
        return Err(Error::Validation("no dual functions to aggregate".into()));
    };
    let mut out = first.clone();
    for d in &per_dataset[1..] {
        if d.len() != out.len() || d.iter().zip(&out).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Validation("dual functions have mismatched type lists".into()));
        }
        for (acc, z) in out.iter_mut().zip(d) {
            acc.iter_mut().zip(z).for_each(|(a, b)| *a += b);
        }
    }
    Ok(out)
}
