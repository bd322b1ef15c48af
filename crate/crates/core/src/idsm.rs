//! The iterative direct sampling driver.
//!
//! Each iteration lifts the boundary residual of the background state into
//! a dual density, maps it to an index function with the resolver, projects
//! onto the admissible box and, except on the last iteration, refines the
//! resolver with a damped quasi-Newton correction.

use std::fmt;

use log::{debug, warn};

use crate::dtn::{self, HrDtn, HrDtnParams};
use crate::error::{Error, Result};
use crate::fem::{self, BackgroundSolver, ProblemSpec, Source};
use crate::mesh::{BoundaryLabel, BoundaryPartition, CoarseMap, Mesh};
use crate::resolver::{self, ResolverState, Scheme};

/// One measurement: a source and its trace on `Γ_D` (boundary-loop order,
/// values on `Γ_N` are ignored).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: Source,
    pub y_d: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub params: HrDtnParams,
    pub p_index: f64,
    pub scheme: Scheme,
    /// Number of iterations `K`.
    pub iterations: usize,
    pub eps_band: f64,
    /// Random probes per spectral-bound check; 0 disables the check.
    pub probes: usize,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.params.validate()?;
        if self.iterations == 0 {
            return Err(Error::Validation("at least one iteration is required".into()));
        }
        if !(self.p_index >= 1.0) {
            return Err(Error::Validation(format!("integrability index p = {} must be ≥ 1", self.p_index)));
        }
        if !(self.eps_band >= 0.0 && self.eps_band < 1.0) {
            return Err(Error::Validation(format!("band width {} must lie in [0, 1)", self.eps_band)));
        }
        Ok(())
    }
}

/// Per-iteration internals, for monitoring.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// `⟨ζ̂, η̂⟩` of the correction made in this iteration.
    pub pairing: Option<f64>,
    /// `‖Rζ̂ − η̂‖_{L¹} / ‖η̂‖_{L¹}` right after the correction.
    pub secant_residual: Option<f64>,
    /// Largest probe ratio against the spectral bound after stabilizing.
    pub probe_ratio: Option<f64>,
    pub upsilon: Option<f64>,
    /// Low-rank terms held by the resolver at the end of the iteration.
    pub rank: usize,
    pub c_d: Vec<f64>,
    /// `‖ζ‖_{L¹}` of the aggregated dual.
    pub dual_norm: f64,
    /// Why the correction was skipped, if it was.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub u: Vec<Vec<f64>>,
    pub eta: Vec<Vec<f64>>,
    pub lambda: f64,
    /// `1 / (1 + λ_k)`.
    pub damping_factor: f64,
    /// Cumulative PDE solve stages.
    pub pde_solve_count: usize,
    /// `‖T y(u^k) − y_d‖_{L²(Γ_D)}` per dataset.
    pub residuals: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// A failed run with the iterations completed before the failure.
#[derive(Debug)]
pub struct RunError {
    pub history: Vec<IterationRecord>,
    pub source: Error,
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run failed after {} iterations: {}", self.history.len().saturating_sub(1), self.source)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

/// `ỹ_d`: the measured trace on `Γ_D`, the simulated trace elsewhere.
pub fn complete_data(partition: &BoundaryPartition, y_d: &[f64], y_trace: &[f64]) -> Vec<f64> {
    y_d.iter()
        .zip(y_trace)
        .enumerate()
        .map(|(pos, (&d, &t))| if partition.node_in_d(pos) { d } else { t })
        .collect()
}

/// Projects every type onto its admissible box.
pub fn project_all(problem: &ProblemSpec, eta: &[Vec<f64>]) -> Vec<Vec<f64>> {
    problem
        .types
        .iter()
        .zip(eta)
        .map(|(t, e)| resolver::project(e, t.lower, t.upper))
        .collect()
}

fn data_misfit(mesh: &Mesh, partition: &BoundaryPartition, y_d: &[f64], y: &[f64]) -> f64 {
    let diff = sub(&fem::full_trace(mesh, y), y_d);
    fem::boundary_norm_sq(mesh, Some(partition), Some(BoundaryLabel::D), &diff).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Stateful driver; `step` performs one iteration.
pub struct Driver<'a> {
    cfg: RunConfig,
    mesh: &'a Mesh,
    partition: &'a BoundaryPartition,
    datasets: &'a [Dataset],
    resolver: ResolverState,
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    y_empty: Vec<Vec<f64>>,
    /// HR-DtN operators: one shared for linear `A`, one per dataset otherwise.
    ops: Vec<HrDtn>,
    solves: usize,
    history: Vec<IterationRecord>,
}

impl<'a> Driver<'a> {
    /// Validates the inputs, computes `y(0)` and records iteration 0.
    pub fn new(
        cfg: RunConfig,
        mesh: &'a Mesh,
        partition: &'a BoundaryPartition,
        cells: CoarseMap,
        datasets: &'a [Dataset],
    ) -> Result<Self> {
        cfg.validate()?;
        if datasets.is_empty() {
            return Err(Error::Validation("no datasets".into()));
        }
        for (i, d) in datasets.iter().enumerate() {
            if d.y_d.len() != mesh.boundary_count() {
                return Err(Error::Validation(format!(
                    "dataset {i} has {} boundary values for {} boundary nodes",
                    d.y_d.len(),
                    mesh.boundary_count()
                )));
            }
        }
        if partition.d_edge_count() == 0 {
            return Err(Error::Validation("the accessible boundary is empty".into()));
        }
        if cells.fine_to_coarse.len() != mesh.triangle_count() {
            return Err(Error::Validation("coarse map does not match the mesh".into()));
        }
        let resolver = ResolverState::build(
            mesh,
            partition,
            &cfg.params,
            &cfg.problem.types,
            cells,
            cfg.eps_band,
            cfg.p_index,
            cfg.scheme,
        )?;
        let u = cfg.problem.zero_parameters(mesh);
        // y_∅(0) coincides with y(0), so one solve stage covers both.
        let y = datasets
            .iter()
            .map(|d| fem::solve_forward(&cfg.problem, mesh, &u, &d.source, None))
            .collect::<Result<Vec<_>>>()?;
        let mut driver = Self {
            y_empty: y.clone(),
            ops: Vec::new(),
            cfg,
            mesh,
            partition,
            datasets,
            resolver,
            u,
            y,
            solves: 1,
            history: Vec::new(),
        };
        driver.rebuild_operators()?;
        let record = IterationRecord {
            k: 0,
            u: driver.u.clone(),
            eta: driver.u.clone(),
            lambda: 0.0,
            damping_factor: 1.0,
            pde_solve_count: driver.solves,
            residuals: driver.residuals(),
            diagnostics: Diagnostics { rank: 0, c_d: driver.resolver.c_d(), ..Default::default() },
        };
        driver.history.push(record);
        Ok(driver)
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    pub fn into_history(self) -> Vec<IterationRecord> {
        self.history
    }

    pub fn resolver(&self) -> &ResolverState {
        &self.resolver
    }

    pub fn solve_count(&self) -> usize {
        self.solves
    }

    /// Iterations performed so far.
    pub fn iteration(&self) -> usize {
        self.history.len() - 1
    }

    fn residuals(&self) -> Vec<f64> {
        self.datasets
            .iter()
            .zip(&self.y)
            .map(|(d, y)| data_misfit(self.mesh, self.partition, &d.y_d, y))
            .collect()
    }

    fn rebuild_operators(&mut self) -> Result<()> {
        let problem = &self.cfg.problem;
        if !problem.nonlinear_a() {
            if self.ops.is_empty() {
                let a = fem::assemble_background(problem, self.mesh, None)?;
                self.ops.push(HrDtn::new(self.mesh, &a, &self.cfg.params, self.partition)?);
            }
            return Ok(());
        }
        self.ops = self
            .y
            .iter()
            .map(|y| {
                let a = fem::assemble_background(problem, self.mesh, Some(y))?;
                HrDtn::new(self.mesh, &a, &self.cfg.params, self.partition)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    fn op(&self, i: usize) -> &HrDtn {
        &self.ops[if self.ops.len() == 1 { 0 } else { i }]
    }

    /// `Σ_i lift(v_i)` over datasets.
    fn lift(&self, residuals: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let per: Vec<Vec<Vec<f64>>> = residuals
            .iter()
            .enumerate()
            .map(|(i, v)| dtn::adjoint_lift(&self.cfg.problem, self.mesh, self.op(i), &self.y[i], v))
            .collect();
        dtn::aggregate_duals(&per)
    }

    /// Performs iteration `k = self.iteration()` and records `u^{k+1}`.
    pub fn step(&mut self) -> Result<&IterationRecord> {
        let k = self.iteration();
        let last = k + 1 >= self.cfg.iterations;
        let (mesh, partition) = (self.mesh, self.partition);

        let v: Vec<Vec<f64>> = self
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let completed = complete_data(partition, &d.y_d, &fem::full_trace(mesh, &self.y[i]));
                sub(&fem::full_trace(mesh, &self.y_empty[i]), &completed)
            })
            .collect();
        let zeta = self.lift(&v)?;
        self.solves += 2;

        let eta = self.resolver.apply(mesh, &zeta);
        let u_next = project_all(&self.cfg.problem, &eta);
        self.y = self
            .datasets
            .iter()
            .zip(&self.y)
            .map(|(d, y)| fem::solve_forward(&self.cfg.problem, mesh, &u_next, &d.source, Some(y)))
            .collect::<Result<Vec<_>>>()?;
        self.solves += 1;

        let mut diag = Diagnostics { dual_norm: resolver::l1(mesh, &zeta), ..Default::default() };
        if !last {
            self.correct(k, &u_next, &mut diag)?;
        }
        self.u = u_next;
        diag.rank = self.resolver.rank();
        diag.c_d = self.resolver.c_d();
        let lambda = self.resolver.lambda_prev;
        let record = IterationRecord {
            k: k + 1,
            u: self.u.clone(),
            eta,
            lambda,
            damping_factor: 1.0 / (1.0 + lambda),
            pde_solve_count: self.solves,
            residuals: self.residuals(),
            diagnostics: diag,
        };
        debug!(
            "iteration {}: rank {}, λ = {:.3e}, ‖ζ‖ = {:.3e}, solves {}",
            record.k, record.diagnostics.rank, lambda, record.diagnostics.dual_norm, self.solves
        );
        self.history.push(record);
        Ok(self.history.last().expect("history is nonempty"))
    }

    /// Auxiliary lift and resolver correction after computing `u^{k+1}`.
    fn correct(&mut self, k: usize, u_next: &[Vec<f64>], diag: &mut Diagnostics) -> Result<()> {
        let mesh = self.mesh;
        if self.cfg.problem.nonlinear_a() {
            self.y_empty = self
                .datasets
                .iter()
                .zip(&self.y)
                .map(|(d, y)| BackgroundSolver::new(&self.cfg.problem, mesh, Some(y))?.solve(&self.cfg.problem, mesh, &d.source))
                .collect::<Result<Vec<_>>>()?;
            self.solves += 1;
            self.rebuild_operators()?;
        }
        let v_hat: Vec<Vec<f64>> = self
            .y_empty
            .iter()
            .zip(&self.y)
            .map(|(ye, y)| sub(&fem::full_trace(mesh, ye), &fem::full_trace(mesh, y)))
            .collect();
        let zeta_hat = self.lift(&v_hat)?;
        self.solves += 2;

        let zu = resolver::pair(mesh, &zeta_hat, u_next);
        if !(zu > 0.0) {
            let why = format!("⟨ζ̂, u⟩ = {zu:e} is not positive");
            warn!("iteration {k}: correction skipped, {why}");
            diag.skipped = Some(why);
            return Ok(());
        }
        self.resolver.stabilize(mesh);
        let boxes: Vec<(f64, f64)> = self.cfg.problem.types.iter().map(|t| (t.lower, t.upper)).collect();
        // Rescale D against a first auxiliary index, then rebuild the
        // auxiliary index with the rescaled resolver so the correction
        // below makes the final resolver reproduce it exactly.
        let draft = resolver::auxiliary_index(mesh, u_next, &self.resolver.apply(mesh, &zeta_hat), &zeta_hat, &boxes);
        self.resolver.update_scaling(mesh, &draft.eta_hat, &zeta_hat);
        if self.cfg.probes > 0 {
            diag.probe_ratio = Some(self.resolver.probe_bound(mesh, self.cfg.probes, self.cfg.seed.wrapping_add(k as u64)));
        }
        let r_zeta = self.resolver.apply(mesh, &zeta_hat);
        let aux = resolver::auxiliary_index(mesh, u_next, &r_zeta, &zeta_hat, &boxes);
        diag.upsilon = Some(aux.upsilon);
        let info = match self.resolver.lowrank_update(mesh, &aux.eta_hat, &zeta_hat, &r_zeta) {
            Ok(info) => info,
            Err(Error::Precondition(why)) => {
                warn!("iteration {k}: correction skipped, {why}");
                diag.skipped = Some(why);
                return Ok(());
            }
            Err(e) => return Err(e),
        };
        diag.pairing = Some(info.pairing_eta);
        let after = self.resolver.apply(mesh, &zeta_hat);
        let gap: Vec<Vec<f64>> = after
            .iter()
            .zip(&aux.eta_hat)
            .map(|(a, b)| sub(a, b))
            .collect();
        let scale = resolver::l1(mesh, &aux.eta_hat);
        diag.secant_residual = Some(if scale > 0.0 { resolver::l1(mesh, &gap) / scale } else { 0.0 });
        self.resolver.compute_damping(mesh, &aux.eta_hat, &zeta_hat, &r_zeta)?;
        Ok(())
    }
}

/// Runs `cfg.iterations` iterations. The history holds `u⁰ … u^K`.
pub fn run(
    cfg: RunConfig,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    cells: CoarseMap,
    datasets: &[Dataset],
) -> std::result::Result<Vec<IterationRecord>, RunError> {
    let iterations = cfg.iterations;
    let mut driver = Driver::new(cfg, mesh, partition, cells, datasets)
        .map_err(|source| RunError { history: Vec::new(), source })?;
    for _ in 0..iterations {
        if let Err(source) = driver.step() {
            return Err(RunError { history: driver.into_history(), source });
        }
    }
    Ok(driver.into_history())
}

/// PDE solve stages a run of `iterations` performs.
pub fn expected_solve_count(problem: &ProblemSpec, iterations: usize) -> usize {
    if iterations == 0 {
        return 1;
    }
    if problem.nonlinear_a() {
        6 * iterations - 2
    } else {
        5 * iterations - 1
    }
}
