//! Python bindings: meshes, configs, and the generate / reconstruct /
//! verify workflow, plus an in-memory `simulate`.

use std::path::PathBuf;

use idsm_cli::bundle::{Manifest, Summary};
use idsm_cli::commands;
use idsm_cli::config::{LoadedConfig, Overrides, SchemeName, PRESETS};
use idsm_cli::CliError;
use idsm_core::idsm::IterationRecord;
use idsm_core::mesh::{build_disk_mesh, Mesh};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(idsm, IdsmError, PyException);
create_exception!(idsm, ConfigError, IdsmError);
create_exception!(idsm, MismatchError, IdsmError);
create_exception!(idsm, VerificationError, IdsmError);

fn to_py(e: CliError) -> PyErr {
    let msg = e.to_string();
    match e {
        CliError::Config(_) => ConfigError::new_err(msg),
        CliError::Mismatch(_) => MismatchError::new_err(msg),
        CliError::Verify { .. } => VerificationError::new_err(msg),
        CliError::Run(_) | CliError::Io(_) => IdsmError::new_err(msg),
    }
}

fn core_to_py(e: idsm_core::Error) -> PyErr {
    IdsmError::new_err(e.to_string())
}

/// Triangulation of the unit disk.
#[pyclass(name = "Mesh", frozen)]
struct PyMesh(Mesh);

#[pymethods]
impl PyMesh {
    /// Quasi-uniform mesh with roughly `triangles` elements.
    #[staticmethod]
    fn disk(triangles: usize) -> PyResult<Self> {
        build_disk_mesh(triangles).map(Self).map_err(core_to_py)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Mesh::read(path).map(Self).map_err(core_to_py)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Mesh::from_text(text).map(Self).map_err(core_to_py)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn refine(&self) -> PyResult<Self> {
        self.0.refine_uniform().map(Self).map_err(core_to_py)
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.0.node_count()
    }

    #[getter]
    fn triangle_count(&self) -> usize {
        self.0.triangle_count()
    }

    #[getter]
    fn boundary_count(&self) -> usize {
        self.0.boundary_count()
    }

    fn nodes(&self) -> Vec<(f64, f64)> {
        self.0.nodes().iter().map(|p| (p[0], p[1])).collect()
    }

    fn triangles(&self) -> Vec<(usize, usize, usize)> {
        self.0.triangles().iter().map(|t| (t[0], t[1], t[2])).collect()
    }

    fn boundary_nodes(&self) -> Vec<usize> {
        self.0.boundary_nodes().to_vec()
    }

    fn lumped_masses(&self) -> Vec<f64> {
        self.0.lumped_masses().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(nodes={}, triangles={})", self.0.node_count(), self.0.triangle_count())
    }
}

/// A validated run configuration.
#[pyclass(name = "Config")]
struct PyConfig(LoadedConfig);

#[pymethods]
impl PyConfig {
    /// Reads a TOML file, or a bundled preset when `name` is not a file.
    #[staticmethod]
    fn load(name: &str) -> PyResult<Self> {
        LoadedConfig::load(name).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (text, origin = "<string>"))]
    fn from_toml(text: &str, origin: &str) -> PyResult<Self> {
        LoadedConfig::parse(text, origin).map(Self).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.0.resolved_toml()
    }

    #[getter]
    fn model(&self) -> String {
        format!("{:?}", self.0.config.problem.model).to_lowercase()
    }

    #[getter]
    fn scheme(&self) -> String {
        format!("{:?}", self.0.config.resolver.scheme).to_lowercase()
    }

    #[setter]
    fn set_scheme(&mut self, scheme: &str) -> PyResult<()> {
        let s = match scheme {
            "dfp" => SchemeName::Dfp,
            "bfg" => SchemeName::Bfg,
            other => return Err(ConfigError::new_err(format!("unknown scheme '{other}' (expected dfp or bfg)"))),
        };
        self.0.apply(&Overrides { scheme: Some(s), ..Default::default() }).map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.config.run.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) -> PyResult<()> {
        self.0.apply(&Overrides { seed: Some(seed), ..Default::default() }).map_err(to_py)
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.0.config.run.iterations
    }

    #[setter]
    fn set_iterations(&mut self, k: usize) -> PyResult<()> {
        self.0.apply(&Overrides { max_iter: Some(k), ..Default::default() }).map_err(to_py)
    }

    #[getter]
    fn noise(&self) -> f64 {
        self.0.config.run.noise
    }

    fn __repr__(&self) -> String {
        format!("Config(origin={:?}, model={}, scheme={})", self.0.origin, self.model(), self.scheme())
    }
}

/// One iterate of a reconstruction with its diagnostics.
#[pyclass(name = "IterationRecord", frozen, get_all)]
struct PyRecord {
    k: usize,
    /// Raw parameter fields, one list of nodal values per inclusion type.
    u: Vec<Vec<f64>>,
    #[pyo3(name = "lambda_")]
    lambda: f64,
    damping_factor: f64,
    pde_solves: usize,
    residuals: Vec<f64>,
    pairing: Option<f64>,
    secant_residual: Option<f64>,
    probe_ratio: Option<f64>,
    skipped: Option<String>,
}

impl From<IterationRecord> for PyRecord {
    fn from(r: IterationRecord) -> Self {
        Self {
            k: r.k,
            u: r.u,
            lambda: r.lambda,
            damping_factor: r.damping_factor,
            pde_solves: r.pde_solve_count,
            residuals: r.residuals,
            pairing: r.diagnostics.pairing,
            secant_residual: r.diagnostics.secant_residual,
            probe_ratio: r.diagnostics.probe_ratio,
            skipped: r.diagnostics.skipped,
        }
    }
}

#[pymethods]
impl PyRecord {
    fn __repr__(&self) -> String {
        format!("IterationRecord(k={}, lambda_={}, pde_solves={})", self.k, self.lambda, self.pde_solves)
    }
}

fn manifest_dict<'py>(py: Python<'py>, m: &Manifest) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("model", format!("{:?}", m.model).to_lowercase())?;
    d.set_item("seed", m.seed)?;
    d.set_item("noise", m.noise)?;
    d.set_item("fine_triangles", m.fine_triangles)?;
    d.set_item("coarse_triangles", m.coarse_triangles)?;
    d.set_item("accessible_arcs_deg", m.accessible_arcs_deg.iter().map(|a| (a[0], a[1])).collect::<Vec<_>>())?;
    d.set_item("fluxes", m.fluxes.iter().map(|f| (f.expression.clone(), f.file.clone())).collect::<Vec<_>>())?;
    Ok(d)
}

fn summary_dict<'py>(py: Python<'py>, s: &Summary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("model", format!("{:?}", s.model).to_lowercase())?;
    d.set_item("scheme", format!("{:?}", s.scheme).to_lowercase())?;
    d.set_item("p", s.p)?;
    d.set_item("iterations", s.iterations)?;
    d.set_item("seed", s.seed)?;
    d.set_item("types", s.types.clone())?;
    d.set_item("pde_solves", s.pde_solves)?;
    d.set_item("expected_pde_solves", s.expected_pde_solves)?;
    d.set_item("final_lambda", s.final_lambda)?;
    d.set_item("final_residuals", s.final_residuals.clone())?;
    d.set_item("final_u_inf_norm", s.final_u_inf_norm.clone())?;
    d.set_item("u_files", s.u_files.clone())?;
    Ok(d)
}

/// Names of the bundled presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Writes a data bundle for `config` into `out` and returns its manifest.
#[pyfunction]
fn generate<'py>(py: Python<'py>, config: &PyConfig, out: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.0.clone();
    let m = py.detach(move || commands::generate(&cfg, &out)).map_err(to_py)?;
    manifest_dict(py, &m)
}

/// Reconstructs from the data bundle `data` into `out` and returns the summary.
#[pyfunction]
#[pyo3(signature = (config, data, out, vtk = false))]
fn reconstruct<'py>(py: Python<'py>, config: &PyConfig, data: PathBuf, out: PathBuf, vtk: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.0.clone();
    let s = py.detach(move || commands::reconstruct(&cfg, &data, &out, vtk)).map_err(to_py)?;
    summary_dict(py, &s)
}

/// Re-checks the invariants of a reconstruction bundle; raises
/// `VerificationError` naming the first one that fails.
#[pyfunction]
fn verify(py: Python<'_>, out: PathBuf) -> PyResult<()> {
    py.detach(move || commands::verify(&out)).map_err(to_py)
}

/// Synthesizes data and reconstructs in memory.
#[pyfunction]
fn simulate(py: Python<'_>, config: &PyConfig) -> PyResult<(PyMesh, Vec<PyRecord>)> {
    let cfg = config.0.clone();
    let (mesh, history) = py.detach(move || commands::simulate(&cfg)).map_err(to_py)?;
    Ok((PyMesh(mesh), history.into_iter().map(PyRecord::from).collect()))
}

/// Raw iterate `u^k` stored in a reconstruction bundle.
#[pyfunction]
fn read_iterate(out: PathBuf, k: usize) -> PyResult<Vec<Vec<f64>>> {
    commands::read_iterate(&out, k).map_err(to_py)
}

/// Nodal ground truth stored in a data bundle.
#[pyfunction]
fn read_truth(data: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    commands::read_truth(&data).map_err(to_py)
}

#[pymodule]
fn idsm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("IdsmError", py.get_type::<IdsmError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("MismatchError", py.get_type::<MismatchError>())?;
    m.add("VerificationError", py.get_type::<VerificationError>())?;
    m.add_class::<PyMesh>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(read_iterate, m)?)?;
    m.add_function(wrap_pyfunction!(read_truth, m)?)?;
    Ok(())
}
