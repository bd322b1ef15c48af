use std::fs;
use std::path::Path;

use idsm_core::fem::ProblemSpec;
use idsm_core::idsm::{self, Dataset, IterationRecord};
use idsm_core::mesh::{build_coarse_map, build_disk_mesh, partition_boundary, BoundaryLabel, BoundaryPartition, Mesh};
use idsm_core::models::{make_problem, make_source, rasterize, synthesize_data};
use log::info;

use crate::bundle::{self, FluxRecord, Manifest, Summary, Table};
use crate::config::LoadedConfig;
use crate::CliError;

fn core_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| bundle::io_err(out, e))
}

struct Geometry {
    mesh: Mesh,
    coarse: Mesh,
    partition: BoundaryPartition,
}

fn geometry(cfg: &LoadedConfig) -> Result<Geometry, CliError> {
    let mesh = build_disk_mesh(cfg.config.mesh.fine_triangles).map_err(core_err)?;
    let coarse = build_disk_mesh(cfg.config.mesh.coarse_triangles).map_err(core_err)?;
    let partition = partition_boundary(&mesh, &cfg.arcs()?).map_err(|e| CliError::Config(format!("{}: {e}", cfg.origin)))?;
    Ok(Geometry { mesh, coarse, partition })
}

fn partition_table(p: &BoundaryPartition) -> Table {
    let mut t = Table::new(vec!["edge_index".into(), "label".into()]);
    for (i, l) in p.edge_labels.iter().enumerate() {
        t.rows.push(vec![i.to_string(), if *l == BoundaryLabel::D { "D" } else { "N" }.into()]);
    }
    t
}

fn type_names(problem: &ProblemSpec) -> Vec<String> {
    problem.types.iter().map(|t| t.name.clone()).collect()
}

/// Synthesizes partial Cauchy data for every flux of `cfg` into `out`.
pub fn generate(cfg: &LoadedConfig, out: &Path) -> Result<Manifest, CliError> {
    let g = geometry(cfg)?;
    let problem = cfg.problem()?;
    let truth = cfg.truth();
    let c = &cfg.config;
    create_dir(out)?;
    let mut fluxes = Vec::new();
    for (i, expr) in cfg.flux_expressions().iter().enumerate() {
        info!("synthesizing data for flux {}", i + 1);
        let seed = c.run.seed.wrapping_add(i as u64);
        let data = synthesize_data(&problem, &g.mesh, &g.partition, &truth, expr, c.run.noise, seed, cfg.data_mesh())
            .map_err(core_err)?;
        let mut t = Table::new(vec!["node_index".into(), "y_d".into()]);
        for (pos, &node) in g.mesh.boundary_nodes().iter().enumerate() {
            if g.partition.node_in_d(pos) {
                t.rows.push(vec![node.to_string(), bundle::num(data.y_d[pos])]);
            }
        }
        let file = bundle::data_file(i);
        bundle::write(&out.join(&file), &t.render())?;
        fluxes.push(FluxRecord { expression: expr.clone(), file });
    }
    let u_star = rasterize(&problem, &truth, &g.mesh).map_err(core_err)?;
    let mut t = Table::new(std::iter::once("node_index".to_string()).chain(type_names(&problem)).collect());
    for i in 0..g.mesh.node_count() {
        t.rows.push(std::iter::once(i.to_string()).chain(u_star.iter().map(|f| bundle::num(f[i]))).collect());
    }
    bundle::write(&out.join(bundle::TRUTH), &t.render())?;
    g.mesh.write(out.join(bundle::MESH)).map_err(core_err)?;
    g.coarse.write(out.join(bundle::COARSE)).map_err(core_err)?;
    bundle::write(&out.join(bundle::PARTITION), &partition_table(&g.partition).render())?;
    bundle::write(&out.join(bundle::CONFIG), &cfg.resolved_toml())?;
    let manifest = Manifest {
        model: c.problem.model,
        seed: c.run.seed,
        noise: c.run.noise,
        data_mesh: c.mesh.data_mesh,
        fine_triangles: c.mesh.fine_triangles,
        coarse_triangles: c.mesh.coarse_triangles,
        accessible_arcs_deg: c.boundary.accessible_arcs_deg.clone(),
        fluxes,
    };
    bundle::write_toml(&out.join(bundle::MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Synthesizes the data of `cfg` and runs the reconstruction without
/// touching the filesystem. Returns the reconstruction mesh and the history.
pub fn simulate(cfg: &LoadedConfig) -> Result<(Mesh, Vec<IterationRecord>), CliError> {
    let g = geometry(cfg)?;
    let problem = cfg.problem()?;
    let truth = cfg.truth();
    let c = &cfg.config;
    let datasets = cfg
        .flux_expressions()
        .iter()
        .enumerate()
        .map(|(i, expr)| {
            let seed = c.run.seed.wrapping_add(i as u64);
            let data = synthesize_data(&problem, &g.mesh, &g.partition, &truth, expr, c.run.noise, seed, cfg.data_mesh())
                .map_err(core_err)?;
            Ok(Dataset { source: make_source(&problem, &g.mesh, expr).map_err(core_err)?, y_d: data.y_d })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let cells = build_coarse_map(&g.mesh, &g.coarse).map_err(core_err)?;
    let history = idsm::run(cfg.run_config()?, &g.mesh, &g.partition, cells, &datasets).map_err(core_err)?;
    Ok((g.mesh, history))
}

fn mismatch(what: impl Into<String>) -> CliError {
    CliError::Mismatch(what.into())
}

/// Checks the data bundle against the config and loads its datasets.
fn load_datasets(cfg: &LoadedConfig, problem: &ProblemSpec, g: &Geometry, data: &Path) -> Result<Vec<Dataset>, CliError> {
    let manifest: Manifest = bundle::read_toml(&data.join(bundle::MANIFEST))?;
    if manifest.model != cfg.config.problem.model {
        return Err(mismatch(format!("data were generated for model {:?}, config asks for {:?}", manifest.model, cfg.config.problem.model)));
    }
    if bundle::read(&data.join(bundle::MESH))? != g.mesh.to_text() {
        return Err(mismatch("reconstruction mesh differs from the mesh in the data bundle"));
    }
    if bundle::read(&data.join(bundle::COARSE))? != g.coarse.to_text() {
        return Err(mismatch("coarse mesh differs from the coarse mesh in the data bundle"));
    }
    if bundle::read(&data.join(bundle::PARTITION))? != partition_table(&g.partition).render() {
        return Err(mismatch("boundary partition differs from the partition in the data bundle"));
    }
    let exprs = cfg.flux_expressions();
    let recorded: Vec<&str> = manifest.fluxes.iter().map(|f| f.expression.as_str()).collect();
    if recorded != exprs.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(mismatch(format!("data bundle fluxes {recorded:?} differ from config fluxes {exprs:?}")));
    }
    let mesh = &g.mesh;
    let d_nodes: Vec<usize> = mesh
        .boundary_nodes()
        .iter()
        .enumerate()
        .filter(|(pos, _)| g.partition.node_in_d(*pos))
        .map(|(_, &n)| n)
        .collect();
    manifest
        .fluxes
        .iter()
        .map(|f| {
            let path = data.join(&f.file);
            let t = Table::read(&path)?;
            if t.header != ["node_index", "y_d"] {
                return Err(bundle::io_err(&path, "expected header node_index,y_d"));
            }
            let nodes = t.rows.iter().map(|r| r[0].parse::<usize>().ok()).collect::<Option<Vec<_>>>();
            if nodes.as_deref() != Some(d_nodes.as_slice()) {
                return Err(mismatch(format!("{} does not list the accessible boundary nodes of the mesh", f.file)));
            }
            let mut y_d = vec![0.0; mesh.boundary_count()];
            let mut row = 0;
            for (pos, v) in y_d.iter_mut().enumerate() {
                if g.partition.node_in_d(pos) {
                    *v = t.number(row, 1, &path)?.ok_or_else(|| bundle::io_err(&path, "missing value"))?;
                    row += 1;
                }
            }
            Ok(Dataset { source: make_source(problem, mesh, &f.expression).map_err(core_err)?, y_d })
        })
        .collect()
}

fn trace_table(names: &[String], datasets: usize, history: &[IterationRecord]) -> Table {
    let mut header: Vec<String> = ["k", "lambda", "damping", "rank"].map(String::from).to_vec();
    header.extend(names.iter().map(|n| format!("c_d_{n}")));
    header.extend(["pairing", "upsilon", "secant_residual", "probe_ratio", "dual_norm", "pde_solves"].map(String::from));
    header.extend((1..=datasets).map(|i| format!("residual_{i}")));
    header.push("skipped".into());
    let mut t = Table::new(header);
    for r in history {
        let d = &r.diagnostics;
        let mut row = vec![r.k.to_string(), bundle::num(r.lambda), bundle::num(r.damping_factor), d.rank.to_string()];
        row.extend((0..names.len()).map(|l| bundle::fmt_opt(d.c_d.get(l).copied())));
        row.extend([d.pairing, d.upsilon, d.secant_residual, d.probe_ratio, Some(d.dual_norm)].map(bundle::fmt_opt));
        row.push(r.pde_solve_count.to_string());
        row.extend((0..datasets).map(|i| bundle::fmt_opt(r.residuals.get(i).copied())));
        row.push(d.skipped.as_deref().unwrap_or("").replace([',', '\n'], ";"));
        t.rows.push(row);
    }
    t
}

fn write_history(
    out: &Path,
    mesh: &Mesh,
    names: &[String],
    datasets: usize,
    history: &[IterationRecord],
    vtk: bool,
) -> Result<Vec<String>, CliError> {
    let mut files = Vec::new();
    for r in history {
        let file = bundle::u_file(r.k);
        bundle::write(&out.join(&file), &bundle::u_table(names, &r.u).render())?;
        files.push(file);
        if vtk {
            for (name, u) in names.iter().zip(&r.u) {
                let file = if names.len() == 1 { format!("u_{:03}.vtk", r.k) } else { format!("u_{:03}_{name}.vtk", r.k) };
                let title = format!("normalized {name} at iteration {}", r.k);
                bundle::write(&out.join(file), &bundle::vtk(mesh, &title, &bundle::normalized(u).0))?;
            }
        }
    }
    bundle::write(&out.join(bundle::TRACE), &trace_table(names, datasets, history).render())?;
    Ok(files)
}

/// Runs the reconstruction for `cfg` on the data bundle `data`.
pub fn reconstruct(cfg: &LoadedConfig, data: &Path, out: &Path, vtk: bool) -> Result<Summary, CliError> {
    let g = geometry(cfg)?;
    let problem = cfg.problem()?;
    let datasets = load_datasets(cfg, &problem, &g, data)?;
    let run_cfg = cfg.run_config()?;
    let cells = build_coarse_map(&g.mesh, &g.coarse).map_err(core_err)?;
    create_dir(out)?;
    bundle::write(&out.join(bundle::CONFIG), &cfg.resolved_toml())?;
    let names = type_names(&problem);
    let history = match idsm::run(run_cfg, &g.mesh, &g.partition, cells, &datasets) {
        Ok(h) => h,
        Err(e) => {
            write_history(out, &g.mesh, &names, datasets.len(), &e.history, vtk)?;
            return Err(core_err(e));
        }
    };
    let u_files = write_history(out, &g.mesh, &names, datasets.len(), &history, vtk)?;
    let last = history.last().expect("history holds the initial iterate");
    let c = &cfg.config;
    let summary = Summary {
        model: c.problem.model,
        scheme: c.resolver.scheme,
        p: c.resolver.p,
        iterations: c.run.iterations,
        seed: c.run.seed,
        types: names,
        pde_solves: last.pde_solve_count,
        expected_pde_solves: idsm::expected_solve_count(&problem, c.run.iterations),
        final_lambda: last.lambda,
        final_residuals: last.residuals.clone(),
        final_u_inf_norm: last.u.iter().map(|u| bundle::normalized(u).1).collect(),
        u_files,
    };
    bundle::write_toml(&out.join(bundle::SUMMARY), &summary)?;
    Ok(summary)
}

fn fail(invariant: &'static str, detail: impl Into<String>) -> CliError {
    CliError::Verify { invariant, detail: detail.into() }
}

const SECANT_TOL: f64 = 1e-10;

/// Re-checks the invariants of a finished reconstruction bundle.
pub fn verify(out: &Path) -> Result<(), CliError> {
    let summary: Summary = bundle::read_toml(&out.join(bundle::SUMMARY))?;
    let problem = make_problem(summary.model.into());
    let trace_path = out.join(bundle::TRACE);
    let trace = Table::read(&trace_path)?;
    let col = |name: &str| trace.column(name).ok_or_else(|| bundle::io_err(&trace_path, format!("missing column {name}")));
    let num = |row: usize, c: usize| trace.number(row, c, &trace_path);

    if trace.rows.len() != summary.iterations + 1 || summary.u_files.len() != summary.iterations + 1 {
        return Err(fail("iteration record", format!("expected {} iterates", summary.iterations + 1)));
    }

    let expected = idsm::expected_solve_count(&problem, summary.iterations);
    let solves = col("pde_solves")?;
    let mut prev = 0.0;
    for row in 0..trace.rows.len() {
        let s = num(row, solves)?.unwrap_or(f64::NAN);
        if !(s > prev) {
            return Err(fail("solve-count audit", format!("solve count does not increase at k = {row}")));
        }
        prev = s;
    }
    if summary.pde_solves != expected || summary.expected_pde_solves != expected || prev != expected as f64 {
        return Err(fail(
            "solve-count audit",
            format!("summary reports {} solves, trace {prev}, schedule requires {expected}", summary.pde_solves),
        ));
    }

    let lambda = col("lambda")?;
    for row in 0..trace.rows.len() {
        let l = num(row, lambda)?.unwrap_or(f64::NAN);
        if !(l >= 0.0) {
            return Err(fail("damping nonnegativity", format!("lambda = {l} at k = {row}")));
        }
    }
    let pairing = col("pairing")?;
    let first = (0..trace.rows.len()).find(|&r| !trace.rows[r][pairing].is_empty());
    if let Some(row) = first {
        let l = num(row, lambda)?;
        if l != Some(1.0) {
            return Err(fail("damping calibration", format!("lambda after the first correction is {l:?}, expected exactly 1")));
        }
    }

    for (k, file) in summary.u_files.iter().enumerate() {
        let path = out.join(file);
        let t = Table::read(&path)?;
        for (l, ty) in problem.types.iter().enumerate() {
            let (cn, cr) = (1 + 2 * l, 2 + 2 * l);
            if t.header.get(cr).map(String::as_str) != Some(ty.name.as_str()) {
                return Err(bundle::io_err(&path, format!("missing column {}", ty.name)));
            }
            for row in 0..t.rows.len() {
                let norm = t.number(row, cn, &path)?.unwrap_or(f64::NAN);
                let raw = t.number(row, cr, &path)?.unwrap_or(f64::NAN);
                if !(raw >= ty.lower && raw <= ty.upper && norm.abs() <= 1.0) {
                    return Err(fail(
                        "box constraint",
                        format!("{file} node {row}: {} = {raw} (normalized {norm}) outside [{}, {}] at k = {k}", ty.name, ty.lower, ty.upper),
                    ));
                }
            }
        }
    }

    let (probe, secant) = (col("probe_ratio")?, col("secant_residual")?);
    for row in 0..trace.rows.len() {
        if let Some(r) = num(row, probe)? {
            if !(r <= 1.0) {
                return Err(fail("probe bound", format!("probe ratio {r} exceeds 1 at k = {row}")));
            }
        }
        if let Some(p) = num(row, pairing)? {
            if !(p > 0.0) {
                return Err(fail("dual positivity", format!("pairing {p} at k = {row}")));
            }
        }
        if let Some(s) = num(row, secant)? {
            if !(s <= SECANT_TOL) {
                return Err(fail("secant condition", format!("relative residual {s} at k = {row}")));
            }
        }
    }
    Ok(())
}

/// Nodal ground truth written by `generate`, one field per type.
pub fn read_truth(data: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let path = data.join(bundle::TRUTH);
    let t = Table::read(&path)?;
    (1..t.header.len())
        .map(|c| (0..t.rows.len()).map(|r| Ok(t.number(r, c, &path)?.unwrap_or(0.0))).collect())
        .collect()
}

/// Raw iterate `u^k` from a reconstruction bundle.
pub fn read_iterate(out: &Path, k: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let path = out.join(bundle::u_file(k));
    let t = Table::read(&path)?;
    (0..(t.header.len() - 1) / 2)
        .map(|l| (0..t.rows.len()).map(|r| Ok(t.number(r, 2 + 2 * l, &path)?.unwrap_or(0.0))).collect())
        .collect()
}
