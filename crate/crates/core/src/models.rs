//! Problem presets, inclusion geometries and synthetic measurement data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{self, InclusionType, Model, ProblemSpec, Source, TypeKind};
use crate::mesh::{self, BoundaryPartition, Mesh};

/// Problem with the background coefficients and admissible boxes of the
/// standard experiments.
pub fn make_problem(model: Model) -> ProblemSpec {
    let ty = |name: &str, kind, lower, upper, gamma| InclusionType {
        name: name.to_string(),
        kind,
        lower,
        upper,
        gamma,
    };
    match model {
        Model::Eit => ProblemSpec {
            model,
            c0: 1.0,
            p0: 0.0,
            cubic: 0.0,
            types: vec![ty("sigma", TypeKind::Conductivity, -0.99, 0.0, 4.0)],
        },
        Model::Dot => ProblemSpec {
            model,
            c0: 1.0,
            p0: 1.0,
            cubic: 0.0,
            types: vec![
                ty("c", TypeKind::Conductivity, -0.99, 0.0, 4.0),
                ty("p", TypeKind::Potential, 0.0, 19.0, 2.0),
            ],
        },
        Model::Ce => ProblemSpec {
            model,
            c0: 1.0,
            p0: 0.0,
            cubic: 1.0,
            types: vec![ty("u", TypeKind::Reaction, 0.0, 1.0, 3.0)],
        },
        Model::Modulus => ProblemSpec {
            model,
            c0: 1.0,
            p0: 1.0,
            cubic: 0.0,
            types: vec![ty("u", TypeKind::Modulus, 0.0, 60.0, 2.0)],
        },
    }
}

/// Built-in source expressions, by name.
pub fn preset_expression(name: &str) -> Option<&'static str> {
    Some(match name {
        "sin4pi" => "sin(4*pi*x1) + 0.5",
        "cos4pi" => "cos(4*pi*x2) + 0.5",
        "ce1" => "1.1 - x2^2",
        "ce2" => "x2^2",
        "x1sq" => "x1^2",
        _ => return None,
    })
}

/// Evaluates an expression in `x1`, `x2` at the given points. Preset names
/// are accepted in place of expressions.
pub fn eval_expression(expr: &str, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    let text = preset_expression(expr).unwrap_or(expr);
    let parsed: meval::Expr = text
        .parse()
        .map_err(|e| Error::Validation(format!("cannot parse expression `{text}`: {e}")))?;
    let f = parsed
        .bind2("x1", "x2")
        .map_err(|e| Error::Validation(format!("cannot bind expression `{text}`: {e}")))?;
    let vals: Vec<f64> = points.iter().map(|p| f(p[0], p[1])).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("expression `{text}` is not finite on the mesh")));
    }
    Ok(vals)
}

/// Source of the right kind for the model: a volume source for the
/// reaction model, a boundary flux otherwise (mean-corrected for EIT).
pub fn make_source(problem: &ProblemSpec, mesh: &Mesh, expr: &str) -> Result<Source> {
    if problem.model == Model::Ce {
        return Ok(Source::Volume(eval_expression(expr, mesh.nodes())?));
    }
    let pts: Vec<[f64; 2]> = mesh.boundary_nodes().iter().map(|&v| mesh.nodes()[v]).collect();
    let f = eval_expression(expr, &pts)?;
    Ok(Source::Flux(if problem.model == Model::Eit {
        fem::mean_correct(mesh, &f)
    } else {
        f
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64 },
    /// Semi-axes along the rotated x and y directions; `angle` in radians.
    Ellipse { center: [f64; 2], radii: [f64; 2], angle: f64 },
    /// Simple polygon, vertices in either orientation.
    Polygon { vertices: Vec<[f64; 2]> },
}

impl Shape {
    pub fn contains(&self, x: [f64; 2]) -> bool {
        match self {
            Shape::Disk { center, radius } => (x[0] - center[0]).hypot(x[1] - center[1]) <= *radius,
            Shape::Ellipse { center, radii, angle } => {
                let (dx, dy) = (x[0] - center[0], x[1] - center[1]);
                let (c, s) = (angle.cos(), angle.sin());
                let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
                (a / radii[0]).powi(2) + (b / radii[1]).powi(2) <= 1.0
            }
            Shape::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (p, q) = (vertices[i], vertices[(i + n - 1) % n]);
                    if (p[1] > x[1]) != (q[1] > x[1])
                        && x[0] < (q[0] - p[0]) * (x[1] - p[1]) / (q[1] - p[1]) + p[0]
                    {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Whether the closed shape lies strictly inside the unit disk.
    pub fn inside_unit_disk(&self) -> bool {
        match self {
            Shape::Disk { center, radius } => *radius > 0.0 && center[0].hypot(center[1]) + radius < 1.0,
            Shape::Ellipse { center, radii, .. } => {
                radii[0] > 0.0 && radii[1] > 0.0 && center[0].hypot(center[1]) + radii[0].max(radii[1]) < 1.0
            }
            Shape::Polygon { vertices } => vertices.len() >= 3 && vertices.iter().all(|v| v[0].hypot(v[1]) < 1.0),
        }
    }
}

/// An inclusion: a region and its amplitude for every inclusion type.
#[derive(Debug, Clone, PartialEq)]
pub struct InclusionShape {
    pub shape: Shape,
    pub amplitudes: Vec<f64>,
}

/// Nodal parameter fields: `c_i` at nodes inside `ω_i`, zero elsewhere.
/// Shapes may overlap only when they act on different inclusion types.
pub fn rasterize(problem: &ProblemSpec, shapes: &[InclusionShape], mesh: &Mesh) -> Result<Vec<Vec<f64>>> {
    let mut u = problem.zero_parameters(mesh);
    let mut owner: Vec<Vec<Option<usize>>> = vec![vec![None; mesh.node_count()]; problem.type_count()];
    for (s, inc) in shapes.iter().enumerate() {
        if inc.amplitudes.len() != problem.type_count() {
            return Err(Error::Validation(format!(
                "inclusion {s} has {} amplitudes for {} types",
                inc.amplitudes.len(),
                problem.type_count()
            )));
        }
        if !inc.shape.inside_unit_disk() {
            return Err(Error::Validation(format!("inclusion {s} is not compactly inside the disk")));
        }
        for (i, x) in mesh.nodes().iter().enumerate() {
            if !inc.shape.contains(*x) {
                continue;
            }
            for (l, &a) in inc.amplitudes.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                if let Some(other) = owner[l][i] {
                    return Err(Error::Validation(format!(
                        "inclusions {other} and {s} overlap in type '{}'",
                        problem.types[l].name
                    )));
                }
                owner[l][i] = Some(s);
                u[l][i] = a;
            }
        }
    }
    Ok(u)
}

/// How synthetic data are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMesh {
    /// Solve on one uniform refinement of the reconstruction mesh.
    Refined,
    /// Solve on the reconstruction mesh itself.
    Same,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Measured trace on `Γ_D`, zero on `Γ_N` (boundary-loop order).
    pub y_d: Vec<f64>,
    /// Noiseless traces of `y(u*)` and `y(0)` on the whole boundary.
    pub exact: Vec<f64>,
    pub background: Vec<f64>,
}

/// Interpolates a boundary trace of `from` onto the boundary nodes of `to`
/// piecewise linearly in the polar angle.
pub fn transfer_trace(from: &Mesh, trace: &[f64], to: &Mesh) -> Vec<f64> {
    let mut pts: Vec<(f64, f64)> = from
        .boundary_nodes()
        .iter()
        .zip(trace)
        .map(|(&v, &t)| (mesh::polar_angle(from.nodes()[v]), t))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    to.boundary_nodes()
        .iter()
        .map(|&v| {
            let th = mesh::polar_angle(to.nodes()[v]);
            let j = pts.partition_point(|p| p.0 <= th);
            let (lo, hi) = if j == 0 || j == pts.len() {
                let (a, b) = (pts[pts.len() - 1], pts[0]);
                ((a.0 - std::f64::consts::TAU, a.1), b)
            } else {
                (pts[j - 1], pts[j])
            };
            let th = if th < lo.0 { th + std::f64::consts::TAU } else { th };
            let span = hi.0 - lo.0;
            if span <= 0.0 {
                lo.1
            } else {
                let s = (th - lo.0) / span;
                lo.1 + s * (hi.1 - lo.1)
            }
        })
        .collect()
}

/// Generates `y_d = y(u*) + ε δ (y(u*) − y(0))` on `Γ_D` with
/// `δ ~ U(−1, 1)` per boundary node.
pub fn synthesize_data(
    problem: &ProblemSpec,
    mesh: &Mesh,
    partition: &BoundaryPartition,
    truth: &[InclusionShape],
    source_expr: &str,
    eps: f64,
    seed: u64,
    data_mesh: DataMesh,
) -> Result<SyntheticData> {
    if !(eps >= 0.0) {
        return Err(Error::Validation(format!("noise level {eps} must be nonnegative")));
    }
    let refined;
    let gen_mesh = match data_mesh {
        DataMesh::Same => mesh,
        DataMesh::Refined => {
            refined = mesh.refine_uniform()?;
            &refined
        }
    };
    let source = make_source(problem, gen_mesh, source_expr)?;
    let u_star = rasterize(problem, truth, gen_mesh)?;
    let y_star = fem::solve_forward(problem, gen_mesh, &u_star, &source, None)?;
    let y_zero = fem::solve_forward(problem, gen_mesh, &problem.zero_parameters(gen_mesh), &source, None)?;
    let (exact, background) = match data_mesh {
        DataMesh::Same => (fem::full_trace(mesh, &y_star), fem::full_trace(mesh, &y_zero)),
        DataMesh::Refined => (
            transfer_trace(gen_mesh, &fem::full_trace(gen_mesh, &y_star), mesh),
            transfer_trace(gen_mesh, &fem::full_trace(gen_mesh, &y_zero), mesh),
        ),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y_d = (0..mesh.boundary_count())
        .map(|pos| {
            let delta: f64 = rng.random_range(-1.0..1.0);
            if partition.node_in_d(pos) {
                exact[pos] + eps * delta * (exact[pos] - background[pos])
            } else {
                0.0
            }
        })
        .collect();
    Ok(SyntheticData { y_d, exact, background })
}
