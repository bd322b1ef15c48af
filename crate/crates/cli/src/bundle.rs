//! On-disk formats of the data and reconstruction bundles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use idsm_core::mesh::Mesh;
use serde::{Deserialize, Serialize};

use crate::config::{DataMeshName, ModelName, SchemeName};
use crate::CliError;

pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.toml";
pub const TRACE: &str = "resolver_trace.csv";
pub const MESH: &str = "mesh.txt";
pub const COARSE: &str = "coarse.txt";
pub const PARTITION: &str = "partition.csv";
pub const TRUTH: &str = "truth.csv";
pub const CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxRecord {
    pub expression: String,
    pub file: String,
}

/// Describes a generated data bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelName,
    pub seed: u64,
    pub noise: f64,
    pub data_mesh: DataMeshName,
    pub fine_triangles: usize,
    pub coarse_triangles: usize,
    pub accessible_arcs_deg: Vec<[f64; 2]>,
    pub fluxes: Vec<FluxRecord>,
}

/// Describes a finished reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: ModelName,
    pub scheme: SchemeName,
    pub p: f64,
    pub iterations: usize,
    pub seed: u64,
    pub types: Vec<String>,
    pub pde_solves: usize,
    pub expected_pde_solves: usize,
    pub final_lambda: f64,
    pub final_residuals: Vec<f64>,
    pub final_u_inf_norm: Vec<f64>,
    pub u_files: Vec<String>,
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write(path, &toml::to_string(value).map_err(|e| io_err(path, e))?)
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    toml::from_str(&read(path)?).map_err(|e| io_err(path, e.message()))
}

pub fn u_file(k: usize) -> String {
    format!("u_{k:03}.csv")
}

pub fn data_file(i: usize) -> String {
    format!("data_{}.csv", i + 1)
}

/// Rows of numbers under a header line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| io_err(path, "empty file"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let row: Vec<String> = l.split(',').map(str::to_string).collect();
            if row.len() != header.len() {
                return Err(io_err(path, format!("line {}: expected {} fields, found {}", i + 2, header.len(), row.len())));
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(&read(path)?, path)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Numeric cell; an empty cell is `None`.
    pub fn number(&self, row: usize, col: usize, path: &Path) -> Result<Option<f64>, CliError> {
        let cell = self.rows[row][col].trim();
        if cell.is_empty() {
            return Ok(None);
        }
        cell.parse()
            .map(Some)
            .map_err(|_| io_err(path, format!("line {}: '{cell}' is not a number", row + 2)))
    }
}

/// Shortest round-trip decimal, in exponent form for very small or large
/// magnitudes.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// `u/‖u‖_∞`, or zero when `u` vanishes.
pub fn normalized(u: &[f64]) -> (Vec<f64>, f64) {
    let m = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        (vec![0.0; u.len()], 0.0)
    } else {
        (u.iter().map(|v| v / m).collect(), m)
    }
}

/// Nodal field CSV: `node_index,<name>_norm,<name>` per type.
pub fn u_table(names: &[String], u: &[Vec<f64>]) -> Table {
    let mut header = vec!["node_index".to_string()];
    for n in names {
        header.push(format!("{n}_norm"));
        header.push(n.clone());
    }
    let mut t = Table::new(header);
    let norms: Vec<Vec<f64>> = u.iter().map(|f| normalized(f).0).collect();
    for i in 0..u.first().map_or(0, Vec::len) {
        let mut row = vec![i.to_string()];
        for (f, n) in u.iter().zip(&norms) {
            row.push(num(n[i]));
            row.push(num(f[i]));
        }
        t.rows.push(row);
    }
    t
}

/// Legacy ASCII VTK unstructured grid with point scalars `u_norm`.
pub fn vtk(mesh: &Mesh, title: &str, values: &[f64]) -> String {
    let mut s = String::new();
    let n = mesh.node_count();
    let m = mesh.triangle_count();
    let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
    let _ = writeln!(s, "POINTS {n} double");
    for p in mesh.nodes() {
        let _ = writeln!(s, "{} {} 0", num(p[0]), num(p[1]));
    }
    let _ = writeln!(s, "CELLS {m} {}", 4 * m);
    for t in mesh.triangles() {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(s, "CELL_TYPES {m}");
    for _ in 0..m {
        s.push_str("5\n");
    }
    let _ = writeln!(s, "POINT_DATA {n}\nSCALARS u_norm double 1\nLOOKUP_TABLE default");
    for v in values {
        let _ = writeln!(s, "{}", num(*v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use idsm_core::mesh::build_disk_mesh;

    #[test]
    fn table_round_trip() {
        let names = vec!["c".to_string(), "p".to_string()];
        let t = u_table(&names, &[vec![-0.5, 0.0, -0.25], vec![0.0, 3.0, 1.0]]);
        assert_eq!(t.header, ["node_index", "c_norm", "c", "p_norm", "p"]);
        let back = Table::parse(&t.render(), Path::new("t")).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.number(2, 1, Path::new("t")).unwrap(), Some(-0.5));
        assert_eq!(back.number(1, 3, Path::new("t")).unwrap(), Some(1.0));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(Table::parse("a,b\n1\n", Path::new("t")).is_err());
    }

    #[test]
    fn numbers_round_trip() {
        for v in [0.0, -0.99, 1.0, 3.5e-17, -2.25e-9, 1e300, 0.1 + 0.2] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(4.5e-17), "4.5e-17");
    }

    #[test]
    fn zero_field_normalizes_to_zero() {
        assert_eq!(normalized(&[0.0, 0.0]), (vec![0.0, 0.0], 0.0));
        assert_eq!(normalized(&[2.0, -4.0]).0, vec![0.5, -1.0]);
    }

    #[test]
    fn vtk_sections_have_matching_counts() {
        let mesh = build_disk_mesh(20).unwrap();
        let text = vtk(&mesh, "t", &vec![0.5; mesh.node_count()]);
        assert!(text.contains(&format!("POINTS {} double", mesh.node_count())));
        assert!(text.contains(&format!("CELLS {} {}", mesh.triangle_count(), 4 * mesh.triangle_count())));
        assert!(text.contains("SCALARS u_norm double 1"));
        let data = text.split("LOOKUP_TABLE default\n").nth(1).unwrap();
        assert_eq!(data.lines().count(), mesh.node_count());
    }
}
