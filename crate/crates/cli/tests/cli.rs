use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idsm_cli::bundle::{self, Summary, Table};
use idsm_cli::commands::{read_iterate, read_truth};
use idsm_cli::config::LoadedConfig;
use idsm_core::mesh::{build_disk_mesh, partition_boundary, AngleArc};
use idsm_core::models::{self, DataMesh};
use tempfile::TempDir;

const SMALL: &str = r#"
[problem]
model = "MODEL"

[mesh]
fine_triangles = 1500
coarse_triangles = 200

[boundary]
accessible_arcs_deg = [[-90.0, 90.0]]

[fluxes]
expressions = FLUXES

[hrdtn]
alpha_d = 0.05
alpha_n = 2.0

[resolver]
p = 2.0
scheme = "bfg"
probes = 10

[run]
iterations = 4
noise = NOISE
seed = 7

[[truth.inclusions]]
shape = "disk"
center = [0.35, 0.1]
radius = 0.25
amplitudes = AMPS
"#;

fn small_config(model: &str, noise: f64) -> String {
    let (fluxes, amps) = match model {
        "eit" => (r#"["sin4pi", "cos4pi"]"#, "[-0.9]"),
        "dot" => (r#"["sin4pi", "cos4pi"]"#, "[-0.9, 9.0]"),
        "ce" => (r#"["ce1", "ce2"]"#, "[1.0]"),
        _ => (r#"["x1sq"]"#, "[40.0]"),
    };
    SMALL
        .replace("MODEL", model)
        .replace("FLUXES", fluxes)
        .replace("AMPS", amps)
        .replace("NOISE", &noise.to_string())
}

fn idsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idsm")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    _dir: TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn config(&self, name: &str, text: &str) -> String {
        let p = self.root.join(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).to_string_lossy().into_owned()
    }

    fn generate(&self, cfg: &str, data: &str) {
        let o = idsm(&["generate", "--config", cfg, "--out", &self.path(data)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }

    fn reconstruct(&self, cfg: &str, data: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec!["reconstruct", "--config", cfg, "--data", &self.root.join(data).to_str().unwrap().to_owned()]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        args.extend(["--out".to_string(), self.path(out)]);
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        idsm(&refs)
    }

    fn verify(&self, out: &str) -> Output {
        idsm(&["verify", "--out", &self.path(out)])
    }
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn round_trip_verifies_for_every_model_and_scheme() {
    let ws = Workspace::new();
    for model in ["eit", "dot", "ce", "modulus"] {
        let cfg = ws.config(&format!("{model}.toml"), &small_config(model, 0.1));
        let data = format!("{model}-data");
        ws.generate(&cfg, &data);
        for scheme in ["dfp", "bfg"] {
            let out = format!("{model}-{scheme}");
            let o = ws.reconstruct(&cfg, &data, &out, &["--scheme", scheme]);
            assert!(o.status.success(), "{model} {scheme}: {}", stderr(&o));
            let v = ws.verify(&out);
            assert!(v.status.success(), "{model} {scheme}: {}", stderr(&v));
        }
    }
}

#[test]
fn single_iteration_writes_two_fields() {
    let ws = Workspace::new();
    let cfg = ws.config("eit.toml", &small_config("eit", 0.1));
    ws.generate(&cfg, "data");
    assert!(ws.reconstruct(&cfg, "data", "run", &["--max-iter", "1"]).status.success());
    let u: Vec<String> = files_in(&ws.root.join("run"))
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with("u_") && n.ends_with(".csv"))
        .collect();
    assert_eq!(u, ["u_000.csv", "u_001.csv"]);
    assert!(ws.verify("run").status.success());
}

#[test]
fn linear_run_of_ten_iterations_reports_49_solves() {
    let ws = Workspace::new();
    let cfg = ws.config("dot.toml", &small_config("dot", 0.1));
    ws.generate(&cfg, "data");
    assert!(ws.reconstruct(&cfg, "data", "run", &["--max-iter", "10", "--vtk"]).status.success());
    let s: Summary = bundle::read_toml(&ws.root.join("run").join(bundle::SUMMARY)).unwrap();
    assert_eq!((s.pde_solves, s.expected_pde_solves), (49, 49));
    let vtk = fs::read_to_string(ws.root.join("run/u_010_c.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0") && vtk.contains("SCALARS u_norm double 1"));
}

#[test]
fn verify_names_the_broken_invariant() {
    let ws = Workspace::new();
    let cfg = ws.config("eit.toml", &small_config("eit", 0.1));
    ws.generate(&cfg, "data");
    assert!(ws.reconstruct(&cfg, "data", "run", &[]).status.success());

    let summary = ws.root.join("run").join(bundle::SUMMARY);
    let original = fs::read_to_string(&summary).unwrap();
    fs::write(&summary, original.replace("pde_solves = 19", "pde_solves = 18")).unwrap();
    let o = ws.verify("run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("solve-count audit"), "{}", stderr(&o));
    fs::write(&summary, &original).unwrap();

    let u = ws.root.join("run/u_002.csv");
    let text = fs::read_to_string(&u).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[5] = "4,1,0.5".into();
    fs::write(&u, lines.join("\n") + "\n").unwrap();
    let o = ws.verify("run");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("box constraint"), "{}", stderr(&o));
}

#[test]
fn mismatched_bundle_exits_with_3() {
    let ws = Workspace::new();
    let cfg = ws.config("eit.toml", &small_config("eit", 0.1));
    ws.generate(&cfg, "data");
    let other_mesh = ws.config("mesh.toml", &small_config("eit", 0.1).replace("fine_triangles = 1500", "fine_triangles = 3000"));
    assert_eq!(ws.reconstruct(&other_mesh, "data", "a", &[]).status.code(), Some(3));
    let other_arc = ws.config("arc.toml", &small_config("eit", 0.1).replace("[[-90.0, 90.0]]", "[[0.0, 180.0]]"));
    assert_eq!(ws.reconstruct(&other_arc, "data", "b", &[]).status.code(), Some(3));
    let other_model = ws.config("model.toml", &small_config("dot", 0.1));
    assert_eq!(ws.reconstruct(&other_model, "data", "c", &[]).status.code(), Some(3));
}

#[test]
fn invalid_config_exits_with_2_and_a_line_number() {
    let ws = Workspace::new();
    let text = small_config("eit", 0.1).replace("probes = 10", "probes = 10\ncolour = \"red\"");
    let line = text.lines().position(|l| l.starts_with("colour")).unwrap() + 1;
    let cfg = ws.config("bad.toml", &text);
    let o = idsm(&["generate", "--config", &cfg, "--out", &ws.path("x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&format!("bad.toml:{line}:")), "{}", stderr(&o));

    let text = small_config("eit", 0.1).replace("alpha_n = 2.0", "alpha_n = -2.0");
    let line = text.lines().position(|l| l.starts_with("alpha_n")).unwrap() + 1;
    let cfg = ws.config("neg.toml", &text);
    let o = idsm(&["generate", "--config", &cfg, "--out", &ws.path("y")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("neg.toml:"), "{}", stderr(&o));
    assert!(stderr(&o).contains(&format!(":{}:", line - 1)) || stderr(&o).contains(&format!(":{line}:")), "{}", stderr(&o));

    let o = idsm(&["generate", "--config", "no-such-preset", "--out", &ws.path("z")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn noiseless_data_equal_the_exact_traces() {
    let ws = Workspace::new();
    let text = small_config("eit", 0.0);
    let cfg = ws.config("eit.toml", &text);
    ws.generate(&cfg, "data");
    let loaded = LoadedConfig::parse(&text, "t").unwrap();
    let mesh = build_disk_mesh(1500).unwrap();
    let part = partition_boundary(&mesh, &[AngleArc::new(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)]).unwrap();
    let problem = loaded.problem().unwrap();
    let exprs = loaded.flux_expressions();
    for (i, e) in exprs.iter().enumerate() {
        let exact = models::synthesize_data(&problem, &mesh, &part, &loaded.truth(), e, 0.0, 0, DataMesh::Refined).unwrap().exact;
        let path = ws.root.join(format!("data/data_{}.csv", i + 1));
        let t = Table::read(&path).unwrap();
        let mut row = 0;
        for (pos, &node) in mesh.boundary_nodes().iter().enumerate() {
            if part.node_in_d(pos) {
                assert_eq!(t.rows[row][0], node.to_string());
                assert_eq!(t.number(row, 1, &path).unwrap(), Some(exact[pos]));
                row += 1;
            }
        }
        assert_eq!(row, t.rows.len());
    }
    let truth = read_truth(&ws.root.join("data")).unwrap();
    assert!(truth[0].iter().any(|&v| v == -0.9));
}

#[test]
fn identical_inputs_give_identical_bundles() {
    let ws = Workspace::new();
    let cfg = ws.config("dot.toml", &small_config("dot", 0.15));
    ws.generate(&cfg, "d1");
    ws.generate(&cfg, "d2");
    assert_eq!(files_in(&ws.root.join("d1")), files_in(&ws.root.join("d2")));
    assert!(ws.reconstruct(&cfg, "d1", "r1", &["--vtk"]).status.success());
    assert!(ws.reconstruct(&cfg, "d2", "r2", &["--vtk"]).status.success());
    assert_eq!(files_in(&ws.root.join("r1")), files_in(&ws.root.join("r2")));
    let o = idsm(&["generate", "--config", &cfg, "--out", &ws.path("d3"), "--seed", "8"]);
    assert!(o.status.success());
    assert_ne!(fs::read(ws.root.join("d1/data_1.csv")).unwrap(), fs::read(ws.root.join("d3/data_1.csv")).unwrap());
    let u = read_iterate(&ws.root.join("r1"), 4).unwrap();
    assert_eq!(u.len(), 2);
}

#[test]
fn in_memory_run_matches_the_file_workflow() {
    let ws = Workspace::new();
    let cfg_path = ws.config("dot.toml", &small_config("dot", 0.1));
    ws.generate(&cfg_path, "data");
    let o = ws.reconstruct(&cfg_path, "data", "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = LoadedConfig::load(&cfg_path).unwrap();
    let (mesh, history) = idsm_cli::commands::simulate(&cfg).unwrap();
    assert_eq!(mesh.to_text(), fs::read_to_string(ws.root.join("data").join(bundle::MESH)).unwrap());
    for r in &history {
        assert_eq!(read_iterate(&ws.root.join("out"), r.k).unwrap(), r.u);
    }
}
