//! Run configuration files and the bundled example presets.

use std::path::Path;

use idsm_core::dtn::HrDtnParams;
use idsm_core::fem::{Model, ProblemSpec};
use idsm_core::idsm::RunConfig;
use idsm_core::mesh::AngleArc;
use idsm_core::models::{self, DataMesh, InclusionShape, Shape};
use idsm_core::resolver::{Scheme, DEFAULT_EPS_BAND};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Presets shipped with the binary, addressable by name with `--config`.
pub const PRESETS: &[(&str, &str)] = &[
    ("ex1", include_str!("../presets/ex1.toml")),
    ("ex2", include_str!("../presets/ex2.toml")),
    ("ex3-p1", include_str!("../presets/ex3-p1.toml")),
    ("ex3-p99", include_str!("../presets/ex3-p99.toml")),
    ("ex4-a1", include_str!("../presets/ex4-a1.toml")),
    ("ex4-a2", include_str!("../presets/ex4-a2.toml")),
    ("ex5", include_str!("../presets/ex5.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelName {
    Eit,
    Dot,
    Ce,
    Modulus,
}

impl From<ModelName> for Model {
    fn from(m: ModelName) -> Self {
        match m {
            ModelName::Eit => Model::Eit,
            ModelName::Dot => Model::Dot,
            ModelName::Ce => Model::Ce,
            ModelName::Modulus => Model::Modulus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SchemeName {
    Dfp,
    Bfg,
}

impl From<SchemeName> for Scheme {
    fn from(s: SchemeName) -> Self {
        match s {
            SchemeName::Dfp => Scheme::Dfp,
            SchemeName::Bfg => Scheme::Bfg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMeshName {
    #[default]
    Refined,
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub model: ModelName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub fine_triangles: usize,
    pub coarse_triangles: usize,
    /// Mesh used to synthesize data: one uniform refinement, or the
    /// reconstruction mesh itself.
    #[serde(default)]
    pub data_mesh: DataMeshName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySection {
    /// Accessible arcs `[start, end]` in degrees, counter-clockwise.
    pub accessible_arcs_deg: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluxSection {
    /// Preset names (`sin4pi`, `cos4pi`, `ce1`, `ce2`, `x1sq`) or
    /// expressions in `x1`, `x2`.
    pub expressions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HrDtnSection {
    pub alpha_d: f64,
    pub alpha_n: f64,
}

fn default_eps_band() -> f64 {
    DEFAULT_EPS_BAND
}

fn default_probes() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolverSection {
    pub p: f64,
    pub scheme: SchemeName,
    #[serde(default = "default_eps_band")]
    pub eps_band: f64,
    /// Per-type exponents overriding the model defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(default = "default_probes")]
    pub probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub iterations: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase", deny_unknown_fields)]
pub enum InclusionEntry {
    Disk { center: [f64; 2], radius: f64, amplitudes: Vec<f64> },
    Ellipse { center: [f64; 2], radii: [f64; 2], angle_deg: f64, amplitudes: Vec<f64> },
    Polygon { vertices: Vec<[f64; 2]>, amplitudes: Vec<f64> },
}

impl InclusionEntry {
    pub fn to_shape(&self) -> InclusionShape {
        match self {
            Self::Disk { center, radius, amplitudes } => InclusionShape {
                shape: Shape::Disk { center: *center, radius: *radius },
                amplitudes: amplitudes.clone(),
            },
            Self::Ellipse { center, radii, angle_deg, amplitudes } => InclusionShape {
                shape: Shape::Ellipse { center: *center, radii: *radii, angle: angle_deg.to_radians() },
                amplitudes: amplitudes.clone(),
            },
            Self::Polygon { vertices, amplitudes } => InclusionShape {
                shape: Shape::Polygon { vertices: vertices.clone() },
                amplitudes: amplitudes.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    #[serde(default)]
    pub inclusions: Vec<InclusionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemSection,
    pub mesh: MeshSection,
    pub boundary: BoundarySection,
    pub fluxes: FluxSection,
    pub hrdtn: HrDtnSection,
    pub resolver: ResolverSection,
    pub run: RunSection,
    #[serde(default)]
    pub truth: TruthSection,
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scheme: Option<SchemeName>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
}

/// A parsed config together with its source text, for error locations.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: Config,
    pub origin: String,
    text: String,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of `key` inside `[section]` (or `[[section]]`), 1-based.
fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current == section && !key.is_empty() {
            if let Some(rest) = line.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl LoadedConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let config: Config = toml::from_str(text).map_err(|e| {
            let loc = match e.span() {
                Some(span) => {
                    let (l, c) = line_col(text, span.start);
                    format!("{origin}:{l}:{c}")
                }
                None => origin.to_string(),
            };
            CliError::Config(format!("{loc}: {}", e.message().trim()))
        })?;
        let loaded = Self { config, origin: origin.to_string(), text: text.to_string() };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Reads a config file, or a bundled preset when `name` is not a file.
    pub fn load(name: &str) -> Result<Self, CliError> {
        let path = Path::new(name);
        if path.is_file() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            return Self::parse(&text, name);
        }
        match PRESETS.iter().find(|(n, _)| *n == name) {
            Some((n, text)) => Self::parse(text, &format!("preset {n}")),
            None => {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Err(CliError::Config(format!(
                    "{name}: no such config file or preset (presets: {})",
                    names.join(", ")
                )))
            }
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    fn error_at(&self, section: &str, key: &str, message: impl std::fmt::Display) -> CliError {
        let loc = match line_of(&self.text, section, key).or_else(|| line_of(&self.text, section, "")) {
            Some(l) => format!("{}:{l}", self.origin),
            None => self.origin.clone(),
        };
        CliError::Config(format!("{loc}: {message}"))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.scheme {
            self.config.resolver.scheme = s;
        }
        if let Some(s) = o.seed {
            self.config.run.seed = s;
        }
        if let Some(k) = o.max_iter {
            if k == 0 {
                return Err(CliError::Config("--max-iter must be at least 1".into()));
            }
            self.config.run.iterations = k;
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if c.mesh.fine_triangles < 4 || c.mesh.coarse_triangles < 4 {
            return Err(self.error_at("mesh", "fine_triangles", "meshes need at least 4 triangles"));
        }
        self.arcs()?;
        if c.fluxes.expressions.is_empty() {
            return Err(self.error_at("fluxes", "expressions", "at least one flux is required"));
        }
        for e in &c.fluxes.expressions {
            let expr = models::preset_expression(e).unwrap_or(e);
            models::eval_expression(expr, &[[0.0, 0.0]])
                .map_err(|err| self.error_at("fluxes", "expressions", format!("flux '{e}': {err}")))?;
        }
        let params = HrDtnParams { alpha_d: c.hrdtn.alpha_d, alpha_n: c.hrdtn.alpha_n };
        params.validate().map_err(|e| self.error_at("hrdtn", "alpha_d", e))?;
        if !(c.resolver.p >= 1.0) {
            return Err(self.error_at("resolver", "p", format!("p = {} must be at least 1", c.resolver.p)));
        }
        if !(c.resolver.eps_band >= 0.0 && c.resolver.eps_band < 1.0) {
            return Err(self.error_at("resolver", "eps_band", "eps_band must lie in [0, 1)"));
        }
        let problem = self.problem()?;
        if c.run.iterations == 0 {
            return Err(self.error_at("run", "iterations", "at least one iteration is required"));
        }
        if !(c.run.noise >= 0.0) {
            return Err(self.error_at("run", "noise", "noise level must be nonnegative"));
        }
        for (i, inc) in c.truth.inclusions.iter().enumerate() {
            let s = inc.to_shape();
            if s.amplitudes.len() != problem.type_count() {
                return Err(self.error_at(
                    "truth.inclusions",
                    "amplitudes",
                    format!("inclusion {i} has {} amplitudes for {} types", s.amplitudes.len(), problem.type_count()),
                ));
            }
            if !s.shape.inside_unit_disk() {
                return Err(self.error_at("truth.inclusions", "", format!("inclusion {i} is not inside the unit disk")));
            }
        }
        Ok(())
    }

    pub fn arcs(&self) -> Result<Vec<AngleArc>, CliError> {
        self.config
            .boundary
            .accessible_arcs_deg
            .iter()
            .map(|[a, b]| {
                if b > a {
                    Ok(AngleArc::new(a.to_radians(), b.to_radians()))
                } else {
                    Err(self.error_at("boundary", "accessible_arcs_deg", format!("arc [{a}, {b}] must have end > start")))
                }
            })
            .collect()
    }

    pub fn problem(&self) -> Result<ProblemSpec, CliError> {
        let mut p = models::make_problem(self.config.problem.model.into());
        if let Some(g) = &self.config.resolver.gamma {
            if g.len() != p.type_count() {
                return Err(self.error_at(
                    "resolver",
                    "gamma",
                    format!("{} exponents given for {} types", g.len(), p.type_count()),
                ));
            }
            for (t, &v) in p.types.iter_mut().zip(g) {
                t.gamma = v;
            }
        }
        p.validate().map_err(|e| self.error_at("resolver", "gamma", e))?;
        Ok(p)
    }

    pub fn truth(&self) -> Vec<InclusionShape> {
        self.config.truth.inclusions.iter().map(InclusionEntry::to_shape).collect()
    }

    pub fn flux_expressions(&self) -> Vec<String> {
        self.config
            .fluxes
            .expressions
            .iter()
            .map(|e| models::preset_expression(e).unwrap_or(e).to_string())
            .collect()
    }

    pub fn data_mesh(&self) -> DataMesh {
        match self.config.mesh.data_mesh {
            DataMeshName::Refined => DataMesh::Refined,
            DataMeshName::Same => DataMesh::Same,
        }
    }

    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let c = &self.config;
        Ok(RunConfig {
            problem: self.problem()?,
            params: HrDtnParams { alpha_d: c.hrdtn.alpha_d, alpha_n: c.hrdtn.alpha_n },
            p_index: c.resolver.p,
            scheme: c.resolver.scheme.into(),
            iterations: c.run.iterations,
            eps_band: c.resolver.eps_band,
            probes: c.resolver.probes,
            seed: c.run.seed,
        })
    }

    /// The effective config, overrides included, as TOML.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let c = LoadedConfig::load(name).unwrap();
            assert_eq!(c.config.run.iterations, 30, "{name}");
        }
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let mut text = PRESETS[0].1.to_string();
        text = text.replace("alpha_n = 2.0", "alpha_n = 2.0\nbeta = 1.0");
        let line = text.lines().position(|l| l.starts_with("beta")).unwrap() + 1;
        match LoadedConfig::parse(&text, "x.toml") {
            Err(CliError::Config(m)) => assert!(m.starts_with(&format!("x.toml:{line}:")), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_section_is_rejected() {
        let text = PRESETS[0].1.replace("[hrdtn]", "[hrdtn_x]");
        assert!(matches!(LoadedConfig::parse(&text, "x"), Err(CliError::Config(_))));
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let text = PRESETS[0].1.replace("p = 2.0", "p = 0.5");
        let line = text.lines().position(|l| l.starts_with("p = 0.5")).unwrap() + 1;
        match LoadedConfig::parse(&text, "x.toml") {
            Err(CliError::Config(m)) => assert!(m.starts_with(&format!("x.toml:{line}:")), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_replace_fields() {
        let mut c = LoadedConfig::load("ex1").unwrap();
        c.apply(&Overrides { scheme: Some(SchemeName::Dfp), seed: Some(9), max_iter: Some(3) }).unwrap();
        assert_eq!(c.config.resolver.scheme, SchemeName::Dfp);
        assert_eq!((c.config.run.seed, c.config.run.iterations), (9, 3));
        let again = LoadedConfig::parse(&c.resolved_toml(), "r").unwrap();
        assert_eq!(again.config, c.config);
    }
}
