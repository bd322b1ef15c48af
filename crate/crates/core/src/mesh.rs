//! Triangulations of the unit disk, boundary partitions and the
//! fine-to-coarse element correspondence used by the resolver.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Radial tolerance for nodes that are meant to sit on the unit circle.
pub const CIRCLE_TOL: f64 = 1e-9;

/// Barycentric slack used when locating points in triangles.
const LOCATE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryEdge {
    /// Endpoints in counterclockwise order along the boundary loop.
    pub nodes: [usize; 2],
    /// Polar angle of the arc midpoint, in `[0, 2π)`.
    pub mid_angle: f64,
    /// Chord length.
    pub length: f64,
}

/// A conforming P1 triangulation.
///
/// Boundary edges are stored in loop order, so edge `e` starts at
/// `boundary_nodes()[e]` and ends at `boundary_nodes()[(e + 1) % nb]`.
#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge>,
    areas: Vec<f64>,
    grads: Vec<[[f64; 2]; 3]>,
    lumped: Vec<f64>,
    boundary_nodes: Vec<usize>,
    boundary_pos: Vec<Option<usize>>,
}

impl Mesh {
    /// Builds a mesh from raw connectivity. Triangles must be
    /// counterclockwise with positive area and the boundary edges must form
    /// one closed loop; the loop is reoriented counterclockwise if needed.
    pub fn new(
        nodes: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary: &[[usize; 2]],
    ) -> Result<Self> {
        let n = nodes.len();
        let mut areas = Vec::with_capacity(triangles.len());
        let mut grads = Vec::with_capacity(triangles.len());
        let mut lumped = vec![0.0; n];
        for (t, tri) in triangles.iter().enumerate() {
            if tri.iter().any(|&v| v >= n) {
                return Err(Error::MeshConstruction(format!(
                    "triangle {t} references a node out of range"
                )));
            }
            let [p0, p1, p2] = tri.map(|v| nodes[v]);
            let det = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
            if det <= 0.0 {
                return Err(Error::MeshConstruction(format!(
                    "triangle {t} has nonpositive area {:.3e}",
                    0.5 * det
                )));
            }
            let area = 0.5 * det;
            areas.push(area);
            grads.push([
                [(p1[1] - p2[1]) / det, (p2[0] - p1[0]) / det],
                [(p2[1] - p0[1]) / det, (p0[0] - p2[0]) / det],
                [(p0[1] - p1[1]) / det, (p1[0] - p0[0]) / det],
            ]);
            for &v in tri {
                lumped[v] += area / 3.0;
            }
        }

        let loop_nodes = order_boundary_loop(n, boundary)?;
        let signed: f64 = (0..loop_nodes.len())
            .map(|i| {
                let a = nodes[loop_nodes[i]];
                let b = nodes[loop_nodes[(i + 1) % loop_nodes.len()]];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum();
        let loop_nodes: Vec<usize> = if signed < 0.0 {
            loop_nodes.into_iter().rev().collect()
        } else {
            loop_nodes
        };

        let nb = loop_nodes.len();
        let mut boundary_pos = vec![None; n];
        let mut boundary_edges = Vec::with_capacity(nb);
        for (i, &a) in loop_nodes.iter().enumerate() {
            boundary_pos[a] = Some(i);
            let b = loop_nodes[(i + 1) % nb];
            let (pa, pb) = (nodes[a], nodes[b]);
            let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            boundary_edges.push(BoundaryEdge {
                nodes: [a, b],
                mid_angle: polar_angle(mid),
                length: (pb[0] - pa[0]).hypot(pb[1] - pa[1]),
            });
        }

        Ok(Self {
            nodes,
            triangles,
            boundary_edges,
            areas,
            grads,
            lumped,
            boundary_nodes: loop_nodes,
            boundary_pos,
        })
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge] {
        &self.boundary_edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_areas(&self) -> &[f64] {
        &self.areas
    }

    /// Constant shape-function gradients per triangle, one row per vertex.
    pub fn gradients(&self) -> &[[[f64; 2]; 3]] {
        &self.grads
    }

    /// Vertex-quadrature weights: one third of the area of every incident
    /// triangle. These weights define every domain integral of nodal fields.
    pub fn lumped_masses(&self) -> &[f64] {
        &self.lumped
    }

    /// Boundary nodes in counterclockwise loop order.
    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary_nodes.len()
    }

    /// Position of `node` in the boundary loop, if it is a boundary node.
    pub fn boundary_position(&self, node: usize) -> Option<usize> {
        self.boundary_pos[node]
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary_edges.iter().map(|e| e.length).sum()
    }

    pub fn barycenter(&self, t: usize) -> [f64; 2] {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Longest edge of triangle `t`.
    pub fn diameter(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        let d = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]);
        d(a, b).max(d(b, c)).max(d(c, a))
    }

    /// Whether every boundary node lies on the unit circle.
    pub fn is_unit_disk(&self) -> bool {
        self.boundary_nodes
            .iter()
            .all(|&v| (self.nodes[v][0].hypot(self.nodes[v][1]) - 1.0).abs() <= CIRCLE_TOL)
    }

    /// Splits every triangle into four. Midpoints of boundary edges are
    /// pushed onto the unit circle when the mesh is a disk mesh.
    pub fn refine_uniform(&self) -> Result<Mesh> {
        use std::collections::HashMap;
        let on_circle = self.is_unit_disk();
        let mut nodes = self.nodes.clone();
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let boundary_set: std::collections::HashSet<(usize, usize)> = self
            .boundary_edges
            .iter()
            .map(|e| key(e.nodes[0], e.nodes[1]))
            .collect();
        let mut mid = |a: usize, b: usize, nodes: &mut Vec<[f64; 2]>| -> usize {
            *midpoint.entry(key(a, b)).or_insert_with(|| {
                let (pa, pb) = (nodes[a], nodes[b]);
                let mut m = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
                if on_circle && boundary_set.contains(&key(a, b)) {
                    let r = m[0].hypot(m[1]);
                    m = [m[0] / r, m[1] / r];
                }
                nodes.push(m);
                nodes.len() - 1
            })
        };
        let mut triangles = Vec::with_capacity(4 * self.triangles.len());
        for &[a, b, c] in &self.triangles {
            let ab = mid(a, b, &mut nodes);
            let bc = mid(b, c, &mut nodes);
            let ca = mid(c, a, &mut nodes);
            triangles.push([a, ab, ca]);
            triangles.push([ab, b, bc]);
            triangles.push([ca, bc, c]);
            triangles.push([ab, bc, ca]);
        }
        let mut boundary = Vec::with_capacity(2 * self.boundary_edges.len());
        for e in &self.boundary_edges {
            let m = mid(e.nodes[0], e.nodes[1], &mut nodes);
            boundary.push([e.nodes[0], m]);
            boundary.push([m, e.nodes[1]]);
        }
        Mesh::new(nodes, triangles, &boundary)
    }

    /// Writes the text mesh format with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "NODES {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.16e} {:.16e}", p[0], p[1]);
        }
        let _ = writeln!(s, "TRIANGLES {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "BOUNDARY {}", self.boundary_edges.len());
        for e in &self.boundary_edges {
            let _ = writeln!(s, "{} {}", e.nodes[0], e.nodes[1]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let nodes: Vec<[f64; 2]> = read_block(&mut lines, "NODES")?;
        let triangles: Vec<[usize; 3]> = read_block(&mut lines, "TRIANGLES")?;
        let boundary: Vec<[usize; 2]> = read_block(&mut lines, "BOUNDARY")?;
        Mesh::new(nodes, triangles, &boundary)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Mesh> {
        Mesh::from_text(&std::fs::read_to_string(path)?)
    }

    /// Barycentric coordinates of `p` in triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    fn distance_to_triangle(&self, t: usize, p: [f64; 2]) -> f64 {
        if self.barycentric(t, p).iter().all(|&l| l >= -LOCATE_TOL) {
            return 0.0;
        }
        let [a, b, c] = self.triangles[t].map(|v| self.nodes[v]);
        segment_distance(p, a, b)
            .min(segment_distance(p, b, c))
            .min(segment_distance(p, c, a))
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - s * dx).hypot(p[1] - a[1] - s * dy)
}

/// Polar angle in `[0, 2π)`.
pub fn polar_angle(p: [f64; 2]) -> f64 {
    let a = p[1].atan2(p[0]);
    if a < 0.0 {
        a + TAU
    } else {
        a
    }
}

trait FromFields: Sized {
    fn parse(fields: &[&str]) -> Option<Self>;
}

impl FromFields for [f64; 2] {
    fn parse(f: &[&str]) -> Option<Self> {
        match f {
            [x, y] => Some([x.parse().ok()?, y.parse().ok()?]),
            _ => None,
        }
    }
}

impl FromFields for [usize; 3] {
    fn parse(f: &[&str]) -> Option<Self> {
        match f {
            [a, b, c] => Some([a.parse().ok()?, b.parse().ok()?, c.parse().ok()?]),
            _ => None,
        }
    }
}

impl FromFields for [usize; 2] {
    fn parse(f: &[&str]) -> Option<Self> {
        match f {
            [a, b] => Some([a.parse().ok()?, b.parse().ok()?]),
            _ => None,
        }
    }
}

fn read_block<'a, T: FromFields>(
    lines: &mut impl Iterator<Item = (usize, &'a str)>,
    name: &str,
) -> Result<Vec<T>> {
    let (i, line) = lines.next().ok_or_else(|| Error::Parse {
        line: 0,
        message: format!("missing {name} section"),
    })?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let count = match fields.as_slice() {
        [h, c] if *h == name => c.parse::<usize>().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::Parse {
        line: i + 1,
        message: format!("expected `{name} <count>`"),
    })?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, line) = lines.next().ok_or_else(|| Error::Parse {
            line: 0,
            message: format!("{name} section ended early"),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        out.push(T::parse(&fields).ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("malformed {name} entry"),
        })?);
    }
    Ok(out)
}

/// Chains unordered boundary edges into a single closed loop of nodes.
fn order_boundary_loop(n: usize, edges: &[[usize; 2]]) -> Result<Vec<usize>> {
    if edges.len() < 3 {
        return Err(Error::MeshConstruction("boundary has fewer than 3 edges".into()));
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &[a, b] in edges {
        if a >= n || b >= n || a == b {
            return Err(Error::MeshConstruction(format!("invalid boundary edge ({a}, {b})")));
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    if adj.iter().any(|l| !l.is_empty() && l.len() != 2) {
        return Err(Error::MeshConstruction(
            "boundary edges do not form a simple loop".into(),
        ));
    }
    let start = edges[0][0];
    let mut order = vec![start];
    let (mut prev, mut cur) = (start, edges[0][1]);
    while cur != start {
        order.push(cur);
        let next = if adj[cur][0] == prev { adj[cur][1] } else { adj[cur][0] };
        prev = cur;
        cur = next;
        if order.len() > edges.len() {
            return Err(Error::MeshConstruction("boundary loop does not close".into()));
        }
    }
    if order.len() != edges.len() {
        return Err(Error::MeshConstruction(
            "boundary edges form more than one loop".into(),
        ));
    }
    Ok(order)
}

/// Structured polar triangulation of the unit disk: ring `i` carries
/// `m·i` equally spaced nodes at radius `i/n`, giving `m·n²` triangles.
pub fn build_disk_mesh(target_triangles: usize) -> Result<Mesh> {
    if target_triangles < 4 {
        return Err(Error::MeshConstruction(format!(
            "cannot triangulate the disk with {target_triangles} triangles"
        )));
    }
    let (per_ring, rings) = if target_triangles < 6 {
        (4, 1)
    } else {
        (6, ((target_triangles as f64 / 6.0).sqrt().round() as usize).max(1))
    };

    let mut nodes = vec![[0.0, 0.0]];
    let mut ring_start = vec![0usize];
    for i in 1..=rings {
        ring_start.push(nodes.len());
        let m = per_ring * i;
        let r = i as f64 / rings as f64;
        for j in 0..m {
            let theta = TAU * j as f64 / m as f64;
            nodes.push([r * theta.cos(), r * theta.sin()]);
        }
    }
    // Outer ring radius is exactly 1 up to rounding of cos/sin; normalise.
    for p in nodes[ring_start[rings]..].iter_mut() {
        let r = p[0].hypot(p[1]);
        *p = [p[0] / r, p[1] / r];
    }

    let mut triangles = Vec::with_capacity(per_ring * rings * rings);
    let mut push = |mut t: [usize; 3], nodes: &[[f64; 2]]| {
        let [a, b, c] = t.map(|v| nodes[v]);
        if (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]) < 0.0 {
            t.swap(1, 2);
        }
        triangles.push(t);
    };
    for i in 1..=rings {
        let outer_m = per_ring * i;
        let outer = |j: usize| ring_start[i] + j % outer_m;
        if i == 1 {
            for j in 0..outer_m {
                push([0, outer(j), outer(j + 1)], &nodes);
            }
            continue;
        }
        let inner_m = per_ring * (i - 1);
        let inner = |j: usize| ring_start[i - 1] + j % inner_m;
        let (mut a, mut b) = (0usize, 0usize);
        while a < inner_m || b < outer_m {
            let next_inner = (a + 1) as f64 / inner_m as f64;
            let next_outer = (b + 1) as f64 / outer_m as f64;
            if b < outer_m && (a == inner_m || next_outer <= next_inner) {
                push([inner(a), outer(b), outer(b + 1)], &nodes);
                b += 1;
            } else {
                push([inner(a), outer(b), inner(a + 1)], &nodes);
                a += 1;
            }
        }
    }

    let outer_m = per_ring * rings;
    let boundary: Vec<[usize; 2]> = (0..outer_m)
        .map(|j| [ring_start[rings] + j, ring_start[rings] + (j + 1) % outer_m])
        .collect();
    Mesh::new(nodes, triangles, &boundary)
}

/// Half-open angular interval `[start, end)` in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleArc {
    pub start: f64,
    pub end: f64,
}

impl AngleArc {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, angle: f64) -> bool {
        if self.length() >= TAU {
            return true;
        }
        (angle - self.start).rem_euclid(TAU) < self.length()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryLabel {
    /// Accessible part: measured trace available.
    D,
    /// Inaccessible part.
    N,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPartition {
    pub accessible_arcs: Vec<AngleArc>,
    pub edge_labels: Vec<BoundaryLabel>,
    node_in_d: Vec<bool>,
}

impl BoundaryPartition {
    pub fn label(&self, edge: usize) -> BoundaryLabel {
        self.edge_labels[edge]
    }

    /// Whether the boundary node at loop position `pos` belongs to Γ_D,
    /// i.e. touches at least one D-labeled edge.
    pub fn node_in_d(&self, pos: usize) -> bool {
        self.node_in_d[pos]
    }

    pub fn d_edge_count(&self) -> usize {
        self.edge_labels.iter().filter(|&&l| l == BoundaryLabel::D).count()
    }
}

/// Labels each boundary edge D iff its midpoint angle lies in an arc.
pub fn partition_boundary(mesh: &Mesh, arcs: &[AngleArc]) -> Result<BoundaryPartition> {
    for (i, a) in arcs.iter().enumerate() {
        if !(a.start.is_finite() && a.end.is_finite()) || a.length() <= 0.0 || a.length() > TAU {
            return Err(Error::Validation(format!(
                "arc {i} [{}, {}) is not a sub-interval of one turn",
                a.start, a.end
            )));
        }
    }
    let total: f64 = arcs.iter().map(AngleArc::length).sum();
    if total > TAU + 1e-12 {
        return Err(Error::Validation("accessible arcs overlap".into()));
    }
    for (i, a) in arcs.iter().enumerate() {
        for (j, b) in arcs.iter().enumerate() {
            if i != j && b.contains(a.start) {
                return Err(Error::Validation(format!("arcs {i} and {j} overlap")));
            }
        }
    }

    let edge_labels: Vec<BoundaryLabel> = mesh
        .boundary_edges()
        .iter()
        .map(|e| {
            if arcs.iter().any(|a| a.contains(e.mid_angle)) {
                BoundaryLabel::D
            } else {
                BoundaryLabel::N
            }
        })
        .collect();
    let nb = mesh.boundary_count();
    let node_in_d = (0..nb)
        .map(|pos| {
            edge_labels[pos] == BoundaryLabel::D
                || edge_labels[(pos + nb - 1) % nb] == BoundaryLabel::D
        })
        .collect();
    Ok(BoundaryPartition {
        accessible_arcs: arcs.to_vec(),
        edge_labels,
        node_in_d,
    })
}

/// Assignment of fine triangles to the coarse cells `Q_x`.
#[derive(Debug, Clone)]
pub struct CoarseMap {
    pub coarse_mesh: Option<Mesh>,
    /// Containing coarse cell per fine triangle.
    pub fine_to_coarse: Vec<usize>,
    /// Geometric area of every coarse cell.
    pub coarse_areas: Vec<f64>,
    /// Fine-quadrature measure of every cell: the summed area of the fine
    /// triangles assigned to it. Cell averages divide by this measure.
    pub cell_measures: Vec<f64>,
    /// Smallest nonzero cell measure.
    pub h_min: f64,
}

impl CoarseMap {
    /// Builds a map from an explicit assignment, e.g. a single cell covering
    /// the whole domain.
    pub fn from_assignment(
        fine: &Mesh,
        fine_to_coarse: Vec<usize>,
        coarse_areas: Vec<f64>,
    ) -> Result<Self> {
        if fine_to_coarse.len() != fine.triangle_count() {
            return Err(Error::Validation("assignment length differs from triangle count".into()));
        }
        let mut cell_measures = vec![0.0; coarse_areas.len()];
        for (t, &q) in fine_to_coarse.iter().enumerate() {
            if q >= coarse_areas.len() {
                return Err(Error::Validation(format!("triangle {t} assigned to unknown cell {q}")));
            }
            cell_measures[q] += fine.triangle_areas()[t];
        }
        let h_min = cell_measures
            .iter()
            .copied()
            .filter(|&m| m > 0.0)
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            coarse_mesh: None,
            fine_to_coarse,
            coarse_areas,
            cell_measures,
            h_min,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.coarse_areas.len()
    }
}

/// Locates every fine barycenter in the coarse mesh. Barycenters that fall
/// in the slivers between a curved fine boundary and the coarse polygon go
/// to the nearest coarse triangle.
pub fn build_coarse_map(fine: &Mesh, coarse: &Mesh) -> Result<CoarseMap> {
    let grid = TriangleGrid::new(coarse);
    let mut assignment = Vec::with_capacity(fine.triangle_count());
    for t in 0..fine.triangle_count() {
        let p = fine.barycenter(t);
        let found = grid.candidates(p).iter().copied().find(|&c| {
            coarse.barycentric(c, p).iter().all(|&l| l >= -LOCATE_TOL)
        });
        let cell = match found {
            Some(c) => c,
            None => {
                let (best, dist) = (0..coarse.triangle_count())
                    .map(|c| (c, coarse.distance_to_triangle(c, p)))
                    .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                if best == usize::MAX || dist > coarse.diameter(best) {
                    return Err(Error::CoarseMapping { triangle: t, distance: dist });
                }
                best
            }
        };
        assignment.push(cell);
    }
    let mut map = CoarseMap::from_assignment(fine, assignment, coarse.triangle_areas().to_vec())?;
    map.coarse_mesh = Some(coarse.clone());
    Ok(map)
}

/// Uniform bucket grid over the bounding box of a mesh.
struct TriangleGrid {
    origin: [f64; 2],
    cell: f64,
    dim: usize,
    buckets: Vec<Vec<usize>>,
}

impl TriangleGrid {
    fn new(mesh: &Mesh) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in mesh.nodes() {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let dim = ((mesh.triangle_count() as f64).sqrt().ceil() as usize).max(1);
        let cell = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / dim as f64).max(f64::MIN_POSITIVE);
        let mut buckets = vec![Vec::new(); dim * dim];
        let index = |x: f64, o: f64| (((x - o) / cell).floor().max(0.0) as usize).min(dim - 1);
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let pts = tri.map(|v| mesh.nodes()[v]);
            let (x0, x1) = (
                pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min),
                pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max),
            );
            let (y0, y1) = (
                pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min),
                pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max),
            );
            for i in index(x0, lo[0])..=index(x1, lo[0]) {
                for j in index(y0, lo[1])..=index(y1, lo[1]) {
                    buckets[j * dim + i].push(t);
                }
            }
        }
        Self { origin: lo, cell, dim, buckets }
    }

    fn candidates(&self, p: [f64; 2]) -> &[usize] {
        let f = |x: f64, o: f64| (x - o) / self.cell;
        let (i, j) = (f(p[0], self.origin[0]), f(p[1], self.origin[1]));
        if i < 0.0 || j < 0.0 || i >= self.dim as f64 || j >= self.dim as f64 {
            return &[];
        }
        &self.buckets[j as usize * self.dim + i as usize]
    }
}

/// Distance from `x` to the unit circle for points inside the disk.
pub fn distance_to_boundary(x: [f64; 2]) -> f64 {
    1.0 - x[0].hypot(x[1])
}

/// Arc `[θ_a, θ_b]` spanned by a boundary edge, with `θ_b > θ_a`.
pub fn edge_arc(mesh: &Mesh, edge: &BoundaryEdge) -> (f64, f64) {
    let ta = polar_angle(mesh.nodes()[edge.nodes[0]]);
    let tb = polar_angle(mesh.nodes()[edge.nodes[1]]);
    let mut d = tb - ta;
    if d <= -PI {
        d += TAU;
    } else if d > PI {
        d -= TAU;
    }
    (ta, ta + d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_meshes_hit_target_counts() {
        for target in [15728usize, 1770] {
            let m = build_disk_mesh(target).unwrap();
            let ratio = m.triangle_count() as f64 / target as f64;
            assert!((0.75..=1.25).contains(&ratio), "{target}: {}", m.triangle_count());
            assert!(m.is_unit_disk());
        }
    }

    #[test]
    fn minimal_fan() {
        let m = build_disk_mesh(4).unwrap();
        assert_eq!(m.triangle_count(), 4);
        assert_eq!(m.node_count(), 5);
        assert!((m.total_area() - PI).abs() < 0.5 * PI);
        assert!(build_disk_mesh(3).is_err());
    }

    #[test]
    fn fine_mesh_area_converges_to_pi() {
        let m = build_disk_mesh(15728).unwrap();
        assert!((m.total_area() - PI).abs() < 0.01);
        assert!(m.triangle_areas().iter().all(|&a| a > 0.0));
        let lumped: f64 = m.lumped_masses().iter().sum();
        assert!((lumped - m.total_area()).abs() < 1e-12);
    }

    #[test]
    fn boundary_is_single_ccw_loop() {
        let m = build_disk_mesh(600).unwrap();
        let nb = m.boundary_count();
        for (e, edge) in m.boundary_edges().iter().enumerate() {
            assert_eq!(edge.nodes[1], m.boundary_edges()[(e + 1) % nb].nodes[0]);
        }
        let mut angles: Vec<f64> = m.boundary_edges().iter().map(|e| e.mid_angle).collect();
        let first = angles[0];
        for a in angles.iter_mut() {
            *a = (*a - first).rem_euclid(TAU);
        }
        assert!(angles.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn partition_full_and_empty() {
        let m = build_disk_mesh(600).unwrap();
        let full = partition_boundary(&m, &[AngleArc::new(0.0, TAU)]).unwrap();
        assert!(full.edge_labels.iter().all(|&l| l == BoundaryLabel::D));
        let none = partition_boundary(&m, &[]).unwrap();
        assert!(none.edge_labels.iter().all(|&l| l == BoundaryLabel::N));
    }

    #[test]
    fn right_half_partition_has_length_pi() {
        let m = build_disk_mesh(15728).unwrap();
        let part = partition_boundary(&m, &[AngleArc::new(-PI / 2.0, PI / 2.0)]).unwrap();
        let d_len: f64 = m
            .boundary_edges()
            .iter()
            .zip(&part.edge_labels)
            .filter(|(_, &l)| l == BoundaryLabel::D)
            .map(|(e, _)| e.length)
            .sum();
        let h = m.boundary_edges()[0].length;
        assert!((d_len - PI).abs() <= h, "{d_len}");
        assert_eq!(part, partition_boundary(&m, &[AngleArc::new(-PI / 2.0, PI / 2.0)]).unwrap());
    }

    #[test]
    fn overlapping_arcs_rejected() {
        let m = build_disk_mesh(100).unwrap();
        let arcs = [AngleArc::new(0.0, 2.0), AngleArc::new(1.0, 3.0)];
        assert!(matches!(partition_boundary(&m, &arcs), Err(Error::Validation(_))));
        let wrap = [AngleArc::new(-0.5, 0.5), AngleArc::new(6.0, 6.2)];
        assert!(partition_boundary(&m, &wrap).is_err());
    }

    #[test]
    fn self_map_is_identity() {
        let m = build_disk_mesh(200).unwrap();
        let map = build_coarse_map(&m, &m).unwrap();
        assert!(map.fine_to_coarse.iter().enumerate().all(|(t, &c)| t == c));
        let min_area = m.triangle_areas().iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(map.h_min, min_area);
    }

    #[test]
    fn fan_coarse_map_partitions_fine_triangles() {
        let coarse = build_disk_mesh(4).unwrap();
        let fine = build_disk_mesh(2000).unwrap();
        let map = build_coarse_map(&fine, &coarse).unwrap();
        let mut counts = vec![0usize; coarse.triangle_count()];
        for &c in &map.fine_to_coarse {
            counts[c] += 1;
        }
        assert_eq!(counts.iter().sum::<usize>(), fine.triangle_count());
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn table_mesh_ratio() {
        let fine = build_disk_mesh(15728).unwrap();
        let coarse = build_disk_mesh(1770).unwrap();
        let map = build_coarse_map(&fine, &coarse).unwrap();
        let ratio = fine.triangle_count() as f64 / coarse.triangle_count() as f64;
        assert!((ratio - 15728.0 / 1770.0).abs() < 0.2, "{ratio}");
        assert!(map.cell_measures.iter().all(|&m| m > 0.0));
        assert!(map.h_min > 0.0);
    }

    #[test]
    fn text_roundtrip_is_bit_exact() {
        let m = build_disk_mesh(300).unwrap();
        let back = Mesh::from_text(&m.to_text()).unwrap();
        assert_eq!(m.nodes(), back.nodes());
        assert_eq!(m.triangles(), back.triangles());
        assert_eq!(back.to_text(), m.to_text());
    }

    #[test]
    fn malformed_file_reports_line() {
        let err = Mesh::from_text("NODES 1\n0.0 zz\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn refinement_quadruples_and_stays_on_circle() {
        let m = build_disk_mesh(500).unwrap();
        let r = m.refine_uniform().unwrap();
        assert_eq!(r.triangle_count(), 4 * m.triangle_count());
        assert_eq!(r.boundary_count(), 2 * m.boundary_count());
        assert!(r.is_unit_disk());
        assert!(r.total_area() > m.total_area());
    }
}
