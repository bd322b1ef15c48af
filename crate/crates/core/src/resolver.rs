//! The resolver `R = R⁰ + Σ damped low-rank terms` mapping dual densities
//! to index functions, with its stabilizer, damping and quasi-Newton
//! corrections.
//!
//! Multi-type quantities are `Vec<Vec<f64>>`, one nodal field per type.
//! Duals are densities against the lumped weights; the pairing of a dual
//! with a primal field is `Σ_ℓ Σ_i m_i ζ_ℓi η_ℓi`.

use std::f64::consts::PI;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dtn::HrDtnParams;
use crate::error::{Error, Result};
use crate::fem::{self, InclusionType};
use crate::mesh::{self, BoundaryPartition, CoarseMap, Mesh};

/// Width of the boundary layer where `D` vanishes.
pub const DEFAULT_EPS_BAND: f64 = 0.1;

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Dfp,
    Bfg,
}

/// Multi-type pairing `⟨ζ, η⟩`.
pub fn pair(mesh: &Mesh, zeta: &[Vec<f64>], eta: &[Vec<f64>]) -> f64 {
    zeta.iter().zip(eta).map(|(z, e)| fem::pairing(mesh, z, e)).sum()
}

/// Multi-type `L¹` norm with lumped weights.
pub fn l1(mesh: &Mesh, f: &[Vec<f64>]) -> f64 {
    f.iter().map(|g| fem::l1_norm(mesh, g)).sum()
}

/// Multi-type `L^p` norm: `(Σ_ℓ ‖f_ℓ‖_p^p)^{1/p}`.
pub fn lp(mesh: &Mesh, f: &[Vec<f64>], p: f64) -> f64 {
    let norms: Vec<f64> = f.iter().map(|g| fem::lp_norm(mesh, g, p)).collect();
    let max = norms.iter().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return 0.0;
    }
    max * norms.iter().map(|n| (n / max).powf(p)).sum::<f64>().powf(1.0 / p)
}

fn combine(a: &[Vec<f64>], sa: f64, b: &[Vec<f64>], sb: f64) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| sa * p + sb * q).collect())
        .collect()
}

/// Diagonal weight `D(x)` for one inclusion type.
#[derive(Debug, Clone)]
pub struct DiagonalD {
    /// Profile with `C_D = 1`.
    pub base: Vec<f64>,
    pub c_d: f64,
    pub gamma: f64,
    pub eps_band: f64,
}

impl DiagonalD {
    pub fn value(&self, i: usize) -> f64 {
        self.c_d * self.base[i]
    }

    pub fn values(&self) -> Vec<f64> {
        self.base.iter().map(|b| self.c_d * b).collect()
    }

    pub fn max(&self) -> f64 {
        self.c_d * self.base.iter().fold(0.0f64, |a, &b| a.max(b))
    }
}

/// `‖Φ_x α/(1+α) + |∇Φ_x|/(1+α)‖_{L²(Γ)}` integrated on the exact arcs of
/// the boundary edges.
pub fn boundary_kernel_norm(mesh: &Mesh, edge_alpha: &[f64], x: [f64; 2]) -> f64 {
    let mut sum = 0.0;
    for (e, edge) in mesh.boundary_edges().iter().enumerate() {
        let (ta, tb) = mesh::edge_arc(mesh, edge);
        let (mid, half) = (0.5 * (ta + tb), 0.5 * (tb - ta));
        let a = edge_alpha[e];
        for (s, w) in GAUSS3 {
            let t = mid + half * s;
            let r = (t.cos() - x[0]).hypot(t.sin() - x[1]);
            let phi = -r.ln() / (2.0 * PI);
            let grad = 1.0 / (2.0 * PI * r);
            let g = (phi * a + grad) / (1.0 + a);
            sum += w * half * g * g;
        }
    }
    sum.sqrt()
}

/// Builds `D` with `C_D = 1` for a type with exponent `gamma`.
pub fn build_diag(
    mesh: &Mesh,
    partition: &BoundaryPartition,
    params: &HrDtnParams,
    gamma: f64,
    eps_band: f64,
) -> Result<DiagonalD> {
    if !(eps_band > 0.0 && eps_band < 1.0) {
        return Err(Error::Validation(format!("eps_band {eps_band} must lie in (0, 1)")));
    }
    let alphas = params.edge_alphas(partition);
    let base = mesh
        .nodes()
        .iter()
        .map(|&x| {
            if mesh::distance_to_boundary(x) < eps_band {
                0.0
            } else {
                boundary_kernel_norm(mesh, &alphas, x).powf(-gamma)
            }
        })
        .collect();
    Ok(DiagonalD { base, c_d: 1.0, gamma, eps_band })
}

/// `C ρ`: integral of the P1 interpolant of `ρ` over every coarse cell.
pub fn cell_integrals(mesh: &Mesh, cells: &CoarseMap, rho: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cells.cell_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let s: f64 = tri.iter().map(|&v| rho[v]).sum();
        out[cells.fine_to_coarse[t]] += mesh.triangle_areas()[t] / 3.0 * s;
    }
    out
}

/// `W⁻¹ Cᵀ c`: spreads cell values back to nodes.
fn spread(mesh: &Mesh, cells: &CoarseMap, c: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.node_count()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let v = mesh.triangle_areas()[t] / 3.0 * c[cells.fine_to_coarse[t]];
        for &node in tri {
            out[node] += v;
        }
    }
    out.iter_mut()
        .zip(mesh.lumped_masses())
        .for_each(|(o, m)| *o /= m);
    out
}

/// Stabilizer: coarse-cell averaging with `1/√|Q|` on both sides.
pub fn apply_s(mesh: &Mesh, cells: &CoarseMap, rho: &[f64]) -> Vec<f64> {
    let c: Vec<f64> = cell_integrals(mesh, cells, rho)
        .iter()
        .zip(&cells.cell_measures)
        .map(|(v, q)| if *q > 0.0 { v / q } else { 0.0 })
        .collect();
    spread(mesh, cells, &c)
}

/// `R⁰ρ = √D ⊙ S(√D ⊙ ρ)`.
pub fn apply_r0_single(mesh: &Mesh, cells: &CoarseMap, diag: &DiagonalD, rho: &[f64]) -> Vec<f64> {
    let sq: Vec<f64> = (0..rho.len()).map(|i| diag.value(i).sqrt()).collect();
    let weighted: Vec<f64> = rho.iter().zip(&sq).map(|(r, s)| r * s).collect();
    apply_s(mesh, cells, &weighted)
        .iter()
        .zip(&sq)
        .map(|(v, s)| v * s)
        .collect()
}

/// Rank-one term `coef · damping · ⟨ζ, right⟩ · left`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankTerm {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
    pub coef: f64,
    pub damping: f64,
}

#[derive(Debug, Clone)]
pub struct ResolverState {
    pub diag: Vec<DiagonalD>,
    pub cells: CoarseMap,
    pub terms: Vec<LowRankTerm>,
    /// `λ_{k−1,p}`, applied by the next `stabilize`.
    pub lambda_prev: f64,
    pub c_lambda: Option<f64>,
    pub p_index: f64,
    pub scheme: Scheme,
    /// Terms appended by the most recent correction, not yet projected.
    latest: std::ops::Range<usize>,
}

/// Scalars produced by a low-rank update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    pub pairing_eta: f64,
    pub pairing_r: f64,
}

impl ResolverState {
    pub fn new(diag: Vec<DiagonalD>, cells: CoarseMap, p_index: f64, scheme: Scheme) -> Result<Self> {
        if !(p_index >= 1.0) {
            return Err(Error::Validation(format!("integrability index p = {p_index} must be ≥ 1")));
        }
        Ok(Self {
            diag,
            cells,
            terms: Vec::new(),
            lambda_prev: 0.0,
            c_lambda: None,
            p_index,
            scheme,
            latest: 0..0,
        })
    }

    /// Builds the per-type diagonal parts and an empty low-rank list.
    pub fn build(
        mesh: &Mesh,
        partition: &BoundaryPartition,
        params: &HrDtnParams,
        types: &[InclusionType],
        cells: CoarseMap,
        eps_band: f64,
        p_index: f64,
        scheme: Scheme,
    ) -> Result<Self> {
        let diag = types
            .iter()
            .map(|t| build_diag(mesh, partition, params, t.gamma, eps_band))
            .collect::<Result<Vec<_>>>()?;
        Self::new(diag, cells, p_index, scheme)
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn c_d(&self) -> Vec<f64> {
        self.diag.iter().map(|d| d.c_d).collect()
    }

    pub fn apply_r0(&self, mesh: &Mesh, zeta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        zeta.iter()
            .zip(&self.diag)
            .map(|(z, d)| apply_r0_single(mesh, &self.cells, d, z))
            .collect()
    }

    /// `R ζ = R⁰ζ + Σ_j coef_j damp_j ⟨ζ, right_j⟩ left_j`.
    pub fn apply(&self, mesh: &Mesh, zeta: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = self.apply_r0(mesh, zeta);
        for t in &self.terms {
            let s = t.coef * t.damping * pair(mesh, zeta, &t.right);
            if s == 0.0 {
                continue;
            }
            for (o, l) in out.iter_mut().zip(&t.left) {
                o.iter_mut().zip(l).for_each(|(a, b)| *a += s * b);
            }
        }
        out
    }

    /// Projects the latest correction onto the coarse cells and damps every
    /// low-rank term by `1/(1+λ_{k−1})`.
    pub fn stabilize(&mut self, mesh: &Mesh) {
        for j in self.latest.clone() {
            let t = &mut self.terms[j];
            t.left = t.left.iter().map(|f| apply_s(mesh, &self.cells, f)).collect();
            t.right = t.right.iter().map(|f| apply_s(mesh, &self.cells, f)).collect();
        }
        self.latest = self.terms.len()..self.terms.len();
        let factor = 1.0 / (1.0 + self.lambda_prev);
        for t in &mut self.terms {
            t.damping *= factor;
        }
    }

    /// Appends the DFP or BFG correction enforcing `R ζ̂ = η̂`.
    pub fn lowrank_update(
        &mut self,
        mesh: &Mesh,
        eta_hat: &[Vec<f64>],
        zeta_hat: &[Vec<f64>],
        r_zeta: &[Vec<f64>],
    ) -> Result<UpdateInfo> {
        let a = pair(mesh, zeta_hat, eta_hat);
        let b = pair(mesh, zeta_hat, r_zeta);
        if !(a > 0.0) {
            return Err(Error::Precondition(format!("⟨ζ̂, η̂⟩ = {a:e} is not positive")));
        }
        let start = self.terms.len();
        match self.scheme {
            Scheme::Dfp => {
                if !(b > 0.0) {
                    return Err(Error::Precondition(format!("⟨ζ̂, Rζ̂⟩ = {b:e} is not positive")));
                }
                self.terms.push(LowRankTerm { left: eta_hat.to_vec(), right: eta_hat.to_vec(), coef: 1.0 / a, damping: 1.0 });
                self.terms.push(LowRankTerm { left: r_zeta.to_vec(), right: r_zeta.to_vec(), coef: -1.0 / b, damping: 1.0 });
            }
            Scheme::Bfg => {
                let d = combine(eta_hat, 1.0, r_zeta, -1.0);
                let dz = pair(mesh, zeta_hat, &d);
                self.terms.push(LowRankTerm { left: d.clone(), right: eta_hat.to_vec(), coef: 1.0 / a, damping: 1.0 });
                self.terms.push(LowRankTerm { left: eta_hat.to_vec(), right: d, coef: 1.0 / a, damping: 1.0 });
                self.terms.push(LowRankTerm { left: eta_hat.to_vec(), right: eta_hat.to_vec(), coef: -dz / (a * a), damping: 1.0 });
            }
        }
        self.latest = start..self.terms.len();
        Ok(UpdateInfo { pairing_eta: a, pairing_r: b })
    }

    /// Sets `C_D = ‖η̂‖_{L¹} / ‖D_base ζ̂‖_{L¹}` per type. Types with a
    /// vanishing norm keep their previous constant.
    pub fn update_scaling(&mut self, mesh: &Mesh, eta_hat: &[Vec<f64>], zeta_hat: &[Vec<f64>]) {
        for (l, d) in self.diag.iter_mut().enumerate() {
            let num = fem::l1_norm(mesh, &eta_hat[l]);
            let dz: Vec<f64> = zeta_hat[l].iter().zip(&d.base).map(|(z, b)| z * b).collect();
            let den = fem::l1_norm(mesh, &dz);
            if den > 0.0 && num > 0.0 && (num / den).is_finite() {
                d.c_d = num / den;
            } else {
                warn!("type {l}: scaling update skipped (‖η̂‖ = {num:e}, ‖Dζ̂‖ = {den:e})");
            }
        }
    }

    /// Computes `λ_{k,p}`, calibrating `C_λ` on first use so that the first
    /// value is exactly 1. Stores the result for the next `stabilize`.
    pub fn compute_damping(
        &mut self,
        mesh: &Mesh,
        eta_hat: &[Vec<f64>],
        zeta_hat: &[Vec<f64>],
        r_zeta: &[Vec<f64>],
    ) -> Result<f64> {
        let raw = damping_raw(mesh, self.scheme, self.p_index, eta_hat, zeta_hat, r_zeta)?;
        let lambda = match self.c_lambda {
            Some(c) => c * raw,
            None => {
                if raw > 0.0 && raw.is_finite() {
                    self.c_lambda = Some(1.0 / raw);
                    1.0
                } else {
                    self.c_lambda = Some(1.0);
                    raw
                }
            }
        };
        self.lambda_prev = lambda;
        Ok(lambda)
    }

    /// Right-hand constant of the spectral bound:
    /// `h⁻¹‖D‖_∞ + (C_λ h²)⁻¹`, the second term only once `C_λ` is known.
    pub fn spectral_bound(&self) -> f64 {
        let h = self.cells.h_min;
        let dmax = self.diag.iter().map(DiagonalD::max).fold(0.0f64, f64::max);
        let lowrank = match self.c_lambda {
            Some(c) if !self.terms.is_empty() => 1.0 / (c * h * h),
            _ => 0.0,
        };
        dmax / h + lowrank
    }

    /// Largest ratio `⟨ξ, Rξ⟩ / (bound · ‖ξ‖²_{L¹})` over random probes.
    /// Values ≤ 1 mean the spectral bound holds.
    pub fn probe_bound(&self, mesh: &Mesh, probes: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = self.spectral_bound();
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..probes {
            let xi: Vec<Vec<f64>> = (0..self.diag.len())
                .map(|_| (0..mesh.node_count()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let q = pair(mesh, &xi, &self.apply(mesh, &xi));
            let n = l1(mesh, &xi);
            let ratio = if bound > 0.0 { q / (bound * n * n) } else if q <= 0.0 { 0.0 } else { f64::INFINITY };
            worst = worst.max(ratio);
        }
        worst
    }
}

/// `λ / C_λ` for the given scheme.
pub fn damping_raw(
    mesh: &Mesh,
    scheme: Scheme,
    p: f64,
    eta_hat: &[Vec<f64>],
    zeta_hat: &[Vec<f64>],
    r_zeta: &[Vec<f64>],
) -> Result<f64> {
    let a = pair(mesh, zeta_hat, eta_hat);
    if !(a > 0.0) {
        return Err(Error::Precondition(format!("⟨ζ̂, η̂⟩ = {a:e} is not positive")));
    }
    // |Ω|^{2/p*} with |Ω| = π; p* = ∞ at p = 1.
    let vol = if p == 1.0 { 1.0 } else { PI.powf(2.0 * (p - 1.0) / p) };
    match scheme {
        Scheme::Dfp => {
            let b = pair(mesh, zeta_hat, r_zeta);
            if !(b > 0.0) {
                return Err(Error::Precondition(format!("⟨ζ̂, Rζ̂⟩ = {b:e} is not positive")));
            }
            let (sa, sb) = (1.0 / a.sqrt(), 1.0 / b.sqrt());
            let plus = combine(eta_hat, sa, r_zeta, sb);
            let minus = combine(eta_hat, sa, r_zeta, -sb);
            Ok(vol * lp(mesh, &plus, p) * lp(mesh, &minus, p))
        }
        Scheme::Bfg => {
            let d = combine(eta_hat, 1.0, r_zeta, -1.0);
            let dz = pair(mesh, zeta_hat, &d);
            let arg = combine(&d, 2.0, eta_hat, -dz / a);
            Ok(vol * lp(mesh, eta_hat, p) / a * lp(mesh, &arg, p))
        }
    }
}

/// Result of the auxiliary index construction.
#[derive(Debug, Clone)]
pub struct AuxiliaryIndex {
    pub eta_hat: Vec<Vec<f64>>,
    pub upsilon: f64,
}

/// Splices `R̃ζ̂` into `u` at active bounds and blends towards `u` when
/// needed to keep `⟨ζ̂, η̂⟩` positive.
pub fn auxiliary_index(
    mesh: &Mesh,
    u_next: &[Vec<f64>],
    r_zeta: &[Vec<f64>],
    zeta_hat: &[Vec<f64>],
    boxes: &[(f64, f64)],
) -> AuxiliaryIndex {
    let eta_tilde: Vec<Vec<f64>> = u_next
        .iter()
        .zip(r_zeta)
        .zip(boxes)
        .map(|((u, r), &(lo, hi))| {
            u.iter()
                .zip(r)
                .map(|(&ui, &ri)| {
                    if ui >= hi {
                        hi.max(ri)
                    } else if ui <= lo {
                        lo.min(ri)
                    } else {
                        ui
                    }
                })
                .collect()
        })
        .collect();
    let zu = pair(mesh, zeta_hat, u_next);
    let zr = pair(mesh, zeta_hat, r_zeta);
    let zt = pair(mesh, zeta_hat, &eta_tilde);
    let upsilon = if zu > zr && zr > zt { (zu / (2.0 * (zu - zr))).clamp(0.0, 1.0) } else { 1.0 };
    let eta_hat = combine(&eta_tilde, upsilon, u_next, 1.0 - upsilon);
    AuxiliaryIndex { eta_hat, upsilon }
}

/// Nodal clamp to `[lo, hi]`.
pub fn project(eta: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    eta.iter().map(|v| v.max(lo).min(hi)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_coarse_map, build_disk_mesh, partition_boundary, AngleArc};

    fn single_cell(mesh: &Mesh) -> CoarseMap {
        CoarseMap::from_assignment(mesh, vec![0; mesh.triangle_count()], vec![mesh.total_area()]).unwrap()
    }

    fn unit_diag(mesh: &Mesh) -> DiagonalD {
        DiagonalD { base: vec![1.0; mesh.node_count()], c_d: 1.0, gamma: 2.0, eps_band: 0.1 }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn diag_vanishes_in_band_and_matches_center_formula() {
        let mesh = build_disk_mesh(2000).unwrap();
        let part = partition_boundary(&mesh, &[]).unwrap();
        let alpha = 0.5;
        let d = build_diag(&mesh, &part, &HrDtnParams { alpha_d: alpha, alpha_n: alpha }, 4.0, 0.1).unwrap();
        for (i, x) in mesh.nodes().iter().enumerate() {
            if mesh::distance_to_boundary(*x) < 0.1 {
                assert_eq!(d.base[i], 0.0);
            } else {
                assert!(d.base[i] > 0.0);
            }
        }
        let norm = (2.0 * PI).sqrt() / (2.0 * PI * (1.0 + alpha));
        assert!((d.base[0] - norm.powf(-4.0)).abs() < 1e-10 * d.base[0]);
    }

    #[test]
    fn s_preserves_constants_and_global_average() {
        let mesh = build_disk_mesh(500).unwrap();
        let coarse = build_disk_mesh(60).unwrap();
        let cells = build_coarse_map(&mesh, &coarse).unwrap();
        let s = apply_s(&mesh, &cells, &vec![3.0; mesh.node_count()]);
        assert!(s.iter().all(|v| (v - 3.0).abs() < 1e-12));

        let one = single_cell(&mesh);
        let z = pseudo(mesh.node_count(), 1);
        let r = apply_r0_single(&mesh, &one, &unit_diag(&mesh), &z);
        let avg = fem::pairing(&mesh, &z, &vec![1.0; z.len()]) / mesh.total_area();
        assert!(r.iter().all(|v| (v - avg).abs() < 1e-12));
    }

    #[test]
    fn s_is_bounded_by_inverse_cell_measure() {
        let mesh = build_disk_mesh(800).unwrap();
        let coarse = build_disk_mesh(100).unwrap();
        let cells = build_coarse_map(&mesh, &coarse).unwrap();
        for seed in 0..10 {
            let z = pseudo(mesh.node_count(), seed);
            let s = apply_s(&mesh, &cells, &z);
            let sup = s.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(sup <= fem::l1_norm(&mesh, &z) / cells.h_min);
        }
    }

    #[test]
    fn s_is_idempotent_on_a_single_cell() {
        let mesh = build_disk_mesh(300).unwrap();
        let cells = single_cell(&mesh);
        let z = pseudo(mesh.node_count(), 5);
        let once = apply_s(&mesh, &cells, &z);
        let twice = apply_s(&mesh, &cells, &once);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn state(mesh: &Mesh, scheme: Scheme) -> ResolverState {
        let coarse = build_disk_mesh(40).unwrap();
        let cells = build_coarse_map(mesh, &coarse).unwrap();
        let part = partition_boundary(mesh, &[AngleArc::new(-PI / 2.0, PI / 2.0)]).unwrap();
        let diag = build_diag(mesh, &part, &HrDtnParams { alpha_d: 0.05, alpha_n: 2.0 }, 2.0, 0.1).unwrap();
        ResolverState::new(vec![diag], cells, 2.0, scheme).unwrap()
    }

    #[test]
    fn empty_resolver_is_r0() {
        let mesh = build_disk_mesh(300).unwrap();
        let st = state(&mesh, Scheme::Bfg);
        let z = vec![pseudo(mesh.node_count(), 2)];
        assert_eq!(st.apply(&mesh, &z), st.apply_r0(&mesh, &z));
    }

    #[test]
    fn secant_holds_after_update() {
        let mesh = build_disk_mesh(300).unwrap();
        for scheme in [Scheme::Dfp, Scheme::Bfg] {
            let mut st = state(&mesh, scheme);
            let mut zeta = vec![pseudo(mesh.node_count(), 7)];
            zeta[0].iter_mut().for_each(|v| *v = v.abs());
            let r = st.apply(&mesh, &zeta);
            let eta: Vec<Vec<f64>> = vec![r[0].iter().enumerate().map(|(i, v)| v * (1.0 + 0.3 * ((i % 5) as f64))).collect()];
            st.lowrank_update(&mesh, &eta, &zeta, &r).unwrap();
            let after = st.apply(&mesh, &zeta);
            let diff = combine(&after, 1.0, &eta, -1.0);
            assert!(fem::norm(&diff[0]) <= 1e-10 * fem::norm(&eta[0]), "{scheme:?}");
        }
    }

    #[test]
    fn consistent_secant_gives_zero_damping_and_no_change() {
        let mesh = build_disk_mesh(300).unwrap();
        for scheme in [Scheme::Dfp, Scheme::Bfg] {
            let mut st = state(&mesh, scheme);
            let mut zeta = vec![pseudo(mesh.node_count(), 11)];
            zeta[0].iter_mut().for_each(|v| *v = v.abs());
            let r = st.apply(&mesh, &zeta);
            assert_eq!(damping_raw(&mesh, scheme, 2.0, &r, &zeta, &r).unwrap(), 0.0);
            let before: Vec<_> = (0..20).map(|s| st.apply(&mesh, &[pseudo(mesh.node_count(), 100 + s)])).collect();
            st.lowrank_update(&mesh, &r, &zeta, &r).unwrap();
            for (s, b) in before.iter().enumerate() {
                let a = st.apply(&mesh, &[pseudo(mesh.node_count(), 100 + s as u64)]);
                for (x, y) in a[0].iter().zip(&b[0]) {
                    assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300) + 1e-12 * fem::norm(&b[0]));
                }
            }
        }
    }

    #[test]
    fn stabilize_damps_by_lambda() {
        let mesh = build_disk_mesh(200).unwrap();
        let mut st = state(&mesh, Scheme::Dfp);
        let mut zeta = vec![pseudo(mesh.node_count(), 4)];
        zeta[0].iter_mut().for_each(|v| *v = v.abs());
        let r = st.apply(&mesh, &zeta);
        let eta = vec![r[0].iter().map(|v| 2.0 * v + 0.01).collect()];
        st.lowrank_update(&mesh, &eta, &zeta, &r).unwrap();
        st.lambda_prev = 1.0;
        st.stabilize(&mesh);
        assert!(st.terms.iter().all(|t| t.damping == 0.5));
    }

    #[test]
    fn first_damping_is_exactly_one() {
        let mesh = build_disk_mesh(200).unwrap();
        let mut st = state(&mesh, Scheme::Bfg);
        let mut zeta = vec![pseudo(mesh.node_count(), 9)];
        zeta[0].iter_mut().for_each(|v| *v = v.abs());
        let r = st.apply(&mesh, &zeta);
        let eta = vec![r[0].iter().map(|v| 1.5 * v + 0.2).collect()];
        assert_eq!(st.compute_damping(&mesh, &eta, &zeta, &r).unwrap(), 1.0);
        let again = st.compute_damping(&mesh, &eta, &zeta, &r).unwrap();
        assert!((again - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scaling_is_homogeneous() {
        let mesh = build_disk_mesh(300).unwrap();
        let mut st = state(&mesh, Scheme::Bfg);
        let zeta = vec![pseudo(mesh.node_count(), 1)];
        let dz: Vec<Vec<f64>> = vec![zeta[0].iter().zip(&st.diag[0].base).map(|(z, d)| z * d).collect()];
        st.update_scaling(&mesh, &dz, &zeta);
        assert!((st.diag[0].c_d - 1.0).abs() < 1e-12);
        let doubled = vec![dz[0].iter().map(|v| 2.0 * v).collect()];
        st.update_scaling(&mesh, &doubled, &zeta);
        assert!((st.diag[0].c_d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interior_u_gives_interior_branch() {
        let mesh = build_disk_mesh(100).unwrap();
        let n = mesh.node_count();
        let u = vec![vec![-0.5; n]];
        let r = vec![pseudo(n, 3)];
        let z = vec![pseudo(n, 4)];
        let aux = auxiliary_index(&mesh, &u, &r, &z, &[(-0.99, 0.0)]);
        assert_eq!(aux.eta_hat, u);
        let aux = auxiliary_index(&mesh, &u, &u, &z, &[(-0.99, 0.0)]);
        assert_eq!(aux.eta_hat, u);
    }

    #[test]
    fn projection_clamps() {
        assert_eq!(project(&[-5.0, -0.5, 3.0], -0.99, 0.0), vec![-0.99, -0.5, 0.0]);
    }
}
