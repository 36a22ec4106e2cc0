//! Third-order rephasing response: Liouville pathways, impulsive kernels from
//! the hierarchy, finite-pulse convolution and a phase-cycled
//! non-perturbative reference.
//!
//! Kernel convention: for a diagram with dipole superoperators `V₁, V₂, V₃`
//!
//! ```text
//! R(t₃, t₂, t₁) = i³ (−1)^{n_bra} Tr[μ⁻ G(t₃) V₃ G(t₂) V₂ G(t₁) V₁ ρ₀]
//! ```
//!
//! where `V` are bare left/right dipole multiplications and `G` the hierarchy
//! propagator in the rotating frame. The signal is
//! `S(τ,T,t) = ∫∫∫ R(t−s_c, s_c−s_b, s_b−s_a) E_x(s_a) E_y(s_b) E_z(s_c)`
//! with the fields assigned by the diagram's pulse ordering.
//!
//! The ground state decouples from the bath (Q vanishes on |g⟩), so the
//! factorized initial state with quiescent ADOs is already the correlated
//! equilibrium and any pre-equilibration propagation leaves it unchanged.

use crate::heom::{
    apply_dipole, apply_dipole_adjoint, dipole_target, steps_per_sample, Block, BlockGenerator, Hierarchy, HeomError,
    HierarchyState, OpenSystem, Part, Propagator, Side,
};
use crate::model::Manifold;
use crate::pulses::{interaction_hamiltonian, FieldWeights, PulseSequence, SUPPORT_SIGMAS};
use crate::units::TWO_PI_C;
use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

type C64 = Complex64;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResponseError {
    #[error(transparent)]
    Heom(#[from] HeomError),
    #[error("{class} kernel grid too short on the {axis} axis: need {required} samples, have {available}")]
    Coverage { class: PathwayClass, axis: &'static str, required: usize, available: usize },
    #[error("kernel step {step_fs} fs aliases rotating-frame frequency {frequency_cm1:.1} cm⁻¹ (Nyquist limit {limit_cm1:.1} cm⁻¹)")]
    Nyquist { frequency_cm1: f64, step_fs: f64, limit_cm1: f64 },
    #[error("grid error: {0}")]
    Grid(String),
    #[error("response computation needs ~{required_mb:.0} MB, over the {budget_mb:.0} MB budget")]
    ResourceBudget { required_mb: f64, budget_mb: f64 },
    #[error("field too strong for third-order extraction: amplitude-halving ratio {ratio:.4} deviates from 8 by {deviation:.2}%")]
    FieldTooStrong { ratio: f64, deviation: f64 },
    #[error("{0} is not available for this model")]
    Unavailable(PathwayClass),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathwayClass {
    #[serde(rename = "GSB_R")]
    GsbR,
    #[serde(rename = "GSB_NR")]
    GsbNr,
    #[serde(rename = "SE_R")]
    SeR,
    #[serde(rename = "SE_NR")]
    SeNr,
    #[serde(rename = "ESA_R")]
    EsaR,
    #[serde(rename = "ESA_NR")]
    EsaNr,
    #[serde(rename = "DQC_a")]
    DqcA,
    #[serde(rename = "DQC_b")]
    DqcB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Ground,
    Excited,
}

use Part::{Lowering as L, Raising as R};
use Side::{Bra as B, Ket as K};

impl PathwayClass {
    pub const ALL: [PathwayClass; 8] = [
        PathwayClass::GsbR,
        PathwayClass::GsbNr,
        PathwayClass::SeR,
        PathwayClass::SeNr,
        PathwayClass::EsaR,
        PathwayClass::EsaNr,
        PathwayClass::DqcA,
        PathwayClass::DqcB,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PathwayClass::GsbR => "GSB_R",
            PathwayClass::GsbNr => "GSB_NR",
            PathwayClass::SeR => "SE_R",
            PathwayClass::SeNr => "SE_NR",
            PathwayClass::EsaR => "ESA_R",
            PathwayClass::EsaNr => "ESA_NR",
            PathwayClass::DqcA => "DQC_a",
            PathwayClass::DqcB => "DQC_b",
        }
    }

    pub fn from_label(s: &str) -> Option<PathwayClass> {
        PathwayClass::ALL.into_iter().find(|c| c.label().eq_ignore_ascii_case(s))
    }

    pub fn group(self) -> Group {
        match self {
            PathwayClass::GsbR | PathwayClass::GsbNr => Group::Ground,
            _ => Group::Excited,
        }
    }

    /// Dipole superoperators in time order.
    pub fn sequence(self) -> [(Side, Part); 3] {
        match self {
            PathwayClass::GsbR => [(B, R), (B, L), (K, R)],
            PathwayClass::SeR => [(B, R), (K, R), (B, L)],
            PathwayClass::EsaR => [(B, R), (K, R), (K, R)],
            PathwayClass::GsbNr => [(K, R), (K, L), (K, R)],
            PathwayClass::SeNr => [(K, R), (B, R), (B, L)],
            PathwayClass::EsaNr => [(K, R), (B, R), (K, R)],
            PathwayClass::DqcA => [(K, R), (K, R), (K, L)],
            PathwayClass::DqcB => [(K, R), (K, R), (B, R)],
        }
    }

    fn from_sequence(seq: [(Side, Part); 3]) -> Option<PathwayClass> {
        PathwayClass::ALL.into_iter().find(|c| c.sequence() == seq)
    }

    /// `i³ (−1)^{n_bra}`.
    pub fn prefactor(self) -> C64 {
        let n_bra = self.sequence().iter().filter(|(s, _)| *s == Side::Bra).count();
        let sign = if n_bra % 2 == 0 { 1.0 } else { -1.0 };
        C64::new(0.0, -sign)
    }
}

impl std::fmt::Display for PathwayClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    /// Pulse index 0..3 (wavevector label − 1).
    pub pulse: usize,
    pub conjugate: bool,
    pub side: Side,
    pub part: Part,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayDiagram {
    pub interactions: [Interaction; 3],
    /// (ket, bra) manifolds after each interaction.
    pub intervals: [(Manifold, Manifold); 3],
    pub class: PathwayClass,
}

impl PathwayDiagram {
    /// Pulse index at each time-ordered position.
    pub fn ordering(&self) -> [usize; 3] {
        self.interactions.map(|i| i.pulse)
    }

    pub fn is_nominal(&self) -> bool {
        self.ordering() == [0, 1, 2]
    }
}

fn permutations3() -> [[usize; 3]; 6] {
    [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]]
}

/// Whether an interaction survives the RWA for its field component.
pub fn rwa_allowed(conjugate: bool, side: Side, part: Part) -> bool {
    if conjugate {
        matches!((side, part), (Side::Ket, Part::Lowering) | (Side::Bra, Part::Raising))
    } else {
        matches!((side, part), (Side::Ket, Part::Raising) | (Side::Bra, Part::Lowering))
    }
}

/// All rephasing (−k₁+k₂+k₃) diagrams over the six interaction orderings for
/// a system with `n_manifolds` (2 or 3) excitation manifolds.
pub fn enumerate_pathways(n_manifolds: usize) -> Vec<PathwayDiagram> {
    let ops = [(K, R), (K, L), (B, R), (B, L)];
    let mut out = Vec::new();
    for perm in permutations3() {
        for a in ops {
            for b in ops {
                for c in ops {
                    let seq = [a, b, c];
                    let mut ket = 0i64;
                    let mut bra = 0i64;
                    let mut ok = true;
                    let mut intervals = [(Manifold::Ground, Manifold::Ground); 3];
                    let mut interactions = [Interaction { pulse: 0, conjugate: false, side: K, part: R }; 3];
                    for (pos, &(side, part)) in seq.iter().enumerate() {
                        let conj = perm[pos] == 0;
                        if !rwa_allowed(conj, side, part) {
                            ok = false;
                            break;
                        }
                        let step = if part == Part::Raising { 1 } else { -1 };
                        match side {
                            Side::Ket => ket += step,
                            Side::Bra => bra += step,
                        }
                        if ket < 0 || bra < 0 || ket >= n_manifolds as i64 || bra >= n_manifolds as i64 {
                            ok = false;
                            break;
                        }
                        intervals[pos] = (
                            Manifold::from_index(ket as usize).expect("manifold"),
                            Manifold::from_index(bra as usize).expect("manifold"),
                        );
                        interactions[pos] = Interaction { pulse: perm[pos], conjugate: conj, side, part };
                    }
                    // must end in an emitting one-quantum coherence |m+1⟩⟨m|
                    if !ok || ket != bra + 1 {
                        continue;
                    }
                    if let Some(class) = PathwayClass::from_sequence(seq) {
                        out.push(PathwayDiagram { interactions, intervals, class });
                    }
                }
            }
        }
    }
    out
}

/// Uniform kernel grid starting at zero on all three axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGrid {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseKernel {
    pub class: PathwayClass,
    pub step_fs: f64,
    pub grid: KernelGrid,
    /// `[(i3 · n2 + i2) · n1 + i1]`.
    pub data: Vec<C64>,
}

impl ResponseKernel {
    pub fn zeros(class: PathwayClass, step_fs: f64, grid: KernelGrid) -> Self {
        ResponseKernel { class, step_fs, grid, data: vec![ZERO; grid.n1 * grid.n2 * grid.n3] }
    }

    #[inline]
    pub fn at(&self, i3: usize, i2: usize, i1: usize) -> C64 {
        self.data[(i3 * self.grid.n2 + i2) * self.grid.n1 + i1]
    }

    /// Value at arbitrary integer sample offsets; zero for negative arguments.
    pub fn get(&self, i3: i64, i2: i64, i1: i64) -> C64 {
        if i1 < 0 || i2 < 0 || i3 < 0 {
            return ZERO;
        }
        let (a, b, c) = (i3 as usize, i2 as usize, i1 as usize);
        assert!(a < self.grid.n3 && b < self.grid.n2 && c < self.grid.n1, "kernel index outside grid");
        self.at(a, b, c)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

fn check_nyquist(gen: &BlockGenerator, step_fs: f64) -> Result<(), ResponseError> {
    let limit = PI / step_fs / TWO_PI_C;
    if gen.max_bohr_cm1 >= limit {
        return Err(ResponseError::Nyquist { frequency_cm1: gen.max_bohr_cm1, step_fs, limit_cm1: limit });
    }
    Ok(())
}

fn ground_block_state(h: &Hierarchy) -> Result<HierarchyState, ResponseError> {
    let blk = Block::manifolds(h, Manifold::Ground, Manifold::Ground)?;
    let mut s = HierarchyState::zeros(h, blk, 1);
    s.set(0, 0, 0, 0, C64::new(1.0, 0.0));
    Ok(s)
}

/// Gathers single-member states into one batched state.
fn gather(states: &[HierarchyState], n: usize) -> HierarchyState {
    let first = &states[0];
    let rows = first.rows();
    let mut data = vec![ZERO; rows * n];
    for (k, s) in states.iter().take(n).enumerate() {
        for r in 0..rows {
            data[r * n + k] = s.data[r];
        }
    }
    HierarchyState { block: first.block.clone(), n_ado: first.n_ado, batch: n, data, time_fs: 0.0 }
}

/// Propagates a single state and returns `n` samples spaced by `sample_fs`.
fn sample_trajectory(gen: &BlockGenerator, s0: HierarchyState, dt: f64, sample_fs: f64, n: usize) -> Result<Vec<HierarchyState>, ResponseError> {
    let per = steps_per_sample(sample_fs, dt)?;
    let mut prop = Propagator::new(gen, dt, s0.batch)?;
    let mut s = s0;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            prop.advance(&mut s, per)?;
        }
        out.push(s.clone());
    }
    Ok(out)
}

/// Estimated peak memory of [`impulsive_kernels`] in MB.
pub fn kernel_memory_mb(h: &Hierarchy, requests: &[(PathwayClass, KernelGrid)]) -> f64 {
    let n_ado = h.n_ado() as f64;
    let d = h.dim() as f64;
    let kernels: f64 = requests.iter().map(|(_, g)| (g.n1 * g.n2 * g.n3) as f64).sum();
    let n1 = requests.iter().map(|(_, g)| g.n1).max().unwrap_or(0) as f64;
    let n3: f64 = requests.iter().map(|(_, g)| g.n3 as f64).sum();
    // interval-1 samples, batched interval-2 state with RK4 stages, detection covectors
    let rows = n_ado * d * d;
    (kernels + rows * n1 * 7.0 + rows * n3 * 2.0) * 16.0 / 1048576.0
}

/// Impulsive kernels for the requested classes via nested hierarchy
/// propagation. Interval 1 is shared by classes with the same first
/// interaction and interval 2 by those with the same first two; the final
/// interval is handled by propagating the detection operator backwards once
/// per class (adjoint generator) and contracting with the interval-2 states.
pub fn impulsive_kernels(
    h: &Hierarchy,
    requests: &[(PathwayClass, KernelGrid)],
    step_fs: f64,
    dt_fs: f64,
    memory_budget_mb: f64,
) -> Result<Vec<ResponseKernel>, ResponseError> {
    let need = kernel_memory_mb(h, requests);
    if need > memory_budget_mb {
        return Err(ResponseError::ResourceBudget { required_mb: need, budget_mb: memory_budget_mb });
    }
    let mut kernels: Vec<ResponseKernel> =
        requests.iter().map(|&(c, g)| ResponseKernel::zeros(c, step_fs, g)).collect();
    let rho0 = ground_block_state(h)?;

    let mut op1s: Vec<(Side, Part)> = requests.iter().map(|(c, _)| c.sequence()[0]).collect();
    op1s.dedup();
    op1s.sort_by_key(|&(s, p)| (s as u8, p as u8));
    op1s.dedup();
    for op1 in op1s {
        let idx1: Vec<usize> = (0..requests.len()).filter(|&i| requests[i].0.sequence()[0] == op1).collect();
        let x1 = apply_dipole(h, &rho0, op1.0, op1.1).map_err(|_| ResponseError::Unavailable(requests[idx1[0]].0))?;
        let g1 = BlockGenerator::new(h, x1.block.clone())?;
        check_nyquist(&g1, step_fs)?;
        let n1max = idx1.iter().map(|&i| requests[i].1.n1).max().unwrap_or(0);
        let traj1 = sample_trajectory(&g1, x1, dt_fs, step_fs, n1max)?;

        let mut op2s: Vec<(Side, Part)> = idx1.iter().map(|&i| requests[i].0.sequence()[1]).collect();
        op2s.sort_by_key(|&(s, p)| (s as u8, p as u8));
        op2s.dedup();
        for op2 in op2s {
            let idx2: Vec<usize> = idx1.iter().copied().filter(|&i| requests[i].0.sequence()[1] == op2).collect();
            let n1 = idx2.iter().map(|&i| requests[i].1.n1).max().unwrap_or(0);
            let n2 = idx2.iter().map(|&i| requests[i].1.n2).max().unwrap_or(0);
            let batch1 = gather(&traj1, n1);
            let x2 = apply_dipole(h, &batch1, op2.0, op2.1).map_err(|_| ResponseError::Unavailable(requests[idx2[0]].0))?;
            drop(batch1);
            let block2 = x2.block.clone();
            let g2 = BlockGenerator::new(h, block2.clone())?;
            check_nyquist(&g2, step_fs)?;
            let rows2 = g2.rows();

            // detection covectors for every class of this family, stacked
            let mut offsets = Vec::new();
            let mut total_n3 = 0;
            for &i in &idx2 {
                offsets.push(total_n3);
                total_n3 += requests[i].1.n3;
            }
            let mut det = Array2::<C64>::zeros((total_n3, rows2));
            for (k, &i) in idx2.iter().enumerate() {
                let (class, grid) = requests[i];
                let op3 = class.sequence()[2];
                let block3 = dipole_target(h, &block2, op3.0, op3.1).map_err(|_| ResponseError::Unavailable(class))?;
                let g3 = BlockGenerator::new(h, block3.clone())?;
                check_nyquist(&g3, step_fs)?;
                let g3a = g3.adjoint();
                let mut y = HierarchyState::zeros(h, block3.clone(), 1);
                for r in 0..block3.rows.len() {
                    for c in 0..block3.cols.len() {
                        let w = h.system.raising[(block3.rows.start + r, block3.cols.start + c)];
                        y.set(0, r, c, 0, C64::new(w, 0.0));
                    }
                }
                let ys = sample_trajectory(&g3a, y, dt_fs, step_fs, grid.n3)?;
                for (i3, yk) in ys.iter().enumerate() {
                    let dk = apply_dipole_adjoint(h, yk, &block2, op3.0, op3.1)?;
                    let mut row = det.row_mut(offsets[k] + i3);
                    for (dst, src) in row.iter_mut().zip(&dk.data) {
                        *dst = src.conj();
                    }
                }
            }

            let per = steps_per_sample(step_fs, dt_fs)?;
            let mut prop = Propagator::new(&g2, dt_fs, n1)?;
            let mut x = x2;
            for i2 in 0..n2 {
                if i2 > 0 {
                    prop.advance(&mut x, per)?;
                }
                let xv = ArrayView2::from_shape((rows2, n1), &x.data).expect("state layout");
                let m = det.dot(&xv);
                for (k, &i) in idx2.iter().enumerate() {
                    let grid = requests[i].1;
                    if i2 >= grid.n2 {
                        continue;
                    }
                    let pref = requests[i].0.prefactor();
                    let ker = &mut kernels[i];
                    for i3 in 0..grid.n3 {
                        let src = m.row(offsets[k] + i3);
                        let base = (i3 * grid.n2 + i2) * grid.n1;
                        for i1 in 0..grid.n1 {
                            ker.data[base + i1] = pref * src[i1];
                        }
                    }
                }
            }
        }
    }
    Ok(kernels)
}

/// Single-class convenience wrapper around [`impulsive_kernels`].
pub fn impulsive_kernel(h: &Hierarchy, class: PathwayClass, grid: KernelGrid, step_fs: f64, dt_fs: f64) -> Result<ResponseKernel, ResponseError> {
    Ok(impulsive_kernels(h, &[(class, grid)], step_fs, dt_fs, f64::INFINITY)?.remove(0))
}

/// Phenomenological dephasing rates (fs⁻¹) of coherences between manifolds,
/// indexed `[ket][bra]`.
pub type Dephasing = [[f64; 3]; 3];

/// Closed-system kernel from eigenpairs of each manifold block (rotating
/// frame `frame_cm1`), optionally with exponential dephasing.
pub fn sum_over_states_kernel(
    system: &OpenSystem,
    frame_cm1: f64,
    class: PathwayClass,
    grid: KernelGrid,
    step_fs: f64,
    dephasing: Option<&Dephasing>,
) -> Result<ResponseKernel, ResponseError> {
    let mut eig: Vec<(Vec<f64>, DMatrix<f64>)> = Vec::new();
    for m in Manifold::ALL {
        let r = system.manifold_ranges[m.index()].clone();
        let blk = system.hamiltonian_cm1.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let (mut e, v) = crate::model::sorted_eigh(&blk);
        for x in e.iter_mut() {
            *x = (*x - m.index() as f64 * frame_cm1) * TWO_PI_C;
        }
        eig.push((e, v));
    }
    let ranges = &system.manifold_ranges;
    // μ⁺ between eigenbases: mu_up[m] maps manifold m → m+1
    let mu_up: Vec<DMatrix<f64>> = (0..2)
        .map(|m| {
            let (rl, ru) = (ranges[m].clone(), ranges[m + 1].clone());
            let blk = system.raising.view((ru.start, rl.start), (ru.len(), rl.len())).into_owned();
            eig[m + 1].1.transpose() * blk * &eig[m].1
        })
        .collect();
    let seq = class.sequence();
    let gamma = |k: usize, b: usize| dephasing.map(|d| d[k][b]).unwrap_or(0.0);

    // eigenbasis density matrix with manifold labels
    #[derive(Clone)]
    struct Rho {
        ket: usize,
        bra: usize,
        m: DMatrix<C64>,
    }
    let apply = |r: &Rho, side: Side, part: Part| -> Option<Rho> {
        let up = part == Part::Raising;
        let (cur, other) = if side == Side::Ket { (r.ket, r.bra) } else { (r.bra, r.ket) };
        let new = if up { cur + 1 } else { cur.checked_sub(1)? };
        if new > 2 || ranges[new].is_empty() {
            return None;
        }
        // op maps cur → new in the eigenbasis
        let op: DMatrix<C64> = if up { mu_up[cur].map(|x| C64::new(x, 0.0)) } else { mu_up[new].transpose().map(|x| C64::new(x, 0.0)) };
        let m = match side {
            Side::Ket => &op * &r.m,
            Side::Bra => &r.m * op.transpose(),
        };
        let _ = other;
        Some(match side {
            Side::Ket => Rho { ket: new, bra: r.bra, m },
            Side::Bra => Rho { ket: r.ket, bra: new, m },
        })
    };
    let evolve = |r: &Rho, t: f64| -> Rho {
        let (ek, eb) = (&eig[r.ket].0, &eig[r.bra].0);
        let g = gamma(r.ket, r.bra);
        let m = DMatrix::from_fn(r.m.nrows(), r.m.ncols(), |a, b| r.m[(a, b)] * C64::from_polar((-g * t).exp(), -(ek[a] - eb[b]) * t));
        Rho { ket: r.ket, bra: r.bra, m }
    };

    let ng = ranges[0].len();
    let vg = &eig[0].1;
    let rho0 = DMatrix::from_fn(ng, ng, |a, b| C64::new(vg[(0, a)] * vg[(0, b)], 0.0));
    let r0 = Rho { ket: 0, bra: 0, m: rho0 };
    let r1 = apply(&r0, seq[0].0, seq[0].1).ok_or(ResponseError::Unavailable(class))?;
    let pref = class.prefactor();
    let mut ker = ResponseKernel::zeros(class, step_fs, grid);
    for i1 in 0..grid.n1 {
        let a = evolve(&r1, i1 as f64 * step_fs);
        let b0 = apply(&a, seq[1].0, seq[1].1).ok_or(ResponseError::Unavailable(class))?;
        for i2 in 0..grid.n2 {
            let b = evolve(&b0, i2 as f64 * step_fs);
            let c = apply(&b, seq[2].0, seq[2].1).ok_or(ResponseError::Unavailable(class))?;
            // Tr(μ⁻ ρ) with ρ in (ket = bra + 1): Σ_ab mu_up[bra][a,b] ρ[a,b]
            let mu = &mu_up[c.bra];
            let (ek, eb) = (&eig[c.ket].0, &eig[c.bra].0);
            let g = gamma(c.ket, c.bra);
            for i3 in 0..grid.n3 {
                let t = i3 as f64 * step_fs;
                let mut acc = ZERO;
                for a in 0..c.m.nrows() {
                    for bb in 0..c.m.ncols() {
                        let w = mu[(a, bb)];
                        if w != 0.0 {
                            acc += c.m[(a, bb)] * w * C64::from_polar((-g * t).exp(), -(ek[a] - eb[bb]) * t);
                        }
                    }
                }
                ker.data[(i3 * grid.n2 + i2) * grid.n1 + i1] = pref * acc;
            }
        }
    }
    Ok(ker)
}

/// Uniform time axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start_fs: f64,
    pub step_fs: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(start_fs: f64, step_fs: f64, n: usize) -> Axis {
        Axis { start_fs, step_fs, n }
    }

    /// Axis covering `[start, stop]` inclusive.
    pub fn span(start_fs: f64, stop_fs: f64, step_fs: f64) -> Axis {
        let n = ((stop_fs - start_fs) / step_fs + 1e-9).floor() as usize + 1;
        Axis { start_fs, step_fs, n }
    }

    pub fn value(&self, k: usize) -> f64 {
        self.start_fs + k as f64 * self.step_fs
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.value(k)).collect()
    }

    /// Sample indices on a grid of step `h`.
    pub fn samples(&self, h: f64, name: &str) -> Result<Vec<i64>, ResponseError> {
        let mut out = Vec::with_capacity(self.n);
        for k in 0..self.n {
            let v = self.value(k) / h;
            let r = v.round();
            if (v - r).abs() > 1e-6 {
                return Err(ResponseError::Grid(format!("{name} value {} fs is not a multiple of the kernel step {h} fs", self.value(k))));
            }
            out.push(r as i64);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalGrid {
    pub tau: Axis,
    pub waiting: Axis,
    pub t: Axis,
}

impl SignalGrid {
    pub fn len(&self) -> usize {
        self.tau.n * self.waiting.n * self.t.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalLabel {
    Class(PathwayClass),
    Total,
    Ground,
    Excited,
}

impl SignalLabel {
    pub fn name(&self) -> String {
        match self {
            SignalLabel::Class(c) => c.label().to_string(),
            SignalLabel::Total => "total".into(),
            SignalLabel::Ground => "ground".into(),
            SignalLabel::Excited => "excited".into(),
        }
    }
}

/// Complex signal over (T, τ, t), stored `[iT][iτ][it]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal3 {
    pub label: SignalLabel,
    pub grid: SignalGrid,
    pub frame_cm1: f64,
    pub delta_omega_cm1: f64,
    pub data: Vec<C64>,
}

impl Signal3 {
    pub fn zeros(label: SignalLabel, grid: SignalGrid, frame_cm1: f64, delta_omega_cm1: f64) -> Signal3 {
        Signal3 { label, grid, frame_cm1, delta_omega_cm1, data: vec![ZERO; grid.len()] }
    }

    #[inline]
    pub fn index(&self, iw: usize, itau: usize, it: usize) -> usize {
        (iw * self.grid.tau.n + itau) * self.grid.t.n + it
    }

    pub fn at(&self, iw: usize, itau: usize, it: usize) -> C64 {
        self.data[self.index(iw, itau, it)]
    }

    /// `(τ, t)` slice at waiting-time index `iw`, row-major over τ.
    pub fn slice(&self, iw: usize) -> &[C64] {
        let n = self.grid.tau.n * self.grid.t.n;
        &self.data[iw * n..(iw + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Signal3) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: C64) {
        self.data.iter_mut().for_each(|x| *x *= f);
    }

    /// RMS of `self − other` relative to the RMS of `other`.
    pub fn relative_rms(&self, other: &Signal3) -> f64 {
        let num: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = other.data.iter().map(|b| b.norm_sqr()).sum();
        (num / den).sqrt()
    }

    pub fn rms(&self) -> f64 {
        (self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.data.len().max(1) as f64).sqrt()
    }
}

/// Per-class signals of one pulse sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub grid: SignalGrid,
    pub frame_cm1: f64,
    pub delta_omega_cm1: f64,
    pub classes: BTreeMap<PathwayClass, Signal3>,
}

impl SignalSet {
    fn sum_where(&self, label: SignalLabel, pred: impl Fn(PathwayClass) -> bool) -> Signal3 {
        let mut s = Signal3::zeros(label, self.grid, self.frame_cm1, self.delta_omega_cm1);
        for (c, sig) in &self.classes {
            if pred(*c) {
                s.add_assign(sig);
            }
        }
        s
    }

    pub fn total(&self) -> Signal3 {
        self.sum_where(SignalLabel::Total, |_| true)
    }

    pub fn ground(&self) -> Signal3 {
        self.sum_where(SignalLabel::Ground, |c| c.group() == Group::Ground)
    }

    pub fn excited(&self) -> Signal3 {
        self.sum_where(SignalLabel::Excited, |c| c.group() == Group::Excited)
    }

    pub fn get(&self, label: SignalLabel) -> Signal3 {
        match label {
            SignalLabel::Total => self.total(),
            SignalLabel::Ground => self.ground(),
            SignalLabel::Excited => self.excited(),
            SignalLabel::Class(c) => self
                .classes
                .get(&c)
                .cloned()
                .unwrap_or_else(|| Signal3::zeros(label, self.grid, self.frame_cm1, self.delta_omega_cm1)),
        }
    }
}

/// Half-width in samples of each pulse's quadrature support.
fn half_widths(seq: &PulseSequence, step_fs: f64) -> [i64; 3] {
    seq.pulses.map(|p| (SUPPORT_SIGMAS * p.sigma_fs() / step_fs).ceil() as i64)
}

struct Samples {
    tau: Vec<i64>,
    waiting: Vec<i64>,
    t: Vec<i64>,
}

fn grid_samples(grid: &SignalGrid, h: f64) -> Result<Samples, ResponseError> {
    Ok(Samples { tau: grid.tau.samples(h, "τ")?, waiting: grid.waiting.samples(h, "T")?, t: grid.t.samples(h, "t")? })
}

/// Nominal intervals (D1, D2, D3 − t) of a pulse assignment at delays (τ, T).
fn intervals(order: [usize; 3], tau: i64, waiting: i64) -> (i64, i64, i64) {
    let c = [-(tau + waiting), -waiting, 0];
    (c[order[1]] - c[order[0]], c[order[2]] - c[order[1]], -c[order[2]])
}

/// Kernel extent needed by one diagram on a signal grid; `None` when the
/// diagram cannot contribute anywhere on the grid.
fn diagram_requirement(d: &PathwayDiagram, w: [i64; 3], s: &Samples) -> Option<KernelGrid> {
    let o = d.ordering();
    let (wx, wy, wz) = (w[o[0]], w[o[1]], w[o[2]]);
    let tmax = *s.t.iter().max()?;
    let (mut n1, mut n2, mut n3) = (0i64, 0i64, 0i64);
    let mut any = false;
    for &tw in &s.waiting {
        for &ta in &s.tau {
            let (d1, d2, d3) = intervals(o, ta, tw);
            let (m1, m2, m3) = (d1 + wx + wy, d2 + wy + wz, d3 + tmax + wz);
            if m1 >= 0 && m2 >= 0 && m3 >= 0 {
                any = true;
                n1 = n1.max(m1 + 1);
                n2 = n2.max(m2 + 1);
                n3 = n3.max(m3 + 1);
            }
        }
    }
    any.then_some(KernelGrid { n1: n1 as usize, n2: n2 as usize, n3: n3 as usize })
}

/// Kernel grids per class needed to convolve `seq` (durations only matter)
/// over `grid` with kernel step `step_fs`. Classes that cannot contribute are
/// omitted.
pub fn required_kernel_grids(
    diagrams: &[PathwayDiagram],
    seq: &PulseSequence,
    grid: &SignalGrid,
    step_fs: f64,
) -> Result<BTreeMap<PathwayClass, KernelGrid>, ResponseError> {
    let s = grid_samples(grid, step_fs)?;
    let w = half_widths(seq, step_fs);
    let mut out: BTreeMap<PathwayClass, KernelGrid> = BTreeMap::new();
    for d in diagrams {
        if let Some(g) = diagram_requirement(d, w, &s) {
            let e = out.entry(d.class).or_insert(KernelGrid { n1: 1, n2: 1, n3: 1 });
            e.n1 = e.n1.max(g.n1);
            e.n2 = e.n2.max(g.n2);
            e.n3 = e.n3.max(g.n3);
        }
    }
    Ok(out)
}

#[inline]
fn edge(i: usize) -> f64 {
    if i == 0 {
        0.5
    } else {
        1.0
    }
}

/// Adds the contribution of one diagram to `out` (layout of [`Signal3`]).
fn convolve_diagram(
    ker: &ResponseKernel,
    d: &PathwayDiagram,
    seq: &PulseSequence,
    frame_cm1: f64,
    s: &Samples,
    out: &mut [C64],
) -> Result<(), ResponseError> {
    let h = ker.step_fs;
    let o = d.ordering();
    let fw: Vec<FieldWeights> = (0..3)
        .map(|pos| FieldWeights::new(&seq.pulses[o[pos]], h, frame_cm1, d.interactions[pos].conjugate))
        .collect();
    let (wx, wy, wz) = (fw[0].half_width as i64, fw[1].half_width as i64, fw[2].half_width as i64);
    let w = half_widths(seq, h);
    let Some(req) = diagram_requirement(d, w, s) else { return Ok(()) };
    let g = ker.grid;
    for (axis, need, have) in [("t1", req.n1, g.n1), ("t2", req.n2, g.n2), ("t3", req.n3, g.n3)] {
        if need > have {
            return Err(ResponseError::Coverage { class: d.class, axis, required: need, available: have });
        }
    }
    let (n1, n2, n3) = (g.n1 as i64, g.n2 as i64, g.n3 as i64);
    let tmax = *s.t.iter().max().expect("t grid");

    // active (T, τ) cells and the dense (p, q) ranges they touch
    let mut active = Vec::new();
    let (mut q_lo, mut q_hi, mut p_lo, mut p_hi) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for (iw, &tw) in s.waiting.iter().enumerate() {
        for (ia, &ta) in s.tau.iter().enumerate() {
            let (d1, d2, d3) = intervals(o, ta, tw);
            if d1 + wx + wy >= 0 && d2 + wy + wz >= 0 && d3 + tmax + wz >= 0 {
                active.push((iw, ia, d1, d2, d3));
                q_lo = q_lo.min(d1);
                q_hi = q_hi.max(d1);
                p_lo = p_lo.min(d2 - wz);
                p_hi = p_hi.max(d2 + wz);
            }
        }
    }
    if active.is_empty() {
        return Ok(());
    }
    let nq = (q_hi - q_lo + 1) as usize;
    let np = (p_hi - p_lo + 1) as usize;
    let m_lo = -wx;
    let nm = (n1 + 2 * wx) as usize;

    // stages 1 and 2, independently per t3 sample:
    // R1[i2][m] = Σ_ua w_x(ua) R(i3, i2, m − ua)
    // R2[p][q]  = Σ_ub w_y(ub) R1[p − ub][q + ub]
    let r2: Vec<Vec<C64>> = (0..g.n3)
        .into_par_iter()
        .map(|i3| {
            let e3 = edge(i3);
            let mut r1 = vec![ZERO; g.n2 * nm];
            for i2 in 0..g.n2 {
                let scale = e3 * edge(i2);
                let row = &ker.data[(i3 * g.n2 + i2) * g.n1..(i3 * g.n2 + i2 + 1) * g.n1];
                let dst = &mut r1[i2 * nm..(i2 + 1) * nm];
                for (mi, slot) in dst.iter_mut().enumerate() {
                    let m = mi as i64 + m_lo;
                    let mut acc = ZERO;
                    let lo = (-wx).max(m - n1 + 1);
                    let hi = wx.min(m);
                    for ua in lo..=hi {
                        let i1 = (m - ua) as usize;
                        acc += fw[0].at(ua) * row[i1] * edge(i1);
                    }
                    *slot = acc * scale;
                }
            }
            let mut r2 = vec![ZERO; np * nq];
            for pi in 0..np {
                let p = pi as i64 + p_lo;
                for qi in 0..nq {
                    let q = qi as i64 + q_lo;
                    let mut acc = ZERO;
                    for ub in -wy..=wy {
                        let i2 = p - ub;
                        let m = q + ub;
                        if i2 < 0 || i2 >= n2 || m < m_lo || m >= m_lo + nm as i64 {
                            continue;
                        }
                        acc += fw[1].at(ub) * r1[i2 as usize * nm + (m - m_lo) as usize];
                    }
                    r2[pi * nq + qi] = acc;
                }
            }
            r2
        })
        .collect();

    // stage 3: S = Σ_uc w_z(uc) R2[i3 = D3 + t − uc][p = D2 + uc][q = D1]
    let nt = s.t.len();
    let ntau = s.tau.len();
    let contributions: Vec<(usize, Vec<C64>)> = active
        .par_iter()
        .map(|&(iw, ia, d1, d2, d3)| {
            let mut v = vec![ZERO; nt];
            let qi = (d1 - q_lo) as usize;
            for (it, &t) in s.t.iter().enumerate() {
                let mut acc = ZERO;
                for uc in -wz..=wz {
                    let i3 = d3 + t - uc;
                    if i3 < 0 || i3 >= n3 {
                        continue;
                    }
                    let pi = (d2 + uc - p_lo) as usize;
                    acc += fw[2].at(uc) * r2[i3 as usize][pi * nq + qi];
                }
                v[it] = acc;
            }
            ((iw * ntau + ia) * nt, v)
        })
        .collect();
    for (base, v) in contributions {
        for (k, x) in v.into_iter().enumerate() {
            out[base + k] += x;
        }
    }
    Ok(())
}

/// Finite-pulse signals per class: every diagram of `diagrams` whose class
/// has a kernel contributes with its own field assignment.
pub fn convolve_pulses(
    kernels: &[ResponseKernel],
    diagrams: &[PathwayDiagram],
    seq: &PulseSequence,
    grid: &SignalGrid,
    frame_cm1: f64,
) -> Result<SignalSet, ResponseError> {
    let h = kernels.first().map(|k| k.step_fs).ok_or_else(|| ResponseError::Grid("no kernels".into()))?;
    let s = grid_samples(grid, h)?;
    let mut classes = BTreeMap::new();
    for ker in kernels {
        let mut sig = Signal3::zeros(SignalLabel::Class(ker.class), *grid, frame_cm1, seq.delta_omega_cm1());
        for d in diagrams.iter().filter(|d| d.class == ker.class) {
            convolve_diagram(ker, d, seq, frame_cm1, &s, &mut sig.data)?;
        }
        classes.insert(ker.class, sig);
    }
    Ok(SignalSet { grid: *grid, frame_cm1, delta_omega_cm1: seq.delta_omega_cm1(), classes })
}

/// Phase-cycling counts (N₁, N₂, N₃).
pub type PhaseCycle = [usize; 3];

/// Total rephasing signal from full propagation under the pulse fields,
/// extracting the (−1, +1, +1) phase component over an `N₁×N₂×N₃` cycle.
pub fn nonperturbative_signal(
    h: &Hierarchy,
    seq: &PulseSequence,
    grid: &SignalGrid,
    cycle: PhaseCycle,
    dt_fs: f64,
) -> Result<Signal3, ResponseError> {
    if cycle.iter().any(|&n| n < 2) {
        return Err(ResponseError::Grid(format!("phase cycle counts must be ≥ 2, got {cycle:?}")));
    }
    let frame = h.frame_cm1;
    let tpos = grid.t.samples(grid.t.step_fs, "t")?;
    if tpos.iter().any(|&k| k < 0) || grid.t.start_fs < 0.0 {
        return Err(ResponseError::Grid("detection times must be ≥ 0".into()));
    }
    let per = steps_per_sample(grid.t.step_fs, dt_fs)?;
    let start_steps = steps_per_sample(grid.t.start_fs.max(dt_fs), dt_fs).unwrap_or(0);
    let gen = BlockGenerator::new(h, Block::full(h))?;
    let mut tuples = Vec::new();
    for a in 0..cycle[0] {
        for b in 0..cycle[1] {
            for c in 0..cycle[2] {
                tuples.push([
                    2.0 * PI * a as f64 / cycle[0] as f64,
                    2.0 * PI * b as f64 / cycle[1] as f64,
                    2.0 * PI * c as f64 / cycle[2] as f64,
                ]);
            }
        }
    }
    let nb = tuples.len();
    let raising = h.system.raising.clone();
    let d = h.dim();
    let cells: Vec<(usize, usize)> = (0..grid.waiting.n).flat_map(|iw| (0..grid.tau.n).map(move |ia| (iw, ia))).collect();
    let results: Vec<Result<Vec<C64>, ResponseError>> = cells
        .par_iter()
        .map(|&(iw, ia)| {
            let sq = seq.with_delays(grid.tau.value(ia), grid.waiting.value(iw));
            let lead = sq.pulses.iter().map(|p| SUPPORT_SIGMAS * p.sigma_fs() - p.arrival_fs).fold(0.0, f64::max);
            let n_pre = (lead / dt_fs).ceil() as usize;
            let field = |t: f64| -> Vec<DMatrix<C64>> {
                tuples
                    .iter()
                    .map(|ph| interaction_hamiltonian(&sq, &raising, t, frame, *ph) * C64::new(TWO_PI_C, 0.0))
                    .collect()
            };
            let mut s = HierarchyState::zeros(h, Block::full(h), nb);
            for b in 0..nb {
                s.set(0, 0, 0, b, C64::new(1.0, 0.0));
            }
            s.time_fs = -(n_pre as f64) * dt_fs;
            let mut prop = Propagator::new(&gen, dt_fs, nb)?.with_field(&field)?;
            prop.advance(&mut s, n_pre)?;
            if grid.t.start_fs > 0.0 {
                prop.advance(&mut s, start_steps)?;
            }
            let mut out = vec![ZERO; grid.t.n];
            for (it, slot) in out.iter_mut().enumerate() {
                if it > 0 {
                    prop.advance(&mut s, per)?;
                }
                let mut acc = ZERO;
                for (b, ph) in tuples.iter().enumerate() {
                    let mut p = ZERO;
                    for a in 0..d {
                        for c in 0..d {
                            let w = raising[(a, c)];
                            if w != 0.0 {
                                p += s.get(0, a, c, b) * w;
                            }
                        }
                    }
                    acc += p * C64::from_polar(1.0, -(-ph[0] + ph[1] + ph[2]));
                }
                *slot = acc / nb as f64;
            }
            Ok(out)
        })
        .collect();
    let mut sig = Signal3::zeros(SignalLabel::Total, *grid, frame, seq.delta_omega_cm1());
    for ((iw, ia), r) in cells.into_iter().zip(results) {
        let v = r?;
        for (it, x) in v.into_iter().enumerate() {
            let k = sig.index(iw, ia, it);
            sig.data[k] = x;
        }
    }
    Ok(sig)
}

/// Checks third-order scaling of the non-perturbative signal: halving every
/// amplitude must reduce the signal by 8 within `tolerance` (relative).
pub fn check_cubic_scaling(full: &Signal3, half: &Signal3, tolerance: f64) -> Result<f64, ResponseError> {
    let num: f64 = full.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = half.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let ratio = num / den;
    let deviation = (ratio / 8.0 - 1.0).abs();
    if deviation > tolerance {
        return Err(ResponseError::FieldTooStrong { ratio, deviation: 100.0 * deviation });
    }
    Ok(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bath::{expand_correlation, DrudeTerm, SpectralDensity};
    use crate::heom::{build_hierarchy, HierarchyConfig};
    use crate::model::{build_model, SiteParameters};
    use crate::pulses::{multi_color_sequence, single_color_sequence};

    fn bathless(model: &crate::model::VibronicModel, frame: f64) -> Hierarchy {
        let sys = OpenSystem::electronic(model);
        let none = vec![crate::bath::CorrelationExpansion::default(); model.n_sites()];
        build_hierarchy(&sys, &none, HierarchyConfig::default()).unwrap().rotating_frame(frame)
    }

    #[test]
    fn enumeration_counts() {
        let mono = enumerate_pathways(2);
        let mut nominal: Vec<_> = mono.iter().filter(|d| d.is_nominal()).map(|d| d.class).collect();
        nominal.sort();
        assert_eq!(nominal, vec![PathwayClass::GsbR, PathwayClass::SeR]);
        assert_eq!(mono.len(), 8);
        let dimer = enumerate_pathways(3);
        let mut nominal: Vec<_> = dimer.iter().filter(|d| d.is_nominal()).map(|d| d.class).collect();
        nominal.sort();
        assert_eq!(nominal, vec![PathwayClass::GsbR, PathwayClass::SeR, PathwayClass::EsaR]);
        assert_eq!(dimer.len(), 16);
        for c in PathwayClass::ALL {
            assert_eq!(dimer.iter().filter(|d| d.class == c).count(), 2, "{c}");
        }
        // DQC needs pulse 1 to act last
        for d in dimer.iter().filter(|d| matches!(d.class, PathwayClass::DqcA | PathwayClass::DqcB)) {
            assert_eq!(d.ordering()[2], 0);
            assert_eq!(d.intervals[1], (Manifold::Double, Manifold::Ground));
        }
        for d in &dimer {
            let ground = d.intervals[1] == (Manifold::Ground, Manifold::Ground);
            assert_eq!(ground, d.class.group() == Group::Ground);
        }
    }

    #[test]
    fn enumeration_matches_brute_force() {
        // independent count: walk every (ordering, side, part) combination,
        // keep RWA-allowed ones that stay inside the bands and end emitting
        for bands in [2i64, 3] {
            let mut count = 0;
            for perm in permutations3() {
                for code in 0..64u32 {
                    let (mut k, mut b) = (0i64, 0i64);
                    let mut ok = true;
                    for pos in 0..3 {
                        let bits = (code >> (2 * pos)) & 3;
                        let ket = bits & 1 == 0;
                        let up = bits & 2 == 0;
                        let conj = perm[pos] == 0;
                        // conjugated field: ket down or bra up; otherwise ket up or bra down
                        if conj != ((ket && !up) || (!ket && up)) {
                            ok = false;
                        }
                        let st = if up { 1 } else { -1 };
                        if ket {
                            k += st
                        } else {
                            b += st
                        }
                        if k < 0 || b < 0 || k >= bands || b >= bands {
                            ok = false;
                        }
                    }
                    if ok && k == b + 1 {
                        count += 1;
                    }
                }
            }
            assert_eq!(enumerate_pathways(bands as usize).len(), count);
        }
    }

    #[test]
    fn two_level_kernel_closed_form() {
        let e = 17500.0;
        let model = build_model(SiteParameters::monomer(e), vec![]).unwrap();
        let h = bathless(&model, 17400.0);
        let grid = KernelGrid { n1: 6, n2: 4, n3: 7 };
        let ker = impulsive_kernels(&h, &[(PathwayClass::SeR, grid), (PathwayClass::GsbR, grid)], 2.0, 0.25, 1e9).unwrap();
        let w = (e - 17400.0) * TWO_PI_C;
        for k in &ker {
            let sign = k.class.prefactor();
            for i3 in 0..grid.n3 {
                for i2 in 0..grid.n2 {
                    for i1 in 0..grid.n1 {
                        let (t1, t3) = (2.0 * i1 as f64, 2.0 * i3 as f64);
                        let want = sign * C64::from_polar(1.0, w * t1 - w * t3);
                        assert!((k.at(i3, i2, i1) - want).norm() < 1e-9, "{} {i3} {i2} {i1} {} {want}", k.class, k.at(i3, i2, i1));
                    }
                }
            }
        }
        // SE_R has one bra interaction more than GSB_R? both have two: equal
        assert_eq!(PathwayClass::SeR.prefactor(), PathwayClass::GsbR.prefactor());
        assert_eq!(PathwayClass::SeR.prefactor(), C64::new(0.0, -1.0));
        assert_eq!(PathwayClass::EsaR.prefactor(), C64::new(0.0, 1.0));
    }

    #[test]
    fn kernels_match_sum_over_states_without_bath() {
        let model = build_model(SiteParameters::dimer(17050.0, 17750.0, 200.0), vec![]).unwrap();
        let h = bathless(&model, 17400.0);
        let grid = KernelGrid { n1: 9, n2: 7, n3: 8 };
        let req: Vec<_> = PathwayClass::ALL.iter().map(|&c| (c, grid)).collect();
        let kers = impulsive_kernels(&h, &req, 2.0, 0.125, 1e9).unwrap();
        for k in &kers {
            let sos = sum_over_states_kernel(&h.system, 17400.0, k.class, grid, 2.0, None).unwrap();
            let err = k.data.iter().zip(&sos.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{}: {err}", k.class);
            // zero-time value equals the product of dipole matrix elements
            let direct = {
                let mu = &h.system.raising;
                let mut rho = DMatrix::<f64>::zeros(4, 4);
                rho[(0, 0)] = 1.0;
                for (side, part) in k.class.sequence() {
                    let op = if part == Part::Raising { mu.clone() } else { mu.transpose() };
                    rho = match side {
                        Side::Ket => op * rho,
                        Side::Bra => rho * op.transpose(),
                    };
                }
                (mu.transpose() * rho).trace()
            };
            assert!((k.at(0, 0, 0) - k.class.prefactor() * direct).norm() < 1e-12);
        }
    }

    #[test]
    fn nyquist_error() {
        let model = build_model(SiteParameters::monomer(17500.0), vec![]).unwrap();
        let h = bathless(&model, 0.0);
        let r = impulsive_kernel(&h, PathwayClass::SeR, KernelGrid { n1: 2, n2: 2, n3: 2 }, 2.0, 0.25);
        assert!(matches!(r, Err(ResponseError::Heom(HeomError::StepTooCoarse { .. })) | Err(ResponseError::Nyquist { .. })));
    }

    fn brute_force(ker: &ResponseKernel, d: &PathwayDiagram, seq: &PulseSequence, frame: f64, tau: i64, tw: i64, t: i64) -> C64 {
        let h = ker.step_fs;
        let o = d.ordering();
        let fw: Vec<FieldWeights> = (0..3).map(|p| FieldWeights::new(&seq.pulses[o[p]], h, frame, d.interactions[p].conjugate)).collect();
        let c = [-(tau + tw), -tw, 0];
        let mut acc = ZERO;
        let hw = |k: usize| fw[k].half_width as i64;
        for ua in -hw(0)..=hw(0) {
            for ub in -hw(1)..=hw(1) {
                for uc in -hw(2)..=hw(2) {
                    let sa = c[o[0]] + ua;
                    let sb = c[o[1]] + ub;
                    let sc = c[o[2]] + uc;
                    let (a1, a2, a3) = (sb - sa, sc - sb, t - sc);
                    if a1 < 0 || a2 < 0 || a3 < 0 {
                        continue;
                    }
                    let wgt = edge(a1 as usize) * edge(a2 as usize) * edge(a3 as usize);
                    acc += fw[0].at(ua) * fw[1].at(ub) * fw[2].at(uc) * ker.get(a3, a2, a1) * wgt;
                }
            }
        }
        acc
    }

    #[test]
    fn factorized_convolution_matches_triple_sum() {
        let model = build_model(SiteParameters::dimer(17050.0, 17750.0, 200.0), vec![]).unwrap();
        let h = bathless(&model, 17400.0);
        let seq = multi_color_sequence(17400.0, 800.0, 8.0, 1.0, 0.0, 0.0).unwrap();
        let grid = SignalGrid { tau: Axis::new(0.0, 4.0, 5), waiting: Axis::new(0.0, 6.0, 3), t: Axis::new(0.0, 2.0, 6) };
        let diagrams = enumerate_pathways(3);
        let req = required_kernel_grids(&diagrams, &seq, &grid, 2.0).unwrap();
        assert!(req.contains_key(&PathwayClass::DqcA));
        let reqv: Vec<_> = req.iter().map(|(c, g)| (*c, *g)).collect();
        let kers = impulsive_kernels(&h, &reqv, 2.0, 0.25, 1e9).unwrap();
        let set = convolve_pulses(&kers, &diagrams, &seq, &grid, 17400.0).unwrap();
        let s = grid_samples(&grid, 2.0).unwrap();
        for ker in &kers {
            let sig = &set.classes[&ker.class];
            for (iw, &tw) in s.waiting.iter().enumerate() {
                for (ia, &ta) in s.tau.iter().enumerate() {
                    for (it, &t) in s.t.iter().enumerate() {
                        let want: C64 = diagrams
                            .iter()
                            .filter(|d| d.class == ker.class)
                            .map(|d| brute_force(ker, d, &seq, 17400.0, ta, tw, t))
                            .sum();
                        let got = sig.at(iw, ia, it);
                        assert!((got - want).norm() <= 1e-12 * (1.0 + want.norm()), "{} {got} {want}", ker.class);
                    }
                }
            }
        }
        // partition
        let (tot, g, e) = (set.total(), set.ground(), set.excited());
        for k in 0..tot.data.len() {
            assert_eq!(tot.data[k], {
                let mut x = ZERO;
                for c in set.classes.values() {
                    x += c.data[k];
                }
                x
            });
            assert!((g.data[k] + e.data[k] - tot.data[k]).norm() <= 1e-15 * (1.0 + tot.data[k].norm()));
        }
    }

    #[test]
    fn separated_pulses_filter_by_spectrum() {
        // two-level monomer, well separated pulses: the signal is the impulsive
        // kernel times the product of the pulse spectra at the transition
        let e = 17600.0;
        let model = build_model(SiteParameters::monomer(e), vec![]).unwrap();
        let h = bathless(&model, 17400.0);
        let seq = multi_color_sequence(17400.0, 500.0, 10.0, 1.0, 0.0, 0.0).unwrap();
        let grid = SignalGrid { tau: Axis::new(60.0, 10.0, 3), waiting: Axis::new(80.0, 20.0, 2), t: Axis::new(60.0, 2.0, 4) };
        let diagrams = enumerate_pathways(2);
        let req: Vec<_> = required_kernel_grids(&diagrams, &seq, &grid, 2.0).unwrap().into_iter().collect();
        assert!(req.iter().all(|(c, _)| matches!(c, PathwayClass::GsbR | PathwayClass::SeR)));
        let kers = impulsive_kernels(&h, &req, 2.0, 0.25, 1e9).unwrap();
        let set = convolve_pulses(&kers, &diagrams, &seq, &grid, 17400.0).unwrap();
        let tot = set.total();
        let w = (e - 17400.0) * TWO_PI_C;
        let spec = |k: usize| seq.pulses[k].spectrum(e) * TWO_PI_C;
        for iw in 0..2 {
            for ia in 0..3 {
                for it in 0..4 {
                    let (tau, t) = (grid.tau.value(ia), grid.t.value(it));
                    let want = C64::new(0.0, -2.0) * C64::from_polar(1.0, w * tau - w * t) * spec(0) * spec(1) * spec(2);
                    let got = tot.at(iw, ia, it);
                    // 4σ support truncation leaves a ~1e-5 relative mismatch off resonance
                    assert!((got - want).norm() < 1e-4 * want.norm(), "{got} {want}");
                }
            }
        }
    }

    #[test]
    fn impulsive_limit() {
        let model = build_model(SiteParameters::dimer(17050.0, 17750.0, 200.0), vec![]).unwrap();
        let e = expand_correlation(
            &SpectralDensity::new(Some(DrudeTerm { reorganization_cm1: 50.0, relaxation_time_fs: 100.0 }), vec![]).unwrap(),
            300.0,
            1,
        )
        .unwrap();
        let h = build_hierarchy(&OpenSystem::electronic(&model), &[e.clone(), e], HierarchyConfig { depth: 2, ..Default::default() })
            .unwrap()
            .rotating_frame(17400.0);
        let seq = single_color_sequence(17400.0, 0.1, 1.0, 0.0, 0.0).unwrap();
        let grid = SignalGrid { tau: Axis::new(4.0, 4.0, 3), waiting: Axis::new(10.0, 10.0, 2), t: Axis::new(2.0, 2.0, 5) };
        let diagrams = enumerate_pathways(3);
        let req: Vec<_> = required_kernel_grids(&diagrams, &seq, &grid, 2.0).unwrap().into_iter().collect();
        let kers = impulsive_kernels(&h, &req, 2.0, 0.25, 1e9).unwrap();
        let set = convolve_pulses(&kers, &diagrams, &seq, &grid, 17400.0).unwrap();
        let area = seq.pulses[0].area();
        for k in &kers {
            let sig = &set.classes[&k.class];
            for iw in 0..2 {
                for ia in 0..3 {
                    for it in 0..5 {
                        let (i1, i2, i3) = ((grid.tau.value(ia) / 2.0) as usize, (grid.waiting.value(iw) / 2.0) as usize, (grid.t.value(it) / 2.0) as usize);
                        let want = if k.class.sequence()[0] == (Side::Bra, Part::Raising) { k.at(i3, i2, i1) * area.powi(3) } else { ZERO };
                        assert!((sig.at(iw, ia, it) - want).norm() <= 1e-2 * want.norm().max(1e-30) + 1e-300, "{}", k.class);
                    }
                }
            }
        }
    }
}
