//! Hierarchical equations of motion with scaled auxiliary density operators.
//!
//! Each site couples to its bath through the excitation projector `Q_s`, which
//! is diagonal in the site basis. Every bath term therefore acts elementwise on
//! the density-matrix entries, and the only dense operation is the commutator
//! with the system Hamiltonian. For a fixed block of the density matrix
//! (ket manifold × bra manifold) the time-independent generator is assembled
//! once as a sparse matrix over (ADO, element) rows; states are stored as
//! `rows × batch` so many initial conditions propagate together.
//!
//! Scaled equation for ADO `n` with terms `c_j exp(−γ_j t)`:
//!
//! ```text
//! dρ_n/dt = −i[H′, ρ_n] − Σ_j n_j γ_j ρ_n
//!           − i Σ_j √((n_j+1) s_j) [Q, ρ_{n+e_j}]
//!           − i Σ_j √(n_j / s_j) (c_j Q ρ_{n−e_j} − c̃_j ρ_{n−e_j} Q)
//!           − Σ_s Δ_s [Q_s, [Q_s, ρ_n]]
//! ```
//!
//! with `H′ = H − Ω_ref N` (rotating frame), `s_j = (|c_j| + |c̃_j|)/2`, `Δ_s`
//! the Markovian weight of the truncated Matsubara tail, and at depth `L` the
//! deeper ADOs replaced by their stationary adiabatic value.

use crate::bath::CorrelationExpansion;
use crate::model::{Manifold, VibronicBasis, VibronicModel};
use crate::units::TWO_PI_C;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;
use thiserror::Error;

type C64 = Complex64;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeomError {
    #[error("expected {expected} bath expansions (one per site), got {found}")]
    SiteCount { expected: usize, found: usize },
    #[error(
        "hierarchy with {terms} terms at depth {depth} has {ados} ADOs needing ~{required_mb:.0} MB, \
         over the {budget_mb:.0} MB budget"
    )]
    ResourceBudget { terms: usize, depth: usize, ados: u128, required_mb: f64, budget_mb: f64 },
    #[error("time step {dt} fs too coarse: rotating-frame frequency {frequency_cm1:.1} cm⁻¹ gives dt·ω = {product:.3} (limit {limit})")]
    StepTooCoarse { dt: f64, frequency_cm1: f64, product: f64, limit: f64 },
    #[error("time step {dt} fs too large for hierarchy rate {rate:.3} fs⁻¹ (dt·rate = {product:.3}, stability limit {limit})")]
    Stiff { dt: f64, rate: f64, product: f64, limit: f64 },
    #[error("non-finite values in hierarchy state; last good time {last_good_fs} fs")]
    NonFinite { last_good_fs: f64 },
    #[error("manifold {0:?} is empty for this model")]
    EmptyManifold(Manifold),
    #[error("invalid time span: {0}")]
    TimeSpan(String),
    #[error("state block does not match generator block")]
    BlockMismatch,
    #[error("time-dependent fields require the full-density block")]
    FieldNeedsFullBlock,
}

/// Largest Bohr frequency times step accepted by [`Propagator::new`].
pub const BOHR_STEP_LIMIT: f64 = 0.1;
/// Largest |diagonal rate| times step accepted by [`Propagator::new`]
/// (inside the RK4 stability region on both axes).
pub const STIFFNESS_STEP_LIMIT: f64 = 2.5;

/// System operators seen by the hierarchy: a Hamiltonian that is block
/// diagonal over excitation manifolds, the dipole raising part, and one
/// diagonal bath-coupling operator per site.
#[derive(Debug, Clone)]
pub struct OpenSystem {
    pub hamiltonian_cm1: DMatrix<f64>,
    pub raising: DMatrix<f64>,
    pub manifold_ranges: [Range<usize>; 3],
    pub excitation_number: Vec<f64>,
    pub site_q: Vec<Vec<f64>>,
}

impl OpenSystem {
    /// Purely electronic basis of `model`.
    pub fn electronic(model: &VibronicModel) -> OpenSystem {
        OpenSystem {
            hamiltonian_cm1: model.hamiltonian().clone(),
            raising: model.dipole_raising().clone(),
            manifold_ranges: Manifold::ALL.map(|m| model.manifold_range(m)),
            excitation_number: model.excitation_number(),
            site_q: (0..model.n_sites()).map(|s| model.site_projector(s)).collect(),
        }
    }

    /// Product basis (electronic major, vibrational minor) with the model's
    /// modes treated explicitly; Condon dipoles.
    pub fn explicit_modes(model: &VibronicModel, basis: &VibronicBasis) -> OpenSystem {
        let nv = basis.n_vib;
        let d = model.dim() * nv;
        let mut h = DMatrix::zeros(d, d);
        let mut ranges: [Range<usize>; 3] = [0..0, 0..0, 0..0];
        for m in Manifold::ALL {
            let r = model.manifold_range(m);
            let rr = r.start * nv..r.end * nv;
            let blk = &basis.manifold(m).hamiltonian;
            h.view_mut((rr.start, rr.start), (rr.len(), rr.len())).copy_from(blk);
            ranges[m.index()] = rr;
        }
        let expand = |v: Vec<f64>| v.iter().flat_map(|&x| std::iter::repeat_n(x, nv)).collect::<Vec<f64>>();
        let mu = model.dipole_raising();
        let raising = DMatrix::from_fn(d, d, |a, b| if a % nv == b % nv { mu[(a / nv, b / nv)] } else { 0.0 });
        OpenSystem {
            hamiltonian_cm1: h,
            raising,
            manifold_ranges: ranges,
            excitation_number: expand(model.excitation_number()),
            site_q: (0..model.n_sites()).map(|s| expand(model.site_projector(s))).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian_cm1.nrows()
    }

    pub fn n_sites(&self) -> usize {
        self.site_q.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    /// Truncation depth L.
    pub depth: usize,
    /// Markovian correction for truncated Matsubara terms.
    pub tail_terminator: bool,
    /// Adiabatic closure of ADOs at depth L + 1.
    pub depth_closure: bool,
    pub memory_budget_mb: f64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig { depth: 5, tail_terminator: true, depth_closure: true, memory_budget_mb: 4096.0 }
    }
}

/// One exponential term of one site, in rad/fs units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyTerm {
    pub site: usize,
    /// c_j (fs⁻²).
    pub c: C64,
    /// c̃_j (fs⁻²).
    pub c_tilde: C64,
    /// γ_j (fs⁻¹).
    pub rate: C64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub config: HierarchyConfig,
    pub terms: Vec<HierarchyTerm>,
    /// Occupations, `n_ado × n_terms`, depth-sorted (index 0 is the physical ADO).
    indices: Vec<u8>,
    /// `up[n * M + j]` = index of n + e_j (or u32::MAX).
    up: Vec<u32>,
    /// `down[n * M + j]` = index of n − e_j (or u32::MAX).
    down: Vec<u32>,
    pub system: OpenSystem,
    /// Δ_s (fs⁻¹) per site.
    pub tail: Vec<f64>,
    /// Rotating-frame reference Ω_ref (cm⁻¹).
    pub frame_cm1: f64,
}

/// C(M+L, L) as u128 (saturating).
pub fn hierarchy_size(n_terms: usize, depth: usize) -> u128 {
    let mut v: u128 = 1;
    for i in 1..=depth as u128 {
        v = v.saturating_mul(n_terms as u128 + i) / i;
    }
    v
}

/// Bytes for `copies` states of `n_ado × elements × batch` complex entries.
pub fn state_megabytes(n_ado: u128, elements: usize, batch: usize, copies: usize) -> f64 {
    n_ado as f64 * elements as f64 * batch as f64 * copies as f64 * 16.0 / 1048576.0
}

fn enumerate_indices(m: usize, depth: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for d in 0..=depth {
        // all compositions of d into m non-negative parts, lexicographic
        let mut cur = vec![0u8; m];
        fn rec(pos: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
            if pos + 1 == cur.len() {
                cur[pos] = left as u8;
                out.push(cur.clone());
                return;
            }
            for k in (0..=left).rev() {
                cur[pos] = k as u8;
                rec(pos + 1, left - k, cur, out);
            }
            cur[pos] = 0;
        }
        if m == 0 {
            if d == 0 {
                out.push(Vec::new());
            }
            continue;
        }
        rec(0, d, &mut cur, &mut out);
    }
    out
}

/// Builds the hierarchy for `system` with one correlation expansion per site.
pub fn build_hierarchy(
    system: &OpenSystem,
    expansions: &[CorrelationExpansion],
    config: HierarchyConfig,
) -> Result<Hierarchy, HeomError> {
    let n_sites = system.n_sites();
    if expansions.len() != n_sites {
        return Err(HeomError::SiteCount { expected: n_sites, found: expansions.len() });
    }
    let w2 = TWO_PI_C * TWO_PI_C;
    let mut terms = Vec::new();
    for (site, exp) in expansions.iter().enumerate() {
        for j in 0..exp.len() {
            let c = exp.terms[j].amplitude * w2;
            let c_tilde = exp.conj_amplitude(j) * w2;
            let scale = 0.5 * (c.norm() + c_tilde.norm());
            terms.push(HierarchyTerm {
                site,
                c,
                c_tilde,
                rate: exp.terms[j].rate,
                scale: if scale > 0.0 { scale } else { 1.0 },
            });
        }
    }
    let m = terms.len();
    let d = system.dim();
    let ados = hierarchy_size(m, config.depth);
    // state + four RK4 stages + scratch, full density, single trajectory
    let required_mb = state_megabytes(ados, d * d, 1, 6) + ados as f64 * m as f64 * 9.0 / 1048576.0;
    if required_mb > config.memory_budget_mb || ados > u32::MAX as u128 / 2 || config.depth > u8::MAX as usize {
        return Err(HeomError::ResourceBudget {
            terms: m,
            depth: config.depth,
            ados,
            required_mb,
            budget_mb: config.memory_budget_mb,
        });
    }
    let list = enumerate_indices(m, config.depth);
    debug_assert_eq!(list.len() as u128, ados);
    let lookup: HashMap<&[u8], u32> = list.iter().enumerate().map(|(i, v)| (v.as_slice(), i as u32)).collect();
    let n_ado = list.len();
    let mut up = vec![u32::MAX; n_ado * m];
    let mut down = vec![u32::MAX; n_ado * m];
    let mut probe = vec![0u8; m];
    for (i, v) in list.iter().enumerate() {
        for j in 0..m {
            probe.copy_from_slice(v);
            probe[j] += 1;
            if let Some(&k) = lookup.get(probe.as_slice()) {
                up[i * m + j] = k;
            }
            if v[j] > 0 {
                probe[j] -= 2;
                down[i * m + j] = lookup[probe.as_slice()];
            }
        }
    }
    let indices = list.concat();
    let tail = expansions
        .iter()
        .map(|e| if config.tail_terminator { e.residual_strength * w2 } else { 0.0 })
        .collect();
    Ok(Hierarchy {
        config,
        terms,
        indices,
        up,
        down,
        system: system.clone(),
        tail,
        frame_cm1: 0.0,
    })
}

impl Hierarchy {
    pub fn n_ado(&self) -> usize {
        if self.terms.is_empty() {
            1
        } else {
            self.indices.len() / self.terms.len()
        }
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn index(&self, ado: usize) -> &[u8] {
        let m = self.terms.len();
        &self.indices[ado * m..(ado + 1) * m]
    }

    pub fn depth_of(&self, ado: usize) -> usize {
        self.index(ado).iter().map(|&x| x as usize).sum()
    }

    /// Index of n + e_j.
    pub fn raise(&self, ado: usize, j: usize) -> Option<usize> {
        let v = self.up[ado * self.terms.len() + j];
        (v != u32::MAX).then_some(v as usize)
    }

    /// Index of n − e_j.
    pub fn lower(&self, ado: usize, j: usize) -> Option<usize> {
        let v = self.down[ado * self.terms.len() + j];
        (v != u32::MAX).then_some(v as usize)
    }

    /// Number of coupling-graph edges of ADO `n` (≤ 2M).
    pub fn degree(&self, ado: usize) -> usize {
        (0..self.terms.len()).filter(|&j| self.raise(ado, j).is_some()).count()
            + (0..self.terms.len()).filter(|&j| self.lower(ado, j).is_some()).count()
    }

    pub fn manifold_range(&self, m: Manifold) -> Range<usize> {
        self.system.manifold_ranges[m.index()].clone()
    }

    /// Copy of the hierarchy with rotating-frame reference Ω_ref (cm⁻¹):
    /// every manifold block of H is shifted by −(excitation number)·Ω_ref.
    pub fn rotating_frame(&self, frame_cm1: f64) -> Hierarchy {
        let mut h = self.clone();
        h.frame_cm1 = frame_cm1;
        h
    }

    /// Frame-shifted Hamiltonian H − Ω_ref N (cm⁻¹).
    pub fn frame_hamiltonian_cm1(&self) -> DMatrix<f64> {
        let mut h = self.system.hamiltonian_cm1.clone();
        for (i, n) in self.system.excitation_number.iter().enumerate() {
            h[(i, i)] -= n * self.frame_cm1;
        }
        h
    }

    /// Same hierarchy with the bath switched off (all terms removed).
    pub fn without_bath(&self) -> Hierarchy {
        let mut h = self.clone();
        h.terms.clear();
        h.indices.clear();
        h.up.clear();
        h.down.clear();
        h.tail.iter_mut().for_each(|x| *x = 0.0);
        h
    }
}

/// Rectangular block of the density matrix, rows × cols of the full basis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Block {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Block {
    pub fn full(h: &Hierarchy) -> Block {
        Block { rows: 0..h.dim(), cols: 0..h.dim() }
    }

    pub fn manifolds(h: &Hierarchy, ket: Manifold, bra: Manifold) -> Result<Block, HeomError> {
        let (rows, cols) = (h.manifold_range(ket), h.manifold_range(bra));
        if rows.is_empty() {
            return Err(HeomError::EmptyManifold(ket));
        }
        if cols.is_empty() {
            return Err(HeomError::EmptyManifold(bra));
        }
        Ok(Block { rows, cols })
    }

    pub fn elements(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_full(&self, d: usize) -> bool {
        self.rows == (0..d) && self.cols == (0..d)
    }
}

/// Batch of hierarchy states restricted to one block.
/// Layout: `[ado][row][col][batch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyState {
    pub block: Block,
    pub n_ado: usize,
    pub batch: usize,
    pub data: Vec<C64>,
    pub time_fs: f64,
}

impl HierarchyState {
    pub fn zeros(h: &Hierarchy, block: Block, batch: usize) -> Self {
        let n = h.n_ado() * block.elements() * batch;
        HierarchyState { block, n_ado: h.n_ado(), batch, data: vec![ZERO; n], time_fs: 0.0 }
    }

    /// Full-density state with physical ADO `rho` (d×d) and all others zero.
    pub fn from_density(h: &Hierarchy, rho: &DMatrix<C64>) -> Self {
        let mut s = HierarchyState::zeros(h, Block::full(h), 1);
        s.set_physical(0, rho);
        s
    }

    /// |g⟩⟨g| with a quiescent bath. The ground manifold does not couple to the
    /// bath, so this is the exact correlated equilibrium of the ground state.
    pub fn ground_state(h: &Hierarchy) -> Self {
        let d = h.dim();
        let mut rho = DMatrix::zeros(d, d);
        rho[(0, 0)] = C64::new(1.0, 0.0);
        HierarchyState::from_density(h, &rho)
    }

    pub fn rows(&self) -> usize {
        self.n_ado * self.block.elements()
    }

    #[inline]
    fn offset(&self, ado: usize, r: usize, c: usize, b: usize) -> usize {
        let nc = self.block.cols.len();
        ((ado * self.block.rows.len() + r) * nc + c) * self.batch + b
    }

    /// Entry (ado, local row, local col, batch member).
    pub fn get(&self, ado: usize, r: usize, c: usize, b: usize) -> C64 {
        self.data[self.offset(ado, r, c, b)]
    }

    pub fn set(&mut self, ado: usize, r: usize, c: usize, b: usize, v: C64) {
        let o = self.offset(ado, r, c, b);
        self.data[o] = v;
    }

    /// Physical (depth-0) block of batch member `b`.
    pub fn physical(&self, b: usize) -> DMatrix<C64> {
        let (nr, nc) = (self.block.rows.len(), self.block.cols.len());
        DMatrix::from_fn(nr, nc, |r, c| self.get(0, r, c, b))
    }

    pub fn set_physical(&mut self, b: usize, m: &DMatrix<C64>) {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.set(0, r, c, b, m[(r, c)]);
            }
        }
    }

    /// Trace of the physical ADO (full or square diagonal blocks).
    pub fn trace(&self, b: usize) -> C64 {
        let p = self.physical(b);
        (0..p.nrows().min(p.ncols())).map(|i| p[(i, i)]).sum()
    }

    /// max |ρ − ρ†| of the physical ADO (square blocks).
    pub fn hermiticity_defect(&self, b: usize) -> f64 {
        let p = self.physical(b);
        (&p - p.adjoint()).iter().map(|x| x.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    /// Single batch member as its own state.
    pub fn member(&self, b: usize) -> HierarchyState {
        let data = (0..self.rows()).map(|row| self.data[row * self.batch + b]).collect();
        HierarchyState { block: self.block.clone(), n_ado: self.n_ado, batch: 1, data, time_fs: self.time_fs }
    }

    /// Sesquilinear product Σ conj(self)·other per batch member pair (b, b).
    pub fn inner(&self, other: &HierarchyState) -> Vec<C64> {
        let mut out = vec![ZERO; self.batch];
        for row in 0..self.rows() {
            for b in 0..self.batch {
                out[b] += self.data[row * self.batch + b].conj() * other.data[row * other.batch + b];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Ket,
    Bra,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Raising,
    Lowering,
}

fn shift(m: Manifold, part: Part) -> Option<Manifold> {
    match part {
        Part::Raising => Manifold::from_index(m.index() + 1),
        Part::Lowering => m.index().checked_sub(1).and_then(Manifold::from_index),
    }
}

fn manifold_of_range(h: &Hierarchy, r: &Range<usize>) -> Option<Manifold> {
    Manifold::ALL.into_iter().find(|&m| h.manifold_range(m) == *r)
}

/// Block reached by applying one dipole interaction to `block`.
pub fn dipole_target(h: &Hierarchy, block: &Block, side: Side, part: Part) -> Result<Block, HeomError> {
    let range = if side == Side::Ket { &block.rows } else { &block.cols };
    let m = manifold_of_range(h, range).ok_or(HeomError::BlockMismatch)?;
    let target = shift(m, part).ok_or(HeomError::BlockMismatch)?;
    let r = h.manifold_range(target);
    if r.is_empty() {
        return Err(HeomError::EmptyManifold(target));
    }
    Ok(match side {
        Side::Ket => Block { rows: r, cols: block.cols.clone() },
        Side::Bra => Block { rows: block.rows.clone(), cols: r },
    })
}

/// Applies a dipole interaction to every ADO and batch member:
/// ket raising `μ⁺ρ`, ket lowering `μ⁻ρ`, bra raising `ρμ⁻`, bra lowering `ρμ⁺`.
pub fn apply_dipole(
    h: &Hierarchy,
    s: &HierarchyState,
    side: Side,
    part: Part,
) -> Result<HierarchyState, HeomError> {
    let target = dipole_target(h, &s.block, side, part)?;
    let mut out = HierarchyState::zeros(h, target.clone(), s.batch);
    out.time_fs = s.time_fs;
    let (nr0, nc0) = (s.block.rows.len(), s.block.cols.len());
    let (nr1, nc1) = (target.rows.len(), target.cols.len());
    let bsz = s.batch;
    let raising = &h.system.raising;
    // op[a', a]: full-basis matrix element between new and old indices
    let op = |new: usize, old: usize| -> f64 {
        match (side, part) {
            (_, Part::Raising) => raising[(new, old)],
            (_, Part::Lowering) => raising[(old, new)],
        }
    };
    for ado in 0..s.n_ado {
        let src = &s.data[ado * nr0 * nc0 * bsz..(ado + 1) * nr0 * nc0 * bsz];
        let dst = &mut out.data[ado * nr1 * nc1 * bsz..(ado + 1) * nr1 * nc1 * bsz];
        for r1 in 0..nr1 {
            for c1 in 0..nc1 {
                let d = &mut dst[(r1 * nc1 + c1) * bsz..(r1 * nc1 + c1 + 1) * bsz];
                match side {
                    Side::Ket => {
                        for r0 in 0..nr0 {
                            let w = op(target.rows.start + r1, s.block.rows.start + r0);
                            if w != 0.0 {
                                let x = &src[(r0 * nc0 + c1) * bsz..(r0 * nc0 + c1 + 1) * bsz];
                                d.iter_mut().zip(x).for_each(|(d, x)| *d += x * w);
                            }
                        }
                    }
                    Side::Bra => {
                        for c0 in 0..nc0 {
                            // (ρ M)[r, c1] = Σ ρ[r, c0] M[c0, c1]; M[c0, c1] = op(c1, c0)
                            let w = op(target.cols.start + c1, s.block.cols.start + c0);
                            if w != 0.0 {
                                let x = &src[(r1 * nc0 + c0) * bsz..(r1 * nc0 + c0 + 1) * bsz];
                                d.iter_mut().zip(x).for_each(|(d, x)| *d += x * w);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`apply_dipole`] with respect to `⟨y, x⟩ = Σ conj(y)·x`:
/// maps a covector on the target block back to the source block `source`.
pub fn apply_dipole_adjoint(
    h: &Hierarchy,
    y: &HierarchyState,
    source: &Block,
    side: Side,
    part: Part,
) -> Result<HierarchyState, HeomError> {
    let target = dipole_target(h, source, side, part)?;
    if target != y.block {
        return Err(HeomError::BlockMismatch);
    }
    // The operator matrices are real, so the adjoint is the transposed action:
    // ket side M ρ → Mᵀ y; bra side ρ M → y Mᵀ.
    let mut out = HierarchyState::zeros(h, source.clone(), y.batch);
    let (nr0, nc0) = (source.rows.len(), source.cols.len());
    let (nr1, nc1) = (target.rows.len(), target.cols.len());
    let bsz = y.batch;
    let raising = &h.system.raising;
    let op = |new: usize, old: usize| -> f64 {
        match (side, part) {
            (_, Part::Raising) => raising[(new, old)],
            (_, Part::Lowering) => raising[(old, new)],
        }
    };
    for ado in 0..y.n_ado {
        let src = &y.data[ado * nr1 * nc1 * bsz..(ado + 1) * nr1 * nc1 * bsz];
        let dst = &mut out.data[ado * nr0 * nc0 * bsz..(ado + 1) * nr0 * nc0 * bsz];
        for r0 in 0..nr0 {
            for c0 in 0..nc0 {
                let d = &mut dst[(r0 * nc0 + c0) * bsz..(r0 * nc0 + c0 + 1) * bsz];
                match side {
                    Side::Ket => {
                        for r1 in 0..nr1 {
                            let w = op(target.rows.start + r1, source.rows.start + r0);
                            if w != 0.0 {
                                let x = &src[(r1 * nc1 + c0) * bsz..(r1 * nc1 + c0 + 1) * bsz];
                                d.iter_mut().zip(x).for_each(|(d, x)| *d += x * w);
                            }
                        }
                    }
                    Side::Bra => {
                        for c1 in 0..nc1 {
                            let w = op(target.cols.start + c1, source.cols.start + c0);
                            if w != 0.0 {
                                let x = &src[(r0 * nc1 + c1) * bsz..(r0 * nc1 + c1 + 1) * bsz];
                                d.iter_mut().zip(x).for_each(|(d, x)| *d += x * w);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sparse generator of one block: `dx/dt = G x` over rows (ado, element).
#[derive(Debug, Clone)]
pub struct BlockGenerator {
    pub block: Block,
    pub n_ado: usize,
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<C64>,
    /// Largest |G_ii| (fs⁻¹).
    pub max_diagonal_rate: f64,
    /// Largest rotating-frame Bohr frequency of the block (cm⁻¹).
    pub max_bohr_cm1: f64,
    adjoint: bool,
    full_dim: usize,
}

fn manifold_eigs_shifted(h: &Hierarchy, range: &Range<usize>) -> Vec<f64> {
    let hf = h.frame_hamiltonian_cm1();
    let mut out = Vec::new();
    for m in Manifold::ALL {
        let r = h.manifold_range(m);
        if r.is_empty() || r.start < range.start || r.end > range.end {
            continue;
        }
        let blk = hf.view((r.start, r.start), (r.len(), r.len())).into_owned();
        out.extend(crate::model::sorted_eigh(&blk).0);
    }
    out
}

impl BlockGenerator {
    pub fn new(h: &Hierarchy, block: Block) -> Result<BlockGenerator, HeomError> {
        let d = h.dim();
        if block.rows.end > d || block.cols.end > d {
            return Err(HeomError::BlockMismatch);
        }
        let hf = h.frame_hamiltonian_cm1() * TWO_PI_C;
        let (nr, nc) = (block.rows.len(), block.cols.len());
        let nel = nr * nc;
        let n_ado = h.n_ado();
        let m = h.n_terms();
        let i = C64::i();
        let qa = |s: usize, r: usize| h.system.site_q[s][block.rows.start + r];
        let qb = |s: usize, c: usize| h.system.site_q[s][block.cols.start + c];

        let rows: Vec<Vec<(u32, C64)>> = (0..n_ado * nel)
            .into_par_iter()
            .map(|row| {
                let (ado, e) = (row / nel, row % nel);
                let (r, c) = (e / nc, e % nc);
                let idx = if m > 0 { h.index(ado) } else { &[][..] };
                let mut entries: Vec<(u32, C64)> = Vec::with_capacity(4 + nr + nc + 2 * m);
                let base = ado * nel;
                // −i[H′, ρ]: −i Σ_k H′[r,k] ρ[k,c] + i Σ_k ρ[r,k] H′[k,c]
                for k in 0..nr {
                    let v = hf[(block.rows.start + r, block.rows.start + k)];
                    if v != 0.0 {
                        entries.push(((base + k * nc + c) as u32, -i * v));
                    }
                }
                for k in 0..nc {
                    let v = hf[(block.cols.start + k, block.cols.start + c)];
                    if v != 0.0 {
                        entries.push(((base + r * nc + k) as u32, i * v));
                    }
                }
                let mut diag = ZERO;
                let mut gamma_n = ZERO;
                for j in 0..m {
                    gamma_n += h.terms[j].rate * idx[j] as f64;
                }
                diag -= gamma_n;
                for (s, &delta) in h.tail.iter().enumerate() {
                    let dq = qa(s, r) - qb(s, c);
                    diag -= delta * dq * dq;
                }
                let depth: usize = idx.iter().map(|&x| x as usize).sum();
                for (j, t) in h.terms.iter().enumerate() {
                    let (q1, q2) = (qa(t.site, r), qb(t.site, c));
                    let nj = idx[j] as f64;
                    if let Some(up) = h.raise(ado, j) {
                        let f = -i * (nj + 1.0).mul_add(t.scale, 0.0).sqrt() * (q1 - q2);
                        if f != ZERO {
                            entries.push(((up * nel + e) as u32, f));
                        }
                    } else if h.config.depth_closure && depth == h.config.depth {
                        let g = gamma_n + t.rate;
                        diag -= (nj + 1.0) / g * (q1 - q2) * (t.c * q1 - t.c_tilde * q2);
                    }
                    if let Some(dn) = h.lower(ado, j) {
                        let f = -i * (nj / t.scale).sqrt() * (t.c * q1 - t.c_tilde * q2);
                        if f != ZERO {
                            entries.push(((dn * nel + e) as u32, f));
                        }
                    }
                }
                entries.push((row as u32, diag));
                entries.sort_by_key(|x| x.0);
                let mut merged: Vec<(u32, C64)> = Vec::with_capacity(entries.len());
                for (cidx, v) in entries {
                    match merged.last_mut() {
                        Some(last) if last.0 == cidx => last.1 += v,
                        _ => merged.push((cidx, v)),
                    }
                }
                merged.retain(|x| x.1 != ZERO);
                merged
            })
            .collect();

        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let nnz: usize = rows.iter().map(|r| r.len()).sum();
        let mut col = Vec::with_capacity(nnz);
        let mut val = Vec::with_capacity(nnz);
        let mut max_diag = 0.0f64;
        for (ri, r) in rows.into_iter().enumerate() {
            for (cidx, v) in r {
                if cidx as usize == ri {
                    max_diag = max_diag.max(v.norm());
                }
                col.push(cidx);
                val.push(v);
            }
            row_ptr.push(col.len());
        }

        let er = manifold_eigs_shifted(h, &block.rows);
        let ec = manifold_eigs_shifted(h, &block.cols);
        let mut max_bohr = 0.0f64;
        for a in &er {
            for b in &ec {
                max_bohr = max_bohr.max((a - b).abs());
            }
        }
        Ok(BlockGenerator {
            block,
            n_ado,
            row_ptr,
            col,
            val,
            max_diagonal_rate: max_diag,
            max_bohr_cm1: max_bohr,
            adjoint: false,
            full_dim: d,
        })
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.val.len()
    }

    pub fn is_adjoint(&self) -> bool {
        self.adjoint
    }

    /// Conjugate transpose G†.
    pub fn adjoint(&self) -> BlockGenerator {
        let n = self.rows();
        let mut counts = vec![0usize; n + 1];
        for &c in &self.col {
            counts[c as usize + 1] += 1;
        }
        for k in 0..n {
            counts[k + 1] += counts[k];
        }
        let mut next = counts.clone();
        let mut col = vec![0u32; self.nnz()];
        let mut val = vec![ZERO; self.nnz()];
        for r in 0..n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.col[k] as usize;
                let pos = next[c];
                col[pos] = r as u32;
                val[pos] = self.val[k].conj();
                next[c] += 1;
            }
        }
        BlockGenerator {
            block: self.block.clone(),
            n_ado: self.n_ado,
            row_ptr: counts,
            col,
            val,
            max_diagonal_rate: self.max_diagonal_rate,
            max_bohr_cm1: self.max_bohr_cm1,
            adjoint: !self.adjoint,
            full_dim: self.full_dim,
        }
    }

    /// out = G x for `x` laid out `rows × batch`.
    pub fn apply(&self, x: &[C64], out: &mut [C64], batch: usize) {
        const CHUNK: usize = 64;
        out.par_chunks_mut(batch * CHUNK).enumerate().for_each(|(ci, chunk)| {
            for (k, o) in chunk.chunks_mut(batch).enumerate() {
                let r = ci * CHUNK + k;
                o.iter_mut().for_each(|v| *v = ZERO);
                let o = as_f64_mut(o);
                for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                    let (ar, ai) = (self.val[p].re, self.val[p].im);
                    let c = self.col[p] as usize;
                    let src = as_f64(&x[c * batch..(c + 1) * batch]);
                    for (o, s) in o.chunks_exact_mut(2).zip(src.chunks_exact(2)) {
                        o[0] += ar * s[0] - ai * s[1];
                        o[1] += ar * s[1] + ai * s[0];
                    }
                }
            }
        });
    }

    /// Adds −i[F_b, ρ_n] to every ADO for complex full-basis matrices F_b
    /// (rad/fs), one per batch member or a single one shared by all.
    fn add_field(&self, f: &[DMatrix<C64>], x: &[C64], out: &mut [C64], batch: usize) {
        let d = self.full_dim;
        let nel = d * d;
        let i = C64::i();
        out.par_chunks_mut(nel * batch).zip(x.par_chunks(nel * batch)).for_each(|(o, s)| {
            for b in 0..batch {
                let f = &f[if f.len() == 1 { 0 } else { b }];
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = ZERO;
                        for k in 0..d {
                            acc += f[(r, k)] * s[(k * d + c) * batch + b] - s[(r * d + k) * batch + b] * f[(k, c)];
                        }
                        o[(r * d + c) * batch + b] -= i * acc;
                    }
                }
            }
        });
    }
}

/// Time-dependent Hamiltonian increment F(t) in rad/fs (full basis): one
/// matrix per batch member, or a single matrix for all members.
pub type FieldFn<'a> = dyn Fn(f64) -> Vec<DMatrix<C64>> + Sync + 'a;

/// Fixed-step classical RK4.
pub struct Propagator<'a> {
    gen: &'a BlockGenerator,
    pub dt: f64,
    field: Option<&'a FieldFn<'a>>,
    k: [Vec<C64>; 4],
    tmp: Vec<C64>,
}

/// Checks a step size against the generator's fastest frequencies.
pub fn check_step(gen: &BlockGenerator, dt: f64) -> Result<(), HeomError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(HeomError::TimeSpan(format!("time step must be positive, got {dt}")));
    }
    let w = gen.max_bohr_cm1 * TWO_PI_C;
    if w * dt >= BOHR_STEP_LIMIT {
        return Err(HeomError::StepTooCoarse { dt, frequency_cm1: gen.max_bohr_cm1, product: w * dt, limit: BOHR_STEP_LIMIT });
    }
    if gen.max_diagonal_rate * dt >= STIFFNESS_STEP_LIMIT {
        return Err(HeomError::Stiff {
            dt,
            rate: gen.max_diagonal_rate,
            product: gen.max_diagonal_rate * dt,
            limit: STIFFNESS_STEP_LIMIT,
        });
    }
    Ok(())
}

impl<'a> Propagator<'a> {
    pub fn new(gen: &'a BlockGenerator, dt: f64, batch: usize) -> Result<Self, HeomError> {
        check_step(gen, dt)?;
        let n = gen.rows() * batch;
        Ok(Propagator { gen, dt, field: None, k: std::array::from_fn(|_| vec![ZERO; n]), tmp: vec![ZERO; n] })
    }

    /// Adds a time-dependent Hamiltonian term (full-density block only).
    pub fn with_field(mut self, field: &'a FieldFn<'a>) -> Result<Self, HeomError> {
        if !self.gen.block.is_full(self.gen.full_dim) {
            return Err(HeomError::FieldNeedsFullBlock);
        }
        self.field = Some(field);
        Ok(self)
    }

    fn eval(&self, t: f64, x: &[C64], out: &mut [C64], batch: usize) {
        self.gen.apply(x, out, batch);
        if let Some(f) = self.field {
            let m = f(t);
            self.gen.add_field(&m, x, out, batch);
        }
    }

    /// Advances `s` by one step.
    pub fn step(&mut self, s: &mut HierarchyState) {
        let (dt, b, t) = (self.dt, s.batch, s.time_fs);
        let mut k = std::mem::take(&mut self.k);
        let mut tmp = std::mem::take(&mut self.tmp);
        self.eval(t, &s.data, &mut k[0], b);
        axpy_into(&mut tmp, &s.data, &k[0], 0.5 * dt);
        self.eval(t + 0.5 * dt, &tmp, &mut k[1], b);
        axpy_into(&mut tmp, &s.data, &k[1], 0.5 * dt);
        self.eval(t + 0.5 * dt, &tmp, &mut k[2], b);
        axpy_into(&mut tmp, &s.data, &k[2], dt);
        self.eval(t + dt, &tmp, &mut k[3], b);
        let w = dt / 6.0;
        s.data.par_chunks_mut(4096).enumerate().for_each(|(ci, chunk)| {
            let o = ci * 4096;
            for (i, v) in chunk.iter_mut().enumerate() {
                let g = o + i;
                *v += (k[0][g] + (k[1][g] + k[2][g]) * 2.0 + k[3][g]) * w;
            }
        });
        s.time_fs = t + dt;
        self.k = k;
        self.tmp = tmp;
    }

    /// Takes `n` steps, failing if non-finite values appear.
    pub fn advance(&mut self, s: &mut HierarchyState, n: usize) -> Result<(), HeomError> {
        let t0 = s.time_fs;
        for _ in 0..n {
            self.step(s);
        }
        if !s.is_finite() {
            return Err(HeomError::NonFinite { last_good_fs: t0 });
        }
        Ok(())
    }
}

fn as_f64(x: &[C64]) -> &[f64] {
    // SAFETY: Complex<f64> is repr(C) with two f64 fields.
    unsafe { std::slice::from_raw_parts(x.as_ptr() as *const f64, 2 * x.len()) }
}

fn as_f64_mut(x: &mut [C64]) -> &mut [f64] {
    // SAFETY: as above.
    unsafe { std::slice::from_raw_parts_mut(x.as_mut_ptr() as *mut f64, 2 * x.len()) }
}

fn axpy_into(out: &mut [C64], x: &[C64], y: &[C64], a: f64) {
    out.par_chunks_mut(4096).enumerate().for_each(|(ci, chunk)| {
        let o = ci * 4096;
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = x[o + i] + y[o + i] * a;
        }
    });
}

/// Steps per sample for a sampling interval that must be a multiple of dt.
pub fn steps_per_sample(sample_fs: f64, dt: f64) -> Result<usize, HeomError> {
    let n = (sample_fs / dt).round();
    if n < 1.0 || ((n * dt) - sample_fs).abs() > 1e-9 * sample_fs.max(1.0) {
        return Err(HeomError::TimeSpan(format!("sample interval {sample_fs} fs is not a multiple of dt = {dt} fs")));
    }
    Ok(n as usize)
}

/// Conservation diagnostics accumulated along a density-operator trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_trace_drift: f64,
    pub max_hermiticity_defect: f64,
}

/// Propagates `s0` and returns states at `n_samples` times spaced by `sample_fs`
/// (the first sample is `s0` itself), with conservation diagnostics for
/// full-density inputs.
pub fn propagate(
    gen: &BlockGenerator,
    s0: &HierarchyState,
    dt: f64,
    sample_fs: f64,
    n_samples: usize,
    field: Option<&FieldFn<'_>>,
) -> Result<(Vec<HierarchyState>, Diagnostics), HeomError> {
    if s0.block != gen.block {
        return Err(HeomError::BlockMismatch);
    }
    let per = if n_samples > 1 { steps_per_sample(sample_fs, dt)? } else { 1 };
    let mut prop = Propagator::new(gen, dt, s0.batch)?;
    if let Some(f) = field {
        prop = prop.with_field(f)?;
    }
    let mut s = s0.clone();
    let full = s.block.is_full(gen.full_dim);
    let tr0: Vec<C64> = (0..s.batch).map(|b| s.trace(b)).collect();
    let mut diag = Diagnostics::default();
    let mut out = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        if k > 0 {
            prop.advance(&mut s, per)?;
        }
        if full {
            for b in 0..s.batch {
                diag.max_trace_drift = diag.max_trace_drift.max((s.trace(b) - tr0[b]).norm());
                diag.max_hermiticity_defect = diag.max_hermiticity_defect.max(s.hermiticity_defect(b));
            }
        }
        out.push(s.clone());
    }
    Ok((out, diag))
}

/// Populations of `rho` in the eigenbasis of the single-excitation manifold.
pub fn exciton_populations(model: &VibronicModel, rho: &DMatrix<C64>) -> Vec<f64> {
    let r = model.manifold_range(Manifold::Single);
    let b = crate::model::diagonalize_manifold(model, Manifold::Single).expect("single manifold");
    let sub = rho.view((r.start, r.start), (r.len(), r.len())).into_owned();
    let v = b.eigenvectors.map(|x| C64::new(x, 0.0));
    let ex = v.transpose() * sub * &v;
    (0..ex.nrows()).map(|k| ex[(k, k)].re).collect()
}
