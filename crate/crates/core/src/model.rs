//! Electronic and vibronic Hamiltonians of coupled chromophore aggregates.
//!
//! Sites are two-level chromophores. The full electronic basis is ordered by
//! manifold: the global ground state `|g⟩`, the N singly excited site states
//! `|e_k⟩`, then the doubly excited states `|e_k e_l⟩` (k < l) in
//! lexicographic order. All Hamiltonian blocks are real symmetric in this
//! site basis, and every bath coupling operator `σ_k†σ_k` is diagonal in it.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("aggregate needs at least one site")]
    Empty,
    #[error("{what}: expected {expected} entries, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("coupling matrix not symmetric at ({row}, {col}): {a} vs {b}")]
    NonSymmetricCoupling { row: usize, col: usize, a: f64, b: f64 },
    #[error("coupling matrix diagonal must be zero (site {0})")]
    NonzeroDiagonal(usize),
    #[error("invalid underdamped mode on site {site}: {reason}")]
    InvalidMode { site: usize, reason: &'static str },
    #[error("manifolds {lower:?} and {upper:?} are not adjacent")]
    NonAdjacent { lower: Manifold, upper: Manifold },
    #[error("manifold {0:?} is empty for this aggregate")]
    EmptyManifold(Manifold),
    #[error("vibrational truncation must be at least 1")]
    Truncation,
}

/// Electronic parameters of an N-site aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParameters {
    pub site_energies_cm1: Vec<f64>,
    /// Symmetric N×N matrix with zero diagonal.
    pub couplings_cm1: Vec<Vec<f64>>,
    /// Scalar transition dipoles (parallel dipoles; signs allowed).
    pub dipoles: Vec<f64>,
}

impl SiteParameters {
    /// Dimer with the given site energies, coupling and unit parallel dipoles.
    pub fn dimer(e1: f64, e2: f64, j12: f64) -> Self {
        Self {
            site_energies_cm1: vec![e1, e2],
            couplings_cm1: vec![vec![0.0, j12], vec![j12, 0.0]],
            dipoles: vec![1.0, 1.0],
        }
    }

    pub fn monomer(e: f64) -> Self {
        Self {
            site_energies_cm1: vec![e],
            couplings_cm1: vec![vec![0.0]],
            dipoles: vec![1.0],
        }
    }

    pub fn n_sites(&self) -> usize {
        self.site_energies_cm1.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_sites();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        if self.dipoles.len() != n {
            return Err(ModelError::DimensionMismatch {
                what: "dipoles",
                expected: n,
                found: self.dipoles.len(),
            });
        }
        if self.couplings_cm1.len() != n {
            return Err(ModelError::DimensionMismatch {
                what: "coupling rows",
                expected: n,
                found: self.couplings_cm1.len(),
            });
        }
        for row in &self.couplings_cm1 {
            if row.len() != n {
                return Err(ModelError::DimensionMismatch {
                    what: "coupling columns",
                    expected: n,
                    found: row.len(),
                });
            }
        }
        for k in 0..n {
            if self.couplings_cm1[k][k] != 0.0 {
                return Err(ModelError::NonzeroDiagonal(k));
            }
            for l in (k + 1)..n {
                let (a, b) = (self.couplings_cm1[k][l], self.couplings_cm1[l][k]);
                if a != b {
                    return Err(ModelError::NonSymmetricCoupling { row: k, col: l, a, b });
                }
            }
        }
        Ok(())
    }
}

/// Underdamped intramolecular mode coupled linearly to one site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnderdampedMode {
    pub frequency_cm1: f64,
    pub huang_rhys: f64,
    /// Inverse friction 1/γ of the Brownian oscillator (energy relaxation time).
    pub damping_time_fs: f64,
}

impl UnderdampedMode {
    /// Reorganization energy S·ν.
    pub fn reorganization_cm1(&self) -> f64 {
        self.huang_rhys * self.frequency_cm1
    }

    fn validate(&self, site: usize) -> Result<(), ModelError> {
        if !(self.frequency_cm1 > 0.0) {
            return Err(ModelError::InvalidMode { site, reason: "frequency must be positive" });
        }
        if !(self.huang_rhys >= 0.0) {
            return Err(ModelError::InvalidMode { site, reason: "Huang-Rhys factor must be non-negative" });
        }
        if !(self.damping_time_fs > 0.0) {
            return Err(ModelError::InvalidMode { site, reason: "damping time must be positive" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Manifold {
    Ground,
    Single,
    Double,
}

impl Manifold {
    pub const ALL: [Manifold; 3] = [Manifold::Ground, Manifold::Single, Manifold::Double];

    pub fn index(self) -> usize {
        match self {
            Manifold::Ground => 0,
            Manifold::Single => 1,
            Manifold::Double => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Manifold> {
        Manifold::ALL.get(i).copied()
    }
}

/// Electronic basis state: the set of excited sites (sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElectronicState(pub Vec<usize>);

/// Electronic aggregate together with its per-site underdamped modes.
#[derive(Debug, Clone)]
pub struct VibronicModel {
    pub params: SiteParameters,
    pub modes: Vec<Vec<UnderdampedMode>>,
    states: Vec<ElectronicState>,
    ranges: [Range<usize>; 3],
    hamiltonian: DMatrix<f64>,
    raising: DMatrix<f64>,
}

/// Builds the aggregate Hamiltonian and dipole operator.
///
/// `modes` holds one (possibly empty) list per site; pass an empty vector for
/// a purely electronic model.
pub fn build_model(
    params: SiteParameters,
    modes: Vec<Vec<UnderdampedMode>>,
) -> Result<VibronicModel, ModelError> {
    params.validate()?;
    let n = params.n_sites();
    let modes = if modes.is_empty() { vec![Vec::new(); n] } else { modes };
    if modes.len() != n {
        return Err(ModelError::DimensionMismatch {
            what: "mode lists",
            expected: n,
            found: modes.len(),
        });
    }
    for (site, list) in modes.iter().enumerate() {
        for m in list {
            m.validate(site)?;
        }
    }

    let mut states = vec![ElectronicState(vec![])];
    for k in 0..n {
        states.push(ElectronicState(vec![k]));
    }
    for k in 0..n {
        for l in (k + 1)..n {
            states.push(ElectronicState(vec![k, l]));
        }
    }
    let n_double = n * n.saturating_sub(1) / 2;
    let ranges = [0..1, 1..1 + n, 1 + n..1 + n + n_double];
    let d = states.len();

    let mut h = DMatrix::<f64>::zeros(d, d);
    for (a, sa) in states.iter().enumerate() {
        h[(a, a)] = sa.0.iter().map(|&k| params.site_energies_cm1[k]).sum();
        for (b, sb) in states.iter().enumerate() {
            if a == b || sa.0.len() != sb.0.len() {
                continue;
            }
            // Hopping σ_k†σ_l: the two states differ by exactly one site.
            let only_a: Vec<usize> = sa.0.iter().copied().filter(|k| !sb.0.contains(k)).collect();
            let only_b: Vec<usize> = sb.0.iter().copied().filter(|k| !sa.0.contains(k)).collect();
            if only_a.len() == 1 && only_b.len() == 1 {
                h[(a, b)] = params.couplings_cm1[only_a[0]][only_b[0]];
            }
        }
    }

    let mut raising = DMatrix::<f64>::zeros(d, d);
    for (a, sa) in states.iter().enumerate() {
        for (b, sb) in states.iter().enumerate() {
            if sa.0.len() != sb.0.len() + 1 {
                continue;
            }
            let added: Vec<usize> = sa.0.iter().copied().filter(|k| !sb.0.contains(k)).collect();
            if added.len() == 1 && sb.0.iter().all(|k| sa.0.contains(k)) {
                raising[(a, b)] = params.dipoles[added[0]];
            }
        }
    }

    Ok(VibronicModel { params, modes, states, ranges, hamiltonian: h, raising })
}

impl VibronicModel {
    pub fn n_sites(&self) -> usize {
        self.params.n_sites()
    }

    /// Dimension of the full electronic basis.
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[ElectronicState] {
        &self.states
    }

    pub fn manifold_range(&self, m: Manifold) -> Range<usize> {
        self.ranges[m.index()].clone()
    }

    pub fn manifold_dim(&self, m: Manifold) -> usize {
        self.ranges[m.index()].len()
    }

    /// Number of non-empty manifolds (2 for a monomer, 3 otherwise).
    pub fn n_manifolds(&self) -> usize {
        Manifold::ALL.iter().filter(|&&m| self.manifold_dim(m) > 0).count()
    }

    /// Manifold containing basis index `i`.
    pub fn manifold_of(&self, i: usize) -> Manifold {
        Manifold::ALL
            .into_iter()
            .find(|m| self.ranges[m.index()].contains(&i))
            .expect("index inside basis")
    }

    /// Full block-diagonal electronic Hamiltonian (cm⁻¹).
    pub fn hamiltonian(&self) -> &DMatrix<f64> {
        &self.hamiltonian
    }

    pub fn hamiltonian_block(&self, m: Manifold) -> DMatrix<f64> {
        let r = self.manifold_range(m);
        self.hamiltonian.view((r.start, r.start), (r.len(), r.len())).into_owned()
    }

    /// Full raising part μ⁺ of the dipole operator (maps manifold m to m+1).
    pub fn dipole_raising(&self) -> &DMatrix<f64> {
        &self.raising
    }

    /// Diagonal of the site-k excitation projector σ_k†σ_k over the basis.
    pub fn site_projector(&self, k: usize) -> Vec<f64> {
        self.states.iter().map(|s| if s.0.contains(&k) { 1.0 } else { 0.0 }).collect()
    }

    /// Manifold index operator (number of excitations) over the basis.
    pub fn excitation_number(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.0.len() as f64).collect()
    }

    /// Mean of the site energies.
    pub fn mean_site_energy(&self) -> f64 {
        let e = &self.params.site_energies_cm1;
        e.iter().sum::<f64>() / e.len() as f64
    }
}

/// Eigen-decomposition of one electronic manifold.
#[derive(Debug, Clone)]
pub struct ManifoldBasis {
    pub manifold: Manifold,
    pub states: Vec<ElectronicState>,
    pub block: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column k is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: DMatrix<f64>,
}

/// Symmetric eigen-decomposition with ascending eigenvalues and a fixed sign
/// convention (largest-magnitude component of each vector positive).
pub(crate) fn sorted_eigh(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

pub fn diagonalize_manifold(model: &VibronicModel, manifold: Manifold) -> Result<ManifoldBasis, ModelError> {
    let r = model.manifold_range(manifold);
    if r.is_empty() {
        return Err(ModelError::EmptyManifold(manifold));
    }
    let block = model.hamiltonian_block(manifold);
    let (eigenvalues, eigenvectors) = sorted_eigh(&block);
    Ok(ManifoldBasis {
        manifold,
        states: model.states[r].to_vec(),
        block,
        eigenvalues,
        eigenvectors,
    })
}

/// Closed-form single-manifold eigenvalues of a dimer,
/// (E₁+E₂)/2 ∓ ½√(ΔE² + 4J²).
pub fn dimer_exciton_energies(e1: f64, e2: f64, j: f64) -> (f64, f64) {
    let mean = 0.5 * (e1 + e2);
    let half = 0.5 * ((e2 - e1).powi(2) + 4.0 * j * j).sqrt();
    (mean - half, mean + half)
}

/// Dimer mixing angle θ = ½·atan2(2J, ΔE).
pub fn dimer_mixing_angle(e1: f64, e2: f64, j: f64) -> f64 {
    0.5 * (2.0 * j).atan2(e2 - e1)
}

/// Transition-dipole operator between two adjacent manifolds.
#[derive(Debug, Clone)]
pub struct DipoleOperator {
    pub lower: Manifold,
    pub upper: Manifold,
    /// μ⁺: upper_dim × lower_dim.
    pub raising: DMatrix<f64>,
    /// μ⁻ = (μ⁺)†: lower_dim × upper_dim.
    pub lowering: DMatrix<f64>,
}

pub fn dipole_operators(model: &VibronicModel, lower: Manifold, upper: Manifold) -> Result<DipoleOperator, ModelError> {
    if upper.index() != lower.index() + 1 {
        return Err(ModelError::NonAdjacent { lower, upper });
    }
    for m in [lower, upper] {
        if model.manifold_dim(m) == 0 {
            return Err(ModelError::EmptyManifold(m));
        }
    }
    let (rl, ru) = (model.manifold_range(lower), model.manifold_range(upper));
    let raising = model.raising.view((ru.start, rl.start), (ru.len(), rl.len())).into_owned();
    let lowering = raising.transpose();
    Ok(DipoleOperator { lower, upper, raising, lowering })
}

impl DipoleOperator {
    /// μ⁺ expressed between eigenbases: `upper.eigenvectors^T · μ⁺ · lower.eigenvectors`.
    pub fn in_eigenbasis(&self, lower: &ManifoldBasis, upper: &ManifoldBasis) -> DMatrix<f64> {
        upper.eigenvectors.transpose() * &self.raising * &lower.eigenvectors
    }
}

/// Explicit-mode (analysis) Hamiltonian: electronic states ⊗ truncated
/// harmonic oscillators, one per underdamped mode, with linear coupling
/// √S·ν (b + b†) on the excited site that owns the mode.
#[derive(Debug, Clone)]
pub struct VibronicBasis {
    pub n_max: usize,
    /// (site, mode) for every explicit oscillator.
    pub mode_list: Vec<(usize, UnderdampedMode)>,
    pub n_vib: usize,
    pub manifolds: Vec<VibronicManifold>,
    pub convergence: VibronicConvergence,
}

#[derive(Debug, Clone)]
pub struct VibronicManifold {
    pub manifold: Manifold,
    /// Product-basis Hamiltonian (electronic index major, vibrational minor).
    pub hamiltonian: DMatrix<f64>,
    pub energies: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Shift of the lowest eigenvalues when the truncation is raised by one.
#[derive(Debug, Clone, PartialEq)]
pub struct VibronicConvergence {
    pub checked_levels: usize,
    pub max_shift_cm1: f64,
    /// Shift tolerance used: 1% of the smallest mode frequency.
    pub tolerance_cm1: f64,
    pub converged: bool,
}

fn vibronic_blocks(model: &VibronicModel, n_max: usize) -> (Vec<(usize, UnderdampedMode)>, usize, Vec<DMatrix<f64>>) {
    let mode_list: Vec<(usize, UnderdampedMode)> = model
        .modes
        .iter()
        .enumerate()
        .flat_map(|(s, ms)| ms.iter().map(move |m| (s, *m)))
        .collect();
    let nq = n_max + 1;
    let n_vib = nq.pow(mode_list.len() as u32);
    // occupation of mode i in vibrational configuration v
    let occ = |v: usize, i: usize| (v / nq.pow(i as u32)) % nq;

    let blocks = Manifold::ALL
        .iter()
        .map(|&m| {
            let r = model.manifold_range(m);
            let dim = r.len() * n_vib;
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            for (a, ia) in r.clone().enumerate() {
                for (b, ib) in r.clone().enumerate() {
                    let hel = model.hamiltonian[(ia, ib)];
                    if hel != 0.0 {
                        for v in 0..n_vib {
                            h[(a * n_vib + v, b * n_vib + v)] += hel;
                        }
                    }
                }
                let excited = &model.states[ia].0;
                for v in 0..n_vib {
                    let row = a * n_vib + v;
                    for (i, (site, mode)) in mode_list.iter().enumerate() {
                        let n = occ(v, i);
                        h[(row, row)] += mode.frequency_cm1 * n as f64;
                        if excited.contains(site) && n < n_max {
                            // ⟨n+1| b† |n⟩ = √(n+1)
                            let g = mode.huang_rhys.sqrt() * mode.frequency_cm1 * ((n + 1) as f64).sqrt();
                            let up = a * n_vib + v + nq.pow(i as u32);
                            h[(up, row)] += g;
                            h[(row, up)] += g;
                        }
                    }
                }
            }
            h
        })
        .collect();
    (mode_list, n_vib, blocks)
}

/// Builds and diagonalizes the explicit-mode Hamiltonian with `n_max` quanta
/// per mode. Convergence is checked against `n_max + 1` on the lowest
/// `2 × (electronic dim)` levels of every manifold; a failed check is reported
/// in [`VibronicBasis::convergence`], not as an error.
pub fn build_vibronic_basis(model: &VibronicModel, n_max: usize) -> Result<VibronicBasis, ModelError> {
    if n_max < 1 {
        return Err(ModelError::Truncation);
    }
    let (mode_list, n_vib, blocks) = vibronic_blocks(model, n_max);
    let manifolds: Vec<VibronicManifold> = Manifold::ALL
        .iter()
        .zip(blocks)
        .map(|(&m, h)| {
            let (energies, eigenvectors) = sorted_eigh(&h);
            VibronicManifold { manifold: m, hamiltonian: h, energies, eigenvectors }
        })
        .collect();

    let nu_min = mode_list.iter().map(|(_, m)| m.frequency_cm1).fold(f64::INFINITY, f64::min);
    let convergence = if mode_list.is_empty() {
        VibronicConvergence { checked_levels: 0, max_shift_cm1: 0.0, tolerance_cm1: 0.0, converged: true }
    } else {
        let (_, _, bigger) = vibronic_blocks(model, n_max + 1);
        let mut max_shift = 0.0f64;
        let mut checked = 0;
        for (vm, hb) in manifolds.iter().zip(bigger) {
            let count = (2 * model.manifold_dim(vm.manifold)).min(vm.energies.len());
            if count == 0 {
                continue;
            }
            let (eb, _) = sorted_eigh(&hb);
            for k in 0..count {
                max_shift = max_shift.max((eb[k] - vm.energies[k]).abs());
            }
            checked += count;
        }
        let tol = 0.01 * nu_min;
        VibronicConvergence { checked_levels: checked, max_shift_cm1: max_shift, tolerance_cm1: tol, converged: max_shift <= tol }
    };

    Ok(VibronicBasis { n_max, mode_list, n_vib, manifolds, convergence })
}

impl VibronicBasis {
    pub fn manifold(&self, m: Manifold) -> &VibronicManifold {
        &self.manifolds[m.index()]
    }

    /// Ground-manifold levels |g,n⟩ (ascending).
    pub fn ground_levels(&self) -> &[f64] {
        &self.manifold(Manifold::Ground).energies
    }

    /// Excited-manifold vibronic eigenenergies |ψ_k⟩ (ascending).
    pub fn excited_levels(&self) -> &[f64] {
        &self.manifold(Manifold::Single).energies
    }

    /// Condon dipole μ⁺ ⊗ 1_vib between the eigenbases of two adjacent manifolds.
    pub fn transition_dipoles(&self, model: &VibronicModel, lower: Manifold, upper: Manifold) -> Result<DMatrix<f64>, ModelError> {
        let op = dipole_operators(model, lower, upper)?;
        let nv = self.n_vib;
        let (dl, du) = (op.raising.ncols(), op.raising.nrows());
        let mut product = DMatrix::<f64>::zeros(du * nv, dl * nv);
        for a in 0..du {
            for b in 0..dl {
                let mu = op.raising[(a, b)];
                if mu != 0.0 {
                    for v in 0..nv {
                        product[(a * nv + v, b * nv + v)] = mu;
                    }
                }
            }
        }
        let (lo, up) = (self.manifold(lower), self.manifold(upper));
        Ok(up.eigenvectors.transpose() * product * &lo.eigenvectors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn paper_dimer() -> VibronicModel {
        build_model(SiteParameters::dimer(17050.0, 17750.0, 200.0), vec![]).unwrap()
    }

    #[test]
    fn dimer_blocks() {
        let m = paper_dimer();
        assert_eq!(m.dim(), 4);
        let h1 = m.hamiltonian_block(Manifold::Single);
        assert_eq!(h1, DMatrix::from_row_slice(2, 2, &[17050.0, 200.0, 200.0, 17750.0]));
        let hf = m.hamiltonian_block(Manifold::Double);
        assert_eq!(hf[(0, 0)], 34800.0);
        assert_eq!(m.hamiltonian(), &m.hamiltonian().transpose());
    }

    #[test]
    fn monomer_manifolds() {
        let m = build_model(SiteParameters::monomer(17000.0), vec![]).unwrap();
        assert_eq!(
            [Manifold::Ground, Manifold::Single, Manifold::Double].map(|x| m.manifold_dim(x)),
            [1, 1, 0]
        );
        assert_eq!(m.n_manifolds(), 2);
        let d = dipole_operators(&m, Manifold::Ground, Manifold::Single).unwrap();
        assert_eq!(d.raising, DMatrix::from_element(1, 1, 1.0));
        assert!(dipole_operators(&m, Manifold::Single, Manifold::Double).is_err());
    }

    #[test]
    fn build_errors() {
        let mut p = SiteParameters::dimer(1.0, 2.0, 3.0);
        p.couplings_cm1[1][0] = 4.0;
        assert!(matches!(build_model(p, vec![]), Err(ModelError::NonSymmetricCoupling { .. })));
        let mut p = SiteParameters::dimer(1.0, 2.0, 3.0);
        p.dipoles.pop();
        assert!(matches!(build_model(p, vec![]), Err(ModelError::DimensionMismatch { .. })));
        let p = SiteParameters::dimer(1.0, 2.0, 3.0);
        assert!(matches!(build_model(p, vec![vec![]]), Err(ModelError::DimensionMismatch { .. })));
        let bad = UnderdampedMode { frequency_cm1: -1.0, huang_rhys: 0.1, damping_time_fs: 1.0 };
        let p = SiteParameters::monomer(1.0);
        assert!(matches!(build_model(p, vec![vec![bad]]), Err(ModelError::InvalidMode { .. })));
        assert!(matches!(
            dipole_operators(&paper_dimer(), Manifold::Ground, Manifold::Double),
            Err(ModelError::NonAdjacent { .. })
        ));
    }

    #[test]
    fn dimer_splitting_closed_form() {
        let m = paper_dimer();
        let b = diagonalize_manifold(&m, Manifold::Single).unwrap();
        let (e1, e2) = dimer_exciton_energies(17050.0, 17750.0, 200.0);
        assert_relative_eq!(b.eigenvalues[0], e1, max_relative = 1e-12);
        assert_relative_eq!(b.eigenvalues[1], e2, max_relative = 1e-12);
        assert_relative_eq!(e2 - e1, 806.225_774_829_855, max_relative = 1e-9);
        assert!((e1 - 16996.9).abs() < 0.05 && (e2 - 17803.1).abs() < 0.05);
        let theta = dimer_mixing_angle(17050.0, 17750.0, 200.0);
        assert!((theta - 0.25953).abs() < 1e-4);
        assert_relative_eq!(theta, 0.5 * (400.0f64 / 700.0).atan(), epsilon = 1e-15);
    }

    #[test]
    fn decoupled_dimer_is_local() {
        let m = build_model(SiteParameters::dimer(17050.0, 17750.0, 0.0), vec![]).unwrap();
        let b = diagonalize_manifold(&m, Manifold::Single).unwrap();
        assert_eq!(b.eigenvectors, DMatrix::identity(2, 2));
        assert_eq!(b.eigenvalues[1] - b.eigenvalues[0], 700.0);
    }

    #[test]
    fn exciton_transition_dipoles() {
        let m = paper_dimer();
        let g = diagonalize_manifold(&m, Manifold::Ground).unwrap();
        let s = diagonalize_manifold(&m, Manifold::Single).unwrap();
        let mu = dipole_operators(&m, Manifold::Ground, Manifold::Single).unwrap().in_eigenbasis(&g, &s);
        let th = dimer_mixing_angle(17050.0, 17750.0, 200.0);
        // J > 0: the lower exciton is the antisymmetric, weaker-absorbing combination
        assert_relative_eq!(mu[(0, 0)], th.cos() - th.sin(), epsilon = 1e-12);
        assert_relative_eq!(mu[(1, 0)], th.cos() + th.sin(), epsilon = 1e-12);

        // antiparallel dipoles, degenerate sites: one dark exciton
        let mut p = SiteParameters::dimer(17000.0, 17000.0, 200.0);
        p.dipoles = vec![1.0, -1.0];
        let m = build_model(p, vec![]).unwrap();
        let g = diagonalize_manifold(&m, Manifold::Ground).unwrap();
        let s = diagonalize_manifold(&m, Manifold::Single).unwrap();
        let mu = dipole_operators(&m, Manifold::Ground, Manifold::Single).unwrap().in_eigenbasis(&g, &s);
        let dark = mu.iter().filter(|x| x.abs() < 1e-12).count();
        assert_eq!(dark, 1);
    }

    #[test]
    fn eigen_residuals_trimer() {
        let p = SiteParameters {
            site_energies_cm1: vec![12000.0, 12150.0, 12400.0],
            couplings_cm1: vec![vec![0.0, -90.0, 5.0], vec![-90.0, 0.0, 30.0], vec![5.0, 30.0, 0.0]],
            dipoles: vec![1.0, -0.5, 0.8],
        };
        let m = build_model(p, vec![]).unwrap();
        for man in Manifold::ALL {
            let b = diagonalize_manifold(&m, man).unwrap();
            let norm = b.block.norm();
            let v = &b.eigenvectors;
            let unit = v.transpose() * v - DMatrix::identity(v.nrows(), v.nrows());
            assert!(unit.amax() < 1e-12);
            for k in 0..b.eigenvalues.len() {
                let r = &b.block * v.column(k) - v.column(k) * b.eigenvalues[k];
                assert!(r.norm() <= 1e-10 * norm);
            }
            let tr: f64 = b.eigenvalues.iter().sum();
            assert_relative_eq!(tr, b.block.trace(), max_relative = 1e-12);
        }
        assert_eq!(m.manifold_dim(Manifold::Double), 3);
        // |e0 e1⟩ couples to |e0 e2⟩ through J_12
        let r = m.manifold_range(Manifold::Double);
        assert_eq!(m.hamiltonian()[(r.start, r.start + 1)], 30.0);
    }

    #[test]
    fn vibronic_ground_ladder_and_product_limit() {
        let mode = UnderdampedMode { frequency_cm1: 800.0, huang_rhys: 0.0, damping_time_fs: 1000.0 };
        let m = build_model(SiteParameters::dimer(17050.0, 17750.0, 200.0), vec![vec![mode], vec![mode]]).unwrap();
        let vb = build_vibronic_basis(&m, 3).unwrap();
        assert_eq!(vb.n_vib, 16);
        assert_eq!(vb.manifold(Manifold::Single).energies.len(), 32);
        let (e1, e2) = dimer_exciton_energies(17050.0, 17750.0, 200.0);
        let mut expected: Vec<f64> = Vec::new();
        for e in [e1, e2] {
            for n1 in 0..4 {
                for n2 in 0..4 {
                    expected.push(e + 800.0 * (n1 + n2) as f64);
                }
            }
        }
        expected.sort_by(f64::total_cmp);
        for (a, b) in vb.excited_levels().iter().zip(&expected) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
        assert_eq!(vb.ground_levels()[0], 0.0);
    }

    #[test]
    fn displaced_monomer_levels() {
        let mode = UnderdampedMode { frequency_cm1: 800.0, huang_rhys: 0.05, damping_time_fs: 1000.0 };
        let m = build_model(SiteParameters::monomer(17000.0), vec![vec![mode]]).unwrap();
        let vb = build_vibronic_basis(&m, 8).unwrap();
        assert!(vb.convergence.converged);
        for n in 0..3 {
            assert!((vb.excited_levels()[n] - (17000.0 - 40.0 + 800.0 * n as f64)).abs() < 1e-3);
            assert!((vb.ground_levels()[n] - 800.0 * n as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn resonant_vibronic_mixing() {
        // |ε₁,1⟩ and |ε₂,0⟩ mix through ⟨ε₂|σ_k†σ_k|ε₁⟩ = ±sinθ·cosθ; the
        // effective 2×2 splitting is 2√S·ν·|sinθcosθ| per coupled mode, and
        // √2 larger when each site carries its own mode (antisymmetric combination).
        let mode = UnderdampedMode { frequency_cm1: 800.0, huang_rhys: 0.05, damping_time_fs: 1000.0 };
        let th = dimer_mixing_angle(17050.0, 17750.0, 200.0);
        let single = 2.0 * 0.05f64.sqrt() * 800.0 * (th.sin() * th.cos()).abs();
        // sinθcosθ = J/Δε₂₁ = 0.2481
        assert!((single - 88.76).abs() < 0.05, "{single}");

        let p = SiteParameters::dimer(17050.0, 17750.0, 200.0);
        let one = build_model(p.clone(), vec![vec![mode], vec![]]).unwrap();
        let vb = build_vibronic_basis(&one, 4).unwrap();
        let e = vb.excited_levels();
        assert!(((e[2] - e[1]) / single - 1.0).abs() < 0.1, "{}", e[2] - e[1]);

        let two = build_model(p, vec![vec![mode], vec![mode]]).unwrap();
        let vb = build_vibronic_basis(&two, 4).unwrap();
        assert!(vb.convergence.converged);
        let e = vb.excited_levels();
        // e[2] is the symmetric-mode replica of ε₁, which does not couple
        assert!(((e[3] - e[1]) / (std::f64::consts::SQRT_2 * single) - 1.0).abs() < 0.1, "{}", e[3] - e[1]);
    }
}
