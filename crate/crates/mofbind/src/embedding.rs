//! Wavefunction-in-wavefunction embedding: intrinsic-atomic-orbital (IAO)
//! fragmentation, bath construction (exact mean-field bath plus natural
//! orbitals from a cluster-local perturbative density, truncated at a
//! threshold eta), per-fragment correlated solves, and assembly of global
//! energies from fragment-projected amplitudes.
//!
//! The implementation covers restricted (closed-shell) references; the
//! iterative solvers run in spin-orbital form inside each cluster.

use crate::basis::{BasisError, BasisSet};
use crate::correlation::{CorrelationError, SoAmplitudes, SpinOrbitalSpace};
use crate::correlation::OrbitalWindow;
use crate::integrals::{cross_overlap, one_electron_integrals, Geometry, IntegralError, IntegralSet};
use crate::scf::{transform_eri, MeanFieldResult, MoIntegrals, MoTensor, SpinMode};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Entanglement cutoff on DMET singular values (applied to the squared
/// values, i.e. the eigenvalues of the fragment-projected occupied
/// overlap).
const DMET_SV_CUTOFF: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding requires a restricted (closed-shell) mean field")]
    UnrestrictedUnsupported,
    #[error("mean field is not converged")]
    NotConverged,
    #[error("rank deficiency in the orbital projection (smallest metric eigenvalue {0:.3e})")]
    RankDeficient(f64),
    #[error("bath threshold must be positive, got {0:.3e}; use the DMET-only mode for the large-threshold limit")]
    BadEta(f64),
    #[error("IAO {iao} on atom {atom} is not assigned to any fragment")]
    UnassignedIao { iao: usize, atom: usize },
    #[error("atom {0} appears in more than one fragment group")]
    DoublyAssignedAtom(usize),
    #[error("no solution supplied for fragment {0}")]
    MissingFragment(String),
    #[error("fragment {0} appears more than once in the solution set")]
    DuplicateFragment(String),
    #[error("solver failed on fragment {fragment}: {source}")]
    SolverFailure {
        fragment: String,
        source: CorrelationError,
    },
    #[error("high-level solver {0:?} is not available in this build; rerun with the low-level solver only")]
    HighLevelUnavailable(FragmentSolver),
    #[error("close-fragment set is empty but the high-level restriction is active")]
    EmptyCloseSet,
    #[error("thresholds must satisfy eta_high >= eta_low > 0, got {high:.3e} / {low:.3e}")]
    BadThresholds { high: f64, low: f64 },
    #[error("mixed solver kinds in one assembly: {0}")]
    MixedSolvers(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Integral(#[from] IntegralError),
}

/// Shared inputs for one embedding run: geometry, bases, AO integrals and
/// the converged restricted mean field, with the AO Fock and core
/// Hamiltonian cached.
pub struct EmbeddingProblem<'a> {
    pub geometry: &'a Geometry,
    pub basis: &'a BasisSet,
    pub integrals: &'a IntegralSet,
    pub mf: &'a MeanFieldResult,
    h_ao: DMatrix<f64>,
    fock_ao: DMatrix<f64>,
}

impl<'a> EmbeddingProblem<'a> {
    pub fn new(
        geometry: &'a Geometry,
        basis: &'a BasisSet,
        integrals: &'a IntegralSet,
        mf: &'a MeanFieldResult,
    ) -> Result<Self, EmbeddingError> {
        if mf.mode != SpinMode::Restricted {
            return Err(EmbeddingError::UnrestrictedUnsupported);
        }
        if !mf.converged {
            return Err(EmbeddingError::NotConverged);
        }
        let h_ao = &integrals.t + &integrals.v;
        // Build the AO Fock matrix from the converged density rather than
        // from the orbital eigenvalues: the eigenvalues belong to the
        // extrapolated Fock of the final iteration, which differs from
        // F[D] at the residual-tolerance level, while the density-built
        // Fock satisfies the mean-field trace identities exactly.
        let c = &mf.coefficients[0];
        let c_occ = c.columns(0, mf.n_occ[0]).into_owned();
        let d = &c_occ * c_occ.transpose();
        let j = crate::scf::coulomb(&integrals.eri, &d);
        let k = crate::scf::exchange(&integrals.eri, &d);
        let fock_ao = &h_ao + 2.0 * j - k;
        Ok(EmbeddingProblem {
            geometry,
            basis,
            integrals,
            mf,
            h_ao,
            fock_ao,
        })
    }

    fn n_occ(&self) -> usize {
        self.mf.n_occ[0]
    }

    fn c_occ(&self) -> DMatrix<f64> {
        self.mf.coefficients[0].columns(0, self.n_occ()).into_owned()
    }

    fn c_vir(&self) -> DMatrix<f64> {
        let n = self.integrals.n;
        let o = self.n_occ();
        self.mf.coefficients[0].columns(o, n - o).into_owned()
    }
}

/// Symmetrically orthogonalize the columns of `m` with respect to metric
/// `s`; errors on rank deficiency.
fn orthogonalize(m: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>, EmbeddingError> {
    let gram = m.transpose() * s * m;
    let (vals, vecs) = crate::linalg::sym_eig(&gram);
    let smallest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if smallest < 1e-10 {
        return Err(EmbeddingError::RankDeficient(smallest));
    }
    let inv_sqrt = DMatrix::from_diagonal(&vals.map(|x| x.powf(-0.5)));
    Ok(m * &vecs * inv_sqrt * vecs.transpose())
}

/// One orthonormal intrinsic atomic orbital per minimal-basis function,
/// with the owning atom recorded per orbital.
#[derive(Debug, Clone)]
pub struct IaoSet {
    /// AO-basis coefficients, one column per IAO; S-orthonormal.
    pub coefficients: DMatrix<f64>,
    pub owner_atom: Vec<usize>,
}

/// Build the IAO set from the converged mean field and a minimal
/// reference basis. The occupied mean-field subspace is contained exactly
/// in the IAO span.
pub fn build_iaos(
    problem: &EmbeddingProblem,
    minimal: &BasisSet,
) -> Result<IaoSet, EmbeddingError> {
    let s1 = &problem.integrals.s;
    let (s2, _, _) = one_electron_integrals(problem.geometry, minimal)?;
    let s12 = cross_overlap(problem.geometry, problem.basis, minimal)?;
    let n = s1.nrows();

    let inv = |m: &DMatrix<f64>| -> Result<DMatrix<f64>, EmbeddingError> {
        let (vals, vecs) = crate::linalg::sym_eig(m);
        let smallest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if smallest < 1e-10 {
            return Err(EmbeddingError::RankDeficient(smallest));
        }
        let d = DMatrix::from_diagonal(&vals.map(|x| 1.0 / x));
        Ok(&vecs * d * vecs.transpose())
    };
    let s1_inv = inv(s1)?;
    let s2_inv = inv(&s2)?;

    let p12 = &s1_inv * &s12; // n x n_min
    let c_occ = problem.c_occ();
    // Occupied orbitals "depolarized" through the minimal basis.
    let c_tilde = orthogonalize(&(&p12 * (&s2_inv * s12.transpose()) * &c_occ), s1)?;
    let proj_occ = &c_occ * c_occ.transpose() * s1;
    let proj_tilde = &c_tilde * c_tilde.transpose() * s1;
    let eye = DMatrix::identity(n, n);
    let a_raw = &proj_occ * &proj_tilde * &p12 + (&eye - &proj_occ) * (&eye - &proj_tilde) * &p12;
    let coefficients = orthogonalize(&a_raw, s1)?;

    // Minimal-basis functions (and therefore IAOs) are laid out atom by
    // atom in geometry order.
    let mut owner_atom = Vec::with_capacity(coefficients.ncols());
    for (atom, (element, _)) in problem.geometry.iter().enumerate() {
        let count: usize = minimal
            .shells_for(*element)?
            .iter()
            .map(|sh| sh.n_functions())
            .sum();
        owner_atom.extend(std::iter::repeat(atom).take(count));
    }
    debug_assert_eq!(owner_atom.len(), coefficients.ncols());
    Ok(IaoSet {
        coefficients,
        owner_atom,
    })
}

/// Orthonormal fragment subspace: the IAOs of one atom group.
#[derive(Debug, Clone)]
pub struct FragmentSpace {
    pub atoms: Vec<usize>,
    pub label: String,
    /// AO-basis coefficients, S-orthonormal columns.
    pub coefficients: DMatrix<f64>,
}

/// One singleton group per atom: the default atomic fragmentation.
pub fn atomic_partition(n_atoms: usize) -> Vec<Vec<usize>> {
    (0..n_atoms).map(|a| vec![a]).collect()
}

/// Group the IAOs into fragment spaces by atom membership. Every IAO must
/// be covered by exactly one group.
pub fn make_fragments(
    iaos: &IaoSet,
    atom_groups: &[Vec<usize>],
) -> Result<Vec<FragmentSpace>, EmbeddingError> {
    let mut seen = std::collections::BTreeSet::new();
    for group in atom_groups {
        for &a in group {
            if !seen.insert(a) {
                return Err(EmbeddingError::DoublyAssignedAtom(a));
            }
        }
    }
    for (iao, &atom) in iaos.owner_atom.iter().enumerate() {
        if !seen.contains(&atom) {
            return Err(EmbeddingError::UnassignedIao { iao, atom });
        }
    }
    let mut fragments = Vec::new();
    for group in atom_groups {
        let cols: Vec<usize> = iaos
            .owner_atom
            .iter()
            .enumerate()
            .filter(|(_, a)| group.contains(a))
            .map(|(i, _)| i)
            .collect();
        if cols.is_empty() {
            continue;
        }
        let mut coefficients = DMatrix::zeros(iaos.coefficients.nrows(), cols.len());
        for (k, &c) in cols.iter().enumerate() {
            coefficients.set_column(k, &iaos.coefficients.column(c));
        }
        let mut atoms = group.clone();
        atoms.sort_unstable();
        let label = format!(
            "frag-{}",
            atoms
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join("+")
        );
        fragments.push(FragmentSpace {
            atoms,
            label,
            coefficients,
        });
    }
    Ok(fragments)
}

/// Bath truncation mode: the documented large-threshold sentinel keeps the
/// exact mean-field (DMET) bath only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BathThreshold {
    DmetOnly,
    Bno(f64),
}

impl std::fmt::Display for BathThreshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BathThreshold::DmetOnly => write!(f, "dmet-only"),
            BathThreshold::Bno(eta) => write!(f, "{eta:.1e}"),
        }
    }
}

/// Fragment plus bath: the space a correlated solver runs in, with its
/// effective integrals and the fragment projector over the cluster
/// occupied orbitals.
#[derive(Debug, Clone)]
pub struct FragmentCluster {
    pub label: String,
    pub atoms: Vec<usize>,
    pub threshold: BathThreshold,
    pub n_fragment: usize,
    pub n_dmet_bath: usize,
    pub n_bno_occ: usize,
    pub n_bno_vir: usize,
    /// Semicanonical cluster orbitals in the AO basis.
    pub c_occ: DMatrix<f64>,
    pub c_vir: DMatrix<f64>,
    pub eps_occ: Vec<f64>,
    pub eps_vir: Vec<f64>,
    /// Chemists'-notation two-electron integrals over [occ | vir].
    pub eri: MoTensor,
    /// Bare one-electron operator in the cluster basis.
    pub h_bare: DMatrix<f64>,
    /// Fock operator in the cluster basis (block diagonal).
    pub fock: DMatrix<f64>,
    /// Fragment projector over the cluster occupied orbitals.
    pub projector_occ: DMatrix<f64>,
}

impl FragmentCluster {
    pub fn n_occ(&self) -> usize {
        self.c_occ.ncols()
    }

    pub fn n_vir(&self) -> usize {
        self.c_vir.ncols()
    }

    pub fn bath_size(&self) -> usize {
        self.n_dmet_bath + self.n_bno_occ + self.n_bno_vir
    }
}

/// Rotate the columns of `c` so the Fock operator is diagonal within
/// their span; returns the rotated orbitals and the diagonal values in
/// ascending order.
fn semicanonicalize(c: &DMatrix<f64>, fock_ao: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    if c.ncols() == 0 {
        return (c.clone(), Vec::new());
    }
    let block = c.transpose() * fock_ao * c;
    let (vals, rot) = crate::linalg::sym_eig(&block);
    (c * rot, vals.iter().cloned().collect())
}

/// Orthonormal complement of the columns of `sub` inside the span of
/// `full` (both S-orthonormal AO coefficient sets); the result is
/// expressed in the coordinates of `full`'s columns.
fn complement_in(
    full: &DMatrix<f64>,
    sub: &DMatrix<f64>,
    s: &DMatrix<f64>,
) -> DMatrix<f64> {
    let nf = full.ncols();
    if sub.ncols() == 0 {
        return DMatrix::identity(nf, nf);
    }
    let w = full.transpose() * s * sub; // nf x nsub
    let q = DMatrix::identity(nf, nf) - &w * w.transpose();
    let (vals, vecs) = crate::linalg::sym_eig(&q);
    let keep: Vec<usize> = (0..nf).filter(|&k| vals[k] > 0.5).collect();
    let mut out = DMatrix::zeros(nf, keep.len());
    for (col, &k) in keep.iter().enumerate() {
        out.set_column(col, &vecs.column(k));
    }
    out
}

/// Construct the fragment cluster: exact mean-field (DMET) bath from the
/// entangled occupied orbitals, optionally extended with natural orbitals
/// of a cluster-local MP2 density whose occupation weight is at least
/// `eta` (separately for the occupied and virtual environments).
pub fn build_bath(
    problem: &EmbeddingProblem,
    fragment: &FragmentSpace,
    threshold: BathThreshold,
) -> Result<FragmentCluster, EmbeddingError> {
    if let BathThreshold::Bno(eta) = threshold {
        if eta <= 0.0 {
            return Err(EmbeddingError::BadEta(eta));
        }
    }
    let s = &problem.integrals.s;
    let tau = DMET_SV_CUTOFF * DMET_SV_CUTOFF; // cutoff on squared singular values
    let a_x = &fragment.coefficients;
    let c_occ_full = problem.c_occ();
    let c_vir_full = problem.c_vir();
    let o = c_occ_full.ncols();

    // Entanglement spectrum of the occupied space with the fragment.
    let r = c_occ_full.transpose() * s * a_x; // o x nf
    let m = &r * r.transpose();
    let (m_vals, m_vecs) = crate::linalg::sym_eig(&m);
    let p_frag = a_x * a_x.transpose() * s;
    let mut bath_cols: Vec<DVector<f64>> = Vec::new();
    let mut n_entangled = 0;
    for k in 0..o {
        let lam = m_vals[k];
        if lam <= tau {
            continue;
        }
        n_entangled += 1;
        if lam < 1.0 - tau {
            // Environment part of this entangled occupied orbital.
            let u = &c_occ_full * m_vecs.column(k);
            let env = &u - &p_frag * &u;
            bath_cols.push(env / (1.0 - lam).sqrt());
        }
    }
    let n_dmet_bath = bath_cols.len();

    // Cluster one-particle space: fragment orbitals plus DMET bath
    // (already mutually S-orthonormal by construction).
    let n_ao = s.nrows();
    let n_cluster = a_x.ncols() + n_dmet_bath;
    let mut c_cluster = DMatrix::zeros(n_ao, n_cluster);
    for k in 0..a_x.ncols() {
        c_cluster.set_column(k, &a_x.column(k));
    }
    for (k, b) in bath_cols.iter().enumerate() {
        c_cluster.set_column(a_x.ncols() + k, b);
    }

    // Split the cluster space into occupied and virtual by the occupied
    // projector; eigenvalues are 0/1 because the entangled occupied
    // orbitals lie entirely inside the cluster.
    let d_occ = &c_occ_full * c_occ_full.transpose();
    let q = c_cluster.transpose() * s * &d_occ * s * &c_cluster;
    let (q_vals, q_vecs) = crate::linalg::sym_eig(&q);
    let mut occ_cols = Vec::new();
    let mut vir_cols = Vec::new();
    for k in 0..n_cluster {
        if q_vals[k] > 0.5 {
            occ_cols.push(k);
        } else {
            vir_cols.push(k);
        }
    }
    debug_assert_eq!(occ_cols.len(), n_entangled);
    let mut c_occ_dmet = DMatrix::zeros(n_ao, occ_cols.len());
    for (col, &k) in occ_cols.iter().enumerate() {
        c_occ_dmet.set_column(col, &(&c_cluster * q_vecs.column(k)));
    }
    let mut c_vir_dmet = DMatrix::zeros(n_ao, vir_cols.len());
    for (col, &k) in vir_cols.iter().enumerate() {
        c_vir_dmet.set_column(col, &(&c_cluster * q_vecs.column(k)));
    }

    // Natural-orbital bath extension.
    let (mut occ_set, mut n_bno_occ, mut n_bno_vir) = (c_occ_dmet.clone(), 0, 0);
    let mut vir_set = c_vir_dmet.clone();
    if let BathThreshold::Bno(eta) = threshold {
        // Environment bases expressed in canonical-orbital coordinates.
        let env_occ = complement_in(&c_occ_full, &c_occ_dmet, s);
        let env_vir = complement_in(&c_vir_full, &c_vir_dmet, s);

        // Occupied-environment natural orbitals: MP2 with all occupied
        // orbitals and the cluster virtuals.
        if env_occ.ncols() > 0 && c_vir_dmet.ncols() > 0 {
            let (c_vs, f_vs) = semicanonicalize(&c_vir_dmet, &problem.fock_ao);
            let d = mp2_occupied_density(problem, &c_occ_full, &c_vs, &f_vs);
            let d_env = env_occ.transpose() * d * &env_occ;
            let picked = pick_natural_orbitals(&d_env, eta);
            n_bno_occ = picked.ncols();
            if n_bno_occ > 0 {
                let add = &c_occ_full * (&env_occ * picked);
                occ_set = hcat(&occ_set, &add);
            }
        }
        // Virtual-environment natural orbitals: MP2 with the cluster
        // occupied orbitals and all virtuals.
        if env_vir.ncols() > 0 && c_occ_dmet.ncols() > 0 {
            let (c_os, f_os) = semicanonicalize(&c_occ_dmet, &problem.fock_ao);
            let d = mp2_virtual_density(problem, &c_os, &f_os, &c_vir_full);
            let d_env = env_vir.transpose() * d * &env_vir;
            let picked = pick_natural_orbitals(&d_env, eta);
            n_bno_vir = picked.ncols();
            if n_bno_vir > 0 {
                let add = &c_vir_full * (&env_vir * picked);
                vir_set = hcat(&vir_set, &add);
            }
        }
    }

    // Semicanonicalize the final spaces; occupied and virtual blocks do
    // not couple through the Fock operator because each lies entirely in
    // the corresponding canonical subspace.
    let (c_occ, eps_occ) = semicanonicalize(&occ_set, &problem.fock_ao);
    let (c_vir, eps_vir) = semicanonicalize(&vir_set, &problem.fock_ao);

    let c_all = hcat(&c_occ, &c_vir);
    let eri = transform_eri(&problem.integrals.eri, &c_all, &c_all);
    let h_bare = c_all.transpose() * &problem.h_ao * &c_all;
    let fock = c_all.transpose() * &problem.fock_ao * &c_all;
    let projector_occ = c_occ.transpose() * s * a_x * a_x.transpose() * s * &c_occ;

    Ok(FragmentCluster {
        label: fragment.label.clone(),
        atoms: fragment.atoms.clone(),
        threshold,
        n_fragment: a_x.ncols(),
        n_dmet_bath,
        n_bno_occ,
        n_bno_vir,
        c_occ,
        c_vir,
        eps_occ,
        eps_vir,
        eri,
        h_bare,
        fock,
        projector_occ,
    })
}

fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    for k in 0..a.ncols() {
        out.set_column(k, &a.column(k));
    }
    for k in 0..b.ncols() {
        out.set_column(a.ncols() + k, &b.column(k));
    }
    out
}

/// Eigenvectors of a symmetric density block with |occupation| >= eta,
/// as columns.
fn pick_natural_orbitals(d: &DMatrix<f64>, eta: f64) -> DMatrix<f64> {
    let (vals, vecs) = crate::linalg::sym_eig(d);
    let keep: Vec<usize> = (0..d.nrows())
        .filter(|&k| vals[k].abs() >= eta)
        .collect();
    let mut out = DMatrix::zeros(d.nrows(), keep.len());
    for (col, &k) in keep.iter().enumerate() {
        out.set_column(col, &vecs.column(k));
    }
    out
}

/// Closed-shell MP2 occupied-occupied correlation density over all
/// occupied orbitals, with virtuals restricted to the (semicanonical)
/// cluster virtual set.
fn mp2_occupied_density(
    problem: &EmbeddingProblem,
    c_occ: &DMatrix<f64>,
    c_vir_cluster: &DMatrix<f64>,
    f_vir: &[f64],
) -> DMatrix<f64> {
    let o = c_occ.ncols();
    let v = c_vir_cluster.ncols();
    let eps = &problem.mf.orbital_energies[0];
    let combined = hcat(c_occ, c_vir_cluster);
    let g = transform_eri(&problem.integrals.eri, &combined, &combined);
    // t[i,j,a,b] with occupied canonical, virtual semicanonical.
    let mut t = vec![0.0; o * o * v * v];
    for i in 0..o {
        for j in 0..o {
            for a in 0..v {
                for b in 0..v {
                    let iajb = g.get(i, o + a, j, o + b);
                    t[((i * o + j) * v + a) * v + b] =
                        iajb / (eps[i] + eps[j] - f_vir[a] - f_vir[b]);
                }
            }
        }
    }
    let mut d = DMatrix::zeros(o, o);
    for i in 0..o {
        for j in 0..o {
            let mut x = 0.0;
            for k in 0..o {
                for a in 0..v {
                    for b in 0..v {
                        let tik = t[((i * o + k) * v + a) * v + b];
                        let tjk = t[((j * o + k) * v + a) * v + b];
                        let tjk_x = t[((j * o + k) * v + b) * v + a];
                        x += tik * (2.0 * tjk - tjk_x);
                    }
                }
            }
            d[(i, j)] = 2.0 * x;
        }
    }
    d
}

/// Closed-shell MP2 virtual-virtual correlation density over all
/// virtuals, with occupied orbitals restricted to the (semicanonical)
/// cluster occupied set.
fn mp2_virtual_density(
    problem: &EmbeddingProblem,
    c_occ_cluster: &DMatrix<f64>,
    f_occ: &[f64],
    c_vir: &DMatrix<f64>,
) -> DMatrix<f64> {
    let o = c_occ_cluster.ncols();
    let v = c_vir.ncols();
    let n_occ = problem.n_occ();
    let eps = &problem.mf.orbital_energies[0];
    let combined = hcat(c_occ_cluster, c_vir);
    let g = transform_eri(&problem.integrals.eri, &combined, &combined);
    let mut t = vec![0.0; o * o * v * v];
    for i in 0..o {
        for j in 0..o {
            for a in 0..v {
                for b in 0..v {
                    let iajb = g.get(i, o + a, j, o + b);
                    t[((i * o + j) * v + a) * v + b] =
                        iajb / (f_occ[i] + f_occ[j] - eps[n_occ + a] - eps[n_occ + b]);
                }
            }
        }
    }
    let mut d = DMatrix::zeros(v, v);
    for a in 0..v {
        for b in 0..v {
            let mut x = 0.0;
            for i in 0..o {
                for j in 0..o {
                    for c in 0..v {
                        let tia = t[((i * o + j) * v + a) * v + c];
                        let tib = t[((i * o + j) * v + b) * v + c];
                        let tib_x = t[((i * o + j) * v + c) * v + b];
                        x += tia * (2.0 * tib - tib_x);
                    }
                }
            }
            d[(a, b)] = 2.0 * x;
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragmentSolver {
    /// One-body mean-field evaluation; used for the exact-bath consistency
    /// check and partitioned Hartree-Fock energies.
    MeanField,
    Mp2,
    Ccsd,
    Fci,
}

impl std::fmt::Display for FragmentSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FragmentSolver::MeanField => "mean-field",
            FragmentSolver::Mp2 => "mp2",
            FragmentSolver::Ccsd => "ccsd",
            FragmentSolver::Fci => "fci",
        };
        write!(f, "{s}")
    }
}

/// Result of one fragment solve: the projected energy contribution plus
/// diagnostics.
#[derive(Debug, Clone)]
pub struct FragmentSolution {
    pub label: String,
    pub solver: FragmentSolver,
    pub threshold: BathThreshold,
    /// Fragment-projected energy contribution (hartree). Correlation
    /// contribution for correlated solvers; one-body electronic energy
    /// share for the mean-field solver.
    pub contribution: f64,
    /// Unprojected in-cluster correlation energy (0 for mean-field).
    pub cluster_correlation: f64,
    pub n_occ: usize,
    pub n_vir: usize,
    pub n_dmet_bath: usize,
    pub n_bno_occ: usize,
    pub n_bno_vir: usize,
}

/// Spin-orbital problem for a cluster: restricted duplication of the
/// spatial cluster orbitals with the effective one-electron operator
/// h = F - v_HF[gamma_cluster].
fn cluster_space(cluster: &FragmentCluster) -> SpinOrbitalSpace {
    let no = cluster.n_occ();
    let nv = cluster.n_vir();
    let n = no + nv;
    // Effective bare Hamiltonian consistent with the cluster Fock and the
    // cluster's own occupied density.
    let mut h_eff = cluster.fock.clone();
    for p in 0..n {
        for q in 0..n {
            let mut v_hf = 0.0;
            for i in 0..no {
                v_hf += 2.0 * cluster.eri.get(p, q, i, i) - cluster.eri.get(p, i, i, q);
            }
            h_eff[(p, q)] -= v_hf;
        }
    }
    let mut eps = DVector::zeros(n);
    for (k, &e) in cluster.eps_occ.iter().chain(cluster.eps_vir.iter()).enumerate() {
        eps[k] = e;
    }
    let mo = MoIntegrals {
        mode: SpinMode::Restricted,
        h: vec![h_eff],
        orbital_energies: vec![eps],
        blocks: vec![cluster.eri.clone()],
        n,
        n_occ: [no, no],
    };
    let window = OrbitalWindow::full(&mo);
    SpinOrbitalSpace::from_mo(&mo, &window).expect("full cluster window is always valid")
}

/// Fragment-projected correlation energy: the symmetrized fragment
/// projector applied to the first occupied index of the effective doubles
/// (T2 plus disconnected singles), contracted with the antisymmetrized
/// integrals.
fn projected_energy(cluster: &FragmentCluster, space: &SpinOrbitalSpace, amps: &SoAmplitudes) -> f64 {
    let no = cluster.n_occ();
    let o = space.n_occ; // = 2 * no
    let v = space.n - o;
    let p = &cluster.projector_occ;
    // Spin-orbital projector: block diagonal over the two spin channels.
    let proj = |i: usize, j: usize| -> f64 {
        let (si, sj) = (i / no, j / no);
        if si != sj {
            0.0
        } else {
            p[(i % no, j % no)]
        }
    };
    let t2i = |i: usize, j: usize, a: usize, b: usize| ((i * o + j) * v + a) * v + b;
    let t1i = |i: usize, a: usize| i * v + a;
    let tau = |i: usize, j: usize, a: usize, b: usize| -> f64 {
        amps.t2[t2i(i, j, a, b)] + amps.t1[t1i(i, a)] * amps.t1[t1i(j, b)]
            - amps.t1[t1i(i, b)] * amps.t1[t1i(j, a)]
    };
    let mut e = 0.0;
    for i in 0..o {
        for j in 0..o {
            for a in 0..v {
                for b in 0..v {
                    let g = space.g(i, j, o + a, o + b);
                    let mut projected = 0.0;
                    for k in 0..o {
                        projected += 0.5 * (proj(i, k) * tau(k, j, a, b) + proj(j, k) * tau(i, k, a, b));
                    }
                    e += 0.25 * projected * g;
                }
            }
        }
    }
    e
}

/// Run the requested solver in the cluster and project its energy onto
/// the fragment.
pub fn solve_fragment(
    cluster: &FragmentCluster,
    solver: FragmentSolver,
) -> Result<FragmentSolution, EmbeddingError> {
    let (contribution, cluster_correlation) = match solver {
        FragmentSolver::MeanField => {
            // One-body share: Tr[P (h + F)] over the cluster occupied
            // block (closed-shell density 2 per orbital folds into the
            // 1/2 prefactor of the trace energy expression).
            let no = cluster.n_occ();
            let hpf = &cluster.h_bare + &cluster.fock;
            let mut e = 0.0;
            for i in 0..no {
                for j in 0..no {
                    e += cluster.projector_occ[(i, j)] * hpf[(j, i)];
                }
            }
            (e, 0.0)
        }
        _ => {
            let space = cluster_space(cluster);
            let amps = match solver {
                FragmentSolver::Mp2 => space.mp2(),
                #[cfg(feature = "ccsd")]
                FragmentSolver::Ccsd => space.ccsd(200, 1e-10).map_err(|source| {
                    EmbeddingError::SolverFailure {
                        fragment: cluster.label.clone(),
                        source,
                    }
                })?,
                #[cfg(not(feature = "ccsd"))]
                FragmentSolver::Ccsd => {
                    return Err(EmbeddingError::HighLevelUnavailable(FragmentSolver::Ccsd))
                }
                FragmentSolver::Fci => space.fci_amplitudes().map_err(|source| {
                    EmbeddingError::SolverFailure {
                        fragment: cluster.label.clone(),
                        source,
                    }
                })?,
                FragmentSolver::MeanField => unreachable!(),
            };
            (projected_energy(cluster, &space, &amps), amps.energy)
        }
    };
    Ok(FragmentSolution {
        label: cluster.label.clone(),
        solver,
        threshold: cluster.threshold,
        contribution,
        cluster_correlation,
        n_occ: cluster.n_occ(),
        n_vir: cluster.n_vir(),
        n_dmet_bath: cluster.n_dmet_bath,
        n_bno_occ: cluster.n_bno_occ,
        n_bno_vir: cluster.n_bno_vir,
    })
}

fn check_one_per_fragment(
    solutions: &[FragmentSolution],
    fragments: &[FragmentSpace],
) -> Result<(), EmbeddingError> {
    let mut counts = std::collections::BTreeMap::new();
    for s in solutions {
        *counts.entry(s.label.clone()).or_insert(0usize) += 1;
    }
    for f in fragments {
        match counts.get(&f.label) {
            None => return Err(EmbeddingError::MissingFragment(f.label.clone())),
            Some(&c) if c > 1 => return Err(EmbeddingError::DuplicateFragment(f.label.clone())),
            _ => {}
        }
    }
    Ok(())
}

/// Total energy from correlated fragment solutions:
/// E = E_mean-field + sum of projected contributions.
pub fn assemble_global_energy(
    solutions: &[FragmentSolution],
    fragments: &[FragmentSpace],
    mean_field_energy: f64,
) -> Result<f64, EmbeddingError> {
    check_one_per_fragment(solutions, fragments)?;
    if solutions.iter().any(|s| s.solver == FragmentSolver::MeanField) {
        return Err(EmbeddingError::MixedSolvers(
            "mean-field solutions must be assembled with assemble_mean_field_energy".into(),
        ));
    }
    Ok(mean_field_energy + solutions.iter().map(|s| s.contribution).sum::<f64>())
}

/// Total mean-field energy reassembled from one-body fragment shares plus
/// the nuclear repulsion; with the exact (DMET) bath this reproduces the
/// SCF total energy.
pub fn assemble_mean_field_energy(
    solutions: &[FragmentSolution],
    fragments: &[FragmentSpace],
    nuclear_repulsion: f64,
) -> Result<f64, EmbeddingError> {
    check_one_per_fragment(solutions, fragments)?;
    if solutions.iter().any(|s| s.solver != FragmentSolver::MeanField) {
        return Err(EmbeddingError::MixedSolvers(
            "expected mean-field solutions only".into(),
        ));
    }
    Ok(nuclear_repulsion + solutions.iter().map(|s| s.contribution).sum::<f64>())
}

/// Multi-level composition settings. Defaults follow the reference
/// protocol: coupled cluster at eta = 1e-5 on the close fragments, MP2 at
/// eta = 1e-7 everywhere.
#[derive(Debug, Clone)]
pub struct MultiLevelSpec {
    pub eta_high: f64,
    pub eta_low: f64,
    pub high_solver: FragmentSolver,
    pub low_solver: FragmentSolver,
    /// Atoms whose fragments get the high-level treatment.
    pub close_atoms: Vec<usize>,
    /// When set, the subtracted low-level term at eta_high runs over all
    /// fragments instead of only the close ones (the alternative reading
    /// of the composition formula).
    pub bracket_over_all: bool,
}

impl Default for MultiLevelSpec {
    fn default() -> Self {
        MultiLevelSpec {
            eta_high: 1e-5,
            eta_low: 1e-7,
            high_solver: FragmentSolver::Ccsd,
            low_solver: FragmentSolver::Mp2,
            close_atoms: Vec::new(),
            bracket_over_all: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MultiLevelResult {
    pub total: f64,
    pub mean_field: f64,
    /// High-level correlation over the close fragments at eta_high.
    pub high_level: f64,
    /// Low-level correlation over all fragments at eta_low.
    pub low_level_full: f64,
    /// Subtracted low-level correlation at eta_high.
    pub low_level_bracket: f64,
    pub diagnostics: String,
}

fn sweep(
    problem: &EmbeddingProblem,
    fragments: &[&FragmentSpace],
    threshold: BathThreshold,
    solver: FragmentSolver,
) -> Result<(f64, Vec<FragmentSolution>), EmbeddingError> {
    let mut solutions = Vec::new();
    // Deterministic order: fragments sorted by their first atom.
    let mut ordered: Vec<&&FragmentSpace> = fragments.iter().collect();
    ordered.sort_by_key(|f| f.atoms.clone());
    for fragment in ordered {
        let cluster = build_bath(problem, fragment, threshold)?;
        solutions.push(solve_fragment(&cluster, solver)?);
    }
    Ok((solutions.iter().map(|s| s.contribution).sum(), solutions))
}

/// Multi-level total energy:
/// E = E_mean-field + E_high(eta_high, close)
///   + [E_low(eta_low, all) - E_low(eta_high, close-or-all)].
pub fn multilevel_energy(
    problem: &EmbeddingProblem,
    fragments: &[FragmentSpace],
    spec: &MultiLevelSpec,
) -> Result<MultiLevelResult, EmbeddingError> {
    if !(spec.eta_high >= spec.eta_low && spec.eta_low > 0.0) {
        return Err(EmbeddingError::BadThresholds {
            high: spec.eta_high,
            low: spec.eta_low,
        });
    }
    let close: Vec<&FragmentSpace> = fragments
        .iter()
        .filter(|f| f.atoms.iter().any(|a| spec.close_atoms.contains(a)))
        .collect();
    if close.is_empty() {
        return Err(EmbeddingError::EmptyCloseSet);
    }
    let all: Vec<&FragmentSpace> = fragments.iter().collect();
    let bracket_set: &[&FragmentSpace] = if spec.bracket_over_all { &all } else { &close };

    let (high_level, sol_hl) = sweep(problem, &close, BathThreshold::Bno(spec.eta_high), spec.high_solver)?;
    let (low_level_full, sol_ll) = sweep(problem, &all, BathThreshold::Bno(spec.eta_low), spec.low_solver)?;
    let (low_level_bracket, sol_br) =
        sweep(problem, bracket_set, BathThreshold::Bno(spec.eta_high), spec.low_solver)?;

    let mean_field = problem.mf.energy;
    let total = mean_field + high_level + low_level_full - low_level_bracket;
    let mut diagnostics = String::new();
    for (title, sols) in [
        ("high-level", &sol_hl),
        ("low-level full", &sol_ll),
        ("low-level bracket", &sol_br),
    ] {
        diagnostics.push_str(&format!("# {title}\n"));
        diagnostics.push_str(&diagnostics_table(sols));
    }
    Ok(MultiLevelResult {
        total,
        mean_field,
        high_level,
        low_level_full,
        low_level_bracket,
        diagnostics,
    })
}

/// Per-fragment diagnostics table (plain aligned text).
pub fn diagnostics_table(solutions: &[FragmentSolution]) -> String {
    let mut out = String::from(
        "fragment        eta        solver      occ  vir  dmet  bno_occ  bno_vir  contribution_hartree\n",
    );
    for s in solutions {
        out.push_str(&format!(
            "{:<15} {:<10} {:<11} {:<4} {:<4} {:<5} {:<8} {:<8} {:+.12e}\n",
            s.label,
            s.threshold.to_string(),
            s.solver.to_string(),
            s.n_occ,
            s.n_vir,
            s.n_dmet_bath,
            s.n_bno_occ,
            s.n_bno_vir,
            s.contribution
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::correlation::{mp2, OrbitalWindow};
    use crate::elements::Element;
    use crate::integrals::{compute_integrals, DEFAULT_ERI_CAP};
    use crate::scf::{mo_transform, run_scf, ScfOptions, SystemSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn el(s: &str) -> Element {
        Element::from_symbol(s).unwrap()
    }

    fn water() -> Geometry {
        let b = crate::ANGSTROM_TO_BOHR;
        vec![
            (el("O"), Vector3::new(0.0, -0.143225816552, 0.0) / b),
            (el("H"), Vector3::new(1.638036840407, 1.136548822547, 0.0) / b),
            (el("H"), Vector3::new(-1.638036840407, 1.136548822547, 0.0) / b),
        ]
    }

    fn h2() -> Geometry {
        vec![
            (el("H"), Vector3::zeros()),
            (el("H"), Vector3::new(0.0, 0.0, 0.7414)),
        ]
    }

    struct Setup {
        geometry: Geometry,
        basis: BasisSet,
        minimal: BasisSet,
        integrals: IntegralSet,
        mf: MeanFieldResult,
    }

    fn setup(geometry: Geometry, basis_name: &str) -> Setup {
        let elements: Vec<Element> = {
            let mut e: Vec<Element> = geometry.iter().map(|(el, _)| *el).collect();
            e.sort();
            e.dedup();
            e
        };
        let basis = BasisSet::builtin(basis_name, &elements).unwrap();
        let minimal = BasisSet::builtin("sto-3g", &elements).unwrap();
        let integrals = compute_integrals(&geometry, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geometry.clone(), basis_name, 0, 0).unwrap();
        let mf = run_scf(&spec, &integrals, &ScfOptions::default()).unwrap();
        assert!(mf.converged);
        Setup {
            geometry,
            basis,
            minimal,
            integrals,
            mf,
        }
    }

    impl Setup {
        fn problem(&self) -> EmbeddingProblem<'_> {
            EmbeddingProblem::new(&self.geometry, &self.basis, &self.integrals, &self.mf).unwrap()
        }
    }

    #[test]
    fn iao_count_matches_minimal_dimension() {
        let s = setup(water(), "svdz");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        assert_eq!(iaos.coefficients.ncols(), 7); // minimal-basis dimension of water
        // Orthonormality wrt the computational-basis overlap.
        let gram = iaos.coefficients.transpose() * &s.integrals.s * &iaos.coefficients;
        let n = gram.nrows();
        assert!((gram - DMatrix::identity(n, n)).abs().max() < 1e-8);
    }

    #[test]
    fn iao_construction_collapses_in_minimal_basis() {
        // When the computational basis is the minimal basis, the IAOs span
        // the full AO space: A A^T = S^-1.
        let s = setup(h2(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let aat = &iaos.coefficients * iaos.coefficients.transpose();
        let s_inv = s.integrals.s.clone().try_inverse().unwrap();
        assert!((aat - s_inv).abs().max() < 1e-8);
    }

    #[test]
    fn occupied_space_lies_in_iao_span() {
        let s = setup(water(), "svdz");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let proj = &iaos.coefficients * iaos.coefficients.transpose() * &s.integrals.s;
        for i in 0..s.mf.n_occ[0] {
            let c = s.mf.coefficients[0].column(i).into_owned();
            let pc = &proj * &c;
            let norm = (pc.transpose() * &s.integrals.s * &pc)[(0, 0)];
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn fragment_partition_of_unity() {
        let s = setup(water(), "svdz");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        assert_eq!(fragments.len(), 3);
        // Water in a minimal reference: O owns 5 IAOs, each H owns 1.
        assert_eq!(fragments[0].coefficients.ncols(), 5);
        assert_eq!(fragments[1].coefficients.ncols(), 1);
        assert_eq!(fragments[2].coefficients.ncols(), 1);
        // Sum of fragment projectors acts as the identity on the IAO span.
        let n = s.integrals.n;
        let mut sum = DMatrix::zeros(n, n);
        for f in &fragments {
            sum += &f.coefficients * f.coefficients.transpose() * &s.integrals.s;
        }
        let back = &sum * &iaos.coefficients;
        assert!((back - &iaos.coefficients).abs().max() < 1e-8);
    }

    #[test]
    fn unassigned_atom_is_reported() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let err = make_fragments(&iaos, &[vec![0], vec![1]]).unwrap_err();
        assert!(matches!(err, EmbeddingError::UnassignedIao { atom: 2, .. }));
        let err = make_fragments(&iaos, &[vec![0, 1], vec![1, 2]]).unwrap_err();
        assert!(matches!(err, EmbeddingError::DoublyAssignedAtom(1)));
    }

    #[test]
    fn dmet_bath_reproduces_mean_field_energy() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        let mut solutions = Vec::new();
        for f in &fragments {
            let cluster = build_bath(&p, f, BathThreshold::DmetOnly).unwrap();
            solutions.push(solve_fragment(&cluster, FragmentSolver::MeanField).unwrap());
        }
        let total =
            assemble_mean_field_energy(&solutions, &fragments, s.integrals.nuclear_repulsion)
                .unwrap();
        assert_abs_diff_eq!(total, s.mf.energy, epsilon = 1e-8);
    }

    #[test]
    fn bath_grows_monotonically_as_eta_decreases() {
        let s = setup(water(), "svdz");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        for f in &fragments {
            let dmet = build_bath(&p, f, BathThreshold::DmetOnly).unwrap();
            let mut last = dmet.bath_size();
            for eta in [1e-3, 1e-5, 1e-7, 1e-9] {
                let c = build_bath(&p, f, BathThreshold::Bno(eta)).unwrap();
                assert!(
                    c.bath_size() >= last,
                    "bath shrank for {} at eta={eta}",
                    f.label
                );
                last = c.bath_size();
            }
        }
    }

    #[test]
    fn invalid_eta_is_rejected() {
        let s = setup(h2(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(2)).unwrap();
        assert!(matches!(
            build_bath(&p, &fragments[0], BathThreshold::Bno(0.0)),
            Err(EmbeddingError::BadEta(_))
        ));
        assert!(matches!(
            build_bath(&p, &fragments[0], BathThreshold::Bno(-1e-5)),
            Err(EmbeddingError::BadEta(_))
        ));
    }

    #[test]
    fn complete_bath_recovers_canonical_mp2() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let mo = mo_transform(&s.integrals, &s.mf).unwrap();
        let canonical = mp2(&mo, &OrbitalWindow::full(&mo)).unwrap().correlation_energy;
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        let mut solutions = Vec::new();
        for f in &fragments {
            let cluster = build_bath(&p, f, BathThreshold::Bno(1e-14)).unwrap();
            solutions.push(solve_fragment(&cluster, FragmentSolver::Mp2).unwrap());
        }
        let total = assemble_global_energy(&solutions, &fragments, s.mf.energy).unwrap();
        assert_abs_diff_eq!(total, s.mf.energy + canonical, epsilon = 1e-6);
    }

    #[test]
    fn eta_sweep_converges_to_canonical_mp2() {
        let s = setup(water(), "svdz");
        let p = s.problem();
        let mo = mo_transform(&s.integrals, &s.mf).unwrap();
        let canonical = mp2(&mo, &OrbitalWindow::full(&mo)).unwrap().correlation_energy;
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        let mut errors = Vec::new();
        for eta in [1e-3, 1e-5, 1e-7, 1e-9] {
            let mut solutions = Vec::new();
            for f in &fragments {
                let cluster = build_bath(&p, f, BathThreshold::Bno(eta)).unwrap();
                solutions.push(solve_fragment(&cluster, FragmentSolver::Mp2).unwrap());
            }
            let total = assemble_global_energy(&solutions, &fragments, s.mf.energy).unwrap();
            errors.push((total - (s.mf.energy + canonical)).abs());
        }
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "error increased along the eta sweep: {errors:?}");
        }
        assert!(errors.last().unwrap() < &1e-4, "final error too large: {errors:?}");
    }

    #[test]
    fn tiny_cluster_exact_solver_is_below_mp2() {
        let s = setup(h2(), "svdz");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(2)).unwrap();
        let cluster = build_bath(&p, &fragments[0], BathThreshold::Bno(1e-12)).unwrap();
        assert!(2 * (cluster.n_occ() + cluster.n_vir()) <= 12);
        let exact = solve_fragment(&cluster, FragmentSolver::Fci).unwrap();
        let pt2 = solve_fragment(&cluster, FragmentSolver::Mp2).unwrap();
        assert!(exact.cluster_correlation < pt2.cluster_correlation);
    }

    #[test]
    fn assembly_rejects_missing_and_duplicate_fragments() {
        let s = setup(h2(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(2)).unwrap();
        let cluster = build_bath(&p, &fragments[0], BathThreshold::DmetOnly).unwrap();
        let sol = solve_fragment(&cluster, FragmentSolver::Mp2).unwrap();
        assert!(matches!(
            assemble_global_energy(&[sol.clone()], &fragments, s.mf.energy),
            Err(EmbeddingError::MissingFragment(_))
        ));
        assert!(matches!(
            assemble_global_energy(&[sol.clone(), sol.clone()], &fragments, s.mf.energy),
            Err(EmbeddingError::DuplicateFragment(_))
        ));
    }

    #[test]
    fn multilevel_telescopes_with_identical_settings() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        // Same solver, same eta on both levels, close set = all atoms:
        // the bracket cancels the high level and E = E_HF + E_LL(eta).
        let eta = 1e-6;
        let spec = MultiLevelSpec {
            eta_high: eta,
            eta_low: eta,
            high_solver: FragmentSolver::Mp2,
            low_solver: FragmentSolver::Mp2,
            close_atoms: vec![0, 1, 2],
            bracket_over_all: false,
        };
        let result = multilevel_energy(&p, &fragments, &spec).unwrap();
        let (low, _) = sweep(
            &p,
            &fragments.iter().collect::<Vec<_>>(),
            BathThreshold::Bno(eta),
            FragmentSolver::Mp2,
        )
        .unwrap();
        assert_abs_diff_eq!(result.total, s.mf.energy + low, epsilon = 1e-12);
    }

    #[test]
    fn multilevel_same_solver_different_eta_telescopes() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        let spec = MultiLevelSpec {
            eta_high: 1e-2,
            eta_low: 1e-7,
            high_solver: FragmentSolver::Mp2,
            low_solver: FragmentSolver::Mp2,
            close_atoms: vec![0, 1, 2],
            bracket_over_all: false,
        };
        let result = multilevel_energy(&p, &fragments, &spec).unwrap();
        let (low, _) = sweep(
            &p,
            &fragments.iter().collect::<Vec<_>>(),
            BathThreshold::Bno(1e-7),
            FragmentSolver::Mp2,
        )
        .unwrap();
        assert_abs_diff_eq!(result.total, s.mf.energy + low, epsilon = 1e-12);
    }

    #[test]
    fn multilevel_validates_inputs() {
        let s = setup(h2(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(2)).unwrap();
        let bad = MultiLevelSpec {
            eta_high: 1e-8,
            eta_low: 1e-5,
            ..Default::default()
        };
        assert!(matches!(
            multilevel_energy(&p, &fragments, &bad),
            Err(EmbeddingError::BadThresholds { .. })
        ));
        let empty_close = MultiLevelSpec {
            high_solver: FragmentSolver::Mp2,
            ..Default::default()
        };
        assert!(matches!(
            multilevel_energy(&p, &fragments, &empty_close),
            Err(EmbeddingError::EmptyCloseSet)
        ));
    }

    #[test]
    fn diagnostics_table_lists_every_fragment() {
        let s = setup(water(), "sto-3g");
        let p = s.problem();
        let iaos = build_iaos(&p, &s.minimal).unwrap();
        let fragments = make_fragments(&iaos, &atomic_partition(3)).unwrap();
        let mut solutions = Vec::new();
        for f in &fragments {
            let cluster = build_bath(&p, f, BathThreshold::Bno(1e-5)).unwrap();
            solutions.push(solve_fragment(&cluster, FragmentSolver::Mp2).unwrap());
        }
        let table = diagnostics_table(&solutions);
        for f in &fragments {
            assert!(table.contains(&f.label), "missing {} in:\n{table}", f.label);
        }
        assert!(table.contains("1.0e-5"));
    }
}
