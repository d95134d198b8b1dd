//! Self-consistent field: restricted and unrestricted Hartree-Fock with
//! error-vector (DIIS) convergence acceleration, plus the AO-to-MO
//! integral transformation.

use crate::elements::Element;
use crate::integrals::{Eri, Geometry, IntegralSet};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScfError {
    #[error("system has {electrons} electrons but {unpaired} unpaired: parity mismatch")]
    SpinParity { electrons: u32, unpaired: u32 },
    #[error("system must have at least one electron (sum of charges {z}, net charge {charge})")]
    NoElectrons { z: u32, charge: i32 },
    #[error("restricted mode requires an even electron count with no unpaired electrons")]
    RestrictedOpenShell,
    #[error("overlap matrix is singular beyond the linear-dependence threshold (smallest eigenvalue {0:.3e})")]
    SingularOverlap(f64),
    #[error("mean field is not converged; refusing to transform integrals")]
    NotConverged,
    #[error("result I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed result dump: {0}")]
    BadDump(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpinMode {
    Restricted,
    Unrestricted,
}

/// Electronic system: geometry, basis name, charge and spin.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub geometry: Geometry,
    pub basis_name: String,
    pub net_charge: i32,
    pub n_unpaired: u32,
}

impl SystemSpec {
    pub fn new(
        geometry: Geometry,
        basis_name: &str,
        net_charge: i32,
        n_unpaired: u32,
    ) -> Result<Self, ScfError> {
        let z: u32 = geometry.iter().map(|(el, _)| el.charge()).sum();
        let electrons = z as i64 - net_charge as i64;
        if electrons < 1 {
            return Err(ScfError::NoElectrons { z, charge: net_charge });
        }
        let electrons = electrons as u32;
        if electrons < n_unpaired || (electrons - n_unpaired) % 2 != 0 {
            return Err(ScfError::SpinParity { electrons, unpaired: n_unpaired });
        }
        Ok(SystemSpec {
            geometry,
            basis_name: basis_name.to_string(),
            net_charge,
            n_unpaired,
        })
    }

    pub fn n_electrons(&self) -> u32 {
        let z: u32 = self.geometry.iter().map(|(el, _)| el.charge()).sum();
        (z as i64 - self.net_charge as i64) as u32
    }

    pub fn n_alpha(&self) -> usize {
        ((self.n_electrons() + self.n_unpaired) / 2) as usize
    }

    pub fn n_beta(&self) -> usize {
        ((self.n_electrons() - self.n_unpaired) / 2) as usize
    }

    pub fn elements(&self) -> Vec<Element> {
        let mut els: Vec<Element> = self.geometry.iter().map(|(e, _)| *e).collect();
        els.sort();
        els.dedup();
        els
    }
}

#[derive(Debug, Clone)]
pub struct ScfOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the energy change (hartree).
    pub energy_tolerance: f64,
    /// Convergence threshold on the orbital-gradient (commutator) norm.
    pub residual_tolerance: f64,
    /// Error-vector extrapolation subspace size.
    pub diis_size: usize,
    /// Iteration at which extrapolation starts.
    pub diis_start: usize,
    pub use_diis: bool,
    /// Virtual-orbital level shift (hartree); 0 disables.
    pub level_shift: f64,
}

impl Default for ScfOptions {
    fn default() -> Self {
        ScfOptions {
            max_iterations: 200,
            energy_tolerance: 1e-9,
            residual_tolerance: 1e-7,
            diis_size: 8,
            diis_start: 2,
            use_diis: true,
            level_shift: 0.0,
        }
    }
}

/// Converged (or flagged) mean-field solution.
#[derive(Debug, Clone)]
pub struct MeanFieldResult {
    pub mode: SpinMode,
    /// AO-basis orbital coefficients, one matrix per spin channel
    /// (restricted: a single shared channel).
    pub coefficients: Vec<DMatrix<f64>>,
    pub orbital_energies: Vec<DVector<f64>>,
    /// Per-spin-orbital occupations (0 or 1) per channel.
    pub occupations: Vec<Vec<f64>>,
    /// Occupied orbital counts (alpha, beta).
    pub n_occ: [usize; 2],
    pub energy: f64,
    pub converged: bool,
    pub gradient_norm: f64,
    pub iterations: usize,
}

impl MeanFieldResult {
    pub fn channel_count(&self) -> usize {
        self.coefficients.len()
    }

    /// Coefficients of the given spin channel (0 = alpha, 1 = beta).
    pub fn channel(&self, spin: usize) -> &DMatrix<f64> {
        &self.coefficients[spin.min(self.coefficients.len() - 1)]
    }

    pub fn orbital_energies_of(&self, spin: usize) -> &DVector<f64> {
        &self.orbital_energies[spin.min(self.orbital_energies.len() - 1)]
    }
}

struct Diis {
    size: usize,
    focks: Vec<Vec<DMatrix<f64>>>,
    errors: Vec<DVector<f64>>,
}

impl Diis {
    fn new(size: usize) -> Self {
        Diis { size, focks: Vec::new(), errors: Vec::new() }
    }

    fn push(&mut self, focks: Vec<DMatrix<f64>>, error: DVector<f64>) {
        self.focks.push(focks);
        self.errors.push(error);
        if self.focks.len() > self.size {
            self.focks.remove(0);
            self.errors.remove(0);
        }
    }

    /// Pulay extrapolation over the stored subspace; one coefficient set
    /// shared across spin channels.
    fn extrapolate(&self) -> Option<Vec<DMatrix<f64>>> {
        let m = self.focks.len();
        if m < 2 {
            return None;
        }
        let mut b = DMatrix::zeros(m + 1, m + 1);
        for i in 0..m {
            for j in 0..=i {
                let v = self.errors[i].dot(&self.errors[j]);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
            b[(i, m)] = -1.0;
            b[(m, i)] = -1.0;
        }
        let mut rhs = DVector::zeros(m + 1);
        rhs[m] = -1.0;
        let coefs = b.lu().solve(&rhs)?;
        let n_ch = self.focks[0].len();
        let mut out = Vec::with_capacity(n_ch);
        for ch in 0..n_ch {
            let mut f = DMatrix::zeros(self.focks[0][ch].nrows(), self.focks[0][ch].ncols());
            for (i, focks) in self.focks.iter().enumerate() {
                f += &focks[ch] * coefs[i];
            }
            out.push(f);
        }
        Some(out)
    }
}

pub(crate) fn coulomb(eri: &Eri, d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let mut j = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let mut v = 0.0;
            for r in 0..n {
                for s in 0..n {
                    v += eri.get(p, q, r, s) * d[(r, s)];
                }
            }
            j[(p, q)] = v;
            j[(q, p)] = v;
        }
    }
    j
}

pub(crate) fn exchange(eri: &Eri, d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let mut k = DMatrix::zeros(n, n);
    for p in 0..n {
        for q in 0..=p {
            let mut v = 0.0;
            for r in 0..n {
                for s in 0..n {
                    v += eri.get(p, r, q, s) * d[(r, s)];
                }
            }
            k[(p, q)] = v;
            k[(q, p)] = v;
        }
    }
    k
}

/// Symmetric inverse square root of the overlap matrix.
fn inverse_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>, ScfError> {
    let (vals, vecs) = crate::linalg::sym_eig(s);
    let smallest = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if smallest < 1e-10 {
        return Err(ScfError::SingularOverlap(smallest));
    }
    let d = DMatrix::from_diagonal(&vals.map(|x| x.powf(-0.5)));
    Ok(&vecs * d * vecs.transpose())
}

/// Run a Roothaan (restricted) or Pople-Nesbet (unrestricted) SCF.
///
/// The initial guess is the diagonalized core Hamiltonian, which makes the
/// iteration deterministic for fixed inputs.
pub fn run_scf(
    spec: &SystemSpec,
    integrals: &IntegralSet,
    opts: &ScfOptions,
) -> Result<MeanFieldResult, ScfError> {
    let mode = if spec.n_unpaired == 0 {
        SpinMode::Restricted
    } else {
        SpinMode::Unrestricted
    };
    run_scf_mode(spec, integrals, opts, mode)
}

/// As [`run_scf`] but with an explicit spin mode (a closed-shell system may
/// still be run unrestricted).
pub fn run_scf_mode(
    spec: &SystemSpec,
    integrals: &IntegralSet,
    opts: &ScfOptions,
    mode: SpinMode,
) -> Result<MeanFieldResult, ScfError> {
    if mode == SpinMode::Restricted && spec.n_unpaired != 0 {
        return Err(ScfError::RestrictedOpenShell);
    }
    let n = integrals.n;
    let h = &integrals.t + &integrals.v;
    let x = inverse_sqrt(&integrals.s)?;
    let n_occ = [spec.n_alpha(), spec.n_beta()];
    let n_channels = match mode {
        SpinMode::Restricted => 1,
        SpinMode::Unrestricted => 2,
    };

    let mut focks: Vec<DMatrix<f64>> = vec![h.clone(); n_channels];
    let mut coeffs: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); n_channels];
    let mut energies: Vec<DVector<f64>> = vec![DVector::zeros(n); n_channels];
    let mut densities: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); n_channels];
    let mut diis = Diis::new(opts.diis_size);
    let mut e_old = 0.0;
    let mut energy = 0.0;
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        // Diagonalize (possibly extrapolated) Fock matrices.
        let effective = if opts.use_diis && iter >= opts.diis_start {
            diis.extrapolate().unwrap_or_else(|| focks.clone())
        } else {
            focks.clone()
        };
        for ch in 0..n_channels {
            let mut fp = x.transpose() * &effective[ch] * &x;
            if opts.level_shift != 0.0 && iter > 0 {
                // Shift virtuals up in the orthonormal basis.
                let d_o = x.transpose() * &integrals.s * &densities[ch] * &integrals.s * &x;
                fp += opts.level_shift * (DMatrix::identity(n, n) - d_o);
            }
            let (e, c) = crate::linalg::sym_eig(&fp);
            coeffs[ch] = &x * c;
            energies[ch] = e;
            let occ = coeffs[ch].columns(0, n_occ[ch]).into_owned();
            densities[ch] = &occ * occ.transpose();
        }

        // Build Fock matrices from the new densities.
        let d_total = match mode {
            SpinMode::Restricted => &densities[0] * 2.0,
            SpinMode::Unrestricted => &densities[0] + &densities[1],
        };
        let j = coulomb(&integrals.eri, &d_total);
        energy = integrals.nuclear_repulsion;
        for ch in 0..n_channels {
            let k = exchange(&integrals.eri, &densities[ch]);
            focks[ch] = &h + &j - k;
        }
        match mode {
            SpinMode::Restricted => {
                energy += (&d_total.transpose() * (&h + &focks[0])).trace() / 2.0;
            }
            SpinMode::Unrestricted => {
                for ch in 0..2 {
                    energy += 0.5 * (densities[ch].transpose() * (&h + &focks[ch])).trace();
                }
            }
        }

        // Orbital-gradient error vectors e = X^T (F D S - S D F) X.
        let mut err_parts = Vec::new();
        let mut max_err: f64 = 0.0;
        for ch in 0..n_channels {
            let fds = &focks[ch] * &densities[ch] * &integrals.s;
            let comm = x.transpose() * (&fds - fds.transpose()) * &x;
            max_err = max_err.max(comm.abs().max());
            err_parts.push(comm);
        }
        grad_norm = max_err;
        let mut flat = Vec::new();
        for e in &err_parts {
            flat.extend(e.iter());
        }
        diis.push(focks.clone(), DVector::from_vec(flat));

        if iter > 0
            && (energy - e_old).abs() < opts.energy_tolerance
            && grad_norm < opts.residual_tolerance
        {
            converged = true;
            break;
        }
        e_old = energy;
    }

    let occupations: Vec<Vec<f64>> = (0..n_channels)
        .map(|ch| {
            (0..n)
                .map(|i| if i < n_occ[ch] { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    Ok(MeanFieldResult {
        mode,
        coefficients: coeffs,
        orbital_energies: energies,
        occupations,
        n_occ,
        energy,
        converged,
        gradient_norm: grad_norm,
        iterations,
    })
}

/// Dense MO-basis two-electron tensor in chemists' notation.
#[derive(Debug, Clone)]
pub struct MoTensor {
    pub n_left: usize,
    pub n_right: usize,
    data: Vec<f64>,
}

impl MoTensor {
    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.data[((p * self.n_left + q) * self.n_right + r) * self.n_right + s]
    }
}

/// Transform the packed AO tensor into the MO basis (pq|rs) with bra
/// orbitals from `c_left` and ket orbitals from `c_right`.
pub fn transform_eri(eri: &Eri, c_left: &DMatrix<f64>, c_right: &DMatrix<f64>) -> MoTensor {
    let n = c_left.nrows();
    let nl = c_left.ncols();
    let nr = c_right.ncols();
    // (mu nu | lam sig) -> (p nu | lam sig)
    let mut t1 = vec![0.0; nl * n * n * n];
    for p in 0..nl {
        for nu in 0..n {
            for lam in 0..n {
                for sig in 0..n {
                    let mut v = 0.0;
                    for mu in 0..n {
                        v += c_left[(mu, p)] * eri.get(mu, nu, lam, sig);
                    }
                    t1[((p * n + nu) * n + lam) * n + sig] = v;
                }
            }
        }
    }
    // -> (p q | lam sig)
    let mut t2 = vec![0.0; nl * nl * n * n];
    for p in 0..nl {
        for q in 0..nl {
            for lam in 0..n {
                for sig in 0..n {
                    let mut v = 0.0;
                    for nu in 0..n {
                        v += c_left[(nu, q)] * t1[((p * n + nu) * n + lam) * n + sig];
                    }
                    t2[((p * nl + q) * n + lam) * n + sig] = v;
                }
            }
        }
    }
    drop(t1);
    // -> (p q | r sig)
    let mut t3 = vec![0.0; nl * nl * nr * n];
    for p in 0..nl {
        for q in 0..nl {
            for r in 0..nr {
                for sig in 0..n {
                    let mut v = 0.0;
                    for lam in 0..n {
                        v += c_right[(lam, r)] * t2[((p * nl + q) * n + lam) * n + sig];
                    }
                    t3[((p * nl + q) * nr + r) * n + sig] = v;
                }
            }
        }
    }
    drop(t2);
    // -> (p q | r s)
    let mut data = vec![0.0; nl * nl * nr * nr];
    for p in 0..nl {
        for q in 0..nl {
            for r in 0..nr {
                for s in 0..nr {
                    let mut v = 0.0;
                    for sig in 0..n {
                        v += c_right[(sig, s)] * t3[((p * nl + q) * nr + r) * n + sig];
                    }
                    data[((p * nl + q) * nr + r) * nr + s] = v;
                }
            }
        }
    }
    MoTensor { n_left: nl, n_right: nr, data }
}

/// MO-basis integrals, one set of blocks per spin-channel combination.
#[derive(Debug, Clone)]
pub struct MoIntegrals {
    pub mode: SpinMode,
    /// Core Hamiltonian per channel: C^T (T + V) C.
    pub h: Vec<DMatrix<f64>>,
    /// Fock eigenvalues per channel.
    pub orbital_energies: Vec<DVector<f64>>,
    /// Chemists'-notation blocks: restricted [(aa|aa)];
    /// unrestricted [(aa|aa), (bb|bb), (aa|bb)].
    pub blocks: Vec<MoTensor>,
    pub n: usize,
    pub n_occ: [usize; 2],
}

/// Transform AO integrals into the converged MO basis.
pub fn mo_transform(
    integrals: &IntegralSet,
    result: &MeanFieldResult,
) -> Result<MoIntegrals, ScfError> {
    if !result.converged {
        return Err(ScfError::NotConverged);
    }
    let h_ao = &integrals.t + &integrals.v;
    let mut h = Vec::new();
    let mut blocks = Vec::new();
    match result.mode {
        SpinMode::Restricted => {
            let c = &result.coefficients[0];
            h.push(c.transpose() * &h_ao * c);
            blocks.push(transform_eri(&integrals.eri, c, c));
        }
        SpinMode::Unrestricted => {
            let (ca, cb) = (&result.coefficients[0], &result.coefficients[1]);
            h.push(ca.transpose() * &h_ao * ca);
            h.push(cb.transpose() * &h_ao * cb);
            blocks.push(transform_eri(&integrals.eri, ca, ca));
            blocks.push(transform_eri(&integrals.eri, cb, cb));
            blocks.push(transform_eri(&integrals.eri, ca, cb));
        }
    }
    Ok(MoIntegrals {
        mode: result.mode,
        h,
        orbital_energies: result.orbital_energies.clone(),
        blocks,
        n: integrals.n,
        n_occ: result.n_occ,
    })
}

/// Dump a mean-field result as a text header followed by little-endian
/// binary payload (coefficients then orbital energies, per channel).
pub fn write_mean_field<W: Write>(result: &MeanFieldResult, mut w: W) -> Result<(), ScfError> {
    let n = result.coefficients[0].nrows();
    writeln!(w, "mofbind-meanfield 1")?;
    writeln!(
        w,
        "mode {}",
        match result.mode {
            SpinMode::Restricted => "restricted",
            SpinMode::Unrestricted => "unrestricted",
        }
    )?;
    writeln!(w, "n {n}")?;
    writeln!(w, "n_alpha {}", result.n_occ[0])?;
    writeln!(w, "n_beta {}", result.n_occ[1])?;
    writeln!(w, "energy {:.15e}", result.energy)?;
    writeln!(w, "converged {}", result.converged as u8)?;
    writeln!(w, "binary")?;
    for ch in 0..result.channel_count() {
        for v in result.coefficients[ch].iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in result.orbital_energies[ch].iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

/// Read a dump produced by [`write_mean_field`].
pub fn read_mean_field<R: Read + BufRead>(mut r: R) -> Result<MeanFieldResult, ScfError> {
    let mut header = std::collections::HashMap::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(ScfError::BadDump("truncated header".into()));
        }
        let line = line.trim().to_string();
        if line == "binary" {
            break;
        }
        if let Some((k, v)) = line.split_once(' ') {
            header.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String, ScfError> {
        header
            .get(k)
            .cloned()
            .ok_or_else(|| ScfError::BadDump(format!("missing header field '{k}'")))
    };
    let mode = match get("mode")?.as_str() {
        "restricted" => SpinMode::Restricted,
        "unrestricted" => SpinMode::Unrestricted,
        other => return Err(ScfError::BadDump(format!("bad mode '{other}'"))),
    };
    let n: usize = get("n")?.parse().map_err(|_| ScfError::BadDump("bad n".into()))?;
    let n_alpha: usize = get("n_alpha")?.parse().map_err(|_| ScfError::BadDump("bad n_alpha".into()))?;
    let n_beta: usize = get("n_beta")?.parse().map_err(|_| ScfError::BadDump("bad n_beta".into()))?;
    let energy: f64 = get("energy")?.parse().map_err(|_| ScfError::BadDump("bad energy".into()))?;
    let converged = get("converged")? == "1";
    let n_channels = match mode {
        SpinMode::Restricted => 1,
        SpinMode::Unrestricted => 2,
    };
    let mut coefficients = Vec::new();
    let mut orbital_energies = Vec::new();
    for _ in 0..n_channels {
        let mut c = DMatrix::zeros(n, n);
        for v in c.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut e = DVector::zeros(n);
        for v in e.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        coefficients.push(c);
        orbital_energies.push(e);
    }
    let n_occ = [n_alpha, n_beta];
    let occupations = (0..n_channels)
        .map(|ch| (0..n).map(|i| if i < n_occ[ch] { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(MeanFieldResult {
        mode,
        coefficients,
        orbital_energies,
        occupations,
        n_occ,
        energy,
        converged,
        gradient_norm: 0.0,
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::integrals::{compute_integrals, DEFAULT_ERI_CAP};
    use crate::ANGSTROM_TO_BOHR;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn el(s: &str) -> Element {
        Element::from_symbol(s).unwrap()
    }

    pub(crate) fn h2_geometry() -> Geometry {
        vec![
            (el("H"), Vector3::zeros()),
            (el("H"), Vector3::new(0.0, 0.0, 0.7414)),
        ]
    }

    pub(crate) fn water_geometry() -> Geometry {
        // Fixture geometry, defined in bohr.
        let b = ANGSTROM_TO_BOHR;
        vec![
            (el("O"), Vector3::new(0.0, -0.143225816552, 0.0) / b),
            (el("H"), Vector3::new(1.638036840407, 1.136548822547, 0.0) / b),
            (el("H"), Vector3::new(-1.638036840407, 1.136548822547, 0.0) / b),
        ]
    }

    #[test]
    fn h2_sto3g_matches_reference() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let result = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        assert!(result.converged);
        // Frozen reference value from tests/fixtures/reference_energies.json.
        assert_relative_eq!(result.energy, -1.1166843900, epsilon = 1e-6);
    }

    #[test]
    fn water_sto3g_matches_reference() {
        let geom = water_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        assert_relative_eq!(ints.nuclear_repulsion, 8.002367061810, epsilon = 1e-9);
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let result = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        assert!(result.converged);
        assert_relative_eq!(result.energy, -74.9420799282, epsilon = 1e-6);
    }

    #[test]
    fn one_electron_system_hits_core_hamiltonian_bound() {
        // He+ run unrestricted: the energy is the lowest eigenvalue of T + V.
        let geom: Geometry = vec![(el("He"), Vector3::zeros())];
        let basis = BasisSet::builtin("sto-3g", &[el("He")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 1, 1).unwrap();
        let result = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        assert!(result.converged);
        let h = &ints.t + &ints.v;
        // Generalized eigenvalue via S^-1/2.
        let x = inverse_sqrt(&ints.s).unwrap();
        let hp = x.transpose() * h * x;
        let lowest = hp
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_relative_eq!(result.energy, lowest, epsilon = 1e-8);
    }

    #[test]
    fn unrestricted_matches_restricted_for_closed_shell() {
        let geom = water_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf_mode(&spec, &ints, &ScfOptions::default(), SpinMode::Restricted).unwrap();
        let u = run_scf_mode(&spec, &ints, &ScfOptions::default(), SpinMode::Unrestricted).unwrap();
        assert!(r.converged && u.converged);
        assert_relative_eq!(r.energy, u.energy, epsilon = 1e-8);
    }

    #[test]
    fn plain_iterations_decrease_energy() {
        let geom = water_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        // Track the energy across non-extrapolated iterations.
        let mut last = f64::INFINITY;
        for iters in 2..8 {
            let opts = ScfOptions {
                max_iterations: iters,
                use_diis: false,
                energy_tolerance: 0.0,
                residual_tolerance: 0.0,
                ..Default::default()
            };
            let r = run_scf(&spec, &ints, &opts).unwrap();
            assert!(r.energy <= last + 1e-12, "energy rose at iteration {iters}");
            last = r.energy;
        }
    }

    #[test]
    fn final_gradient_norm_is_small() {
        let geom = water_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        assert!(r.gradient_norm < 1e-7);
        // C^T S C = identity per channel.
        let ortho = r.coefficients[0].transpose() * &ints.s * &r.coefficients[0];
        let n = ortho.nrows();
        assert!((ortho - DMatrix::identity(n, n)).abs().max() < 1e-8);
    }

    #[test]
    fn hf_is_size_consistent_for_far_h2_pair() {
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let one = h2_geometry();
        let mut two = one.clone();
        for (_, p) in one.iter() {
            two.push((el("H"), p + Vector3::new(100.0, 0.0, 0.0)));
        }
        let ints1 = compute_integrals(&one, &basis, DEFAULT_ERI_CAP).unwrap();
        let ints2 = compute_integrals(&two, &basis, DEFAULT_ERI_CAP).unwrap();
        let s1 = SystemSpec::new(one, "sto-3g", 0, 0).unwrap();
        let s2 = SystemSpec::new(two, "sto-3g", 0, 0).unwrap();
        let e1 = run_scf(&s1, &ints1, &ScfOptions::default()).unwrap().energy;
        let e2 = run_scf(&s2, &ints2, &ScfOptions::default()).unwrap().energy;
        assert_relative_eq!(e2, 2.0 * e1, epsilon = 1e-8);
    }

    #[test]
    fn spin_parity_is_validated() {
        let geom = h2_geometry();
        assert!(matches!(
            SystemSpec::new(geom.clone(), "sto-3g", 0, 1),
            Err(ScfError::SpinParity { .. })
        ));
        assert!(matches!(
            SystemSpec::new(geom, "sto-3g", 3, 0),
            Err(ScfError::NoElectrons { .. })
        ));
    }

    #[test]
    fn mo_transform_orthonormalizes_overlap() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        let mo = mo_transform(&ints, &r).unwrap();
        // h is symmetric in the MO basis and S becomes the identity.
        let s_mo = r.coefficients[0].transpose() * &ints.s * &r.coefficients[0];
        assert!((s_mo - DMatrix::identity(2, 2)).abs().max() < 1e-8);
        assert!((mo.h[0].clone() - mo.h[0].transpose()).abs().max() < 1e-10);
    }

    #[test]
    fn mo_transform_rejects_unconverged() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let opts = ScfOptions { max_iterations: 1, ..Default::default() };
        let r = run_scf(&spec, &ints, &opts).unwrap();
        assert!(!r.converged);
        assert!(matches!(mo_transform(&ints, &r), Err(ScfError::NotConverged)));
    }

    #[test]
    fn identity_transform_preserves_tensor() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let c = DMatrix::identity(2, 2);
        let mo = transform_eri(&ints.eri, &c, &c);
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        assert_relative_eq!(
                            mo.get(i, j, k, l),
                            ints.eri.get(i, j, k, l),
                            epsilon = 1e-12
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn back_transform_recovers_ao_integrals() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        let c = &r.coefficients[0];
        let h_ao = &ints.t + &ints.v;
        let h_mo = c.transpose() * &h_ao * c;
        let c_inv = c.clone().try_inverse().unwrap();
        let back = c_inv.transpose() * h_mo * c_inv;
        assert!((back - h_ao).abs().max() < 1e-10);
    }

    #[test]
    fn result_dump_roundtrip() {
        let geom = h2_geometry();
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_mean_field(&r, &mut buf).unwrap();
        let back = read_mean_field(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back.mode, r.mode);
        assert_eq!(back.n_occ, r.n_occ);
        assert_relative_eq!(back.energy, r.energy, epsilon = 1e-14);
        assert!((back.coefficients[0].clone() - &r.coefficients[0]).abs().max() < 1e-14);
    }
}
