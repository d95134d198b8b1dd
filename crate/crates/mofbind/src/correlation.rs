//! Post-mean-field correlation: second-order perturbation theory, coupled
//! cluster with single and double excitations (feature `ccsd`), and a small
//! exact-diagonalization oracle.
//!
//! The iterative solvers work in a spin-orbital space
//! ([`SpinOrbitalSpace`]) so that restricted and unrestricted references
//! share one code path; the embedding layer builds such spaces directly
//! for its clusters.

use crate::scf::{MoIntegrals, SpinMode};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorrelationError {
    #[error("orbital window is invalid: {0}")]
    BadWindow(String),
    #[error(
        "degenerate occupied-virtual gap ({gap:.3e} hartree) between orbitals {occ} and {virt} in spin channel {channel}"
    )]
    DegenerateGap {
        channel: usize,
        occ: usize,
        virt: usize,
        gap: f64,
    },
    #[error("exact diagonalization capped at 12 spin orbitals; window has {0}")]
    FciTooLarge(usize),
    #[error("coupled-cluster amplitudes failed to converge in {iterations} iterations (residual history: {history:?})")]
    NotConverged { iterations: usize, history: Vec<f64> },
    #[error("reference determinant has negligible weight ({0:.3e}) in the exact ground state; amplitude analysis is ill-defined")]
    VanishingReference(f64),
}

/// Active-orbital selection, one occupied and one virtual index list per
/// spin channel (restricted solutions carry a single shared channel).
#[derive(Debug, Clone)]
pub struct OrbitalWindow {
    pub occ: Vec<Vec<usize>>,
    pub virt: Vec<Vec<usize>>,
}

impl OrbitalWindow {
    /// All occupied and all virtual orbitals of the solution.
    pub fn full(mo: &MoIntegrals) -> Self {
        let n_channels = mo.h.len();
        let occ = (0..n_channels)
            .map(|ch| (0..mo.n_occ[ch]).collect())
            .collect();
        let virt = (0..n_channels)
            .map(|ch| (mo.n_occ[ch]..mo.n).collect())
            .collect();
        OrbitalWindow { occ, virt }
    }

    /// Full window minus the `n_frozen` lowest occupied orbitals per
    /// channel.
    pub fn frozen_core(mo: &MoIntegrals, n_frozen: usize) -> Self {
        let mut w = Self::full(mo);
        for occ in &mut w.occ {
            let k = n_frozen.min(occ.len());
            occ.drain(0..k);
        }
        w
    }

    pub fn validate(&self, mo: &MoIntegrals) -> Result<(), CorrelationError> {
        let n_channels = mo.h.len();
        if self.occ.len() != n_channels || self.virt.len() != n_channels {
            return Err(CorrelationError::BadWindow(format!(
                "expected {n_channels} spin channel(s), window has {}/{}",
                self.occ.len(),
                self.virt.len()
            )));
        }
        for ch in 0..n_channels {
            for &i in &self.occ[ch] {
                if i >= mo.n_occ[ch] {
                    return Err(CorrelationError::BadWindow(format!(
                        "orbital {i} listed as occupied but channel {ch} has {} occupied",
                        mo.n_occ[ch]
                    )));
                }
            }
            for &a in &self.virt[ch] {
                if a < mo.n_occ[ch] || a >= mo.n {
                    return Err(CorrelationError::BadWindow(format!(
                        "orbital {a} listed as virtual but channel {ch} virtuals span {}..{}",
                        mo.n_occ[ch], mo.n
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Mp2,
    Ccsd,
    Fci,
}

/// Correlation energy relative to the mean-field reference determinant.
#[derive(Debug, Clone)]
pub struct CorrelatedSolution {
    pub method: Method,
    pub correlation_energy: f64,
    /// Named spin components, e.g. ("same-spin", e) / ("opposite-spin", e).
    pub spin_components: Vec<(String, f64)>,
    /// Spin-orbital amplitudes over the window, when the solver produces
    /// them.
    pub amplitudes: Option<SoAmplitudes>,
    pub iterations: usize,
    pub converged: bool,
}

/// Check for a (near-)degenerate gap between active occupied and virtual
/// orbitals; perturbation theory diverges there.
fn check_gap(mo: &MoIntegrals, window: &OrbitalWindow) -> Result<(), CorrelationError> {
    for ch in 0..mo.h.len() {
        let eps = &mo.orbital_energies[ch];
        for &i in &window.occ[ch] {
            for &a in &window.virt[ch] {
                let gap = eps[a] - eps[i];
                if gap <= 1e-8 {
                    return Err(CorrelationError::DegenerateGap {
                        channel: ch,
                        occ: i,
                        virt: a,
                        gap,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Second-order Moller-Plesset correlation energy over the given window.
///
/// Restricted references use the closed-shell spatial-orbital formula;
/// unrestricted references are assembled from the three spin cases
/// (alpha-alpha, beta-beta, alpha-beta).
pub fn mp2(mo: &MoIntegrals, window: &OrbitalWindow) -> Result<CorrelatedSolution, CorrelationError> {
    window.validate(mo)?;
    check_gap(mo, window)?;
    let mut ss = 0.0;
    let mut os = 0.0;
    match mo.mode {
        SpinMode::Restricted => {
            let eps = &mo.orbital_energies[0];
            let g = &mo.blocks[0];
            for &i in &window.occ[0] {
                for &j in &window.occ[0] {
                    for &a in &window.virt[0] {
                        for &b in &window.virt[0] {
                            let iajb = g.get(i, a, j, b);
                            let ibja = g.get(i, b, j, a);
                            let d = eps[i] + eps[j] - eps[a] - eps[b];
                            os += iajb * iajb / d;
                            ss += iajb * (iajb - ibja) / d;
                        }
                    }
                }
            }
        }
        SpinMode::Unrestricted => {
            // Same-spin contributions, one per channel.
            for ch in 0..2 {
                let eps = &mo.orbital_energies[ch];
                let g = &mo.blocks[ch];
                for &i in &window.occ[ch] {
                    for &j in &window.occ[ch] {
                        for &a in &window.virt[ch] {
                            for &b in &window.virt[ch] {
                                let iajb = g.get(i, a, j, b);
                                let ibja = g.get(i, b, j, a);
                                let d = eps[i] + eps[j] - eps[a] - eps[b];
                                ss += 0.5 * iajb * (iajb - ibja) / d;
                            }
                        }
                    }
                }
            }
            // Opposite-spin contribution from the (aa|bb) block.
            let (ea, eb) = (&mo.orbital_energies[0], &mo.orbital_energies[1]);
            let g = &mo.blocks[2];
            for &i in &window.occ[0] {
                for &a in &window.virt[0] {
                    for &j in &window.occ[1] {
                        for &b in &window.virt[1] {
                            let iajb = g.get(i, a, j, b);
                            let d = ea[i] + eb[j] - ea[a] - eb[b];
                            os += iajb * iajb / d;
                        }
                    }
                }
            }
        }
    }
    let amplitudes = SpinOrbitalSpace::from_mo(mo, window).ok().map(|s| s.mp2());
    Ok(CorrelatedSolution {
        method: Method::Mp2,
        correlation_energy: ss + os,
        spin_components: vec![
            ("same-spin".to_string(), ss),
            ("opposite-spin".to_string(), os),
        ],
        amplitudes,
        iterations: 0,
        converged: true,
    })
}

/// Antisymmetrized spin-orbital problem: occupied spin orbitals first,
/// then virtuals; two-electron integrals stored as physicists'
/// antisymmetrized elements <pq||rs>.
#[derive(Debug, Clone)]
pub struct SpinOrbitalSpace {
    pub n: usize,
    pub n_occ: usize,
    /// Spin label per orbital (0 = alpha, 1 = beta).
    pub spins: Vec<u8>,
    /// Effective one-electron operator (includes any frozen-orbital mean
    /// field); used by exact diagonalization.
    pub h: DMatrix<f64>,
    /// Fock eigenvalues (semicanonical diagonal).
    pub fock_diag: Vec<f64>,
    eri: Vec<f64>,
}

impl SpinOrbitalSpace {
    pub fn new(
        spins: Vec<u8>,
        n_occ: usize,
        h: DMatrix<f64>,
        fock_diag: Vec<f64>,
        eri_antisymmetrized: Vec<f64>,
    ) -> Self {
        let n = spins.len();
        assert_eq!(h.nrows(), n);
        assert_eq!(fock_diag.len(), n);
        assert_eq!(eri_antisymmetrized.len(), n * n * n * n);
        SpinOrbitalSpace {
            n,
            n_occ,
            spins,
            h,
            fock_diag,
            eri: eri_antisymmetrized,
        }
    }

    /// <pq||rs> in physicists' notation.
    #[inline]
    pub fn g(&self, p: usize, q: usize, r: usize, s: usize) -> f64 {
        self.eri[((p * self.n + q) * self.n + r) * self.n + s]
    }

    /// Build the spin-orbital space for the window of a canonical
    /// mean-field solution. Orbitals outside the window that are occupied
    /// are folded into the effective one-electron operator.
    pub fn from_mo(mo: &MoIntegrals, window: &OrbitalWindow) -> Result<Self, CorrelationError> {
        window.validate(mo)?;
        let ch_of = |spin: usize| spin.min(mo.h.len() - 1);
        // Chemists' (pq|rs) with p,q of spin s1 and r,s of spin s2.
        let chem = |p: usize, q: usize, s1: usize, r: usize, s: usize, s2: usize| -> f64 {
            match mo.mode {
                SpinMode::Restricted => mo.blocks[0].get(p, q, r, s),
                SpinMode::Unrestricted => match (s1, s2) {
                    (0, 0) => mo.blocks[0].get(p, q, r, s),
                    (1, 1) => mo.blocks[1].get(p, q, r, s),
                    (0, 1) => mo.blocks[2].get(p, q, r, s),
                    _ => mo.blocks[2].get(r, s, p, q),
                },
            }
        };

        // Spin-orbital list: alpha occ, beta occ, alpha virt, beta virt.
        let mut orbitals: Vec<(u8, usize)> = Vec::new();
        for spin in 0..2usize {
            for &i in &window.occ[ch_of(spin)] {
                orbitals.push((spin as u8, i));
            }
        }
        let n_occ = orbitals.len();
        for spin in 0..2usize {
            for &a in &window.virt[ch_of(spin)] {
                orbitals.push((spin as u8, a));
            }
        }
        let n = orbitals.len();

        // Frozen occupied spin orbitals (outside the window).
        let mut frozen: Vec<(u8, usize)> = Vec::new();
        for spin in 0..2usize {
            let ch = ch_of(spin);
            for i in 0..mo.n_occ[ch] {
                if !window.occ[ch].contains(&i) {
                    frozen.push((spin as u8, i));
                }
            }
        }

        let spins: Vec<u8> = orbitals.iter().map(|&(s, _)| s).collect();
        let fock_diag: Vec<f64> = orbitals
            .iter()
            .map(|&(s, p)| mo.orbital_energies[ch_of(s as usize)][p])
            .collect();

        // Effective one-electron operator: bare h plus the frozen-orbital
        // Coulomb/exchange field.
        let mut h = DMatrix::zeros(n, n);
        for p in 0..n {
            let (sp, op) = orbitals[p];
            for q in 0..n {
                let (sq, oq) = orbitals[q];
                if sp != sq {
                    continue;
                }
                let mut v = mo.h[ch_of(sp as usize)][(op, oq)];
                for &(si, oi) in &frozen {
                    v += chem(op, oq, sp as usize, oi, oi, si as usize);
                    if si == sp {
                        v -= chem(op, oi, sp as usize, oi, oq, si as usize);
                    }
                }
                h[(p, q)] = v;
            }
        }

        // Antisymmetrized <pq||rs> = (pr|qs) - (ps|qr) with spin deltas.
        let mut eri = vec![0.0; n * n * n * n];
        for p in 0..n {
            let (sp, op) = orbitals[p];
            for q in 0..n {
                let (sq, oq) = orbitals[q];
                for r in 0..n {
                    let (sr, or) = orbitals[r];
                    for s in 0..n {
                        let (ss, os_) = orbitals[s];
                        let mut v = 0.0;
                        if sp == sr && sq == ss {
                            v += chem(op, or, sp as usize, oq, os_, sq as usize);
                        }
                        if sp == ss && sq == sr {
                            v -= chem(op, os_, sp as usize, oq, or, sq as usize);
                        }
                        eri[((p * n + q) * n + r) * n + s] = v;
                    }
                }
            }
        }
        Ok(SpinOrbitalSpace { n, n_occ, spins, h, fock_diag, eri })
    }

    /// Electronic energy of the reference determinant (first `n_occ`
    /// orbitals), excluding nuclear repulsion and any frozen-orbital
    /// constant.
    pub fn reference_energy(&self) -> f64 {
        let mut e = 0.0;
        for i in 0..self.n_occ {
            e += self.h[(i, i)];
            for j in 0..self.n_occ {
                e += 0.5 * self.g(i, j, i, j);
            }
        }
        e
    }

    /// Second-order perturbation amplitudes and energy.
    pub fn mp2(&self) -> SoAmplitudes {
        let o = self.n_occ;
        let v = self.n - o;
        let mut t2 = vec![0.0; o * o * v * v];
        let mut energy = 0.0;
        for i in 0..o {
            for j in 0..o {
                for a in 0..v {
                    for b in 0..v {
                        let g = self.g(i, j, o + a, o + b);
                        let d = self.fock_diag[i] + self.fock_diag[j]
                            - self.fock_diag[o + a]
                            - self.fock_diag[o + b];
                        let t = g / d;
                        t2[((i * o + j) * v + a) * v + b] = t;
                        energy += 0.25 * g * t;
                    }
                }
            }
        }
        SoAmplitudes {
            t1: vec![0.0; o * v],
            t2,
            energy,
            iterations: 0,
            converged: true,
        }
    }

    /// Coupled cluster with single and double excitations, standard
    /// one- and two-body intermediates, diagonal (semicanonical) Fock.
    #[cfg(feature = "ccsd")]
    pub fn ccsd(&self, max_iterations: usize, tolerance: f64) -> Result<SoAmplitudes, CorrelationError> {
        let o = self.n_occ;
        let v = self.n - o;
        let f = &self.fock_diag;
        let t2i = |i: usize, j: usize, a: usize, b: usize| ((i * o + j) * v + a) * v + b;
        let t1i = |i: usize, a: usize| i * v + a;

        let mut t1 = vec![0.0; o * v];
        let mut t2 = self.mp2().t2;
        let mut e_old = 0.0;
        let mut converged = false;
        let mut iterations = 0;
        let mut residual_history = Vec::new();

        for iter in 0..max_iterations {
            iterations = iter + 1;
            // Effective doubles: tau-tilde and tau.
            let mut tau_t = t2.clone();
            let mut tau = t2.clone();
            for i in 0..o {
                for j in 0..o {
                    for a in 0..v {
                        for b in 0..v {
                            let x = t1[t1i(i, a)] * t1[t1i(j, b)] - t1[t1i(i, b)] * t1[t1i(j, a)];
                            tau_t[t2i(i, j, a, b)] += 0.5 * x;
                            tau[t2i(i, j, a, b)] += x;
                        }
                    }
                }
            }

            // One-body intermediates.
            let mut fae = vec![0.0; v * v];
            for a in 0..v {
                for e in 0..v {
                    let mut x = 0.0;
                    for m in 0..o {
                        for ff in 0..v {
                            x += t1[t1i(m, ff)] * self.g(m, o + a, o + ff, o + e);
                        }
                    }
                    for m in 0..o {
                        for n in 0..o {
                            for ff in 0..v {
                                x -= 0.5 * tau_t[t2i(m, n, a, ff)] * self.g(m, n, o + e, o + ff);
                            }
                        }
                    }
                    fae[a * v + e] = x;
                }
            }
            let mut fmi = vec![0.0; o * o];
            for m in 0..o {
                for i in 0..o {
                    let mut x = 0.0;
                    for n in 0..o {
                        for e in 0..v {
                            x += t1[t1i(n, e)] * self.g(m, n, i, o + e);
                        }
                    }
                    for n in 0..o {
                        for e in 0..v {
                            for ff in 0..v {
                                x += 0.5 * tau_t[t2i(i, n, e, ff)] * self.g(m, n, o + e, o + ff);
                            }
                        }
                    }
                    fmi[m * o + i] = x;
                }
            }
            let mut fme = vec![0.0; o * v];
            for m in 0..o {
                for e in 0..v {
                    let mut x = 0.0;
                    for n in 0..o {
                        for ff in 0..v {
                            x += t1[t1i(n, ff)] * self.g(m, n, o + e, o + ff);
                        }
                    }
                    fme[m * v + e] = x;
                }
            }

            // Two-body intermediates.
            let mut w_oooo = vec![0.0; o * o * o * o];
            for m in 0..o {
                for n in 0..o {
                    for i in 0..o {
                        for j in 0..o {
                            let mut x = self.g(m, n, i, j);
                            for e in 0..v {
                                x += t1[t1i(j, e)] * self.g(m, n, i, o + e)
                                    - t1[t1i(i, e)] * self.g(m, n, j, o + e);
                            }
                            for e in 0..v {
                                for ff in 0..v {
                                    x += 0.25 * tau[t2i(i, j, e, ff)] * self.g(m, n, o + e, o + ff);
                                }
                            }
                            w_oooo[((m * o + n) * o + i) * o + j] = x;
                        }
                    }
                }
            }
            let mut w_vvvv = vec![0.0; v * v * v * v];
            for a in 0..v {
                for b in 0..v {
                    for e in 0..v {
                        for ff in 0..v {
                            let mut x = self.g(o + a, o + b, o + e, o + ff);
                            for m in 0..o {
                                x -= t1[t1i(m, b)] * self.g(o + a, m, o + e, o + ff)
                                    - t1[t1i(m, a)] * self.g(o + b, m, o + e, o + ff);
                            }
                            for m in 0..o {
                                for n in 0..o {
                                    x += 0.25 * tau[t2i(m, n, a, b)] * self.g(m, n, o + e, o + ff);
                                }
                            }
                            w_vvvv[((a * v + b) * v + e) * v + ff] = x;
                        }
                    }
                }
            }
            let mut w_ovvo = vec![0.0; o * v * v * o];
            for m in 0..o {
                for b in 0..v {
                    for e in 0..v {
                        for j in 0..o {
                            let mut x = self.g(m, o + b, o + e, j);
                            for ff in 0..v {
                                x += t1[t1i(j, ff)] * self.g(m, o + b, o + e, o + ff);
                            }
                            for n in 0..o {
                                x -= t1[t1i(n, b)] * self.g(m, n, o + e, j);
                            }
                            for n in 0..o {
                                for ff in 0..v {
                                    x -= (0.5 * t2[t2i(j, n, ff, b)]
                                        + t1[t1i(j, ff)] * t1[t1i(n, b)])
                                        * self.g(m, n, o + e, o + ff);
                                }
                            }
                            w_ovvo[((m * v + b) * v + e) * o + j] = x;
                        }
                    }
                }
            }

            // Singles update.
            let mut t1_new = vec![0.0; o * v];
            for i in 0..o {
                for a in 0..v {
                    let mut rhs = 0.0;
                    for e in 0..v {
                        rhs += t1[t1i(i, e)] * fae[a * v + e];
                    }
                    for m in 0..o {
                        rhs -= t1[t1i(m, a)] * fmi[m * o + i];
                    }
                    for m in 0..o {
                        for e in 0..v {
                            rhs += t2[t2i(i, m, a, e)] * fme[m * v + e];
                        }
                    }
                    for n in 0..o {
                        for ff in 0..v {
                            rhs -= t1[t1i(n, ff)] * self.g(n, o + a, i, o + ff);
                        }
                    }
                    for m in 0..o {
                        for e in 0..v {
                            for ff in 0..v {
                                rhs -= 0.5 * t2[t2i(i, m, e, ff)] * self.g(m, o + a, o + e, o + ff);
                            }
                        }
                    }
                    for m in 0..o {
                        for e in 0..v {
                            for n in 0..o {
                                rhs -= 0.5 * t2[t2i(m, n, a, e)] * self.g(n, m, o + e, i);
                            }
                        }
                    }
                    t1_new[t1i(i, a)] = rhs / (f[i] - f[o + a]);
                }
            }

            // Doubles update. Fold the singles dressing into the one-body
            // intermediates first.
            let mut fae_d = fae.clone();
            for b in 0..v {
                for e in 0..v {
                    let mut x = 0.0;
                    for m in 0..o {
                        x += t1[t1i(m, b)] * fme[m * v + e];
                    }
                    fae_d[b * v + e] -= 0.5 * x;
                }
            }
            let mut fmi_d = fmi.clone();
            for m in 0..o {
                for j in 0..o {
                    let mut x = 0.0;
                    for e in 0..v {
                        x += t1[t1i(j, e)] * fme[m * v + e];
                    }
                    fmi_d[m * o + j] += 0.5 * x;
                }
            }

            let mut t2_new = vec![0.0; o * o * v * v];
            for i in 0..o {
                for j in 0..o {
                    for a in 0..v {
                        for b in 0..v {
                            let mut rhs = self.g(i, j, o + a, o + b);
                            for e in 0..v {
                                rhs += t2[t2i(i, j, a, e)] * fae_d[b * v + e]
                                    - t2[t2i(i, j, b, e)] * fae_d[a * v + e];
                            }
                            for m in 0..o {
                                rhs -= t2[t2i(i, m, a, b)] * fmi_d[m * o + j]
                                    - t2[t2i(j, m, a, b)] * fmi_d[m * o + i];
                            }
                            for m in 0..o {
                                for n in 0..o {
                                    rhs += 0.5
                                        * tau[t2i(m, n, a, b)]
                                        * w_oooo[((m * o + n) * o + i) * o + j];
                                }
                            }
                            for e in 0..v {
                                for ff in 0..v {
                                    rhs += 0.5
                                        * tau[t2i(i, j, e, ff)]
                                        * w_vvvv[((a * v + b) * v + e) * v + ff];
                                }
                            }
                            // P(ij)P(ab) ring and singles-coupling terms.
                            for m in 0..o {
                                for e in 0..v {
                                    rhs += t2[t2i(i, m, a, e)] * w_ovvo[((m * v + b) * v + e) * o + j]
                                        - t1[t1i(i, e)] * t1[t1i(m, a)] * self.g(m, o + b, o + e, j);
                                    rhs -= t2[t2i(j, m, a, e)] * w_ovvo[((m * v + b) * v + e) * o + i]
                                        - t1[t1i(j, e)] * t1[t1i(m, a)] * self.g(m, o + b, o + e, i);
                                    rhs -= t2[t2i(i, m, b, e)] * w_ovvo[((m * v + a) * v + e) * o + j]
                                        - t1[t1i(i, e)] * t1[t1i(m, b)] * self.g(m, o + a, o + e, j);
                                    rhs += t2[t2i(j, m, b, e)] * w_ovvo[((m * v + a) * v + e) * o + i]
                                        - t1[t1i(j, e)] * t1[t1i(m, b)] * self.g(m, o + a, o + e, i);
                                }
                            }
                            for e in 0..v {
                                rhs += t1[t1i(i, e)] * self.g(o + a, o + b, o + e, j)
                                    - t1[t1i(j, e)] * self.g(o + a, o + b, o + e, i);
                            }
                            for m in 0..o {
                                rhs -= t1[t1i(m, a)] * self.g(m, o + b, i, j)
                                    - t1[t1i(m, b)] * self.g(m, o + a, i, j);
                            }
                            let d = f[i] + f[j] - f[o + a] - f[o + b];
                            t2_new[t2i(i, j, a, b)] = rhs / d;
                        }
                    }
                }
            }

            let mut delta: f64 = 0.0;
            for (new, old) in t2_new.iter().zip(t2.iter()) {
                delta += (new - old) * (new - old);
            }
            for (new, old) in t1_new.iter().zip(t1.iter()) {
                delta += (new - old) * (new - old);
            }
            let delta = delta.sqrt();
            residual_history.push(delta);
            t1 = t1_new;
            t2 = t2_new;
            let energy = self.amplitude_energy(&t1, &t2);
            if iter > 0 && (energy - e_old).abs() < tolerance && delta < tolerance.sqrt() * 1e-2 {
                converged = true;
                e_old = energy;
                break;
            }
            e_old = energy;
        }

        if !converged {
            return Err(CorrelationError::NotConverged {
                iterations,
                history: residual_history,
            });
        }
        Ok(SoAmplitudes {
            t1,
            t2,
            energy: e_old,
            iterations,
            converged,
        })
    }

    /// Correlation energy of an amplitude set against this space.
    pub fn amplitude_energy(&self, t1: &[f64], t2: &[f64]) -> f64 {
        let o = self.n_occ;
        let v = self.n - o;
        let mut e = 0.0;
        for i in 0..o {
            for j in 0..o {
                for a in 0..v {
                    for b in 0..v {
                        let g = self.g(i, j, o + a, o + b);
                        e += 0.25 * g * t2[((i * o + j) * v + a) * v + b];
                        e += 0.5 * g * t1[i * v + a] * t1[j * v + b];
                    }
                }
            }
        }
        e
    }

    /// Exact diagonalization in the determinant basis with the reference
    /// particle and spin numbers. Returns (correlation energy, reference
    /// determinant energy).
    pub fn fci(&self) -> Result<(f64, f64), CorrelationError> {
        let (_, _, e0, e_ref) = self.fci_solve()?;
        Ok((e0 - e_ref, e_ref))
    }

    fn fci_solve(&self) -> Result<(Vec<u32>, Vec<f64>, f64, f64), CorrelationError> {
        if self.n > 12 {
            return Err(CorrelationError::FciTooLarge(self.n));
        }
        let n = self.n;
        let n_alpha = (0..self.n_occ).filter(|&p| self.spins[p] == 0).count();
        let n_elec = self.n_occ;
        let alpha_mask: u32 = (0..n).filter(|&p| self.spins[p] == 0).map(|p| 1u32 << p).sum();

        let dets: Vec<u32> = (0u32..(1 << n))
            .filter(|d| {
                d.count_ones() as usize == n_elec
                    && (d & alpha_mask).count_ones() as usize == n_alpha
            })
            .collect();
        let nd = dets.len();
        let mut ham = DMatrix::zeros(nd, nd);
        for (ii, &d1) in dets.iter().enumerate() {
            for (jj, &d2) in dets.iter().enumerate().skip(ii) {
                let v = self.slater_condon(d1, d2);
                ham[(ii, jj)] = v;
                ham[(jj, ii)] = v;
            }
        }
        let eig = ham.symmetric_eigen();
        let mut lowest = 0;
        for k in 1..nd {
            if eig.eigenvalues[k] < eig.eigenvalues[lowest] {
                lowest = k;
            }
        }
        let e0 = eig.eigenvalues[lowest];
        let ground: Vec<f64> = eig.eigenvectors.column(lowest).iter().cloned().collect();
        let reference: u32 = (0..self.n_occ).map(|p| 1u32 << p).sum();
        let e_ref = self.slater_condon(reference, reference);
        Ok((dets, ground, e0, e_ref))
    }

    /// Effective cluster amplitudes from the exact ground state:
    /// t1 = c1/c0, t2 = c2/c0 minus the disconnected singles product.
    pub fn fci_amplitudes(&self) -> Result<SoAmplitudes, CorrelationError> {
        let (dets, ground, e0, e_ref) = self.fci_solve()?;
        let o = self.n_occ;
        let v = self.n - o;
        let reference: u32 = (0..o).map(|p| 1u32 << p).sum();
        let c0 = dets
            .iter()
            .zip(ground.iter())
            .find(|(&d, _)| d == reference)
            .map(|(_, &c)| c)
            .unwrap_or(0.0);
        if c0.abs() < 1e-8 {
            return Err(CorrelationError::VanishingReference(c0.abs()));
        }
        let mut t1 = vec![0.0; o * v];
        let mut c2 = vec![0.0; o * o * v * v];
        let t2i = |i: usize, j: usize, a: usize, b: usize| ((i * o + j) * v + a) * v + b;
        for (&d, &c) in dets.iter().zip(ground.iter()) {
            let holes = reference & !d;
            let parts = d & !reference;
            match holes.count_ones() {
                1 => {
                    let i = holes.trailing_zeros() as usize;
                    let a = parts.trailing_zeros() as usize;
                    t1[i * v + (a - o)] = perm_sign(reference, i, a) * c / c0;
                }
                2 => {
                    let i = holes.trailing_zeros() as usize;
                    let j = (31 - holes.leading_zeros()) as usize;
                    let a = parts.trailing_zeros() as usize;
                    let b = (31 - parts.leading_zeros()) as usize;
                    let sign1 = perm_sign(reference, i, a);
                    let mid = (reference & !(1 << i)) | (1 << a);
                    let sign2 = perm_sign(mid, j, b);
                    let amp = sign1 * sign2 * c / c0;
                    let (a, b) = (a - o, b - o);
                    c2[t2i(i, j, a, b)] = amp;
                    c2[t2i(j, i, a, b)] = -amp;
                    c2[t2i(i, j, b, a)] = -amp;
                    c2[t2i(j, i, b, a)] = amp;
                }
                _ => {}
            }
        }
        let mut t2 = c2;
        for i in 0..o {
            for j in 0..o {
                for a in 0..v {
                    for b in 0..v {
                        t2[t2i(i, j, a, b)] -=
                            t1[i * v + a] * t1[j * v + b] - t1[i * v + b] * t1[j * v + a];
                    }
                }
            }
        }
        Ok(SoAmplitudes {
            t1,
            t2,
            energy: e0 - e_ref,
            iterations: 0,
            converged: true,
        })
    }

    /// Matrix element <D1|H|D2> between two determinant bitmasks.
    fn slater_condon(&self, d1: u32, d2: u32) -> f64 {
        let holes_mask = d1 & !d2;
        let parts_mask = d2 & !d1;
        let n_diff = holes_mask.count_ones();
        match n_diff {
            0 => {
                let occ: Vec<usize> = (0..self.n).filter(|&p| d1 & (1 << p) != 0).collect();
                let mut e = 0.0;
                for &p in &occ {
                    e += self.h[(p, p)];
                    for &q in &occ {
                        e += 0.5 * self.g(p, q, p, q);
                    }
                }
                e
            }
            1 => {
                let p = holes_mask.trailing_zeros() as usize;
                let r = parts_mask.trailing_zeros() as usize;
                let sign = perm_sign(d1, p, r);
                let mut v = self.h[(p, r)];
                for q in 0..self.n {
                    if d1 & d2 & (1 << q) != 0 {
                        v += self.g(p, q, r, q);
                    }
                }
                sign * v
            }
            2 => {
                let p1 = holes_mask.trailing_zeros() as usize;
                let p2 = (31 - holes_mask.leading_zeros()) as usize;
                let q1 = parts_mask.trailing_zeros() as usize;
                let q2 = (31 - parts_mask.leading_zeros()) as usize;
                // Move p1 -> q1 first, then p2 -> q2 in the intermediate.
                let sign1 = perm_sign(d1, p1, q1);
                let mid = (d1 & !(1 << p1)) | (1 << q1);
                let sign2 = perm_sign(mid, p2, q2);
                sign1 * sign2 * self.g(p1, p2, q1, q2)
            }
            _ => 0.0,
        }
    }
}

/// Parity of moving an electron from `from` to `to` within determinant
/// `det`: (-1)^(occupied orbitals strictly between the two positions).
fn perm_sign(det: u32, from: usize, to: usize) -> f64 {
    let (lo, hi) = if from < to { (from, to) } else { (to, from) };
    let between = if hi > lo + 1 {
        let mask = ((1u32 << hi) - 1) & !((1u32 << (lo + 1)) - 1);
        (det & mask).count_ones()
    } else {
        0
    };
    if between % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Spin-orbital amplitude set with its correlation energy.
#[derive(Debug, Clone)]
pub struct SoAmplitudes {
    /// Singles, occ x virt row-major.
    pub t1: Vec<f64>,
    /// Doubles, (occ, occ, virt, virt) row-major.
    pub t2: Vec<f64>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Coupled cluster (singles and doubles) over the given window.
#[cfg(feature = "ccsd")]
pub fn ccsd(mo: &MoIntegrals, window: &OrbitalWindow) -> Result<CorrelatedSolution, CorrelationError> {
    check_gap(mo, window)?;
    let space = SpinOrbitalSpace::from_mo(mo, window)?;
    let amps = space.ccsd(100, 1e-10)?;
    Ok(CorrelatedSolution {
        method: Method::Ccsd,
        correlation_energy: amps.energy,
        spin_components: Vec::new(),
        iterations: amps.iterations,
        converged: amps.converged,
        amplitudes: Some(amps),
    })
}

/// Exact diagonalization over the given window (capped at 12 spin
/// orbitals). Intended as a correctness oracle for the iterative solvers.
pub fn fci_oracle(mo: &MoIntegrals, window: &OrbitalWindow) -> Result<CorrelatedSolution, CorrelationError> {
    let space = SpinOrbitalSpace::from_mo(mo, window)?;
    let (corr, _) = space.fci()?;
    let amplitudes = space.fci_amplitudes().ok();
    Ok(CorrelatedSolution {
        method: Method::Fci,
        correlation_energy: corr,
        spin_components: Vec::new(),
        amplitudes,
        iterations: 0,
        converged: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::elements::Element;
    use crate::integrals::{compute_integrals, Geometry, DEFAULT_ERI_CAP};
    use crate::scf::{mo_transform, run_scf, run_scf_mode, ScfOptions, SystemSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn el(s: &str) -> Element {
        Element::from_symbol(s).unwrap()
    }

    fn solve(geom: Geometry, elements: &[Element]) -> (MoIntegrals, f64) {
        let basis = BasisSet::builtin("sto-3g", elements).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf(&spec, &ints, &ScfOptions::default()).unwrap();
        assert!(r.converged);
        (mo_transform(&ints, &r).unwrap(), r.energy)
    }

    fn h2() -> Geometry {
        vec![
            (el("H"), Vector3::zeros()),
            (el("H"), Vector3::new(0.0, 0.0, 0.7414)),
        ]
    }

    fn water() -> Geometry {
        let b = crate::ANGSTROM_TO_BOHR;
        vec![
            (el("O"), Vector3::new(0.0, -0.143225816552, 0.0) / b),
            (el("H"), Vector3::new(1.638036840407, 1.136548822547, 0.0) / b),
            (el("H"), Vector3::new(-1.638036840407, 1.136548822547, 0.0) / b),
        ]
    }

    #[test]
    fn h2_mp2_matches_reference() {
        let (mo, _) = solve(h2(), &[el("H")]);
        let sol = mp2(&mo, &OrbitalWindow::full(&mo)).unwrap();
        // Frozen reference value from tests/fixtures/reference_energies.json.
        assert_abs_diff_eq!(sol.correlation_energy, -0.0131707652, epsilon = 1e-8);
    }

    #[test]
    fn water_mp2_matches_reference() {
        let (mo, _) = solve(water(), &[el("H"), el("O")]);
        let sol = mp2(&mo, &OrbitalWindow::full(&mo)).unwrap();
        assert_abs_diff_eq!(sol.correlation_energy, -0.0491496454, epsilon = 1e-7);
        // Spin components add up.
        let total: f64 = sol.spin_components.iter().map(|(_, e)| e).sum();
        assert_abs_diff_eq!(total, sol.correlation_energy, epsilon = 1e-12);
    }

    #[cfg(feature = "ccsd")]
    #[test]
    fn water_ccsd_matches_reference() {
        let (mo, _) = solve(water(), &[el("H"), el("O")]);
        let sol = ccsd(&mo, &OrbitalWindow::full(&mo)).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.correlation_energy, -0.0706801013, epsilon = 1e-7);
    }

    #[cfg(feature = "ccsd")]
    #[test]
    fn h2_ccsd_equals_exact_diagonalization() {
        // For two electrons, doubles-only CC is exact.
        let (mo, _) = solve(h2(), &[el("H")]);
        let w = OrbitalWindow::full(&mo);
        let cc = ccsd(&mo, &w).unwrap();
        let fci = fci_oracle(&mo, &w).unwrap();
        assert_abs_diff_eq!(cc.correlation_energy, fci.correlation_energy, epsilon = 1e-8);
    }

    #[test]
    fn spin_orbital_mp2_matches_spatial() {
        let (mo, _) = solve(water(), &[el("H"), el("O")]);
        let w = OrbitalWindow::full(&mo);
        let spatial = mp2(&mo, &w).unwrap();
        let space = SpinOrbitalSpace::from_mo(&mo, &w).unwrap();
        let so = space.mp2();
        assert_abs_diff_eq!(so.energy, spatial.correlation_energy, epsilon = 1e-10);
    }

    #[test]
    fn reference_determinant_energy_matches_mean_field() {
        let (mo, e_hf) = solve(water(), &[el("H"), el("O")]);
        let geom = water();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let space = SpinOrbitalSpace::from_mo(&mo, &OrbitalWindow::full(&mo)).unwrap();
        assert_abs_diff_eq!(
            space.reference_energy() + ints.nuclear_repulsion,
            e_hf,
            epsilon = 1e-9
        );
    }

    #[test]
    fn exact_diagonalization_is_below_iterative_methods() {
        // Core-frozen water fits the 12-spin-orbital cap.
        let (mo, _) = solve(water(), &[el("H"), el("O")]);
        let w = OrbitalWindow::frozen_core(&mo, 1);
        let fci = fci_oracle(&mo, &w).unwrap();
        let pt2 = mp2(&mo, &w).unwrap();
        assert!(fci.correlation_energy < 0.0);
        #[cfg(feature = "ccsd")]
        {
            let cc = ccsd(&mo, &w).unwrap();
            assert!(fci.correlation_energy <= cc.correlation_energy + 1e-10);
        }
        // Frozen-core recovers less correlation than the full window.
        let full = mp2(&mo, &OrbitalWindow::full(&mo)).unwrap();
        assert!(pt2.correlation_energy > full.correlation_energy);
    }

    #[test]
    fn mp2_is_size_consistent() {
        let one = h2();
        let mut two = one.clone();
        for (_, p) in one.iter() {
            two.push((el("H"), p + Vector3::new(100.0, 0.0, 0.0)));
        }
        let (mo1, _) = solve(one, &[el("H")]);
        let (mo2, _) = solve(two, &[el("H")]);
        let e1 = mp2(&mo1, &OrbitalWindow::full(&mo1)).unwrap().correlation_energy;
        let e2 = mp2(&mo2, &OrbitalWindow::full(&mo2)).unwrap().correlation_energy;
        assert_abs_diff_eq!(e2, 2.0 * e1, epsilon = 1e-8);
    }

    #[test]
    fn exact_diagonalization_is_size_consistent() {
        let one = h2();
        let mut two = one.clone();
        for (_, p) in one.iter() {
            two.push((el("H"), p + Vector3::new(100.0, 0.0, 0.0)));
        }
        let (mo1, e1_hf) = solve(one, &[el("H")]);
        let (mo2, e2_hf) = solve(two, &[el("H")]);
        let f1 = fci_oracle(&mo1, &OrbitalWindow::full(&mo1)).unwrap();
        let f2 = fci_oracle(&mo2, &OrbitalWindow::full(&mo2)).unwrap();
        let total1 = e1_hf + f1.correlation_energy;
        let total2 = e2_hf + f2.correlation_energy;
        assert_abs_diff_eq!(total2, 2.0 * total1, epsilon = 1e-7);
    }

    #[test]
    fn unrestricted_mp2_matches_restricted_for_closed_shell() {
        let geom = water();
        let basis = BasisSet::builtin("sto-3g", &[el("H"), el("O")]).unwrap();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let spec = SystemSpec::new(geom, "sto-3g", 0, 0).unwrap();
        let r = run_scf_mode(&spec, &ints, &ScfOptions::default(), crate::scf::SpinMode::Unrestricted).unwrap();
        let mo_u = mo_transform(&ints, &r).unwrap();
        let e_u = mp2(&mo_u, &OrbitalWindow::full(&mo_u)).unwrap().correlation_energy;
        let (mo_r, _) = solve(water(), &[el("H"), el("O")]);
        let e_r = mp2(&mo_r, &OrbitalWindow::full(&mo_r)).unwrap().correlation_energy;
        assert_abs_diff_eq!(e_u, e_r, epsilon = 1e-8);
    }

    #[test]
    fn degenerate_gap_is_detected_and_named() {
        let (mut mo, _) = solve(h2(), &[el("H")]);
        // Collapse the gap artificially.
        let homo = mo.orbital_energies[0][0];
        mo.orbital_energies[0][1] = homo;
        match mp2(&mo, &OrbitalWindow::full(&mo)) {
            Err(CorrelationError::DegenerateGap { occ, virt, .. }) => {
                assert_eq!((occ, virt), (0, 1));
            }
            other => panic!("expected DegenerateGap, got {other:?}"),
        }
    }

    #[test]
    fn invalid_window_is_rejected() {
        let (mo, _) = solve(h2(), &[el("H")]);
        let bad = OrbitalWindow {
            occ: vec![vec![0, 1]], // orbital 1 is virtual in H2/sto-3g
            virt: vec![vec![1]],
        };
        assert!(matches!(
            mp2(&mo, &bad),
            Err(CorrelationError::BadWindow(_))
        ));
    }

    #[test]
    fn fci_amplitudes_reproduce_two_electron_energy() {
        // For two electrons the cluster amplitudes are exact, so the
        // coupled-cluster energy expression evaluated on them recovers the
        // exact correlation energy.
        let (mo, _) = solve(h2(), &[el("H")]);
        let space = SpinOrbitalSpace::from_mo(&mo, &OrbitalWindow::full(&mo)).unwrap();
        let amps = space.fci_amplitudes().unwrap();
        let (corr, _) = space.fci().unwrap();
        assert_abs_diff_eq!(space.amplitude_energy(&amps.t1, &amps.t2), corr, epsilon = 1e-8);
    }

    #[test]
    fn fci_cap_is_enforced() {
        let (mo, _) = solve(water(), &[el("H"), el("O")]);
        assert!(matches!(
            fci_oracle(&mo, &OrbitalWindow::full(&mo)),
            Err(CorrelationError::FciTooLarge(14))
        ));
    }
}
