//! Molecular integrals over contracted Cartesian Gaussians: overlap,
//! kinetic, nuclear attraction, and the two-electron repulsion tensor.
//!
//! Evaluation uses the Hermite-Gaussian (McMurchie-Davidson) expansion.
//! Positions are accepted in angstrom at the API boundary and converted to
//! bohr internally; all matrix and tensor entries are in atomic units.

use crate::basis::{BasisError, BasisSet};
use crate::elements::Element;
use crate::ANGSTROM_TO_BOHR;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, Vector3};
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IntegralError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("basis dimension {0} exceeds the in-memory cap {1}; reduce the system or raise the cap")]
    DimensionOverCap(usize, usize),
    #[error("ERI fixture I/O failed: {0}")]
    FixtureIo(#[from] std::io::Error),
    #[error("ERI fixture dimension {found} does not match expected {expected}")]
    FixtureDimension { found: usize, expected: usize },
}

/// Atoms as (element, Cartesian position in angstrom).
pub type Geometry = Vec<(Element, Vector3<f64>)>;

/// Default cap on the basis dimension for in-memory ERI storage.
pub const DEFAULT_ERI_CAP: usize = 400;

/// One contracted Cartesian Gaussian basis function, fully normalized.
#[derive(Debug, Clone)]
pub struct BasisFunction {
    /// Center in bohr.
    pub center: Vector3<f64>,
    /// Cartesian powers (i, j, k).
    pub powers: [u32; 3],
    pub exponents: Vec<f64>,
    /// Contraction coefficients with primitive norms folded in.
    pub coefficients: Vec<f64>,
    /// Atom index this function sits on.
    pub atom: usize,
}

/// Expand a basis over a geometry into a list of normalized functions.
pub fn build_functions(geometry: &Geometry, basis: &BasisSet) -> Result<Vec<BasisFunction>, IntegralError> {
    let mut functions = Vec::new();
    for (atom_idx, (element, pos)) in geometry.iter().enumerate() {
        let center = pos * ANGSTROM_TO_BOHR;
        for shell in basis.shells_for(*element)? {
            for powers in cartesian_components(shell.l) {
                let mut coefficients = Vec::with_capacity(shell.exponents.len());
                for (&alpha, &c) in shell.exponents.iter().zip(&shell.coefficients) {
                    coefficients.push(c * primitive_norm(alpha, powers));
                }
                let mut f = BasisFunction {
                    center,
                    powers,
                    exponents: shell.exponents.clone(),
                    coefficients,
                    atom: atom_idx,
                };
                // Normalize the contracted function to unit self-overlap.
                let s = overlap_contracted(&f, &f);
                for c in &mut f.coefficients {
                    *c /= s.sqrt();
                }
                functions.push(f);
            }
        }
    }
    Ok(functions)
}

/// Canonical Cartesian component ordering for a shell of angular momentum l.
pub fn cartesian_components(l: u8) -> Vec<[u32; 3]> {
    let l = l as u32;
    let mut out = Vec::new();
    for i in (0..=l).rev() {
        for j in (0..=(l - i)).rev() {
            out.push([i, j, l - i - j]);
        }
    }
    out
}

fn double_factorial(n: i64) -> f64 {
    let mut acc = 1.0;
    let mut k = n;
    while k > 1 {
        acc *= k as f64;
        k -= 2;
    }
    acc
}

fn primitive_norm(alpha: f64, powers: [u32; 3]) -> f64 {
    let [i, j, k] = powers;
    let l = (i + j + k) as i32;
    let num = (2.0 * alpha / std::f64::consts::PI).powf(1.5) * (4.0 * alpha).powi(l);
    let den = double_factorial(2 * i as i64 - 1)
        * double_factorial(2 * j as i64 - 1)
        * double_factorial(2 * k as i64 - 1);
    (num / den).sqrt()
}

/// Hermite expansion coefficient E_t^{ij} along one dimension.
fn hermite_e(i: i32, j: i32, t: i32, qx: f64, a: f64, b: f64) -> f64 {
    let p = a + b;
    let q = a * b / p;
    if t < 0 || t > i + j {
        0.0
    } else if i == 0 && j == 0 && t == 0 {
        (-q * qx * qx).exp()
    } else if j == 0 {
        hermite_e(i - 1, j, t - 1, qx, a, b) / (2.0 * p)
            - (q * qx / a) * hermite_e(i - 1, j, t, qx, a, b)
            + (t + 1) as f64 * hermite_e(i - 1, j, t + 1, qx, a, b)
    } else {
        hermite_e(i, j - 1, t - 1, qx, a, b) / (2.0 * p)
            + (q * qx / b) * hermite_e(i, j - 1, t, qx, a, b)
            + (t + 1) as f64 * hermite_e(i, j - 1, t + 1, qx, a, b)
    }
}

/// Boys function F_m(t) for m = 0..=m_max.
pub fn boys(m_max: usize, t: f64) -> Vec<f64> {
    let mut f = vec![0.0; m_max + 1];
    if t < 1e-13 {
        for (m, fm) in f.iter_mut().enumerate() {
            *fm = 1.0 / (2.0 * m as f64 + 1.0) - t / (2.0 * m as f64 + 3.0);
        }
        return f;
    }
    if t > 35.0 {
        // Asymptotic F_0 plus upward recursion; exp(-t) is negligible-safe here.
        let emt = (-t).exp();
        f[0] = 0.5 * (std::f64::consts::PI / t).sqrt();
        for m in 0..m_max {
            f[m + 1] = ((2.0 * m as f64 + 1.0) * f[m] - emt) / (2.0 * t);
        }
        return f;
    }
    // Series for the highest order, then downward recursion (stable).
    let emt = (-t).exp();
    let mut term = 1.0 / (2.0 * m_max as f64 + 1.0);
    let mut sum = term;
    let mut k = 1.0;
    loop {
        term *= 2.0 * t / (2.0 * m_max as f64 + 2.0 * k + 1.0);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        k += 1.0;
    }
    f[m_max] = emt * sum;
    for m in (0..m_max).rev() {
        f[m] = (2.0 * t * f[m + 1] + emt) / (2.0 * m as f64 + 1.0);
    }
    f
}

/// Hermite Coulomb auxiliary integrals R_{tuv} at order n = 0.
struct HermiteCoulomb {
    /// Precomputed (-2p)^n F_n(p * rpc^2).
    base: Vec<f64>,
    pc: Vector3<f64>,
}

impl HermiteCoulomb {
    fn new(order: usize, p: f64, pc: Vector3<f64>) -> Self {
        let t = p * pc.norm_squared();
        let f = boys(order, t);
        let mut base = Vec::with_capacity(order + 1);
        let mut scale = 1.0;
        for fm in f {
            base.push(scale * fm);
            scale *= -2.0 * p;
        }
        HermiteCoulomb { base, pc }
    }

    fn get(&self, t: i32, u: i32, v: i32, n: usize) -> f64 {
        if t < 0 || u < 0 || v < 0 {
            return 0.0;
        }
        if t == 0 && u == 0 && v == 0 {
            return self.base[n];
        }
        if t == 0 && u == 0 {
            let mut val = self.pc.z * self.get(0, 0, v - 1, n + 1);
            if v > 1 {
                val += (v - 1) as f64 * self.get(0, 0, v - 2, n + 1);
            }
            val
        } else if t == 0 {
            let mut val = self.pc.y * self.get(0, u - 1, v, n + 1);
            if u > 1 {
                val += (u - 1) as f64 * self.get(0, u - 2, v, n + 1);
            }
            val
        } else {
            let mut val = self.pc.x * self.get(t - 1, u, v, n + 1);
            if t > 1 {
                val += (t - 1) as f64 * self.get(t - 2, u, v, n + 1);
            }
            val
        }
    }
}

fn overlap_prim(a: f64, pa: [u32; 3], ca: Vector3<f64>, b: f64, pb: [u32; 3], cb: Vector3<f64>) -> f64 {
    let p = a + b;
    let pre = (std::f64::consts::PI / p).powf(1.5);
    let mut s = pre;
    for d in 0..3 {
        s *= hermite_e(pa[d] as i32, pb[d] as i32, 0, ca[d] - cb[d], a, b);
    }
    s
}

fn kinetic_prim(a: f64, pa: [u32; 3], ca: Vector3<f64>, b: f64, pb: [u32; 3], cb: Vector3<f64>) -> f64 {
    let [l2, m2, n2] = pb;
    let s = |dp: [i32; 3]| -> f64 {
        let mut q = [0u32; 3];
        for d in 0..3 {
            let v = pb[d] as i32 + dp[d];
            if v < 0 {
                return 0.0;
            }
            q[d] = v as u32;
        }
        overlap_prim(a, pa, ca, b, q, cb)
    };
    let term0 = b * (2 * (l2 + m2 + n2) + 3) as f64 * s([0, 0, 0]);
    let term1 = -2.0 * b * b * (s([2, 0, 0]) + s([0, 2, 0]) + s([0, 0, 2]));
    let term2 = -0.5
        * ((l2 * l2.saturating_sub(1)) as f64 * s([-2, 0, 0])
            + (m2 * m2.saturating_sub(1)) as f64 * s([0, -2, 0])
            + (n2 * n2.saturating_sub(1)) as f64 * s([0, 0, -2]));
    term0 + term1 + term2
}

fn nuclear_prim(
    a: f64,
    pa: [u32; 3],
    ca: Vector3<f64>,
    b: f64,
    pb: [u32; 3],
    cb: Vector3<f64>,
    nucleus: Vector3<f64>,
) -> f64 {
    let p = a + b;
    let center = (a * ca + b * cb) / p;
    let order = (pa.iter().sum::<u32>() + pb.iter().sum::<u32>()) as usize;
    let rt = HermiteCoulomb::new(order, p, center - nucleus);
    let mut val = 0.0;
    for t in 0..=(pa[0] + pb[0]) as i32 {
        for u in 0..=(pa[1] + pb[1]) as i32 {
            for v in 0..=(pa[2] + pb[2]) as i32 {
                let e = hermite_e(pa[0] as i32, pb[0] as i32, t, ca.x - cb.x, a, b)
                    * hermite_e(pa[1] as i32, pb[1] as i32, u, ca.y - cb.y, a, b)
                    * hermite_e(pa[2] as i32, pb[2] as i32, v, ca.z - cb.z, a, b);
                val += e * rt.get(t, u, v, 0);
            }
        }
    }
    val * 2.0 * std::f64::consts::PI / p
}

fn overlap_contracted(f: &BasisFunction, g: &BasisFunction) -> f64 {
    let mut s = 0.0;
    for (&a, &ca) in f.exponents.iter().zip(&f.coefficients) {
        for (&b, &cb) in g.exponents.iter().zip(&g.coefficients) {
            s += ca * cb * overlap_prim(a, f.powers, f.center, b, g.powers, g.center);
        }
    }
    s
}

fn kinetic_contracted(f: &BasisFunction, g: &BasisFunction) -> f64 {
    let mut s = 0.0;
    for (&a, &ca) in f.exponents.iter().zip(&f.coefficients) {
        for (&b, &cb) in g.exponents.iter().zip(&g.coefficients) {
            s += ca * cb * kinetic_prim(a, f.powers, f.center, b, g.powers, g.center);
        }
    }
    s
}

fn nuclear_contracted(f: &BasisFunction, g: &BasisFunction, nuclei: &[(f64, Vector3<f64>)]) -> f64 {
    let mut s = 0.0;
    for (&a, &ca) in f.exponents.iter().zip(&f.coefficients) {
        for (&b, &cb) in g.exponents.iter().zip(&g.coefficients) {
            for &(charge, pos) in nuclei {
                s -= charge * ca * cb * nuclear_prim(a, f.powers, f.center, b, g.powers, g.center, pos);
            }
        }
    }
    s
}

fn eri_contracted(f: &BasisFunction, g: &BasisFunction, h: &BasisFunction, k: &BasisFunction) -> f64 {
    let mut total = 0.0;
    for (&a, &ca) in f.exponents.iter().zip(&f.coefficients) {
        for (&b, &cb) in g.exponents.iter().zip(&g.coefficients) {
            let p = a + b;
            let pc = (a * f.center + b * g.center) / p;
            for (&c, &cc) in h.exponents.iter().zip(&h.coefficients) {
                for (&d, &cd) in k.exponents.iter().zip(&k.coefficients) {
                    let q = c + d;
                    let qc = (c * h.center + d * k.center) / q;
                    let alpha = p * q / (p + q);
                    let order = (f.powers.iter().sum::<u32>()
                        + g.powers.iter().sum::<u32>()
                        + h.powers.iter().sum::<u32>()
                        + k.powers.iter().sum::<u32>()) as usize;
                    let rt = HermiteCoulomb::new(order, alpha, pc - qc);
                    let mut val = 0.0;
                    for t in 0..=(f.powers[0] + g.powers[0]) as i32 {
                        for u in 0..=(f.powers[1] + g.powers[1]) as i32 {
                            for v in 0..=(f.powers[2] + g.powers[2]) as i32 {
                                let e1 = hermite_e(f.powers[0] as i32, g.powers[0] as i32, t, f.center.x - g.center.x, a, b)
                                    * hermite_e(f.powers[1] as i32, g.powers[1] as i32, u, f.center.y - g.center.y, a, b)
                                    * hermite_e(f.powers[2] as i32, g.powers[2] as i32, v, f.center.z - g.center.z, a, b);
                                if e1 == 0.0 {
                                    continue;
                                }
                                for tau in 0..=(h.powers[0] + k.powers[0]) as i32 {
                                    for nu in 0..=(h.powers[1] + k.powers[1]) as i32 {
                                        for phi in 0..=(h.powers[2] + k.powers[2]) as i32 {
                                            let e2 = hermite_e(h.powers[0] as i32, k.powers[0] as i32, tau, h.center.x - k.center.x, c, d)
                                                * hermite_e(h.powers[1] as i32, k.powers[1] as i32, nu, h.center.y - k.center.y, c, d)
                                                * hermite_e(h.powers[2] as i32, k.powers[2] as i32, phi, h.center.z - k.center.z, c, d);
                                            if e2 == 0.0 {
                                                continue;
                                            }
                                            let sign = if (tau + nu + phi) % 2 == 0 { 1.0 } else { -1.0 };
                                            val += e1 * e2 * sign * rt.get(t + tau, u + nu, v + phi, 0);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let pre = 2.0 * std::f64::consts::PI.powf(2.5) / (p * q * (p + q).sqrt());
                    total += ca * cb * cc * cd * pre * val;
                }
            }
        }
    }
    total
}

/// Two-electron repulsion tensor in chemists' notation (ij|kl), stored with
/// full 8-fold permutational symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct Eri {
    pub n: usize,
    data: Vec<f64>,
}

#[inline]
fn pair_index(i: usize, j: usize) -> usize {
    if i >= j {
        i * (i + 1) / 2 + j
    } else {
        j * (j + 1) / 2 + i
    }
}

impl Eri {
    pub fn zeros(n: usize) -> Self {
        let npair = n * (n + 1) / 2;
        Eri { n, data: vec![0.0; npair * (npair + 1) / 2] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[self.index(i, j, k, l)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, value: f64) {
        let idx = self.index(i, j, k, l);
        self.data[idx] = value;
    }

    #[inline]
    fn index(&self, i: usize, j: usize, k: usize, l: usize) -> usize {
        let p = pair_index(i, j);
        let q = pair_index(k, l);
        if p >= q {
            p * (p + 1) / 2 + q
        } else {
            q * (q + 1) / 2 + p
        }
    }
}

/// Overlap, kinetic, and nuclear-attraction matrices plus the two-electron
/// tensor for one geometry/basis combination. All values in atomic units.
#[derive(Debug, Clone)]
pub struct IntegralSet {
    pub n: usize,
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub eri: Eri,
    pub nuclear_repulsion: f64,
    /// Non-fatal diagnostics, e.g. near-linear-dependence of the overlap.
    pub warnings: Vec<String>,
    pub functions: Vec<BasisFunction>,
}

/// Compute S, T, V for a geometry without the two-electron tensor.
pub fn one_electron_integrals(
    geometry: &Geometry,
    basis: &BasisSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), IntegralError> {
    let functions = build_functions(geometry, basis)?;
    let n = functions.len();
    let nuclei: Vec<(f64, Vector3<f64>)> = geometry
        .iter()
        .map(|(el, pos)| (el.charge() as f64, pos * ANGSTROM_TO_BOHR))
        .collect();
    let mut s = DMatrix::zeros(n, n);
    let mut t = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let sij = overlap_contracted(&functions[i], &functions[j]);
            let tij = kinetic_contracted(&functions[i], &functions[j]);
            let vij = nuclear_contracted(&functions[i], &functions[j], &nuclei);
            s[(i, j)] = sij;
            s[(j, i)] = sij;
            t[(i, j)] = tij;
            t[(j, i)] = tij;
            v[(i, j)] = vij;
            v[(j, i)] = vij;
        }
    }
    Ok((s, t, v))
}

/// Compute the full integral set for a geometry.
pub fn compute_integrals(
    geometry: &Geometry,
    basis: &BasisSet,
    eri_cap: usize,
) -> Result<IntegralSet, IntegralError> {
    let functions = build_functions(geometry, basis)?;
    let n = functions.len();
    if n > eri_cap {
        return Err(IntegralError::DimensionOverCap(n, eri_cap));
    }
    let (s, t, v) = one_electron_integrals(geometry, basis)?;

    let mut warnings = Vec::new();
    let eigs = s.clone().symmetric_eigenvalues();
    let smallest = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    if smallest < 1e-10 {
        warnings.push(format!(
            "overlap matrix is near-singular: smallest eigenvalue {smallest:.3e}"
        ));
    }

    let mut eri = Eri::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let p = pair_index(i, j);
            for k in 0..=i {
                for l in 0..=k {
                    if pair_index(k, l) > p {
                        continue;
                    }
                    let value = eri_contracted(&functions[i], &functions[j], &functions[k], &functions[l]);
                    eri.set(i, j, k, l, value);
                }
            }
        }
    }

    let nuclei: Vec<(f64, Vector3<f64>)> = geometry
        .iter()
        .map(|(el, pos)| (el.charge() as f64, pos * ANGSTROM_TO_BOHR))
        .collect();
    let mut nuclear_repulsion = 0.0;
    for a in 0..nuclei.len() {
        for b in 0..a {
            nuclear_repulsion += nuclei[a].0 * nuclei[b].0 / (nuclei[a].1 - nuclei[b].1).norm();
        }
    }

    Ok(IntegralSet { n, s, t, v, eri, nuclear_repulsion, warnings, functions })
}

/// Cross overlap between the functions of two different basis sets over the
/// same geometry. Used by the IAO construction.
pub fn cross_overlap(
    geometry: &Geometry,
    basis_a: &BasisSet,
    basis_b: &BasisSet,
) -> Result<DMatrix<f64>, IntegralError> {
    let fa = build_functions(geometry, basis_a)?;
    let fb = build_functions(geometry, basis_b)?;
    let mut s = DMatrix::zeros(fa.len(), fb.len());
    for (i, f) in fa.iter().enumerate() {
        for (j, g) in fb.iter().enumerate() {
            s[(i, j)] = overlap_contracted(f, g);
        }
    }
    Ok(s)
}

/// Write an ERI fixture: `u64` dimension then n^4 little-endian `f64`
/// values in row-major (i, j, k, l) order.
pub fn write_eri_fixture<W: Write>(eri: &Eri, mut w: W) -> Result<(), IntegralError> {
    w.write_u64::<LittleEndian>(eri.n as u64)?;
    for i in 0..eri.n {
        for j in 0..eri.n {
            for k in 0..eri.n {
                for l in 0..eri.n {
                    w.write_f64::<LittleEndian>(eri.get(i, j, k, l))?;
                }
            }
        }
    }
    Ok(())
}

/// Read an ERI fixture written by [`write_eri_fixture`].
pub fn read_eri_fixture<R: Read>(mut r: R) -> Result<Eri, IntegralError> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut eri = Eri::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let v = r.read_f64::<LittleEndian>()?;
                    eri.set(i, j, k, l, v);
                }
            }
        }
    }
    Ok(eri)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn el(s: &str) -> Element {
        Element::from_symbol(s).unwrap()
    }

    fn single_s(alpha: f64) -> (Geometry, BasisSet) {
        let text = format!("****\nH 0\nS 1 1.00\n {alpha} 1.0\n****\n");
        let basis = BasisSet::parse("one-s", &text, &[el("H")]).unwrap();
        (vec![(el("H"), Vector3::zeros())], basis)
    }

    #[test]
    fn normalized_s_primitive_has_unit_overlap() {
        let (geom, basis) = single_s(0.7);
        let (s, _, _) = one_electron_integrals(&geom, &basis).unwrap();
        assert_relative_eq!(s[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kinetic_energy_of_s_primitive_is_three_halves_alpha() {
        // <g|T|g> = 3 alpha / 2 for a normalized s Gaussian.
        for alpha in [0.3, 1.0, 2.5] {
            let (geom, basis) = single_s(alpha);
            let (_, t, _) = one_electron_integrals(&geom, &basis).unwrap();
            assert_relative_eq!(t[(0, 0)], 1.5 * alpha, epsilon = 1e-10);
        }
    }

    #[test]
    fn two_center_s_overlap_matches_closed_form() {
        // Two identical s primitives with exponent alpha separated by R:
        // S12 = exp(-alpha R^2 / 2).
        let alpha = 0.9;
        let r_bohr: f64 = 1.3;
        let r_ang = r_bohr / ANGSTROM_TO_BOHR;
        let text = format!("****\nH 0\nS 1 1.00\n {alpha} 1.0\n****\n");
        let basis = BasisSet::parse("one-s", &text, &[el("H")]).unwrap();
        let geom = vec![
            (el("H"), Vector3::zeros()),
            (el("H"), Vector3::new(r_ang, 0.0, 0.0)),
        ];
        let (s, _, _) = one_electron_integrals(&geom, &basis).unwrap();
        assert_relative_eq!(s[(0, 1)], (-alpha * r_bohr * r_bohr / 2.0).exp(), epsilon = 1e-10);
    }

    #[test]
    fn boys_zero_argument() {
        let f = boys(3, 0.0);
        for (m, fm) in f.iter().enumerate() {
            assert_relative_eq!(*fm, 1.0 / (2.0 * m as f64 + 1.0), epsilon = 1e-10);
        }
    }

    #[test]
    fn boys_matches_erf_for_f0() {
        // F_0(t) = sqrt(pi / (4 t)) erf(sqrt(t)); compare against quadrature.
        for t in [0.1, 1.0, 5.0, 20.0, 50.0] {
            let f0 = boys(0, t)[0];
            // Simpson quadrature of integral_0^1 exp(-t x^2) dx.
            let n = 20_000;
            let h = 1.0 / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x0 = i as f64 * h;
                let xm = x0 + h / 2.0;
                let x1 = x0 + h;
                let g = |x: f64| (-t * x * x).exp();
                acc += h / 6.0 * (g(x0) + 4.0 * g(xm) + g(x1));
            }
            assert_relative_eq!(f0, acc, epsilon = 1e-9);
        }
    }

    fn h2_sto3g() -> (Geometry, BasisSet) {
        let basis = BasisSet::builtin("sto-3g", &[el("H")]).unwrap();
        let geom = vec![
            (el("H"), Vector3::zeros()),
            (el("H"), Vector3::new(0.0, 0.0, 0.7414)),
        ];
        (geom, basis)
    }

    #[test]
    fn eri_eightfold_symmetry_and_positivity() {
        let (geom, basis) = h2_sto3g();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let n = ints.n;
        for i in 0..n {
            assert!(ints.eri.get(i, i, i, i) > 0.0);
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let v = ints.eri.get(i, j, k, l);
                        assert_relative_eq!(v, ints.eri.get(j, i, k, l), epsilon = 1e-12);
                        assert_relative_eq!(v, ints.eri.get(i, j, l, k), epsilon = 1e-12);
                        assert_relative_eq!(v, ints.eri.get(k, l, i, j), epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn integrals_are_translation_invariant() {
        let (geom, basis) = h2_sto3g();
        let shift = Vector3::new(1.7, -0.4, 2.2);
        let shifted: Geometry = geom.iter().map(|(e, p)| (*e, p + shift)).collect();
        let a = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let b = compute_integrals(&shifted, &basis, DEFAULT_ERI_CAP).unwrap();
        assert!((&a.s - &b.s).abs().max() < 1e-10);
        assert!((&a.t - &b.t).abs().max() < 1e-10);
        assert!((&a.v - &b.v).abs().max() < 1e-10);
        for i in 0..a.n {
            for j in 0..a.n {
                assert!((a.eri.get(i, j, i, j) - b.eri.get(i, j, i, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rotation_preserves_matrix_eigenvalues() {
        let basis = BasisSet::builtin("sto-3g", &[el("O"), el("H")]).unwrap();
        let geom: Geometry = vec![
            (el("O"), Vector3::new(0.0, 0.0, 0.1173)),
            (el("H"), Vector3::new(0.0, 0.7572, -0.4692)),
            (el("H"), Vector3::new(0.0, -0.7572, -0.4692)),
        ];
        let angle: f64 = 0.63;
        let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), angle);
        let rotated: Geometry = geom.iter().map(|(e, p)| (*e, rot * p)).collect();
        let (s1, t1, _) = one_electron_integrals(&geom, &basis).unwrap();
        let (s2, t2, _) = one_electron_integrals(&rotated, &basis).unwrap();
        let mut es1 = s1.symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>();
        let mut es2 = s2.symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>();
        es1.sort_by(f64::total_cmp);
        es2.sort_by(f64::total_cmp);
        for (a, b) in es1.iter().zip(&es2) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
        let mut et1 = t1.symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>();
        let mut et2 = t2.symmetric_eigenvalues().iter().cloned().collect::<Vec<_>>();
        et1.sort_by(f64::total_cmp);
        et2.sort_by(f64::total_cmp);
        for (a, b) in et1.iter().zip(&et2) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn eri_matrix_is_positive_semidefinite() {
        let (geom, basis) = h2_sto3g();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let n = ints.n;
        let mut m = DMatrix::zeros(n * n, n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        m[(i * n + j, k * n + l)] = ints.eri.get(i, j, k, l);
                    }
                }
            }
        }
        let eigs = m.symmetric_eigenvalues();
        assert!(eigs.iter().all(|&e| e > -1e-10));
    }

    #[test]
    fn dimension_cap_is_enforced() {
        let (geom, basis) = h2_sto3g();
        assert!(matches!(
            compute_integrals(&geom, &basis, 1),
            Err(IntegralError::DimensionOverCap(2, 1))
        ));
    }

    #[test]
    fn eri_fixture_roundtrip() {
        let (geom, basis) = h2_sto3g();
        let ints = compute_integrals(&geom, &basis, DEFAULT_ERI_CAP).unwrap();
        let mut buf = Vec::new();
        write_eri_fixture(&ints.eri, &mut buf).unwrap();
        let back = read_eri_fixture(buf.as_slice()).unwrap();
        assert_eq!(back, ints.eri);
    }
}
