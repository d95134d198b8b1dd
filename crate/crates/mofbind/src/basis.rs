//! Gaussian basis-set definitions: plain-text parsing and per-element
//! shell templates.
//!
//! The text layout is the common interchange format: blocks separated by
//! `****`, each starting with an element header, followed by shells given
//! as an angular-momentum letter plus primitive count and then one
//! exponent/coefficient row per primitive. `SP` shells carry an s and a p
//! coefficient column and expand into two shells.
//!
//! Angular momentum is capped at d, Cartesian (6 components). Spherical
//! harmonics are not used anywhere in this crate.

use crate::elements::Element;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("element {0} not found in basis text")]
    ElementNotFound(String),
    #[error("non-positive exponent {0} in basis text")]
    BadExponent(f64),
    #[error("exponents must be strictly decreasing within a shell")]
    ExponentOrder,
    #[error("unsupported angular momentum letter '{0}' (supported: S, P, D, SP)")]
    BadAngularMomentum(String),
    #[error("malformed basis text: {0}")]
    Malformed(String),
    #[error("unknown built-in basis '{0}' (available: sto-3g, svdz)")]
    UnknownBuiltin(String),
    #[error("basis '{name}' has no entry for element {element}")]
    MissingElement { name: String, element: String },
}

/// A contracted shell template: angular momentum plus primitives, not yet
/// placed on a center.
#[derive(Debug, Clone, PartialEq)]
pub struct ShellTemplate {
    /// Cartesian angular momentum: 0, 1 or 2.
    pub l: u8,
    /// Primitive exponents in bohr^-2, strictly decreasing.
    pub exponents: Vec<f64>,
    /// Raw contraction coefficients as read from the text.
    pub coefficients: Vec<f64>,
}

impl ShellTemplate {
    /// Number of Cartesian basis functions this shell contributes.
    pub fn n_functions(&self) -> usize {
        match self.l {
            0 => 1,
            1 => 3,
            2 => 6,
            _ => unreachable!("angular momentum capped at d"),
        }
    }
}

/// Shell placed on a specific atom of a cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    pub center: usize,
    pub l: u8,
    pub exponents: Vec<f64>,
    pub coefficients: Vec<f64>,
}

/// Named basis set: per-element shell templates.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub name: String,
    templates: BTreeMap<Element, Vec<ShellTemplate>>,
}

impl BasisSet {
    /// Parse basis text, keeping only the requested elements.
    pub fn parse(name: &str, text: &str, elements: &[Element]) -> Result<Self, BasisError> {
        let all = parse_all(text)?;
        let mut templates = BTreeMap::new();
        for &el in elements {
            let shells = all
                .get(&el)
                .ok_or_else(|| BasisError::ElementNotFound(el.symbol().to_string()))?;
            templates.insert(el, shells.clone());
        }
        Ok(BasisSet { name: name.to_string(), templates })
    }

    /// Load one of the basis sets shipped with the crate.
    pub fn builtin(name: &str, elements: &[Element]) -> Result<Self, BasisError> {
        let text = match name.to_ascii_lowercase().as_str() {
            "sto-3g" => include_str!("../data/sto-3g.dat"),
            "svdz" => include_str!("../data/svdz.dat"),
            other => return Err(BasisError::UnknownBuiltin(other.to_string())),
        };
        Self::parse(name, text, elements)
    }

    pub fn shells_for(&self, element: Element) -> Result<&[ShellTemplate], BasisError> {
        self.templates
            .get(&element)
            .map(|v| v.as_slice())
            .ok_or_else(|| BasisError::MissingElement {
                name: self.name.clone(),
                element: element.symbol().to_string(),
            })
    }

    /// Total number of Cartesian basis functions for a list of elements.
    pub fn dimension(&self, elements: &[Element]) -> Result<usize, BasisError> {
        let mut n = 0;
        for &el in elements {
            n += self
                .shells_for(el)?
                .iter()
                .map(|s| s.n_functions())
                .sum::<usize>();
        }
        Ok(n)
    }

    pub fn elements(&self) -> impl Iterator<Item = Element> + '_ {
        self.templates.keys().copied()
    }
}

fn parse_all(text: &str) -> Result<BTreeMap<Element, Vec<ShellTemplate>>, BasisError> {
    let mut out = BTreeMap::new();
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('!'))
        .peekable();
    while let Some(line) = lines.next() {
        if line.starts_with("****") {
            continue;
        }
        // Element header, e.g. "H 0".
        let symbol = line
            .split_whitespace()
            .next()
            .ok_or_else(|| BasisError::Malformed(format!("bad element header '{line}'")))?;
        let element = Element::from_symbol(symbol)
            .map_err(|_| BasisError::Malformed(format!("bad element header '{line}'")))?;
        let mut shells = Vec::new();
        while let Some(&next) = lines.peek() {
            if next.starts_with("****") {
                lines.next();
                break;
            }
            let header = lines.next().unwrap();
            let mut parts = header.split_whitespace();
            let letter = parts
                .next()
                .ok_or_else(|| BasisError::Malformed(format!("bad shell header '{header}'")))?
                .to_ascii_uppercase();
            let count: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| BasisError::Malformed(format!("bad primitive count in '{header}'")))?;
            let n_cols = match letter.as_str() {
                "S" | "P" | "D" => 1,
                "SP" => 2,
                other => return Err(BasisError::BadAngularMomentum(other.to_string())),
            };
            let mut exps = Vec::with_capacity(count);
            let mut coefs = vec![Vec::with_capacity(count); n_cols];
            for _ in 0..count {
                let row = lines
                    .next()
                    .ok_or_else(|| BasisError::Malformed("truncated primitive rows".into()))?;
                let nums: Vec<f64> = row
                    .split_whitespace()
                    .map(|s| {
                        s.replace(['D', 'd'], "E")
                            .parse()
                            .map_err(|_| BasisError::Malformed(format!("bad number '{s}'")))
                    })
                    .collect::<Result<_, _>>()?;
                if nums.len() != n_cols + 1 {
                    return Err(BasisError::Malformed(format!("bad primitive row '{row}'")));
                }
                if nums[0] <= 0.0 {
                    return Err(BasisError::BadExponent(nums[0]));
                }
                exps.push(nums[0]);
                for (c, coef) in coefs.iter_mut().enumerate() {
                    coef.push(nums[c + 1]);
                }
            }
            if exps.windows(2).any(|w| w[0] <= w[1]) {
                return Err(BasisError::ExponentOrder);
            }
            match letter.as_str() {
                "S" => shells.push(ShellTemplate { l: 0, exponents: exps, coefficients: coefs.remove(0) }),
                "P" => shells.push(ShellTemplate { l: 1, exponents: exps, coefficients: coefs.remove(0) }),
                "D" => shells.push(ShellTemplate { l: 2, exponents: exps, coefficients: coefs.remove(0) }),
                "SP" => {
                    let p = coefs.pop().unwrap();
                    let s = coefs.pop().unwrap();
                    shells.push(ShellTemplate { l: 0, exponents: exps.clone(), coefficients: s });
                    shells.push(ShellTemplate { l: 1, exponents: exps, coefficients: p });
                }
                _ => unreachable!(),
            }
        }
        out.insert(element, shells);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(s: &str) -> Element {
        Element::from_symbol(s).unwrap()
    }

    #[test]
    fn minimal_hydrogen_entry() {
        let text = "****\nH 0\nS 3 1.00\n 3.425 0.154\n 0.623 0.535\n 0.168 0.444\n****\n";
        let basis = BasisSet::parse("test", text, &[el("H")]).unwrap();
        let shells = basis.shells_for(el("H")).unwrap();
        assert_eq!(shells.len(), 1);
        assert_eq!(shells[0].l, 0);
        assert_eq!(basis.dimension(&[el("H")]).unwrap(), 1);
    }

    #[test]
    fn s_s_p_block_counts_five_functions() {
        let text = "****\nC 0\nS 1 1.00\n 1.0 1.0\nS 1 1.00\n 0.5 1.0\nP 1 1.00\n 0.3 1.0\n****\n";
        let basis = BasisSet::parse("test", text, &[el("C")]).unwrap();
        assert_eq!(basis.dimension(&[el("C")]).unwrap(), 5);
    }

    #[test]
    fn missing_element_is_named() {
        let err = BasisSet::builtin("sto-3g", &[el("Fe")]).unwrap_err();
        match err {
            BasisError::ElementNotFound(sym) => assert_eq!(sym, "Fe"),
            other => panic!("expected ElementNotFound, got {other:?}"),
        }
    }

    #[test]
    fn non_positive_exponent_rejected() {
        let text = "****\nH 0\nS 1 1.00\n -1.0 1.0\n****\n";
        assert!(matches!(
            BasisSet::parse("test", text, &[el("H")]),
            Err(BasisError::BadExponent(_))
        ));
    }

    #[test]
    fn builtin_sets_load() {
        let els = [el("H"), el("C"), el("N"), el("O")];
        let sto = BasisSet::builtin("sto-3g", &els).unwrap();
        // H: 1, C/N/O: 1 core s + (s,p) valence = 5 each.
        assert_eq!(sto.dimension(&els).unwrap(), 1 + 5 + 5 + 5);
        let dz = BasisSet::builtin("svdz", &els).unwrap();
        // H: 2, heavy atoms: 3s + 2p = 9 each.
        assert_eq!(dz.dimension(&els).unwrap(), 2 + 9 + 9 + 9);
    }

    #[test]
    fn sp_shell_splits_into_s_and_p() {
        let els = [el("O")];
        let sto = BasisSet::builtin("sto-3g", &els).unwrap();
        let shells = sto.shells_for(el("O")).unwrap();
        let ls: Vec<u8> = shells.iter().map(|s| s.l).collect();
        assert_eq!(ls, vec![0, 0, 1]);
    }
}
