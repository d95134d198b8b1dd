//! Element data: symbols, nuclear charges, covalent radii, metal classification.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ElementError {
    #[error("unknown element symbol '{0}'")]
    UnknownSymbol(String),
    #[error("no tabulated covalent radius for element '{0}'")]
    NoCovalentRadius(String),
}

/// Chemical element identified by atomic number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(pub u8);

// (symbol, covalent radius in angstrom). Cordero et al. radii; transition
// metals use the low-spin value where two are tabulated.
const ELEMENTS: &[(&str, f64)] = &[
    ("H", 0.31),
    ("He", 0.28),
    ("Li", 1.28),
    ("Be", 0.96),
    ("B", 0.84),
    ("C", 0.76),
    ("N", 0.71),
    ("O", 0.66),
    ("F", 0.57),
    ("Ne", 0.58),
    ("Na", 1.66),
    ("Mg", 1.41),
    ("Al", 1.21),
    ("Si", 1.11),
    ("P", 1.07),
    ("S", 1.05),
    ("Cl", 1.02),
    ("Ar", 1.06),
    ("K", 2.03),
    ("Ca", 1.76),
    ("Sc", 1.70),
    ("Ti", 1.60),
    ("V", 1.53),
    ("Cr", 1.39),
    ("Mn", 1.39),
    ("Fe", 1.32),
    ("Co", 1.26),
    ("Ni", 1.24),
    ("Cu", 1.32),
    ("Zn", 1.22),
    ("Ga", 1.22),
    ("Ge", 1.20),
    ("As", 1.19),
    ("Se", 1.20),
    ("Br", 1.20),
    ("Kr", 1.16),
];

const METALS: &[&str] = &[
    "Li", "Be", "Na", "Mg", "Al", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu",
    "Zn", "Ga",
];

impl Element {
    /// Look up an element by its chemical symbol.
    pub fn from_symbol(symbol: &str) -> Result<Self, ElementError> {
        let normalized = normalize(symbol);
        ELEMENTS
            .iter()
            .position(|(s, _)| *s == normalized)
            .map(|i| Element(i as u8 + 1))
            .ok_or_else(|| ElementError::UnknownSymbol(symbol.to_string()))
    }

    pub fn symbol(&self) -> &'static str {
        ELEMENTS[self.0 as usize - 1].0
    }

    /// Nuclear charge.
    pub fn charge(&self) -> u32 {
        self.0 as u32
    }

    /// Covalent radius in angstrom.
    pub fn covalent_radius(&self) -> f64 {
        ELEMENTS[self.0 as usize - 1].1
    }

    /// Whether the element is treated as a metal when building bond graphs
    /// and selecting cluster centers.
    pub fn is_metal(&self) -> bool {
        METALS.contains(&self.symbol())
    }
}

/// Strip CIF-style oxidation suffixes ("Fe2+", "O2-") and normalize case.
fn normalize(symbol: &str) -> String {
    let stripped: String = symbol
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    let mut out = String::new();
    for (i, c) in stripped.chars().enumerate() {
        if i == 0 {
            out.push(c.to_ascii_uppercase());
        } else {
            out.push(c.to_ascii_lowercase());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_roundtrip() {
        for (sym, _) in ELEMENTS {
            let el = Element::from_symbol(sym).unwrap();
            assert_eq!(el.symbol(), *sym);
        }
    }

    #[test]
    fn charges() {
        assert_eq!(Element::from_symbol("H").unwrap().charge(), 1);
        assert_eq!(Element::from_symbol("O").unwrap().charge(), 8);
        assert_eq!(Element::from_symbol("Fe").unwrap().charge(), 26);
    }

    #[test]
    fn oxidation_suffix_stripped() {
        assert_eq!(
            Element::from_symbol("Fe2+").unwrap(),
            Element::from_symbol("Fe").unwrap()
        );
        assert_eq!(
            Element::from_symbol("O2-").unwrap(),
            Element::from_symbol("O").unwrap()
        );
    }

    #[test]
    fn radii_match_bond_thresholds() {
        // H-H: 1.2 * (0.31 + 0.31) = 0.744, C-O: 1.2 * (0.76 + 0.66) = 1.704
        let h = Element::from_symbol("H").unwrap();
        let c = Element::from_symbol("C").unwrap();
        let o = Element::from_symbol("O").unwrap();
        assert!((1.2 * (h.covalent_radius() * 2.0) - 0.744).abs() < 1e-12);
        assert!((1.2 * (c.covalent_radius() + o.covalent_radius()) - 1.704).abs() < 1e-12);
    }

    #[test]
    fn metal_classification() {
        assert!(Element::from_symbol("Fe").unwrap().is_metal());
        assert!(Element::from_symbol("Zn").unwrap().is_metal());
        assert!(!Element::from_symbol("C").unwrap().is_metal());
        assert!(!Element::from_symbol("H").unwrap().is_metal());
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        assert!(matches!(
            Element::from_symbol("Xx"),
            Err(ElementError::UnknownSymbol(_))
        ));
    }
}
