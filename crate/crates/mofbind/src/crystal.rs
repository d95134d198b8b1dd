//! Crystallographic input: CIF subset parsing, fractional/Cartesian
//! conversion, symmetry expansion and supercell construction, XYZ I/O.
//!
//! The CIF reader handles the fixed-tag subset produced by cleaned
//! structure databases: cell tags, one atom-site loop with fractional
//! coordinates, and an optional symmetry loop. Everything else is ignored.
//! Structures without a symmetry loop are treated as P1.
//!
//! Cartesian convention: lattice vector `a` lies along +x and `b` lies in
//! the xy-plane. This fixes every downstream Cartesian coordinate.

use crate::elements::{Element, ElementError};
use nalgebra::{Matrix3, Vector3};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrystalError {
    #[error("missing required CIF tag '{0}'")]
    MissingTag(String),
    #[error("malformed CIF value for tag '{tag}': '{value}'")]
    BadValue { tag: String, value: String },
    #[error("malformed symmetry operator '{0}'")]
    BadSymmetryOp(String),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error("invalid lattice: {0}")]
    BadLattice(String),
    #[error("supercell repetitions must be >= 1, got ({0}, {1}, {2})")]
    BadReps(i32, i32, i32),
    #[error("cannot write an empty structure")]
    EmptyStructure,
    #[error("XYZ parse error: {0}")]
    XyzParse(String),
}

/// Periodic cell defined by lengths (angstrom) and angles (degrees).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    cell: Matrix3<f64>,
}

impl Lattice {
    pub fn new(a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64) -> Result<Self, CrystalError> {
        if !(a > 0.0 && b > 0.0 && c > 0.0) {
            return Err(CrystalError::BadLattice(format!(
                "cell lengths must be positive, got ({a}, {b}, {c})"
            )));
        }
        for ang in [alpha, beta, gamma] {
            if !(ang > 0.0 && ang < 180.0) {
                return Err(CrystalError::BadLattice(format!(
                    "cell angles must lie in (0, 180) degrees, got {ang}"
                )));
            }
        }
        let (ca, cb, cg) = (
            alpha.to_radians().cos(),
            beta.to_radians().cos(),
            gamma.to_radians().cos(),
        );
        let sg = gamma.to_radians().sin();
        let cx = c * cb;
        let cy = c * (ca - cb * cg) / sg;
        let cz2 = c * c - cx * cx - cy * cy;
        if cz2 <= 0.0 {
            return Err(CrystalError::BadLattice(
                "cell angles do not define a positive-volume cell".into(),
            ));
        }
        let cell = Matrix3::new(
            a,
            b * cg,
            cx,
            0.0,
            b * sg,
            cy,
            0.0,
            0.0,
            cz2.sqrt(),
        );
        Ok(Lattice { a, b, c, alpha, beta, gamma, cell })
    }

    /// 3x3 cell matrix whose columns are the lattice vectors (angstrom).
    pub fn cell_matrix(&self) -> &Matrix3<f64> {
        &self.cell
    }

    pub fn volume(&self) -> f64 {
        self.cell.determinant()
    }
}

/// Convert fractional coordinates to Cartesian (angstrom).
pub fn frac_to_cart(lattice: &Lattice, frac: Vector3<f64>) -> Vector3<f64> {
    lattice.cell_matrix() * frac
}

/// Convert Cartesian (angstrom) to fractional coordinates.
pub fn cart_to_frac(lattice: &Lattice, cart: Vector3<f64>) -> Vector3<f64> {
    lattice.cell_matrix().try_inverse().expect("valid lattice") * cart
}

/// One crystallographic site in fractional coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSite {
    pub element: Element,
    pub frac: Vector3<f64>,
    pub label: String,
}

/// Symmetry operator `x' = rot * x + trans` parsed from a triplet such as
/// `-x, y+1/2, -z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryOp {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
    /// The source text, kept for error messages and serialization.
    pub text: String,
}

impl SymmetryOp {
    pub fn identity() -> Self {
        SymmetryOp {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
            text: "x, y, z".into(),
        }
    }

    pub fn is_identity(&self) -> bool {
        (self.rot - Matrix3::identity()).abs().max() < 1e-12 && self.trans.abs().max() < 1e-12
    }

    /// Parse a CIF operator triplet.
    pub fn parse(text: &str) -> Result<Self, CrystalError> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 3 {
            return Err(CrystalError::BadSymmetryOp(text.to_string()));
        }
        let mut rot = Matrix3::zeros();
        let mut trans = Vector3::zeros();
        for (row, part) in parts.iter().enumerate() {
            let (coeffs, constant) =
                parse_symmetry_component(part).ok_or_else(|| CrystalError::BadSymmetryOp(text.to_string()))?;
            for col in 0..3 {
                rot[(row, col)] = coeffs[col];
            }
            trans[row] = constant;
        }
        Ok(SymmetryOp { rot, trans, text: text.trim().to_string() })
    }

    pub fn apply(&self, frac: Vector3<f64>) -> Vector3<f64> {
        self.rot * frac + self.trans
    }
}

/// Parse one component like `-x+1/2` into ([x, y, z] coefficients, constant).
fn parse_symmetry_component(part: &str) -> Option<([f64; 3], f64)> {
    let compact: String = part.chars().filter(|c| !c.is_whitespace()).collect();
    if compact.is_empty() {
        return None;
    }
    let mut coeffs = [0.0f64; 3];
    let mut constant = 0.0f64;
    // Split into signed terms.
    let mut terms: Vec<String> = Vec::new();
    let mut cur = String::new();
    for (i, ch) in compact.chars().enumerate() {
        if (ch == '+' || ch == '-') && i > 0 && !cur.ends_with('/') {
            terms.push(cur.clone());
            cur.clear();
        }
        cur.push(ch);
    }
    terms.push(cur);
    for term in terms {
        let (sign, body) = match term.strip_prefix('-') {
            Some(rest) => (-1.0, rest),
            None => (1.0, term.strip_prefix('+').unwrap_or(&term)),
        };
        if body.is_empty() {
            return None;
        }
        match body {
            "x" | "X" => coeffs[0] += sign,
            "y" | "Y" => coeffs[1] += sign,
            "z" | "Z" => coeffs[2] += sign,
            _ => {
                // Rational or decimal constant.
                let value = if let Some((num, den)) = body.split_once('/') {
                    let n: f64 = num.parse().ok()?;
                    let d: f64 = den.parse().ok()?;
                    if d == 0.0 {
                        return None;
                    }
                    n / d
                } else {
                    body.parse().ok()?
                };
                constant += sign * value;
            }
        }
    }
    Some((coeffs, constant))
}

/// Periodic structure: cell, sites, and symmetry operators applied lazily.
#[derive(Debug, Clone, PartialEq)]
pub struct CrystalStructure {
    pub lattice: Lattice,
    pub sites: Vec<AtomSite>,
    pub symmetry_ops: Vec<SymmetryOp>,
}

/// Duplicate-site threshold after symmetry expansion (angstrom).
pub const DEDUP_THRESHOLD: f64 = 1e-3;

impl CrystalStructure {
    /// Apply all symmetry operators and deduplicate sites.
    ///
    /// Two generated sites are duplicates when they carry the same element
    /// and their minimum-image Cartesian distance is below 1e-3 angstrom.
    /// Labels of non-identity images get a `:k` suffix.
    pub fn expand_symmetry(&self) -> Vec<AtomSite> {
        let mut expanded: Vec<AtomSite> = Vec::new();
        for site in &self.sites {
            let mut n_images = 0usize;
            for op in &self.symmetry_ops {
                let frac = wrap_frac(op.apply(site.frac));
                let duplicate = expanded.iter().any(|s| {
                    s.element == site.element
                        && min_image_distance(&self.lattice, s.frac, frac) < DEDUP_THRESHOLD
                });
                if !duplicate {
                    let label = if n_images == 0 {
                        site.label.clone()
                    } else {
                        format!("{}:{}", site.label, n_images)
                    };
                    expanded.push(AtomSite { element: site.element, frac, label });
                    n_images += 1;
                }
            }
        }
        expanded
    }
}

fn wrap_frac(f: Vector3<f64>) -> Vector3<f64> {
    f.map(|x| {
        let w = x - x.floor();
        if w >= 1.0 {
            w - 1.0
        } else {
            w
        }
    })
}

fn min_image_distance(lattice: &Lattice, a: Vector3<f64>, b: Vector3<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for di in -1..=1 {
        for dj in -1..=1 {
            for dk in -1..=1 {
                let d = a - b + Vector3::new(di as f64, dj as f64, dk as f64);
                let cart = frac_to_cart(lattice, d);
                best = best.min(cart.norm());
            }
        }
    }
    best
}

/// Provenance tag of an atom in a supercell: site label plus image index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OriginTag {
    pub label: String,
    pub image: [i32; 3],
}

impl std::fmt::Display for OriginTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{},{},{}]", self.label, self.image[0], self.image[1], self.image[2])
    }
}

impl OriginTag {
    pub fn parse(s: &str) -> Option<Self> {
        let (label, rest) = s.split_once('[')?;
        let rest = rest.strip_suffix(']')?;
        let parts: Vec<&str> = rest.split(',').collect();
        if parts.len() != 3 {
            return None;
        }
        let mut image = [0i32; 3];
        for (i, p) in parts.iter().enumerate() {
            image[i] = p.trim().parse().ok()?;
        }
        Some(OriginTag { label: label.to_string(), image })
    }
}

/// A finite collection of atoms in Cartesian coordinates (angstrom).
#[derive(Debug, Clone, PartialEq)]
pub struct AtomCollection {
    pub atoms: Vec<Atom>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub position: Vector3<f64>,
    pub origin: OriginTag,
}

/// Expand a structure into a supercell of `reps` periodic images.
///
/// Every symmetry-expanded site is replicated over image indices
/// `(0..reps.0) x (0..reps.1) x (0..reps.2)`.
pub fn build_supercell(
    structure: &CrystalStructure,
    reps: (i32, i32, i32),
) -> Result<AtomCollection, CrystalError> {
    if reps.0 < 1 || reps.1 < 1 || reps.2 < 1 {
        return Err(CrystalError::BadReps(reps.0, reps.1, reps.2));
    }
    let sites = structure.expand_symmetry();
    let mut atoms = Vec::with_capacity(sites.len() * (reps.0 * reps.1 * reps.2) as usize);
    for i in 0..reps.0 {
        for j in 0..reps.1 {
            for k in 0..reps.2 {
                let shift = Vector3::new(i as f64, j as f64, k as f64);
                for site in &sites {
                    atoms.push(Atom {
                        element: site.element,
                        position: frac_to_cart(&structure.lattice, site.frac + shift),
                        origin: OriginTag { label: site.label.clone(), image: [i, j, k] },
                    });
                }
            }
        }
    }
    Ok(AtomCollection { atoms })
}

/// Parse the supported CIF subset.
pub fn parse_cif(text: &str) -> Result<CrystalStructure, CrystalError> {
    let doc = CifDocument::tokenize(text);
    let need = |tag: &str| -> Result<f64, CrystalError> {
        let raw = doc
            .scalar(tag)
            .ok_or_else(|| CrystalError::MissingTag(tag.to_string()))?;
        parse_cif_number(raw).ok_or_else(|| CrystalError::BadValue {
            tag: tag.to_string(),
            value: raw.to_string(),
        })
    };
    let lattice = Lattice::new(
        need("_cell_length_a")?,
        need("_cell_length_b")?,
        need("_cell_length_c")?,
        need("_cell_angle_alpha")?,
        need("_cell_angle_beta")?,
        need("_cell_angle_gamma")?,
    )?;

    // Atom-site loop.
    let site_loop = doc
        .find_loop("_atom_site_fract_x")
        .ok_or_else(|| CrystalError::MissingTag("_atom_site_fract_x".to_string()))?;
    let col = |tag: &str| site_loop.tags.iter().position(|t| t == tag);
    let ix = col("_atom_site_fract_x").unwrap();
    let iy = col("_atom_site_fract_y")
        .ok_or_else(|| CrystalError::MissingTag("_atom_site_fract_y".to_string()))?;
    let iz = col("_atom_site_fract_z")
        .ok_or_else(|| CrystalError::MissingTag("_atom_site_fract_z".to_string()))?;
    let ilabel = col("_atom_site_label");
    let itype = col("_atom_site_type_symbol");
    if ilabel.is_none() && itype.is_none() {
        return Err(CrystalError::MissingTag("_atom_site_label".to_string()));
    }

    let mut sites = Vec::new();
    for (n, row) in site_loop.rows.iter().enumerate() {
        let get = |i: usize| -> Result<&str, CrystalError> {
            row.get(i).map(|s| s.as_str()).ok_or_else(|| CrystalError::BadValue {
                tag: "_atom_site".to_string(),
                value: row.join(" "),
            })
        };
        let coord = |i: usize| -> Result<f64, CrystalError> {
            let raw = get(i)?;
            parse_cif_number(raw).ok_or_else(|| CrystalError::BadValue {
                tag: "_atom_site_fract".to_string(),
                value: raw.to_string(),
            })
        };
        let symbol = match itype {
            Some(i) => get(i)?,
            None => get(ilabel.unwrap())?,
        };
        let element = Element::from_symbol(symbol)?;
        let label = match ilabel {
            Some(i) => get(i)?.to_string(),
            None => format!("{}{}", element.symbol(), n + 1),
        };
        let frac = wrap_frac(Vector3::new(coord(ix)?, coord(iy)?, coord(iz)?));
        sites.push(AtomSite { element, frac, label });
    }

    // Optional symmetry loop; absent means P1.
    let mut symmetry_ops = Vec::new();
    let sym_loop = doc
        .find_loop("_symmetry_equiv_pos_as_xyz")
        .or_else(|| doc.find_loop("_space_group_symop_operation_xyz"));
    if let Some(lp) = sym_loop {
        let isym = lp
            .tags
            .iter()
            .position(|t| t == "_symmetry_equiv_pos_as_xyz" || t == "_space_group_symop_operation_xyz")
            .unwrap();
        for row in &lp.rows {
            let raw = row.get(isym).ok_or_else(|| CrystalError::BadSymmetryOp(row.join(" ")))?;
            symmetry_ops.push(SymmetryOp::parse(raw)?);
        }
    }
    if !symmetry_ops.iter().any(|op| op.is_identity()) {
        symmetry_ops.insert(0, SymmetryOp::identity());
    }

    Ok(CrystalStructure { lattice, sites, symmetry_ops })
}

/// CIF numbers may carry a standard uncertainty suffix, e.g. `1.2345(6)`.
fn parse_cif_number(raw: &str) -> Option<f64> {
    let cleaned = match raw.find('(') {
        Some(i) => &raw[..i],
        None => raw,
    };
    cleaned.parse().ok()
}

struct CifLoop {
    tags: Vec<String>,
    rows: Vec<Vec<String>>,
}

struct CifDocument {
    scalars: Vec<(String, String)>,
    loops: Vec<CifLoop>,
}

impl CifDocument {
    fn tokenize(text: &str) -> Self {
        let mut scalars = Vec::new();
        let mut loops = Vec::new();
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.eq_ignore_ascii_case("loop_") {
                let mut tags = Vec::new();
                while let Some(next) = lines.peek() {
                    let t = next.trim();
                    if t.starts_with('_') {
                        tags.push(t.split_whitespace().next().unwrap().to_string());
                        lines.next();
                    } else {
                        break;
                    }
                }
                let mut rows = Vec::new();
                while let Some(next) = lines.peek() {
                    let t = next.trim();
                    if t.is_empty()
                        || t.starts_with('_')
                        || t.starts_with('#')
                        || t.eq_ignore_ascii_case("loop_")
                        || t.starts_with("data_")
                    {
                        break;
                    }
                    rows.push(split_cif_row(t));
                    lines.next();
                }
                loops.push(CifLoop { tags, rows });
            } else if line.starts_with('_') {
                if let Some((tag, value)) = line.split_once(char::is_whitespace) {
                    scalars.push((tag.to_string(), unquote(value.trim()).to_string()));
                }
            }
        }
        CifDocument { scalars, loops }
    }

    fn scalar(&self, tag: &str) -> Option<&str> {
        self.scalars
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, v)| v.as_str())
    }

    fn find_loop(&self, tag: &str) -> Option<&CifLoop> {
        self.loops.iter().find(|lp| lp.tags.iter().any(|t| t == tag))
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    if (s.starts_with('\'') && s.ends_with('\'') && s.len() >= 2)
        || (s.starts_with('"') && s.ends_with('"') && s.len() >= 2)
    {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

fn split_cif_row(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '\'' || c == '"' {
            chars.next();
            let mut field = String::new();
            for ch in chars.by_ref() {
                if ch == c {
                    break;
                }
                field.push(ch);
            }
            fields.push(field);
        } else {
            let mut field = String::new();
            while let Some(&ch) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                field.push(ch);
                chars.next();
            }
            fields.push(field);
        }
    }
    fields
}

/// Serialize a collection as XYZ: atom count, comment, then `El x y z`
/// with 12 decimal digits in angstrom.
pub fn write_xyz(atoms: &AtomCollection, comment: &str) -> Result<String, CrystalError> {
    if atoms.atoms.is_empty() {
        return Err(CrystalError::EmptyStructure);
    }
    let mut out = String::new();
    writeln!(out, "{}", atoms.atoms.len()).unwrap();
    writeln!(out, "{}", comment).unwrap();
    for atom in &atoms.atoms {
        writeln!(
            out,
            "{} {:.12} {:.12} {:.12}",
            atom.element.symbol(),
            atom.position.x,
            atom.position.y,
            atom.position.z
        )
        .unwrap();
    }
    Ok(out)
}

/// Parse XYZ text. Origin tags are synthesized as `a<index>` in image (0,0,0).
pub fn parse_xyz(text: &str) -> Result<AtomCollection, CrystalError> {
    let mut lines = text.lines();
    let count: usize = lines
        .next()
        .ok_or_else(|| CrystalError::XyzParse("empty input".into()))?
        .trim()
        .parse()
        .map_err(|_| CrystalError::XyzParse("first line is not an atom count".into()))?;
    let _comment = lines
        .next()
        .ok_or_else(|| CrystalError::XyzParse("missing comment line".into()))?;
    let mut atoms = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(CrystalError::XyzParse(format!("short line: '{line}'")));
        }
        let element = Element::from_symbol(fields[0])?;
        let coord = |s: &str| -> Result<f64, CrystalError> {
            s.parse()
                .map_err(|_| CrystalError::XyzParse(format!("unparseable coordinate '{s}'")))
        };
        atoms.push(Atom {
            element,
            position: Vector3::new(coord(fields[1])?, coord(fields[2])?, coord(fields[3])?),
            origin: OriginTag { label: format!("a{i}"), image: [0, 0, 0] },
        });
    }
    if atoms.len() != count {
        return Err(CrystalError::XyzParse(format!(
            "header says {count} atoms but {} were found",
            atoms.len()
        )));
    }
    Ok(AtomCollection { atoms })
}
