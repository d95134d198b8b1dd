//! Cluster carving: cut finite clusters out of a periodic supercell.
//!
//! Three cluster sizes are produced: a large radius-based cluster, a
//! medium five-metal cluster, and a small three-metal cluster. Organic
//! linkers that cross the cluster boundary are truncated to formate
//! (HCO2-) or hydroxylate (OH-) capping groups, with the cap hydrogen
//! placed along the severed bond. The module also selects the "close"
//! atom set around a binding metal and propagates relaxed coordinates
//! between clusters via provenance tags.

use crate::crystal::{Atom, AtomCollection, CrystalError, OriginTag};
use crate::elements::{Element, ElementError};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

/// Cap bond lengths in angstrom: standard equilibrium values, placed
/// along the severed bond vector.
pub const CAP_CH_LENGTH: f64 = 1.09;
pub const CAP_OH_LENGTH: f64 = 0.96;
/// Metal-chloride distance used for explicit coordination completion.
pub const METAL_CL_LENGTH: f64 = 2.3;

#[derive(Debug, Error)]
pub enum CarveError {
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error("center atom '{0}' not found in the supercell")]
    CenterMissing(String),
    #[error("center atom '{tag}' is {element}, not a metal")]
    CenterNotMetal { tag: String, element: String },
    #[error(
        "carve sphere of radius {radius} angstrom around '{center}' crosses the supercell \
         boundary; rebuild the supercell with more periodic repetitions"
    )]
    SphereCrossesBoundary { center: String, radius: f64 },
    #[error("supercell has {available} metal atoms but {requested} were requested")]
    TooFewMetals { available: usize, requested: usize },
    #[error("chloride completion lists metal '{0}', which is not an included metal of the cluster")]
    ChlorideSiteNotIncluded(String),
    #[error("mobile atom '{0}' has no provenance match in the target cluster")]
    UnmatchedMobileAtom(String),
    #[error("atom index {index} out of range for cluster of {len} atoms")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid carve configuration: {0}")]
    BadConfig(String),
    #[error("malformed cluster sidecar: {0}")]
    BadSidecar(String),
}

/// Role tags attached to cluster atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Metal,
    Cap,
    Mobile,
    Close,
    Co2,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Metal => "metal",
            Role::Cap => "cap",
            Role::Mobile => "mobile",
            Role::Close => "close",
            Role::Co2 => "co2",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CarveError> {
        match s {
            "metal" => Ok(Role::Metal),
            "cap" => Ok(Role::Cap),
            "mobile" => Ok(Role::Mobile),
            "close" => Ok(Role::Close),
            "co2" => Ok(Role::Co2),
            other => Err(CarveError::BadSidecar(format!("unknown role tag '{other}'"))),
        }
    }
}

/// Formal-charge bookkeeping group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum GroupKind {
    Metal,
    Formate,
    Hydroxylate,
    Chloride,
    Linker,
    Adsorbate,
}

impl GroupKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKind::Metal => "metal",
            GroupKind::Formate => "formate",
            GroupKind::Hydroxylate => "hydroxylate",
            GroupKind::Chloride => "chloride",
            GroupKind::Linker => "linker",
            GroupKind::Adsorbate => "adsorbate",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CarveError> {
        match s {
            "metal" => Ok(GroupKind::Metal),
            "formate" => Ok(GroupKind::Formate),
            "hydroxylate" => Ok(GroupKind::Hydroxylate),
            "chloride" => Ok(GroupKind::Chloride),
            "linker" => Ok(GroupKind::Linker),
            "adsorbate" => Ok(GroupKind::Adsorbate),
            other => Err(CarveError::BadSidecar(format!("unknown group kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeGroup {
    pub kind: GroupKind,
    pub charge: i32,
}

/// One atom of a carved cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAtom {
    pub element: Element,
    /// Cartesian position in angstrom.
    pub position: Vector3<f64>,
    pub roles: BTreeSet<Role>,
    /// Supercell origin; cap atoms carry the tag of the atom they replace.
    pub origin: OriginTag,
    /// Index into `Cluster::groups`.
    pub group: usize,
}

impl ClusterAtom {
    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

/// A finite carved cluster with formal-charge bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub atoms: Vec<ClusterAtom>,
    pub groups: Vec<ChargeGroup>,
    pub net_charge: i32,
    pub n_unpaired: u32,
}

impl Cluster {
    fn from_parts(atoms: Vec<ClusterAtom>, groups: Vec<ChargeGroup>) -> Self {
        let net_charge: i32 = groups.iter().map(|g| g.charge).sum();
        let mut cluster = Cluster { atoms, groups, net_charge, n_unpaired: 0 };
        // Default spin: the minimum consistent with electron-count parity;
        // the workflow overrides this from its per-metal spin table.
        cluster.n_unpaired = (cluster.n_electrons() % 2) as u32;
        cluster.canonicalize();
        cluster
    }

    pub fn n_electrons(&self) -> i64 {
        let z: i64 = self.atoms.iter().map(|a| a.element.charge() as i64).sum();
        z - self.net_charge as i64
    }

    /// Replace the unpaired-electron count, validating parity.
    pub fn set_unpaired(&mut self, n_unpaired: u32) -> Result<(), CarveError> {
        let electrons = self.n_electrons();
        if electrons < n_unpaired as i64 || (electrons - n_unpaired as i64) % 2 != 0 {
            return Err(CarveError::BadConfig(format!(
                "{electrons} electrons cannot host {n_unpaired} unpaired electrons"
            )));
        }
        self.n_unpaired = n_unpaired;
        Ok(())
    }

    /// Geometry in angstrom as (element, position) pairs.
    pub fn geometry(&self) -> Vec<(Element, Vector3<f64>)> {
        self.atoms.iter().map(|a| (a.element, a.position)).collect()
    }

    pub fn indices_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.atoms.len()).filter(|&i| self.atoms[i].has_role(role)).collect()
    }

    /// Canonical atom order: non-cap atoms sorted by provenance tag, caps
    /// last sorted by the tag of the atom they replace. Charge groups are
    /// renumbered in order of first appearance so identical clusters
    /// serialize identically regardless of input atom order.
    fn canonicalize(&mut self) {
        let key = |a: &ClusterAtom| (a.has_role(Role::Cap), a.origin.clone(), a.element);
        self.atoms.sort_by(|x, y| key(x).cmp(&key(y)));
        let mut remap: Vec<Option<usize>> = vec![None; self.groups.len()];
        let mut new_groups = Vec::with_capacity(self.groups.len());
        for atom in &mut self.atoms {
            let new_id = *remap[atom.group].get_or_insert_with(|| {
                new_groups.push(self.groups[atom.group].clone());
                new_groups.len() - 1
            });
            atom.group = new_id;
        }
        self.groups = new_groups;
    }

    /// Append adsorbate atoms (tagged `co2`) as a neutral group.
    pub fn append_adsorbate(&mut self, geometry: &[(Element, Vector3<f64>)]) {
        let group = self.groups.len();
        self.groups.push(ChargeGroup { kind: GroupKind::Adsorbate, charge: 0 });
        for (k, (element, position)) in geometry.iter().enumerate() {
            self.atoms.push(ClusterAtom {
                element: *element,
                position: *position,
                roles: BTreeSet::from([Role::Co2]),
                origin: OriginTag { label: format!("ads{k}"), image: [0, 0, 0] },
                group,
            });
        }
        self.n_unpaired = (self.n_electrons() % 2) as u32;
    }

    /// Check the structural invariants: caps are hydrogen or chloride and
    /// provenance is injective on non-cap atoms.
    pub fn validate(&self) -> Result<(), CarveError> {
        let h = Element::from_symbol("H").unwrap();
        let cl = Element::from_symbol("Cl").unwrap();
        let mut seen = BTreeSet::new();
        for atom in &self.atoms {
            if atom.has_role(Role::Cap) {
                if atom.element != h && atom.element != cl {
                    return Err(CarveError::BadConfig(format!(
                        "cap atom '{}' is {}, expected H or Cl",
                        atom.origin,
                        atom.element.symbol()
                    )));
                }
            } else if !seen.insert(atom.origin.clone()) {
                return Err(CarveError::BadConfig(format!(
                    "provenance tag '{}' appears on more than one non-cap atom",
                    atom.origin
                )));
            }
        }
        let electrons = self.n_electrons();
        if (electrons - self.n_unpaired as i64) % 2 != 0 {
            return Err(CarveError::BadConfig(format!(
                "spin parity mismatch: {electrons} electrons, {} unpaired",
                self.n_unpaired
            )));
        }
        Ok(())
    }
}

/// Carving parameters.
#[derive(Debug, Clone)]
pub struct CarveConfig {
    /// Large-cluster radius in angstrom.
    pub radius: f64,
    pub n_small_metals: usize,
    pub n_medium_metals: usize,
    /// Bond-detection scale on the sum of covalent radii.
    pub bond_scale: f64,
    /// Metal sites (by origin tag) whose coordination sphere is completed
    /// with an explicit chloride ligand in the medium cluster.
    pub chloride_completion: Vec<OriginTag>,
    /// When set, a linker counts as fully included if all its
    /// non-hydrogen atoms lie inside the radius.
    pub linker_heavy_atom_rule: bool,
}

impl Default for CarveConfig {
    fn default() -> Self {
        CarveConfig {
            radius: 12.5,
            n_small_metals: 3,
            n_medium_metals: 5,
            bond_scale: 1.2,
            chloride_completion: Vec::new(),
            linker_heavy_atom_rule: true,
        }
    }
}

impl CarveConfig {
    pub fn validate(&self) -> Result<(), CarveError> {
        if !(self.radius > 0.0) {
            return Err(CarveError::BadConfig(format!("radius must be positive, got {}", self.radius)));
        }
        if self.n_small_metals > self.n_medium_metals {
            return Err(CarveError::BadConfig(format!(
                "n_small_metals ({}) exceeds n_medium_metals ({})",
                self.n_small_metals, self.n_medium_metals
            )));
        }
        if !(self.bond_scale > 0.0) {
            return Err(CarveError::BadConfig(format!(
                "bond_scale must be positive, got {}",
                self.bond_scale
            )));
        }
        Ok(())
    }
}

/// Undirected bond graph over an atom collection.
#[derive(Debug, Clone)]
pub struct BondGraph {
    pub n: usize,
    /// Unordered index pairs (i < j) with bond length in angstrom.
    pub edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<usize>>,
}

impl BondGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    /// Breadth-first graph distances from `start`; unreachable nodes get
    /// `usize::MAX`.
    pub fn distances(&self, start: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.n];
        let mut queue = VecDeque::new();
        dist[start] = 0;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Connected components of the subgraph induced by `keep`.
    fn components(&self, keep: &dyn Fn(usize) -> bool) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n];
        let mut out = Vec::new();
        for s in 0..self.n {
            if seen[s] || !keep(s) {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([s]);
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                comp.push(u);
                for &v in &self.adjacency[u] {
                    if !seen[v] && keep(v) {
                        seen[v] = true;
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Detect bonds: an edge exists iff the interatomic distance is at most
/// `scale` times the sum of the covalent radii.
pub fn detect_bonds(atoms: &AtomCollection, scale: f64) -> Result<BondGraph, CarveError> {
    let n = atoms.atoms.len();
    let mut edges = Vec::new();
    let mut adjacency = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &atoms.atoms[i];
            let b = &atoms.atoms[j];
            let d = (a.position - b.position).norm();
            let threshold = scale * (a.element.covalent_radius() + b.element.covalent_radius());
            if d <= threshold {
                edges.push((i, j, d));
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
    }
    Ok(BondGraph { n, edges, adjacency })
}

/// A carboxylate group: the acid carbon, its oxygens, and the linker atom
/// the carbon connects to (severed when the group is reduced to formate).
#[derive(Debug, Clone)]
struct Carboxylate {
    carbon: usize,
    oxygens: Vec<usize>,
    anchor: Option<usize>,
}

/// An alkoxide oxygen with its linker carbon (severed for hydroxylate).
#[derive(Debug, Clone)]
struct Alkoxide {
    oxygen: usize,
    anchor: usize,
}

struct Chemistry {
    carboxylates: Vec<Carboxylate>,
    alkoxides: Vec<Alkoxide>,
}

impl Chemistry {
    /// Coordination check: does any oxygen of the group bond to a metal in
    /// `metals`?
    fn carboxylate_coordinated(&self, g: &Carboxylate, graph: &BondGraph, atoms: &AtomCollection, metals: &BTreeSet<usize>) -> bool {
        g.oxygens.iter().any(|&o| {
            graph.neighbors(o).iter().any(|&m| metals.contains(&m) && atoms.atoms[m].element.is_metal())
        })
    }

    fn alkoxide_coordinated(&self, g: &Alkoxide, graph: &BondGraph, atoms: &AtomCollection, metals: &BTreeSet<usize>) -> bool {
        graph
            .neighbors(g.oxygen)
            .iter()
            .any(|&m| metals.contains(&m) && atoms.atoms[m].element.is_metal())
    }
}

/// Identify carboxylate and alkoxide groups from the bond graph.
fn identify_chemistry(atoms: &AtomCollection, graph: &BondGraph) -> Chemistry {
    let c = Element::from_symbol("C").unwrap();
    let o = Element::from_symbol("O").unwrap();
    let n = atoms.atoms.len();
    let mut carboxylates = Vec::new();
    let mut group_of = vec![None; n];

    for i in 0..n {
        if atoms.atoms[i].element != c {
            continue;
        }
        // Oxygens owned by this carbon: bonded O with no other C neighbor.
        let oxygens: Vec<usize> = graph
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&j| {
                atoms.atoms[j].element == o
                    && !graph
                        .neighbors(j)
                        .iter()
                        .any(|&k| k != i && atoms.atoms[k].element == c)
            })
            .collect();
        if oxygens.len() < 2 {
            continue;
        }
        let anchor = graph
            .neighbors(i)
            .iter()
            .copied()
            .find(|&j| !oxygens.contains(&j) && !atoms.atoms[j].element.is_metal());
        let id = carboxylates.len();
        group_of[i] = Some(id);
        for &ox in &oxygens {
            group_of[ox] = Some(id);
        }
        carboxylates.push(Carboxylate { carbon: i, oxygens, anchor });
    }

    let n_carboxylates = carboxylates.len();
    let mut alkoxides = Vec::new();
    for i in 0..n {
        if atoms.atoms[i].element != o || group_of[i].is_some() {
            continue;
        }
        let carbons: Vec<usize> = graph
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&j| atoms.atoms[j].element == c)
            .collect();
        let coordinated = graph.neighbors(i).iter().any(|&j| atoms.atoms[j].element.is_metal());
        if carbons.len() == 1 && coordinated {
            group_of[i] = Some(n_carboxylates + alkoxides.len());
            alkoxides.push(Alkoxide { oxygen: i, anchor: carbons[0] });
        }
    }

    Chemistry { carboxylates, alkoxides }
}

/// Build a cap atom replacing `severed`, placed along the bond from
/// `kept` toward `severed` at distance `length`.
fn cap_toward(kept: &Atom, severed: &Atom, length: f64, group: usize) -> ClusterAtom {
    let direction = (severed.position - kept.position).normalize();
    ClusterAtom {
        element: Element::from_symbol("H").unwrap(),
        position: kept.position + length * direction,
        roles: BTreeSet::from([Role::Cap]),
        origin: severed.origin.clone(),
        group,
    }
}

fn plain_atom(atom: &Atom, roles: BTreeSet<Role>, group: usize) -> ClusterAtom {
    ClusterAtom {
        element: atom.element,
        position: atom.position,
        roles,
        origin: atom.origin.clone(),
        group,
    }
}

/// Reduce a coordinated carboxylate to a formate group (1 C, 2 O, cap H),
/// or keep it uncapped when it has no severed anchor.
fn emit_formate(
    atoms: &AtomCollection,
    g: &Carboxylate,
    out: &mut Vec<ClusterAtom>,
    groups: &mut Vec<ChargeGroup>,
) {
    let id = groups.len();
    groups.push(ChargeGroup { kind: GroupKind::Formate, charge: -1 });
    out.push(plain_atom(&atoms.atoms[g.carbon], BTreeSet::new(), id));
    for &ox in &g.oxygens {
        out.push(plain_atom(&atoms.atoms[ox], BTreeSet::new(), id));
    }
    if let Some(anchor) = g.anchor {
        out.push(cap_toward(&atoms.atoms[g.carbon], &atoms.atoms[anchor], CAP_CH_LENGTH, id));
    }
}

fn emit_hydroxylate(
    atoms: &AtomCollection,
    g: &Alkoxide,
    out: &mut Vec<ClusterAtom>,
    groups: &mut Vec<ChargeGroup>,
) {
    let id = groups.len();
    groups.push(ChargeGroup { kind: GroupKind::Hydroxylate, charge: -1 });
    out.push(plain_atom(&atoms.atoms[g.oxygen], BTreeSet::new(), id));
    out.push(cap_toward(&atoms.atoms[g.oxygen], &atoms.atoms[g.anchor], CAP_OH_LENGTH, id));
}

/// Carve the large cluster: all atoms within `cfg.radius` of the center
/// metal, with boundary-crossing linkers reduced to formate/hydroxylate.
pub fn carve_large(
    supercell: &AtomCollection,
    center_metal: &OriginTag,
    cfg: &CarveConfig,
) -> Result<Cluster, CarveError> {
    cfg.validate()?;
    let center_idx = supercell
        .atoms
        .iter()
        .position(|a| &a.origin == center_metal)
        .ok_or_else(|| CarveError::CenterMissing(center_metal.to_string()))?;
    let center = &supercell.atoms[center_idx];
    if !center.element.is_metal() {
        return Err(CarveError::CenterNotMetal {
            tag: center_metal.to_string(),
            element: center.element.symbol().to_string(),
        });
    }

    // Boundary check: only meaningful for periodic supercells (any atom
    // outside the home image); finite molecular inputs have no boundary.
    let periodic = supercell.atoms.iter().any(|a| a.origin.image != [0, 0, 0]);
    if periodic {
        let mut lo = center.position;
        let mut hi = center.position;
        for a in &supercell.atoms {
            for k in 0..3 {
                lo[k] = lo[k].min(a.position[k]);
                hi[k] = hi[k].max(a.position[k]);
            }
        }
        for k in 0..3 {
            if hi[k] - lo[k] > 1e-6
                && (center.position[k] - cfg.radius < lo[k] || center.position[k] + cfg.radius > hi[k])
            {
                return Err(CarveError::SphereCrossesBoundary {
                    center: center_metal.to_string(),
                    radius: cfg.radius,
                });
            }
        }
    }

    let graph = detect_bonds(supercell, cfg.bond_scale)?;
    let chem = identify_chemistry(supercell, &graph);
    let n = supercell.atoms.len();
    let in_radius: Vec<bool> = (0..n)
        .map(|i| (supercell.atoms[i].position - center.position).norm() <= cfg.radius)
        .collect();

    let mut atoms = Vec::new();
    let mut groups = Vec::new();

    // Included metals.
    let mut included_metals = BTreeSet::new();
    for i in 0..n {
        if in_radius[i] && supercell.atoms[i].element.is_metal() {
            included_metals.insert(i);
            let id = groups.len();
            groups.push(ChargeGroup { kind: GroupKind::Metal, charge: 2 });
            atoms.push(plain_atom(&supercell.atoms[i], BTreeSet::from([Role::Metal]), id));
        }
    }

    // Organic components (metal nodes removed).
    let h = Element::from_symbol("H").unwrap();
    let linkers = graph.components(&|i| !supercell.atoms[i].element.is_metal());
    for linker in &linkers {
        if !linker.iter().any(|&i| in_radius[i]) {
            continue;
        }
        let fully_included = linker
            .iter()
            .filter(|&&i| !(cfg.linker_heavy_atom_rule && supercell.atoms[i].element == h))
            .all(|&i| in_radius[i]);
        if fully_included {
            // Keep the whole linker; its formal charge counts one negative
            // unit per carboxylate and per alkoxide oxygen.
            let member = |g: usize| linker.binary_search(&g).is_ok();
            let n_groups = chem
                .carboxylates
                .iter()
                .filter(|g| member(g.carbon))
                .count()
                + chem.alkoxides.iter().filter(|g| member(g.oxygen)).count();
            let id = groups.len();
            groups.push(ChargeGroup { kind: GroupKind::Linker, charge: -(n_groups as i32) });
            for &i in linker {
                atoms.push(plain_atom(&supercell.atoms[i], BTreeSet::new(), id));
            }
        } else {
            for g in &chem.carboxylates {
                if linker.binary_search(&g.carbon).is_ok()
                    && chem.carboxylate_coordinated(g, &graph, supercell, &included_metals)
                {
                    emit_formate(supercell, g, &mut atoms, &mut groups);
                }
            }
            for g in &chem.alkoxides {
                if linker.binary_search(&g.oxygen).is_ok()
                    && chem.alkoxide_coordinated(g, &graph, supercell, &included_metals)
                {
                    emit_hydroxylate(supercell, g, &mut atoms, &mut groups);
                }
            }
        }
    }

    Ok(Cluster::from_parts(atoms, groups))
}

/// Metals sorted by distance to a reference point.
fn metals_by_distance(supercell: &AtomCollection, point: Vector3<f64>) -> Vec<usize> {
    let mut metals: Vec<usize> = (0..supercell.atoms.len())
        .filter(|&i| supercell.atoms[i].element.is_metal())
        .collect();
    metals.sort_by(|&a, &b| {
        let da = (supercell.atoms[a].position - point).norm();
        let db = (supercell.atoms[b].position - point).norm();
        da.total_cmp(&db).then(supercell.atoms[a].origin.cmp(&supercell.atoms[b].origin))
    });
    metals
}

/// Carve the small cluster: the metals nearest to the adsorption site,
/// each coordinated carboxylate reduced to formate and each coordinated
/// alkoxide to hydroxylate. The adsorbate itself is appended separately.
pub fn carve_small(
    supercell: &AtomCollection,
    co2_site: Vector3<f64>,
    cfg: &CarveConfig,
) -> Result<Cluster, CarveError> {
    cfg.validate()?;
    let metals = metals_by_distance(supercell, co2_site);
    if metals.len() < cfg.n_small_metals {
        return Err(CarveError::TooFewMetals {
            available: metals.len(),
            requested: cfg.n_small_metals,
        });
    }
    let selected: BTreeSet<usize> = metals[..cfg.n_small_metals].iter().copied().collect();
    let graph = detect_bonds(supercell, cfg.bond_scale)?;
    let chem = identify_chemistry(supercell, &graph);

    let mut atoms = Vec::new();
    let mut groups = Vec::new();
    for &m in &selected {
        let id = groups.len();
        groups.push(ChargeGroup { kind: GroupKind::Metal, charge: 2 });
        atoms.push(plain_atom(&supercell.atoms[m], BTreeSet::from([Role::Metal]), id));
    }
    for g in &chem.carboxylates {
        if chem.carboxylate_coordinated(g, &graph, supercell, &selected) {
            emit_formate(supercell, g, &mut atoms, &mut groups);
        }
    }
    for g in &chem.alkoxides {
        if chem.alkoxide_coordinated(g, &graph, supercell, &selected) {
            emit_hydroxylate(supercell, g, &mut atoms, &mut groups);
        }
    }
    Ok(Cluster::from_parts(atoms, groups))
}

/// Carve the medium cluster: `n_medium_metals` nearest metals; linkers
/// anchored at the central metals keep their ring with non-coordinated
/// acid/alkoxide groups cut off and ring-capped; peripheral linkers are
/// reduced to formate/hydroxylate; explicit chlorides complete the listed
/// metal sites. Central metals and non-cap hydrogens are tagged `mobile`.
pub fn carve_medium(
    supercell: &AtomCollection,
    co2_site: Vector3<f64>,
    cfg: &CarveConfig,
) -> Result<Cluster, CarveError> {
    cfg.validate()?;
    let metals = metals_by_distance(supercell, co2_site);
    if metals.len() < cfg.n_medium_metals {
        return Err(CarveError::TooFewMetals {
            available: metals.len(),
            requested: cfg.n_medium_metals,
        });
    }
    let included: BTreeSet<usize> = metals[..cfg.n_medium_metals].iter().copied().collect();
    let central: BTreeSet<usize> = metals[..cfg.n_small_metals].iter().copied().collect();
    let graph = detect_bonds(supercell, cfg.bond_scale)?;
    let chem = identify_chemistry(supercell, &graph);

    let mut atoms = Vec::new();
    let mut groups = Vec::new();
    for &m in &included {
        let id = groups.len();
        groups.push(ChargeGroup { kind: GroupKind::Metal, charge: 2 });
        let mut roles = BTreeSet::from([Role::Metal]);
        if central.contains(&m) {
            roles.insert(Role::Mobile);
        }
        atoms.push(plain_atom(&supercell.atoms[m], roles, id));
    }

    let linkers = graph.components(&|i| !supercell.atoms[i].element.is_metal());
    for linker in &linkers {
        let member = |i: usize| linker.binary_search(&i).is_ok();
        let carbs: Vec<&Carboxylate> =
            chem.carboxylates.iter().filter(|g| member(g.carbon)).collect();
        let alks: Vec<&Alkoxide> = chem.alkoxides.iter().filter(|g| member(g.oxygen)).collect();
        let coordinated_c: Vec<bool> = carbs
            .iter()
            .map(|g| chem.carboxylate_coordinated(g, &graph, supercell, &included))
            .collect();
        let coordinated_a: Vec<bool> = alks
            .iter()
            .map(|g| chem.alkoxide_coordinated(g, &graph, supercell, &included))
            .collect();
        if !coordinated_c.iter().chain(&coordinated_a).any(|&c| c) {
            continue;
        }
        // A linker keeps its ring when it is anchored at one of the
        // central metals; linkers touching only the outer metals are
        // reduced to capping groups.
        let ring_included = carbs
            .iter()
            .any(|g| chem.carboxylate_coordinated(g, &graph, supercell, &central))
            || alks
                .iter()
                .any(|g| chem.alkoxide_coordinated(g, &graph, supercell, &central));
        if ring_included {
            // Remove non-coordinated groups and cap the severed ring bond.
            let mut removed: BTreeSet<usize> = BTreeSet::new();
            let mut caps: Vec<(usize, usize)> = Vec::new(); // (kept ring atom, severed atom)
            for (g, &coord) in carbs.iter().zip(&coordinated_c) {
                if !coord {
                    removed.insert(g.carbon);
                    removed.extend(g.oxygens.iter().copied());
                    if let Some(anchor) = g.anchor {
                        caps.push((anchor, g.carbon));
                    }
                }
            }
            for (g, &coord) in alks.iter().zip(&coordinated_a) {
                if !coord {
                    removed.insert(g.oxygen);
                    caps.push((g.anchor, g.oxygen));
                }
            }
            let n_kept = coordinated_c.iter().filter(|&&c| c).count()
                + coordinated_a.iter().filter(|&&c| c).count();
            let id = groups.len();
            groups.push(ChargeGroup { kind: GroupKind::Linker, charge: -(n_kept as i32) });
            for &i in linker {
                if !removed.contains(&i) {
                    atoms.push(plain_atom(&supercell.atoms[i], BTreeSet::new(), id));
                }
            }
            for (kept, severed) in caps {
                atoms.push(cap_toward(
                    &supercell.atoms[kept],
                    &supercell.atoms[severed],
                    CAP_CH_LENGTH,
                    id,
                ));
            }
        } else {
            for (g, &coord) in carbs.iter().zip(&coordinated_c) {
                if coord {
                    emit_formate(supercell, g, &mut atoms, &mut groups);
                }
            }
            for (g, &coord) in alks.iter().zip(&coordinated_a) {
                if coord {
                    emit_hydroxylate(supercell, g, &mut atoms, &mut groups);
                }
            }
        }
    }

    // Explicit chloride completion at listed edge metals.
    let centroid = included
        .iter()
        .fold(Vector3::zeros(), |acc, &m| acc + supercell.atoms[m].position)
        / included.len() as f64;
    for site in &cfg.chloride_completion {
        let m = included
            .iter()
            .copied()
            .find(|&m| &supercell.atoms[m].origin == site)
            .ok_or_else(|| CarveError::ChlorideSiteNotIncluded(site.to_string()))?;
        let metal = &supercell.atoms[m];
        let away = metal.position - centroid;
        let direction = if away.norm() > 1e-9 {
            away.normalize()
        } else {
            Vector3::new(0.0, 0.0, 1.0)
        };
        let id = groups.len();
        groups.push(ChargeGroup { kind: GroupKind::Chloride, charge: -1 });
        atoms.push(ClusterAtom {
            element: Element::from_symbol("Cl").unwrap(),
            position: metal.position + METAL_CL_LENGTH * direction,
            roles: BTreeSet::from([Role::Cap]),
            origin: metal.origin.clone(),
            group: id,
        });
    }

    let mut cluster = Cluster::from_parts(atoms, groups);
    // Mobile set: central metals (already tagged) plus non-cap hydrogens.
    let h = Element::from_symbol("H").unwrap();
    for atom in &mut cluster.atoms {
        if atom.element == h && !atom.has_role(Role::Cap) {
            atom.roles.insert(Role::Mobile);
        }
    }
    Ok(cluster)
}

/// Select the close-atom set: the binding metal, every atom within graph
/// distance 2 of it, and all adsorbate-tagged atoms.
pub fn select_close_atoms(
    cluster: &Cluster,
    binding_metal: usize,
    bond_scale: f64,
) -> Result<BTreeSet<usize>, CarveError> {
    if binding_metal >= cluster.atoms.len() {
        return Err(CarveError::IndexOutOfRange {
            index: binding_metal,
            len: cluster.atoms.len(),
        });
    }
    let collection = AtomCollection {
        atoms: cluster
            .atoms
            .iter()
            .map(|a| Atom {
                element: a.element,
                position: a.position,
                origin: a.origin.clone(),
            })
            .collect(),
    };
    let graph = detect_bonds(&collection, bond_scale)?;
    let dist = graph.distances(binding_metal);
    let mut close: BTreeSet<usize> = (0..cluster.atoms.len())
        .filter(|&i| dist[i] <= 2)
        .collect();
    for (i, atom) in cluster.atoms.iter().enumerate() {
        if atom.has_role(Role::Co2) {
            close.insert(i);
        }
    }
    Ok(close)
}

/// Copy relaxed positions of the mobile atoms of `relaxed_medium` onto
/// the provenance-matched atoms of `target`; everything else unchanged.
pub fn propagate_coordinates(
    relaxed_medium: &Cluster,
    target: &Cluster,
) -> Result<Cluster, CarveError> {
    let mut index: BTreeMap<&OriginTag, usize> = BTreeMap::new();
    for (i, atom) in target.atoms.iter().enumerate() {
        if !atom.has_role(Role::Cap) {
            index.insert(&atom.origin, i);
        }
    }
    let mut out = target.clone();
    for atom in &relaxed_medium.atoms {
        if !atom.has_role(Role::Mobile) || atom.has_role(Role::Cap) {
            continue;
        }
        let &i = index
            .get(&atom.origin)
            .ok_or_else(|| CarveError::UnmatchedMobileAtom(atom.origin.to_string()))?;
        out.atoms[i].position = atom.position;
    }
    Ok(out)
}

/// Serialize a cluster to XYZ text plus a sidecar table (one row per
/// atom: index, provenance, role tags, charge-group id; then one row per
/// group: kind and formal charge). The pair round-trips byte-identically.
pub fn write_cluster(cluster: &Cluster) -> (String, String) {
    let mut xyz = String::new();
    writeln!(xyz, "{}", cluster.atoms.len()).unwrap();
    writeln!(
        xyz,
        "net_charge={} n_unpaired={}",
        cluster.net_charge, cluster.n_unpaired
    )
    .unwrap();
    for atom in &cluster.atoms {
        writeln!(
            xyz,
            "{} {:.12} {:.12} {:.12}",
            atom.element.symbol(),
            atom.position.x,
            atom.position.y,
            atom.position.z
        )
        .unwrap();
    }

    let mut sidecar = String::new();
    writeln!(sidecar, "# atom<TAB>origin<TAB>roles<TAB>group").unwrap();
    for (i, atom) in cluster.atoms.iter().enumerate() {
        let roles = if atom.roles.is_empty() {
            "-".to_string()
        } else {
            atom.roles.iter().map(|r| r.as_str()).collect::<Vec<_>>().join(",")
        };
        writeln!(sidecar, "{i}\t{}\t{roles}\t{}", atom.origin, atom.group).unwrap();
    }
    for (i, group) in cluster.groups.iter().enumerate() {
        writeln!(sidecar, "group\t{i}\t{}\t{}", group.kind.as_str(), group.charge).unwrap();
    }
    (xyz, sidecar)
}

/// Parse the `write_cluster` pair back into a cluster.
pub fn read_cluster(xyz: &str, sidecar: &str) -> Result<Cluster, CarveError> {
    let collection = crate::crystal::parse_xyz(xyz)?;
    let comment = xyz
        .lines()
        .nth(1)
        .ok_or_else(|| CarveError::BadSidecar("xyz missing comment line".into()))?;
    let mut net_charge = 0i32;
    let mut n_unpaired = 0u32;
    for field in comment.split_whitespace() {
        if let Some(v) = field.strip_prefix("net_charge=") {
            net_charge = v
                .parse()
                .map_err(|_| CarveError::BadSidecar(format!("bad net_charge '{v}'")))?;
        } else if let Some(v) = field.strip_prefix("n_unpaired=") {
            n_unpaired = v
                .parse()
                .map_err(|_| CarveError::BadSidecar(format!("bad n_unpaired '{v}'")))?;
        }
    }

    let mut atoms: Vec<ClusterAtom> = collection
        .atoms
        .into_iter()
        .map(|a| ClusterAtom {
            element: a.element,
            position: a.position,
            roles: BTreeSet::new(),
            origin: a.origin,
            group: 0,
        })
        .collect();
    let mut groups: Vec<(usize, ChargeGroup)> = Vec::new();

    for line in sidecar.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields[0] == "group" {
            if fields.len() != 4 {
                return Err(CarveError::BadSidecar(format!("bad group row '{line}'")));
            }
            let id: usize = fields[1]
                .parse()
                .map_err(|_| CarveError::BadSidecar(format!("bad group id '{}'", fields[1])))?;
            let kind = GroupKind::parse(fields[2])?;
            let charge: i32 = fields[3]
                .parse()
                .map_err(|_| CarveError::BadSidecar(format!("bad charge '{}'", fields[3])))?;
            groups.push((id, ChargeGroup { kind, charge }));
            continue;
        }
        if fields.len() != 4 {
            return Err(CarveError::BadSidecar(format!("bad atom row '{line}'")));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| CarveError::BadSidecar(format!("bad atom index '{}'", fields[0])))?;
        if idx >= atoms.len() {
            return Err(CarveError::BadSidecar(format!(
                "atom index {idx} out of range ({} atoms)",
                atoms.len()
            )));
        }
        atoms[idx].origin = OriginTag::parse(fields[1])
            .ok_or_else(|| CarveError::BadSidecar(format!("bad origin tag '{}'", fields[1])))?;
        if fields[2] != "-" {
            for role in fields[2].split(',') {
                atoms[idx].roles.insert(Role::parse(role)?);
            }
        }
        atoms[idx].group = fields[3]
            .parse()
            .map_err(|_| CarveError::BadSidecar(format!("bad group ref '{}'", fields[3])))?;
    }

    groups.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in groups.iter().enumerate() {
        if *id != expect {
            return Err(CarveError::BadSidecar(format!(
                "group ids are not contiguous (missing {expect})"
            )));
        }
    }
    let groups: Vec<ChargeGroup> = groups.into_iter().map(|(_, g)| g).collect();
    for atom in &atoms {
        if atom.group >= groups.len() {
            return Err(CarveError::BadSidecar(format!(
                "atom references group {} but only {} groups are defined",
                atom.group,
                groups.len()
            )));
        }
    }
    Ok(Cluster { atoms, groups, net_charge, n_unpaired })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{build_supercell, parse_cif};

    fn atom(symbol: &str, x: f64, y: f64, z: f64, label: &str) -> Atom {
        Atom {
            element: Element::from_symbol(symbol).unwrap(),
            position: Vector3::new(x, y, z),
            origin: OriginTag { label: label.to_string(), image: [0, 0, 0] },
        }
    }

    /// Carboxylate arm along +x of a metal at `m`: O1 coordinated to the
    /// metal, acid carbon, second oxygen, and the anchor carbon that gets
    /// severed on capping.
    fn carboxylate_arm(m: Vector3<f64>, tag: &str) -> Vec<Atom> {
        vec![
            atom("O", m.x + 2.0, m.y, m.z, &format!("{tag}o1")),
            atom("C", m.x + 3.2, m.y, m.z, &format!("{tag}c")),
            atom("O", m.x + 3.5, m.y + 1.17, m.z, &format!("{tag}o2")),
            atom("C", m.x + 4.4, m.y - 0.9, m.z, &format!("{tag}an")),
        ]
    }

    /// Carboxylate arm along +y.
    fn carboxylate_arm_y(m: Vector3<f64>, tag: &str) -> Vec<Atom> {
        vec![
            atom("O", m.x, m.y + 2.0, m.z, &format!("{tag}o1")),
            atom("C", m.x, m.y + 3.2, m.z, &format!("{tag}c")),
            atom("O", m.x + 1.17, m.y + 3.5, m.z, &format!("{tag}o2")),
            atom("C", m.x - 0.9, m.y + 4.4, m.z, &format!("{tag}an")),
        ]
    }

    /// Alkoxide arm along -x: oxygen bonded to the metal and one carbon.
    fn alkoxide_arm(m: Vector3<f64>, tag: &str) -> Vec<Atom> {
        vec![
            atom("O", m.x - 2.0, m.y, m.z, &format!("{tag}o")),
            atom("C", m.x - 3.3, m.y + 0.5, m.z, &format!("{tag}an")),
        ]
    }

    /// MOF-74-like fixture: three metals, each with two carboxylates and
    /// one alkoxide coordinated.
    fn small_fixture() -> AtomCollection {
        let mut atoms = Vec::new();
        for k in 0..3 {
            let m = Vector3::new(0.0, 0.0, 8.0 * k as f64);
            atoms.push(atom("Zn", m.x, m.y, m.z, &format!("m{k}")));
            atoms.extend(carboxylate_arm(m, &format!("m{k}a")));
            atoms.extend(carboxylate_arm_y(m, &format!("m{k}b")));
            atoms.extend(alkoxide_arm(m, &format!("m{k}x")));
        }
        AtomCollection { atoms }
    }

    fn count_role(cluster: &Cluster, role: Role) -> usize {
        cluster.atoms.iter().filter(|a| a.has_role(role)).count()
    }

    fn count_kind(cluster: &Cluster, kind: GroupKind) -> usize {
        cluster.groups.iter().filter(|g| g.kind == kind).count()
    }

    #[test]
    fn bond_detection_matches_radii_table() {
        let hh = AtomCollection {
            atoms: vec![atom("H", 0.0, 0.0, 0.0, "h1"), atom("H", 0.74, 0.0, 0.0, "h2")],
        };
        let g = detect_bonds(&hh, 1.2).unwrap();
        assert_eq!(g.edges.len(), 1); // threshold 1.2 * 0.62 = 0.744

        let cc = AtomCollection {
            atoms: vec![atom("C", 0.0, 0.0, 0.0, "c1"), atom("C", 5.0, 0.0, 0.0, "c2")],
        };
        assert!(detect_bonds(&cc, 1.2).unwrap().edges.is_empty());

        let co = AtomCollection {
            atoms: vec![atom("C", 0.0, 0.0, 0.0, "c"), atom("O", 1.43, 0.0, 0.0, "o")],
        };
        let g = detect_bonds(&co, 1.2).unwrap();
        assert_eq!(g.edges.len(), 1); // threshold 1.2 * (0.76 + 0.66) = 1.704
        assert!((g.edges[0].2 - 1.43).abs() < 1e-12);
    }

    #[test]
    fn large_cluster_radius_filters_atoms() {
        let cell = AtomCollection {
            atoms: vec![
                atom("Zn", 0.0, 0.0, 0.0, "m"),
                atom("O", 5.0, 0.0, 0.0, "near"),
                atom("O", 15.0, 0.0, 0.0, "far"),
            ],
        };
        let tag = OriginTag { label: "m".into(), image: [0, 0, 0] };
        let cluster = carve_large(&cell, &tag, &CarveConfig::default()).unwrap();
        let labels: Vec<&str> = cluster.atoms.iter().map(|a| a.origin.label.as_str()).collect();
        assert_eq!(labels, vec!["m", "near"]);
    }

    #[test]
    fn large_cluster_rejects_nonmetal_center() {
        let cell = AtomCollection {
            atoms: vec![atom("O", 0.0, 0.0, 0.0, "o"), atom("Zn", 3.0, 0.0, 0.0, "m")],
        };
        let tag = OriginTag { label: "o".into(), image: [0, 0, 0] };
        let err = carve_large(&cell, &tag, &CarveConfig::default()).unwrap_err();
        assert!(matches!(err, CarveError::CenterNotMetal { .. }));
        let missing = OriginTag { label: "zz".into(), image: [0, 0, 0] };
        let err = carve_large(&cell, &missing, &CarveConfig::default()).unwrap_err();
        assert!(matches!(err, CarveError::CenterMissing(_)));
    }

    #[test]
    fn linker_kept_whole_when_only_hydrogen_sticks_out() {
        let cell = AtomCollection {
            atoms: vec![
                atom("Zn", 0.0, 0.0, 0.0, "m"),
                atom("C", 11.9, 0.0, 0.0, "c"),
                atom("H", 12.6, 0.0, 0.0, "h"),
            ],
        };
        let tag = OriginTag { label: "m".into(), image: [0, 0, 0] };
        let cfg = CarveConfig::default();
        let cluster = carve_large(&cell, &tag, &cfg).unwrap();
        assert_eq!(cluster.atoms.len(), 3); // H at 12.6 kept: heavy atoms decide

        let strict = CarveConfig { linker_heavy_atom_rule: false, ..CarveConfig::default() };
        let cluster = carve_large(&cell, &tag, &strict).unwrap();
        // With the rule off the linker is partial and holds no cappable
        // group, so only the metal remains.
        assert_eq!(cluster.atoms.len(), 1);
    }

    #[test]
    fn boundary_carboxylate_becomes_formate_with_exact_cap() {
        let mut atoms = vec![atom("Zn", 0.0, 0.0, 0.0, "m")];
        atoms.extend(carboxylate_arm(Vector3::zeros(), "a"));
        // Chain continues past the radius so the linker is partial.
        atoms.push(atom("C", 5.9, -1.5, 0.0, "tail"));
        let cell = AtomCollection { atoms };
        let tag = OriginTag { label: "m".into(), image: [0, 0, 0] };
        let cfg = CarveConfig { radius: 5.0, ..CarveConfig::default() };
        let cluster = carve_large(&cell, &tag, &cfg).unwrap();
        cluster.validate().unwrap();

        let h = Element::from_symbol("H").unwrap();
        let c = Element::from_symbol("C").unwrap();
        let o = Element::from_symbol("O").unwrap();
        let caps: Vec<&ClusterAtom> =
            cluster.atoms.iter().filter(|a| a.has_role(Role::Cap)).collect();
        assert_eq!(caps.len(), 1);
        assert_eq!(caps[0].element, h);
        assert_eq!(cluster.atoms.iter().filter(|a| a.element == c).count(), 1);
        assert_eq!(cluster.atoms.iter().filter(|a| a.element == o).count(), 2);
        assert_eq!(count_kind(&cluster, GroupKind::Formate), 1);
        assert_eq!(cluster.net_charge, 2 - 1);

        // Cap lies on the severed C-C line at exactly the C-H length.
        let acid_c = Vector3::new(3.2, 0.0, 0.0);
        let anchor = Vector3::new(4.4, -0.9, 0.0);
        let expect = acid_c + CAP_CH_LENGTH * (anchor - acid_c).normalize();
        assert!((caps[0].position - expect).norm() < 1e-6);
        assert!(((caps[0].position - acid_c).norm() - CAP_CH_LENGTH).abs() < 1e-6);
    }

    #[test]
    fn large_cluster_radius_monotonicity() {
        let cell = small_fixture();
        let tag = OriginTag { label: "m1".into(), image: [0, 0, 0] };
        let mut previous: Option<BTreeSet<OriginTag>> = None;
        for radius in [3.0, 4.0, 5.0, 6.5, 9.0, 14.0] {
            let cfg = CarveConfig { radius, ..CarveConfig::default() };
            let cluster = carve_large(&cell, &tag, &cfg).unwrap();
            let tags: BTreeSet<OriginTag> = cluster
                .atoms
                .iter()
                .filter(|a| !a.has_role(Role::Cap))
                .map(|a| a.origin.clone())
                .collect();
            if let Some(prev) = &previous {
                assert!(prev.is_subset(&tags), "atom set shrank going to radius {radius}");
            }
            previous = Some(tags);
        }
    }

    #[test]
    fn small_cluster_selects_nearest_metals() {
        let cell = AtomCollection {
            atoms: vec![
                atom("Zn", 2.0, 0.0, 0.0, "m2"),
                atom("Zn", 0.0, 3.0, 0.0, "m3"),
                atom("Zn", 0.0, 0.0, 4.0, "m4"),
                atom("Zn", 9.0, 0.0, 0.0, "m9"),
            ],
        };
        let cluster = carve_small(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        let labels: BTreeSet<&str> =
            cluster.atoms.iter().map(|a| a.origin.label.as_str()).collect();
        assert_eq!(labels, BTreeSet::from(["m2", "m3", "m4"]));
    }

    #[test]
    fn small_cluster_builds_formate_and_hydroxylate_groups() {
        let cell = small_fixture();
        let cluster = carve_small(&cell, Vector3::new(0.0, 0.0, 8.0), &CarveConfig::default()).unwrap();
        cluster.validate().unwrap();
        assert_eq!(count_role(&cluster, Role::Metal), 3);
        assert_eq!(count_kind(&cluster, GroupKind::Formate), 6);
        assert_eq!(count_kind(&cluster, GroupKind::Hydroxylate), 3);
        assert_eq!(count_role(&cluster, Role::Cap), 9);
        // 3 metals + 6 x (C,O,O,H) + 3 x (O,H)
        assert_eq!(cluster.atoms.len(), 3 + 6 * 4 + 3 * 2);
        assert_eq!(cluster.net_charge, 3 * 2 - 6 - 3);
    }

    #[test]
    fn small_cluster_errors_when_metals_are_missing() {
        let cell = AtomCollection {
            atoms: vec![atom("Zn", 0.0, 0.0, 0.0, "m0"), atom("Zn", 3.0, 0.0, 0.0, "m1")],
        };
        let err = carve_small(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap_err();
        assert!(matches!(err, CarveError::TooFewMetals { available: 2, requested: 3 }));
    }

    #[test]
    fn small_cluster_serialization_is_deterministic() {
        let cell = small_fixture();
        let site = Vector3::new(0.0, 0.0, 8.0);
        let a = carve_small(&cell, site, &CarveConfig::default()).unwrap();
        // Same input with atoms listed in reverse order.
        let mut reversed = cell.clone();
        reversed.atoms.reverse();
        let b = carve_small(&reversed, site, &CarveConfig::default()).unwrap();
        assert_eq!(write_cluster(&a), write_cluster(&b));
    }

    #[test]
    fn cluster_roundtrips_byte_identically() {
        let cell = small_fixture();
        let cluster = carve_small(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        let (xyz, sidecar) = write_cluster(&cluster);
        let back = read_cluster(&xyz, &sidecar).unwrap();
        assert_eq!(write_cluster(&back), (xyz, sidecar));
        assert_eq!(back.net_charge, cluster.net_charge);
        assert_eq!(back.atoms.len(), cluster.atoms.len());
    }

    /// Medium-cluster fixture: five included metals, a ring linker
    /// anchored at the central metal with a second (dangling) carboxylate,
    /// plus a far-away metal that stays outside.
    fn medium_fixture() -> AtomCollection {
        let mut atoms = Vec::new();
        for k in 0..5 {
            atoms.push(atom("Zn", 0.0, 0.0, 8.0 * k as f64, &format!("m{k}")));
        }
        atoms.push(atom("Zn", 0.0, 0.0, 100.0, "mfar"));
        // Coordinated carboxylate at the central metal m0, anchored on the ring.
        atoms.push(atom("O", 2.0, 0.0, 0.0, "ro1"));
        atoms.push(atom("C", 3.2, 0.0, 0.0, "rc"));
        atoms.push(atom("O", 3.5, 1.17, 0.0, "ro2"));
        // Hexagonal carbon ring: v0 is the anchor.
        let rc = Vector3::new(5.8, -0.9, 0.0);
        for (i, deg) in [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0].iter().enumerate() {
            let ang = deg.to_radians();
            atoms.push(atom("C", rc.x + 1.4 * ang.cos(), rc.y + 1.4 * ang.sin(), 0.0, &format!("v{i}")));
        }
        // Ring hydrogen on v4.
        atoms.push(atom("H", 6.9, -3.0, 0.0, "rh"));
        // Dangling carboxylate on v3, coordinated to no included metal.
        atoms.push(atom("C", 8.7, -0.9, 0.0, "dc"));
        atoms.push(atom("O", 9.3, 0.15, 0.0, "do1"));
        atoms.push(atom("O", 9.3, -1.95, 0.0, "do2"));
        AtomCollection { atoms }
    }

    #[test]
    fn medium_cluster_has_five_metals() {
        let cell = medium_fixture();
        let cluster = carve_medium(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        assert_eq!(count_role(&cluster, Role::Metal), 5);
        let labels: BTreeSet<&str> = cluster
            .atoms
            .iter()
            .filter(|a| a.has_role(Role::Metal))
            .map(|a| a.origin.label.as_str())
            .collect();
        assert!(!labels.contains("mfar"));
    }

    #[test]
    fn medium_cluster_keeps_ring_and_caps_dangling_group() {
        let cell = medium_fixture();
        let cluster = carve_medium(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        cluster.validate().unwrap();
        let labels: BTreeSet<&str> =
            cluster.atoms.iter().map(|a| a.origin.label.as_str()).collect();
        // Ring and coordinated carboxylate kept.
        for keep in ["v0", "v1", "v2", "v3", "v4", "v5", "rc", "ro1", "ro2", "rh"] {
            assert!(labels.contains(keep), "{keep} missing");
        }
        // Dangling carboxylate removed; its anchor v3 gets the one cap H.
        for gone in ["do1", "do2"] {
            assert!(!labels.contains(gone), "{gone} should be removed");
        }
        let caps: Vec<&ClusterAtom> =
            cluster.atoms.iter().filter(|a| a.has_role(Role::Cap)).collect();
        assert_eq!(caps.len(), 1);
        // Cap carries the provenance of the removed acid carbon and sits
        // on the severed ring bond.
        assert_eq!(caps[0].origin.label, "dc");
        let v3 = Vector3::new(7.2, -0.9, 0.0);
        let dc = Vector3::new(8.7, -0.9, 0.0);
        let expect = v3 + CAP_CH_LENGTH * (dc - v3).normalize();
        assert!((caps[0].position - expect).norm() < 1e-6);
        // One kept coordinating group: linker charge -1.
        let linker = cluster.groups.iter().find(|g| g.kind == GroupKind::Linker).unwrap();
        assert_eq!(linker.charge, -1);
    }

    #[test]
    fn medium_cluster_tags_mobile_atoms() {
        let cell = medium_fixture();
        let cluster = carve_medium(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        for atom in &cluster.atoms {
            let is_central_metal = matches!(atom.origin.label.as_str(), "m0" | "m1" | "m2");
            let is_plain_h = atom.element == Element::from_symbol("H").unwrap() && !atom.has_role(Role::Cap);
            assert_eq!(
                atom.has_role(Role::Mobile),
                is_central_metal || is_plain_h,
                "wrong mobile tag on {}",
                atom.origin
            );
        }
    }

    #[test]
    fn chloride_completion_adds_listed_ligands() {
        let cell = medium_fixture();
        let cl_sites = vec![
            OriginTag { label: "m3".into(), image: [0, 0, 0] },
            OriginTag { label: "m4".into(), image: [0, 0, 0] },
        ];
        let cfg = CarveConfig { chloride_completion: cl_sites, ..CarveConfig::default() };
        let cluster = carve_medium(&cell, Vector3::zeros(), &cfg).unwrap();
        let cl = Element::from_symbol("Cl").unwrap();
        let chlorides: Vec<&ClusterAtom> =
            cluster.atoms.iter().filter(|a| a.element == cl).collect();
        assert_eq!(chlorides.len(), 2);
        assert!(chlorides.iter().all(|a| a.has_role(Role::Cap)));
        assert_eq!(count_kind(&cluster, GroupKind::Chloride), 2);

        let bad = CarveConfig {
            chloride_completion: vec![OriginTag { label: "mfar".into(), image: [0, 0, 0] }],
            ..CarveConfig::default()
        };
        let err = carve_medium(&cell, Vector3::zeros(), &bad).unwrap_err();
        assert!(matches!(err, CarveError::ChlorideSiteNotIncluded(_)));
    }

    /// Chain cluster for close-atom selection: M-O-C-C-C plus a far
    /// adsorbate-tagged atom.
    fn chain_cluster() -> Cluster {
        let groups = vec![ChargeGroup { kind: GroupKind::Metal, charge: 0 }];
        let specs = [
            ("Zn", 0.0, Some(Role::Metal)),
            ("O", 2.0, None),
            ("C", 3.2, None),
            ("C", 4.7, None),
            ("C", 6.2, None),
        ];
        let mut atoms: Vec<ClusterAtom> = specs
            .iter()
            .enumerate()
            .map(|(i, (sym, x, role))| ClusterAtom {
                element: Element::from_symbol(sym).unwrap(),
                position: Vector3::new(*x, 0.0, 0.0),
                roles: role.iter().copied().collect(),
                origin: OriginTag { label: format!("a{i}"), image: [0, 0, 0] },
                group: 0,
            })
            .collect();
        atoms.push(ClusterAtom {
            element: Element::from_symbol("O").unwrap(),
            position: Vector3::new(50.0, 0.0, 0.0),
            roles: BTreeSet::from([Role::Co2]),
            origin: OriginTag { label: "gas".into(), image: [0, 0, 0] },
            group: 0,
        });
        Cluster { atoms, groups, net_charge: 0, n_unpaired: 0 }
    }

    #[test]
    fn close_atoms_are_within_two_bonds_plus_adsorbate() {
        let cluster = chain_cluster();
        let close = select_close_atoms(&cluster, 0, 1.2).unwrap();
        // metal (distance 0), O (1), C (2) plus the co2-tagged atom; the
        // carbons at graph distance 3 and 4 are excluded.
        assert_eq!(close, BTreeSet::from([0, 1, 2, 5]));

        let err = select_close_atoms(&cluster, 99, 1.2).unwrap_err();
        assert!(matches!(err, CarveError::IndexOutOfRange { .. }));
    }

    #[test]
    fn close_atom_selection_is_order_invariant() {
        let cluster = chain_cluster();
        let close: BTreeSet<String> = select_close_atoms(&cluster, 0, 1.2)
            .unwrap()
            .into_iter()
            .map(|i| cluster.atoms[i].origin.to_string())
            .collect();
        let mut permuted = cluster.clone();
        permuted.atoms.reverse();
        let metal = permuted
            .atoms
            .iter()
            .position(|a| a.has_role(Role::Metal))
            .unwrap();
        let close2: BTreeSet<String> = select_close_atoms(&permuted, metal, 1.2)
            .unwrap()
            .into_iter()
            .map(|i| permuted.atoms[i].origin.to_string())
            .collect();
        assert_eq!(close, close2);
    }

    #[test]
    fn coordinate_propagation_copies_mobile_displacements() {
        let cell = medium_fixture();
        let medium = carve_medium(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();

        // Identity: unrelaxed medium propagates as a no-op.
        let same = propagate_coordinates(&medium, &medium).unwrap();
        assert_eq!(same, medium);

        // Displace a central metal and check the displacement lands.
        let mut relaxed = medium.clone();
        let idx = relaxed.atoms.iter().position(|a| a.origin.label == "m0").unwrap();
        relaxed.atoms[idx].position += Vector3::new(0.1, 0.0, 0.0);
        let target = propagate_coordinates(&relaxed, &medium).unwrap();
        let moved = target.atoms.iter().find(|a| a.origin.label == "m0").unwrap();
        assert!((moved.position - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-12);
        // Everything else untouched.
        for (a, b) in target.atoms.iter().zip(&medium.atoms) {
            if a.origin.label != "m0" {
                assert_eq!(a.position, b.position);
            }
        }

        // Mobile atom with unknown provenance is an error naming the tag.
        let mut rogue = medium.clone();
        rogue.atoms[idx].origin = OriginTag { label: "zz".into(), image: [0, 0, 0] };
        let err = propagate_coordinates(&rogue, &medium).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn carve_from_symmetry_expanded_cif_supercell() {
        let cif = "data_fixture\n\
            _cell_length_a 6.0\n\
            _cell_length_b 6.0\n\
            _cell_length_c 6.0\n\
            _cell_angle_alpha 90.0\n\
            _cell_angle_beta 90.0\n\
            _cell_angle_gamma 90.0\n\
            loop_\n\
            _atom_site_label\n\
            _atom_site_type_symbol\n\
            _atom_site_fract_x\n\
            _atom_site_fract_y\n\
            _atom_site_fract_z\n\
            Zn1 Zn 0.5 0.5 0.5\n\
            O1 O 0.5 0.5 0.75\n";
        let structure = parse_cif(cif).unwrap();
        let supercell = build_supercell(&structure, (3, 3, 3)).unwrap();
        let tag = OriginTag { label: "Zn1".into(), image: [1, 1, 1] };
        let cfg = CarveConfig { radius: 5.0, ..CarveConfig::default() };
        let cluster = carve_large(&supercell, &tag, &cfg).unwrap();
        // Within 5 angstrom of the central metal: the metal itself and the
        // oxygens at 1.5 (same cell) and 4.5 (cell below).
        assert_eq!(count_role(&cluster, Role::Metal), 1);
        assert_eq!(cluster.atoms.len(), 3);

        // A larger radius pokes out of the 3x3x3 supercell.
        let wide = CarveConfig { radius: 7.0, ..CarveConfig::default() };
        let err = carve_large(&supercell, &tag, &wide).unwrap_err();
        assert!(err.to_string().contains("repetitions"));
    }

    #[test]
    fn spin_parity_is_validated() {
        let cell = small_fixture();
        let mut cluster = carve_small(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        let electrons = cluster.n_electrons();
        assert_eq!(electrons % 2, cluster.n_unpaired as i64 % 2);
        // Same parity is accepted, opposite parity rejected.
        cluster.set_unpaired(cluster.n_unpaired + 2).unwrap();
        assert!(cluster.set_unpaired(cluster.n_unpaired + 1).is_err());
        cluster.validate().unwrap();
    }

    #[test]
    fn adsorbate_append_tags_co2() {
        let cell = small_fixture();
        let mut cluster = carve_small(&cell, Vector3::zeros(), &CarveConfig::default()).unwrap();
        let n0 = cluster.atoms.len();
        let o = Element::from_symbol("O").unwrap();
        let c = Element::from_symbol("C").unwrap();
        cluster.append_adsorbate(&[
            (o, Vector3::new(20.0, 0.0, 0.0)),
            (c, Vector3::new(21.16, 0.0, 0.0)),
            (o, Vector3::new(22.32, 0.0, 0.0)),
        ]);
        assert_eq!(cluster.atoms.len(), n0 + 3);
        assert_eq!(count_role(&cluster, Role::Co2), 3);
        assert_eq!(count_kind(&cluster, GroupKind::Adsorbate), 1);
        cluster.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = CarveConfig { radius: -1.0, ..CarveConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CarveConfig { n_small_metals: 6, n_medium_metals: 5, ..CarveConfig::default() };
        assert!(bad.validate().is_err());
    }
}
