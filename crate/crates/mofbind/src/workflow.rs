//! Energy composition and pipeline orchestration: the binding-energy
//! difference, the two-tier subtractive (ONIOM-style) composition, the
//! per-metal spin table, the external energy ledger with content-hash
//! caching, deviation statistics against the reference dataset, and the
//! end-to-end pipeline driven by a config file.
//!
//! Published large-scale binding energies for the M2(dobdc) series are
//! shipped as data and are *not* recomputed: the correlated triple-zeta
//! transition-metal calculations behind them are outside any desk-scale
//! budget. This module reproduces the composition arithmetic and the
//! deviation statistics over those published values, and accepts
//! externally computed energies through the ledger (the injection path).

use crate::carve::{
    carve_large, carve_small, select_close_atoms, CarveConfig, CarveError, Cluster,
};
use crate::correlation::{mp2, CorrelationError, OrbitalWindow};
use crate::crystal::{build_supercell, parse_cif, parse_xyz, CrystalError, OriginTag};
use crate::elements::Element;
use crate::integrals::{compute_integrals, IntegralError};
use crate::scf::{mo_transform, run_scf, ScfError, ScfOptions, SystemSpec};
use crate::HARTREE_TO_KCAL_MOL;
use nalgebra::Vector3;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("duplicate ledger row for key ({0})")]
    DuplicateRow(String),
    #[error("non-finite energy for ledger key ({0})")]
    NonFiniteEnergy(String),
    #[error("missing {tier}-cluster {level}-level energy for system {system}")]
    MissingRow { system: SystemTag, tier: Tier, level: String },
    #[error("method descriptions disagree across the three binding-energy terms: complex '{complex}', bare '{mof}', adsorbate '{co2}'")]
    MethodMismatch { complex: String, mof: String, co2: String },
    #[error("no spin entry for {0}")]
    NoSpinEntry(String),
    #[error("deviation statistics need at least one (energy, reference) pair")]
    EmptyMetrics,
    #[error("malformed ledger: {0}")]
    BadLedger(String),
    #[error("malformed reference data: {0}")]
    BadReferenceData(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("mean field did not converge for system {0}; aborting")]
    UnconvergedScf(SystemTag),
    #[error("cached energy for {key} was computed from different inputs (hash {expected} vs {found}); rerun without --strict to recompute")]
    HashMismatch { key: String, expected: String, found: String },
    #[error("unknown solver method '{0}' (supported: hf, mp2)")]
    UnknownMethod(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Carve(#[from] CarveError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Integral(#[from] IntegralError),
    #[error(transparent)]
    Scf(#[from] ScfError),
    #[error(transparent)]
    Correlation(#[from] CorrelationError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SystemTag {
    Mof,
    Co2,
    MofCo2,
}

impl std::fmt::Display for SystemTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemTag::Mof => "MOF",
            SystemTag::Co2 => "CO2",
            SystemTag::MofCo2 => "MOF+CO2",
        })
    }
}

impl SystemTag {
    pub fn parse(s: &str) -> Result<Self, WorkflowError> {
        match s {
            "MOF" => Ok(SystemTag::Mof),
            "CO2" => Ok(SystemTag::Co2),
            "MOF+CO2" => Ok(SystemTag::MofCo2),
            other => Err(WorkflowError::BadLedger(format!("unknown system tag '{other}'"))),
        }
    }

    pub const ALL: [SystemTag; 3] = [SystemTag::MofCo2, SystemTag::Mof, SystemTag::Co2];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tier {
    Large,
    Medium,
    Small,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tier::Large => "large",
            Tier::Medium => "medium",
            Tier::Small => "small",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    LL,
    HL,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::LL => "LL",
            Level::HL => "HL",
        })
    }
}

impl Level {
    fn description(&self) -> &'static str {
        match self {
            Level::LL => "low",
            Level::HL => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Internal,
    External,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Source::Internal => "internal",
            Source::External => "external",
        })
    }
}

/// One energy entry: the (system, tier, level, method, eta, basis) tuple
/// is the unique key; `id` is the content hash of the calculation inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub id: String,
    pub system: SystemTag,
    pub tier: Tier,
    pub level: Level,
    pub method: String,
    pub eta: Option<f64>,
    pub basis: String,
    pub energy: f64,
    pub source: Source,
}

fn format_eta(eta: Option<f64>) -> String {
    match eta {
        Some(e) => format!("{e:.3e}"),
        None => "-".to_string(),
    }
}

impl LedgerRow {
    pub fn key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.system,
            self.tier,
            self.level,
            self.method,
            format_eta(self.eta),
            self.basis
        )
    }
}

/// Plain-text energy ledger with a unique key per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnergyLedger {
    rows: Vec<LedgerRow>,
}

impl EnergyLedger {
    pub fn new() -> Self {
        EnergyLedger { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn add(&mut self, row: LedgerRow) -> Result<(), WorkflowError> {
        if !row.energy.is_finite() {
            return Err(WorkflowError::NonFiniteEnergy(row.key()));
        }
        if self.lookup_key(&row.key()).is_some() {
            return Err(WorkflowError::DuplicateRow(row.key()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Replace an existing row with the same key, or append.
    pub fn upsert(&mut self, row: LedgerRow) -> Result<(), WorkflowError> {
        if !row.energy.is_finite() {
            return Err(WorkflowError::NonFiniteEnergy(row.key()));
        }
        if let Some(i) = self.rows.iter().position(|r| r.key() == row.key()) {
            self.rows[i] = row;
        } else {
            self.rows.push(row);
        }
        Ok(())
    }

    fn lookup_key(&self, key: &str) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.key() == key)
    }

    pub fn find(
        &self,
        system: SystemTag,
        tier: Tier,
        level: Level,
        method: &str,
        eta: Option<f64>,
        basis: &str,
    ) -> Option<&LedgerRow> {
        let key = format!(
            "{system}|{tier}|{level}|{method}|{}|{basis}",
            format_eta(eta)
        );
        self.lookup_key(&key)
    }

    /// Serialize with canonical ordering and formatting; `parse` followed
    /// by `to_text` is byte-identical.
    pub fn to_text(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| r.key());
        let mut out = String::from("# id\tsystem\ttier\tlevel\tmethod\teta\tbasis\tenergy_hartree\tsource\n");
        for r in rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.12e}\t{}",
                r.id,
                r.system,
                r.tier,
                r.level,
                r.method,
                format_eta(r.eta),
                r.basis,
                r.energy,
                r.source
            )
            .unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, WorkflowError> {
        let mut ledger = EnergyLedger::new();
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 9 {
                return Err(WorkflowError::BadLedger(format!(
                    "expected 9 tab-separated fields, got {}: '{line}'",
                    fields.len()
                )));
            }
            let eta = match fields[5] {
                "-" => None,
                v => Some(v.parse::<f64>().map_err(|_| {
                    WorkflowError::BadLedger(format!("bad eta '{v}'"))
                })?),
            };
            let tier = match fields[2] {
                "large" => Tier::Large,
                "medium" => Tier::Medium,
                "small" => Tier::Small,
                other => {
                    return Err(WorkflowError::BadLedger(format!("unknown tier '{other}'")))
                }
            };
            let level = match fields[3] {
                "LL" => Level::LL,
                "HL" => Level::HL,
                other => {
                    return Err(WorkflowError::BadLedger(format!("unknown level '{other}'")))
                }
            };
            let source = match fields[8] {
                "internal" => Source::Internal,
                "external" => Source::External,
                other => {
                    return Err(WorkflowError::BadLedger(format!("unknown source '{other}'")))
                }
            };
            ledger.add(LedgerRow {
                id: fields[0].to_string(),
                system: SystemTag::parse(fields[1])?,
                tier,
                level,
                method: fields[4].to_string(),
                eta,
                basis: fields[6].to_string(),
                energy: fields[7]
                    .parse()
                    .map_err(|_| WorkflowError::BadLedger(format!("bad energy '{}'", fields[7])))?,
                source,
            })?;
        }
        Ok(ledger)
    }
}

// ---------------------------------------------------------------------------
// Composition arithmetic
// ---------------------------------------------------------------------------

/// Two-tier subtractive composition: the high-level energy of the large
/// system is estimated as E_HL_small + (E_LL_large - E_LL_small).
pub fn oniom_compose(e_hl_small: f64, e_ll_large: f64, e_ll_small: f64) -> f64 {
    e_hl_small + (e_ll_large - e_ll_small)
}

/// Method identity used for ledger lookups and composition tagging.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub method: String,
    pub eta: Option<f64>,
    pub basis: String,
}

impl MethodSpec {
    pub fn describe(&self) -> String {
        match self.eta {
            Some(e) => format!("{}(eta={e:.0e})/{}", self.method, self.basis),
            None => format!("{}/{}", self.method, self.basis),
        }
    }
}

/// An energy with the method description it was composed at.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedEnergy {
    pub energy: f64,
    pub method: String,
}

/// Look up the three terms of the subtractive composition in the ledger
/// and combine them for one system.
pub fn oniom_from_ledger(
    ledger: &EnergyLedger,
    system: SystemTag,
    high: &MethodSpec,
    low: &MethodSpec,
) -> Result<ComposedEnergy, WorkflowError> {
    let need = |tier: Tier, level: Level, spec: &MethodSpec| -> Result<f64, WorkflowError> {
        ledger
            .find(system, tier, level, &spec.method, spec.eta, &spec.basis)
            .map(|r| r.energy)
            .ok_or(WorkflowError::MissingRow {
                system,
                tier,
                level: level.description().to_string(),
            })
    };
    let e_hl_small = need(Tier::Small, Level::HL, high)?;
    let e_ll_large = need(Tier::Large, Level::LL, low)?;
    let e_ll_small = need(Tier::Small, Level::LL, low)?;
    Ok(ComposedEnergy {
        energy: oniom_compose(e_hl_small, e_ll_large, e_ll_small),
        method: format!("{}//{}", high.describe(), low.describe()),
    })
}

/// Binding energy in kcal/mol: (E_complex - E_mof - E_co2) converted
/// from hartree. Negative means bound. All three terms must carry the
/// same method description.
pub fn binding_energy(
    complex: &ComposedEnergy,
    mof: &ComposedEnergy,
    co2: &ComposedEnergy,
) -> Result<f64, WorkflowError> {
    if complex.method != mof.method || complex.method != co2.method {
        return Err(WorkflowError::MethodMismatch {
            complex: complex.method.clone(),
            mof: mof.method.clone(),
            co2: co2.method.clone(),
        });
    }
    Ok((complex.energy - mof.energy - co2.energy) * HARTREE_TO_KCAL_MOL)
}

// ---------------------------------------------------------------------------
// Spins
// ---------------------------------------------------------------------------

/// Built-in per-metal unpaired-electron counts (all metal centers coupled
/// in parallel, so totals scale linearly with the metal count).
const SPIN_TABLE: &[(&str, u32)] = &[
    ("Co", 3),
    ("Fe", 4),
    ("Ni", 2),
    ("Cu", 1),
    ("Zn", 0),
    ("Mg", 0),
];

/// Total unpaired electrons for `n_metals` centers of the given element;
/// config overrides extend or replace the built-in table.
pub fn spin_assignment(
    element: &str,
    n_metals: u32,
    overrides: &BTreeMap<String, u32>,
) -> Result<u32, WorkflowError> {
    let per_metal = overrides
        .get(element)
        .copied()
        .or_else(|| SPIN_TABLE.iter().find(|(s, _)| *s == element).map(|(_, v)| *v))
        .ok_or_else(|| WorkflowError::NoSpinEntry(element.to_string()))?;
    Ok(per_metal * n_metals)
}

// ---------------------------------------------------------------------------
// Deviation statistics
// ---------------------------------------------------------------------------

/// Mean absolute deviation between computed binding energies and
/// reference heats of adsorption, by magnitude: mean of | |dE| - Q |.
///
/// The magnitude convention is deliberate: computed binding energies are
/// negative while calorimetric heats are positive, and the published
/// column means are reproducible only under this convention.
pub fn error_metrics(pairs: &[(f64, f64)]) -> Result<f64, WorkflowError> {
    if pairs.is_empty() {
        return Err(WorkflowError::EmptyMetrics);
    }
    let total: f64 = pairs.iter().map(|(de, q)| (de.abs() - q).abs()).sum();
    Ok(total / pairs.len() as f64)
}

/// Reference data for one framework.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRecord {
    pub framework: String,
    pub structure_id: String,
    /// CO2 uptake in mmol/g (metadata only).
    pub uptake: f64,
    /// Isosteric heat of adsorption in kcal/mol.
    pub qst: f64,
    pub unpaired_per_metal: u32,
}

impl ReferenceRecord {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if !(self.qst > 0.0) {
            return Err(WorkflowError::BadReferenceData(format!(
                "{}: Qst must be positive, got {}",
                self.framework, self.qst
            )));
        }
        if !(self.uptake >= 0.0) {
            return Err(WorkflowError::BadReferenceData(format!(
                "{}: uptake must be nonnegative, got {}",
                self.framework, self.uptake
            )));
        }
        Ok(())
    }
}

/// The embedded reference dataset.
pub fn reference_dataset() -> Vec<ReferenceRecord> {
    let text = include_str!("../data/reference_mofs.dat");
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 5, "bad reference row: {line}");
        let record = ReferenceRecord {
            framework: f[0].to_string(),
            structure_id: f[1].to_string(),
            uptake: f[2].parse().expect("bad uptake"),
            qst: f[3].parse().expect("bad qst"),
            unpaired_per_metal: f[4].parse().expect("bad spin"),
        };
        record.validate().expect("invalid embedded reference record");
        out.push(record);
    }
    out
}

/// One method column of the published binding-energy table.
#[derive(Debug, Clone)]
pub struct PublishedColumn {
    pub method: String,
    pub entries: Vec<(String, f64)>,
    pub printed_mean: f64,
}

/// The published per-framework binding energies with their printed means.
pub fn published_binding_energies() -> Vec<PublishedColumn> {
    let text = include_str!("../data/published_binding_energies.dat");
    let methods = ["UHF", "CC-eta-1e-2", "CC-eta-1e-5", "BLYP", "PBE", "M06L"];
    let mut columns: Vec<PublishedColumn> = methods
        .iter()
        .map(|m| PublishedColumn {
            method: m.to_string(),
            entries: Vec::new(),
            printed_mean: f64::NAN,
        })
        .collect();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 7, "bad published row: {line}");
        if f[0] == "printed_mean" {
            for (k, col) in columns.iter_mut().enumerate() {
                col.printed_mean = f[k + 1].parse().expect("bad printed mean");
            }
        } else {
            for (k, col) in columns.iter_mut().enumerate() {
                col.entries
                    .push((f[0].to_string(), f[k + 1].parse().expect("bad energy")));
            }
        }
    }
    columns
}

/// Recomputed-vs-printed mean deviation for one published method column.
#[derive(Debug, Clone)]
pub struct MethodDeviation {
    pub method: String,
    pub computed_mean: f64,
    pub printed_mean: f64,
    /// Whether the printed mean is reproducible from the printed entries
    /// (within print rounding).
    pub consistent: bool,
}

/// Tolerance for accepting a printed column mean as reproduced.
pub const PRINTED_MEAN_TOLERANCE: f64 = 0.03;

/// Verify every published column mean against its per-framework entries.
pub fn deviation_summary() -> Vec<MethodDeviation> {
    let refs = reference_dataset();
    let qst: BTreeMap<&str, f64> = refs.iter().map(|r| (r.framework.as_str(), r.qst)).collect();
    published_binding_energies()
        .into_iter()
        .map(|col| {
            let pairs: Vec<(f64, f64)> = col
                .entries
                .iter()
                .map(|(name, de)| (*de, qst[name.as_str()]))
                .collect();
            let computed_mean = error_metrics(&pairs).expect("published table is nonempty");
            MethodDeviation {
                consistent: (computed_mean - col.printed_mean).abs() <= PRINTED_MEAN_TOLERANCE,
                method: col.method,
                computed_mean,
                printed_mean: col.printed_mean,
            }
        })
        .collect()
}

/// Aligned text table of the published-mean verification, including the
/// explicit statement about what is and is not recomputed.
pub fn render_deviation_summary(summary: &[MethodDeviation]) -> String {
    let mut out = String::new();
    writeln!(out, "Published binding-energy column means vs recomputation").unwrap();
    writeln!(out, "(mean over frameworks of | |dE| - Qst |, kcal/mol)").unwrap();
    writeln!(out).unwrap();
    writeln!(out, "{:<14} {:>10} {:>10}  {}", "method", "recomputed", "printed", "status").unwrap();
    for d in summary {
        writeln!(
            out,
            "{:<14} {:>10.4} {:>10.4}  {}",
            d.method,
            d.computed_mean,
            d.printed_mean,
            if d.consistent { "ok" } else { "DISCREPANT: printed mean does not match printed entries" }
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(
        out,
        "Note: the underlying correlated and density-functional energies are\n\
         published values carried as data; they are not recomputed here. Only\n\
         the composition arithmetic and these statistics are reproduced."
    )
    .unwrap();
    out
}

// ---------------------------------------------------------------------------
// Binding report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub framework: String,
    pub method: String,
    /// Binding energy in kcal/mol.
    pub delta_e: f64,
    /// Reference heat of adsorption, when known.
    pub qst: Option<f64>,
    /// | |dE| - Qst | when a reference exists.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BindingReport {
    pub rows: Vec<ReportRow>,
    pub mean_abs_deviation: Option<f64>,
}

impl BindingReport {
    pub fn new(mut rows: Vec<ReportRow>) -> Self {
        rows.sort_by(|a, b| (&a.framework, &a.method).cmp(&(&b.framework, &b.method)));
        let pairs: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| r.qst.map(|q| (r.delta_e, q)))
            .collect();
        let mean_abs_deviation = error_metrics(&pairs).ok();
        BindingReport { rows, mean_abs_deviation }
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<14} {:<34} {:>12} {:>8} {:>10}",
            "framework", "method", "dE_kcal/mol", "Qst", "deviation"
        )
        .unwrap();
        for r in &self.rows {
            let qst = r.qst.map_or("-".to_string(), |q| format!("{q:.2}"));
            let dev = r.deviation.map_or("-".to_string(), |d| format!("{d:.4}"));
            writeln!(
                out,
                "{:<14} {:<34} {:>12.4} {:>8} {:>10}",
                r.framework, r.method, r.delta_e, qst, dev
            )
            .unwrap();
        }
        if let Some(m) = self.mean_abs_deviation {
            writeln!(out, "{:<49} {:>12} {:>8} {:>10.4}", "mean | |dE| - Qst |", "", "", m).unwrap();
        }
        out
    }

    /// Machine-readable rows, tab-delimited.
    pub fn render_delimited(&self) -> String {
        let mut out = String::from("framework\tmethod\tdelta_e_kcal_mol\tqst_kcal_mol\tdeviation\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{}",
                r.framework,
                r.method,
                r.delta_e,
                r.qst.map_or("-".to_string(), |q| format!("{q:.6}")),
                r.deviation.map_or("-".to_string(), |d| format!("{d:.6}")),
            )
            .unwrap();
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub structure: StructureConfig,
    #[serde(default)]
    pub carve: Option<CarveSection>,
    pub basis: BasisConfig,
    pub solvers: SolverConfig,
    #[serde(default)]
    pub spins: BTreeMap<String, u32>,
    pub ledger: LedgerConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureConfig {
    /// Framework model: a CIF (carved per `[carve]`) or an XYZ used as-is.
    pub mof: String,
    /// Adsorbate pose (XYZ, angstrom), placed relative to the framework.
    pub co2: String,
    /// Name linking the run to the reference dataset (optional).
    #[serde(default)]
    pub framework_name: Option<String>,
    /// Supercell repetitions for CIF input.
    #[serde(default)]
    pub reps: Option<[i32; 3]>,
    /// Origin tag of the large-cluster center metal (CIF input).
    #[serde(default)]
    pub center: Option<String>,
    #[serde(default)]
    pub net_charge: i32,
    /// Metal element whose spin table entry sets the unpaired count.
    #[serde(default)]
    pub spin_metal: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarveSection {
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_small_metals")]
    pub n_small_metals: usize,
    #[serde(default = "default_medium_metals")]
    pub n_medium_metals: usize,
    #[serde(default = "default_bond_scale")]
    pub bond_scale: f64,
    #[serde(default)]
    pub chloride_completion: Vec<String>,
    #[serde(default = "default_true")]
    pub linker_heavy_atom_rule: bool,
}

fn default_radius() -> f64 {
    12.5
}
fn default_small_metals() -> usize {
    3
}
fn default_medium_metals() -> usize {
    5
}
fn default_bond_scale() -> f64 {
    1.2
}
fn default_true() -> bool {
    true
}

impl CarveSection {
    pub fn to_config(&self) -> Result<CarveConfig, WorkflowError> {
        let chloride_completion = self
            .chloride_completion
            .iter()
            .map(|s| {
                OriginTag::parse(s)
                    .ok_or_else(|| WorkflowError::BadConfig(format!("bad origin tag '{s}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CarveConfig {
            radius: self.radius,
            n_small_metals: self.n_small_metals,
            n_medium_metals: self.n_medium_metals,
            bond_scale: self.bond_scale,
            chloride_completion,
            linker_heavy_atom_rule: self.linker_heavy_atom_rule,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub low: String,
    pub high: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// "internal": run the built-in solvers. "external": all energies
    /// must be pre-loaded into the ledger (the injection path).
    pub mode: String,
    pub low_method: String,
    pub high_method: String,
    /// Compose the two-tier subtractive estimate; otherwise a single
    /// small-tier calculation per system.
    #[serde(default)]
    pub oniom: bool,
    #[serde(default)]
    pub eta_low: Option<f64>,
    #[serde(default)]
    pub eta_high: Option<f64>,
    /// Cap on SCF iterations (mainly for testing the abort path).
    #[serde(default)]
    pub scf_max_iterations: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerConfig {
    pub path: String,
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, WorkflowError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| WorkflowError::BadConfig(e.to_string()))
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub cache_dir: PathBuf,
    pub strict: bool,
    pub dry_run: bool,
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanAction {
    CacheHit,
    Compute,
    External,
}

impl std::fmt::Display for PlanAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PlanAction::CacheHit => "cache-hit",
            PlanAction::Compute => "compute",
            PlanAction::External => "external",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub system: SystemTag,
    pub tier: Tier,
    pub level: Level,
    pub method: MethodSpec,
    pub hash: String,
    pub action: PlanAction,
}

#[derive(Debug)]
pub struct PipelineOutcome {
    pub plan: Vec<PlanEntry>,
    pub ledger: EnergyLedger,
    pub report: Option<BindingReport>,
}

impl PipelineOutcome {
    pub fn render_plan(&self) -> String {
        let mut out = String::from("calculation plan:\n");
        for e in &self.plan {
            writeln!(
                out,
                "  {:<8} {:<6} {:<2} {:<28} {}  {}",
                e.system.to_string(),
                e.tier.to_string(),
                e.level.to_string(),
                e.method.describe(),
                &e.hash[..12],
                e.action
            )
            .unwrap();
        }
        out
    }
}

/// Geometry in angstrom with charge and spin.
#[derive(Debug, Clone)]
struct SystemGeometry {
    geometry: Vec<(Element, Vector3<f64>)>,
    net_charge: i32,
    n_unpaired: u32,
}

/// Content hash of the inputs of one energy calculation.
fn input_hash(geom: &SystemGeometry, spec: &MethodSpec) -> String {
    let mut hasher = Sha256::new();
    for (el, p) in &geom.geometry {
        hasher.update(format!("{} {:.12} {:.12} {:.12}\n", el.symbol(), p.x, p.y, p.z));
    }
    hasher.update(format!(
        "basis={} method={} eta={} charge={} spin={}\n",
        spec.basis,
        spec.method,
        format_eta(spec.eta),
        geom.net_charge,
        geom.n_unpaired
    ));
    format!("{:x}", hasher.finalize())
}

/// Run one internal energy calculation.
fn compute_energy(
    geom: &SystemGeometry,
    spec: &MethodSpec,
    system: SystemTag,
    scf_max_iterations: Option<usize>,
) -> Result<f64, WorkflowError> {
    let spec_sys = SystemSpec::new(
        geom.geometry.clone(),
        &spec.basis,
        geom.net_charge,
        geom.n_unpaired,
    )?;
    let basis = crate::basis::BasisSet::builtin(&spec.basis, &spec_sys.elements())
        .map_err(|e| WorkflowError::BadConfig(e.to_string()))?;
    let integrals = compute_integrals(&spec_sys.geometry, &basis, crate::integrals::DEFAULT_ERI_CAP)?;
    let mut opts = ScfOptions::default();
    if let Some(n) = scf_max_iterations {
        opts.max_iterations = n;
    }
    let mf = run_scf(&spec_sys, &integrals, &opts)?;
    if !mf.converged {
        return Err(WorkflowError::UnconvergedScf(system));
    }
    match spec.method.as_str() {
        "hf" => Ok(mf.energy),
        "mp2" => {
            let mo = mo_transform(&integrals, &mf)?;
            let window = OrbitalWindow::full(&mo);
            let corr = mp2(&mo, &window)?;
            Ok(mf.energy + corr.correlation_energy)
        }
        other => Err(WorkflowError::UnknownMethod(other.to_string())),
    }
}

fn load_geometry_file(path: &Path) -> Result<Vec<(Element, Vector3<f64>)>, WorkflowError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let collection = parse_xyz(&text)?;
    Ok(collection.atoms.into_iter().map(|a| (a.element, a.position)).collect())
}

/// Build the framework cluster geometry from the configured structure.
fn build_mof_geometry(
    cfg: &PipelineConfig,
    base: &Path,
    co2_centroid: Vector3<f64>,
    tier: Tier,
) -> Result<SystemGeometry, WorkflowError> {
    let path = base.join(&cfg.structure.mof);
    let is_cif = cfg.structure.mof.to_lowercase().ends_with(".cif");
    let n_unpaired_for = |cluster: Option<&Cluster>, geometry: &[(Element, Vector3<f64>)]| {
        if let Some(metal) = &cfg.structure.spin_metal {
            let n_metals = geometry
                .iter()
                .filter(|(el, _)| el.symbol() == metal)
                .count() as u32;
            spin_assignment(metal, n_metals, &cfg.spins)
        } else if let Some(c) = cluster {
            Ok(c.n_unpaired)
        } else {
            let z: i64 = geometry.iter().map(|(el, _)| el.charge() as i64).sum();
            Ok(((z - cfg.structure.net_charge as i64) % 2) as u32)
        }
    };

    if let Some(section) = &cfg.carve {
        let carve_cfg = section.to_config()?;
        let supercell = if is_cif {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            let structure = parse_cif(&text)?;
            let reps = cfg.structure.reps.unwrap_or([1, 1, 1]);
            build_supercell(&structure, (reps[0], reps[1], reps[2]))?
        } else {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            parse_xyz(&text)?
        };
        let cluster = match tier {
            Tier::Large => {
                let center = cfg.structure.center.as_deref().ok_or_else(|| {
                    WorkflowError::BadConfig(
                        "large-tier carving requires structure.center".to_string(),
                    )
                })?;
                let tag = OriginTag::parse(center).ok_or_else(|| {
                    WorkflowError::BadConfig(format!("bad origin tag '{center}'"))
                })?;
                carve_large(&supercell, &tag, &carve_cfg)?
            }
            _ => carve_small(&supercell, co2_centroid, &carve_cfg)?,
        };
        let geometry = cluster.geometry();
        let n_unpaired = n_unpaired_for(Some(&cluster), &geometry)?;
        Ok(SystemGeometry { geometry, net_charge: cluster.net_charge, n_unpaired })
    } else {
        // No carving: the structure file is the finite framework model
        // for every tier.
        let geometry = load_geometry_file(&path)?;
        let n_unpaired = n_unpaired_for(None, &geometry)?;
        Ok(SystemGeometry { geometry, net_charge: cfg.structure.net_charge, n_unpaired })
    }
}

/// Execute (or plan) the full composition pipeline.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    base: &Path,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome, WorkflowError> {
    let internal = match cfg.solvers.mode.as_str() {
        "internal" => true,
        "external" => false,
        other => {
            return Err(WorkflowError::BadConfig(format!(
                "solvers.mode must be 'internal' or 'external', got '{other}'"
            )))
        }
    };
    let high = MethodSpec {
        method: cfg.solvers.high_method.clone(),
        eta: cfg.solvers.eta_high,
        basis: cfg.basis.high.clone(),
    };
    let low = MethodSpec {
        method: cfg.solvers.low_method.clone(),
        eta: cfg.solvers.eta_low,
        basis: cfg.basis.low.clone(),
    };

    // Adsorbate geometry and the binding-site reference point.
    let co2_path = base.join(&cfg.structure.co2);
    let co2_geometry = load_geometry_file(&co2_path)?;
    let co2_centroid = co2_geometry
        .iter()
        .fold(Vector3::zeros(), |acc, (_, p)| acc + p)
        / co2_geometry.len() as f64;

    // Ledger: load if present.
    let ledger_path = base.join(&cfg.ledger.path);
    let mut ledger = if ledger_path.exists() {
        let text = std::fs::read_to_string(&ledger_path).map_err(io_err(&ledger_path))?;
        EnergyLedger::parse(&text)?
    } else {
        EnergyLedger::new()
    };

    // Required calculations per system.
    let tiers: Vec<(Tier, Level, &MethodSpec)> = if cfg.solvers.oniom {
        vec![
            (Tier::Small, Level::HL, &high),
            (Tier::Large, Level::LL, &low),
            (Tier::Small, Level::LL, &low),
        ]
    } else {
        vec![(Tier::Small, Level::HL, &high)]
    };

    // System geometries per tier (the CO2 system is tier independent).
    let mut geometries: BTreeMap<(SystemTag, Tier), SystemGeometry> = BTreeMap::new();
    for &(tier, _, _) in &tiers {
        if geometries.contains_key(&(SystemTag::Mof, tier)) {
            continue;
        }
        let mof = build_mof_geometry(cfg, base, co2_centroid, tier)?;
        let mut complex = mof.clone();
        complex.geometry.extend(co2_geometry.iter().cloned());
        geometries.insert((SystemTag::Co2, tier), SystemGeometry {
            geometry: co2_geometry.clone(),
            net_charge: 0,
            n_unpaired: 0,
        });
        geometries.insert((SystemTag::MofCo2, tier), complex);
        geometries.insert((SystemTag::Mof, tier), mof);
    }

    // Plan.
    let mut plan = Vec::new();
    let mut pending: Vec<(usize, SystemTag, Tier, Level, MethodSpec, String)> = Vec::new();
    for &system in &SystemTag::ALL {
        for &(tier, level, spec) in &tiers {
            let geom = &geometries[&(system, tier)];
            let hash = input_hash(geom, spec);
            let existing = ledger.find(system, tier, level, &spec.method, spec.eta, &spec.basis);
            let action = match existing {
                Some(row) if row.source == Source::External => PlanAction::External,
                Some(row) if row.id == hash => PlanAction::CacheHit,
                Some(row) => {
                    if opts.strict {
                        return Err(WorkflowError::HashMismatch {
                            key: row.key(),
                            expected: hash,
                            found: row.id.clone(),
                        });
                    }
                    PlanAction::Compute
                }
                None if opts.cache_dir.join(&hash).exists() => PlanAction::CacheHit,
                None => {
                    if !internal {
                        return Err(WorkflowError::MissingRow {
                            system,
                            tier,
                            level: level.description().to_string(),
                        });
                    }
                    PlanAction::Compute
                }
            };
            if action == PlanAction::Compute {
                pending.push((plan.len(), system, tier, level, spec.clone(), hash.clone()));
            } else if action == PlanAction::CacheHit && existing.is_none() {
                // Cache file exists but the ledger lacks the row: restore it.
                let file = opts.cache_dir.join(&hash);
                let text = std::fs::read_to_string(&file).map_err(io_err(&file))?;
                let energy: f64 = text.trim().parse().map_err(|_| {
                    WorkflowError::BadLedger(format!("bad cached energy in {}", file.display()))
                })?;
                ledger.add(LedgerRow {
                    id: hash.clone(),
                    system,
                    tier,
                    level,
                    method: spec.method.clone(),
                    eta: spec.eta,
                    basis: spec.basis.clone(),
                    energy,
                    source: Source::Internal,
                })?;
            }
            plan.push(PlanEntry { system, tier, level, method: spec.clone(), hash, action });
        }
    }

    if opts.dry_run {
        return Ok(PipelineOutcome { plan, ledger, report: None });
    }

    // Execute pending calculations, optionally in parallel.
    let scf_cap = cfg.solvers.scf_max_iterations;
    let results: Mutex<Vec<(usize, Result<f64, WorkflowError>)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let workers = opts.jobs.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= pending.len() {
                    break;
                }
                let (plan_idx, system, tier, _, spec, _) = &pending[k];
                let geom = &geometries[&(*system, *tier)];
                let result = compute_energy(geom, spec, *system, scf_cap);
                results.lock().unwrap().push((*plan_idx, result));
            });
        }
    });
    let mut results = results.into_inner().unwrap();
    results.sort_by_key(|(i, _)| *i);
    for (plan_idx, result) in results {
        let energy = result?;
        let entry = &plan[plan_idx];
        std::fs::create_dir_all(&opts.cache_dir).map_err(io_err(&opts.cache_dir))?;
        let cache_file = opts.cache_dir.join(&entry.hash);
        std::fs::write(&cache_file, format!("{energy:.12e}\n")).map_err(io_err(&cache_file))?;
        ledger.upsert(LedgerRow {
            id: entry.hash.clone(),
            system: entry.system,
            tier: entry.tier,
            level: entry.level,
            method: entry.method.method.clone(),
            eta: entry.method.eta,
            basis: entry.method.basis.clone(),
            energy,
            source: Source::Internal,
        })?;
    }

    // Persist the ledger.
    std::fs::write(&ledger_path, ledger.to_text()).map_err(io_err(&ledger_path))?;

    // Compose the report.
    let composed = |system: SystemTag| -> Result<ComposedEnergy, WorkflowError> {
        if cfg.solvers.oniom {
            oniom_from_ledger(&ledger, system, &high, &low)
        } else {
            let row = ledger
                .find(system, Tier::Small, Level::HL, &high.method, high.eta, &high.basis)
                .ok_or(WorkflowError::MissingRow {
                    system,
                    tier: Tier::Small,
                    level: Level::HL.description().to_string(),
                })?;
            Ok(ComposedEnergy { energy: row.energy, method: high.describe() })
        }
    };
    let e_complex = composed(SystemTag::MofCo2)?;
    let e_mof = composed(SystemTag::Mof)?;
    let e_co2 = composed(SystemTag::Co2)?;
    let delta_e = binding_energy(&e_complex, &e_mof, &e_co2)?;

    let framework = cfg
        .structure
        .framework_name
        .clone()
        .unwrap_or_else(|| "unnamed".to_string());
    let qst = reference_dataset()
        .into_iter()
        .find(|r| r.framework == framework)
        .map(|r| r.qst);
    let deviation = qst.map(|q| (delta_e.abs() - q).abs());
    let report = BindingReport::new(vec![ReportRow {
        framework,
        method: e_complex.method.clone(),
        delta_e,
        qst,
        deviation,
    }]);
    Ok(PipelineOutcome { plan, ledger, report: Some(report) })
}

/// Close-atom helper for the CLI: indices within two bonds of the
/// binding metal plus adsorbate-tagged atoms.
pub fn close_set_for_cluster(
    cluster: &Cluster,
    binding_metal: usize,
    bond_scale: f64,
) -> Result<Vec<usize>, WorkflowError> {
    Ok(select_close_atoms(cluster, binding_metal, bond_scale)?
        .into_iter()
        .collect())
}
