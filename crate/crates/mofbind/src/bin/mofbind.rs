//! Command-line front end: cluster carving, mean-field and correlated
//! single points, embedded fragment calculations, energy composition,
//! deviation reports, and the end-to-end pipeline.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mofbind::basis::BasisSet;
use mofbind::carve::{carve_large, carve_medium, carve_small, write_cluster};
use mofbind::correlation::{mp2, OrbitalWindow};
use mofbind::crystal::{build_supercell, parse_cif, parse_xyz, OriginTag};
use mofbind::embedding::{
    atomic_partition, build_iaos, make_fragments, multilevel_energy, EmbeddingProblem,
    FragmentSolver, MultiLevelSpec,
};
use mofbind::integrals::{compute_integrals, DEFAULT_ERI_CAP};
use mofbind::scf::{mo_transform, run_scf, ScfOptions, SystemSpec};
use mofbind::workflow::{
    binding_energy, deviation_summary, load_config, oniom_from_ledger, render_deviation_summary,
    run_pipeline, EnergyLedger, MethodSpec, PipelineOptions, SystemTag,
};
use nalgebra::Vector3;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mofbind",
    about = "CO2 binding energies in metal-organic frameworks from carved clusters, \
             embedded-fragment correlation, and multilevel energy composition",
    version
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for cached calculation results.
    #[arg(long, global = true, default_value = ".mofbind-cache")]
    cache_dir: PathBuf,
    /// Treat cached results whose input hash no longer matches as errors
    /// instead of recomputing.
    #[arg(long, global = true)]
    strict: bool,
    /// Print the calculation plan without running anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Number of worker threads for independent calculations.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Carve a finite cluster from a crystal structure.
    Carve(CarveArgs),
    /// Run a self-consistent mean-field calculation on an XYZ geometry.
    Scf(PointArgs),
    /// Run second-order perturbation theory on top of the mean field.
    Mp2(PointArgs),
    /// Run an embedded-fragment correlation calculation.
    Embed(EmbedArgs),
    /// Compose a binding energy from ledger entries.
    Compose(ComposeArgs),
    /// Verify the published column means against the reference dataset.
    Report,
    /// Run the full carve/solve/compose pipeline from a config file.
    Pipeline,
}

#[derive(Args)]
struct CarveArgs {
    /// Crystal structure (CIF) or finite collection (XYZ).
    #[arg(long)]
    structure: PathBuf,
    /// Supercell repetitions for CIF input, e.g. 3x3x3.
    #[arg(long, default_value = "1x1x1")]
    reps: String,
    /// Cluster tier to produce.
    #[arg(long, value_parser = ["large", "medium", "small"])]
    tier: String,
    /// Center metal origin tag for the large tier, e.g. 'Zn1[1,1,1]'.
    #[arg(long)]
    center: Option<String>,
    /// Binding-site coordinates x,y,z in angstrom for small/medium tiers.
    #[arg(long)]
    site: Option<String>,
    /// Large-cluster radius in angstrom.
    #[arg(long, default_value_t = 12.5)]
    radius: f64,
    /// Bond-detection scale on the sum of covalent radii.
    #[arg(long, default_value_t = 1.2)]
    bond_scale: f64,
    /// Output prefix; writes <prefix>.xyz and <prefix>.tags.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PointArgs {
    /// Geometry file (XYZ, angstrom).
    #[arg(long)]
    geometry: PathBuf,
    /// Basis set name.
    #[arg(long, default_value = "sto-3g")]
    basis: String,
    /// Net charge.
    #[arg(long, default_value_t = 0)]
    charge: i32,
    /// Number of unpaired electrons.
    #[arg(long, default_value_t = 0)]
    spin: u32,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    point: PointArgs,
    /// Natural-orbital truncation threshold.
    #[arg(long, default_value_t = 1e-7)]
    eta: f64,
    /// Fragment solver.
    #[arg(long, default_value = "mp2", value_parser = ["mp2", "ccsd", "fci"])]
    solver: String,
}

#[derive(Args)]
struct ComposeArgs {
    /// Ledger file with the component energies.
    #[arg(long)]
    ledger: PathBuf,
    /// High-level method name.
    #[arg(long)]
    high_method: String,
    /// Low-level method name.
    #[arg(long)]
    low_method: String,
    /// High-level basis.
    #[arg(long)]
    high_basis: String,
    /// Low-level basis.
    #[arg(long)]
    low_basis: String,
    /// High-level truncation threshold, if any.
    #[arg(long)]
    eta_high: Option<f64>,
    /// Low-level truncation threshold, if any.
    #[arg(long)]
    eta_low: Option<f64>,
}

fn load_geometry(path: &Path) -> Result<Vec<(mofbind::elements::Element, Vector3<f64>)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let collection = parse_xyz(&text)?;
    Ok(collection
        .atoms
        .into_iter()
        .map(|a| (a.element, a.position))
        .collect())
}

fn run_point(args: &PointArgs) -> Result<(SystemSpec, mofbind::integrals::IntegralSet, mofbind::scf::MeanFieldResult)> {
    let geometry = load_geometry(&args.geometry)?;
    let spec = SystemSpec::new(geometry, &args.basis, args.charge, args.spin)?;
    let basis = BasisSet::builtin(&args.basis, &spec.elements())?;
    let integrals = compute_integrals(&spec.geometry, &basis, DEFAULT_ERI_CAP)?;
    let mf = run_scf(&spec, &integrals, &ScfOptions::default())?;
    if !mf.converged {
        bail!(
            "mean field did not converge after {} iterations (gradient {:.2e})",
            mf.iterations,
            mf.gradient_norm
        );
    }
    Ok((spec, integrals, mf))
}

fn parse_triplet(s: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("bad coordinate triple '{s}': {e}"))?;
    if parts.len() != 3 {
        bail!("expected x,y,z, got '{s}'");
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn cmd_carve(args: &CarveArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.structure)
        .with_context(|| format!("reading {}", args.structure.display()))?;
    let is_cif = args
        .structure
        .extension()
        .map(|e| e.eq_ignore_ascii_case("cif"))
        .unwrap_or(false);
    let collection = if is_cif {
        let structure = parse_cif(&text)?;
        let reps: Vec<i32> = args
            .reps
            .split('x')
            .map(|p| p.parse::<i32>())
            .collect::<Result<_, _>>()
            .map_err(|e| anyhow!("bad repetitions '{}': {e}", args.reps))?;
        if reps.len() != 3 {
            bail!("expected AxBxC repetitions, got '{}'", args.reps);
        }
        build_supercell(&structure, (reps[0], reps[1], reps[2]))?
    } else {
        parse_xyz(&text)?
    };
    let cfg = mofbind::carve::CarveConfig {
        radius: args.radius,
        bond_scale: args.bond_scale,
        ..Default::default()
    };
    let cluster = match args.tier.as_str() {
        "large" => {
            let center = args
                .center
                .as_deref()
                .ok_or_else(|| anyhow!("--center is required for the large tier"))?;
            let tag = OriginTag::parse(center)
                .ok_or_else(|| anyhow!("bad origin tag '{center}'"))?;
            carve_large(&collection, &tag, &cfg)?
        }
        tier => {
            let site = args
                .site
                .as_deref()
                .ok_or_else(|| anyhow!("--site is required for the {tier} tier"))?;
            let site = parse_triplet(site)?;
            if tier == "small" {
                carve_small(&collection, site, &cfg)?
            } else {
                carve_medium(&collection, site, &cfg)?
            }
        }
    };
    let (xyz, sidecar) = write_cluster(&cluster);
    let xyz_path = args.out.with_extension("xyz");
    let tag_path = args.out.with_extension("tags");
    std::fs::write(&xyz_path, xyz).with_context(|| format!("writing {}", xyz_path.display()))?;
    std::fs::write(&tag_path, sidecar)
        .with_context(|| format!("writing {}", tag_path.display()))?;
    println!(
        "carved {} cluster: {} atoms, net charge {}, {} unpaired -> {} / {}",
        args.tier,
        cluster.atoms.len(),
        cluster.net_charge,
        cluster.n_unpaired,
        xyz_path.display(),
        tag_path.display()
    );
    Ok(())
}

fn cmd_scf(args: &PointArgs) -> Result<()> {
    let (_, integrals, mf) = run_point(args)?;
    println!("nuclear repulsion  {:+.10} hartree", integrals.nuclear_repulsion);
    println!("total energy       {:+.10} hartree", mf.energy);
    println!(
        "converged in {} iterations, gradient {:.2e}",
        mf.iterations, mf.gradient_norm
    );
    Ok(())
}

fn cmd_mp2(args: &PointArgs) -> Result<()> {
    let (_, integrals, mf) = run_point(args)?;
    let mo = mo_transform(&integrals, &mf)?;
    let window = OrbitalWindow::full(&mo);
    let corr = mp2(&mo, &window)?;
    println!("mean-field energy  {:+.10} hartree", mf.energy);
    println!("correlation        {:+.10} hartree", corr.correlation_energy);
    for (name, value) in &corr.spin_components {
        println!("  {name:<14} {value:+.10}");
    }
    println!("total energy       {:+.10} hartree", mf.energy + corr.correlation_energy);
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let (spec, integrals, mf) = run_point(&args.point)?;
    let basis = BasisSet::builtin(&args.point.basis, &spec.elements())?;
    let minimal = BasisSet::builtin("sto-3g", &spec.elements())?;
    let problem = EmbeddingProblem::new(&spec.geometry, &basis, &integrals, &mf)?;
    let iaos = build_iaos(&problem, &minimal)?;
    let partition = atomic_partition(spec.geometry.len());
    let fragments = make_fragments(&iaos, &partition)?;
    let solver = match args.solver.as_str() {
        "mp2" => FragmentSolver::Mp2,
        "ccsd" => FragmentSolver::Ccsd,
        "fci" => FragmentSolver::Fci,
        other => bail!("unknown solver '{other}'"),
    };
    let ml = MultiLevelSpec {
        eta_high: args.eta,
        eta_low: args.eta,
        high_solver: solver,
        low_solver: solver,
        close_atoms: (0..spec.geometry.len()).collect(),
        bracket_over_all: false,
    };
    let result = multilevel_energy(&problem, &fragments, &ml)?;
    println!("mean-field energy  {:+.10} hartree", result.mean_field);
    println!("correlation        {:+.10} hartree", result.total - result.mean_field);
    println!("total energy       {:+.10} hartree", result.total);
    println!();
    print!("{}", result.diagnostics);
    Ok(())
}

fn cmd_compose(args: &ComposeArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.ledger)
        .with_context(|| format!("reading {}", args.ledger.display()))?;
    let ledger = EnergyLedger::parse(&text)?;
    let high = MethodSpec {
        method: args.high_method.clone(),
        eta: args.eta_high,
        basis: args.high_basis.clone(),
    };
    let low = MethodSpec {
        method: args.low_method.clone(),
        eta: args.eta_low,
        basis: args.low_basis.clone(),
    };
    let complex = oniom_from_ledger(&ledger, SystemTag::MofCo2, &high, &low)?;
    let mof = oniom_from_ledger(&ledger, SystemTag::Mof, &high, &low)?;
    let co2 = oniom_from_ledger(&ledger, SystemTag::Co2, &high, &low)?;
    let de = binding_energy(&complex, &mof, &co2)?;
    println!("method       {}", complex.method);
    println!("E(MOF+CO2)   {:+.10} hartree", complex.energy);
    println!("E(MOF)       {:+.10} hartree", mof.energy);
    println!("E(CO2)       {:+.10} hartree", co2.energy);
    println!("binding      {de:+.4} kcal/mol");
    Ok(())
}

fn cmd_pipeline(cli: &Cli) -> Result<()> {
    let config_path = cli
        .config
        .as_deref()
        .ok_or_else(|| anyhow!("--config is required for the pipeline"))?;
    let cfg = load_config(config_path)?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let opts = PipelineOptions {
        cache_dir: cli.cache_dir.clone(),
        strict: cli.strict,
        dry_run: cli.dry_run,
        jobs: cli.jobs,
    };
    let outcome = run_pipeline(&cfg, base, &opts)?;
    print!("{}", outcome.render_plan());
    if let Some(report) = &outcome.report {
        println!();
        print!("{}", report.render_text());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Carve(args) => cmd_carve(args),
        Command::Scf(args) => cmd_scf(args),
        Command::Mp2(args) => cmd_mp2(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Compose(args) => cmd_compose(args),
        Command::Report => {
            print!("{}", render_deviation_summary(&deviation_summary()));
            Ok(())
        }
        Command::Pipeline => cmd_pipeline(&cli),
    }
}
