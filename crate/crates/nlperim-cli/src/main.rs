use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nlperim::energy::{k_perimeter, ENERGY_CSV_HEADER};
use nlperim::experiments::{self, ExperimentConfig, ExperimentId};
use nlperim::flow::{run_flow, PeriodicStencil, Schedule};
use nlperim::grid::{load_set, save_set};
use nlperim::gridgeom::crofton_perimeter;
use nlperim::kernels::{integrability_audit, kstar_audit};
use nlperim::mincut::{minimize, MINIMIZE_CSV_HEADER};
use nlperim::stability::flatness_certificate;
use nlperim::{build_weights, DomainMask, GridSet, KernelSpec};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Discrete nonlocal perimeters on pixel and voxel grids.
#[derive(Parser, Debug)]
#[command(name = "nlperim", version)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed for randomized commands.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Energy report of a set: prints one CSV row.
    Perimeter {
        /// PBM bitmap; grid geometry is read from the .json sidecar next to it.
        #[arg(long)]
        set: PathBuf,
        #[command(flatten)]
        k: KernelArgs,
        #[command(flatten)]
        o: OmegaArg,
    },
    /// Minimal and maximal minimizers for fixed exterior data.
    Minimize {
        #[arg(long)]
        exterior: PathBuf,
        #[command(flatten)]
        k: KernelArgs,
        #[command(flatten)]
        o: OmegaArg,
    },
    /// Threshold dynamics on the periodic world of the initial set.
    Flow {
        #[arg(long)]
        initial: PathBuf,
        #[command(flatten)]
        k: KernelArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, value_enum, default_value_t = ScheduleKind::Fractional)]
        schedule: ScheduleKind,
        /// Diffusion time for --schedule custom.
        #[arg(long)]
        omega_time: Option<f64>,
        /// Save every k-th set (0 = none).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
    },
    /// Flatness certificate of a set in a ball.
    Certify {
        #[arg(long)]
        set: PathBuf,
        #[command(flatten)]
        o: OmegaArg,
        #[arg(long, default_value_t = 180)]
        directions: usize,
    },
    /// Monte Carlo line-count estimate of the staircase perimeter.
    Crofton {
        #[arg(long)]
        set: PathBuf,
        #[command(flatten)]
        o: OmegaArg,
        #[arg(long, default_value_t = 100_000)]
        lines: usize,
    },
    /// Run one experiment suite; exits 1 when its assertion fails.
    Experiment {
        #[arg(value_parser = parse_experiment)]
        id: ExperimentId,
        /// Full JSON config; overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Kernel order s for the default fractional kernel.
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Check the derivative bounds behind K* and report integrability.
    AuditKernel {
        #[command(flatten)]
        k: KernelArgs,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
}

#[derive(Args, Debug)]
struct KernelArgs {
    /// Kernel JSON file, or shorthand fractional:S, truncated:S, integrable.
    #[arg(long)]
    kernel: String,
    /// Stencil cutoff in cells.
    #[arg(long, default_value_t = 8.0)]
    cutoff: f64,
}

#[derive(Args, Debug)]
struct OmegaArg {
    /// Domain: full, ball:C1,..,Cn,R or box:LO1,..,LOn,HI1,..,HIn.
    #[arg(long, default_value = "full")]
    omega: String,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScheduleKind {
    Fractional,
    Superlinear,
    Custom,
}

fn parse_experiment(s: &str) -> std::result::Result<ExperimentId, String> {
    ExperimentId::parse(s).map_err(|e| e.to_string())
}

/// Failure of a checked property, as opposed to bad input.
#[derive(Debug)]
struct AssertionFailed(String);

impl std::fmt::Display for AssertionFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "assertion failed: {}", self.0)
    }
}

impl std::error::Error for AssertionFailed {}

fn kernel_spec(arg: &str, dim: usize) -> Result<KernelSpec> {
    let spec = if let Some(s) = arg.strip_prefix("fractional:") {
        KernelSpec::fractional(dim, s.parse().context("fractional:S needs a number")?)
    } else if let Some(s) = arg.strip_prefix("truncated:") {
        KernelSpec::truncated(dim, s.parse().context("truncated:S needs a number")?)
    } else if arg == "integrable" {
        KernelSpec::integrable(dim)
    } else {
        let text = std::fs::read_to_string(arg).with_context(|| format!("reading kernel file {arg}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing kernel file {arg}"))?
    };
    if spec.dim != dim {
        bail!("kernel is {}-dimensional but the set is {}-dimensional", spec.dim, dim);
    }
    Ok(spec)
}

fn numbers(list: &str) -> Result<Vec<f64>> {
    list.split(',').map(|t| t.trim().parse::<f64>().with_context(|| format!("bad number {t:?}"))).collect()
}

fn parse_omega(spec: &str, exterior: GridSet) -> Result<DomainMask> {
    let dim = exterior.grid.dim;
    if spec == "full" {
        return Ok(DomainMask::full(&exterior.grid).with_exterior(exterior)?);
    }
    let (kind, rest) = spec.split_once(':').with_context(|| format!("omega '{spec}' should be full, ball:... or box:..."))?;
    let v = numbers(rest)?;
    match kind {
        "ball" if v.len() == dim + 1 => Ok(DomainMask::ball(exterior, &v[..dim], v[dim])),
        "ball" => bail!("ball needs {} centre coordinates and a radius", dim),
        "box" if v.len() == 2 * dim => Ok(DomainMask::boxed(exterior, &v[..dim], &v[dim..])),
        "box" => bail!("box needs {} lower and {} upper coordinates", dim, dim),
        _ => bail!("unknown omega kind '{kind}'"),
    }
}

fn load(path: &Path) -> Result<GridSet> {
    load_set(path).with_context(|| format!("loading {} (with its .json sidecar)", path.display()))
}

fn weights_for(k: &KernelArgs, set: &GridSet) -> Result<nlperim::InteractionWeights> {
    let g = &set.grid;
    let kernel = kernel_spec(&k.kernel, g.dim)?.build()?;
    Ok(build_weights(&kernel, &g.shape[..g.dim], g.h, k.cutoff)?)
}

fn stem_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "set".into())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = &cli.out;
    match cli.cmd {
        Command::Perimeter { set, k, o } => {
            let e = load(&set)?;
            let w = weights_for(&k, &e)?;
            let omega = parse_omega(&o.omega, GridSet::empty(&e.grid))?;
            let rep = k_perimeter(&e, &omega, &w)?;
            println!("{ENERGY_CSV_HEADER}");
            // R column: the ball radius, or 0 for other domains
            let r = match omega.kind {
                nlperim::DomainKind::Ball { radius, .. } => radius,
                _ => 0.0,
            };
            println!("{}", rep.csv_row(&stem_name(&set), &k.kernel, r));
        }
        Command::Minimize { exterior, k, o } => {
            let ext = load(&exterior)?;
            let w = weights_for(&k, &ext)?;
            let omega = parse_omega(&o.omega, ext)?;
            let res = minimize(&omega, &w)?;
            std::fs::create_dir_all(out)?;
            save_set(&res.e_min, &out.join("e_min"))?;
            save_set(&res.e_max, &out.join("e_max"))?;
            println!("{MINIMIZE_CSV_HEADER}");
            println!("{}", res.csv_row());
        }
        Command::Flow { initial, k, tau, steps, schedule, omega_time, snapshot_every } => {
            let e = load(&initial)?;
            let w = weights_for(&k, &e)?;
            let st = PeriodicStencil::new(&e.grid, &w)?;
            let s = kernel_spec(&k.kernel, e.grid.dim)?.s.unwrap_or(0.5);
            let sched = match schedule {
                ScheduleKind::Fractional => Schedule::Fractional { s },
                ScheduleKind::Superlinear => Schedule::Superlinear { s },
                ScheduleKind::Custom => Schedule::Custom { omega: omega_time.context("--schedule custom needs --omega-time")? },
            };
            let tr = run_flow(&e, &st, tau, steps, sched, snapshot_every)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("trajectory.csv"), tr.csv())?;
            save_set(&tr.final_state.set, &out.join("final"))?;
            for (step, s) in &tr.snapshots {
                save_set(s, &out.join(format!("step_{step:05}")))?;
            }
            let summary = serde_json::json!({
                "steps": tr.rows.len() - 1,
                "omega": tr.final_state.omega,
                "substeps": tr.final_state.substeps,
                "extinct_at": tr.extinct_at,
                "fixed_at": tr.fixed_at,
                "final_volume": tr.final_state.set.measure(),
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Certify { set, o, directions } => {
            let e = load(&set)?;
            let omega = parse_omega(&o.omega, GridSet::empty(&e.grid))?;
            let cert = flatness_certificate(&e, &omega, directions)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join("certificate_graph.csv"), cert.graph_csv())?;
            println!("{}", serde_json::to_string_pretty(&cert.summary_json())?);
        }
        Command::Crofton { set, o, lines } => {
            let e = load(&set)?;
            let omega = parse_omega(&o.omega, GridSet::empty(&e.grid))?;
            let est = crofton_perimeter(&e, &omega, lines, cli.seed)?;
            let classical = nlperim::gridgeom::classical_perimeter(&e, &omega);
            let mut v = serde_json::to_value(&est)?;
            v["classical_perimeter"] = classical.into();
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::Experiment { id, config, s, trials } => {
            let mut cfg = match config {
                Some(p) => {
                    let c: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(&p)?)
                        .with_context(|| format!("parsing {}", p.display()))?;
                    if c.id != id {
                        bail!("config is for '{}', not '{}'", c.id.name(), id.name());
                    }
                    c
                }
                None => ExperimentConfig { seed: cli.seed, ..ExperimentConfig::default_for(id) },
            };
            if let Some(s) = s {
                cfg.kernel.s = Some(s);
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let res = experiments::run(&cfg)?;
            let files = experiments::write_outputs(out, &cfg, &res)?;
            println!("{}", serde_json::to_string_pretty(&res.summary)?);
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            if !res.passed {
                return Err(AssertionFailed(format!("experiment {}", id.name())).into());
            }
        }
        Command::AuditKernel { k, samples } => {
            let spec = kernel_spec(&k.kernel, dim_of(&k.kernel)?)?;
            let kernel = spec.build()?;
            let audit = kstar_audit(&kernel, samples, cli.seed);
            let integ = integrability_audit(&kernel).ok();
            println!("{}", serde_json::to_string_pretty(&serde_json::json!({ "kstar": audit, "integrability": integ }))?);
            if !audit.pass {
                return Err(AssertionFailed(format!("K* bound exceeded by ratio {}", audit.max_ratio)).into());
            }
        }
    }
    Ok(())
}

/// Dimension of a kernel argument; shorthands are two-dimensional.
fn dim_of(arg: &str) -> Result<usize> {
    if arg.ends_with(".json") {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?)?;
        Ok(v["dim"].as_u64().context("kernel file lacks dim")? as usize)
    } else {
        Ok(2)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<AssertionFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
