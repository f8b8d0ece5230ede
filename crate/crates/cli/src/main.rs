use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use symreg::esp::{CouplingKind, KernelSpec, TransitionKernel};
use symreg::harness::{
    basis_for, eval_volumes, report_dir, run_panel_dir, run_register, similarity_center,
    swd_round_trip_error, write_panel, write_register_outputs, write_report_files, EvalRow,
    PipelineConfig, ReportFormat,
};
use symreg::phantom::{generate_panel, make_c_sphere_pair, textured_phantom, CSpherePair};
use symreg::swd::{
    apply_similarity, estimate_similarity, forward_swd, forward_swd_about, inverse_swd,
    save_coefficients, FilterSpec, Resampler,
};
use symreg::volume::io::{load_volume, save_volume, VolumeFormat};
use symreg::{GridGeometry, ScalarVolume};

#[derive(Parser)]
#[command(
    name = "symreg",
    version,
    about = "Symplectomorphic registration of 3D volumes"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Report format; overrides the configuration.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Seed for generated phantoms and panels.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register {
        fixed: PathBuf,
        moving: PathBuf,
        /// Output directory; the configured one when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic volume pair or textured phantom.
    Phantom(PhantomArgs),
    /// Warp a volume with every analytic deformation and write the set.
    Panel {
        input: PathBuf,
        out: PathBuf,
        /// Register every case after writing it and emit the report.
        #[arg(long)]
        run: bool,
    },
    /// RMSD between two volumes on the same grid.
    Eval { reference: PathBuf, test: PathBuf },
    /// Aggregate the case rows of a panel directory.
    Report {
        dir: PathBuf,
        /// Register cases that have no row yet before aggregating.
        #[arg(long)]
        run: bool,
    },
    /// Equilibrium probability of an ESP coupling on a volume.
    Esp(EspArgs),
    /// Spherical wave decomposition: coefficients, filtering, similarity.
    Swd(SwdArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PhantomKind {
    /// Ball and shell-with-hole pair, written as c.nii and sphere.nii.
    CSphere,
    /// Ellipsoid filled with seeded texture, written as textured.nii.
    Textured,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(value_enum)]
    kind: PhantomKind,
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 8.0)]
    inner_radius: f64,
    #[arg(long, default_value_t = 20.0)]
    outer_radius: f64,
    #[arg(long, default_value_t = 90.0)]
    gap_angle: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coupling {
    Adjacency,
    ImageWeighted,
    Gaussian,
}

#[derive(Args)]
struct EspArgs {
    volume: PathBuf,
    /// Where to write μ.
    out: PathBuf,
    #[arg(long, value_enum, default_value = "adjacency")]
    coupling: Coupling,
    #[arg(long, default_value_t = 6)]
    connectivity: u8,
    #[arg(long, default_value_t = 1)]
    radius: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long)]
    periodic: bool,
}

#[derive(Args)]
struct SwdArgs {
    volume: PathBuf,
    #[arg(long, default_value_t = 16)]
    l_max: usize,
    #[arg(long, default_value_t = 16)]
    n_max: usize,
    /// Write the coefficients here.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    /// Write the volume synthesized through a low-pass filter here.
    #[arg(long)]
    filtered: Option<PathBuf>,
    /// Low-pass cut-offs used with --filtered, as L,N.
    #[arg(long, value_parser = parse_pair, default_value = "8,8")]
    low_pass: (usize, usize),
    /// Report the relative error of forward then inverse transform.
    #[arg(long)]
    round_trip: bool,
    /// Estimate the similarity taking VOLUME onto this volume.
    #[arg(long)]
    similarity: Option<PathBuf>,
    /// With --similarity: write the second volume with the estimate undone.
    #[arg(long, requires = "similarity")]
    aligned: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected L,N")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

fn load(path: &Path) -> Result<ScalarVolume> {
    load_volume(path, VolumeFormat::from_path(path))
        .with_context(|| format!("reading {}", path.display()))
}

fn save(v: &ScalarVolume, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_volume(v, path, VolumeFormat::from_path(path))
        .with_context(|| format!("writing {}", path.display()))
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(f) = cli.format {
        cfg.report_format = match f {
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cfg = pipeline_config(cli)?;
    match &cli.command {
        Command::Register { fixed, moving, out } => {
            let Some(out) = out.clone().or_else(|| cfg.output_dir.clone()) else {
                bail!("no output directory: pass --out or set output_dir");
            };
            let outcome = run_register(&load(fixed)?, &load(moving)?, &cfg)?;
            write_register_outputs(&outcome, &out)?;
            let r = &outcome.registration;
            if cli.verbose {
                for d in &r.diagnostics {
                    eprintln!(
                        "shell {} level {} steps {} rmsd {:.6}",
                        d.index, d.level, d.steps, d.rmsd_end
                    );
                }
            }
            println!(
                "rmsd_before {} rmsd_after {} shells {} steps {} wall_seconds {:.1}",
                r.rmsd_before,
                r.rmsd_after,
                r.map.shells.len(),
                r.steps(),
                outcome.wall_seconds
            );
        }
        Command::Phantom(a) => {
            let g = GridGeometry::cube(a.dims);
            match a.kind {
                PhantomKind::CSphere => {
                    let p = CSpherePair {
                        inner_radius: a.inner_radius,
                        outer_radius: a.outer_radius,
                        gap_angle_deg: a.gap_angle,
                        ball_radius: None,
                    };
                    let (c, ball) = make_c_sphere_pair(&g, &p)?;
                    save(&c, &a.out.join("c.nii"))?;
                    save(&ball, &a.out.join("sphere.nii"))?;
                }
                PhantomKind::Textured => {
                    save(&textured_phantom(&g, cli.seed), &a.out.join("textured.nii"))?
                }
            }
        }
        Command::Panel { input, out, run } => {
            let v = load(input)?;
            let cases = generate_panel(&v, cli.seed, cfg.panel.amplitude_scale)?;
            let ids = write_panel(out, &cfg.panel.subject, &v, &cases)?;
            if cli.verbose {
                eprintln!("wrote {}", ids.join(", "));
            }
            if *run {
                print!("{}", run_panel_dir(out, &cfg)?.render(cfg.report_format)?);
            }
        }
        Command::Eval { reference, test } => {
            let row = EvalRow {
                reference: reference.display().to_string(),
                test: test.display().to_string(),
                rmsd: eval_volumes(&load(reference)?, &load(test)?)?,
            };
            println!("{}", serde_json::to_string(&row)?);
        }
        Command::Report { dir, run } => {
            let report = if *run {
                run_panel_dir(dir, &cfg)?
            } else {
                report_dir(dir, &cfg)?
            };
            write_report_files(&report, dir, &cfg)?;
            print!("{}", report.render(cfg.report_format)?);
        }
        Command::Esp(a) => {
            let v = load(&a.volume)?;
            let spec = KernelSpec {
                kind: match a.coupling {
                    Coupling::Adjacency => CouplingKind::Adjacency,
                    Coupling::ImageWeighted => CouplingKind::ImageWeighted,
                    Coupling::Gaussian => CouplingKind::GaussianStationary,
                },
                connectivity: a.connectivity.try_into().map_err(anyhow::Error::msg)?,
                radius: a.radius,
                beta: a.beta,
                sigma_mm: a.sigma,
                periodic: a.periodic,
                ..Default::default()
            };
            let kernel: TransitionKernel = spec.build(&v)?;
            let sol = &kernel.solution;
            if cli.verbose {
                let (lo, hi) = sol.mu.min_max();
                eprintln!("mu range [{lo:e}, {hi:e}]");
            }
            println!(
                "lambda {} iterations {} residual {:e}",
                sol.lambda, sol.iterations, sol.residual
            );
            save(&sol.mu, &a.out)?;
        }
        Command::Swd(a) => swd(a, &cfg)?,
    }
    Ok(())
}

fn swd(a: &SwdArgs, cfg: &PipelineConfig) -> Result<()> {
    let v = load(&a.volume)?;
    let basis = basis_for(&v.geometry, a.l_max, a.n_max)?;
    let c = forward_swd(&v, &basis);
    if let Some(p) = &a.coefficients {
        save_coefficients(&c, p)?;
    }
    if let Some(p) = &a.filtered {
        let f = inverse_swd(
            &c,
            &FilterSpec::low_pass(a.low_pass.0, a.low_pass.1),
            &v.geometry,
        )?;
        save(&f, p)?;
    }
    if a.round_trip {
        println!(
            "round_trip_relative_error {:e}",
            swd_round_trip_error(&v, a.l_max, a.n_max)?
        );
    }
    if let Some(other) = &a.similarity {
        let w = load(other)?;
        if w.geometry != v.geometry {
            bail!("similarity needs both volumes on the same grid");
        }
        let center = similarity_center(&v, cfg.swd.center);
        let p = estimate_similarity(
            &forward_swd_about(&v, &basis, center),
            &forward_swd_about(&w, &basis, center),
            &cfg.swd.search,
        )?;
        println!("{}", serde_json::to_string(&p)?);
        if let Some(out) = &a.aligned {
            save(
                &apply_similarity(&w, &p.inverse(), &v.geometry, &Resampler::Trilinear)?,
                out,
            )?;
        }
    }
    Ok(())
}
