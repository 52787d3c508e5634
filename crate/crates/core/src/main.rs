use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pivflow::config::{parse_config, parse_regularizer, PipelineConfig};
use pivflow::descriptor::{evaluate, DescriptorLayout, ParticleIndex};
use pivflow::error::{Error, Result};
use pivflow::eval::{aee, match_particles};
use pivflow::flow::{render_volume, solve_flow_grid, DataTerm, FlowInput, SolverConfig};
use pivflow::geometry::{Domain, Image, Vec3};
use pivflow::io;
use pivflow::ipr::{ipr_reconstruct_logged, linear_schedule, IprConfig};
use pivflow::mart::{
    build_ray_weights, extract_peaks_with, gamma_stretch, mart_reconstruct, MartConfig,
};
use pivflow::pipeline::{self, Layout, Stage, MATCH_RADIUS};
use pivflow::synth;

#[derive(Parser)]
#[command(
    name = "pivflow",
    version,
    about = "Volumetric particle velocimetry from multi-camera images"
)]
struct Cli {
    /// Worker threads. The stages are single-threaded; values above one are accepted and ignored.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Replace the scene seed from the config file.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// -v for progress, -vv for per-iteration detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene: particles, images, cameras and true flow.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Reconstruct particles of one frame from a scene directory.
    Reconstruct(ReconArgs),
    /// Estimate the flow between two particle sets.
    Flow(FlowArgs),
    /// Compare a flow field and/or particle set against ground truth.
    Eval(EvalArgs),
    /// Descriptor debugging.
    Descriptor {
        #[command(subcommand)]
        command: DescriptorCommand,
    },
    /// Run synth, reconstruction, flow and evaluation from a config file.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mart,
    Ipr,
}

#[derive(Args)]
struct ReconArgs {
    #[arg(long, value_enum)]
    method: Method,
    /// Directory written by `synth`.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Sparsity weight (ipr).
    #[arg(long)]
    eta: Option<f64>,
    /// Peak detection threshold (ipr).
    #[arg(long)]
    theta: Option<f64>,
    /// Particle blob width (ipr).
    #[arg(long)]
    sigma: Option<f64>,
    /// Outer iterations, with the triangulation tolerance ramped from 0.8 to 2 px (ipr).
    #[arg(long)]
    outer: Option<usize>,
    /// Inner iterations per outer iteration (ipr).
    #[arg(long)]
    inner: Option<usize>,
    /// MART sweeps.
    #[arg(long)]
    iterations: Option<usize>,
    /// Peak threshold in the stretched volume (mart).
    #[arg(long)]
    min_intensity: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Data {
    SparseSsd,
    SparseNcc,
    DenseSsd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Reg {
    Qr,
    QrdInf,
    QrdAlpha,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long)]
    t0: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long, value_enum, default_value = "sparse-ssd")]
    data: Data,
    #[arg(long, value_enum, default_value = "qrd-inf")]
    reg: Reg,
    /// Weight of the divergence penalty for qrd_alpha.
    #[arg(long)]
    alpha: Option<f64>,
    /// Data weight; the default depends on --data.
    #[arg(long)]
    lambda: Option<f64>,
    /// Domain as NxMxL or a domain.txt file; defaults to domain.txt next to --t0.
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    warps: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    /// Dense window side, odd.
    #[arg(long, default_value_t = 13)]
    window: usize,
    /// Blob width used to render volumes for dense_ssd.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "truth_flow")]
    flow: Option<PathBuf>,
    #[arg(long)]
    truth_flow: Option<PathBuf>,
    #[arg(long, requires = "truth_particles")]
    particles: Option<PathBuf>,
    #[arg(long)]
    truth_particles: Option<PathBuf>,
    #[arg(long, default_value_t = MATCH_RADIUS)]
    radius: f64,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum DescriptorCommand {
    /// Print the descriptor at one point as a CSV row.
    Dump {
        #[arg(long)]
        particles: PathBuf,
        /// x,y,z in voxels.
        #[arg(long, value_parser = parse_point)]
        at: Vec3,
    },
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, required_unless_present = "table2_desk")]
    config: Option<PathBuf>,
    /// Rerun from this stage on (synth, recon, flow, eval) reusing earlier files.
    #[arg(long, conflicts_with = "table2_desk")]
    resume_from: Option<String>,
    /// Every reconstruction method at both desk densities, as a Markdown table.
    #[arg(long)]
    table2_desk: bool,
    /// Overrides pipeline.output_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn parse_point(s: &str) -> std::result::Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err("expected x,y,z".into()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut c = parse_config(path)?;
    if let Some(s) = seed {
        c.scene.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json value");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run_synth(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let c = load_config(config, seed)?;
    let scene = synth::generate_scene(&c.scene.build()?)?;
    synth::write_scene(&scene, out_dir, c.solver.stride)?;
    println!(
        "{} particles, {} cameras -> {}",
        scene.particles_t0.len(),
        scene.images_t0.len(),
        out_dir.display()
    );
    Ok(())
}

fn run_reconstruct(a: &ReconArgs) -> Result<()> {
    if a.frame > 1 {
        return Err(Error::InvalidArgument("frame must be 0 or 1".into()));
    }
    let cameras = io::read_cameras(&a.scene.join("cameras.txt"))?;
    let domain = synth::read_domain(&a.scene.join("domain.txt"))?;
    let images: Vec<Image> = (0..cameras.len())
        .map(|k| io::read_pfm(&synth::image_path(&a.scene, a.frame, k)))
        .collect::<Result<_>>()?;
    create_dir(&a.out_dir)?;
    let particles_path = a.out_dir.join(format!("particles_t{}.csv", a.frame));
    match a.method {
        Method::Mart => {
            let mut c = MartConfig::default();
            if let Some(n) = a.iterations {
                c.n_iterations = n;
            }
            if let Some(m) = a.min_intensity {
                c.min_intensity = m;
            }
            c.validate()?;
            let weights = build_ray_weights(&cameras, &domain, c.cone_radius)?;
            let volume = mart_reconstruct(&images, &weights, &c)?;
            io::write_volume(
                &a.out_dir.join(format!("volume_t{}.pfm3", a.frame)),
                &volume,
            )?;
            let set = extract_peaks_with(&gamma_stretch(&volume, c.gamma), c.min_intensity, c.fit);
            io::write_particles(&particles_path, &set)?;
            println!("mart: {} particles", set.len());
        }
        Method::Ipr => {
            let mut c = IprConfig::default();
            if let Some(v) = a.eta {
                c.eta = v;
            }
            if let Some(v) = a.theta {
                c.theta = v;
            }
            if let Some(v) = a.sigma {
                c.sigma = v;
            }
            if let Some(n) = a.outer {
                c.epsilon_schedule = linear_schedule(0.8, 2.0, n);
            }
            if let Some(n) = a.inner {
                c.n_inner = n;
            }
            let (set, logs) =
                ipr_reconstruct_logged(&images, &cameras, &domain, &c, &mut |e, _| {
                    log::info!(
                        "outer {}: {} particles, energy {:.6e}",
                        e.iteration,
                        e.particles,
                        e.energy
                    )
                })?;
            io::write_particles(&particles_path, &set)?;
            let log_json = serde_json::to_value(&logs).expect("log entries serialize");
            write_json(
                &a.out_dir.join(format!("ipr_log_t{}.json", a.frame)),
                &log_json,
            )?;
            println!("ipr: {} particles", set.len());
        }
    }
    Ok(())
}

fn resolve_domain(spec: Option<&str>, t0: &Path) -> Result<Domain> {
    match spec {
        Some(s) if Path::new(s).is_file() => synth::read_domain(Path::new(s)),
        Some(s) => {
            let d: Vec<usize> = s
                .split('x')
                .map(|t| t.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::InvalidArgument(format!("domain `{s}` is neither a file nor NxMxL"))
                })?;
            match d[..] {
                [n, m, l] => Domain::new(n, m, l),
                _ => Err(Error::InvalidArgument(format!(
                    "domain `{s}` must have three extents"
                ))),
            }
        }
        None => synth::read_domain(&t0.parent().unwrap_or(Path::new(".")).join("domain.txt")),
    }
}

fn run_flow(a: &FlowArgs) -> Result<()> {
    let domain = resolve_domain(a.domain.as_deref(), &a.t0)?;
    let t0 = io::read_particles(&a.t0, 0)?;
    let t1 = io::read_particles(&a.t1, 1)?;
    let data = match a.data {
        Data::SparseSsd => DataTerm::SparseSsd,
        Data::SparseNcc => DataTerm::SparseNcc,
        Data::DenseSsd => DataTerm::DenseSsd { window: a.window },
    };
    let reg_name = match a.reg {
        Reg::Qr => "qr",
        Reg::QrdInf => "qrd_inf",
        Reg::QrdAlpha => "qrd_alpha",
    };
    let spec = parse_regularizer(reg_name, a.alpha)?;
    let mut c = SolverConfig::new(data);
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.stride {
        c.stride = v;
    }
    if let Some(v) = a.levels {
        c.pyramid_levels = v;
    }
    if let Some(v) = a.warps {
        c.warps_per_level = v;
    }
    if let Some(v) = a.inner {
        c.inner_iterations = v;
    }
    c.validate()?;
    let (field, report) = if data.is_sparse() {
        solve_flow_grid(
            FlowInput::Particles { t0: &t0, t1: &t1 },
            &domain,
            &c,
            &spec,
        )?
    } else {
        let u0 = render_volume(&t0, domain.extents, a.sigma);
        let u1 = render_volume(&t1, domain.extents, a.sigma);
        solve_flow_grid(FlowInput::Volumes { u0: &u0, u1: &u1 }, &domain, &c, &spec)?
    };
    log::debug!("{report:?}");
    io::write_flow(&a.out, &field)?;
    println!(
        "flow: {:?} grid at stride {} -> {}",
        field.dims,
        field.stride,
        a.out.display()
    );
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let mut out = serde_json::Map::new();
    if let (Some(f), Some(t)) = (&a.flow, &a.truth_flow) {
        let est = io::read_flow(f)?;
        let gt = io::read_flow(t)?;
        out.insert("aee".into(), aee(&est, &gt)?.into());
    }
    if let (Some(p), Some(t)) = (&a.particles, &a.truth_particles) {
        let rec = io::read_particles(p, 0)?;
        let truth = io::read_particles(t, 0)?;
        let stats = match_particles(&rec, &truth, a.radius);
        out.insert(
            "recon".into(),
            serde_json::to_value(stats).expect("stats serialize"),
        );
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to compare: give --flow/--truth-flow or --particles/--truth-particles".into(),
        ));
    }
    let v = serde_json::Value::Object(out);
    println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
    if let Some(path) = &a.out {
        write_json(path, &v)?;
    }
    Ok(())
}

fn run_dump(particles: &Path, at: &Vec3) -> Result<()> {
    let set = io::read_particles(particles, 0)?;
    let d = evaluate(at, &ParticleIndex::new(&set), &DescriptorLayout::new());
    let row: Vec<String> = d.values.iter().map(|v| v.to_string()).collect();
    println!("{}", row.join(","));
    Ok(())
}

fn run_pipeline_cmd(a: &PipelineArgs, seed: Option<u64>) -> Result<()> {
    let mut c = match (&a.config, seed) {
        (Some(p), _) => load_config(p, seed)?,
        (None, Some(s)) => PipelineConfig::desk(0.05, s),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "--table2-desk without --config needs --seed-override".into(),
            ));
        }
    };
    if let Some(dir) = &a.out_dir {
        c.output_dir = dir.clone();
    }
    if a.table2_desk {
        let rows = pipeline::run_table2_desk(&c)?;
        let md = pipeline::table2_markdown(&rows);
        let path = c.output_dir.join("table2_desk.md");
        std::fs::write(&path, &md).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        print!("{md}");
        return Ok(());
    }
    let from = match &a.resume_from {
        None => Stage::Synth,
        Some(s) => Stage::parse(s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown stage `{s}` (synth, recon, flow, eval)"))
        })?,
    };
    let summary = pipeline::run_stages(&c, &Layout::new(&c.output_dir), from)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { config, out_dir } => run_synth(config, out_dir, cli.seed_override),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Flow(a) => run_flow(a),
        Command::Eval(a) => run_eval(a),
        Command::Descriptor {
            command: DescriptorCommand::Dump { particles, at },
        } => run_dump(particles, at),
        Command::Pipeline(a) => run_pipeline_cmd(a, cli.seed_override),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if cli.threads > 1 {
        log::warn!("running single-threaded; --threads {} ignored", cli.threads);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
