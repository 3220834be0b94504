use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marf::config::RunConfig;
use marf::data::{Dataset, ShapeSource};
use marf::eval::{append_results, evaluate};
use marf::geometry::Vec3;
use marf::gradcheck::{run_gradcheck, GradcheckConfig, CHECKED_TERMS};
use marf::network::Head;
use marf::raycast::Field;
use marf::render::{camera_for, latent_path, orbit_directions, render, RenderMode};
use marf::trainer::{load_params, Trainer};
use marf::{MarfError, Result};

#[derive(Parser)]
#[command(name = "marf", version, about = "Medial atom ray fields: data, training, rendering and evaluation")]
struct Cli {
    /// Worker threads (default: MARF_THREADS, then available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-cast supervision maps of one or more shapes.
    Dataset(DatasetArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Render(RenderArgs),
    /// Score a checkpoint (or the oracle) with the chord protocol.
    Eval(EvalArgs),
    /// Render latent in-betweens of two training shapes.
    Interp(InterpArgs),
    /// Check loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Shape spec such as `sphere:0.5`, `torus:0.5,0.2` or `mesh:bunny.obj`;
    /// repeat for several shapes.
    #[arg(long = "shape", required = true)]
    shapes: Vec<String>,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long = "res", default_value_t = 64)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run config; a top-level "preset" key picks the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset when no config file names one.
    #[arg(long, default_value = "desk")]
    preset: String,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::from_file(p, &self.preset),
            None => RunConfig::preset(&self.preset),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (default: `<out>.metrics.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint; its config wins over --config and every
    /// flag except --epochs.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_parser = ["marf", "prif"])]
    head: Option<String>,
    /// PRIF only: add the normal loss from network derivatives.
    #[arg(long)]
    prif_normal: bool,
    /// PRIF only: add the multi-view loss.
    #[arg(long)]
    prif_multiview: bool,
    /// Stop after this many epochs; the schedules still span the configured run.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Latent size for multi-shape datasets.
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ViewArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "lambertian")]
    mode: String,
    /// Output image; multi-image runs append `_000`, `_001`, ... to the stem.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Viewing direction `x,y,z`.
    #[arg(long, value_parser = parse_vec3)]
    direction: Option<Vec3>,
    #[arg(long, value_parser = parse_vec3)]
    up: Option<Vec3>,
    /// Direction towards the light `x,y,z` (default: headlight).
    #[arg(long, value_parser = parse_vec3)]
    light: Option<Vec3>,
    /// Render stats JSON (default: `<out>.stats.json`).
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Training shape whose latent conditions the network.
    #[arg(long, default_value_t = 0)]
    shape_id: usize,
    /// Emit this many images turning about the up axis.
    #[arg(long)]
    orbit: Option<usize>,
    /// Latent in-betweens: `ID_A ID_B STEPS`.
    #[arg(long, num_args = 3, value_names = ["ID_A", "ID_B", "STEPS"])]
    latent_interp: Option<Vec<usize>>,
}

#[derive(Args)]
struct InterpArgs {
    #[command(flatten)]
    view: ViewArgs,
    id_a: usize,
    id_b: usize,
    steps: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to score; omit with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the ground-truth oracle against itself.
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    /// Shape spec; otherwise taken from --dataset.
    #[arg(long, required_unless_present = "dataset")]
    shape: Option<String>,
    #[arg(long, conflicts_with = "shape")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    shape_id: usize,
    #[arg(long)]
    viewpoints: Option<usize>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Results CSV to append to.
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to these terms (repeatable).
    #[arg(long = "term", value_parser = CHECKED_TERMS)]
    terms: Vec<String>,
    /// Scale the analytic gradient by `1 + perturb` (self-test).
    #[arg(long, default_value_t = 0.0)]
    perturb: f64,
    /// Report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_vec3(s: &str) -> std::result::Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("{s:?}: {e}"))?;
    match v[..] {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("{s:?}: expected three finite numbers x,y,z")),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn numbered(path: &Path, k: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(e) => format!("{stem}_{k:03}.{}", e.to_string_lossy()),
        None => format!("{stem}_{k:03}"),
    };
    path.with_file_name(name)
}

fn write_json(path: Option<&Path>, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let shapes: Vec<ShapeSource> = a.shapes.iter().map(|s| ShapeSource::parse(s)).collect::<Result<_>>()?;
    if a.views == 0 || a.resolution == 0 {
        return Err(MarfError::InvalidInput("views and resolution must be positive".into()));
    }
    let ds = Dataset::generate(&shapes, a.views, a.resolution, a.resolution, a.seed)?;
    ds.write(&a.out)?;
    eprintln!(
        "wrote {} ({} shapes, {} views, {}x{})",
        a.out.display(),
        ds.shapes.len(),
        ds.view_count(),
        ds.width,
        ds.height
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = Dataset::read(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::load(p)?;
            // Only the stopping point may change; schedules stay as saved.
            if let Some(e) = a.epochs {
                t.config.train.epochs = e;
            }
            t
        }
        None => {
            let mut cfg = a.config.load()?;
            if let Some(h) = &a.head {
                cfg.network.head = if h == "prif" { Head::Prif } else { Head::Marf };
            }
            cfg.loss.prif_normal |= a.prif_normal;
            cfg.loss.prif_multiview |= a.prif_multiview;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            if let Some(d) = a.latent_dim {
                cfg.network.latent_dim = d;
            }
            if dataset.shapes.len() > 1 && cfg.network.latent_dim == 0 {
                return Err(MarfError::InvalidInput(
                    "a multi-shape dataset needs a latent code; pass --latent-dim".into(),
                ));
            }
            Trainer::new(cfg, dataset.shapes.len())?
        }
    };
    let metrics = a.metrics.unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    if a.resume.is_none() && metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let quiet = a.quiet;
    trainer.run(&dataset, Some(&a.out), Some(&metrics), |r| {
        if !quiet {
            eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}  {:.1}s", r.epoch, r.loss.total, r.lr, r.wall_secs);
        }
    })?;
    eprintln!("wrote {} and {}", a.out.display(), metrics.display());
    Ok(())
}

/// Renders one image per latent (or a single unconditioned one) and per view.
fn render_views(view: &ViewArgs, latents: Vec<Option<Vec<f64>>>, orbit: Option<usize>) -> Result<()> {
    let (ckpt_cfg, params) = load_params(&view.checkpoint)?;
    let mut cfg = match &view.config.config {
        Some(p) => RunConfig::from_file(p, &view.config.preset)?.render,
        None => ckpt_cfg.render,
    };
    if let Some(w) = view.width {
        cfg.width = w;
    }
    if let Some(h) = view.height {
        cfg.height = h;
    }
    if let Some(d) = view.direction {
        cfg.direction = d.into();
    }
    if let Some(u) = view.up {
        cfg.up = u.into();
    }
    if let Some(l) = view.light {
        cfg.light = Some(l.into());
    }
    if cfg.width == 0 || cfg.height == 0 {
        return Err(MarfError::InvalidInput("image size must be positive".into()));
    }
    let mode: RenderMode = view.mode.parse()?;
    let latents = match params.config.latent_dim {
        0 => vec![None],
        _ => latents,
    };
    let dirs = match orbit {
        Some(0) => return Err(MarfError::InvalidInput("--orbit needs at least one view".into())),
        Some(n) => orbit_directions(Vec3::from(cfg.direction), Vec3::from(cfg.up), n),
        None => vec![Vec3::from(cfg.direction)],
    };
    let many = latents.len() * dirs.len() > 1;
    let mut stats = Vec::new();
    let mut k = 0;
    for z in &latents {
        let field = Field::from_params(&params, z.clone());
        for d in &dirs {
            let cam = camera_for(*d, &cfg)?;
            let out = render(&field, &cam, mode, &cfg)?;
            let path = if many { numbered(&view.out, k) } else { view.out.clone() };
            out.image.write_ppm(&path)?;
            eprintln!(
                "wrote {} ({} hit, {} degenerate, {:.2}s)",
                path.display(),
                out.stats.hit,
                out.stats.degenerate,
                out.stats.seconds
            );
            stats.push(serde_json::json!({ "image": path, "stats": out.stats }));
            k += 1;
        }
    }
    let stats_path = view.stats.clone().unwrap_or_else(|| with_suffix(&view.out, ".stats.json"));
    match stats.len() {
        1 => write_json(Some(&stats_path), &stats[0]),
        _ => write_json(Some(&stats_path), &stats),
    }
}

fn latent(params: &marf::network::NetworkParams, id: usize) -> Result<Option<Vec<f64>>> {
    if params.config.latent_dim == 0 {
        return Ok(None);
    }
    if id >= params.num_shapes() {
        return Err(MarfError::InvalidInput(format!(
            "shape id {id} out of range; the checkpoint has {} shapes",
            params.num_shapes()
        )));
    }
    Ok(params.latent_of(id))
}

fn interp_latents(view: &ViewArgs, a: usize, b: usize, steps: usize) -> Result<Vec<Option<Vec<f64>>>> {
    if steps < 2 {
        return Err(MarfError::InvalidInput("latent interpolation needs at least 2 steps".into()));
    }
    let (_, params) = load_params(&view.checkpoint)?;
    if params.config.latent_dim == 0 {
        return Err(MarfError::InvalidInput("checkpoint has no latent codes to interpolate".into()));
    }
    let (za, zb) = (latent(&params, a)?.unwrap_or_default(), latent(&params, b)?.unwrap_or_default());
    Ok(latent_path(&za, &zb, steps).into_iter().map(Some).collect())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let latents = match &a.latent_interp {
        Some(v) => interp_latents(&a.view, v[0], v[1], v[2])?,
        None => {
            let (_, params) = load_params(&a.view.checkpoint)?;
            vec![latent(&params, a.shape_id)?]
        }
    };
    render_views(&a.view, latents, a.orbit)
}

fn cmd_interp(a: InterpArgs) -> Result<()> {
    let latents = interp_latents(&a.view, a.id_a, a.id_b, a.steps)?;
    render_views(&a.view, latents, None)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut cfg = match &a.checkpoint {
        Some(p) => {
            let (c, _) = load_params(p)?;
            match &a.config.config {
                Some(f) => RunConfig::from_file(f, &a.config.preset)?.eval,
                None => c.eval,
            }
        }
        None => a.config.load()?.eval,
    };
    if let Some(v) = a.viewpoints {
        cfg.viewpoints = v;
    }
    if let Some(r) = a.rays {
        cfg.ray_budget = r;
    }
    if let Some(s) = a.samples {
        cfg.samples = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if cfg.viewpoints < 2 || cfg.ray_budget == 0 {
        return Err(MarfError::InvalidInput("eval needs at least 2 viewpoints and a positive ray budget".into()));
    }
    let spec = match (&a.shape, &a.dataset) {
        (Some(s), _) => s.clone(),
        (None, Some(d)) => {
            let ds = Dataset::read(d)?;
            ds.provenance.shapes.get(a.shape_id).cloned().ok_or_else(|| {
                MarfError::InvalidInput(format!("dataset has no shape {}", a.shape_id))
            })?
        }
        (None, None) => unreachable!("clap requires one of --shape and --dataset"),
    };
    let shape = ShapeSource::parse(&spec)?;
    let (report, name) = match &a.checkpoint {
        Some(p) => {
            let (_, params) = load_params(p)?;
            let field = Field::from_params(&params, latent(&params, a.shape_id)?);
            (evaluate(Some(&field), &shape, &cfg)?, p.display().to_string())
        }
        None => (evaluate(None, &shape, &cfg)?, "oracle".to_string()),
    };
    write_json(a.out.as_deref(), &report)?;
    if let Some(r) = &a.results {
        append_results(r, &name, &spec, &report)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg = GradcheckConfig {
        seed: a.seed,
        perturb: a.perturb,
        ..GradcheckConfig::default()
    };
    if !a.terms.is_empty() {
        cfg.terms = a.terms;
    }
    let report = run_gradcheck(&cfg)?;
    for t in &report.terms {
        eprintln!(
            "{:<6} {}  max rel err {:.3e} (tol {:.0e}, {} checked, {} excluded)",
            t.term,
            if t.passed { "pass" } else { "FAIL" },
            t.max_relative_error,
            t.tolerance,
            t.checked,
            t.excluded
        );
    }
    write_json(a.out.as_deref(), &report)?;
    if report.passed {
        Ok(())
    } else {
        Err(MarfError::Numerical("gradient check failed".into()))
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MARF_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                MarfError::InvalidInput(format!("MARF_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(MarfError::InvalidInput("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MarfError::InvalidInput(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Interp(a) => cmd_interp(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 1 {
                eprintln!("run `marf --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
