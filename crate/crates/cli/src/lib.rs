//! The `snerg` command line: bake a scene into a bundle, render or benchmark
//! it, fine-tune its shading MLP against reference views, and serve it to the
//! browser viewer.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags or arguments), 2
//! for runtime failures (I/O, corrupt or missing bundle files, port in use).

mod poses;
pub mod serve;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use snerg::baker::{bake, training_rig, BakeConfig};
use snerg::finetune::{finetune, write_loss_trace, FinetuneConfig};
use snerg::image::Image;
use snerg::math::Camera;
use snerg::renderer::{
    benchmark_orbit, orbit_camera, render_frame, render_scene_direct, RenderConfig, ORBIT_FOV_DEGREES, ORBIT_RADIUS,
};
use snerg::scene::{BuiltinScene, DeferredMlp};
use snerg::store::{
    export_bundle_with, import_bundle, read_manifest, ExportOptions, Manifest, MlpJson, QuantizedGrid, MANIFEST_FILE,
};
use snerg::DVec3;

pub use poses::{CameraEntry, CameraList, CAMERAS_FILE};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SNERG_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<snerg::Error> for CliError {
    fn from(e: snerg::Error) -> Self {
        match e {
            snerg::Error::InvalidArgument(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

type FrameRenderer<'a> = Box<dyn Fn(&Camera) -> snerg::Result<Image> + 'a>;

#[derive(Debug, Parser)]
#[command(name = "snerg", version, about = "Bake, render and serve sparse neural radiance grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bake a built-in scene into a bundle directory
    Bake(BakeArgs),
    /// Render images from a bundle, or directly from a scene as a reference
    Render(RenderArgs),
    /// Time an orbit of the bundle and print a report
    Bench(BenchArgs),
    /// Fine-tune the bundle's shading MLP against reference views
    Finetune(FinetuneArgs),
    /// Serve a bundle (and optionally the viewer) over HTTP
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct MlpArgs {
    /// Shading MLP as JSON: a bundle manifest or its `mlp` section [default: random, see --mlp-seed]
    #[arg(long)]
    pub mlp: Option<PathBuf>,
    /// Seed of the random shading MLP
    #[arg(long, default_value_t = 0)]
    pub mlp_seed: u64,
    /// Output bias of the random shading MLP; negative keeps the residual small
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    pub mlp_bias: f64,
}

impl MlpArgs {
    fn load(&self) -> CliResult<DeferredMlp> {
        let Some(path) = &self.mlp else {
            return Ok(DeferredMlp::random_specular(self.mlp_seed, self.mlp_bias));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{} is not JSON: {e}", path.display())))?;
        if let Some(section) = value.get_mut("mlp") {
            value = section.take();
        }
        let json: MlpJson = serde_json::from_value(value)
            .map_err(|e| CliError::Usage(format!("{} is not an MLP description: {e}", path.display())))?;
        Ok(json.to_mlp()?)
    }
}

#[derive(Debug, Args)]
pub struct MarchArgs {
    /// Ray-march step in scene units [default: one voxel width]
    #[arg(long)]
    pub step: Option<f64>,
    /// Stop marching once transmittance falls below this
    #[arg(long, default_value_t = 0.005)]
    pub termination: f64,
    /// Rescale accumulated colour and features by min(1, 1.5a)/a after marching
    #[arg(long)]
    pub unpremultiply: bool,
    /// Step through empty macroblocks instead of jumping over them
    #[arg(long)]
    pub no_skip: bool,
    /// Background colour r,g,b in [0,1] [default: the bundle's, else 1,1,1]
    #[arg(long, value_parser = parse_rgb)]
    pub background: Option<DVec3>,
}

impl MarchArgs {
    fn config(&self, bundle_background: Option<DVec3>) -> CliResult<RenderConfig> {
        let config = RenderConfig {
            step_size: self.step,
            termination: self.termination,
            background: self.background.or(bundle_background).unwrap_or(DVec3::ONE),
            unpremultiply: self.unpremultiply,
            skip_empty: !self.no_skip,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
pub struct BakeArgs {
    /// Scene name, optionally with overrides as name:key=value,key=value
    #[arg(long, default_value = "lambert-spheres")]
    pub scene: String,
    /// Voxels per axis (N)
    #[arg(long, default_value_t = 256)]
    pub grid_res: usize,
    /// Voxels per macroblock axis (B); must divide N
    #[arg(long, default_value_t = 32)]
    pub block_size: usize,
    /// Blocks whose peak alpha stays at or below this are dropped
    #[arg(long, default_value_t = BakeConfig::DEFAULT_ALPHA_THRESHOLD)]
    pub alpha_thresh: f64,
    /// Blocks whose best visibility from the training cameras stays below this are culled; 0 disables culling
    #[arg(long, default_value_t = BakeConfig::DEFAULT_VISIBILITY_THRESHOLD)]
    pub vis_thresh: f64,
    /// Gaussian samples per voxel for anti-aliasing
    #[arg(long, default_value_t = BakeConfig::DEFAULT_SUPERSAMPLES)]
    pub supersamples: usize,
    /// Seed of the supersampling jitter
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training cameras on a sphere around the scene, used for culling
    #[arg(long, default_value_t = 64)]
    pub train_views: usize,
    #[command(flatten)]
    pub mlp: MlpArgs,
    /// Background colour r,g,b in [0,1] recorded in the manifest
    #[arg(long, value_parser = parse_rgb, default_value = "1,1,1")]
    pub background: DVec3,
    /// Manifest timestamp in Unix seconds [default: now]
    #[arg(long)]
    pub timestamp: Option<u64>,
    /// Output bundle directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Bundle directory
    #[arg(long, required_unless_present = "reference_scene")]
    pub bundle: Option<PathBuf>,
    /// Render this scene function directly (float reference) instead of the bundle's grid
    #[arg(long)]
    pub reference_scene: Option<String>,
    /// Default step for --reference-scene without a bundle is one voxel at this resolution
    #[arg(long, default_value_t = 256)]
    pub grid_res: usize,
    /// Orbit pose orbit:<i>/<n>, repeatable [default: orbit:0/1]
    #[arg(long = "pose", value_parser = parse_orbit)]
    pub pose: Vec<(usize, usize)>,
    /// Camera list (JSON) to render instead of orbit poses
    #[arg(long, conflicts_with = "pose")]
    pub poses: Option<PathBuf>,
    /// Image width for orbit poses
    #[arg(long, default_value_t = 800)]
    pub width: u32,
    /// Image height for orbit poses
    #[arg(long, default_value_t = 800)]
    pub height: u32,
    #[command(flatten)]
    pub march: MarchArgs,
    #[command(flatten)]
    pub mlp: MlpArgs,
    /// Output directory for NNNN.png images and their cameras.json
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Bundle directory
    #[arg(long)]
    pub bundle: PathBuf,
    /// Orbit frames
    #[arg(long, default_value_t = 150)]
    pub frames: usize,
    #[arg(long, default_value_t = 800)]
    pub width: u32,
    #[arg(long, default_value_t = 800)]
    pub height: u32,
    /// Also write the report to this file
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub march: MarchArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Bundle directory; its manifest's mlp section is rewritten in place
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory of reference images with a cameras.json camera list
    #[arg(long)]
    pub views: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Pixels per minibatch
    #[arg(long, default_value_t = 4096)]
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the per-epoch loss trace (epoch,loss lines) here
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub march: MarchArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bundle directory, served at /
    #[arg(long)]
    pub bundle: PathBuf,
    /// Viewer assets, served at /viewer/
    #[arg(long)]
    pub viewer: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// TCP port; 0 picks a free one
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn parse_rgb(s: &str) -> Result<DVec3, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|c| (0.0..=1.0).contains(c)) => Ok(DVec3::new(r, g, b)),
        _ => Err("expected r,g,b with each channel in [0,1]".into()),
    }
}

fn parse_orbit(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected orbit:<i>/<n> with i < n, got {s:?}");
    let rest = s.strip_prefix("orbit:").ok_or_else(bad)?;
    let (i, n) = rest.split_once('/').ok_or_else(bad)?;
    let (i, n): (usize, usize) = (i.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?);
    if i < n {
        Ok((i, n))
    } else {
        Err(bad())
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match configure_threads().and_then(|threads| execute(cli, threads)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult<usize> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(raw) => match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))),
        },
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(threads)
}

pub fn execute(cli: Cli, threads: usize) -> CliResult {
    match cli.command {
        Command::Bake(a) => cmd_bake(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Serve(a) => cmd_serve(&a, threads),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn cmd_bake(args: &BakeArgs) -> CliResult {
    let scene = BuiltinScene::parse(&args.scene)?;
    let mut config = BakeConfig::new(args.grid_res, args.block_size);
    config.alpha_threshold = args.alpha_thresh;
    config.visibility_threshold = args.vis_thresh;
    config.supersamples = args.supersamples;
    config.seed = args.seed;
    config.validate()?;
    let mlp = args.mlp.load()?;
    let rig_res = 64;
    let cameras = training_rig(
        args.train_views,
        ORBIT_RADIUS,
        Camera::focal_from_fov(ORBIT_FOV_DEGREES, rig_res),
        rig_res,
        rig_res,
    )?;

    let grid = bake(&scene, &cameras, &config)?.quantize();
    create_dir(&args.out)?;
    let options = ExportOptions {
        background: args.background,
        timestamp: Some(args.timestamp.unwrap_or_else(unix_now)),
    };
    let summary = export_bundle_with(&grid, &mlp, &args.out, &options)?;
    let total_blocks = grid.blocks_per_axis().pow(3);
    println!(
        "occupied blocks: {} / {} ({:.2}%)",
        summary.occupied_blocks,
        total_blocks,
        100.0 * summary.occupied_blocks as f64 / total_blocks as f64
    );
    println!("bundle bytes: {}", summary.total_bytes());
    for (file, bytes) in &summary.file_bytes {
        println!("  {file}: {bytes}");
    }
    Ok(())
}

fn load_bundle(dir: &Path) -> CliResult<(QuantizedGrid, DeferredMlp, Manifest)> {
    if !dir.is_dir() {
        return Err(CliError::Runtime(format!("bundle directory {} does not exist", dir.display())));
    }
    let (grid, mlp) = import_bundle(dir)?;
    let manifest = read_manifest(dir)?;
    Ok((grid, mlp, manifest))
}

fn requested_cameras(args: &RenderArgs) -> CliResult<Vec<Camera>> {
    if let Some(path) = &args.poses {
        return CameraList::read(path)?.cameras.iter().map(CameraEntry::camera).collect();
    }
    let poses = if args.pose.is_empty() { vec![(0, 1)] } else { args.pose.clone() };
    poses
        .into_iter()
        .map(|(i, n)| Ok(orbit_camera(i, n, args.width, args.height)?))
        .collect()
}

pub fn cmd_render(args: &RenderArgs) -> CliResult {
    let cameras = requested_cameras(args)?;
    let bundle = args.bundle.as_deref().map(load_bundle).transpose()?;
    let background = bundle.as_ref().map(|(_, _, m)| m.background());
    let mut config = args.march.config(background)?;

    let render: FrameRenderer = match (&args.reference_scene, &bundle) {
        (Some(name), _) => {
            let scene = BuiltinScene::parse(name)?;
            let mlp = match (&bundle, &args.mlp.mlp) {
                (Some((_, mlp, _)), None) => mlp.clone(),
                _ => args.mlp.load()?,
            };
            if config.step_size.is_none() {
                let n = bundle.as_ref().map_or(args.grid_res, |(g, _, _)| g.grid_resolution());
                if n == 0 {
                    return Err(CliError::Usage("--grid-res must be positive".into()));
                }
                config.step_size = Some(2.0 / n as f64);
            }
            Box::new(move |cam| render_scene_direct(&scene, &mlp, cam, &config))
        }
        (None, Some((grid, mlp, _))) => Box::new(move |cam| render_frame(grid, mlp, cam, &config)),
        (None, None) => unreachable!("clap requires --bundle or --reference-scene"),
    };

    create_dir(&args.out)?;
    let mut list = CameraList::default();
    for (i, cam) in cameras.iter().enumerate() {
        let file = format!("{i:04}.png");
        let path = args.out.join(&file);
        render(cam)?.save_png(&path)?;
        println!("{}", path.display());
        list.cameras.push(CameraEntry::from_camera(cam, Some(file)));
    }
    list.write(&args.out.join(CAMERAS_FILE))
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult {
    let (grid, mlp, manifest) = load_bundle(&args.bundle)?;
    let config = args.march.config(Some(manifest.background()))?;
    let report = benchmark_orbit(&grid, &mlp, args.frames, args.width, args.height, &config)?;
    print!("{}", report.to_text());
    if let Some(path) = &args.report {
        report.write(path)?;
    }
    Ok(())
}

/// Reads the images listed in `dir/cameras.json`.
pub fn read_views(dir: &Path) -> CliResult<Vec<(Camera, Image)>> {
    let list = CameraList::read(&dir.join(CAMERAS_FILE))?;
    list.cameras
        .iter()
        .map(|entry| {
            let file = entry
                .file
                .as_ref()
                .ok_or_else(|| CliError::Usage("every camera in a view list needs a file".into()))?;
            let path = dir.join(file);
            if !path.is_file() {
                return Err(CliError::Runtime(format!("missing view image {}", path.display())));
            }
            Ok((entry.camera()?, Image::load_png(&path)?))
        })
        .collect()
}

pub fn cmd_finetune(args: &FinetuneArgs) -> CliResult {
    let (grid, mlp, mut manifest) = load_bundle(&args.bundle)?;
    let views = read_views(&args.views)?;
    let config = FinetuneConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
        render: args.march.config(Some(manifest.background()))?,
    };
    let result = finetune(&grid, &mlp, &views, &config)?;
    let trace = &result.loss_trace;
    println!("loss: {:.6e} -> {:.6e}", trace[0], trace[trace.len() - 1]);
    if let Some(path) = &args.trace {
        write_loss_trace(path, trace)?;
    }
    manifest.mlp = MlpJson::from_mlp(&result.mlp);
    manifest.timestamp = unix_now();
    manifest.write(&args.bundle)?;
    Ok(())
}

pub fn cmd_serve(args: &ServeArgs, threads: usize) -> CliResult {
    let manifest = args.bundle.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(CliError::Runtime(format!("missing bundle file {}", manifest.display())));
    }
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(threads)
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::Runtime(format!("cannot read bound address: {e}")))?;
        println!("listening on http://{local}/");
        let _ = std::io::stdout().flush();
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve::serve(listener, args.bundle.clone(), args.viewer.clone(), shutdown)
            .await
            .map_err(|e| CliError::Runtime(format!("server failed: {e}")))
    })
}
