mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use epiband::eval::{chamfer, normalize_error, purity, EvalReport};
use epiband::io;
use epiband::matching::{build_graph, point_baseline_match, MatchParams};
use epiband::recon::{reconstruct_all, GridSpec, PointCloud};
use epiband::refine::{refine, RefineOptions};
use epiband::symnmf::{cluster_scene, KDiagnostics, KMode, SymnmfOptions};
use epiband::synth::{self, SynthParams};
use epiband::SceneManifest;

#[derive(Debug, Parser)]
#[command(name = "epiband", version, about = "Multi-view instance matching and reconstruction")]
#[command(args_override_self = true)]
struct Cli {
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML or JSON file with default flag values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic sphere scene with ground truth.
    Synth(SynthArgs),
    /// Build the instance graph and cluster it.
    Match(MatchArgs),
    /// Refine scored region proposals with cluster-aware suppression.
    Refine(RefineArgs),
    /// Back-project each cluster onto a voxel grid.
    Reconstruct(ReconstructArgs),
    /// Score an assignment and reconstruction against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct SceneArgs {
    /// Scene directory holding `cameras.json` and `masks/`.
    #[arg(long, default_value = ".")]
    scene: PathBuf,
    /// Camera file (default: <scene>/cameras.json).
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Label-image directory (default: <scene>/masks).
    #[arg(long)]
    masks: Option<PathBuf>,
}

impl SceneArgs {
    fn cameras_path(&self) -> PathBuf {
        self.cameras
            .clone()
            .unwrap_or_else(|| self.scene.join(synth::CAMERAS_FILE))
    }

    fn load(&self) -> Result<SceneManifest> {
        let masks = self
            .masks
            .clone()
            .unwrap_or_else(|| self.scene.join(synth::MASK_DIR));
        Ok(io::load_scene(&self.cameras_path(), &masks)?)
    }
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    objects: usize,
    #[arg(long, default_value_t = 5)]
    views: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 256)]
    size: u32,
    #[arg(long, default_value_t = 0.12)]
    radius_min: f64,
    #[arg(long, default_value_t = 0.2)]
    radius_max: f64,
    /// Voxels along the longest side of the emitted grid.
    #[arg(long, default_value_t = synth::GRID_RESOLUTION)]
    resolution: usize,
    /// Also write scored proposals (true masks plus shifted duplicates).
    #[arg(long)]
    proposals: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Band,
    Point,
}

fn parse_k(s: &str) -> Result<KMode, String> {
    if s == "auto" {
        return Ok(KMode::Auto);
    }
    if let Some((lo, hi)) = s.split_once("..") {
        let lo = lo.parse().map_err(|e| format!("{e}"))?;
        let hi = hi.parse().map_err(|e| format!("{e}"))?;
        return Ok(KMode::Range(lo, hi));
    }
    s.parse()
        .map(KMode::Fixed)
        .map_err(|_| format!("expected `auto`, an integer or `lo..hi`, got {s:?}"))
}

#[derive(Debug, Args)]
struct ClusterArgs {
    /// Number of clusters: `auto`, a fixed count, or a range `lo..hi`.
    #[arg(long, default_value = "auto", value_parser = parse_k)]
    k: KMode,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[arg(long, default_value_t = 300)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
}

impl ClusterArgs {
    fn options(&self, seed: u64) -> Result<SymnmfOptions> {
        if self.restarts == 0 || self.max_iters == 0 || !(self.rel_tol > 0.0) {
            bail!("restarts and max-iters must be positive and rel-tol > 0");
        }
        Ok(SymnmfOptions {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            restarts: self.restarts,
            seed,
            record_trace: false,
        })
    }
}

#[derive(Debug, Args)]
struct BandArgs {
    /// Sampled pixels per region.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    /// Epipolar line thickness in pixels.
    #[arg(long, default_value_t = 2.0)]
    thickness: f64,
}

impl BandArgs {
    fn params(&self, seed: u64) -> Result<MatchParams> {
        if self.samples == 0 || !(self.thickness > 0.0) {
            bail!("samples and thickness must be positive");
        }
        Ok(MatchParams {
            n_samples: self.samples,
            thickness: self.thickness,
            seed,
        })
    }
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Output directory for `assignment.json` and `diagnostics.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Baseline::Band)]
    baseline: Baseline,
    #[command(flatten)]
    band: BandArgs,
    #[command(flatten)]
    cluster: ClusterArgs,
    /// Also write the weight matrix as `graph.csv`.
    #[arg(long)]
    dump_graph: bool,
}

#[derive(Debug, Args)]
struct RefineArgs {
    /// Directory with `cameras.json`; masks are not needed.
    #[arg(long, default_value = ".")]
    scene: PathBuf,
    /// Proposal manifest (default: <scene>/proposals.json).
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    rounds: usize,
    #[arg(long, default_value_t = 0.7)]
    nms_init: f64,
    #[arg(long, default_value_t = 0.3)]
    nms: f64,
    #[command(flatten)]
    band: BandArgs,
    #[command(flatten)]
    cluster: ClusterArgs,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Assignment file (default: <scene>/assignment.json).
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Grid spec JSON (default: <scene>/grid.json).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    out: PathBuf,
    /// Also write each voxel grid as raw float32 plus a JSON sidecar.
    #[arg(long)]
    save_grids: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Estimated assignment (default: <scene>/assignment.json).
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// Ground-truth assignment (default: <scene>/gt_assignment.json).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Directory with `cluster_<k>.ply` reconstructions.
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn run_synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let params = SynthParams {
        n_objects: args.objects,
        n_views: args.views,
        image_size: args.size,
        radius_range: (args.radius_min, args.radius_max),
        seed,
    };
    let mut scene = synth::generate(&params)?;
    if args.resolution != synth::GRID_RESOLUTION {
        if args.resolution == 0 {
            bail!("resolution must be positive");
        }
        scene.grid = synth::grid_for(&scene.spheres, args.resolution);
    }
    synth::write_synthetic(&scene, &args.out)?;
    if args.proposals {
        io::save_proposals(&synth::make_proposals(&scene.scene, seed), &args.out)?;
    }
    info!(
        "wrote {} objects in {} views to {}",
        args.objects,
        args.views,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct MatchDiagnostics {
    baseline: &'static str,
    seed: u64,
    nodes: usize,
    k_opt: usize,
    clusters: usize,
    objective: f64,
    size_std: f64,
    table: Vec<KDiagnostics>,
    epipole_inside: Vec<(u32, u32)>,
    degenerate_bands: Vec<(usize, u32)>,
}

fn run_match(args: &MatchArgs, seed: u64) -> Result<()> {
    let scene = args.scene.load()?;
    let graph = match args.baseline {
        Baseline::Band => build_graph(&scene, &args.band.params(seed)?)?,
        Baseline::Point => point_baseline_match(&scene)?,
    };
    let selection = cluster_scene(&graph, args.cluster.k, &args.cluster.options(seed)?)?;
    fs::create_dir_all(&args.out)?;
    io::save_assignment(&selection.assignment, &scene, &args.out.join("assignment.json"))?;
    if args.dump_graph {
        fs::write(args.out.join("graph.csv"), graph.to_csv())?;
    }
    let diagnostics = MatchDiagnostics {
        baseline: match args.baseline {
            Baseline::Band => "band",
            Baseline::Point => "point",
        },
        seed,
        nodes: scene.node_count(),
        k_opt: selection.k_opt,
        clusters: selection.assignment.k(),
        objective: selection.objective,
        size_std: selection.size_std,
        table: selection.table,
        epipole_inside: graph.epipole_inside.clone(),
        degenerate_bands: graph.degenerate_bands.clone(),
    };
    write_json(&args.out.join("diagnostics.json"), &diagnostics)?;
    info!("{} nodes in {} clusters", scene.node_count(), diagnostics.clusters);
    Ok(())
}

fn run_refine(args: &RefineArgs, seed: u64) -> Result<()> {
    let cameras = io::load_cameras(&args.scene.join(synth::CAMERAS_FILE))?;
    let base = SceneManifest::new(cameras, Vec::new())?;
    let manifest = args
        .proposals
        .clone()
        .unwrap_or_else(|| args.scene.join("proposals.json"));
    let proposals = io::load_proposals(&manifest)?;
    let opts = RefineOptions {
        rounds: args.rounds,
        nms_init: args.nms_init,
        nms: args.nms,
        matching: args.band.params(seed)?,
        k_mode: args.cluster.k,
        symnmf: args.cluster.options(seed)?,
    };
    let outcome = refine(&base, &proposals, &opts)?;
    fs::create_dir_all(&args.out)?;
    io::save_cameras(outcome.scene.cameras(), &args.out.join(synth::CAMERAS_FILE))?;
    io::save_label_images(&outcome.scene, &args.out.join(synth::MASK_DIR))?;
    io::save_assignment(&outcome.assignment, &outcome.scene, &args.out.join("assignment.json"))?;
    io::save_proposals(&outcome.proposals, &args.out)?;
    info!(
        "kept {} of {} proposals in {} clusters",
        outcome.proposals.len(),
        proposals.len(),
        outcome.assignment.k()
    );
    Ok(())
}

#[derive(Serialize)]
struct ClusterSummary {
    cluster_id: usize,
    members: usize,
    points: usize,
    low_confidence: bool,
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let scene = args.scene.load()?;
    let assignment_path = args
        .assignment
        .clone()
        .unwrap_or_else(|| args.scene.scene.join("assignment.json"));
    let assignment = io::load_assignment(&assignment_path, &scene)?;
    let grid_path = args
        .grid
        .clone()
        .unwrap_or_else(|| args.scene.scene.join(synth::GRID_FILE));
    let grid: GridSpec = synth::load_grid(&grid_path)?;
    let recs = reconstruct_all(&assignment, &scene, &grid, args.threshold)?;
    fs::create_dir_all(&args.out)?;
    let sizes = assignment.sizes();
    let mut summary = Vec::new();
    for (&id, rec) in &recs {
        rec.cloud.save_ply(&args.out.join(format!("cluster_{id}.ply")))?;
        if args.save_grids {
            rec.grid.save_raw(
                &args.out.join(format!("cluster_{id}.raw")),
                &args.out.join(format!("cluster_{id}.json")),
            )?;
        }
        summary.push(ClusterSummary {
            cluster_id: id,
            members: sizes[id],
            points: rec.cloud.len(),
            low_confidence: rec.low_confidence,
        });
    }
    write_json(&args.out.join("reconstruction.json"), &summary)?;
    Ok(())
}

/// Concatenates every file in `dir` named `<prefix><n>.ply`.
fn load_clouds(dir: &Path, prefix: &str) -> Result<PointCloud> {
    let mut files: Vec<(usize, PathBuf)> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let n = p
                .file_name()?
                .to_str()?
                .strip_prefix(prefix)?
                .strip_suffix(".ply")?
                .parse()
                .ok()?;
            Some((n, p))
        })
        .collect();
    files.sort();
    let mut cloud = PointCloud::default();
    for (_, path) in files {
        cloud.extend(&PointCloud::load_ply(&path)?);
    }
    Ok(cloud)
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let scene = args.scene.load()?;
    let dir = &args.scene.scene;
    let est = io::load_assignment(
        &args.assignment.clone().unwrap_or_else(|| dir.join("assignment.json")),
        &scene,
    )?;
    let gt = io::load_assignment(
        &args.gt.clone().unwrap_or_else(|| dir.join(synth::GT_ASSIGNMENT_FILE)),
        &scene,
    )?;
    let s_match = purity(&est, &gt)?;
    let e_k_abs = est.k().abs_diff(gt.k()) as f64;
    let (chamfer_d, normalized) = match &args.recon {
        Some(recon) => {
            let estimate = load_clouds(recon, "cluster_")?;
            let truth = load_clouds(dir, "gt_cloud_")?;
            let d = chamfer(&estimate, &truth)?;
            let scale = synth::load_scale(&dir.join(synth::SCALE_FILE))?.scale;
            (Some(d), Some(normalize_error(d, scale)?))
        }
        None => (None, None),
    };
    let report = EvalReport {
        s_match: Some(s_match),
        e_k_abs: Some(e_k_abs),
        chamfer: chamfer_d,
        chamfer_normalized: normalized,
    };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Synth(a) => run_synth(a, cli.seed),
        Command::Match(a) => run_match(a, cli.seed),
        Command::Refine(a) => run_refine(a, cli.seed),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Evaluate(a) => run_evaluate(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let cli = Cli::parse_from(args);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
