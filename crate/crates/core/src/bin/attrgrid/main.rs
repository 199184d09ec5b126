//! Command-line front end: baking, voxelizing, projection, training,
//! sampling, segmentation and evaluation over the crate's file formats.

mod selftest;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attrgrid::assets::{sphere_asset, Asset};
use attrgrid::dit::{self, condition_from_grid, dit_samples, Dit, DitConfig, DitTrainer, PatchMeanExtractor};
use attrgrid::grid::{read_grid, voxelize_surface, write_grid, QueryOptions, Span, SparseAttributeGrid};
use attrgrid::mesh::TriMesh;
use attrgrid::pruning::OccupancyPyramid;
use attrgrid::render::{render_position_map, OrthoCamera};
use attrgrid::segment::{
    merge_regions, miou, part_texture, read_mask_set, read_parts, segment_mesh, write_mask_set, write_parts,
    ColorHistogram,
};
use attrgrid::uv::{bake_position_map, bake_texture, dilate_texture, read_png, read_posmap, write_png, write_posmap};
use attrgrid::vae::{AssetPlan, Vae, VaeConfig, VaeTrainer, STAGES};
use attrgrid::{Error, Result};

#[derive(Parser)]
#[command(name = "attrgrid", version, about = "Sparse attribute grids: bake, train, sample, segment")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a mesh's UV layout into a position map.
    BakePosmap {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        size: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Orthographic first-hit position map of a mesh.
    RenderPosmap {
        #[arg(long)]
        mesh: PathBuf,
        /// +x, -x, +y, -y, +z, -z or "dx,dy,dz" (the side the camera sits on).
        #[arg(long, default_value = "+z", allow_hyphen_values = true)]
        view: String,
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        size: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Occupancy-only grid of the voxels a mesh surface touches.
    Voxelize {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        res: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Splat an image into a grid through a view position map.
    Project {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        posmap: PathBuf,
        #[arg(long)]
        res: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a grid at every texel of a position map and write a PNG.
    BakeTexture {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        posmap: PathBuf,
        #[arg(long, default_value = "color")]
        span: String,
        #[arg(long, default_value_t = 0)]
        dilate: usize,
        /// Divide by the present corner weight instead of zero-filling.
        #[arg(long)]
        renormalize: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overfit the attribute VAE on one asset.
    TrainVae(TrainVaeArgs),
    /// Train the flow transformer on VAE latents of one or more assets.
    TrainDit(TrainDitArgs),
    /// Sample a grid from a condition image.
    Sample(SampleArgs),
    /// Per-face part ids from a grid's semantic channels.
    Segment {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write a part-colored UV texture (mesh needs UVs).
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long, default_value_t = 512)]
        texture_size: u32,
    },
    /// Class-agnostic mIoU of two part lists on a mesh.
    EvalMiou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
    },
    /// Merge over-segmented 2D region masks by feature similarity.
    MergeMasks {
        /// JSON sidecar listing the views.
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        /// Output folder for merged masks and their sidecar.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suite and print a pass/fail table.
    Selftest,
}

#[derive(Args)]
struct TrainVaeArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training grid; defaults to a procedural colored sphere.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Mesh for render supervision (required with --grid for the render loss).
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the loss every N steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainDitArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained VAE checkpoint whose posterior means are the targets.
    #[arg(long)]
    vae: PathBuf,
    /// Training grids, paired in order with --mesh. Defaults to procedural spheres.
    #[arg(long)]
    grid: Vec<PathBuf>,
    #[arg(long)]
    mesh: Vec<PathBuf>,
    /// Number of procedural spheres when no grids are given.
    #[arg(long, default_value_t = 5)]
    assets: u32,
    /// Condition render size.
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    dit: PathBuf,
    /// Condition grid from `project`.
    #[arg(long)]
    cond: PathBuf,
    /// The front image the condition grid was projected from.
    #[arg(long)]
    image: PathBuf,
    /// Target mesh: fixes the latent support and the decoder occupancy.
    /// Without it the support is the condition's and the decoder prunes freely.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Optional TOML with `sample_steps`, `guidance`, `seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "cfg")]
    guidance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn size2(v: &[u32]) -> Result<(u32, u32)> {
    match v {
        [w, h] => Ok((*w, *h)),
        _ => Err(Error::InvalidInput("--size needs W H".into())),
    }
}

fn load_grid(path: &Path) -> Result<SparseAttributeGrid> {
    read_grid(BufReader::new(File::open(path)?))
}

fn save_grid(path: &Path, grid: &SparseAttributeGrid) -> Result<()> {
    write_grid(BufWriter::new(File::create(path)?), grid)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

fn train_vae(a: TrainVaeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => VaeConfig::from_toml(&read_text(p)?)?,
        None => VaeConfig::default(),
    };
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let (grid, mesh) = match &a.grid {
        Some(g) => (load_grid(g)?, a.mesh.as_deref().map(TriMesh::load_obj).transpose()?),
        None => {
            let asset = sphere_asset(cfg.resolution, 0.17, 0)?;
            (asset.grid, Some(asset.mesh))
        }
    };
    let vae = Vae::new(cfg.clone(), cfg.seed)?;
    let plan = AssetPlan::new(&vae, &grid, mesh.as_ref())?;
    let mut tr = VaeTrainer::new(vae, cfg.seed);
    for i in 0..cfg.steps {
        let r = tr.train_step(&plan)?;
        if a.log_every > 0 && (i % a.log_every == 0 || i + 1 == cfg.steps) {
            println!("step {:5}  total {:.5}  recon {:.5}  prune {:.5}  kl {:.3}", r.step, r.total, r.recon, r.prune, r.kl);
        }
    }
    let rep = tr.evaluate(&plan)?;
    println!(
        "eval  render_l1 {:.5}  cube_mse {:.6}  prune_accuracy {:.4}",
        rep.render_l1, rep.cube_mse, rep.prune_accuracy
    );
    tr.vae.save(&a.out)
}

fn train_dit(a: TrainDitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => DitConfig::from_toml(&read_text(p)?)?,
        None => DitConfig::default(),
    };
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let vae = Vae::load(&a.vae)?;
    if vae.cfg.latent_dim != cfg.latent_dim {
        log::info!("using the VAE's latent width {}", vae.cfg.latent_dim);
        cfg.latent_dim = vae.cfg.latent_dim;
    }
    if a.grid.len() != a.mesh.len() {
        return Err(Error::InvalidInput(format!("{} grids but {} meshes", a.grid.len(), a.mesh.len())));
    }
    let assets: Vec<Asset> = if a.grid.is_empty() {
        (0..a.assets).map(|v| sphere_asset(vae.cfg.resolution, 0.17, v)).collect::<Result<_>>()?
    } else {
        a.grid
            .iter()
            .zip(&a.mesh)
            .map(|(g, m)| Ok(Asset { grid: load_grid(g)?, mesh: TriMesh::load_obj(m)? }))
            .collect::<Result<_>>()?
    };
    let data = dit_samples(&vae, &assets, a.image_size)?;
    let mut tr = DitTrainer::new(Dit::new(cfg.clone(), cfg.seed)?, cfg.seed);
    for i in 0..cfg.steps {
        let r = tr.train_step(&data)?;
        if a.log_every > 0 && (i % a.log_every == 0 || i + 1 == cfg.steps) {
            println!("step {:5}  loss {:.5}  dropped {}", r.step, r.loss, r.dropped);
        }
    }
    println!("eval  loss {:.5}", dit::eval_loss(&tr.model, &data, 16, cfg.seed)?);
    tr.model.save(&a.out)
}

fn sample(a: SampleArgs) -> Result<()> {
    let base = match &a.config {
        Some(p) => DitConfig::from_toml(&read_text(p)?)?,
        None => DitConfig::default(),
    };
    let steps = a.steps.unwrap_or(base.sample_steps);
    let guidance = a.guidance.unwrap_or(base.guidance);
    let seed = a.seed.unwrap_or(base.seed);
    let vae = Vae::load(&a.vae)?;
    let model = Dit::load(&a.dit)?;
    if model.cfg.latent_dim != vae.cfg.latent_dim {
        return Err(Error::Shape(format!(
            "DiT latent width {} differs from the VAE's {}",
            model.cfg.latent_dim, vae.cfg.latent_dim
        )));
    }
    let cond_grid = load_grid(&a.cond)?;
    let front = read_png(&a.image)?;
    let res = vae.cfg.resolution;
    let occupancy = match &a.mesh {
        Some(m) => Some(voxelize_surface(&TriMesh::load_obj(m)?, res)?),
        None => None,
    };
    let support = occupancy.clone().unwrap_or_else(|| cond_grid.coords().to_vec());
    let pyramid = OccupancyPyramid::build(&support, res, STAGES)?;
    let latent = pyramid.coarsest().to_vec();
    if latent.is_empty() {
        return Err(Error::EmptyInput("no voxels to sample on"));
    }
    let cond = condition_from_grid(&cond_grid, &front, occupancy.as_deref(), &vae, &PatchMeanExtractor::default())?;
    let mut rng = attrgrid::seeded_rng(seed);
    let z = dit::sample(&model, &latent, &cond, steps, guidance, &mut rng)?;
    let decoded = vae.decode(&z, &latent, occupancy.is_some().then_some(&pyramid))?;
    println!("sampled {} latent tokens -> {} voxels", latent.len(), decoded.grid.len());
    save_grid(&a.out, &decoded.grid)
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::BakePosmap { mesh, size, out } => {
            let (w, h) = size2(&size)?;
            let (map, stats) = bake_position_map(&TriMesh::load_obj(mesh)?, w, h)?;
            println!("{} of {} texels covered, {} degenerate faces", map.valid_count(), map.len(), stats.skipped_degenerate);
            write_posmap(BufWriter::new(File::create(out)?), &map)?;
        }
        Command::RenderPosmap { mesh, view, size, out } => {
            let (w, h) = size2(&size)?;
            let cam = OrthoCamera::from_view(&view, w, h)?;
            let map = render_position_map(&TriMesh::load_obj(mesh)?, &cam)?;
            println!("{} of {} pixels hit", map.valid_count(), map.len());
            write_posmap(BufWriter::new(File::create(out)?), &map)?;
        }
        Command::Voxelize { mesh, res, out } => {
            let coords = voxelize_surface(&TriMesh::load_obj(mesh)?, res)?;
            let grid = SparseAttributeGrid::occupancy(res, coords)?;
            println!("{} voxels at resolution {res}", grid.len());
            save_grid(&out, &grid)?;
        }
        Command::Project { image, posmap, res, out } => {
            let img = read_png(image)?;
            let vpm = read_posmap(BufReader::new(File::open(posmap)?))?;
            let grid = attrgrid::projection::project_image_to_grid(&img, &vpm, res)?;
            println!("{} voxels received image colors", grid.len());
            save_grid(&out, &grid)?;
        }
        Command::BakeTexture { grid, posmap, span, dilate, renormalize, out } => {
            let grid = load_grid(&grid)?;
            let map = read_posmap(BufReader::new(File::open(posmap)?))?;
            let opts = QueryOptions { fill: None, renormalize };
            let img = bake_texture(&grid, &map, Span::parse(&span)?, &opts)?;
            write_png(out, &dilate_texture(&img, dilate))?;
        }
        Command::TrainVae(a) => train_vae(a)?,
        Command::TrainDit(a) => train_dit(a)?,
        Command::Sample(a) => sample(a)?,
        Command::Segment { grid, mesh, eps, out, texture, texture_size } => {
            let grid = load_grid(&grid)?;
            let mesh = TriMesh::load_obj(mesh)?;
            let (seg, labels) = segment_mesh(&grid, &mesh, eps)?;
            let fallback = labels.fallback.iter().filter(|f| **f).count();
            println!("{} parts over {} faces ({fallback} used the nearest-voxel fallback)", seg.parts, seg.faces());
            std::fs::write(out, write_parts(&seg))?;
            if let Some(path) = texture {
                write_png(path, &part_texture(&seg, &mesh, texture_size, texture_size)?)?;
            }
        }
        Command::EvalMiou { pred, gt, mesh } => {
            let pred = read_parts(&read_text(&pred)?)?;
            let gt = read_parts(&read_text(&gt)?)?;
            let mesh = TriMesh::load_obj(mesh)?;
            println!("mIoU {:.6}", miou(&pred, &gt, &mesh.face_areas())?);
        }
        Command::MergeMasks { masks, tau, out } => {
            let (meta, set) = read_mask_set(&masks, &ColorHistogram)?;
            let merged = merge_regions(&set, tau);
            for (i, (a, b)) in set.views.iter().zip(&merged.views).enumerate() {
                println!("view {i}: {} -> {} regions", a.regions(), b.regions());
            }
            // Image paths in the new sidecar stay valid relative to `out`.
            let src = masks.parent().unwrap_or(Path::new("."));
            let images: Vec<String> = meta
                .views
                .iter()
                .map(|v| std::path::absolute(src.join(&v.image)).map(|p| p.display().to_string()))
                .collect::<std::io::Result<_>>()?;
            write_mask_set(&out, &merged, &images)?;
        }
        Command::Selftest => return Ok(selftest::run()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
