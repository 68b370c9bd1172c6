use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cloudfill_core::cloudsim::{apply_mask, generate_mask, CloudGenConfig};
use cloudfill_core::dataio::{write_synthetic_dataset, Dataset, TileSample, N_MSI_BANDS, TILE};
use cloudfill_core::evalmetrics::{save_metrics_csv, write_metrics_csv, EvalReport};
use cloudfill_core::gradsuite::{op_checks, run_suite, SuiteOptions};
use cloudfill_core::render::{render_mosaic, save_png, RenderRow, RenderSpec};
use cloudfill_core::tensor::io::write_tensor;
use cloudfill_core::trainer::{evaluate, evaluate_baseline, run_matrix, train, EvalSet, RunConfig};
use cloudfill_core::vit::{load_params, reconstruct, ModelParams, Variant};

#[derive(Parser, Debug)]
#[command(name = "cloudfill", version, about = "Cloud-gap reconstruction for MSI/SAR time series")]
struct Cli {
    /// Seed for data synthesis, cloud masks or training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic scenes and a manifest to --out.
    SynthData {
        #[arg(long, default_value_t = 4)]
        n_scenes: usize,
        #[arg(long, default_value_t = 120)]
        height: usize,
        #[arg(long, default_value_t = 120)]
        width: usize,
    },
    /// Write one synthetic cloud mask tensor to --out.
    MakeClouds {
        #[arg(long, default_value_t = 10)]
        n_clouds: usize,
        #[arg(long, default_value_t = 6)]
        frames: usize,
        #[arg(long, default_value_t = TILE)]
        size: usize,
    },
    /// Train the configured model; checkpoints and logs go below --out.
    Train {
        /// Dataset manifest; overrides the config.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Train every variant for n_seeds seeds and write metrics.csv.
        #[arg(long)]
        matrix: bool,
    },
    /// Evaluate a checkpoint at each cloud count; CSV to --out or stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cloud_counts: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Add interpolation-baseline rows on the same masks.
        #[arg(long)]
        baseline: bool,
    },
    /// Render inputs, targets and reconstructions of one tile as a PNG.
    Render {
        #[arg(long)]
        manifest: PathBuf,
        /// Tile id, `scene@row,col`.
        #[arg(long)]
        tile: String,
        /// Checkpoint directories, one prediction row each.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Seed of the synthetic mask; defaults to --seed, then 0.
        #[arg(long)]
        mask_seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        cloud_count: usize,
        #[arg(long, default_value_t = 2.5)]
        gain: f64,
        #[arg(long, default_value = "B4,B3,B2")]
        bands: String,
        #[arg(long, default_value_t = 2)]
        scale: u32,
    },
    /// Finite-difference check of every op and the tiny model.
    Gradcheck {
        /// Multiply analytic gradients before comparing (test hook).
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_grad: f64,
        /// Skip the full-model check (test hook).
        #[arg(long, hide = true)]
        ops_only: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::All => "all",
        }
    }

    fn tiles(self, ds: &Dataset) -> Vec<TileSample> {
        match self {
            Split::Train => ds.train.clone(),
            Split::Val => ds.val.clone(),
            Split::All => ds.all_tiles(),
        }
    }
}

fn require_out(out: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    out.clone().with_context(|| format!("--out is required: {what}"))
}

fn base_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn synth_data(cli: &Cli, n_scenes: usize, height: usize, width: usize) -> Result<()> {
    let out = require_out(&cli.out, "dataset directory")?;
    if height < TILE || width < TILE {
        bail!("scenes must be at least {TILE}x{TILE}, got {height}x{width}");
    }
    let m = write_synthetic_dataset(&out, cli.seed.unwrap_or(42), n_scenes, height, width)?;
    println!("wrote {} scenes to {}", m.scenes.len(), out.join("manifest.json").display());
    Ok(())
}

fn make_clouds(cli: &Cli, n_clouds: usize, frames: usize, size: usize) -> Result<()> {
    let out = require_out(&cli.out, "mask tensor file")?;
    let base = base_config(&cli.config)?.cloud;
    let cfg = CloudGenConfig { n_clouds, seed: cli.seed.unwrap_or(0), ..base };
    cfg.validate()?;
    if frames == 0 || size == 0 {
        bail!("mask extents must be positive");
    }
    let mask = generate_mask(&cfg, frames, size, size)?;
    create_parent(&out)?;
    write_tensor(&out, mask.tensor())?;
    println!("coverage {:.4} written to {}", mask.coverage(), out.display());
    Ok(())
}

fn load_dataset(manifest: &Path, tile: usize) -> Result<Dataset> {
    Dataset::load_tiled(manifest, tile).with_context(|| format!("loading dataset {}", manifest.display()))
}

fn cmd_train(cli: &Cli, manifest: &Option<PathBuf>, matrix: bool) -> Result<()> {
    let config = cli.config.as_ref().context("--config is required for train")?;
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading config {}", config.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    let manifest = manifest.clone().or_else(|| cfg.manifest.clone()).context("no manifest: pass --manifest or set it in the config")?;
    let out = cfg.output_dir.clone().context("no output directory: pass --out or set output_dir in the config")?;
    let ds = load_dataset(&manifest, cfg.vit.image_size)?;
    if ds.train.is_empty() {
        bail!("manifest {} yields no training tiles", manifest.display());
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let start = Instant::now();
    if matrix {
        let sets = [EvalSet { split: "val".into(), tiles: ds.val.clone() }];
        let mut rows = run_matrix(&cfg, &Variant::ALL, &cfg.seeds(), &ds.train, &sets)?;
        for &cc in &cfg.eval_cloud_counts {
            rows.push(evaluate_baseline(&cfg, &ds.val, cc, "val")?);
        }
        save_metrics_csv(out.join("metrics.csv"), &rows)?;
        println!("matrix of {} rows written to {} in {:.1?}", rows.len(), out.join("metrics.csv").display(), start.elapsed());
    } else {
        let res = train(&cfg, &ds.train, &ds.val)?;
        let last = res.log.steps.last().expect("at least one step");
        println!(
            "{} seed {}: {} steps, final loss {:.5}, {:.1?}; outputs in {}",
            cfg.vit.variant,
            cfg.seed,
            last.step,
            last.loss,
            start.elapsed(),
            cfg.run_dir().expect("output set").display()
        );
    }
    Ok(())
}

/// Parameters and the training seed recorded with them.
fn load_model(dir: &Path) -> Result<(ModelParams, Option<u64>)> {
    let (params, extra) = load_params(dir, None).with_context(|| format!("reading checkpoint {}", dir.display()))?;
    Ok((params, extra.get("seed").and_then(|v| v.as_u64())))
}

fn cmd_eval(cli: &Cli, checkpoint: &Path, manifest: &Path, counts: &Option<Vec<usize>>, split: Split, baseline: bool) -> Result<()> {
    let mut cfg = base_config(&cli.config)?;
    let (params, seed) = load_model(checkpoint)?;
    cfg.vit = params.cfg.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let counts = counts.clone().unwrap_or_else(|| cfg.eval_cloud_counts.clone());
    if counts.is_empty() {
        bail!("no cloud counts to evaluate");
    }
    let ds = load_dataset(manifest, cfg.vit.image_size)?;
    let tiles = split.tiles(&ds);
    if tiles.is_empty() {
        bail!("split {} of {} has no tiles", split.label(), manifest.display());
    }
    let mut rows: Vec<EvalReport> = Vec::new();
    for &cc in &counts {
        rows.push(evaluate(&params, &cfg, &tiles, cc, split.label())?);
        if baseline {
            rows.push(evaluate_baseline(&cfg, &tiles, cc, split.label())?);
        }
    }
    match &cli.out {
        Some(out) => {
            create_parent(out)?;
            save_metrics_csv(out, &rows)?;
        }
        None => write_metrics_csv(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_render(
    cli: &Cli,
    manifest: &Path,
    tile_id: &str,
    checkpoints: &[PathBuf],
    mask_seed: Option<u64>,
    cloud_count: usize,
    gain: f64,
    bands: &str,
    scale: u32,
) -> Result<()> {
    let out = require_out(&cli.out, "PNG file")?;
    let spec = RenderSpec { bands: RenderSpec::parse_bands(bands)?, gain, scale };
    spec.validate()?;
    let models = checkpoints.iter().map(|c| load_model(c).map(|m| m.0)).collect::<Result<Vec<_>>>()?;
    let size = models.first().map_or(TILE, |m| m.cfg.image_size);
    if let Some(m) = models.iter().find(|m| m.cfg.image_size != size) {
        bail!("checkpoints disagree on image size ({} vs {size})", m.cfg.image_size);
    }
    let ds = load_dataset(manifest, size)?;
    let tile = ds
        .all_tiles()
        .into_iter()
        .find(|t| t.id() == tile_id)
        .with_context(|| format!("tile {tile_id} not found in {}", manifest.display()))?;
    let cloud = CloudGenConfig { n_clouds: cloud_count, seed: mask_seed.or(cli.seed).unwrap_or(0), ..base_config(&cli.config)?.cloud };
    let mask = generate_mask(&cloud, tile.n_msi_frames(), size, size)?;
    let mut rows = vec![
        RenderRow { label: "Inputs".into(), frames: apply_mask(&tile.msi, &mask)?, black: None },
        RenderRow { label: "Targets".into(), frames: tile.msi.clone(), black: Some(tile.real_cloud.clone()) },
    ];
    for m in &models {
        let pred = reconstruct(m, &tile, &mask)?.reshape([tile.n_msi_frames(), N_MSI_BANDS, size, size])?;
        let mut label = m.cfg.variant.to_string();
        if models.iter().filter(|o| o.cfg.variant == m.cfg.variant).count() > 1 {
            label = format!("{label} #{}", rows.len() - 1);
        }
        rows.push(RenderRow { label, frames: pred, black: None });
    }
    let img = render_mosaic(&spec, &rows, &tile.msi_days)?;
    create_parent(&out)?;
    save_png(&img, &out)?;
    println!("{} rows x {} frames written to {}", rows.len(), tile.n_msi_frames(), out.display());
    Ok(())
}

fn cmd_gradcheck(corrupt: f64, ops_only: bool) -> Result<bool> {
    let start = Instant::now();
    let opts = SuiteOptions { corrupt, ..Default::default() };
    let results = if ops_only { op_checks(opts)? } else { run_suite(opts)? };
    println!("{:<24} {:>12} {:>9}  status", "check", "max_rel_err", "elements");
    for r in &results {
        println!("{:<24} {:>12.3e} {:>9}  {}", r.name, r.max_rel_err, r.n_checked, if r.passed() { "ok" } else { "FAIL" });
    }
    let ok = results.iter().all(|r| r.passed());
    println!("{} in {:.1?}", if ok { "all checks passed" } else { "gradient check FAILED" }, start.elapsed());
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::SynthData { n_scenes, height, width } => synth_data(cli, *n_scenes, *height, *width)?,
        Cmd::MakeClouds { n_clouds, frames, size } => make_clouds(cli, *n_clouds, *frames, *size)?,
        Cmd::Train { manifest, matrix } => cmd_train(cli, manifest, *matrix)?,
        Cmd::Eval { checkpoint, manifest, cloud_counts, split, baseline } => {
            cmd_eval(cli, checkpoint, manifest, cloud_counts, *split, *baseline)?
        }
        Cmd::Render { manifest, tile, checkpoints, mask_seed, cloud_count, gain, bands, scale } => {
            cmd_render(cli, manifest, tile, checkpoints, *mask_seed, *cloud_count, *gain, bands, *scale)?
        }
        Cmd::Gradcheck { corrupt_grad, ops_only } => return cmd_gradcheck(*corrupt_grad, *ops_only),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
