//! Command-line operator surface: phantom generation, training, rendering,
//! evaluation, volume export, benchmarking, and scripted ablations.
//!
//! Every command is driven by a JSON run config (unknown keys rejected)
//! with per-field flag overrides, and emits machine-readable artifacts:
//! binary stacks/checkpoints/volumes plus TSV metric tables.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use slicesplat::experiments::{
    self, run_ablation, run_render_benchmark, AblationSuite, BenchSpec, RunConfig,
};
use slicesplat::io;
use slicesplat::model::{sigmoid, GaussianCloud, SweepAxis};
use slicesplat::objectives::LossSpec;
use slicesplat::phantom::{make_phantom, sample_sweep};
use slicesplat::rasterizer::{render_sweep, RenderOptions};
use slicesplat::trainer::{self, evaluate, TrainConfig};

#[derive(Parser)]
#[command(name = "slicesplat", version, about)]
struct Cli {
    /// Cap the worker thread count (default: SLICESPLAT_THREADS env var or
    /// all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom and extract angular sweep stacks.
    Phantom(PhantomArgs),
    /// Fit a Gaussian cloud to a slice stack.
    Train(TrainArgs),
    /// Render a checkpoint onto a stack's slice planes.
    Render(RenderArgs),
    /// Score a checkpoint against a stack, per slice and aggregate.
    Eval(EvalArgs),
    /// Sample a checkpoint onto a dense voxel grid.
    ExportVolume(ExportVolumeArgs),
    /// Measure rendering speed across Gaussian counts.
    Bench(BenchArgs),
    /// Run a scripted ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigOpt {
    /// JSON run config; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(opt: &ConfigOpt) -> anyhow::Result<RunConfig> {
    match &opt.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            Ok(RunConfig::from_json(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Output directory; one stack subdirectory per sweep axis.
    #[arg(long)]
    out: PathBuf,
    /// Which sweeps to extract.
    #[arg(long, default_value = "sagittal")]
    axes: AxesArg,
    #[arg(long)]
    n_slices: Option<usize>,
    /// Slice resolution (pixels per side).
    #[arg(long)]
    side: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AxesArg {
    Sagittal,
    Transversal,
    Both,
}

impl AxesArg {
    fn list(self) -> Vec<SweepAxis> {
        match self {
            AxesArg::Sagittal => vec![SweepAxis::Sagittal],
            AxesArg::Transversal => vec![SweepAxis::Transversal],
            AxesArg::Both => vec![SweepAxis::Sagittal, SweepAxis::Transversal],
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Training stack directory.
    #[arg(long)]
    stack: PathBuf,
    /// Output directory for checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed (mandatory unless the config's train section carries one).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Loss kind: l1, l2, ssim, psnr, ncc, hybrid_l1, hybrid_ssim.
    #[arg(long)]
    loss: Option<String>,
    /// Mahalanobis-squared culling threshold; "exact" disables culling.
    #[arg(long)]
    cutoff: Option<String>,
    /// Enable or disable density control regardless of config.
    #[arg(long)]
    density: Option<bool>,
    #[arg(long)]
    metrics_interval: Option<usize>,
    /// Write intermediate checkpoints every N epochs into --out.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    /// Start from an existing checkpoint's cloud (fresh optimizer).
    #[arg(long)]
    init_cloud: Option<PathBuf>,
    /// Resume an interrupted run from a checkpoint with trainer state.
    #[arg(long, conflicts_with = "init_cloud")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stack supplying the slice poses (and comparison targets).
    #[arg(long)]
    stack: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Additionally export 8-bit PNGs (lossy, for inspection only).
    #[arg(long)]
    png: bool,
    /// Culling threshold; "exact" disables culling (default).
    #[arg(long)]
    cutoff: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stack: PathBuf,
    /// Metric table destination (TSV); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write parameter-distribution histogram tables next to --out.
    #[arg(long)]
    histograms: bool,
    #[arg(long)]
    cutoff: Option<String>,
}

#[derive(Args)]
struct ExportVolumeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Bounds as x,y,z (defaults to the cloud's reach).
    #[arg(long, value_delimiter = ',')]
    min: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    max: Option<Vec<f64>>,
    /// Grid resolution per axis.
    #[arg(long, value_delimiter = ',', default_value = "128,128,128")]
    res: Vec<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Gaussian counts to benchmark.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    side: Option<usize>,
    /// Timing table destination (TSV); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Suite name: loss, init, slices, gaussians, density.
    #[arg(long)]
    suite: String,
    /// Results directory (combined table + per-experiment artifacts).
    #[arg(long)]
    out: PathBuf,
    /// Slice or per-slice Gaussian counts for the sweep suites.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_cutoff(raw: &str) -> anyhow::Result<RenderOptions> {
    if raw.eq_ignore_ascii_case("exact") {
        return Ok(RenderOptions::exact());
    }
    let v: f64 = raw
        .parse()
        .with_context(|| format!("--cutoff expects a number or 'exact', got '{raw}'"))?;
    Ok(RenderOptions::with_cutoff(v))
}

fn render_opts_from(cutoff: &Option<String>) -> anyhow::Result<RenderOptions> {
    match cutoff {
        Some(raw) => parse_cutoff(raw),
        None => Ok(RenderOptions::exact()),
    }
}

fn cmd_phantom(args: &PhantomArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(n) = args.n_slices {
        cfg.sweep.n_slices = n;
    }
    if let Some(side) = args.side {
        cfg.sweep.width = side;
        cfg.sweep.height = side;
    }
    let vol = make_phantom(&cfg.phantom)?;
    for axis in args.axes.list() {
        let spec = cfg.sweep.to_spec(&vol, axis);
        let stack = sample_sweep(&vol, &spec)?;
        let dir = args.out.join(axis.to_string());
        io::save_stack(&stack, &dir)?;
        println!(
            "wrote {} slices ({}x{}) to {}",
            stack.len(),
            spec.grid.width,
            spec.grid.height,
            dir.display()
        );
    }
    Ok(())
}

fn effective_train_config(args: &TrainArgs, cfg: &RunConfig) -> anyhow::Result<TrainConfig> {
    let mut train = match (&cfg.train, args.seed) {
        (Some(t), _) => t.clone(),
        (None, Some(seed)) => TrainConfig::new(seed),
        (None, None) => {
            bail!("a seed is mandatory for training: pass --seed or a config with a train section")
        }
    };
    if let Some(seed) = args.seed {
        train.seed = seed;
    }
    if let Some(e) = args.epochs {
        train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(loss) = &args.loss {
        train.loss = LossSpec::new(loss.parse()?);
    }
    if let Some(raw) = &args.cutoff {
        train.render = parse_cutoff(raw)?;
    }
    match args.density {
        Some(true) => {
            train.density.get_or_insert_with(Default::default);
        }
        Some(false) => train.density = None,
        None => {}
    }
    if let Some(m) = args.metrics_interval {
        train.metrics_interval = m;
    }
    if let Some(c) = args.checkpoint_interval {
        train.checkpoint_interval = c;
        train.checkpoint_dir = Some(args.out.clone());
    }
    Ok(train)
}

fn write_report(out: &Path, report: &trainer::TrainReport) -> anyhow::Result<()> {
    let path = out.join("report.json");
    let doc = serde_json::json!({
        "config": serde_json::from_str::<serde_json::Value>(&report.config_echo)?,
        "start_epoch": report.start_epoch,
        "epochs": report.epoch_stats,
        "density_events": report.density_events,
        "total_seconds": report.total_seconds,
        "gaussians": report.final_cloud.len(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let stack = io::load_stack(&args.stack)?;
    std::fs::create_dir_all(&args.out)?;

    let report = if let Some(resume_path) = &args.resume {
        let ckpt = io::load_cloud(resume_path)?;
        trainer::resume(&stack, &ckpt)?
    } else {
        let train_cfg = effective_train_config(args, &cfg)?;
        let init_cloud = match &args.init_cloud {
            Some(path) => io::load_cloud(path)?.cloud,
            None => experiments::build_init_cloud(&stack, &cfg.init, train_cfg.seed)?,
        };
        trainer::train(&stack, &init_cloud, &train_cfg)?
    };

    let ckpt_path = args.out.join("checkpoint.bin");
    io::save_cloud(
        &ckpt_path,
        &report.final_cloud,
        Some(&report.state.to_bytes()),
        Some(&report.config_echo),
    )?;
    write_report(&args.out, &report)?;

    let last = report.epoch_stats.last().expect("at least one epoch");
    match &last.metrics {
        Some(m) => println!(
            "trained {} epochs: loss {:.6}, SSIM {:.4}, L1 {:.6} ({}s)",
            last.epoch, last.loss, m.ssim, m.mae, report.total_seconds as u64
        ),
        None => println!(
            "trained {} epochs: loss {:.6} ({}s)",
            last.epoch, last.loss, report.total_seconds as u64
        ),
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> anyhow::Result<()> {
    let ckpt = io::load_cloud(&args.checkpoint)?;
    let stack = io::load_stack(&args.stack)?;
    let opts = render_opts_from(&args.cutoff)?;
    let images = render_sweep(&ckpt.cloud, &stack.poses, &stack.grid, &opts)?;

    let mut rendered = stack.clone();
    rendered.images = images
        .iter()
        .map(|img| img.iter().map(|&v| v as f32).collect())
        .collect();
    io::save_stack(&rendered, &args.out)?;
    if args.png {
        let png_dir = args.out.join("png");
        std::fs::create_dir_all(&png_dir)?;
        for (k, img) in images.iter().enumerate() {
            let buf = image::GrayImage::from_fn(
                stack.grid.width as u32,
                stack.grid.height as u32,
                |x, y| {
                    let v = img[y as usize * stack.grid.width + x as usize];
                    image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
                },
            );
            buf.save(png_dir.join(format!("slice_{k:04}.png")))?;
        }
    }
    println!("rendered {} slices to {}", stack.len(), args.out.display());
    Ok(())
}

fn metric_table(report: &trainer::EvalReport) -> String {
    let mut out = String::from("slice_index\tMAE\tMSE\tPSNR\tSSIM\tNCC\n");
    for (k, m) in report.per_slice.iter().enumerate() {
        out.push_str(&format!(
            "{k}\t{:.8}\t{:.8}\t{:.4}\t{:.6}\t{:.6}\n",
            m.mae, m.mse, m.psnr, m.ssim, m.ncc
        ));
    }
    let m = &report.mean;
    out.push_str(&format!(
        "mean\t{:.8}\t{:.8}\t{:.4}\t{:.6}\t{:.6}\n",
        m.mae, m.mse, m.psnr, m.ssim, m.ncc
    ));
    out
}

fn histogram_tsv(values: &[f64], bins: usize) -> String {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || lo == hi {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut out = String::from("bin_lo\tbin_hi\tcount\n");
    for (b, c) in counts.iter().enumerate() {
        out.push_str(&format!(
            "{:.6}\t{:.6}\t{c}\n",
            lo + b as f64 * width,
            lo + (b + 1) as f64 * width
        ));
    }
    out
}

fn write_histograms(dir: &Path, cloud: &GaussianCloud) -> anyhow::Result<()> {
    let intensities: Vec<f64> = cloud.intensities.clone();
    let opacities: Vec<f64> = cloud.opacity_logits.iter().map(|&l| sigmoid(l)).collect();
    let scales: Vec<f64> = cloud.log_scales.iter().map(|&s| s.exp()).collect();
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("intensity_hist.tsv"),
        histogram_tsv(&intensities, 32),
    )?;
    std::fs::write(dir.join("opacity_hist.tsv"), histogram_tsv(&opacities, 32))?;
    std::fs::write(dir.join("scale_hist.tsv"), histogram_tsv(&scales, 32))?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = io::load_cloud(&args.checkpoint)?;
    let stack = io::load_stack(&args.stack)?;
    let opts = render_opts_from(&args.cutoff)?;
    let report = evaluate(&ckpt.cloud, &stack, &opts)?;
    let table = metric_table(&report);
    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, &table)?;
            if args.histograms {
                let dir = path.parent().unwrap_or(Path::new("."));
                write_histograms(dir, &ckpt.cloud)?;
            }
        }
        None => {
            print!("{table}");
            if args.histograms {
                write_histograms(Path::new("."), &ckpt.cloud)?;
            }
        }
    }
    Ok(())
}

fn cmd_export_volume(args: &ExportVolumeArgs) -> anyhow::Result<()> {
    if args.res.len() != 3 {
        bail!("--res expects three comma-separated values");
    }
    for v in [&args.min, &args.max].into_iter().flatten() {
        if v.len() != 3 {
            bail!("--min/--max expect three comma-separated values");
        }
    }
    let ckpt = io::load_cloud(&args.checkpoint)?;
    let cloud = &ckpt.cloud;
    let bounds = match (&args.min, &args.max) {
        (Some(lo), Some(hi)) => ([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]]),
        (None, None) => {
            if cloud.is_empty() {
                bail!("empty cloud: pass explicit --min/--max bounds");
            }
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            let mut max_scale = 0.0f64;
            for g in 0..cloud.len() {
                let m = cloud.mean(g);
                let s = cloud.log_scale(g);
                for k in 0..3 {
                    lo[k] = lo[k].min(m[k]);
                    hi[k] = hi[k].max(m[k]);
                    max_scale = max_scale.max(s[k].exp());
                }
            }
            let margin = 3.0 * max_scale;
            for k in 0..3 {
                lo[k] -= margin;
                hi[k] += margin;
            }
            (lo, hi)
        }
        _ => bail!("--min and --max must be given together"),
    };
    let res = [args.res[0], args.res[1], args.res[2]];
    let vol = io::export_volume(cloud, bounds, res)?;
    io::save_volume(&args.out, &vol)?;
    println!(
        "exported {}x{}x{} volume to {}",
        res[0],
        res[1],
        res[2],
        args.out.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    let mut spec = match &args.config.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<BenchSpec>(&text)?
        }
        None => BenchSpec::default(),
    };
    if let Some(counts) = &args.counts {
        spec.counts = counts.clone();
    }
    if let Some(it) = args.iterations {
        spec.iterations = it;
    }
    if let Some(side) = args.side {
        spec.width = side;
        spec.height = side;
    }
    let report = run_render_benchmark(&spec)?;
    let tsv = report.to_tsv();
    match &args.out {
        Some(path) => std::fs::write(path, &tsv)?,
        None => print!("{tsv}"),
    }
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let mut base = load_config(&args.config)?;
    if base.train.is_none() {
        let seed = args
            .seed
            .ok_or_else(|| anyhow::anyhow!("ablation needs --seed or a config train section"))?;
        base.train = Some(TrainConfig::new(seed));
    }
    if let Some(seed) = args.seed {
        base.train.as_mut().unwrap().seed = seed;
    }
    let suite: AblationSuite = match args.suite.as_str() {
        "loss" => experiments::loss_ablation(base),
        "init" => experiments::init_ablation(base),
        "slices" => {
            let counts = args.counts.clone().unwrap_or_else(|| vec![10, 20, 40, 80]);
            experiments::slice_density_ablation(base, &counts)
        }
        "gaussians" => {
            let counts = args
                .counts
                .clone()
                .unwrap_or_else(|| vec![30, 60, 120, 240]);
            experiments::gaussian_count_ablation(base, &counts)
        }
        "density" => experiments::density_control_ablation(base),
        other => bail!("unknown suite '{other}' (expected loss, init, slices, gaussians, density)"),
    };
    let table = run_ablation(&suite, Some(&args.out))?;
    print!("{}", table.to_tsv());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("SLICESPLAT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    let result = match &cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::Train(args) => cmd_train(args),
        Command::Render(args) => cmd_render(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportVolume(args) => cmd_export_volume(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
