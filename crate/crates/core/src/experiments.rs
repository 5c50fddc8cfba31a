//! Declarative run configuration and scripted ablation suites.
//!
//! [`RunConfig`] is the single document driving phantom generation,
//! initialization and training; the CLI parses it from JSON (unknown keys
//! rejected) and applies flag overrides. Ablation suites patch a base
//! config per experiment and collect final metrics into one table, with
//! published full-scale reference values attached as annotation columns --
//! annotations never influence pass/fail.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GaussianCloud, PixelGridSpec, SliceStack, SweepAxis};
use crate::phantom::{make_phantom, sample_sweep, Interpolation, LabelVolume, SweepSpec};
use crate::rasterizer::{render_sweep, RenderOptions};
use crate::seeding::{init_on_slice, init_uniform, InitConfig, InitStrategy};
use crate::trainer::{train, TrainConfig, TrainReport};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Sweep-extraction settings as they appear in config documents (angles in
/// degrees; extent defaults to covering the volume).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub angle_range_deg: [f64; 2],
    pub n_slices: usize,
    pub width: usize,
    pub height: usize,
    /// `[a_x, b_x, a_y, b_y]`; `None` covers the volume cross-section.
    pub extent: Option<[f64; 4]>,
    pub pivot: Option<[f64; 3]>,
    pub interpolation: Interpolation,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            axis: SweepAxis::Sagittal,
            angle_range_deg: [-60.0, 60.0],
            n_slices: 100,
            width: 256,
            height: 256,
            extent: None,
            pivot: None,
            interpolation: Interpolation::Trilinear,
        }
    }
}

impl SweepConfig {
    /// Resolves against a volume, filling in the covering extent.
    pub fn to_spec(&self, vol: &LabelVolume, axis: SweepAxis) -> SweepSpec {
        let extent = self.extent.unwrap_or_else(|| {
            let h = vol.half_span();
            let r = h[0].max(h[1]).max(h[2]);
            [-r, r, -r, r]
        });
        SweepSpec {
            axis,
            angle_range: [
                self.angle_range_deg[0].to_radians(),
                self.angle_range_deg[1].to_radians(),
            ],
            n_slices: self.n_slices,
            grid: PixelGridSpec {
                width: self.width,
                height: self.height,
                extent,
            },
            pivot: self.pivot,
            interpolation: self.interpolation,
        }
    }
}

/// The full declarative run document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: crate::phantom::PhantomConfig,
    pub sweep: SweepConfig,
    pub init: InitConfig,
    /// Absent for commands that do not train; the CLI requires a seed.
    pub train: Option<TrainConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: crate::phantom::PhantomConfig::default(),
            sweep: SweepConfig::default(),
            init: InitConfig::default(),
            train: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> Result<&TrainConfig> {
        self.train
            .as_ref()
            .ok_or_else(|| Error::Config("config has no train section".into()))
    }
}

/// Builds the initial cloud for a stack per the init section. Uniform-box
/// initialization draws inside the configured box, or the stack grid's
/// rotation envelope when none is given.
pub fn build_init_cloud(
    stack: &SliceStack,
    init: &InitConfig,
    seed: u64,
) -> Result<GaussianCloud> {
    match init.strategy {
        InitStrategy::OnSlice => init_on_slice(&stack.poses, &stack.grid, init),
        InitStrategy::UniformBox => {
            let bbox = init.bounding_box.unwrap_or_else(|| {
                let [ax, bx, ay, by] = stack.grid.extent;
                let r = bx.max(-ax).max(by).max(-ay).abs();
                ([-r, -r, -r], [r, r, r])
            });
            let n = init.per_slice_count * stack.len();
            init_uniform(bbox, n, init, seed)
        }
    }
}

/// Outcome of one full reconstruction run.
pub struct PipelineResult {
    pub stack: SliceStack,
    pub report: TrainReport,
}

/// Phantom -> sweep -> init -> train, the shared pipeline behind the CLI
/// and the ablation runner.
pub fn run_reconstruction(cfg: &RunConfig) -> Result<PipelineResult> {
    let train_cfg = cfg.train_config()?;
    let vol = make_phantom(&cfg.phantom)?;
    let spec = cfg.sweep.to_spec(&vol, cfg.sweep.axis);
    let stack = sample_sweep(&vol, &spec)?;
    let cloud = build_init_cloud(&stack, &cfg.init, train_cfg.seed)?;
    let report = train(&stack, &cloud, train_cfg)?;
    Ok(PipelineResult { stack, report })
}

// ---------------------------------------------------------------------------
// Ablation suites
// ---------------------------------------------------------------------------

/// One experiment: a name plus a JSON merge-patch over the base config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Experiment {
    pub name: String,
    pub patch: serde_json::Value,
}

/// Published full-scale reference metrics attached as annotations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReferenceMetrics {
    pub l1: f64,
    pub l2: Option<f64>,
    pub ssim: f64,
    pub psnr: Option<f64>,
    pub ncc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSuite {
    pub name: String,
    pub base: RunConfig,
    pub experiments: Vec<Experiment>,
}

impl AblationSuite {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.experiments {
            if !seen.insert(&e.name) {
                return Err(Error::Config(format!(
                    "duplicate experiment name '{}'",
                    e.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Final training-view metrics; `None` when the run failed.
    pub mae: Option<f64>,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ncc: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: Option<f64>,
    pub error: Option<String>,
    /// Non-binding annotation columns.
    pub reference: Option<ReferenceMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Tab-separated table with stable column order and locale-independent
    /// number formatting.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "experiment\tmae\tmse\tpsnr\tssim\tncc\tfinal_loss\tseconds\tref_l1\tref_ssim\terror\n",
        );
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.name,
                fmt(r.mae),
                fmt(r.mse),
                fmt(r.psnr),
                fmt(r.ssim),
                fmt(r.ncc),
                fmt(r.final_loss),
                fmt(r.seconds),
                fmt(r.reference.map(|m| m.l1)),
                fmt(r.reference.map(|m| m.ssim)),
                r.error.as_deref().unwrap_or("-"),
            ));
        }
        out
    }
}

fn merge_patch(base: &serde_json::Value, patch: &serde_json::Value) -> serde_json::Value {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            let mut out = b.clone();
            for (k, v) in p {
                let merged = match out.get(k) {
                    Some(existing) => merge_patch(existing, v),
                    None => v.clone(),
                };
                out.insert(k.clone(), merged);
            }
            serde_json::Value::Object(out)
        }
        _ => patch.clone(),
    }
}

/// Reference metrics for the loss comparison at full scale.
fn loss_reference(name: &str) -> Option<ReferenceMetrics> {
    let r = |l1, l2, ssim, psnr, ncc| ReferenceMetrics {
        l1,
        l2: Some(l2),
        ssim,
        psnr: Some(psnr),
        ncc: Some(ncc),
    };
    match name {
        "hybrid_ssim" => Some(r(0.0192, 0.0016, 0.8663, 27.86, 0.9791)),
        "hybrid_l1" => Some(r(0.0188, 0.0016, 0.8528, 28.07, 0.9799)),
        "l1" => Some(r(0.0198, 0.0017, 0.8197, 27.72, 0.9782)),
        "l2" => Some(r(0.0245, 0.0023, 0.7651, 26.41, 0.9699)),
        "ncc" => Some(r(3.4030, 33.7651, 0.4314, -15.28, 0.9762)),
        "psnr" => Some(r(0.0210, 0.0016, 0.8048, 27.88, 0.9792)),
        "ssim" => Some(r(0.0198, 0.0017, 0.8695, 27.61, 0.9792)),
        _ => None,
    }
}

/// Reference metrics for the initialization comparison (sagittal group).
fn init_reference(name: &str) -> Option<ReferenceMetrics> {
    match name {
        "on_slice" => Some(ReferenceMetrics {
            l1: 0.0055,
            l2: None,
            ssim: 0.9694,
            psnr: None,
            ncc: None,
        }),
        "uniform_box" => Some(ReferenceMetrics {
            l1: 0.0067,
            l2: None,
            ssim: 0.9610,
            psnr: None,
            ncc: None,
        }),
        _ => None,
    }
}

fn annotate(suite: &str, name: &str) -> Option<ReferenceMetrics> {
    match suite {
        "loss" => loss_reference(name),
        "init" => init_reference(name),
        _ => None,
    }
}

/// Runs every experiment in the suite; failures are recorded per row and
/// never abort the remaining experiments. Per-experiment artifacts (report
/// JSON) land under `out_dir` when given.
pub fn run_ablation(suite: &AblationSuite, out_dir: Option<&Path>) -> Result<AblationTable> {
    suite.validate()?;
    let base = serde_json::to_value(&suite.base).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Vec::new();
    for exp in &suite.experiments {
        let merged = merge_patch(&base, &exp.patch);
        let run: std::result::Result<PipelineResult, Error> =
            serde_json::from_value::<RunConfig>(merged)
                .map_err(|e| Error::Config(format!("experiment '{}': {e}", exp.name)))
                .and_then(|cfg| run_reconstruction(&cfg));
        let row = match run {
            Ok(result) => {
                let last = result
                    .report
                    .epoch_stats
                    .last()
                    .expect("training ran at least one epoch");
                let m = last.metrics.expect("final epoch always snapshots metrics");
                if let Some(dir) = out_dir {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    let path = dir.join(format!("{}_{}.json", suite.name, exp.name));
                    let summary = serde_json::json!({
                        "experiment": exp.name,
                        "loss_curve": result.report.epoch_stats,
                        "density_events": result.report.density_events,
                        "config": serde_json::from_str::<serde_json::Value>(&result.report.config_echo).unwrap_or_default(),
                    });
                    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap())
                        .map_err(|e| Error::io(&path, e))?;
                }
                AblationRow {
                    name: exp.name.clone(),
                    mae: Some(m.mae),
                    mse: Some(m.mse),
                    psnr: Some(m.psnr),
                    ssim: Some(m.ssim),
                    ncc: Some(m.ncc),
                    final_loss: Some(last.loss),
                    seconds: Some(result.report.total_seconds),
                    error: None,
                    reference: annotate(&suite.name, &exp.name),
                }
            }
            Err(e) => AblationRow {
                name: exp.name.clone(),
                mae: None,
                mse: None,
                psnr: None,
                ssim: None,
                ncc: None,
                final_loss: None,
                seconds: None,
                error: Some(e.to_string()),
                reference: annotate(&suite.name, &exp.name),
            },
        };
        rows.push(row);
    }
    let table = AblationTable {
        suite: suite.name.clone(),
        rows,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{}_table.tsv", suite.name));
        std::fs::write(&path, table.to_tsv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(table)
}

fn patch(value: serde_json::Value) -> serde_json::Value {
    value
}

/// Loss comparison over {l1, l2, hybrid_l1, ssim, psnr, ncc, hybrid_ssim}.
pub fn loss_ablation(base: RunConfig) -> AblationSuite {
    let kinds = [
        "l1",
        "l2",
        "ssim",
        "psnr",
        "ncc",
        "hybrid_l1",
        "hybrid_ssim",
    ];
    AblationSuite {
        name: "loss".into(),
        base,
        experiments: kinds
            .iter()
            .map(|k| Experiment {
                name: (*k).into(),
                patch: patch(serde_json::json!({"train": {"loss": {"kind": k}}})),
            })
            .collect(),
    }
}

/// On-slice vs uniform-box initialization, same seed.
pub fn init_ablation(base: RunConfig) -> AblationSuite {
    AblationSuite {
        name: "init".into(),
        base,
        experiments: vec![
            Experiment {
                name: "on_slice".into(),
                patch: patch(serde_json::json!({"init": {"strategy": "on_slice"}})),
            },
            Experiment {
                name: "uniform_box".into(),
                patch: patch(serde_json::json!({"init": {"strategy": "uniform_box"}})),
            },
        ],
    }
}

/// Reconstruction quality versus number of slices per sweep.
pub fn slice_density_ablation(base: RunConfig, counts: &[usize]) -> AblationSuite {
    AblationSuite {
        name: "slices".into(),
        base,
        experiments: counts
            .iter()
            .map(|&n| Experiment {
                name: format!("slices_{n:03}"),
                patch: patch(serde_json::json!({"sweep": {"n_slices": n}})),
            })
            .collect(),
    }
}

/// Reconstruction quality versus Gaussians per slice.
pub fn gaussian_count_ablation(base: RunConfig, per_slice: &[usize]) -> AblationSuite {
    AblationSuite {
        name: "gaussians".into(),
        base,
        experiments: per_slice
            .iter()
            .map(|&n| Experiment {
                name: format!("per_slice_{n:04}"),
                patch: patch(serde_json::json!({"init": {"per_slice_count": n}})),
            })
            .collect(),
    }
}

/// Density control on versus off, all else equal.
pub fn density_control_ablation(base: RunConfig) -> AblationSuite {
    AblationSuite {
        name: "density".into(),
        base,
        experiments: vec![
            Experiment {
                name: "without_control".into(),
                patch: patch(serde_json::json!({"train": {"density": null}})),
            },
            Experiment {
                name: "with_control".into(),
                patch: patch(serde_json::json!({"train": {"density": {}}})),
            },
        ],
    }
}

// ---------------------------------------------------------------------------
// Rendering-speed benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    /// Total Gaussian counts to benchmark.
    pub counts: Vec<usize>,
    pub width: usize,
    pub height: usize,
    pub n_slices: usize,
    /// Frames rendered per configuration.
    pub iterations: usize,
    pub seed: u64,
    pub include_exact: bool,
    pub include_cutoff: bool,
    pub cutoff_chi2: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            counts: vec![2_600, 11_200],
            width: 128,
            height: 128,
            n_slices: 8,
            iterations: 24,
            seed: 7,
            include_exact: true,
            include_cutoff: true,
            cutoff_chi2: 25.0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::InvalidArgument(
                "bench iterations must be >= 1".into(),
            ));
        }
        if self.counts.is_empty() {
            return Err(Error::InvalidArgument("bench needs at least one count".into()));
        }
        if !(self.cutoff_chi2 > 0.0) {
            return Err(Error::InvalidArgument("cutoff_chi2 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub gaussians: usize,
    pub mode: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub fps: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("gaussians\tmode\tmean_ms\tstd_ms\tfps\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.2}\n",
                r.gaussians, r.mode, r.mean_ms, r.std_ms, r.fps
            ));
        }
        out
    }

    pub fn row(&self, gaussians: usize, mode: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.gaussians == gaussians && r.mode == mode)
    }
}

/// Renders a fixed synthetic sweep repeatedly per Gaussian count and
/// reports per-frame timing.
pub fn run_render_benchmark(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let grid = PixelGridSpec {
        width: spec.width,
        height: spec.height,
        extent: [-16.0, 16.0, -16.0, 16.0],
    };
    let poses: Vec<crate::model::SlicePose> = (0..spec.n_slices)
        .map(|k| {
            let angle = if spec.n_slices == 1 {
                0.0
            } else {
                (-60.0 + 120.0 * k as f64 / (spec.n_slices - 1) as f64).to_radians()
            };
            crate::model::pose_from_6d(&crate::phantom::sweep_pose(
                SweepAxis::Sagittal,
                angle,
                [0.0, 0.0, -16.0],
            ))
            .unwrap()
        })
        .collect();

    let mut modes: Vec<(String, RenderOptions)> = Vec::new();
    if spec.include_exact {
        modes.push(("exact".into(), RenderOptions::exact()));
    }
    if spec.include_cutoff {
        modes.push((
            format!("cutoff_{}", spec.cutoff_chi2),
            RenderOptions::with_cutoff(spec.cutoff_chi2),
        ));
    }
    if modes.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one render mode".into(),
        ));
    }

    let mut rows = Vec::new();
    for &count in &spec.counts {
        let cloud = init_uniform(
            ([-12.0, -12.0, -12.0], [12.0, 12.0, 12.0]),
            count,
            &InitConfig::default(),
            spec.seed,
        )?;
        for (mode_name, opts) in &modes {
            // One warm-up sweep outside the timed region.
            let _ = render_sweep(&cloud, &poses, &grid, opts)?;
            let mut frame_ms = Vec::with_capacity(spec.iterations * poses.len());
            for _ in 0..spec.iterations {
                for pose in &poses {
                    let t0 = Instant::now();
                    let img = crate::rasterizer::render_slice(&cloud, pose, &grid, opts)?;
                    frame_ms.push(t0.elapsed().as_secs_f64() * 1e3);
                    std::hint::black_box(img);
                }
            }
            let n = frame_ms.len() as f64;
            let mean = frame_ms.iter().sum::<f64>() / n;
            let var = frame_ms.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
            rows.push(BenchRow {
                gaussians: count,
                mode: mode_name.clone(),
                mean_ms: mean,
                std_ms: var.sqrt(),
                fps: 1e3 / mean,
            });
        }
    }
    Ok(BenchReport { rows })
}
