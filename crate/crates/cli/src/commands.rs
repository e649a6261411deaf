//! Subcommand implementations. Each returns its results as values as well as
//! writing its artifacts, so they can be driven from tests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tcc_core::flops::{compare, refinement_summary, RefinementSummary};
use tcc_core::gradcheck::{standard_suite, GradcheckRow};
use tcc_core::synth::{eval_recall, export_context_trace, gen_scene, Dataset, Detector, TraceRecord, Trainer};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::fsutil::atomic_write;
use crate::metrics::{MetricsLog, MetricsRow};
use crate::report;
use crate::trace_io;

/// Maximum relative error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tcc";
pub const TRACE_FILE: &str = "trace.txt";
pub const CONFIG_FILE: &str = "config.toml";

pub fn benchmark(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::generate(0..cfg.train.scenes, &cfg.scene_spec(), &cfg.level_bands(), cfg.backbone.stage_channels.len())
        .context("generating benchmark scenes")
}

/// Builds the configured detector, optionally overwriting its parameters
/// from a checkpoint.
pub fn load_detector(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Detector> {
    let mut det = Detector::new(&cfg.detector_config())?;
    if let Some(path) = checkpoint {
        checkpoint::load_into(path, &mut det.store).with_context(|| format!("loading checkpoint {}", path.display()))?;
    }
    Ok(det)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Trains for `train.steps` steps, appending a metrics row every
/// `train.eval_interval` steps and after the last one, then saves the final
/// parameters.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let data = benchmark(cfg)?;
    let mut det = load_detector(cfg, resume)?;
    let mut trainer = Trainer::new(&det, cfg.train_config())?;
    atomic_write(&out.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let metrics_path = out.join(METRICS_FILE);
    let mut log = MetricsLog::new(&metrics_path);
    log.flush()?;
    let steps = cfg.train.steps;
    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let loss = trainer.step(&mut det, &data).with_context(|| format!("training step {step}"))?;
        losses.push(loss);
        if step % cfg.train.eval_interval == 0 || step == steps {
            let recall = eval_recall(&det, &data, cfg.eval.score_threshold, cfg.eval.radius_cells)?;
            log.push(MetricsRow { step, loss, recall });
            log.flush()?;
        }
    }
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    checkpoint::save(&checkpoint_path, &det.store)?;
    Ok(TrainOutcome {
        losses,
        metrics: log.rows().to_vec(),
        metrics_path,
        checkpoint_path,
    })
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<f64> {
    let det = load_detector(cfg, checkpoint)?;
    Ok(eval_recall(&det, &benchmark(cfg)?, cfg.eval.score_threshold, cfg.eval.radius_cells)?)
}

/// Writes per-variant reports, the two comparisons against the unrefined
/// pyramid, and a JSON summary under `out/flops/`.
pub fn cmd_flops(cfg: &RunConfig, out: &Path) -> Result<RefinementSummary> {
    let arch = cfg.flops_arch();
    let s = refinement_summary(&arch)?;
    let dir = out.join("flops");
    for (name, r) in [("none", &s.none), ("conv3x3", &s.conv3x3), ("tcc", &s.tcc)] {
        atomic_write(&dir.join(format!("{name}.txt")), report::render_report(name, r).as_bytes())?;
    }
    let mut cmp = report::render_comparison("none", "conv3x3", &compare(&s.none, &s.conv3x3));
    cmp.push('\n');
    cmp.push_str(&report::render_comparison("none", "tcc", &compare(&s.none, &s.tcc)));
    cmp.push_str(&format!("\ndelta ratio (tcc - none) / (conv3x3 - none) = {}\n", s.ratio));
    atomic_write(&dir.join("compare.txt"), cmp.as_bytes())?;
    let json = serde_json::to_string_pretty(&report::summary_json(&arch, &s))?;
    atomic_write(&dir.join("summary.json"), json.as_bytes())?;
    Ok(s)
}

pub fn cmd_gradcheck(seed: u64) -> Result<Vec<GradcheckRow>> {
    Ok(standard_suite(seed)?)
}

pub fn render_gradcheck(rows: &[GradcheckRow]) -> String {
    let mut s = format!("{:<26} {:>12}  {:<6} shapes\n", "operation", "max_rel_err", "result");
    for r in rows {
        let shapes: Vec<String> = r.shapes.iter().map(|sh| format!("{sh:?}")).collect();
        s.push_str(&format!(
            "{:<26} {:>12.3e}  {:<6} {}\n",
            r.name,
            r.max_rel_error,
            if r.max_rel_error < GRADCHECK_TOLERANCE { "pass" } else { "FAIL" },
            shapes.join(" ")
        ));
    }
    s
}

/// Traces the scene generated from `cfg.seed` and writes `out/trace.txt`.
pub fn cmd_trace(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<(PathBuf, Vec<TraceRecord>)> {
    if cfg.fusion.refinement != crate::config::RefinementKind::Tcc {
        bail!("trace needs fusion.refinement = \"tcc\"");
    }
    let det = load_detector(cfg, checkpoint)?;
    let scene = gen_scene(cfg.seed, &cfg.scene_spec())?;
    let records = export_context_trace(&det, &scene.image)?;
    let path = out.join(TRACE_FILE);
    atomic_write(&path, trace_io::render(&records).as_bytes())?;
    Ok((path, records))
}
