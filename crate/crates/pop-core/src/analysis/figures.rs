//! One-call reproduction of the artifact's figure set.
//!
//! Given a trained checkpoint and a calibration file, this emits three
//! CSV/SVG pairs into an output directory:
//!
//! * `importance.{csv,svg}` — per-layer prefill and decode importance
//!   scores with their gradient means and standard errors,
//! * `drift.{csv,svg}` — per-layer cosine similarity of hidden states,
//!   cached K/V rows, and decode attention outputs under a deep-third plan,
//! * `ratio_sweep.{csv,svg}` — response loss and first-token agreement of
//!   the standard pruned pipeline across a fixed ratio grid.
//!
//! CSV is the canonical output and every file round-trips through
//! [`super::parse_csv`] (or the sweep's own reader); SVG is a convenience
//! rendering of the same numbers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::drift::{drift_diagnostics, DriftTrace};
use super::emit::{svg_line_chart, write_csv, Series};
use crate::error::{PopError, Result};
use crate::importance::{
    calibration_from_jsonl, estimate_importance, ImportanceProfile, SamplingParams,
};
use crate::model::load_checkpoint;
use crate::pop::{make_plan, run_variant, write_variant_csv, Strategy, Variant, VariantMetrics};

/// Pruning-ratio grid for the sweep figure.
pub const SWEEP_RATIOS: [f64; 7] = [0.0, 0.2, 0.25, 1.0 / 3.0, 0.4, 0.5, 0.6];

/// Ratio used for the drift figure's pruning plan.
const DRIFT_RATIO: f64 = 1.0 / 3.0;

/// Where each emitted figure landed.
#[derive(Debug, Clone, Serialize)]
pub struct FigurePaths {
    pub importance_csv: PathBuf,
    pub importance_svg: PathBuf,
    pub drift_csv: PathBuf,
    pub drift_svg: PathBuf,
    pub ratio_sweep_csv: PathBuf,
    pub ratio_sweep_svg: PathBuf,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_importance_files(
    profile: &ImportanceProfile,
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    let header = [
        "layer",
        "prefill_score",
        "decode_score",
        "prefill_grad_mean",
        "decode_grad_mean",
        "prefill_grad_se",
        "decode_grad_se",
    ];
    let rows: Vec<Vec<String>> = profile
        .layers
        .iter()
        .map(|l| {
            vec![
                l.index.to_string(),
                fmt(l.prefill_score),
                fmt(l.decode_score),
                fmt(l.prefill_grad_mean),
                fmt(l.decode_grad_mean),
                fmt(l.prefill_grad_se),
                fmt(l.decode_grad_se),
            ]
        })
        .collect();
    write_csv(csv_path, &header, &rows)?;

    let series = vec![
        Series {
            name: "prefill".into(),
            points: profile
                .layers
                .iter()
                .map(|l| (l.index as f64, l.prefill_score))
                .collect(),
        },
        Series {
            name: "decode".into(),
            points: profile
                .layers
                .iter()
                .map(|l| (l.index as f64, l.decode_score))
                .collect(),
        },
    ];
    let svg = svg_line_chart("Layer importance by stage", "layer", "score", &series)?;
    std::fs::write(svg_path, svg).map_err(|e| PopError::io(svg_path, e))
}

/// Drift CSV: one row per layer, shared by the figure set and `diagnose`.
pub(crate) fn write_drift_csv(trace: &DriftTrace, csv_path: &Path) -> Result<()> {
    let header = ["layer", "skipped", "hidden", "k", "v", "attn_out"];
    let rows: Vec<Vec<String>> = trace
        .layers
        .iter()
        .map(|l| {
            vec![
                l.layer.to_string(),
                l.skipped.to_string(),
                fmt(l.hidden),
                fmt(l.k),
                fmt(l.v),
                fmt(l.attn_out),
            ]
        })
        .collect();
    write_csv(csv_path, &header, &rows)
}

/// Drift chart: the four similarity traces against layer number.
pub(crate) fn write_drift_svg(trace: &DriftTrace, svg_path: &Path) -> Result<()> {
    let line = |name: &str, pick: fn(&crate::analysis::LayerDrift) -> f64| Series {
        name: name.into(),
        points: trace
            .layers
            .iter()
            .map(|l| (l.layer as f64, pick(l)))
            .collect(),
    };
    let series = vec![
        line("hidden", |l| l.hidden),
        line("cached K", |l| l.k),
        line("cached V", |l| l.v),
        line("attn out", |l| l.attn_out),
    ];
    let svg = svg_line_chart(
        "Pruned-vs-full cosine similarity",
        "layer",
        "cosine similarity",
        &series,
    )?;
    std::fs::write(svg_path, svg).map_err(|e| PopError::io(svg_path, e))
}

fn write_sweep_files(rows: &[VariantMetrics], csv_path: &Path, svg_path: &Path) -> Result<()> {
    write_variant_csv(csv_path, rows)?;
    let series = vec![
        Series {
            name: "resp loss".into(),
            points: rows.iter().map(|r| (r.ratio, r.resp_loss)).collect(),
        },
        Series {
            name: "agreement".into(),
            points: rows.iter().map(|r| (r.ratio, r.first_token_agree)).collect(),
        },
    ];
    let svg = svg_line_chart(
        "Pruning-ratio sweep",
        "prefill pruning ratio",
        "value",
        &series,
    )?;
    std::fs::write(svg_path, svg).map_err(|e| PopError::io(svg_path, e))
}

/// Runs the whole figure pipeline: loads the checkpoint and calibration
/// JSONL, estimates stage-aware importance (self-sampling targets where the
/// file provides none), measures drift under a deep plan at ratio 1/3, and
/// sweeps the pruning ratio. Uses at most `samples` calibration samples.
pub fn reproduce_figures(
    checkpoint: &Path,
    calib: &Path,
    outdir: &Path,
    samples: usize,
    seed: u64,
) -> Result<FigurePaths> {
    if samples == 0 {
        return Err(PopError::Config(
            "figure reproduction needs at least one calibration sample".into(),
        ));
    }
    let weights = load_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(calib).map_err(|e| PopError::io(calib, e))?;
    let mut calib_samples = calibration_from_jsonl(&text)?;
    calib_samples.truncate(samples);

    std::fs::create_dir_all(outdir).map_err(|e| PopError::io(outdir, e))?;
    let paths = FigurePaths {
        importance_csv: outdir.join("importance.csv"),
        importance_svg: outdir.join("importance.svg"),
        drift_csv: outdir.join("drift.csv"),
        drift_svg: outdir.join("drift.svg"),
        ratio_sweep_csv: outdir.join("ratio_sweep.csv"),
        ratio_sweep_svg: outdir.join("ratio_sweep.svg"),
    };

    // Importance first: it fills in sampled responses, which the sweep then
    // reuses as frozen targets.
    let profile = estimate_importance(
        &weights,
        &mut calib_samples,
        true,
        &SamplingParams::default(),
        seed,
        false,
    )?;
    write_importance_files(&profile, &paths.importance_csv, &paths.importance_svg)?;

    let num_layers = weights.config.num_layers;
    let plan = make_plan(num_layers, DRIFT_RATIO, Strategy::Deep, None)?;
    let prompts: Vec<Vec<u32>> = calib_samples.iter().map(|s| s.prompt.clone()).collect();
    let trace = drift_diagnostics(&weights, &plan, &prompts)?;
    write_drift_csv(&trace, &paths.drift_csv)?;
    write_drift_svg(&trace, &paths.drift_svg)?;

    let sweep: Vec<VariantMetrics> = SWEEP_RATIOS
        .iter()
        .map(|&ratio| run_variant(&weights, Variant::Pop, ratio, &calib_samples))
        .collect::<Result<_>>()?;
    write_sweep_files(&sweep, &paths.ratio_sweep_csv, &paths.ratio_sweep_svg)?;

    Ok(paths)
}
