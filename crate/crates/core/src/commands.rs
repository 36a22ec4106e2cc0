//! Subcommand implementations: run, write files, finish the manifest.

use crate::config::{Method, RunConfig};
use crate::output::{write_metrics, write_spectrum, write_sweep, write_trajectory, write_transients, RunManifest, RunWriter};
use crate::pipeline::{self, class_spectra, convergence_deltas, run_propagate, run_spectra2d, run_sweep, Result};
use serde_json::json;
use std::path::Path;
use std::time::Instant;

pub fn cmd_propagate(cfg: &RunConfig, out: &Path, convergence: bool) -> Result<RunManifest> {
    let start = Instant::now();
    let s = pipeline::setup(cfg)?;
    let tr = run_propagate(&s)?;
    let deltas = if convergence { Some(convergence_deltas(cfg)?) } else { None };
    let mut w = RunWriter::create(out)?;
    write_trajectory(&mut w, &tr)?;
    let diagnostics = json!({
        "max_trace_drift": tr.diagnostics.max_trace_drift,
        "max_hermiticity_defect": tr.diagnostics.max_hermiticity_defect,
        "n_ado": s.hierarchy.n_ado(),
        "convergence_deltas": deltas,
    });
    w.finish(cfg, "propagate", start.elapsed().as_secs_f64(), diagnostics)
}

pub fn cmd_spectra2d(cfg: &RunConfig, method: Method, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let run = run_spectra2d(cfg, method, cfg.seed)?;
    let mut w = RunWriter::create(out)?;
    let format = cfg.output.format;
    for s in &run.analysis.spectra {
        write_spectrum(&mut w, s, format)?;
    }
    if let Some(set) = &run.perturbative {
        for s in class_spectra(cfg, set)? {
            write_spectrum(&mut w, &s, format)?;
        }
    }
    write_transients(&mut w, &run.analysis, "")?;
    write_metrics(&mut w, &run.analysis, "")?;
    let summary = json!({
        "delta_omega_cm1": run.analysis.delta_omega_cm1,
        "total_intensity": run.analysis.total_intensity,
        "intensity_waiting_fs": run.analysis.intensity_waiting_fs,
        "suppression_ratios": run.analysis.peaks.iter().map(|p| (p.peak.label.clone(), p.suppression_ratio)).collect::<Vec<_>>(),
        "cross_method_rms": run.cross_method_rms,
        "dqc_share": run.dqc_share,
        "disorder_samples": run.disorder_samples,
    });
    w.write_json("summary.json", &summary)?;
    let diagnostics = json!({ "kernel_wall_s": run.kernel_wall_s, "cross_method_rms": run.cross_method_rms });
    w.finish(cfg, &format!("spectra2d --method {method}"), start.elapsed().as_secs_f64(), diagnostics)
}

/// Sweep values come from `[sweep]` or, absent that, the configured ΔΩ alone.
pub fn sweep_values(cfg: &RunConfig) -> Vec<f64> {
    cfg.sweep.as_ref().map(|s| s.delta_omega_cm1.clone()).unwrap_or_else(|| vec![cfg.pulses.delta_omega_cm1])
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let values = sweep_values(cfg);
    let sweep = run_sweep(cfg, &values, cfg.seed)?;
    let mut w = RunWriter::create(out)?;
    write_sweep(&mut w, &sweep)?;
    for (a, dw) in sweep.analyses.iter().zip(&values) {
        let prefix = format!("dw{dw:.0}/");
        write_transients(&mut w, a, &prefix)?;
        write_metrics(&mut w, a, &prefix)?;
    }
    let diagnostics = json!({ "monotonic": sweep.monotonic, "tolerance": sweep.tolerance });
    w.finish(cfg, "sweep", start.elapsed().as_secs_f64(), diagnostics)
}

pub fn cmd_plotdata(dir: &Path) -> Result<Vec<String>> {
    crate::plot::plot_run(dir)
}
