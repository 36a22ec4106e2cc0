//! Run directories: data files, JSON sidecars and a checksummed manifest.

use crate::config::{GridFormat, RunConfig};
use crate::pipeline::{Analysis, PipelineError, Result, SweepResult, Trajectory};
use crate::response::SignalLabel;
use crate::spectra::Spectrum2D;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// Config with every default materialized; rerunning it reproduces the files.
    pub resolved_config: String,
    pub wall_time_s: f64,
    pub diagnostics: serde_json::Value,
    pub conventions: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Malformed { file: MANIFEST.into(), reason: e.to_string() })
    }

    pub fn config(&self) -> Result<RunConfig> {
        Ok(RunConfig::from_toml_str(&self.resolved_config)?)
    }

    /// Rehashes every listed file; the first mismatch or missing file is an error.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let path = dir.join(&f.path);
            let bytes = std::fs::read(&path).map_err(|_| PipelineError::MissingOutput(f.path.clone()))?;
            let found = sha256_hex(&bytes);
            if found != f.sha256 {
                return Err(PipelineError::Checksum { file: f.path.clone(), expected: f.sha256.clone(), found });
            }
        }
        Ok(())
    }
}

pub fn conventions() -> BTreeMap<String, String> {
    [
        ("units", "energies and frequencies in cm^-1, times in fs, hbar = 1"),
        ("spectrum_axes", "omega_tau from a forward FFT over tau, omega_t from an inverse FFT over t, both shifted by the rotating frame"),
        ("fft_normalization", "unitary, 1/sqrt(M_tau M_t) over the zero-padded lengths"),
        ("apodization", "cos^2 taper on the final fraction of each time axis"),
        ("pulse_duration", "FWHM of the Gaussian field envelope; field sigma = duration / (2 sqrt(2 ln 2))"),
        ("raw_format", "little-endian f64 (re, im) pairs, row-major [omega_tau][omega_t]; axes in the JSON sidecar"),
        ("transients", "complex spectrum value at the grid point nearest each peak coordinate"),
        ("oscillation_amplitude", "peak-to-peak residual after a least-squares quadratic baseline over the stated window"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io { context: path.display().to_string(), source: e }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files into a run directory and records their checksums.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(RunWriter { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        let written = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        self.files.retain(|f| f.path != name);
        self.files.push(FileEntry { path: name.to_string(), sha256: sha256_hex(&written), bytes: written.len() as u64 });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("serializable");
        self.write(name, text.as_bytes())
    }

    pub fn finish(self, cfg: &RunConfig, command: &str, wall_time_s: f64, diagnostics: serde_json::Value) -> Result<RunManifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            tool: "heom2d".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            resolved_config: cfg.to_toml_string(),
            wall_time_s,
            diagnostics,
            conventions: conventions(),
            files,
        };
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}

/// Axes and metadata stored next to each spectrum file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSidecar {
    pub label: String,
    pub waiting_fs: f64,
    pub delta_omega_cm1: f64,
    pub frame_cm1: f64,
    pub format: GridFormat,
    pub data_file: String,
    pub omega_tau_cm1: Vec<f64>,
    pub omega_t_cm1: Vec<f64>,
}

pub fn spectrum_stem(s: &Spectrum2D) -> String {
    format!("spectra/{}_T{:.0}", s.label.name(), s.waiting_fs)
}

pub fn write_spectrum(w: &mut RunWriter, s: &Spectrum2D, format: GridFormat) -> Result<String> {
    let stem = spectrum_stem(s);
    let data_file = match format {
        GridFormat::Csv => {
            let mut text = String::from("omega_tau_cm1,omega_t_cm1,re,im\n");
            for (a, wa) in s.omega_tau_cm1.iter().enumerate() {
                for (b, wb) in s.omega_t_cm1.iter().enumerate() {
                    let z = s.at(a, b);
                    let _ = writeln!(text, "{wa},{wb},{:e},{:e}", z.re, z.im);
                }
            }
            let name = format!("{stem}.csv");
            w.write(&name, text.as_bytes())?;
            name
        }
        GridFormat::Raw => {
            let mut bytes = Vec::with_capacity(16 * s.data.len());
            for z in &s.data {
                bytes.extend_from_slice(&z.re.to_le_bytes());
                bytes.extend_from_slice(&z.im.to_le_bytes());
            }
            let name = format!("{stem}.f64");
            w.write(&name, &bytes)?;
            name
        }
    };
    let sidecar = SpectrumSidecar {
        label: s.label.name(),
        waiting_fs: s.waiting_fs,
        delta_omega_cm1: s.delta_omega_cm1,
        frame_cm1: s.frame_cm1,
        format,
        data_file: data_file.rsplit('/').next().unwrap_or(&data_file).to_string(),
        omega_tau_cm1: s.omega_tau_cm1.clone(),
        omega_t_cm1: s.omega_t_cm1.clone(),
    };
    let name = format!("{stem}.json");
    w.write_json(&name, &sidecar)?;
    Ok(name)
}

/// Reads a spectrum back from its sidecar; values are `[iω_τ][iω_t]`.
pub fn read_spectrum(dir: &Path, sidecar: &str) -> Result<(SpectrumSidecar, Vec<Complex64>)> {
    let path = dir.join(sidecar);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let meta: SpectrumSidecar = serde_json::from_str(&text).map_err(|e| PipelineError::Malformed { file: sidecar.into(), reason: e.to_string() })?;
    let data_path = path.parent().unwrap_or(dir).join(&meta.data_file);
    let n = meta.omega_tau_cm1.len() * meta.omega_t_cm1.len();
    let bad = |reason: String| PipelineError::Malformed { file: meta.data_file.clone(), reason };
    let data = match meta.format {
        GridFormat::Raw => {
            let bytes = std::fs::read(&data_path).map_err(|e| io_err(&data_path, e))?;
            if bytes.len() != 16 * n {
                return Err(bad(format!("expected {} bytes, found {}", 16 * n, bytes.len())));
            }
            bytes
                .chunks_exact(16)
                .map(|c| Complex64::new(f64::from_le_bytes(c[..8].try_into().unwrap()), f64::from_le_bytes(c[8..].try_into().unwrap())))
                .collect()
        }
        GridFormat::Csv => {
            let text = std::fs::read_to_string(&data_path).map_err(|e| io_err(&data_path, e))?;
            let mut out = Vec::with_capacity(n);
            for line in text.lines().skip(1) {
                let f: Vec<f64> = line.split(',').map(|v| v.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| bad(e.to_string()))?;
                if f.len() != 4 {
                    return Err(bad(format!("row with {} columns", f.len())));
                }
                out.push(Complex64::new(f[2], f[3]));
            }
            if out.len() != n {
                return Err(bad(format!("expected {n} rows, found {}", out.len())));
            }
            out
        }
    };
    Ok((meta, data))
}

pub fn write_trajectory(w: &mut RunWriter, tr: &Trajectory) -> Result<()> {
    let ns = tr.site_populations.first().map_or(0, |v| v.len());
    let ne = tr.exciton_populations.first().map_or(0, |v| v.len());
    let mut text = String::from("t_fs");
    for k in 0..ns {
        let _ = write!(text, ",site{}_population", k + 1);
    }
    for k in 0..ne {
        let _ = write!(text, ",exciton{}_population", k + 1);
    }
    let coh = !tr.exciton_coherence.is_empty();
    if coh {
        text.push_str(",coherence21_re,coherence21_im");
    }
    text.push_str(",trace\n");
    for i in 0..tr.time_fs.len() {
        let _ = write!(text, "{}", tr.time_fs[i]);
        for v in tr.site_populations[i].iter().chain(&tr.exciton_populations[i]) {
            let _ = write!(text, ",{v:e}");
        }
        if coh {
            let _ = write!(text, ",{:e},{:e}", tr.exciton_coherence[i].re, tr.exciton_coherence[i].im);
        }
        let _ = writeln!(text, ",{:e}", tr.trace[i]);
    }
    w.write("trajectory.csv", text.as_bytes())
}

/// `transients_{peak}.csv`: magnitudes first, then real and imaginary parts.
pub fn write_transients(w: &mut RunWriter, analysis: &Analysis, prefix: &str) -> Result<()> {
    for p in &analysis.peaks {
        let labels: Vec<SignalLabel> = p.series.iter().map(|s| s.label).collect();
        let mut text = String::from("T_fs");
        for l in &labels {
            let _ = write!(text, ",abs_{}", l.name());
        }
        for l in &labels {
            let _ = write!(text, ",re_{0},im_{0}", l.name());
        }
        text.push('\n');
        let waiting = &p.series[0].transient.waiting_fs;
        for (i, t) in waiting.iter().enumerate() {
            let _ = write!(text, "{t}");
            for s in &p.series {
                let _ = write!(text, ",{:e}", s.transient.values[i].norm());
            }
            for s in &p.series {
                let _ = write!(text, ",{:e},{:e}", s.transient.values[i].re, s.transient.values[i].im);
            }
            text.push('\n');
        }
        w.write(&format!("{prefix}transients_{}.csv", p.peak.label), text.as_bytes())?;
    }
    Ok(())
}

pub fn write_metrics(w: &mut RunWriter, analysis: &Analysis, prefix: &str) -> Result<()> {
    let mut text = String::from(
        "peak,label,snapped_omega_tau_cm1,snapped_omega_t_cm1,window_start_fs,window_stop_fs,baseline_c0,baseline_c1,baseline_c2,amplitude,frequency_cm1,fitted_amplitude,suppression_ratio\n",
    );
    for p in &analysis.peaks {
        for s in &p.series {
            let m = &s.metrics;
            let ratio = p.suppression_ratio.map_or(String::new(), |r| format!("{r:e}"));
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{},{:e},{}",
                p.peak.label,
                s.label.name(),
                s.transient.snapped_cm1.0,
                s.transient.snapped_cm1.1,
                m.window_fs.0,
                m.window_fs.1,
                m.baseline[0],
                m.baseline[1],
                m.baseline[2],
                m.amplitude,
                m.frequency_cm1,
                m.fitted_amplitude,
                ratio
            );
        }
    }
    w.write(&format!("{prefix}metrics.csv"), text.as_bytes())
}

pub fn write_sweep(w: &mut RunWriter, sweep: &SweepResult) -> Result<()> {
    let peaks: Vec<String> = sweep.rows.first().map(|r| r.suppression.iter().map(|s| s.0.clone()).collect()).unwrap_or_default();
    let mut text = String::from("delta_omega_cm1,total_intensity,intensity_ratio");
    for p in &peaks {
        let _ = write!(text, ",suppression_{p}");
    }
    text.push('\n');
    for r in &sweep.rows {
        let _ = write!(text, "{},{:e},{:e}", r.delta_omega_cm1, r.total_intensity, r.intensity_ratio);
        for s in &r.suppression {
            let _ = write!(text, ",{:e}", s.1);
        }
        text.push('\n');
    }
    w.write("sweep.csv", text.as_bytes())?;
    w.write_json("sweep.json", sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::FtOptions;

    fn spectrum() -> Spectrum2D {
        Spectrum2D {
            label: SignalLabel::Total,
            waiting_fs: 100.0,
            delta_omega_cm1: 0.0,
            omega_tau_cm1: vec![1.0, 2.0, 3.0],
            omega_t_cm1: vec![4.0, 5.0],
            data: (0..6).map(|k| Complex64::new(k as f64 * 0.1, -(k as f64) / 3.0)).collect(),
            options: FtOptions::default(),
            tau_axis: (0.0, 2.0, 4),
            t_axis: (0.0, 2.0, 4),
            frame_cm1: 0.0,
        }
    }

    #[test]
    fn spectrum_round_trip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let s = spectrum();
        for format in [GridFormat::Raw, GridFormat::Csv] {
            let mut w = RunWriter::create(dir.path()).unwrap();
            let side = write_spectrum(&mut w, &s, format).unwrap();
            let (meta, data) = read_spectrum(dir.path(), &side).unwrap();
            assert_eq!(meta.omega_t_cm1, s.omega_t_cm1);
            assert_eq!(data, s.data);
            let m = RunManifest {
                tool: "heom2d".into(),
                version: String::new(),
                command: "test".into(),
                seed: 0,
                resolved_config: String::new(),
                wall_time_s: 0.0,
                diagnostics: serde_json::Value::Null,
                conventions: conventions(),
                files: w.files.clone(),
            };
            m.verify(dir.path()).unwrap();
            let target = dir.path().join(&m.files[0].path);
            let mut bytes = std::fs::read(&target).unwrap();
            bytes[0] ^= 1;
            std::fs::write(&target, bytes).unwrap();
            match m.verify(dir.path()) {
                Err(PipelineError::Checksum { file, .. }) => assert_eq!(file, m.files[0].path),
                other => panic!("expected checksum error, got {other:?}"),
            }
        }
    }
}
