//! Plot-ready exports of a finished run directory.

use crate::output::{read_spectrum, RunManifest};
use crate::pipeline::{PipelineError, Result};
use image::{Rgb, RgbImage};
use std::fmt::Write as _;
use std::path::Path;

const VIRIDIS: [[f64; 3]; 5] = [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
const SERIES_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [200, 30, 30], [30, 60, 200], [30, 150, 60]];

fn colormap(v: f64) -> Rgb<u8> {
    let x = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Heat map with ω_τ along x and ω_t along y (increasing upward).
pub fn heat_map(values: &[f64], n_tau: usize, n_t: usize, min_px: u32) -> RgbImage {
    let scale = (min_px as usize).div_ceil(n_tau.max(n_t).max(1)).max(1) as u32;
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let norm = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut img = RgbImage::new(n_tau as u32 * scale, n_t as u32 * scale);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let a = (x / scale) as usize;
        let b = n_t - 1 - (y / scale) as usize;
        *px = colormap(values[a * n_t + b] * norm);
    }
    img
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of several series over a shared x axis, each scaled to the global maximum.
pub fn line_plot(x: &[f64], series: &[Vec<f64>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 20i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let grey = Rgb([160, 160, 160]);
    for (a, b) in [((0, 0), (w, 0)), ((0, 0), (0, h)), ((w, 0), (w, h)), ((0, h), (w, h))] {
        draw_line(&mut img, (margin + a.0, margin + a.1), (margin + b.0, margin + b.1), grey);
    }
    if x.len() < 2 {
        return img;
    }
    let (xmin, xmax) = (x[0], x[x.len() - 1]);
    let ymax = series.iter().flatten().cloned().fold(0.0f64, f64::max);
    let ymin = series.iter().flatten().cloned().fold(ymax, f64::min).min(0.0);
    let span = if ymax > ymin { ymax - ymin } else { 1.0 };
    let px = |xv: f64, yv: f64| {
        (margin + ((xv - xmin) / (xmax - xmin) * w as f64).round() as i64, margin + h - ((yv - ymin) / span * h as f64).round() as i64)
    };
    for (k, s) in series.iter().enumerate() {
        let c = Rgb(SERIES_COLORS[k % SERIES_COLORS.len()]);
        for i in 1..s.len().min(x.len()) {
            draw_line(&mut img, px(x[i - 1], s[i - 1]), px(x[i], s[i]), c);
        }
    }
    img
}

fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| PipelineError::Io { context: path.display().to_string(), source: std::io::Error::other(e.to_string()) })
}

fn gridded(label: &str, omega_tau: &[f64], omega_t: &[f64], values: &[f64]) -> String {
    let mut text = format!("# {label}: rows omega_tau_cm1 (first column), columns omega_t_cm1 (first row)\nNaN");
    for w in omega_t {
        let _ = write!(text, " {w}");
    }
    text.push('\n');
    for (a, wa) in omega_tau.iter().enumerate() {
        let _ = write!(text, "{wa}");
        for b in 0..omega_t.len() {
            let _ = write!(text, " {:e}", values[a * omega_t.len() + b]);
        }
        text.push('\n');
    }
    text
}

/// Verifies the run's checksums, then writes `plots/` with one gridded text
/// file pair and heat map per spectrum and one line plot per transient file.
/// Returns the written paths relative to the run directory.
pub fn plot_run(dir: &Path) -> Result<Vec<String>> {
    let manifest = RunManifest::load(dir)?;
    manifest.verify(dir)?;
    let out = dir.join("plots");
    std::fs::create_dir_all(&out).map_err(|e| PipelineError::Io { context: out.display().to_string(), source: e })?;
    let mut written = Vec::new();
    let emit_text = |name: String, text: String, written: &mut Vec<String>| -> Result<()> {
        let path = out.join(&name);
        std::fs::write(&path, text).map_err(|e| PipelineError::Io { context: path.display().to_string(), source: e })?;
        written.push(format!("plots/{name}"));
        Ok(())
    };
    for f in &manifest.files {
        let stem = Path::new(&f.path).file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if f.path.starts_with("spectra/") && f.path.ends_with(".json") {
            let (meta, data) = read_spectrum(dir, &f.path)?;
            let (nt, nw) = (meta.omega_tau_cm1.len(), meta.omega_t_cm1.len());
            let abs: Vec<f64> = data.iter().map(|z| z.norm()).collect();
            let re: Vec<f64> = data.iter().map(|z| z.re).collect();
            emit_text(format!("{stem}_abs.txt"), gridded(&format!("|S| {}", meta.label), &meta.omega_tau_cm1, &meta.omega_t_cm1, &abs), &mut written)?;
            emit_text(format!("{stem}_re.txt"), gridded(&format!("Re S {}", meta.label), &meta.omega_tau_cm1, &meta.omega_t_cm1, &re), &mut written)?;
            if nt > 0 && nw > 0 {
                write_png(&heat_map(&abs, nt, nw, 400), &out.join(format!("{stem}.png")))?;
                written.push(format!("plots/{stem}.png"));
            }
        } else if stem.starts_with("transients_") || f.path.contains("/transients_") {
            let text = std::fs::read_to_string(dir.join(&f.path)).map_err(|e| PipelineError::Io { context: f.path.clone(), source: e })?;
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
            let cols: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("abs_")).collect();
            let mut x = Vec::new();
            let mut series = vec![Vec::new(); cols.len()];
            for line in lines {
                let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap_or(f64::NAN)).collect();
                x.push(v[0]);
                for (k, &c) in cols.iter().enumerate() {
                    series[k].push(v[c]);
                }
            }
            let name = f.path.trim_end_matches(".csv").replace('/', "_");
            write_png(&line_plot(&x, &series, 640, 360), &out.join(format!("{name}.png")))?;
            written.push(format!("plots/{name}.png"));
        }
    }
    Ok(written)
}
