//! CSV, PFM and PGM writers.

use std::io::Write;
use std::path::Path;

use wos_core::{Dim, Vec3};

use crate::CliError;

/// One evaluated point, ready for output.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub point: Vec3,
    pub mean: f64,
    pub std_error: f64,
    pub n: u64,
    pub avg_steps: f64,
    pub avg_queries: f64,
    /// Gradient mean and standard error, when requested.
    pub gradient: Option<(Vec3, Vec3)>,
}

pub fn csv_header(dim: Dim, gradient: bool) -> Vec<String> {
    let axes = &["x", "y", "z"][..dim.get()];
    let mut h: Vec<String> = axes.iter().map(|s| s.to_string()).collect();
    h.extend(["mean", "stderr", "n", "avg_steps", "avg_queries"].map(String::from));
    if gradient {
        h.extend(axes.iter().map(|a| format!("grad_{a}")));
        h.extend(axes.iter().map(|a| format!("grad_{a}_stderr")));
    }
    h
}

/// Floats are written in Rust's shortest round-trip form, so equal values
/// give equal bytes.
pub fn write_csv(path: &Path, dim: Dim, rows: &[Row], gradient: bool) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(dim, gradient))?;
    let d = dim.get();
    for r in rows {
        let mut rec: Vec<String> = (0..d).map(|k| r.point[k].to_string()).collect();
        rec.push(r.mean.to_string());
        rec.push(r.std_error.to_string());
        rec.push(r.n.to_string());
        rec.push(r.avg_steps.to_string());
        rec.push(r.avg_queries.to_string());
        if gradient {
            let (g, se) = r.gradient.unwrap_or((Vec3::ZERO, Vec3::ZERO));
            rec.extend((0..d).map(|k| g[k].to_string()));
            rec.extend((0..d).map(|k| se[k].to_string()));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// Little-endian PFM. `channels` is 1 (`Pf`) or 3 (`PF`); `data` holds
/// `width·height·channels` values, row 0 first, which PFM stores as the
/// bottom scanline.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<(), CliError> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width * height * channels);
    let mut buf = Vec::with_capacity(32 + 4 * data.len());
    let tag = if channels == 1 { "Pf" } else { "PF" };
    write!(buf, "{tag}\n{width} {height}\n-1.0\n").unwrap();
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let bad = || CliError::Config(format!("{} is not a PFM file", path.display()));
    let mut fields = Vec::new();
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b.is_ascii_whitespace() {
            if i > start {
                fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?);
            }
            start = i + 1;
            if fields.len() == 4 {
                break;
            }
        }
    }
    let [tag, w, h, scale] = fields[..] else { return Err(bad()) };
    let channels = match tag {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad()),
    };
    let (w, h): (usize, usize) = (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?);
    let little = scale.parse::<f32>().map_err(|_| bad())? < 0.0;
    let body = &bytes[start..];
    if body.len() != 4 * w * h * channels {
        return Err(bad());
    }
    let data = body
        .chunks_exact(4)
        .map(|c| {
            let a = [c[0], c[1], c[2], c[3]];
            if little {
                f32::from_le_bytes(a)
            } else {
                f32::from_be_bytes(a)
            }
        })
        .collect();
    Ok((w, h, channels, data))
}

/// 8-bit binary PGM with a linear map from the finite data range to
/// 0..=255. Row 0 is written last (bottom of the image); NaN is black.
pub fn write_pgm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<(), CliError> {
    assert_eq!(data.len(), width * height);
    let (lo, hi) = data.iter().filter(|v| v.is_finite()).fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut buf = Vec::with_capacity(20 + data.len());
    write!(buf, "P5\n{width} {height}\n255\n").unwrap();
    for j in (0..height).rev() {
        for v in &data[j * width..(j + 1) * width] {
            let t = if v.is_finite() { ((v - lo) / span * 255.0).round() } else { 0.0 };
            buf.push(t.clamp(0.0, 255.0) as u8);
        }
    }
    std::fs::write(path, buf).map_err(|e| CliError::io(path, e))
}
