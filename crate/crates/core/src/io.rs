//! Query-point files: `.bin` holds little-endian f32 triples, `.xyz` holds
//! one whitespace-separated point per line (`#` starts a comment).

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub fn read_points(path: &Path) -> Result<Vec<Vec3>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_points_bin(&bytes).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message,
            })
        }
        Some("xyz") => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_points_xyz(&text).map_err(|(line, message)| Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            })
        }
        _ => Err(Error::InvalidArgument(format!(
            "{}: point files must end in .bin or .xyz",
            path.display()
        ))),
    }
}

pub fn parse_points_bin(bytes: &[u8]) -> std::result::Result<Vec<Vec3>, String> {
    if bytes.len() % 12 != 0 {
        return Err(format!("length {} is not a multiple of 12 bytes", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            Vec3::new(
                LittleEndian::read_f32(&c[0..4]) as f64,
                LittleEndian::read_f32(&c[4..8]) as f64,
                LittleEndian::read_f32(&c[8..12]) as f64,
            )
        })
        .collect())
}

/// Errors carry the 1-based line number.
pub fn parse_points_xyz(text: &str) -> std::result::Result<Vec<Vec3>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| (i + 1, format!("not a number: {t:?}"))))
            .collect::<std::result::Result<_, _>>()?;
        if vals.len() != 3 {
            return Err((i + 1, format!("expected 3 coordinates, found {}", vals.len())));
        }
        out.push(Vec3::new(vals[0], vals[1], vals[2]));
    }
    Ok(out)
}

pub fn write_points(path: &Path, points: &[Vec3]) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => {
            let mut buf = vec![0u8; points.len() * 12];
            for (c, p) in buf.chunks_exact_mut(12).zip(points) {
                for k in 0..3 {
                    LittleEndian::write_f32(&mut c[4 * k..4 * k + 4], p[k] as f32);
                }
            }
            buf
        }
        _ => points
            .iter()
            .map(|p| format!("{} {} {}\n", p.x, p.y, p.z))
            .collect::<String>()
            .into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
