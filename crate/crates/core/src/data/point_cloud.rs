//! Point-cloud CSV: header `x0,…,x{d-1}[,w]`, one particle per row.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;

use crate::embeddings::WeightedParticles;
use crate::error::{Result, UsdError};
use crate::scalar::Real;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => UsdError::FileNotFound(path.to_path_buf()),
        _ => e.into(),
    })
}

/// Reads a point cloud. Without a `w` column every weight is `1/n`.
pub fn load_point_cloud<T: Real>(path: &Path) -> Result<WeightedParticles<T>> {
    read_point_cloud(open(path)?, path)
}

/// Like [`load_point_cloud`] but from any reader; `origin` names the source in
/// error messages.
pub fn read_point_cloud<T: Real, R: Read>(input: R, origin: &Path) -> Result<WeightedParticles<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header = reader.headers().map_err(|e| csv_error(&e, 1))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let has_weight = names.last() == Some(&"w");
    let dim = names.len() - usize::from(has_weight);
    if dim == 0 {
        return Err(UsdError::Parse {
            line: 1,
            message: "header names no coordinate columns".into(),
        });
    }
    for (k, name) in names[..dim].iter().enumerate() {
        if *name != format!("x{k}") {
            return Err(UsdError::Parse {
                line: 1,
                message: format!("expected column x{k}, found {name:?}"),
            });
        }
    }

    let mut points = Vec::new();
    let mut weights = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != names.len() {
            return Err(UsdError::Parse {
                line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        for (k, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| UsdError::Parse {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(UsdError::Parse {
                    line,
                    message: format!("non-finite value {field:?}"),
                });
            }
            if k < dim {
                points.push(T::lit(v));
            } else if v < 0.0 {
                return Err(UsdError::Parse {
                    line,
                    message: format!("negative weight {v}"),
                });
            } else {
                weights.push(T::lit(v));
            }
        }
    }
    if points.is_empty() {
        return Err(UsdError::EmptySet(origin.to_path_buf()));
    }
    if has_weight {
        WeightedParticles::new(points, weights, dim)
    } else {
        warn!("{} has no weight column; using uniform weights", origin.display());
        WeightedParticles::uniform(points, dim)
    }
}

fn csv_error(e: &csv::Error, fallback_line: usize) -> UsdError {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(io) => UsdError::Io(std::io::Error::new(io.kind(), io.to_string())),
        _ => UsdError::Parse {
            line,
            message: e.to_string(),
        },
    }
}

/// Writes a point cloud with a weight column. Values use the shortest text
/// that parses back to the same `f64`.
pub fn write_point_cloud<T: Real, W: Write>(p: &WeightedParticles<T>, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..p.dim()).map(|k| format!("x{k}")).collect();
    header.push("w".into());
    writer.write_record(&header).map_err(|e| csv_error(&e, 1))?;
    let mut row = Vec::with_capacity(p.dim() + 1);
    for i in 0..p.len() {
        row.clear();
        row.extend(p.point(i).iter().map(|v| v.to_f64_lossy().to_string()));
        row.push(p.weights()[i].to_f64_lossy().to_string());
        writer.write_record(&row).map_err(|e| csv_error(&e, i + 2))?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_point_cloud<T: Real>(p: &WeightedParticles<T>, path: &Path) -> Result<()> {
    write_point_cloud(p, std::io::BufWriter::new(File::create(path)?))
}
