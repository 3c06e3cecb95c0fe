//! Plain-text critic checkpoints.
//!
//! ```text
//! usd-neural-critic 1
//! activation tanh
//! dim_in 2
//! hidden 64 1024 64
//! params 70016
//! <one value per line, in NetParams::to_flat order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::network::{Activation, NeuralCritic};
use crate::error::{Result, UsdError};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &str = "usd-neural-critic";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(critic: &NeuralCritic<T>, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
    writeln!(out, "activation {}", critic.activation().name())?;
    writeln!(out, "dim_in {}", critic.dim_in())?;
    let widths: Vec<String> = critic.hidden_widths().iter().map(|w| w.to_string()).collect();
    writeln!(out, "hidden {}", widths.join(" "))?;
    let flat = critic.params().to_flat();
    writeln!(out, "params {}", flat.len())?;
    for v in flat {
        // shortest round-trip representation
        writeln!(out, "{}", v.to_f64_lossy())?;
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(critic: &NeuralCritic<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    write_checkpoint(critic, &mut out)?;
    out.flush()?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> UsdError {
    UsdError::Parse {
        line,
        message: message.into(),
    }
}

fn header_field<'a>(line: Option<(usize, String)>, key: &str, store: &'a mut String) -> Result<(usize, &'a str)> {
    let (no, text) = line.ok_or_else(|| parse_err(0, format!("missing {key:?} line")))?;
    *store = text;
    let rest = store
        .strip_prefix(key)
        .ok_or_else(|| parse_err(no, format!("expected {key:?}")))?;
    Ok((no, rest.trim()))
}

pub fn read_checkpoint<T: Real, R: Read>(input: R) -> Result<NeuralCritic<T>> {
    let mut lines = BufReader::new(input)
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)));
    let mut next = || lines.next().transpose();
    let mut buf = String::new();

    let (no, version) = header_field(next()?, CHECKPOINT_MAGIC, &mut buf)?;
    if version.parse::<u32>().ok() != Some(CHECKPOINT_VERSION) {
        return Err(parse_err(no, format!("unsupported checkpoint version {version:?}")));
    }
    let (_, act) = header_field(next()?, "activation", &mut buf)?;
    let activation = Activation::from_name(act)?;
    let (no, dim) = header_field(next()?, "dim_in", &mut buf)?;
    let dim_in: usize = dim.parse().map_err(|_| parse_err(no, "bad input dimension"))?;
    let (no, hidden) = header_field(next()?, "hidden", &mut buf)?;
    let hidden: Vec<usize> = hidden
        .split_whitespace()
        .map(|w| w.parse().map_err(|_| parse_err(no, format!("bad layer width {w:?}"))))
        .collect::<Result<_>>()?;
    let (no, count) = header_field(next()?, "params", &mut buf)?;
    let count: usize = count.parse().map_err(|_| parse_err(no, "bad parameter count"))?;

    let mut critic = NeuralCritic::zeros(dim_in, &hidden, activation)?;
    if critic.n_params() != count {
        return Err(UsdError::CountMismatch {
            expected: critic.n_params(),
            got: count,
        });
    }
    let mut flat = Vec::with_capacity(count);
    while let Some((no, text)) = next()? {
        if text.trim().is_empty() {
            continue;
        }
        let v: f64 = text.trim().parse().map_err(|_| parse_err(no, format!("bad value {text:?}")))?;
        if !v.is_finite() {
            return Err(UsdError::NonFinite(format!("checkpoint value on line {no}")));
        }
        flat.push(T::lit(v));
    }
    if flat.len() != count {
        return Err(UsdError::CountMismatch {
            expected: count,
            got: flat.len(),
        });
    }
    critic.params_mut().set_flat(&flat)?;
    Ok(critic)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<NeuralCritic<T>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => UsdError::FileNotFound(path.to_path_buf()),
        _ => e.into(),
    })?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn roundtrip_is_exact() {
        let mut rng = seeded_rng(1);
        let net = NeuralCritic::<f64>::new(3, &[4, 7, 2], Activation::Softplus, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back: NeuralCritic<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn no_hidden_layers_roundtrip() {
        let net = NeuralCritic::<f64>::zeros(2, &[], Activation::Tanh).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back: NeuralCritic<f64> = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let text = "usd-neural-critic 9\nactivation tanh\ndim_in 1\nhidden\nparams 1\n0\n";
        assert!(matches!(read_checkpoint::<f64, _>(text.as_bytes()), Err(UsdError::Parse { line: 1, .. })));
        let text = "usd-neural-critic 1\nactivation tanh\ndim_in 1\nhidden 2\nparams 6\n0\n0\n";
        assert!(matches!(read_checkpoint::<f64, _>(text.as_bytes()), Err(UsdError::CountMismatch { .. })));
        let text = "usd-neural-critic 1\nactivation tanh\ndim_in 1\nhidden\nparams 1\nabc\n";
        assert!(matches!(read_checkpoint::<f64, _>(text.as_bytes()), Err(UsdError::Parse { line: 6, .. })));
    }

    #[test]
    fn missing_file() {
        let err = load_checkpoint::<f64>(Path::new("/nonexistent/critic.txt")).unwrap_err();
        assert!(matches!(err, UsdError::FileNotFound(_)));
    }
}
