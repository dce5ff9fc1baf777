//! Plain-text and image exports of `H x W` fields.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One CSV line per grid row, values in shortest round-trip form.
pub fn write_field_csv(path: &Path, field: &Tensor) -> Result<()> {
    let (h, w) = field.dims2()?;
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in 0..h {
        let line: Vec<String> = field.data()[r * w..(r + 1) * w]
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_field_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (ln, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let vals: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format(format!(
                "{}:{}: ragged row",
                path.display(),
                ln + 1
            )));
        }
        data.extend(vals);
        rows += 1;
    }
    let w = width.ok_or_else(|| Error::Format(format!("{}: empty field file", path.display())))?;
    Tensor::new(vec![rows, w], data)
}

/// Binary portable graymap (P5), linearly scaled from the field's min to max.
pub fn write_pgm(path: &Path, field: &Tensor) -> Result<()> {
    let (h, w) = field.dims2()?;
    let lo = field.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        field
            .data()
            .iter()
            .map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dependency(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
