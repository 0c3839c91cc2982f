use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_file;

/// Binary 8-bit graymap of `h×w` values in `[0, 1]`, scaled to 0–255.
pub fn encode_pgm(h: usize, w: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::invalid(
            "pgm",
            format!("{} values for a {h}×{w} map", values.len()),
        ));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    write_file(path, &encode_pgm(h, w, values)?)
}
