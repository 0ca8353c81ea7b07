//! PGM image grids and small CSV helpers.

use std::io::Write;
use std::path::Path;

use crate::error::CliError;

/// Writes square `side×side` tiles with values in `[0,1]` as a binary PGM,
/// `cols` tiles per row, separated by one black pixel.
pub fn write_pgm_grid(path: &Path, tiles: &[&[f64]], side: usize, cols: usize) -> Result<(), CliError> {
    if tiles.is_empty() || cols == 0 {
        return Err(CliError::Other("an image grid needs at least one tile".into()));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != side * side) {
        return Err(CliError::Other(format!(
            "tile of {} pixels does not match side {side}",
            t.len()
        )));
    }
    let rows = tiles.len().div_ceil(cols);
    let width = cols * (side + 1) - 1;
    let height = rows * (side + 1) - 1;
    let mut px = vec![0u8; width * height];
    for (k, tile) in tiles.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (side + 1), (k % cols) * (side + 1));
        for i in 0..side {
            for j in 0..side {
                let v = tile[i * side + j].clamp(0.0, 1.0);
                px[(r0 + i) * width + c0 + j] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&px)?;
    f.flush()?;
    Ok(())
}

/// Side of a square image with `n` pixels.
pub fn square_side(n: usize) -> Result<usize, CliError> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n {
        return Err(CliError::Data(format!("{n} pixels do not form a square image")));
    }
    Ok(s)
}

pub fn write_json_line<T: serde::Serialize>(w: &mut impl Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w)?;
    Ok(())
}
