//! Binary PPM renders of palette grids.

use std::io::Write;

use crate::error::{Error, Result};

/// Fixed RGB palette; ids beyond its length cycle.
pub const COLOURS: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 57, 70],
    [42, 157, 143],
    [244, 162, 97],
    [69, 123, 157],
    [233, 196, 106],
    [131, 56, 236],
    [255, 255, 255],
];

/// Writes a `P6` image with each cell drawn as a `scale x scale` block.
pub fn write_ppm<W: Write>(grid: &[usize], height: usize, width: usize, scale: usize, mut out: W) -> Result<()> {
    if grid.len() != height * width || scale == 0 {
        return Err(Error::Dimension { op: "write_ppm", lhs: vec![grid.len()], rhs: vec![height, width, scale] });
    }
    write!(out, "P6\n{} {}\n255\n", width * scale, height * scale)?;
    let mut row = Vec::with_capacity(width * scale * 3);
    for r in 0..height {
        row.clear();
        for c in 0..width {
            let rgb = COLOURS[grid[r * width + c] % COLOURS.len()];
            for _ in 0..scale {
                row.extend_from_slice(&rgb);
            }
        }
        for _ in 0..scale {
            out.write_all(&row)?;
        }
    }
    Ok(())
}
