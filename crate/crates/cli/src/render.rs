//! Binary PPM rendering: one 8×8 block per cell, coloured by the cell's
//! dominant category; empty cells are white.

use std::path::Path;

use urbanflow::config_flow::ConfigTensor;
use urbanflow::{Error, Result};

pub const CELL_PIXELS: usize = 8;

pub const PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [66, 66, 66],
    [219, 219, 141],
    [158, 218, 229],
];

const WHITE: [u8; 3] = [255, 255, 255];

/// Colour of one cell: the palette entry of its largest count (lowest index
/// on ties), or white when the cell is empty.
pub fn cell_color(counts: &[u32]) -> [u8; 3] {
    let mut best: Option<(usize, u32)> = None;
    for (k, &c) in counts.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((k, c));
        }
    }
    best.map_or(WHITE, |(k, _)| PALETTE[k])
}

pub fn ppm_bytes(config: &ConfigTensor) -> Result<Vec<u8>> {
    if config.p() > PALETTE.len() {
        return Err(Error::Config(format!(
            "{} categories exceed the {}-colour palette",
            config.p(),
            PALETTE.len()
        )));
    }
    let n = config.n();
    let side = n * CELL_PIXELS;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for py in 0..side {
        for px in 0..side {
            let cell = (py / CELL_PIXELS) * n + px / CELL_PIXELS;
            out.extend_from_slice(&cell_color(config.cell(cell)));
        }
    }
    Ok(out)
}

pub fn render_ppm(config: &ConfigTensor, path: &Path) -> Result<()> {
    std::fs::write(path, ppm_bytes(config)?)?;
    Ok(())
}
