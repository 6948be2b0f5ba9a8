//! Mask visualisation: text art plus an 8-bit PGM image.

use std::path::Path;

use crate::error::{EatError, Result};
use crate::masking::{plan_mask, BlockShape, MaskPlan};
use crate::patching::Grid;

/// Parses `TxF`, e.g. `64x8`.
pub fn parse_grid(s: &str) -> Result<Grid> {
    let (t, f) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| EatError::Invalid(format!("grid must look like TxF, got `{s}`")))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| EatError::Invalid(format!("grid must look like TxF, got `{s}`")))
    };
    Grid::new(num(t)?, num(f)?).map_err(|e| EatError::Invalid(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct MaskInspection {
    pub plan: MaskPlan,
    /// Rows are frequency, highest first; columns are time. `#` kept, `.` masked.
    pub art: String,
    /// `kept K / P`.
    pub summary: String,
}

pub fn inspect_mask(grid: Grid, ratio: f64, blocks: &[BlockShape], seed: u64) -> Result<MaskInspection> {
    let plan = plan_mask(grid, ratio, blocks, seed)?;
    Ok(MaskInspection {
        art: plan.render(),
        summary: format!("kept {} / {}", plan.keep_count(), grid.cells()),
        plan,
    })
}

/// Binary PGM (`P5`) with each cell drawn as a `scale x scale` square: white
/// kept, black masked. Same orientation as the text art.
pub fn pgm_bytes(plan: &MaskPlan, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (w, h) = (plan.grid.time * scale, plan.grid.freq * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for y in 0..h {
        let f = plan.grid.freq - 1 - y / scale;
        for x in 0..w {
            out.push(if plan.is_kept(x / scale, f) { 255 } else { 0 });
        }
    }
    out
}

pub fn write_pgm(plan: &MaskPlan, path: &Path, scale: usize) -> Result<()> {
    std::fs::write(path, pgm_bytes(plan, scale)).map_err(|e| EatError::io(path, e))
}
