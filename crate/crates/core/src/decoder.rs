//! Mask-token merge and the convolutional student decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{trunc_normal, INIT_STD};
use crate::error::{EatError, Result};
use crate::numerics::{Bound, ParamSet, Tape, Tensor, Var};
use crate::patching::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Odd square kernel size.
    pub kernel: usize,
    pub embed_dim: usize,
}

impl DecoderConfig {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            layers: 6,
            kernel: 3,
            embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.embed_dim == 0 {
            return Err(EatError::Config(format!(
                "decoder needs an odd kernel and positive width, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn init_decoder(params: &mut ParamSet, prefix: &str, cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (e, k) = (cfg.embed_dim, cfg.kernel);
    for i in 0..cfg.layers {
        let p = |n: &str| format!("{prefix}blocks.{i}.{n}");
        params.insert(p("conv.weight"), trunc_normal(rng, vec![e, e, k, k], INIT_STD));
        params.insert(p("conv.bias"), Tensor::zeros(vec![e]));
        params.insert(p("norm.weight"), Tensor::ones(vec![e]));
        params.insert(p("norm.bias"), Tensor::zeros(vec![e]));
    }
    params.insert(format!("{prefix}proj.weight"), trunc_normal(rng, vec![e, e], INIT_STD));
    params.insert(format!("{prefix}proj.bias"), Tensor::zeros(vec![e]));
    Ok(())
}

/// For each grid cell, the row of `[visible; mask_token]` it takes. Errors unless
/// the two index lists partition `0..P`.
pub fn merge_index(grid: Grid, visible: &[usize], masked: &[usize]) -> Result<Vec<usize>> {
    let p = grid.cells();
    let token_row = visible.len();
    let mut map = vec![usize::MAX; p];
    for (row, &i) in visible.iter().enumerate() {
        if i >= p || map[i] != usize::MAX {
            return Err(EatError::Invalid(format!("visible index {i} is out of range or repeated")));
        }
        map[i] = row;
    }
    for &i in masked {
        if i >= p || map[i] != usize::MAX {
            return Err(EatError::Invalid(format!("masked index {i} is out of range or overlaps")));
        }
        map[i] = token_row;
    }
    if let Some(gap) = map.iter().position(|&m| m == usize::MAX) {
        return Err(EatError::Invalid(format!("grid cell {gap} is neither visible nor masked")));
    }
    Ok(map)
}

/// Scatters `visible: [P', E]` into a `[P, E]` grid and fills masked cells with
/// `mask_token: [1, E]`.
pub fn merge_tokens(
    tape: &mut Tape,
    visible: Var,
    visible_indices: &[usize],
    masked_indices: &[usize],
    mask_token: Var,
    grid: Grid,
) -> Result<Var> {
    let rows = tape.value(visible).shape()[0];
    if rows != visible_indices.len() {
        return Err(EatError::Invalid(format!(
            "{rows} visible rows but {} visible indices",
            visible_indices.len()
        )));
    }
    let map = merge_index(grid, visible_indices, masked_indices)?;
    let stacked = tape.concat_rows(&[visible, mask_token])?;
    Ok(tape.gather_rows(stacked, &map)?)
}

/// `layers × (conv → channel LayerNorm → GELU)` then a per-cell linear map.
/// Input and output are `[P, E]`, cells flattened time-major.
pub fn decode(tape: &mut Tape, params: &Bound, prefix: &str, cfg: &DecoderConfig, x: Var, grid: Grid) -> Result<Var> {
    if tape.value(x).shape() != [grid.cells(), cfg.embed_dim] {
        return Err(EatError::Invalid(format!(
            "decoder input {:?} does not match grid {grid} and width {}",
            tape.value(x).shape(),
            cfg.embed_dim
        )));
    }
    let mut h = x;
    for i in 0..cfg.layers {
        let p = |n: &str| params.var(&format!("{prefix}blocks.{i}.{n}"));
        h = tape.conv2d_same(h, p("conv.weight")?, Some(p("conv.bias")?), grid.time, grid.freq)?;
        h = tape.layer_norm(h, 1, Some(p("norm.weight")?), Some(p("norm.bias")?))?;
        h = tape.gelu(h);
    }
    let w = params.var(&format!("{prefix}proj.weight"))?;
    let b = params.var(&format!("{prefix}proj.bias"))?;
    Ok(tape.linear(h, w, Some(b))?)
}

/// Prediction rows at `masked_indices`, in that order. May be empty.
pub fn select_masked(tape: &mut Tape, pred: Var, masked_indices: &[usize]) -> Result<Var> {
    Ok(tape.gather_rows(pred, masked_indices)?)
}
