//! Non-overlapping patch embedding, fixed positional table and CLS prepending.
//!
//! Grid cells are flattened time-major: `index = t·F' + f`.

use crate::error::{EatError, Result};
use crate::numerics::{matmul, Tape, Tensor, Var};

/// Patch grid of `time × freq` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub time: usize,
    pub freq: usize,
}

impl Grid {
    pub fn new(time: usize, freq: usize) -> Result<Self> {
        if time == 0 || freq == 0 {
            return Err(EatError::Invalid(format!("grid {time}x{freq} has no cells")));
        }
        Ok(Self { time, freq })
    }

    pub fn cells(&self) -> usize {
        self.time * self.freq
    }

    pub fn index(&self, t: usize, f: usize) -> usize {
        debug_assert!(t < self.time && f < self.freq);
        t * self.freq + f
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.freq, index % self.freq)
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.time, self.freq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    /// Grid for a `frames × bins` spectrogram. Both must be multiples of the patch size.
    pub fn grid(&self, frames: usize, bins: usize) -> Result<Grid> {
        let s = self.patch_size;
        if s == 0 || frames % s != 0 || bins % s != 0 {
            return Err(EatError::Invalid(format!(
                "spectrogram {frames}x{bins} is not divisible into {s}x{s} patches"
            )));
        }
        Grid::new(frames / s, bins / s)
    }
}

/// Cuts `[T, F]` into `[P, S·S]` rows, each patch flattened time-major.
pub fn patchify(values: &Tensor, patch_size: usize) -> Result<(Tensor, Grid)> {
    let (t, f) = values.dims2("patchify")?;
    let s = patch_size;
    let grid = PatchConfig {
        patch_size: s,
        embed_dim: 0,
    }
    .grid(t, f)?;
    let src = values.data();
    let mut out = Vec::with_capacity(t * f);
    for gt in 0..grid.time {
        for gf in 0..grid.freq {
            for i in 0..s {
                let row = (gt * s + i) * f + gf * s;
                out.extend_from_slice(&src[row..row + s]);
            }
        }
    }
    Ok((Tensor::new(vec![grid.cells(), s * s], out)?, grid))
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid: Grid, patch_size: usize) -> Result<Tensor> {
    let s = patch_size;
    if patches.shape() != [grid.cells(), s * s] {
        return Err(EatError::Invalid(format!(
            "patch matrix {:?} does not match grid {grid} with patch size {s}",
            patches.shape()
        )));
    }
    let (t, f) = (grid.time * s, grid.freq * s);
    let mut out = vec![0.0; t * f];
    for (p, patch) in patches.data().chunks(s * s).enumerate() {
        let (gt, gf) = grid.coords(p);
        for i in 0..s {
            let row = (gt * s + i) * f + gf * s;
            out[row..row + s].copy_from_slice(&patch[i * s..(i + 1) * s]);
        }
    }
    Ok(Tensor::new(vec![t, f], out)?)
}

/// Embedded patches, one row per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub embeddings: Tensor,
    pub grid: Grid,
    positional: bool,
}

impl PatchGrid {
    pub fn new(embeddings: Tensor, grid: Grid) -> Result<Self> {
        let (p, _) = embeddings.dims2("patch grid")?;
        if p != grid.cells() {
            return Err(EatError::Invalid(format!(
                "{p} embeddings for a {grid} grid"
            )));
        }
        Ok(Self {
            embeddings,
            grid,
            positional: false,
        })
    }

    pub fn has_positional(&self) -> bool {
        self.positional
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Adds [`positional_table`]; applying it twice is an error.
    pub fn add_positional(self) -> Result<Self> {
        if self.positional {
            return Err(EatError::Invalid("positional encoding already applied".into()));
        }
        let table = positional_table(self.grid.cells(), self.embed_dim());
        Ok(Self {
            embeddings: self.embeddings.add(&table)?,
            positional: true,
            ..self
        })
    }
}

fn check_kernel(weight: &Tensor, bias: &Tensor, s: usize) -> Result<usize> {
    match weight.shape() {
        &[e, 1, kh, kw] if kh == s && kw == s && bias.shape() == [e] => Ok(e),
        other => Err(EatError::Invalid(format!(
            "patch kernel {other:?} / bias {:?} do not fit patch size {s}",
            bias.shape()
        ))),
    }
}

/// Stride-S, kernel-S convolution with one input channel. `weight` is `[E, 1, S, S]`.
pub fn patch_embed(values: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<PatchGrid> {
    let s = weight.shape().get(2).copied().unwrap_or(0);
    let e = check_kernel(weight, bias, s)?;
    let (patches, grid) = patchify(values, s)?;
    let w = weight.reshape(vec![e, s * s])?.transpose()?;
    let mut out = matmul(&patches, &w)?;
    for row in out.data_mut().chunks_mut(e) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    PatchGrid::new(out, grid)
}

/// [`patch_embed`] on a tape, from precomputed [`patchify`] rows.
pub fn patch_embed_on(tape: &mut Tape, patches: &Tensor, weight: Var, bias: Var) -> Result<Var> {
    let s = tape.value(weight).shape().get(2).copied().unwrap_or(0);
    let e = check_kernel(tape.value(weight), tape.value(bias), s)?;
    let x = tape.constant(patches.clone());
    let w = tape.reshape(weight, vec![e, s * s])?;
    Ok(tape.linear(x, w, Some(bias))?)
}

/// Fixed sinusoidal table: `pe[p, 2i] = sin(p / 10000^(2i/E))`, `pe[p, 2i+1] = cos(...)`.
pub fn positional_table(positions: usize, dim: usize) -> Tensor {
    Tensor::from_fn(vec![positions, dim], |k| {
        let (p, c) = (k / dim, k % dim);
        let angle = p as f64 / 10_000f64.powf((c - c % 2) as f64 / dim as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `[1 + P, E]` with the CLS row first. The CLS row gets no positional encoding.
pub fn prepend_cls(pg: &PatchGrid, cls: &Tensor) -> Result<Tensor> {
    let e = pg.embed_dim();
    if cls.shape() != [1, e] {
        return Err(EatError::Invalid(format!("cls token {:?}, expected [1, {e}]", cls.shape())));
    }
    let mut data = cls.data().to_vec();
    data.extend_from_slice(pg.embeddings.data());
    Ok(Tensor::new(vec![pg.grid.cells() + 1, e], data)?)
}
