//! Inverse block masking over the patch grid and multi-mask clone sets.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};
use crate::numerics::Tensor;
use crate::patching::{Grid, PatchGrid};
use crate::rng::{derive_seed, stream, Purpose};

/// Stream coordinates under [`Purpose::Mask`].
const PLACEMENT_STREAM: u64 = 0;
const SHAPE_STREAM: u64 = 1;
const CLONE_STREAM: u64 = 2;

/// Block extent in grid cells: `h` along time, `w` along frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    pub h: usize,
    pub w: usize,
}

impl BlockShape {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }
}

impl fmt::Display for BlockShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

impl FromStr for BlockShape {
    type Err = EatError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || EatError::Config(format!("block shape `{s}` is not of the form HxW"));
        let (h, w) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let h: usize = h.trim().parse().map_err(|_| bad())?;
        let w: usize = w.trim().parse().map_err(|_| bad())?;
        if h == 0 || w == 0 {
            return Err(bad());
        }
        Ok(Self { h, w })
    }
}

/// Parses `HxW[,HxW...]`.
pub fn parse_block_list(s: &str) -> Result<Vec<BlockShape>> {
    let shapes = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
    if shapes.is_empty() {
        return Err(EatError::Config("empty block list".into()));
    }
    Ok(shapes)
}

/// One placed block: top-left corner and the extent left after boundary clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub t: usize,
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

impl Placement {
    pub fn contains(&self, t: usize, f: usize) -> bool {
        (self.t..self.t + self.h).contains(&t) && (self.f..self.f + self.w).contains(&f)
    }
}

/// A keep/mask decision for every grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub grid: Grid,
    /// `true` = visible to the student; flattened time-major.
    pub keep: Vec<bool>,
    pub mask_ratio: f64,
    pub block_shape: BlockShape,
    pub seed: u64,
    /// Blocks placed before trimming, in placement order.
    pub placements: Vec<Placement>,
}

/// `round((1 − ratio)·cells)`.
pub fn target_keep(cells: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * cells as f64).round() as usize
}

impl MaskPlan {
    /// Every cell visible.
    pub fn keep_all(grid: Grid) -> Self {
        Self {
            grid,
            keep: vec![true; grid.cells()],
            mask_ratio: 0.0,
            block_shape: BlockShape::new(grid.time, grid.freq),
            seed: 0,
            placements: vec![],
        }
    }

    pub fn keep_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_kept(&self, t: usize, f: usize) -> bool {
        self.keep[self.grid.index(t, f)]
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    /// `#` for kept and `.` for masked cells, one line per frequency row with the
    /// highest row first and time running left to right.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity((self.grid.time + 1) * self.grid.freq);
        for f in (0..self.grid.freq).rev() {
            for t in 0..self.grid.time {
                s.push(if self.is_kept(t, f) { '#' } else { '.' });
            }
            s.push('\n');
        }
        s
    }
}

fn check_args(grid: Grid, ratio: f64, shapes: &[BlockShape]) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(EatError::Invalid(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    if shapes.is_empty() {
        return Err(EatError::Invalid("no block shapes given".into()));
    }
    if let Some(b) = shapes.iter().find(|b| b.h == 0 || b.w == 0 || b.h > grid.time || b.w > grid.freq) {
        return Err(EatError::Invalid(format!("block {b} does not fit grid {grid}")));
    }
    Ok(())
}

/// Starts fully masked, unmasks uniformly placed `block` rectangles (clipped at the
/// grid edge) until at least `round((1 − ratio)·P)` cells are kept, then re-masks
/// uniformly chosen kept cells until the count is exact.
pub fn inverse_block_mask(grid: Grid, ratio: f64, block: BlockShape, seed: u64) -> Result<MaskPlan> {
    check_args(grid, ratio, &[block])?;
    let target = target_keep(grid.cells(), ratio);
    let mut rng = stream(seed, Purpose::Mask, &[PLACEMENT_STREAM]);
    let mut keep = vec![false; grid.cells()];
    let mut kept: Vec<usize> = Vec::with_capacity(target + block.h * block.w);
    let mut placements = Vec::new();
    while kept.len() < target {
        let t = rng.random_range(0..grid.time);
        let f = rng.random_range(0..grid.freq);
        let p = Placement {
            t,
            f,
            h: block.h.min(grid.time - t),
            w: block.w.min(grid.freq - f),
        };
        for dt in 0..p.h {
            for df in 0..p.w {
                let i = grid.index(t + dt, f + df);
                if !keep[i] {
                    keep[i] = true;
                    kept.push(i);
                }
            }
        }
        placements.push(p);
    }
    while kept.len() > target {
        let i = kept.swap_remove(rng.random_range(0..kept.len()));
        keep[i] = false;
    }
    Ok(MaskPlan {
        grid,
        keep,
        mask_ratio: ratio,
        block_shape: block,
        seed,
        placements,
    })
}

/// Uniform choice among `shapes`.
pub fn sample_block_shape(shapes: &[BlockShape], seed: u64) -> Result<BlockShape> {
    if shapes.is_empty() {
        return Err(EatError::Invalid("no block shapes given".into()));
    }
    if shapes.len() == 1 {
        return Ok(shapes[0]);
    }
    let mut rng = stream(seed, Purpose::Mask, &[SHAPE_STREAM]);
    Ok(shapes[rng.random_range(0..shapes.len())])
}

/// [`inverse_block_mask`] with the block shape drawn by [`sample_block_shape`].
pub fn plan_mask(grid: Grid, ratio: f64, shapes: &[BlockShape], seed: u64) -> Result<MaskPlan> {
    check_args(grid, ratio, shapes)?;
    inverse_block_mask(grid, ratio, sample_block_shape(shapes, seed)?, seed)
}

/// Independently masked copies of one clip's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CloneSet {
    pub clones: Vec<MaskPlan>,
}

impl CloneSet {
    pub fn len(&self) -> usize {
        self.clones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clones.is_empty()
    }
}

/// Clone `i` uses a seed derived from `(seed, i)`.
pub fn make_clone_set(
    grid: Grid,
    ratio: f64,
    shapes: &[BlockShape],
    clone_batch: usize,
    seed: u64,
) -> Result<CloneSet> {
    if clone_batch == 0 {
        return Err(EatError::Invalid("clone batch must be at least 1".into()));
    }
    let clones = (0..clone_batch as u64)
        .map(|i| plan_mask(grid, ratio, shapes, derive_seed(seed, Purpose::Mask, &[CLONE_STREAM, i])))
        .collect::<Result<_>>()?;
    Ok(CloneSet { clones })
}

/// Visible rows and the index partition of a masked grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedView {
    pub visible: Tensor,
    pub visible_indices: Vec<usize>,
    pub masked_indices: Vec<usize>,
}

pub fn apply_mask(pg: &PatchGrid, plan: &MaskPlan) -> Result<MaskedView> {
    if pg.grid != plan.grid {
        return Err(EatError::Invalid(format!(
            "mask grid {} does not match patch grid {}",
            plan.grid, pg.grid
        )));
    }
    let visible_indices = plan.visible_indices();
    Ok(MaskedView {
        visible: pg.embeddings.gather_rows(&visible_indices)?,
        visible_indices,
        masked_indices: plan.masked_indices(),
    })
}
