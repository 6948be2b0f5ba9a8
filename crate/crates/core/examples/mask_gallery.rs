//! Draws inverse block masks for several block shapes and writes PGM images.
//!
//! `cargo run --example mask_gallery -- [ratio] [out_dir]`

use eat_core::masking::parse_block_list;
use eat_core::pipeline::inspect::{inspect_mask, parse_grid, write_pgm};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ratio: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.8);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let grid = parse_grid("64x8")?;
    for blocks in ["1x1", "2x2", "5x5", "5x5,6x4,8x3"] {
        let r = inspect_mask(grid, ratio, &parse_block_list(blocks)?, 7)?;
        println!("blocks {blocks} (drew {}), {}", r.plan.block_shape, r.summary);
        print!("{}", r.art);
        let path = out.join(format!("mask_{}.pgm", blocks.replace(',', "_")));
        write_pgm(&r.plan, &path, 8)?;
        println!("-> {}\n", path.display());
    }
    Ok(())
}
