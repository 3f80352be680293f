//! Cost of every (blocks, base width) combination as CSV on stdout.
//!
//!     cargo run --example sweep_csv > sweep.csv

use unet_edge::{analyzer, UNetConfig};

fn main() -> unet_edge::Result<()> {
    let rows = analyzer::sweep(&UNetConfig::default())?;
    print!("{}", analyzer::sweep_csv(&rows));
    Ok(())
}
