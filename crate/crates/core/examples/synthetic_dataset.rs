//! Write a synthetic fundus dataset with a manifest.
//!
//! cargo run --example synthetic_dataset -- <dir> [count] [size] [train-count] [seed]
//!
//! The first `train-count` images (default: all but one) form the training
//! split, the rest the test split.

use std::path::PathBuf;

use retina_forge::io::{DatasetName, SplitSpec};
use retina_forge::synthetic::{write_synthetic_dataset, SyntheticConfig};

fn main() -> retina_forge::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_dataset <dir> [count] [size] [train-count] [seed]");
        std::process::exit(2);
    };
    let arg = |i: usize, default: usize| args.get(i).map_or(default, |s| s.parse().expect("a whole number"));
    let count = arg(1, 4);
    let size = arg(2, 128);
    let k = arg(3, count.saturating_sub(1).max(1));
    let config = SyntheticConfig { width: size, height: size, ..SyntheticConfig::default() };
    let path = write_synthetic_dataset(&dir, DatasetName::Custom, count, SplitSpec::FirstK { k }, &config, arg(4, 1) as u64)?;
    println!("{}", path.display());
    Ok(())
}
