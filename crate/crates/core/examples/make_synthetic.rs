//! Regenerates the bundled synthetic benchmark.
//!
//! Usage: `cargo run -p edabench-core --example make_synthetic [DIR] [SEED]`

use std::path::PathBuf;

use edabench_core::synthetic;

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map_or_else(|| PathBuf::from("data/synthetic"), PathBuf::from);
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(synthetic::DEFAULT_SEED);
    synthetic::generate(&dir, seed)?;
    println!("wrote synthetic benchmark to {}", dir.display());
    Ok(())
}
