//! Write procedural faces and their landmark file for desk-scale runs.
//!
//! `cargo run --example synthetic_faces -- <dir> [count] [side] [seed]`

use std::path::PathBuf;

use oracle_attn::synth;
use oracle_attn_cli::io::write_dataset;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_faces <dir> [count=8] [side=64] [seed=0]");
        std::process::exit(1);
    };
    let num = |i: usize, d: u64| {
        args.get(i)
            .map_or(Ok(d), |s| s.parse::<u64>())
            .unwrap_or_else(|e| {
                eprintln!("bad number `{}`: {e}", args[i]);
                std::process::exit(1)
            })
    };
    let (count, side, seed) = (num(1, 8), num(2, 64), num(3, 0));
    let faces = synth::dataset::<f32>(seed, count as usize, side as usize);
    match write_dataset(&dir, &faces) {
        Ok(lm) => println!(
            "{count} images in {}, landmarks in {}",
            dir.display(),
            lm.display()
        ),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.code())
        }
    }
}
