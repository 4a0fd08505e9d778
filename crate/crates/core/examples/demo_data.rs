//! Writes a synthetic corpus and split file.
//!
//! ```text
//! cargo run --example demo_data -- <dir> [count] [seed]
//! ```

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next().map(PathBuf::from) else {
        eprintln!("usage: demo_data <dir> [count] [seed]");
        return ExitCode::from(2);
    };
    let count = args.next().map_or(Ok(400), |s| s.parse());
    let seed = args.next().map_or(Ok(0), |s| s.parse());
    let (Ok(count), Ok(seed)) = (count, seed) else {
        eprintln!("count and seed must be non-negative integers");
        return ExitCode::from(2);
    };
    match jointstory::synth::write_dataset(&dir, count, seed) {
        Ok((corpus, splits)) => {
            println!("{}\n{}", corpus.display(), splits.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
