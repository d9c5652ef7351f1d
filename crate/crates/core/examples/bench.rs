//! Times forward passes of every mechanism and checks the pair ordering.
//! The peak-memory column is filled only by the `motionseg` binary, which
//! installs the counting allocator.

use motionseg::cli::{cmd_bench, pair_ordering, BenchSettings, RunConfig};
use motionseg::fusion::{Mechanism, Modality};
use motionseg::trainer::desk;

fn main() -> motionseg::Result<()> {
    let cfg = RunConfig {
        model: desk::model(Mechanism::Single, Modality::Rgb),
        bench: BenchSettings { height: 96, width: 96, repeats: 3, ..Default::default() },
        ..Default::default()
    };
    let rows = cmd_bench(&cfg, None)?;
    for r in &rows {
        println!("{}", r.table_line());
    }
    println!("single < mbt < d <= ed: {:?}", pair_ordering(&rows));
    Ok(())
}
