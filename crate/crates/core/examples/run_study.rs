//! Run one comparison study on the quick preset and print its table.
//!
//!     cargo run --release --example run_study -- size_sweep [n_seeds] [out_dir]
//!
//! Studies: size_sweep, noise_sweep, decoding, hybrid_vs_single.

use kdlab::harness::{ExperimentSpec, Lab, Study};

fn main() -> kdlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let study: Study = args.next().as_deref().unwrap_or("size_sweep").parse()?;
    let n_seeds: u64 = args.next().map_or(3, |a| a.parse().expect("seed count"));
    let out = args.next();

    let mut spec = ExperimentSpec::quick(study);
    spec.seeds = (1..=n_seeds).collect();
    let mut lab = Lab::new(spec)?;
    let report = lab.run(study)?;
    print!("{}", report.to_markdown());
    println!("\nwall time {:.0}s", report.metadata.wall_time_secs);
    if let Some(dir) = out {
        lab.write_outputs(&report, dir.as_ref())?;
        println!("outputs written to {dir}");
    }
    Ok(())
}
