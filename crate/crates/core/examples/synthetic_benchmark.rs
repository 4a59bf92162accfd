//! Full method against plain experience replay on the synthetic benchmark.
//!
//! Usage: `cargo run --release --example synthetic_benchmark [SEEDS]`

use emseg::data::{generate, SyntheticSpec};
use emseg::engine::{run_stream, Method, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(5);
    let (mut ours, mut er) = (0.0, 0.0);
    for seed in 0..seeds {
        let bench = generate(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })?;
        let a = run_stream(
            &bench,
            &RunConfig {
                seed,
                ..RunConfig::benchmark()
            },
        )?;
        let b = run_stream(
            &bench,
            &RunConfig {
                seed,
                method: Method::Er,
                ..RunConfig::benchmark()
            },
        )?;
        let fmt = |v: Vec<f64>| {
            v.iter()
                .map(|m| format!("{:5.1}", 100.0 * m))
                .collect::<Vec<_>>()
                .join(" ")
        };
        println!(
            "seed {seed}: ours {:.2} [{}]   er {:.2} [{}]",
            100.0 * a.imiou,
            fmt(a.per_task_miou()),
            100.0 * b.imiou,
            fmt(b.per_task_miou())
        );
        ours += a.imiou;
        er += b.imiou;
    }
    let n = seeds as f64;
    println!("mean imIoU: ours {:.2}, er {:.2}", 100.0 * ours / n, 100.0 * er / n);
    Ok(())
}
