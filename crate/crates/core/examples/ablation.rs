//! Adds the components one at a time on top of experience replay and
//! reports mean imIoU for each configuration.
//!
//! Usage: `cargo run --release --example ablation [SEEDS]`

use emseg::data::{generate, SyntheticSpec};
use emseg::engine::{run_stream, Method, RunConfig, Toggles};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let none = Toggles::none();
    let ladder = [
        ("experience replay", none),
        ("+ class-balanced memory", Toggles { cbes: true, ..none }),
        (
            "+ relabeling and composite loss",
            Toggles {
                cbes: true,
                relabel_composite: true,
                ..none
            },
        ),
        (
            "+ cosine head",
            Toggles {
                dynamic_sampling: false,
                ..Toggles::all()
            },
        ),
        ("+ dynamic sampling", Toggles::all()),
    ];
    let mut sums = vec![0.0; ladder.len()];
    for seed in 0..seeds {
        let bench = generate(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })?;
        for (i, (_, toggles)) in ladder.iter().enumerate() {
            let method = if i == 0 { Method::Er } else { Method::Ours };
            let cfg = RunConfig {
                seed,
                method,
                toggles: *toggles,
                ..RunConfig::benchmark()
            };
            sums[i] += run_stream(&bench, &cfg)?.imiou;
        }
    }
    for ((name, _), s) in ladder.iter().zip(sums) {
        println!("{name:<34} {:.2}", 100.0 * s / seeds as f64);
    }
    Ok(())
}
