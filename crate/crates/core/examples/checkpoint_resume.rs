//! Stops a run halfway through the first incremental task, saves a
//! checkpoint, and resumes from the file. The resumed run ends with the
//! same head as an uninterrupted one.

use emseg::checkpoint::{read_checkpoint, write_checkpoint};
use emseg::data::{generate, SyntheticSpec};
use emseg::engine::{advance_stream, resume_stream, run_stream, start_stream, RunConfig, StreamLog};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bench = generate(&SyntheticSpec::default())?;
    let cfg = RunConfig::benchmark();

    let mut log = StreamLog::default();
    let mut state = start_stream(&bench, &cfg, &mut log)?;
    let half = bench.schedule.tasks[0].len() / 2;
    advance_stream(&bench, &cfg, &mut state, &mut log, Some(half))?;
    let path = std::env::temp_dir().join(format!("emseg-{}.ssck", std::process::id()));
    write_checkpoint(&path, &state)?;
    println!(
        "checkpoint after batch {} of task {}: {} bytes, memory holds {}",
        state.batch_index,
        state.task,
        std::fs::metadata(&path)?.len(),
        state.memory.len()
    );

    let resumed = resume_stream(&bench, &cfg, read_checkpoint(&path)?)?;
    std::fs::remove_file(&path)?;
    let full = run_stream(&bench, &cfg)?;
    for (a, b) in resumed.tasks.iter().zip(&full.tasks[1..]) {
        println!(
            "task {}: resumed mIoU {:.4}, uninterrupted {:.4}",
            a.task, a.miou, b.miou
        );
    }
    println!("final heads identical: {}", resumed.state.head == full.state.head);
    Ok(())
}
