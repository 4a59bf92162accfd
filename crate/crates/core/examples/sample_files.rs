//! Writes a generated benchmark to disk, reloads it, and shows what a
//! corrupted sample file looks like to the reader.

use emseg::data::{dataset_hash, decode_sample, encode_sample, generate, load_dataset, write_dataset, SyntheticSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("emseg-sample-files-{}", std::process::id()));
    let spec = SyntheticSpec::default();
    let bench = generate(&spec)?;
    let hash = write_dataset(&dir, &bench, Some(&spec))?;
    println!("wrote {} (hash {hash})", dir.display());
    assert_eq!(hash, dataset_hash(&dir)?);

    let loaded = load_dataset(&dir)?;
    let first = &loaded.schedule.base_dataset[0];
    println!(
        "reloaded {} base samples, {} tasks; first sample is {}x{}x{}",
        loaded.schedule.base_dataset.len(),
        loaded.schedule.tasks.len(),
        first.height(),
        first.width(),
        first.features.depth
    );

    let mut bytes = encode_sample(first);
    println!("one sample file is {} bytes", bytes.len());
    bytes[2] = b'?';
    match decode_sample(&bytes, 0) {
        Err(e) => println!("corrupted magic: {e}"),
        Ok(_) => unreachable!("a corrupted magic must be rejected"),
    }
    bytes.truncate(100);
    bytes[2] = b'M';
    if let Err(e) = decode_sample(&bytes, 0) {
        println!("truncated file: {e}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
