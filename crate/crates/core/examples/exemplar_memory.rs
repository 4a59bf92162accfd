//! Streams a 90/10 class-skewed sequence into a class-balanced memory and
//! into a plain reservoir, then compares what each kept.

use std::sync::Arc;

use emseg::memory::{ExemplarMemory, Policy};
use emseg::rng::{substream, Stream};
use emseg::{FeatureMap, LabelId, Sample};
use rand::Rng;

fn main() -> emseg::Result<()> {
    let mut stream = substream(42, Stream::Datagen);
    let samples: Vec<Arc<Sample>> = (0..500u64)
        .map(|id| {
            let class = if stream.random::<f64>() < 0.9 { 1 } else { 2 };
            Arc::new(Sample::new(id, FeatureMap::zeros(1, 1, 1), vec![Some(LabelId(class))], 1).unwrap())
        })
        .collect();

    for policy in [Policy::ClassBalanced, Policy::Reservoir] {
        let mut memory = ExemplarMemory::new(40)?;
        let mut rng = substream(0, Stream::Reservoir);
        for s in &samples {
            memory.offer(s.clone(), policy, 2, &mut rng)?;
        }
        println!(
            "{policy:?}: {} stored, buckets {:?}, seen {:?}",
            memory.len(),
            memory.bucket_sizes(),
            memory.seen_counts()
        );
    }
    Ok(())
}
