//! Turns class confidences into replay probabilities for a few values of
//! eta and draws a replay batch from a small memory.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use emseg::memory::{ExemplarMemory, Policy};
use emseg::rng::{substream, Stream};
use emseg::sampler::{draw_replay_with_classes, sampling_probs, ClassConfidence};
use emseg::{FeatureMap, LabelId, Sample};

fn main() -> emseg::Result<()> {
    let confidences: BTreeMap<LabelId, f64> = [(LabelId(1), 0.95), (LabelId(2), 0.6), (LabelId(3), 0.2)].into();
    let conf = ClassConfidence::from_values(confidences, 0.9)?;
    let classes: BTreeSet<LabelId> = conf.values().keys().copied().collect();
    for eta in [0.0, 1.0, 5.0, 20.0] {
        let dist = sampling_probs(&conf, &classes, eta)?;
        let row: Vec<String> = dist.probs().iter().map(|(c, p)| format!("class {c}: {p:.3}")).collect();
        println!("eta {eta:>4}: {}", row.join(", "));
    }

    let mut memory = ExemplarMemory::new(9)?;
    let mut rng = substream(0, Stream::Reservoir);
    for id in 0..9u64 {
        let class = LabelId(1 + (id % 3) as u16);
        let s = Sample::new(id, FeatureMap::zeros(1, 1, 1), vec![Some(class)], 0)?;
        memory.offer(Arc::new(s), Policy::ClassBalanced, 3, &mut rng)?;
    }
    let dist = sampling_probs(&conf, &classes, 5.0)?;
    let mut rng = substream(0, Stream::Replay);
    let batch = draw_replay_with_classes(&memory, &dist, 6, &mut rng);
    let drawn: Vec<String> = batch.iter().map(|(c, s)| format!("{}<-{c}", s.id)).collect();
    println!("replay batch (sample<-class): {}", drawn.join(" "));
    Ok(())
}
