//! Trains the base head, then relabels an incremental image whose old-class
//! and background pixels arrive unannotated.

use std::collections::BTreeMap;

use emseg::data::{generate, SyntheticSpec};
use emseg::engine::{relabel, train_offline, RunConfig};
use emseg::model::CosineHead;
use emseg::rng::RunRngs;

fn main() -> emseg::Result<()> {
    let bench = generate(&SyntheticSpec::default())?;
    let space = &bench.schedule.label_space;
    let cfg = RunConfig::benchmark();
    let mut rngs = RunRngs::new(0);
    let mut head = CosineHead::new(
        16,
        &space.classes_up_to(0)?,
        cfg.temperature,
        cfg.scoring(),
        &mut rngs.init,
    )?;
    train_offline(&mut head, &bench.schedule.base_dataset, &cfg, &mut rngs)?;
    head.expand(space.group(1)?, &mut rngs.init)?;

    let sample = &bench.schedule.tasks[0][0][0];
    let annotated = sample.mask.iter().filter(|m| m.is_some()).count();
    for delta in [0.5, 0.8, 0.95] {
        let out = relabel(sample, &head, delta, space, 1)?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (new, old) in out.mask.iter().zip(&sample.mask) {
            if old.is_none() {
                let key = new.map_or("latent".to_string(), |c| format!("class {c}"));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        println!(
            "delta {delta}: {annotated} annotated pixels kept, {} pseudo labels, unlabeled pixels now {counts:?}",
            out.pseudo_labels
        );
    }
    Ok(())
}
