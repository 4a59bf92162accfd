//! Builds a cosine head, checks its analytic gradient against finite
//! differences and takes a few SGD steps on one synthetic image.

use std::collections::BTreeSet;

use emseg::data::{generate, SyntheticSpec};
use emseg::model::{composite_loss, grad_check, loss_and_grad, CosineHead, Scoring};
use emseg::rng::{substream, Stream};
use emseg::LabelId;

fn main() -> emseg::Result<()> {
    let spec = SyntheticSpec::default();
    let bench = generate(&spec)?;
    let sample = &bench.schedule.base_dataset[0];
    let classes = bench.schedule.label_space.classes_up_to(0)?;

    let mut rng = substream(0, Stream::Init);
    let mut head = CosineHead::new(spec.feature_dim, &classes, 12.0, Scoring::Cosine, &mut rng)?;
    let latent = vec![false; sample.mask.len()];
    let none = BTreeSet::new();

    let err = grad_check(&head, &sample.features, &sample.mask, &latent, &none, 0.0, 1e-5)?;
    println!("gradient check: max relative error {err:.2e}");

    for step in 0..=20 {
        let (loss, grad) = loss_and_grad(&head, &sample.features, &sample.mask, &latent, &none, 0.0)?;
        if step % 5 == 0 {
            println!("step {step:>2}: cross-entropy {loss:.4}");
        }
        head.sgd_step(&grad, 0.5)?;
    }

    // the latent term alone: push an unlabeled pixel away from class 1
    let probs = head.forward(&sample.features)?;
    let excluded: BTreeSet<LabelId> = [LabelId(1)].into();
    let mut latent = vec![false; sample.mask.len()];
    latent[0] = true;
    let mut mask = vec![None; sample.mask.len()];
    mask[1] = sample.mask[1];
    let out = composite_loss(&probs, &mask, &latent, &excluded, 0.5)?;
    println!(
        "composite loss on one labeled and one latent pixel: {:.4} ({} labeled, {} latent)",
        out.loss, out.labeled_pixels, out.latent_pixels
    );
    Ok(())
}
