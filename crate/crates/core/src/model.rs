//! Per-pixel linear classifier head with optional cosine normalization.
//!
//! With [`Scoring::Cosine`] the logit of class `m` at a pixel with feature
//! `f` is `temperature * cos(u_m, f)`, where `u_m` is column `m` of the
//! weight matrix. [`Scoring::Dot`] uses the raw inner product `u_m · f`,
//! which is the plain softmax classifier used by the replay baseline.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{FeatureMap, LabelId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    Cosine,
    Dot,
}

/// Classifier weights, one column per class, background in column 0.
///
/// Columns are stored contiguously so `weights()[m * depth..(m + 1) * depth]`
/// is `u_m`. Gradients passed to [`CosineHead::sgd_step`] use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineHead {
    depth: usize,
    temperature: f64,
    scoring: Scoring,
    class_order: Vec<LabelId>,
    weights: Vec<f64>,
}

fn random_unit<R: Rng + ?Sized>(depth: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..depth).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl CosineHead {
    /// New head over background plus `classes`, columns drawn as random unit
    /// vectors.
    pub fn new<R: Rng + ?Sized>(
        depth: usize,
        classes: &BTreeSet<LabelId>,
        temperature: f64,
        scoring: Scoring,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Shape("feature depth must be positive".into()));
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Error::Numeric("temperature"));
        }
        let mut head = Self {
            depth,
            temperature,
            scoring,
            class_order: vec![LabelId::BACKGROUND],
            weights: random_unit(depth, rng),
        };
        let foreground: BTreeSet<_> = classes.iter().copied().filter(|c| !c.is_background()).collect();
        head.expand(&foreground, rng)?;
        Ok(head)
    }

    /// Builds a head from explicit column-contiguous weights.
    pub fn from_weights(
        depth: usize,
        class_order: Vec<LabelId>,
        weights: Vec<f64>,
        temperature: f64,
        scoring: Scoring,
    ) -> Result<Self> {
        if depth == 0 || weights.len() != depth * class_order.len() {
            return Err(Error::Shape(format!(
                "{} weights for depth {depth} and {} classes",
                weights.len(),
                class_order.len()
            )));
        }
        let unique: BTreeSet<_> = class_order.iter().collect();
        if unique.len() != class_order.len() {
            return Err(Error::LabelSpace("duplicate class column".into()));
        }
        let head = Self {
            depth,
            temperature,
            scoring,
            class_order,
            weights,
        };
        head.check_columns()?;
        Ok(head)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn scoring(&self) -> Scoring {
        self.scoring
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    pub fn class_order(&self) -> &[LabelId] {
        &self.class_order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn column(&self, m: usize) -> &[f64] {
        &self.weights[m * self.depth..(m + 1) * self.depth]
    }

    pub fn column_of(&self, class: LabelId) -> Option<usize> {
        self.class_order.iter().position(|c| *c == class)
    }

    fn check_columns(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Numeric("head weights"));
        }
        for m in 0..self.num_classes() {
            if norm(self.column(m)) <= 0.0 {
                return Err(Error::Numeric("head column with zero norm"));
            }
        }
        Ok(())
    }

    /// Appends one random unit column per new class, in ascending id order.
    /// Existing columns are left untouched.
    pub fn expand<R: Rng + ?Sized>(&mut self, new_classes: &BTreeSet<LabelId>, rng: &mut R) -> Result<()> {
        if let Some(dup) = new_classes.iter().find(|c| self.class_order.contains(c)) {
            return Err(Error::LabelSpace(format!("class {dup} already has a column")));
        }
        for &class in new_classes {
            let col = random_unit(self.depth, rng);
            self.weights.extend_from_slice(&col);
            self.class_order.push(class);
        }
        Ok(())
    }

    fn check_depth(&self, features: &FeatureMap) -> Result<()> {
        if features.depth != self.depth {
            return Err(Error::Shape(format!(
                "feature depth {} does not match head depth {}",
                features.depth, self.depth
            )));
        }
        Ok(())
    }

    /// Pre-softmax scores, pixel-major with `num_classes` entries per pixel.
    pub fn logits(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        self.check_depth(features)?;
        let c = self.num_classes();
        let col_norms: Vec<f64> = (0..c).map(|m| norm(self.column(m))).collect();
        let mut out = vec![0.0; features.num_pixels() * c];
        let mut f = vec![0.0f64; self.depth];
        for p in 0..features.num_pixels() {
            for (dst, &src) in f.iter_mut().zip(features.pixel(p)) {
                *dst = f64::from(src);
            }
            let row = &mut out[p * c..(p + 1) * c];
            match self.scoring {
                Scoring::Dot => {
                    for (m, slot) in row.iter_mut().enumerate() {
                        *slot = dot(self.column(m), &f);
                    }
                }
                Scoring::Cosine => {
                    let f_norm = norm(&f);
                    if f_norm == 0.0 {
                        // uniform logits for a zero feature vector
                        continue;
                    }
                    for (m, slot) in row.iter_mut().enumerate() {
                        *slot = self.temperature * dot(self.column(m), &f) / (col_norms[m] * f_norm);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn forward(&self, features: &FeatureMap) -> Result<ProbMap> {
        let mut probs = self.logits(features)?;
        let c = self.num_classes();
        for row in probs.chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(ProbMap {
            height: features.height,
            width: features.width,
            classes: self.class_order.clone(),
            probs,
        })
    }

    /// Chain-rules a gradient with respect to the logits into the weights.
    pub fn backward(&self, features: &FeatureMap, grad_logits: &[f64]) -> Result<Vec<f64>> {
        self.check_depth(features)?;
        let c = self.num_classes();
        if grad_logits.len() != features.num_pixels() * c {
            return Err(Error::Shape(format!(
                "logit gradient has {} entries, expected {}",
                grad_logits.len(),
                features.num_pixels() * c
            )));
        }
        let d = self.depth;
        let mut grad = vec![0.0; self.weights.len()];
        match self.scoring {
            Scoring::Dot => {
                for p in 0..features.num_pixels() {
                    let f = features.pixel(p);
                    for m in 0..c {
                        let g = grad_logits[p * c + m];
                        if g == 0.0 {
                            continue;
                        }
                        for (dst, &x) in grad[m * d..(m + 1) * d].iter_mut().zip(f) {
                            *dst += g * f64::from(x);
                        }
                    }
                }
            }
            Scoring::Cosine => {
                // d logit_m / d u_m = T / |u_m| * (f_hat - cos_m * u_hat_m)
                let col_norms: Vec<f64> = (0..c).map(|m| norm(self.column(m))).collect();
                let mut dir_sum = vec![0.0; self.weights.len()];
                let mut cos_sum = vec![0.0; c];
                let mut f_hat = vec![0.0f64; d];
                for p in 0..features.num_pixels() {
                    for (dst, &src) in f_hat.iter_mut().zip(features.pixel(p)) {
                        *dst = f64::from(src);
                    }
                    let f_norm = norm(&f_hat);
                    if f_norm == 0.0 {
                        continue;
                    }
                    f_hat.iter_mut().for_each(|x| *x /= f_norm);
                    for m in 0..c {
                        let g = grad_logits[p * c + m];
                        if g == 0.0 {
                            continue;
                        }
                        let cos = dot(self.column(m), &f_hat) / col_norms[m];
                        cos_sum[m] += g * cos;
                        for (dst, &x) in dir_sum[m * d..(m + 1) * d].iter_mut().zip(&f_hat) {
                            *dst += g * x;
                        }
                    }
                }
                for m in 0..c {
                    let scale = self.temperature / col_norms[m];
                    let u = self.column(m);
                    for k in 0..d {
                        let u_hat = u[k] / col_norms[m];
                        grad[m * d + k] = scale * (dir_sum[m * d + k] - cos_sum[m] * u_hat);
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Plain SGD update `weights -= lr * grad`. Nothing changes on error.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, head has {}",
                grad.len(),
                self.weights.len()
            )));
        }
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Numeric("learning rate"));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("gradient"));
        }
        let updated: Vec<f64> = self.weights.iter().zip(grad).map(|(w, g)| w - lr * g).collect();
        let previous = std::mem::replace(&mut self.weights, updated);
        if let Err(e) = self.check_columns() {
            self.weights = previous;
            return Err(e);
        }
        Ok(())
    }

    /// Per-pixel argmax label.
    pub fn predict(&self, features: &FeatureMap) -> Result<Vec<LabelId>> {
        Ok(self.forward(features)?.argmax_labels())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Per-pixel class probabilities over the head's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<LabelId>,
    pub probs: Vec<f64>,
}

impl ProbMap {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.num_classes();
        &self.probs[p * c..(p + 1) * c]
    }

    pub fn column_of(&self, class: LabelId) -> Option<usize> {
        self.classes.iter().position(|c| *c == class)
    }

    pub fn prob(&self, p: usize, class: LabelId) -> Option<f64> {
        self.column_of(class).map(|m| self.pixel(p)[m])
    }

    pub fn argmax_labels(&self) -> Vec<LabelId> {
        (0..self.num_pixels())
            .map(|p| {
                let row = self.pixel(p);
                let mut best = 0;
                for (m, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = m;
                    }
                }
                self.classes[best]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the logits, laid out like [`ProbMap::probs`].
    pub grad_logits: Vec<f64>,
    pub labeled_pixels: usize,
    pub latent_pixels: usize,
}

/// Two-term loss over one sample.
///
/// The first term is the mean cross-entropy over pixels that carry a label
/// (ground truth or pseudo label). The second is `gamma` times the mean over
/// `latent` pixels of `-log sum_{z not in excluded} p(z)`, which pushes
/// still-unlabeled pixels out of the origin task's class group `excluded`.
pub fn composite_loss(
    probs: &ProbMap,
    mask: &[Option<LabelId>],
    latent: &[bool],
    excluded: &BTreeSet<LabelId>,
    gamma: f64,
) -> Result<LossOutput> {
    let n = probs.num_pixels();
    if mask.len() != n || latent.len() != n {
        return Err(Error::Shape(format!(
            "mask/latent sizes {}/{} do not match {n} pixels",
            mask.len(),
            latent.len()
        )));
    }
    let c = probs.num_classes();
    let allowed: Vec<bool> = probs.classes.iter().map(|k| !excluded.contains(k)).collect();
    let labeled_pixels = mask.iter().filter(|l| l.is_some()).count();
    let latent_pixels = latent.iter().filter(|&&l| l).count();
    if latent_pixels > 0 && gamma != 0.0 && !allowed.iter().any(|&a| a) {
        return Err(Error::LabelSpace(
            "every column is excluded from the latent term".into(),
        ));
    }

    let mut loss = 0.0;
    let mut grad = vec![0.0; n * c];
    let ce_scale = if labeled_pixels > 0 {
        1.0 / labeled_pixels as f64
    } else {
        0.0
    };
    let latent_scale = if latent_pixels > 0 {
        gamma / latent_pixels as f64
    } else {
        0.0
    };

    for p in 0..n {
        let row = probs.pixel(p);
        let g = &mut grad[p * c..(p + 1) * c];
        if let Some(label) = mask[p] {
            let target = probs
                .column_of(label)
                .ok_or_else(|| Error::LabelSpace(format!("label {label} has no classifier column")))?;
            loss -= ce_scale * row[target].max(f64::MIN_POSITIVE).ln();
            for (m, slot) in g.iter_mut().enumerate() {
                let onehot = if m == target { 1.0 } else { 0.0 };
                *slot += ce_scale * (row[m] - onehot);
            }
        } else if latent[p] && latent_scale != 0.0 {
            let mass: f64 = row.iter().zip(&allowed).filter(|(_, &a)| a).map(|(v, _)| v).sum();
            let mass = mass.max(f64::MIN_POSITIVE);
            loss -= latent_scale * mass.ln();
            for (m, slot) in g.iter_mut().enumerate() {
                let inside = if allowed[m] { row[m] / mass } else { 0.0 };
                *slot += latent_scale * (row[m] - inside);
            }
        }
    }
    Ok(LossOutput {
        loss,
        grad_logits: grad,
        labeled_pixels,
        latent_pixels,
    })
}

/// Loss and weight gradient of [`composite_loss`] for one sample.
pub fn loss_and_grad(
    head: &CosineHead,
    features: &FeatureMap,
    mask: &[Option<LabelId>],
    latent: &[bool],
    excluded: &BTreeSet<LabelId>,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let probs = head.forward(features)?;
    let out = composite_loss(&probs, mask, latent, excluded, gamma)?;
    let grad = head.backward(features, &out.grad_logits)?;
    Ok((out.loss, grad))
}

/// Largest relative discrepancy between the analytic weight gradient and a
/// central finite-difference estimate, with denominator `max(|a|, |b|, 1e-8)`.
pub fn grad_check(
    head: &CosineHead,
    features: &FeatureMap,
    mask: &[Option<LabelId>],
    latent: &[bool],
    excluded: &BTreeSet<LabelId>,
    gamma: f64,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_grad(head, features, mask, latent, excluded, gamma)?;
    let mut probe = head.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.weights[i];
        probe.weights[i] = original + eps;
        let plus = composite_loss(&probe.forward(features)?, mask, latent, excluded, gamma)?.loss;
        probe.weights[i] = original - eps;
        let minus = composite_loss(&probe.forward(features)?, mask, latent, excluded, gamma)?.loss;
        probe.weights[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
