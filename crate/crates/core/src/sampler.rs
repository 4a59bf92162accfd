//! Class-confidence tracking and confidence-driven replay.
//!
//! Each class keeps a moving average of the probability the model assigns
//! to pixels carrying that label. Replay classes are drawn from a Gibbs
//! distribution `P(c) ∝ exp(-eta * E(c))`, so poorly predicted classes are
//! revisited more often, and a replay image is then drawn uniformly among
//! stored images containing the chosen class.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng;

use crate::error::{Error, Result};
use crate::label::{LabelId, Sample};
use crate::memory::ExemplarMemory;
use crate::model::ProbMap;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassConfidence {
    values: BTreeMap<LabelId, f64>,
    momentum: f64,
}

impl ClassConfidence {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Domain("momentum must lie in [0, 1]"));
        }
        Ok(Self {
            values: BTreeMap::new(),
            momentum,
        })
    }

    pub fn from_values(values: BTreeMap<LabelId, f64>, momentum: f64) -> Result<Self> {
        let mut conf = Self::new(momentum)?;
        if values.values().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("confidence values must lie in [0, 1]"));
        }
        conf.values = values;
        Ok(conf)
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Confidence of `class`; untracked classes read as 0.
    pub fn get(&self, class: LabelId) -> f64 {
        self.values.get(&class).copied().unwrap_or(0.0)
    }

    pub fn values(&self) -> &BTreeMap<LabelId, f64> {
        &self.values
    }

    /// Sets every listed class back to zero confidence.
    pub fn reset<'a>(&mut self, classes: impl IntoIterator<Item = &'a LabelId>) {
        for c in classes {
            self.values.insert(*c, 0.0);
        }
    }

    /// Folds one training batch into the moving averages. Classes with no
    /// labeled pixel in the batch are left untouched. Returns the batch
    /// means that were applied.
    pub fn update<'a>(
        &mut self,
        batch: impl IntoIterator<Item = (&'a ProbMap, &'a [Option<LabelId>])>,
    ) -> Result<BTreeMap<LabelId, f64>> {
        let mut sums: BTreeMap<LabelId, (f64, usize)> = BTreeMap::new();
        for (probs, mask) in batch {
            if mask.len() != probs.num_pixels() {
                return Err(Error::Shape(format!(
                    "mask of {} pixels for a {}-pixel probability map",
                    mask.len(),
                    probs.num_pixels()
                )));
            }
            for (p, label) in mask.iter().enumerate() {
                let Some(label) = label else { continue };
                let Some(col) = probs.column_of(*label) else {
                    return Err(Error::LabelSpace(format!("label {label} has no classifier column")));
                };
                let entry = sums.entry(*label).or_insert((0.0, 0));
                entry.0 += probs.pixel(p)[col];
                entry.1 += 1;
            }
        }
        let means: BTreeMap<LabelId, f64> = sums.into_iter().map(|(c, (total, n))| (c, total / n as f64)).collect();
        for (&c, &mean) in &means {
            let old = self.get(c);
            let new = self.momentum * old + (1.0 - self.momentum) * mean;
            self.values.insert(c, new.clamp(0.0, 1.0));
        }
        Ok(means)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDistribution {
    probs: BTreeMap<LabelId, f64>,
    eta: f64,
}

impl SamplingDistribution {
    pub fn uniform(classes: &BTreeSet<LabelId>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Domain("sampling distribution needs at least one class"));
        }
        let p = 1.0 / classes.len() as f64;
        Ok(Self {
            probs: classes.iter().map(|&c| (c, p)).collect(),
            eta: 0.0,
        })
    }

    /// Rebuilds a stored distribution, checking that it is one.
    pub fn from_parts(probs: BTreeMap<LabelId, f64>, eta: f64) -> Result<Self> {
        let total: f64 = probs.values().sum();
        if probs.is_empty() || probs.values().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(
                "stored sampling probabilities do not form a distribution",
            ));
        }
        Ok(Self { probs, eta })
    }

    pub fn probs(&self) -> &BTreeMap<LabelId, f64> {
        &self.probs
    }

    pub fn prob(&self, class: LabelId) -> f64 {
        self.probs.get(&class).copied().unwrap_or(0.0)
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }
}

/// Gibbs distribution over `classes` (background is dropped).
pub fn sampling_probs(conf: &ClassConfidence, classes: &BTreeSet<LabelId>, eta: f64) -> Result<SamplingDistribution> {
    let classes: Vec<LabelId> = classes.iter().copied().filter(|c| !c.is_background()).collect();
    if classes.is_empty() {
        return Err(Error::Domain("sampling distribution needs at least one class"));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::Domain("eta must be finite and nonnegative"));
    }
    // shifting by the smallest energy keeps every exponent <= 0
    let energies: Vec<f64> = classes.iter().map(|&c| eta * conf.get(c)).collect();
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = energies.iter().map(|e| (-(e - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(SamplingDistribution {
        probs: classes.into_iter().zip(weights).map(|(c, w)| (c, w / total)).collect(),
        eta,
    })
}

/// `count` replay draws as `(class drawn, sample)` pairs.
///
/// Classes with no stored sample are dropped and the remaining mass is
/// renormalized. Within one call a class pool is drawn without replacement
/// until it runs dry, then with replacement.
pub fn draw_replay_with_classes<R: Rng + ?Sized>(
    mem: &ExemplarMemory,
    dist: &SamplingDistribution,
    count: usize,
    rng: &mut R,
) -> Vec<(LabelId, Arc<Sample>)> {
    if count == 0 || mem.is_empty() {
        return Vec::new();
    }
    let pools: Vec<(LabelId, f64, Vec<Arc<Sample>>)> = dist
        .probs
        .iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|(&c, &p)| (c, p, mem.samples_with_class(c)))
        .filter(|(_, _, pool)| !pool.is_empty())
        .collect();
    if pools.is_empty() {
        return Vec::new();
    }
    let total: f64 = pools.iter().map(|(_, p, _)| p).sum();
    let mut used: BTreeSet<u64> = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut target = rng.random::<f64>() * total;
        let mut chosen = pools.len() - 1;
        for (i, (_, p, _)) in pools.iter().enumerate() {
            if target < *p {
                chosen = i;
                break;
            }
            target -= p;
        }
        let (class, _, pool) = &pools[chosen];
        let fresh: Vec<&Arc<Sample>> = pool.iter().filter(|s| !used.contains(&s.id)).collect();
        let pick = if fresh.is_empty() {
            pool[rng.random_range(0..pool.len())].clone()
        } else {
            fresh[rng.random_range(0..fresh.len())].clone()
        };
        used.insert(pick.id);
        out.push((*class, pick));
    }
    out
}

pub fn draw_replay<R: Rng + ?Sized>(
    mem: &ExemplarMemory,
    dist: &SamplingDistribution,
    count: usize,
    rng: &mut R,
) -> Vec<Arc<Sample>> {
    draw_replay_with_classes(mem, dist, count, rng)
        .into_iter()
        .map(|(_, s)| s)
        .collect()
}

/// Uniform replay over stored samples, without replacement when the memory
/// holds at least `count` samples.
pub fn draw_uniform<R: Rng + ?Sized>(mem: &ExemplarMemory, count: usize, rng: &mut R) -> Vec<Arc<Sample>> {
    if count == 0 || mem.is_empty() {
        return Vec::new();
    }
    let all: Vec<&Arc<Sample>> = mem.iter().map(|(_, s)| s).collect();
    if all.len() >= count {
        sample_indices(rng, all.len(), count)
            .into_iter()
            .map(|i| all[i].clone())
            .collect()
    } else {
        (0..count)
            .map(|_| all[rng.random_range(0..all.len())].clone())
            .collect()
    }
}
