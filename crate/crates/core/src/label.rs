//! Label-space bookkeeping, the sample data model and task schedules.
//!
//! Class ids are small integers. Id 0 is the background class, whose id is
//! stable across tasks even though what it covers shrinks as new classes
//! arrive. Pixels without any annotation are `None` in a [`Mask`], which is
//! distinct from the background class.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk sentinel for an unlabeled pixel.
pub const UNLABELED_CODE: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub u16);

impl LabelId {
    pub const BACKGROUND: LabelId = LabelId(0);

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-pixel annotation, row-major. `None` marks an unlabeled pixel.
pub type Mask = Vec<Option<LabelId>>;

/// Base classes plus the ordered incremental class groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    base: BTreeSet<LabelId>,
    groups: Vec<BTreeSet<LabelId>>,
}

impl LabelSpace {
    pub fn new(base: BTreeSet<LabelId>, groups: Vec<BTreeSet<LabelId>>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for class in base.iter().chain(groups.iter().flatten()) {
            if class.is_background() {
                return Err(Error::LabelSpace(
                    "background cannot be a member of a class group".into(),
                ));
            }
            if class.0 == UNLABELED_CODE {
                return Err(Error::LabelSpace(format!("class id {UNLABELED_CODE:#x} is reserved")));
            }
            if !seen.insert(*class) {
                return Err(Error::LabelSpace(format!(
                    "class {class} appears in more than one group"
                )));
            }
        }
        if let Some(empty) = groups.iter().position(BTreeSet::is_empty) {
            return Err(Error::LabelSpace(format!("incremental group {} is empty", empty + 1)));
        }
        Ok(Self { base, groups })
    }

    /// Contiguous split: `base` classes `1..=base`, then one group per entry
    /// of `group_sizes`.
    pub fn contiguous(base: u16, group_sizes: &[u16]) -> Result<Self> {
        let base_set = (1..=base).map(LabelId).collect();
        let mut next = base + 1;
        let mut groups = Vec::with_capacity(group_sizes.len());
        for &size in group_sizes {
            groups.push((next..next + size).map(LabelId).collect());
            next += size;
        }
        Self::new(base_set, groups)
    }

    pub fn num_tasks(&self) -> usize {
        self.groups.len()
    }

    pub fn base(&self) -> &BTreeSet<LabelId> {
        &self.base
    }

    /// Class group introduced at task `t`; task 0 introduces the base classes.
    pub fn group(&self, t: usize) -> Result<&BTreeSet<LabelId>> {
        match t {
            0 => Ok(&self.base),
            _ => self.groups.get(t - 1).ok_or(Error::Range {
                index: t,
                available: self.groups.len(),
            }),
        }
    }

    /// Foreground classes seen up to and including task `t`.
    pub fn classes_up_to(&self, t: usize) -> Result<BTreeSet<LabelId>> {
        if t > self.groups.len() {
            return Err(Error::Range {
                index: t,
                available: self.groups.len(),
            });
        }
        let mut out = self.base.clone();
        for group in &self.groups[..t] {
            out.extend(group.iter().copied());
        }
        Ok(out)
    }

    /// `classes_up_to(t)` plus background.
    pub fn classes_with_background(&self, t: usize) -> Result<BTreeSet<LabelId>> {
        let mut out = self.classes_up_to(t)?;
        out.insert(LabelId::BACKGROUND);
        Ok(out)
    }

    pub fn total_classes(&self) -> usize {
        self.base.len() + self.groups.iter().map(BTreeSet::len).sum::<usize>()
    }

    /// Task whose group contains `class`.
    pub fn task_of(&self, class: LabelId) -> Option<usize> {
        if self.base.contains(&class) {
            return Some(0);
        }
        self.groups.iter().position(|g| g.contains(&class)).map(|i| i + 1)
    }
}

/// Dense H×W×D activations, row-major with channel innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * depth {
            return Err(Error::Shape(format!(
                "feature buffer has {} values, expected {height}x{width}x{depth}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        Self {
            height,
            width,
            depth,
            data: vec![0.0; height * width * depth],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.depth..(index + 1) * self.depth]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.data[index * self.depth..(index + 1) * self.depth]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub features: FeatureMap,
    pub mask: Mask,
    pub origin_task: u16,
}

impl Sample {
    pub fn new(id: u64, features: FeatureMap, mask: Mask, origin_task: u16) -> Result<Self> {
        if mask.len() != features.num_pixels() {
            return Err(Error::Shape(format!(
                "mask has {} pixels, feature map has {}",
                mask.len(),
                features.num_pixels()
            )));
        }
        Ok(Self {
            id,
            features,
            mask,
            origin_task,
        })
    }

    pub fn height(&self) -> usize {
        self.features.height
    }

    pub fn width(&self) -> usize {
        self.features.width
    }

    /// Every annotated pixel as `(row, col)`.
    pub fn labeled_region(&self) -> Vec<(usize, usize)> {
        let w = self.width();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_some())
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    /// Distinct labeled classes, background excluded.
    pub fn foreground_classes(&self) -> BTreeSet<LabelId> {
        self.mask
            .iter()
            .flatten()
            .copied()
            .filter(|l| !l.is_background())
            .collect()
    }

    pub fn contains_class(&self, class: LabelId) -> bool {
        self.mask.contains(&Some(class))
    }

    /// Pixels whose label is a hidden variable during relabeling: the
    /// unlabeled ones, and for base-task samples also the background ones.
    pub fn is_latent_candidate(&self, pixel: usize) -> bool {
        match self.mask[pixel] {
            None => true,
            Some(l) => self.origin_task == 0 && l.is_background(),
        }
    }
}

pub type Batch = Vec<Arc<Sample>>;

#[derive(Debug, Clone)]
pub struct TaskSchedule {
    pub label_space: LabelSpace,
    pub base_dataset: Vec<Arc<Sample>>,
    /// `tasks[t - 1]` holds the ordered mini-batches of incremental task `t`.
    pub tasks: Vec<Vec<Batch>>,
}

impl TaskSchedule {
    pub fn new(label_space: LabelSpace, base_dataset: Vec<Arc<Sample>>, tasks: Vec<Vec<Batch>>) -> Result<Self> {
        let schedule = Self {
            label_space,
            base_dataset,
            tasks,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.len() != self.label_space.num_tasks() {
            return Err(Error::Schedule(format!(
                "{} batch lists for {} incremental groups",
                self.tasks.len(),
                self.label_space.num_tasks()
            )));
        }
        let base_classes = self.label_space.classes_with_background(0)?;
        let mut ids = BTreeSet::new();
        for sample in &self.base_dataset {
            if sample.origin_task != 0 {
                return Err(Error::Schedule(format!(
                    "base sample {} has origin task {}",
                    sample.id, sample.origin_task
                )));
            }
            if let Some(bad) = sample.mask.iter().flatten().find(|l| !base_classes.contains(l)) {
                return Err(Error::Schedule(format!(
                    "base sample {} carries label {bad} outside the base label space",
                    sample.id
                )));
            }
            if !ids.insert(sample.id) {
                return Err(Error::Schedule(format!("sample id {} repeated", sample.id)));
            }
        }
        for (i, batches) in self.tasks.iter().enumerate() {
            let t = i + 1;
            let group = self.label_space.group(t)?;
            for sample in batches.iter().flatten() {
                if usize::from(sample.origin_task) != t {
                    return Err(Error::Schedule(format!(
                        "sample {} streamed at task {t} has origin task {}",
                        sample.id, sample.origin_task
                    )));
                }
                if let Some(bad) = sample.mask.iter().flatten().find(|l| !group.contains(l)) {
                    return Err(Error::Schedule(format!(
                        "sample {} of task {t} carries label {bad} outside its class group",
                        sample.id
                    )));
                }
                if !ids.insert(sample.id) {
                    return Err(Error::Schedule(format!("sample id {} repeated", sample.id)));
                }
            }
        }
        Ok(())
    }

    pub fn num_incoming_batches(&self) -> usize {
        self.tasks.iter().map(Vec::len).sum()
    }
}
