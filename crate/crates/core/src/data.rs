//! Synthetic benchmark generation and on-disk dataset formats.
//!
//! # Sample files
//!
//! One sample per file, all integers little-endian:
//!
//! | bytes          | content                                        |
//! |----------------|------------------------------------------------|
//! | 4              | magic `FSM1`                                   |
//! | 4 + 4 + 4      | `u32` height, width, depth                     |
//! | 2              | `u16` origin task                              |
//! | 4·H·W·D        | `f32` features, row-major, channel innermost   |
//! | 2·H·W          | `u16` labels, `0xFFFF` unlabeled, 0 background |
//!
//! # Dataset directories
//!
//! `manifest.json` lists every task with its class ids, its ordered
//! mini-batches of training files and its test files. Task 0 is the base
//! task. Paths are relative to the directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::{FeatureMap, LabelId, LabelSpace, Mask, Sample, TaskSchedule, UNLABELED_CODE};
use crate::rng::{substream, Stream};

pub const SAMPLE_MAGIC: &[u8; 4] = b"FSM1";
const HEADER_LEN: usize = 4 + 4 * 3 + 2;

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub base_classes: u16,
    pub group_sizes: Vec<u16>,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub blob_side_min: usize,
    pub blob_side_max: usize,
    pub prototype_noise_sigma: f64,
    pub background_sigma: f64,
    /// Magnitude of the shared background direction added to every
    /// background pixel.
    pub background_offset: f64,
    pub base_images: usize,
    pub images_per_task: usize,
    pub test_images_per_task: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            base_classes: 2,
            group_sizes: vec![2, 2],
            feature_dim: 16,
            height: 32,
            width: 32,
            blobs_min: 1,
            blobs_max: 2,
            blob_side_min: 12,
            blob_side_max: 24,
            prototype_noise_sigma: 0.35,
            background_sigma: 0.35,
            background_offset: 1.0,
            base_images: 96,
            images_per_task: 192,
            test_images_per_task: 32,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Spec(m));
        if self.height < 4 || self.width < 4 {
            return fail(format!("grid {}x{} is smaller than 4x4", self.height, self.width));
        }
        if self.feature_dim < 2 {
            return fail(format!("feature_dim {} is below 2", self.feature_dim));
        }
        if self.base_classes == 0 || self.group_sizes.contains(&0) {
            return fail("every class group needs at least one class".into());
        }
        let total = usize::from(self.base_classes) + self.group_sizes.iter().map(|&g| usize::from(g)).sum::<usize>();
        if total >= usize::from(UNLABELED_CODE) {
            return fail(format!("{total} classes do not fit the label encoding"));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return fail(format!("blob range {}..={} is empty", self.blobs_min, self.blobs_max));
        }
        if self.blobs_max > usize::from(self.base_classes) {
            return fail(format!(
                "{} blobs per image requested but the base task has {} classes",
                self.blobs_max, self.base_classes
            ));
        }
        if self.blob_side_min == 0
            || self.blob_side_min > self.blob_side_max
            || self.blob_side_max > self.height.min(self.width)
        {
            return fail(format!(
                "blob sides {}..={} do not fit a {}x{} grid",
                self.blob_side_min, self.blob_side_max, self.height, self.width
            ));
        }
        for (name, v) in [
            ("prototype_noise_sigma", self.prototype_noise_sigma),
            ("background_sigma", self.background_sigma),
            ("background_offset", self.background_offset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} must be finite and nonnegative"));
            }
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.base_images == 0 || self.test_images_per_task == 0 {
            return fail("base_images and test_images_per_task must be positive".into());
        }
        Ok(())
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::contiguous(self.base_classes, &self.group_sizes)
    }
}

/// A generated (or loaded) benchmark: the training stream plus one fully
/// labeled test set per task, task 0 first.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub schedule: TaskSchedule,
    pub test_sets: Vec<Vec<Arc<Sample>>>,
}

/// Class directions used to paint blobs, plus the background direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<(LabelId, Vec<f32>)>,
    pub background: Vec<f32>,
}

fn unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| (x / n) as f32).collect();
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Labeling {
    Full,
    OnlyGroup,
}

struct Painter<'a> {
    spec: &'a SyntheticSpec,
    protos: &'a Prototypes,
}

impl Painter<'_> {
    /// Paints blobs of `classes` in order (later ones occlude earlier ones).
    fn image<R: Rng + ?Sized>(
        &self,
        id: u64,
        task: u16,
        classes: &[LabelId],
        labeling: Labeling,
        group: &BTreeSet<LabelId>,
        rng: &mut R,
    ) -> Result<Sample> {
        let s = self.spec;
        let (h, w, d) = (s.height, s.width, s.feature_dim);
        let mut owner = vec![LabelId::BACKGROUND; h * w];
        for &class in classes {
            let bh = rng.random_range(s.blob_side_min..=s.blob_side_max);
            let bw = rng.random_range(s.blob_side_min..=s.blob_side_max);
            let top = rng.random_range(0..=h - bh);
            let left = rng.random_range(0..=w - bw);
            for r in top..top + bh {
                for c in left..left + bw {
                    owner[r * w + c] = class;
                }
            }
        }
        let mut features = FeatureMap::zeros(h, w, d);
        for (p, &class) in owner.iter().enumerate() {
            let (base, sigma, scale) = if class.is_background() {
                (&self.protos.background, s.background_sigma, s.background_offset as f32)
            } else {
                let proto = &self.protos.classes[usize::from(class.0) - 1].1;
                (proto, s.prototype_noise_sigma, 1.0)
            };
            for (dst, &b) in features.pixel_mut(p).iter_mut().zip(base) {
                let noise: f64 = rng.sample(StandardNormal);
                *dst = scale * b + (sigma * noise) as f32;
            }
        }
        let mask: Mask = owner
            .iter()
            .map(|&class| match labeling {
                Labeling::Full => Some(class),
                Labeling::OnlyGroup => group.contains(&class).then_some(class),
            })
            .collect();
        Sample::new(id, features, mask, task)
    }
}

fn pick_distinct<R: Rng + ?Sized>(pool: &BTreeSet<LabelId>, k: usize, rng: &mut R) -> Vec<LabelId> {
    let mut v: Vec<LabelId> = pool.iter().copied().collect();
    v.shuffle(rng);
    v.truncate(k);
    v
}

fn draw_prototypes<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<Prototypes> {
    let total = spec.label_space()?.total_classes();
    let classes = (1..=total as u16)
        .map(|c| (LabelId(c), unit_vector(spec.feature_dim, rng)))
        .collect();
    let background = unit_vector(spec.feature_dim, rng);
    Ok(Prototypes { classes, background })
}

/// The directions [`generate`] paints with for `spec`.
pub fn prototypes(spec: &SyntheticSpec) -> Result<Prototypes> {
    spec.validate()?;
    draw_prototypes(spec, &mut substream(spec.seed, Stream::Datagen))
}

/// Generates the full benchmark from `spec`. Equal specs give identical
/// output.
pub fn generate(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let space = spec.label_space()?;
    let mut rng = substream(spec.seed, Stream::Datagen);
    let protos = draw_prototypes(spec, &mut rng)?;
    let painter = Painter { spec, protos: &protos };
    let mut next_id = 0u64;
    let mut id = || {
        next_id += 1;
        next_id - 1
    };

    let base_group = space.group(0)?.clone();
    let mut base = Vec::with_capacity(spec.base_images);
    for _ in 0..spec.base_images {
        let k = rng.random_range(spec.blobs_min..=spec.blobs_max);
        let classes = pick_distinct(&base_group, k, &mut rng);
        base.push(Arc::new(painter.image(
            id(),
            0,
            &classes,
            Labeling::Full,
            &base_group,
            &mut rng,
        )?));
    }

    let mut tasks = Vec::with_capacity(space.num_tasks());
    for t in 1..=space.num_tasks() {
        let group = space.group(t)?.clone();
        let seen = space.classes_up_to(t)?;
        let mut images = Vec::with_capacity(spec.images_per_task);
        for _ in 0..spec.images_per_task {
            let k = rng.random_range(spec.blobs_min..=spec.blobs_max);
            let anchor = pick_distinct(&group, 1, &mut rng)[0];
            let mut rest: BTreeSet<LabelId> = seen.clone();
            rest.remove(&anchor);
            let mut classes = pick_distinct(&rest, k - 1, &mut rng);
            // the novel-class blob goes on top so it is never fully hidden
            classes.push(anchor);
            images.push(Arc::new(painter.image(
                id(),
                t as u16,
                &classes,
                Labeling::OnlyGroup,
                &group,
                &mut rng,
            )?));
        }
        tasks.push(images.chunks(spec.batch_size).map(<[_]>::to_vec).collect());
    }

    let mut test_sets = Vec::with_capacity(space.num_tasks() + 1);
    for t in 0..=space.num_tasks() {
        let seen = space.classes_up_to(t)?;
        let mut images = Vec::with_capacity(spec.test_images_per_task);
        for _ in 0..spec.test_images_per_task {
            let k = rng.random_range(spec.blobs_min..=spec.blobs_max);
            let classes = pick_distinct(&seen, k, &mut rng);
            images.push(Arc::new(painter.image(
                id(),
                t as u16,
                &classes,
                Labeling::Full,
                &seen,
                &mut rng,
            )?));
        }
        test_sets.push(images);
    }

    Ok(Benchmark {
        schedule: TaskSchedule::new(space, base, tasks)?,
        test_sets,
    })
}

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let f = &sample.features;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.data.len() + 2 * sample.mask.len());
    out.extend_from_slice(SAMPLE_MAGIC);
    for dim in [f.height, f.width, f.depth] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&sample.origin_task.to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in &sample.mask {
        let code = l.map_or(UNLABELED_CODE, |l| l.0);
        out.extend_from_slice(&code.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
}

pub fn decode_sample(bytes: &[u8], id: u64) -> Result<Sample> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if let Some(i) = (0..4).find(|&i| bytes[i] != SAMPLE_MAGIC[i]) {
        return Err(Error::format(i as u64, "bad magic, expected FSM1"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let d = r.u32("depth")? as usize;
    let task = r.u16("origin task")?;
    let pixels = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(4, "grid size overflows"))?;
    let values = pixels
        .checked_mul(d)
        .ok_or_else(|| Error::format(12, "feature count overflows"))?;
    let expected = values
        .checked_mul(4)
        .and_then(|f| f.checked_add(pixels.checked_mul(2)?))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(4, "file size overflows"))?;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "truncated payload: file has {} bytes, header implies {expected}",
                bytes.len()
            ),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after label section"));
    }
    let data = r
        .take(values * 4, "features")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut mask = Vec::with_capacity(pixels);
    for _ in 0..pixels {
        let code = r.u16("labels")?;
        mask.push((code != UNLABELED_CODE).then_some(LabelId(code)));
    }
    Sample::new(id, FeatureMap::new(h, w, d, data)?, mask, task)
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_sample(sample)).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path, id: u64) -> Result<Sample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub task: usize,
    pub class_ids: Vec<u16>,
    pub batches: Vec<Vec<String>>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub tasks: Vec<ManifestTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn sample_path(kind: &str, task: usize, id: u64) -> String {
    format!("{kind}/t{task}/{id:08}.fsm")
}

/// Writes every sample plus `manifest.json` under `dir` and returns the
/// dataset hash.
pub fn write_dataset(dir: &Path, bench: &Benchmark, generator: Option<&SyntheticSpec>) -> Result<String> {
    let sched = &bench.schedule;
    let first = sched
        .base_dataset
        .first()
        .ok_or_else(|| Error::Schedule("empty base dataset".into()))?;
    let mut tasks = Vec::new();
    for t in 0..=sched.label_space.num_tasks() {
        let batches: Vec<Vec<Arc<Sample>>> = if t == 0 {
            let size = generator.map_or(sched.base_dataset.len(), |g| g.batch_size);
            sched.base_dataset.chunks(size).map(<[_]>::to_vec).collect()
        } else {
            sched.tasks[t - 1].clone()
        };
        let mut names = Vec::new();
        for batch in &batches {
            let mut row = Vec::new();
            for s in batch {
                let rel = sample_path("train", t, s.id);
                write_sample(&dir.join(&rel), s)?;
                row.push(rel);
            }
            names.push(row);
        }
        let mut test = Vec::new();
        for s in bench.test_sets.get(t).map(Vec::as_slice).unwrap_or(&[]) {
            let rel = sample_path("test", t, s.id);
            write_sample(&dir.join(&rel), s)?;
            test.push(rel);
        }
        tasks.push(ManifestTask {
            task: t,
            class_ids: sched.label_space.group(t)?.iter().map(|c| c.0).collect(),
            batches: names,
            test,
        });
    }
    let manifest = Manifest {
        version: 1,
        feature_dim: first.features.depth,
        height: first.height(),
        width: first.width(),
        tasks,
        generator: generator.cloned(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    dataset_hash(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn manifest_files(m: &Manifest) -> impl Iterator<Item = &String> {
    m.tasks
        .iter()
        .flat_map(|t| t.batches.iter().flatten())
        .chain(m.tasks.iter().flat_map(|t| t.test.iter()))
}

/// SHA-256 over the manifest bytes followed by every listed file, in
/// manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut hasher = Sha256::new();
    hasher.update(&manifest_bytes);
    for rel in manifest_files(&manifest) {
        let path = dir.join(rel);
        hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Loads a dataset directory. Sample ids follow manifest order: training
/// files task by task, then test files task by task.
pub fn load_dataset(dir: &Path) -> Result<Benchmark> {
    let manifest = read_manifest(dir)?;
    let mut tasks_sorted: Vec<&ManifestTask> = manifest.tasks.iter().collect();
    tasks_sorted.sort_by_key(|t| t.task);
    if tasks_sorted.iter().enumerate().any(|(i, t)| t.task != i) {
        return Err(Error::Schedule(
            "manifest tasks must be numbered 0..n without gaps".into(),
        ));
    }
    let to_set = |ids: &[u16]| ids.iter().copied().map(LabelId).collect::<BTreeSet<_>>();
    let space = LabelSpace::new(
        to_set(&tasks_sorted[0].class_ids),
        tasks_sorted[1..].iter().map(|t| to_set(&t.class_ids)).collect(),
    )?;
    let mut next_id = 0u64;
    let mut load = |rel: &String| -> Result<Arc<Sample>> {
        let path: PathBuf = dir.join(rel);
        let s = read_sample(&path, next_id)?;
        next_id += 1;
        if s.features.depth != manifest.feature_dim {
            return Err(Error::Shape(format!(
                "{}: depth {} differs from manifest feature_dim {}",
                path.display(),
                s.features.depth,
                manifest.feature_dim
            )));
        }
        Ok(Arc::new(s))
    };
    let mut base = Vec::new();
    let mut tasks = Vec::new();
    for t in &tasks_sorted {
        let mut batches = Vec::new();
        for batch in &t.batches {
            batches.push(batch.iter().map(&mut load).collect::<Result<Vec<_>>>()?);
        }
        if t.task == 0 {
            base = batches.into_iter().flatten().collect();
        } else {
            tasks.push(batches);
        }
    }
    let mut test_sets = Vec::new();
    for t in &tasks_sorted {
        test_sets.push(t.test.iter().map(&mut load).collect::<Result<Vec<_>>>()?);
    }
    Ok(Benchmark {
        schedule: TaskSchedule::new(space, base, tasks)?,
        test_sets,
    })
}
