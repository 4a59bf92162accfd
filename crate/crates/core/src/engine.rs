//! The online training loop.
//!
//! A run first trains the head offline on the fully labeled base data and
//! seeds the exemplar memory from it. Each incremental task then adds head
//! columns for its classes and streams its mini-batches exactly once. Every
//! incoming batch goes through [`em_iteration`]:
//!
//! 1. draw as many replay samples from memory as there are incoming ones;
//! 2. relabel latent pixels of every sample with the pre-update model;
//! 3. take one SGD step on the batch-mean composite loss;
//! 4. fold the pre-update probabilities into the class confidences and
//!    refresh the replay distribution;
//! 5. offer every incoming sample to the memory.
//!
//! Setting `method` to [`Method::Er`], or switching off all four toggles,
//! gives plain experience replay: reservoir memory, uniform replay, a dot
//! product head, and cross-entropy on annotated pixels only.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Benchmark;
use crate::error::{Error, Result};
use crate::eval::{imiou, ConfusionMatrix, MiouReport};
use crate::label::{LabelId, LabelSpace, Mask, Sample};
use crate::memory::{ExemplarMemory, InsertOutcome, Policy};
use crate::model::{composite_loss, CosineHead, ProbMap, Scoring};
use crate::rng::RunRngs;
use crate::sampler::{draw_replay, draw_uniform, sampling_probs, ClassConfidence, SamplingDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    Er,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub cbes: bool,
    pub relabel_composite: bool,
    pub cosine_norm: bool,
    pub dynamic_sampling: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self::all()
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 4] = ["cbes", "relabel_composite", "cosine_norm", "dynamic_sampling"];

    pub fn all() -> Self {
        Self {
            cbes: true,
            relabel_composite: true,
            cosine_norm: true,
            dynamic_sampling: true,
        }
    }

    pub fn none() -> Self {
        Self {
            cbes: false,
            relabel_composite: false,
            cosine_norm: false,
            dynamic_sampling: false,
        }
    }

    /// Switches off the named component.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "cbes" => self.cbes = false,
            "relabel_composite" => self.relabel_composite = false,
            "cosine_norm" => self.cosine_norm = false,
            "dynamic_sampling" => self.dynamic_sampling = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown component `{other}`, expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Pseudo labels are kept only above this probability.
    pub delta: f64,
    /// Weight of the latent-pixel term of the loss.
    pub gamma: f64,
    /// Peakiness of the replay class distribution.
    pub eta: f64,
    /// Momentum of the class-confidence moving average.
    pub mu: f64,
    pub temperature: f64,
    pub lr: f64,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub base_batch_size: usize,
    pub memory_capacity: usize,
    pub seed: u64,
    pub method: Method,
    pub toggles: Toggles,
    /// Restricts confidence updates to annotated pixels.
    pub confidence_ground_truth_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta: 0.8,
            gamma: 0.5,
            eta: 1.0,
            mu: 0.9,
            temperature: 12.0,
            lr: 1e-3,
            base_lr: 1e-2,
            base_epochs: 20,
            base_batch_size: 8,
            memory_capacity: 24,
            seed: 0,
            method: Method::Ours,
            toggles: Toggles::all(),
            confidence_ground_truth_only: false,
        }
    }
}

impl RunConfig {
    /// Step sizes and sampling sharpness tuned for the default synthetic
    /// benchmark. The plain default keeps the small learning rate meant for
    /// deep backbones, which barely moves a linear head in one pass.
    pub fn benchmark() -> Self {
        Self {
            lr: 1.0,
            base_lr: 0.5,
            eta: 5.0,
            ..Self::default()
        }
    }

    pub fn er() -> Self {
        Self {
            method: Method::Er,
            ..Self::default()
        }
    }

    /// Toggles in force: `er` switches everything off.
    pub fn effective_toggles(&self) -> Toggles {
        match self.method {
            Method::Ours => self.toggles,
            Method::Er => Toggles::none(),
        }
    }

    pub fn scoring(&self) -> Scoring {
        if self.effective_toggles().cosine_norm {
            Scoring::Cosine
        } else {
            Scoring::Dot
        }
    }

    pub fn policy(&self) -> Policy {
        if self.effective_toggles().cbes {
            Policy::ClassBalanced
        } else {
            Policy::Reservoir
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad("delta must lie in (0, 1]");
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("temperature", self.temperature),
            ("lr", self.lr),
            ("base_lr", self.base_lr),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1]");
        }
        if self.memory_capacity == 0 {
            return bad("memory_capacity must be positive");
        }
        if self.base_batch_size == 0 {
            return bad("base_batch_size must be positive");
        }
        Ok(())
    }
}

/// Model, memory and bookkeeping carried across mini-batches.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub head: CosineHead,
    pub memory: ExemplarMemory,
    pub confidence: ClassConfidence,
    pub distribution: SamplingDistribution,
    pub task: usize,
    /// Index of the next mini-batch within the current task.
    pub batch_index: usize,
    /// Parameter updates applied during incremental tasks.
    pub sgd_steps: u64,
    /// Non-empty incoming mini-batches consumed during incremental tasks.
    pub consumed_batches: u64,
    pub rngs: RunRngs,
}

/// Output of the E-step for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Relabeled {
    pub mask: Mask,
    /// Pixels still without a label after relabeling.
    pub latent: Vec<bool>,
    pub pseudo_labels: usize,
}

/// Hard-EM relabeling of the latent pixels of `sample`.
///
/// Latent pixels are the unlabeled ones, plus background pixels of base-task
/// samples. Each takes the most probable class outside its origin task's
/// group `excluded`, and keeps it only if that class's probability under the
/// full softmax is above `delta`. Annotated pixels are never touched.
pub fn relabel_with_probs(sample: &Sample, probs: &ProbMap, delta: f64, excluded: &BTreeSet<LabelId>) -> Relabeled {
    let allowed: Vec<usize> = probs
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| !excluded.contains(c))
        .map(|(m, _)| m)
        .collect();
    let mut mask = sample.mask.clone();
    let mut latent = vec![false; mask.len()];
    let mut pseudo_labels = 0;
    for p in 0..mask.len() {
        if !sample.is_latent_candidate(p) {
            continue;
        }
        let row = probs.pixel(p);
        let best = allowed
            .iter()
            .copied()
            .reduce(|a, b| if row[b] > row[a] { b } else { a });
        match best {
            Some(m) if row[m] > delta => {
                mask[p] = Some(probs.classes[m]);
                pseudo_labels += 1;
            }
            _ => {
                mask[p] = None;
                latent[p] = true;
            }
        }
    }
    Relabeled {
        mask,
        latent,
        pseudo_labels,
    }
}

pub fn relabel(sample: &Sample, head: &CosineHead, delta: f64, space: &LabelSpace, t: usize) -> Result<Relabeled> {
    let origin = usize::from(sample.origin_task);
    if origin > t {
        return Err(Error::Schedule(format!(
            "sample {} comes from task {origin}, after the current task {t}",
            sample.id
        )));
    }
    let probs = head.forward(&sample.features)?;
    Ok(relabel_with_probs(sample, &probs, delta, space.group(origin)?))
}

/// Violations found by scanning E-step outputs against their inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EStepAudit {
    pub samples: u64,
    pub pseudo_labels: u64,
    pub ground_truth_modified: u64,
    pub label_in_origin_group: u64,
    pub below_threshold: u64,
}

impl EStepAudit {
    pub fn violations(&self) -> u64 {
        self.ground_truth_modified + self.label_in_origin_group + self.below_threshold
    }

    pub fn scan(
        &mut self,
        sample: &Sample,
        probs: &ProbMap,
        out: &Relabeled,
        delta: f64,
        excluded: &BTreeSet<LabelId>,
    ) {
        self.samples += 1;
        for p in 0..sample.mask.len() {
            if !sample.is_latent_candidate(p) {
                if out.mask[p] != sample.mask[p] || out.latent[p] {
                    self.ground_truth_modified += 1;
                }
                continue;
            }
            if let Some(label) = out.mask[p] {
                self.pseudo_labels += 1;
                if excluded.contains(&label) {
                    self.label_in_origin_group += 1;
                }
                if probs.prob(p, label).is_none_or(|v| v <= delta) {
                    self.below_threshold += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub task: usize,
    pub batch: usize,
    pub loss: f64,
    pub incoming: usize,
    pub replayed: usize,
    pub pseudo_labels: BTreeMap<LabelId, usize>,
    pub sampling: BTreeMap<LabelId, f64>,
    pub confidence: BTreeMap<LabelId, f64>,
    pub memory_size: usize,
    pub rejected: usize,
    pub warning: Option<String>,
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn forward_all(head: &CosineHead, batch: &[Arc<Sample>]) -> Result<Vec<ProbMap>> {
    batch.par_iter().map(|s| head.forward(&s.features)).collect()
}

/// One online update for an incoming mini-batch.
pub fn em_iteration(
    state: &mut TrainState,
    space: &LabelSpace,
    incoming: &[Arc<Sample>],
    cfg: &RunConfig,
    audit: &mut EStepAudit,
) -> Result<StepDiagnostics> {
    let toggles = cfg.effective_toggles();
    let t = state.task;
    let mut diag = StepDiagnostics {
        task: t,
        batch: state.batch_index,
        loss: 0.0,
        incoming: incoming.len(),
        replayed: 0,
        pseudo_labels: BTreeMap::new(),
        sampling: state.distribution.probs().clone(),
        confidence: state.confidence.values().clone(),
        memory_size: state.memory.len(),
        rejected: 0,
        warning: None,
    };
    state.batch_index += 1;
    if incoming.is_empty() {
        diag.warning = Some("empty incoming batch skipped".into());
        return Ok(diag);
    }
    for s in incoming {
        if usize::from(s.origin_task) > t {
            return Err(Error::Schedule(format!("sample {} is from a future task", s.id)));
        }
    }

    let replay = if toggles.dynamic_sampling {
        draw_replay(
            &state.memory,
            &state.distribution,
            incoming.len(),
            &mut state.rngs.replay,
        )
    } else {
        draw_uniform(&state.memory, incoming.len(), &mut state.rngs.replay)
    };
    diag.replayed = replay.len();
    let batch: Vec<Arc<Sample>> = incoming.iter().cloned().chain(replay).collect();

    let probs = forward_all(&state.head, &batch)?;

    let mut targets = Vec::with_capacity(batch.len());
    for (sample, pm) in batch.iter().zip(&probs) {
        let excluded = space.group(usize::from(sample.origin_task))?;
        let out = if toggles.relabel_composite {
            let out = relabel_with_probs(sample, pm, cfg.delta, excluded);
            audit.scan(sample, pm, &out, cfg.delta, excluded);
            for label in out
                .mask
                .iter()
                .zip(&sample.mask)
                .enumerate()
                .filter_map(|(p, (new, _))| if sample.is_latent_candidate(p) { *new } else { None })
            {
                *diag.pseudo_labels.entry(label).or_insert(0) += 1;
            }
            out
        } else {
            Relabeled {
                mask: sample.mask.clone(),
                latent: vec![false; sample.mask.len()],
                pseudo_labels: 0,
            }
        };
        targets.push(out);
    }

    let gamma = if toggles.relabel_composite { cfg.gamma } else { 0.0 };
    let scale = 1.0 / batch.len() as f64;
    let grads: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .zip(&probs)
        .zip(&targets)
        .map(|((sample, pm), target)| {
            let excluded = space.group(usize::from(sample.origin_task))?;
            let out = composite_loss(pm, &target.mask, &target.latent, excluded, gamma)?;
            let g = state.head.backward(&sample.features, &out.grad_logits)?;
            Ok((out.loss, g))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; state.head.weights().len()];
    for (loss, g) in &grads {
        diag.loss += scale * loss;
        accumulate(&mut grad, g, scale);
    }
    state.head.sgd_step(&grad, cfg.lr)?;
    state.sgd_steps += 1;
    state.consumed_batches += 1;

    let masks: Vec<&[Option<LabelId>]> = if cfg.confidence_ground_truth_only {
        batch.iter().map(|s| s.mask.as_slice()).collect()
    } else {
        targets.iter().map(|r| r.mask.as_slice()).collect()
    };
    state.confidence.update(probs.iter().zip(masks))?;
    let classes = space.classes_up_to(t)?;
    state.distribution = sampling_probs(&state.confidence, &classes, cfg.eta)?;

    for sample in incoming {
        match state
            .memory
            .offer(sample.clone(), cfg.policy(), classes.len(), &mut state.rngs.reservoir)
        {
            Ok(_) => {}
            Err(Error::NoForeground { .. }) => diag.rejected += 1,
            Err(e) => return Err(e),
        }
    }

    diag.sampling = state.distribution.probs().clone();
    diag.confidence = state.confidence.values().clone();
    diag.memory_size = state.memory.len();
    Ok(diag)
}

/// Offline multi-epoch training on fully labeled samples. Returns the number
/// of parameter updates taken.
pub fn train_offline(head: &mut CosineHead, data: &[Arc<Sample>], cfg: &RunConfig, rngs: &mut RunRngs) -> Result<u64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let none = BTreeSet::new();
    for _ in 0..cfg.base_epochs {
        order.shuffle(&mut rngs.init);
        for chunk in order.chunks(cfg.base_batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let grads: Vec<Vec<f64>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &data[i];
                    let probs = head.forward(&s.features)?;
                    let latent = vec![false; s.mask.len()];
                    let out = composite_loss(&probs, &s.mask, &latent, &none, 0.0)?;
                    head.backward(&s.features, &out.grad_logits)
                })
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; head.weights().len()];
            for g in &grads {
                accumulate(&mut grad, g, scale);
            }
            head.sgd_step(&grad, cfg.base_lr)?;
            steps += 1;
        }
    }
    Ok(steps)
}

/// Confusion-based mIoU of `head` on a fully labeled test set.
pub fn evaluate(head: &CosineHead, test: &[Arc<Sample>]) -> Result<MiouReport> {
    let classes = head.class_order().to_vec();
    let parts: Vec<ConfusionMatrix> = test
        .par_iter()
        .map(|s| {
            let mut cm = ConfusionMatrix::new(classes.clone());
            cm.accumulate(&s.mask, &head.predict(&s.features)?)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(classes);
    for cm in &parts {
        total.merge(cm)?;
    }
    total.miou()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub miou: f64,
    pub per_class: BTreeMap<LabelId, f64>,
    pub undefined_classes: Vec<LabelId>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub tasks: Vec<TaskMetrics>,
    pub imiou: f64,
    pub diagnostics: Vec<StepDiagnostics>,
    pub audit: EStepAudit,
    pub base_steps: u64,
    pub incoming_batches: u64,
    pub state: TrainState,
}

impl RunResult {
    pub fn per_task_miou(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.miou).collect()
    }
}

/// A run that stopped on an error, with whatever was recorded before it.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub tasks: Vec<TaskMetrics>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} evaluated tasks: {}",
            self.tasks.len(),
            self.error
        )
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Base training, memory seeding, then every incremental task in order.
pub fn run_stream(bench: &Benchmark, cfg: &RunConfig) -> Result<RunResult, RunFailure> {
    let mut log = StreamLog::default();
    let outcome = start_stream(bench, cfg, &mut log).and_then(|mut state| {
        advance_stream(bench, cfg, &mut state, &mut log, None)?;
        Ok(state)
    });
    finish(outcome, log)
}

/// Continues a run from a restored state until the stream ends. Only the
/// tasks finished after the resume point show up in the result.
pub fn resume_stream(bench: &Benchmark, cfg: &RunConfig, state: TrainState) -> Result<RunResult, RunFailure> {
    let mut log = StreamLog::default();
    let mut state = state;
    let outcome = check_inputs(bench, cfg)
        .and_then(|_| advance_stream(bench, cfg, &mut state, &mut log, None))
        .map(|_| state);
    finish(outcome, log)
}

fn finish(outcome: Result<TrainState>, log: StreamLog) -> Result<RunResult, RunFailure> {
    let StreamLog {
        tasks,
        diagnostics,
        audit,
        base_steps,
        incoming_batches,
    } = log;
    let outcome = outcome.and_then(|state| {
        let per_task: Vec<f64> = tasks.iter().map(|t| t.miou).collect();
        Ok((state, imiou(&per_task)?))
    });
    match outcome {
        Ok((state, imiou)) => Ok(RunResult {
            tasks,
            imiou,
            diagnostics,
            audit,
            base_steps,
            incoming_batches,
            state,
        }),
        Err(error) => Err(RunFailure {
            error,
            tasks,
            diagnostics,
        }),
    }
}

/// Everything a run reports besides its final state.
#[derive(Debug, Clone, Default)]
pub struct StreamLog {
    pub tasks: Vec<TaskMetrics>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub audit: EStepAudit,
    pub base_steps: u64,
    pub incoming_batches: u64,
}

fn metrics(task: usize, report: MiouReport) -> TaskMetrics {
    TaskMetrics {
        task,
        miou: report.mean,
        per_class: report.per_class,
        undefined_classes: report.undefined,
    }
}

fn check_inputs(bench: &Benchmark, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let sched = &bench.schedule;
    sched.validate()?;
    let tasks = sched.label_space.num_tasks() + 1;
    if bench.test_sets.len() != tasks {
        return Err(Error::Schedule(format!(
            "{} test sets for {tasks} tasks",
            bench.test_sets.len()
        )));
    }
    Ok(())
}

/// Trains the base head offline, seeds the memory from the base data and
/// evaluates task 0. The returned state sits before the first incremental
/// batch.
pub fn start_stream(bench: &Benchmark, cfg: &RunConfig, log: &mut StreamLog) -> Result<TrainState> {
    check_inputs(bench, cfg)?;
    let sched = &bench.schedule;
    let space = &sched.label_space;
    let depth = sched
        .base_dataset
        .first()
        .map(|s| s.features.depth)
        .ok_or_else(|| Error::Schedule("empty base dataset".into()))?;

    let mut rngs = RunRngs::new(cfg.seed);
    let base_classes = space.classes_up_to(0)?;
    let mut head = CosineHead::new(depth, &base_classes, cfg.temperature, cfg.scoring(), &mut rngs.init)?;
    log.base_steps += train_offline(&mut head, &sched.base_dataset, cfg, &mut rngs)?;

    let mut memory = ExemplarMemory::new(cfg.memory_capacity)?;
    for sample in &sched.base_dataset {
        match memory.offer(sample.clone(), cfg.policy(), base_classes.len(), &mut rngs.reservoir) {
            Ok(InsertOutcome::Stored { .. } | InsertOutcome::Skipped) | Err(Error::NoForeground { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let mut confidence = ClassConfidence::new(cfg.mu)?;
    confidence.reset(base_classes.iter().chain([&LabelId::BACKGROUND]));
    let distribution = sampling_probs(&confidence, &base_classes, cfg.eta)?;

    log.tasks.push(metrics(0, evaluate(&head, &bench.test_sets[0])?));
    Ok(TrainState {
        head,
        memory,
        confidence,
        distribution,
        task: 0,
        batch_index: 0,
        sgd_steps: 0,
        consumed_batches: 0,
        rngs,
    })
}

/// Streams batches from wherever `state` stands. A state whose batch index
/// equals its task's batch count has finished (and evaluated) that task.
/// With `limit`, at most that many batches are consumed before returning;
/// the return value is the number consumed.
pub fn advance_stream(
    bench: &Benchmark,
    cfg: &RunConfig,
    state: &mut TrainState,
    log: &mut StreamLog,
    limit: Option<usize>,
) -> Result<usize> {
    let sched = &bench.schedule;
    let space = &sched.label_space;
    let batches_of = |t: usize| if t == 0 { 0 } else { sched.tasks[t - 1].len() };
    if state.task > space.num_tasks() || state.batch_index > batches_of(state.task) {
        return Err(Error::Schedule(format!(
            "state points at batch {} of task {}, beyond the stream",
            state.batch_index, state.task
        )));
    }
    let mut consumed = 0;
    loop {
        if state.batch_index == batches_of(state.task) {
            if state.task == space.num_tasks() {
                return Ok(consumed);
            }
            let t = state.task + 1;
            let group = space.group(t)?;
            state.task = t;
            state.batch_index = 0;
            state.head.expand(group, &mut state.rngs.init)?;
            state.confidence.reset(group);
            state.distribution = sampling_probs(&state.confidence, &space.classes_up_to(t)?, cfg.eta)?;
            if batches_of(t) == 0 {
                log.tasks.push(metrics(t, evaluate(&state.head, &bench.test_sets[t])?));
            }
            continue;
        }
        if limit.is_some_and(|l| consumed >= l) {
            return Ok(consumed);
        }
        let t = state.task;
        let batch = &sched.tasks[t - 1][state.batch_index];
        if !batch.is_empty() {
            log.incoming_batches += 1;
        }
        log.diagnostics
            .push(em_iteration(state, space, batch, cfg, &mut log.audit)?);
        consumed += 1;
        if state.batch_index == batches_of(t) {
            log.tasks.push(metrics(t, evaluate(&state.head, &bench.test_sets[t])?));
        }
    }
}
