//! Binary checkpoints of a training run.
//!
//! A checkpoint file starts with the magic `SSCK` and a `u32` format
//! version, followed by tagged sections. Each section is a 4-byte ASCII tag,
//! a `u64` payload length and the payload. All integers are little-endian
//! and all reals are `f64`.
//!
//! | tag    | payload                                                        |
//! |--------|----------------------------------------------------------------|
//! | `HEAD` | depth `u32`, temperature, scoring `u8`, class count `u32`, class ids `u16`, weights column by column |
//! | `MEMR` | capacity `u64`, seen total `u64`, seen counters, then entries of owner `u16`, sample id `u64`, byte length `u32` and an `FSM1` sample |
//! | `CONF` | momentum, then `(u16, f64)` pairs                              |
//! | `DIST` | eta, then `(u16, f64)` pairs                                   |
//! | `PROG` | task, batch index, SGD steps, consumed batches, all `u64`      |
//! | `RNGS` | per stream: 32-byte seed, `u64` stream id, `u128` word position |
//!
//! Readers reject unknown versions, missing or repeated sections and
//! unknown tags, each with the byte offset at fault.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;

use crate::data::{decode_sample, encode_sample};
use crate::engine::TrainState;
use crate::error::{Error, Result};
use crate::label::LabelId;
use crate::memory::ExemplarMemory;
use crate::model::{CosineHead, Scoring};
use crate::rng::{Rng, RunRngs};
use crate::sampler::{ClassConfidence, SamplingDistribution};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAGS: [&[u8; 4]; 6] = [b"HEAD", b"MEMR", b"CONF", b"DIST", b"PROG", b"RNGS"];

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("section element count fits u32"));
    }
    fn class_map(&mut self, map: &BTreeMap<LabelId, f64>) {
        self.len(map.len());
        for (c, v) in map {
            self.u16(c.0);
            self.f64(*v);
        }
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

/// Cursor over one byte buffer that reports absolute file offsets.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        (self.base + self.pos) as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.offset(), format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(what)?))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.offset();
        usize::try_from(self.u64(what)?).map_err(|_| Error::format(at, format!("{what} overflows")))
    }

    fn class_map(&mut self, what: &str) -> Result<BTreeMap<LabelId, f64>> {
        let n = self.u32(what)?;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let at = self.offset();
            let c = LabelId(self.u16(what)?);
            if map.insert(c, self.f64(what)?).is_some() {
                return Err(Error::format(at, format!("class {c} repeated in {what}")));
            }
        }
        Ok(map)
    }

    fn done(&self, tag: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.offset(),
                format!("unread bytes at the end of section {tag}"),
            ));
        }
        Ok(())
    }
}

fn write_rng(w: &mut Writer, rng: &Rng) {
    w.0.extend_from_slice(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader) -> Result<Rng> {
    let seed: [u8; 32] = r.array("rng seed")?;
    let stream = r.u64("rng stream")?;
    let pos = r.u128("rng position")?;
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Serializes the complete resumable state of a run.
pub fn encode_state(state: &TrainState) -> Vec<u8> {
    let mut out = Writer::default();
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);

    let head = &state.head;
    let mut w = Writer::default();
    w.u32(head.depth() as u32);
    w.f64(head.temperature());
    w.u8(match head.scoring() {
        Scoring::Cosine => 0,
        Scoring::Dot => 1,
    });
    w.len(head.num_classes());
    for c in head.class_order() {
        w.u16(c.0);
    }
    for v in head.weights() {
        w.f64(*v);
    }
    out.section(b"HEAD", w);

    let mem = &state.memory;
    let mut w = Writer::default();
    w.u64(mem.capacity() as u64);
    w.u64(mem.seen_total());
    w.len(mem.seen_counts().len());
    for (c, n) in mem.seen_counts() {
        w.u16(c.0);
        w.u64(*n);
    }
    let entries = mem.snapshot();
    w.len(entries.len());
    for (owner, sample) in &entries {
        let bytes = encode_sample(sample);
        w.u16(owner.0);
        w.u64(sample.id);
        w.len(bytes.len());
        w.0.extend_from_slice(&bytes);
    }
    out.section(b"MEMR", w);

    let mut w = Writer::default();
    w.f64(state.confidence.momentum());
    w.class_map(state.confidence.values());
    out.section(b"CONF", w);

    let mut w = Writer::default();
    w.f64(state.distribution.eta());
    w.class_map(state.distribution.probs());
    out.section(b"DIST", w);

    let mut w = Writer::default();
    for v in [
        state.task as u64,
        state.batch_index as u64,
        state.sgd_steps,
        state.consumed_batches,
    ] {
        w.u64(v);
    }
    out.section(b"PROG", w);

    let mut w = Writer::default();
    for rng in [&state.rngs.init, &state.rngs.replay, &state.rngs.reservoir] {
        write_rng(&mut w, rng);
    }
    out.section(b"RNGS", w);
    out.0
}

/// Parses a checkpoint produced by [`encode_state`].
pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let mut top = Reader { bytes, pos: 0, base: 0 };
    let magic: [u8; 4] = top.array("magic")?;
    if let Some(i) = (0..4).find(|&i| magic[i] != CHECKPOINT_MAGIC[i]) {
        return Err(Error::format(i as u64, "bad magic, expected SSCK"));
    }
    let version = top.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }

    let mut sections: BTreeMap<[u8; 4], Reader> = BTreeMap::new();
    while top.pos < bytes.len() {
        let at = top.offset();
        let tag: [u8; 4] = top.array("section tag")?;
        if !TAGS.contains(&&tag) {
            return Err(Error::format(
                at,
                format!("unknown section {}", String::from_utf8_lossy(&tag)),
            ));
        }
        let len = top.usize("section length")?;
        let base = top.pos + top.base;
        let body = top.take(len, "section body")?;
        if sections
            .insert(
                tag,
                Reader {
                    bytes: body,
                    pos: 0,
                    base,
                },
            )
            .is_some()
        {
            return Err(Error::format(
                at,
                format!("repeated section {}", String::from_utf8_lossy(&tag)),
            ));
        }
    }
    let end = bytes.len() as u64;
    let mut section = |tag: &[u8; 4]| {
        sections
            .remove(tag)
            .ok_or_else(|| Error::format(end, format!("missing section {}", String::from_utf8_lossy(tag))))
    };

    let mut r = section(b"HEAD")?;
    let depth = r.u32("head depth")? as usize;
    let temperature = r.f64("temperature")?;
    let at = r.offset();
    let scoring = match r.u8("scoring")? {
        0 => Scoring::Cosine,
        1 => Scoring::Dot,
        other => return Err(Error::format(at, format!("unknown scoring code {other}"))),
    };
    let classes = r.u32("class count")? as usize;
    let mut order = Vec::with_capacity(classes);
    for _ in 0..classes {
        order.push(LabelId(r.u16("class id")?));
    }
    let count = depth
        .checked_mul(classes)
        .ok_or_else(|| Error::format(r.offset(), "weight count overflows"))?;
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        weights.push(r.f64("weights")?);
    }
    r.done("HEAD")?;
    let head = CosineHead::from_weights(depth, order, weights, temperature, scoring)?;

    let mut r = section(b"MEMR")?;
    let capacity = r.usize("memory capacity")?;
    let seen_total = r.u64("seen total")?;
    let mut seen = BTreeMap::new();
    for _ in 0..r.u32("seen count")? {
        let c = LabelId(r.u16("seen class")?);
        seen.insert(c, r.u64("seen counter")?);
    }
    let n = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let owner = LabelId(r.u16("owner")?);
        let id = r.u64("sample id")?;
        let len = r.u32("sample length")? as usize;
        let at = r.offset();
        let sample = decode_sample(r.take(len, "stored sample")?, id).map_err(|e| match e {
            Error::Format { offset, reason } => Error::format(at + offset, format!("stored sample {id}: {reason}")),
            other => other,
        })?;
        entries.push((owner, Arc::new(sample)));
    }
    r.done("MEMR")?;
    let memory = ExemplarMemory::restore(capacity, entries, seen, seen_total)?;

    let mut r = section(b"CONF")?;
    let momentum = r.f64("momentum")?;
    let values = r.class_map("confidence")?;
    r.done("CONF")?;
    let confidence = ClassConfidence::from_values(values, momentum)?;

    let mut r = section(b"DIST")?;
    let eta = r.f64("eta")?;
    let probs = r.class_map("sampling probabilities")?;
    r.done("DIST")?;
    let distribution = SamplingDistribution::from_parts(probs, eta)?;

    let mut r = section(b"PROG")?;
    let task = r.usize("task")?;
    let batch_index = r.usize("batch index")?;
    let sgd_steps = r.u64("sgd steps")?;
    let consumed_batches = r.u64("consumed batches")?;
    r.done("PROG")?;

    let mut r = section(b"RNGS")?;
    let rngs = RunRngs {
        init: read_rng(&mut r)?,
        replay: read_rng(&mut r)?,
        reservoir: read_rng(&mut r)?,
    };
    r.done("RNGS")?;

    Ok(TrainState {
        head,
        memory,
        confidence,
        distribution,
        task,
        batch_index,
        sgd_steps,
        consumed_batches,
        rngs,
    })
}

pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, encode_state(state)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}
