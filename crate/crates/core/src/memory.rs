//! Episodic replay memory.
//!
//! Capacity is fixed at construction together with the declared number of stream
//! batches `n`. After each batch, `floor(mem_sz / n)` of its examples (or all of
//! them, if fewer) are copied in, chosen uniformly without replacement. With a
//! truthful `n` the quotas never exceed capacity and nothing is evicted; if the
//! stream turns out longer, insertion falls back to reservoir replacement and a
//! warning is recorded.
//!
//! Snapshot layout (little endian): 56-byte header
//! `b"BERMEM01" | mem_sz u64 | n u64 | count u64 | kind u64 | dim_a u64 | dim_b u64`
//! followed by `count` fixed-width records `label u64 | session u64 | batch u64 | payload`.
//! Vector payloads are `dim_a` f64 values (kind 1); image payloads are
//! `dim_a * dim_b * 3` bytes (kind 2, width × height).

use std::io::{Read, Write};

use log::warn;
use rand::seq::index;
use rand::Rng;

use crate::augment::RasterImage;
use crate::error::{Error, Result};
use crate::stream::{Features, LabeledExample, StreamBatch};

const MAGIC: &[u8; 8] = b"BERMEM01";
pub const SNAPSHOT_HEADER_BYTES: u64 = 56;
/// label, session and source-batch fields of every record.
pub const RECORD_META_BYTES: u64 = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredExample {
    pub example: LabeledExample,
    /// Index `t` of the stream batch the example came from.
    pub batch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordLayout {
    Vector { dim: usize },
    Image { width: usize, height: usize },
}

impl RecordLayout {
    pub fn of(f: &Features) -> Self {
        match f {
            Features::Vector(v) => RecordLayout::Vector { dim: v.len() },
            Features::Image(img) => RecordLayout::Image {
                width: img.width(),
                height: img.height(),
            },
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        match *self {
            RecordLayout::Vector { dim } => 8 * dim as u64,
            RecordLayout::Image { width, height } => (width * height * 3) as u64,
        }
    }

    pub fn record_bytes(&self) -> u64 {
        RECORD_META_BYTES + self.payload_bytes()
    }
}

/// Serialized size of one example under the snapshot record layout.
pub fn record_bytes(e: &LabeledExample) -> u64 {
    RecordLayout::of(&e.features).record_bytes()
}

#[derive(Clone, Debug)]
pub struct ReplayMemory {
    capacity: usize,
    declared_batches: usize,
    slots: Vec<StoredExample>,
    layout: Option<RecordLayout>,
    /// Examples offered for insertion so far (reservoir fallback denominator).
    offered: u64,
    warnings: Vec<String>,
}

impl ReplayMemory {
    pub fn new(capacity: usize, declared_batches: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay.mem_sz must be positive"));
        }
        if declared_batches == 0 {
            return Err(Error::config(
                "memory needs the number of stream batches (n >= 1)",
            ));
        }
        Ok(Self {
            capacity,
            declared_batches,
            slots: Vec::new(),
            layout: None,
            offered: 0,
            warnings: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn declared_batches(&self) -> usize {
        self.declared_batches
    }

    /// Per-batch insertion quota `floor(mem_sz / n)`.
    pub fn quota(&self) -> usize {
        self.capacity / self.declared_batches
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[StoredExample] {
        &self.slots
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn count_from_batch(&self, t: usize) -> usize {
        self.slots.iter().filter(|s| s.batch == t).count()
    }

    fn check_layout(&mut self, e: &LabeledExample) -> Result<()> {
        let l = RecordLayout::of(&e.features);
        match self.layout {
            None => {
                self.layout = Some(l);
                Ok(())
            }
            Some(existing) if existing == l => Ok(()),
            Some(existing) => Err(Error::Format {
                kind: "memory",
                message: format!("example layout {l:?} differs from stored {existing:?}"),
            }),
        }
    }

    /// Insert `min(quota, |batch|)` examples of `batch`, drawn uniformly without
    /// replacement. Returns the number inserted.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &StreamBatch, rng: &mut R) -> Result<usize> {
        let k = self.quota().min(batch.len());
        if k == 0 {
            return Ok(0);
        }
        let chosen = index::sample(rng, batch.len(), k);
        let mut evicted = false;
        for i in chosen.iter() {
            let example = &batch.examples[i];
            self.check_layout(example)?;
            self.offered += 1;
            let stored = StoredExample {
                example: example.clone(),
                batch: batch.index,
            };
            if self.slots.len() < self.capacity {
                self.slots.push(stored);
            } else {
                evicted = true;
                let j = rng.random_range(0..self.offered);
                if let Some(slot) = self.slots.get_mut(j as usize) {
                    *slot = stored;
                }
            }
        }
        if evicted {
            let msg = format!(
                "memory full while inserting batch {} (declared n = {}); \
                 falling back to reservoir replacement",
                batch.index, self.declared_batches
            );
            warn!("{msg}");
            self.warnings.push(msg);
        }
        Ok(k)
    }

    /// Uniform sample of exactly `count` examples: without replacement when
    /// `count <= len`, with replacement otherwise.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<LabeledExample>> {
        if self.slots.is_empty() {
            return Err(Error::Empty("cannot sample from an empty replay memory"));
        }
        Ok(self
            .sample_indices(count, rng)
            .into_iter()
            .map(|i| self.slots[i].example.clone())
            .collect())
    }

    /// Slot indices for [`ReplayMemory::sample`].
    pub fn sample_indices<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<usize> {
        let n = self.slots.len();
        if n == 0 {
            return Vec::new();
        }
        if count <= n {
            index::sample(rng, n, count).into_vec()
        } else {
            (0..count).map(|_| rng.random_range(0..n)).collect()
        }
    }

    /// Without-replacement sample of `min(count, len)` examples. Empty memory
    /// yields an empty sample.
    pub fn sample_capped<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<LabeledExample> {
        let n = count.min(self.slots.len());
        if n == 0 {
            return Vec::new();
        }
        index::sample(rng, self.slots.len(), n)
            .iter()
            .map(|i| self.slots[i].example.clone())
            .collect()
    }

    pub fn record_bytes(&self) -> u64 {
        self.layout.map_or(0, |l| l.record_bytes())
    }

    /// Exact snapshot size in bytes: header plus fixed-width records.
    pub fn footprint(&self) -> u64 {
        SNAPSHOT_HEADER_BYTES + self.slots.len() as u64 * self.record_bytes()
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<u64> {
        let (kind, a, b) = match self.layout {
            None => (0u64, 0u64, 0u64),
            Some(RecordLayout::Vector { dim }) => (1, dim as u64, 0),
            Some(RecordLayout::Image { width, height }) => (2, width as u64, height as u64),
        };
        let mut buf = Vec::with_capacity(self.footprint() as usize);
        buf.extend_from_slice(MAGIC);
        for v in [
            self.capacity as u64,
            self.declared_batches as u64,
            self.slots.len() as u64,
            kind,
            a,
            b,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.slots {
            for v in [s.example.label, s.example.session, s.batch] {
                buf.extend_from_slice(&(v as u64).to_le_bytes());
            }
            match &s.example.features {
                Features::Vector(v) => v
                    .iter()
                    .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                Features::Image(img) => buf.extend_from_slice(&img.to_u8()),
            }
        }
        w.write_all(&buf)
            .map_err(|e| Error::io("<memory snapshot>", e))?;
        Ok(buf.len() as u64)
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::io("<memory snapshot>", e))?;
        let bad = |m: &str| Error::Format {
            kind: "memory snapshot",
            message: m.to_string(),
        };
        if bytes.len() < SNAPSHOT_HEADER_BYTES as usize || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let u = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().unwrap()) as usize;
        let (capacity, n, count, kind, a, b) = (u(8), u(16), u(24), u(32), u(40), u(48));
        let layout = match kind {
            0 => None,
            1 => Some(RecordLayout::Vector { dim: a }),
            2 => Some(RecordLayout::Image {
                width: a,
                height: b,
            }),
            _ => return Err(bad("unknown record kind")),
        };
        let rec = layout.map_or(0, |l| l.record_bytes() as usize);
        if bytes.len() != SNAPSHOT_HEADER_BYTES as usize + count * rec {
            return Err(bad("length does not match header"));
        }
        let mut mem = ReplayMemory::new(capacity, n)?;
        mem.layout = layout;
        let mut off = SNAPSHOT_HEADER_BYTES as usize;
        for _ in 0..count {
            let (label, session, batch) = (u(off), u(off + 8), u(off + 16));
            off += RECORD_META_BYTES as usize;
            let features = match layout.expect("count > 0 implies a layout") {
                RecordLayout::Vector { dim } => {
                    let v = (0..dim)
                        .map(|i| {
                            let s = off + 8 * i;
                            f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap())
                        })
                        .collect();
                    off += 8 * dim;
                    Features::Vector(v)
                }
                RecordLayout::Image { width, height } => {
                    let len = width * height * 3;
                    let img = RasterImage::from_u8(width, height, &bytes[off..off + len])?;
                    off += len;
                    Features::Image(img)
                }
            };
            mem.slots.push(StoredExample {
                example: LabeledExample {
                    features,
                    label,
                    session,
                    task: None,
                },
                batch,
            });
        }
        mem.offered = count as u64;
        Ok(mem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use std::collections::HashSet;

    fn batch(index: usize, n: usize, dim: usize) -> StreamBatch {
        StreamBatch {
            index,
            examples: (0..n)
                .map(|i| LabeledExample::vector(vec![i as f64; dim], i % 7, index))
                .collect(),
            task_label: None,
        }
    }

    #[test]
    fn quota_examples() {
        let mut r = rng::stream(0, "m", &[]);
        let mut mem = ReplayMemory::new(10_000, 8).unwrap();
        assert_eq!(mem.update(&batch(1, 2000, 1), &mut r).unwrap(), 1250);
        assert_eq!(mem.update(&batch(2, 300, 1), &mut r).unwrap(), 300);
        assert_eq!(mem.len(), 1550);
        let before = mem.len();
        assert_eq!(mem.update(&batch(3, 0, 1), &mut r).unwrap(), 0);
        assert_eq!(mem.len(), before);
    }

    #[test]
    fn quota_inserts_distinct_examples() {
        let mut r = rng::stream(1, "m", &[]);
        let mut mem = ReplayMemory::new(50, 2).unwrap();
        mem.update(&batch(1, 40, 1), &mut r).unwrap();
        let seen: HashSet<u64> = mem
            .slots()
            .iter()
            .map(|s| s.example.features.as_vector().unwrap()[0].to_bits())
            .collect();
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn misdeclared_stream_falls_back_to_reservoir() {
        let mut r = rng::stream(2, "m", &[]);
        let mut mem = ReplayMemory::new(10, 2).unwrap();
        for t in 1..=4 {
            mem.update(&batch(t, 20, 1), &mut r).unwrap();
            assert!(mem.len() <= 10);
        }
        assert_eq!(mem.len(), 10);
        assert!(!mem.warnings().is_empty());
    }

    #[test]
    fn sampling_modes() {
        let mut r = rng::stream(3, "m", &[]);
        let mut mem = ReplayMemory::new(100, 1).unwrap();
        mem.update(&batch(1, 100, 1), &mut r).unwrap();
        let mut idx = mem.sample_indices(100, &mut r);
        idx.sort_unstable();
        assert_eq!(idx, (0..100).collect::<Vec<_>>());
        assert_eq!(mem.sample(250, &mut r).unwrap().len(), 250);
        assert_eq!(mem.sample_capped(250, &mut r).len(), 100);
        let empty = ReplayMemory::new(4, 1).unwrap();
        assert!(matches!(empty.sample(1, &mut r), Err(Error::Empty(_))));
        assert!(empty.sample_capped(3, &mut r).is_empty());
    }

    #[test]
    fn footprint_accounting() {
        let mut r = rng::stream(4, "m", &[]);
        let mut mem = ReplayMemory::new(100, 1).unwrap();
        assert_eq!(mem.footprint(), SNAPSHOT_HEADER_BYTES);
        mem.update(&batch(1, 100, 32), &mut r).unwrap();
        assert_eq!(mem.footprint(), 100 * (256 + 24) + SNAPSHOT_HEADER_BYTES);
    }

    #[test]
    fn snapshot_round_trip_and_size() {
        let mut r = rng::stream(5, "m", &[]);
        let mut mem = ReplayMemory::new(30, 3).unwrap();
        mem.update(&batch(1, 12, 5), &mut r).unwrap();
        mem.update(&batch(2, 4, 5), &mut r).unwrap();
        let mut buf = Vec::new();
        let n = mem.write_snapshot(&mut buf).unwrap();
        assert_eq!(n, mem.footprint());
        assert_eq!(buf.len() as u64, mem.footprint());
        let back = ReplayMemory::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.slots(), mem.slots());
        assert_eq!(back.capacity(), 30);
        assert_eq!(back.declared_batches(), 3);
        assert!(ReplayMemory::read_snapshot(&mut &buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn image_records() {
        let mut r = rng::stream(6, "m", &[]);
        let img = RasterImage::filled(4, 3, 9.0);
        let b = StreamBatch {
            index: 1,
            examples: vec![LabeledExample {
                features: Features::Image(img),
                label: 0,
                session: 0,
                task: None,
            }],
            task_label: None,
        };
        let mut mem = ReplayMemory::new(5, 1).unwrap();
        mem.update(&b, &mut r).unwrap();
        assert_eq!(mem.record_bytes(), 24 + 36);
        let mut buf = Vec::new();
        mem.write_snapshot(&mut buf).unwrap();
        let back = ReplayMemory::read_snapshot(&mut buf.as_slice()).unwrap();
        assert_eq!(back.slots(), mem.slots());
        assert!(mem.update(&batch(2, 1, 3), &mut r).is_err());
    }
}
