//! The disk tier of the replay pool.
//!
//! Confident, in-task pseudo-labeled samples are appended to a fixed-record
//! file used as a ring buffer: once `capacity` records exist the oldest is
//! overwritten. RAM holds only an index of `(offset, pseudo_label)` per slot
//! and the per-class record counts; features are read back only when the
//! offline exchange samples from the pool.
//!
//! File layout, little-endian throughout:
//!
//! ```text
//! header  (32 bytes)  magic "EHMLPOOL" | version u16 = 1 | dim u16 | capacity u32
//!                     | count u32 | write_cursor u32 | 8 reserved bytes
//! record  (16 + 4*dim) id u64 | pseudo_label u32 | confidence f32 | features f32 * dim
//! ```
//!
//! Record `slot` lives at `32 + slot * record_size`. Appends are buffered and
//! the header is rewritten by [`DiskPool::flush`], once per offline phase.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{argmax, ClassId, PseudoLabeledSample, Sample};

pub const MAGIC: &[u8; 8] = b"EHMLPOOL";
pub const VERSION: u16 = 1;
pub const HEADER_SIZE: u64 = 32;

pub fn record_size(dim: usize) -> u64 {
    8 + 4 + 4 + 4 * dim as u64
}

/// Smallest `f32` not below `x`.
fn f32_at_least(x: f64) -> f32 {
    let f = x as f32;
    if f64::from(f) < x {
        f.next_up()
    } else {
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AdmissionDecision {
    Admitted(PseudoLabeledSample),
    RejectedLowConfidence,
    RejectedOutOfTask,
    RejectedByCoin,
}

/// The online admission rule: a sample becomes a disk candidate when the
/// model's top probability reaches `tau` and the predicted class belongs to
/// the current task; a candidate is kept with probability `p_admit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissionGate {
    pub num_classes: usize,
    pub tau: f64,
    pub p_admit: f64,
}

impl AdmissionGate {
    pub fn consider(
        &self,
        u: &Sample,
        probs: &[f64],
        task_classes: &BTreeSet<ClassId>,
        rng: &mut Rng,
    ) -> Result<AdmissionDecision> {
        if probs.len() != self.num_classes {
            return Err(Error::Shape(format!(
                "probability vector has {} entries, expected {}",
                probs.len(),
                self.num_classes
            )));
        }
        let Some((label, top)) = argmax(probs) else {
            return Ok(AdmissionDecision::RejectedLowConfidence);
        };
        if top < self.tau {
            return Ok(AdmissionDecision::RejectedLowConfidence);
        }
        if !task_classes.contains(&label) {
            return Ok(AdmissionDecision::RejectedOutOfTask);
        }
        if !rng.random_bool(self.p_admit) {
            return Ok(AdmissionDecision::RejectedByCoin);
        }
        Ok(AdmissionDecision::Admitted(PseudoLabeledSample {
            sample: u.clone(),
            pseudo_label: label,
            confidence: f32_at_least(top),
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: u64,
    pub pseudo_label: ClassId,
}

/// The RAM-resident part of a pool, comparable across rebuilds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolState {
    pub count: usize,
    pub write_cursor: usize,
    pub index: Vec<IndexEntry>,
    pub class_num: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    dim: usize,
    capacity: usize,
    count: usize,
    write_cursor: usize,
}

impl Header {
    fn encode(&self) -> [u8; HEADER_SIZE as usize] {
        let mut buf = [0u8; HEADER_SIZE as usize];
        buf[0..8].copy_from_slice(MAGIC);
        buf[8..10].copy_from_slice(&VERSION.to_le_bytes());
        buf[10..12].copy_from_slice(&(self.dim as u16).to_le_bytes());
        buf[12..16].copy_from_slice(&(self.capacity as u32).to_le_bytes());
        buf[16..20].copy_from_slice(&(self.count as u32).to_le_bytes());
        buf[20..24].copy_from_slice(&(self.write_cursor as u32).to_le_bytes());
        buf
    }

    fn decode(path: &Path, buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_SIZE as usize {
            return Err(Error::format(path, "header", "file shorter than the 32-byte header"));
        }
        if &buf[0..8] != MAGIC {
            return Err(Error::format(path, "header", "bad magic, not a pool file"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([buf[i], buf[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let version = u16_at(8);
        if version != VERSION {
            return Err(Error::format(
                path,
                "header",
                format!("unsupported format version {version}"),
            ));
        }
        let header = Header {
            dim: usize::from(u16_at(10)),
            capacity: u32_at(12) as usize,
            count: u32_at(16) as usize,
            write_cursor: u32_at(20) as usize,
        };
        if header.capacity == 0
            || header.count > header.capacity
            || header.write_cursor >= header.capacity
            || (header.count < header.capacity && header.write_cursor != header.count)
        {
            return Err(Error::format(
                path,
                "header",
                format!(
                    "inconsistent counters: capacity {}, count {}, cursor {}",
                    header.capacity, header.count, header.write_cursor
                ),
            ));
        }
        Ok(header)
    }
}

fn encode_record(ps: &PseudoLabeledSample, out: &mut Vec<u8>) {
    out.clear();
    out.extend_from_slice(&ps.sample.id.to_le_bytes());
    out.extend_from_slice(&(ps.pseudo_label as u32).to_le_bytes());
    out.extend_from_slice(&ps.confidence.to_le_bytes());
    for f in &ps.sample.features {
        out.extend_from_slice(&f.to_le_bytes());
    }
}

fn decode_record(buf: &[u8], dim: usize) -> PseudoLabeledSample {
    let id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
    let pseudo_label = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let confidence = f32::from_le_bytes(buf[12..16].try_into().unwrap());
    let features = (0..dim)
        .map(|i| {
            let at = 16 + 4 * i;
            f32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
        })
        .collect();
    PseudoLabeledSample {
        sample: Sample::new(id, features),
        pseudo_label,
        confidence,
    }
}

pub struct DiskPool {
    path: PathBuf,
    file: BufWriter<File>,
    /// Where the underlying file cursor sits once the buffer drains.
    position: u64,
    dim: usize,
    capacity: usize,
    count: usize,
    write_cursor: usize,
    index: Vec<IndexEntry>,
    class_num: Vec<u64>,
    scratch: Vec<u8>,
    /// Appends not yet covered by a header rewrite.
    dirty: bool,
}

impl std::fmt::Debug for DiskPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiskPool")
            .field("path", &self.path)
            .field("dim", &self.dim)
            .field("capacity", &self.capacity)
            .field("count", &self.count)
            .field("write_cursor", &self.write_cursor)
            .field("class_num", &self.class_num)
            .finish()
    }
}

impl DiskPool {
    /// Creates (or truncates) an empty pool file.
    pub fn create(path: &Path, dim: usize, capacity: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 || capacity > u32::MAX as usize {
            return Err(Error::config("disk_capacity", format!("{capacity} outside [1, 2^32)")));
        }
        if dim == 0 || dim > u16::MAX as usize {
            return Err(Error::Shape(format!("feature dimension {dim} outside [1, 65535]")));
        }
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        let mut pool = Self {
            path: path.to_path_buf(),
            file: BufWriter::new(file),
            position: 0,
            dim,
            capacity,
            count: 0,
            write_cursor: 0,
            index: Vec::new(),
            class_num: vec![0; num_classes],
            scratch: Vec::new(),
            dirty: true,
        };
        pool.flush()?;
        Ok(pool)
    }

    /// Reopens a pool file, reconstructing the index and class counts from
    /// the header counters and the records themselves.
    pub fn rebuild_index(path: &Path, capacity: usize, num_classes: usize) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut head = [0u8; HEADER_SIZE as usize];
        let read = read_up_to(&mut file, &mut head)?;
        let header = Header::decode(path, &head[..read])?;
        if header.capacity != capacity {
            return Err(Error::format(
                path,
                "header",
                format!("capacity {} does not match expected {capacity}", header.capacity),
            ));
        }
        let rsize = record_size(header.dim);
        let needed = HEADER_SIZE + header.count as u64 * rsize;
        let len = file.metadata()?.len();
        if len < needed {
            return Err(Error::format(
                path,
                "records",
                format!("file holds {len} bytes, {needed} needed for {} records", header.count),
            ));
        }

        let mut index = Vec::with_capacity(header.count);
        let mut class_num = vec![0u64; num_classes];
        let mut buf = vec![0u8; rsize as usize];
        for slot in 0..header.count {
            let offset = HEADER_SIZE + slot as u64 * rsize;
            file.read_exact(&mut buf)?;
            let rec = decode_record(&buf, header.dim);
            if rec.pseudo_label >= num_classes {
                return Err(Error::format(
                    path,
                    format!("record {slot}"),
                    format!("pseudo-label {} outside [0, {num_classes})", rec.pseudo_label),
                ));
            }
            if !(0.0..=1.0).contains(&rec.confidence) {
                return Err(Error::format(
                    path,
                    format!("record {slot}"),
                    format!("confidence {} outside [0, 1]", rec.confidence),
                ));
            }
            class_num[rec.pseudo_label] += 1;
            index.push(IndexEntry {
                offset,
                pseudo_label: rec.pseudo_label,
            });
        }
        let position = HEADER_SIZE + header.count as u64 * rsize;
        Ok(Self {
            path: path.to_path_buf(),
            file: BufWriter::new(file),
            position,
            dim: header.dim,
            capacity: header.capacity,
            count: header.count,
            write_cursor: header.write_cursor,
            index,
            class_num,
            scratch: Vec::new(),
            dirty: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn write_cursor(&self) -> usize {
        self.write_cursor
    }

    pub fn class_num(&self) -> &[u64] {
        &self.class_num
    }

    pub fn index(&self) -> &[IndexEntry] {
        &self.index
    }

    pub fn num_classes(&self) -> usize {
        self.class_num.len()
    }

    pub fn state(&self) -> PoolState {
        PoolState {
            count: self.count,
            write_cursor: self.write_cursor,
            index: self.index.clone(),
            class_num: self.class_num.clone(),
        }
    }

    fn seek_to(&mut self, offset: u64) -> Result<()> {
        if self.position != offset {
            self.file.seek(SeekFrom::Start(offset))?;
            self.position = offset;
        }
        Ok(())
    }

    /// Writes `ps` at the write cursor, overwriting the oldest record once
    /// the pool is full. Returns the slot written.
    pub fn append(&mut self, ps: &PseudoLabeledSample) -> Result<usize> {
        if ps.sample.features.len() != self.dim {
            return Err(Error::Shape(format!(
                "record has {} features, pool stores {}",
                ps.sample.features.len(),
                self.dim
            )));
        }
        if ps.pseudo_label >= self.class_num.len() {
            return Err(Error::Shape(format!(
                "pseudo-label {} outside [0, {})",
                ps.pseudo_label,
                self.class_num.len()
            )));
        }
        let slot = self.write_cursor;
        let offset = HEADER_SIZE + slot as u64 * record_size(self.dim);
        let mut scratch = std::mem::take(&mut self.scratch);
        encode_record(ps, &mut scratch);
        let written = self
            .seek_to(offset)
            .and_then(|()| self.file.write_all(&scratch).map_err(Error::from));
        self.scratch = scratch;
        if let Err(e) = written {
            // position is unknown after a failed write
            self.position = u64::MAX;
            return Err(e);
        }
        self.position = offset + record_size(self.dim);

        let entry = IndexEntry {
            offset,
            pseudo_label: ps.pseudo_label,
        };
        if self.count == self.capacity {
            let evicted = self.index[slot].pseudo_label;
            self.class_num[evicted] -= 1;
            self.index[slot] = entry;
        } else {
            self.index.push(entry);
            self.count += 1;
        }
        self.class_num[ps.pseudo_label] += 1;
        self.write_cursor = (self.write_cursor + 1) % self.capacity;
        self.dirty = true;
        Ok(slot)
    }

    /// Drains buffered records and rewrites the header counters.
    pub fn flush(&mut self) -> Result<()> {
        let header = Header {
            dim: self.dim,
            capacity: self.capacity,
            count: self.count,
            write_cursor: self.write_cursor,
        }
        .encode();
        self.seek_to(0)?;
        self.file.write_all(&header)?;
        self.position = HEADER_SIZE;
        self.file.flush()?;
        self.file.get_ref().sync_data()?;
        self.dirty = false;
        Ok(())
    }

    pub fn read_slot(&mut self, slot: usize) -> Result<PseudoLabeledSample> {
        let entry = *self.index.get(slot).ok_or_else(|| {
            Error::Shape(format!("slot {slot} outside the {} stored records", self.count))
        })?;
        self.file.flush()?;
        self.seek_to(entry.offset)?;
        let mut buf = vec![0u8; record_size(self.dim) as usize];
        let read = self.file.get_mut().read_exact(&mut buf);
        if let Err(e) = read {
            self.position = u64::MAX;
            return Err(e.into());
        }
        self.position = entry.offset + buf.len() as u64;
        Ok(decode_record(&buf, self.dim))
    }

    /// Draws up to `k` distinct records: each draw picks a class with
    /// probability proportional to `class_prob` among classes that still
    /// have unused records, then a uniformly random unused record of that
    /// class. Stops early when no class with positive weight remains.
    pub fn sample_by_class_prob(
        &mut self,
        class_prob: &[f64],
        k: usize,
        rng: &mut Rng,
    ) -> Result<Vec<PseudoLabeledSample>> {
        if class_prob.len() != self.class_num.len() {
            return Err(Error::Shape(format!(
                "class_prob has {} entries, pool tracks {} classes",
                class_prob.len(),
                self.class_num.len()
            )));
        }
        if class_prob.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Shape("class_prob entries must be finite and non-negative".into()));
        }
        if k == 0 || self.count == 0 {
            return Ok(Vec::new());
        }

        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.class_num.len()];
        for (slot, entry) in self.index.iter().enumerate() {
            by_class[entry.pseudo_label].push(slot);
        }

        let mut chosen = Vec::with_capacity(k.min(self.count));
        while chosen.len() < k {
            let total: f64 = by_class
                .iter()
                .zip(class_prob)
                .filter(|(slots, _)| !slots.is_empty())
                .map(|(_, p)| p)
                .sum();
            if total <= 0.0 {
                break;
            }
            let mut target = rng.random::<f64>() * total;
            let mut class = None;
            for (c, (slots, &p)) in by_class.iter().zip(class_prob).enumerate() {
                if slots.is_empty() || p <= 0.0 {
                    continue;
                }
                class = Some(c);
                if target < p {
                    break;
                }
                target -= p;
            }
            // rounding can leave `target` just past the last bucket; the
            // last eligible class absorbs it
            let class = class.expect("positive total implies an eligible class");
            let slots = &mut by_class[class];
            let pick = rng.random_range(0..slots.len());
            chosen.push(slots.swap_remove(pick));
        }

        chosen.into_iter().map(|slot| self.read_slot(slot)).collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let total: u64 = self.class_num.iter().sum();
        if total != self.count as u64 || self.index.len() != self.count || self.count > self.capacity {
            return Err(Error::format(
                &self.path,
                "index",
                format!(
                    "count {} but class_num sums to {total} and index holds {}",
                    self.count,
                    self.index.len()
                ),
            ));
        }
        Ok(())
    }
}

impl Drop for DiskPool {
    fn drop(&mut self) {
        if !self.dirty {
            return;
        }
        if let Err(e) = self.flush() {
            log::warn!("failed to flush disk pool {}: {e}", self.path.display());
        }
    }
}

fn read_up_to(file: &mut File, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match file.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// Header fields and the pseudo-label histogram of a pool file, read
/// without knowing the class count in advance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub version: u16,
    pub dim: usize,
    pub capacity: usize,
    pub count: usize,
    pub write_cursor: usize,
    /// Record count per pseudo-label, up to the largest label present.
    pub histogram: Vec<u64>,
}

/// Reads a pool file and checks that rebuilding its index reproduces the
/// same counts.
pub fn inspect(path: &Path) -> Result<PoolSummary> {
    let mut file = File::open(path)?;
    let mut head = [0u8; HEADER_SIZE as usize];
    let read = read_up_to(&mut file, &mut head)?;
    let header = Header::decode(path, &head[..read])?;
    let rsize = record_size(header.dim) as usize;
    let mut buf = vec![0u8; rsize];
    let mut histogram: Vec<u64> = Vec::new();
    for slot in 0..header.count {
        file.read_exact(&mut buf).map_err(|_| {
            Error::format(path, format!("record {slot}"), "truncated record")
        })?;
        let label = decode_record(&buf, header.dim).pseudo_label;
        if label >= histogram.len() {
            histogram.resize(label + 1, 0);
        }
        histogram[label] += 1;
    }
    drop(file);

    let rebuilt = DiskPool::rebuild_index(path, header.capacity, histogram.len().max(1))?;
    let mut rebuilt_hist = rebuilt.class_num().to_vec();
    rebuilt_hist.truncate(histogram.len());
    if rebuilt_hist != histogram {
        return Err(Error::format(path, "index", "rebuilt class counts disagree with a direct scan"));
    }
    Ok(PoolSummary {
        version: VERSION,
        dim: header.dim,
        capacity: header.capacity,
        count: header.count,
        write_cursor: header.write_cursor,
        histogram,
    })
}
