//! On-disk feature store.
//!
//! A store is a directory holding `features.lgt` (a flat sequence of segment
//! records) and `store.json` (dataset metadata). While a store is being
//! written a `PARTIAL` marker file exists; readers refuse such stores.
//!
//! Record layout, all integers little-endian `u32` unless noted:
//! `"LGT1"`, version, frames, bands, channels, clip id, segment index,
//! class id, fold, provenance length (`u16`) + UTF-8 provenance, then
//! `frames·bands·channels` `f32` values in time-major, band-next,
//! channel-last order. Provenance is empty for original clips.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{LogGtSegment, CHANNELS};
use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"LGT1";
pub const RECORD_VERSION: u32 = 1;
pub const FEATURES_FILE: &str = "features.lgt";
pub const META_FILE: &str = "store.json";
pub const PARTIAL_MARKER: &str = "PARTIAL";

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRecord {
    pub clip_id: u32,
    pub class_id: u32,
    pub fold: u32,
    /// Empty for original audio, otherwise origin clip and transform.
    pub provenance: String,
    pub segment: LogGtSegment,
}

impl SegmentRecord {
    pub fn is_augmented(&self) -> bool {
        !self.provenance.is_empty()
    }
}

pub fn write_record<W: Write>(w: &mut W, rec: &SegmentRecord) -> std::io::Result<()> {
    let seg = &rec.segment;
    let prov = rec.provenance.as_bytes();
    let prov_len = u16::try_from(prov.len())
        .map_err(|_| std::io::Error::new(ErrorKind::InvalidInput, "provenance longer than 65535 bytes"))?;
    w.write_all(RECORD_MAGIC)?;
    for v in [
        RECORD_VERSION,
        seg.frames as u32,
        seg.bands as u32,
        CHANNELS as u32,
        rec.clip_id,
        seg.segment_index as u32,
        rec.class_id,
        rec.fold,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&prov_len.to_le_bytes())?;
    w.write_all(prov)?;
    let mut buf = Vec::with_capacity(seg.data.len() * 4);
    for v in &seg.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<Option<SegmentRecord>> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    }
    if &magic != RECORD_MAGIC {
        return Err(Error::corrupt(path, format!("bad record magic {magic:?}")));
    }
    let truncated = |e: std::io::Error| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::corrupt(path, "truncated record")
        } else {
            Error::io(path, e)
        }
    };
    let mut header = [0u8; 32];
    r.read_exact(&mut header).map_err(truncated)?;
    let field = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
    let version = field(0);
    if version != RECORD_VERSION {
        return Err(Error::corrupt(path, format!("unsupported record version {version}")));
    }
    let (frames, bands, channels) = (field(1) as usize, field(2) as usize, field(3) as usize);
    if channels != CHANNELS || frames == 0 || bands == 0 {
        return Err(Error::corrupt(
            path,
            format!("bad record dims {frames}x{bands}x{channels}"),
        ));
    }
    let mut len = [0u8; 2];
    r.read_exact(&mut len).map_err(truncated)?;
    let mut prov = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut prov).map_err(truncated)?;
    let provenance = String::from_utf8(prov).map_err(|_| Error::corrupt(path, "provenance is not UTF-8"))?;
    let mut raw = vec![0u8; frames * bands * channels * 4];
    r.read_exact(&mut raw).map_err(truncated)?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let segment =
        LogGtSegment::new(frames, bands, field(5) as usize, data).map_err(|e| Error::corrupt(path, e.to_string()))?;
    Ok(Some(SegmentRecord {
        clip_id: field(4),
        class_id: field(6),
        fold: field(7),
        provenance,
        segment,
    }))
}

/// One clip's entry in the store metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredClip {
    pub clip_id: u32,
    pub fold: u32,
    pub class_id: u32,
    /// Source audio file name.
    pub source: String,
    /// Original clip this one was derived from, for augmented copies.
    pub origin_clip: Option<u32>,
    pub provenance: String,
    pub segments: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub sample_rate_hz: u32,
    pub num_classes: usize,
    pub num_folds: usize,
    pub class_names: Vec<String>,
    pub num_records: usize,
    pub clips: Vec<StoredClip>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreStatus {
    Missing,
    Partial,
    Complete,
}

pub fn store_status(dir: &Path) -> StoreStatus {
    if dir.join(PARTIAL_MARKER).exists() {
        StoreStatus::Partial
    } else if dir.join(META_FILE).is_file() && dir.join(FEATURES_FILE).is_file() {
        StoreStatus::Complete
    } else {
        StoreStatus::Missing
    }
}

/// Streams records into a new store. The partial marker is removed only by
/// [`StoreWriter::finish`].
pub struct StoreWriter {
    dir: PathBuf,
    out: BufWriter<File>,
    written: usize,
}

impl StoreWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let marker = dir.join(PARTIAL_MARKER);
        std::fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))?;
        let meta = dir.join(META_FILE);
        if meta.exists() {
            std::fs::remove_file(&meta).map_err(|e| Error::io(&meta, e))?;
        }
        let path = dir.join(FEATURES_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(StoreWriter {
            dir: dir.to_path_buf(),
            out: BufWriter::new(file),
            written: 0,
        })
    }

    pub fn write(&mut self, rec: &SegmentRecord) -> Result<()> {
        write_record(&mut self.out, rec).map_err(|e| Error::io(self.dir.join(FEATURES_FILE), e))?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self, mut meta: StoreMeta) -> Result<()> {
        let features = self.dir.join(FEATURES_FILE);
        self.out.flush().map_err(|e| Error::io(&features, e))?;
        meta.num_records = self.written;
        let path = self.dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(format!("store metadata: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let marker = self.dir.join(PARTIAL_MARKER);
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))
    }
}

/// Reads only `store.json`, without the records.
pub fn read_store_meta(dir: &Path) -> Result<StoreMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// A fully loaded store.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub meta: StoreMeta,
    pub records: Vec<SegmentRecord>,
}

/// Segments of one clip, in segment order.
#[derive(Clone, Debug)]
pub struct ClipGroup<'a> {
    pub clip_id: u32,
    pub class_id: u32,
    pub fold: u32,
    pub augmented: bool,
    pub segments: Vec<&'a LogGtSegment>,
}

impl FeatureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        match store_status(dir) {
            StoreStatus::Complete => {}
            StoreStatus::Partial => return Err(Error::corrupt(dir, "store is incomplete (partial marker present)")),
            StoreStatus::Missing => {
                return Err(Error::io(
                    dir,
                    std::io::Error::new(ErrorKind::NotFound, "no feature store here"),
                ))
            }
        }
        let meta = read_store_meta(dir)?;
        let path = dir.join(FEATURES_FILE);
        let mut r = BufReader::new(File::open(&path).map_err(|e| Error::io(&path, e))?);
        let mut records = Vec::with_capacity(meta.num_records);
        while let Some(rec) = read_record(&mut r, &path)? {
            records.push(rec);
        }
        if records.len() != meta.num_records {
            return Err(Error::corrupt(
                &path,
                format!("{} records, metadata says {}", records.len(), meta.num_records),
            ));
        }
        Ok(FeatureStore { meta, records })
    }

    /// Groups records by clip, preserving first-appearance order.
    pub fn clip_groups(&self) -> Vec<ClipGroup<'_>> {
        let mut groups: Vec<ClipGroup<'_>> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for rec in &self.records {
            let i = *index.entry(rec.clip_id).or_insert_with(|| {
                groups.push(ClipGroup {
                    clip_id: rec.clip_id,
                    class_id: rec.class_id,
                    fold: rec.fold,
                    augmented: rec.is_augmented(),
                    segments: Vec::new(),
                });
                groups.len() - 1
            });
            groups[i].segments.push(&rec.segment);
        }
        for g in &mut groups {
            g.segments.sort_by_key(|s| s.segment_index);
        }
        groups
    }

    /// Segment count per fold (index = fold − 1), originals and augmented.
    pub fn segments_per_fold(&self) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); self.meta.num_folds];
        for rec in &self.records {
            if let Some(c) = counts.get_mut(rec.fold as usize - 1) {
                if rec.is_augmented() {
                    c.1 += 1;
                } else {
                    c.0 += 1;
                }
            }
        }
        counts
    }
}
