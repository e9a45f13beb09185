//! On-disk corpus: a JSONL manifest of records plus a binary frame blob.
//!
//! The manifest holds one JSON object per line — task kind, text, optional
//! scene, optional frame index. The blob holds every referenced image as
//! raw row-major interleaved RGB under a fixed geometry:
//!
//! ```text
//! magic "LIQDAT1" | version u8 | count u64 LE | height u32 LE | width u32 LE
//! count × (height·width·3) frame bytes
//! ```
//!
//! Loading re-validates magic, version, geometry, exact byte length, and
//! every frame reference. `content_hash` is a SHA-256 over both files, so
//! two corpora are interchangeable iff their hashes match.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::image::ImageU8;
use crate::scene::SceneSpec;
use crate::sequence::TaskKind;

pub const BLOB_MAGIC: &[u8; 7] = b"LIQDAT1";
pub const BLOB_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {source}")]
    Manifest { line: usize, source: serde_json::Error },
    #[error("blob magic mismatch")]
    BadMagic,
    #[error("blob version {got}, expected {BLOB_VERSION}")]
    BadVersion { got: u8 },
    #[error("blob holds {got} bytes, geometry requires {expected}")]
    Truncated { expected: u64, got: u64 },
    #[error("record {record} references frame {frame}, blob holds {frames}")]
    BadFrameRef { record: usize, frame: usize, frames: usize },
    #[error("record {record} kind {kind} must {need}")]
    BadRecord { record: usize, kind: &'static str, need: &'static str },
    #[error("frame {got} shaped {got_h}x{got_w}, store is {h}x{w}")]
    FrameGeometry { got: usize, got_h: usize, got_w: usize, h: usize, w: usize },
    #[error("frame index {index} out of range {frames}")]
    FrameOutOfRange { index: usize, frames: usize },
}

/// One manifest line. `text` is the full sample for `text` records and the
/// caption for `t2i`/`i2t`; image records carry their scene and a frame
/// index into the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub kind: TaskKind,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scene: Option<SceneSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frame: Option<usize>,
}

/// Fixed-geometry frame storage backing the manifest's image references.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameStore {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FrameStore {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: Vec::new() }
    }

    pub fn len(&self) -> usize {
        if self.height == 0 || self.width == 0 {
            return 0;
        }
        self.data.len() / (self.height * self.width * 3)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Appends a frame and returns its index.
    pub fn push(&mut self, image: &ImageU8) -> Result<usize, DataError> {
        if self.is_empty() && self.data.is_empty() {
            self.height = image.height();
            self.width = image.width();
        }
        if image.height() != self.height || image.width() != self.width {
            return Err(DataError::FrameGeometry {
                got: self.len(),
                got_h: image.height(),
                got_w: image.width(),
                h: self.height,
                w: self.width,
            });
        }
        self.data.extend_from_slice(image.data());
        Ok(self.len() - 1)
    }

    pub fn frame(&self, index: usize) -> Result<ImageU8, DataError> {
        if index >= self.len() {
            return Err(DataError::FrameOutOfRange { index, frames: self.len() });
        }
        let stride = self.height * self.width * 3;
        let bytes = self.data[index * stride..(index + 1) * stride].to_vec();
        Ok(ImageU8::new(self.height, self.width, bytes).expect("stride matches geometry"))
    }
}

/// A corpus: manifest records plus the frames they reference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<DataRecord>,
    pub frames: FrameStore,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_text(&mut self, text: impl Into<String>) {
        self.records.push(DataRecord {
            kind: TaskKind::Text,
            text: text.into(),
            scene: None,
            frame: None,
        });
    }

    /// Adds one scene under both image tasks, sharing a single frame.
    pub fn push_scene_pair(
        &mut self,
        caption: &str,
        scene: &SceneSpec,
        image: &ImageU8,
    ) -> Result<usize, DataError> {
        let frame = self.frames.push(image)?;
        for kind in [TaskKind::T2i, TaskKind::I2t] {
            self.records.push(DataRecord {
                kind,
                text: caption.to_string(),
                scene: Some(scene.clone()),
                frame: Some(frame),
            });
        }
        Ok(frame)
    }

    /// Every record's frame reference resolves and image records carry a
    /// scene; text records carry neither.
    pub fn validate(&self) -> Result<(), DataError> {
        for (i, r) in self.records.iter().enumerate() {
            match r.kind {
                TaskKind::Text => {
                    if r.scene.is_some() || r.frame.is_some() {
                        return Err(DataError::BadRecord {
                            record: i,
                            kind: "text",
                            need: "carry no scene or frame",
                        });
                    }
                }
                TaskKind::T2i | TaskKind::I2t => {
                    let kind = r.kind.as_str();
                    if r.scene.is_none() {
                        return Err(DataError::BadRecord { record: i, kind, need: "carry a scene" });
                    }
                    match r.frame {
                        None => {
                            return Err(DataError::BadRecord {
                                record: i,
                                kind,
                                need: "reference a frame",
                            })
                        }
                        Some(f) if f >= self.frames.len() => {
                            return Err(DataError::BadFrameRef {
                                record: i,
                                frame: f,
                                frames: self.frames.len(),
                            });
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, manifest_path: &Path, blob_path: &Path) -> Result<(), DataError> {
        self.validate()?;
        let mut m = BufWriter::new(fs::File::create(manifest_path)?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(m, "{line}")?;
        }
        m.flush()?;

        let mut b = BufWriter::new(fs::File::create(blob_path)?);
        b.write_all(BLOB_MAGIC)?;
        b.write_all(&[BLOB_VERSION])?;
        b.write_all(&(self.frames.len() as u64).to_le_bytes())?;
        b.write_all(&(self.frames.height as u32).to_le_bytes())?;
        b.write_all(&(self.frames.width as u32).to_le_bytes())?;
        b.write_all(&self.frames.data)?;
        b.flush()?;
        Ok(())
    }

    pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(manifest_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: DataRecord = serde_json::from_str(&line)
                .map_err(|source| DataError::Manifest { line: i + 1, source })?;
            records.push(r);
        }

        let mut b = BufReader::new(fs::File::open(blob_path)?);
        let mut magic = [0u8; 7];
        b.read_exact(&mut magic).map_err(|_| DataError::BadMagic)?;
        if &magic != BLOB_MAGIC {
            return Err(DataError::BadMagic);
        }
        let mut version = [0u8; 1];
        b.read_exact(&mut version).map_err(|_| DataError::BadVersion { got: 0 })?;
        if version[0] != BLOB_VERSION {
            return Err(DataError::BadVersion { got: version[0] });
        }
        let mut u64buf = [0u8; 8];
        let mut u32buf = [0u8; 4];
        b.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf);
        b.read_exact(&mut u32buf)?;
        let height = u32::from_le_bytes(u32buf) as usize;
        b.read_exact(&mut u32buf)?;
        let width = u32::from_le_bytes(u32buf) as usize;
        let expected = count * (height * width * 3) as u64;
        let mut data = Vec::new();
        b.read_to_end(&mut data)?;
        if data.len() as u64 != expected {
            return Err(DataError::Truncated { expected, got: data.len() as u64 });
        }

        let ds = Self { records, frames: FrameStore { height, width, data } };
        ds.validate()?;
        Ok(ds)
    }

    /// SHA-256 over the serialized manifest and blob; hex string.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(serde_json::to_string(r).expect("record serializes"));
            h.update(b"\n");
        }
        h.update(BLOB_MAGIC);
        h.update([BLOB_VERSION]);
        h.update((self.frames.len() as u64).to_le_bytes());
        h.update((self.frames.height as u32).to_le_bytes());
        h.update((self.frames.width as u32).to_le_bytes());
        h.update(&self.frames.data);
        hex(&h.finalize())
    }

    /// Splits records (not frames) into train/validation by a deterministic
    /// shuffle of record indices; frames are shared by reference semantics
    /// (both halves keep the full store).
    pub fn split(&self, val_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_val = ((self.records.len() as f64) * val_fraction).round() as usize;
        let (val_idx, train_idx) = idx.split_at(n_val.min(idx.len()));
        let pick = |ids: &[usize]| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            Dataset {
                records: ids.iter().map(|&i| self.records[i].clone()).collect(),
                frames: self.frames.clone(),
            }
        };
        (pick(train_idx), pick(val_idx))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_hash(path: &Path) -> Result<String, DataError> {
    let mut h = Sha256::new();
    let mut f = BufReader::new(fs::File::open(path)?);
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Builds the synthetic corpus: `n_scenes` rendered scenes (each under both
/// image tasks) plus `n_text` standalone text samples.
pub fn synth_dataset(n_scenes: usize, n_text: usize, seed: u64) -> Dataset {
    let mut ds = Dataset::new();
    for rec in crate::scene::synth_corpus(n_scenes, seed) {
        ds.push_scene_pair(&rec.caption, &rec.spec, &rec.image)
            .expect("synthetic frames share one geometry");
    }
    for text in crate::scene::synth_text(n_text, seed.wrapping_add(1)) {
        ds.push_text(text);
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth_corpus;

    fn sample() -> Dataset {
        let mut ds = Dataset::new();
        ds.push_text("the grid is empty");
        for rec in synth_corpus(3, 9) {
            ds.push_scene_pair(&rec.caption, &rec.spec, &rec.image).unwrap();
        }
        ds
    }

    #[test]
    fn roundtrips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("c.jsonl"), dir.path().join("c.bin"));
        let ds = sample();
        ds.save(&m, &b).unwrap();
        let back = Dataset::load(&m, &b).unwrap();
        assert_eq!(ds, back);
        assert_eq!(ds.content_hash(), back.content_hash());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let (m1, b1) = (dir.path().join("1.jsonl"), dir.path().join("1.bin"));
        let (m2, b2) = (dir.path().join("2.jsonl"), dir.path().join("2.bin"));
        ds.save(&m1, &b1).unwrap();
        ds.save(&m2, &b2).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        assert_eq!(fs::read(&b1).unwrap(), fs::read(&b2).unwrap());
    }

    #[test]
    fn scene_pair_shares_one_frame() {
        let ds = sample();
        assert_eq!(ds.frames.len(), 3);
        assert_eq!(ds.records.len(), 7);
        let pairs: Vec<_> = ds.records.iter().filter(|r| r.frame.is_some()).collect();
        assert_eq!(pairs.len(), 6);
        for w in pairs.chunks(2) {
            assert_eq!(w[0].frame, w[1].frame);
            assert_eq!(w[0].kind, TaskKind::T2i);
            assert_eq!(w[1].kind, TaskKind::I2t);
        }
    }

    #[test]
    fn frames_roundtrip_pixels() {
        let ds = sample();
        let recs = synth_corpus(3, 9);
        for (i, rec) in recs.iter().enumerate() {
            assert_eq!(ds.frames.frame(i).unwrap(), rec.image);
        }
        assert!(matches!(
            ds.frames.frame(3),
            Err(DataError::FrameOutOfRange { index: 3, frames: 3 })
        ));
    }

    #[test]
    fn corrupted_blob_is_rejected_with_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (m, b) = (dir.path().join("c.jsonl"), dir.path().join("c.bin"));
        sample().save(&m, &b).unwrap();
        let good = fs::read(&b).unwrap();

        let mut bad = good.clone();
        bad[0] ^= 0xff;
        fs::write(&b, &bad).unwrap();
        assert!(matches!(Dataset::load(&m, &b), Err(DataError::BadMagic)));

        let mut bad = good.clone();
        bad[7] = 9;
        fs::write(&b, &bad).unwrap();
        assert!(matches!(Dataset::load(&m, &b), Err(DataError::BadVersion { got: 9 })));

        let mut bad = good.clone();
        bad.pop();
        fs::write(&b, &bad).unwrap();
        assert!(matches!(Dataset::load(&m, &b), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn manifest_kinds_serialize_lowercase() {
        let ds = sample();
        let line = serde_json::to_string(&ds.records[0]).unwrap();
        assert!(line.contains("\"kind\":\"text\""), "{line}");
        let line = serde_json::to_string(&ds.records[1]).unwrap();
        assert!(line.contains("\"kind\":\"t2i\""), "{line}");
    }

    #[test]
    fn validate_rejects_inconsistent_records() {
        let mut ds = sample();
        ds.records[0].frame = Some(0);
        assert!(matches!(ds.validate(), Err(DataError::BadRecord { kind: "text", .. })));

        let mut ds = sample();
        ds.records[1].frame = Some(99);
        assert!(matches!(ds.validate(), Err(DataError::BadFrameRef { frame: 99, .. })));

        let mut ds = sample();
        ds.records[1].scene = None;
        assert!(matches!(ds.validate(), Err(DataError::BadRecord { kind: "t2i", .. })));
    }

    #[test]
    fn mixed_geometry_frames_are_rejected() {
        let mut store = FrameStore::new(32, 32);
        store.push(&ImageU8::filled(32, 32, [0, 0, 0])).unwrap();
        let err = store.push(&ImageU8::filled(16, 32, [0, 0, 0])).unwrap_err();
        assert!(matches!(err, DataError::FrameGeometry { got_h: 16, .. }));
    }

    #[test]
    fn split_is_deterministic_and_partitions_records() {
        let ds = synth_dataset(10, 10, 4);
        let (tr1, va1) = ds.split(0.25, 7);
        let (tr2, va2) = ds.split(0.25, 7);
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(tr1.records.len() + va1.records.len(), ds.records.len());
        let (tr3, _) = ds.split(0.25, 8);
        assert_ne!(tr1.records, tr3.records);
    }

    #[test]
    fn synth_dataset_counts_and_hash_stability() {
        let a = synth_dataset(5, 4, 123);
        let b = synth_dataset(5, 4, 123);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.frames.len(), 5);
        assert_eq!(a.records.len(), 14);
        let c = synth_dataset(5, 4, 124);
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
