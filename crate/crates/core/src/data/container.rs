//! On-disk dataset: `manifest.json` plus a flat `samples.bin`.
//!
//! Each record is the tile `(z, x, y)` and class as little-endian u32, then
//! the radar, lores and hires rasters as little-endian f32, channel-first and
//! row-major. Records are fixed-size, so `samples.bin` is exactly
//! `count · record_size` bytes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::raster::Raster;
use super::synth::{AlignedTriplet, OPTICAL_CHANNELS, RADAR_CHANNELS};
use super::tiles::TileId;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.bin";
pub const DATASET_MAGIC: &str = "SALBDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub offset: u64,
    pub tile: TileId,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub magic: String,
    pub version: u32,
    pub count: usize,
    /// Low-res side length `S`.
    pub size: usize,
    pub seed: Option<u64>,
    pub classes: Option<u32>,
    /// Optional subset tag such as `micro`, `small` or `full`.
    pub subset: Option<String>,
    pub record_size: u64,
    pub records: Vec<RecordEntry>,
}

/// Bytes per record for low-res size `s`.
pub fn record_size(s: usize) -> u64 {
    let floats = (RADAR_CHANNELS + OPTICAL_CHANNELS) * s * s + OPTICAL_CHANNELS * 4 * s * s;
    16 + 4 * floats as u64
}

fn encode_record(t: &AlignedTriplet, out: &mut Vec<u8>) {
    for v in [t.tile.z, t.tile.x, t.tile.y, t.class_id] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in [&t.radar, &t.lores, &t.hires] {
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn decode_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn decode_record(buf: &[u8], s: usize) -> Result<AlignedTriplet> {
    let word =
        |i: usize| u32::from_le_bytes([buf[4 * i], buf[4 * i + 1], buf[4 * i + 2], buf[4 * i + 3]]);
    let tile = TileId::new(word(0), word(1), word(2))?;
    let class_id = word(3);
    let n = s * s;
    let mut at = 16;
    let mut take = |c: usize, side: usize| {
        let len = 4 * c * side * side;
        let data = decode_floats(&buf[at..at + len]);
        at += len;
        Raster::new(c, side, side, data)
    };
    let radar = take(RADAR_CHANNELS, s)?;
    let lores = take(OPTICAL_CHANNELS, s)?;
    let hires = take(OPTICAL_CHANNELS, 2 * s)?;
    debug_assert_eq!(at as u64, 16 + 4 * (17 * n) as u64);
    Ok(AlignedTriplet {
        tile,
        class_id,
        radar,
        lores,
        hires,
    })
}

/// Metadata recorded alongside synthetic samples.
#[derive(Debug, Clone, Default)]
pub struct DatasetInfo {
    pub seed: Option<u64>,
    pub classes: Option<u32>,
    pub subset: Option<String>,
}

/// Writes `samples` into directory `dir`, creating it if needed.
///
/// `size` is used for an empty dataset; otherwise every sample must share it.
pub fn write_dataset(
    samples: &[AlignedTriplet],
    size: usize,
    info: &DatasetInfo,
    dir: &Path,
) -> Result<DatasetManifest> {
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        if s.size() != size {
            return Err(Error::contract(format!(
                "sample {i} has size {}, dataset size is {size}",
                s.size()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rs = record_size(size);
    let bin_path = dir.join(SAMPLES_FILE);
    let file = File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut w = BufWriter::new(file);
    let mut records = Vec::with_capacity(samples.len());
    let mut buf = Vec::with_capacity(rs as usize);
    for (i, s) in samples.iter().enumerate() {
        buf.clear();
        encode_record(s, &mut buf);
        w.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;
        records.push(RecordEntry {
            offset: i as u64 * rs,
            tile: s.tile,
            class_id: s.class_id,
        });
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))?;

    let manifest = DatasetManifest {
        magic: DATASET_MAGIC.into(),
        version: DATASET_VERSION,
        count: samples.len(),
        size,
        seed: info.seed,
        classes: info.classes,
        subset: info.subset.clone(),
        record_size: rs,
        records,
    };
    let man_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&man_path, json).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

/// A dataset directory whose manifest has been validated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let man_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&man_path, e.to_string()))?;
        let fail = |msg: String| Err(Error::format(&man_path, msg));
        if manifest.magic != DATASET_MAGIC {
            return fail(format!(
                "bad magic {:?}, expected {DATASET_MAGIC:?}",
                manifest.magic
            ));
        }
        if manifest.version != DATASET_VERSION {
            return fail(format!("unsupported version {}", manifest.version));
        }
        if manifest.count != manifest.records.len() {
            return fail(format!(
                "count mismatch: manifest count is {} but it lists {} records",
                manifest.count,
                manifest.records.len()
            ));
        }
        if manifest.record_size != record_size(manifest.size) {
            return fail(format!(
                "record_size {} does not match size {}",
                manifest.record_size, manifest.size
            ));
        }
        for (i, r) in manifest.records.iter().enumerate() {
            if r.offset != i as u64 * manifest.record_size {
                return fail(format!(
                    "record {i} has offset {}, expected {}",
                    r.offset,
                    i as u64 * manifest.record_size
                ));
            }
        }
        let bin_path = dir.join(SAMPLES_FILE);
        let len = fs::metadata(&bin_path)
            .map_err(|e| Error::io(&bin_path, e))?
            .len();
        let expected = manifest.count as u64 * manifest.record_size;
        if len != expected {
            let complete = len / manifest.record_size;
            let msg = if len < expected {
                format!(
                    "count mismatch: truncated at record {complete}; file has {len} bytes, manifest count {} needs {expected}",
                    manifest.count
                )
            } else {
                format!(
                    "count mismatch: file has {len} bytes, manifest count {} needs {expected}",
                    manifest.count
                )
            };
            return Err(Error::format(&bin_path, msg));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    /// Streams records in order, cross-checking each against the manifest.
    pub fn iter(&self) -> Result<impl Iterator<Item = Result<AlignedTriplet>> + '_> {
        let bin_path = self.dir.join(SAMPLES_FILE);
        let file = File::open(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut reader = BufReader::new(file);
        let size = self.manifest.size;
        let rs = self.manifest.record_size as usize;
        let mut buf = vec![0u8; rs];
        Ok(self
            .manifest
            .records
            .iter()
            .enumerate()
            .map(move |(i, entry)| {
                reader
                    .read_exact(&mut buf)
                    .map_err(|e| Error::format(&bin_path, format!("truncated record {i}: {e}")))?;
                let t = decode_record(&buf, size)
                    .map_err(|e| Error::format(&bin_path, format!("record {i}: {e}")))?;
                if t.tile != entry.tile || t.class_id != entry.class_id {
                    return Err(Error::format(
                        &bin_path,
                        format!("record {i} does not match its manifest entry"),
                    ));
                }
                Ok(t)
            }))
    }

    pub fn read_all(&self) -> Result<Vec<AlignedTriplet>> {
        self.iter()?.collect()
    }

    /// SHA-256 of `samples.bin`, hex encoded.
    pub fn samples_hash(&self) -> Result<String> {
        file_sha256(&self.dir.join(SAMPLES_FILE))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}
