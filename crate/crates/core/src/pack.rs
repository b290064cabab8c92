//! Feature-pack container holding labeled instance embeddings.
//!
//! Layout on disk:
//!
//! ```text
//! "FPK1"                          4 bytes magic
//! header_len                      u32, little endian
//! header                          header_len bytes of UTF-8 JSON
//! payload                         record_count * dim f32, little endian, row-major
//! ```
//!
//! The header holds `dataset_id`, `dim`, `class_names`, `record_count`,
//! `records` (`role`, optional `class_index`, `image_id`, optional `box`) and
//! an optional `no_background` flag.
//!
//! Embeddings keep their raw `f32` values so that a saved pack is bit-identical
//! to the file it was loaded from. A widened, L2-normalized `f64` copy is what
//! the rest of the crate consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::Rect;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Object(usize),
    Background,
}

impl Role {
    pub fn class_index(&self) -> Option<usize> {
        match self {
            Role::Object(c) => Some(*c),
            Role::Background => None,
        }
    }

    pub fn is_background(&self) -> bool {
        matches!(self, Role::Background)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub role: Role,
    pub image_id: String,
    pub bbox: Option<Rect>,
    raw: Vec<f32>,
    embedding: Vec<f64>,
}

impl FeatureRecord {
    /// Builds a record from raw (unnormalized) values. Validation and
    /// normalization happen when the record joins a [`FeaturePack`].
    pub fn new(role: Role, image_id: impl Into<String>, bbox: Option<Rect>, raw: Vec<f32>) -> Self {
        Self {
            role,
            image_id: image_id.into(),
            bbox,
            raw,
            embedding: Vec::new(),
        }
    }

    /// Unit-norm embedding.
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    /// Values exactly as stored in the file.
    pub fn raw(&self) -> &[f32] {
        &self.raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub dataset_id: String,
    pub dim: usize,
    pub class_names: Vec<String>,
    pub records: Vec<FeatureRecord>,
    pub no_background: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RoleTag {
    Object,
    Background,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    role: RoleTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_index: Option<usize>,
    image_id: String,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    bbox: Option<Rect>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PackHeader {
    dataset_id: String,
    dim: usize,
    class_names: Vec<String>,
    record_count: usize,
    records: Vec<RecordHeader>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    no_background: bool,
}

impl FeaturePack {
    /// Validates records and computes their normalized embeddings.
    pub fn new(
        dataset_id: impl Into<String>,
        dim: usize,
        class_names: Vec<String>,
        mut records: Vec<FeatureRecord>,
        no_background: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation(None, "dim must be positive"));
        }
        let n_classes = class_names.len();
        for (row, rec) in records.iter_mut().enumerate() {
            if rec.raw.len() != dim {
                return Err(Error::validation(
                    Some(row),
                    format!("embedding has {} values, expected {dim}", rec.raw.len()),
                ));
            }
            if let Role::Object(c) = rec.role {
                if c >= n_classes {
                    return Err(Error::validation(
                        Some(row),
                        format!("class index {c} outside [0, {n_classes})"),
                    ));
                }
            }
            if let Some(b) = rec.bbox {
                if !b.is_valid() {
                    return Err(Error::validation(Some(row), format!("invalid box {b:?}")));
                }
            }
            if rec.raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(Some(row), "non-finite embedding value"));
            }
            let widened: Vec<f64> = rec.raw.iter().map(|&v| f64::from(v)).collect();
            let norm = widened.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::validation(
                    Some(row),
                    "embedding cannot be L2-normalized",
                ));
            }
            rec.embedding = widened.into_iter().map(|v| v / norm).collect();
        }
        let has_background = records.iter().any(|r| r.role.is_background());
        if !has_background && !no_background {
            return Err(Error::validation(
                None,
                "pack has no background records and is not flagged no_background",
            ));
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            dim,
            class_names,
            records,
            no_background,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn object_count(&self) -> usize {
        self.records.iter().filter(|r| !r.role.is_background()).count()
    }

    pub fn background_ids(&self) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.role.is_background())
            .map(|(i, _)| i)
            .collect()
    }

    /// Record ids of class `class`, in file order.
    pub fn class_ids(&self, class: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.role == Role::Object(class))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn read_from(mut reader: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("file shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"FPK1\"")));
        }
        let mut len = [0u8; 4];
        reader
            .read_exact(&mut len)
            .map_err(|_| Error::Format("missing header length".into()))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        reader
            .read_exact(&mut header)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header: PackHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
        if header.record_count != header.records.len() {
            return Err(Error::Format(format!(
                "record_count {} but {} record entries",
                header.record_count,
                header.records.len()
            )));
        }
        if header.dim == 0 {
            return Err(Error::validation(None, "dim must be positive"));
        }

        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        let dim = header.dim;
        let expected = header.record_count * dim * 4;
        if payload.len() != expected {
            let floats = payload.len() / 4;
            let row = (floats / dim).min(header.record_count);
            return Err(Error::validation(
                Some(row),
                format!(
                    "payload holds {} bytes, expected {expected} ({} rows x {dim} f32)",
                    payload.len(),
                    header.record_count
                ),
            ));
        }

        let mut records = Vec::with_capacity(header.record_count);
        for (row, (rh, chunk)) in header
            .records
            .into_iter()
            .zip(payload.chunks_exact(dim * 4))
            .enumerate()
        {
            let role = match (rh.role, rh.class_index) {
                (RoleTag::Object, Some(c)) => Role::Object(c),
                (RoleTag::Object, None) => {
                    return Err(Error::validation(Some(row), "object record without class_index"))
                }
                (RoleTag::Background, None) => Role::Background,
                (RoleTag::Background, Some(_)) => {
                    return Err(Error::validation(Some(row), "background record with class_index"))
                }
            };
            let raw = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            records.push(FeatureRecord::new(role, rh.image_id, rh.bbox, raw));
        }
        Self::new(
            header.dataset_id,
            dim,
            header.class_names,
            records,
            header.no_background,
        )
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<()> {
        let header = PackHeader {
            dataset_id: self.dataset_id.clone(),
            dim: self.dim,
            class_names: self.class_names.clone(),
            record_count: self.records.len(),
            records: self
                .records
                .iter()
                .map(|r| RecordHeader {
                    role: match r.role {
                        Role::Object(_) => RoleTag::Object,
                        Role::Background => RoleTag::Background,
                    },
                    class_index: r.role.class_index(),
                    image_id: r.image_id.clone(),
                    bbox: r.bbox,
                })
                .collect(),
            no_background: self.no_background,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;
        writer.write_all(MAGIC)?;
        writer.write_all(&len.to_le_bytes())?;
        writer.write_all(&json)?;
        for rec in &self.records {
            for v in &rec.raw {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

/// Reads and validates a feature pack from disk.
pub fn load_feature_pack(path: impl AsRef<Path>) -> Result<FeaturePack> {
    FeaturePack::read_from(BufReader::new(File::open(path)?))
}

/// Summary printed by `pack validate`.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub dataset_id: String,
    pub dim: usize,
    pub classes: usize,
    pub object_records: usize,
    pub background_records: usize,
    pub images: usize,
    pub per_class: Vec<(String, usize)>,
    pub no_background: bool,
}

impl ValidationReport {
    pub fn new(pack: &FeaturePack) -> Self {
        let images: std::collections::BTreeSet<&str> =
            pack.records.iter().map(|r| r.image_id.as_str()).collect();
        Self {
            dataset_id: pack.dataset_id.clone(),
            dim: pack.dim,
            classes: pack.n_classes(),
            object_records: pack.object_count(),
            background_records: pack.records.len() - pack.object_count(),
            images: images.len(),
            per_class: pack
                .class_names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), pack.class_ids(i).len()))
                .collect(),
            no_background: pack.no_background,
        }
    }
}
