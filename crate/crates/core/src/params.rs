//! Trainable state of the adaptation head and its checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! "CKP1"              4 bytes magic
//! meta_len            u32, little endian
//! meta                meta_len bytes of UTF-8 JSON (see [`CheckpointMeta`])
//! payload             for each entry of meta.params in order: rows * cols f64, little endian
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{LearnableInstances, ReweightParams};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::prompter::DomainVectors;
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

/// Trainable module groups that finetuning can enable independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Module {
    /// Classification projection and box regressor.
    FtHeads,
    /// Learnable instance features.
    Lif,
    /// Instance reweighting.
    Ir,
    /// Domain prompter.
    Dp,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::FtHeads, Module::Lif, Module::Ir, Module::Dp];

    pub fn name(&self) -> &'static str {
        match self {
            Module::FtHeads => "ft-heads",
            Module::Lif => "lif",
            Module::Ir => "ir",
            Module::Dp => "dp",
        }
    }
}

impl std::str::FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown module {s:?}")))
    }
}

/// Row layout of the learnable instance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceLayout {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_bg: usize,
    pub dim: usize,
}

impl InstanceLayout {
    pub fn object_rows(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn total_rows(&self) -> usize {
        self.object_rows() + self.n_bg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationParams {
    pub class_names: Vec<String>,
    pub instances: LearnableInstances,
    pub reweight: ReweightParams,
    pub ir_enabled: bool,
    pub domains: DomainVectors,
    pub head: HeadParams,
}

/// Tape handles for every named parameter.
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub instances: Var,
    pub mlp_w: Var,
    pub mlp_b: Var,
    pub fuse_w: Var,
    pub fuse_b: Var,
    pub domains: Var,
    pub projection: Var,
    pub box_w: Var,
    pub box_b: Var,
}

impl ParamVars {
    pub fn as_array(&self) -> [Var; 9] {
        [
            self.instances,
            self.mlp_w,
            self.mlp_b,
            self.fuse_w,
            self.fuse_b,
            self.domains,
            self.projection,
            self.box_w,
            self.box_b,
        ]
    }

    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            instances: vars[0],
            mlp_w: vars[1],
            mlp_b: vars[2],
            fuse_w: vars[3],
            fuse_b: vars[4],
            domains: vars[5],
            projection: vars[6],
            box_w: vars[7],
            box_b: vars[8],
        }
    }
}

/// Parameter names in checkpoint order, with their owning module.
pub const PARAM_NAMES: [(&str, Module); 9] = [
    ("instances", Module::Lif),
    ("reweight.mlp_w", Module::Ir),
    ("reweight.mlp_b", Module::Ir),
    ("reweight.fuse_w", Module::Ir),
    ("reweight.fuse_b", Module::Ir),
    ("domains", Module::Dp),
    ("head.projection", Module::FtHeads),
    ("head.box_w", Module::FtHeads),
    ("head.box_b", Module::FtHeads),
];

pub(crate) fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

impl AdaptationParams {
    pub fn layout(&self) -> InstanceLayout {
        self.instances.layout
    }

    pub fn n_way(&self) -> usize {
        self.instances.layout.n_way
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.instances.matrix,
            &self.reweight.mlp_w,
            &self.reweight.mlp_b,
            &self.reweight.fuse_w,
            &self.reweight.fuse_b,
            &self.domains.matrix,
            &self.head.projection,
            &self.head.box_w,
            &self.head.box_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.instances.matrix,
            &mut self.reweight.mlp_w,
            &mut self.reweight.mlp_b,
            &mut self.reweight.fuse_w,
            &mut self.reweight.fuse_b,
            &mut self.domains.matrix,
            &mut self.head.projection,
            &mut self.head.box_w,
            &mut self.head.box_b,
        ]
    }

    /// Registers every parameter on `tape`; only tensors of `trainable` modules get gradients.
    pub fn register(&self, tape: &Tape, trainable: &BTreeSet<Module>) -> Result<ParamVars> {
        let vars = self
            .tensors()
            .iter()
            .zip(PARAM_NAMES)
            .map(|(t, (_, module))| tape.leaf((*t).clone(), trainable.contains(&module)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamVars::from_slice(&vars))
    }

    /// FNV-1a checksum of each module group's parameter bits.
    pub fn group_checksums(&self) -> Vec<(Module, u64)> {
        Module::ALL
            .iter()
            .map(|&m| {
                let bytes = self
                    .tensors()
                    .into_iter()
                    .zip(PARAM_NAMES)
                    .filter(|(_, (_, owner))| *owner == m)
                    .flat_map(|(t, _)| t.data().iter().flat_map(|v| v.to_bits().to_le_bytes()).collect::<Vec<_>>());
                (m, rng::fnv1a(bytes))
            })
            .collect()
    }

    pub fn write_checkpoint(&self, mut writer: impl Write) -> Result<()> {
        let meta = CheckpointMeta {
            format: "protoadapt-checkpoint".into(),
            version: 1,
            layout: self.layout(),
            class_names: self.class_names.clone(),
            alpha: self.reweight.alpha,
            ir_enabled: self.ir_enabled,
            cls_temperature: self.head.cls_temperature,
            top_k: self.head.top_k,
            params: self
                .tensors()
                .iter()
                .zip(PARAM_NAMES)
                .map(|(t, (name, _))| ParamEntry {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata too large".into()))?;
        writer.write_all(CHECKPOINT_MAGIC)?;
        writer.write_all(&len.to_le_bytes())?;
        writer.write_all(&json)?;
        for t in self.tensors() {
            for v in t.data() {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_checkpoint(&mut out)?;
        Ok(out)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn read_checkpoint(mut reader: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        reader
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint shorter than magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        reader.read_exact(&mut len)?;
        let mut meta = vec![0u8; u32::from_le_bytes(len) as usize];
        reader
            .read_exact(&mut meta)
            .map_err(|_| Error::Format("truncated checkpoint metadata".into()))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta).map_err(|e| Error::Format(format!("malformed checkpoint metadata: {e}")))?;
        if meta.params.len() != PARAM_NAMES.len()
            || meta.params.iter().zip(PARAM_NAMES).any(|(p, (name, _))| p.name != name)
        {
            return Err(Error::Format("unexpected parameter list in checkpoint".into()));
        }
        let mut tensors = Vec::with_capacity(meta.params.len());
        for entry in &meta.params {
            let mut buf = vec![0u8; entry.rows * entry.cols * 8];
            reader
                .read_exact(&mut buf)
                .map_err(|_| Error::Format(format!("truncated payload for {}", entry.name)))?;
            let data = buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(entry.rows, entry.cols, data)?);
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("nine tensors");
        let instances = LearnableInstances {
            matrix: next(),
            layout: meta.layout,
        };
        let reweight = ReweightParams {
            mlp_w: next(),
            mlp_b: next(),
            fuse_w: next(),
            fuse_b: next(),
            alpha: meta.alpha,
        };
        let domains = DomainVectors { matrix: next() };
        let head = HeadParams {
            projection: next(),
            box_w: next(),
            box_b: next(),
            cls_temperature: meta.cls_temperature,
            top_k: meta.top_k,
        };
        Ok(Self {
            class_names: meta.class_names,
            instances,
            reweight,
            ir_enabled: meta.ir_enabled,
            domains,
            head,
        })
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_checkpoint(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub layout: InstanceLayout,
    pub class_names: Vec<String>,
    pub alpha: f64,
    pub ir_enabled: bool,
    pub cls_temperature: f64,
    pub top_k: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}
