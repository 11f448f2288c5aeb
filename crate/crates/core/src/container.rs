//! Single-file binary container for models, calibration statistics and
//! importance scores.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BIP1" | u32 version | u32 header_len | header (UTF-8 JSON) | payload
//! ```
//!
//! The payload is a run of tensor records, each `"BTN1" | u32 rank |
//! u64 dims[rank] | f32 data[..]`. The header's directory gives each record's
//! byte offset (from the start of the payload) and size.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{ActivationStats, BlockStats};
use crate::error::{Error, Result};
use crate::model::{BlockWeights, Model, ModelConfig};
use crate::score::{BlockScores, ImportanceScores};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"BIP1";
pub const TENSOR_MAGIC: &[u8; 4] = b"BTN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockWidths {
    pub head_width: usize,
    pub ffn_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub blocks: Vec<BlockWidths>,
    pub tensors: Vec<TensorEntry>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn matrix(m: &Matrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }

    fn vector(v: &[f32]) -> Self {
        Self {
            dims: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn record_size(&self) -> u64 {
        (8 + 8 * self.dims.len() + 4 * self.data.len()) as u64
    }
}

/// Named tensors plus the model config and free-form string metadata.
/// Tensors keep insertion order, which fixes the byte layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Tensor)>,
}

fn block_name(l: usize, what: &str) -> String {
    format!("block{l}/{what}")
}

impl Container {
    pub fn from_model(model: &Model) -> Self {
        let mut c = Self {
            config: model.config.clone(),
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        };
        for (name, m) in model.named_parameters() {
            c.tensors.push((name, Tensor::matrix(m)));
        }
        c
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inserts or replaces a tensor, keeping its original position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.require(name)?;
        match t.dims.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, t.data.clone()),
            d => Err(Error::Container(format!("tensor {name} has rank {}, expected 2", d.len()))),
        }
    }

    fn vector(&self, name: &str) -> Result<Vec<f32>> {
        let t = self.require(name)?;
        if t.dims.len() != 1 {
            return Err(Error::Container(format!("tensor {name} is not a vector")));
        }
        Ok(t.data.clone())
    }

    fn block_count(&self) -> usize {
        (0..)
            .take_while(|l| self.get(&block_name(*l, "wq")).is_some())
            .count()
    }

    pub fn to_model(&self) -> Result<Model> {
        let blocks = (0..self.block_count())
            .map(|l| {
                let wg = match self.get(&block_name(l, "wg")) {
                    Some(_) => Some(self.matrix(&block_name(l, "wg"))?),
                    None => None,
                };
                Ok(BlockWeights {
                    wq: self.matrix(&block_name(l, "wq"))?,
                    wk: self.matrix(&block_name(l, "wk"))?,
                    wv: self.matrix(&block_name(l, "wv"))?,
                    wo: self.matrix(&block_name(l, "wo"))?,
                    wu: self.matrix(&block_name(l, "wu"))?,
                    wd: self.matrix(&block_name(l, "wd"))?,
                    wg,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            config: self.config.clone(),
            embedding: self.matrix("embedding")?,
            positions: self.matrix("positions")?,
            blocks,
            lm_head: self.matrix("lm_head")?,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn set_stats(&mut self, stats: &ActivationStats) {
        for (l, b) in stats.blocks.iter().enumerate() {
            self.insert(format!("stats/block{l}/xh"), Tensor::vector(&b.mean_abs_xh));
            self.insert(format!("stats/block{l}/xu"), Tensor::vector(&b.mean_abs_xu));
        }
        self.meta
            .insert("stats.token_count".into(), stats.token_count.to_string());
    }

    pub fn stats(&self) -> Result<Option<ActivationStats>> {
        let Some(count) = self.meta.get("stats.token_count") else {
            return Ok(None);
        };
        let token_count = count
            .parse()
            .map_err(|_| Error::Container(format!("bad token count {count:?}")))?;
        let blocks = (0..self.block_count())
            .map(|l| {
                Ok(BlockStats {
                    mean_abs_xh: self.vector(&format!("stats/block{l}/xh"))?,
                    mean_abs_xu: self.vector(&format!("stats/block{l}/xu"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Some(ActivationStats {
            blocks,
            token_count,
        }))
    }

    pub fn set_scores(&mut self, scores: &ImportanceScores) {
        let m = &scores.method;
        for (l, b) in scores.blocks.iter().enumerate() {
            self.insert(format!("scores/{m}/block{l}/ffn"), Tensor::vector(&b.ffn));
            self.insert(format!("scores/{m}/block{l}/msa"), Tensor::vector(&b.msa_channels));
            self.insert(format!("scores/{m}/block{l}/heads"), Tensor::vector(&b.heads));
        }
    }

    pub fn scores(&self, method: &str) -> Result<Option<ImportanceScores>> {
        if self.get(&format!("scores/{method}/block0/ffn")).is_none() {
            return Ok(None);
        }
        let blocks = (0..self.block_count())
            .map(|l| {
                Ok(BlockScores {
                    ffn: self.vector(&format!("scores/{method}/block{l}/ffn"))?,
                    msa_channels: self.vector(&format!("scores/{method}/block{l}/msa"))?,
                    heads: self.vector(&format!("scores/{method}/block{l}/heads"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Some(ImportanceScores {
            method: method.to_string(),
            blocks,
        }))
    }

    /// Methods with stored scores, in storage order.
    pub fn score_methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.tensor_names() {
            if let Some(rest) = name.strip_prefix("scores/") {
                if let Some((m, _)) = rest.split_once('/') {
                    if !out.iter().any(|x| x == m) {
                        out.push(m.to_string());
                    }
                }
            }
        }
        out
    }

    fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let size = t.record_size();
                let e = TensorEntry {
                    name: name.clone(),
                    dims: t.dims.clone(),
                    offset,
                    size,
                };
                offset += size;
                e
            })
            .collect();
        let blocks = (0..self.block_count())
            .map(|l| BlockWidths {
                head_width: self.get(&block_name(l, "wq")).map_or(0, |t| t.dims[1]),
                ffn_width: self.get(&block_name(l, "wu")).map_or(0, |t| t.dims[1]),
            })
            .collect();
        Header {
            config: self.config.clone(),
            blocks,
            tensors,
            meta: self.meta.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Container("header too large".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            out.extend_from_slice(TENSOR_MAGIC);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Container(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let end = e
                .offset
                .checked_add(e.size)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| bad(format!("tensor {} lies outside the file", e.name)))?;
            let rec = &payload[e.offset as usize..end as usize];
            tensors.push((e.name.clone(), parse_record(rec, e)?));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_record(rec: &[u8], e: &TensorEntry) -> Result<Tensor> {
    let bad = |m: &str| Error::Container(format!("tensor {}: {m}", e.name));
    if rec.len() < 8 || &rec[..4] != TENSOR_MAGIC {
        return Err(bad("bad record magic"));
    }
    let rank = u32::from_le_bytes(rec[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8 + 8 * rank;
    if rec.len() < data_start {
        return Err(bad("truncated dims"));
    }
    let dims: Vec<usize> = rec[8..data_start]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    if dims != e.dims {
        return Err(bad("dims disagree with directory"));
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if n.and_then(|n| n.checked_mul(4)) != Some(rec.len() - data_start) {
        return Err(bad("size disagrees with dims"));
    }
    let data = rec[data_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor { dims, data })
}
