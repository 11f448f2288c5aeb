//! Mask selection under a uniform per-block sparsity ratio, and structural
//! surgery that removes whole heads and FFN channels with their dependency
//! groups.

use crate::error::{Error, Result};
use crate::model::{BlockWeights, ChannelMask, Model};
use crate::score::{ranking, ImportanceScores};

/// Fraction `r ∈ [0, 1)` of prunable units removed from every block.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct SparsityTarget(f64);

impl SparsityTarget {
    pub fn new(r: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!(
                "sparsity ratio {r} is outside [0, 1)"
            )));
        }
        Ok(Self(r))
    }

    pub fn ratio(self) -> f64 {
        self.0
    }

    /// `max(1, round_half_up((1 − r) · total))`.
    pub fn kept(self, total: usize) -> usize {
        let exact = (1.0 - self.0) * total as f64;
        // the nudge keeps exact halves such as 2.5 from landing on 2.4999…
        let rounded = (exact + 0.5 + 1e-9).floor() as usize;
        rounded.clamp(1, total.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    pub keep_heads: Vec<bool>,
    pub keep_ffn: Vec<bool>,
}

impl BlockMask {
    pub fn all_kept(heads: usize, ffn: usize) -> Self {
        Self {
            keep_heads: vec![true; heads],
            keep_ffn: vec![true; ffn],
        }
    }

    /// Head mask expanded to one entry per `X^H` channel.
    pub fn head_channels(&self, head_dim: usize) -> Vec<bool> {
        self.keep_heads
            .iter()
            .flat_map(|&k| std::iter::repeat_n(k, head_dim))
            .collect()
    }

    pub fn to_channel_mask(&self, head_dim: usize) -> ChannelMask {
        ChannelMask {
            heads: Some(self.head_channels(head_dim)),
            ffn: Some(self.keep_ffn.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub blocks: Vec<BlockMask>,
}

impl PruneMask {
    pub fn all_kept(model: &Model) -> Self {
        Self {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockMask::all_kept(b.n_heads(&model.config), b.ffn_width()))
                .collect(),
        }
    }

    pub fn channel_masks(&self, head_dim: usize) -> Vec<ChannelMask> {
        self.blocks
            .iter()
            .map(|b| b.to_channel_mask(head_dim))
            .collect()
    }

    /// Checks lengths against `model` and that every block keeps something.
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.blocks.len() != model.blocks.len() {
            return Err(Error::InvalidMask(format!(
                "{} block masks for {} blocks",
                self.blocks.len(),
                model.blocks.len()
            )));
        }
        for (l, (m, w)) in self.blocks.iter().zip(&model.blocks).enumerate() {
            let heads = w.n_heads(&model.config);
            if m.keep_heads.len() != heads || m.keep_ffn.len() != w.ffn_width() {
                return Err(Error::InvalidMask(format!(
                    "block {l}: mask sizes ({}, {}) do not match ({heads}, {})",
                    m.keep_heads.len(),
                    m.keep_ffn.len(),
                    w.ffn_width()
                )));
            }
            if !m.keep_heads.iter().any(|&k| k) || !m.keep_ffn.iter().any(|&k| k) {
                return Err(Error::InvalidMask(format!(
                    "block {l} must keep at least one head and one FFN channel"
                )));
            }
        }
        Ok(())
    }
}

fn top_k(scores: &[f32], k: usize) -> Vec<bool> {
    let mut keep = vec![false; scores.len()];
    for &i in ranking(scores).iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Keeps the top-scoring heads and FFN channels of every block; ties go to
/// the lower index.
pub fn select_masks(scores: &ImportanceScores, target: SparsityTarget) -> PruneMask {
    PruneMask {
        blocks: scores
            .blocks
            .iter()
            .map(|b| BlockMask {
                keep_heads: top_k(&b.heads, target.kept(b.heads.len())),
                keep_ffn: top_k(&b.ffn, target.kept(b.ffn.len())),
            })
            .collect(),
    }
}

fn kept_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

fn prune_block(w: &BlockWeights, mask: &BlockMask, head_dim: usize) -> BlockWeights {
    let channels = kept_indices(&mask.head_channels(head_dim));
    let ffn = kept_indices(&mask.keep_ffn);
    BlockWeights {
        wq: w.wq.select_cols(&channels),
        wk: w.wk.select_cols(&channels),
        wv: w.wv.select_cols(&channels),
        wo: w.wo.select_rows(&channels),
        wu: w.wu.select_cols(&ffn),
        wd: w.wd.select_rows(&ffn),
        wg: w.wg.as_ref().map(|g| g.select_cols(&ffn)),
    }
}

/// Returns a compacted copy of `model` with masked heads and channels
/// removed. Embedding, positions and LM head are untouched.
pub fn apply_prune(model: &Model, mask: &PruneMask) -> Result<Model> {
    mask.validate(model)?;
    let hd = model.config.head_dim;
    Ok(Model {
        config: model.config.clone(),
        embedding: model.embedding.clone(),
        positions: model.positions.clone(),
        blocks: model
            .blocks
            .iter()
            .zip(&mask.blocks)
            .map(|(w, m)| prune_block(w, m, hd))
            .collect(),
        lm_head: model.lm_head.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub head_params: usize,
    pub ffn_params: usize,
    pub other_params: usize,
}

impl ParamCounts {
    pub fn prunable(&self) -> usize {
        self.head_params + self.ffn_params
    }

    pub fn total(&self) -> usize {
        self.prunable() + self.other_params
    }
}

/// Parameter counts split into head groups, FFN groups and the rest.
pub fn count_prunable(model: &Model) -> ParamCounts {
    let d = model.config.d;
    let mut head_params = 0;
    let mut ffn_params = 0;
    for b in &model.blocks {
        head_params += 4 * d * b.head_width();
        let sides = if b.wg.is_some() { 3 } else { 2 };
        ffn_params += sides * d * b.ffn_width();
    }
    let other_params = model.embedding.rows() * model.embedding.cols()
        + model.positions.rows() * model.positions.cols()
        + model.lm_head.rows() * model.lm_head.cols();
    ParamCounts {
        head_params,
        ffn_params,
        other_params,
    }
}
