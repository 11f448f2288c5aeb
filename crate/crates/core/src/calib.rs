//! Calibration corpus handling and the single forward pass that gathers the
//! per-channel activation statistics used by the scorers.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{model_forward, Model, Token};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, bytes: Vec<u8>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        Ok(Self {
            name: name.into(),
            bytes,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::new(path.display().to_string(), bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Splits at `fraction` of the length into (head, tail).
    pub fn split(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, self.len().saturating_sub(1).max(1));
        Ok((
            Corpus::new(
                format!("{}[..{cut}]", self.name),
                self.bytes[..cut].to_vec(),
            )?,
            Corpus::new(
                format!("{}[{cut}..]", self.name),
                self.bytes[cut..].to_vec(),
            )?,
        ))
    }
}

/// Byte-level tokenisation: each byte is its own token.
pub fn tokenize(corpus: &Corpus) -> Result<Vec<Token>> {
    if corpus.bytes.is_empty() {
        return Err(Error::Empty("tokenize"));
    }
    Ok(corpus.bytes.iter().map(|&b| Token::from(b)).collect())
}

pub fn detokenize(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalibSpec {
    pub n_samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CalibSpec {
    fn default() -> Self {
        Self {
            n_samples: 128,
            seq_len: 128,
            seed: 0,
        }
    }
}

impl CalibSpec {
    pub fn validate(&self, max_positions: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config(
                "calibration needs at least one sample".into(),
            ));
        }
        if self.seq_len < 2 || self.seq_len > max_positions {
            return Err(Error::Config(format!(
                "calibration seq_len {} outside [2, {max_positions}]",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Draws `n_samples` contiguous windows at uniformly random offsets.
pub fn sample_calibration(corpus: &Corpus, spec: &CalibSpec) -> Result<Vec<Vec<Token>>> {
    if spec.n_samples == 0 || spec.seq_len == 0 {
        return Err(Error::Config(
            "calibration needs n_samples ≥ 1 and seq_len ≥ 1".into(),
        ));
    }
    if corpus.len() < spec.seq_len {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            required: spec.seq_len,
        });
    }
    let tokens = tokenize(corpus)?;
    let max_start = corpus.len() - spec.seq_len;
    let mut r = rng::stream(spec.seed, "calibration");
    Ok((0..spec.n_samples)
        .map(|_| {
            let start = r.gen_range(0..=max_start);
            tokens[start..start + spec.seq_len].to_vec()
        })
        .collect())
}

/// Mean absolute activations of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStats {
    /// Mean |X^H| per head-output channel.
    pub mean_abs_xh: Vec<f32>,
    /// Mean |X^U| per FFN hidden channel (pre-activation).
    pub mean_abs_xu: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub blocks: Vec<BlockStats>,
    pub token_count: usize,
}

impl ActivationStats {
    /// Multiplies every statistic by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockStats {
                    mean_abs_xh: b.mean_abs_xh.iter().map(|v| v * factor).collect(),
                    mean_abs_xu: b.mean_abs_xu.iter().map(|v| v * factor).collect(),
                })
                .collect(),
            token_count: self.token_count,
        }
    }

    pub fn block(&self, l: usize) -> Result<&BlockStats> {
        self.blocks.get(l).ok_or(Error::IndexOutOfRange {
            what: "activation stats",
            index: l,
            len: self.blocks.len(),
        })
    }
}

type BlockSums = Vec<(Vec<f64>, Vec<f64>)>;

fn sequence_sums(model: &Model, seq: &[Token]) -> Result<BlockSums> {
    let (_, traces) = model_forward(model, seq)?;
    Ok(traces
        .iter()
        .map(|t| {
            let mut xh = vec![0.0f64; t.x_head_out.cols()];
            let mut xu = vec![0.0f64; t.x_ffn_hidden.cols()];
            for i in 0..t.x_head_out.rows() {
                for (a, &v) in xh.iter_mut().zip(t.x_head_out.row(i)) {
                    *a += f64::from(v.abs());
                }
                for (a, &v) in xu.iter_mut().zip(t.x_ffn_hidden.row(i)) {
                    *a += f64::from(v.abs());
                }
            }
            (xh, xu)
        })
        .collect())
}

/// Runs the model over every sequence and averages |X^H| and |X^U| per
/// channel over all tokens. Per-sequence sums are reduced in sequence order.
pub fn collect_stats(model: &Model, batches: &[Vec<Token>]) -> Result<ActivationStats> {
    if batches.is_empty() {
        return Err(Error::Empty("collect_stats"));
    }
    let per_seq: Vec<BlockSums> = batches
        .par_iter()
        .map(|s| sequence_sums(model, s))
        .collect::<Result<_>>()?;
    let token_count: usize = batches.iter().map(Vec::len).sum();
    let mut totals = per_seq[0].clone();
    for seq in &per_seq[1..] {
        for ((txh, txu), (sxh, sxu)) in totals.iter_mut().zip(seq) {
            for (a, b) in txh.iter_mut().zip(sxh) {
                *a += b;
            }
            for (a, b) in txu.iter_mut().zip(sxu) {
                *a += b;
            }
        }
    }
    let n = token_count as f64;
    Ok(ActivationStats {
        blocks: totals
            .into_iter()
            .map(|(xh, xu)| BlockStats {
                mean_abs_xh: xh.into_iter().map(|s| (s / n) as f32).collect(),
                mean_abs_xu: xu.into_iter().map(|s| (s / n) as f32).collect(),
            })
            .collect(),
        token_count,
    })
}
