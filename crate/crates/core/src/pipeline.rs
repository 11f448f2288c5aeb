//! End-to-end pruning: calibrate once on the dense model, score every block,
//! select per-block masks at a uniform ratio, cut the model, and compare
//! methods on held-out text.

use std::io::Write;

use serde::Serialize;

use crate::calib::{collect_stats, sample_calibration, ActivationStats, CalibSpec, Corpus};
use crate::error::Result;
use crate::eval::{block_recon_errors, count_macs, kl_to_dense, perplexity};
use crate::model::{Model, Token};
use crate::prune::{apply_prune, count_prunable, select_masks, PruneMask, SparsityTarget};
use crate::rng::derive_seed;
use crate::score::{score_model, ImportanceScores, PruneMethod, ScoreConfig};

/// Samples calibration windows and gathers activation statistics.
pub fn calibrate(model: &Model, corpus: &Corpus, spec: &CalibSpec) -> Result<ActivationStats> {
    spec.validate(model.config.max_positions)?;
    let batch = sample_calibration(corpus, spec)?;
    collect_stats(model, &batch)
}

#[derive(Clone, Debug)]
pub struct Pruned {
    pub method: String,
    pub ratio: f64,
    pub scores: ImportanceScores,
    pub mask: PruneMask,
    pub model: Model,
}

/// Scores, selects and applies masks for one method and ratio.
pub fn prune_with(
    model: &Model,
    stats: Option<&ActivationStats>,
    score_cfg: &ScoreConfig,
    target: SparsityTarget,
) -> Result<Pruned> {
    let scores = score_model(score_cfg, stats, model)?;
    let mask = select_masks(&scores, target);
    let pruned = apply_prune(model, &mask)?;
    Ok(Pruned {
        method: scores.method.clone(),
        ratio: target.ratio(),
        scores,
        mask,
        model: pruned,
    })
}

/// Evaluation inputs shared by every method in a comparison.
#[derive(Clone, Debug)]
pub struct EvalSet {
    /// Windows for reconstruction error and KL.
    pub batch: Vec<Vec<Token>>,
    /// Held-out text for perplexity.
    pub heldout: Corpus,
    pub seq_len: usize,
}

impl EvalSet {
    /// Draws `windows` evaluation windows from `heldout` on their own
    /// sub-stream of `seed`.
    pub fn sample(heldout: Corpus, windows: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let spec = CalibSpec {
            n_samples: windows,
            seq_len,
            seed: derive_seed(seed, "eval-windows"),
        };
        Ok(Self {
            batch: sample_calibration(&heldout, &spec)?,
            heldout,
            seq_len,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub method: String,
    pub ratio: f64,
    pub block: usize,
    pub recon_error: f64,
    pub ppl: f64,
    pub kl: f64,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub pruned: Pruned,
    pub recon_errors: Vec<f64>,
    pub ppl: f64,
    pub kl: f64,
    pub params: usize,
    pub macs: u64,
}

impl MethodResult {
    pub fn rows(&self) -> Vec<CompareRow> {
        self.recon_errors
            .iter()
            .enumerate()
            .map(|(block, &e)| CompareRow {
                method: self.pruned.method.clone(),
                ratio: self.pruned.ratio,
                block,
                recon_error: e,
                ppl: self.ppl,
                kl: self.kl,
                params: self.params,
                macs: self.macs,
            })
            .collect()
    }

    pub fn final_recon_error(&self) -> f64 {
        self.recon_errors.last().copied().unwrap_or(0.0)
    }
}

/// Prunes with one method and measures it against the dense model.
pub fn evaluate_method(
    dense: &Model,
    stats: Option<&ActivationStats>,
    score_cfg: &ScoreConfig,
    target: SparsityTarget,
    eval: &EvalSet,
) -> Result<MethodResult> {
    let pruned = prune_with(dense, stats, score_cfg, target)?;
    let recon_errors = block_recon_errors(dense, &pruned.mask, &eval.batch)?;
    let ppl = perplexity(&pruned.model, &eval.heldout, eval.seq_len)?;
    let kl = kl_to_dense(dense, &pruned.model, &eval.batch)?;
    Ok(MethodResult {
        params: count_prunable(&pruned.model).total(),
        macs: count_macs(&pruned.model, eval.seq_len).total(),
        recon_errors,
        ppl,
        kl,
        pruned,
    })
}

/// Every method at every ratio, in the given order.
pub fn compare(
    dense: &Model,
    stats: &ActivationStats,
    methods: &[PruneMethod],
    ratios: &[SparsityTarget],
    eval: &EvalSet,
) -> Result<Vec<MethodResult>> {
    let mut out = Vec::with_capacity(methods.len() * ratios.len());
    for &r in ratios {
        for &m in methods {
            out.push(evaluate_method(dense, Some(stats), &ScoreConfig::new(m), r, eval)?);
        }
    }
    Ok(out)
}

pub fn write_compare_csv(results: &[MethodResult], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for r in results {
        for row in r.rows() {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}
