//! Reconstruction error, bound verification, exhaustive mask oracles,
//! perplexity / KL quality, and parameter / MAC accounting.

use std::io::Write;

use rayon::prelude::*;

use crate::calib::{tokenize, Corpus};
use crate::error::{Error, Result};
use crate::model::{
    block_forward, forward_masked, logits, BlockWeights, Model, ModelConfig, Token,
};
use crate::prune::{count_prunable, PruneMask};
use crate::tensor::{matmul, Matrix};

/// Mean |Δ| at every block output between the dense model and the model with
/// `mask` applied cumulatively from block 0.
pub fn block_recon_errors(
    dense: &Model,
    mask: &PruneMask,
    batch: &[Vec<Token>],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Empty("block_recon_error"));
    }
    mask.validate(dense)?;
    let masks = mask.channel_masks(dense.config.head_dim);
    let per_seq: Vec<(Vec<f64>, usize)> = batch
        .par_iter()
        .map(|seq| {
            let (_, a) = forward_masked(dense, seq, None)?;
            let (_, b) = forward_masked(dense, seq, Some(&masks))?;
            let sums = a
                .iter()
                .zip(&b)
                .map(|(x, y)| {
                    x.data()
                        .iter()
                        .zip(y.data())
                        .fold(0.0f64, |s, (&p, &q)| s + f64::from((p - q).abs()))
                })
                .collect();
            Ok((sums, seq.len() * dense.config.d))
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![0.0f64; dense.blocks.len()];
    let mut count = 0usize;
    for (sums, n) in &per_seq {
        for (t, s) in totals.iter_mut().zip(sums) {
            *t += s;
        }
        count += n;
    }
    Ok(totals.into_iter().map(|t| t / count as f64).collect())
}

pub fn block_recon_error(
    dense: &Model,
    mask: &PruneMask,
    batch: &[Vec<Token>],
    upto_block: usize,
) -> Result<f64> {
    if upto_block >= dense.blocks.len() {
        return Err(Error::IndexOutOfRange {
            what: "blocks",
            index: upto_block,
            len: dense.blocks.len(),
        });
    }
    Ok(block_recon_errors(dense, mask, batch)?[upto_block])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    /// max over entries of (LHS − RHS); ≤ 0 when the bound holds.
    pub max_violation: f64,
    /// min over entries of (RHS − LHS).
    pub min_slack: f64,
    pub lhs_max: f64,
    pub rhs_max: f64,
}

impl BoundCheck {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.max_violation <= rel_tol * self.rhs_max
    }
}

fn complement(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect()
}

/// Evaluates `|f(X) − f(X, s̄)|` against the closed-form bound, entry by
/// entry, in double precision.
///
/// The right-hand side is
///
/// ```text
/// C   Σ_j (1 − s̄^H_j) |X^H_j| · |W^O_j| (|W^U||W^D| + I)      (heads)
/// C_σ Σ_j (1 − s̄^F_j) |X''^U_j| · |W^D_j|                      (FFN)
/// ```
///
/// with `C = max(C_σ, 1)` and `X''^U` the FFN pre-activation of the
/// head-masked block. When only one mask drops anything the other sum is
/// zero and the two reduce to the single-sided bounds; with both, their sum
/// bounds the total by the triangle inequality.
pub fn verify_bound(
    w: &BlockWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    ffn_mask: &[bool],
    head_mask: &[bool],
) -> Result<BoundCheck> {
    if cfg.prenorm {
        return Err(Error::Config(
            "bound verification requires prenorm off".into(),
        ));
    }
    if w.wg.is_some() || cfg.gated {
        return Err(Error::Config(
            "bound verification covers the ungated FFN only".into(),
        ));
    }
    let w = w.cast::<f64>();
    let x = x.cast::<f64>();
    let dense = block_forward(&x, &w, cfg, None, None)?;
    let head_only = block_forward(&x, &w, cfg, Some(head_mask), None)?;
    let both = block_forward(&x, &w, cfg, Some(head_mask), Some(ffn_mask))?;

    let c_sigma = cfg.activation.lipschitz_constant();
    let c = c_sigma.max(1.0);

    // |W^O| (|W^U||W^D| + I)
    let wo = w.wo.abs();
    let mut reach = matmul(&w.wu.abs(), &w.wd.abs())?;
    for i in 0..reach.rows() {
        let v = reach.get(i, i);
        reach.set(i, i, v + 1.0);
    }
    let msa_factor = matmul(&wo, &reach)?;

    let mut dropped_h = dense.x_head_out.abs();
    dropped_h.scale_cols(&complement(head_mask));
    let mut rhs = matmul(&dropped_h, &msa_factor)?.scale(c);

    let mut dropped_u = head_only.x_ffn_hidden.abs();
    dropped_u.scale_cols(&complement(ffn_mask));
    let ffn_side = matmul(&dropped_u, &w.wd.abs())?.scale(c_sigma);
    rhs.add_assign(&ffn_side)?;

    let lhs = dense.x_out.sub(&both.x_out)?.abs();
    let mut max_violation = f64::NEG_INFINITY;
    let mut min_slack = f64::INFINITY;
    for (&l, &r) in lhs.data().iter().zip(rhs.data()) {
        max_violation = max_violation.max(l - r);
        min_slack = min_slack.min(r - l);
    }
    Ok(BoundCheck {
        max_violation,
        min_slack,
        lhs_max: lhs.max_abs(),
        rhs_max: rhs.max_abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSide {
    Ffn,
    Heads,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    pub best_mask: Vec<bool>,
    pub best_error: f64,
    /// Errors of every mask in lexicographic order of kept index sets.
    pub errors: Vec<f64>,
}

impl BruteForce {
    /// Fraction of enumerated masks with error strictly below `error`.
    pub fn quantile_of(&self, error: f64) -> f64 {
        let below = self.errors.iter().filter(|&&e| e < error).count();
        below as f64 / self.errors.len() as f64
    }

    pub fn median(&self) -> f64 {
        let mut sorted = self.errors.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        }
    }
}

pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Mean |f(X) − f(X, s̄)| over all entries for one single-sided mask.
pub fn mask_error(
    w: &BlockWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    dense_out: &Matrix,
    keep: &[bool],
    side: MaskSide,
) -> Result<f64> {
    let masked = match side {
        MaskSide::Ffn => block_forward(x, w, cfg, None, Some(keep))?,
        MaskSide::Heads => {
            let channels: Vec<bool> = keep
                .iter()
                .flat_map(|&k| std::iter::repeat_n(k, cfg.head_dim))
                .collect();
            block_forward(x, w, cfg, Some(&channels), None)?
        }
    };
    let total = dense_out
        .data()
        .iter()
        .zip(masked.x_out.data())
        .fold(0.0f64, |s, (&a, &b)| s + f64::from((a - b).abs()));
    Ok(total / dense_out.data().len() as f64)
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exhaustively evaluates every mask keeping exactly `keep` units.
pub fn brute_force_mask(
    w: &BlockWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    keep: usize,
    side: MaskSide,
) -> Result<BruteForce> {
    let n = match side {
        MaskSide::Ffn => w.ffn_width(),
        MaskSide::Heads => w.n_heads(cfg),
    };
    if keep == 0 || keep > n {
        return Err(Error::Config(format!("cannot keep {keep} of {n} units")));
    }
    let count = binomial(n, keep);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::SearchTooLarge {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let dense = block_forward(x, w, cfg, None, None)?.x_out;
    let mut idx: Vec<usize> = (0..keep).collect();
    let mut errors = Vec::with_capacity(count as usize);
    let mut best: Option<(f64, Vec<bool>)> = None;
    loop {
        let mut mask = vec![false; n];
        for &i in &idx {
            mask[i] = true;
        }
        let e = mask_error(w, cfg, x, &dense, &mask, side)?;
        errors.push(e);
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, mask));
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    let (best_error, best_mask) = best.expect("at least one mask");
    Ok(BruteForce {
        best_mask,
        best_error,
        errors,
    })
}

fn window_nll(model: &Model, inputs: &[Token], targets: &[Token]) -> Result<f64> {
    let l = logits(model, inputs)?;
    let mut total = 0.0f64;
    for (t, &target) in targets.iter().enumerate() {
        total += -log_softmax_at(l.row(t), target as usize);
    }
    Ok(total)
}

fn log_softmax_at(row: &[f32], index: usize) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let sum: f64 = row.iter().map(|&v| (f64::from(v) - max).exp()).sum();
    f64::from(row[index]) - max - sum.ln()
}

fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
    let lse = max
        + row
            .iter()
            .map(|&v| (f64::from(v) - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|&v| f64::from(v) - lse).collect()
}

/// exp(mean next-token NLL) over non-overlapping windows of `seq_len`
/// predictions; a trailing partial window is dropped.
pub fn perplexity(model: &Model, corpus: &Corpus, seq_len: usize) -> Result<f64> {
    if seq_len == 0 {
        return Err(Error::Config("perplexity seq_len must be positive".into()));
    }
    if corpus.len() < seq_len + 1 {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            required: seq_len + 1,
        });
    }
    let tokens = tokenize(corpus)?;
    let windows = (tokens.len() - 1) / seq_len;
    let nll: Vec<f64> = (0..windows)
        .into_par_iter()
        .map(|k| {
            let s = k * seq_len;
            window_nll(
                model,
                &tokens[s..s + seq_len],
                &tokens[s + 1..s + seq_len + 1],
            )
        })
        .collect::<Result<_>>()?;
    let total: f64 = nll.iter().sum();
    Ok((total / (windows * seq_len) as f64).exp())
}

/// Mean over tokens of KL(dense ‖ pruned) between next-token distributions.
pub fn kl_to_dense(dense: &Model, pruned: &Model, batch: &[Vec<Token>]) -> Result<f64> {
    if dense.config.vocab != pruned.config.vocab {
        return Err(Error::ShapeMismatch {
            op: "kl_to_dense",
            left: (dense.config.vocab, 1),
            right: (pruned.config.vocab, 1),
        });
    }
    if batch.is_empty() {
        return Err(Error::Empty("kl_to_dense"));
    }
    let per_seq: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|seq| {
            let p = logits(dense, seq)?;
            let q = logits(pruned, seq)?;
            let mut total = 0.0f64;
            for t in 0..seq.len() {
                let lp = log_softmax(p.row(t));
                let lq = log_softmax(q.row(t));
                total += lp
                    .iter()
                    .zip(&lq)
                    .map(|(&a, &b)| a.exp() * (a - b))
                    .sum::<f64>();
            }
            Ok((total, seq.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per_seq
        .iter()
        .fold((0.0, 0usize), |(s, c), (t, k)| (s + t, c + k));
    Ok(sum / n as f64)
}

/// MAC counts for a forward over `seq_len` tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts {
    /// Q/K/V/O projections plus attention score and value products.
    pub attention: u64,
    pub ffn: u64,
    pub lm_head: u64,
}

impl MacCounts {
    pub fn prunable(&self) -> u64 {
        self.attention + self.ffn
    }

    pub fn total(&self) -> u64 {
        self.prunable() + self.lm_head
    }
}

/// Every linear map costs `T · in · out`; attention adds `T² · N^H` for the
/// scores and again for the value mix (no causal halving).
pub fn count_macs(model: &Model, seq_len: usize) -> MacCounts {
    let t = seq_len as u64;
    let d = model.config.d as u64;
    let mut out = MacCounts::default();
    for b in &model.blocks {
        let h = b.head_width() as u64;
        let f = b.ffn_width() as u64;
        out.attention += 4 * t * d * h + 2 * t * t * h;
        let sides = if b.wg.is_some() { 3 } else { 2 };
        out.ffn += sides * t * d * f;
    }
    out.lm_head = t * d * model.config.vocab as u64;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub ratio: f64,
    pub recon_errors: Vec<f64>,
    /// Per-block minimum bound slack; absent for prenorm models.
    pub bound_slack_min: Option<Vec<f64>>,
    pub perplexity_dense: f64,
    pub perplexity_pruned: f64,
    pub kl_mean: f64,
    pub params_dense: usize,
    pub params_pruned: usize,
    pub macs_dense: u64,
    pub macs_pruned: u64,
}

pub struct EvalInputs<'a> {
    pub dense: &'a Model,
    pub pruned: &'a Model,
    pub mask: &'a PruneMask,
    pub batch: &'a [Vec<Token>],
    pub heldout: &'a Corpus,
    pub seq_len: usize,
}

/// Full report for one pruned model against its dense parent.
pub fn evaluate(method: &str, ratio: f64, inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let recon_errors = block_recon_errors(inputs.dense, inputs.mask, inputs.batch)?;
    let bound_slack_min = if inputs.dense.config.prenorm || inputs.dense.config.gated {
        None
    } else {
        Some(bound_slacks(inputs.dense, inputs.mask, &inputs.batch[0])?)
    };
    Ok(EvalReport {
        method: method.to_string(),
        ratio,
        recon_errors,
        bound_slack_min,
        perplexity_dense: perplexity(inputs.dense, inputs.heldout, inputs.seq_len)?,
        perplexity_pruned: perplexity(inputs.pruned, inputs.heldout, inputs.seq_len)?,
        kl_mean: kl_to_dense(inputs.dense, inputs.pruned, inputs.batch)?,
        params_dense: count_prunable(inputs.dense).total(),
        params_pruned: count_prunable(inputs.pruned).total(),
        macs_dense: count_macs(inputs.dense, inputs.seq_len).total(),
        macs_pruned: count_macs(inputs.pruned, inputs.seq_len).total(),
    })
}

/// Minimum slack of the bound at each block, with that block's dense input.
fn bound_slacks(dense: &Model, mask: &PruneMask, seq: &[Token]) -> Result<Vec<f64>> {
    let (_, traces) = crate::model::model_forward(dense, seq)?;
    dense
        .blocks
        .iter()
        .zip(&traces)
        .zip(&mask.blocks)
        .map(|((w, tr), m)| {
            let check = verify_bound(
                w,
                &dense.config,
                &tr.x_in,
                &m.keep_ffn,
                &m.head_channels(dense.config.head_dim),
            )?;
            Ok(check.min_slack)
        })
        .collect()
}

impl EvalReport {
    /// `key = value` lines.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "method = {}", self.method)?;
        writeln!(out, "ratio = {}", self.ratio)?;
        for (l, e) in self.recon_errors.iter().enumerate() {
            writeln!(out, "block{l}.recon_error = {e}")?;
        }
        if let Some(s) = &self.bound_slack_min {
            for (l, v) in s.iter().enumerate() {
                writeln!(out, "block{l}.bound_slack_min = {v}")?;
            }
        }
        writeln!(out, "perplexity_dense = {}", self.perplexity_dense)?;
        writeln!(out, "perplexity_pruned = {}", self.perplexity_pruned)?;
        writeln!(out, "kl_mean = {}", self.kl_mean)?;
        writeln!(out, "params_dense = {}", self.params_dense)?;
        writeln!(out, "params_pruned = {}", self.params_pruned)?;
        writeln!(out, "macs_dense = {}", self.macs_dense)?;
        writeln!(out, "macs_pruned = {}", self.macs_pruned)?;
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 12] = [
        "method",
        "ratio",
        "block",
        "recon_error",
        "bound_slack_min",
        "ppl_dense",
        "ppl_pruned",
        "kl",
        "params_dense",
        "params_pruned",
        "macs_dense",
        "macs_pruned",
    ];

    /// One CSV record per block.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        self.recon_errors
            .iter()
            .enumerate()
            .map(|(l, e)| {
                let slack = self
                    .bound_slack_min
                    .as_ref()
                    .map_or_else(|| "na".to_string(), |s| s[l].to_string());
                vec![
                    self.method.clone(),
                    self.ratio.to_string(),
                    l.to_string(),
                    e.to_string(),
                    slack,
                    self.perplexity_dense.to_string(),
                    self.perplexity_pruned.to_string(),
                    self.kl_mean.to_string(),
                    self.params_dense.to_string(),
                    self.params_pruned.to_string(),
                    self.macs_dense.to_string(),
                    self.macs_pruned.to_string(),
                ]
            })
            .collect()
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "method {:<10} ratio {:<5} ppl {:>9.4} -> {:>9.4}  kl {:.6}\n",
            self.method, self.ratio, self.perplexity_dense, self.perplexity_pruned, self.kl_mean
        );
        s.push_str(&format!(
            "params {} -> {}   macs {} -> {}\n",
            self.params_dense, self.params_pruned, self.macs_dense, self.macs_pruned
        ));
        s.push_str("block  recon_error   bound_slack_min\n");
        for (l, e) in self.recon_errors.iter().enumerate() {
            let slack = self
                .bound_slack_min
                .as_ref()
                .map_or_else(|| "na".to_string(), |v| format!("{:.6e}", v[l]));
            s.push_str(&format!("{l:>5}  {e:<12.6e}  {slack}\n"));
        }
        s
    }
}
