//! Seeded trial loops over random blocks: bound soundness and closeness of
//! score-selected FFN masks to the exhaustive optimum.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::calib::{ActivationStats, BlockStats};
use crate::error::Result;
use crate::eval::{brute_force_mask, mask_error, verify_bound, MaskSide};
use crate::model::{block_forward, check_tokens, embed, BlockWeights, Model, ModelConfig, Token};
use crate::prune::SparsityTarget;
use crate::rng::{derive_seed, normal_matrix, stream};
use crate::score::{ranking, score_ffn_channels};
use crate::tensor::{abs_col_mean, ActivationKind};

/// Keep-mask over `n` units keeping exactly `target.kept(n)`, chosen
/// uniformly at random.
pub fn random_keep_mask(n: usize, target: SparsityTarget, r: &mut impl rand::Rng) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(r);
    let mut mask = vec![false; n];
    for &i in &idx[..target.kept(n)] {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrialSpec {
    pub activation: ActivationKind,
    pub trials: usize,
    pub seed: u64,
    pub d: usize,
    pub n_heads: usize,
    pub ffn: usize,
    pub tokens: usize,
    pub weight_std: f64,
    pub ratios: Vec<f64>,
    pub rel_tol: f64,
}

impl BoundTrialSpec {
    pub fn new(activation: ActivationKind, trials: usize, seed: u64) -> Self {
        Self {
            activation,
            trials,
            seed,
            d: 16,
            n_heads: 4,
            ffn: 32,
            tokens: 8,
            weight_std: 0.5,
            ratios: vec![0.25, 0.5],
            rel_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrialReport {
    pub trials: usize,
    /// Trials whose violation exceeded `rel_tol × max RHS`.
    pub failures: usize,
    /// Largest `max(LHS − RHS) / max(RHS)` over trials with nonzero RHS.
    pub worst_relative_violation: f64,
    pub min_slack: f64,
}

impl BoundTrialReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random (weights, input, mask) triples; trial `i` uses ratio
/// `ratios[i % len]` and masks the FFN, the heads, or both in turn.
pub fn bound_trials(spec: &BoundTrialSpec) -> Result<BoundTrialReport> {
    let cfg = ModelConfig::new(spec.d, spec.n_heads, spec.ffn, 1, spec.activation)?;
    let checks: Vec<_> = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let mut r = stream(derive_seed(spec.seed, "bound-trials"), &i.to_string());
            let w = BlockWeights::<f32>::random(&cfg, spec.weight_std, &mut r);
            let x = normal_matrix(spec.tokens, spec.d, 1.0, &mut r);
            let target = SparsityTarget::new(spec.ratios[i % spec.ratios.len()])?;
            let side = (i / spec.ratios.len()) % 3;
            let ffn = if side != 1 {
                random_keep_mask(spec.ffn, target, &mut r)
            } else {
                vec![true; spec.ffn]
            };
            let heads = if side != 0 {
                random_keep_mask(spec.n_heads, target, &mut r)
            } else {
                vec![true; spec.n_heads]
            };
            let head_channels: Vec<bool> = heads
                .iter()
                .flat_map(|&k| std::iter::repeat_n(k, cfg.head_dim))
                .collect();
            verify_bound(&w, &cfg, &x, &ffn, &head_channels)
        })
        .collect::<Result<_>>()?;
    let mut report = BoundTrialReport {
        trials: spec.trials,
        failures: 0,
        worst_relative_violation: f64::NEG_INFINITY,
        min_slack: f64::INFINITY,
    };
    for c in &checks {
        if !c.holds(spec.rel_tol) {
            report.failures += 1;
        }
        if c.rhs_max > 0.0 {
            report.worst_relative_violation =
                report.worst_relative_violation.max(c.max_violation / c.rhs_max);
        }
        report.min_slack = report.min_slack.min(c.min_slack);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSpec {
    pub activation: ActivationKind,
    pub trials: usize,
    pub seed: u64,
    pub d: usize,
    pub n_heads: usize,
    pub ffn: usize,
    pub keep: usize,
    pub tokens: usize,
    pub init: BlockInit,
}

/// How oracle blocks and their inputs are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlockInit {
    /// A freshly initialised one-block model fed uniformly random byte
    /// tokens through its embedding.
    Model,
    /// Every weight i.i.d. N(0, std²) and inputs i.i.d. N(0, 1).
    Normal(f64),
}

impl OracleSpec {
    pub fn new(ffn: usize, keep: usize, trials: usize, seed: u64) -> Self {
        Self {
            activation: ActivationKind::Gelu,
            trials,
            seed,
            d: 16,
            n_heads: 4,
            ffn,
            keep,
            tokens: 64,
            init: BlockInit::Model,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleTrial {
    pub score_error: f64,
    pub best_error: f64,
    pub median_error: f64,
    /// Fraction of all masks strictly better than the score-selected one.
    pub quantile: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleReport {
    pub trials: Vec<OracleTrial>,
}

impl OracleReport {
    /// Fraction of trials whose selected mask is in the best `q` of masks.
    pub fn within_best(&self, q: f64) -> f64 {
        let n = self.trials.iter().filter(|t| t.quantile < q).count();
        n as f64 / self.trials.len() as f64
    }

    /// Fraction of trials beating the median mask strictly.
    pub fn better_than_median(&self) -> f64 {
        let n = self
            .trials
            .iter()
            .filter(|t| t.score_error < t.median_error)
            .count();
        n as f64 / self.trials.len() as f64
    }
}

/// Compares the FFN mask chosen by the activation-weighted score against
/// every mask of the same size, on random blocks and inputs.
pub fn oracle_trials(spec: &OracleSpec) -> Result<OracleReport> {
    let cfg = ModelConfig::new(spec.d, spec.n_heads, spec.ffn, 1, spec.activation)?;
    let trials = (0..spec.trials)
        .into_par_iter()
        .map(|i| {
            let trial_seed = derive_seed(derive_seed(spec.seed, "oracle-trials"), &i.to_string());
            let mut r = stream(trial_seed, "inputs");
            let (w, x) = match spec.init {
                BlockInit::Model => {
                    let mut m = Model::<f32>::init(&cfg, trial_seed)?;
                    let tokens: Vec<Token> = (0..spec.tokens)
                        .map(|_| r.gen_range(0..cfg.vocab as Token))
                        .collect();
                    check_tokens(&cfg, &tokens)?;
                    let x = embed(&m, &tokens);
                    (m.blocks.remove(0), x)
                }
                BlockInit::Normal(std) => (
                    BlockWeights::<f32>::random(&cfg, std, &mut r),
                    normal_matrix(spec.tokens, spec.d, 1.0, &mut r),
                ),
            };
            let trace = block_forward(&x, &w, &cfg, None, None)?;
            let stats = ActivationStats {
                blocks: vec![BlockStats {
                    mean_abs_xh: abs_col_mean(&trace.x_head_out)?,
                    mean_abs_xu: abs_col_mean(&trace.x_ffn_hidden)?,
                }],
                token_count: spec.tokens,
            };
            let scores = score_ffn_channels(&stats, &w, 0)?;
            let mut mask = vec![false; spec.ffn];
            for &j in &ranking(&scores)[..spec.keep] {
                mask[j] = true;
            }
            let score_error = mask_error(&w, &cfg, &x, &trace.x_out, &mask, MaskSide::Ffn)?;
            let bf = brute_force_mask(&w, &cfg, &x, spec.keep, MaskSide::Ffn)?;
            Ok(OracleTrial {
                score_error,
                best_error: bf.best_error,
                median_error: bf.median(),
                quantile: bf.quantile_of(score_error),
            })
        })
        .collect::<Result<_>>()?;
    Ok(OracleReport { trials })
}
