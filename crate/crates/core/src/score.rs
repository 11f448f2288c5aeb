//! Channel and head importance scores.
//!
//! Block-wise importance propagation (BIP) scores a channel by its
//! contribution to an upper bound on the change of the *block* output:
//!
//! ```text
//! FFN channel j:   s_j = mean|X^U_j| · ‖W^D_j‖₁
//! MSA channel j:   s_j = mean|X^H_j| · |W^O_j| (I + |W^U||W^D|) 1
//! ```
//!
//! Per-output-dimension bound terms are summed over output dimensions, which
//! is why the row vectors collapse to L1 norms against the all-ones vector.
//! The MSA factor is evaluated as `|W^O_j| · v` with
//! `v = 1 + |W^U| (|W^D| 1)`, never forming the d×d matrix.
//!
//! Head scores are sums of their channel scores.

use rand::Rng;

use crate::calib::{ActivationStats, BlockStats};
use crate::error::{Error, Result};
use crate::model::{BlockWeights, Model, ModelConfig};
use crate::rng;
use crate::tensor::{col_l1_sums, row_l1_sums, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PruneMethod {
    Bip,
    WandaLayer,
    Magnitude,
    Random { seed: u64 },
    Nisp,
}

impl PruneMethod {
    /// Every implemented method; `Random` uses the given seed.
    pub fn all(seed: u64) -> [PruneMethod; 5] {
        [
            Self::Bip,
            Self::WandaLayer,
            Self::Magnitude,
            Self::Random { seed },
            Self::Nisp,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Bip => "bip",
            Self::WandaLayer => "wanda",
            Self::Magnitude => "magnitude",
            Self::Random { .. } => "random",
            Self::Nisp => "nisp",
        }
    }

    pub fn needs_stats(&self) -> bool {
        matches!(self, Self::Bip | Self::WandaLayer)
    }

    /// Parses a method name; `seed` feeds the random baseline.
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "bip" => Ok(Self::Bip),
            "wanda" | "wanda-layer" | "wandalayer" => Ok(Self::WandaLayer),
            "magnitude" => Ok(Self::Magnitude),
            "random" => Ok(Self::Random {
                seed: rng::derive_seed(seed, "random-scores"),
            }),
            "nisp" => Ok(Self::Nisp),
            "llm-pruner" => Err(Error::Config(
                "llm-pruner is a listed contender but is not implemented".into(),
            )),
            other => Err(Error::Config(format!("unknown pruning method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScoreConfig {
    pub method: PruneMethod,
    /// Multiply MSA scores by C = max(C_σ, 1).
    pub include_constant_c: bool,
}

impl ScoreConfig {
    pub fn new(method: PruneMethod) -> Self {
        Self {
            method,
            include_constant_c: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockScores {
    pub ffn: Vec<f32>,
    pub msa_channels: Vec<f32>,
    pub heads: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub method: String,
    pub blocks: Vec<BlockScores>,
}

fn check_stats(stats: &BlockStats, w: &BlockWeights) -> Result<()> {
    if stats.mean_abs_xu.len() != w.ffn_width() {
        return Err(Error::ShapeMismatch {
            op: "score ffn stats",
            left: (stats.mean_abs_xu.len(), 1),
            right: w.wd.shape(),
        });
    }
    if stats.mean_abs_xh.len() != w.head_width() {
        return Err(Error::ShapeMismatch {
            op: "score msa stats",
            left: (stats.mean_abs_xh.len(), 1),
            right: w.wo.shape(),
        });
    }
    Ok(())
}

fn l1_rows_f64(m: &Matrix) -> Vec<f64> {
    row_l1_sums(&m.cast::<f64>())
}

/// FFN channel scores `mean|X^U_j| · ‖W^D_j‖₁`.
pub fn score_ffn_channels(
    stats: &ActivationStats,
    w: &BlockWeights,
    block: usize,
) -> Result<Vec<f32>> {
    let s = stats.block(block)?;
    check_stats(s, w)?;
    let wd = l1_rows_f64(&w.wd);
    Ok(s.mean_abs_xu
        .iter()
        .zip(&wd)
        .map(|(&x, &n)| (f64::from(x) * n) as f32)
        .collect())
}

/// `v = 1 + |W^U| (|W^D| 1)`, i.e. `(I + |W^U||W^D|) 1`.
pub fn propagation_vector(w: &BlockWeights) -> Vec<f64> {
    let wd = l1_rows_f64(&w.wd);
    let wu = w.wu.cast::<f64>();
    (0..wu.rows())
        .map(|i| {
            1.0 + wu
                .row(i)
                .iter()
                .zip(&wd)
                .fold(0.0, |s, (&u, &dn)| s + u.abs() * dn)
        })
        .collect()
}

/// MSA channel scores `mean|X^H_j| · |W^O_j| v`, optionally times C.
pub fn score_msa_channels(
    stats: &ActivationStats,
    w: &BlockWeights,
    block: usize,
    cfg: &ScoreConfig,
    model_cfg: &ModelConfig,
) -> Result<Vec<f32>> {
    let s = stats.block(block)?;
    check_stats(s, w)?;
    let v = propagation_vector(w);
    let wo = w.wo.cast::<f64>();
    let c = if cfg.include_constant_c {
        model_cfg.activation.lipschitz_constant().max(1.0)
    } else {
        1.0
    };
    Ok(s.mean_abs_xh
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let reach = wo
                .row(j)
                .iter()
                .zip(&v)
                .fold(0.0, |acc, (&o, &vk)| acc + o.abs() * vk);
            (c * f64::from(x) * reach) as f32
        })
        .collect())
}

/// Sums each head's contiguous channel range.
pub fn aggregate_heads(msa_channels: &[f32], n_heads: usize) -> Result<Vec<f32>> {
    if n_heads == 0 || !msa_channels.len().is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "{} channels cannot be split evenly into {n_heads} heads",
            msa_channels.len()
        )));
    }
    let hd = msa_channels.len() / n_heads;
    Ok(msa_channels
        .chunks(hd)
        .map(|c| c.iter().fold(0.0f32, |s, &v| s + v))
        .collect())
}

fn finish_block(ffn: Vec<f32>, msa_channels: Vec<f32>, cfg: &ModelConfig) -> Result<BlockScores> {
    let heads = aggregate_heads(&msa_channels, msa_channels.len() / cfg.head_dim)?;
    Ok(BlockScores {
        ffn,
        msa_channels,
        heads,
    })
}

/// Scores every block of `model` with the configured method.
pub fn score_model(
    cfg: &ScoreConfig,
    stats: Option<&ActivationStats>,
    model: &Model,
) -> Result<ImportanceScores> {
    match cfg.method {
        PruneMethod::Bip => {
            let stats = stats.ok_or_else(|| Error::MissingStats {
                method: "bip".into(),
            })?;
            if stats.blocks.len() != model.blocks.len() {
                return Err(Error::Config(format!(
                    "stats cover {} blocks, model has {}",
                    stats.blocks.len(),
                    model.blocks.len()
                )));
            }
            let blocks = model
                .blocks
                .iter()
                .enumerate()
                .map(|(l, w)| {
                    let ffn = score_ffn_channels(stats, w, l)?;
                    let msa = score_msa_channels(stats, w, l, cfg, &model.config)?;
                    finish_block(ffn, msa, &model.config)
                })
                .collect::<Result<_>>()?;
            Ok(ImportanceScores {
                method: "bip".into(),
                blocks,
            })
        }
        other => score_baseline(other, stats, model),
    }
}

/// Contender scorers.
pub fn score_baseline(
    method: PruneMethod,
    stats: Option<&ActivationStats>,
    model: &Model,
) -> Result<ImportanceScores> {
    let cfg = &model.config;
    let blocks = match method {
        PruneMethod::Bip => return score_model(&ScoreConfig::new(method), stats, model),
        PruneMethod::WandaLayer => {
            let stats = stats.ok_or_else(|| Error::MissingStats {
                method: "wanda".into(),
            })?;
            model
                .blocks
                .iter()
                .enumerate()
                .map(|(l, w)| {
                    let ffn = score_ffn_channels(stats, w, l)?;
                    let s = stats.block(l)?;
                    let wo = l1_rows_f64(&w.wo);
                    let msa = s
                        .mean_abs_xh
                        .iter()
                        .zip(&wo)
                        .map(|(&x, &n)| (f64::from(x) * n) as f32)
                        .collect();
                    finish_block(ffn, msa, cfg)
                })
                .collect::<Result<Vec<_>>>()?
        }
        PruneMethod::Magnitude => model
            .blocks
            .iter()
            .map(|w| finish_block_magnitude(w, cfg))
            .collect::<Result<Vec<_>>>()?,
        PruneMethod::Random { seed } => {
            let mut r = rng::stream(seed, "random-baseline");
            model
                .blocks
                .iter()
                .map(|w| {
                    let ffn = (0..w.ffn_width()).map(|_| r.gen::<f32>()).collect();
                    let msa = (0..w.head_width()).map(|_| r.gen::<f32>()).collect();
                    finish_block(ffn, msa, cfg)
                })
                .collect::<Result<Vec<_>>>()?
        }
        PruneMethod::Nisp => nisp_scores(model)?,
    };
    Ok(ImportanceScores {
        method: method.label().into(),
        blocks,
    })
}

fn finish_block_magnitude(w: &BlockWeights, cfg: &ModelConfig) -> Result<BlockScores> {
    let wu = col_l1_sums(&w.wu.cast::<f64>());
    let wd = l1_rows_f64(&w.wd);
    let wg = w.wg.as_ref().map(|g| col_l1_sums(&g.cast::<f64>()));
    let ffn = (0..w.ffn_width())
        .map(|j| {
            let gate = wg.as_ref().map_or(0.0, |g| g[j]);
            (wu[j] + wd[j] + gate) as f32
        })
        .collect();

    let hd = cfg.head_dim;
    let q = col_l1_sums(&w.wq.cast::<f64>());
    let k = col_l1_sums(&w.wk.cast::<f64>());
    let v = col_l1_sums(&w.wv.cast::<f64>());
    let wo = l1_rows_f64(&w.wo);
    let msa = (0..w.head_width())
        .map(|j| {
            let h = j / hd;
            let range = h * hd..(h + 1) * hd;
            let qkv: f64 = range.map(|c| q[c] + k[c] + v[c]).sum();
            (wo[j] + qkv / hd as f64) as f32
        })
        .collect();
    finish_block(ffn, msa, cfg)
}

fn abs_mat_vec(m: &Matrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .zip(v)
                .fold(0.0, |s, (&a, &b)| s + a.abs() * b)
        })
        .collect()
}

/// Weight-only importance back-propagation from an all-ones vector at the
/// last block's output towards the first block.
fn nisp_scores(model: &Model) -> Result<Vec<BlockScores>> {
    let cfg = &model.config;
    let mut iota = vec![1.0f64; cfg.d];
    let mut out = Vec::with_capacity(model.blocks.len());
    for w in model.blocks.iter().rev() {
        let wd = w.wd.cast::<f64>();
        let wu = w.wu.cast::<f64>();
        let wo = w.wo.cast::<f64>();
        let wv = w.wv.cast::<f64>();
        let ffn = abs_mat_vec(&wd, &iota);
        let through_ffn = abs_mat_vec(&wu, &ffn);
        let iota_mid: Vec<f64> = iota.iter().zip(&through_ffn).map(|(a, b)| a + b).collect();
        let msa = abs_mat_vec(&wo, &iota_mid);
        let through_attn = abs_mat_vec(&wv, &msa);
        let mut next: Vec<f64> = iota_mid
            .iter()
            .zip(&through_attn)
            .map(|(a, b)| a + b)
            .collect();
        // rescale so deep stacks cannot overflow; rankings inside a block are unaffected
        let peak = next.iter().fold(0.0f64, |m, &x| m.max(x));
        if peak > 0.0 {
            next.iter_mut().for_each(|x| *x /= peak);
        }
        iota = next;
        out.push(finish_block(
            ffn.into_iter().map(|x| x as f32).collect(),
            msa.into_iter().map(|x| x as f32).collect(),
            cfg,
        )?);
    }
    out.reverse();
    Ok(out)
}

/// Indices sorted by descending score, ties by ascending index.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::collect_stats;
    use crate::rng::{normal_matrix, stream};
    use crate::tensor::{matmul, ActivationKind};
    use proptest::prelude::*;

    fn stats_for(xh: Vec<f32>, xu: Vec<f32>) -> ActivationStats {
        ActivationStats {
            blocks: vec![BlockStats {
                mean_abs_xh: xh,
                mean_abs_xu: xu,
            }],
            token_count: 1,
        }
    }

    fn random_setup(seed: u64, d: usize, heads: usize, f: usize) -> (Model, ActivationStats) {
        let c = ModelConfig::new(d, heads, f, 2, ActivationKind::Gelu).unwrap();
        let m = Model::<f32>::init(&c, seed).unwrap();
        let batch: Vec<Vec<u32>> = (0..4u32)
            .map(|s| (0..16).map(|t| (s * 31 + t * 7) % 256).collect())
            .collect();
        let stats = collect_stats(&m, &batch).unwrap();
        (m, stats)
    }

    #[test]
    fn ffn_score_hand_example_and_homogeneity() {
        let c = ModelConfig::new(2, 1, 2, 1, ActivationKind::Relu).unwrap();
        let mut w = BlockWeights::<f32>::zeros(&c);
        w.wd = Matrix::from_rows(&[vec![2.0, -2.0], vec![1.0, 0.5]]);
        let stats = stats_for(vec![0.0, 0.0], vec![0.5, 1.0]);
        let s = score_ffn_channels(&stats, &w, 0).unwrap();
        assert_eq!(s, vec![2.0, 1.5]);

        let zero = stats_for(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(score_ffn_channels(&zero, &w, 0).unwrap(), vec![0.0, 0.0]);

        w.wd.set(0, 0, 6.0);
        w.wd.set(0, 1, -6.0);
        assert_eq!(score_ffn_channels(&stats, &w, 0).unwrap()[0], 6.0);
    }

    #[test]
    fn msa_score_hand_examples() {
        let c = ModelConfig::new(2, 1, 1, 1, ActivationKind::Relu).unwrap();
        let mut w = BlockWeights::<f32>::zeros(&c);
        w.wo = Matrix::identity(2);
        let stats = stats_for(vec![0.7, 0.2], vec![0.0]);
        let cfg = ScoreConfig::new(PruneMethod::Bip);
        // W^U = 0: v = 1, scores are the activation means
        assert_eq!(
            score_msa_channels(&stats, &w, 0, &cfg, &c).unwrap(),
            vec![0.7, 0.2]
        );

        w.wu = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        w.wd = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert_eq!(propagation_vector(&w), vec![3.0, 1.0]);
        let s = score_msa_channels(&stats, &w, 0, &cfg, &c).unwrap();
        assert!((s[0] - 3.0 * 0.7).abs() < 1e-7);
        assert!((s[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn propagation_vector_matches_explicit_matrix() {
        for seed in 0..10 {
            let c = ModelConfig::new(8, 2, 12, 1, ActivationKind::Gelu).unwrap();
            let w = BlockWeights::<f32>::random(&c, 0.7, &mut stream(seed, "w"));
            let xh: Vec<f32> = normal_matrix::<f32>(1, 8, 1.0, &mut stream(seed, "s"))
                .data()
                .iter()
                .map(|v| v.abs())
                .collect();
            let stats = stats_for(xh.clone(), vec![0.1; 12]);
            let fast =
                score_msa_channels(&stats, &w, 0, &ScoreConfig::new(PruneMethod::Bip), &c).unwrap();

            // |W^O| (I + |W^U||W^D|), then each row summed
            let wo = w.wo.cast::<f64>().abs();
            let wu = w.wu.cast::<f64>().abs();
            let wd = w.wd.cast::<f64>().abs();
            let mut inner = matmul(&wu, &wd).unwrap();
            inner.add_assign(&Matrix::identity(8)).unwrap();
            let full = matmul(&wo, &inner).unwrap();
            for j in 0..8 {
                let expect: f64 = full.row(j).iter().sum::<f64>() * f64::from(xh[j]);
                let got = f64::from(fast[j]);
                assert!(
                    (got - expect).abs() <= 1e-5 * expect.abs().max(1e-12),
                    "{got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn aggregate_heads_examples() {
        assert_eq!(
            aggregate_heads(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(),
            vec![3.0, 7.0]
        );
        assert_eq!(aggregate_heads(&[0.5; 6], 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(aggregate_heads(&[1.0, 2.0, 3.0], 1).unwrap(), vec![6.0]);
        assert!(aggregate_heads(&[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn heads_are_exact_channel_sums() {
        let (m, stats) = random_setup(7, 16, 4, 24);
        for method in PruneMethod::all(3) {
            let s = score_model(&ScoreConfig::new(method), Some(&stats), &m).unwrap();
            for b in &s.blocks {
                for (h, &hs) in b.heads.iter().enumerate() {
                    let sum = b.msa_channels[h * 4..(h + 1) * 4]
                        .iter()
                        .fold(0.0f32, |a, &v| a + v);
                    assert_eq!(hs, sum);
                }
                if method != (PruneMethod::Random { seed: 3 }) {
                    assert!(b.ffn.iter().chain(&b.msa_channels).all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn bip_reduces_to_wanda_without_ffn() {
        let (mut m, stats) = random_setup(8, 16, 4, 24);
        for b in &mut m.blocks {
            b.wu = Matrix::zeros(16, 24);
        }
        let bip = score_model(&ScoreConfig::new(PruneMethod::Bip), Some(&stats), &m).unwrap();
        let wanda =
            score_model(&ScoreConfig::new(PruneMethod::WandaLayer), Some(&stats), &m).unwrap();
        assert_eq!(bip.blocks, wanda.blocks);
    }

    #[test]
    fn constant_c_preserves_rankings() {
        let (m, stats) = random_setup(9, 16, 4, 24);
        let mut cfg = ScoreConfig::new(PruneMethod::Bip);
        let off = score_model(&cfg, Some(&stats), &m).unwrap();
        cfg.include_constant_c = true;
        let on = score_model(&cfg, Some(&stats), &m).unwrap();
        for (a, b) in off.blocks.iter().zip(&on.blocks) {
            assert_eq!(ranking(&a.msa_channels), ranking(&b.msa_channels));
            assert_eq!(ranking(&a.heads), ranking(&b.heads));
            assert_ne!(a.msa_channels, b.msa_channels);
        }
    }

    #[test]
    fn baselines_follow_their_definitions() {
        let (m, stats) = random_setup(10, 16, 4, 24);
        let r1 = score_baseline(PruneMethod::Random { seed: 5 }, None, &m).unwrap();
        let r2 = score_baseline(PruneMethod::Random { seed: 5 }, None, &m).unwrap();
        assert_eq!(r1, r2);
        assert!(score_baseline(PruneMethod::WandaLayer, None, &m).is_err());
        assert!(score_model(&ScoreConfig::new(PruneMethod::Bip), None, &m).is_err());

        let mut zeroed = m.clone();
        for j in 0..16 {
            zeroed.blocks[0].wu.set(j, 5, 0.0);
        }
        for k in 0..16 {
            zeroed.blocks[0].wd.set(5, k, 0.0);
        }
        let mag = score_baseline(PruneMethod::Magnitude, Some(&stats), &zeroed).unwrap();
        assert_eq!(mag.blocks[0].ffn[5], 0.0);
        assert!(mag.blocks[0].ffn[4] > 0.0);
    }

    #[test]
    fn nisp_ones_propagate_through_identity_block() {
        let c = ModelConfig::new(8, 2, 4, 1, ActivationKind::Relu).unwrap();
        let mut m = Model::<f32>::zeros(&c).unwrap();
        m.blocks[0].wo = Matrix::identity(8);
        let s = score_baseline(PruneMethod::Nisp, None, &m).unwrap();
        assert_eq!(s.blocks[0].msa_channels, vec![1.0; 8]);
        assert_eq!(s.blocks[0].ffn, vec![0.0; 4]);
    }

    #[test]
    fn parse_names() {
        assert_eq!(PruneMethod::parse("BIP", 0).unwrap(), PruneMethod::Bip);
        assert_eq!(
            PruneMethod::parse("wanda", 0).unwrap(),
            PruneMethod::WandaLayer
        );
        assert!(matches!(
            PruneMethod::parse("random", 4).unwrap(),
            PruneMethod::Random { .. }
        ));
        assert!(PruneMethod::parse("llm-pruner", 0).is_err());
        assert!(PruneMethod::parse("bogus", 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn activation_scaling_scales_scores(seed in 0u64..500, lambda in 0.1f32..10.0) {
            let (m, stats) = random_setup(seed, 8, 2, 12);
            let scaled = stats.scaled(lambda);
            for method in [PruneMethod::Bip, PruneMethod::WandaLayer] {
                let cfg = ScoreConfig::new(method);
                let a = score_model(&cfg, Some(&stats), &m).unwrap();
                let b = score_model(&cfg, Some(&scaled), &m).unwrap();
                for (x, y) in a.blocks.iter().zip(&b.blocks) {
                    for (p, q) in x.ffn.iter().zip(&y.ffn).chain(x.msa_channels.iter().zip(&y.msa_channels)) {
                        prop_assert!((p * lambda - q).abs() <= 1e-4 * q.abs().max(1e-6));
                    }
                    prop_assert_eq!(ranking(&x.ffn), ranking(&y.ffn));
                    prop_assert_eq!(ranking(&x.heads), ranking(&y.heads));
                }
            }
        }
    }
}
