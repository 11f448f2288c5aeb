//! Transformer block and the stacked byte-level causal LM built from it.
//!
//! A block computes
//!
//! ```text
//! X^H  = Concat[h_1 .. h_n],   h_i = softmax(Q_i K_iᵀ / √d) V_i
//! X'   = X^H W^O + X
//! X^U  = X' W^U
//! f(X) = σ(X^U) W^D + X'
//! ```
//!
//! with no normalisation unless `prenorm` is set, in which case a
//! parameter-free RMS normalisation is applied to the input of each
//! sub-module (and before the LM head).
//!
//! Masks are channel-level: a head mask zeroes columns of `X^H` before the
//! output projection, an FFN mask zeroes columns of `X^U` before σ. Whole-head
//! masking is output-equivalent to removing the head's Q/K/V columns and W^O
//! rows, which is what [`crate::prune::apply_prune`] does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul, matmul_nt, softmax_in_place, ActivationKind, Matrix, Scalar};

pub type Token = u32;

pub const BYTE_VOCAB: usize = 256;
pub const MAX_POSITIONS: usize = 512;
pub(crate) const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub n_blocks: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub activation: ActivationKind,
    pub causal: bool,
    pub prenorm: bool,
    pub gated: bool,
}

impl ModelConfig {
    /// Causal byte-level config without normalisation or gating.
    pub fn new(
        d: usize,
        n_heads: usize,
        ffn_hidden: usize,
        n_blocks: usize,
        activation: ActivationKind,
    ) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "embedding dimension {d} is not divisible by {n_heads} heads"
            )));
        }
        let cfg = Self {
            d,
            n_heads,
            head_dim: d / n_heads,
            ffn_hidden,
            n_blocks,
            vocab: BYTE_VOCAB,
            max_positions: MAX_POSITIONS,
            activation,
            causal: true,
            prenorm: false,
            gated: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_prenorm(mut self, on: bool) -> Self {
        self.prenorm = on;
        self
    }

    pub fn with_gated(mut self, on: bool) -> Self {
        self.gated = on;
        self
    }

    pub fn with_causal(mut self, on: bool) -> Self {
        self.causal = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "d, n_heads and head_dim must be positive".into(),
            ));
        }
        if self.d != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d = {} must equal n_heads × head_dim = {} × {}",
                self.d, self.n_heads, self.head_dim
            )));
        }
        if self.n_blocks == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(
                "n_blocks and ffn_hidden must be at least 1".into(),
            ));
        }
        if self.vocab == 0 || self.max_positions == 0 {
            return Err(Error::Config(
                "vocab and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the concatenated head output of an unpruned block.
    pub fn head_channels(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// Weights of one block. Widths may be smaller than the config's after
/// pruning: `wq.cols()` is the kept head width and `wu.cols()` the kept FFN
/// width.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<T: Scalar = f32> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub wu: Matrix<T>,
    pub wd: Matrix<T>,
    pub wg: Option<Matrix<T>>,
}

impl<T: Scalar> BlockWeights<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, f) = (cfg.d, cfg.head_channels(), cfg.ffn_hidden);
        Self {
            wq: Matrix::zeros(d, h),
            wk: Matrix::zeros(d, h),
            wv: Matrix::zeros(d, h),
            wo: Matrix::zeros(h, d),
            wu: Matrix::zeros(d, f),
            wd: Matrix::zeros(f, d),
            wg: cfg.gated.then(|| Matrix::zeros(d, f)),
        }
    }

    /// I.i.d. N(0, std²) entries in every matrix.
    pub fn random(cfg: &ModelConfig, std: f64, rng: &mut impl rand::Rng) -> Self {
        let (d, h, f) = (cfg.d, cfg.head_channels(), cfg.ffn_hidden);
        Self {
            wq: rng::normal_matrix(d, h, std, rng),
            wk: rng::normal_matrix(d, h, std, rng),
            wv: rng::normal_matrix(d, h, std, rng),
            wo: rng::normal_matrix(h, d, std, rng),
            wu: rng::normal_matrix(d, f, std, rng),
            wd: rng::normal_matrix(f, d, std, rng),
            wg: cfg.gated.then(|| rng::normal_matrix(d, f, std, rng)),
        }
    }

    pub fn head_width(&self) -> usize {
        self.wq.cols()
    }

    pub fn n_heads(&self, cfg: &ModelConfig) -> usize {
        self.wq.cols() / cfg.head_dim
    }

    pub fn ffn_width(&self) -> usize {
        self.wu.cols()
    }

    pub fn cast<U: Scalar>(&self) -> BlockWeights<U> {
        BlockWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            wu: self.wu.cast(),
            wd: self.wd.cast(),
            wg: self.wg.as_ref().map(Matrix::cast),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d;
        let h = self.wq.cols();
        let f = self.wu.cols();
        let bad = |what: &str, got: (usize, usize), want: (usize, usize)| {
            Err(Error::Config(format!(
                "{what} has shape {got:?}, expected {want:?}"
            )))
        };
        if h == 0 || !h.is_multiple_of(cfg.head_dim) {
            return Err(Error::Config(format!(
                "head width {h} is not a positive multiple of head_dim {}",
                cfg.head_dim
            )));
        }
        if f == 0 {
            return Err(Error::Config("FFN width must be positive".into()));
        }
        for (name, m, want) in [
            ("wq", &self.wq, (d, h)),
            ("wk", &self.wk, (d, h)),
            ("wv", &self.wv, (d, h)),
            ("wo", &self.wo, (h, d)),
            ("wu", &self.wu, (d, f)),
            ("wd", &self.wd, (f, d)),
        ] {
            if m.shape() != want {
                return bad(name, m.shape(), want);
            }
        }
        match (&self.wg, cfg.gated) {
            (Some(g), true) if g.shape() != (d, f) => bad("wg", g.shape(), (d, f)),
            (None, true) => Err(Error::Config("gated config but no gate matrix".into())),
            (Some(_), false) => Err(Error::Config(
                "gate matrix present on ungated config".into(),
            )),
            _ => Ok(()),
        }
    }

    pub(crate) fn matrices(&self) -> Vec<(&'static str, &Matrix<T>)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("wu", &self.wu),
            ("wd", &self.wd),
        ];
        if let Some(g) = &self.wg {
            out.push(("wg", g));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub positions: Matrix<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub lm_head: Matrix<T>,
}

impl<T: Scalar> Model<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            embedding: Matrix::zeros(config.vocab, config.d),
            positions: Matrix::zeros(config.max_positions, config.d),
            blocks: (0..config.n_blocks)
                .map(|_| BlockWeights::zeros(config))
                .collect(),
            lm_head: Matrix::zeros(config.d, config.vocab),
            config: config.clone(),
        })
    }

    /// Scaled-normal initialisation suitable for training.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let (d, h, f) = (config.d, config.head_channels(), config.ffn_hidden);
        let depth = (2.0 * config.n_blocks as f64).sqrt();
        let embedding = rng::normal_matrix(config.vocab, d, 0.1, &mut r);
        let positions = rng::normal_matrix(config.max_positions, d, 0.02, &mut r);
        let blocks = (0..config.n_blocks)
            .map(|_| {
                let din = 1.0 / (d as f64).sqrt();
                BlockWeights {
                    wq: rng::normal_matrix(d, h, din, &mut r),
                    wk: rng::normal_matrix(d, h, din, &mut r),
                    wv: rng::normal_matrix(d, h, din, &mut r),
                    wo: rng::normal_matrix(h, d, 1.0 / (h as f64).sqrt() / depth, &mut r),
                    wu: rng::normal_matrix(d, f, din, &mut r),
                    wd: rng::normal_matrix(f, d, 1.0 / (f as f64).sqrt() / depth, &mut r),
                    wg: config.gated.then(|| rng::normal_matrix(d, f, din, &mut r)),
                }
            })
            .collect();
        let lm_head = rng::normal_matrix(d, config.vocab, 1.0 / (d as f64).sqrt(), &mut r);
        Ok(Self {
            config: config.clone(),
            embedding,
            positions,
            blocks,
            lm_head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            positions: self.positions.cast(),
            blocks: self.blocks.iter().map(BlockWeights::cast).collect(),
            lm_head: self.lm_head.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        if self.blocks.len() != c.n_blocks {
            return Err(Error::Config(format!(
                "{} blocks stored, config says {}",
                self.blocks.len(),
                c.n_blocks
            )));
        }
        for b in &self.blocks {
            b.validate(c)?;
        }
        for (name, m, want) in [
            ("embedding", &self.embedding, (c.vocab, c.d)),
            ("positions", &self.positions, (c.max_positions, c.d)),
            ("lm_head", &self.lm_head, (c.d, c.vocab)),
        ] {
            if m.shape() != want {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Every parameter matrix in a fixed canonical order with its name.
    pub fn named_parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("embedding".to_string(), &self.embedding),
            ("positions".to_string(), &self.positions),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, m) in b.matrices() {
                out.push((format!("block{l}/{name}"), m));
            }
        }
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .map(|(_, m)| m.rows() * m.cols())
            .sum()
    }
}

/// Intermediate activations of one block forward.
///
/// `x_head_out` and `x_ffn_hidden` hold the values after masking, so the
/// residual identity `x_mid = x_head_out · W^O + x_in` holds for masked
/// forwards as well.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace<T: Scalar = f32> {
    pub x_in: Matrix<T>,
    pub x_head_out: Matrix<T>,
    pub x_mid: Matrix<T>,
    pub x_ffn_hidden: Matrix<T>,
    pub x_out: Matrix<T>,
}

/// Channel-level keep masks for one block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChannelMask {
    /// Length = block head width (`X^H` columns).
    pub heads: Option<Vec<bool>>,
    /// Length = block FFN width (`X^U` columns).
    pub ffn: Option<Vec<bool>>,
}

/// Everything the backward pass needs from a block forward.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T: Scalar> {
    pub x_in: Matrix<T>,
    /// Input to the attention projections (normalised when prenorm).
    pub attn_in: Matrix<T>,
    pub attn_inv_rms: Vec<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Attention probabilities per head, T×T.
    pub probs: Vec<Matrix<T>>,
    pub x_head_out: Matrix<T>,
    pub x_mid: Matrix<T>,
    pub ffn_in: Matrix<T>,
    pub ffn_inv_rms: Vec<T>,
    /// `X^U` after masking.
    pub up: Matrix<T>,
    pub gate_pre: Option<Matrix<T>>,
    pub x_out: Matrix<T>,
}

impl<T: Scalar> BlockCache<T> {
    fn into_trace(self) -> BlockTrace<T> {
        BlockTrace {
            x_in: self.x_in,
            x_head_out: self.x_head_out,
            x_mid: self.x_mid,
            x_ffn_hidden: self.up,
            x_out: self.x_out,
        }
    }
}

pub(crate) fn rms_normalize<T: Scalar>(x: &Matrix<T>) -> (Matrix<T>, Vec<T>) {
    let mut out = x.clone();
    let n = T::lit(x.cols() as f64);
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) / n;
        let r = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
        for v in row.iter_mut() {
            *v *= r;
        }
        inv.push(r);
    }
    (out, inv)
}

fn mask_values<T: Scalar>(mask: &[bool]) -> Vec<T> {
    mask.iter()
        .map(|&k| if k { T::one() } else { T::zero() })
        .collect()
}

pub(crate) fn attention_scale<T: Scalar>(cfg: &ModelConfig) -> T {
    T::one() / T::lit(cfg.d as f64).sqrt()
}

pub(crate) fn block_forward_cached<T: Scalar>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    mask: &ChannelMask,
) -> Result<BlockCache<T>> {
    if x.cols() != cfg.d || w.wq.rows() != cfg.d {
        return Err(Error::ShapeMismatch {
            op: "block_forward",
            left: x.shape(),
            right: w.wq.shape(),
        });
    }
    let hw = w.head_width();
    let fw = w.ffn_width();
    if let Some(m) = &mask.heads {
        if m.len() != hw {
            return Err(Error::ShapeMismatch {
                op: "block_forward head mask",
                left: (m.len(), 1),
                right: (hw, 1),
            });
        }
    }
    if let Some(m) = &mask.ffn {
        if m.len() != fw {
            return Err(Error::ShapeMismatch {
                op: "block_forward ffn mask",
                left: (m.len(), 1),
                right: (fw, 1),
            });
        }
    }
    let t_len = x.rows();
    let hd = cfg.head_dim;
    let n_heads = hw / hd;

    let (attn_in, attn_inv_rms) = if cfg.prenorm {
        rms_normalize(x)
    } else {
        (x.clone(), Vec::new())
    };
    let q = matmul(&attn_in, &w.wq)?;
    let k = matmul(&attn_in, &w.wk)?;
    let v = matmul(&attn_in, &w.wv)?;
    let scale = attention_scale::<T>(cfg);
    let mut x_head_out = Matrix::zeros(t_len, hw);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.col_block(h * hd, hd);
        let kh = k.col_block(h * hd, hd);
        let vh = v.col_block(h * hd, hd);
        let mut p = matmul_nt(&qh, &kh)?;
        for t in 0..t_len {
            let row = p.row_mut(t);
            let visible = if cfg.causal { t + 1 } else { t_len };
            for s in row[..visible].iter_mut() {
                *s *= scale;
            }
            softmax_in_place(&mut row[..visible]);
            for s in row[visible..].iter_mut() {
                *s = T::zero();
            }
        }
        let oh = matmul(&p, &vh)?;
        x_head_out.set_col_block(h * hd, &oh);
        probs.push(p);
    }
    if let Some(m) = &mask.heads {
        x_head_out.scale_cols(&mask_values(m));
    }
    let mut x_mid = matmul(&x_head_out, &w.wo)?;
    x_mid.add_assign(x)?;

    let (ffn_in, ffn_inv_rms) = if cfg.prenorm {
        rms_normalize(&x_mid)
    } else {
        (x_mid.clone(), Vec::new())
    };
    let mut up = matmul(&ffn_in, &w.wu)?;
    if let Some(m) = &mask.ffn {
        up.scale_cols(&mask_values(m));
    }
    let act = cfg.activation;
    let (hidden, gate_pre) = match &w.wg {
        Some(wg) => {
            let g = matmul(&ffn_in, wg)?;
            let mut hidden = g.map(|z| act.apply(z));
            for (hv, &u) in hidden.data_mut().iter_mut().zip(up.data()) {
                *hv *= u;
            }
            (hidden, Some(g))
        }
        None => (up.map(|z| act.apply(z)), None),
    };
    let mut x_out = matmul(&hidden, &w.wd)?;
    x_out.add_assign(&x_mid)?;

    Ok(BlockCache {
        x_in: x.clone(),
        attn_in,
        attn_inv_rms,
        q,
        k,
        v,
        probs,
        x_head_out,
        x_mid,
        ffn_in,
        ffn_inv_rms,
        up,
        gate_pre,
        x_out,
    })
}

/// One block forward with optional channel masks.
pub fn block_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    head_mask: Option<&[bool]>,
    ffn_mask: Option<&[bool]>,
) -> Result<BlockTrace<T>> {
    let mask = ChannelMask {
        heads: head_mask.map(<[bool]>::to_vec),
        ffn: ffn_mask.map(<[bool]>::to_vec),
    };
    Ok(block_forward_cached(x, w, cfg, &mask)?.into_trace())
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("model_forward"));
    }
    if tokens.len() > cfg.max_positions {
        return Err(Error::Config(format!(
            "sequence of {} tokens exceeds the {} supported positions",
            tokens.len(),
            cfg.max_positions
        )));
    }
    for (position, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab {
            return Err(Error::TokenOutOfRange {
                token: tok as usize,
                position,
                vocab: cfg.vocab,
            });
        }
    }
    Ok(())
}

pub(crate) fn embed<T: Scalar>(model: &Model<T>, tokens: &[Token]) -> Matrix<T> {
    let d = model.config.d;
    let mut x = Matrix::zeros(tokens.len(), d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for ((o, &e), &p) in row
            .iter_mut()
            .zip(model.embedding.row(tok as usize))
            .zip(model.positions.row(t))
        {
            *o = e + p;
        }
    }
    x
}

/// Final normalisation (when prenorm) and LM head.
pub(crate) fn head_logits<T: Scalar>(model: &Model<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if model.config.prenorm {
        matmul(&rms_normalize(x).0, &model.lm_head)
    } else {
        matmul(x, &model.lm_head)
    }
}

/// Runs the full model, optionally with per-block channel masks, returning
/// the logits and the final hidden state of every block.
pub fn forward_masked<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
    masks: Option<&[ChannelMask]>,
) -> Result<(Matrix<T>, Vec<Matrix<T>>)> {
    check_tokens(&model.config, tokens)?;
    if let Some(m) = masks {
        if m.len() != model.blocks.len() {
            return Err(Error::InvalidMask(format!(
                "{} block masks for {} blocks",
                m.len(),
                model.blocks.len()
            )));
        }
    }
    let none = ChannelMask::default();
    let mut x = embed(model, tokens);
    let mut outs = Vec::with_capacity(model.blocks.len());
    for (l, w) in model.blocks.iter().enumerate() {
        let mask = masks.map_or(&none, |m| &m[l]);
        x = block_forward_cached(&x, w, &model.config, mask)?.x_out;
        outs.push(x.clone());
    }
    Ok((head_logits(model, &x)?, outs))
}

/// Logits and a trace of every block.
pub fn model_forward<T: Scalar>(
    model: &Model<T>,
    tokens: &[Token],
) -> Result<(Matrix<T>, Vec<BlockTrace<T>>)> {
    check_tokens(&model.config, tokens)?;
    let none = ChannelMask::default();
    let mut x = embed(model, tokens);
    let mut traces = Vec::with_capacity(model.blocks.len());
    for w in &model.blocks {
        let trace = block_forward_cached(&x, w, &model.config, &none)?.into_trace();
        x = trace.x_out.clone();
        traces.push(trace);
    }
    Ok((head_logits(model, &x)?, traces))
}

/// Logits only.
pub fn logits<T: Scalar>(model: &Model<T>, tokens: &[Token]) -> Result<Matrix<T>> {
    Ok(forward_masked(model, tokens, None)?.0)
}
