//! Minimal Adam trainer for the byte-level LM with hand-written reverse-mode
//! gradients, plus a finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{tokenize, Corpus};
use crate::error::{Error, Result};
use crate::model::{
    attention_scale, block_forward_cached, check_tokens, embed, rms_normalize, BlockCache,
    BlockWeights, ChannelMask, Model, ModelConfig, Token,
};
use crate::rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Matrix, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Input length of each training window; targets are shifted by one.
    pub seq_len: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Global L2 norm cap on the gradient; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 64,
            learning_rate: 3e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            seed: 0,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.seq_len == 0 || self.seq_len > cfg.max_positions {
            return bad(format!(
                "seq_len {} outside [1, {}]",
                self.seq_len, cfg.max_positions
            ));
        }
        // zero is allowed: it is the documented no-op update
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate {} must be finite and ≥ 0",
                self.learning_rate
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} outside (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be ≥ 0".into());
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn write_log_csv(log: &[StepLog], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Same layout as the model; used for gradients and optimiser moments.
pub type Gradients<T> = Model<T>;

pub(crate) fn zeros_like<T: Scalar>(m: &Model<T>) -> Model<T> {
    let z = |x: &Matrix<T>| Matrix::zeros(x.rows(), x.cols());
    Model {
        config: m.config.clone(),
        embedding: z(&m.embedding),
        positions: z(&m.positions),
        blocks: m
            .blocks
            .iter()
            .map(|b| BlockWeights {
                wq: z(&b.wq),
                wk: z(&b.wk),
                wv: z(&b.wv),
                wo: z(&b.wo),
                wu: z(&b.wu),
                wd: z(&b.wd),
                wg: b.wg.as_ref().map(z),
            })
            .collect(),
        lm_head: z(&m.lm_head),
    }
}

/// Every parameter matrix in canonical order.
pub(crate) fn params_mut<T: Scalar>(m: &mut Model<T>) -> Vec<&mut Matrix<T>> {
    let mut out = vec![&mut m.embedding, &mut m.positions];
    for b in &mut m.blocks {
        out.extend([
            &mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo, &mut b.wu, &mut b.wd,
        ]);
        if let Some(g) = &mut b.wg {
            out.push(g);
        }
    }
    out.push(&mut m.lm_head);
    out
}

fn params<T: Scalar>(m: &Model<T>) -> Vec<&Matrix<T>> {
    let mut out = vec![&m.embedding, &m.positions];
    for b in &m.blocks {
        out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.wu, &b.wd]);
        if let Some(g) = &b.wg {
            out.push(g);
        }
    }
    out.push(&m.lm_head);
    out
}

fn accumulate<T: Scalar>(into: &mut Model<T>, from: &Model<T>) {
    for (a, b) in params_mut(into).into_iter().zip(params(from)) {
        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

fn add_into<T: Scalar>(dst: &mut Matrix<T>, src: &Matrix<T>) {
    for (x, &y) in dst.data_mut().iter_mut().zip(src.data()) {
        *x += y;
    }
}

/// Backward through `y = x · inv_rms` given the normalised `y`.
fn rms_backward<T: Scalar>(dy: &Matrix<T>, y: &Matrix<T>, inv_rms: &[T]) -> Matrix<T> {
    let n = T::lit(y.cols() as f64);
    let mut dx = dy.clone();
    for (i, &r) in inv_rms.iter().enumerate() {
        let dot = dy
            .row(i)
            .iter()
            .zip(y.row(i))
            .fold(T::zero(), |s, (&a, &b)| s + a * b)
            / n;
        for (o, &yv) in dx.row_mut(i).iter_mut().zip(y.row(i)) {
            *o = r * (*o - yv * dot);
        }
    }
    dx
}

/// Accumulates block parameter gradients into `g` and returns dL/dx_in.
fn block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    dout: &Matrix<T>,
    g: &mut BlockWeights<T>,
) -> Result<Matrix<T>> {
    let act = cfg.activation;
    // FFN
    let (hidden, dhidden_to_pre): (Matrix<T>, _) = match &cache.gate_pre {
        Some(gp) => {
            let mut h = gp.map(|z| act.apply(z));
            for (hv, &u) in h.data_mut().iter_mut().zip(cache.up.data()) {
                *hv *= u;
            }
            (h, true)
        }
        None => (cache.up.map(|z| act.apply(z)), false),
    };
    add_into(&mut g.wd, &matmul_tn(&hidden, dout)?);
    let dhidden = matmul_nt(dout, &w.wd)?;
    let mut dffn_in;
    if dhidden_to_pre {
        let gp = cache.gate_pre.as_ref().expect("gated cache");
        let wg = w.wg.as_ref().expect("gated weights");
        let mut dgate = dhidden.clone();
        let mut dup = dhidden;
        for (((dgv, duv), &z), &u) in dgate
            .data_mut()
            .iter_mut()
            .zip(dup.data_mut())
            .zip(gp.data())
            .zip(cache.up.data())
        {
            let dh = *dgv;
            *dgv = dh * u * act.derivative(z);
            *duv = dh * act.apply(z);
        }
        add_into(&mut g.wu, &matmul_tn(&cache.ffn_in, &dup)?);
        add_into(
            g.wg.as_mut().expect("gated grads"),
            &matmul_tn(&cache.ffn_in, &dgate)?,
        );
        dffn_in = matmul_nt(&dup, &w.wu)?;
        add_into(&mut dffn_in, &matmul_nt(&dgate, wg)?);
    } else {
        let mut dup = dhidden;
        for (d, &z) in dup.data_mut().iter_mut().zip(cache.up.data()) {
            *d *= act.derivative(z);
        }
        add_into(&mut g.wu, &matmul_tn(&cache.ffn_in, &dup)?);
        dffn_in = matmul_nt(&dup, &w.wu)?;
    }
    let mut dmid = dout.clone();
    if cfg.prenorm {
        add_into(
            &mut dmid,
            &rms_backward(&dffn_in, &cache.ffn_in, &cache.ffn_inv_rms),
        );
    } else {
        add_into(&mut dmid, &dffn_in);
    }

    // MSA
    add_into(&mut g.wo, &matmul_tn(&cache.x_head_out, &dmid)?);
    let dxh = matmul_nt(&dmid, &w.wo)?;
    let hd = cfg.head_dim;
    let t_len = cache.x_in.rows();
    let hw = w.head_width();
    let scale = attention_scale::<T>(cfg);
    let mut dq = Matrix::zeros(t_len, hw);
    let mut dk = Matrix::zeros(t_len, hw);
    let mut dv = Matrix::zeros(t_len, hw);
    for (h, p) in cache.probs.iter().enumerate() {
        let c0 = h * hd;
        let doh = dxh.col_block(c0, hd);
        let vh = cache.v.col_block(c0, hd);
        let qh = cache.q.col_block(c0, hd);
        let kh = cache.k.col_block(c0, hd);
        dv.set_col_block(c0, &matmul_tn(p, &doh)?);
        let mut ds = matmul_nt(&doh, &vh)?;
        for t in 0..t_len {
            let prow = p.row(t);
            let dot = ds
                .row(t)
                .iter()
                .zip(prow)
                .fold(T::zero(), |s, (&a, &b)| s + a * b);
            for (d, &pv) in ds.row_mut(t).iter_mut().zip(prow) {
                *d = pv * (*d - dot) * scale;
            }
        }
        dq.set_col_block(c0, &matmul(&ds, &kh)?);
        dk.set_col_block(c0, &matmul_tn(&ds, &qh)?);
    }
    add_into(&mut g.wq, &matmul_tn(&cache.attn_in, &dq)?);
    add_into(&mut g.wk, &matmul_tn(&cache.attn_in, &dk)?);
    add_into(&mut g.wv, &matmul_tn(&cache.attn_in, &dv)?);
    let mut dattn = matmul_nt(&dq, &w.wq)?;
    add_into(&mut dattn, &matmul_nt(&dk, &w.wk)?);
    add_into(&mut dattn, &matmul_nt(&dv, &w.wv)?);
    let mut dx = dmid;
    if cfg.prenorm {
        add_into(
            &mut dx,
            &rms_backward(&dattn, &cache.attn_in, &cache.attn_inv_rms),
        );
    } else {
        add_into(&mut dx, &dattn);
    }
    Ok(dx)
}

/// Summed next-token NLL of one window and its gradient (unnormalised).
fn sequence_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    window: &[Token],
    grad_scale: T,
) -> Result<(f64, Gradients<T>)> {
    if window.len() < 2 {
        return Err(Error::Config(
            "training windows need at least two tokens".into(),
        ));
    }
    let inputs = &window[..window.len() - 1];
    let targets = &window[1..];
    check_tokens(&model.config, window)?;
    let cfg = &model.config;
    let none = ChannelMask::default();
    let mut caches = Vec::with_capacity(model.blocks.len());
    let mut x = embed(model, inputs);
    for w in &model.blocks {
        let c = block_forward_cached(&x, w, cfg, &none)?;
        x = c.x_out.clone();
        caches.push(c);
    }
    let (final_in, final_inv) = if cfg.prenorm {
        rms_normalize(&x)
    } else {
        (x.clone(), Vec::new())
    };
    let logits = matmul(&final_in, &model.lm_head)?;

    let mut loss = 0.0f64;
    let mut dlogits = logits;
    for (t, &target) in targets.iter().enumerate() {
        let row = dlogits.row_mut(t);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let p_target = row[target as usize] / sum;
        loss -= Scalar::to_f64(p_target).ln();
        for v in row.iter_mut() {
            *v = *v / sum * grad_scale;
        }
        row[target as usize] -= grad_scale;
    }

    let mut g = zeros_like(model);
    g.lm_head = matmul_tn(&final_in, &dlogits)?;
    let dfinal = matmul_nt(&dlogits, &model.lm_head)?;
    let mut dx = if cfg.prenorm {
        rms_backward(&dfinal, &final_in, &final_inv)
    } else {
        dfinal
    };
    for l in (0..model.blocks.len()).rev() {
        dx = block_backward(&caches[l], &model.blocks[l], cfg, &dx, &mut g.blocks[l])?;
    }
    for (t, &tok) in inputs.iter().enumerate() {
        let src = dx.row(t);
        for (o, &v) in g.embedding.row_mut(tok as usize).iter_mut().zip(src) {
            *o += v;
        }
        for (o, &v) in g.positions.row_mut(t).iter_mut().zip(src) {
            *o += v;
        }
    }
    Ok((loss, g))
}

/// Mean next-token cross-entropy over every prediction in `batch` and its
/// gradient. Each window predicts `window[1..]` from `window[..len-1]`.
pub fn loss_and_grads<T: Scalar>(
    model: &Model<T>,
    batch: &[Vec<Token>],
) -> Result<(f64, Gradients<T>)> {
    if !model.config.causal {
        return Err(Error::Config("training requires a causal model".into()));
    }
    if batch.is_empty() {
        return Err(Error::Empty("loss_and_grads"));
    }
    let predictions: usize = batch.iter().map(|w| w.len().saturating_sub(1)).sum();
    let scale = T::lit(1.0 / predictions.max(1) as f64);
    let per_seq: Vec<(f64, Gradients<T>)> = batch
        .par_iter()
        .map(|w| sequence_loss_and_grads(model, w, scale))
        .collect::<Result<_>>()?;
    let mut iter = per_seq.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        accumulate(&mut grads, &g);
    }
    Ok((loss / predictions as f64, grads))
}

pub fn global_norm<T: Scalar>(g: &Gradients<T>) -> f64 {
    params(g)
        .iter()
        .flat_map(|m| m.data().iter())
        .map(|v| {
            let x = Scalar::to_f64(*v);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

struct Adam {
    m: Model<f32>,
    v: Model<f32>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        Self {
            m: zeros_like(model),
            v: zeros_like(model),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &Gradients<f32>, clip: f32, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let bc1 = 1.0 - (cfg.adam_beta1 as f32).powi(self.t);
        let bc2 = 1.0 - (cfg.adam_beta2 as f32).powi(self.t);
        let lr = cfg.learning_rate as f32;
        let eps = cfg.adam_eps as f32;
        for (((p, g), m), v) in params_mut(model)
            .into_iter()
            .zip(params(grads))
            .zip(params_mut(&mut self.m))
            .zip(params_mut(&mut self.v))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let update = lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
                *pv -= update;
            }
        }
    }
}

/// Draws one batch of `seq_len + 1`-token windows.
pub fn sample_batch(tokens: &[Token], cfg: &TrainConfig, r: &mut impl Rng) -> Vec<Vec<Token>> {
    let span = cfg.seq_len + 1;
    let max_start = tokens.len() - span;
    (0..cfg.batch_size)
        .map(|_| {
            let s = r.gen_range(0..=max_start);
            tokens[s..s + span].to_vec()
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
}

/// Plain Adam with bias correction and global-norm clipping. `on_step` sees
/// each log row as it is produced.
pub fn train_with(
    mut model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate(&model.config)?;
    model.validate()?;
    if !model.config.causal {
        return Err(Error::Config("training requires a causal model".into()));
    }
    if corpus.len() < cfg.seq_len + 1 {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            required: cfg.seq_len + 1,
        });
    }
    let tokens = tokenize(corpus)?;
    let mut r = rng::stream(cfg.seed, "train-batches");
    let mut adam = Adam::new(&model);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(&tokens, cfg, &mut r);
        let (loss, grads) = loss_and_grads(&model, &batch)?;
        let grad_norm = global_norm(&grads);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let clip = if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
            (cfg.grad_clip / grad_norm) as f32
        } else {
            1.0
        };
        if cfg.learning_rate > 0.0 {
            adam.step(&mut model, &grads, clip, cfg);
        }
        let row = StepLog {
            step,
            loss,
            grad_norm,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(model: Model, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, corpus, cfg, |_| {})
}

/// Finite-difference comparison for one parameter family.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyCheck {
    pub family: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

/// Parameter families as (name, matrix accessor index into `params`).
fn families(m: &Model<f64>) -> Vec<(String, Vec<usize>)> {
    let mut names: Vec<String> = vec!["embedding".into(), "positions".into()];
    for b in &m.blocks {
        names.extend(["wq", "wk", "wv", "wo", "wu", "wd"].map(String::from));
        if b.wg.is_some() {
            names.push("wg".into());
        }
    }
    names.push("lm_head".into());
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, n) in names.into_iter().enumerate() {
        match out.iter_mut().find(|(f, _)| *f == n) {
            Some((_, idx)) => idx.push(i),
            None => out.push((n, vec![i])),
        }
    }
    out
}

/// Relative error with a small absolute floor so that coordinates whose
/// true gradient is ~0 do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients against central differences with step `h`
/// at `per_family` coordinates per parameter family, entirely in f64.
/// Embedding and position coordinates are drawn from rows the batch uses.
pub fn gradient_check(
    model: &Model<f64>,
    batch: &[Vec<Token>],
    per_family: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<FamilyCheck>> {
    let (_, grads) = loss_and_grads(model, batch)?;
    let grad_params = params(&grads);
    let mut r = rng::stream(seed, "gradient-check");
    let mut used_tokens: Vec<usize> = batch
        .iter()
        .flat_map(|w| w[..w.len() - 1].iter().map(|&t| t as usize))
        .collect();
    used_tokens.sort_unstable();
    used_tokens.dedup();
    let max_t = batch.iter().map(|w| w.len() - 1).max().unwrap_or(1);

    let mut out = Vec::new();
    for (family, indices) in families(model) {
        let mut coords: Vec<(usize, usize)> = Vec::new();
        for &pi in &indices {
            let m = grad_params[pi];
            let rows: Vec<usize> = match family.as_str() {
                "embedding" => used_tokens.clone(),
                "positions" => (0..max_t).collect(),
                _ => (0..m.rows()).collect(),
            };
            for &row in &rows {
                for col in 0..m.cols() {
                    coords.push((pi, row * m.cols() + col));
                }
            }
        }
        coords.shuffle(&mut r);
        coords.truncate(per_family);
        let mut worst = 0.0f64;
        for &(pi, k) in &coords {
            let analytic = grad_params[pi].data()[k];
            let mut plus = model.clone();
            params_mut(&mut plus)[pi].data_mut()[k] += h;
            let mut minus = model.clone();
            params_mut(&mut minus)[pi].data_mut()[k] -= h;
            let lp = loss_and_grads(&plus, batch)?.0;
            let lm = loss_and_grads(&minus, batch)?.0;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(analytic, numeric));
        }
        out.push(FamilyCheck {
            family,
            coordinates: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ActivationKind;
    use crate::textgen::synthetic_corpus;

    fn small(act: ActivationKind, prenorm: bool, gated: bool) -> ModelConfig {
        ModelConfig::new(8, 2, 16, 1, act)
            .unwrap()
            .with_prenorm(prenorm)
            .with_gated(gated)
    }

    fn batch() -> Vec<Vec<Token>> {
        vec![
            b"the cat sat.".iter().map(|&b| b as Token).collect(),
            b"a dog ran!".iter().map(|&b| b as Token).collect(),
        ]
    }

    #[test]
    fn uniform_model_loss_is_ln_vocab() {
        let m = Model::<f32>::zeros(&small(ActivationKind::Relu, true, false)).unwrap();
        let (loss, g) = loss_and_grads(&m, &batch()).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-5, "{loss}");
        // zero hidden states: only the head's bias-free path carries no gradient
        assert!(g.embedding.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let m = Model::<f32>::init(&small(ActivationKind::Gelu, true, false), 1).unwrap();
        let (_, g) = loss_and_grads(&m, &batch()).unwrap();
        assert!(g.embedding.row(b'z' as usize).iter().all(|&v| v == 0.0));
        assert!(g.embedding.row(b't' as usize).iter().any(|&v| v != 0.0));
        // the final byte of each window is only a target
        assert!(g.embedding.row(b'!' as usize).iter().all(|&v| v == 0.0));
        assert!(g.positions.row(11).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_causal_is_rejected() {
        let c = small(ActivationKind::Relu, false, false).with_causal(false);
        let m = Model::<f32>::init(&c, 1).unwrap();
        assert!(loss_and_grads(&m, &batch()).is_err());
    }

    fn check_all(cfg: &ModelConfig) {
        let m = Model::<f32>::init(cfg, 7).unwrap().cast::<f64>();
        let report = gradient_check(&m, &batch(), 50, 1e-4, 3).unwrap();
        for f in &report {
            assert!(f.coordinates > 0);
            assert!(f.max_rel_error <= 1e-3, "{cfg:?} {f:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_all(&small(ActivationKind::Gelu, false, false));
        check_all(&small(ActivationKind::Gelu, true, false));
        check_all(&small(ActivationKind::Silu, true, true));
    }

    #[test]
    fn two_block_gradients_match() {
        let c = ModelConfig::new(8, 2, 8, 2, ActivationKind::Silu)
            .unwrap()
            .with_prenorm(true);
        check_all(&c);
    }

    #[test]
    fn config_validation() {
        let c = small(ActivationKind::Relu, true, false);
        let ok = TrainConfig::default();
        assert!(ok.validate(&c).is_ok());
        assert!(TrainConfig {
            steps: 0,
            ..ok.clone()
        }
        .validate(&c)
        .is_err());
        assert!(TrainConfig {
            learning_rate: -1.0,
            ..ok.clone()
        }
        .validate(&c)
        .is_err());
        assert!(TrainConfig {
            learning_rate: f64::NAN,
            ..ok.clone()
        }
        .validate(&c)
        .is_err());
        assert!(TrainConfig {
            adam_beta1: 1.0,
            ..ok.clone()
        }
        .validate(&c)
        .is_err());
        assert!(TrainConfig { seq_len: 600, ..ok }.validate(&c).is_err());
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 60,
            batch_size: 4,
            seq_len: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let c = small(ActivationKind::Gelu, true, false);
        let m = Model::init(&c, 2).unwrap();
        let corpus = synthetic_corpus(1, 20_000);
        let out = train(
            m.clone(),
            &corpus,
            &TrainConfig {
                learning_rate: 0.0,
                steps: 3,
                ..quick()
            },
        )
        .unwrap();
        assert_eq!(out.model, m);
    }

    #[test]
    fn loss_falls_and_training_is_deterministic() {
        let c = ModelConfig::new(16, 2, 32, 1, ActivationKind::Gelu)
            .unwrap()
            .with_prenorm(true);
        let corpus = synthetic_corpus(1, 50_000);
        let a = train(Model::init(&c, 2).unwrap(), &corpus, &quick()).unwrap();
        assert!(
            a.log[50].loss < a.log[0].loss,
            "{} vs {}",
            a.log[50].loss,
            a.log[0].loss
        );
        let b = train(Model::init(&c, 2).unwrap(), &corpus, &quick()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn divergence_reports_step() {
        let c = small(ActivationKind::Gelu, true, false);
        let mut m = Model::init(&c, 2).unwrap();
        m.lm_head.set(0, 0, f32::NAN);
        let corpus = synthetic_corpus(1, 5_000);
        match train(m, &corpus, &quick()) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn log_csv_has_header() {
        let log = [StepLog {
            step: 0,
            loss: 1.5,
            grad_norm: 0.25,
        }];
        let mut buf = Vec::new();
        write_log_csv(&log, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss,grad_norm\n0,1.5,0.25\n"
        );
    }
}
