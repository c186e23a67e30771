//! Next-item cross-entropy training with hand-written backpropagation and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Dropout, ForwardCache, LayerNorm, Linear, RecModel};
use super::{ItemSequenceDataset, RecError};
use crate::linalg::Mat;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub max_len: usize,
    /// Dropout rate on the embedding input and on both residual branches.
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            max_len: 50,
            dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RecError> {
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(RecError::InvalidConfig(
                "batch_size and max_len must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RecError::InvalidConfig(format!(
                "learning rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RecError::InvalidConfig(format!(
                "dropout {} must lie in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-item cross-entropy over the training prefixes before any update.
    pub initial_loss: f64,
    /// Running mean loss over each epoch's batches.
    pub epoch_losses: Vec<f64>,
    /// Mean loss of the returned (storage-precision) model.
    pub final_loss: f64,
}

/// Trains on `prefixes` (the training part of a leave-last-two split).
/// Returns the model rounded to storage precision.
pub fn train(
    model: &RecModel,
    ds: &ItemSequenceDataset,
    prefixes: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(RecModel, TrainReport), RecError> {
    train_with_callback(model, ds, prefixes, cfg, &mut |_, _, _| {})
}

/// As [`train`], calling `on_epoch(epoch, model, mean_loss)` after every epoch.
pub fn train_with_callback(
    model: &RecModel,
    ds: &ItemSequenceDataset,
    prefixes: &[Vec<usize>],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &RecModel, f64),
) -> Result<(RecModel, TrainReport), RecError> {
    cfg.validate()?;
    if model.config.num_items != ds.num_items {
        return Err(RecError::ShapeMismatch(format!(
            "model has {} items, dataset {}",
            model.config.num_items, ds.num_items
        )));
    }
    if let Some(id) = model
        .layer_ids()
        .into_iter()
        .find(|&id| model.linear(id).is_factored())
    {
        return Err(RecError::NotTrainable(id));
    }
    let window = cfg.max_len.min(model.config.max_len);
    let seqs: Vec<&[usize]> = prefixes
        .iter()
        .filter(|p| p.len() >= 2)
        .map(|p| &p[p.len().saturating_sub(window)..])
        .collect();
    if seqs.is_empty() {
        return Err(RecError::InvalidConfig(
            "no training prefix has two or more items".into(),
        ));
    }

    let mut model = model.clone();
    let initial_loss = dataset_loss(&model, &seqs);
    let mut grads = model.zeros_like();
    let mut adam = Adam::new(&mut model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    drop_rng.set_stream(1);
    let mut dropout = Some(Dropout {
        rate: cfg.dropout,
        rng: drop_rng,
    });
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut target_sum = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.for_each_tensor_mut(&mut |t| t.fill(0.0));
            let targets: usize = batch.iter().map(|&i| seqs[i].len() - 1).sum();
            let weight = 1.0 / targets as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += sequence_backward(&model, seqs[i], weight, &mut grads, &mut dropout);
            }
            if !batch_loss.is_finite() {
                return Err(RecError::DivergenceDetected {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            target_sum += targets;
            adam.step(&mut model, &mut grads, cfg.learning_rate);
        }
        let mean = loss_sum / target_sum as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        epoch_losses.push(mean);
        on_epoch(epoch, &model, mean);
    }

    let model = model.to_storage_precision();
    let final_loss = dataset_loss(&model, &seqs);
    if !final_loss.is_finite() {
        return Err(RecError::DivergenceDetected {
            epoch: cfg.epochs,
            batch: 0,
            loss: final_loss,
        });
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
        },
    ))
}

/// Mean next-item cross-entropy of `model` over the given sequences.
pub fn dataset_loss(model: &RecModel, seqs: &[&[usize]]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let f = model.forward(s, None, &mut |_, _| {});
        for t in 0..s.len() - 1 {
            let logits = model.head.matvec(f.row(t));
            total += cross_entropy(&logits, s[t + 1]).0;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Returns `(loss, softmax)` for one position.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + mx - logits[target];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

fn layer_norm_backward(
    ln: &LayerNorm,
    grad_ln: &mut LayerNorm,
    dy: &Mat,
    xhat: &Mat,
    rstd: &[f64],
) -> Mat {
    let d = dy.cols();
    let mut dx = Mat::zeros(dy.rows(), d);
    for t in 0..dy.rows() {
        let dyr = dy.row(t);
        let xh = xhat.row(t);
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            grad_ln.gamma[j] += dyr[j] * xh[j];
            grad_ln.beta[j] += dyr[j];
            let dxh = dyr[j] * ln.gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let out = dx.row_mut(t);
        for j in 0..d {
            let dxh = dyr[j] * ln.gamma[j];
            out[j] = rstd[t] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn dense(lin: &Linear) -> &Mat {
    match lin {
        Linear::Dense(w) => w,
        Linear::Factored(_) => unreachable!("training requires dense layers"),
    }
}

fn dense_mut(lin: &mut Linear) -> &mut Mat {
    match lin {
        Linear::Dense(w) => w,
        Linear::Factored(_) => unreachable!("training requires dense layers"),
    }
}

/// `grad += dyᵀ · x` for a layer `y = x · Wᵀ`; returns `dx = dy · W`.
fn linear_backward(w: &Mat, grad_w: &mut Mat, dy: &Mat, x: &Mat) -> Mat {
    let gw = dy.transpose().matmul(x);
    for (g, v) in grad_w.data_mut().iter_mut().zip(gw.data()) {
        *g += v;
    }
    dy.matmul(w)
}

fn masked(dy: &Mat, mask: &Option<Mat>) -> Mat {
    let mut out = dy.clone();
    if let Some(m) = mask {
        for (v, k) in out.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
    out
}

fn add_into(acc: &mut Mat, other: &Mat) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Forward + backward over one sequence; gradients of `weight · Σ_t CE_t`
/// are accumulated into `grads`. Returns the unweighted loss sum.
pub(crate) fn sequence_backward(
    model: &RecModel,
    items: &[usize],
    weight: f64,
    grads: &mut RecModel,
    dropout: &mut Option<Dropout>,
) -> f64 {
    let cfg = &model.config;
    let t_len = items.len();
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut cache = ForwardCache {
        dropout: dropout.take(),
        ..ForwardCache::default()
    };
    let f = model.forward(items, Some(&mut cache), &mut |_, _| {});
    *dropout = cache.dropout.take();

    let mut loss = 0.0;
    let mut dlogits = Mat::zeros(t_len, cfg.num_items);
    for t in 0..t_len - 1 {
        let logits = model.head.matvec(f.row(t));
        let (l, mut p) = cross_entropy(&logits, items[t + 1]);
        loss += l;
        p[items[t + 1]] -= 1.0;
        for (dst, v) in dlogits.row_mut(t).iter_mut().zip(&p) {
            *dst = v * weight;
        }
    }
    add_into(&mut grads.head, &dlogits.transpose().matmul(&f));
    let df = dlogits.matmul(&model.head);
    let mut dx = layer_norm_backward(
        &model.ln_f,
        &mut grads.ln_f,
        &df,
        cache.xhat_f.as_ref().expect("cache filled"),
        &cache.rstd_f,
    );

    for (bi, block) in model.blocks.iter().enumerate().rev() {
        let c = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // MLP branch
        let dg = linear_backward(
            dense(&block.down),
            dense_mut(&mut gb.down),
            &masked(&dx, &c.ffn_mask),
            &c.g,
        );
        let mut du = dg;
        for (g, u) in du.data_mut().iter_mut().zip(c.u.data()) {
            if *u <= 0.0 {
                *g = 0.0;
            }
        }
        let dm = linear_backward(dense(&block.up), dense_mut(&mut gb.up), &du, &c.m);
        let dx1_ln = layer_norm_backward(&block.ln2, &mut gb.ln2, &dm, &c.xhat2, &c.rstd2);
        add_into(&mut dx, &dx1_ln);

        // attention branch
        let dctx = linear_backward(
            dense(&block.output),
            dense_mut(&mut gb.output),
            &masked(&dx, &c.attn_mask),
            &c.ctx,
        );
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        for h in 0..cfg.num_heads {
            let off = h * dh;
            let p = &c.probs[h];
            for t in 0..t_len {
                let dct = &dctx.row(t)[off..off + dh];
                // dP[t, s] = dctx_t · v_s, then softmax backward
                let mut dp = vec![0.0; t + 1];
                let mut dot_pdp = 0.0;
                for s in 0..=t {
                    dp[s] = crate::linalg::dot(dct, &c.v.row(s)[off..off + dh]);
                    dot_pdp += p[(t, s)] * dp[s];
                    let w = p[(t, s)];
                    let dvs = &mut dv.row_mut(s)[off..off + dh];
                    for (g, x) in dvs.iter_mut().zip(dct) {
                        *g += w * x;
                    }
                }
                for s in 0..=t {
                    let ds = p[(t, s)] * (dp[s] - dot_pdp) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[(t, off + j)] += ds * c.k[(s, off + j)];
                        dk[(s, off + j)] += ds * c.q[(t, off + j)];
                    }
                }
            }
        }
        let mut da = linear_backward(dense(&block.query), dense_mut(&mut gb.query), &dq, &c.a);
        add_into(
            &mut da,
            &linear_backward(dense(&block.key), dense_mut(&mut gb.key), &dk, &c.a),
        );
        add_into(
            &mut da,
            &linear_backward(dense(&block.value), dense_mut(&mut gb.value), &dv, &c.a),
        );
        let dx_ln = layer_norm_backward(&block.ln1, &mut gb.ln1, &da, &c.xhat1, &c.rstd1);
        add_into(&mut dx, &dx_ln);
    }

    let dx = masked(&dx, &cache.emb_mask);
    for (t, &item) in items.iter().enumerate() {
        for j in 0..d {
            grads.item_emb[(item, j)] += dx[(t, j)];
            grads.pos_emb[(t, j)] += dx[(t, j)];
        }
    }
    loss
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(model: &mut RecModel) -> Self {
        let mut m = Vec::new();
        model.for_each_tensor_mut(&mut |t| m.push(vec![0.0; t.len()]));
        let v = m.clone();
        Self { m, v, step: 0 }
    }

    fn step(&mut self, model: &mut RecModel, grads: &mut RecModel, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        let mut grad_tensors: Vec<Vec<f64>> = Vec::with_capacity(self.m.len());
        grads.for_each_tensor_mut(&mut |g| grad_tensors.push(g.to_vec()));
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.for_each_tensor_mut(&mut |p| {
            let g = &grad_tensors[idx];
            let m = &mut ms[idx];
            let v = &mut vs[idx];
            for j in 0..p.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS));
            }
            idx += 1;
        });
    }
}
