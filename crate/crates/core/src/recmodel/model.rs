//! Decoder-only next-item transformer.
//!
//! Pre-norm blocks with causal multi-head attention and a ReLU MLP. Every
//! linear projection inside a block sits in a [`Linear`] slot that is either
//! a dense weight or a factor pair `(a, b)` applied as `a·(b·x)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RecError;
use crate::linalg::Mat;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_items: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
}

impl ModelConfig {
    /// 2 blocks, width 64, 4 heads, context 50, MLP width 4×.
    pub fn toy(num_items: usize) -> Self {
        Self::with_width(num_items, 64)
    }

    pub fn with_width(num_items: usize, embed_dim: usize) -> Self {
        Self {
            num_items,
            embed_dim,
            num_layers: 2,
            num_heads: 4,
            max_len: 50,
            ffn_dim: 4 * embed_dim,
        }
    }

    pub fn validate(&self) -> Result<(), RecError> {
        let bad = |msg: String| Err(RecError::InvalidConfig(msg));
        if self.num_items == 0
            || self.embed_dim == 0
            || self.num_heads == 0
            || self.max_len == 0
            || self.ffn_dim == 0
        {
            return bad(format!("all model dimensions must be positive: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// `(out, in)` shape of a linear slot.
    pub fn linear_shape(&self, slot: LinearSlot) -> (usize, usize) {
        let d = self.embed_dim;
        match slot {
            LinearSlot::Query | LinearSlot::Key | LinearSlot::Value | LinearSlot::Output => (d, d),
            LinearSlot::Up => (self.ffn_dim, d),
            LinearSlot::Down => (d, self.ffn_dim),
        }
    }
}

/// Position of a compressible projection inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearSlot {
    Query,
    Key,
    Value,
    Output,
    Up,
    Down,
}

impl LinearSlot {
    /// Forward (input-to-output) order within a block.
    pub const ALL: [LinearSlot; 6] = [
        LinearSlot::Query,
        LinearSlot::Key,
        LinearSlot::Value,
        LinearSlot::Output,
        LinearSlot::Up,
        LinearSlot::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LinearSlot::Query => "q",
            LinearSlot::Key => "k",
            LinearSlot::Value => "v",
            LinearSlot::Output => "o",
            LinearSlot::Up => "up",
            LinearSlot::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub slot: LinearSlot,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block{}.{}", self.block, self.slot.name())
    }
}

impl FromStr for LayerId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (block, slot) = s
            .strip_prefix("block")
            .and_then(|r| r.split_once('.'))
            .ok_or_else(|| format!("bad layer id {s:?}"))?;
        let block = block
            .parse()
            .map_err(|_| format!("bad block index in {s:?}"))?;
        let slot = LinearSlot::ALL
            .into_iter()
            .find(|sl| sl.name() == slot)
            .ok_or_else(|| format!("bad slot in {s:?}"))?;
        Ok(LayerId { block, slot })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Low-rank replacement `W ≈ a·b` with `a: M×r`, `b: r×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub a: Mat,
    pub b: Mat,
}

impl FactorPair {
    pub fn new(a: Mat, b: Mat) -> Result<Self, RecError> {
        if a.cols() != b.rows() {
            return Err(RecError::ShapeMismatch(format!(
                "factor pair {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Linear {
    Dense(Mat),
    Factored(FactorPair),
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Factored(f) => f.a.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Factored(f) => f.b.cols(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows() * w.cols(),
            Linear::Factored(f) => f.rank() * (f.a.rows() + f.b.cols()),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        match self {
            Linear::Dense(_) => None,
            Linear::Factored(f) => Some(f.rank()),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(self, Linear::Factored(_))
    }

    /// Applies the layer to the rows of `x` (tokens × in) giving tokens × out.
    /// Factored layers go through the rank-r bottleneck.
    pub fn apply(&self, x: &Mat) -> Mat {
        match self {
            Linear::Dense(w) => x.matmul_t(w),
            Linear::Factored(f) => x.matmul_t(&f.b).matmul_t(&f.a),
        }
    }

    /// The effective dense weight; only for analysis, never used in forward.
    pub fn effective_weight(&self) -> Mat {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Factored(f) => f.a.matmul(&f.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    /// Returns `(y, xhat, rstd)`.
    pub(crate) fn forward(&self, x: &Mat) -> (Mat, Mat, Vec<f64>) {
        let d = x.cols();
        let mut y = Mat::zeros(x.rows(), d);
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut rstds = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let row = x.row(t);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            rstds.push(rstd);
            let xh = xhat.row_mut(t);
            for j in 0..d {
                xh[j] = (row[j] - mean) * rstd;
            }
            let yr = y.row_mut(t);
            for j in 0..d {
                yr[j] = self.gamma[j] * xhat[(t, j)] + self.beta[j];
            }
        }
        (y, xhat, rstds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln2: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl Block {
    pub fn linear(&self, slot: LinearSlot) -> &Linear {
        match slot {
            LinearSlot::Query => &self.query,
            LinearSlot::Key => &self.key,
            LinearSlot::Value => &self.value,
            LinearSlot::Output => &self.output,
            LinearSlot::Up => &self.up,
            LinearSlot::Down => &self.down,
        }
    }

    pub fn linear_mut(&mut self, slot: LinearSlot) -> &mut Linear {
        match slot {
            LinearSlot::Query => &mut self.query,
            LinearSlot::Key => &mut self.key,
            LinearSlot::Value => &mut self.value,
            LinearSlot::Output => &mut self.output,
            LinearSlot::Up => &mut self.up,
            LinearSlot::Down => &mut self.down,
        }
    }
}

/// Activations kept for backpropagation of one block.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub a: Mat,
    pub xhat1: Mat,
    pub rstd1: Vec<f64>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Row-softmax attention weights per head, each T×T.
    pub probs: Vec<Mat>,
    pub ctx: Mat,
    pub m: Mat,
    pub xhat2: Mat,
    pub rstd2: Vec<f64>,
    pub u: Mat,
    pub g: Mat,
    /// Inverted-dropout masks on the attention and MLP branch outputs.
    pub attn_mask: Option<Mat>,
    pub ffn_mask: Option<Mat>,
}

/// Inverted dropout: kept entries are scaled by `1 / (1 − rate)`.
#[derive(Debug, Clone)]
pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, rows: usize, cols: usize) -> Mat {
        let keep = 1.0 / (1.0 - self.rate);
        Mat::from_fn(rows, cols, |_, _| {
            if self.rng.gen::<f64>() < self.rate {
                0.0
            } else {
                keep
            }
        })
    }
}

fn draw_mask(cache: &mut Option<&mut ForwardCache>, rows: usize, cols: usize) -> Option<Mat> {
    cache
        .as_deref_mut()
        .and_then(|c| c.dropout.as_mut())
        .filter(|d| d.rate > 0.0)
        .map(|d| d.mask(rows, cols))
}

fn apply_mask(x: &mut Mat, mask: &Option<Mat>) {
    if let Some(m) = mask {
        for (v, k) in x.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub xhat_f: Option<Mat>,
    pub rstd_f: Vec<f64>,
    pub dropout: Option<Dropout>,
    pub emb_mask: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecModel {
    pub config: ModelConfig,
    pub item_emb: Mat,
    pub pos_emb: Mat,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Output head, `num_items × embed_dim`; scores are `head · h`.
    pub head: Mat,
}

impl RecModel {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, RecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Mat::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let item_emb = gauss(config.num_items, d, 1.0);
        let pos_emb = gauss(config.max_len, d, 0.1);
        let out_scale = 1.0 / (2.0 * config.num_layers.max(1) as f64).sqrt();
        let blocks = (0..config.num_layers)
            .map(|_| {
                let mut lin = |slot: LinearSlot, extra: f64| {
                    let (m, n) = config.linear_shape(slot);
                    Linear::Dense(gauss(m, n, extra / (n as f64).sqrt()))
                };
                Block {
                    ln1: LayerNorm::new(d),
                    query: lin(LinearSlot::Query, 1.0),
                    key: lin(LinearSlot::Key, 1.0),
                    value: lin(LinearSlot::Value, 1.0),
                    output: lin(LinearSlot::Output, out_scale),
                    ln2: LayerNorm::new(d),
                    up: lin(LinearSlot::Up, 1.0),
                    down: lin(LinearSlot::Down, out_scale),
                }
            })
            .collect();
        let head = gauss(config.num_items, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            config,
            item_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head,
        })
    }

    /// Compressible layers in forward order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        (0..self.blocks.len())
            .flat_map(|block| {
                LinearSlot::ALL
                    .into_iter()
                    .map(move |slot| LayerId { block, slot })
            })
            .collect()
    }

    pub fn linear(&self, id: LayerId) -> &Linear {
        self.blocks[id.block].linear(id.slot)
    }

    /// Replaces one projection; shapes must match the slot.
    pub fn set_linear(&mut self, id: LayerId, lin: Linear) -> Result<(), RecError> {
        let expected = self.config.linear_shape(id.slot);
        if (lin.out_dim(), lin.in_dim()) != expected {
            return Err(RecError::ShapeMismatch(format!(
                "{id}: expected {expected:?}, got {:?}",
                (lin.out_dim(), lin.in_dim())
            )));
        }
        *self.blocks[id.block].linear_mut(id.slot) = lin;
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        self.layer_ids()
            .iter()
            .all(|&id| !self.linear(id).is_factored())
    }

    /// Parameters held by the compressible projections.
    pub fn linear_param_count(&self) -> usize {
        self.layer_ids()
            .iter()
            .map(|&id| self.linear(id).param_count())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        let ln = |l: &LayerNorm| l.gamma.len() + l.beta.len();
        self.item_emb.data().len()
            + self.pos_emb.data().len()
            + self.head.data().len()
            + ln(&self.ln_f)
            + self
                .blocks
                .iter()
                .map(|b| ln(&b.ln1) + ln(&b.ln2))
                .sum::<usize>()
            + self.linear_param_count()
    }

    fn check_items(&self, items: &[usize]) -> Result<(), RecError> {
        if items.is_empty() {
            return Err(RecError::EmptyContext);
        }
        if let Some(&item) = items.iter().find(|&&i| i >= self.config.num_items) {
            return Err(RecError::InvalidItemId {
                item,
                num_items: self.config.num_items,
            });
        }
        Ok(())
    }

    /// The most recent `max_len` items of a context.
    pub fn window<'a>(&self, context: &'a [usize]) -> &'a [usize] {
        &context[context.len().saturating_sub(self.config.max_len)..]
    }

    /// Final normalized hidden states (T × embed_dim) for `items`, which must
    /// already fit in `max_len`. `tap` sees the input of every linear
    /// projection, tokens as rows, just before it is applied.
    pub(crate) fn forward(
        &self,
        items: &[usize],
        mut cache: Option<&mut ForwardCache>,
        tap: &mut dyn FnMut(LayerId, &Mat),
    ) -> Mat {
        let cfg = &self.config;
        let t_len = items.len();
        debug_assert!(t_len <= cfg.max_len);
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = Mat::from_fn(t_len, d, |t, j| {
            self.item_emb[(items[t], j)] + self.pos_emb[(t, j)]
        });
        let emb_mask = draw_mask(&mut cache, t_len, d);
        apply_mask(&mut x, &emb_mask);
        for (bi, block) in self.blocks.iter().enumerate() {
            let id = |slot| LayerId { block: bi, slot };
            let (a, xhat1, rstd1) = block.ln1.forward(&x);
            tap(id(LinearSlot::Query), &a);
            let q = block.query.apply(&a);
            tap(id(LinearSlot::Key), &a);
            let k = block.key.apply(&a);
            tap(id(LinearSlot::Value), &a);
            let v = block.value.apply(&a);

            let mut ctx = Mat::zeros(t_len, d);
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let off = h * dh;
                let mut p = Mat::zeros(t_len, t_len);
                for t in 0..t_len {
                    let qt = &q.row(t)[off..off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for s in 0..=t {
                        let sc = crate::linalg::dot(qt, &k.row(s)[off..off + dh]) * scale;
                        p[(t, s)] = sc;
                        mx = mx.max(sc);
                    }
                    let mut sum = 0.0;
                    for s in 0..=t {
                        let e = (p[(t, s)] - mx).exp();
                        p[(t, s)] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    let crow = &mut ctx.row_mut(t)[off..off + dh];
                    for s in 0..=t {
                        let w = p[(t, s)] * inv;
                        p[(t, s)] = w;
                        for (c, vv) in crow.iter_mut().zip(&v.row(s)[off..off + dh]) {
                            *c += w * vv;
                        }
                    }
                }
                probs.push(p);
            }

            tap(id(LinearSlot::Output), &ctx);
            let mut o = block.output.apply(&ctx);
            let attn_mask = draw_mask(&mut cache, t_len, d);
            apply_mask(&mut o, &attn_mask);
            let x1 = x.add(&o);
            let (m, xhat2, rstd2) = block.ln2.forward(&x1);
            tap(id(LinearSlot::Up), &m);
            let u = block.up.apply(&m);
            let mut g = u.clone();
            for val in g.data_mut() {
                *val = val.max(0.0);
            }
            tap(id(LinearSlot::Down), &g);
            let mut dn = block.down.apply(&g);
            let ffn_mask = draw_mask(&mut cache, t_len, d);
            apply_mask(&mut dn, &ffn_mask);
            x = x1.add(&dn);

            if let Some(c) = cache.as_deref_mut() {
                c.blocks.push(BlockCache {
                    a,
                    xhat1,
                    rstd1,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    m,
                    xhat2,
                    rstd2,
                    u,
                    g,
                    attn_mask,
                    ffn_mask,
                });
            }
        }
        let (f, xhat_f, rstd_f) = self.ln_f.forward(&x);
        if let Some(c) = cache {
            c.emb_mask = emb_mask;
            c.xhat_f = Some(xhat_f);
            c.rstd_f = rstd_f;
        }
        f
    }

    /// Runs the model on a context and hands every linear layer's input to `tap`.
    pub fn trace_activations(
        &self,
        context: &[usize],
        tap: &mut dyn FnMut(LayerId, &Mat),
    ) -> Result<(), RecError> {
        self.check_items(context)?;
        self.forward(self.window(context), None, tap);
        Ok(())
    }

    /// Unmasked next-item scores for every item, higher is likelier.
    pub fn score_next(&self, context: &[usize]) -> Result<Vec<f64>, RecError> {
        self.check_items(context)?;
        let f = self.forward(self.window(context), None, &mut |_, _| {});
        Ok(self.head.matvec(f.row(f.rows() - 1)))
    }

    /// Copy with every parameter rounded to `f32`, the on-disk precision.
    pub fn to_storage_precision(&self) -> RecModel {
        let mut out = self.clone();
        out.for_each_tensor_mut(&mut |t| {
            for v in t {
                *v = *v as f32 as f64;
            }
        });
        out
    }

    pub fn is_storage_precision(&self) -> bool {
        let mut ok = true;
        let mut probe = self.clone();
        probe.for_each_tensor_mut(&mut |t| ok &= t.iter().all(|&v| (v as f32 as f64) == v));
        ok
    }

    /// Visits every parameter tensor (including factor pairs) in a fixed order.
    pub(crate) fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.item_emb.data_mut());
        f(self.pos_emb.data_mut());
        for b in &mut self.blocks {
            f(&mut b.ln1.gamma);
            f(&mut b.ln1.beta);
            for slot in LinearSlot::ALL {
                match b.linear_mut(slot) {
                    Linear::Dense(w) => f(w.data_mut()),
                    Linear::Factored(p) => {
                        f(p.a.data_mut());
                        f(p.b.data_mut());
                    }
                }
            }
            f(&mut b.ln2.gamma);
            f(&mut b.ln2.beta);
        }
        f(&mut self.ln_f.gamma);
        f(&mut self.ln_f.beta);
        f(self.head.data_mut());
    }

    /// Same-shaped model with every parameter set to zero.
    pub(crate) fn zeros_like(&self) -> RecModel {
        let mut z = self.clone();
        z.for_each_tensor_mut(&mut |t| t.fill(0.0));
        z
    }

    /// Short description of the compression state, e.g. `dense` or
    /// `factored[12/12 layers, 49.9% linear params]`.
    pub fn tag(&self) -> String {
        let ids = self.layer_ids();
        let factored = ids
            .iter()
            .filter(|&&id| self.linear(id).is_factored())
            .count();
        if factored == 0 {
            return "dense".to_string();
        }
        let dense_params: usize = ids
            .iter()
            .map(|&id| {
                let (m, n) = self.config.linear_shape(id.slot);
                m * n
            })
            .sum();
        format!(
            "factored[{factored}/{} layers, {:.1}% linear params]",
            ids.len(),
            100.0 * self.linear_param_count() as f64 / dense_params as f64
        )
    }
}
