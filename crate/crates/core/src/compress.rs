//! Whitened truncated-SVD compression of linear layers, with an optional
//! progressive refit of the left factor.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::{
    collect_activations, collect_for_layers, whiten_layer, CalibError, WhiteningFactor,
    DEFAULT_EPS_REL,
};
use crate::linalg::{
    frob_norm, least_squares_left, least_squares_left_gram, svd_full, LinalgError, Mat,
};
use crate::recmodel::{FactorPair, LayerId, Linear, RecError, RecModel};

/// Relative ridge used when none is given: `1e-8 · trace(D·Dᵀ) / r`.
pub const DEFAULT_RIDGE_REL: f64 = 1e-8;
/// Number of ×10 ridge escalations after the first singular solve.
pub const RIDGE_RETRIES: usize = 4;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("invalid compression config: {0}")]
    InvalidConfig(String),
    #[error("rank {rank} outside 1..={max}")]
    InvalidRank { rank: usize, max: usize },
    #[error("whitening factor has dimension {got}, layer input is {expected}")]
    WhiteningShape { expected: usize, got: usize },
    #[error("layer {0} is already factored")]
    AlreadyFactored(LayerId),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Model(#[from] RecError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub cr: f64,
    pub eps_rel: f64,
    pub progressive: bool,
    pub whiten: bool,
    pub calib_samples: usize,
    /// Absolute ridge for the update solve; `None` selects the relative default.
    pub ridge: Option<f64>,
    pub seed: u64,
    /// Forces a rank (clamped to `min(M, N)`) instead of the budget rank.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_override: Option<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            cr: 0.5,
            eps_rel: DEFAULT_EPS_REL,
            progressive: true,
            whiten: true,
            calib_samples: 256,
            ridge: None,
            seed: 0,
            rank_override: None,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<(), CompressError> {
        if !(self.cr > 0.0 && self.cr < 1.0) {
            return Err(CompressError::InvalidConfig(format!(
                "cr must lie in (0, 1), got {}",
                self.cr
            )));
        }
        if !(self.eps_rel >= 0.0 && self.eps_rel.is_finite()) {
            return Err(CompressError::InvalidConfig(format!(
                "eps_rel must be >= 0, got {}",
                self.eps_rel
            )));
        }
        if self.calib_samples == 0 {
            return Err(CompressError::InvalidConfig(
                "calib_samples must be positive".into(),
            ));
        }
        if let Some(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(CompressError::InvalidConfig(format!(
                    "ridge must be >= 0, got {r}"
                )));
            }
        }
        if self.rank_override == Some(0) {
            return Err(CompressError::InvalidConfig(
                "rank override must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn rank_for(&self, m: usize, n: usize) -> usize {
        match self.rank_override {
            Some(r) => r.min(m.min(n)),
            None => target_rank(m, n, self.cr),
        }
    }
}

/// `⌊m·n·cr / (m+n)⌋`, lowered if rounding would let `r·(m+n)` exceed `cr·m·n`.
/// Zero means the layer cannot be compressed within budget.
pub fn target_rank(m: usize, n: usize, cr: f64) -> usize {
    let budget = cr * (m * n) as f64;
    let mut r = (budget / (m + n) as f64).floor().max(0.0) as usize;
    while r > 0 && (r * (m + n)) as f64 > budget {
        r -= 1;
    }
    r
}

/// Rank-r replacement `a·b` of a dense weight.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub layer_id: LayerId,
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub a: Mat,
    pub b: Mat,
    pub sigma_retained: Vec<f64>,
    pub sigma_truncated: Vec<f64>,
}

impl CompressedLayer {
    pub fn param_count(&self) -> usize {
        self.rank * (self.m + self.n)
    }

    pub fn to_linear(&self) -> Linear {
        Linear::Factored(FactorPair {
            a: self.a.clone(),
            b: self.b.clone(),
        })
    }
}

/// SVD of `w·s`, keeping the top `r` triplets: `a = U_r·Σ_r`, `b = V_rᵀ·s⁻¹`.
pub fn compress_layer(
    w: &Mat,
    wf: &WhiteningFactor,
    r: usize,
) -> Result<CompressedLayer, CompressError> {
    let (m, n) = w.shape();
    if wf.dim() != n {
        return Err(CompressError::WhiteningShape {
            expected: n,
            got: wf.dim(),
        });
    }
    let max = m.min(n);
    if r == 0 || r > max {
        return Err(CompressError::InvalidRank { rank: r, max });
    }
    let svd = svd_full(&w.checked_matmul(&wf.s)?)?;
    let a = svd.u.take_cols(r).scale_cols(&svd.sigma[..r]);
    let b = svd.v.take_cols(r).transpose().matmul(&wf.s_inv);
    Ok(CompressedLayer {
        layer_id: wf.layer_id,
        m,
        n,
        rank: r,
        a,
        b,
        sigma_retained: svd.sigma[..r].to_vec(),
        sigma_truncated: svd.sigma[r..].to_vec(),
    })
}

/// `sqrt(Σ σ²)` over the truncated singular values.
pub fn predicted_loss(sigma_truncated: &[f64]) -> f64 {
    sigma_truncated.iter().map(|s| s * s).sum::<f64>().sqrt()
}

/// `‖(w − a·b)·x‖_F` for a materialized activation matrix `x` (N × tokens).
pub fn actual_loss(w: &Mat, layer: &CompressedLayer, x: &Mat) -> Result<f64, CompressError> {
    let e = w.sub(&layer.a.matmul(&layer.b));
    Ok(frob_norm(&e.checked_matmul(x)?))
}

/// `‖(w − a·b)·x‖_F` from the Gram matrix `x·xᵀ`.
pub fn actual_loss_gram(w: &Mat, a: &Mat, b: &Mat, gram: &Mat) -> Result<f64, CompressError> {
    let e = w.sub(&a.matmul(b));
    let eg = e.checked_matmul(gram)?;
    let sq: f64 = eg.data().iter().zip(e.data()).map(|(p, q)| p * q).sum();
    Ok(sq.max(0.0).sqrt())
}

/// Result of a progressive refit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgressiveUpdate {
    pub layer: CompressedLayer,
    pub residual_before: f64,
    pub residual_after: f64,
    pub ridge_used: f64,
    /// False when the refit did not lower the residual and the old factor was kept.
    pub applied: bool,
}

/// Default absolute ridge for normal equations with Gram `ddt`.
pub fn default_ridge(ddt: &Mat) -> f64 {
    DEFAULT_RIDGE_REL * ddt.trace() / ddt.rows() as f64
}

fn solve_with_escalation(
    ddt: &Mat,
    ridge: f64,
    mut solve: impl FnMut(f64) -> Result<Mat, LinalgError>,
) -> Result<(Mat, f64), CompressError> {
    let mut lambda = ridge;
    for attempt in 0..=RIDGE_RETRIES {
        match solve(lambda) {
            Ok(u) => return Ok((u, lambda)),
            Err(LinalgError::SingularNormalEquations { .. }) if attempt < RIDGE_RETRIES => {
                log::debug!("singular normal equations at ridge {lambda:e}, escalating");
                lambda = (lambda * 10.0)
                    .max(default_ridge(ddt))
                    .max(f64::MIN_POSITIVE);
            }
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

/// Refits the left factor against activations `x_prime` produced by the
/// already-compressed preceding layers:
/// `U′ = argmin ‖w·x′ − U·D‖_F` with `D = Σ_r·V_rᵀ·s⁻¹·x′`, then `a = U′·Σ_r`.
pub fn progressive_update(
    w: &Mat,
    layer: &CompressedLayer,
    x_prime: &Mat,
    ridge: f64,
) -> Result<ProgressiveUpdate, CompressError> {
    if x_prime.rows() != layer.n {
        return Err(LinalgError::DimensionMismatch {
            op: "progressive_update",
            lhs: (layer.n, layer.n),
            rhs: x_prime.shape(),
        }
        .into());
    }
    let v_t = unfold_sigma(layer)?;
    let d = v_t.matmul(x_prime).scale_rows(&layer.sigma_retained);
    let t = w.matmul(x_prime);
    let ddt = d.matmul_t(&d);
    let (u, ridge_used) =
        solve_with_escalation(&ddt, ridge, |lambda| least_squares_left(&t, &d, lambda))?;
    let before = actual_loss(w, layer, x_prime)?;
    finish_update(layer, u, ridge_used, before, |cand| {
        actual_loss(w, cand, x_prime)
    })
}

/// [`progressive_update`] from the Gram matrix `x′·x′ᵀ`. `ridge = None`
/// selects the relative default.
pub fn progressive_update_gram(
    w: &Mat,
    layer: &CompressedLayer,
    gram_prime: &Mat,
    ridge: Option<f64>,
) -> Result<ProgressiveUpdate, CompressError> {
    let v_t = unfold_sigma(layer)?;
    let sig = &layer.sigma_retained;
    // D·Dᵀ = Σ·(Vᵀs⁻¹)·G′·(Vᵀs⁻¹)ᵀ·Σ and (w·x′)·Dᵀ = w·G′·(Vᵀs⁻¹)ᵀ·Σ
    let vg = v_t.checked_matmul(gram_prime)?;
    let ddt = vg.matmul_t(v_t).scale_rows(sig).scale_cols(sig);
    let tdt = w.matmul_t(&vg).scale_cols(sig);
    let ridge = ridge.unwrap_or_else(|| default_ridge(&ddt));
    let (u, ridge_used) = solve_with_escalation(&ddt, ridge, |lambda| {
        least_squares_left_gram(&tdt, &ddt, lambda)
    })?;
    let before = actual_loss_gram(w, &layer.a, &layer.b, gram_prime)?;
    finish_update(layer, u, ridge_used, before, |cand| {
        actual_loss_gram(w, &cand.a, &cand.b, gram_prime)
    })
}

/// `V_rᵀ·s⁻¹`, i.e. `b` with the singular values divided back out of `a`.
/// The stored `b` already has this form.
fn unfold_sigma(layer: &CompressedLayer) -> Result<&Mat, CompressError> {
    if layer.sigma_retained.len() != layer.rank || layer.b.rows() != layer.rank {
        return Err(CompressError::InvalidRank {
            rank: layer.b.rows(),
            max: layer.sigma_retained.len(),
        });
    }
    Ok(&layer.b)
}

fn finish_update(
    layer: &CompressedLayer,
    u: Mat,
    ridge_used: f64,
    before: f64,
    residual: impl Fn(&CompressedLayer) -> Result<f64, CompressError>,
) -> Result<ProgressiveUpdate, CompressError> {
    let mut cand = layer.clone();
    cand.a = u.scale_cols(&layer.sigma_retained);
    let after = residual(&cand)?;
    if after <= before && before > 0.0 {
        Ok(ProgressiveUpdate {
            layer: cand,
            residual_before: before,
            residual_after: after,
            ridge_used,
            applied: true,
        })
    } else {
        log::debug!(
            "{}: refit residual {after:e} > {before:e}, keeping one-shot factor",
            layer.layer_id
        );
        Ok(ProgressiveUpdate {
            layer: layer.clone(),
            residual_before: before,
            residual_after: before,
            ridge_used,
            applied: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub sigma_max: f64,
    pub sigma_min_retained: f64,
    pub sigma_max_truncated: Option<f64>,
    /// `Σ_retained σ² / Σ_all σ²`.
    pub retained_energy: f64,
    pub count: usize,
}

impl SpectrumSummary {
    fn of(layer: &CompressedLayer) -> Self {
        let ret: f64 = layer.sigma_retained.iter().map(|s| s * s).sum();
        let all = ret + layer.sigma_truncated.iter().map(|s| s * s).sum::<f64>();
        Self {
            sigma_max: layer.sigma_retained[0],
            sigma_min_retained: *layer.sigma_retained.last().unwrap(),
            sigma_max_truncated: layer.sigma_truncated.first().copied(),
            retained_energy: if all > 0.0 { ret / all } else { 1.0 },
            count: layer.sigma_retained.len() + layer.sigma_truncated.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: LayerId,
    pub m: usize,
    pub n: usize,
    /// `None` when the budget rank was zero and the layer stayed dense.
    pub rank: Option<usize>,
    pub params_dense: usize,
    pub params_stored: usize,
    /// `sqrt(Σ truncated σ²)` of the whitened weight.
    pub predicted_loss: Option<f64>,
    /// `‖(W − a·b)·X‖_F` on the original calibration activations, before any refit.
    pub actual_loss: Option<f64>,
    /// `‖(W − a·b)·X′‖_F` of the final factors on the inputs this layer sees
    /// in the finished compressed model.
    pub compressed_input_loss: Option<f64>,
    pub spectrum: Option<SpectrumSummary>,
    pub damping_used: f64,
    pub update_applied: bool,
    pub update_residual_before: Option<f64>,
    pub update_residual_after: Option<f64>,
    pub ridge_used: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub calibration_ms: f64,
    pub compression_ms: f64,
    pub update_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub config: CompressionConfig,
    pub calib_sequences: usize,
    pub calib_tokens: usize,
    pub layers: Vec<LayerReport>,
    pub linear_params_dense: usize,
    pub linear_params_stored: usize,
    pub timings: StageTimings,
}

impl CompressionReport {
    pub fn layer(&self, id: LayerId) -> Option<&LayerReport> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn total_compressed_input_loss(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.compressed_input_loss)
            .sum()
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Compresses every linear layer of `model` using activations from the
/// calibration sequences.
///
/// Layers are visited in forward order. In progressive mode each layer's
/// left factor is refit on activations recomputed through the layers
/// compressed so far; whitening always uses the original activations.
pub fn compress_model(
    model: &RecModel,
    calib: &[Vec<usize>],
    cfg: &CompressionConfig,
) -> Result<(RecModel, CompressionReport), CompressError> {
    cfg.validate()?;
    if cfg.calib_samples > calib.len() {
        log::warn!(
            "requested {} calibration sequences but only {} are available; using all",
            cfg.calib_samples,
            calib.len()
        );
    }
    let start = Instant::now();
    let stats = collect_activations(model, calib, cfg.calib_samples, cfg.seed)?;
    let mut calibration_ms = ms(start);
    let calib_sequences = cfg.calib_samples.min(calib.len());
    let calib_tokens = stats.values().next().map_or(0, |s| s.token_count());

    let mut out = model.clone();
    let mut layers = Vec::new();
    let mut compression_ms = 0.0;
    let mut update_ms = 0.0;
    for id in model.layer_ids() {
        let w = match model.linear(id) {
            Linear::Dense(w) => w,
            Linear::Factored(_) => return Err(CompressError::AlreadyFactored(id)),
        };
        let (m, n) = w.shape();
        let mut rec = LayerReport {
            layer: id,
            m,
            n,
            rank: None,
            params_dense: m * n,
            params_stored: m * n,
            predicted_loss: None,
            actual_loss: None,
            compressed_input_loss: None,
            spectrum: None,
            damping_used: 0.0,
            update_applied: false,
            update_residual_before: None,
            update_residual_after: None,
            ridge_used: None,
        };
        let r = cfg.rank_for(m, n);
        if r == 0 {
            log::warn!("{id}: budget rank is 0 at cr {}; layer left dense", cfg.cr);
            layers.push(rec);
            continue;
        }
        let t = Instant::now();
        let st = &stats[&id];
        let wf = if cfg.whiten {
            whiten_layer(st, cfg.eps_rel)?
        } else {
            WhiteningFactor::identity(id, n)
        };
        let mut layer = compress_layer(w, &wf, r)?;
        rec.rank = Some(r);
        rec.params_stored = layer.param_count();
        rec.predicted_loss = Some(predicted_loss(&layer.sigma_truncated));
        rec.actual_loss = Some(actual_loss_gram(w, &layer.a, &layer.b, st.gram())?);
        rec.spectrum = Some(SpectrumSummary::of(&layer));
        rec.damping_used = wf.damping_used;
        compression_ms += ms(t);

        if cfg.progressive {
            let t = Instant::now();
            let fresh = collect_for_layers(&out, calib, cfg.calib_samples, cfg.seed, &[id])?;
            calibration_ms += ms(t);
            let t = Instant::now();
            let upd = progressive_update_gram(w, &layer, fresh[&id].gram(), cfg.ridge)?;
            rec.update_applied = upd.applied;
            rec.update_residual_before = Some(upd.residual_before);
            rec.update_residual_after = Some(upd.residual_after);
            rec.ridge_used = Some(upd.ridge_used);
            layer = upd.layer;
            update_ms += ms(t);
        }
        out.set_linear(id, layer.to_linear())?;
        layers.push(rec);
    }

    let t = Instant::now();
    let final_stats = collect_activations(&out, calib, cfg.calib_samples, cfg.seed)?;
    calibration_ms += ms(t);
    for rec in layers.iter_mut().filter(|r| r.rank.is_some()) {
        let (w, f) = match (model.linear(rec.layer), out.linear(rec.layer)) {
            (Linear::Dense(w), Linear::Factored(f)) => (w, f),
            _ => unreachable!("compressed layer not factored"),
        };
        rec.compressed_input_loss = Some(actual_loss_gram(
            w,
            &f.a,
            &f.b,
            final_stats[&rec.layer].gram(),
        )?);
    }

    let report = CompressionReport {
        config: cfg.clone(),
        calib_sequences,
        calib_tokens,
        linear_params_dense: model.linear_param_count(),
        linear_params_stored: out.linear_param_count(),
        layers,
        timings: StageTimings {
            calibration_ms,
            compression_ms,
            update_ms,
            total_ms: ms(start),
        },
    };
    Ok((out, report))
}
