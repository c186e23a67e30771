//! Single-layer playground for the browser: how much of a layer's output
//! survives rank truncation with and without activation whitening.

use odlm::calib::{damping_for, whitening_factor, WhiteningFactor, DEFAULT_EPS_REL};
use odlm::compress::{actual_loss, compress_layer, predicted_loss, target_rank};
use odlm::eval::{linear_flops_dense, linear_flops_factored};
use odlm::linalg::{frob_norm, Mat};
use odlm::recmodel::{LayerId, LinearSlot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_DIM: usize = 96;
const MAX_TOKENS: usize = 2048;

const LAYER: LayerId = LayerId {
    block: 0,
    slot: LinearSlot::Query,
};

fn check_dim(name: &str, v: usize) -> Result<(), String> {
    if (1..=MAX_DIM).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} must be between 1 and {MAX_DIM}, got {v}"))
    }
}

fn check_tokens(n: usize, tokens: usize) -> Result<(), String> {
    if tokens < n || tokens > MAX_TOKENS {
        return Err(format!(
            "tokens must be between {n} and {MAX_TOKENS}, got {tokens}"
        ));
    }
    Ok(())
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// Correlated activations `A·Z`: the mixing matrix has column scales falling
/// geometrically from 1 to `1 / spread`.
fn activations(n: usize, tokens: usize, spread: f64, rng: &mut ChaCha8Rng) -> Mat {
    let decay = if n > 1 {
        spread.max(1.0).powf(-1.0 / (n - 1) as f64)
    } else {
        1.0
    };
    let scales: Vec<f64> = (0..n).map(|i| decay.powi(i as i32)).collect();
    let mix = uniform(n, n, rng).scale_cols(&scales);
    mix.matmul(&uniform(n, tokens, rng))
}

fn whiten(x: &Mat) -> Result<WhiteningFactor, String> {
    let g = x.matmul_t(x);
    let eps = damping_for(&g, DEFAULT_EPS_REL);
    let c = g.add(&Mat::identity(g.rows()).scale(eps));
    whitening_factor(LAYER, &c).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct LossCurve {
    pub ranks: Vec<usize>,
    /// `‖(W − W_r)·X‖_F / ‖W·X‖_F` for plain truncated SVD of `W`.
    pub loss_plain: Vec<f64>,
    /// Same with the SVD taken of the whitened weight.
    pub loss_whitened: Vec<f64>,
    /// Truncated singular values of the whitened weight, on the same scale.
    pub predicted: Vec<f64>,
    pub sigma_plain: Vec<f64>,
    pub sigma_whitened: Vec<f64>,
    pub budget_rank: usize,
}

pub fn loss_curve_data(
    m: usize,
    n: usize,
    tokens: usize,
    spread: f64,
    seed: u32,
) -> Result<LossCurve, String> {
    check_dim("m", m)?;
    check_dim("n", n)?;
    check_tokens(n, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let w = uniform(m, n, &mut rng);
    let x = activations(n, tokens, spread, &mut rng);
    let scale = frob_norm(&w.matmul(&x));
    let wf = whiten(&x)?;
    let plain = WhiteningFactor::identity(LAYER, n);
    let full = m.min(n);
    let mut out = LossCurve {
        ranks: (1..=full).collect(),
        loss_plain: Vec::with_capacity(full),
        loss_whitened: Vec::with_capacity(full),
        predicted: Vec::with_capacity(full),
        sigma_plain: Vec::new(),
        sigma_whitened: Vec::new(),
        budget_rank: target_rank(m, n, 0.5),
    };
    for r in 1..=full {
        let p = compress_layer(&w, &plain, r).map_err(|e| e.to_string())?;
        let q = compress_layer(&w, &wf, r).map_err(|e| e.to_string())?;
        out.loss_plain
            .push(actual_loss(&w, &p, &x).map_err(|e| e.to_string())? / scale);
        out.loss_whitened
            .push(actual_loss(&w, &q, &x).map_err(|e| e.to_string())? / scale);
        out.predicted
            .push(predicted_loss(&q.sigma_truncated) / scale);
        if r == full {
            out.sigma_plain = p.sigma_retained;
            out.sigma_whitened = q.sigma_retained;
        }
    }
    Ok(out)
}

/// Truncation loss against retained rank for a random `m × n` layer fed
/// correlated activations. Returns a JSON [`LossCurve`].
#[wasm_bindgen]
pub fn loss_curve(
    m: usize,
    n: usize,
    tokens: usize,
    spread: f64,
    seed: u32,
) -> Result<String, String> {
    to_json(&loss_curve_data(m, n, tokens, spread, seed)?)
}

#[derive(Debug, Serialize)]
pub struct Budget {
    pub rank: usize,
    pub params_dense: usize,
    pub params_factored: usize,
    pub flops_dense: u64,
    pub flops_factored: u64,
    /// Rank at which the factored form stops saving anything.
    pub break_even_rank: f64,
}

pub fn budget_data(m: usize, n: usize, cr: f64) -> Result<Budget, String> {
    if m == 0 || n == 0 {
        return Err("dimensions must be positive".into());
    }
    if !(cr > 0.0 && cr < 1.0) {
        return Err(format!(
            "compression ratio must lie strictly between 0 and 1, got {cr}"
        ));
    }
    let rank = target_rank(m, n, cr);
    Ok(Budget {
        rank,
        params_dense: m * n,
        params_factored: rank * (m + n),
        flops_dense: linear_flops_dense(m, n),
        flops_factored: linear_flops_factored(m, n, rank),
        break_even_rank: (m * n) as f64 / (m + n) as f64,
    })
}

/// Rank, parameter and FLOP counts for an `m × n` layer at ratio `cr`.
#[wasm_bindgen]
pub fn rank_budget(m: usize, n: usize, cr: f64) -> Result<String, String> {
    to_json(&budget_data(m, n, cr)?)
}

#[derive(Debug, Serialize)]
pub struct Whitening {
    pub n: usize,
    /// Row-major `X·Xᵀ / tokens`.
    pub before: Vec<f64>,
    /// Row-major `(S⁻¹X)·(S⁻¹X)ᵀ`.
    pub after: Vec<f64>,
    pub max_offdiag_before: f64,
    pub max_offdiag_after: f64,
    pub damping: f64,
}

fn max_offdiag(c: &Mat) -> f64 {
    let n = c.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max(c[(i, j)].abs());
            }
        }
    }
    worst
}

pub fn whitening_data(
    n: usize,
    tokens: usize,
    spread: f64,
    seed: u32,
) -> Result<Whitening, String> {
    check_dim("n", n)?;
    check_tokens(n, tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let x = activations(n, tokens, spread, &mut rng);
    let before = x.matmul_t(&x).scale(1.0 / tokens as f64);
    let wf = whiten(&x)?;
    let xt = wf.s_inv.matmul(&x);
    let after = xt.matmul_t(&xt);
    Ok(Whitening {
        n,
        max_offdiag_before: max_offdiag(&before),
        max_offdiag_after: max_offdiag(&after),
        before: before.into_data(),
        after: after.into_data(),
        damping: wf.damping_used,
    })
}

/// Activation covariance before and after whitening.
#[wasm_bindgen]
pub fn whitening(n: usize, tokens: usize, spread: f64, seed: u32) -> Result<String, String> {
    to_json(&whitening_data(n, tokens, spread, seed)?)
}
