//! Calibration: per-layer input Gram matrices and the Cholesky whitening
//! factors derived from them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{cholesky_lower, solve_lower_triangular, LinalgError, Mat};
use crate::recmodel::{ItemSequenceDataset, LayerId, RecError, RecModel};

/// Default damping, relative to the mean diagonal of the Gram matrix.
pub const DEFAULT_EPS_REL: f64 = 1e-4;
/// Number of damping doublings tried after the first Cholesky failure.
pub const DAMPING_RETRIES: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibError {
    #[error("no calibration tokens (sample count 0 or empty dataset)")]
    EmptyCalibration,
    #[error("layer {layer}: covariance not positive definite after damping up to {damping:e}")]
    Damping { layer: LayerId, damping: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] RecError),
}

/// Running `Σ x·xᵀ` over the input vectors seen by one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub layer_id: LayerId,
    pub dim: usize,
    gram: Mat,
    token_count: usize,
}

impl ActivationStats {
    pub fn new(layer_id: LayerId, dim: usize) -> Self {
        Self {
            layer_id,
            dim,
            gram: Mat::zeros(dim, dim),
            token_count: 0,
        }
    }

    /// Adds one rank-1 update per row of `tokens` (tokens × dim), in row order.
    pub fn accumulate(&mut self, tokens: &Mat) {
        assert_eq!(tokens.cols(), self.dim, "activation width");
        let n = self.dim;
        for t in 0..tokens.rows() {
            let x = tokens.row(t);
            for i in 0..n {
                let xi = x[i];
                if xi == 0.0 {
                    continue;
                }
                let row = &mut self.gram.row_mut(i)[..=i];
                for (g, xj) in row.iter_mut().zip(&x[..=i]) {
                    *g += xi * xj;
                }
            }
        }
        self.token_count += tokens.rows();
        for i in 0..n {
            for j in 0..i {
                self.gram[(j, i)] = self.gram[(i, j)];
            }
        }
    }

    pub fn gram(&self) -> &Mat {
        &self.gram
    }

    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

/// Seeded choice of `sample_count` sequences, returned in their original
/// order so that accumulation order does not depend on the shuffle.
pub fn sample_sequences(seqs: &[Vec<usize>], sample_count: usize, seed: u64) -> Vec<&[usize]> {
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(sample_count.min(seqs.len()));
    idx.sort_unstable();
    idx.into_iter().map(|i| seqs[i].as_slice()).collect()
}

/// Calibration sequences drawn from training data: each user's sequence
/// without its validation and test items.
pub fn training_prefixes(ds: &ItemSequenceDataset) -> Vec<Vec<usize>> {
    ds.sequences
        .iter()
        .map(|s| s.items[..s.items.len() - 2].to_vec())
        .collect()
}

fn selected(
    seqs: &[Vec<usize>],
    sample_count: usize,
    seed: u64,
) -> Result<Vec<&[usize]>, CalibError> {
    if sample_count == 0 || seqs.is_empty() {
        return Err(CalibError::EmptyCalibration);
    }
    let picked: Vec<&[usize]> = sample_sequences(seqs, sample_count, seed)
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    if picked.is_empty() {
        return Err(CalibError::EmptyCalibration);
    }
    Ok(picked)
}

/// Runs the sampled calibration sequences through `model` and accumulates
/// the Gram matrix of every compressible layer's input.
pub fn collect_activations(
    model: &RecModel,
    seqs: &[Vec<usize>],
    sample_count: usize,
    seed: u64,
) -> Result<BTreeMap<LayerId, ActivationStats>, CalibError> {
    collect_for_layers(model, seqs, sample_count, seed, &model.layer_ids())
}

/// As [`collect_activations`] restricted to `layers`.
pub fn collect_for_layers(
    model: &RecModel,
    seqs: &[Vec<usize>],
    sample_count: usize,
    seed: u64,
    layers: &[LayerId],
) -> Result<BTreeMap<LayerId, ActivationStats>, CalibError> {
    let picked = selected(seqs, sample_count, seed)?;
    let mut stats: BTreeMap<LayerId, ActivationStats> = layers
        .iter()
        .map(|&id| {
            (
                id,
                ActivationStats::new(id, model.config.linear_shape(id.slot).1),
            )
        })
        .collect();
    for s in picked {
        model.trace_activations(s, &mut |id, x| {
            if let Some(st) = stats.get_mut(&id) {
                st.accumulate(x);
            }
        })?;
    }
    if stats.values().any(|s| s.token_count == 0) {
        return Err(CalibError::EmptyCalibration);
    }
    Ok(stats)
}

/// Materializes the activation matrix `X` (dim × tokens) for the given
/// layers. Debug path for checks against the accumulated Gram matrices.
pub fn materialize_activations(
    model: &RecModel,
    seqs: &[Vec<usize>],
    sample_count: usize,
    seed: u64,
    layers: &[LayerId],
) -> Result<BTreeMap<LayerId, Mat>, CalibError> {
    let picked = selected(seqs, sample_count, seed)?;
    let mut cols: BTreeMap<LayerId, Vec<Vec<f64>>> =
        layers.iter().map(|&id| (id, Vec::new())).collect();
    for s in picked {
        model.trace_activations(s, &mut |id, x| {
            if let Some(c) = cols.get_mut(&id) {
                for t in 0..x.rows() {
                    c.push(x.row(t).to_vec());
                }
            }
        })?;
    }
    Ok(cols
        .into_iter()
        .map(|(id, c)| {
            let dim = model.config.linear_shape(id.slot).1;
            (id, Mat::from_fn(dim, c.len(), |i, j| c[j][i]))
        })
        .collect())
}

/// `gram + ε·I` with `ε = eps_rel · trace(gram) / N`.
pub fn damped_covariance(stats: &ActivationStats, eps_rel: f64) -> Mat {
    add_damping(&stats.gram, damping_for(&stats.gram, eps_rel))
}

/// Absolute damping for a relative setting; an all-zero Gram falls back to
/// `eps_rel` itself.
pub fn damping_for(gram: &Mat, eps_rel: f64) -> f64 {
    let mean_diag = gram.trace() / gram.rows() as f64;
    if mean_diag > 0.0 {
        eps_rel * mean_diag
    } else {
        eps_rel
    }
}

fn add_damping(gram: &Mat, eps: f64) -> Mat {
    let mut c = gram.clone();
    for i in 0..c.rows() {
        c[(i, i)] += eps;
    }
    c
}

/// Cholesky factor `s` of a layer's covariance and its inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningFactor {
    pub layer_id: LayerId,
    pub s: Mat,
    pub s_inv: Mat,
    pub damping_used: f64,
}

impl WhiteningFactor {
    /// No whitening: `s = s_inv = I`.
    pub fn identity(layer_id: LayerId, dim: usize) -> Self {
        Self {
            layer_id,
            s: Mat::identity(dim),
            s_inv: Mat::identity(dim),
            damping_used: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.s.rows()
    }
}

/// Factors an already positive-definite covariance `c = s·sᵀ`.
pub fn whitening_factor(layer_id: LayerId, c: &Mat) -> Result<WhiteningFactor, CalibError> {
    let s = cholesky_lower(c)?;
    let s_inv = solve_lower_triangular(&s, &Mat::identity(c.rows()))?;
    Ok(WhiteningFactor {
        layer_id,
        s,
        s_inv,
        damping_used: 0.0,
    })
}

/// Damps and factors a layer's Gram matrix, doubling the damping on each
/// Cholesky failure up to [`DAMPING_RETRIES`] times.
pub fn whiten_layer(stats: &ActivationStats, eps_rel: f64) -> Result<WhiteningFactor, CalibError> {
    let mut eps = damping_for(&stats.gram, eps_rel);
    for attempt in 0..=DAMPING_RETRIES {
        match whitening_factor(stats.layer_id, &add_damping(&stats.gram, eps)) {
            Ok(mut wf) => {
                wf.damping_used = eps;
                return Ok(wf);
            }
            Err(CalibError::Linalg(LinalgError::NotPositiveDefinite { .. }))
                if attempt < DAMPING_RETRIES =>
            {
                log::debug!("{}: damping {eps:e} insufficient, doubling", stats.layer_id);
                eps = if eps > 0.0 {
                    eps * 2.0
                } else {
                    damping_for(&stats.gram, DEFAULT_EPS_REL)
                };
            }
            Err(CalibError::Linalg(LinalgError::NotPositiveDefinite { .. })) => break,
            Err(e) => return Err(e),
        }
    }
    Err(CalibError::Damping {
        layer: stats.layer_id,
        damping: eps,
    })
}
