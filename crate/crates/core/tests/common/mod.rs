//! Independent reference implementations used as test oracles. Nothing here
//! calls into the production linear-algebra kernels.

#![allow(dead_code)]

use odlm::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Mat) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_dense(d: &Dense) -> Mat {
    let cols = d.first().map_or(0, |r| r.len());
    Mat::from_fn(d.len(), cols, |i, j| d[i][j])
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn transpose(a: &Dense) -> Dense {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

/// One-sided Jacobi SVD: returns `(u, sigma, v)` with sigma descending.
pub fn jacobi_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let flip = a.rows() < a.cols();
    let src = if flip {
        transpose(&to_dense(a))
    } else {
        to_dense(a)
    };
    let (m, n) = (src.len(), src[0].len());
    // work on columns
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| src.iter().map(|r| r[j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (vcols[p][i], vcols[q][i]);
                    vcols[p][i] = c * x - s * y;
                    vcols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sig: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (c.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    sig.sort_by(|a, b| b.0.total_cmp(&a.0));
    let sigma: Vec<f64> = sig.iter().map(|s| s.0).collect();
    let u = Mat::from_fn(m, n, |i, k| {
        let (s, j) = sig[k];
        if s > 0.0 {
            cols[j][i] / s
        } else {
            0.0
        }
    });
    let v = Mat::from_fn(n, n, |i, k| vcols[sig[k].1][i]);
    if flip {
        (v, sigma, u)
    } else {
        (u, sigma, v)
    }
}

/// Cholesky–Crout, column by column.
pub fn cholesky(c: &Mat) -> Mat {
    let a = to_dense(c);
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        assert!(d > 0.0, "oracle cholesky: not positive definite");
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / l[j][j];
        }
    }
    from_dense(&l)
}

/// Column-oriented forward substitution for `l·y = b`.
pub fn forward_solve(l: &Mat, b: &Mat) -> Mat {
    let n = l.rows();
    let mut y = to_dense(b);
    for j in 0..n {
        for c in 0..b.cols() {
            y[j][c] /= l[(j, j)];
        }
        for i in j + 1..n {
            let lij = l[(i, j)];
            for c in 0..b.cols() {
                let yj = y[j][c];
                y[i][c] -= lij * yj;
            }
        }
    }
    from_dense(&y)
}

/// Compression by an independent route: oracle Cholesky of `x·xᵀ + eps·I`,
/// oracle inverse, Jacobi SVD of `w·s`. Returns the reconstruction `a·b`
/// and the singular values.
pub fn reference_compress(w: &Mat, x: &Mat, eps: f64, r: usize) -> (Mat, Vec<f64>) {
    let n = x.rows();
    let mut g = mul(&to_dense(x), &transpose(&to_dense(x)));
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += eps;
    }
    let s = cholesky(&from_dense(&g));
    let eye = from_dense(
        &(0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
    );
    let s_inv = forward_solve(&s, &eye);
    let ws = from_dense(&mul(&to_dense(w), &to_dense(&s)));
    let (u, sigma, v) = jacobi_svd(&ws);
    // Σ_{k<r} σ_k u_k (S⁻ᵀ v_k)ᵀ
    let (m, nn) = (w.rows(), w.cols());
    let vt = to_dense(&v);
    let sinv = to_dense(&s_inv);
    let mut out = vec![vec![0.0; nn]; m];
    for k in 0..r {
        let bk: Vec<f64> = (0..nn)
            .map(|j| (0..nn).map(|t| vt[t][k] * sinv[t][j]).sum())
            .collect();
        for i in 0..m {
            let a = sigma[k] * u[(i, k)];
            for j in 0..nn {
                out[i][j] += a * bk[j];
            }
        }
    }
    (from_dense(&out), sigma)
}

/// `argmin_U ‖t − U·d‖_F²` by steepest descent with exact line search,
/// row by row, until the gradient vanishes to `tol`.
pub fn gd_least_squares(t: &Mat, d: &Mat, tol: f64, max_iter: usize) -> Mat {
    let (m, r) = (t.rows(), d.rows());
    let dd = to_dense(d);
    let ddt = mul(&dd, &transpose(&dd));
    let mut u = vec![vec![0.0; r]; m];
    for i in 0..m {
        let ti = t.row(i);
        // b = d·tᵢᵀ
        let b: Vec<f64> = (0..r)
            .map(|k| dd[k].iter().zip(ti).map(|(x, y)| x * y).sum())
            .collect();
        for _ in 0..max_iter {
            // gradient of ½‖tᵢ − uᵢ·d‖² is uᵢ·ddᵀ − b
            let g: Vec<f64> = (0..r)
                .map(|k| (0..r).map(|l| u[i][l] * ddt[l][k]).sum::<f64>() - b[k])
                .collect();
            let gn: f64 = g.iter().map(|x| x * x).sum();
            if gn.sqrt() <= tol {
                break;
            }
            let hg: f64 = (0..r)
                .map(|k| g[k] * (0..r).map(|l| ddt[k][l] * g[l]).sum::<f64>())
                .sum();
            let step = gn / hg;
            for k in 0..r {
                u[i][k] -= step * g[k];
            }
        }
    }
    from_dense(&u)
}

pub fn frob(a: &Mat) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn layer0() -> odlm::recmodel::LayerId {
    odlm::recmodel::LayerId {
        block: 0,
        slot: odlm::recmodel::LinearSlot::Query,
    }
}

/// Seeded `(w, x)` with `w` at most 32×32 and `x` full row rank.
pub fn loss_instance(seed: u64) -> (Mat, Mat) {
    let mut g = rng(seed);
    let m = g.gen_range(2..=32);
    let n = g.gen_range(2..=32);
    let tokens = g.gen_range(2 * n..=4 * n);
    (random_mat(m, n, &mut g), random_mat(n, tokens, &mut g))
}

/// Whitening from the exact Gram of `x` (no damping).
pub fn exact_whitening(x: &Mat) -> odlm::calib::WhiteningFactor {
    odlm::calib::whitening_factor(layer0(), &x.matmul_t(x)).unwrap()
}

/// Toy pipeline shared by the model-level tests: a small synthetic dataset
/// and a briefly trained model.
pub fn small_trained(
    num_users: usize,
    num_items: usize,
    embed: usize,
    epochs: usize,
    seed: u64,
) -> (
    odlm::recmodel::ItemSequenceDataset,
    odlm::recmodel::RecModel,
) {
    use odlm::recmodel::*;
    let ds = generate_synthetic(num_users, num_items, seed).unwrap();
    let split = split_leave_last_two(&ds);
    let model = RecModel::new(ModelConfig::with_width(num_items, embed), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let (m, _) = train(&model, &ds, &split.train, &cfg).unwrap();
    (ds, m)
}

/// 8×8 layer compressed to rank 2 on `x`, plus a perturbed copy of `x`
/// standing in for activations from compressed predecessors.
pub fn perturbed_instance(seed: u64) -> (Mat, odlm::compress::CompressedLayer, Mat) {
    let mut g = rng(seed);
    let w = random_mat(8, 8, &mut g);
    let x = random_mat(8, 30, &mut g);
    let layer = odlm::compress::compress_layer(&w, &exact_whitening(&x), 2).unwrap();
    let noise = random_mat(8, 30, &mut g).scale(0.3);
    (w, layer, x.add(&noise))
}

/// `D = Σ_r·V_rᵀ·s⁻¹·x′`, recovered from `b = V_rᵀ·s⁻¹`.
pub fn design(layer: &odlm::compress::CompressedLayer, xp: &Mat) -> Mat {
    layer.b.matmul(xp).scale_rows(&layer.sigma_retained)
}

/// Central-difference gradient of `‖t − U·d‖_F²` at `u`, max-abs.
pub fn fd_gradient_max(t: &Mat, d: &Mat, u: &Mat) -> f64 {
    let f = |u: &Mat| frob(&t.sub(&u.matmul(d))).powi(2);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..u.rows() {
        for j in 0..u.cols() {
            let mut plus = u.clone();
            plus[(i, j)] += h;
            let mut minus = u.clone();
            minus[(i, j)] -= h;
            worst = worst.max(((f(&plus) - f(&minus)) / (2.0 * h)).abs());
        }
    }
    worst
}
