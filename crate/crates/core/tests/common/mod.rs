//! Test-only oracles. Everything here evaluates the formulas directly with
//! loops and raw `exp`, sharing no code with the library's computation paths.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rca::{ContrastiveInstance, EmbeddingMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        })
        .collect()
}

pub fn matrix(rows: &[Vec<f64>], dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows_with_dim(dim, rows).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize, scale: f64) -> EmbeddingMatrix {
    matrix(&gaussian_rows(rng, rows, dim, scale), dim)
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    d: usize,
    r: usize,
    k: usize,
    p: usize,
    scale: f64,
) -> ContrastiveInstance {
    let regions = random_matrix(rng, r, d, scale);
    let positives = random_matrix(rng, k, d, scale);
    let negatives = random_matrix(rng, k, d, scale);
    let caption = random_matrix(rng, p, d, scale);
    let scores = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    ContrastiveInstance::new(regions, positives, negatives, caption, scores).unwrap()
}

fn rows_of(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.row_count()).map(|i| m.row(i).to_vec()).collect()
}

/// s[j][k] = t_j · c_k / sqrt(d), one entry at a time.
pub fn naive_scores(tags: &EmbeddingMatrix, ctx: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    let d = tags.dim();
    let (t, c) = (rows_of(tags), rows_of(ctx));
    let mut out = vec![vec![0.0; c.len()]; t.len()];
    for j in 0..t.len() {
        for k in 0..c.len() {
            let mut s = 0.0;
            for i in 0..d {
                s += t[j][i] * c[k][i];
            }
            out[j][k] = s / (d as f64).sqrt();
        }
    }
    out
}

/// Softmax without max-subtraction.
pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / z).collect()
}

pub fn naive_pool(alpha: &[Vec<f64>], ctx: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    let c = rows_of(ctx);
    let d = ctx.dim();
    let mut out = vec![vec![0.0; d]; alpha.len()];
    for j in 0..alpha.len() {
        for k in 0..c.len() {
            for i in 0..d {
                out[j][i] += alpha[j][k] * c[k][i];
            }
        }
    }
    out
}

pub fn naive_phi(tags: &EmbeddingMatrix, ctx: &EmbeddingMatrix) -> Vec<f64> {
    let s = naive_scores(tags, ctx);
    let alpha: Vec<Vec<f64>> = s.iter().map(|r| naive_softmax(r)).collect();
    let pooled = naive_pool(&alpha, ctx);
    let t = rows_of(tags);
    (0..t.len())
        .map(|j| (0..tags.dim()).map(|i| t[j][i] * pooled[j][i]).sum())
        .collect()
}

/// (1/K) Σ_n q_n · −log(e^{φp_n} / (e^{φp_n} + Σ_l e^{φn_l})), no stabilisation.
/// The log is taken as `ln_1p(Σ_l e^{φn_l} / e^{φp_n})` so that tiny losses
/// are not swamped by rounding of a ratio near one.
pub fn naive_relative_loss(
    ctx: &EmbeddingMatrix,
    pos: &EmbeddingMatrix,
    neg: &EmbeddingMatrix,
    q: Option<&[f64]>,
) -> f64 {
    let pp = naive_phi(pos, ctx);
    let pn = naive_phi(neg, ctx);
    let k = pp.len();
    let mut total = 0.0;
    for n in 0..k {
        let num = pp[n].exp();
        let mut rest = 0.0;
        for l in 0..k {
            rest += pn[l].exp();
        }
        let w = q.map_or(1.0, |q| q[n]);
        total += w * (rest / num).ln_1p();
    }
    total / k as f64
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {:e}, tol {tol:e})",
        (a - b).abs()
    );
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
