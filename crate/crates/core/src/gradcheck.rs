//! Central finite-difference gradient checks for the attention kernel and the
//! differentiable losses.
//!
//! Each check draws a random problem from a seed, evaluates the analytic
//! gradient, and compares it entry by entry with
//! `(f(x + h e_i) - f(x - h e_i)) / 2h`, which only uses forward evaluations.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attention_backward, cross_attention, AttentionParams, TokenSequence};
use crate::error::Result;
use crate::losses::{
    cross_domain_triplet_loss, cross_domain_triplet_loss_with_grad, cross_entropy_loss,
    cross_entropy_with_grad, mine_hardest, DomainBatch, TRIPLET_COMBINATIONS,
};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Magnitudes below this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &Array2<f64>, step: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + step;
        let plus = f(&probe);
        probe[[r, c]] = orig - step;
        let minus = f(&probe);
        probe[[r, c]] = orig;
        grad[[r, c]] = (plus - minus) / (2.0 * step);
    }
    grad
}

fn max_rel_error(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn report(name: String, pairs: &[(Array2<f64>, Array2<f64>)], tolerance: f64) -> GradCheckReport {
    let max = pairs
        .iter()
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max);
    GradCheckReport {
        name,
        max_rel_error: max,
        entries: pairs.iter().map(|(a, _)| a.len()).sum(),
        tolerance,
        passed: max < tolerance,
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Checks all five attention gradients on a random problem.
pub fn check_attention(seed: u64, use_softmax: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_a, n_b, dim_in, d_k) = (3, 4, 5, 3);
    let a = random_matrix(&mut rng, n_a, dim_in);
    let b = random_matrix(&mut rng, n_b, dim_in);
    let w_q = random_matrix(&mut rng, dim_in, d_k);
    let w_k = random_matrix(&mut rng, dim_in, d_k);
    let w_v = random_matrix(&mut rng, dim_in, d_k);
    let upstream = random_matrix(&mut rng, n_a, d_k);

    let objective = |a: &Array2<f64>, b: &Array2<f64>, q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
        let p = AttentionParams::new(q.clone(), k.clone(), v.clone(), use_softmax)
            .expect("perturbed params stay valid");
        let out = cross_attention(
            &TokenSequence::new(a.clone()).expect("finite tokens"),
            &TokenSequence::new(b.clone()).expect("finite tokens"),
            &p,
        )
        .expect("shapes fixed");
        (&out * &upstream).sum()
    };

    let params = AttentionParams::new(w_q.clone(), w_k.clone(), w_v.clone(), use_softmax)?;
    let grads = attention_backward(
        &TokenSequence::new(a.clone())?,
        &TokenSequence::new(b.clone())?,
        &params,
        &upstream,
    )?;
    let h = DEFAULT_STEP;
    let pairs = [
        (grads.d_a, numeric_gradient(&a, h, |x| objective(x, &b, &w_q, &w_k, &w_v))),
        (grads.d_b, numeric_gradient(&b, h, |x| objective(&a, x, &w_q, &w_k, &w_v))),
        (grads.d_w_q, numeric_gradient(&w_q, h, |x| objective(&a, &b, x, &w_k, &w_v))),
        (grads.d_w_k, numeric_gradient(&w_k, h, |x| objective(&a, &b, &w_q, x, &w_v))),
        (grads.d_w_v, numeric_gradient(&w_v, h, |x| objective(&a, &b, &w_q, &w_k, x))),
    ];
    let mode = if use_softmax { "softmax" } else { "linear" };
    Ok(report(format!("attention[{mode}] seed={seed}"), &pairs, DEFAULT_TOLERANCE))
}

/// Smallest distance from a kink of the piecewise-smooth triplet loss: either
/// a hinge at zero or a tie in the hardest-positive / hardest-negative choice.
fn kink_clearance(batch: &DomainBatch<f64>, margin: f64) -> Result<f64> {
    let mut clearance = f64::INFINITY;
    for (m1, m2) in TRIPLET_COMBINATIONS {
        let anchors = batch.embeddings(m1);
        let targets = batch.embeddings(m2);
        for m in mine_hardest(batch, m1, m2)? {
            clearance = clearance.min((m.d_pos - m.d_neg + margin).abs());
            let class = batch.labels(m1)[m.anchor];
            for (t, row) in targets.outer_iter().enumerate() {
                if m1 == m2 && t == m.anchor {
                    continue;
                }
                let d = (&anchors.row(m.anchor) - &row).mapv(|v| v * v).sum().sqrt();
                if batch.labels(m2)[t] == class && t != m.positive {
                    clearance = clearance.min(m.d_pos - d);
                } else if batch.labels(m2)[t] != class && t != m.negative {
                    clearance = clearance.min(d - m.d_neg);
                }
            }
        }
    }
    Ok(clearance)
}

/// Random batch whose loss is smooth in a neighbourhood wider than the
/// finite-difference step.
fn smooth_triplet_batch(rng: &mut ChaCha8Rng, margin: f64) -> Result<DomainBatch<f64>> {
    let labels = vec![0, 0, 1, 1, 2, 2];
    loop {
        let batch = DomainBatch::new(
            random_matrix(rng, 6, 4),
            labels.clone(),
            random_matrix(rng, 6, 4),
            labels.clone(),
        )?;
        if kink_clearance(&batch, margin)? > 10.0 * DEFAULT_STEP {
            return Ok(batch);
        }
    }
}

pub fn check_triplet(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 0.3;
    let batch = smooth_triplet_batch(&mut rng, margin)?;
    let (_, grad_a, grad_b) = cross_domain_triplet_loss_with_grad(&batch, margin)?;
    let h = DEFAULT_STEP;
    let num_a = numeric_gradient(&batch.embeddings_a, h, |x| {
        let mut b = batch.clone();
        b.embeddings_a = x.clone();
        cross_domain_triplet_loss(&b, margin).expect("labels unchanged")
    });
    let num_b = numeric_gradient(&batch.embeddings_b, h, |x| {
        let mut b = batch.clone();
        b.embeddings_b = x.clone();
        cross_domain_triplet_loss(&b, margin).expect("labels unchanged")
    });
    Ok(report(
        format!("triplet seed={seed}"),
        &[(grad_a, num_a), (grad_b, num_b)],
        DEFAULT_TOLERANCE,
    ))
}

pub fn check_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, classes) = (4, 5);
    let logits = random_matrix(&mut rng, n, classes) * 3.0;
    let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
    let (_, grad) = cross_entropy_with_grad(&logits, &labels)?;
    let num = numeric_gradient(&logits, DEFAULT_STEP, |x| {
        cross_entropy_loss(x, &labels).expect("labels in range")
    });
    Ok(report(
        format!("cross-entropy seed={seed}"),
        &[(grad, num)],
        DEFAULT_TOLERANCE,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_quadratic() {
        let x = ndarray::array![[1.0, -2.0], [0.5, 3.0]];
        let g = numeric_gradient(&x, DEFAULT_STEP, |m| m.mapv(|v| v * v).sum());
        for (gv, xv) in g.iter().zip(x.iter()) {
            assert!((gv - 2.0 * xv).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
        assert!(relative_error(1e-12, 0.0) < 1e-5);
    }

    #[test]
    fn checks_pass_on_a_few_seeds() {
        for seed in 0..3 {
            assert!(check_attention(seed, true).unwrap().passed);
            assert!(check_attention(seed, false).unwrap().passed);
            assert!(check_triplet(seed).unwrap().passed);
            assert!(check_cross_entropy(seed).unwrap().passed);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = ndarray::array![[1.0, 2.0]];
        let wrong = ndarray::array![[2.0, 4.5]];
        let num = numeric_gradient(&x, DEFAULT_STEP, |m| m.mapv(|v| v * v).sum());
        assert!(max_rel_error(&wrong, &num) > DEFAULT_TOLERANCE);
    }
}
