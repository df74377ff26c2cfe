//! Single-head cross-attention `F(A, B)` with an analytic backward pass.
//!
//! Queries are projected from sequence `A`, keys and values from sequence `B`:
//! `F(A, B) = softmax(Q_A K_B^T / sqrt(d_k)) V_B`. With `use_softmax = false`
//! the score matrix multiplies `V_B` directly. Self-attention is `F(A, A)`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    w_q: Array2<T>,
    w_k: Array2<T>,
    w_v: Array2<T>,
    pub use_softmax: bool,
}

impl<T: Scalar> AttentionParams<T> {
    /// All three projections must be `dim_in x d_k` with finite entries.
    pub fn new(w_q: Array2<T>, w_k: Array2<T>, w_v: Array2<T>, use_softmax: bool) -> Result<Self> {
        let shape = w_q.dim();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidConfig(
                "projection matrices must be non-empty".into(),
            ));
        }
        for (name, w) in [("w_k", &w_k), ("w_v", &w_v)] {
            if w.dim() != shape {
                return Err(Error::ShapeMismatch {
                    context: name,
                    expected: shape,
                    found: w.dim(),
                });
            }
        }
        if [&w_q, &w_k, &w_v]
            .iter()
            .any(|w| w.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "projection matrices must be finite".into(),
            ));
        }
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            use_softmax,
        })
    }

    pub fn w_q(&self) -> &Array2<T> {
        &self.w_q
    }

    pub fn w_k(&self) -> &Array2<T> {
        &self.w_k
    }

    pub fn w_v(&self) -> &Array2<T> {
        &self.w_v
    }

    pub fn dim_in(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    fn check_tokens(&self, tokens: &TokenSequence<T>) -> Result<()> {
        if tokens.dim() != self.dim_in() {
            return Err(Error::DimensionMismatch {
                left: tokens.dim(),
                right: self.dim_in(),
            });
        }
        Ok(())
    }
}

/// `n x dim_in` token embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T>(Array2<T>);

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Array2<T>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::InvalidConfig("token sequence is empty".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("token values must be finite".into()));
        }
        Ok(TokenSequence(tokens))
    }

    pub fn tokens(&self) -> &Array2<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    /// Mean over tokens: one image-level feature row.
    pub fn mean_pool(&self) -> ndarray::Array1<T> {
        self.0.mean_axis(Axis(0)).expect("non-empty sequence")
    }
}

/// Intermediates of one forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionForward<T> {
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Attention weights: row softmax of the scaled scores, or the scaled
    /// scores themselves without softmax.
    pub weights: Array2<T>,
    pub output: Array2<T>,
}

pub fn cross_attention_forward<T: Scalar>(
    a: &TokenSequence<T>,
    b: &TokenSequence<T>,
    p: &AttentionParams<T>,
) -> Result<AttentionForward<T>> {
    p.check_tokens(a)?;
    p.check_tokens(b)?;
    let q = a.0.dot(&p.w_q);
    let k = b.0.dot(&p.w_k);
    let v = b.0.dot(&p.w_v);
    let scale = T::one() / T::from_usize_lossy(p.d_k()).sqrt();
    let mut weights = q.dot(&k.t()) * scale;
    if p.use_softmax {
        softmax_rows_inplace(&mut weights);
    }
    let output = weights.dot(&v);
    Ok(AttentionForward {
        q,
        k,
        v,
        weights,
        output,
    })
}

/// `F(A, B)`, an `n_a x d_k` matrix.
pub fn cross_attention<T: Scalar>(
    a: &TokenSequence<T>,
    b: &TokenSequence<T>,
    p: &AttentionParams<T>,
) -> Result<Array2<T>> {
    Ok(cross_attention_forward(a, b, p)?.output)
}

/// `F(A, A)`.
pub fn self_attention<T: Scalar>(a: &TokenSequence<T>, p: &AttentionParams<T>) -> Result<Array2<T>> {
    cross_attention(a, a, p)
}

/// Numerically stable in-place row softmax.
pub fn softmax_rows_inplace<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<T> {
    pub d_a: Array2<T>,
    pub d_b: Array2<T>,
    pub d_w_q: Array2<T>,
    pub d_w_k: Array2<T>,
    pub d_w_v: Array2<T>,
}

/// Gradients of `<upstream, F(A, B)>` with respect to both inputs and all
/// projections. For self-attention the gradient w.r.t. `A` is `d_a + d_b`.
pub fn attention_backward<T: Scalar>(
    a: &TokenSequence<T>,
    b: &TokenSequence<T>,
    p: &AttentionParams<T>,
    upstream: &Array2<T>,
) -> Result<AttentionGrads<T>> {
    let fwd = cross_attention_forward(a, b, p)?;
    if upstream.dim() != fwd.output.dim() {
        return Err(Error::ShapeMismatch {
            context: "upstream gradient",
            expected: fwd.output.dim(),
            found: upstream.dim(),
        });
    }
    let scale = T::one() / T::from_usize_lossy(p.d_k()).sqrt();

    let d_weights = upstream.dot(&fwd.v.t());
    let d_v = fwd.weights.t().dot(upstream);
    let d_scores = if p.use_softmax {
        // dS = P * (dP - rowsum(dP * P))
        let mut ds = d_weights.clone();
        for ((mut ds_row, p_row), dp_row) in ds
            .rows_mut()
            .into_iter()
            .zip(fwd.weights.rows())
            .zip(d_weights.rows())
        {
            let dot = p_row.dot(&dp_row);
            ds_row.zip_mut_with(&p_row, |g, &pv| *g = pv * (*g - dot));
        }
        ds
    } else {
        d_weights
    };
    let d_q = d_scores.dot(&fwd.k) * scale;
    let d_k = d_scores.t().dot(&fwd.q) * scale;

    Ok(AttentionGrads {
        d_a: d_q.dot(&p.w_q.t()),
        d_b: d_k.dot(&p.w_k.t()) + d_v.dot(&p.w_v.t()),
        d_w_q: a.0.t().dot(&d_q),
        d_w_k: b.0.t().dot(&d_k),
        d_w_v: b.0.t().dot(&d_v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(q: f64, k: f64, v: f64, softmax: bool) -> AttentionParams<f64> {
        AttentionParams::new(array![[q]], array![[k]], array![[v]], softmax).unwrap()
    }

    fn one_token() -> TokenSequence<f64> {
        TokenSequence::new(array![[1.0]]).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Per-element loops straight from the definition.
    fn naive(a: &Array2<f64>, b: &Array2<f64>, p: &AttentionParams<f64>) -> Array2<f64> {
        let (na, nb, din, dk) = (a.nrows(), b.nrows(), a.ncols(), p.d_k());
        let proj = |x: &Array2<f64>, w: &Array2<f64>, i: usize, c: usize| {
            (0..din).map(|t| x[[i, t]] * w[[t, c]]).sum::<f64>()
        };
        let mut out = Array2::zeros((na, dk));
        for i in 0..na {
            let mut s: Vec<f64> = (0..nb)
                .map(|j| {
                    (0..dk)
                        .map(|c| proj(a, p.w_q(), i, c) * proj(b, p.w_k(), j, c))
                        .sum::<f64>()
                        / (dk as f64).sqrt()
                })
                .collect();
            if p.use_softmax {
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                s.iter_mut().for_each(|x| *x = x.exp() / z);
            }
            for c in 0..dk {
                out[[i, c]] = (0..nb).map(|j| s[j] * proj(b, p.w_v(), j, c)).sum();
            }
        }
        out
    }

    #[test]
    fn single_key_softmax_returns_value() {
        let p = scalar_params(2.0, 3.0, 5.0, true);
        assert_eq!(cross_attention(&one_token(), &one_token(), &p).unwrap(), array![[5.0]]);
    }

    #[test]
    fn literal_scalar_product() {
        let p = scalar_params(2.0, 3.0, 5.0, false);
        assert_eq!(cross_attention(&one_token(), &one_token(), &p).unwrap(), array![[30.0]]);
    }

    #[test]
    fn self_attention_is_cross_with_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = TokenSequence::new(random_matrix(&mut rng, 3, 4)).unwrap();
        let p = AttentionParams::new(
            random_matrix(&mut rng, 4, 2),
            random_matrix(&mut rng, 4, 2),
            random_matrix(&mut rng, 4, 2),
            true,
        )
        .unwrap();
        assert_eq!(self_attention(&a, &p).unwrap(), cross_attention(&a, &a, &p).unwrap());

        let t = TokenSequence::new(array![[0.5, -1.0, 2.0, 0.25]]).unwrap();
        let out = self_attention(&t, &p).unwrap();
        let expected = t.tokens().dot(p.w_v());
        for (x, y) in out.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for softmax in [true, false] {
            let a = random_matrix(&mut rng, 3, 4);
            let b = random_matrix(&mut rng, 3, 4);
            let p = AttentionParams::new(
                random_matrix(&mut rng, 4, 3),
                random_matrix(&mut rng, 4, 3),
                random_matrix(&mut rng, 4, 3),
                softmax,
            )
            .unwrap();
            let got = cross_attention(
                &TokenSequence::new(a.clone()).unwrap(),
                &TokenSequence::new(b.clone()).unwrap(),
                &p,
            )
            .unwrap();
            let want = naive(&a, &b, &p);
            for (x, y) in got.iter().zip(want.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = random_matrix(&mut rng, 5, 7) * 30.0;
        softmax_rows_inplace(&mut m);
        for row in m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = TokenSequence::new(random_matrix(&mut rng, 2, 3)).unwrap();
        let b = TokenSequence::new(random_matrix(&mut rng, 4, 3)).unwrap();
        let p = AttentionParams::new(
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 3, 2),
            random_matrix(&mut rng, 3, 2),
            true,
        )
        .unwrap();
        let g = attention_backward(&a, &b, &p, &Array2::zeros((2, 2))).unwrap();
        for m in [&g.d_a, &g.d_b, &g.d_w_q, &g.d_w_k, &g.d_w_v] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalar_value_gradient() {
        let (q, k, v, up) = (2.0, 3.0, 5.0, 0.7);
        let p = scalar_params(q, k, v, false);
        let g = attention_backward(&one_token(), &one_token(), &p, &array![[up]]).unwrap();
        // token = 1, so dL/dw_v = q k / sqrt(1) * upstream
        assert!((g.d_w_v[[0, 0]] - q * k * up).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let p = scalar_params(1.0, 1.0, 1.0, true);
        let wide = TokenSequence::new(array![[1.0, 2.0]]).unwrap();
        assert!(cross_attention(&wide, &one_token(), &p).is_err());
        assert!(attention_backward(&one_token(), &one_token(), &p, &array![[1.0, 2.0]]).is_err());
        assert!(AttentionParams::new(array![[1.0]], array![[1.0, 2.0]], array![[1.0]], true).is_err());
        assert!(TokenSequence::<f64>::new(Array2::zeros((0, 2))).is_err());
    }
}
