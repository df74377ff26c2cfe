//! Training losses: cross-domain batch-hard triplet, cross-attention
//! distillation and classification cross-entropy, plus their weighted sum.

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention, self_attention, AttentionParams, TokenSequence};
use crate::embedstore::Domain;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillationForm {
    /// KL divergence between temperature-softened feature distributions.
    #[default]
    Kl,
    /// Mean squared error between raw feature vectors.
    Mse,
}

impl FromStr for DistillationForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DistillationForm::Kl),
            "mse" => Ok(DistillationForm::Mse),
            _ => Err(Error::InvalidConfig(format!(
                "distillation form must be \"kl\" or \"mse\", got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights<T> {
    pub triplet: T,
    pub cad: T,
    pub ce: T,
    /// Triplet margin.
    pub margin: T,
    pub temperature: T,
    pub distillation: DistillationForm,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            triplet: T::one(),
            cad: T::one(),
            ce: T::one(),
            margin: T::lit(0.3),
            temperature: T::one(),
            distillation: DistillationForm::Kl,
        }
    }
}

impl<T: Scalar> LossWeights<T> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("triplet weight", self.triplet),
            ("cad weight", self.cad),
            ("ce weight", self.ce),
            ("margin", self.margin),
        ] {
            if !(v >= T::zero() && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.temperature.is_nan() || self.temperature <= T::zero() {
            return Err(Error::NonPositiveTemperature);
        }
        Ok(())
    }
}

/// A mini-batch of features from both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch<T> {
    pub embeddings_a: Array2<T>,
    pub embeddings_b: Array2<T>,
    pub labels_a: Vec<u32>,
    pub labels_b: Vec<u32>,
    pub logits_a: Option<Array2<T>>,
    pub logits_b: Option<Array2<T>>,
}

impl<T: Scalar> DomainBatch<T> {
    pub fn new(
        embeddings_a: Array2<T>,
        labels_a: Vec<u32>,
        embeddings_b: Array2<T>,
        labels_b: Vec<u32>,
    ) -> Result<Self> {
        if embeddings_a.nrows() != labels_a.len() {
            return Err(Error::LabelCountMismatch {
                rows: embeddings_a.nrows(),
                labels: labels_a.len(),
            });
        }
        if embeddings_b.nrows() != labels_b.len() {
            return Err(Error::LabelCountMismatch {
                rows: embeddings_b.nrows(),
                labels: labels_b.len(),
            });
        }
        if embeddings_a.ncols() != embeddings_b.ncols() {
            return Err(Error::DimensionMismatch {
                left: embeddings_a.ncols(),
                right: embeddings_b.ncols(),
            });
        }
        Ok(DomainBatch {
            embeddings_a,
            embeddings_b,
            labels_a,
            labels_b,
            logits_a: None,
            logits_b: None,
        })
    }

    pub fn with_logits(mut self, logits_a: Array2<T>, logits_b: Array2<T>) -> Result<Self> {
        for (logits, rows, context) in [
            (&logits_a, self.labels_a.len(), "logits_a"),
            (&logits_b, self.labels_b.len(), "logits_b"),
        ] {
            if logits.nrows() != rows {
                return Err(Error::ShapeMismatch {
                    context,
                    expected: (rows, logits.ncols()),
                    found: logits.dim(),
                });
            }
        }
        self.logits_a = Some(logits_a);
        self.logits_b = Some(logits_b);
        Ok(self)
    }

    pub fn embeddings(&self, domain: Domain) -> &Array2<T> {
        match domain {
            Domain::A => &self.embeddings_a,
            Domain::B => &self.embeddings_b,
        }
    }

    pub fn labels(&self, domain: Domain) -> &[u32] {
        match domain {
            Domain::A => &self.labels_a,
            Domain::B => &self.labels_b,
        }
    }
}

fn euclidean<T: Scalar>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> T {
    x.iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt()
}

/// Hardest positive and negative chosen for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet<T> {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: T,
    pub d_neg: T,
}

/// Per anchor in `anchor_domain`: farthest same-class and nearest
/// other-class item in `target_domain`. An anchor is never its own positive.
pub fn mine_hardest<T: Scalar>(
    batch: &DomainBatch<T>,
    anchor_domain: Domain,
    target_domain: Domain,
) -> Result<Vec<MinedTriplet<T>>> {
    let anchors = batch.embeddings(anchor_domain);
    let anchor_labels = batch.labels(anchor_domain);
    let targets = batch.embeddings(target_domain);
    let target_labels = batch.labels(target_domain);
    let same_set = anchor_domain == target_domain;

    let mut out = Vec::with_capacity(anchors.nrows());
    for (a, anchor) in anchors.outer_iter().enumerate() {
        let class = anchor_labels[a];
        let mut pos: Option<(usize, T)> = None;
        let mut neg: Option<(usize, T)> = None;
        for (t, target) in targets.outer_iter().enumerate() {
            if same_set && t == a {
                continue;
            }
            let d = euclidean(anchor, target);
            if target_labels[t] == class {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((t, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((t, d));
            }
        }
        let missing = |what| Error::TripletMining {
            class,
            missing: what,
            domain: target_domain,
        };
        let (positive, d_pos) = pos.ok_or_else(|| missing("positive"))?;
        let (negative, d_neg) = neg.ok_or_else(|| missing("negative"))?;
        out.push(MinedTriplet {
            anchor: a,
            positive,
            negative,
            d_pos,
            d_neg,
        });
    }
    Ok(out)
}

/// Mean over anchors of `relu(d_pos - d_neg + margin)` with batch-hard mining.
pub fn triplet_term<T: Scalar>(
    anchor_domain: Domain,
    target_domain: Domain,
    batch: &DomainBatch<T>,
    margin: T,
) -> Result<T> {
    let mined = mine_hardest(batch, anchor_domain, target_domain)?;
    Ok(mean_hinge(&mined, margin))
}

fn mean_hinge<T: Scalar>(mined: &[MinedTriplet<T>], margin: T) -> T {
    if mined.is_empty() {
        return T::zero();
    }
    let total: T = mined
        .iter()
        .map(|m| (m.d_pos - m.d_neg + margin).max(T::zero()))
        .sum();
    total / T::from_usize_lossy(mined.len())
}

pub const TRIPLET_COMBINATIONS: [(Domain, Domain); 4] = [
    (Domain::A, Domain::A),
    (Domain::B, Domain::B),
    (Domain::A, Domain::B),
    (Domain::B, Domain::A),
];

/// Sum of the within-domain and between-domain terms.
pub fn cross_domain_triplet_loss<T: Scalar>(batch: &DomainBatch<T>, margin: T) -> Result<T> {
    let mut total = T::zero();
    for (m1, m2) in TRIPLET_COMBINATIONS {
        total += triplet_term(m1, m2, batch, margin)?;
    }
    Ok(total)
}

/// Loss and its gradient w.r.t. both embedding matrices. The hinge and the
/// mining choice are treated as fixed (subgradient at kinks).
pub fn cross_domain_triplet_loss_with_grad<T: Scalar>(
    batch: &DomainBatch<T>,
    margin: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let mut grad_a = Array2::zeros(batch.embeddings_a.raw_dim());
    let mut grad_b = Array2::zeros(batch.embeddings_b.raw_dim());
    let mut total = T::zero();
    for (m1, m2) in TRIPLET_COMBINATIONS {
        let mined = mine_hardest(batch, m1, m2)?;
        total += mean_hinge(&mined, margin);
        if mined.is_empty() {
            continue;
        }
        let inv_n = T::one() / T::from_usize_lossy(mined.len());
        let anchors = batch.embeddings(m1);
        let targets = batch.embeddings(m2);
        for m in &mined {
            if m.d_pos - m.d_neg + margin <= T::zero() {
                continue;
            }
            let x = anchors.row(m.anchor);
            // unit direction from `other` to the anchor
            let dir = |other: ArrayView1<'_, T>, d: T| -> Array1<T> {
                if d > T::zero() {
                    (&x - &other) / d
                } else {
                    Array1::zeros(x.len())
                }
            };
            let u_pos = dir(targets.row(m.positive), m.d_pos) * inv_n;
            let u_neg = dir(targets.row(m.negative), m.d_neg) * inv_n;
            {
                let ga = if m1 == Domain::A { &mut grad_a } else { &mut grad_b };
                let mut row = ga.row_mut(m.anchor);
                row += &u_pos;
                row -= &u_neg;
            }
            let gt = if m2 == Domain::A { &mut grad_a } else { &mut grad_b };
            {
                let mut row = gt.row_mut(m.positive);
                row -= &u_pos;
            }
            let mut row = gt.row_mut(m.negative);
            row += &u_neg;
        }
    }
    Ok((total, grad_a, grad_b))
}

fn log_softmax_row<T: Scalar>(row: ArrayView1<'_, T>, temperature: T) -> Array1<T> {
    let scaled = row.mapv(|v| v / temperature);
    let max = scaled.fold(T::neg_infinity(), |acc, &v| acc.max(v));
    let log_z = scaled.mapv(|v| (v - max).exp()).sum().ln() + max;
    scaled.mapv(|v| v - log_z)
}

/// Row-averaged `KL(softmax(teacher / T) || softmax(student / T))`. The teacher
/// is a fixed target.
pub fn cad_loss<T: Scalar>(teacher: &Array2<T>, student: &Array2<T>, temperature: T) -> Result<T> {
    check_feature_shapes(teacher, student, temperature)?;
    let mut total = T::zero();
    for (t, s) in teacher.outer_iter().zip(student.outer_iter()) {
        let log_p = log_softmax_row(t, temperature);
        let log_q = log_softmax_row(s, temperature);
        let kl: T = log_p
            .iter()
            .zip(log_q.iter())
            .map(|(&lp, &lq)| lp.exp() * (lp - lq))
            .sum();
        total += kl.max(T::zero());
    }
    Ok(total / T::from_usize_lossy(teacher.nrows()))
}

/// Mean squared difference over all feature entries.
pub fn cad_loss_mse<T: Scalar>(teacher: &Array2<T>, student: &Array2<T>) -> Result<T> {
    check_feature_shapes(teacher, student, T::one())?;
    let n = T::from_usize_lossy(teacher.len());
    Ok(teacher
        .iter()
        .zip(student.iter())
        .map(|(&t, &s)| (t - s) * (t - s))
        .sum::<T>()
        / n)
}

fn check_feature_shapes<T: Scalar>(teacher: &Array2<T>, student: &Array2<T>, temperature: T) -> Result<()> {
    if temperature.is_nan() || temperature <= T::zero() {
        return Err(Error::NonPositiveTemperature);
    }
    if teacher.dim() != student.dim() {
        return Err(Error::ShapeMismatch {
            context: "distillation features",
            expected: teacher.dim(),
            found: student.dim(),
        });
    }
    if teacher.nrows() == 0 {
        return Err(Error::MissingInput("distillation features are empty"));
    }
    Ok(())
}

/// Pooled image-level features entering the distillation loss; one row per
/// image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CadFeatures<T> {
    /// Teacher cross-attention with queries from B and keys/values from A.
    pub teacher_ba: Array2<T>,
    pub student_aa: Array2<T>,
    pub teacher_ab: Array2<T>,
    pub student_bb: Array2<T>,
}

impl<T: Scalar> CadFeatures<T> {
    /// Runs teacher cross-attention and student self-attention over each
    /// `(A, B)` pair and mean-pools every output over its tokens.
    pub fn from_pairs(
        pairs: &[(TokenSequence<T>, TokenSequence<T>)],
        teacher: &AttentionParams<T>,
        student: &AttentionParams<T>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::MissingInput("no image pairs"));
        }
        let d_k = teacher.d_k();
        if student.d_k() != d_k {
            return Err(Error::DimensionMismatch {
                left: d_k,
                right: student.d_k(),
            });
        }
        let n = pairs.len();
        let mut out = CadFeatures {
            teacher_ba: Array2::zeros((n, d_k)),
            student_aa: Array2::zeros((n, d_k)),
            teacher_ab: Array2::zeros((n, d_k)),
            student_bb: Array2::zeros((n, d_k)),
        };
        let pool = |m: Array2<T>| m.mean_axis(Axis(0)).expect("non-empty tokens");
        for (i, (a, b)) in pairs.iter().enumerate() {
            out.teacher_ba.row_mut(i).assign(&pool(cross_attention(b, a, teacher)?));
            out.student_aa.row_mut(i).assign(&pool(self_attention(a, student)?));
            out.teacher_ab.row_mut(i).assign(&pool(cross_attention(a, b, teacher)?));
            out.student_bb.row_mut(i).assign(&pool(self_attention(b, student)?));
        }
        Ok(out)
    }

    /// Both directional terms: (teacher B|A vs student A) + (teacher A|B vs student B).
    pub fn loss(&self, temperature: T, form: DistillationForm) -> Result<T> {
        let term = |t: &Array2<T>, s: &Array2<T>| match form {
            DistillationForm::Kl => cad_loss(t, s, temperature),
            DistillationForm::Mse => cad_loss_mse(t, s),
        };
        Ok(term(&self.teacher_ba, &self.student_aa)? + term(&self.teacher_ab, &self.student_bb)?)
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Array2<T>, labels: &[u32]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss and gradient w.r.t. the logits: `(softmax - onehot) / n`.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &Array2<T>, labels: &[u32]) -> Result<(T, Array2<T>)> {
    let (n, classes) = logits.dim();
    if labels.len() != n {
        return Err(Error::LabelCountMismatch {
            rows: n,
            labels: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::MissingInput("logits are empty"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut total = T::zero();
    let mut grad = Array2::zeros((n, classes));
    for ((row, &label), mut g) in logits.outer_iter().zip(labels).zip(grad.outer_iter_mut()) {
        let log_p = log_softmax_row(row, T::one());
        total -= log_p[label as usize];
        g.assign(&log_p.mapv(|v| v.exp() * inv_n));
        g[label as usize] -= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Unweighted terms and their weighted sum. A term is `None` when its inputs
/// were not supplied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub triplet: Option<T>,
    pub cad: Option<T>,
    pub ce: Option<T>,
    pub total: T,
}

/// `w_triplet * L_triplet + w_cad * L_cad + w_ce * L_ce`, where the
/// cross-entropy term sums both domains.
pub fn total_loss<T: Scalar>(
    batch: &DomainBatch<T>,
    features: Option<&CadFeatures<T>>,
    weights: &LossWeights<T>,
) -> Result<LossBreakdown<T>> {
    weights.validate()?;
    let triplet = cross_domain_triplet_loss(batch, weights.margin)?;
    let cad = features
        .map(|f| f.loss(weights.temperature, weights.distillation))
        .transpose()?;
    let ce = match (&batch.logits_a, &batch.logits_b) {
        (Some(la), Some(lb)) => {
            Some(cross_entropy_loss(la, &batch.labels_a)? + cross_entropy_loss(lb, &batch.labels_b)?)
        }
        _ => None,
    };
    if cad.is_none() && weights.cad > T::zero() {
        return Err(Error::MissingInput("attention features for the distillation term"));
    }
    if ce.is_none() && weights.ce > T::zero() {
        return Err(Error::MissingInput("logits for both domains"));
    }
    let total = weights.triplet * triplet
        + weights.cad * cad.unwrap_or_else(T::zero)
        + weights.ce * ce.unwrap_or_else(T::zero);
    Ok(LossBreakdown {
        triplet: Some(triplet),
        cad,
        ce,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// One anchor in A, its positive and negative in B at chosen distances.
    fn hinge_batch(d_pos: f64, d_neg: f64) -> DomainBatch<f64> {
        DomainBatch::new(
            array![[0.0, 0.0]],
            vec![0],
            array![[d_pos, 0.0], [0.0, d_neg]],
            vec![0, 1],
        )
        .unwrap()
    }

    #[test]
    fn hinge_arithmetic() {
        let l = triplet_term(Domain::A, Domain::B, &hinge_batch(0.5, 1.0), 0.3).unwrap();
        assert_eq!(l, 0.0);
        let l = triplet_term(Domain::A, Domain::B, &hinge_batch(1.0, 0.5), 0.3).unwrap();
        assert!((l - 0.8).abs() < 1e-12);
    }

    #[test]
    fn missing_positive_names_class() {
        let b = hinge_batch(1.0, 0.5);
        // B anchors of class 1 have no other class-1 item in B
        let err = triplet_term(Domain::B, Domain::B, &b, 0.3).unwrap_err();
        assert!(matches!(err, Error::TripletMining { missing: "positive", .. }));
    }

    /// Every (anchor, positive, negative) triple, maxed over positives and
    /// minimised over negatives.
    #[allow(clippy::needless_range_loop)]
    fn enumerate_oracle(batch: &DomainBatch<f64>, m1: Domain, m2: Domain, eps: f64) -> f64 {
        let xa = batch.embeddings(m1);
        let xb = batch.embeddings(m2);
        let (la, lb) = (batch.labels(m1), batch.labels(m2));
        let dist = |i: usize, j: usize| -> f64 {
            xa.row(i)
                .iter()
                .zip(xb.row(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut total = 0.0;
        for a in 0..xa.nrows() {
            let mut worst = f64::NEG_INFINITY;
            for p in 0..xb.nrows() {
                if lb[p] != la[a] || (m1 == m2 && p == a) {
                    continue;
                }
                for n in 0..xb.nrows() {
                    if lb[n] == la[a] {
                        continue;
                    }
                    worst = worst.max(dist(a, p) - dist(a, n));
                }
            }
            total += (worst + eps).max(0.0);
        }
        total / xa.nrows() as f64
    }

    fn random_batch(seed: u64) -> DomainBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainBatch::new(
            random_matrix(&mut rng, 8, 3),
            vec![0, 0, 0, 1, 1, 1, 2, 2],
            random_matrix(&mut rng, 8, 3),
            vec![0, 1, 2, 0, 1, 2, 0, 2],
        )
        .unwrap()
    }

    #[test]
    fn batch_hard_matches_enumeration() {
        for seed in 0..5 {
            let b = random_batch(seed);
            let mut sum = 0.0;
            for (m1, m2) in TRIPLET_COMBINATIONS {
                let got = triplet_term(m1, m2, &b, 0.3).unwrap();
                let want = enumerate_oracle(&b, m1, m2, 0.3);
                assert!((got - want).abs() < 1e-12, "{m1}{m2}: {got} vs {want}");
                sum += want;
            }
            assert!((cross_domain_triplet_loss(&b, 0.3).unwrap() - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn separated_clusters_zero_loss() {
        let b = DomainBatch::new(
            array![[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0]],
            vec![0, 0, 1, 1],
            array![[0.0, 0.1], [0.1, 0.1], [10.0, 0.1], [10.1, 0.1]],
            vec![0, 0, 1, 1],
        )
        .unwrap();
        assert_eq!(cross_domain_triplet_loss(&b, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_batch_cross_terms_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_matrix(&mut rng, 6, 4);
        let labels = vec![0, 0, 1, 1, 2, 2];
        let b = DomainBatch::new(x.clone(), labels.clone(), x, labels).unwrap();
        assert_eq!(
            triplet_term(Domain::A, Domain::B, &b, 0.3).unwrap(),
            triplet_term(Domain::B, Domain::A, &b, 0.3).unwrap()
        );
    }

    #[test]
    fn kl_identity_and_positivity() {
        let t = array![[0.3, -1.0, 2.0], [0.0, 0.5, 0.5]];
        assert_eq!(cad_loss(&t, &t, 1.0).unwrap(), 0.0);
        let peaked = array![[10.0, 0.0]];
        let uniform = array![[0.0, 0.0]];
        assert!(cad_loss(&peaked, &uniform, 1.0).unwrap() > 0.0);
        assert!(matches!(cad_loss(&t, &t, 0.0), Err(Error::NonPositiveTemperature)));
        assert!(cad_loss(&t, &peaked, 1.0).is_err());
    }

    #[test]
    fn kl_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let t = random_matrix(&mut rng, 2, 3);
        let s = random_matrix(&mut rng, 2, 3);
        let softmax = |r: ArrayView1<f64>| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let mut want = 0.0;
        for (tr, sr) in t.outer_iter().zip(s.outer_iter()) {
            let (p, q) = (softmax(tr), softmax(sr));
            want += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
        }
        want /= 2.0;
        assert!((cad_loss(&t, &s, 1.0).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_examples() {
        let c = 7;
        let uniform = Array2::<f64>::zeros((3, c));
        let l = cross_entropy_loss(&uniform, &[0, 3, 6]).unwrap();
        assert!((l - (c as f64).ln()).abs() < 1e-12);

        let confident = array![[50.0, 0.0, 0.0]];
        assert!(cross_entropy_loss(&confident, &[0]).unwrap() < 1e-20);

        assert!(matches!(
            cross_entropy_loss(&confident, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_matches_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits = random_matrix(&mut rng, 4, 5) * 3.0;
        let labels = [0, 4, 2, 2];
        let want = logits
            .outer_iter()
            .zip(labels)
            .map(|(r, l)| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                -(r[l as usize].exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((cross_entropy_loss(&logits, &labels).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn total_loss_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let b = random_batch(3)
            .with_logits(random_matrix(&mut rng, 8, 3), random_matrix(&mut rng, 8, 3))
            .unwrap();
        let feats = CadFeatures {
            teacher_ba: random_matrix(&mut rng, 2, 4),
            student_aa: random_matrix(&mut rng, 2, 4),
            teacher_ab: random_matrix(&mut rng, 2, 4),
            student_bb: random_matrix(&mut rng, 2, 4),
        };
        let zero = LossWeights {
            triplet: 0.0,
            cad: 0.0,
            ce: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&b, Some(&feats), &zero).unwrap().total, 0.0);

        let only_triplet = LossWeights {
            cad: 0.0,
            ce: 0.0,
            ..Default::default()
        };
        assert_eq!(
            total_loss(&b, None, &only_triplet).unwrap().total,
            cross_domain_triplet_loss(&b, 0.3).unwrap()
        );

        let all = total_loss(&b, Some(&feats), &LossWeights::default()).unwrap();
        let want = cross_domain_triplet_loss(&b, 0.3).unwrap()
            + feats.loss(1.0, DistillationForm::Kl).unwrap()
            + cross_entropy_loss(b.logits_a.as_ref().unwrap(), &b.labels_a).unwrap()
            + cross_entropy_loss(b.logits_b.as_ref().unwrap(), &b.labels_b).unwrap();
        assert!((all.total - want).abs() < 1e-12);

        // linear in each weight
        let w2 = LossWeights {
            ce: 2.5,
            ..Default::default()
        };
        let doubled = total_loss(&b, Some(&feats), &w2).unwrap();
        assert!((doubled.total - all.total - 1.5 * all.ce.unwrap()).abs() < 1e-12);

        assert!(matches!(
            total_loss(&b, None, &LossWeights::default()),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn pooled_features_from_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mk = |rng: &mut ChaCha8Rng| {
            AttentionParams::new(
                random_matrix(rng, 3, 2),
                random_matrix(rng, 3, 2),
                random_matrix(rng, 3, 2),
                true,
            )
            .unwrap()
        };
        let teacher = mk(&mut rng);
        let pairs: Vec<_> = (0..2)
            .map(|_| {
                (
                    TokenSequence::new(random_matrix(&mut rng, 4, 3)).unwrap(),
                    TokenSequence::new(random_matrix(&mut rng, 5, 3)).unwrap(),
                )
            })
            .collect();
        // student == teacher and identical images: every direction coincides
        let same: Vec<_> = pairs.iter().map(|(a, _)| (a.clone(), a.clone())).collect();
        let f = CadFeatures::from_pairs(&same, &teacher, &teacher).unwrap();
        assert!(f.loss(1.0, DistillationForm::Kl).unwrap().abs() < 1e-15);

        let f = CadFeatures::from_pairs(&pairs, &teacher, &mk(&mut rng)).unwrap();
        assert_eq!(f.teacher_ba.dim(), (2, 2));
        assert!(f.loss(1.0, DistillationForm::Kl).unwrap() > 0.0);
        assert!(f.loss(1.0, DistillationForm::Mse).unwrap() > 0.0);
    }
}
