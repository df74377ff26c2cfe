//! Deterministic synthetic two-domain embeddings.
//!
//! Class centroids are random unit vectors. Gallery rows (domain B) are
//! centroid plus isotropic Gaussian noise; query rows (domain A) add a shared
//! domain offset before the noise. An optional chain class lays its first `L`
//! gallery members along a great-circle arc leaving the centroid, so link 1
//! sits near the class's queries and link `L` far from them while every link
//! stays close to its neighbour.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedstore::{Domain, EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub class_id: u32,
    pub length: usize,
    /// Angle in radians between consecutive links on the arc.
    pub link_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class_gallery: usize,
    pub per_class_queries: usize,
    pub dim: usize,
    /// Expected norm of the per-row noise before normalisation.
    pub intra_class_spread: f64,
    /// Norm of the shift applied to every query before normalisation.
    pub domain_offset_scale: f64,
    #[serde(default)]
    pub chain: Option<ChainSpec>,
    pub seed: u64,
}

impl SynthSpec {
    /// The chain scenario used for the re-ranking benefit demo: 10 classes,
    /// 20 gallery items per class, 32 dimensions, a 4-link chain in class 0.
    pub fn chain_demo() -> Self {
        SynthSpec {
            n_classes: 10,
            per_class_gallery: 20,
            per_class_queries: 5,
            dim: 32,
            intra_class_spread: 1.0,
            domain_offset_scale: 0.5,
            chain: Some(ChainSpec {
                class_id: 0,
                length: 4,
                link_spread: 0.35,
            }),
            seed: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSynthSpec(m.to_string()));
        if self.n_classes == 0 || self.per_class_gallery == 0 || self.per_class_queries == 0 {
            return bad("all counts must be >= 1");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2 to host separated class centroids");
        }
        if !(self.intra_class_spread >= 0.0 && self.domain_offset_scale >= 0.0) {
            return bad("spreads must be >= 0");
        }
        if let Some(chain) = &self.chain {
            if chain.class_id as usize >= self.n_classes {
                return bad("chain class out of range");
            }
            if chain.length == 0 || chain.length > self.per_class_gallery {
                return bad("chain length must be in 1..=per_class_gallery");
            }
            if !(chain.link_spread >= 0.0 && chain.link_spread.is_finite()) {
                return bad("chain link spread must be finite and >= 0");
            }
        }
        Ok(())
    }

    pub fn gallery_index(&self, class_id: u32, member: usize) -> usize {
        class_id as usize * self.per_class_gallery + member
    }

    /// Gallery rows of the chain links, link 1 first.
    pub fn chain_gallery_indices(&self) -> Vec<usize> {
        self.chain
            .as_ref()
            .map(|c| (0..c.length).map(|k| self.gallery_index(c.class_id, k)).collect())
            .unwrap_or_default()
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Returns `(gallery, queries)`, every row unit-norm. Identical specs give
/// bit-identical sets.
pub fn generate<T: Scalar>(spec: &SynthSpec) -> Result<(EmbeddingSet<T>, EmbeddingSet<T>)> {
    spec.validate()?;
    let dim = spec.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids: Vec<Vec<f64>> = (0..spec.n_classes).map(|_| unit(gaussian(&mut rng, dim))).collect();
    let offset: Vec<f64> = unit(gaussian(&mut rng, dim))
        .into_iter()
        .map(|x| x * spec.domain_offset_scale)
        .collect();
    // unit direction orthogonal to the chain centroid
    let chain_dir = spec.chain.as_ref().map(|c| {
        let u = &centroids[c.class_id as usize];
        let mut v = gaussian(&mut rng, dim);
        let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        unit(v)
    });
    let sigma = spec.intra_class_spread / (dim as f64).sqrt();

    let noisy = |base: &[f64], shift: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let noise = gaussian(rng, dim);
        (0..dim)
            .map(|d| base[d] + shift.map_or(0.0, |s| s[d]) + sigma * noise[d])
            .collect()
    };

    let n_gallery = spec.n_classes * spec.per_class_gallery;
    let n_queries = spec.n_classes * spec.per_class_queries;
    let mut gallery = Vec::with_capacity(n_gallery * dim);
    let mut queries = Vec::with_capacity(n_queries * dim);
    let (mut g_ids, mut g_labels, mut q_ids, mut q_labels) = (vec![], vec![], vec![], vec![]);

    for (c, centroid) in centroids.iter().enumerate() {
        let label = Label::named(c as u32, format!("class{c}"));
        for k in 0..spec.per_class_gallery {
            let row = match (&spec.chain, &chain_dir) {
                (Some(chain), Some(v)) if chain.class_id as usize == c && k < chain.length => {
                    let angle = (k + 1) as f64 * chain.link_spread;
                    let (sin, cos) = angle.sin_cos();
                    centroid.iter().zip(v).map(|(u, v)| cos * u + sin * v).collect()
                }
                _ => noisy(centroid, None, &mut rng),
            };
            gallery.extend(unit(row));
            g_ids.push(format!("g{c}-{k}"));
            g_labels.push(label.clone());
        }
        for k in 0..spec.per_class_queries {
            queries.extend(unit(noisy(centroid, Some(&offset), &mut rng)));
            q_ids.push(format!("q{c}-{k}"));
            q_labels.push(label.clone());
        }
    }

    let cast = |v: Vec<f64>, rows| -> Array2<T> {
        Array2::from_shape_vec((rows, dim), v.into_iter().map(T::lit).collect())
            .expect("row count times dim")
    };
    let gallery = EmbeddingSet::new(cast(gallery, n_gallery), g_ids, g_labels, Domain::B)?;
    let queries = EmbeddingSet::new(cast(queries, n_queries), q_ids, q_labels, Domain::A)?;
    Ok((gallery, queries))
}
