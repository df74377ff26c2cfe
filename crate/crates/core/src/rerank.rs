//! Iterative test-time re-ranking over gallery-gallery structure.
//!
//! Starting from plain Euclidean query-gallery distances, each iteration adds
//! to every gallery item `i` the penalty
//!
//! ```text
//! beta * sum_{j in J} alpha[rho(j, i)] * gamma * r_ji * |f_i - f_j|
//! ```
//!
//! where `r_ji` is the 1-based rank of `i` in `j`'s gallery list, `J` holds the
//! `m` gallery items currently ranked nearest the query, and `alpha` maps a
//! query rank to a scale (`slope * r` up to `k_cut`, `1.0` beyond). `rho(j, i)`
//! is the query rank of `j` ([`AlphaVariant::QueryRankOfJ`]) or of `i`
//! ([`AlphaVariant::QueryRankOfI`]). Iteration stops once two consecutive
//! rankings are identical.
//!
//! Each query is processed independently; the only shared input is the
//! immutable [`GalleryGraph`].

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingSet;
use crate::error::{Error, Result};
use crate::metrics::ap_of_ranking;
use crate::ranking::{argsort, pairwise_distances, rank_rows, ranks_from_order, DistanceMatrix, RankMatrix};
use crate::Scalar;

/// Which query rank feeds `alpha` for the term linking `j` to `i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlphaVariant {
    /// `alpha[r_qj]`: a term is damped when `j` itself ranks well for the query.
    #[default]
    QueryRankOfJ,
    /// `alpha[r_qi]`: one scale per item, factored out of the sum.
    QueryRankOfI,
}

impl fmt::Display for AlphaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlphaVariant::QueryRankOfJ => "query-j",
            AlphaVariant::QueryRankOfI => "query-i",
        })
    }
}

impl FromStr for AlphaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query-j" => Ok(AlphaVariant::QueryRankOfJ),
            "query-i" => Ok(AlphaVariant::QueryRankOfI),
            _ => Err(Error::InvalidConfig(format!(
                "alpha variant must be \"query-j\" or \"query-i\", got {s:?}"
            ))),
        }
    }
}

/// Size of the neighbour set `J` summed over in the penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MLimit {
    All,
    /// The `m` nearest gallery items under the current ranking (clamped to the
    /// gallery size).
    Top(usize),
}

impl MLimit {
    pub fn resolve(self, gallery_size: usize) -> usize {
        match self {
            MLimit::All => gallery_size,
            MLimit::Top(m) => m.min(gallery_size),
        }
    }
}

impl fmt::Display for MLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MLimit::All => f.write_str("all"),
            MLimit::Top(m) => write!(f, "{m}"),
        }
    }
}

impl FromStr for MLimit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MLimit::All),
            other => match other.parse::<usize>() {
                Ok(m) if m >= 1 => Ok(MLimit::Top(m)),
                _ => Err(Error::InvalidConfig(format!(
                    "m must be \"all\" or a positive integer, got {s:?}"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig<T> {
    /// Overall weight of the penalty against the running distance.
    pub beta: T,
    /// Scale of the gallery-gallery rank.
    pub gamma: T,
    /// Query rank up to which `alpha` stays on its low linear branch.
    pub k_cut: usize,
    pub alpha_low_slope: T,
    pub m_limit: MLimit,
    pub max_iters: usize,
    pub alpha_variant: AlphaVariant,
}

impl<T: Scalar> Default for RerankConfig<T> {
    fn default() -> Self {
        RerankConfig {
            beta: T::lit(0.1),
            gamma: T::lit(0.01),
            k_cut: 16,
            alpha_low_slope: T::lit(0.01),
            m_limit: MLimit::Top(16),
            max_iters: 1000,
            alpha_variant: AlphaVariant::QueryRankOfJ,
        }
    }
}

impl<T: Scalar> RerankConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let non_negative = |name: &str, v: T| {
            if v >= T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )))
            }
        };
        non_negative("beta", self.beta)?;
        non_negative("gamma", self.gamma)?;
        non_negative("alpha slope", self.alpha_low_slope)?;
        if self.k_cut == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max iterations must be >= 1".into()));
        }
        if self.m_limit == MLimit::Top(0) {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scale applied to a 1-based query rank.
pub fn alpha<T: Scalar>(rank: usize, cfg: &RerankConfig<T>) -> Result<T> {
    if rank == 0 {
        return Err(Error::InvalidRank(rank));
    }
    Ok(alpha_unchecked(rank, cfg))
}

#[inline]
fn alpha_unchecked<T: Scalar>(rank: usize, cfg: &RerankConfig<T>) -> T {
    if rank <= cfg.k_cut {
        cfg.alpha_low_slope * T::from_usize_lossy(rank)
    } else {
        T::one()
    }
}

/// Gallery-gallery distances and ranks, computed once and shared by every
/// query.
#[derive(Clone, Debug)]
pub struct GalleryGraph<T> {
    distances: DistanceMatrix<T>,
    ranks: RankMatrix,
    /// `weights[[j, i]] = r_ji * |f_i - f_j|`
    weights: Array2<T>,
}

impl<T: Scalar> GalleryGraph<T> {
    pub fn build(gallery: &EmbeddingSet<T>) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let distances = pairwise_distances(gallery, gallery)?;
        let ranks = rank_rows(&distances);
        Self::from_parts(distances, ranks)
    }

    pub fn from_parts(distances: DistanceMatrix<T>, ranks: RankMatrix) -> Result<Self> {
        let g = distances.rows();
        if g == 0 {
            return Err(Error::EmptyGallery);
        }
        if distances.cols() != g {
            return Err(Error::ShapeMismatch {
                context: "gallery-gallery distances",
                expected: (g, g),
                found: (g, distances.cols()),
            });
        }
        if (ranks.rows(), ranks.cols()) != (g, g) {
            return Err(Error::ShapeMismatch {
                context: "gallery-gallery ranks",
                expected: (g, g),
                found: (ranks.rows(), ranks.cols()),
            });
        }
        let weights = Array2::from_shape_fn((g, g), |(j, i)| {
            T::from_usize_lossy(ranks.rank(j, i)) * distances.get(j, i)
        });
        Ok(GalleryGraph {
            distances,
            ranks,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.distances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn distances(&self) -> &DistanceMatrix<T> {
        &self.distances
    }

    pub fn ranks(&self) -> &RankMatrix {
        &self.ranks
    }
}

/// Running query-gallery distances at iteration `t` and the ranking they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct RerankState<T> {
    pub distances: Vec<T>,
    pub iteration: usize,
    /// Gallery indices in ascending distance order.
    pub ranking: Vec<usize>,
    /// 1-based query rank of each gallery index.
    pub query_ranks: Vec<usize>,
}

impl<T: Scalar> RerankState<T> {
    fn from_distances(distances: Vec<T>, iteration: usize) -> Self {
        let ranking = argsort(&distances);
        let query_ranks = ranks_from_order(&ranking);
        RerankState {
            distances,
            iteration,
            ranking,
            query_ranks,
        }
    }
}

/// Iteration 0: Euclidean query-gallery distances.
pub fn init_rerank<T: Scalar>(query_row: &[T]) -> Result<RerankState<T>> {
    if query_row.is_empty() {
        return Err(Error::EmptyGallery);
    }
    Ok(RerankState::from_distances(query_row.to_vec(), 0))
}

/// Penalty each gallery item receives from one update of `state`.
pub fn penalties<T: Scalar>(
    state: &RerankState<T>,
    graph: &GalleryGraph<T>,
    cfg: &RerankConfig<T>,
) -> Result<Vec<T>> {
    let g = graph.len();
    if state.distances.len() != g || state.ranking.len() != g || state.query_ranks.len() != g {
        return Err(Error::ShapeMismatch {
            context: "rerank state vs gallery",
            expected: (g, g),
            found: (state.distances.len(), state.ranking.len()),
        });
    }
    let m = cfg.m_limit.resolve(g);
    let neighbours = &state.ranking[..m];
    let mut acc = vec![T::zero(); g];
    match cfg.alpha_variant {
        AlphaVariant::QueryRankOfJ => {
            for &j in neighbours {
                let a = alpha_unchecked(state.query_ranks[j], cfg);
                for (p, &w) in acc.iter_mut().zip(graph.weights.row(j)) {
                    *p += a * w;
                }
            }
        }
        AlphaVariant::QueryRankOfI => {
            for &j in neighbours {
                for (p, &w) in acc.iter_mut().zip(graph.weights.row(j)) {
                    *p += w;
                }
            }
            for (p, &r) in acc.iter_mut().zip(&state.query_ranks) {
                *p *= alpha_unchecked(r, cfg);
            }
        }
    }
    let scale = cfg.beta * cfg.gamma;
    Ok(acc.into_iter().map(|p| scale * p).collect())
}

/// One update: add penalties, re-rank, advance `t`.
pub fn rerank_step<T: Scalar>(
    state: &RerankState<T>,
    graph: &GalleryGraph<T>,
    cfg: &RerankConfig<T>,
) -> Result<RerankState<T>> {
    let p = penalties(state, graph, cfg)?;
    let distances = state.distances.iter().zip(p).map(|(&d, p)| d + p).collect();
    Ok(RerankState::from_distances(distances, state.iteration + 1))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convergence {
    /// Ranking at this iteration equals the previous one.
    ConvergedAt(usize),
    MaxItersHit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub iteration: usize,
    pub ranking: Option<Vec<usize>>,
    /// AP@all of this ranking, when relevance was supplied.
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankTrace {
    pub snapshots: Vec<Snapshot>,
    pub converged: Convergence,
}

impl RerankTrace {
    pub fn converged_at(&self) -> Option<usize> {
        match self.converged {
            Convergence::ConvergedAt(t) => Some(t),
            Convergence::MaxItersHit => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceOptions {
    /// Record every iteration up to 32, then every 8th (the last is always kept).
    pub thin: bool,
    pub keep_rankings: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            thin: true,
            keep_rankings: true,
        }
    }
}

impl TraceOptions {
    fn records(&self, iteration: usize) -> bool {
        !self.thin || iteration <= 32 || iteration.is_multiple_of(8)
    }
}

/// Iterates [`rerank_step`] until the ranking repeats or `max_iters` steps ran.
///
/// `relevance`, when given, holds one flag per gallery item and fills each
/// snapshot's AP@all.
pub fn rerank_until_converged<T: Scalar>(
    query_row: &[T],
    graph: &GalleryGraph<T>,
    cfg: &RerankConfig<T>,
    opts: &TraceOptions,
    relevance: Option<&[bool]>,
) -> Result<(RerankState<T>, RerankTrace)> {
    cfg.validate()?;
    if query_row.len() != graph.len() {
        return Err(Error::ShapeMismatch {
            context: "query row vs gallery",
            expected: (1, graph.len()),
            found: (1, query_row.len()),
        });
    }
    if let Some(rel) = relevance {
        if rel.len() != graph.len() {
            return Err(Error::ShapeMismatch {
                context: "relevance vs gallery",
                expected: (1, graph.len()),
                found: (1, rel.len()),
            });
        }
    }
    let snapshot = |s: &RerankState<T>| Snapshot {
        iteration: s.iteration,
        ranking: opts.keep_rankings.then(|| s.ranking.clone()),
        average_precision: relevance.and_then(|rel| ap_of_ranking(&s.ranking, rel)),
    };

    let mut state = init_rerank(query_row)?;
    let mut snapshots = vec![snapshot(&state)];
    let mut converged = Convergence::MaxItersHit;
    for _ in 0..cfg.max_iters {
        let next = rerank_step(&state, graph, cfg)?;
        let repeated = next.ranking == state.ranking;
        state = next;
        if repeated {
            converged = Convergence::ConvergedAt(state.iteration);
        }
        if repeated || opts.records(state.iteration) || state.iteration == cfg.max_iters {
            snapshots.push(snapshot(&state));
        }
        if repeated {
            break;
        }
    }
    Ok((
        state,
        RerankTrace {
            snapshots,
            converged,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutcome<T> {
    pub query_id: String,
    pub state: RerankState<T>,
    pub trace: RerankTrace,
}

/// Re-ranks every row of a precomputed query-gallery matrix, in parallel.
/// Output order follows the rows of `query_gallery`.
pub fn rerank_queries<T: Scalar>(
    query_gallery: &DistanceMatrix<T>,
    graph: &GalleryGraph<T>,
    cfg: &RerankConfig<T>,
    opts: &TraceOptions,
    relevance: Option<&[Vec<bool>]>,
) -> Result<Vec<QueryOutcome<T>>> {
    cfg.validate()?;
    if let Some(rel) = relevance {
        if rel.len() != query_gallery.rows() {
            return Err(Error::ShapeMismatch {
                context: "relevance rows vs queries",
                expected: (query_gallery.rows(), graph.len()),
                found: (rel.len(), graph.len()),
            });
        }
    }
    (0..query_gallery.rows())
        .into_par_iter()
        .map(|q| {
            let row = query_gallery.row(q).to_vec();
            let rel = relevance.map(|r| r[q].as_slice());
            let (state, trace) = rerank_until_converged(&row, graph, cfg, opts, rel)?;
            Ok(QueryOutcome {
                query_id: query_gallery.row_ids()[q].clone(),
                state,
                trace,
            })
        })
        .collect()
}

/// End-to-end: gallery graph once, then each query independently. When
/// `track_ap` is set, relevance comes from matching class labels.
pub fn rerank_gallery_against_queries<T: Scalar>(
    queries: &EmbeddingSet<T>,
    gallery: &EmbeddingSet<T>,
    cfg: &RerankConfig<T>,
    opts: &TraceOptions,
    track_ap: bool,
) -> Result<Vec<QueryOutcome<T>>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let query_gallery = pairwise_distances(queries, gallery)?;
    let graph = GalleryGraph::build(gallery)?;
    let relevance = track_ap.then(|| relevance_matrix(queries, gallery));
    rerank_queries(&query_gallery, &graph, cfg, opts, relevance.as_deref())
}

/// `out[q][g]` is true when gallery item `g` shares query `q`'s class.
pub fn relevance_matrix<T: Scalar>(queries: &EmbeddingSet<T>, gallery: &EmbeddingSet<T>) -> Vec<Vec<bool>> {
    queries
        .class_ids()
        .map(|qc| gallery.class_ids().map(|gc| gc == qc).collect())
        .collect()
}
