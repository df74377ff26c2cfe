//! Retrieval quality: Precision@k, Average Precision, mAP@k.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How far down each ranked list a metric looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cutoff {
    All,
    K(usize),
}

impl Cutoff {
    /// Number of list positions considered for a list of length `len`.
    pub fn resolve(self, len: usize) -> usize {
        match self {
            Cutoff::All => len,
            Cutoff::K(k) => k.min(len),
        }
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cutoff::All => f.write_str("all"),
            Cutoff::K(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Cutoff::All),
            other => match other.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Cutoff::K(k)),
                _ => Err(Error::InvalidConfig(format!(
                    "cutoff must be \"all\" or a positive integer, got {s:?}"
                ))),
            },
        }
    }
}

/// Normaliser of AP@k.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApDenominator {
    /// `min(k, R)`: a perfect top-k list scores 1.
    #[default]
    MinKR,
    /// `R`, the total number of relevant gallery items.
    R,
}

impl fmt::Display for ApDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ApDenominator::MinKR => f.write_str("min-k-r"),
            ApDenominator::R => f.write_str("r"),
        }
    }
}

impl FromStr for ApDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min-k-r" => Ok(ApDenominator::MinKR),
            "r" => Ok(ApDenominator::R),
            _ => Err(Error::InvalidConfig(format!(
                "ap denominator must be \"min-k-r\" or \"r\", got {s:?}"
            ))),
        }
    }
}

/// One query's ranked gallery list with per-position relevance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked_gallery_ids: Vec<String>,
    pub relevance: Vec<bool>,
    /// Relevant items in the whole gallery (`R`), which may exceed those in
    /// a truncated list.
    pub total_relevant: usize,
}

impl RetrievalResult {
    pub fn new(
        query_id: impl Into<String>,
        ranked_gallery_ids: Vec<String>,
        relevance: Vec<bool>,
        total_relevant: usize,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let invalid = |message: String| Error::InvalidResult {
            query_id: query_id.clone(),
            message,
        };
        if ranked_gallery_ids.len() != relevance.len() {
            return Err(invalid(format!(
                "{} ids but {} relevance flags",
                ranked_gallery_ids.len(),
                relevance.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ranked_gallery_ids.len());
        if let Some(dup) = ranked_gallery_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(invalid(format!("gallery id {dup:?} ranked twice")));
        }
        let listed = relevance.iter().filter(|&&r| r).count();
        if total_relevant < listed {
            return Err(invalid(format!(
                "total_relevant {total_relevant} below {listed} relevant items listed"
            )));
        }
        Ok(RetrievalResult {
            query_id,
            ranked_gallery_ids,
            relevance,
            total_relevant,
        })
    }

    /// For a list covering the whole gallery: `R` is the count of relevant flags.
    pub fn from_full_ranking(
        query_id: impl Into<String>,
        ranked_gallery_ids: Vec<String>,
        relevance: Vec<bool>,
    ) -> Result<Self> {
        let total = relevance.iter().filter(|&&r| r).count();
        Self::new(query_id, ranked_gallery_ids, relevance, total)
    }

    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }
}

/// Fraction of the top `k` items that are relevant. Requires `1 <= k <= len`.
pub fn precision_at_k(result: &RetrievalResult, k: usize) -> Result<f64> {
    if k == 0 || k > result.len() {
        return Err(Error::CutoffOutOfRange {
            k,
            len: result.len(),
        });
    }
    let hits = result.relevance[..k].iter().filter(|&&r| r).count();
    Ok(hits as f64 / k as f64)
}

/// AP@k = sum over relevant positions i <= k of Precision@i, divided by the
/// chosen denominator. `k` beyond the list length is clamped to it.
pub fn average_precision(
    result: &RetrievalResult,
    cutoff: Cutoff,
    denominator: ApDenominator,
) -> Result<f64> {
    if result.total_relevant == 0 {
        return Err(Error::NoRelevantItems {
            query_id: result.query_id.clone(),
        });
    }
    let k = cutoff.resolve(result.len());
    Ok(ap_of_flags(&result.relevance, k, result.total_relevant, denominator))
}

/// AP over the first `k` flags. `total_relevant` must be positive.
pub fn ap_of_flags(
    relevance: &[bool],
    k: usize,
    total_relevant: usize,
    denominator: ApDenominator,
) -> f64 {
    debug_assert!(total_relevant > 0);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, _) in relevance.iter().take(k).enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    let denom = match denominator {
        ApDenominator::MinKR => k.min(total_relevant),
        ApDenominator::R => total_relevant,
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

/// AP@all of an ordering of gallery indices, given per-gallery relevance.
/// `None` when nothing is relevant.
pub fn ap_of_ranking(ranking: &[usize], relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let flags: Vec<bool> = ranking.iter().map(|&g| relevant[g]).collect();
    Some(ap_of_flags(&flags, flags.len(), total, ApDenominator::R))
}

/// Unweighted mean of per-query AP@k.
pub fn mean_average_precision(
    results: &[RetrievalResult],
    cutoff: Cutoff,
    denominator: ApDenominator,
) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut sum = 0.0;
    for r in results {
        sum += average_precision(r, cutoff, denominator)?;
    }
    Ok(sum / results.len() as f64)
}

/// Unweighted mean of per-query Precision@k.
pub fn mean_precision_at_k(results: &[RetrievalResult], k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut sum = 0.0;
    for r in results {
        sum += precision_at_k(r, k)?;
    }
    Ok(sum / results.len() as f64)
}
