//! JSON input of `loss-eval`.
//!
//! ```json
//! {
//!   "embeddings_a": [[...], ...], "labels_a": [0, 1, ...],
//!   "embeddings_b": [[...], ...], "labels_b": [0, 1, ...],
//!   "logits_a": [[...], ...], "logits_b": [[...], ...],
//!   "attention": {
//!     "teacher": {"w_q": [[...]], "w_k": [[...]], "w_v": [[...]], "softmax": true},
//!     "student": {"w_q": [[...]], "w_k": [[...]], "w_v": [[...]], "softmax": true},
//!     "pairs": [{"a": [[...]], "b": [[...]]}]
//!   }
//! }
//! ```
//!
//! Logits and attention are optional.

use crossrank_core::attention::{AttentionParams, TokenSequence};
use crossrank_core::losses::{CadFeatures, DomainBatch};
use crossrank_core::Error;
use ndarray::Array2;
use serde::Deserialize;

use crate::error::CliResult;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsArg {
    #[serde(default = "one")]
    pub triplet: f64,
    #[serde(default = "one")]
    pub cad: f64,
    #[serde(default = "one")]
    pub ce: f64,
}

fn one() -> f64 {
    1.0
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    embeddings_a: Rows,
    labels_a: Vec<u32>,
    embeddings_b: Rows,
    labels_b: Vec<u32>,
    #[serde(default)]
    logits_a: Option<Rows>,
    #[serde(default)]
    logits_b: Option<Rows>,
    #[serde(default)]
    attention: Option<AttentionInput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionInput {
    teacher: ParamsInput,
    student: ParamsInput,
    pairs: Vec<PairInput>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsInput {
    w_q: Rows,
    w_k: Rows,
    w_v: Rows,
    #[serde(default = "yes")]
    softmax: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairInput {
    a: Rows,
    b: Rows,
}

fn matrix(rows: Rows, context: &'static str) -> CliResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::ShapeMismatch {
            context,
            expected: (n, d),
            found: (n, bad.len()),
        }
        .into());
    }
    let flat = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, d), flat).expect("rows checked to be rectangular"))
}

impl ParamsInput {
    fn build(self) -> CliResult<AttentionParams<f64>> {
        Ok(AttentionParams::new(
            matrix(self.w_q, "w_q")?,
            matrix(self.w_k, "w_k")?,
            matrix(self.w_v, "w_v")?,
            self.softmax,
        )?)
    }
}

impl BatchFile {
    pub fn into_inputs(self) -> CliResult<(DomainBatch<f64>, Option<CadFeatures<f64>>)> {
        let mut batch = DomainBatch::new(
            matrix(self.embeddings_a, "embeddings_a")?,
            self.labels_a,
            matrix(self.embeddings_b, "embeddings_b")?,
            self.labels_b,
        )?;
        match (self.logits_a, self.logits_b) {
            (Some(a), Some(b)) => {
                batch = batch.with_logits(matrix(a, "logits_a")?, matrix(b, "logits_b")?)?;
            }
            (None, None) => {}
            _ => return Err(Error::MissingInput("logits for both domains").into()),
        }
        let features = match self.attention {
            None => None,
            Some(att) => {
                let teacher = att.teacher.build()?;
                let student = att.student.build()?;
                let pairs = att
                    .pairs
                    .into_iter()
                    .map(|p| {
                        Ok((
                            TokenSequence::new(matrix(p.a, "pair tokens")?)?,
                            TokenSequence::new(matrix(p.b, "pair tokens")?)?,
                        ))
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                Some(CadFeatures::from_pairs(&pairs, &teacher, &student)?)
            }
        };
        Ok((batch, features))
    }
}
