use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::CandidateSet;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Scalar};

/// Where a candidate response came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Human,
    LocalModel,
    ExternalModel,
    Flipped,
}

impl SourceTag {
    pub const ALL: [SourceTag; 4] = [
        SourceTag::Human,
        SourceTag::LocalModel,
        SourceTag::ExternalModel,
        SourceTag::Flipped,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Human => "human",
            SourceTag::LocalModel => "local_model",
            SourceTag::ExternalModel => "external_model",
            SourceTag::Flipped => "flipped",
        }
    }

    pub fn is_model(self) -> bool {
        self != SourceTag::Human
    }
}

impl std::str::FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown source tag {s:?}")))
    }
}

/// Length-normalization exponent per source. Flipped responses are
/// model-authored and share the model exponent by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaTable {
    pub human: f64,
    pub local_model: f64,
    pub external_model: f64,
    pub flipped: f64,
}

impl Default for LambdaTable {
    fn default() -> Self {
        LambdaTable::new(1.0, 0.85).expect("default lambdas are positive")
    }
}

impl LambdaTable {
    /// `human` for human responses, `model` for every model-derived tag.
    pub fn new(human: f64, model: f64) -> Result<Self> {
        let t = LambdaTable {
            human,
            local_model: model,
            external_model: model,
            flipped: model,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn uniform(lambda: f64) -> Result<Self> {
        LambdaTable::new(lambda, lambda)
    }

    pub fn validate(&self) -> Result<()> {
        for tag in SourceTag::ALL {
            let l = self.get(tag);
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda for {} must be positive, got {l}", tag.as_str())));
            }
        }
        Ok(())
    }

    pub fn get(&self, tag: SourceTag) -> f64 {
        match tag {
            SourceTag::Human => self.human,
            SourceTag::LocalModel => self.local_model,
            SourceTag::ExternalModel => self.external_model,
            SourceTag::Flipped => self.flipped,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredResponse {
    pub index: usize,
    pub token_count: usize,
    pub total_logprob: f64,
    pub lambda: f64,
    pub normalized_score: f64,
}

impl ScoredResponse {
    pub fn from_logprobs(index: usize, token_logprobs: &[f64], lambda: f64) -> Result<Self> {
        let normalized_score = normalized_score(token_logprobs, lambda)?;
        Ok(ScoredResponse {
            index,
            token_count: token_logprobs.len(),
            total_logprob: token_logprobs.iter().sum(),
            lambda,
            normalized_score,
        })
    }
}

/// Sum of token log-probabilities divided by `len^lambda`.
pub fn normalized_score(token_logprobs: &[f64], lambda: f64) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Domain("cannot score an empty response".into()));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    let total: f64 = token_logprobs.iter().sum();
    Ok(total / length_divisor(token_logprobs.len(), lambda))
}

pub(crate) fn length_divisor(len: usize, lambda: f64) -> f64 {
    (len as f64).powf(lambda)
}

/// Checks that every candidate fits next to the prompt in the context window.
pub fn check_fits<T: Scalar>(params: &ModelParams<T>, set: &CandidateSet) -> Result<()> {
    let max = params.config().context_len;
    for (index, c) in set.candidates.iter().enumerate() {
        let len = set.prompt_tokens.len() + c.target().len();
        if len > max {
            return Err(Error::CandidateOverflow { index, len, max });
        }
    }
    Ok(())
}

/// Scores every candidate of `set` in input order. Responses are scored with
/// a trailing `<eos>`, which is what the model is trained to emit.
pub fn score_candidates<T: Scalar>(
    params: &ModelParams<T>,
    set: &CandidateSet,
    lambdas: &LambdaTable,
) -> Result<Vec<ScoredResponse>> {
    check_fits(params, set)?;
    set.candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let lp = params.sequence_logprobs(&set.prompt_tokens, &c.target())?;
            ScoredResponse::from_logprobs(i, &lp, lambdas.get(c.source))
        })
        .collect()
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    instance_id: &'a str,
    candidate_idx: usize,
    source: &'a str,
    token_count: usize,
    total_logprob: f64,
    lambda: f64,
    normalized_score: f64,
}

/// Writes score-distribution rows for a batch of scored instances.
pub fn write_score_csv<W: Write>(
    w: W,
    rows: &[(&CandidateSet, &[ScoredResponse])],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (set, scores) in rows {
        for s in scores.iter() {
            out.serialize(ScoreRow {
                instance_id: &set.instance_id,
                candidate_idx: s.index,
                source: set.candidates[s.index].source.as_str(),
                token_count: s.token_count,
                total_logprob: s.total_logprob,
                lambda: s.lambda,
                normalized_score: s.normalized_score,
            })
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Domain(format!("csv: {other:?}")),
    }
}
