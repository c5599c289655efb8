//! Label accuracy, confusion matrices, accuracy by gold-document position,
//! margin-violation rates, and the JSON report that bundles them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, Label, Response, Task};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelParams, Scalar};
use crate::ordering::{Orderer, PreferencePair};
use crate::par::{self, Exec};
use crate::scoring::{score_candidates, LambdaTable, ScoredResponse, SourceTag};
use crate::vocab::{TokenSequence, Vocab};

/// Longest response decoded at test time.
pub const MAX_RESPONSE_TOKENS: usize = 40;

/// Produces one response per test instance.
pub trait Responder: Sync {
    fn respond(&self, set: &CandidateSet) -> Result<Response>;
}

/// Greedy decoding from a model.
pub struct GreedyResponder<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub vocab: &'a Vocab,
}

impl<T: Scalar> Responder for GreedyResponder<'_, T> {
    fn respond(&self, set: &CandidateSet) -> Result<Response> {
        let (r, _) = predict_label(self.params, self.vocab, &set.prompt_tokens)?;
        Ok(match &set.multidoc {
            Some(md) => md.label_answer(&r.text, r.source, self.vocab),
            None => r,
        })
    }
}

/// Greedy decode, parsed. The label may be `Unparseable`.
pub fn predict_label<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    prompt: &TokenSequence,
) -> Result<(Response, Label)> {
    let room = params.config().context_len.saturating_sub(prompt.len());
    let toks = greedy_decode(params, prompt, room.min(MAX_RESPONSE_TOKENS))?;
    let r = Response::from_text(&vocab.decode(toks.ids()), SourceTag::LocalModel, vocab);
    let l = r.label;
    Ok((r, l))
}

pub fn predict_all(responder: &dyn Responder, testset: &[CandidateSet], exec: Exec) -> Result<Vec<Response>> {
    par::map(exec, testset, |s| responder.respond(s)).into_iter().collect()
}

/// Whether a prediction counts as correct: substring match on the answer
/// phrase for multi-document QA, exact label match otherwise.
pub fn is_correct(set: &CandidateSet, pred: &Response) -> bool {
    match &set.multidoc {
        Some(md) => md.is_correct(&pred.text),
        None => pred.label.is_parseable() && Some(pred.label) == set.gold_label,
    }
}

/// Fraction of predictions that are correct.
pub fn accuracy(testset: &[CandidateSet], preds: &[Response]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Domain("accuracy of an empty test set".into()));
    }
    if testset.len() != preds.len() {
        return Err(Error::Domain("one prediction per instance required".into()));
    }
    let hits = testset.iter().zip(preds).filter(|(s, p)| is_correct(s, p)).count();
    Ok(hits as f64 / testset.len() as f64)
}

pub fn label_accuracy(responder: &dyn Responder, testset: &[CandidateSet], exec: Exec) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Domain("accuracy of an empty test set".into()));
    }
    accuracy(testset, &predict_all(responder, testset, exec)?)
}

/// Rows are gold labels, columns predicted labels. Predictions outside the
/// label set (including unparseable ones) land in `other`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<Label>,
    pub counts: Vec<Vec<usize>>,
    pub other: Vec<usize>,
}

impl ConfusionMatrix {
    /// The label set is QA when any gold label is a QA label, NLI otherwise.
    pub fn from_labels(preds: &[Label], golds: &[Label]) -> Result<Self> {
        if preds.len() != golds.len() {
            return Err(Error::Domain(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
        }
        let labels: Vec<Label> = if golds.iter().any(|g| g.is_qa()) {
            Label::QA.to_vec()
        } else {
            Label::NLI.to_vec()
        };
        let k = labels.len();
        let mut m = ConfusionMatrix {
            counts: vec![vec![0; k]; k],
            other: vec![0; k],
            labels,
        };
        for (p, g) in preds.iter().zip(golds) {
            let row = m
                .labels
                .iter()
                .position(|l| l == g)
                .ok_or_else(|| Error::Domain(format!("gold label {g} outside the task label set")))?;
            match m.labels.iter().position(|l| l == p) {
                Some(col) => m.counts[row][col] += 1,
                None => m.other[row] += 1,
            }
        }
        Ok(m)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() + self.other.iter().sum::<usize>()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.diagonal() as f64 / n as f64,
        }
    }

    /// Share of all predictions that are `Neutral`.
    pub fn neutral_share(&self) -> f64 {
        let Some(col) = self.labels.iter().position(|&l| l == Label::Neutral) else {
            return 0.0;
        };
        match self.total() {
            0 => 0.0,
            n => self.counts.iter().map(|r| r[col]).sum::<usize>() as f64 / n as f64,
        }
    }
}

/// Accuracy per gold-document position plus the unweighted mean over
/// positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionTable {
    pub positions: BTreeMap<usize, f64>,
    pub average: f64,
}

impl PositionTable {
    pub fn from_accuracies(positions: BTreeMap<usize, f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Domain("position table needs at least one position".into()));
        }
        let average = positions.values().sum::<f64>() / positions.len() as f64;
        Ok(PositionTable { positions, average })
    }
}

/// Buckets multi-doc instances by gold position; each bucket must be
/// non-empty.
pub fn accuracy_by_gold_position(testset: &[CandidateSet], preds: &[Response]) -> Result<PositionTable> {
    if testset.len() != preds.len() {
        return Err(Error::Domain("one prediction per instance required".into()));
    }
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (s, p) in testset.iter().zip(preds) {
        let md = s
            .multidoc
            .as_ref()
            .ok_or_else(|| Error::Domain(format!("{} is not a multi-document instance", s.instance_id)))?;
        let b = buckets.entry(md.gold_doc_position).or_default();
        b.1 += 1;
        if md.is_correct(&p.text) {
            b.0 += 1;
        }
    }
    PositionTable::from_accuracies(buckets.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect())
}

/// Fraction of pairs with `score(hi) - score(lo) < margin`.
pub fn margin_violation_rate(scores: &[f64], pairs: &[PreferencePair], margin: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Domain("margin violation rate of an empty pair list".into()));
    }
    let v = pairs.iter().filter(|p| scores[p.hi] - scores[p.lo] < margin).count();
    Ok(v as f64 / pairs.len() as f64)
}

/// Violation rate pooled over every pair of every instance.
pub fn pooled_violation_rate(scored: &[Vec<ScoredResponse>], pairs: &[Vec<PreferencePair>], margin: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut bad = 0.0;
    for (s, p) in scored.iter().zip(pairs) {
        if p.is_empty() {
            continue;
        }
        let scores: Vec<f64> = s.iter().map(|x| x.normalized_score).collect();
        bad += margin_violation_rate(&scores, p, margin)? * p.len() as f64;
        total += p.len();
    }
    if total == 0 {
        return Err(Error::Domain("margin violation rate of an empty pair list".into()));
    }
    Ok(bad / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: Task,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub n_instances: usize,
    pub accuracy: f64,
    pub confusion_matrix: ConfusionMatrix,
    pub neutral_share: f64,
    pub position_table: Option<PositionTable>,
    pub margin_violation_rate: Option<f64>,
    pub score_csv_path: Option<String>,
}

/// Everything `evaluate` computes, before it is written anywhere.
pub struct Evaluation {
    pub report: Report,
    pub predictions: Vec<Response>,
    pub scores: Vec<Vec<ScoredResponse>>,
}

pub struct EvalOptions<'a> {
    /// Source of preference pairs for the violation rate; `None` skips it.
    pub orderer: Option<&'a Orderer>,
    pub lambdas: LambdaTable,
    pub margin: f64,
    pub exec: Exec,
}

pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    testset: &[CandidateSet],
    opts: &EvalOptions<'_>,
) -> Result<Evaluation> {
    let first = testset.first().ok_or_else(|| Error::Domain("empty test set".into()))?;
    let task = first.task;
    if testset.iter().any(|s| s.task != task) {
        return Err(Error::Domain("test set mixes tasks".into()));
    }
    let preds = predict_all(&GreedyResponder { params, vocab }, testset, opts.exec)?;
    let acc = accuracy(testset, &preds)?;
    let golds: Vec<Label> = testset.iter().map(|s| s.gold_label.unwrap_or(Label::Unparseable)).collect();
    let labels: Vec<Label> = preds.iter().map(|p| p.label).collect();
    let cm = ConfusionMatrix::from_labels(&labels, &golds)?;
    let position_table = match task {
        Task::Multidoc => Some(accuracy_by_gold_position(testset, &preds)?),
        Task::Nli => None,
    };
    let scores: Vec<Vec<ScoredResponse>> = par::map(opts.exec, testset, |s| score_candidates(params, s, &opts.lambdas))
        .into_iter()
        .collect::<Result<_>>()?;
    let margin_violation_rate = match opts.orderer {
        Some(o) => {
            let pairs: Vec<Vec<PreferencePair>> = testset.iter().map(|s| o.pairs(s)).collect::<Result<_>>()?;
            if pairs.iter().all(Vec::is_empty) {
                None
            } else {
                Some(pooled_violation_rate(&scores, &pairs, opts.margin)?)
            }
        }
        None => None,
    };
    Ok(Evaluation {
        report: Report {
            task,
            strategy: opts.orderer.map(|o| o.strategy.as_str().to_string()),
            seed: None,
            n_instances: testset.len(),
            accuracy: acc,
            neutral_share: cm.neutral_share(),
            confusion_matrix: cm,
            position_table,
            margin_violation_rate,
            score_csv_path: None,
        },
        predictions: preds,
        scores,
    })
}
