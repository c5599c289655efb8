//! Training losses: SFT likelihood, pairwise hinge over preference pairs,
//! their weighted sum, and a listwise softmax baseline.

use serde::{Deserialize, Serialize};

use crate::data::CandidateSet;
use crate::error::{Error, Result};
use crate::model::{loss_gradients, Gradients, LossValue, ModelParams, Scalar};
use crate::ordering::PreferencePair;
use crate::scoring::{length_divisor, LambdaTable, ScoredResponse};
use crate::vocab::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SftOnly,
    RankOnly,
    Combined,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SftOnly => "sft_only",
            Mode::RankOnly => "rank_only",
            Mode::Combined => "combined",
        }
    }

    pub fn needs_gold(self) -> bool {
        self != Mode::RankOnly
    }

    pub fn uses_rank(self) -> bool {
        self != Mode::SftOnly
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::SftOnly, Mode::RankOnly, Mode::Combined]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub alpha: f64,
    pub margin: f64,
    pub mode: Mode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            alpha: 0.05,
            margin: 0.1,
            mode: Mode::Combined,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Hinge value, its derivative with respect to each score, and the number
/// of pairs whose score gap falls short of the margin.
#[derive(Clone, Debug, PartialEq)]
pub struct HingeEval {
    pub value: f64,
    pub dscores: Vec<f64>,
    pub violations: usize,
}

/// Mean over pairs of `max(0, margin - (s_hi - s_lo))`. No pairs gives 0.
pub fn hinge_eval(scores: &[f64], pairs: &[PreferencePair], margin: f64) -> HingeEval {
    let mut dscores = vec![0.0; scores.len()];
    let mut total = 0.0;
    let mut violations = 0;
    if pairs.is_empty() {
        return HingeEval { value: 0.0, dscores, violations };
    }
    let w = 1.0 / pairs.len() as f64;
    for p in pairs {
        let slack = margin - (scores[p.hi] - scores[p.lo]);
        if slack > 0.0 {
            total += slack;
            violations += 1;
            dscores[p.hi] -= w;
            dscores[p.lo] += w;
        }
    }
    HingeEval { value: total * w, dscores, violations }
}

pub fn hinge_rank_loss(scores: &[ScoredResponse], pairs: &[PreferencePair], margin: f64) -> f64 {
    let s: Vec<f64> = scores.iter().map(|s| s.normalized_score).collect();
    hinge_eval(&s, pairs, margin).value
}

/// `-log softmax(scores)[best]` and its gradient.
pub fn listwise_eval(scores: &[f64], best: usize) -> Result<(f64, Vec<f64>)> {
    if scores.len() < 2 {
        return Err(Error::Domain(format!("listwise loss needs at least 2 scores, got {}", scores.len())));
    }
    if best >= scores.len() {
        return Err(Error::Domain(format!("best index {best} out of range")));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let lse = m + z.ln();
    let grad = scores
        .iter()
        .enumerate()
        .map(|(i, s)| (s - lse).exp() - if i == best { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - scores[best], grad))
}

pub fn listwise_reward_loss(scores: &[f64], best: usize) -> Result<f64> {
    Ok(listwise_eval(scores, best)?.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub rank: f64,
    pub total: f64,
    pub violations: usize,
    pub pairs: usize,
}

/// `-sum log p(y* | x)` for the gold response.
pub fn sft_loss<T: Scalar>(params: &ModelParams<T>, prompt: &TokenSequence, gold: &TokenSequence) -> Result<f64> {
    Ok(-params.sequence_logprobs(prompt, gold)?.iter().sum::<f64>())
}

/// Which candidates a loss touches, and where the gold response sits.
struct Plan {
    seqs: Vec<usize>,
    gold: Option<usize>,
}

fn plan(set: &CandidateSet, pairs: &[PreferencePair], cfg: &ObjectiveConfig) -> Result<Plan> {
    let gold = if cfg.mode.needs_gold() {
        Some(set.gold_response_index.ok_or_else(|| {
            Error::Config(format!("{}: {} needs a gold response", set.instance_id, cfg.mode.as_str()))
        })?)
    } else {
        None
    };
    let mut seqs: Vec<usize> = Vec::new();
    if cfg.mode.uses_rank() {
        for p in pairs {
            if p.hi >= set.candidates.len() || p.lo >= set.candidates.len() {
                return Err(Error::Domain(format!("{}: pair {p:?} out of range", set.instance_id)));
            }
            seqs.extend([p.hi, p.lo]);
        }
    }
    seqs.extend(gold);
    seqs.sort_unstable();
    seqs.dedup();
    Ok(Plan { seqs, gold })
}

/// Loss for one instance in `cfg.mode`, plus its gradient.
pub fn instance_gradients<T: Scalar>(
    params: &ModelParams<T>,
    set: &CandidateSet,
    pairs: &[PreferencePair],
    cfg: &ObjectiveConfig,
    lambdas: &LambdaTable,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let plan = plan(set, pairs, cfg)?;
    if plan.seqs.is_empty() {
        return Ok((LossBreakdown::default(), params.zero_grads()));
    }
    let targets: Vec<TokenSequence> = plan.seqs.iter().map(|&i| set.candidates[i].target()).collect();
    let seq_pairs: Vec<_> = targets.iter().map(|t| (&set.prompt_tokens, t)).collect();
    let mut breakdown = LossBreakdown {
        pairs: if cfg.mode.uses_rank() { pairs.len() } else { 0 },
        ..Default::default()
    };
    let (_, grads) = loss_gradients(params, &seq_pairs, |lps| {
        let (b, lv) = combine(set, pairs, cfg, lambdas, &plan, lps);
        breakdown = b;
        Ok(lv)
    })?;
    Ok((breakdown, grads))
}

/// Forward-only version of [`instance_gradients`].
pub fn instance_loss<T: Scalar>(
    params: &ModelParams<T>,
    set: &CandidateSet,
    pairs: &[PreferencePair],
    cfg: &ObjectiveConfig,
    lambdas: &LambdaTable,
) -> Result<LossBreakdown> {
    let plan = plan(set, pairs, cfg)?;
    let lps = plan
        .seqs
        .iter()
        .map(|&i| params.sequence_logprobs(&set.prompt_tokens, &set.candidates[i].target()))
        .collect::<Result<Vec<_>>>()?;
    let (b, lv) = combine(set, pairs, cfg, lambdas, &plan, &lps);
    if !lv.value.is_finite() {
        return Err(Error::Numeric(format!("{}: loss is not finite", set.instance_id)));
    }
    Ok(b)
}

fn combine(
    set: &CandidateSet,
    pairs: &[PreferencePair],
    cfg: &ObjectiveConfig,
    lambdas: &LambdaTable,
    plan: &Plan,
    lps: &[Vec<f64>],
) -> (LossBreakdown, LossValue) {
    let mut lv = LossValue::zeros_like(0.0, lps);
    let slot = |cand: usize| plan.seqs.binary_search(&cand).expect("planned sequence");
    let mut b = LossBreakdown::default();

    if let Some(g) = plan.gold {
        let k = slot(g);
        b.sft = -lps[k].iter().sum::<f64>();
        lv.dlogprobs[k].iter_mut().for_each(|d| *d -= 1.0);
    }
    if cfg.mode.uses_rank() && !pairs.is_empty() {
        let n = set.candidates.len();
        let mut scores = vec![0.0; n];
        let mut div = vec![1.0; n];
        for (k, &i) in plan.seqs.iter().enumerate() {
            div[i] = length_divisor(lps[k].len(), lambdas.get(set.candidates[i].source));
            scores[i] = lps[k].iter().sum::<f64>() / div[i];
        }
        let h = hinge_eval(&scores, pairs, cfg.margin);
        b.rank = h.value;
        b.violations = h.violations;
        b.pairs = pairs.len();
        let w = if cfg.mode == Mode::Combined { cfg.alpha } else { 1.0 };
        for (k, &i) in plan.seqs.iter().enumerate() {
            let d = w * h.dscores[i] / div[i];
            if d != 0.0 {
                lv.dlogprobs[k].iter_mut().for_each(|x| *x += d);
            }
        }
    }
    b.total = match cfg.mode {
        Mode::SftOnly => b.sft,
        Mode::RankOnly => b.rank,
        Mode::Combined => b.sft + cfg.alpha * b.rank,
    };
    lv.value = b.total;
    (b, lv)
}

/// Listwise softmax loss over the normalized scores of every candidate,
/// with all probability mass assigned to `best`.
pub fn listwise_gradients<T: Scalar>(
    params: &ModelParams<T>,
    set: &CandidateSet,
    best: usize,
    lambdas: &LambdaTable,
) -> Result<(f64, Gradients<T>)> {
    let targets: Vec<TokenSequence> = set.candidates.iter().map(|c| c.target()).collect();
    let seq_pairs: Vec<_> = targets.iter().map(|t| (&set.prompt_tokens, t)).collect();
    loss_gradients(params, &seq_pairs, |lps| {
        let div: Vec<f64> = lps
            .iter()
            .zip(&set.candidates)
            .map(|(lp, c)| length_divisor(lp.len(), lambdas.get(c.source)))
            .collect();
        let scores: Vec<f64> = lps.iter().zip(&div).map(|(lp, d)| lp.iter().sum::<f64>() / d).collect();
        let (value, g) = listwise_eval(&scores, best)?;
        Ok(LossValue {
            value,
            dlogprobs: lps.iter().zip(g.iter().zip(&div)).map(|(lp, (gi, d))| vec![gi / d; lp.len()]).collect(),
        })
    })
}
