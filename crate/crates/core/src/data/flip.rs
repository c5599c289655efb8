//! Response flipping: rewrite a rationale to claim the opposite, then let a
//! labeler decide which label the new rationale supports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CandidateSet, Label, Response};
use crate::error::{Error, Result};
use crate::scoring::SourceTag;
use crate::vocab::Vocab;

/// Rewrites a rationale so that it conveys the opposite meaning.
pub trait Inverter {
    fn invert(&self, rationale: &str) -> Result<String>;
}

/// Predicts the label a rationale supports, given the task context.
pub trait Labeler {
    fn label(&self, context: &str, rationale: &str) -> Result<Label>;
}

/// Comparator swaps applied to the closing clause. Longer patterns come
/// first so that "does not rule out" is not read as "rules out".
const SWAPS: [(&str, &str); 8] = [
    ("does not rule out", "rules out"),
    ("rules out", "does not rule out"),
    ("does not equal", "equals"),
    ("equals", "does not equal"),
    ("is at least", "is less than"),
    ("is less than", "is at least"),
    ("mentions no", "mentions some"),
    ("mentions some", "mentions no"),
];

/// What each closing-clause comparator claims about the hypothesis.
const CLAIMS: [(&str, Label); 8] = [
    ("does not rule out", Label::Neutral),
    ("rules out", Label::Contradiction),
    ("does not equal", Label::Contradiction),
    ("equals", Label::Entailment),
    ("is at least", Label::Entailment),
    ("is less than", Label::Contradiction),
    ("mentions no", Label::Neutral),
    ("mentions some", Label::Entailment),
];

fn split_clause(rationale: &str) -> (&str, &str) {
    match rationale.rfind(" , ") {
        Some(p) => (&rationale[..p + 3], &rationale[p + 3..]),
        None => ("", rationale),
    }
}

/// Rule-based inverter for counting-NLI rationales. Negates the comparator in
/// the clause after the last comma; applying it twice is the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleInverter;

impl Inverter for RuleInverter {
    fn invert(&self, rationale: &str) -> Result<String> {
        let (head, clause) = split_clause(rationale);
        for (from, to) in SWAPS {
            if let Some(p) = clause.find(from) {
                return Ok(format!("{head}{}{to}{}", &clause[..p], &clause[p + from.len()..]));
            }
        }
        Err(Error::Domain(format!("no invertible comparator in {rationale:?}")))
    }
}

/// Labels a counting-NLI rationale by the claim its closing clause makes.
#[derive(Clone, Copy, Debug, Default)]
pub struct RuleLabeler;

impl Labeler for RuleLabeler {
    fn label(&self, _context: &str, rationale: &str) -> Result<Label> {
        let (_, clause) = split_clause(rationale);
        CLAIMS
            .iter()
            .find(|(pat, _)| clause.contains(pat))
            .map(|&(_, l)| l)
            .ok_or_else(|| Error::Protocol(format!("labeler found no claim in {rationale:?}")))
    }
}

/// Replaces the rationale with its inversion and relabels it. `context` is
/// the prompt the response answers.
pub fn flip_response(
    resp: &Response,
    context: &str,
    inverter: &dyn Inverter,
    labeler: &dyn Labeler,
    vocab: &Vocab,
) -> Result<Response> {
    if !resp.label.is_parseable() {
        return Err(Error::Domain(format!("cannot flip unparseable response {:?}", resp.text)));
    }
    let inverted = inverter.invert(&resp.rationale)?;
    if inverted.trim().is_empty() {
        return Err(Error::Protocol("inverter returned empty text".into()));
    }
    let label = labeler.label(context, &inverted)?;
    let mut out = Response::new(&inverted, label, SourceTag::Flipped, vocab);
    out.extra = resp.extra.clone();
    Ok(out)
}

/// Flips `round(fraction * m)` of the `m` model-written candidates across
/// `sets`, chosen uniformly by `seed`. Flipped candidates replace their
/// originals in place. Returns the number flipped.
pub fn flip_share(
    sets: &mut [CandidateSet],
    fraction: f64,
    seed: u64,
    inverter: &dyn Inverter,
    labeler: &dyn Labeler,
    vocab: &Vocab,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("flip fraction must be in [0, 1], got {fraction}")));
    }
    let mut slots: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.source.is_model())
                .map(move |(j, _)| (i, j))
        })
        .collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (fraction * slots.len() as f64).round() as usize;
    for &(i, j) in &slots[..k] {
        let set = &mut sets[i];
        set.candidates[j] = flip_response(&set.candidates[j], &set.prompt_text, inverter, labeler, vocab)?;
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_counting_nli, standard_vocab, NliOptions, NliProblem};

    struct Empty;
    impl Inverter for Empty {
        fn invert(&self, _: &str) -> Result<String> {
            Ok("  ".into())
        }
    }

    #[test]
    fn flips_the_worked_example() {
        let v = standard_vocab();
        let r = Response::from_text(
            "3 plus 2 equals 5 , and 5 is at least 4 #### entailment",
            SourceTag::LocalModel,
            &v,
        );
        let f = flip_response(&r, "", &RuleInverter, &RuleLabeler, &v).unwrap();
        assert_eq!(f.text, "3 plus 2 equals 5 , and 5 is less than 4 #### contradiction");
        assert_eq!(f.source, SourceTag::Flipped);
        let back = flip_response(&f, "", &RuleInverter, &RuleLabeler, &v).unwrap();
        assert_eq!(back.text, r.text);
    }

    #[test]
    fn flip_is_an_involution_on_generated_pools() {
        let v = standard_vocab();
        for s in gen_counting_nli(200, NliOptions { noise: 0.5, verbose: false }, 3, &v) {
            let p = NliProblem::from_prompt(&s.prompt_text).unwrap();
            for c in &s.candidates {
                let f = flip_response(c, &s.prompt_text, &RuleInverter, &RuleLabeler, &v).unwrap();
                assert_ne!(f.label, c.label, "{}", c.text);
                if c.source == SourceTag::Human && p.template != crate::data::Template::MightGreen {
                    assert!(f.rationale.ends_with(&p.clause(f.label)), "{}", f.text);
                }
                let back = flip_response(&f, &s.prompt_text, &RuleInverter, &RuleLabeler, &v).unwrap();
                assert_eq!(back.rationale, c.rationale);
                assert_eq!(back.label, c.label);
            }
        }
    }

    #[test]
    fn flip_share_hits_the_requested_count() {
        let v = standard_vocab();
        let mut sets = gen_counting_nli(50, NliOptions { noise: 0.3, verbose: false }, 4, &v);
        let n = flip_share(&mut sets, 0.5, 9, &RuleInverter, &RuleLabeler, &v).unwrap();
        assert_eq!(n, 100);
        let flipped = sets.iter().flat_map(|s| &s.candidates).filter(|c| c.source == SourceTag::Flipped).count();
        assert_eq!(flipped, 100);
        assert!(sets.iter().all(|s| s.candidates[0].source == SourceTag::Human));
    }

    #[test]
    fn preconditions() {
        let v = standard_vocab();
        let bad = Response::from_text("no label", SourceTag::LocalModel, &v);
        assert!(matches!(flip_response(&bad, "", &RuleInverter, &RuleLabeler, &v), Err(Error::Domain(_))));
        let ok = Response::from_text("5 is at least 4 #### entailment", SourceTag::LocalModel, &v);
        assert!(matches!(flip_response(&ok, "", &Empty, &RuleLabeler, &v), Err(Error::Protocol(_))));
    }
}
