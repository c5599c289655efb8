//! Counting NLI: a premise states two ball counts, the hypothesis makes a
//! claim about the total. Gold labels follow from integer arithmetic.

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use super::{CandidateSet, Label, Response, Task};
use crate::scoring::SourceTag;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Template {
    AtLeast,
    Exactly,
    MightGreen,
}

/// The arithmetic behind one instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NliProblem {
    pub red: u32,
    pub blue: u32,
    pub template: Template,
    pub threshold: u32,
}

impl NliProblem {
    pub fn total(&self) -> u32 {
        self.red + self.blue
    }

    pub fn gold_label(&self) -> Label {
        let s = self.total();
        match self.template {
            Template::AtLeast if s >= self.threshold => Label::Entailment,
            Template::Exactly if s == self.threshold => Label::Entailment,
            Template::AtLeast | Template::Exactly => Label::Contradiction,
            Template::MightGreen => Label::Neutral,
        }
    }

    pub fn hypothesis(&self) -> String {
        let t = self.threshold;
        match self.template {
            Template::AtLeast => format!("the box holds at least {t} balls"),
            Template::Exactly => format!("the box holds exactly {t} balls"),
            Template::MightGreen => format!("the box might hold {t} green balls"),
        }
    }

    pub fn prompt(&self) -> String {
        format!(
            "premise : the box holds {} red balls and {} blue balls hypothesis : {} answer :",
            self.red,
            self.blue,
            self.hypothesis()
        )
    }

    /// Recovers the problem from a generated prompt.
    pub fn from_prompt(prompt: &str) -> Option<NliProblem> {
        let w: Vec<&str> = prompt.split_whitespace().collect();
        let num = |i: usize| w.get(i)?.parse::<u32>().ok();
        let red = num(5)?;
        let blue = num(9)?;
        let hyp = w.get(15..)?;
        let (template, threshold) = match hyp {
            ["box", "holds", "at", "least", t, "balls", ..] => (Template::AtLeast, t.parse().ok()?),
            ["box", "holds", "exactly", t, "balls", ..] => (Template::Exactly, t.parse().ok()?),
            ["box", "might", "hold", t, "green", ..] => (Template::MightGreen, t.parse().ok()?),
            _ => return None,
        };
        Some(NliProblem {
            red,
            blue,
            template,
            threshold,
        })
    }

    /// The closing clause of a rationale that argues for `label`.
    pub fn clause(&self, label: Label) -> String {
        let (s, t) = (self.total(), self.threshold);
        match (self.template, label) {
            (Template::AtLeast, Label::Entailment) => format!("and {s} is at least {t}"),
            (Template::AtLeast, Label::Contradiction) => format!("and {s} is less than {t}"),
            (Template::Exactly, Label::Entailment) => format!("and {s} equals {t}"),
            (Template::Exactly, Label::Contradiction) => format!("and {s} does not equal {t}"),
            (Template::MightGreen, Label::Entailment) => "and the premise mentions some green balls".into(),
            (Template::MightGreen, Label::Contradiction) => "and the premise rules out green balls".into(),
            _ => "and the premise mentions no green balls".into(),
        }
    }

    pub fn human_rationale(&self, label: Label) -> String {
        format!("{} plus {} equals {} , {}", self.red, self.blue, self.total(), self.clause(label))
    }

    fn paraphrase(&self, variant: usize) -> String {
        let (a, b, s) = (self.red, self.blue, self.total());
        match variant {
            0 => format!("adding {a} and {b} gives {s}"),
            1 => format!("{a} red and {b} blue make {s} balls"),
            2 => format!("there are {a} red balls and {b} blue balls so the box holds {s} balls"),
            _ => format!(
                "the premise says there are {a} red balls and {b} blue balls , so in total the box holds {s} balls"
            ),
        }
    }

    fn random<R: Rng>(rng: &mut R) -> NliProblem {
        let red = rng.random_range(1..=9);
        let blue = rng.random_range(1..=9);
        let s = red + blue;
        let (template, threshold) = match rng.random_range(0..3) {
            0 => (Template::AtLeast, rng.random_range(2..=18)),
            1 => {
                let t = if rng.random_bool(0.5) {
                    s
                } else {
                    // uniform over 2..=18 without s
                    let t = rng.random_range(2..=17);
                    if t >= s {
                        t + 1
                    } else {
                        t
                    }
                };
                (Template::Exactly, t)
            }
            _ => (Template::MightGreen, rng.random_range(1..=9)),
        };
        NliProblem {
            red,
            blue,
            template,
            threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NliOptions {
    /// Probability that a model candidate is replaced by a wrong-label one.
    pub noise: f64,
    /// Model candidates always use the longest paraphrase.
    pub verbose: bool,
}

impl Default for NliOptions {
    fn default() -> Self {
        NliOptions {
            noise: 0.0,
            verbose: false,
        }
    }
}

/// Five candidates per instance: the human response at index 0, three local
/// model samples and one external model sample.
pub fn gen_counting_nli(n: usize, opts: NliOptions, seed: u64, vocab: &Vocab) -> Vec<CandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let p = NliProblem::random(&mut rng);
            let gold = p.gold_label();
            let mut candidates = vec![Response::new(&p.human_rationale(gold), gold, SourceTag::Human, vocab)];
            for k in 0..4 {
                let source = if k < 3 {
                    SourceTag::LocalModel
                } else {
                    SourceTag::ExternalModel
                };
                let corrupt = rng.random::<f64>() < opts.noise;
                let variant = if opts.verbose { 3 } else { rng.random_range(0..3) };
                let label = if corrupt {
                    let mut wrong: Vec<Label> = Label::NLI.into_iter().filter(|&l| l != gold).collect();
                    wrong.shuffle(&mut rng);
                    wrong[0]
                } else {
                    gold
                };
                let r = format!("{} , {}", p.paraphrase(variant), p.clause(label));
                let resp = Response::new(&r, label, source, vocab);
                candidates.push(resp);
            }
            let prompt_text = p.prompt();
            CandidateSet {
                instance_id: format!("nli-{seed}-{i}"),
                task: Task::Nli,
                prompt_tokens: vocab.encode_prompt(&prompt_text),
                prompt_text,
                candidates,
                gold_label: Some(gold),
                gold_response_index: Some(0),
                multidoc: None,
                extra: Map::new(),
            }
        })
        .collect()
}

pub fn nli_vocab_words() -> Vec<String> {
    let words = "premise : the box holds red balls and blue hypothesis at least exactly might hold \
                 green answer plus equals , is less than does not equal mentions no some rules out \
                 rule adding gives make there are so says in total";
    let mut out: Vec<String> = words.split_whitespace().map(String::from).collect();
    out.extend((0..=18).map(|n| n.to_string()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::standard_vocab;

    #[test]
    fn worked_example() {
        let p = NliProblem {
            red: 3,
            blue: 2,
            template: Template::AtLeast,
            threshold: 4,
        };
        let v = standard_vocab();
        let r = Response::new(&p.human_rationale(p.gold_label()), p.gold_label(), SourceTag::Human, &v);
        assert_eq!(r.text, "3 plus 2 equals 5 , and 5 is at least 4 #### entailment");
    }

    #[test]
    fn prompt_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = NliProblem::random(&mut rng);
            assert_eq!(NliProblem::from_prompt(&p.prompt()), Some(p));
        }
    }

    #[test]
    fn generated_labels_are_sound() {
        let v = standard_vocab();
        let sets = gen_counting_nli(500, NliOptions { noise: 0.3, verbose: false }, 9, &v);
        for s in &sets {
            let p = NliProblem::from_prompt(&s.prompt_text).unwrap();
            let s_ = p.red + p.blue;
            let oracle = match p.template {
                Template::AtLeast => if s_ >= p.threshold { Label::Entailment } else { Label::Contradiction },
                Template::Exactly => if s_ == p.threshold { Label::Entailment } else { Label::Contradiction },
                Template::MightGreen => Label::Neutral,
            };
            assert_eq!(s.gold_label, Some(oracle));
            assert_eq!(s.candidates.len(), 5);
            s.validate().unwrap();
            for c in &s.candidates {
                assert!(!c.tokens.ids().contains(&v.unk()), "{}", c.text);
            }
            assert!(!s.prompt_tokens.ids().contains(&v.unk()));
        }
    }

    #[test]
    fn noise_extremes() {
        let v = standard_vocab();
        for s in gen_counting_nli(50, NliOptions { noise: 0.0, verbose: false }, 1, &v) {
            assert!(s.candidates.iter().all(|c| Some(c.label) == s.gold_label));
        }
        for s in gen_counting_nli(50, NliOptions { noise: 1.0, verbose: false }, 1, &v) {
            assert!(s.candidates[1..].iter().all(|c| Some(c.label) != s.gold_label));
            assert_eq!(Some(s.candidates[0].label), s.gold_label);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let v = standard_vocab();
        let o = NliOptions { noise: 0.3, verbose: false };
        assert_eq!(gen_counting_nli(20, o, 4, &v), gen_counting_nli(20, o, 4, &v));
        assert_ne!(gen_counting_nli(20, o, 4, &v), gen_counting_nli(20, o, 5, &v));
    }

    #[test]
    fn verbose_model_responses_are_longer() {
        let v = standard_vocab();
        let sets = gen_counting_nli(200, NliOptions { noise: 0.0, verbose: true }, 2, &v);
        let mean = |f: &dyn Fn(&CandidateSet) -> Vec<usize>| {
            let all: Vec<usize> = sets.iter().flat_map(f).collect();
            all.iter().sum::<usize>() as f64 / all.len() as f64
        };
        let human = mean(&|s| vec![s.candidates[0].tokens.len()]);
        let model = mean(&|s| s.candidates[1..].iter().map(|c| c.tokens.len()).collect());
        assert!(model - human >= 10.0, "{human} vs {model}");
    }
}
