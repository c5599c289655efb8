//! Candidate pools, the `rationale #### label` response format, synthetic
//! task generators and the flipping pipeline.

mod flip;
mod jsonl;
mod label;
mod multidoc;
mod nli;
mod sampling;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub use flip::{flip_response, flip_share, Inverter, Labeler, RuleInverter, RuleLabeler};
pub use jsonl::{read_jsonl, read_jsonl_from, write_jsonl, write_jsonl_to};
pub use label::Label;
pub use multidoc::{gen_multidoc, multidoc_vocab_words};
pub use nli::{gen_counting_nli, nli_vocab_words, NliOptions, NliProblem, Template};
pub use sampling::sample_candidates;

use crate::error::{Error, Result};
use crate::scoring::SourceTag;
use crate::vocab::{TokenSequence, Vocab, SEP};

/// Splits `text` on its last separator. Total: text without a recognizable
/// label comes back whole with `Unparseable`.
pub fn parse_response(text: &str) -> (String, Label) {
    match text.rfind(SEP) {
        Some(pos) => {
            let label = Label::parse(&text[pos + SEP.len()..]);
            if label.is_parseable() {
                (text[..pos].trim().to_string(), label)
            } else {
                (text.trim().to_string(), Label::Unparseable)
            }
        }
        None => (text.trim().to_string(), Label::Unparseable),
    }
}

/// Inverse of [`parse_response`] for parseable labels.
pub fn render(rationale: &str, label: Label) -> String {
    if !label.is_parseable() {
        return rationale.to_string();
    }
    if rationale.is_empty() {
        format!("{SEP} {label}")
    } else {
        format!("{rationale} {SEP} {label}")
    }
}

fn squash_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub text: String,
    pub rationale: String,
    pub label: Label,
    pub source: SourceTag,
    pub tokens: TokenSequence,
    /// Unrecognized JSONL fields, kept for write-back.
    pub extra: Map<String, Value>,
}

impl Response {
    pub fn new(rationale: &str, label: Label, source: SourceTag, vocab: &Vocab) -> Self {
        let rationale = squash_whitespace(rationale);
        let text = render(&rationale, label);
        let tokens = vocab.encode(&text);
        Response {
            text,
            rationale,
            label,
            source,
            tokens,
            extra: Map::new(),
        }
    }

    /// A free-form QA answer. Carries no `#### label` suffix; the label is
    /// annotation only and never part of the scored text.
    pub fn answer(text: &str, label: Label, source: SourceTag, vocab: &Vocab) -> Self {
        let text = squash_whitespace(text);
        Response {
            tokens: vocab.encode(&text),
            rationale: text.clone(),
            text,
            label,
            source,
            extra: Map::new(),
        }
    }

    /// Parses free text, e.g. a decoded sample.
    pub fn from_text(text: &str, source: SourceTag, vocab: &Vocab) -> Self {
        let (rationale, label) = parse_response(&squash_whitespace(text));
        Response::new(&rationale, label, source, vocab)
    }

    /// Training target: the response tokens followed by `<eos>`.
    pub fn target(&self) -> TokenSequence {
        self.tokens.with_eos(crate::vocab::EOS_ID)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nli,
    Multidoc,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nli => "nli",
            Task::Multidoc => "multidoc",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nli" => Ok(Task::Nli),
            "multidoc" => Ok(Task::Multidoc),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiDocInstance {
    pub question: String,
    pub documents: Vec<Document>,
    pub gold_doc_position: usize,
    pub answer_phrase: String,
}

impl MultiDocInstance {
    /// Wraps an answer, labeled by [`MultiDocInstance::is_correct`].
    pub fn label_answer(&self, text: &str, source: SourceTag, vocab: &Vocab) -> Response {
        let label = if self.is_correct(text) { Label::Correct } else { Label::Incorrect };
        Response::answer(text, label, source, vocab)
    }

    pub fn is_correct(&self, response_text: &str) -> bool {
        contains_phrase(response_text, &self.answer_phrase)
    }
}

/// Whole-word phrase containment, so `c1` does not match inside `c10`.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let hay: Vec<&str> = text.split_whitespace().collect();
    let needle: Vec<&str> = phrase.split_whitespace().collect();
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub instance_id: String,
    pub task: Task,
    pub prompt_text: String,
    pub prompt_tokens: TokenSequence,
    pub candidates: Vec<Response>,
    pub gold_label: Option<Label>,
    pub gold_response_index: Option<usize>,
    pub multidoc: Option<MultiDocInstance>,
    pub extra: Map<String, Value>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Domain(format!(
                "{}: need at least 2 candidates, got {}",
                self.instance_id,
                self.candidates.len()
            )));
        }
        if let Some(g) = self.gold_response_index {
            match self.candidates.get(g) {
                Some(c) if c.source == SourceTag::Human => {}
                _ => {
                    return Err(Error::Domain(format!(
                        "{}: gold_response_index {g} is not a human response",
                        self.instance_id
                    )))
                }
            }
        }
        if let Some(md) = &self.multidoc {
            if md.gold_doc_position >= md.documents.len() {
                return Err(Error::Domain(format!("{}: gold_doc_position out of range", self.instance_id)));
            }
        }
        Ok(())
    }

    /// Index of the single human response.
    pub fn human_index(&self) -> Result<usize> {
        let mut humans = self
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.source == SourceTag::Human)
            .map(|(i, _)| i);
        match (humans.next(), humans.next()) {
            (Some(i), None) => Ok(i),
            (None, _) => Err(Error::StrategyInapplicable(format!("{}: no human response", self.instance_id))),
            (Some(_), Some(_)) => Err(Error::StrategyInapplicable(format!(
                "{}: more than one human response",
                self.instance_id
            ))),
        }
    }

    pub fn gold_label(&self) -> Result<Label> {
        self.gold_label
            .ok_or_else(|| Error::StrategyInapplicable(format!("{}: no gold label", self.instance_id)))
    }

    pub fn gold_response(&self) -> Option<&Response> {
        self.gold_response_index.and_then(|i| self.candidates.get(i))
    }
}

/// Vocabulary covering both synthetic tasks.
pub fn standard_vocab() -> Vocab {
    let mut words: Vec<String> = Label::NLI
        .iter()
        .chain(Label::QA.iter())
        .map(|l| l.as_str().to_string())
        .collect();
    words.extend(nli_vocab_words());
    words.extend(multidoc_vocab_words());
    Vocab::new(words)
}
