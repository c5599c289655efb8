use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Task label carried at the end of every response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
    Correct,
    Incorrect,
    Unparseable,
}

impl Label {
    pub const NLI: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];
    pub const QA: [Label; 2] = [Label::Correct, Label::Incorrect];

    /// Canonical (lower-case) spelling used when rendering responses.
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
            Label::Correct => "correct",
            Label::Incorrect => "incorrect",
            Label::Unparseable => "unparseable",
        }
    }

    /// Case-insensitive; anything unknown is `Unparseable`.
    pub fn parse(s: &str) -> Label {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" => Label::Entailment,
            "neutral" => Label::Neutral,
            "contradiction" => Label::Contradiction,
            "correct" => Label::Correct,
            "incorrect" => Label::Incorrect,
            _ => Label::Unparseable,
        }
    }

    pub fn is_parseable(self) -> bool {
        self != Label::Unparseable
    }

    pub fn is_nli(self) -> bool {
        Label::NLI.contains(&self)
    }

    pub fn is_qa(self) -> bool {
        Label::QA.contains(&self)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Label::parse(&s))
    }
}
