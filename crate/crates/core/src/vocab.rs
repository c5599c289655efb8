//! Closed token inventory shared by the model, the generators and the embedder.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
/// Separates the rationale from the label in every response.
pub const SEP: &str = "####";

const RESERVED: [&str; 4] = [UNK, BOS, EOS, SEP];

pub const UNK_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary with the reserved tokens first, followed by `words`
    /// in first-seen order. Duplicates are ignored.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().copied() {
            vocab.push(w);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            let id = self.tokens.len() as TokenId;
            self.tokens.push(word.to_string());
            self.index.insert(word.to_string(), id);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn unk(&self) -> TokenId {
        UNK_ID
    }
    pub fn bos(&self) -> TokenId {
        BOS_ID
    }
    pub fn eos(&self) -> TokenId {
        EOS_ID
    }
    pub fn sep(&self) -> TokenId {
        SEP_ID
    }

    /// Whitespace tokenization; words outside the inventory map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence(
            text.split_whitespace()
                .map(|w| self.id_of(w).unwrap_or(self.unk()))
                .collect(),
        )
    }

    /// Like [`Vocab::encode`] but fails on out-of-inventory words.
    pub fn encode_strict(&self, text: &str) -> Result<TokenSequence> {
        text.split_whitespace()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::Domain(format!("token {w:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn decode(&self, seq: &[TokenId]) -> String {
        seq.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Prompt tokens as fed to the model: `<bos>` followed by the prompt words.
    pub fn encode_prompt(&self, text: &str) -> TokenSequence {
        let mut ids = vec![self.bos()];
        ids.extend(self.encode(text).0);
        TokenSequence(ids)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Domain("vocabulary must start with the reserved tokens".into()));
        }
        let vocab = Vocab::new(tokens[RESERVED.len()..].iter());
        if vocab.len() != tokens.len() {
            return Err(Error::Domain("vocabulary tokens must be distinct".into()));
        }
        Ok(vocab)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The sequence followed by `eos`, the form scored and trained on.
    pub fn with_eos(&self, eos: TokenId) -> TokenSequence {
        let mut ids = self.0.clone();
        ids.push(eos);
        TokenSequence(ids)
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}
