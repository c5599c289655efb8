use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{CandidateSet, Document, Label, MultiDocInstance, Response, Task};
use crate::error::{Error, Result};
use crate::scoring::SourceTag;
use crate::vocab::Vocab;

#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    text: String,
    source: SourceTag,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    instance_id: String,
    task: Task,
    prompt: String,
    gold_label: Option<Label>,
    gold_response_index: Option<usize>,
    candidates: Vec<CandidateRecord>,
    #[serde(default)]
    documents: Option<Vec<Document>>,
    #[serde(default)]
    gold_doc_position: Option<usize>,
    #[serde(default)]
    answer_phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    question: Option<String>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

impl Record {
    fn from_set(s: &CandidateSet) -> Record {
        let md = s.multidoc.as_ref();
        Record {
            instance_id: s.instance_id.clone(),
            task: s.task,
            prompt: s.prompt_text.clone(),
            gold_label: s.gold_label,
            gold_response_index: s.gold_response_index,
            candidates: s
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    text: c.text.clone(),
                    source: c.source,
                    extra: c.extra.clone(),
                })
                .collect(),
            documents: md.map(|m| m.documents.clone()),
            gold_doc_position: md.map(|m| m.gold_doc_position),
            answer_phrase: md.map(|m| m.answer_phrase.clone()),
            question: md.map(|m| m.question.clone()),
            extra: s.extra.clone(),
        }
    }

    fn into_set(self, vocab: &Vocab) -> CandidateSet {
        let multidoc = match (self.documents, self.gold_doc_position, self.answer_phrase) {
            (Some(documents), Some(gold_doc_position), Some(answer_phrase)) => Some(MultiDocInstance {
                question: self.question.unwrap_or_default(),
                documents,
                gold_doc_position,
                answer_phrase,
            }),
            _ => None,
        };
        let candidates = self
            .candidates
            .into_iter()
            .map(|c| {
                let mut r = match &multidoc {
                    Some(md) => md.label_answer(&c.text, c.source, vocab),
                    None => Response::from_text(&c.text, c.source, vocab),
                };
                r.extra = c.extra;
                r
            })
            .collect();
        CandidateSet {
            prompt_tokens: vocab.encode_prompt(&self.prompt),
            instance_id: self.instance_id,
            task: self.task,
            prompt_text: self.prompt,
            candidates,
            gold_label: self.gold_label,
            gold_response_index: self.gold_response_index,
            multidoc,
            extra: self.extra,
        }
    }
}

/// One JSON object per line. Blank lines are ignored.
pub fn read_jsonl_from<R: Read>(r: R, vocab: &Vocab) -> Result<Vec<CandidateSet>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let set = rec.into_set(vocab);
        set.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(set);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<CandidateSet>> {
    read_jsonl_from(File::open(path)?, vocab)
}

pub fn write_jsonl_to<W: Write>(w: W, sets: &[CandidateSet]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for s in sets {
        serde_json::to_writer(&mut w, &Record::from_set(s))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: impl AsRef<Path>, sets: &[CandidateSet]) -> Result<()> {
    write_jsonl_to(File::create(path)?, sets)
}
