//! Multi-document lookup QA: k short documents each bind an entity to an
//! access code; exactly one answers the question.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use super::{CandidateSet, Document, Label, MultiDocInstance, Response, Task};
use crate::error::{Error, Result};
use crate::scoring::SourceTag;
use crate::vocab::Vocab;

const N_ENTITIES: usize = 30;
const N_DISTRACTOR_ANSWERS: usize = 4;

fn entity(i: usize) -> String {
    format!("e{i:02}")
}

fn code(i: usize) -> String {
    format!("c{i:02}")
}

fn binding(e: &str, c: &str) -> String {
    format!("the access code for {e} is {c}")
}

/// Instances cycle through `gold_positions` round-robin. The candidate pool
/// holds one answer grounded on the gold document and four grounded on
/// distinct distractors, in shuffled order.
pub fn gen_multidoc(
    n: usize,
    k_docs: usize,
    gold_positions: &[usize],
    seed: u64,
    vocab: &Vocab,
) -> Result<Vec<CandidateSet>> {
    if k_docs < N_DISTRACTOR_ANSWERS + 1 || k_docs > N_ENTITIES {
        return Err(Error::Config(format!(
            "k_docs must be between {} and {N_ENTITIES}, got {k_docs}",
            N_DISTRACTOR_ANSWERS + 1
        )));
    }
    if gold_positions.is_empty() || gold_positions.iter().any(|&p| p >= k_docs) {
        return Err(Error::Config(format!("gold positions {gold_positions:?} invalid for {k_docs} documents")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..N_ENTITIES).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let gold_pos = gold_positions[i % gold_positions.len()];
        let ents: Vec<String> = ids.sample(&mut rng, k_docs).map(|&j| entity(j)).collect();
        let codes: Vec<String> = ids.sample(&mut rng, k_docs).map(|&j| code(j)).collect();
        let documents: Vec<Document> = (0..k_docs)
            .map(|j| Document {
                doc_id: format!("d{j}"),
                text: binding(&ents[j], &codes[j]),
            })
            .collect();
        let q = &ents[gold_pos];
        let question = format!("what is the access code for {q} ?");
        let answer_phrase = codes[gold_pos].clone();

        let others: Vec<usize> = (0..k_docs).filter(|&j| j != gold_pos).collect();
        let mut candidates = vec![Response::answer(&binding(q, &answer_phrase), Label::Correct, SourceTag::LocalModel, vocab)];
        for &j in others.sample(&mut rng, N_DISTRACTOR_ANSWERS) {
            candidates.push(Response::answer(&binding(q, &codes[j]), Label::Incorrect, SourceTag::LocalModel, vocab));
        }
        candidates.shuffle(&mut rng);

        let mut prompt_text = String::new();
        for d in &documents {
            prompt_text.push_str("doc : ");
            prompt_text.push_str(&d.text);
            prompt_text.push(' ');
        }
        prompt_text.push_str(&format!("question : {question} answer :"));
        out.push(CandidateSet {
            instance_id: format!("md-{seed}-{i}"),
            task: Task::Multidoc,
            prompt_tokens: vocab.encode_prompt(&prompt_text),
            prompt_text,
            candidates,
            gold_label: Some(Label::Correct),
            gold_response_index: None,
            multidoc: Some(MultiDocInstance {
                question,
                documents,
                gold_doc_position: gold_pos,
                answer_phrase,
            }),
            extra: Map::new(),
        });
    }
    Ok(out)
}

pub fn multidoc_vocab_words() -> Vec<String> {
    let mut out: Vec<String> = "doc : the access code for is question what ? answer"
        .split_whitespace()
        .map(String::from)
        .collect();
    out.extend((0..N_ENTITIES).map(entity));
    out.extend((0..N_ENTITIES).map(code));
    out
}
