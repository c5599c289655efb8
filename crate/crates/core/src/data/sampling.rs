use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Response;
use crate::error::Result;
use crate::model::{sample, ModelParams, Scalar};
use crate::scoring::SourceTag;
use crate::vocab::{TokenSequence, Vocab};

/// Draws `count` responses from the model and parses them. Each draw gets
/// its own sub-seed derived from `seed`.
pub fn sample_candidates<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    prompt: &TokenSequence,
    count: usize,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Response>> {
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let toks = sample(params, prompt, temperature, max_len, seeds.next_u64())?;
            Ok(Response::from_text(&vocab.decode(toks.ids()), SourceTag::LocalModel, vocab))
        })
        .collect()
}
