use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::log_softmax_row;
use super::{ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::vocab::{TokenSequence, EOS_ID};

/// Autoregressive sampling from `prompt`.
///
/// Stops at `<eos>` (not included in the output), after `max_len` tokens, or
/// when the context window is full. `temperature == 0` is greedy argmax with
/// ties resolved toward the lowest token id.
pub fn sample<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &TokenSequence,
    temperature: f64,
    max_len: usize,
    seed: u64,
) -> Result<TokenSequence> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("invalid temperature {temperature}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = prompt.0.clone();
    let mut out = Vec::new();
    while out.len() < max_len && ctx.len() < params.config().context_len {
        let tape = params.forward_tape(&ctx)?;
        let logits = tape.logits();
        let last = logits.row(logits.nrows() - 1);
        let next = if temperature == 0.0 {
            argmax(last.iter().map(|v| v.real()))
        } else {
            let scaled: Vec<T> = last.iter().map(|&v| T::from_real(v.real() / temperature)).collect();
            let lsm = log_softmax_row(ndarray::ArrayView1::from(&scaled));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lsm.len() - 1;
            for (j, l) in lsm.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        } as u32;
        if next == EOS_ID {
            break;
        }
        ctx.push(next);
        out.push(next);
    }
    Ok(TokenSequence(out))
}

pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    prompt: &TokenSequence,
    max_len: usize,
) -> Result<TokenSequence> {
    sample(params, prompt, 0.0, max_len, 0)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn params() -> ModelParams<f32> {
        let mut p: ModelParams<f32> = init_model(&ModelConfig::new(20, 3)).unwrap();
        // give the output layer some structure
        let off = p.layout().spec("w_out").unwrap().offset;
        for (i, x) in p.as_mut_slice()[off..].iter_mut().enumerate() {
            *x = ((i * 7919 % 13) as f32 - 6.0) * 0.3;
        }
        p
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = params();
        let prompt = TokenSequence(vec![1, 5, 6]);
        let a = sample(&p, &prompt, 0.8, 12, 42).unwrap();
        let b = sample(&p, &prompt, 0.8, 12, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 12);
        assert!(!a.ids().contains(&EOS_ID));
    }

    #[test]
    fn zero_temperature_is_argmax() {
        let p = params();
        let prompt = TokenSequence(vec![1, 5, 6]);
        let greedy = sample(&p, &prompt, 0.0, 8, 1).unwrap();
        assert_eq!(greedy, sample(&p, &prompt, 0.0, 8, 999).unwrap());
        let mut ctx = prompt.0.clone();
        for &tok in greedy.ids() {
            let logits = p.forward_logits(&TokenSequence(ctx.clone())).unwrap();
            let last = logits.row(logits.nrows() - 1);
            let best = argmax(last.iter().map(|v| *v as f64));
            assert_eq!(best as u32, tok);
            ctx.push(tok);
        }
    }

    #[test]
    fn uniform_model_greedy_picks_lowest_id() {
        let p: ModelParams<f32> = init_model(&ModelConfig::new(20, 3)).unwrap();
        let out = greedy_decode(&p, &TokenSequence(vec![1]), 5).unwrap();
        assert_eq!(out.ids(), &[0, 0, 0, 0, 0]);
    }

    #[test]
    fn negative_temperature_rejected() {
        let p = params();
        assert!(sample(&p, &TokenSequence(vec![1]), -1.0, 3, 0).is_err());
    }
}
