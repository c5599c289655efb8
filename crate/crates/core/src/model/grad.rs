use super::{Gradients, ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::vocab::TokenSequence;

/// A (prompt, response) pair whose teacher-forced log-probabilities feed a loss.
pub type SequencePair<'a> = (&'a TokenSequence, &'a TokenSequence);

/// A loss value together with its derivative with respect to every per-token
/// log-probability of every sequence it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub dlogprobs: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn zeros_like(value: f64, logprobs: &[Vec<f64>]) -> Self {
        LossValue {
            value,
            dlogprobs: logprobs.iter().map(|l| vec![0.0; l.len()]).collect(),
        }
    }
}

/// Exact gradient of a scalar loss that is composed from per-token
/// log-probabilities of `sequences`.
///
/// `loss` receives one log-probability vector per sequence and returns the
/// loss along with its partial derivatives; those are then backpropagated
/// through each sequence's forward pass. Sequences whose derivatives are all
/// zero are skipped.
pub fn loss_gradients<T, F>(
    params: &ModelParams<T>,
    sequences: &[SequencePair<'_>],
    loss: F,
) -> Result<(f64, Gradients<T>)>
where
    T: Scalar,
    F: FnOnce(&[Vec<f64>]) -> Result<LossValue>,
{
    let mut logprobs = Vec::with_capacity(sequences.len());
    let mut tapes = Vec::with_capacity(sequences.len());
    for (prompt, response) in sequences {
        let (lp, tape) = params.logprobs_with_tape(prompt, response)?;
        logprobs.push(lp);
        tapes.push(tape);
    }
    let lv = loss(&logprobs)?;
    if !lv.value.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {}", lv.value)));
    }
    if lv.dlogprobs.len() != sequences.len() {
        return Err(Error::Domain(format!(
            "loss returned derivatives for {} sequences, expected {}",
            lv.dlogprobs.len(),
            sequences.len()
        )));
    }
    let mut grads = params.zero_grads();
    for (((prompt, response), tape), d) in sequences.iter().zip(&tapes).zip(&lv.dlogprobs) {
        if d.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite loss derivative".into()));
        }
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        params.backward_logprobs(tape, prompt.len(), response, d, &mut grads);
    }
    Ok((lv.value, grads))
}
