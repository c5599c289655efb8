//! AdamW, the warmup-cosine schedule, and the accumulate-then-step loop.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CandidateSet;
use crate::error::{Error, Result};
use crate::model::{loss_gradients, Gradients, LossValue, ModelParams, Scalar};
use crate::objectives::{instance_gradients, LossBreakdown, ObjectiveConfig};
use crate::ordering::{Orderer, PreferencePair};
use crate::par::{self, Exec};
use crate::scoring::{csv_err, LambdaTable};
use crate::vocab::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_fraction: f64,
    /// Learning rate the cosine decays to.
    pub lr_floor: f64,
    pub accum_steps: usize,
    pub device_batch: usize,
    pub replica_count: usize,
    pub effective_batch: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Draw each epoch's instances with replacement instead of shuffling.
    pub with_replacement: bool,
    pub lambda_table: LambdaTable,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 2e-5,
            warmup_fraction: 0.03,
            lr_floor: 0.0,
            accum_steps: 16,
            device_batch: 1,
            // replicas are simulated in-process; only the product matters
            replica_count: 4,
            effective_batch: 64,
            epochs: 1,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            with_replacement: false,
            lambda_table: LambdaTable::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Single-epoch settings that let a randomly initialised model learn the
    /// synthetic tasks in well under a minute on one core.
    pub fn desk() -> Self {
        TrainConfig {
            lr_peak: 3e-3,
            accum_steps: 8,
            replica_count: 1,
            effective_batch: 8,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction)));
        }
        if self.accum_steps == 0 || self.device_batch == 0 || self.replica_count == 0 || self.epochs == 0 {
            return Err(Error::Config("accum_steps, device_batch, replica_count and epochs must be positive".into()));
        }
        if self.effective_batch != self.accum_steps * self.device_batch * self.replica_count {
            return Err(Error::Config(format!(
                "effective_batch {} != accum_steps {} x device_batch {} x replica_count {}",
                self.effective_batch, self.accum_steps, self.device_batch, self.replica_count
            )));
        }
        if !(self.lr_peak >= 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return Err(Error::Config("need 0 <= lr_floor <= lr_peak".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must be in [0, 1) and eps positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        self.lambda_table.validate()
    }

    /// Optimizer steps for a dataset of `n` instances.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.effective_batch)
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        (self.warmup_fraction * total as f64).ceil() as usize
    }
}

/// Linear warmup from 0 to `lr_peak`, then cosine decay to `lr_floor` at
/// `total`.
pub fn lr_at_step(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let warm = cfg.warmup_steps(total);
    if step < warm {
        return cfg.lr_peak * step as f64 / warm as f64;
    }
    if total <= warm {
        return cfg.lr_peak;
    }
    let progress = ((step - warm) as f64 / (total - warm) as f64).min(1.0);
    cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moment estimates, kept in f64 regardless of parameter
/// precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Decoupled decay `p -= lr * wd * p`, then the bias-corrected Adam step.
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &Gradients<T>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if grads.0.len() != self.m.len() || params.num_params() != self.m.len() {
            return Err(Error::Domain("optimizer state does not match parameter count".into()));
        }
        if let Some(i) = grads.0.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at parameter {i} (gradient norm {})",
                grads.l2_norm()
            )));
        }
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.as_mut_slice().iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            let g = g.real();
            let mut x = p.real();
            x -= lr * cfg.weight_decay * x;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            x -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
            *p = T::from_real(x);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_sft: f64,
    pub loss_rank: f64,
    pub margin_violations: usize,
    pub instances_skipped: usize,
    #[serde(skip)]
    pub pairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub steps: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss_total)
    }
}

/// One work item's contribution: `None` marks a skipped item.
type ItemResult<T> = Result<Option<(LossBreakdown, Gradients<T>)>>;

/// Mean gradient over a batch. Items are evaluated through `par::map` and
/// summed in batch order, so the result does not depend on `exec`.
fn batch_step<T, F>(
    params: &ModelParams<T>,
    batch: &[usize],
    exec: Exec,
    item: &F,
) -> Result<(StepMetrics, Option<Gradients<T>>)>
where
    T: Scalar,
    F: Fn(&ModelParams<T>, usize) -> ItemResult<T> + Sync,
{
    let results = par::map(exec, batch, |&i| item(params, i));
    let mut m = StepMetrics::default();
    let mut sum: Option<Gradients<T>> = None;
    let mut used = 0usize;
    for r in results {
        match r? {
            None => m.instances_skipped += 1,
            Some((b, g)) => {
                used += 1;
                m.loss_total += b.total;
                m.loss_sft += b.sft;
                m.loss_rank += b.rank;
                m.margin_violations += b.violations;
                m.pairs += b.pairs;
                match sum.as_mut() {
                    None => sum = Some(g),
                    Some(s) => s.add_assign(&g),
                }
            }
        }
    }
    if used > 0 {
        let k = used as f64;
        m.loss_total /= k;
        m.loss_sft /= k;
        m.loss_rank /= k;
        if let Some(s) = sum.as_mut() {
            s.scale(T::from_real(1.0 / k));
        }
    }
    Ok((m, sum))
}

/// Generic optimisation loop over `n` work items: per-epoch shuffle,
/// accumulation over `effective_batch` items, one AdamW update per batch.
pub fn optimize<T, F>(
    params: &mut ModelParams<T>,
    n: usize,
    cfg: &TrainConfig,
    exec: Exec,
    item: F,
) -> Result<MetricsLog>
where
    T: Scalar,
    F: Fn(&ModelParams<T>, usize) -> ItemResult<T> + Sync,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Domain("cannot train on an empty dataset".into()));
    }
    let total = cfg.total_steps(n);
    let mut opt = AdamW::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order: Vec<usize> = if cfg.with_replacement {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        };
        for batch in order.chunks(cfg.effective_batch) {
            step += 1;
            let lr = lr_at_step(cfg, step, total);
            let (mut m, grads) = batch_step(params, batch, exec, &item)?;
            if let Some(g) = grads {
                opt.step(params, &g, lr, cfg)?;
            }
            m.step = step;
            m.lr = lr;
            log.steps.push(m);
        }
    }
    Ok(log)
}

/// Preference pairs for every instance, or `None` where the strategy does
/// not apply (those instances are skipped during training).
pub fn prepare_pairs(orderer: &Orderer, dataset: &[CandidateSet]) -> Result<Vec<Option<Vec<PreferencePair>>>> {
    dataset
        .iter()
        .map(|s| match orderer.pairs(s) {
            Ok(p) => Ok(Some(p)),
            Err(Error::StrategyInapplicable(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

fn with_id<T>(set: &CandidateSet, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("instance {}: {msg}", set.instance_id)),
        other => other,
    })
}

/// Fine-tunes `params` on `dataset` using precomputed preference pairs.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    dataset: &[CandidateSet],
    pairs: &[Option<Vec<PreferencePair>>],
    cfg: &TrainConfig,
    obj: &ObjectiveConfig,
    exec: Exec,
) -> Result<MetricsLog> {
    obj.validate()?;
    if pairs.len() != dataset.len() {
        return Err(Error::Domain("one pair list per instance required".into()));
    }
    let lambdas = cfg.lambda_table;
    optimize(params, dataset.len(), cfg, exec, |p, i| {
        let Some(pp) = &pairs[i] else { return Ok(None) };
        let set = &dataset[i];
        with_id(set, instance_gradients(p, set, pp, obj, &lambdas)).map(Some)
    })
}

/// Mean gradient of a batch, the way the training loop computes it.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    batch: &[(&CandidateSet, &[PreferencePair])],
    obj: &ObjectiveConfig,
    lambdas: &LambdaTable,
    exec: Exec,
) -> Result<(StepMetrics, Gradients<T>)> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let (m, g) = batch_step(params, &idx, exec, &|p: &ModelParams<T>, i: usize| {
        let (set, pairs) = batch[i];
        instance_gradients(p, set, pairs, obj, lambdas).map(Some)
    })?;
    Ok((m, g.unwrap_or_else(|| params.zero_grads())))
}

/// Plain likelihood training on (prompt, response) pairs. Used to give a
/// fresh model the response format before ranking-only fine-tuning.
pub fn fit_sequences<T: Scalar>(
    params: &mut ModelParams<T>,
    examples: &[(TokenSequence, TokenSequence)],
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<MetricsLog> {
    optimize(params, examples.len(), cfg, exec, |p, i| {
        let (prompt, target) = &examples[i];
        let (value, g) = loss_gradients(p, &[(prompt, target)], |lp| {
            Ok(LossValue {
                value: -lp[0].iter().sum::<f64>(),
                dlogprobs: vec![vec![-1.0; lp[0].len()]],
            })
        })?;
        let b = LossBreakdown {
            sft: value,
            total: value,
            ..Default::default()
        };
        Ok(Some((b, g)))
    })
}
