//! A small decoder-only self-attention model with hand-written backpropagation.
//!
//! Parameters live in one flat buffer addressed through a [`ParamLayout`];
//! gradients use the same layout, so optimizers and finite-difference checks
//! can treat both as plain slices.

mod checkpoint;
mod forward;
mod grad;
mod sample;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::Tape;
pub use grad::{loss_gradients, LossValue, SequencePair};
pub use sample::{greedy_decode, sample};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayView1, ArrayView2, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point type the model can be instantiated with.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_real(x: f64) -> Self;
    fn real(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_real(x: f64) -> Self {
        x as f32
    }
    fn real(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_real(x: f64) -> Self {
        x
    }
    fn real(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture: 64-wide, two layers, two heads, 256-token window.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_len: 256,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.context_len == 0 || self.embed_dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config(
                "context_len, embed_dim, n_layers and n_heads must be positive".into(),
            ));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

/// Names, shapes and offsets of every parameter tensor in the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    specs: Vec<TensorSpec>,
    pub(crate) wte: usize,
    pub(crate) wpe: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) w_out: usize,
    pub(crate) b_out: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let c = cfg.embed_dim;
        let v = cfg.vocab_size;
        let h = cfg.mlp_dim();
        let mut specs = Vec::new();
        let mut total = 0usize;
        let mut add = |name: String, shape: Vec<usize>| -> usize {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset
        };
        let wte = add("wte".into(), vec![v, c]);
        let wpe = add("wpe".into(), vec![cfg.context_len, c]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln1_g"), vec![c]),
                ln1_b: add(p("ln1_b"), vec![c]),
                w_qkv: add(p("w_qkv"), vec![c, 3 * c]),
                b_qkv: add(p("b_qkv"), vec![3 * c]),
                w_o: add(p("w_o"), vec![c, c]),
                b_o: add(p("b_o"), vec![c]),
                ln2_g: add(p("ln2_g"), vec![c]),
                ln2_b: add(p("ln2_b"), vec![c]),
                w_fc: add(p("w_fc"), vec![c, h]),
                b_fc: add(p("b_fc"), vec![h]),
                w_proj: add(p("w_proj"), vec![h, c]),
                b_proj: add(p("b_proj"), vec![c]),
            });
        }
        let lnf_g = add("lnf_g".into(), vec![c]);
        let lnf_b = add("lnf_b".into(), vec![c]);
        let w_out = add("w_out".into(), vec![c, v]);
        let b_out = add("b_out".into(), vec![v]);
        ParamLayout {
            specs,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total,
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Trainable parameters of the model.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    layout: Arc<ParamLayout>,
    pub(crate) data: Vec<T>,
}

impl<T: Scalar> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

/// Zero-initialised output projection, N(0, 0.02) elsewhere (residual output
/// projections scaled by `1/sqrt(2 n_layers)`), unit layer-norm gains.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let layout = Arc::new(ParamLayout::new(config));
    let mut data = vec![T::zero(); layout.total()];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std = 0.02;
    let proj_std = std / ((2 * config.n_layers) as f64).sqrt();
    for spec in layout.specs() {
        let name = spec.name.rsplit('.').next().unwrap_or(&spec.name);
        let slot = &mut data[spec.offset..spec.offset + spec.numel()];
        match name {
            "wte" | "wpe" | "w_qkv" | "w_fc" => fill_normal(slot, std, &mut rng),
            "w_o" | "w_proj" => fill_normal(slot, proj_std, &mut rng),
            "ln1_g" | "ln2_g" | "lnf_g" => slot.fill(T::one()),
            _ => {}
        }
    }
    Ok(ModelParams {
        config: config.clone(),
        layout,
        data,
    })
}

fn fill_normal<T: Scalar>(slot: &mut [T], std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for x in slot {
        *x = T::from_real(normal.sample(rng));
    }
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn from_parts(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::new(&config));
        if data.len() != layout.total() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total(),
                data.len()
            )));
        }
        Ok(ModelParams {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .spec(name)
            .map(|s| &self.data[s.offset..s.offset + s.numel()])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::from_real(x.real())).collect(),
        }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients(vec![T::zero(); self.data.len()])
    }

    pub(crate) fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((rows, cols), &self.data[off..off + rows * cols]).expect("layout")
    }

    pub(crate) fn vec(&self, off: usize, len: usize) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[off..off + len])
    }
}

/// Gradient buffer laid out exactly like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Scalar = f32>(pub Vec<T>);

impl<T: Scalar> Gradients<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for a in &mut self.0 {
            *a = *a * factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|x| x.real().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|x| x.is_zero())
    }
}
