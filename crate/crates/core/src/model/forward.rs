use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

use super::{Gradients, ModelParams, Scalar};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSequence};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

struct LnCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

struct LayerTape<T> {
    ln1: LnCache<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    att: Vec<Array2<T>>,
    y: Array2<T>,
    ln2: LnCache<T>,
    h2: Array2<T>,
    pre: Array2<T>,
    act: Array2<T>,
}

/// Activations recorded by one forward pass, consumed by the backward pass.
pub struct Tape<T: Scalar> {
    tokens: Vec<TokenId>,
    layers: Vec<LayerTape<T>>,
    lnf: LnCache<T>,
    hf: Array2<T>,
    logits: Array2<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn logits(&self) -> &Array2<T> {
        &self.logits
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn layer_norm<T: Scalar>(
    x: ArrayView2<T>,
    gain: ArrayView1<T>,
    bias: ArrayView1<T>,
) -> (Array2<T>, LnCache<T>) {
    let (n, c) = x.dim();
    let inv_c = T::from_real(1.0 / c as f64);
    let eps = T::from_real(LN_EPS);
    let mut xhat = Array2::zeros((n, c));
    let mut rstd = Array1::zeros(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_c;
        let var = row.fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_c;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|h, &v| *h = (v - mean) * r);
    }
    let out = &xhat * &gain + &bias;
    (out, LnCache { xhat, rstd })
}

/// Returns dL/dx and accumulates gain/bias gradients.
fn layer_norm_backward<T: Scalar>(
    dout: &Array2<T>,
    cache: &LnCache<T>,
    gain: ArrayView1<T>,
    grads: &mut [T],
    off_g: usize,
    off_b: usize,
) -> Array2<T> {
    let (n, c) = dout.dim();
    add_vec(grads, off_g, (dout * &cache.xhat).sum_axis(Axis(0)).view());
    add_vec(grads, off_b, dout.sum_axis(Axis(0)).view());
    let dxhat = dout * &gain;
    let inv_c = T::from_real(1.0 / c as f64);
    let mut dx = Array2::zeros((n, c));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() * inv_c;
        let mean_dh_xh = dh.dot(&xh) * inv_c;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|d, &g, &h| *d = r * (g - mean_dh - h * mean_dh_xh));
    }
    dx
}

/// grads[off..] (rows x cols) += a · b
fn add_matmul<T: Scalar>(
    grads: &mut [T],
    off: usize,
    a: &ArrayView2<T>,
    b: &ArrayView2<T>,
) {
    let (rows, cols) = (a.nrows(), b.ncols());
    let mut view =
        ArrayViewMut2::from_shape((rows, cols), &mut grads[off..off + rows * cols]).expect("layout");
    general_mat_mul(T::one(), a, b, T::one(), &mut view);
}

fn add_vec<T: Scalar>(grads: &mut [T], off: usize, v: ArrayView1<T>) {
    let mut dst = ArrayViewMut1::from(&mut grads[off..off + v.len()]);
    dst += &v;
}

fn causal_softmax_rows<T: Scalar>(scores: &mut Array2<T>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let max = row
            .slice(s![..=i])
            .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
        let mut sum = T::zero();
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum = sum + e;
        }
        for j in 0..=i {
            row[j] = row[j] / sum;
        }
        for j in i + 1..n {
            row[j] = T::zero();
        }
    }
}

/// Log-softmax of one logit row, evaluated in f64.
pub(crate) fn log_softmax_row<T: Scalar>(row: ArrayView1<T>) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.real()));
    let lse = max + row.iter().map(|v| (v.real() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.real() - lse).collect()
}

impl<T: Scalar> ModelParams<T> {
    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let cfg = self.config();
        if tokens.is_empty() {
            return Err(Error::Domain("cannot run the model on an empty sequence".into()));
        }
        if tokens.len() > cfg.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: cfg.context_len,
            });
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Domain(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_tape(&self, tokens: &[TokenId]) -> Result<Tape<T>> {
        self.check_tokens(tokens)?;
        let cfg = self.config();
        let lay = self.layout();
        let (n, c, v) = (tokens.len(), cfg.embed_dim, cfg.vocab_size);
        let (nh, hd, mlp) = (cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
        let scale = T::from_real(1.0 / (hd as f64).sqrt());

        let wte = self.mat(lay.wte, v, c);
        let wpe = self.mat(lay.wpe, cfg.context_len, c);
        let mut x = Array2::<T>::zeros((n, c));
        for (i, &t) in tokens.iter().enumerate() {
            Zip::from(x.row_mut(i))
                .and(wte.row(t as usize))
                .and(wpe.row(i))
                .for_each(|o, &a, &b| *o = a + b);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for off in &lay.layers {
            let (h1, ln1) = layer_norm(x.view(), self.vec(off.ln1_g, c), self.vec(off.ln1_b, c));
            let mut qkv = h1.dot(&self.mat(off.w_qkv, c, 3 * c));
            qkv += &self.vec(off.b_qkv, 3 * c);

            let mut y = Array2::<T>::zeros((n, c));
            let mut att = Vec::with_capacity(nh);
            for h in 0..nh {
                let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![.., c + h * hd..c + (h + 1) * hd]);
                let vv = qkv.slice(s![.., 2 * c + h * hd..2 * c + (h + 1) * hd]);
                let mut scores = q.dot(&k.t());
                scores *= scale;
                causal_softmax_rows(&mut scores);
                general_mat_mul(
                    T::one(),
                    &scores,
                    &vv,
                    T::zero(),
                    &mut y.slice_mut(s![.., h * hd..(h + 1) * hd]),
                );
                att.push(scores);
            }
            let mut a = y.dot(&self.mat(off.w_o, c, c));
            a += &self.vec(off.b_o, c);
            x += &a;

            let (h2, ln2) = layer_norm(x.view(), self.vec(off.ln2_g, c), self.vec(off.ln2_b, c));
            let mut pre = h2.dot(&self.mat(off.w_fc, c, mlp));
            pre += &self.vec(off.b_fc, mlp);
            let act = pre.mapv(|u| T::from_real(gelu(u.real())));
            let mut m = act.dot(&self.mat(off.w_proj, mlp, c));
            m += &self.vec(off.b_proj, c);
            x += &m;

            layers.push(LayerTape {
                ln1,
                h1,
                qkv,
                att,
                y,
                ln2,
                h2,
                pre,
                act,
            });
        }

        let (hf, lnf) = layer_norm(x.view(), self.vec(lay.lnf_g, c), self.vec(lay.lnf_b, c));
        let mut logits = hf.dot(&self.mat(lay.w_out, c, v));
        logits += &self.vec(lay.b_out, v);

        Ok(Tape {
            tokens: tokens.to_vec(),
            layers,
            lnf,
            hf,
            logits,
        })
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to the tape's logits is `dlogits`.
    pub(crate) fn backward_tape(&self, tape: &Tape<T>, dlogits: &Array2<T>, grads: &mut Gradients<T>) {
        let cfg = self.config();
        let lay = self.layout();
        let (n, c, v) = (tape.tokens.len(), cfg.embed_dim, cfg.vocab_size);
        let (nh, hd, mlp) = (cfg.n_heads, cfg.head_dim(), cfg.mlp_dim());
        let scale = T::from_real(1.0 / (hd as f64).sqrt());
        let g = &mut grads.0;

        add_matmul(g, lay.w_out, &tape.hf.t(), &dlogits.view());
        add_vec(g, lay.b_out, dlogits.sum_axis(Axis(0)).view());
        let dhf = dlogits.dot(&self.mat(lay.w_out, c, v).t());
        let mut dx = layer_norm_backward(&dhf, &tape.lnf, self.vec(lay.lnf_g, c), g, lay.lnf_g, lay.lnf_b);

        for (off, lt) in lay.layers.iter().zip(&tape.layers).rev() {
            // feed-forward block
            add_matmul(g, off.w_proj, &lt.act.t(), &dx.view());
            add_vec(g, off.b_proj, dx.sum_axis(Axis(0)).view());
            let dact = dx.dot(&self.mat(off.w_proj, mlp, c).t());
            let mut dpre = dact;
            Zip::from(&mut dpre)
                .and(&lt.pre)
                .for_each(|d, &u| *d = *d * T::from_real(gelu_grad(u.real())));
            add_matmul(g, off.w_fc, &lt.h2.t(), &dpre.view());
            add_vec(g, off.b_fc, dpre.sum_axis(Axis(0)).view());
            let dh2 = dpre.dot(&self.mat(off.w_fc, c, mlp).t());
            dx += &layer_norm_backward(&dh2, &lt.ln2, self.vec(off.ln2_g, c), g, off.ln2_g, off.ln2_b);

            // attention block
            add_matmul(g, off.w_o, &lt.y.t(), &dx.view());
            add_vec(g, off.b_o, dx.sum_axis(Axis(0)).view());
            let dy = dx.dot(&self.mat(off.w_o, c, c).t());
            let mut dqkv = Array2::<T>::zeros((n, 3 * c));
            for h in 0..nh {
                let att = &lt.att[h];
                let q = lt.qkv.slice(s![.., h * hd..(h + 1) * hd]);
                let k = lt.qkv.slice(s![.., c + h * hd..c + (h + 1) * hd]);
                let vv = lt.qkv.slice(s![.., 2 * c + h * hd..2 * c + (h + 1) * hd]);
                let dyh = dy.slice(s![.., h * hd..(h + 1) * hd]);

                let datt = dyh.dot(&vv.t());
                general_mat_mul(
                    T::one(),
                    &att.t(),
                    &dyh,
                    T::zero(),
                    &mut dqkv.slice_mut(s![.., 2 * c + h * hd..2 * c + (h + 1) * hd]),
                );
                let mut dscores = Array2::<T>::zeros((n, n));
                for i in 0..n {
                    let a = att.row(i);
                    let d = datt.row(i);
                    let inner = a.slice(s![..=i]).dot(&d.slice(s![..=i]));
                    for j in 0..=i {
                        dscores[[i, j]] = a[j] * (d[j] - inner) * scale;
                    }
                }
                general_mat_mul(
                    T::one(),
                    &dscores,
                    &k,
                    T::zero(),
                    &mut dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]),
                );
                general_mat_mul(
                    T::one(),
                    &dscores.t(),
                    &q,
                    T::zero(),
                    &mut dqkv.slice_mut(s![.., c + h * hd..c + (h + 1) * hd]),
                );
            }
            add_matmul(g, off.w_qkv, &lt.h1.t(), &dqkv.view());
            add_vec(g, off.b_qkv, dqkv.sum_axis(Axis(0)).view());
            let dh1 = dqkv.dot(&self.mat(off.w_qkv, c, 3 * c).t());
            dx += &layer_norm_backward(&dh1, &lt.ln1, self.vec(off.ln1_g, c), g, off.ln1_g, off.ln1_b);
        }

        for (i, &t) in tape.tokens.iter().enumerate() {
            let row = dx.row(i);
            add_vec(g, lay.wte + t as usize * c, row);
            add_vec(g, lay.wpe + i * c, row);
        }
    }

    /// Logit rows for every position of `context`; row `t` sees tokens `0..=t`.
    pub fn forward_logits(&self, context: &TokenSequence) -> Result<Array2<T>> {
        Ok(self.forward_tape(context.ids())?.logits)
    }

    /// Teacher-forced log-probabilities of each response token given the
    /// prompt and the gold response prefix.
    pub fn sequence_logprobs(&self, prompt: &TokenSequence, response: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.logprobs_with_tape(prompt, response)?.0)
    }

    pub fn logprobs_with_tape(
        &self,
        prompt: &TokenSequence,
        response: &TokenSequence,
    ) -> Result<(Vec<f64>, Tape<T>)> {
        let (p, r) = (prompt.len(), response.len());
        if r == 0 {
            return Err(Error::Domain("response must contain at least one token".into()));
        }
        if p == 0 {
            return Err(Error::Domain("prompt must contain at least one token".into()));
        }
        if p + r > self.config().context_len {
            return Err(Error::ContextOverflow {
                len: p + r,
                max: self.config().context_len,
            });
        }
        let mut input = Vec::with_capacity(p + r - 1);
        input.extend_from_slice(prompt.ids());
        input.extend_from_slice(&response.ids()[..r - 1]);
        let tape = self.forward_tape(&input)?;
        let lps = response
            .ids()
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                let row = tape.logits.row(p - 1 + t);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.real()));
                let lse = max + row.iter().map(|v| (v.real() - max).exp()).sum::<f64>().ln();
                row[y as usize].real() - lse
            })
            .collect();
        Ok((lps, tape))
    }

    /// Backpropagates `dlogprobs` (dL/d log p(y_t)) through a tape produced by
    /// [`ModelParams::logprobs_with_tape`] for the same prompt length and response.
    pub fn backward_logprobs(
        &self,
        tape: &Tape<T>,
        prompt_len: usize,
        response: &TokenSequence,
        dlogprobs: &[f64],
        grads: &mut Gradients<T>,
    ) {
        let v = self.config().vocab_size;
        let mut dlogits = Array2::<T>::zeros((tape.len(), v));
        for (t, (&y, &d)) in response.ids().iter().zip(dlogprobs).enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = prompt_len - 1 + t;
            let lsm = log_softmax_row(tape.logits.row(row));
            let mut out = dlogits.row_mut(row);
            for (j, l) in lsm.iter().enumerate() {
                let onehot = if j == y as usize { 1.0 } else { 0.0 };
                out[j] = T::from_real(d * (onehot - l.exp()));
            }
        }
        self.backward_tape(tape, &dlogits, grads);
    }
}
