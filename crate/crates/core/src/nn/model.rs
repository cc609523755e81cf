//! Bidirectional pre-norm transformer encoder with tied input/output
//! embeddings, and its hand-written backward pass.
//!
//! Sequences of different lengths are packed row-wise into one matrix; the
//! position-wise layers run over all packed rows at once and attention runs
//! per sequence with no causal mask.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::linalg::{gemm, MatRef, Scalar};
use crate::error::{Error, Result};
use crate::tokenization::TokenId;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size > 0
            && self.d_model > 0
            && self.n_heads > 0
            && self.d_model % self.n_heads == 0
            && self.d_ff > 0
            && self.max_len > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid model config {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Tensor names and shapes in canonical order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_len, d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("attn.w_qkv", vec![d, 3 * d]),
                ("attn.b_qkv", vec![3 * d]),
                ("attn.w_out", vec![d, d]),
                ("attn.b_out", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
                ("ff.w_in", vec![d, f]),
                ("ff.b_in", vec![f]),
                ("ff.w_out", vec![f, d]),
                ("ff.b_out", vec![d]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out.push(("out_bias".to_string(), vec![v]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub w_qkv: Vec<T>,
    pub b_qkv: Vec<T>,
    pub w_attn_out: Vec<T>,
    pub b_attn_out: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w_ff_in: Vec<T>,
    pub b_ff_in: Vec<T>,
    pub w_ff_out: Vec<T>,
    pub b_ff_out: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Vec<T>,
    pub pos_emb: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    pub out_bias: Vec<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let z = |n: usize| vec![T::zero(); n];
        ModelParams {
            config,
            tok_emb: z(v * d),
            pos_emb: z(config.max_len * d),
            layers: (0..config.n_layers)
                .map(|_| LayerParams {
                    ln1_gain: z(d),
                    ln1_bias: z(d),
                    w_qkv: z(d * 3 * d),
                    b_qkv: z(3 * d),
                    w_attn_out: z(d * d),
                    b_attn_out: z(d),
                    ln2_gain: z(d),
                    ln2_bias: z(d),
                    w_ff_in: z(d * f),
                    b_ff_in: z(f),
                    w_ff_out: z(f * d),
                    b_ff_out: z(d),
                })
                .collect(),
            lnf_gain: z(d),
            lnf_bias: z(d),
            out_bias: z(v),
        }
    }

    /// Normal(0, 0.02) weights, residual output projections scaled by
    /// `1/sqrt(2 · layers)`, unit norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let mut normal = |buf: &mut Vec<T>, std: f64| {
            for x in buf.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = T::from_f64(z * std);
            }
        };
        let resid_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        normal(&mut p.tok_emb, INIT_STD);
        normal(&mut p.pos_emb, INIT_STD);
        for layer in &mut p.layers {
            normal(&mut layer.w_qkv, INIT_STD);
            normal(&mut layer.w_attn_out, resid_std);
            normal(&mut layer.w_ff_in, INIT_STD);
            normal(&mut layer.w_ff_out, resid_std);
            layer.ln1_gain.fill(T::one());
            layer.ln2_gain.fill(T::one());
        }
        p.lnf_gain.fill(T::one());
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_gain,
                &l.ln1_bias,
                &l.w_qkv,
                &l.b_qkv,
                &l.w_attn_out,
                &l.b_attn_out,
                &l.ln2_gain,
                &l.ln2_bias,
                &l.w_ff_in,
                &l.b_ff_in,
                &l.w_ff_out,
                &l.b_ff_out,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.out_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_gain,
                &mut l.ln1_bias,
                &mut l.w_qkv,
                &mut l.b_qkv,
                &mut l.w_attn_out,
                &mut l.b_attn_out,
                &mut l.ln2_gain,
                &mut l.ln2_bias,
                &mut l.w_ff_in,
                &mut l.b_ff_in,
                &mut l.w_ff_out,
                &mut l.b_ff_out,
            ]);
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.out_bias]);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.as_f64());
            }
        }
        out
    }
}

/// Sequences concatenated row-wise; sequence `s` occupies rows
/// `offsets[s]..offsets[s + 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PackedBatch {
    pub tokens: Vec<TokenId>,
    pub offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn from_seqs<S: AsRef<[TokenId]>>(seqs: &[S]) -> Self {
        let mut tokens = Vec::new();
        let mut offsets = vec![0];
        for s in seqs {
            tokens.extend_from_slice(s.as_ref());
            offsets.push(tokens.len());
        }
        PackedBatch { tokens, offsets }
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn num_rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn seq_range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }
}

/// Logits for a selection of packed rows, `rows × vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T> {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T> Logits<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    ln1_hat: Vec<T>,
    ln1_rstd: Vec<T>,
    ln1_out: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2_hat: Vec<T>,
    ln2_rstd: Vec<T>,
    ln2_out: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    ff_tanh: Vec<T>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: PackedBatch,
    rows: Vec<usize>,
    prob_offsets: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    lnf_hat: Vec<T>,
    lnf_rstd: Vec<T>,
    y_rows: Vec<T>,
}

fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    hat: &mut [T],
    rstd: &mut [T],
) {
    let d = gain.len();
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (r, ((xr, outr), hatr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(hat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (xr[i] - mean) * rs;
            hatr[i] = xh;
            outr[i] = xh * gain[i] + bias[i];
        }
    }
}

/// Accumulates parameter grads and adds the input gradient into `dx`.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    hat: &[T],
    rstd: &[T],
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, ((dyr, hr), dxr)) in dy
        .chunks_exact(d)
        .zip(hat.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let mut sum = T::zero();
        let mut sum_h = T::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * hr[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            sum += dxhat[i];
            sum_h += dxhat[i] * hr[i];
        }
        let mean = sum * inv_d;
        let mean_h = sum_h * inv_d;
        for i in 0..d {
            dxr[i] += rstd[r] * (dxhat[i] - mean - hr[i] * mean_h);
        }
    }
}

fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], d_in: usize, d_out: usize, out: &mut [T]) {
    let n = x.len() / d_in;
    gemm(
        T::one(),
        MatRef::new(x, n, d_in),
        MatRef::new(w, d_in, d_out),
        T::zero(),
        out,
        d_out,
    );
    for row in out.chunks_exact_mut(d_out) {
        for (o, &bb) in row.iter_mut().zip(b) {
            *o += bb;
        }
    }
}

/// Accumulates `dw`, `db` and returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    d_in: usize,
    d_out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let n = x.len() / d_in;
    gemm(
        T::one(),
        MatRef::new(x, n, d_in).t(),
        MatRef::new(dout, n, d_out),
        T::one(),
        dw,
        d_out,
    );
    for row in dout.chunks_exact(d_out) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![T::zero(); n * d_in];
    gemm(
        T::one(),
        MatRef::new(dout, n, d_out),
        MatRef::new(w, d_in, d_out).t(),
        T::zero(),
        &mut dx,
        d_in,
    );
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh through a single `exp`, which is several times cheaper than libm's
/// `tanh` and exact to a few ulps.
fn fast_tanh<T: Scalar>(u: T) -> T {
    let e = (T::from_f64(-2.0) * u.abs()).exp();
    ((T::one() - e) / (T::one() + e)).copysign(u)
}

/// Tanh-approximated GELU; also returns the inner tanh for the backward pass.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = fast_tanh(c * (x + a * x * x * x));
    (half * x * (T::one() + th), th)
}

fn gelu_grad<T: Scalar>(x: T, th: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

impl<T: Scalar> ModelParams<T> {
    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        for s in 0..batch.num_seqs() {
            let len = batch.seq_range(s).len();
            if len > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max_len: self.config.max_len,
                });
            }
        }
        if let Some(&id) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::InvalidTokenId {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the encoder over `batch` and returns logits for the packed rows
    /// listed in `rows`, plus the activations needed for [`Self::backward`].
    pub fn forward(
        &self,
        batch: &PackedBatch,
        rows: &[usize],
    ) -> Result<(Logits<T>, ForwardCache<T>)> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let n = batch.num_rows();
        if let Some(&r) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidMasking(format!("row {r} outside batch of {n}")));
        }
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let mut x = vec![T::zero(); n * d];
        for s in 0..batch.num_seqs() {
            for (pos, row) in batch.seq_range(s).enumerate() {
                let tok = batch.tokens[row] as usize;
                let xr = &mut x[row * d..(row + 1) * d];
                let e = &self.tok_emb[tok * d..(tok + 1) * d];
                let p = &self.pos_emb[pos * d..(pos + 1) * d];
                for i in 0..d {
                    xr[i] = e[i] + p[i];
                }
            }
        }

        let mut prob_offsets = Vec::with_capacity(batch.num_seqs() + 1);
        let mut total = 0;
        for s in 0..batch.num_seqs() {
            prob_offsets.push(total);
            total += nh * batch.seq_range(s).len().pow(2);
        }
        prob_offsets.push(total);

        let mut layer_caches = Vec::with_capacity(cfg.n_layers);
        for lp in &self.layers {
            let mut ln1_hat = vec![T::zero(); n * d];
            let mut ln1_rstd = vec![T::zero(); n];
            let mut ln1_out = vec![T::zero(); n * d];
            layer_norm(&x, &lp.ln1_gain, &lp.ln1_bias, &mut ln1_out, &mut ln1_hat, &mut ln1_rstd);

            let mut qkv = vec![T::zero(); n * 3 * d];
            linear(&ln1_out, &lp.w_qkv, &lp.b_qkv, d, 3 * d, &mut qkv);

            let mut probs = vec![T::zero(); total];
            let mut attn = vec![T::zero(); n * d];
            for s in 0..batch.num_seqs() {
                let range = batch.seq_range(s);
                let (o, l) = (range.start, range.len());
                for h in 0..nh {
                    let p = &mut probs[prob_offsets[s] + h * l * l..prob_offsets[s] + (h + 1) * l * l];
                    let q = MatRef::strided(&qkv[o * 3 * d + h * dh..], l, dh, 3 * d);
                    let k = MatRef::strided(&qkv[o * 3 * d + d + h * dh..], l, dh, 3 * d);
                    gemm(scale, q, k.t(), T::zero(), p, l);
                    for row in p.chunks_exact_mut(l) {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let mut sum = T::zero();
                        for e in row.iter_mut() {
                            *e = (*e - max).exp();
                            sum += *e;
                        }
                        let inv = sum.recip();
                        for e in row.iter_mut() {
                            *e *= inv;
                        }
                    }
                    let vm = MatRef::strided(&qkv[o * 3 * d + 2 * d + h * dh..], l, dh, 3 * d);
                    gemm(
                        T::one(),
                        MatRef::new(p, l, l),
                        vm,
                        T::zero(),
                        &mut attn[o * d + h * dh..],
                        d,
                    );
                }
            }

            let mut h = vec![T::zero(); n * d];
            linear(&attn, &lp.w_attn_out, &lp.b_attn_out, d, d, &mut h);
            for (hv, &xv) in h.iter_mut().zip(&x) {
                *hv += xv;
            }

            let mut ln2_hat = vec![T::zero(); n * d];
            let mut ln2_rstd = vec![T::zero(); n];
            let mut ln2_out = vec![T::zero(); n * d];
            layer_norm(&h, &lp.ln2_gain, &lp.ln2_bias, &mut ln2_out, &mut ln2_hat, &mut ln2_rstd);

            let mut ff_pre = vec![T::zero(); n * f];
            linear(&ln2_out, &lp.w_ff_in, &lp.b_ff_in, d, f, &mut ff_pre);
            let mut ff_act = vec![T::zero(); n * f];
            let mut ff_tanh = vec![T::zero(); n * f];
            for ((&u, act), th) in ff_pre.iter().zip(&mut ff_act).zip(&mut ff_tanh) {
                (*act, *th) = gelu(u);
            }
            let mut x_next = vec![T::zero(); n * d];
            linear(&ff_act, &lp.w_ff_out, &lp.b_ff_out, f, d, &mut x_next);
            for (xv, &hv) in x_next.iter_mut().zip(&h) {
                *xv += hv;
            }

            x = x_next;
            layer_caches.push(LayerCache {
                ln1_hat,
                ln1_rstd,
                ln1_out,
                qkv,
                probs,
                attn,
                ln2_hat,
                ln2_rstd,
                ln2_out,
                ff_pre,
                ff_act,
                ff_tanh,
            });
        }

        let mut lnf_hat = vec![T::zero(); n * d];
        let mut lnf_rstd = vec![T::zero(); n];
        let mut y = vec![T::zero(); n * d];
        layer_norm(&x, &self.lnf_gain, &self.lnf_bias, &mut y, &mut lnf_hat, &mut lnf_rstd);

        let mut y_rows = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            y_rows.extend_from_slice(&y[r * d..(r + 1) * d]);
        }
        let mut logits = vec![T::zero(); rows.len() * v];
        gemm(
            T::one(),
            MatRef::new(&y_rows, rows.len(), d),
            MatRef::new(&self.tok_emb, v, d).t(),
            T::zero(),
            &mut logits,
            v,
        );
        for row in logits.chunks_exact_mut(v) {
            for (z, &b) in row.iter_mut().zip(&self.out_bias) {
                *z += b;
            }
        }

        let cache = ForwardCache {
            batch: batch.clone(),
            rows: rows.to_vec(),
            prob_offsets,
            layers: layer_caches,
            lnf_hat,
            lnf_rstd,
            y_rows,
        };
        Ok((
            Logits {
                rows: rows.len(),
                vocab: v,
                data: logits,
            },
            cache,
        ))
    }

    /// Full logits (`len × vocab`) for every position of every sequence.
    pub fn logits<S: AsRef<[TokenId]>>(&self, seqs: &[S]) -> Result<Vec<Logits<T>>> {
        let batch = PackedBatch::from_seqs(seqs);
        let rows: Vec<usize> = (0..batch.num_rows()).collect();
        let (all, _) = self.forward(&batch, &rows)?;
        let v = self.config.vocab_size;
        Ok((0..batch.num_seqs())
            .map(|s| {
                let r = batch.seq_range(s);
                Logits {
                    rows: r.len(),
                    vocab: v,
                    data: all.data[r.start * v..r.end * v].to_vec(),
                }
            })
            .collect())
    }

    /// Gradient of a scalar objective with respect to every parameter, given
    /// its gradient `dlogits` with respect to the logits returned by
    /// [`Self::forward`].
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T]) -> ModelParams<T> {
        let cfg = &self.config;
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, dh) = (cfg.n_heads, cfg.head_dim());
        let batch = &cache.batch;
        let n = batch.num_rows();
        let nr = cache.rows.len();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut g = ModelParams::zeros(*cfg);

        // Tied output projection.
        gemm(
            T::one(),
            MatRef::new(dlogits, nr, v).t(),
            MatRef::new(&cache.y_rows, nr, d),
            T::zero(),
            &mut g.tok_emb,
            d,
        );
        for row in dlogits.chunks_exact(v) {
            for (gb, &z) in g.out_bias.iter_mut().zip(row) {
                *gb += z;
            }
        }
        let mut dy_rows = vec![T::zero(); nr * d];
        gemm(
            T::one(),
            MatRef::new(dlogits, nr, v),
            MatRef::new(&self.tok_emb, v, d),
            T::zero(),
            &mut dy_rows,
            d,
        );
        let mut dy = vec![T::zero(); n * d];
        for (i, &r) in cache.rows.iter().enumerate() {
            for j in 0..d {
                dy[r * d + j] += dy_rows[i * d + j];
            }
        }
        let mut dx = vec![T::zero(); n * d];
        layer_norm_backward(
            &dy,
            &cache.lnf_hat,
            &cache.lnf_rstd,
            &self.lnf_gain,
            &mut g.lnf_gain,
            &mut g.lnf_bias,
            &mut dx,
        );

        for (l, lc) in cache.layers.iter().enumerate().rev() {
            let lp = &self.layers[l];
            let gl = &mut g.layers[l];

            // x_out = h + ff(ln2(h))
            let dff_act = linear_backward(
                &lc.ff_act,
                &lp.w_ff_out,
                &dx,
                f,
                d,
                &mut gl.w_ff_out,
                &mut gl.b_ff_out,
            );
            let dff_pre: Vec<T> = dff_act
                .iter()
                .zip(lc.ff_pre.iter().zip(&lc.ff_tanh))
                .map(|(&gv, (&u, &th))| gv * gelu_grad(u, th))
                .collect();
            let dln2 = linear_backward(
                &lc.ln2_out,
                &lp.w_ff_in,
                &dff_pre,
                d,
                f,
                &mut gl.w_ff_in,
                &mut gl.b_ff_in,
            );
            let mut dres = dx;
            layer_norm_backward(
                &dln2,
                &lc.ln2_hat,
                &lc.ln2_rstd,
                &lp.ln2_gain,
                &mut gl.ln2_gain,
                &mut gl.ln2_bias,
                &mut dres,
            );

            // h = x_in + attn_out(attention(ln1(x_in)))
            let dattn = linear_backward(
                &lc.attn,
                &lp.w_attn_out,
                &dres,
                d,
                d,
                &mut gl.w_attn_out,
                &mut gl.b_attn_out,
            );
            let mut dqkv = vec![T::zero(); n * 3 * d];
            for s in 0..batch.num_seqs() {
                let range = batch.seq_range(s);
                let (o, len) = (range.start, range.len());
                let mut dp = vec![T::zero(); len * len];
                for h in 0..nh {
                    let base = cache.prob_offsets[s] + h * len * len;
                    let p = &lc.probs[base..base + len * len];
                    let d_out = MatRef::strided(&dattn[o * d + h * dh..], len, dh, d);
                    let q = MatRef::strided(&lc.qkv[o * 3 * d + h * dh..], len, dh, 3 * d);
                    let k = MatRef::strided(&lc.qkv[o * 3 * d + d + h * dh..], len, dh, 3 * d);
                    let vm = MatRef::strided(&lc.qkv[o * 3 * d + 2 * d + h * dh..], len, dh, 3 * d);
                    gemm(T::one(), d_out, vm.t(), T::zero(), &mut dp, len);
                    for (dpr, pr) in dp.chunks_exact_mut(len).zip(p.chunks_exact(len)) {
                        let dot: T = dpr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                        for (a, &b) in dpr.iter_mut().zip(pr) {
                            *a = b * (*a - dot) * scale;
                        }
                    }
                    let ds = MatRef::new(&dp, len, len);
                    gemm(T::one(), ds, k, T::zero(), &mut dqkv[o * 3 * d + h * dh..], 3 * d);
                    gemm(
                        T::one(),
                        ds.t(),
                        q,
                        T::zero(),
                        &mut dqkv[o * 3 * d + d + h * dh..],
                        3 * d,
                    );
                    gemm(
                        T::one(),
                        MatRef::new(p, len, len).t(),
                        d_out,
                        T::zero(),
                        &mut dqkv[o * 3 * d + 2 * d + h * dh..],
                        3 * d,
                    );
                }
            }
            let dln1 = linear_backward(
                &lc.ln1_out,
                &lp.w_qkv,
                &dqkv,
                d,
                3 * d,
                &mut gl.w_qkv,
                &mut gl.b_qkv,
            );
            let mut dx_in = dres;
            layer_norm_backward(
                &dln1,
                &lc.ln1_hat,
                &lc.ln1_rstd,
                &lp.ln1_gain,
                &mut gl.ln1_gain,
                &mut gl.ln1_bias,
                &mut dx_in,
            );
            dx = dx_in;
        }

        for s in 0..batch.num_seqs() {
            for (pos, row) in batch.seq_range(s).enumerate() {
                let tok = batch.tokens[row] as usize;
                for j in 0..d {
                    let gv = dx[row * d + j];
                    g.tok_emb[tok * d + j] += gv;
                    g.pos_emb[pos * d + j] += gv;
                }
            }
        }
        g
    }
}
