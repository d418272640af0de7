//! Transformer user encoder and item ID-embedding tower.
//!
//! The user side embeds the MeKB token sequence (token + learned position
//! embeddings), runs pre-norm transformer blocks with padding-masked
//! attention and a GELU feed-forward, mean-pools over masked-in
//! positions, and projects to the retrieval dimension K. Items are plain
//! ID embeddings of the same dimension; user/item affinity is the dot
//! product. Every forward has a matching hand-derived backward so
//! training needs no autograd framework.

pub mod checkpoint;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{axpy, dot, Matrix};
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-12;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Shape of the user encoder. `d_model` must divide evenly by `n_heads`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    /// Output embedding dimension K shared by users and items.
    pub k_dim: usize,
    /// Sequence length N.
    pub n_max: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ffn: 512,
            k_dim: 64,
            n_max: 256,
            vocab_size: 1000,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return Err("layer, head and width counts must be positive".to_string());
        }
        if self.k_dim == 0 || self.n_max == 0 || self.vocab_size == 0 {
            return Err("k_dim, n_max and vocab_size must be positive".to_string());
        }
        if self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("cannot encode an all-padding sequence (empty MeKB)")]
    EmptyMask,
    #[error("sequence length {got} does not match configured n_max {want}")]
    BadLength { got: usize, want: usize },
    #[error("unknown item {0:?}")]
    UnknownItem(String),
}

/// One transformer block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_ff1: Matrix,
    pub b_ff1: Vec<f64>,
    pub w_ff2: Matrix,
    pub b_ff2: Vec<f64>,
}

impl LayerParams {
    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        LayerParams {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            wk: Matrix::zeros(d, d),
            bk: vec![0.0; d],
            wv: Matrix::zeros(d, d),
            bv: vec![0.0; d],
            wo: Matrix::zeros(d, d),
            bo: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w_ff1: Matrix::zeros(d, cfg.d_ffn),
            b_ff1: vec![0.0; cfg.d_ffn],
            w_ff2: Matrix::zeros(cfg.d_ffn, d),
            b_ff2: vec![0.0; d],
        }
    }
}

/// All trainable tensors of the user encoder. Doubles as the gradient
/// container: gradients have exactly the same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEncoderParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Standard normal via Box-Muller, rejected outside two standard
/// deviations, scaled to `std`.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn fill_trunc_normal(m: &mut Matrix, rng: &mut ChaCha8Rng, std: f64) {
    for v in m.data_mut() {
        *v = trunc_normal(rng, std);
    }
}

impl UserEncoderParams {
    /// Seeded initialization: truncated normal (std 0.02) weights and
    /// embeddings, unit layer-norm gains, zero biases.
    pub fn init(cfg: &EncoderConfig) -> Self {
        cfg.validate().expect("invalid encoder config");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 0.02;
        let mut p = Self::zeros(cfg);
        fill_trunc_normal(&mut p.tok_emb, &mut rng, std);
        fill_trunc_normal(&mut p.pos_emb, &mut rng, std);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
            fill_trunc_normal(&mut layer.wq, &mut rng, std);
            fill_trunc_normal(&mut layer.wk, &mut rng, std);
            fill_trunc_normal(&mut layer.wv, &mut rng, std);
            fill_trunc_normal(&mut layer.wo, &mut rng, std);
            fill_trunc_normal(&mut layer.w_ff1, &mut rng, std);
            fill_trunc_normal(&mut layer.w_ff2, &mut rng, std);
        }
        fill_trunc_normal(&mut p.w_out, &mut rng, std);
        p
    }

    /// All-zero tensors of the configured shapes; the gradient buffer.
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        UserEncoderParams {
            tok_emb: Matrix::zeros(cfg.vocab_size, cfg.d_model),
            pos_emb: Matrix::zeros(cfg.n_max, cfg.d_model),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
            w_out: Matrix::zeros(cfg.d_model, cfg.k_dim),
            b_out: vec![0.0; cfg.k_dim],
        }
    }

    /// Named views of every tensor, in a fixed order shared with
    /// [`UserEncoderParams::named_tensors_mut`]. The flag marks tensors
    /// subject to weight decay (everything except layer-norm gains and
    /// biases).
    pub fn named_tensors(&self) -> Vec<(String, &[f64], bool)> {
        let mut out: Vec<(String, &[f64], bool)> = vec![
            ("tok_emb".to_string(), self.tok_emb.data(), true),
            ("pos_emb".to_string(), self.pos_emb.data(), true),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &l.ln1_gain, false));
            out.push((format!("layer{i}.ln1.bias"), &l.ln1_bias, false));
            out.push((format!("layer{i}.attn.wq"), l.wq.data(), true));
            out.push((format!("layer{i}.attn.bq"), &l.bq, true));
            out.push((format!("layer{i}.attn.wk"), l.wk.data(), true));
            out.push((format!("layer{i}.attn.bk"), &l.bk, true));
            out.push((format!("layer{i}.attn.wv"), l.wv.data(), true));
            out.push((format!("layer{i}.attn.bv"), &l.bv, true));
            out.push((format!("layer{i}.attn.wo"), l.wo.data(), true));
            out.push((format!("layer{i}.attn.bo"), &l.bo, true));
            out.push((format!("layer{i}.ln2.gain"), &l.ln2_gain, false));
            out.push((format!("layer{i}.ln2.bias"), &l.ln2_bias, false));
            out.push((format!("layer{i}.ffn.w1"), l.w_ff1.data(), true));
            out.push((format!("layer{i}.ffn.b1"), &l.b_ff1, true));
            out.push((format!("layer{i}.ffn.w2"), l.w_ff2.data(), true));
            out.push((format!("layer{i}.ffn.b2"), &l.b_ff2, true));
        }
        out.push(("out.weight".to_string(), self.w_out.data(), true));
        out.push(("out.bias".to_string(), &self.b_out, true));
        out
    }

    /// Mutable counterpart of [`UserEncoderParams::named_tensors`];
    /// identical names and order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut [f64], bool)> {
        let mut out: Vec<(String, &mut [f64], bool)> = vec![
            ("tok_emb".to_string(), self.tok_emb.data_mut(), true),
            ("pos_emb".to_string(), self.pos_emb.data_mut(), true),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.ln1.gain"), &mut l.ln1_gain, false));
            out.push((format!("layer{i}.ln1.bias"), &mut l.ln1_bias, false));
            out.push((format!("layer{i}.attn.wq"), l.wq.data_mut(), true));
            out.push((format!("layer{i}.attn.bq"), &mut l.bq, true));
            out.push((format!("layer{i}.attn.wk"), l.wk.data_mut(), true));
            out.push((format!("layer{i}.attn.bk"), &mut l.bk, true));
            out.push((format!("layer{i}.attn.wv"), l.wv.data_mut(), true));
            out.push((format!("layer{i}.attn.bv"), &mut l.bv, true));
            out.push((format!("layer{i}.attn.wo"), l.wo.data_mut(), true));
            out.push((format!("layer{i}.attn.bo"), &mut l.bo, true));
            out.push((format!("layer{i}.ln2.gain"), &mut l.ln2_gain, false));
            out.push((format!("layer{i}.ln2.bias"), &mut l.ln2_bias, false));
            out.push((format!("layer{i}.ffn.w1"), l.w_ff1.data_mut(), true));
            out.push((format!("layer{i}.ffn.b1"), &mut l.b_ff1, true));
            out.push((format!("layer{i}.ffn.w2"), l.w_ff2.data_mut(), true));
            out.push((format!("layer{i}.ffn.b2"), &mut l.b_ff2, true));
        }
        out.push(("out.weight".to_string(), self.w_out.data_mut(), true));
        out.push(("out.bias".to_string(), &mut self.b_out, true));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t, _)| t.iter().all(|v| v.is_finite()))
    }

    /// Runs the transformer stack and returns per-position hidden states
    /// with the caches backward needs.
    pub fn forward_states(
        &self,
        cfg: &EncoderConfig,
        ids: &[u32],
        mask: &[u8],
    ) -> (Matrix, StatesCache) {
        let n = cfg.n_max;
        assert_eq!(ids.len(), n);
        assert_eq!(mask.len(), n);

        let mut x = Matrix::zeros(n, cfg.d_model);
        for t in 0..n {
            let emb = self.tok_emb.row(ids[t] as usize);
            let pos = self.pos_emb.row(t);
            for (i, v) in x.row_mut(t).iter_mut().enumerate() {
                *v = emb[i] + pos[i];
            }
        }

        let mut layer_caches = Vec::with_capacity(cfg.n_layers);
        for layer in &self.layers {
            let cache = layer_forward(layer, cfg, &mut x, mask);
            layer_caches.push(cache);
        }

        let cache = StatesCache { ids: ids.to_vec(), mask: mask.to_vec(), layers: layer_caches };
        (x, cache)
    }

    /// Backpropagates `d_states` through the stack, accumulating into
    /// `grads` (a zeroed [`UserEncoderParams`]).
    pub fn backward_states(
        &self,
        cfg: &EncoderConfig,
        cache: &StatesCache,
        d_states: &Matrix,
        grads: &mut UserEncoderParams,
    ) {
        let mut dx = d_states.clone();
        for (layer_idx, layer) in self.layers.iter().enumerate().rev() {
            layer_backward(
                layer,
                cfg,
                &cache.layers[layer_idx],
                &mut dx,
                &mut grads.layers[layer_idx],
            );
        }
        for t in 0..cfg.n_max {
            let row = dx.row(t);
            axpy(1.0, row, grads.tok_emb.row_mut(cache.ids[t] as usize));
            axpy(1.0, row, grads.pos_emb.row_mut(t));
        }
    }

    /// Encodes a sequence to the K-dimensional user embedding.
    pub fn encode(&self, cfg: &EncoderConfig, seq: &TokenSequence) -> Result<Vec<f64>, EncodeError> {
        Ok(self.encode_cached(cfg, seq)?.0)
    }

    /// [`UserEncoderParams::encode`] keeping the caches for backward.
    pub fn encode_cached(
        &self,
        cfg: &EncoderConfig,
        seq: &TokenSequence,
    ) -> Result<(Vec<f64>, EncodeCache), EncodeError> {
        if seq.ids.len() != cfg.n_max {
            return Err(EncodeError::BadLength { got: seq.ids.len(), want: cfg.n_max });
        }
        let active = seq.active_len();
        if active == 0 {
            return Err(EncodeError::EmptyMask);
        }
        let (states, states_cache) = self.forward_states(cfg, &seq.ids, &seq.attention_mask);

        let mut pooled = vec![0.0; cfg.d_model];
        for t in 0..cfg.n_max {
            if seq.attention_mask[t] == 1 {
                axpy(1.0, states.row(t), &mut pooled);
            }
        }
        let inv = 1.0 / active as f64;
        for v in &mut pooled {
            *v *= inv;
        }

        let mut out = self.b_out.clone();
        for (d, &p) in pooled.iter().enumerate() {
            if p != 0.0 {
                axpy(p, self.w_out.row(d), &mut out);
            }
        }
        Ok((out, EncodeCache { states, states_cache, pooled }))
    }

    /// Backward of [`UserEncoderParams::encode_cached`] from `d_out`
    /// (gradient w.r.t. the K-dim embedding), accumulating into `grads`.
    pub fn encode_backward(
        &self,
        cfg: &EncoderConfig,
        cache: &EncodeCache,
        d_out: &[f64],
        grads: &mut UserEncoderParams,
    ) {
        let mask = &cache.states_cache.mask;
        let active = mask.iter().filter(|&&m| m == 1).count();
        debug_assert!(active > 0);

        axpy(1.0, d_out, &mut grads.b_out);
        let mut d_pooled = vec![0.0; cfg.d_model];
        for d in 0..cfg.d_model {
            axpy(cache.pooled[d], d_out, grads.w_out.row_mut(d));
            d_pooled[d] = dot(self.w_out.row(d), d_out);
        }

        let inv = 1.0 / active as f64;
        let mut d_states = Matrix::zeros(cfg.n_max, cfg.d_model);
        for t in 0..cfg.n_max {
            if mask[t] == 1 {
                axpy(inv, &d_pooled, d_states.row_mut(t));
            }
        }
        self.backward_states(cfg, &cache.states_cache, &d_states, grads);
    }
}

/// Per-position layer norm cache.
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LnCache) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = vec![0.0; rows];
    for t in 0..rows {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = inv;
        let xh = xhat.row_mut(t);
        let o = out.row_mut(t);
        for i in 0..cols {
            xh[i] = (row[i] - mean) * inv;
            o[i] = gain[i] * xh[i] + bias[i];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LnCache,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Matrix {
    let (rows, cols) = (d_out.rows(), d_out.cols());
    let mut dx = Matrix::zeros(rows, cols);
    for t in 0..rows {
        let dy = d_out.row(t);
        let xh = cache.xhat.row(t);
        let mut dxhat = vec![0.0; cols];
        for i in 0..cols {
            d_gain[i] += dy[i] * xh[i];
            d_bias[i] += dy[i];
            dxhat[i] = dy[i] * gain[i];
        }
        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
        let inv = cache.inv_std[t];
        let out = dx.row_mut(t);
        for i in 0..cols {
            out[i] = inv * (dxhat[i] - m1 - xh[i] * m2);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

fn add_bias_rows(m: &mut Matrix, bias: &[f64]) {
    for t in 0..m.rows() {
        axpy(1.0, bias, m.row_mut(t));
    }
}

fn add_col_sums(m: &Matrix, acc: &mut [f64]) {
    for t in 0..m.rows() {
        axpy(1.0, m.row(t), acc);
    }
}

/// Cache of one block's forward intermediates.
struct LayerCache {
    ln1: LnCache,
    u: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per-head attention probabilities, each [N, N].
    probs: Vec<Matrix>,
    ctx: Matrix,
    ln2: LnCache,
    v2: Matrix,
    f1: Matrix,
    g: Matrix,
}

/// Pre-norm block: `x += Attn(LN1(x))`, then `x += FFN(LN2(x))`.
/// Masked-out key positions are excluded from every attention row.
fn layer_forward(layer: &LayerParams, cfg: &EncoderConfig, x: &mut Matrix, mask: &[u8]) -> LayerCache {
    let n = cfg.n_max;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    let (u, ln1) = layer_norm(x, &layer.ln1_gain, &layer.ln1_bias);
    let mut q = u.matmul(&layer.wq);
    add_bias_rows(&mut q, &layer.bq);
    let mut k = u.matmul(&layer.wk);
    add_bias_rows(&mut k, &layer.bk);
    let mut v = u.matmul(&layer.wv);
    add_bias_rows(&mut v, &layer.bv);

    let mut probs = Vec::with_capacity(cfg.n_heads);
    let mut ctx = Matrix::zeros(n, cfg.d_model);
    for head in 0..cfg.n_heads {
        let off = head * dh;
        let mut p = Matrix::zeros(n, n);
        for t in 0..n {
            let q_t = &q.row(t)[off..off + dh];
            let row = p.row_mut(t);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                row[j] = if mask[j] == 1 {
                    let s = dot(q_t, &k.row(j)[off..off + dh]) * scale;
                    max = max.max(s);
                    s
                } else {
                    f64::NEG_INFINITY
                };
            }
            let mut denom = 0.0;
            for val in row.iter_mut() {
                *val = (*val - max).exp(); // exp(-inf) = 0 on masked keys
                denom += *val;
            }
            let inv = 1.0 / denom;
            for val in row.iter_mut() {
                *val *= inv;
            }
        }
        for t in 0..n {
            let p_row = p.row(t);
            for j in 0..n {
                let w = p_row[j];
                if w != 0.0 {
                    let v_j = &v.row(j)[off..off + dh];
                    let c_t = &mut ctx.row_mut(t)[off..off + dh];
                    for (c, &vv) in c_t.iter_mut().zip(v_j) {
                        *c += w * vv;
                    }
                }
            }
        }
        probs.push(p);
    }

    let mut attn_out = ctx.matmul(&layer.wo);
    add_bias_rows(&mut attn_out, &layer.bo);
    for t in 0..n {
        axpy(1.0, attn_out.row(t), x.row_mut(t));
    }

    let (v2, ln2) = layer_norm(x, &layer.ln2_gain, &layer.ln2_bias);
    let mut f1 = v2.matmul(&layer.w_ff1);
    add_bias_rows(&mut f1, &layer.b_ff1);
    let mut g = Matrix::zeros(n, cfg.d_ffn);
    for t in 0..n {
        for (gv, &fv) in g.row_mut(t).iter_mut().zip(f1.row(t)) {
            *gv = gelu(fv);
        }
    }
    let mut f2 = g.matmul(&layer.w_ff2);
    add_bias_rows(&mut f2, &layer.b_ff2);
    for t in 0..n {
        axpy(1.0, f2.row(t), x.row_mut(t));
    }

    LayerCache { ln1, u, q, k, v, probs, ctx, ln2, v2, f1, g }
}

/// Exact reverse of [`layer_forward`]. `dx` arrives as the gradient
/// w.r.t. the block output and leaves as the gradient w.r.t. its input.
fn layer_backward(
    layer: &LayerParams,
    cfg: &EncoderConfig,
    cache: &LayerCache,
    dx: &mut Matrix,
    grads: &mut LayerParams,
) {
    let n = cfg.n_max;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN half: x_out = x_mid + gelu(LN2(x_mid)·W1 + b1)·W2 + b2
    let d_f2 = dx.clone();
    grads.w_ff2.add_at_mul(&cache.g, &d_f2);
    add_col_sums(&d_f2, &mut grads.b_ff2);
    let d_g = d_f2.matmul_transb(&layer.w_ff2);
    let mut d_f1 = Matrix::zeros(n, cfg.d_ffn);
    for t in 0..n {
        let dg = d_g.row(t);
        let f1 = cache.f1.row(t);
        for (i, v) in d_f1.row_mut(t).iter_mut().enumerate() {
            *v = dg[i] * gelu_prime(f1[i]);
        }
    }
    grads.w_ff1.add_at_mul(&cache.v2, &d_f1);
    add_col_sums(&d_f1, &mut grads.b_ff1);
    let d_v2 = d_f1.matmul_transb(&layer.w_ff1);
    let d_x_ln2 = layer_norm_backward(&d_v2, &cache.ln2, &layer.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);
    for t in 0..n {
        axpy(1.0, d_x_ln2.row(t), dx.row_mut(t));
    }

    // attention half: x_mid = x_in + (softmax(QKᵀ/√dh)·V)·Wo + bo
    let d_attn_out = dx.clone();
    grads.wo.add_at_mul(&cache.ctx, &d_attn_out);
    add_col_sums(&d_attn_out, &mut grads.bo);
    let d_ctx = d_attn_out.matmul_transb(&layer.wo);

    let mut d_q = Matrix::zeros(n, cfg.d_model);
    let mut d_k = Matrix::zeros(n, cfg.d_model);
    let mut d_v = Matrix::zeros(n, cfg.d_model);
    for head in 0..cfg.n_heads {
        let off = head * dh;
        let p = &cache.probs[head];
        for t in 0..n {
            let d_ctx_t = &d_ctx.row(t)[off..off + dh];
            if d_ctx_t.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p_row = p.row(t);
            // dP and the softmax Jacobian, row-wise
            let mut d_p = vec![0.0; n];
            let mut inner = 0.0;
            for j in 0..n {
                if p_row[j] != 0.0 {
                    d_p[j] = dot(d_ctx_t, &cache.v.row(j)[off..off + dh]);
                    inner += d_p[j] * p_row[j];
                }
            }
            for j in 0..n {
                let pj = p_row[j];
                if pj == 0.0 {
                    continue;
                }
                let d_s = pj * (d_p[j] - inner);
                // dV from attention output, dQ/dK from the score
                let v_grad = &mut d_v.row_mut(j)[off..off + dh];
                for (g, &c) in v_grad.iter_mut().zip(d_ctx_t) {
                    *g += pj * c;
                }
                if d_s != 0.0 {
                    let k_j = &cache.k.row(j)[off..off + dh];
                    let dq_t = &mut d_q.row_mut(t)[off..off + dh];
                    for (g, &kv) in dq_t.iter_mut().zip(k_j) {
                        *g += d_s * kv * scale;
                    }
                    let q_t = &cache.q.row(t)[off..off + dh];
                    let dk_j = &mut d_k.row_mut(j)[off..off + dh];
                    for (g, &qv) in dk_j.iter_mut().zip(q_t) {
                        *g += d_s * qv * scale;
                    }
                }
            }
        }
    }

    grads.wq.add_at_mul(&cache.u, &d_q);
    add_col_sums(&d_q, &mut grads.bq);
    grads.wk.add_at_mul(&cache.u, &d_k);
    add_col_sums(&d_k, &mut grads.bk);
    grads.wv.add_at_mul(&cache.u, &d_v);
    add_col_sums(&d_v, &mut grads.bv);

    let mut d_u = d_q.matmul_transb(&layer.wq);
    let d_u_k = d_k.matmul_transb(&layer.wk);
    let d_u_v = d_v.matmul_transb(&layer.wv);
    for t in 0..n {
        axpy(1.0, d_u_k.row(t), d_u.row_mut(t));
        axpy(1.0, d_u_v.row(t), d_u.row_mut(t));
    }
    let d_x_ln1 = layer_norm_backward(&d_u, &cache.ln1, &layer.ln1_gain, &mut grads.ln1_gain, &mut grads.ln1_bias);
    for t in 0..n {
        axpy(1.0, d_x_ln1.row(t), dx.row_mut(t));
    }
}

/// Transformer-stack caches for one sequence.
pub struct StatesCache {
    ids: Vec<u32>,
    mask: Vec<u8>,
    layers: Vec<LayerCache>,
}

impl StatesCache {
    pub fn mask(&self) -> &[u8] {
        &self.mask
    }
}

/// Caches for a full user encoding (states + pooling).
pub struct EncodeCache {
    pub states: Matrix,
    states_cache: StatesCache,
    pooled: Vec<f64>,
}

/// Target-domain item tower: one K-dimensional row per item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemTower {
    embeddings: Matrix,
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ItemTower {
    /// Builds the tower over the given catalog. Ids are deduplicated and
    /// sorted so the row order is deterministic; rows are seeded
    /// truncated-normal (std 0.02).
    pub fn init(item_ids: impl IntoIterator<Item = String>, k_dim: usize, seed: u64) -> Self {
        let mut ids: Vec<String> = item_ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let mut embeddings = Matrix::zeros(ids.len(), k_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fill_trunc_normal(&mut embeddings, &mut rng, 0.02);
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        ItemTower { embeddings, ids, index }
    }

    pub fn from_parts(ids: Vec<String>, embeddings: Matrix) -> Self {
        assert_eq!(ids.len(), embeddings.rows());
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        ItemTower { embeddings, ids, index }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn k_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn id_at(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embedding(&self, idx: usize) -> &[f64] {
        self.embeddings.row(idx)
    }

    /// The item's embedding row; unknown ids are an error.
    pub fn encode_item(&self, item_id: &str) -> Result<&[f64], EncodeError> {
        match self.index_of(item_id) {
            Some(idx) => Ok(self.embeddings.row(idx)),
            None => Err(EncodeError::UnknownItem(item_id.to_string())),
        }
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    /// Zeroed gradient buffer matching the embedding matrix.
    pub fn grad_buffer(&self) -> Matrix {
        Matrix::zeros(self.embeddings.rows(), self.embeddings.cols())
    }
}

/// Dot-product affinity between a user and an item embedding.
pub fn score(user: &[f64], item: &[f64]) -> f64 {
    assert_eq!(user.len(), item.len(), "embedding dimensions differ");
    dot(user, item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSequence;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ffn: 3,
            k_dim: 2,
            n_max: 2,
            vocab_size: 4,
            seed: 9,
        }
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ffn: 16,
            k_dim: 4,
            n_max: 6,
            vocab_size: 20,
            seed: 42,
        }
    }

    fn seq(ids: &[u32], mask: &[u8]) -> TokenSequence {
        TokenSequence { ids: ids.to_vec(), attention_mask: mask.to_vec() }
    }

    #[test]
    fn seeded_encode_is_finite_and_shaped() {
        let cfg = small_cfg();
        let params = UserEncoderParams::init(&cfg);
        let out = params
            .encode(&cfg, &seq(&[4, 5, 6, 2, 0, 0], &[1, 1, 1, 1, 0, 0]))
            .unwrap();
        assert_eq!(out.len(), cfg.k_dim);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn seeded_encode_is_deterministic() {
        let cfg = small_cfg();
        let a = UserEncoderParams::init(&cfg);
        let b = UserEncoderParams::init(&cfg);
        assert_eq!(a, b);
        let s = seq(&[4, 5, 6, 2, 0, 0], &[1, 1, 1, 1, 0, 0]);
        let x = a.encode(&cfg, &s).unwrap();
        let y = b.encode(&cfg, &s).unwrap();
        assert_eq!(x, y); // bit-identical
    }

    #[test]
    fn padding_garbage_does_not_change_output_or_grads() {
        let cfg = small_cfg();
        let params = UserEncoderParams::init(&cfg);
        let clean = seq(&[4, 5, 6, 2, 0, 0], &[1, 1, 1, 1, 0, 0]);
        let dirty = seq(&[4, 5, 6, 2, 19, 13], &[1, 1, 1, 1, 0, 0]);
        let (out_a, cache_a) = params.encode_cached(&cfg, &clean).unwrap();
        let (out_b, cache_b) = params.encode_cached(&cfg, &dirty).unwrap();
        assert_eq!(out_a, out_b);

        let d_out = vec![0.3, -0.7, 0.1, 0.9];
        let mut grads_a = UserEncoderParams::zeros(&cfg);
        let mut grads_b = UserEncoderParams::zeros(&cfg);
        params.encode_backward(&cfg, &cache_a, &d_out, &mut grads_a);
        params.encode_backward(&cfg, &cache_b, &d_out, &mut grads_b);
        assert_eq!(grads_a, grads_b);
    }

    #[test]
    fn all_zero_mask_is_an_error() {
        let cfg = small_cfg();
        let params = UserEncoderParams::init(&cfg);
        let res = params.encode(&cfg, &seq(&[0; 6], &[0; 6]));
        assert!(matches!(res, Err(EncodeError::EmptyMask)));
    }

    #[test]
    fn mean_pooling_matches_explicit_loop() {
        let cfg = small_cfg();
        let params = UserEncoderParams::init(&cfg);
        let s = seq(&[4, 5, 0, 0, 0, 0], &[1, 1, 0, 0, 0, 0]);
        let (_, cache) = params.encode_cached(&cfg, &s).unwrap();
        let mut manual = vec![0.0; cfg.d_model];
        let mut count = 0usize;
        for t in 0..cfg.n_max {
            if s.attention_mask[t] == 1 {
                for (m, &v) in manual.iter_mut().zip(cache.states.row(t)) {
                    *m += v;
                }
                count += 1;
            }
        }
        for m in &mut manual {
            *m /= count as f64;
        }
        for (a, b) in cache.pooled.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_head_zeroes_all_upstream_gradients() {
        let cfg = small_cfg();
        let mut params = UserEncoderParams::init(&cfg);
        params.w_out.fill(0.0);
        let s = seq(&[4, 5, 6, 0, 0, 0], &[1, 1, 1, 0, 0, 0]);
        let (_, cache) = params.encode_cached(&cfg, &s).unwrap();
        let mut grads = UserEncoderParams::zeros(&cfg);
        params.encode_backward(&cfg, &cache, &[1.0, -1.0, 0.5, 2.0], &mut grads);
        for (name, tensor, _) in grads.named_tensors() {
            if name == "out.weight" || name == "out.bias" {
                assert!(tensor.iter().any(|&v| v != 0.0), "{name} should receive gradient");
            } else {
                assert!(tensor.iter().all(|&v| v == 0.0), "{name} should be zero");
            }
        }
    }

    /// Independent scalar re-computation of the whole forward pass on a
    /// 1-layer, 1-head, d=2 model with hand-set parameters.
    #[test]
    fn micro_forward_matches_hand_computation() {
        let cfg = micro_cfg();
        let mut p = UserEncoderParams::zeros(&cfg);
        // embeddings
        p.tok_emb.row_mut(0).copy_from_slice(&[0.3, -0.1]);
        p.tok_emb.row_mut(1).copy_from_slice(&[-0.2, 0.4]);
        p.pos_emb.row_mut(0).copy_from_slice(&[0.05, 0.2]);
        p.pos_emb.row_mut(1).copy_from_slice(&[0.1, -0.3]);
        {
            let l = &mut p.layers[0];
            l.ln1_gain.copy_from_slice(&[1.1, 0.9]);
            l.ln1_bias.copy_from_slice(&[0.01, -0.01]);
            l.wq = Matrix::from_vec(2, 2, vec![0.5, 0.0, 0.0, 0.5]);
            l.bq.copy_from_slice(&[0.01, 0.02]);
            l.wk = Matrix::from_vec(2, 2, vec![0.3, 0.1, 0.0, 0.2]);
            l.wv = Matrix::from_vec(2, 2, vec![0.2, -0.1, 0.1, 0.3]);
            l.bv.copy_from_slice(&[0.03, -0.01]);
            l.wo = Matrix::from_vec(2, 2, vec![1.0, 0.2, 0.0, 1.0]);
            l.bo.copy_from_slice(&[0.005, -0.005]);
            l.ln2_gain.copy_from_slice(&[1.0, 1.0]);
            l.w_ff1 = Matrix::from_vec(2, 3, vec![0.4, -0.2, 0.3, 0.1, 0.5, -0.4]);
            l.b_ff1.copy_from_slice(&[0.01, 0.0, -0.02]);
            l.w_ff2 = Matrix::from_vec(3, 2, vec![0.3, -0.1, 0.2, 0.2, -0.3, 0.4]);
            l.b_ff2.copy_from_slice(&[0.002, 0.003]);
        }
        p.w_out = Matrix::from_vec(2, 2, vec![0.7, -0.3, 0.4, 0.6]);
        p.b_out.copy_from_slice(&[0.05, -0.05]);

        let got = p.encode(&cfg, &seq(&[0, 1], &[1, 1])).unwrap();

        // hand computation, scalar by scalar
        let eps = 1e-12;
        let ln = |a: f64, b: f64, g: [f64; 2], bias: [f64; 2]| {
            let mu = (a + b) / 2.0;
            let var = ((a - mu).powi(2) + (b - mu).powi(2)) / 2.0;
            let inv = 1.0 / (var + eps).sqrt();
            [g[0] * (a - mu) * inv + bias[0], g[1] * (b - mu) * inv + bias[1]]
        };
        let gelu_s = |x: f64| {
            0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh())
        };

        let x0 = [0.3 + 0.05, -0.1 + 0.2];
        let x1 = [-0.2 + 0.1, 0.4 + -0.3];
        let u0 = ln(x0[0], x0[1], [1.1, 0.9], [0.01, -0.01]);
        let u1 = ln(x1[0], x1[1], [1.1, 0.9], [0.01, -0.01]);
        // projections: row-vector times matrix (row-major weights)
        let q0 = [u0[0] * 0.5 + 0.01, u0[1] * 0.5 + 0.02];
        let q1 = [u1[0] * 0.5 + 0.01, u1[1] * 0.5 + 0.02];
        let k0 = [u0[0] * 0.3, u0[0] * 0.1 + u0[1] * 0.2];
        let k1 = [u1[0] * 0.3, u1[0] * 0.1 + u1[1] * 0.2];
        let v0 = [u0[0] * 0.2 + u0[1] * 0.1 + 0.03, -u0[0] * 0.1 + u0[1] * 0.3 - 0.01];
        let v1 = [u1[0] * 0.2 + u1[1] * 0.1 + 0.03, -u1[0] * 0.1 + u1[1] * 0.3 - 0.01];
        let scale = 1.0 / (2.0f64).sqrt();
        let attend = |q: [f64; 2]| {
            let s0 = (q[0] * k0[0] + q[1] * k0[1]) * scale;
            let s1 = (q[0] * k1[0] + q[1] * k1[1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            [p0 * v0[0] + p1 * v1[0], p0 * v0[1] + p1 * v1[1]]
        };
        let c0 = attend(q0);
        let c1 = attend(q1);
        let a0 = [c0[0] * 1.0 + 0.005, c0[0] * 0.2 + c0[1] * 1.0 - 0.005];
        let a1 = [c1[0] * 1.0 + 0.005, c1[0] * 0.2 + c1[1] * 1.0 - 0.005];
        let m0 = [x0[0] + a0[0], x0[1] + a0[1]];
        let m1 = [x1[0] + a1[0], x1[1] + a1[1]];
        let w0 = ln(m0[0], m0[1], [1.0, 1.0], [0.0, 0.0]);
        let w1 = ln(m1[0], m1[1], [1.0, 1.0], [0.0, 0.0]);
        let ffn = |w: [f64; 2]| {
            let f = [
                w[0] * 0.4 + w[1] * 0.1 + 0.01,
                -w[0] * 0.2 + w[1] * 0.5,
                w[0] * 0.3 - w[1] * 0.4 - 0.02,
            ];
            let g = [gelu_s(f[0]), gelu_s(f[1]), gelu_s(f[2])];
            [
                g[0] * 0.3 + g[1] * 0.2 - g[2] * 0.3 + 0.002,
                -g[0] * 0.1 + g[1] * 0.2 + g[2] * 0.4 + 0.003,
            ]
        };
        let f0 = ffn(w0);
        let f1 = ffn(w1);
        let y0 = [m0[0] + f0[0], m0[1] + f0[1]];
        let y1 = [m1[0] + f1[0], m1[1] + f1[1]];
        let pooled = [(y0[0] + y1[0]) / 2.0, (y0[1] + y1[1]) / 2.0];
        let want = [
            pooled[0] * 0.7 + pooled[1] * 0.4 + 0.05,
            -pooled[0] * 0.3 + pooled[1] * 0.6 - 0.05,
        ];

        assert!((got[0] - want[0]).abs() < 1e-10, "got {got:?}, want {want:?}");
        assert!((got[1] - want[1]).abs() < 1e-10, "got {got:?}, want {want:?}");
    }

    #[test]
    fn item_tower_rows_round_trip() {
        let tower = ItemTower::init(["b", "a", "c", "a"].map(str::to_string), 4, 7);
        assert_eq!(tower.len(), 3);
        assert_eq!(tower.id_at(0), "a"); // sorted, deduplicated
        let row = tower.encode_item("b").unwrap();
        assert_eq!(row, tower.embedding(1));
        assert!(matches!(
            tower.encode_item("zzz"),
            Err(EncodeError::UnknownItem(_))
        ));
    }

    #[test]
    fn score_hand_values() {
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]), 1.0);
    }
}
