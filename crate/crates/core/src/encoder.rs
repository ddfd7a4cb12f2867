//! Toy decoder-only encoder: byte-level tokenizer, causal self-attention
//! stack with last-token pooling, instruction formatting, and manual
//! forward/backward passes.
//!
//! The model is deliberately small: a pre-norm transformer over byte tokens,
//! pooled at the appended EOS position and projected to the output embedding
//! dimension. Embeddings are not pre-normalized; the loss applies cosine
//! similarity and handles scale there.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Token id of the end-of-sequence marker appended to every input.
pub const EOS_ID: u32 = 256;
/// Minimum vocabulary: 256 byte values plus EOS.
pub const MIN_VOCAB: usize = 257;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: MIN_VOCAB,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            embedding_dim: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::InvalidConfig(format!(
                "vocab_size must be at least {MIN_VOCAB} (bytes + EOS), got {}",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must be divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::InvalidConfig(
                "max_seq_len must be at least 2".into(),
            ));
        }
        if self.n_layers == 0 || self.model_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_layers, model_dim and embedding_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Feed-forward hidden width (fixed 4x expansion).
    pub fn ff_dim(&self) -> usize {
        4 * self.model_dim
    }
}

/// Token ids terminated by EOS, at most `max_seq_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>, cfg: &EncoderConfig) -> Result<Self> {
        if ids.last() != Some(&EOS_ID) {
            return Err(Error::InvalidInput(
                "token sequence must end with EOS".into(),
            ));
        }
        if ids.len() > cfg.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "token sequence of length {} exceeds max_seq_len {}",
                ids.len(),
                cfg.max_seq_len
            )));
        }
        if ids.iter().any(|&id| id as usize >= cfg.vocab_size) {
            return Err(Error::InvalidInput("token id out of vocabulary".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Instruction template applied to queries. Documents are embedded verbatim
/// and never pass through this function.
pub fn format_query(instruction: &str, query: &str) -> String {
    format!("Instruction: {instruction}\nQuery:{query}")
}

/// Byte-level tokenization: one id per input byte, truncated to leave room
/// for the appended EOS.
pub fn tokenize(text: &str, max_seq_len: usize) -> TokenSequence {
    let mut ids: Vec<u32> = text
        .bytes()
        .take(max_seq_len.saturating_sub(1))
        .map(u32::from)
        .collect();
    ids.push(EOS_ID);
    TokenSequence { ids }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

/// Named parameter tensors of the encoder. The same struct doubles as the
/// container for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub out_proj: Tensor,
}

impl EncoderParams {
    /// Seeded initialization: uniform in ±1/sqrt(fan_in).
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.model_dim;
        let ff = cfg.ff_dim();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale)
                .collect();
            Tensor::new(vec![rows, cols], data).expect("consistent shape")
        };
        let tok_emb = uniform(cfg.vocab_size, d, d);
        let pos_emb = uniform(cfg.max_seq_len, d, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: uniform(d, d, d),
                wk: uniform(d, d, d),
                wv: uniform(d, d, d),
                wo: uniform(d, d, d),
                fc1: uniform(ff, d, d),
                fc2: uniform(d, ff, ff),
            })
            .collect();
        let out_proj = uniform(cfg.embedding_dim, d, d);
        Ok(Self {
            tok_emb,
            pos_emb,
            layers,
            out_proj,
        })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.model_dim;
        let ff = cfg.ff_dim();
        Self {
            tok_emb: Tensor::zeros(vec![cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(vec![cfg.max_seq_len, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    wq: Tensor::zeros(vec![d, d]),
                    wk: Tensor::zeros(vec![d, d]),
                    wv: Tensor::zeros(vec![d, d]),
                    wo: Tensor::zeros(vec![d, d]),
                    fc1: Tensor::zeros(vec![ff, d]),
                    fc2: Tensor::zeros(vec![d, ff]),
                })
                .collect(),
            out_proj: Tensor::zeros(vec![cfg.embedding_dim, d]),
        }
    }

    /// Tensors in fixed manifest order with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.wq"), &layer.wq));
            out.push((format!("layers.{i}.wk"), &layer.wk));
            out.push((format!("layers.{i}.wv"), &layer.wv));
            out.push((format!("layers.{i}.wo"), &layer.wo));
            out.push((format!("layers.{i}.fc1"), &layer.fc1));
            out.push((format!("layers.{i}.fc2"), &layer.fc2));
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    /// Mutable tensors in the same fixed order as [`named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.fc1);
            out.push(&mut layer.fc2);
        }
        out.push(&mut self.out_proj);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuild params from named tensors, verifying the manifest against the
    /// config.
    pub fn from_named(cfg: &EncoderConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params = Self::zeros(cfg);
        let expected: Vec<(String, Vec<usize>)> = params
            .named_tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Manifest(format!(
                "expected {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (((name, tensor), (exp_name, exp_shape)), slot) in tensors
            .into_iter()
            .zip(expected.into_iter())
            .zip(params.tensors_mut())
        {
            if name != exp_name {
                return Err(Error::Manifest(format!(
                    "unexpected tensor {name}, expected {exp_name}"
                )));
            }
            if tensor.shape() != exp_shape.as_slice() {
                return Err(Error::Manifest(format!(
                    "tensor {name}: shape {:?} does not match config shape {:?}",
                    tensor.shape(),
                    exp_shape
                )));
            }
            *slot = tensor;
        }
        Ok(params)
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter tensor {name}")));
            }
        }
        Ok(())
    }
}

/// Hook applied in place to each linear layer's input activations during the
/// forward pass. Arguments are the flattened row-major matrix and its column
/// count. Used to simulate activation quantization; incompatible with traced
/// (differentiable) forward passes.
pub type ActivationHook<'a> = dyn Fn(&mut [f64], usize) + 'a;

// Differentiation-state instrumentation: counts forward traces alive on the
// current thread so tests can assert the peak footprint of a training step.
thread_local! {
    static LIVE_TRACES: Cell<usize> = const { Cell::new(0) };
    static PEAK_TRACES: Cell<usize> = const { Cell::new(0) };
}

/// Reset the peak live-trace counter to the current live count.
pub fn reset_trace_peak() {
    LIVE_TRACES.with(|l| PEAK_TRACES.with(|p| p.set(l.get())));
}

/// Highest number of simultaneously-live forward traces since the last reset.
pub fn trace_peak() -> usize {
    PEAK_TRACES.with(|p| p.get())
}

struct LayerTrace {
    x_in: Vec<f64>,      // T x d residual stream entering the layer
    inv_rms_attn: Vec<f64>,
    normed_attn: Vec<f64>, // T x d, input to wq/wk/wv
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn_w: Vec<f64>, // heads x T x T softmax weights, zero above diagonal
    ctx: Vec<f64>,    // T x d concatenated head outputs, input to wo
    x_mid: Vec<f64>,  // T x d residual stream after attention
    inv_rms_ff: Vec<f64>,
    normed_ff: Vec<f64>, // T x d, input to fc1
    ff_pre: Vec<f64>,    // T x ff, fc1 output before activation
    ff_act: Vec<f64>,    // T x ff, input to fc2
}

/// Cached activations from one forward pass, sufficient to run the backward
/// pass without recomputation.
pub struct ForwardTrace {
    layers: Vec<LayerTrace>,
    x_final: Vec<f64>, // T x d pre-pooling hidden states
    inv_rms_final: f64,
    h_norm: Vec<f64>, // d, input to out_proj
}

impl ForwardTrace {
    fn register() {
        LIVE_TRACES.with(|l| {
            let live = l.get() + 1;
            l.set(live);
            PEAK_TRACES.with(|p| {
                if live > p.get() {
                    p.set(live);
                }
            });
        });
    }

    /// Pre-pooling hidden states, one row of `model_dim` per position.
    pub fn hidden_states(&self) -> &[f64] {
        &self.x_final
    }
}

impl Drop for ForwardTrace {
    fn drop(&mut self) {
        LIVE_TRACES.with(|l| l.set(l.get() - 1));
    }
}

fn matvec(w: &[f64], x: &[f64], out_dim: usize, in_dim: usize, y: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        y[o] = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// dx += W^T dy
fn matvec_t_acc(w: &[f64], dy: &[f64], out_dim: usize, in_dim: usize, dx: &mut [f64]) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let g = dy[o];
        for (dx_i, w_i) in dx.iter_mut().zip(row) {
            *dx_i += g * w_i;
        }
    }
}

/// dw += dy (outer) x
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let in_dim = x.len();
    for (o, &g) in dy.iter().enumerate() {
        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
        for (dw_i, x_i) in row.iter_mut().zip(x) {
            *dw_i += g * x_i;
        }
    }
}

fn rms_norm_row(x: &[f64], out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
    inv
}

/// dx += d(rmsnorm)/dx applied to dy, given the original row and 1/rms.
fn rms_norm_backward_acc(dy: &[f64], x: &[f64], inv: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
    let c = inv * inv * inv / n * dot;
    for ((dx_i, dy_i), x_i) in dx.iter_mut().zip(dy).zip(x) {
        *dx_i += inv * dy_i - c * x_i;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn validate_tokens(cfg: &EncoderConfig, tokens: &TokenSequence) -> Result<()> {
    if tokens.ids.is_empty()
        || tokens.ids.last() != Some(&EOS_ID)
        || tokens.ids.len() > cfg.max_seq_len
        || tokens.ids.iter().any(|&id| id as usize >= cfg.vocab_size)
    {
        return Err(Error::InvalidInput("invalid token sequence".into()));
    }
    Ok(())
}

fn forward_inner(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
    hook: Option<&ActivationHook>,
    want_trace: bool,
) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
    if want_trace && hook.is_some() {
        return Err(Error::InvalidInput(
            "activation hooks cannot be combined with a traced forward pass".into(),
        ));
    }
    params.validate_finite()?;
    validate_tokens(cfg, tokens)?;

    let t_len = tokens.ids.len();
    let d = cfg.model_dim;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let ff = cfg.ff_dim();
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();

    // Embedding lookup plus learned positions.
    let mut x = vec![0.0; t_len * d];
    for (t, &id) in tokens.ids.iter().enumerate() {
        let e = params.tok_emb.row(id as usize);
        let p = params.pos_emb.row(t);
        for i in 0..d {
            x[t * d + i] = e[i] + p[i];
        }
    }

    let mut layer_traces = Vec::new();
    for layer in &params.layers {
        let x_in = x.clone();

        let mut normed = vec![0.0; t_len * d];
        let mut inv_rms_attn = vec![0.0; t_len];
        for t in 0..t_len {
            inv_rms_attn[t] = rms_norm_row(&x_in[t * d..(t + 1) * d], &mut normed[t * d..(t + 1) * d]);
        }
        if let Some(h) = hook {
            h(&mut normed, d);
        }

        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        for t in 0..t_len {
            let a = &normed[t * d..(t + 1) * d];
            matvec(layer.wq.data(), a, d, d, &mut q[t * d..(t + 1) * d]);
            matvec(layer.wk.data(), a, d, d, &mut k[t * d..(t + 1) * d]);
            matvec(layer.wv.data(), a, d, d, &mut v[t * d..(t + 1) * d]);
        }

        // Causal attention: position t attends to positions 0..=t only.
        let mut attn_w = vec![0.0; heads * t_len * t_len];
        let mut ctx = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let qt = &q[t * d + off..t * d + off + hd];
                let mut max_s = f64::NEG_INFINITY;
                for (j, score) in scores.iter_mut().enumerate().take(t + 1) {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let s = qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt_hd;
                    *score = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = 0.0;
                for score in scores.iter_mut().take(t + 1) {
                    *score = (*score - max_s).exp();
                    denom += *score;
                }
                let w_row = &mut attn_w[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let c = &mut ctx[t * d + off..t * d + off + hd];
                for j in 0..=t {
                    let w = scores[j] / denom;
                    w_row[j] = w;
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (ci, vi) in c.iter_mut().zip(vj) {
                        *ci += w * vi;
                    }
                }
            }
        }
        if let Some(h) = hook {
            h(&mut ctx, d);
        }

        let mut x_mid = x_in.clone();
        let mut attn_out = vec![0.0; d];
        for t in 0..t_len {
            matvec(layer.wo.data(), &ctx[t * d..(t + 1) * d], d, d, &mut attn_out);
            for i in 0..d {
                x_mid[t * d + i] += attn_out[i];
            }
        }

        let mut normed_ff = vec![0.0; t_len * d];
        let mut inv_rms_ff = vec![0.0; t_len];
        for t in 0..t_len {
            inv_rms_ff[t] =
                rms_norm_row(&x_mid[t * d..(t + 1) * d], &mut normed_ff[t * d..(t + 1) * d]);
        }
        if let Some(h) = hook {
            h(&mut normed_ff, d);
        }

        let mut ff_pre = vec![0.0; t_len * ff];
        let mut ff_act = vec![0.0; t_len * ff];
        for t in 0..t_len {
            matvec(
                layer.fc1.data(),
                &normed_ff[t * d..(t + 1) * d],
                ff,
                d,
                &mut ff_pre[t * ff..(t + 1) * ff],
            );
            for i in 0..ff {
                ff_act[t * ff + i] = silu(ff_pre[t * ff + i]);
            }
        }
        if let Some(h) = hook {
            h(&mut ff_act, ff);
        }

        let mut x_out = x_mid.clone();
        let mut ff_out = vec![0.0; d];
        for t in 0..t_len {
            matvec(layer.fc2.data(), &ff_act[t * ff..(t + 1) * ff], d, ff, &mut ff_out);
            for i in 0..d {
                x_out[t * d + i] += ff_out[i];
            }
        }

        if want_trace {
            layer_traces.push(LayerTrace {
                x_in,
                inv_rms_attn,
                normed_attn: normed,
                q,
                k,
                v,
                attn_w,
                ctx,
                x_mid,
                inv_rms_ff,
                normed_ff,
                ff_pre,
                ff_act,
            });
        }
        x = x_out;
    }

    // Last-token pooling: final hidden state at the EOS position, normalized
    // and projected to the output dimension.
    let eos = t_len - 1;
    let mut h_norm = vec![0.0; d];
    let inv_rms_final = rms_norm_row(&x[eos * d..(eos + 1) * d], &mut h_norm);
    if let Some(h) = hook {
        h(&mut h_norm, d);
    }
    let mut emb = vec![0.0; cfg.embedding_dim];
    matvec(params.out_proj.data(), &h_norm, cfg.embedding_dim, d, &mut emb);

    let trace = if want_trace {
        ForwardTrace::register();
        Some(ForwardTrace {
            layers: layer_traces,
            x_final: x,
            inv_rms_final,
            h_norm,
        })
    } else {
        None
    };
    Ok((emb, trace))
}

/// Embed a token sequence: the final hidden state at the EOS position,
/// projected to `embedding_dim`.
pub fn encode(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
) -> Result<Vec<f64>> {
    forward_inner(params, cfg, tokens, None, false).map(|(emb, _)| emb)
}

/// Embed with an activation hook applied at each linear layer's input.
pub fn encode_with_hook(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
    hook: &ActivationHook,
) -> Result<Vec<f64>> {
    forward_inner(params, cfg, tokens, Some(hook), false).map(|(emb, _)| emb)
}

/// Forward pass retaining the activations needed for [`backward_from_trace`].
pub fn encode_with_trace(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
) -> Result<(Vec<f64>, ForwardTrace)> {
    let (emb, trace) = forward_inner(params, cfg, tokens, None, true)?;
    Ok((emb, trace.expect("trace requested")))
}

/// Pre-pooling hidden states (one `model_dim` row per position).
pub fn hidden_states(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
) -> Result<Vec<f64>> {
    let (_, trace) = encode_with_trace(params, cfg, tokens)?;
    Ok(trace.x_final.clone())
}

/// Accumulate parameter gradients for one sequence given the upstream
/// gradient with respect to its embedding.
pub fn backward_from_trace(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
    trace: &ForwardTrace,
    d_emb: &[f64],
    grads: &mut EncoderParams,
) -> Result<()> {
    if d_emb.len() != cfg.embedding_dim {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has length {}, expected embedding_dim {}",
            d_emb.len(),
            cfg.embedding_dim
        )));
    }
    let t_len = tokens.ids.len();
    let d = cfg.model_dim;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let ff = cfg.ff_dim();
    let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
    let eos = t_len - 1;

    // Pooling and projection.
    outer_acc(grads.out_proj.data_mut(), d_emb, &trace.h_norm);
    let mut d_h = vec![0.0; d];
    matvec_t_acc(params.out_proj.data(), d_emb, cfg.embedding_dim, d, &mut d_h);

    let mut d_x = vec![0.0; t_len * d];
    rms_norm_backward_acc(
        &d_h,
        &trace.x_final[eos * d..(eos + 1) * d],
        trace.inv_rms_final,
        &mut d_x[eos * d..(eos + 1) * d],
    );

    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lt = &trace.layers[li];
        let gl = &mut grads.layers[li];

        // Feed-forward block; d_x holds the gradient at the layer output.
        let mut d_ff_act = vec![0.0; ff];
        let mut d_ff_pre = vec![0.0; ff];
        let mut d_b = vec![0.0; d];
        let mut d_x_mid = d_x.clone(); // residual branch
        for t in 0..t_len {
            let dy = &d_x[t * d..(t + 1) * d];
            d_ff_act.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(layer.fc2.data(), dy, d, ff, &mut d_ff_act);
            outer_acc(gl.fc2.data_mut(), dy, &lt.ff_act[t * ff..(t + 1) * ff]);
            for i in 0..ff {
                d_ff_pre[i] = d_ff_act[i] * silu_grad(lt.ff_pre[t * ff + i]);
            }
            d_b.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(layer.fc1.data(), &d_ff_pre, ff, d, &mut d_b);
            outer_acc(gl.fc1.data_mut(), &d_ff_pre, &lt.normed_ff[t * d..(t + 1) * d]);
            rms_norm_backward_acc(
                &d_b,
                &lt.x_mid[t * d..(t + 1) * d],
                lt.inv_rms_ff[t],
                &mut d_x_mid[t * d..(t + 1) * d],
            );
        }

        // Attention block; d_x_mid holds the gradient at the attention output.
        let mut d_ctx = vec![0.0; t_len * d];
        for t in 0..t_len {
            let dy = &d_x_mid[t * d..(t + 1) * d];
            matvec_t_acc(layer.wo.data(), dy, d, d, &mut d_ctx[t * d..(t + 1) * d]);
            outer_acc(gl.wo.data_mut(), dy, &lt.ctx[t * d..(t + 1) * d]);
        }

        let mut d_q = vec![0.0; t_len * d];
        let mut d_k = vec![0.0; t_len * d];
        let mut d_v = vec![0.0; t_len * d];
        let mut d_w = vec![0.0; t_len];
        for h in 0..heads {
            let off = h * hd;
            for t in 0..t_len {
                let w_row = &lt.attn_w[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let dc = &d_ctx[t * d + off..t * d + off + hd];
                let mut wdot = 0.0;
                for j in 0..=t {
                    let vj = &lt.v[j * d + off..j * d + off + hd];
                    let g = dc.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    d_w[j] = g;
                    wdot += w_row[j] * g;
                    let dvj = &mut d_v[j * d + off..j * d + off + hd];
                    for (dv_i, dc_i) in dvj.iter_mut().zip(dc) {
                        *dv_i += w_row[j] * dc_i;
                    }
                }
                let qt = &lt.q[t * d + off..t * d + off + hd];
                let dqt = &mut d_q[t * d + off..t * d + off + hd];
                for j in 0..=t {
                    let d_score = w_row[j] * (d_w[j] - wdot) * inv_sqrt_hd;
                    let kj = &lt.k[j * d + off..j * d + off + hd];
                    for (dq_i, k_i) in dqt.iter_mut().zip(kj) {
                        *dq_i += d_score * k_i;
                    }
                    let dkj = &mut d_k[j * d + off..j * d + off + hd];
                    for (dk_i, q_i) in dkj.iter_mut().zip(qt) {
                        *dk_i += d_score * q_i;
                    }
                }
            }
        }

        let mut d_a = vec![0.0; d];
        let mut d_x_in = d_x_mid;
        for t in 0..t_len {
            d_a.iter_mut().for_each(|v| *v = 0.0);
            let a = &lt.normed_attn[t * d..(t + 1) * d];
            matvec_t_acc(layer.wq.data(), &d_q[t * d..(t + 1) * d], d, d, &mut d_a);
            matvec_t_acc(layer.wk.data(), &d_k[t * d..(t + 1) * d], d, d, &mut d_a);
            matvec_t_acc(layer.wv.data(), &d_v[t * d..(t + 1) * d], d, d, &mut d_a);
            outer_acc(gl.wq.data_mut(), &d_q[t * d..(t + 1) * d], a);
            outer_acc(gl.wk.data_mut(), &d_k[t * d..(t + 1) * d], a);
            outer_acc(gl.wv.data_mut(), &d_v[t * d..(t + 1) * d], a);
            rms_norm_backward_acc(
                &d_a,
                &lt.x_in[t * d..(t + 1) * d],
                lt.inv_rms_attn[t],
                &mut d_x_in[t * d..(t + 1) * d],
            );
        }
        d_x = d_x_in;
    }

    // Embedding tables.
    for (t, &id) in tokens.ids.iter().enumerate() {
        let dt = &d_x[t * d..(t + 1) * d];
        let e = grads.tok_emb.row_mut(id as usize);
        for (e_i, d_i) in e.iter_mut().zip(dt) {
            *e_i += d_i;
        }
        let p = grads.pos_emb.row_mut(t);
        for (p_i, d_i) in p.iter_mut().zip(dt) {
            *p_i += d_i;
        }
    }
    Ok(())
}

/// Reverse-mode differentiation of [`encode`]: parameter gradients for one
/// sequence given the upstream gradient with respect to the embedding.
pub fn encode_backward(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    tokens: &TokenSequence,
    d_emb: &[f64],
) -> Result<EncoderParams> {
    let (_, trace) = encode_with_trace(params, cfg, tokens)?;
    let mut grads = EncoderParams::zeros(cfg);
    backward_from_trace(params, cfg, tokens, &trace, d_emb, &mut grads)?;
    Ok(grads)
}

/// Instruction-aware embedding interface: queries are formatted through the
/// instruction template, documents are embedded verbatim.
pub trait TextEmbedder {
    fn embed_query(&self, instruction: &str, query: &str) -> Result<Vec<f64>>;
    fn embed_document(&self, text: &str) -> Result<Vec<f64>>;
}

/// [`TextEmbedder`] backed by encoder parameters, optionally with an
/// activation hook (used to simulate quantized inference).
pub struct EncoderEmbedder<'a> {
    pub params: &'a EncoderParams,
    pub config: &'a EncoderConfig,
    pub hook: Option<Box<dyn Fn(&mut [f64], usize) + 'a>>,
}

impl<'a> EncoderEmbedder<'a> {
    pub fn new(params: &'a EncoderParams, config: &'a EncoderConfig) -> Self {
        Self {
            params,
            config,
            hook: None,
        }
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text, self.config.max_seq_len);
        match &self.hook {
            Some(h) => encode_with_hook(self.params, self.config, &tokens, h),
            None => encode(self.params, self.config, &tokens),
        }
    }
}

impl TextEmbedder for EncoderEmbedder<'_> {
    fn embed_query(&self, instruction: &str, query: &str) -> Result<Vec<f64>> {
        self.encode_text(&format_query(instruction, query))
    }

    fn embed_document(&self, text: &str) -> Result<Vec<f64>> {
        self.encode_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 257,
            model_dim: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 12,
            embedding_dim: 4,
        }
    }

    #[test]
    fn format_query_matches_template() {
        let out = format_query(
            "Given a web search query, retrieve relevant passages that answer the query",
            "Explain the definition of gravity",
        );
        assert_eq!(
            out,
            "Instruction: Given a web search query, retrieve relevant passages that answer the query\nQuery:Explain the definition of gravity"
        );
        assert_eq!(format_query("", "x"), "Instruction: \nQuery:x");
    }

    #[test]
    fn documents_are_embedded_verbatim() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 1).unwrap();
        let embedder = EncoderEmbedder::new(&params, &cfg);
        let doc = "gravity is a force";
        let direct = encode(&params, &cfg, &tokenize(doc, cfg.max_seq_len)).unwrap();
        assert_eq!(embedder.embed_document(doc).unwrap(), direct);
        assert_ne!(embedder.embed_query("", doc).unwrap(), direct);
    }

    #[test]
    fn tokenize_basics() {
        let cfg = tiny_config();
        assert_eq!(tokenize("", cfg.max_seq_len).ids(), &[EOS_ID]);
        assert_eq!(
            tokenize("abc", cfg.max_seq_len).ids(),
            &[97, 98, 99, EOS_ID]
        );
        assert_eq!(
            tokenize("abc", cfg.max_seq_len),
            tokenize("abc", cfg.max_seq_len)
        );
        let long = "x".repeat(100);
        let tokens = tokenize(&long, cfg.max_seq_len);
        assert_eq!(tokens.len(), cfg.max_seq_len);
        assert_eq!(*tokens.ids().last().unwrap(), EOS_ID);
    }

    #[test]
    fn encode_single_eos_token_is_finite() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 42).unwrap();
        let emb = encode(&params, &cfg, &tokenize("", cfg.max_seq_len)).unwrap();
        assert_eq!(emb.len(), cfg.embedding_dim);
        assert!(emb.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 42).unwrap();
        let tokens = tokenize("hello world", cfg.max_seq_len);
        let a = encode(&params, &cfg, &tokens).unwrap();
        let b = encode(&params, &cfg, &tokens).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn causal_prefix_invariance() {
        // Hidden states at positions <= t are bit-identical when trailing
        // tokens are removed: each position only attends to its predecessors.
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 7).unwrap();
        let full = TokenSequence::from_ids(vec![104, 105, 106, 107, EOS_ID], &cfg).unwrap();
        let prefix = TokenSequence::from_ids(vec![104, 105, 106, EOS_ID], &cfg).unwrap();
        // The prefix shares positions 0..3 with the full sequence (EOS sits
        // at position 3 in the prefix where the full sequence has 107, so
        // compare the first three positions only).
        let h_full = hidden_states(&params, &cfg, &full).unwrap();
        let h_prefix = hidden_states(&params, &cfg, &prefix).unwrap();
        let d = cfg.model_dim;
        assert_eq!(&h_full[..3 * d], &h_prefix[..3 * d]);
    }

    #[test]
    fn shared_prefix_texts_differ() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 9).unwrap();
        let a = encode(&params, &cfg, &tokenize("prefix one", cfg.max_seq_len)).unwrap();
        let b = encode(&params, &cfg, &tokenize("prefix two", cfg.max_seq_len)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let cfg = tiny_config();
        let mut params = EncoderParams::init(&cfg, 1).unwrap();
        params.layers[0].wq.data_mut()[3] = f64::NAN;
        let err = encode(&params, &cfg, &tokenize("x", cfg.max_seq_len));
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 5).unwrap();
        let tokens = tokenize("abc", cfg.max_seq_len);
        let grads = encode_backward(&params, &cfg, &tokens, &vec![0.0; cfg.embedding_dim]).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_the_upstream_gradient() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 5).unwrap();
        let tokens = tokenize("linear", cfg.max_seq_len);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let u: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.gen::<f64>()).collect();
        let v: Vec<f64> = (0..cfg.embedding_dim).map(|_| rng.gen::<f64>()).collect();
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();

        let gu = encode_backward(&params, &cfg, &tokens, &u).unwrap();
        let gv = encode_backward(&params, &cfg, &tokens, &v).unwrap();
        let gs = encode_backward(&params, &cfg, &tokens, &sum).unwrap();
        for ((tu, tv), ts) in gu.tensors().iter().zip(gv.tensors()).zip(gs.tensors()) {
            for ((&a, &b), &s) in tu.data().iter().zip(tv.data()).zip(ts.data()) {
                assert!((a + b - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    /// Finite-difference check of d(dot(encode(tokens), u))/d(theta) over
    /// every parameter of every tensor (embedding rows restricted to used
    /// token ids; unused rows have exactly zero gradient).
    pub(crate) fn finite_difference_max_rel_err(
        params: &EncoderParams,
        cfg: &EncoderConfig,
        tokens: &TokenSequence,
        u: &[f64],
        h: f64,
    ) -> f64 {
        let scalar = |p: &EncoderParams| -> f64 {
            let emb = encode(p, cfg, tokens).unwrap();
            emb.iter().zip(u).map(|(a, b)| a * b).sum()
        };
        let grads = {
            let (emb, trace) = encode_with_trace(params, cfg, tokens).unwrap();
            let _ = emb;
            let mut g = EncoderParams::zeros(cfg);
            backward_from_trace(params, cfg, tokens, &trace, u, &mut g).unwrap();
            g
        };

        let used: std::collections::HashSet<usize> =
            tokens.ids().iter().map(|&id| id as usize).collect();
        let mut max_rel = 0.0f64;
        let n_tensors = params.tensors().len();
        for ti in 0..n_tensors {
            let rows = params.tensors()[ti].rows();
            let cols = params.tensors()[ti].cols();
            for r in 0..rows {
                // Token-embedding rows of unused ids never enter the forward
                // pass; their analytic gradient is exactly zero.
                if ti == 0 && !used.contains(&r) {
                    assert!(grads.tensors()[ti].row(r).iter().all(|&g| g == 0.0));
                    continue;
                }
                if ti == 1 && r >= tokens.len() {
                    assert!(grads.tensors()[ti].row(r).iter().all(|&g| g == 0.0));
                    continue;
                }
                for c in 0..cols {
                    let idx = r * cols + c;
                    let mut probe = params.clone();
                    probe.tensors_mut()[ti].data_mut()[idx] += h;
                    let up = scalar(&probe);
                    probe.tensors_mut()[ti].data_mut()[idx] -= 2.0 * h;
                    let down = scalar(&probe);
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.tensors()[ti].data()[idx];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
                    max_rel = max_rel.max(rel);
                }
            }
        }
        max_rel
    }

    #[test]
    fn backward_matches_finite_differences_on_every_tensor() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 11).unwrap();
        let tokens = tokenize("gradcheck", cfg.max_seq_len);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let u: Vec<f64> = (0..cfg.embedding_dim)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let max_rel = finite_difference_max_rel_err(&params, &cfg, &tokens, &u, 1e-5);
        assert!(max_rel <= 1e-5, "finite-difference mismatch: {max_rel}");
    }

    #[test]
    fn upstream_gradient_shape_is_checked() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 1).unwrap();
        let tokens = tokenize("x", cfg.max_seq_len);
        let err = encode_backward(&params, &cfg, &tokens, &[1.0, 2.0]);
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.vocab_size = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.max_seq_len = 1;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn params_named_round_trip() {
        let cfg = tiny_config();
        let params = EncoderParams::init(&cfg, 6).unwrap();
        let named: Vec<(String, Tensor)> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let rebuilt = EncoderParams::from_named(&cfg, named).unwrap();
        assert_eq!(rebuilt, params);
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let cfg = tiny_config();
        assert_eq!(
            EncoderParams::init(&cfg, 3).unwrap(),
            EncoderParams::init(&cfg, 3).unwrap()
        );
        assert_ne!(
            EncoderParams::init(&cfg, 3).unwrap(),
            EncoderParams::init(&cfg, 4).unwrap()
        );
    }
}
