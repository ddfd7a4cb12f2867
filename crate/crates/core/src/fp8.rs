//! Software-simulated FP8 (e4m3) quantization of checkpoints, per-tensor and
//! per-block, plus an accuracy-impact report.
//!
//! The format is e4m3: 1 sign, 4 exponent, 3 mantissa bits, exponent bias 7,
//! no infinities, a single NaN pattern per sign (0x7f / 0xff), maximum finite
//! magnitude 448. Quantization is simulation-only: values are encoded with
//! round-to-nearest-even and immediately decoded back to f64; no FP8
//! arithmetic is performed.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{EncoderEmbedder, EncoderParams, TextEmbedder};
use crate::error::{Error, Result};
use crate::eval::{classification_eval, retrieval_eval, EvalBundle};
use crate::loss::cosine_similarity;
use crate::tensor::Tensor;

/// Largest finite e4m3 magnitude (exponent 15, mantissa 110).
pub const E4M3_MAX: f64 = 448.0;
/// Weight blocks are 128 x 128.
pub const WEIGHT_BLOCK: (usize, usize) = (128, 128);
/// Activation blocks are 1 x 128 (per-row dynamic scales).
pub const ACTIVATION_BLOCK: (usize, usize) = (1, 128);

const NAN_CODE: u8 = 0x7f;
const MAX_CODE: u8 = 0x7e;

/// Decode one of the 256 e4m3 code points. Exact: every finite code has an
/// exact f64 value.
pub fn e4m3_decode(code: u8) -> f64 {
    let exp = (code >> 3) & 0x0f;
    let mant = code & 0x07;
    let magnitude = if exp == 15 && mant == 7 {
        return if code & 0x80 != 0 { -f64::NAN } else { f64::NAN };
    } else if exp == 0 {
        // subnormal: mant * 2^-9
        mant as f64 * (-9f64).exp2()
    } else {
        // normal: (8 + mant) * 2^(exp - 10)
        (8 + mant) as f64 * ((exp as f64) - 10.0).exp2()
    };
    if code & 0x80 != 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Encode an f64 into the nearest e4m3 code, round-to-nearest-even on ties,
/// saturating beyond the maximum finite magnitude. NaN maps to the NaN code.
pub fn e4m3_encode(v: f64) -> u8 {
    if v.is_nan() {
        return NAN_CODE;
    }
    let sign = if v.is_sign_negative() { 0x80u8 } else { 0 };
    let a = v.abs();
    if a == 0.0 {
        return sign;
    }
    if a > E4M3_MAX {
        return sign | MAX_CODE;
    }
    if a < 0.015625 {
        // subnormal range: lattice step 2^-9; scaling by a power of two is
        // exact, so rounding the scaled value is exact RNE.
        let n = (a * 512.0).round_ties_even() as u8;
        return if n >= 8 { sign | 0x08 } else { sign | n };
    }
    // Normal range: exact exponent from the f64 bits, then RNE on the
    // 4-bit significand (the division by 2^(e-3) is exact).
    let e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let n = (a / ((e - 3) as f64).exp2()).round_ties_even();
    let (e, n) = if n >= 16.0 { (e + 1, 8u8) } else { (e, n as u8) };
    let exp_bits = (e + 7) as u8;
    let mant = n - 8;
    if exp_bits == 15 && mant == 7 {
        return sign | MAX_CODE;
    }
    sign | (exp_bits << 3) | mant
}

/// Scale layout of a quantized tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    PerTensor {
        scale: f64,
    },
    PerBlock {
        block_rows: usize,
        block_cols: usize,
        grid_rows: usize,
        grid_cols: usize,
        /// Row-major over the block grid, one positive scale per block.
        scales: Vec<f64>,
    },
}

/// FP8 codes plus scale(s) and the original shape.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub codes: Vec<u8>,
    pub layout: Layout,
    pub shape: Vec<usize>,
}

fn amax_scale(values: &[f64]) -> f64 {
    let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if amax == 0.0 {
        1.0
    } else {
        amax / E4M3_MAX
    }
}

/// Quantize with a single scale `amax(|t|) / 448` (1 when the tensor is all
/// zeros).
pub fn quantize_per_tensor(t: &Tensor) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor passed to quantize_per_tensor".into()));
    }
    let scale = amax_scale(t.data());
    let codes = t.data().iter().map(|&v| e4m3_encode(v / scale)).collect();
    Ok(QuantizedTensor {
        codes,
        layout: Layout::PerTensor { scale },
        shape: t.shape().to_vec(),
    })
}

/// Quantize a matrix in independent blocks, each with its own scale. Ragged
/// edge blocks are permitted and get their own scales.
pub fn quantize_per_block(t: &Tensor, block: (usize, usize)) -> Result<QuantizedTensor> {
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor passed to quantize_per_block".into()));
    }
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "per-block quantization requires a matrix, got shape {:?}",
            t.shape()
        )));
    }
    let (block_rows, block_cols) = block;
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::InvalidConfig("block dimensions must be positive".into()));
    }
    let (rows, cols) = (t.rows(), t.cols());
    let grid_rows = rows.div_ceil(block_rows);
    let grid_cols = cols.div_ceil(block_cols);

    let mut scales = Vec::with_capacity(grid_rows * grid_cols);
    for br in 0..grid_rows {
        for bc in 0..grid_cols {
            let mut amax = 0.0f64;
            for r in br * block_rows..((br + 1) * block_rows).min(rows) {
                for c in bc * block_cols..((bc + 1) * block_cols).min(cols) {
                    amax = amax.max(t.data()[r * cols + c].abs());
                }
            }
            scales.push(if amax == 0.0 { 1.0 } else { amax / E4M3_MAX });
        }
    }
    let mut codes = vec![0u8; t.len()];
    for r in 0..rows {
        for c in 0..cols {
            let scale = scales[(r / block_rows) * grid_cols + c / block_cols];
            codes[r * cols + c] = e4m3_encode(t.data()[r * cols + c] / scale);
        }
    }
    Ok(QuantizedTensor {
        codes,
        layout: Layout::PerBlock {
            block_rows,
            block_cols,
            grid_rows,
            grid_cols,
            scales,
        },
        shape: t.shape().to_vec(),
    })
}

/// Decode codes and multiply by their scales; the original shape is
/// restored. A NaN code is reported with its index.
pub fn dequantize(qt: &QuantizedTensor) -> Result<Tensor> {
    let mut data = Vec::with_capacity(qt.codes.len());
    match &qt.layout {
        Layout::PerTensor { scale } => {
            for (index, &code) in qt.codes.iter().enumerate() {
                let v = e4m3_decode(code);
                if v.is_nan() {
                    return Err(Error::NanCode { index });
                }
                data.push(v * scale);
            }
        }
        Layout::PerBlock {
            block_rows,
            block_cols,
            grid_cols,
            scales,
            ..
        } => {
            if qt.shape.len() != 2 {
                return Err(Error::ShapeMismatch(
                    "per-block quantized tensor must be a matrix".into(),
                ));
            }
            let cols = qt.shape[1];
            for (index, &code) in qt.codes.iter().enumerate() {
                let v = e4m3_decode(code);
                if v.is_nan() {
                    return Err(Error::NanCode { index });
                }
                let (r, c) = (index / cols, index % cols);
                let scale = scales[(r / block_rows) * grid_cols + c / block_cols];
                data.push(v * scale);
            }
        }
    }
    Tensor::new(qt.shape.clone(), data)
}

/// Quantization modes of the accuracy report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Unquantized baseline.
    Reference,
    /// Per-tensor weight scales; activations dynamically scaled per tensor.
    PerTensor,
    /// 128x128 weight blocks; activations dynamically scaled in 1x128 blocks.
    PerBlock,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Reference => "reference",
            QuantMode::PerTensor => "per_tensor",
            QuantMode::PerBlock => "per_block",
        }
    }
}

/// Round-trip one weight tensor through the FP8 lattice.
fn round_trip_weights(t: &Tensor, mode: QuantMode) -> Result<Tensor> {
    match mode {
        QuantMode::Reference => Ok(t.clone()),
        QuantMode::PerTensor => dequantize(&quantize_per_tensor(t)?),
        QuantMode::PerBlock => dequantize(&quantize_per_block(t, WEIGHT_BLOCK)?),
    }
}

/// Round-trip every parameter tensor through the FP8 lattice.
pub fn quantize_params(
    params: &EncoderParams,
    config: &crate::encoder::EncoderConfig,
    mode: QuantMode,
) -> Result<EncoderParams> {
    let tensors = params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Ok((name, round_trip_weights(t, mode)?)))
        .collect::<Result<Vec<_>>>()?;
    EncoderParams::from_named(config, tensors)
}

/// In-place activation quantization for one row-major matrix, following the
/// mode's activation rule.
pub fn apply_activation_quant(data: &mut [f64], cols: usize, mode: QuantMode) {
    let quant_slice = |slice: &mut [f64]| {
        let scale = amax_scale(slice);
        for v in slice.iter_mut() {
            *v = e4m3_decode(e4m3_encode(*v / scale)) * scale;
        }
    };
    match mode {
        QuantMode::Reference => {}
        QuantMode::PerTensor => quant_slice(data),
        QuantMode::PerBlock => {
            let (block_cols,) = (ACTIVATION_BLOCK.1,);
            for row in data.chunks_mut(cols) {
                for chunk in row.chunks_mut(block_cols) {
                    quant_slice(chunk);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Fp8TaskDelta {
    pub task: String,
    pub reference: f64,
    pub quantized: f64,
    pub delta: f64,
}

/// Accuracy impact of one quantization mode against the unquantized
/// reference, per task and on average, plus the mean cosine between
/// reference and quantized query embeddings.
#[derive(Debug, Clone, Serialize)]
pub struct Fp8AccuracyReport {
    pub mode: String,
    pub per_task: Vec<Fp8TaskDelta>,
    pub mean_delta: f64,
    pub mean_embedding_cosine: f64,
}

fn eval_metrics(
    embedder: &dyn TextEmbedder,
    bundle: &EvalBundle,
    k_list: &[usize],
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let retrieval = retrieval_eval(embedder, &bundle.retrieval, k_list)?;
    for (k, v) in &retrieval.recall_at {
        out.push((format!("recall@{k}"), *v));
    }
    out.push(("ndcg@10".to_string(), retrieval.ndcg_at_10));
    if let Some(task) = &bundle.classification {
        let cls = classification_eval(embedder, task)?;
        out.push(("classification_accuracy".to_string(), cls.accuracy));
    }
    Ok(out)
}

/// Evaluate the model with reference weights and with weights (and
/// activations) round-tripped through the requested FP8 mode.
pub fn accuracy_report(
    ckpt: &Checkpoint,
    bundle: &EvalBundle,
    mode: QuantMode,
    k_list: &[usize],
) -> Result<Fp8AccuracyReport> {
    let params = ckpt.to_params()?;
    let reference = EncoderEmbedder::new(&params, &ckpt.config);
    let ref_metrics = eval_metrics(&reference, bundle, k_list)?;

    let q_params = quantize_params(&params, &ckpt.config, mode)?;
    let quantized = EncoderEmbedder {
        params: &q_params,
        config: &ckpt.config,
        hook: match mode {
            QuantMode::Reference => None,
            m => Some(Box::new(move |data: &mut [f64], cols: usize| {
                apply_activation_quant(data, cols, m)
            })),
        },
    };
    let q_metrics = eval_metrics(&quantized, bundle, k_list)?;

    let per_task: Vec<Fp8TaskDelta> = ref_metrics
        .iter()
        .zip(&q_metrics)
        .map(|((task, r), (_, q))| Fp8TaskDelta {
            task: task.clone(),
            reference: *r,
            quantized: *q,
            delta: q - r,
        })
        .collect();
    let mean_delta = per_task.iter().map(|t| t.delta).sum::<f64>() / per_task.len() as f64;

    let mut cos_sum = 0.0;
    for query in &bundle.retrieval.queries {
        let a = reference.embed_query(&query.instruction, &query.text)?;
        let b = quantized.embed_query(&query.instruction, &query.text)?;
        cos_sum += cosine_similarity(&a, &b)?;
    }
    let mean_embedding_cosine = cos_sum / bundle.retrieval.queries.len() as f64;

    Ok(Fp8AccuracyReport {
        mode: mode.as_str().to_string(),
        per_task,
        mean_delta,
        mean_embedding_cosine,
    })
}
