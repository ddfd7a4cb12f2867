//! Gradient-cached two-pass training step.
//!
//! One training step over a batch splits its encode jobs (queries, positives,
//! negatives) into chunks. Phase 1 encodes every chunk without keeping any
//! differentiation state, collecting only the embeddings. Phase 2 runs the
//! loss backward over the full embedding set. Phase 3 re-encodes each chunk
//! with a trace, injects the cached embedding gradients, and accumulates
//! parameter gradients in chunk order. The result equals the monolithic
//! full-batch gradient, but at any moment only one chunk's activations are
//! alive, so the effective batch size is bounded by embedding storage rather
//! than activation storage.

use std::ops::Range;

use crate::corpus::Batch;
use crate::encoder::{
    self, backward_from_trace, encode, encode_with_trace, EncoderConfig, EncoderParams,
    TokenSequence,
};
use crate::error::{Error, Result};
use crate::loss::{cam_infonce_grad, LossConfig, MaskMatrices};

/// Ordered chunk boundaries over a batch's encode-job list.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    chunk_size: usize,
    total_jobs: usize,
}

impl ChunkPlan {
    pub fn new(chunk_size: usize, total_jobs: usize) -> Result<Self> {
        if chunk_size == 0 {
            return Err(Error::ChunkPlan("chunk_size must be positive".into()));
        }
        Ok(Self {
            chunk_size,
            total_jobs,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn total_jobs(&self) -> usize {
        self.total_jobs
    }

    /// Consecutive index ranges partitioning `0..total_jobs`.
    pub fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.total_jobs)
            .step_by(self.chunk_size)
            .map(move |start| start..(start + self.chunk_size).min(self.total_jobs))
    }
}

#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub per_query: Vec<f64>,
    pub grads: EncoderParams,
}

/// Tokenized encode jobs for a batch, in (queries | positives | negatives)
/// order, plus the per-sample negative counts.
fn encode_jobs(batch: &Batch, cfg: &EncoderConfig) -> (Vec<TokenSequence>, Vec<usize>) {
    let mut jobs = Vec::new();
    for s in &batch.samples {
        let formatted = encoder::format_query(&s.instruction, &s.query);
        jobs.push(encoder::tokenize(&formatted, cfg.max_seq_len));
    }
    for s in &batch.samples {
        jobs.push(encoder::tokenize(&s.positive.text, cfg.max_seq_len));
    }
    let mut neg_counts = Vec::with_capacity(batch.samples.len());
    for s in &batch.samples {
        neg_counts.push(s.negatives.len());
        for neg in &s.negatives {
            jobs.push(encoder::tokenize(&neg.text, cfg.max_seq_len));
        }
    }
    (jobs, neg_counts)
}

fn check_masks(batch: &Batch, masks: &MaskMatrices, neg_counts: &[usize]) -> Result<()> {
    if masks.n() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "masks cover {} samples, batch has {}",
            masks.n(),
            batch.len()
        )));
    }
    let mut expected = Vec::new();
    for (j, &count) in neg_counts.iter().enumerate() {
        for k in 0..count {
            expected.push((j, k));
        }
    }
    if masks.candidates != expected {
        return Err(Error::ShapeMismatch(
            "mask candidate map does not match the batch's negatives".into(),
        ));
    }
    Ok(())
}

fn upstream_grad<'a>(
    grads: &'a crate::loss::CamGradients,
    n: usize,
    job: usize,
) -> &'a [f64] {
    if job < n {
        &grads.d_queries[job]
    } else if job < 2 * n {
        &grads.d_positives[job - n]
    } else {
        &grads.d_negatives[job - 2 * n]
    }
}

/// Gradient-cached step: loss and full parameter gradients for one batch,
/// chunked per `plan`. Loss and gradients are independent of the plan.
pub fn cached_step(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &Batch,
    masks: &MaskMatrices,
    loss_cfg: &LossConfig,
    plan: &ChunkPlan,
) -> Result<StepOutput> {
    let (jobs, neg_counts) = encode_jobs(batch, cfg);
    if plan.total_jobs() != jobs.len() {
        return Err(Error::ChunkPlan(format!(
            "plan covers {} jobs, batch generates {}",
            plan.total_jobs(),
            jobs.len()
        )));
    }
    check_masks(batch, masks, &neg_counts)?;
    let n = batch.len();

    // Phase 1: embeddings only, no differentiation state.
    let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(jobs.len());
    for chunk in plan.chunks() {
        for idx in chunk {
            embeddings.push(encode(params, cfg, &jobs[idx])?);
        }
    }

    // Phase 2: loss backward over the complete embedding set.
    let loss_grads = cam_infonce_grad(
        &embeddings[..n],
        &embeddings[n..2 * n],
        &embeddings[2 * n..],
        masks,
        loss_cfg,
    )?;

    // Phase 3: re-encode chunk by chunk with traces and accumulate parameter
    // gradients in job order.
    let mut grads = EncoderParams::zeros(cfg);
    for chunk in plan.chunks() {
        for idx in chunk {
            let (_, trace) = encode_with_trace(params, cfg, &jobs[idx])?;
            backward_from_trace(
                params,
                cfg,
                &jobs[idx],
                &trace,
                upstream_grad(&loss_grads, n, idx),
                &mut grads,
            )?;
        }
    }

    Ok(StepOutput {
        loss: loss_grads.loss,
        per_query: loss_grads.per_query,
        grads,
    })
}

/// Reference single-pass step: every job is encoded once with its trace kept
/// alive, then back-propagated in job order. Numerically this is the
/// gradient the cached step must reproduce; its differentiation-state
/// footprint is the whole batch.
pub fn monolithic_step(
    params: &EncoderParams,
    cfg: &EncoderConfig,
    batch: &Batch,
    masks: &MaskMatrices,
    loss_cfg: &LossConfig,
) -> Result<StepOutput> {
    let (jobs, neg_counts) = encode_jobs(batch, cfg);
    check_masks(batch, masks, &neg_counts)?;
    let n = batch.len();

    let mut embeddings = Vec::with_capacity(jobs.len());
    let mut traces = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let (emb, trace) = encode_with_trace(params, cfg, job)?;
        embeddings.push(emb);
        traces.push(trace);
    }

    let loss_grads = cam_infonce_grad(
        &embeddings[..n],
        &embeddings[n..2 * n],
        &embeddings[2 * n..],
        masks,
        loss_cfg,
    )?;

    let mut grads = EncoderParams::zeros(cfg);
    for (idx, (job, trace)) in jobs.iter().zip(&traces).enumerate() {
        backward_from_trace(
            params,
            cfg,
            job,
            trace,
            upstream_grad(&loss_grads, n, idx),
            &mut grads,
        )?;
    }

    Ok(StepOutput {
        loss: loss_grads.loss,
        per_query: loss_grads.per_query,
        grads,
    })
}
