//! Training loop: seeded batch assembly, gradient-cached steps, Adam
//! updates, checkpoint persistence and loss-curve logging.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::corpus::{Batch, TrainingSample};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::grad_cache::{cached_step, ChunkPlan};
use crate::loss::{build_masks, LossConfig, MaskMatrices};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub effective_batch_size: usize,
    pub chunk_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub temperature: f64,
    /// Class-aware masking; `false` runs the identical pipeline with all-ones
    /// masks (the ablation baseline).
    pub masking_enabled: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            effective_batch_size: 64,
            chunk_size: 8,
            steps: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            temperature: 0.05,
            masking_enabled: true,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.effective_batch_size == 0 || self.chunk_size == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig(
                "effective_batch_size, chunk_size and checkpoint_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Initial parameters: a fresh seeded initialization or explicit tensors.
pub enum Init {
    Seed(u64),
    Params(EncoderParams),
}

#[derive(Debug)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub final_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    t: usize,
}

impl Adam {
    fn new(cfg: &EncoderConfig) -> Self {
        Self {
            m: EncoderParams::zeros(cfg),
            v: EncoderParams::zeros(cfg),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut EncoderParams, grads: &EncoderParams, cfg: &TrainConfig) {
        self.t += 1;
        let bias1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

fn batch_masks(batch: &Batch, masking_enabled: bool) -> Result<MaskMatrices> {
    if masking_enabled {
        let pos: Vec<&str> = batch
            .samples
            .iter()
            .map(|s| s.positive.class_id.as_str())
            .collect();
        let negs: Vec<Vec<&str>> = batch
            .samples
            .iter()
            .map(|s| s.negatives.iter().map(|n| n.class_id.as_str()).collect())
            .collect();
        build_masks(&pos, &negs)
    } else {
        let counts: Vec<usize> = batch.samples.iter().map(|s| s.negatives.len()).collect();
        Ok(MaskMatrices::all_ones(&counts))
    }
}

fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_{step:05}.ckpt"))
}

/// Run the optimization loop. Deterministic under (seed, config, data); the
/// initial parameters, periodic checkpoints and a final checkpoint are
/// persisted under `out_dir` along with a `loss.csv` log.
pub fn train(
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    data: &[TrainingSample],
    init: Init,
    out_dir: impl AsRef<Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training data is empty".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;

    let mut params = match init {
        Init::Seed(seed) => EncoderParams::init(enc_cfg, seed)?,
        Init::Params(p) => {
            p.validate_finite()?;
            p
        }
    };

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    save_checkpoint(&params, enc_cfg, checkpoint_path(out_dir, 0))?;

    let mut adam = Adam::new(enc_cfg);
    let mut losses = Vec::with_capacity(cfg.steps);
    let loss_cfg = LossConfig {
        temperature: cfg.temperature,
    };

    for step in 1..=cfg.steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let take = cfg.effective_batch_size.min(order.len() - cursor);
        let samples: Vec<&TrainingSample> =
            order[cursor..cursor + take].iter().map(|&i| &data[i]).collect();
        cursor += take;
        let batch = Batch::new(step - 1, samples)?;

        let total_jobs =
            2 * batch.len() + batch.samples.iter().map(|s| s.negatives.len()).sum::<usize>();
        let plan = ChunkPlan::new(cfg.chunk_size, total_jobs)?;
        let masks = batch_masks(&batch, cfg.masking_enabled)?;

        let out = cached_step(&params, enc_cfg, &batch, &masks, &loss_cfg, &plan)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.update(&mut params, &out.grads, cfg);
        losses.push(out.loss);

        if step % cfg.checkpoint_every == 0 {
            save_checkpoint(&params, enc_cfg, checkpoint_path(out_dir, step))?;
        }
    }

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(&params, enc_cfg, &final_checkpoint)?;

    let loss_csv = out_dir.join("loss.csv");
    let mut csv = String::from("step,loss\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(&loss_csv, csv)?;

    Ok(TrainReport {
        losses,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_checkpoint,
        loss_csv,
    })
}
