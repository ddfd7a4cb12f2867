//! Spherical linear interpolation of checkpoints.
//!
//! Interpolating along the hyperspherical geodesic preserves angular
//! structure that plain averaging shrinks: the midpoint of two unit vectors
//! under linear interpolation has norm < 1, under SLERP exactly 1.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Each named tensor is flattened and interpolated with its own angle.
    PerTensor,
    /// All parameters are flattened into one vector sharing a single angle.
    WholeModel,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    /// Interpolation fraction: 0 returns the first checkpoint, 1 the second.
    pub t: f64,
    pub granularity: Granularity,
    /// Angle threshold (radians). Below it the geodesic is numerically
    /// degenerate and linear interpolation is used; within it of pi the
    /// inputs are rejected as antipodal.
    pub parallel_epsilon: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            t: 0.5,
            granularity: Granularity::PerTensor,
            parallel_epsilon: 1e-7,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidConfig(format!(
                "interpolation fraction t must lie in [0, 1], got {}",
                self.t
            )));
        }
        if !(self.parallel_epsilon > 0.0) {
            return Err(Error::InvalidConfig("parallel_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Spherical linear interpolation between two vectors.
///
/// `sin((1-t)*omega)/sin(omega) * p + sin(t*omega)/sin(omega) * q`, where
/// omega is the angle between the inputs. Near-parallel inputs fall back to
/// linear interpolation (identical in the limit); antipodal inputs are an
/// error because the geodesic is undefined.
pub fn slerp(p: &[f64], q: &[f64], t: f64, parallel_epsilon: f64) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch(format!(
            "slerp of vectors with lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np == 0.0 || nq == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let omega = (dot / (np * nq)).clamp(-1.0, 1.0).acos();

    if omega > std::f64::consts::PI - parallel_epsilon {
        return Err(Error::Antipodal);
    }
    if omega < parallel_epsilon {
        return Ok(p.iter().zip(q).map(|(a, b)| a + t * (b - a)).collect());
    }
    let sin_omega = omega.sin();
    let wp = ((1.0 - t) * omega).sin() / sin_omega;
    let wq = (t * omega).sin() / sin_omega;
    Ok(p.iter().zip(q).map(|(a, b)| wp * a + wq * b).collect())
}

fn check_manifests(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Manifest("checkpoint configs differ".into()));
    }
    if a.tensors.len() != b.tensors.len() {
        return Err(Error::Manifest(format!(
            "checkpoints have {} vs {} tensors",
            a.tensors.len(),
            b.tensors.len()
        )));
    }
    for ((na, ta), (nb, tb)) in a.tensors.iter().zip(&b.tensors) {
        if na != nb {
            return Err(Error::Manifest(format!("tensor name mismatch: {na} vs {nb}")));
        }
        if ta.shape() != tb.shape() {
            return Err(Error::Manifest(format!(
                "tensor {na}: shape {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
    }
    Ok(())
}

/// SLERP-merge two checkpoints with identical manifests.
pub fn merge_checkpoints(a: &Checkpoint, b: &Checkpoint, cfg: &MergeConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    check_manifests(a, b)?;

    let tensors = match cfg.granularity {
        Granularity::PerTensor => {
            let mut out = Vec::with_capacity(a.tensors.len());
            for ((name, ta), (_, tb)) in a.tensors.iter().zip(&b.tensors) {
                let merged = slerp(ta.data(), tb.data(), cfg.t, cfg.parallel_epsilon)?;
                out.push((name.clone(), Tensor::new(ta.shape().to_vec(), merged)?));
            }
            out
        }
        Granularity::WholeModel => {
            let flat_a: Vec<f64> = a.tensors.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
            let flat_b: Vec<f64> = b.tensors.iter().flat_map(|(_, t)| t.data().iter().copied()).collect();
            let merged = slerp(&flat_a, &flat_b, cfg.t, cfg.parallel_epsilon)?;
            let mut out = Vec::with_capacity(a.tensors.len());
            let mut offset = 0;
            for (name, ta) in &a.tensors {
                let data = merged[offset..offset + ta.len()].to_vec();
                offset += ta.len();
                out.push((name.clone(), Tensor::new(ta.shape().to_vec(), data)?));
            }
            out
        }
    };
    Ok(Checkpoint {
        config: a.config.clone(),
        tensors,
    })
}
