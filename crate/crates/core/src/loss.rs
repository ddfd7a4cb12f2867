//! Class-aware masked InfoNCE: mask construction, the masked contrastive
//! loss, and analytic gradients with respect to all embeddings.
//!
//! For a batch of N (query, positive, negatives) triples the loss for query i
//! is `-log(exp(sim(q_i, p_i)/tau) / D_i)` where the denominator sums
//! masked exponentials of the query's similarity to every positive and every
//! negative candidate in the batch. Masks zero out candidates whose class
//! matches the query's positive class: an in-batch "negative" from the same
//! class is a false negative and must not be pushed away.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Softmax temperature; every similarity is divided by it inside the
    /// exponentials. 1.0 recovers the plain (untempered) formulation.
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.05 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Binary masks for one batch. `m_plus` is N x N over in-batch positives;
/// `m_minus` is N x C over the flattened negative candidates, with
/// `candidates` mapping each column back to (sample index, negative index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMatrices {
    n: usize,
    pub m_plus: Vec<u8>,
    pub m_minus: Vec<u8>,
    pub candidates: Vec<(usize, usize)>,
}

impl MaskMatrices {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn plus(&self, i: usize, j: usize) -> u8 {
        self.m_plus[i * self.n + j]
    }

    pub fn minus(&self, i: usize, c: usize) -> u8 {
        self.m_minus[i * self.candidates.len() + c]
    }

    /// All-ones masks (the unmasked ablation) for a batch with the given
    /// per-sample negative counts.
    pub fn all_ones(neg_counts: &[usize]) -> Self {
        let n = neg_counts.len();
        let candidates = candidate_map(neg_counts);
        Self {
            n,
            m_plus: vec![1; n * n],
            m_minus: vec![1; n * candidates.len()],
            candidates,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m_plus.len() != self.n * self.n
            || self.m_minus.len() != self.n * self.candidates.len()
        {
            return Err(Error::ShapeMismatch("mask matrices are inconsistent".into()));
        }
        for i in 0..self.n {
            if self.m_plus[i * self.n + i] != 1 {
                return Err(Error::InvalidInput(
                    "mask diagonal must be all ones (a query's own positive is never masked)"
                        .into(),
                ));
            }
        }
        if self.m_plus.iter().chain(self.m_minus.iter()).any(|&m| m > 1) {
            return Err(Error::InvalidInput("mask entries must be 0 or 1".into()));
        }
        Ok(())
    }
}

fn candidate_map(neg_counts: &[usize]) -> Vec<(usize, usize)> {
    let mut map = Vec::with_capacity(neg_counts.iter().sum());
    for (j, &count) in neg_counts.iter().enumerate() {
        for k in 0..count {
            map.push((j, k));
        }
    }
    map
}

/// Build the binary masks from class identifiers.
///
/// `m_plus[i][j] = 0` iff the positives of samples i and j share a class and
/// `i != j` (the diagonal is always 1). `m_minus[i][(j,k)] = 0` iff negative
/// (j,k) shares the class of sample i's positive — with no `i != j`
/// exemption, so a sample's own negative is masked if ill-formed data gives
/// it the positive's class.
pub fn build_masks<S: AsRef<str>>(
    pos_classes: &[S],
    neg_classes: &[Vec<S>],
) -> Result<MaskMatrices> {
    let n = pos_classes.len();
    if neg_classes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} positive classes but {} negative lists",
            n,
            neg_classes.len()
        )));
    }
    let neg_counts: Vec<usize> = neg_classes.iter().map(|v| v.len()).collect();
    let candidates = candidate_map(&neg_counts);
    let flat_neg: Vec<&str> = neg_classes
        .iter()
        .flat_map(|v| v.iter().map(|c| c.as_ref()))
        .collect();

    let mut m_plus = vec![1u8; n * n];
    let mut m_minus = vec![1u8; n * candidates.len()];
    for i in 0..n {
        let ci = pos_classes[i].as_ref();
        for j in 0..n {
            if i != j && ci == pos_classes[j].as_ref() {
                m_plus[i * n + j] = 0;
            }
        }
        for (c, &neg_class) in flat_neg.iter().enumerate() {
            if ci == neg_class {
                m_minus[i * candidates.len() + c] = 0;
            }
        }
    }
    Ok(MaskMatrices {
        n,
        m_plus,
        m_minus,
        candidates,
    })
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pairwise query-vs-candidate cosine similarities for one batch.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub num_candidates: usize,
    /// N x N: `s_pos[i*n + j] = sim(q_i, p_j)`.
    pub s_pos: Vec<f64>,
    /// N x C: `s_neg[i*c + k] = sim(q_i, neg_k)`.
    pub s_neg: Vec<f64>,
}

pub fn similarity_matrix(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
) -> Result<SimilarityMatrix> {
    let n = queries.len();
    let c = negatives.len();
    let mut s_pos = vec![0.0; n * n];
    let mut s_neg = vec![0.0; n * c];
    for (i, q) in queries.iter().enumerate() {
        for (j, p) in positives.iter().enumerate() {
            s_pos[i * n + j] = cosine_similarity(q, p)?;
        }
        for (k, g) in negatives.iter().enumerate() {
            s_neg[i * c + k] = cosine_similarity(q, g)?;
        }
    }
    Ok(SimilarityMatrix {
        n,
        num_candidates: c,
        s_pos,
        s_neg,
    })
}

#[derive(Debug, Clone)]
pub struct CamLoss {
    pub loss: f64,
    pub per_query: Vec<f64>,
}

fn check_batch(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    masks: &MaskMatrices,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    masks.validate()?;
    if queries.len() != masks.n() || positives.len() != masks.n() {
        return Err(Error::ShapeMismatch(format!(
            "masks are dimensioned for {} samples, got {} queries / {} positives",
            masks.n(),
            queries.len(),
            positives.len()
        )));
    }
    if negatives.len() != masks.num_candidates() {
        return Err(Error::ShapeMismatch(format!(
            "masks cover {} negative candidates, got {}",
            masks.num_candidates(),
            negatives.len()
        )));
    }
    if masks.n() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// Row-wise stabilized log-sum-exp over the masked terms. Returns per-row
/// (max, log(sum exp(a - max))) with the diagonal positive term always
/// included (its mask is guaranteed 1).
fn masked_row_logsumexp(
    sims: &SimilarityMatrix,
    masks: &MaskMatrices,
    inv_tau: f64,
    i: usize,
) -> (f64, f64) {
    let n = sims.n;
    let c = sims.num_candidates;
    let mut max = f64::NEG_INFINITY;
    for j in 0..n {
        if masks.m_plus[i * n + j] == 1 {
            max = max.max(sims.s_pos[i * n + j] * inv_tau);
        }
    }
    for k in 0..c {
        if masks.m_minus[i * c + k] == 1 {
            max = max.max(sims.s_neg[i * c + k] * inv_tau);
        }
    }
    let mut sum = 0.0;
    for j in 0..n {
        if masks.m_plus[i * n + j] == 1 {
            sum += (sims.s_pos[i * n + j] * inv_tau - max).exp();
        }
    }
    for k in 0..c {
        if masks.m_minus[i * c + k] == 1 {
            sum += (sims.s_neg[i * c + k] * inv_tau - max).exp();
        }
    }
    (max, sum.ln())
}

/// Class-aware masked InfoNCE over one batch. The loss is the mean of the
/// per-query losses; every per-query value is non-negative because the
/// numerator term is itself part of the (max-stabilized) denominator.
pub fn cam_infonce(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    masks: &MaskMatrices,
    cfg: &LossConfig,
) -> Result<CamLoss> {
    check_batch(queries, positives, negatives, masks, cfg)?;
    let sims = similarity_matrix(queries, positives, negatives)?;
    let inv_tau = 1.0 / cfg.temperature;
    let n = sims.n;
    let mut per_query = Vec::with_capacity(n);
    for i in 0..n {
        let (max, log_sum) = masked_row_logsumexp(&sims, masks, inv_tau, i);
        let a_ii = sims.s_pos[i * n + i] * inv_tau;
        per_query.push(max + log_sum - a_ii);
    }
    let loss = per_query.iter().sum::<f64>() / n as f64;
    Ok(CamLoss { loss, per_query })
}

/// Loss, per-query losses, and gradients with respect to all three embedding
/// sets (through the cosine similarities).
#[derive(Debug, Clone)]
pub struct CamGradients {
    pub loss: f64,
    pub per_query: Vec<f64>,
    pub d_queries: Vec<Vec<f64>>,
    pub d_positives: Vec<Vec<f64>>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// dσ(u,v)/du accumulated into `du` with weight `g`.
fn cosine_backward_acc(g: f64, u: &[f64], v: &[f64], nu: f64, nv: f64, sigma: f64, du: &mut [f64]) {
    let inv = 1.0 / (nu * nv);
    let self_term = sigma / (nu * nu);
    for ((du_i, &u_i), &v_i) in du.iter_mut().zip(u).zip(v) {
        *du_i += g * (v_i * inv - self_term * u_i);
    }
}

pub fn cam_infonce_grad(
    queries: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    masks: &MaskMatrices,
    cfg: &LossConfig,
) -> Result<CamGradients> {
    check_batch(queries, positives, negatives, masks, cfg)?;
    let sims = similarity_matrix(queries, positives, negatives)?;
    let inv_tau = 1.0 / cfg.temperature;
    let n = sims.n;
    let c = sims.num_candidates;

    let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q_norms: Vec<f64> = queries.iter().map(norm).collect();
    let p_norms: Vec<f64> = positives.iter().map(norm).collect();
    let g_norms: Vec<f64> = negatives.iter().map(norm).collect();

    let mut per_query = Vec::with_capacity(n);
    let mut d_queries: Vec<Vec<f64>> = queries.iter().map(|q| vec![0.0; q.len()]).collect();
    let mut d_positives: Vec<Vec<f64>> = positives.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut d_negatives: Vec<Vec<f64>> = negatives.iter().map(|g| vec![0.0; g.len()]).collect();

    // d(mean loss)/d(sim) = (softmax_weight - indicator_numerator) / (N * tau)
    let scale = inv_tau / n as f64;
    for i in 0..n {
        let (max, log_sum) = masked_row_logsumexp(&sims, masks, inv_tau, i);
        let a_ii = sims.s_pos[i * n + i] * inv_tau;
        per_query.push(max + log_sum - a_ii);
        let log_denom = max + log_sum;

        for j in 0..n {
            let mut g = 0.0;
            if masks.m_plus[i * n + j] == 1 {
                g += (sims.s_pos[i * n + j] * inv_tau - log_denom).exp();
            }
            if i == j {
                g -= 1.0;
            }
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            let sigma = sims.s_pos[i * n + j];
            cosine_backward_acc(g, &queries[i], &positives[j], q_norms[i], p_norms[j], sigma, &mut d_queries[i]);
            cosine_backward_acc(g, &positives[j], &queries[i], p_norms[j], q_norms[i], sigma, &mut d_positives[j]);
        }
        for k in 0..c {
            if masks.m_minus[i * c + k] == 0 {
                continue;
            }
            let g = (sims.s_neg[i * c + k] * inv_tau - log_denom).exp() * scale;
            let sigma = sims.s_neg[i * c + k];
            cosine_backward_acc(g, &queries[i], &negatives[k], q_norms[i], g_norms[k], sigma, &mut d_queries[i]);
            cosine_backward_acc(g, &negatives[k], &queries[i], g_norms[k], q_norms[i], sigma, &mut d_negatives[k]);
        }
    }
    let loss = per_query.iter().sum::<f64>() / n as f64;
    Ok(CamGradients {
        loss,
        per_query,
        d_queries,
        d_positives,
        d_negatives,
    })
}
