//! Triplet construction: percentage-margin hard-negative mining for
//! retrieval pairs, class-based sampling for classification data, and
//! class-identifier assignment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{general_class_id, normalize_text, Document, TaskTag, TrainingSample};
use crate::encoder::TextEmbedder;
use crate::error::{Error, Result};
use crate::loss::cosine_similarity;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Candidates scoring above `percentage_margin * sim(query, positive)`
    /// are discarded as likely false negatives.
    pub percentage_margin: f64,
    /// Number of negatives emitted per pair.
    pub top_k: usize,
    /// Only the highest-ranked `candidate_pool` documents are considered.
    pub candidate_pool: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            percentage_margin: 0.95,
            top_k: 4,
            candidate_pool: 64,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentage_margin > 0.0 && self.percentage_margin <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "percentage_margin must lie in (0, 1], got {}",
                self.percentage_margin
            )));
        }
        if self.top_k == 0 || self.top_k > self.candidate_pool {
            return Err(Error::InvalidConfig(format!(
                "top_k {} must be positive and at most candidate_pool {}",
                self.top_k, self.candidate_pool
            )));
        }
        Ok(())
    }
}

/// A (query, positive) pair awaiting negatives. Pairs without a natural
/// positive class get a synthetic per-document id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningPair {
    pub query: String,
    #[serde(default)]
    pub instruction: String,
    pub positive_text: String,
    pub positive_class: Option<String>,
}

pub fn load_mining_pairs(path: impl AsRef<Path>) -> Result<Vec<MiningPair>> {
    let content = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(line).map_err(|source| Error::Parse {
            line: idx + 1,
            source,
        })?);
    }
    Ok(pairs)
}

#[derive(Debug)]
pub struct MiningOutput {
    pub samples: Vec<TrainingSample>,
    /// Pairs whose survivor set was empty; they are emitted with zero
    /// negatives.
    pub empty_negative_count: usize,
}

/// Percentage-margin hard-negative mining.
///
/// For each pair the corpus is ranked by similarity to the query
/// (descending, ties by ascending corpus index) and truncated to the
/// candidate pool. Candidates are discarded when they score above
/// `margin * sim(query, positive)`, duplicate the positive (normalized
/// text), or share its class. The top `top_k` survivors become the
/// negatives.
pub fn mine_hard_negatives(
    pairs: &[MiningPair],
    corpus: &[Document],
    embedder: &dyn TextEmbedder,
    cfg: &MiningConfig,
) -> Result<MiningOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::InvalidInput("mining corpus is empty".into()));
    }
    let doc_embs: Vec<Vec<f64>> = corpus
        .iter()
        .map(|d| embedder.embed_document(&d.text))
        .collect::<Result<_>>()?;
    let doc_norm_texts: Vec<String> = corpus.iter().map(|d| normalize_text(&d.text)).collect();

    let mut samples = Vec::with_capacity(pairs.len());
    let mut empty_negative_count = 0usize;
    for pair in pairs {
        let pos_class = pair
            .positive_class
            .clone()
            .unwrap_or_else(|| general_class_id(&pair.positive_text));
        let q_emb = embedder.embed_query(&pair.instruction, &pair.query)?;
        let pos_emb = embedder.embed_document(&pair.positive_text)?;
        let sim_pos = cosine_similarity(&q_emb, &pos_emb)?;
        let threshold = cfg.percentage_margin * sim_pos;
        let pos_norm = normalize_text(&pair.positive_text);

        let mut scored: Vec<(usize, f64)> = doc_embs
            .iter()
            .enumerate()
            .map(|(i, emb)| Ok((i, cosine_similarity(&q_emb, emb)?)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.truncate(cfg.candidate_pool);

        let negatives: Vec<Document> = scored
            .into_iter()
            .filter(|&(i, sim)| {
                sim <= threshold
                    && doc_norm_texts[i] != pos_norm
                    && corpus[i].class_id != pos_class
            })
            .take(cfg.top_k)
            .map(|(i, _)| corpus[i].clone())
            .collect();
        if negatives.is_empty() {
            empty_negative_count += 1;
        }
        samples.push(TrainingSample {
            query: pair.query.clone(),
            instruction: pair.instruction.clone(),
            task_tag: TaskTag::Retrieval,
            positive: Document {
                text: pair.positive_text.clone(),
                class_id: pos_class,
            },
            negatives,
        });
    }
    Ok(MiningOutput {
        samples,
        empty_negative_count,
    })
}

/// A text with its classification label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledPair {
    pub text: String,
    pub label_id: String,
    #[serde(default)]
    pub label_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMode {
    /// Binary classification: the anchor's label text is the positive, the
    /// opposite label text the negative.
    LabelText,
    /// Multiclass: another document of the anchor's class is the positive, a
    /// document of a different class the negative.
    SameClassDoc,
}

#[derive(Debug)]
pub struct TripletOutput {
    pub samples: Vec<TrainingSample>,
    /// Anchors skipped in `SameClassDoc` mode because their class has no
    /// second document.
    pub skipped_singletons: usize,
}

/// Convert labeled pairs into contrastive triplets; class ids are the label
/// ids, so the positive and negative classes always differ by construction.
pub fn classification_to_triplets(
    pairs: &[LabeledPair],
    mode: TripletMode,
    seed: u64,
) -> Result<TripletOutput> {
    for pair in pairs {
        if pair.label_id.is_empty() {
            return Err(Error::InvalidInput("labeled pair with empty label_id".into()));
        }
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, pair) in pairs.iter().enumerate() {
        by_label.entry(pair.label_id.as_str()).or_default().push(i);
    }
    if by_label.len() < 2 {
        return Err(Error::SingleLabel);
    }
    let labels: Vec<&str> = by_label.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut skipped_singletons = 0usize;

    match mode {
        TripletMode::LabelText => {
            let mut label_texts: BTreeMap<&str, &str> = BTreeMap::new();
            for pair in pairs {
                if let Some(text) = &pair.label_text {
                    label_texts.entry(pair.label_id.as_str()).or_insert(text);
                }
            }
            for pair in pairs {
                let own = *label_texts.get(pair.label_id.as_str()).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "label_text mode requires a label text for label {}",
                        pair.label_id
                    ))
                })?;
                // With two labels this is exactly the opposite label; with
                // more, a seeded uniform choice among the others.
                let others: Vec<&str> = labels
                    .iter()
                    .copied()
                    .filter(|&l| l != pair.label_id)
                    .collect();
                let neg_label = others[rng.gen_range(0..others.len())];
                let neg_text = *label_texts.get(neg_label).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "label_text mode requires a label text for label {neg_label}"
                    ))
                })?;
                samples.push(TrainingSample {
                    query: pair.text.clone(),
                    instruction: String::new(),
                    task_tag: TaskTag::Classification,
                    positive: Document {
                        text: own.to_string(),
                        class_id: pair.label_id.clone(),
                    },
                    negatives: vec![Document {
                        text: neg_text.to_string(),
                        class_id: neg_label.to_string(),
                    }],
                });
            }
        }
        TripletMode::SameClassDoc => {
            for (i, pair) in pairs.iter().enumerate() {
                let same: Vec<usize> = by_label[pair.label_id.as_str()]
                    .iter()
                    .copied()
                    .filter(|&j| j != i)
                    .collect();
                if same.is_empty() {
                    skipped_singletons += 1;
                    continue;
                }
                let pos_idx = same[rng.gen_range(0..same.len())];
                let different: Vec<usize> = (0..pairs.len())
                    .filter(|&j| pairs[j].label_id != pair.label_id)
                    .collect();
                let neg_idx = different[rng.gen_range(0..different.len())];
                samples.push(TrainingSample {
                    query: pair.text.clone(),
                    instruction: String::new(),
                    task_tag: TaskTag::Classification,
                    positive: Document {
                        text: pairs[pos_idx].text.clone(),
                        class_id: pair.label_id.clone(),
                    },
                    negatives: vec![Document {
                        text: pairs[neg_idx].text.clone(),
                        class_id: pairs[neg_idx].label_id.clone(),
                    }],
                });
            }
        }
    }
    Ok(TripletOutput {
        samples,
        skipped_singletons,
    })
}

/// Where a batch of documents came from, for class-identifier assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    /// Synthetic documents written under one persona share its identifier.
    ExpertPersona(String),
    /// General documents get one identifier per unique (normalized) text.
    General,
}

pub fn assign_class_ids(texts: &[impl AsRef<str>], provenance: &Provenance) -> Vec<Document> {
    texts
        .iter()
        .map(|text| {
            let text = text.as_ref();
            let class_id = match provenance {
                Provenance::ExpertPersona(id) => id.clone(),
                Provenance::General => general_class_id(text),
            };
            Document {
                text: text.to_string(),
                class_id,
            }
        })
        .collect()
}
