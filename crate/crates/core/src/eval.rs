//! Desk-scale evaluation: retrieval recall@k and nDCG@10, and
//! nearest-label-embedding classification accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TextEmbedder;
use crate::error::{Error, Result};
use crate::loss::cosine_similarity;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub id: String,
    pub text: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDoc {
    pub id: String,
    pub text: String,
}

/// Retrieval task: instructed queries ranked against a document corpus with
/// binary relevance judgments.
#[derive(Debug, Clone)]
pub struct RetrievalTask {
    pub queries: Vec<RetrievalQuery>,
    pub corpus: Vec<CorpusDoc>,
    pub relevance: BTreeMap<String, BTreeSet<String>>,
}

impl RetrievalTask {
    pub fn new(
        queries: Vec<RetrievalQuery>,
        corpus: Vec<CorpusDoc>,
        relevance: BTreeMap<String, BTreeSet<String>>,
    ) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidInput("retrieval corpus is empty".into()));
        }
        let doc_ids: BTreeSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
        for (qid, rel) in &relevance {
            for did in rel {
                if !doc_ids.contains(did.as_str()) {
                    return Err(Error::InvalidInput(format!(
                        "relevance for query {qid} references unknown doc {did}"
                    )));
                }
            }
        }
        Ok(Self {
            queries,
            corpus,
            relevance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationItem {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: String,
    pub text: String,
}

/// Classification task scored by nearest label embedding. Texts and label
/// texts are both embedded verbatim (document side).
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub items: Vec<ClassificationItem>,
    pub labels: Vec<ClassLabel>,
}

impl ClassificationTask {
    pub fn new(items: Vec<ClassificationItem>, labels: Vec<ClassLabel>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("label set is empty".into()));
        }
        let ids: BTreeSet<&str> = labels.iter().map(|l| l.id.as_str()).collect();
        for item in &items {
            if !ids.contains(item.label.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "gold label {} not in label set",
                    item.label
                )));
            }
        }
        Ok(Self { items, labels })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    pub ndcg_at_10: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Set when the label set is degenerate (a single label); accuracy is
    /// trivially 1.0 in that case.
    pub degenerate_single_label: bool,
}

/// Rank document indices for one query by cosine similarity, ties broken by
/// ascending corpus index.
fn rank_docs(q_emb: &[f64], doc_embs: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(doc_embs.len());
    for (i, d) in doc_embs.iter().enumerate() {
        scored.push((i, cosine_similarity(q_emb, d)?));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Rank the corpus per query by cosine similarity and compute mean recall@k
/// for each requested k plus nDCG@10 with binary gains.
pub fn retrieval_eval(
    embedder: &dyn TextEmbedder,
    task: &RetrievalTask,
    k_list: &[usize],
) -> Result<RetrievalMetrics> {
    let doc_embs: Vec<Vec<f64>> = task
        .corpus
        .iter()
        .map(|d| embedder.embed_document(&d.text))
        .collect::<Result<_>>()?;

    let mut recall_sums: BTreeMap<usize, f64> = k_list.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sum = 0.0;
    let mut counted = 0usize;
    for query in &task.queries {
        let relevant = match task.relevance.get(&query.id) {
            Some(r) if !r.is_empty() => r,
            _ => continue,
        };
        let q_emb = embedder.embed_query(&query.instruction, &query.text)?;
        let ranking = rank_docs(&q_emb, &doc_embs)?;
        counted += 1;

        for (&k, sum) in recall_sums.iter_mut() {
            let hits = ranking
                .iter()
                .take(k)
                .filter(|&&i| relevant.contains(&task.corpus[i].id))
                .count();
            *sum += hits as f64 / relevant.len() as f64;
        }

        let mut dcg = 0.0;
        for (rank, &i) in ranking.iter().take(10).enumerate() {
            if relevant.contains(&task.corpus[i].id) {
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let ideal: f64 = (0..relevant.len().min(10))
            .map(|rank| 1.0 / ((rank + 2) as f64).log2())
            .sum();
        ndcg_sum += dcg / ideal;
    }

    if counted == 0 {
        return Err(Error::InvalidInput(
            "no query has relevance judgments".into(),
        ));
    }
    let recall_at = recall_sums
        .into_iter()
        .map(|(k, sum)| (k, sum / counted as f64))
        .collect();
    Ok(RetrievalMetrics {
        recall_at,
        ndcg_at_10: ndcg_sum / counted as f64,
    })
}

/// Assign each text the label with the most similar embedded label text;
/// ties broken by label index.
pub fn classification_eval(
    embedder: &dyn TextEmbedder,
    task: &ClassificationTask,
) -> Result<ClassificationMetrics> {
    let label_embs: Vec<Vec<f64>> = task
        .labels
        .iter()
        .map(|l| embedder.embed_document(&l.text))
        .collect::<Result<_>>()?;
    let degenerate = task.labels.len() < 2;

    let mut correct = 0usize;
    for item in &task.items {
        let emb = embedder.embed_document(&item.text)?;
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (i, l_emb) in label_embs.iter().enumerate() {
            let sim = cosine_similarity(&emb, l_emb)?;
            if sim > best_sim {
                best_sim = sim;
                best = i;
            }
        }
        if task.labels[best].id == item.label {
            correct += 1;
        }
    }
    let accuracy = if task.items.is_empty() {
        1.0
    } else {
        correct as f64 / task.items.len() as f64
    };
    Ok(ClassificationMetrics {
        accuracy,
        degenerate_single_label: degenerate,
    })
}

/// On-disk evaluation bundle: `queries.jsonl`, `corpus.jsonl`, `qrels.tsv`,
/// plus optional `classification.jsonl` and `labels.jsonl`.
pub struct EvalBundle {
    pub retrieval: RetrievalTask,
    pub classification: Option<ClassificationTask>,
}

fn load_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let content = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|source| Error::Parse {
            line: idx + 1,
            source,
        })?);
    }
    Ok(out)
}

fn save_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<EvalBundle> {
    let dir = dir.as_ref();
    let queries: Vec<RetrievalQuery> = load_jsonl(&dir.join("queries.jsonl"))?;
    let corpus: Vec<CorpusDoc> = load_jsonl(&dir.join("corpus.jsonl"))?;
    let mut relevance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let qrels = fs::read_to_string(dir.join("qrels.tsv"))?;
    for (idx, line) in qrels.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, '\t');
        let (qid, did) = match (parts.next(), parts.next()) {
            (Some(q), Some(d)) => (q, d),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "qrels.tsv line {}: expected query_id<TAB>doc_id",
                    idx + 1
                )))
            }
        };
        relevance
            .entry(qid.to_string())
            .or_default()
            .insert(did.to_string());
    }
    let retrieval = RetrievalTask::new(queries, corpus, relevance)?;

    let cls_path = dir.join("classification.jsonl");
    let labels_path = dir.join("labels.jsonl");
    let classification = if cls_path.exists() && labels_path.exists() {
        let items: Vec<ClassificationItem> = load_jsonl(&cls_path)?;
        let labels: Vec<ClassLabel> = load_jsonl(&labels_path)?;
        Some(ClassificationTask::new(items, labels)?)
    } else {
        None
    };
    Ok(EvalBundle {
        retrieval,
        classification,
    })
}

pub fn save_bundle(
    dir: impl AsRef<Path>,
    retrieval: &RetrievalTask,
    classification: Option<&ClassificationTask>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_jsonl(&dir.join("queries.jsonl"), &retrieval.queries)?;
    save_jsonl(&dir.join("corpus.jsonl"), &retrieval.corpus)?;
    let mut qrels = String::new();
    for (qid, rel) in &retrieval.relevance {
        for did in rel {
            qrels.push_str(qid);
            qrels.push('\t');
            qrels.push_str(did);
            qrels.push('\n');
        }
    }
    fs::write(dir.join("qrels.tsv"), qrels)?;
    if let Some(task) = classification {
        save_jsonl(&dir.join("classification.jsonl"), &task.items)?;
        save_jsonl(&dir.join("labels.jsonl"), &task.labels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    /// Deterministic text-hash embedder for metric tests.
    struct HashEmbedder {
        dim: usize,
    }

    impl HashEmbedder {
        fn vector(&self, text: &str) -> Vec<f64> {
            let digest = Sha256::digest(text.as_bytes());
            let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..self.dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
        }
    }

    impl TextEmbedder for HashEmbedder {
        fn embed_query(&self, _instruction: &str, query: &str) -> Result<Vec<f64>> {
            Ok(self.vector(query))
        }
        fn embed_document(&self, text: &str) -> Result<Vec<f64>> {
            Ok(self.vector(text))
        }
    }

    fn task_with(queries: &[(&str, &str)], docs: &[(&str, &str)], rel: &[(&str, &[&str])]) -> RetrievalTask {
        RetrievalTask::new(
            queries
                .iter()
                .map(|(id, text)| RetrievalQuery {
                    id: id.to_string(),
                    text: text.to_string(),
                    instruction: String::new(),
                })
                .collect(),
            docs.iter()
                .map(|(id, text)| CorpusDoc {
                    id: id.to_string(),
                    text: text.to_string(),
                })
                .collect(),
            rel.iter()
                .map(|(q, ds)| {
                    (
                        q.to_string(),
                        ds.iter().map(|d| d.to_string()).collect::<BTreeSet<_>>(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// Embedder with fixed vectors per text, for hand-constructed rankings.
    struct FixedEmbedder(BTreeMap<String, Vec<f64>>);

    impl TextEmbedder for FixedEmbedder {
        fn embed_query(&self, _i: &str, q: &str) -> Result<Vec<f64>> {
            Ok(self.0[q].clone())
        }
        fn embed_document(&self, t: &str) -> Result<Vec<f64>> {
            Ok(self.0[t].clone())
        }
    }

    #[test]
    fn recall_is_one_when_corpus_is_all_relevant() {
        let task = task_with(
            &[("q1", "alpha")],
            &[("d1", "beta"), ("d2", "gamma")],
            &[("q1", &["d1", "d2"])],
        );
        let metrics = retrieval_eval(&HashEmbedder { dim: 8 }, &task, &[2, 5]).unwrap();
        assert_eq!(metrics.recall_at[&2], 1.0);
        assert_eq!(metrics.recall_at[&5], 1.0);
    }

    #[test]
    fn ndcg_is_one_for_top_ranked_relevant() {
        let mut vecs = BTreeMap::new();
        vecs.insert("q".to_string(), vec![1.0, 0.0]);
        vecs.insert("close".to_string(), vec![1.0, 0.1]);
        vecs.insert("far".to_string(), vec![-1.0, 0.3]);
        let task = task_with(&[("q1", "q")], &[("d1", "close"), ("d2", "far")], &[("q1", &["d1"])]);
        let metrics = retrieval_eval(&FixedEmbedder(vecs), &task, &[1]).unwrap();
        assert_eq!(metrics.ndcg_at_10, 1.0);
        assert_eq!(metrics.recall_at[&1], 1.0);
    }

    #[test]
    fn ndcg_for_relevant_at_rank_two() {
        // One relevant document ranked second among ten: nDCG@10 = 1/log2(3).
        let mut vecs = BTreeMap::new();
        vecs.insert("q".to_string(), vec![1.0, 0.0]);
        let mut docs = Vec::new();
        for i in 0..10 {
            let sim = 1.0 - 0.05 * i as f64;
            vecs.insert(format!("doc{i}"), vec![sim, (1.0 - sim * sim).sqrt()]);
            docs.push((format!("d{i}"), format!("doc{i}")));
        }
        let doc_refs: Vec<(&str, &str)> =
            docs.iter().map(|(id, t)| (id.as_str(), t.as_str())).collect();
        let task = task_with(&[("q1", "q")], &doc_refs, &[("q1", &["d1"])]);
        let metrics = retrieval_eval(&FixedEmbedder(vecs), &task, &[1]).unwrap();
        let expected = 1.0 / 3f64.log2();
        assert!((metrics.ndcg_at_10 - expected).abs() < 1e-12, "{}", metrics.ndcg_at_10);
        assert!((expected - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn classification_perfect_when_labels_match_inputs() {
        let task = ClassificationTask::new(
            vec![
                ClassificationItem {
                    text: "alpha".into(),
                    label: "A".into(),
                },
                ClassificationItem {
                    text: "beta".into(),
                    label: "B".into(),
                },
            ],
            vec![
                ClassLabel {
                    id: "A".into(),
                    text: "alpha".into(),
                },
                ClassLabel {
                    id: "B".into(),
                    text: "beta".into(),
                },
            ],
        )
        .unwrap();
        let metrics = classification_eval(&HashEmbedder { dim: 8 }, &task).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert!(!metrics.degenerate_single_label);
    }

    #[test]
    fn classification_random_embeddings_near_half() {
        // Monte Carlo reference: random embeddings with two balanced labels
        // land near coin-flip accuracy.
        let items: Vec<ClassificationItem> = (0..1000)
            .map(|i| ClassificationItem {
                text: format!("text-{i}"),
                label: if i % 2 == 0 { "A".into() } else { "B".into() },
            })
            .collect();
        let task = ClassificationTask::new(
            items,
            vec![
                ClassLabel {
                    id: "A".into(),
                    text: "label-a".into(),
                },
                ClassLabel {
                    id: "B".into(),
                    text: "label-b".into(),
                },
            ],
        )
        .unwrap();
        let metrics = classification_eval(&HashEmbedder { dim: 16 }, &task).unwrap();
        assert!((metrics.accuracy - 0.5).abs() < 0.08, "{}", metrics.accuracy);
    }

    #[test]
    fn classification_single_label_degenerate() {
        let task = ClassificationTask::new(
            vec![ClassificationItem {
                text: "x".into(),
                label: "A".into(),
            }],
            vec![ClassLabel {
                id: "A".into(),
                text: "anything".into(),
            }],
        )
        .unwrap();
        let metrics = classification_eval(&HashEmbedder { dim: 8 }, &task).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
        assert!(metrics.degenerate_single_label);
    }

    #[test]
    fn relevance_must_reference_existing_docs() {
        let res = RetrievalTask::new(
            vec![],
            vec![CorpusDoc {
                id: "d1".into(),
                text: "t".into(),
            }],
            [("q1".to_string(), ["nope".to_string()].into_iter().collect())]
                .into_iter()
                .collect(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn scaling_embeddings_leaves_metrics_unchanged() {
        struct Scaled<'a>(&'a HashEmbedder, f64);
        impl TextEmbedder for Scaled<'_> {
            fn embed_query(&self, i: &str, q: &str) -> Result<Vec<f64>> {
                Ok(self.0.embed_query(i, q)?.into_iter().map(|v| v * self.1).collect())
            }
            fn embed_document(&self, t: &str) -> Result<Vec<f64>> {
                Ok(self.0.embed_document(t)?.into_iter().map(|v| v * self.1).collect())
            }
        }
        let base = HashEmbedder { dim: 8 };
        let task = task_with(
            &[("q1", "alpha"), ("q2", "omega")],
            &[("d1", "beta"), ("d2", "gamma"), ("d3", "delta"), ("d4", "epsilon")],
            &[("q1", &["d2"]), ("q2", &["d1", "d4"])],
        );
        let m1 = retrieval_eval(&base, &task, &[1, 2]).unwrap();
        let m2 = retrieval_eval(&Scaled(&base, 7.5), &task, &[1, 2]).unwrap();
        assert_eq!(m1.recall_at, m2.recall_at);
        assert_eq!(m1.ndcg_at_10, m2.ndcg_at_10);
    }

    #[test]
    fn bundle_round_trip() {
        let task = task_with(
            &[("q1", "alpha")],
            &[("d1", "beta"), ("d2", "gamma")],
            &[("q1", &["d2"])],
        );
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &task, None).unwrap();
        let bundle = load_bundle(dir.path()).unwrap();
        assert_eq!(bundle.retrieval.queries, task.queries);
        assert_eq!(bundle.retrieval.corpus, task.corpus);
        assert_eq!(bundle.retrieval.relevance, task.relevance);
        assert!(bundle.classification.is_none());
    }
}
