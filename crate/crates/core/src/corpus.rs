//! Training-sample data model, JSONL ingestion and validation, and a seeded
//! synthetic corpus generator.
//!
//! The synthetic corpus gives each class its own token distribution, so
//! queries and positives of the same class are drawn from one distribution:
//! when two samples of the same class land in a batch, each one's positive is
//! a genuine false negative for the other's query.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{ClassLabel, ClassificationItem, ClassificationTask, CorpusDoc, RetrievalQuery, RetrievalTask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskTag {
    Retrieval,
    Classification,
    Clustering,
    Nli,
}

/// A document with its class identifier. Documents arriving without a natural
/// class are assigned a synthetic per-document id at load time, so in-memory
/// documents always carry one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub text: String,
    pub class_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub query: String,
    pub instruction: String,
    pub task_tag: TaskTag,
    pub positive: Document,
    pub negatives: Vec<Document>,
}

/// One training batch; `index` is its position in the deterministic batch
/// sequence of a run.
pub struct Batch<'a> {
    pub index: usize,
    pub samples: Vec<&'a TrainingSample>,
}

impl<'a> Batch<'a> {
    pub fn new(index: usize, samples: Vec<&'a TrainingSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("batch must contain at least one sample".into()));
        }
        Ok(Self { index, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// Wire format. `class_id` may be null for retrieval candidates; a synthetic
// per-document id is assigned on load.
#[derive(Serialize, Deserialize)]
struct RawDocument {
    text: String,
    class_id: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSample {
    query: String,
    instruction: String,
    task_tag: TaskTag,
    positive: RawDocument,
    negatives: Vec<RawDocument>,
}

/// Lowercase, whitespace-collapsed view of a text, used for duplicate
/// detection and synthetic class ids.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Synthetic per-document class id: hash of the normalized text, so
/// duplicates collapse to one class.
pub fn general_class_id(text: &str) -> String {
    let digest = Sha256::digest(normalize_text(text).as_bytes());
    let mut id = String::with_capacity(20);
    id.push_str("doc-");
    for byte in &digest[..8] {
        write!(id, "{byte:02x}").expect("writing to string");
    }
    id
}

fn resolve_document(raw: RawDocument) -> Document {
    let class_id = match raw.class_id {
        Some(id) => id,
        None => general_class_id(&raw.text),
    };
    Document {
        text: raw.text,
        class_id,
    }
}

fn resolve_sample(raw: RawSample) -> TrainingSample {
    TrainingSample {
        query: raw.query,
        instruction: raw.instruction,
        task_tag: raw.task_tag,
        positive: resolve_document(raw.positive),
        negatives: raw.negatives.into_iter().map(resolve_document).collect(),
    }
}

fn to_raw(sample: &TrainingSample) -> RawSample {
    RawSample {
        query: sample.query.clone(),
        instruction: sample.instruction.clone(),
        task_tag: sample.task_tag,
        positive: RawDocument {
            text: sample.positive.text.clone(),
            class_id: Some(sample.positive.class_id.clone()),
        },
        negatives: sample
            .negatives
            .iter()
            .map(|n| RawDocument {
                text: n.text.clone(),
                class_id: Some(n.class_id.clone()),
            })
            .collect(),
    }
}

/// Invariant check; the returned list is empty iff the sample is well formed.
/// Each entry names the offending field and rule.
pub fn validate_sample(sample: &TrainingSample) -> Vec<String> {
    let mut violations = Vec::new();
    if sample.query.trim().is_empty() {
        violations.push("query: empty".to_string());
    }
    if sample.positive.text.trim().is_empty() {
        violations.push("positive.text: empty".to_string());
    }
    if sample.positive.class_id.is_empty() {
        violations.push("positive.class_id: empty".to_string());
    }
    for (i, neg) in sample.negatives.iter().enumerate() {
        if neg.text.trim().is_empty() {
            violations.push(format!("negatives[{i}].text: empty"));
        }
        if neg.class_id.is_empty() {
            violations.push(format!("negatives[{i}].class_id: empty"));
        }
        if !neg.class_id.is_empty() && neg.class_id == sample.positive.class_id {
            violations.push(format!("negatives[{i}]: class equals positive"));
        }
    }
    violations
}

/// Load training samples from a JSONL file, one object per line. Line order
/// is preserved; parse and constraint errors carry the 1-based line number.
pub fn load_samples(path: impl AsRef<Path>) -> Result<Vec<TrainingSample>> {
    let content = fs::read_to_string(path)?;
    let mut samples = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let raw: RawSample =
            serde_json::from_str(line).map_err(|source| Error::Parse { line: line_no, source })?;
        let sample = resolve_sample(raw);
        let violations = validate_sample(&sample);
        if !violations.is_empty() {
            return Err(Error::InvalidSample {
                line: line_no,
                violation: violations.join("; "),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Load bare documents from JSONL ({"text", "class_id"|null}); documents
/// without a class get a synthetic per-document id.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let content = fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let raw: RawDocument =
            serde_json::from_str(line).map_err(|source| Error::Parse { line: line_no, source })?;
        let doc = resolve_document(raw);
        if doc.text.trim().is_empty() {
            return Err(Error::InvalidSample {
                line: line_no,
                violation: "text: empty".into(),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Write samples as JSONL (LF line endings, one object per line).
pub fn save_samples(path: impl AsRef<Path>, samples: &[TrainingSample]) -> Result<()> {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(&to_raw(sample))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub seed: u64,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub vocab_size: usize,
    pub tokens_per_doc: usize,
    /// Fraction of tokens drawn from a vocabulary pool shared across classes.
    pub class_overlap: f64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 32,
            samples_per_class: 64,
            vocab_size: 192,
            tokens_per_doc: 5,
            class_overlap: 0.15,
        }
    }
}

const EVAL_QUERIES_PER_CLASS: usize = 4;
const EVAL_DOCS_PER_CLASS: usize = 4;
const CLASSIFICATION_ITEMS_PER_CLASS: usize = 2;
/// Instruction attached to toy queries (short on purpose: byte-level
/// tokenization makes every character count).
pub const TOY_INSTRUCTION: &str = "match the category";

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
        }
        if self.samples_per_class == 0 || self.tokens_per_doc == 0 {
            return Err(Error::InvalidConfig(
                "samples_per_class and tokens_per_doc must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.class_overlap) {
            return Err(Error::InvalidConfig("class_overlap must lie in [0, 1]".into()));
        }
        let shared = self.shared_vocab();
        if (self.vocab_size - shared) / self.n_classes == 0 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} too small for {} classes at overlap {}",
                self.vocab_size, self.n_classes, self.class_overlap
            )));
        }
        Ok(())
    }

    fn shared_vocab(&self) -> usize {
        ((self.vocab_size as f64 * self.class_overlap).round() as usize).min(self.vocab_size)
    }
}

/// Everything the generator produces: training triplets plus held-out
/// retrieval and classification tasks over the same class structure.
pub struct ToyCorpus {
    pub train: Vec<TrainingSample>,
    pub retrieval: RetrievalTask,
    pub classification: ClassificationTask,
}

fn word(index: usize) -> String {
    // Short deterministic words: aa, ab, ..., zz, aaa, aab, ...
    let letter = |i: usize| (b'a' + (i % 26) as u8) as char;
    if index < 26 * 26 {
        format!("{}{}", letter(index / 26), letter(index))
    } else {
        let rest = index - 26 * 26;
        format!("{}{}{}", letter(rest / (26 * 26)), letter(rest / 26), letter(rest))
    }
}

struct VocabPartition {
    class_pools: Vec<Vec<String>>,
    shared_pool: Vec<String>,
}

impl VocabPartition {
    fn build(spec: &ToyCorpusSpec) -> Self {
        let shared = spec.shared_vocab();
        let per_class = (spec.vocab_size - shared) / spec.n_classes;
        let words: Vec<String> = (0..spec.vocab_size).map(word).collect();
        let class_pools = (0..spec.n_classes)
            .map(|c| words[c * per_class..(c + 1) * per_class].to_vec())
            .collect();
        let shared_pool = words[spec.vocab_size - shared..].to_vec();
        Self {
            class_pools,
            shared_pool,
        }
    }

    fn sample_doc(&self, class: usize, spec: &ToyCorpusSpec, rng: &mut ChaCha8Rng) -> String {
        let pool = &self.class_pools[class];
        let mut words = Vec::with_capacity(spec.tokens_per_doc);
        for _ in 0..spec.tokens_per_doc {
            let from_shared = !self.shared_pool.is_empty() && rng.gen::<f64>() < spec.class_overlap;
            let w = if from_shared {
                &self.shared_pool[rng.gen_range(0..self.shared_pool.len())]
            } else {
                &pool[rng.gen_range(0..pool.len())]
            };
            words.push(w.as_str());
        }
        words.join(" ")
    }
}

fn class_id(class: usize) -> String {
    format!("c{class:03}")
}

/// Deterministically generate a toy corpus: `n_classes * samples_per_class`
/// training samples plus held-out retrieval and classification eval tasks.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec) -> Result<ToyCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = VocabPartition::build(spec);

    let mut train = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for class in 0..spec.n_classes {
        for _ in 0..spec.samples_per_class {
            let query = vocab.sample_doc(class, spec, &mut rng);
            let positive = vocab.sample_doc(class, spec, &mut rng);
            let mut other = rng.gen_range(0..spec.n_classes - 1);
            if other >= class {
                other += 1;
            }
            let negative = vocab.sample_doc(other, spec, &mut rng);
            train.push(TrainingSample {
                query,
                instruction: TOY_INSTRUCTION.to_string(),
                task_tag: TaskTag::Retrieval,
                positive: Document {
                    text: positive,
                    class_id: class_id(class),
                },
                negatives: vec![Document {
                    text: negative,
                    class_id: class_id(other),
                }],
            });
        }
    }

    let mut queries = Vec::new();
    let mut corpus = Vec::new();
    let mut relevance: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut doc_ids_by_class: Vec<Vec<String>> = vec![Vec::new(); spec.n_classes];
    for class in 0..spec.n_classes {
        for i in 0..EVAL_DOCS_PER_CLASS {
            let id = format!("d{:04}", class * EVAL_DOCS_PER_CLASS + i);
            corpus.push(CorpusDoc {
                id: id.clone(),
                text: vocab.sample_doc(class, spec, &mut rng),
            });
            doc_ids_by_class[class].push(id);
        }
    }
    for class in 0..spec.n_classes {
        for i in 0..EVAL_QUERIES_PER_CLASS {
            let id = format!("q{:04}", class * EVAL_QUERIES_PER_CLASS + i);
            queries.push(RetrievalQuery {
                id: id.clone(),
                text: vocab.sample_doc(class, spec, &mut rng),
                instruction: TOY_INSTRUCTION.to_string(),
            });
            relevance.insert(id, doc_ids_by_class[class].iter().cloned().collect());
        }
    }
    let retrieval = RetrievalTask::new(queries, corpus, relevance)?;

    let mut items = Vec::new();
    for class in 0..spec.n_classes {
        for _ in 0..CLASSIFICATION_ITEMS_PER_CLASS {
            items.push(ClassificationItem {
                text: vocab.sample_doc(class, spec, &mut rng),
                label: class_id(class),
            });
        }
    }
    let labels = (0..spec.n_classes)
        .map(|class| ClassLabel {
            id: class_id(class),
            text: vocab.sample_doc(class, spec, &mut rng),
        })
        .collect();
    let classification = ClassificationTask::new(items, labels)?;

    Ok(ToyCorpus {
        train,
        retrieval,
        classification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn sample_json(pos_class: &str, neg_class: &str) -> String {
        format!(
            r#"{{"query":"q","instruction":"i","task_tag":"retrieval","positive":{{"text":"p","class_id":"{pos_class}"}},"negatives":[{{"text":"n","class_id":"{neg_class}"}}]}}"#
        )
    }

    #[test]
    fn load_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let lines = [
            sample_json("a", "b"),
            sample_json("c", "d"),
            sample_json("e", "f"),
        ];
        std::fs::write(&path, lines.join("\n")).unwrap();
        let samples = load_samples(&path).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].positive.class_id, "a");
        assert_eq!(samples[2].positive.class_id, "e");
    }

    #[test]
    fn load_rejects_shared_class_naming_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let lines = [sample_json("a", "b"), sample_json("x", "x")];
        std::fs::write(&path, lines.join("\n")).unwrap();
        let err = load_samples(&path).unwrap_err();
        match err {
            Error::InvalidSample { line, violation } => {
                assert_eq!(line, 2);
                assert!(violation.contains("class equals positive"), "{violation}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_empty_file_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_samples(&path).unwrap().is_empty());
    }

    #[test]
    fn load_assigns_synthetic_ids_for_null_classes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let line = r#"{"query":"q","instruction":"","task_tag":"retrieval","positive":{"text":"Some Passage","class_id":null},"negatives":[{"text":"some  passage","class_id":null}]}"#;
        std::fs::write(&path, line).unwrap();
        // Identical normalized text collapses to one synthetic class, which
        // then violates the positive/negative disjointness constraint.
        let err = load_samples(&path).unwrap_err();
        assert!(matches!(err, Error::InvalidSample { line: 1, .. }));
    }

    #[test]
    fn validate_flags_empty_query_and_shared_class() {
        let mut s = TrainingSample {
            query: "q".into(),
            instruction: "".into(),
            task_tag: TaskTag::Retrieval,
            positive: Document {
                text: "p".into(),
                class_id: "a".into(),
            },
            negatives: vec![Document {
                text: "n".into(),
                class_id: "b".into(),
            }],
        };
        assert!(validate_sample(&s).is_empty());
        s.query = " ".into();
        assert_eq!(validate_sample(&s), vec!["query: empty".to_string()]);
        s.query = "q".into();
        s.negatives[0].class_id = "a".into();
        assert_eq!(
            validate_sample(&s),
            vec!["negatives[0]: class equals positive".to_string()]
        );
    }

    #[test]
    fn round_trip_is_semantically_identical() {
        let corpus = generate_toy_corpus(&ToyCorpusSpec {
            n_classes: 4,
            samples_per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        save_samples(&path, &corpus.train).unwrap();
        let loaded = load_samples(&path).unwrap();
        assert_eq!(loaded, corpus.train);
        for s in &loaded {
            assert!(validate_sample(s).is_empty());
        }
    }

    #[test]
    fn toy_corpus_is_deterministic() {
        let spec = ToyCorpusSpec::default();
        let a = generate_toy_corpus(&spec).unwrap();
        let b = generate_toy_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.retrieval.queries, b.retrieval.queries);
        assert_eq!(a.retrieval.corpus, b.retrieval.corpus);
        assert_eq!(a.retrieval.relevance, b.retrieval.relevance);
    }

    #[test]
    fn zero_overlap_keeps_class_tokens_disjoint() {
        let spec = ToyCorpusSpec {
            n_classes: 2,
            samples_per_class: 20,
            vocab_size: 40,
            class_overlap: 0.0,
            ..Default::default()
        };
        let corpus = generate_toy_corpus(&spec).unwrap();
        let mut tokens_by_class: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for s in &corpus.train {
            let entry = tokens_by_class.entry(s.positive.class_id.clone()).or_default();
            entry.extend(s.query.split(' ').map(String::from));
            entry.extend(s.positive.text.split(' ').map(String::from));
        }
        let classes: Vec<_> = tokens_by_class.values().collect();
        assert_eq!(classes.len(), 2);
        assert!(classes[0].is_disjoint(classes[1]));
    }

    #[test]
    fn toy_corpus_counts_match_spec_arithmetic() {
        let spec = ToyCorpusSpec {
            seed: 1,
            n_classes: 32,
            samples_per_class: 64,
            ..Default::default()
        };
        let corpus = generate_toy_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), 2048);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = ToyCorpusSpec {
            n_classes: 1,
            ..Default::default()
        };
        assert!(generate_toy_corpus(&spec).is_err());
    }

    #[test]
    fn general_class_id_collapses_duplicates() {
        assert_eq!(general_class_id("Foo  Bar"), general_class_id("foo bar"));
        assert_ne!(general_class_id("foo bar"), general_class_id("foo baz"));
    }
}
