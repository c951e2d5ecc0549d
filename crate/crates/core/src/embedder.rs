//! Sentence embeddings for every sampled answer.
//!
//! The cache file is the primary source; an external encoder service is
//! the fallback. Rows are always stored unit-norm so that downstream Gram
//! matrices have a unit diagonal whatever the encoder returned.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{token_from_env, JsonClient, RetryPolicy};
use crate::linalg::{norm, Matrix};
use crate::records::GenerationRecord;

/// Drift from unit norm tolerated (and silently corrected) when loading a cache.
pub const CACHE_NORM_TOLERANCE: f64 = 1e-6;
/// Tolerance of the unit-norm invariant on a constructed set.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// The N×d embedding matrix of one record, one unit-norm row per answer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub record_id: String,
    pub matrix: Matrix,
    pub encoder_id: String,
}

impl EmbeddingSet {
    /// Normalizes `rows` and wraps them.
    pub fn from_raw(record_id: &str, rows: &[Vec<f64>], encoder_id: &str) -> Result<Self> {
        let raw = Matrix::from_rows(rows)?;
        let matrix = normalize_rows(&raw).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("record {record_id:?}: {msg}")),
            other => other,
        })?;
        Ok(Self {
            record_id: record_id.to_string(),
            matrix,
            encoder_id: encoder_id.to_string(),
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(matrix: &Matrix) -> Result<Matrix> {
    let mut out = matrix.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Validation(format!(
                "row {i} has norm {n} and cannot be normalized"
            )));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

/// Anything that turns a batch of texts into vectors, in input order.
pub trait Encoder: Sync {
    fn encoder_id(&self) -> &str;
    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone)]
pub struct EncoderEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    pub timeout: Duration,
    pub max_batch: usize,
    pub in_flight: usize,
    pub retry: RetryPolicy,
}

impl EncoderEndpoint {
    pub fn new(base_url: &str, model_name: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            auth_token_env: "SGUQ_ENCODER_TOKEN".to_string(),
            timeout: Duration::from_secs(30),
            max_batch: 64,
            in_flight: 1,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_batch == 0 {
            return Err(Error::Argument("encoder max_batch must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(Error::Argument("encoder timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedItem {
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

/// Encoder reached over HTTP with the `{model, input}` → `{data: [{index, embedding}]}` protocol.
pub struct HttpEncoder {
    client: JsonClient,
    model: String,
}

impl HttpEncoder {
    pub fn new(endpoint: &EncoderEndpoint) -> Result<Self> {
        endpoint.validate()?;
        Ok(Self {
            client: JsonClient::new(
                &endpoint.base_url,
                token_from_env(&endpoint.auth_token_env),
                endpoint.timeout,
                endpoint.retry,
            ),
            model: endpoint.model_name.clone(),
        })
    }
}

impl Encoder for HttpEncoder {
    fn encoder_id(&self) -> &str {
        &self.model
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let req = EmbedRequest {
            model: &self.model,
            input: texts,
        };
        let resp: EmbedResponse = self.client.post(&req, "encoder")?;
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for item in resp.data {
            let slot = out.get_mut(item.index).ok_or_else(|| {
                Error::Validation(format!(
                    "encoder returned index {} for a batch of {}",
                    item.index,
                    texts.len()
                ))
            })?;
            *slot = Some(item.embedding);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| Error::Validation(format!("encoder response is missing index {i}")))
            })
            .collect()
    }
}

/// Embeds every answer of every record through an HTTP encoder.
pub fn embed_records(
    records: &[GenerationRecord],
    endpoint: &EncoderEndpoint,
) -> Result<Vec<EmbeddingSet>> {
    let encoder = HttpEncoder::new(endpoint)?;
    embed_records_with(records, &encoder, endpoint.max_batch, endpoint.in_flight)
}

/// Embeds with any [`Encoder`], sending at most `max_batch` texts per call
/// and keeping up to `in_flight` calls running at once.
pub fn embed_records_with(
    records: &[GenerationRecord],
    encoder: &dyn Encoder,
    max_batch: usize,
    in_flight: usize,
) -> Result<Vec<EmbeddingSet>> {
    if max_batch == 0 {
        return Err(Error::Argument("max_batch must be >= 1".into()));
    }
    // (record index, answer text) in record order.
    let flat: Vec<(usize, String)> = records
        .iter()
        .enumerate()
        .flat_map(|(ri, r)| r.generations.iter().map(move |g| (ri, g.text.clone())))
        .collect();
    let batches: Vec<&[(usize, String)]> = flat.chunks(max_batch).collect();
    let batch_ids = |batch: &[(usize, String)]| -> String {
        let mut ids: Vec<&str> = batch.iter().map(|(ri, _)| records[*ri].id.as_str()).collect();
        ids.dedup();
        ids.join(",")
    };

    let mut results: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..batches.len()).map(|_| None).collect();
    for wave in (0..batches.len()).collect::<Vec<_>>().chunks(in_flight.max(1)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&b| {
                    let texts: Vec<String> = batches[b].iter().map(|(_, t)| t.clone()).collect();
                    (b, s.spawn(move || encoder.encode(&texts)))
                })
                .collect();
            for (b, h) in handles {
                let r = h.join().unwrap_or_else(|_| {
                    Err(Error::Transport {
                        context: "encoder".into(),
                        message: "worker panicked".into(),
                    })
                });
                results[b] = Some(r);
            }
        });
    }

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(flat.len());
    for (b, res) in results.into_iter().enumerate() {
        let batch = batches[b];
        let got = res.expect("every batch ran").map_err(|e| match e {
            Error::Transport { message, .. } => Error::Transport {
                context: format!("encoding records {}", batch_ids(batch)),
                message,
            },
            other => other,
        })?;
        if got.len() != batch.len() {
            return Err(Error::Validation(format!(
                "encoder returned {} vectors for {} texts (records {})",
                got.len(),
                batch.len(),
                batch_ids(batch)
            )));
        }
        vectors.extend(got);
    }

    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    let mut out = Vec::with_capacity(records.len());
    let mut cursor = 0;
    for r in records {
        let n = r.generations.len();
        let rows = &vectors[cursor..cursor + n];
        cursor += n;
        if let Some(bad) = rows.iter().find(|v| v.len() != dim) {
            return Err(Error::Validation(format!(
                "dimension mismatch for record {:?}: got {}, expected {dim}",
                r.id,
                bad.len()
            )));
        }
        out.push(EmbeddingSet::from_raw(&r.id, rows, encoder.encoder_id())?);
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheLine {
    id: String,
    encoder: String,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

pub fn save_cache(sets: &[EmbeddingSet], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sets {
        let line = CacheLine {
            id: s.record_id.clone(),
            encoder: s.encoder_id.clone(),
            dim: s.dim(),
            embeddings: s.matrix.to_rows(),
        };
        serde_json::to_writer(&mut w, &line).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_cache<R: BufRead>(reader: R) -> Result<Vec<EmbeddingSet>> {
    let mut out: Vec<EmbeddingSet> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let c: CacheLine =
            serde_json::from_str(&line).map_err(|e| Error::parse(lineno, e.to_string()))?;
        if c.embeddings.iter().any(|r| r.len() != c.dim) {
            return Err(Error::parse(
                lineno,
                format!("record {:?}: row length differs from dim {}", c.id, c.dim),
            ));
        }
        if let Some(first) = out.first() {
            if first.dim() != c.dim {
                return Err(Error::Validation(format!(
                    "record {:?} has dim {}, dataset dim is {}",
                    c.id,
                    c.dim,
                    first.dim()
                )));
            }
        }
        for (i, row) in c.embeddings.iter().enumerate() {
            let n = norm(row);
            if (n - 1.0).abs() > CACHE_NORM_TOLERANCE {
                return Err(Error::Validation(format!(
                    "record {:?}, row {i}: cached norm {n} is not unit",
                    c.id
                )));
            }
        }
        out.push(EmbeddingSet::from_raw(&c.id, &c.embeddings, &c.encoder)?);
    }
    Ok(out)
}

pub fn load_cache(path: &Path) -> Result<Vec<EmbeddingSet>> {
    parse_cache(BufReader::new(File::open(path)?))
}

/// Orders cached sets to match `records`, checking ids and row counts.
pub fn join_with_records(
    records: &[GenerationRecord],
    sets: Vec<EmbeddingSet>,
) -> Result<Vec<EmbeddingSet>> {
    let wanted: std::collections::HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut by_id: HashMap<String, EmbeddingSet> = HashMap::with_capacity(sets.len());
    for s in sets {
        if !wanted.contains(s.record_id.as_str()) {
            return Err(Error::Join(format!(
                "embedding cache has unknown record id {:?}",
                s.record_id
            )));
        }
        by_id.insert(s.record_id.clone(), s);
    }
    records
        .iter()
        .map(|r| {
            let s = by_id
                .remove(&r.id)
                .ok_or_else(|| Error::Join(format!("no embeddings for record {:?}", r.id)))?;
            if s.len() != r.generations.len() {
                return Err(Error::Join(format!(
                    "record {:?}: {} embeddings for {} generations",
                    r.id,
                    s.len(),
                    r.generations.len()
                )));
            }
            Ok(s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::Generation;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn record(id: &str, n: usize) -> GenerationRecord {
        GenerationRecord {
            id: id.into(),
            question: "q".into(),
            image_ref: None,
            reference_answer: "r".into(),
            generations: (0..n)
                .map(|j| Generation {
                    text: format!("{id}-{j}"),
                    token_logprobs: vec![-0.3],
                    judge_label: None,
                })
                .collect(),
            label: None,
        }
    }

    /// Deterministic stub: vector derived from the text bytes.
    struct StubEncoder {
        dim: usize,
        calls: AtomicUsize,
        max_seen: AtomicUsize,
        zero_for: Option<String>,
        wide_for: Option<String>,
    }

    impl StubEncoder {
        fn new(dim: usize) -> Self {
            Self {
                dim,
                calls: AtomicUsize::new(0),
                max_seen: AtomicUsize::new(0),
                zero_for: None,
                wide_for: None,
            }
        }
    }

    impl Encoder for StubEncoder {
        fn encoder_id(&self) -> &str {
            "stub"
        }

        fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.max_seen.fetch_max(texts.len(), Ordering::SeqCst);
            Ok(texts
                .iter()
                .map(|t| {
                    if Some(t) == self.zero_for.as_ref() {
                        return vec![0.0; self.dim];
                    }
                    let dim = if Some(t) == self.wide_for.as_ref() {
                        self.dim + 1
                    } else {
                        self.dim
                    };
                    let seed: u32 = t.bytes().map(u32::from).sum();
                    (0..dim).map(|k| 1.0 + ((seed as usize + 3 * k) % 7) as f64).collect()
                })
                .collect())
        }
    }

    #[test]
    fn normalize_examples() {
        let m = Matrix::from_rows(&[[3.0, 4.0], [1.0, 0.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((n[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[1.0, 0.0]);

        let z = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0]]).unwrap();
        let err = normalize_rows(&z).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn stub_embedding_is_unit_norm_and_batched() {
        let recs = vec![record("a", 20), record("b", 20)];
        let enc = StubEncoder::new(8);
        let sets = embed_records_with(&recs, &enc, 7, 3).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[1].record_id, "b");
        for s in &sets {
            assert_eq!((s.len(), s.dim()), (20, 8));
            for row in s.matrix.row_iter() {
                assert!((norm(row) - 1.0).abs() < 1e-12);
            }
        }
        assert!(enc.max_seen.load(Ordering::SeqCst) <= 7);
        assert_eq!(enc.calls.load(Ordering::SeqCst), 6);
        let again = embed_records_with(&recs, &StubEncoder::new(8), 5, 1).unwrap();
        assert_eq!(sets, again);
    }

    #[test]
    fn zero_vector_names_record() {
        let recs = vec![record("a", 3), record("b", 3)];
        let mut enc = StubEncoder::new(4);
        enc.zero_for = Some("b-1".into());
        let err = embed_records_with(&recs, &enc, 4, 1).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("\"b\""), "{err}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let recs = vec![record("a", 3), record("b", 3)];
        let mut enc = StubEncoder::new(4);
        enc.wide_for = Some("b-2".into());
        let err = embed_records_with(&recs, &enc, 10, 1).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"), "{err}");
    }

    fn unit_set(id: &str) -> EmbeddingSet {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|k| ((i * 5 + k) as f64 * 0.37).sin()).collect())
            .collect();
        EmbeddingSet::from_raw(id, &rows, "enc").unwrap()
    }

    #[test]
    fn cache_round_trip() {
        let sets: Vec<_> = (0..5).map(|i| unit_set(&format!("r{i}"))).collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.jsonl");
        save_cache(&sets, &p).unwrap();
        let back = load_cache(&p).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in sets.iter().zip(&back) {
            assert_eq!(a.record_id, b.record_id);
            for (x, y) in a.matrix.as_slice().iter().zip(b.matrix.as_slice()) {
                assert!((x - y).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn cache_small_drift_is_renormalized() {
        let s = 1.000_000_1;
        let line = format!(
            r#"{{"id":"x","encoder":"e","dim":2,"embeddings":[[{},0.0],[0.0,{}]]}}"#,
            s, s
        );
        let sets = parse_cache(line.as_bytes()).unwrap();
        assert!((norm(sets[0].matrix.row(0)) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cache_large_drift_rejected() {
        let line = r#"{"id":"x","encoder":"e","dim":2,"embeddings":[[0.5,0.0],[0.0,1.0]]}"#;
        assert!(matches!(parse_cache(line.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn corrupt_cache_is_parse_error() {
        let line = r#"{"id":"x","encoder":"e","dim":2,"embeddings":[[1.0,0.0],"#;
        assert!(matches!(parse_cache(line.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn join_checks_ids() {
        let recs = vec![record("r0", 4), record("r1", 4)];
        let sets = vec![unit_set("r1"), unit_set("r0")];
        let joined = join_with_records(&recs, sets).unwrap();
        assert_eq!(joined[0].record_id, "r0");

        let err = join_with_records(&recs, vec![unit_set("r0"), unit_set("zz")]).unwrap_err();
        assert!(matches!(err, Error::Join(_)));
        let err = join_with_records(&recs, vec![unit_set("r0")]).unwrap_err();
        assert!(matches!(err, Error::Join(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_gram_has_unit_diagonal(
                rows in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 6), 1..8)
            ) {
                prop_assume!(rows.iter().all(|r| norm(r) > 1e-3));
                let m = normalize_rows(&Matrix::from_rows(&rows).unwrap()).unwrap();
                let g = m.outer_gram();
                for d in g.diag() {
                    prop_assert!((d - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
