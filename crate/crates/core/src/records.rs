//! Generation records: the on-disk line format, ingestion checks,
//! majority-vote truthfulness labels and seeded train/test splits.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of sampled answers per context.
pub const DEFAULT_SAMPLE_COUNT: usize = 20;

/// One sampled answer with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generation {
    pub text: String,
    /// Natural-log conditional probability of each generated token.
    pub token_logprobs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_label: Option<u8>,
}

impl Generation {
    /// Mean token log-probability; zero for an empty answer.
    pub fn mean_logprob(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            0.0
        } else {
            self.token_logprobs.iter().sum::<f64>() / self.token_logprobs.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub reference_answer: String,
    pub generations: Vec<Generation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

impl GenerationRecord {
    pub fn sample_count(&self) -> usize {
        self.generations.len()
    }

    /// Length-normalized sequence log-probability of every answer.
    pub fn sequence_logprobs(&self) -> Vec<f64> {
        self.generations.iter().map(Generation::mean_logprob).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.generations.iter().map(|g| g.text.as_str()).collect()
    }

    /// Checks the per-record invariants that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.label {
            if l > 1 {
                return Err(Error::Validation(format!(
                    "record {:?}: label must be 0 or 1, got {l}",
                    self.id
                )));
            }
        }
        for (j, g) in self.generations.iter().enumerate() {
            if let Some(l) = g.judge_label {
                if l > 1 {
                    return Err(Error::Validation(format!(
                        "record {:?}, answer {j}: judge_label must be 0 or 1, got {l}",
                        self.id
                    )));
                }
            }
            if !g.text.is_empty() && g.token_logprobs.is_empty() {
                return Err(Error::Validation(format!(
                    "record {:?}, answer {j}: non-empty text without token log-probabilities",
                    self.id
                )));
            }
            if let Some(bad) = g
                .token_logprobs
                .iter()
                .find(|lp| lp.is_nan() || **lp > 0.0)
            {
                return Err(Error::Validation(format!(
                    "record {:?}, answer {j}: token log-probability {bad} is not <= 0",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub sample_count: usize,
    pub record_count: usize,
    /// Provenance only (temperature, top-p, ...).
    #[serde(default)]
    pub generation_config: BTreeMap<String, String>,
}

/// Validates a whole dataset and derives its manifest.
///
/// `N` comes from `expected_n` when given, otherwise from the first record.
pub fn validate_dataset(
    name: &str,
    records: &[GenerationRecord],
    expected_n: Option<usize>,
) -> Result<DatasetManifest> {
    let first = records
        .first()
        .ok_or_else(|| Error::Validation("empty dataset".into()))?;
    let n = expected_n.unwrap_or(first.sample_count());
    if n < 2 {
        return Err(Error::Validation(format!(
            "sample count must be at least 2, got {n}"
        )));
    }
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if r.sample_count() != n {
            return Err(Error::Validation(format!(
                "record {:?} has {} generations, expected {n}",
                r.id,
                r.sample_count()
            )));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!("duplicate record id {:?}", r.id)));
        }
    }
    Ok(DatasetManifest {
        name: name.to_string(),
        sample_count: n,
        record_count: records.len(),
        generation_config: BTreeMap::new(),
    })
}

/// Parses line-delimited records; blank lines are ignored.
pub fn parse_records<R: BufRead>(reader: R) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_records(
    path: &Path,
    expected_n: Option<usize>,
) -> Result<(Vec<GenerationRecord>, DatasetManifest)> {
    let reader = BufReader::new(File::open(path)?);
    let records = parse_records(reader)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let manifest = validate_dataset(&name, &records, expected_n)?;
    Ok((records, manifest))
}

/// Canonical single-line serialization of one record.
pub fn record_to_line(record: &GenerationRecord) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", record_to_line(r))?;
    }
    w.flush()?;
    Ok(())
}

/// Record-level label by majority vote over per-answer judge labels.
///
/// Ties resolve to 0.
pub fn majority_label(record: &GenerationRecord) -> Result<u8> {
    let mut ones = 0usize;
    let mut zeros = 0usize;
    for (j, g) in record.generations.iter().enumerate() {
        match g.judge_label {
            Some(1) => ones += 1,
            Some(_) => zeros += 1,
            None => {
                return Err(Error::Precondition(format!(
                    "record {:?}: answer {j} has no judge_label",
                    record.id
                )))
            }
        }
    }
    Ok(u8::from(ones > zeros))
}

/// Seeded shuffle followed by a `⌈M·train_fraction⌉` / remainder partition.
pub fn split(
    records: &[GenerationRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<GenerationRecord>, Vec<GenerationRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if records.is_empty() {
        return Err(Error::Precondition("cannot split an empty dataset".into()));
    }
    let m = records.len();
    // The epsilon absorbs products like 1500 * (2/3) landing just under an integer.
    let n_train = ((m as f64 * train_fraction) - 1e-9).ceil().clamp(0.0, m as f64) as usize;
    let order = shuffled_indices(m, seed);
    let train = order[..n_train].iter().map(|&i| records[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, test))
}

/// Deterministic permutation of `0..m` driven by `seed`.
pub fn shuffled_indices(m: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}
