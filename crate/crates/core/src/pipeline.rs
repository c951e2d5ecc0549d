//! End-to-end stages shared by the CLI and the test suites: featurize,
//! train, predict, score baselines and evaluate.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    cluster, discrete_semantic_entropy, kle_entropy, semantic_entropy, sequence_score,
    similarity_matrix, Answers, Clustering, KleKernel, PairwiseJudge, DEFAULT_HEAT_T,
    DEFAULT_MATERN_KAPPA, DEFAULT_MATERN_NU, DEFAULT_TAU,
};
use crate::embedder::EmbeddingSet;
use crate::error::{Error, Result};
use crate::gpc::{GpcModel, KernelSpec, Prediction};
use crate::linalg::Matrix;
use crate::metrics::{
    calibration_map, evaluate, filtered_report, roc_points, EvalReport, ScoreDirection,
    ScoredRecord,
};
use crate::parallel::try_ordered_map;
use crate::records::GenerationRecord;
use crate::spectral::{
    cos_eigenscore, cov_eigenscore, gram, spectrum_of, umpire_variant, SpectrumVector,
    DEFAULT_ALPHA,
};

/// Every uncertainty method the evaluator knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Sgpu,
    Pe,
    Se,
    Dse,
    KleHeat,
    KleMatern,
    CovEig,
    CosEig,
    Umpire,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Sgpu,
        Method::Pe,
        Method::Se,
        Method::Dse,
        Method::KleHeat,
        Method::KleMatern,
        Method::CovEig,
        Method::CosEig,
        Method::Umpire,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgpu => "sgpu",
            Method::Pe => "pe",
            Method::Se => "se",
            Method::Dse => "dse",
            Method::KleHeat => "kle-heat",
            Method::KleMatern => "kle-matern",
            Method::CovEig => "cov-eig",
            Method::CosEig => "cos-eig",
            Method::Umpire => "umpire",
        }
    }

    /// Raw-score orientation before calibration.
    pub fn direction(self) -> ScoreDirection {
        match self {
            Method::Sgpu => ScoreDirection::HigherConfident,
            _ => ScoreDirection::HigherUncertain,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown method {s:?}")))
    }
}

/// Parses a comma-separated method list, keeping order and dropping repeats.
pub fn parse_methods(list: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Method = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Argument("empty method list".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub alpha: f64,
    pub judge: PairwiseJudge,
    pub kle_t: f64,
    pub matern_nu: f64,
    pub matern_kappa: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            judge: PairwiseJudge::CosineThreshold { tau: DEFAULT_TAU },
            kle_t: DEFAULT_HEAT_T,
            matern_nu: DEFAULT_MATERN_NU,
            matern_kappa: DEFAULT_MATERN_KAPPA,
        }
    }
}

/// Gram eigenspectrum of every record, in record order.
pub fn featurize(embeddings: &[EmbeddingSet], parallelism: usize) -> Result<Vec<SpectrumVector>> {
    try_ordered_map(embeddings, parallelism, |e| spectrum_of(&e.record_id, &e.matrix))
}

fn label_of(record: &GenerationRecord) -> Result<u8> {
    record
        .label
        .ok_or_else(|| Error::Validation(format!("record {:?} has no label", record.id)))
}

/// Joins spectra with record labels by id, in spectrum order.
pub fn labeled_features(
    spectra: &[SpectrumVector],
    records: &[GenerationRecord],
) -> Result<(Matrix, Vec<u8>)> {
    let by_id: HashMap<&str, &GenerationRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut labels = Vec::with_capacity(spectra.len());
    for s in spectra {
        let r = by_id
            .get(s.record_id.as_str())
            .ok_or_else(|| Error::Join(format!("no record for spectrum {:?}", s.record_id)))?;
        labels.push(label_of(r)?);
    }
    let rows: Vec<&[f64]> = spectra.iter().map(|s| s.lambda.as_slice()).collect();
    Ok((Matrix::from_rows(&rows)?, labels))
}

pub fn train(
    spectra: &[SpectrumVector],
    records: &[GenerationRecord],
    grid: &[KernelSpec],
    parallelism: usize,
) -> Result<GpcModel> {
    let (features, labels) = labeled_features(spectra, records)?;
    GpcModel::fit_with_workers(&features, &labels, grid, parallelism)
}

pub fn predict_all(
    model: &GpcModel,
    spectra: &[SpectrumVector],
    parallelism: usize,
) -> Result<Vec<Prediction>> {
    if let Some(s) = spectra.iter().find(|s| s.n() != model.n()) {
        return Err(Error::Dimension(format!(
            "model was trained with N={} but spectrum {:?} has N={}",
            model.n(),
            s.record_id,
            s.n()
        )));
    }
    try_ordered_map(spectra, parallelism, |s| model.predict(&s.lambda))
}

/// Meaning clusters of one record's answers.
pub fn cluster_record(
    record: &GenerationRecord,
    embeddings: &EmbeddingSet,
    judge: &PairwiseJudge,
) -> Result<Clustering> {
    let texts = record.texts();
    let answers = Answers {
        texts: &texts,
        embeddings: Some(&embeddings.matrix),
    };
    cluster(&record.id, &answers, judge)
}

/// Raw baseline scores (higher = more uncertain) of one record for every
/// non-SGPU method in `methods`.
pub fn baseline_scores(
    record: &GenerationRecord,
    embeddings: &EmbeddingSet,
    methods: &[Method],
    cfg: &BaselineConfig,
) -> Result<BTreeMap<Method, f64>> {
    let needs = |m: Method| methods.contains(&m);
    let texts = record.texts();
    let answers = Answers {
        texts: &texts,
        embeddings: Some(&embeddings.matrix),
    };
    let seq_lp = record.sequence_logprobs();
    let mut out = BTreeMap::new();

    if needs(Method::Pe) {
        out.insert(Method::Pe, sequence_score(record)?.predictive_entropy);
    }
    if needs(Method::Se) || needs(Method::Dse) {
        let c = cluster(&record.id, &answers, &cfg.judge)?;
        if needs(Method::Se) {
            out.insert(Method::Se, semantic_entropy(&c, &seq_lp)?);
        }
        if needs(Method::Dse) {
            out.insert(Method::Dse, discrete_semantic_entropy(&c));
        }
    }
    if needs(Method::KleHeat) || needs(Method::KleMatern) {
        let w = similarity_matrix(&answers, &cfg.judge)?;
        if needs(Method::KleHeat) {
            out.insert(Method::KleHeat, kle_entropy(&w, KleKernel::Heat { t: cfg.kle_t })?);
        }
        if needs(Method::KleMatern) {
            let kernel = KleKernel::Matern {
                nu: cfg.matern_nu,
                kappa: cfg.matern_kappa,
            };
            out.insert(Method::KleMatern, kle_entropy(&w, kernel)?);
        }
    }
    if needs(Method::CovEig) {
        out.insert(
            Method::CovEig,
            cov_eigenscore(&record.id, &embeddings.matrix, cfg.alpha)?.value,
        );
    }
    if needs(Method::CosEig) || needs(Method::Umpire) {
        let g = gram(&embeddings.matrix)?;
        if needs(Method::CosEig) {
            out.insert(Method::CosEig, cos_eigenscore(&record.id, &g, cfg.alpha)?.value);
        }
        if needs(Method::Umpire) {
            out.insert(
                Method::Umpire,
                umpire_variant(&record.id, &g, &seq_lp, cfg.alpha)?.value,
            );
        }
    }
    Ok(out)
}

/// One line of a baseline-scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLine {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
}

pub fn score_all_baselines(
    records: &[GenerationRecord],
    embeddings: &[EmbeddingSet],
    methods: &[Method],
    cfg: &BaselineConfig,
    parallelism: usize,
) -> Result<Vec<BaselineLine>> {
    if records.len() != embeddings.len() {
        return Err(Error::Join(format!(
            "{} records but {} embedding sets",
            records.len(),
            embeddings.len()
        )));
    }
    let pairs: Vec<(&GenerationRecord, &EmbeddingSet)> = records.iter().zip(embeddings).collect();
    try_ordered_map(&pairs, parallelism, |(r, e)| {
        let scores = baseline_scores(r, e, methods, cfg)?;
        Ok(BaselineLine {
            id: r.id.clone(),
            scores: scores
                .into_iter()
                .map(|(m, v)| (m.name().to_string(), v))
                .collect(),
        })
    })
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

/// Writes serializable items one JSON object per line.
pub fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Inputs to [`evaluate_methods`], all keyed by record id.
#[derive(Debug, Default)]
pub struct EvaluationInputs<'a> {
    pub predictions: Option<&'a [PredictionLine]>,
    pub baselines: Option<&'a [BaselineLine]>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reports: Vec<EvalReport>,
    pub roc: Vec<(String, Vec<(f64, f64)>)>,
}

/// Scores every requested method on `records` (which must carry labels).
///
/// SGPU confidences are the predicted probabilities with their unsafe
/// flags; baseline raw scores are negated and min-max mapped to `[0, 1]`.
pub fn evaluate_methods(
    records: &[GenerationRecord],
    methods: &[Method],
    inputs: &EvaluationInputs<'_>,
) -> Result<Evaluation> {
    let labels: Vec<(&str, u8)> = records
        .iter()
        .map(|r| Ok((r.id.as_str(), label_of(r)?)))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    let mut roc = Vec::new();

    for &m in methods {
        let scored: Vec<ScoredRecord> = if m == Method::Sgpu {
            let preds = inputs
                .predictions
                .ok_or_else(|| Error::Argument("sgpu evaluation needs predictions".into()))?;
            let by_id: HashMap<&str, &Prediction> =
                preds.iter().map(|p| (p.id.as_str(), &p.prediction)).collect();
            labels
                .iter()
                .map(|&(id, label)| {
                    let p = by_id
                        .get(id)
                        .ok_or_else(|| Error::Join(format!("no prediction for record {id:?}")))?;
                    Ok(ScoredRecord {
                        record_id: id.to_string(),
                        confidence: p.probability,
                        label,
                        unsafe_: Some(p.unsafe_),
                    })
                })
                .collect::<Result<_>>()?
        } else {
            let lines = inputs
                .baselines
                .ok_or_else(|| Error::Argument(format!("{m} evaluation needs baseline scores")))?;
            let by_id: HashMap<&str, &BaselineLine> =
                lines.iter().map(|b| (b.id.as_str(), b)).collect();
            let raw: Vec<f64> = labels
                .iter()
                .map(|&(id, _)| {
                    by_id
                        .get(id)
                        .and_then(|b| b.scores.get(m.name()))
                        .copied()
                        .ok_or_else(|| Error::Join(format!("no {m} score for record {id:?}")))
                })
                .collect::<Result<_>>()?;
            calibration_map(&raw, m.direction())
                .into_iter()
                .zip(&labels)
                .map(|(c, &(id, label))| ScoredRecord::new(id, c, label))
                .collect()
        };
        let report = if m == Method::Sgpu {
            filtered_report(m.name(), &scored)?
        } else {
            evaluate(m.name(), &scored)?
        };
        roc.push((m.name().to_string(), roc_points(&scored)));
        reports.push(report);
    }
    Ok(Evaluation { reports, roc })
}
