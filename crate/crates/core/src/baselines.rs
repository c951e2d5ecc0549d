//! Token-probability and meaning-cluster uncertainty measures: log
//! perplexity, predictive entropy, semantic entropy (probability-weighted
//! and discrete) and von Neumann entropies of graph kernels.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{token_from_env, JsonClient, RetryPolicy};
use crate::linalg::{default_rotation_budget, dot, symmetric_eigen, Matrix};
use crate::records::GenerationRecord;
use crate::spectral::softmax;

pub const DEFAULT_TAU: f64 = 0.85;
pub const DEFAULT_HEAT_T: f64 = 0.3;
pub const DEFAULT_MATERN_NU: f64 = 1.0;
pub const DEFAULT_MATERN_KAPPA: f64 = 1.0;

/// Negative mean token log-probability of one answer.
pub fn log_perplexity(token_logprobs: &[f64]) -> Result<f64> {
    if token_logprobs.is_empty() {
        return Err(Error::Precondition(
            "log-perplexity of an empty token sequence".into(),
        ));
    }
    if let Some(bad) = token_logprobs.iter().find(|x| !x.is_finite() || **x > 0.0) {
        return Err(Error::Precondition(format!(
            "token log-probability {bad} is not finite and <= 0"
        )));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok(-mean)
}

/// Mean of the per-answer log-perplexities.
pub fn predictive_entropy(per_answer_logppl: &[f64]) -> Result<f64> {
    if per_answer_logppl.is_empty() {
        return Err(Error::Precondition("predictive entropy of zero answers".into()));
    }
    Ok(per_answer_logppl.iter().sum::<f64>() / per_answer_logppl.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub record_id: String,
    pub per_answer_logppl: Vec<f64>,
    pub predictive_entropy: f64,
}

/// Log-perplexities of every answer. An empty answer has no tokens and
/// scores 0.
pub fn sequence_score(record: &GenerationRecord) -> Result<SequenceScore> {
    let per_answer_logppl = record
        .generations
        .iter()
        .map(|g| {
            if g.token_logprobs.is_empty() {
                Ok(0.0)
            } else {
                log_perplexity(&g.token_logprobs)
            }
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Validation(format!("record {:?}: {e}", record.id)))?;
    let predictive_entropy = predictive_entropy(&per_answer_logppl)?;
    Ok(SequenceScore {
        record_id: record.id.clone(),
        per_answer_logppl,
        predictive_entropy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    #[serde(rename = "id")]
    pub record_id: String,
    pub assignment: Vec<usize>,
}

impl Clustering {
    /// Checks that indices are contiguous from 0 and returns K.
    pub fn new(record_id: &str, assignment: Vec<usize>) -> Result<Self> {
        let k = assignment.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; k];
        for &a in &assignment {
            used[a] = true;
        }
        if used.iter().any(|u| !u) {
            return Err(Error::Validation(format!(
                "clustering for {record_id:?} leaves a cluster index unused"
            )));
        }
        Ok(Self {
            record_id: record_id.to_string(),
            assignment,
        })
    }

    pub fn k(&self) -> usize {
        self.assignment.iter().max().map_or(0, |m| m + 1)
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

/// One pairwise comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    /// In `[0, 1]`.
    pub similarity: f64,
    pub equivalent: bool,
}

/// Directional entailment model reached as an external service.
pub trait EntailmentModel: Send + Sync {
    /// Probability that `premise` entails `hypothesis`.
    fn entailment_prob(&self, premise: &str, hypothesis: &str) -> Result<f64>;
}

#[derive(Debug, Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Debug, Deserialize)]
struct NliResponse {
    entailment_prob: f64,
}

pub struct HttpNli {
    client: JsonClient,
}

impl HttpNli {
    pub fn new(url: &str, auth_token_env: &str, timeout: Duration, retry: RetryPolicy) -> Self {
        Self {
            client: JsonClient::new(url, token_from_env(auth_token_env), timeout, retry),
        }
    }
}

impl EntailmentModel for HttpNli {
    fn entailment_prob(&self, premise: &str, hypothesis: &str) -> Result<f64> {
        let resp: NliResponse = self.client.post(
            &NliRequest {
                premise,
                hypothesis,
            },
            "nli",
        )?;
        if !(0.0..=1.0).contains(&resp.entailment_prob) {
            return Err(Error::Validation(format!(
                "nli returned entailment_prob {} outside [0, 1]",
                resp.entailment_prob
            )));
        }
        Ok(resp.entailment_prob)
    }
}

/// Decides whether two answers share a meaning.
#[derive(Clone)]
pub enum PairwiseJudge {
    /// Cosine of unit-norm embeddings, equivalent when `≥ tau`.
    CosineThreshold { tau: f64 },
    /// Bidirectional entailment: equivalent when both directions reach 0.5.
    ExternalNli(Arc<dyn EntailmentModel>),
}

impl std::fmt::Debug for PairwiseJudge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CosineThreshold { tau } => write!(f, "CosineThreshold({tau})"),
            Self::ExternalNli(_) => write!(f, "ExternalNli"),
        }
    }
}

/// Answers of one record as seen by a judge.
#[derive(Debug, Clone, Copy)]
pub struct Answers<'a> {
    pub texts: &'a [&'a str],
    pub embeddings: Option<&'a Matrix>,
}

impl PairwiseJudge {
    pub fn cosine(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Argument(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(Self::CosineThreshold { tau })
    }

    fn check(&self, answers: &Answers<'_>) -> Result<()> {
        if let Self::CosineThreshold { .. } = self {
            let emb = answers.embeddings.ok_or_else(|| {
                Error::Precondition("cosine judge requires embeddings".into())
            })?;
            if emb.rows() != answers.texts.len() {
                return Err(Error::Dimension(format!(
                    "{} embeddings for {} answers",
                    emb.rows(),
                    answers.texts.len()
                )));
            }
        }
        Ok(())
    }

    pub fn compare(&self, answers: &Answers<'_>, a: usize, b: usize) -> Result<Verdict> {
        match self {
            Self::CosineThreshold { tau } => {
                let emb = answers.embeddings.ok_or_else(|| {
                    Error::Precondition("cosine judge requires embeddings".into())
                })?;
                let cos = dot(emb.row(a), emb.row(b)).clamp(-1.0, 1.0);
                Ok(Verdict {
                    similarity: cos.max(0.0),
                    equivalent: cos >= *tau,
                })
            }
            Self::ExternalNli(model) => {
                let (ta, tb) = (answers.texts[a], answers.texts[b]);
                let forward = model.entailment_prob(ta, tb)?;
                let backward = model.entailment_prob(tb, ta)?;
                Ok(Verdict {
                    similarity: 0.5 * (forward + backward),
                    equivalent: forward >= 0.5 && backward >= 0.5,
                })
            }
        }
    }
}

/// Greedy clustering in answer order: an answer joins the first cluster
/// whose first member it is equivalent to, otherwise it opens a new one.
pub fn cluster(record_id: &str, answers: &Answers<'_>, judge: &PairwiseJudge) -> Result<Clustering> {
    judge.check(answers)?;
    let mut leaders: Vec<usize> = Vec::new();
    let mut assignment = Vec::with_capacity(answers.texts.len());
    for j in 0..answers.texts.len() {
        let mut joined = None;
        for (k, &leader) in leaders.iter().enumerate() {
            if judge.compare(answers, leader, j)?.equivalent {
                joined = Some(k);
                break;
            }
        }
        let k = joined.unwrap_or_else(|| {
            leaders.push(j);
            leaders.len() - 1
        });
        assignment.push(k);
    }
    Ok(Clustering {
        record_id: record_id.to_string(),
        assignment,
    })
}

/// Symmetric pairwise similarity matrix with a zero diagonal.
pub fn similarity_matrix(answers: &Answers<'_>, judge: &PairwiseJudge) -> Result<Matrix> {
    judge.check(answers)?;
    let n = answers.texts.len();
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let s = judge.compare(answers, i, j)?.similarity;
            w[(i, j)] = s;
            w[(j, i)] = s;
        }
    }
    Ok(w)
}

fn shannon(probabilities: impl Iterator<Item = f64>) -> f64 {
    -probabilities
        .filter(|p| *p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Entropy over clusters weighted by softmax-normalized sequence
/// log-probabilities.
pub fn semantic_entropy(clustering: &Clustering, seq_logprobs: &[f64]) -> Result<f64> {
    if seq_logprobs.len() != clustering.n() {
        return Err(Error::Dimension(format!(
            "{} log-probabilities for {} clustered answers",
            seq_logprobs.len(),
            clustering.n()
        )));
    }
    let p = softmax(seq_logprobs)?;
    let mut mass = vec![0.0; clustering.k()];
    for (&c, pi) in clustering.assignment.iter().zip(&p) {
        mass[c] += pi;
    }
    Ok(shannon(mass.into_iter()))
}

/// Entropy of the empirical cluster-size distribution.
pub fn discrete_semantic_entropy(clustering: &Clustering) -> f64 {
    let n = clustering.n() as f64;
    shannon(clustering.sizes().into_iter().map(|s| s as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KleKernel {
    /// `exp(-t·L)`
    Heat { t: f64 },
    /// `(2ν/κ²·I + L)^(-ν)`
    Matern { nu: f64, kappa: f64 },
}

impl KleKernel {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            KleKernel::Heat { t } => t > 0.0 && t.is_finite(),
            KleKernel::Matern { nu, kappa } => nu > 0.0 && kappa > 0.0 && nu.is_finite() && kappa.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid kernel parameters {self:?}")))
        }
    }

    /// The kernel as a scalar function of a Laplacian eigenvalue.
    pub fn apply(&self, mu: f64) -> f64 {
        match *self {
            KleKernel::Heat { t } => (-t * mu).exp(),
            KleKernel::Matern { nu, kappa } => (2.0 * nu / (kappa * kappa) + mu).powf(-nu),
        }
    }
}

/// Graph Laplacian `D − W` after removing self-loops.
pub fn laplacian(similarities: &Matrix) -> Matrix {
    let n = similarities.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if i != j {
                let w = similarities[(i, j)];
                l[(i, j)] = -w;
                degree += w;
            }
        }
        l[(i, i)] = degree;
    }
    l
}

/// Von Neumann entropy of the trace-normalized graph kernel built from
/// the Laplacian of `similarities`.
///
/// The kernel is a spectral function of the symmetric Laplacian, so its
/// eigenvalues are the kernel applied to the Laplacian eigenvalues.
pub fn kle_entropy(similarities: &Matrix, kernel: KleKernel) -> Result<f64> {
    kernel.validate()?;
    if !similarities.is_square() {
        return Err(Error::Dimension("similarity matrix must be square".into()));
    }
    let asym = similarities.max_asymmetry();
    if asym > 1e-10 {
        return Err(Error::Precondition(format!(
            "similarity matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let n = similarities.rows();
    for i in 0..n {
        for j in 0..n {
            let w = similarities[(i, j)];
            if i != j && !(0.0..=1.0).contains(&w) {
                return Err(Error::Precondition(format!(
                    "similarity ({i}, {j}) = {w} outside [0, 1]"
                )));
            }
        }
    }
    let l = laplacian(similarities);
    let eig = symmetric_eigen(&l, default_rotation_budget(n))?;
    let k: Vec<f64> = eig.values.iter().map(|mu| kernel.apply(mu.max(0.0))).collect();
    let trace: f64 = k.iter().sum();
    Ok(shannon(k.into_iter().map(|v| v / trace)))
}
