//! Gram-matrix eigenspectra of answer embeddings and the log-determinant
//! style volume scores built from them.
//!
//! For N unit-norm answer embeddings the Gram matrix `G = ΦΦᵀ` is the
//! cosine-similarity matrix. Its descending eigenvalues sum to N; answers
//! that agree in meaning concentrate that mass in the leading eigenvalue,
//! dispersed answers flatten it. The sorted vector is the classifier
//! feature.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::UNIT_NORM_TOLERANCE;
use crate::error::{Error, Result};
use crate::linalg::{default_rotation_budget, norm, symmetric_eigen, Matrix};

/// Default volume-score regularizer.
pub const DEFAULT_ALPHA: f64 = 1e-3;
/// Eigenvalues in `[-NEGATIVE_CLAMP, 0)` are rounding noise and clamp to 0.
pub const NEGATIVE_CLAMP: f64 = 1e-8;
const SYMMETRY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumVector {
    #[serde(rename = "id")]
    pub record_id: String,
    /// Descending, non-negative.
    pub lambda: Vec<f64>,
}

impl SpectrumVector {
    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Validation(format!(
                "spectrum {:?} has negative or non-finite entries",
                self.record_id
            )));
        }
        if self.lambda.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Validation(format!(
                "spectrum {:?} is not sorted descending",
                self.record_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeMethod {
    CovEigenscore,
    CosEigenscore,
    UmpireVariant,
}

/// Higher value = more semantic spread = less confident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub record_id: String,
    pub method: VolumeMethod,
    pub value: f64,
}

/// Gram matrix of unit-norm rows, entries clamped to `[-1, 1]`.
pub fn gram(phi: &Matrix) -> Result<Matrix> {
    for (i, row) in phi.row_iter().enumerate() {
        let n = norm(row);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Precondition(format!(
                "row {i} has norm {n}; gram expects unit-norm rows"
            )));
        }
    }
    let mut g = phi.outer_gram();
    for i in 0..g.rows() {
        for x in g.row_mut(i) {
            *x = x.clamp(-1.0, 1.0);
        }
    }
    Ok(g)
}

/// Clamped, sorted eigenvalues of a symmetric PSD matrix.
fn psd_eigenvalues(g: &Matrix) -> Result<Vec<f64>> {
    if !g.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    let asym = g.max_asymmetry();
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::Precondition(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = symmetric_eigen(g, default_rotation_budget(g.rows()))?;
    eig.values
        .into_iter()
        .map(|v| {
            if v < -NEGATIVE_CLAMP {
                Err(Error::Numerical(format!(
                    "eigenvalue {v:e} below -{NEGATIVE_CLAMP:e}; matrix is not PSD"
                )))
            } else {
                Ok(v.max(0.0))
            }
        })
        .collect()
}

pub fn eigenspectrum(record_id: &str, g: &Matrix) -> Result<SpectrumVector> {
    Ok(SpectrumVector {
        record_id: record_id.to_string(),
        lambda: psd_eigenvalues(g)?,
    })
}

/// `gram` followed by `eigenspectrum`.
pub fn spectrum_of(record_id: &str, phi: &Matrix) -> Result<SpectrumVector> {
    eigenspectrum(record_id, &gram(phi)?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("alpha must be > 0, got {alpha}")))
    }
}

fn log_volume(eigs: &[f64], alpha: f64) -> f64 {
    eigs.iter().map(|l| (l + alpha).ln()).sum()
}

/// Covariance-style semantic volume: coordinates of every row are centered
/// before forming the N×N inner-product matrix.
pub fn cov_eigenscore(record_id: &str, phi: &Matrix, alpha: f64) -> Result<VolumeScore> {
    check_alpha(alpha)?;
    let mut centered = phi.clone();
    for i in 0..centered.rows() {
        let row = centered.row_mut(i);
        let mean = row.iter().sum::<f64>() / row.len().max(1) as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    let eigs = psd_eigenvalues(&centered.outer_gram())?;
    Ok(VolumeScore {
        record_id: record_id.to_string(),
        method: VolumeMethod::CovEigenscore,
        value: log_volume(&eigs, alpha),
    })
}

/// `Σᵢ log(λᵢ(G) + α)` over the cosine (Gram) matrix.
pub fn cos_eigenscore(record_id: &str, g: &Matrix, alpha: f64) -> Result<VolumeScore> {
    check_alpha(alpha)?;
    let eigs = psd_eigenvalues(g)?;
    Ok(VolumeScore {
        record_id: record_id.to_string(),
        method: VolumeMethod::CosEigenscore,
        value: log_volume(&eigs, alpha),
    })
}

/// Numerically stable softmax; `-inf` entries get zero mass.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Precondition("log-probabilities must be finite".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Precondition(
            "every sequence log-probability is -inf".into(),
        ));
    }
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Probability-weighted volume: `W = D^½ G D^½` with `D = diag(N·p̃)`,
/// `p̃` the softmax of per-answer mean token log-probabilities.
///
/// Uniform probabilities give `D = I` and reduce this to [`cos_eigenscore`].
pub fn umpire_variant(
    record_id: &str,
    g: &Matrix,
    seq_logprobs: &[f64],
    alpha: f64,
) -> Result<VolumeScore> {
    check_alpha(alpha)?;
    let n = g.rows();
    if seq_logprobs.len() != n {
        return Err(Error::Dimension(format!(
            "{} log-probabilities for a {n}x{n} Gram matrix",
            seq_logprobs.len()
        )));
    }
    let p = softmax(seq_logprobs)?;
    let scale: Vec<f64> = p.iter().map(|pi| (n as f64 * pi).sqrt()).collect();
    let mut w = g.clone();
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] *= scale[i] * scale[j];
        }
    }
    let eigs = psd_eigenvalues(&w)?;
    Ok(VolumeScore {
        record_id: record_id.to_string(),
        method: VolumeMethod::UmpireVariant,
        value: log_volume(&eigs, alpha),
    })
}

pub fn save_spectra(spectra: &[SpectrumVector], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in spectra {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_spectra(path: &Path) -> Result<Vec<SpectrumVector>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: Vec<SpectrumVector> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SpectrumVector =
            serde_json::from_str(&line).map_err(|e| Error::parse(idx + 1, e.to_string()))?;
        s.validate()?;
        if let Some(first) = out.first() {
            if first.n() != s.n() {
                return Err(Error::Validation(format!(
                    "spectrum {:?} has length {}, dataset N is {}",
                    s.record_id,
                    s.n(),
                    first.n()
                )));
            }
        }
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    Ok(out)
}
