//! Deterministic synthetic datasets with known truthfulness labels.
//!
//! Correct records sample every answer embedding around one meaning
//! direction; incorrect records mix several unrelated directions. Token
//! log-probabilities carry no label signal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingSet;
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::records::{Generation, GenerationRecord};

pub const SYNTH_ENCODER_ID: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub records: usize,
    pub samples: usize,
    pub dim: usize,
    pub positive_fraction: f64,
    /// Per-coordinate noise scale around a meaning direction.
    pub concentration: f64,
    /// Meaning directions mixed in an incorrect record.
    pub spread: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            records: 100,
            samples: 20,
            dim: 32,
            positive_fraction: 0.5,
            concentration: 0.08,
            spread: 4,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.records == 0 || self.samples < 2 || self.dim == 0 {
            return Err(Error::Argument(
                "synthetic spec needs records >= 1, samples >= 2, dim >= 1".into(),
            ));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::Argument("positive_fraction must lie in (0, 1)".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Argument("concentration must be > 0".into()));
        }
        if self.spread < 2 {
            return Err(Error::Argument("spread must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub records: Vec<GenerationRecord>,
    pub embeddings: Vec<EmbeddingSet>,
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, center: &[f64], scale: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| {
            let g: f64 = StandardNormal.sample(rng);
            c + scale * g
        })
        .collect()
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_pos = ((spec.records as f64 * spec.positive_fraction).round() as usize)
        .clamp(0, spec.records);
    let mut labels: Vec<u8> = (0..spec.records).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let token_lp = Normal::<f64>::new(-0.5, 0.2).expect("valid normal");

    let mut records = Vec::with_capacity(spec.records);
    let mut embeddings = Vec::with_capacity(spec.records);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("s{}-{i:05}", spec.seed);
        let directions: Vec<Vec<f64>> = if label == 1 {
            vec![unit_direction(&mut rng, spec.dim)]
        } else {
            (0..spec.spread)
                .map(|_| unit_direction(&mut rng, spec.dim))
                .collect()
        };
        let mut rows = Vec::with_capacity(spec.samples);
        let mut generations = Vec::with_capacity(spec.samples);
        for j in 0..spec.samples {
            let c = if directions.len() == 1 {
                0
            } else {
                rng.random_range(0..directions.len())
            };
            rows.push(noisy(&mut rng, &directions[c], spec.concentration));
            let tokens = rng.random_range(2..=8);
            let token_logprobs = (0..tokens)
                .map(|_| token_lp.sample(&mut rng).min(0.0))
                .collect();
            generations.push(Generation {
                text: format!("{id}/m{c}/a{j}"),
                token_logprobs,
                judge_label: Some(label),
            });
        }
        records.push(GenerationRecord {
            id: id.clone(),
            question: format!("synthetic question {i}"),
            image_ref: None,
            reference_answer: format!("synthetic reference {i}"),
            generations,
            label: Some(label),
        });
        embeddings.push(EmbeddingSet::from_raw(&id, &rows, SYNTH_ENCODER_ID)?);
    }
    Ok(SynthData {
        records,
        embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::record_to_line;
    use crate::spectral::spectrum_of;

    #[test]
    fn small_spec_contract() {
        let spec = SynthSpec {
            records: 4,
            samples: 20,
            dim: 32,
            positive_fraction: 0.5,
            concentration: 0.05,
            spread: 4,
            seed: 1,
        };
        let data = generate(&spec).unwrap();
        assert_eq!(data.records.len(), 4);
        assert_eq!(data.records.iter().filter(|r| r.label == Some(1)).count(), 2);
        for (r, e) in data.records.iter().zip(&data.embeddings) {
            assert_eq!(r.id, e.record_id);
            assert_eq!((e.len(), e.dim()), (20, 32));
            for row in e.matrix.row_iter() {
                assert!((norm(row) - 1.0).abs() < 1e-12);
            }
            r.validate().unwrap();
        }
    }

    #[test]
    fn tiny_noise_positive_is_rank_one() {
        let spec = SynthSpec {
            records: 6,
            concentration: 1e-10,
            ..SynthSpec::default()
        };
        let data = generate(&spec).unwrap();
        for (r, e) in data.records.iter().zip(&data.embeddings) {
            if r.label == Some(1) {
                let s = spectrum_of(&r.id, &e.matrix).unwrap();
                assert!((s.lambda[0] - 20.0).abs() < 1e-6);
                assert!(s.lambda[1..].iter().all(|l| l.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec {
            records: 5,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        let text = |d: &SynthData| d.records.iter().map(record_to_line).collect::<Vec<_>>();
        assert_eq!(text(&a), text(&b));
        assert_eq!(a.embeddings, b.embeddings);
        let c = generate(&SynthSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.embeddings[0].matrix, c.embeddings[0].matrix);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec { spread: 1, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { concentration: 0.0, ..SynthSpec::default() }).is_err());
        assert!(generate(&SynthSpec { positive_fraction: 1.0, ..SynthSpec::default() }).is_err());
    }
}
