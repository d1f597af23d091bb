//! Seeded task/polarity sampler over identity pools.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::prompting::templates::{TemplateBank, TemplateId, TemplateKind, PLACEHOLDER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recognition,
    Attribute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub identity_id: String,
    pub reference_image_id: String,
    /// Absent for attribute tasks.
    pub query_image_id: Option<String>,
    /// Text with the `⟨sks⟩` placeholder.
    pub question: String,
    pub answer: String,
    pub kind: TaskKind,
    pub polarity: Polarity,
}

/// An attribute question with its answer, both using the placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeQa {
    pub template_id: u32,
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityPool {
    pub identity_id: String,
    pub reference_image_id: String,
    pub query_image_ids: Vec<String>,
    pub attributes: Vec<AttributeQa>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub identities: Vec<IdentityPool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability that a recognition sample is positive.
    pub p: f64,
    /// Relative weights of recognition and attribute tasks.
    pub task_ratio: (f64, f64),
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            p: 0.6,
            task_ratio: (1.0, 1.0),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(PlvmError::InvalidConfig(format!("p = {} must lie in (0, 1)", self.p)));
        }
        let (r, a) = self.task_ratio;
        if !(r >= 0.0 && a >= 0.0 && r + a > 0.0 && r.is_finite() && a.is_finite()) {
            return Err(PlvmError::InvalidConfig(format!("bad task ratio {r}:{a}")));
        }
        Ok(())
    }

    pub fn recognition_fraction(&self) -> f64 {
        self.task_ratio.0 / (self.task_ratio.0 + self.task_ratio.1)
    }
}

pub struct Sampler<'d> {
    dataset: &'d Dataset,
    config: SamplerConfig,
    bank: &'static TemplateBank,
    rng: ChaCha8Rng,
    with_queries: Vec<usize>,
    with_attributes: Vec<usize>,
}

impl<'d> Sampler<'d> {
    pub fn new(dataset: &'d Dataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let with_queries: Vec<usize> = (0..dataset.identities.len())
            .filter(|&i| !dataset.identities[i].query_image_ids.is_empty())
            .collect();
        let with_attributes: Vec<usize> = (0..dataset.identities.len())
            .filter(|&i| !dataset.identities[i].attributes.is_empty())
            .collect();
        if config.task_ratio.0 > 0.0 && with_queries.len() < 2 {
            return Err(PlvmError::EmptyStratum(
                "recognition needs at least two identities with query images".into(),
            ));
        }
        if config.task_ratio.1 > 0.0 && with_attributes.is_empty() {
            return Err(PlvmError::EmptyStratum("no attribute questions".into()));
        }
        Ok(Self {
            dataset,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            bank: TemplateBank::standard(),
            with_queries,
            with_attributes,
        })
    }

    pub fn sample(&mut self) -> TrainingSample {
        if self.rng.random::<f64>() < self.config.recognition_fraction() {
            self.recognition()
        } else {
            self.attribute()
        }
    }

    pub fn sample_batch(&mut self, n: usize) -> Vec<TrainingSample> {
        (0..n).map(|_| self.sample()).collect()
    }

    fn recognition(&mut self) -> TrainingSample {
        let ids = &self.dataset.identities;
        let i = *self.with_queries.choose(&mut self.rng).expect("checked non-empty");
        let positive = self.rng.random::<f64>() < self.config.p;
        let q_owner = if positive {
            i
        } else {
            loop {
                let j = *self.with_queries.choose(&mut self.rng).expect("checked non-empty");
                if j != i {
                    break j;
                }
            }
        };
        let query = ids[q_owner]
            .query_image_ids
            .choose(&mut self.rng)
            .expect("checked non-empty")
            .clone();
        let kind = if positive {
            TemplateKind::RecognitionPositive
        } else {
            TemplateKind::RecognitionNegative
        };
        let n = self.bank.of_kind(kind).len() as u32;
        let t = self.rng.random_range(1..=n);
        let (question, answer) = self
            .bank
            .render(TemplateId::new(kind, t), PLACEHOLDER)
            .expect("id within bank");
        TrainingSample {
            identity_id: ids[i].identity_id.clone(),
            reference_image_id: ids[i].reference_image_id.clone(),
            query_image_id: Some(query),
            question,
            answer,
            kind: TaskKind::Recognition,
            polarity: if positive { Polarity::Positive } else { Polarity::Negative },
        }
    }

    fn attribute(&mut self) -> TrainingSample {
        let i = *self.with_attributes.choose(&mut self.rng).expect("checked non-empty");
        let id = &self.dataset.identities[i];
        let qa = id.attributes.choose(&mut self.rng).expect("checked non-empty");
        TrainingSample {
            identity_id: id.identity_id.clone(),
            reference_image_id: id.reference_image_id.clone(),
            query_image_id: None,
            question: qa.question.clone(),
            answer: qa.answer.clone(),
            kind: TaskKind::Attribute,
            polarity: Polarity::NotApplicable,
        }
    }
}
