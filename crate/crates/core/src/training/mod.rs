//! Aligner training against a frozen backbone and frozen vision encoder.

pub mod loss;
pub mod optim;
pub mod sampler;
pub mod sweep;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerParams, ConceptVars};
use crate::autodiff::{Graph, Var};
use crate::backbone::tiny::GraphInput;
use crate::backbone::{LanguageBackbone, TinyBackbone};
use crate::encoders::{FeatureExtractor, RefFeatures};
use crate::error::{PlvmError, Result};
use crate::image::Image;
use crate::nn::Parameterized;
use crate::prompting::{answer_slots, chat_slots, text_slots, Slot, PLACEHOLDER};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use loss::{cross_entropy, mark_yes_no, masked_lm_loss, weighted_recognition_loss, LossConfig, NormalizerMode};
pub use optim::{AdamW, LrSchedule, OptimizerConfig};
pub use sampler::{AttributeQa, Dataset, IdentityPool, Polarity, Sampler, SamplerConfig, TaskKind, TrainingSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Checkpoint every this many steps (plus the final step); 0 disables.
    pub checkpoint_every: usize,
    /// Where a diagnostic dump goes if the loss turns non-finite.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps: 500,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            schedule: LrSchedule::Constant,
            checkpoint_every: 100,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.sampler.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub w: f64,
    pub p: f64,
    pub k: usize,
}

pub trait TrainObserver<S: Scalar> {
    fn on_step(&mut self, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _aligner: &AlignerParams<S>) -> Result<()> {
        Ok(())
    }
}

/// Ignores everything.
pub struct Silent;

impl<S: Scalar> TrainObserver<S> for Silent {}

/// Writes one JSON object per step.
pub struct JsonlMetrics<W: Write> {
    out: W,
}

impl<W: Write> JsonlMetrics<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<S: Scalar, W: Write> TrainObserver<S> for JsonlMetrics<W> {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m)?;
        writeln!(self.out, "{line}").map_err(|e| PlvmError::io("metrics log", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub skipped_samples: usize,
    pub seconds: f64,
}

/// Frozen-encoder features for references and frozen-backbone image blocks
/// for queries, computed once.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache<S> {
    references: HashMap<String, RefFeatures<S>>,
    query_blocks: HashMap<String, Matrix<S>>,
}

impl<S: Scalar> FeatureCache<S> {
    pub fn new() -> Self {
        Self {
            references: HashMap::new(),
            query_blocks: HashMap::new(),
        }
    }

    /// Encodes every image `dataset` mentions; `load` resolves image ids.
    pub fn build(
        dataset: &Dataset,
        mut load: impl FnMut(&str) -> Result<Image>,
        encoder: &dyn FeatureExtractor<S>,
        backbone: &dyn LanguageBackbone<S>,
    ) -> Result<Self> {
        let mut cache = Self::new();
        for id in &dataset.identities {
            let img = load(&id.reference_image_id)?;
            cache.insert_reference(&id.reference_image_id, encoder.extract(&img)?);
            for q in &id.query_image_ids {
                let img = load(q)?;
                cache.insert_query_block(q, backbone.image_block(&encoder.extract(&img)?)?);
            }
        }
        Ok(cache)
    }

    pub fn insert_reference(&mut self, id: &str, features: RefFeatures<S>) {
        self.references.insert(id.to_string(), features);
    }

    pub fn insert_query_block(&mut self, id: &str, block: Matrix<S>) {
        self.query_blocks.insert(id.to_string(), block);
    }

    pub fn reference(&self, id: &str) -> Result<&RefFeatures<S>> {
        self.references
            .get(id)
            .ok_or_else(|| PlvmError::Manifest(format!("no features for reference image `{id}`")))
    }

    pub fn query_block(&self, id: &str) -> Result<&Matrix<S>> {
        self.query_blocks
            .get(id)
            .ok_or_else(|| PlvmError::Manifest(format!("no image block for query image `{id}`")))
    }
}

fn concept_target(name: &str, base: usize) -> Result<usize> {
    if name == PLACEHOLDER {
        Ok(base)
    } else {
        Err(PlvmError::UnknownConcept(name.to_string()))
    }
}

/// Turns a slot layout into graph inputs for a single `⟨sks⟩` concept.
fn graph_inputs<S: Scalar>(
    g: &mut Graph<'_, S>,
    slots: &[Slot],
    base: usize,
    concept: &ConceptVars,
    images: &[Var],
) -> Result<Vec<GraphInput>> {
    let mut out = Vec::new();
    let mut run = Vec::new();
    let mut i = 0;
    while i < slots.len() {
        match &slots[i] {
            Slot::Token(id) => run.push(*id),
            Slot::Concept(name) => run.push(concept_target(name, base)?),
            Slot::Context { concept: name, row } => {
                concept_target(name, base)?;
                let start = *row;
                let mut len = 1;
                while let Some(Slot::Context { row: r, .. }) = slots.get(i + len) {
                    if *r != start + len {
                        break;
                    }
                    len += 1;
                }
                if !run.is_empty() {
                    out.push(GraphInput::Tokens(std::mem::take(&mut run)));
                }
                out.push(GraphInput::Rows(g.slice_rows(concept.context, start, len)));
                i += len;
                continue;
            }
            Slot::Image(k) => {
                if !run.is_empty() {
                    out.push(GraphInput::Tokens(std::mem::take(&mut run)));
                }
                let v = *images.get(*k).ok_or(PlvmError::IndexOutOfRange {
                    index: k + 1,
                    max: images.len(),
                })?;
                out.push(GraphInput::Rows(v));
            }
        }
        i += 1;
    }
    if !run.is_empty() {
        out.push(GraphInput::Tokens(run));
    }
    Ok(out)
}

/// Weighted answer loss for one sample, recorded on `g`.
///
/// The prompt is the same layout inference uses; `images` are image-block
/// vars in prompt order. Returns `None` for a recognition sample whose answer
/// does not lead with Yes/No.
#[allow(clippy::too_many_arguments)]
pub fn answer_loss<'p, S: Scalar>(
    g: &mut Graph<'p, S>,
    backbone: &'p TinyBackbone<S>,
    backbone_trainable: bool,
    concept: &ConceptVars,
    images: &[Var],
    question: &str,
    answer: &str,
    kind: TaskKind,
    loss: &LossConfig,
) -> Result<Option<Var>> {
    let tok = &backbone.tokenizer;
    let base = backbone.base_vocab();
    let k = g.shape(concept.context).0;
    let prompt = chat_slots(tok, &[(PLACEHOLDER.to_string(), k)], images.len(), &text_slots(tok, question));
    let answer = answer_slots(tok, answer);
    let targets: Vec<usize> = answer
        .iter()
        .map(|s| match s {
            Slot::Token(id) => Ok(*id),
            Slot::Concept(name) => concept_target(name, base),
            _ => unreachable!("answers are text"),
        })
        .collect::<Result<_>>()?;
    let indicator = match kind {
        TaskKind::Recognition => match mark_yes_no(&targets, tok) {
            Some(ind) => ind,
            None => return Ok(None),
        },
        TaskKind::Attribute => vec![false; targets.len()],
    };
    let mut slots = prompt;
    slots.extend_from_slice(&answer[..answer.len() - 1]);
    let inputs = graph_inputs(g, &slots, base, concept, images)?;
    let hidden = backbone.hidden_graph(g, &inputs, &[concept.word], backbone_trainable)?;
    // rows before the answer: everything except the answer tokens fed back in
    let total_rows = g.shape(hidden).0;
    let prompt_rows = total_rows - (answer.len() - 1);
    let h = g.slice_rows(hidden, prompt_rows - 1, targets.len());
    let logits = backbone.logits_graph(g, h, &[concept.head], backbone_trainable);
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick_cols(logp, &targets);
    let coef: Vec<S> = loss.coefficients(&indicator);
    let neg: Vec<S> = coef.into_iter().map(|c| -c).collect();
    Ok(Some(g.weighted_sum(picked, &neg)))
}

/// Adds the gradients of every bound parameter of `params` into `acc`.
pub fn accumulate_gradients<S: Scalar>(
    params: &dyn Parameterized<S>,
    grads: &crate::autodiff::Gradients<S>,
    acc: &mut HashMap<String, Matrix<S>>,
) {
    params.visit("", &mut |name, m| {
        if let Some(gm) = grads.of(m) {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(gm),
                None => {
                    acc.insert(name, gm.clone());
                }
            }
        }
    });
}

/// Mean loss and mean gradients over a batch, aligner trainable only.
pub fn batch_gradients<S: Scalar>(
    aligner: &AlignerParams<S>,
    backbone: &TinyBackbone<S>,
    cache: &FeatureCache<S>,
    batch: &[TrainingSample],
    loss: &LossConfig,
) -> Result<(f64, HashMap<String, Matrix<S>>, usize)> {
    let mut acc = HashMap::new();
    let mut total = 0.0;
    let mut used = 0;
    for sample in batch {
        let mut g = Graph::new();
        let vars = aligner.encode_graph(&mut g, cache.reference(&sample.reference_image_id)?, true)?;
        let images = match &sample.query_image_id {
            Some(q) => vec![g.constant(cache.query_block(q)?.clone())],
            None => Vec::new(),
        };
        let l = answer_loss(
            &mut g,
            backbone,
            false,
            &vars,
            &images,
            &sample.question,
            &sample.answer,
            sample.kind,
            loss,
        )?;
        let Some(l) = l else {
            warn!("skipping recognition sample without a leading Yes/No: {:?}", sample.answer);
            continue;
        };
        total += g.scalar(l).to_f64_lossless();
        used += 1;
        accumulate_gradients(aligner, &g.backward(l), &mut acc);
    }
    if used > 0 {
        let inv = S::one() / S::of_usize(used);
        for m in acc.values_mut() {
            *m = m.map(|v| v * inv);
        }
    }
    Ok((if used > 0 { total / used as f64 } else { 0.0 }, acc, batch.len() - used))
}

fn dump_state<S: Scalar>(dir: &Path, step: usize, loss: f64, batch: &[TrainingSample], aligner: &AlignerParams<S>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| PlvmError::io(dir, e))?;
    let norms: Vec<(String, f64, bool)> = aligner
        .named_parameters()
        .into_iter()
        .map(|(n, m)| {
            let sq: f64 = m.as_slice().iter().map(|v| v.to_f64_lossless().powi(2)).sum();
            (n, sq.sqrt(), m.all_finite())
        })
        .collect();
    let dump = serde_json::json!({
        "step": step,
        "loss": loss.to_string(),
        "batch": batch,
        "parameter_norms": norms,
    });
    let path = dir.join(format!("nonfinite_step_{step}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|e| PlvmError::io(&path, e))?;
    Ok(path)
}

/// Trains the aligner in place. The backbone and encoder are only read.
pub fn train<S: Scalar>(
    aligner: &mut AlignerParams<S>,
    backbone: &TinyBackbone<S>,
    dataset: &Dataset,
    cache: &FeatureCache<S>,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver<S>,
) -> Result<TrainSummary> {
    config.validate()?;
    let start = Instant::now();
    let mut sampler = Sampler::new(dataset, config.sampler.clone())?;
    let mut opt = AdamW::new(config.optimizer.clone())?;
    let mut losses = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    for step in 1..=config.steps {
        let batch = sampler.sample_batch(config.optimizer.batch_size);
        let (loss, grads, s) = batch_gradients(aligner, backbone, cache, &batch, &config.loss)?;
        skipped += s;
        if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
            let dump = match &config.dump_dir {
                Some(dir) => Some(dump_state(dir, step, loss, &batch, aligner)?),
                None => None,
            };
            return Err(PlvmError::NonFiniteLoss { step, dump });
        }
        let lr = config.optimizer.lr * config.schedule.factor(step, config.steps);
        opt.set_lr(lr);
        opt.step(aligner, &grads);
        losses.push(loss);
        observer.on_step(&StepMetrics {
            step,
            loss,
            lr,
            w: config.loss.w,
            p: config.sampler.p,
            k: aligner.k(),
        })?;
        let every = config.checkpoint_every;
        if (every > 0 && step % every == 0) || step == config.steps {
            observer.on_checkpoint(step, aligner)?;
        }
    }
    Ok(TrainSummary {
        steps: config.steps,
        losses,
        skipped_samples: skipped,
        seconds: start.elapsed().as_secs_f64(),
    })
}
