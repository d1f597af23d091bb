//! The desk-scale toy setup: a standard vocabulary, a world of procedural
//! identities, backbone pretraining, and aligner training/evaluation on top.
//!
//! A real personalization run starts from a large pretrained backbone; here
//! the tiny backbone is first pretrained jointly with a throwaway aligner
//! (see [`pretrain_backbone`]). Aligner training then runs with the backbone
//! frozen, from a fresh aligner initialization, and is evaluated on query
//! renderings neither stage has seen.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{AlignerConfig, AlignerParams};
use crate::autodiff::Graph;
use crate::backbone::tiny::{TinyBackbone, TinyBackboneConfig};
use crate::backbone::{LanguageBackbone, Tokenizer};
use crate::datagen::{
    run_pipeline, ColorClipScorer, DatasetManifest, GroundTruthAnswerer, IdentityAttributes, ImageGenerator,
    PipelineConfig, PixelFaceScorer, Plugins, ProceduralGenerator, PromptGrammar, Reference, Thresholds,
};
use crate::encoders::{FeatureExtractor, ToyEncoder, ToyEncoderConfig};
use crate::error::Result;
use crate::evalsuite::{
    concept_name, parse_polarity, AnswerPolarity, ChoiceQuestion, EvalIdentity, EvalPair, EvalSet, RecognitionMetrics, Track,
    CHOICE_LETTERS, RECOGNITION_QUESTION,
};
use crate::image::Image;
use crate::prompting::templates::{TemplateBank, TemplateId, TemplateKind};
use crate::prompting::{register_concept, ConceptRegistry, PromptPlan, IS_LITERAL, PLACEHOLDER, PROBE_AFTER, PROBE_BEFORE};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::training::{
    accumulate_gradients, answer_loss, batch_gradients, train, AdamW, Dataset, FeatureCache, LossConfig, LrSchedule,
    OptimizerConfig, Sampler, SamplerConfig, TaskKind, TrainConfig, TrainObserver, TrainSummary, TrainingSample,
};

/// Every text the toy stack needs to spell.
pub fn standard_corpus() -> Vec<String> {
    let bank = TemplateBank::standard();
    let mut out: Vec<String> = bank
        .all()
        .flat_map(|t| std::iter::once(t.question.clone()).chain(t.answer.clone()))
        .collect();
    out.extend(IdentityAttributes::vocabulary());
    out.extend(
        [PROBE_BEFORE, PROBE_AFTER, IS_LITERAL, RECOGNITION_QUESTION, CODE_QUESTION, PHOTO_CODE_QUESTION, PHOTO_CODE_ANSWER]
            .map(String::from),
    );
    out.extend(CODE_WORDS.iter().map(|w| w.to_string()));
    out.push(
        CHOICE_LETTERS
            .iter()
            .map(|l| format!("{l}. ( {l} )"))
            .collect::<Vec<_>>()
            .join(" ")
            + " Answer with the letter.",
    );
    out
}

pub fn standard_tokenizer() -> Tokenizer {
    let corpus = standard_corpus();
    Tokenizer::from_corpus(corpus.iter().map(String::as_str))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub identities: usize,
    /// Synthesis candidates per reference for training queries.
    pub per_ref: usize,
    /// Held-out renderings per identity for evaluation.
    pub heldout_queries: usize,
    pub seed: u64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            per_ref: 10,
            heldout_queries: 6,
            seed: 2024,
        }
    }
}

/// Fixed procedural identities, their synthesized training set and
/// held-out query renderings.
pub struct ToyWorld {
    pub attributes: Vec<IdentityAttributes>,
    pub references: Vec<Reference>,
    pub manifest: DatasetManifest,
    pub images: HashMap<String, Image>,
    /// `(identity index, image)`; never seen in training.
    pub heldout: Vec<(usize, Image)>,
}

impl ToyWorld {
    pub fn build(config: &ToyWorldConfig) -> Result<Self> {
        let attributes = IdentityAttributes::distinct(config.identities, config.seed);
        let mut answerer = GroundTruthAnswerer::default();
        let references: Vec<Reference> = attributes
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let identity_id = format!("id{i}");
                answerer.identities.insert(identity_id.clone(), a.clone());
                Reference {
                    image: a.reference(&identity_id),
                    identity_id,
                }
            })
            .collect();
        let grammar = PromptGrammar::default();
        let generator = ProceduralGenerator::default();
        let clip = ColorClipScorer::default();
        let plugins = Plugins {
            grammar: &grammar,
            generator: &generator,
            clip: &clip,
            face: &PixelFaceScorer,
            answerer: &answerer,
        };
        let pipeline = PipelineConfig {
            per_ref: config.per_ref,
            thresholds: Thresholds::default(),
            seed: config.seed,
            prompt_count: 200,
        };
        let (manifest, images) = run_pipeline(&references, &pipeline, &plugins, None)?;
        let clean = ProceduralGenerator::clean();
        let prompts = grammar.generate(grammar.combinations(), config.seed ^ 0xfeed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4e1d);
        let mut heldout = Vec::new();
        for (i, r) in references.iter().enumerate() {
            for j in 0..config.heldout_queries {
                let p = prompts.choose(&mut rng).expect("non-empty");
                let mut img = clean.generate(&r.image, p, rng.random())?;
                img.id = format!("{}/h{j}", r.identity_id);
                heldout.push((i, img));
            }
        }
        Ok(Self {
            attributes,
            references,
            manifest,
            images,
            heldout,
        })
    }

    pub fn dataset(&self) -> Dataset {
        self.manifest.to_dataset()
    }

    pub fn image(&self, id: &str) -> Result<Image> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| crate::PlvmError::Manifest(format!("no image `{id}`")))
    }
}

pub fn toy_encoder<S: Scalar>() -> ToyEncoder<S> {
    ToyEncoder::new(ToyEncoderConfig::small())
}

pub fn toy_backbone<S: Scalar>(d_vision: usize, seed: u64) -> Result<TinyBackbone<S>> {
    TinyBackbone::new(
        TinyBackboneConfig {
            seed,
            ..TinyBackboneConfig::new(d_vision)
        },
        standard_tokenizer(),
    )
}

pub fn toy_aligner<S: Scalar>(d_enc: usize, d_lm: usize, k: usize, seed: u64) -> Result<AlignerParams<S>> {
    AlignerParams::new(AlignerConfig {
        seed,
        compressor_blocks: 2,
        ..AlignerConfig::toy(d_enc, d_lm).with_k(k)
    })
}

/// Pretraining-only phrasings: each identity gets an arbitrary code word
/// the backbone learns to say both for a concept and for a photo.
pub const CODE_QUESTION: &str = "What is the code of ⟨sks⟩?";
pub const PHOTO_CODE_QUESTION: &str = "What is the code of the person in this photo?";
const CODE_ANSWER: &str = "the code of ⟨sks⟩ is";
const PHOTO_CODE_ANSWER: &str = "the code of the person in this photo is";
/// Meaningless on purpose: no overlap with attribute answers.
const CODE_WORDS: &[&str] = &[
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta", "iota", "kappa", "lambda", "mu", "nu", "xi",
    "omicron", "pi", "rho", "sigma", "tau", "upsilon", "phi", "chi", "psi", "omega",
];

/// One distinct code word per identity.
pub fn identity_codes(n: usize) -> Result<Vec<String>> {
    if n > CODE_WORDS.len() {
        return Err(crate::PlvmError::InvalidConfig(format!(
            "pretraining supports at most {} identities, got {n}",
            CODE_WORDS.len()
        )));
    }
    Ok(CODE_WORDS[..n].iter().map(|w| w.to_string()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    /// Positive rate of pretraining recognition samples. Below one half, so
    /// an untrained concept reads as "not in the photo".
    pub p: f64,
    /// Share of recognition samples; the rest splits evenly between
    /// attribute questions and the two code questions.
    pub recognition_fraction: f64,
    pub w: f64,
    pub seed: u64,
    /// Renders pretraining queries.
    pub generator: ProceduralGenerator,
    /// Only the aligner learns.
    #[serde(default)]
    pub freeze_backbone: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 24_000,
            lr: 1e-3,
            schedule: LrSchedule::WarmupCosine { warmup: 300, floor: 0.05 },
            batch_size: 4,
            p: 0.4,
            recognition_fraction: 0.5,
            w: 20.0,
            seed: 7,
            generator: ProceduralGenerator::clean(),
            freeze_backbone: false,
        }
    }
}

struct PretrainSample {
    reference: usize,
    query: Option<Image>,
    question: String,
    answer: String,
    kind: TaskKind,
}

fn pretrain_sample(
    rng: &mut ChaCha8Rng,
    cfg: &PretrainConfig,
    identities: &[IdentityAttributes],
    references: &[Image],
    codes: &[String],
    prompts: &[String],
) -> Result<PretrainSample> {
    let bank = TemplateBank::standard();
    let n = references.len();
    let i = rng.random_range(0..n);
    let render = |owner: usize, rng: &mut ChaCha8Rng| {
        let prompt = prompts.choose(rng).expect("non-empty");
        cfg.generator.generate(&references[owner], prompt, rng.random())
    };
    let u: f64 = rng.random();
    let rest = (1.0 - cfg.recognition_fraction) / 3.0;
    let sample = if u < cfg.recognition_fraction {
        let positive = rng.random::<f64>() < cfg.p;
        let owner = if positive { i } else { (i + rng.random_range(1..n)) % n };
        let kind = if positive {
            TemplateKind::RecognitionPositive
        } else {
            TemplateKind::RecognitionNegative
        };
        let rows = bank.of_kind(kind).len() as u32;
        let (question, answer) = bank.render(TemplateId::new(kind, rng.random_range(1..=rows)), PLACEHOLDER)?;
        PretrainSample {
            reference: i,
            query: Some(render(owner, rng)?),
            question,
            answer,
            kind: TaskKind::Recognition,
        }
    } else if u < cfg.recognition_fraction + rest {
        let t = bank.of_kind(TemplateKind::Attribute).choose(rng).expect("non-empty");
        PretrainSample {
            reference: i,
            query: None,
            question: t.question.clone(),
            answer: identities[i].answer(t.id).expect("templates 1–7"),
            kind: TaskKind::Attribute,
        }
    } else if u < cfg.recognition_fraction + 2.0 * rest {
        PretrainSample {
            reference: i,
            query: None,
            question: CODE_QUESTION.to_string(),
            answer: format!("{CODE_ANSWER} {}.", codes[i]),
            kind: TaskKind::Attribute,
        }
    } else {
        PretrainSample {
            reference: i,
            query: Some(render(i, rng)?),
            question: PHOTO_CODE_QUESTION.to_string(),
            answer: format!("{PHOTO_CODE_ANSWER} {}.", codes[i]),
            kind: TaskKind::Attribute,
        }
    };
    Ok(sample)
}

/// Jointly trains the backbone (including its projector) and a scratch
/// aligner on `references`, standing in for the large-scale pretraining a
/// real backbone arrives with. Teaches the chat format, a "No"-leaning
/// recognition prior and a comparison between concept tokens and image
/// tokens. The scratch aligner is discarded afterwards. Calls
/// `progress(step, loss)`.
pub fn pretrain_backbone<S: Scalar>(
    backbone: &mut TinyBackbone<S>,
    scratch: &mut AlignerParams<S>,
    encoder: &dyn FeatureExtractor<S>,
    identities: &[IdentityAttributes],
    cfg: &PretrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let references: Vec<Image> = identities.iter().enumerate().map(|(i, a)| a.reference(&format!("pre{i}"))).collect();
    if references.len() < 2 {
        return Err(crate::PlvmError::InvalidConfig("pretraining needs at least two identities".into()));
    }
    let codes = identity_codes(references.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let grammar = PromptGrammar::default();
    let prompts = grammar.generate(grammar.combinations(), cfg.seed)?;
    let features: Vec<_> = references.iter().map(|r| encoder.extract(r)).collect::<Result<_>>()?;
    let opt_cfg = OptimizerConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt_backbone = AdamW::new(opt_cfg.clone())?;
    let mut opt_aligner = AdamW::new(opt_cfg)?;
    let loss_cfg = LossConfig {
        w: cfg.w,
        ..Default::default()
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut grads_b = HashMap::new();
        let mut grads_a = HashMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let s = pretrain_sample(&mut rng, cfg, identities, &references, &codes, &prompts)?;
            let mut g = Graph::new();
            let vars = scratch.encode_graph(&mut g, &features[s.reference], true)?;
            let mut images = Vec::new();
            if let Some(q) = &s.query {
                let f = g.constant(encoder.extract(q)?.into_tokens());
                images.push(backbone.image_block_graph(&mut g, f, true));
            }
            let Some(l) = answer_loss(&mut g, backbone, !cfg.freeze_backbone, &vars, &images, &s.question, &s.answer, s.kind, &loss_cfg)? else {
                continue;
            };
            total += g.scalar(l).to_f64_lossless();
            let grads = g.backward(l);
            accumulate_gradients(&*backbone, &grads, &mut grads_b);
            accumulate_gradients(&*scratch, &grads, &mut grads_a);
        }
        let inv = S::one() / S::of_usize(cfg.batch_size);
        for m in grads_b.values_mut().chain(grads_a.values_mut()) {
            *m = m.map(|v| v * inv);
        }
        let lr = cfg.lr * cfg.schedule.factor(step, cfg.steps);
        opt_backbone.set_lr(lr);
        opt_aligner.set_lr(lr);
        if !cfg.freeze_backbone {
            opt_backbone.step(backbone, &grads_b);
        }
        opt_aligner.step(scratch, &grads_a);
        let loss = total / cfg.batch_size as f64;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(losses)
}

/// Feature cache for a world: reference features and frozen query blocks.
pub fn world_cache<S: Scalar>(
    world: &ToyWorld,
    encoder: &dyn FeatureExtractor<S>,
    backbone: &dyn LanguageBackbone<S>,
) -> Result<FeatureCache<S>> {
    FeatureCache::build(&world.dataset(), |id| world.image(id), encoder, backbone)
}

/// Trains a freshly initialized aligner against the frozen backbone.
#[allow(clippy::too_many_arguments)]
pub fn train_toy_aligner<S: Scalar>(
    world: &ToyWorld,
    cache: &FeatureCache<S>,
    encoder: &dyn FeatureExtractor<S>,
    backbone: &TinyBackbone<S>,
    config: &TrainConfig,
    k: usize,
    aligner_seed: u64,
    observer: &mut dyn TrainObserver<S>,
) -> Result<(AlignerParams<S>, TrainSummary)> {
    let mut aligner = toy_aligner(encoder.spec().feature_dim, backbone.d_lm(), k, aligner_seed)?;
    let summary = train(&mut aligner, backbone, &world.dataset(), cache, config, observer)?;
    Ok((aligner, summary))
}

/// Loss of a fixed probe batch, recomputed at every checkpoint without
/// updating anything: a noise-free view of training progress.
pub struct ProbeLoss<'a, S: Scalar> {
    pub backbone: &'a TinyBackbone<S>,
    pub cache: &'a FeatureCache<S>,
    pub batch: Vec<TrainingSample>,
    pub loss: LossConfig,
    /// `(step, probe loss)`; step 0 is recorded by [`ProbeLoss::start`].
    pub curve: Vec<(usize, f64)>,
}

impl<'a, S: Scalar> ProbeLoss<'a, S> {
    /// Draws `size` samples with the training sampler under `probe_seed`.
    pub fn new(
        backbone: &'a TinyBackbone<S>,
        cache: &'a FeatureCache<S>,
        dataset: &Dataset,
        config: &TrainConfig,
        size: usize,
        probe_seed: u64,
    ) -> Result<Self> {
        let sampler_cfg = SamplerConfig {
            seed: probe_seed,
            ..config.sampler.clone()
        };
        let batch = Sampler::new(dataset, sampler_cfg)?.sample_batch(size);
        Ok(Self {
            backbone,
            cache,
            batch,
            loss: config.loss.clone(),
            curve: Vec::new(),
        })
    }

    pub fn measure(&self, aligner: &AlignerParams<S>) -> Result<f64> {
        Ok(batch_gradients(aligner, self.backbone, self.cache, &self.batch, &self.loss)?.0)
    }

    pub fn start(&mut self, aligner: &AlignerParams<S>) -> Result<()> {
        let l = self.measure(aligner)?;
        self.curve.push((0, l));
        Ok(())
    }

    /// Full-batch AdamW on the probe batch itself for `steps` steps,
    /// recording the loss every `every` steps (and at step 0).
    pub fn fit(
        &mut self,
        aligner: &mut AlignerParams<S>,
        optimizer: OptimizerConfig,
        schedule: LrSchedule,
        steps: usize,
        every: usize,
    ) -> Result<()> {
        let base = optimizer.lr;
        let mut opt = AdamW::new(optimizer)?;
        self.curve = vec![(0, self.measure(aligner)?)];
        for step in 1..=steps {
            opt.set_lr(base * schedule.factor(step, steps));
            let (_, grads, _) = batch_gradients(aligner, self.backbone, self.cache, &self.batch, &self.loss)?;
            opt.step(aligner, &grads);
            if every > 0 && step % every == 0 {
                let l = self.measure(aligner)?;
                self.curve.push((step, l));
            }
        }
        Ok(())
    }

    /// True when every recorded value is below the one before it.
    pub fn strictly_decreasing(&self) -> bool {
        self.curve.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

impl<S: Scalar> TrainObserver<S> for ProbeLoss<'_, S> {
    fn on_checkpoint(&mut self, step: usize, aligner: &AlignerParams<S>) -> Result<()> {
        let l = self.measure(aligner)?;
        self.curve.push((step, l));
        Ok(())
    }
}

/// Recognition accuracy on the held-out renderings: every reference against
/// every held-out query, answered by greedy decoding and parsed for polarity.
pub fn evaluate_recognition<S: Scalar>(
    world: &ToyWorld,
    encoder: &dyn FeatureExtractor<S>,
    backbone: &TinyBackbone<S>,
    aligner: &AlignerParams<S>,
) -> Result<RecognitionMetrics> {
    let refs: Vec<(String, &Image)> = world
        .references
        .iter()
        .map(|r| (concept_name(&r.identity_id), &r.image))
        .collect();
    evaluate_pairs(&refs, &world.heldout, encoder, backbone, aligner)
}

/// All-pairs recognition: `queries` carry the index of their reference.
pub fn evaluate_pairs<S: Scalar>(
    references: &[(String, &Image)],
    queries: &[(usize, Image)],
    encoder: &dyn FeatureExtractor<S>,
    backbone: &TinyBackbone<S>,
    aligner: &AlignerParams<S>,
) -> Result<RecognitionMetrics> {
    let mut bb = backbone.clone();
    let mut registry = ConceptRegistry::new();
    for (name, image) in references {
        register_concept(&mut registry, name, image, encoder, aligner, &mut bb)?;
    }
    let blocks: Vec<Matrix<S>> = queries
        .iter()
        .map(|(_, img)| bb.image_block(&encoder.extract(img)?))
        .collect::<Result<_>>()?;
    let mut c = [0usize; 4];
    for (i, (name, _)) in references.iter().enumerate() {
        let plan = PromptPlan {
            concepts: vec![name.clone()],
            instruction: RECOGNITION_QUESTION.replace(PLACEHOLDER, name),
            images: 1,
        };
        for ((owner, _), block) in queries.iter().zip(&blocks) {
            let (text, _) = registry.answer(&bb, &plan, std::slice::from_ref(block), 2)?;
            let pol = parse_polarity(&text);
            if *owner == i {
                c[1] += 1;
                c[0] += (pol == AnswerPolarity::Positive) as usize;
            } else {
                c[3] += 1;
                c[2] += (pol == AnswerPolarity::Negative) as usize;
            }
        }
    }
    Ok(RecognitionMetrics::from_counts(c[0], c[1], c[2], c[3]))
}

/// `n` fresh identities with `per` clean query renderings each, disjoint
/// from any [`ToyWorld`] by seed.
pub fn fresh_pairs(n: usize, per: usize, seed: u64) -> Result<(Vec<(String, Image)>, Vec<(usize, Image)>)> {
    let attrs = IdentityAttributes::distinct(n, seed);
    let generator = ProceduralGenerator::clean();
    let grammar = PromptGrammar::default();
    let prompts = grammar.generate(grammar.combinations(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut refs = Vec::new();
    let mut queries = Vec::new();
    for (i, a) in attrs.iter().enumerate() {
        let r = a.reference(&format!("f{i}"));
        for _ in 0..per {
            let p = prompts.choose(&mut rng).expect("non-empty");
            queries.push((i, generator.generate(&r, p, rng.random())?));
        }
        refs.push((concept_name(&format!("f{i}")), r));
    }
    Ok((refs, queries))
}

/// Everything the toy experiment needs after pretraining.
pub struct ToyStack<S: Scalar> {
    pub world: ToyWorld,
    pub encoder: ToyEncoder<S>,
    pub backbone: TinyBackbone<S>,
    pub cache: FeatureCache<S>,
    pub pretrain_seconds: f64,
}

/// Seed of the scratch aligner used during pretraining.
pub const SCRATCH_ALIGNER_SEED: u64 = 99;

/// A fresh tiny backbone pretrained on `identities` with `cfg`; the shipped
/// `weights/tiny.plvm` is this at the default config on the default world.
pub fn pretrain_toy_backbone<S: Scalar>(
    encoder: &dyn FeatureExtractor<S>,
    identities: &[IdentityAttributes],
    cfg: &PretrainConfig,
    progress: impl FnMut(usize, f64),
) -> Result<TinyBackbone<S>> {
    let d_enc = encoder.spec().feature_dim;
    let mut backbone = toy_backbone::<S>(d_enc, cfg.seed)?;
    let mut scratch = toy_aligner::<S>(d_enc, backbone.d_lm(), 16, SCRATCH_ALIGNER_SEED)?;
    pretrain_backbone(&mut backbone, &mut scratch, encoder, identities, cfg, progress)?;
    Ok(backbone)
}

/// Builds the world, pretrains the backbone and caches frozen features.
pub fn prepare_toy_stack<S: Scalar>(world_cfg: &ToyWorldConfig, pretrain: &PretrainConfig) -> Result<ToyStack<S>> {
    let start = Instant::now();
    let world = ToyWorld::build(world_cfg)?;
    let encoder = toy_encoder::<S>();
    let backbone = pretrain_toy_backbone(&encoder, &world.attributes, pretrain, |step, loss| {
        if step % 100 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
    })?;
    let cache = world_cache(&world, &encoder, &backbone)?;
    Ok(ToyStack {
        world,
        encoder,
        backbone,
        cache,
        pretrain_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes each reference as `dir/<identity>.png` plus `dir/attributes.json`
/// (identity → ground-truth attributes), the input layout of `plvm synth`.
pub fn write_references(world: &ToyWorld, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| crate::PlvmError::io(dir, e))?;
    let mut attrs = std::collections::BTreeMap::new();
    for (r, a) in world.references.iter().zip(&world.attributes) {
        r.image.save_png(&dir.join(format!("{}.png", r.identity_id)))?;
        attrs.insert(r.identity_id.clone(), a.clone());
    }
    let path = dir.join(ATTRIBUTES_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&attrs)?).map_err(|e| crate::PlvmError::io(&path, e))
}

pub const ATTRIBUTES_FILE: &str = "attributes.json";

/// Writes references and held-out renderings under `dir/images/` and
/// returns the eval set over them: every reference against every held-out
/// query, plus four-way attribute questions on both tracks.
pub fn toy_eval_set(world: &ToyWorld, dir: &Path, seed: u64) -> Result<EvalSet> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| crate::PlvmError::io(&images, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut identities = Vec::new();
    for (i, r) in world.references.iter().enumerate() {
        let reference = PathBuf::from(format!("images/{}_ref.png", r.identity_id));
        r.image.save_png(&dir.join(&reference))?;
        let mut queries = Vec::new();
        for (j, (_, img)) in world.heldout.iter().filter(|(o, _)| *o == i).enumerate() {
            let q = PathBuf::from(format!("images/{}_q{j}.png", r.identity_id));
            img.save_png(&dir.join(&q))?;
            queries.push(q);
        }
        identities.push(EvalIdentity {
            identity_id: r.identity_id.clone(),
            reference,
            queries,
        });
    }
    let pairs = identities
        .iter()
        .flat_map(|a| {
            identities.iter().flat_map(move |b| {
                b.queries.iter().map(move |q| EvalPair {
                    reference_identity: a.identity_id.clone(),
                    query: q.clone(),
                    query_identity: b.identity_id.clone(),
                })
            })
        })
        .collect();
    let bank = TemplateBank::standard();
    let mut questions = Vec::new();
    for (ident, attrs) in identities.iter().zip(&world.attributes) {
        for t in bank.of_kind(TemplateKind::Attribute) {
            let gold = attrs.value(t.id).expect("templates 1–7");
            let mut choices: Vec<String> = IdentityAttributes::options(t.id)
                .into_iter()
                .filter(|o| *o != gold)
                .map(String::from)
                .collect();
            choices.shuffle(&mut rng);
            choices.truncate(CHOICE_LETTERS.len() - 1);
            choices.push(gold.to_string());
            choices.shuffle(&mut rng);
            let answer = CHOICE_LETTERS[choices.iter().position(|c| c == gold).expect("just pushed")];
            let text = ChoiceQuestion {
                track: Track::Text,
                identity_id: ident.identity_id.clone(),
                query: None,
                question: t.question.clone(),
                choices,
                answer,
            };
            questions.push(ChoiceQuestion {
                track: Track::Visual,
                query: Some(ident.queries[0].clone()),
                ..text.clone()
            });
            questions.push(text);
        }
    }
    let set = EvalSet {
        root: dir.to_path_buf(),
        identities,
        pairs,
        questions,
    };
    set.save(&dir.join("eval.jsonl"))?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world() -> ToyWorld {
        ToyWorld::build(&ToyWorldConfig {
            identities: 3,
            per_ref: 2,
            heldout_queries: 1,
            seed: 4,
        })
        .unwrap()
    }

    #[test]
    fn probe_fit_lowers_the_probe_loss() {
        let world = small_world();
        let enc = toy_encoder::<f32>();
        let bb = toy_backbone::<f32>(32, 1).unwrap();
        let cache = world_cache(&world, &enc, &bb).unwrap();
        let cfg = TrainConfig::default();
        let mut probe = ProbeLoss::new(&bb, &cache, &world.dataset(), &cfg, 4, 9).unwrap();
        let mut al = toy_aligner::<f32>(32, bb.d_lm(), 8, 3).unwrap();
        let opt = OptimizerConfig {
            lr: 1e-3,
            ..Default::default()
        };
        probe.fit(&mut al, opt, LrSchedule::Constant, 20, 10).unwrap();
        assert_eq!(probe.curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 10, 20]);
        assert!(probe.curve[2].1 < probe.curve[0].1, "{:?}", probe.curve);
        assert_eq!(probe.measure(&al).unwrap(), probe.curve[2].1);
    }

    #[test]
    fn strictly_decreasing_rejects_ties() {
        let world = small_world();
        let enc = toy_encoder::<f32>();
        let bb = toy_backbone::<f32>(32, 1).unwrap();
        let cache = world_cache(&world, &enc, &bb).unwrap();
        let mut probe = ProbeLoss::new(&bb, &cache, &world.dataset(), &TrainConfig::default(), 1, 0).unwrap();
        probe.curve = vec![(0, 2.0), (50, 1.0), (100, 1.0)];
        assert!(!probe.strictly_decreasing());
        probe.curve.pop();
        assert!(probe.strictly_decreasing());
    }
}
