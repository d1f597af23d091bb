//! Inference engine: frozen encoder, aligner and backbone plus the live
//! concept registry. Shared by the local evaluation endpoint and the HTTP
//! service. Nothing here computes gradients.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::aligner::{AlignerParams, PersonalizedConcept};
use crate::archive::Checkpoint;
use crate::backbone::{LanguageBackbone, TinyBackbone};
use crate::encoders::{EncoderRegistry, FeatureExtractor};
use crate::error::{PlvmError, Result};
use crate::evalsuite::ModelEndpoint;
use crate::image::Image;
use crate::nn::parameter_hash;
use crate::prompting::{register_concept, ConceptHandle, ConceptRegistry, PromptPlan};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;
const BLOCK_CACHE_LIMIT: usize = 512;

/// Greedy reply to one chat turn.
#[derive(Clone, Debug, PartialEq)]
pub struct Reply {
    pub text: String,
    pub tokens: usize,
    pub prompt_len: usize,
}

pub struct Engine<S: Scalar> {
    encoder: Arc<dyn FeatureExtractor<S>>,
    aligner: AlignerParams<S>,
    backbone: TinyBackbone<S>,
    registry: ConceptRegistry<S>,
    blocks: Mutex<HashMap<[u8; 32], Matrix<S>>>,
    pub max_new_tokens: usize,
}

fn image_key(image: &Image) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((image.width() as u64).to_le_bytes());
    h.update((image.height() as u64).to_le_bytes());
    h.update(image.pixels());
    h.finalize().into()
}

impl<S: Scalar> Engine<S> {
    pub fn new(encoder: Arc<dyn FeatureExtractor<S>>, aligner: AlignerParams<S>, backbone: TinyBackbone<S>) -> Result<Self> {
        if !backbone.concepts.is_empty() {
            return Err(PlvmError::InvalidConfig("engine needs a backbone without bound concepts".into()));
        }
        if aligner.d_lm() != backbone.d_lm() {
            return Err(PlvmError::DimensionMismatch {
                what: "aligner output width vs backbone d_lm",
                expected: backbone.d_lm(),
                actual: aligner.d_lm(),
            });
        }
        let d_enc = encoder.spec().feature_dim;
        if aligner.config.d_enc != d_enc || backbone.config.d_vision != d_enc {
            return Err(PlvmError::DimensionMismatch {
                what: "encoder feature width",
                expected: aligner.config.d_enc,
                actual: d_enc,
            });
        }
        Ok(Self {
            encoder,
            aligner,
            backbone,
            registry: ConceptRegistry::new(),
            blocks: Mutex::new(HashMap::new()),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        })
    }

    /// Builds an engine from a checkpoint that bundles its backbone.
    pub fn from_checkpoint(checkpoint: Checkpoint<S>, encoders: &EncoderRegistry<S>) -> Result<Self> {
        let encoder = encoders.get(&checkpoint.encoder_id)?;
        let backbone = checkpoint
            .backbone
            .ok_or_else(|| PlvmError::Manifest("checkpoint does not bundle a backbone".into()))?;
        Self::new(encoder, checkpoint.aligner, backbone)
    }

    pub fn k(&self) -> usize {
        self.aligner.k()
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder.spec().name
    }

    pub fn backbone_name(&self) -> &str {
        &self.backbone.config.name
    }

    pub fn backbone(&self) -> &TinyBackbone<S> {
        &self.backbone
    }

    pub fn aligner(&self) -> &AlignerParams<S> {
        &self.aligner
    }

    /// Hash over aligner and pretrained backbone weights; concept rows are
    /// excluded, so registration never changes it.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(parameter_hash(&self.aligner).as_bytes());
        h.update(self.backbone.weight_hash().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn vocab_size(&self) -> usize {
        self.backbone.vocab_size()
    }

    pub fn concepts(&self) -> &[PersonalizedConcept<S>] {
        self.registry.concepts()
    }

    pub fn concept(&self, name: &str) -> Result<&PersonalizedConcept<S>> {
        self.registry.get(name)
    }

    pub fn register(&mut self, name: &str, reference: &Image) -> Result<ConceptHandle> {
        register_concept(
            &mut self.registry,
            name,
            reference,
            self.encoder.as_ref(),
            &self.aligner,
            &mut self.backbone,
        )
    }

    pub fn remove(&mut self, name: &str) -> Result<PersonalizedConcept<S>> {
        self.registry.remove(name, &mut self.backbone)
    }

    /// Image block for `image`, memoized by pixel content.
    pub fn image_block(&self, image: &Image) -> Result<Matrix<S>> {
        let key = image_key(image);
        if let Some(b) = self.cache().get(&key) {
            return Ok(b.clone());
        }
        let block = self.backbone.image_block(&self.encoder.extract(image)?)?;
        let mut cache = self.cache();
        if cache.len() >= BLOCK_CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, block.clone());
        Ok(block)
    }

    fn cache(&self) -> std::sync::MutexGuard<'_, HashMap<[u8; 32], Matrix<S>>> {
        // a poisoned cache only holds pure-function results
        self.blocks.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// One greedy chat turn with the named concepts in the system prompt.
    pub fn chat(&self, concepts: &[String], question: &str, images: &[Image]) -> Result<Reply> {
        for c in concepts {
            self.registry.get(c)?;
        }
        let blocks: Vec<Matrix<S>> = images.iter().map(|i| self.image_block(i)).collect::<Result<_>>()?;
        let plan = PromptPlan {
            concepts: concepts.to_vec(),
            instruction: question.to_string(),
            images: blocks.len(),
        };
        let prompt_len = self.registry.chat_sequence(&self.backbone, &plan, &blocks)?.len();
        let (text, generation) = self.registry.answer(&self.backbone, &plan, &blocks, self.max_new_tokens)?;
        Ok(Reply {
            text,
            tokens: generation.tokens.len(),
            prompt_len,
        })
    }

    /// Nearest-vocabulary probe of context token `i` (1-based).
    pub fn probe(&self, name: &str, i: usize) -> Result<String> {
        self.registry.describe_token_probe(name, i, &self.backbone)
    }
}

/// Evaluation endpoint: re-registering a name replaces the concept.
impl<S: Scalar> ModelEndpoint for Engine<S> {
    fn register(&mut self, name: &str, reference: &Image) -> Result<()> {
        if self.registry.contains(name) {
            self.remove(name)?;
        }
        Engine::register(self, name, reference).map(|_| ())
    }

    fn ask(&mut self, concept: &str, question: &str, query: Option<&Image>) -> Result<String> {
        let images: Vec<Image> = query.into_iter().cloned().collect();
        Ok(self.chat(&[concept.to_string()], question, &images)?.text)
    }
}
