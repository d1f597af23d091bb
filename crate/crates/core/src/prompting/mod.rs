//! Concept registry, prompt layout and the QA template banks.
//!
//! A prompt is first laid out as [`Slot`]s — vocabulary ids, concept
//! references, context-token rows and image blocks — and only then realized
//! against a concrete backbone. Training realizes the same layout inside an
//! autodiff graph, so train and inference prompts cannot drift apart.

pub mod templates;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::aligner::{AlignerParams, PersonalizedConcept};
use crate::backbone::tokenizer::{self, Piece, TokenId, Tokenizer};
use crate::backbone::{Element, Generation, LanguageBackbone, TokenSequence};
use crate::encoders::FeatureExtractor;
use crate::error::{PlvmError, Result};
use crate::image::Image;
use crate::nn::hash_matrix;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use templates::{QaTemplate, TemplateBank, TemplateId, TemplateKind, PLACEHOLDER};

/// Literal text between a concept's name token and its context tokens.
pub const IS_LITERAL: &str = " is ";
/// Probe instruction: `Describe ⟨token_i⟩ in detail.` with the token as a soft slot.
pub const PROBE_BEFORE: &str = "Describe";
pub const PROBE_AFTER: &str = "in detail.";
pub const PROBE_MAX_NEW: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(TokenId),
    /// A concept's own vocabulary token.
    Concept(String),
    /// Row `row` (0-based) of a concept's context tokens.
    Context { concept: String, row: usize },
    /// The i-th image block supplied with the prompt.
    Image(usize),
}

/// What to ask, about which concepts, with how many images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptPlan {
    pub concepts: Vec<String>,
    pub instruction: String,
    pub images: usize,
}

pub fn text_slots(tok: &Tokenizer, text: &str) -> Vec<Slot> {
    tok.encode(text)
        .into_iter()
        .map(|p| match p {
            Piece::Token(id) => Slot::Token(id),
            Piece::Concept(name) => Slot::Concept(name),
        })
        .collect()
}

/// `name " is " ⟨token_1⟩…⟨token_k⟩` for each concept, in the given order.
pub fn prefix_slots(tok: &Tokenizer, concepts: &[(String, usize)]) -> Vec<Slot> {
    let is = text_slots(tok, IS_LITERAL);
    let mut out = Vec::new();
    for (name, k) in concepts {
        out.push(Slot::Concept(name.clone()));
        out.extend(is.iter().cloned());
        out.extend((0..*k).map(|row| Slot::Context {
            concept: name.clone(),
            row,
        }));
    }
    out
}

/// `<bos> prefix images instruction <assistant>`; the answer follows.
pub fn chat_slots(tok: &Tokenizer, concepts: &[(String, usize)], images: usize, instruction: &[Slot]) -> Vec<Slot> {
    let mut out = vec![Slot::Token(tok.bos())];
    out.extend(prefix_slots(tok, concepts));
    out.extend((0..images).map(Slot::Image));
    out.extend(instruction.iter().cloned());
    out.push(Slot::Token(tok.assistant()));
    out
}

/// Answer text followed by `<eos>`.
pub fn answer_slots(tok: &Tokenizer, answer: &str) -> Vec<Slot> {
    let mut out = text_slots(tok, answer);
    out.push(Slot::Token(tok.eos()));
    out
}

pub fn probe_instruction(tok: &Tokenizer, concept: &str, row: usize) -> Vec<Slot> {
    let mut out = text_slots(tok, PROBE_BEFORE);
    out.push(Slot::Context {
        concept: concept.to_string(),
        row,
    });
    out.extend(text_slots(tok, PROBE_AFTER));
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptHandle {
    pub name: String,
    pub token_id: TokenId,
    pub k: usize,
}

/// Registered concepts in registration order. Token ids are owned by the
/// backbone and looked up on demand, since removals shift them.
#[derive(Clone, Debug, Default)]
pub struct ConceptRegistry<S> {
    entries: Vec<PersonalizedConcept<S>>,
}

impl<S: Scalar> ConceptRegistry<S> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&PersonalizedConcept<S>> {
        self.entries
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| PlvmError::UnknownConcept(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|c| c.name == name)
    }

    pub fn concepts(&self) -> &[PersonalizedConcept<S>] {
        &self.entries
    }

    /// Adds an already-encoded concept and binds it into `backbone`.
    pub fn insert(&mut self, concept: PersonalizedConcept<S>, backbone: &mut dyn LanguageBackbone<S>) -> Result<ConceptHandle> {
        if !tokenizer::is_concept_name(&concept.name) {
            return Err(PlvmError::InvalidConceptName(concept.name));
        }
        if self.contains(&concept.name) {
            return Err(PlvmError::DuplicateConcept(concept.name));
        }
        let token_id = backbone.extend_vocab(&concept)?;
        let handle = ConceptHandle {
            name: concept.name.clone(),
            token_id,
            k: concept.k(),
        };
        self.entries.push(concept);
        Ok(handle)
    }

    pub fn remove(&mut self, name: &str, backbone: &mut dyn LanguageBackbone<S>) -> Result<PersonalizedConcept<S>> {
        let i = self
            .entries
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| PlvmError::UnknownConcept(name.to_string()))?;
        backbone.remove_concept(name)?;
        Ok(self.entries.remove(i))
    }

    /// Per-entry hashes, for checking that registration leaves other entries alone.
    pub fn entry_hashes(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|c| {
                let mut h = Sha256::new();
                h.update(c.name.as_bytes());
                hash_matrix(&mut h, "word", &Matrix::row_vector(c.word_embedding.clone()));
                hash_matrix(&mut h, "head", &Matrix::row_vector(c.head_weight.clone()));
                hash_matrix(&mut h, "context", &c.context_tokens);
                h.update(c.source_image_id.as_bytes());
                h.update(c.encoder_id.as_bytes());
                (c.name.clone(), hex::encode(h.finalize()))
            })
            .collect()
    }

    fn k_of(&self, names: &[String]) -> Result<Vec<(String, usize)>> {
        names.iter().map(|n| Ok((n.clone(), self.get(n)?.k()))).collect()
    }

    /// Turns slots into a backbone sequence.
    pub fn realize(&self, slots: &[Slot], backbone: &dyn LanguageBackbone<S>, images: &[Matrix<S>]) -> Result<TokenSequence<S>> {
        let mut seq = TokenSequence::new();
        for slot in slots {
            seq.push(match slot {
                Slot::Token(id) => Element::Token(*id),
                Slot::Concept(name) => Element::Token(
                    backbone
                        .concept_token(name)
                        .ok_or_else(|| PlvmError::UnknownConcept(name.clone()))?,
                ),
                Slot::Context { concept, row } => {
                    let c = self.get(concept)?;
                    if *row >= c.k() {
                        return Err(PlvmError::IndexOutOfRange {
                            index: row + 1,
                            max: c.k(),
                        });
                    }
                    Element::Soft(c.context_tokens.row(*row).to_vec())
                }
                Slot::Image(i) => Element::Image(
                    images
                        .get(*i)
                        .cloned()
                        .ok_or(PlvmError::IndexOutOfRange {
                            index: i + 1,
                            max: images.len(),
                        })?,
                ),
            });
        }
        Ok(seq)
    }

    /// Concept prefixes followed by the instruction tokens.
    pub fn build_system_prompt(
        &self,
        backbone: &dyn LanguageBackbone<S>,
        concept_names: &[String],
        instruction: &str,
    ) -> Result<TokenSequence<S>> {
        let tok = backbone.tokenizer();
        let mut slots = prefix_slots(tok, &self.k_of(concept_names)?);
        slots.extend(text_slots(tok, instruction));
        self.realize(&slots, backbone, &[])
    }

    /// Full chat turn sequence, ready for generation.
    pub fn chat_sequence(
        &self,
        backbone: &dyn LanguageBackbone<S>,
        plan: &PromptPlan,
        images: &[Matrix<S>],
    ) -> Result<TokenSequence<S>> {
        if plan.images != images.len() {
            return Err(PlvmError::LengthMismatch(format!(
                "plan expects {} images, got {}",
                plan.images,
                images.len()
            )));
        }
        let tok = backbone.tokenizer();
        let instruction = text_slots(tok, &plan.instruction);
        let slots = chat_slots(tok, &self.k_of(&plan.concepts)?, plan.images, &instruction);
        self.realize(&slots, backbone, images)
    }

    /// Greedy answer to one chat turn.
    pub fn answer(
        &self,
        backbone: &dyn LanguageBackbone<S>,
        plan: &PromptPlan,
        images: &[Matrix<S>],
        max_new: usize,
    ) -> Result<(String, Generation)> {
        let seq = self.chat_sequence(backbone, plan, images)?;
        let generation = backbone.generate(&seq, max_new)?;
        Ok((backbone.decode(&generation.tokens), generation))
    }

    /// Asks the backbone to describe context token `i` (1-based) of a concept.
    pub fn describe_token_probe(&self, concept_name: &str, i: usize, backbone: &dyn LanguageBackbone<S>) -> Result<String> {
        let c = self.get(concept_name)?;
        if i == 0 || i > c.k() {
            return Err(PlvmError::IndexOutOfRange { index: i, max: c.k() });
        }
        let tok = backbone.tokenizer();
        let instruction = probe_instruction(tok, concept_name, i - 1);
        let slots = chat_slots(tok, &[(concept_name.to_string(), c.k())], 0, &instruction);
        let seq = self.realize(&slots, backbone, &[])?;
        let generation = backbone.generate(&seq, PROBE_MAX_NEW)?;
        Ok(backbone.decode(&generation.tokens))
    }
}

/// Encodes `image` with the frozen encoder and aligner, binds the result into
/// the backbone and stores it. Nothing is trained.
pub fn register_concept<S: Scalar>(
    registry: &mut ConceptRegistry<S>,
    name: &str,
    image: &Image,
    encoder: &dyn FeatureExtractor<S>,
    aligner: &AlignerParams<S>,
    backbone: &mut dyn LanguageBackbone<S>,
) -> Result<ConceptHandle> {
    if !tokenizer::is_concept_name(name) {
        return Err(PlvmError::InvalidConceptName(name.to_string()));
    }
    if registry.contains(name) {
        return Err(PlvmError::DuplicateConcept(name.to_string()));
    }
    let d_lm = backbone.spec().d_lm;
    if aligner.d_lm() != d_lm {
        return Err(PlvmError::DimensionMismatch {
            what: "aligner output width vs backbone d_lm",
            expected: d_lm,
            actual: aligner.d_lm(),
        });
    }
    let d_enc = encoder.spec().feature_dim;
    if aligner.config.d_enc != d_enc {
        return Err(PlvmError::DimensionMismatch {
            what: "encoder feature width vs aligner input",
            expected: aligner.config.d_enc,
            actual: d_enc,
        });
    }
    let z = encoder.extract(image)?;
    let concept = aligner.encode_concept(name, &z, &image.id)?;
    registry.insert(concept, backbone)
}
