//! Language-model backend contract and the tiny reference decoder.

pub mod tiny;
pub mod tokenizer;

use serde::{Deserialize, Serialize};

use crate::aligner::PersonalizedConcept;
use crate::encoders::RefFeatures;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use tiny::{TinyBackbone, TinyBackboneConfig};
pub use tokenizer::{Piece, TokenId, Tokenizer};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    /// Current vocabulary, including bound concept rows.
    pub vocab_size: usize,
    pub d_lm: usize,
    pub context_limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Element<S> {
    Token(TokenId),
    /// One `d_lm` vector injected as-is.
    Soft(Vec<S>),
    /// Image features already projected into the embedding space.
    Image(Matrix<S>),
}

impl<S: Scalar> Element<S> {
    pub fn rows(&self) -> usize {
        match self {
            Element::Token(_) | Element::Soft(_) => 1,
            Element::Image(m) => m.rows(),
        }
    }
}

/// Ordered mix of vocabulary ids, soft embeddings and image blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<S> {
    pub elements: Vec<Element<S>>,
}

impl<S> Default for TokenSequence<S> {
    fn default() -> Self {
        Self { elements: Vec::new() }
    }
}

impl<S: Scalar> TokenSequence<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens(ids: &[TokenId]) -> Self {
        Self {
            elements: ids.iter().map(|&i| Element::Token(i)).collect(),
        }
    }

    pub fn push(&mut self, e: Element<S>) {
        self.elements.push(e);
    }

    pub fn push_token(&mut self, id: TokenId) {
        self.elements.push(Element::Token(id));
    }

    pub fn extend(&mut self, other: TokenSequence<S>) {
        self.elements.extend(other.elements);
    }

    /// Number of embedding rows the sequence occupies.
    pub fn len(&self) -> usize {
        self.elements.iter().map(Element::rows).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn soft_count(&self) -> usize {
        self.elements.iter().filter(|e| matches!(e, Element::Soft(_))).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    /// Generated ids, including a final end-of-sequence id when one was emitted.
    pub tokens: Vec<TokenId>,
    /// The context limit cut generation short.
    pub truncated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

/// What the prompt layer, the registry and the service need from a language
/// model. Inference is read-only; `extend_vocab`/`remove_concept` need
/// exclusive access.
pub trait LanguageBackbone<S: Scalar>: Send + Sync {
    fn spec(&self) -> BackboneSpec;

    fn tokenizer(&self) -> &Tokenizer;

    /// Tokenizes text, resolving concept references to bound ids.
    fn encode_text(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Text for generated ids; special tokens are dropped.
    fn decode(&self, ids: &[TokenId]) -> String;

    fn embed_sequence(&self, seq: &TokenSequence<S>) -> Result<Matrix<S>>;

    fn next_token_distribution(&self, seq: &TokenSequence<S>) -> Result<Vec<S>>;

    fn generate_with(&self, seq: &TokenSequence<S>, max_new: usize, decoding: Decoding) -> Result<Generation>;

    fn generate(&self, seq: &TokenSequence<S>, max_new: usize) -> Result<Generation> {
        self.generate_with(seq, max_new, Decoding::Greedy)
    }

    /// Projects vision-encoder output into an image block.
    fn image_block(&self, features: &RefFeatures<S>) -> Result<Matrix<S>>;

    fn extend_vocab(&mut self, concept: &PersonalizedConcept<S>) -> Result<TokenId>;

    fn remove_concept(&mut self, name: &str) -> Result<()>;

    fn concept_token(&self, name: &str) -> Option<TokenId>;

    /// Hash of the pretrained weights, excluding appended concept rows.
    fn weight_hash(&self) -> String;

    /// Hash of the full state including concept rows.
    fn state_hash(&self) -> String;
}
