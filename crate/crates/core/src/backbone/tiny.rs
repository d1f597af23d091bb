//! A small decoder-only transformer implementing [`LanguageBackbone`].
//!
//! Concept tokens live after the base vocabulary: the i-th bound concept has
//! id `base_vocab + i`, its input row is `e^word` and its head row `e^weight`.
//! Removing a concept shifts later ids down by one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{self, Piece, TokenId, Tokenizer};
use super::{BackboneSpec, Decoding, Element, Generation, LanguageBackbone, TokenSequence};
use crate::aligner::PersonalizedConcept;
use crate::autodiff::{softmax_rows, Graph, Var};
use crate::encoders::RefFeatures;
use crate::error::{PlvmError, Result};
use crate::nn::{hash_matrix, join, parameter_hash, Attention, GatedMlp, LayerNorm, Mlp, Parameterized, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyBackboneConfig {
    pub name: String,
    pub d_lm: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_multiplier: usize,
    pub context_limit: usize,
    /// Width of the vision features the projector accepts.
    pub d_vision: usize,
    pub seed: u64,
}

impl TinyBackboneConfig {
    pub fn new(d_vision: usize) -> Self {
        Self {
            name: "tiny".into(),
            d_lm: 64,
            heads: 4,
            blocks: 2,
            ffn_multiplier: 4,
            context_limit: 256,
            d_vision,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderBlock<S> {
    pub attention_norm: LayerNorm<S>,
    pub attention: Attention<S>,
    pub ffn_norm: LayerNorm<S>,
    pub ffn: GatedMlp<S>,
}

impl<S: Scalar> Parameterized<S> for DecoderBlock<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        self.attention_norm.visit(&join(prefix, "attention_norm"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.ffn_norm.visit(&join(prefix, "ffn_norm"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        self.attention_norm.visit_mut(&join(prefix, "attention_norm"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.ffn_norm.visit_mut(&join(prefix, "ffn_norm"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRows<S> {
    pub name: String,
    /// `1 × d_lm`
    pub word: Matrix<S>,
    /// `1 × d_lm`
    pub head: Matrix<S>,
}

/// Graph-level input segment.
#[derive(Clone, Debug)]
pub enum GraphInput {
    Tokens(Vec<TokenId>),
    Rows(Var),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyBackbone<S> {
    pub config: TinyBackboneConfig,
    pub tokenizer: Tokenizer,
    /// `V × d_lm`
    pub embedding: Matrix<S>,
    /// `context_limit × d_lm`
    pub positions: Matrix<S>,
    pub blocks: Vec<DecoderBlock<S>>,
    pub final_norm: LayerNorm<S>,
    /// Bias-free unembedding, `V × d_lm`.
    pub head: Matrix<S>,
    /// Vision features → embedding space.
    pub projector: Mlp<S>,
    pub concepts: Vec<ConceptRows<S>>,
}

impl<S: Scalar> TinyBackbone<S> {
    pub fn new(config: TinyBackboneConfig, tokenizer: Tokenizer) -> Result<Self> {
        if config.d_lm % config.heads != 0 || config.blocks == 0 || config.context_limit == 0 {
            return Err(PlvmError::InvalidConfig(format!(
                "tiny backbone: d_lm {} / heads {} / blocks {} / context {}",
                config.d_lm, config.heads, config.blocks, config.context_limit
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_lm;
        let v = tokenizer.len();
        let blocks = (0..config.blocks)
            .map(|_| DecoderBlock {
                attention_norm: LayerNorm::new(d),
                attention: Attention::new(d, config.heads, &mut rng),
                ffn_norm: LayerNorm::new(d),
                ffn: GatedMlp::new(d, d * config.ffn_multiplier, &mut rng),
            })
            .collect();
        Ok(Self {
            embedding: Matrix::trunc_normal(v, d, INIT_STD, &mut rng),
            positions: Matrix::trunc_normal(config.context_limit, d, INIT_STD, &mut rng),
            blocks,
            final_norm: LayerNorm::new(d),
            head: Matrix::trunc_normal(v, d, INIT_STD, &mut rng),
            projector: Mlp::new(&[config.d_vision, d, d], &mut rng),
            concepts: Vec::new(),
            tokenizer,
            config,
        })
    }

    pub fn base_vocab(&self) -> usize {
        self.tokenizer.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.base_vocab() + self.concepts.len()
    }

    pub fn d_lm(&self) -> usize {
        self.config.d_lm
    }

    /// Final normalized hidden states for `inputs`, `T × d_lm`. Token ids at
    /// or past the base vocabulary index `extra_words`.
    pub fn hidden_graph<'p>(
        &'p self,
        g: &mut Graph<'p, S>,
        inputs: &[GraphInput],
        extra_words: &[Var],
        trainable: bool,
    ) -> Result<Var> {
        let d = self.d_lm();
        let total = self.base_vocab() + extra_words.len();
        let emb = g.bind(&self.embedding, trainable);
        let table = if extra_words.is_empty() {
            emb
        } else {
            let mut parts = vec![emb];
            parts.extend_from_slice(extra_words);
            g.concat_rows(&parts)
        };
        let mut parts = Vec::with_capacity(inputs.len());
        for input in inputs {
            match input {
                GraphInput::Tokens(ids) => {
                    if let Some(&id) = ids.iter().find(|&&id| id >= total) {
                        return Err(PlvmError::TokenOutOfRange { id, vocab: total });
                    }
                    if !ids.is_empty() {
                        parts.push(g.gather_rows(table, ids));
                    }
                }
                GraphInput::Rows(v) => {
                    let width = g.shape(*v).1;
                    if width != d {
                        return Err(PlvmError::DimensionMismatch {
                            what: "injected embedding width",
                            expected: d,
                            actual: width,
                        });
                    }
                    parts.push(*v);
                }
            }
        }
        let len: usize = parts.iter().map(|&p| g.shape(p).0).sum();
        if len == 0 {
            return Err(PlvmError::LengthMismatch("empty token sequence".into()));
        }
        if len > self.config.context_limit {
            return Err(PlvmError::ContextOverflow {
                len,
                limit: self.config.context_limit,
            });
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let pos = g.bind(&self.positions, trainable);
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(x, pos);
        for block in &self.blocks {
            let h = block.attention_norm.forward(g, x, trainable);
            let a = block.attention.forward(g, h, h, true, trainable);
            x = g.add(x, a);
            let h = block.ffn_norm.forward(g, x, trainable);
            let f = block.ffn.forward(g, h, trainable);
            x = g.add(x, f);
        }
        Ok(self.final_norm.forward(g, x, trainable))
    }

    /// Logits over base vocabulary plus `extra_heads`.
    pub fn logits_graph<'p>(&'p self, g: &mut Graph<'p, S>, hidden: Var, extra_heads: &[Var], trainable: bool) -> Var {
        let head = g.bind(&self.head, trainable);
        let table = if extra_heads.is_empty() {
            head
        } else {
            let mut parts = vec![head];
            parts.extend_from_slice(extra_heads);
            g.concat_rows(&parts)
        };
        g.matmul_bt(hidden, table)
    }

    /// Image block for vision features, inside a graph.
    pub fn image_block_graph<'p>(&'p self, g: &mut Graph<'p, S>, features: Var, trainable: bool) -> Var {
        self.projector.forward(g, features, trainable)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.context_limit {
            return Err(PlvmError::ContextOverflow {
                len,
                limit: self.config.context_limit,
            });
        }
        Ok(())
    }

    /// Logits for the last position of `seq` over the current vocabulary.
    fn last_logits(&self, seq: &TokenSequence<S>) -> Result<Vec<S>> {
        self.check_len(seq.len())?;
        let mut g = Graph::new();
        let words: Vec<Var> = self.concepts.iter().map(|c| g.bind(&c.word, false)).collect();
        let heads: Vec<Var> = self.concepts.iter().map(|c| g.bind(&c.head, false)).collect();
        let mut inputs = Vec::new();
        let mut run: Vec<TokenId> = Vec::new();
        for e in &seq.elements {
            match e {
                Element::Token(id) => run.push(*id),
                Element::Soft(v) => {
                    if !run.is_empty() {
                        inputs.push(GraphInput::Tokens(std::mem::take(&mut run)));
                    }
                    inputs.push(GraphInput::Rows(g.constant(Matrix::row_vector(v.clone()))));
                }
                Element::Image(m) => {
                    if !run.is_empty() {
                        inputs.push(GraphInput::Tokens(std::mem::take(&mut run)));
                    }
                    inputs.push(GraphInput::Rows(g.constant(m.clone())));
                }
            }
        }
        if !run.is_empty() {
            inputs.push(GraphInput::Tokens(run));
        }
        let hidden = self.hidden_graph(&mut g, &inputs, &words, false)?;
        let t = g.shape(hidden).0;
        let last = g.slice_rows(hidden, t - 1, 1);
        let logits = self.logits_graph(&mut g, last, &heads, false);
        Ok(g.value(logits).row(0).to_vec())
    }
}

impl<S: Scalar> Parameterized<S> for TinyBackbone<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        f(join(prefix, "embedding"), &self.embedding);
        f(join(prefix, "positions"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        f(join(prefix, "head"), &self.head);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        f(join(prefix, "positions"), &mut self.positions);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        f(join(prefix, "head"), &mut self.head);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

fn argmax<S: Scalar>(xs: &[S]) -> usize {
    // strict comparison keeps the lowest id on ties
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl<S: Scalar> LanguageBackbone<S> for TinyBackbone<S> {
    fn spec(&self) -> BackboneSpec {
        BackboneSpec {
            name: self.config.name.clone(),
            vocab_size: self.vocab_size(),
            d_lm: self.d_lm(),
            context_limit: self.config.context_limit,
        }
    }

    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        self.tokenizer
            .encode(text)
            .into_iter()
            .map(|p| match p {
                Piece::Token(id) => Ok(id),
                Piece::Concept(name) => self
                    .concept_token(&name)
                    .ok_or(PlvmError::UnknownConcept(name)),
            })
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> String {
        let base = self.base_vocab();
        let specials = [
            self.tokenizer.bos(),
            self.tokenizer.eos(),
            self.tokenizer.unk(),
            self.tokenizer.assistant(),
        ];
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|id| !specials.contains(id))
            .filter_map(|&id| {
                if id < base {
                    self.tokenizer.piece(id)
                } else {
                    self.concepts.get(id - base).map(|c| c.name.as_str())
                }
            })
            .collect();
        tokenizer::join(&pieces)
    }

    fn embed_sequence(&self, seq: &TokenSequence<S>) -> Result<Matrix<S>> {
        self.check_len(seq.len())?;
        let d = self.d_lm();
        let base = self.base_vocab();
        let mut out = Matrix::zeros(0, d);
        for e in &seq.elements {
            match e {
                Element::Token(id) => {
                    let row = if *id < base {
                        self.embedding.row(*id)
                    } else {
                        self.concepts
                            .get(id - base)
                            .map(|c| c.word.row(0))
                            .ok_or(PlvmError::TokenOutOfRange {
                                id: *id,
                                vocab: self.vocab_size(),
                            })?
                    };
                    out.push_row(row);
                }
                Element::Soft(v) => {
                    if v.len() != d {
                        return Err(PlvmError::DimensionMismatch {
                            what: "soft embedding width",
                            expected: d,
                            actual: v.len(),
                        });
                    }
                    out.push_row(v);
                }
                Element::Image(m) => {
                    if m.cols() != d {
                        return Err(PlvmError::DimensionMismatch {
                            what: "image block width",
                            expected: d,
                            actual: m.cols(),
                        });
                    }
                    for r in 0..m.rows() {
                        out.push_row(m.row(r));
                    }
                }
            }
        }
        Ok(out)
    }

    fn next_token_distribution(&self, seq: &TokenSequence<S>) -> Result<Vec<S>> {
        let logits = self.last_logits(seq)?;
        let n = logits.len();
        Ok(softmax_rows(&Matrix::from_vec(1, n, logits)).into_vec())
    }

    fn generate_with(&self, seq: &TokenSequence<S>, max_new: usize, decoding: Decoding) -> Result<Generation> {
        if max_new == 0 {
            return Err(PlvmError::InvalidConfig("max_new must be at least 1".into()));
        }
        self.check_len(seq.len())?;
        let mut rng = match decoding {
            Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };
        let mut seq = seq.clone();
        let mut tokens = Vec::new();
        let eos = self.tokenizer.eos();
        for _ in 0..max_new {
            if seq.len() >= self.config.context_limit {
                return Ok(Generation { tokens, truncated: true });
            }
            let logits = self.last_logits(&seq)?;
            let next = match (decoding, rng.as_mut()) {
                (Decoding::Sample { temperature, .. }, Some(rng)) if temperature > 0.0 => {
                    let t = S::of(temperature);
                    let scaled = Matrix::from_vec(1, logits.len(), logits.iter().map(|&l| l / t).collect());
                    let probs = softmax_rows(&scaled);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = probs.cols() - 1;
                    for (i, p) in probs.as_slice().iter().enumerate() {
                        acc += p.to_f64_lossless();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
                _ => argmax(&logits),
            };
            tokens.push(next);
            if next == eos {
                break;
            }
            seq.push_token(next);
        }
        Ok(Generation { tokens, truncated: false })
    }

    fn image_block(&self, features: &RefFeatures<S>) -> Result<Matrix<S>> {
        if features.feature_dim() != self.config.d_vision {
            return Err(PlvmError::DimensionMismatch {
                what: "vision feature width",
                expected: self.config.d_vision,
                actual: features.feature_dim(),
            });
        }
        let mut g = Graph::new();
        let x = g.constant(features.tokens().clone());
        let y = self.image_block_graph(&mut g, x, false);
        Ok(g.value(y).clone())
    }

    fn extend_vocab(&mut self, concept: &PersonalizedConcept<S>) -> Result<TokenId> {
        if !tokenizer::is_concept_name(&concept.name) {
            return Err(PlvmError::InvalidConceptName(concept.name.clone()));
        }
        let d = self.d_lm();
        for (what, len) in [
            ("concept word embedding", concept.word_embedding.len()),
            ("concept head row", concept.head_weight.len()),
        ] {
            if len != d {
                return Err(PlvmError::DimensionMismatch { what, expected: d, actual: len });
            }
        }
        if self.concept_token(&concept.name).is_some() {
            return Err(PlvmError::DuplicateConcept(concept.name.clone()));
        }
        self.concepts.push(ConceptRows {
            name: concept.name.clone(),
            word: Matrix::row_vector(concept.word_embedding.clone()),
            head: Matrix::row_vector(concept.head_weight.clone()),
        });
        Ok(self.vocab_size() - 1)
    }

    fn remove_concept(&mut self, name: &str) -> Result<()> {
        let i = self
            .concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| PlvmError::UnknownConcept(name.to_string()))?;
        self.concepts.remove(i);
        Ok(())
    }

    fn concept_token(&self, name: &str) -> Option<TokenId> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .map(|i| self.base_vocab() + i)
    }

    fn weight_hash(&self) -> String {
        parameter_hash(self)
    }

    fn state_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.weight_hash().as_bytes());
        for c in &self.concepts {
            hash_matrix(&mut h, &format!("{}.word", c.name), &c.word);
            hash_matrix(&mut h, &format!("{}.head", c.name), &c.head);
        }
        hex::encode(h.finalize())
    }
}
