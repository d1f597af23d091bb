//! The aligner: reference features in, personalized concept out.
//!
//! Two MLP heads read the global token (row 0) and predict the concept's
//! input-embedding row and output-head row. A cross-attention compressor
//! lets `k` learnable queries read the patch tokens (rows `1..L`) and
//! produces the `k` context tokens. Nothing here is per-concept: encoding a
//! new concept is a single forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::RefFeatures;
use crate::error::{PlvmError, Result};
use crate::nn::{join, Attention, LayerNorm, Linear, Mlp, Parameterized, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerConfig {
    /// Encoder feature width.
    pub d_enc: usize,
    /// Backbone embedding width.
    pub d_lm: usize,
    /// Number of context tokens / learnable queries.
    pub k: usize,
    pub mlp_hidden: usize,
    pub compressor_width: usize,
    pub compressor_blocks: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    /// Layer norm on the compressor output before the final projection.
    pub output_norm: bool,
    pub seed: u64,
}

impl AlignerConfig {
    /// Full-size defaults: 4096-wide MLPs, 4 compressor blocks of width 1024
    /// with 8 heads, 16 queries.
    pub fn new(d_enc: usize, d_lm: usize) -> Self {
        Self {
            d_enc,
            d_lm,
            k: 16,
            mlp_hidden: 4096,
            compressor_width: 1024,
            compressor_blocks: 4,
            heads: 8,
            ffn_multiplier: 4,
            output_norm: false,
            seed: 0,
        }
    }

    /// Same topology with widths small enough for desk-scale training.
    pub fn toy(d_enc: usize, d_lm: usize) -> Self {
        Self {
            mlp_hidden: 64,
            compressor_width: 32,
            heads: 4,
            ffn_multiplier: 2,
            ..Self::new(d_enc, d_lm)
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlvmError::InvalidConfig(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.d_enc == 0 || self.d_lm == 0 || self.mlp_hidden == 0 || self.compressor_width == 0 {
            return bad("aligner widths must be positive".into());
        }
        if self.heads == 0 || self.compressor_width % self.heads != 0 {
            return bad(format!(
                "compressor width {} not divisible by {} heads",
                self.compressor_width, self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorBlock<S> {
    pub query_norm: LayerNorm<S>,
    pub context_norm: LayerNorm<S>,
    pub cross_attention: Attention<S>,
    pub ffn_norm: LayerNorm<S>,
    pub ffn: Mlp<S>,
}

/// Pre-norm cross-attention transformer over the patch tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Compressor<S> {
    pub context_in: Linear<S>,
    pub blocks: Vec<CompressorBlock<S>>,
    pub output_norm: Option<LayerNorm<S>>,
    pub output: Linear<S>,
}

impl<S: Scalar> Compressor<S> {
    /// `queries`: `k × width`; `patches`: `(L−1) × d_enc`.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, queries: Var, patches: Var, trainable: bool) -> Var {
        let context = self.context_in.forward(g, patches, trainable);
        let mut x = queries;
        for b in &self.blocks {
            let q = b.query_norm.forward(g, x, trainable);
            let c = b.context_norm.forward(g, context, trainable);
            let a = b.cross_attention.forward(g, q, c, false, trainable);
            x = g.add(x, a);
            let h = b.ffn_norm.forward(g, x, trainable);
            let f = b.ffn.forward(g, h, trainable);
            x = g.add(x, f);
        }
        if let Some(n) = &self.output_norm {
            x = n.forward(g, x, trainable);
        }
        self.output.forward(g, x, trainable)
    }
}

impl<S: Scalar> Parameterized<S> for Compressor<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        self.context_in.visit(&join(prefix, "context_in"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.query_norm.visit(&join(&p, "query_norm"), f);
            b.context_norm.visit(&join(&p, "context_norm"), f);
            b.cross_attention.visit(&join(&p, "cross_attention"), f);
            b.ffn_norm.visit(&join(&p, "ffn_norm"), f);
            b.ffn.visit(&join(&p, "ffn"), f);
        }
        if let Some(n) = &self.output_norm {
            n.visit(&join(prefix, "output_norm"), f);
        }
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        self.context_in.visit_mut(&join(prefix, "context_in"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("blocks.{i}"));
            b.query_norm.visit_mut(&join(&p, "query_norm"), f);
            b.context_norm.visit_mut(&join(&p, "context_norm"), f);
            b.cross_attention.visit_mut(&join(&p, "cross_attention"), f);
            b.ffn_norm.visit_mut(&join(&p, "ffn_norm"), f);
            b.ffn.visit_mut(&join(&p, "ffn"), f);
        }
        if let Some(n) = &mut self.output_norm {
            n.visit_mut(&join(prefix, "output_norm"), f);
        }
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Trainable aligner parameters: both MLP heads, the compressor, and the
/// learnable queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerParams<S> {
    pub config: AlignerConfig,
    pub mlp_word: Mlp<S>,
    pub mlp_head: Mlp<S>,
    pub compressor: Compressor<S>,
    /// `k × compressor_width`
    pub queries: Matrix<S>,
}

/// A named concept ready to be bound into a backbone vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizedConcept<S> {
    pub name: String,
    pub word_embedding: Vec<S>,
    pub head_weight: Vec<S>,
    /// `k × d_lm`
    pub context_tokens: Matrix<S>,
    pub source_image_id: String,
    pub encoder_id: String,
}

impl<S: Scalar> PersonalizedConcept<S> {
    pub fn k(&self) -> usize {
        self.context_tokens.rows()
    }

    pub fn d_lm(&self) -> usize {
        self.word_embedding.len()
    }
}

/// Graph handles for one encoded concept.
#[derive(Clone, Copy, Debug)]
pub struct ConceptVars {
    /// `1 × d_lm`
    pub word: Var,
    /// `1 × d_lm`
    pub head: Var,
    /// `k × d_lm`
    pub context: Var,
}

impl<S: Scalar> AlignerParams<S> {
    pub fn new(config: AlignerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = &config;
        let mlp_dims = [c.d_enc, c.mlp_hidden, c.mlp_hidden, c.d_lm];
        let mlp_word = Mlp::new(&mlp_dims, &mut rng);
        let mlp_head = Mlp::new(&mlp_dims, &mut rng);
        let w = c.compressor_width;
        let blocks = (0..c.compressor_blocks)
            .map(|_| CompressorBlock {
                query_norm: LayerNorm::new(w),
                context_norm: LayerNorm::new(w),
                cross_attention: Attention::new(w, c.heads, &mut rng),
                ffn_norm: LayerNorm::new(w),
                ffn: Mlp::new(&[w, w * c.ffn_multiplier, w], &mut rng),
            })
            .collect();
        let compressor = Compressor {
            context_in: Linear::new(c.d_enc, w, &mut rng),
            blocks,
            output_norm: c.output_norm.then(|| LayerNorm::new(w)),
            output: Linear::new(w, c.d_lm, &mut rng),
        };
        let queries = Matrix::trunc_normal(c.k, w, INIT_STD, &mut rng);
        Ok(Self {
            config,
            mlp_word,
            mlp_head,
            compressor,
            queries,
        })
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn d_lm(&self) -> usize {
        self.config.d_lm
    }

    fn check_features(&self, z: &RefFeatures<S>, need_rows: usize) -> Result<()> {
        if z.feature_dim() != self.config.d_enc {
            return Err(PlvmError::DimensionMismatch {
                what: "reference feature width",
                expected: self.config.d_enc,
                actual: z.feature_dim(),
            });
        }
        if z.sequence_length() < need_rows {
            return Err(PlvmError::InvalidConfig(format!(
                "k + 1 = {} exceeds the encoder sequence length {}",
                need_rows,
                z.sequence_length()
            )));
        }
        Ok(())
    }

    /// Word embedding from the global token.
    pub fn word_var<'p>(&'p self, g: &mut Graph<'p, S>, global: Var, trainable: bool) -> Var {
        self.mlp_word.forward(g, global, trainable)
    }

    /// Head row from the global token.
    pub fn head_var<'p>(&'p self, g: &mut Graph<'p, S>, global: Var, trainable: bool) -> Var {
        self.mlp_head.forward(g, global, trainable)
    }

    pub fn context_var<'p>(&'p self, g: &mut Graph<'p, S>, patches: Var, trainable: bool) -> Var {
        let q = g.bind(&self.queries, trainable);
        self.compressor.forward(g, q, patches, trainable)
    }

    /// Records the full encoding on `g`.
    pub fn encode_graph<'p>(&'p self, g: &mut Graph<'p, S>, z: &RefFeatures<S>, trainable: bool) -> Result<ConceptVars> {
        self.check_features(z, self.config.k + 1)?;
        let global = g.constant(Matrix::row_vector(z.global_token().to_vec()));
        let patches = g.constant(z.patch_tokens());
        Ok(ConceptVars {
            word: self.word_var(g, global, trainable),
            head: self.head_var(g, global, trainable),
            context: self.context_var(g, patches, trainable),
        })
    }

    pub fn predict_word_embedding(&self, z: &RefFeatures<S>) -> Result<Vec<S>> {
        self.check_features(z, 1)?;
        let mut g = Graph::new();
        let global = g.constant(Matrix::row_vector(z.global_token().to_vec()));
        let v = self.word_var(&mut g, global, false);
        Ok(g.value(v).as_slice().to_vec())
    }

    pub fn predict_head_weight(&self, z: &RefFeatures<S>) -> Result<Vec<S>> {
        self.check_features(z, 1)?;
        let mut g = Graph::new();
        let global = g.constant(Matrix::row_vector(z.global_token().to_vec()));
        let v = self.head_var(&mut g, global, false);
        Ok(g.value(v).as_slice().to_vec())
    }

    /// `k × d_lm` context tokens from rows `1..L`.
    pub fn compress_context(&self, z: &RefFeatures<S>) -> Result<Matrix<S>> {
        self.check_features(z, self.config.k + 1)?;
        let mut g = Graph::new();
        let patches = g.constant(z.patch_tokens());
        let v = self.context_var(&mut g, patches, false);
        Ok(g.value(v).clone())
    }

    pub fn encode_concept(&self, name: &str, z: &RefFeatures<S>, source_image_id: &str) -> Result<PersonalizedConcept<S>> {
        if name.is_empty() {
            return Err(PlvmError::InvalidConceptName(name.into()));
        }
        let mut g = Graph::new();
        let vars = self.encode_graph(&mut g, z, false)?;
        Ok(PersonalizedConcept {
            name: name.into(),
            word_embedding: g.value(vars.word).as_slice().to_vec(),
            head_weight: g.value(vars.head).as_slice().to_vec(),
            context_tokens: g.value(vars.context).clone(),
            source_image_id: source_image_id.into(),
            encoder_id: z.encoder_id.clone(),
        })
    }
}

impl<S: Scalar> Parameterized<S> for AlignerParams<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        self.mlp_word.visit(&join(prefix, "mlp_word"), f);
        self.mlp_head.visit(&join(prefix, "mlp_head"), f);
        self.compressor.visit(&join(prefix, "compressor"), f);
        f(join(prefix, "queries"), &self.queries);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        self.mlp_word.visit_mut(&join(prefix, "mlp_word"), f);
        self.mlp_head.visit_mut(&join(prefix, "mlp_head"), f);
        self.compressor.visit_mut(&join(prefix, "compressor"), f);
        f(join(prefix, "queries"), &mut self.queries);
    }
}
