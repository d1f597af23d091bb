//! Reference-image feature extraction.
//!
//! Every extractor emits an `L × d_enc` matrix whose row 0 is the global
//! token. The registry always contains the deterministic `toy` encoders;
//! pretrained ViT-family adapters are registered on demand and read their
//! weights from `PLVM_WEIGHTS_DIR`.

mod safetensors;
mod toy;
mod vit;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use toy::{ToyEncoder, ToyEncoderConfig};
pub use vit::{VitAdapter, VitConfig, VitFamily, VitModel};

pub const WEIGHTS_DIR_ENV: &str = "PLVM_WEIGHTS_DIR";

/// Resize plus per-channel normalization, applied before the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub width: usize,
    pub height: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
    pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
    pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

    pub fn square(size: usize, mean: [f64; 3], std: [f64; 3]) -> Self {
        Self {
            width: size,
            height: size,
            mean,
            std,
        }
    }

    /// Returns `height × width × 3` normalized values, row-major.
    pub fn apply<S: Scalar>(&self, image: &Image) -> Result<Vec<S>> {
        let resized = image.resized(self.width, self.height)?;
        Ok(resized
            .pixels()
            .chunks_exact(3)
            .flat_map(|px| {
                (0..3).map(move |c| S::of((px[c] as f64 / 255.0 - self.mean[c]) / self.std[c]))
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: String,
    pub sequence_length: usize,
    pub feature_dim: usize,
    pub preprocessing: Preprocessing,
}

/// Encoder output for one reference image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefFeatures<S> {
    tokens: Matrix<S>,
    pub encoder_id: String,
}

impl<S: Scalar> RefFeatures<S> {
    pub fn new(tokens: Matrix<S>, encoder_id: impl Into<String>) -> Result<Self> {
        if tokens.rows() < 2 {
            return Err(PlvmError::InvalidConfig(format!(
                "reference features need a global token and at least one patch token, got {} rows",
                tokens.rows()
            )));
        }
        if !tokens.all_finite() {
            return Err(PlvmError::InvalidConfig("non-finite reference features".into()));
        }
        Ok(Self {
            tokens,
            encoder_id: encoder_id.into(),
        })
    }

    pub fn tokens(&self) -> &Matrix<S> {
        &self.tokens
    }

    pub fn sequence_length(&self) -> usize {
        self.tokens.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn global_token(&self) -> &[S] {
        self.tokens.row(0)
    }

    /// Rows `1..L`.
    pub fn patch_tokens(&self) -> Matrix<S> {
        self.tokens.slice_rows(1, self.tokens.rows() - 1)
    }

    pub fn into_tokens(self) -> Matrix<S> {
        self.tokens
    }
}

pub trait FeatureExtractor<S: Scalar>: Send + Sync {
    fn spec(&self) -> &EncoderSpec;

    /// Returns a `(sequence_length, feature_dim)` matrix.
    fn extract(&self, image: &Image) -> Result<RefFeatures<S>>;
}

/// Named extractors in registration order.
pub struct EncoderRegistry<S: Scalar> {
    entries: Vec<Arc<dyn FeatureExtractor<S>>>,
}

impl<S: Scalar> Default for EncoderRegistry<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> EncoderRegistry<S> {
    /// Holds the `toy` (L = 257) and `toy-small` (L = 26) encoders.
    pub fn new() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register(Arc::new(ToyEncoder::new(ToyEncoderConfig::standard())))
            .expect("fresh registry");
        r.register(Arc::new(ToyEncoder::new(ToyEncoderConfig::small())))
            .expect("fresh registry");
        r
    }

    pub fn register(&mut self, extractor: Arc<dyn FeatureExtractor<S>>) -> Result<()> {
        let name = &extractor.spec().name;
        if self.entries.iter().any(|e| &e.spec().name == name) {
            return Err(PlvmError::DuplicateEncoder(name.clone()));
        }
        self.entries.push(extractor);
        Ok(())
    }

    /// Registers one of the pretrained presets (`dinov2-base`, `vit-base`,
    /// `clip-large`). Weights load lazily from `$PLVM_WEIGHTS_DIR/<name>/`.
    pub fn register_pretrained(&mut self, name: &str) -> Result<()> {
        let config = VitConfig::preset(name).ok_or_else(|| PlvmError::UnknownEncoder(name.into()))?;
        self.register(Arc::new(VitAdapter::from_env(config)))
    }

    pub fn list(&self) -> Vec<EncoderSpec> {
        self.entries.iter().map(|e| e.spec().clone()).collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FeatureExtractor<S>>> {
        self.entries
            .iter()
            .find(|e| e.spec().name == name)
            .cloned()
            .ok_or_else(|| PlvmError::UnknownEncoder(name.into()))
    }

    pub fn extract(&self, image: &Image, encoder: &str) -> Result<RefFeatures<S>> {
        let enc = self.get(encoder)?;
        let features = enc.extract(image)?;
        let spec = enc.spec();
        debug_assert_eq!(
            (features.sequence_length(), features.feature_dim()),
            (spec.sequence_length, spec.feature_dim)
        );
        Ok(features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_registry_lists_toy_first() {
        let r = EncoderRegistry::<f64>::new();
        let names: Vec<_> = r.list().into_iter().map(|s| s.name).collect();
        assert_eq!(names, vec!["toy", "toy-small"]);
    }

    #[test]
    fn pretrained_presets_report_their_sequence_lengths() {
        let mut r = EncoderRegistry::<f32>::new();
        r.register_pretrained("clip-large").unwrap();
        r.register_pretrained("vit-base").unwrap();
        r.register_pretrained("dinov2-base").unwrap();
        let specs = r.list();
        let len = |n: &str| specs.iter().find(|s| s.name == n).unwrap().sequence_length;
        assert_eq!(len("clip-large"), 257);
        assert_eq!(len("vit-base"), 197);
        assert_eq!(len("dinov2-base"), 257);
        assert!(matches!(r.register_pretrained("clip-large"), Err(PlvmError::DuplicateEncoder(_))));
        assert!(matches!(r.register_pretrained("sam"), Err(PlvmError::UnknownEncoder(_))));
    }

    #[test]
    fn unknown_encoder_is_an_error() {
        let r = EncoderRegistry::<f64>::new();
        let img = Image::filled("a", 8, 8, [0, 0, 0]).unwrap();
        assert!(matches!(r.extract(&img, "nope"), Err(PlvmError::UnknownEncoder(_))));
    }

    #[test]
    fn ref_features_validate_shape_and_finiteness() {
        assert!(RefFeatures::new(Matrix::<f64>::zeros(1, 4), "x").is_err());
        let mut m = Matrix::<f64>::zeros(3, 4);
        m.set(1, 1, f64::NAN);
        assert!(RefFeatures::new(m, "x").is_err());
    }
}
