use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderSpec, FeatureExtractor, Preprocessing, RefFeatures};
use crate::error::Result;
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoderConfig {
    pub name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl ToyEncoderConfig {
    /// 64 px, 4 px patches: 256 patch tokens plus the global token.
    pub fn standard() -> Self {
        Self {
            name: "toy".into(),
            image_size: 64,
            patch_size: 4,
            feature_dim: 32,
            seed: 0x7059,
        }
    }

    /// 40 px, 8 px patches: 25 patch tokens plus the global token.
    pub fn small() -> Self {
        Self {
            name: "toy-small".into(),
            image_size: 40,
            patch_size: 8,
            feature_dim: 32,
            seed: 0x7059,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn sequence_length(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

/// Fixed random projection of non-overlapping patches, with the mean of the
/// projected patches as the global token.
pub struct ToyEncoder<S> {
    spec: EncoderSpec,
    config: ToyEncoderConfig,
    projection: Matrix<S>,
}

impl<S: Scalar> ToyEncoder<S> {
    pub fn new(config: ToyEncoderConfig) -> Self {
        assert!(
            config.patch_size >= 1 && config.image_size % config.patch_size == 0,
            "image size must be a multiple of the patch size"
        );
        let patch_dim = config.patch_size * config.patch_size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0 / (patch_dim as f64).sqrt()).expect("valid std");
        let data = (0..patch_dim * config.feature_dim)
            .map(|_| S::of(normal.sample(&mut rng)))
            .collect();
        let projection = Matrix::from_vec(patch_dim, config.feature_dim, data);
        let spec = EncoderSpec {
            name: config.name.clone(),
            sequence_length: config.sequence_length(),
            feature_dim: config.feature_dim,
            preprocessing: Preprocessing::square(config.image_size, [0.5; 3], [0.5; 3]),
        };
        Self {
            spec,
            config,
            projection,
        }
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    /// SHA-256 of the (fixed) projection.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        crate::nn::hash_matrix(&mut h, "projection", &self.projection);
        hex::encode(h.finalize())
    }
}

impl<S: Scalar> FeatureExtractor<S> for ToyEncoder<S> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn extract(&self, image: &Image) -> Result<RefFeatures<S>> {
        let input: Vec<S> = self.spec.preprocessing.apply(image)?;
        let size = self.config.image_size;
        let p = self.config.patch_size;
        let grid = self.config.grid();
        let mut patches = Matrix::zeros(grid * grid, p * p * 3);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = patches.row_mut(gy * grid + gx);
                let mut i = 0;
                for y in 0..p {
                    let base = ((gy * p + y) * size + gx * p) * 3;
                    row[i..i + p * 3].copy_from_slice(&input[base..base + p * 3]);
                    i += p * 3;
                }
            }
        }
        let projected = patches.matmul(&self.projection);
        let mut tokens = projected.mean_rows();
        for r in 0..projected.rows() {
            tokens.push_row(projected.row(r));
        }
        RefFeatures::new(tokens, self.spec.name.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_toy_emits_257_rows() {
        let enc = ToyEncoder::<f64>::new(ToyEncoderConfig::standard());
        let img = Image::filled("a", 64, 64, [12, 200, 7]).unwrap();
        let f = enc.extract(&img).unwrap();
        assert_eq!((f.sequence_length(), f.feature_dim()), (257, 32));
    }

    #[test]
    fn all_zero_image_is_deterministic() {
        let a = ToyEncoder::<f64>::new(ToyEncoderConfig::small());
        let b = ToyEncoder::<f64>::new(ToyEncoderConfig::small());
        let img = Image::filled("z", 40, 40, [0, 0, 0]).unwrap();
        let fa = a.extract(&img).unwrap();
        let fb = b.extract(&img).unwrap();
        assert_eq!(fa, a.extract(&img).unwrap());
        assert_eq!(fa, fb);
    }

    #[test]
    fn global_token_is_patch_mean() {
        let enc = ToyEncoder::<f64>::new(ToyEncoderConfig::small());
        let mut img = Image::filled("a", 40, 40, [90, 10, 250]).unwrap();
        img.put_pixel(3, 5, [0, 255, 0]);
        let f = enc.extract(&img).unwrap();
        let mean = f.patch_tokens().mean_rows();
        for (a, b) in mean.row(0).iter().zip(f.global_token()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_native_sizes_are_resized() {
        let enc = ToyEncoder::<f32>::new(ToyEncoderConfig::small());
        let img = Image::filled("a", 13, 77, [1, 2, 3]).unwrap();
        assert_eq!(enc.extract(&img).unwrap().sequence_length(), 26);
    }
}
