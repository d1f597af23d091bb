//! Pretrained ViT-family encoders (DINOv2, ViT, CLIP vision tower) loaded from
//! safetensors checkpoints laid out with Hugging Face parameter names.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::safetensors::{self, SafeTensors};
use super::{EncoderSpec, FeatureExtractor, Preprocessing, RefFeatures, WEIGHTS_DIR_ENV};
use crate::autodiff::softmax_rows;
use crate::error::{PlvmError, Result};
use crate::image::Image;
use crate::nn::{LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VitFamily {
    Dinov2,
    Vit,
    Clip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub name: String,
    pub family: VitFamily,
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub layer_norm_eps: f64,
    /// Side of the grid the position embeddings were trained at.
    pub position_grid: usize,
    pub preprocessing: Preprocessing,
}

impl VitConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let cfg = match name {
            "dinov2-base" => Self {
                name: name.into(),
                family: VitFamily::Dinov2,
                image_size: 224,
                patch_size: 14,
                width: 768,
                depth: 12,
                heads: 12,
                mlp_dim: 3072,
                layer_norm_eps: 1e-6,
                position_grid: 37,
                preprocessing: Preprocessing::square(224, Preprocessing::IMAGENET_MEAN, Preprocessing::IMAGENET_STD),
            },
            "vit-base" => Self {
                name: name.into(),
                family: VitFamily::Vit,
                image_size: 224,
                patch_size: 16,
                width: 768,
                depth: 12,
                heads: 12,
                mlp_dim: 3072,
                layer_norm_eps: 1e-12,
                position_grid: 14,
                preprocessing: Preprocessing::square(224, [0.5; 3], [0.5; 3]),
            },
            "clip-large" => Self {
                name: name.into(),
                family: VitFamily::Clip,
                image_size: 224,
                patch_size: 14,
                width: 1024,
                depth: 24,
                heads: 16,
                mlp_dim: 4096,
                layer_norm_eps: 1e-5,
                position_grid: 16,
                preprocessing: Preprocessing::square(224, Preprocessing::CLIP_MEAN, Preprocessing::CLIP_STD),
            },
            _ => return None,
        };
        Some(cfg)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn sequence_length(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn spec(&self) -> EncoderSpec {
        EncoderSpec {
            name: self.name.clone(),
            sequence_length: self.sequence_length(),
            feature_dim: self.width,
            preprocessing: self.preprocessing.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block<S> {
    norm1: LayerNorm<S>,
    query: Linear<S>,
    key: Linear<S>,
    value: Linear<S>,
    proj: Linear<S>,
    scale1: Option<Matrix<S>>,
    norm2: LayerNorm<S>,
    fc1: Linear<S>,
    fc2: Linear<S>,
    scale2: Option<Matrix<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VitModel<S> {
    config: VitConfig,
    /// `(3·p·p) × width`, input flattened channel-major like a conv kernel.
    patch: Linear<S>,
    cls: Matrix<S>,
    positions: Matrix<S>,
    pre_norm: Option<LayerNorm<S>>,
    blocks: Vec<Block<S>>,
    final_norm: Option<LayerNorm<S>>,
}

struct Names {
    prefix: &'static str,
}

impl<S: Scalar> VitModel<S> {
    /// Randomly initialized; useful for fixtures and shape checks.
    pub fn random<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Self {
        let w = config.width;
        let patch_dim = 3 * config.patch_size * config.patch_size;
        let dino = config.family == VitFamily::Dinov2;
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: LayerNorm::new(w),
                query: Linear::new(w, w, rng),
                key: Linear::new(w, w, rng),
                value: Linear::new(w, w, rng),
                proj: Linear::new(w, w, rng),
                scale1: dino.then(|| Matrix::filled(1, w, S::one())),
                norm2: LayerNorm::new(w),
                fc1: Linear::new(w, config.mlp_dim, rng),
                fc2: Linear::new(config.mlp_dim, w, rng),
                scale2: dino.then(|| Matrix::filled(1, w, S::one())),
            })
            .collect();
        let grid = config.position_grid;
        Self {
            patch: Linear::new(patch_dim, w, rng),
            cls: Matrix::trunc_normal(1, w, 0.02, rng),
            positions: Matrix::trunc_normal(grid * grid + 1, w, 0.02, rng),
            pre_norm: (config.family == VitFamily::Clip).then(|| LayerNorm::new(w)),
            blocks,
            final_norm: (config.family != VitFamily::Clip).then(|| LayerNorm::new(w)),
            config,
        }
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    fn names(config: &VitConfig, st: &SafeTensors) -> Names {
        let prefix = match config.family {
            VitFamily::Clip => "vision_model.",
            VitFamily::Vit if st.contains("vit.embeddings.cls_token") => "vit.",
            VitFamily::Dinov2 if st.contains("dinov2.embeddings.cls_token") => "dinov2.",
            _ => "",
        };
        Names { prefix }
    }

    pub fn load(config: VitConfig, st: &SafeTensors) -> Result<Self> {
        let Names { prefix } = Self::names(&config, st);
        let w = config.width;
        let get = |name: &str| st.get(&format!("{prefix}{name}"));
        let vec_of = |name: &str| -> Result<Matrix<S>> {
            let t = get(name)?;
            Ok(Matrix::from_vec(1, t.data.len(), t.data.iter().map(|&v| S::of(v as f64)).collect()))
        };
        let linear = |name: &str, bias: bool| -> Result<Linear<S>> {
            let t = get(&format!("{name}.weight"))?;
            let (out, inp) = (t.shape[0], t.data.len() / t.shape[0]);
            let weight = Matrix::from_vec(out, inp, t.data.iter().map(|&v| S::of(v as f64)).collect()).transpose();
            let bias = if bias {
                vec_of(&format!("{name}.bias"))?
            } else {
                Matrix::zeros(1, out)
            };
            Ok(Linear { weight, bias })
        };
        let norm = |name: &str| -> Result<LayerNorm<S>> {
            Ok(LayerNorm {
                gamma: vec_of(&format!("{name}.weight"))?,
                beta: vec_of(&format!("{name}.bias"))?,
            })
        };
        let (patch, cls, positions_raw, pre_norm, final_norm) = match config.family {
            VitFamily::Clip => (
                linear("embeddings.patch_embedding", false)?,
                vec_of("embeddings.class_embedding")?,
                get("embeddings.position_embedding.weight")?,
                Some(norm("pre_layrnorm")?),
                None,
            ),
            VitFamily::Vit | VitFamily::Dinov2 => (
                linear("embeddings.patch_embeddings.projection", true)?,
                vec_of("embeddings.cls_token")?,
                get("embeddings.position_embeddings")?,
                None,
                Some(norm("layernorm")?),
            ),
        };
        let npos = positions_raw.data.len() / w;
        let positions = Matrix::from_vec(npos, w, positions_raw.data.iter().map(|&v| S::of(v as f64)).collect());
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let block = match config.family {
                VitFamily::Clip => {
                    let p = format!("encoder.layers.{i}");
                    Block {
                        norm1: norm(&format!("{p}.layer_norm1"))?,
                        query: linear(&format!("{p}.self_attn.q_proj"), true)?,
                        key: linear(&format!("{p}.self_attn.k_proj"), true)?,
                        value: linear(&format!("{p}.self_attn.v_proj"), true)?,
                        proj: linear(&format!("{p}.self_attn.out_proj"), true)?,
                        scale1: None,
                        norm2: norm(&format!("{p}.layer_norm2"))?,
                        fc1: linear(&format!("{p}.mlp.fc1"), true)?,
                        fc2: linear(&format!("{p}.mlp.fc2"), true)?,
                        scale2: None,
                    }
                }
                VitFamily::Vit => {
                    let p = format!("encoder.layer.{i}");
                    Block {
                        norm1: norm(&format!("{p}.layernorm_before"))?,
                        query: linear(&format!("{p}.attention.attention.query"), true)?,
                        key: linear(&format!("{p}.attention.attention.key"), true)?,
                        value: linear(&format!("{p}.attention.attention.value"), true)?,
                        proj: linear(&format!("{p}.attention.output.dense"), true)?,
                        scale1: None,
                        norm2: norm(&format!("{p}.layernorm_after"))?,
                        fc1: linear(&format!("{p}.intermediate.dense"), true)?,
                        fc2: linear(&format!("{p}.output.dense"), true)?,
                        scale2: None,
                    }
                }
                VitFamily::Dinov2 => {
                    let p = format!("encoder.layer.{i}");
                    Block {
                        norm1: norm(&format!("{p}.norm1"))?,
                        query: linear(&format!("{p}.attention.attention.query"), true)?,
                        key: linear(&format!("{p}.attention.attention.key"), true)?,
                        value: linear(&format!("{p}.attention.attention.value"), true)?,
                        proj: linear(&format!("{p}.attention.output.dense"), true)?,
                        scale1: Some(vec_of(&format!("{p}.layer_scale1.lambda1"))?),
                        norm2: norm(&format!("{p}.norm2"))?,
                        fc1: linear(&format!("{p}.mlp.fc1"), true)?,
                        fc2: linear(&format!("{p}.mlp.fc2"), true)?,
                        scale2: Some(vec_of(&format!("{p}.layer_scale2.lambda1"))?),
                    }
                }
            };
            blocks.push(block);
        }
        if patch.output_dim() != w || cls.cols() != w {
            return Err(PlvmError::DimensionMismatch {
                what: "vit embedding width",
                expected: w,
                actual: patch.output_dim(),
            });
        }
        Ok(Self {
            config,
            patch,
            cls,
            positions,
            pre_norm,
            blocks,
            final_norm,
        })
    }

    /// Exports with the parameter names [`VitModel::load`] expects.
    pub fn to_safetensors(&self) -> Vec<u8> {
        let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        let f32s = |m: &Matrix<S>| m.as_slice().iter().map(|v| v.to_f64_lossless() as f32).collect::<Vec<_>>();
        let linear = |out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: String, l: &Linear<S>, bias: bool| {
            let wt = l.weight.transpose();
            out.push((format!("{name}.weight"), vec![wt.rows(), wt.cols()], f32s(&wt)));
            if bias {
                out.push((format!("{name}.bias"), vec![l.bias.cols()], f32s(&l.bias)));
            }
        };
        let norm = |out: &mut Vec<(String, Vec<usize>, Vec<f32>)>, name: String, n: &LayerNorm<S>| {
            out.push((format!("{name}.weight"), vec![n.gamma.cols()], f32s(&n.gamma)));
            out.push((format!("{name}.bias"), vec![n.beta.cols()], f32s(&n.beta)));
        };
        let w = self.config.width;
        let npos = self.positions.rows();
        match self.config.family {
            VitFamily::Clip => {
                let p = "vision_model.";
                linear(&mut out, format!("{p}embeddings.patch_embedding"), &self.patch, false);
                out.push((format!("{p}embeddings.class_embedding"), vec![w], f32s(&self.cls)));
                out.push((format!("{p}embeddings.position_embedding.weight"), vec![npos, w], f32s(&self.positions)));
                norm(&mut out, format!("{p}pre_layrnorm"), self.pre_norm.as_ref().expect("clip pre-norm"));
                for (i, b) in self.blocks.iter().enumerate() {
                    let q = format!("{p}encoder.layers.{i}");
                    norm(&mut out, format!("{q}.layer_norm1"), &b.norm1);
                    linear(&mut out, format!("{q}.self_attn.q_proj"), &b.query, true);
                    linear(&mut out, format!("{q}.self_attn.k_proj"), &b.key, true);
                    linear(&mut out, format!("{q}.self_attn.v_proj"), &b.value, true);
                    linear(&mut out, format!("{q}.self_attn.out_proj"), &b.proj, true);
                    norm(&mut out, format!("{q}.layer_norm2"), &b.norm2);
                    linear(&mut out, format!("{q}.mlp.fc1"), &b.fc1, true);
                    linear(&mut out, format!("{q}.mlp.fc2"), &b.fc2, true);
                }
            }
            family => {
                linear(&mut out, "embeddings.patch_embeddings.projection".into(), &self.patch, true);
                out.push(("embeddings.cls_token".into(), vec![1, 1, w], f32s(&self.cls)));
                out.push(("embeddings.position_embeddings".into(), vec![1, npos, w], f32s(&self.positions)));
                norm(&mut out, "layernorm".into(), self.final_norm.as_ref().expect("final norm"));
                for (i, b) in self.blocks.iter().enumerate() {
                    let q = format!("encoder.layer.{i}");
                    let (n1, n2, f1, f2) = if family == VitFamily::Dinov2 {
                        ("norm1", "norm2", "mlp.fc1", "mlp.fc2")
                    } else {
                        ("layernorm_before", "layernorm_after", "intermediate.dense", "output.dense")
                    };
                    norm(&mut out, format!("{q}.{n1}"), &b.norm1);
                    linear(&mut out, format!("{q}.attention.attention.query"), &b.query, true);
                    linear(&mut out, format!("{q}.attention.attention.key"), &b.key, true);
                    linear(&mut out, format!("{q}.attention.attention.value"), &b.value, true);
                    linear(&mut out, format!("{q}.attention.output.dense"), &b.proj, true);
                    norm(&mut out, format!("{q}.{n2}"), &b.norm2);
                    linear(&mut out, format!("{q}.{f1}"), &b.fc1, true);
                    linear(&mut out, format!("{q}.{f2}"), &b.fc2, true);
                    if let (Some(s1), Some(s2)) = (&b.scale1, &b.scale2) {
                        out.push((format!("{q}.layer_scale1.lambda1"), vec![w], f32s(s1)));
                        out.push((format!("{q}.layer_scale2.lambda1"), vec![w], f32s(s2)));
                    }
                }
            }
        }
        let refs: Vec<(&str, Vec<usize>, Vec<f32>)> =
            out.iter().map(|(n, s, d)| (n.as_str(), s.clone(), d.clone())).collect();
        safetensors::write_f32(&refs)
    }

    pub fn forward(&self, image: &Image) -> Result<Matrix<S>> {
        let c = &self.config;
        let input: Vec<S> = c.preprocessing.apply(image)?;
        let (size, p, grid) = (c.image_size, c.patch_size, c.grid());
        let mut patches = Matrix::zeros(grid * grid, 3 * p * p);
        for gy in 0..grid {
            for gx in 0..grid {
                let row = patches.row_mut(gy * grid + gx);
                for ch in 0..3 {
                    for y in 0..p {
                        for x in 0..p {
                            row[(ch * p + y) * p + x] = input[((gy * p + y) * size + gx * p + x) * 3 + ch];
                        }
                    }
                }
            }
        }
        let embedded = linear(&patches, &self.patch);
        let mut x = self.cls.clone();
        for r in 0..embedded.rows() {
            x.push_row(embedded.row(r));
        }
        let positions = interpolate_positions(&self.positions, grid);
        x.add_assign(&positions);
        let eps = S::of(c.layer_norm_eps);
        if let Some(n) = &self.pre_norm {
            x = layer_norm(&x, n, eps);
        }
        for b in &self.blocks {
            let h = layer_norm(&x, &b.norm1, eps);
            let mut a = self_attention(&h, b, c.heads);
            if let Some(s) = &b.scale1 {
                a = scale_cols(&a, s);
            }
            x.add_assign(&a);
            let h = layer_norm(&x, &b.norm2, eps);
            let h = linear(&h, &b.fc1);
            let h = match c.family {
                VitFamily::Clip => h.map(|v| v / (S::one() + (S::of(-1.702) * v).exp())),
                _ => h.map(|v| {
                    let f = v.to_f64_lossless();
                    S::of(0.5 * f * (1.0 + libm::erf(f / std::f64::consts::SQRT_2)))
                }),
            };
            let mut m = linear(&h, &b.fc2);
            if let Some(s) = &b.scale2 {
                m = scale_cols(&m, s);
            }
            x.add_assign(&m);
        }
        if let Some(n) = &self.final_norm {
            x = layer_norm(&x, n, eps);
        }
        Ok(x)
    }
}

fn linear<S: Scalar>(x: &Matrix<S>, l: &Linear<S>) -> Matrix<S> {
    let mut y = x.matmul(&l.weight);
    let b = l.bias.row(0);
    for r in 0..y.rows() {
        for (o, &v) in y.row_mut(r).iter_mut().zip(b) {
            *o = *o + v;
        }
    }
    y
}

fn scale_cols<S: Scalar>(x: &Matrix<S>, s: &Matrix<S>) -> Matrix<S> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        for (o, &v) in y.row_mut(r).iter_mut().zip(s.row(0)) {
            *o = *o * v;
        }
    }
    y
}

fn layer_norm<S: Scalar>(x: &Matrix<S>, n: &LayerNorm<S>, eps: S) -> Matrix<S> {
    let cols = S::of_usize(x.cols());
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let mean = row.iter().copied().sum::<S>() / cols;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cols;
        let inv = S::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(n.gamma.row(0)).zip(n.beta.row(0)) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    y
}

fn self_attention<S: Scalar>(h: &Matrix<S>, b: &Block<S>, heads: usize) -> Matrix<S> {
    let q = linear(h, &b.query);
    let k = linear(h, &b.key);
    let v = linear(h, &b.value);
    let width = q.cols();
    let hd = width / heads;
    let scale = S::one() / S::of_usize(hd).sqrt();
    let cols = |m: &Matrix<S>, start: usize| {
        let mut out = Matrix::zeros(m.rows(), hd);
        for r in 0..m.rows() {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + hd]);
        }
        out
    };
    let mut merged = Matrix::zeros(h.rows(), width);
    for head in 0..heads {
        let (qh, kh, vh) = (cols(&q, head * hd), cols(&k, head * hd), cols(&v, head * hd));
        let attn = softmax_rows(&qh.matmul_bt(&kh).map(|x| x * scale));
        let out = attn.matmul(&vh);
        for r in 0..out.rows() {
            merged.row_mut(r)[head * hd..(head + 1) * hd].copy_from_slice(out.row(r));
        }
    }
    linear(&merged, &b.proj)
}

/// Bicubic (a = −0.75, half-pixel centers) resampling of the patch position
/// grid; the class position is kept as is.
fn interpolate_positions<S: Scalar>(positions: &Matrix<S>, grid: usize) -> Matrix<S> {
    let n = positions.rows() - 1;
    let src = (n as f64).sqrt().round() as usize;
    if src == grid {
        return positions.clone();
    }
    let w = positions.cols();
    let weights = |out: usize, inp: usize| -> Vec<[(usize, f64); 4]> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = (o as f64 + 0.5) * scale - 0.5;
                let x0 = x.floor();
                let t = x - x0;
                let mut taps = [(0usize, 0.0f64); 4];
                for (i, tap) in taps.iter_mut().enumerate() {
                    let idx = (x0 as i64 + i as i64 - 1).clamp(0, inp as i64 - 1) as usize;
                    *tap = (idx, cubic(t + 1.0 - i as f64));
                }
                taps
            })
            .collect()
    };
    let wy = weights(grid, src);
    let mut out = Matrix::zeros(grid * grid + 1, w);
    out.row_mut(0).copy_from_slice(positions.row(0));
    for (oy, ty) in wy.iter().enumerate() {
        for (ox, tx) in wy.iter().enumerate() {
            let dst = out.row_mut(1 + oy * grid + ox);
            for &(iy, fy) in ty {
                for &(ix, fx) in tx {
                    let f = S::of(fy * fx);
                    for (d, &s) in dst.iter_mut().zip(positions.row(1 + iy * src + ix)) {
                        *d = *d + f * s;
                    }
                }
            }
        }
    }
    out
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Lazily loads `model.safetensors` from `<weights_dir>/<name>/` on first use.
pub struct VitAdapter<S> {
    config: VitConfig,
    spec: EncoderSpec,
    weights_dir: Option<PathBuf>,
    model: OnceLock<std::result::Result<VitModel<S>, String>>,
}

impl<S: Scalar> VitAdapter<S> {
    pub fn from_env(config: VitConfig) -> Self {
        let dir = std::env::var_os(WEIGHTS_DIR_ENV).map(PathBuf::from);
        Self::with_dir(config, dir)
    }

    pub fn with_dir(config: VitConfig, weights_dir: Option<PathBuf>) -> Self {
        Self {
            spec: config.spec(),
            config,
            weights_dir,
            model: OnceLock::new(),
        }
    }

    fn weights_path(&self) -> Option<PathBuf> {
        self.weights_dir
            .as_deref()
            .map(|d: &Path| d.join(&self.config.name).join("model.safetensors"))
    }

    fn model(&self) -> Result<&VitModel<S>> {
        let loaded = self.model.get_or_init(|| {
            let path = self
                .weights_path()
                .ok_or_else(|| format!("{WEIGHTS_DIR_ENV} is not set; cannot load `{}`", self.config.name))?;
            let st = SafeTensors::read(&path).map_err(|e| e.to_string())?;
            VitModel::load(self.config.clone(), &st).map_err(|e| e.to_string())
        });
        loaded
            .as_ref()
            .map_err(|e| PlvmError::InvalidConfig(format!("encoder `{}`: {e}", self.config.name)))
    }
}

impl<S: Scalar> FeatureExtractor<S> for VitAdapter<S> {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn extract(&self, image: &Image) -> Result<RefFeatures<S>> {
        let tokens = self.model()?.forward(image)?;
        RefFeatures::new(tokens, self.spec.name.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shrink(mut c: VitConfig) -> VitConfig {
        c.width = 16;
        c.depth = 1;
        c.heads = 2;
        c.mlp_dim = 32;
        c
    }

    fn fixture(family: &str, dir: &Path) -> VitModel<f32> {
        let cfg = shrink(VitConfig::preset(family).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = VitModel::<f32>::random(cfg, &mut rng);
        let sub = dir.join(family);
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::write(sub.join("model.safetensors"), model.to_safetensors()).unwrap();
        model
    }

    #[test]
    fn loads_each_family_and_emits_expected_geometry() {
        let dir = tempfile::tempdir().unwrap();
        for (family, len) in [("dinov2-base", 257), ("vit-base", 197), ("clip-large", 257)] {
            let model = fixture(family, dir.path());
            let adapter = VitAdapter::<f32>::with_dir(model.config().clone(), Some(dir.path().to_path_buf()));
            let img = Image::filled("q", 224, 224, [40, 90, 200]).unwrap();
            let f = adapter.extract(&img).unwrap();
            assert_eq!((f.sequence_length(), f.feature_dim()), (len, 16), "{family}");
            assert_eq!(f.tokens(), &model.forward(&img).unwrap());
        }
    }

    #[test]
    fn missing_weights_fail_at_extraction_not_registration() {
        let cfg = VitConfig::preset("vit-base").unwrap();
        let adapter = VitAdapter::<f32>::with_dir(cfg, None);
        assert_eq!(adapter.spec().sequence_length, 197);
        let img = Image::filled("q", 8, 8, [0, 0, 0]).unwrap();
        assert!(adapter.extract(&img).is_err());
    }

    #[test]
    fn position_interpolation_preserves_constant_grids() {
        let pos = Matrix::<f64>::filled(37 * 37 + 1, 3, 0.25);
        let out = interpolate_positions(&pos, 16);
        assert_eq!(out.rows(), 257);
        assert!(out.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
