//! Layers shared by the aligner and the tiny backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Anything that owns named parameter matrices.
pub trait Parameterized<S: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn named_parameters(&self) -> Vec<(String, &Matrix<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, m| out.push((name, m)));
        out
    }
}

/// SHA-256 over every parameter's name, shape and f64 little-endian bytes.
pub fn parameter_hash<S: Scalar>(p: &(impl Parameterized<S> + ?Sized)) -> String {
    let mut h = Sha256::new();
    p.visit("", &mut |name, m| hash_matrix(&mut h, &name, m));
    hex::encode(h.finalize())
}

pub(crate) fn hash_matrix<S: Scalar>(h: &mut Sha256, name: &str, m: &Matrix<S>) {
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_f64_lossless().to_le_bytes());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x·W + b`, with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<S> {
    pub weight: Matrix<S>,
    pub bias: Matrix<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::trunc_normal(input, output, INIT_STD, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Var, trainable: bool) -> Var {
        let w = g.bind(&self.weight, trainable);
        let b = g.bind(&self.bias, trainable);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

impl<S: Scalar> Parameterized<S> for Linear<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<S> {
    pub gamma: Matrix<S>,
    pub beta: Matrix<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, S::one()),
            beta: Matrix::zeros(1, dim),
        }
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Var, trainable: bool) -> Var {
        let n = g.layer_norm(x, S::of(LN_EPS));
        let gamma = g.bind(&self.gamma, trainable);
        let beta = g.bind(&self.beta, trainable);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

impl<S: Scalar> Parameterized<S> for LayerNorm<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

/// Linear layers with GELU between them and nothing after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<S> {
    pub layers: Vec<Linear<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `dims = [in, hidden.., out]`
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Var, trainable: bool) -> Var {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, trainable);
            if i != last {
                h = g.gelu(h);
            }
        }
        h
    }
}

impl<S: Scalar> Parameterized<S> for Mlp<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
    }
}

/// GeGLU feed-forward: `down(gelu(gate·x) ⊙ up·x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedMlp<S> {
    pub gate: Linear<S>,
    pub up: Linear<S>,
    pub down: Linear<S>,
}

impl<S: Scalar> GatedMlp<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            gate: Linear::new(dim, hidden, rng),
            up: Linear::new(dim, hidden, rng),
            down: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, x: Var, trainable: bool) -> Var {
        let a = self.gate.forward(g, x, trainable);
        let a = g.gelu(a);
        let b = self.up.forward(g, x, trainable);
        let h = g.mul(a, b);
        self.down.forward(g, h, trainable)
    }
}

impl<S: Scalar> Parameterized<S> for GatedMlp<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        self.gate.visit(&join(prefix, "gate"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        self.gate.visit_mut(&join(prefix, "gate"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Multi-head attention projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention<S> {
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub output: Linear<S>,
    pub heads: usize,
}

impl<S: Scalar> Attention<S> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            output: Linear::new(dim, dim, rng),
            heads,
        }
    }

    /// Rows of `queries` attend over rows of `context`.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p, S>,
        queries: Var,
        context: Var,
        causal: bool,
        trainable: bool,
    ) -> Var {
        let q = self.query.forward(g, queries, trainable);
        let k = self.key.forward(g, context, trainable);
        let v = self.value.forward(g, context, trainable);
        let dim = g.shape(q).1;
        let head_dim = dim / self.heads;
        let scale = S::one() / S::of_usize(head_dim).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if causal {
                scores = g.causal_mask(scores);
            }
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, merged, trainable)
    }
}

impl<S: Scalar> Parameterized<S> for Attention<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Matrix<S>)) {
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<S>)) {
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::<f64>::new(&[8, 32, 32, 16], &mut rng);
        assert_eq!((mlp.input_dim(), mlp.output_dim()), (8, 16));
        let names: Vec<String> = mlp.named_parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "layers.0.weight");
        assert_eq!(names.len(), 6);
        assert_eq!(mlp.parameter_count(), 8 * 32 + 32 + 32 * 32 + 32 + 32 * 16 + 16);
    }

    #[test]
    fn init_is_truncated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Linear::<f64>::new(64, 64, &mut rng);
        assert!(l.weight.as_slice().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert!(l.bias.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let attn = Attention::<f64>::new(8, 2, &mut rng);
        let x = Matrix::trunc_normal(4, 8, 1.0, &mut rng);
        let mut y = x.clone();
        y.row_mut(3).iter_mut().for_each(|v| *v += 5.0);
        let run = |m: &Matrix<f64>| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let o = attn.forward(&mut g, v, v, true, false);
            g.value(o).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert_eq!(a.slice_rows(0, 3), b.slice_rows(0, 3));
        assert_ne!(a.row(3), b.row(3));
    }
}
