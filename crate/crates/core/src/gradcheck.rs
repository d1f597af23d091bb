//! Finite-difference audit of the tape gradients.
//!
//! Builds one recognition loss (w = 20, with a query image) plus one
//! attribute loss with every aligner and backbone tensor trainable, then
//! compares central differences in f64 against the backward pass: along a
//! random direction through each whole tensor, and at the entry with the
//! largest gradient plus a few random ones.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::AlignerParams;
use crate::autodiff::{Graph, Var};
use crate::backbone::TinyBackbone;
use crate::encoders::{FeatureExtractor, RefFeatures};
use crate::image::Image;
use crate::nn::Parameterized;
use crate::recipe::{toy_aligner, toy_backbone, toy_encoder};
use crate::tensor::Matrix;
use crate::training::{accumulate_gradients, answer_loss, LossConfig, TaskKind};

pub const EPS: f64 = 1e-4;
/// Floor of the relative-error denominator: the difference quotient carries
/// round-off near `|L|·ε_f64/EPS ≈ 1e-11`, so smaller gradients can only be
/// compared absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub checks: Vec<Check>,
    pub tensors: usize,
}

impl GradReport {
    pub fn worst(&self) -> &Check {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
            .expect("at least one check")
    }

    pub fn failures(&self, tol: f64) -> Vec<&Check> {
        self.checks.iter().filter(|c| c.rel_err > tol).collect()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

struct Fixture {
    reference: RefFeatures<f64>,
    query: Matrix<f64>,
}

fn fixture() -> Fixture {
    let enc = toy_encoder::<f64>();
    let img = |v: u8| {
        let mut im = Image::filled("x", 40, 40, [v, 90, 255 - v]).expect("valid size");
        for (i, p) in im.pixels_mut().iter_mut().enumerate() {
            *p = p.wrapping_add((i * 37 % 61) as u8);
        }
        im
    };
    Fixture {
        reference: enc.extract(&img(30)).expect("toy encoder"),
        query: enc.extract(&img(160)).expect("toy encoder").into_tokens(),
    }
}

fn build<'p>(g: &mut Graph<'p, f64>, al: &'p AlignerParams<f64>, bb: &'p TinyBackbone<f64>, fx: &Fixture) -> Var {
    let vars = al.encode_graph(g, &fx.reference, true).expect("fixture fits");
    let feats = g.constant(fx.query.clone());
    let block = bb.image_block_graph(g, feats, true);
    let cfg = LossConfig {
        w: 20.0,
        ..Default::default()
    };
    let rec = answer_loss(
        g,
        bb,
        true,
        &vars,
        &[block],
        "Is ⟨sks⟩ in this photo?",
        "Yes, ⟨sks⟩ is in this photo.",
        TaskKind::Recognition,
        &cfg,
    )
    .expect("fixture fits")
    .expect("leads with Yes");
    let attr = answer_loss(
        g,
        bb,
        true,
        &vars,
        &[],
        "What is ⟨sks⟩'s hair color?",
        "The hair of ⟨sks⟩ is red.",
        TaskKind::Attribute,
        &cfg,
    )
    .expect("fixture fits")
    .expect("attribute");
    g.add(rec, attr)
}

fn loss(al: &AlignerParams<f64>, bb: &TinyBackbone<f64>, fx: &Fixture) -> f64 {
    let mut g = Graph::new();
    let l = build(&mut g, al, bb, fx);
    g.scalar(l)
}

fn perturb(p: &mut dyn Parameterized<f64>, name: &str, delta: &[f64]) {
    p.visit_mut("", &mut |n, m| {
        if n == name {
            for (v, d) in m.as_mut_slice().iter_mut().zip(delta) {
                *v += d;
            }
        }
    });
}

fn check_tensor<P: Parameterized<f64> + Clone>(
    owner: &P,
    prefix: &str,
    name: &str,
    grad: Option<&Matrix<f64>>,
    f: &dyn Fn(&P) -> f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<Check>,
) {
    let len = owner
        .named_parameters()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("visited name")
        .1
        .len();
    // tensors the loss never reads (e.g. unused vocabulary rows) have no
    // tape gradient at all
    let grad = grad.map(|g| g.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; len]);
    let fd = |dir: &[f64]| {
        let plus: Vec<f64> = dir.iter().map(|d| d * EPS).collect();
        let minus: Vec<f64> = dir.iter().map(|d| -d * EPS).collect();
        let mut p = owner.clone();
        perturb(&mut p, name, &plus);
        let mut m = owner.clone();
        perturb(&mut m, name, &minus);
        (f(&p) - f(&m)) / (2.0 * EPS)
    };
    let mut push = |label: String, analytic: f64, numeric: f64| {
        out.push(Check {
            name: label,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        })
    };
    let dir: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let an: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
    push(format!("{prefix}{name}·v"), an, fd(&dir));
    let argmax = (0..len)
        .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
        .expect("non-empty tensor");
    let mut picks = vec![argmax];
    picks.extend((0..3).map(|_| rng.random_range(0..len)));
    for i in picks {
        let mut e = vec![0.0; len];
        e[i] = 1.0;
        push(format!("{prefix}{name}[{i}]"), grad[i], fd(&e));
    }
}

/// Audits every tensor of a toy aligner (k = 16) and the tiny backbone.
/// Parameters are jittered off their initial values first so that zero
/// biases and unit norms do not hide errors.
pub fn audit(seed: u64) -> GradReport {
    let fx = fixture();
    let d = toy_encoder::<f64>().spec().feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bb = toy_backbone::<f64>(d, seed).expect("toy config");
    let mut al = toy_aligner::<f64>(d, bb.d_lm(), 16, seed ^ 1).expect("toy config");
    let mut jitter = |_: String, m: &mut Matrix<f64>| {
        m.as_mut_slice().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    };
    bb.visit_mut("", &mut jitter);
    al.visit_mut("", &mut jitter);

    let mut g = Graph::new();
    let l = build(&mut g, &al, &bb, &fx);
    let grads = g.backward(l);
    let (mut ga, mut gb) = (HashMap::new(), HashMap::new());
    accumulate_gradients(&al, &grads, &mut ga);
    accumulate_gradients(&bb, &grads, &mut gb);
    drop(grads);
    drop(g);

    let mut checks = Vec::new();
    let a_names: Vec<String> = al.named_parameters().into_iter().map(|(n, _)| n).collect();
    for n in &a_names {
        let f = |a: &AlignerParams<f64>| loss(a, &bb, &fx);
        check_tensor(&al, "aligner.", n, ga.get(n), &f, &mut rng, &mut checks);
    }
    let b_names: Vec<String> = bb.named_parameters().into_iter().map(|(n, _)| n).collect();
    for n in &b_names {
        let f = |b: &TinyBackbone<f64>| loss(&al, b, &fx);
        check_tensor(&bb, "backbone.", n, gb.get(n), &f, &mut rng, &mut checks);
    }
    GradReport {
        checks,
        tensors: a_names.len() + b_names.len(),
    }
}
