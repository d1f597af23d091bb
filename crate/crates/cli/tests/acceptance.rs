//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fail.
//!
//! `cargo test -p plvm-cli --test acceptance` (add `-- 7` to run only
//! criterion 7, etc.).

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plvm::archive::load_backbone;
use plvm::backbone::{LanguageBackbone, TinyBackbone};
use plvm::datagen::{score_and_filter, CandidateStatus, ClipScorer, FaceScorer, SynthesisCandidate, Thresholds};
use plvm::encoders::{FeatureExtractor, RefFeatures, ToyEncoder, ToyEncoderConfig};
use plvm::evalsuite::{round1, RecognitionMetrics};
use plvm::image::Image;
use plvm::nn::parameter_hash;
use plvm::prompting::templates::{bank_hash, NEGATIVE_JSON, POSITIVE_JSON, TEXT_ONLY_JSON};
use plvm::prompting::{TemplateBank, TemplateId, TemplateKind};
use plvm::recipe::{
    evaluate_recognition, toy_aligner, toy_backbone, toy_encoder, train_toy_aligner, world_cache, ProbeLoss, ToyWorld,
    ToyWorldConfig,
};
use plvm::training::{
    masked_lm_loss, train, weighted_recognition_loss, LossConfig, LrSchedule, OptimizerConfig, Polarity, Sampler,
    SamplerConfig, Silent, TaskKind, TrainConfig,
};
use plvm::Matrix;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>, Vec<bool>) {
    let n = rng.random_range(1..=12);
    let v = rng.random_range(2..=50);
    let d = (0..n)
        .map(|_| softmax(&(0..v).map(|_| rng.random_range(-8.0..8.0)).collect::<Vec<_>>()))
        .collect();
    let t = (0..n).map(|_| rng.random_range(0..v)).collect();
    let ind = (0..n).map(|_| rng.random_bool(0.3)).collect();
    (d, t, ind)
}

fn w(w: f64) -> LossConfig {
    LossConfig {
        w,
        ..Default::default()
    }
}

fn c1_loss_identity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (d, tg, ind) = random_instance(&mut rng);
        let a = weighted_recognition_loss(&d, &tg, &ind, &w(1.0)).map_err(|e| e.to_string())?;
        let b = masked_lm_loss(&d, &tg).map_err(|e| e.to_string())?;
        worst = worst.max((a - b).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst <= 1e-9 && secs < 10.0, format!("1000 instances, max |Δ| = {worst:.1e}, {secs:.3}s"))
}

fn c2_all_true() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (d, tg, _) = random_instance(&mut rng);
        let ind = vec![true; tg.len()];
        let base = weighted_recognition_loss(&d, &tg, &ind, &w(1.0)).unwrap();
        for wv in [2.0, 5.0, 20.0, 100.0] {
            let l = weighted_recognition_loss(&d, &tg, &ind, &w(wv)).unwrap();
            worst = worst.max((l - base).abs() / base.abs().max(1.0));
        }
    }
    check(worst <= 1e-12, format!("w ∈ {{1,2,5,20,100}} over 1000 instances, max rel Δ = {worst:.1e}"))
}

fn c3_hand_value() -> Outcome {
    let d: Vec<Vec<f64>> = [2.0f64, 0.5, 0.5].iter().map(|c| vec![(-c).exp(), 1.0 - (-c).exp()]).collect();
    let l = weighted_recognition_loss(&d, &[0, 0, 0], &[true, false, false], &w(20.0)).unwrap();
    check((l - 41.0 / 22.0).abs() < 1e-12, format!("L = {l:.15} vs 41/22 = {:.15}", 41.0 / 22.0))
}

fn c4_gradients() -> Outcome {
    let t = Instant::now();
    let r = plvm::gradcheck::audit(5);
    let secs = t.elapsed().as_secs_f64();
    let worst = r.worst();
    check(
        r.failures(1e-4).is_empty() && secs < 120.0,
        format!(
            "{} checks over {} aligner+backbone tensors, worst {} = {:.1e}, {secs:.1}s",
            r.checks.len(),
            r.tensors,
            worst.name,
            worst.rel_err
        ),
    )
}

fn c5_shapes() -> Outcome {
    let enc = ToyEncoder::<f64>::new(ToyEncoderConfig::standard());
    let z = enc.extract(&Image::filled("r", 64, 64, [10, 200, 90]).unwrap()).unwrap();
    if z.sequence_length() != 257 {
        return Err(format!("L = {}", z.sequence_length()));
    }
    for k in [8, 12, 16, 20] {
        let al = toy_aligner::<f64>(32, 64, k, k as u64).unwrap();
        let c = al.encode_concept("⟨x⟩", &z, "r").unwrap();
        if c.context_tokens.shape() != (k, 64) {
            return Err(format!("k = {k}: context shape {:?}", c.context_tokens.shape()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let al = toy_aligner::<f64>(32, 64, 16, 0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let base = Matrix::from_vec(257, 32, (0..257 * 32).map(|_| rng.random_range(-2.0..2.0)).collect());
        let c = al.encode_concept("⟨x⟩", &RefFeatures::new(base.clone(), "toy").unwrap(), "r").unwrap();
        let mut other = Matrix::from_vec(257, 32, (0..257 * 32).map(|_| rng.random_range(-2.0..2.0)).collect());
        other.row_mut(0).copy_from_slice(base.row(0));
        let c2 = al.encode_concept("⟨x⟩", &RefFeatures::new(other, "toy").unwrap(), "r").unwrap();
        if c.word_embedding != c2.word_embedding || c.head_weight != c2.head_weight {
            return Err("word/head moved under a patch perturbation".into());
        }
        let mut order: Vec<usize> = (1..257).collect();
        order.shuffle(&mut rng);
        let mut perm = Matrix::zeros(0, 32);
        perm.push_row(base.row(0));
        order.iter().for_each(|&r| perm.push_row(base.row(r)));
        let c3 = al.encode_concept("⟨x⟩", &RefFeatures::new(perm, "toy").unwrap(), "r").unwrap();
        for (a, b) in c.context_tokens.as_slice().iter().zip(c3.context_tokens.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst < 1e-12,
        format!("L = 257, k ∈ {{8,12,16,20}} → k×64; 100 trials: word/head bit-identical, context under patch permutation Δ = {worst:.1e}"),
    )
}

fn c6_freeze() -> Outcome {
    let world = ToyWorld::build(&ToyWorldConfig {
        identities: 4,
        per_ref: 3,
        heldout_queries: 1,
        seed: 6,
    })
    .unwrap();
    let enc = toy_encoder::<f32>();
    let bb = toy_backbone::<f32>(32, 1).unwrap();
    let cache = world_cache(&world, &enc, &bb).unwrap();
    let mut al = toy_aligner::<f32>(32, bb.d_lm(), 16, 2).unwrap();
    let before = (enc.weight_hash(), bb.state_hash(), parameter_hash(&al));
    let cfg = TrainConfig {
        steps: 500,
        optimizer: OptimizerConfig {
            batch_size: 2,
            ..Default::default()
        },
        checkpoint_every: 0,
        ..Default::default()
    };
    train(&mut al, &bb, &world.dataset(), &cache, &cfg, &mut Silent).map_err(|e| e.to_string())?;
    let after = (enc.weight_hash(), bb.state_hash(), parameter_hash(&al));
    check(
        before.0 == after.0 && before.1 == after.1 && before.2 != after.2,
        format!(
            "500 steps: encoder {}, backbone {}, aligner {}",
            if before.0 == after.0 { "unchanged" } else { "CHANGED" },
            if before.1 == after.1 { "unchanged" } else { "CHANGED" },
            if before.2 != after.2 { "changed" } else { "UNCHANGED" },
        ),
    )
}

/// The stage-2 recipe: fresh aligner against the shipped, frozen backbone.
pub const TOY_STEPS: usize = 12_000;
pub const TOY_LR: f64 = 3e-3;
pub const TOY_SEED: u64 = 11;

fn toy_config(w_: f64, steps: usize, checkpoint_every: usize) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig {
            lr: TOY_LR,
            batch_size: 4,
            weight_decay: 0.0,
            ..Default::default()
        },
        steps,
        loss: w(w_),
        sampler: SamplerConfig {
            p: 0.6,
            seed: TOY_SEED,
            ..Default::default()
        },
        schedule: LrSchedule::WarmupCosine {
            warmup: steps / 20,
            floor: 0.05,
        },
        checkpoint_every,
        dump_dir: None,
    }
}

fn shipped_backbone() -> Result<TinyBackbone<f32>, String> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../weights/tiny.plvm");
    load_backbone(&p).map_err(|e| format!("{}: {e}", p.display()))
}

fn c7_learnability() -> Outcome {
    let world = ToyWorld::build(&ToyWorldConfig {
        heldout_queries: 16,
        ..Default::default()
    })
    .unwrap();
    let enc = toy_encoder::<f32>();
    let bb = shipped_backbone()?;
    let cache = world_cache(&world, &enc, &bb).unwrap();

    // 500 full-batch steps on one fixed 32-sample batch: the loss on that
    // batch falls across every 50-step window
    let cfg = toy_config(20.0, 500, 0);
    let mut probe = ProbeLoss::new(&bb, &cache, &world.dataset(), &cfg, 32, TOY_SEED).unwrap();
    let mut al = toy_aligner::<f32>(32, bb.d_lm(), 16, TOY_SEED).unwrap();
    let opt = OptimizerConfig {
        lr: 1e-3,
        batch_size: 32,
        weight_decay: 0.0,
        ..Default::default()
    };
    probe
        .fit(&mut al, opt, LrSchedule::WarmupCosine { warmup: 25, floor: 0.05 }, 500, 50)
        .unwrap();
    let curve: Vec<String> = probe.curve.iter().map(|(_, l)| format!("{l:.4}")).collect();
    let decreasing = probe.strictly_decreasing();

    let t = Instant::now();
    let (a20, _) = train_toy_aligner(&world, &cache, &enc, &bb, &toy_config(20.0, TOY_STEPS, 0), 16, TOY_SEED, &mut Silent).unwrap();
    let m20 = evaluate_recognition(&world, &enc, &bb, &a20).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (a1, _) = train_toy_aligner(&world, &cache, &enc, &bb, &toy_config(1.0, TOY_STEPS, 0), 16, TOY_SEED, &mut Silent).unwrap();
    let m1 = evaluate_recognition(&world, &enc, &bb, &a1).unwrap();
    let fmt = |m: &RecognitionMetrics| format!("pos {:.1} neg {:.1} mean {:.1}", m.pos, m.neg, m.mean);
    check(
        m20.mean >= 90.0 && secs < 600.0 && m1.pos < m20.pos && decreasing,
        format!(
            "w=20: {} in {secs:.0}s; w=1: {}; 500-step probe loss {}",
            fmt(&m20),
            fmt(&m1),
            curve.join(" → ")
        ),
    )
}

fn c8_metrics() -> Outcome {
    let a = round1(RecognitionMetrics::new(89.5, 82.1).mean);
    let b = round1(RecognitionMetrics::new(45.7, 97.8).mean);
    check(a == 85.8 && b == 71.8, format!("(89.5, 82.1) → {a}, (45.7, 97.8) → {b}"))
}

fn c9_templates() -> Outcome {
    let b = TemplateBank::standard();
    let sizes = (b.positive.len(), b.negative.len(), b.attribute.len());
    let hashes = [
        (bank_hash(POSITIVE_JSON), "9365a3bccdf2bc541181379b8430b7a493cee91866889ea5932f9277e5d3b4b2"),
        (bank_hash(NEGATIVE_JSON), "a8bd8f37cc286374643a2f08fd520ac7f5ea0153a908502e096c6e80d47afe31"),
        (bank_hash(TEXT_ONLY_JSON), "de1300b2515f6ab124d3f245c2249962ba2041689b2a825001e3b87b00ec7329"),
    ];
    let hashed = hashes.iter().all(|(a, b)| a == b);
    let row1 = b.render(TemplateId::new(TemplateKind::RecognitionPositive, 1), "⟨sks⟩").unwrap();
    let ok_row = row1 == ("Is ⟨sks⟩ in this photo?".to_string(), "Yes, ⟨sks⟩ is in this photo.".to_string());
    check(
        sizes == (29, 30, 7) && hashed && ok_row,
        format!("sizes {sizes:?}, hashes {}, row 1 → {row1:?}", if hashed { "match" } else { "DIFFER" }),
    )
}

struct Fixed(f64);
impl ClipScorer for Fixed {
    fn score(&self, _: &Image, _: &str) -> plvm::Result<f64> {
        Ok(self.0)
    }
}
impl FaceScorer for Fixed {
    fn score(&self, _: &Image, _: &Image) -> plvm::Result<f64> {
        Ok(self.0)
    }
}

fn c10_filter() -> Outcome {
    use proptest::test_runner::{Config, TestRunner};
    let img = Image::filled("r", 4, 4, [0, 0, 0]).unwrap();
    let refs = HashMap::from([("r".to_string(), img.clone())]);
    let t = Thresholds::default();
    let mut runner = TestRunner::new(Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        proptest::prop_oneof![-1.0f64..=1.0, 0.15f64..0.25, proptest::strategy::Just(0.2)],
        proptest::prop_oneof![-1.0f64..=1.0, 0.45f64..0.55, proptest::strategy::Just(0.5)],
        0.0f64..0.5,
        0.0f64..0.5,
    );
    let law = runner.run(&strategy, |(clip, face, dc, df)| {
        let mut c = vec![SynthesisCandidate {
            candidate_id: "c".into(),
            identity_id: "i".into(),
            reference_image_id: "r".into(),
            prompt: "p".into(),
            generated_image: Some(img.clone()),
            clip_similarity: None,
            face_similarity: None,
            kept: false,
            status: CandidateStatus::Pending,
            reason: None,
        }];
        score_and_filter(&mut c, &refs, &Fixed(clip), &Fixed(face), t);
        let want = clip >= t.clip_min && face >= t.face_min;
        proptest::prop_assert_eq!(c[0].kept, want);
        if want {
            proptest::prop_assert!(t.keeps(clip + dc, face + df));
        } else {
            let stricter = Thresholds {
                clip_min: t.clip_min + dc,
                face_min: t.face_min + df,
            };
            proptest::prop_assert!(!stricter.keeps(clip, face));
        }
        Ok(())
    });
    check(law.is_ok(), format!("10000 (clip, face) pairs: keep ⇔ clip ≥ 0.2 ∧ face ≥ 0.5, monotone: {law:?}"))
}

fn c11_sampler() -> Outcome {
    use plvm::training::{AttributeQa, Dataset, IdentityPool};
    let ds = Dataset {
        identities: (0..8)
            .map(|i| IdentityPool {
                identity_id: format!("id{i}"),
                reference_image_id: format!("id{i}/ref"),
                query_image_ids: (0..4).map(|q| format!("id{i}/q{q}")).collect(),
                attributes: vec![AttributeQa {
                    template_id: 1,
                    question: "q".into(),
                    answer: "a".into(),
                }],
            })
            .collect(),
    };
    let n = 40_000;
    let batch = Sampler::new(
        &ds,
        SamplerConfig {
            p: 0.6,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap()
    .sample_batch(n);
    let rec = batch.iter().filter(|b| b.kind == TaskKind::Recognition).count();
    let pos = batch.iter().filter(|b| b.polarity == Polarity::Positive).count();
    let p_hat = pos as f64 / rec as f64;
    let z = (rec as f64 - n as f64 / 2.0) / (n as f64 * 0.25).sqrt();
    check(
        (p_hat - 0.6).abs() <= 0.015 && z.abs() <= 3.0,
        format!("{n} samples: positive rate {p_hat:.4}, recognition:attribute {rec}:{} (z = {z:.2})", n - rec),
    )
}

fn c12_registration() -> Outcome {
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;
    let enc = toy_encoder::<f32>();
    let bb = shipped_backbone()?;
    let al = toy_aligner::<f32>(32, bb.d_lm(), 16, 0).unwrap();
    let engine = plvm::runtime::Engine::new(Arc::new(enc), al, bb).unwrap();
    let state = plvm_service::AppState::new(engine);
    let before = state.weights_hash();
    let img = Image::filled("r", 40, 40, [180, 60, 30]).unwrap();
    let body = serde_json::json!({
        "name": "⟨bo⟩",
        "image": base64::engine::general_purpose::STANDARD.encode(img.encode_png().unwrap()),
    });
    let rt = tokio::runtime::Runtime::new().unwrap();
    let t = Instant::now();
    let status = rt.block_on(async {
        let req = Request::post("/concepts")
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = plvm_service::router(state.clone()).oneshot(req).await.unwrap();
        let s = resp.status();
        resp.into_body().collect().await.unwrap();
        s
    });
    let secs = t.elapsed().as_secs_f64();
    let after = state.weights_hash();
    check(
        status.as_u16() == 201 && before == after && secs < 1.0,
        format!("status {status}, weights hash {}, {:.1} ms", if before == after { "unchanged" } else { "CHANGED" }, secs * 1e3),
    )
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("loss identity at w=1", c1_loss_identity),
        ("all-true indicator independent of w", c2_all_true),
        ("hand value 41/22", c3_hand_value),
        ("finite-difference gradients", c4_gradients),
        ("k context tokens from L=257, patch invariance", c5_shapes),
        ("freeze contract", c6_freeze),
        ("toy learnability", c7_learnability),
        ("metric arithmetic", c8_metrics),
        ("template banks", c9_templates),
        ("filter law", c10_filter),
        ("sampler statistics", c11_sampler),
        ("registration makes no updates", c12_registration),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let r = std::panic::catch_unwind(f).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(d) => println!("PASS [{}] {name}: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL [{}] {name}: {d}", i + 1)
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
