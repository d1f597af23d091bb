use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use plvm::encoders::{FeatureExtractor, RefFeatures, ToyEncoder, ToyEncoderConfig};
use plvm::image::Image;
use plvm::recipe::toy_aligner;
use plvm::Matrix;

const D_LM: usize = 64;

fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

#[test]
fn l257_encoder_gives_k_context_tokens() {
    let enc = ToyEncoder::<f64>::new(ToyEncoderConfig::standard());
    let img = Image::filled("ref", 64, 64, [200, 120, 40]).unwrap();
    let z = enc.extract(&img).unwrap();
    assert_eq!(z.sequence_length(), 257);
    for k in [8, 12, 16, 20] {
        let al = toy_aligner::<f64>(z.feature_dim(), D_LM, k, 3).unwrap();
        let c = al.encode_concept("⟨x⟩", &z, "ref").unwrap();
        assert_eq!(c.context_tokens.shape(), (k, D_LM));
        assert_eq!((c.word_embedding.len(), c.head_weight.len()), (D_LM, D_LM));
        assert!(c.context_tokens.all_finite());
    }
}

#[test]
fn patch_perturbations_over_100_trials() {
    let mut rng = ChaCha8Rng::seed_from_u64(257);
    let al = toy_aligner::<f64>(32, D_LM, 16, 4).unwrap();
    for _ in 0..100 {
        let base = random_features(&mut rng, 257, 32);
        let z = RefFeatures::new(base.clone(), "toy").unwrap();
        let c = al.encode_concept("⟨x⟩", &z, "r").unwrap();

        // new patch rows, same global row: word and head are bit-identical
        let mut other = random_features(&mut rng, 257, 32);
        other.row_mut(0).copy_from_slice(base.row(0));
        let c2 = al.encode_concept("⟨x⟩", &RefFeatures::new(other, "toy").unwrap(), "r").unwrap();
        assert_eq!(c.word_embedding, c2.word_embedding);
        assert_eq!(c.head_weight, c2.head_weight);

        // permuted patch rows: the context tokens do not move
        let mut order: Vec<usize> = (1..257).collect();
        order.shuffle(&mut rng);
        let mut permuted = Matrix::zeros(0, 32);
        permuted.push_row(base.row(0));
        for &r in &order {
            permuted.push_row(base.row(r));
        }
        let c3 = al.encode_concept("⟨x⟩", &RefFeatures::new(permuted, "toy").unwrap(), "r").unwrap();
        let diff = c
            .context_tokens
            .as_slice()
            .iter()
            .zip(c3.context_tokens.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "permutation moved the context by {diff}");

        // new global row, same patches: the context is bit-identical
        let mut g = base.clone();
        for v in g.row_mut(0) {
            *v = rng.random_range(-2.0..2.0);
        }
        let c4 = al.encode_concept("⟨x⟩", &RefFeatures::new(g, "toy").unwrap(), "r").unwrap();
        assert_eq!(c.context_tokens, c4.context_tokens);
    }
}

#[test]
fn k_beyond_the_patch_count_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let al = toy_aligner::<f64>(32, D_LM, 20, 0).unwrap();
    let z = RefFeatures::new(random_features(&mut rng, 20, 32), "toy").unwrap();
    assert!(al.encode_concept("⟨x⟩", &z, "r").is_err());
}
