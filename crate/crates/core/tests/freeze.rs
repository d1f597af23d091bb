use plvm::backbone::LanguageBackbone;
use plvm::encoders::FeatureExtractor;
use plvm::nn::parameter_hash;
use plvm::recipe::{toy_aligner, toy_backbone, toy_encoder, world_cache, ToyWorld, ToyWorldConfig};
use plvm::training::{train, LossConfig, OptimizerConfig, SamplerConfig, Silent, TrainConfig};

#[test]
fn after_500_steps_only_the_aligner_changed() {
    let world = ToyWorld::build(&ToyWorldConfig {
        identities: 4,
        per_ref: 3,
        heldout_queries: 1,
        seed: 5,
    })
    .unwrap();
    let enc = toy_encoder::<f32>();
    let d = enc.spec().feature_dim;
    let backbone = toy_backbone::<f32>(d, 1).unwrap();
    let cache = world_cache(&world, &enc, &backbone).unwrap();
    let mut aligner = toy_aligner::<f32>(d, backbone.d_lm(), 16, 2).unwrap();

    let before = (
        enc.weight_hash(),
        backbone.weight_hash(),
        backbone.state_hash(),
        parameter_hash(&aligner),
    );
    let vocab = backbone.vocab_size();
    let cfg = TrainConfig {
        optimizer: OptimizerConfig {
            lr: 1e-3,
            batch_size: 2,
            ..Default::default()
        },
        steps: 500,
        loss: LossConfig::default(),
        sampler: SamplerConfig::default(),
        checkpoint_every: 0,
        ..Default::default()
    };
    let summary = train(&mut aligner, &backbone, &world.dataset(), &cache, &cfg, &mut Silent).unwrap();
    assert_eq!(summary.losses.len(), 500);

    assert_eq!(enc.weight_hash(), before.0, "encoder changed");
    assert_eq!(backbone.weight_hash(), before.1, "backbone weights changed");
    assert_eq!(backbone.state_hash(), before.2, "backbone vocabulary changed");
    assert_eq!(backbone.vocab_size(), vocab);
    assert_ne!(parameter_hash(&aligner), before.3, "aligner did not train");
    // every aligner tensor moved
    let fresh = toy_aligner::<f32>(d, backbone.d_lm(), 16, 2).unwrap();
    use plvm::nn::Parameterized;
    for ((n, a), (_, b)) in aligner.named_parameters().into_iter().zip(fresh.named_parameters()) {
        assert_ne!(a, b, "{n} did not move");
    }
}
