use mde_core::backend::sampler::{ddim_sample, SampleOptions};
use mde_core::backend::scenes::generate_dataset;
use mde_core::backend::train::{evaluate_loss, fit_fixed_batch};
use mde_core::backend::{checkpoint, AttentionControl, DenoiserBackend, NoiseSchedule, ToyConfig, ToyDenoiser};
use mde_core::tokens::Vocabulary;
use mde_core::types::LatentGrid;
use mde_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn untrained(seed: u64) -> ToyDenoiser<f32> {
    ToyDenoiser::new(ToyConfig::default(), Vocabulary::toy(), NoiseSchedule::default(), seed)
}

fn noise(shape: [usize; 3], seed: u64) -> LatentGrid<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product()).map(|_| StandardNormal.sample(&mut rng)).collect();
    LatentGrid::new(Tensor::from_vec(&shape, data).unwrap(), 1000).unwrap()
}

#[test]
fn untrained_forward_is_finite_with_the_latent_shape() {
    let m = untrained(0);
    let z = noise(m.latent_shape(), 1);
    let ctx = m.text_encode(&m.tokenize_padded("a red circle").unwrap()).unwrap();
    let p = m.predict_noise(&z, 500, &ctx, &AttentionControl::None).unwrap();
    assert_eq!(p.eps.shape(), &m.latent_shape()[..]);
    assert!(p.eps.all_finite());
    let layers = m.attention_layers();
    assert_eq!(p.attention.len(), layers.iter().map(|l| l.heads).sum::<usize>());
    let (err, in_range) = p.attention.normalization_error();
    assert!(err < 1e-6 && in_range);
}

#[test]
fn one_step_sampling_is_finite_and_deterministic() {
    let m = untrained(0);
    let z = LatentGrid::zeros(m.latent_shape(), 1000);
    let ids = m.tokenize_padded("a blue square").unwrap();
    let opts = SampleOptions { steps: 1, ..SampleOptions::default() };
    let a = ddim_sample(&m, &z, &ids, &opts, None).unwrap();
    let b = ddim_sample(&m, &z, &ids, &opts, None).unwrap();
    assert_eq!(a.shape(), m.latent_shape());
    assert!(a.tensor().all_finite());
    assert_eq!(a, b);
}

#[test]
fn forward_diffusion_at_zero_is_the_identity() {
    let s = NoiseSchedule::default();
    let z0 = noise([3, 8, 8], 2).into_tensor();
    let eps = noise([3, 8, 8], 3).into_tensor();
    assert_eq!(s.q_sample(&z0, &eps, 0), z0);
}

#[test]
fn zero_predictor_loss_is_the_noise_energy() {
    let mut m = untrained(0);
    for id in 0..m.params.len() {
        let shape = m.params.get(id).shape().to_vec();
        m.params.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let scenes = generate_dataset(1000, 5, 0.5).unwrap();
    let loss = evaluate_loss(&m, &scenes, 6).unwrap();
    assert!((loss - 1.0).abs() < 0.05, "zero predictor loss {loss}");
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let mut m = untrained(1);
    let scenes = generate_dataset(4, 0, 0.5).unwrap();
    let losses = fit_fixed_batch(&mut m, &scenes, 100, 2e-3, 0).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

#[test]
fn checkpoints_round_trip_and_keep_the_digest() {
    let m = untrained(3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    checkpoint::save(&m, &p, serde_json::json!({"note": "test"})).unwrap();
    let back: ToyDenoiser<f32> = checkpoint::load(&p).unwrap();
    assert_eq!(back.parameter_digest(), m.parameter_digest());
    assert!(checkpoint::load::<f32>(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn bundled_checkpoint_loads_in_both_precisions() {
    let a = mde_core::backend::pretrained::<f32>().unwrap();
    let b = mde_core::backend::pretrained::<f64>().unwrap();
    assert_eq!(a.latent_shape(), b.latent_shape());
    assert_eq!(a.vocabulary(), b.vocabulary());
}

/// Held-out loss of the bundled checkpoint at training time, times 1.5.
const C_TRAIN: f64 = 0.006470 * 1.5;

#[test]
fn bundled_checkpoint_stays_under_the_training_ceiling() {
    let m = mde_core::backend::pretrained::<f32>().unwrap();
    let held_out = generate_dataset(200, 99, 0.5).unwrap();
    let loss = evaluate_loss(&m, &held_out, 7).unwrap();
    assert!(loss <= C_TRAIN, "held-out loss {loss} above {C_TRAIN}");
}

#[test]
fn bundled_checkpoint_draws_the_captioned_object() {
    let m = mde_core::backend::pretrained::<f32>().unwrap();
    let classifier = mde_core::metrics::ToyClassifier::reference();
    let whole = mde_core::types::Mask::from_fn(32, 32, |_, _| true);
    let ids = m.tokenize_padded("a red circle").unwrap();
    let want = mde_core::metrics::Prediction {
        shape: mde_core::backend::scenes::ShapeKind::Circle,
        color: mde_core::backend::scenes::ColorName::Red,
    };
    let hits = (0..20)
        .filter(|&seed| {
            let z = ddim_sample(&m, &noise(m.latent_shape(), seed), &ids, &SampleOptions::default(), None).unwrap();
            classifier.classify(&m.decode(&z), &whole) == Some(want)
        })
        .count();
    assert!(hits >= 18, "{hits}/20 samples read as a red circle");
}
