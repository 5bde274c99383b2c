use mde_core::backend::sampler::{ddim_sample, NullSchedule, SampleOptions};
use mde_core::backend::scenes::generate_dataset;
use mde_core::backend::{DenoiserBackend, NoiseSchedule, ToyConfig, ToyDenoiser};
use mde_core::inversion::{ddim_invert, nti_optimize, reconstruct, InversionTrajectory, NtiConfig};
use mde_core::tokens::Vocabulary;

const STEPS: usize = 8;

fn model() -> ToyDenoiser<f64> {
    ToyDenoiser::new(ToyConfig::default(), Vocabulary::toy(), NoiseSchedule::default(), 7)
}

#[test]
fn zero_steps_keep_only_the_clean_latent() {
    let m = model();
    let scene = &generate_dataset(1, 0, 0.0).unwrap()[0];
    let t = ddim_invert(&m, &scene.image, &scene.caption, 0).unwrap();
    assert_eq!(t.latents.len(), 1);
    assert_eq!(t.z0(), &m.encode(&scene.image).unwrap());
}

#[test]
fn inversion_is_deterministic_and_ends_at_the_last_timestep() {
    let m = model();
    let scene = &generate_dataset(1, 1, 0.0).unwrap()[0];
    let a = ddim_invert(&m, &scene.image, &scene.caption, STEPS).unwrap();
    let b = ddim_invert(&m, &scene.image, &scene.caption, STEPS).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.steps(), STEPS);
    assert_eq!(a.z_t().timestep, 1000);
}

#[test]
fn no_inner_steps_leave_the_null_embedding_untouched() {
    let m = model();
    let scene = &generate_dataset(1, 2, 0.0).unwrap()[0];
    let traj = ddim_invert(&m, &scene.image, &scene.caption, STEPS).unwrap();
    let cfg = NtiConfig { inner_steps: 0, ..NtiConfig::default() };
    let (opt, _) = nti_optimize(&m, &traj, &cfg).unwrap();
    let null = m.text_encode(&m.tokenize_padded("").unwrap()).unwrap();
    for e in opt.null_embeddings.as_ref().unwrap() {
        assert_eq!(e, &null);
    }
    let plain = SampleOptions { steps: STEPS, guidance_scale: cfg.guidance_scale, null: NullSchedule::Default };
    let want = ddim_sample(&m, traj.z_t(), &traj.prompt_ids, &plain, None).unwrap();
    assert_eq!(reconstruct(&m, &opt, cfg.guidance_scale).unwrap(), want);
}

#[test]
fn null_text_optimization_keeps_weights_and_improves_steps() {
    let m = model();
    let digest = m.parameter_digest();
    let scene = &generate_dataset(1, 3, 0.0).unwrap()[0];
    let traj = ddim_invert(&m, &scene.image, &scene.caption, STEPS).unwrap();
    let cond = m.text_encode(&traj.prompt_ids).unwrap();
    let cfg = NtiConfig { inner_steps: 4, ..NtiConfig::default() };
    let (opt, logs) = nti_optimize(&m, &traj, &cfg).unwrap();
    assert_eq!(m.parameter_digest(), digest);
    assert_eq!(m.text_encode(&traj.prompt_ids).unwrap(), cond);
    assert_eq!(opt.latents, traj.latents);
    assert_eq!(logs.len(), STEPS);
    for log in &logs {
        assert!(log.best.windows(2).all(|w| w[1] <= w[0]));
        assert!(log.final_best() <= log.initial());
    }
}

#[test]
fn trajectories_round_trip_through_files() {
    let m = model().cast::<f32>();
    let scene = &generate_dataset(1, 4, 0.0).unwrap()[0];
    let traj = ddim_invert(&m, &scene.image, &scene.caption, 4).unwrap();
    let (traj, _) = nti_optimize(&m, &traj, &NtiConfig { inner_steps: 1, ..NtiConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.traj");
    traj.save(&p).unwrap();
    assert_eq!(InversionTrajectory::<f32>::load(&p).unwrap(), traj);
    std::fs::write(&p, b"not a trajectory").unwrap();
    assert!(InversionTrajectory::<f32>::load(&p).is_err());
}
