use mde_core::backend::scenes::generate_dataset;
use mde_core::experiments::{color_suite, standard_suite};
use mde_core::image::Image;
use mde_core::metrics::{alignment_score, bg_perceptual, bg_ssim, render_target, CropStatistics, ToyClassifier};
use mde_core::types::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn corrupt(img: &Image, sigma: f32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + n.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

fn background(scene_masks: &[Mask]) -> Mask {
    scene_masks.iter().skip(1).fold(scene_masks[0].clone(), |a, m| a.union(m).unwrap()).complement()
}

#[test]
fn ssim_is_symmetric_and_one_on_identity() {
    let s = &generate_dataset(3, 9, 0.5).unwrap();
    for (i, scene) in s.iter().enumerate() {
        let bg = background(&scene.masks);
        let other = corrupt(&scene.image, 0.05, i as u64);
        let ab = bg_ssim(&scene.image, &other, &bg).unwrap();
        let ba = bg_ssim(&other, &scene.image, &bg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0);
        assert!(bg_ssim(&scene.image, &scene.image, &bg).unwrap() >= 1.0 - 1e-9);
    }
}

#[test]
fn background_metrics_ignore_the_foreground() {
    let scene = &generate_dataset(1, 10, 0.0).unwrap()[0];
    let bg = background(&scene.masks);
    let edited = corrupt(&scene.image, 0.1, 1);
    let mut repainted = edited.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for y in 0..32 {
        for x in 0..32 {
            if !bg.get(y, x) {
                repainted.set_pixel(y, x, [rng.gen(), rng.gen(), rng.gen()]);
            }
        }
    }
    let fx = CropStatistics::default();
    assert_eq!(bg_ssim(&scene.image, &edited, &bg).unwrap(), bg_ssim(&scene.image, &repainted, &bg).unwrap());
    assert_eq!(
        bg_perceptual(&scene.image, &edited, &bg, Some(&fx)).unwrap(),
        bg_perceptual(&scene.image, &repainted, &bg, Some(&fx)).unwrap()
    );
}

#[test]
fn perceptual_distance_ranks_corruption_strength() {
    let fx = CropStatistics::default();
    for (i, scene) in generate_dataset(10, 12, 0.5).unwrap().iter().enumerate() {
        let bg = background(&scene.masks);
        let light = corrupt(&scene.image, 0.03, 100 + i as u64);
        let heavy = corrupt(&scene.image, 0.3, 200 + i as u64);
        let dl = bg_perceptual(&scene.image, &light, &bg, Some(&fx)).unwrap();
        let dh = bg_perceptual(&scene.image, &heavy, &bg, Some(&fx)).unwrap();
        assert!(dh > dl, "scene {i}: heavy {dh} light {dl}");
        assert_eq!(bg_perceptual(&scene.image, &scene.image, &bg, Some(&fx)).unwrap(), 0.0);
    }
}

#[test]
fn classifier_accepts_targets_and_rejects_unedited_images() {
    let c = ToyClassifier::reference();
    for task in standard_suite(10, 0).unwrap().iter().chain(&color_suite(10, 0).unwrap()) {
        let mut shapes = task.scene.shapes.clone();
        for (i, t) in task.targets.iter().enumerate() {
            let object = if task.targets.len() == 1 { 0 } else { i };
            shapes[object].kind = t.expected.shape;
            shapes[object].color = t.expected.color;
        }
        let mut target = task.scene.image.clone();
        for (i, t) in task.targets.iter().enumerate() {
            let object = if task.targets.len() == 1 { 0 } else { i };
            target = render_target(&shapes, object, t.expected);
        }
        let (score, _) = alignment_score(&target, &task.targets, Some(&c)).unwrap();
        assert_eq!(score, 1.0, "{}", task.id);
        let (_, per) = alignment_score(&task.scene.image, &task.targets, Some(&c)).unwrap();
        assert!(per.iter().all(|&ok| !ok), "{}", task.id);
    }
}
