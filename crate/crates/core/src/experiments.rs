//! Seeded editing tasks over synthetic scenes and the loss ablation grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mde_autograd::Scalar;

use crate::backend::scenes::{disjoint_pair, ColorName, ShapeKind, SyntheticScene};
use crate::backend::DenoiserBackend;
use crate::error::{MdeError, Result};
use crate::inversion::InversionTrajectory;
use crate::metrics::{evaluate, CropStatistics, EditTarget, EvalMetadata, EvalReport, Prediction, ToyClassifier};
use crate::pipeline::{invert, resolve_edit_tokens, EditOptions, EditOutcome, EditSession};
use crate::types::{EditSpec, GuidanceConfig, Mask};

/// A scene with the edits to apply and what each edited region should show.
#[derive(Debug, Clone)]
pub struct EditTask {
    pub id: String,
    pub scene: SyntheticScene,
    pub source_prompt: String,
    pub target_prompt: String,
    pub edits: Vec<EditSpec>,
    pub targets: Vec<EditTarget>,
}

/// Filled bounding box of a mask grown by `pad` pixels.
pub fn box_mask(mask: &Mask, pad: usize) -> Mask {
    let Some((y0, x0, y1, x1)) = mask.bbox() else { return mask.clone() };
    let (y0, x0) = (y0.saturating_sub(pad), x0.saturating_sub(pad));
    let (y1, x1) = ((y1 + pad).min(mask.height - 1), (x1 + pad).min(mask.width - 1));
    Mask::from_fn(mask.height, mask.width, |y, x| (y0..=y1).contains(&y) && (x0..=x1).contains(&x))
}

fn pick<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, all: &[T], avoid: &[T]) -> T {
    let options: Vec<T> = all.iter().copied().filter(|c| !avoid.contains(c)).collect();
    options[rng.gen_range(0..options.len())]
}

/// Shape swap on the left object and color change on the right one. New
/// words never repeat a word of the other object, so each is unambiguously new.
pub fn dual_edit_task(scene: SyntheticScene, seed: u64, id: impl Into<String>) -> Result<EditTask> {
    if scene.shapes.len() != 2 {
        return Err(MdeError::InvalidValue("dual edits need a two-object scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (scene.shapes[0], scene.shapes[1]);
    let new_kind = pick(&mut rng, &ShapeKind::ALL, &[a.kind, b.kind]);
    let new_color = pick(&mut rng, &ColorName::ALL, &[a.color, b.color]);
    let mut shapes = scene.shapes.clone();
    shapes[0].kind = new_kind;
    shapes[1].color = new_color;
    let target_prompt = crate::backend::scenes::caption_for(&shapes);
    let vocab = crate::tokens::Vocabulary::toy();
    let swap_mask = box_mask(&scene.masks[0], 1);
    let color_mask = scene.masks[1].clone();
    let edits = vec![
        EditSpec::new(
            swap_mask.clone(),
            resolve_edit_tokens(&vocab, &scene.caption, &target_prompt, new_kind.word())?,
            format!("{} -> {}", a.kind, new_kind),
        )?,
        EditSpec::new(
            color_mask.clone(),
            resolve_edit_tokens(&vocab, &scene.caption, &target_prompt, new_color.word())?,
            format!("{} -> {}", b.color, new_color),
        )?,
    ];
    let targets = vec![
        EditTarget { mask: swap_mask, expected: Prediction { shape: new_kind, color: a.color } },
        EditTarget { mask: color_mask, expected: Prediction { shape: b.kind, color: new_color } },
    ];
    Ok(EditTask { id: id.into(), source_prompt: scene.caption.clone(), scene, target_prompt, edits, targets })
}

/// Color change of a single object.
pub fn color_task(scene: SyntheticScene, object: usize, seed: u64, id: impl Into<String>) -> Result<EditTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let used: Vec<ColorName> = scene.shapes.iter().map(|s| s.color).collect();
    let spec = *scene.shapes.get(object).ok_or_else(|| MdeError::InvalidValue(format!("no object {object}")))?;
    let new_color = pick(&mut rng, &ColorName::ALL, &used);
    let mut shapes = scene.shapes.clone();
    shapes[object].color = new_color;
    let target_prompt = crate::backend::scenes::caption_for(&shapes);
    let vocab = crate::tokens::Vocabulary::toy();
    let mask = scene.masks[object].clone();
    let edits = vec![EditSpec::new(
        mask.clone(),
        resolve_edit_tokens(&vocab, &scene.caption, &target_prompt, new_color.word())?,
        format!("{} -> {}", spec.color, new_color),
    )?];
    let targets = vec![EditTarget { mask, expected: Prediction { shape: spec.kind, color: new_color } }];
    Ok(EditTask { id: id.into(), source_prompt: scene.caption.clone(), scene, target_prompt, edits, targets })
}

fn suite_scene(seed: u64) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F5C_E7E5);
    SyntheticScene::from_shapes(disjoint_pair(&mut rng))
}

/// `n` dual-edit tasks on freshly drawn two-object scenes.
pub fn standard_suite(n: usize, base_seed: u64) -> Result<Vec<EditTask>> {
    (0..n as u64)
        .map(|i| dual_edit_task(suite_scene(base_seed + i), base_seed + i, format!("task_{:03}", base_seed + i)))
        .collect()
}

/// `n` single color edits on the left object of fresh scenes.
pub fn color_suite(n: usize, base_seed: u64) -> Result<Vec<EditTask>> {
    (0..n as u64)
        .map(|i| color_task(suite_scene(base_seed + i), 0, base_seed + i, format!("color_{:03}", base_seed + i)))
        .collect()
}

/// Dual-edit tasks built from the two-object scenes of a dataset.
pub fn dataset_suite(scenes: &[SyntheticScene], n: usize, seed: u64) -> Result<Vec<EditTask>> {
    scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.shapes.len() == 2)
        .take(n)
        .map(|(i, s)| dual_edit_task(s.clone(), seed + i as u64, format!("scene_{i:05}")))
        .collect()
}

/// Result of one task under one configuration.
#[derive(Debug, Clone)]
pub struct TaskResult<T: Scalar> {
    pub report: EvalReport,
    pub outcome: EditOutcome<T>,
}

pub fn run_task_with<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    task: &EditTask,
    trajectory: InversionTrajectory<T>,
    config: &GuidanceConfig,
    options: &EditOptions,
    classifier: &ToyClassifier,
) -> Result<TaskResult<T>> {
    let session = EditSession::new(
        backend,
        trajectory,
        &task.target_prompt,
        task.edits.clone(),
        config.clone(),
        options.clone(),
    )?;
    let outcome = session.run()?;
    let report = evaluate(
        &task.scene.image,
        &outcome.edited,
        &outcome.union,
        &task.targets,
        Some(classifier),
        Some(&CropStatistics::default()),
        EvalMetadata {
            id: task.id.clone(),
            original: None,
            edited: None,
            seed: None,
            config_hash: Some(config.hash()),
        },
    )?;
    Ok(TaskResult { report, outcome })
}

/// Inverts the task scene and runs the edit.
pub fn run_task<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    task: &EditTask,
    config: &GuidanceConfig,
    options: &EditOptions,
    classifier: &ToyClassifier,
) -> Result<TaskResult<T>> {
    let traj = invert(backend, &task.scene.image, &task.source_prompt, config, &options.nti)?;
    run_task_with(backend, task, traj, config, options, classifier)
}

/// Loss switches of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub id: u8,
    pub oal: bool,
    pub ccl: bool,
}

pub const SETTINGS: [AblationSetting; 4] = [
    AblationSetting { id: 1, oal: false, ccl: false },
    AblationSetting { id: 2, oal: true, ccl: false },
    AblationSetting { id: 3, oal: false, ccl: true },
    AblationSetting { id: 4, oal: true, ccl: true },
];

impl AblationSetting {
    pub fn apply(&self, base: &GuidanceConfig) -> GuidanceConfig {
        GuidanceConfig {
            lambda1: if self.oal { base.lambda1 } else { 0.0 },
            lambda2: if self.ccl { base.lambda2 } else { 0.0 },
            ..base.clone()
        }
    }

    /// Setting 1 skips the optimization altogether.
    pub fn options(&self, base: &EditOptions) -> EditOptions {
        EditOptions { optimize: self.oal || self.ccl, ..base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: u8,
    pub oal: bool,
    pub ccl: bool,
    pub alignment: f64,
    pub bg_ssim: f64,
    pub bg_perceptual: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Broken ordering requirements; empty when the grid ranks as expected.
    pub violations: Vec<String>,
}

impl AblationReport {
    pub fn ordering_holds(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn table(&self) -> String {
        let mut s = String::from("setting  OAL  CCL  alignment  bg_ssim  bg_perceptual\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>7}  {:>3}  {:>3}  {:>9.4}  {:>7.4}  {:>13.6}\n",
                r.setting,
                if r.oal { "x" } else { "-" },
                if r.ccl { "x" } else { "-" },
                r.alignment,
                r.bg_ssim,
                r.bg_perceptual
            ));
        }
        s
    }
}

/// Ordering checks: the full objective is not beaten on any column, and the
/// loss-free setting is not ahead on alignment. Ties count as holding.
pub fn check_ordering(rows: &[AblationRow]) -> Vec<String> {
    let mut v = Vec::new();
    let Some(best) = rows.iter().find(|r| r.oal && r.ccl) else { return v };
    for r in rows.iter().filter(|r| r.setting != best.setting) {
        if r.alignment > best.alignment {
            v.push(format!("setting {} alignment {:.4} > {:.4}", r.setting, r.alignment, best.alignment));
        }
        if r.bg_ssim > best.bg_ssim {
            v.push(format!("setting {} bg_ssim {:.4} > {:.4}", r.setting, r.bg_ssim, best.bg_ssim));
        }
        if r.bg_perceptual < best.bg_perceptual {
            v.push(format!("setting {} bg_perceptual {:.6} < {:.6}", r.setting, r.bg_perceptual, best.bg_perceptual));
        }
    }
    if let Some(none) = rows.iter().find(|r| !r.oal && !r.ccl) {
        if let Some(r) = rows.iter().find(|r| (r.oal || r.ccl) && r.alignment < none.alignment) {
            v.push(format!("setting {} alignment {:.4} below loss-free {:.4}", r.setting, r.alignment, none.alignment));
        }
    }
    v
}

/// Runs each task once per setting, reusing one inversion per task. Tasks
/// are spread over `jobs` worker threads.
pub fn run_ablation<T: Scalar>(
    backend: &dyn DenoiserBackend<T>,
    tasks: &[EditTask],
    settings: &[AblationSetting],
    config: &GuidanceConfig,
    options: &EditOptions,
    jobs: usize,
) -> Result<AblationReport> {
    if tasks.is_empty() {
        return Err(MdeError::InvalidValue("ablation needs at least one task".into()));
    }
    let classifier = ToyClassifier::reference();
    let per_task = |task: &EditTask| -> Result<Vec<EvalReport>> {
        let traj = invert(backend, &task.scene.image, &task.source_prompt, config, &options.nti)?;
        settings
            .iter()
            .map(|s| {
                run_task_with(backend, task, traj.clone(), &s.apply(config), &s.options(options), &classifier)
                    .map(|r| r.report)
            })
            .collect()
    };
    let results = parallel_map(tasks, jobs, per_task)?;
    let rows = settings
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let reports: Vec<&EvalReport> = results.iter().map(|r| &r[k]).collect();
            let n = reports.len() as f64;
            AblationRow {
                setting: s.id,
                oal: s.oal,
                ccl: s.ccl,
                alignment: reports.iter().map(|r| r.alignment.value.unwrap_or(0.0)).sum::<f64>() / n,
                bg_ssim: reports.iter().map(|r| r.bg_ssim).sum::<f64>() / n,
                bg_perceptual: reports.iter().map(|r| r.bg_perceptual.value.unwrap_or(0.0)).sum::<f64>() / n,
                tasks: reports.len(),
            }
        })
        .collect::<Vec<_>>();
    let violations = check_ordering(&rows);
    Ok(AblationReport { rows, violations })
}

/// Order-preserving map over `items` on up to `jobs` scoped threads.
pub fn parallel_map<I: Sync, O: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<O>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_task_marks_both_words_new() {
        for t in standard_suite(12, 0).unwrap() {
            assert_eq!(t.edits.len(), 2);
            let vocab = crate::tokens::Vocabulary::toy();
            let src = vocab.tokenize(&t.source_prompt).unwrap();
            let tgt = vocab.tokenize(&t.target_prompt).unwrap();
            let al = crate::tokens::align_tokens(&src, &tgt).unwrap();
            assert_eq!(al.new_tokens.len(), 2, "{} -> {}", t.source_prompt, t.target_prompt);
            for e in &t.edits {
                e.validate(&al).unwrap();
            }
        }
    }

    #[test]
    fn ordering_check_flags_violations() {
        let row = |setting, oal, ccl, alignment, bg_ssim, bg_perceptual| AblationRow {
            setting,
            oal,
            ccl,
            alignment,
            bg_ssim,
            bg_perceptual,
            tasks: 1,
        };
        let good = vec![
            row(1, false, false, 0.2, 0.90, 0.02),
            row(2, true, false, 0.6, 0.95, 0.01),
            row(3, false, true, 0.5, 0.95, 0.01),
            row(4, true, true, 0.9, 0.95, 0.01),
        ];
        assert!(check_ordering(&good).is_empty());
        let mut bad = good.clone();
        bad[1].alignment = 0.95;
        bad[0].bg_perceptual = 0.001;
        assert_eq!(check_ordering(&bad).len(), 2);
    }

    #[test]
    fn box_mask_covers_shape() {
        let t = &standard_suite(1, 3).unwrap()[0];
        let m = &t.scene.masks[0];
        let b = box_mask(m, 1);
        assert!(m.data().iter().zip(b.data()).all(|(&a, &bb)| !a || bb));
        assert!(b.count() > m.count());
    }
}
