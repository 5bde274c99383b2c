//! `mde`: dataset generation, toy training, inversion, editing, evaluation
//! and the loss ablation grid.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mde_core::backend::scenes::{self, ColorName, ShapeKind};
use mde_core::backend::train::{self, TrainConfig};
use mde_core::backend::{checkpoint, ToyConfig, ToyDenoiser};
use mde_core::experiments::{self, AblationSetting, SETTINGS};
use mde_core::image::{load_mask_png, save_mask_png, Image};
use mde_core::inversion::{self, InversionTrajectory, NtiConfig};
use mde_core::losses::write_loss_log;
use mde_core::metrics::{self, CropStatistics, EditTarget, EvalMetadata, Prediction, ToyClassifier};
use mde_core::pipeline::{EditOptions, EditSession, SessionConfig};
use mde_core::tokens::Vocabulary;
use mde_core::types::{CclReduction, GuidanceConfig, Mask};
use mde_core::MdeError;

use manifest::RunManifest;

type Model = ToyDenoiser<f32>;

#[derive(Parser)]
#[command(name = "mde", version, about = "Masked dual-editing of multi-object images on a toy diffusion backend")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene corpus with per-shape masks
    GenData(GenDataArgs),
    /// Train the toy denoiser on a generated corpus
    TrainToy(TrainArgs),
    /// DDIM-invert an image and optimize per-step null embeddings
    Invert(InvertArgs),
    /// Run a dual-branch edit described by a session file
    Edit(EditArgs),
    /// Score an edited image against its original
    Eval(EvalArgs),
    /// Run the loss ablation grid over a seeded task suite
    Ablate(AblateArgs),
    /// End-to-end smoke run: one dual edit on a fresh scene
    Demo(DemoArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of scenes
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of scenes holding an overlapping pair, in [0, 1]
    #[arg(long, default_value_t = 0.5, value_parser = parse_fraction)]
    overlap: f64,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "toy.ckpt")]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    warmup_steps: usize,
    /// Continue from this checkpoint instead of a fresh initialization
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes drawn (with a separate seed) for the held-out loss
    #[arg(long, default_value_t = 200)]
    held_out: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint file; the bundled toy checkpoint when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: PathBuf,
    /// Source prompt describing the image
    #[arg(long)]
    prompt: String,
    /// Sampling steps (50 in the reference setup)
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Null-text iterations per step; 0 keeps the plain DDIM inversion
    #[arg(long, default_value_t = 10)]
    nti_iters: usize,
    #[arg(long, default_value_t = 1e-2)]
    nti_lr: f64,
    #[arg(long, default_value_t = 3.0)]
    guidance_scale: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reconstruction decoded from the trajectory
    #[arg(long)]
    reconstruction: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Session file: prompts, edits (token + mask path) and guidance settings
    #[arg(long)]
    config: PathBuf,
    /// Input image; overrides `image` in the session file
    #[arg(long)]
    image: Option<PathBuf>,
    /// Precomputed trajectory from `invert`
    #[arg(long)]
    traj: Option<PathBuf>,
    #[arg(long, default_value = "edit_out")]
    out: PathBuf,
    /// Weight of the object alignment loss [default: 1]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the color consistency loss [default: 1.25]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Latent step size [default: 0.05]
    #[arg(long)]
    delta: Option<f64>,
    /// Number of initial denoising steps that are optimized [default: 20]
    #[arg(long)]
    opt_window: Option<usize>,
    /// Optimization iterations per step [default: 1]
    #[arg(long)]
    inner_iters: Option<usize>,
    /// Total denoising steps [default: 50]
    #[arg(long)]
    steps: Option<usize>,
    /// masked_mean or masked_sum [default: masked_mean]
    #[arg(long, value_parser = parse_reduction)]
    ccl_reduction: Option<CclReduction>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    edited: PathBuf,
    /// Edit mask (repeatable); the background is the complement of their union
    #[arg(long = "mask", required = true)]
    masks: Vec<PathBuf>,
    /// Expected `shape:color` per mask, e.g. `triangle:red` (repeatable)
    #[arg(long = "expect")]
    expect: Vec<String>,
    #[arg(long, default_value = "pair")]
    id: String,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Append a summary row to this CSV (created with a header when missing)
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset directory; two-object scenes become dual-edit tasks. A fresh
    /// seeded suite is drawn when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of settings 1-4
    #[arg(long, default_value = "1,2,3,4", value_parser = parse_settings)]
    settings: SettingList,
    #[arg(long, default_value = "ablation_out")]
    out: PathBuf,
    /// Worker threads over tasks
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps; the optimization window shrinks to fit
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "demo_out")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone)]
struct SettingList(Vec<AblationSetting>);

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_reduction(s: &str) -> Result<CclReduction, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown reduction `{s}`"))
}

fn parse_settings(s: &str) -> Result<SettingList, String> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let id: u8 = part.trim().parse().map_err(|e| format!("`{part}`: {e}"))?;
        let setting = SETTINGS.iter().find(|x| x.id == id).ok_or_else(|| format!("no setting {id}"))?;
        if !out.contains(setting) {
            out.push(*setting);
        }
    }
    Ok(SettingList(out))
}

enum CliError {
    Usage(String),
    Pipeline(MdeError),
    Ordering(String),
}

impl From<MdeError> for CliError {
    fn from(e: MdeError) -> Self {
        CliError::Pipeline(e)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Pipeline(MdeError::Io { path: path.to_path_buf(), source: e })
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainToy(a) => train_toy(a),
        Command::Invert(a) => invert(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Demo(a) => demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Pipeline(e)) => {
            let diag = json!({ "error": format!("{e:?}"), "message": e.to_string() });
            eprintln!("{}", serde_json::to_string_pretty(&diag).unwrap());
            ExitCode::from(3)
        }
        Err(CliError::Ordering(msg)) => {
            eprintln!("ordering check failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn load_model(args: &ModelArgs) -> CliResult<Model> {
    Ok(match &args.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => mde_core::backend::pretrained()?,
    })
}

fn model_input(args: &ModelArgs) -> PathBuf {
    args.checkpoint.clone().unwrap_or_else(|| PathBuf::from("<bundled toy checkpoint>"))
}

fn refuse_existing(path: &Path, force: bool) -> CliResult {
    if path.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to replace it", path.display())));
    }
    Ok(())
}

/// Builds a directory's contents in a sibling staging directory and moves it
/// into place only when `fill` succeeds.
fn write_dir_atomically(out: &Path, force: bool, fill: impl FnOnce(&Path) -> CliResult) -> CliResult {
    refuse_existing(out, force)?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    let staging = out.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(io(&staging))?;
    }
    std::fs::create_dir_all(&staging).map_err(io(&staging))?;
    if let Err(e) = fill(&staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(io(out))?;
    }
    std::fs::rename(&staging, out).map_err(io(out))
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut m = RunManifest::start("gen-data", json!({"n": a.n, "seed": a.seed, "overlap": a.overlap}), Some(a.seed));
    let scenes = scenes::generate_dataset(a.n as usize, a.seed, a.overlap)?;
    write_dir_atomically(&a.out, a.force, |dir| {
        for (i, s) in scenes.iter().enumerate() {
            s.save(dir, i)?;
        }
        let vocab = dir.join("vocab.txt");
        std::fs::write(&vocab, Vocabulary::toy().to_file_string()).map_err(io(&vocab))?;
        m.output(&a.out);
        m.write(&dir.join("manifest.json")).map_err(io(dir))
    })?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train_toy(a: TrainArgs) -> CliResult {
    refuse_existing(&a.out, a.force)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup_steps,
        seed: a.seed,
        ..TrainConfig::default()
    };
    if a.batch_size == 0 || a.epochs == 0 {
        return Err(CliError::Usage("epochs and batch size must be positive".into()));
    }
    let data = scenes::load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(CliError::Usage(format!("{} holds no scenes", a.data.display())));
    }
    let held = scenes::generate_dataset(a.held_out.max(1), a.seed.wrapping_add(1_000_003), 0.5)?;
    let mut m = RunManifest::start("train-toy", json!({"train": cfg, "held_out": a.held_out}), Some(a.seed));
    m.input(&a.data);
    let model = match &a.init {
        Some(p) => {
            m.input(p);
            checkpoint::load(p)?
        }
        None => Model::new(ToyConfig::default(), Vocabulary::toy(), Default::default(), a.seed),
    };
    let mut log_lines = Vec::new();
    let mut window = (0.0, 0usize);
    let trained = train::train_toy(model, &data, &cfg, |r| {
        log_lines.push(serde_json::to_string(r).unwrap());
        window = (window.0 + r.loss, window.1 + 1);
        if (r.step + 1) % 100 == 0 {
            log::info!("step {} loss {:.5} lr {:.2e}", r.step + 1, window.0 / window.1 as f64, r.lr);
            window = (0.0, 0);
        }
    })?;
    let held_loss = train::evaluate_loss(&trained, &held, a.seed)?;
    log::info!("held-out noise-prediction loss {held_loss:.5}");
    let meta =
        json!({"train": cfg, "held_out_loss": held_loss, "held_out_scenes": held.len(), "steps": log_lines.len()});
    checkpoint::save(&trained, &a.out, meta)?;
    let log_path = a.out.with_extension("log.jsonl");
    std::fs::write(&log_path, log_lines.join("\n") + "\n").map_err(io(&log_path))?;
    m.output(&a.out);
    m.output(&log_path);
    let mp = a.out.with_extension("manifest.json");
    m.write(&mp).map_err(io(&mp))
}

fn invert(a: InvertArgs) -> CliResult {
    refuse_existing(&a.out, a.force)?;
    let model = load_model(&a.model)?;
    let image = Image::load_png(&a.image)?;
    let nti =
        NtiConfig { inner_steps: a.nti_iters, lr: a.nti_lr, guidance_scale: a.guidance_scale, ..NtiConfig::default() };
    let mut m = RunManifest::start("invert", json!({"prompt": a.prompt, "steps": a.steps, "nti": nti}), None);
    m.input(model_input(&a.model));
    m.input(&a.image);
    let mut traj = inversion::ddim_invert(&model, &image, &a.prompt, a.steps)?;
    if a.nti_iters > 0 {
        let (t, logs) = inversion::nti_optimize(&model, &traj, &nti)?;
        traj = t;
        let last = logs.last().map(|l| l.final_best()).unwrap_or(0.0);
        log::info!("null-text optimization done; final step distance {last:.3e}");
    }
    traj.save(&a.out)?;
    m.output(&a.out);
    if let Some(rp) = &a.reconstruction {
        let z = inversion::reconstruct(&model, &traj, a.guidance_scale)?;
        use mde_core::backend::DenoiserBackend;
        model.decode(&z).save_png(rp)?;
        m.output(rp);
    }
    let mp = a.out.with_extension("manifest.json");
    m.write(&mp).map_err(io(&mp))
}

/// Session file plus optional `image` entry.
#[derive(serde::Deserialize)]
struct SessionFile {
    #[serde(flatten)]
    session: serde_json::Value,
}

fn read_session(path: &Path) -> CliResult<(SessionConfig, Option<PathBuf>)> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    let SessionFile { mut session } =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let image = session.as_object_mut().and_then(|o| o.remove("image")).and_then(|v| v.as_str().map(PathBuf::from));
    let cfg: SessionConfig =
        serde_json::from_value(session).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok((cfg, image))
}

fn edit(a: EditArgs) -> CliResult {
    let (mut session, cfg_image) = read_session(&a.config)?;
    let base = a.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    if let Some(v) = a.lambda1 {
        session.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        session.lambda2 = v;
    }
    if let Some(v) = a.delta {
        session.delta = v;
    }
    if let Some(v) = a.opt_window {
        session.opt_window = v;
    }
    if let Some(v) = a.inner_iters {
        session.inner_iters = v;
    }
    if let Some(v) = a.steps {
        session.steps = v;
    }
    if let Some(v) = a.ccl_reduction {
        session.ccl_reduction = v;
    }
    let guidance = session.guidance();
    guidance.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let image_path = match (&a.image, cfg_image) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_absolute() => p,
        (None, Some(p)) => base.join(p),
        (None, None) => {
            return Err(CliError::Usage("no input image: pass --image or set `image` in the session".into()))
        }
    };
    refuse_existing(&a.out, a.force)?;
    let model = load_model(&a.model)?;
    let image = Image::load_png(&image_path)?;
    let specs = session.edit_specs(&model.vocab, &base)?;
    let mut m = RunManifest::start("edit", serde_json::to_value(&session).unwrap(), Some(session.seed));
    m.input(model_input(&a.model));
    m.input(&a.config);
    m.input(&image_path);
    let options = EditOptions {
        debug_dir: None,
        nti: NtiConfig { guidance_scale: guidance.guidance_scale, ..NtiConfig::default() },
        ..EditOptions::default()
    };
    let traj = match &a.traj {
        Some(p) => {
            m.input(p);
            InversionTrajectory::load(p)?
        }
        None => mde_core::pipeline::invert(&model, &image, &session.source_prompt, &guidance, &options.nti)?,
    };
    let debug = std::env::var("MDE_DEBUG").is_ok_and(|v| v == "1");
    write_dir_atomically(&a.out, a.force, |dir| {
        let options = EditOptions { debug_dir: debug.then(|| dir.join("debug")), ..options };
        let outcome =
            EditSession::new(&model, traj, &session.target_prompt, specs, guidance.clone(), options)?.run()?;
        outcome.edited.save_png(&dir.join("edited.png"))?;
        outcome.reconstruction.save_png(&dir.join("reconstruction.png"))?;
        write_loss_log(&outcome.loss_log, &dir.join("losses.jsonl"))?;
        let report = metrics::evaluate(
            &image,
            &outcome.edited,
            &outcome.union,
            &[],
            None,
            Some(&CropStatistics::default()),
            EvalMetadata {
                id: "edit".into(),
                original: Some(image_path.display().to_string()),
                edited: Some(a.out.join("edited.png").display().to_string()),
                seed: Some(session.seed),
                config_hash: Some(guidance.hash()),
            },
        );
        match report {
            Ok(r) => r.save(&dir.join("report.json"))?,
            // an edit covering the whole frame leaves no background to score
            Err(MdeError::EmptyMask) => log::warn!("no background left to score"),
            Err(e) => return Err(e.into()),
        }
        if !outcome.warnings.is_empty() {
            let p = dir.join("warnings.json");
            std::fs::write(&p, serde_json::to_string_pretty(&outcome.warnings).unwrap()).map_err(io(&p))?;
        }
        for f in ["edited.png", "reconstruction.png", "losses.jsonl", "report.json"] {
            m.output(a.out.join(f));
        }
        m.write(&dir.join("manifest.json")).map_err(io(dir))
    })
}

fn parse_expect(s: &str) -> CliResult<Prediction> {
    let (shape, color) = s.split_once(':').ok_or_else(|| CliError::Usage(format!("`{s}` is not shape:color")))?;
    Ok(Prediction {
        shape: ShapeKind::from_word(shape).ok_or_else(|| CliError::Usage(format!("unknown shape `{shape}`")))?,
        color: ColorName::from_word(color).ok_or_else(|| CliError::Usage(format!("unknown color `{color}`")))?,
    })
}

fn eval(a: EvalArgs) -> CliResult {
    if !a.expect.is_empty() && a.expect.len() != a.masks.len() {
        return Err(CliError::Usage("give one --expect per --mask or none".into()));
    }
    let expected = a.expect.iter().map(|s| parse_expect(s)).collect::<CliResult<Vec<_>>>()?;
    let mut m = RunManifest::start("eval", json!({"id": a.id, "masks": a.masks, "expect": a.expect}), None);
    let original = Image::load_png(&a.original)?;
    let edited = Image::load_png(&a.edited)?;
    m.input(&a.original);
    m.input(&a.edited);
    let masks = a.masks.iter().map(|p| load_mask_png(p)).collect::<Result<Vec<Mask>, _>>()?;
    let union = mde_core::types::RegionMask::union_of(&masks.iter().collect::<Vec<_>>())?.mask;
    let targets: Vec<EditTarget> =
        expected.iter().zip(&masks).map(|(e, mk)| EditTarget { mask: mk.clone(), expected: *e }).collect();
    let classifier = (!targets.is_empty()).then(ToyClassifier::reference);
    let report = metrics::evaluate(
        &original,
        &edited,
        &union,
        &targets,
        classifier.as_ref(),
        Some(&CropStatistics::default()),
        EvalMetadata {
            id: a.id.clone(),
            original: Some(a.original.display().to_string()),
            edited: Some(a.edited.display().to_string()),
            seed: None,
            config_hash: None,
        },
    )?;
    report.save(&a.out)?;
    m.output(&a.out);
    if let Some(csv) = &a.csv {
        let mut rows = Vec::new();
        if csv.exists() {
            rows.push(std::fs::read_to_string(csv).map_err(io(csv))?);
        }
        let tmp = csv.with_extension("row.csv");
        metrics::write_summary_csv(std::slice::from_ref(&report), &tmp)?;
        let fresh = std::fs::read_to_string(&tmp).map_err(io(&tmp))?;
        std::fs::remove_file(&tmp).map_err(io(&tmp))?;
        let text = if rows.is_empty() { fresh } else { rows[0].clone() + fresh.lines().nth(1).unwrap_or("") + "\n" };
        std::fs::write(csv, text).map_err(io(csv))?;
        m.output(csv);
    }
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    let mp = a.out.with_extension("manifest.json");
    m.write(&mp).map_err(io(&mp))
}

fn ablate(a: AblateArgs) -> CliResult {
    if a.tasks == 0 {
        return Err(CliError::Usage("--tasks must be positive".into()));
    }
    let tasks = match &a.data {
        Some(dir) => {
            let data = scenes::load_dataset(dir).map_err(|e| CliError::Usage(e.to_string()))?;
            let tasks = experiments::dataset_suite(&data, a.tasks, a.seed)?;
            if tasks.is_empty() {
                return Err(CliError::Usage(format!("{} holds no two-object scenes", dir.display())));
            }
            tasks
        }
        None => experiments::standard_suite(a.tasks, a.seed)?,
    };
    refuse_existing(&a.out, a.force)?;
    let model = load_model(&a.model)?;
    let config = GuidanceConfig::default();
    let settings: Vec<u8> = a.settings.0.iter().map(|s| s.id).collect();
    let mut m = RunManifest::start(
        "ablate",
        json!({"tasks": tasks.len(), "settings": settings, "guidance": config, "data": a.data}),
        Some(a.seed),
    );
    m.input(model_input(&a.model));
    let report = experiments::run_ablation(&model, &tasks, &a.settings.0, &config, &EditOptions::default(), a.jobs)?;
    print!("{}", report.table());
    write_dir_atomically(&a.out, a.force, |dir| {
        let p = dir.join("ablation.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report).unwrap()).map_err(io(&p))?;
        let p = dir.join("ablation.txt");
        std::fs::write(&p, report.table()).map_err(io(&p))?;
        m.output(a.out.join("ablation.json"));
        m.output(a.out.join("ablation.txt"));
        m.write(&dir.join("manifest.json")).map_err(io(dir))
    })?;
    if !report.ordering_holds() {
        return Err(CliError::Ordering(report.violations.join("; ")));
    }
    Ok(())
}

fn demo(a: DemoArgs) -> CliResult {
    refuse_existing(&a.out, a.force)?;
    let model = load_model(&a.model)?;
    let task = experiments::standard_suite(1, a.seed)?.remove(0);
    log::info!("`{}` -> `{}`", task.source_prompt, task.target_prompt);
    let base = GuidanceConfig::default();
    let config = GuidanceConfig { total_steps: a.steps, opt_window: base.opt_window.min(a.steps), ..base };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut m = RunManifest::start("demo", json!({"guidance": config, "task": task.id}), Some(a.seed));
    m.input(model_input(&a.model));
    let result = experiments::run_task(&model, &task, &config, &EditOptions::default(), &ToyClassifier::reference())?;
    write_dir_atomically(&a.out, a.force, |dir| {
        task.scene.image.save_png(&dir.join("original.png"))?;
        result.outcome.edited.save_png(&dir.join("edited.png"))?;
        result.outcome.reconstruction.save_png(&dir.join("reconstruction.png"))?;
        for (i, e) in task.edits.iter().enumerate() {
            save_mask_png(&e.mask, &dir.join(format!("mask_{i}.png")))?;
        }
        write_loss_log(&result.outcome.loss_log, &dir.join("losses.jsonl"))?;
        result.report.save(&dir.join("report.json"))?;
        let session = json!({
            "source_prompt": task.source_prompt,
            "target_prompt": task.target_prompt,
            "image": "original.png",
            "edits": task.edits.iter().enumerate().map(|(i, e)| json!({
                "token": e.label.rsplit(' ').next().unwrap_or_default(),
                "mask_path": format!("mask_{i}.png"),
            })).collect::<Vec<_>>(),
        });
        let p = dir.join("session.json");
        std::fs::write(&p, serde_json::to_string_pretty(&session).unwrap()).map_err(io(&p))?;
        m.output(&a.out);
        m.write(&dir.join("manifest.json")).map_err(io(dir))
    })?;
    let r = &result.report;
    println!(
        "alignment {:.2} ({:?})  bg_ssim {:.4}  bg_perceptual {:.6}",
        r.alignment.value.unwrap_or(0.0),
        r.per_edit_success,
        r.bg_ssim,
        r.bg_perceptual.value.unwrap_or(f64::NAN)
    );
    Ok(())
}
