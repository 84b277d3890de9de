use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxdiff_core::checkpoint::{bpr_checkpoint, load_bpr};
use voxdiff_core::features::{extract_all, fraction_to_timestep};
use voxdiff_core::pretrain::checkpoint_config;
use voxdiff_core::probing::{ablate_timesteps, ablation_csv, evaluate_probe, markdown_table, report_csv};
use voxdiff_core::synth::CorpusManifest;
use voxdiff_core::volumes::load_volume;
use voxdiff_core::{
    resume, select_levels, train_probe, BprModel, Checkpoint, ClassCatalog, Denoiser, DistributionTag, ExtractionPlan,
    FeatureCache, FeatureExtractor, FeatureVolume, NoiseSchedule, PhantomConfig, ProbeHead, Volume,
};

use crate::config::ExperimentConfig;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let code = if e.kind() == std::io::ErrorKind::NotFound { 3 } else { 1 };
    CliError { code, message: format!("{}: {e}", path.display()) }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError { code: 1, message: format!("cannot create {}: {e}", path.display()) })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(format!("missing artifact {} (run `voxdiff {producer}` first)", path.display())))
    }
}

fn snapshot(cfg: &ExperimentConfig, dir: &Path, command: &str) -> Result<(), CliError> {
    write(&dir.join(format!("{command}.resolved.toml")), cfg.snapshot())
}

struct Split {
    images: Vec<Volume>,
    labels: Vec<Volume>,
    config: PhantomConfig,
}

fn load_split(cfg: &ExperimentConfig, name: &str, limit: Option<usize>) -> Result<Split, CliError> {
    let dir = cfg.output.join("corpus").join(name);
    require(&dir.join("manifest.json"), "synth")?;
    let m = CorpusManifest::read(&dir)?;
    let n = limit.unwrap_or(m.items.len()).min(m.items.len());
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for item in &m.items[..n] {
        images.push(load_volume(dir.join(&item.image))?);
        labels.push(load_volume(dir.join(&item.labels))?);
    }
    Ok(Split { images, labels, config: m.config })
}

fn losses_csv(losses: &[f32]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn synth(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let root = cfg.output.join("corpus");
    let splits = [
        ("train", cfg.synth.train, cfg.seed, DistributionTag::A),
        ("test", cfg.synth.test, cfg.seed.wrapping_add(1), DistributionTag::A),
        ("test_b", cfg.synth.test, cfg.seed.wrapping_add(1), DistributionTag::B),
    ];
    for (name, n, seed, tag) in splits {
        let dir = root.join(name);
        create_dir(&dir)?;
        let m = voxdiff_core::generate_corpus(n, seed, &PhantomConfig::for_tag(tag))?;
        m.write(&dir)?;
        info!("wrote {n} phantoms to {}", dir.display());
    }
    snapshot(cfg, &root, "synth")
}

pub fn train_bpr(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let train = load_split(cfg, "train", None)?;
    let dir = cfg.output.join("bpr");
    create_dir(&dir)?;
    info!("training body-part regressor on {} volumes", train.images.len());
    let out = voxdiff_core::train_bpr(&train.images, &cfg.bpr_config())?;
    bpr_checkpoint(&out.model).save(dir.join("bpr.ckpt"))?;
    write(&dir.join("loss.csv"), losses_csv(&out.losses))?;
    snapshot(cfg, &dir, "train-bpr")
}

fn load_bpr_input(cfg: &ExperimentConfig) -> Result<Option<BprModel>, CliError> {
    match &cfg.inputs.bpr {
        Some(p) => {
            require(p, "train-bpr")?;
            Ok(Some(load_bpr(&Checkpoint::load(p)?)?))
        }
        None => Ok(None),
    }
}

pub fn train_ddpm(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pc = cfg.pretrain_config();
    let bpr = load_bpr_input(cfg)?;
    match (pc.conditioned, bpr.is_some()) {
        (true, false) => return Err(CliError::config("conditioned pretraining needs --bpr <bpr checkpoint>".into())),
        (false, true) => return Err(CliError::config("--bpr given but pretrain.conditioned = false".into())),
        _ => {}
    }
    let train = load_split(cfg, "train", None)?;
    let dir = cfg.output.join("ddpm");
    create_dir(&dir)?;
    info!("pretraining for {} steps", pc.total_steps(train.images.len()));
    let out = match &cfg.inputs.resume {
        Some(ck) => {
            require(ck, "train-ddpm")?;
            resume(ck, &train.images, &pc, bpr.as_ref(), &dir)?
        }
        None => voxdiff_core::train_ddpm(&train.images, &pc, bpr.as_ref(), &dir)?,
    };
    info!("checkpoint {} at step {}", out.checkpoint.display(), out.step);
    snapshot(cfg, &dir, "train-ddpm")
}

fn model_tag(cfg: &ExperimentConfig) -> &'static str {
    if cfg.inputs.random_init {
        "random"
    } else {
        "ddpm"
    }
}

struct Model {
    fx: FeatureExtractor,
    bpr: Option<BprModel>,
    plan: ExtractionPlan,
    cache: FeatureCache,
}

fn load_model(cfg: &ExperimentConfig) -> Result<Model, CliError> {
    let path = cfg.inputs.checkpoint.clone().unwrap_or_else(|| cfg.output.join("ddpm").join("final.ckpt"));
    require(&path, "train-ddpm")?;
    let ck = Checkpoint::load(&path)?;
    let fx = if cfg.inputs.random_init {
        // the pretraining run drew its initial weights from the same seed
        let training = checkpoint_config(&ck)?;
        let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
        let model = Denoiser::new(training.model_config(), &mut rng)?;
        FeatureExtractor::new(model, NoiseSchedule::from_params(training.schedule)?)
    } else {
        FeatureExtractor::from_checkpoint(&ck)?
    };
    let bpr = load_bpr_input(cfg)?;
    match (fx.config().conditioned(), bpr.is_some()) {
        (true, false) => {
            return Err(CliError::config(format!(
                "{} is a conditioned checkpoint: pass --bpr <bpr checkpoint>",
                path.display()
            )))
        }
        (false, true) => return Err(CliError::config(format!("{} is unconditioned: drop --bpr", path.display()))),
        _ => {}
    }
    let e = &cfg.extract;
    let levels = if e.levels.is_empty() { (0..fx.config().levels).collect() } else { select_levels(fx.config(), &e.levels)? };
    let plan = ExtractionPlan {
        levels,
        overlap: e.overlap,
        noise_samples: e.noise_samples,
        ..ExtractionPlan::new(fx.config(), cfg.pretrain.patch, e.timesteps.clone(), cfg.seed)
    };
    let cache = FeatureCache::new(cfg.output.join("features"))?;
    Ok(Model { fx, bpr, plan, cache })
}

fn features(m: &Model, images: &[Volume], plan: &ExtractionPlan) -> Result<Vec<FeatureVolume>, CliError> {
    Ok(extract_all(&m.fx, images, m.bpr.as_ref(), plan, Some(&m.cache))?)
}

pub fn extract(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let mut csv = String::from("split,index,channels,z,y,x\n");
    for (name, limit) in [("train", Some(cfg.probe.train_volumes)), ("test", None), ("test_b", None)] {
        let split = load_split(cfg, name, limit)?;
        info!("extracting {} volumes of {name}", split.images.len());
        for (i, f) in features(&m, &split.images, &m.plan)?.iter().enumerate() {
            let [z, y, x] = f.shape();
            let _ = writeln!(csv, "{name},{i},{},{z},{y},{x}", f.channels());
        }
    }
    let dir = cfg.output.join("features");
    write(&dir.join("extract.csv"), csv)?;
    snapshot(cfg, &dir, &format!("extract-{}", model_tag(cfg)))
}

fn probe_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.inputs.probe.clone().unwrap_or_else(|| cfg.output.join("probe").join(format!("{}.ckpt", model_tag(cfg))))
}

pub fn probe(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let train = load_split(cfg, "train", Some(cfg.probe.train_volumes))?;
    let feats = features(&m, &train.images, &m.plan)?;
    let catalog = ClassCatalog::from_phantom(&train.config);
    let pc = cfg.probe_config();
    info!("training probe on {} volumes", feats.len());
    let out = train_probe(&feats, &train.labels, catalog.classes, &pc)?;
    let dir = cfg.output.join("probe");
    create_dir(&dir)?;
    let tag = model_tag(cfg);
    out.head.checkpoint(&pc).save(dir.join(format!("{tag}.ckpt")))?;
    write(&dir.join(format!("{tag}_loss.csv")), losses_csv(&out.losses))?;
    snapshot(cfg, &dir, &format!("probe-{tag}"))
}

pub fn eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let path = probe_path(cfg);
    require(&path, "probe")?;
    let head = ProbeHead::from_checkpoint(&Checkpoint::load(&path)?)?;
    let tag = model_tag(cfg);
    let mut rows = Vec::new();
    let mut catalog = None;
    for (name, label) in [("test", "A"), ("test_b", "B")] {
        let split = load_split(cfg, name, None)?;
        let cat = catalog.get_or_insert_with(|| ClassCatalog::from_phantom(&split.config));
        let feats = features(&m, &split.images, &m.plan)?;
        rows.push((format!("{tag}/{label}"), evaluate_probe(&head, &feats, &split.labels, cat)?));
    }
    let catalog = catalog.expect("two splits evaluated");
    let mut md = markdown_table(&catalog, &rows);
    let drop = rows[0].1.avg - rows[1].1.avg;
    let _ = write!(md, "\nA to B degradation (Avg Dice drop): {:.1}\n", drop * 100.0);
    let dir = cfg.output.join("reports");
    create_dir(&dir)?;
    write(&dir.join(format!("{tag}.md")), md)?;
    write(&dir.join(format!("{tag}.csv")), report_csv(&catalog, &rows))?;
    snapshot(cfg, &dir, &format!("eval-{tag}"))
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let train = load_split(cfg, "train", Some(cfg.probe.train_volumes))?;
    let test = load_split(cfg, "test", None)?;
    let steps = m.fx.schedule().steps();
    let ts: Vec<usize> = cfg.ablate.fractions.iter().map(|&f| fraction_to_timestep(f, steps)).collect();
    let catalog = ClassCatalog::from_phantom(&train.config);
    let rows = ablate_timesteps(
        &ts,
        |t, is_train| {
            info!("ablation t={t} ({})", if is_train { "train" } else { "test" });
            let plan = ExtractionPlan { timesteps: vec![t], ..m.plan.clone() };
            let images = if is_train { &train.images } else { &test.images };
            extract_all(&m.fx, images, m.bpr.as_ref(), &plan, Some(&m.cache))
        },
        &train.labels,
        &test.labels,
        &catalog,
        &cfg.probe_config(),
    )?;
    let dir = cfg.output.join("reports");
    create_dir(&dir)?;
    let tag = model_tag(cfg);
    write(&dir.join(format!("{tag}_ablation.csv")), ablation_csv(&rows))?;
    snapshot(cfg, &dir, &format!("ablate-{tag}"))
}
