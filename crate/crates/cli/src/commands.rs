use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use s2fuse_core::ablation::{self, AblationGrid};
use s2fuse_core::dataset::{self, Landscape, Manifest, Split, SplitSpec, WALD_SIGMA};
use s2fuse_core::guidance::GuideMode;
use s2fuse_core::metrics::{self, Predictor, PsnrMode};
use s2fuse_core::network::Arch;
use s2fuse_core::raster::{self, BandStack, CompositeKind, IndexKind, Rgb8, VisualParams};
use s2fuse_core::selftest;
use s2fuse_core::synth::generate_scene;
use s2fuse_core::training::{self, Checkpoint, TrainConfig, TrainOutputs};

use crate::settings::Settings;
use crate::{AblateArgs, ArchName, EvalArgs, Failure, InferArgs, Mode, ModelFlags, Patches, PrepArgs, RenderArgs, SelftestArgs, SynthArgs, TrainArgs};

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn parse<T: std::str::FromStr>(key: &str, s: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Failure::usage(format!("--{key}: {e}")))
}

/// Prints the resolved settings and rejects stray config keys.
fn announce(settings: &Settings, command: &str) -> Result<(), Failure> {
    settings.finish()?;
    eprint!("# s2fuse {command}\n{}", settings.describe());
    Ok(())
}

fn train_config(s: &mut Settings, f: ModelFlags) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::default();
    let m = &mut cfg.model;
    m.guide = match s.get("mode", f.mode, Mode::GinetPlus)? {
        Mode::Ginet => GuideMode::Similarity,
        Mode::GinetPlus => GuideMode::Cluster,
    };
    m.arch = s.get("arch", f.arch, ArchName(Arch::Mha))?.0;
    m.stages = s.get("stages", f.stages, m.stages)?;
    m.width = s.get("width", f.width, m.width)?;
    m.fused = s.get("fused", f.fused, m.fused)?;
    m.attention.feat_dim = s.get("feat-dim", f.feat_dim, m.attention.feat_dim)?;
    m.resblocks = s.get("resblocks", f.resblocks, m.resblocks)?;
    m.cluster.clusters = s.get("clusters", f.clusters, m.cluster.clusters)?;
    m.attention.window = s.get("window", f.window, m.attention.window)?;
    let a = &m.attention;
    let Patches([pe, pg, pc]) = s.get("patch", f.patch, Patches([a.patch_error, a.patch_guide, a.patch_concat]))?;
    (m.attention.patch_error, m.attention.patch_guide, m.attention.patch_concat) = (pe, pg, pc);
    cfg.loss = s.get("loss", f.loss, cfg.loss)?;
    cfg.epochs = s.get("epochs", f.epochs, cfg.epochs)?;
    cfg.lr = s.get("lr", f.lr, cfg.lr)?;
    cfg.batch_size = s.get("batch-size", f.batch_size, cfg.batch_size)?;
    cfg.seed = s.get("seed", f.seed, cfg.seed)?;
    cfg.wald_sigma = s.get("sigma", f.sigma, cfg.wald_sigma)?;
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Ok(Manifest::load(path)?)
}

pub fn synth(s: &mut Settings, a: SynthArgs) -> Result<(), Failure> {
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let count = s.get("count", a.count, 4usize)?;
    let size = s.get("size", a.size, 480usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    announce(s, "synth")?;
    if size < 4 || size % 2 != 0 {
        return Err(Failure::usage(format!("--size {size} must be even and at least 4")));
    }
    let dir = &out;
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    for i in 0..count {
        let land = Landscape::ALL[i % Landscape::ALL.len()];
        let (hr, lr) = generate_scene(land, size, seed.wrapping_add(i as u64));
        let name = format!("{}_{i:03}", land.as_str());
        let crop = dataset::SceneCrop::new(name.clone(), land, hr, lr)?;
        let stem = dataset::save_crop(&crop, dir, &name)?;
        println!("{}", stem.display());
    }
    Ok(())
}

pub fn dataset_prep(s: &mut Settings, a: PrepArgs) -> Result<(), Failure> {
    let scenes: PathBuf = s.require("scenes", a.scenes.map(|p| p.display().to_string()))?.into();
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let crop = s.get("crop", a.crop, 240usize)?;
    let seed = s.get("seed", a.seed, 0u64)?;
    let splits: SplitSpec = parse("splits", &s.get("splits", a.splits, "500,100".to_string())?)?;
    let materialize = s.switch("materialize", a.materialize)?;
    let sigma = s.get("sigma", a.sigma, WALD_SIGMA)?;
    announce(s, "dataset-prep")?;

    let crop_dir = out.join("crops");
    fs::create_dir_all(&crop_dir).map_err(|e| io_failure(&crop_dir, e))?;
    let stems = dataset::list_crops(&scenes)?;
    if stems.is_empty() {
        return Err(Failure::data(format!("no *{} scenes in {}", dataset::HR10_SUFFIX, scenes.display())));
    }
    let mut total = 0;
    for stem in &stems {
        let name = stem.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let landscape = Landscape::from_name(&name);
        let scene = dataset::load_crop(stem, landscape)?;
        let crops = dataset::extract_crops(&scene.hr10, &scene.lr20, crop, landscape)?;
        for c in &crops {
            let saved = dataset::save_crop(c, &crop_dir, &format!("{name}_{}", c.id))?;
            if materialize {
                dataset::materialize_sample(&saved, &dataset::make_sample(c, sigma)?)?;
            }
        }
        eprintln!("{name}: {} crops ({landscape})", crops.len());
        total += crops.len();
    }
    let manifest = dataset::build_manifest(&[crop_dir], splits, seed)?;
    let path = out.join("manifest.json");
    manifest.save(&path)?;
    eprintln!(
        "{total} crops: {} train, {} val, {} test",
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    println!("{}", path.display());
    Ok(())
}

pub fn train(s: &mut Settings, a: TrainArgs) -> Result<(), Failure> {
    let manifest: PathBuf = s.require("manifest", a.manifest.map(|p| p.display().to_string()))?.into();
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    let cfg = train_config(s, a.model)?;
    announce(s, "train")?;
    let manifest = load_manifest(&manifest)?;
    let outputs = TrainOutputs { dir: Some(out.clone()) };
    let outcome = training::train_manifest(&cfg, &manifest, &outputs, |r| {
        eprintln!(
            "epoch {:>5}  loss {:.6}  val psnr {:.4}{}",
            r.epoch,
            r.train_loss,
            r.val_psnr,
            if r.improved { "  *" } else { "" }
        )
    })?;
    eprintln!("best val psnr {:.4} at epoch {}", outcome.best.best_val_psnr, outcome.best.epoch);
    println!("{}", out.join(training::BEST_CHECKPOINT).display());
    Ok(())
}

pub fn eval(s: &mut Settings, a: EvalArgs) -> Result<(), Failure> {
    let checkpoint: Option<PathBuf> = s.get_opt("checkpoint", a.checkpoint.map(|p| p.display().to_string()))?.map(Into::into);
    let bicubic = s.switch("bicubic", a.bicubic)?;
    let manifest: PathBuf = s.require("manifest", a.manifest.map(|p| p.display().to_string()))?.into();
    let split: Split = parse("split", &s.get("split", a.split, "test".to_string())?)?;
    let report_path: Option<PathBuf> = s.get_opt("report", a.report.map(|p| p.display().to_string()))?.map(Into::into);
    let mode = match s.get("psnr", a.psnr, "joint".to_string())?.as_str() {
        "joint" => PsnrMode::Joint,
        "per-band" => PsnrMode::PerBand,
        other => return Err(Failure::usage(format!("--psnr {other:?} (joint, per-band)"))),
    };
    let sigma_flag = s.get_opt("sigma", a.sigma)?;
    announce(s, "eval")?;
    let manifest = load_manifest(&manifest)?;
    let (model, sigma) = match (&checkpoint, bicubic) {
        (Some(_), true) => return Err(Failure::usage("--checkpoint and --bicubic are exclusive")),
        (None, false) => return Err(Failure::usage("either --checkpoint or --bicubic is required")),
        (Some(p), false) => {
            let ck = Checkpoint::load(p)?;
            let sigma = sigma_flag.unwrap_or(ck.config.wald_sigma);
            (Some(ck.model()?), sigma)
        }
        (None, true) => (None, sigma_flag.unwrap_or(WALD_SIGMA)),
    };
    let predictor = model.as_ref().map_or(Predictor::Bicubic, Predictor::Model);
    let report = metrics::evaluate_split(predictor, &manifest, split, sigma, mode)?;
    if let Some(p) = &report_path {
        fs::write(p, report.to_csv()).map_err(|e| io_failure(p, e))?;
    }
    for (l, x) in &report.by_landscape {
        println!("{l:<8} ergas {:.4}  psnr {:.4}  ssim {:.4}  sam {:.4}", x.ergas, x.psnr, x.ssim, x.sam);
    }
    let x = &report.mean;
    println!("{:<8} ergas {:.4}  psnr {:.4}  ssim {:.4}  sam {:.4}", "all", x.ergas, x.psnr, x.ssim, x.sam);
    Ok(())
}

pub fn infer(s: &mut Settings, a: InferArgs) -> Result<(), Failure> {
    let path = |s: &mut Settings, key: &str, v: Option<PathBuf>| -> Result<PathBuf, Failure> {
        Ok(s.require(key, v.map(|p| p.display().to_string()))?.into())
    };
    let checkpoint = path(s, "checkpoint", a.checkpoint)?;
    let input = path(s, "input", a.input)?;
    let hr = path(s, "hr", a.hr)?;
    let out = path(s, "out", a.out)?;
    announce(s, "infer")?;
    let model = Checkpoint::load(&checkpoint)?.model()?;
    let f = read(&input)?;
    let h = read(&hr)?;
    let pred = model.infer_stack(&f, &h)?;
    raster::write_raster(&pred, &out).map_err(|e| Failure::data(format!("{}: {e}", out.display())))?;
    eprintln!("{}x{} -> {}x{}", f.height(), f.width(), pred.height(), pred.width());
    println!("{}", out.display());
    Ok(())
}

fn read(path: &Path) -> Result<BandStack, Failure> {
    raster::read_raster(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

enum RenderKind {
    Composite(CompositeKind),
    Index(IndexKind),
    Error,
}

fn render_kind(s: &str) -> Result<RenderKind, Failure> {
    Ok(match s {
        "true" => RenderKind::Composite(CompositeKind::TrueColor),
        "urban" => RenderKind::Composite(CompositeKind::UrbanFalseColor),
        "swir" => RenderKind::Composite(CompositeKind::SwirComposite),
        "ndwi" => RenderKind::Index(IndexKind::Ndwi),
        "ndmi" => RenderKind::Index(IndexKind::Ndmi),
        "error" => RenderKind::Error,
        other => return Err(Failure::usage(format!("--kind {other:?} (true, urban, swir, ndwi, ndmi, error)"))),
    })
}

fn write_png(img: &Rgb8, path: &Path) -> Result<(), Failure> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Failure::data("image buffer does not match its size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn render(s: &mut Settings, a: RenderArgs) -> Result<(), Failure> {
    let kind_name = s.require("kind", a.kind)?;
    let kind = render_kind(&kind_name)?;
    let reference: Option<PathBuf> = s.get_opt("reference", a.reference.map(|p| p.display().to_string()))?.map(Into::into);
    let clip = s.get("clip", a.clip, 0.05f32)?;
    let d = VisualParams::default();
    let params = VisualParams {
        low_pct: s.get("low-pct", a.low_pct, d.low_pct)?,
        high_pct: s.get("high-pct", a.high_pct, d.high_pct)?,
        gamma: s.get("gamma", a.gamma, d.gamma)?,
    };
    let out: PathBuf = s.require("out", a.out.map(|p| p.display().to_string()))?.into();
    announce(s, "render")?;
    let stacks = a.input.iter().map(|p| read(p)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&BandStack> = stacks.iter().collect();
    let (h, w) = (stacks[0].height(), stacks[0].width());
    let img = match kind {
        RenderKind::Composite(k) => raster::render_visual(&raster::compose_multi(&refs, k)?, params)?,
        RenderKind::Index(k) => raster::render_index(&raster::compute_index_multi(&refs, k)?, h, w)?,
        RenderKind::Error => {
            let r = reference.ok_or_else(|| Failure::usage("--kind error needs --reference"))?;
            let r = read(&r)?;
            raster::render_unit_map(&raster::error_map(&stacks[0], &r, clip)?, h, w)?
        }
    };
    write_png(&img, &out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn ablate(s: &mut Settings, a: AblateArgs) -> Result<(), Failure> {
    let manifest: PathBuf = s.require("manifest", a.manifest.map(|p| p.display().to_string()))?.into();
    let items: Vec<String> = if a.grid.is_empty() {
        s.get_opt::<String>("grid", None)?
            .map(|g| g.split(';').map(str::trim).filter(|i| !i.is_empty()).map(String::from).collect())
            .unwrap_or_default()
    } else {
        s.get_opt("grid", Some(a.grid.join(";")))?;
        a.grid
    };
    let split: Split = parse("split", &s.get("split", a.split, "test".to_string())?)?;
    let out: Option<PathBuf> = s.get_opt("out", a.out.map(|p| p.display().to_string()))?.map(Into::into);
    let base = train_config(s, a.model)?;
    let mut grid = AblationGrid::default();
    for item in &items {
        grid.set(item).map_err(Failure::usage)?;
    }
    announce(s, "ablate")?;
    let manifest = load_manifest(&manifest)?;
    let runs = grid.expand(&base).len();
    eprintln!("{runs} configurations");
    let mut file = match &out {
        Some(p) => {
            let mut f = fs::File::create(p).map_err(|e| io_failure(p, e))?;
            writeln!(f, "{}", ablation::CSV_HEADER).map_err(|e| io_failure(p, e))?;
            Some((f, p))
        }
        None => None,
    };
    println!("{}", ablation::CSV_HEADER);
    let mut write_err = None;
    ablation::run_ablation(&grid, &base, &manifest, split, |row| {
        let line = row.csv_row();
        println!("{line}");
        if let Some((f, p)) = &mut file {
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(io_failure(p, e));
            }
        }
    })?;
    write_err.map_or(Ok(()), Err)
}

pub fn selftest(s: &mut Settings, a: SelftestArgs) -> Result<(), Failure> {
    announce(s, "selftest")?;
    if a.list {
        for n in selftest::check_names() {
            println!("{n}");
        }
        return Ok(());
    }
    if let Some(f) = &a.inject_fault {
        if !selftest::check_names().contains(f) {
            return Err(Failure::usage(format!("unknown check {f:?}")));
        }
    }
    let opts = selftest::Options { fault: a.inject_fault };
    let results = selftest::run(&opts, |r| println!("{}", r.line()));
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        Err(Failure::numeric(format!("{failed} self-checks failed")))
    } else {
        Ok(())
    }
}
