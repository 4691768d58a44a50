//! Subcommand bodies. Each resolves its inputs from a [`RunConfig`], writes
//! `config.resolved` beside its outputs and maps failures to exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use lesion_core::imageio;
use lesion_core::inpaint::{
    self, DiffusionModel, DiffusionTrainConfig, LossRegion, MaskConfig, SampleConfig, Sampler,
};
use lesion_core::metrics::{self, FeatureExtractor};
use lesion_core::schedule::{linear_schedule, NoiseSchedule};
use lesion_core::segbench::{self, BenchConfig, BenchData, Generator, Provenance, SegConfig, SegSample, Strategy};
use lesion_core::seed;
use lesion_core::synthdata::{self, CorpusStyle, DatasetManifest, Split, StyleId};
use lesion_core::train::{OptimConfig, RunLog, Trainer};
use lesion_core::unet::{TrainMode, UNetConfig};
use lesion_core::vae::{self, Vae, VaeConfig, VaeTrainConfig};
use lesion_core::Error;
use lesion_tensor::{Archive, Tensor};

use crate::config::{ConfigError, RunConfig};

pub const RESOLVED: &str = "config.resolved";
pub const RUN_LOG: &str = "run.csv";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = if matches!(e, ConfigError::Read(..)) { 3 } else { 2 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_) => 2,
            Error::Io { .. } | Error::Load { .. } => 3,
            Error::MissingArtifact { .. } => 4,
            Error::SamplerDiverged { .. } => 1,
            Error::Tensor(t) => match t {
                lesion_tensor::Error::Io { .. } | lesion_tensor::Error::Format { .. } => 3,
                lesion_tensor::Error::MissingParam(_) => 3,
                _ => 2,
            },
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<lesion_tensor::Error> for CliError {
    fn from(e: lesion_tensor::Error) -> Self {
        Error::from(e).into()
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError {
        code: 3,
        message: format!("{}: {e}", path.display()),
    }
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError {
        code: 4,
        message: format!("missing {what}: {}", path.display()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    let p = dir.join(RESOLVED);
    fs::write(&p, cfg.resolved()).map_err(io(&p))
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    Ok(linear_schedule(
        cfg.uint("schedule.steps")?,
        cfg.float("schedule.beta_start"),
        cfg.float("schedule.beta_end"),
    )?)
}

fn mask_config(cfg: &RunConfig) -> MaskConfig {
    MaskConfig {
        min_frac: cfg.float("diffusion.mask_min_frac") as f32,
        max_frac: cfg.float("diffusion.mask_max_frac") as f32,
    }
}

fn sample_config(cfg: &RunConfig) -> Result<SampleConfig> {
    Ok(SampleConfig {
        sampler: cfg.get("sample.sampler").parse::<Sampler>()?,
        steps: cfg.uint("sample.steps")?,
        guidance: cfg.float("sample.guidance") as f32,
        composite: cfg.flag("sample.composite"),
        seed: cfg.u64("sample.seed")?,
        ..SampleConfig::default()
    })
}

fn load_vae(cfg: &RunConfig) -> Result<Vae> {
    let p = cfg.path("paths.vae")?;
    if !p.exists() {
        return Err(missing(&p, "VAE checkpoint"));
    }
    Ok(Vae::load(&p)?)
}

fn load_diffusion(cfg: &RunConfig) -> Result<DiffusionModel> {
    let p = cfg.path("paths.diffusion")?;
    if !p.exists() {
        return Err(missing(&p, "diffusion checkpoint"));
    }
    Ok(DiffusionModel::load(&p)?)
}

fn load_corpus(cfg: &RunConfig) -> Result<DatasetManifest> {
    Ok(DatasetManifest::load(&cfg.path("paths.corpus")?)?)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("paths.out")?;
    let style = CorpusStyle::preset(cfg.get("synth.style").parse::<StyleId>()?);
    style.validate()?;
    let m = synthdata::build_corpus(
        &style,
        cfg.uint("synth.n")?,
        cfg.u64("general.seed")?,
        cfg.uint("general.image_size")?,
        &out,
    )?;
    write_resolved(&out, cfg)?;
    println!("{}", m.path().display());
    Ok(())
}

fn train_images(corpus: &DatasetManifest) -> Result<Vec<Tensor>> {
    let imgs: Vec<Tensor> = corpus.load_split(Split::Train)?.into_iter().map(|(i, _)| i).collect();
    if imgs.is_empty() {
        return Err(CliError::usage("corpus has no training images"));
    }
    Ok(imgs)
}

/// Restore params/optimizer state from `ckpt` and the log beside it.
fn restore_trainer(trainer: &mut Trainer, archive: &Archive, dir: &Path) -> Result<()> {
    let log_path = dir.join(RUN_LOG);
    let log = if log_path.exists() { RunLog::load(&log_path)? } else { RunLog::default() };
    trainer.restore(archive, log)?;
    Ok(())
}

pub fn train_vae(cfg: &RunConfig, resume: bool) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let out = cfg.path("paths.out")?;
    let images = train_images(&corpus)?;
    let vcfg = VaeConfig {
        width: cfg.uint("vae.width")?,
        latent_channels: cfg.uint("vae.latent_channels")?,
        factor: cfg.uint("vae.factor")?,
    };
    let tcfg = VaeTrainConfig {
        optim: OptimConfig {
            lr: cfg.float("vae.lr"),
            warmup_steps: cfg.u64("vae.warmup")?,
            total_steps: cfg.u64("vae.steps")?,
            weight_decay: cfg.float("vae.weight_decay") as f32,
            batch: cfg.uint("vae.batch")?,
        },
        beta_kl: cfg.float("vae.beta_kl") as f32,
        seed: cfg.u64("general.seed")?,
        calibrate_images: cfg.uint("vae.calibrate_images")?,
    };
    write_resolved(&out, cfg)?;
    let ckpt = out.join("vae.pgck");
    let mut trainer = Trainer::new(&tcfg.optim)?;
    let mut model = if resume && ckpt.exists() {
        let a = Archive::load(&ckpt)?;
        restore_trainer(&mut trainer, &a, &out)?;
        log::info!("resuming VAE at step {}", trainer.step());
        Vae::from_archive(&a)?
    } else {
        Vae::new(vcfg, tcfg.seed)?
    };
    let preview: Vec<Tensor> = images.iter().take(8).cloned().collect();
    let samples = out.join("samples");
    create_dir(&samples)?;
    vae::train_vae(
        &mut model,
        &mut trainer,
        &images,
        &tcfg,
        cfg.u64("vae.checkpoint_every")?,
        |v, tr| {
            let mut a = v.to_archive();
            tr.save_into(&mut a);
            a.save(&ckpt)?;
            tr.log.save(&out.join(RUN_LOG))?;
            let recon = v.decode_batch(&v.encode_batch(&Tensor::stack(&preview)?)?)?;
            let mut tiles = preview.clone();
            tiles.extend((0..preview.len()).map(|i| recon.index0(i)).collect::<lesion_tensor::Result<Vec<_>>>()?);
            let grid = imageio::grid(&tiles, preview.len())?;
            imageio::save_rgb(&grid, &samples.join(format!("vae_{:06}.png", tr.step())))
        },
    )?;
    println!("{}", ckpt.display());
    Ok(())
}

pub fn train_diffusion(cfg: &RunConfig, resume: bool) -> Result<()> {
    let vae_path = cfg.path("paths.vae")?;
    if !vae_path.exists() {
        return Err(missing(&vae_path, "VAE checkpoint (train the vae stage first)"));
    }
    let vae = Vae::load(&vae_path)?;
    let corpus = load_corpus(cfg)?;
    let out = cfg.path("paths.out")?;
    let images = train_images(&corpus)?;
    let sched = schedule(cfg)?;
    let ucfg = UNetConfig {
        latent_channels: vae.config.latent_channels,
        base_width: cfg.uint("diffusion.base_width")?,
        depth: cfg.uint("diffusion.depth")?,
        attention: cfg.flag("diffusion.attention"),
        time_embed_dim: cfg.uint("diffusion.time_embed_dim")?,
    };
    let optim = OptimConfig {
        lr: cfg.float("diffusion.lr"),
        warmup_steps: cfg.u64("diffusion.warmup")?,
        total_steps: cfg.u64("diffusion.steps")?,
        weight_decay: cfg.float("diffusion.weight_decay") as f32,
        batch: cfg.uint("diffusion.batch")?,
    };
    let dcfg = DiffusionTrainConfig {
        dropout: cfg.float("diffusion.dropout"),
        loss_region: match cfg.get("diffusion.loss_region") {
            "full" => LossRegion::Full,
            "benign_half" => LossRegion::BenignHalf,
            "hole_only" => LossRegion::HoleOnly,
            other => {
                return Err(CliError::usage(format!(
                    "diffusion.loss_region `{other}` (full | benign_half | hole_only)"
                )))
            }
        },
        mode: cfg.get("diffusion.train_mode").parse::<TrainMode>()?,
        mask: mask_config(cfg),
        seed: cfg.u64("general.seed")?,
    };
    if !(0.0..=1.0).contains(&dcfg.dropout) {
        return Err(CliError::usage("diffusion.dropout must lie in [0, 1]"));
    }
    write_resolved(&out, cfg)?;
    let ckpt = out.join("diffusion.pgck");
    let mut trainer = Trainer::new(&optim)?;
    let mut model = if resume && ckpt.exists() {
        let a = Archive::load(&ckpt)?;
        restore_trainer(&mut trainer, &a, &out)?;
        log::info!("resuming diffusion at step {}", trainer.step());
        DiffusionModel::from_archive(&a)?
    } else {
        DiffusionModel::new(ucfg, dcfg.seed)?
    };
    let samples = out.join("samples");
    create_dir(&samples)?;
    let preview: Vec<&Tensor> = images.iter().take(4).collect();
    let scfg = SampleConfig {
        seed: dcfg.seed,
        ..sample_config(cfg)?
    };
    inpaint::train_diffusion(
        &mut model,
        &mut trainer,
        &images,
        &vae,
        &sched,
        &dcfg,
        optim.batch,
        cfg.u64("diffusion.checkpoint_every")?,
        |m, tr| {
            let mut a = m.to_archive();
            tr.save_into(&mut a);
            a.save(&ckpt)?;
            tr.log.save(&out.join(RUN_LOG))?;
            let mut tiles = Vec::new();
            for (k, img) in preview.iter().enumerate() {
                let mut r = seed::rng(dcfg.seed, "preview.mask", k as u64);
                let spec = inpaint::gen_mask(&mut r, img.dim(1), img.dim(2), &dcfg.mask)?;
                let reference = inpaint::reference_canvas(img, &spec.inner)?;
                let result = inpaint::inpaint(img, &reference, &spec.mask, &vae, m, &sched, &scfg)?;
                tiles.push((*img).clone());
                tiles.push(inpaint::apply_mask(img, &spec.mask)?);
                tiles.push(result);
            }
            let grid = imageio::grid(&tiles, 3)?;
            imageio::save_rgb(&grid, &samples.join(format!("diffusion_{:06}.png", tr.step())))
        },
    )?;
    println!("{}", ckpt.display());
    Ok(())
}

pub fn mask_copy_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    parent_dir(out).join(format!("{stem}_mask.png"))
}

fn load_input(cfg: &RunConfig, key: &str, mask: bool) -> Result<Tensor> {
    let p = cfg.path(key)?;
    if !p.exists() {
        return Err(CliError {
            code: 3,
            message: format!("{key}: no such file {}", p.display()),
        });
    }
    Ok(if mask { imageio::load_mask(&p)? } else { imageio::load_rgb(&p)? })
}

pub fn inpaint(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("paths.out")?;
    let benign = load_input(cfg, "inpaint.benign", false)?;
    let reference = load_input(cfg, "inpaint.reference", false)?;
    let mask = load_input(cfg, "inpaint.mask", true)?;
    let size = |t: &Tensor| format!("{}×{}", t.dim(t.rank() - 1), t.dim(t.rank() - 2));
    if benign.shape() != reference.shape() {
        return Err(CliError::usage(format!(
            "resolution mismatch: benign {} vs reference {}",
            size(&benign),
            size(&reference)
        )));
    }
    if mask.shape() != &benign.shape()[1..] {
        return Err(CliError::usage(format!(
            "resolution mismatch: benign {} vs mask {}",
            size(&benign),
            size(&mask)
        )));
    }
    let scfg = sample_config(cfg)?;
    let vae = load_vae(cfg)?;
    let model = load_diffusion(cfg)?;
    let sched = schedule(cfg)?;
    let result = inpaint::inpaint(&benign, &reference, &mask, &vae, &model, &sched, &scfg)?;
    let dir = parent_dir(&out);
    write_resolved(&dir, cfg)?;
    imageio::save_rgb(&result, &out)?;
    imageio::save_mask(&mask, &mask_copy_path(&out))?;
    println!("{}", out.display());
    Ok(())
}

/// PNGs of a directory (its `images/` subdirectory for corpora), by name.
pub fn image_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let dir = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files.iter().map(|p| imageio::load_rgb(p)).collect::<lesion_core::Result<_>>()?)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let real_dir = cfg.path("eval.real")?;
    let gen_dir = cfg.path("eval.generated")?;
    let real = image_dir(&real_dir)?;
    let generated = image_dir(&gen_dir)?;
    for (name, set) in [("real", &real), ("generated", &generated)] {
        if set.len() < 2 {
            return Err(CliError::usage(format!("{name} set needs at least 2 images, found {}", set.len())));
        }
    }
    let fe = FeatureExtractor::new(cfg.get("eval.feature_version"));
    let rows = metrics::compare_sets(&real, &generated, ("real", "generated"), &fe)?;
    let csv = metrics::metrics_csv(&rows);
    match cfg.get("paths.out") {
        "" => print!("{csv}"),
        out => {
            let out = PathBuf::from(out);
            write_resolved(&parent_dir(&out), cfg)?;
            fs::write(&out, csv).map_err(io(&out))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let corpus = load_corpus(cfg)?;
    let out = cfg.path("paths.out")?;
    let strategies = cfg
        .text_list("bench.strategies")
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<lesion_core::Result<Vec<_>>>()?;
    let seeds = cfg.uint_list("bench.seeds")?.into_iter().map(|s| s as u64).collect();
    let style_id = corpus.records[0].style;
    let bcfg = BenchConfig {
        style: style_id.to_string(),
        real_counts: cfg.uint_list("bench.real_counts")?,
        synth_ratio: cfg.uint("bench.synth_ratio")?,
        strategies,
        seeds,
        seg: SegConfig {
            base_width: cfg.uint("bench.seg_base_width")?,
            steps: cfg.u64("bench.seg_steps")?,
            batch: cfg.uint("bench.seg_batch")?,
            lr: cfg.float("bench.seg_lr"),
            ..SegConfig::default()
        },
    };
    if bcfg.strategies.is_empty() || bcfg.real_counts.is_empty() || bcfg.seeds.is_empty() {
        return Err(CliError::usage("bench grid is empty (strategies, real_counts and seeds must be non-empty)"));
    }
    let pathogen = bcfg.strategies.contains(&Strategy::Pathogen);
    let models = if pathogen {
        Some((load_vae(cfg)?, load_diffusion(cfg)?, schedule(cfg)?))
    } else {
        None
    };
    let data = bench_data(&corpus, style_id)?;
    write_resolved(&out, cfg)?;
    let sample = sample_config(cfg)?;
    let gen = models.as_ref().map(|(v, m, s)| Generator {
        vae: v,
        model: m,
        schedule: s,
        sample: sample.clone(),
        mask: mask_config(cfg),
    });
    let report = segbench::run_bench(&bcfg, &data, gen.as_ref())?;
    let csv_path = out.join("report.csv");
    fs::write(&csv_path, report.to_csv()).map_err(io(&csv_path))?;
    let svg_path = out.join(format!("curves_{}.svg", bcfg.style));
    fs::write(&svg_path, report.to_svg()).map_err(io(&svg_path))?;
    for c in report.aggregate() {
        println!("{:<12} n={:<3} dice {:.4} ± {:.4}", c.strategy, c.real_count, c.mean, c.std);
    }
    if report.all_failed() {
        return Err(CliError {
            code: 5,
            message: format!("every benchmark cell failed; see {}", csv_path.display()),
        });
    }
    Ok(())
}

/// Train/test pools of a corpus, with a lesion-free twin for each training
/// image regenerated from its recorded seed.
pub fn bench_data(corpus: &DatasetManifest, style_id: StyleId) -> Result<BenchData> {
    let load = |split| -> Result<Vec<SegSample>> {
        corpus
            .load_split(split)?
            .into_iter()
            .map(|(i, m)| Ok(SegSample::new(i, m, Provenance::Real)?))
            .collect()
    };
    let train = load(Split::Train)?;
    let test = load(Split::Test)?;
    let benign_style = CorpusStyle::preset(style_id).benign();
    let benign = corpus
        .split(Split::Train)
        .zip(&train)
        .map(|(r, s)| {
            let img = synthdata::gen_from_seed(&benign_style, r.seed, s.image.dim(1))?.0;
            // same 8-bit quantization as the PNGs on disk
            Ok(img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchData { train, benign, test })
}
