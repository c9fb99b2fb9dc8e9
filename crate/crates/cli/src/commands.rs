//! Subcommand implementations.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use loftup_core::backbone::{Backbone, BackboneSpec, FileBackbone, ToyBackbone};
use loftup_core::eval::{bench, pca_visualize, probe_benchmark, FeatureSource};
use loftup_core::io::checkpoint::{load_checkpoint, rng_digest, save_checkpoint, Manifest};
use loftup_core::io::dataset::{load_dataset, save_dataset, synth_dataset, Sample};
use loftup_core::io::features::write_lfuf;
use loftup_core::io::png::{read_rgb, write_labels16, write_rgb};
use loftup_core::io::rle::masks_from_annotations;
use loftup_core::params::ParamSet;
use loftup_core::trainer::{train_model, StepRecord, TrainConfig};
use loftup_core::upsampler::{Model, ModelConfig, Upsampler};
use loftup_core::ImageTensor;
use serde::Serialize;

use crate::config::FileConfig;
use crate::{
    BenchArgs, Cli, CliError, Command, ImportRleArgs, ProbeArgs, SynthArgs, TrainArgs, UpsampleArgs, VisualizeArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData(a) => synth(a),
        Command::TrainStage1(a) => train_stage1(&file, a),
        Command::TrainStage2(a) => train_stage2(&file, a),
        Command::Upsample(a) => upsample(&file, a),
        Command::Probe(a) => probe(&file, a),
        Command::Visualize(a) => visualize(&file, a),
        Command::Bench(a) => bench_cmd(&file, a),
        Command::ImportRle(a) => import_rle(a),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let samples = synth_dataset(a.n, a.res, a.res, a.seed)?;
    save_dataset(&a.out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_train_data(a: &TrainArgs) -> Result<Vec<Sample>> {
    let data = load_dataset(&a.data, None, a.limit)?;
    if data.is_empty() {
        return Err(CliError::Runtime(format!("no images found under {}", a.data.display())));
    }
    Ok(data)
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.steps {
        cfg.max_steps = Some(s);
    }
    if let Some(alpha) = a.alpha {
        cfg.pseudo_gt.alpha = alpha;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))
}

/// Trains, then writes the checkpoint and the metrics log.
fn fit_and_save(
    model_cfg: ModelConfig,
    backbone_spec: BackboneSpec,
    cfg: TrainConfig,
    init: ParamSet,
    data: &[Sample],
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let model = model_cfg.build()?;
    let backbone = ToyBackbone::new(backbone_spec.clone())?;
    let mut on_step = |r: &StepRecord| {
        eprintln!("stage {} step {:>5} loss {:.6} ({:.0} ms)", r.stage, r.step, r.loss, r.wall_ms);
    };
    let result = train_model(&model, &backbone, data, &cfg, init, Some(&mut on_step))?;
    let step = result.history.len();
    let manifest = Manifest {
        stage: cfg.stage.into(),
        step,
        rng_digest: rng_digest(cfg.seed, step),
        model: model_cfg,
        backbone: backbone_spec,
        train: Some(cfg),
        params: Vec::new(),
    };
    save_checkpoint(out, &result.params, &manifest)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.join("metrics.jsonl"));
    if log_path.exists() && log.is_none() {
        fs::remove_file(&log_path).map_err(|e| io_err(&log_path, e))?;
    }
    append_jsonl(&log_path, &result.history)?;
    if let Some(last) = result.history.last() {
        println!("{} steps, final loss {:.6}, checkpoint {}", step, last.loss, out.display());
    }
    Ok(())
}

fn train_stage1(file: &FileConfig, a: TrainArgs) -> Result<()> {
    let mut cfg = file.stage1()?;
    apply_overrides(&mut cfg, &a)?;
    let backbone = file.backbone.clone();
    let (model_cfg, init) = match &a.ckpt {
        Some(dir) => {
            let (m, p) = load_checkpoint(dir)?;
            (m.model, p)
        }
        None => {
            let model_cfg = match (&a.upsampler, &file.model) {
                (Some(name), _) => ModelConfig::by_name(name, backbone.channels)?,
                (None, Some(m)) => m.clone(),
                (None, None) => ModelConfig::by_name("loftup", backbone.channels)?,
            };
            let init = model_cfg.build()?.init_params(cfg.seed);
            (model_cfg, init)
        }
    };
    let data = load_train_data(&a)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("checkpoints/stage1"));
    fit_and_save(model_cfg, backbone, cfg, init, &data, &out, a.log.as_deref())
}

fn train_stage2(file: &FileConfig, a: TrainArgs) -> Result<()> {
    let Some(dir) = &a.ckpt else {
        return Err(CliError::Usage("train-stage2 needs --ckpt with a stage-1 checkpoint".into()));
    };
    if a.upsampler.is_some() {
        return Err(CliError::Usage("--upsampler is taken from the checkpoint in stage 2".into()));
    }
    let mut cfg = file.stage2()?;
    apply_overrides(&mut cfg, &a)?;
    let (manifest, params) = load_checkpoint(dir)?;
    let data = load_train_data(&a)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("checkpoints/stage2"));
    fit_and_save(manifest.model, manifest.backbone, cfg, params, &data, &out, a.log.as_deref())
}

/// A model with its parameters and the backbone it was trained against.
struct Loaded {
    model: Model,
    params: ParamSet,
    backbone: BackboneSpec,
}

fn load_model(file: &FileConfig, ckpt: Option<&Path>, upsampler: Option<&str>) -> Result<Loaded> {
    if let Some(dir) = ckpt {
        let (m, params) = load_checkpoint(dir)?;
        if let Some(name) = upsampler {
            if name != m.model.build()?.name() {
                return Err(CliError::Usage(format!("checkpoint holds a different upsampler than `{name}`")));
            }
        }
        return Ok(Loaded {
            model: m.model.build()?,
            params,
            backbone: m.backbone,
        });
    }
    let model_cfg = match (upsampler, &file.model) {
        (Some(name), _) => ModelConfig::by_name(name, file.backbone.channels)?,
        (None, Some(m)) => m.clone(),
        (None, None) => {
            return Err(CliError::Usage("pass --ckpt or --upsampler".into()));
        }
    };
    let model = model_cfg.build()?;
    if model.is_trainable() {
        eprintln!("warning: `{}` is untrained; pass --ckpt for a trained model", model.name());
    }
    let params = model.init_params(0);
    Ok(Loaded {
        model,
        params,
        backbone: file.backbone.clone(),
    })
}

fn upsampled(l: &Loaded, img: &ImageTensor, features: Option<&Path>, res: Option<usize>) -> Result<loftup_core::FeatureMap> {
    let backbone: Box<dyn Backbone> = match features {
        Some(p) => Box::new(FileBackbone::from_sidecar(p, l.backbone.patch_size)?),
        None => Box::new(ToyBackbone::new(l.backbone.clone())?),
    };
    let lowres = backbone.forward(img)?;
    let (h, w) = match res {
        Some(r) => (r, r),
        None => (img.height(), img.width()),
    };
    Ok(l.model.forward(&l.params, img, &lowres, h, w)?)
}

fn upsample(file: &FileConfig, a: UpsampleArgs) -> Result<()> {
    let l = load_model(file, a.ckpt.as_deref(), a.upsampler.as_deref())?;
    let img = read_rgb(&a.image)?;
    let f = upsampled(&l, &img, a.features.as_deref(), a.res)?;
    write_lfuf(&a.out, &f)?;
    println!("{}: {}×{}×{}", a.out.display(), f.channels(), f.height(), f.width());
    Ok(())
}

fn visualize(file: &FileConfig, a: VisualizeArgs) -> Result<()> {
    let l = load_model(file, a.ckpt.as_deref(), a.upsampler.as_deref())?;
    let img = read_rgb(&a.image)?;
    let f = upsampled(&l, &img, None, a.res)?;
    write_rgb(&a.out, &pca_visualize(&f)?, 0)?;
    Ok(())
}

#[derive(Serialize)]
struct ProbeRecord<'a> {
    source: &'a str,
    miou: f64,
    train_images: usize,
    test_images: usize,
    seed: u64,
}

fn probe(file: &FileConfig, a: ProbeArgs) -> Result<()> {
    if !(a.test_frac > 0.0 && a.test_frac < 1.0) {
        return Err(CliError::Usage(format!("--test-frac must lie in (0, 1), got {}", a.test_frac)));
    }
    let mut cfg = file.probe.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let data = load_dataset(&a.data, Some(cfg.seed), a.limit)?;
    let num_classes = data
        .iter()
        .map(|s| {
            s.classes
                .as_ref()
                .map(|c| c.max_label() as usize + 1)
                .ok_or_else(|| CliError::Runtime(format!("sample `{}` has no class map", s.stem)))
        })
        .try_fold(0, |m, c| c.map(|c| m.max(c)))?;
    if data.len() < 2 {
        return Err(CliError::Runtime("probing needs at least two images".into()));
    }
    let n_test = ((data.len() as f64 * a.test_frac).round() as usize).clamp(1, data.len() - 1);
    let (train, test) = data.split_at(data.len() - n_test);

    let lowres = a.upsampler.as_deref() == Some("lowres");
    let (source_name, miou) = if lowres {
        if a.ckpt.is_some() {
            return Err(CliError::Usage("--ckpt cannot be combined with --upsampler lowres".into()));
        }
        let backbone = ToyBackbone::new(file.backbone.clone())?;
        let m = probe_benchmark(FeatureSource::LowRes, &backbone, train, test, num_classes, &cfg)?;
        ("lowres".to_string(), m)
    } else {
        if let Some(name) = a.upsampler.as_deref() {
            ModelConfig::by_name(name, 1).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        let l = load_model(file, a.ckpt.as_deref(), a.upsampler.as_deref())?;
        let backbone = ToyBackbone::new(l.backbone.clone())?;
        let m = probe_benchmark(FeatureSource::Upsampled(&l.model, &l.params), &backbone, train, test, num_classes, &cfg)?;
        (l.model.name().to_string(), m)
    };
    let rec = ProbeRecord {
        source: &source_name,
        miou,
        train_images: train.len(),
        test_images: test.len(),
        seed: cfg.seed,
    };
    println!("{}", serde_json::to_string(&rec).map_err(|e| CliError::Runtime(e.to_string()))?);
    if let Some(out) = &a.out {
        append_jsonl(out, &[rec])?;
    }
    Ok(())
}

fn bench_cmd(file: &FileConfig, a: BenchArgs) -> Result<()> {
    let mut spec = file.backbone.clone();
    if let Some(c) = a.channels {
        spec.channels = c;
    }
    let model_cfg = match &file.model {
        Some(m) if a.upsampler == m.build()?.name() => m.clone(),
        _ => ModelConfig::by_name(&a.upsampler, spec.channels)?,
    };
    let backbone = ToyBackbone::new(spec)?;
    let r = bench(&model_cfg, &backbone, a.res, a.out_res.unwrap_or(a.res), a.n)?;
    println!("{}", serde_json::to_string(&r).map_err(|e| CliError::Runtime(e.to_string()))?);
    if let Some(out) = &a.out {
        append_jsonl(out, &[r])?;
    }
    Ok(())
}

fn import_rle(a: ImportRleArgs) -> Result<()> {
    let json = fs::read_to_string(&a.json).map_err(|e| io_err(&a.json, e))?;
    let masks = masks_from_annotations(&json)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_labels16(&a.out, masks.raster())?;
    println!("{}: {} regions", a.out.display(), masks.num_regions());
    Ok(())
}

