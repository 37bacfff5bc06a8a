use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use glfcr::checkpoint::{self, Checkpoint};
use glfcr::data::{self, SceneTriplet, SynthConfig};
use glfcr::metrics::{self, SceneMetrics};
use glfcr::training::{self, RunPaths, Trainer};
use glfcr::{DType, Element, GlfcrModel, ModelConfig, Tensor};

use crate::config::{self, normalize_key, Preset, Resolved};
use crate::manifest::RunManifest;
use crate::{CliError, EvalArgs, InferArgs, Source, SynthArgs, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Lib(glfcr::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn parse_dtype(s: Option<&str>) -> Result<DType, CliError> {
    match s {
        None | Some("f32") => Ok(DType::F32),
        Some("f64") => Ok(DType::F64),
        Some(other) => Err(CliError::Usage(format!("dtype must be f32 or f64, got {other:?}"))),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

fn synth_config(a: &SynthArgs) -> Result<(SynthConfig, usize, Vec<(String, String)>), CliError> {
    let mut cfg = SynthConfig::default();
    let mut scenes = 8usize;
    let mut cov_max: Option<f64> = None;
    let mut pairs = match &a.config {
        Some(p) => config::read_pairs(p)?,
        None => Vec::new(),
    };
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    flag("scenes", a.scenes.map(|v| v.to_string()));
    flag("size", a.size.map(|v| v.to_string()));
    flag("coverage", a.coverage.map(|v| v.to_string()));
    flag("coverage_max", a.coverage_max.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("bands", a.bands.map(|v| v.to_string()));
    flag("looks", a.looks.map(|v| v.to_string()));
    flag("softness", a.softness.map(|v| v.to_string()));

    fn parse<V: std::str::FromStr>(k: &str, v: &str) -> Result<V, CliError> {
        v.parse().map_err(|_| CliError::Usage(format!("{k}: cannot parse {v:?}")))
    }
    let mut coverage = cfg.coverage.0;
    for (k, v) in &pairs {
        match normalize_key(k).as_str() {
            "scenes" => scenes = parse(k, v)?,
            "size" => {
                cfg.height = parse(k, v)?;
                cfg.width = cfg.height;
            }
            "coverage" => coverage = parse(k, v)?,
            "coverage_max" => cov_max = if v == "none" { None } else { Some(parse(k, v)?) },
            "seed" => cfg.seed = parse(k, v)?,
            "bands" => cfg.bands = parse(k, v)?,
            "looks" => cfg.looks = parse(k, v)?,
            "softness" => cfg.softness = parse(k, v)?,
            other => return Err(CliError::Usage(format!("unknown synth key {other:?}"))),
        }
    }
    cfg.coverage = (coverage, cov_max.unwrap_or(coverage));
    cfg.validate()?;
    if scenes == 0 {
        return Err(CliError::Usage("scenes must be positive".into()));
    }
    let resolved = vec![
        ("scenes".into(), scenes.to_string()),
        ("size".into(), cfg.height.to_string()),
        ("coverage".into(), cfg.coverage.0.to_string()),
        ("coverage_max".into(), cfg.coverage.1.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("bands".into(), cfg.bands.to_string()),
        ("looks".into(), cfg.looks.to_string()),
        ("softness".into(), cfg.softness.to_string()),
    ];
    Ok((cfg, scenes, resolved))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let (cfg, scenes, pairs) = synth_config(a)?;
    let manifest = RunManifest::new("synth", &a.out, cfg.seed, pairs)
        .artifact("dataset", &a.out)
        .artifact("scene_manifest", a.out.join(data::MANIFEST_FILE));
    manifest.write()?;
    let rows = data::synth_dataset(&a.out, &cfg, scenes)?;
    let mean = rows.iter().map(|r| r.coverage).sum::<f64>() / rows.len() as f64;
    println!(
        "wrote {} scenes of {}x{} to {} (mean coverage {mean:.3})",
        rows.len(),
        cfg.height,
        cfg.width,
        a.out.display()
    );
    manifest.finish()
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let r = config::resolve(a.preset, a.config.as_deref(), &a.flag_pairs())?;
    require_dir(&a.data, "dataset")?;
    if let Some(v) = &a.val {
        require_dir(v, "validation dataset")?;
    }
    if let Some(c) = &a.resume {
        require_file(c, "checkpoint")?;
    }
    let paths = RunPaths::new(&a.out);
    let manifest = RunManifest::new("train", &a.out, r.train.seed, r.to_pairs())
        .artifact("data", &a.data)
        .artifact("trace", paths.trace())
        .artifact("last_checkpoint", paths.last());
    manifest.write()?;
    match r.dtype {
        DType::F32 => train_as::<f32>(a, &r, &paths)?,
        DType::F64 => train_as::<f64>(a, &r, &paths)?,
    }
    manifest.finish()
}

fn check_same_model(checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<(), CliError> {
    match checkpoint.first_difference(requested) {
        Some((field, c, q)) => Err(CliError::Mismatch {
            field: field.to_string(),
            checkpoint: c,
            requested: q,
        }),
        None => Ok(()),
    }
}

fn check_scenes<T: Element>(scenes: &[SceneTriplet<T>], model: &ModelConfig, what: &Path) -> Result<(), CliError> {
    if scenes.is_empty() {
        return Err(CliError::Usage(format!("dataset {} has no scenes", what.display())));
    }
    for (i, s) in scenes.iter().enumerate() {
        if s.bands() != model.bands {
            return Err(CliError::Usage(format!(
                "scene {i} of {} has {} bands, model expects {}",
                what.display(),
                s.bands(),
                model.bands
            )));
        }
    }
    Ok(())
}

fn train_as<T: Element>(a: &TrainArgs, r: &Resolved, paths: &RunPaths) -> Result<(), CliError> {
    let scenes: Vec<SceneTriplet<T>> = data::load_dataset(&a.data)?;
    check_scenes(&scenes, &r.model, &a.data)?;
    let mut trainer: Trainer<T> = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            check_same_model(&ck.model_config()?, &r.model)?;
            ck.trainer(Some(r.train.clone()))?
        }
        None => Trainer::new(GlfcrModel::new(r.model.clone(), r.train.seed)?, r.train.clone())?,
    };
    let count = trainer.model.params.numel();
    let mut listing = String::from("name\tnumel\n");
    for (name, p) in trainer.model.params.iter() {
        let _ = writeln!(listing, "{name}\t{}", p.value.numel());
    }
    write_text(&paths.dir.join("params.tsv"), &listing)?;
    println!(
        "variant {} with {count} parameters, starting at epoch {}",
        r.model.variant, trainer.epoch
    );

    let rows = training::fit(&mut trainer, &scenes, Some(paths))?;
    let mut summary = format!("parameters\t{count}\nsteps\t{}\n", trainer.step);
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        println!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, rows.len());
        let _ = writeln!(summary, "first_loss\t{}\nfinal_loss\t{}", first.loss, last.loss);
    }
    if let Some(v) = &a.val {
        let val: Vec<SceneTriplet<T>> = data::load_dataset(v)?;
        check_scenes(&val, &r.model, v)?;
        let l1 = training::validation_l1(&trainer.model, &val)?;
        println!("validation L1 {l1:.6}");
        let _ = writeln!(summary, "val_l1\t{l1}");
    }
    write_text(&paths.dir.join("summary.tsv"), &summary)
}

/// Expected model config from eval/infer flags, if any were given.
fn requested_model(preset: Option<Preset>, file: Option<&Path>, flags: &[(String, String)]) -> Result<Option<ModelConfig>, CliError> {
    if preset.is_none() && file.is_none() && flags.is_empty() {
        return Ok(None);
    }
    let mut r = Resolved::new(preset.unwrap_or(Preset::Desk));
    if let Some(f) = file {
        r.apply(&config::read_pairs(f)?)?;
    }
    r.apply(flags)?;
    r.model.validate()?;
    Ok(Some(r.model))
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    require_dir(&a.data, "dataset")?;
    let ck = match (&a.checkpoint, a.source) {
        (Some(p), _) => {
            require_file(p, "checkpoint")?;
            Some(checkpoint::load(p)?)
        }
        (None, Source::Model) => return Err(CliError::Usage("--source model needs --checkpoint".into())),
        (None, _) => None,
    };
    let flags = a.model.pairs();
    if let (Some(ck), Some(want)) = (&ck, requested_model(a.preset, a.config.as_deref(), &flags)?) {
        check_same_model(&ck.model_config()?, &want)?;
    }
    let dtype = parse_dtype(a.dtype.as_deref())?;
    let mut pairs = vec![
        ("source".to_string(), format!("{:?}", a.source).to_lowercase()),
        ("dtype".to_string(), dtype.name().to_string()),
    ];
    if let Some(ck) = &ck {
        pairs.extend(ck.model_config()?.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
    }
    let mut manifest = RunManifest::new("eval", &a.out, 0, pairs)
        .artifact("data", &a.data)
        .artifact("scenes", a.out.join("scenes.tsv"))
        .artifact("report", a.out.join("report.tsv"));
    if let Some(p) = &a.checkpoint {
        manifest = manifest.artifact("checkpoint", p);
    }
    manifest.write()?;
    match dtype {
        DType::F32 => eval_as::<f32>(a, ck.as_ref())?,
        DType::F64 => eval_as::<f64>(a, ck.as_ref())?,
    }
    manifest.finish()
}

fn eval_as<T: Element>(a: &EvalArgs, ck: Option<&Checkpoint>) -> Result<(), CliError> {
    let scenes: Vec<SceneTriplet<T>> = data::load_dataset(&a.data)?;
    let model: Option<GlfcrModel<T>> = match (a.source, ck) {
        (Source::Model, Some(ck)) => Some(ck.model()?),
        _ => None,
    };
    if let Some(m) = &model {
        check_scenes(&scenes, &m.config, &a.data)?;
    }
    let pred_dir = a.out.join("predictions");
    if a.dump_predictions {
        fs::create_dir_all(&pred_dir).map_err(|e| io_err(&pred_dir, e))?;
    }
    let rows = data::read_manifest(&a.data)?;
    let mut results: Vec<(SceneMetrics, f64)> = Vec::with_capacity(scenes.len());
    for (s, row) in scenes.iter().zip(&rows) {
        let pred = match (a.source, &model) {
            (Source::Model, Some(m)) => training::predict_scene(m, s)?,
            (Source::Cloudy, _) => s.s2_cloudy.clone(),
            _ => s.s2_cloudfree.clone(),
        };
        if a.dump_predictions {
            data::write_tensor(pred_dir.join(format!("scene_{:06}.gtns", row.scene)), &pred)?;
        }
        let m = metrics::evaluate(&pred, &s.s2_cloudfree, a.bands_subset.as_deref())?;
        results.push((m, s.coverage()));
    }
    let report = metrics::binned_report(&results)?;
    write_text(&a.out.join("scenes.tsv"), &report.scenes_tsv())?;
    write_text(&a.out.join("report.tsv"), &report.to_tsv())?;
    print!("{report}");
    Ok(())
}

/// Accept `[C, H, W]` or `[1, C, H, W]`.
fn as_image<T: Element>(t: Tensor<T>, what: &str) -> Result<Tensor<T>, CliError> {
    match *t.dims() {
        [_, _, _] => Ok(t),
        [1, c, h, w] => Ok(t.reshape(vec![c, h, w])?),
        _ => Err(CliError::Usage(format!(
            "{what} must be [C, H, W] or [1, C, H, W], got {:?}",
            t.dims()
        ))),
    }
}

fn load_image<T: Element>(path: &Path, what: &str) -> Result<Tensor<T>, CliError> {
    require_file(path, what)?;
    as_image(data::read_tensor(path)?.into_element(), what)
}

pub fn infer(a: &InferArgs) -> Result<(), CliError> {
    require_file(&a.checkpoint, "checkpoint")?;
    let ck = checkpoint::load(&a.checkpoint)?;
    let cfg = ck.model_config()?;
    if let Some(v) = &a.variant {
        let mut want = cfg.clone();
        want.set("variant", v)?;
        check_same_model(&cfg, &want)?;
    }
    if cfg.variant.uses_sar() && a.sar.is_none() {
        return Err(CliError::Usage(format!("variant {} needs --sar", cfg.variant)));
    }
    let dtype = parse_dtype(a.dtype.as_deref())?;
    let mut pairs: Vec<(String, String)> = cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    pairs.push(("dtype".into(), dtype.name().into()));
    let manifest = RunManifest::new("infer", &a.out, 0, pairs)
        .artifact("checkpoint", &a.checkpoint)
        .artifact("prediction", a.out.join("prediction.gtns"));
    manifest.write()?;
    match dtype {
        DType::F32 => infer_as::<f32>(a, &ck)?,
        DType::F64 => infer_as::<f64>(a, &ck)?,
    }
    manifest.finish()
}

fn padded(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

fn infer_as<T: Element>(a: &InferArgs, ck: &Checkpoint) -> Result<(), CliError> {
    let model: GlfcrModel<T> = ck.model()?;
    let cloudy: Tensor<T> = load_image(&a.cloudy, "cloudy input")?;
    let (c, h, w) = (cloudy.dims()[0], cloudy.dims()[1], cloudy.dims()[2]);
    let m = model.config.window;
    if h % m != 0 || w % m != 0 {
        return Err(CliError::Usage(format!(
            "input size {h}x{w} is not divisible by the window {m}; pad to {}x{}",
            padded(h, m),
            padded(w, m)
        )));
    }
    if c != model.config.bands {
        return Err(CliError::Usage(format!(
            "cloudy input has {c} bands, model expects {}",
            model.config.bands
        )));
    }
    let sar = match (&a.sar, model.config.variant.uses_sar()) {
        (Some(p), true) => Some(load_image::<T>(p, "SAR input")?),
        _ => None,
    };
    let batch = |t: &Tensor<T>| -> Result<Tensor<T>, CliError> {
        let mut d = vec![1];
        d.extend_from_slice(t.dims());
        Ok(t.reshape(d)?)
    };
    let sar_b = sar.as_ref().map(batch).transpose()?;
    let pred = model.predict(&batch(&cloudy)?, sar_b.as_ref())?.reshape(vec![c, h, w])?;
    let out = a.out.join("prediction.gtns");
    data::write_tensor(&out, &pred)?;
    println!("wrote {}", out.display());
    if let Some(t) = &a.truth {
        let truth: Tensor<T> = load_image(t, "truth")?;
        let m = metrics::evaluate(&pred, &truth, a.bands_subset.as_deref())?;
        let mut text = String::from("metric\tvalue\n");
        for (name, v) in SceneMetrics::NAMES.iter().zip(m.values()) {
            let _ = writeln!(text, "{name}\t{}", metrics::tsv_value(v));
            println!("{name:>5} {}", metrics::tsv_value(v));
        }
        write_text(&a.out.join("metrics.tsv"), &text)?;
    }
    Ok(())
}
