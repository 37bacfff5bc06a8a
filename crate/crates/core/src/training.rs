//! L1-supervised training with Adam and step-decayed learning rate.
//!
//! Every random choice (sample order, crop offsets) is a pure function of
//! `(seed, epoch, position)`, so a run resumed from an epoch checkpoint
//! replays the uninterrupted run exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{self, Graph, Var};
use crate::checkpoint;
use crate::data::{self, SceneTriplet};
use crate::error::{Error, Result};
use crate::metrics;
use crate::network::GlfcrModel;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
    pub strict: bool,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    /// Samples drawn per epoch; the dataset size when `None`.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Published recipe: batch 12, 128 px crops, 30 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            lr0: 1e-4,
            decay: 0.5,
            decay_every: 5,
            epochs: 30,
            batch: 12,
            crop: 128,
            seed: 0,
            strict: true,
            clip: None,
            samples_per_epoch: None,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            epochs: 5,
            batch: 4,
            crop: 64,
            ..Self::paper()
        }
    }

    pub fn validate(&self, window: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_every == 0 {
            return fail("decay must lie in (0, 1] with a positive period".into());
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if self.crop == 0 || !self.crop.is_multiple_of(window) {
            return fail(format!("crop {} must be a positive multiple of the window {window}", self.crop));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip must be positive, got {c}"));
            }
        }
        if self.samples_per_epoch == Some(0) {
            return fail("samples_per_epoch must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        vec![
            ("lr0", format!("{:e}", self.lr0)),
            ("decay", self.decay.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("crop", self.crop.to_string()),
            ("seed", self.seed.to_string()),
            ("strict", self.strict.to_string()),
            ("clip", opt(self.clip.map(|c| c.to_string()))),
            ("samples_per_epoch", opt(self.samples_per_epoch.map(|c| c.to_string()))),
        ]
    }

    /// Apply one `key = value` setting; returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn opt<V: std::str::FromStr>(key: &str, v: &str) -> Result<Option<V>> {
            if v == "none" {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        }
        match key {
            "lr0" => self.lr0 = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "strict" => self.strict = parse(key, value)?,
            "clip" => self.clip = opt(key, value)?,
            "samples_per_epoch" => self.samples_per_epoch = opt(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// `lr0 * decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Mean absolute error as a graph scalar. The subgradient at a tie is zero.
pub fn l1_loss<T: Element>(g: &Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (a, b) = (g.dims(pred), g.dims(target));
    if a != b {
        return Err(Error::shape("l1_loss", &a, &b));
    }
    let d = g.sub(pred, target)?;
    Ok(g.mean(g.abs(d)))
}

/// Adam moments for every entry of a [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.dims().to_vec())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((name, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.dims() != p.value.dims() || v.dims() != p.value.dims() || p.grad.dims() != p.value.dims() {
                return Err(Error::Contract(format!("optimizer state for {name} does not match its parameter")));
            }
        }
        Ok(())
    }

    /// One bias-corrected update in store order, then zero the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.check(store)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (c1, c2) = (T::ONE - b1, T::ONE - b2);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        for ((_, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + c1 * g;
                v[i] = b2 * v[i] + c2 * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.to_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for (_, p) in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const TRACE_HEADER: &str = "step\tepoch\tlr\tloss";

impl TraceRow {
    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{:e}\t{:e}", self.step, self.epoch, self.lr, self.loss)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Format {
            offset: 0,
            reason: format!("bad trace row {line:?}"),
        };
        if f.len() != 4 {
            return Err(bad());
        }
        Ok(TraceRow {
            step: f[0].parse().map_err(|_| bad())?,
            epoch: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            loss: f[3].parse().map_err(|_| bad())?,
        })
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(TraceRow::parse).collect()
}

const ORDER_STREAM: u64 = 1 << 40;
const CROP_STREAM: u64 = 2 << 40;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c66_6372_7472_6e00);
    rng.set_stream(stream);
    rng
}

/// Sample order for one epoch: shuffled passes over the dataset, cut to
/// `samples` entries.
pub fn epoch_order(seed: u64, epoch: usize, len: usize, samples: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, ORDER_STREAM + epoch as u64);
    let mut order = Vec::with_capacity(samples + len);
    while order.len() < samples {
        let mut pass: Vec<usize> = (0..len).collect();
        pass.shuffle(&mut rng);
        order.extend(pass);
    }
    order.truncate(samples);
    order
}

/// Model, optimizer and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer<T: Element> {
    pub model: GlfcrModel<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: GlfcrModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate(model.config.window)?;
        let adam = Adam::new(&model.params);
        Ok(Trainer {
            model,
            adam,
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    /// Forward, L1, backward and accumulate gradients for one batch.
    /// Returns the loss; parameters are not updated.
    pub fn loss_and_grad(&mut self, batch: &data::Batch<T>) -> Result<f64> {
        let g = Graph::new();
        let p = self.model.params.bind(&g);
        let cloudy = g.constant(batch.cloudy.clone());
        let sar = self.model.config.variant.uses_sar().then(|| g.constant(batch.sar.clone()));
        let out = self.model.forward(&g, &p, cloudy, sar)?;
        let target = g.constant(batch.cloudfree.clone());
        let loss = l1_loss(&g, out, target)?;
        let value = g.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                epoch: self.epoch,
                loss: value,
            });
        }
        let grads = g.backward(loss)?;
        self.model.params.accumulate(&p, &grads);
        Ok(value)
    }

    /// One optimizer step on `batch` at the current epoch's learning rate.
    pub fn train_step(&mut self, batch: &data::Batch<T>) -> Result<TraceRow> {
        let lr = lr_at(self.epoch, &self.cfg);
        let loss = match self.loss_and_grad(batch) {
            Ok(l) => l,
            Err(e) => {
                self.model.params.zero_grads();
                return Err(e);
            }
        };
        if let Some(c) = self.cfg.clip {
            clip_grad_norm(&mut self.model.params, c);
        }
        self.adam.step(&mut self.model.params, lr)?;
        let row = TraceRow {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss,
        };
        self.step += 1;
        Ok(row)
    }

    /// Run the next epoch over `scenes`, calling `on_step` after every step.
    pub fn run_epoch(&mut self, scenes: &[SceneTriplet<T>], mut on_step: impl FnMut(&TraceRow) -> Result<()>) -> Result<()> {
        if scenes.is_empty() {
            return Err(Error::Contract("training on an empty dataset".into()));
        }
        let samples = self.cfg.samples_per_epoch.unwrap_or(scenes.len());
        let order = epoch_order(self.cfg.seed, self.epoch, scenes.len(), samples);
        let window = self.model.config.window;
        for (chunk_index, chunk) in order.chunks(self.cfg.batch).enumerate() {
            let crops = chunk
                .iter()
                .enumerate()
                .map(|(j, &i)| {
                    let pos = (chunk_index * self.cfg.batch + j) as u64;
                    let mut rng = rng_for(self.cfg.seed, CROP_STREAM + ((self.epoch as u64) << 24) + pos);
                    data::crop_sample(&scenes[i], self.cfg.crop, window, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = data::batch(&crops)?;
            let row = self.train_step(&batch)?;
            on_step(&row)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

/// Mean L1 between clamped predictions and cloud-free references.
pub fn validation_l1<T: Element>(model: &GlfcrModel<T>, scenes: &[SceneTriplet<T>]) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Contract("validation on an empty dataset".into()));
    }
    let mut total = 0.0;
    for s in scenes {
        let pred = predict_scene(model, s)?;
        total += metrics::mae(&pred, &s.s2_cloudfree)?;
    }
    Ok(total / scenes.len() as f64)
}

/// Clamped prediction for one `[bands, H, W]` scene.
pub fn predict_scene<T: Element>(model: &GlfcrModel<T>, s: &SceneTriplet<T>) -> Result<Tensor<T>> {
    let one = |t: &Tensor<T>| {
        let mut d = vec![1];
        d.extend_from_slice(t.dims());
        t.reshape(d)
    };
    let sar = if model.config.variant.uses_sar() { Some(one(&s.s1)?) } else { None };
    let out = model.predict(&one(&s.s2_cloudy)?, sar.as_ref())?;
    out.reshape(s.s2_cloudfree.dims().to_vec())
}

/// Artifact locations of a training run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }

    pub fn trace(&self) -> PathBuf {
        self.dir.join("trace.tsv")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.gckp"))
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.gckp")
    }
}

/// Train until `cfg.epochs` epochs are complete.
///
/// With `out`, each step is appended to `trace.tsv` and a checkpoint is
/// written after every epoch (`epoch_NNN.gckp` and `last.gckp`). When the
/// trainer was restored from a checkpoint, trace rows past its step are
/// dropped first. Returns the rows produced by this call.
pub fn fit<T: Element>(trainer: &mut Trainer<T>, scenes: &[SceneTriplet<T>], out: Option<&RunPaths>) -> Result<Vec<TraceRow>> {
    autograd::set_strict(trainer.cfg.strict);
    let mut trace_file = match out {
        Some(paths) => Some(open_trace(paths, trainer.step)?),
        None => None,
    };
    let mut rows = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        trainer.run_epoch(scenes, |row| {
            rows.push(*row);
            if let (Some(f), Some(paths)) = (trace_file.as_mut(), out) {
                writeln!(f, "{}", row.to_tsv()).map_err(|e| Error::io(paths.trace(), e))?;
            }
            Ok(())
        })?;
        if let Some(paths) = out {
            if let Some(f) = trace_file.as_mut() {
                f.flush().map_err(|e| Error::io(paths.trace(), e))?;
            }
            checkpoint::save(&paths.checkpoint(trainer.epoch), trainer)?;
            checkpoint::save(&paths.last(), trainer)?;
        }
    }
    Ok(rows)
}

fn open_trace(paths: &RunPaths, keep_below: u64) -> Result<fs::File> {
    let path = paths.trace();
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let kept: Vec<TraceRow> = if keep_below > 0 && path.exists() {
        read_trace(&path)?.into_iter().filter(|r| r.step < keep_below).collect()
    } else {
        Vec::new()
    };
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = format!("{TRACE_HEADER}\n");
    for r in &kept {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(f)
}
