//! Checkpoint container.
//!
//! ```text
//! "GCKP"  u16 version=1
//! u32 header length, header as UTF-8 `key=value` lines
//! u32 entry count
//! per entry: u16 name length, UTF-8 name, one GTNS record
//! ```
//!
//! All integers are little-endian. The header holds the model config, the
//! parameter init seed, the train config and the progress counters. Entries
//! are `param/<name>` for every parameter and, when optimizer state is
//! saved, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::data::{self, AnyTensor};
use crate::error::{Error, Result};
use crate::network::{GlfcrModel, ModelConfig};
use crate::tensor::Element;
use crate::training::{Adam, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u16 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: IndexMap<String, String>,
    pub entries: IndexMap<String, AnyTensor>,
}

fn encode(header: &[(String, String)], entries: &[(String, Vec<u8>)]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, record) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(record);
    }
    Ok(out)
}

fn record<T: Element>(t: &crate::tensor::Tensor<T>) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    data::encode_tensor(t, &mut b)?;
    Ok(b)
}

/// Model parameters only (no optimizer state).
pub fn save_model<T: Element>(path: &Path, model: &GlfcrModel<T>) -> Result<()> {
    let mut header = model_header(model);
    header.push(("dtype".into(), T::DTYPE.name().into()));
    let entries = model
        .params
        .iter()
        .map(|(n, p)| Ok((format!("param/{n}"), record(&p.value)?)))
        .collect::<Result<Vec<_>>>()?;
    data::write_atomic(path, &encode(&header, &entries)?)
}

fn model_header<T: Element>(model: &GlfcrModel<T>) -> Vec<(String, String)> {
    let mut h: Vec<(String, String)> = model.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    h.push(("init_seed".into(), model.params.seed().to_string()));
    h
}

/// Model, optimizer state, train config and progress counters.
pub fn save<T: Element>(path: &Path, trainer: &Trainer<T>) -> Result<()> {
    let mut header = model_header(&trainer.model);
    header.push(("dtype".into(), T::DTYPE.name().into()));
    header.extend(trainer.cfg.to_pairs().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
    header.push(("epoch".into(), trainer.epoch.to_string()));
    header.push(("step".into(), trainer.step.to_string()));
    header.push(("adam.step".into(), trainer.adam.step.to_string()));
    let mut entries = Vec::new();
    for (i, (n, p)) in trainer.model.params.iter().enumerate() {
        entries.push((format!("param/{n}"), record(&p.value)?));
        entries.push((format!("adam.m/{n}"), record(&trainer.adam.m[i])?));
        entries.push((format!("adam.v/{n}"), record(&trainer.adam.v[i])?));
    }
    data::write_atomic(path, &encode(&header, &entries)?)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: format!("truncated {what}"),
        });
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad checkpoint magic".into(),
        });
    }
    let version = u16::from_le_bytes(take(bytes, &mut pos, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            reason: format!("unsupported checkpoint version {version}"),
        });
    }
    let hlen = u32::from_le_bytes(take(bytes, &mut pos, 4, "header length")?.try_into().expect("4 bytes")) as usize;
    let at = pos;
    let text = std::str::from_utf8(take(bytes, &mut pos, hlen, "header")?).map_err(|e| Error::Format {
        offset: at as u64,
        reason: format!("header is not UTF-8: {e}"),
    })?;
    let mut header = IndexMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: at as u64,
            reason: format!("header line without '=': {line:?}"),
        })?;
        header.insert(k.to_string(), v.to_string());
    }
    let count = u32::from_le_bytes(take(bytes, &mut pos, 4, "entry count")?.try_into().expect("4 bytes"));
    let mut entries = IndexMap::new();
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(bytes, &mut pos, 2, "name length")?.try_into().expect("2 bytes")) as usize;
        let at = pos;
        let name = std::str::from_utf8(take(bytes, &mut pos, nlen, "entry name")?)
            .map_err(|e| Error::Format {
                offset: at as u64,
                reason: format!("entry name is not UTF-8: {e}"),
            })?
            .to_string();
        let (t, used) = data::decode_tensor(&bytes[pos..], pos as u64)?;
        pos += used;
        entries.insert(name, t);
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            offset: pos as u64,
            reason: format!("{} trailing bytes", bytes.len() - pos),
        });
    }
    Ok(Checkpoint { header, entries })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl Checkpoint {
    fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("checkpoint header lacks {key}")))
    }

    fn parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("checkpoint header {key}: cannot parse {v:?}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::desk();
        for (k, _) in ModelConfig::desk().to_pairs() {
            cfg.set(k, self.get(k)?)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk();
        for (k, _) in TrainConfig::desk().to_pairs() {
            cfg.set(k, self.get(&format!("train.{k}"))?)?;
        }
        Ok(cfg)
    }

    pub fn epoch(&self) -> Result<usize> {
        self.parse("epoch")
    }

    pub fn step(&self) -> Result<u64> {
        self.parse("step")
    }

    /// Rebuild the model and copy every stored parameter into it.
    pub fn model<T: Element>(&self) -> Result<GlfcrModel<T>> {
        let mut model = GlfcrModel::new(self.model_config()?, self.parse("init_seed")?)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for n in &names {
            let t = self
                .entries
                .get(&format!("param/{n}"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {n}")))?;
            model.params.set(n, t.clone().into_element())?;
        }
        let stored = self.entries.keys().filter(|k| k.starts_with("param/")).count();
        if stored != names.len() {
            return Err(Error::Config(format!(
                "checkpoint has {stored} parameters, model expects {}",
                names.len()
            )));
        }
        Ok(model)
    }

    /// Restore a trainer; `cfg` overrides the stored train config when given.
    pub fn trainer<T: Element>(&self, cfg: Option<TrainConfig>) -> Result<Trainer<T>> {
        let model = self.model::<T>()?;
        let cfg = match cfg {
            Some(c) => c,
            None => self.train_config()?,
        };
        let mut trainer = Trainer::new(model, cfg)?;
        let mut adam = Adam::new(&trainer.model.params);
        for (i, (n, _)) in trainer.model.params.iter().enumerate() {
            for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let t = self
                    .entries
                    .get(&format!("adam.{kind}/{n}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for {n}")))?;
                if t.dims() != dst.dims() {
                    return Err(Error::shape("adam state", t.dims(), dst.dims()));
                }
                *dst = t.clone().into_element();
            }
        }
        adam.step = self.parse("adam.step")?;
        trainer.adam = adam;
        trainer.epoch = self.epoch()?;
        trainer.step = self.step()?;
        Ok(trainer)
    }
}
