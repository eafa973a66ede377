//! Binary checkpoint: config echo, parameters, optimizer moments, position.
//!
//! Layout (little-endian): magic `MMOECKPT`, version u32, config text,
//! iteration u64, data-order seed u64, entry count u64, then per entry
//! `{ name, kind u8, tensor }`, then the optimizer step u64, its four
//! hyperparameters as f64, and one `{ m, v }` tensor pair per entry.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamKind, ParamStore, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::rng;

const MAGIC: &[u8; 8] = b"MMOECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Number of completed iterations.
    pub iteration: usize,
    /// Root of the per-epoch shuffles; the batch at any iteration is a pure
    /// function of this seed and the iteration.
    pub data_seed: u64,
    pub params: Vec<(String, ParamKind, Tensor)>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, iteration: usize, data_seed: u64, store: &ParamStore, optimizer: &Adam) -> Self {
        Self {
            config_text: cfg.to_text(),
            iteration,
            data_seed,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.kind(id), store.get(id).clone()))
                .collect(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::parse_text(&self.config_text)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(Vec::new());
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.str(&self.config_text)?;
        w.len(self.iteration)?;
        w.u64(self.data_seed)?;
        w.len(self.params.len())?;
        for (name, kind, t) in &self.params {
            w.str(name)?;
            w.u8(match kind {
                ParamKind::Trainable => 0,
                ParamKind::Buffer => 1,
            })?;
            w.tensor(t)?;
        }
        let opt = &self.optimizer;
        w.u64(opt.step)?;
        for v in [opt.config.beta1, opt.config.beta2, opt.config.eps, opt.config.weight_decay] {
            w.f64(v)?;
        }
        if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        for (m, v) in opt.m.iter().zip(&opt.v) {
            w.tensor(m)?;
            w.tensor(v)?;
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(Cursor::new(bytes), path);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let config_text = r.str()?;
        let iteration = r.len()?;
        let data_seed = r.u64()?;
        let n = r.len()?;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.str()?;
            let kind = match r.u8()? {
                0 => ParamKind::Trainable,
                1 => ParamKind::Buffer,
                k => return Err(r.err(format!("unknown parameter kind {k}"))),
            };
            params.push((name, kind, r.tensor()?));
        }
        let step = r.u64()?;
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let mut m = Vec::with_capacity(n.min(1 << 16));
        let mut v = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            m.push(r.tensor()?);
            v.push(r.tensor()?);
        }
        r.finish()?;
        Ok(Self {
            config_text,
            iteration,
            data_seed,
            params,
            optimizer: Adam { config, step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// Copies the stored values into a store built from the same config.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} entries, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (id, (name, kind, value)) in store.ids().collect::<Vec<_>>().into_iter().zip(&self.params) {
            if store.name(id) != name || store.kind(id) != *kind {
                return Err(Error::Contract(format!(
                    "checkpoint entry {name} does not match model entry {}",
                    store.name(id)
                )));
            }
            store.set(id, value.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the config echo with the stored values.
    pub fn restore(&self) -> Result<(RunConfig, Model, ParamStore)> {
        let cfg = self.config()?;
        let (model, mut store) = build_model(&cfg)?;
        self.restore_into(&mut store)?;
        Ok((cfg, model, store))
    }
}

/// Freshly initialized model for a run config.
pub fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = rng::rng(rng::derive_str(cfg.seed, "init"));
    let model = Model::new(&mut store, &mut init, &cfg.model())?;
    Ok((model, store))
}
