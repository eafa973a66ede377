use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::{build_model, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Mode, ParamStore};
use crate::optim::{poly_lr, Adam};
use crate::rng;
use crate::synthdata::{Batch, BatchOrder, Dataset, SceneSample, Split};

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    pub task_losses: Vec<(String, f64)>,
    pub total: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "iter {} lr {:.6e} total {:.6}", self.iteration, self.lr, self.total)?;
        for (name, l) in &self.task_losses {
            write!(f, " {name} {l:.6}")?;
        }
        Ok(())
    }
}

/// In-memory training state.
pub struct Trainer {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub model: Model,
    pub store: ParamStore,
    pub optimizer: Adam,
    /// Completed iterations.
    pub iteration: usize,
    data_seed: u64,
    epoch_cache: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let dataset = Dataset::generate(&config.dataset())?;
        Self::with_dataset(config, dataset)
    }

    pub fn with_dataset(config: &RunConfig, dataset: Dataset) -> Result<Self> {
        if dataset.config != config.dataset() {
            return Err(Error::Contract("dataset was generated from a different config".into()));
        }
        let (model, store) = build_model(config)?;
        let optimizer = Adam::new(config.train.adam, &store);
        Ok(Self {
            config: config.clone(),
            dataset,
            model,
            store,
            optimizer,
            iteration: 0,
            data_seed: rng::derive_str(config.seed, "data-order"),
            epoch_cache: None,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: Option<Dataset>) -> Result<Self> {
        let config = ckpt.config()?;
        let dataset = match dataset {
            Some(d) => d,
            None => Dataset::generate(&config.dataset())?,
        };
        let mut t = Self::with_dataset(&config, dataset)?;
        ckpt.restore_into(&mut t.store)?;
        if ckpt.optimizer.m.len() != t.store.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        t.optimizer = ckpt.optimizer.clone();
        t.iteration = ckpt.iteration;
        t.data_seed = ckpt.data_seed;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.iteration, self.data_seed, &self.store, &self.optimizer)
    }

    /// Sample indices used at `iteration`.
    pub fn batch_indices(&mut self, iteration: usize) -> Result<Vec<usize>> {
        let n = self.dataset.train.len();
        let bs = self.config.train.batch_size;
        let per_epoch = BatchOrder::batches_per_epoch(n, bs);
        let epoch = iteration / per_epoch;
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let order = self.dataset.batches(Split::Train, bs, rng::derive(self.data_seed, epoch as u64))?;
            self.epoch_cache = Some((epoch, order.collect()));
        }
        let (_, batches) = self.epoch_cache.as_ref().expect("filled above");
        Ok(batches[iteration % per_epoch].clone())
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepLog> {
        let i = self.iteration;
        let idx = self.batch_indices(i)?;
        let samples: Vec<&SceneSample> = idx.iter().map(|&k| &self.dataset.train[k]).collect();
        let batch = Batch::new(&samples, &self.config.tasks)?;
        let mut g = Graph::new();
        let terms = self
            .model
            .loss(&mut g, &self.store, &batch.images, &batch.targets, Mode::Train)?;
        let total = g.value(terms.total).item()?;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {total} at iteration {i}; batch sample seeds {:?}",
                batch.seeds
            )));
        }
        let task_losses = terms
            .per_task
            .iter()
            .zip(self.model.tasks())
            .map(|(&l, spec)| Ok((spec.name.clone(), g.value(l).item()?)))
            .collect::<Result<_>>()?;
        let grads = g.backward(terms.total, &self.store)?;
        for update in g.take_stat_updates() {
            update.apply(&mut self.store);
        }
        let lr = poly_lr(self.config.train.lr, i, self.config.train.iterations, self.config.train.power);
        self.optimizer.update(&mut self.store, &grads, lr)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: i,
            lr,
            task_losses,
            total,
        })
    }

    /// Steps until `end` completed iterations (capped at the configured total).
    pub fn run_until(&mut self, end: usize, mut on_step: impl FnMut(&Self, &StepLog) -> Result<()>) -> Result<()> {
        let end = end.min(self.config.train.iterations);
        while self.iteration < end {
            let log = self.step()?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `<out>/checkpoint.bin` when present.
    pub resume: bool,
    /// Stop (with a checkpoint) after this many completed iterations.
    pub stop_at: Option<usize>,
    /// Also echo log lines to stderr.
    pub verbose: bool,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint_path: PathBuf,
}

pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("checkpoint.bin")
}

/// Trains into `config.out`: `config.txt`, `train.log`, `checkpoint.bin`.
pub fn train(config: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.out)?;
    let ckpt_path = checkpoint_path(&config.out);
    let mut trainer = if opts.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.config_text != config.to_text() {
            return Err(Error::Config(format!(
                "{} was written with a different config",
                ckpt_path.display()
            )));
        }
        Trainer::from_checkpoint(&ckpt, None)?
    } else {
        Trainer::new(config)?
    };
    fs::write(config.out.join("config.txt"), config.to_text())?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(trainer.iteration > 0)
        .write(true)
        .truncate(trainer.iteration == 0)
        .open(config.out.join("train.log"))?;
    let end = opts.stop_at.unwrap_or(config.train.iterations);
    let every = config.train.checkpoint_every;
    let result = trainer.run_until(end, |t, step| {
        writeln!(log, "{step}")?;
        if opts.verbose {
            eprintln!("{step}");
        }
        if every > 0 && t.iteration % every == 0 && t.iteration < end {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    if let Err(Error::Numeric(msg)) = &result {
        fs::write(config.out.join("numeric_failure.txt"), format!("{msg}\n"))?;
    }
    result?;
    trainer.checkpoint().save(&ckpt_path)?;
    Ok(TrainOutcome {
        trainer,
        checkpoint_path: ckpt_path,
    })
}
