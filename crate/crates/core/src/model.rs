//! The four ablation variants assembled from backbone, decoders and heads.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneConfig, GridShape};
use crate::error::{Error, Result};
use crate::heads::{task_loss, total_loss, PredictionHead, TaskSpec, TaskTarget};
use crate::mmoe::{ExpertNet, GateObserver, MmoeConfig, MmoeLayer, TaskMemory};
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Per-layer, per-task decoders summed across layers.
    Baseline,
    /// Experts with token-local (1x1) gating, no memory.
    Moe,
    /// Experts with context-aware gating, no memory.
    MoeCg,
    /// Full model: context-aware gating plus the task feature memory.
    MoeCgMem,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Moe, Variant::MoeCg, Variant::MoeCgMem];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Moe => "moe",
            Variant::MoeCg => "moe_cg",
            Variant::MoeCgMem => "moe_cg_mem",
        }
    }

    pub fn is_gated(self) -> bool {
        self != Variant::Baseline
    }

    /// The module configuration this variant actually runs with.
    pub fn effective(self, cfg: &MmoeConfig) -> MmoeConfig {
        match self {
            Variant::Baseline => MmoeConfig {
                k_sel: None,
                memory: false,
                ..cfg.clone()
            },
            Variant::Moe => MmoeConfig {
                kernel: 1,
                memory: false,
                ..cfg.clone()
            },
            Variant::MoeCg => MmoeConfig {
                memory: false,
                ..cfg.clone()
            },
            Variant::MoeCgMem => MmoeConfig {
                memory: true,
                ..cfg.clone()
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneConfig,
    pub mmoe: MmoeConfig,
    pub tasks: Vec<TaskSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.variant.effective(&self.mmoe).validate(self.backbone.layers)?;
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if self.tasks[..i].iter().any(|u| u.name == t.name) {
                return Err(Error::Config(format!("task {} listed twice", t.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Decoders {
    /// `(layer, one decoder per task)`.
    Baseline(Vec<(usize, Vec<ExpertNet>)>),
    Mmoe(Vec<MmoeLayer>),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    decoders: Decoders,
    pub heads: Vec<PredictionHead>,
}

/// Per-task predictions of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub predictions: Vec<Var>,
    pub grid: GridShape,
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub per_task: Vec<Var>,
    pub predictions: Vec<Var>,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(store, rng, &config.backbone)?;
        let c = config.backbone.channels;
        let tasks = config.tasks.len();
        let mmoe = config.variant.effective(&config.mmoe);
        let layers = mmoe.placement.layers(config.backbone.layers)?;
        let decoders = match config.variant {
            Variant::Baseline => Decoders::Baseline(
                layers
                    .iter()
                    .map(|&l| {
                        let nets = (0..tasks)
                            .map(|t| ExpertNet::new(store, rng, &format!("decoder{l}.task{t}"), c))
                            .collect::<Result<_>>()?;
                        Ok((l, nets))
                    })
                    .collect::<Result<_>>()?,
            ),
            _ => Decoders::Mmoe(
                layers
                    .iter()
                    .enumerate()
                    .map(|(pos, &l)| MmoeLayer::new(store, rng, &mmoe, l, pos, tasks, c))
                    .collect::<Result<_>>()?,
            ),
        };
        let heads = config
            .tasks
            .iter()
            .map(|t| PredictionHead::new(store, rng, &t.name, c, t.outputs()))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            backbone,
            decoders,
            heads,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.config.tasks
    }

    pub fn mmoe_layers(&self) -> &[MmoeLayer] {
        match &self.decoders {
            Decoders::Mmoe(layers) => layers,
            Decoders::Baseline(_) => &[],
        }
    }

    /// Predictions `[B*N x outputs]` per task.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &Tensor,
        mode: Mode,
        mut observer: Option<&mut GateObserver<'_>>,
    ) -> Result<Forward> {
        let (outs, grid) = self.backbone.run(g, store, images)?;
        let tasks = self.config.tasks.len();
        let features: Vec<Option<Var>> = match &self.decoders {
            Decoders::Baseline(layers) => {
                let mut sums: Vec<Option<Var>> = vec![None; tasks];
                for (l, nets) in layers {
                    for (t, net) in nets.iter().enumerate() {
                        let f = net.forward(g, store, outs[l - 1], mode)?;
                        sums[t] = Some(match sums[t] {
                            Some(s) => g.add(s, f)?,
                            None => f,
                        });
                    }
                }
                sums
            }
            Decoders::Mmoe(layers) if self.config.variant == Variant::MoeCgMem => {
                let mut memory = TaskMemory::new(tasks);
                for layer in layers {
                    layer.forward(
                        g,
                        store,
                        outs[layer.layer - 1],
                        grid,
                        Some(&mut memory),
                        self.config.mmoe.k_sel,
                        mode,
                        observer.as_deref_mut(),
                    )?;
                }
                (0..tasks).map(|t| memory.get(t)).collect()
            }
            Decoders::Mmoe(layers) => {
                let mut sums: Vec<Option<Var>> = vec![None; tasks];
                for layer in layers {
                    let fs = layer.forward(
                        g,
                        store,
                        outs[layer.layer - 1],
                        grid,
                        None,
                        self.config.mmoe.k_sel,
                        mode,
                        observer.as_deref_mut(),
                    )?;
                    for (t, f) in fs.into_iter().enumerate() {
                        sums[t] = Some(match sums[t] {
                            Some(s) => g.add(s, f)?,
                            None => f,
                        });
                    }
                }
                sums
            }
        };
        let predictions = self
            .heads
            .iter()
            .zip(features)
            .map(|(head, f)| head.forward(g, store, f, grid, mode))
            .collect::<Result<_>>()?;
        Ok(Forward { predictions, grid })
    }

    /// Forward pass plus per-task and weighted total loss.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &Tensor,
        targets: &[TaskTarget],
        mode: Mode,
    ) -> Result<LossTerms> {
        if targets.len() != self.config.tasks.len() {
            return Err(Error::Contract(format!(
                "{} targets for {} tasks",
                targets.len(),
                self.config.tasks.len()
            )));
        }
        let fwd = self.forward(g, store, images, mode, None)?;
        let per_task = fwd
            .predictions
            .iter()
            .zip(targets)
            .zip(&self.config.tasks)
            .map(|((&p, t), spec)| task_loss(g, p, t, spec))
            .collect::<Result<Vec<_>>>()?;
        let total = total_loss(g, &per_task, &self.config.tasks)?;
        Ok(LossTerms {
            total,
            per_task,
            predictions: fwd.predictions,
        })
    }
}
