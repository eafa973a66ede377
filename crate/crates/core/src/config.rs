//! Run configuration: a flat `key = value` text format with dotted section
//! prefixes. Every key can also be set individually (the CLI maps
//! `--section.key value` onto [`RunConfig::set`]).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::heads::{SceneTask, TaskSpec, WeightPreset};
use crate::mmoe::{MmoeConfig, Placement};
use crate::model::{ModelConfig, Variant};
use crate::optim::AdamConfig;
use crate::synthdata::DatasetConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub power: f64,
    pub adam: AdamConfig,
    /// Checkpoint interval in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 8,
            lr: 1e-3,
            power: 0.9,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Optimization settings of the original large-scale recipe.
    pub fn large_scale_schedule() -> Self {
        Self {
            iterations: 40_000,
            batch_size: 4,
            lr: 2e-5,
            power: 0.9,
            adam: AdamConfig {
                weight_decay: 1e-6,
                ..AdamConfig::default()
            },
            checkpoint_every: 5000,
        }
    }
}

/// Gating knobs as written by the user; `None` means "variant default".
#[derive(Clone, Debug, PartialEq)]
pub struct GatingSettings {
    pub experts: usize,
    pub k_sel: Option<usize>,
    pub kernel: Option<usize>,
    pub gate_hidden: Option<usize>,
    pub placement: Placement,
}

impl Default for GatingSettings {
    fn default() -> Self {
        Self {
            experts: 4,
            k_sel: None,
            kernel: None,
            gate_hidden: None,
            placement: Placement::Every,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub out: PathBuf,
    pub backbone: BackboneConfig,
    pub gating: GatingSettings,
    pub data: DatasetConfig,
    pub tasks: Vec<SceneTask>,
    pub weights: WeightPreset,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MoeCgMem,
            seed: 0,
            out: PathBuf::from("runs/default"),
            backbone: BackboneConfig::default(),
            gating: GatingSettings::default(),
            data: DatasetConfig::default(),
            tasks: SceneTask::ALL.to_vec(),
            weights: WeightPreset::Uniform,
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn optional(key: &str, value: &str, none: &str) -> Result<Option<usize>> {
    if value.trim() == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "run.variant" => self.variant = v.parse()?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.iters" => self.train.iterations = parse(key, v)?,
            "run.batch" => self.train.batch_size = parse(key, v)?,
            "run.lr" => self.train.lr = parse(key, v)?,
            "run.power" => self.train.power = parse(key, v)?,
            "run.weight_decay" => self.train.adam.weight_decay = parse(key, v)?,
            "run.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "run.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "run.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "backbone.image_size" => self.backbone.image_size = parse(key, v)?,
            "backbone.patch_size" => self.backbone.patch_size = parse(key, v)?,
            "backbone.channels" => self.backbone.channels = parse(key, v)?,
            "backbone.layers" => self.backbone.layers = parse(key, v)?,
            "backbone.heads" => self.backbone.heads = parse(key, v)?,
            "backbone.mlp_ratio" => self.backbone.mlp_ratio = parse(key, v)?,
            "mmoe.experts" => self.gating.experts = parse(key, v)?,
            "mmoe.ksel" => self.gating.k_sel = optional(key, v, "dense")?,
            "mmoe.kernel" => self.gating.kernel = optional(key, v, "auto")?,
            "mmoe.gate_hidden" => self.gating.gate_hidden = optional(key, v, "auto")?,
            "mmoe.placement" => self.gating.placement = v.parse()?,
            "data.train" => self.data.train = parse(key, v)?,
            "data.val" => self.data.val = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.min_shapes" => self.data.min_shapes = parse(key, v)?,
            "data.max_shapes" => self.data.max_shapes = parse(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "tasks.list" => {
                self.tasks = v.split(',').map(str::parse).collect::<Result<_>>()?;
            }
            "tasks.weights" => self.weights = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>, none: &str| v.map_or(none.to_string(), |k| k.to_string());
        let tasks: Vec<&str> = self.tasks.iter().map(|t| t.name()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("run.variant", self.variant.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.out", self.out.display().to_string()),
            ("run.iters", self.train.iterations.to_string()),
            ("run.batch", self.train.batch_size.to_string()),
            ("run.lr", self.train.lr.to_string()),
            ("run.power", self.train.power.to_string()),
            ("run.weight_decay", self.train.adam.weight_decay.to_string()),
            ("run.beta1", self.train.adam.beta1.to_string()),
            ("run.beta2", self.train.adam.beta2.to_string()),
            ("run.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("backbone.image_size", self.backbone.image_size.to_string()),
            ("backbone.patch_size", self.backbone.patch_size.to_string()),
            ("backbone.channels", self.backbone.channels.to_string()),
            ("backbone.layers", self.backbone.layers.to_string()),
            ("backbone.heads", self.backbone.heads.to_string()),
            ("backbone.mlp_ratio", self.backbone.mlp_ratio.to_string()),
            ("mmoe.experts", self.gating.experts.to_string()),
            ("mmoe.ksel", opt(self.gating.k_sel, "dense")),
            ("mmoe.kernel", opt(self.gating.kernel, "auto")),
            ("mmoe.gate_hidden", opt(self.gating.gate_hidden, "auto")),
            ("mmoe.placement", self.gating.placement.to_string()),
            ("data.train", self.data.train.to_string()),
            ("data.val", self.data.val.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.min_shapes", self.data.min_shapes.to_string()),
            ("data.max_shapes", self.data.max_shapes.to_string()),
            ("data.seed", self.data.seed.to_string()),
            ("tasks.list", tasks.join(",")),
            ("tasks.weights", self.weights.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::Baseline if self.gating.k_sel.is_some() || self.gating.kernel.is_some() => {
                return Err(Error::Config(
                    "the baseline variant has no gating; mmoe.ksel and mmoe.kernel must stay unset".into(),
                ))
            }
            Variant::Moe if self.gating.kernel.is_some_and(|k| k != 1) => {
                return Err(Error::Config("the moe variant gates token-locally; mmoe.kernel must be 1".into()))
            }
            _ => {}
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("run.batch must be at least 1".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("run.lr must be positive".into()));
        }
        self.dataset().validate()?;
        self.model().validate()
    }

    /// Dataset settings with image geometry taken from the backbone.
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            image_size: self.backbone.image_size,
            patch_size: self.backbone.patch_size,
            ..self.data.clone()
        }
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec(self.data.classes, self.weights)).collect()
    }

    pub fn model(&self) -> ModelConfig {
        let kernel = self.gating.kernel.unwrap_or(match self.variant {
            Variant::Moe => 1,
            _ => 3,
        });
        ModelConfig {
            variant: self.variant,
            backbone: self.backbone.clone(),
            mmoe: MmoeConfig {
                experts: self.gating.experts,
                k_sel: self.gating.k_sel,
                kernel,
                gate_hidden: self.gating.gate_hidden,
                placement: self.gating.placement,
                memory: self.variant == Variant::MoeCgMem,
            },
            tasks: self.task_specs(),
        }
    }

    pub fn use_large_scale_schedule(&mut self) {
        self.train = TrainConfig {
            checkpoint_every: self.train.checkpoint_every,
            ..TrainConfig::large_scale_schedule()
        };
    }
}
