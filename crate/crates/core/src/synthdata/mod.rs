//! Deterministic synthetic multi-task scenes: semantic labels, depth, surface
//! normals and saliency all derived from one procedural scene.

mod export;
mod scene;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

pub use export::{export_split, import_split};
pub use scene::ShapeKind;

use crate::error::{Error, Result};
use crate::heads::{SceneTask, TaskTarget};
use crate::numerics::Tensor;
use crate::rng;
use scene::{scene_rng, token_center, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Including background (class 0).
    pub classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: 2048,
            val: 512,
            image_size: 32,
            patch_size: 4,
            classes: 4,
            min_shapes: 1,
            max_shapes: 4,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let max = ShapeKind::ALL.len() + 1;
        if !(2..=max).contains(&self.classes) {
            return Err(Error::Config(format!(
                "classes must lie in 2..={max} (background plus shape types), got {}",
                self.classes
            )));
        }
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "shape count range {}..={} is empty or allows empty scenes",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.train == 0 || self.val == 0 {
            return Err(Error::Config("both splits need at least one sample".into()));
        }
        Ok(())
    }

    /// Side of the token grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
        }
    }

    /// Seed of sample `index` in `split`.
    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        rng::derive(rng::derive_str(self.seed, split.name()), index as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One scene with token-resolution supervision for every task.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    /// `[3 x H x W]` in `[0, 1]`.
    pub image: Tensor,
    pub grid: usize,
    pub semseg: Vec<usize>,
    /// `[N x 1]`, in `(0, 1]`.
    pub depth: Tensor,
    /// `[N x 3]`, unit length.
    pub normals: Tensor,
    pub saliency: Vec<bool>,
    /// Visible surface per token: 0 background, `i` for the `i`-th shape
    /// in painter's order.
    pub instances: Vec<u8>,
}

impl SceneSample {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

pub fn generate_sample(seed: u64, cfg: &DatasetConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let (mut scene_rng, mut noise_rng) = scene_rng(seed);
    let scene = Scene::random(&mut scene_rng, cfg);
    let grid = cfg.grid();
    let n = grid * grid;
    let closest = scene.shapes.len();
    let mut semseg = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(3 * n);
    let mut saliency = Vec::with_capacity(n);
    let mut instances = Vec::with_capacity(n);
    for row in 0..grid {
        for col in 0..grid {
            let (x, y) = token_center(row, col, grid);
            let s = scene.surface(x, y);
            semseg.push(s.class);
            depth.push(s.z);
            normals.extend_from_slice(&s.normal());
            saliency.push(s.instance == closest);
            instances.push(s.instance as u8);
        }
    }
    Ok(SceneSample {
        seed,
        image: scene.render(cfg.image_size, &mut noise_rng),
        grid,
        semseg,
        depth: Tensor::new([n, 1], depth)?,
        normals: Tensor::new([n, 3], normals)?,
        saliency,
        instances,
    })
}

/// Both splits, generated in parallel; content depends only on the config.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        config.validate()?;
        let gen = |split: Split| -> Result<Vec<SceneSample>> {
            (0..config.split_len(split))
                .into_par_iter()
                .map(|i| generate_sample(config.sample_seed(split, i), config))
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            train: gen(Split::Train)?,
            val: gen(Split::Val)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SceneSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Shuffled index batches over one epoch; the last batch may be short.
    pub fn batches(&self, split: Split, batch_size: usize, epoch_seed: u64) -> Result<BatchOrder> {
        BatchOrder::new(self.split(split).len(), batch_size, epoch_seed)
    }
}

/// Deterministic per-epoch batch order.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl BatchOrder {
    pub fn new(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng::rng(epoch_seed));
        Ok(Self {
            order,
            batch_size,
            next: 0,
        })
    }

    pub fn batches_per_epoch(len: usize, batch_size: usize) -> usize {
        len.div_ceil(batch_size)
    }
}

impl Iterator for BatchOrder {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.order[self.next..end].to_vec();
        self.next = end;
        Some(batch)
    }
}

/// Stacked images and per-task targets for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B x 3 x H x W]`.
    pub images: Tensor,
    pub seeds: Vec<u64>,
    pub targets: Vec<TaskTarget>,
}

impl Batch {
    pub fn new(samples: &[&SceneSample], tasks: &[SceneTask]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let img_shape = first.image.shape().to_vec();
        let mut images = Vec::with_capacity(samples.len() * first.image.len());
        for s in samples {
            if s.image.shape() != img_shape.as_slice() {
                return Err(Error::shape("Batch::new", &img_shape, s.image.shape()));
            }
            images.extend_from_slice(s.image.data());
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&img_shape);
        let rows = samples.len() * first.tokens();
        let targets = tasks
            .iter()
            .map(|task| {
                Ok(match task {
                    SceneTask::Semseg => {
                        TaskTarget::Labels(samples.iter().flat_map(|s| s.semseg.iter().map(|&c| Some(c))).collect())
                    }
                    SceneTask::Depth => TaskTarget::Values(Tensor::new(
                        [rows, 1],
                        samples.iter().flat_map(|s| s.depth.data().iter().copied()).collect(),
                    )?),
                    SceneTask::Normal => TaskTarget::Values(Tensor::new(
                        [rows, 3],
                        samples.iter().flat_map(|s| s.normals.data().iter().copied()).collect(),
                    )?),
                    SceneTask::Saliency => TaskTarget::Binary(
                        samples
                            .iter()
                            .flat_map(|s| s.saliency.iter().map(|&b| f64::from(u8::from(b))))
                            .collect(),
                    ),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            images: Tensor::new(shape, images)?,
            seeds: samples.iter().map(|s| s.seed).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}
