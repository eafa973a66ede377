use crate::config::RunConfig;
use crate::error::Result;
use crate::harness::checkpoint::build_model;
use crate::heads::SceneTask;
use crate::model::Variant;
use crate::numerics::{grad_check, GradCheckOptions, GradReport, Mode};
use crate::synthdata::{generate_sample, Batch};

/// The small configuration used for full-model gradient checks:
/// 16x16 images, 4x4 token grid, C = 8, two layers, two experts, two tasks.
pub fn micro_config(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        variant,
        seed,
        ..RunConfig::default()
    };
    cfg.backbone.image_size = 16;
    cfg.backbone.patch_size = 4;
    cfg.backbone.channels = 8;
    cfg.backbone.layers = 2;
    cfg.backbone.heads = 2;
    cfg.backbone.mlp_ratio = 2;
    cfg.gating.experts = 2;
    cfg.tasks = vec![SceneTask::Semseg, SceneTask::Depth];
    cfg.data.classes = 4;
    cfg.train.batch_size = 2;
    cfg
}

/// Finite-difference check of the total training loss on a two-sample batch.
pub fn gradcheck_model(cfg: &RunConfig, opts: GradCheckOptions) -> Result<GradReport> {
    let (model, mut store) = build_model(cfg)?;
    let data = cfg.dataset();
    let samples = (0..cfg.train.batch_size.max(2))
        .map(|i| generate_sample(data.sample_seed(crate::synthdata::Split::Train, i), &data))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::new(&refs, &cfg.tasks)?;
    grad_check(
        &mut store,
        |g, store| Ok(model.loss(g, store, &batch.images, &batch.targets, Mode::Train)?.total),
        opts,
    )
}
