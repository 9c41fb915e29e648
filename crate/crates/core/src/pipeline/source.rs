//! Mask sources behind a common strategy trait, registered by name:
//! `ap` (percentile masks from collected statistics), `random` (seeded
//! uniform baseline) and `ood` (reuse a mask file built elsewhere).

use std::path::Path;

use crate::error::{Error, Result};

use super::{
    build_masks, load_masks, random_masks, AvgAttention, MaskSet, MaskShapeSpec, PruneSpec,
};

/// Everything a mask source might need to produce a [`MaskSet`].
pub struct MaskBuildContext<'a> {
    pub avg: &'a AvgAttention,
    pub spec: &'a PruneSpec,
    pub source_dataset: &'a str,
    pub seed: u64,
    /// Mask file to reuse, for the out-of-distribution source.
    pub ood_path: Option<&'a Path>,
    /// Model head layout the produced mask must fit.
    pub shape: &'a MaskShapeSpec,
}

pub trait MaskStrategy: Sync {
    fn name(&self) -> &'static str;
    fn build(&self, ctx: &MaskBuildContext) -> Result<MaskSet>;
}

struct ApStrategy;

impl MaskStrategy for ApStrategy {
    fn name(&self) -> &'static str {
        "ap"
    }

    fn build(&self, ctx: &MaskBuildContext) -> Result<MaskSet> {
        build_masks(ctx.avg, ctx.spec, ctx.source_dataset)
    }
}

struct RandomStrategy;

impl MaskStrategy for RandomStrategy {
    fn name(&self) -> &'static str {
        "random"
    }

    fn build(&self, ctx: &MaskBuildContext) -> Result<MaskSet> {
        random_masks(ctx.avg, ctx.spec, ctx.seed, ctx.source_dataset)
    }
}

struct OodStrategy;

impl MaskStrategy for OodStrategy {
    fn name(&self) -> &'static str {
        "ood"
    }

    fn build(&self, ctx: &MaskBuildContext) -> Result<MaskSet> {
        let path = ctx.ood_path.ok_or_else(|| {
            Error::Config("ood mask source requires a mask file path".into())
        })?;
        let mut mask = load_masks(path)?;
        mask.validate_against(ctx.shape)?;
        mask.meta.origin = super::MaskOrigin::Ood;
        Ok(mask)
    }
}

static AP: ApStrategy = ApStrategy;
static RANDOM: RandomStrategy = RandomStrategy;
static OOD: OodStrategy = OodStrategy;

/// Registered mask sources, in registry order.
pub static MASK_STRATEGIES: &[&dyn MaskStrategy] = &[&AP, &RANDOM, &OOD];

pub fn mask_strategy_by_name(name: &str) -> Option<&'static dyn MaskStrategy> {
    MASK_STRATEGIES.iter().copied().find(|s| s.name() == name)
}

pub fn mask_strategy_names() -> Vec<&'static str> {
    MASK_STRATEGIES.iter().map(|s| s.name()).collect()
}
