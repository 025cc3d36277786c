//! Consistency check for stacks of binarized metal masks.
//!
//! The stack is back-projected into a visitor counter on an extended grid,
//! each voxel is normalized by the number of views that can see it, the
//! result is thresholded into a 3D metal mask, and that mask is forward
//! projected again. Structures segmented in too few of the views that see
//! them do not survive, and every output view is the projection of one and
//! the same 3D set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::projector::{
    backproject_visitors, normalize_visitors, reproject_mask, ConsistencyVolume, MaskStack, MaskVolume, VisitorVolume,
    Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CCConfig {
    /// Back-projection grid; must contain all metal and the diagnostic grid.
    pub cc_grid: VoxelGrid,
    /// Minimum fraction of visible views that must segment a voxel.
    pub tau: f64,
    /// Minimum path length (mm) through the 3D mask for a re-projected pixel.
    pub reproject_eps: f64,
}

impl CCConfig {
    pub const DEFAULT_TAU: f64 = 0.95;

    /// Default threshold and `reproject_eps = voxel_size / 2`.
    pub fn new(cc_grid: VoxelGrid) -> Self {
        Self {
            cc_grid,
            tau: Self::DEFAULT_TAU,
            reproject_eps: cc_grid.voxel_size / 2.0,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cc_grid.validate()?;
        check_tau(self.tau)?;
        if !(self.reproject_eps >= 0.0) {
            return Err(Error::invalid("cc config", "reproject_eps must be >= 0"));
        }
        Ok(())
    }

    /// [`CCConfig::validate`] plus the requirement that the grid covers the
    /// diagnostic volume.
    pub fn validate_against(&self, diagnostic: &VoxelGrid) -> Result<()> {
        self.validate()?;
        if !self.cc_grid.contains_grid(diagnostic) {
            return Err(Error::invalid(
                "cc config",
                "cc_grid does not contain the diagnostic grid",
            ));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("tau", format!("{tau} outside [0, 1]")));
    }
    Ok(())
}

/// Per-view pixel bookkeeping between an input and an output stack.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelAccounting {
    /// Set in both input and output.
    pub retained: Vec<u64>,
    /// Set in the input only.
    pub removed: Vec<u64>,
    /// Set in the output only.
    pub added: Vec<u64>,
}

impl PixelAccounting {
    pub fn between(input: &MaskStack, output: &MaskStack) -> Self {
        let mut acc = Self::default();
        for (a, b) in input.views().zip(output.views()) {
            let (mut kept, mut gone, mut new) = (0, 0, 0);
            for (&i, &o) in a.iter().zip(b) {
                match (i != 0, o != 0) {
                    (true, true) => kept += 1,
                    (true, false) => gone += 1,
                    (false, true) => new += 1,
                    _ => {}
                }
            }
            acc.retained.push(kept);
            acc.removed.push(gone);
            acc.added.push(new);
        }
        acc
    }

    pub fn total_retained(&self) -> u64 {
        self.retained.iter().sum()
    }

    pub fn total_removed(&self) -> u64 {
        self.removed.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct CCResult {
    pub consistent_masks: MaskStack,
    pub visitors: VisitorVolume,
    pub consistency: ConsistencyVolume,
    pub metal3d: MaskVolume,
    pub removed_pixels: Vec<u64>,
    pub retained_pixels: Vec<u64>,
    pub added_pixels: Vec<u64>,
}

/// Compact per-threshold outcome of [`cc_sweep`].
#[derive(Debug, Clone)]
pub struct CCSummary {
    pub tau: f64,
    pub metal_voxels: usize,
    pub consistent_masks: MaskStack,
    pub accounting: PixelAccounting,
}

/// Voxels whose normalized visitor count reaches `tau` (inclusive).
pub fn threshold_consistency(c: &ConsistencyVolume, tau: f64) -> Result<MaskVolume> {
    check_tau(tau)?;
    let data = c.value.iter().map(|&v| (v >= tau) as u8).collect();
    Ok(Volume { grid: c.grid, data })
}

fn metal_from(vv: &VisitorVolume, c: &ConsistencyVolume, tau: f64) -> Result<MaskVolume> {
    let mut m = threshold_consistency(c, tau)?;
    // unseen voxels cannot be confirmed by any view
    for (x, &seen) in m.data.iter_mut().zip(&vv.max_visits) {
        if seen == 0 {
            *x = 0;
        }
    }
    Ok(m)
}

/// Full check: back-project, normalize, threshold, re-project.
pub fn consistency_check(masks: &MaskStack, cfg: &CCConfig) -> Result<CCResult> {
    cfg.validate()?;
    let visitors = backproject_visitors(masks, &cfg.cc_grid)?;
    let consistency = normalize_visitors(&visitors);
    let metal3d = metal_from(&visitors, &consistency, cfg.tau)?;
    let consistent_masks = reproject_mask(&metal3d, &masks.geom, cfg.reproject_eps)?;
    let acc = PixelAccounting::between(masks, &consistent_masks);
    Ok(CCResult {
        consistent_masks,
        visitors,
        consistency,
        metal3d,
        removed_pixels: acc.removed,
        retained_pixels: acc.retained,
        added_pixels: acc.added,
    })
}

/// Same output stack as [`consistency_check`], dropping every intermediate
/// volume as soon as it has been consumed.
pub fn consistency_check_streaming(masks: &MaskStack, cfg: &CCConfig) -> Result<(MaskStack, PixelAccounting)> {
    cfg.validate()?;
    let metal3d = {
        let visitors = backproject_visitors(masks, &cfg.cc_grid)?;
        let consistency = normalize_visitors(&visitors);
        metal_from(&visitors, &consistency, cfg.tau)?
    };
    let out = reproject_mask(&metal3d, &masks.geom, cfg.reproject_eps)?;
    let acc = PixelAccounting::between(masks, &out);
    Ok((out, acc))
}

/// Runs threshold and re-projection for every `tau`, sharing one
/// back-projection. `cfg.tau` is ignored.
pub fn cc_sweep(masks: &MaskStack, cfg: &CCConfig, taus: &[f64]) -> Result<Vec<CCSummary>> {
    taus.iter().try_for_each(|&t| check_tau(t))?;
    cfg.with_tau(0.0).validate()?;
    let visitors = backproject_visitors(masks, &cfg.cc_grid)?;
    let consistency = normalize_visitors(&visitors);
    taus.iter()
        .map(|&tau| {
            let metal3d = metal_from(&visitors, &consistency, tau)?;
            let consistent_masks = reproject_mask(&metal3d, &masks.geom, cfg.reproject_eps)?;
            Ok(CCSummary {
                tau,
                metal_voxels: metal3d.data.iter().filter(|&&m| m != 0).count(),
                accounting: PixelAccounting::between(masks, &consistent_masks),
                consistent_masks,
            })
        })
        .collect()
}
