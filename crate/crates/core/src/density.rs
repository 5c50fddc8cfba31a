//! Inactive-Gaussian detection, pruning, and respawn (density control).
//!
//! The activity metric is `m_g = |I_g * o_g|`. Gaussians below the
//! threshold (and out of grace) are replaced in place: their means are
//! redrawn uniformly inside the bounding box of the surviving active means
//! and every other parameter resets to the seeding defaults. Replacing in
//! place keeps the total count constant and leaves survivors at their
//! original indices, so optimizer moments stay attached to the Gaussians
//! they belong to.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sigmoid, GaussianCloud};
use crate::seeding::InitConfig;

/// Density-control schedule and threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensityConfig {
    /// Activity threshold epsilon on `m_g`.
    pub threshold: f64,
    /// Epochs between control steps.
    pub period: usize,
    pub first_epoch: usize,
    pub last_epoch: usize,
    /// Control steps a freshly respawned Gaussian is exempt from pruning.
    pub grace_periods: u32,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            period: 10,
            first_epoch: 10,
            last_epoch: 40,
            grace_periods: 1,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "density threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.period < 1 {
            return Err(Error::InvalidArgument("density period must be >= 1".into()));
        }
        if self.first_epoch > self.last_epoch {
            return Err(Error::InvalidArgument(format!(
                "density first_epoch {} > last_epoch {}",
                self.first_epoch, self.last_epoch
            )));
        }
        Ok(())
    }

    /// Whether a control step fires after the given (1-based) epoch.
    pub fn fires_at(&self, epoch: usize) -> bool {
        epoch >= self.first_epoch
            && epoch <= self.last_epoch
            && (epoch - self.first_epoch) % self.period == 0
    }
}

/// Activity metric `m_g = |intensity_g * sigmoid(opacity_logit_g)|`.
pub fn activity(cloud: &GaussianCloud) -> Vec<f64> {
    (0..cloud.len())
        .map(|g| (cloud.intensity(g) * sigmoid(cloud.opacity_logits[g])).abs())
        .collect()
}

/// One control step's bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEvent {
    /// Epoch the step ran after (0 when run standalone).
    pub epoch: usize,
    /// Indices whose Gaussians were removed.
    pub removed: Vec<usize>,
    /// Indices where replacements were inserted (same slots).
    pub inserted: Vec<usize>,
    /// Bounding box the new means were drawn from.
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// True when every Gaussian was inactive and the previous population's
    /// box had to be reused.
    pub degenerate: bool,
}

fn bbox_of(cloud: &GaussianCloud, indices: &[usize]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &g in indices {
        let m = cloud.mean(g);
        for k in 0..3 {
            lo[k] = lo[k].min(m[k]);
            hi[k] = hi[k].max(m[k]);
        }
    }
    (lo, hi)
}

/// Prunes inactive Gaussians and respawns replacements in place.
///
/// `grace` holds per-Gaussian exemption counters (same length as the
/// cloud); it is decremented for exempt Gaussians and set to
/// `cfg.grace_periods` for the respawned ones. Total count is invariant.
pub fn prune_and_respawn(
    cloud: &GaussianCloud,
    grace: &mut Vec<u32>,
    cfg: &DensityConfig,
    defaults: &InitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(GaussianCloud, DensityEvent)> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::InvalidArgument(
            "density control needs a nonempty cloud".into(),
        ));
    }
    if grace.len() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "grace counters {} vs cloud {}",
            grace.len(),
            cloud.len()
        )));
    }

    let m = activity(cloud);
    let mut removed = Vec::new();
    let mut survivors = Vec::new();
    for g in 0..cloud.len() {
        if m[g] < cfg.threshold {
            if grace[g] > 0 {
                grace[g] -= 1;
                survivors.push(g);
            } else {
                removed.push(g);
            }
        } else {
            survivors.push(g);
        }
    }

    // Active survivors define the respawn region; if nothing survives, fall
    // back to the previous population's bounding box.
    let active: Vec<usize> = survivors
        .iter()
        .copied()
        .filter(|&g| m[g] >= cfg.threshold)
        .collect();
    let degenerate = active.is_empty();
    let (lo, hi) = if degenerate {
        bbox_of(cloud, &(0..cloud.len()).collect::<Vec<_>>())
    } else {
        bbox_of(cloud, &active)
    };

    let mut out = cloud.clone();
    for &g in &removed {
        for k in 0..3 {
            let u: f64 = rng.random();
            out.means[3 * g + k] = lo[k] + (hi[k] - lo[k]) * u;
            out.log_scales[3 * g + k] = defaults.log_scale[k];
        }
        for k in 0..4 {
            out.quats[4 * g + k] = defaults.quat[k];
        }
        out.opacity_logits[g] = defaults.opacity_logit;
        out.intensities[g] = defaults.intensity;
        grace[g] = cfg.grace_periods;
    }

    let inserted = removed.clone();
    Ok((
        out,
        DensityEvent {
            epoch: 0,
            removed,
            inserted,
            bbox_min: lo,
            bbox_max: hi,
            degenerate,
        },
    ))
}
