//! Prune-and-clone density control on a fixed schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub interval: u64,
    /// No refinement at or after this iteration.
    pub stop_iteration: u64,
    pub prune_opacity: f64,
    /// Fraction of Gaussians, ranked by averaged screen-space gradient, that get cloned.
    pub clone_fraction: f64,
    pub max_gaussians: usize,
    /// Clone offset per axis, uniform in ±jitter·scale.
    pub jitter: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            interval: 500,
            stop_iteration: 8000,
            prune_opacity: 0.005,
            clone_fraction: 0.05,
            max_gaussians: 4000,
            jitter: 0.5,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidArgument("refine interval must be positive".into()));
        }
        if !(self.prune_opacity > 0.0 && self.prune_opacity < 1.0) {
            return Err(Error::InvalidArgument("prune_opacity must lie in (0, 1)".into()));
        }
        if !(self.clone_fraction > 0.0 && self.clone_fraction <= 1.0) {
            return Err(Error::InvalidArgument("clone_fraction must lie in (0, 1]".into()));
        }
        if self.max_gaussians == 0 {
            return Err(Error::InvalidArgument("max_gaussians must be positive".into()));
        }
        Ok(())
    }

    /// Whether the schedule calls for refinement after `iteration` steps.
    pub fn due(&self, iteration: u64) -> bool {
        iteration > 0 && iteration % self.interval == 0 && iteration < self.stop_iteration
    }
}

/// Running sum of per-view screen-space mean-gradient norms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradAccumulator {
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            count: vec![0; n],
        }
    }

    /// Adds one view's norms; Gaussians with a zero norm were not visible.
    pub fn add(&mut self, norms: &[f64]) {
        if self.sum.len() != norms.len() {
            *self = Self::new(norms.len());
        }
        for (i, &g) in norms.iter().enumerate() {
            if g > 0.0 {
                self.sum[i] += g;
                self.count[i] += 1;
            }
        }
    }

    pub fn average(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.sum[i] / self.count[i] as f64
        }
    }

    pub fn reset(&mut self, n: usize) {
        *self = Self::new(n);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RefineOutcome {
    pub pruned: usize,
    pub cloned: usize,
    /// For each row of the new cloud, the old row it continues (`None` for clones).
    pub rows: Vec<Option<usize>>,
}

/// Prunes transparent Gaussians, then clones the highest-gradient ones.
///
/// Survivors keep their order; clones are appended after them, parents in
/// descending gradient order. At least one Gaussian always survives.
pub fn refine_step(
    cloud: &mut GaussianCloud,
    acc: &mut GradAccumulator,
    cfg: &RefineConfig,
    iteration: u64,
    seed: u64,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if !cfg.due(iteration) {
        return Err(Error::Contract(format!("refinement is not scheduled at iteration {iteration}")));
    }
    let n = cloud.count();
    if acc.sum.len() != n {
        acc.reset(n);
    }
    let mut keep: Vec<usize> = (0..n).filter(|&i| cloud.opacity(i) >= cfg.prune_opacity).collect();
    if keep.is_empty() && n > 0 {
        let best = (0..n)
            .max_by(|&a, &b| cloud.opacity_logits[a].total_cmp(&cloud.opacity_logits[b]).then(b.cmp(&a)))
            .unwrap();
        keep.push(best);
    }
    let pruned = n - keep.len();

    let mut ranked: Vec<usize> = keep.iter().copied().filter(|&i| acc.average(i) > 0.0).collect();
    ranked.sort_by(|&a, &b| acc.average(b).total_cmp(&acc.average(a)).then(a.cmp(&b)));
    let budget = cfg.max_gaussians.saturating_sub(keep.len());
    let wanted = (cfg.clone_fraction * keep.len() as f64).floor() as usize;
    let parents: Vec<usize> = ranked.into_iter().take(wanted.min(budget)).collect();

    let mut rows: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    let mut next = cloud.select(&keep);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    for &p in &parents {
        let mut child = cloud.select(&[p]);
        let scale = cloud.scale(p);
        for k in 0..3 {
            child.positions[k] += cfg.jitter * scale[k] * rng.gen_range(-1.0..1.0);
            child.log_scales[k] -= std::f64::consts::LN_2;
        }
        next.append(&child);
        rows.push(None);
    }
    *cloud = next;
    acc.reset(cloud.count());
    log::debug!("refine at {iteration}: pruned {pruned}, cloned {}, count {}", parents.len(), cloud.count());
    Ok(RefineOutcome {
        pruned,
        cloned: parents.len(),
        rows,
    })
}
