//! Dual timestep strategy: a geometry phase with large decreasing timesteps
//! and an appearance phase with small ones, split at a cut-off iteration, plus
//! the square-root decreasing schedule within each phase, the `t = 2s`
//! pairing, and the noise policy.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::Timestep;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Geometry,
    Appearance,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Geometry => f.write_str("geometry"),
            Phase::Appearance => f.write_str("appearance"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "policy")]
pub enum NoisePolicy {
    /// The same seed-derived vector at every iteration.
    Fixed { seed: u64 },
    /// A new standard-normal draw each iteration.
    Fresh,
}

/// Control plan for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub n_total: usize,
    /// Cut-off iteration: geometry while `iter <= cut_iter`.
    pub cut_iter: usize,
    /// Cut-off timestep shared by both phase bands.
    pub t_cut: Timestep,
    pub t_geo_max: Timestep,
    pub t_app_min: Timestep,
    /// Largest valid timestep (the schedule's K).
    pub k_max: usize,
    pub noise: NoisePolicy,
}

impl PhasePlan {
    pub fn validate(&self) -> Result<()> {
        if self.t_app_min.get() < 1 {
            return Err(Error::Config("t_app_min must be >= 1".into()));
        }
        if self.t_geo_max.get() > self.k_max {
            return Err(Error::Config(format!(
                "t_geo_max {} exceeds k_max {}",
                self.t_geo_max, self.k_max
            )));
        }
        if self.cut_iter >= self.n_total {
            return Err(Error::Config(format!(
                "cut_iter {} must be below n_total {}",
                self.cut_iter, self.n_total
            )));
        }
        // equalities allowed so collapsed bands (fixed-timestep samplers)
        // remain constructible
        if !(self.t_app_min <= self.t_cut && self.t_cut <= self.t_geo_max) {
            return Err(Error::Config(format!(
                "need t_app_min <= t_cut <= t_geo_max, got {} / {} / {}",
                self.t_app_min, self.t_cut, self.t_geo_max
            )));
        }
        Ok(())
    }
}

/// Geometry while `iter <= cut_iter` (inclusive), appearance afterwards.
pub fn phase_of(plan: &PhasePlan, iter: usize) -> Result<Phase> {
    if iter >= plan.n_total {
        return Err(Error::IterationOutOfRange {
            iter,
            total: plan.n_total,
        });
    }
    Ok(if iter <= plan.cut_iter {
        Phase::Geometry
    } else {
        Phase::Appearance
    })
}

/// Square-root decreasing schedule between `t_max` (at `id = 0`) and `t_min`
/// (at `id = interval`), rounded to the nearest grid index and clamped to
/// `[1, k_max]`. A zero interval returns `t_max`.
pub fn decreasing_timestep(
    t_max: Timestep,
    t_min: Timestep,
    id: usize,
    interval: usize,
    k_max: usize,
) -> Timestep {
    if interval == 0 {
        return Timestep(t_max.get().min(k_max).max(1));
    }
    let frac = (id as f64 / interval as f64).sqrt();
    let raw = t_max.get() as f64 - (t_max.get() as f64 - t_min.get() as f64) * frac;
    let rounded = raw.round().max(1.0).min(k_max as f64);
    Timestep(rounded as usize)
}

/// Timestep for an iteration: the decreasing schedule re-based within the
/// active phase.
pub fn timestep_at(plan: &PhasePlan, iter: usize) -> Result<Timestep> {
    let phase = phase_of(plan, iter)?;
    Ok(match phase {
        Phase::Geometry => {
            decreasing_timestep(plan.t_geo_max, plan.t_cut, iter, plan.cut_iter, plan.k_max)
        }
        Phase::Appearance => decreasing_timestep(
            plan.t_cut,
            plan.t_app_min,
            iter - plan.cut_iter,
            plan.n_total - plan.cut_iter,
            plan.k_max,
        ),
    })
}

/// Companion timestep `t = min(2 s, K)`.
pub fn paired_timestep(plan: &PhasePlan, s: Timestep) -> Timestep {
    Timestep((2 * s.get()).min(plan.k_max))
}

/// Perturbation noise for an iteration. The fixed policy returns the same
/// seed-derived vector every call; the fresh policy draws from `rng`.
pub fn noise_for<S: Scalar, R: Rng + ?Sized>(
    plan: &PhasePlan,
    _iter: usize,
    dim: usize,
    rng: &mut R,
) -> Vec<S> {
    match plan.noise {
        NoisePolicy::Fixed { seed } => {
            let mut fixed = ChaCha8Rng::seed_from_u64(seed);
            (0..dim).map(|_| S::std_normal(&mut fixed)).collect()
        }
        NoisePolicy::Fresh => (0..dim).map(|_| S::std_normal(rng)).collect(),
    }
}
