//! Consistency-function evaluation at controllable fidelity.
//!
//! The oracle fidelity integrates the probability-flow ODE to its origin with
//! the adaptive solver. The `k_step` fidelity takes `k` uniform deterministic
//! jumps with the ideal noise prediction re-evaluated at each stop; `k = 1`
//! reproduces the single-step origin prediction and stands in for an
//! under-trained consistency model, whose output is pulled toward the
//! posterior mean instead of the trajectory origin.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::solvers::{ddim_step, integrate_pf_ode, OdeMethod, Trajectory, DEFAULT_ORACLE_TOL};
use crate::target::{MixtureTarget, Prompt};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum Fidelity {
    Oracle,
    KStep(usize),
}

/// Consistency function `f(x_t, t) -> x0_hat` for one prompt.
#[derive(Debug, Clone)]
pub struct ConsistencyFn<S> {
    pub fidelity: Fidelity,
    pub prompt: Prompt<S>,
}

impl<S: Scalar> ConsistencyFn<S> {
    pub fn new(fidelity: Fidelity, prompt: Prompt<S>) -> Result<Self> {
        if let Fidelity::KStep(k) = fidelity {
            if k == 0 {
                return Err(Error::Config("k_step fidelity needs k >= 1".into()));
            }
        }
        Ok(ConsistencyFn { fidelity, prompt })
    }

    pub fn oracle(prompt: Prompt<S>) -> Self {
        ConsistencyFn {
            fidelity: Fidelity::Oracle,
            prompt,
        }
    }

    pub fn k_step(k: usize, prompt: Prompt<S>) -> Result<Self> {
        ConsistencyFn::new(Fidelity::KStep(k), prompt)
    }
}

/// Predicted trajectory origin of `(x_t, t)`, `t >= 1`.
pub fn consistency_eval<S: Scalar>(
    cf: &ConsistencyFn<S>,
    target: &MixtureTarget<S>,
    x_t: &[S],
    t: Timestep,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if t.get() == 0 {
        return Err(Error::TimestepOutOfRange {
            t: 0,
            max: sched.k_max(),
        });
    }
    match cf.fidelity {
        Fidelity::Oracle => integrate_pf_ode(
            target,
            x_t,
            t,
            Timestep(0),
            OdeMethod::Adaptive {
                tol: S::from_f64_c(DEFAULT_ORACLE_TOL),
            },
            &cf.prompt,
            sched,
        ),
        Fidelity::KStep(k) => {
            if k == 0 {
                return Err(Error::Config("k_step fidelity needs k >= 1".into()));
            }
            let mut x = x_t.to_vec();
            let mut cur = t.get();
            for i in 1..=k {
                let frac = (t.get() as f64) * ((k - i) as f64) / (k as f64);
                let next = frac.round() as usize;
                if next >= cur {
                    continue;
                }
                let eps = target.eps_star(&x, Timestep(cur), &cf.prompt, sched)?;
                x = ddim_step(&x, Timestep(cur), Timestep(next), &eps, sched)?;
                cur = next;
            }
            debug_assert_eq!(cur, 0);
            Ok(x)
        }
    }
}

/// Converts an origin prediction back to the noise prediction:
/// `eps_hat = (x_t - sqrt(alpha_bar_t) x0_hat) / sigma_t`, `t >= 1`.
pub fn eps_from_origin<S: Scalar>(
    x_t: &[S],
    t: Timestep,
    x0_hat: &[S],
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if t.get() == 0 {
        return Err(Error::TimestepOutOfRange {
            t: 0,
            max: sched.k_max(),
        });
    }
    crate::linalg::check_dim(x0_hat, x_t.len())?;
    let sa = sched.sqrt_alpha_bar(t);
    let inv_sig = S::one() / sched.sigma(t);
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .map(|(x, o)| (*x - sa * *o) * inv_sig)
        .collect())
}

/// Max pairwise distance between consistency outputs along one trajectory.
pub fn self_consistency_deviation<S: Scalar>(
    cf: &ConsistencyFn<S>,
    target: &MixtureTarget<S>,
    traj: &Trajectory<S>,
    sched: &NoiseSchedule<S>,
) -> Result<S> {
    let pts = traj.points();
    if pts.len() < 2 {
        return Err(Error::TrajectoryTooShort(pts.len()));
    }
    let origins: Vec<Vec<S>> = pts
        .iter()
        .map(|(t, x)| consistency_eval(cf, target, x, *t, sched))
        .collect::<Result<_>>()?;
    let mut worst = S::zero();
    for i in 0..origins.len() {
        for j in (i + 1)..origins.len() {
            let d = crate::linalg::distance(&origins[i], &origins[j]);
            worst = worst.max(d);
        }
    }
    Ok(worst)
}
