//! Gradient estimators for score-distillation optimization.
//!
//! All five estimators produce a [`GuidanceEstimate`]: a coherent
//! `(eps_hat, x0_hat)` pair at the timestep the prediction was made, the
//! latent it was made at, and the weighted residual that backpropagates
//! through the renderer. The residual always has the form
//! `omega(t) * (eps_hat - eps_base)`; which prediction plays `eps_base`
//! is what distinguishes the estimators.

use crate::consistency::{consistency_eval, eps_from_origin, ConsistencyFn};
use crate::error::{Error, Result};
use crate::linalg::check_dim;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Timestep, Weighting};
use crate::solvers::ddim_invert_step;
use crate::target::{MixtureTarget, Prompt};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    SdsDdpm,
    SdsLcm,
    SdsLcmGc,
    Ism,
    Vsd,
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            EstimatorKind::SdsDdpm => "sds_ddpm",
            EstimatorKind::SdsLcm => "sds_lcm",
            EstimatorKind::SdsLcmGc => "sds_lcm_gc",
            EstimatorKind::Ism => "ism",
            EstimatorKind::Vsd => "vsd",
        };
        f.write_str(name)
    }
}

/// One guidance evaluation.
#[derive(Debug, Clone)]
pub struct GuidanceEstimate<S> {
    pub eps_hat: Vec<S>,
    pub x0_hat: Vec<S>,
    /// Latent the prediction was evaluated at.
    pub latent: Vec<S>,
    pub t_used: Timestep,
    /// `omega(t_used) * (eps_hat - eps_base)`, in render space.
    pub pixel_gradient: Vec<S>,
    pub estimator: EstimatorKind,
}

impl<S: Scalar> GuidanceEstimate<S> {
    fn assemble(
        estimator: EstimatorKind,
        latent: Vec<S>,
        t_used: Timestep,
        eps_hat: Vec<S>,
        eps_base: &[S],
        sched: &NoiseSchedule<S>,
        omega: Weighting,
    ) -> Result<Self> {
        let w = omega.value(sched, t_used);
        let pixel_gradient = eps_hat
            .iter()
            .zip(eps_base)
            .map(|(h, b)| w * (*h - *b))
            .collect();
        let x0_hat = sched.predict_origin(&latent, t_used, &eps_hat)?;
        Ok(GuidanceEstimate {
            eps_hat,
            x0_hat,
            latent,
            t_used,
            pixel_gradient,
            estimator,
        })
    }

    /// Max deviation of the `(eps_hat, x0_hat)` pair from the origin-formula
    /// relation at `t_used`.
    pub fn coherence_defect(&self, sched: &NoiseSchedule<S>) -> S {
        let expect = sched
            .predict_origin(&self.latent, self.t_used, &self.eps_hat)
            .expect("coherent dimensions");
        self.x0_hat
            .iter()
            .zip(&expect)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), |acc, d| acc.max(d))
    }
}

/// Plain score distillation: perturb, predict with classifier-free mixing,
/// subtract the injected noise.
pub fn sds_ddpm<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    t: Timestep,
    eps: &[S],
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<GuidanceEstimate<S>> {
    check_dim(eps, x0.len())?;
    let x_t = sched.perturb(x0, t, eps)?;
    let eps_hat = target.cfg_eps(&x_t, t, prompt, sched)?;
    GuidanceEstimate::assemble(EstimatorKind::SdsDdpm, x_t, t, eps_hat, eps, sched, omega)
}

/// Score distillation with the consistency function as the guidance model.
pub fn sds_lcm<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    s: Timestep,
    eps: &[S],
    cf: &ConsistencyFn<S>,
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<GuidanceEstimate<S>> {
    check_dim(eps, x0.len())?;
    let x_s = sched.perturb(x0, s, eps)?;
    let x0_hat = consistency_eval(cf, target, &x_s, s, sched)?;
    let eps_hat = eps_from_origin(&x_s, s, &x0_hat, sched)?;
    GuidanceEstimate::assemble(EstimatorKind::SdsLcm, x_s, s, eps_hat, eps, sched, omega)
}

/// How the calibration jump from `s` to `t` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpForm {
    /// `x_t = sqrt(a_t) x0_hat_s + sigma_t eps_hat_s` — the unique
    /// deterministic jump consistent with the origin-prediction formula
    /// (default).
    #[default]
    DdimConsistent,
    /// `x_t = sqrt(a_t) (x_s + sqrt(a_s) eps_hat_s) / sqrt(a_s) + sigma_t
    /// eps_hat_s`, kept for comparison.
    Alternate,
}

/// Output of the two-stage calibration.
#[derive(Debug, Clone)]
pub struct Calibration<S> {
    pub x_t: Vec<S>,
    pub eps_hat_s: Vec<S>,
    pub x0_hat_s: Vec<S>,
    pub eps_hat_t: Vec<S>,
    pub x0_hat_t: Vec<S>,
}

/// Two-stage guidance calibration: predict at `s`, jump deterministically to
/// `t > s` along that prediction, re-predict at `t`.
pub fn calibrate<S: Scalar>(
    target: &MixtureTarget<S>,
    x_s: &[S],
    s: Timestep,
    t: Timestep,
    cf: &ConsistencyFn<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Calibration<S>> {
    calibrate_with(JumpForm::DdimConsistent, target, x_s, s, t, cf, sched)
}

pub fn calibrate_with<S: Scalar>(
    form: JumpForm,
    target: &MixtureTarget<S>,
    x_s: &[S],
    s: Timestep,
    t: Timestep,
    cf: &ConsistencyFn<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Calibration<S>> {
    if t.get() <= s.get() {
        return Err(Error::TimestepOrder {
            requirement: "t > s",
            s: s.get(),
            t: t.get(),
        });
    }
    let x0_hat_s = consistency_eval(cf, target, x_s, s, sched)?;
    let eps_hat_s = eps_from_origin(x_s, s, &x0_hat_s, sched)?;
    let x_t = match form {
        JumpForm::DdimConsistent => ddim_invert_step(x_s, s, t, &eps_hat_s, sched)?,
        JumpForm::Alternate => {
            let sa_s = sched.sqrt_alpha_bar(s);
            let sa_t = sched.sqrt_alpha_bar(t);
            let sig_t = sched.sigma(t);
            x_s.iter()
                .zip(&eps_hat_s)
                .map(|(x, e)| sa_t * (*x + sa_s * *e) / sa_s + sig_t * *e)
                .collect()
        }
    };
    let x0_hat_t = consistency_eval(cf, target, &x_t, t, sched)?;
    let eps_hat_t = eps_from_origin(&x_t, t, &x0_hat_t, sched)?;
    Ok(Calibration {
        x_t,
        eps_hat_s,
        x0_hat_s,
        eps_hat_t,
        x0_hat_t,
    })
}

/// Score distillation with calibrated guidance: the residual uses the
/// re-predicted `eps_hat_t` and weights at `t`, not `s`.
#[allow(clippy::too_many_arguments)]
pub fn sds_lcm_gc<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    s: Timestep,
    t: Timestep,
    eps: &[S],
    cf: &ConsistencyFn<S>,
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<GuidanceEstimate<S>> {
    check_dim(eps, x0.len())?;
    let x_s = sched.perturb(x0, s, eps)?;
    let cal = calibrate(target, &x_s, s, t, cf, sched)?;
    GuidanceEstimate::assemble(
        EstimatorKind::SdsLcmGc,
        cal.x_t,
        t,
        cal.eps_hat_t,
        eps,
        sched,
        omega,
    )
}

/// Bookkeeping for the inversion-chain estimator.
#[derive(Debug, Clone, Copy)]
pub struct IsmStats {
    /// Number of ideal-noise-prediction evaluations performed.
    pub score_evals: usize,
}

/// Interval score matching: build a deterministic inversion chain
/// `0 -> delta -> ... -> t` with unconditional predictions, then take the
/// residual between the conditional prediction at `t` and the unconditional
/// one at `s = t - delta`.
pub fn ism<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    t: Timestep,
    delta: usize,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<GuidanceEstimate<S>> {
    ism_with_stats(target, x0, t, delta, prompt, sched, omega).map(|(g, _)| g)
}

#[allow(clippy::type_complexity)]
pub fn ism_with_stats<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    t: Timestep,
    delta: usize,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<(GuidanceEstimate<S>, IsmStats)> {
    if delta == 0 || t.get() % delta != 0 || t.get() < 2 * delta {
        return Err(Error::MisalignedInterval { t: t.get(), delta });
    }
    check_dim(x0, target.dim())?;
    let uncond = Prompt::unconditional();
    let mut evals = 0usize;
    let mut x = x0.to_vec();
    let mut cur = 0usize;
    let mut eps_uncond_s: Vec<S> = vec![S::zero(); x0.len()];
    while cur < t.get() {
        let eps_u = target.eps_star(&x, Timestep(cur), &uncond, sched)?;
        evals += 1;
        x = ddim_invert_step(&x, Timestep(cur), Timestep(cur + delta), &eps_u, sched)?;
        eps_uncond_s = eps_u;
        cur += delta;
    }
    // the chain's final prediction was made at s = t - delta and is reused as
    // the residual base
    let eps_cond = target.eps_star(&x, t, prompt, sched)?;
    evals += 1;
    let est = GuidanceEstimate::assemble(
        EstimatorKind::Ism,
        x,
        t,
        eps_cond,
        &eps_uncond_s,
        sched,
        omega,
    )?;
    Ok((est, IsmStats { score_evals: evals }))
}

/// Variational score distillation. With at most one particle render the
/// residual base reduces to the injected noise; with more, it is the ideal
/// noise prediction of a single isotropic Gaussian fit to the renders.
#[allow(clippy::too_many_arguments)]
pub fn vsd<S: Scalar>(
    target: &MixtureTarget<S>,
    x0: &[S],
    t: Timestep,
    eps: &[S],
    prompt: &Prompt<S>,
    particle_renders: &[Vec<S>],
    sched: &NoiseSchedule<S>,
    omega: Weighting,
) -> Result<GuidanceEstimate<S>> {
    check_dim(eps, x0.len())?;
    let x_t = sched.perturb(x0, t, eps)?;
    let eps_hat = target.cfg_eps(&x_t, t, prompt, sched)?;
    let eps_base = if particle_renders.len() <= 1 {
        eps.to_vec()
    } else {
        let dim = x0.len();
        let n = S::from_usize(particle_renders.len()).unwrap();
        let mut mean = vec![S::zero(); dim];
        for p in particle_renders {
            check_dim(p, dim)?;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += *v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = S::zero();
        for p in particle_renders {
            for (m, v) in mean.iter().zip(p) {
                var += (*v - *m) * (*v - *m);
            }
        }
        var /= n * S::from_usize(dim).unwrap();
        // ideal prediction for data N(mean, var I) pushed to time t
        let a = sched.alpha_bar(t);
        let sig = sched.sigma(t);
        let sa = a.sqrt();
        let denom = a * var + sig * sig;
        x_t.iter()
            .zip(&mean)
            .map(|(x, m)| sig * (*x - sa * *m) / denom)
            .collect()
    };
    GuidanceEstimate::assemble(EstimatorKind::Vsd, x_t, t, eps_hat, &eps_base, sched, omega)
}
