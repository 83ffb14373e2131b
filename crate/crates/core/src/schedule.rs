//! Discrete variance-preserving noise schedule.
//!
//! Houses the per-timestep quantities everything else consumes:
//! `alpha_bar[t]` (cumulative signal), `sigma[t] = sqrt(1 - alpha_bar[t])`,
//! `gamma(t) = sigma/sqrt(alpha_bar)` and the weighting function `omega(t)`.
//! Between integer timesteps, `log alpha_bar` is interpolated linearly so ODE
//! solvers can evaluate the schedule at real-valued times.

use crate::error::{Error, Result};
use crate::linalg::check_dim;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Discrete timestep index in `[0, K]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestep(pub usize);

impl Timestep {
    pub fn get(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for Timestep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl From<usize> for Timestep {
    fn from(t: usize) -> Self {
        Timestep(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Whether the forward perturbation scales the clean sample by
/// `sqrt(alpha_bar)` (the variance-preserving convention) or leaves it
/// unscaled. The unscaled form exists for comparison runs only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbForm {
    #[default]
    Scaled,
    Unscaled,
}

/// Timestep weighting `omega(t)` applied to guidance residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    One,
    SigmaSquared,
    AlphaBar,
}

impl Weighting {
    pub fn value<S: Scalar>(self, sched: &NoiseSchedule<S>, t: Timestep) -> S {
        match self {
            Weighting::One => S::one(),
            Weighting::SigmaSquared => {
                let s = sched.sigma(t);
                s * s
            }
            Weighting::AlphaBar => sched.alpha_bar(t),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule<S> {
    kind: ScheduleKind,
    k_max: usize,
    beta: Vec<S>,
    alpha_bar: Vec<S>,
    sigma: Vec<S>,
    log_alpha_bar: Vec<S>,
    /// Node slopes of `log alpha_bar`, central differences; used by the C^1
    /// Hermite interpolation between grid nodes.
    log_alpha_bar_slope: Vec<S>,
}

/// Builds the discrete schedule. `beta[0] = 0`; for the linear kind,
/// `beta[1..=K]` interpolates `[beta_min, beta_max]`. The cosine kind follows
/// the squared-cosine cumulative-signal curve with betas clipped at 0.999
/// (`beta_min`/`beta_max` are validated but unused there).
pub fn build_schedule<S: Scalar>(
    kind: ScheduleKind,
    k: usize,
    beta_min: S,
    beta_max: S,
) -> Result<NoiseSchedule<S>> {
    if k < 2 {
        return Err(Error::Config(format!("step count must be >= 2, got {k}")));
    }
    if !(beta_min > S::zero() && beta_min <= beta_max && beta_max < S::one()) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut beta = Vec::with_capacity(k + 1);
    beta.push(S::zero());
    match kind {
        ScheduleKind::Linear => {
            let span = beta_max - beta_min;
            let denom = S::from_usize(k - 1).unwrap();
            for i in 1..=k {
                let frac = S::from_usize(i - 1).unwrap() / denom;
                beta.push(beta_min + span * frac);
            }
        }
        ScheduleKind::Cosine => {
            let half_pi = S::from_f64_c(std::f64::consts::FRAC_PI_2);
            let c8 = S::from_f64_c(0.008);
            let c1008 = S::from_f64_c(1.008);
            let f = |t: usize| -> S {
                let arg = (S::from_usize(t).unwrap() / S::from_usize(k).unwrap() + c8) / c1008
                    * half_pi;
                arg.cos() * arg.cos()
            };
            let clip = S::from_f64_c(0.999);
            for i in 1..=k {
                beta.push((S::one() - f(i) / f(i - 1)).min(clip));
            }
        }
    }
    let mut alpha_bar = Vec::with_capacity(k + 1);
    alpha_bar.push(S::one());
    for i in 1..=k {
        let prev = alpha_bar[i - 1];
        alpha_bar.push(prev * (S::one() - beta[i]));
    }
    let sigma: Vec<S> = alpha_bar.iter().map(|a| (S::one() - *a).sqrt()).collect();
    let log_alpha_bar: Vec<S> = alpha_bar.iter().map(|a| a.ln()).collect();
    let half = S::from_f64_c(0.5);
    let mut log_alpha_bar_slope = Vec::with_capacity(k + 1);
    log_alpha_bar_slope.push(log_alpha_bar[1] - log_alpha_bar[0]);
    for i in 1..k {
        log_alpha_bar_slope.push(half * (log_alpha_bar[i + 1] - log_alpha_bar[i - 1]));
    }
    log_alpha_bar_slope.push(log_alpha_bar[k] - log_alpha_bar[k - 1]);
    Ok(NoiseSchedule {
        kind,
        k_max: k,
        beta,
        alpha_bar,
        sigma,
        log_alpha_bar,
        log_alpha_bar_slope,
    })
}

impl<S: Scalar> NoiseSchedule<S> {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Largest timestep index K.
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn last(&self) -> Timestep {
        Timestep(self.k_max)
    }

    fn check(&self, t: Timestep) -> usize {
        assert!(
            t.0 <= self.k_max,
            "timestep {} out of range [0, {}]",
            t.0,
            self.k_max
        );
        t.0
    }

    pub fn beta(&self, t: Timestep) -> S {
        self.beta[self.check(t)]
    }

    pub fn alpha_bar(&self, t: Timestep) -> S {
        self.alpha_bar[self.check(t)]
    }

    pub fn sigma(&self, t: Timestep) -> S {
        self.sigma[self.check(t)]
    }

    pub fn sqrt_alpha_bar(&self, t: Timestep) -> S {
        self.alpha_bar(t).sqrt()
    }

    /// `gamma(t) = sigma_t / sqrt(alpha_bar_t)`; zero at t = 0.
    pub fn gamma(&self, t: Timestep) -> S {
        self.sigma(t) / self.sqrt_alpha_bar(t)
    }

    /// Squared noise-to-signal level `gamma(t)^2`.
    pub fn gamma_sq(&self, t: Timestep) -> S {
        let a = self.alpha_bar(t);
        (S::one() - a) / a
    }

    /// Signal-to-noise ratio `alpha_bar / (1 - alpha_bar)`, t >= 1.
    pub fn snr(&self, t: Timestep) -> S {
        let a = self.alpha_bar(t);
        a / (S::one() - a)
    }

    /// Backward difference of `gamma^2 / 2` at `t`, per unit timestep. This is
    /// the discrete stand-in for the time derivative of the squared noise
    /// level that the reverse-SDE step consumes.
    pub fn gamma_dot_gamma(&self, t: Timestep) -> S {
        let t = self.check(t);
        assert!(t >= 1, "gamma_dot_gamma needs t >= 1");
        let two = S::from_f64_c(2.0);
        (self.gamma_sq(Timestep(t)) - self.gamma_sq(Timestep(t - 1))) / two
    }

    fn cell(&self, tau: S) -> (usize, S) {
        let k_max = S::from_usize(self.k_max).unwrap();
        let tau = tau.max(S::zero()).min(k_max);
        let idx = tau.floor().to_usize().unwrap().min(self.k_max - 1);
        (idx, tau - S::from_usize(idx).unwrap())
    }

    /// `log alpha_bar` at a real-valued time: cubic Hermite between grid
    /// nodes (exact at the nodes, continuously differentiable across them).
    pub fn log_alpha_bar_at(&self, tau: S) -> S {
        let (idx, u) = self.cell(tau);
        let (h0, h1) = (self.log_alpha_bar[idx], self.log_alpha_bar[idx + 1]);
        let (d0, d1) = (
            self.log_alpha_bar_slope[idx],
            self.log_alpha_bar_slope[idx + 1],
        );
        let one = S::one();
        let two = S::from_f64_c(2.0);
        let three = S::from_f64_c(3.0);
        let u2 = u * u;
        let u3 = u2 * u;
        (two * u3 - three * u2 + one) * h0
            + (u3 - two * u2 + u) * d0
            + (three * u2 - two * u3) * h1
            + (u3 - u2) * d1
    }

    pub fn alpha_bar_at(&self, tau: S) -> S {
        self.log_alpha_bar_at(tau).exp()
    }

    pub fn sigma_at(&self, tau: S) -> S {
        (S::one() - self.alpha_bar_at(tau)).max(S::zero()).sqrt()
    }

    /// Continuous decay rate `-d log alpha_bar / d tau` of the Hermite
    /// interpolation.
    pub fn beta_rate_at(&self, tau: S) -> S {
        let (idx, u) = self.cell(tau);
        let (h0, h1) = (self.log_alpha_bar[idx], self.log_alpha_bar[idx + 1]);
        let (d0, d1) = (
            self.log_alpha_bar_slope[idx],
            self.log_alpha_bar_slope[idx + 1],
        );
        let one = S::one();
        let two = S::from_f64_c(2.0);
        let three = S::from_f64_c(3.0);
        let four = S::from_f64_c(4.0);
        let six = S::from_f64_c(6.0);
        let u2 = u * u;
        let deriv = (six * u2 - six * u) * h0
            + (three * u2 - four * u + one) * d0
            + (six * u - six * u2) * h1
            + (three * u2 - two * u) * d1;
        -deriv
    }

    /// Forward perturbation `sqrt(alpha_bar_t) x0 + sigma_t eps`.
    pub fn perturb(&self, x0: &[S], t: Timestep, eps: &[S]) -> Result<Vec<S>> {
        self.perturb_with(PerturbForm::Scaled, x0, t, eps)
    }

    pub fn perturb_with(
        &self,
        form: PerturbForm,
        x0: &[S],
        t: Timestep,
        eps: &[S],
    ) -> Result<Vec<S>> {
        check_dim(eps, x0.len())?;
        let sig = self.sigma(t);
        let signal = match form {
            PerturbForm::Scaled => self.sqrt_alpha_bar(t),
            PerturbForm::Unscaled => S::one(),
        };
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| signal * *x + sig * *e)
            .collect())
    }

    /// Origin prediction `x0_hat = (x_t - sigma_t eps_hat) / sqrt(alpha_bar_t)`.
    pub fn predict_origin(&self, x_t: &[S], t: Timestep, eps_hat: &[S]) -> Result<Vec<S>> {
        check_dim(eps_hat, x_t.len())?;
        let sig = self.sigma(t);
        let inv = S::one() / self.sqrt_alpha_bar(t);
        Ok(x_t
            .iter()
            .zip(eps_hat)
            .map(|(x, e)| (*x - sig * *e) * inv)
            .collect())
    }
}
