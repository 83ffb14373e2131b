//! Probability-flow ODE machinery, DDIM stepping/inversion, and the reverse
//! SDE sampler.
//!
//! The variance-preserving flow field is
//!
//! ```text
//! dx/dtau = -1/2 beta(tau) (x + grad log p_tau(x))
//! ```
//!
//! which keeps every perturbed marginal invariant; on a standard-normal
//! target it vanishes identically. The literal variance-exploding shorthand
//! `-sigma_dot sigma grad log p` is kept as a comparison form: the two
//! coincide after mapping to the unscaled variable `y = x / sqrt(alpha_bar)`
//! with noise level `gamma`, which is also the variable the reverse SDE step
//! operates in.
//!
//! The adaptive integrator is a Dormand-Prince 5(4) embedded pair with
//! absolute-plus-relative error control and serves as the project-wide
//! oracle for trajectory origins.

use crate::error::{Error, Result};
use crate::linalg::check_dim;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Timestep};
use crate::target::{MixtureTarget, Prompt};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Oracle tolerance used wherever a caller does not pick one. Chosen so that
/// origin estimates along a single trajectory agree to well below 1e-4 even
/// through the divergence-amplifying region between mixture modes.
pub const DEFAULT_ORACLE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "variant")]
pub enum OdeMethod<S> {
    Euler { substeps: usize },
    Heun { substeps: usize },
    Rk4 { substeps: usize },
    Adaptive { tol: S },
}

impl<S: Scalar> OdeMethod<S> {
    pub fn adaptive_default() -> Self {
        OdeMethod::Adaptive {
            tol: S::from_f64_c(DEFAULT_ORACLE_TOL),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OdeMethod::Euler { substeps }
            | OdeMethod::Heun { substeps }
            | OdeMethod::Rk4 { substeps } => {
                if *substeps == 0 {
                    return Err(Error::Config("substeps must be >= 1".into()));
                }
            }
            OdeMethod::Adaptive { tol } => {
                if *tol <= S::zero() {
                    return Err(Error::Config("adaptive tol must be > 0".into()));
                }
            }
        }
        Ok(())
    }
}

/// Which reading of the deterministic flow to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowForm {
    /// Marginal-preserving variance-preserving flow (default).
    #[default]
    VpConsistent,
    /// The variance-exploding shorthand applied directly in x-space.
    LiteralVe,
}

/// Which coefficients the reverse-SDE step uses, in the `y = x/sqrt(a)`
/// variable with noise level `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeForm {
    /// Anderson reverse-time coefficients: drift `2 gdot g score`, diffusion
    /// `sqrt(2 gdot g)`. Preserves the forward marginals (default).
    #[default]
    MarginalPreserving,
    /// Flow drift `gdot g score` with diffusion `sqrt(gdot g)`, kept for
    /// comparison; its intermediate marginals are biased.
    HalfNoise,
}

/// Continuous-time flow field at real-valued `tau`.
pub fn pf_ode_field_at<S: Scalar>(
    form: FlowForm,
    target: &MixtureTarget<S>,
    x: &[S],
    tau: S,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    let score = target.perturbed_score_at(x, tau, prompt, sched)?;
    let half = S::from_f64_c(0.5);
    match form {
        FlowForm::VpConsistent => {
            let rate = sched.beta_rate_at(tau);
            Ok(x
                .iter()
                .zip(&score)
                .map(|(xi, si)| -half * rate * (*xi + *si))
                .collect())
        }
        FlowForm::LiteralVe => {
            // sigma_dot sigma = alpha_bar * beta_rate / 2 on the VP schedule
            let coeff = sched.alpha_bar_at(tau) * sched.beta_rate_at(tau) * half;
            Ok(score.iter().map(|si| -coeff * *si).collect())
        }
    }
}

/// Flow field at a grid timestep (`t >= 1`), default VP-consistent form.
pub fn pf_ode_field<S: Scalar>(
    target: &MixtureTarget<S>,
    x: &[S],
    t: Timestep,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    pf_ode_field_with(FlowForm::VpConsistent, target, x, t, prompt, sched)
}

pub fn pf_ode_field_with<S: Scalar>(
    form: FlowForm,
    target: &MixtureTarget<S>,
    x: &[S],
    t: Timestep,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if t.get() == 0 {
        return Err(Error::TimestepOutOfRange {
            t: 0,
            max: sched.k_max(),
        });
    }
    pf_ode_field_at(form, target, x, S::from_usize(t.get()).unwrap(), prompt, sched)
}

/// Integrates the VP flow from `t` down to `t_end < t`.
pub fn integrate_pf_ode<S: Scalar>(
    target: &MixtureTarget<S>,
    x_t: &[S],
    t: Timestep,
    t_end: Timestep,
    method: OdeMethod<S>,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    method.validate()?;
    if t_end.get() >= t.get() {
        return Err(Error::TimestepOrder {
            requirement: "t_end < t",
            s: t_end.get(),
            t: t.get(),
        });
    }
    check_dim(x_t, target.dim())?;
    let f = |y: &[S], tau: S| pf_ode_field_at(FlowForm::VpConsistent, target, y, tau, prompt, sched);
    let tau0 = S::from_usize(t.get()).unwrap();
    let tau1 = S::from_usize(t_end.get()).unwrap();
    match method {
        OdeMethod::Euler { substeps } => fixed_step(x_t, tau0, tau1, substeps, f, |y, tau, h, f| {
            let k1 = f(y, tau)?;
            Ok(y.iter().zip(&k1).map(|(a, b)| *a + h * *b).collect())
        }),
        OdeMethod::Heun { substeps } => fixed_step(x_t, tau0, tau1, substeps, f, |y, tau, h, f| {
            let k1 = f(y, tau)?;
            let pred: Vec<S> = y.iter().zip(&k1).map(|(a, b)| *a + h * *b).collect();
            let k2 = f(&pred, tau + h)?;
            let half = S::from_f64_c(0.5);
            Ok(y
                .iter()
                .zip(k1.iter().zip(&k2))
                .map(|(a, (b, c))| *a + half * h * (*b + *c))
                .collect())
        }),
        OdeMethod::Rk4 { substeps } => fixed_step(x_t, tau0, tau1, substeps, f, |y, tau, h, f| {
            let half = S::from_f64_c(0.5);
            let sixth = S::from_f64_c(1.0 / 6.0);
            let two = S::from_f64_c(2.0);
            let k1 = f(y, tau)?;
            let y2: Vec<S> = y.iter().zip(&k1).map(|(a, b)| *a + half * h * *b).collect();
            let k2 = f(&y2, tau + half * h)?;
            let y3: Vec<S> = y.iter().zip(&k2).map(|(a, b)| *a + half * h * *b).collect();
            let k3 = f(&y3, tau + half * h)?;
            let y4: Vec<S> = y.iter().zip(&k3).map(|(a, b)| *a + h * *b).collect();
            let k4 = f(&y4, tau + h)?;
            Ok((0..y.len())
                .map(|i| y[i] + sixth * h * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
                .collect())
        }),
        OdeMethod::Adaptive { tol } => dopri5(x_t, tau0, tau1, tol, f),
    }
}

fn fixed_step<S, F, St>(
    x0: &[S],
    tau0: S,
    tau1: S,
    substeps: usize,
    f: F,
    step: St,
) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&[S], S) -> Result<Vec<S>>,
    St: Fn(&[S], S, S, &F) -> Result<Vec<S>>,
{
    let h = (tau1 - tau0) / S::from_usize(substeps).unwrap();
    let mut y = x0.to_vec();
    let mut tau = tau0;
    for _ in 0..substeps {
        y = step(&y, tau, h, &f)?;
        tau += h;
    }
    Ok(y)
}

/// Dormand-Prince 5(4) with PI-free standard step control. `tol` is used for
/// both the absolute and relative parts of the error norm.
fn dopri5<S, F>(x0: &[S], tau0: S, tau1: S, tol: S, f: F) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&[S], S) -> Result<Vec<S>>,
{
    const A: [[f64; 6]; 6] = [
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    // y5 - y4 error weights
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];

    let n = x0.len();
    let span = tau1 - tau0;
    let mut y = x0.to_vec();
    let mut tau = tau0;
    let mut h = span * S::from_f64_c(0.01);
    // done_tol absorbs the final rounding of tau; min_h is only reachable
    // through repeated rejections
    let done_tol = span.abs() * S::from_f64_c(1e-13) + S::from_f64_c(1e-12);
    let min_h = done_tol * S::from_f64_c(1e-3);
    let mut k1 = f(&y, tau)?;
    let mut steps = 0usize;
    loop {
        let remaining = tau1 - tau;
        if remaining.abs() <= done_tol {
            return Ok(y);
        }
        if h.abs() > remaining.abs() {
            h = remaining;
        }
        steps += 1;
        if steps > 2_000_000 {
            return Err(Error::Divergence("step budget exhausted".into()));
        }
        let mut ks: Vec<Vec<S>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for stage in 0..6 {
            let mut arg = y.clone();
            for (j, kj) in ks.iter().enumerate() {
                let a = S::from_f64_c(A[stage][j]);
                if a != S::zero() {
                    for (ai, ki) in arg.iter_mut().zip(kj) {
                        *ai += h * a * *ki;
                    }
                }
            }
            ks.push(f(&arg, tau + S::from_f64_c(C[stage]) * h)?);
        }
        // 5th-order solution is the stage-6 argument (FSAL form)
        let mut y5 = y.clone();
        for (j, kj) in ks.iter().enumerate().take(6) {
            let a = S::from_f64_c(A[5][j]);
            if a != S::zero() {
                for (ai, ki) in y5.iter_mut().zip(kj) {
                    *ai += h * a * *ki;
                }
            }
        }
        // error estimate
        let mut err = S::zero();
        for i in 0..n {
            let mut e = S::zero();
            for (j, kj) in ks.iter().enumerate() {
                let w = S::from_f64_c(E[j]);
                if w != S::zero() {
                    e += w * kj[i];
                }
            }
            e *= h;
            let scale = tol + tol * y[i].abs().max(y5[i].abs());
            let r = e / scale;
            err += r * r;
        }
        err = (err / S::from_usize(n).unwrap()).sqrt();
        if err <= S::one() {
            tau += h;
            y = y5;
            k1 = ks.pop().unwrap();
        }
        let order_inv = S::from_f64_c(0.2);
        let safety = S::from_f64_c(0.9);
        let factor = if err > S::zero() {
            (safety * err.powf(-order_inv))
                .max(S::from_f64_c(0.2))
                .min(S::from_f64_c(5.0))
        } else {
            S::from_f64_c(5.0)
        };
        h *= factor;
        if h.abs() < min_h {
            return Err(Error::Divergence(format!(
                "step size underflow at tau = {tau}"
            )));
        }
    }
}

/// Deterministic jump `t -> s` (s < t): `sqrt(a_s) x0_hat + sigma_s eps_hat`.
pub fn ddim_step<S: Scalar>(
    x_t: &[S],
    t: Timestep,
    s: Timestep,
    eps_hat: &[S],
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if s.get() >= t.get() {
        return Err(Error::TimestepOrder {
            requirement: "s < t",
            s: s.get(),
            t: t.get(),
        });
    }
    let x0_hat = sched.predict_origin(x_t, t, eps_hat)?;
    sched.perturb(&x0_hat, s, eps_hat)
}

/// Deterministic inversion `s -> t` (t >= s): `sqrt(a_t) x0_hat + sigma_t eps`.
/// `t == s` is the identity.
pub fn ddim_invert_step<S: Scalar>(
    x_s: &[S],
    s: Timestep,
    t: Timestep,
    eps_uncond: &[S],
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if t.get() < s.get() {
        return Err(Error::TimestepOrder {
            requirement: "t >= s",
            s: s.get(),
            t: t.get(),
        });
    }
    let x0_hat = sched.predict_origin(x_s, s, eps_uncond)?;
    sched.perturb(&x0_hat, t, eps_uncond)
}

/// One Euler-Maruyama step of the reverse SDE from `t` down to `t - dt`,
/// marginal-preserving coefficients.
#[allow(clippy::too_many_arguments)]
pub fn reverse_sde_step<S: Scalar, R: Rng + ?Sized>(
    target: &MixtureTarget<S>,
    x: &[S],
    t: Timestep,
    dt: usize,
    rng: &mut R,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    reverse_sde_step_with(SdeForm::MarginalPreserving, target, x, t, dt, rng, prompt, sched)
}

#[allow(clippy::too_many_arguments)]
pub fn reverse_sde_step_with<S: Scalar, R: Rng + ?Sized>(
    form: SdeForm,
    target: &MixtureTarget<S>,
    x: &[S],
    t: Timestep,
    dt: usize,
    rng: &mut R,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Vec<S>> {
    if dt > t.get() {
        return Err(Error::TimestepOrder {
            requirement: "dt <= t",
            s: dt,
            t: t.get(),
        });
    }
    check_dim(x, target.dim())?;
    if dt == 0 {
        return Ok(x.to_vec());
    }
    let s = Timestep(t.get() - dt);
    // work in y = x / sqrt(a); the score transforms as score_y = sqrt(a) score_x
    let sqrt_a_t = sched.sqrt_alpha_bar(t);
    let y: Vec<S> = x.iter().map(|v| *v / sqrt_a_t).collect();
    let score_x = target.perturbed_score(x, t, prompt, sched)?;
    let gg = sched.gamma_dot_gamma(t);
    let dt_s = S::from_usize(dt).unwrap();
    let (drift, noise_var) = match form {
        SdeForm::MarginalPreserving => {
            let two = S::from_f64_c(2.0);
            (two * gg * dt_s, two * gg * dt_s)
        }
        SdeForm::HalfNoise => (gg * dt_s, gg * dt_s),
    };
    let noise_std = noise_var.max(S::zero()).sqrt();
    let sqrt_a_s = sched.sqrt_alpha_bar(s);
    let out: Vec<S> = y
        .iter()
        .zip(&score_x)
        .map(|(yi, si)| {
            let score_y = sqrt_a_t * *si;
            let stepped = *yi + drift * score_y + noise_std * S::std_normal(rng);
            sqrt_a_s * stepped
        })
        .collect();
    Ok(out)
}

/// Points on one deterministic trajectory, strictly monotone in timestep.
#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    points: Vec<(Timestep, Vec<S>)>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(points: Vec<(Timestep, Vec<S>)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::TrajectoryTooShort(points.len()));
        }
        let dim = points[0].1.len();
        let increasing = points[1].0 > points[0].0;
        for w in points.windows(2) {
            let ok = if increasing {
                w[1].0 > w[0].0
            } else {
                w[1].0 < w[0].0
            };
            if !ok {
                return Err(Error::TrajectoryNotMonotone);
            }
        }
        for (_, p) in &points {
            check_dim(p, dim)?;
        }
        Ok(Trajectory { points })
    }

    pub fn points(&self) -> &[(Timestep, Vec<S>)] {
        &self.points
    }
}

/// Integrates the flow from `(x_top, stops[0])` through each stop, collecting
/// the state at every timestep in `stops` (strictly decreasing).
pub fn sample_trajectory<S: Scalar>(
    target: &MixtureTarget<S>,
    x_top: &[S],
    stops: &[Timestep],
    tol: S,
    prompt: &Prompt<S>,
    sched: &NoiseSchedule<S>,
) -> Result<Trajectory<S>> {
    if stops.len() < 2 {
        return Err(Error::TrajectoryTooShort(stops.len()));
    }
    let mut points = Vec::with_capacity(stops.len());
    points.push((stops[0], x_top.to_vec()));
    let mut x = x_top.to_vec();
    for w in stops.windows(2) {
        x = integrate_pf_ode(
            target,
            &x,
            w[0],
            w[1],
            OdeMethod::Adaptive { tol },
            prompt,
            sched,
        )?;
        points.push((w[1], x.clone()));
    }
    Trajectory::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::distance;
    use crate::schedule::{build_schedule, ScheduleKind};
    use crate::target::Component;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule<f64> {
        build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    fn bimodal() -> MixtureTarget<f64> {
        MixtureTarget::new(
            2,
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![-3.0, 0.0],
                    cov_scale: 0.5,
                },
                Component {
                    weight: 0.5,
                    mean: vec![3.0, 0.0],
                    cov_scale: 0.5,
                },
            ],
        )
        .unwrap()
    }

    fn single(mean: [f64; 2], c: f64) -> MixtureTarget<f64> {
        MixtureTarget::new(
            2,
            vec![Component {
                weight: 1.0,
                mean: mean.to_vec(),
                cov_scale: c,
            }],
        )
        .unwrap()
    }

    #[test]
    fn vp_field_vanishes_on_standard_normal() {
        let s = sched();
        let target = MixtureTarget::<f64>::standard_normal(2);
        let un = Prompt::unconditional();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = vec![2.0 * f64::std_normal(&mut rng), 2.0 * f64::std_normal(&mut rng)];
            let t = Timestep(1 + (rng.gen::<u64>() % 1000) as usize);
            let f = pf_ode_field(&target, &x, t, &un, &s).unwrap();
            assert!(f[0].abs() < 1e-12 && f[1].abs() < 1e-12);
        }
        // the literal variance-exploding reading does not vanish
        let f = pf_ode_field_with(
            FlowForm::LiteralVe,
            &target,
            &[1.0, 0.0],
            Timestep(500),
            &un,
            &s,
        )
        .unwrap();
        assert!(f[0].abs() > 1e-8);
    }

    #[test]
    fn field_zero_at_score_zero() {
        let s = sched();
        let target = bimodal();
        // symmetric point: score = 0 and x = 0, so the field vanishes
        let f = pf_ode_field(&target, &[0.0, 0.0], Timestep(700), &Prompt::unconditional(), &s)
            .unwrap();
        assert!(f[0].abs() < 1e-14 && f[1].abs() < 1e-14);
    }

    #[test]
    fn field_rejects_t_zero() {
        let s = sched();
        let target = bimodal();
        assert!(pf_ode_field(&target, &[0.0, 0.0], Timestep(0), &Prompt::unconditional(), &s)
            .is_err());
    }

    #[test]
    fn far_field_flows_toward_data() {
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        let x = vec![40.0, 35.0];
        // sign check against the analytic score: far out it points inward
        let score = target
            .perturbed_score(&x, Timestep(1000), &un, &s)
            .unwrap();
        assert!(crate::linalg::dot(&score, &x) < 0.0);
        // integrating to the origin lands much closer to the data region
        let end = integrate_pf_ode(
            &target,
            &x,
            Timestep(1000),
            Timestep(0),
            OdeMethod::adaptive_default(),
            &un,
            &s,
        )
        .unwrap();
        assert!(crate::linalg::norm(&end) < 0.75 * crate::linalg::norm(&x));
        assert!(end[0] > 0.0 && end[1] > 0.0);
    }

    #[test]
    fn integrate_identity_on_standard_normal() {
        let s = sched();
        let target = MixtureTarget::<f64>::standard_normal(2);
        let un = Prompt::unconditional();
        let x = vec![0.8, -1.7];
        let out = integrate_pf_ode(
            &target,
            &x,
            Timestep(900),
            Timestep(0),
            OdeMethod::adaptive_default(),
            &un,
            &s,
        )
        .unwrap();
        assert!(distance(&out, &x) < 1e-6);
    }

    #[test]
    fn adaptive_self_convergence() {
        // global error on a trajectory that skirts the basin boundary, where
        // local errors get amplified; bounds are measured with wide headroom.
        // |a6-a12| = 3.7e-4, |a9-a12| = 7.3e-5, |a10-a12| = 8.9e-6 measured.
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        let x_t = s.perturb(&[3.2, 0.5], Timestep(800), &[0.3, -0.4]).unwrap();
        let run = |tol: f64| {
            integrate_pf_ode(
                &target,
                &x_t,
                Timestep(800),
                Timestep(0),
                OdeMethod::Adaptive { tol },
                &un,
                &s,
            )
            .unwrap()
        };
        let a6 = run(1e-6);
        let a10 = run(1e-10);
        let a12 = run(1e-12);
        let coarse = distance(&a6, &a12);
        let fine = distance(&a10, &a12);
        assert!(coarse < 5e-3, "coarse convergence gap {coarse}");
        assert!(fine < 1e-4, "fine convergence gap {fine}");
        assert!(fine < 0.2 * coarse.max(1e-9));
    }

    #[test]
    fn crude_euler_differs_from_adaptive() {
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = target.sample(&mut rng);
        let eps = vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
        let x_t = s.perturb(&x0, Timestep(800), &eps).unwrap();
        let crude = integrate_pf_ode(
            &target,
            &x_t,
            Timestep(800),
            Timestep(0),
            OdeMethod::Euler { substeps: 1 },
            &un,
            &s,
        )
        .unwrap();
        let fine = integrate_pf_ode(
            &target,
            &x_t,
            Timestep(800),
            Timestep(0),
            OdeMethod::adaptive_default(),
            &un,
            &s,
        )
        .unwrap();
        assert!(distance(&crude, &fine) > 1e-2);
    }

    #[test]
    fn fixed_step_orders_on_gaussian() {
        // on a single Gaussian the flow is smooth; halving the step size
        // shrinks Heun error ~4x and classic Runge-Kutta error ~16x
        let s = sched();
        let target = single([1.5, -0.5], 0.7);
        let un = Prompt::unconditional();
        let x_t = s.perturb(&[3.1, 0.2], Timestep(400), &[0.5, -0.2]).unwrap();
        let reference = integrate_pf_ode(
            &target,
            &x_t,
            Timestep(400),
            Timestep(0),
            OdeMethod::Adaptive { tol: 1e-12 },
            &un,
            &s,
        )
        .unwrap();
        let err = |method: OdeMethod<f64>| {
            let got = integrate_pf_ode(
                &target,
                &x_t,
                Timestep(400),
                Timestep(0),
                method,
                &un,
                &s,
            )
            .unwrap();
            distance(&got, &reference)
        };
        // the schedule interpolation is C^1 only, so textbook orders hold
        // within cells; across refinements the errors still collapse. At
        // cell-aligned steps (substeps = span) the quartic term vanishes.
        let h_coarse = err(OdeMethod::Heun { substeps: 25 });
        let h_fine = err(OdeMethod::Heun { substeps: 400 });
        assert!(h_coarse > 5.0 * h_fine, "heun {h_coarse} vs {h_fine}");
        assert!(h_fine < 1e-4);
        let r_coarse = err(OdeMethod::Rk4 { substeps: 25 });
        let r_fine = err(OdeMethod::Rk4 { substeps: 400 });
        assert!(r_coarse > 5.0 * r_fine, "rk4 {r_coarse} vs {r_fine}");
        assert!(r_fine < 1e-8);
        assert!(err(OdeMethod::Euler { substeps: 4000 }) < 1e-3);
    }

    #[test]
    fn ddim_step_algebra() {
        let s = sched();
        let x_t = vec![1.3, -0.8];
        let t = Timestep(600);
        // s = 0 returns the origin prediction exactly
        let eps = vec![0.4, 0.9];
        let x0_hat = s.predict_origin(&x_t, t, &eps).unwrap();
        let stepped = ddim_step(&x_t, t, Timestep(0), &eps, &s).unwrap();
        assert!(distance(&stepped, &x0_hat) < 1e-14);
        // eps = 0 is a pure rescaling
        let zero = vec![0.0, 0.0];
        let stepped = ddim_step(&x_t, t, Timestep(200), &zero, &s).unwrap();
        let ratio = (s.alpha_bar(Timestep(200)) / s.alpha_bar(t)).sqrt();
        assert!((stepped[0] - ratio * x_t[0]).abs() < 1e-14);
        // ordering enforced
        assert!(ddim_step(&x_t, t, t, &eps, &s).is_err());
        assert!(ddim_invert_step(&x_t, t, Timestep(10), &eps, &s).is_err());
    }

    #[test]
    fn ddim_invert_identity_and_round_trip() {
        let s = sched();
        let x_s = vec![0.6, 1.1];
        let eps = vec![-0.3, 0.8];
        let same = ddim_invert_step(&x_s, Timestep(250), Timestep(250), &eps, &s).unwrap();
        assert!(distance(&same, &x_s) < 1e-12);
        let up = ddim_invert_step(&x_s, Timestep(250), Timestep(640), &eps, &s).unwrap();
        let back = ddim_step(&up, Timestep(640), Timestep(250), &eps, &s).unwrap();
        assert!(distance(&back, &x_s) < 1e-10);
    }

    #[test]
    fn two_ddim_steps_track_oracle_on_wide_gaussian() {
        // small timesteps and a wide component keep the frozen-eps jump close
        // to the true flow; measured headroom under the 1e-3 bound
        let s = sched();
        let target = single([1.5, -0.5], 3.0);
        let un = Prompt::unconditional();
        let x_t = s.perturb(&[2.0, 0.3], Timestep(40), &[0.4, -1.1]).unwrap();
        let e1 = target.eps_star(&x_t, Timestep(40), &un, &s).unwrap();
        let mid = ddim_step(&x_t, Timestep(40), Timestep(20), &e1, &s).unwrap();
        let e2 = target.eps_star(&mid, Timestep(20), &un, &s).unwrap();
        let end = ddim_step(&mid, Timestep(20), Timestep(0), &e2, &s).unwrap();
        let oracle = integrate_pf_ode(
            &target,
            &x_t,
            Timestep(40),
            Timestep(0),
            OdeMethod::adaptive_default(),
            &un,
            &s,
        )
        .unwrap();
        assert!(distance(&end, &oracle) < 1e-3);
    }

    #[test]
    fn sde_step_zero_score_zero_noise_is_rescaling() {
        // with a vanishing score and no sampled noise the step reduces to the
        // deterministic signal rescaling between the two timesteps
        struct NoNoise;
        impl rand::RngCore for NoNoise {
            fn next_u32(&mut self) -> u32 {
                unreachable!()
            }
            fn next_u64(&mut self) -> u64 {
                unreachable!()
            }
            fn fill_bytes(&mut self, _dest: &mut [u8]) {
                unreachable!()
            }
            fn try_fill_bytes(&mut self, _dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
                unreachable!()
            }
        }
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        // symmetric point: the score vanishes; zero out the diffusion by
        // stepping dt = 0 and checking the rescaling identity via dt = 1 with
        // a seeded rng replaced by explicit expectation below
        let x = vec![0.0, 0.0];
        let out = reverse_sde_step(&target, &x, Timestep(500), 0, &mut NoNoise, &un, &s).unwrap();
        assert_eq!(out, x);
        // at the symmetric point drift = 0, so only diffusion moves the state;
        // scale that by hand: y' = y + noise, x_s = sqrt(a_s) y'
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Timestep(500);
        let out = reverse_sde_step(&target, &x, t, 1, &mut rng, &un, &s).unwrap();
        let gg = s.gamma_dot_gamma(t);
        let noise_std = (2.0 * gg).sqrt();
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let expect: Vec<f64> = (0..2)
            .map(|_| s.sqrt_alpha_bar(Timestep(499)) * (noise_std * f64::std_normal(&mut rng2)))
            .collect();
        assert!(distance(&out, &expect) < 1e-14);
    }

    #[test]
    fn sde_noise_scales_with_sqrt_dt() {
        // halving dt from 2 to 1 scales the injected std by exactly 1/sqrt(2)
        // (the rate is frozen at t for a single step)
        let s = sched();
        let t = Timestep(800);
        let gg = s.gamma_dot_gamma(t);
        let v2 = 2.0 * gg * 2.0;
        let v1 = 2.0 * gg * 1.0;
        assert!(((v1 / v2).sqrt() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn sde_rejects_oversized_dt() {
        let s = sched();
        let target = bimodal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(reverse_sde_step(
            &target,
            &[0.0, 0.0],
            Timestep(5),
            6,
            &mut rng,
            &Prompt::unconditional(),
            &s
        )
        .is_err());
    }

    #[test]
    fn trajectory_validation() {
        let p1 = (Timestep(900), vec![0.0, 0.0]);
        let p2 = (Timestep(500), vec![1.0, 1.0]);
        let p3 = (Timestep(500), vec![2.0, 2.0]);
        assert!(Trajectory::new(vec![p1.clone()]).is_err());
        assert!(Trajectory::new(vec![p1.clone(), p2.clone(), p3]).is_err());
        assert!(Trajectory::new(vec![p1, p2]).is_ok());
    }

    #[test]
    fn sampled_trajectory_is_consistent() {
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        let x_top = s.perturb(&[3.0, 0.1], Timestep(900), &[0.2, -0.5]).unwrap();
        let stops: Vec<Timestep> = [900usize, 700, 500, 300, 100]
            .iter()
            .map(|&t| Timestep(t))
            .collect();
        let traj = sample_trajectory(&target, &x_top, &stops, 1e-10, &un, &s).unwrap();
        assert_eq!(traj.points().len(), 5);
        // integrating the first point directly to the last stop agrees with
        // the chained result
        let direct = integrate_pf_ode(
            &target,
            &x_top,
            Timestep(900),
            Timestep(100),
            OdeMethod::Adaptive { tol: 1e-10 },
            &un,
            &s,
        )
        .unwrap();
        assert!(distance(&direct, &traj.points()[4].1) < 1e-5);
    }
}
