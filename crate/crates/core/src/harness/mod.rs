//! Experiment runner: the full optimization loop, metrics, persistence.
//!
//! One run is fully determined by its configuration: camera, noise and
//! initialization randomness come from fixed, purpose-separated streams of
//! the run seed, so sweeps that vary only the estimator share identical
//! streams and differences are attributable to the estimator alone.

pub mod config;
pub mod record;

pub use config::ExperimentConfig;
pub use record::{emit, load_record, EmitFormat, FinalMetrics, IterRow, RunRecord};

use crate::consistency::ConsistencyFn;
use crate::error::{Error, Result};
use crate::guidance::{self, EstimatorKind, GuidanceEstimate};
use crate::linalg::{distance, norm};

use crate::scene::{apply_guidance, render, Camera, OptimMethod, OptimState, SceneParams};
use crate::schedule::{build_schedule, NoiseSchedule, Timestep};
use crate::scheduler::{noise_for, paired_timestep, phase_of, timestep_at, Phase, PhasePlan};
use crate::target::{Component, MixtureTarget, Prompt};
use config::{CameraKind, InitKind, OptimKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

// stream indices for the purpose-separated rng streams of one run seed
const STREAM_CAMERA_SET: u64 = 1;
const STREAM_CAMERA_DRAW: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_INIT: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn build_target(cfg: &ExperimentConfig) -> Result<MixtureTarget<f64>> {
    let components = cfg
        .target
        .components
        .iter()
        .map(|c| Component {
            weight: c.weight,
            mean: c.mean.clone(),
            cov_scale: c.cov_scale,
        })
        .collect();
    MixtureTarget::new(cfg.target.dim, components)
}

pub fn build_prompt(cfg: &ExperimentConfig) -> Result<Prompt<f64>> {
    let p = cfg.active_prompt()?;
    match &p.selected {
        None => Ok(Prompt::unconditional()),
        Some(idx) => Prompt::select(idx.clone(), p.cfg_scale),
    }
}

pub fn build_plan(cfg: &ExperimentConfig) -> Result<PhasePlan> {
    let plan = PhasePlan {
        n_total: cfg.plan.n_total,
        cut_iter: cfg.plan.cut_iter,
        t_cut: Timestep(cfg.plan.t_cut),
        t_geo_max: Timestep(cfg.plan.geo_max),
        t_app_min: Timestep(cfg.plan.app_min),
        k_max: cfg.schedule.steps,
        noise: cfg.plan.noise,
    };
    if cfg.plan.n_total > 0 {
        plan.validate()?;
    }
    Ok(plan)
}

pub fn build_schedule_from(cfg: &ExperimentConfig) -> Result<NoiseSchedule<f64>> {
    build_schedule(
        cfg.schedule.kind,
        cfg.schedule.steps,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
    )
}

fn build_cameras(cfg: &ExperimentConfig, dim: usize, seed: u64) -> Result<Vec<Camera<f64>>> {
    match cfg.cameras.kind {
        CameraKind::Identity => Ok(vec![Camera::identity(dim)]),
        CameraKind::Random => {
            if cfg.cameras.count == 0 {
                return Err(Error::Config("camera count must be >= 1".into()));
            }
            let mut rng = stream_rng(seed, STREAM_CAMERA_SET);
            Ok((0..cfg.cameras.count)
                .map(|i| Camera::random(i as u64, dim, &mut rng))
                .collect())
        }
    }
}

fn build_scene(cfg: &ExperimentConfig, seed: u64) -> Result<SceneParams<f64>> {
    let dim = cfg.target.dim;
    crate::linalg::check_dim(&cfg.scene.init.center, dim)?;
    match cfg.scene.init.kind {
        InitKind::Point => {
            SceneParams::new(vec![cfg.scene.init.center.clone(); cfg.scene.particles])
        }
        InitKind::Cloud => {
            let mut rng = stream_rng(seed, STREAM_INIT);
            SceneParams::cloud(
                &cfg.scene.init.center,
                cfg.scene.init.spread,
                cfg.scene.particles,
                &mut rng,
            )
        }
    }
}

fn build_optimizer(cfg: &ExperimentConfig, particles: usize, dim: usize) -> Result<OptimState<f64>> {
    let method = match cfg.optimizer.method {
        OptimKind::Sgd => OptimMethod::Sgd,
        OptimKind::Adam => OptimMethod::Adam {
            beta1: cfg.optimizer.beta1,
            beta2: cfg.optimizer.beta2,
            eps: cfg.optimizer.adam_eps,
        },
    };
    OptimState::new(method, cfg.optimizer.learning_rate, particles, dim)
}

/// Aligns a scheduler timestep onto the inversion grid: the nearest multiple
/// of `delta` that is at least `2 delta` and at most `K`.
fn align_to_interval(s: usize, delta: usize, k_max: usize) -> Result<usize> {
    if delta == 0 || k_max / delta < 2 {
        return Err(Error::Config(format!(
            "delta_t {delta} too large for schedule with K = {k_max}"
        )));
    }
    let m = ((s as f64 / delta as f64).round() as usize)
        .max(2)
        .min(k_max / delta);
    Ok(m * delta)
}

/// Distance from one particle to the nearest selected component mean.
fn particle_mode_distance(
    particle: &[f64],
    target: &MixtureTarget<f64>,
    prompt: &Prompt<f64>,
) -> Result<f64> {
    let means = target.selected_means(prompt)?;
    Ok(means
        .iter()
        .map(|m| distance(particle, m))
        .fold(f64::INFINITY, f64::min))
}

/// Mean over particles of the distance to the nearest selected mean.
pub fn mode_distance(
    theta: &SceneParams<f64>,
    target: &MixtureTarget<f64>,
    prompt: &Prompt<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    for p in theta.particles() {
        total += particle_mode_distance(p, target, prompt)?;
    }
    Ok(total / theta.len() as f64)
}

/// Mean sliding-window trace variance of the per-particle origin-prediction
/// traces.
pub fn guidance_variance(record: &RunRecord, window: usize) -> Result<f64> {
    guidance_variance_rows(&record.rows, record.config.scene.particles.max(1), window)
}

fn guidance_variance_rows(rows: &[IterRow], particles: usize, window: usize) -> Result<f64> {
    if window < 2 {
        return Err(Error::RecordTooShort {
            rows: rows.len(),
            window,
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for p in 0..particles {
        let series: Vec<Vec<f64>> = rows
            .iter()
            .filter(|r| r.particle == p)
            .map(|r| r.x0_hat.clone())
            .collect();
        match crate::stats::sliding_window_trace_variance(&series, window) {
            Some(v) => {
                total += v;
                counted += 1;
            }
            None => {
                return Err(Error::RecordTooShort {
                    rows: series.len(),
                    window,
                })
            }
        }
    }
    Ok(total / counted as f64)
}

/// Mean origin drift over the final 10% of iterations.
fn consistency_gap(rows: &[IterRow], n_total: usize) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let cutoff = n_total.saturating_sub(n_total.div_ceil(10));
    let tail: Vec<f64> = rows
        .iter()
        .filter(|r| r.iter >= cutoff)
        .map(|r| r.x0_drift)
        .collect();
    if tail.is_empty() {
        0.0
    } else {
        crate::stats::mean(&tail)
    }
}

/// Executes one experiment. Deterministic given the configuration; on a
/// non-finite state the partial record is returned with the failure flag set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let start = Instant::now();
    let sched = build_schedule_from(cfg)?;
    let target = build_target(cfg)?;
    let prompt = build_prompt(cfg)?;
    let plan = build_plan(cfg)?;
    let cf = ConsistencyFn::new(cfg.estimator.fidelity, prompt.plain())?;
    let omega = cfg.estimator.omega;
    let seed = cfg.run.seed;
    let dim = target.dim();

    let cameras = build_cameras(cfg, dim, seed)?;
    let mut theta = build_scene(cfg, seed)?;
    let mut opt = build_optimizer(cfg, theta.len(), dim)?;
    let mut cam_draw = stream_rng(seed, STREAM_CAMERA_DRAW);
    let mut noise_rng = stream_rng(seed, STREAM_NOISE);

    let lr0 = cfg.optimizer.learning_rate;
    let lr_frac = cfg.optimizer.lr_final_frac.clamp(0.0, 1.0);
    let n_total = plan.n_total;
    let mut rows: Vec<IterRow> = Vec::with_capacity(n_total * theta.len());
    let mut failure: Option<String> = None;

    'outer: for iter in 0..n_total {
        let phase = phase_of(&plan, iter)?;
        let s = timestep_at(&plan, iter)?;
        let t_pair = paired_timestep(&plan, s);
        if n_total > 1 && lr_frac < 1.0 {
            let progress = iter as f64 / (n_total - 1) as f64;
            opt.set_learning_rate(lr0 * (1.0 - (1.0 - lr_frac) * progress))?;
        }
        let eps: Vec<f64> = noise_for(&plan, iter, dim, &mut noise_rng);
        for p_idx in 0..theta.len() {
            let cam = &cameras[cam_draw.gen_range(0..cameras.len())];
            let step = evaluate_step(
                cfg, &target, &prompt, &cf, &sched, &plan, cam, &theta, p_idx, phase, s, t_pair,
                &eps, omega,
            );
            let (est, t_used) = match step {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(format!("iteration {iter}, particle {p_idx}: {e}"));
                    break 'outer;
                }
            };
            let x0_render = render(&theta, p_idx, cam)?;
            let x0_drift = distance(&est.x0_hat, &x0_render);
            let x0_hat_param = cam.rotation().tr_mul_vec(&est.x0_hat)?;
            if let Err(e) = apply_guidance(&mut theta, p_idx, cam, &est, &mut opt) {
                failure = Some(format!("iteration {iter}, particle {p_idx}: {e}"));
                break 'outer;
            }
            let mode_dist = particle_mode_distance(theta.particle(p_idx)?, &target, &prompt)?;
            rows.push(IterRow {
                iter,
                particle: p_idx,
                phase,
                s: s.get(),
                t: t_used,
                estimator: cfg.estimator.kind,
                grad_norm: norm(&est.pixel_gradient),
                x0_drift,
                mode_dist,
                x0_hat: x0_hat_param,
            });
        }
    }

    let final_mode = mode_distance(&theta, &target, &prompt)?;
    let metrics = FinalMetrics {
        mode_distance: final_mode,
        guidance_variance: guidance_variance_rows(&rows, theta.len(), cfg.run.variance_window)
            .ok(),
        consistency_gap: consistency_gap(&rows, n_total),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunRecord {
        config_hash: record::config_hash(cfg)?,
        config: cfg.clone(),
        rows,
        metrics,
        failure,
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_step(
    cfg: &ExperimentConfig,
    target: &MixtureTarget<f64>,
    prompt: &Prompt<f64>,
    cf: &ConsistencyFn<f64>,
    sched: &NoiseSchedule<f64>,
    plan: &PhasePlan,
    cam: &Camera<f64>,
    theta: &SceneParams<f64>,
    p_idx: usize,
    phase: Phase,
    s: Timestep,
    t_pair: Timestep,
    eps: &[f64],
    omega: crate::schedule::Weighting,
) -> Result<(GuidanceEstimate<f64>, usize)> {
    // condition the guidance on the camera-rotated target so the optimum in
    // parameter space is camera independent
    let cam_target = target.pushforward(cam.rotation())?;
    let x0 = render(theta, p_idx, cam)?;
    let x0 = if cfg.schedule.perturb == crate::schedule::PerturbForm::Unscaled {
        // the unscaled comparison form changes only the perturbation. Applied
        // here by pre-dividing, so estimators see x_s = x0 + sigma eps.
        let inv = 1.0 / sched.sqrt_alpha_bar(s);
        x0.iter().map(|v| v * inv).collect()
    } else {
        x0
    };
    match cfg.estimator.kind {
        EstimatorKind::SdsDdpm => {
            let est = guidance::sds_ddpm(&cam_target, &x0, s, eps, prompt, sched, omega)?;
            Ok((est, s.get()))
        }
        EstimatorKind::SdsLcm => {
            let est = guidance::sds_lcm(&cam_target, &x0, s, eps, cf, sched, omega)?;
            Ok((est, s.get()))
        }
        EstimatorKind::SdsLcmGc => {
            // calibrated guidance applies in the appearance phase only
            if phase == Phase::Geometry || t_pair.get() <= s.get() {
                let est = guidance::sds_lcm(&cam_target, &x0, s, eps, cf, sched, omega)?;
                Ok((est, s.get()))
            } else {
                let est =
                    guidance::sds_lcm_gc(&cam_target, &x0, s, t_pair, eps, cf, sched, omega)?;
                Ok((est, t_pair.get()))
            }
        }
        EstimatorKind::Ism => {
            let t_ism = align_to_interval(s.get(), cfg.estimator.delta_t, plan.k_max)?;
            let est = guidance::ism(
                &cam_target,
                &x0,
                Timestep(t_ism),
                cfg.estimator.delta_t,
                prompt,
                sched,
                omega,
            )?;
            Ok((est, t_ism))
        }
        EstimatorKind::Vsd => {
            let renders: Vec<Vec<f64>> = (0..theta.len())
                .map(|i| render(theta, i, cam))
                .collect::<Result<_>>()?;
            let est = guidance::vsd(&cam_target, &x0, s, eps, prompt, &renders, sched, omega)?;
            Ok((est, s.get()))
        }
    }
}

/// Runs `trials` copies with per-trial seeds `seed + i`.
pub fn run_trials(cfg: &ExperimentConfig, trials: usize) -> Result<Vec<RunRecord>> {
    (0..trials)
        .map(|i| {
            let mut c = cfg.clone();
            c.run.seed = cfg.run.seed.wrapping_add(i as u64);
            run(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.plan.n_total = 30;
        cfg.plan.cut_iter = 10;
        cfg.scene.particles = 3;
        cfg.run.variance_window = 5;
        cfg
    }

    #[test]
    fn zero_iterations_gives_empty_rows() {
        let mut cfg = tiny_config();
        cfg.plan.n_total = 0;
        cfg.plan.cut_iter = 0;
        let rec = run(&cfg).unwrap();
        assert!(rec.rows.is_empty());
        assert!(rec.failure.is_none());
        assert!(rec.metrics.mode_distance > 0.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny_config();
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(a.rows.len(), 30 * 3);
        let mut cfg2 = cfg.clone();
        cfg2.run.seed += 1;
        let c = run(&cfg2).unwrap();
        assert!(!a.same_outcome(&c));
    }

    #[test]
    fn estimators_share_streams() {
        // the camera/noise stream consumption must not depend on the
        // estimator, so the first iteration's s/t values and camera draws
        // line up across estimator sweeps
        let base = tiny_config();
        let mut records = Vec::new();
        for kind in [
            EstimatorKind::SdsDdpm,
            EstimatorKind::SdsLcm,
            EstimatorKind::SdsLcmGc,
            EstimatorKind::Vsd,
        ] {
            let mut cfg = base.clone();
            cfg.estimator.kind = kind;
            records.push(run(&cfg).unwrap());
        }
        for r in &records[1..] {
            for (a, b) in records[0].rows.iter().zip(&r.rows) {
                assert_eq!(a.s, b.s);
                assert_eq!(a.iter, b.iter);
                assert_eq!(a.particle, b.particle);
            }
        }
    }

    #[test]
    fn all_estimators_run() {
        for kind in [
            EstimatorKind::SdsDdpm,
            EstimatorKind::SdsLcm,
            EstimatorKind::SdsLcmGc,
            EstimatorKind::Ism,
            EstimatorKind::Vsd,
        ] {
            let mut cfg = tiny_config();
            cfg.estimator.kind = kind;
            let rec = run(&cfg).unwrap();
            assert!(rec.failure.is_none(), "{kind} failed: {:?}", rec.failure);
            assert_eq!(rec.rows.len(), 30 * 3);
            assert!(rec.rows.iter().all(|r| r.grad_norm.is_finite()));
        }
    }

    #[test]
    fn ism_alignment() {
        assert_eq!(align_to_interval(350, 20, 1000).unwrap(), 360);
        assert_eq!(align_to_interval(5, 20, 1000).unwrap(), 40);
        assert_eq!(align_to_interval(995, 20, 1000).unwrap(), 1000);
        assert!(align_to_interval(350, 600, 1000).is_err());
    }

    #[test]
    fn mode_distance_examples() {
        let target = build_target(&ExperimentConfig::desk()).unwrap();
        let prompt = build_prompt(&ExperimentConfig::desk()).unwrap();
        // particle exactly at the selected mean
        let theta = SceneParams::new(vec![vec![3.0, 0.0]]).unwrap();
        assert_eq!(mode_distance(&theta, &target, &prompt).unwrap(), 0.0);
        // particle at the unselected mean: distance to the selected one
        let theta = SceneParams::new(vec![vec![-3.0, 0.0]]).unwrap();
        assert_eq!(mode_distance(&theta, &target, &prompt).unwrap(), 6.0);
        // brute-force oracle over a grid of particles
        let grid: Vec<Vec<f64>> = (0..25)
            .map(|i| vec![-6.0 + 0.5 * i as f64, 1.0])
            .collect();
        let theta = SceneParams::new(grid.clone()).unwrap();
        let got = mode_distance(&theta, &target, &prompt).unwrap();
        let mut expect = 0.0;
        for p in &grid {
            let mut best = f64::INFINITY;
            for m in [[3.0, 0.0]] {
                let d = ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt();
                if d < best {
                    best = d;
                }
            }
            expect += best;
        }
        expect /= grid.len() as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn guidance_variance_synthetic_traces() {
        // constant trace has zero variance; an i.i.d. normal trace has trace
        // variance close to the dimension
        let mut rec = run(&{
            let mut c = tiny_config();
            c.plan.n_total = 0;
            c.plan.cut_iter = 0;
            c.scene.particles = 1;
            c
        })
        .unwrap();
        for i in 0..200usize {
            rec.rows.push(IterRow {
                iter: i,
                particle: 0,
                phase: Phase::Appearance,
                s: 100,
                t: 200,
                estimator: EstimatorKind::SdsLcm,
                grad_norm: 0.0,
                x0_drift: 0.0,
                mode_dist: 0.0,
                x0_hat: vec![1.0, -1.0],
            });
        }
        rec.config.scene.particles = 1;
        assert!(guidance_variance(&rec, 10).unwrap() < 1e-15);
        assert!(guidance_variance(&rec, 1).is_err());
        assert!(guidance_variance(&rec, 500).is_err());
    }

    #[test]
    fn record_emits_all_formats() {
        let cfg = tiny_config();
        let rec = run(&cfg).unwrap();
        let dir = std::env::temp_dir().join("sdlab-test-emit");
        emit(&rec, EmitFormat::Csv, dir.join("r.csv")).unwrap();
        emit(&rec, EmitFormat::Json, dir.join("r.json")).unwrap();
        emit(&rec, EmitFormat::Svg, dir.join("r.svg")).unwrap();
        let back = load_record(dir.join("r.json")).unwrap();
        assert!(rec.same_outcome(&back));
        let csv = std::fs::read_to_string(dir.join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + rec.rows.len());
    }
}
