//! Quick oracle/property suite behind `sdlab verify`: fast spot checks of the
//! core identities. The full acceptance suite lives in the test targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlab_core::consistency::{consistency_eval, ConsistencyFn};
use sdlab_core::guidance;
use sdlab_core::linalg::{distance, norm};
use sdlab_core::scalar::Scalar;
use sdlab_core::scene::Camera;
use sdlab_core::schedule::{build_schedule, NoiseSchedule, ScheduleKind, Timestep, Weighting};
use sdlab_core::scheduler::decreasing_timestep;
use sdlab_core::solvers::{ddim_invert_step, ddim_step};
use sdlab_core::target::{Component, MixtureTarget, Prompt};

fn check(name: &str, pass: bool, detail: String, failures: &mut usize) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        *failures += 1;
    }
}

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

pub fn run_all() -> usize {
    let mut failures = 0;
    let s = sched();
    let target = bimodal();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // schedule invariants
    let mut ok = (s.alpha_bar(Timestep(0)) - 1.0).abs() == 0.0;
    let mut prod = 1.0;
    for t in 1..=1000usize {
        prod *= 1.0 - s.beta(Timestep(t));
        let a = s.alpha_bar(Timestep(t));
        let sg = s.sigma(Timestep(t));
        ok &= (a - prod).abs() < 1e-12 && (sg * sg + a - 1.0).abs() < 1e-12;
    }
    check(
        "schedule invariants",
        ok,
        format!("alpha_bar[1000] = {:.6e}", s.alpha_bar(Timestep(1000))),
        &mut failures,
    );

    // score vs finite differences of the log density
    let un = Prompt::unconditional();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = vec![
            3.0 * f64::std_normal(&mut rng),
            3.0 * f64::std_normal(&mut rng),
        ];
        let t = 1 + (rng.gen::<u64>() % 1000) as usize;
        let score = target.perturbed_score(&x, Timestep(t), &un, &s).unwrap();
        for d in 0..2 {
            let h = 1e-5;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[d] += h;
            xm[d] -= h;
            let fd = (target.log_density_at(&xp, t as f64, &un, &s).unwrap()
                - target.log_density_at(&xm, t as f64, &un, &s).unwrap())
                / (2.0 * h);
            worst = worst.max((score[d] - fd).abs() / score[d].abs().max(1e-3));
        }
    }
    check(
        "analytic score vs central differences",
        worst < 1e-6,
        format!("worst relative error {worst:.3e}"),
        &mut failures,
    );

    // oracle identity on the standard normal
    let stdn = MixtureTarget::<f64>::standard_normal(2);
    let cf = ConsistencyFn::oracle(un.clone());
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let x = vec![f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
        let t = Timestep(1 + (rng.gen::<u64>() % 1000) as usize);
        let out = consistency_eval(&cf, &stdn, &x, t, &s).unwrap();
        worst = worst.max(distance(&out, &x));
    }
    check(
        "oracle consistency identity",
        worst < 1e-6,
        format!("max deviation {worst:.3e}"),
        &mut failures,
    );

    // deterministic inversion round trip with stored predictions
    let x0 = target.sample(&mut rng);
    let mut x = x0.clone();
    let mut chain = Vec::new();
    let mut cur = 0usize;
    while cur < 980 {
        let e = target.eps_star(&x, Timestep(cur), &un, &s).unwrap();
        x = ddim_invert_step(&x, Timestep(cur), Timestep(cur + 20), &e, &s).unwrap();
        chain.push(e);
        cur += 20;
    }
    while cur > 0 {
        let e = chain.pop().unwrap();
        x = ddim_step(&x, Timestep(cur), Timestep(cur - 20), &e, &s).unwrap();
        cur -= 20;
    }
    let err = distance(&x, &x0);
    check(
        "inversion round trip",
        err < 1e-4,
        format!("endpoint error {err:.3e}"),
        &mut failures,
    );

    // decreasing-schedule endpoints
    let ok = decreasing_timestep(Timestep(980), Timestep(350), 0, 1000, 1000) == Timestep(980)
        && decreasing_timestep(Timestep(980), Timestep(350), 1000, 1000, 1000) == Timestep(350)
        && decreasing_timestep(Timestep(980), Timestep(350), 250, 1000, 1000) == Timestep(665);
    check(
        "timestep formula endpoints",
        ok,
        "980 / 350 / midpoint 665".into(),
        &mut failures,
    );

    // chain rule vs finite differences
    let cam = Camera::<f64>::random(0, 3, &mut rng);
    let p0: Vec<f64> = (0..3).map(|_| f64::std_normal(&mut rng)).collect();
    let g: Vec<f64> = (0..3).map(|_| f64::std_normal(&mut rng)).collect();
    let rendered = cam.rotation().mul_vec(&p0).unwrap();
    let y: Vec<f64> = rendered.iter().zip(&g).map(|(r, gi)| r - gi).collect();
    let loss = |p: &[f64]| {
        let r = cam.rotation().mul_vec(p).unwrap();
        0.5 * r.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
    };
    let analytic = cam.rotation().tr_mul_vec(&g).unwrap();
    let mut worst: f64 = 0.0;
    for d in 0..3 {
        let h = 1e-5;
        let mut pp = p0.clone();
        let mut pm = p0.clone();
        pp[d] += h;
        pm[d] -= h;
        let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
        worst = worst.max((fd - analytic[d]).abs() / analytic[d].abs().max(1e-2));
    }
    check(
        "renderer chain rule",
        worst < 1e-5,
        format!("worst relative error {worst:.3e}"),
        &mut failures,
    );

    // single-particle reduction
    let prompt = Prompt::select(vec![1], 7.5).unwrap();
    let x0 = vec![1.1, -0.3];
    let eps = vec![0.2, 0.9];
    let a = guidance::sds_ddpm(&target, &x0, Timestep(500), &eps, &prompt, &s, Weighting::One)
        .unwrap();
    let b = guidance::vsd(
        &target,
        &x0,
        Timestep(500),
        &eps,
        &prompt,
        &[x0.clone()],
        &s,
        Weighting::One,
    )
    .unwrap();
    check(
        "single-particle reduction",
        a.pixel_gradient == b.pixel_gradient && a.eps_hat == b.eps_hat,
        format!("|residual| = {:.4}", norm(&a.pixel_gradient)),
        &mut failures,
    );

    failures
}
