use sdlab_core::consistency::*;
use sdlab_core::guidance::*;
use sdlab_core::linalg::*;
use sdlab_core::scalar::Scalar;
use sdlab_core::schedule::*;
use sdlab_core::solvers::*;
use sdlab_core::target::*;

fn sched() -> NoiseSchedule<f64> { build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap() }
fn bimodal() -> MixtureTarget<f64> {
    MixtureTarget::new(2, vec![
        Component { weight: 0.5, mean: vec![-3.0, 0.0], cov_scale: 0.5 },
        Component { weight: 0.5, mean: vec![3.0, 0.0], cov_scale: 0.5 },
    ]).unwrap()
}
fn single(mean: [f64; 2], c: f64) -> MixtureTarget<f64> {
    MixtureTarget::new(2, vec![Component { weight: 1.0, mean: mean.to_vec(), cov_scale: c }]).unwrap()
}

fn main() {
    let s = sched();
    let un = Prompt::<f64>::unconditional();
    let target = bimodal();

    // far field
    let x = vec![40.0, 35.0];
    let f = pf_ode_field(&target, &x, Timestep(1000), &un, &s).unwrap();
    println!("far field f = {f:?}, dot(f,x) = {}", dot(&f, &x));
    let back = integrate_pf_ode(&target, &x, Timestep(1000), Timestep(800), OdeMethod::adaptive_default(), &un, &s).unwrap();
    println!("norm 1000: {} -> 800: {}", norm(&x), norm(&back));

    // self convergence
    let x_t = s.perturb(&[3.2, 0.5], Timestep(800), &[0.3, -0.4]).unwrap();
    let run = |tol: f64| integrate_pf_ode(&target, &x_t, Timestep(800), Timestep(0), OdeMethod::Adaptive { tol }, &un, &s).unwrap();
    let a6 = run(1e-6); let a8 = run(1e-8); let a9 = run(1e-9); let a10 = run(1e-10); let a12 = run(1e-12);
    println!("conv: |a6-a12|={:.3e} |a8-a12|={:.3e} |a9-a12|={:.3e} |a10-a12|={:.3e}",
        distance(&a6,&a12), distance(&a8,&a12), distance(&a9,&a12), distance(&a10,&a12));

    // heun/rk4 vs adaptive
    let x_t2 = s.perturb(&[3.1, 0.2], Timestep(400), &[0.5, -0.2]).unwrap();
    let rf = integrate_pf_ode(&target, &x_t2, Timestep(400), Timestep(0), OdeMethod::adaptive_default(), &un, &s).unwrap();
    for (name, m) in [("heun400", OdeMethod::Heun { substeps: 400 }), ("heun2000", OdeMethod::Heun { substeps: 2000 }), ("rk4_100", OdeMethod::Rk4 { substeps: 100 }), ("rk4_400", OdeMethod::Rk4 { substeps: 400 }), ("euler4000", OdeMethod::Euler { substeps: 4000 })] {
        let got = integrate_pf_ode(&target, &x_t2, Timestep(400), Timestep(0), m, &un, &s).unwrap();
        println!("{name}: {:.3e}", distance(&got, &rf));
    }

    // chained trajectory vs direct
    let x_top = s.perturb(&[3.0, 0.1], Timestep(900), &[0.2, -0.5]).unwrap();
    let stops: Vec<Timestep> = [900usize, 700, 500, 300, 100].iter().map(|&t| Timestep(t)).collect();
    let traj = sample_trajectory(&target, &x_top, &stops, 1e-10, &un, &s).unwrap();
    let direct = integrate_pf_ode(&target, &x_top, Timestep(900), Timestep(100), OdeMethod::Adaptive { tol: 1e-10 }, &un, &s).unwrap();
    println!("chained vs direct @100: {:.3e}", distance(&direct, &traj.points()[4].1));

    // two ddim steps vs oracle, wide gaussian
    for c in [0.7, 1.0, 2.0, 3.0] {
        let g1 = single([1.5, -0.5], c);
        let x_t = s.perturb(&[2.0, 0.3], Timestep(40), &[0.4, -1.1]).unwrap();
        let e1 = g1.eps_star(&x_t, Timestep(40), &un, &s).unwrap();
        let mid = ddim_step(&x_t, Timestep(40), Timestep(20), &e1, &s).unwrap();
        let e2 = g1.eps_star(&mid, Timestep(20), &un, &s).unwrap();
        let end = ddim_step(&mid, Timestep(20), Timestep(0), &e2, &s).unwrap();
        let oracle = integrate_pf_ode(&g1, &x_t, Timestep(40), Timestep(0), OdeMethod::adaptive_default(), &un, &s).unwrap();
        println!("ddim 40/20 c={c}: {:.3e}", distance(&end, &oracle));
    }

    // lcm gradient at tiny s (x0 at mode mean)
    let tm = single([3.0, 0.0], 0.5);
    let cf = ConsistencyFn::oracle(un.clone());
    for t in [20usize, 5, 1] {
        let g = sds_lcm(&tm, &[3.0, 0.0], Timestep(t), &[0.4, -0.2], &cf, &s, Weighting::One).unwrap();
        let gs = sds_lcm(&tm, &[3.0, 0.0], Timestep(t), &[0.4, -0.2], &cf, &s, Weighting::SigmaSquared).unwrap();
        let gap = distance(&g.x0_hat, &[3.0 * s.sqrt_alpha_bar(Timestep(t)) / s.sqrt_alpha_bar(Timestep(t)), 0.0]);
        println!("lcm tiny s={t}: |grad|={:.4} |sigma2 grad|={:.5} |x0h-x0|={:.4e}", norm(&g.pixel_gradient), norm(&gs.pixel_gradient), gap);
    }

    // ism shrinking interval at fixed t
    for (t, d) in [(40usize, 20usize), (40, 10), (40, 5), (40, 1)] {
        let full = Prompt::select(vec![0, 1], 7.5).unwrap();
        let g = ism(&target, &[0.4, -0.2], Timestep(t), d, &full, &s, Weighting::One).unwrap();
        println!("ism t={t} d={d}: |grad| = {:.4e}", norm(&g.pixel_gradient));
    }
}
