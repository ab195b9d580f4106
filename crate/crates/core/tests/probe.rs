use plcert::analysis::{case_transitions, default_fit_window, rate_fit};
use plcert::oracle::{GradientOracle, NoiseModel, RngStream};
use plcert::optimizers::{run, Beta1Schedule, DenominatorTiming, Method, MethodConfig};
use plcert::problems::Problem;
use std::time::Instant;

fn spectrum_problem() -> Problem {
    let eigs: Vec<f64> = (0..20).map(|i| 1.0 + 99.0 * i as f64 / 19.0).collect();
    Problem::quadratic(&eigs, &vec![0.0; 20]).unwrap()
}

#[test]
fn probe_c1() {
    let p = spectrum_problem();
    let eps = 0.5;
    let h = 0.9 * (2.0 * eps * eps / p.smoothness()).min(1.0 / (2.0 * p.pl_constant()));
    println!("C1 h = {h}");
    let cfg = MethodConfig::new(
        Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PostUpdate },
        h,
        eps,
    )
    .unwrap();
    let t0 = Instant::now();
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed);
        let x0 = rng.vector_in_box(20, -1.0, 1.0);
        let t = run(&p, &GradientOracle::Deterministic, &cfg, 100_000, 1e-14, &x0, &mut rng).unwrap();
        let case = case_transitions(&t, eps);
        let (a, b) = default_fit_window(&t, &case, 1e-14);
        let r = rate_fit(&t, a, b).unwrap();
        println!(
            "C1 seed {seed}: rows {}, class {:?}, T {:?}, fit_start {}, rho {:.6}, R2 {:.6}, maxratio {:.6}, B {:.3}",
            t.len(), case.classification, case.transition, case.fit_start(), r.rho_hat, r.r_squared, r.max_step_ratio, case.denominator_bound
        );
    }
    println!("C1 elapsed {:?}", t0.elapsed());
}

#[test]
fn probe_c2a() {
    let p = spectrum_problem();
    let eps = 0.9;
    let h = 0.9 * (2.0 * eps * eps / p.smoothness()).min(1.0 / (2.0 * p.pl_constant()));
    let cfg = MethodConfig::new(
        Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PostUpdate },
        h,
        eps,
    )
    .unwrap();
    let mut rng = RngStream::new(0);
    let x0 = vec![1.0; 20];
    let t = run(&p, &GradientOracle::Deterministic, &cfg, 100_000, 1e-14, &x0, &mut rng).unwrap();
    let case = case_transitions(&t, eps);
    println!(
        "C2a: rows {}, class {:?}, T {:?}, thr {}",
        t.len(), case.classification, case.transition, case.threshold
    );
}

#[test]
fn probe_c2b() {
    let p = Problem::quadratic(&[1.0, 4.0], &[0.0, 0.0]).unwrap();
    let eps = 0.1;
    let h = 0.9 * (2.0 * eps * eps / p.smoothness()).min(1.0 / (2.0 * p.pl_constant()));
    let cfg = MethodConfig::new(
        Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PostUpdate },
        h,
        eps,
    )
    .unwrap();
    let mut rng = RngStream::new(0);
    let t = run(&p, &GradientOracle::Deterministic, &cfg, 10_000, 1e-14, &[0.01, 0.01], &mut rng).unwrap();
    let case = case_transitions(&t, eps);
    let max_ratio = t.rows.windows(2).map(|w| w[1].gap / w[0].gap).fold(f64::NEG_INFINITY, f64::max);
    println!(
        "C2b: rows {}, class {:?}, acc_max_end {:.3e}, thr {}, max_ratio {}",
        t.len(), case.classification, t.rows.last().unwrap().acc_max, case.threshold, max_ratio
    );
}

#[test]
fn probe_c3() {
    let p = spectrum_problem();
    let eps = 0.5;
    let mut h = 2.0 * eps * eps / p.smoothness();
    for halving in 0..12 {
        let cfg = MethodConfig::new(
            Method::Adam {
                variant: plcert::optimizers::AdamVariant::Adam,
                beta1: Beta1Schedule::Theory { gamma: 0.5 },
                beta2: 0.999,
                bias_correction: false,
            },
            h,
            eps,
        )
        .unwrap();
        let mut ok = true;
        let mut summary = String::new();
        for seed in 0..5u64 {
            let mut rng = RngStream::new(seed);
            let x0 = rng.vector_in_box(20, -1.0, 1.0);
            let t = run(&p, &GradientOracle::Deterministic, &cfg, 100_000, 1e-30, &x0, &mut rng).unwrap();
            let monotone = t.rows.windows(2).skip(10).all(|w| w[1].gap <= w[0].gap);
            if t.diverged || !monotone {
                ok = false;
                summary = format!("seed {seed} diverged={} monotone={}", t.diverged, monotone);
                break;
            }
            let case = case_transitions(&t, eps);
            let (a, b) = default_fit_window(&t, &case, 1e-30);
            match rate_fit(&t, a, b) {
                Ok(r) => summary.push_str(&format!(
                    " s{seed}:rows {} rho {:.6} R2 {:.5};",
                    t.len(), r.rho_hat, r.r_squared
                )),
                Err(e) => {
                    ok = false;
                    summary = format!("seed {seed} fit error {e}");
                    break;
                }
            }
        }
        println!("C3 halving {halving} h={h:.6e} ok={ok} {summary}");
        if ok {
            break;
        }
        h *= 0.5;
    }
}

#[test]
fn probe_c6() {
    let p = Problem::quadratic(&[1.0, 4.0], &[0.0, 0.0]).unwrap();
    let eps = 0.5;
    let t0 = Instant::now();
    for h in [0.04, 0.02] {
        let cfg_st = MethodConfig::new(
            Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PreUpdate },
            h,
            eps,
        )
        .unwrap();
        let model = NoiseModel::new(vec![1e-4, 1e-4], vec![0.0, 0.0]).unwrap();
        let oracle = GradientOracle::SyntheticNoise { model: model.clone(), batch: 1 };
        let mut tail_means = Vec::new();
        let mut b_max: f64 = 0.0;
        for seed in 0..20u64 {
            let mut rng = RngStream::new(seed);
            let t = run(&p, &oracle, &cfg_st, 100_000, 0.0, &[1.0, 1.0], &mut rng).unwrap();
            let n = t.rows.len();
            let tail = &t.rows[n - 20_000..];
            tail_means.push(tail.iter().map(|r| r.gap).sum::<f64>() / tail.len() as f64);
            let case = case_transitions(&t, eps);
            b_max = b_max.max(case.denominator_bound);
        }
        let mean: f64 = tail_means.iter().sum::<f64>() / tail_means.len() as f64;
        // matched deterministic run
        let cfg_det = MethodConfig::new(
            Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PostUpdate },
            h,
            eps,
        )
        .unwrap();
        let mut rng = RngStream::new(0);
        let td = run(&p, &GradientOracle::Deterministic, &cfg_det, 100_000, 1e-14, &[1.0, 1.0], &mut rng).unwrap();
        let cased = case_transitions(&td, eps);
        let (a, b) = default_fit_window(&td, &cased, 1e-14);
        let r = rate_fit(&td, a, b).unwrap();
        let omega = p.smoothness() * model.m_noise() * 2.0 * h * h / (2.0 * b_max);
        println!(
            "C6 h={h}: mean tail {mean:.4e}, B {b_max:.2}, det rows {}, rho {:.6}, omega {omega:.3e}, bound {:.3e}",
            td.len(), r.rho_hat, omega / (1.0 - r.rho_hat)
        );
    }
    println!("C6 elapsed {:?}", t0.elapsed());
}

#[test]
fn probe_c8() {
    let p = Problem::sin_pl();
    let eps = 0.5;
    let h = 0.9 * (2.0 * eps * eps / p.smoothness()).min(1.0 / (2.0 * p.pl_constant()));
    println!("C8 h = {h}, l = {}", p.pl_constant());
    let cfg = MethodConfig::new(
        Method::AdaGrad { norm_mode: false, timing: DenominatorTiming::PostUpdate },
        h,
        eps,
    )
    .unwrap();
    for x0 in [-3.0, 1.5, 4.0] {
        let mut rng = RngStream::new(0);
        let t = run(&p, &GradientOracle::Deterministic, &cfg, 100_000, 1e-30, &[x0], &mut rng).unwrap();
        let case = case_transitions(&t, eps);
        let (a, b) = default_fit_window(&t, &case, 1e-30);
        let r = rate_fit(&t, a, b).unwrap();
        println!(
            "C8 x0={x0}: rows {}, final gap {:.3e}, rho {:.6}, R2 {:.6}, window [{a},{b}]",
            t.len(), t.final_gap().unwrap(), r.rho_hat, r.r_squared
        );
    }
}
