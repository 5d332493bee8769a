//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use vgf_core::baselines::ScalarParticleModel;
use vgf_core::estimate::{implicit_gradient, linear_grid, relative_error, GradientMethod, GradientOptions};
use vgf_core::mixture::{mixture_filter, MixtureBelief, MixtureConfig};
use vgf_core::quadrature::gauss_hermite_1d;
use vgf_core::ssm::LgssmParam;
use vgf_core::{
    bootstrap_pf, filter, kalman_filter, make_bimodal_model, make_sv_model, mle, simulate, sweep_rho,
    FilterKind, FlowConfig, LgssmFamily, LgssmSpec, LoglikSettings, MleConfig, QuadratureRule,
    SVParameters, SvFamily,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn kalman_equivalence() -> Outcome {
    let start = Instant::now();
    let cfg = FlowConfig {
        step_size: 0.1,
        tol: 1e-9,
        ..FlowConfig::default()
    };
    let rule = QuadratureRule::gauss_hermite(5);
    let (mut worst_state, mut worst_ll) = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let d = 1 + (seed % 3) as usize;
        let model = common::random_lgssm(100 + seed, d);
        let trace = simulate(&model, 100, seed).unwrap();
        let (run, kf) = match (
            filter(&model, &trace.observations, &rule, &cfg),
            kalman_filter(&model, &trace.observations),
        ) {
            (Ok(r), Ok(k)) => (r, k),
            (Err(e), _) | (_, Err(e)) => return outcome(false, format!("seed {seed}: {e}")),
        };
        for (a, b) in run.filtered.iter().zip(&kf.filtered) {
            worst_state = worst_state.max((&a.mean - &b.mean).amax()).max((&a.cov - &b.cov).amax());
        }
        worst_ll = worst_ll.max((run.loglik - kf.loglik).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        worst_state < 1e-6 && worst_ll < 1e-6 && elapsed < Duration::from_secs(30),
        format!("max state error {worst_state:.2e}, max loglik error {worst_ll:.2e}, {}", secs(elapsed)),
    )
}

fn quadrature_exactness() -> Outcome {
    let mut worst = 0.0f64;
    for q in [3usize, 5, 7] {
        let (nodes, weights) = gauss_hermite_1d(q).unwrap();
        for k in 0..2 * q as i32 {
            let quad: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(k)).sum();
            let exact: f64 = if k % 2 == 1 {
                0.0
            } else {
                (1..k).step_by(2).map(f64::from).product()
            };
            let err = if exact == 0.0 { quad.abs() } else { (quad - exact).abs() / exact };
            worst = worst.max(err);
        }
    }
    outcome(worst < 1e-10, format!("max error {worst:.2e}"))
}

fn leverage_sweeps() -> Outcome {
    let start = Instant::now();
    let truth = SVParameters::reference();
    let grid = linear_grid(-0.89, -0.51, 0.01).unwrap();
    let settings = LoglikSettings {
        particles: 500,
        seed: 2024,
        ..LoglikSettings::default()
    };
    let kinds = [FilterKind::Vwf, FilterKind::Ekf, FilterKind::Pf];
    let mut lines = Vec::new();
    let (mut ok_ab, mut ok_c) = (0, 0);
    for seed in [1u64, 2, 3] {
        let mut vwf_ok = true;
        let mut pf_ok = true;
        let mut c_ok = false;
        let mut summary = Vec::new();
        for k in [1000usize, 2000] {
            let trace = simulate(&make_sv_model(truth).unwrap(), k, seed * 1000 + k as u64).unwrap();
            let sweeps = match sweep_rho(&SvFamily, &truth.to_vec(), &grid, &trace.observations, &kinds, &settings) {
                Ok(s) => s,
                Err(e) => return outcome(false, format!("seed {seed}, K={k}: {e}")),
            };
            let arg: Vec<f64> = sweeps.iter().map(|s| s.argmax().unwrap_or(f64::NAN)).collect();
            let dist: Vec<f64> = arg.iter().map(|a| (a + 0.8).abs()).collect();
            vwf_ok &= dist[0] <= 0.05 + 1e-9;
            pf_ok &= dist[2] <= 0.07 + 1e-9;
            if k == 2000 {
                c_ok = dist[1] >= dist[0];
            }
            summary.push(format!("K={k} vwf {:.2} ekf {:.2} pf {:.2}", arg[0], arg[1], arg[2]));
        }
        ok_ab += usize::from(vwf_ok && pf_ok);
        ok_c += usize::from(c_ok);
        lines.push(format!("seed {seed}: {}", summary.join(", ")));
    }
    let elapsed = start.elapsed();
    outcome(
        ok_ab >= 2 && ok_c >= 2 && elapsed < Duration::from_secs(15 * 60),
        format!("(a)+(b) on {ok_ab}/3 seeds, (c) on {ok_c}/3; {}; {}", lines.join("; "), secs(elapsed)),
    )
}

fn parameter_estimates() -> Outcome {
    let start = Instant::now();
    let truth = SVParameters::reference();
    let init = [0.0, 0.9, 0.2, -0.5];
    let bands = [(0.56, 0.21), (0.972, 0.027), (0.15, 0.06), (-0.80, 0.12)];
    let cfg = MleConfig::default();
    let mut pass = true;
    let mut rows = Vec::new();
    for seed in [11u64, 12, 13] {
        let trace = simulate(&make_sv_model(truth).unwrap(), 1000, seed).unwrap();
        match mle(&SvFamily, &init, &trace.observations, FilterKind::Vwf, &cfg) {
            Ok(r) => {
                let inside = r.theta_hat.iter().zip(&bands).all(|(v, (c, w))| (v - c).abs() <= *w);
                pass &= inside && r.converged;
                rows.push(format!("vwf {:.3?}{}", r.theta_hat, if r.converged { "" } else { " (not converged)" }));
            }
            Err(e) => {
                pass = false;
                rows.push(format!("vwf failed: {e}"));
            }
        }
        if let Ok(r) = mle(&SvFamily, &init, &trace.observations, FilterKind::Ekf, &cfg) {
            rows.push(format!("ekf {:.3?}", r.theta_hat));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        pass && elapsed < Duration::from_secs(30 * 60),
        format!("(mu, alpha, sigma, rho): {}; {}", rows.join("; "), secs(elapsed)),
    )
}

fn gradient_check() -> Outcome {
    let opts = GradientOptions {
        check_fd: true,
        ..GradientOptions::default()
    };
    let flow = FlowConfig {
        tol: 1e-10,
        ..FlowConfig::default()
    };
    let rule = QuadratureRule::default();

    let lgssm = LgssmFamily::new(
        LgssmSpec::scalar(0.8, 0.1, 0.5, 1.0, 0.0, 0.7, 0.0, 1.0),
        vec![LgssmParam::A(0, 0)],
    );
    let theta = lgssm.base_theta();
    let trace = simulate(&lgssm.spec(&theta).unwrap().build().unwrap(), 200, 21).unwrap();
    let sv_trace = simulate(&make_sv_model(SVParameters::reference()).unwrap(), 200, 22).unwrap();

    let mut pass = true;
    let mut parts = Vec::new();
    for (name, report) in [
        ("lgssm", implicit_gradient(&lgssm, &theta, &trace.observations, &rule, &flow, &opts)),
        (
            "sv",
            implicit_gradient(&SvFamily, &SVParameters::reference().to_vec(), &sv_trace.observations, &rule, &flow, &opts),
        ),
    ] {
        match report {
            Ok(r) => {
                let err = r.fd_gradient.as_ref().map_or(f64::INFINITY, |fd| relative_error(&r.gradient, fd));
                let implicit = r.method == GradientMethod::Implicit;
                pass &= implicit && err < 1e-3;
                parts.push(format!("{name} relative error {err:.2e}{}", if implicit { "" } else { " (fell back)" }));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, parts.join(", "))
}

fn mixture_reduction_and_symmetry() -> Outcome {
    let rule = QuadratureRule::default();
    let cfg = MixtureConfig::default();
    let model = common::random_lgssm(7, 2);
    let trace = simulate(&model, 100, 7).unwrap();
    let reduction = match (
        mixture_filter(&model, &trace.observations, &MixtureBelief::single(model.prior.clone()), &rule, &cfg),
        filter(&model, &trace.observations, &rule, &cfg.flow),
    ) {
        (Ok(m), Ok(u)) => m
            .filtered
            .iter()
            .zip(&u.filtered)
            .map(|(a, b)| a.components[0].sup_distance(b))
            .fold((m.loglik - u.loglik).abs(), f64::max),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("reduction run failed: {e}")),
    };

    let bimodal = make_bimodal_model(1.0).unwrap();
    let trace = simulate(&bimodal, 500, 3).unwrap();
    let init = MixtureBelief::mirrored(DVector::from_element(1, 1.0), DMatrix::identity(1, 1));
    let asym = match mixture_filter(&bimodal, &trace.observations, &init, &rule, &cfg) {
        Ok(run) => run
            .filtered
            .iter()
            .map(|b| {
                let (p, n) = (&b.components[0], &b.components[1]);
                (&p.mean + &n.mean).amax().max((&p.cov - &n.cov).amax())
            })
            .fold(0.0, f64::max),
        Err(e) => return outcome(false, format!("mirrored run failed: {e}")),
    };
    outcome(
        reduction < 1e-6 && asym < 1e-8,
        format!("single-component difference {reduction:.2e}, mirror asymmetry {asym:.2e}"),
    )
}

fn bimodal_fidelity() -> Outcome {
    let model = make_bimodal_model(1.0).unwrap();
    // The random walk spreads like √k, so most K = 500 paths leave the oracle
    // grid; use the first seed whose path stays two units inside it.
    let Some((seed, trace)) = (0..1000u64)
        .map(|s| (s, simulate(&model, 500, s).unwrap()))
        .find(|(_, t)| t.states.iter().all(|x| x[0].abs() <= 13.0))
    else {
        return outcome(false, "no trace stays inside the grid".into());
    };
    let init = MixtureBelief::mirrored(DVector::from_element(1, 1.0), DMatrix::identity(1, 1));
    let run = match mixture_filter(&model, &trace.observations, &init, &QuadratureRule::default(), &MixtureConfig::default()) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("{e}")),
    };
    let (grid, dens) = common::bimodal_grid_filter(&trace.observations, 1.0, -15.0, 15.0, 4096);
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut misses = Vec::new();
    for k in (1..=10).map(|i| i * 50) {
        let modes = common::grid_modes(&grid, &dens[k - 1]);
        let Some(top) = modes.first().map(|m| m.1) else {
            return outcome(false, format!("seed {seed}: grid posterior at step {k} has no mode"));
        };
        let modes: Vec<f64> = modes.iter().filter(|m| m.1 > 1e-3 * top).map(|m| m.0).collect();
        if modes.len() < 2 || (modes[0] - modes[1]).abs() < 1.0 {
            continue;
        }
        checked += 1;
        let (lo, hi) = (modes[0].min(modes[1]), modes[0].max(modes[1]));
        let means: Vec<f64> = run.filtered[k - 1].components.iter().map(|c| c.mean[0]).collect();
        let (m_lo, m_hi) = (means[0].min(means[1]), means[0].max(means[1]));
        let err = (m_lo - lo).abs().max((m_hi - hi).abs());
        worst = worst.max(err);
        if err > 0.3 {
            misses.push(format!("k={k}: means ({m_lo:.2}, {m_hi:.2}) vs modes ({lo:.2}, {hi:.2})"));
        }
    }
    outcome(
        checked > 0 && misses.is_empty(),
        format!("seed {seed}, {checked} bimodal steps checked, worst distance {worst:.3}{}", if misses.is_empty() { String::new() } else { format!("; {}", misses.join("; ")) }),
    )
}

fn particle_likelihood() -> Outcome {
    let model = LgssmSpec::scalar(0.9, 0.0, 0.5, 1.0, 0.0, 1.0, 0.0, 1.0).build().unwrap();
    let trace = simulate(&model, 50, 8).unwrap();
    let exact = kalman_filter(&model, &trace.observations).unwrap().loglik;
    let pm = ScalarParticleModel::from_definition(&model).unwrap();
    let lls: Vec<f64> = (0..20)
        .map(|s| bootstrap_pf(&pm, &trace.observations, 100_000, s).map(|r| r.loglik))
        .collect::<Result<_, _>>()
        .unwrap_or_default();
    if lls.len() != 20 {
        return outcome(false, "particle filter failed".into());
    }
    let n = lls.len() as f64;
    let mean = lls.iter().sum::<f64>() / n;
    let sd = (lls.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let a = bootstrap_pf(&pm, &trace.observations, 100_000, 99).unwrap();
    let b = bootstrap_pf(&pm, &trace.observations, 100_000, 99).unwrap();
    let deterministic = a.loglik.to_bits() == b.loglik.to_bits() && a.filtered == b.filtered;
    let z = (mean - exact).abs() / se;
    outcome(
        z <= 3.0 && deterministic,
        format!("PF mean {mean:.5}, exact {exact:.5}, {z:.2} standard errors, deterministic: {deterministic}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 Kalman equivalence", kalman_equivalence),
        ("2 quadrature exactness", quadrature_exactness),
        ("3 leverage likelihood sweeps", leverage_sweeps),
        ("4 parameter estimation", parameter_estimates),
        ("5 implicit gradients", gradient_check),
        ("6 mixture reduction and symmetry", mixture_reduction_and_symmetry),
        ("7 bimodal fidelity", bimodal_fidelity),
        ("8 particle likelihood", particle_likelihood),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        failed += usize::from(!o.pass);
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
