//! Acceptance run: one line per criterion, non-zero exit on any failure.

mod common;

use std::error::Error;
use std::time::{Duration, Instant};

use tileheat::bounds::{
    beta2, core_sources, eta_stable, gaussian_check, nash_ratio, transition_report, transition_time,
    ultracontractive_check, GaussianReport, Regime, ULTRA_ALLOWANCE,
};
use tileheat::constants::{BETA1, NASH1_LIFT_CONSTANT};
use tileheat::functions::{dirichlet_energy, random_test_function_seeded, Conductivity, FormSpec, GraphFunction};
use tileheat::geometry::{Point, TilingKind};
use tileheat::semigroup::{assemble, evolve_to_times, heat_kernel_column, AssemblyOptions, Scheme};
use tileheat::skeleton::{GraphPoint, MetricGraph};
use tileheat::suites::{extension_suite, lift_suite, nash_centers, nash_suite_for, NashSuiteOptions};

type Outcome = Result<(bool, String), Box<dyn Error>>;

const SEED: u64 = 20_240_601;

/// Equality cases of the extension inequalities land on 1 up to rounding.
const RATIO_SLACK: f64 = 1e-12;

fn midpoint(g: &MetricGraph, a: (f64, f64), b: (f64, f64)) -> GraphPoint {
    let e = common::edge_between(g, a, b);
    GraphPoint::new(e, 0.5 * g.edge(e).length)
}

fn sup(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn within(elapsed: Duration, limit: u64) -> bool {
    elapsed <= Duration::from_secs(limit)
}

fn extension_identity() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut samples = 0;
    for kind in TilingKind::ALL {
        let s = extension_suite(kind, 1000, SEED)?;
        worst = worst.max(s.max_l1_identity_error);
        samples += s.samples;
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && within(elapsed, 30);
    Ok((pass, format!("{samples} loops, max relative error {worst:.2e}, {:.1} s", elapsed.as_secs_f64())))
}

fn extension_inequalities() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in TilingKind::ALL {
        let s = extension_suite(kind, 1000, SEED + 1)?;
        pass &= s.pass() && s.max_ratios.iter().all(|&r| r <= 1.0 + RATIO_SLACK);
        parts.push(format!(
            "{kind}: max ratios {:.4}/{:.4}/{:.4}, {} degenerate, {} failed",
            s.max_ratios[0],
            s.max_ratios[1],
            s.max_ratios[2],
            s.degenerate,
            s.samples - s.passed
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn euler_lift() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in TilingKind::ALL {
        let mesh = common::mesh(kind, 16.0, 0.125);
        let s = lift_suite(&mesh, 1000, 3.0, SEED)?;
        let doubling = s.max_doubling.iter().fold(0.0f64, |m, &d| m.max(d));
        pass &= s.pass() && doubling <= 2.0 + 1e-12 && s.max_ratio <= NASH1_LIFT_CONSTANT && s.max_ratio <= BETA1;
        parts.push(format!(
            "{kind}: max use {}, max doubling {doubling:.4}, max ratio {:.4}",
            s.max_edge_use, s.max_ratio
        ));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 60);
    Ok((pass, format!("{}; bound {NASH1_LIFT_CONSTANT}; {:.1} s", parts.join("; "), elapsed.as_secs_f64())))
}

fn graph_nash() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    let options = NashSuiteOptions {
        samples: 1000,
        seed: SEED,
        lift: false,
        ..NashSuiteOptions::default()
    };
    for kind in TilingKind::ALL {
        let tiling = common::tiling(kind, 16.0);
        let mesh = common::mesh(kind, 16.0, 0.125);
        let s = nash_suite_for(&mesh, &tiling.constants, &options)?;
        pass &= s.pass();
        parts.push(format!(
            "{kind}: beta2 {:.4}, max ratios {:.4}/{:.4}",
            s.beta2, s.max_ratio1, s.max_ratio2
        ));
    }
    let elapsed = start.elapsed();
    pass &= within(elapsed, 120);
    Ok((pass, format!("{}; {:.1} s", parts.join("; "), elapsed.as_secs_f64())))
}

fn semigroup_oracles() -> Outcome {
    let start = Instant::now();

    let fine = common::mesh(TilingKind::Square, 4.0, 1.0 / 128.0);
    let l = assemble(&fine, &AssemblyOptions::reflecting())?;
    let src = midpoint(fine.graph(), (2.0, 2.0), (3.0, 2.0));
    let col = heat_kernel_column(&l, src, 0.01, &Scheme::krylov())?;
    let mut kernel_error: f64 = 0.0;
    for j in -40..=40 {
        let d = j as f64 / 100.0;
        let exact = common::free_kernel(0.01, d.abs());
        let value = col.state.function.evaluate(GraphPoint::new(src.edge, src.offset + d));
        kernel_error = kernel_error.max((value - exact).abs() / exact);
    }

    let mesh = common::mesh(TilingKind::Square, 10.0, 0.125);
    let g = mesh.graph();
    let l = assemble(&mesh, &AssemblyOptions::reflecting())?;
    let src = midpoint(g, (5.0, 5.0), (6.0, 5.0));
    let mut mass_error: f64 = 0.0;
    for scheme in [Scheme::krylov(), Scheme::crank_nicolson()] {
        for t in [0.1, 0.5, 1.0] {
            let col = heat_kernel_column(&l, src, t, &scheme)?;
            mass_error = mass_error.max((l.mass_of(col.state.function.values()) - 1.0).abs());
        }
    }

    let coarse = common::mesh(TilingKind::Square, 10.0, 0.25);
    let l = assemble(&coarse, &AssemblyOptions::reflecting())?;
    let center = common::vertex_at(coarse.graph(), 5.0, 5.0);
    let f = random_test_function_seeded(&coarse, SEED, center, 2.0)?;
    let times = [0.1, 1.0, 10.0];
    let cn = evolve_to_times(&l, &f, &times, &Scheme::crank_nicolson())?;
    let kr = evolve_to_times(&l, &f, &times, &Scheme::krylov())?;
    let mut scheme_gap: f64 = 0.0;
    for (a, b) in cn.iter().zip(&kr) {
        let diff: Vec<f64> = a.function.values().iter().zip(b.function.values()).map(|(x, y)| x - y).collect();
        scheme_gap = scheme_gap.max(sup(&diff) / sup(b.function.values()));
    }

    let elapsed = start.elapsed();
    let pass = kernel_error <= 0.02 && mass_error <= 1e-10 && scheme_gap <= 1e-6 && within(elapsed, 120);
    Ok((
        pass,
        format!(
            "free kernel error {kernel_error:.2e}, mass error {mass_error:.2e}, CN vs Krylov {scheme_gap:.2e}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn ultracontractive() -> Outcome {
    let start = Instant::now();
    let tiling = common::tiling(TilingKind::Square, 50.0);
    let beta = beta2(&tiling.constants).value;
    let mesh = common::mesh(TilingKind::Square, 50.0, 1.0 / 16.0);
    let l = assemble(&mesh, &AssemblyOptions::reflecting())?;
    let sources = core_sources(mesh.graph(), Point::new(25.0, 25.0));
    let times = [0.01, 0.1, 1.0, 5.0, 20.0, 22.6875, 30.0, 50.0];
    let report = ultracontractive_check(&l, &times, &sources, beta, &Scheme::krylov())?;
    let elapsed = start.elapsed();
    let worst = report.records.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let checked = report.records.iter().filter(|r| !r.truncation_limited).count();
    let regimes_ok = report
        .records
        .iter()
        .all(|r| (r.regime == Regime::TwoDimensional) == (r.t > report.t_star));
    let pass = report.records.iter().all(|r| r.pass)
        && checked == times.len()
        && report.t_star == 22.6875
        && report.t_star == transition_time(beta)
        && regimes_ok
        && within(elapsed, 600);
    let crossover = report
        .observed_crossover
        .map_or("none".to_string(), |t| format!("{t:.3}"));
    Ok((
        pass,
        format!(
            "max ratio {worst:.4} (allowance {ULTRA_ALLOWANCE}), {checked}/{} times with clearance, t* {}, observed crossover {crossover}, {:.1} s",
            times.len(),
            report.t_star,
            elapsed.as_secs_f64()
        ),
    ))
}

fn gaussian_fit(window: f64, h: f64) -> Result<GaussianReport, Box<dyn Error>> {
    let mesh = common::mesh(TilingKind::Square, window, h);
    let l = assemble(&mesh, &AssemblyOptions::reflecting())?;
    let sources = core_sources(mesh.graph(), Point::new(7.0, 7.0));
    Ok(gaussian_check(&l, &sources, None, &[0.1, 0.5, 1.0, 2.0], &Scheme::krylov())?)
}

fn gaussian_shape() -> Outcome {
    let base = gaussian_fit(14.0, 1.0 / 16.0)?;
    let refined = gaussian_fit(14.0, 1.0 / 32.0)?;
    let grown = gaussian_fit(21.0, 1.0 / 16.0)?;
    let in_range = [&base, &refined, &grown]
        .iter()
        .all(|r| r.samples.iter().all(|s| s.distance * s.distance / s.t <= 25.0));
    let positive = base.positivity_pass && refined.positivity_pass && grown.positivity_pass;
    let min_kernel = [&base, &refined, &grown]
        .iter()
        .map(|r| r.min_relative_kernel)
        .fold(f64::INFINITY, f64::min);
    let pass = base.eta.is_finite()
        && eta_stable(base.eta, refined.eta)
        && eta_stable(base.eta, grown.eta)
        && in_range
        && positive;
    Ok((
        pass,
        format!(
            "eta {:.4}, refined {:.4}, grown {:.4}, {} samples, min relative kernel {min_kernel:.2e}",
            base.eta,
            refined.eta,
            grown.eta,
            base.samples.len()
        ),
    ))
}

fn robin_and_conductivity() -> Outcome {
    let tiling = common::tiling(TilingKind::Square, 16.0);
    let mesh = common::mesh(TilingKind::Square, 16.0, 0.125);
    let g = mesh.graph();
    let robin = FormSpec::plain().with_robin(vec![1.0; g.vertex_count()]);
    let options = NashSuiteOptions {
        samples: 1000,
        seed: SEED,
        form: robin.clone(),
        lift: false,
        ..NashSuiteOptions::default()
    };
    let nash = nash_suite_for(&mesh, &tiling.constants, &options)?;

    let kernel_mesh = common::mesh(TilingKind::Square, 8.0, 0.125);
    let kg = kernel_mesh.graph();
    let plain = assemble(&kernel_mesh, &AssemblyOptions::reflecting())?;
    let damped_form = FormSpec::plain().with_robin(vec![1.0; kg.vertex_count()]);
    let damped = assemble(&kernel_mesh, &AssemblyOptions::reflecting().with_form(damped_form))?;
    let mut diagonal_ok = true;
    let points = [kg.vertex_point(common::vertex_at(kg, 4.0, 4.0))?, midpoint(kg, (3.0, 4.0), (4.0, 4.0))];
    for src in points {
        for t in [0.05, 0.5, 2.0] {
            let a = heat_kernel_column(&plain, src, t, &Scheme::krylov())?.diagonal();
            let b = heat_kernel_column(&damped, src, t, &Scheme::krylov())?.diagonal();
            diagonal_ok &= b <= a * (1.0 + 1e-10);
        }
    }

    let doubled = FormSpec::plain().with_alpha(Conductivity::Uniform(2.0));
    let centers = nash_centers(g, &NashSuiteOptions::default());
    let mut alpha_error: f64 = 0.0;
    let mut alpha_ratios_ok = true;
    let b2 = beta2(&tiling.constants).value;
    for (i, &c) in centers.iter().cycle().take(200).enumerate() {
        let f: GraphFunction = random_test_function_seeded(&mesh, SEED + i as u64, c, 2.5)?;
        let q = dirichlet_energy(&f, &FormSpec::plain())?;
        let q2 = dirichlet_energy(&f, &doubled)?;
        alpha_error = alpha_error.max((q2 - 2.0 * q).abs() / q);
        for (mu, beta) in [(1u8, BETA1), (2u8, b2)] {
            alpha_ratios_ok &= nash_ratio(&f, mu, beta, &doubled)?.passes();
        }
    }

    let pass = nash.pass() && diagonal_ok && alpha_error <= 1e-12 && alpha_ratios_ok;
    Ok((
        pass,
        format!(
            "b = 1 Nash {}/{} (max ratios {:.4}/{:.4}), diagonals below b = 0: {diagonal_ok}, alpha = 2 energy error {alpha_error:.1e}",
            nash.passed, nash.samples, nash.max_ratio1, nash.max_ratio2
        ),
    ))
}

fn dilation_law() -> Outcome {
    let rows = transition_report(&common::tiling(TilingKind::Square, 6.0), &[1.0, 2.0, 3.0]);
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let pass = ratios == [1.0, 4.0, 9.0] && rows.iter().all(|r| r.pass);
    let t: Vec<String> = rows.iter().map(|r| r.t_star.to_string()).collect();
    Ok((pass, format!("t* {} with ratios {ratios:?}", t.join(", "))))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("extension l1 identity", extension_identity),
        ("extension inequalities", extension_inequalities),
        ("euler lift", euler_lift),
        ("graph nash inequalities", graph_nash),
        ("semigroup oracles", semigroup_oracles),
        ("ultracontractive bound", ultracontractive),
        ("gaussian shape", gaussian_shape),
        ("robin and conductivity variants", robin_and_conductivity),
        ("dilation law", dilation_law),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (pass, detail) = match run() {
            Ok(outcome) => outcome,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!("criterion {}: {} {name}: {detail}", i + 1, if pass { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
