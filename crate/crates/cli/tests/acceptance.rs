//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails.

use std::time::Instant;

use dermarket::bidding::BidCurve;
use dermarket::clearing::{clear_market, default_tolerance, CoupledQp, SupplyModel};
use dermarket::der::{DerParams, MarketState};
use dermarket::rng::{stream_rng, uniform, StreamRng};
use dermarket::simulator::{
    closed_loop_step, find_equilibrium, run_scenario, Population, SegmentClass, Segment,
};
use dermarket::stability::{
    certify_multi, certify_single, double_projection, empirical_contraction, lambda_approx,
    single_closed_loop, ApproxClosedLoop,
};
use dermarket_cli::commands::{cmd_simulate, CommonArgs, SeriesFormat};
use dermarket_cli::config::{Config, PopulationSection, SimulationSection, SupplySection};
use dermarket_cli::generate::{generate_population, GenerationInput, Preset, Rule};

const TAG: u64 = 0xacce_7700;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(case: u64) -> StreamRng {
    stream_rng(case, TAG, 0)
}

/// Random controllable asset.
fn random_asset(rng: &mut StreamRng) -> DerParams {
    let a = uniform(rng, 0.05, 1.0);
    let x_lo = uniform(rng, -100.0, 100.0);
    let x_hi = x_lo + uniform(rng, 1.0, 200.0);
    let d_lo = (1.0 - a) * x_hi - uniform(rng, 0.1, 50.0);
    let d_hi = d_lo.max((1.0 - a) * x_lo) + uniform(rng, 0.1, 50.0);
    DerParams {
        a,
        x_lo,
        x_hi,
        d_lo,
        d_hi,
        q: uniform(rng, 0.01, 5.0),
        r: uniform(rng, -3.0, 3.0),
        c: uniform(rng, -50.0, 100.0),
    }
}

fn random_supply(rng: &mut StreamRng) -> SupplyModel {
    SupplyModel::new(uniform(rng, 0.01, 2.0), uniform(rng, 1.0, 50.0)).unwrap()
}

fn schedule() -> Vec<Segment> {
    [20.0, 40.0, 10.0, 30.0, 20.0]
        .iter()
        .map(|&beta2| Segment { beta2, duration: 20 })
        .collect()
}

fn preset_config(preset: Preset, q: f64, seed: u64) -> Config {
    Config {
        population: PopulationSection::Generate(GenerationInput {
            preset: Some(preset),
            q: Some(Rule::Fixed(q)),
            ..Default::default()
        }),
        supply: SupplySection {
            beta1: preset.beta1(),
            beta2: 20.0,
        },
        schedule: schedule(),
        simulation: SimulationSection {
            seed,
            ..Default::default()
        },
    }
}

fn single_margins() -> Outcome {
    let sm = SupplyModel::new(Preset::ReferenceSingle.beta1(), 20.0).unwrap();
    let mut spec = Preset::ReferenceSingle.spec();
    let unstable = certify_single(&generate_population(&spec, 0).unwrap().0.assets()[0], &sm);
    spec.q = Rule::Fixed(0.2);
    let stable = certify_single(&generate_population(&spec, 0).unwrap().0.assets()[0], &sm);
    let (m1, m2) = (unstable.margins[0], stable.margins[0]);
    Outcome {
        pass: (m1 - -1.1611).abs() <= 1e-4
            && (m2 - 0.5542).abs() <= 1e-4
            && !unstable.certified
            && stable.certified,
        detail: format!("margins {m1:.6} (q=0.005), {m2:.6} (q=0.2)"),
    }
}

fn multi_margins() -> Outcome {
    let sm = SupplyModel::new(Preset::ReferenceMulti.beta1(), 20.0).unwrap();
    let mut pass = true;
    let (mut lo_u, mut hi_u, mut lo_s, mut hi_s) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..10 {
        for (q, band, lo, hi) in [
            (0.005, (-190.3, -180.1), &mut lo_u, &mut hi_u),
            (1.5, (-0.097, -0.091), &mut lo_s, &mut hi_s),
        ] {
            let mut spec = Preset::ReferenceMulti.spec();
            spec.q = Rule::Fixed(q);
            let (pop, _) = generate_population(&spec, seed).unwrap();
            let cert = certify_multi(pop.assets(), &sm).unwrap();
            for &m in &cert.margins {
                *lo = lo.min(m);
                *hi = hi.max(m);
                pass &= m > band.0 && m < band.1;
            }
        }
    }
    Outcome {
        pass,
        detail: format!(
            "10 seeds: q=0.005 margins in [{lo_u:.3}, {hi_u:.3}], q=1.5 margins in [{lo_s:.5}, {hi_s:.5}]"
        ),
    }
}

fn closed_loop_classification() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for (label, preset, q, stable) in [
        ("m=1 q=0.005", Preset::ReferenceSingle, 0.005, false),
        ("m=100 q=0.005", Preset::ReferenceMulti, 0.005, false),
        ("m=1 q=0.2", Preset::ReferenceSingle, 0.2, true),
        ("m=100 q=1.5", Preset::ReferenceMulti, 1.5, true),
    ] {
        let mut worst_osc = usize::MAX;
        let mut worst_conv = usize::MAX;
        let mut worst_settle = 0;
        let mut failing_seeds = Vec::new();
        for seed in 0..10 {
            let resolved = preset_config(preset, q, seed).resolve(None).unwrap();
            let ts = run_scenario(&resolved.scenario).unwrap();
            let tol = default_tolerance(resolved.supply());
            let report = ts.convergence_report(tol).unwrap();
            let osc = report.count(SegmentClass::Oscillating);
            let conv = report.count(SegmentClass::Converged);
            let settle = report.max_settle_time().unwrap_or(0);
            worst_osc = worst_osc.min(osc);
            worst_conv = worst_conv.min(conv);
            worst_settle = worst_settle.max(settle);
            let ok = if stable {
                conv == report.segments.len() && settle <= 10
            } else {
                osc >= 4
            };
            if !ok {
                failing_seeds.push(seed);
            }
        }
        pass &= failing_seeds.is_empty();
        notes.push(if stable {
            format!("{label}: min converged {worst_conv}/5, max settle {worst_settle}, failing seeds {failing_seeds:?}")
        } else {
            format!("{label}: min oscillating {worst_osc}/5, failing seeds {failing_seeds:?}")
        });
    }
    Outcome {
        pass,
        detail: notes.join("; "),
    }
}

fn clearing_matches_oracle() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    let mut failures = 0;
    for case in 0..200 {
        let mut rng = rng(case);
        let m = 1 + (uniform(&mut rng, 0.0, 5.0) as usize).min(4);
        let assets: Vec<DerParams> = (0..m).map(|_| random_asset(&mut rng)).collect();
        let sm = random_supply(&mut rng);
        let x: Vec<f64> = assets
            .iter()
            .map(|p| uniform(&mut rng, p.x_lo, p.x_hi))
            .collect();
        let curves: Vec<BidCurve> = assets
            .iter()
            .zip(&x)
            .map(|(p, &xi)| BidCurve::new(p, xi).unwrap())
            .collect();
        let out = clear_market(&curves, &sm, default_tolerance(&sm)).unwrap();
        let omega: Vec<_> = curves.iter().map(|c| c.omega).collect();
        let oracle = CoupledQp::new(&assets, &sm)
            .solve_projected_gradient(&MarketState::new(x).unwrap(), &omega)
            .unwrap();
        let gap = out
            .d_star
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(out.kkt_residual);
        if gap > 1e-6 || out.kkt_residual > 1e-8 {
            failures += 1;
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!(
            "200 instances, {failures} failures, max |d − d_oracle| {worst_gap:.2e}, max kkt {worst_kkt:.2e}"
        ),
    }
}

fn double_projection_identity() -> Outcome {
    let mut rng = rng(5);
    let mut accepted = 0;
    let mut failures = 0;
    let int = |rng: &mut StreamRng, lo: f64, hi: f64| uniform(rng, lo, hi).floor();
    while accepted < 100_000 {
        // dyadic values keep every sum and product exact
        let a = int(&mut rng, 1.0, 17.0) / 16.0;
        let x_lo = int(&mut rng, -50.0, 50.0);
        let x_hi = x_lo + int(&mut rng, 1.0, 100.0);
        let d_lo = int(&mut rng, -60.0, 60.0);
        let d_hi = d_lo + int(&mut rng, 0.0, 60.0);
        let x = int(&mut rng, x_lo, x_hi + 1.0);
        let d = int(&mut rng, -2000.0, 2000.0) / 16.0;
        let controllable = a * x_lo + d_hi > x_lo && a * x_hi + d_lo < x_hi;
        if !controllable || d_lo.max(x_lo - a * x) > d_hi.min(x_hi - a * x) {
            continue;
        }
        accepted += 1;
        if !double_projection(a, (x_lo, x_hi), (d_lo, d_hi), x, d).holds() {
            failures += 1;
        }
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{accepted} tuples, {failures} failures"),
    }
}

fn diagonal_approximation_bound() -> Outcome {
    let mut worst_rel: f64 = 0.0;
    let mut failures = 0;
    for case in 0..100 {
        let mut rng = rng(600 + case);
        let m = 1 + (uniform(&mut rng, 0.0, 50.0) as usize).min(49);
        let q: Vec<f64> = (0..m)
            .map(|_| 10f64.powf(uniform(&mut rng, -2.5, 0.7)))
            .collect();
        let beta1 = 10f64.powf(uniform(&mut rng, -3.0, 0.3));
        let approx = lambda_approx(&q, beta1).unwrap();
        let dense = approx.dense_error.unwrap();
        let rel = (dense - approx.epsilon).abs() / approx.epsilon;
        worst_rel = worst_rel.max(rel);
        if rel > 1e-10 {
            failures += 1;
        }
    }
    let mut limit_ok = true;
    for q in [0.005, 0.2, 1.5] {
        let mut prev = 0.0;
        for m in [10, 100, 1000, 10_000] {
            let eps = lambda_approx(&vec![q; m], 0.008).unwrap().epsilon;
            limit_ok &= eps >= prev && eps <= 0.5 / q;
            prev = eps;
        }
    }
    Outcome {
        pass: failures == 0 && limit_ok,
        detail: format!(
            "100 cases, {failures} failures, max relative |dense − eps|/eps {worst_rel:.2e}; large-m limit {}",
            if limit_ok { "ok" } else { "violated" }
        ),
    }
}

fn contraction_certificates() -> Outcome {
    let mut pass = true;

    // single asset, exact map
    let mut certified_single = Vec::new();
    let mut worst_single: f64 = f64::NEG_INFINITY;
    for case in 0..500 {
        let mut rng = rng(7000 + case);
        let p = random_asset(&mut rng);
        let sm = random_supply(&mut rng);
        let cert = certify_single(&p, &sm);
        if !cert.certified {
            continue;
        }
        let ratio = empirical_contraction(
            |x| vec![single_closed_loop(&p, &sm, x[0])],
            &[p.x_lo],
            &[p.x_hi],
            1000,
            case,
        );
        worst_single = worst_single.max(ratio - cert.contraction_factor);
        pass &= ratio <= cert.contraction_factor + 1e-9;
        certified_single.push((p, sm, cert.contraction_factor));
    }

    // many assets, decoupled map
    let mut certified_multi = 0;
    let mut worst_multi: f64 = f64::NEG_INFINITY;
    for case in 0..200 {
        let mut rng = rng(8000 + case);
        let m = 2 + (uniform(&mut rng, 0.0, 19.0) as usize).min(18);
        let assets: Vec<DerParams> = (0..m)
            .map(|_| {
                let mut p = random_asset(&mut rng);
                p.r *= 0.3;
                p
            })
            .collect();
        let sm = random_supply(&mut rng);
        let cert = certify_multi(&assets, &sm).unwrap();
        if !cert.certified {
            continue;
        }
        certified_multi += 1;
        let map = ApproxClosedLoop::new(&assets, &sm).unwrap();
        let lo: Vec<f64> = assets.iter().map(|p| p.x_lo).collect();
        let hi: Vec<f64> = assets.iter().map(|p| p.x_hi).collect();
        let ratio = empirical_contraction(|x| map.apply(x), &lo, &hi, 1000, case);
        worst_multi = worst_multi.max(ratio - cert.contraction_factor);
        pass &= ratio <= cert.contraction_factor + 1e-9;
    }

    // exponential decay of the simulated single-asset loop
    let table = {
        let mut spec = Preset::ReferenceSingle.spec();
        spec.q = Rule::Fixed(0.2);
        let p = generate_population(&spec, 0).unwrap().0.assets()[0];
        let sm = SupplyModel::new(Preset::ReferenceSingle.beta1(), 20.0).unwrap();
        (p, sm, certify_single(&p, &sm).contraction_factor)
    };
    let mut decay_violations = 0;
    let mut trajectories = 0;
    for (k, (p, sm, factor)) in std::iter::once(table)
        .chain(certified_single.iter().copied().take(20))
        .enumerate()
    {
        let pop = Population::new(vec![p]).unwrap();
        let scale = p.x_lo.abs().max(p.x_hi.abs()).max(1.0);
        let mid = MarketState::new(vec![0.5 * (p.x_lo + p.x_hi)]).unwrap();
        let eq = find_equilibrium(&pop, &sm, &mid, 1e-13 * scale, 100_000).unwrap();
        let x_star = eq.state.x[0];
        let floor = 1e-9 * x_star.abs().max(1.0);
        let rho = factor + 0.02;
        let tol = default_tolerance(&sm);
        let mut rng = rng(9000 + k as u64);
        for _ in 0..100 {
            let mut x = MarketState::new(vec![uniform(&mut rng, p.x_lo, p.x_hi)]).unwrap();
            let e0 = (x.x[0] - x_star).abs();
            for step in 1..=200 {
                x = closed_loop_step(&pop, &sm, &x, tol).unwrap().0;
                let e = (x.x[0] - x_star).abs();
                if e > rho.powi(step) * e0 + floor {
                    decay_violations += 1;
                    break;
                }
            }
            trajectories += 1;
        }
    }
    pass &= decay_violations == 0 && certified_single.len() >= 20 && certified_multi > 0;

    Outcome {
        pass,
        detail: format!(
            "exact map: {} certified, max ratio − factor {worst_single:.2e}; decoupled map: {certified_multi} certified, max ratio − factor {worst_multi:.2e}; decay: {decay_violations}/{trajectories} violations",
            certified_single.len()
        ),
    }
}

fn deterministic_output() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("scenario.json");
    let cfg = preset_config(Preset::ReferenceMulti, 0.005, 17);
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let run = |name: &str| {
        let sub = dir.path().join(name);
        std::fs::create_dir(&sub).unwrap();
        let out = sub.join("series.csv");
        let args = CommonArgs {
            config: cfg_path.clone(),
            seed: Some(17),
            output: Some(out.clone()),
            json: false,
        };
        cmd_simulate(&args, SeriesFormat::Csv, &mut std::io::sink(), &mut std::io::sink())
            .unwrap();
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("first"), run("second"));
    Outcome {
        pass: !a.is_empty() && a == b,
        detail: format!("{} bytes, identical: {}", a.len(), a == b),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("single-asset margins", single_margins),
        ("multi-asset margins", multi_margins),
        ("closed-loop classification", closed_loop_classification),
        ("clearing equals welfare optimum", clearing_matches_oracle),
        ("double projection identity", double_projection_identity),
        ("diagonal approximation bound", diagonal_approximation_bound),
        ("contraction certificates", contraction_certificates),
        ("deterministic output", deterministic_output),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {name}: {verdict} ({}; {:.2?})",
            i + 1,
            out.detail,
            start.elapsed()
        );
        failed += usize::from(!out.pass);
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
