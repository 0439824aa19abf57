//! Acceptance run: one line per criterion, nonzero exit if any fails.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srf_core::chain::{entropy, gamma2, gamma2_form, ip_pi, laplacian, log_mean, log_mean_partials, BoundaryPolicy};
use srf_core::curvature::{
    check_bochner, check_dynamic_convexity, check_gradient_estimate, check_reverse_poincare, check_transport_estimate,
    recheck, static_ricci_bound, verify_srf, BochnerOptions, ConvexityOptions, SampleOptions, TransportOptions, Verdict,
    VerificationReport, VerifyOptions,
};
use srf_core::heat::{propagate, propagate_dual, propagator_matrix, HeatOptions};
use srf_core::ode::OdeOptions;
use srf_core::scenarios::BUILTIN_NAMES;
use srf_core::schedule::{EdgeSchedule, IntervalSpec, Params, PiSchedule, RateSchedule, SingularTransition};
use srf_core::transport::{dual_w2_lower, geodesic, metric_tensor, primal_w2, DualOptions, PrimalOptions};
use srf_core::{builtin_scenario, MarkovTriple, SingularFlow};

mod common;
use common::{measure, reversible, two_point_oracle};

type Outcome = (bool, String);

fn flow(name: &str) -> SingularFlow {
    builtin_scenario(name, &Params::new()).unwrap()
}

fn heat_opts() -> HeatOptions {
    HeatOptions { ode: OdeOptions { rtol: 1e-12, atol: 1e-16, ..OdeOptions::default() }, samples_per_interval: 0, ..HeatOptions::default() }
}

fn soliton_bochner() -> Outcome {
    let start = Instant::now();
    let rep = check_bochner(&flow("two_point_soliton"), &BochnerOptions::default());
    let took = start.elapsed();
    let ok = rep.verdict == Verdict::Pass && rep.margin.abs() <= 1e-6 && took <= Duration::from_secs(10) && rep.diagnostics.samples == 50;
    (ok, format!("verdict {:?}, worst margin {:.2e}, {:.2?}", rep.verdict, rep.margin, took))
}

fn static_two_point() -> Outcome {
    let mut worst: f64 = 0.0;
    for p in [0.5, 1.0, 3.0] {
        let b = static_ricci_bound(&MarkovTriple::two_point(p).unwrap(), &BochnerOptions::default()).unwrap();
        worst = worst.max((b.value - 2.0 * p).abs());
    }
    (worst <= 1e-6, format!("max |bound - 2p| = {worst:.2e} over p ∈ {{0.5, 1, 3}}"))
}

fn pair_flow(schedule: RateSchedule, t1: f64, collapse: bool) -> SingularFlow {
    let edges = vec![
        EdgeSchedule { from: 0, to: 1, schedule: schedule.clone() },
        EdgeSchedule { from: 1, to: 0, schedule },
    ];
    let iv = IntervalSpec::new(0.0, t1, vec!["a".into(), "b".into()], edges, vec![PiSchedule::Constant { v: 0.5 }; 2]).unwrap();
    let first = SingularTransition::identity(0.0, None, Some(&iv)).unwrap();
    let last = if collapse {
        SingularTransition::derived(t1, vec!["ab".into()], Some((&iv, vec![0, 0])), None).unwrap()
    } else {
        SingularTransition::identity(t1, Some(&iv), None).unwrap()
    };
    SingularFlow::new("pair", vec![iv], vec![first, last]).unwrap()
}

/// Largest relative deviation of the logged difference from
/// `δ_s exp(-∫ q)`, with `q = Q_ab + Q_ba`.
fn equilibration_error(f: &SingularFlow, s: f64, t: f64, integral: impl Fn(f64) -> f64) -> f64 {
    let psi = DVector::from_vec(vec![-1.0, 1.0]);
    let sol = propagate(f, s, t, &psi, &HeatOptions { samples_per_interval: 64, ..heat_opts() }).unwrap();
    let mut worst: f64 = 0.0;
    let mut logged = 0;
    for seg in &sol.segments {
        for (tau, v) in seg.times.iter().zip(&seg.values) {
            let expect = 2.0 * (-integral(*tau)).exp();
            worst = worst.max(((v[1] - v[0]) / expect - 1.0).abs());
            logged += 1;
        }
    }
    let expect = 2.0 * (-integral(t)).exp();
    worst = worst.max(((sol.value[1] - sol.value[0]) / expect - 1.0).abs());
    assert!(logged > 10);
    worst
}

fn equilibration_law() -> Outcome {
    let p = 1.5;
    let constant = pair_flow(RateSchedule::Constant { c: p }, 1.0, false);
    let e1 = equilibration_error(&constant, 0.1, 0.9, |tau| 2.0 * p * (tau - 0.1));
    let (c, t1) = (1.0, 1.0);
    let pole = pair_flow(RateSchedule::CollapsePole { c, t_end: t1, order: 1.0 }, t1, true);
    let s = 0.2;
    let e2 = equilibration_error(&pole, s, t1 - 1e-3, |tau| 2.0 * c * ((t1 - s) / (t1 - tau)).ln());
    (e1.max(e2) <= 1e-8, format!("relative error {e1:.1e} (constant), {e2:.1e} (collapse pole up to t1 - 1e-3)"))
}

fn collapse_continuity() -> Outcome {
    let f = flow("collapse_product");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t1 = 0.5;
    let i = f.transitions.iter().position(|tr| (tr.time - t1).abs() < 1e-12).unwrap();
    let map = f.transitions[i].collapse.clone().unwrap();
    let weights = f.collapse_weights(i).unwrap();
    let (mut refine, mut cont, mut mass, mut adj): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..10 {
        let psi = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let coarse = propagate(&f, 0.05, 0.9, &psi, &HeatOptions { eps: 1e-5, ..heat_opts() }).unwrap();
        let fine = propagate(&f, 0.05, 0.9, &psi, &HeatOptions { eps: 1e-7, ..heat_opts() }).unwrap();
        refine = refine.max((coarse.value - &fine.value).amax());
        // The value at t1 is the local-equilibrium average of the left limit.
        let b = fine.boundaries.iter().find(|b| (b.time - t1).abs() < 1e-12).unwrap();
        let left = b.left_limit.as_ref().unwrap();
        for z in 0..b.value.len() {
            let avg: f64 = (0..4).filter(|&x| map[x] == z).map(|x| weights[x] * left[x]).sum();
            cont = cont.max((b.value[z] - avg).abs());
        }
        let sigma = DVector::from_fn(2, |_, _| rng.random_range(0.1..1.0));
        let sigma = &sigma / sigma.sum();
        let back = propagate_dual(&f, 0.05, 0.9, &sigma, &heat_opts()).unwrap().value;
        mass = mass.max((back.sum() - 1.0).abs());
        adj = adj.max((fine.value.dot(&sigma) - psi.dot(&back)).abs());
    }
    let ok = refine <= 1e-4 && cont <= 1e-4 && mass <= 1e-10 && adj <= 1e-8;
    (ok, format!("ε-refinement {refine:.1e}, continuity {cont:.1e}, dual mass {mass:.1e}, adjointness {adj:.1e}"))
}

fn random_reversible3(rng: &mut impl Rng) -> MarkovTriple {
    let pi: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..1.0)).collect();
    let c: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
    reversible(&pi, &[(0, 1, c[0]), (0, 2, c[1]), (1, 2, c[2])])
}

fn random_interior(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0));
    &v / v.sum()
}

fn transport_sandwich() -> Outcome {
    let mut two_point_gap: f64 = 0.0;
    let mut oracle_err: f64 = 0.0;
    for (p, b0, b1) in [(1.0, 0.5, 0.1), (2.5, 0.2, 0.7), (0.7, 0.05, 0.95)] {
        let t = MarkovTriple::two_point(p).unwrap();
        let (a, b) = (measure(&[1.0 - b0, b0]), measure(&[1.0 - b1, b1]));
        let primal = primal_w2(&t, &a, &b, 64, &PrimalOptions::default()).unwrap().value;
        // The dual gap is first order in the witness step; near-boundary
        // endpoints need a witness grid finer than the default.
        let dual = dual_w2_lower(&t, &a, &b, 64, &DualOptions { refine: 4, ..DualOptions::default() }).unwrap().value;
        two_point_gap = two_point_gap.max((primal - dual).abs() / primal);
        oracle_err = oracle_err.max((primal - two_point_oracle(p, b0, b1)).abs() / primal);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut gap3: f64 = 0.0;
    let mut ordered = true;
    for _ in 0..3 {
        let t = random_reversible3(&mut rng);
        let (a, b) = (random_interior(&mut rng, 3), random_interior(&mut rng, 3));
        let primal = primal_w2(&t, &a, &b, 128, &PrimalOptions::default()).unwrap().value;
        let dual = dual_w2_lower(&t, &a, &b, 128, &DualOptions { refine: 1, ..DualOptions::default() }).unwrap().value;
        ordered &= dual <= primal;
        gap3 = gap3.max((primal - dual) / primal);
    }
    let ok = two_point_gap <= 1e-3 && oracle_err <= 1e-3 && ordered && gap3 <= 5e-3;
    (ok, format!("two-point gap {two_point_gap:.1e}, oracle error {oracle_err:.1e}; three-state dual ≤ primal: {ordered}, gap {gap3:.1e}"))
}

fn describe(r: &VerificationReport) -> String {
    format!("{:?} margin {:.1e} ({} samples, {} straddling)", r.verdict, r.margin, r.diagnostics.samples, r.diagnostics.straddling)
}

fn gradient_and_transport() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["two_point_soliton", "collapse_product"] {
        let f = flow(name);
        let g = check_gradient_estimate(&f, &SampleOptions { samples: 100, ..SampleOptions::default() });
        let t = check_transport_estimate(&f, &TransportOptions { samples: 20, ..TransportOptions::default() });
        ok &= g.verdict == Verdict::Pass && g.margin >= -1e-8 && g.diagnostics.inconclusive == 0;
        ok &= t.verdict == Verdict::Pass && t.margin >= -1e-3 && t.diagnostics.inconclusive == 0;
        if name == "collapse_product" {
            ok &= g.diagnostics.straddling > 0 && t.diagnostics.straddling > 0;
        }
        parts.push(format!("{name}: gradient {}, transport {}", describe(&g), describe(&t)));
    }
    (ok, parts.join("; "))
}

fn convexity_and_equivalence() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["static", "two_point_soliton"] {
        let r = check_dynamic_convexity(&flow(name), &ConvexityOptions::default());
        ok &= r.verdict == Verdict::Pass && r.diagnostics.inconclusive == 0;
        parts.push(format!("{name}: {}", describe(&r)));
    }
    let opts = VerifyOptions { transport: TransportOptions { samples: 8, ..TransportOptions::default() }, ..VerifyOptions::default() };
    let mut verdicts = Vec::new();
    for name in BUILTIN_NAMES {
        let rep = verify_srf(&flow(name), &opts);
        ok &= rep.consistent;
        let v = rep.get(srf_core::curvature::Criterion::Bochner).unwrap().verdict;
        verdicts.push(format!("{name}={v:?}{}", if rep.consistent { "" } else { "(disagree)" }));
    }
    parts.push(format!("equivalence: {}", verdicts.join(", ")));
    (ok, parts.join("; "))
}

fn negative_control() -> Outcome {
    let f = flow("supercritical_two_point");
    let reports = [
        check_bochner(&f, &BochnerOptions::default()),
        check_gradient_estimate(&f, &SampleOptions::default()),
        check_transport_estimate(&f, &TransportOptions::default()),
        check_dynamic_convexity(&f, &ConvexityOptions::default()),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for r in &reports {
        let again = recheck(&f, r);
        let reproduced = matches!(again, Ok(v) if v < -r.tolerance);
        ok &= r.verdict == Verdict::Violation && reproduced;
        parts.push(format!("{} {:?} (recheck {})", r.criterion.name(), r.verdict, if reproduced { "reproduced" } else { "FAILED" }));
    }
    (ok, parts.join(", "))
}

fn reverse_poincare() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["two_point_soliton", "collapse_product"] {
        let r = check_reverse_poincare(&flow(name), &SampleOptions { samples: 100, ..SampleOptions::default() });
        ok &= r.verdict == Verdict::Pass && r.margin >= -1e-8 && r.diagnostics.inconclusive == 0;
        parts.push(format!("{name}: {}", describe(&r)));
    }
    (ok, parts.join("; "))
}

fn primitives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = Vec::new();
    // 10⁴ samples: log mean, self-adjointness, Γ₂-form symmetry.
    let mut lm_worst: f64 = 0.0;
    let mut sa_worst: f64 = 0.0;
    let mut g2_worst: f64 = 0.0;
    for _ in 0..10_000 {
        let (a, b): (f64, f64) = (10f64.powf(rng.random_range(-6.0..3.0)), 10f64.powf(rng.random_range(-6.0..3.0)));
        let l = log_mean(a, b).unwrap();
        let (d1, d2) = log_mean_partials(a, b).unwrap();
        let bounds = l >= (a * b).sqrt() * (1.0 - 1e-12) && l <= 0.5 * (a + b) * (1.0 + 1e-12);
        let euler = (a * d1 + b * d2 - l).abs() / l;
        let chain = (l * (b.ln() - a.ln()) - (b - a)).abs() / (a + b);
        lm_worst = lm_worst.max(euler).max(chain).max(if bounds { 0.0 } else { 1.0 });

        let t = random_reversible3(&mut rng);
        let psi = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let phi = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let lhs = ip_pi(&t, &laplacian(&t, &psi).unwrap(), &phi);
        let rhs = ip_pi(&t, &psi, &laplacian(&t, &phi).unwrap());
        sa_worst = sa_worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));

        let mu = random_interior(&mut rng, 3);
        let form = gamma2_form(&t, &mu, BoundaryPolicy::Reject).unwrap();
        let direct = gamma2(&t, &mu, &psi, BoundaryPolicy::Reject).unwrap();
        let asym = (&form - form.transpose()).amax() / (1.0 + form.amax());
        g2_worst = g2_worst.max(asym).max((psi.dot(&(&form * &psi)) - direct).abs() / (1.0 + direct.abs()));
    }
    if lm_worst > 1e-10 {
        failures.push(format!("log mean {lm_worst:.1e}"));
    }
    if sa_worst > 1e-10 {
        failures.push(format!("self-adjointness {sa_worst:.1e}"));
    }
    if g2_worst > 1e-10 {
        failures.push(format!("Γ₂ form {g2_worst:.1e}"));
    }
    // 10² samples: maximum principle and propagator composition.
    let names = ["toy", "collapse_product", "explosion", "two_point_soliton", "static"];
    let mut mp_worst: f64 = 0.0;
    let mut comp_worst: f64 = 0.0;
    for k in 0..100 {
        let f = flow(names[k % names.len()]);
        let (t0, t1) = f.time_range();
        let mut ts: Vec<f64> = (0..3).map(|_| t0 + (t1 - t0) * rng.random_range(0.02..0.98)).collect();
        ts.sort_by(f64::total_cmp);
        let (s, r, t) = (ts[0], ts[1], ts[2]);
        let (pts, _) = propagator_matrix(&f, s, t, &heat_opts()).unwrap();
        let psi = DVector::from_fn(pts.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let out = &pts * &psi;
        mp_worst = mp_worst.max(out.max() - psi.max()).max(psi.min() - out.min());
        let (prs, _) = propagator_matrix(&f, s, r, &heat_opts()).unwrap();
        let (ptr, _) = propagator_matrix(&f, r, t, &heat_opts()).unwrap();
        comp_worst = comp_worst.max((&ptr * &prs - &pts).amax());
    }
    if mp_worst > 1e-10 {
        failures.push(format!("maximum principle {mp_worst:.1e}"));
    }
    if comp_worst > 1e-8 {
        failures.push(format!("composition {comp_worst:.1e}"));
    }
    // Entropy Hessian along geodesics against Γ₂ of the velocity potential.
    let mut hess_worst: f64 = 0.0;
    for p in [1.0, 0.4] {
        let t = MarkovTriple::two_point(p).unwrap();
        let k = 128;
        let g = geodesic(&t, &measure(&[0.8, 0.2]), &measure(&[0.3, 0.7]), k, &PrimalOptions::default()).unwrap();
        let kk = k as f64;
        let h = |i: usize| entropy(&t, &g.path.node(i));
        let potential = |i: usize| {
            let m = (g.path.node(i - 1) + g.path.node(i)) * 0.5;
            metric_tensor(&t, &m, &((g.path.node(i) - g.path.node(i - 1)) * kk)).unwrap().potential
        };
        for j in [k / 4, k / 2, 3 * k / 4] {
            let second = kk * kk * (h(j + 1) - 2.0 * h(j) + h(j - 1));
            let psi = (potential(j) + potential(j + 1)) * 0.5;
            let g2 = gamma2(&t, &g.path.node(j), &psi, BoundaryPolicy::Reject).unwrap();
            hess_worst = hess_worst.max(((second - g2) / g2).abs());
        }
    }
    if hess_worst > 5e-2 {
        failures.push(format!("Hessian {hess_worst:.1e}"));
    }
    let detail = format!(
        "log mean {lm_worst:.1e}, self-adjoint {sa_worst:.1e}, Γ₂ form {g2_worst:.1e} (10⁴ each); max principle {mp_worst:.1e}, composition {comp_worst:.1e} (10²); Hessian {hess_worst:.1e}"
    );
    (failures.is_empty(), detail)
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("soliton Bochner gap is sharp", soliton_bochner),
        ("static two-point Ricci bound 2p", static_two_point),
        ("heat equilibration law", equilibration_law),
        ("collapse continuity", collapse_continuity),
        ("transport sandwich", transport_sandwich),
        ("gradient and transport estimates", gradient_and_transport),
        ("dynamic convexity and equivalence", convexity_and_equivalence),
        ("super-critical negative control", negative_control),
        ("reverse Poincaré", reverse_poincare),
        ("primitive invariants", primitives),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = run();
        if !ok {
            failed += 1;
        }
        println!("criterion {:>2} {} {name}: {detail} [{:.1?}]", i + 1, if ok { "PASS" } else { "FAIL" }, t.elapsed());
    }
    let total = start.elapsed();
    let in_budget = total <= Duration::from_secs(300);
    println!("acceptance runtime {:.1?} ({})", total, if in_budget { "within 5 min" } else { "over 5 min" });
    if failed > 0 || !in_budget {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
