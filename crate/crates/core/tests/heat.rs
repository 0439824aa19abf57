use nalgebra::DVector;
use proptest::prelude::*;
use srf_core::heat::{dual_propagator_matrix, propagate, propagate_dual, propagator_matrix, HeatOptions};
use srf_core::schedule::Params;
use srf_core::{builtin_scenario, SingularFlow};

fn opts() -> HeatOptions {
    HeatOptions { samples_per_interval: 0, ..HeatOptions::default() }
}

fn flow(name: &str) -> SingularFlow {
    builtin_scenario(name, &Params::new()).unwrap()
}

fn len_at(f: &SingularFlow, t: f64) -> usize {
    f.states_at(t).unwrap().len()
}

#[test]
fn constants_are_preserved_across_collapse() {
    let f = flow("toy");
    let sol = propagate(&f, 0.2, 1.7, &DVector::from_element(4, 3.5), &opts()).unwrap();
    assert!(sol.value.iter().all(|&v| (v - 3.5).abs() < 1e-10));
    assert_eq!(sol.states, vec!["r", "d", "e"]);
}

#[test]
fn two_point_soliton_difference_decay() {
    // δ' = -(Q_ab + Q_ba) δ with Q = p0/(1 - 4 p0 t), so
    // δ_t / δ_s = ((1 - 4 t) / (1 - 4 s))^{1/2} for p0 = 1.
    let f = flow("two_point_soliton");
    for &(s, t) in &[(0.0, 0.1), (0.05, 0.2), (0.1, 0.249)] {
        let sol = propagate(&f, s, t, &DVector::from_vec(vec![-1.0, 1.0]), &opts()).unwrap();
        let d = (sol.value[1] - sol.value[0]) / 2.0;
        let exact = ((1.0 - 4.0 * t) / (1.0 - 4.0 * s)).sqrt();
        assert!(((d - exact) / exact).abs() < 1e-8, "s={s} t={t}: {d} vs {exact}");
    }
}

#[test]
fn two_point_difference_matches_quadrature_for_sampled_rates() {
    use srf_core::schedule::{EdgeSchedule, IntervalSpec, PiSchedule, RateSchedule, SingularTransition};
    let s = RateSchedule::LogLipschitzSampled { times: vec![0.0, 0.3, 0.7, 1.0], values: vec![1.0, 3.0, 0.5, 2.0] };
    let iv = IntervalSpec::new(
        0.0,
        1.0,
        vec!["a".into(), "b".into()],
        vec![EdgeSchedule { from: 0, to: 1, schedule: s.clone() }, EdgeSchedule { from: 1, to: 0, schedule: s.clone() }],
        vec![PiSchedule::Constant { v: 0.5 }; 2],
    )
    .unwrap();
    let f = SingularFlow::new(
        "sampled",
        vec![iv.clone()],
        vec![SingularTransition::identity(0.0, None, Some(&iv)).unwrap(), SingularTransition::identity(1.0, Some(&iv), None).unwrap()],
    )
    .unwrap();
    // Exact integral of a log-linear piece: (v1 - v0) (t1 - t0) / ln(v1 / v0).
    let pieces: [(f64, f64, f64, f64); 3] = [(0.0, 0.3, 1.0, 3.0), (0.3, 0.7, 3.0, 0.5), (0.7, 1.0, 0.5, 2.0)];
    let integral: f64 = pieces.iter().map(|&(t0, t1, v0, v1)| (v1 - v0) * (t1 - t0) / (v1 / v0).ln()).sum();
    let sol = propagate(&f, 0.0, 1.0, &DVector::from_vec(vec![-1.0, 1.0]), &opts()).unwrap();
    let d = (sol.value[1] - sol.value[0]) / 2.0;
    assert!((d / (-2.0 * integral).exp() - 1.0).abs() < 1e-8);
}

#[test]
fn stationary_measure_is_fixed() {
    let f = flow("static");
    let pi = DVector::from_element(3, 1.0 / 3.0);
    let sol = propagate_dual(&f, 0.1, 0.9, &pi, &opts()).unwrap();
    assert!((sol.value - pi).norm() < 1e-12);
}

#[test]
fn dual_of_point_mass_before_collapse_is_local_equilibrium() {
    // δ_r at t1 split over {a,b,c} by π̄ = (1/3, 1/3, 1/3), with O(t1 - s) error.
    let f = flow("toy");
    let mut prev = f64::INFINITY;
    for &gap in &[1e-1, 1e-2, 1e-3] {
        let s = 1.0 - gap;
        let sol = propagate_dual(&f, s, 1.0, &DVector::from_vec(vec![1.0, 0.0]), &opts()).unwrap();
        let err = (0..3).map(|x| (sol.value[x] - 1.0 / 3.0).abs()).fold(sol.value[3].abs(), f64::max);
        assert!(err < 2.0 * gap, "gap {gap}: {err}");
        assert!(err < prev);
        prev = err;
    }
}

#[test]
fn forward_routes_agree_with_dual_routes() {
    for name in ["toy", "collapse_product", "explosion", "two_point_soliton"] {
        let f = flow(name);
        let (t0, t1) = f.time_range();
        let (s, t) = (t0 + 0.1 * (t1 - t0), t0 + 0.9 * (t1 - t0));
        let (p, _) = propagator_matrix(&f, s, t, &opts()).unwrap();
        let (q, _) = dual_propagator_matrix(&f, s, t, &opts()).unwrap();
        assert!((p.transpose() - q).amax() < 1e-9, "{name}");
    }
}

#[test]
fn collapse_projection_converges_under_refinement() {
    let f = flow("collapse_product");
    let psi = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.5]);
    let coarse = propagate(&f, 0.0, 0.9, &psi, &HeatOptions { eps: 1e-5, ..opts() }).unwrap();
    let fine = propagate(&f, 0.0, 0.9, &psi, &HeatOptions { eps: 1e-7, ..opts() }).unwrap();
    assert!((coarse.value - fine.value).amax() < 1e-4);
    let b = fine.boundaries.iter().find(|b| b.time == 0.5).unwrap();
    let left = b.left_limit.as_ref().unwrap();
    // Left limits agree on each collapse class y·{z0, z1}.
    assert!((left[0] - left[1]).abs() < 1e-4 && (left[2] - left[3]).abs() < 1e-4);
    assert!((b.value[0] - left[0]).abs() < 1e-4);
    assert!(fine.diagnostics.projection_error() < 1e-4);
}

#[test]
fn equilibration_before_collapse_follows_the_envelope() {
    // Toy class {a,b,c}: spread decays at least like exp(-∫ q) = (t1 - t)^c / t1^c.
    let f = flow("toy");
    let psi = DVector::from_vec(vec![1.0, 0.0, -1.0, 0.0]);
    let mut prev = f64::INFINITY;
    for &t in &[0.5, 0.9, 0.99, 0.999] {
        let sol = propagate(&f, 0.0, t, &psi, &opts()).unwrap();
        let v = &sol.value;
        let spread = v.rows(0, 3).max() - v.rows(0, 3).min();
        assert!(spread <= 2.0 * 4.0 * (1.0 - t), "t={t}: {spread}");
        assert!(spread < prev);
        prev = spread;
    }
}

fn scenario() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec!["toy", "collapse_product", "explosion", "two_point_soliton", "static"])
}

fn times(f: &SingularFlow, a: f64, b: f64, c: f64) -> (f64, f64, f64) {
    let (t0, t1) = f.time_range();
    let mut v = [a, b, c].map(|u| t0 + (t1 - t0) * (0.02 + 0.96 * u));
    v.sort_by(f64::total_cmp);
    (v[0], v[1], v[2])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maximum_principle_and_positivity(name in scenario(), a in 0.0f64..1.0, b in 0.0f64..1.0, seed in prop::collection::vec(0.0f64..1.0, 4)) {
        let f = flow(name);
        let (s, _, t) = times(&f, a, 0.5, b);
        let n = len_at(&f, s);
        let mut psi = DVector::from_iterator(n, seed.iter().cycle().take(n).cloned());
        psi[0] += 0.1;
        let sol = propagate(&f, s, t, &psi, &opts()).unwrap();
        let (lo, hi) = (psi.min(), psi.max());
        prop_assert!(sol.value.iter().all(|&v| v >= lo - 1e-10 && v <= hi + 1e-10));
        if t > s + 1e-3 {
            prop_assert!(sol.value.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn composition_and_adjointness(name in scenario(), a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0, at_singular in any::<bool>()) {
        let f = flow(name);
        let (s, mut r, t) = times(&f, a, b, c);
        let sing: Vec<f64> = f.singular_times().into_iter().filter(|&x| x > s && x < t).collect();
        if at_singular && !sing.is_empty() {
            r = sing[0];
        }
        let (prs, _) = propagator_matrix(&f, s, r, &opts()).unwrap();
        let (ptr, _) = propagator_matrix(&f, r, t, &opts()).unwrap();
        let (pts, _) = propagator_matrix(&f, s, t, &opts()).unwrap();
        prop_assert!((&ptr * &prs - &pts).amax() < 1e-8);
        let (qts, _) = dual_propagator_matrix(&f, s, t, &opts()).unwrap();
        let psi = DVector::from_fn(pts.ncols(), |i, _| (i as f64 * 1.7 + a).sin());
        let sigma = DVector::from_fn(pts.nrows(), |i, _| (i as f64 * 0.9 + c).cos().abs());
        let lhs = (&pts * &psi).dot(&sigma);
        let rhs = psi.dot(&(&qts * &sigma));
        prop_assert!((lhs - rhs).abs() < 1e-8);
        // Mass conservation of the dual propagator.
        prop_assert!(((&qts * &sigma).sum() - sigma.sum()).abs() < 1e-10 * sigma.sum().max(1.0));
    }
}
