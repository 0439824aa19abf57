use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use srf_core::scenarios::BUILTIN_NAMES;
use srf_core::schedule::{
    product_flow, validate_flow, EdgeSchedule, IntervalSpec, Params, PiSchedule, RateSchedule, SingularFlow, SingularTransition,
};
use srf_core::{builtin_scenario, MarkovTriple};

fn collapsing_pair(s: RateSchedule, declared_pi: f64) -> SingularFlow {
    let iv = IntervalSpec::new(
        0.0,
        1.0,
        vec!["a".into(), "b".into(), "c".into()],
        vec![
            EdgeSchedule { from: 0, to: 1, schedule: s.clone() },
            EdgeSchedule { from: 1, to: 0, schedule: s },
            EdgeSchedule { from: 1, to: 2, schedule: RateSchedule::Constant { c: 1.0 } },
            EdgeSchedule { from: 2, to: 1, schedule: RateSchedule::Constant { c: 1.0 } },
        ],
        vec![PiSchedule::Constant { v: 1.0 / 3.0 }; 3],
    )
    .unwrap();
    let first = SingularTransition::identity(0.0, None, Some(&iv)).unwrap();
    let mut last = SingularTransition::derived(1.0, vec!["ab".into(), "c".into()], Some((&iv, vec![0, 0, 1])), None).unwrap();
    let q = DMatrix::from_row_slice(2, 2, &[0.0, last.boundary.rate(0, 1), last.boundary.rate(1, 0), 0.0]);
    last.boundary = MarkovTriple::new_unchecked(
        last.boundary.labels().to_vec(),
        q,
        DVector::from_vec(vec![declared_pi, 1.0 - declared_pi]),
    )
    .unwrap();
    // Interior collapse: continue as the boundary triple on [1, 2].
    let bt = last.boundary.clone();
    let after = IntervalSpec::constant(&bt, 1.0, 2.0).unwrap();
    last.spawn = Some(vec![0, 1]);
    let end = SingularTransition::identity(2.0, Some(&after), None).unwrap();
    SingularFlow::new("pair", vec![iv, after], vec![first, last, end]).unwrap()
}

#[test]
fn well_posed_interior_collapse_validates() {
    let f = collapsing_pair(RateSchedule::CollapsePole { c: 1.0, t_end: 1.0, order: 1.0 }, 2.0 / 3.0);
    let rep = validate_flow(&f);
    assert!(rep.passed(), "{:?}", rep.failures());
}

#[test]
fn square_root_pole_fails_divergence() {
    let f = collapsing_pair(RateSchedule::CollapsePole { c: 1.0, t_end: 1.0, order: 0.5 }, 2.0 / 3.0);
    let rep = validate_flow(&f);
    assert!(rep.has_failure("rate-divergence"), "{:?}", rep.checks);
}

#[test]
fn mismatched_boundary_pi_is_flagged() {
    let f = collapsing_pair(RateSchedule::CollapsePole { c: 1.0, t_end: 1.0, order: 1.0 }, 0.5);
    let rep = validate_flow(&f);
    assert!(rep.has_failure("limit-pi"));
}

#[test]
fn slow_interior_collapse_fails_growth() {
    let f = collapsing_pair(RateSchedule::CollapsePole { c: 0.25, t_end: 1.0, order: 1.0 }, 2.0 / 3.0);
    let rep = validate_flow(&f);
    assert!(rep.has_failure("collapse-growth"));
}

#[test]
fn detailed_balance_violation_is_flagged() {
    let iv = IntervalSpec::new(
        0.0,
        1.0,
        vec!["a".into(), "b".into()],
        vec![
            EdgeSchedule { from: 0, to: 1, schedule: RateSchedule::Constant { c: 1.0 } },
            EdgeSchedule { from: 1, to: 0, schedule: RateSchedule::Affine { a: 1.0, b: 1.0 } },
        ],
        vec![PiSchedule::Constant { v: 0.5 }; 2],
    )
    .unwrap();
    let first = SingularTransition::identity(0.0, None, Some(&iv)).unwrap();
    let last = SingularTransition::identity(1.0, Some(&iv), None).unwrap();
    let f = SingularFlow::new("bad", vec![iv], vec![first, last]).unwrap();
    assert!(validate_flow(&f).has_failure("detailed-balance"));
}

#[test]
fn product_of_two_points_is_a_four_cycle() {
    let a = SingularFlow::constant("a", &MarkovTriple::two_point(1.0).unwrap(), 0.0, 1.0).unwrap();
    let b = SingularFlow::constant("b", &MarkovTriple::two_point(1.0).unwrap(), 0.0, 1.0).unwrap();
    let p = product_flow(&a, &b).unwrap();
    let tr = p.eval_at(0.5).unwrap().triple;
    assert_eq!(tr.len(), 4);
    for x in 0..4 {
        assert!((tr.pi()[x] - 0.25).abs() < 1e-15);
        let neighbours: Vec<usize> = (0..4).filter(|&y| y != x && tr.rate(x, y) > 0.0).collect();
        assert_eq!(neighbours.len(), 2);
        for y in neighbours {
            assert_eq!(tr.rate(x, y), 1.0);
            // Neighbours differ in exactly one coordinate.
            assert_eq!(((x / 2) != (y / 2)) as u8 + ((x % 2) != (y % 2)) as u8, 1);
        }
    }
}

#[test]
fn product_with_singleton_is_isomorphic() {
    let f = builtin_scenario("two_point_soliton", &Params::new()).unwrap();
    let pt = SingularFlow::constant("pt", &MarkovTriple::point("p"), 0.0, 0.25).unwrap();
    let g = product_flow(&f, &pt).unwrap();
    for &t in &[0.0, 0.1, 0.2, 0.249] {
        let (a, b) = (f.eval_at(t).unwrap(), g.eval_at(t).unwrap());
        assert!((a.triple.rates() - b.triple.rates()).norm() < 1e-12);
        assert!((a.triple.pi() - b.triple.pi()).norm() < 1e-15);
    }
    assert!(validate_flow(&g).passed());
}

#[test]
fn incompatible_ranges_are_rejected() {
    let a = SingularFlow::constant("a", &MarkovTriple::two_point(1.0).unwrap(), 0.0, 1.0).unwrap();
    let b = SingularFlow::constant("b", &MarkovTriple::two_point(1.0).unwrap(), 0.0, 2.0).unwrap();
    assert!(product_flow(&a, &b).is_err());
}

#[test]
fn regular_refinement_leaves_no_singular_times() {
    let f = builtin_scenario("static", &Params::new()).unwrap();
    let g = f.refine(&[0.3, 0.6]).unwrap();
    assert_eq!(g.n_intervals(), 3);
    assert!(g.singular_times().is_empty());
    assert!(validate_flow(&g).passed());
}

fn builtin() -> impl Strategy<Value = &'static str> {
    prop::sample::select(BUILTIN_NAMES.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_at_satisfies_detailed_balance(name in builtin(), u in 0.0f64..1.0) {
        let f = builtin_scenario(name, &Params::new()).unwrap();
        for iv in &f.intervals {
            let t = iv.t_start + (iv.t_end - iv.t_start) * (0.001 + 0.998 * u);
            let p = f.eval_at(t).unwrap();
            prop_assert!(p.triple.detailed_balance_defect() < 1e-12);
        }
    }

    #[test]
    fn rates_respect_log_lipschitz_constant(name in builtin(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
        let f = builtin_scenario(name, &Params::new()).unwrap();
        for iv in &f.intervals {
            let len = iv.t_end - iv.t_start;
            // Stay away from poles so the constant is finite.
            let (a, b) = (iv.t_start + 0.05 * len, iv.t_end - 0.05 * len);
            let (s, t) = (a + (b - a) * u.min(v), a + (b - a) * u.max(v));
            let l = iv.log_lipschitz(a, b);
            let (qs, qt) = (iv.rates_at(s), iv.rates_at(t));
            for e in &iv.edges {
                let (x, y) = (qs[(e.from, e.to)], qt[(e.from, e.to)]);
                let w = (l * (t - s)).exp() * (1.0 + 1e-12);
                prop_assert!(y <= w * x && x <= w * y);
            }
        }
    }
}
