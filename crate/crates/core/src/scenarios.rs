//! Built-in example flows.
//!
//! | name | description |
//! |---|---|
//! | `static` | complete graph on three vertices with rate `p`, uniform `π`, on `[0, T]` |
//! | `two_point_soliton` | `p_t = p0 / (1 - 4 p0 t)` on `[0, 1/(4 p0)]`, collapsing to a point |
//! | `expanding_soliton` | `p_t = p0 / (1 - 2 κ t)` with `κ < 0` on `[0, T]` |
//! | `supercritical_two_point` | `p_t = p0 / (1 - 5 p0 t)`, shrinking faster than the curvature allows |
//! | `collapse_product` | static two-point `Y` times a shrinking two-point `Z` that collapses at `1/(2κ)` |
//! | `explosion` | static two-point `Y`, times a two-point `Z` spawned at `t1` with `L_t = 1/(2|κ|(t - t1))` |
//! | `toy` | path `a-b-c-d` collapsing `{a,b,c}` at `t1`, then `d` spawning `e` |

use nalgebra::{DMatrix, DVector};

use crate::chain::MarkovTriple;
use crate::error::{Error, Result};
use crate::schedule::{product_flow, EdgeSchedule, IntervalSpec, Params, PiSchedule, RateSchedule, SingularFlow, SingularTransition};

pub const BUILTIN_NAMES: [&str; 7] = [
    "static",
    "two_point_soliton",
    "expanding_soliton",
    "supercritical_two_point",
    "collapse_product",
    "explosion",
    "toy",
];

struct ParamReader<'a> {
    scenario: &'a str,
    params: &'a Params,
    used: Vec<&'static str>,
}

impl<'a> ParamReader<'a> {
    fn new(scenario: &'a str, params: &'a Params) -> Self {
        Self { scenario, params, used: Vec::new() }
    }

    fn get(&mut self, key: &'static str, default: f64) -> Result<f64> {
        self.used.push(key);
        let v = self.params.get(key).copied().unwrap_or(default);
        if !v.is_finite() {
            return Err(Error::Invalid(format!("{}: parameter {key} must be finite", self.scenario)));
        }
        Ok(v)
    }

    fn positive(&mut self, key: &'static str, default: f64) -> Result<f64> {
        let v = self.get(key, default)?;
        if v <= 0.0 {
            return Err(Error::Invalid(format!("{}: parameter {key} must be positive, got {v}", self.scenario)));
        }
        Ok(v)
    }

    fn finish(self) -> Result<()> {
        for k in self.params.keys() {
            if !self.used.contains(&k.as_str()) {
                return Err(Error::Invalid(format!("{}: unknown parameter {k}", self.scenario)));
            }
        }
        Ok(())
    }
}

/// Build a named example flow. Unknown names and parameters are rejected.
pub fn builtin_scenario(name: &str, params: &Params) -> Result<SingularFlow> {
    let mut r = ParamReader::new(name, params);
    let flow = match name {
        "static" => {
            let p = r.positive("p", 1.0)?;
            let t = r.positive("T", 1.0)?;
            let n = 3;
            let rates = DMatrix::from_fn(n, n, |x, y| if x == y { 0.0 } else { p });
            let labels = (0..n).map(|k| format!("v{k}")).collect();
            let triple = MarkovTriple::new(labels, rates, DVector::from_element(n, 1.0 / n as f64))?;
            SingularFlow::constant("static", &triple, 0.0, t)?
        }
        "two_point_soliton" => {
            let p0 = r.positive("p0", 1.0)?;
            shrinking_two_point("two_point_soliton", p0, 2.0 * p0)?
        }
        "supercritical_two_point" => {
            let p0 = r.positive("p0", 1.0)?;
            shrinking_two_point("supercritical_two_point", p0, 2.5 * p0)?
        }
        "expanding_soliton" => {
            let p0 = r.positive("p0", 1.0)?;
            let kappa = r.get("kappa", -1.0)?;
            let t = r.positive("T", 1.0)?;
            if kappa >= 0.0 {
                return Err(Error::Invalid("expanding_soliton: kappa must be negative".into()));
            }
            let iv = two_point_interval(0.0, t, ["a", "b"], RateSchedule::SolitonScaled { c: p0, kappa, t_ref: 0.0, scale: 1.0 })?;
            bracket("expanding_soliton", vec![iv])?
        }
        "collapse_product" => {
            let kappa = r.positive("kappa", 1.0)?;
            let py = r.positive("p_y", 1.0)?;
            let pz = r.positive("p_z", 2.0 * kappa)?;
            let t1 = 1.0 / (2.0 * kappa);
            let t_end = r.get("T", 2.0 * t1)?;
            if t_end <= t1 {
                return Err(Error::Invalid("collapse_product: T must exceed the collapse time".into()));
            }
            let y = static_two_point("y", py, 0.0, t_end)?;
            let zs = two_point_interval(0.0, t1, ["z0", "z1"], RateSchedule::SolitonScaled { c: pz, kappa, t_ref: 0.0, scale: 1.0 })?;
            let zp = IntervalSpec::constant(&MarkovTriple::point("z"), t1, t_end)?;
            let z = SingularFlow::new(
                "z",
                vec![zs.clone(), zp.clone()],
                vec![
                    SingularTransition::identity(0.0, None, Some(&zs))?,
                    SingularTransition::derived(t1, vec!["z".into()], Some((&zs, vec![0, 0])), Some((&zp, vec![0])))?,
                    SingularTransition::identity(t_end, Some(&zp), None)?,
                ],
            )?;
            let mut f = product_flow(&y, &z)?;
            f.name = "collapse_product".into();
            f
        }
        "explosion" => {
            let kappa = r.get("kappa", -1.0)?;
            let py = r.positive("p_y", 1.0)?;
            let pz = r.positive("p_z", 1.0)?;
            let t1 = r.positive("t1", 0.5)?;
            let t_end = r.get("T", 2.0 * t1)?;
            if kappa >= 0.0 {
                return Err(Error::Invalid("explosion: kappa must be negative".into()));
            }
            if t_end <= t1 {
                return Err(Error::Invalid("explosion: T must exceed the spawn time".into()));
            }
            let y = static_two_point("y", py, 0.0, t_end)?;
            let zp = IntervalSpec::constant(&MarkovTriple::point("z"), 0.0, t1)?;
            let pole = RateSchedule::SpawnPole { c: pz / (2.0 * kappa.abs()), t_start: t1, order: 1.0 };
            let zs = two_point_interval(t1, t_end, ["z0", "z1"], pole)?;
            let z = SingularFlow::new(
                "z",
                vec![zp.clone(), zs.clone()],
                vec![
                    SingularTransition::identity(0.0, None, Some(&zp))?,
                    SingularTransition::derived(t1, vec!["z".into()], Some((&zp, vec![0])), Some((&zs, vec![0, 0])))?,
                    SingularTransition::identity(t_end, Some(&zs), None)?,
                ],
            )?;
            let mut f = product_flow(&y, &z)?;
            f.name = "explosion".into();
            f
        }
        "toy" => {
            let c = r.positive("c", 1.0)?;
            let t1 = r.positive("t1", 1.0)?;
            let t_end = r.get("T", 2.0 * t1)?;
            if t_end <= t1 {
                return Err(Error::Invalid("toy: T must exceed t1".into()));
            }
            toy(c, t1, t_end)?
        }
        other => {
            return Err(Error::Invalid(format!("unknown scenario {other}; known: {}", BUILTIN_NAMES.join(", "))));
        }
    };
    r.finish()?;
    Ok(flow)
}

fn symmetric_edges(x: usize, y: usize, s: RateSchedule) -> [EdgeSchedule; 2] {
    [EdgeSchedule { from: x, to: y, schedule: s.clone() }, EdgeSchedule { from: y, to: x, schedule: s }]
}

fn two_point_interval(t0: f64, t1: f64, labels: [&str; 2], s: RateSchedule) -> Result<IntervalSpec> {
    IntervalSpec::new(
        t0,
        t1,
        labels.iter().map(|l| l.to_string()).collect(),
        symmetric_edges(0, 1, s).to_vec(),
        vec![PiSchedule::Constant { v: 0.5 }; 2],
    )
}

fn static_two_point(prefix: &str, p: f64, t0: f64, t1: f64) -> Result<SingularFlow> {
    let iv = two_point_interval(t0, t1, [&format!("{prefix}0"), &format!("{prefix}1")], RateSchedule::Constant { c: p })?;
    bracket(prefix, vec![iv])
}

/// Outer identity transitions around a single interval.
fn bracket(name: &str, intervals: Vec<IntervalSpec>) -> Result<SingularFlow> {
    let iv = &intervals[0];
    let first = SingularTransition::identity(iv.t_start, None, Some(iv))?;
    let last = SingularTransition::identity(iv.t_end, Some(iv), None)?;
    SingularFlow::new(name, intervals, vec![first, last])
}

/// Two-point space with rates `p0 L_t`, `L_t = 1/(1 - 2κt)`, collapsing to
/// the point `ab` at `1/(2κ)`.
fn shrinking_two_point(name: &str, p0: f64, kappa: f64) -> Result<SingularFlow> {
    let t_end = 1.0 / (2.0 * kappa);
    let iv = two_point_interval(0.0, t_end, ["a", "b"], RateSchedule::SolitonScaled { c: p0, kappa, t_ref: 0.0, scale: 1.0 })?;
    let first = SingularTransition::identity(0.0, None, Some(&iv))?;
    let last = SingularTransition::derived(t_end, vec!["ab".into()], Some((&iv, vec![0, 0])), None)?;
    SingularFlow::new(name, vec![iv], vec![first, last])
}

fn toy(c: f64, t1: f64, t_end: f64) -> Result<SingularFlow> {
    let labels = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let pole = RateSchedule::CollapsePole { c, t_end: t1, order: 1.0 };
    let mut edges = Vec::new();
    edges.extend(symmetric_edges(0, 1, pole.clone()));
    edges.extend(symmetric_edges(1, 2, pole));
    edges.extend(symmetric_edges(2, 3, RateSchedule::Constant { c: 1.0 }));
    let before = IntervalSpec::new(0.0, t1, labels(&["a", "b", "c", "d"]), edges, vec![PiSchedule::Constant { v: 0.25 }; 4])?;

    let mut edges = vec![
        EdgeSchedule { from: 0, to: 1, schedule: RateSchedule::Constant { c: 1.0 / 3.0 } },
        EdgeSchedule { from: 1, to: 0, schedule: RateSchedule::Constant { c: 2.0 } },
    ];
    edges.extend(symmetric_edges(1, 2, RateSchedule::SpawnPole { c: 1.0, t_start: t1, order: 1.0 }));
    let pi = [0.75, 0.125, 0.125].iter().map(|&v| PiSchedule::Constant { v }).collect();
    let after = IntervalSpec::new(t1, t_end, labels(&["r", "d", "e"]), edges, pi)?;

    let transitions = vec![
        SingularTransition::identity(0.0, None, Some(&before))?,
        SingularTransition::derived(t1, labels(&["r", "d"]), Some((&before, vec![0, 0, 0, 1])), Some((&after, vec![0, 1, 1])))?,
        SingularTransition::identity(t_end, Some(&after), None)?,
    ];
    SingularFlow::new("toy", vec![before, after], transitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::validate_flow;

    #[test]
    fn every_builtin_validates() {
        for name in BUILTIN_NAMES {
            let f = builtin_scenario(name, &Params::new()).unwrap();
            let rep = validate_flow(&f);
            assert!(rep.passed(), "{name}: {:?}", rep.failures());
        }
    }

    #[test]
    fn two_point_soliton_collapses_at_quarter() {
        let f = builtin_scenario("two_point_soliton", &Params::new()).unwrap();
        assert!((f.time_range().1 - 0.25).abs() < 1e-15);
        let mut p = Params::new();
        p.insert("p0".into(), 2.0);
        let f = builtin_scenario("two_point_soliton", &p).unwrap();
        assert!((f.time_range().1 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn collapse_product_singular_time() {
        let f = builtin_scenario("collapse_product", &Params::new()).unwrap();
        assert_eq!(f.singular_times(), vec![0.5]);
        assert_eq!(f.states_at(0.25).unwrap().len(), 4);
        assert_eq!(f.states_at(0.75).unwrap(), vec!["y0.z".to_string(), "y1.z".to_string()]);
    }

    #[test]
    fn toy_boundary_triple() {
        let f = builtin_scenario("toy", &Params::new()).unwrap();
        let b = &f.transitions[1].boundary;
        assert!((b.rate(0, 1) - 1.0 / 3.0).abs() < 1e-14);
        assert!((b.rate(1, 0) - 1.0).abs() < 1e-14);
        assert!((b.pi()[0] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn rejects_unknown_names_and_params() {
        assert!(builtin_scenario("nope", &Params::new()).is_err());
        let mut p = Params::new();
        p.insert("bogus".into(), 1.0);
        assert!(builtin_scenario("static", &p).is_err());
        p.clear();
        p.insert("p0".into(), -1.0);
        assert!(builtin_scenario("two_point_soliton", &p).is_err());
    }

    #[test]
    fn outer_collapse_growth_is_a_warning() {
        let f = builtin_scenario("two_point_soliton", &Params::new()).unwrap();
        let rep = validate_flow(&f);
        assert!(rep.passed());
        assert!(rep.warnings().iter().any(|c| c.condition == "collapse-growth"));
    }
}
