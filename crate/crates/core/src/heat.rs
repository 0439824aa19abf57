//! Heat propagators across singular times.
//!
//! Functions evolve forward by `∂ₜψ = Q_t ψ`; measures evolve backward by
//! `∂ₛσ = -Q_sᵀ σ`, so that `P̂_{t,s}` is the transpose of `P_{t,s}` and
//! `⟨P ψ, σ⟩ = ⟨ψ, P̂ σ⟩` in the plain pairing.
//!
//! Inside an interval the Kolmogorov equation is integrated directly. Next
//! to a partition time where some rate explodes the integration stops at
//! distance `ε` and the limit is replaced by its asymptotic form: functions
//! are averaged over a collapse class with weights `π̄^{c,z}` and copied to
//! a spawn class; measures are summed over a spawn class and split over a
//! collapse class by `π̄^{c,z}`. At partition times without exploding rates
//! the maps are identities and the projection is exact.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ode::{dopri5, OdeOptions, OdeStats};
use crate::schedule::{same_time, IntervalSpec, Location, SingularFlow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Functions, forward in time.
    Forward,
    /// Measures, backward in time.
    Backward,
}

/// Which half of a partition time a projection crosses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionStep {
    /// Between the interval on the left and the boundary set.
    Collapse,
    /// Between the boundary set and the interval on the right.
    Spawn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatOptions {
    pub ode: OdeOptions,
    /// Distance kept from partition times with exploding rates.
    pub eps: f64,
    /// Dense output samples per interval; 0 disables dense output.
    pub samples_per_interval: usize,
}

impl Default for HeatOptions {
    fn default() -> Self {
        Self { ode: OdeOptions::default(), eps: 1e-7, samples_per_interval: 256 }
    }
}

/// Values on one interval, in order of integration.
#[derive(Debug, Clone)]
pub struct Segment {
    pub interval: usize,
    pub states: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

/// Values around one crossed partition time.
#[derive(Debug, Clone)]
pub struct BoundaryValue {
    pub transition: usize,
    pub time: f64,
    pub left_limit: Option<DVector<f64>>,
    pub value: DVector<f64>,
    pub right_limit: Option<DVector<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransitionDiagnostics {
    pub transition: usize,
    pub time: f64,
    pub eps_left: f64,
    pub eps_right: f64,
    /// Deviation of the integrated state from its asymptotic form on the
    /// class side (within-class oscillation of functions, or deviation of
    /// measures from the local equilibrium split).
    pub class_spread: f64,
    /// Bound on the change caused by the finite rates over the `ε` gap.
    pub drift_estimate: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct HeatDiagnostics {
    pub ode: OdeStats,
    pub transitions: Vec<TransitionDiagnostics>,
}

impl HeatDiagnostics {
    /// Largest recorded projection error estimate.
    pub fn projection_error(&self) -> f64 {
        self.transitions.iter().map(|d| d.class_spread + d.drift_estimate).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct HeatSolution {
    pub direction: Direction,
    pub s: f64,
    pub t: f64,
    /// Vertex labels of [`HeatSolution::value`]: `X_t` forward, `X_s` backward.
    pub states: Vec<String>,
    pub value: DVector<f64>,
    pub segments: Vec<Segment>,
    pub boundaries: Vec<BoundaryValue>,
    pub diagnostics: HeatDiagnostics,
}

/// Apply one projection rule at transition `i`. Input and output live on
/// the vertex sets on either side of `step` in the direction of travel.
pub fn singular_transition_apply(flow: &SingularFlow, i: usize, state: &DVector<f64>, direction: Direction, step: TransitionStep) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(state.len(), 1, state.as_slice());
    Ok(apply_step(flow, i, &m, direction, step)?.column(0).into_owned())
}

fn apply_step(flow: &SingularFlow, i: usize, y: &DMatrix<f64>, direction: Direction, step: TransitionStep) -> Result<DMatrix<f64>> {
    let tr = flow.transitions.get(i).ok_or_else(|| Error::Domain(format!("no transition {i}")))?;
    let nb = tr.boundary.len();
    let (map, weights) = match step {
        TransitionStep::Collapse => (tr.collapse.as_ref(), flow.collapse_weights(i)),
        TransitionStep::Spawn => (tr.spawn.as_ref(), flow.spawn_weights(i)),
    };
    let map = map.ok_or_else(|| Error::Domain(format!("transition {i} has no {step:?} side")))?;
    let weights = weights.expect("map present");
    let k = y.ncols();
    let (from_len, to_len) = match (direction, step) {
        (Direction::Forward, TransitionStep::Collapse) | (Direction::Backward, TransitionStep::Spawn) => (map.len(), nb),
        _ => (nb, map.len()),
    };
    if y.nrows() != from_len {
        return Err(Error::Shape { what: "state at transition", expected: from_len, got: y.nrows() });
    }
    let mut out = DMatrix::zeros(to_len, k);
    match (direction, step) {
        // Function on a collapse class → weighted average.
        (Direction::Forward, TransitionStep::Collapse) => {
            for (x, &z) in map.iter().enumerate() {
                for j in 0..k {
                    out[(z, j)] += weights[x] * y[(x, j)];
                }
            }
        }
        // Function on X̄ → copy to the spawn class.
        (Direction::Forward, TransitionStep::Spawn) => {
            for (x, &z) in map.iter().enumerate() {
                for j in 0..k {
                    out[(x, j)] = y[(z, j)];
                }
            }
        }
        // Measure on a spawn class → total mass.
        (Direction::Backward, TransitionStep::Spawn) => {
            for (x, &z) in map.iter().enumerate() {
                for j in 0..k {
                    out[(z, j)] += y[(x, j)];
                }
            }
        }
        // Measure on X̄ → split over the collapse class.
        (Direction::Backward, TransitionStep::Collapse) => {
            for (x, &z) in map.iter().enumerate() {
                for j in 0..k {
                    out[(x, j)] = weights[x] * y[(z, j)];
                }
            }
        }
    }
    Ok(out)
}

fn has_pole(iv: &IntervalSpec, at_end: bool) -> bool {
    iv.rate_limits(at_end).iter().any(|q| !q.is_finite())
}

/// Largest finite limiting rate at an endpoint.
fn finite_rate_bound(iv: &IntervalSpec, at_end: bool) -> f64 {
    iv.rate_limits(at_end).iter().filter(|q| q.is_finite()).fold(0.0, |a, &q| a.max(q))
}

fn gap(flow: &SingularFlow, k: usize, at_end: bool, eps: f64) -> Result<f64> {
    let iv = &flow.intervals[k];
    if !has_pole(iv, at_end) {
        return Ok(0.0);
    }
    if eps <= 0.0 || 4.0 * eps >= iv.t_end - iv.t_start {
        return Err(Error::Invalid(format!("ε = {eps} is not small against interval {k}")));
    }
    Ok(eps)
}

struct Run {
    value: DMatrix<f64>,
    segments: Vec<Segment>,
    boundaries: Vec<BoundaryValue>,
    diagnostics: HeatDiagnostics,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return Vec::new();
    }
    (1..n - 1).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

fn integrate(
    iv: &IntervalSpec,
    k: usize,
    from: f64,
    to: f64,
    y: DMatrix<f64>,
    direction: Direction,
    opts: &HeatOptions,
    run: &mut Run,
) -> Result<DMatrix<f64>> {
    let dense = opts.samples_per_interval > 0 && y.ncols() == 1;
    if (to - from).abs() <= 0.0 || (direction == Direction::Forward && to < from) || (direction == Direction::Backward && to > from) {
        if dense {
            run.segments.push(Segment { interval: k, states: iv.states.clone(), times: vec![from], values: vec![y.column(0).into_owned()] });
        }
        return Ok(y);
    }
    let outputs = if dense { linspace(from, to, opts.samples_per_interval) } else { Vec::new() };
    let rhs = |t: f64, y: &DMatrix<f64>| -> DMatrix<f64> {
        let q = iv.rates_at(t);
        match direction {
            Direction::Forward => q * y,
            Direction::Backward => -(q.transpose() * y),
        }
    };
    let (ys, stats) = dopri5(rhs, from, &y, to, &outputs, &opts.ode)?;
    run.diagnostics.ode.add(&stats);
    let last = ys.last().expect("final state").clone();
    if dense {
        let mut times = vec![from];
        times.extend(outputs.iter().cloned());
        times.push(to);
        let mut values = vec![y.column(0).into_owned()];
        values.extend(ys.iter().map(|m| m.column(0).into_owned()));
        run.segments.push(Segment { interval: k, states: iv.states.clone(), times, values });
    }
    Ok(last)
}

fn class_spread_functions(map: &[usize], y: &DMatrix<f64>) -> f64 {
    let m = map.iter().max().map(|v| v + 1).unwrap_or(0);
    let mut spread: f64 = 0.0;
    for j in 0..y.ncols() {
        let mut lo = vec![f64::INFINITY; m];
        let mut hi = vec![f64::NEG_INFINITY; m];
        for (x, &z) in map.iter().enumerate() {
            lo[z] = lo[z].min(y[(x, j)]);
            hi[z] = hi[z].max(y[(x, j)]);
        }
        for z in 0..m {
            spread = spread.max(hi[z] - lo[z]);
        }
    }
    spread
}

fn class_spread_measures(map: &[usize], weights: &DVector<f64>, y: &DMatrix<f64>, summed: &DMatrix<f64>) -> f64 {
    let mut spread: f64 = 0.0;
    for j in 0..y.ncols() {
        for (x, &z) in map.iter().enumerate() {
            spread = spread.max((y[(x, j)] - weights[x] * summed[(z, j)]).abs());
        }
    }
    spread
}

fn sup_norm(y: &DMatrix<f64>) -> f64 {
    y.iter().fold(0.0, |a, &v| a.max(v.abs()))
}

fn check_order(flow: &SingularFlow, s: f64, t: f64) -> Result<(Location, Location)> {
    if s > t && !same_time(s, t) {
        return Err(Error::Domain(format!("start time {s} exceeds end time {t}")));
    }
    Ok((flow.locate(s)?, flow.locate(t)?))
}

/// State length expected at a location.
fn len_at(flow: &SingularFlow, loc: Location) -> usize {
    match loc {
        Location::Interval(i) => flow.intervals[i].len(),
        Location::Transition(i) => flow.transitions[i].boundary.len(),
    }
}

fn labels_at(flow: &SingularFlow, loc: Location) -> Vec<String> {
    match loc {
        Location::Interval(i) => flow.intervals[i].states.clone(),
        Location::Transition(i) => flow.transitions[i].boundary.labels().to_vec(),
    }
}

fn run_forward(flow: &SingularFlow, s: f64, t: f64, y0: DMatrix<f64>, opts: &HeatOptions) -> Result<Run> {
    let (ls, lt) = check_order(flow, s, t)?;
    let expected = len_at(flow, ls);
    if y0.nrows() != expected {
        return Err(Error::Shape { what: "initial function", expected, got: y0.nrows() });
    }
    let mut run = Run { value: y0.clone(), segments: Vec::new(), boundaries: Vec::new(), diagnostics: HeatDiagnostics::default() };
    if ls == lt {
        if let Location::Transition(_) = ls {
            return Ok(run);
        }
    }
    let n = flow.intervals.len();
    // Position: interval k with state y at time `cur`.
    let (mut k, mut cur, mut y) = match ls {
        Location::Interval(i) => (i, s, y0),
        Location::Transition(i) => {
            if i == n {
                return Ok(run);
            }
            let y = apply_step(flow, i, &y0, Direction::Forward, TransitionStep::Spawn)?;
            record_spawn_forward(flow, i, &y0, &y, opts, &mut run)?;
            (i, flow.transitions[i].time + gap(flow, i, false, opts.eps)?, y)
        }
    };
    loop {
        let iv = &flow.intervals[k];
        match lt {
            Location::Interval(j) if j == k => {
                y = integrate(iv, k, cur, t, y, Direction::Forward, opts, &mut run)?;
                run.value = y;
                return Ok(run);
            }
            _ => {}
        }
        let e_l = gap(flow, k, true, opts.eps)?;
        let stop = iv.t_end - e_l;
        y = integrate(iv, k, cur, stop, y, Direction::Forward, opts, &mut run)?;
        let i = k + 1;
        let left = y.clone();
        let bar = apply_step(flow, i, &y, Direction::Forward, TransitionStep::Collapse)?;
        let map = flow.transitions[i].collapse.as_ref().expect("collapse map");
        run.diagnostics.transitions.push(TransitionDiagnostics {
            transition: i,
            time: flow.transitions[i].time,
            eps_left: e_l,
            eps_right: 0.0,
            class_spread: class_spread_functions(map, &left),
            drift_estimate: 2.0 * e_l * finite_rate_bound(iv, true) * sup_norm(&left),
        });
        if left.ncols() == 1 {
            run.boundaries.push(BoundaryValue {
                transition: i,
                time: flow.transitions[i].time,
                left_limit: Some(left.column(0).into_owned()),
                value: bar.column(0).into_owned(),
                right_limit: None,
            });
        }
        if lt == Location::Transition(i) || i == n {
            run.value = bar;
            return Ok(run);
        }
        y = apply_step(flow, i, &bar, Direction::Forward, TransitionStep::Spawn)?;
        record_spawn_forward(flow, i, &bar, &y, opts, &mut run)?;
        k = i;
        cur = flow.transitions[i].time + gap(flow, k, false, opts.eps)?;
    }
}

fn record_spawn_forward(flow: &SingularFlow, i: usize, bar: &DMatrix<f64>, right: &DMatrix<f64>, opts: &HeatOptions, run: &mut Run) -> Result<()> {
    let e_r = gap(flow, i, false, opts.eps)?;
    let iv = &flow.intervals[i];
    if let Some(d) = run.diagnostics.transitions.last_mut().filter(|d| d.transition == i) {
        d.eps_right = e_r;
        d.drift_estimate += 2.0 * e_r * finite_rate_bound(iv, false) * sup_norm(right);
    } else {
        run.diagnostics.transitions.push(TransitionDiagnostics {
            transition: i,
            time: flow.transitions[i].time,
            eps_left: 0.0,
            eps_right: e_r,
            class_spread: 0.0,
            drift_estimate: 2.0 * e_r * finite_rate_bound(iv, false) * sup_norm(right),
        });
    }
    if bar.ncols() == 1 {
        if let Some(b) = run.boundaries.last_mut().filter(|b| b.transition == i) {
            b.right_limit = Some(right.column(0).into_owned());
        } else {
            run.boundaries.push(BoundaryValue {
                transition: i,
                time: flow.transitions[i].time,
                left_limit: None,
                value: bar.column(0).into_owned(),
                right_limit: Some(right.column(0).into_owned()),
            });
        }
    }
    Ok(())
}

fn run_backward(flow: &SingularFlow, s: f64, t: f64, y0: DMatrix<f64>, opts: &HeatOptions) -> Result<Run> {
    let (ls, lt) = check_order(flow, s, t)?;
    let expected = len_at(flow, lt);
    if y0.nrows() != expected {
        return Err(Error::Shape { what: "final measure", expected, got: y0.nrows() });
    }
    let mut run = Run { value: y0.clone(), segments: Vec::new(), boundaries: Vec::new(), diagnostics: HeatDiagnostics::default() };
    if ls == lt {
        if let Location::Transition(_) = lt {
            return Ok(run);
        }
    }
    let (mut k, mut cur, mut y) = match lt {
        Location::Interval(i) => (i, t, y0),
        Location::Transition(i) => {
            if i == 0 {
                return Ok(run);
            }
            let y = apply_step(flow, i, &y0, Direction::Backward, TransitionStep::Collapse)?;
            let e = gap(flow, i - 1, true, opts.eps)?;
            record_collapse_backward(flow, i, &y0, &y, e, &mut run);
            (i - 1, flow.transitions[i].time - e, y)
        }
    };
    loop {
        let iv = &flow.intervals[k];
        match ls {
            Location::Interval(j) if j == k => {
                y = integrate(iv, k, cur, s, y, Direction::Backward, opts, &mut run)?;
                run.value = y;
                return Ok(run);
            }
            _ => {}
        }
        let e_r = gap(flow, k, false, opts.eps)?;
        let stop = iv.t_start + e_r;
        y = integrate(iv, k, cur, stop, y, Direction::Backward, opts, &mut run)?;
        let i = k;
        let right = y.clone();
        let bar = apply_step(flow, i, &y, Direction::Backward, TransitionStep::Spawn)?;
        let map = flow.transitions[i].spawn.as_ref().expect("spawn map");
        let w = flow.spawn_weights(i).expect("spawn weights");
        run.diagnostics.transitions.push(TransitionDiagnostics {
            transition: i,
            time: flow.transitions[i].time,
            eps_left: 0.0,
            eps_right: e_r,
            class_spread: class_spread_measures(map, &w, &right, &bar),
            drift_estimate: 2.0 * e_r * finite_rate_bound(iv, false) * sup_norm(&right),
        });
        if right.ncols() == 1 {
            run.boundaries.push(BoundaryValue {
                transition: i,
                time: flow.transitions[i].time,
                left_limit: None,
                value: bar.column(0).into_owned(),
                right_limit: Some(right.column(0).into_owned()),
            });
        }
        if ls == Location::Transition(i) || i == 0 {
            run.value = bar;
            return Ok(run);
        }
        let e_l = gap(flow, i - 1, true, opts.eps)?;
        y = apply_step(flow, i, &bar, Direction::Backward, TransitionStep::Collapse)?;
        record_collapse_backward(flow, i, &bar, &y, e_l, &mut run);
        k = i - 1;
        cur = flow.transitions[i].time - e_l;
    }
}

fn record_collapse_backward(flow: &SingularFlow, i: usize, bar: &DMatrix<f64>, left: &DMatrix<f64>, e_l: f64, run: &mut Run) {
    let drift = 2.0 * e_l * finite_rate_bound(&flow.intervals[i - 1], true) * sup_norm(left);
    if let Some(d) = run.diagnostics.transitions.last_mut().filter(|d| d.transition == i) {
        d.eps_left = e_l;
        d.drift_estimate += drift;
    } else {
        run.diagnostics.transitions.push(TransitionDiagnostics {
            transition: i,
            time: flow.transitions[i].time,
            eps_left: e_l,
            eps_right: 0.0,
            class_spread: 0.0,
            drift_estimate: drift,
        });
    }
    if bar.ncols() == 1 {
        if let Some(b) = run.boundaries.last_mut().filter(|b| b.transition == i) {
            b.left_limit = Some(left.column(0).into_owned());
        } else {
            run.boundaries.push(BoundaryValue {
                transition: i,
                time: flow.transitions[i].time,
                left_limit: Some(left.column(0).into_owned()),
                value: bar.column(0).into_owned(),
                right_limit: None,
            });
        }
    }
}

/// `P_{t,s} ψ` for `ψ` on the vertex set at `s`.
pub fn propagate(flow: &SingularFlow, s: f64, t: f64, psi: &DVector<f64>, opts: &HeatOptions) -> Result<HeatSolution> {
    let y0 = DMatrix::from_column_slice(psi.len(), 1, psi.as_slice());
    let run = run_forward(flow, s, t, y0, opts)?;
    Ok(HeatSolution {
        direction: Direction::Forward,
        s,
        t,
        states: labels_at(flow, flow.locate(t)?),
        value: run.value.column(0).into_owned(),
        segments: run.segments,
        boundaries: run.boundaries,
        diagnostics: run.diagnostics,
    })
}

/// `P̂_{t,s} σ` for `σ` on the vertex set at `t`.
pub fn propagate_dual(flow: &SingularFlow, s: f64, t: f64, sigma: &DVector<f64>, opts: &HeatOptions) -> Result<HeatSolution> {
    let y0 = DMatrix::from_column_slice(sigma.len(), 1, sigma.as_slice());
    let run = run_backward(flow, s, t, y0, opts)?;
    Ok(HeatSolution {
        direction: Direction::Backward,
        s,
        t,
        states: labels_at(flow, flow.locate(s)?),
        value: run.value.column(0).into_owned(),
        segments: run.segments,
        boundaries: run.boundaries,
        diagnostics: run.diagnostics,
    })
}

/// Matrix of `P_{t,s}` (rows indexed by the states at `t`, columns by the
/// states at `s`), computed by propagating functions forward.
pub fn propagator_matrix(flow: &SingularFlow, s: f64, t: f64, opts: &HeatOptions) -> Result<(DMatrix<f64>, HeatDiagnostics)> {
    let n = len_at(flow, flow.locate(s)?);
    let run = run_forward(flow, s, t, DMatrix::identity(n, n), opts)?;
    Ok((run.value, run.diagnostics))
}

/// Matrix of `P̂_{t,s}` (rows indexed by the states at `s`, columns by the
/// states at `t`), computed by propagating measures backward.
pub fn dual_propagator_matrix(flow: &SingularFlow, s: f64, t: f64, opts: &HeatOptions) -> Result<(DMatrix<f64>, HeatDiagnostics)> {
    let n = len_at(flow, flow.locate(t)?);
    let run = run_backward(flow, s, t, DMatrix::identity(n, n), opts)?;
    Ok((run.value, run.diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::MarkovTriple;
    use crate::scenarios::builtin_scenario;
    use crate::schedule::Params;

    #[test]
    fn static_two_point_closed_form() {
        let f = SingularFlow::constant("tp", &MarkovTriple::two_point(1.0).unwrap(), 0.0, 1.0).unwrap();
        let dt = std::f64::consts::LN_2 / 2.0;
        let sol = propagate(&f, 0.1, 0.1 + dt, &DVector::from_vec(vec![0.0, 1.0]), &HeatOptions::default()).unwrap();
        assert!((sol.value[0] - 0.25).abs() < 1e-9 && (sol.value[1] - 0.75).abs() < 1e-9, "{}", sol.value);
    }

    #[test]
    fn transition_rules() {
        let f = builtin_scenario("toy", &Params::new()).unwrap();
        let psi = DVector::from_vec(vec![3.0, 0.0, 0.0, 1.0]);
        let bar = singular_transition_apply(&f, 1, &psi, Direction::Forward, TransitionStep::Collapse).unwrap();
        assert!((bar[0] - 1.0).abs() < 1e-15 && bar[1] == 1.0);
        let right = singular_transition_apply(&f, 1, &DVector::from_vec(vec![5.0, 2.0]), Direction::Forward, TransitionStep::Spawn).unwrap();
        assert_eq!(right.as_slice(), &[5.0, 2.0, 2.0]);
        let summed = singular_transition_apply(&f, 1, &DVector::from_vec(vec![0.5, 0.2, 0.3]), Direction::Backward, TransitionStep::Spawn).unwrap();
        assert!((summed[1] - 0.5).abs() < 1e-15);
        assert!(singular_transition_apply(&f, 1, &DVector::zeros(2), Direction::Forward, TransitionStep::Collapse).is_err());
    }

    #[test]
    fn identity_when_times_coincide() {
        let f = builtin_scenario("toy", &Params::new()).unwrap();
        let psi = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let sol = propagate(&f, 0.3, 0.3, &psi, &HeatOptions::default()).unwrap();
        assert_eq!(sol.value, psi);
        let sol = propagate(&f, 1.0, 1.0, &DVector::from_vec(vec![1.0, 2.0]), &HeatOptions::default()).unwrap();
        assert_eq!(sol.value.as_slice(), &[1.0, 2.0]);
    }
}
