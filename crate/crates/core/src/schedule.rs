//! Singular time-dependent Markov triples.
//!
//! Time is partitioned into intervals `[t_i, t_{i+1}]`. On each open
//! interval the vertex set is fixed and every directed edge carries a
//! [`RateSchedule`]; every vertex carries a [`PiSchedule`]. At each partition
//! time a [`SingularTransition`] records the boundary vertex set `X̄_i`, the
//! collapse map from the interval on the left and the spawn map from the
//! interval on the right, together with the boundary triple.
//!
//! Groups of vertices joined by exploding rates collapse (left side) or are
//! spawned (right side). Conditions on poles are decided from the schedule
//! kind rather than numerically: a pole `c / |t - t_b|^p` has a divergent
//! integral iff `p >= 1`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{product_label, MarkovTriple};
use crate::error::{Error, Result};

/// Relative tolerance used to compare partition times.
pub const TIME_TOL: f64 = 1e-12;

/// Relative tolerance for the limit identities at singular times.
pub const LIMIT_RTOL: f64 = 1e-9;

/// Number of interior sample times per interval used by [`validate_flow`].
pub const VALIDATION_SAMPLES: usize = 100;

pub(crate) fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIME_TOL * (1.0 + a.abs().max(b.abs()))
}

fn one() -> f64 {
    1.0
}

/// Time profile of a single directed rate `Q_t(x,y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateSchedule {
    /// `c`.
    Constant { c: f64 },
    /// `a + b t`.
    Affine { a: f64, b: f64 },
    /// `c L_t` with `L_t = 1 / (1 - 2 κ R (t - t_ref))`; `R` is `scale`.
    SolitonScaled {
        c: f64,
        kappa: f64,
        #[serde(default)]
        t_ref: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `c / (t_end - t)^order`.
    CollapsePole {
        c: f64,
        t_end: f64,
        #[serde(default = "one")]
        order: f64,
    },
    /// `c / (t - t_start)^order`.
    SpawnPole {
        c: f64,
        t_start: f64,
        #[serde(default = "one")]
        order: f64,
    },
    /// Tabulated positive values, interpolated linearly in `log Q` and held
    /// constant outside the table.
    LogLipschitzSampled { times: Vec<f64>, values: Vec<f64> },
}

/// Behaviour of a rate as `t` approaches a partition time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EndBehavior {
    Finite(f64),
    /// `Q_t ~ coeff / |t - t_b|^order`.
    Pole { order: f64, coeff: f64 },
}

impl EndBehavior {
    pub fn limit(&self) -> f64 {
        match *self {
            EndBehavior::Finite(v) => v,
            EndBehavior::Pole { .. } => f64::INFINITY,
        }
    }
}

impl RateSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            RateSchedule::Constant { c } => *c,
            RateSchedule::Affine { a, b } => a + b * t,
            RateSchedule::SolitonScaled { c, kappa, t_ref, scale } => c / (1.0 - 2.0 * kappa * scale * (t - t_ref)),
            RateSchedule::CollapsePole { c, t_end, order } => c / (t_end - t).powf(*order),
            RateSchedule::SpawnPole { c, t_start, order } => c / (t - t_start).powf(*order),
            RateSchedule::LogLipschitzSampled { times, values } => sampled_value(times, values, t).0,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            RateSchedule::Constant { .. } => 0.0,
            RateSchedule::Affine { b, .. } => *b,
            RateSchedule::SolitonScaled { c, kappa, t_ref, scale } => {
                let k = 2.0 * kappa * scale;
                let d = 1.0 - k * (t - t_ref);
                c * k / (d * d)
            }
            RateSchedule::CollapsePole { c, t_end, order } => c * order / (t_end - t).powf(order + 1.0),
            RateSchedule::SpawnPole { c, t_start, order } => -c * order / (t - t_start).powf(order + 1.0),
            RateSchedule::LogLipschitzSampled { times, values } => {
                let (v, slope) = sampled_value(times, values, t);
                v * slope
            }
        }
    }

    /// Whether `Q̇` is available in closed form (tabulated schedules only
    /// have a piecewise derivative and are excluded from curvature checks).
    pub fn has_analytic_derivative(&self) -> bool {
        !matches!(self, RateSchedule::LogLipschitzSampled { .. })
    }

    pub fn is_identically_zero(&self) -> bool {
        match self {
            RateSchedule::Constant { c } => *c == 0.0,
            RateSchedule::Affine { a, b } => *a == 0.0 && *b == 0.0,
            RateSchedule::SolitonScaled { c, .. } | RateSchedule::CollapsePole { c, .. } | RateSchedule::SpawnPole { c, .. } => *c == 0.0,
            RateSchedule::LogLipschitzSampled { values, .. } => values.iter().all(|&v| v == 0.0),
        }
    }

    /// Behaviour as `t → t_b` from inside an interval.
    pub fn behavior_at(&self, t_b: f64) -> EndBehavior {
        match self {
            RateSchedule::SolitonScaled { c, kappa, t_ref, scale } if *c != 0.0 && *kappa != 0.0 => {
                let k = 2.0 * kappa * scale;
                let pole = t_ref + 1.0 / k;
                if same_time(pole, t_b) {
                    EndBehavior::Pole { order: 1.0, coeff: c / k.abs() }
                } else {
                    EndBehavior::Finite(self.value(t_b))
                }
            }
            RateSchedule::CollapsePole { c, t_end, order } if *c != 0.0 && same_time(*t_end, t_b) => {
                EndBehavior::Pole { order: *order, coeff: *c }
            }
            RateSchedule::SpawnPole { c, t_start, order } if *c != 0.0 && same_time(*t_start, t_b) => {
                EndBehavior::Pole { order: *order, coeff: *c }
            }
            _ => EndBehavior::Finite(self.value(t_b)),
        }
    }

    /// Supremum of `|d/dt log Q_t|` over `[a, b]`.
    pub fn log_lipschitz(&self, a: f64, b: f64) -> f64 {
        if self.is_identically_zero() {
            return 0.0;
        }
        match self {
            RateSchedule::LogLipschitzSampled { times, values } => {
                let mut l: f64 = 0.0;
                for k in 1..times.len() {
                    if times[k] >= a && times[k - 1] <= b {
                        l = l.max(((values[k] / values[k - 1]).ln() / (times[k] - times[k - 1])).abs());
                    }
                }
                l
            }
            // |Q̇/Q| is monotone on the interval for every analytic kind.
            _ => {
                let at = |t: f64| (self.derivative(t) / self.value(t)).abs();
                at(a).max(at(b))
            }
        }
    }

    /// Check parameters and strict positivity on the open interval `(a, b)`.
    pub fn check_on(&self, a: f64, b: f64) -> std::result::Result<(), String> {
        let finite = |x: f64, name: &str| if x.is_finite() { Ok(()) } else { Err(format!("parameter {name} is not finite")) };
        match self {
            RateSchedule::Constant { c } => {
                finite(*c, "c")?;
                if *c < 0.0 {
                    return Err(format!("constant rate {c} is negative"));
                }
            }
            RateSchedule::Affine { a: p, b: q } => {
                finite(*p, "a")?;
                finite(*q, "b")?;
                let (va, vb) = (p + q * a, p + q * b);
                if va < 0.0 || vb < 0.0 {
                    return Err(format!("affine rate is negative on [{a}, {b}]"));
                }
            }
            RateSchedule::SolitonScaled { c, kappa, t_ref, scale } => {
                for (x, n) in [(*c, "c"), (*kappa, "kappa"), (*t_ref, "t_ref"), (*scale, "scale")] {
                    finite(x, n)?;
                }
                if *c < 0.0 || *scale <= 0.0 {
                    return Err("soliton schedule needs c >= 0 and scale > 0".into());
                }
                let k = 2.0 * kappa * scale;
                let d = |t: f64| 1.0 - k * (t - t_ref);
                if d(a) < -TIME_TOL || d(b) < -TIME_TOL || (d(a) <= 0.0 && d(b) <= 0.0) {
                    return Err(format!("scaling factor L_t is not positive on ({a}, {b})"));
                }
            }
            RateSchedule::CollapsePole { c, t_end, order } => {
                finite(*c, "c")?;
                finite(*t_end, "t_end")?;
                if *c < 0.0 || !(*order > 0.0) {
                    return Err("collapse pole needs c >= 0 and order > 0".into());
                }
                if *t_end < b && !same_time(*t_end, b) {
                    return Err(format!("collapse pole at {t_end} lies inside ({a}, {b})"));
                }
            }
            RateSchedule::SpawnPole { c, t_start, order } => {
                finite(*c, "c")?;
                finite(*t_start, "t_start")?;
                if *c < 0.0 || !(*order > 0.0) {
                    return Err("spawn pole needs c >= 0 and order > 0".into());
                }
                if *t_start > a && !same_time(*t_start, a) {
                    return Err(format!("spawn pole at {t_start} lies inside ({a}, {b})"));
                }
            }
            RateSchedule::LogLipschitzSampled { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err("tabulated schedule needs matching nonempty times and values".into());
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err("tabulated times must be strictly increasing".into());
                }
                let zero = values.iter().all(|&v| v == 0.0);
                if !zero && values.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                    return Err("tabulated values must be all positive or all zero".into());
                }
            }
        }
        Ok(())
    }
}

fn sampled_value(times: &[f64], values: &[f64], t: f64) -> (f64, f64) {
    let n = times.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    if values.iter().all(|&v| v == 0.0) {
        return (0.0, 0.0);
    }
    if t <= times[0] {
        return (values[0], 0.0);
    }
    if t >= times[n - 1] {
        return (values[n - 1], 0.0);
    }
    let k = times.partition_point(|&s| s <= t).max(1);
    let (t0, t1) = (times[k - 1], times[k]);
    let (l0, l1) = (values[k - 1].ln(), values[k].ln());
    let slope = (l1 - l0) / (t1 - t0);
    ((l0 + slope * (t - t0)).exp(), slope)
}

/// Time profile of an invariant weight `π_t(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PiSchedule {
    Constant { v: f64 },
    Affine { a: f64, b: f64 },
    /// Piecewise linear, held constant outside the table.
    Tabulated { times: Vec<f64>, values: Vec<f64> },
    /// Pointwise product of the factors (product chains).
    Product { factors: Vec<PiSchedule> },
}

impl PiSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            PiSchedule::Constant { v } => *v,
            PiSchedule::Affine { a, b } => a + b * t,
            PiSchedule::Tabulated { times, values } => {
                let n = times.len();
                if n == 0 {
                    return 0.0;
                }
                if t <= times[0] {
                    return values[0];
                }
                if t >= times[n - 1] {
                    return values[n - 1];
                }
                let k = times.partition_point(|&s| s <= t).max(1);
                let w = (t - times[k - 1]) / (times[k] - times[k - 1]);
                values[k - 1] * (1.0 - w) + values[k] * w
            }
            PiSchedule::Product { factors } => factors.iter().map(|f| f.value(t)).product(),
        }
    }

    fn times_mul(&self, other: &PiSchedule) -> PiSchedule {
        match (self, other) {
            (PiSchedule::Constant { v: a }, PiSchedule::Constant { v: b }) => PiSchedule::Constant { v: a * b },
            _ => {
                let mut factors = Vec::new();
                for s in [self, other] {
                    match s {
                        PiSchedule::Product { factors: f } => factors.extend(f.iter().cloned()),
                        other => factors.push(other.clone()),
                    }
                }
                PiSchedule::Product { factors }
            }
        }
    }
}

/// A directed edge with its rate profile.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSchedule {
    pub from: usize,
    pub to: usize,
    pub schedule: RateSchedule,
}

/// One open interval of the partition with its vertex set and schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSpec {
    pub t_start: f64,
    pub t_end: f64,
    pub states: Vec<String>,
    pub edges: Vec<EdgeSchedule>,
    pub pi: Vec<PiSchedule>,
}

impl IntervalSpec {
    pub fn new(t_start: f64, t_end: f64, states: Vec<String>, edges: Vec<EdgeSchedule>, pi: Vec<PiSchedule>) -> Result<Self> {
        let n = states.len();
        if !(t_start < t_end) {
            return Err(Error::Invalid(format!("interval [{t_start}, {t_end}] is empty")));
        }
        if n == 0 || pi.len() != n {
            return Err(Error::Invalid("interval needs one π schedule per state".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &edges {
            if e.from >= n || e.to >= n || e.from == e.to {
                return Err(Error::Invalid(format!("edge ({}, {}) is not a pair of distinct states", e.from, e.to)));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(Error::Invalid(format!("edge ({}, {}) listed twice", states[e.from], states[e.to])));
            }
        }
        Ok(Self { t_start, t_end, states, edges, pi })
    }

    /// Interval on which a static triple is held constant.
    pub fn constant(triple: &MarkovTriple, t_start: f64, t_end: f64) -> Result<Self> {
        let n = triple.len();
        let mut edges = Vec::new();
        for x in 0..n {
            for y in 0..n {
                if x != y && triple.rate(x, y) > 0.0 {
                    edges.push(EdgeSchedule { from: x, to: y, schedule: RateSchedule::Constant { c: triple.rate(x, y) } });
                }
            }
        }
        let pi = triple.pi().iter().map(|&v| PiSchedule::Constant { v }).collect();
        Self::new(t_start, t_end, triple.labels().to_vec(), edges, pi)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn rates_at(&self, t: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        for e in &self.edges {
            q[(e.from, e.to)] = e.schedule.value(t);
        }
        for x in 0..n {
            let s: f64 = (0..n).filter(|&y| y != x).map(|y| q[(x, y)]).sum();
            q[(x, x)] = -s;
        }
        q
    }

    pub fn rates_dot_at(&self, t: f64) -> DMatrix<f64> {
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        for e in &self.edges {
            q[(e.from, e.to)] = e.schedule.derivative(t);
        }
        for x in 0..n {
            let s: f64 = (0..n).filter(|&y| y != x).map(|y| q[(x, y)]).sum();
            q[(x, x)] = -s;
        }
        q
    }

    pub fn pi_at(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.pi.iter().map(|p| p.value(t)))
    }

    /// Checked triple at an interior time.
    pub fn triple_at(&self, t: f64) -> Result<MarkovTriple> {
        MarkovTriple::new(self.states.clone(), self.rates_at(t), self.pi_at(t))
    }

    pub(crate) fn triple_at_unchecked(&self, t: f64) -> Result<MarkovTriple> {
        MarkovTriple::new_unchecked(self.states.clone(), self.rates_at(t), self.pi_at(t))
    }

    /// One-sided limits of the off-diagonal rates at an endpoint
    /// (`+∞` for exploding rates).
    pub fn rate_limits(&self, at_end: bool) -> DMatrix<f64> {
        let t = if at_end { self.t_end } else { self.t_start };
        let n = self.len();
        let mut q = DMatrix::zeros(n, n);
        for e in &self.edges {
            q[(e.from, e.to)] = e.schedule.behavior_at(t).limit();
        }
        q
    }

    pub fn pi_limits(&self, at_end: bool) -> DVector<f64> {
        self.pi_at(if at_end { self.t_end } else { self.t_start })
    }

    pub fn edge_behaviors(&self, at_end: bool) -> Vec<(usize, usize, EndBehavior)> {
        let t = if at_end { self.t_end } else { self.t_start };
        self.edges.iter().map(|e| (e.from, e.to, e.schedule.behavior_at(t))).collect()
    }

    pub fn has_analytic_rates(&self) -> bool {
        self.edges.iter().all(|e| e.schedule.has_analytic_derivative())
    }

    /// Local log-Lipschitz constant of the rates on `[a, b]`.
    pub fn log_lipschitz(&self, a: f64, b: f64) -> f64 {
        self.edges.iter().map(|e| e.schedule.log_lipschitz(a, b)).fold(0.0, f64::max)
    }

    /// Maximal jump rate at `t`.
    pub fn max_rate(&self, t: f64) -> f64 {
        let q = self.rates_at(t);
        (0..self.len()).map(|x| -q[(x, x)]).fold(0.0, f64::max)
    }
}

/// The boundary data at a partition time.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTransition {
    pub time: f64,
    /// The boundary triple on `X̄_i`.
    pub boundary: MarkovTriple,
    /// `c_{i-1}`: index map from the states of the interval on the left.
    pub collapse: Option<Vec<usize>>,
    /// `s_i`: index map from the states of the interval on the right.
    pub spawn: Option<Vec<usize>>,
}

/// Fibres of an index map onto `0..m`.
pub fn fibres(map: &[usize], m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); m];
    for (x, &z) in map.iter().enumerate() {
        if z < m {
            out[z].push(x);
        }
    }
    out
}

/// Boundary triple obtained by aggregating one-sided limits over the fibres
/// of `map`: `π(z) = Σ π^lim(x)`, `Q(z,z') = Σ Q^lim(x,x') π^lim(x) / π(z)`.
pub fn aggregate_limits(interval: &IntervalSpec, map: &[usize], labels: Vec<String>, at_end: bool) -> Result<MarkovTriple> {
    let m = labels.len();
    if map.len() != interval.len() || map.iter().any(|&z| z >= m) {
        return Err(Error::Invalid("transition map does not match the vertex sets".into()));
    }
    let q = interval.rate_limits(at_end);
    let p = interval.pi_limits(at_end);
    let mut pi = DVector::zeros(m);
    for (x, &z) in map.iter().enumerate() {
        pi[z] += p[x];
    }
    let mut rates = DMatrix::zeros(m, m);
    for x in 0..interval.len() {
        for y in 0..interval.len() {
            let (zx, zy) = (map[x], map[y]);
            if x == y || zx == zy || q[(x, y)] == 0.0 {
                continue;
            }
            if !q[(x, y)].is_finite() {
                return Err(Error::Invalid(format!(
                    "rate {}→{} explodes but the vertices are mapped to different boundary states",
                    interval.states[x], interval.states[y]
                )));
            }
            rates[(zx, zy)] += q[(x, y)] * p[x];
        }
    }
    for z in 0..m {
        for w in 0..m {
            if z != w {
                rates[(z, w)] /= pi[z];
            }
        }
    }
    MarkovTriple::new_unchecked(labels, rates, pi)
}

impl SingularTransition {
    /// Transition whose boundary triple is aggregated from the left limits
    /// (or from the right limits when there is no interval on the left).
    pub fn derived(
        time: f64,
        labels: Vec<String>,
        left: Option<(&IntervalSpec, Vec<usize>)>,
        right: Option<(&IntervalSpec, Vec<usize>)>,
    ) -> Result<Self> {
        let boundary = match (&left, &right) {
            (Some((iv, map)), _) => aggregate_limits(iv, map, labels, true)?,
            (None, Some((iv, map))) => aggregate_limits(iv, map, labels, false)?,
            (None, None) => return Err(Error::Invalid("transition needs at least one adjacent interval".into())),
        };
        Ok(Self { time, boundary, collapse: left.map(|(_, m)| m), spawn: right.map(|(_, m)| m) })
    }

    /// Identity transition at a time where the adjacent intervals share
    /// their vertex set and all limits are finite.
    pub fn identity(time: f64, left: Option<&IntervalSpec>, right: Option<&IntervalSpec>) -> Result<Self> {
        let n = left.or(right).map(|iv| iv.len()).unwrap_or(0);
        let labels = left.or(right).map(|iv| iv.states.clone()).unwrap_or_default();
        let id: Vec<usize> = (0..n).collect();
        Self::derived(time, labels, left.map(|iv| (iv, id.clone())), right.map(|iv| (iv, id.clone())))
    }

    pub fn collapse_classes(&self) -> Option<Vec<Vec<usize>>> {
        self.collapse.as_ref().map(|m| fibres(m, self.boundary.len()))
    }

    pub fn spawn_classes(&self) -> Option<Vec<Vec<usize>>> {
        self.spawn.as_ref().map(|m| fibres(m, self.boundary.len()))
    }
}

/// Where a time falls in the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Interval(usize),
    Transition(usize),
}

/// A triple at one time, with `Q̇` when the time is not singular.
#[derive(Debug, Clone)]
pub struct FlowPoint {
    pub time: f64,
    pub triple: MarkovTriple,
    pub qdot: Option<DMatrix<f64>>,
    pub location: Location,
}

/// A singular time-dependent Markov triple.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularFlow {
    pub name: String,
    pub intervals: Vec<IntervalSpec>,
    /// `intervals.len() + 1` transitions; the first has no collapse map and
    /// the last has no spawn map.
    pub transitions: Vec<SingularTransition>,
}

impl SingularFlow {
    /// Structural checks only; see [`validate_flow`] for the full list.
    pub fn new(name: impl Into<String>, intervals: Vec<IntervalSpec>, transitions: Vec<SingularTransition>) -> Result<Self> {
        let n = intervals.len();
        if n == 0 {
            return Err(Error::Invalid("a flow needs at least one interval".into()));
        }
        if transitions.len() != n + 1 {
            return Err(Error::Invalid(format!("expected {} transitions, got {}", n + 1, transitions.len())));
        }
        for (i, tr) in transitions.iter().enumerate() {
            let left = if i > 0 { Some(&intervals[i - 1]) } else { None };
            let right = intervals.get(i);
            match (left, &tr.collapse) {
                (Some(iv), Some(map)) if map.len() == iv.len() => {}
                (None, None) => {}
                _ => return Err(Error::Invalid(format!("transition {i}: collapse map does not match the interval on the left"))),
            }
            match (right, &tr.spawn) {
                (Some(iv), Some(map)) if map.len() == iv.len() => {}
                (None, None) => {}
                _ => return Err(Error::Invalid(format!("transition {i}: spawn map does not match the interval on the right"))),
            }
            for map in [&tr.collapse, &tr.spawn].into_iter().flatten() {
                if map.iter().any(|&z| z >= tr.boundary.len()) {
                    return Err(Error::Invalid(format!("transition {i}: map points outside the boundary vertex set")));
                }
            }
        }
        Ok(Self { name: name.into(), intervals, transitions })
    }

    /// A time-constant flow on `[t0, t1]` with trivial outer transitions.
    pub fn constant(name: impl Into<String>, triple: &MarkovTriple, t0: f64, t1: f64) -> Result<Self> {
        let iv = IntervalSpec::constant(triple, t0, t1)?;
        let first = SingularTransition::identity(t0, None, Some(&iv))?;
        let last = SingularTransition::identity(t1, Some(&iv), None)?;
        Self::new(name, vec![iv], vec![first, last])
    }

    pub fn time_range(&self) -> (f64, f64) {
        (self.intervals[0].t_start, self.intervals[self.intervals.len() - 1].t_end)
    }

    pub fn n_intervals(&self) -> usize {
        self.intervals.len()
    }

    /// Whether transition `i` is trivial: identity maps onto the adjacent
    /// vertex sets and finite limits on both sides.
    pub fn is_regular_transition(&self, i: usize) -> bool {
        let tr = &self.transitions[i];
        let sides = [
            (i.checked_sub(1).map(|k| &self.intervals[k]), &tr.collapse, true),
            (self.intervals.get(i), &tr.spawn, false),
        ];
        for (iv, map, at_end) in sides {
            if let (Some(iv), Some(map)) = (iv, map) {
                if iv.len() != tr.boundary.len() || map.iter().enumerate().any(|(k, &z)| k != z) {
                    return false;
                }
                if iv.rate_limits(at_end).iter().any(|q| !q.is_finite()) {
                    return false;
                }
            }
        }
        true
    }

    /// Indices of transitions strictly inside the time range that change
    /// the vertex set or carry exploding rates.
    pub fn singular_transitions(&self) -> Vec<usize> {
        (1..self.intervals.len()).filter(|&i| !self.is_regular_transition(i)).collect()
    }

    pub fn singular_times(&self) -> Vec<f64> {
        self.singular_transitions().into_iter().map(|i| self.transitions[i].time).collect()
    }

    pub fn locate(&self, t: f64) -> Result<Location> {
        let (t0, t1) = self.time_range();
        if !(t >= t0 - TIME_TOL * (1.0 + t0.abs()) && t <= t1 + TIME_TOL * (1.0 + t1.abs())) {
            return Err(Error::Domain(format!("time {t} outside [{t0}, {t1}]")));
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            if same_time(tr.time, t) {
                return Ok(Location::Transition(i));
            }
        }
        for (i, iv) in self.intervals.iter().enumerate() {
            if t > iv.t_start && t < iv.t_end {
                return Ok(Location::Interval(i));
            }
        }
        Err(Error::Domain(format!("time {t} not covered by the partition")))
    }

    /// The triple at time `t`, with `Q̇` away from singular times.
    pub fn eval_at(&self, t: f64) -> Result<FlowPoint> {
        let location = self.locate(t)?;
        let from_interval = |i: usize, t: f64| -> Result<FlowPoint> {
            let iv = &self.intervals[i];
            Ok(FlowPoint { time: t, triple: iv.triple_at(t)?, qdot: Some(iv.rates_dot_at(t)), location })
        };
        match location {
            Location::Interval(i) => from_interval(i, t),
            Location::Transition(i) => {
                if self.is_regular_transition(i) {
                    let k = if i < self.intervals.len() { i } else { i - 1 };
                    from_interval(k, self.transitions[i].time)
                } else {
                    Ok(FlowPoint { time: t, triple: self.transitions[i].boundary.clone(), qdot: None, location })
                }
            }
        }
    }

    /// Vertex labels at time `t`.
    pub fn states_at(&self, t: f64) -> Result<Vec<String>> {
        Ok(match self.locate(t)? {
            Location::Interval(i) => self.intervals[i].states.clone(),
            Location::Transition(i) => {
                if self.is_regular_transition(i) {
                    let k = if i < self.intervals.len() { i } else { i - 1 };
                    self.intervals[k].states.clone()
                } else {
                    self.transitions[i].boundary.labels().to_vec()
                }
            }
        })
    }

    /// `π̄^{c,z}(x)` for `x` in the interval left of transition `i`.
    pub fn collapse_weights(&self, i: usize) -> Option<DVector<f64>> {
        let map = self.transitions[i].collapse.as_ref()?;
        Some(local_equilibrium(&self.intervals[i - 1].pi_limits(true), map, self.transitions[i].boundary.len()))
    }

    /// `π̄^{s,z}(x)` for `x` in the interval right of transition `i`.
    pub fn spawn_weights(&self, i: usize) -> Option<DVector<f64>> {
        let map = self.transitions[i].spawn.as_ref()?;
        Some(local_equilibrium(&self.intervals[i].pi_limits(false), map, self.transitions[i].boundary.len()))
    }

    /// Whether every rate has a closed-form time derivative.
    pub fn has_analytic_rates(&self) -> bool {
        self.intervals.iter().all(|iv| iv.has_analytic_rates())
    }

    /// Split intervals at the given interior times, inserting identity
    /// transitions.
    pub fn refine(&self, times: &[f64]) -> Result<SingularFlow> {
        let mut intervals = Vec::new();
        let mut transitions = vec![self.transitions[0].clone()];
        for (i, iv) in self.intervals.iter().enumerate() {
            let mut cuts: Vec<f64> = times
                .iter()
                .cloned()
                .filter(|&t| t > iv.t_start && t < iv.t_end && !same_time(t, iv.t_start) && !same_time(t, iv.t_end))
                .collect();
            cuts.sort_by(f64::total_cmp);
            cuts.dedup_by(|a, b| same_time(*a, *b));
            let mut start = iv.t_start;
            for c in cuts {
                let mut piece = iv.clone();
                piece.t_start = start;
                piece.t_end = c;
                let mut next = iv.clone();
                next.t_start = c;
                transitions.push(SingularTransition::identity(c, Some(&piece), Some(&next))?);
                intervals.push(piece);
                start = c;
            }
            let mut last = iv.clone();
            last.t_start = start;
            intervals.push(last);
            transitions.push(self.transitions[i + 1].clone());
        }
        SingularFlow::new(self.name.clone(), intervals, transitions)
    }
}

fn local_equilibrium(pi: &DVector<f64>, map: &[usize], m: usize) -> DVector<f64> {
    let mut mass = vec![0.0; m];
    for (x, &z) in map.iter().enumerate() {
        mass[z] += pi[x];
    }
    DVector::from_fn(map.len(), |x, _| pi[x] / mass[map[x]])
}

/// Product of two flows on the same time range.
pub fn product_flow(a: &SingularFlow, b: &SingularFlow) -> Result<SingularFlow> {
    let (ra, rb) = (a.time_range(), b.time_range());
    if !same_time(ra.0, rb.0) || !same_time(ra.1, rb.1) {
        return Err(Error::Invalid(format!("incompatible time ranges {ra:?} and {rb:?}")));
    }
    let times: Vec<f64> = a.transitions.iter().chain(b.transitions.iter()).map(|t| t.time).collect();
    let (a, b) = (a.refine(&times)?, b.refine(&times)?);
    if a.intervals.len() != b.intervals.len() {
        return Err(Error::Invalid("partitions could not be aligned".into()));
    }
    let mut intervals = Vec::new();
    for (ia, ib) in a.intervals.iter().zip(&b.intervals) {
        let (n1, n2) = (ia.len(), ib.len());
        let mut edges = Vec::new();
        for e in &ia.edges {
            for x2 in 0..n2 {
                edges.push(EdgeSchedule { from: e.from * n2 + x2, to: e.to * n2 + x2, schedule: e.schedule.clone() });
            }
        }
        for e in &ib.edges {
            for x1 in 0..n1 {
                edges.push(EdgeSchedule { from: x1 * n2 + e.from, to: x1 * n2 + e.to, schedule: e.schedule.clone() });
            }
        }
        let mut states = Vec::new();
        let mut pi = Vec::new();
        for x1 in 0..n1 {
            for x2 in 0..n2 {
                states.push(product_label(&ia.states[x1], &ib.states[x2]));
                pi.push(ia.pi[x1].times_mul(&ib.pi[x2]));
            }
        }
        intervals.push(IntervalSpec::new(ia.t_start, ia.t_end, states, edges, pi)?);
    }
    let mut transitions = Vec::new();
    for (ta, tb) in a.transitions.iter().zip(&b.transitions) {
        let nb = tb.boundary.len();
        let combine = |ma: &Option<Vec<usize>>, mb: &Option<Vec<usize>>| -> Option<Vec<usize>> {
            let (ma, mb) = (ma.as_ref()?, mb.as_ref()?);
            Some(ma.iter().flat_map(|&za| mb.iter().map(move |&zb| za * nb + zb)).collect())
        };
        transitions.push(SingularTransition {
            time: ta.time,
            boundary: ta.boundary.product(&tb.boundary),
            collapse: combine(&ta.collapse, &tb.collapse),
            spawn: combine(&ta.spawn, &tb.spawn),
        });
    }
    SingularFlow::new(format!("{}*{}", a.name, b.name), intervals, transitions)
}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

/// One validated condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub condition: String,
    pub location: String,
    pub passed: bool,
    pub severity: Severity,
    pub detail: String,
}

/// Outcome of [`validate_flow`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub flow: String,
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    /// No failed check of error severity.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed || c.severity == Severity::Warning)
    }

    pub fn failures(&self) -> Vec<&ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed && c.severity == Severity::Error).collect()
    }

    pub fn warnings(&self) -> Vec<&ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed && c.severity == Severity::Warning).collect()
    }

    pub fn has_failure(&self, condition: &str) -> bool {
        self.failures().iter().any(|c| c.condition == condition)
    }

    fn push(&mut self, condition: &str, location: String, result: std::result::Result<(), String>, severity: Severity) {
        let (passed, detail) = match result {
            Ok(()) => (true, String::new()),
            Err(e) => (false, e),
        };
        self.checks.push(ValidationCheck { condition: condition.into(), location, passed, severity, detail });
    }
}

/// Check the defining conditions of a singular time-dependent triple and
/// the growth conditions on exploding rates.
pub fn validate_flow(flow: &SingularFlow) -> ValidationReport {
    let mut rep = ValidationReport { flow: flow.name.clone(), checks: Vec::new() };
    let n = flow.intervals.len();

    let partition = (|| {
        for (i, iv) in flow.intervals.iter().enumerate() {
            if !same_time(flow.transitions[i].time, iv.t_start) || !same_time(flow.transitions[i + 1].time, iv.t_end) {
                return Err(format!("interval {i} does not match the transition times"));
            }
            if !(iv.t_start < iv.t_end) {
                return Err(format!("interval {i} is empty"));
            }
        }
        Ok(())
    })();
    rep.push("time-partition", "flow".into(), partition, Severity::Error);

    for (i, iv) in flow.intervals.iter().enumerate() {
        let loc = format!("interval {i} [{}, {}]", iv.t_start, iv.t_end);
        let sched = iv
            .edges
            .iter()
            .map(|e| e.schedule.check_on(iv.t_start, iv.t_end).map_err(|m| format!("{}→{}: {m}", iv.states[e.from], iv.states[e.to])))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(|_| ());
        rep.push("rate-schedule", loc.clone(), sched, Severity::Error);

        let (mut pos, mut norm, mut db, mut irr) = (Ok(()), Ok(()), Ok(()), Ok(()));
        for k in 0..VALIDATION_SAMPLES {
            let t = iv.t_start + (iv.t_end - iv.t_start) * (k as f64 + 0.5) / VALIDATION_SAMPLES as f64;
            let p = iv.pi_at(t);
            if pos.is_ok() && p.iter().any(|&v| !(v > 0.0 && v < 1.0 + 1e-12)) {
                pos = Err(format!("π_t leaves (0,1] at t = {t}"));
            }
            if norm.is_ok() && (p.sum() - 1.0).abs() > 1e-10 {
                norm = Err(format!("π_t sums to {} at t = {t}", p.sum()));
            }
            if let Ok(tr) = iv.triple_at_unchecked(t) {
                if db.is_ok() && tr.detailed_balance_defect() > crate::chain::DETAILED_BALANCE_RTOL {
                    db = Err(format!("detailed balance defect {:.3e} at t = {t}", tr.detailed_balance_defect()));
                }
                if irr.is_ok() && !tr.is_irreducible() {
                    irr = Err(format!("rate graph disconnected at t = {t}"));
                }
            }
        }
        rep.push("pi-positivity", loc.clone(), pos, Severity::Error);
        rep.push("pi-normalization", loc.clone(), norm, Severity::Error);
        rep.push("detailed-balance", loc.clone(), db, Severity::Error);
        rep.push("irreducibility", loc.clone(), irr, Severity::Error);
    }

    for (i, tr) in flow.transitions.iter().enumerate() {
        let outer = i == 0 || i == n;
        let loc = format!("transition {i} at t = {}", tr.time);
        rep.push(
            "boundary-detailed-balance",
            loc.clone(),
            if tr.boundary.detailed_balance_defect() <= LIMIT_RTOL { Ok(()) } else { Err(format!("defect {:.3e}", tr.boundary.detailed_balance_defect())) },
            Severity::Error,
        );
        rep.push(
            "boundary-irreducibility",
            loc.clone(),
            if tr.boundary.is_irreducible() { Ok(()) } else { Err("boundary rate graph disconnected".into()) },
            Severity::Error,
        );
        let sides: [(Option<&IntervalSpec>, &Option<Vec<usize>>, bool, &str); 2] = [
            (i.checked_sub(1).map(|k| &flow.intervals[k]), &tr.collapse, true, "collapse"),
            (flow.intervals.get(i), &tr.spawn, false, "spawn"),
        ];
        for (iv, map, at_end, side) in sides {
            let (Some(iv), Some(map)) = (iv, map) else { continue };
            let m = tr.boundary.len();
            let surj = {
                let classes = fibres(map, m);
                match classes.iter().position(|c| c.is_empty()) {
                    Some(z) => Err(format!("{side} map misses boundary state {}", tr.boundary.labels()[z])),
                    None => Ok(()),
                }
            };
            rep.push("map-surjective", format!("{loc} ({side})"), surj, Severity::Error);
            let behaviors = iv.edge_behaviors(at_end);
            rep.push("equivalence-classes", format!("{loc} ({side})"), check_classes(iv, map, m, &behaviors), Severity::Error);
            rep.push("rate-divergence", format!("{loc} ({side})"), check_divergence(iv, &behaviors), Severity::Error);
            rep.push("limit-pi", format!("{loc} ({side})"), check_limit_pi(iv, map, tr, at_end), Severity::Error);
            rep.push("limit-q", format!("{loc} ({side})"), check_limit_q(iv, map, tr, at_end), Severity::Error);
            let growth = if at_end { check_collapse_growth(iv, map, m, &behaviors) } else { check_spawn_growth(iv, map, m, &behaviors) };
            let cond = if at_end { "collapse-growth" } else { "spawn-growth" };
            rep.push(cond, format!("{loc} ({side})"), growth, if outer { Severity::Warning } else { Severity::Error });
        }
    }
    rep
}

fn check_classes(iv: &IntervalSpec, map: &[usize], m: usize, behaviors: &[(usize, usize, EndBehavior)]) -> std::result::Result<(), String> {
    let k = iv.len();
    // Union-find over exploding edges.
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(x, y, b) in behaviors {
        if let EndBehavior::Pole { .. } = b {
            if map[x] != map[y] {
                return Err(format!("rate {}→{} explodes across different classes", iv.states[x], iv.states[y]));
            }
            let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
            parent[rx] = ry;
        }
    }
    for class in fibres(map, m) {
        if let Some((&first, rest)) = class.split_first() {
            let r = find(&mut parent, first);
            for &x in rest {
                if find(&mut parent, x) != r {
                    return Err(format!(
                        "{} and {} share a class but are not joined by exploding rates",
                        iv.states[first], iv.states[x]
                    ));
                }
            }
        }
    }
    Ok(())
}

fn check_divergence(iv: &IntervalSpec, behaviors: &[(usize, usize, EndBehavior)]) -> std::result::Result<(), String> {
    for &(x, y, b) in behaviors {
        if let EndBehavior::Pole { order, .. } = b {
            if order < 1.0 {
                return Err(format!(
                    "rate {}→{} explodes with pole order {order} < 1, so its time integral stays finite",
                    iv.states[x], iv.states[y]
                ));
            }
        }
    }
    Ok(())
}

fn check_limit_pi(iv: &IntervalSpec, map: &[usize], tr: &SingularTransition, at_end: bool) -> std::result::Result<(), String> {
    let p = iv.pi_limits(at_end);
    let mut agg = vec![0.0; tr.boundary.len()];
    for (x, &z) in map.iter().enumerate() {
        agg[z] += p[x];
    }
    for (z, &a) in agg.iter().enumerate() {
        let declared = tr.boundary.pi()[z];
        if (a - declared).abs() > LIMIT_RTOL * declared.max(a) + 1e-12 {
            return Err(format!("π({}) = {declared} but the class limits sum to {a}", tr.boundary.labels()[z]));
        }
    }
    Ok(())
}

fn check_limit_q(iv: &IntervalSpec, map: &[usize], tr: &SingularTransition, at_end: bool) -> std::result::Result<(), String> {
    let labels = tr.boundary.labels().to_vec();
    let agg = aggregate_limits(iv, map, labels, at_end).map_err(|e| e.to_string())?;
    let m = tr.boundary.len();
    for z in 0..m {
        for w in 0..m {
            if z == w {
                continue;
            }
            let (a, d) = (agg.rate(z, w), tr.boundary.rate(z, w));
            if (a - d).abs() > LIMIT_RTOL * a.abs().max(d.abs()) + 1e-12 {
                return Err(format!(
                    "boundary rate {}→{} is {d} but the aggregated limit is {a}",
                    tr.boundary.labels()[z],
                    tr.boundary.labels()[w]
                ));
            }
        }
    }
    Ok(())
}

fn class_poles(map: &[usize], m: usize, behaviors: &[(usize, usize, EndBehavior)]) -> Vec<Vec<(f64, f64)>> {
    let mut out = vec![Vec::new(); m];
    for &(x, y, b) in behaviors {
        if let EndBehavior::Pole { order, coeff } = b {
            if map[x] == map[y] {
                out[map[x]].push((order, coeff));
            }
        }
    }
    out
}

fn check_collapse_growth(iv: &IntervalSpec, map: &[usize], m: usize, behaviors: &[(usize, usize, EndBehavior)]) -> std::result::Result<(), String> {
    for (z, poles) in class_poles(map, m, behaviors).into_iter().enumerate() {
        if poles.is_empty() {
            continue;
        }
        // Q_max ~ c_max / δ^{p_max}; exp(-2∫Q_min) ~ δ^{2 c_min} when p_min = 1
        // and decays faster than any power when p_min > 1.
        let p_max = poles.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let p_min = poles.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        if p_min > 1.0 {
            continue;
        }
        let c_min = poles.iter().filter(|p| p.0 == p_min).map(|p| p.1).fold(f64::INFINITY, f64::min);
        if !(2.0 * c_min > p_max) {
            let members: Vec<&str> = (0..iv.len()).filter(|&x| map[x] == z).map(|x| iv.states[x].as_str()).collect();
            return Err(format!(
                "class {{{}}}: Q_max exp(-2∫Q_min) ~ δ^({}) does not vanish (minimal pole coefficient {c_min})",
                members.join(", "),
                2.0 * c_min - p_max
            ));
        }
    }
    Ok(())
}

fn check_spawn_growth(iv: &IntervalSpec, map: &[usize], m: usize, behaviors: &[(usize, usize, EndBehavior)]) -> std::result::Result<(), String> {
    for (z, poles) in class_poles(map, m, behaviors).into_iter().enumerate() {
        if let Some(p_max) = poles.iter().map(|p| p.0).reduce(f64::max) {
            if p_max >= 2.0 {
                let members: Vec<&str> = (0..iv.len()).filter(|&x| map[x] == z).map(|x| iv.states[x].as_str()).collect();
                return Err(format!("class {{{}}}: (t - t_i)² Q_max does not vanish (pole order {p_max})", members.join(", ")));
            }
        }
    }
    Ok(())
}

/// Named real parameters for [`crate::scenarios::builtin_scenario`].
pub type Params = BTreeMap<String, f64>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = RateSchedule::CollapsePole { c: 1.0, t_end: 1.0, order: 1.0 };
        assert!((s.value(0.99) - 100.0).abs() < 1e-9);
        let sol = RateSchedule::SolitonScaled { c: 1.0, kappa: 2.0, t_ref: 0.0, scale: 1.0 };
        for &t in &[0.0, 0.1, 0.2, 0.24] {
            assert!((sol.value(t) - 1.0 / (1.0 - 4.0 * t)).abs() < 1e-12);
        }
        assert_eq!(sol.behavior_at(0.25), EndBehavior::Pole { order: 1.0, coeff: 0.25 });
        let sampled = RateSchedule::LogLipschitzSampled { times: vec![0.0, 1.0], values: vec![1.0, std::f64::consts::E] };
        assert!((sampled.value(0.5) - 0.5f64.exp()).abs() < 1e-12);
        assert!((sampled.log_lipschitz(0.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let kinds = [
            RateSchedule::Affine { a: 1.0, b: 2.0 },
            RateSchedule::SolitonScaled { c: 0.7, kappa: 1.5, t_ref: 0.1, scale: 1.0 },
            RateSchedule::CollapsePole { c: 0.3, t_end: 2.0, order: 1.5 },
            RateSchedule::SpawnPole { c: 0.3, t_start: -1.0, order: 1.0 },
        ];
        for k in kinds {
            let (t, h) = (0.2, 1e-6);
            let fd = (k.value(t + h) - k.value(t - h)) / (2.0 * h);
            assert!((fd - k.derivative(t)).abs() < 1e-6, "{k:?}");
        }
    }

    #[test]
    fn constant_pi_products_fold() {
        let p = PiSchedule::Constant { v: 0.5 }.times_mul(&PiSchedule::Constant { v: 0.25 });
        assert_eq!(p, PiSchedule::Constant { v: 0.125 });
    }
}
