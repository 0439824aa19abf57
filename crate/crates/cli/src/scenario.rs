//! Scenario documents: the JSON form of a [`SingularFlow`].
//!
//! States and maps are keyed by vertex label. A transition may declare its
//! boundary limits; when it does not, they are aggregated from the interval
//! on the left (or on the right for the first transition).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use srf_core::schedule::{aggregate_limits, EdgeSchedule, IntervalSpec, Params, PiSchedule, RateSchedule, SingularTransition};
use srf_core::scenarios::BUILTIN_NAMES;
use srf_core::{builtin_scenario, validate_flow, MarkovTriple, SingularFlow};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDocument {
    pub schema_version: u32,
    pub name: String,
    pub intervals: Vec<IntervalDoc>,
    pub transitions: Vec<TransitionDoc>,
    #[serde(default, skip_serializing_if = "Probes::is_empty")]
    pub probes: Probes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntervalDoc {
    pub t_start: f64,
    pub t_end: f64,
    pub states: Vec<String>,
    pub edges: Vec<EdgeDoc>,
    /// One schedule per state, in the order of `states`.
    pub pi: Vec<PiSchedule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub from: String,
    pub to: String,
    #[serde(flatten)]
    pub schedule: RateSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionDoc {
    pub time: f64,
    /// Vertex set of the boundary triple.
    pub states: Vec<String>,
    /// Interval state on the left to boundary state. Defaults to the
    /// identity by label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collapse: Option<BTreeMap<String, String>>,
    /// Interval state on the right to boundary state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits: Option<LimitsDoc>,
}

/// Declared boundary triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsDoc {
    pub pi: Vec<f64>,
    pub rates: Vec<RateDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateDoc {
    pub from: String,
    pub to: String,
    pub rate: f64,
}

/// Named inputs, keyed by vertex label; labels not listed are zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probes {
    #[serde(default)]
    pub measures: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub potentials: BTreeMap<String, BTreeMap<String, f64>>,
}

impl Probes {
    pub fn is_empty(&self) -> bool {
        self.measures.is_empty() && self.potentials.is_empty()
    }
}

/// A problem in a scenario document, with its location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputError {
    pub location: String,
    pub message: String,
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum ScenarioError {
    Io { message: String },
    Schema { errors: Vec<InputError> },
    /// The document parsed but the flow fails validation.
    Validation { errors: Vec<InputError> },
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (what, errors) = match self {
            ScenarioError::Io { message } => return write!(f, "cannot read scenario: {message}"),
            ScenarioError::Schema { errors } => ("invalid scenario", errors),
            ScenarioError::Validation { errors } => ("scenario fails validation", errors),
        };
        write!(f, "{what}")?;
        for e in errors {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ScenarioError {}

fn schema(location: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { errors: vec![InputError { location: location.into(), message: message.into() }] }
}

/// A flow together with where it came from.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub flow: SingularFlow,
    pub probes: Probes,
    /// `builtin:NAME` or the file path.
    pub source: String,
}

impl Scenario {
    /// SHA-256 of the exported document; equal flows share a digest.
    pub fn digest(&self) -> String {
        let doc = export(&self.flow, &self.probes);
        let text = serde_json::to_string(&doc).expect("scenario documents serialize");
        format!("{:x}", Sha256::digest(text.as_bytes()))
    }
}

/// Resolve `builtin:NAME`, a path, or a bare builtin name.
pub fn load(spec: &str, params: &Params) -> Result<Scenario, ScenarioError> {
    let builtin = spec.strip_prefix("builtin:").or_else(|| (!Path::new(spec).exists() && BUILTIN_NAMES.contains(&spec)).then_some(spec));
    if let Some(name) = builtin {
        let flow = builtin_scenario(name, params).map_err(|e| schema(format!("builtin:{name}"), e.to_string()))?;
        return Ok(Scenario { flow, probes: Probes::default(), source: format!("builtin:{name}") });
    }
    if !params.is_empty() {
        return Err(schema("--param", "parameters apply to builtin scenarios only"));
    }
    let sc = load_unchecked(spec)?;
    check(&sc.flow)?;
    Ok(sc)
}

/// Like [`load`] for files, without rejecting flows that fail validation.
pub fn load_unchecked(path: &str) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io { message: format!("{path}: {e}") })?;
    let doc = parse_document(&text)?;
    Ok(Scenario { flow: build(&doc)?, probes: doc.probes, source: path.to_string() })
}

pub fn parse_document(text: &str) -> Result<ScenarioDocument, ScenarioError> {
    let doc: ScenarioDocument =
        serde_json::from_str(text).map_err(|e| schema(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(schema("schema_version", format!("unsupported version {}, expected {SCHEMA_VERSION}", doc.schema_version)));
    }
    Ok(doc)
}

/// Reject flows with failed error-severity checks.
pub fn check(flow: &SingularFlow) -> Result<(), ScenarioError> {
    let report = validate_flow(flow);
    if report.passed() {
        return Ok(());
    }
    let errors = report
        .failures()
        .into_iter()
        .map(|c| InputError { location: c.location.clone(), message: format!("{}: {}", c.condition, c.detail) })
        .collect();
    Err(ScenarioError::Validation { errors })
}

fn index_of(states: &[String], label: &str, location: &str) -> Result<usize, InputError> {
    states
        .iter()
        .position(|s| s == label)
        .ok_or_else(|| InputError { location: location.into(), message: format!("unknown state `{label}`") })
}

fn resolve_map(
    map: Option<&BTreeMap<String, String>>,
    from: &[String],
    to: &[String],
    location: &str,
) -> Result<Vec<usize>, InputError> {
    match map {
        None => from.iter().map(|s| index_of(to, s, &format!("{location} (identity by label)"))).collect(),
        Some(m) => {
            for key in m.keys() {
                index_of(from, key, location)?;
            }
            from.iter()
                .map(|s| {
                    let target = m.get(s).ok_or_else(|| InputError { location: location.into(), message: format!("state `{s}` is not mapped") })?;
                    index_of(to, target, location)
                })
                .collect()
        }
    }
}

/// Build the flow described by a document, collecting every structural
/// error before giving up.
pub fn build(doc: &ScenarioDocument) -> Result<SingularFlow, ScenarioError> {
    let mut errors = Vec::new();
    let mut intervals = Vec::new();
    for (i, iv) in doc.intervals.iter().enumerate() {
        let loc = format!("intervals[{i}]");
        let mut edges = Vec::new();
        for (k, e) in iv.edges.iter().enumerate() {
            let eloc = format!("{loc}.edges[{k}]");
            match (index_of(&iv.states, &e.from, &eloc), index_of(&iv.states, &e.to, &eloc)) {
                (Ok(from), Ok(to)) => edges.push(EdgeSchedule { from, to, schedule: e.schedule.clone() }),
                (a, b) => errors.extend(a.err().into_iter().chain(b.err())),
            }
        }
        match IntervalSpec::new(iv.t_start, iv.t_end, iv.states.clone(), edges, iv.pi.clone()) {
            Ok(spec) => intervals.push(spec),
            Err(e) => errors.push(InputError { location: loc, message: e.to_string() }),
        }
    }
    if !errors.is_empty() {
        return Err(ScenarioError::Schema { errors });
    }
    let n = intervals.len();
    if doc.transitions.len() != n + 1 {
        return Err(schema("transitions", format!("expected {} transitions for {n} intervals, got {}", n + 1, doc.transitions.len())));
    }
    let mut transitions = Vec::new();
    for (i, tr) in doc.transitions.iter().enumerate() {
        let loc = format!("transitions[{i}]");
        let left = i.checked_sub(1).map(|k| &intervals[k]);
        let right = intervals.get(i);
        if left.is_none() && tr.collapse.is_some() {
            errors.push(InputError { location: loc.clone(), message: "the first transition has no collapse map".into() });
            continue;
        }
        if right.is_none() && tr.spawn.is_some() {
            errors.push(InputError { location: loc.clone(), message: "the last transition has no spawn map".into() });
            continue;
        }
        let collapse = left.map(|iv| resolve_map(tr.collapse.as_ref(), &iv.states, &tr.states, &format!("{loc}.collapse"))).transpose();
        let spawn = right.map(|iv| resolve_map(tr.spawn.as_ref(), &iv.states, &tr.states, &format!("{loc}.spawn"))).transpose();
        let (collapse, spawn) = match (collapse, spawn) {
            (Ok(c), Ok(s)) => (c, s),
            (c, s) => {
                errors.extend(c.err().into_iter().chain(s.err()));
                continue;
            }
        };
        let boundary = match &tr.limits {
            Some(l) => declared_limits(l, &tr.states, &format!("{loc}.limits")),
            None => {
                let (iv, map, at_end) = match (left, &collapse, right, &spawn) {
                    (Some(iv), Some(m), _, _) => (iv, m, true),
                    (_, _, Some(iv), Some(m)) => (iv, m, false),
                    _ => unreachable!("a transition borders at least one interval"),
                };
                aggregate_limits(iv, map, tr.states.clone(), at_end).map_err(|e| InputError { location: loc.clone(), message: e.to_string() })
            }
        };
        match boundary {
            Ok(boundary) => transitions.push(SingularTransition { time: tr.time, boundary, collapse, spawn }),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(ScenarioError::Schema { errors });
    }
    SingularFlow::new(doc.name.clone(), intervals, transitions).map_err(|e| schema("transitions", e.to_string()))
}

fn declared_limits(l: &LimitsDoc, states: &[String], loc: &str) -> Result<MarkovTriple, InputError> {
    let n = states.len();
    if l.pi.len() != n {
        return Err(InputError { location: format!("{loc}.pi"), message: format!("expected {n} weights, got {}", l.pi.len()) });
    }
    let mut rates = DMatrix::zeros(n, n);
    for (k, r) in l.rates.iter().enumerate() {
        let rloc = format!("{loc}.rates[{k}]");
        let (x, y) = (index_of(states, &r.from, &rloc)?, index_of(states, &r.to, &rloc)?);
        if x == y {
            return Err(InputError { location: rloc, message: "a rate needs two distinct states".into() });
        }
        rates[(x, y)] = r.rate;
    }
    MarkovTriple::new_unchecked(states.to_vec(), rates, DVector::from_column_slice(&l.pi))
        .map_err(|e| InputError { location: loc.into(), message: e.to_string() })
}

fn label_map(map: &[usize], from: &[String], to: &[String]) -> BTreeMap<String, String> {
    map.iter().enumerate().map(|(x, &z)| (from[x].clone(), to[z].clone())).collect()
}

/// The document of a flow. Limits are always written out, so a re-parsed
/// document reproduces the flow exactly.
pub fn export(flow: &SingularFlow, probes: &Probes) -> ScenarioDocument {
    let intervals = flow
        .intervals
        .iter()
        .map(|iv| IntervalDoc {
            t_start: iv.t_start,
            t_end: iv.t_end,
            states: iv.states.clone(),
            edges: iv
                .edges
                .iter()
                .map(|e| EdgeDoc { from: iv.states[e.from].clone(), to: iv.states[e.to].clone(), schedule: e.schedule.clone() })
                .collect(),
            pi: iv.pi.clone(),
        })
        .collect();
    let transitions = flow
        .transitions
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let b = &tr.boundary;
            let labels = b.labels().to_vec();
            let mut rates = Vec::new();
            for x in 0..b.len() {
                for y in 0..b.len() {
                    if x != y && b.rate(x, y) != 0.0 {
                        rates.push(RateDoc { from: labels[x].clone(), to: labels[y].clone(), rate: b.rate(x, y) });
                    }
                }
            }
            TransitionDoc {
                time: tr.time,
                collapse: tr.collapse.as_ref().map(|m| label_map(m, &flow.intervals[i - 1].states, &labels)),
                spawn: tr.spawn.as_ref().map(|m| label_map(m, &flow.intervals[i].states, &labels)),
                limits: Some(LimitsDoc { pi: b.pi().iter().copied().collect(), rates }),
                states: labels,
            }
        })
        .collect();
    ScenarioDocument { schema_version: SCHEMA_VERSION, name: flow.name.clone(), intervals, transitions, probes: probes.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_round_trips() {
        for name in BUILTIN_NAMES {
            let flow = builtin_scenario(name, &Params::new()).unwrap();
            let text = serde_json::to_string_pretty(&export(&flow, &Probes::default())).unwrap();
            let back = build(&parse_document(&text).unwrap()).unwrap();
            assert_eq!(back, flow, "{name}");
        }
    }

    #[test]
    fn omitted_limits_and_maps_are_derived() {
        let flow = builtin_scenario("two_point_soliton", &Params::new()).unwrap();
        let mut doc = export(&flow, &Probes::default());
        for tr in &mut doc.transitions {
            tr.limits = None;
        }
        // The first transition is the identity by label.
        doc.transitions[0].spawn = None;
        assert_eq!(build(&doc).unwrap(), flow);
    }

    #[test]
    fn unknown_labels_are_located() {
        let flow = builtin_scenario("toy", &Params::new()).unwrap();
        let mut doc = export(&flow, &Probes::default());
        doc.intervals[1].edges[0].from = "zz".into();
        let ScenarioError::Schema { errors } = build(&doc).unwrap_err() else { panic!() };
        assert_eq!(errors[0].location, "intervals[1].edges[0]");
        assert!(errors[0].message.contains("zz"));
    }

    #[test]
    fn unknown_schedule_kind_is_a_schema_error() {
        let flow = builtin_scenario("static", &Params::new()).unwrap();
        let text = serde_json::to_string(&export(&flow, &Probes::default())).unwrap().replacen("\"constant\"", "\"wobbly\"", 1);
        let err = parse_document(&text).unwrap_err();
        assert!(matches!(&err, ScenarioError::Schema { errors } if errors[0].message.contains("wobbly")), "{err}");
    }
}
