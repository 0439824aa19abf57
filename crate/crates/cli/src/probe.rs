//! Command-line functions and measures.
//!
//! | spec | function | measure |
//! |---|---|---|
//! | `delta:X` | indicator of `X` | point mass at `X` |
//! | `const:C` | constant `C` | |
//! | `values:a,b,...` | in state order | in state order, must sum to 1 |
//! | `probe:NAME` | scenario potential | scenario measure |
//! | `pi` | | invariant measure |
//! | `uniform` | | uniform measure |
//!
//! `X` is a state label, or `vN` for the state at index `N` when no state
//! carries that label.

use nalgebra::DVector;

use crate::scenario::Probes;

fn state_index(states: &[String], x: &str) -> Result<usize, String> {
    if let Some(i) = states.iter().position(|s| s == x) {
        return Ok(i);
    }
    x.strip_prefix('v')
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&i| i < states.len())
        .ok_or_else(|| format!("no state `{x}` among [{}]", states.join(", ")))
}

fn values(list: &str, n: usize) -> Result<DVector<f64>, String> {
    let v: Vec<f64> = list.split(',').map(|s| s.trim().parse::<f64>().map_err(|e| format!("`{s}`: {e}"))).collect::<Result<_, _>>()?;
    if v.len() != n {
        return Err(format!("expected {n} values, got {}", v.len()));
    }
    Ok(DVector::from_vec(v))
}

fn named(table: &std::collections::BTreeMap<String, std::collections::BTreeMap<String, f64>>, name: &str, states: &[String]) -> Result<DVector<f64>, String> {
    let entries = table.get(name).ok_or_else(|| format!("scenario has no probe `{name}`"))?;
    let mut v = DVector::zeros(states.len());
    for (label, &value) in entries {
        v[state_index(states, label)?] = value;
    }
    Ok(v)
}

fn delta(states: &[String], x: &str) -> Result<DVector<f64>, String> {
    let i = state_index(states, x)?;
    Ok(DVector::from_fn(states.len(), |k, _| if k == i { 1.0 } else { 0.0 }))
}

/// A function on `states`.
pub fn function(spec: &str, states: &[String], probes: &Probes) -> Result<DVector<f64>, String> {
    let n = states.len();
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let f = match kind {
        "delta" => delta(states, arg)?,
        "const" => DVector::from_element(n, arg.parse::<f64>().map_err(|e| format!("`{arg}`: {e}"))?),
        "values" => values(arg, n)?,
        "probe" => named(&probes.potentials, arg, states)?,
        _ => return Err(format!("unknown function spec `{spec}`; use delta:X, const:C, values:a,b,... or probe:NAME")),
    };
    if f.iter().any(|v| !v.is_finite()) {
        return Err(format!("function `{spec}` has non-finite values"));
    }
    Ok(f)
}

/// A probability measure on `states`; `pi` is the invariant measure there.
pub fn measure(spec: &str, states: &[String], pi: &DVector<f64>, probes: &Probes) -> Result<DVector<f64>, String> {
    let n = states.len();
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let mu = match kind {
        "pi" => pi.clone(),
        "uniform" => DVector::from_element(n, 1.0 / n as f64),
        "delta" => delta(states, arg)?,
        "values" => values(arg, n)?,
        "probe" => named(&probes.measures, arg, states)?,
        _ => return Err(format!("unknown measure spec `{spec}`; use pi, uniform, delta:X, values:a,b,... or probe:NAME")),
    };
    if mu.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || (mu.sum() - 1.0).abs() > 1e-9 {
        return Err(format!("measure `{spec}` is not a probability measure"));
    }
    Ok(mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn labels_take_precedence_over_indices() {
        let s: Vec<String> = vec!["v1".into(), "x".into()];
        assert_eq!(function("delta:v1", &s, &Probes::default()).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(function("delta:v0", &states(), &Probes::default()).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert!(function("delta:v3", &states(), &Probes::default()).is_err());
    }

    #[test]
    fn measures_must_be_normalized() {
        let pi = DVector::from_element(3, 1.0 / 3.0);
        assert!(measure("values:0.2,0.3,0.5", &states(), &pi, &Probes::default()).is_ok());
        assert!(measure("values:0.2,0.3,0.6", &states(), &pi, &Probes::default()).is_err());
        assert_eq!(measure("pi", &states(), &pi, &Probes::default()).unwrap(), pi);
    }

    #[test]
    fn probes_default_to_zero() {
        let mut probes = Probes::default();
        probes.potentials.insert("f".into(), [("b".to_string(), 2.0)].into_iter().collect());
        assert_eq!(function("probe:f", &states(), &probes).unwrap().as_slice(), &[0.0, 2.0, 0.0]);
        assert!(function("probe:g", &states(), &probes).is_err());
    }
}
