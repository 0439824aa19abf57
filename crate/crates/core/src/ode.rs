//! Dormand–Prince 5(4) integrator for linear matrix ODEs `Y' = F(t, Y)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Smallest admissible step relative to `1 + |t|`.
    pub min_step_rel: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, max_steps: 2_000_000, min_step_rel: 1e-15 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct OdeStats {
    pub steps: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl OdeStats {
    pub fn add(&mut self, o: &OdeStats) {
        self.steps += o.steps;
        self.rejected += o.rejected;
        self.evaluations += o.evaluations;
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights are the last row of A; E = b5 - b4.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrate from `t0` to `t1` (either direction), returning the state at
/// each of `outputs` (which must lie between `t0` and `t1` in the order of
/// integration) and at `t1` as the last entry.
pub fn dopri5<F>(mut f: F, t0: f64, y0: &DMatrix<f64>, t1: f64, outputs: &[f64], opts: &OdeOptions) -> Result<(Vec<DMatrix<f64>>, OdeStats)>
where
    F: FnMut(f64, &DMatrix<f64>) -> DMatrix<f64>,
{
    let mut stats = OdeStats::default();
    let mut out = Vec::with_capacity(outputs.len() + 1);
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut targets: Vec<f64> = outputs.to_vec();
    targets.push(t1);
    let mut y = y0.clone();
    let mut t = t0;
    if t0 == t1 {
        out.extend(targets.iter().map(|_| y.clone()));
        return Ok((out, stats));
    }
    let mut k1 = f(t, &y);
    stats.evaluations += 1;
    let mut h = initial_step(&y, &k1, (t1 - t0).abs(), opts) * dir;
    let mut ti = 0;
    while ti < targets.len() && (targets[ti] - t) * dir <= 0.0 {
        out.push(y.clone());
        ti += 1;
    }
    let mut k = vec![k1.clone(); 7];
    while ti < targets.len() {
        if stats.steps + stats.rejected >= opts.max_steps {
            return Err(Error::Numerical(format!("step budget exhausted at t = {t}")));
        }
        let target = targets[ti];
        let mut clipped = false;
        let mut step = h;
        if (t + step - target) * dir >= 0.0 {
            step = target - t;
            clipped = true;
        }
        let min_step = opts.min_step_rel * (1.0 + t.abs());
        if step.abs() < min_step && !clipped {
            return Err(Error::Numerical(format!("step size underflow at t = {t}")));
        }
        k[0] = k1.clone();
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys += kj * (step * A[s][j]);
                }
            }
            k[s] = f(t + C[s] * step, &ys);
        }
        stats.evaluations += 6;
        let mut y_new = y.clone();
        for j in 0..6 {
            if A[6][j] != 0.0 {
                y_new += &k[j] * (step * A[6][j]);
            }
        }
        let mut err_sq = 0.0;
        for i in 0..y.len() {
            let e: f64 = (0..7).map(|j| E[j] * k[j][i]).sum::<f64>() * step;
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / y.len().max(1) as f64).sqrt();
        if !err.is_finite() {
            h = step * 0.1;
            stats.rejected += 1;
            continue;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            stats.steps += 1;
            t = if clipped { target } else { t + step };
            y = y_new;
            // FSAL: the seventh stage is f at the new point.
            k1 = k[6].clone();
            let proposal = step * factor;
            h = if clipped { h.abs().max(proposal.abs()) * dir } else { proposal };
            while ti < targets.len() && (targets[ti] - t) * dir <= 0.0 {
                out.push(y.clone());
                ti += 1;
            }
        } else {
            stats.rejected += 1;
            h = step * factor.min(1.0);
        }
    }
    Ok((out, stats))
}

fn initial_step(y: &DMatrix<f64>, f0: &DMatrix<f64>, span: f64, opts: &OdeOptions) -> f64 {
    let mut d0: f64 = 0.0;
    let mut d1: f64 = 0.0;
    for i in 0..y.len() {
        let sc = opts.atol + opts.rtol * y[i].abs();
        d0 = d0.max((y[i] / sc).abs());
        d1 = d1.max((f0[i] / sc).abs());
    }
    let h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h.min(span).max(span * 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let y0 = DMatrix::from_element(1, 1, 1.0);
        let (ys, st) = dopri5(|_, y| -y, 0.0, &y0, 2.0, &[0.5, 1.0], &OdeOptions::default()).unwrap();
        assert_eq!(ys.len(), 3);
        for (y, t) in ys.iter().zip([0.5f64, 1.0, 2.0]) {
            assert!((y[0] - (-t).exp()).abs() < 1e-10);
        }
        assert!(st.steps > 0);
    }

    #[test]
    fn backward_direction() {
        let y0 = DMatrix::from_element(1, 1, 1.0);
        let (ys, _) = dopri5(|t, _| DMatrix::from_element(1, 1, 2.0 * t), 1.0, &y0, 0.0, &[], &OdeOptions::default()).unwrap();
        assert!((ys[0][0] - 0.0).abs() < 1e-10);
    }
}
