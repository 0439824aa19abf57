//! The discrete transport distance `𝒲`.
//!
//! Paths are discretized on a uniform grid `μ^0, …, μ^K` in the curve
//! parameter. For a step with midpoint `m` and displacement `d` the minimal
//! action over fluxes solving the continuity equation is
//! `K dᵀ L(m)⁺ d`, where `L(m)` is the weighted Laplacian with edge weights
//! `Λ(m(x) Q(x,y), m(y) Q(y,x))`. The primal minimizes the sum of these
//! reduced step costs over the interior nodes by a damped Newton method;
//! the Hessian is block tridiagonal in the nodes.
//!
//! The dual side maximizes `⟨φ¹,μ₁⟩ - ⟨φ⁰,μ₀⟩` over piecewise linear
//! Hamilton–Jacobi subsolutions `⟨φ̇,μ⟩ + ½Γ(μ,φ) ≤ 0`. Since `Γ(μ,·)` is
//! convex and `φ` is linear on each step, the constraint only has to hold at
//! the step endpoints. The constraint over all `μ` is enforced by cutting
//! planes; the final witness is shifted by the certified maximal violation,
//! so its value is a rigorous lower bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::chain::{lambda_weights_unchecked, lm, lm_hessian, lm_partials, weighted_form, MarkovTriple};
use crate::error::{check_len, Error, Result};
use crate::linalg::{block_tridiag_solve, laplacian_pinv, zero_sum_basis};

/// Mixing weight used to move boundary endpoints into the interior.
pub const INTERIOR_MIX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimalOptions {
    /// Stop when half the squared Newton decrement drops below
    /// `rel_tol · max(F, 1e-300)`.
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-12, max_iter: 500 }
    }
}

/// A discretized curve with fluxes.
#[derive(Debug, Clone, Serialize)]
pub struct TransportPath {
    pub nodes: Vec<Vec<f64>>,
    /// `V^k(x,y)` for `k = 1..=K`, row-major `n × n`.
    pub fluxes: Vec<Vec<f64>>,
    pub action: f64,
}

impl TransportPath {
    pub fn k(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.nodes[k])
    }

    pub fn flux(&self, k: usize) -> DMatrix<f64> {
        let n = self.nodes[0].len();
        DMatrix::from_row_slice(n, n, &self.fluxes[k - 1])
    }

    /// Largest entry of `μ^k - μ^{k-1} + (1/K) ∇·V^k`.
    pub fn continuity_residual(&self) -> f64 {
        let kk = self.k() as f64;
        let mut r: f64 = 0.0;
        for k in 1..=self.k() {
            let div = crate::chain::divergence(&self.flux(k));
            let res = self.node(k) - self.node(k - 1) + div / kk;
            r = r.max(res.amax());
        }
        r
    }
}

/// Result of [`primal_w2`].
#[derive(Debug, Clone, Serialize)]
pub struct PrimalSolution {
    /// Square root of the minimal discrete action.
    pub value: f64,
    pub path: TransportPath,
    pub newton_steps: usize,
    pub continuity_residual: f64,
}

/// `α(v, s, t) = v² / Λ(s,t)`, with `α(0, ·, ·) = 0` and `+∞` when `Λ = 0`
/// but `v ≠ 0`.
fn alpha(v: f64, s: f64, t: f64) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let l = lm(s, t);
    if l <= 0.0 {
        f64::INFINITY
    } else {
        v * v / l
    }
}

/// `𝒜(μ,V) = ½ Σ α(V(x,y), μ(x)Q(x,y), μ(y)Q(y,x))`.
pub fn action_density(triple: &MarkovTriple, mu: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let n = triple.len();
    let mut a = 0.0;
    for x in 0..n {
        for y in 0..n {
            if x != y {
                a += alpha(v[(x, y)], mu[x] * triple.rate(x, y), mu[y] * triple.rate(y, x));
            }
        }
    }
    0.5 * a
}

/// Riemann sum `(1/K) Σ_k 𝒜(½(μ^{k-1}+μ^k), V^k)` of a discrete path.
pub fn action(triple: &MarkovTriple, path: &TransportPath) -> Result<f64> {
    let n = triple.len();
    if path.nodes.len() < 2 || path.fluxes.len() + 1 != path.nodes.len() {
        return Err(Error::Invalid("a path needs K+1 nodes and K fluxes".into()));
    }
    for node in &path.nodes {
        check_len("path node", n, node.len())?;
    }
    for f in &path.fluxes {
        check_len("path flux", n * n, f.len())?;
    }
    let kk = path.k() as f64;
    let mut total = 0.0;
    for k in 1..=path.k() {
        let m = (path.node(k - 1) + path.node(k)) * 0.5;
        total += action_density(triple, &m, &path.flux(k));
    }
    Ok(total / kk)
}

struct StepEval {
    grad_a: DVector<f64>,
    grad_b: DVector<f64>,
    h_aa: DMatrix<f64>,
    h_ab: DMatrix<f64>,
    h_bb: DMatrix<f64>,
}

fn edge_list(triple: &MarkovTriple) -> Vec<(usize, usize)> {
    triple.edges()
}

/// Reduced step cost `G(m,d) = dᵀ L(m)⁺ d` with its potential `L⁺d`.
fn step_value(triple: &MarkovTriple, a: &DVector<f64>, b: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let m = (a + b) * 0.5;
    let d = b - a;
    let l = weighted_form(&lambda_weights_unchecked(triple, &m));
    let lp = laplacian_pinv(&l)?;
    let phi = &lp * &d;
    Ok((d.dot(&phi), phi))
}

fn step_eval(triple: &MarkovTriple, edges: &[(usize, usize)], a: &DVector<f64>, b: &DVector<f64>) -> Result<StepEval> {
    let n = triple.len();
    let ne = edges.len();
    let q = triple.rates();
    let m = (a + b) * 0.5;
    let d = b - a;
    let l = weighted_form(&lambda_weights_unchecked(triple, &m));
    let lp = laplacian_pinv(&l)?;
    let phi = &lp * &d;
    // g_e = b_eᵀ φ with b_e = e_y - e_x; J = ∂w/∂m.
    let g: Vec<f64> = edges.iter().map(|&(x, y)| phi[y] - phi[x]).collect();
    let mut jac = DMatrix::zeros(ne, n);
    let mut grad_m = DVector::zeros(n);
    let mut h_mm = DMatrix::zeros(n, n);
    for (e, &(x, y)) in edges.iter().enumerate() {
        let (s, t) = (m[x] * q[(x, y)], m[y] * q[(y, x)]);
        let (d1, d2) = lm_partials(s, t);
        jac[(e, x)] = q[(x, y)] * d1;
        jac[(e, y)] = q[(y, x)] * d2;
        let dg = -g[e] * g[e];
        grad_m[x] += dg * jac[(e, x)];
        grad_m[y] += dg * jac[(e, y)];
        let (h11, h12, h22) = lm_hessian(s, t);
        h_mm[(x, x)] += dg * q[(x, y)] * q[(x, y)] * h11;
        h_mm[(y, y)] += dg * q[(y, x)] * q[(y, x)] * h22;
        let c = dg * q[(x, y)] * q[(y, x)] * h12;
        h_mm[(x, y)] += c;
        h_mm[(y, x)] += c;
    }
    // L⁺ b_e as columns.
    let mut lpb = DMatrix::zeros(n, ne);
    for (e, &(x, y)) in edges.iter().enumerate() {
        let col = lp.column(y) - lp.column(x);
        lpb.set_column(e, &col);
    }
    // H_ww = 2 g_e g_f b_eᵀ L⁺ b_f.
    let mut h_ww = DMatrix::zeros(ne, ne);
    for (e, &(x, y)) in edges.iter().enumerate() {
        for f in 0..ne {
            let bt = lpb[(y, f)] - lpb[(x, f)];
            h_ww[(e, f)] = 2.0 * g[e] * g[f] * bt;
        }
    }
    // H_dw column e = -2 g_e L⁺ b_e.
    let mut h_dw = lpb.clone();
    for e in 0..ne {
        h_dw.column_mut(e).scale_mut(-2.0 * g[e]);
    }
    h_mm += jac.transpose() * &h_ww * &jac;
    let h_dm = &h_dw * &jac;
    let h_md = h_dm.transpose();
    let h_dd = &lp * 2.0;
    let grad_d = &phi * 2.0;

    let h_aa = &h_mm * 0.25 - (&h_md + &h_dm) * 0.5 + &h_dd;
    let h_bb = &h_mm * 0.25 + (&h_md + &h_dm) * 0.5 + &h_dd;
    let h_ab = &h_mm * 0.25 + &h_md * 0.5 - &h_dm * 0.5 - &h_dd;
    let grad_a = &grad_m * 0.5 - &grad_d;
    let grad_b = &grad_m * 0.5 + &grad_d;
    Ok(StepEval { grad_a, grad_b, h_aa, h_ab, h_bb })
}

/// Block-tridiagonal solve that adds a growing multiple of the identity
/// when the system is numerically indefinite.
fn regularized_solve(diag: &[DMatrix<f64>], upper: &[DMatrix<f64>], rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    // Symmetric Jacobi scaling: barrier Hessians mix entries of very
    // different magnitude near active constraints.
    let d: Vec<DVector<f64>> = diag.iter().map(|b| b.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })).collect();
    let diag: Vec<DMatrix<f64>> = diag.iter().zip(&d).map(|(b, s)| DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * s[i] * s[j])).collect();
    let upper: Vec<DMatrix<f64>> = upper.iter().enumerate().map(|(k, b)| DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)] * d[k][i] * d[k + 1][j])).collect();
    let rhs: Vec<DVector<f64>> = rhs.iter().zip(&d).map(|(r, s)| r.component_mul(s)).collect();
    let mut reg = 0.0;
    loop {
        let shifted: Vec<DMatrix<f64>> = diag.iter().map(|b| b + DMatrix::identity(b.nrows(), b.ncols()) * reg).collect();
        match block_tridiag_solve(&shifted, &upper, &rhs) {
            Ok(y) => return Ok(y.into_iter().zip(&d).map(|(y, s)| y.component_mul(s)).collect()),
            Err(_) if reg < 1.0 => reg = if reg == 0.0 { 1e-14 } else { reg * 100.0 },
            Err(e) => return Err(e),
        }
    }
}

fn check_pair(triple: &MarkovTriple, mu0: &DVector<f64>, mu1: &DVector<f64>) -> Result<()> {
    check_len("initial measure", triple.len(), mu0.len())?;
    check_len("final measure", triple.len(), mu1.len())?;
    for mu in [mu0, mu1] {
        if !crate::chain::is_probability(mu, 1e-9) {
            return Err(Error::Domain("endpoints must be probability measures".into()));
        }
    }
    if !triple.is_irreducible() {
        return Err(Error::Domain("transport needs an irreducible triple".into()));
    }
    Ok(())
}

fn objective(triple: &MarkovTriple, nodes: &[DVector<f64>]) -> Result<f64> {
    let kk = (nodes.len() - 1) as f64;
    let mut f = 0.0;
    for k in 1..nodes.len() {
        f += step_value(triple, &nodes[k - 1], &nodes[k])?.0;
    }
    Ok(kk * f)
}

/// Minimal discrete action between `mu0` and `mu1` on a `K`-step grid.
pub fn primal_w2(triple: &MarkovTriple, mu0: &DVector<f64>, mu1: &DVector<f64>, k: usize, opts: &PrimalOptions) -> Result<PrimalSolution> {
    check_pair(triple, mu0, mu1)?;
    if k == 0 {
        return Err(Error::Invalid("grid size K must be at least 1".into()));
    }
    let n = triple.len();
    let kk = k as f64;
    let edges = edge_list(triple);
    let interior = mu0.iter().chain(mu1.iter()).all(|&v| v > 0.0);
    let mut nodes: Vec<DVector<f64>> = (0..=k)
        .map(|j| {
            let a = j as f64 / kk;
            let lin = mu0 * (1.0 - a) + mu1 * a;
            if interior || j == 0 || j == k {
                lin
            } else {
                lin * 0.99 + triple.pi() * 0.01
            }
        })
        .collect();
    let u = zero_sum_basis(n);
    let mut f = objective(triple, &nodes)?;
    let mut steps = 0;
    while k > 1 && steps < opts.max_iter {
        let evals: Vec<StepEval> = (1..=k).map(|j| step_eval(triple, &edges, &nodes[j - 1], &nodes[j])).collect::<Result<_>>()?;
        let mut diag = Vec::with_capacity(k - 1);
        let mut upper = Vec::with_capacity(k.saturating_sub(2));
        let mut rhs = Vec::with_capacity(k - 1);
        for j in 1..k {
            let h = (&evals[j - 1].h_bb + &evals[j].h_aa) * kk;
            diag.push(u.transpose() * h * &u);
            let g = (&evals[j - 1].grad_b + &evals[j].grad_a) * kk;
            rhs.push(-(u.transpose() * g));
            if j + 1 < k {
                upper.push(u.transpose() * (&evals[j].h_ab * kk) * &u);
            }
        }
        let dy = regularized_solve(&diag, &upper, &rhs)?;
        let decrement: f64 = dy.iter().zip(&rhs).map(|(x, r)| x.dot(r)).sum();
        if !(decrement > 0.0) || 0.5 * decrement <= opts.rel_tol * f.max(1e-300) {
            break;
        }
        let dmu: Vec<DVector<f64>> = dy.iter().map(|y| &u * y).collect();
        // Fraction to the boundary of the simplex.
        let mut alpha: f64 = 1.0;
        for (j, dm) in dmu.iter().enumerate() {
            for x in 0..n {
                if dm[x] < 0.0 {
                    alpha = alpha.min(0.95 * nodes[j + 1][x] / -dm[x]);
                }
            }
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<DVector<f64>> = nodes
                .iter()
                .enumerate()
                .map(|(j, v)| if j == 0 || j == k { v.clone() } else { v + &dmu[j - 1] * alpha })
                .collect();
            if let Ok(ft) = objective(triple, &trial) {
                if ft <= f - 1e-4 * alpha * decrement {
                    nodes = trial;
                    f = ft;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        steps += 1;
        if !accepted {
            break;
        }
    }
    let path = build_path(triple, &nodes)?;
    let residual = path.continuity_residual();
    if residual > 1e-8 {
        return Err(Error::Numerical(format!("continuity residual {residual:.3e} after {steps} Newton steps")));
    }
    Ok(PrimalSolution { value: f.max(0.0).sqrt(), path, newton_steps: steps, continuity_residual: residual })
}

/// Optimal fluxes `V^k = Λ(m_k) ∇ψ^k` with `ψ^k = K L(m_k)⁺ (μ^k - μ^{k-1})`.
fn build_path(triple: &MarkovTriple, nodes: &[DVector<f64>]) -> Result<TransportPath> {
    let n = triple.len();
    let kk = (nodes.len() - 1) as f64;
    let mut fluxes = Vec::new();
    for k in 1..nodes.len() {
        let (_, phi) = step_value(triple, &nodes[k - 1], &nodes[k])?;
        let m = (&nodes[k - 1] + &nodes[k]) * 0.5;
        let w = lambda_weights_unchecked(triple, &m);
        let v = DMatrix::from_fn(n, n, |x, y| kk * w[(x, y)] * (phi[y] - phi[x]));
        fluxes.push(v.transpose().as_slice().to_vec());
    }
    let mut path = TransportPath { nodes: nodes.iter().map(|v| v.as_slice().to_vec()).collect(), fluxes, action: 0.0 };
    path.action = action(triple, &path)?;
    Ok(path)
}

/// Constant-speed geodesic: the primal minimizer reparameterized by arc
/// length. Endpoints with zero entries are mixed with `π` first.
#[derive(Debug, Clone, Serialize)]
pub struct Geodesic {
    pub path: TransportPath,
    pub value: f64,
    /// `max_k |K · action_k / total - 1|` over the steps.
    pub speed_deviation: f64,
    /// Whether the endpoints were mixed into the interior.
    pub mixed_endpoints: bool,
}

pub fn geodesic(triple: &MarkovTriple, mu0: &DVector<f64>, mu1: &DVector<f64>, k: usize, opts: &PrimalOptions) -> Result<Geodesic> {
    check_pair(triple, mu0, mu1)?;
    let mixed = mu0.iter().chain(mu1.iter()).any(|&v| v <= 0.0);
    let (a, b) = if mixed {
        (crate::chain::mix_with_pi(triple, mu0, INTERIOR_MIX), crate::chain::mix_with_pi(triple, mu1, INTERIOR_MIX))
    } else {
        (mu0.clone(), mu1.clone())
    };
    let sol = primal_w2(triple, &a, &b, k, opts)?;
    let nodes: Vec<DVector<f64>> = (0..=k).map(|j| sol.path.node(j)).collect();
    // Arc length of each step, √G.
    let mut cum = vec![0.0];
    for j in 1..=k {
        let (g, _) = step_value(triple, &nodes[j - 1], &nodes[j])?;
        cum.push(cum[j - 1] + g.max(0.0).sqrt());
    }
    let total = cum[k];
    let reparam: Vec<DVector<f64>> = if total > 0.0 {
        (0..=k)
            .map(|j| {
                let target = total * j as f64 / k as f64;
                let i = cum.partition_point(|&c| c < target).clamp(1, k);
                let span = cum[i] - cum[i - 1];
                let w = if span > 0.0 { ((target - cum[i - 1]) / span).clamp(0.0, 1.0) } else { 0.0 };
                &nodes[i - 1] * (1.0 - w) + &nodes[i] * w
            })
            .collect()
    } else {
        nodes
    };
    let path = build_path(triple, &reparam)?;
    let kk = k as f64;
    let per_step: Vec<f64> = (1..=k)
        .map(|j| action_density(triple, &((path.node(j - 1) + path.node(j)) * 0.5), &path.flux(j)) / kk)
        .collect();
    let sum: f64 = per_step.iter().sum();
    let speed_deviation = if sum > 0.0 { per_step.iter().map(|&a| (kk * a / sum - 1.0).abs()).fold(0.0, f64::max) } else { 0.0 };
    Ok(Geodesic { value: sol.value, path, speed_deviation, mixed_endpoints: mixed })
}

/// `G(μ,s) = ⟨s, ψ⟩` with `K_μ ψ = s`, `K_μ ψ = -∇·(Λ(μ)∇ψ)`.
#[derive(Debug, Clone)]
pub struct MetricTensorSolve {
    pub value: f64,
    pub potential: DVector<f64>,
    pub residual: f64,
}

pub fn metric_tensor(triple: &MarkovTriple, mu: &DVector<f64>, s: &DVector<f64>) -> Result<MetricTensorSolve> {
    check_len("base measure", triple.len(), mu.len())?;
    check_len("tangent vector", triple.len(), s.len())?;
    if mu.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain("metric tensor needs a strictly positive base measure".into()));
    }
    let scale = s.amax().max(1e-300);
    if s.sum().abs() > 1e-10 * scale * s.len() as f64 {
        return Err(Error::Domain("tangent vectors must sum to zero".into()));
    }
    let k = weighted_form(&lambda_weights_unchecked(triple, mu));
    let kp = laplacian_pinv(&k)?;
    let psi = &kp * s;
    let psi = psi.add_scalar(-psi[0]);
    let residual = (&k * &psi - s).amax();
    Ok(MetricTensorSolve { value: s.dot(&psi).max(0.0), potential: psi, residual })
}

/// Result of [`hj_max_violation`].
#[derive(Debug, Clone)]
pub struct Violation {
    /// `h(μ*) = ⟨φ̇,μ*⟩ + ½Γ(μ*,φ)` at the returned maximizer.
    pub value: f64,
    /// Certified upper bound on `max_μ h(μ)` from concavity.
    pub upper_bound: f64,
    pub argmax: DVector<f64>,
}

struct HjFunction<'a> {
    triple: &'a MarkovTriple,
    edges: &'a [(usize, usize)],
    phidot: &'a DVector<f64>,
    g2: Vec<f64>,
}

impl HjFunction<'_> {
    fn value(&self, mu: &DVector<f64>) -> f64 {
        let q = self.triple.rates();
        let mut h = self.phidot.dot(mu);
        for (e, &(x, y)) in self.edges.iter().enumerate() {
            h += 0.5 * self.g2[e] * lm(mu[x] * q[(x, y)], mu[y] * q[(y, x)]);
        }
        h
    }

    fn gradient(&self, mu: &DVector<f64>) -> DVector<f64> {
        let q = self.triple.rates();
        let mut g = self.phidot.clone();
        for (e, &(x, y)) in self.edges.iter().enumerate() {
            if self.g2[e] == 0.0 {
                continue;
            }
            let (d1, d2) = lm_partials(mu[x] * q[(x, y)], mu[y] * q[(y, x)]);
            g[x] += 0.5 * self.g2[e] * q[(x, y)] * d1;
            g[y] += 0.5 * self.g2[e] * q[(y, x)] * d2;
        }
        g
    }

    fn hessian(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let n = mu.len();
        let q = self.triple.rates();
        let mut h = DMatrix::zeros(n, n);
        for (e, &(x, y)) in self.edges.iter().enumerate() {
            if self.g2[e] == 0.0 {
                continue;
            }
            let (h11, h12, h22) = lm_hessian(mu[x] * q[(x, y)], mu[y] * q[(y, x)]);
            let c = 0.5 * self.g2[e];
            h[(x, x)] += c * q[(x, y)] * q[(x, y)] * h11;
            h[(y, y)] += c * q[(y, x)] * q[(y, x)] * h22;
            h[(x, y)] += c * q[(x, y)] * q[(y, x)] * h12;
            h[(y, x)] += c * q[(x, y)] * q[(y, x)] * h12;
        }
        h
    }

    /// Frank–Wolfe bound: for concave 1-homogeneous `h`,
    /// `max_simplex h ≤ h(μ) + max_x ∂_x h(μ) - ⟨∇h(μ), μ⟩ = max_x ∂_x h(μ)`.
    fn certificate(&self, mu: &DVector<f64>) -> f64 {
        let g = self.gradient(mu);
        let h = self.value(mu);
        h + g.max() - g.dot(mu)
    }
}

/// Maximize `⟨φ̇,μ⟩ + ½Γ(μ,φ)` over probability measures.
///
/// The objective is concave in `μ`; it is maximized by a log-barrier Newton
/// method on the simplex and certified by the Frank–Wolfe bound.
pub fn hj_max_violation(triple: &MarkovTriple, phidot: &DVector<f64>, phi: &DVector<f64>) -> Result<Violation> {
    check_len("φ̇", triple.len(), phidot.len())?;
    check_len("φ", triple.len(), phi.len())?;
    let edges = edge_list(triple);
    hj_max_with_edges(triple, &edges, phidot, phi)
}

fn hj_max_with_edges(triple: &MarkovTriple, edges: &[(usize, usize)], phidot: &DVector<f64>, phi: &DVector<f64>) -> Result<Violation> {
    let n = triple.len();
    let g2: Vec<f64> = edges.iter().map(|&(x, y)| (phi[y] - phi[x]).powi(2)).collect();
    let hf = HjFunction { triple, edges, phidot, g2 };
    // Best vertex: Γ vanishes on point masses.
    let (vx, vval) = phidot.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
    if n == 1 {
        let mu = DVector::from_element(1, 1.0);
        return Ok(Violation { value: vval, upper_bound: vval, argmax: mu });
    }
    let u = zero_sum_basis(n);
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    let scale = phidot.amax() + hf.g2.iter().cloned().fold(0.0, f64::max) * triple.max_rate() + 1e-300;
    let mut tau = 1e-1 * scale;
    let barrier = |mu: &DVector<f64>, tau: f64| hf.value(mu) + tau * mu.iter().map(|v| v.ln()).sum::<f64>();
    let mut best_mu = mu.clone();
    let mut best_cert = hf.certificate(&mu);
    for _outer in 0..40 {
        for _ in 0..60 {
            let g = hf.gradient(&mu) + DVector::from_fn(n, |x, _| tau / mu[x]);
            let h = hf.hessian(&mu) - DMatrix::from_diagonal(&DVector::from_fn(n, |x, _| tau / (mu[x] * mu[x])));
            let gy = u.transpose() * &g;
            let hy = -(u.transpose() * &h * &u);
            let hy = (&hy + hy.transpose()) * 0.5;
            let Some(ch) = hy.cholesky() else { break };
            let dy = ch.solve(&gy);
            let dec = gy.dot(&dy);
            if !(dec > 1e-28 * scale) {
                break;
            }
            let dmu = &u * dy;
            let mut alpha: f64 = 1.0;
            for x in 0..n {
                if dmu[x] < 0.0 {
                    alpha = alpha.min(0.99 * mu[x] / -dmu[x]);
                }
            }
            let b0 = barrier(&mu, tau);
            let mut moved = false;
            for _ in 0..50 {
                let trial = &mu + &dmu * alpha;
                if trial.iter().all(|&v| v > 0.0) && barrier(&trial, tau) >= b0 + 1e-4 * alpha * dec {
                    mu = trial;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved || 0.5 * dec < 1e-14 * scale {
                break;
            }
        }
        let cert = hf.certificate(&mu);
        if cert < best_cert {
            best_cert = cert;
            best_mu = mu.clone();
        }
        if tau * n as f64 <= 1e-13 * scale {
            break;
        }
        tau *= 0.1;
    }
    let mut value = hf.value(&best_mu);
    let mut argmax = best_mu;
    if vval > value {
        value = vval;
        argmax = DVector::from_fn(n, |x, _| if x == vx { 1.0 } else { 0.0 });
    }
    Ok(Violation { value, upper_bound: best_cert.max(value), argmax })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualOptions {
    /// Witness steps per primal grid step.
    pub refine: usize,
    /// Target maximal violation for the cutting-plane loop.
    pub tol: f64,
    pub max_rounds: usize,
    /// Relative duality gap of each barrier solve of the master problem.
    pub barrier_gap: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self { refine: 2, tol: 1e-8, max_rounds: 200, barrier_gap: 1e-9 }
    }
}

/// A piecewise linear Hamilton–Jacobi subsolution on `[0,1]`.
#[derive(Debug, Clone, Serialize)]
pub struct HjWitness {
    /// `φ^0, …, φ^N` on the uniform grid.
    pub phi: Vec<Vec<f64>>,
    /// `⟨φ^N, μ₁⟩ - ⟨φ^0, μ₀⟩` after the certification shift.
    pub objective: f64,
    /// Certified maximal violation before the shift.
    pub certified_violation: f64,
    pub rounds: usize,
    pub cuts: usize,
}

impl HjWitness {
    pub fn steps(&self) -> usize {
        self.phi.len() - 1
    }

    pub fn node(&self, j: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.phi[j])
    }

    /// Largest certified violation over all steps and both step endpoints,
    /// for the witness read on a time interval of length `horizon`.
    pub fn max_violation(&self, triple: &MarkovTriple, horizon: f64) -> Result<f64> {
        let nn = self.steps() as f64 / horizon;
        let edges = edge_list(triple);
        let mut worst = f64::NEG_INFINITY;
        for j in 1..=self.steps() {
            let phidot = (self.node(j) - self.node(j - 1)) * nn;
            for e in [j - 1, j] {
                let v = hj_max_with_edges(triple, &edges, &phidot, &self.node(e))?;
                worst = worst.max(v.upper_bound);
            }
        }
        Ok(worst)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DualSolution {
    /// `√(2 · objective)`, a lower bound on `𝒲(μ₀,μ₁)`.
    pub value: f64,
    pub witness: HjWitness,
}

struct Cut {
    step: usize,
    /// Node index whose `Γ` enters the cut (`step - 1` or `step`).
    node: usize,
    mu: DVector<f64>,
    form: DMatrix<f64>,
}

impl Cut {
    fn new(triple: &MarkovTriple, step: usize, node: usize, mu: DVector<f64>) -> Self {
        let form = weighted_form(&lambda_weights_unchecked(triple, &mu));
        Self { step, node, mu, form }
    }

    fn eval(&self, phi: &[DVector<f64>], nn: f64) -> f64 {
        let (a, b, p) = (&phi[self.step - 1], &phi[self.step], &phi[self.node]);
        let n = p.len();
        let mut lin = 0.0;
        let mut quad = 0.0;
        for x in 0..n {
            lin += self.mu[x] * (b[x] - a[x]);
            let mut row = 0.0;
            for y in 0..n {
                row += self.form[(x, y)] * p[y];
            }
            quad += p[x] * row;
        }
        nn * lin + 0.5 * quad
    }
}

struct Master<'a> {
    mu0: &'a DVector<f64>,
    mu1: &'a DVector<f64>,
    n: usize,
    steps: usize,
    radius2: f64,
    u: DMatrix<f64>,
}

impl Master<'_> {
    fn objective(&self, phi: &[DVector<f64>]) -> f64 {
        phi[self.steps].dot(self.mu1) - phi[0].dot(self.mu0)
    }

    fn barrier(&self, phi: &[DVector<f64>], cuts: &[Cut], t: f64) -> Option<f64> {
        let nn = self.steps as f64;
        let mut b = -t * self.objective(phi);
        for c in cuts {
            let s = -c.eval(phi, nn);
            if !(s > 0.0) {
                return None;
            }
            b -= s.ln();
        }
        for p in phi {
            let r = self.radius2 - p.norm_squared();
            if !(r > 0.0) {
                return None;
            }
            b -= r.ln();
        }
        Some(b)
    }

    /// Barrier Newton solve of the master problem from a strictly feasible
    /// start. Returns the final barrier parameter.
    fn solve(&self, phi: &mut Vec<DVector<f64>>, cuts: &[Cut], gap: f64, t0: f64) -> Result<f64> {
        let (n, nb) = (self.n, self.steps + 1);
        let nn = self.steps as f64;
        let m = (cuts.len() + nb) as f64;
        let mut t = t0;
        let mut backoffs = 0;
        loop {
            let mut prev_dec = f64::INFINITY;
            // Newton decrement at exit; the iterate counts as centered once
            // it is inside the Dikin ellipsoid.
            let mut last_dec = f64::INFINITY;
            for _ in 0..2000 {
                let mut grad = vec![DVector::zeros(n); nb];
                let mut diag = vec![DMatrix::zeros(n, n); nb];
                let mut upper = vec![DMatrix::zeros(n, n); nb - 1];
                grad[0] += self.mu0 * t;
                grad[nb - 1] -= self.mu1 * t;
                let mut g0 = DVector::zeros(n);
                let mut g1 = DVector::zeros(n);
                let mut fp = DVector::zeros(n);
                for c in cuts {
                    let s = -c.eval(phi, nn);
                    let (j0, j1) = (c.step - 1, c.step);
                    g0.copy_from(&c.mu);
                    g0 *= -nn;
                    g1.copy_from(&c.mu);
                    g1 *= nn;
                    c.form.mul_to(&phi[c.node], &mut fp);
                    if c.node == j0 {
                        g0 += &fp;
                    } else {
                        g1 += &fp;
                    }
                    grad[j0].axpy(1.0 / s, &g0, 1.0);
                    grad[j1].axpy(1.0 / s, &g1, 1.0);
                    let s2 = s * s;
                    diag[j0].ger(1.0 / s2, &g0, &g0, 1.0);
                    diag[j1].ger(1.0 / s2, &g1, &g1, 1.0);
                    upper[j0].ger(1.0 / s2, &g0, &g1, 1.0);
                    diag[c.node].zip_apply(&c.form, |d, f| *d += f / s);
                }
                for (j, p) in phi.iter().enumerate() {
                    let r = self.radius2 - p.norm_squared();
                    grad[j] += p * (2.0 / r);
                    diag[j] += DMatrix::identity(n, n) * (2.0 / r) + p * p.transpose() * (4.0 / (r * r));
                }
                // Fix the additive gauge through a zero-sum φ^0.
                let ut = self.u.transpose();
                grad[0] = &ut * &grad[0];
                diag[0] = &ut * &diag[0] * &self.u;
                upper[0] = &ut * &upper[0];
                let rhs: Vec<DVector<f64>> = grad.iter().map(|g| -g).collect();
                let dx = regularized_solve(&diag, &upper, &rhs)?;
                let dec: f64 = dx.iter().zip(&rhs).map(|(a, b)| a.dot(b)).sum();
                // The decrement stalls at round-off for large t.
                if !(dec > 0.0) || 0.5 * dec < 1e-10 || (dec < 1e-2 && dec > 0.25 * prev_dec) {
                    last_dec = 0.0;
                    break;
                }
                last_dec = dec;
                prev_dec = dec;
                let mut dphi = dx;
                dphi[0] = &self.u * &dphi[0];
                let b0 = self.barrier(phi, cuts, t).expect("strictly feasible iterate");
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..80 {
                    let trial: Vec<DVector<f64>> = phi.iter().zip(&dphi).map(|(p, d)| p + d * alpha).collect();
                    if let Some(bt) = self.barrier(&trial, cuts, t) {
                        // Near the center the decrease is below round-off in
                        // the barrier value; take the feasible step.
                        if bt <= b0 - 1e-4 * alpha * dec || dec < 1e-6 {
                            *phi = trial;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved || alpha < 1e-6 {
                    break;
                }
            }
            if last_dec > 1.0 {
                // Far from the central path for this t: damped steps are too
                // short to get back. Follow the path from a smaller t instead.
                backoffs += 1;
                if backoffs > 40 {
                    return Err(Error::Numerical("dual master problem: barrier method failed to center".into()));
                }
                t = (t / 64.0).max(1e-6);
                continue;
            }
            if m / t <= gap * (1.0 + self.objective(phi).abs()) {
                return Ok(t);
            }
            t *= 8.0;
        }
    }
}

/// Lower bound on `𝒲(μ₀,μ₁)` from a certified Hamilton–Jacobi subsolution on
/// a grid of `K · refine` steps.
pub fn dual_w2_lower(triple: &MarkovTriple, mu0: &DVector<f64>, mu1: &DVector<f64>, k: usize, opts: &DualOptions) -> Result<DualSolution> {
    check_pair(triple, mu0, mu1)?;
    if k == 0 || opts.refine == 0 {
        return Err(Error::Invalid("grid size and refinement must be positive".into()));
    }
    let n = triple.len();
    let steps = k * opts.refine;
    let nn = steps as f64;
    let edges = edge_list(triple);
    if (mu0 - mu1).amax() == 0.0 {
        let witness = HjWitness { phi: vec![vec![0.0; n]; steps + 1], objective: 0.0, certified_violation: 0.0, rounds: 0, cuts: 0 };
        return Ok(DualSolution { value: 0.0, witness });
    }
    let min_rate = edges.iter().map(|&(x, y)| triple.rate(x, y).min(triple.rate(y, x))).fold(f64::INFINITY, f64::min);
    let mut radius = 4.0 * (1.0 + 1.0 / min_rate.sqrt());
    let u = zero_sum_basis(n);

    // The maximizers of the constraint at the optimum lie on the geodesic,
    // so the primal path on the witness grid seeds the cuts.
    let seed: Vec<DVector<f64>> = match primal_w2(triple, mu0, mu1, steps, &PrimalOptions::default()) {
        Ok(p) => (0..=steps).map(|j| p.path.node(j)).collect(),
        Err(_) => (0..=steps).map(|j| mu0 * (1.0 - j as f64 / nn) + mu1 * (j as f64 / nn)).collect(),
    };
    let mut cuts: Vec<Cut> = Vec::new();
    for j in 1..=steps {
        let mid = (&seed[j - 1] + &seed[j]) * 0.5;
        for node in [j - 1, j] {
            for mu in [&seed[j - 1], &seed[j], &mid, triple.pi()] {
                cuts.push(Cut::new(triple, j, node, mu.clone()));
            }
        }
        for x in 0..n {
            cuts.push(Cut::new(triple, j, j, DVector::from_fn(n, |y, _| if y == x { 1.0 } else { 0.0 })));
        }
    }

    let start = |steps: usize| -> Vec<DVector<f64>> { (0..=steps).map(|j| DVector::from_element(n, -(j as f64) / steps as f64)).collect() };
    let mut phi = start(steps);
    let mut rounds = 0;
    let mut t_warm = 1.0;
    let mut last_worst = f64::INFINITY;
    loop {
        let master = Master { mu0, mu1, n, steps, radius2: radius * radius, u: u.clone() };
        // Early rounds only need the master as accurate as the current cuts.
        let gap = opts.barrier_gap.max(1e-3 * last_worst.min(1.0));
        let t_final = master.solve(&mut phi, &cuts, gap, t_warm)?;
        // The optimal value is concave in R² with slope Σ u_j, where u_j is
        // the multiplier of the j-th ball; quadrupling R gains at most
        // 15 R² Σ u_j.
        let r2 = radius * radius;
        let ball_slope: f64 = phi.iter().map(|p| 1.0 / (t_final * (r2 - p.norm_squared()))).sum();
        let obj = phi[steps].dot(mu1) - phi[0].dot(mu0);
        if gap <= opts.barrier_gap && 15.0 * r2 * ball_slope > opts.tol * (1.0 + obj.abs()) && radius < 1e8 {
            // The current iterate stays strictly feasible for the larger ball.
            radius *= 4.0;
            t_warm = (t_final * 1e-2).max(1.0);
            continue;
        }
        rounds += 1;
        // Oracle pass.
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut new_cuts = Vec::new();
        for j in 1..=steps {
            let phidot = (&phi[j] - &phi[j - 1]) * nn;
            for node in [j - 1, j] {
                let v = hj_max_with_edges(triple, &edges, &phidot, &phi[node])?;
                worst = worst.max(v.upper_bound);
                if v.value > 0.1 * opts.tol {
                    new_cuts.push(Cut::new(triple, j, node, v.argmax));
                }
            }
        }
        let accurate = gap <= opts.barrier_gap;
        last_worst = worst;
        if ((worst <= opts.tol || new_cuts.is_empty()) && accurate) || rounds >= opts.max_rounds {
            let shift = worst.max(0.0);
            for (j, p) in phi.iter_mut().enumerate() {
                *p -= DVector::from_element(n, shift * j as f64 / nn);
            }
            let objective = phi[steps].dot(mu1) - phi[0].dot(mu0);
            let witness = HjWitness {
                phi: phi.iter().map(|p| p.as_slice().to_vec()).collect(),
                objective,
                certified_violation: worst,
                rounds,
                cuts: cuts.len(),
            };
            return Ok(DualSolution { value: (2.0 * objective.max(0.0)).sqrt(), witness });
        }
        // Warm start: lower φ̇ uniformly so the new cuts hold strictly.
        let viol = new_cuts.iter().map(|c| c.eval(&phi, nn)).fold(0.0, f64::max);
        let drop = viol + 1e-6 * (1.0 + viol);
        let shifted: Vec<DVector<f64>> = phi.iter().enumerate().map(|(j, p)| p - DVector::from_element(n, drop * j as f64 / nn)).collect();
        cuts.extend(new_cuts);
        let master = Master { mu0, mu1, n, steps, radius2: radius * radius, u: u.clone() };
        if master.barrier(&shifted, &cuts, 1.0).is_some() {
            phi = shifted;
            // The shift costs about t · drop in the barrier; keep that O(m).
            let m = (cuts.len() + steps + 1) as f64;
            t_warm = (t_final * 1e-4).min(m / drop).max(1.0);
        } else {
            phi = start(steps);
            t_warm = 1.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> MarkovTriple {
        MarkovTriple::two_point(1.0).unwrap()
    }

    #[test]
    fn constant_path_has_zero_cost() {
        let t = two_point();
        let mu = DVector::from_vec(vec![0.3, 0.7]);
        let sol = primal_w2(&t, &mu, &mu, 8, &PrimalOptions::default()).unwrap();
        assert_eq!(sol.value, 0.0);
        let d = dual_w2_lower(&t, &mu, &mu, 8, &DualOptions::default()).unwrap();
        assert_eq!(d.value, 0.0);
    }

    #[test]
    fn single_step_matches_formula() {
        // Two-point, K = 1: value² = δ²/w with w = Λ(m_a, m_b) at the midpoint.
        let t = two_point();
        let (a, b) = (DVector::from_vec(vec![0.5, 0.5]), DVector::from_vec(vec![0.9, 0.1]));
        let sol = primal_w2(&t, &a, &b, 1, &PrimalOptions::default()).unwrap();
        let w = lm(0.7, 0.3);
        assert!((sol.value * sol.value - 0.16 / w).abs() < 1e-12);
        assert!((sol.path.action - 0.16 / w).abs() < 1e-12);
    }

    #[test]
    fn metric_tensor_inverts_k() {
        let t = MarkovTriple::new(
            vec!["a".into(), "b".into(), "c".into()],
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 1.0, 0.0, 0.5, 2.0, 0.5, 0.0]),
            DVector::from_element(3, 1.0 / 3.0),
        )
        .unwrap();
        let mu = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let psi = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let k = weighted_form(&lambda_weights_unchecked(&t, &mu));
        let s = &k * &psi;
        let g = metric_tensor(&t, &mu, &s).unwrap();
        let gamma = crate::chain::gamma(&t, &mu, &psi).unwrap();
        assert!((g.value - gamma).abs() < 1e-12);
        assert_eq!(metric_tensor(&t, &mu, &DVector::zeros(3)).unwrap().value, 0.0);
    }
}
