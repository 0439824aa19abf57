//! Static Markov-triple primitives.
//!
//! A triple `(X, Q, π)` is a finite state set with a reversible rate matrix
//! and its invariant probability measure. On top of it this module provides
//! the logarithmic mean, the Laplacian and its adjoint, and the integrated
//! carré du champ operators used by every verifier in the crate.
//!
//! | quantity | definition |
//! |---|---|
//! | `Λ(s,t)` | `(s - t) / (ln s - ln t)`, `Λ(s,s) = s`, `Λ(0,t) = 0` |
//! | `Λ(μ)(x,y)` | `Λ(μ(x) Q(x,y), μ(y) Q(y,x))` |
//! | `Δψ(x)` | `Σ_y Q(x,y) (ψ(y) - ψ(x))` |
//! | `Δ̂σ(x)` | `Σ_y Q(y,x) σ(y) - Q(x,y) σ(x)` |
//! | `Γ(μ,ψ)` | `½ Σ_{x,y} (∇ψ)² Λ(μ)` |
//! | `Γ₂(μ,ψ)` | `½⟨∇ψ, ∇ψ·Δ̂Λ(μ)⟩ - ⟨∇ψ, ∇Δψ·Λ(μ)⟩` |
//! | `∂ₜΓ(μ,ψ)` | `⟨∇ψ, ∇ψ·∂ₜΛ(μ)⟩` |
//!
//! Edge inner products are `⟨Φ,Ψ⟩ = ½ Σ_{x,y} Φ(x,y) Ψ(x,y)`.
//!
//! Every quadratic form in `ψ` is also available as a symmetric matrix
//! (`*_form`), which is how the curvature module assembles its
//! generalized eigenvalue problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Relative tolerance for detailed balance in [`MarkovTriple::new`].
pub const DETAILED_BALANCE_RTOL: f64 = 1e-9;

/// Absolute tolerance on `Σ π = 1`.
pub const PI_SUM_TOL: f64 = 1e-10;

// Below this |u| = |s-t|/(s+t) the shape function of Λ is evaluated by its
// Taylor series; the closed form cancels catastrophically near the diagonal.
const SERIES_U: f64 = 1e-2;

/// Shape function of the logarithmic mean: `Λ(s,t) = m f(u)` with
/// `m = (s+t)/2`, `u = (s-t)/(s+t)` and `f(u) = u / atanh(u)`.
///
/// Works from the pair rather than from `u`: for very unequal arguments `u`
/// rounds to within a few ulps of `±1`, so `1 ± u` and `atanh u` are taken
/// from `s` and `t` directly.
#[derive(Debug, Clone, Copy)]
struct Shape {
    /// `1 + u = 2s/(s+t)`.
    up: f64,
    /// `1 - u = 2t/(s+t)`.
    um: f64,
    f: f64,
    f1: f64,
    f2: f64,
}

/// Callers guarantee `s, t > 0`.
fn shape(s: f64, t: f64) -> Shape {
    let sum = s + t;
    let u = (s - t) / sum;
    let (up, um) = (2.0 * s / sum, 2.0 * t / sum);
    if u.abs() < SERIES_U {
        let u2 = u * u;
        let f = 1.0 - u2 * (1.0 / 3.0 + u2 * (4.0 / 45.0 + u2 * 44.0 / 945.0));
        let f1 = -u * (2.0 / 3.0 + u2 * (16.0 / 45.0 + u2 * 88.0 / 315.0));
        let f2 = -(2.0 / 3.0 + u2 * (16.0 / 15.0 + u2 * 88.0 / 63.0));
        return Shape { up, um, f, f1, f2 };
    }
    let a = 0.5 * (s / t).ln();
    let w = up * um;
    let f = u / a;
    let f1 = 1.0 / a - u / (w * a * a);
    let f2 = -1.0 / (w * a * a) - ((1.0 + u * u) * a - 2.0 * u) / (w * w * a * a * a);
    Shape { up, um, f, f1, f2 }
}

fn check_arg(s: f64, t: f64) -> Result<()> {
    if !(s >= 0.0 && t >= 0.0) || !s.is_finite() || !t.is_finite() {
        return Err(Error::Domain(format!(
            "logarithmic mean needs finite nonnegative arguments, got ({s}, {t})"
        )));
    }
    Ok(())
}

/// Logarithmic mean `Λ(s,t)` of two nonnegative reals.
pub fn log_mean(s: f64, t: f64) -> Result<f64> {
    check_arg(s, t)?;
    Ok(lm(s, t))
}

/// Unchecked logarithmic mean. Callers guarantee `s, t >= 0`.
#[inline]
pub(crate) fn lm(s: f64, t: f64) -> f64 {
    let sum = s + t;
    if sum <= 0.0 {
        return 0.0;
    }
    if s == 0.0 || t == 0.0 {
        return 0.0;
    }
    0.5 * sum * shape(s, t).f
}

/// Partial derivatives `(∂₁Λ, ∂₂Λ)` at a strictly positive pair.
pub fn log_mean_partials(s: f64, t: f64) -> Result<(f64, f64)> {
    check_arg(s, t)?;
    if s <= 0.0 || t <= 0.0 {
        return Err(Error::Domain(format!(
            "partials of the logarithmic mean need positive arguments, got ({s}, {t})"
        )));
    }
    Ok(lm_partials(s, t))
}

/// Unchecked partials; on the boundary returns the one-sided limits
/// `∂₁Λ(0,t) = ∞`, `∂₂Λ(0,t) = 0` (and symmetrically).
pub(crate) fn lm_partials(s: f64, t: f64) -> (f64, f64) {
    if s == 0.0 && t == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    if s == 0.0 {
        return (f64::INFINITY, 0.0);
    }
    if t == 0.0 {
        return (0.0, f64::INFINITY);
    }
    if ((s - t) / (s + t)).abs() >= 1.0 {
        return if s < t { (f64::INFINITY, 0.0) } else { (0.0, f64::INFINITY) };
    }
    let sh = shape(s, t);
    (0.5 * (sh.f + sh.f1 * sh.um), 0.5 * (sh.f - sh.f1 * sh.up))
}

/// `(s ∂₁Λ(s,t), t ∂₂Λ(s,t))`, continuous on the closed quadrant minus the
/// origin; both vanish when either argument is zero.
pub(crate) fn lm_euler_parts(s: f64, t: f64) -> (f64, f64) {
    if s == 0.0 || t == 0.0 {
        return (0.0, 0.0);
    }
    if ((s - t) / (s + t)).abs() >= 1.0 {
        // One argument underflows relative to the other: Λ ≈ 0 to working precision.
        return (0.0, 0.0);
    }
    let m = 0.5 * (s + t);
    let sh = shape(s, t);
    let w = sh.up * sh.um * sh.f1;
    (0.5 * m * (sh.up * sh.f + w), 0.5 * m * (sh.um * sh.f - w))
}

/// Mixed second derivative `∂₁∂₂Λ(s,t)` at a positive pair. By
/// 1-homogeneity `∂₁₁Λ = -(t/s) ∂₁₂Λ` and `∂₂₂Λ = -(s/t) ∂₁₂Λ`.
pub(crate) fn lm_cross(s: f64, t: f64) -> f64 {
    let m = 0.5 * (s + t);
    let sh = shape(s, t);
    -sh.f2 * sh.up * sh.um / (4.0 * m)
}

/// Hessian `[[∂₁₁, ∂₁₂], [∂₁₂, ∂₂₂]]` of Λ at a positive pair.
pub(crate) fn lm_hessian(s: f64, t: f64) -> (f64, f64, f64) {
    let h = lm_cross(s, t);
    (-(t / s) * h, h, -(s / t) * h)
}

/// A reversible, irreducible continuous-time Markov chain on a finite set.
///
/// Off-diagonal rates are nonnegative and the diagonal is set so that every
/// row sums to zero. `π` is strictly positive, sums to one and satisfies
/// detailed balance `Q(x,y) π(x) = Q(y,x) π(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTriple {
    labels: Vec<String>,
    rates: DMatrix<f64>,
    pi: DVector<f64>,
}

impl MarkovTriple {
    /// Build a triple from off-diagonal rates (the diagonal of `rates` is
    /// ignored and recomputed).
    pub fn new(labels: Vec<String>, rates: DMatrix<f64>, pi: DVector<f64>) -> Result<Self> {
        let triple = Self::assemble(labels, rates, pi)?;
        triple.check_detailed_balance()?;
        triple.check_irreducible()?;
        Ok(triple)
    }

    /// Like [`MarkovTriple::new`] but skips the detailed-balance and
    /// irreducibility checks. Used for boundary triples whose limits are
    /// validated separately and for constructed counterexamples.
    pub fn new_unchecked(labels: Vec<String>, rates: DMatrix<f64>, pi: DVector<f64>) -> Result<Self> {
        Self::assemble(labels, rates, pi)
    }

    fn assemble(labels: Vec<String>, mut rates: DMatrix<f64>, pi: DVector<f64>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Invalid("a Markov triple needs at least one state".into()));
        }
        if rates.nrows() != n || rates.ncols() != n {
            return Err(Error::Shape { what: "rate matrix", expected: n, got: rates.nrows().max(rates.ncols()) });
        }
        check_len("invariant measure", n, pi.len())?;
        for x in 0..n {
            let mut row = 0.0;
            for y in 0..n {
                if x == y {
                    continue;
                }
                let q = rates[(x, y)];
                if !(q >= 0.0) || !q.is_finite() {
                    return Err(Error::Invalid(format!("rate Q({},{}) = {q} is not finite and nonnegative", labels[x], labels[y])));
                }
                row += q;
            }
            rates[(x, x)] = -row;
        }
        for (x, &p) in pi.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::Invalid(format!("π({}) = {p} must be strictly positive", labels[x])));
            }
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > PI_SUM_TOL {
            return Err(Error::Invalid(format!("π sums to {total}, not 1")));
        }
        Ok(Self { labels, rates, pi })
    }

    fn check_detailed_balance(&self) -> Result<()> {
        let n = self.len();
        for x in 0..n {
            for y in (x + 1)..n {
                let a = self.rates[(x, y)] * self.pi[x];
                let b = self.rates[(y, x)] * self.pi[y];
                if (a - b).abs() > DETAILED_BALANCE_RTOL * a.max(b) || ((a == 0.0) != (b == 0.0)) {
                    return Err(Error::Invalid(format!(
                        "detailed balance fails on ({},{}): {a} vs {b}",
                        self.labels[x], self.labels[y]
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_irreducible(&self) -> Result<()> {
        if !self.is_irreducible() {
            return Err(Error::Invalid("rate graph is not connected".into()));
        }
        Ok(())
    }

    /// Whether the graph of positive off-diagonal rates is connected.
    pub fn is_irreducible(&self) -> bool {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..n {
                if !seen[y] && x != y && (self.rates[(x, y)] > 0.0 || self.rates[(y, x)] > 0.0) {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Largest relative detailed-balance defect over all pairs.
    pub fn detailed_balance_defect(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for x in 0..n {
            for y in (x + 1)..n {
                let a = self.rates[(x, y)] * self.pi[x];
                let b = self.rates[(y, x)] * self.pi[y];
                let scale = a.max(b);
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
        worst
    }

    /// Two states `a`, `b` with `Q(a,b) = Q(b,a) = p` and uniform `π`.
    pub fn two_point(p: f64) -> Result<Self> {
        let rates = DMatrix::from_row_slice(2, 2, &[0.0, p, p, 0.0]);
        Self::new(vec!["a".into(), "b".into()], rates, DVector::from_element(2, 0.5))
    }

    /// The one-point triple.
    pub fn point(label: &str) -> Self {
        Self {
            labels: vec![label.to_string()],
            rates: DMatrix::zeros(1, 1),
            pi: DVector::from_element(1, 1.0),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Full generator matrix, diagonal included.
    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn pi(&self) -> &DVector<f64> {
        &self.pi
    }

    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.rates[(x, y)]
    }

    /// Undirected edges `(x, y)`, `x < y`, carrying a positive rate.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        let mut out = Vec::new();
        for x in 0..n {
            for y in (x + 1)..n {
                if self.rates[(x, y)] > 0.0 || self.rates[(y, x)] > 0.0 {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Largest jump rate `max_x |Q(x,x)|`.
    pub fn max_rate(&self) -> f64 {
        (0..self.len()).map(|x| -self.rates[(x, x)]).fold(0.0, f64::max)
    }

    /// The same chain with every rate multiplied by `lambda > 0`.
    pub fn scaled(&self, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("rate scale must be positive, got {lambda}")));
        }
        Ok(Self { labels: self.labels.clone(), rates: &self.rates * lambda, pi: self.pi.clone() })
    }

    /// Relabel states by a permutation: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_len("permutation", self.len(), perm.len())?;
        let n = self.len();
        let rates = DMatrix::from_fn(n, n, |i, j| self.rates[(perm[i], perm[j])]);
        let pi = DVector::from_fn(n, |i, _| self.pi[perm[i]]);
        let labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        Ok(Self { labels, rates, pi })
    }

    /// Index of a state label.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Product chain: independent jumps in each factor, product measure.
    /// State `(i, j)` has index `i * other.len() + j` and label `"xi.yj"`.
    pub fn product(&self, other: &MarkovTriple) -> MarkovTriple {
        let (n1, n2) = (self.len(), other.len());
        let n = n1 * n2;
        let mut rates = DMatrix::zeros(n, n);
        for x1 in 0..n1 {
            for x2 in 0..n2 {
                let i = x1 * n2 + x2;
                for y1 in 0..n1 {
                    if y1 != x1 {
                        rates[(i, y1 * n2 + x2)] = self.rates[(x1, y1)];
                    }
                }
                for y2 in 0..n2 {
                    if y2 != x2 {
                        rates[(i, x1 * n2 + y2)] = other.rates[(x2, y2)];
                    }
                }
            }
        }
        let pi = DVector::from_fn(n, |i, _| self.pi[i / n2] * other.pi[i % n2]);
        let labels = (0..n).map(|i| product_label(&self.labels[i / n2], &other.labels[i % n2])).collect();
        MarkovTriple::assemble(labels, rates, pi).expect("product of valid triples is valid")
    }
}

/// Label of a product state.
pub fn product_label(a: &str, b: &str) -> String {
    format!("{a}.{b}")
}

/// How [`gamma2`] treats measures with zero entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundaryPolicy {
    /// Zero entries are a domain error.
    Reject,
    /// Replace `μ` by `(1-ε) μ + ε π`.
    Mix(f64),
}

/// `(1-ε) μ + ε π`.
pub fn mix_with_pi(triple: &MarkovTriple, mu: &DVector<f64>, eps: f64) -> DVector<f64> {
    mu * (1.0 - eps) + triple.pi() * eps
}

fn check_measure(triple: &MarkovTriple, mu: &DVector<f64>) -> Result<()> {
    check_len("measure", triple.len(), mu.len())?;
    if mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::Domain("measure entries must be finite and nonnegative".into()));
    }
    Ok(())
}

/// Discrete gradient `∇ψ(x,y) = ψ(y) - ψ(x)`.
pub fn gradient(psi: &DVector<f64>) -> DMatrix<f64> {
    let n = psi.len();
    DMatrix::from_fn(n, n, |x, y| psi[y] - psi[x])
}

/// Divergence `∇·V(x) = ½ Σ_y (V(x,y) - V(y,x))`.
pub fn divergence(v: &DMatrix<f64>) -> DVector<f64> {
    let n = v.nrows();
    DVector::from_fn(n, |x, _| 0.5 * (0..n).map(|y| v[(x, y)] - v[(y, x)]).sum::<f64>())
}

/// `⟨ψ, φ⟩_π = Σ ψ φ π`.
pub fn ip_pi(triple: &MarkovTriple, psi: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    psi.iter().zip(phi.iter()).zip(triple.pi().iter()).map(|((a, b), p)| a * b * p).sum()
}

/// `⟨Φ, Ψ⟩ = ½ Σ_{x,y} Φ Ψ` on edge fields.
pub fn ip_edge(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    0.5 * a.component_mul(b).sum()
}

/// `⟨Ψ, Φ⟩_π = ½ Σ Ψ Φ Q π` on edge fields.
pub fn ip_edge_pi(triple: &MarkovTriple, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = triple.len();
    let mut s = 0.0;
    for x in 0..n {
        for y in 0..n {
            if x != y {
                s += a[(x, y)] * b[(x, y)] * triple.rate(x, y) * triple.pi()[x];
            }
        }
    }
    0.5 * s
}

/// Edge weights `Λ(μ)(x,y) = Λ(μ(x) Q(x,y), μ(y) Q(y,x))`; zero diagonal.
pub fn lambda_weights(triple: &MarkovTriple, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_measure(triple, mu)?;
    Ok(lambda_weights_unchecked(triple, mu))
}

pub(crate) fn lambda_weights_unchecked(triple: &MarkovTriple, mu: &DVector<f64>) -> DMatrix<f64> {
    let n = triple.len();
    let q = triple.rates();
    let mut w = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in (x + 1)..n {
            let v = lm(mu[x] * q[(x, y)], mu[y] * q[(y, x)]);
            w[(x, y)] = v;
            w[(y, x)] = v;
        }
    }
    w
}

/// `Δψ`.
pub fn laplacian(triple: &MarkovTriple, psi: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("vertex function", triple.len(), psi.len())?;
    Ok(triple.rates() * psi)
}

/// `Δ̂σ`, the adjoint of `Δ` with respect to the plain pairing.
pub fn adjoint_laplacian(triple: &MarkovTriple, sigma: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("measure", triple.len(), sigma.len())?;
    Ok(triple.rates().tr_mul(sigma))
}

/// Matrix `M_w` with `ψᵀ M_w ψ = ½ Σ_{x,y} w(x,y) (ψ(y) - ψ(x))²` for a
/// symmetric weight table `w`.
pub fn weighted_form(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let mut d = 0.0;
        for y in 0..n {
            if x != y {
                m[(x, y)] = -w[(x, y)];
                d += w[(x, y)];
            }
        }
        m[(x, x)] = d;
    }
    m
}

/// `Γ(μ,ψ) = ½ Σ (∇ψ)² Λ(μ)`.
pub fn gamma(triple: &MarkovTriple, mu: &DVector<f64>, psi: &DVector<f64>) -> Result<f64> {
    check_len("vertex function", triple.len(), psi.len())?;
    let w = lambda_weights(triple, mu)?;
    let g = gradient(psi);
    Ok(ip_edge(&g.component_mul(&g), &w))
}

/// Matrix of `ψ ↦ Γ(μ,ψ)`.
pub fn gamma_form(triple: &MarkovTriple, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(weighted_form(&lambda_weights(triple, mu)?))
}

fn interior_measure(triple: &MarkovTriple, mu: &DVector<f64>, policy: BoundaryPolicy) -> Result<DVector<f64>> {
    check_measure(triple, mu)?;
    if mu.iter().all(|&m| m > 0.0) {
        return Ok(mu.clone());
    }
    match policy {
        BoundaryPolicy::Reject => Err(Error::Domain(
            "Γ₂ needs a strictly positive measure; pass BoundaryPolicy::Mix to extend".into(),
        )),
        BoundaryPolicy::Mix(eps) if eps > 0.0 && eps <= 1.0 => Ok(mix_with_pi(triple, mu, eps)),
        BoundaryPolicy::Mix(eps) => Err(Error::Domain(format!("mixing weight {eps} outside (0,1]"))),
    }
}

/// Edge table `Δ̂Λ(μ)(x,y) = [∂₁Λ(ρx,ρy) Δρ(x) + ∂₂Λ(ρx,ρy) Δρ(y)] Q(x,y) π(x)`
/// with `ρ = μ/π`; requires `μ > 0`.
fn hat_delta_lambda(triple: &MarkovTriple, mu: &DVector<f64>) -> DMatrix<f64> {
    let n = triple.len();
    let q = triple.rates();
    let pi = triple.pi();
    let rho = mu.component_div(pi);
    let drho = q * &rho;
    let mut out = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in 0..n {
            if x == y || q[(x, y)] == 0.0 {
                continue;
            }
            let (d1, d2) = lm_partials(rho[x], rho[y]);
            out[(x, y)] = (d1 * drho[x] + d2 * drho[y]) * q[(x, y)] * pi[x];
        }
    }
    out
}

/// `Γ₂(μ,ψ)` evaluated edge by edge.
pub fn gamma2(triple: &MarkovTriple, mu: &DVector<f64>, psi: &DVector<f64>, policy: BoundaryPolicy) -> Result<f64> {
    check_len("vertex function", triple.len(), psi.len())?;
    let mu = interior_measure(triple, mu, policy)?;
    let w = lambda_weights_unchecked(triple, &mu);
    let hat = hat_delta_lambda(triple, &mu);
    let g = gradient(psi);
    let lap = triple.rates() * psi;
    let glap = gradient(&lap);
    let first = 0.5 * ip_edge(&g.component_mul(&g), &hat);
    let second = ip_edge(&g.component_mul(&glap), &w);
    Ok(first - second)
}

/// Symmetric matrix of `ψ ↦ Γ₂(μ,ψ)`:
/// `½ M_{Δ̂Λ} - ½ (M_Λ L + Lᵀ M_Λ)` with `L` the generator.
pub fn gamma2_form(triple: &MarkovTriple, mu: &DVector<f64>, policy: BoundaryPolicy) -> Result<DMatrix<f64>> {
    let mu = interior_measure(triple, mu, policy)?;
    let m_lambda = weighted_form(&lambda_weights_unchecked(triple, &mu));
    let m_hat = weighted_form(&hat_delta_lambda(triple, &mu));
    let l = triple.rates();
    let cross = &m_lambda * l;
    Ok(m_hat * 0.5 - (&cross + cross.transpose()) * 0.5)
}

/// Edge table `∂ₜΛ(μ)(x,y)`. Boundary entries use the continuous limits
/// `s ∂₁Λ(s,t) → 0` as `s → 0`.
fn dt_lambda(triple: &MarkovTriple, qdot: &DMatrix<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    let n = triple.len();
    if qdot.nrows() != n || qdot.ncols() != n {
        return Err(Error::Shape { what: "rate derivative", expected: n, got: qdot.nrows() });
    }
    let q = triple.rates();
    let mut out = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in (x + 1)..n {
            let (qxy, qyx) = (q[(x, y)], q[(y, x)]);
            if qxy == 0.0 && qyx == 0.0 {
                if qdot[(x, y)] != 0.0 || qdot[(y, x)] != 0.0 {
                    return Err(Error::Contract(format!("rate derivative nonzero on dead edge ({x},{y})")));
                }
                continue;
            }
            let (a, b) = (mu[x] * qxy, mu[y] * qyx);
            let (ea, eb) = lm_euler_parts(a, b);
            // s ∂₁Λ · (Q̇/Q) is the chain-rule term ∂₁Λ · μ(x) Q̇(x,y).
            let v = ea * qdot[(x, y)] / qxy + eb * qdot[(y, x)] / qyx;
            out[(x, y)] = v;
            out[(y, x)] = v;
        }
    }
    Ok(out)
}

/// `∂ₜΓ(μ,ψ)` for rates `Q` with analytic derivative `Q̇`.
pub fn dt_gamma(triple: &MarkovTriple, qdot: &DMatrix<f64>, mu: &DVector<f64>, psi: &DVector<f64>) -> Result<f64> {
    check_measure(triple, mu)?;
    check_len("vertex function", triple.len(), psi.len())?;
    let d = dt_lambda(triple, qdot, mu)?;
    let g = gradient(psi);
    Ok(ip_edge(&g.component_mul(&g), &d))
}

/// Matrix of `ψ ↦ ∂ₜΓ(μ,ψ)`.
pub fn dt_gamma_form(triple: &MarkovTriple, qdot: &DMatrix<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_measure(triple, mu)?;
    Ok(weighted_form(&dt_lambda(triple, qdot, mu)?))
}

/// Relative entropy `H(μ) = Σ μ log(μ/π)` with `0 log 0 = 0`.
pub fn entropy(triple: &MarkovTriple, mu: &DVector<f64>) -> f64 {
    mu.iter()
        .zip(triple.pi().iter())
        .map(|(&m, &p)| if m > 0.0 { m * (m / p).ln() } else { 0.0 })
        .sum()
}

/// Whether `mu` is a probability measure up to `tol` in total mass.
pub fn is_probability(mu: &DVector<f64>, tol: f64) -> bool {
    mu.iter().all(|&m| m >= 0.0 && m.is_finite()) && (mu.sum() - 1.0).abs() <= tol
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_partials(s: f64, t: f64) -> (f64, f64) {
        let h = 1e-5;
        let d1 = (lm(s + h, t) - lm(s - h, t)) / (2.0 * h);
        let d2 = (lm(s, t + h) - lm(s, t - h)) / (2.0 * h);
        (d1, d2)
    }

    #[test]
    fn log_mean_examples() {
        assert_eq!(log_mean(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(log_mean(3.0, 0.0).unwrap(), 0.0);
        let e2 = 2f64.exp();
        assert!((log_mean(1.0, e2).unwrap() - (e2 - 1.0) / 2.0).abs() < 1e-14);
        assert!(log_mean(-1.0, 1.0).is_err());
    }

    #[test]
    fn log_mean_series_matches_closed_form_across_switch() {
        for &u in &[0.009_999f64, 0.010_001, 0.005, 0.02] {
            let (s, t) = (1.0 + u, 1.0 - u);
            let closed = (s - t) / (s.ln() - t.ln());
            assert!((lm(s, t) - closed).abs() < 1e-14, "u={u}");
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let (d1, d2) = log_mean_partials(2.0, 5.0).unwrap();
        let (f1, f2) = fd_partials(2.0, 5.0);
        assert!((d1 - f1).abs() < 1e-7 && (d2 - f2).abs() < 1e-7);
        let (a, b) = log_mean_partials(1.3, 1.3).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
        let (a, b) = log_mean_partials(1.0, 4.0).unwrap();
        assert!((a + 4.0 * b - lm(1.0, 4.0)).abs() < 1e-14);
        assert!(log_mean_partials(0.0, 1.0).is_err());
    }

    #[test]
    fn boundary_partials_are_the_one_sided_limits() {
        let (d1, d2) = lm_partials(0.0, 2.0);
        assert!(d1.is_infinite() && d2 == 0.0);
        let (d1, _) = lm_partials(1e-12, 2.0);
        assert!(d1 > 10.0);
        let (ea, eb) = lm_euler_parts(0.0, 2.0);
        assert_eq!((ea, eb), (0.0, 0.0));
        let (ea, eb) = lm_euler_parts(1e-12, 2.0);
        assert!(ea < 0.1 * eb && (ea + eb - lm(1e-12, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_derivative_matches_finite_differences() {
        for &(s, t) in &[(2.0f64, 5.0f64), (1.0, 1.0), (0.3, 0.30001), (1e-3, 4.0)] {
            let h = 1e-5 * t;
            let fd = (lm_partials(s, t + h).0 - lm_partials(s, t - h).0) / (2.0 * h);
            let an = lm_cross(s, t);
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "({s},{t}): {fd} vs {an}");
        }
    }

    #[test]
    fn two_point_examples() {
        let tp = MarkovTriple::two_point(1.0).unwrap();
        let half = DVector::from_vec(vec![0.5, 0.5]);
        let w = lambda_weights(&tp, &half).unwrap();
        assert!((w[(0, 1)] - 0.5).abs() < 1e-15 && (w[(1, 0)] - 0.5).abs() < 1e-15);
        let psi = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(laplacian(&tp, &psi).unwrap(), DVector::from_vec(vec![1.0, -1.0]));
        let sigma = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(adjoint_laplacian(&tp, &sigma).unwrap(), DVector::from_vec(vec![-1.0, 1.0]));
        assert!((gamma(&tp, &half, &psi).unwrap() - 0.5).abs() < 1e-15);
        let dirac = DVector::from_vec(vec![1.0, 0.0]);
        assert!((entropy(&tp, &dirac) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&tp, &half), 0.0);
    }

    #[test]
    fn constructor_rejects_bad_triples() {
        let bad_db = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        let pi = DVector::from_vec(vec![0.5, 0.5]);
        assert!(MarkovTriple::new(vec!["a".into(), "b".into()], bad_db, pi.clone()).is_err());
        let disconnected = DMatrix::zeros(2, 2);
        assert!(MarkovTriple::new(vec!["a".into(), "b".into()], disconnected, pi).is_err());
    }

    #[test]
    fn gamma2_rejects_boundary_without_policy() {
        let tp = MarkovTriple::two_point(1.0).unwrap();
        let dirac = DVector::from_vec(vec![1.0, 0.0]);
        let psi = DVector::from_vec(vec![0.0, 1.0]);
        assert!(gamma2(&tp, &dirac, &psi, BoundaryPolicy::Reject).is_err());
        assert!(gamma2(&tp, &dirac, &psi, BoundaryPolicy::Mix(1e-6)).unwrap().is_finite());
    }
}
