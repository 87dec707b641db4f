//! Bound-constrained limited-memory BFGS.
//!
//! Bounds are handled by gradient projection: variables sitting on a bound
//! with the gradient pushing outward are frozen for the step, the quasi-Newton
//! direction is computed on the remaining free variables, and trial points
//! along the search direction are clamped back into the box. The line search
//! enforces the strong Wolfe conditions along the projected path.
//!
//! The objective may return `+inf` (or NaN) at trial points it cannot
//! evaluate; the line search treats those as overshoots and backtracks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{OdinError, Result};

/// Elementwise box `lower <= x <= upper`. Entries may be infinite.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(OdinError::Input(format!(
                "bound lengths differ: {} vs {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(OdinError::Input(format!(
                    "invalid bound at index {i}: [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((xi, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *xi = xi.clamp(*l, *u);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((xi, l), u)| *xi >= *l && *xi <= *u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Number of stored curvature pairs.
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop when `||projected gradient||_inf <= grad_tol * (1 + |f|)`.
    pub grad_tol: f64,
    /// Stop when `||Δx||_inf <= step_tol * max(1, ||x||_inf)`.
    pub step_tol: f64,
    /// Stop when the relative decrease `(f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)`
    /// falls below this value. Zero disables the test.
    pub f_tol: f64,
    pub max_iterations: usize,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-6,
            step_tol: 1e-10,
            f_tol: 0.0,
            max_iterations: 2000,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    FunctionTolerance,
    MaxIterations,
    LineSearchFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    /// Infinity norm of the projected gradient at `x`.
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

/// A differentiable objective: returns the value and writes the gradient.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> Objective for F
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

/// Minimize with separate value and gradient callbacks.
pub fn minimize_split<V, G>(
    mut value: V,
    mut gradient: G,
    x0: &[f64],
    bounds: &Bounds,
    settings: &OptimizerSettings,
) -> Result<OptimizerReport>
where
    V: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let mut combined = |x: &[f64], g: &mut [f64]| {
        let f = value(x);
        if f.is_finite() {
            g.copy_from_slice(&gradient(x));
        }
        f
    };
    minimize(&mut combined, x0, bounds, settings)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

#[derive(Clone)]
struct Trial {
    alpha: f64,
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
    /// Directional derivative along the projected path.
    slope: f64,
}

struct Search<'a, O: Objective> {
    obj: &'a mut O,
    bounds: &'a Bounds,
    settings: &'a OptimizerSettings,
    x: &'a [f64],
    f: f64,
    g: &'a [f64],
    d: &'a [f64],
    slope0: f64,
    evaluations: usize,
}

impl<O: Objective> Search<'_, O> {
    fn trial(&mut self, alpha: f64) -> Trial {
        let n = self.x.len();
        let mut x = vec![0.0; n];
        let mut slope = 0.0;
        let mut moving = vec![false; n];
        for i in 0..n {
            let raw = self.x[i] + alpha * self.d[i];
            let (l, u) = (self.bounds.lower[i], self.bounds.upper[i]);
            x[i] = raw.clamp(l, u);
            moving[i] = self.d[i] != 0.0 && raw > l && raw < u;
        }
        let mut g = vec![0.0; n];
        self.evaluations += 1;
        let mut f = self.obj.evaluate(&x, &mut g);
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            f = f64::INFINITY;
        } else {
            for i in 0..n {
                if moving[i] {
                    slope += g[i] * self.d[i];
                }
            }
        }
        Trial {
            alpha,
            x,
            f,
            g,
            slope,
        }
    }

    fn armijo(&self, t: &Trial) -> bool {
        let decrease: f64 = self
            .g
            .iter()
            .zip(t.x.iter().zip(self.x))
            .map(|(gi, (xn, xo))| gi * (xn - xo))
            .sum();
        t.f.is_finite() && t.f <= self.f + self.settings.c1 * decrease
    }

    fn curvature(&self, t: &Trial) -> bool {
        t.slope.abs() <= -self.settings.c2 * self.slope0
    }

    /// Returns an accepted trial, or `None` if no decrease was found.
    fn run(&mut self, alpha0: f64) -> Option<Trial> {
        let origin = Trial {
            alpha: 0.0,
            x: self.x.to_vec(),
            f: self.f,
            g: self.g.to_vec(),
            slope: self.slope0,
        };
        let mut prev = origin;
        let mut alpha = alpha0;
        let budget = self.settings.max_line_search;
        let mut first = true;
        while self.evaluations < budget {
            let t = self.trial(alpha);
            if !self.armijo(&t) || (!first && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature(&t) {
                return Some(t);
            }
            if t.slope >= 0.0 {
                return self.zoom(t, prev);
            }
            first = false;
            prev = t;
            alpha *= 4.0;
        }
        (prev.alpha > 0.0).then_some(prev)
    }

    /// `lo` satisfies sufficient decrease and has the lowest value seen;
    /// `hi` brackets a point satisfying the strong Wolfe conditions.
    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Option<Trial> {
        while self.evaluations < self.settings.max_line_search {
            let (a, b) = (lo.alpha, hi.alpha);
            let width = b - a;
            if width.abs() <= 1e-16 * a.abs().max(b.abs()).max(1e-300) {
                break;
            }
            let mut alpha = if hi.f.is_finite() {
                // Quadratic through f(lo), f'(lo), f(hi).
                let denom = 2.0 * (hi.f - lo.f - lo.slope * width);
                if denom > 0.0 {
                    a - lo.slope * width * width / denom
                } else {
                    a + 0.5 * width
                }
            } else {
                a + 0.2 * width
            };
            let (left, right) = if a < b { (a, b) } else { (b, a) };
            let margin = 0.1 * (right - left);
            if !alpha.is_finite() {
                alpha = a + 0.5 * width;
            }
            alpha = alpha.clamp(left + margin, right - margin);

            let t = self.trial(alpha);
            if !self.armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature(&t) {
                    return Some(t);
                }
                if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
        (lo.alpha > 0.0 && lo.f < self.f).then_some(lo)
    }
}

/// Free-variable mask: a variable is frozen when it sits on a bound and the
/// gradient points out of the box.
fn free_mask(x: &[f64], g: &[f64], bounds: &Bounds) -> Vec<bool> {
    (0..x.len())
        .map(|i| {
            let at_lower = x[i] <= bounds.lower[i] && g[i] > 0.0;
            let at_upper = x[i] >= bounds.upper[i] && g[i] < 0.0;
            !(at_lower || at_upper)
        })
        .collect()
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    (0..x.len())
        .map(|i| {
            let target = (x[i] - g[i]).clamp(bounds.lower[i], bounds.upper[i]);
            (target - x[i]).abs()
        })
        .fold(0.0, f64::max)
}

fn two_loop(g: &[f64], free: &[bool], memory: &VecDeque<Pair>) -> Vec<f64> {
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(v, f)| if *f { *v } else { 0.0 })
        .collect();
    let mut alphas = Vec::with_capacity(memory.len());
    for p in memory.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        for (qi, yi) in q.iter_mut().zip(&p.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = memory.back() {
        let scale = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= scale);
    }
    for (p, a) in memory.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        for (qi, si) in q.iter_mut().zip(&p.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter()
        .zip(free)
        .map(|(v, f)| if *f { -v } else { 0.0 })
        .collect()
}

/// Minimize `obj` over the box `bounds` starting from `x0` (projected into the box).
pub fn minimize<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    bounds: &Bounds,
    settings: &OptimizerSettings,
) -> Result<OptimizerReport> {
    let n = x0.len();
    if bounds.dim() != n {
        return Err(OdinError::Input(format!(
            "start point has {n} entries but bounds have {}",
            bounds.dim()
        )));
    }
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = obj.evaluate(&x, &mut g);
    let mut evaluations = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OdinError::Input(format!(
            "objective is not finite at the starting point (f = {f})"
        )));
    }
    let initial_value = f;
    let mut memory: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);
    let mut iterations = 0;

    let report = |x: Vec<f64>, f: f64, g: &[f64], it: usize, ev: usize, term: Termination| {
        let grad_norm = projected_gradient_norm(&x, g, bounds);
        OptimizerReport {
            x,
            value: f,
            initial_value,
            grad_norm,
            iterations: it,
            evaluations: ev,
            termination: term,
        }
    };

    loop {
        if projected_gradient_norm(&x, &g, bounds) <= settings.grad_tol * (1.0 + f.abs()) {
            return Ok(report(x, f, &g, iterations, evaluations, Termination::GradientTolerance));
        }
        if iterations >= settings.max_iterations {
            return Ok(report(x, f, &g, iterations, evaluations, Termination::MaxIterations));
        }

        let free = free_mask(&x, &g, bounds);
        let mut d = two_loop(&g, &free, &memory);
        let mut slope0 = dot(&g, &d);
        if !(slope0 < 0.0) || d.iter().any(|v| !v.is_finite()) {
            memory.clear();
            d = two_loop(&g, &free, &memory);
            slope0 = dot(&g, &d);
        }
        if !(slope0 < 0.0) {
            // Every free direction is flat.
            return Ok(report(x, f, &g, iterations, evaluations, Termination::GradientTolerance));
        }

        let accepted = loop {
            let alpha0 = if memory.is_empty() {
                (1.0 / norm_inf(&d)).min(1.0)
            } else {
                1.0
            };
            let mut search = Search {
                obj: &mut *obj,
                bounds,
                settings,
                x: &x,
                f,
                g: &g,
                d: &d,
                slope0,
                evaluations: 0,
            };
            let outcome = search.run(alpha0);
            evaluations += search.evaluations;
            match outcome {
                Some(t) => break Some(t),
                None if !memory.is_empty() => {
                    memory.clear();
                    d = two_loop(&g, &free, &memory);
                    slope0 = dot(&g, &d);
                }
                None => break None,
            }
        };
        let Some(t) = accepted else {
            return Ok(report(x, f, &g, iterations, evaluations, Termination::LineSearchFailure));
        };
        iterations += 1;

        let s: Vec<f64> = t.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let step_small = norm_inf(&s) <= settings.step_tol * norm_inf(&x).max(1.0);
        let f_small = settings.f_tol > 0.0
            && (f - t.f) <= settings.f_tol * f.abs().max(t.f.abs()).max(1.0);
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if memory.len() == settings.memory {
                memory.pop_front();
            }
            memory.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = t.x;
        f = t.f;
        g = t.g;
        if step_small {
            return Ok(report(x, f, &g, iterations, evaluations, Termination::StepTolerance));
        }
        if f_small {
            return Ok(report(x, f, &g, iterations, evaluations, Termination::FunctionTolerance));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: Vec<f64>) -> impl FnMut(&[f64], &mut [f64]) -> f64 {
        move |x: &[f64], g: &mut [f64]| {
            let mut f = 0.0;
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - c[i]);
                f += (x[i] - c[i]).powi(2);
            }
            f
        }
    }

    #[test]
    fn quadratic_converges_fast() {
        let c = vec![1.0, -2.0, 3.5, 0.25];
        let mut obj = quadratic(c.clone());
        let settings = OptimizerSettings {
            grad_tol: 1e-10,
            ..Default::default()
        };
        let r = minimize(&mut obj, &[10.0, 10.0, -7.0, 0.0], &Bounds::unbounded(4), &settings).unwrap();
        assert!(r.iterations <= 10, "{r:?}");
        let mut g = vec![0.0; 4];
        quadratic(c.clone())(&r.x, &mut g);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-8);
    }

    #[test]
    fn lower_bound_is_hit_exactly() {
        let mut obj = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * x[0];
            x[0] * x[0]
        };
        let b = Bounds::new(vec![1.0], vec![2.0]).unwrap();
        let r = minimize(&mut obj, &[1.5], &b, &OptimizerSettings::default()).unwrap();
        assert_eq!(r.x[0], 1.0);
    }

    #[test]
    fn start_outside_box_is_projected() {
        let mut obj = quadratic(vec![0.0, 0.0]);
        let b = Bounds::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let r = minimize(&mut obj, &[5.0, -5.0], &b, &OptimizerSettings::default()).unwrap();
        assert!(r.x.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn non_finite_start_is_an_input_error() {
        let mut obj = |_: &[f64], _: &mut [f64]| f64::NAN;
        let err = minimize(&mut obj, &[0.0], &Bounds::unbounded(1), &OptimizerSettings::default());
        assert!(matches!(err, Err(OdinError::Input(_))));
    }

    #[test]
    fn infinite_region_is_backtracked() {
        // log barrier style objective that is +inf for x <= 0
        let mut obj = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                return f64::INFINITY;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let r = minimize(&mut obj, &[5.0], &Bounds::unbounded(1), &OptimizerSettings::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
        assert!(Bounds::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn split_interface_matches_combined() {
        let r = minimize_split(
            |x: &[f64]| (x[0] - 3.0).powi(2),
            |x: &[f64]| vec![2.0 * (x[0] - 3.0)],
            &[0.0],
            &Bounds::unbounded(1),
            &OptimizerSettings::default(),
        )
        .unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn monotone_and_deterministic() {
        let run = || {
            let mut trace = Vec::new();
            let mut obj = |x: &[f64], g: &mut [f64]| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                trace.push(f);
                f
            };
            let r = minimize(&mut obj, &[-1.2, 1.0], &Bounds::unbounded(2), &OptimizerSettings::default())
                .unwrap();
            (r.x, r.value, r.initial_value)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert!(a.1 <= a.2);
    }
}
