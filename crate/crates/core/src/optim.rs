//! Box-constrained minimisation: a projected quasi-Newton (BFGS) method with
//! active-set handling, and a projected Nelder-Mead simplex used as a
//! derivative-free fallback.
//!
//! The feasible set is a box `lower ≤ x ≤ upper` intersected with optional
//! sum caps `Σ_{i∈I} x_i ≤ c`. Objectives return `f64::INFINITY` outside
//! their domain; the line search treats that as a failed trial step.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub sum_caps: Vec<(Range<usize>, f64)>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper, sum_caps: Vec::new() }
    }

    pub fn with_sum_cap(mut self, range: Range<usize>, cap: f64) -> Self {
        self.sum_caps.push((range, cap));
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Euclidean projection onto the feasible set.
    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
        for (range, cap) in &self.sum_caps {
            let sum: f64 = x[range.clone()].iter().sum();
            if sum <= *cap {
                continue;
            }
            // find the shift τ with Σ clamp(x_i − τ) = cap
            let (mut lo_t, mut hi_t) = (0.0, sum - cap + x[range.clone()].iter().cloned().fold(0.0, f64::max));
            let orig: Vec<f64> = x[range.clone()].to_vec();
            let shifted = |t: f64| -> f64 {
                orig.iter()
                    .zip(&self.lower[range.clone()])
                    .zip(&self.upper[range.clone()])
                    .map(|((v, lo), hi)| (v - t).clamp(*lo, *hi))
                    .sum()
            };
            for _ in 0..200 {
                let mid = 0.5 * (lo_t + hi_t);
                if shifted(mid) > *cap {
                    lo_t = mid;
                } else {
                    hi_t = mid;
                }
            }
            for (i, v) in range.clone().zip(&orig) {
                x[i] = (v - hi_t).clamp(self.lower[i], self.upper[i]);
            }
        }
    }

    fn at_lower(&self, x: &[f64], i: usize) -> bool {
        x[i] <= self.lower[i] + 1e-14 * (1.0 + self.lower[i].abs())
    }

    fn at_upper(&self, x: &[f64], i: usize) -> bool {
        x[i] >= self.upper[i] - 1e-14 * (1.0 + self.upper[i].abs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    pub max_iterations: usize,
    /// Stop when the projected gradient's sup-norm falls below this.
    pub grad_tol: f64,
    pub step_tol: f64,
    pub f_tol: f64,
    /// Looser bound accepted when the iteration stalls at floating-point
    /// resolution (no further decrease is representable).
    pub stall_grad_tol: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { max_iterations: 500, grad_tol: 1e-9, step_tol: 1e-12, f_tol: 1e-15, stall_grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub projected_grad: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Sup-norm of x − P(x − g).
pub fn projected_gradient_norm(bounds: &Bounds, x: &[f64], g: &[f64]) -> f64 {
    let mut trial: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
    bounds.project(&mut trial);
    x.iter().zip(&trial).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Projected BFGS. `objective(x, grad)` returns f(x) and writes ∇f(x) into
/// `grad` when it is `Some`.
pub fn projected_bfgs<F>(mut objective: F, x0: &[f64], bounds: &Bounds, opts: &MinimizeOptions) -> MinimizeResult
where
    F: FnMut(&[f64], Option<&mut [f64]>) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, Some(&mut g));
    let mut evaluations = 1;
    if !f.is_finite() {
        return MinimizeResult {
            projected_grad: f64::INFINITY,
            x,
            f,
            grad: g,
            iterations: 0,
            evaluations,
            converged: false,
        };
    }
    let mut h = identity(n);
    let mut fresh = true;
    let mut stalls = 0;
    let mut stalled = false;
    let mut iterations = 0;
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut d = vec![0.0; n];

    while iterations < opts.max_iterations {
        let pg = projected_gradient_norm(bounds, &x, &g);
        if pg < opts.grad_tol {
            return MinimizeResult { x, f, grad: g, projected_grad: pg, iterations, evaluations, converged: true };
        }
        iterations += 1;

        let free: Vec<bool> = (0..n)
            .map(|i| {
                let pinned = bounds.lower[i] == bounds.upper[i];
                let blocked = (bounds.at_lower(&x, i) && g[i] > 0.0) || (bounds.at_upper(&x, i) && g[i] < 0.0);
                !(pinned || blocked)
            })
            .collect();
        let mut slope = 0.0;
        for i in 0..n {
            d[i] = 0.0;
            if free[i] {
                for j in 0..n {
                    if free[j] {
                        d[i] -= h[i * n + j] * g[j];
                    }
                }
            }
            slope += d[i] * g[i];
        }
        if !(slope < 0.0) {
            h = identity(n);
            fresh = true;
            slope = 0.0;
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
                slope += d[i] * g[i];
            }
            if !(slope < 0.0) {
                stalled = true;
                break;
            }
        }

        // projected Armijo backtracking
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                xt[i] = x[i] + t * d[i];
            }
            bounds.project(&mut xt);
            let decrease: f64 = (0..n).map(|i| g[i] * (xt[i] - x[i])).sum();
            let ft = objective(&xt, Some(&mut gt));
            evaluations += 1;
            if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) && gt.iter().all(|v| v.is_finite()) {
                accepted = Some(ft);
                break;
            }
            t *= 0.5;
        }
        let Some(ft) = accepted else {
            if fresh {
                stalled = true;
                break;
            }
            h = identity(n);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = (0..n).map(|i| xt[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| gt[i] - g[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let step = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let df = f - ft;
        x.copy_from_slice(&xt);
        g.copy_from_slice(&gt);
        f = ft;

        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 {
            if fresh {
                let scale = sy / yy;
                for v in h.iter_mut() {
                    *v *= scale;
                }
                fresh = false;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        if step <= opts.step_tol * (1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            && df.abs() <= opts.f_tol * (1.0 + f.abs())
        {
            stalls += 1;
            if stalls >= 3 {
                stalled = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    let pg = projected_gradient_norm(bounds, &x, &g);
    let converged = pg < opts.grad_tol || (stalled && pg < opts.stall_grad_tol);
    MinimizeResult { converged, x, f, grad: g, projected_grad: pg, iterations, evaluations }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// H ← (I − ρsy′) H (I − ρys′) + ρss′.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Projected Nelder-Mead on the feasible set.
pub fn nelder_mead<F>(mut objective: F, x0: &[f64], bounds: &Bounds, opts: &MinimizeOptions) -> MinimizeResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut start = x0.to_vec();
    bounds.project(&mut start);
    let mut simplex = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        let span = bounds.upper[i] - bounds.lower[i];
        let step = if span == 0.0 { 0.0 } else { 0.05 * v[i].abs().max(0.01).min(span) };
        v[i] = if v[i] + step <= bounds.upper[i] { v[i] + step } else { v[i] - step };
        bounds.project(&mut v);
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| objective(v)).collect();
    let mut evaluations = n + 1;
    let mut iterations = 0;
    let mut converged = false;
    let eval = |p: Vec<f64>, objective: &mut F, evaluations: &mut usize| {
        let mut p = p;
        bounds.project(&mut p);
        *evaluations += 1;
        let v = objective(&p);
        (p, if v.is_finite() { v } else { f64::INFINITY })
    };
    while iterations < opts.max_iterations * 4 {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0f64, f64::max);
        if spread.abs() <= 1e-14 * (1.0 + values[0].abs()) && size <= 1e-10 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |coef: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + coef * (simplex[n][j] - centroid[j])).collect() };

        let (xr, fr) = eval(along(-1.0), &mut objective, &mut evaluations);
        if fr < values[0] {
            let (xe, fe) = eval(along(-2.0), &mut objective, &mut evaluations);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                eval(along(-0.5), &mut objective, &mut evaluations)
            } else {
                eval(along(0.5), &mut objective, &mut evaluations)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    let shrunk: Vec<f64> = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                    let (xs, fs) = eval(shrunk, &mut objective, &mut evaluations);
                    simplex[i] = xs;
                    values[i] = fs;
                }
            }
        }
    }
    let best = (0..=n).min_by(|a, b| values[*a].total_cmp(&values[*b])).unwrap_or(0);
    MinimizeResult {
        x: simplex[best].clone(),
        f: values[best],
        grad: vec![f64::NAN; n],
        projected_grad: f64::NAN,
        iterations,
        evaluations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: Option<&mut [f64]>) -> f64 {
        let (a, b) = (x[0], x[1]);
        if let Some(g) = g {
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
        }
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let bounds = Bounds::new(vec![-5.0, -5.0], vec![5.0, 5.0]);
        let r = projected_bfgs(rosenbrock, &[-1.2, 1.0], &bounds, &MinimizeOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-7 && (r.x[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn bfgs_respects_active_bounds() {
        // minimum of (x-2)² + (y+1)² on [0,1]² is (1, 0)
        let bounds = Bounds::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let f = |x: &[f64], g: Option<&mut [f64]>| {
            if let Some(g) = g {
                g[0] = 2.0 * (x[0] - 2.0);
                g[1] = 2.0 * (x[1] + 1.0);
            }
            (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2)
        };
        let r = projected_bfgs(f, &[0.5, 0.5], &bounds, &MinimizeOptions::default());
        assert!(r.converged);
        assert_eq!(r.x, vec![1.0, 0.0]);
    }

    #[test]
    fn sum_cap_projection() {
        let bounds = Bounds::new(vec![0.0; 3], vec![1.0; 3]).with_sum_cap(1..3, 0.9);
        let mut x = vec![5.0, 0.8, 0.6];
        bounds.project(&mut x);
        assert_eq!(x[0], 1.0);
        assert!((x[1] + x[2] - 0.9).abs() < 1e-12);
        assert!((x[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let bounds = Bounds::new(vec![-10.0; 2], vec![10.0; 2]);
        let r = nelder_mead(|x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2), &[0.0, 0.0], &bounds, &MinimizeOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 1.5).abs() < 1e-6 && (r.x[1] + 0.5).abs() < 1e-6);
    }
}
