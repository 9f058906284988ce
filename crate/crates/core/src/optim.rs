//! BFGS minimisation with backtracking (Armijo) line search.
//!
//! Every accepted step strictly lowers the objective, so the objective
//! sequence recorded in [`Minimum::trace`] is non-increasing.

#[derive(Clone, Copy, Debug)]
pub struct BfgsConfig {
    pub max_iter: usize,
    /// Stop once the gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Accept a stalled line search as converged below this gradient norm.
    pub stall_grad_tol: f64,
    /// Upper bound on any coordinate of a single step.
    pub max_step: f64,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig {
            max_iter: 200,
            grad_tol: 1e-9,
            stall_grad_tol: 1e-5,
            max_step: 4.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = scale;
    }
    h
}

/// Minimises `f`, which writes the gradient into its second argument and
/// returns the objective (non-finite values are treated as infeasible).
pub fn minimize<F>(mut f: F, x0: Vec<f64>, cfg: &BfgsConfig) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut trace = vec![fx];
    if n == 0 || !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            grad_norm: if n == 0 { 0.0 } else { f64::INFINITY },
            iterations: 0,
            converged: n == 0,
            trace,
        };
    }

    let mut h = identity(n, 1.0);
    let mut fresh = true;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cfg.max_iter {
        if max_norm(&g) <= cfg.grad_tol {
            converged = true;
            break;
        }
        for i in 0..n {
            d[i] = -(0..n).map(|j| h[i * n + j] * g[j]).sum::<f64>();
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n, 1.0);
            fresh = true;
            for i in 0..n {
                d[i] = -g[i];
            }
            slope = dot(&g, &d);
        }
        let longest = max_norm(&d);
        if longest > cfg.max_step {
            let s = cfg.max_step / longest;
            d.iter_mut().for_each(|v| *v *= s);
            slope *= s;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new < fx && f_new <= fx + 1e-4 * t * slope {
                accepted = Some(f_new);
                break;
            }
            t *= 0.5;
        }
        iterations += 1;

        let Some(f_new) = accepted else {
            if fresh {
                converged = max_norm(&g) <= cfg.stall_grad_tol;
                break;
            }
            // retry from steepest descent with a reset curvature model
            h = identity(n, 1.0);
            fresh = true;
            continue;
        };

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * (dot(&s, &s) * yy).sqrt() && sy > 0.0 {
            if fresh {
                h = identity(n, sy / yy);
            }
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            fresh = false;
        }

        let rel = (fx - f_new).abs() / fx.abs().max(1.0);
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        trace.push(fx);
        if rel < 1e-16 && max_norm(&g) <= cfg.stall_grad_tol {
            converged = true;
            break;
        }
    }
    if !converged && max_norm(&g) <= cfg.grad_tol {
        converged = true;
    }
    Minimum {
        grad_norm: max_norm(&g),
        x,
        value: fx,
        iterations,
        converged,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_rosenbrock() {
        let rosen = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let cfg = BfgsConfig {
            max_iter: 500,
            ..Default::default()
        };
        let m = minimize(rosen, vec![-1.2, 1.0], &cfg);
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_infeasible_steps() {
        // ln barrier: infinite outside x > 0
        let f = |x: &[f64], g: &mut [f64]| {
            if x[0] <= 0.0 {
                return f64::INFINITY;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        };
        let m = minimize(f, vec![10.0], &BfgsConfig::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-8);
    }
}
