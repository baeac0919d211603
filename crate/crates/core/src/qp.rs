//! Exact primal active-set solver for small convex QPs over a boxed simplex:
//!
//! ```text
//! minimize    1/2 x^T H x + c^T x
//! subject to  sum(x) = 1,  lower_i <= x_i <= upper_i
//! ```
//!
//! Each iteration solves the equality-constrained subproblem on the current
//! free set with a dense saddle-point solve, then either steps toward its
//! minimizer (adding the first blocking bound) or, at a subproblem optimum,
//! releases the bound whose multiplier has the wrong sign.
//!
//! Multiplier convention: `H x + c - nu * 1 - mu = 0` where `mu_i >= 0` at a
//! lower bound, `mu_i <= 0` at an upper bound and `mu_i = 0` when free.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BoxedSimplexQp<T> {
    pub hessian: Mat<T>,
    pub linear: Vec<T>,
    pub lower: Vec<T>,
    /// `T::infinity()` for an unbounded coordinate.
    pub upper: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundStatus {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T> {
    pub x: Vec<T>,
    /// Multiplier of the equality constraint.
    pub nu: T,
    /// Bound multipliers `mu` (see module docs).
    pub mu: Vec<T>,
    pub status: Vec<BoundStatus>,
    pub iterations: usize,
    /// Maximum scaled violation of feasibility, stationarity, dual
    /// feasibility and complementary slackness.
    pub kkt_residual: T,
}

impl<T: Scalar> BoxedSimplexQp<T> {
    pub fn len(&self) -> usize {
        self.linear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.is_empty()
    }

    fn scale(&self) -> T {
        let c = self.linear.iter().fold(T::zero(), |m, x| m.max(x.abs()));
        T::one() + self.hessian.max_abs().max(c)
    }

    pub fn objective(&self, x: &[T]) -> T {
        let hx = self.hessian.matvec(x);
        let half = T::lit(0.5);
        crate::linalg::dot(x, &hx) * half + crate::linalg::dot(&self.linear, x)
    }

    pub fn gradient(&self, x: &[T]) -> Vec<T> {
        let mut g = self.hessian.matvec(x);
        for (gi, &ci) in g.iter_mut().zip(&self.linear) {
            *gi = *gi + ci;
        }
        g
    }

    fn validate(&self, start: &[T]) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::contract("QP needs at least one variable"));
        }
        if self.hessian.rows != n
            || self.hessian.cols != n
            || self.lower.len() != n
            || self.upper.len() != n
        {
            return Err(Error::contract(format!(
                "QP dimensions disagree: hessian {}x{}, linear {n}, bounds {}/{}",
                self.hessian.rows,
                self.hessian.cols,
                self.lower.len(),
                self.upper.len()
            )));
        }
        if start.len() != n {
            return Err(Error::contract("QP starting point has the wrong length"));
        }
        let tol = T::lit(1e-12);
        let sum: T = start.iter().copied().sum();
        let feasible = (sum - T::one()).abs() <= tol
            && start
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&lo, &hi))| x >= lo - tol && x <= hi + tol);
        if !feasible {
            return Err(Error::contract("QP starting point is infeasible"));
        }
        Ok(())
    }

    /// Solves from a feasible starting point. Coordinates of `start` that sit
    /// on a bound begin in the working set.
    pub fn solve(&self, start: &[T], tolerance: T) -> Result<QpSolution<T>> {
        self.validate(start)?;
        let n = self.len();
        let scale = self.scale();
        let tiny = T::epsilon() * T::lit(16.0);
        let mut x = start.to_vec();
        let mut status: Vec<BoundStatus> = (0..n)
            .map(|i| {
                if x[i] <= self.lower[i] {
                    BoundStatus::AtLower
                } else if x[i] >= self.upper[i] {
                    BoundStatus::AtUpper
                } else {
                    BoundStatus::Free
                }
            })
            .collect();
        if status.iter().all(|s| *s != BoundStatus::Free) {
            return Err(Error::contract(
                "QP starting point must have at least one free coordinate",
            ));
        }
        let cap = (1usize << n.min(30)).max(8);
        let mut changes = 0usize;
        let mut iterations = 0usize;
        let mut nu = T::zero();

        loop {
            iterations += 1;
            let free: Vec<usize> = (0..n).filter(|&i| status[i] == BoundStatus::Free).collect();
            if let Some(d) = self.flat_direction(&free, scale) {
                // objective is linear along d: walk downhill to the first bound
                let g = self.gradient(&x);
                let slope: T = free.iter().zip(&d).map(|(&i, &di)| g[i] * di).sum();
                let sign = if slope > T::zero() {
                    -T::one()
                } else {
                    T::one()
                };
                let mut t = T::infinity();
                let mut blocking = None;
                for (k, &i) in free.iter().enumerate() {
                    let p = sign * d[k];
                    let limit = if p < T::zero() && self.lower[i].is_finite() {
                        (x[i] - self.lower[i]) / -p
                    } else if p > T::zero() && self.upper[i].is_finite() {
                        (self.upper[i] - x[i]) / p
                    } else {
                        continue;
                    };
                    if limit < t {
                        t = limit.max(T::zero());
                        blocking = Some((
                            i,
                            if p < T::zero() {
                                BoundStatus::AtLower
                            } else {
                                BoundStatus::AtUpper
                            },
                        ));
                    }
                }
                let (i, bound) = blocking.ok_or_else(|| {
                    Error::numeric("qp", "objective unbounded along a flat direction")
                })?;
                for (k, &j) in free.iter().enumerate() {
                    x[j] = x[j] + t * sign * d[k];
                }
                x[i] = match bound {
                    BoundStatus::AtLower => self.lower[i],
                    _ => self.upper[i],
                };
                status[i] = bound;
                changes += 1;
                self.restore_sum(&mut x, &status);
                if changes > cap {
                    return Err(self.failure(iterations, &x, nu, &status, scale));
                }
                continue;
            }
            let (target, nu_sub) = self.solve_subproblem(&x, &free, scale)?;
            nu = nu_sub;
            let mut step_max = T::zero();
            for (k, &i) in free.iter().enumerate() {
                step_max = step_max.max((target[k] - x[i]).abs());
            }

            if step_max <= tiny {
                for (k, &i) in free.iter().enumerate() {
                    x[i] = target[k];
                }
                let g = self.gradient(&x);
                let threshold = tolerance * scale;
                let mut worst: Option<(usize, T)> = None;
                for i in 0..n {
                    let violation = match status[i] {
                        BoundStatus::Free => continue,
                        BoundStatus::AtLower => nu - g[i],
                        BoundStatus::AtUpper => g[i] - nu,
                    };
                    if violation > threshold && worst.map_or(true, |(_, w)| violation > w) {
                        worst = Some((i, violation));
                    }
                }
                match worst {
                    None => break,
                    Some((i, _)) => {
                        status[i] = BoundStatus::Free;
                        changes += 1;
                    }
                }
            } else {
                let mut t = T::one();
                let mut blocking: Option<(usize, BoundStatus)> = None;
                for (k, &i) in free.iter().enumerate() {
                    let p = target[k] - x[i];
                    let (limit, bound) = if p < T::zero() && self.lower[i].is_finite() {
                        ((x[i] - self.lower[i]) / -p, BoundStatus::AtLower)
                    } else if p > T::zero() && self.upper[i].is_finite() {
                        ((self.upper[i] - x[i]) / p, BoundStatus::AtUpper)
                    } else {
                        continue;
                    };
                    if limit < t {
                        t = limit.max(T::zero());
                        blocking = Some((i, bound));
                    }
                }
                for (k, &i) in free.iter().enumerate() {
                    x[i] = x[i] + t * (target[k] - x[i]);
                }
                if let Some((i, bound)) = blocking {
                    x[i] = match bound {
                        BoundStatus::AtLower => self.lower[i],
                        _ => self.upper[i],
                    };
                    status[i] = bound;
                    changes += 1;
                    self.restore_sum(&mut x, &status);
                }
            }

            if changes > cap {
                return Err(self.failure(iterations, &x, nu, &status, scale));
            }
        }

        self.restore_sum(&mut x, &status);
        let g = self.gradient(&x);
        let mu: Vec<T> = (0..n)
            .map(|i| match status[i] {
                BoundStatus::Free => T::zero(),
                _ => g[i] - nu,
            })
            .collect();
        let kkt_residual = self.kkt_residual(&x, nu, &status, scale);
        if !(kkt_residual <= tolerance) {
            return Err(self.failure(iterations, &x, nu, &status, scale));
        }
        Ok(QpSolution {
            x,
            nu,
            mu,
            status,
            iterations,
            kkt_residual,
        })
    }

    /// A direction `d` over `free` with `sum(d) = 0` along which the Hessian
    /// has no curvature, if the free set has one.
    fn flat_direction(&self, free: &[usize], scale: T) -> Option<Vec<T>> {
        let m = free.len();
        if m < 2 {
            return None;
        }
        let mf = T::from_count(m);
        // P H P + scale * 1 1^T / m, with P the projector onto sum(d) = 0
        let mut h = Mat::zeros(m, m);
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                h[(a, b)] = self.hessian[(i, j)];
            }
        }
        let row_mean: Vec<T> = (0..m)
            .map(|a| h.row(a).iter().copied().sum::<T>() / mf)
            .collect();
        let total_mean = row_mean.iter().copied().sum::<T>() / mf;
        let mut proj = Mat::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                proj[(a, b)] = h[(a, b)] - row_mean[a] - row_mean[b] + total_mean + scale / mf;
            }
        }
        let (values, vectors) = proj.symmetric_eigen();
        let last = m - 1;
        if values[last].abs() > T::lit(1e-11) * scale {
            return None;
        }
        let mut d: Vec<T> = (0..m).map(|a| vectors[(a, last)]).collect();
        let mean = d.iter().copied().sum::<T>() / mf;
        d.iter_mut().for_each(|v| *v = *v - mean);
        let norm = crate::linalg::dot(&d, &d).sqrt();
        if !(norm > T::lit(1e-3)) {
            return None;
        }
        d.iter_mut().for_each(|v| *v = *v / norm);
        Some(d)
    }

    /// Minimizer of the equality-constrained subproblem over `free`, with
    /// every other coordinate held at its current value. Returns the free
    /// coordinates and the equality multiplier.
    fn solve_subproblem(&self, x: &[T], free: &[usize], scale: T) -> Result<(Vec<T>, T)> {
        let m = free.len();
        let n = self.len();
        let mut rhs = vec![T::zero(); m + 1];
        let mut fixed_sum = T::zero();
        for j in 0..n {
            if !free.contains(&j) {
                fixed_sum = fixed_sum + x[j];
            }
        }
        for (k, &i) in free.iter().enumerate() {
            let mut r = -self.linear[i];
            for j in 0..n {
                if !free.contains(&j) && x[j] != T::zero() {
                    r = r - self.hessian[(i, j)] * x[j];
                }
            }
            rhs[k] = r;
        }
        rhs[m] = T::one() - fixed_sum;

        let build = |ridge: T| {
            let mut sys = Mat::zeros(m + 1, m + 1);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    sys[(a, b)] = self.hessian[(i, j)];
                }
                sys[(a, a)] = sys[(a, a)] + ridge;
                sys[(a, m)] = T::one();
                sys[(m, a)] = T::one();
            }
            sys
        };
        let pivot_tol = T::epsilon() * T::lit(64.0);
        let mut sys = build(T::zero());
        let mut sol = sys.solve(&rhs, pivot_tol);
        if sol.is_none() {
            // Affinely dependent free set: a tiny ridge selects one minimizer
            // and the subsequent step drops the redundant coordinate.
            sys = build(T::epsilon().sqrt() * T::lit(1e-2) * scale);
            sol = sys.solve(&rhs, pivot_tol);
        }
        let mut sol = sol.ok_or_else(|| Error::numeric("qp", "singular equality subproblem"))?;
        // one round of iterative refinement
        let resid: Vec<T> = sys
            .matvec(&sol)
            .iter()
            .zip(&rhs)
            .map(|(&a, &b)| b - a)
            .collect();
        if let Some(delta) = sys.solve(&resid, pivot_tol) {
            for (s, d) in sol.iter_mut().zip(delta) {
                *s = *s + d;
            }
        }
        let nu = -sol[m];
        sol.truncate(m);
        Ok((sol, nu))
    }

    /// Pushes rounding drift of `sum(x)` onto the largest free coordinate.
    fn restore_sum(&self, x: &mut [T], status: &[BoundStatus]) {
        let sum: T = x.iter().copied().sum();
        let drift = sum - T::one();
        if drift == T::zero() {
            return;
        }
        let target = (0..x.len())
            .filter(|&i| status[i] == BoundStatus::Free)
            .max_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
        if let Some(i) = target {
            x[i] = x[i] - drift;
        }
    }

    fn failure(
        &self,
        iterations: usize,
        x: &[T],
        nu: T,
        status: &[BoundStatus],
        scale: T,
    ) -> Error {
        Error::Solver {
            iterations,
            residual: self.kkt_residual(x, nu, status, scale).to_f64_lossy(),
            best_alpha: x.iter().map(|v| v.to_f64_lossy()).collect(),
        }
    }

    fn kkt_residual(&self, x: &[T], nu: T, status: &[BoundStatus], scale: T) -> T {
        let g = self.gradient(x);
        let sum: T = x.iter().copied().sum();
        let mut worst = (sum - T::one()).abs();
        for i in 0..x.len() {
            worst = worst.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
            let mu = g[i] - nu;
            let r = match status[i] {
                BoundStatus::Free => mu.abs() / scale,
                BoundStatus::AtLower => {
                    (-mu / scale).max((mu * (x[i] - self.lower[i])).abs() / scale)
                }
                BoundStatus::AtUpper => {
                    (mu / scale).max((mu * (self.upper[i] - x[i])).abs() / scale)
                }
            };
            worst = worst.max(r);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simplex_qp(h: Vec<f64>, c: Vec<f64>) -> BoxedSimplexQp<f64> {
        let n = c.len();
        BoxedSimplexQp {
            hessian: Mat::from_rows(n, n, h),
            linear: c,
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    #[test]
    fn uniform_optimum_for_identity_hessian() {
        let qp = simplex_qp(
            vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0],
            vec![0.0; 3],
        );
        let sol = qp.solve(&[1.0, 0.0, 0.0], 1e-10).unwrap();
        for v in &sol.x {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn box_upper_bound_is_respected() {
        // pull towards coordinate 0, which is capped at 0.4
        let qp = BoxedSimplexQp {
            hessian: Mat::<f64>::identity(3),
            linear: vec![-5.0, 0.0, 0.0],
            lower: vec![0.0; 3],
            upper: vec![0.4; 3],
        };
        let sol = qp.solve(&[1.0 / 3.0; 3], 1e-10).unwrap();
        assert!((sol.x[0] - 0.4).abs() < 1e-12);
        assert_eq!(sol.status[0], BoundStatus::AtUpper);
        assert!((sol.x[1] - 0.3).abs() < 1e-12 && (sol.x[2] - 0.3).abs() < 1e-12);
        assert!(sol.mu[0] <= 0.0);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let qp = simplex_qp(vec![1.0], vec![0.0]);
        assert!(qp.solve(&[0.5], 1e-8).is_err());
    }
}
