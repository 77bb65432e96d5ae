//! Box-constrained quasi-Newton minimization.
//!
//! Projected L-BFGS with an Armijo backtracking line search. Every accepted
//! iterate strictly lowers the objective; the per-iteration objective values
//! are kept in [`Minimum::history`].

use std::collections::VecDeque;

use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Bounds<T> {
    pub lo: Vec<T>,
    pub hi: Vec<T>,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(lo: Vec<T>, hi: Vec<T>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn unbounded(dim: usize) -> Self {
        Self { lo: vec![T::neg_infinity(); dim], hi: vec![T::infinity(); dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn project(&self, x: &mut [T]) {
        for ((xi, &lo), &hi) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *xi = xi.max(lo).min(hi);
        }
    }

    /// Gradient with components that point out of the box at an active
    /// bound zeroed.
    fn projected_gradient(&self, x: &[T], g: &[T]) -> Vec<T> {
        x.iter()
            .zip(g)
            .zip(self.lo.iter().zip(&self.hi))
            .map(|((&xi, &gi), (&lo, &hi))| {
                if (xi <= lo && gi > T::zero()) || (xi >= hi && gi < T::zero()) {
                    T::zero()
                } else {
                    gi
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOptions<T> {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop once the infinity norm of the projected gradient drops below this.
    pub grad_tol: T,
    /// Stop after three consecutive iterations whose relative decrease is below this.
    pub rel_tol: T,
}

impl<T: Scalar> Default for LbfgsOptions<T> {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            memory: 10,
            grad_tol: T::epsilon() * T::of(1e-2),
            rel_tol: T::epsilon() * T::of(4.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    RelativeDecrease,
    /// The line search could not lower the objective any further.
    Stalled,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(self, Termination::Gradient | Termination::RelativeDecrease | Termination::Stalled)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub f: T,
    pub iters: usize,
    pub evals: usize,
    pub termination: Termination,
    /// Objective after each accepted iteration, starting with the initial point.
    pub history: Vec<T>,
}

impl<T: Scalar> Minimum<T> {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn inf_norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Minimizes `objective` inside `bounds` starting from `x0`.
///
/// `objective(x, grad)` returns the value at `x` and writes the gradient into `grad`.
pub fn minimize<T, F>(mut objective: F, x0: &[T], bounds: &Bounds<T>, opts: &LbfgsOptions<T>) -> Minimum<T>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let n = x0.len();
    assert_eq!(n, bounds.dim());
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![T::zero(); n];
    let mut f = objective(&x, &mut g);
    let mut evals = 1;
    let mut history = vec![f];
    let mut pairs: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(opts.memory);
    let mut slow_steps = 0;

    let finish = |x: Vec<T>, f: T, iters, evals, termination, history| Minimum { x, f, iters, evals, termination, history };

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return finish(x, f, 0, evals, Termination::NonFinite, history);
    }

    let c1 = T::of(1e-4);
    let half = T::of(0.5);
    let mut x_new = vec![T::zero(); n];
    let mut g_new = vec![T::zero(); n];

    for iter in 0..opts.max_iters {
        let pg = bounds.projected_gradient(&x, &g);
        if inf_norm(&pg) <= opts.grad_tol {
            return finish(x, f, iter, evals, Termination::Gradient, history);
        }

        let mut accepted = false;
        // Two attempts: quasi-Newton direction, then steepest descent with fresh memory.
        for attempt in 0..2 {
            let mut d = if attempt == 0 && !pairs.is_empty() { two_loop(&pg, &pairs) } else { pg.iter().map(|&v| -v).collect() };
            // keep active-bound coordinates fixed
            for i in 0..n {
                if pg[i] == T::zero() {
                    d[i] = T::zero();
                }
            }
            if dot(&d, &pg) >= T::zero() {
                if attempt == 0 {
                    pairs.clear();
                    continue;
                }
                break;
            }
            let mut step = if pairs.is_empty() { T::one().min(T::one() / inf_norm(&d)) } else { T::one() };
            for _ in 0..60 {
                for i in 0..n {
                    x_new[i] = x[i] + step * d[i];
                }
                bounds.project(&mut x_new);
                let f_try = objective(&x_new, &mut g_new);
                evals += 1;
                let moved: Vec<T> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
                if f_try.is_finite() && f_try < f && f_try <= f + c1 * dot(&g, &moved) {
                    if g_new.iter().any(|v| !v.is_finite()) {
                        return finish(x, f, iter, evals, Termination::NonFinite, history);
                    }
                    let y: Vec<T> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
                    let sy = dot(&moved, &y);
                    if sy > T::epsilon() * dot(&y, &y) {
                        if pairs.len() == opts.memory {
                            pairs.pop_front();
                        }
                        pairs.push_back((moved, y, T::one() / sy));
                    }
                    let rel = (f - f_try) / f.abs().max(f_try.abs()).max(T::min_positive_value());
                    slow_steps = if rel <= opts.rel_tol { slow_steps + 1 } else { 0 };
                    x.copy_from_slice(&x_new);
                    g.copy_from_slice(&g_new);
                    f = f_try;
                    history.push(f);
                    accepted = true;
                    break;
                }
                step = step * half;
            }
            if accepted {
                break;
            }
            pairs.clear();
        }
        if !accepted {
            return finish(x, f, iter, evals, Termination::Stalled, history);
        }
        if slow_steps >= 3 {
            return finish(x, f, iter + 1, evals, Termination::RelativeDecrease, history);
        }
    }
    let iters = opts.max_iters;
    finish(x, f, iters, evals, Termination::MaxIterations, history)
}

fn two_loop<T: Scalar>(g: &[T], pairs: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, &yi) in q.iter_mut().zip(y) {
            *qi = *qi - a * yi;
        }
        alphas.push(a);
    }
    let (s, y, _) = pairs.back().expect("non-empty memory");
    let gamma = dot(s, y) / dot(y, y);
    for qi in q.iter_mut() {
        *qi = *qi * gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, &si) in q.iter_mut().zip(s) {
            *qi = *qi + (a - b) * si;
        }
    }
    q.iter().map(|&v| -v).collect()
}
