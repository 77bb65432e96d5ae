//! Family comparison on fitted laws: best loss at fixed compute and unique
//! data, the diffusion-minus-AR loss gap, the critical-compute crossover and
//! the curve and grid emitters built on them.
//!
//! Compute budgets are FLOPs under `C = 6 N D`, unique data is counted in
//! tokens and a positive gap favors AR.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lawcore::LawParams;
use crate::scalar::Scalar;

/// Model size and epochs minimizing predicted loss at `(flops, unique_tokens)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestLossPoint<T> {
    pub flops: T,
    pub unique_tokens: T,
    pub loss: T,
    pub n_star: T,
    pub e_star: T,
}

/// Admissible model sizes and resolution of the search over `log N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeSearch<T> {
    pub n_min: T,
    pub n_max: T,
    pub grid_points: usize,
}

impl<T: Scalar> Default for SizeSearch<T> {
    fn default() -> Self {
        Self { n_min: T::one(), n_max: T::of(1e15), grid_points: 512 }
    }
}

/// Predicted loss of `law` at `N = exp(ln_n)` when the whole budget is spent.
fn loss_at_log_n<T: Scalar>(law: &LawParams<T>, ln_n: T, budget: T, unique: T, u_n: T) -> Result<T> {
    let n = ln_n.exp();
    let epochs = (budget / (n * unique)).max(T::one());
    law.predict_loss(n, unique, epochs, u_n)
}

pub fn best_loss_at<T: Scalar>(law: &LawParams<T>, flops: T, unique: T) -> Result<BestLossPoint<T>> {
    best_loss_at_with(law, flops, unique, &SizeSearch::default())
}

/// Minimizes predicted loss over `N` with `D = C / 6N` and `E = D / U >= 1`.
///
/// A dense grid on `log N` brackets the minimum, which golden-section search
/// then refines to the resolution of `T`.
pub fn best_loss_at_with<T: Scalar>(
    law: &LawParams<T>,
    flops: T,
    unique: T,
    search: &SizeSearch<T>,
) -> Result<BestLossPoint<T>> {
    law.validate()?;
    if !(flops > T::zero() && flops.is_finite() && unique > T::zero() && unique.is_finite()) {
        return Err(Error::Domain(format!("flops and unique tokens must be positive, got C = {flops}, U = {unique}")));
    }
    if search.grid_points < 3 || !(search.n_min > T::zero() && search.n_min < search.n_max) {
        return Err(Error::Domain("size search needs 0 < n_min < n_max and at least 3 grid points".into()));
    }
    let budget = flops / T::of(6.0);
    // E >= 1 caps the model at C / 6U.
    let n_hi = search.n_max.min(budget / unique);
    if n_hi < search.n_min {
        return Err(Error::Infeasible(format!(
            "C = {flops} cannot cover one epoch of U = {unique} tokens with N >= {}",
            search.n_min
        )));
    }
    let u_n = law.base_params(unique)?;
    let (lo, hi) = (search.n_min.ln(), n_hi.ln());
    let f = |x: T| loss_at_log_n(law, x, budget, unique, u_n);

    let (ln_n, loss) = if hi - lo <= T::epsilon() * hi.abs().max(T::one()) {
        (hi, f(hi)?)
    } else {
        let m = search.grid_points;
        let step = (hi - lo) / T::of_usize(m - 1);
        let at = |i: usize| if i == m - 1 { hi } else { lo + step * T::of_usize(i) };
        let mut best = (0, f(lo)?);
        for i in 1..m {
            let v = f(at(i))?;
            if v < best.1 {
                best = (i, v);
            }
        }
        let (a, b) = (at(best.0.saturating_sub(1)), at((best.0 + 1).min(m - 1)));
        let (x, v) = golden_section(&f, a, b)?;
        if v < best.1 {
            (x, v)
        } else {
            (at(best.0), best.1)
        }
    };
    let n_star = ln_n.exp();
    Ok(BestLossPoint { flops, unique_tokens: unique, loss, n_star, e_star: budget / (n_star * unique) })
}

/// Minimum of a unimodal `f` on `[a, b]`.
fn golden_section<T: Scalar, F: Fn(T) -> Result<T>>(f: &F, mut a: T, mut b: T) -> Result<(T, T)> {
    let inv_phi = (T::of(5.0).sqrt() - T::one()) / T::of(2.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    let tol = T::epsilon().sqrt() * T::of(1e-2);
    for _ in 0..200 {
        if (b - a).abs() <= tol * (T::one() + c.abs()) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { (c, fc) } else { (d, fd) })
}

/// `L_diffusion(C, U) - L_AR(C, U)`, each the best loss over model size.
pub fn loss_gap<T: Scalar>(law_diff: &LawParams<T>, law_ar: &LawParams<T>, flops: T, unique: T) -> Result<T> {
    Ok(best_loss_at(law_diff, flops, unique)?.loss - best_loss_at(law_ar, flops, unique)?.loss)
}

pub const DEFAULT_C_LO: f64 = 1e15;
pub const DEFAULT_C_HI: f64 = 1e24;

/// Compute at which the loss gap changes sign for `unique` tokens, found by
/// bisection on `log10 C` inside `[c_lo, c_hi]`.
pub fn critical_compute<T: Scalar>(law_diff: &LawParams<T>, law_ar: &LawParams<T>, unique: T, c_lo: T, c_hi: T) -> Result<T> {
    if !(c_lo > T::zero() && c_lo < c_hi && c_hi.is_finite()) {
        return Err(Error::Domain(format!("crossover bracket must satisfy 0 < c_lo < c_hi, got [{c_lo}, {c_hi}]")));
    }
    let gap = |log_c: T| loss_gap(law_diff, law_ar, T::of(10.0).powf(log_c), unique);
    let (mut a, mut b) = (c_lo.log10(), c_hi.log10());
    let (g_lo, g_hi) = (gap(a)?, gap(b)?);
    // a gap that vanishes at both ends (e.g. identical laws) never changes sign
    if (g_lo > T::zero()) == (g_hi > T::zero()) && (g_lo < T::zero()) == (g_hi < T::zero()) {
        return Err(Error::NoCrossover { gap_lo: g_lo.to_f64_lossy(), gap_hi: g_hi.to_f64_lossy() });
    }
    if g_lo == T::zero() {
        return Ok(c_lo);
    }
    if g_hi == T::zero() {
        return Ok(c_hi);
    }
    let lo_positive = g_lo > T::zero();
    let tol = (b - a) * T::epsilon() * T::of(16.0);
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        let mid = (a + b) / T::of(2.0);
        let g = gap(mid)?;
        if g == T::zero() {
            return Ok(T::of(10.0).powf(mid));
        }
        if (g > T::zero()) == lo_positive {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(T::of(10.0).powf((a + b) / T::of(2.0)))
}

/// Least-squares power law through `(U, C_crit)` points, fitted as
/// `log10 U = slope * log10 C + intercept` and inverted to
/// `C = coefficient * U^exponent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CritFit<T> {
    pub slope: T,
    pub intercept: T,
    pub exponent: T,
    pub coefficient: T,
    /// Largest absolute residual in `log10 U`.
    pub max_residual: T,
    pub points: Vec<(T, T)>,
}

pub fn fit_crit_powerlaw<T: Scalar>(points: &[(T, T)]) -> Result<CritFit<T>> {
    if points.len() < 2 {
        return Err(Error::Fit(format!("power-law fit needs at least 2 points, got {}", points.len())));
    }
    if let Some(&(u, c)) = points.iter().find(|&&(u, c)| !(u > T::zero() && c > T::zero())) {
        return Err(Error::Fit(format!("power-law points must be positive, got ({u}, {c})")));
    }
    let n = T::of_usize(points.len());
    let xs: Vec<T> = points.iter().map(|p| p.1.log10()).collect();
    let ys: Vec<T> = points.iter().map(|p| p.0.log10()).collect();
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let sxx: T = xs.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if !(sxx > T::zero()) {
        return Err(Error::Fit("power-law fit needs at least two distinct compute values".into()));
    }
    let sxy: T = xs.iter().zip(&ys).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if slope == T::zero() {
        return Err(Error::Fit("power-law slope is zero; exponent undefined".into()));
    }
    let intercept = my - slope * mx;
    let max_residual = xs.iter().zip(&ys).map(|(&x, &y)| (y - slope * x - intercept).abs()).fold(T::zero(), T::max);
    Ok(CritFit {
        slope,
        intercept,
        exponent: T::one() / slope,
        coefficient: T::of(10.0).powf(-intercept / slope),
        max_residual,
        points: points.to_vec(),
    })
}

/// One row of a crossover table; `reason` explains a missing `c_crit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverRow<T> {
    pub unique: T,
    pub c_crit: Option<T>,
    pub reason: Option<String>,
}

/// Crossover compute for each `U` in `u_values`. A `U` without a sign change
/// in the bracket, or with an infeasible bracket, gets `c_crit: None`.
pub fn crossover_table<T: Scalar>(
    law_diff: &LawParams<T>,
    law_ar: &LawParams<T>,
    u_values: &[T],
    c_lo: T,
    c_hi: T,
) -> Result<Vec<CrossoverRow<T>>> {
    u_values
        .iter()
        .map(|&u| match critical_compute(law_diff, law_ar, u, c_lo, c_hi) {
            Ok(c) => Ok(CrossoverRow { unique: u, c_crit: Some(c), reason: None }),
            Err(e @ (Error::NoCrossover { .. } | Error::Infeasible(_))) => {
                Ok(CrossoverRow { unique: u, c_crit: None, reason: Some(e.to_string()) })
            }
            Err(e) => Err(e),
        })
        .collect()
}

/// Loss-gap grid, one row per `U` and one column per `C`; `None` marks
/// budgets that cannot cover one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    pub u_values: Vec<T>,
    pub c_values: Vec<T>,
    pub cells: Vec<Vec<Option<T>>>,
}

pub fn heatmap_grid<T: Scalar>(law_diff: &LawParams<T>, law_ar: &LawParams<T>, u_values: &[T], c_values: &[T]) -> Result<Heatmap<T>> {
    if u_values.is_empty() || c_values.is_empty() {
        return Err(Error::Domain("heatmap needs non-empty U and C grids".into()));
    }
    law_diff.validate()?;
    law_ar.validate()?;
    let cells = u_values
        .iter()
        .map(|&u| c_values.iter().map(|&c| loss_gap(law_diff, law_ar, c, u).ok()).collect())
        .collect();
    Ok(Heatmap { u_values: u_values.to_vec(), c_values: c_values.to_vec(), cells })
}

/// Formats with nine significant digits.
pub fn fmt9<T: Scalar>(x: T) -> String {
    format!("{:.8e}", x.to_f64_lossy())
}

impl<T: Scalar> Heatmap<T> {
    /// Header row `U,<C values>`, then `<U>,<gaps>` with empty infeasible cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = std::iter::once("U".to_string()).chain(self.c_values.iter().map(|&c| fmt9(c))).collect();
        out.write_record(&header)?;
        for (u, row) in self.u_values.iter().zip(&self.cells) {
            let rec: Vec<String> = std::iter::once(fmt9(*u)).chain(row.iter().map(|c| c.map(fmt9).unwrap_or_default())).collect();
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepetitionPoint<T> {
    pub fraction: T,
    pub epochs: T,
    pub loss: T,
}

/// Loss at fixed compute-optimal `(N, D)` when only a fraction `f` of `D` is
/// unique and repeated for `1 / f` epochs.
pub fn repetition_tradeoff<T: Scalar>(law: &LawParams<T>, flops: T, fractions: &[T]) -> Result<Vec<RepetitionPoint<T>>> {
    law.validate()?;
    let alloc = law.optimal_allocation(flops)?;
    fractions
        .iter()
        .map(|&f| {
            if !(f > T::zero() && f <= T::one()) {
                return Err(Error::Domain(format!("unique-data fraction must lie in (0, 1], got {f}")));
            }
            let unique = f * alloc.d_opt;
            let epochs = T::one() / f;
            let loss = law.predict_loss(alloc.n_opt, unique, epochs, law.base_params(unique)?)?;
            Ok(RepetitionPoint { fraction: f, epochs, loss })
        })
        .collect()
}

/// One point of an extrapolated repetition curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint<T> {
    pub budget: T,
    pub epoch: u32,
    pub tokens: T,
    pub loss: T,
    /// Loss if repeated tokens were worth as much as fresh ones.
    pub hypothetical_loss: T,
}

/// For each budget, anchors `(N_opt, U = D_opt)` from the single-epoch
/// allocation and sweeps `E = 1..=max_epochs` over that unique set.
pub fn extrapolate_curves<T: Scalar>(law: &LawParams<T>, budgets: &[T], max_epochs: u32) -> Result<Vec<CurvePoint<T>>> {
    law.validate()?;
    if max_epochs == 0 {
        return Err(Error::Domain("max_epochs must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(budgets.len() * max_epochs as usize);
    for &budget in budgets {
        let alloc = law.optimal_allocation(budget)?;
        let (n, unique) = (alloc.n_opt, alloc.d_opt);
        let u_n = law.base_params(unique)?;
        for epoch in 1..=max_epochs {
            let e = T::of(f64::from(epoch));
            let tokens = unique * e;
            let loss = law.predict_loss(n, unique, e, u_n)?;
            let hypothetical_loss = law.single_epoch_loss(n, tokens);
            out.push(CurvePoint { budget, epoch, tokens, loss, hypothetical_loss });
        }
    }
    Ok(out)
}

pub fn write_curves_csv<T: Scalar, W: Write>(w: W, curves: &[CurvePoint<T>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["budget", "epoch", "tokens", "loss", "hypothetical_loss"])?;
    for p in curves {
        out.write_record([fmt9(p.budget), p.epoch.to_string(), fmt9(p.tokens), fmt9(p.loss), fmt9(p.hypothetical_loss)])?;
    }
    out.flush()?;
    Ok(())
}

/// Predicted loss over a `(N, C)` grid at fixed unique data; `None` where
/// `C / 6N < U` would leave less than one epoch.
pub fn loss_surface<T: Scalar>(law: &LawParams<T>, unique: T, n_values: &[T], c_values: &[T]) -> Result<Vec<Vec<Option<T>>>> {
    law.validate()?;
    let u_n = law.base_params(unique)?;
    Ok(n_values
        .iter()
        .map(|&n| {
            c_values
                .iter()
                .map(|&c| {
                    let epochs = c / (T::of(6.0) * n * unique);
                    if epochs < T::one() {
                        None
                    } else {
                        law.predict_loss(n, unique, epochs, u_n).ok()
                    }
                })
                .collect()
        })
        .collect())
}

pub fn write_crossover_csv<T: Scalar, W: Write>(w: W, rows: &[CrossoverRow<T>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["U", "C_crit", "reason"])?;
    for r in rows {
        out.write_record([fmt9(r.unique), r.c_crit.map(fmt9).unwrap_or_default(), r.reason.clone().unwrap_or_default()])?;
    }
    out.flush()?;
    Ok(())
}
