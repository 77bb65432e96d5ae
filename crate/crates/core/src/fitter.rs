//! Two-stage fitting of [`LawParams`] from run records.
//!
//! Stage 1 fits `{A, B, alpha, beta, E0}` on single-epoch runs with `N' = N`
//! and `D' = D`. Stage 2 freezes those and fits the decay constants
//! `{R_D*, R_N*}` on runs that include repetition, with `U_N` per run from
//! [`LawParams::base_params`]. Both stages minimize the mean Huber loss of
//! `log(predicted) - log(observed)` with multi-start projected L-BFGS.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lawcore::LawParams;
use crate::optim::{self, Bounds, LbfgsOptions, Minimum};
use crate::runstore::{tokens_for, Family, RunRecord};
use crate::scalar::Scalar;

/// Closed interval for one fitted constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub low: T,
    pub high: T,
}

impl<T: Scalar> Range<T> {
    fn of(low: f64, high: f64) -> Self {
        Self { low: T::of(low), high: T::of(high) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ParamBounds<T> {
    #[serde(rename = "A")]
    pub a: Range<T>,
    #[serde(rename = "B")]
    pub b: Range<T>,
    pub alpha: Range<T>,
    pub beta: Range<T>,
    #[serde(rename = "E0")]
    pub e0: Range<T>,
    pub r_d_star: Range<T>,
    pub r_n_star: Range<T>,
}

impl<T: Scalar> Default for ParamBounds<T> {
    fn default() -> Self {
        Self {
            a: Range::of(1e-2, 1e6),
            b: Range::of(1e-2, 1e6),
            alpha: Range::of(0.05, 1.5),
            beta: Range::of(0.05, 1.5),
            e0: Range::of(1e-3, 10.0),
            r_d_star: Range::of(1e-1, 1e5),
            r_n_star: Range::of(1e-1, 1e5),
        }
    }
}

impl<T: Scalar> ParamBounds<T> {
    fn stage1(&self) -> [Range<T>; 5] {
        [self.a, self.b, self.alpha, self.beta, self.e0]
    }

    fn stage2(&self) -> [Range<T>; 2] {
        [self.r_d_star, self.r_n_star]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de> + Scalar"))]
pub struct FitConfig<T> {
    pub huber_delta: T,
    pub n_starts: usize,
    pub max_iters: usize,
    pub param_bounds: ParamBounds<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for FitConfig<T> {
    fn default() -> Self {
        Self { huber_delta: T::of(1e-3), n_starts: 64, max_iters: 2000, param_bounds: ParamBounds::default(), seed: 0 }
    }
}

impl<T: Scalar> FitConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > T::zero()) {
            return Err(Error::Domain("huber_delta must be positive".into()));
        }
        if self.n_starts == 0 {
            return Err(Error::Domain("n_starts must be at least 1".into()));
        }
        let b = &self.param_bounds;
        for (name, r) in [
            ("A", b.a),
            ("B", b.b),
            ("alpha", b.alpha),
            ("beta", b.beta),
            ("E0", b.e0),
            ("r_d_star", b.r_d_star),
            ("r_n_star", b.r_n_star),
        ] {
            if !(r.low > T::zero() && r.low < r.high && r.high.is_finite()) {
                return Err(Error::Domain(format!("bounds for {name} must satisfy 0 < low < high < inf")));
            }
        }
        Ok(())
    }
}

/// Constants fitted in stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Stage1<T> {
    #[serde(rename = "A")]
    pub a: T,
    #[serde(rename = "B")]
    pub b: T,
    pub alpha: T,
    pub beta: T,
    #[serde(rename = "E0")]
    pub e0: T,
}

impl<T: Scalar> Stage1<T> {
    pub fn with_decay(&self, r_d_star: T, r_n_star: T) -> LawParams<T> {
        LawParams { a: self.a, b: self.b, alpha: self.alpha, beta: self.beta, e0: self.e0, r_d_star, r_n_star }
    }

    fn from_log(theta: &[T]) -> Self {
        Self { a: theta[0].exp(), b: theta[1].exp(), alpha: theta[2].exp(), beta: theta[3].exp(), e0: theta[4].exp() }
    }
}

impl<T: Copy> From<&LawParams<T>> for Stage1<T> {
    fn from(law: &LawParams<T>) -> Self {
        Self { a: law.a, b: law.b, alpha: law.alpha, beta: law.beta, e0: law.e0 }
    }
}

/// Decay constants fitted in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2<T> {
    pub r_d_star: T,
    pub r_n_star: T,
}

/// Goodness-of-fit bundle for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FitReport<T> {
    /// R^2 on raw losses.
    pub r_squared: T,
    /// R^2 on log losses.
    pub r_squared_log: T,
    /// Mean Huber loss of the log residuals at the optimum.
    pub objective_value: T,
    pub n_runs: usize,
    /// `log(predicted) - log(observed)` per run, in input order.
    pub residuals: Vec<T>,
    pub starts_tried: usize,
    pub starts_converged: usize,
    pub best_start: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the design barely constrains the fitted constants.
    pub weak_identification: bool,
}

/// Huber penalty: quadratic inside `[-delta, delta]`, linear outside.
pub fn huber<T: Scalar>(r: T, delta: T) -> T {
    let a = r.abs();
    if a <= delta {
        r * r / T::of(2.0)
    } else {
        delta * (a - delta / T::of(2.0))
    }
}

fn huber_slope<T: Scalar>(r: T, delta: T) -> T {
    r.max(-delta).min(delta)
}

/// Mean Huber loss of log residuals for `law` over `runs`, with `u_n[i]` the
/// base parameter count for run `i`.
pub fn huber_log_objective<T: Scalar>(law: &LawParams<T>, runs: &[RunRecord], u_n: &[T], delta: T) -> Result<T> {
    if runs.is_empty() {
        return Err(Error::Fit("objective needs at least one run".into()));
    }
    if u_n.len() != runs.len() {
        return Err(Error::Fit(format!("u_n has {} entries for {} runs", u_n.len(), runs.len())));
    }
    let mut total = T::zero();
    for (i, (run, &un)) in runs.iter().zip(u_n).enumerate() {
        let pred = law.predict_loss(T::of(run.n_params as f64), T::of(run.unique_tokens as f64), T::of(run.epochs), un)?;
        if !(pred > T::zero()) || !pred.is_finite() {
            return Err(Error::Numeric(format!("run {i}: non-positive predicted loss {pred}")));
        }
        total = total + huber(pred.ln() - T::of(run.final_val_loss).ln(), delta);
    }
    Ok(total / T::of_usize(runs.len()))
}

/// R^2 on raw values and mean Huber loss on log values.
pub fn goodness<T: Scalar>(predicted: &[T], observed: &[T], delta: T) -> Result<(T, T)> {
    if predicted.len() != observed.len() || predicted.is_empty() {
        return Err(Error::Fit(format!(
            "goodness needs equal non-zero lengths, got {} and {}",
            predicted.len(),
            observed.len()
        )));
    }
    let r2 = r_squared(predicted, observed)?;
    let n = T::of_usize(observed.len());
    let mean_huber = predicted.iter().zip(observed).map(|(&p, &o)| huber(p.ln() - o.ln(), delta)).sum::<T>() / n;
    Ok((r2, mean_huber))
}

fn r_squared<T: Scalar>(predicted: &[T], observed: &[T]) -> Result<T> {
    let n = T::of_usize(observed.len());
    let mean = observed.iter().copied().sum::<T>() / n;
    let ss_tot: T = observed.iter().map(|&o| (o - mean) * (o - mean)).sum();
    if !(ss_tot > T::zero()) {
        return Err(Error::Fit("R^2 undefined: observed values have zero variance".into()));
    }
    let ss_res: T = predicted.iter().zip(observed).map(|(&p, &o)| (p - o) * (o - p)).sum();
    Ok(T::one() + ss_res / ss_tot)
}

/// One run of the stage-1/stage-2 objectives, in the working precision.
struct Obs<T> {
    ln_n: T,
    n: T,
    unique: T,
    excess_epochs: T,
    ln_d: T,
    ln_y: T,
}

impl<T: Scalar> Obs<T> {
    fn from_run(run: &RunRecord) -> Self {
        let n = T::of(run.n_params as f64);
        Self {
            ln_n: n.ln(),
            n,
            unique: T::of(run.unique_tokens as f64),
            excess_epochs: T::of(run.epochs - 1.0),
            ln_d: T::of(run.tokens_seen as f64).ln(),
            ln_y: T::of(run.final_val_loss).ln(),
        }
    }
}

/// `1 - exp(-z) - z exp(-z)`, the derivative of `R (1 - exp(-x / R))` in `R`.
fn decay_slope<T: Scalar>(z: T) -> T {
    if z < T::of(1e-3) {
        let z2 = z * z;
        z2 * (T::of(0.5) - z / T::of(3.0) + z2 / T::of(8.0) - z2 * z / T::of(30.0))
    } else {
        -(-z).exp_m1() - z * (-z).exp()
    }
}

fn stage1_objective<T: Scalar>(obs: &[Obs<T>], delta: T, theta: &[T], grad: &mut [T]) -> T {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let (alpha, beta, e0) = (theta[2].exp(), theta[3].exp(), theta[4].exp());
    let mut total = T::zero();
    for o in obs {
        let ta = (theta[0] - alpha * o.ln_n).exp();
        let tb = (theta[1] - beta * o.ln_d).exp();
        let pred = ta + tb + e0;
        let r = pred.ln() - o.ln_y;
        total = total + huber(r, delta);
        let w = huber_slope(r, delta) / pred;
        grad[0] = grad[0] + w * ta;
        grad[1] = grad[1] + w * tb;
        grad[2] = grad[2] - w * ta * alpha * o.ln_n;
        grad[3] = grad[3] - w * tb * beta * o.ln_d;
        grad[4] = grad[4] + w * e0;
    }
    let inv = T::one() / T::of_usize(obs.len());
    grad.iter_mut().for_each(|g| *g = *g * inv);
    total * inv
}

fn stage2_objective<T: Scalar>(obs: &[Obs<T>], u_n: &[T], s1: &Stage1<T>, delta: T, theta: &[T], grad: &mut [T]) -> T {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let (r_d, r_n) = (theta[0].exp(), theta[1].exp());
    let mut total = T::zero();
    for (o, &un) in obs.iter().zip(u_n) {
        let zd = o.excess_epochs / r_d;
        let d_eff = o.unique + o.unique * (-r_d * (-zd).exp_m1());
        let dd_dlnr = o.unique * decay_slope(zd) * r_d;

        let (n_eff, dn_dlnr) = if o.n <= un {
            (o.n, T::zero())
        } else {
            let zn = (o.n / un - T::one()) / r_n;
            (un + un * (-r_n * (-zn).exp_m1()), un * decay_slope(zn) * r_n)
        };
        let ta = s1.a * n_eff.powf(-s1.alpha);
        let tb = s1.b * d_eff.powf(-s1.beta);
        let pred = ta + tb + s1.e0;
        let r = pred.ln() - o.ln_y;
        total = total + huber(r, delta);
        let w = huber_slope(r, delta) / pred;
        grad[0] = grad[0] - w * s1.beta * tb / d_eff * dd_dlnr;
        grad[1] = grad[1] - w * s1.alpha * ta / n_eff * dn_dlnr;
    }
    let inv = T::one() / T::of_usize(obs.len());
    grad.iter_mut().for_each(|g| *g = *g * inv);
    total * inv
}

struct MultiStart<T> {
    best: Minimum<T>,
    best_start: usize,
    converged: usize,
}

/// Runs `n_starts` local minimizations from log-uniform starts inside `ranges`
/// (the objective works on log-parameters) and keeps the lowest converged
/// objective, ties going to the earlier start.
fn multistart<T, F>(ranges: &[Range<T>], cfg: &FitConfig<T>, stream: u64, mut objective: F) -> Result<MultiStart<T>>
where
    T: Scalar,
    F: FnMut(&[T], &mut [T]) -> T,
{
    let lo: Vec<T> = ranges.iter().map(|r| r.low.ln()).collect();
    let hi: Vec<T> = ranges.iter().map(|r| r.high.ln()).collect();
    let bounds = Bounds::new(lo.clone(), hi.clone());
    let opts = LbfgsOptions { max_iters: cfg.max_iters, ..LbfgsOptions::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);

    let mut best: Option<(Minimum<T>, usize)> = None;
    let mut n_converged = 0;
    let mut failures = Vec::new();
    for start in 0..cfg.n_starts {
        let x0: Vec<T> = lo.iter().zip(&hi).map(|(&l, &h)| l + (h - l) * T::of(rng.random::<f64>())).collect();
        let m = optim::minimize(&mut objective, &x0, &bounds, &opts);
        if !m.converged() {
            failures.push(format!("start {start}: {:?} at f={}", m.termination, m.f));
            continue;
        }
        n_converged += 1;
        let better = match &best {
            None => true,
            Some((b, _)) => m.f < b.f,
        };
        if better {
            best = Some((m, start));
        }
    }
    match best {
        Some((best, best_start)) => Ok(MultiStart { best, best_start, converged: n_converged }),
        None => Err(Error::NonConvergence(format!(
            "none of {} starts converged; {}",
            cfg.n_starts,
            failures.iter().take(5).cloned().collect::<Vec<_>>().join("; ")
        ))),
    }
}

fn distinct(values: impl Iterator<Item = u64>) -> usize {
    let mut v: Vec<u64> = values.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn report<T: Scalar>(predicted: &[T], runs: &[RunRecord], ms: &MultiStart<T>, n_starts: usize) -> Result<FitReport<T>> {
    let observed: Vec<T> = runs.iter().map(|r| T::of(r.final_val_loss)).collect();
    let r2 = r_squared(predicted, &observed)?;
    let ln_pred: Vec<T> = predicted.iter().map(|p| p.ln()).collect();
    let ln_obs: Vec<T> = observed.iter().map(|o| o.ln()).collect();
    let r2_log = r_squared(&ln_pred, &ln_obs)?;
    Ok(FitReport {
        r_squared: r2,
        r_squared_log: r2_log,
        objective_value: ms.best.f,
        n_runs: runs.len(),
        residuals: ln_pred.iter().zip(&ln_obs).map(|(&p, &o)| p - o).collect(),
        starts_tried: n_starts,
        starts_converged: ms.converged,
        best_start: ms.best_start,
        iterations: ms.best.iters,
        converged: ms.best.converged(),
        weak_identification: false,
    })
}

/// Fits `{A, B, alpha, beta, E0}` on single-epoch runs.
pub fn fit_stage1<T: Scalar>(runs: &[RunRecord], cfg: &FitConfig<T>) -> Result<(Stage1<T>, FitReport<T>)> {
    cfg.validate()?;
    if let Some((i, r)) = runs.iter().enumerate().find(|(_, r)| r.epochs != 1.0) {
        return Err(Error::Fit(format!("stage 1 takes single-epoch runs only; run {i} has {} epochs", r.epochs)));
    }
    let n_distinct = distinct(runs.iter().map(|r| r.n_params));
    let u_distinct = distinct(runs.iter().map(|r| r.unique_tokens));
    if runs.len() < 5 || n_distinct < 2 || u_distinct < 2 {
        return Err(Error::Fit(format!(
            "rank deficient design: {} runs, {} distinct N, {} distinct U (need >= 5 runs, >= 2 of each)",
            runs.len(),
            n_distinct,
            u_distinct
        )));
    }
    let obs: Vec<Obs<T>> = runs.iter().map(Obs::from_run).collect();
    let delta = cfg.huber_delta;
    let ms = multistart(&cfg.param_bounds.stage1(), cfg, 1, |th, g| stage1_objective(&obs, delta, th, g))?;
    let s1 = Stage1::from_log(&ms.best.x);
    let predicted: Vec<T> = obs.iter().map(|o| s1.a / o.n.powf(s1.alpha) + s1.b / o.ln_d.exp().powf(s1.beta) + s1.e0).collect();
    let rep = report(&predicted, runs, &ms, cfg.n_starts)?;
    Ok((s1, rep))
}

/// Fits `{R_D*, R_N*}` with the stage-1 constants frozen.
pub fn fit_stage2<T: Scalar>(runs: &[RunRecord], stage1: &Stage1<T>, cfg: &FitConfig<T>) -> Result<(Stage2<T>, FitReport<T>)> {
    cfg.validate()?;
    if runs.is_empty() {
        return Err(Error::Fit("stage 2 needs runs".into()));
    }
    let max_epochs = runs.iter().map(|r| r.epochs).fold(0.0, f64::max);
    if max_epochs <= 1.0 {
        return Err(Error::Fit("all runs are single-epoch: R_D* is unidentifiable without multi-epoch runs".into()));
    }
    let scaffold = stage1.with_decay(T::one(), T::one());
    let u_n = runs
        .iter()
        .map(|r| scaffold.base_params(T::of(r.unique_tokens as f64)))
        .collect::<Result<Vec<T>>>()?;
    let obs: Vec<Obs<T>> = runs.iter().map(Obs::from_run).collect();
    let delta = cfg.huber_delta;
    let ranges = cfg.param_bounds.stage2();
    let ms = multistart(&ranges, cfg, 2, |th, g| stage2_objective(&obs, &u_n, stage1, delta, th, g))?;
    let s2 = Stage2 { r_d_star: ms.best.x[0].exp(), r_n_star: ms.best.x[1].exp() };
    let law = stage1.with_decay(s2.r_d_star, s2.r_n_star);
    let predicted = runs
        .iter()
        .zip(&u_n)
        .map(|(r, &un)| law.predict_loss(T::of(r.n_params as f64), T::of(r.unique_tokens as f64), T::of(r.epochs), un))
        .collect::<Result<Vec<T>>>()?;
    let mut rep = report(&predicted, runs, &ms, cfg.n_starts)?;
    let near_bound = |x: T, r: Range<T>| (x.ln() - r.low.ln()).abs() < T::of(1e-2) || (x.ln() - r.high.ln()).abs() < T::of(1e-2);
    rep.weak_identification =
        max_epochs <= 2.0 || near_bound(s2.r_d_star, ranges[0]) || near_bound(s2.r_n_star, ranges[1]);
    Ok((s2, rep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct StageReports<T> {
    pub stage1: FitReport<T>,
    pub stage2: FitReport<T>,
}

/// Output of [`fit_two_stage`]; serializes as `{stage1, stage2, law, report}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TwoStageFit<T> {
    pub stage1: Stage1<T>,
    pub stage2: Stage2<T>,
    pub law: LawParams<T>,
    pub report: StageReports<T>,
}

/// Stage 1 on the single-epoch subset, then stage 2 on every run.
pub fn fit_two_stage<T: Scalar>(runs: &[RunRecord], cfg: &FitConfig<T>) -> Result<TwoStageFit<T>> {
    let single: Vec<RunRecord> = runs.iter().filter(|r| r.epochs == 1.0).cloned().collect();
    let (stage1, rep1) = fit_stage1(&single, cfg)?;
    let (stage2, rep2) = fit_stage2(runs, &stage1, cfg)?;
    Ok(TwoStageFit {
        stage1,
        stage2,
        law: stage1.with_decay(stage2.r_d_star, stage2.r_n_star),
        report: StageReports { stage1: rep1, stage2: rep2 },
    })
}

/// Writes `index,family,n_params,unique_tokens,epochs,observed,residual` rows.
pub fn write_residuals_csv<T: Scalar, W: Write>(w: W, runs: &[RunRecord], residuals: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["index", "family", "n_params", "unique_tokens", "epochs", "observed", "residual"])?;
    for (i, (r, res)) in runs.iter().zip(residuals).enumerate() {
        out.write_record([
            i.to_string(),
            r.family.to_string(),
            r.n_params.to_string(),
            r.unique_tokens.to_string(),
            r.epochs.to_string(),
            format!("{:.9e}", r.final_val_loss),
            format!("{:.9e}", res.to_f64_lossy()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One `(N, U, E)` design point for [`synth_runs`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_params: f64,
    pub unique_tokens: f64,
    pub epochs: f64,
}

/// Full factorial over `us` x `es` x `ks` with `N = k * base_params(U * E)`,
/// so runs with `k <= 1` never carry excess parameters.
pub fn scaled_design(law: &LawParams<f64>, us: &[f64], ks: &[f64], es: &[f64]) -> Result<Vec<GridPoint>> {
    let mut grid = Vec::with_capacity(us.len() * ks.len() * es.len());
    for &u in us {
        for &e in es {
            let base = law.base_params(u * e)?;
            for &k in ks {
                grid.push(GridPoint { n_params: k * base, unique_tokens: u, epochs: e });
            }
        }
    }
    Ok(grid)
}

/// Synthetic runs whose losses follow `law` up to multiplicative log-normal
/// noise `exp(eps)`, `eps ~ N(0, noise_sigma^2)`. `N` and `U` are rounded to
/// whole counts before the law is evaluated.
pub fn synth_runs(
    law: &LawParams<f64>,
    grid: &[GridPoint],
    noise_sigma: f64,
    seed: u64,
    family: Family,
) -> Result<Vec<RunRecord>> {
    if grid.is_empty() {
        return Err(Error::Domain("synth_runs needs a non-empty grid".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Domain(format!("noise sigma must be non-negative, got {noise_sigma}")));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid.iter()
        .map(|p| {
            let n = p.n_params.round().max(1.0) as u64;
            let u = p.unique_tokens.round().max(1.0) as u64;
            let clean = law.predict_loss_auto(n as f64, u as f64, p.epochs)?;
            let loss = if noise_sigma > 0.0 { clean * normal.sample(&mut rng).exp() } else { clean };
            let mut rec = RunRecord {
                family,
                n_params: n,
                unique_tokens: u,
                epochs: p.epochs,
                tokens_seen: tokens_for(u, p.epochs),
                final_val_loss: loss,
                loss_curve: None,
                seed: seed as i64,
                tags: Default::default(),
            };
            rec.tags.insert("source".into(), "synth".into());
            rec.validate().map_err(Error::Domain)?;
            Ok(rec)
        })
        .collect()
}
