//! The data-constrained scaling law.
//!
//! Repeated epochs and excess parameters are discounted with an
//! exponential-decay form before entering a Chinchilla-style loss
//! `A / N'^alpha + B / D'^beta + E0`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scalar::Scalar;

/// Fitted constants of one family's law. Losses are in nats per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct LawParams<T> {
    #[serde(rename = "A")]
    pub a: T,
    #[serde(rename = "B")]
    pub b: T,
    pub alpha: T,
    pub beta: T,
    #[serde(rename = "E0")]
    pub e0: T,
    pub r_d_star: T,
    pub r_n_star: T,
}

/// Compute-optimal split of a FLOPs budget under `C = 6 N D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Allocation<T> {
    pub n_opt: T,
    pub d_opt: T,
    pub flops: T,
}

fn positive<T: Scalar>(x: T) -> bool {
    x.is_finite() && x > T::zero()
}

/// Effective unique data `U + U R (1 - exp(-(E - 1) / R))`.
pub fn effective_data<T: Scalar>(unique: T, epochs: T, r_d_star: T) -> Result<T> {
    if !positive(unique) || !positive(r_d_star) {
        return domain(format!("effective_data needs U > 0 and R_D* > 0, got U={unique}, R={r_d_star}"));
    }
    if !(epochs >= T::one()) {
        return domain(format!("effective_data needs E >= 1, got {epochs}"));
    }
    Ok(unique + unique * decayed_excess(epochs - T::one(), r_d_star))
}

/// `R (1 - exp(-x / R))`, accurate for very large `R`.
fn decayed_excess<T: Scalar>(excess: T, r: T) -> T {
    -r * (-excess / r).exp_m1()
}

/// Geometric-sum effective data `U (1 - (1 - delta)^E) / delta` for integer epochs.
pub fn effective_data_geometric<T: Scalar>(unique: T, epochs: u32, delta: T) -> Result<T> {
    if epochs < 1 {
        return domain("effective_data_geometric needs E >= 1");
    }
    if !(delta > T::zero() && delta < T::one()) {
        return domain(format!("decay factor must lie in (0, 1), got {delta}"));
    }
    let keep = T::one() - delta;
    Ok(unique * (T::one() - keep.powi(epochs as i32)) / delta)
}

/// Per-repetition decay factor implied by `R_D*`.
pub fn delta_from_r_d_star<T: Scalar>(r_d_star: T) -> T {
    T::one() / (T::one() + r_d_star)
}

/// Effective parameters: the mirror of [`effective_data`] with `N / U_N`
/// playing the role of epochs. Parameters up to `U_N` count in full.
pub fn effective_params<T: Scalar>(n: T, u_n: T, r_n_star: T) -> Result<T> {
    if !positive(n) || !positive(u_n) || !positive(r_n_star) {
        return domain(format!("effective_params needs positive inputs, got N={n}, U_N={u_n}, R={r_n_star}"));
    }
    if n <= u_n {
        return Ok(n);
    }
    Ok(u_n + u_n * decayed_excess(n / u_n - T::one(), r_n_star))
}

/// `D' / (U E)`: how much of the raw token count still counts as fresh data.
pub fn effective_fraction<T: Scalar>(unique: T, epochs: T, r_d_star: T) -> Result<T> {
    Ok(effective_data(unique, epochs, r_d_star)? / (unique * epochs))
}

impl<T: Scalar> LawParams<T> {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("A", self.a),
            ("B", self.b),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("E0", self.e0),
            ("r_d_star", self.r_d_star),
            ("r_n_star", self.r_n_star),
        ];
        for (name, v) in fields {
            if !positive(v) {
                return domain(format!("law parameter {name} must be finite and positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Decay factor per repeated epoch.
    pub fn delta(&self) -> T {
        delta_from_r_d_star(self.r_d_star)
    }

    pub fn cast<U: Scalar>(&self) -> LawParams<U> {
        let c = |x: T| U::of(x.to_f64_lossy());
        LawParams {
            a: c(self.a),
            b: c(self.b),
            alpha: c(self.alpha),
            beta: c(self.beta),
            e0: c(self.e0),
            r_d_star: c(self.r_d_star),
            r_n_star: c(self.r_n_star),
        }
    }

    /// Single-epoch Chinchilla loss with no repetition discount.
    pub fn single_epoch_loss(&self, n: T, d: T) -> T {
        self.a / n.powf(self.alpha) + self.b / d.powf(self.beta) + self.e0
    }

    /// Loss with both effective quantities, for an explicit `U_N`.
    pub fn predict_loss(&self, n: T, unique: T, epochs: T, u_n: T) -> Result<T> {
        let n_eff = effective_params(n, u_n, self.r_n_star)?;
        let d_eff = effective_data(unique, epochs, self.r_d_star)?;
        Ok(self.a / n_eff.powf(self.alpha) + self.b / d_eff.powf(self.beta) + self.e0)
    }

    /// [`predict_loss`](Self::predict_loss) with `U_N` taken from [`base_params`](Self::base_params).
    pub fn predict_loss_auto(&self, n: T, unique: T, epochs: T) -> Result<T> {
        let u_n = self.base_params(unique)?;
        self.predict_loss(n, unique, epochs, u_n)
    }

    /// `G = (alpha A / (beta B))^(1 / (alpha + beta))`.
    fn allocation_scale(&self) -> Result<T> {
        let sum = self.alpha + self.beta;
        if !(sum.abs() > T::zero()) {
            return domain("alpha + beta must be non-zero");
        }
        let g = (self.alpha * self.a / (self.beta * self.b)).powf(T::one() / sum);
        if !positive(g) {
            return Err(Error::Numeric(format!("allocation scale is not finite: {g}")));
        }
        Ok(g)
    }

    /// Minimizes the single-epoch loss subject to `C = 6 N D`.
    pub fn optimal_allocation(&self, flops: T) -> Result<Allocation<T>> {
        if !positive(flops) {
            return domain(format!("compute budget must be positive, got {flops}"));
        }
        let g = self.allocation_scale()?;
        let budget = flops / T::of(6.0);
        let n_opt = g * budget.powf(self.beta / (self.alpha + self.beta));
        let d_opt = budget / n_opt;
        if !positive(n_opt) || !positive(d_opt) {
            return Err(Error::Numeric(format!("allocation overflowed at C = {flops}")));
        }
        Ok(Allocation { n_opt, d_opt, flops })
    }

    /// Compute-optimal parameter count `U_N` for `unique` tokens seen once:
    /// `G (G U)^(beta / alpha)`.
    pub fn base_params(&self, unique: T) -> Result<T> {
        if !positive(unique) {
            return domain(format!("unique tokens must be positive, got {unique}"));
        }
        let g = self.allocation_scale()?;
        let u_n = g * (g * unique).powf(self.beta / self.alpha);
        if !positive(u_n) {
            return Err(Error::Numeric(format!("U_N is not finite for U = {unique}")));
        }
        Ok(u_n)
    }
}
