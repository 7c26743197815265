//! Power-law step-size, penalty and regularization schedules.

use crate::error::{Error, Result};

/// Five sequences `base / (k+1)^exponent` for `ζ, α, β, w, τ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSet {
    pub zeta0: f64,
    pub alpha0: f64,
    pub beta0: f64,
    pub w0: f64,
    pub tau0: f64,
    pub c_zeta: f64,
    pub c_alpha: f64,
    pub c_beta: f64,
    pub c_w: f64,
    pub c_tau: f64,
}

/// Values of every schedule at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub zeta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub w: f64,
    pub tau: f64,
}

impl ScheduleSet {
    /// Exponents `(9/10, 1/2, 1/2, 3/20, 1/20)`: attenuating regularization.
    pub fn decaying(zeta0: f64, alpha0: f64, beta0: f64, w0: f64, tau0: f64) -> Self {
        Self {
            zeta0,
            alpha0,
            beta0,
            w0,
            tau0,
            c_zeta: 0.9,
            c_alpha: 0.5,
            c_beta: 0.5,
            c_w: 0.15,
            c_tau: 0.05,
        }
    }

    /// Exponents `(2/3, 1/2, 1/2, 1/6, 0)`: constant regularization weight.
    pub fn fixed_tau(zeta0: f64, alpha0: f64, beta0: f64, w0: f64, tau0: f64) -> Self {
        Self {
            zeta0,
            alpha0,
            beta0,
            w0,
            tau0,
            c_zeta: 2.0 / 3.0,
            c_alpha: 0.5,
            c_beta: 0.5,
            c_w: 1.0 / 6.0,
            c_tau: 0.0,
        }
    }

    /// Positive bases and nonnegative exponents; with `strict`, also
    /// `ζ_0 ≤ α_0 ≤ β_0 ≤ w_0 ≤ τ_0 ≤ 1`.
    pub fn validate(&self, strict: bool) -> Result<()> {
        let bases = [
            ("zeta0", self.zeta0),
            ("alpha0", self.alpha0),
            ("beta0", self.beta0),
            ("w0", self.w0),
            ("tau0", self.tau0),
        ];
        for (name, v) in bases {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("schedule base {name} = {v} must be finite and nonnegative")));
            }
        }
        if !(self.w0 > 0.0) || !(self.tau0 > 0.0) {
            return Err(Error::InvalidArgument("w0 and tau0 must be positive".into()));
        }
        let exps = [
            ("c_zeta", self.c_zeta),
            ("c_alpha", self.c_alpha),
            ("c_beta", self.c_beta),
            ("c_w", self.c_w),
            ("c_tau", self.c_tau),
        ];
        for (name, v) in exps {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("schedule exponent {name} = {v} must be nonnegative")));
            }
        }
        if strict {
            let chain = [self.zeta0, self.alpha0, self.beta0, self.w0, self.tau0, 1.0];
            if chain.windows(2).any(|p| p[0] > p[1]) {
                return Err(Error::InvalidArgument(format!(
                    "strict mode requires zeta0 <= alpha0 <= beta0 <= w0 <= tau0 <= 1, got {:?}",
                    &chain[..5]
                )));
            }
        }
        Ok(())
    }

    pub fn at(&self, k: u64) -> StepSizes {
        let n = (k as f64) + 1.0;
        let p = |base: f64, c: f64| if c == 0.0 { base } else { base / n.powf(c) };
        StepSizes {
            zeta: p(self.zeta0, self.c_zeta),
            alpha: p(self.alpha0, self.c_alpha),
            beta: p(self.beta0, self.c_beta),
            w: p(self.w0, self.c_w),
            tau: p(self.tau0, self.c_tau),
        }
    }

    /// Largest regularization weight the schedule ever takes.
    pub fn tau_max(&self) -> f64 {
        self.tau0
    }
}

/// `(ζ_k, α_k, β_k, w_k, τ_k)`.
pub fn schedule_at(s: &ScheduleSet, k: u64) -> StepSizes {
    s.at(k)
}
