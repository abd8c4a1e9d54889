//! Closed-form disturbance tolerances for the local filter and the remote
//! MPC-CBF, and the comparison between them.
//!
//! With `L_d = L_f + L_g·ū`:
//!
//! ```text
//! w̄_l       = (1−γ)·η / L_h
//! G(τ, l)   = L_d^l · Σ_{i=1..τ} L_d^(i−1) + Σ_{j=1..l} L_d^(j−1)
//! w̄_r(τ, l) = (1−γ)^l · η / (L_h · G(τ, l))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceInputs {
    /// Barrier margin η at the state of interest.
    pub h_value: f64,
    pub gamma: f64,
    pub l_h: f64,
    pub l_f: f64,
    pub l_g: f64,
    pub u_max: f64,
    pub tau: usize,
    pub horizon: usize,
}

impl ToleranceInputs {
    pub fn new(h_value: f64, gamma: f64, l_h: f64, l_f: f64, l_g: f64, u_max: f64, tau: usize, horizon: usize) -> Result<Self> {
        let t = Self {
            h_value,
            gamma,
            l_h,
            l_f,
            l_g,
            u_max,
            tau,
            horizon,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.h_value, self.gamma, self.l_h, self.l_f, self.l_g, self.u_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("tolerance inputs must be finite".into()));
        }
        if self.h_value < 0.0 {
            return Err(Error::InvalidParameter(format!("barrier margin {} is negative", self.h_value)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.l_h <= 0.0 {
            return Err(Error::InvalidParameter(format!("L_h {} must be positive", self.l_h)));
        }
        if self.l_f < 0.0 || self.l_g < 0.0 || self.u_max <= 0.0 {
            return Err(Error::InvalidParameter("need L_f ≥ 0, L_g ≥ 0, u_max > 0".into()));
        }
        if self.l_d() <= 0.0 {
            return Err(Error::InvalidParameter("L_f + L_g·u_max must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Closed-loop Lipschitz constant `L_f + L_g·ū`.
    pub fn l_d(&self) -> f64 {
        self.l_f + self.l_g * self.u_max
    }

    pub fn with_tau(self, tau: usize) -> Self {
        Self { tau, ..self }
    }

    pub fn with_margin(self, h_value: f64) -> Self {
        Self { h_value, ..self }
    }
}

/// `Σ_{i=1..n} L_d^(i−1)`; zero for `n = 0`.
fn geometric_sum(n: usize, l_d: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..n {
        sum += term;
        term *= l_d;
    }
    sum
}

/// Part of `G(τ, l)` contributed by the prediction error, `L_d^l · Σ_{i=1..τ} L_d^(i−1)`.
fn delay_gain(tau: usize, l: usize, l_d: f64) -> f64 {
    l_d.powi(l as i32) * geometric_sum(tau, l_d)
}

/// Local-filter tolerance `(1−γ)·η / L_h`.
pub fn local_tolerance(t: &ToleranceInputs) -> f64 {
    (1.0 - t.gamma) * t.h_value / t.l_h
}

/// Error-propagation gain `G(τ, l)`. `l` must be at least 1.
pub fn gain_g(tau: usize, l: usize, l_d: f64) -> f64 {
    assert!(l >= 1, "gain_g needs l ≥ 1");
    delay_gain(tau, l, l_d) + geometric_sum(l, l_d)
}

/// Remote MPC-CBF tolerance for horizon step `l`.
pub fn remote_tolerance(t: &ToleranceInputs, l: usize) -> f64 {
    let numerator = (1.0 - t.gamma).powi(l as i32) * t.h_value;
    numerator / (t.l_h * gain_g(t.tau, l, t.l_d()))
}

/// Binding remote tolerance: the minimum over `l = 1..=N`.
pub fn remote_tolerance_horizon(t: &ToleranceInputs) -> f64 {
    (1..=t.horizon)
        .map(|l| remote_tolerance(t, l))
        .fold(f64::INFINITY, f64::min)
}

/// Worst-case predictor error after `τ` steps of disturbances bounded by `w_bar`.
pub fn prediction_error_bound(t: &ToleranceInputs, w_bar: f64) -> f64 {
    w_bar * geometric_sum(t.tau, t.l_d())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropositionReport {
    /// `w̄_r(0, 1) == w̄_l`, bit for bit.
    pub equal_without_delay: bool,
    /// `w̄_r(0, l) ≤ w̄_l` for every `l ≤ N`.
    pub remote_below_local: bool,
    /// For `τ > 0`: `w̄_r(τ, l) < w̄_r(0, l) ≤ w̄_l` for every `l ≤ N`.
    pub delay_strictly_shrinks: bool,
}

impl PropositionReport {
    pub fn all(&self) -> bool {
        self.equal_without_delay && self.remote_below_local && self.delay_strictly_shrinks
    }
}

/// Evaluates the three architectural comparison clauses.
///
/// Floating-point rounding is monotone, so the non-strict comparisons are
/// checked on the evaluated formulas directly. The strict one is decided on
/// the algebra: `w̄_r(τ, l) < w̄_r(0, l)` iff the numerator `(1−γ)^l·η` is
/// positive and the delay term of `G` is positive. With a zero numerator
/// both sides vanish and the clause holds trivially.
pub fn check_proposition(t: &ToleranceInputs) -> PropositionReport {
    let w_l = local_tolerance(t);
    let undelayed = t.with_tau(0);
    let equal_without_delay = remote_tolerance(&undelayed, 1) == w_l;
    let remote_below_local = (1..=t.horizon).all(|l| remote_tolerance(&undelayed, l) <= w_l);
    let delay_strictly_shrinks = t.tau == 0
        || (1..=t.horizon).all(|l| {
            let delayed = remote_tolerance(t, l);
            let base = remote_tolerance(&undelayed, l);
            let numerator = (1.0 - t.gamma).powi(l as i32) * t.h_value;
            let strict = numerator == 0.0 || (delay_gain(t.tau, l, t.l_d()) > 0.0 && delayed <= base);
            strict && base <= w_l
        });
    PropositionReport {
        equal_without_delay,
        remote_below_local,
        delay_strictly_shrinks,
    }
}

/// One row per horizon step plus the binding value, as printed by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToleranceTable {
    pub inputs: ToleranceInputs,
    pub l_d: f64,
    pub local: f64,
    pub remote: Vec<f64>,
    pub binding: f64,
    pub proposition: PropositionReport,
}

impl ToleranceTable {
    pub fn new(t: &ToleranceInputs) -> Self {
        Self {
            inputs: *t,
            l_d: t.l_d(),
            local: local_tolerance(t),
            remote: (1..=t.horizon).map(|l| remote_tolerance(t, l)).collect(),
            binding: remote_tolerance_horizon(t),
            proposition: check_proposition(t),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(h: f64, gamma: f64, l_h: f64, l_d: f64, tau: usize, n: usize) -> ToleranceInputs {
        ToleranceInputs::new(h, gamma, l_h, l_d, 0.0, 1.0, tau, n).unwrap()
    }

    #[test]
    fn local_examples() {
        assert_eq!(local_tolerance(&inputs(1.0, 0.5, 2.0, 1.0, 0, 1)), 0.25);
        assert_eq!(local_tolerance(&inputs(0.0, 0.5, 2.0, 1.0, 0, 1)), 0.0);
        assert_eq!(local_tolerance(&inputs(3.0, 1.0, 2.0, 1.0, 0, 1)), 0.0);
    }

    #[test]
    fn gain_examples() {
        for l_d in [0.3, 1.0, 7.0] {
            assert_eq!(gain_g(0, 1, l_d), 1.0);
        }
        assert_eq!(gain_g(1, 1, 2.0), 3.0);
        assert_eq!(gain_g(0, 2, 1.0), 2.0);
    }

    /// Direct double sum, written independently of the implementation.
    fn gain_oracle(tau: usize, l: usize, l_d: f64) -> f64 {
        let delay: f64 = (1..=tau).map(|i| l_d.powi(i as i32 - 1)).sum();
        let horizon: f64 = (1..=l).map(|j| l_d.powi(j as i32 - 1)).sum();
        l_d.powi(l as i32) * delay + horizon
    }

    #[test]
    fn gain_matches_double_sum() {
        for tau in 0..8 {
            for l in 1..6 {
                for l_d in [0.5, 1.0, 1.7] {
                    let g = gain_g(tau, l, l_d);
                    let o = gain_oracle(tau, l, l_d);
                    assert!((g - o).abs() <= 1e-12 * o, "{tau} {l} {l_d}");
                }
            }
        }
    }

    #[test]
    fn remote_examples() {
        let t = inputs(1.0, 0.5, 1.0, 1.0, 0, 1);
        assert_eq!(remote_tolerance(&t, 1), local_tolerance(&t));
        let t = inputs(1.0, 0.5, 1.0, 1.0, 2, 1);
        assert!((remote_tolerance(&t, 1) - 0.5 / 3.0).abs() < 1e-15);
        let t = inputs(1.0, 0.5, 1.0, 2.0, 0, 2);
        assert!((remote_tolerance(&t, 2) - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn horizon_binding_is_last_step_when_expanding() {
        for l_d in [1.0, 1.3, 2.5] {
            for n in 1..7 {
                let t = inputs(0.7, 0.2, 1.5, l_d, 3, n);
                let per_step: Vec<f64> = (1..=n).map(|l| remote_tolerance(&t, l)).collect();
                assert!(per_step.windows(2).all(|w| w[1] < w[0]));
                assert_eq!(remote_tolerance_horizon(&t), remote_tolerance(&t, n));
            }
        }
        let t = inputs(0.7, 0.2, 1.5, 1.0, 3, 1);
        assert_eq!(remote_tolerance_horizon(&t), remote_tolerance(&t, 1));
    }

    #[test]
    fn prediction_error_examples() {
        assert_eq!(prediction_error_bound(&inputs(1.0, 0.5, 1.0, 1.0, 0, 1), 0.1), 0.0);
        let b = prediction_error_bound(&inputs(1.0, 0.5, 1.0, 1.0, 3, 1), 0.1);
        assert!((b - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unit_gamma_is_degenerate() {
        let t = inputs(2.0, 1.0, 1.0, 1.5, 4, 5);
        let table = ToleranceTable::new(&t);
        assert_eq!(table.local, 0.0);
        assert!(table.remote.iter().all(|&w| w == 0.0));
        assert!(table.proposition.all());
    }

    #[test]
    fn construction_errors() {
        assert!(ToleranceInputs::new(1.0, 0.5, 0.0, 1.0, 0.0, 1.0, 0, 1).is_err());
        assert!(ToleranceInputs::new(1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0, 1).is_err());
        assert!(ToleranceInputs::new(1.0, 0.5, 1.0, 0.0, 0.0, 1.0, 0, 1).is_err());
        assert!(ToleranceInputs::new(-1.0, 0.5, 1.0, 1.0, 0.0, 1.0, 0, 1).is_err());
        assert!(ToleranceInputs::new(1.0, 0.5, 1.0, 1.0, 0.0, 1.0, 0, 0).is_err());
        assert!(ToleranceInputs::new(f64::NAN, 0.5, 1.0, 1.0, 0.0, 1.0, 0, 1).is_err());
    }

    /// Predictor error of `x⁺ = a·x + u + w` against its nominal rollout.
    #[test]
    fn prediction_error_bound_holds_on_contraction() {
        use rand::{Rng, SeedableRng};
        let a = 0.9;
        let w_bar = 0.05;
        let tau = 6;
        let t = ToleranceInputs::new(1.0, 0.5, 1.0, a, 0.0, 1.0, tau, 1).unwrap();
        let bound = prediction_error_bound(&t, w_bar);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x0: f64 = rng.random_range(-1.0..1.0);
            let (mut x, mut xhat) = (x0, x0);
            for _ in 0..tau {
                let u: f64 = rng.random_range(-1.0..1.0);
                let w: f64 = rng.random_range(-w_bar..=w_bar);
                x = a * x + u + w;
                xhat = a * xhat + u;
            }
            assert!((x - xhat).abs() <= bound + 1e-15);
        }
    }

    fn arb_inputs() -> impl Strategy<Value = ToleranceInputs> {
        (1e-3..10.0f64, 1e-3..=1.0f64, 1e-2..10.0f64, 0.0..3.0f64, 0.0..3.0f64, 1e-2..5.0f64, 0usize..11, 1usize..9)
            .prop_filter("L_d > 0", |(_, _, _, f, g, u, _, _)| f + g * u > 0.0)
            .prop_map(|(h, gamma, l_h, l_f, l_g, u, tau, n)| ToleranceInputs::new(h, gamma, l_h, l_f, l_g, u, tau, n).unwrap())
    }

    proptest! {
        #[test]
        fn proposition_holds(t in arb_inputs()) {
            prop_assert!(check_proposition(&t).all());
        }

        #[test]
        fn delay_adds_gain(tau in 1usize..12, l in 1usize..9, l_d in 1e-3..5.0f64) {
            // The excess can sit below one ulp of the sum for tiny L_d, so
            // it is checked on its own.
            prop_assert!(delay_gain(tau, l, l_d) > 0.0);
            prop_assert!(gain_g(tau, l, l_d) >= geometric_sum(l, l_d));
            if l_d >= 0.5 {
                prop_assert!(gain_g(tau, l, l_d) > geometric_sum(l, l_d));
            }
        }

        #[test]
        fn remote_decreases_in_delay(t in arb_inputs()) {
            prop_assume!(t.gamma < 1.0 && t.h_value > 0.0);
            for l in 1..=t.horizon {
                let now = remote_tolerance(&t, l);
                let later = remote_tolerance(&t.with_tau(t.tau + 1), l);
                prop_assert!(later <= now);
                if gain_g(t.tau + 1, l, t.l_d()) > gain_g(t.tau, l, t.l_d()) {
                    prop_assert!(later < now, "l={} {} !< {}", l, later, now);
                }
            }
        }
    }
}
