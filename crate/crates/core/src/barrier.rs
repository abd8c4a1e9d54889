//! Barrier functions, the safe set `{x : h(x) ≥ 0}`, and sampling estimates
//! of Lipschitz constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::State;
use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(&State) -> f64 + Send + Sync>;
type BatchFn = Arc<dyn Fn(&State, &mut Vec<f64>) + Send + Sync>;

/// Default inflation applied to sampled Lipschitz ratios.
pub const LIPSCHITZ_INFLATION: f64 = 1.2;

#[derive(Clone)]
pub struct BarrierFunction {
    h: ScalarFn,
    lipschitz: f64,
    label: String,
}

impl fmt::Debug for BarrierFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierFunction")
            .field("label", &self.label)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl BarrierFunction {
    pub fn new(
        label: impl Into<String>,
        lipschitz: f64,
        h: impl Fn(&State) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let label = label.into();
        if !(lipschitz > 0.0) || !lipschitz.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "barrier `{label}` needs a positive Lipschitz constant, got {lipschitz}"
            )));
        }
        Ok(Self {
            h: Arc::new(h),
            lipschitz,
            label,
        })
    }

    pub fn value(&self, x: &State) -> f64 {
        (self.h)(x)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// A nonempty family of barriers sharing one decay rate `γ ∈ (0, 1]`.
///
/// Membership in the safe set uses the minimum over members; the filters
/// and the MPC impose one CBF constraint per member.
#[derive(Clone)]
pub struct BarrierSet {
    members: Vec<BarrierFunction>,
    gamma: f64,
    batch: Option<BatchFn>,
}

impl fmt::Debug for BarrierSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BarrierSet")
            .field("members", &self.members.len())
            .field("gamma", &self.gamma)
            .field("batched", &self.batch.is_some())
            .finish()
    }
}

impl BarrierSet {
    pub fn new(members: Vec<BarrierFunction>, gamma: f64) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParameter("barrier set must not be empty".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        Ok(Self {
            members,
            gamma,
            batch: None,
        })
    }

    /// Installs a routine that writes all member values at once, in member
    /// order. It must agree with the per-member closures.
    pub fn with_batch(mut self, batch: impl Fn(&State, &mut Vec<f64>) + Send + Sync + 'static) -> Self {
        self.batch = Some(Arc::new(batch));
        self
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        let mut out = Self::new(self.members.clone(), gamma)?;
        out.batch = self.batch.clone();
        Ok(out)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[BarrierFunction] {
        &self.members
    }

    /// Largest member Lipschitz constant; used as `L_h` in the bounds.
    pub fn lipschitz(&self) -> f64 {
        self.members.iter().map(|b| b.lipschitz).fold(0.0, f64::max)
    }

    /// Writes every member value at `x` into `out`.
    pub fn values_into(&self, x: &State, out: &mut Vec<f64>) {
        out.clear();
        match &self.batch {
            Some(batch) => batch(x, out),
            None => out.extend(self.members.iter().map(|b| b.value(x))),
        }
    }

    pub fn values(&self, x: &State) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.members.len());
        self.values_into(x, &mut out);
        out
    }

    /// Composite value `min_j h_j(x)`; nonnegative iff `x` is in the safe set.
    pub fn evaluate(&self, x: &State) -> f64 {
        self.values(x).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &State) -> bool {
        self.evaluate(x) >= 0.0
    }

    /// `h(x_next) − (1−γ)·h(x)` on the composite barrier.
    pub fn cbf_residual(&self, x: &State, x_next: &State) -> f64 {
        self.evaluate(x_next) - (1.0 - self.gamma) * self.evaluate(x)
    }

    /// Per-member residuals `h_j(x_next) − (1−γ)·h_j(x)`.
    pub fn member_residuals(&self, x: &State, x_next: &State) -> Vec<f64> {
        let now = self.values(x);
        let next = self.values(x_next);
        next.iter()
            .zip(&now)
            .map(|(hn, h)| hn - (1.0 - self.gamma) * h)
            .collect()
    }
}

/// Axis-aligned box of states.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Region {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidParameter("region bounds must have equal, nonzero length".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(h > l) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidParameter(
                "region has zero measure (every upper bound must exceed its lower bound)".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(self.hi.iter()).map(|(l, h)| rng.random_range(*l..*h)),
        )
    }

    fn clamp(&self, x: DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }
}

/// Sampled Lipschitz estimation: the largest `‖Δoutput‖ / ‖Δinput‖` over
/// `n_samples` pairs, times `inflation`.
///
/// Pairs alternate between two independent uniform draws and a uniform draw
/// plus a small local offset, so both global and local slopes are probed.
/// The pair stream depends only on `seed`, which makes the estimate
/// nondecreasing in `n_samples` for a fixed seed.
#[derive(Clone, Debug)]
pub struct LipschitzEstimator {
    pub n_samples: usize,
    pub seed: u64,
    pub inflation: f64,
}

impl Default for LipschitzEstimator {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
            inflation: LIPSCHITZ_INFLATION,
        }
    }
}

impl LipschitzEstimator {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            seed,
            ..Self::default()
        }
    }

    fn estimate_raw<T>(
        &self,
        region: &Region,
        f: impl Fn(&State) -> T,
        dist: impl Fn(&T, &T) -> f64,
    ) -> Result<f64> {
        if self.n_samples < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 sample pairs, got {}",
                self.n_samples
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let scale = (&region.hi - &region.lo) * 1e-3;
        let mut best: f64 = 0.0;
        for i in 0..self.n_samples {
            let a = region.sample(&mut rng);
            let b = if i % 2 == 0 {
                region.sample(&mut rng)
            } else {
                let offset = DVector::from_iterator(
                    region.dim(),
                    scale.iter().map(|s| rng.random_range(-1.0..1.0) * s),
                );
                region.clamp(&a + offset)
            };
            let dx = (&a - &b).norm();
            if dx <= 0.0 {
                continue;
            }
            let ratio = dist(&f(&a), &f(&b)) / dx;
            if ratio.is_finite() {
                best = best.max(ratio);
            }
        }
        Ok(best * self.inflation)
    }

    pub fn scalar(&self, region: &Region, f: impl Fn(&State) -> f64) -> Result<f64> {
        self.estimate_raw(region, f, |a, b| (a - b).abs())
    }

    pub fn vector(&self, region: &Region, f: impl Fn(&State) -> DVector<f64>) -> Result<f64> {
        self.estimate_raw(region, f, |a, b| (a - b).norm())
    }

    /// Matrix-valued maps, measured in the induced 2-norm.
    pub fn matrix(&self, region: &Region, f: impl Fn(&State) -> DMatrix<f64>) -> Result<f64> {
        self.estimate_raw(region, f, |a, b| spectral_norm(&(a - b)))
    }
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// Scalar Lipschitz estimate with the default inflation factor.
pub fn estimate_lipschitz(
    f: impl Fn(&State) -> f64,
    region: &Region,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    LipschitzEstimator::new(n_samples, seed).scalar(region, f)
}
