//! Row-normalization activations behind a common trait.
//!
//! Each variant turns a row of attention logits into a distribution and
//! knows its own vector-Jacobian product. Variants are registered by name
//! and selected at runtime through [`ActivationKind`] or a config string.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalizes one row of logits in place.
pub trait RowActivation: Sync {
    fn name(&self) -> &'static str;

    /// Replace `row` with a probability distribution over its entries.
    fn forward_row(&self, row: &mut [f64]) -> Result<()>;

    /// Vector-Jacobian product at a forward output: given the output row
    /// `p` and upstream gradient `up`, write the downstream gradient.
    fn backward_row(&self, p: &[f64], up: &[f64], dst: &mut [f64]);
}

/// Standard softmax, stabilized by row-max subtraction.
pub struct Softmax;

impl RowActivation for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward_row(&self, row: &mut [f64]) -> Result<()> {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
        Ok(())
    }

    fn backward_row(&self, p: &[f64], up: &[f64], dst: &mut [f64]) {
        let dot: f64 = p.iter().zip(up).map(|(&pi, &gi)| pi * gi).sum();
        for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(up) {
            *d = pi * (gi - dot);
        }
    }
}

/// 1.5-entmax: `p_i = max(z_i/2 - tau, 0)^2` with `tau` the unique scalar
/// making the row sum to one. Produces exact zeros, unlike softmax.
///
/// `tau` is found by bisection over `[max(z)/2 - 1, max(z)/2]`; the row sum
/// is monotone decreasing in `tau` and brackets 1 on that interval.
pub struct Entmax15;

const ENTMAX_BISECT_ITERS: usize = 60;
const ENTMAX_SUM_TOL: f64 = 1e-9;

impl Entmax15 {
    fn partial_sum(row: &[f64], tau: f64) -> f64 {
        row.iter()
            .map(|&z| {
                let t = z / 2.0 - tau;
                if t > 0.0 {
                    t * t
                } else {
                    0.0
                }
            })
            .sum()
    }
}

impl RowActivation for Entmax15 {
    fn name(&self) -> &'static str {
        "entmax15"
    }

    fn forward_row(&self, row: &mut [f64]) -> Result<()> {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut lo = mx / 2.0 - 1.0;
        let mut hi = mx / 2.0;
        for _ in 0..ENTMAX_BISECT_ITERS {
            let mid = 0.5 * (lo + hi);
            if Self::partial_sum(row, mid) < 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let tau = 0.5 * (lo + hi);
        let sum = Self::partial_sum(row, tau);
        if !(sum - 1.0).abs().is_finite() || (sum - 1.0).abs() > ENTMAX_SUM_TOL {
            return Err(Error::Numerical(format!(
                "entmax15 bisection did not converge: row sum {sum} after {ENTMAX_BISECT_ITERS} iterations"
            )));
        }
        for v in row.iter_mut() {
            let t = *v / 2.0 - tau;
            *v = if t > 0.0 { t * t } else { 0.0 };
        }
        Ok(())
    }

    fn backward_row(&self, p: &[f64], up: &[f64], dst: &mut [f64]) {
        // With s_i = sqrt(p_i) on the support and 0 elsewhere:
        // dz_i = s_i * (g_i - sum_j g_j s_j / sum_j s_j)
        let mut s_sum = 0.0;
        let mut gs_sum = 0.0;
        for (&pi, &gi) in p.iter().zip(up) {
            if pi > 0.0 {
                let si = pi.sqrt();
                s_sum += si;
                gs_sum += gi * si;
            }
        }
        debug_assert!(s_sum > 0.0, "entmax15 output with empty support");
        let ratio = if s_sum > 0.0 { gs_sum / s_sum } else { 0.0 };
        for ((d, &pi), &gi) in dst.iter_mut().zip(p).zip(up) {
            *d = if pi > 0.0 { pi.sqrt() * (gi - ratio) } else { 0.0 };
        }
    }
}

static SOFTMAX: Softmax = Softmax;
static ENTMAX15: Entmax15 = Entmax15;

/// Every registered activation, in registry order.
pub static ACTIVATIONS: &[&dyn RowActivation] = &[&SOFTMAX, &ENTMAX15];

/// Looks an activation up by its registered name.
pub fn activation_by_name(name: &str) -> Option<&'static dyn RowActivation> {
    ACTIVATIONS.iter().copied().find(|a| a.name() == name)
}

/// Config-level selector for the registered activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Softmax,
    Entmax15,
}

impl ActivationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Softmax => "softmax",
            ActivationKind::Entmax15 => "entmax15",
        }
    }

    pub fn resolve(self) -> &'static dyn RowActivation {
        activation_by_name(self.as_str()).expect("registered activation")
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ActivationKind::Softmax),
            "entmax15" => Ok(ActivationKind::Entmax15),
            other => Err(Error::Config(format!(
                "unknown activation {other:?}; expected one of: {}",
                ACTIVATIONS
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }
}
