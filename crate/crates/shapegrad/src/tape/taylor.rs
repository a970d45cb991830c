//! Taylor remainder convergence tests.
//!
//! For a functional `J` of the controls, a direction `δ`, and a step `h`,
//! the remainders
//!
//! ```text
//! R0(h) = |J(m + hδ) − J(m)|
//! R1(h) = |J(m + hδ) − J(m) − h·⟨∇J, δ⟩|
//! R2(h) = |J(m + hδ) − J(m) − h·⟨∇J, δ⟩ − h²/2·⟨Hδ, δ⟩|
//! ```
//!
//! must shrink at first, second, and third order as `h` halves. Observed
//! rates are `log2(R(h)/R(h/2))`; a remainder at rounding level is reported
//! as NaN with a note instead of a meaningless rate.

use super::ReducedFunctional;
use crate::error::Result;
use crate::linalg::dot;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct TaylorReport {
    /// Step sizes, largest first.
    pub steps: Vec<f64>,
    /// Remainders per step, orders 0..=2.
    pub residuals: [Vec<f64>; 3],
    /// Observed convergence rates between consecutive steps (NaN at
    /// rounding level).
    pub rates: [Vec<f64>; 3],
    /// Mean observed rate per order, ignoring NaN entries; NaN when every
    /// sample sat at rounding level.
    pub mean_rates: [f64; 3],
    pub notes: Vec<String>,
    /// Base value, directional derivative, and Hessian quadratic term.
    pub value: f64,
    pub slope: f64,
    pub curvature: f64,
}

impl TaylorReport {
    /// Does the mean observed rate of the given order lie in `[lo, hi]`?
    /// Remainders that vanished to rounding level count as converged; an
    /// order that was never computed does not.
    pub fn order_in(&self, order: usize, lo: f64, hi: f64) -> bool {
        if self.residuals[order].is_empty() {
            return false;
        }
        let r = self.mean_rates[order];
        r.is_nan() || (lo <= r && r <= hi)
    }
}

/// `base + h * dir`, one vector per control.
pub fn perturbed(base: &[Vec<f64>], dirs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    base.iter()
        .zip(dirs)
        .map(|(b, d)| b.iter().zip(d).map(|(x, y)| x + h * y).collect())
        .collect()
}

/// Run remainder tests of orders 0–2 with `halvings + 1` step sizes starting
/// at `h0`. The tape is left replayed at the base point.
pub fn taylor_test(
    rf: &ReducedFunctional,
    base: &[Vec<f64>],
    dirs: &[Vec<f64>],
    h0: f64,
    halvings: usize,
) -> Result<TaylorReport> {
    taylor_test_orders(rf, base, dirs, h0, halvings, 2)
}

/// Like [`taylor_test`] but stopping at `max_order` (1 skips the Hessian
/// action, leaving the order-2 rows empty).
pub fn taylor_test_orders(
    rf: &ReducedFunctional,
    base: &[Vec<f64>],
    dirs: &[Vec<f64>],
    h0: f64,
    halvings: usize,
    max_order: usize,
) -> Result<TaylorReport> {
    let value = rf.evaluate(base)?;
    let grad = rf.gradient()?;
    let slope: f64 = grad.iter().zip(dirs).map(|(g, d)| dot(g, d)).sum();
    let curvature = if max_order >= 2 {
        let hess = rf.hessian_action(dirs)?;
        hess.iter().zip(dirs).map(|(h, d)| dot(h, d)).sum()
    } else {
        0.0
    };

    let mut steps = Vec::with_capacity(halvings + 1);
    let mut residuals = [Vec::new(), Vec::new(), Vec::new()];
    let mut h = h0;
    for _ in 0..=halvings {
        let jh = rf.evaluate(&perturbed(base, dirs, h))?;
        residuals[0].push((jh - value).abs());
        residuals[1].push((jh - value - h * slope).abs());
        if max_order >= 2 {
            residuals[2].push((jh - value - h * slope - 0.5 * h * h * curvature).abs());
        }
        steps.push(h);
        h *= 0.5;
    }
    rf.evaluate(base)?;

    let floor = 1e-15 * value.abs().max(1.0);
    let mut rates: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut notes = Vec::new();
    for order in 0..3 {
        for k in 1..residuals[order].len() {
            let (coarse, fine) = (residuals[order][k - 1], residuals[order][k]);
            if coarse < floor || fine < floor {
                rates[order].push(f64::NAN);
                if notes.len() < 3 {
                    notes.push(format!(
                        "order-{order} remainder at rounding level ({fine:.2e}); rate not observable"
                    ));
                }
            } else {
                rates[order].push((coarse / fine).log2());
            }
        }
    }
    let mean_rates = std::array::from_fn(|order| {
        let finite: Vec<f64> = rates[order].iter().copied().filter(|r| r.is_finite()).collect();
        if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        }
    });

    Ok(TaylorReport {
        steps,
        residuals,
        rates,
        mean_rates,
        notes,
        value,
        slope,
        curvature,
    })
}
