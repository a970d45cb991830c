//! The two shipped applications, wired end to end: configuration structs,
//! tape recording, run modes and JSON-serializable reports.
//!
//! [`tube`] is the moving-domain benchmark — heat conduction in a disk whose
//! inner hole rotates, with the dissipation integrated over space-time as the
//! objective and the per-step mesh displacements as controls. [`pironneau`]
//! is the classic steady one: energy dissipation of Stokes flow past an
//! obstacle, differentiated and optimized through a boundary-to-volume
//! deformation pipeline.

pub mod pironneau;
pub mod tube;

use serde::Serialize;

pub use crate::deform::TraceRow;
use crate::tape::taylor::TaylorReport;

/// Wall-clock timings of the differentiation sweeps, in seconds. `None`
/// entries were not measured in the requested mode.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forward_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjoint_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adjoint_over_forward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_over_forward: Option<f64>,
}

impl Timings {
    pub fn fill_ratios(&mut self) {
        if let Some(f) = self.forward_s.filter(|f| *f > 0.0) {
            self.adjoint_over_forward = self.adjoint_s.map(|a| a / f);
            self.hessian_over_forward = self.hessian_s.map(|h| h / f);
        }
    }
}

/// Summary of a descent run for the JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct OptimizeSummary {
    pub status: String,
    pub iterations: usize,
    pub j_initial: f64,
    pub j_final: f64,
    /// Relative reduction `(j_initial - j_final) / j_initial`.
    pub reduction: f64,
    pub volume_drift: f64,
    pub barycenter_drift: f64,
    pub history: Vec<TraceRow>,
}

/// Everything one invocation produces, serialized as the report JSON. The
/// `schema` field is bumped whenever the layout changes incompatibly.
#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub schema: u32,
    pub case: String,
    pub mode: String,
    pub config: serde_json::Value,
    pub j: f64,
    /// ℓ² norm of the gradient with respect to each control, in recording
    /// order. Empty when no gradient was computed.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gradient_norms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub taylor: Option<TaylorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimize: Option<OptimizeSummary>,
    /// Absent when timing was suppressed for reproducible output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
    /// Paths of snapshot files written during the run.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
    /// Whether every verification the mode performs came out inside its
    /// tolerance band. Modes that verify nothing report `true`.
    pub passed: bool,
}

impl CaseReport {
    pub fn new(case: &str, mode: &str, config: serde_json::Value) -> Self {
        CaseReport {
            schema: 1,
            case: case.to_string(),
            mode: mode.to_string(),
            config,
            j: f64::NAN,
            gradient_norms: Vec::new(),
            taylor: None,
            optimize: None,
            timings: None,
            artifacts: Vec::new(),
            passed: true,
        }
    }

    /// Apply the standard convergence bands to a remainder table: observed
    /// rates near 1, 2 and 3 for orders 0–2 (skipping orders that were not
    /// computed).
    pub fn check_taylor(&mut self, report: &TaylorReport) {
        let bands = [(0.85, 1.15), (1.85, 2.15), (2.75, 3.25)];
        for (order, (lo, hi)) in bands.iter().enumerate() {
            if !report.residuals[order].is_empty() && !report.order_in(order, *lo, *hi) {
                self.passed = false;
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Step sizes for remainder-convergence studies: the largest step `h0` and
/// the number of halvings after it.
#[derive(Debug, Clone, Copy)]
pub struct TaylorParams {
    pub h0: f64,
    pub halvings: usize,
}

impl Default for TaylorParams {
    fn default() -> Self {
        // Suits controls that displace mesh vertices directly (the tube case
        // perturbs all N+1 step controls at once): 1e-3 keeps even the
        // accumulated distortion far from entanglement while the remainders
        // stay well above rounding.
        TaylorParams { h0: 1e-3, halvings: 3 }
    }
}

/// Run a closure and return its result together with the elapsed wall time in
/// seconds.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = std::time::Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Deterministic pseudo-random stream (SplitMix64), used to build test
/// directions that are reproducible across runs and platforms.
#[derive(Debug, Clone)]
pub struct DirectionSampler {
    state: u64,
}

impl DirectionSampler {
    pub fn new(seed: u64) -> Self {
        DirectionSampler { state: seed }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }

    /// A smooth vector field sampled at interleaved `[x0, y0, x1, y1, …]`
    /// coordinates: a short random Fourier series per component, scaled to
    /// unit sup norm. Smoothness matters — fields that alternate sign between
    /// neighboring vertices are annihilated by the solves and make remainder
    /// slopes meaningless.
    pub fn smooth_field(&mut self, coords: &[f64]) -> Vec<f64> {
        assert_eq!(coords.len() % 2, 0, "interleaved 2-d coordinates");
        let pi = std::f64::consts::PI;
        let mut terms = [[(0.0, 0.0, 0.0, 0.0, 0.0); 4]; 2];
        for comp in &mut terms {
            for term in comp.iter_mut() {
                *term = (
                    self.uniform(),
                    1.0 + (self.next_u64() % 3) as f64,
                    1.0 + (self.next_u64() % 3) as f64,
                    pi * (self.uniform() + 1.0),
                    pi * (self.uniform() + 1.0),
                );
            }
        }
        let mut out = vec![0.0; coords.len()];
        let mut sup: f64 = 0.0;
        for (i, xy) in coords.chunks_exact(2).enumerate() {
            for (c, comp) in terms.iter().enumerate() {
                let mut v = 0.0;
                for (a, kx, ky, phi, psi) in comp {
                    v += a * (kx * pi * xy[0] + phi).sin() * (ky * pi * xy[1] + psi).sin();
                }
                out[2 * i + c] = v;
                sup = sup.max(v.abs());
            }
        }
        if sup > 0.0 {
            for v in &mut out {
                *v /= sup;
            }
        }
        out
    }
}
