//! Energy dissipation of Stokes flow past an obstacle: the steady shape
//! optimization benchmark.
//!
//! A unit-square channel holds a circular obstacle. Flow enters on the left
//! with the profile `(sin(π y), 0)`, sticks to the walls and the obstacle,
//! and leaves freely on the right. The objective is the dissipated energy
//! `∫ ∇u : ∇u dx` plus quadratic penalties that hold the obstacle's volume
//! and barycenter near their initial values — without them the optimizer
//! would simply shrink the obstacle away.
//!
//! The control parameterizes the domain in one of two ways:
//!
//! * [`Pipeline::RieszDescent`]: the control is a volumetric CG1 displacement
//!   applied to the mesh directly. Gradients come out as dual vectors on the
//!   whole mesh and a [`RieszMap`] smooths them into descent directions.
//! * [`Pipeline::ThroughDeformation`]: the control is a force density on the
//!   obstacle boundary. It is scattered into the volume, extended by a
//!   stiffness-graded elasticity solve, and the resulting displacement moves
//!   the mesh — all recorded, so the gradient with respect to the boundary
//!   force differentiates through the extension itself.
//!
//! Both record the same Stokes solve and objective on the moved mesh; they
//! differ only in what stands between the control and the mesh coordinates.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use super::{
    l2_norm, timed, CaseReport, DirectionSampler, OptimizeSummary, TaylorParams, Timings,
};
use crate::deform::{
    elasticity_extend, optimize_descent, solve_lame_field, trace_csv, transfer_from_boundary,
    DescentOptions, DescentResult, DescentStatus, RieszMap,
};
use crate::error::{Error, Result};
use crate::fem::{BcValue, DirichletBC, FEFunction, FESpace, NewtonOptions};
use crate::forms::{
    coef_split, div, dot, grad, inner, mul, scalar, sin, test_split, vec2, x, Tensor,
};
use crate::mesh::generate::channel_with_obstacle;
use crate::mesh::{extract_boundary, vtk::write_vtk, BoundaryMesh, Mesh};
use crate::tape::taylor::{taylor_test_orders, TaylorReport};
use crate::tape::{Control, RawVec, ReducedFunctional, Tape, TapeScalar};

/// Boundary marker of the left edge (Dirichlet inflow profile).
pub const INFLOW_TAG: i32 = 1;
/// Boundary marker of the right edge (do-nothing outflow).
pub const OUTFLOW_TAG: i32 = 2;
/// Boundary marker of the top and bottom edges (no-slip).
pub const WALLS_TAG: i32 = 3;
/// Boundary marker of the obstacle (no-slip, and the design boundary).
pub const OBSTACLE_TAG: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    RieszDescent,
    ThroughDeformation,
}

impl FromStr for Pipeline {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "riesz-descent" => Ok(Pipeline::RieszDescent),
            "through-deformation" => Ok(Pipeline::ThroughDeformation),
            other => Err(format!(
                "unknown pipeline '{other}' (riesz-descent|through-deformation)"
            )),
        }
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::RieszDescent => "riesz-descent",
            Pipeline::ThroughDeformation => "through-deformation",
        })
    }
}

/// Inner product used to represent riesz-descent gradients. The
/// through-deformation pipeline always uses the boundary mass matrix — its
/// control already lives on the design boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RieszKind {
    L2,
    H1,
    Elasticity,
}

impl FromStr for RieszKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "l2" => Ok(RieszKind::L2),
            "h1" => Ok(RieszKind::H1),
            "elasticity" => Ok(RieszKind::Elasticity),
            other => Err(format!("unknown riesz map '{other}' (l2|h1|elasticity)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PironneauConfig {
    pub pipeline: Pipeline,
    /// Volume penalty weight. The default is tuned so the descent cannot buy
    /// energy by shrinking the obstacle: the volume equilibrates where the
    /// energy's volume slope meets `2α·ΔV`, which keeps the drift under half
    /// a percent while still allowing the full shape improvement.
    pub alpha: f64,
    /// Barycenter penalty weight.
    pub beta: f64,
    /// Rays from the obstacle center (the channel generator makes
    /// `2 · n_phi · n_r` cells). Must be a multiple of 8.
    pub n_phi: usize,
    pub n_r: usize,
    pub center: [f64; 2],
    pub radius: f64,
    /// Inner product for riesz-descent optimization.
    pub riesz: RieszKind,
}

impl Default for PironneauConfig {
    fn default() -> Self {
        PironneauConfig {
            pipeline: Pipeline::ThroughDeformation,
            alpha: 6e5,
            beta: 1e4,
            n_phi: 64,
            n_r: 16,
            center: [0.5, 0.5],
            radius: 0.13,
            riesz: RieszKind::H1,
        }
    }
}

impl PironneauConfig {
    /// Step sizes that suit the pipeline: a boundary force reaches the mesh
    /// through the stiff extension (μ = 500 at the obstacle), so its steps
    /// can be three orders of magnitude larger than a raw displacement's.
    pub fn default_taylor(&self) -> TaylorParams {
        match self.pipeline {
            Pipeline::RieszDescent => TaylorParams::default(),
            Pipeline::ThroughDeformation => TaylorParams { h0: 0.1, halvings: 3 },
        }
    }
}

/// A fully recorded Pironneau problem: the reduced functional plus the
/// scalar handles needed to report penalties and drift.
pub struct PironneauProblem {
    pub rf: ReducedFunctional,
    pub mesh: Mesh,
    /// The design boundary chain (through-deformation only).
    pub boundary: Option<BoundaryMesh>,
    /// Taylor–Hood solution (velocity block 0, pressure block 1), live
    /// during replay.
    pub state: FEFunction,
    pub state_space: FESpace,
    /// Obstacle volume on the live mesh, as recorded quantities: reading
    /// [`TapeScalar::value`] after a replay gives the value at that point.
    pub volume: TapeScalar,
    pub barycenter: [TapeScalar; 2],
    /// Penalty baselines, captured at recording time (zero control).
    pub volume0: f64,
    pub barycenter0: [f64; 2],
    /// Mesh coordinates at recording time.
    pub initial_coords: Vec<f64>,
    pub config: PironneauConfig,
}

/// Record the problem on the standard channel mesh.
pub fn build(config: &PironneauConfig) -> Result<PironneauProblem> {
    let mesh = channel_with_obstacle(config.n_phi, config.n_r, config.center, config.radius)?;
    build_on_mesh(config, &mesh)
}

/// Record the problem on a caller-supplied channel mesh with the standard
/// tags. Split out so tests can use coarse meshes.
pub fn build_on_mesh(config: &PironneauConfig, mesh: &Mesh) -> Result<PironneauProblem> {
    let initial_coords = mesh.coords_flat();
    let s_space = FESpace::cg1_vec(mesh);
    let vq = FESpace::taylor_hood(mesh);

    // The inflow data is a function of position, but the profile must not
    // morph when the mesh moves: freeze its values at the undeformed dof
    // positions. (Every pipeline keeps the inflow boundary fixed anyway.)
    let pi = std::f64::consts::PI;
    let profile = mul(
        sin(mul(scalar(pi), dot(x(mesh), vec2(0.0, 1.0)))),
        vec2(1.0, 0.0),
    );
    let inflow =
        DirichletBC::on_block(&vq, 0, &[INFLOW_TAG], BcValue::Coordinate(profile)).into_frozen()?;
    let noslip = DirichletBC::on_block(
        &vq,
        0,
        &[WALLS_TAG, OBSTACLE_TAG],
        BcValue::Constant(Tensor::V([0.0, 0.0])),
    );

    let tape = Tape::new();

    // Control and mesh motion, per pipeline.
    let (control, boundary) = match config.pipeline {
        Pipeline::RieszDescent => {
            let s = FEFunction::new(&s_space, "deformation");
            tape.move_mesh(mesh, &s)?;
            (Control::Field(s), None)
        }
        Pipeline::ThroughDeformation => {
            let bmesh = extract_boundary(mesh, &[OBSTACLE_TAG])?;
            let h = RawVec::new(bmesh.ndofs(), "boundary force");
            let lame = solve_lame_field(mesh, &[INFLOW_TAG, OUTFLOW_TAG, WALLS_TAG], OBSTACLE_TAG)?;
            let load = transfer_from_boundary(&tape, &bmesh, &h, &s_space);
            let s = elasticity_extend(
                &tape,
                &s_space,
                &lame.mu,
                &load,
                &[OBSTACLE_TAG],
                &[INFLOW_TAG, OUTFLOW_TAG, WALLS_TAG],
            )?;
            tape.move_mesh(mesh, &s)?;
            (Control::Raw(h), Some(bmesh))
        }
    };

    // Stokes in Taylor–Hood: (∇u, ∇v) − (div u, q) − (div v, p) = 0 with the
    // do-nothing outflow fixing the pressure level.
    let w = FEFunction::new(&vq, "stokes solution");
    let (u, p) = coef_split(&w);
    let (v, q) = test_split(&vq);
    let residual = inner(grad(u.clone()), grad(v.clone())).dx()
        - mul(div(u.clone()), q).dx()
        - mul(div(v), p).dx();
    tape.solve(&residual, &w, &[inflow, noslip], &NewtonOptions::default())?;

    // Dissipated energy plus volume/barycenter penalties. The baselines are
    // plain numbers captured right here, so at zero control the penalties
    // vanish identically.
    let j_viscous = tape.assemble(&inner(grad(u.clone()), grad(u)).dx())?;
    let area = tape.assemble(&scalar(1.0).dx_on(mesh))?;
    let volume = 1.0 - &area;
    let moment_x = tape.assemble(&dot(x(mesh), vec2(1.0, 0.0)).dx())?;
    let moment_y = tape.assemble(&dot(x(mesh), vec2(0.0, 1.0)).dx())?;
    let bary_x = &(0.5 - &moment_x) / &volume;
    let bary_y = &(0.5 - &moment_y) / &volume;
    let volume0 = volume.value();
    let barycenter0 = [bary_x.value(), bary_y.value()];

    let d_vol = &volume - volume0;
    let d_bx = &bary_x - barycenter0[0];
    let d_by = &bary_y - barycenter0[1];
    let penalties = &(&(&d_vol * &d_vol) * config.alpha)
        + &(&(&(&d_bx * &d_bx) + &(&d_by * &d_by)) * config.beta);
    let j = &j_viscous + &penalties;

    let rf = ReducedFunctional::new(&tape, &j, vec![control])?;
    Ok(PironneauProblem {
        rf,
        mesh: mesh.clone(),
        boundary,
        state: w,
        state_space: vq,
        volume,
        barycenter: [bary_x, bary_y],
        volume0,
        barycenter0,
        initial_coords,
        config: config.clone(),
    })
}

impl PironneauProblem {
    /// A smooth pseudo-random direction on the control space, wrapped as the
    /// one-entry direction list the differentiation calls expect.
    pub fn probe_direction(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut sampler = DirectionSampler::new(seed);
        let field = match &self.boundary {
            Some(bmesh) => {
                let flat: Vec<f64> = bmesh.dof_coords().into_iter().flatten().collect();
                sampler.smooth_field(&flat)
            }
            None => sampler.smooth_field(&self.initial_coords),
        };
        vec![field]
    }

    /// Obstacle volume and barycenter at the most recently replayed point.
    pub fn current_volume_and_barycenter(&self) -> (f64, [f64; 2]) {
        (
            self.volume.value(),
            [self.barycenter[0].value(), self.barycenter[1].value()],
        )
    }

    /// The descent inner product the configuration asks for.
    pub fn riesz_map(&self) -> Result<RieszMap> {
        match &self.boundary {
            Some(bmesh) => RieszMap::boundary_l2(bmesh, &[OBSTACLE_TAG]),
            None => {
                let space = FESpace::cg1_vec(&self.mesh);
                let fixed = [INFLOW_TAG, OUTFLOW_TAG, WALLS_TAG];
                match self.config.riesz {
                    RieszKind::L2 => RieszMap::l2(&space, &fixed),
                    RieszKind::H1 => RieszMap::h1(&space, &fixed),
                    RieszKind::Elasticity => {
                        let lame = solve_lame_field(
                            &self.mesh,
                            &[INFLOW_TAG, OUTFLOW_TAG, WALLS_TAG],
                            OBSTACLE_TAG,
                        )?;
                        RieszMap::elasticity(&space, &lame.mu, &fixed)
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PironneauMode {
    /// Evaluate the objective.
    Value,
    /// Objective plus adjoint gradient (and a Hessian probe for timing).
    Gradient,
    /// Remainder convergence of orders 0–2.
    Taylor,
    /// Run the built-in descent.
    Optimize,
}

impl FromStr for PironneauMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "value" => Ok(PironneauMode::Value),
            "gradient" => Ok(PironneauMode::Gradient),
            "taylor" => Ok(PironneauMode::Taylor),
            "optimize" => Ok(PironneauMode::Optimize),
            other => Err(format!(
                "unknown mode '{other}' (value|gradient|taylor|optimize)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeParams {
    pub max_iters: usize,
    /// Reject steps that would drag any cell's scaled Jacobian below this.
    pub quality_floor: f64,
    pub grad_tol: f64,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        OptimizeParams { max_iters: 100, quality_floor: 0.1, grad_tol: 1e-8 }
    }
}

/// Run the case end to end and assemble its report. In optimize mode a VTK
/// snapshot per accepted iterate and a CSV descent trace land in
/// `snapshot_dir` when given; the other modes write one snapshot of the
/// solved base state.
pub fn run(
    config: &PironneauConfig,
    mode: PironneauMode,
    taylor: TaylorParams,
    optimize: OptimizeParams,
    snapshot_dir: Option<&Path>,
    with_timings: bool,
) -> Result<CaseReport> {
    let problem = build(config)?;
    let echo = serde_json::to_value(config).expect("config serializes");
    let mut report = CaseReport::new("pironneau", &mode_name(mode), echo);
    let mut timings = Timings::default();

    let base = problem.rf.control_values();
    let (value, forward_s) = timed(|| problem.rf.evaluate(&base));
    report.j = value?;
    timings.forward_s = Some(forward_s);

    match mode {
        PironneauMode::Value => {}
        PironneauMode::Gradient => {
            let (grads, adjoint_s) = timed(|| problem.rf.gradient());
            report.gradient_norms = grads?.iter().map(|g| l2_norm(g)).collect();
            timings.adjoint_s = Some(adjoint_s);
            let dirs = problem.probe_direction(7);
            let (hess, hessian_s) = timed(|| problem.rf.hessian_action(&dirs));
            hess?;
            timings.hessian_s = Some(hessian_s);
        }
        PironneauMode::Taylor => {
            let (grads, adjoint_s) = timed(|| problem.rf.gradient());
            report.gradient_norms = grads?.iter().map(|g| l2_norm(g)).collect();
            timings.adjoint_s = Some(adjoint_s);
            let dirs = problem.probe_direction(7);
            let table =
                taylor_test_orders(&problem.rf, &base, &dirs, taylor.h0, taylor.halvings, 2)?;
            report.check_taylor(&table);
            report.taylor = Some(table);
        }
        PironneauMode::Optimize => {
            let summary = run_descent(&problem, &optimize, snapshot_dir, &mut report)?;
            report.passed = summary.volume_drift <= 0.01 && summary.barycenter_drift <= 0.01;
            report.optimize = Some(summary);
        }
    }

    if mode != PironneauMode::Optimize {
        if let Some(dir) = snapshot_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("channel_0000.vtk");
            // The last differentiation replayed at the base point, so the
            // state is the base flow.
            problem.rf.evaluate(&base)?;
            write_state_snapshot(&problem, &path)?;
            report.artifacts.push(path.display().to_string());
        }
    }
    if with_timings {
        timings.fill_ratios();
        report.timings = Some(timings);
    }
    Ok(report)
}

/// Taylor table at zero control (used directly by verification suites).
pub fn taylor_table(
    problem: &PironneauProblem,
    dirs: &[Vec<f64>],
    params: TaylorParams,
    max_order: usize,
) -> Result<TaylorReport> {
    let base = problem.rf.control_values();
    taylor_test_orders(&problem.rf, &base, dirs, params.h0, params.halvings, max_order)
}

fn mode_name(mode: PironneauMode) -> String {
    match mode {
        PironneauMode::Value => "value",
        PironneauMode::Gradient => "gradient",
        PironneauMode::Taylor => "taylor",
        PironneauMode::Optimize => "optimize",
    }
    .to_string()
}

/// Run the built-in descent and summarize it, writing artifacts on the way.
fn run_descent(
    problem: &PironneauProblem,
    params: &OptimizeParams,
    snapshot_dir: Option<&Path>,
    report: &mut CaseReport,
) -> Result<OptimizeSummary> {
    if let Some(dir) = snapshot_dir {
        std::fs::create_dir_all(dir)?;
    }
    let riesz = problem.riesz_map()?;
    let opts = DescentOptions {
        max_iters: params.max_iters,
        grad_tol: params.grad_tol,
        quality_floor: params.quality_floor,
        quality_mesh: Some(problem.mesh.clone()),
        ..DescentOptions::default()
    };
    let mut io_err: Option<Error> = None;
    let mut artifacts = Vec::new();
    let result: DescentResult = optimize_descent(&problem.rf, &riesz, &opts, |row| {
        if let Some(dir) = snapshot_dir {
            if io_err.is_none() {
                let path = dir.join(format!("channel_{:04}.vtk", row.iter));
                match write_state_snapshot(problem, &path) {
                    Ok(()) => artifacts.push(path.display().to_string()),
                    Err(e) => io_err = Some(e),
                }
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    if let Some(dir) = snapshot_dir {
        let path = dir.join("descent_trace.csv");
        std::fs::write(&path, trace_csv(&result.rows))?;
        artifacts.push(path.display().to_string());
    }
    report.artifacts = artifacts;
    report.j = result.j_final;

    // The descent leaves the tape replayed at the final accepted point, so
    // the recorded scalars hold the final geometry's values.
    let (volume, barycenter) = problem.current_volume_and_barycenter();
    let volume_drift = ((volume - problem.volume0) / problem.volume0).abs();
    let barycenter_drift = (0..2)
        .map(|i| {
            (barycenter[i] - problem.barycenter0[i]).abs()
                / problem.barycenter0[i].abs().max(problem.config.radius)
        })
        .fold(0.0, f64::max);
    Ok(OptimizeSummary {
        status: match result.status {
            DescentStatus::Converged => "converged",
            DescentStatus::MaxIters => "max-iters",
            DescentStatus::Stalled => "stalled",
        }
        .to_string(),
        iterations: result.rows.len(),
        j_initial: result.j_initial,
        j_final: result.j_final,
        reduction: (result.j_initial - result.j_final) / result.j_initial,
        volume_drift,
        barycenter_drift,
        history: result.rows,
    })
}

/// Write velocity (at vertices) and pressure of the current state on the
/// current mesh.
pub fn write_state_snapshot(problem: &PironneauProblem, path: &Path) -> Result<()> {
    let nv = problem.mesh.num_vertices();
    let dofs = problem.state.dofs().clone();
    let (p_off, _) = problem.state_space.block(1);
    write_vtk(
        &problem.mesh,
        path,
        &[("p", &dofs[p_off..p_off + nv])],
        &[("u", &dofs[..2 * nv])],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::taylor::perturbed;
    use approx::assert_relative_eq;

    fn coarse_config(pipeline: Pipeline) -> PironneauConfig {
        PironneauConfig { pipeline, n_phi: 16, n_r: 4, ..PironneauConfig::default() }
    }

    #[test]
    fn pipelines_agree_at_zero_control_and_penalties_vanish() {
        let through = build(&coarse_config(Pipeline::ThroughDeformation)).unwrap();
        let riesz = build(&coarse_config(Pipeline::RieszDescent)).unwrap();
        let j_t = through.rf.evaluate(&through.rf.control_values()).unwrap();
        let j_r = riesz.rf.evaluate(&riesz.rf.control_values()).unwrap();
        assert_relative_eq!(j_t, j_r, max_relative = 1e-12);

        // At zero control the baselines were captured from the identical
        // arithmetic, so the penalties are exactly zero and J is the viscous
        // energy alone.
        let (vol, bc) = through.current_volume_and_barycenter();
        assert_eq!(vol, through.volume0);
        assert_eq!(bc, through.barycenter0);

        // The discrete obstacle is a slightly-shrunk polygon of the disk.
        let disk = std::f64::consts::PI * 0.13 * 0.13;
        assert!(vol < disk && vol > 0.97 * disk, "volume {vol} vs disk {disk}");
        assert_relative_eq!(bc[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(bc[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn coarse_energy_is_in_the_right_ballpark() {
        // The production resolution must land within 10% of 24.3; even this
        // very coarse mesh should be in the neighborhood.
        let problem = build(&coarse_config(Pipeline::ThroughDeformation)).unwrap();
        let j = problem.rf.evaluate(&problem.rf.control_values()).unwrap();
        assert!(j > 15.0 && j < 40.0, "coarse-channel energy {j}");
    }

    #[test]
    fn gradient_matches_finite_differences_off_the_base_point() {
        // Off zero control the penalties are active, so this exercises the
        // whole chain: scatter → extension solve → mesh move → Stokes →
        // energy, volume and barycenter terms.
        let problem = build(&coarse_config(Pipeline::ThroughDeformation)).unwrap();
        let shift = problem.probe_direction(3);
        let point = perturbed(&problem.rf.control_values(), &shift, 0.05);

        problem.rf.evaluate(&point).unwrap();
        let grad = problem.rf.gradient().unwrap();

        let dir = problem.probe_direction(4);
        let exact: f64 = grad
            .iter()
            .zip(&dir)
            .map(|(g, d)| crate::linalg::dot(g, d))
            .sum();
        let h = 1e-3;
        let jp = problem.rf.evaluate(&perturbed(&point, &dir, h)).unwrap();
        let jm = problem.rf.evaluate(&perturbed(&point, &dir, -h)).unwrap();
        let fd = (jp - jm) / (2.0 * h);
        assert_relative_eq!(exact, fd, max_relative = 1e-5);
    }

    #[test]
    fn volumetric_gradient_matches_finite_differences() {
        let problem = build(&coarse_config(Pipeline::RieszDescent)).unwrap();
        let shift = problem.probe_direction(5);
        let point = perturbed(&problem.rf.control_values(), &shift, 1e-3);

        problem.rf.evaluate(&point).unwrap();
        let grad = problem.rf.gradient().unwrap();

        let dir = problem.probe_direction(6);
        let exact: f64 = grad
            .iter()
            .zip(&dir)
            .map(|(g, d)| crate::linalg::dot(g, d))
            .sum();
        let h = 1e-5;
        let jp = problem.rf.evaluate(&perturbed(&point, &dir, h)).unwrap();
        let jm = problem.rf.evaluate(&perturbed(&point, &dir, -h)).unwrap();
        let fd = (jp - jm) / (2.0 * h);
        assert_relative_eq!(exact, fd, max_relative = 1e-5);
    }

    #[test]
    fn remainders_converge_at_the_textbook_orders() {
        let problem = build(&coarse_config(Pipeline::ThroughDeformation)).unwrap();
        let dirs = problem.probe_direction(11);
        let params = coarse_config(Pipeline::ThroughDeformation).default_taylor();
        let table = taylor_table(&problem, &dirs, params, 1).unwrap();
        assert!(table.order_in(0, 0.8, 1.2), "order 0: {:?}", table.mean_rates);
        assert!(table.order_in(1, 1.7, 2.3), "order 1: {:?}", table.mean_rates);
    }

    #[test]
    fn descent_reduces_the_energy_without_breaking_the_mesh() {
        let config = PironneauConfig {
            n_phi: 24,
            n_r: 6,
            ..PironneauConfig::default()
        };
        let problem = build(&config).unwrap();
        let riesz = problem.riesz_map().unwrap();
        let opts = DescentOptions {
            max_iters: 8,
            quality_mesh: Some(problem.mesh.clone()),
            ..DescentOptions::default()
        };
        let result = optimize_descent(&problem.rf, &riesz, &opts, |_| {}).unwrap();
        assert!(
            result.j_final < result.j_initial,
            "no reduction: {} -> {}",
            result.j_initial,
            result.j_final
        );
        assert!(problem.mesh.min_scaled_jacobian() > 0.0);
        let (volume, _) = problem.current_volume_and_barycenter();
        assert!((volume - problem.volume0).abs() / problem.volume0 < 0.05);
    }
}
