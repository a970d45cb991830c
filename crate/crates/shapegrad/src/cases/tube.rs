//! Heat conduction in a disk whose inner hole rotates: the moving-domain
//! benchmark.
//!
//! The domain is a disk with an off-center circular hole. The hole is held at
//! temperature 1 and spins about the disk's center; the mesh follows the
//! rotation as a rigid motion, computed one Crank–Nicolson increment per time
//! step. The state is an advection–diffusion equation in ALE form (the
//! advective term carries the mesh velocity), and the objective is the
//! space-time dissipation `J = Σ_n dt ∫ |∇u_n|² dx`.
//!
//! Controls are the per-step mesh displacements θ_0 … θ_N. The case records
//! the same physics in two ways, which differ in what the controls *mean*:
//!
//! * [`TubeVariant::Frozen`] solves the rotation increment off the tape and
//!   writes it into the control before its first recorded use. The base point
//!   of the reduced functional is the rotation itself; differentiation treats
//!   each step's motion as an independent datum, so the gradient knows
//!   nothing about the rotational structure.
//! * [`TubeVariant::Decomposed`] records the rotation solve as a tape block
//!   and adds the control on top (`step motion = increment + θ_i`). The base
//!   point is θ ≡ 0 and the derivative of the rotation solve — a genuine
//!   shape derivative, since its residual reads the mesh coordinates — flows
//!   through the graph.
//!
//! Both variants replay the identical forward trajectory at their base
//! points, but their gradients differ, which is the point of the exercise.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

pub use super::TaylorParams;
use super::{l2_norm, timed, CaseReport, DirectionSampler, Timings};
use crate::error::{Error, Result};
use crate::fem::{solve_newton, DirichletBC, FEFunction, FESpace, NewtonOptions};
use crate::forms::{
    add, coef, dot, grad, inner, mat2, mul, scalar, sub, test, x, Expr, Form, Tensor,
};
use crate::mesh::generate::annulus;
use crate::mesh::{vtk::write_vtk, Mesh};
use crate::tape::taylor::{taylor_test_orders, TaylorReport};
use crate::tape::{Control, ReducedFunctional, Tape};

/// Boundary marker of the hole (Dirichlet, temperature 1).
pub const HOLE_TAG: i32 = 2;
/// Boundary marker of the outer circle (insulated).
pub const OUTER_TAG: i32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TubeVariant {
    Frozen,
    Decomposed,
}

impl FromStr for TubeVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frozen" => Ok(TubeVariant::Frozen),
            "decomposed" => Ok(TubeVariant::Decomposed),
            other => Err(format!("unknown variant '{other}' (frozen|decomposed)")),
        }
    }
}

impl fmt::Display for TubeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TubeVariant::Frozen => "frozen",
            TubeVariant::Decomposed => "decomposed",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TubeConfig {
    pub variant: TubeVariant,
    /// Diffusion coefficient.
    pub k: f64,
    /// Rotation speed in turns per unit time (angular velocity 2πω).
    pub omega: f64,
    pub t_end: f64,
    pub dt: f64,
    /// Rays from the hole center (the annulus generator makes
    /// `2 · n_phi · n_r` cells).
    pub n_phi: usize,
    pub n_r: usize,
    pub hole_center: [f64; 2],
    pub hole_r: f64,
    pub outer_r: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        TubeConfig {
            variant: TubeVariant::Frozen,
            k: 0.01,
            omega: 0.25,
            t_end: 0.5,
            dt: 1e-2,
            n_phi: 50,
            n_r: 20,
            hole_center: [0.5, 0.0],
            hole_r: 0.2,
            outer_r: 1.0,
        }
    }
}

impl TubeConfig {
    pub fn n_steps(&self) -> usize {
        let n = (self.t_end / self.dt).round() as usize;
        assert!(n >= 1, "t_end must cover at least one time step");
        n
    }
}

/// A fully recorded tube problem: the reduced functional plus the handles a
/// caller needs for directions, snapshots and inspection.
pub struct TubeProblem {
    pub rf: ReducedFunctional,
    pub mesh: Mesh,
    /// Vector CG1 space the controls live on.
    pub control_space: FESpace,
    /// The state at the most recently replayed step (live during replay).
    pub state: FEFunction,
    /// Tape block index of each state solve, for per-step snapshot hooks.
    pub state_blocks: Vec<usize>,
    /// Mesh coordinates at recording time, before any motion.
    pub initial_coords: Vec<f64>,
    pub config: TubeConfig,
}

/// Record the tube problem on a fresh tape over the standard annulus mesh.
pub fn build(config: &TubeConfig) -> Result<TubeProblem> {
    let mesh = annulus(
        config.n_phi,
        config.n_r,
        config.hole_center,
        config.hole_r,
        config.outer_r,
    )?;
    build_on_mesh(config, &mesh)
}

/// Record the tube problem on a caller-supplied mesh whose hole boundary is
/// tagged [`HOLE_TAG`]. Split out so tests can run the identical recording on
/// meshes small enough to solve by hand.
pub fn build_on_mesh(config: &TubeConfig, mesh: &Mesh) -> Result<TubeProblem> {
    let n_steps = config.n_steps();
    let initial_coords = mesh.coords_flat();

    let v_space = FESpace::cg1_vec(mesh);
    let q_space = FESpace::cg1(mesh);

    let thetas: Vec<FEFunction> = (0..=n_steps)
        .map(|i| FEFunction::new(&v_space, format!("theta{i}")))
        .collect();
    let u0 = FEFunction::new(&q_space, "u0");
    let u1 = FEFunction::new(&q_space, "u1");

    // Rigid rotation about the origin with angular velocity 2πω, as a matrix
    // so it applies to any vector expression.
    let c = 2.0 * std::f64::consts::PI * config.omega;
    let rot = move |y: Expr| dot(mat2([[0.0, c], [-c, 0.0]]), y);

    // Crank–Nicolson increment of the rotation flow: find θₙ with
    // (θₙ, z) = dt/2 (rot(x + θₙ) + rot(x), z). Linear in θₙ, and — since
    // rot maps nodal fields to nodal fields — exactly the nodal Cayley
    // transform, which preserves lengths: the whole mesh turns rigidly.
    let motion_residual = |thn: &FEFunction| -> Form {
        inner(coef(thn), test(&v_space)).dx()
            - mul(
                scalar(0.5 * config.dt),
                inner(
                    add(rot(add(x(mesh), coef(thn))), rot(x(mesh))),
                    test(&v_space),
                ),
            )
            .dx()
    };

    // ALE Crank–Nicolson step of ∂u/∂t − kΔu − ∇·(u ∂θ/∂t) = 0, integrated by
    // parts (insulating outer boundary): the advective term tests against ∇v
    // and carries the mesh velocity of the step.
    let state_residual = |vel: Expr| -> Form {
        let w = coef(&u1);
        let uo = coef(&u0);
        let v = test(&q_space);
        mul(scalar(1.0 / config.dt), mul(sub(w.clone(), uo.clone()), v.clone())).dx()
            + mul(
                scalar(config.k),
                inner(
                    grad(v.clone()),
                    mul(scalar(0.5), add(grad(w.clone()), grad(uo.clone()))),
                ),
            )
            .dx()
            + inner(mul(mul(scalar(0.5), add(w, uo)), vel), grad(v)).dx()
    };
    let mid_velocity = |prev: &FEFunction, cur: &FEFunction| -> Expr {
        mul(scalar(0.5 / config.dt), add(coef(prev), coef(cur)))
    };

    let bc = DirichletBC::constant(&q_space, &[HOLE_TAG], Tensor::S(1.0));
    let newton = NewtonOptions::default();

    let tape = Tape::new();
    let mut state_blocks = Vec::with_capacity(n_steps);
    let mut j = tape.constant(0.0);
    let step_dissipation =
        mul(scalar(config.dt), inner(grad(coef(&u1)), grad(coef(&u1)))).dx();

    // The initial domain is itself controlled: θ₀ perturbs the mesh before
    // the first step.
    tape.move_mesh(mesh, &thetas[0])?;

    match config.variant {
        TubeVariant::Frozen => {
            for i in 0..n_steps {
                // Off the tape: overwrite the control with this step's
                // rotation increment. The reduced functional later snapshots
                // these values as its base point.
                solve_newton(&motion_residual(&thetas[i + 1]), &thetas[i + 1], &[], &newton)?;

                tape.move_mesh(mesh, &thetas[i + 1])?;
                tape.solve(
                    &state_residual(mid_velocity(&thetas[i], &thetas[i + 1])),
                    &u1,
                    std::slice::from_ref(&bc),
                    &newton,
                )?;
                state_blocks.push(tape.num_blocks() - 1);
                tape.assign(&u0, &[(1.0, &u1)]);
                j = &j + &tape.assemble(&step_dissipation.clone())?;
            }
        }
        TubeVariant::Decomposed => {
            // On the tape: the rotation increment is a recorded solve whose
            // residual reads the mesh coordinates, and the motion of step i
            // is that increment plus the control.
            let s = FEFunction::new(&v_space, "rotation increment");
            let motions: Vec<FEFunction> = (0..=n_steps)
                .map(|i| FEFunction::new(&v_space, format!("step motion {i}")))
                .collect();
            tape.assign(&motions[0], &[(1.0, &thetas[0])]);
            for i in 0..n_steps {
                tape.solve(&motion_residual(&s), &s, &[], &newton)?;
                tape.assign(&motions[i + 1], &[(1.0, &s), (1.0, &thetas[i + 1])]);
                tape.move_mesh(mesh, &motions[i + 1])?;
                tape.solve(
                    &state_residual(mid_velocity(&motions[i], &motions[i + 1])),
                    &u1,
                    std::slice::from_ref(&bc),
                    &newton,
                )?;
                state_blocks.push(tape.num_blocks() - 1);
                tape.assign(&u0, &[(1.0, &u1)]);
                j = &j + &tape.assemble(&step_dissipation.clone())?;
            }
        }
    }

    let controls = thetas.iter().map(|t| Control::Field(t.clone())).collect();
    let rf = ReducedFunctional::new(&tape, &j, controls)?;
    Ok(TubeProblem {
        rf,
        mesh: mesh.clone(),
        control_space: v_space,
        state: u1,
        state_blocks,
        initial_coords,
        config: config.clone(),
    })
}

/// The standard verification direction: `(1 − x² − y², 1 − x² − y²)`
/// interpolated at the recording coordinates — smooth, and vanishing on the
/// unit outer circle — applied to every control.
pub fn radial_bump_directions(problem: &TubeProblem) -> Vec<Vec<f64>> {
    let field: Vec<f64> = problem
        .initial_coords
        .chunks_exact(2)
        .flat_map(|xy| {
            let v = 1.0 - xy[0] * xy[0] - xy[1] * xy[1];
            [v, v]
        })
        .collect();
    vec![field; problem.rf.controls().len()]
}

/// Independent smooth pseudo-random directions, one per control.
pub fn random_directions(problem: &TubeProblem, seed: u64) -> Vec<Vec<f64>> {
    let mut sampler = DirectionSampler::new(seed);
    (0..problem.rf.controls().len())
        .map(|_| sampler.smooth_field(&problem.initial_coords))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubeMode {
    /// Evaluate the objective.
    Value,
    /// Objective plus adjoint gradient.
    Gradient,
    /// Remainder convergence of orders 0–1 (no Hessian).
    Taylor,
    /// Remainder convergence of orders 0–2.
    HessianTaylor,
}

impl FromStr for TubeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "value" => Ok(TubeMode::Value),
            "gradient" => Ok(TubeMode::Gradient),
            "taylor" => Ok(TubeMode::Taylor),
            "hessian-taylor" => Ok(TubeMode::HessianTaylor),
            other => Err(format!(
                "unknown mode '{other}' (value|gradient|taylor|hessian-taylor)"
            )),
        }
    }
}

/// Run the tube case end to end and assemble its report. Snapshots of the
/// state are written per time step when `snapshot_dir` is given; timings are
/// measured unless suppressed for byte-reproducible output.
pub fn run(
    config: &TubeConfig,
    mode: TubeMode,
    taylor: TaylorParams,
    snapshot_dir: Option<&Path>,
    with_timings: bool,
) -> Result<CaseReport> {
    let problem = build(config)?;
    let echo = serde_json::to_value(config).expect("config serializes");
    let mut report = CaseReport::new("tube", &mode_name(mode), echo);
    let mut timings = Timings::default();

    let base = problem.rf.control_values();
    let (value, forward_s) = timed(|| problem.rf.evaluate(&base));
    report.j = value?;
    timings.forward_s = Some(forward_s);

    match mode {
        TubeMode::Value => {}
        TubeMode::Gradient => {
            let (grads, adjoint_s) = timed(|| problem.rf.gradient());
            report.gradient_norms = grads?.iter().map(|g| l2_norm(g)).collect();
            timings.adjoint_s = Some(adjoint_s);
            let dirs = radial_bump_directions(&problem);
            let (hess, hessian_s) = timed(|| problem.rf.hessian_action(&dirs));
            hess?;
            timings.hessian_s = Some(hessian_s);
        }
        TubeMode::Taylor | TubeMode::HessianTaylor => {
            let (grads, adjoint_s) = timed(|| problem.rf.gradient());
            report.gradient_norms = grads?.iter().map(|g| l2_norm(g)).collect();
            timings.adjoint_s = Some(adjoint_s);
            let dirs = radial_bump_directions(&problem);
            let max_order = if mode == TubeMode::HessianTaylor { 2 } else { 1 };
            let table = taylor_test_orders(
                &problem.rf,
                &base,
                &dirs,
                taylor.h0,
                taylor.halvings,
                max_order,
            )?;
            report.check_taylor(&table);
            report.taylor = Some(table);
        }
    }

    if let Some(dir) = snapshot_dir {
        report.artifacts = write_snapshots(&problem, dir)?;
    }
    if with_timings {
        timings.fill_ratios();
        report.timings = Some(timings);
    }
    Ok(report)
}

/// Taylor table at the problem's base point (used directly by verification
/// suites that want the raw rates rather than a report).
pub fn taylor_table(
    problem: &TubeProblem,
    dirs: &[Vec<f64>],
    params: TaylorParams,
    max_order: usize,
) -> Result<TaylorReport> {
    let base = problem.rf.control_values();
    taylor_test_orders(&problem.rf, &base, dirs, params.h0, params.halvings, max_order)
}

fn mode_name(mode: TubeMode) -> String {
    match mode {
        TubeMode::Value => "value",
        TubeMode::Gradient => "gradient",
        TubeMode::Taylor => "taylor",
        TubeMode::HessianTaylor => "hessian-taylor",
    }
    .to_string()
}

/// Replay the forward pass, writing one VTK snapshot of the state after each
/// step's solve. Returns the written paths.
pub fn write_snapshots(problem: &TubeProblem, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let base = problem.rf.control_values();
    let mut artifacts = Vec::new();
    let mut io_err: Option<Error> = None;
    let mut step = 0usize;
    problem.rf.evaluate_with(&base, |block| {
        if io_err.is_none() && problem.state_blocks.contains(&block) {
            let path = dir.join(format!("tube_{step:04}.vtk"));
            let dofs = problem.state.dofs().clone();
            match write_vtk(&problem.mesh, &path, &[("u", &dofs)], &[]) {
                Ok(()) => artifacts.push(path.display().to_string()),
                Err(e) => io_err = Some(e),
            }
            step += 1;
        }
    })?;
    match io_err {
        Some(e) => Err(e),
        None => Ok(artifacts),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot as vdot;
    use crate::tape::taylor::perturbed;
    use approx::assert_relative_eq;

    fn small_config(variant: TubeVariant, steps: usize) -> TubeConfig {
        TubeConfig {
            variant,
            t_end: steps as f64 * 1e-2,
            n_phi: 12,
            n_r: 4,
            ..TubeConfig::default()
        }
    }

    /// Unit square split along the main diagonal, bottom edge playing the
    /// role of the hole boundary.
    fn two_cell_mesh() -> Mesh {
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            &[([0, 1], HOLE_TAG), ([1, 2], OUTER_TAG), ([2, 3], OUTER_TAG), ([3, 0], OUTER_TAG)],
        )
        .unwrap()
    }

    #[test]
    fn single_step_without_motion_or_diffusion_matches_the_hand_solution() {
        // With k = 0 and ω = 0 one step reduces to a mass solve: the free
        // vertex values follow from M(w − 0) = 0 with w = 1 on the tagged
        // edge, giving w = (1, 1, −5/7, −1/7) on the two-cell square and
        // J = dt · ∫|∇w|² = dt · 16/7.
        for variant in [TubeVariant::Frozen, TubeVariant::Decomposed] {
            let config = TubeConfig {
                variant,
                k: 0.0,
                omega: 0.0,
                t_end: 1e-2,
                ..TubeConfig::default()
            };
            let problem = build_on_mesh(&config, &two_cell_mesh()).unwrap();
            let j = problem.rf.evaluate(&problem.rf.control_values()).unwrap();
            assert_relative_eq!(j, config.dt * 16.0 / 7.0, max_relative = 1e-13);
        }
    }

    #[test]
    fn frozen_and_decomposed_share_the_forward_trajectory() {
        let frozen = build(&small_config(TubeVariant::Frozen, 5)).unwrap();
        let decomposed = build(&small_config(TubeVariant::Decomposed, 5)).unwrap();
        let jf = frozen.rf.evaluate(&frozen.rf.control_values()).unwrap();
        let jd = decomposed
            .rf
            .evaluate(&decomposed.rf.control_values())
            .unwrap();
        assert_relative_eq!(jf, jd, max_relative = 1e-12);

        // The frozen base point carries the rotation increments; the
        // decomposed one is the zero field.
        let base_f = frozen.rf.control_values();
        let base_d = decomposed.rf.control_values();
        assert!(base_f[1].iter().any(|v| v.abs() > 1e-6));
        assert!(base_d.iter().all(|c| c.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn the_mesh_rotates_rigidly_when_uncontrolled() {
        let steps = 5;
        let problem = build(&small_config(TubeVariant::Frozen, steps)).unwrap();
        problem.rf.evaluate(&problem.rf.control_values()).unwrap();

        // Crank–Nicolson of the rotation flow is the Cayley transform:
        // lengths are preserved exactly and every vertex turns by the same
        // angle 2·atan(πω·dt) per step (clockwise: the velocity field is
        // c·(y, −x)).
        let config = &problem.config;
        let angle = -(steps as f64)
            * 2.0
            * (std::f64::consts::PI * config.omega * config.dt).atan();
        let (sin, cos) = angle.sin_cos();
        let coords = problem.mesh.coords();
        for (v, xy) in problem.initial_coords.chunks_exact(2).enumerate() {
            let expect = [
                cos * xy[0] - sin * xy[1],
                sin * xy[0] + cos * xy[1],
            ];
            assert_relative_eq!(coords[v][0], expect[0], epsilon = 1e-10);
            assert_relative_eq!(coords[v][1], expect[1], epsilon = 1e-10);
        }
        // Rigid motion preserves the (discrete) area exactly.
        let fresh = annulus(config.n_phi, config.n_r, config.hole_center, config.hole_r, config.outer_r)
            .unwrap();
        assert_relative_eq!(
            problem.mesh.total_area(),
            fresh.total_area(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn gradients_of_the_two_variants_disagree_on_the_hole_boundary() {
        // Same trajectory, different derivative: the frozen gradient treats
        // the rotation as data, the decomposed one differentiates through it.
        // On the hole dofs the two must point in visibly different
        // directions (the decomposed one follows the boundary normal). The
        // difference accumulates with the turned angle, so give the hole
        // enough steps to rotate appreciably.
        let frozen = build(&small_config(TubeVariant::Frozen, 25)).unwrap();
        let decomposed = build(&small_config(TubeVariant::Decomposed, 25)).unwrap();
        frozen.rf.evaluate(&frozen.rf.control_values()).unwrap();
        decomposed
            .rf
            .evaluate(&decomposed.rf.control_values())
            .unwrap();
        let gf = frozen.rf.gradient().unwrap();
        let gd = decomposed.rf.gradient().unwrap();

        let hole = frozen.mesh.vertices_with_tags(&[HOLE_TAG]).unwrap();
        let restrict = |g: &[Vec<f64>]| -> Vec<f64> {
            g.iter()
                .flat_map(|gi| {
                    hole.iter().flat_map(|&v| [gi[2 * v], gi[2 * v + 1]]).collect::<Vec<_>>()
                })
                .collect()
        };
        let a = restrict(&gf);
        let b = restrict(&gd);
        let cosine = vdot(&a, &b) / (l2_norm(&a) * l2_norm(&b));
        assert!(
            cosine < (5.0f64.to_radians()).cos(),
            "gradients nearly colinear: cos = {cosine}"
        );
    }

    #[test]
    fn adjoint_gradient_matches_central_differences() {
        for variant in [TubeVariant::Frozen, TubeVariant::Decomposed] {
            let problem = build(&small_config(variant, 3)).unwrap();
            let base = problem.rf.control_values();
            problem.rf.evaluate(&base).unwrap();
            let grads = problem.rf.gradient().unwrap();
            let dirs = random_directions(&problem, 2024);
            let slope: f64 = grads.iter().zip(&dirs).map(|(g, d)| vdot(g, d)).sum();

            let h = 1e-4;
            let jp = problem.rf.evaluate(&perturbed(&base, &dirs, h)).unwrap();
            let jm = problem.rf.evaluate(&perturbed(&base, &dirs, -h)).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            assert_relative_eq!(slope, fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn coarse_taylor_remainders_converge_at_first_order_rates() {
        let problem = build(&small_config(TubeVariant::Frozen, 3)).unwrap();
        let dirs = radial_bump_directions(&problem);
        let table = taylor_table(
            &problem,
            &dirs,
            TaylorParams { h0: 1e-3, halvings: 2 },
            1,
        )
        .unwrap();
        assert!(table.order_in(0, 0.8, 1.2), "rates {:?}", table.mean_rates);
        assert!(table.order_in(1, 1.7, 2.3), "rates {:?}", table.mean_rates);
    }

    #[test]
    fn snapshots_cover_every_time_step() {
        let dir = tempfile::tempdir().unwrap();
        let problem = build(&small_config(TubeVariant::Frozen, 3)).unwrap();
        let files = write_snapshots(&problem, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            let meta = std::fs::metadata(f).unwrap();
            assert!(meta.len() > 0, "{f} is empty");
        }
    }
}
