//! From dual gradients to usable mesh motions.
//!
//! A shape gradient comes out of the adjoint sweep as a *dual* vector — the
//! assembled load of the derivative, one entry per control dof. Stepping the
//! mesh along it directly is mesh-dependent and rough; descent needs the
//! Riesz representative with respect to a chosen inner product. [`RieszMap`]
//! factors that inner product once and turns duals into fields. On top of it,
//! [`harmonic_stiffness`] and [`elasticity_extend`] build the classic
//! boundary-to-volume deformation pipeline (stiffness-graded linear
//! elasticity driven by a boundary force), and [`optimize_descent`] runs an
//! Armijo backtracking loop that treats mesh entanglement as a step
//! rejection, never as a crash.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_matrix, solve_linear, DirichletBC, FEFunction, FESpace, NewtonOptions,
};
use crate::forms::{coef, grad, inner, mul, scalar, sym_grad, test, trial, Tensor};
use crate::linalg::{axpy, dot, Factor, Triplets};
use crate::mesh::{BoundaryMesh, Mesh, Tag};
use crate::tape::{RawVec, ReducedFunctional, Tape};

/// A factored inner product `M` on a control space: [`represent`] solves
/// `M r = g`, turning the dual vector `g` (an assembled gradient) into the
/// primal field `r` that is steepest ascent with respect to that product.
///
/// Constrained dofs (clamped boundary tags, or everything off a boundary
/// chain) are eliminated symmetrically, so the operator stays symmetric and
/// the representative vanishes exactly there.
///
/// [`represent`]: RieszMap::represent
pub struct RieszMap {
    factor: Option<Factor>,
    zero_rows: Vec<usize>,
    /// Control slot → operator row, for controls that live on a subset of the
    /// operator's dofs (boundary chains); identity when absent.
    slot_rows: Option<Vec<usize>>,
    ndofs: usize,
    ncontrols: usize,
}

impl RieszMap {
    /// L² mass matrix on a (vector) space.
    pub fn l2(space: &FESpace, zero_tags: &[Tag]) -> Result<RieszMap> {
        let m = inner(trial(space), test(space)).dx();
        RieszMap::from_operator(assemble_matrix(&m)?, constrained_rows(space, zero_tags)?)
    }

    /// Full H¹ product (mass plus stiffness) on a (vector) space.
    pub fn h1(space: &FESpace, zero_tags: &[Tag]) -> Result<RieszMap> {
        let m = inner(trial(space), test(space)).dx()
            + inner(grad(trial(space)), grad(test(space))).dx();
        RieszMap::from_operator(assemble_matrix(&m)?, constrained_rows(space, zero_tags)?)
    }

    /// Linear elasticity product `∫ 2μ ε(r):ε(t) dx` with a spatially varying
    /// stiffness `μ`. Without clamped tags the operator is singular (rigid
    /// motions), so `zero_tags` must not be empty.
    pub fn elasticity(space: &FESpace, mu: &FEFunction, zero_tags: &[Tag]) -> Result<RieszMap> {
        assert!(
            !zero_tags.is_empty(),
            "elasticity product needs clamped boundary tags"
        );
        let a = elastic_energy(space, mu);
        RieszMap::from_operator(assemble_matrix(&a)?, constrained_rows(space, zero_tags)?)
    }

    /// L² product of the boundary chain itself: the facet mass matrix over
    /// the chain's tags, acting on controls laid out in the chain's dof order.
    pub fn boundary_l2(bmesh: &BoundaryMesh, tags: &[Tag]) -> Result<RieszMap> {
        let space = FESpace::cg1_vec(bmesh.parent());
        let m = inner(trial(&space), test(&space)).ds(tags);
        let slots = bmesh.scatter_map();
        let mut off_chain: Vec<usize> = (0..space.ndofs())
            .filter(|d| !slots.contains(d))
            .collect();
        off_chain.sort_unstable();
        let mut map = RieszMap::from_operator(assemble_matrix(&m)?, off_chain)?;
        map.slot_rows = Some(slots);
        map.ncontrols = bmesh.ndofs();
        Ok(map)
    }

    /// The trivial product: [`represent`](RieszMap::represent) returns its
    /// input (plain coordinate-wise gradient descent).
    pub fn identity(ncontrols: usize) -> RieszMap {
        RieszMap {
            factor: None,
            zero_rows: Vec::new(),
            slot_rows: None,
            ndofs: ncontrols,
            ncontrols,
        }
    }

    fn from_operator(mut op: Triplets, zero_rows: Vec<usize>) -> Result<RieszMap> {
        let ndofs = op.nrows();
        op.constrain_symmetric(&zero_rows);
        Ok(RieszMap {
            factor: Some(op.into_csc().factor()?),
            zero_rows,
            slot_rows: None,
            ndofs,
            ncontrols: ndofs,
        })
    }

    pub fn ncontrols(&self) -> usize {
        self.ncontrols
    }

    /// Solve `M r = g` (with `g` zeroed on constrained rows) and return `r`
    /// in the control layout.
    pub fn represent(&self, g: &[f64]) -> Vec<f64> {
        assert_eq!(g.len(), self.ncontrols, "dual vector length mismatch");
        let Some(factor) = &self.factor else {
            return g.to_vec();
        };
        let mut rhs = match &self.slot_rows {
            None => g.to_vec(),
            Some(rows) => {
                let mut full = vec![0.0; self.ndofs];
                for (slot, &row) in rows.iter().enumerate() {
                    full[row] = g[slot];
                }
                full
            }
        };
        for &r in &self.zero_rows {
            rhs[r] = 0.0;
        }
        let sol = factor.solve(&rhs);
        match &self.slot_rows {
            None => sol,
            Some(rows) => rows.iter().map(|&r| sol[r]).collect(),
        }
    }
}

fn elastic_energy(space: &FESpace, mu: &FEFunction) -> crate::forms::Form {
    mul(
        mul(scalar(2.0), coef(mu)),
        inner(sym_grad(trial(space)), sym_grad(test(space))),
    )
    .dx()
}

/// Vector dofs clamped by the given tags, sorted.
fn constrained_rows(space: &FESpace, tags: &[Tag]) -> Result<Vec<usize>> {
    if tags.is_empty() {
        return Ok(Vec::new());
    }
    let bc = DirichletBC::constant(space, tags, Tensor::V([0.0, 0.0]));
    Ok(bc.dofs_and_values()?.into_iter().map(|(d, _)| d).collect())
}

/// Harmonic interpolation of per-tag boundary values: solves a Laplace
/// problem on scalar CG1 with the given Dirichlet data. Used to grade the
/// extension stiffness — large near boundaries that should move rigidly,
/// small where the mesh may absorb deformation.
pub fn harmonic_stiffness(mesh: &Mesh, boundary_values: &[(Tag, f64)]) -> Result<FEFunction> {
    let space = FESpace::cg1(mesh);
    let field = FEFunction::new(&space, "stiffness");
    let a = inner(grad(trial(&space)), grad(test(&space))).dx();
    let l = mul(scalar(0.0), test(&space)).dx();
    let bcs: Vec<DirichletBC> = boundary_values
        .iter()
        .map(|&(tag, v)| DirichletBC::constant(&space, &[tag], Tensor::S(v)))
        .collect();
    solve_linear(&a, &l, &bcs, &field)?;
    Ok(field)
}

/// The variable extension stiffness: a harmonic scalar field `μ`, pinned to 1
/// on the fixed outer boundaries and 500 on the design boundary so the cells
/// next to the design surface move almost rigidly. The second Lamé parameter
/// is identically zero, so `μ` alone determines the stress `2 μ ε(s)`.
pub struct LameField {
    pub mu: FEFunction,
}

/// Solve for the [`LameField`] on `mesh`: Laplace with Dirichlet values 1 on
/// `outer_tags` and 500 on `obstacle_tag`.
pub fn solve_lame_field(mesh: &Mesh, outer_tags: &[Tag], obstacle_tag: Tag) -> Result<LameField> {
    if outer_tags.is_empty() {
        return Err(Error::Shape("outer tag set must be nonempty".into()));
    }
    let mut values: Vec<(Tag, f64)> = outer_tags.iter().map(|&t| (t, 1.0)).collect();
    values.push((obstacle_tag, 500.0));
    Ok(LameField { mu: harmonic_stiffness(mesh, &values)? })
}

/// Scatter a boundary-chain control vector into a zero-extended field on the
/// parent mesh, recorded on the tape. The result is the load a boundary
/// control exerts in [`elasticity_extend`].
pub fn transfer_from_boundary(
    tape: &Tape,
    bmesh: &BoundaryMesh,
    control: &RawVec,
    space: &FESpace,
) -> FEFunction {
    assert_eq!(control.len(), bmesh.ndofs(), "one control entry per chain dof");
    let field = FEFunction::new(space, format!("{} (extended by zero)", control.name()));
    tape.scatter(control, &bmesh.scatter_map(), &field);
    field
}

/// Record the elasticity extension solve: find the displacement `s` with
///
/// ```text
/// ∫ 2μ ε(s):ε(t) dx = ∫_Γ traction · t ds     for all t,   s = 0 on clamp_tags,
/// ```
///
/// where Γ runs over `force_tags`. The traction field is typically a
/// scattered boundary control; the solve is recorded before any mesh motion,
/// so the tape differentiates through it like any other linear solve.
pub fn elasticity_extend(
    tape: &Tape,
    space: &FESpace,
    mu: &FEFunction,
    traction: &FEFunction,
    force_tags: &[Tag],
    clamp_tags: &[Tag],
) -> Result<FEFunction> {
    let s = FEFunction::new(space, "extension displacement");
    let residual = mul(
        mul(scalar(2.0), coef(mu)),
        inner(sym_grad(coef(&s)), sym_grad(test(space))),
    )
    .dx()
        - inner(coef(traction), test(space)).ds(force_tags);
    let bc = DirichletBC::constant(space, clamp_tags, Tensor::V([0.0, 0.0]));
    tape.solve(&residual, &s, &[bc], &NewtonOptions::default())?;
    Ok(s)
}

/// One accepted descent step, as passed to the iteration observer and kept in
/// [`DescentResult::rows`].
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub j: f64,
    /// Riesz norm of the gradient at the *start* of the step.
    pub grad_norm: f64,
    /// Step length actually accepted.
    pub step: f64,
    /// Minimum scaled Jacobian of the probed mesh after the step (NaN when no
    /// mesh is being watched).
    pub min_quality: f64,
}

/// Render a descent trace as CSV, one row per accepted step.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iter,j,grad_norm,step,min_quality\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{}\n",
            r.iter, r.j, r.grad_norm, r.step, r.min_quality
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DescentStatus {
    /// Gradient norm fell below the tolerance.
    Converged,
    /// Iteration budget exhausted while still making progress.
    MaxIters,
    /// No acceptable step found within the backtracking budget.
    Stalled,
}

#[derive(Debug)]
pub struct DescentResult {
    pub status: DescentStatus,
    pub rows: Vec<TraceRow>,
    pub j_initial: f64,
    pub j_final: f64,
    /// Final accepted control values; the functional's tape is left replayed
    /// there.
    pub controls: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Absolute tolerance on the Riesz norm of the gradient.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Step shrink factor on rejection.
    pub backtrack: f64,
    /// Step growth factor after acceptance.
    pub grow: f64,
    pub max_backtracks: usize,
    /// Starting step; `None` scales the first step so the representative
    /// moves by about 0.01 in sup norm.
    pub initial_step: Option<f64>,
    /// Steps that drag the watched mesh below this scaled-Jacobian floor are
    /// rejected like any failed trial.
    pub quality_floor: f64,
    /// Mesh to probe after each trial evaluation (the live recorded mesh).
    pub quality_mesh: Option<Mesh>,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_iters: 100,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            backtrack: 0.5,
            grow: 2.0,
            max_backtracks: 30,
            initial_step: None,
            quality_floor: 0.1,
            quality_mesh: None,
        }
    }
}

/// Armijo backtracking descent on a single-control reduced functional, with
/// search directions given by `riesz`. Trial evaluations that fail (an
/// entangled mesh makes the forward solve error out) and trials that drag the
/// watched mesh quality below the floor are both treated as rejections: the
/// step is halved and the search continues. On exit the functional is left
/// replayed at the final accepted point.
pub fn optimize_descent(
    rf: &ReducedFunctional,
    riesz: &RieszMap,
    opts: &DescentOptions,
    mut on_iter: impl FnMut(&TraceRow),
) -> Result<DescentResult> {
    assert_eq!(rf.controls().len(), 1, "descent drives a single control");
    let mut x = rf.control_values().swap_remove(0);
    let mut j = rf.evaluate(std::slice::from_ref(&x))?;
    let j_initial = j;

    let mut rows: Vec<TraceRow> = Vec::new();
    let mut status = DescentStatus::MaxIters;
    let mut step = f64::NAN;

    for iter in 0..opts.max_iters {
        let g = rf.gradient()?.swap_remove(0);
        let d = riesz.represent(&g);
        // ⟨g, M⁻¹g⟩ — both the Armijo slope and the squared gradient norm.
        let slope = dot(&g, &d).max(0.0);
        let grad_norm = slope.sqrt();
        if grad_norm <= opts.grad_tol {
            status = DescentStatus::Converged;
            break;
        }
        if !step.is_finite() {
            step = opts.initial_step.unwrap_or_else(|| {
                let sup = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if sup > 0.0 {
                    0.01 / sup
                } else {
                    1.0
                }
            });
        }

        let mut t = step;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut xt = x.clone();
            axpy(-t, &d, &mut xt);
            match rf.evaluate(std::slice::from_ref(&xt)) {
                Err(_) => t *= opts.backtrack,
                Ok(jt) => {
                    let quality = opts
                        .quality_mesh
                        .as_ref()
                        .map(|m| m.min_scaled_jacobian());
                    let quality_ok = quality.is_none_or(|q| q >= opts.quality_floor);
                    if quality_ok && jt <= j - opts.armijo_c * t * slope {
                        accepted = Some((xt, jt, quality.unwrap_or(f64::NAN), t));
                        break;
                    }
                    t *= opts.backtrack;
                }
            }
        }
        let Some((xt, jt, quality, t)) = accepted else {
            // Restore the last accepted state before giving up.
            rf.evaluate(std::slice::from_ref(&x))?;
            status = DescentStatus::Stalled;
            break;
        };
        x = xt;
        j = jt;
        step = t * opts.grow;
        let row = TraceRow { iter, j, grad_norm, step: t, min_quality: quality };
        on_iter(&row);
        rows.push(row);
    }

    Ok(DescentResult {
        status,
        rows,
        j_initial,
        j_final: j,
        controls: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_matrix;
    use crate::mesh::extract_boundary;
    use crate::mesh::generate::{annulus, unit_square};
    use crate::tape::Control;
    use approx::assert_relative_eq;

    fn sampler_vec(seed: u64, n: usize) -> Vec<f64> {
        // Tiny LCG; the quality of the randomness is irrelevant here.
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 1.0
            })
            .collect()
    }

    #[test]
    fn harmonic_stiffness_reproduces_linear_profiles() {
        // rectangle markers: bottom 1, right 2, top 3, left 4
        let mesh = unit_square(6);
        let mu = harmonic_stiffness(&mesh, &[(4, 1.0), (2, 3.0)]).unwrap();
        let coords = mesh.coords();
        for (v, xy) in coords.iter().enumerate() {
            assert_relative_eq!(mu.dofs()[v], 1.0 + 2.0 * xy[0], max_relative = 1e-10);
        }
    }

    #[test]
    fn harmonic_stiffness_is_constant_for_constant_data() {
        let mesh = unit_square(4);
        let mu = harmonic_stiffness(&mesh, &[(1, 2.5), (2, 2.5), (3, 2.5), (4, 2.5)]).unwrap();
        for &v in mu.dofs().iter() {
            assert_relative_eq!(v, 2.5, max_relative = 1e-12);
        }
    }

    #[test]
    fn lame_field_respects_the_maximum_principle() {
        let mesh = crate::mesh::generate::channel_with_obstacle(32, 6, [0.5, 0.5], 0.13).unwrap();
        let lame = solve_lame_field(&mesh, &[1, 2, 3], 4).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in lame.mu.dofs().iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        assert!(lo >= 1.0 - 1e-10, "min μ = {lo}");
        assert!(hi <= 500.0 + 1e-10, "max μ = {hi}");
        let outer: Vec<usize> = mesh.vertices_with_tags(&[1, 2, 3]).unwrap();
        for v in outer {
            assert_relative_eq!(lame.mu.dofs()[v], 1.0, max_relative = 1e-12);
        }
        assert!(solve_lame_field(&mesh, &[], 4).is_err());
    }

    #[test]
    fn riesz_maps_invert_their_operators() {
        let mesh = unit_square(5);
        let space = FESpace::cg1_vec(&mesh);
        let x = sampler_vec(3, space.ndofs());

        // L², no constraints: represent(M x) == x.
        let l2 = RieszMap::l2(&space, &[]).unwrap();
        let m = assemble_matrix(&inner(trial(&space), test(&space)).dx()).unwrap();
        let mut mx = vec![0.0; space.ndofs()];
        m.mul_vec_acc(1.0, &x, &mut mx);
        for (a, b) in l2.represent(&mx).iter().zip(&x) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }

        // H¹: represent((M + K) x) == x.
        let h1 = RieszMap::h1(&space, &[]).unwrap();
        let a = inner(trial(&space), test(&space)).dx()
            + inner(grad(trial(&space)), grad(test(&space))).dx();
        let a = assemble_matrix(&a).unwrap();
        let mut ax = vec![0.0; space.ndofs()];
        a.mul_vec_acc(1.0, &x, &mut ax);
        for (a, b) in h1.represent(&ax).iter().zip(&x) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
    }

    #[test]
    fn elasticity_riesz_inverts_on_the_unconstrained_dofs() {
        let mesh = unit_square(5);
        let space = FESpace::cg1_vec(&mesh);
        let mu = harmonic_stiffness(&mesh, &[(1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0)]).unwrap();
        let map = RieszMap::elasticity(&space, &mu, &[1, 2, 3, 4]).unwrap();

        // x vanishing on the clamped rows: represent(A x) == x.
        let rows = constrained_rows(&space, &[1, 2, 3, 4]).unwrap();
        let mut x = sampler_vec(11, space.ndofs());
        for &r in &rows {
            x[r] = 0.0;
        }
        let a = assemble_matrix(&elastic_energy(&space, &mu)).unwrap();
        let mut ax = vec![0.0; space.ndofs()];
        a.mul_vec_acc(1.0, &x, &mut ax);
        for (a, b) in map.represent(&ax).iter().zip(&x) {
            assert_relative_eq!(a, b, max_relative = 1e-9, epsilon = 1e-12);
        }
        // …and the representative is clamped.
        for &r in &rows {
            assert_eq!(map.represent(&ax)[r], 0.0);
        }
    }

    #[test]
    fn riesz_operators_are_symmetric_after_constraining() {
        let mesh = unit_square(4);
        let space = FESpace::cg1_vec(&mesh);
        let mu = harmonic_stiffness(&mesh, &[(1, 1.0), (2, 5.0), (3, 1.0), (4, 5.0)]).unwrap();
        let rows = constrained_rows(&space, &[1, 3]).unwrap();

        let mut op = assemble_matrix(&elastic_energy(&space, &mu)).unwrap();
        op.constrain_symmetric(&rows);
        let x = sampler_vec(5, space.ndofs());
        let y = sampler_vec(6, space.ndofs());
        let (mut ox, mut oy) = (vec![0.0; x.len()], vec![0.0; y.len()]);
        op.mul_vec_acc(1.0, &x, &mut ox);
        op.mul_vec_acc(1.0, &y, &mut oy);
        let asym = (dot(&ox, &y) - dot(&x, &oy)).abs();
        assert!(asym <= 1e-14 * dot(&ox, &y).abs().max(1.0), "asymmetry {asym}");
    }

    #[test]
    fn boundary_riesz_inverts_the_chain_mass_matrix() {
        let mesh = annulus(12, 4, [0.5, 0.0], 0.2, 1.0).unwrap();
        let chain = extract_boundary(&mesh, &[2]).unwrap();
        let map = RieszMap::boundary_l2(&chain, &[2]).unwrap();
        assert_eq!(map.ncontrols(), chain.ndofs());

        let space = FESpace::cg1_vec(&mesh);
        let m = assemble_matrix(&inner(trial(&space), test(&space)).ds(&[2])).unwrap();
        let slots = chain.scatter_map();
        let g = sampler_vec(9, chain.ndofs());
        let mut full = vec![0.0; space.ndofs()];
        for (slot, &row) in slots.iter().enumerate() {
            full[row] = g[slot];
        }
        let mut mg = vec![0.0; space.ndofs()];
        m.mul_vec_acc(1.0, &full, &mut mg);
        let dual: Vec<f64> = slots.iter().map(|&r| mg[r]).collect();
        for (a, b) in map.represent(&dual).iter().zip(&g) {
            assert_relative_eq!(a, b, max_relative = 1e-10, epsilon = 1e-13);
        }
    }

    #[test]
    fn extension_is_zero_for_zero_traction_and_linear_in_the_control() {
        let mesh = annulus(10, 3, [0.5, 0.0], 0.2, 1.0).unwrap();
        let space = FESpace::cg1_vec(&mesh);
        let mu = harmonic_stiffness(&mesh, &[(1, 1.0), (2, 50.0)]).unwrap();
        let chain = extract_boundary(&mesh, &[2]).unwrap();

        let run = |h: &[f64]| -> Vec<f64> {
            let tape = Tape::new();
            let control = RawVec::from_values(h.to_vec(), "h");
            let load = transfer_from_boundary(&tape, &chain, &control, &space);
            let s = elasticity_extend(&tape, &space, &mu, &load, &[2], &[1]).unwrap();
            let dofs = s.dofs().clone();
            dofs
        };

        let zero = run(&vec![0.0; chain.ndofs()]);
        assert!(zero.iter().all(|v| v.abs() < 1e-12));

        let h = sampler_vec(21, chain.ndofs());
        let s1 = run(&h);
        let h3: Vec<f64> = h.iter().map(|v| 3.0 * v).collect();
        let s3 = run(&h3);
        for (a, b) in s3.iter().zip(&s1) {
            assert_relative_eq!(a, &(3.0 * b), max_relative = 1e-12, epsilon = 1e-14);
        }
        // The displacement reaches past the boundary into the volume.
        let interior_motion = s1.iter().enumerate().any(|(d, v)| {
            !chain.scatter_map().contains(&d) && v.abs() > 1e-6
        });
        assert!(interior_motion, "extension should not vanish off the chain");
    }

    #[test]
    fn descent_minimizes_a_quadratic_model() {
        // J(θ) = ‖θ − θ*‖²_{L²} over a CG1 vector field, riesz = the same
        // mass matrix, so the representative is an exact Newton direction up
        // to the factor 2.
        let mesh = unit_square(4);
        let space = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&space, "theta");
        let target = FEFunction::new(&space, "target");
        target.set_dofs(&sampler_vec(31, space.ndofs()));

        let tape = Tape::new();
        let diff = crate::forms::sub(coef(&theta), coef(&target));
        let j = tape.assemble(&inner(diff.clone(), diff).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(theta.clone())]).unwrap();

        let riesz = RieszMap::l2(&space, &[]).unwrap();
        let opts = DescentOptions { max_iters: 50, grad_tol: 1e-9, ..Default::default() };
        let result = optimize_descent(&rf, &riesz, &opts, |_| {}).unwrap();

        assert!(result.j_final <= 1e-6, "J = {}", result.j_final);
        assert!(result.rows.len() <= 50);
        assert!(matches!(result.status, DescentStatus::Converged | DescentStatus::MaxIters));
        // Tape is left at the accepted minimizer.
        assert_relative_eq!(
            rf.evaluate(&[result.controls.clone()]).unwrap(),
            result.j_final,
            max_relative = 1e-12,
            epsilon = 1e-15
        );
    }

    #[test]
    fn descent_stalls_cleanly_when_no_step_passes_the_quality_floor() {
        let mesh = unit_square(4);
        let space = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&space, "theta");
        let target = FEFunction::new(&space, "target");
        target.set_dofs(&vec![0.25; space.ndofs()]);

        let tape = Tape::new();
        let diff = crate::forms::sub(coef(&theta), coef(&target));
        let j = tape.assemble(&inner(diff.clone(), diff).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(theta.clone())]).unwrap();
        let j0 = rf.evaluate(&[vec![0.0; space.ndofs()]]).unwrap();

        // A floor above 1 is unattainable for any triangle, so every trial is
        // rejected and the loop reports a stall with the state restored.
        let opts = DescentOptions {
            quality_floor: 1.5,
            quality_mesh: Some(mesh.clone()),
            max_backtracks: 5,
            ..Default::default()
        };
        let riesz = RieszMap::identity(space.ndofs());
        let result = optimize_descent(&rf, &riesz, &opts, |_| {}).unwrap();
        assert_eq!(result.status, DescentStatus::Stalled);
        assert!(result.rows.is_empty());
        assert_relative_eq!(result.j_final, j0, max_relative = 1e-14);
    }
}
