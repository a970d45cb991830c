//! Derivative sweeps over a recorded tape.
//!
//! Three propagation modes share the recorded blocks:
//!
//! * **adjoint** — one reverse pass accumulating sensitivities ("bars") of
//!   the output with respect to every active variable; gradients fall out at
//!   the control versions.
//! * **tangent** — one forward pass propagating directional derivatives
//!   ("dots") of the controls through every active block.
//! * **forward-over-reverse** — a tangent pass followed by a reverse pass
//!   that carries both bars and their directional derivatives ("hats"); the
//!   hats at the controls are the Hessian action.
//!
//! Solve blocks are differentiated through the implicit function theorem:
//! with residual `F(u, m) = 0`, the Jacobian `A = dF/du` is assembled once
//! per block and factorized; the adjoint solves `Aᵀλ = ξ` with Dirichlet
//! rows homogenized, and parameter sensitivities pull back through the
//! derivative operators `dF/dm`. Mesh-coordinate dependencies use the shape
//! derivative of the residual with a vector vertex-field direction, so
//! moving-domain problems differentiate with the same machinery.
//!
//! Parameter operators are never materialized as matrices. Products like
//! `(∂F/∂m)ᵀ λ` assemble the derivative form with its test slot contracted
//! against the multiplier, and `(∂F/∂m)·ḋ` differentiates along a concrete
//! direction field — both rank-1 assemblies. Only the Jacobian itself is
//! built as a matrix (it has to be factorized). The derivative forms are
//! cached per block against reusable holder functions whose dof values are
//! swapped in before each assembly.

use super::{Block, Dep, DepKind, ReducedFunctional, Value, VarId};
use crate::error::{Error, Result};
use crate::fem::{assemble_matrix, assemble_vector, merged_bc_dofs, FEFunction, FESpace};
use crate::forms::form::Form;
use crate::forms::transform::{contract_test, gateaux_derivative, shape_derivative};
use crate::forms::{coef, trial};
use crate::linalg::{self, Triplets};
use crate::mesh::Mesh;
use crate::tape::ObjId;
use std::collections::HashMap;

/// Identity of a differentiation target within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum Wrt {
    Coef(ObjId),
    Mesh(ObjId),
}

/// How a derivative form's open slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Contract {
    /// Direction left as a trial argument (operator form).
    Open,
    /// Test argument replaced by the per-space multiplier holder.
    Test,
    /// Direction supplied as the per-space direction holder.
    Dir,
}

/// Cache key for derivative forms: block index, what the form was
/// differentiated with respect to, (for second derivatives) along which
/// dependency the extra direction points, and how the slots are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct CacheKey {
    block: usize,
    wrt: Wrt,
    dir: Option<Wrt>,
    slot: Contract,
}

fn dep_wrt(dep: &Dep) -> Wrt {
    match &dep.kind {
        DepKind::Coefficient(f) => Wrt::Coef(f.id()),
        DepKind::MeshCoords(m) => Wrt::Mesh(m.id()),
    }
}

/// Sparse map from variables to seed values, densified on demand.
struct Seeds {
    data: Vec<Option<Value>>,
}

impl Seeds {
    fn new(n: usize) -> Seeds {
        Seeds {
            data: vec![None; n],
        }
    }

    fn scalar(&self, v: VarId) -> f64 {
        match &self.data[v.0] {
            Some(Value::Scalar(x)) => *x,
            Some(Value::Vec(_)) => panic!("scalar seed expected"),
            None => 0.0,
        }
    }

    fn vec(&self, v: VarId) -> Option<&[f64]> {
        match &self.data[v.0] {
            Some(Value::Vec(x)) => Some(x),
            Some(Value::Scalar(_)) => panic!("vector seed expected"),
            None => None,
        }
    }

    fn add_scalar(&mut self, v: VarId, x: f64) {
        match &mut self.data[v.0] {
            Some(Value::Scalar(s)) => *s += x,
            None => self.data[v.0] = Some(Value::Scalar(x)),
            Some(Value::Vec(_)) => panic!("seed kind mismatch"),
        }
    }

    fn add_vec_scaled(&mut self, v: VarId, c: f64, x: &[f64]) {
        match &mut self.data[v.0] {
            Some(Value::Vec(s)) => linalg::axpy(c, x, s),
            None => {
                let mut s = vec![0.0; x.len()];
                linalg::axpy(c, x, &mut s);
                self.data[v.0] = Some(Value::Vec(s));
            }
            Some(Value::Scalar(_)) => panic!("seed kind mismatch"),
        }
    }

    fn set_vec(&mut self, v: VarId, x: Vec<f64>) {
        self.data[v.0] = Some(Value::Vec(x));
    }

    fn set_scalar(&mut self, v: VarId, x: f64) {
        self.data[v.0] = Some(Value::Scalar(x));
    }
}

/// First derivative of a functional or residual with respect to one
/// dependency, with the direction left open as a trial slot.
fn first_order_form(rf: &ReducedFunctional, block: usize, form: &Form, dep: &Dep) -> Result<Form> {
    let key = CacheKey {
        block,
        wrt: dep_wrt(dep),
        dir: None,
        slot: Contract::Open,
    };
    rf.cached_form(key, || match &dep.kind {
        DepKind::Coefficient(f) => Ok(gateaux_derivative(form, f, &trial(f.space()))),
        DepKind::MeshCoords(m) => shape_derivative(form, &trial(&rf.vec_space(m))),
    })
}

/// First derivative of `form` with respect to `dep` applied to a concrete
/// direction: the direction is the reusable per-space holder, so setting its
/// dofs and assembling yields `(∂form/∂dep)·d`. Returns the form and holder.
fn first_order_applied(
    rf: &ReducedFunctional,
    block: usize,
    form: &Form,
    dep: &Dep,
) -> Result<(Form, FEFunction)> {
    let dir_fn = match &dep.kind {
        DepKind::Coefficient(f) => rf.dir_fn(f.space()),
        DepKind::MeshCoords(m) => rf.dir_fn(&rf.vec_space(m)),
    };
    let key = CacheKey {
        block,
        wrt: dep_wrt(dep),
        dir: None,
        slot: Contract::Dir,
    };
    let form = rf.cached_form(key, || match &dep.kind {
        DepKind::Coefficient(f) => Ok(gateaux_derivative(form, f, &coef(&dir_fn))),
        DepKind::MeshCoords(_) => shape_derivative(form, &coef(&dir_fn)),
    })?;
    Ok((form, dir_fn))
}

/// Derivative of `base` (itself a first derivative with respect to `wrt`)
/// along dependency `dir_dep`, with the direction supplied by the reusable
/// per-space direction function. Returns the form together with the function
/// that must hold the direction values when the form is assembled.
fn second_order_form(
    rf: &ReducedFunctional,
    block: usize,
    base: &Form,
    wrt: Wrt,
    dir_dep: &Dep,
) -> Result<(Form, FEFunction)> {
    let dir_fn = match &dir_dep.kind {
        DepKind::Coefficient(f) => rf.dir_fn(f.space()),
        DepKind::MeshCoords(m) => rf.dir_fn(&rf.vec_space(m)),
    };
    let key = CacheKey {
        block,
        wrt,
        dir: Some(dep_wrt(dir_dep)),
        slot: Contract::Open,
    };
    let form = rf.cached_form(key, || match &dir_dep.kind {
        DepKind::Coefficient(f) => Ok(gateaux_derivative(base, f, &coef(&dir_fn))),
        DepKind::MeshCoords(_) => shape_derivative(base, &coef(&dir_fn)),
    })?;
    Ok((form, dir_fn))
}

/// The multiplier contraction of a derivative form: its test argument is
/// replaced by the per-space reverse holder, so a vector assembly yields
/// `(derivative operator)ᵀ · holder`. The holder is shared per test space;
/// set its dofs (λ or λ̇) before assembling.
fn contracted(
    rf: &ReducedFunctional,
    block: usize,
    wrt: Wrt,
    dir: Option<Wrt>,
    open: &Form,
    test_sp: &FESpace,
) -> Result<Form> {
    let rev = rf.rev_fn(test_sp);
    let key = CacheKey {
        block,
        wrt,
        dir,
        slot: Contract::Test,
    };
    rf.cached_form(key, || Ok(contract_test(open, &rev)))
}

/// The Jacobian dependency of a solve: the solution itself.
fn solution_dep(u_fn: &FEFunction, u: VarId) -> Dep {
    Dep {
        var: u,
        kind: DepKind::Coefficient(u_fn.clone()),
    }
}

/// Install the forward state a block saw, so derivative forms assemble with
/// the right coefficient and coordinate values.
fn install_block_state(rf: &ReducedFunctional, block: &Block) {
    let tape = rf.tape();
    match block {
        Block::Assemble { deps, .. } => {
            for d in deps {
                tape.install(d.var);
            }
        }
        Block::Solve { deps, u, .. } => {
            for d in deps {
                tape.install(d.var);
            }
            tape.install(*u);
        }
        _ => {}
    }
}

/// Guard for the supported Dirichlet class: once the mesh under a solve is
/// itself control-dependent, coordinate-defined boundary values would pick
/// up their own shape derivative, which the solve transpose does not model.
fn check_bcs(rf: &ReducedFunctional, block: &Block) -> Result<()> {
    if let Block::Solve { bcs, deps, .. } = block {
        let mesh_active = deps.iter().any(|d| {
            matches!(d.kind, DepKind::MeshCoords(_)) && rf.is_active(d.var)
        });
        if mesh_active {
            if let Some(bc) = bcs.iter().find(|bc| bc.is_coordinate_dependent()) {
                return Err(Error::CoordinateBcOnMovingBoundary {
                    marker: bc.tags().first().copied().unwrap_or(0),
                });
            }
        }
    }
    Ok(())
}

/// Assembled Jacobian of a solve block, its factorizations, and the boundary
/// rows, shared by the adjoint and tangent treatments.
struct SolveLinearization {
    raw: Triplets,
    bc_rows: Vec<usize>,
}

impl SolveLinearization {
    fn build(
        rf: &ReducedFunctional,
        block_idx: usize,
        residual: &Form,
        u_fn: &FEFunction,
        u: VarId,
        bcs: &[crate::fem::DirichletBC],
    ) -> Result<SolveLinearization> {
        let jac = first_order_form(rf, block_idx, residual, &solution_dep(u_fn, u))?;
        let raw = assemble_matrix(&jac)?;
        let bc_rows: Vec<usize> = merged_bc_dofs(u_fn.space(), bcs)?
            .into_iter()
            .map(|(d, _)| d)
            .collect();
        Ok(SolveLinearization { raw, bc_rows })
    }

    fn mask(&self, mut v: Vec<f64>) -> Vec<f64> {
        for &d in &self.bc_rows {
            v[d] = 0.0;
        }
        v
    }

    /// Solve `A x = mask(rhs)` with Dirichlet rows replaced by identity
    /// (tangent direction of the state).
    fn solve_forward(&self, rhs: Vec<f64>) -> Result<Vec<f64>> {
        let mut a = self.raw.clone();
        a.replace_rows_identity(&self.bc_rows);
        Ok(a.into_csc().factor()?.solve(&self.mask(rhs)))
    }

    /// Factor `Aᵀ` with Dirichlet rows homogenized, for one or more adjoint
    /// solves against masked right-hand sides.
    fn adjoint_factor(&self) -> Result<crate::linalg::Factor> {
        let mut at = self.raw.clone().transpose();
        at.replace_rows_identity(&self.bc_rows);
        at.into_csc().factor()
    }
}

/// Forward tangent pass: directional derivatives of every active variable.
fn tangent_pass(rf: &ReducedFunctional, dirs: &[Vec<f64>]) -> Result<Seeds> {
    let tape = rf.tape();
    assert_eq!(
        dirs.len(),
        rf.controls().len(),
        "one direction per control"
    );
    let nvars = {
        let n = tape.data.borrow().vars.len();
        n
    };
    let mut dots = Seeds::new(nvars);
    for (control, (var, dir)) in rf
        .controls()
        .iter()
        .zip(rf.control_vars().iter().zip(dirs))
    {
        assert_eq!(dir.len(), control.len(), "direction length mismatch");
        dots.set_vec(*var, dir.clone());
    }

    let nblocks = tape.num_blocks();
    for i in 0..nblocks {
        let block = tape.block(i);
        if !rf.is_active(block.writes()) {
            continue;
        }
        check_bcs(rf, &block)?;
        match &block {
            Block::MeshMove {
                mesh_in,
                theta,
                mesh_out,
                ..
            } => {
                let n = tape.value(*mesh_out).as_vec().len();
                let mut d = vec![0.0; n];
                if let Some(x) = dots.vec(*mesh_in) {
                    linalg::axpy(1.0, x, &mut d);
                }
                if let Some(x) = dots.vec(*theta) {
                    linalg::axpy(1.0, x, &mut d);
                }
                dots.set_vec(*mesh_out, d);
            }
            Block::Scatter { src, out, map, .. } => {
                let n = tape.value(*out).as_vec().len();
                let mut d = vec![0.0; n];
                if let Some(x) = dots.vec(*src) {
                    for (i, &t) in map.iter().enumerate() {
                        d[t] = x[i];
                    }
                }
                dots.set_vec(*out, d);
            }
            Block::Assign { out, terms, .. } => {
                let n = tape.value(*out).as_vec().len();
                let mut d = vec![0.0; n];
                for &(c, v) in terms {
                    if let Some(x) = dots.vec(v) {
                        linalg::axpy(c, x, &mut d);
                    }
                }
                dots.set_vec(*out, d);
            }
            Block::Sum { out, terms, .. } => {
                let d = terms.iter().map(|&(c, v)| c * dots.scalar(v)).sum();
                dots.set_scalar(*out, d);
            }
            Block::ScalarMul { out, a, b } => {
                let (va, vb) = (tape.value(*a).as_scalar(), tape.value(*b).as_scalar());
                dots.set_scalar(*out, dots.scalar(*a) * vb + va * dots.scalar(*b));
            }
            Block::ScalarDiv { out, a, b } => {
                let (va, vb) = (tape.value(*a).as_scalar(), tape.value(*b).as_scalar());
                let d = dots.scalar(*a) / vb - va * dots.scalar(*b) / (vb * vb);
                dots.set_scalar(*out, d);
            }
            Block::Assemble { out, form, deps } => {
                install_block_state(rf, &block);
                let mut jdot = 0.0;
                for dep in deps {
                    if !rf.is_active(dep.var) {
                        continue;
                    }
                    let Some(dot) = dots.vec(dep.var) else {
                        continue;
                    };
                    let gform = first_order_form(rf, i, form, dep)?;
                    if gform.is_empty() {
                        continue;
                    }
                    let g = assemble_vector(&gform)?;
                    jdot += linalg::dot(&g, dot);
                }
                dots.set_scalar(*out, jdot);
            }
            Block::Solve {
                u,
                u_fn,
                residual,
                bcs,
                deps,
                ..
            } => {
                install_block_state(rf, &block);
                let lin = SolveLinearization::build(rf, i, residual, u_fn, *u, bcs)?;
                let mut rhs = vec![0.0; u_fn.space().ndofs()];
                for dep in deps {
                    if !rf.is_active(dep.var) {
                        continue;
                    }
                    let Some(dot) = dots.vec(dep.var).map(|x| x.to_vec()) else {
                        continue;
                    };
                    let (bdot_form, dir_fn) = first_order_applied(rf, i, residual, dep)?;
                    if bdot_form.is_empty() {
                        continue;
                    }
                    dir_fn.set_dofs(&dot);
                    let b = assemble_vector(&bdot_form)?;
                    linalg::axpy(-1.0, &b, &mut rhs);
                }
                dots.set_vec(*u, lin.solve_forward(rhs)?);
            }
        }
    }
    Ok(dots)
}

/// Reverse pass: bars always; hats too when tangent dots are supplied.
fn reverse_pass(rf: &ReducedFunctional, dots: Option<&Seeds>) -> Result<(Seeds, Seeds)> {
    let tape = rf.tape();
    let nvars = tape.data.borrow().vars.len();
    let mut bars = Seeds::new(nvars);
    let mut hats = Seeds::new(nvars);
    bars.set_scalar(rf.output_var(), 1.0);
    if dots.is_some() {
        hats.set_scalar(rf.output_var(), 0.0);
    }

    let nblocks = tape.num_blocks();
    for i in (0..nblocks).rev() {
        let block = tape.block(i);
        if !rf.is_active(block.writes()) {
            continue;
        }
        check_bcs(rf, &block)?;
        match &block {
            Block::MeshMove {
                mesh_in,
                theta,
                mesh_out,
                ..
            } => {
                if let Some(xi) = bars.vec(*mesh_out).map(|x| x.to_vec()) {
                    if rf.is_active(*mesh_in) {
                        bars.add_vec_scaled(*mesh_in, 1.0, &xi);
                    }
                    if rf.is_active(*theta) {
                        bars.add_vec_scaled(*theta, 1.0, &xi);
                    }
                }
                if dots.is_some() {
                    if let Some(h) = hats.vec(*mesh_out).map(|x| x.to_vec()) {
                        if rf.is_active(*mesh_in) {
                            hats.add_vec_scaled(*mesh_in, 1.0, &h);
                        }
                        if rf.is_active(*theta) {
                            hats.add_vec_scaled(*theta, 1.0, &h);
                        }
                    }
                }
            }
            Block::Scatter { src, out, map, .. } => {
                let pull = |seeds: &mut Seeds, from: VarId, to: VarId| {
                    if let Some(xi) = seeds.vec(from).map(|x| x.to_vec()) {
                        let gathered: Vec<f64> = map.iter().map(|&t| xi[t]).collect();
                        seeds.add_vec_scaled(to, 1.0, &gathered);
                    }
                };
                if rf.is_active(*src) {
                    pull(&mut bars, *out, *src);
                    if dots.is_some() {
                        pull(&mut hats, *out, *src);
                    }
                }
            }
            Block::Assign { out, terms, .. } => {
                for seeds in [&mut bars, &mut hats] {
                    if let Some(xi) = seeds.vec(*out).map(|x| x.to_vec()) {
                        for &(c, v) in terms {
                            if rf.is_active(v) {
                                seeds.add_vec_scaled(v, c, &xi);
                            }
                        }
                    }
                }
            }
            Block::Sum { out, terms, .. } => {
                for seeds in [&mut bars, &mut hats] {
                    let xi = seeds.scalar(*out);
                    if xi != 0.0 {
                        for &(c, v) in terms {
                            if rf.is_active(v) {
                                seeds.add_scalar(v, c * xi);
                            }
                        }
                    }
                }
            }
            Block::ScalarMul { out, a, b } => {
                let (va, vb) = (tape.value(*a).as_scalar(), tape.value(*b).as_scalar());
                let xi = bars.scalar(*out);
                if rf.is_active(*a) {
                    bars.add_scalar(*a, xi * vb);
                }
                if rf.is_active(*b) {
                    bars.add_scalar(*b, xi * va);
                }
                if let Some(dots) = dots {
                    let (da, db) = (dots.scalar(*a), dots.scalar(*b));
                    let hi = hats.scalar(*out);
                    if rf.is_active(*a) {
                        hats.add_scalar(*a, hi * vb + xi * db);
                    }
                    if rf.is_active(*b) {
                        hats.add_scalar(*b, hi * va + xi * da);
                    }
                }
            }
            Block::ScalarDiv { out, a, b } => {
                let (va, vb) = (tape.value(*a).as_scalar(), tape.value(*b).as_scalar());
                let xi = bars.scalar(*out);
                if rf.is_active(*a) {
                    bars.add_scalar(*a, xi / vb);
                }
                if rf.is_active(*b) {
                    bars.add_scalar(*b, -xi * va / (vb * vb));
                }
                if let Some(dots) = dots {
                    let (da, db) = (dots.scalar(*a), dots.scalar(*b));
                    let hi = hats.scalar(*out);
                    if rf.is_active(*a) {
                        hats.add_scalar(*a, hi / vb - xi * db / (vb * vb));
                    }
                    if rf.is_active(*b) {
                        hats.add_scalar(
                            *b,
                            -hi * va / (vb * vb) - xi * da / (vb * vb)
                                + 2.0 * xi * va * db / (vb * vb * vb),
                        );
                    }
                }
            }
            Block::Assemble { out, form, deps } => {
                let xi = bars.scalar(*out);
                let hi = dots.map(|_| hats.scalar(*out)).unwrap_or(0.0);
                if xi == 0.0 && hi == 0.0 {
                    continue;
                }
                install_block_state(rf, &block);
                for dep in deps {
                    if !rf.is_active(dep.var) {
                        continue;
                    }
                    let gform = first_order_form(rf, i, form, dep)?;
                    if gform.is_empty() {
                        continue;
                    }
                    let g = assemble_vector(&gform)?;
                    if xi != 0.0 {
                        bars.add_vec_scaled(dep.var, xi, &g);
                    }
                    if let Some(dots) = dots {
                        // d/de (xi * g_d) = hat * g_d + xi * sum_e D_e g_d[dot_e]
                        if hi != 0.0 {
                            hats.add_vec_scaled(dep.var, hi, &g);
                        }
                        if xi != 0.0 {
                            for dir_dep in deps {
                                if !rf.is_active(dir_dep.var) {
                                    continue;
                                }
                                let Some(dot) = dots.vec(dir_dep.var).map(|x| x.to_vec()) else {
                                    continue;
                                };
                                let (h_form, dir_fn) =
                                    second_order_form(rf, i, &gform, dep_wrt(dep), dir_dep)?;
                                if h_form.is_empty() {
                                    continue;
                                }
                                dir_fn.set_dofs(&dot);
                                let h = assemble_vector(&h_form)?;
                                hats.add_vec_scaled(dep.var, xi, &h);
                            }
                        }
                    }
                }
            }
            Block::Solve {
                u,
                u_fn,
                residual,
                bcs,
                deps,
                ..
            } => {
                let xi = bars.vec(*u).map(|x| x.to_vec());
                let uhat = hats.vec(*u).map(|x| x.to_vec());
                if xi.is_none() && uhat.is_none() {
                    continue;
                }
                install_block_state(rf, &block);
                let lin = SolveLinearization::build(rf, i, residual, u_fn, *u, bcs)?;
                let factor = lin.adjoint_factor()?;
                let n = u_fn.space().ndofs();
                let lambda = match &xi {
                    Some(xi) => factor.solve(&lin.mask(xi.clone())),
                    None => vec![0.0; n],
                };
                // every contraction below reads the multiplier from this
                // holder; it carries λ except while the bᵀλ̇ terms assemble
                let test_sp = residual
                    .argument_spaces()
                    .0
                    .unwrap_or_else(|| u_fn.space().clone());
                let rev = rf.rev_fn(&test_sp);
                rev.set_dofs(&lambda);

                // For Hessians, differentiate the adjoint relation
                // A(u,m)ᵀ λ = ξ along the tangent direction:
                // Aᵀ λ̇ = ξ̇ − (dA)ᵀ λ, with dA the directional derivative of
                // the Jacobian through every active dependency (the solution
                // itself included, via its tangent from the forward pass).
                let jac_dep = solution_dep(u_fn, *u);
                let mut all_deps: Vec<&Dep> = deps.iter().collect();
                all_deps.push(&jac_dep);
                let lambda_dot = match dots {
                    None => None,
                    Some(dots) => {
                        let jac_form = first_order_form(rf, i, residual, &jac_dep)?;
                        let mut rhs = uhat.unwrap_or_else(|| vec![0.0; n]);
                        if xi.is_some() {
                            for dir_dep in &all_deps {
                                if !rf.is_active(dir_dep.var) {
                                    continue;
                                }
                                let Some(dot) = dots.vec(dir_dep.var).map(|x| x.to_vec())
                                else {
                                    continue;
                                };
                                let (da_form, dir_fn) =
                                    second_order_form(rf, i, &jac_form, dep_wrt(&jac_dep), dir_dep)?;
                                if da_form.is_empty() {
                                    continue;
                                }
                                let dat = contracted(
                                    rf,
                                    i,
                                    dep_wrt(&jac_dep),
                                    Some(dep_wrt(dir_dep)),
                                    &da_form,
                                    &test_sp,
                                )?;
                                dir_fn.set_dofs(&dot);
                                let v = assemble_vector(&dat)?;
                                linalg::axpy(-1.0, &v, &mut rhs);
                            }
                        }
                        Some(factor.solve(&lin.mask(rhs)))
                    }
                };

                for dep in deps {
                    if !rf.is_active(dep.var) {
                        continue;
                    }
                    let bform = first_order_form(rf, i, residual, dep)?;
                    if bform.is_empty() {
                        continue;
                    }
                    let bt = contracted(rf, i, dep_wrt(dep), None, &bform, &test_sp)?;
                    if xi.is_some() {
                        let bar = assemble_vector(&bt)?;
                        bars.add_vec_scaled(dep.var, -1.0, &bar);
                    }
                    let (Some(dots), Some(lambda_dot)) = (dots, &lambda_dot) else {
                        continue;
                    };
                    let m = tape.value(dep.var).as_vec().len();
                    let mut hat = vec![0.0; m];
                    if xi.is_some() {
                        for dir_dep in &all_deps {
                            if !rf.is_active(dir_dep.var) {
                                continue;
                            }
                            let Some(dot) = dots.vec(dir_dep.var).map(|x| x.to_vec()) else {
                                continue;
                            };
                            let (db_form, dir_fn) =
                                second_order_form(rf, i, &bform, dep_wrt(dep), dir_dep)?;
                            if db_form.is_empty() {
                                continue;
                            }
                            let dbt = contracted(
                                rf,
                                i,
                                dep_wrt(dep),
                                Some(dep_wrt(dir_dep)),
                                &db_form,
                                &test_sp,
                            )?;
                            dir_fn.set_dofs(&dot);
                            let v = assemble_vector(&dbt)?;
                            linalg::axpy(-1.0, &v, &mut hat);
                        }
                    }
                    rev.set_dofs(lambda_dot);
                    let v = assemble_vector(&bt)?;
                    linalg::axpy(-1.0, &v, &mut hat);
                    rev.set_dofs(&lambda);
                    hats.add_vec_scaled(dep.var, 1.0, &hat);
                }
            }
        }
    }
    Ok((bars, hats))
}

fn collect(rf: &ReducedFunctional, seeds: &Seeds) -> Vec<Vec<f64>> {
    rf.controls()
        .iter()
        .zip(rf.control_vars())
        .map(|(c, &v)| {
            seeds
                .vec(v)
                .map(|x| x.to_vec())
                .unwrap_or_else(|| vec![0.0; c.len()])
        })
        .collect()
}

pub(crate) fn adjoint_gradient(rf: &ReducedFunctional) -> Result<Vec<Vec<f64>>> {
    let (bars, _) = reverse_pass(rf, None)?;
    Ok(collect(rf, &bars))
}

pub(crate) fn tlm(rf: &ReducedFunctional, dirs: &[Vec<f64>]) -> Result<f64> {
    let dots = tangent_pass(rf, dirs)?;
    Ok(dots.scalar(rf.output_var()))
}

pub(crate) fn hessian_action(rf: &ReducedFunctional, dirs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dots = tangent_pass(rf, dirs)?;
    let (_, hats) = reverse_pass(rf, Some(&dots))?;
    Ok(collect(rf, &hats))
}

impl ReducedFunctional {
    /// Vector vertex-displacement space of a mesh, cached so derivative forms
    /// built against it stay identical across sweeps.
    pub(crate) fn vec_space(&self, mesh: &Mesh) -> crate::fem::FESpace {
        let mut spaces = self.vec_spaces.borrow_mut();
        spaces
            .entry(mesh.id())
            .or_insert_with(|| crate::fem::FESpace::cg1_vec(mesh))
            .clone()
    }
}

pub(crate) type VecSpaceMap = HashMap<ObjId, crate::fem::FESpace>;
