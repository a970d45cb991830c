//! Derivative transforms on forms.
//!
//! All derivatives are materialized as new forms through one tangent engine:
//!
//! * Gâteaux derivatives perturb a coefficient along a direction and leave
//!   the mesh alone.
//! * Shape derivatives perturb the coordinate field along a vector direction
//!   `V`. They are computed in pulled-back form: dof vectors are frozen, the
//!   reference-to-physical map moves. Concretely the tangent of the
//!   coordinate terminal is `V`, every `grad` picks up the correction
//!   `-grad(e) . grad(V)` (and `div` the matching trace form), and each cell
//!   integrand gains the volume term `f * div(V)`. With these rules the
//!   assembled derivative is the exact derivative of the assembled value
//!   under vertex displacement along `V`, which is what the Taylor tests
//!   verify.
//!
//! The engine is linear in the direction expression, so applying it twice
//! (with trial-function directions or concrete fields) yields consistent
//! second derivatives — the property the Hessian sweeps rely on.

use super::expr::{self, Expr, ExprNode, Shape, Slot};
use super::form::{Form, Integral, Measure};
use crate::error::{Error, Result};
use crate::fem::FEFunction;
use std::collections::HashMap;

struct TangentCtx<'a> {
    coeff_dir: &'a dyn Fn(&FEFunction) -> Option<Expr>,
    /// Direction of the coordinate field; enables the pullback corrections.
    shape_dir: Option<Expr>,
}

type Memo = HashMap<*const ExprNode, Option<Expr>>;

fn nz(e: Expr) -> Option<Expr> {
    if e.is_zero() {
        None
    } else {
        Some(e)
    }
}

fn opt_add(a: Option<Expr>, b: Option<Expr>) -> Option<Expr> {
    match (a, b) {
        (None, x) | (x, None) => x,
        (Some(a), Some(b)) => nz(expr::add(a, b)),
    }
}

fn opt_sub(a: Option<Expr>, b: Option<Expr>) -> Option<Expr> {
    match (a, b) {
        (x, None) => x,
        (None, Some(b)) => Some(expr::neg(b)),
        (Some(a), Some(b)) => nz(expr::sub(a, b)),
    }
}

/// Tangent (materialized directional derivative) of `e`. `None` means
/// identically zero.
fn tangent(e: &Expr, ctx: &TangentCtx, memo: &mut Memo) -> Option<Expr> {
    if let Some(hit) = memo.get(&e.ptr()) {
        return hit.clone();
    }
    let out = tangent_uncached(e, ctx, memo);
    memo.insert(e.ptr(), out.clone());
    out
}

fn tangent_uncached(e: &Expr, ctx: &TangentCtx, memo: &mut Memo) -> Option<Expr> {
    use expr::{cos, div, div_by, dot, grad, identity, inner, mul, neg, powi, scalar, sin, sub, transpose};
    match e.node() {
        ExprNode::Constant(_) | ExprNode::Identity => None,
        ExprNode::Coordinate(_) => ctx.shape_dir.clone(),
        // Normals only occur in facet integrals, which shape differentiation
        // rejects up front; under Gateaux derivatives they are constant.
        ExprNode::FacetNormal(_) => None,
        ExprNode::Argument { .. } => None,
        ExprNode::Coefficient(f) => (ctx.coeff_dir)(f),
        ExprNode::Component { base, index } => {
            tangent(base, ctx, memo).map(|t| expr::component(t, *index))
        }
        ExprNode::Add(a, b) => opt_add(tangent(a, ctx, memo), tangent(b, ctx, memo)),
        ExprNode::Sub(a, b) => opt_sub(tangent(a, ctx, memo), tangent(b, ctx, memo)),
        ExprNode::Neg(a) => tangent(a, ctx, memo).map(neg),
        ExprNode::Mul(a, b) => {
            let da = tangent(a, ctx, memo).map(|t| mul(t, b.clone()));
            let db = tangent(b, ctx, memo).map(|t| mul(a.clone(), t));
            opt_add(da, db)
        }
        ExprNode::Div(a, b) => {
            let da = tangent(a, ctx, memo).map(|t| div_by(t, b.clone()));
            let db = tangent(b, ctx, memo)
                .map(|t| div_by(mul(a.clone(), t), mul(b.clone(), b.clone())));
            opt_sub(da, db)
        }
        ExprNode::Power(a, n) => tangent(a, ctx, memo)
            .map(|t| mul(mul(scalar(f64::from(*n)), powi(a.clone(), n - 1)), t)),
        ExprNode::Sin(a) => tangent(a, ctx, memo).map(|t| mul(cos(a.clone()), t)),
        ExprNode::Cos(a) => tangent(a, ctx, memo).map(|t| neg(mul(sin(a.clone()), t))),
        ExprNode::Grad(a) => {
            let base = tangent(a, ctx, memo).map(grad);
            match &ctx.shape_dir {
                None => base,
                // material tangent of a pulled-back gradient:
                // d(grad e) = grad(de) - grad(e) . grad(V)
                Some(v) => opt_sub(base, nz(dot(grad(a.clone()), grad(v.clone())))),
            }
        }
        ExprNode::Divergence(a) => {
            let base = tangent(a, ctx, memo).map(div);
            match &ctx.shape_dir {
                None => base,
                // d(div e) = tr(d grad e) = div(de) - inner(grad e, grad(V)^T)
                Some(v) => opt_sub(
                    base,
                    nz(inner(grad(a.clone()), transpose(grad(v.clone())))),
                ),
            }
        }
        ExprNode::Inner(a, b) => {
            let da = tangent(a, ctx, memo).map(|t| inner(t, b.clone()));
            let db = tangent(b, ctx, memo).map(|t| inner(a.clone(), t));
            opt_add(da, db)
        }
        ExprNode::Dot(a, b) => {
            let da = tangent(a, ctx, memo).map(|t| dot(t, b.clone()));
            let db = tangent(b, ctx, memo).map(|t| dot(a.clone(), t));
            opt_add(da, db)
        }
        ExprNode::Transpose(a) => tangent(a, ctx, memo).map(transpose),
        ExprNode::Det(a) => {
            // d det(M) = cof(M) : dM, and in 2-D cof(M) = tr(M) I - M^T
            tangent(a, ctx, memo).map(|t| {
                let cof = sub(
                    mul(inner(a.clone(), identity()), identity()),
                    transpose(a.clone()),
                );
                inner(cof, t)
            })
        }
    }
}

fn differentiate_integrals(
    form: &Form,
    ctx: &TangentCtx,
    volume_term: bool,
) -> Result<Form> {
    let mut out = Form::default();
    for integral in &form.integrals {
        if ctx.shape_dir.is_some() && !matches!(integral.measure, Measure::Cell) {
            return Err(Error::FacetShapeDerivative);
        }
        let mut memo = Memo::new();
        let mut d = tangent(&integral.integrand, ctx, &mut memo);
        if volume_term {
            let v = ctx.shape_dir.as_ref().expect("volume term implies shape mode");
            d = opt_add(
                d,
                nz(expr::mul(
                    integral.integrand.clone(),
                    expr::div(v.clone()),
                )),
            );
        }
        if let Some(integrand) = d {
            let degree = integral.degree.map(|deg| {
                // explicit overrides stay explicit; give the direction room
                deg + ctx
                    .shape_dir
                    .as_ref()
                    .map(|v| super::degree::estimate_degree(v).max(1))
                    .unwrap_or(1)
            });
            out.integrals.push(Integral {
                integrand,
                measure: integral.measure.clone(),
                degree,
                mesh: integral.mesh.clone(),
            });
        }
    }
    Ok(out.pruned())
}

/// Gâteaux derivative of `form` with respect to the coefficient `wrt` in the
/// direction `dir` (a trial function for operators, or a concrete function
/// for directional derivatives). An empty result means the form does not
/// depend on `wrt`.
pub fn gateaux_derivative(form: &Form, wrt: &FEFunction, dir: &Expr) -> Form {
    check_direction_shape(wrt, dir);
    let ctx = TangentCtx {
        coeff_dir: &|f: &FEFunction| {
            if f.same(wrt) {
                Some(dir.clone())
            } else {
                None
            }
        },
        shape_dir: None,
    };
    differentiate_integrals(form, &ctx, false).expect("gateaux mode cannot hit facet errors")
}

fn check_direction_shape(wrt: &FEFunction, dir: &Expr) {
    if wrt.space().element().is_mixed() {
        let ok = match dir.node() {
            ExprNode::Argument { space, .. } => space.compatible(wrt.space()),
            ExprNode::Coefficient(f) => f.space().compatible(wrt.space()),
            _ => false,
        };
        assert!(ok, "direction for a mixed coefficient must live on the same mixed space");
    } else {
        let want = match wrt.space().element() {
            crate::fem::Element::Scalar(_) => Shape::Scalar,
            crate::fem::Element::Vector(_) => Shape::Vector,
            crate::fem::Element::TaylorHood => unreachable!(),
        };
        assert_eq!(dir.shape(), want, "direction shape must match the coefficient");
    }
}

/// Shape derivative of `form` along the vector direction `v` (trial function
/// or concrete field): tangent of the pulled-back integrand plus the volume
/// term `f div(v)`. Facet integrals are rejected.
pub fn shape_derivative(form: &Form, v: &Expr) -> Result<Form> {
    assert_eq!(v.shape(), Shape::Vector, "shape directions are vector fields");
    let ctx = TangentCtx {
        coeff_dir: &|_| None,
        shape_dir: Some(v.clone()),
    };
    differentiate_integrals(form, &ctx, true)
}

/// Swap test and trial slots; the assembled matrix is the transpose of the
/// original. Requires a two-argument form.
pub fn adjoint(form: &Form) -> Result<Form> {
    let (test_sp, trial_sp) = form.argument_spaces();
    if test_sp.is_none() || trial_sp.is_none() {
        return Err(Error::Arity(
            "adjoint requires a form with both test and trial arguments".into(),
        ));
    }
    let mut memo: HashMap<*const ExprNode, Expr> = HashMap::new();
    let integrals = form
        .integrals
        .iter()
        .map(|i| Integral {
            integrand: map_terminals(&i.integrand, &mut memo, &mut |e| match e.node() {
                ExprNode::Argument { space, slot } => Some(match slot {
                    Slot::Test => expr::trial(space),
                    Slot::Trial => expr::test(space),
                }),
                _ => None,
            }),
            measure: i.measure.clone(),
            degree: i.degree,
            mesh: i.mesh.clone(),
        })
        .collect();
    Ok(Form { integrals })
}

/// Replace the trial function by the concrete coefficient `u` (the action of
/// an operator form on a function). Used to store linear solves in residual
/// form.
pub fn action(form: &Form, u: &FEFunction) -> Form {
    let (_, trial_sp) = form.argument_spaces();
    if let Some(sp) = trial_sp {
        assert!(
            sp.compatible(u.space()),
            "action: function space does not match the trial space"
        );
    }
    let mut memo: HashMap<*const ExprNode, Expr> = HashMap::new();
    let integrals = form
        .integrals
        .iter()
        .map(|i| Integral {
            integrand: map_terminals(&i.integrand, &mut memo, &mut |e| match e.node() {
                ExprNode::Argument { slot: Slot::Trial, .. } => Some(expr::coef(u)),
                _ => None,
            }),
            measure: i.measure.clone(),
            degree: i.degree,
            mesh: i.mesh.clone(),
        })
        .collect();
    Form { integrals }
}

/// Replace the test function by the concrete coefficient `f`: for an
/// operator form `a(v, w)` the result is linear in the trial slot only, and
/// its assembled vector equals `Aᵀ f` of the assembled matrix `A`. Adjoint
/// accumulations use this to avoid materializing parameter Jacobians.
pub fn contract_test(form: &Form, f: &FEFunction) -> Form {
    let (test_sp, _) = form.argument_spaces();
    if let Some(sp) = test_sp {
        assert!(
            sp.compatible(f.space()),
            "contract_test: function space does not match the test space"
        );
    }
    let mut memo: HashMap<*const ExprNode, Expr> = HashMap::new();
    let integrals = form
        .integrals
        .iter()
        .map(|i| Integral {
            integrand: map_terminals(&i.integrand, &mut memo, &mut |e| match e.node() {
                ExprNode::Argument { slot: Slot::Test, .. } => Some(expr::coef(f)),
                _ => None,
            }),
            measure: i.measure.clone(),
            degree: i.degree,
            mesh: i.mesh.clone(),
        })
        .collect();
    Form { integrals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_matrix, assemble_scalar, assemble_vector, FEFunction, FESpace};
    use crate::forms::expr::{coef, dot, grad, inner, scalar, test, trial, vec2, x};
    use crate::mesh::generate::unit_square;

    #[test]
    fn gateaux_matches_power_rule() {
        let mesh = unit_square(4);
        let v = FESpace::cg1(&mesh);
        let u = FEFunction::new(&v, "u");
        u.fill(2.0);
        let w = FEFunction::new(&v, "w");
        w.fill(1.0);
        // d/du int u^2 = int 2 u w = 4, d/du int u^3 = int 3 u^2 w = 12
        let j = (coef(&u) * coef(&u)).dx();
        let dj = gateaux_derivative(&j, &u, &coef(&w));
        assert!((assemble_scalar(&dj).unwrap() - 4.0).abs() < 1e-13);
        let j3 = (coef(&u) * coef(&u) * coef(&u)).dx();
        let dj3 = gateaux_derivative(&j3, &u, &coef(&w));
        assert!((assemble_scalar(&dj3).unwrap() - 12.0).abs() < 1e-12);
        // a trial direction assembles the dual vector; pairing it with the
        // all-ones vector reproduces the scalar derivative
        let g = gateaux_derivative(&j, &u, &trial(&v));
        let gv = assemble_vector(&g).unwrap();
        let total: f64 = gv.iter().sum();
        assert!((total - 4.0).abs() < 1e-13);
    }

    #[test]
    fn dilation_derivative_is_twice_the_area() {
        let mesh = unit_square(4);
        let j = scalar(1.0).dx_on(&mesh);
        let dj = shape_derivative(&j, &x(&mesh)).unwrap();
        assert!((assemble_scalar(&dj).unwrap() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn facet_integrals_reject_shape_differentiation() {
        let mesh = unit_square(3);
        let j = scalar(1.0).ds(&[1]);
        assert!(matches!(
            shape_derivative(&j, &x(&mesh)),
            Err(Error::FacetShapeDerivative)
        ));
    }

    #[test]
    fn shape_derivative_matches_mesh_perturbation() {
        let mesh = unit_square(6);
        let vs = FESpace::cg2(&mesh);
        let u = FEFunction::new(&vs, "u");
        u.interpolate_scalar(|p| p[0] * p[0] + 0.5 * p[1]);
        let j = inner(grad(coef(&u)), grad(coef(&u))).dx() + (coef(&u) * coef(&u)).dx();

        let vspace = FESpace::cg1_vec(&mesh);
        let vfield = FEFunction::new(&vspace, "V");
        vfield.interpolate_vector(|p| [0.1 * p[0] * p[1], -0.07 * p[1] + 0.03 * p[0] * p[0]]);
        let dj = shape_derivative(&j, &coef(&vfield)).unwrap();
        let djv = assemble_scalar(&dj).unwrap();

        // central difference of the assembled value under a vertex move with
        // frozen dof vectors: exactly what the pullback derivative predicts
        let eps = 1e-6;
        let theta: Vec<f64> = vfield.copy_dofs().iter().map(|s| s * eps).collect();
        mesh.move_by(&theta).unwrap();
        let jp = assemble_scalar(&j).unwrap();
        let back: Vec<f64> = theta.iter().map(|s| -2.0 * s).collect();
        mesh.move_by(&back).unwrap();
        let jm = assemble_scalar(&j).unwrap();
        mesh.move_by(&theta).unwrap();
        let fd = (jp - jm) / (2.0 * eps);
        assert!(
            (djv - fd).abs() < 1e-7 * djv.abs().max(1.0),
            "shape derivative {djv} vs finite difference {fd}"
        );
    }

    #[test]
    fn adjoint_transposes_the_matrix() {
        let mesh = unit_square(3);
        let v = FESpace::cg1(&mesh);
        let (u, w) = (trial(&v), test(&v));
        // diffusion plus advection: genuinely nonsymmetric
        let beta = vec2(1.0, 0.4);
        let a =
            (inner(grad(u.clone()), grad(w.clone())) + dot(beta, grad(u)) * w).dx();
        let at = adjoint(&a).unwrap();
        let ta = assemble_matrix(&a).unwrap();
        let tb = assemble_matrix(&at).unwrap();
        let n = v.ndofs();
        let xv: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut y1 = vec![0.0; n];
        ta.mul_transpose_vec_acc(1.0, &xv, &mut y1);
        let mut y2 = vec![0.0; n];
        tb.mul_vec_acc(1.0, &xv, &mut y2);
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn action_applies_the_operator() {
        let mesh = unit_square(3);
        let v = FESpace::cg1(&mesh);
        let a = inner(grad(trial(&v)), grad(test(&v))).dx();
        let u = FEFunction::new(&v, "u");
        u.interpolate_scalar(|p| p[0] + p[1] * p[1]);
        let r = action(&a, &u);
        let rv = assemble_vector(&r).unwrap();
        let m = assemble_matrix(&a).unwrap();
        let mut want = vec![0.0; v.ndofs()];
        m.mul_vec_acc(1.0, &u.copy_dofs(), &mut want);
        for (a, b) in rv.iter().zip(&want) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn contract_test_yields_the_transpose_action() {
        let mesh = unit_square(3);
        let v = FESpace::cg1(&mesh);
        let beta = vec2(0.8, -0.3);
        let a = (inner(grad(trial(&v)), grad(test(&v)))
            + dot(beta, grad(trial(&v))) * test(&v))
        .dx();
        let lam = FEFunction::new(&v, "lam");
        lam.interpolate_scalar(|p| (2.1 * p[0]).sin() - p[1]);
        let rv = assemble_vector(&contract_test(&a, &lam)).unwrap();
        let m = assemble_matrix(&a).unwrap();
        let mut want = vec![0.0; v.ndofs()];
        m.mul_transpose_vec_acc(1.0, &lam.copy_dofs(), &mut want);
        for (a, b) in rv.iter().zip(&want) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn contract_test_handles_mixed_arguments() {
        use crate::forms::expr::{div, test_split, trial_split};
        let mesh = unit_square(3);
        let th = FESpace::taylor_hood(&mesh);
        let (u, p) = trial_split(&th);
        let (w, q) = test_split(&th);
        let a = (inner(grad(u.clone()), grad(w.clone())) - p * div(w) - q * div(u)).dx();
        let lam = FEFunction::new(&th, "lam");
        let dofs: Vec<f64> = (0..th.ndofs()).map(|i| (0.13 * i as f64).cos()).collect();
        lam.set_dofs(&dofs);
        let rv = assemble_vector(&contract_test(&a, &lam)).unwrap();
        let m = assemble_matrix(&a).unwrap();
        let mut want = vec![0.0; th.ndofs()];
        m.mul_transpose_vec_acc(1.0, &dofs, &mut want);
        for (a, b) in rv.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn second_shape_derivative_is_symmetric() {
        // J as a function of vertex positions has a symmetric Hessian, so
        // differentiating along V then W must agree with W then V
        let mesh = unit_square(4);
        let vs = FESpace::cg1(&mesh);
        let u = FEFunction::new(&vs, "u");
        u.interpolate_scalar(|p| p[0] * p[1] + 0.3 * p[0]);
        let j = inner(grad(coef(&u)), grad(coef(&u))).dx();
        let vspace = FESpace::cg1_vec(&mesh);
        let vf = FEFunction::new(&vspace, "V");
        vf.interpolate_vector(|p| [0.2 * p[1], 0.1 * p[0] * p[0]]);
        let wf = FEFunction::new(&vspace, "W");
        wf.interpolate_vector(|p| [-0.15 * p[0], 0.25 * p[0] * p[1]]);
        let dvw = shape_derivative(&shape_derivative(&j, &coef(&vf)).unwrap(), &coef(&wf)).unwrap();
        let dwv = shape_derivative(&shape_derivative(&j, &coef(&wf)).unwrap(), &coef(&vf)).unwrap();
        let a = assemble_scalar(&dvw).unwrap();
        let b = assemble_scalar(&dwv).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    }
}

/// Rebuild a tree, substituting terminals where `subst` yields a replacement.
fn map_terminals(
    e: &Expr,
    memo: &mut HashMap<*const ExprNode, Expr>,
    subst: &mut impl FnMut(&Expr) -> Option<Expr>,
) -> Expr {
    if let Some(hit) = memo.get(&e.ptr()) {
        return hit.clone();
    }
    let out = if let Some(r) = subst(e) {
        r
    } else {
        use expr::*;
        match e.node() {
            ExprNode::Constant(_)
            | ExprNode::Coordinate(_)
            | ExprNode::FacetNormal(_)
            | ExprNode::Argument { .. }
            | ExprNode::Coefficient(_)
            | ExprNode::Identity => e.clone(),
            ExprNode::Component { base, index } => {
                component(map_terminals(base, memo, subst), *index)
            }
            ExprNode::Add(a, b) => add(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Sub(a, b) => sub(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Neg(a) => neg(map_terminals(a, memo, subst)),
            ExprNode::Mul(a, b) => mul(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Div(a, b) => div_by(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Power(a, n) => powi(map_terminals(a, memo, subst), *n),
            ExprNode::Sin(a) => sin(map_terminals(a, memo, subst)),
            ExprNode::Cos(a) => cos(map_terminals(a, memo, subst)),
            ExprNode::Grad(a) => grad(map_terminals(a, memo, subst)),
            ExprNode::Divergence(a) => div(map_terminals(a, memo, subst)),
            ExprNode::Inner(a, b) => inner(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Dot(a, b) => dot(
                map_terminals(a, memo, subst),
                map_terminals(b, memo, subst),
            ),
            ExprNode::Transpose(a) => transpose(map_terminals(a, memo, subst)),
            ExprNode::Det(a) => det(map_terminals(a, memo, subst)),
        }
    };
    memo.insert(e.ptr(), out.clone());
    out
}
