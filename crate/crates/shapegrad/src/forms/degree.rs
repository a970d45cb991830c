//! Quadrature-degree estimation.
//!
//! Polynomial bookkeeping over the tree: terminals carry their element degree
//! (coordinates are degree 1 on affine cells), products add, gradients lose
//! one degree, and non-polynomial nodes (trig, division, negative powers) get
//! a quadratic allowance per argument degree. The result is clamped to the
//! supported rule range by the assembler.

use super::expr::{Expr, ExprNode};
use crate::fem::Element;

pub fn estimate_degree(e: &Expr) -> usize {
    match e.node() {
        ExprNode::Constant(_) | ExprNode::Identity | ExprNode::FacetNormal(_) => 0,
        ExprNode::Coordinate(_) => 1,
        ExprNode::Argument { space, .. } => space.element().degree(),
        ExprNode::Coefficient(f) => f.space().element().degree(),
        ExprNode::Component { base, index } => match base.node() {
            ExprNode::Argument { space, .. } => space.block(*index).1.degree(),
            ExprNode::Coefficient(f) => f.space().block(*index).1.degree(),
            _ => unreachable!("component bases are mixed terminals"),
        },
        ExprNode::Add(a, b) | ExprNode::Sub(a, b) => estimate_degree(a).max(estimate_degree(b)),
        ExprNode::Neg(a) | ExprNode::Transpose(a) => estimate_degree(a),
        ExprNode::Mul(a, b) | ExprNode::Inner(a, b) | ExprNode::Dot(a, b) => {
            estimate_degree(a) + estimate_degree(b)
        }
        ExprNode::Div(a, b) => estimate_degree(a) + 2 * estimate_degree(b).max(1),
        ExprNode::Power(a, n) => {
            let d = estimate_degree(a);
            if *n >= 0 {
                d * (*n as usize)
            } else {
                d * n.unsigned_abs() as usize + 2
            }
        }
        ExprNode::Sin(a) | ExprNode::Cos(a) => 2 * estimate_degree(a).max(1),
        ExprNode::Grad(a) => estimate_degree(a).saturating_sub(1),
        ExprNode::Divergence(a) => estimate_degree(a).saturating_sub(1),
        ExprNode::Det(a) => 2 * estimate_degree(a),
    }
}

/// Degree of an element as used by the estimator (mixed handled via blocks).
pub fn element_degree(el: Element) -> usize {
    el.degree()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::FESpace;
    use crate::forms::expr::*;
    use crate::mesh::generate;

    #[test]
    fn representative_forms() {
        let m = generate::unit_square(1);
        let s1 = FESpace::cg1(&m);
        let s2 = FESpace::cg2(&m);

        // stiffness on CG1: constant gradients
        let e = inner(grad(trial(&s1)), grad(test(&s1)));
        assert_eq!(estimate_degree(&e), 0);

        // mass on CG2
        let e = mul(trial(&s2), test(&s2));
        assert_eq!(estimate_degree(&e), 4);

        // sin(pi x2) * v with v in CG2: trig term counts as 2
        let x2 = dot(vec2(0.0, 1.0), x(&m));
        let e = mul(sin(mul(scalar(std::f64::consts::PI), x2)), test(&s2));
        assert_eq!(estimate_degree(&e), 4);
    }
}
