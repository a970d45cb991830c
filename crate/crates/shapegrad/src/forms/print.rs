//! Deterministic plain-text rendering of expressions and forms, used for
//! golden tests of the derivative transforms and for debugging.

use super::expr::{Expr, ExprNode, Slot, Tensor};
use super::form::{Form, Measure};

pub fn print_expr(e: &Expr) -> String {
    match e.node() {
        ExprNode::Constant(t) => print_tensor(t),
        ExprNode::Coordinate(_) => "x".into(),
        ExprNode::FacetNormal(_) => "n".into(),
        ExprNode::Argument { slot, .. } => match slot {
            Slot::Test => "v?".into(),
            Slot::Trial => "u?".into(),
        },
        ExprNode::Coefficient(f) => f.name().to_string(),
        ExprNode::Component { base, index } => format!("{}[{index}]", print_expr(base)),
        ExprNode::Identity => "I".into(),
        ExprNode::Add(a, b) => format!("({} + {})", print_expr(a), print_expr(b)),
        ExprNode::Sub(a, b) => format!("({} - {})", print_expr(a), print_expr(b)),
        ExprNode::Neg(a) => format!("(-{})", print_expr(a)),
        ExprNode::Mul(a, b) => format!("({} * {})", print_expr(a), print_expr(b)),
        ExprNode::Div(a, b) => format!("({} / {})", print_expr(a), print_expr(b)),
        ExprNode::Power(a, n) => format!("{}^{n}", print_expr(a)),
        ExprNode::Sin(a) => format!("sin({})", print_expr(a)),
        ExprNode::Cos(a) => format!("cos({})", print_expr(a)),
        ExprNode::Grad(a) => format!("grad({})", print_expr(a)),
        ExprNode::Divergence(a) => format!("div({})", print_expr(a)),
        ExprNode::Inner(a, b) => format!("inner({}, {})", print_expr(a), print_expr(b)),
        ExprNode::Dot(a, b) => format!("dot({}, {})", print_expr(a), print_expr(b)),
        ExprNode::Transpose(a) => format!("transpose({})", print_expr(a)),
        ExprNode::Det(a) => format!("det({})", print_expr(a)),
    }
}

fn print_tensor(t: &Tensor) -> String {
    let num = |v: f64| {
        if v == v.trunc() && v.abs() < 1e15 {
            format!("{v}")
        } else {
            format!("{v:.6}")
        }
    };
    match t {
        Tensor::S(v) => num(*v),
        Tensor::V(v) => format!("[{}, {}]", num(v[0]), num(v[1])),
        Tensor::M(m) => format!(
            "[[{}, {}], [{}, {}]]",
            num(m[0][0]),
            num(m[0][1]),
            num(m[1][0]),
            num(m[1][1])
        ),
    }
}

pub fn print_form(f: &Form) -> String {
    if f.integrals.is_empty() {
        return "<zero form>".into();
    }
    f.integrals
        .iter()
        .map(|i| {
            let meas = match &i.measure {
                Measure::Cell => "dx".to_string(),
                Measure::ExteriorFacet(tags) => format!("ds{tags:?}"),
            };
            let deg = i
                .degree
                .map(|d| format!(" [deg {d}]"))
                .unwrap_or_default();
            format!("int {} {meas}{deg}", print_expr(&i.integrand))
        })
        .collect::<Vec<_>>()
        .join("\n")
}
