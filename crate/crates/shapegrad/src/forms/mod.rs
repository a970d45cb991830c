//! Symbolic variational forms.
//!
//! Expressions are immutable reference-counted trees built from coordinate
//! fields, arguments (test/trial), coefficients, and tensor algebra. Forms
//! attach integrands to measures (`dx`, `ds`). The transform module
//! materializes Gâteaux and shape derivatives as new forms, which keeps the
//! whole differentiation pipeline symbolic until assembly.

pub mod degree;
pub mod expr;
pub mod form;
pub mod print;
pub mod transform;

pub use expr::{
    add, coef, coef_split, component, constant, cos, det, div, div_by, dot, facet_normal, grad,
    identity, inner, mat2, mul, neg, powi, scalar, sin, sub, sym_grad, test, test_split,
    transpose, trial, trial_split, vec2, x, zero, Expr, ExprNode, Shape, Slot, Tensor,
};
pub use form::{Form, Integral, Measure};
pub use transform::{action, adjoint, gateaux_derivative, shape_derivative};
