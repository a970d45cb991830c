//! Expression trees for variational forms.
//!
//! Values are scalars, 2-vectors or 2x2 matrices; shapes are checked at
//! construction and mismatches panic (they are programming errors, like type
//! errors in a strongly typed form language). Constructors fold constants and
//! drop zero branches so that derivative transforms produce lean trees.

use crate::fem::{Element, FEFunction, FESpace};
use crate::mesh::Mesh;
use crate::tape::ObjId;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector,
    Matrix,
}

/// Constant value of any shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tensor {
    S(f64),
    V([f64; 2]),
    M([[f64; 2]; 2]),
}

impl Tensor {
    pub fn shape(&self) -> Shape {
        match self {
            Tensor::S(_) => Shape::Scalar,
            Tensor::V(_) => Shape::Vector,
            Tensor::M(_) => Shape::Matrix,
        }
    }

    pub fn zero(shape: Shape) -> Tensor {
        match shape {
            Shape::Scalar => Tensor::S(0.0),
            Shape::Vector => Tensor::V([0.0; 2]),
            Shape::Matrix => Tensor::M([[0.0; 2]; 2]),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Tensor::S(v) => *v == 0.0,
            Tensor::V(v) => v.iter().all(|x| *x == 0.0),
            Tensor::M(m) => m.iter().flatten().all(|x| *x == 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Test,
    Trial,
}

#[derive(Debug)]
pub enum ExprNode {
    Constant(Tensor),
    /// The spatial coordinate field of a mesh (vector valued).
    Coordinate(Mesh),
    /// Outward unit normal; only meaningful in facet integrals.
    FacetNormal(Mesh),
    Argument {
        space: FESpace,
        slot: Slot,
    },
    Coefficient(FEFunction),
    /// Sub-function `index` of a mixed argument/coefficient.
    Component {
        base: Expr,
        index: usize,
    },
    /// 2x2 identity matrix.
    Identity,
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Neg(Expr),
    /// Product with a scalar operand (kept in first position).
    Mul(Expr, Expr),
    /// Division by a scalar.
    Div(Expr, Expr),
    Power(Expr, i32),
    Sin(Expr),
    Cos(Expr),
    Grad(Expr),
    Divergence(Expr),
    /// Full contraction of two operands of equal shape.
    Inner(Expr, Expr),
    /// Single-index contraction: vec·vec, mat·vec, vec·mat, mat·mat.
    Dot(Expr, Expr),
    Transpose(Expr),
    Det(Expr),
}

#[derive(Clone)]
pub struct Expr(pub(crate) Rc<ExprNode>);

impl std::fmt::Debug for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", super::print::print_expr(self))
    }
}

impl Expr {
    pub fn node(&self) -> &ExprNode {
        &self.0
    }

    pub fn ptr(&self) -> *const ExprNode {
        Rc::as_ptr(&self.0)
    }

    fn wrap(node: ExprNode) -> Expr {
        Expr(Rc::new(node))
    }

    /// Value shape. Bare mixed-space terminals have none and must be wrapped
    /// in [`component`] before use.
    pub fn shape(&self) -> Shape {
        match self.node() {
            ExprNode::Constant(t) => t.shape(),
            ExprNode::Coordinate(_) | ExprNode::FacetNormal(_) => Shape::Vector,
            ExprNode::Argument { space, .. } => element_shape(space.element()),
            ExprNode::Coefficient(f) => element_shape(f.space().element()),
            ExprNode::Component { base, index } => {
                let space = mixed_space_of(base);
                element_shape(space.block(*index).1)
            }
            ExprNode::Identity => Shape::Matrix,
            ExprNode::Add(a, _) | ExprNode::Sub(a, _) => a.shape(),
            ExprNode::Neg(a) => a.shape(),
            ExprNode::Mul(_, b) => b.shape(),
            ExprNode::Div(a, _) => a.shape(),
            ExprNode::Power(..)
            | ExprNode::Sin(_)
            | ExprNode::Cos(_)
            | ExprNode::Divergence(_)
            | ExprNode::Inner(..)
            | ExprNode::Det(_) => Shape::Scalar,
            ExprNode::Grad(a) => match a.shape() {
                Shape::Scalar => Shape::Vector,
                Shape::Vector => Shape::Matrix,
                Shape::Matrix => unreachable!("checked at construction"),
            },
            ExprNode::Dot(a, b) => match (a.shape(), b.shape()) {
                (Shape::Vector, Shape::Vector) => Shape::Scalar,
                (Shape::Matrix, Shape::Vector) | (Shape::Vector, Shape::Matrix) => Shape::Vector,
                (Shape::Matrix, Shape::Matrix) => Shape::Matrix,
                _ => unreachable!("checked at construction"),
            },
            ExprNode::Transpose(_) => Shape::Matrix,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.node(), ExprNode::Constant(t) if t.is_zero())
    }

    pub fn as_constant(&self) -> Option<Tensor> {
        match self.node() {
            ExprNode::Constant(t) => Some(*t),
            _ => None,
        }
    }
}

fn element_shape(el: Element) -> Shape {
    match el {
        Element::Scalar(_) => Shape::Scalar,
        Element::Vector(_) => Shape::Vector,
        Element::TaylorHood => {
            panic!("mixed-space functions have no direct shape; split them with component()")
        }
    }
}

fn mixed_space_of(base: &Expr) -> &FESpace {
    match base.node() {
        ExprNode::Argument { space, .. } if space.element().is_mixed() => space,
        ExprNode::Coefficient(f) if f.space().element().is_mixed() => f.space(),
        _ => panic!("component() applies to mixed-space arguments/coefficients only"),
    }
}

pub fn zero(shape: Shape) -> Expr {
    Expr::wrap(ExprNode::Constant(Tensor::zero(shape)))
}

pub fn scalar(v: f64) -> Expr {
    Expr::wrap(ExprNode::Constant(Tensor::S(v)))
}

pub fn vec2(x: f64, y: f64) -> Expr {
    Expr::wrap(ExprNode::Constant(Tensor::V([x, y])))
}

pub fn mat2(rows: [[f64; 2]; 2]) -> Expr {
    Expr::wrap(ExprNode::Constant(Tensor::M(rows)))
}

pub fn constant(t: Tensor) -> Expr {
    Expr::wrap(ExprNode::Constant(t))
}

pub fn identity() -> Expr {
    Expr::wrap(ExprNode::Identity)
}

/// The spatial coordinate of `mesh` as a vector expression.
pub fn x(mesh: &Mesh) -> Expr {
    Expr::wrap(ExprNode::Coordinate(mesh.clone()))
}

pub fn facet_normal(mesh: &Mesh) -> Expr {
    Expr::wrap(ExprNode::FacetNormal(mesh.clone()))
}

pub fn test(space: &FESpace) -> Expr {
    Expr::wrap(ExprNode::Argument {
        space: space.clone(),
        slot: Slot::Test,
    })
}

pub fn trial(space: &FESpace) -> Expr {
    Expr::wrap(ExprNode::Argument {
        space: space.clone(),
        slot: Slot::Trial,
    })
}

pub fn coef(f: &FEFunction) -> Expr {
    Expr::wrap(ExprNode::Coefficient(f.clone()))
}

/// Sub-function of a mixed argument or coefficient.
pub fn component(base: Expr, index: usize) -> Expr {
    let space = mixed_space_of(&base).clone();
    assert!(index < 2, "Taylor-Hood has components 0 (velocity), 1 (pressure)");
    let _ = space;
    Expr::wrap(ExprNode::Component { base, index })
}

/// Velocity/pressure pair of a mixed trial function.
pub fn trial_split(space: &FESpace) -> (Expr, Expr) {
    let w = trial(space);
    (component(w.clone(), 0), component(w, 1))
}

pub fn test_split(space: &FESpace) -> (Expr, Expr) {
    let w = test(space);
    (component(w.clone(), 0), component(w, 1))
}

pub fn coef_split(f: &FEFunction) -> (Expr, Expr) {
    let w = coef(f);
    (component(w.clone(), 0), component(w, 1))
}

pub fn add(a: Expr, b: Expr) -> Expr {
    assert_eq!(a.shape(), b.shape(), "add: operand shapes differ");
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    if let (Some(x), Some(y)) = (a.as_constant(), b.as_constant()) {
        return constant(tensor_zip(x, y, |p, q| p + q));
    }
    Expr::wrap(ExprNode::Add(a, b))
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    assert_eq!(a.shape(), b.shape(), "sub: operand shapes differ");
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return neg(b);
    }
    if let (Some(x), Some(y)) = (a.as_constant(), b.as_constant()) {
        return constant(tensor_zip(x, y, |p, q| p - q));
    }
    Expr::wrap(ExprNode::Sub(a, b))
}

pub fn neg(a: Expr) -> Expr {
    if let Some(t) = a.as_constant() {
        return constant(tensor_map(t, |v| -v));
    }
    Expr::wrap(ExprNode::Neg(a))
}

/// Product where at least one operand is scalar; the scalar is kept first.
pub fn mul(a: Expr, b: Expr) -> Expr {
    let (s, e) = match (a.shape(), b.shape()) {
        (Shape::Scalar, _) => (a, b),
        (_, Shape::Scalar) => (b, a),
        (sa, sb) => panic!("mul: one operand must be scalar (got {sa:?} * {sb:?}); use dot/inner"),
    };
    if s.is_zero() || e.is_zero() {
        return zero(e.shape());
    }
    if let Some(Tensor::S(v)) = s.as_constant() {
        if v == 1.0 {
            return e;
        }
        if let Some(t) = e.as_constant() {
            return constant(tensor_map(t, |w| v * w));
        }
    }
    Expr::wrap(ExprNode::Mul(s, e))
}

/// Division by a scalar expression.
pub fn div_by(a: Expr, b: Expr) -> Expr {
    assert_eq!(b.shape(), Shape::Scalar, "div: denominator must be scalar");
    if a.is_zero() {
        return a;
    }
    if let Some(Tensor::S(v)) = b.as_constant() {
        assert!(v != 0.0, "division of a form expression by the constant zero");
        if v == 1.0 {
            return a;
        }
        if let Some(t) = a.as_constant() {
            return constant(tensor_map(t, |w| w / v));
        }
    }
    Expr::wrap(ExprNode::Div(a, b))
}

pub fn powi(e: Expr, n: i32) -> Expr {
    assert_eq!(e.shape(), Shape::Scalar, "powi applies to scalars");
    match n {
        0 => scalar(1.0),
        1 => e,
        _ => {
            if let Some(Tensor::S(v)) = e.as_constant() {
                return scalar(v.powi(n));
            }
            Expr::wrap(ExprNode::Power(e, n))
        }
    }
}

pub fn sin(e: Expr) -> Expr {
    assert_eq!(e.shape(), Shape::Scalar, "sin applies to scalars");
    if let Some(Tensor::S(v)) = e.as_constant() {
        return scalar(v.sin());
    }
    Expr::wrap(ExprNode::Sin(e))
}

pub fn cos(e: Expr) -> Expr {
    assert_eq!(e.shape(), Shape::Scalar, "cos applies to scalars");
    if let Some(Tensor::S(v)) = e.as_constant() {
        return scalar(v.cos());
    }
    Expr::wrap(ExprNode::Cos(e))
}

pub fn grad(e: Expr) -> Expr {
    match e.shape() {
        Shape::Scalar | Shape::Vector => {}
        Shape::Matrix => panic!("grad of a matrix expression is not supported"),
    }
    if let Some(t) = e.as_constant() {
        return zero(match t.shape() {
            Shape::Scalar => Shape::Vector,
            _ => Shape::Matrix,
        });
    }
    if matches!(e.node(), ExprNode::Coordinate(_)) {
        return identity();
    }
    Expr::wrap(ExprNode::Grad(e))
}

pub fn div(e: Expr) -> Expr {
    assert_eq!(e.shape(), Shape::Vector, "div applies to vector expressions");
    if e.is_zero() {
        return scalar(0.0);
    }
    if matches!(e.node(), ExprNode::Coordinate(_)) {
        return scalar(2.0);
    }
    Expr::wrap(ExprNode::Divergence(e))
}

pub fn inner(a: Expr, b: Expr) -> Expr {
    assert_eq!(a.shape(), b.shape(), "inner: operand shapes differ");
    if a.is_zero() || b.is_zero() {
        return scalar(0.0);
    }
    if a.shape() == Shape::Scalar {
        return mul(a, b);
    }
    if let (Some(x), Some(y)) = (a.as_constant(), b.as_constant()) {
        return scalar(tensor_inner(x, y));
    }
    Expr::wrap(ExprNode::Inner(a, b))
}

pub fn dot(a: Expr, b: Expr) -> Expr {
    let out = match (a.shape(), b.shape()) {
        (Shape::Vector, Shape::Vector) => Shape::Scalar,
        (Shape::Matrix, Shape::Vector) | (Shape::Vector, Shape::Matrix) => Shape::Vector,
        (Shape::Matrix, Shape::Matrix) => Shape::Matrix,
        (sa, sb) => panic!("dot: unsupported operand shapes {sa:?} . {sb:?}"),
    };
    if a.is_zero() || b.is_zero() {
        return zero(out);
    }
    if let (Some(x), Some(y)) = (a.as_constant(), b.as_constant()) {
        return constant(tensor_dot(x, y));
    }
    Expr::wrap(ExprNode::Dot(a, b))
}

pub fn transpose(e: Expr) -> Expr {
    assert_eq!(e.shape(), Shape::Matrix, "transpose applies to matrices");
    if let Some(Tensor::M(m)) = e.as_constant() {
        return mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]]);
    }
    if matches!(e.node(), ExprNode::Identity) {
        return e;
    }
    Expr::wrap(ExprNode::Transpose(e))
}

pub fn det(e: Expr) -> Expr {
    assert_eq!(e.shape(), Shape::Matrix, "det applies to matrices");
    if let Some(Tensor::M(m)) = e.as_constant() {
        return scalar(m[0][0] * m[1][1] - m[0][1] * m[1][0]);
    }
    if matches!(e.node(), ExprNode::Identity) {
        return scalar(1.0);
    }
    Expr::wrap(ExprNode::Det(e))
}

/// Symmetric gradient `(grad(e) + grad(e)^T) / 2`.
pub fn sym_grad(e: Expr) -> Expr {
    let g = grad(e);
    mul(scalar(0.5), add(g.clone(), transpose(g)))
}

pub(crate) fn tensor_map(t: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    match t {
        Tensor::S(v) => Tensor::S(f(v)),
        Tensor::V(v) => Tensor::V([f(v[0]), f(v[1])]),
        Tensor::M(m) => Tensor::M([[f(m[0][0]), f(m[0][1])], [f(m[1][0]), f(m[1][1])]]),
    }
}

pub(crate) fn tensor_zip(a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match (a, b) {
        (Tensor::S(x), Tensor::S(y)) => Tensor::S(f(x, y)),
        (Tensor::V(x), Tensor::V(y)) => Tensor::V([f(x[0], y[0]), f(x[1], y[1])]),
        (Tensor::M(x), Tensor::M(y)) => Tensor::M([
            [f(x[0][0], y[0][0]), f(x[0][1], y[0][1])],
            [f(x[1][0], y[1][0]), f(x[1][1], y[1][1])],
        ]),
        _ => unreachable!("shape-checked before folding"),
    }
}

pub(crate) fn tensor_inner(a: Tensor, b: Tensor) -> f64 {
    match (a, b) {
        (Tensor::S(x), Tensor::S(y)) => x * y,
        (Tensor::V(x), Tensor::V(y)) => x[0] * y[0] + x[1] * y[1],
        (Tensor::M(x), Tensor::M(y)) => {
            x[0][0] * y[0][0] + x[0][1] * y[0][1] + x[1][0] * y[1][0] + x[1][1] * y[1][1]
        }
        _ => unreachable!(),
    }
}

pub(crate) fn tensor_dot(a: Tensor, b: Tensor) -> Tensor {
    match (a, b) {
        (Tensor::V(x), Tensor::V(y)) => Tensor::S(x[0] * y[0] + x[1] * y[1]),
        (Tensor::M(m), Tensor::V(v)) => Tensor::V([
            m[0][0] * v[0] + m[0][1] * v[1],
            m[1][0] * v[0] + m[1][1] * v[1],
        ]),
        (Tensor::V(v), Tensor::M(m)) => Tensor::V([
            v[0] * m[0][0] + v[1] * m[1][0],
            v[0] * m[0][1] + v[1] * m[1][1],
        ]),
        (Tensor::M(x), Tensor::M(y)) => {
            let mut out = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
                }
            }
            Tensor::M(out)
        }
        _ => unreachable!(),
    }
}

// Operator sugar so case definitions read like the underlying math.

impl std::ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        add(self, rhs)
    }
}

impl std::ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        sub(self, rhs)
    }
}

impl std::ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        neg(self)
    }
}

impl std::ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        mul(self, rhs)
    }
}

impl std::ops::Mul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        mul(scalar(self), rhs)
    }
}

impl std::ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        div_by(self, rhs)
    }
}

impl std::ops::Div<f64> for Expr {
    type Output = Expr;
    fn div(self, rhs: f64) -> Expr {
        div_by(self, scalar(rhs))
    }
}

/// Depth-first walk over distinct nodes (shared subtrees visited once).
pub fn for_each_node(e: &Expr, f: &mut impl FnMut(&Expr)) {
    fn walk(
        e: &Expr,
        seen: &mut std::collections::HashSet<*const ExprNode>,
        f: &mut impl FnMut(&Expr),
    ) {
        if !seen.insert(e.ptr()) {
            return;
        }
        f(e);
        match e.node() {
            ExprNode::Constant(_)
            | ExprNode::Coordinate(_)
            | ExprNode::FacetNormal(_)
            | ExprNode::Argument { .. }
            | ExprNode::Coefficient(_)
            | ExprNode::Identity => {}
            ExprNode::Component { base, .. } => walk(base, seen, f),
            ExprNode::Neg(a)
            | ExprNode::Power(a, _)
            | ExprNode::Sin(a)
            | ExprNode::Cos(a)
            | ExprNode::Grad(a)
            | ExprNode::Divergence(a)
            | ExprNode::Transpose(a)
            | ExprNode::Det(a) => walk(a, seen, f),
            ExprNode::Add(a, b)
            | ExprNode::Sub(a, b)
            | ExprNode::Mul(a, b)
            | ExprNode::Div(a, b)
            | ExprNode::Inner(a, b)
            | ExprNode::Dot(a, b) => {
                walk(a, seen, f);
                walk(b, seen, f);
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    walk(e, &mut seen, f);
}

/// Distinct coefficient functions appearing in the expression, ordered by id.
pub fn coefficients_of(e: &Expr) -> Vec<FEFunction> {
    let mut found: Vec<FEFunction> = Vec::new();
    for_each_node(e, &mut |n| {
        if let ExprNode::Coefficient(f) = n.node() {
            if !found.iter().any(|g| g.same(f)) {
                found.push(f.clone());
            }
        }
    });
    found.sort_by_key(|f| f.id());
    found
}

/// The single mesh all terminals live on (None for purely constant
/// expressions). Panics if terminals mix meshes.
pub fn mesh_of(e: &Expr) -> Option<Mesh> {
    let mut mesh: Option<Mesh> = None;
    let mut check = |m: &Mesh| match &mesh {
        None => mesh = Some(m.clone()),
        Some(prev) => assert!(prev.same(m), "expression mixes terminals from different meshes"),
    };
    for_each_node(e, &mut |n| match n.node() {
        ExprNode::Coordinate(m) | ExprNode::FacetNormal(m) => check(m),
        ExprNode::Argument { space, .. } => check(space.mesh()),
        ExprNode::Coefficient(f) => check(f.space().mesh()),
        _ => {}
    });
    mesh
}

/// Test/trial presence, with space consistency checks per slot.
pub fn arguments_of(e: &Expr) -> (Option<FESpace>, Option<FESpace>) {
    let mut spaces: (Option<FESpace>, Option<FESpace>) = (None, None);
    for_each_node(e, &mut |n| {
        if let ExprNode::Argument { space, slot } = n.node() {
            let slot_ref = match slot {
                Slot::Test => &mut spaces.0,
                Slot::Trial => &mut spaces.1,
            };
            match slot_ref {
                None => *slot_ref = Some(space.clone()),
                Some(prev) => assert!(
                    prev.compatible(space),
                    "two different spaces used in the same argument slot"
                ),
            }
        }
    });
    spaces
}

/// Does the expression reference the coefficient `f`?
pub fn references_coefficient(e: &Expr, id: ObjId) -> bool {
    let mut found = false;
    for_each_node(e, &mut |n| {
        if let ExprNode::Coefficient(g) = n.node() {
            found |= g.id() == id;
        }
    });
    found
}
