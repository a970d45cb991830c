//! Strong Dirichlet conditions on tagged boundary parts.
//!
//! Conditions are enforced by row replacement: constrained matrix rows become
//! identity rows and the right-hand side takes the prescribed values. Values
//! are either constants or coordinate expressions evaluated at the dof
//! locations (vertices, and edge midpoints for quadratic spaces).

use super::space::{Element, FESpace};
use crate::error::{Error, Result};
use crate::forms::expr::{
    tensor_dot, tensor_inner, tensor_map, tensor_zip, Expr, ExprNode, Shape, Tensor,
};
use crate::mesh::Tag;
use std::collections::HashMap;

#[derive(Clone)]
pub enum BcValue {
    Constant(Tensor),
    /// Expression in the coordinate field only, evaluated at dof locations.
    Coordinate(Expr),
    /// Per-dof values frozen at construction time (see
    /// [`DirichletBC::into_frozen`]).
    Fixed(std::rc::Rc<Vec<(usize, f64)>>),
}

#[derive(Clone)]
pub struct DirichletBC {
    space: FESpace,
    /// Block of a mixed space the condition constrains; `None` for plain
    /// scalar/vector spaces.
    block: Option<usize>,
    tags: Vec<Tag>,
    value: BcValue,
}

impl DirichletBC {
    pub fn constant(space: &FESpace, tags: &[Tag], value: Tensor) -> DirichletBC {
        let bc = DirichletBC {
            space: space.clone(),
            block: None,
            tags: tags.to_vec(),
            value: BcValue::Constant(value),
        };
        bc.check_shapes();
        bc
    }

    /// Value given as an expression in the mesh coordinates.
    pub fn coordinate(space: &FESpace, tags: &[Tag], value: Expr) -> DirichletBC {
        let bc = DirichletBC {
            space: space.clone(),
            block: None,
            tags: tags.to_vec(),
            value: BcValue::Coordinate(value),
        };
        bc.check_shapes();
        bc
    }

    /// Evaluate the condition's values at the dof positions of the mesh *as
    /// it is now* and freeze them. The result no longer reads the coordinate
    /// field, so unlike a [`coordinate`](DirichletBC::coordinate) condition
    /// it may be used in solves on a moving mesh — the right choice for, say,
    /// an inflow profile on a boundary that every admissible deformation
    /// leaves untouched.
    pub fn into_frozen(self) -> Result<DirichletBC> {
        let vals = self.dofs_and_values()?;
        Ok(DirichletBC { value: BcValue::Fixed(std::rc::Rc::new(vals)), ..self })
    }

    /// Constrain one block of a mixed space (e.g. the velocity of a
    /// velocity-pressure pair).
    pub fn on_block(space: &FESpace, block: usize, tags: &[Tag], value: BcValue) -> DirichletBC {
        assert!(space.element().is_mixed(), "block conditions need a mixed space");
        let bc = DirichletBC {
            space: space.clone(),
            block: Some(block),
            tags: tags.to_vec(),
            value,
        };
        bc.check_shapes();
        bc
    }

    fn check_shapes(&self) {
        let el = match self.block {
            Some(b) => self.space.block(b).1,
            None => self.space.element(),
        };
        let want = match el {
            Element::Scalar(_) => Shape::Scalar,
            Element::Vector(_) => Shape::Vector,
            Element::TaylorHood => panic!("mixed conditions must pick a block"),
        };
        let got = match &self.value {
            BcValue::Constant(t) => t.shape(),
            BcValue::Coordinate(e) => e.shape(),
            // checked before freezing
            BcValue::Fixed(_) => want,
        };
        assert_eq!(got, want, "boundary value shape does not match the space");
    }

    pub fn space(&self) -> &FESpace {
        &self.space
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn is_coordinate_dependent(&self) -> bool {
        matches!(self.value, BcValue::Coordinate(_))
    }

    /// Constrained dofs with their values, in dof order.
    pub fn dofs_and_values(&self) -> Result<Vec<(usize, f64)>> {
        if let BcValue::Fixed(vals) = &self.value {
            return Ok((**vals).clone());
        }
        let mesh = self.space.mesh().clone();
        let verts = mesh.vertices_with_tags(&self.tags)?;
        let coords = mesh.coords();
        let (offset, el) = match self.block {
            Some(b) => self.space.block(b),
            None => (0, self.space.element()),
        };
        let scalar_el = match el {
            Element::Scalar(e) | Element::Vector(e) => e,
            Element::TaylorHood => unreachable!("checked at construction"),
        };
        let vector = matches!(el, Element::Vector(_));

        // node id -> node coordinate, in the scalar element's numbering
        let mut nodes: Vec<(usize, [f64; 2])> =
            verts.iter().map(|&v| (v, coords[v])).collect();
        if matches!(scalar_el, super::element::ScalarEl::P2) {
            let nv = mesh.num_vertices();
            for facet in mesh.facets_with_tags(&self.tags)? {
                let [a, b] = mesh.edges()[facet.edge];
                let mid = [
                    0.5 * (coords[a][0] + coords[b][0]),
                    0.5 * (coords[a][1] + coords[b][1]),
                ];
                nodes.push((nv + facet.edge, mid));
            }
        }

        let mut out = Vec::with_capacity(nodes.len() * if vector { 2 } else { 1 });
        for (node, pos) in nodes {
            let value = match &self.value {
                BcValue::Constant(t) => *t,
                BcValue::Coordinate(e) => eval_pointwise(e, pos)?,
                BcValue::Fixed(_) => unreachable!("returned above"),
            };
            match (vector, value) {
                (false, Tensor::S(g)) => out.push((offset + node, g)),
                (true, Tensor::V(g)) => {
                    out.push((offset + 2 * node, g[0]));
                    out.push((offset + 2 * node + 1, g[1]));
                }
                _ => unreachable!("shape checked at construction"),
            }
        }
        out.sort_unstable_by_key(|&(d, _)| d);
        Ok(out)
    }
}

/// Merge the constrained dofs of several conditions; a later condition wins
/// where they overlap.
pub fn merged_bc_dofs(space: &FESpace, bcs: &[DirichletBC]) -> Result<Vec<(usize, f64)>> {
    let mut map: HashMap<usize, f64> = HashMap::new();
    for bc in bcs {
        assert!(
            bc.space.compatible(space),
            "boundary condition lives on a different space than the system"
        );
        for (dof, g) in bc.dofs_and_values()? {
            map.insert(dof, g);
        }
    }
    let mut out: Vec<(usize, f64)> = map.into_iter().collect();
    out.sort_unstable_by_key(|&(d, _)| d);
    Ok(out)
}

/// Evaluate a coordinate-only expression at a point.
pub fn eval_pointwise(e: &Expr, x: [f64; 2]) -> Result<Tensor> {
    Ok(match e.node() {
        ExprNode::Constant(t) => *t,
        ExprNode::Identity => Tensor::M([[1.0, 0.0], [0.0, 1.0]]),
        ExprNode::Coordinate(_) => Tensor::V(x),
        ExprNode::Add(a, b) => tensor_zip(eval_pointwise(a, x)?, eval_pointwise(b, x)?, |p, q| p + q),
        ExprNode::Sub(a, b) => tensor_zip(eval_pointwise(a, x)?, eval_pointwise(b, x)?, |p, q| p - q),
        ExprNode::Neg(a) => tensor_map(eval_pointwise(a, x)?, |p| -p),
        ExprNode::Mul(a, b) => {
            let s = scalar_val(eval_pointwise(a, x)?);
            tensor_map(eval_pointwise(b, x)?, |p| s * p)
        }
        ExprNode::Div(a, b) => {
            let s = scalar_val(eval_pointwise(b, x)?);
            tensor_map(eval_pointwise(a, x)?, |p| p / s)
        }
        ExprNode::Power(a, n) => Tensor::S(scalar_val(eval_pointwise(a, x)?).powi(*n)),
        ExprNode::Sin(a) => Tensor::S(scalar_val(eval_pointwise(a, x)?).sin()),
        ExprNode::Cos(a) => Tensor::S(scalar_val(eval_pointwise(a, x)?).cos()),
        ExprNode::Inner(a, b) => Tensor::S(tensor_inner(
            eval_pointwise(a, x)?,
            eval_pointwise(b, x)?,
        )),
        ExprNode::Dot(a, b) => tensor_dot(eval_pointwise(a, x)?, eval_pointwise(b, x)?),
        ExprNode::Transpose(a) => match eval_pointwise(a, x)? {
            Tensor::M(m) => Tensor::M([[m[0][0], m[1][0]], [m[0][1], m[1][1]]]),
            _ => unreachable!(),
        },
        ExprNode::Det(a) => match eval_pointwise(a, x)? {
            Tensor::M(m) => Tensor::S(m[0][0] * m[1][1] - m[0][1] * m[1][0]),
            _ => unreachable!(),
        },
        _ => {
            return Err(Error::Shape(format!(
                "boundary values may only reference coordinates and constants: {e:?}"
            )))
        }
    })
}

fn scalar_val(t: Tensor) -> f64 {
    match t {
        Tensor::S(v) => v,
        _ => unreachable!("shape-checked at construction"),
    }
}
