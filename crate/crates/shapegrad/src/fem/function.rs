//! Finite element functions: a space plus a mutable dof vector with a stable
//! tape identity.

use super::space::{Element, FESpace};
use crate::tape::ObjId;
use std::cell::{Ref, RefCell};
use std::rc::Rc;

#[derive(Debug)]
pub struct FnData {
    id: ObjId,
    space: FESpace,
    dofs: RefCell<Vec<f64>>,
    name: String,
}

/// Shared handle; clones alias the same dofs and identity.
#[derive(Clone)]
pub struct FEFunction(Rc<FnData>);

impl std::fmt::Debug for FEFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FEFunction({:?}, {:?})", self.0.name, self.0.space)
    }
}

impl FEFunction {
    pub fn new(space: &FESpace, name: impl Into<String>) -> FEFunction {
        FEFunction(Rc::new(FnData {
            id: ObjId::fresh(),
            space: space.clone(),
            dofs: RefCell::new(vec![0.0; space.ndofs()]),
            name: name.into(),
        }))
    }

    pub fn id(&self) -> ObjId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn space(&self) -> &FESpace {
        &self.0.space
    }

    pub fn same(&self, other: &FEFunction) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn dofs(&self) -> Ref<'_, Vec<f64>> {
        self.0.dofs.borrow()
    }

    pub fn dofs_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        self.0.dofs.borrow_mut()
    }

    pub fn copy_dofs(&self) -> Vec<f64> {
        self.0.dofs.borrow().clone()
    }

    pub fn set_dofs(&self, dofs: &[f64]) {
        let mut d = self.0.dofs.borrow_mut();
        assert_eq!(dofs.len(), d.len(), "dof vector length mismatch");
        d.copy_from_slice(dofs);
    }

    pub fn fill(&self, value: f64) {
        self.0.dofs.borrow_mut().fill(value);
    }

    pub fn axpy(&self, a: f64, other: &FEFunction) {
        assert!(self.space().compatible(other.space()));
        let o = other.copy_dofs();
        let mut d = self.0.dofs.borrow_mut();
        for (di, oi) in d.iter_mut().zip(&o) {
            *di += a * oi;
        }
    }

    /// Nodal interpolation of a scalar closure (scalar spaces only).
    pub fn interpolate_scalar(&self, f: impl Fn([f64; 2]) -> f64) {
        assert!(
            matches!(self.space().element(), Element::Scalar(_)),
            "interpolate_scalar needs a scalar space"
        );
        let pts = self.space().dof_coords();
        let mut d = self.0.dofs.borrow_mut();
        for (i, p) in pts.iter().enumerate() {
            d[i] = f(*p);
        }
    }

    /// Nodal interpolation of a vector closure (vector spaces only).
    pub fn interpolate_vector(&self, f: impl Fn([f64; 2]) -> [f64; 2]) {
        assert!(
            self.space().element().is_vector(),
            "interpolate_vector needs a vector space"
        );
        let pts = self.space().dof_coords();
        let mut d = self.0.dofs.borrow_mut();
        for i in 0..d.len() / 2 {
            let v = f(pts[2 * i]);
            d[2 * i] = v[0];
            d[2 * i + 1] = v[1];
        }
    }

    /// Vertex values for VTK output: the first `nv` (scalar) or `2 nv`
    /// (vector) dofs, which by the dof layout always sit at vertices.
    pub fn vertex_values(&self) -> Vec<f64> {
        let nv = self.space().mesh().num_vertices();
        let n = match self.space().element() {
            Element::Scalar(_) => nv,
            Element::Vector(_) => 2 * nv,
            Element::TaylorHood => panic!("split mixed functions before exporting"),
        };
        self.0.dofs.borrow()[..n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate;

    #[test]
    fn interpolation_is_nodal() {
        let m = generate::unit_square(2);
        let s = FEFunction::new(&FESpace::cg2(&m), "s");
        s.interpolate_scalar(|p| p[0] + 2.0 * p[1]);
        // value at vertex 0 = (0,0) and at some midpoint
        let pts = s.space().dof_coords();
        let d = s.copy_dofs();
        for (i, p) in pts.iter().enumerate() {
            assert!((d[i] - (p[0] + 2.0 * p[1])).abs() < 1e-15);
        }

        let v = FEFunction::new(&FESpace::cg1_vec(&m), "v");
        v.interpolate_vector(|p| [p[1], -p[0]]);
        let d = v.copy_dofs();
        let c = m.coords();
        for (i, p) in c.iter().enumerate() {
            assert_eq!(d[2 * i], p[1]);
            assert_eq!(d[2 * i + 1], -p[0]);
        }
    }
}
