//! Finite element spaces and their dof layouts.
//!
//! Global numbering:
//! * scalar P1 — dof `v` at vertex `v`;
//! * scalar P2 — vertices first, then `nv + e` for global edge `e`;
//! * vector spaces — components interleaved, scalar dof `d` becomes `(2d, 2d+1)`;
//! * Taylor–Hood — vector P2 block first, then the scalar P1 pressure block.

use super::element::ScalarEl;
use crate::mesh::Mesh;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    Scalar(ScalarEl),
    Vector(ScalarEl),
    /// Mixed velocity/pressure pair: vector P2 x scalar P1.
    TaylorHood,
}

impl Element {
    pub fn is_mixed(self) -> bool {
        matches!(self, Element::TaylorHood)
    }

    pub fn is_vector(self) -> bool {
        matches!(self, Element::Vector(_))
    }

    /// Polynomial degree used by quadrature estimates; mixed spaces answer
    /// through their blocks.
    pub fn degree(self) -> usize {
        match self {
            Element::Scalar(el) | Element::Vector(el) => el.degree(),
            Element::TaylorHood => 2,
        }
    }
}

#[derive(Debug)]
pub struct SpaceData {
    mesh: Mesh,
    element: Element,
    ndofs: usize,
}

#[derive(Clone)]
pub struct FESpace(Rc<SpaceData>);

impl std::fmt::Debug for FESpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FESpace({:?}, {} dofs)", self.0.element, self.0.ndofs)
    }
}

fn scalar_ndofs(mesh: &Mesh, el: ScalarEl) -> usize {
    match el {
        ScalarEl::P1 => mesh.num_vertices(),
        ScalarEl::P2 => mesh.num_vertices() + mesh.num_edges(),
    }
}

impl FESpace {
    pub fn new(mesh: &Mesh, element: Element) -> FESpace {
        let ndofs = match element {
            Element::Scalar(el) => scalar_ndofs(mesh, el),
            Element::Vector(el) => 2 * scalar_ndofs(mesh, el),
            Element::TaylorHood => {
                2 * scalar_ndofs(mesh, ScalarEl::P2) + scalar_ndofs(mesh, ScalarEl::P1)
            }
        };
        FESpace(Rc::new(SpaceData {
            mesh: mesh.clone(),
            element,
            ndofs,
        }))
    }

    pub fn cg1(mesh: &Mesh) -> FESpace {
        FESpace::new(mesh, Element::Scalar(ScalarEl::P1))
    }

    pub fn cg2(mesh: &Mesh) -> FESpace {
        FESpace::new(mesh, Element::Scalar(ScalarEl::P2))
    }

    pub fn cg1_vec(mesh: &Mesh) -> FESpace {
        FESpace::new(mesh, Element::Vector(ScalarEl::P1))
    }

    pub fn cg2_vec(mesh: &Mesh) -> FESpace {
        FESpace::new(mesh, Element::Vector(ScalarEl::P2))
    }

    pub fn taylor_hood(mesh: &Mesh) -> FESpace {
        FESpace::new(mesh, Element::TaylorHood)
    }

    pub fn mesh(&self) -> &Mesh {
        &self.0.mesh
    }

    pub fn element(&self) -> Element {
        self.0.element
    }

    pub fn ndofs(&self) -> usize {
        self.0.ndofs
    }

    /// Stable identity of the shared space data, usable as a map key while
    /// the space is alive.
    pub(crate) fn addr(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Same mesh object and same element — dof vectors are interchangeable.
    pub fn compatible(&self, other: &FESpace) -> bool {
        self.0.mesh.same(&other.0.mesh) && self.0.element == other.0.element
    }

    /// Offset and element of a Taylor–Hood block (0 velocity, 1 pressure).
    pub fn block(&self, index: usize) -> (usize, Element) {
        assert!(self.0.element.is_mixed(), "block() requires a mixed space");
        match index {
            0 => (0, Element::Vector(ScalarEl::P2)),
            1 => (
                2 * scalar_ndofs(&self.0.mesh, ScalarEl::P2),
                Element::Scalar(ScalarEl::P1),
            ),
            _ => panic!("Taylor-Hood has blocks 0 and 1, asked for {index}"),
        }
    }

    /// Global dofs of cell `c`, in local order.
    pub fn cell_dofs(&self, c: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.ndofs_local());
        self.push_cell_dofs(c, &mut out);
        out
    }

    pub(crate) fn push_cell_dofs(&self, c: usize, out: &mut Vec<usize>) {
        let mesh = &self.0.mesh;
        let v = mesh.cell(c);
        let push_scalar = |el: ScalarEl, base: usize, out: &mut Vec<usize>| {
            for &vi in &v {
                out.push(base + vi);
            }
            if el == ScalarEl::P2 {
                let nv = mesh.num_vertices();
                for e in mesh.cell_edges(c) {
                    out.push(base + nv + e);
                }
            }
        };
        let push_vector = |el: ScalarEl, out: &mut Vec<usize>| {
            let mut scal = Vec::with_capacity(6);
            push_scalar(el, 0, &mut scal);
            for d in scal {
                out.push(2 * d);
                out.push(2 * d + 1);
            }
        };
        match self.0.element {
            Element::Scalar(el) => push_scalar(el, 0, out),
            Element::Vector(el) => push_vector(el, out),
            Element::TaylorHood => {
                push_vector(ScalarEl::P2, out);
                let off = self.block(1).0;
                for &vi in &v {
                    out.push(off + vi);
                }
            }
        }
    }

    pub fn ndofs_local(&self) -> usize {
        match self.0.element {
            Element::Scalar(el) => el.ndofs_local(),
            Element::Vector(el) => 2 * el.ndofs_local(),
            Element::TaylorHood => 15,
        }
    }

    /// Coordinates of the nodal point of each dof (P2 edge dofs sit at edge
    /// midpoints; vector dofs repeat their node, components interleaved).
    pub fn dof_coords(&self) -> Vec<[f64; 2]> {
        let mesh = &self.0.mesh;
        let coords = mesh.coords();
        let scalar_nodes = |el: ScalarEl| -> Vec<[f64; 2]> {
            let mut out: Vec<[f64; 2]> = coords.clone();
            if el == ScalarEl::P2 {
                for e in mesh.edges() {
                    let (a, b) = (coords[e[0]], coords[e[1]]);
                    out.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
                }
            }
            out
        };
        match self.0.element {
            Element::Scalar(el) => scalar_nodes(el),
            Element::Vector(el) => scalar_nodes(el)
                .into_iter()
                .flat_map(|p| [p, p])
                .collect(),
            Element::TaylorHood => {
                let mut out: Vec<[f64; 2]> = scalar_nodes(ScalarEl::P2)
                    .into_iter()
                    .flat_map(|p| [p, p])
                    .collect();
                out.extend(scalar_nodes(ScalarEl::P1));
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate;

    #[test]
    fn dof_counts_and_cell_dofs() {
        let m = generate::unit_square(2); // 9 vertices, 16 edges, 8 cells
        assert_eq!(FESpace::cg1(&m).ndofs(), 9);
        assert_eq!(FESpace::cg2(&m).ndofs(), 25);
        assert_eq!(FESpace::cg1_vec(&m).ndofs(), 18);
        assert_eq!(FESpace::taylor_hood(&m).ndofs(), 59);

        let v2 = FESpace::cg2_vec(&m);
        let dofs = v2.cell_dofs(0);
        assert_eq!(dofs.len(), 12);
        // vertex dofs of the cell come first, interleaved
        let cell = m.cell(0);
        assert_eq!(dofs[0], 2 * cell[0]);
        assert_eq!(dofs[1], 2 * cell[0] + 1);

        let th = FESpace::taylor_hood(&m);
        let dofs = th.cell_dofs(0);
        assert_eq!(dofs.len(), 15);
        assert_eq!(dofs[12], th.block(1).0 + cell[0]);
    }

    #[test]
    fn p2_dof_coords_hit_midpoints() {
        let m = generate::unit_square(1);
        let s = FESpace::cg2(&m);
        let pts = s.dof_coords();
        assert_eq!(pts.len(), s.ndofs());
        // every edge midpoint present
        for e in m.edges() {
            let c = m.coords();
            let mid = [
                0.5 * (c[e[0]][0] + c[e[1]][0]),
                0.5 * (c[e[0]][1] + c[e[1]][1]),
            ];
            assert!(pts
                .iter()
                .any(|p| (p[0] - mid[0]).abs() + (p[1] - mid[1]).abs() < 1e-15));
        }
    }
}
