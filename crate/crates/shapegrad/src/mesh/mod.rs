//! Triangle meshes with movable vertices, boundary markers and boundary
//! extraction.
//!
//! Connectivity (cells, edges, markers) is immutable after construction; only
//! vertex coordinates change, through [`Mesh::move_by`]. That split is what
//! makes the operation tape sound: a mesh version is fully described by its
//! coordinate vector.

pub mod generate;
pub mod gmsh;
pub mod vtk;

use crate::error::{Error, Result};
use crate::tape::ObjId;
use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

pub type Tag = i32;

/// A marked boundary edge together with its owning cell.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFacet {
    /// Global edge index.
    pub edge: usize,
    /// The unique cell containing this edge.
    pub cell: usize,
    /// Local edge index in the cell: edge `k` joins local vertices `k` and
    /// `(k + 1) % 3`.
    pub local_edge: usize,
    pub tag: Tag,
}

#[derive(Debug)]
pub struct MeshData {
    id: ObjId,
    coords: RefCell<Vec<[f64; 2]>>,
    cells: Vec<[usize; 3]>,
    /// Sorted vertex pairs, ordered lexicographically.
    edges: Vec<[usize; 2]>,
    /// Per cell, global indices of the three local edges.
    cell_edges: Vec<[usize; 3]>,
    facets: Vec<BoundaryFacet>,
}

/// Shared handle to a mesh. Clones refer to the same object (same identity on
/// the tape, same coordinate storage).
#[derive(Clone)]
pub struct Mesh(pub(crate) Rc<MeshData>);

impl std::fmt::Debug for Mesh {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Mesh({} vertices, {} cells, {} marked facets)",
            self.num_vertices(),
            self.num_cells(),
            self.0.facets.len()
        )
    }
}

fn signed_area_of(p: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]))
}

impl Mesh {
    /// Build a mesh from raw vertex coordinates, cells and facet markers.
    ///
    /// Clockwise cells are reoriented (with a warning); a marker that does not
    /// match a boundary edge is an error.
    pub fn new(
        coords: Vec<[f64; 2]>,
        mut cells: Vec<[usize; 3]>,
        markers: &[([usize; 2], Tag)],
    ) -> Result<Mesh> {
        let nv = coords.len();
        for (ci, cell) in cells.iter().enumerate() {
            for &v in cell {
                if v >= nv {
                    return Err(Error::MeshParse {
                        path: "<memory>".into(),
                        line: 0,
                        msg: format!("cell {ci} references vertex {v} out of range"),
                    });
                }
            }
        }

        let mut flipped = 0usize;
        for cell in &mut cells {
            let p = [coords[cell[0]], coords[cell[1]], coords[cell[2]]];
            if signed_area_of(&p) < 0.0 {
                cell.swap(1, 2);
                flipped += 1;
            }
        }
        if flipped > 0 {
            log::warn!("reoriented {flipped} clockwise cells to counter-clockwise");
        }

        // Global edges: sorted vertex pair -> (edge index, #incident cells, owner)
        let mut edge_ids: BTreeMap<[usize; 2], usize> = BTreeMap::new();
        let mut incidence: Vec<(usize, usize, usize)> = Vec::new(); // count, cell, local
        let mut edges: Vec<[usize; 2]> = Vec::new();
        let mut cell_edges = vec![[usize::MAX; 3]; cells.len()];
        for (ci, cell) in cells.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (cell[k], cell[(k + 1) % 3]);
                let key = [a.min(b), a.max(b)];
                let id = *edge_ids.entry(key).or_insert_with(|| {
                    edges.push(key);
                    incidence.push((0, 0, 0));
                    edges.len() - 1
                });
                cell_edges[ci][k] = id;
                incidence[id].0 += 1;
                incidence[id].1 = ci;
                incidence[id].2 = k;
            }
        }

        let mut facets = Vec::with_capacity(markers.len());
        for &(pair, tag) in markers {
            let key = [pair[0].min(pair[1]), pair[0].max(pair[1])];
            let edge = *edge_ids
                .get(&key)
                .ok_or(Error::DanglingMarker(key))?;
            if incidence[edge].0 != 1 {
                return Err(Error::DanglingMarker(key));
            }
            facets.push(BoundaryFacet {
                edge,
                cell: incidence[edge].1,
                local_edge: incidence[edge].2,
                tag,
            });
        }
        facets.sort_by_key(|f| (f.edge, f.tag));

        Ok(Mesh(Rc::new(MeshData {
            id: ObjId::fresh(),
            coords: RefCell::new(coords),
            cells,
            edges,
            cell_edges,
            facets,
        })))
    }

    pub fn id(&self) -> ObjId {
        self.0.id
    }

    /// Two handles to the same underlying mesh?
    pub fn same(&self, other: &Mesh) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub fn num_vertices(&self) -> usize {
        self.0.coords.borrow().len()
    }

    pub fn num_cells(&self) -> usize {
        self.0.cells.len()
    }

    pub fn num_edges(&self) -> usize {
        self.0.edges.len()
    }

    pub fn coords(&self) -> Ref<'_, Vec<[f64; 2]>> {
        self.0.coords.borrow()
    }

    /// Coordinates as a flat `[x0, y0, x1, y1, ...]` vector — the layout of a
    /// CG1 vector field, and the value stored for a mesh version on the tape.
    pub fn coords_flat(&self) -> Vec<f64> {
        let c = self.0.coords.borrow();
        let mut out = Vec::with_capacity(2 * c.len());
        for p in c.iter() {
            out.push(p[0]);
            out.push(p[1]);
        }
        out
    }

    pub fn set_coords_flat(&self, flat: &[f64]) {
        let mut c = self.0.coords.borrow_mut();
        assert_eq!(flat.len(), 2 * c.len(), "coordinate vector length mismatch");
        for (v, p) in c.iter_mut().enumerate() {
            p[0] = flat[2 * v];
            p[1] = flat[2 * v + 1];
        }
    }

    pub fn cell(&self, c: usize) -> [usize; 3] {
        self.0.cells[c]
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.0.cells
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.0.edges
    }

    pub fn cell_edges(&self, c: usize) -> [usize; 3] {
        self.0.cell_edges[c]
    }

    pub fn cell_coords(&self, c: usize) -> [[f64; 2]; 3] {
        let coords = self.0.coords.borrow();
        let v = self.0.cells[c];
        [coords[v[0]], coords[v[1]], coords[v[2]]]
    }

    pub fn signed_area(&self, c: usize) -> f64 {
        signed_area_of(&self.cell_coords(c))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_cells()).map(|c| self.signed_area(c)).sum()
    }

    /// Displace every vertex by the CG1 vector field `theta`
    /// (flat `[dx0, dy0, dx1, dy1, ...]` layout).
    ///
    /// If any cell becomes degenerate (signed area at or below
    /// `1e-14 *` the mean pre-move cell area), the move is rolled back and an
    /// error naming the first inverted cell is returned.
    pub fn move_by(&self, theta: &[f64]) -> Result<()> {
        let nv = self.num_vertices();
        assert_eq!(theta.len(), 2 * nv, "displacement vector length mismatch");
        let mean_area = (0..self.num_cells())
            .map(|c| self.signed_area(c).abs())
            .sum::<f64>()
            / self.num_cells().max(1) as f64;
        {
            let mut c = self.0.coords.borrow_mut();
            for (v, p) in c.iter_mut().enumerate() {
                p[0] += theta[2 * v];
                p[1] += theta[2 * v + 1];
            }
        }
        let floor = 1e-14 * mean_area;
        for cidx in 0..self.num_cells() {
            let area = self.signed_area(cidx);
            if area <= floor {
                let mut c = self.0.coords.borrow_mut();
                for (v, p) in c.iter_mut().enumerate() {
                    p[0] -= theta[2 * v];
                    p[1] -= theta[2 * v + 1];
                }
                return Err(Error::DegenerateCell { cell: cidx, area });
            }
        }
        Ok(())
    }

    pub fn boundary_facets(&self) -> &[BoundaryFacet] {
        &self.0.facets
    }

    pub fn has_tag(&self, tag: Tag) -> bool {
        self.0.facets.iter().any(|f| f.tag == tag)
    }

    pub fn facets_with_tags(&self, tags: &[Tag]) -> Result<Vec<BoundaryFacet>> {
        for &t in tags {
            if !self.has_tag(t) {
                return Err(Error::MarkerNotFound { marker: t });
            }
        }
        Ok(self
            .0
            .facets
            .iter()
            .copied()
            .filter(|f| tags.contains(&f.tag))
            .collect())
    }

    /// Sorted, deduplicated vertices incident to facets with the given tags.
    pub fn vertices_with_tags(&self, tags: &[Tag]) -> Result<Vec<usize>> {
        let mut verts: Vec<usize> = self
            .facets_with_tags(tags)?
            .iter()
            .flat_map(|f| self.0.edges[f.edge])
            .collect();
        verts.sort_unstable();
        verts.dedup();
        Ok(verts)
    }

    /// Minimum over cells and corners of `2 A / (|e_i| |e_j|)` — 1 for the
    /// equilateral corner angle, approaching 0 for slivers.
    pub fn min_scaled_jacobian(&self) -> f64 {
        let mut q = f64::INFINITY;
        for c in 0..self.num_cells() {
            let p = self.cell_coords(c);
            let a2 = 2.0 * signed_area_of(&p);
            for k in 0..3 {
                let e1 = sub(p[(k + 1) % 3], p[k]);
                let e2 = sub(p[(k + 2) % 3], p[k]);
                q = q.min(a2 / (norm(e1) * norm(e2)));
            }
        }
        q
    }

    pub fn min_edge_length(&self) -> f64 {
        let coords = self.0.coords.borrow();
        self.0
            .edges
            .iter()
            .map(|e| norm(sub(coords[e[1]], coords[e[0]])))
            .fold(f64::INFINITY, f64::min)
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    (a[0] * a[0] + a[1] * a[1]).sqrt()
}

/// The trace of a mesh over a set of marked facets: a 1-D chain of edges with
/// its own (vector CG1) degrees of freedom, used for boundary controls.
#[derive(Debug)]
pub struct BoundaryMeshData {
    parent: Mesh,
    /// Parent vertex index per boundary vertex, ascending.
    verts: Vec<usize>,
    /// Facets as boundary-local vertex pairs.
    edges: Vec<([usize; 2], Tag)>,
}

#[derive(Clone)]
pub struct BoundaryMesh(pub(crate) Rc<BoundaryMeshData>);

/// Extract the boundary mesh spanned by the facets with the given tags.
pub fn extract_boundary(mesh: &Mesh, tags: &[Tag]) -> Result<BoundaryMesh> {
    let facets = mesh.facets_with_tags(tags)?;
    if facets.is_empty() {
        return Err(Error::MarkerNotFound { marker: tags.first().copied().unwrap_or(0) });
    }
    let verts = mesh.vertices_with_tags(tags)?;
    let index_of = |pv: usize| verts.binary_search(&pv).unwrap();
    let edges = facets
        .iter()
        .map(|f| {
            let e = mesh.0.edges[f.edge];
            ([index_of(e[0]), index_of(e[1])], f.tag)
        })
        .collect();
    Ok(BoundaryMesh(Rc::new(BoundaryMeshData {
        parent: mesh.clone(),
        verts,
        edges,
    })))
}

impl BoundaryMesh {
    pub fn parent(&self) -> &Mesh {
        &self.0.parent
    }

    pub fn num_vertices(&self) -> usize {
        self.0.verts.len()
    }

    /// Vector-CG1 dof count on the boundary chain.
    pub fn ndofs(&self) -> usize {
        2 * self.0.verts.len()
    }

    pub fn parent_vertices(&self) -> &[usize] {
        &self.0.verts
    }

    pub fn edges(&self) -> &[([usize; 2], Tag)] {
        &self.0.edges
    }

    /// For each boundary dof, the corresponding parent vector-CG1 dof.
    pub fn scatter_map(&self) -> Vec<usize> {
        let mut map = Vec::with_capacity(self.ndofs());
        for &pv in &self.0.verts {
            map.push(2 * pv);
            map.push(2 * pv + 1);
        }
        map
    }

    pub fn dof_coords(&self) -> Vec<[f64; 2]> {
        let coords = self.0.parent.coords();
        self.0.verts.iter().map(|&v| coords[v]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_cell_square() -> Mesh {
        // unit square split along the main diagonal
        Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            &[([0, 1], 1), ([1, 2], 2), ([2, 3], 3), ([3, 0], 4)],
        )
        .unwrap()
    }

    #[test]
    fn builds_edges_and_facets() {
        let m = two_cell_square();
        assert_eq!(m.num_edges(), 5);
        assert_eq!(m.boundary_facets().len(), 4);
        assert!((m.total_area() - 1.0).abs() < 1e-15);
        assert_eq!(m.vertices_with_tags(&[1]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fixes_clockwise_cells() {
        let m = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[0, 2, 1]], // clockwise
            &[],
        )
        .unwrap();
        assert!(m.signed_area(0) > 0.0);
    }

    #[test]
    fn rejects_interior_marker() {
        let err = Mesh::new(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2], [0, 2, 3]],
            &[([0, 2], 7)], // diagonal, shared by both cells
        )
        .unwrap_err();
        assert!(matches!(err, Error::DanglingMarker(_)));
    }

    #[test]
    fn move_detects_inversion_and_rolls_back() {
        let m = two_cell_square();
        let before = m.coords_flat();
        // collapse vertex 2 across the diagonal
        let mut theta = vec![0.0; 8];
        theta[4] = -1.5;
        theta[5] = -1.5;
        let err = m.move_by(&theta).unwrap_err();
        assert!(matches!(err, Error::DegenerateCell { .. }));
        assert_eq!(m.coords_flat(), before);
        // a gentle move is fine and reversible
        let theta = vec![0.01; 8];
        m.move_by(&theta).unwrap();
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn boundary_extraction() {
        let m = two_cell_square();
        let bm = extract_boundary(&m, &[1, 2]).unwrap();
        assert_eq!(bm.parent_vertices(), &[0, 1, 2]);
        assert_eq!(bm.ndofs(), 6);
        assert_eq!(bm.scatter_map(), vec![0, 1, 2, 3, 4, 5]);
        assert!(extract_boundary(&m, &[9]).is_err());
    }
}
