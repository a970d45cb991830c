//! Legacy ASCII VTK writer (unstructured grid of triangles with point data).
//!
//! Fields are given as per-vertex values; higher-order functions are written
//! through their vertex dofs by the fem layer.

use super::Mesh;
use crate::error::Result;
use std::io::Write;
use std::path::Path;

pub fn write_vtk(
    mesh: &Mesh,
    path: impl AsRef<Path>,
    point_scalars: &[(&str, &[f64])],
    point_vectors: &[(&str, &[f64])],
) -> Result<()> {
    let nv = mesh.num_vertices();
    for (name, data) in point_scalars {
        assert_eq!(data.len(), nv, "scalar field '{name}' must have one value per vertex");
    }
    for (name, data) in point_vectors {
        assert_eq!(data.len(), 2 * nv, "vector field '{name}' must have two values per vertex");
    }

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "shapegrad output")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;

    writeln!(out, "POINTS {nv} double")?;
    for p in mesh.coords().iter() {
        writeln!(out, "{} {} 0", p[0], p[1])?;
    }

    let nc = mesh.num_cells();
    writeln!(out, "CELLS {nc} {}", 4 * nc)?;
    for c in 0..nc {
        let v = mesh.cell(c);
        writeln!(out, "3 {} {} {}", v[0], v[1], v[2])?;
    }
    writeln!(out, "CELL_TYPES {nc}")?;
    for _ in 0..nc {
        writeln!(out, "5")?;
    }

    if !point_scalars.is_empty() || !point_vectors.is_empty() {
        writeln!(out, "POINT_DATA {nv}")?;
    }
    for (name, data) in point_scalars {
        writeln!(out, "SCALARS {name} double 1")?;
        writeln!(out, "LOOKUP_TABLE default")?;
        for v in data.iter() {
            writeln!(out, "{v}")?;
        }
    }
    for (name, data) in point_vectors {
        writeln!(out, "VECTORS {name} double")?;
        for v in 0..nv {
            writeln!(out, "{} {} 0", data[2 * v], data[2 * v + 1])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::generate;

    #[test]
    fn writes_well_formed_file() {
        let m = generate::unit_square(2);
        let dir = std::env::temp_dir().join("shapegrad_vtk_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("square.vtk");
        let s: Vec<f64> = (0..m.num_vertices()).map(|v| v as f64).collect();
        let vec: Vec<f64> = vec![0.5; 2 * m.num_vertices()];
        write_vtk(&m, &path, &[("height", &s)], &[("disp", &vec)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0"));
        assert!(text.contains("DATASET UNSTRUCTURED_GRID"));
        assert!(text.contains("CELL_TYPES 8"));
        assert!(text.contains("SCALARS height double 1"));
        assert!(text.contains("VECTORS disp double"));
    }
}
