//! Gmsh 2.2 ASCII reader/writer.
//!
//! Supported element types: 1 (2-node line, becomes a facet marker from its
//! first = physical tag) and 2 (3-node triangle). Anything else is an error,
//! as are markers on non-boundary edges.

use super::{Mesh, Tag};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse(&text, &path.display().to_string())
}

fn parse(text: &str, path: &str) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::MeshParse {
        path: path.to_string(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0usize;
    let mut node_ids: HashMap<u64, usize> = HashMap::new();
    let mut coords: Vec<[f64; 2]> = Vec::new();
    let mut cells: Vec<[usize; 3]> = Vec::new();
    let mut markers: Vec<([usize; 2], Tag)> = Vec::new();
    let mut saw_format = false;

    while i < lines.len() {
        let line = lines[i].trim();
        match line {
            "$MeshFormat" => {
                let f = lines.get(i + 1).map(|s| s.trim()).unwrap_or("");
                let mut parts = f.split_whitespace();
                let version = parts.next().unwrap_or("");
                if version != "2.2" {
                    return Err(err(i + 2, format!("unsupported MeshFormat '{version}', expected 2.2")));
                }
                if parts.next() != Some("0") {
                    return Err(err(i + 2, "only ASCII files are supported".into()));
                }
                saw_format = true;
                i += 3; // format line + $EndMeshFormat
            }
            "$Nodes" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| err(i + 2, "bad node count".into()))?;
                for k in 0..n {
                    let ln = i + 2 + k;
                    let mut parts = lines
                        .get(ln)
                        .ok_or_else(|| err(ln + 1, "unexpected end of $Nodes".into()))?
                        .split_whitespace();
                    let id: u64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln + 1, "bad node id".into()))?;
                    let x: f64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln + 1, "bad x coordinate".into()))?;
                    let y: f64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| err(ln + 1, "bad y coordinate".into()))?;
                    node_ids.insert(id, coords.len());
                    coords.push([x, y]);
                }
                i += n + 3;
            }
            "$Elements" => {
                let n: usize = lines
                    .get(i + 1)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| err(i + 2, "bad element count".into()))?;
                for k in 0..n {
                    let ln = i + 2 + k;
                    let row: Vec<i64> = lines
                        .get(ln)
                        .ok_or_else(|| err(ln + 1, "unexpected end of $Elements".into()))?
                        .split_whitespace()
                        .map(|s| s.parse::<i64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| err(ln + 1, format!("bad element row: {e}")))?;
                    if row.len() < 3 {
                        return Err(err(ln + 1, "element row too short".into()));
                    }
                    let etype = row[1];
                    let ntags = row[2] as usize;
                    let nodes = &row[3 + ntags..];
                    let look = |id: i64| -> Result<usize> {
                        node_ids
                            .get(&(id as u64))
                            .copied()
                            .ok_or_else(|| err(ln + 1, format!("unknown node id {id}")))
                    };
                    match etype {
                        1 => {
                            if ntags == 0 {
                                return Err(err(ln + 1, "line element without physical tag".into()));
                            }
                            if nodes.len() != 2 {
                                return Err(err(ln + 1, "line element needs 2 nodes".into()));
                            }
                            markers.push(([look(nodes[0])?, look(nodes[1])?], row[3] as Tag));
                        }
                        2 => {
                            if nodes.len() != 3 {
                                return Err(err(ln + 1, "triangle element needs 3 nodes".into()));
                            }
                            cells.push([look(nodes[0])?, look(nodes[1])?, look(nodes[2])?]);
                        }
                        t => {
                            return Err(err(ln + 1, format!("unsupported element type {t} (only lines and triangles)")));
                        }
                    }
                }
                i += n + 3;
            }
            _ => i += 1,
        }
    }

    if !saw_format {
        return Err(err(1, "missing $MeshFormat section".into()));
    }
    if cells.is_empty() {
        return Err(err(1, "mesh contains no triangles".into()));
    }
    Mesh::new(coords, cells, &markers)
}

/// Write in the same dialect [`load_mesh`] reads: marked facets as 2-node
/// lines with one physical tag, triangles untagged.
pub fn write_gmsh22(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "$MeshFormat\n2.2 0 8\n$EndMeshFormat")?;
    let coords = mesh.coords();
    writeln!(out, "$Nodes\n{}", coords.len())?;
    for (v, p) in coords.iter().enumerate() {
        writeln!(out, "{} {} {} 0", v + 1, p[0], p[1])?;
    }
    writeln!(out, "$EndNodes")?;
    let facets = mesh.boundary_facets();
    writeln!(out, "$Elements\n{}", facets.len() + mesh.num_cells())?;
    let mut eid = 1usize;
    for f in facets {
        let e = mesh.edges()[f.edge];
        writeln!(out, "{} 1 1 {} {} {}", eid, f.tag, e[0] + 1, e[1] + 1)?;
        eid += 1;
    }
    for c in 0..mesh.num_cells() {
        let v = mesh.cell(c);
        writeln!(out, "{} 2 0 {} {} {}", eid, v[0] + 1, v[1] + 1, v[2] + 1)?;
        eid += 1;
    }
    writeln!(out, "$EndElements")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_file() {
        let text = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
4
1 1 1 10 1 2
2 1 1 20 2 3
3 2 0 1 2 3
4 2 0 1 3 4
$EndElements
";
        let m = parse(text, "test.msh").unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_cells(), 2);
        assert_eq!(m.facets_with_tags(&[10]).unwrap().len(), 1);
        assert_eq!(m.facets_with_tags(&[20]).unwrap().len(), 1);
    }

    #[test]
    fn rejects_wrong_version_and_bad_marker() {
        let bad_version = "$MeshFormat\n4.1 0 8\n$EndMeshFormat\n";
        assert!(matches!(
            parse(bad_version, "t.msh"),
            Err(Error::MeshParse { .. })
        ));

        // marker on the interior diagonal
        let dangling = "\
$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
3
1 1 1 10 1 3
2 2 0 1 2 3
3 2 0 1 3 4
$EndElements
";
        assert!(matches!(
            parse(dangling, "t.msh"),
            Err(Error::DanglingMarker(_))
        ));
    }
}
