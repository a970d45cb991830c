//! Built-in structured mesh generators for the shipped cases and tests.

use super::{Mesh, Tag};
use crate::error::Result;

/// One triangle with vertices `p0, p1, p2`; edge `k` (between local vertices
/// `k` and `k+1`) carries marker `k + 1`.
pub fn triangle(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2]) -> Mesh {
    Mesh::new(
        vec![p0, p1, p2],
        vec![[0, 1, 2]],
        &[([0, 1], 1), ([1, 2], 2), ([2, 0], 3)],
    )
    .expect("triangle mesh is always valid")
}

/// Axis-aligned rectangle `[x0,x1] x [y0,y1]` as an `nx x ny` grid of squares,
/// each split into two triangles. Markers: bottom 1, right 2, top 3, left 4.
pub fn rectangle(nx: usize, ny: usize, corner0: [f64; 2], corner1: [f64; 2]) -> Mesh {
    assert!(nx >= 1 && ny >= 1);
    let [x0, y0] = corner0;
    let [x1, y1] = corner1;
    let vid = |i: usize, j: usize| j * (nx + 1) + i;
    let mut coords = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            coords.push([
                x0 + (x1 - x0) * i as f64 / nx as f64,
                y0 + (y1 - y0) * j as f64 / ny as f64,
            ]);
        }
    }
    let mut cells = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
            cells.push([a, b, c]);
            cells.push([a, c, d]);
        }
    }
    let mut markers: Vec<([usize; 2], Tag)> = Vec::new();
    for i in 0..nx {
        markers.push(([vid(i, 0), vid(i + 1, 0)], 1));
        markers.push(([vid(i, ny), vid(i + 1, ny)], 3));
    }
    for j in 0..ny {
        markers.push(([vid(nx, j), vid(nx, j + 1)], 2));
        markers.push(([vid(0, j), vid(0, j + 1)], 4));
    }
    Mesh::new(coords, cells, &markers).expect("structured rectangle is always valid")
}

/// Unit square with `2 n^2` cells; markers as in [`rectangle`].
pub fn unit_square(n: usize) -> Mesh {
    rectangle(n, n, [0.0, 0.0], [1.0, 1.0])
}

/// Disk of radius `outer_r` about the origin with a circular hole of radius
/// `hole_r` about `hole_c`, meshed by `n_phi` rays from the hole center to the
/// outer circle with `n_r` radial subdivisions (`2 * n_phi * n_r` cells).
///
/// Markers: outer circle 1, hole 2.
pub fn annulus(
    n_phi: usize,
    n_r: usize,
    hole_c: [f64; 2],
    hole_r: f64,
    outer_r: f64,
) -> Result<Mesh> {
    assert!(n_phi >= 3 && n_r >= 1);
    let [cx, cy] = hole_c;
    let c_norm2 = cx * cx + cy * cy;
    assert!(
        c_norm2.sqrt() + hole_r < outer_r,
        "hole must lie strictly inside the outer circle"
    );
    let vid = |k: usize, j: usize| (k % n_phi) * (n_r + 1) + j;
    let mut coords = Vec::with_capacity(n_phi * (n_r + 1));
    for k in 0..n_phi {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n_phi as f64;
        let (s, c) = phi.sin_cos();
        let d = [c, s];
        // ray hole_c + t d meets |x| = outer_r at the positive root
        let cd = cx * d[0] + cy * d[1];
        let t_outer = -cd + (cd * cd + outer_r * outer_r - c_norm2).sqrt();
        for j in 0..=n_r {
            let t = hole_r + (t_outer - hole_r) * j as f64 / n_r as f64;
            coords.push([cx + t * d[0], cy + t * d[1]]);
        }
    }
    let mut cells = Vec::with_capacity(2 * n_phi * n_r);
    for k in 0..n_phi {
        for j in 0..n_r {
            let (a, b) = (vid(k, j), vid(k + 1, j));
            let (c, d) = (vid(k + 1, j + 1), vid(k, j + 1));
            cells.push([a, b, c]);
            cells.push([a, c, d]);
        }
    }
    let mut markers: Vec<([usize; 2], Tag)> = Vec::new();
    for k in 0..n_phi {
        markers.push(([vid(k, 0), vid(k + 1, 0)], 2));
        markers.push(([vid(k, n_r), vid(k + 1, n_r)], 1));
    }
    Mesh::new(coords, cells, &markers)
}

/// Unit-square channel `[0,1]^2` with a circular obstacle of radius `r`
/// about `center`, meshed by `n_phi` rays from the obstacle to the square's
/// boundary with `n_r` radial subdivisions (`2 * n_phi * n_r` cells).
///
/// `n_phi` must be a multiple of 8 so that, with the obstacle centered, the
/// four diagonal rays pass exactly through the square's corners and the outer
/// boundary is exactly the unit square. Markers: inflow (left) 1, outflow
/// (right) 2, walls (top and bottom) 3, obstacle 4.
pub fn channel_with_obstacle(
    n_phi: usize,
    n_r: usize,
    center: [f64; 2],
    r: f64,
) -> Result<Mesh> {
    assert!(n_phi >= 8 && n_phi % 8 == 0, "n_phi must be a multiple of 8");
    assert!(n_r >= 1);
    let [cx, cy] = center;
    let margin = cx.min(1.0 - cx).min(cy).min(1.0 - cy);
    assert!(r > 0.0 && r < margin, "obstacle must lie strictly inside the square");

    let vid = |k: usize, j: usize| (k % n_phi) * (n_r + 1) + j;
    let mut coords = Vec::with_capacity(n_phi * (n_r + 1));
    for k in 0..n_phi {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / n_phi as f64;
        let (s, c) = phi.sin_cos();
        let d = [c, s];
        // smallest positive t where center + t d reaches one of the four sides
        let mut t_outer = f64::INFINITY;
        for (pos, axis) in [(0.0, 0), (1.0, 0), (0.0, 1), (1.0, 1)] {
            let t = (pos - center[axis]) / d[axis];
            if t > 0.0 {
                t_outer = t_outer.min(t);
            }
        }
        for j in 0..=n_r {
            let t = r + (t_outer - r) * j as f64 / n_r as f64;
            coords.push([cx + t * d[0], cy + t * d[1]]);
        }
    }
    let mut cells = Vec::with_capacity(2 * n_phi * n_r);
    for k in 0..n_phi {
        for j in 0..n_r {
            let (a, b) = (vid(k, j), vid(k + 1, j));
            let (c, d) = (vid(k + 1, j + 1), vid(k, j + 1));
            cells.push([a, b, c]);
            cells.push([a, c, d]);
        }
    }
    let mut markers: Vec<([usize; 2], Tag)> = Vec::new();
    for k in 0..n_phi {
        markers.push(([vid(k, 0), vid(k + 1, 0)], 4));
        let (a, b) = (vid(k, n_r), vid(k + 1, n_r));
        let mid = [
            0.5 * (coords[a][0] + coords[b][0]),
            0.5 * (coords[a][1] + coords[b][1]),
        ];
        // nearest side of the square decides the marker
        let dists = [mid[0], 1.0 - mid[0], mid[1].min(1.0 - mid[1])];
        let tags = [1, 2, 3];
        let side = (0..3).min_by(|&i, &j| dists[i].total_cmp(&dists[j])).unwrap();
        markers.push(([a, b], tags[side]));
    }
    Mesh::new(coords, cells, &markers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn unit_square_area_and_markers() {
        let m = unit_square(4);
        assert_eq!(m.num_cells(), 32);
        assert!((m.total_area() - 1.0).abs() < 1e-14);
        for tag in 1..=4 {
            assert_eq!(m.facets_with_tags(&[tag]).unwrap().len(), 4);
        }
        assert!(m.min_scaled_jacobian() > 0.49);
    }

    #[test]
    fn annulus_area_converges() {
        // exact area: pi (R^2 - r^2); polygonal approximation from below
        let m = annulus(128, 24, [0.5, 0.0], 0.2, 1.0).unwrap();
        let exact = PI * (1.0 - 0.04);
        assert!((m.total_area() - exact).abs() / exact < 2e-3);
        assert!(m.min_scaled_jacobian() > 0.05);
        assert_eq!(m.facets_with_tags(&[2]).unwrap().len(), 128);
    }

    #[test]
    fn channel_covers_square_minus_obstacle() {
        let m = channel_with_obstacle(64, 12, [0.5, 0.5], 0.13).unwrap();
        assert_eq!(m.num_cells(), 2 * 64 * 12);
        // square area is exact (corner rays hit the corners); the polygonal
        // obstacle removes slightly less than the disk
        let exact = 1.0 - PI * 0.13 * 0.13;
        assert!((m.total_area() - exact).abs() / exact < 2e-3);
        assert!(m.total_area() < 1.0 - PI * 0.13 * 0.13 * (1.0 - 1e-2));
        assert!(m.min_scaled_jacobian() > 0.05);
    }

    #[test]
    fn channel_corners_are_vertices() {
        let m = channel_with_obstacle(16, 3, [0.5, 0.5], 0.13).unwrap();
        let coords = m.coords();
        for corner in [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]] {
            let hit = coords
                .iter()
                .any(|p| (p[0] - corner[0]).abs() < 1e-12 && (p[1] - corner[1]).abs() < 1e-12);
            assert!(hit, "corner {corner:?} missing from the outer ring");
        }
    }

    #[test]
    fn channel_markers_partition_the_boundary() {
        let n_phi = 32;
        let m = channel_with_obstacle(n_phi, 4, [0.5, 0.5], 0.13).unwrap();
        assert_eq!(m.facets_with_tags(&[4]).unwrap().len(), n_phi);
        let inflow = m.facets_with_tags(&[1]).unwrap();
        let outflow = m.facets_with_tags(&[2]).unwrap();
        let walls = m.facets_with_tags(&[3]).unwrap();
        assert_eq!(inflow.len() + outflow.len() + walls.len(), n_phi);
        assert_eq!(inflow.len(), outflow.len());
        assert_eq!(walls.len(), 2 * inflow.len());
        let coords = m.coords();
        let edges = m.edges();
        for f in &inflow {
            let [a, b] = edges[f.edge];
            assert!(coords[a][0].abs() < 1e-12 && coords[b][0].abs() < 1e-12);
        }
        for f in &outflow {
            let [a, b] = edges[f.edge];
            assert!((coords[a][0] - 1.0).abs() < 1e-12 && (coords[b][0] - 1.0).abs() < 1e-12);
        }
    }
}
