//! Lagrange basis functions on the reference triangle.
//!
//! Barycentric coordinates: `l0 = 1 - xi - eta, l1 = xi, l2 = eta`.
//! P2 local ordering: three vertex functions, then the midpoint function of
//! edge `k` (between local vertices `k` and `(k+1) % 3`) at slot `3 + k`.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarEl {
    P1,
    P2,
}

impl ScalarEl {
    pub fn ndofs_local(self) -> usize {
        match self {
            ScalarEl::P1 => 3,
            ScalarEl::P2 => 6,
        }
    }

    pub fn degree(self) -> usize {
        match self {
            ScalarEl::P1 => 1,
            ScalarEl::P2 => 2,
        }
    }

    pub fn value(self, k: usize, xi: f64, eta: f64) -> f64 {
        let l = [1.0 - xi - eta, xi, eta];
        match self {
            ScalarEl::P1 => l[k],
            ScalarEl::P2 => match k {
                0..=2 => l[k] * (2.0 * l[k] - 1.0),
                3..=5 => 4.0 * l[k - 3] * l[(k - 2) % 3],
                _ => unreachable!(),
            },
        }
    }

    pub fn grad(self, k: usize, xi: f64, eta: f64) -> [f64; 2] {
        const DL: [[f64; 2]; 3] = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
        let l = [1.0 - xi - eta, xi, eta];
        match self {
            ScalarEl::P1 => DL[k],
            ScalarEl::P2 => match k {
                0..=2 => {
                    let f = 4.0 * l[k] - 1.0;
                    [f * DL[k][0], f * DL[k][1]]
                }
                3..=5 => {
                    let (i, j) = (k - 3, (k - 2) % 3);
                    [
                        4.0 * (l[j] * DL[i][0] + l[i] * DL[j][0]),
                        4.0 * (l[j] * DL[i][1] + l[i] * DL[j][1]),
                    ]
                }
                _ => unreachable!(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NODES: [[f64; 2]; 6] = [
        [0.0, 0.0],
        [1.0, 0.0],
        [0.0, 1.0],
        [0.5, 0.0],
        [0.5, 0.5],
        [0.0, 0.5],
    ];

    #[test]
    fn bases_are_nodal() {
        for el in [ScalarEl::P1, ScalarEl::P2] {
            let n = el.ndofs_local();
            for k in 0..n {
                for (m, p) in NODES.iter().take(n).enumerate() {
                    let v = el.value(k, p[0], p[1]);
                    let expected = if m == k { 1.0 } else { 0.0 };
                    assert!(
                        (v - expected).abs() < 1e-14,
                        "{el:?} basis {k} at node {m}: {v}"
                    );
                }
            }
        }
    }

    #[test]
    fn partition_of_unity_and_gradients() {
        for el in [ScalarEl::P1, ScalarEl::P2] {
            let n = el.ndofs_local();
            for &[xi, eta] in &[[0.3, 0.2], [0.1, 0.7], [0.25, 0.25]] {
                let sum: f64 = (0..n).map(|k| el.value(k, xi, eta)).sum();
                assert!((sum - 1.0).abs() < 1e-14);
                let gsum: [f64; 2] = (0..n).fold([0.0, 0.0], |acc, k| {
                    let g = el.grad(k, xi, eta);
                    [acc[0] + g[0], acc[1] + g[1]]
                });
                assert!(gsum[0].abs() < 1e-14 && gsum[1].abs() < 1e-14);

                // finite-difference check of the gradients
                let h = 1e-6;
                for k in 0..n {
                    let g = el.grad(k, xi, eta);
                    let dx = (el.value(k, xi + h, eta) - el.value(k, xi - h, eta)) / (2.0 * h);
                    let dy = (el.value(k, xi, eta + h) - el.value(k, xi, eta - h)) / (2.0 * h);
                    assert!((g[0] - dx).abs() < 1e-8 && (g[1] - dy).abs() < 1e-8);
                }
            }
        }
    }
}
