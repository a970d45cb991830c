//! Quadrature on the reference triangle `{xi >= 0, eta >= 0, xi + eta <= 1}`
//! and on the unit interval (for boundary facets).
//!
//! Degrees 1–3 use the classic symmetric rules; degrees 4–8 collapse a
//! tensor-product Gauss–Legendre grid onto the triangle (Duffy transform
//! `x = u, y = v (1 - u)`, Jacobian `1 - u`). All nodes and weights are in
//! closed form, so every rule is exact to machine precision for polynomials
//! up to its degree — the monomial tests below pin that down.

use std::sync::OnceLock;

pub const MAX_DEGREE: usize = 8;

#[derive(Debug, Clone)]
pub struct QuadRule {
    pub points: Vec<[f64; 2]>,
    /// Weights sum to the reference-triangle area 1/2.
    pub weights: Vec<f64>,
}

/// Gauss–Legendre nodes/weights on [0, 1], weights summing to 1. Closed forms
/// cover n <= 5, enough for degree-8 integrands.
pub fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w): (Vec<f64>, Vec<f64>) = match n {
        1 => (vec![0.0], vec![2.0]),
        2 => {
            let a = 1.0 / 3f64.sqrt();
            (vec![-a, a], vec![1.0, 1.0])
        }
        3 => {
            let a = (3.0 / 5.0f64).sqrt();
            (vec![-a, 0.0, a], vec![5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])
        }
        4 => {
            let b = (6.0 / 5.0f64).sqrt();
            let a1 = ((3.0 - 2.0 * b) / 7.0).sqrt();
            let a2 = ((3.0 + 2.0 * b) / 7.0).sqrt();
            let w1 = (18.0 + 30f64.sqrt()) / 36.0;
            let w2 = (18.0 - 30f64.sqrt()) / 36.0;
            (vec![-a2, -a1, a1, a2], vec![w2, w1, w1, w2])
        }
        5 => {
            let b = (10.0 / 7.0f64).sqrt();
            let a1 = (5.0 - 2.0 * b).sqrt() / 3.0;
            let a2 = (5.0 + 2.0 * b).sqrt() / 3.0;
            let w0 = 128.0 / 225.0;
            let w1 = (322.0 + 13.0 * 70f64.sqrt()) / 900.0;
            let w2 = (322.0 - 13.0 * 70f64.sqrt()) / 900.0;
            (vec![-a2, -a1, 0.0, a1, a2], vec![w2, w1, w0, w1, w2])
        }
        _ => panic!("Gauss-Legendre closed forms implemented for n <= 5, got {n}"),
    };
    (
        x.iter().map(|t| 0.5 * (t + 1.0)).collect(),
        w.iter().map(|t| 0.5 * t).collect(),
    )
}

fn duffy(degree: usize) -> QuadRule {
    // x^a y^b with a + b <= degree becomes u^(a+b+1)-ish after the collapse,
    // so the u rule needs one extra polynomial degree.
    let nu = (degree + 2).div_ceil(2);
    let nv = (degree + 1).div_ceil(2);
    let (xu, wu) = gauss_legendre_01(nu);
    let (xv, wv) = gauss_legendre_01(nv);
    let mut points = Vec::with_capacity(nu * nv);
    let mut weights = Vec::with_capacity(nu * nv);
    for (u, cu) in xu.iter().zip(&wu) {
        for (v, cv) in xv.iter().zip(&wv) {
            points.push([*u, v * (1.0 - u)]);
            weights.push(cu * cv * (1.0 - u));
        }
    }
    QuadRule { points, weights }
}

fn build(degree: usize) -> QuadRule {
    match degree {
        0 | 1 => QuadRule {
            points: vec![[1.0 / 3.0, 1.0 / 3.0]],
            weights: vec![0.5],
        },
        2 => QuadRule {
            points: vec![
                [1.0 / 6.0, 1.0 / 6.0],
                [2.0 / 3.0, 1.0 / 6.0],
                [1.0 / 6.0, 2.0 / 3.0],
            ],
            weights: vec![1.0 / 6.0; 3],
        },
        3 => QuadRule {
            points: vec![
                [1.0 / 3.0, 1.0 / 3.0],
                [1.0 / 5.0, 1.0 / 5.0],
                [3.0 / 5.0, 1.0 / 5.0],
                [1.0 / 5.0, 3.0 / 5.0],
            ],
            weights: vec![-27.0 / 96.0, 25.0 / 96.0, 25.0 / 96.0, 25.0 / 96.0],
        },
        d if d <= MAX_DEGREE => duffy(d),
        d => panic!("quadrature degree {d} exceeds the supported maximum {MAX_DEGREE}"),
    }
}

/// Rule exact for polynomials of total degree `degree` (clamped to
/// `1..=MAX_DEGREE`). Returned references are cached for the process lifetime.
pub fn triangle_rule(degree: usize) -> &'static QuadRule {
    static RULES: OnceLock<Vec<QuadRule>> = OnceLock::new();
    let rules = RULES.get_or_init(|| (0..=MAX_DEGREE).map(build).collect());
    &rules[degree.clamp(1, MAX_DEGREE)]
}

/// 1-D rule on [0,1] exact for the given polynomial degree.
pub fn interval_rule(degree: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_legendre_01((degree.clamp(1, MAX_DEGREE) + 1).div_ceil(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// exact integral of xi^a eta^b over the reference triangle
    fn monomial_exact(a: u32, b: u32) -> f64 {
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        fact(a) * fact(b) / fact(a + b + 2)
    }

    #[test]
    fn rules_integrate_monomials_exactly() {
        for degree in 1..=MAX_DEGREE {
            let rule = triangle_rule(degree);
            assert!(
                (rule.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14,
                "degree {degree} weights must sum to 1/2"
            );
            for a in 0..=degree as u32 {
                for b in 0..=(degree as u32 - a) {
                    let num: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32))
                        .sum();
                    let exact = monomial_exact(a, b);
                    assert!(
                        (num - exact).abs() < 1e-14,
                        "degree {degree}, monomial x^{a} y^{b}: {num} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn interval_rules_integrate_monomials_exactly() {
        for degree in 1..=MAX_DEGREE {
            let (x, w) = interval_rule(degree);
            for a in 0..=degree as u32 {
                let num: f64 = x
                    .iter()
                    .zip(&w)
                    .map(|(t, c)| c * t.powi(a as i32))
                    .sum();
                let exact = 1.0 / f64::from(a + 1);
                assert!((num - exact).abs() < 1e-14, "degree {degree}, t^{a}");
            }
        }
    }
}
