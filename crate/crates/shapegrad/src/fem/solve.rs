//! Linear and Newton solvers for variational problems.

use super::assemble::{assemble_matrix, assemble_vector};
use super::bc::{merged_bc_dofs, DirichletBC};
use super::function::FEFunction;
use crate::error::{Error, Result};
use crate::forms::form::Form;
use crate::forms::transform::gateaux_derivative;
use crate::forms::expr::trial;
use crate::linalg;

/// Solve `a(u, v) = l(v)` with Dirichlet conditions by row replacement.
pub fn solve_linear(a: &Form, l: &Form, bcs: &[DirichletBC], u: &FEFunction) -> Result<()> {
    let (test_sp, trial_sp) = a.argument_spaces();
    let trial_sp = trial_sp.ok_or_else(|| Error::Arity("bilinear form lacks a trial slot".into()))?;
    let test_sp = test_sp.ok_or_else(|| Error::Arity("bilinear form lacks a test slot".into()))?;
    assert!(
        trial_sp.compatible(u.space()),
        "solution function does not live on the trial space"
    );
    let mut mat = assemble_matrix(a)?;
    let mut rhs = if l.clone().pruned().is_empty() {
        vec![0.0; test_sp.ndofs()]
    } else {
        assemble_vector(l)?
    };
    let constrained = merged_bc_dofs(&trial_sp, bcs)?;
    let rows: Vec<usize> = constrained.iter().map(|&(d, _)| d).collect();
    mat.replace_rows_identity(&rows);
    for &(d, g) in &constrained {
        rhs[d] = g;
    }
    let solution = mat.into_csc().factor()?.solve(&rhs);
    u.set_dofs(&solution);
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    /// Absolute residual tolerance.
    pub atol: f64,
    /// Tolerance relative to the first residual norm.
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            atol: 1e-10,
            rtol: 1e-12,
            max_iter: 25,
        }
    }
}

/// Newton's method on the residual form `F(u; v) = 0` where `u` appears as a
/// coefficient and `v` is the test function. Dirichlet rows are enforced as
/// `u[d] - g = 0`, so the first iteration already lands on the boundary data.
pub fn solve_newton(
    residual: &Form,
    u: &FEFunction,
    bcs: &[DirichletBC],
    opts: &NewtonOptions,
) -> Result<()> {
    let (test_sp, trial_sp) = residual.argument_spaces();
    assert!(trial_sp.is_none(), "residual forms carry only a test argument");
    let test_sp =
        test_sp.ok_or_else(|| Error::Arity("residual form lacks a test argument".into()))?;
    let constrained = merged_bc_dofs(u.space(), bcs)?;
    let rows: Vec<usize> = constrained.iter().map(|&(d, _)| d).collect();
    let jacobian_form = gateaux_derivative(residual, u, &trial(u.space()));

    let mut first_norm = None;
    for _ in 0..opts.max_iter {
        let mut r = assemble_vector(residual)?;
        debug_assert_eq!(r.len(), test_sp.ndofs());
        {
            let dofs = u.dofs();
            for &(d, g) in &constrained {
                r[d] = dofs[d] - g;
            }
        }
        let norm = linalg::norm2(&r);
        let first = *first_norm.get_or_insert(norm);
        if norm <= opts.atol || norm <= opts.rtol * first {
            return Ok(());
        }
        let mut jac = assemble_matrix(&jacobian_form)?;
        jac.replace_rows_identity(&rows);
        let delta = jac.into_csc().factor()?.solve(&r);
        {
            let mut dofs = u.dofs_mut();
            for (ui, di) in dofs.iter_mut().zip(&delta) {
                *ui -= di;
            }
        }
    }
    // report the final residual so callers can see how close it got
    let r = assemble_vector(residual)?;
    Err(Error::NewtonDiverged {
        iterations: opts.max_iter,
        residual: linalg::norm2(&r),
    })
}
