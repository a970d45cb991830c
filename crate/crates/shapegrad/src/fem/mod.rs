//! Finite element layer: reference elements, function spaces, discrete
//! functions, quadrature, assembly, boundary conditions, and solvers.

pub mod assemble;
pub mod bc;
pub mod element;
pub mod function;
pub mod quadrature;
pub mod solve;
pub mod space;

pub use assemble::{assemble, assemble_matrix, assemble_scalar, assemble_vector, Assembled};
pub use bc::{merged_bc_dofs, BcValue, DirichletBC};
pub use element::ScalarEl;
pub use function::FEFunction;
pub use solve::{solve_linear, solve_newton, NewtonOptions};
pub use space::{Element, FESpace};
