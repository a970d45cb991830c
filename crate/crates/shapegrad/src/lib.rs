//! Shape differentiation for 2-D finite element problems.
//!
//! The crate stacks four layers:
//!
//! * [`mesh`] — triangle meshes with boundary markers, movable vertex
//!   coordinates, Gmsh 2.2 / legacy VTK I/O and boundary extraction;
//! * [`forms`] — a small symbolic language for variational forms together with
//!   the derivative transforms (Gâteaux derivatives, shape derivatives via
//!   pullback to the reference element, formal adjoints);
//! * [`fem`] — CG1/CG2 (scalar, vector and Taylor–Hood) spaces, quadrature,
//!   assembly of forms into scalars/vectors/sparse matrices, Dirichlet row
//!   replacement and direct linear/Newton solvers;
//! * [`tape`] — an operation tape recording mesh moves, solves, assemblies and
//!   scalar reductions, from which reduced functionals obtain first-order
//!   gradients (adjoint), directional derivatives (tangent linear) and
//!   Hessian-vector products (tangent linear applied to the adjoint sweep).
//!
//! On top of those, [`deform`] provides Riesz maps, an elasticity-based mesh
//! extension operator and an Armijo descent loop with mesh-quality safeguards,
//! and [`cases`] builds the two shipped applications: advection–diffusion in a
//! disk with a rotating hole, and energy-dissipation shape optimization of an
//! obstacle in a Stokes channel.

pub mod cases;
pub mod deform;
pub mod error;
pub mod fem;
pub mod forms;
pub mod linalg;
pub mod mesh;
pub mod tape;

pub use error::{Error, Result};
