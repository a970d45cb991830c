//! The computational tape: records mesh moves, solves, assemblies, and
//! scalar arithmetic as replayable blocks, then differentiates the recorded
//! program in reverse (adjoint gradients), forward (directional derivatives),
//! and forward-over-reverse (Hessian actions).
//!
//! Variables are single-assignment versions of mutable objects: every time a
//! block writes a function's dofs, a mesh's coordinates, or a scalar, a fresh
//! variable captures the new value. All versions keep their forward values
//! (store-all checkpointing), so reverse sweeps can reconstruct any block's
//! input state by installing the recorded version values into the live
//! objects before assembling derivative forms.

mod id;
mod sweeps;
pub mod taylor;

pub use id::ObjId;

use crate::error::{Error, Result};
use crate::fem::{
    assemble_scalar, solve_newton, DirichletBC, FEFunction, FESpace, NewtonOptions,
};
use crate::forms::form::Form;
use crate::mesh::Mesh;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

/// A plain vector with tape identity: boundary controls and other data that
/// do not live on a function space.
#[derive(Clone)]
pub struct RawVec(Rc<RawData>);

struct RawData {
    id: ObjId,
    data: RefCell<Vec<f64>>,
    name: String,
}

impl RawVec {
    pub fn new(len: usize, name: impl Into<String>) -> RawVec {
        RawVec(Rc::new(RawData {
            id: ObjId::fresh(),
            data: RefCell::new(vec![0.0; len]),
            name: name.into(),
        }))
    }

    pub fn from_values(values: Vec<f64>, name: impl Into<String>) -> RawVec {
        let raw = RawVec::new(values.len(), name);
        *raw.0.data.borrow_mut() = values;
        raw
    }

    pub fn id(&self) -> ObjId {
        self.0.id
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn set_values(&self, values: &[f64]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "raw vector length mismatch");
        d.copy_from_slice(values);
    }
}

/// What a differentiable program is differentiated with respect to.
#[derive(Clone)]
pub enum Control {
    Field(FEFunction),
    Raw(RawVec),
}

impl Control {
    pub fn len(&self) -> usize {
        match self {
            Control::Field(f) => f.space().ndofs(),
            Control::Raw(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Control::Field(f) => f.copy_dofs(),
            Control::Raw(r) => r.values(),
        }
    }

    fn key(&self) -> ObjKey {
        match self {
            Control::Field(f) => ObjKey::Field(f.id()),
            Control::Raw(r) => ObjKey::Raw(r.id()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum ObjKey {
    Field(ObjId),
    MeshCoords(ObjId),
    Raw(ObjId),
    Scalar(ObjId),
}

#[derive(Debug, Clone)]
pub(crate) enum Value {
    Vec(Vec<f64>),
    Scalar(f64),
}

impl Value {
    pub(crate) fn as_scalar(&self) -> f64 {
        match self {
            Value::Scalar(v) => *v,
            Value::Vec(_) => panic!("expected a scalar variable"),
        }
    }

    pub(crate) fn as_vec(&self) -> &[f64] {
        match self {
            Value::Vec(v) => v,
            Value::Scalar(_) => panic!("expected a vector variable"),
        }
    }
}

struct Variable {
    value: Value,
    key: ObjKey,
}

/// A dependency of an assembled form: the variable version read, plus how the
/// form sees the object (coefficient dofs or mesh coordinates).
#[derive(Clone)]
pub(crate) struct Dep {
    pub(crate) var: VarId,
    pub(crate) kind: DepKind,
}

#[derive(Clone)]
pub(crate) enum DepKind {
    Coefficient(FEFunction),
    MeshCoords(Mesh),
}

#[derive(Clone)]
pub(crate) enum Block {
    /// `coords_out = coords_in + theta`, with inversion checking.
    MeshMove {
        mesh: Mesh,
        mesh_in: VarId,
        theta: VarId,
        mesh_out: VarId,
    },
    /// `out[map[i]] = src[i]`, zero elsewhere.
    Scatter {
        src: VarId,
        out: VarId,
        map: Rc<Vec<usize>>,
    },
    /// `out = sum_k c_k in_k` over dof vectors.
    Assign {
        out: VarId,
        terms: Vec<(f64, VarId)>,
    },
    /// `out = constant + sum_k c_k in_k` over scalars.
    Sum {
        out: VarId,
        constant: f64,
        terms: Vec<(f64, VarId)>,
    },
    ScalarMul {
        out: VarId,
        a: VarId,
        b: VarId,
    },
    ScalarDiv {
        out: VarId,
        a: VarId,
        b: VarId,
    },
    /// `out = assemble(form)` (a scalar functional).
    Assemble {
        out: VarId,
        form: Form,
        deps: Vec<Dep>,
    },
    /// Solve `residual(u; v) = 0` for `u` with the given conditions.
    Solve {
        u: VarId,
        u_fn: FEFunction,
        residual: Form,
        bcs: Vec<DirichletBC>,
        deps: Vec<Dep>,
        newton: NewtonOptions,
    },
}

impl Block {
    /// Variables read by the block (excluding pure initial guesses).
    pub(crate) fn reads(&self) -> Vec<VarId> {
        match self {
            Block::MeshMove { mesh_in, theta, .. } => vec![*mesh_in, *theta],
            Block::Scatter { src, .. } => vec![*src],
            Block::Assign { terms, .. } => terms.iter().map(|&(_, v)| v).collect(),
            Block::Sum { terms, .. } => terms.iter().map(|&(_, v)| v).collect(),
            Block::ScalarMul { a, b, .. } | Block::ScalarDiv { a, b, .. } => vec![*a, *b],
            Block::Assemble { deps, .. } => deps.iter().map(|d| d.var).collect(),
            Block::Solve { deps, .. } => deps.iter().map(|d| d.var).collect(),
        }
    }

    pub(crate) fn writes(&self) -> VarId {
        match self {
            Block::MeshMove { mesh_out, .. } => *mesh_out,
            Block::Scatter { out, .. }
            | Block::Assign { out, .. }
            | Block::Sum { out, .. }
            | Block::ScalarMul { out, .. }
            | Block::ScalarDiv { out, .. }
            | Block::Assemble { out, .. } => *out,
            Block::Solve { u, .. } => *u,
        }
    }
}

struct TapeData {
    vars: Vec<Variable>,
    blocks: Vec<Block>,
    /// Latest version of each object.
    current: HashMap<ObjKey, VarId>,
    fields: HashMap<ObjId, FEFunction>,
    meshes: HashMap<ObjId, Mesh>,
}

/// Recording context. Clones share the same underlying tape.
#[derive(Clone)]
pub struct Tape {
    data: Rc<RefCell<TapeData>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// A recorded scalar quantity; arithmetic on these appends scalar blocks.
#[derive(Clone)]
pub struct TapeScalar {
    tape: Tape,
    var: VarId,
}

impl TapeScalar {
    pub fn value(&self) -> f64 {
        self.tape.data.borrow().vars[self.var.0].value.as_scalar()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            data: Rc::new(RefCell::new(TapeData {
                vars: Vec::new(),
                blocks: Vec::new(),
                current: HashMap::new(),
                fields: HashMap::new(),
                meshes: HashMap::new(),
            })),
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.data.borrow().blocks.len()
    }

    // -- variable bookkeeping ------------------------------------------------

    fn new_var(&self, key: ObjKey, value: Value) -> VarId {
        let mut d = self.data.borrow_mut();
        let id = VarId(d.vars.len());
        d.vars.push(Variable { value, key });
        d.current.insert(key, id);
        id
    }

    /// Current version of a function's dofs, creating the initial version on
    /// first touch.
    fn field_var(&self, f: &FEFunction) -> VarId {
        let key = ObjKey::Field(f.id());
        if let Some(&v) = self.data.borrow().current.get(&key) {
            return v;
        }
        self.data.borrow_mut().fields.insert(f.id(), f.clone());
        self.new_var(key, Value::Vec(f.copy_dofs()))
    }

    fn mesh_var(&self, m: &Mesh) -> VarId {
        let key = ObjKey::MeshCoords(m.id());
        if let Some(&v) = self.data.borrow().current.get(&key) {
            return v;
        }
        self.data.borrow_mut().meshes.insert(m.id(), m.clone());
        self.new_var(key, Value::Vec(m.coords_flat()))
    }

    fn raw_var(&self, r: &RawVec) -> VarId {
        let key = ObjKey::Raw(r.id());
        if let Some(&v) = self.data.borrow().current.get(&key) {
            return v;
        }
        self.new_var(key, Value::Vec(r.values()))
    }

    fn push_block(&self, b: Block) {
        self.data.borrow_mut().blocks.push(b);
    }

    /// Dependencies of a form: every referenced coefficient plus the mesh,
    /// each at its current version.
    fn form_deps(&self, form: &Form, exclude: Option<&FEFunction>) -> Vec<Dep> {
        let mut deps = Vec::new();
        for f in form.coefficients() {
            if exclude.map(|e| e.same(&f)).unwrap_or(false) {
                continue;
            }
            deps.push(Dep {
                var: self.field_var(&f),
                kind: DepKind::Coefficient(f),
            });
        }
        if let Some(m) = form.mesh() {
            deps.push(Dep {
                var: self.mesh_var(&m),
                kind: DepKind::MeshCoords(m),
            });
        }
        deps
    }

    // -- recorded operations -------------------------------------------------

    /// Move the mesh vertices by the displacement field `theta` (a vector
    /// piecewise-linear function on the same mesh).
    pub fn move_mesh(&self, mesh: &Mesh, theta: &FEFunction) -> Result<()> {
        assert_eq!(
            theta.space().ndofs(),
            2 * mesh.num_vertices(),
            "displacement must be a vector vertex field of the moved mesh"
        );
        let theta_var = self.field_var(theta);
        let mesh_in = self.mesh_var(mesh);
        mesh.move_by(&theta.dofs())?;
        let mesh_out = self.new_var(ObjKey::MeshCoords(mesh.id()), Value::Vec(mesh.coords_flat()));
        self.push_block(Block::MeshMove {
            mesh: mesh.clone(),
            mesh_in,
            theta: theta_var,
            mesh_out,
        });
        Ok(())
    }

    /// Scatter a raw vector into a function: `out[map[i]] = src[i]`, zero
    /// elsewhere.
    pub fn scatter(&self, src: &RawVec, map: &[usize], out: &FEFunction) {
        assert_eq!(map.len(), src.len(), "one target dof per source entry");
        let src_var = self.raw_var(src);
        let mut dofs = vec![0.0; out.space().ndofs()];
        let values = src.values();
        for (i, &d) in map.iter().enumerate() {
            dofs[d] = values[i];
        }
        out.set_dofs(&dofs);
        let out_var = self.new_var(ObjKey::Field(out.id()), Value::Vec(dofs));
        self.data.borrow_mut().fields.insert(out.id(), out.clone());
        self.push_block(Block::Scatter {
            src: src_var,
            out: out_var,
            map: Rc::new(map.to_vec()),
        });
    }

    /// Write a linear combination of recorded fields into `out`:
    /// `out = sum_k c_k f_k`. All fields must share a space.
    pub fn assign(&self, out: &FEFunction, terms: &[(f64, &FEFunction)]) {
        let term_vars: Vec<(f64, VarId)> = terms
            .iter()
            .map(|&(c, f)| {
                assert!(f.space().compatible(out.space()), "assign mixes spaces");
                (c, self.field_var(f))
            })
            .collect();
        let mut dofs = vec![0.0; out.space().ndofs()];
        {
            let d = self.data.borrow();
            for &(c, v) in &term_vars {
                for (o, x) in dofs.iter_mut().zip(d.vars[v.0].value.as_vec()) {
                    *o += c * x;
                }
            }
        }
        out.set_dofs(&dofs);
        let out_var = self.new_var(ObjKey::Field(out.id()), Value::Vec(dofs));
        self.data.borrow_mut().fields.insert(out.id(), out.clone());
        self.push_block(Block::Assign {
            out: out_var,
            terms: term_vars,
        });
    }

    /// Assemble a scalar functional and record its dependencies.
    pub fn assemble(&self, form: &Form) -> Result<TapeScalar> {
        let deps = self.form_deps(form, None);
        let value = assemble_scalar(form)?;
        let out = self.new_var(ObjKey::Scalar(ObjId::fresh()), Value::Scalar(value));
        self.push_block(Block::Assemble {
            out,
            form: form.clone(),
            deps,
        });
        Ok(TapeScalar {
            tape: self.clone(),
            var: out,
        })
    }

    /// Solve the residual problem `F(u; v) = 0` and record the solve. The
    /// current dofs of `u` serve as the Newton initial guess.
    pub fn solve(
        &self,
        residual: &Form,
        u: &FEFunction,
        bcs: &[DirichletBC],
        newton: &NewtonOptions,
    ) -> Result<()> {
        let deps = self.form_deps(residual, Some(u));
        solve_newton(residual, u, bcs, newton)?;
        let u_var = self.new_var(ObjKey::Field(u.id()), Value::Vec(u.copy_dofs()));
        self.data.borrow_mut().fields.insert(u.id(), u.clone());
        self.push_block(Block::Solve {
            u: u_var,
            u_fn: u.clone(),
            residual: residual.clone(),
            bcs: bcs.to_vec(),
            deps,
            newton: *newton,
        });
        Ok(())
    }

    /// A recorded constant (no dependencies).
    pub fn constant(&self, value: f64) -> TapeScalar {
        let out = self.new_var(ObjKey::Scalar(ObjId::fresh()), Value::Scalar(value));
        self.push_block(Block::Sum {
            out,
            constant: value,
            terms: Vec::new(),
        });
        TapeScalar {
            tape: self.clone(),
            var: out,
        }
    }

    /// One block computing `constant + sum_k c_k s_k`.
    pub fn weighted_sum(&self, constant: f64, terms: &[(f64, &TapeScalar)]) -> TapeScalar {
        let term_vars: Vec<(f64, VarId)> = terms.iter().map(|&(c, s)| (c, s.var)).collect();
        let value = constant
            + {
                let d = self.data.borrow();
                term_vars
                    .iter()
                    .map(|&(c, v)| c * d.vars[v.0].value.as_scalar())
                    .sum::<f64>()
            };
        let out = self.new_var(ObjKey::Scalar(ObjId::fresh()), Value::Scalar(value));
        self.push_block(Block::Sum {
            out,
            constant,
            terms: term_vars,
        });
        TapeScalar {
            tape: self.clone(),
            var: out,
        }
    }

    fn scalar_product(&self, a: &TapeScalar, b: &TapeScalar, divide: bool) -> TapeScalar {
        let (va, vb) = {
            let d = self.data.borrow();
            (
                d.vars[a.var.0].value.as_scalar(),
                d.vars[b.var.0].value.as_scalar(),
            )
        };
        let value = if divide { va / vb } else { va * vb };
        let out = self.new_var(ObjKey::Scalar(ObjId::fresh()), Value::Scalar(value));
        self.push_block(if divide {
            Block::ScalarDiv {
                out,
                a: a.var,
                b: b.var,
            }
        } else {
            Block::ScalarMul {
                out,
                a: a.var,
                b: b.var,
            }
        });
        TapeScalar {
            tape: self.clone(),
            var: out,
        }
    }

    // -- replay ---------------------------------------------------------------

    pub(crate) fn value(&self, v: VarId) -> Value {
        self.data.borrow().vars[v.0].value.clone()
    }

    fn set_value(&self, v: VarId, value: Value) {
        self.data.borrow_mut().vars[v.0].value = value;
    }

    /// Install a variable's stored value into its live object so forms can
    /// be assembled in that state.
    pub(crate) fn install(&self, v: VarId) {
        let d = self.data.borrow();
        let var = &d.vars[v.0];
        match var.key {
            ObjKey::Field(id) => d.fields[&id].set_dofs(var.value.as_vec()),
            ObjKey::MeshCoords(id) => d.meshes[&id].set_coords_flat(var.value.as_vec()),
            ObjKey::Raw(_) | ObjKey::Scalar(_) => {}
        }
    }

    pub(crate) fn block(&self, i: usize) -> Block {
        self.data.borrow().blocks[i].clone()
    }

    /// Re-run one block from its recorded inputs, updating the output value.
    fn replay_block(&self, i: usize) -> Result<()> {
        let block = self.block(i);
        match &block {
            Block::MeshMove {
                mesh,
                mesh_in,
                theta,
                mesh_out,
            } => {
                self.install(*mesh_in);
                let theta_val = self.value(*theta);
                mesh.move_by(theta_val.as_vec())?;
                self.set_value(*mesh_out, Value::Vec(mesh.coords_flat()));
            }
            Block::Scatter { src, out, map, .. } => {
                let src_val = self.value(*src);
                let n = {
                    let d = self.data.borrow();
                    d.vars[out.0].value.as_vec().len()
                };
                let mut dofs = vec![0.0; n];
                for (i, &d) in map.iter().enumerate() {
                    dofs[d] = src_val.as_vec()[i];
                }
                self.set_value(*out, Value::Vec(dofs));
            }
            Block::Assign { out, terms } => {
                let n = {
                    let d = self.data.borrow();
                    d.vars[out.0].value.as_vec().len()
                };
                let mut dofs = vec![0.0; n];
                {
                    let d = self.data.borrow();
                    for &(c, v) in terms {
                        for (o, x) in dofs.iter_mut().zip(d.vars[v.0].value.as_vec()) {
                            *o += c * x;
                        }
                    }
                }
                self.set_value(*out, Value::Vec(dofs));
            }
            Block::Sum {
                out,
                constant,
                terms,
            } => {
                let value = constant
                    + terms
                        .iter()
                        .map(|&(c, v)| c * self.value(v).as_scalar())
                        .sum::<f64>();
                self.set_value(*out, Value::Scalar(value));
            }
            Block::ScalarMul { out, a, b } => {
                let value = self.value(*a).as_scalar() * self.value(*b).as_scalar();
                self.set_value(*out, Value::Scalar(value));
            }
            Block::ScalarDiv { out, a, b } => {
                let value = self.value(*a).as_scalar() / self.value(*b).as_scalar();
                self.set_value(*out, Value::Scalar(value));
            }
            Block::Assemble { out, form, deps } => {
                for dep in deps {
                    self.install(dep.var);
                }
                self.set_value(*out, Value::Scalar(assemble_scalar(form)?));
            }
            Block::Solve {
                u,
                u_fn,
                residual,
                bcs,
                deps,
                newton,
            } => {
                for dep in deps {
                    self.install(dep.var);
                }
                // warm start from the previous replay's solution
                u_fn.set_dofs(self.value(*u).as_vec());
                solve_newton(residual, u_fn, bcs, newton)?;
                self.set_value(*u, Value::Vec(u_fn.copy_dofs()));
            }
        }
        Ok(())
    }
}

impl std::ops::Add for &TapeScalar {
    type Output = TapeScalar;
    fn add(self, rhs: &TapeScalar) -> TapeScalar {
        self.tape.weighted_sum(0.0, &[(1.0, self), (1.0, rhs)])
    }
}

impl std::ops::Sub for &TapeScalar {
    type Output = TapeScalar;
    fn sub(self, rhs: &TapeScalar) -> TapeScalar {
        self.tape.weighted_sum(0.0, &[(1.0, self), (-1.0, rhs)])
    }
}

impl std::ops::Mul for &TapeScalar {
    type Output = TapeScalar;
    fn mul(self, rhs: &TapeScalar) -> TapeScalar {
        self.tape.scalar_product(self, rhs, false)
    }
}

impl std::ops::Div for &TapeScalar {
    type Output = TapeScalar;
    fn div(self, rhs: &TapeScalar) -> TapeScalar {
        self.tape.scalar_product(self, rhs, true)
    }
}

impl std::ops::Add<f64> for &TapeScalar {
    type Output = TapeScalar;
    fn add(self, rhs: f64) -> TapeScalar {
        self.tape.weighted_sum(rhs, &[(1.0, self)])
    }
}

impl std::ops::Sub<f64> for &TapeScalar {
    type Output = TapeScalar;
    fn sub(self, rhs: f64) -> TapeScalar {
        self.tape.weighted_sum(-rhs, &[(1.0, self)])
    }
}

impl std::ops::Mul<f64> for &TapeScalar {
    type Output = TapeScalar;
    fn mul(self, rhs: f64) -> TapeScalar {
        self.tape.weighted_sum(0.0, &[(rhs, self)])
    }
}

impl std::ops::Sub<&TapeScalar> for f64 {
    type Output = TapeScalar;
    fn sub(self, rhs: &TapeScalar) -> TapeScalar {
        rhs.tape.weighted_sum(self, &[(-1.0, rhs)])
    }
}

impl std::ops::Mul<&TapeScalar> for f64 {
    type Output = TapeScalar;
    fn mul(self, rhs: &TapeScalar) -> TapeScalar {
        rhs.tape.weighted_sum(0.0, &[(self, rhs)])
    }
}

/// A recorded program reduced to one scalar output as a function of the
/// chosen controls, with first and second derivatives.
pub struct ReducedFunctional {
    tape: Tape,
    output: VarId,
    controls: Vec<Control>,
    control_vars: Vec<VarId>,
    /// Variables reachable from the controls; inactive solves and assemblies
    /// are skipped during differentiation.
    active: Vec<bool>,
    /// Reusable direction functions, one per space (keyed by space address).
    dir_fns: RefCell<HashMap<usize, FEFunction>>,
    /// Reusable reverse-multiplier holders (λ or λ̇ values), one per space.
    rev_fns: RefCell<HashMap<usize, FEFunction>>,
    /// Vertex-displacement spaces per mesh, for shape-derivative trials.
    vec_spaces: RefCell<sweeps::VecSpaceMap>,
    /// Derivative forms, keyed by (block, role, wrt, direction) identity.
    form_cache: RefCell<HashMap<sweeps::CacheKey, Form>>,
}

impl ReducedFunctional {
    pub fn new(tape: &Tape, output: &TapeScalar, controls: Vec<Control>) -> Result<Self> {
        assert!(!controls.is_empty(), "need at least one control");
        let (control_vars, active, producer) = {
            let d = tape.data.borrow();
            let mut control_vars = Vec::with_capacity(controls.len());
            for c in &controls {
                // a control is the *first* version of its object: later
                // versions are produced by blocks and cannot be prescribed
                let var = d
                    .vars
                    .iter()
                    .position(|v| v.key == c.key())
                    .map(VarId)
                    .ok_or_else(|| {
                        Error::Tape("control does not appear on the tape".into())
                    })?;
                control_vars.push(var);
            }
            let mut active = vec![false; d.vars.len()];
            for v in &control_vars {
                active[v.0] = true;
            }
            let mut producer = vec![None; d.vars.len()];
            for (i, b) in d.blocks.iter().enumerate() {
                producer[b.writes().0] = Some(i);
                if b.reads().iter().any(|r| active[r.0]) {
                    active[b.writes().0] = true;
                }
            }
            (control_vars, active, producer)
        };
        for (c, v) in controls.iter().zip(&control_vars) {
            if producer[v.0].is_some() {
                let name = match c {
                    Control::Field(f) => f.name().to_string(),
                    Control::Raw(r) => r.name().to_string(),
                };
                return Err(Error::Tape(format!(
                    "control '{name}' is overwritten by a recorded block before use"
                )));
            }
        }
        if !active[output.var.0] {
            return Err(Error::Tape(
                "output does not depend on any control".into(),
            ));
        }
        Ok(ReducedFunctional {
            tape: tape.clone(),
            output: output.var,
            controls,
            control_vars,
            active,
            dir_fns: RefCell::new(HashMap::new()),
            rev_fns: RefCell::new(HashMap::new()),
            vec_spaces: RefCell::new(HashMap::new()),
            form_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn controls(&self) -> &[Control] {
        &self.controls
    }

    /// Current control values (as of the last replay or the recording).
    pub fn control_values(&self) -> Vec<Vec<f64>> {
        self.control_vars
            .iter()
            .map(|&v| self.tape.value(v).as_vec().to_vec())
            .collect()
    }

    pub(crate) fn tape(&self) -> &Tape {
        &self.tape
    }

    pub(crate) fn output_var(&self) -> VarId {
        self.output
    }

    pub(crate) fn control_vars(&self) -> &[VarId] {
        &self.control_vars
    }

    pub(crate) fn is_active(&self, v: VarId) -> bool {
        self.active[v.0]
    }

    pub(crate) fn dir_fn(&self, space: &FESpace) -> FEFunction {
        self.dir_fns
            .borrow_mut()
            .entry(space.addr())
            .or_insert_with(|| FEFunction::new(space, "direction"))
            .clone()
    }

    pub(crate) fn rev_fn(&self, space: &FESpace) -> FEFunction {
        self.rev_fns
            .borrow_mut()
            .entry(space.addr())
            .or_insert_with(|| FEFunction::new(space, "multiplier"))
            .clone()
    }

    pub(crate) fn cached_form(
        &self,
        key: sweeps::CacheKey,
        build: impl FnOnce() -> Result<Form>,
    ) -> Result<Form> {
        if let Some(f) = self.form_cache.borrow().get(&key) {
            return Ok(f.clone());
        }
        let f = build()?;
        self.form_cache.borrow_mut().insert(key, f.clone());
        Ok(f)
    }

    /// Replay the tape at new control values and return the output.
    pub fn evaluate(&self, values: &[Vec<f64>]) -> Result<f64> {
        assert_eq!(values.len(), self.controls.len(), "one value set per control");
        for ((control, var), vals) in self.controls.iter().zip(&self.control_vars).zip(values) {
            assert_eq!(vals.len(), control.len(), "control length mismatch");
            self.tape.set_value(*var, Value::Vec(vals.to_vec()));
        }
        let n = self.tape.num_blocks();
        for i in 0..n {
            self.tape.replay_block(i)?;
        }
        Ok(self.tape.value(self.output).as_scalar())
    }

    /// Like [`evaluate`](Self::evaluate), but invoking `after_block` once per
    /// replayed block. The callback sees live recorded objects (mesh
    /// coordinates, solution dofs), which is how snapshot writers hook in.
    pub fn evaluate_with(
        &self,
        values: &[Vec<f64>],
        mut after_block: impl FnMut(usize),
    ) -> Result<f64> {
        assert_eq!(values.len(), self.controls.len(), "one value set per control");
        for ((control, var), vals) in self.controls.iter().zip(&self.control_vars).zip(values) {
            assert_eq!(vals.len(), control.len(), "control length mismatch");
            self.tape.set_value(*var, Value::Vec(vals.to_vec()));
        }
        let n = self.tape.num_blocks();
        for i in 0..n {
            self.tape.replay_block(i)?;
            after_block(i);
        }
        Ok(self.tape.value(self.output).as_scalar())
    }

    /// Gradient with respect to every control, evaluated at the state of the
    /// last replay (adjoint sweep).
    pub fn gradient(&self) -> Result<Vec<Vec<f64>>> {
        sweeps::adjoint_gradient(self)
    }

    /// Directional derivative of the output along control directions
    /// (tangent-linear sweep).
    pub fn tlm(&self, dirs: &[Vec<f64>]) -> Result<f64> {
        sweeps::tlm(self, dirs)
    }

    /// Hessian action: the derivative of the gradient along the given control
    /// directions (forward-over-reverse sweep).
    pub fn hessian_action(&self, dirs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        sweeps::hessian_action(self, dirs)
    }
}

#[cfg(test)]
mod tests {
    use super::taylor::{perturbed, taylor_test};
    use super::*;
    use crate::fem::{assemble_matrix, FESpace};
    use crate::forms::{coef, dot, grad, inner, scalar, test, trial, vec2, Tensor};
    use crate::linalg;
    use crate::mesh::generate::unit_square;
    use approx::assert_relative_eq;

    /// A deterministic but unstructured direction vector.
    fn wiggle(n: usize, seed: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (1.7 * (i + 1) as f64 + 0.9 * seed as f64).sin())
            .collect()
    }

    fn fd_slope(rf: &ReducedFunctional, base: &[Vec<f64>], dirs: &[Vec<f64>], h: f64) -> f64 {
        let jp = rf.evaluate(&perturbed(base, dirs, h)).unwrap();
        let jm = rf.evaluate(&perturbed(base, dirs, -h)).unwrap();
        rf.evaluate(base).unwrap();
        (jp - jm) / (2.0 * h)
    }

    #[test]
    fn quadratic_functional_has_the_mass_matrix_as_hessian() {
        let mesh = unit_square(4);
        let space = FESpace::cg1(&mesh);
        let u = FEFunction::new(&space, "u");
        u.interpolate_scalar(|p| 1.0 + p[0] + 0.3 * p[1]);

        let tape = Tape::new();
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(u.clone())]).unwrap();

        let mass = assemble_matrix(&(trial(&space) * test(&space)).dx()).unwrap();
        let n = space.ndofs();

        // J(u) = uᵀ M u, so the gradient is 2Mu and the Hessian 2M.
        let g = rf.gradient().unwrap().remove(0);
        let mut expected = vec![0.0; n];
        mass.mul_vec_acc(2.0, &u.copy_dofs(), &mut expected);
        for (a, b) in g.iter().zip(&expected) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }

        let delta = wiggle(n, 0);
        let tl = rf.tlm(std::slice::from_ref(&delta)).unwrap();
        assert_relative_eq!(tl, linalg::dot(&g, &delta), max_relative = 1e-12);

        let h = rf
            .hessian_action(std::slice::from_ref(&delta))
            .unwrap()
            .remove(0);
        let mut expected_h = vec![0.0; n];
        mass.mul_vec_acc(2.0, &delta, &mut expected_h);
        for (a, b) in h.iter().zip(&expected_h) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn domain_area_is_exactly_quadratic_in_the_vertex_motion() {
        let mesh = unit_square(3);
        let vspace = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&vspace, "theta");

        let tape = Tape::new();
        tape.move_mesh(&mesh, &theta).unwrap();
        let j = tape.assemble(&scalar(1.0).dx_on(&mesh)).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(theta.clone())]).unwrap();

        let n = vspace.ndofs();
        let base = vec![vec![0.0; n]];
        let j0 = rf.evaluate(&base).unwrap();
        assert_relative_eq!(j0, 1.0, epsilon = 1e-14);

        // dilating the domain by the identity field doubles the area measure
        let g = rf.gradient().unwrap().remove(0);
        let identity_dir: Vec<f64> = vspace
            .dof_coords()
            .iter()
            .enumerate()
            .map(|(d, p)| p[d % 2])
            .collect();
        assert_relative_eq!(linalg::dot(&g, &identity_dir), 2.0, max_relative = 1e-13);

        // vertex areas are quadratic polynomials of the coordinates: the
        // second-order Taylor expansion must be exact even for a large step
        let delta: Vec<f64> = wiggle(n, 1).iter().map(|v| 0.05 * v).collect();
        let slope = linalg::dot(&g, &delta);
        let h = rf
            .hessian_action(std::slice::from_ref(&delta))
            .unwrap()
            .remove(0);
        let curvature = linalg::dot(&h, &delta);
        let j1 = rf.evaluate(&perturbed(&base, &[delta], 1.0)).unwrap();
        assert_relative_eq!(j1, j0 + slope + 0.5 * curvature, epsilon = 1e-13);
    }

    #[test]
    fn poisson_source_control_derivatives_are_consistent() {
        let mesh = unit_square(5);
        let space = FESpace::cg1(&mesh);
        let f = FEFunction::new(&space, "f");
        f.interpolate_scalar(|p| 1.0 + p[0]);
        let u = FEFunction::new(&space, "u");
        let v = test(&space);
        let residual =
            (inner(grad(coef(&u)), grad(v.clone())) - coef(&f) * v.clone()).dx();
        let bcs = [DirichletBC::constant(
            &space,
            &[1, 2, 3, 4],
            Tensor::S(0.0),
        )];

        let tape = Tape::new();
        tape.solve(&residual, &u, &bcs, &NewtonOptions::default())
            .unwrap();
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(f.clone())]).unwrap();

        let base = rf.control_values();
        let j0 = rf.evaluate(&base).unwrap();
        assert_relative_eq!(j0, j.value(), epsilon = 1e-14);

        let g = rf.gradient().unwrap().remove(0);
        let n = space.ndofs();
        for seed in 0..3 {
            let delta = wiggle(n, seed);
            // u is linear in f, J quadratic: the central difference is exact
            let fd = fd_slope(&rf, &base, std::slice::from_ref(&delta), 1e-4);
            let an = linalg::dot(&g, &delta);
            assert_relative_eq!(an, fd, max_relative = 1e-7);
            let tl = rf.tlm(std::slice::from_ref(&delta)).unwrap();
            assert_relative_eq!(tl, an, max_relative = 1e-12);
        }

        // quadratic in f: second-order expansion is exact at unit step
        let delta = wiggle(n, 7);
        let slope = linalg::dot(&g, &delta);
        let h = rf
            .hessian_action(std::slice::from_ref(&delta))
            .unwrap()
            .remove(0);
        let curvature = linalg::dot(&h, &delta);
        let j1 = rf.evaluate(&perturbed(&base, &[delta], 1.0)).unwrap();
        assert_relative_eq!(
            j1,
            j0 + slope + 0.5 * curvature,
            max_relative = 1e-11
        );

        // Hessian symmetry
        let d1 = wiggle(n, 11);
        let d2 = wiggle(n, 12);
        let h1 = rf
            .hessian_action(std::slice::from_ref(&d1))
            .unwrap()
            .remove(0);
        let h2 = rf
            .hessian_action(std::slice::from_ref(&d2))
            .unwrap()
            .remove(0);
        assert_relative_eq!(
            linalg::dot(&h1, &d2),
            linalg::dot(&h2, &d1),
            max_relative = 1e-12
        );
    }

    #[test]
    fn nonlinear_reaction_problem_passes_taylor_tests() {
        let mesh = unit_square(4);
        let space = FESpace::cg1(&mesh);
        let f = FEFunction::new(&space, "f");
        f.interpolate_scalar(|p| 1.0 + p[0] * p[1]);
        let u = FEFunction::new(&space, "u");
        let v = test(&space);
        let uc = coef(&u);
        let residual = (inner(grad(uc.clone()), grad(v.clone()))
            + uc.clone() * uc.clone() * uc.clone() * v.clone()
            - coef(&f) * v.clone())
        .dx();
        let bcs = [DirichletBC::constant(
            &space,
            &[1, 2, 3, 4],
            Tensor::S(0.0),
        )];

        let tape = Tape::new();
        tape.solve(&residual, &u, &bcs, &NewtonOptions::default())
            .unwrap();
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(f.clone())]).unwrap();

        let base = rf.control_values();
        // a smooth direction, so the directional derivative does not vanish
        let dir_fn = FEFunction::new(&space, "dir");
        dir_fn.interpolate_scalar(|p| (std::f64::consts::PI * p[0]).sin() * (1.0 + p[1]));
        let dirs = vec![dir_fn.copy_dofs()];
        let report = taylor_test(&rf, &base, &dirs, 0.5, 3).unwrap();
        assert!(
            report.order_in(0, 0.8, 1.2),
            "order-0 rates {:?}",
            report.rates[0]
        );
        assert!(
            report.order_in(1, 1.8, 2.2),
            "order-1 rates {:?}",
            report.rates[1]
        );
        assert!(
            report.order_in(2, 2.7, 3.3),
            "order-2 rates {:?}",
            report.rates[2]
        );
    }

    #[test]
    fn moving_domain_solve_matches_finite_differences() {
        let mesh = unit_square(3);
        let vspace = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&vspace, "theta");
        let space = FESpace::cg1(&mesh);
        let u = FEFunction::new(&space, "u");
        let v = test(&space);
        let residual = (inner(grad(coef(&u)), grad(v.clone())) - scalar(1.0) * v.clone()).dx();
        let bcs = [DirichletBC::constant(
            &space,
            &[1, 2, 3, 4],
            Tensor::S(0.0),
        )];

        let tape = Tape::new();
        tape.move_mesh(&mesh, &theta).unwrap();
        tape.solve(&residual, &u, &bcs, &NewtonOptions::default())
            .unwrap();
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(theta.clone())]).unwrap();

        let n = vspace.ndofs();
        let base = vec![vec![0.0; n]];
        rf.evaluate(&base).unwrap();
        let g = rf.gradient().unwrap().remove(0);

        let coords = vspace.dof_coords();
        for seed in 0..2 {
            let delta: Vec<f64> = coords
                .iter()
                .enumerate()
                .map(|(d, p)| {
                    let s = (p[0] + 2.0 * p[1] + seed as f64).sin();
                    if d % 2 == 0 {
                        0.2 * s
                    } else {
                        0.2 * (p[0] * p[1] + seed as f64).cos()
                    }
                })
                .collect();
            let fd = fd_slope(&rf, &base, std::slice::from_ref(&delta), 1e-5);
            let an = linalg::dot(&g, &delta);
            assert_relative_eq!(an, fd, max_relative = 1e-5);
            let tl = rf.tlm(std::slice::from_ref(&delta)).unwrap();
            assert_relative_eq!(tl, an, max_relative = 1e-11);
        }

        // Hessian symmetry across two shape directions
        let d1: Vec<f64> = coords
            .iter()
            .enumerate()
            .map(|(d, p)| 0.1 * ((p[0] + p[1]) * (1 + d % 2) as f64).sin())
            .collect();
        let d2: Vec<f64> = coords
            .iter()
            .enumerate()
            .map(|(d, p)| 0.1 * (p[0] - 0.5 * p[1] + 0.3 * (d % 2) as f64).cos())
            .collect();
        let h1 = rf
            .hessian_action(std::slice::from_ref(&d1))
            .unwrap()
            .remove(0);
        let h2 = rf
            .hessian_action(std::slice::from_ref(&d2))
            .unwrap()
            .remove(0);
        assert_relative_eq!(
            linalg::dot(&h1, &d2),
            linalg::dot(&h2, &d1),
            max_relative = 1e-9
        );

        // and a full remainder test through the moving-domain solve; rates
        // above three just mean the cubic term vanishes along this direction
        let report = taylor_test(&rf, &base, std::slice::from_ref(&d1), 0.25, 3).unwrap();
        assert!(
            report.order_in(1, 1.7, 2.3),
            "order-1 rates {:?}",
            report.rates[1]
        );
        assert!(
            report.order_in(2, 2.6, 6.0),
            "order-2 rates {:?}",
            report.rates[2]
        );
    }

    #[test]
    fn scalar_block_chains_pass_taylor_tests() {
        let mesh = unit_square(3);
        let vspace = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&vspace, "theta");
        let space = FESpace::cg1(&mesh);
        let u = FEFunction::new(&space, "u");
        u.interpolate_scalar(|p| 1.0 + p[0] * p[1]);

        let tape = Tape::new();
        tape.move_mesh(&mesh, &theta).unwrap();
        let a = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let b = tape.assemble(&scalar(1.0).dx_on(&mesh)).unwrap();
        let c = &(&a / &b) * &(&a - 0.2);
        let j = &c + 1.5;

        let rf = ReducedFunctional::new(
            &tape,
            &j,
            vec![Control::Field(u.clone()), Control::Field(theta.clone())],
        )
        .unwrap();
        let base = rf.control_values();
        let dirs = vec![
            wiggle(space.ndofs(), 5),
            wiggle(vspace.ndofs(), 6).iter().map(|v| 0.1 * v).collect(),
        ];
        let report = taylor_test(&rf, &base, &dirs, 0.1, 3).unwrap();
        assert!(
            report.order_in(1, 1.7, 2.3),
            "order-1 rates {:?}",
            report.rates[1]
        );
        assert!(
            report.order_in(2, 2.6, 3.4),
            "order-2 rates {:?}",
            report.rates[2]
        );
    }

    #[test]
    fn scatter_and_assign_blocks_differentiate() {
        let mesh = unit_square(4);
        let verts = mesh.vertices_with_tags(&[1, 2, 3, 4]).unwrap();
        let map: Vec<usize> = verts.iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect();
        let h = RawVec::from_values(
            wiggle(map.len(), 2).iter().map(|v| 0.1 * v).collect(),
            "h",
        );
        let vspace = FESpace::cg1_vec(&mesh);
        let gfull = FEFunction::new(&vspace, "gfull");
        let s = FEFunction::new(&vspace, "s");

        let tape = Tape::new();
        tape.scatter(&h, &map, &gfull);
        tape.assign(&s, &[(0.75, &gfull)]);
        let j = tape.assemble(&dot(coef(&s), coef(&s)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Raw(h.clone())]).unwrap();

        let base = rf.control_values();
        let j0 = rf.evaluate(&base).unwrap();
        let g = rf.gradient().unwrap().remove(0);
        let delta = wiggle(map.len(), 9);
        let fd = fd_slope(&rf, &base, std::slice::from_ref(&delta), 1e-5);
        assert_relative_eq!(linalg::dot(&g, &delta), fd, max_relative = 1e-8);

        // quadratic: exact second-order expansion
        let slope = linalg::dot(&g, &delta);
        let hv = rf
            .hessian_action(std::slice::from_ref(&delta))
            .unwrap()
            .remove(0);
        let curvature = linalg::dot(&hv, &delta);
        let j1 = rf.evaluate(&perturbed(&base, &[delta], 1.0)).unwrap();
        assert_relative_eq!(j1, j0 + slope + 0.5 * curvature, epsilon = 1e-12);
    }

    #[test]
    fn coordinate_bcs_on_a_moving_mesh_are_rejected() {
        let mesh = unit_square(3);
        let vspace = FESpace::cg1_vec(&mesh);
        let theta = FEFunction::new(&vspace, "theta");
        let space = FESpace::cg1(&mesh);
        let u = FEFunction::new(&space, "u");
        let v = test(&space);
        let residual = (inner(grad(coef(&u)), grad(v.clone())) - scalar(1.0) * v.clone()).dx();
        let x0 = dot(crate::forms::x(&mesh), vec2(1.0, 0.0));
        let bcs = [
            DirichletBC::coordinate(&space, &[4], x0),
            DirichletBC::constant(&space, &[1, 2, 3], Tensor::S(0.0)),
        ];

        let tape = Tape::new();
        tape.move_mesh(&mesh, &theta).unwrap();
        tape.solve(&residual, &u, &bcs, &NewtonOptions::default())
            .unwrap();
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Field(theta.clone())]).unwrap();

        // the forward map is well defined...
        let base = vec![vec![0.0; vspace.ndofs()]];
        rf.evaluate(&base).unwrap();
        // ...but coordinate-defined boundary data on a control-dependent mesh
        // has no recorded derivative
        match rf.gradient() {
            Err(Error::CoordinateBcOnMovingBoundary { marker }) => assert_eq!(marker, 4),
            other => panic!("expected the boundary-condition guard, got {other:?}"),
        }
    }

    #[test]
    fn inactive_mesh_dependencies_are_skipped() {
        // The right-hand side lives on the boundary of a mesh that is not
        // control-dependent; facet terms have no shape derivative here, so
        // differentiation only succeeds because the mesh stays inactive.
        let mesh = unit_square(4);
        let verts = mesh.vertices_with_tags(&[1, 2, 3, 4]).unwrap();
        let map: Vec<usize> = verts.iter().flat_map(|&v| [2 * v, 2 * v + 1]).collect();
        let h = RawVec::from_values(wiggle(map.len(), 4), "h");
        let vspace = FESpace::cg1_vec(&mesh);
        let gfull = FEFunction::new(&vspace, "gfull");
        let s = FEFunction::new(&vspace, "s");
        let t = test(&vspace);
        let sc = coef(&s);
        let residual = (inner(grad(sc.clone()), grad(t.clone())) + dot(sc.clone(), t.clone())).dx()
            - dot(coef(&gfull), t.clone()).ds(&[1, 2, 3, 4]);

        let tape = Tape::new();
        tape.scatter(&h, &map, &gfull);
        tape.solve(&residual, &s, &[], &NewtonOptions::default())
            .unwrap();
        let j = tape.assemble(&dot(coef(&s), coef(&s)).dx()).unwrap();
        let rf = ReducedFunctional::new(&tape, &j, vec![Control::Raw(h.clone())]).unwrap();

        let base = rf.control_values();
        rf.evaluate(&base).unwrap();
        let g = rf.gradient().unwrap().remove(0);
        let delta = wiggle(map.len(), 13);
        let fd = fd_slope(&rf, &base, std::slice::from_ref(&delta), 1e-5);
        assert_relative_eq!(linalg::dot(&g, &delta), fd, max_relative = 1e-7);
    }

    #[test]
    fn controls_written_by_the_tape_are_rejected() {
        let mesh = unit_square(2);
        let space = FESpace::cg1(&mesh);
        let w = FEFunction::new(&space, "w");
        w.fill(1.0);
        let u = FEFunction::new(&space, "u");

        let tape = Tape::new();
        tape.assign(&u, &[(2.0, &w)]);
        let j = tape.assemble(&(coef(&u) * coef(&u)).dx()).unwrap();
        assert!(matches!(
            ReducedFunctional::new(&tape, &j, vec![Control::Field(u.clone())]),
            Err(Error::Tape(_))
        ));
    }
}
