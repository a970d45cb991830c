//! Integrals and forms: expressions attached to a measure.

use super::expr::{self, Expr};
use crate::fem::FESpace;
use crate::mesh::{Mesh, Tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Measure {
    /// Integral over all cells.
    Cell,
    /// Integral over the marked boundary facets with the given tags.
    ExteriorFacet(Vec<Tag>),
}

#[derive(Debug, Clone)]
pub struct Integral {
    pub integrand: Expr,
    pub measure: Measure,
    /// Explicit quadrature degree; `None` means estimate from the integrand.
    pub degree: Option<usize>,
    /// Integration domain. Inferred from the integrand where possible; pure
    /// constants (a volume functional, say) need [`Expr::dx_on`].
    pub mesh: Option<Mesh>,
}

/// A sum of integrals. Forms with no integrals are identically zero (they
/// arise from derivatives of forms that do not depend on the differentiation
/// variable) and are skipped by callers rather than assembled.
#[derive(Debug, Clone, Default)]
pub struct Form {
    pub integrals: Vec<Integral>,
}

impl Expr {
    /// Cell integral with estimated quadrature degree.
    pub fn dx(self) -> Form {
        assert_eq!(self.shape(), super::expr::Shape::Scalar, "integrands must be scalar");
        let mesh = expr::mesh_of(&self);
        Form {
            integrals: vec![Integral {
                integrand: self,
                measure: Measure::Cell,
                degree: None,
                mesh,
            }],
        }
    }

    /// Cell integral over an explicit mesh; needed when the integrand does
    /// not itself reference one (constants).
    pub fn dx_on(self, mesh: &Mesh) -> Form {
        let mut f = self.dx();
        if let Some(m) = &f.integrals[0].mesh {
            assert!(m.same(mesh), "integrand lives on a different mesh");
        }
        f.integrals[0].mesh = Some(mesh.clone());
        f
    }

    /// Cell integral with an explicit quadrature degree.
    pub fn dx_deg(self, degree: usize) -> Form {
        let mut f = self.dx();
        f.integrals[0].degree = Some(degree);
        f
    }

    /// Boundary integral over facets marked with `tags`.
    pub fn ds(self, tags: &[Tag]) -> Form {
        assert_eq!(self.shape(), super::expr::Shape::Scalar, "integrands must be scalar");
        assert!(!tags.is_empty(), "ds requires at least one facet tag");
        let mesh = expr::mesh_of(&self);
        Form {
            integrals: vec![Integral {
                integrand: self,
                measure: Measure::ExteriorFacet(tags.to_vec()),
                degree: None,
                mesh,
            }],
        }
    }

    pub fn ds_deg(self, tags: &[Tag], degree: usize) -> Form {
        let mut f = self.ds(tags);
        f.integrals[0].degree = Some(degree);
        f
    }
}

impl Form {
    pub fn is_empty(&self) -> bool {
        self.integrals.is_empty()
    }

    /// Drop integrals whose integrand folded to the constant zero.
    pub fn pruned(mut self) -> Form {
        self.integrals.retain(|i| !i.integrand.is_zero());
        self
    }

    /// The mesh all integrals live on.
    pub fn mesh(&self) -> Option<Mesh> {
        let mut mesh: Option<Mesh> = None;
        for i in &self.integrals {
            for m in [i.mesh.clone(), expr::mesh_of(&i.integrand)].into_iter().flatten() {
                match &mesh {
                    None => mesh = Some(m),
                    Some(prev) => assert!(prev.same(&m), "form mixes meshes"),
                }
            }
        }
        mesh
    }

    /// (test space, trial space) if the respective arguments appear.
    pub fn argument_spaces(&self) -> (Option<FESpace>, Option<FESpace>) {
        let mut spaces: (Option<FESpace>, Option<FESpace>) = (None, None);
        for i in &self.integrals {
            let (t, u) = expr::arguments_of(&i.integrand);
            merge(&mut spaces.0, t);
            merge(&mut spaces.1, u);
        }
        spaces
    }

    pub fn coefficients(&self) -> Vec<crate::fem::FEFunction> {
        let mut all: Vec<crate::fem::FEFunction> = Vec::new();
        for i in &self.integrals {
            for f in expr::coefficients_of(&i.integrand) {
                if !all.iter().any(|g| g.same(&f)) {
                    all.push(f);
                }
            }
        }
        all.sort_by_key(|f| f.id());
        all
    }

    pub fn has_facet_integrals(&self) -> bool {
        self.integrals
            .iter()
            .any(|i| matches!(i.measure, Measure::ExteriorFacet(_)))
    }
}

fn merge(slot: &mut Option<FESpace>, new: Option<FESpace>) {
    if let Some(s) = new {
        match slot {
            None => *slot = Some(s),
            Some(prev) => assert!(
                prev.compatible(&s),
                "integrals use different spaces in the same argument slot"
            ),
        }
    }
}

impl std::ops::Add for Form {
    type Output = Form;
    fn add(mut self, mut rhs: Form) -> Form {
        self.integrals.append(&mut rhs.integrals);
        self
    }
}

impl std::ops::Sub for Form {
    type Output = Form;
    fn sub(mut self, rhs: Form) -> Form {
        for mut i in rhs.integrals {
            i.integrand = expr::neg(i.integrand);
            self.integrals.push(i);
        }
        self
    }
}
