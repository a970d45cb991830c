//! Globally unique identities for taped runtime objects (meshes, functions,
//! scalars). Identity, not equality: two functions with equal dofs are still
//! distinct tape objects.

use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjId(u64);

static NEXT: AtomicU64 = AtomicU64::new(1);

impl ObjId {
    pub fn fresh() -> ObjId {
        ObjId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}
