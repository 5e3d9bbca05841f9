//! Engine-wide storage precision.
//!
//! Values are held in `f64` buffers. In [`Precision::F32`] mode every op
//! output is rounded to the nearest `f32`, so results carry single-precision
//! semantics; [`Precision::F64`] keeps full double precision and is the mode
//! the gradient-checking suites run in.
//!
//! The process default is global. A thread may override it with
//! [`PrecisionGuard`], which is how concurrent test threads and the parallel
//! finite-difference workers keep their own setting.

use std::cell::Cell;
use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

static DEFAULT: AtomicU8 = AtomicU8::new(0);

thread_local! {
    static OVERRIDE: Cell<Option<Precision>> = const { Cell::new(None) };
}

fn encode(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

pub fn set_default_precision(p: Precision) {
    DEFAULT.store(encode(p), Ordering::SeqCst);
}

pub fn default_precision() -> Precision {
    match DEFAULT.load(Ordering::SeqCst) {
        0 => Precision::F32,
        _ => Precision::F64,
    }
}

/// Precision in effect on the calling thread.
pub fn precision() -> Precision {
    OVERRIDE.with(|o| o.get()).unwrap_or_else(default_precision)
}

/// Scoped per-thread override; restores the previous setting on drop.
#[must_use = "the override ends when the guard is dropped"]
pub struct PrecisionGuard {
    prev: Option<Precision>,
}

impl PrecisionGuard {
    pub fn new(p: Precision) -> Self {
        let prev = OVERRIDE.with(|o| o.replace(Some(p)));
        PrecisionGuard { prev }
    }
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        OVERRIDE.with(|o| o.set(self.prev));
    }
}

#[inline]
pub(crate) fn quantize_in_place(values: &mut [f64]) {
    if precision() == Precision::F32 {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}
