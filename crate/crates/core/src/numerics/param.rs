use std::sync::atomic::{AtomicU64, Ordering};

use super::{Real, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable parameter.
///
/// Clones of a [`Param`] keep the key, so a key names "the same parameter
/// object" across snapshots, optimizer state and gradient lookups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    key: ParamKey,
    pub value: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            key: ParamKey::fresh(),
            value,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    /// Same values under a new identity.
    pub fn detached_copy(&self) -> Self {
        Param::new(self.value.clone())
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        Param {
            key: self.key,
            value: self.value.cast(),
        }
    }
}
