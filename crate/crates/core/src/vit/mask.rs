use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-patch activity flags; `true` keeps the token, `false` halts it.
///
/// The class token is not represented and can never be masked. A mask over
/// at least one patch always keeps at least one patch active.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct TokenMask {
    active: Vec<bool>,
}

impl TokenMask {
    pub fn full(num_patches: usize) -> Self {
        TokenMask {
            active: vec![true; num_patches],
        }
    }

    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.is_empty() && !active.iter().any(|&a| a) {
            return Err(Error::invalid("token mask must keep at least one patch active"));
        }
        Ok(TokenMask { active })
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, patch: usize) -> bool {
        self.active[patch]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    /// Mask selecting exactly the halted patches, or `None` when nothing is
    /// halted.
    pub fn complement(&self) -> Option<TokenMask> {
        if self.is_full() {
            return None;
        }
        Some(TokenMask {
            active: self.active.iter().map(|&a| !a).collect(),
        })
    }

    /// Row-keep flags for the token sequence `[cls, patch_0, ..]`.
    pub(crate) fn sequence_keep(&self) -> impl Iterator<Item = bool> + '_ {
        std::iter::once(true).chain(self.active.iter().copied())
    }

    pub(crate) fn deactivate(&mut self, patch: usize) {
        self.active[patch] = false;
    }
}

impl TryFrom<Vec<bool>> for TokenMask {
    type Error = Error;

    fn try_from(v: Vec<bool>) -> Result<Self> {
        TokenMask::new(v)
    }
}

impl From<TokenMask> for Vec<bool> {
    fn from(m: TokenMask) -> Self {
        m.active
    }
}
