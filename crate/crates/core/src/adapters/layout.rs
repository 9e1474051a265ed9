use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Shape and scaling of one adapter placement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub placement: String,
    /// Output dimension of the frozen weight.
    pub m: usize,
    /// Input dimension of the frozen weight.
    pub n: usize,
    pub r: usize,
    pub alpha: f64,
}

impl ModuleSpec {
    /// Number of flattened parameters, `r·(m + n)`.
    pub fn len(&self) -> usize {
        self.r * (self.m + self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r > self.m.min(self.n) {
            return Err(Error::Layout(format!(
                "{}: rank {} outside 1..={}",
                self.placement,
                self.r,
                self.m.min(self.n)
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Layout(format!("{}: non-finite alpha", self.placement)));
        }
        Ok(())
    }
}

/// Ordered placements; fixes the flatten order of an adapter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub modules: Vec<ModuleSpec>,
}

impl Layout {
    pub fn new(modules: Vec<ModuleSpec>) -> Result<Self> {
        let layout = Self { modules };
        layout.validate()?;
        Ok(layout)
    }

    /// Rank-`r` adapters on `Wq`, `Wk`, `Wv` of every block, all `m = n = dim`.
    pub fn attention_qkv(blocks: usize, dim: usize, r: usize, alpha: f64) -> Result<Self> {
        let mut modules = Vec::with_capacity(blocks * 3);
        for b in 0..blocks {
            for proj in ["Wq", "Wk", "Wv"] {
                modules.push(ModuleSpec {
                    placement: format!("block{b}.{proj}"),
                    m: dim,
                    n: dim,
                    r,
                    alpha,
                });
            }
        }
        Self::new(modules)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modules.is_empty() {
            return Err(Error::Layout("layout has no modules".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.modules {
            spec.validate()?;
            if !seen.insert(spec.placement.as_str()) {
                return Err(Error::Layout(format!("duplicate placement {}", spec.placement)));
            }
        }
        Ok(())
    }

    /// Total flattened length `D`.
    pub fn total_len(&self) -> usize {
        self.modules.iter().map(ModuleSpec::len).sum()
    }

    /// Offset of each module's first parameter in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.modules
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.len();
                o
            })
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("layout serializes");
        hex::encode(Sha256::digest(&json))
    }
}

impl Default for Layout {
    /// Two blocks × {Wq, Wk, Wv}, 16×16, rank 2, α = 1 (D = 384).
    fn default() -> Self {
        Self::attention_qkv(2, 16, 2, 1.0).expect("default layout is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_length() {
        let l = Layout::default();
        assert_eq!(l.modules.len(), 6);
        assert_eq!(l.total_len(), 2 * 3 * 2 * 32);
        assert_eq!(l.total_len(), 384);
        assert_eq!(l.offsets()[1], 64);
    }

    #[test]
    fn equal_layouts_hash_equal() {
        let a = Layout::attention_qkv(1, 8, 2, 1.0).unwrap();
        let b = Layout::attention_qkv(1, 8, 2, 1.0).unwrap();
        let c = Layout::attention_qkv(1, 8, 2, 0.5).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn invalid_rank_and_duplicates() {
        let bad = ModuleSpec {
            placement: "x".into(),
            m: 2,
            n: 3,
            r: 3,
            alpha: 1.0,
        };
        assert!(Layout::new(vec![bad]).is_err());
        let ok = ModuleSpec {
            placement: "x".into(),
            m: 2,
            n: 3,
            r: 1,
            alpha: 1.0,
        };
        assert!(Layout::new(vec![ok.clone(), ok]).is_err());
        assert!(Layout::new(vec![]).is_err());
    }
}
