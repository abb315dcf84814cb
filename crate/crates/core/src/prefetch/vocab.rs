use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_VOCAB: usize = 256;

/// The `k` most frequent line deltas; everything else maps to one
/// out-of-vocabulary id equal to `len()`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaVocab {
    deltas: Vec<i64>,
    #[serde(skip)]
    index: HashMap<i64, usize>,
}

impl DeltaVocab {
    /// Ranks by descending count, then ascending delta.
    pub fn build(deltas: impl IntoIterator<Item = i64>, k: usize) -> Self {
        let mut counts: HashMap<i64, u64> = HashMap::new();
        for d in deltas {
            *counts.entry(d).or_default() += 1;
        }
        let mut ranked: Vec<(i64, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_deltas(ranked.into_iter().take(k).map(|(d, _)| d).collect())
    }

    pub fn from_deltas(deltas: Vec<i64>) -> Self {
        let index = deltas.iter().enumerate().map(|(i, &d)| (d, i)).collect();
        DeltaVocab { deltas, index }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Number of output classes including OOV.
    pub fn classes(&self) -> usize {
        self.deltas.len() + 1
    }

    pub fn oov(&self) -> usize {
        self.deltas.len()
    }

    pub fn id(&self, delta: i64) -> usize {
        self.index.get(&delta).copied().unwrap_or(self.deltas.len())
    }

    pub fn delta(&self, id: usize) -> Option<i64> {
        self.deltas.get(id).copied()
    }

    pub fn deltas(&self) -> &[i64] {
        &self.deltas
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_and_oov() {
        let v = DeltaVocab::build([3, 1, 1, 2, 2, 5, 5, 5], 3);
        assert_eq!(v.deltas(), &[5, 1, 2]);
        assert_eq!(v.id(5), 0);
        assert_eq!(v.id(3), v.oov());
        assert_eq!(v.classes(), 4);
        assert_eq!(v.delta(v.oov()), None);
    }
}
