//! Subsets of source indices.
//!
//! Sources are indexed `0..M` internally. A [`SourceSet`] is a sorted,
//! duplicate-free vector of indices; `M` stays small (at most a few hundred),
//! so linear scans and binary searches beat bit tricks and fancier structures.

use alloc::vec::Vec;

/// A sorted, duplicate-free subset of `[0, M)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SourceSet(Vec<usize>);

impl SourceSet {
    /// The empty subset.
    pub const fn empty() -> Self {
        SourceSet(Vec::new())
    }

    /// Builds a set from arbitrary indices, sorting and deduplicating.
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        SourceSet(indices)
    }

    /// The full set `{0, …, m-1}`.
    pub fn full(m: usize) -> Self {
        SourceSet((0..m).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, usize> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Complement within `[0, m)`.
    pub fn complement(&self, m: usize) -> SourceSet {
        let mut out = Vec::with_capacity(m - self.0.len());
        let mut next = self.0.iter().copied().peekable();
        for i in 0..m {
            if next.peek() == Some(&i) {
                next.next();
            } else {
                out.push(i);
            }
        }
        SourceSet(out)
    }

    /// `self \ other`.
    pub fn difference(&self, other: &SourceSet) -> SourceSet {
        SourceSet(
            self.0
                .iter()
                .copied()
                .filter(|i| !other.contains(*i))
                .collect(),
        )
    }

    /// `self ∪ other`.
    pub fn union(&self, other: &SourceSet) -> SourceSet {
        let mut v: Vec<usize> = self.0.iter().chain(other.iter()).copied().collect();
        v.sort_unstable();
        v.dedup();
        SourceSet(v)
    }

    /// `true` when every index lies in `[0, m)`.
    pub fn within(&self, m: usize) -> bool {
        self.0.last().is_none_or(|&last| last < m)
    }

    /// Replaces the contents in place, reusing capacity.
    pub(crate) fn assign_from(&mut self, items: &[usize]) {
        self.0.clear();
        self.0.extend_from_slice(items);
        self.0.sort_unstable();
        self.0.dedup();
    }
}

impl FromIterator<usize> for SourceSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        SourceSet::from_indices(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a SourceSet {
    type Item = &'a usize;
    type IntoIter = core::slice::Iter<'a, usize>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl From<Vec<usize>> for SourceSet {
    fn from(v: Vec<usize>) -> Self {
        SourceSet::from_indices(v)
    }
}
