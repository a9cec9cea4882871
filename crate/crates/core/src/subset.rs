use std::fmt;

/// Largest feature count any engine accepts. Subsets are packed into a `u64`.
pub const MAX_FEATURES: usize = 64;

/// A set of feature indices packed into a machine word; bit `j` is feature `j`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Subset(pub u64);

impl Subset {
    pub const EMPTY: Subset = Subset(0);

    /// The grand coalition `{0, .., d-1}`.
    pub fn full(d: usize) -> Self {
        debug_assert!(d <= MAX_FEATURES);
        if d == 64 {
            Subset(u64::MAX)
        } else {
            Subset((1u64 << d) - 1)
        }
    }

    pub fn singleton(j: usize) -> Self {
        Subset(1u64 << j)
    }

    pub fn from_features<I: IntoIterator<Item = usize>>(features: I) -> Self {
        Subset(features.into_iter().fold(0u64, |acc, j| acc | (1u64 << j)))
    }

    #[inline]
    pub fn contains(self, j: usize) -> bool {
        self.0 >> j & 1 == 1
    }

    #[inline]
    pub fn with(self, j: usize) -> Self {
        Subset(self.0 | (1u64 << j))
    }

    #[inline]
    pub fn without(self, j: usize) -> Self {
        Subset(self.0 & !(1u64 << j))
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn is_subset_of(self, other: Subset) -> bool {
        self.0 & !other.0 == 0
    }

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Members in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let j = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(j)
            }
        })
    }
}

impl fmt::Debug for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Iterates every subset of `mask`, including the empty set and `mask` itself.
pub fn subsets_of(mask: Subset) -> impl Iterator<Item = Subset> {
    let m = mask.0;
    let mut next = Some(0u64);
    std::iter::from_fn(move || {
        let cur = next?;
        next = if cur == m { None } else { Some((cur.wrapping_sub(m)) & m) };
        Some(Subset(cur))
    })
}
