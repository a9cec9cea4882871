//! Fixed-length bitsets over subjects, stored as 64-bit words.
//!
//! Cohort refinement is a word-wise AND; cardinality is a popcount. Masked sums
//! take a fast path for saturated words using precomputed per-word sums.

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitset {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

impl Bitset {
    pub fn zeros(len: usize) -> Self {
        Bitset {
            words: vec![0; word_count(len)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut words = vec![u64::MAX; word_count(len)];
        if let Some(last) = words.last_mut() {
            let rem = len % 64;
            if rem != 0 {
                *last = (1u64 << rem) - 1;
            }
        }
        Bitset { words, len }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut words = vec![0u64; word_count(len)];
        for (w, word) in words.iter_mut().enumerate() {
            let base = w * 64;
            let end = (base + 64).min(len);
            let mut acc = 0u64;
            for i in base..end {
                if f(i) {
                    acc |= 1u64 << (i - base);
                }
            }
            *word = acc;
        }
        Bitset { words, len }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] |= 1u64 << (i % 64);
    }

    #[inline]
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.words.iter().any(|&w| w != 0)
    }

    /// `self &= other`, returning the new cardinality.
    #[inline]
    pub fn and_assign(&mut self, other: &Bitset) -> usize {
        debug_assert_eq!(self.len, other.len);
        let mut count = 0usize;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= *b;
            count += a.count_ones() as usize;
        }
        count
    }

    /// Writes `a & b` into `self`, returning the cardinality.
    #[inline]
    pub fn assign_and(&mut self, a: &Bitset, b: &Bitset) -> usize {
        debug_assert!(self.len == a.len && a.len == b.len);
        let mut count = 0usize;
        for ((out, x), y) in self.words.iter_mut().zip(&a.words).zip(&b.words) {
            *out = x & y;
            count += out.count_ones() as usize;
        }
        count
    }

    pub fn is_subset_of(&self, other: &Bitset) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn first_set(&self) -> Option<usize> {
        self.words
            .iter()
            .enumerate()
            .find(|(_, &w)| w != 0)
            .map(|(k, w)| k * 64 + w.trailing_zeros() as usize)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(k, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let i = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(k * 64 + i)
                }
            })
        })
    }
}

impl std::fmt::Debug for Bitset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Bitset[")?;
        for i in 0..self.len {
            write!(f, "{}", if self.get(i) { '1' } else { '0' })?;
        }
        write!(f, "]")
    }
}

/// Values laid out for masked summation, with one precomputed sum per 64-row word.
#[derive(Debug, Clone)]
pub struct MaskedSummer {
    values: Vec<f64>,
    word_sums: Vec<f64>,
}

impl MaskedSummer {
    pub fn new(values: &[f64]) -> Self {
        let word_sums = values.chunks(64).map(|c| c.iter().sum()).collect();
        MaskedSummer {
            values: values.to_vec(),
            word_sums,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sum of `values[i]` over the set bits of `mask`.
    #[inline]
    pub fn sum(&self, mask: &Bitset) -> f64 {
        debug_assert_eq!(mask.len(), self.values.len());
        let mut total = 0.0;
        for (k, &w) in mask.words().iter().enumerate() {
            if w == 0 {
                continue;
            }
            if w == u64::MAX {
                total += self.word_sums[k];
                continue;
            }
            let base = k * 64;
            let mut bits = w;
            while bits != 0 {
                let i = bits.trailing_zeros() as usize;
                total += self.values[base + i];
                bits &= bits - 1;
            }
        }
        total
    }
}
