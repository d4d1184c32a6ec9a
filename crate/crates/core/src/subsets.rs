//! Deterministic enumeration of bounded-size subsets.

use crate::error::{Error, Result};
use crate::types::SubsetIndicator;

pub const DEFAULT_ENUMERATION_CAP: u128 = 10_000_000;

pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    (0..r).fold(1u128, |acc, i| {
        acc.saturating_mul((n - i) as u128) / (i as u128 + 1)
    })
}

/// Number of non-empty subsets of `k` elements with at most `max_size` members.
pub fn subset_count(k: usize, max_size: usize) -> u128 {
    (1..=max_size.min(k)).fold(0u128, |acc, j| acc.saturating_add(binomial(k, j)))
}

/// All non-empty subsets of `0..k` with popcount at most `max_size`,
/// ordered by cardinality and then lexicographically by member indices.
pub fn enumerate_subsets(k: usize, max_size: usize) -> Result<Subsets> {
    enumerate_subsets_capped(k, max_size, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_subsets_capped(k: usize, max_size: usize, cap: u128) -> Result<Subsets> {
    if max_size == 0 || max_size > k {
        return Err(Error::InvalidInput(format!(
            "max_size must satisfy 1 <= max_size <= k (k = {k}, max_size = {max_size})"
        )));
    }
    let count = subset_count(k, max_size);
    if count > cap {
        return Err(Error::SizeLimit { count, cap });
    }
    Ok(Subsets {
        k,
        max_size,
        current: vec![0],
        remaining: count,
    })
}

/// Subsets of exactly `size` members, lexicographic.
pub fn enumerate_exact(k: usize, size: usize) -> Result<impl Iterator<Item = SubsetIndicator>> {
    Ok(enumerate_subsets(k, size)?.filter(move |s| s.popcount() == size))
}

/// Iterator returned by [`enumerate_subsets`].
#[derive(Debug, Clone)]
pub struct Subsets {
    k: usize,
    max_size: usize,
    current: Vec<usize>,
    remaining: u128,
}

impl Subsets {
    fn advance(&mut self) {
        let k = self.k;
        let r = self.current.len();
        // rightmost position that can still move right
        let mut i = r;
        while i > 0 {
            i -= 1;
            if self.current[i] < k - r + i {
                self.current[i] += 1;
                for j in i + 1..r {
                    self.current[j] = self.current[j - 1] + 1;
                }
                return;
            }
        }
        let next = r + 1;
        self.current = (0..next).collect();
    }
}

impl Iterator for Subsets {
    type Item = SubsetIndicator;

    fn next(&mut self) -> Option<SubsetIndicator> {
        if self.remaining == 0 || self.current.len() > self.max_size {
            return None;
        }
        let mut bits = vec![false; self.k];
        for &i in &self.current {
            bits[i] = true;
        }
        self.remaining -= 1;
        self.advance();
        Some(SubsetIndicator::from_bits(bits))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (n, Some(n))
    }
}
