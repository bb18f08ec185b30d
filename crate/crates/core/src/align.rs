//! Weighted Levenshtein distance, the Levenshtein ratio, and ground-truth
//! edit scripts.
//!
//! INSERT and DELETE cost 1, REPLACE costs 2. The same cost model drives the
//! evaluation ratio and the supervision scripts built by [`align`].

use crate::edit::{CaptionState, EditOp, EditScript, Slot};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

const INSERT_COST: usize = 1;
const DELETE_COST: usize = 1;
const REPLACE_COST: usize = 2;

fn cost_table(a: &[TokenId], b: &[TokenId]) -> Vec<Vec<usize>> {
    let (m, n) = (a.len(), b.len());
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i * DELETE_COST;
    }
    for j in 0..=n {
        d[0][j] = j * INSERT_COST;
    }
    for i in 1..=m {
        for j in 1..=n {
            let diag = if a[i - 1] == b[j - 1] { d[i - 1][j - 1] } else { d[i - 1][j - 1] + REPLACE_COST };
            d[i][j] = diag.min(d[i - 1][j] + DELETE_COST).min(d[i][j - 1] + INSERT_COST);
        }
    }
    d
}

/// Minimum of `#INSERT + #DELETE + 2 * #REPLACE` over all scripts turning
/// `a` into `b`.
pub fn weighted_ldist(a: &[TokenId], b: &[TokenId]) -> usize {
    // Two-row variant of `cost_table`.
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).map(|j| j * INSERT_COST).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = (i + 1) * DELETE_COST;
        for (j, &y) in b.iter().enumerate() {
            let diag = if x == y { prev[j] } else { prev[j] + REPLACE_COST };
            cur[j + 1] = diag.min(prev[j + 1] + DELETE_COST).min(cur[j] + INSERT_COST);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// `(m + n - ldist) / (m + n)`; two empty sequences have ratio 1.
pub fn lev_ratio(a: &[TokenId], b: &[TokenId]) -> f64 {
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    (total - weighted_ldist(a, b)) as f64 / total as f64
}

/// One optimal alignment, expressed per source position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// Op applied to each source token, with the target word for REPLACE.
    pub ops: Vec<(EditOp, Option<TokenId>)>,
    /// `gaps[i]` are the target words inserted after source position `i`
    /// (position 0 is before the first token), in order.
    pub gaps: Vec<Vec<TokenId>>,
    pub cost: usize,
}

/// Backtraces one optimal path from `source` to `target` with priority
/// KEEP > REPLACE > INSERT > DELETE at every cell.
pub fn optimal_alignment(source: &[TokenId], target: &[TokenId]) -> Alignment {
    let d = cost_table(source, target);
    let (m, n) = (source.len(), target.len());
    let mut ops = vec![(EditOp::Keep, None); m];
    let mut gaps = vec![Vec::new(); m + 1];
    let (mut i, mut j) = (m, n);
    while i > 0 || j > 0 {
        let here = d[i][j];
        if i > 0 && j > 0 && source[i - 1] == target[j - 1] && here == d[i - 1][j - 1] {
            ops[i - 1] = (EditOp::Keep, None);
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && source[i - 1] != target[j - 1] && here == d[i - 1][j - 1] + REPLACE_COST {
            ops[i - 1] = (EditOp::Replace, Some(target[j - 1]));
            i -= 1;
            j -= 1;
        } else if j > 0 && here == d[i][j - 1] + INSERT_COST {
            gaps[i].push(target[j - 1]);
            j -= 1;
        } else {
            debug_assert!(i > 0 && here == d[i - 1][j] + DELETE_COST);
            ops[i - 1] = (EditOp::Delete, None);
            i -= 1;
        }
    }
    for g in &mut gaps {
        g.reverse();
    }
    Alignment { ops, gaps, cost: d[m][n] }
}

/// Ground-truth single-step script moving `current` towards `target`.
///
/// Every REPLACE and DELETE of the optimal path is applied at once. Each
/// insertion gap contributes only its first word, and only when the gap
/// follows the sentinel or a KEEP; the remaining words are left for later
/// iterations.
pub fn align(current: &CaptionState, target: &[TokenId]) -> EditScript {
    align_ids(&current.ids(), target)
}

pub fn align_ids(current: &[TokenId], target: &[TokenId]) -> EditScript {
    let path = optimal_alignment(current, target);
    let mut slots = Vec::with_capacity(current.len() + 1);
    slots.push(match path.gaps[0].first() {
        Some(&w) => Slot::insert(w),
        None => Slot::KEEP,
    });
    for (i, &(op, word)) in path.ops.iter().enumerate() {
        let slot = match op {
            EditOp::Keep => match path.gaps[i + 1].first() {
                Some(&w) => Slot::insert(w),
                None => Slot::KEEP,
            },
            EditOp::Replace => Slot::replace(word.expect("replace carries a word")),
            EditOp::Delete => Slot::DELETE,
            EditOp::Insert => unreachable!("source positions never insert"),
        };
        slots.push(slot);
    }
    EditScript::new(slots)
}

/// Test oracle: exhaustive shortest-path search over edit sequences.
///
/// Nodes are sequences over the symbols of `a` and `b` no longer than
/// `max(|a|, |b|) + 1`; edges are single INSERT (1), DELETE (1) and REPLACE (2)
/// edits. Slow by construction; inputs are limited to 6 tokens.
pub fn brute_force_min_distance(a: &[TokenId], b: &[TokenId]) -> Result<usize> {
    if a.len() > 6 || b.len() > 6 {
        return Err(Error::InvalidArgument("brute force limited to 6 tokens".into()));
    }
    let mut alphabet: Vec<TokenId> = a.iter().chain(b).copied().collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let max_len = a.len().max(b.len()) + 1;
    let search = EditSearch::from_source(a, &alphabet, max_len)?;
    Ok(search.distance_to(b).expect("target lies inside the search space"))
}

/// All shortest edit distances from one source sequence, over a fixed
/// alphabet and a bounded sequence length.
pub struct EditSearch {
    alphabet: Vec<TokenId>,
    max_len: usize,
    dist: Vec<u8>,
}

impl EditSearch {
    pub fn from_source(source: &[TokenId], alphabet: &[TokenId], max_len: usize) -> Result<Self> {
        let base = alphabet.len().max(1);
        if source.len() > max_len {
            return Err(Error::InvalidArgument("source longer than search bound".into()));
        }
        let size = (0..=max_len).map(|k| base.pow(k as u32)).sum::<usize>();
        if size > 50_000_000 {
            return Err(Error::InvalidArgument("search space too large".into()));
        }
        let mut search = Self { alphabet: alphabet.to_vec(), max_len, dist: vec![u8::MAX; size] };
        let start = search
            .encode(source)
            .ok_or_else(|| Error::InvalidArgument("source symbol outside alphabet".into()))?;
        search.run(start);
        Ok(search)
    }

    /// Bijective base-|alphabet| numbering of all sequences up to `max_len`.
    fn encode(&self, seq: &[TokenId]) -> Option<usize> {
        let base = self.alphabet.len();
        let mut idx = 0usize;
        for s in seq {
            let d = self.alphabet.binary_search(s).ok()?;
            idx = idx * base + d + 1;
        }
        Some(idx)
    }

    fn decode_digits(&self, mut idx: usize, out: &mut Vec<usize>) {
        let base = self.alphabet.len();
        out.clear();
        while idx > 0 {
            out.push((idx - 1) % base);
            idx = (idx - 1) / base;
        }
        out.reverse();
    }

    fn encode_digits(&self, digits: impl Iterator<Item = usize>) -> usize {
        let base = self.alphabet.len();
        digits.fold(0, |acc, d| acc * base + d + 1)
    }

    fn run(&mut self, start: usize) {
        let base = self.alphabet.len();
        let mut buckets: Vec<Vec<usize>> = vec![vec![start]];
        self.dist[start] = 0;
        let mut digits = Vec::new();
        let mut cost = 0usize;
        while cost < buckets.len() {
            let frontier = std::mem::take(&mut buckets[cost]);
            for node in frontier {
                if self.dist[node] as usize != cost {
                    continue;
                }
                self.decode_digits(node, &mut digits);
                let len = digits.len();
                let relax = |next: usize, step: usize, buckets: &mut Vec<Vec<usize>>, dist: &mut Vec<u8>| {
                    let c = cost + step;
                    if (dist[next] as usize) > c {
                        dist[next] = c as u8;
                        if buckets.len() <= c {
                            buckets.resize(c + 1, Vec::new());
                        }
                        buckets[c].push(next);
                    }
                };
                for p in 0..len {
                    let next = self.encode_digits(
                        digits.iter().enumerate().filter(|&(k, _)| k != p).map(|(_, &d)| d),
                    );
                    relax(next, DELETE_COST, &mut buckets, &mut self.dist);
                    for s in 0..base {
                        if s != digits[p] {
                            let next = self.encode_digits(
                                digits.iter().enumerate().map(|(k, &d)| if k == p { s } else { d }),
                            );
                            relax(next, REPLACE_COST, &mut buckets, &mut self.dist);
                        }
                    }
                }
                if len < self.max_len {
                    for p in 0..=len {
                        for s in 0..base {
                            let next = self.encode_digits(
                                digits[..p].iter().copied().chain(std::iter::once(s)).chain(digits[p..].iter().copied()),
                            );
                            relax(next, INSERT_COST, &mut buckets, &mut self.dist);
                        }
                    }
                }
            }
            cost += 1;
        }
    }

    pub fn distance_to(&self, target: &[TokenId]) -> Option<usize> {
        if target.len() > self.max_len {
            return None;
        }
        let d = self.dist[self.encode(target)?];
        (d != u8::MAX).then_some(d as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::{apply_script, Direction};

    // a=2, b=3, c=4, d=5 ...
    fn s(text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| w.as_bytes()[0] as TokenId - b'a' as TokenId + 2).collect()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(weighted_ldist(&s("a b c"), &s("a b c")), 0);
        assert_eq!(weighted_ldist(&s("a b c"), &s("d e f")), 6);
        assert_eq!(weighted_ldist(&s("a"), &s("a b")), 1);
        assert_eq!(weighted_ldist(&[], &s("a b")), 2);
        assert_eq!(weighted_ldist(&s("x"), &[]), 1);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(lev_ratio(&s("a b c d e"), &s("a b c d e")), 1.0);
        assert_eq!(lev_ratio(&s("a b c"), &s("d e f")), 0.0);
        assert!((lev_ratio(&s("a"), &s("a b")) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(lev_ratio(&[], &[]), 1.0);
    }

    #[test]
    fn table_and_two_row_agree() {
        let (a, b) = (s("a b c a d"), s("b a c d d a"));
        assert_eq!(cost_table(&a, &b)[5][6], weighted_ldist(&a, &b));
    }

    #[test]
    fn brute_force_small_cases() {
        assert_eq!(brute_force_min_distance(&s("a b"), &s("a b")).unwrap(), 0);
        assert_eq!(brute_force_min_distance(&s("x"), &[]).unwrap(), 1);
        assert_eq!(brute_force_min_distance(&s("a b c"), &s("d e f")).unwrap(), 6);
        assert!(brute_force_min_distance(&s("a a a a a a a"), &s("a")).is_err());
    }

    #[test]
    fn sentinel_insert_alignment() {
        let script = align_ids(&s("r c"), &s("a r c"));
        assert_eq!(script.slots, vec![Slot::insert(s("a")[0]), Slot::KEEP, Slot::KEEP]);
    }

    #[test]
    fn identical_aligns_to_keep() {
        let x = s("a b c d");
        assert!(align_ids(&x, &x).is_identity());
        assert!(align_ids(&[], &[]).is_identity());
    }

    #[test]
    fn deferred_insertion_after_keep() {
        // a -> a b c: one gap of two words after a KEEP.
        let script = align_ids(&s("a"), &s("a b c"));
        assert_eq!(script.slots, vec![Slot::KEEP, Slot::insert(s("b")[0])]);
    }

    #[test]
    fn editing_example_round_trip() {
        // "a dog mat red" -> "a cat sat on mat"
        let (x_t, x_0) = (s("a d m r"), s("a c s o m"));
        let mut cur = CaptionState::reference(&x_t, 0);
        let mut dist = weighted_ldist(&x_t, &x_0);
        for _ in 0..x_0.len() {
            if cur.ids() == x_0 {
                break;
            }
            let script = align(&cur, &x_0);
            script.validate(cur.len()).unwrap();
            cur = apply_script(&cur, &script, Direction::Denoising).unwrap();
            let next = weighted_ldist(&cur.ids(), &x_0);
            assert!(next < dist);
            dist = next;
        }
        assert_eq!(cur.ids(), x_0);
    }
}
